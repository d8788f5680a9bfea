use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ps2net::dataio::{prep_dir, test_split, train_split, PointCloud, SceneSpec, Setup, CLOUD_EXT};
use ps2net::eval::{
    ablation_table, check_gradients, check_knn_oracle, check_permutation, colorize_predictions, default_palette,
    evaluate_checkpoint, experiment_text, fit_to_data, run_ablation, run_sweep, sweep_table, CheckLine, Dataset,
    SweepParam,
};
use ps2net::network::{checkpoint, graph_for, train, RunConfig, Trainer};
use ps2net::{Error, Result};

#[derive(Parser)]
#[command(name = "ps2net", version, about = "Point-cloud semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic rooms into OUT/train and OUT/test.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition and resample rooms into blocks.
    Prep {
        #[arg(long)]
        setup: Setup,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Train on prepared blocks and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        batch: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label a room and color its points by predicted class.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test blocks of a prepared dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate the four architecture variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a property suite; exits nonzero if any check fails.
    Check {
        #[arg(long)]
        mode: CheckMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CheckMode {
    Gradients,
    Permutation,
    KnnOracle,
}

fn synth(spec: &Path, seed: u64, out: &Path) -> Result<()> {
    let spec = SceneSpec::load(spec)?;
    let (train, test) = ps2net::eval::generate_rooms(&spec, seed)?;
    for (split, rooms) in [("train", train), ("test", test)] {
        if rooms.is_empty() {
            continue;
        }
        let dir = out.join(split);
        std::fs::create_dir_all(&dir)?;
        for (name, cloud) in &rooms {
            cloud.write(&dir.join(format!("{name}.{CLOUD_EXT}")))?;
        }
        println!("{split}: {} scenes", rooms.len());
    }
    Ok(())
}

fn train_cmd(data: &Path, config: &Path, epochs: usize, batch: usize, seed: u64, out: &Path) -> Result<()> {
    let mut config = RunConfig::load(config)?;
    config.train.epochs = epochs;
    config.train.batch_size = batch;
    let set = train_split(data)?;
    let config = fit_to_data(&config, &set)?;
    let blocks = set.train_blocks(config.network.k_neighbors)?;
    let mut trainer = Trainer::new(&config, seed, set.setup.key())?;
    let report = train(&mut trainer, &blocks, Some(out))?;
    for e in &report.epochs {
        println!(
            "epoch {:>4}  loss {:.4}  accuracy {:.4}  lr {}  {:.1} s",
            e.epoch, e.loss, e.accuracy, e.learning_rate, e.seconds
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn predict(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let trainer = checkpoint::load(ckpt)?;
    let setup: Setup = trainer.setup.parse()?;
    let room = PointCloud::read(input)?;
    let model = &trainer.model;
    let mut pred = vec![None; room.len()];
    for block in setup.partition(&room)? {
        let features = block.cloud.input_tensor();
        let graph = graph_for(&features, model.config.k_neighbors)?;
        for (j, p) in model.predict(&features, &graph)?.into_iter().enumerate() {
            if block.home[j] {
                pred[block.ids[j]] = Some(p);
            }
        }
    }
    let pred: Vec<usize> = pred
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| Error::Data(format!("point {i} was not covered by any block"))))
        .collect::<Result<_>>()?;
    let mut labeled = room.clone();
    labeled.num_classes = model.config.num_classes;
    if labeled.class_names.as_ref().is_some_and(|n| n.len() != labeled.num_classes) {
        labeled.class_names = None;
    }
    labeled.labels = Some(pred.clone());
    let colored = colorize_predictions(&labeled, &pred, &default_palette(model.config.num_classes))?;
    colored.write(out)?;
    println!("labeled {} points into {}", pred.len(), out.display());
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: &Path, report: &Path) -> Result<()> {
    let r = evaluate_checkpoint(ckpt, &test_split(data)?)?;
    std::fs::write(report, r.to_text())?;
    println!(
        "OA {:.4}  mIoU {:.4}  ({} points)",
        r.metrics.overall_accuracy(),
        r.metrics.mean_iou(),
        r.metrics.total()
    );
    Ok(())
}

fn ablate(data: &Path, config: &Path, seed: u64, report: &Path) -> Result<()> {
    let reports = run_ablation(&Dataset::load(data)?, &RunConfig::load(config)?, seed)?;
    let table = ablation_table(&reports);
    std::fs::write(report, experiment_text("ablation", &table, &reports))?;
    print!("{table}");
    Ok(())
}

fn sweep(data: &Path, config: &Path, param: SweepParam, values: &[usize], seed: u64, report: &Path) -> Result<()> {
    let reports = run_sweep(&Dataset::load(data)?, &RunConfig::load(config)?, param, values, seed)?;
    let table = sweep_table(param, values, &reports);
    std::fs::write(report, experiment_text(&format!("sweep over {param}"), &table, &reports))?;
    print!("{table}");
    Ok(())
}

fn check(mode: CheckMode, seed: u64) -> Result<bool> {
    let lines: Vec<CheckLine> = match mode {
        CheckMode::Gradients => check_gradients(seed)?,
        CheckMode::Permutation => check_permutation(seed)?,
        CheckMode::KnnOracle => check_knn_oracle(seed)?,
    };
    for l in &lines {
        println!("{l}");
    }
    Ok(lines.iter().all(|l| l.passed))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { spec, seed, out } => synth(&spec, seed, &out)?,
        Command::Prep { setup, input, out, seed } => {
            for (split, count) in prep_dir(setup, &input, &out, seed)? {
                println!("{split}: {count} blocks");
            }
        }
        Command::Train { data, config, epochs, batch, seed, out } => train_cmd(&data, &config, epochs, batch, seed, &out)?,
        Command::Predict { ckpt, input, out } => predict(&ckpt, &input, &out)?,
        Command::Eval { ckpt, data, report } => eval_cmd(&ckpt, &data, &report)?,
        Command::Ablate { data, config, seed, report } => ablate(&data, &config, seed, &report)?,
        Command::Sweep { data, config, param, values, seed, report } => sweep(&data, &config, param, &values, seed, &report)?,
        Command::Check { mode, seed } => return check(mode, seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

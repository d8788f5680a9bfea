use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use super::report::format_table;
use super::{Metrics, RunReport};
use crate::dataio::{test_split, train_split, BlockSet};
use crate::error::{Error, Result};
use crate::network::{argmax_rows, checkpoint, train, Model, RunConfig, TrainBlock, Trainer};
use crate::layers::{Mode, Variant};

/// Prepared training and test blocks.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: BlockSet,
    pub test: BlockSet,
}

impl Dataset {
    /// Reads `dir/train` and `dir/test`.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join("train").is_dir() || !dir.join("test").is_dir() {
            return Err(Error::contract(format!(
                "{} needs train/ and test/ block sets",
                dir.display()
            )));
        }
        Ok(Dataset {
            train: train_split(dir)?,
            test: test_split(dir)?,
        })
    }
}

/// Copy of `config` whose input width and class count match the data.
pub fn fit_to_data(config: &RunConfig, data: &BlockSet) -> Result<RunConfig> {
    let first = data
        .blocks
        .first()
        .ok_or_else(|| Error::contract("block set is empty"))?;
    let mut fitted = config.clone();
    if fitted.network.f0 != first.cloud.f0 || fitted.network.num_classes != data.num_classes() {
        log::info!(
            "using f0 = {} and num_classes = {} from the data",
            first.cloud.f0,
            data.num_classes()
        );
    }
    fitted.network.f0 = first.cloud.f0;
    fitted.network.num_classes = data.num_classes();
    fitted.network.validate()?;
    Ok(fitted)
}

/// Eval-mode confusion over every masked-in point of every block.
pub fn evaluate(model: &Model, blocks: &[TrainBlock]) -> Result<Metrics> {
    let mut metrics = Metrics::new(model.config.num_classes);
    for b in blocks {
        let logits = model.forward(&b.features, &b.graph, Mode::Eval)?;
        metrics.accumulate_masked(&argmax_rows(&logits), &b.labels, b.mask.as_deref())?;
    }
    Ok(metrics)
}

/// Trains from scratch on `data.train` and evaluates on `data.test`.
pub fn run_experiment(name: &str, config: &RunConfig, seed: u64, data: &Dataset, checkpoint_path: Option<&Path>) -> Result<RunReport> {
    let config = fit_to_data(config, &data.train)?;
    let k = config.network.k_neighbors;
    let started = Instant::now();
    let train_blocks = data.train.train_blocks(k)?;
    let test_blocks = data.test.train_blocks(k)?;
    let graph_seconds = started.elapsed().as_secs_f64();
    let mut trainer = Trainer::new(&config, seed, data.train.setup.key())?;
    let started = Instant::now();
    let history = train(&mut trainer, &train_blocks, checkpoint_path)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let metrics = evaluate(&trainer.model, &test_blocks)?;
    let eval_seconds = started.elapsed().as_secs_f64();
    log::info!("{name}: OA {:.4} mIoU {:.4}", metrics.overall_accuracy(), metrics.mean_iou());
    Ok(RunReport {
        name: name.to_string(),
        config,
        seed,
        param_count: trainer.model.param_count(),
        epochs: history.epochs,
        metrics,
        class_names: data.train.class_names(),
        timings: vec![
            ("graphs".into(), graph_seconds),
            ("train".into(), train_seconds),
            ("eval".into(), eval_seconds),
        ],
        checkpoint: checkpoint_path.map(|p| p.display().to_string()),
    })
}

/// Evaluates a saved checkpoint on a block set.
pub fn evaluate_checkpoint(path: &Path, data: &BlockSet) -> Result<RunReport> {
    let trainer = checkpoint::load(path)?;
    let started = Instant::now();
    let blocks = data.train_blocks(trainer.model.config.k_neighbors)?;
    let metrics = evaluate(&trainer.model, &blocks)?;
    Ok(RunReport {
        name: "eval".into(),
        config: trainer.run_config(),
        seed: trainer.model.seed,
        param_count: trainer.model.param_count(),
        epochs: Vec::new(),
        metrics,
        class_names: data.class_names(),
        timings: vec![("eval".into(), started.elapsed().as_secs_f64())],
        checkpoint: Some(path.display().to_string()),
    })
}

/// The four variants trained with the same seed and data, in the order
/// full, w/o local, w/o EdgeConv, w/o NetVLAD.
pub fn run_ablation(data: &Dataset, base: &RunConfig, seed: u64) -> Result<Vec<RunReport>> {
    Variant::ALL
        .into_iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.network.variant = v;
            run_experiment(v.key(), &cfg, seed, data, None)
        })
        .collect()
}

fn variant_label(r: &RunReport) -> String {
    r.config.network.variant.label().to_string()
}

pub fn ablation_table(reports: &[RunReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                variant_label(r),
                r.param_count.to_string(),
                format!("{:.4}", r.metrics.overall_accuracy()),
                format!("{:.4}", r.metrics.mean_iou()),
            ]
        })
        .collect();
    format_table(&["variant", "params", "OA", "mIoU"], &rows)
}

/// Hyperparameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Encoders,
    K,
    Clusters,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Encoders => "encoders",
            SweepParam::K => "k",
            SweepParam::Clusters => "clusters",
        }
    }

    pub fn apply(self, config: &mut RunConfig, value: usize) {
        let n = &mut config.network;
        match self {
            SweepParam::Encoders => n.num_encoders = value,
            SweepParam::K => n.k_neighbors = value,
            SweepParam::Clusters => n.num_clusters = value,
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoders" => Ok(SweepParam::Encoders),
            "k" => Ok(SweepParam::K),
            "clusters" => Ok(SweepParam::Clusters),
            _ => Err(Error::contract(format!("unknown sweep parameter {s:?} (encoders|k|clusters)"))),
        }
    }
}

/// One run per value, all with the same seed and data.
pub fn run_sweep(data: &Dataset, base: &RunConfig, param: SweepParam, values: &[usize], seed: u64) -> Result<Vec<RunReport>> {
    if values.is_empty() {
        return Err(Error::contract("a sweep needs at least one value"));
    }
    values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            param.apply(&mut cfg, v);
            run_experiment(&format!("{param}={v}"), &cfg, seed, data, None)
        })
        .collect()
}

/// mIoU-vs-value series as a table.
pub fn sweep_table(param: SweepParam, values: &[usize], reports: &[RunReport]) -> String {
    let rows: Vec<Vec<String>> = values
        .iter()
        .zip(reports)
        .map(|(v, r)| {
            vec![
                v.to_string(),
                r.param_count.to_string(),
                format!("{:.4}", r.metrics.overall_accuracy()),
                format!("{:.4}", r.metrics.mean_iou()),
            ]
        })
        .collect();
    format_table(&[param.key(), "params", "OA", "mIoU"], &rows)
}

/// Table followed by the full report of every run.
pub fn experiment_text(title: &str, table: &str, reports: &[RunReport]) -> String {
    let mut s = format!("# {title}\n\n{table}\n");
    for r in reports {
        s.push('\n');
        s.push_str(&r.to_text());
    }
    s
}

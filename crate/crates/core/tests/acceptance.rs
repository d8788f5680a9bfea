//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits nonzero if any failed.
//!
//! The desk-benchmark criteria train twelve small models and take roughly
//! twenty minutes on one core.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ps2net::dataio::{generate_scene, sample_block_n, SceneSpec, Setup};
use ps2net::eval::{
    ablation_table, check_gradients, check_knn_oracle, check_permutation, desk_dataset, desk_run_config, evaluate,
    run_ablation, RunReport, DESK_BLOCK_POINTS, GRAD_COORDS_PER_GROUP,
};
use ps2net::knn::KnnGraph;
use ps2net::layers::{
    EdgeConv, Mode, NetVlad, ParamStore, Session, Variant, BN_EPS, EDGE_HIDDEN, GLOBAL_WIDTH, LOCAL_WIDTH,
};
use ps2net::network::{
    build_model, lr_at_epoch, train_step, Adam, NetworkConfig, RunConfig, TrainBlock, TrainConfig,
};
use ps2net::tensor::Tensor;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    let took = started.elapsed();
    if took > limit {
        Err(format!("took {:.1} s, limit {} s", took.as_secs_f64(), limit.as_secs()))
    } else {
        Ok(())
    }
}

// ---- straight-line references ----

fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.value(id).data().to_vec()
}

/// Affine map, batch norm with running statistics, optional ReLU.
fn mlp_row(store: &ParamStore, prefix: &str, v: &[f64], relu: bool) -> Vec<f64> {
    let w = param(store, &format!("{prefix}.weight"));
    let b = param(store, &format!("{prefix}.bias"));
    let gamma = param(store, &format!("{prefix}.bn.gamma"));
    let beta = param(store, &format!("{prefix}.bn.beta"));
    let mean = param(store, &format!("{prefix}.bn.running_mean"));
    let var = param(store, &format!("{prefix}.bn.running_var"));
    let out = b.len();
    assert_eq!(w.len(), v.len() * out);
    let mut y = vec![0.0; out];
    for o in 0..out {
        let mut s = b[o];
        for i in 0..v.len() {
            s += v[i] * w[i * out + o];
        }
        s = gamma[o] * (s - mean[o]) / (var[o] + BN_EPS).sqrt() + beta[o];
        y[o] = if relu && s < 0.0 { 0.0 } else { s };
    }
    y
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn edgeconv_reference(store: &ParamStore, x: &[Vec<f64>], graph: &KnnGraph) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..x.len() {
        let mut edges = Vec::new();
        for &j in graph.row(i) {
            let mut h = x[i].clone();
            for f in 0..x[i].len() {
                h.push(x[j][f] - x[i][f]);
            }
            let e1 = mlp_row(store, "ec.mlp1", &h, true);
            edges.push(mlp_row(store, "ec.mlp2", &e1, true));
        }
        let k = edges.len() as f64;
        let mut pooled = vec![f64::NEG_INFINITY; EDGE_HIDDEN];
        let mut avg = vec![0.0; EDGE_HIDDEN];
        for e in &edges {
            for c in 0..EDGE_HIDDEN {
                pooled[c] = pooled[c].max(e[c]);
                avg[c] += e[c] / k;
            }
        }
        pooled.extend(avg);
        out.push(mlp_row(store, "ec.mlp_out", &pooled, true));
    }
    out
}

/// Returns (assignment N×M, VLAD M×D after both normalizations, reduced
/// global descriptor).
fn netvlad_reference(store: &ParamStore, y: &[Vec<f64>], m: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let d = y[0].len();
    let c = param(store, "nv.centers");
    let w = param(store, "nv.assign.weight");
    let b = param(store, "nv.assign.bias");
    let mut assign = Vec::new();
    for yi in y {
        let logits: Vec<f64> = (0..m).map(|k| b[k] + (0..d).map(|f| yi[f] * w[f * m + k]).sum::<f64>()).collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = ex.iter().sum();
        assign.push(ex.iter().map(|e| e / z).collect::<Vec<f64>>());
    }
    let mut vlad = vec![vec![0.0; d]; m];
    for (i, yi) in y.iter().enumerate() {
        for k in 0..m {
            for f in 0..d {
                vlad[k][f] += assign[i][k] * (yi[f] - c[k * d + f]);
            }
        }
    }
    for row in &mut vlad {
        let n = norm(row).max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    let flat: Vec<f64> = vlad.concat();
    let n = norm(&flat).max(1e-12);
    for row in &mut vlad {
        row.iter_mut().for_each(|v| *v /= n);
    }
    let global = mlp_row(store, "nv.reduce", &vlad.concat(), true);
    (assign, vlad, global)
}

/// Replaces every tensor in the store with random values so batch norm is
/// not the identity.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let n = store.value(id).numel();
        let data = (0..n)
            .map(|_| {
                if name.ends_with("running_var") || name.ends_with("gamma") {
                    rng.gen_range(0.5..1.5)
                } else {
                    rng.gen_range(-0.5..0.5)
                }
            })
            .collect();
        store.set_data(id, data).unwrap();
    }
}

fn max_diff(a: &[Vec<f64>], b: &Tensor) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        assert_eq!(row.len(), b.row(i).len());
        for (x, y) in row.iter().zip(b.row(i)) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

// ---- criteria ----

fn permutation() -> Outcome {
    let started = Instant::now();
    let lines = check_permutation(7).map_err(|e| e.to_string())?;
    within(started, Duration::from_secs(60))?;
    let l = &lines[0];
    ensure(l.passed, format!("{} ({:.1} s)", l.detail, started.elapsed().as_secs_f64()))
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let lines = check_gradients(7).map_err(|e| e.to_string())?;
    within(started, Duration::from_secs(300))?;
    for l in &lines {
        println!("    {l}");
    }
    ensure(
        lines.iter().all(|l| l.passed) && lines.len() >= 8,
        format!(
            "{} layer types x {GRAD_COORDS_PER_GROUP} scalars ({:.1} s)",
            lines.len(),
            started.elapsed().as_secs_f64()
        ),
    )
}

fn oracles() -> Outcome {
    let started = Instant::now();
    let knn = check_knn_oracle(7).map_err(|e| e.to_string())?;
    if !knn[0].passed {
        return Err(knn[0].detail.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst_ec: f64 = 0.0;
    let mut worst_nv: f64 = 0.0;
    for case in 0..10 {
        // EdgeConv on N=4, K=2, F=3.
        let mut store = ParamStore::new();
        let ec = EdgeConv::new(&mut store, &mut rng, "ec", 3).unwrap();
        randomize(&mut store, &mut rng);
        let x: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let pts: Vec<[f64; 3]> = x.iter().map(|r| [r[0], r[1], r[2]]).collect();
        let graph = KnnGraph::build(&pts, 2).unwrap();
        let sess = Session::new(&store, Mode::Eval);
        let got = ec.forward(&sess, sess.input(Tensor::from_rows(&x).unwrap()), &graph).unwrap().value();
        assert_eq!(got.shape(), &[4, LOCAL_WIDTH]);
        worst_ec = worst_ec.max(max_diff(&edgeconv_reference(&store, &x, &graph), &got));

        // NetVLAD on N=5, M=3 (and a few other small sizes).
        let (n, m, d) = if case < 5 { (5, 3, 4) } else { (rng.gen_range(1..=8), rng.gen_range(1..=4), 3) };
        let mut store = ParamStore::new();
        let nv = NetVlad::new(&mut store, &mut rng, "nv", d, m).unwrap();
        randomize(&mut store, &mut rng);
        let y: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let sess = Session::new(&store, Mode::Eval);
        let yv = sess.input(Tensor::from_rows(&y).unwrap());
        let parts = nv.aggregate(&sess, yv).unwrap();
        let (global, vlad) = nv.forward(&sess, yv).unwrap();
        let (ra, rv, rg) = netvlad_reference(&store, &y, m);
        worst_nv = worst_nv
            .max(max_diff(&ra, &parts.assignment.value()))
            .max(max_diff(&rv, &vlad.value()))
            .max(max_diff(&[rg], &Tensor::new(vec![1, GLOBAL_WIDTH], global.data()).unwrap()));
    }
    within(started, Duration::from_secs(60))?;
    ensure(
        worst_ec < 1e-9 && worst_nv < 1e-9,
        format!(
            "{}; loop references: EdgeConv max abs diff {worst_ec:.2e}, NetVLAD {worst_nv:.2e}",
            knn[0].detail
        ),
    )
}

fn netvlad_internals() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut assign_err, mut intra_err, mut flat_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut exempt = 0;
    for case in 0..40 {
        let m = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=32);
        let mut store = ParamStore::new();
        let nv = NetVlad::new(&mut store, &mut rng, "nv", d, m).unwrap();
        let mut y: Vec<Vec<f64>> = (0..rng.gen_range(1..=60))
            .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        if case % 10 == 9 {
            // One point sitting on the first center: that cluster's
            // residual is exactly zero.
            let c = param(&store, "nv.centers");
            y = vec![c[..d].to_vec()];
        }
        let sess = Session::new(&store, Mode::Eval);
        let parts = nv.aggregate(&sess, sess.input(Tensor::from_rows(&y).unwrap())).unwrap();
        let a = parts.assignment.value();
        for i in 0..y.len() {
            assign_err = assign_err.max((a.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        let residuals = parts.residuals.value();
        let intra = parts.intra.value();
        for k in 0..m {
            if norm(residuals.row(k)) == 0.0 {
                exempt += 1;
                if norm(intra.row(k)) != 0.0 {
                    return Err(format!("zero residual of cluster {k} did not stay zero"));
                }
                continue;
            }
            intra_err = intra_err.max((norm(intra.row(k)) - 1.0).abs());
        }
        flat_err = flat_err.max((norm(parts.raw.value().data()) - 1.0).abs());
    }
    ensure(
        assign_err < 1e-9 && intra_err < 1e-9 && flat_err < 1e-9 && exempt > 0,
        format!(
            "40 sets: |row sum - 1| {assign_err:.1e}, |intra norm - 1| {intra_err:.1e}, |flat norm - 1| {flat_err:.1e}, {exempt} zero clusters exempt"
        ),
    )
}

const OVERFIT_SCENE: &str = r#"
size = [1.9, 1.9, 1.6]
density = 400.0
noise = 0.005
classes = ["floor", "wall", "table", "column"]
[shell]
floor = "floor"
walls = "wall"
[[color]]
class = "floor"
mean = [0.5, 0.45, 0.4]
sigma = 0.05
[[color]]
class = "wall"
mean = [0.8, 0.8, 0.75]
sigma = 0.05
[[color]]
class = "column"
mean = [0.8, 0.8, 0.75]
sigma = 0.05
[[color]]
class = "table"
mean = [0.45, 0.3, 0.15]
sigma = 0.05
[[object]]
kind = "box"
class = "table"
min = [0.1, 0.1, 0.0]
max = [0.55, 0.5, 0.75]
[[object]]
kind = "cylinder"
class = "column"
center = [0.75, 0.75]
radius = 0.15
z = [0.0, 1.6]
"#;

fn trainability() -> Outcome {
    let started = Instant::now();
    let spec = SceneSpec::parse(OVERFIT_SCENE).map_err(|e| e.to_string())?;
    let room = generate_scene(&spec, 3).map_err(|e| e.to_string())?;
    let blocks = Setup::P1.partition(&room).map_err(|e| e.to_string())?;
    // The cell holding the table and the column also holds floor and walls.
    let block = blocks
        .iter()
        .find(|b| {
            let labels = b.cloud.labels.as_ref().unwrap();
            (0..4).all(|c| labels.contains(&c)) && b.len() >= 512
        })
        .ok_or("no block contains all four classes")?;
    let block = sample_block_n(block, 512, 9).map_err(|e| e.to_string())?;
    let labels = block.cloud.labels.clone().unwrap();
    let config = RunConfig {
        network: NetworkConfig {
            f0: Setup::P1.f0(),
            num_classes: 4,
            ..NetworkConfig::default()
        },
        train: TrainConfig::default(),
    };
    let tb = TrainBlock::new(block.cloud.input_tensor(), labels.clone(), None, config.network.k_neighbors)
        .map_err(|e| e.to_string())?;
    let mut model = build_model(&config.network, 1).map_err(|e| e.to_string())?;
    let mut adam = Adam::new(&model.store, config.train.weight_decay);
    let lr = lr_at_epoch(config.train.learning_rate, 0);
    let mut best = 0.0f64;
    for step in 1..=300 {
        let stats = train_step(&mut model, &mut adam, &[&tb], lr, step).map_err(|e| e.to_string())?;
        if step % 10 == 0 || stats.correct == stats.counted {
            let m = evaluate(&model, std::slice::from_ref(&tb)).map_err(|e| e.to_string())?;
            best = best.max(m.overall_accuracy());
            if m.overall_accuracy() >= 0.99 {
                within(started, Duration::from_secs(600))?;
                return Ok(format!(
                    "training accuracy {:.4} after {step} steps ({:.1} s)",
                    m.overall_accuracy(),
                    started.elapsed().as_secs_f64()
                ));
            }
        }
    }
    Err(format!("best training accuracy {best:.4} within 300 steps"))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Criteria 6 and 7 share the same twelve runs.
fn desk_benchmark() -> (Outcome, Outcome) {
    let started = Instant::now();
    let data = match desk_dataset(0, DESK_BLOCK_POINTS) {
        Ok(d) => d,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let config = desk_run_config();
    let mut runs: Vec<Vec<RunReport>> = Vec::new();
    for seed in 0..3 {
        match run_ablation(&data, &config, seed) {
            Ok(r) => {
                println!("    seed {seed}:");
                for line in ablation_table(&r).lines() {
                    println!("      {line}");
                }
                runs.push(r);
            }
            Err(e) => return (Err(e.to_string()), Err(e.to_string())),
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    let full = &runs[0][0];
    assert_eq!(full.config.network.variant, Variant::Full);
    let miou = full.metrics.mean_iou();
    let generalization = within(started, Duration::from_secs(7200)).and_then(|_| {
        ensure(
            miou >= 0.80,
            format!(
                "full model test mIoU {miou:.4} (OA {:.4}) on 40/10 scenes, seed 0; all 12 runs {seconds:.0} s",
                full.metrics.overall_accuracy()
            ),
        )
    });
    let means: Vec<f64> = (0..4).map(|v| mean(runs.iter().map(|r| r[v].metrics.mean_iou()))).collect();
    let detail = Variant::ALL
        .iter()
        .zip(&means)
        .map(|(v, m)| format!("{} {m:.4}", v.key()))
        .collect::<Vec<_>>()
        .join(", ");
    let ordering = ensure(
        means[1..].iter().all(|&m| means[0] >= m - 0.02),
        format!("mean mIoU over 3 seeds: {detail}"),
    );
    (generalization, ordering)
}

const DEFAULT_CONFIG_SNAPSHOT: &str = "\
num_encoders = 4
k_neighbors = 20
num_clusters = 16
f0 = 6
num_classes = 13
head_widths = 512,256,128
dropout_p = 0.3
variant = full
learning_rate = 0.001
weight_decay = 1e-5
epochs = 100
batch_size = 6
checkpoint_every = 0
";

fn schedule_and_config() -> Outcome {
    let lr: Vec<f64> = [0, 99, 100, 199, 200, 299].iter().map(|&e| lr_at_epoch(0.001, e)).collect();
    if lr != [0.001, 0.001, 0.0005, 0.0005, 0.00025, 0.00025] {
        return Err(format!("schedule {lr:?}"));
    }
    let defaults = RunConfig::default();
    let snapshot = RunConfig::parse(DEFAULT_CONFIG_SNAPSHOT).map_err(|e| e.to_string())?;
    if defaults != snapshot {
        return Err(format!("defaults differ from snapshot:\n{}", defaults.to_text()));
    }
    let model = build_model(&defaults.network, 0).map_err(|e| e.to_string())?;
    let shape = |name: &str| model.store.value(model.store.find(name).unwrap()).shape().to_vec();
    let widths = [
        shape("encoder1.local.mlp1.weight"),
        shape("encoder1.local.mlp2.weight"),
        shape("encoder1.local.mlp_out.weight"),
        shape("head0.weight"),
        shape("head1.weight"),
        shape("head2.weight"),
    ];
    let expected = [
        vec![512, 64],
        vec![64, 64],
        vec![128, 128],
        vec![1024, 512],
        vec![512, 256],
        vec![256, 128],
    ];
    ensure(
        widths == expected && model.config.dropout_p == 0.3,
        "lr halves at epochs 100 and 200; defaults match the snapshot and layer widths".into(),
    )
}

const TINY_SCENE: &str = r#"
size = [1.9, 1.9, 2.0]
density = 30.0
noise = 0.01
classes = ["floor", "ceiling", "wall", "table"]
scenes = 2
[shell]
floor = "floor"
ceiling = "ceiling"
walls = "wall"
[[scatter]]
kind = "box"
class = "table"
count = [1, 1]
size = [0.5, 0.8]
height = [0.7, 0.8]
"#;

const TINY_CONFIG: &str = "\
num_encoders = 2
k_neighbors = 8
num_clusters = 4
head_widths = 32,16
";

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ps2net"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).display().to_string();
    std::fs::write(p("scene.toml"), TINY_SCENE).map_err(|e| e.to_string())?;
    std::fs::write(p("net.cfg"), TINY_CONFIG).map_err(|e| e.to_string())?;
    run_cli(&["synth", "--spec", &p("scene.toml"), "--seed", "4", "--out", &p("rooms")])?;
    run_cli(&["prep", "--setup", "p2", "--in", &p("rooms"), "--out", &p("blocks"), "--seed", "4"])?;
    for out in ["a.ckpt", "b.ckpt"] {
        run_cli(&[
            "train", "--data", &p("blocks"), "--config", &p("net.cfg"), "--epochs", "2", "--batch", "2", "--seed", "17",
            "--out", &p(out),
        ])?;
    }
    let a = std::fs::read(p("a.ckpt")).map_err(|e| e.to_string())?;
    let b = std::fs::read(p("b.ckpt")).map_err(|e| e.to_string())?;
    let trained = ps2net::network::checkpoint::load(Path::new(&p("a.ckpt"))).map_err(|e| e.to_string())?;
    ensure(
        a == b && trained.epoch == 2,
        format!("two CLI training runs with seed 17 wrote identical {}-byte checkpoints", a.len()),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match outcome {
            Ok(d) => println!("PASS criterion {n} ({name}): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {d}");
            }
        }
    };
    report(1, "permutation invariance", permutation());
    report(2, "gradient correctness", gradients());
    report(3, "oracle equivalence", oracles());
    report(4, "NetVLAD internals", netvlad_internals());
    report(8, "schedule and config", schedule_and_config());
    report(9, "determinism", determinism());
    report(5, "trainability", trainability());
    let (generalization, ordering) = desk_benchmark();
    report(6, "desk-scale generalization", generalization);
    report(7, "ablation ordering", ordering);
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}

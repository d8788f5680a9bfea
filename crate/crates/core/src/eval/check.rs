use std::fmt;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::relative_error;
use crate::knn::{brute_force_graph, KnnGraph, Point3};
use crate::layers::{BatchLayout, Mode, ParamId, ParamKind, Session};
use crate::network::{build_model, cross_entropy_loss, graph_for, Model, NetworkConfig};
use crate::tensor::Tensor;

/// One line of a property-suite report.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

pub const GRAD_COORDS_PER_GROUP: usize = 200;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error. Below it the comparison is
/// effectively absolute, which keeps rounding noise in the finite
/// difference of near-zero gradients from dominating.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Layer type a parameter belongs to, from its registered name.
pub fn layer_group(name: &str) -> &'static str {
    if name.contains(".bn.") {
        "batch_norm"
    } else if name.contains(".netvlad.centers") {
        "netvlad_centers"
    } else if name.contains(".netvlad.assign") {
        "netvlad_assignment"
    } else if name.contains(".netvlad.reduce") {
        "netvlad_reduce"
    } else if name.contains(".local.mlp_out") {
        "edgeconv_out"
    } else if name.contains(".local.") {
        "edge_mlp"
    } else if name.starts_with("head") {
        "head"
    } else {
        "classifier"
    }
}

const GROUPS: [&str; 8] = [
    "edge_mlp",
    "edgeconv_out",
    "netvlad_centers",
    "netvlad_assignment",
    "netvlad_reduce",
    "batch_norm",
    "head",
    "classifier",
];

fn random_features(rng: &mut ChaCha8Rng, n: usize, width: usize) -> Tensor {
    Tensor::new(vec![n, width], (0..n * width).map(|_| rng.gen::<f64>()).collect()).expect("shape")
}

struct GradProblem {
    x: Tensor,
    layout: BatchLayout,
    labels: Vec<usize>,
}

impl GradProblem {
    fn loss(&self, model: &Model, grads: bool) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let sess = Session::new(&model.store, Mode::Train { dropout_seed: 11 });
        let logits = model.forward_var(&sess, sess.input(self.x.clone()), &self.layout)?;
        let loss = cross_entropy_loss(logits, &self.labels, None)?;
        let value = loss.item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        sess.backward(loss)?;
        Ok((value, sess.param_grads()))
    }
}

/// Central differences against backprop for the composed encoder + head
/// loss on a two-block batch in training mode (batch statistics, fixed
/// dropout mask), over `GRAD_COORDS_PER_GROUP` random scalars of every
/// layer type.
pub fn check_gradients(seed: u64) -> Result<Vec<CheckLine>> {
    let started = Instant::now();
    let config = NetworkConfig {
        num_encoders: 2,
        k_neighbors: 4,
        num_clusters: 4,
        f0: 3,
        num_classes: 5,
        head_widths: vec![32, 48],
        ..NetworkConfig::default()
    };
    let mut model = build_model(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let blocks: Vec<Tensor> = (0..2).map(|_| random_features(&mut rng, 12, config.input_width())).collect();
    let graphs = blocks
        .iter()
        .map(|b| graph_for(b, config.k_neighbors))
        .collect::<Result<Vec<KnnGraph>>>()?;
    let mut data = Vec::new();
    for b in &blocks {
        data.extend_from_slice(b.data());
    }
    let problem = GradProblem {
        x: Tensor::new(vec![24, config.input_width()], data)?,
        layout: BatchLayout::stack(&graphs.iter().collect::<Vec<_>>())?,
        labels: (0..24).map(|_| rng.gen_range(0..config.num_classes)).collect(),
    };
    let (_, grads) = problem.loss(&model, true)?;

    let mut lines = Vec::new();
    for group in GROUPS {
        let members: Vec<(ParamId, usize)> = model
            .store
            .ids()
            .filter(|&id| {
                let e = model.store.entry(id);
                e.kind == ParamKind::Learnable && layer_group(&e.name) == group
            })
            .flat_map(|id| (0..model.store.value(id).numel()).map(move |i| (id, i)))
            .collect();
        let picks = sample(&mut rng, members.len(), GRAD_COORDS_PER_GROUP.min(members.len()));
        let mut worst: f64 = 0.0;
        let mut worst_at = String::new();
        for p in picks {
            let (id, i) = members[p];
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g[i]);
            let orig = model.store.value(id).data().to_vec();
            let mut probe = orig.clone();
            probe[i] = orig[i] + GRAD_STEP;
            model.store.set_data(id, probe.clone())?;
            let up = problem.loss(&model, false)?.0;
            probe[i] = orig[i] - GRAD_STEP;
            model.store.set_data(id, probe)?;
            let down = problem.loss(&model, false)?.0;
            model.store.set_data(id, orig)?;
            let numeric = (up - down) / (2.0 * GRAD_STEP);
            let err = relative_error(analytic, numeric, GRAD_FLOOR);
            if err > worst {
                worst = err;
                worst_at = format!(" at {}[{i}] (analytic {analytic:.6e}, numeric {numeric:.6e})", model.store.entry(id).name);
            }
        }
        let checked = GRAD_COORDS_PER_GROUP.min(members.len());
        lines.push(CheckLine {
            name: format!("gradients/{group}"),
            passed: checked >= GRAD_COORDS_PER_GROUP && worst < GRAD_TOLERANCE,
            detail: format!("{checked} of {} scalars, max relative error {worst:.3e}{worst_at}", members.len()),
        });
    }
    log::info!("gradient check took {:.1} s", started.elapsed().as_secs_f64());
    Ok(lines)
}

pub const PERMUTATION_CLOUDS: usize = 20;
pub const PERMUTATION_POINTS: usize = 256;
pub const PERMUTATION_TOLERANCE: f64 = 1e-9;

/// Eval-mode outputs of the default architecture (f0 = 3, five classes)
/// under random point permutations, with the graph rebuilt from the
/// permuted cloud.
pub fn check_permutation(seed: u64) -> Result<Vec<CheckLine>> {
    let config = NetworkConfig {
        f0: 3,
        num_classes: 5,
        ..NetworkConfig::default()
    };
    let model = build_model(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut worst: f64 = 0.0;
    for _ in 0..PERMUTATION_CLOUDS {
        let x = random_features(&mut rng, PERMUTATION_POINTS, config.input_width());
        let out = model.forward(&x, &graph_for(&x, config.k_neighbors)?, Mode::Eval)?;
        let order = sample(&mut rng, PERMUTATION_POINTS, PERMUTATION_POINTS).into_vec();
        let xp = Tensor::from_rows(&order.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())?;
        let outp = model.forward(&xp, &graph_for(&xp, config.k_neighbors)?, Mode::Eval)?;
        for (r, &i) in order.iter().enumerate() {
            for (a, b) in outp.row(r).iter().zip(out.row(i)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(vec![CheckLine {
        name: "permutation".into(),
        passed: worst < PERMUTATION_TOLERANCE,
        detail: format!(
            "{PERMUTATION_CLOUDS} clouds of {PERMUTATION_POINTS} points, max abs deviation {worst:.3e}"
        ),
    }])
}

pub const KNN_CLOUDS: usize = 50;

/// k-d tree graphs against the exhaustive search. Every fifth cloud is
/// snapped to a coarse lattice so that duplicate points and distance ties
/// occur.
pub fn check_knn_oracle(seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatched = Vec::new();
    for c in 0..KNN_CLOUDS {
        let n = rng.gen_range(1..=400);
        let k = rng.gen_range(1..=n.min(32));
        let lattice = c % 5 == 4;
        let points: Vec<Point3> = (0..n)
            .map(|_| {
                let p: Point3 = [rng.gen(), rng.gen(), rng.gen()];
                if lattice {
                    p.map(|v| (v * 4.0).floor() / 4.0)
                } else {
                    p
                }
            })
            .collect();
        let graph = KnnGraph::build(&points, k)?;
        let oracle = brute_force_graph(&points, k);
        if (0..n).any(|i| graph.row(i) != oracle[i].as_slice()) {
            mismatched.push(format!("cloud {c} (n={n}, k={k})"));
        }
    }
    Ok(vec![CheckLine {
        name: "knn-oracle".into(),
        passed: mismatched.is_empty(),
        detail: if mismatched.is_empty() {
            format!("{KNN_CLOUDS} clouds identical to exhaustive search")
        } else {
            format!("mismatch in {}", mismatched.join(", "))
        },
    }])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_parameter_has_a_group() {
        let model = build_model(&NetworkConfig::default(), 0).unwrap();
        let mut seen: Vec<&str> = model
            .store
            .entries()
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(|e| layer_group(&e.name))
            .collect();
        seen.sort_unstable();
        seen.dedup();
        let mut all = GROUPS.to_vec();
        all.sort_unstable();
        assert_eq!(seen, all);
        assert_eq!(layer_group("classifier.weight"), "classifier");
    }

    #[test]
    fn knn_suite_passes() {
        let lines = check_knn_oracle(3).unwrap();
        assert!(lines.iter().all(|l| l.passed), "{lines:?}");
    }

    #[test]
    fn failing_line_renders_as_fail() {
        let l = CheckLine {
            name: "x".into(),
            passed: false,
            detail: "d".into(),
        };
        assert_eq!(l.to_string(), "FAIL x: d");
    }
}

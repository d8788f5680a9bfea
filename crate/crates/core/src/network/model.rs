use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::NetworkConfig;
use crate::error::{Error, Result};
use crate::knn::{KnnGraph, Point3};
use crate::layers::{BatchLayout, Encoder, Mode, ParamStore, Session, SharedMlp, ENCODER_WIDTH};
use crate::tensor::{Tensor, Var};

/// The full segmentation network: stacked encoders whose outputs are
/// concatenated and fed to a per-point head.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub encoders: Vec<Encoder>,
    pub head: Vec<SharedMlp>,
    pub classifier: SharedMlp,
}

/// Builds and initializes a model; the same config and seed always give
/// the same parameters.
pub fn build_model(config: &NetworkConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut encoders = Vec::with_capacity(config.num_encoders);
    for e in 0..config.num_encoders {
        let in_width = if e == 0 { config.input_width() } else { ENCODER_WIDTH };
        encoders.push(Encoder::new(
            &mut store,
            &mut rng,
            &format!("encoder{e}"),
            in_width,
            config.num_clusters,
            config.variant,
        )?);
    }
    let mut head = Vec::with_capacity(config.head_widths.len());
    let mut width = config.num_encoders * ENCODER_WIDTH;
    for (h, &out) in config.head_widths.iter().enumerate() {
        head.push(SharedMlp::new(&mut store, &mut rng, &format!("head{h}"), width, out)?);
        width = out;
    }
    let classifier = SharedMlp::linear(&mut store, &mut rng, "classifier", width, config.num_classes)?;
    Ok(Model {
        config: config.clone(),
        seed,
        store,
        encoders,
        head,
        classifier,
    })
}

/// Static graph over the first three feature columns. `k` is capped at the
/// number of points so small inference blocks still get a graph.
pub fn graph_for(features: &Tensor, k: usize) -> Result<KnnGraph> {
    let shape = features.shape();
    if shape.len() != 2 || shape[1] < 3 {
        return Err(Error::contract(format!("expected N×(3+f0) features, got {shape:?}")));
    }
    let points: Vec<Point3> = (0..shape[0]).map(|r| {
        let row = features.row(r);
        [row[0], row[1], row[2]]
    }).collect();
    KnnGraph::build(&points, k.min(points.len()))
}

impl Model {
    pub fn head_input_width(&self) -> usize {
        self.head.first().map_or(0, |h| h.in_width)
    }

    /// Learnable scalar count.
    pub fn param_count(&self) -> usize {
        self.store.learnable_scalars()
    }

    /// Logits for stacked rows, `ΣN×L`.
    pub fn forward_var<'s>(&self, sess: &'s Session<'_>, x: Var<'s>, layout: &BatchLayout) -> Result<Var<'s>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.config.input_width() {
            return Err(Error::contract(format!(
                "model expects rows of width {} (3 + f0), got {shape:?}",
                self.config.input_width()
            )));
        }
        let mut h = x;
        let mut levels = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            h = enc.forward(sess, h, layout)?;
            levels.push(h);
        }
        let mut z = Var::concat(&levels, 1)?;
        for (i, mlp) in self.head.iter().enumerate() {
            z = mlp.forward(sess, z)?;
            if i == 0 && sess.mode().is_train() && self.config.dropout_p > 0.0 {
                let mask = sess.dropout_mask(z.value().numel(), self.config.dropout_p);
                z = z.mul_const(mask)?;
            }
        }
        self.classifier.forward(sess, z)
    }

    /// Per-point logits for one block.
    pub fn forward(&self, features: &Tensor, graph: &KnnGraph, mode: Mode) -> Result<Tensor> {
        let sess = Session::new(&self.store, mode);
        let x = sess.input(features.clone());
        Ok(self.forward_var(&sess, x, &BatchLayout::single(graph))?.value())
    }

    /// Argmax class per point in eval mode.
    pub fn predict(&self, features: &Tensor, graph: &KnnGraph) -> Result<Vec<usize>> {
        let logits = self.forward(features, graph, Mode::Eval)?;
        Ok(argmax_rows(&logits))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let rows = logits.shape()[0];
    (0..rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy over points whose mask entry is set (all points when
/// no mask is given).
pub fn cross_entropy_loss<'t>(logits: Var<'t>, labels: &[usize], mask: Option<&[bool]>) -> Result<Var<'t>> {
    let weights: Option<Vec<f64>> = mask.map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
    logits.cross_entropy(labels, weights.as_deref())
}

//! Neural building blocks: shared MLPs with batch normalization, the
//! EdgeConv local-structure module, the NetVLAD global aggregator, and the
//! encoder that joins them.
//!
//! Layers hold only [`ParamId`] handles. Values live in a [`ParamStore`] and
//! are placed on the tape by a [`Session`] the first time a forward pass
//! touches them.

mod edgeconv;
mod encoder;
mod mlp;
mod netvlad;
mod params;

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub use edgeconv::{edge_features, h_operator, EdgeConv, EDGE_HIDDEN, LOCAL_WIDTH};
pub use encoder::{BatchLayout, Encoder, GlobalBranch, LocalBranch, Variant, ENCODER_WIDTH};
pub use mlp::{BatchNorm, SharedMlp, SingleRowPolicy, BN_EPS, BN_MOMENTUM};
pub use netvlad::{NetVlad, VladParts, GLOBAL_WIDTH};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};

use crate::error::Result;
use crate::tensor::{BatchStats, Tape, Tensor, Var};

/// Whether a forward pass trains (batch statistics, dropout) or evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Training pass; the seed drives the dropout masks.
    Train { dropout_seed: u64 },
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// One forward (and at most one backward) pass over a parameter store.
pub struct Session<'m> {
    tape: Tape,
    store: &'m ParamStore,
    mode: Mode,
    loaded: RefCell<Vec<Option<usize>>>,
    updates: RefCell<Vec<StatUpdate>>,
    dropout_rng: RefCell<ChaCha8Rng>,
}

impl<'m> Session<'m> {
    pub fn new(store: &'m ParamStore, mode: Mode) -> Self {
        let seed = match mode {
            Mode::Train { dropout_seed } => dropout_seed,
            Mode::Eval => 0,
        };
        Session {
            tape: Tape::new(),
            store,
            mode,
            loaded: RefCell::new(vec![None; store.len()]),
            updates: RefCell::new(Vec::new()),
            dropout_rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape variable for a parameter, recorded on first use. Learnable
    /// entries are gradient leaves; buffers are constants.
    pub fn param(&self, id: ParamId) -> Var<'_> {
        if let Some(node) = self.loaded.borrow()[id.0] {
            return Var { tape: &self.tape, id: node };
        }
        let entry = self.store.entry(id);
        let learnable = entry.kind == ParamKind::Learnable;
        let var = self.tape.leaf(entry.value.clone().with_requires_grad(learnable));
        self.loaded.borrow_mut()[id.0] = Some(var.id);
        var
    }

    pub fn input(&self, tensor: Tensor) -> Var<'_> {
        self.tape.constant(tensor)
    }

    pub(crate) fn record_stats(&self, update: StatUpdate) {
        self.updates.borrow_mut().push(update);
    }

    /// Inverted-dropout keep mask scaled by `1/(1-p)`.
    pub(crate) fn dropout_mask(&self, len: usize, p: f64) -> Vec<f64> {
        let mut rng = self.dropout_rng.borrow_mut();
        let keep = 1.0 / (1.0 - p);
        (0..len).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
    }

    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradient per store entry: `Some` for every learnable entry that was
    /// used in this pass (after `backward`), `None` otherwise.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.loaded
            .borrow()
            .iter()
            .map(|slot| slot.and_then(|node| self.tape.grad(Var { tape: &self.tape, id: node })))
            .collect()
    }

    pub fn stat_updates(&self) -> Vec<StatUpdate> {
        self.updates.borrow().clone()
    }
}

/// Applies running-statistics updates: `r ← (1 − m)·r + m·batch`.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) -> Result<()> {
    for u in updates {
        let m = u.momentum;
        let mean: Vec<f64> = store
            .value(u.mean)
            .data()
            .iter()
            .zip(&u.stats.mean)
            .map(|(r, b)| (1.0 - m) * r + m * b)
            .collect();
        let var: Vec<f64> = store
            .value(u.var)
            .data()
            .iter()
            .zip(&u.stats.var)
            .map(|(r, b)| (1.0 - m) * r + m * b)
            .collect();
        store.set_data(u.mean, mean)?;
        store.set_data(u.var, var)?;
    }
    Ok(())
}

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

use rand_chacha::ChaCha8Rng;

use super::{uniform_fan_in, Mode, ParamId, ParamKind, ParamStore, Session, StatUpdate};
use crate::error::{Error, Result};
use crate::tensor::{NormStats, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// What a training-mode batch norm does when it sees a single row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SingleRowPolicy {
    Reject,
    /// Normalize with the running statistics and leave them untouched.
    UseRunning,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub single_row: SingleRowPolicy,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, single_row: SingleRowPolicy) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{prefix}.gamma"), ParamKind::Learnable, Tensor::full(vec![width], 1.0))?,
            beta: store.add(format!("{prefix}.beta"), ParamKind::Learnable, Tensor::zeros(vec![width]))?,
            running_mean: store.add(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(vec![width]))?,
            running_var: store.add(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::full(vec![width], 1.0))?,
            single_row,
        })
    }

    /// Normalizes the rows of an `R×C` input. Training mode uses batch
    /// statistics and records a running-statistics update on the session.
    pub fn forward<'s>(&self, sess: &'s Session<'_>, x: Var<'s>) -> Result<Var<'s>> {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        let rows = x.shape().first().copied().unwrap_or(0);
        let use_batch = match sess.mode() {
            Mode::Eval => false,
            Mode::Train { .. } if rows >= 2 => true,
            Mode::Train { .. } => match self.single_row {
                SingleRowPolicy::UseRunning => false,
                SingleRowPolicy::Reject => {
                    return Err(Error::contract(
                        "training-mode batch norm needs at least 2 rows (or frozen statistics)",
                    ))
                }
            },
        };
        if use_batch {
            let (y, stats) = x.batch_norm(gamma, beta, NormStats::Batch, BN_EPS)?;
            if let Some(stats) = stats {
                sess.record_stats(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: BN_MOMENTUM,
                    stats,
                });
            }
            Ok(y)
        } else {
            let store = sess.store();
            let (y, _) = x.batch_norm(
                gamma,
                beta,
                NormStats::Fixed {
                    mean: store.value(self.running_mean).data(),
                    var: store.value(self.running_var).data(),
                },
                BN_EPS,
            )?;
            Ok(y)
        }
    }
}

/// Affine map shared across rows, optionally followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
    pub in_width: usize,
    pub out_width: usize,
}

impl SharedMlp {
    /// Affine + batch norm + ReLU, the standard block.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_width: usize,
        out_width: usize,
    ) -> Result<Self> {
        Self::build(store, rng, prefix, in_width, out_width, Some(SingleRowPolicy::Reject), true)
    }

    /// Plain affine map (no normalization, no activation).
    pub fn linear(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_width: usize,
        out_width: usize,
    ) -> Result<Self> {
        Self::build(store, rng, prefix, in_width, out_width, None, false)
    }

    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        bn: Option<SingleRowPolicy>,
        relu: bool,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{prefix}.weight"),
            ParamKind::Learnable,
            uniform_fan_in(rng, in_width, out_width),
        )?;
        let bias = store.add(format!("{prefix}.bias"), ParamKind::Learnable, Tensor::zeros(vec![out_width]))?;
        let bn = match bn {
            Some(policy) => Some(BatchNorm::new(store, &format!("{prefix}.bn"), out_width, policy)?),
            None => None,
        };
        Ok(SharedMlp {
            weight,
            bias,
            bn,
            relu,
            in_width,
            out_width,
        })
    }

    fn check_width(&self, got: usize) -> Result<()> {
        if got != self.in_width {
            return Err(Error::contract(format!(
                "shared MLP expects {} input channels, got {got}",
                self.in_width
            )));
        }
        Ok(())
    }

    /// Normalization and activation applied after the affine part.
    pub fn finish<'s>(&self, sess: &'s Session<'_>, pre: Var<'s>) -> Result<Var<'s>> {
        let mut y = pre;
        if let Some(bn) = &self.bn {
            y = bn.forward(sess, y)?;
        }
        if self.relu {
            y = y.relu();
        }
        Ok(y)
    }

    /// Applies the block to every row of an `R×in` input.
    pub fn forward<'s>(&self, sess: &'s Session<'_>, x: Var<'s>) -> Result<Var<'s>> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::contract(format!("shared MLP input must be 2-D, got {shape:?}")));
        }
        self.check_width(shape[1])?;
        let pre = x.matmul(sess.param(self.weight))?.add_row(sess.param(self.bias))?;
        self.finish(sess, pre)
    }

    /// Applies the block to the edge vectors `[x_i, x_j − x_i]` for every
    /// graph entry without materializing them: with `W = [W_a; W_b]`,
    /// `[x_i, x_j − x_i]·W = x_i·(W_a − W_b) + x_j·W_b`. Output rows are
    /// ordered point-major, `(N·K)×out`.
    pub fn forward_edges<'s>(
        &self,
        sess: &'s Session<'_>,
        x: Var<'s>,
        graph: &std::rc::Rc<crate::tensor::IndexMatrix>,
    ) -> Result<Var<'s>> {
        let shape = x.shape();
        if shape.len() != 2 || 2 * shape[1] != self.in_width {
            return Err(Error::contract(format!(
                "edge MLP expects point features of width {}, got {shape:?}",
                self.in_width / 2
            )));
        }
        if graph.rows() != shape[0] {
            return Err(Error::contract(format!(
                "graph has {} rows but the input has {} points",
                graph.rows(),
                shape[0]
            )));
        }
        let f = shape[1];
        let w = sess.param(self.weight);
        let w_center = w.slice_rows(0, f)?;
        let w_offset = w.slice_rows(f, 2 * f)?;
        let p = x.matmul(w_center.sub(w_offset)?)?.add_row(sess.param(self.bias))?;
        let q = x.matmul(w_offset)?;
        let pre = Var::edge_combine(p, q, graph)?;
        self.finish(sess, pre)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_with_bn() -> (ParamStore, BatchNorm) {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1, SingleRowPolicy::Reject).unwrap();
        (store, bn)
    }

    #[test]
    fn eval_with_default_running_stats_is_identity() {
        let (store, bn) = store_with_bn();
        let sess = Session::new(&store, Mode::Eval);
        let x = sess.input(Tensor::new(vec![3, 1], vec![-2.0, 0.5, 7.0]).unwrap());
        let y = bn.forward(&sess, x).unwrap().data();
        for (a, b) in y.iter().zip([-2.0, 0.5, 7.0]) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, SingleRowPolicy::Reject).unwrap();
        let sess = Session::new(&store, Mode::Train { dropout_seed: 0 });
        let data: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let x = sess.input(Tensor::new(vec![20, 2], data).unwrap());
        let y = bn.forward(&sess, x).unwrap().value();
        for c in 0..2 {
            let col: Vec<f64> = (0..20).map(|r| y.at(&[r, c])).collect();
            let mean = col.iter().sum::<f64>() / 20.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3, "eps keeps var slightly below 1: {var}");
        }
        assert_eq!(sess.stat_updates().len(), 1);
    }

    #[test]
    fn single_row_policies() {
        let (store, bn) = store_with_bn();
        let sess = Session::new(&store, Mode::Train { dropout_seed: 0 });
        let x = sess.input(Tensor::new(vec![1, 1], vec![4.0]).unwrap());
        assert!(matches!(bn.forward(&sess, x), Err(Error::Contract(_))));
        let frozen = BatchNorm {
            single_row: SingleRowPolicy::UseRunning,
            ..bn
        };
        let y = frozen.forward(&sess, x).unwrap().item();
        assert!((y - 4.0 / (1.0 + BN_EPS).sqrt()).abs() < 1e-12);
        assert!(sess.stat_updates().is_empty());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let (mut store, bn) = store_with_bn();
        let updates = {
            let sess = Session::new(&store, Mode::Train { dropout_seed: 0 });
            let x = sess.input(Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap());
            bn.forward(&sess, x).unwrap();
            sess.stat_updates()
        };
        super::super::apply_stat_updates(&mut store, &updates).unwrap();
        assert!((store.value(bn.running_mean).data()[0] - 0.1).abs() < 1e-15);
        assert!((store.value(bn.running_var).data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn width_mismatch_is_contract_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = SharedMlp::new(&mut store, &mut rng, "m", 3, 4).unwrap();
        let sess = Session::new(&store, Mode::Eval);
        let x = sess.input(Tensor::zeros(vec![2, 5]));
        assert!(matches!(mlp.forward(&sess, x), Err(Error::Contract(_))));
    }
}

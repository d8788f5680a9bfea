use rand_chacha::ChaCha8Rng;

use super::{standard_normal, ParamId, ParamKind, ParamStore, Session, SharedMlp, SingleRowPolicy};
use crate::error::{Error, Result};
use crate::tensor::{ReduceMode, Tensor, Var};

/// Width of the reduced global descriptor.
pub const GLOBAL_WIDTH: usize = 128;

const NORM_EPS: f64 = 1e-12;

/// Soft-assignment residual aggregation over one point set.
#[derive(Clone, Debug)]
pub struct NetVlad {
    pub centers: ParamId,
    pub assign_weight: ParamId,
    pub assign_bias: ParamId,
    pub reduce: SharedMlp,
    pub clusters: usize,
    pub dim: usize,
}

/// Intermediate tensors of one aggregation, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct VladParts<'s> {
    /// `n×M`, rows sum to one.
    pub assignment: Var<'s>,
    /// `M×D` assignment-weighted residual sums before normalization.
    pub residuals: Var<'s>,
    /// `M×D` after per-cluster L2 normalization.
    pub intra: Var<'s>,
    /// `1×(M·D)` flattened and L2 normalized again.
    pub raw: Var<'s>,
}

impl NetVlad {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize, clusters: usize) -> Result<Self> {
        if clusters == 0 {
            return Err(Error::contract("NetVLAD needs at least one cluster"));
        }
        let centers = store.add(
            format!("{prefix}.centers"),
            ParamKind::Learnable,
            standard_normal(rng, vec![clusters, dim]),
        )?;
        let assign_weight = store.add(
            format!("{prefix}.assign.weight"),
            ParamKind::Learnable,
            standard_normal(rng, vec![dim, clusters]),
        )?;
        let assign_bias = store.add(
            format!("{prefix}.assign.bias"),
            ParamKind::Learnable,
            Tensor::zeros(vec![clusters]),
        )?;
        let reduce = SharedMlp::build(
            store,
            rng,
            &format!("{prefix}.reduce"),
            clusters * dim,
            GLOBAL_WIDTH,
            Some(SingleRowPolicy::UseRunning),
            true,
        )?;
        Ok(NetVlad {
            centers,
            assign_weight,
            assign_bias,
            reduce,
            clusters,
            dim,
        })
    }

    /// `v_m = Σ_i softmax_m(wᵀy_i + b)(y_i − c_m)` followed by intra- and
    /// inter-normalization, for the `n×D` features of one point set.
    pub fn aggregate<'s>(&self, sess: &'s Session<'_>, y: Var<'s>) -> Result<VladParts<'s>> {
        let shape = y.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::contract(format!(
                "NetVLAD expects n×{} features, got {shape:?}",
                self.dim
            )));
        }
        if shape[0] == 0 {
            return Err(Error::contract("NetVLAD needs at least one point"));
        }
        let assignment = y
            .matmul(sess.param(self.assign_weight))?
            .add_row(sess.param(self.assign_bias))?
            .softmax(1)?;
        let mass = assignment.reduce(0, ReduceMode::Sum)?;
        let weighted = assignment.transpose()?.matmul(y)?;
        let residuals = weighted.sub(sess.param(self.centers).scale_rows(mass)?)?;
        let intra = residuals.l2_normalize(1, NORM_EPS)?;
        let raw = intra
            .reshape(vec![1, self.clusters * self.dim])?
            .l2_normalize(1, NORM_EPS)?;
        Ok(VladParts {
            assignment,
            residuals,
            intra,
            raw,
        })
    }

    /// Single point set: the reduced `128` descriptor and the normalized
    /// `M×D` VLAD matrix.
    pub fn forward<'s>(&self, sess: &'s Session<'_>, y: Var<'s>) -> Result<(Var<'s>, Var<'s>)> {
        let parts = self.aggregate(sess, y)?;
        let global = self.reduce.forward(sess, parts.raw)?.reshape(vec![GLOBAL_WIDTH])?;
        let raw = parts.raw.reshape(vec![self.clusters, self.dim])?;
        Ok((global, raw))
    }

    /// Aggregates each contiguous segment of rows separately and reduces
    /// the stacked descriptors together, giving `B×128`.
    pub fn forward_segments<'s>(&self, sess: &'s Session<'_>, y: Var<'s>, segments: &[usize]) -> Result<Var<'s>> {
        let mut raws = Vec::with_capacity(segments.len());
        let mut start = 0;
        for &len in segments {
            let block = y.slice_rows(start, start + len)?;
            raws.push(self.aggregate(sess, block)?.raw);
            start += len;
        }
        self.reduce.forward(sess, Var::concat(&raws, 0)?)
    }
}

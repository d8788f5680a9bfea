use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use super::{EdgeConv, NetVlad, ParamStore, Session, SharedMlp, EDGE_HIDDEN, GLOBAL_WIDTH, LOCAL_WIDTH};
use crate::error::{Error, Result};
use crate::knn::KnnGraph;
use crate::tensor::{IndexMatrix, ReduceMode, Var};

/// Local (128) plus broadcast global (128) channels.
pub const ENCODER_WIDTH: usize = LOCAL_WIDTH + GLOBAL_WIDTH;

/// Architecture variant: the full network or one of the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Per-point MLP in place of EdgeConv, no neighbor access.
    NoLocal,
    /// Per-point MLP followed by a max over the K neighbors.
    NoEdgeConv,
    /// Max-pool over points in place of NetVLAD.
    NoNetVlad,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoLocal, Variant::NoEdgeConv, Variant::NoNetVlad];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLocal => "no_local",
            Variant::NoEdgeConv => "no_edgeconv",
            Variant::NoNetVlad => "no_netvlad",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "PS2-Net",
            Variant::NoLocal => "PS2-Net w/o local",
            Variant::NoEdgeConv => "PS2-Net w/o EdgeConv",
            Variant::NoNetVlad => "PS2-Net w/o NetVLAD",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::contract(format!("unknown variant {s:?} (full|no_local|no_edgeconv|no_netvlad)")))
    }
}

/// Several blocks stacked row-wise: per-block row counts and the combined
/// graph with indices offset into the stacked rows.
#[derive(Clone, Debug)]
pub struct BatchLayout {
    pub segments: Vec<usize>,
    pub graph: KnnGraph,
}

impl BatchLayout {
    pub fn single(graph: &KnnGraph) -> Self {
        BatchLayout {
            segments: vec![graph.n()],
            graph: graph.clone(),
        }
    }

    pub fn stack(graphs: &[&KnnGraph]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::contract("a batch needs at least one block"));
        }
        let parts: Vec<&IndexMatrix> = graphs.iter().map(|g| g.indices().as_ref()).collect();
        Ok(BatchLayout {
            segments: graphs.iter().map(|g| g.n()).collect(),
            graph: KnnGraph::from_indices(IndexMatrix::stack_offset(&parts)?)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.graph.n()
    }
}

#[derive(Clone, Debug)]
pub enum LocalBranch {
    EdgeConv(EdgeConv),
    PointMlp {
        mlp1: SharedMlp,
        mlp2: SharedMlp,
        mlp_out: SharedMlp,
    },
    PointMlpMaxPool {
        mlp1: SharedMlp,
        mlp2: SharedMlp,
        mlp_out: SharedMlp,
    },
}

impl LocalBranch {
    fn point_mlps(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_width: usize) -> Result<[SharedMlp; 3]> {
        Ok([
            SharedMlp::new(store, rng, &format!("{prefix}.mlp1"), in_width, EDGE_HIDDEN)?,
            SharedMlp::new(store, rng, &format!("{prefix}.mlp2"), EDGE_HIDDEN, EDGE_HIDDEN)?,
            SharedMlp::new(store, rng, &format!("{prefix}.mlp_out"), EDGE_HIDDEN, LOCAL_WIDTH)?,
        ])
    }

    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_width: usize, variant: Variant) -> Result<Self> {
        Ok(match variant {
            Variant::Full | Variant::NoNetVlad => LocalBranch::EdgeConv(EdgeConv::new(store, rng, prefix, in_width)?),
            Variant::NoLocal => {
                let [mlp1, mlp2, mlp_out] = Self::point_mlps(store, rng, prefix, in_width)?;
                LocalBranch::PointMlp { mlp1, mlp2, mlp_out }
            }
            Variant::NoEdgeConv => {
                let [mlp1, mlp2, mlp_out] = Self::point_mlps(store, rng, prefix, in_width)?;
                LocalBranch::PointMlpMaxPool { mlp1, mlp2, mlp_out }
            }
        })
    }

    /// `N×F` → `N×128`.
    pub fn forward<'s>(&self, sess: &'s Session<'_>, x: Var<'s>, graph: &KnnGraph) -> Result<Var<'s>> {
        match self {
            LocalBranch::EdgeConv(ec) => ec.forward(sess, x, graph),
            LocalBranch::PointMlp { mlp1, mlp2, mlp_out } => {
                mlp_out.forward(sess, mlp2.forward(sess, mlp1.forward(sess, x)?)?)
            }
            LocalBranch::PointMlpMaxPool { mlp1, mlp2, mlp_out } => {
                let z = mlp2.forward(sess, mlp1.forward(sess, x)?)?;
                let pooled = z.gather_rows(graph.indices())?.reduce(1, ReduceMode::Max)?;
                mlp_out.forward(sess, pooled)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum GlobalBranch {
    NetVlad(NetVlad),
    MaxPool,
}

impl GlobalBranch {
    /// Per-segment global descriptors, `B×128`.
    pub fn forward<'s>(&self, sess: &'s Session<'_>, y: Var<'s>, segments: &[usize]) -> Result<Var<'s>> {
        match self {
            GlobalBranch::NetVlad(v) => v.forward_segments(sess, y, segments),
            GlobalBranch::MaxPool => {
                let mut rows = Vec::with_capacity(segments.len());
                let mut start = 0;
                for &len in segments {
                    if len == 0 {
                        return Err(Error::contract("global max-pool needs at least one point"));
                    }
                    let pooled = y.slice_rows(start, start + len)?.reduce(0, ReduceMode::Max)?;
                    rows.push(pooled.reshape(vec![1, GLOBAL_WIDTH])?);
                    start += len;
                }
                Var::concat(&rows, 0)
            }
        }
    }
}

/// One stacked unit: local features concatenated with the block's global
/// descriptor repeated on every row.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub local: LocalBranch,
    pub global: GlobalBranch,
    pub in_width: usize,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_width: usize,
        clusters: usize,
        variant: Variant,
    ) -> Result<Self> {
        let local = LocalBranch::new(store, rng, &format!("{prefix}.local"), in_width, variant)?;
        let global = match variant {
            Variant::NoNetVlad => GlobalBranch::MaxPool,
            _ => GlobalBranch::NetVlad(NetVlad::new(store, rng, &format!("{prefix}.netvlad"), LOCAL_WIDTH, clusters)?),
        };
        Ok(Encoder { local, global, in_width })
    }

    /// `ΣN×F` → `ΣN×256`.
    pub fn forward<'s>(&self, sess: &'s Session<'_>, x: Var<'s>, layout: &BatchLayout) -> Result<Var<'s>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_width {
            return Err(Error::contract(format!(
                "encoder expects rows of width {}, got {shape:?}",
                self.in_width
            )));
        }
        if shape[0] != layout.rows() {
            return Err(Error::contract(format!(
                "encoder input has {} rows but the graph has {}",
                shape[0],
                layout.rows()
            )));
        }
        let y = self.local.forward(sess, x, &layout.graph)?;
        let g = self.global.forward(sess, y, &layout.segments)?;
        Var::concat(&[y, g.repeat_segments(&layout.segments)?], 1)
    }
}

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Session, SharedMlp};
use crate::error::{Error, Result};
use crate::knn::KnnGraph;
use crate::tensor::{IndexMatrix, ReduceMode, Var};

/// Width of both edge MLPs.
pub const EDGE_HIDDEN: usize = 64;
/// Width of the per-point EdgeConv output.
pub const LOCAL_WIDTH: usize = 128;

/// Edge vectors `h_i(j) = [x_i, x_j − x_i]` for every neighbor `j` of every
/// point `i`, shape `N×K×2F`.
pub fn h_operator<'s>(x: Var<'s>, graph: &KnnGraph) -> Result<Var<'s>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[0] != graph.n() {
        return Err(Error::contract(format!(
            "h operator: input {shape:?} does not match a graph with {} rows",
            graph.n()
        )));
    }
    let (n, k) = (graph.n(), graph.k());
    let centers = Rc::new(IndexMatrix::new(n, k, (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect())?);
    let x_i = x.gather_rows(&centers)?;
    let x_j = x.gather_rows(graph.indices())?;
    Var::concat(&[x_i, x_j.sub(x_i)?], 2)
}

/// Literal edge features `relu(F(relu(F(h; Θ₁)); Θ₂))` on an explicit
/// `N×K×2F` edge tensor, shape `N×K×64`.
pub fn edge_features<'s>(sess: &'s Session<'_>, h: Var<'s>, params: &EdgeConv) -> Result<Var<'s>> {
    let shape = h.shape();
    if shape.len() != 3 || shape[2] != params.mlp1.in_width {
        return Err(Error::contract(format!(
            "edge tensor {shape:?} does not match edge MLP width {}",
            params.mlp1.in_width
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    let rows = h.reshape(vec![n * k, shape[2]])?;
    let e = params.mlp2.forward(sess, params.mlp1.forward(sess, rows)?)?;
    e.reshape(vec![n, k, EDGE_HIDDEN])
}

/// Local structure encoder: two shared edge MLPs, max- and mean-pooling
/// over each neighborhood, and a fusing MLP.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub mlp1: SharedMlp,
    pub mlp2: SharedMlp,
    pub mlp_out: SharedMlp,
}

impl EdgeConv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_width: usize) -> Result<Self> {
        Ok(EdgeConv {
            mlp1: SharedMlp::new(store, rng, &format!("{prefix}.mlp1"), 2 * in_width, EDGE_HIDDEN)?,
            mlp2: SharedMlp::new(store, rng, &format!("{prefix}.mlp2"), EDGE_HIDDEN, EDGE_HIDDEN)?,
            mlp_out: SharedMlp::new(store, rng, &format!("{prefix}.mlp_out"), 2 * EDGE_HIDDEN, LOCAL_WIDTH)?,
        })
    }

    pub fn in_width(&self) -> usize {
        self.mlp1.in_width / 2
    }

    /// Edge features via the split-weight form of the first MLP, as
    /// `(N·K)×64` rows.
    pub fn edges<'s>(&self, sess: &'s Session<'_>, x: Var<'s>, graph: &KnnGraph) -> Result<Var<'s>> {
        let e1 = self.mlp1.forward_edges(sess, x, graph.indices())?;
        self.mlp2.forward(sess, e1)
    }

    /// `y_i = relu(F([max_k e_ik, mean_k e_ik]; Θ₃))`, shape `N×128`.
    pub fn forward<'s>(&self, sess: &'s Session<'_>, x: Var<'s>, graph: &KnnGraph) -> Result<Var<'s>> {
        let e = self.edges(sess, x, graph)?;
        self.pool(sess, e.reshape(vec![graph.n(), graph.k(), EDGE_HIDDEN])?)
    }

    /// Max/mean pooling over the neighbor axis of `N×K×64` edge features
    /// followed by the output MLP.
    pub fn pool<'s>(&self, sess: &'s Session<'_>, e: Var<'s>) -> Result<Var<'s>> {
        let max = e.reduce(1, ReduceMode::Max)?;
        let avg = e.reduce(1, ReduceMode::Mean)?;
        self.mlp_out.forward(sess, Var::concat(&[max, avg], 1)?)
    }
}

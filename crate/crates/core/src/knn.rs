//! Static K-nearest-neighbor graphs in 3-D coordinate space.
//!
//! Neighbors are ranked by squared Euclidean distance, ties broken by the
//! lower point index. Graph rows always start with the query point itself.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::IndexMatrix;

pub type Point3 = [f64; 3];

const LEAF_SIZE: usize = 12;

#[inline]
fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Balanced k-d tree over a fixed set of points.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    pub fn build(points: &[Point3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("cannot index an empty point set"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::data(format!("point {i} has a non-finite coordinate {:?}", points[i])));
        }
        let mut index = SpatialIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        index.build_node(0, points.len());
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// The `k` nearest stored points to `query`, ordered by (distance, index).
    pub fn query(&self, query: &Point3, k: usize) -> Result<Vec<usize>> {
        self.query_excluding(query, k, None)
    }

    /// As [`query`](Self::query) but never returns `exclude`.
    pub fn query_excluding(&self, query: &Point3, k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
        let available = self.len() - usize::from(exclude.is_some_and(|e| e < self.len()));
        if k > available {
            return Err(Error::contract(format!(
                "requested {k} neighbors from {available} candidate points"
            )));
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut heap);
        let mut found = heap.into_sorted_vec();
        found.truncate(k);
        Ok(found.into_iter().map(|c| c.index).collect())
    }

    fn search(&self, node: usize, q: &Point3, k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        d2: dist2(q, &self.points[i]),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap holds k entries") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                let bound = diff * diff;
                // Equal bounds are still explored so index tie-breaks stay exact.
                if heap.len() < k || bound <= heap.peek().map_or(f64::INFINITY, |c| c.d2) {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}

/// `N×K` neighbor table shared by every encoder of a network input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    indices: Rc<IndexMatrix>,
}

impl KnnGraph {
    /// Row `i` holds `i` followed by its `k - 1` nearest other points.
    pub fn build(points: &[Point3], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        if k > points.len() {
            return Err(Error::contract(format!(
                "k = {k} exceeds the number of points ({})",
                points.len()
            )));
        }
        let index = SpatialIndex::build(points)?;
        let mut data = Vec::with_capacity(points.len() * k);
        for (i, p) in points.iter().enumerate() {
            data.push(i);
            data.extend(index.query_excluding(p, k - 1, Some(i))?);
        }
        Ok(KnnGraph {
            indices: Rc::new(IndexMatrix::new(points.len(), k, data)?),
        })
    }

    /// Wraps an explicit table, validating that every entry is a row index.
    pub fn from_indices(indices: IndexMatrix) -> Result<Self> {
        let n = indices.rows();
        if let Some(&bad) = indices.as_slice().iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "KnnGraph::from_indices",
                index: bad,
                bound: n,
            });
        }
        Ok(KnnGraph {
            indices: Rc::new(indices),
        })
    }

    pub fn n(&self) -> usize {
        self.indices.rows()
    }

    pub fn k(&self) -> usize {
        self.indices.cols()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        self.indices.row(i)
    }

    pub fn indices(&self) -> &Rc<IndexMatrix> {
        &self.indices
    }

    /// The graph of the reordered cloud whose row `r` is original point
    /// `order[r]`, with entries relabeled to the new positions.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.n();
        if order.len() != n {
            return Err(Error::dim("KnnGraph::permuted", format!("{} entries for {n} rows", order.len())));
        }
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::contract("order is not a permutation"));
            }
            inverse[old] = new;
        }
        let data = order
            .iter()
            .flat_map(|&old| self.row(old).iter().map(|&j| inverse[j]))
            .collect();
        KnnGraph::from_indices(IndexMatrix::new(n, self.k(), data)?)
    }
}

/// Exhaustive O(N²) reference: every row sorted by (distance, index) with
/// the point itself first.
pub fn brute_force_graph(points: &[Point3], k: usize) -> Vec<Vec<usize>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut others: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (dist2(p, q), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            std::iter::once(i)
                .chain(others.into_iter().map(|(_, j)| j))
                .take(k)
                .collect()
        })
        .collect()
}

/// Exhaustive reference for a single query.
pub fn brute_force_query(points: &[Point3], query: &Point3, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(j, p)| (dist2(query, p), j)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, j)| j).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    }

    #[test]
    fn single_point_index() {
        let idx = SpatialIndex::build(&[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.query(&[0.0, 0.0, 0.0], 1).unwrap(), vec![0]);
    }

    #[test]
    fn rejects_non_finite_with_point_index() {
        let err = SpatialIndex::build(&[[0.0; 3], [f64::NAN, 0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("point 1")), "{err}");
        assert!(SpatialIndex::build(&[[f64::INFINITY, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn nearest_neighbor_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = cloud(&mut rng, 1000);
        let idx = SpatialIndex::build(&pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(idx.query_excluding(p, 1, Some(i)).unwrap(), brute_force_graph(&pts, 2)[i][1..]);
        }
    }

    #[test]
    fn duplicates_are_both_retrievable() {
        let pts = [[1.0, 1.0, 1.0], [0.0; 3], [1.0, 1.0, 1.0]];
        let idx = SpatialIndex::build(&pts).unwrap();
        assert_eq!(idx.query(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn k_equal_n_returns_all_sorted() {
        let pts = [[3.0, 0.0, 0.0], [0.0; 3], [1.0, 0.0, 0.0], [-2.0, 0.0, 0.0]];
        let idx = SpatialIndex::build(&pts).unwrap();
        assert_eq!(idx.query(&[0.0; 3], 4).unwrap(), vec![1, 2, 3, 0]);
    }

    #[test]
    fn stored_point_is_its_own_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = cloud(&mut rng, 50);
        let idx = SpatialIndex::build(&pts).unwrap();
        assert_eq!(idx.query(&pts[17], 1).unwrap(), vec![17]);
    }

    #[test]
    fn collinear_tie_breaks_by_index() {
        let pts: Vec<Point3> = (0..5).map(|x| [x as f64, 0.0, 0.0]).collect();
        let idx = SpatialIndex::build(&pts).unwrap();
        assert_eq!(idx.query(&[2.0, 0.0, 0.0], 3).unwrap(), vec![2, 1, 3]);
    }

    #[test]
    fn k_larger_than_n_is_contract_error() {
        let idx = SpatialIndex::build(&[[0.0; 3], [1.0; 3]]).unwrap();
        assert!(matches!(idx.query(&[0.0; 3], 3), Err(Error::Contract(_))));
        assert!(matches!(KnnGraph::build(&[[0.0; 3]], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn full_graph_rows_are_permutations_starting_with_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = cloud(&mut rng, 9);
        let g = KnnGraph::build(&pts, 9).unwrap();
        for i in 0..9 {
            assert_eq!(g.row(i)[0], i);
            let mut row = g.row(i).to_vec();
            row.sort_unstable();
            assert_eq!(row, (0..9).collect::<Vec<_>>());
        }
    }

    #[test]
    fn graph_matches_brute_force_200_by_20() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = cloud(&mut rng, 200);
        let g = KnnGraph::build(&pts, 20).unwrap();
        let oracle = brute_force_graph(&pts, 20);
        for (i, want) in oracle.iter().enumerate() {
            assert_eq!(g.row(i), &want[..]);
        }
    }

    #[test]
    fn permuting_points_permutes_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = cloud(&mut rng, 60);
        let mut order: Vec<usize> = (0..60).collect();
        for i in (1..60).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let shuffled: Vec<Point3> = order.iter().map(|&o| pts[o]).collect();
        let direct = KnnGraph::build(&shuffled, 8).unwrap();
        let remapped = KnnGraph::build(&pts, 8).unwrap().permuted(&order).unwrap();
        assert_eq!(direct, remapped);
    }

    #[test]
    fn grid_ties_match_brute_force() {
        // Lattice points produce many equal distances.
        let pts: Vec<Point3> = (0..64).map(|i| [(i % 4) as f64, (i / 4 % 4) as f64, (i / 16) as f64]).collect();
        let g = KnnGraph::build(&pts, 11).unwrap();
        let oracle = brute_force_graph(&pts, 11);
        for (i, want) in oracle.iter().enumerate() {
            assert_eq!(g.row(i), &want[..]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn query_matches_scan(seed in any::<u64>(), n in 1usize..120, k in 1usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = cloud(&mut rng, n);
            let k = k.min(n);
            let idx = SpatialIndex::build(&pts).unwrap();
            let q = [rng.gen(), rng.gen(), rng.gen()];
            prop_assert_eq!(idx.query(&q, k).unwrap(), brute_force_query(&pts, &q, k));
        }
    }
}

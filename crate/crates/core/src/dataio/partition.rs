use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::PointCloud;
use crate::error::{Error, Result};
use crate::knn::Point3;

pub const P1_CELL: f64 = 1.0;
pub const P2_CELL: f64 = 1.5;
pub const P2_PADDING: f64 = 0.3;
pub const P3_CELL: f64 = 1.5;
pub const P1_POINTS: usize = 4096;
pub const P2_MEAN: f64 = 2048.0;
pub const P2_STD: f64 = 256.0;
pub const P2_MIN_POINTS: usize = 512;
pub const P3_POINTS: usize = 8192;

/// Block preparation scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Setup {
    /// 1 m cells; xyz, rgb and room-normalized xyz.
    P1,
    /// 1.5 m cells with 0.3 m padding; xyz and rgb.
    P2,
    /// 1.5 m cells; xyz only.
    P3,
}

impl Setup {
    pub fn key(self) -> &'static str {
        match self {
            Setup::P1 => "p1",
            Setup::P2 => "p2",
            Setup::P3 => "p3",
        }
    }

    /// Extra channels per point after xyz.
    pub fn f0(self) -> usize {
        match self {
            Setup::P1 => 6,
            Setup::P2 => 3,
            Setup::P3 => 0,
        }
    }

    pub fn partition(self, room: &PointCloud) -> Result<Vec<Block>> {
        match self {
            Setup::P1 => partition_p1(room),
            Setup::P2 => partition_p2(room),
            Setup::P3 => partition_p3(room),
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p1" => Ok(Setup::P1),
            "p2" => Ok(Setup::P2),
            "p3" => Ok(Setup::P3),
            _ => Err(Error::contract(format!("unknown setup {s:?} (p1|p2|p3)"))),
        }
    }
}

/// One network input cut from a room.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub setup: Setup,
    /// Cell min-corner in the room frame (z is the room floor).
    pub origin: Point3,
    /// Indices of the member points in the source room.
    pub ids: Vec<usize>,
    /// Input vectors: xyz is relative to the cell center in x and y and to
    /// the room floor in z; the extra channels depend on the setup.
    pub cloud: PointCloud,
    /// Whether each point lies in this block's own cell (false only for
    /// P2 padding points).
    pub home: Vec<bool>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Member points at the given positions, in that order.
    pub fn select(&self, positions: &[usize]) -> Block {
        Block {
            setup: self.setup,
            origin: self.origin,
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
            cloud: self.cloud.select(positions),
            home: positions.iter().map(|&p| self.home[p]).collect(),
        }
    }
}

struct Bounds {
    min: Point3,
    extent: Point3,
}

fn bounds(room: &PointCloud) -> Result<Bounds> {
    if room.is_empty() {
        return Err(Error::contract("room has no points"));
    }
    room.validate()?;
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in &room.xyz {
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    Ok(Bounds {
        min,
        extent: [max[0] - min[0], max[1] - min[1], max[2] - min[2]],
    })
}

/// Number of cells of size `cell` needed to cover `extent`.
pub fn cell_count(extent: f64, cell: f64) -> usize {
    ((extent / cell - 1e-9).ceil() as usize).max(1)
}

fn cell_of(v: f64, min: f64, cell: f64, count: usize) -> usize {
    (((v - min) / cell).floor().max(0.0) as usize).min(count - 1)
}

fn require_rgb(room: &PointCloud) -> Result<()> {
    if room.f0 < 3 {
        return Err(Error::contract(format!(
            "setup needs r,g,b channels, room has {} extra channels",
            room.f0
        )));
    }
    Ok(())
}

/// Home cell `(ix, iy)` of every point and the grid size.
fn home_cells(room: &PointCloud, b: &Bounds, cell: f64) -> (Vec<(usize, usize)>, usize, usize) {
    let nx = cell_count(b.extent[0], cell);
    let ny = cell_count(b.extent[1], cell);
    let cells = room
        .xyz
        .iter()
        .map(|p| (cell_of(p[0], b.min[0], cell, nx), cell_of(p[1], b.min[1], cell, ny)))
        .collect();
    (cells, nx, ny)
}

fn assemble(room: &PointCloud, b: &Bounds, setup: Setup, cell: f64, ix: usize, iy: usize, ids: Vec<usize>, home: Vec<bool>) -> Block {
    let origin = [b.min[0] + ix as f64 * cell, b.min[1] + iy as f64 * cell, b.min[2]];
    let center = [origin[0] + cell / 2.0, origin[1] + cell / 2.0];
    let f0 = setup.f0();
    let mut xyz = Vec::with_capacity(ids.len());
    let mut features = Vec::with_capacity(ids.len() * f0);
    for &i in &ids {
        let p = room.xyz[i];
        xyz.push([p[0] - center[0], p[1] - center[1], p[2] - b.min[2]]);
        if f0 >= 3 {
            features.extend_from_slice(&room.feature_row(i)[..3]);
        }
        if setup == Setup::P1 {
            for a in 0..3 {
                let e = b.extent[a];
                features.push(if e > 0.0 { (p[a] - b.min[a]) / e } else { 0.0 });
            }
        }
    }
    Block {
        setup,
        origin,
        cloud: PointCloud {
            xyz,
            features,
            f0,
            labels: room.labels.as_ref().map(|l| ids.iter().map(|&i| l[i]).collect()),
            num_classes: room.num_classes,
            class_names: room.class_names.clone(),
        },
        ids,
        home,
    }
}

fn grid_partition(room: &PointCloud, setup: Setup, cell: f64) -> Result<Vec<Block>> {
    let b = bounds(room)?;
    let (cells, nx, ny) = home_cells(room, &b, cell);
    let mut members = vec![Vec::new(); nx * ny];
    for (i, &(ix, iy)) in cells.iter().enumerate() {
        members[iy * nx + ix].push(i);
    }
    Ok(members
        .into_iter()
        .enumerate()
        .filter(|(_, ids)| !ids.is_empty())
        .map(|(c, ids)| {
            let home = vec![true; ids.len()];
            assemble(room, &b, setup, cell, c % nx, c / nx, ids, home)
        })
        .collect())
}

/// Non-overlapping 1 m × 1 m cells; every point lands in exactly one block.
pub fn partition_p1(room: &PointCloud) -> Result<Vec<Block>> {
    require_rgb(room)?;
    grid_partition(room, Setup::P1, P1_CELL)
}

/// 1.5 m cells, each widened by 0.3 m on every side. Points in the padding
/// ring of a block are marked as not home there.
pub fn partition_p2(room: &PointCloud) -> Result<Vec<Block>> {
    require_rgb(room)?;
    let b = bounds(room)?;
    let (cells, nx, ny) = home_cells(room, &b, P2_CELL);
    let mut blocks = Vec::new();
    for iy in 0..ny {
        for ix in 0..nx {
            if !cells.contains(&(ix, iy)) {
                continue;
            }
            let x0 = b.min[0] + ix as f64 * P2_CELL - P2_PADDING;
            let y0 = b.min[1] + iy as f64 * P2_CELL - P2_PADDING;
            let (x1, y1) = (x0 + P2_CELL + 2.0 * P2_PADDING, y0 + P2_CELL + 2.0 * P2_PADDING);
            let mut ids = Vec::new();
            let mut home = Vec::new();
            for (i, p) in room.xyz.iter().enumerate() {
                let own = cells[i] == (ix, iy);
                if own || (p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1) {
                    ids.push(i);
                    home.push(own);
                }
            }
            blocks.push(assemble(room, &b, Setup::P2, P2_CELL, ix, iy, ids, home));
        }
    }
    Ok(blocks)
}

/// 1.5 m columns with xyz only.
pub fn partition_p3(room: &PointCloud) -> Result<Vec<Block>> {
    grid_partition(room, Setup::P3, P3_CELL)
}

/// Resamples a block to `count` points: a subset without replacement when
/// the block is large enough, otherwise every point once plus extra draws
/// with replacement. Output order is shuffled.
pub fn sample_block_n(block: &Block, count: usize, seed: u64) -> Result<Block> {
    if block.is_empty() {
        return Err(Error::contract("cannot sample an empty block"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = block.len();
    let mut picks: Vec<usize> = if count <= n {
        rand::seq::index::sample(&mut rng, n, count).into_vec()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.extend((n..count).map(|_| rng.gen_range(0..n)));
        all
    };
    picks.shuffle(&mut rng);
    Ok(block.select(&picks))
}

/// Point count a setup draws for a block of `size` points.
pub fn sample_count(setup: Setup, size: usize, rng: &mut ChaCha8Rng) -> usize {
    match setup {
        Setup::P1 => P1_POINTS,
        Setup::P3 => P3_POINTS,
        Setup::P2 => {
            let draw = Normal::new(P2_MEAN, P2_STD).expect("valid normal").sample(rng).round();
            let upper = size.max(P2_MIN_POINTS) as f64;
            draw.clamp(P2_MIN_POINTS as f64, upper) as usize
        }
    }
}

/// Setup-specific resampling: 4096 points for P1, 8192 for P3, and a
/// Gaussian count around 2048 clamped to `[512, max(512, size)]` for P2.
pub fn sample_block(block: &Block, setup: Setup, seed: u64) -> Result<Block> {
    if block.is_empty() {
        return Err(Error::contract("cannot sample an empty block"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let count = sample_count(setup, block.len(), &mut rng);
    sample_block_n(block, count, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn room(points: Vec<Point3>) -> PointCloud {
        let n = points.len();
        PointCloud {
            xyz: points,
            features: (0..n * 3).map(|i| (i % 7) as f64 / 7.0).collect(),
            f0: 3,
            labels: Some((0..n).map(|i| i % 2).collect()),
            num_classes: 2,
            class_names: None,
        }
    }

    fn lattice(w: f64, d: f64, step: f64) -> Vec<Point3> {
        let mut pts = Vec::new();
        let (nx, ny) = ((w / step).round() as usize, (d / step).round() as usize);
        for i in 0..=nx {
            for j in 0..=ny {
                pts.push([i as f64 * step, j as f64 * step, ((i + j) % 3) as f64 * 0.5]);
            }
        }
        pts
    }

    #[test]
    fn p1_grid_and_conservation() {
        let r = room(lattice(2.0, 3.0, 0.25));
        let blocks = partition_p1(&r).unwrap();
        assert!(blocks.len() <= 6);
        let mut ids: Vec<usize> = blocks.iter().flat_map(|b| b.ids.clone()).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..r.len()).collect::<Vec<_>>());
        assert!(blocks.iter().all(|b| b.cloud.f0 == 6));
    }

    #[test]
    fn p1_normalized_max_corner_is_one() {
        let r = room(lattice(2.0, 3.0, 0.5));
        let max_id = r
            .xyz
            .iter()
            .position(|p| p[0] == 2.0 && p[1] == 3.0)
            .unwrap();
        let r = PointCloud {
            xyz: r.xyz.iter().enumerate().map(|(i, p)| if i == max_id { [2.0, 3.0, 1.0] } else { *p }).collect(),
            ..r
        };
        for b in partition_p1(&r).unwrap() {
            if let Some(pos) = b.ids.iter().position(|&i| i == max_id) {
                assert_eq!(&b.cloud.feature_row(pos)[3..], &[1.0, 1.0, 1.0]);
                return;
            }
        }
        panic!("max corner not found");
    }

    #[test]
    fn p1_needs_rgb() {
        let r = PointCloud::unlabeled(vec![[0.0; 3]], vec![], 0).unwrap();
        assert!(matches!(partition_p1(&r), Err(Error::Contract(_))));
        assert!(partition_p3(&r).is_ok());
    }

    #[test]
    fn p2_home_cells_and_padding() {
        let r = room(lattice(3.0, 1.5, 0.1));
        let blocks = partition_p2(&r).unwrap();
        assert_eq!(blocks.len(), 2);
        let mut home: Vec<usize> = blocks
            .iter()
            .flat_map(|b| b.ids.iter().zip(&b.home).filter(|(_, &h)| h).map(|(&i, _)| i))
            .collect();
        home.sort_unstable();
        assert_eq!(home, (0..r.len()).collect::<Vec<_>>());
        let border = r.xyz.iter().position(|p| (p[0] - 1.6).abs() < 1e-9 && p[1] == 0.0).unwrap();
        assert!(blocks.iter().all(|b| b.ids.contains(&border)));
        assert_eq!(blocks[0].cloud.f0, 3);
    }

    #[test]
    fn p1_sampling_sizes() {
        let r = room(lattice(0.9, 0.9, 0.3));
        let block = &partition_p1(&r).unwrap()[0];
        assert_eq!(block.len(), 16);
        let s = sample_block(block, Setup::P1, 3).unwrap();
        assert_eq!(s.len(), 4096);
        let mut seen = s.ids.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 16);
        assert_eq!(s, sample_block(block, Setup::P1, 3).unwrap());
        assert_ne!(s.ids, sample_block(block, Setup::P1, 4).unwrap().ids);
    }

    #[test]
    fn exact_size_is_permutation() {
        let r = room(lattice(0.9, 0.9, 0.3));
        let block = &partition_p1(&r).unwrap()[0];
        let s = sample_block_n(block, 16, 1).unwrap();
        let mut ids = s.ids.clone();
        ids.sort_unstable();
        let mut want = block.ids.clone();
        want.sort_unstable();
        assert_eq!(ids, want);
    }

    #[test]
    fn p2_count_respects_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let c = sample_count(Setup::P2, 100_000, &mut rng);
            assert!(c >= 512);
            assert_eq!(sample_count(Setup::P2, 10, &mut rng), 512);
        }
    }

    #[test]
    fn empty_block_rejected() {
        let r = room(lattice(0.9, 0.9, 0.3));
        let empty = partition_p1(&r).unwrap()[0].select(&[]);
        assert!(matches!(sample_block(&empty, Setup::P1, 0), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn partitions_conserve_points(
            pts in prop::collection::vec((0.0f64..4.0, 0.0f64..3.0, 0.0f64..2.5), 1..120)
        ) {
            let r = room(pts.into_iter().map(|p| [p.0, p.1, p.2]).collect());
            let mut p1: Vec<usize> = partition_p1(&r).unwrap().iter().flat_map(|b| b.ids.clone()).collect();
            p1.sort_unstable();
            prop_assert_eq!(&p1, &(0..r.len()).collect::<Vec<_>>());
            let mut p2: Vec<usize> = partition_p2(&r)
                .unwrap()
                .iter()
                .flat_map(|b| b.ids.iter().zip(&b.home).filter(|(_, &h)| h).map(|(&i, _)| i).collect::<Vec<_>>())
                .collect();
            p2.sort_unstable();
            prop_assert_eq!(&p2, &p1);
        }
    }
}

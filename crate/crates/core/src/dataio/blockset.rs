use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sample_block, sample_block_n, Block, PointCloud, Setup};
use crate::error::{Error, Result};
use crate::knn::Point3;
use crate::network::TrainBlock;

pub const MANIFEST: &str = "manifest.txt";
pub const CLOUD_EXT: &str = "pscloud";

/// A prepared block as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredBlock {
    pub file: String,
    pub room: String,
    pub origin: Point3,
    /// Seed of the resampling step, or `None` when all points were kept.
    pub sample_seed: Option<u64>,
    /// Input vectors (xyz first) and labels.
    pub cloud: PointCloud,
    /// Home flags for padded setups.
    pub home: Option<Vec<bool>>,
}

impl StoredBlock {
    pub fn to_train_block(&self, k: usize) -> Result<TrainBlock> {
        let labels = self
            .cloud
            .labels
            .clone()
            .ok_or_else(|| Error::data(format!("block {} has no labels", self.file)))?;
        TrainBlock::new(self.cloud.input_tensor(), labels, self.home.clone(), k)
    }
}

/// Directory of block clouds plus a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSet {
    pub setup: Setup,
    pub seed: u64,
    pub blocks: Vec<StoredBlock>,
}

/// Per-block resampling seed derived from the preparation seed.
pub fn block_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.gen()
}

fn stored(room: &str, index: usize, block: Block, sample_seed: Option<u64>) -> StoredBlock {
    let home = (block.setup == Setup::P2).then(|| block.home.clone());
    StoredBlock {
        file: format!("{room}_b{index:04}.{CLOUD_EXT}"),
        room: room.to_string(),
        origin: block.origin,
        sample_seed,
        cloud: block.cloud,
        home,
    }
}

impl BlockSet {
    /// Partitions every room and, when `sample` is set, resamples each block
    /// to the setup's point count.
    pub fn prepare(rooms: &[(String, PointCloud)], setup: Setup, seed: u64, sample: bool) -> Result<Self> {
        let mut blocks = Vec::new();
        for (name, room) in rooms {
            for (i, block) in setup.partition(room)?.into_iter().enumerate() {
                let index = blocks.len();
                if sample {
                    let s = block_seed(seed, index);
                    blocks.push(stored(name, i, sample_block(&block, setup, s)?, Some(s)));
                } else {
                    blocks.push(stored(name, i, block, None));
                }
            }
        }
        Ok(BlockSet { setup, seed, blocks })
    }

    /// Like `prepare` with sampling, but every block is resampled to
    /// exactly `points` points.
    pub fn prepare_sized(rooms: &[(String, PointCloud)], setup: Setup, seed: u64, points: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        for (name, room) in rooms {
            for (i, block) in setup.partition(room)?.into_iter().enumerate() {
                let s = block_seed(seed, blocks.len());
                blocks.push(stored(name, i, sample_block_n(&block, points, s)?, Some(s)));
            }
        }
        Ok(BlockSet { setup, seed, blocks })
    }

    pub fn manifest(&self) -> String {
        let mut s = format!("psblocks v1 setup={} seed={}\n", self.setup, self.seed);
        for b in &self.blocks {
            let seed = b.sample_seed.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{} room={} origin={:?},{:?},{:?} points={} sample_seed={} home={}",
                b.file,
                b.room,
                b.origin[0],
                b.origin[1],
                b.origin[2],
                b.cloud.len(),
                seed,
                if b.home.is_some() { "yes" } else { "no" }
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for b in &self.blocks {
            b.cloud.write(&dir.join(&b.file))?;
            if let Some(home) = &b.home {
                let flags: String = home.iter().map(|&h| if h { '1' } else { '0' }).collect();
                std::fs::write(home_path(dir, &b.file), flags + "\n")?;
            }
        }
        std::fs::write(dir.join(MANIFEST), self.manifest())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, head) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty manifest".into(),
        })?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        let bad_head = || Error::Parse {
            line: 1,
            message: format!("bad manifest header {head:?}"),
        };
        if parts.len() != 4 || parts[0] != "psblocks" || parts[1] != "v1" {
            return Err(bad_head());
        }
        let setup: Setup = parts[2].strip_prefix("setup=").ok_or_else(bad_head)?.parse()?;
        let seed: u64 = parts[3]
            .strip_prefix("seed=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad_head)?;
        let mut blocks = Vec::new();
        for (line, raw) in lines {
            if raw.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Parse {
                line,
                message: format!("bad {what} in manifest entry {raw:?}"),
            };
            let fields: Vec<&str> = raw.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(bad("field count"));
            }
            let get = |i: usize, key: &str| fields[i].strip_prefix(key).ok_or_else(|| bad(key));
            let file = fields[0].to_string();
            let room = get(1, "room=")?.to_string();
            let origin: Vec<f64> = get(2, "origin=")?
                .split(',')
                .map(|v| v.parse().map_err(|_| bad("origin")))
                .collect::<Result<_>>()?;
            if origin.len() != 3 {
                return Err(bad("origin"));
            }
            let points: usize = get(3, "points=")?.parse().map_err(|_| bad("points"))?;
            let sample_seed = match get(4, "sample_seed=")? {
                "-" => None,
                v => Some(v.parse().map_err(|_| bad("sample_seed"))?),
            };
            let has_home = match get(5, "home=")? {
                "yes" => true,
                "no" => false,
                _ => return Err(bad("home")),
            };
            let cloud = PointCloud::read(&dir.join(&file))?;
            if cloud.len() != points {
                return Err(Error::data(format!("{file} has {} points, manifest says {points}", cloud.len())));
            }
            let home = if has_home {
                let flags = std::fs::read_to_string(home_path(dir, &file))?;
                let flags: Vec<bool> = flags
                    .trim()
                    .chars()
                    .map(|c| match c {
                        '1' => Ok(true),
                        '0' => Ok(false),
                        _ => Err(Error::data(format!("bad home flag {c:?} for {file}"))),
                    })
                    .collect::<Result<_>>()?;
                if flags.len() != points {
                    return Err(Error::data(format!("{file}: {} home flags for {points} points", flags.len())));
                }
                Some(flags)
            } else {
                None
            };
            blocks.push(StoredBlock {
                file,
                room,
                origin: [origin[0], origin[1], origin[2]],
                sample_seed,
                cloud,
                home,
            });
        }
        Ok(BlockSet { setup, seed, blocks })
    }

    pub fn train_blocks(&self, k: usize) -> Result<Vec<TrainBlock>> {
        self.blocks.iter().map(|b| b.to_train_block(k)).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.blocks.iter().map(|b| b.cloud.num_classes).max().unwrap_or(0)
    }

    pub fn class_names(&self) -> Option<Vec<String>> {
        self.blocks.iter().find_map(|b| b.cloud.class_names.clone())
    }
}

fn home_path(dir: &Path, file: &str) -> PathBuf {
    dir.join(Path::new(file).with_extension("home"))
}

/// Cloud files in a directory, sorted by name, paired with their stems.
pub fn read_rooms(dir: &Path) -> Result<Vec<(String, PointCloud)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == CLOUD_EXT))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((stem, PointCloud::read(&p)?))
        })
        .collect()
}

/// Split subdirectories a dataset may use.
pub const SPLITS: [&str; 2] = ["train", "test"];

/// Prepares `input` into `output`. With `train/` and `test/` subdirectories
/// the layout is mirrored: training blocks are resampled, test blocks keep
/// every point so each point is evaluated once. A flat input directory is
/// treated as training data. Returns the block count per written split.
pub fn prep_dir(setup: Setup, input: &Path, output: &Path, seed: u64) -> Result<Vec<(String, usize)>> {
    let split_dirs: Vec<&str> = SPLITS.iter().copied().filter(|s| input.join(s).is_dir()).collect();
    let mut written = Vec::new();
    if split_dirs.is_empty() {
        let set = BlockSet::prepare(&read_rooms(input)?, setup, seed, true)?;
        set.write(output)?;
        written.push((".".to_string(), set.blocks.len()));
    } else {
        for split in split_dirs {
            let rooms = read_rooms(&input.join(split))?;
            let set = BlockSet::prepare(&rooms, setup, seed, split == "train")?;
            set.write(&output.join(split))?;
            written.push((split.to_string(), set.blocks.len()));
        }
    }
    Ok(written)
}

/// Training split of a prepared dataset: `dir/train` when present,
/// otherwise `dir` itself.
pub fn train_split(dir: &Path) -> Result<BlockSet> {
    let sub = dir.join("train");
    BlockSet::read(if sub.join(MANIFEST).is_file() { &sub } else { dir })
}

/// Evaluation split: `dir/test` when present, otherwise `dir` itself.
pub fn test_split(dir: &Path) -> Result<BlockSet> {
    let sub = dir.join("test");
    BlockSet::read(if sub.join(MANIFEST).is_file() { &sub } else { dir })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room(n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        PointCloud {
            xyz: (0..n).map(|_| [rng.gen_range(0.0..3.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.0)]).collect(),
            features: (0..n * 3).map(|_| rng.gen()).collect(),
            f0: 3,
            labels: Some((0..n).map(|i| i % 3).collect()),
            num_classes: 3,
            class_names: Some(vec!["a".into(), "b".into(), "c".into()]),
        }
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for setup in [Setup::P1, Setup::P2] {
            let set = BlockSet::prepare(&[("r0".into(), room(300))], setup, 4, false).unwrap();
            let sub = dir.path().join(setup.key());
            set.write(&sub).unwrap();
            assert_eq!(BlockSet::read(&sub).unwrap(), set);
        }
    }

    #[test]
    fn prep_mirrors_splits() {
        let dir = tempfile::tempdir().unwrap();
        let (input, output) = (dir.path().join("in"), dir.path().join("out"));
        for split in SPLITS {
            std::fs::create_dir_all(input.join(split)).unwrap();
            room(200).write(&input.join(split).join("room_0.pscloud")).unwrap();
        }
        prep_dir(Setup::P1, &input, &output, 1).unwrap();
        let train = train_split(&output).unwrap();
        let test = test_split(&output).unwrap();
        assert!(train.blocks.iter().all(|b| b.cloud.len() == 4096 && b.sample_seed.is_some()));
        assert_eq!(test.blocks.iter().map(|b| b.cloud.len()).sum::<usize>(), 200);
        assert_eq!(train.num_classes(), 3);
    }

    #[test]
    fn same_seed_same_blocks() {
        let rooms = [("r".to_string(), room(150))];
        let a = BlockSet::prepare(&rooms, Setup::P2, 9, true).unwrap();
        assert_eq!(a, BlockSet::prepare(&rooms, Setup::P2, 9, true).unwrap());
        assert!(a.blocks.iter().all(|b| b.cloud.len() >= 512 && b.home.is_some()));
    }
}

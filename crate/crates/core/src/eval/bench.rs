//! The synthetic desk benchmark: 3 m rooms with five classes, prepared
//! under P1 with small training blocks.

use super::Dataset;
use crate::dataio::{block_seed, generate_scene, BlockSet, PointCloud, SceneSpec, Setup};
use crate::error::Result;
use crate::network::RunConfig;

pub const DESK_SCENE: &str = include_str!("../../data/desk_scene.toml");
pub const DESK_CONFIG: &str = include_str!("../../data/desk.cfg");

/// Named rooms, as returned by `read_rooms`.
pub type Rooms = Vec<(String, PointCloud)>;

/// Points per training block.
pub const DESK_BLOCK_POINTS: usize = 256;

pub fn desk_scene_spec() -> SceneSpec {
    SceneSpec::parse(DESK_SCENE).expect("bundled scene spec is valid")
}

pub fn desk_run_config() -> RunConfig {
    RunConfig::parse(DESK_CONFIG).expect("bundled config is valid")
}

/// Scenes `0..spec.scenes` drawn from `seed`; the last `spec.test_scenes`
/// are the test rooms.
pub fn generate_rooms(spec: &SceneSpec, seed: u64) -> Result<(Rooms, Rooms)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..spec.scenes {
        let cloud = generate_scene(spec, block_seed(seed, i))?;
        let name = format!("scene{i:03}");
        if i < spec.scenes - spec.test_scenes {
            train.push((name, cloud));
        } else {
            test.push((name, cloud));
        }
    }
    Ok((train, test))
}

/// Train blocks resampled to `points` each; test blocks keep every point.
pub fn desk_dataset(seed: u64, points: usize) -> Result<Dataset> {
    let (train, test) = generate_rooms(&desk_scene_spec(), seed)?;
    Ok(Dataset {
        train: BlockSet::prepare_sized(&train, Setup::P1, seed, points)?,
        test: BlockSet::prepare(&test, Setup::P1, seed, false)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_files_parse() {
        let spec = desk_scene_spec();
        assert_eq!(spec.classes.len(), 5);
        assert_eq!(spec.scenes - spec.test_scenes, 40);
        assert_eq!(spec.test_scenes, 10);
        let cfg = desk_run_config();
        assert_eq!(cfg.network.f0, Setup::P1.f0());
        assert_eq!(cfg.network.num_classes, 5);
    }
}

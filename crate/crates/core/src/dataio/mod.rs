//! Point-cloud files, block preparation (setups P1, P2, P3), resampling,
//! the synthetic scene generator, and prepared block sets on disk.

mod blockset;
mod cloud;
mod partition;
mod synth;

pub use blockset::{block_seed, prep_dir, read_rooms, test_split, train_split, BlockSet, StoredBlock, CLOUD_EXT, MANIFEST, SPLITS};
pub use cloud::PointCloud;
pub use partition::{
    cell_count, partition_p1, partition_p2, partition_p3, sample_block, sample_block_n, sample_count, Block, Setup,
    P1_CELL, P1_POINTS, P2_CELL, P2_MEAN, P2_MIN_POINTS, P2_PADDING, P2_STD, P3_CELL, P3_POINTS,
};
pub use synth::{area_fractions, generate_scene, ClassColor, Object, Scatter, ScatterKind, SceneSpec, Shell};

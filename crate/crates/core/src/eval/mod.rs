//! Metrics, run reports, the ablation and sweep protocols, and the
//! property suites behind the `check` command.

mod bench;
mod check;
mod experiment;
mod metrics;
mod report;

pub use bench::{desk_dataset, desk_run_config, desk_scene_spec, generate_rooms, DESK_BLOCK_POINTS, DESK_CONFIG, DESK_SCENE};
pub use check::{
    check_gradients, check_knn_oracle, check_permutation, layer_group, CheckLine, GRAD_COORDS_PER_GROUP, GRAD_FLOOR, GRAD_STEP,
    GRAD_TOLERANCE, KNN_CLOUDS, PERMUTATION_CLOUDS, PERMUTATION_POINTS, PERMUTATION_TOLERANCE,
};
pub use experiment::{
    ablation_table, evaluate, evaluate_checkpoint, experiment_text, fit_to_data, run_ablation, run_experiment, run_sweep,
    sweep_table, Dataset, SweepParam,
};
pub use metrics::{colorize_predictions, default_palette, Metrics};
pub use report::{format_table, parse_reports, RunReport};

//! Command-line surface: the flat run configuration and the subcommand
//! implementations used by the `dlcl` binary.

mod commands;
mod config;
mod heatmap;

pub use commands::{
    cmd_avg_ckpt, cmd_check_factorization, cmd_decode, cmd_export_weights, cmd_probe_grad,
    cmd_train, FACTORIZATION_TOLERANCE,
};
pub use config::{preset_config, RunConfig, CONFIG_KEYS, DESK_SCALE_FACTOR};
pub use heatmap::{extract_weight_rows, mask_row, render_heatmap_csv, HeatmapRow};

//! Config-driven experiments: TOML configs and presets, per-seed runs with
//! newline-delimited metrics, summaries, comparison tables and soft-target
//! inspection.
//!
//! Output layout of a run rooted at `out`:
//!
//! ```text
//! out/config.toml
//! out/summary.json, out/summary.md
//! out/seed-<s>/metrics.ndjson      one record per epoch, then a summary record
//! out/seed-<s>/timing.ndjson       wall-clock sidecar
//! out/seed-<s>/final.ckpt, snapshot-epoch-<e>.ckpt, stage1.ckpt (tf-self)
//! ```
//!
//! A grid or a list of de-kd teachers puts each variant in its own
//! subdirectory and adds `grid.tsv`; de-kd also writes `de_kd_curve.tsv`.

mod config;
mod inspect;
mod metrics;
mod presets;
mod report;
mod runner;

pub use config::{
    expand_variants, DatasetConfig, ExperimentConfig, GridConfig, LossConfig, Protocol, Variant, SEED_PLACEHOLDER,
};
pub use inspect::{soft_target_table, soft_targets_tsv, SoftTargetRow, SoftTargetSource, DEFAULT_TAUS};
pub use metrics::{
    parse_metrics, read_metrics, EpochLine, MetricsRecord, SummaryLine, TimingLine, METRICS_FILE, SCHEMA_VERSION,
    TIMING_FILE,
};
pub use presets::{preset, preset_names, Preset};
pub use report::{format_delta, mean_std, Comparison, SeedSummary, Summary, SUMMARY_JSON, SUMMARY_MD};
pub use runner::{
    arch_label, collect_seed_summaries, finalize, prepare, resolve_output_dir, run_experiment, run_seed, seed_dir,
    variant_dir, SeedRun, CONFIG_FILE, DE_KD_CURVE_FILE, GRID_FILE,
};

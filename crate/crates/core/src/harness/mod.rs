//! Training, checkpointing, inference and parameter accounting.

mod checkpoint;
mod infer;
mod toy;
mod train;

pub use checkpoint::{load_into, load_model, read_checkpoint, save_checkpoint, CheckpointMeta, FORMAT_NAME, FORMAT_VERSION};
pub use infer::{group_images, infer_group, predict_group};
pub use toy::{evaluate_groups, toy_config};
pub use train::{cosine_lr, decay_groups, total_steps, train, StepLog, TrainOutcome};

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{ParamTable, VcpModel};

/// Exact tunable counts of the model described by `config`.
pub fn count_tunable_params(config: &ModelConfig) -> Result<ParamTable> {
    Ok(VcpModel::new(config, 0, DType::F32, &Device::Cpu)?.param_table())
}

/// Human-readable budget table.
pub fn report_params(config: &ModelConfig) -> Result<String> {
    let table = count_tunable_params(config)?;
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>12} {:>10}", "module", "params", "millions");
    for (name, count) in table.rows() {
        let _ = writeln!(out, "{name:<10} {count:>12} {:>10.3}", count as f64 / 1e6);
    }
    let _ = writeln!(out, "{:<10} {:>12} {:>10.3}", "total", table.total(), table.total() as f64 / 1e6);
    let _ = writeln!(out, "fp32 checkpoint payload: {:.2} MB", table.fp32_bytes() as f64 / 1e6);
    Ok(out)
}

/// Writes the per-step loss breakdown as CSV.
pub fn write_loss_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut s = String::from(StepLog::CSV_HEADER);
    s.push('\n');
    for entry in log {
        s.push_str(&entry.csv_row());
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

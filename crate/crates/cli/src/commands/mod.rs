//! One module per subcommand. Every command resolves its work list up
//! front, runs it (in parallel where runs are independent), gathers the
//! results in work-list order and writes each output file once.

pub mod eval_horizon;
pub mod gen_data;
pub mod mpc;
pub mod regress;
pub mod report;
pub mod train_dyn;

use std::path::{Path, PathBuf};

use bodyschema::baseline::{BaselineVariant, TrainedBaseline};

use crate::error::{CliError, CliResult, Context};

/// What a command did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Human-readable lines for the terminal.
    pub summary: Vec<String>,
}

impl Outcome {
    pub fn dry_run(summary: impl Into<String>) -> Self {
        Self {
            files: Vec::new(),
            summary: vec![summary.into()],
        }
    }
}

pub fn models_dir(out: &Path) -> PathBuf {
    out.join("models")
}

pub fn model_path(out: &Path, variant: BaselineVariant) -> PathBuf {
    models_dir(out).join(format!("{}.json", variant.id()))
}

/// All four trained baselines from `out/models`, in variant order.
pub fn load_baselines(out: &Path) -> CliResult<Vec<TrainedBaseline>> {
    BaselineVariant::ALL
        .iter()
        .map(|&v| {
            let path = model_path(out, v);
            if !path.exists() {
                return Err(CliError::usage(format!(
                    "missing baseline checkpoint {} (run `train-dyn` with the same --out first)",
                    path.display()
                )));
            }
            let text = std::fs::read_to_string(&path).context(format!("cannot read {}", path.display()))?;
            Ok(TrainedBaseline::from_checkpoint_json(
                &path.display().to_string(),
                &text,
            )?)
        })
        .collect()
}

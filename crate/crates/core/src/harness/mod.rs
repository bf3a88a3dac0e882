//! Toy data, configuration, checkpoints, training and evaluation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod train;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use dataset::{generate_toy_dataset, ToyDataset};
pub use eval::{evaluate, EvalReport};
pub use train::{train, train_in_memory, TrainRun};

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Sizes the global worker pool: one worker when `deterministic`, otherwise
/// `MVAR_THREADS` if set, else the rayon default. Returns the worker count.
///
/// Results never depend on the worker count; the single-worker mode only
/// pins timing and scheduling.
pub fn configure_threads(deterministic: bool) -> Result<usize> {
    let n = if deterministic {
        Some(1)
    } else {
        match std::env::var("MVAR_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::Config(format!("MVAR_THREADS must be a positive integer, got `{v}`"))
            })?),
            Err(_) => None,
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = n {
        builder = builder.num_threads(n);
    }
    // a pool built earlier in the process stays in place
    let _ = builder.build_global();
    Ok(rayon::current_num_threads())
}

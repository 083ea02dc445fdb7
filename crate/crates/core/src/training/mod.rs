//! Synthetic corpus, batching, training loops and evaluation.

mod corpus;
mod data;
mod eval;
mod loops;
mod sampler;

use std::path::Path;

pub use corpus::{gen_synthetic_corpus, Corpus, CorpusItem, DrumClass, Split, MANIFEST, TRAIN_FRACTION};
pub use data::{fit_train_stats, PreparedData};
pub use eval::{evaluate, mcnn_metrics, EvalReport, McnnMetrics};
pub use loops::{
    cwae_validation_loss, mcnn_validation_loss, train_cwae, train_mcnn, CwaeTrainConfig,
    EpochRecord, McnnTrainConfig, TrainReport,
};
pub use sampler::{BalancedSampler, Batch, ShuffledSampler};

use crate::error::{NdfError, Result};

/// Writes a loss curve as CSV with a header row.
pub fn write_curve_csv(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| NdfError::Corpus(e.to_string()))?;
    for rec in curve {
        w.serialize(rec).map_err(|e| NdfError::Corpus(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

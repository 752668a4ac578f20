//! Occupancy metrics, training-loss terms and the visibility gap report.

mod gap;
mod loss;
mod metrics;

pub use gap::{gap_report, GapReport};
pub use loss::{
    confidence_decoder, depth_loss, total_loss, weighted_ce, ConfidenceDecoder, LossTerms, LossWeights,
};
pub use metrics::{iou_binary, miou, MiouReport};

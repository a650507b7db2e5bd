//! Round-based federated training between simulated edge devices and a
//! cloud coordinator.
//!
//! Per round, each participating device uploads encoded (and optionally
//! privatised) features; the coordinator returns scores; the device replies
//! with its local loss, sample count and `dL/dscores`; the coordinator
//! aggregates the loss, updates its scorer and sends `dL/dfeatures` back for
//! the device's encoder update. Every message passes through the wire
//! encoding in [`message`], so byte counts are exact.

mod coordinator;
mod device;
pub mod message;
mod round;

pub use coordinator::{fedavg_weights, Coordinator};
pub use device::{noise_rng, sampling_rng, EdgeDevice};
pub use message::{transmit, ProtocolMessage, FRAME_HEADER_BYTES};
pub use round::{aggregate_losses, detect, run_round, Alert, Detection, DeviceLoss, RoundOptions, RoundRecord};

/// Frame bytes one device uploads per round: features, loss report and
/// score gradient.
pub fn upload_bytes_per_device(batch: usize, feature_dim: usize) -> usize {
    3 * FRAME_HEADER_BYTES + 8 * (batch * feature_dim + 2 + batch)
}

/// Frame bytes one device downloads per round: scores, global loss and
/// feature gradient.
pub fn download_bytes_per_device(batch: usize, feature_dim: usize) -> usize {
    3 * FRAME_HEADER_BYTES + 8 * (batch + 1 + batch * feature_dim)
}

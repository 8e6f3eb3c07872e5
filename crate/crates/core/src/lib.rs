//! CAN bus intrusion detection with uncertainty.
//!
//! Windows of CAN frames are encoded as 2-D binary matrices and classified
//! into five classes (normal, DoS, fuzzing, RPM spoofing, gear spoofing) by
//! either a deterministic convolutional network or a Bayesian one whose
//! weights carry a mean-field Gaussian posterior trained with
//! Bayes-by-Backprop. Monte-Carlo predictive summaries drive a triage
//! policy that routes low-confidence windows to a human labeler.
//!
//! Module map:
//! - [`can`]: frame model, log parsers, capture container, traffic synthesis
//! - [`features`]: frame/window bit encoding, windowing, dataset splits
//! - [`autodiff`]: dense tensors and a reverse-mode computation graph
//! - [`variational`]: reparameterized Gaussian weights, KL, the MC ELBO
//! - [`model`]: network spec, parameter state, shared forward pass
//! - [`train`]: Adam, training loops, metrics, curve export
//! - [`uncertainty`]: predictive summaries and triage decisions
//! - [`checkpoint`]: versioned model container
//! - [`dataset`]: seed-pinned synthetic datasets

pub mod autodiff;
pub mod can;
pub mod checkpoint;
pub mod dataset;
pub mod features;
pub mod model;
pub mod plot;
pub mod train;
pub mod uncertainty;
pub mod variational;

pub use can::{CanFrame, ClassLabel, Flag, Timestamp};
pub use features::{FeatureWindow, WindowConfig, FRAME_BITS};
pub use model::{Mode, ModelSpec, ModelState};
pub use uncertainty::{PredictiveSummary, TriageDecision, TriagePolicy};

/// Derive an independent stream seed from a root seed and a stream index
/// (splitmix64 finalizer).
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

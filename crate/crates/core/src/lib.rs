//! Prediction of expressive tempo and dynamics in piano performances.
//!
//! The library connects two feature families to expressive targets:
//!
//! * **Expectancy features** (`ic_m`, `h_m`, `ic_c`, `h_c`) — information
//!   content and entropy of melody pitches and chord structures under a
//!   variable-order PPM multiple-viewpoint model ([`expectancy`]).
//! * **Score features** — pitch register, vertical interval classes and
//!   metrical position descriptors ([`score_features`]).
//!
//! Targets are the beat period ratio (tempo) and normalized MIDI velocity
//! (dynamics), plus their first derivatives ([`targets`]). A small
//! bidirectional LSTM ([`regressor`]) maps per-onset feature rows to one
//! target series; [`evaluation`] runs the k-fold protocol with per-piece
//! R²/r and ANOVA/Tukey comparisons across feature sets, and
//! [`sensitivity`] produces input-gradient maps of a trained model.

pub mod corpus;
pub mod evaluation;
pub mod expectancy;
pub mod features;
pub mod regressor;
pub mod score_features;
pub mod sensitivity;
pub mod synth;
pub mod targets;

pub use corpus::{Corpus, MeterClass, MeterSpan, Note, OnsetGroup, OnsetSequence, Piece};
pub use features::{FeatureMatrix, FeatureSet};
pub use targets::{TargetKind, TargetSeries};

/// Library version, recorded in run manifests and model files.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Mixes a base seed with a tag into an independent stream seed.
///
/// Used to derive per-fold / per-purpose RNG seeds from one run seed so
/// that reordering one consumer does not disturb another. SplitMix64
/// finalizer.
pub fn mix_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

//! Instance-level impulse-event detection for single-axis accelerometer
//! streams, trained from weak labels only.
//!
//! The only supervision this library needs is the total number of events of
//! each category in a recording — the kind of label that can be produced by
//! counting rounds in an ammunition box rather than by annotating waveforms.
//! From those counts it derives a per-candidate classifier via learning from
//! label proportions and deploys it as a fixed-memory streaming detector:
//!
//! 1. [`preprocess`] turns a recording into candidate slices with a rolling
//!    energy metric and a two-threshold hysteresis gate.
//! 2. [`model`] is a small 1-D CNN with its own reverse-mode gradients.
//! 3. [`train`] matches aggregated candidate predictions against the known
//!    per-recording proportions (a KL-shaped loss), masks duplicate
//!    predictions inside the minimum cycle time, and regularizes with
//!    virtual adversarial training.
//! 4. [`quant`] makes the result 8-bit: calibration, quantization-aware
//!    training, and an integer-only inference path.
//! 5. [`rt`] replays the whole decision chain one sample at a time in fixed
//!    memory, exactly matching the offline pipeline.
//!
//! [`signal`] supplies the data model plus a synthetic generator with planted
//! ground truth; [`eval`] scores counting error rates against trivial
//! baselines and produces the ablation ladder; [`cli`] binds everything into
//! the `weakcount` binary.
//!
//! The `book/` directory of the repository walks through the method chapter
//! by chapter; its code snippets compile against this crate and run as part
//! of `cargo test`.

pub mod cli;
pub mod config;
pub mod eval;
pub mod model;
pub mod preprocess;
pub mod presets;
pub mod quant;
pub mod rt;
pub mod signal;
pub mod train;

#[cfg(doctest)]
mod book;

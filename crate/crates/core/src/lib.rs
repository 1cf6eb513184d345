//! Hardware-aware differentiable neural architecture search.
//!
//! A stochastic supernet mixes candidate MobileNetV2-style blocks in every
//! searchable layer through Gumbel-Softmax masks. The masks are driven by
//! per-layer sampling logits (`Theta`) that are optimized against
//!
//! ```text
//! loss = CE + alpha * LAT^beta + gamma * ENER^delta
//! ```
//!
//! where `LAT` and `ENER` are mask-weighted sums over per-block lookup
//! tables. After the search, the most probable block of every layer forms a
//! discrete child network that is retrained from scratch.
//!
//! Module map:
//!
//! - [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! - [`searchspace`]: the nine candidate blocks and macro-architectures.
//! - [`costmodel`]: synthetic device model and lookup-table I/O.
//! - [`supernet`]: Gumbel-Softmax masks, expected costs and the loss.
//! - [`trainer`]: the alternating weight/theta search loop.
//! - [`childnet`]: argmax extraction, exact costs and retraining.
//! - [`analysis`]: knob metrics, dominance, Pareto fronts and sweeps.
//! - [`oracle`]: brute-force enumeration over tiny search spaces.

pub mod analysis;
pub mod autodiff;
pub mod childnet;
pub mod costmodel;
pub mod data;
mod error;
pub mod network;
pub mod oracle;
pub mod searchspace;
pub mod supernet;
pub mod trainer;

pub use error::{Error, Result};

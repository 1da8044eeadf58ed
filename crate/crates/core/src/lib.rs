//! Multi-view clustering by deep semi-nonnegative matrix factorization and
//! partition alignment.
//!
//! Every view `X^(v)` (features x samples) is factorized as
//! `Z_1 Z_2 ... Z_m H_m` with nonnegative representations; the last-layer
//! partitions `H_m^(v)` are rotated onto a shared row-orthonormal consensus
//! `H` and the whole system is optimized by block-wise alternation. The
//! final clustering is k-means on the columns of `H`.
//!
//! ```no_run
//! use dmfpa::data::{generate_synthetic, Normalization, SyntheticSpec};
//! use dmfpa::deep::LayerDims;
//! use dmfpa::pipeline::{fit, HyperParams};
//!
//! let ds = generate_synthetic(&SyntheticSpec::benchmark(7))?.normalized(Normalization::L2Sample);
//! let hp = HyperParams::new(1.0, LayerDims::new(vec![12, 3], 3)?);
//! let result = fit(&ds, &hp)?;
//! println!("{:?}", result.scores(ds.truth.as_ref().unwrap())?);
//! # Ok::<(), dmfpa::Error>(())
//! ```

pub mod alignment;
pub mod data;
pub mod deep;
mod error;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod semi_nmf;

pub use error::{Error, Result};
pub use matrix::Mat;

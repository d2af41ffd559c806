//! Differentially private gradient perturbation in rectangular and
//! hyperspherical coordinates.
//!
//! - [`hypersphere`]: conversion between rectangular and spherical coordinates.
//! - [`mechanisms`]: clipping, Gaussian DP noise, GeoDP noise, privacy accounting.
//! - [`training`]: softmax logistic regression trained with either mechanism.
//! - [`analysis`]: error metrics, efficiency decomposition, bias and normality checks.
//! - [`data`]: IDX image loading, gradient datasets, batch sampling.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod data;
pub mod hypersphere;
pub mod mechanisms;
pub mod training;

// Compile and run the guide's snippets as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/hypersphere.md")]
    pub struct Hypersphere;
    #[doc = include_str!("../../../book/src/mechanisms.md")]
    pub struct Mechanisms;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/analysis.md")]
    pub struct Analysis;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
}

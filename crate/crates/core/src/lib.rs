//! Guided super-resolution as a differentiable graph-regularised optimisation.
//!
//! Per-pixel features (raw colour channels or the output of a small trainable
//! CNN) define edge affinities of a 4-neighbour graph over the high-resolution
//! pixel lattice. The high-resolution target is the minimiser of
//!
//! ```text
//!   || D y - s ||^2  +  lambda * y^T L y
//! ```
//!
//! where `D` is a box point-spread-function downsampler, `s` the low-resolution
//! source and `L` the graph Laplacian built from the affinities. The minimiser
//! solves the SPD system `(lambda L + D^T D) y = D^T s`, handled by a Jacobi
//! preconditioned conjugate gradient. Gradients flow through the optimisation
//! layer exactly via the implicit function theorem (a second solve with the
//! same operator), restricted to the sparse Laplacian pattern.
//!
//! All numeric state is `f64`; multi-channel data is stored row-major planar:
//! `index(c, i, j) = c * H * W + i * W + j`.

pub mod backward;
pub mod downsample;
pub mod features;
pub mod graph;
pub mod image;
pub mod io;
pub mod solver;
pub mod train;

pub use backward::{layer_gradcheck, backward_solve, GradcheckReport, LayerGradients};
pub use downsample::{build_box_downsampler, DownsampleOperator};
pub use features::{colour_features, net_forward, net_backward, ConvNetParams, ConvSpec};
pub use graph::{compute_affinities, laplacian_apply, smoothness_energy, AffinityGraph, AffinityScale};
pub use image::{FeatureMap, GuideImage, SourceImage, TargetImage};
pub use solver::{cg_solve, dense_oracle_solve, forward_solve, CgReport, SystemOperator};
pub use train::{train, TrainConfig, TrainSample};

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("unsupported maxval {0}")]
    UnsupportedMaxval(u32),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no valid pixels")]
    NoValidPixels,
    #[error("incompatible scale: k={k} does not divide {h}x{w}")]
    IncompatibleScale { k: usize, h: usize, w: usize },
    #[error("regularizer required for definiteness (lambda must be > 0, got {0})")]
    NonPositiveLambda(f64),
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("divergence: non-finite activations in feature extractor")]
    Divergence,
    #[error("size guard exceeded: {0} pixels (dense oracle limited to {1})")]
    SizeGuard(usize, usize),
    #[error("invalid parameter file: {0}")]
    InvalidParamsFile(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

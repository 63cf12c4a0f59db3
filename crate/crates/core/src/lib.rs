//! Low-dose CT simulation, filtered backprojection and self-supervised
//! denoising with rotation-augmented Noise2Inverse training.
//!
//! The pipeline: phantoms ([`phantom`]) are projected ([`projector`]),
//! corrupted with Poisson photon noise ([`noise`]), split into interleaved
//! angular subsets ([`split`]) and reconstructed per subset ([`fbp`]). A
//! bias-free CNN ([`net`]) is trained on pairs of sub-reconstructions with
//! an optional rotated loss term ([`rotate`], [`train`]). [`oracle`] holds
//! the Monte-Carlo and adjoint checks; [`experiment`] wires everything into
//! reproducible runs.

pub mod error;
pub mod experiment;
pub mod fbp;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod net;
pub mod noise;
pub mod oracle;
pub mod phantom;
pub mod projector;
pub mod real;
pub mod rotate;
pub mod split;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{BeamKind, ScanGeometry, Sinogram};
pub use image::ImageGrid;
pub use real::{Precision, Real};

//! Differentiable Gaussian splatting with a render equation split across
//! spatial subspaces, so that workers owning disjoint regions can render and
//! backpropagate partial images that merge to the single-worker result.

pub mod backward;
pub mod bench;
pub mod camera;
pub mod cameras;
pub mod engine;
pub mod error;
pub mod grad;
pub mod image;
pub mod manager;
pub mod metrics;
pub mod optim;
pub mod partition;
pub mod ply;
pub mod protocol;
pub mod project;
pub mod raster;
pub mod scalar;
pub mod sh;
pub mod splat;
pub mod trainer;
pub mod synth;
pub mod transport;
pub mod worker;

pub use camera::{Camera, Ray};
pub use error::{Error, Result};
pub use grad::{GradBuffers, SplatGrad};
pub use project::RenderSettings;
pub use raster::{render_view, RenderedImage};
pub use splat::Splat;

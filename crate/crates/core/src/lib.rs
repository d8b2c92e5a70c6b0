//! Shape-prior conditioned dual-branch diffusion at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors, a tape-based reverse-mode graph with a
//!   stop-gradient primitive, AdamW, and a finite-difference checker.
//! - [`scene`]: the procedural layout/image/mask dataset and its on-disk format.
//! - [`esgm`]: instance-mask cropping, rotation/repositioning and the mask pool.
//! - [`denoiser`]: condition encoders and the shared-encoder / dual-decoder
//!   noise predictor.
//! - [`diffusion`]: noise schedule, forward noising, the three training losses
//!   and shape-branch-only sampling.
//! - [`ddpo`]: denoising-MDP rollouts, transition log-densities, the KNN/KL
//!   reward and the clipped importance-weighted policy gradient.
//! - [`metrics`]: R-Box to H-Box crops, Canny edges, IoU/Dice/Chamfer/Hausdorff,
//!   SSIM and kernel MMD.
//!
//! Data-parallel loops go through [`parallel`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod ddpo;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod esgm;
pub mod mask;
pub mod metrics;
pub mod numerics;
pub mod parallel;
pub mod pnm;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};

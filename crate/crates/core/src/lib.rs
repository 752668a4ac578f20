//! Depth-guided 3D semantic occupancy on the CPU.
//!
//! The forward pass runs in two parts. [`d2vformer`] lifts camera features
//! into a voxel grid with depth-weighted splatting, then refines them with
//! deformable cross-attention ([`dca`]) restricted to voxels that depth
//! marks as occupied. [`experts`] adds region-guided refinement, either
//! top-K region experts or one expert applied over nested voxel subsets.
//!
//! Parameters are seeded rather than trained, and every reduction has a
//! fixed order, so runs are reproducible across thread counts. [`synth`]
//! provides scenes with analytic ground truth, [`eval`] the metrics and
//! losses, and [`pipeline`] ties it all together.
//!
//! ```
//! use occforge::config::RunConfig;
//! use occforge::pipeline::{load_scene, run_pipeline};
//!
//! let mut cfg = RunConfig::default();
//! cfg.dca = occforge::dca::DcaConfig::new(8, 2, 2);
//! let scene = load_scene(&cfg)?;
//! let run = run_pipeline(&cfg, &scene)?;
//! assert_eq!(run.pred.grid.dims, [50, 50, 8]);
//! # Ok::<(), occforge::Error>(())
//! ```

pub mod config;
pub mod d2vformer;
pub mod dca;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod experts;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod voxel;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/geometry.md")]
mod book_geometry {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/voxels.md")]
mod book_voxels {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/dca.md")]
mod book_dca {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/d2v.md")]
mod book_d2v {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/experts.md")]
mod book_experts {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
mod book_evaluation {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/synth.md")]
mod book_synth {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}

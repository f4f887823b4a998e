//! Radar-camera bird's-eye-view perception pipeline.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`geometry`]: pinhole projection, depth-map rasterization, frustum
//!   unprojection and ego-motion alignment.
//! * [`pillars`]: radar voxelization into pillars, 9-D point augmentation,
//!   VFE encoding and pseudo-image scatter.
//! * [`nnprims`]: dense tensors and the small set of network primitives the
//!   depth branch needs (softmax, outer-product lift, SE gating, 1×1 conv,
//!   depth-axis refinement, finite-difference Jacobians).
//! * [`kan`]: B-spline KAN layers and the camera-aware depth net.
//! * [`voxelpool`]: BEV pooling with a sequential reference, a
//!   sort + prefix-sum implementation and a concurrent atomic-add one.
//! * [`fusion`]: BEV feature fusion, heatmap/radar matching and losses.
//! * [`metrics`]: center-distance matching, AP, TP errors and NDS.
//! * [`scene`], [`pipeline`], [`tables`]: synthetic scenes, end-to-end runs
//!   and reproduction of published aggregate scores.
//!
//! Data-parallel inner loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

pub mod error;
pub mod exec;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod kan;
pub mod metrics;
pub mod nnprims;
pub mod pillars;
pub mod pipeline;
pub mod scene;
pub mod tables;
pub mod voxelpool;

pub use error::{Error, Result};
pub use nnprims::Tensor;

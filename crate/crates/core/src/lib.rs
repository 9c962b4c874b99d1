//! Leaf-area estimation from single RGBD frames.
//!
//! The [`pipeline`] turns a depth map and an instance mask into a surface
//! area through filtering, back-projection, clustering, meshing and mesh
//! post-processing. [`area_head`] is the learned alternative as a small
//! numeric kernel, [`evaluation`] implements the instance metrics, and
//! [`synthetic`] renders leaves with known areas.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod area_head;
pub mod batch;
pub mod camera;
pub mod cloud;
pub mod dataset;
pub mod depth_filter;
pub mod evaluation;
pub mod mesh;
pub mod pipeline;
pub mod raster;
pub mod spatial;
pub mod synthetic;

//! Scene model, diffusion algebra, overlap penalty and layout metrics for
//! two-stage indoor layout diffusion.
//!
//! Everything here is allocation-only `no_std`: numeric kernels and geometry
//! that the training, IO and command-line crate builds on.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod angle;
pub mod diffusion;
pub mod error;
pub mod generator;
pub mod geometry;
pub mod iou;
pub mod plausibility;
pub mod raster;
pub mod relations;
pub mod scene;
pub mod taxonomy;

pub use diffusion::DiffusionSchedule;
pub use error::{Error, Result};
pub use scene::{
    decode_layout, denormalize_scene, encode_layout, normalize_scene, split_scene, Caps, Edge,
    Frame, LayoutTensor, ObjectRecord, RoomMask, Scene, SceneGraph, Vertex,
};
pub use taxonomy::{CategoryTaxonomy, Tier};

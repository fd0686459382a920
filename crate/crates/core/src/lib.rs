//! Voxel radiance-field optimization seeded by signed-distance shape priors.
//!
//! The pipeline: build or load an SDF prior ([`sdf_prior`]), turn it into a
//! density grid ([`voxel_field`]), render it differentiably ([`renderer`]),
//! score renders with pluggable image-space guidance ([`guidance`]), combine
//! that with the transmittance and prior-preserving regularizers
//! ([`losses`]), and run Adam over the grid and color network
//! ([`optimizer`]). [`mesh_extract`] turns grids back into triangle meshes and
//! [`embedding_diffusion`] provides the conditional embedding-space DDPM.

pub mod activation;
mod binio;
pub mod embedding_diffusion;
pub mod error;
pub mod grid;
pub mod guidance;
pub mod image;
pub mod losses;
pub mod mesh_extract;
pub mod mlp;
pub mod optimizer;
pub mod renderer;
pub mod rng;
pub mod sdf_prior;
pub mod voxel_field;

pub use error::{Error, Result};
pub use grid::Lattice;
pub use guidance::{photometric_guidance, GuidanceHandle, GuidanceResult, RemoteGuidance};
pub use image::Image;
pub use losses::{LossBreakdown, LossWeights};
pub use mesh_extract::{field_to_opacity_grid, marching_cubes, resample_grid, TriangleMesh};
pub use optimizer::{optimize, OptimConfig, OptimState};
pub use renderer::{render, render_backward, Camera, RenderOutput, RenderSettings};
pub use sdf_prior::{csg_combine, make_primitive_sdf, sdf_to_density, CsgOp, PrimitiveSpec, SdfGrid};
pub use voxel_field::{FieldConfig, FieldGrad, VoxelField};

//! The time-conditioned radiance field: positional encoding with annealing,
//! a small MLP with hand-written forward/backward passes, cylinder-clipped
//! ray sampling and volumetric rendering with background compositing.

pub mod encoding;
pub mod geom;
pub mod mlp;
pub mod render;

pub use encoding::{anneal_window, positional_encode, EncodingConfig};
pub use geom::{clip_sample_range, CylinderBounds, Ray, Vec3};
pub use mlp::{Architecture, FieldParams, SampleOutput};
pub use render::{
    composite, render_ray, render_ray_backward, sample_depths, RayCache, RenderConfig, RenderResult,
};

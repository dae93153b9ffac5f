//! Differentiable software splatting.

pub mod backward;
pub mod camera;
pub mod image;
pub mod project;
pub mod render;

pub use backward::{render_backward, render_signature, RenderGradients};
pub use camera::Camera;
pub use image::{decode_ppm, encode_gray_ppm, encode_ppm, psnr, read_mask, read_ppm, write_ppm};
pub use project::{project_gaussian, Projection, LOW_PASS, NEAR_PLANE};
pub use render::{render, render_naive, render_with, RenderTiming, RenderedImage, ALPHA_MAX, TILE, T_MIN};

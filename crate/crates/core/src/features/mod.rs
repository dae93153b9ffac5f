//! Identity maps, neural texture maps and the per-point feature network.

pub mod network;
pub mod params;
pub mod sample;

pub use network::{
    add_texture_bias, decode_texture, encode_geometry, encode_pose, fuse_features, gamma_encode, identity_block,
    interaction_attention, point_queries, sample_points, Bound, NetConfig, TexturePlan, CAMERA_DIM, HEAD_OUT,
};
pub use params::ParamStore;
pub use sample::{sample_map, sample_query, MapShape};

#[cfg(test)]
mod tests;

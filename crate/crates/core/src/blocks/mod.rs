//! Composite blocks built from the layer primitives.

mod attention;
mod inception;
mod residual;

pub use attention::{self_attention, self_attention_parts, spatial_attention, AttentionParts, SelfAttention, SpatialAttention, SpatialAttentionConfig};
pub use inception::{inception_block, inception_paths, Inception, InceptionConfig};
pub use residual::{granular_feature_integration, residual_block, Granular, Residual, GRANULAR_KERNELS};

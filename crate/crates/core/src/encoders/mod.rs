//! Desk-scale vision and text encoders plus the two-view augmentation.

mod augment;
mod text;
mod vision;

pub use augment::{augment, autocontrast, hflip, rotate};
pub use text::{TextEmbedding, TextEncoder};
pub use vision::{check_extent, FeaturePyramid, PyramidVars, VisionEncoder, MIN_MULTIPLE, STAGES};

//! Two-stage score-distillation engine for hash-grid radiance fields.

pub mod field;
pub mod render;
pub mod diffusion;
pub mod losses;
pub mod pipeline;
pub mod scene;

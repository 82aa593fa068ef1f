//! Gradient saliency explanations for every decision of a small anchor-based
//! detector, multi-object visualization, causal deletion/insertion
//! evaluation and method ranking.

pub mod detector;
pub mod eval;
pub mod formats;
pub mod image;
pub mod movis;
pub mod ranking;
pub mod saliency;
pub mod scene;
pub mod tensor;

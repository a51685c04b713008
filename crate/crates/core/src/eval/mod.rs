//! Recall@k scoring, the baseline ladder and the feature-ablation harness.

mod recall;
mod report;

pub use recall::*;
pub use report::*;

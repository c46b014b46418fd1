//! Trajectory and reconstruction metrics, evaluation reports and the
//! ablation experiment runner.

pub mod evaluate;
pub mod metrics;
pub mod report;

pub use evaluate::{evaluate_model, evaluate_modes, tracker_gate, EvalClip, EvalOptions};
pub use metrics::{objmc, psnr};
pub use report::{ClipEval, EvalReport, ModeReport};

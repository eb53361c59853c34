//! Analytic subspace routing for continual learning.
//!
//! A frozen layered encoder is split in two. The lower blocks produce features
//! that are mean-pooled, randomly expanded, and fed to a ridge-regression task
//! router updated by recursive least squares. The upper blocks carry one
//! low-rank adapter per task. Because adapters never share parameters and the
//! recursive router always equals the joint closed-form solution, learning a
//! new task cannot disturb what earlier tasks learned.

pub mod config;
pub mod encoder;
pub mod error;
pub mod features;
pub mod harness;
pub mod persist;
pub mod router;
pub mod verify;

pub use config::{BpRouterConfig, PipelineConfig, RunConfig};
pub use encoder::{AdapterBank, AdapterHyper, Encoder, EncoderConfig, LowRankAdapter};
pub use error::{Error, Result};
pub use features::{mean_pool, separability_probe, ExpansionPipeline, ScaleMode};
pub use harness::{
    compute_bwt, compute_op, generate_task_stream, run_continual, AccuracyMatrix, RouteTarget,
    RoutingAccuracyTrace, StreamSpec, TaskStream,
};
pub use persist::{load_checkpoint, save_checkpoint, Checkpoint, RunReport};
pub use router::{route, solve_joint, ExpandedBatch, RlsState, RouteDecision, RouterWeights};

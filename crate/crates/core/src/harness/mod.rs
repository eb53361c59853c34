//! Continual-learning harness: task stream, phase loop, metrics, baselines.

mod baselines;
mod continual;
mod metrics;
mod stream;
mod sweep;

pub use baselines::{run_bp_router_baseline, run_single_adapter_baseline, MlpRouter};
pub use continual::{
    run_continual, run_continual_with, run_inference, score_task, AuditedSource, ContinualOutcome,
    ContinualSession, Inference, InferenceOptions, Learner, PhaseData, Progress, RouteTarget,
    StreamSource, TaskScore, TaskSource,
};
pub use metrics::{compute_bwt, compute_op, AccuracyMatrix, RoutingAccuracyTrace};
pub use stream::{
    generate_task_stream, OrderKind, Sample, StreamSpec, Task, TaskStream, FIRST_ANSWER,
    FIRST_CONTEXT, FIRST_QUERY, ORDER2_EIGHT, QUERY_TOKENS,
};
pub use sweep::{run_sweep, SweepCell, SweepReport};

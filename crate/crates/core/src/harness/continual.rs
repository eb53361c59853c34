//! Phase-by-phase continual training and routed inference.
//!
//! Each phase trains one adapter on the arriving task only, folds that task's
//! router-fit features into the recursive router, and then scores every task
//! seen so far through the full routed inference path.

use std::sync::{Arc, Weak};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::metrics::{AccuracyMatrix, RoutingAccuracyTrace};
use super::stream::{Sample, TaskStream};
use crate::config::RunConfig;
use crate::encoder::{train_adapter, AdapterBank, Encoder, LowRankAdapter};
use crate::error::{Error, Result};
use crate::features::{mean_pool, ExpansionPipeline};
use crate::router::{self, ExpandedBatch, RlsState, RouteDecision, RouterWeights};

/// Where a router column sends a prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteTarget {
    /// The base model with no adapter.
    Origin,
    Task(usize),
}

/// The frozen parts of the system: base encoder and expansion pipeline.
#[derive(Clone, Debug)]
pub struct Learner {
    config: RunConfig,
    encoder: Encoder,
    pipeline: ExpansionPipeline,
}

impl Learner {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone())?;
        let pipeline = ExpansionPipeline::new(
            config.pipeline.seed,
            config.encoder.hidden,
            config.pipeline.expanded_dim,
            config.pipeline.scale_mode,
        )?;
        Ok(Self {
            config,
            encoder,
            pipeline,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn pipeline(&self) -> &ExpansionPipeline {
        &self.pipeline
    }

    pub fn empty_router(&self) -> Result<RlsState> {
        Ok(RlsState::new(
            self.config.pipeline.expanded_dim,
            self.config.pipeline.lambda,
        )?
        .with_chunk_size(self.config.chunk_size))
    }

    /// Mean-pooled lower-stack features of a prompt.
    pub fn pooled_features(&self, prompt: &[usize]) -> Result<Vec<f64>> {
        mean_pool(&self.encoder.forward_lower(prompt)?)
    }

    /// Router input for a prompt.
    pub fn expanded_features(&self, prompt: &[usize]) -> Result<Vec<f64>> {
        self.pipeline.expand(&self.pooled_features(prompt)?)
    }

    /// Router inputs for many prompts, one row each.
    pub fn expanded_rows(&self, samples: &[Sample]) -> Result<DMatrix<f64>> {
        let e = self.pipeline.out_dim();
        let mut m = DMatrix::zeros(samples.len(), e);
        for (i, s) in samples.iter().enumerate() {
            let h = self.expanded_features(&s.prompt)?;
            m.row_mut(i).copy_from_slice(&h);
        }
        Ok(m)
    }

    /// Adapter seed for a task; depends on the task id, not its arrival slot.
    pub fn task_seed(&self, task_id: usize) -> u64 {
        splitmix64(
            self.config
                .adapter
                .seed
                .wrapping_add((task_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        )
    }

    pub fn inference_options(&self) -> InferenceOptions {
        InferenceOptions {
            max_len: self.config.max_answer_len,
            per_token_rerouting: self.config.per_token_rerouting,
        }
    }

    pub fn infer(
        &self,
        weights: &RouterWeights,
        routes: &[RouteTarget],
        bank: &AdapterBank,
        prompt: &[usize],
    ) -> Result<Inference> {
        run_inference(
            &self.encoder,
            &self.pipeline,
            weights,
            routes,
            bank,
            prompt,
            &self.inference_options(),
        )
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InferenceOptions {
    pub max_len: usize,
    pub per_token_rerouting: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            max_len: 4,
            per_token_rerouting: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub answer: Vec<usize>,
    /// Decision made on the prompt.
    pub decision: RouteDecision,
    pub target: RouteTarget,
}

/// Routes a prompt and decodes with the selected adapter.
pub fn run_inference(
    encoder: &Encoder,
    pipeline: &ExpansionPipeline,
    weights: &RouterWeights,
    routes: &[RouteTarget],
    bank: &AdapterBank,
    prompt: &[usize],
    options: &InferenceOptions,
) -> Result<Inference> {
    if routes.len() != weights.ncols() {
        return Err(Error::DimensionMismatch {
            what: "route targets vs router columns",
            expected: weights.ncols(),
            got: routes.len(),
        });
    }
    let decide = |tokens: &[usize]| -> Result<(RouteDecision, RouteTarget)> {
        let h = pipeline.expand(&mean_pool(&encoder.forward_lower(tokens)?)?)?;
        let d = router::route(weights, &h)?;
        let target = routes[d.selected];
        Ok((d, target))
    };
    let adapter_for = |target: RouteTarget| -> Result<Option<&LowRankAdapter>> {
        match target {
            RouteTarget::Origin => Ok(None),
            RouteTarget::Task(id) => bank.get(id).map(Some).ok_or_else(|| {
                Error::InvalidArgument(format!("router selected task {id} with no adapter"))
            }),
        }
    };

    let (decision, target) = decide(prompt)?;
    let answer = if options.per_token_rerouting {
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        let mut current = target;
        while out.len() < options.max_len {
            if !out.is_empty() {
                current = decide(&tokens)?.1;
            }
            let next = encoder.next_token(adapter_for(current)?, &tokens)?;
            if next == crate::encoder::EOS_TOKEN {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        out
    } else {
        encoder.generate(adapter_for(target)?, prompt, options.max_len)?
    };
    Ok(Inference {
        answer,
        decision,
        target,
    })
}

/// Training inputs of one phase.
#[derive(Debug)]
pub struct PhaseData {
    pub task_id: usize,
    pub train: Vec<Sample>,
    pub router_fit: Vec<Sample>,
}

/// Supplies phase data in arrival order.
pub trait TaskSource {
    fn phase_count(&self) -> usize;
    fn task_at(&self, phase: usize) -> usize;
    fn training_data(&mut self, phase: usize) -> Result<Arc<PhaseData>>;
    fn eval_samples(&self, task_id: usize) -> &[Sample];
    fn generic_router_samples(&self) -> &[Sample];
}

/// Serves a generated stream in its configured order.
pub struct StreamSource<'a> {
    stream: &'a TaskStream,
    order: Vec<usize>,
}

impl<'a> StreamSource<'a> {
    pub fn new(stream: &'a TaskStream) -> Result<Self> {
        Ok(Self {
            order: stream.arrival_order()?,
            stream,
        })
    }

    pub fn with_order(stream: &'a TaskStream, order: Vec<usize>) -> Self {
        Self { stream, order }
    }
}

impl TaskSource for StreamSource<'_> {
    fn phase_count(&self) -> usize {
        self.order.len()
    }

    fn task_at(&self, phase: usize) -> usize {
        self.order[phase]
    }

    fn training_data(&mut self, phase: usize) -> Result<Arc<PhaseData>> {
        let task = self.stream.task(self.order[phase]);
        Ok(Arc::new(PhaseData {
            task_id: task.id,
            train: task.train.clone(),
            router_fit: task.router_fit.clone(),
        }))
    }

    fn eval_samples(&self, task_id: usize) -> &[Sample] {
        &self.stream.task(task_id).eval
    }

    fn generic_router_samples(&self) -> &[Sample] {
        &self.stream.generic_router
    }
}

/// Wraps a source and records every breach of the replay-free discipline:
/// asking for an earlier phase's training data, or asking for new data while
/// an earlier phase's data is still alive.
pub struct AuditedSource<S> {
    inner: S,
    handed_out: Vec<(usize, Weak<PhaseData>)>,
    violations: Vec<String>,
}

impl<S: TaskSource> AuditedSource<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            handed_out: Vec::new(),
            violations: Vec::new(),
        }
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    /// Phases whose training data is still referenced somewhere.
    pub fn live_phases(&self) -> Vec<usize> {
        self.handed_out
            .iter()
            .filter(|(_, w)| w.strong_count() > 0)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn requested_phases(&self) -> Vec<usize> {
        self.handed_out.iter().map(|(p, _)| *p).collect()
    }
}

impl<S: TaskSource> TaskSource for AuditedSource<S> {
    fn phase_count(&self) -> usize {
        self.inner.phase_count()
    }

    fn task_at(&self, phase: usize) -> usize {
        self.inner.task_at(phase)
    }

    fn training_data(&mut self, phase: usize) -> Result<Arc<PhaseData>> {
        if let Some(&(last, _)) = self.handed_out.last() {
            if phase <= last {
                self.violations
                    .push(format!("phase {phase} data requested after phase {last}"));
            }
        }
        for p in self.live_phases() {
            self.violations.push(format!(
                "phase {p} data still retained when phase {phase} data was requested"
            ));
        }
        let data = self.inner.training_data(phase)?;
        self.handed_out.push((phase, Arc::downgrade(&data)));
        Ok(data)
    }

    fn eval_samples(&self, task_id: usize) -> &[Sample] {
        self.inner.eval_samples(task_id)
    }

    fn generic_router_samples(&self) -> &[Sample] {
        self.inner.generic_router_samples()
    }
}

/// Everything recorded so far; enough to resume or report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Task ids in arrival order, one per completed phase.
    pub task_order: Vec<usize>,
    /// Router column targets.
    pub routes: Vec<RouteTarget>,
    pub accuracy: AccuracyMatrix,
    pub routing: RoutingAccuracyTrace,
    /// `decisions[phase][task][sample]`: selected router column for each
    /// eval prompt of each seen task (arrival order).
    pub decisions: Vec<Vec<Vec<usize>>>,
}

impl Progress {
    pub fn new(total_tasks: usize) -> Self {
        Self {
            accuracy: AccuracyMatrix::new(total_tasks),
            ..Self::default()
        }
    }

    pub fn phases_done(&self) -> usize {
        self.task_order.len()
    }
}

/// Result of scoring one task's eval split.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskScore {
    pub accuracy: f64,
    pub routing_accuracy: f64,
    pub selected: Vec<usize>,
}

/// Exact-match and routing accuracy of the routed system on `samples`.
pub fn score_task(
    learner: &Learner,
    weights: &RouterWeights,
    routes: &[RouteTarget],
    bank: &AdapterBank,
    task_id: usize,
    samples: &[Sample],
) -> Result<TaskScore> {
    let mut correct = 0usize;
    let mut routed = 0usize;
    let mut selected = Vec::with_capacity(samples.len());
    for s in samples {
        let inf = learner.infer(weights, routes, bank, &s.prompt)?;
        if inf.answer == s.answer {
            correct += 1;
        }
        if inf.target == RouteTarget::Task(task_id) {
            routed += 1;
        }
        selected.push(inf.decision.selected);
    }
    let n = samples.len().max(1) as f64;
    Ok(TaskScore {
        accuracy: correct as f64 / n,
        routing_accuracy: routed as f64 / n,
        selected,
    })
}

/// Mutable state of a continual run between phases.
pub struct ContinualSession<'l> {
    learner: &'l Learner,
    router: RlsState,
    bank: AdapterBank,
    progress: Progress,
}

impl<'l> ContinualSession<'l> {
    pub fn new(learner: &'l Learner, total_tasks: usize) -> Result<Self> {
        Ok(Self {
            learner,
            router: learner.empty_router()?,
            bank: AdapterBank::new(),
            progress: Progress::new(total_tasks),
        })
    }

    /// Continues from saved state.
    pub fn resume(
        learner: &'l Learner,
        router: RlsState,
        bank: AdapterBank,
        progress: Progress,
    ) -> Result<Self> {
        if router.dim() != learner.pipeline().out_dim() {
            return Err(Error::DimensionMismatch {
                what: "router dimension vs expansion size",
                expected: learner.pipeline().out_dim(),
                got: router.dim(),
            });
        }
        if progress.routes.len() != router.task_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} route targets for {} router columns",
                progress.routes.len(),
                router.task_count()
            )));
        }
        Ok(Self {
            learner,
            router: router.with_chunk_size(learner.config().chunk_size),
            bank,
            progress,
        })
    }

    pub fn router(&self) -> &RlsState {
        &self.router
    }

    pub fn bank(&self) -> &AdapterBank {
        &self.bank
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn phases_done(&self) -> usize {
        self.progress.phases_done()
    }

    /// Runs the next phase.
    pub fn step<S: TaskSource + ?Sized>(&mut self, source: &mut S) -> Result<()> {
        let phase = self.phases_done();
        if phase >= source.phase_count() {
            return Err(Error::InvalidArgument(
                "all phases already completed".into(),
            ));
        }
        let learner = self.learner;
        let cfg = learner.config();

        if phase == 0 && cfg.generalist_route && self.router.task_count() == 0 {
            let generic = source.generic_router_samples();
            if generic.is_empty() {
                return Err(Error::EmptyDataset(
                    "generalist route needs generic samples",
                ));
            }
            self.router.grow_label_space(1)?;
            let batch = ExpandedBatch::single_class(
                learner.expanded_rows(generic)?,
                self.router.task_count() - 1,
                self.router.task_count(),
            )?;
            self.router.update(&batch)?;
            self.progress.routes.push(RouteTarget::Origin);
        }

        let data = source.training_data(phase)?;
        let task_id = data.task_id;
        let hyper = crate::encoder::AdapterHyper {
            seed: learner.task_seed(task_id),
            ..cfg.adapter.clone()
        };
        let (adapter, _) = train_adapter(learner.encoder(), &data.train, &hyper, task_id)?;
        self.bank.insert(adapter)?;

        self.router.grow_label_space(1)?;
        let column = self.router.task_count() - 1;
        let batch = ExpandedBatch::single_class(
            learner.expanded_rows(&data.router_fit)?,
            column,
            self.router.task_count(),
        )?;
        self.router.update(&batch)?;
        self.progress.routes.push(RouteTarget::Task(task_id));
        drop(batch);
        drop(data);

        self.progress.task_order.push(task_id);
        let mut accuracy = Vec::with_capacity(phase + 1);
        let mut routing = Vec::with_capacity(phase + 1);
        let mut decisions = Vec::with_capacity(phase + 1);
        for &id in &self.progress.task_order {
            let s = score_task(
                learner,
                self.router.weights(),
                &self.progress.routes,
                &self.bank,
                id,
                source.eval_samples(id),
            )?;
            accuracy.push(s.accuracy);
            routing.push(s.routing_accuracy);
            decisions.push(s.selected);
        }
        self.progress.accuracy.push_column(accuracy)?;
        self.progress.routing.push(routing);
        self.progress.decisions.push(decisions);
        Ok(())
    }

    pub fn into_outcome(self) -> ContinualOutcome {
        ContinualOutcome {
            router: self.router,
            bank: self.bank,
            progress: self.progress,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ContinualOutcome {
    pub router: RlsState,
    pub bank: AdapterBank,
    pub progress: Progress,
}

impl ContinualOutcome {
    pub fn accuracy(&self) -> &AccuracyMatrix {
        &self.progress.accuracy
    }

    pub fn routing(&self) -> &RoutingAccuracyTrace {
        &self.progress.routing
    }

    /// Router weights with columns reordered by task id (origin column, if
    /// any, first).
    pub fn weights_by_task_id(&self) -> DMatrix<f64> {
        let mut cols: Vec<(Option<usize>, usize)> = self
            .progress
            .routes
            .iter()
            .enumerate()
            .map(|(c, r)| match r {
                RouteTarget::Origin => (None, c),
                RouteTarget::Task(id) => (Some(*id), c),
            })
            .collect();
        cols.sort();
        let idx: Vec<usize> = cols.into_iter().map(|(_, c)| c).collect();
        self.router.weights().select_columns(&idx)
    }
}

/// Runs every phase of `stream` in its configured order.
pub fn run_continual(stream: &TaskStream, config: &RunConfig) -> Result<ContinualOutcome> {
    let learner = Learner::new(config.clone())?;
    let mut source = StreamSource::new(stream)?;
    run_continual_with(&learner, &mut source)
}

pub fn run_continual_with<S: TaskSource + ?Sized>(
    learner: &Learner,
    source: &mut S,
) -> Result<ContinualOutcome> {
    if source.phase_count() == 0 {
        return Err(Error::EmptyDataset("task stream has no tasks"));
    }
    let mut session = ContinualSession::new(learner, source.phase_count())?;
    while session.phases_done() < source.phase_count() {
        session.step(source)?;
    }
    Ok(session.into_outcome())
}

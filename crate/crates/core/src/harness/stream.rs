//! Synthetic task stream.
//!
//! Vocabulary layout: token 0 ends a sequence, tokens `1..=8` are queries,
//! `9..=16` are answers and everything above is context. Every task owns a
//! private slice of the context tokens and a permutation rule mapping queries
//! to answers. A prompt is `context_len` context tokens followed by one query;
//! the answer is the rule applied to the query.
//!
//! `separation` controls how much the context reveals the task: each context
//! token comes from the task's private slice with probability `separation`,
//! otherwise uniformly from all context tokens.
//!
//! Task-agnostic prompts for the generalist route draw their context from the
//! answer range, which no task prompt contains.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const QUERY_TOKENS: usize = 8;
pub const FIRST_QUERY: usize = 1;
pub const FIRST_ANSWER: usize = FIRST_QUERY + QUERY_TOKENS;
pub const FIRST_CONTEXT: usize = FIRST_ANSWER + QUERY_TOKENS;

/// A prompt and the tokens expected after it (end token excluded).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderKind {
    #[default]
    Order1,
    Order2,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub tasks: usize,
    pub samples_per_task: usize,
    pub context_len: usize,
    pub separation: f64,
    pub router_fraction: f64,
    pub eval_fraction: f64,
    /// Task-agnostic prompts for the optional generalist route.
    pub generic_samples: usize,
    pub seed: u64,
    pub order: OrderKind,
    pub custom_order: Option<Vec<usize>>,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            tasks: 8,
            samples_per_task: 200,
            context_len: 12,
            separation: 1.0,
            router_fraction: 0.1,
            eval_fraction: 0.2,
            generic_samples: 40,
            seed: 3,
            order: OrderKind::Order1,
            custom_order: None,
        }
    }
}

/// Arrival order of the eight-task stream that mirrors the second benchmark
/// ordering (tasks named by their position in the first ordering).
pub const ORDER2_EIGHT: [usize; 8] = [5, 6, 1, 7, 0, 3, 2, 4];

impl StreamSpec {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.separation) {
            return Err(Error::InvalidArgument(format!(
                "separation must lie in [0, 1], got {}",
                self.separation
            )));
        }
        if self.tasks == 0 {
            return Err(Error::InvalidArgument(
                "stream needs at least one task".into(),
            ));
        }
        if self.context_len == 0 {
            return Err(Error::InvalidArgument("context_len must be >= 1".into()));
        }
        if vocab < FIRST_CONTEXT + self.tasks {
            return Err(Error::InvalidArgument(format!(
                "vocab {vocab} leaves fewer than one private context token per task"
            )));
        }
        let (eval, router, train) = self.split_sizes();
        if eval == 0 || router == 0 || train == 0 {
            return Err(Error::InvalidArgument(format!(
                "samples_per_task {} too small for train/router/eval splits",
                self.samples_per_task
            )));
        }
        self.arrival_order().map(|_| ())
    }

    /// `(eval, router_fit, train)` sample counts per task.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.samples_per_task;
        let eval = ((n as f64 * self.eval_fraction).round() as usize)
            .max(1)
            .min(n);
        let router = ((n as f64 * self.router_fraction).round() as usize)
            .max(1)
            .min(n - eval);
        (eval, router, n - eval - router)
    }

    /// Task ids in arrival order.
    pub fn arrival_order(&self) -> Result<Vec<usize>> {
        let k = self.tasks;
        let order = match self.order {
            OrderKind::Order1 => (0..k).collect(),
            OrderKind::Order2 if k == ORDER2_EIGHT.len() => ORDER2_EIGHT.to_vec(),
            OrderKind::Order2 => (0..k).rev().collect(),
            OrderKind::Custom => self
                .custom_order
                .clone()
                .ok_or_else(|| Error::Config("order = \"custom\" requires custom_order".into()))?,
        };
        let mut seen = vec![false; k];
        if order.len() != k {
            return Err(Error::Config(format!(
                "task order has {} entries for {k} tasks",
                order.len()
            )));
        }
        for &t in &order {
            if t >= k || seen[t] {
                return Err(Error::Config(format!(
                    "task order {order:?} is not a permutation"
                )));
            }
            seen[t] = true;
        }
        Ok(order)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    /// `rule[q]` is the answer offset for query offset `q`.
    pub rule: Vec<usize>,
    /// Private context tokens.
    pub context_tokens: Vec<usize>,
    pub train: Vec<Sample>,
    pub router_fit: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Task {
    pub fn answer_for(&self, query: usize) -> usize {
        FIRST_ANSWER + self.rule[query - FIRST_QUERY]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub spec: StreamSpec,
    pub vocab: usize,
    /// Indexed by task id.
    pub tasks: Vec<Task>,
    pub generic_router: Vec<Sample>,
    pub generic_eval: Vec<Sample>,
}

impl TaskStream {
    pub fn arrival_order(&self) -> Result<Vec<usize>> {
        self.spec.arrival_order()
    }

    pub fn task(&self, id: usize) -> &Task {
        &self.tasks[id]
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }
}

/// Builds the stream deterministically from `spec.seed`.
pub fn generate_task_stream(spec: &StreamSpec, vocab: usize) -> Result<TaskStream> {
    spec.validate(vocab)?;
    let k = spec.tasks;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let context: Vec<usize> = (FIRST_CONTEXT..vocab).collect();
    let group = context.len() / k;

    let mut rules: Vec<Vec<usize>> = Vec::with_capacity(k);
    while rules.len() < k {
        let mut rule: Vec<usize> = (0..QUERY_TOKENS).collect();
        rule.shuffle(&mut rng);
        if !rules.contains(&rule) {
            rules.push(rule);
        }
    }

    let (n_eval, n_router, _) = spec.split_sizes();
    let mut tasks = Vec::with_capacity(k);
    for (id, rule) in rules.into_iter().enumerate() {
        let private = context[id * group..(id + 1) * group].to_vec();
        let samples: Vec<Sample> = (0..spec.samples_per_task)
            .map(|_| {
                let mut prompt = Vec::with_capacity(spec.context_len + 1);
                for _ in 0..spec.context_len {
                    let tok = if rng.random::<f64>() < spec.separation {
                        *private.choose(&mut rng).unwrap()
                    } else {
                        *context.choose(&mut rng).unwrap()
                    };
                    prompt.push(tok);
                }
                let q = rng.random_range(0..QUERY_TOKENS);
                prompt.push(FIRST_QUERY + q);
                Sample {
                    prompt,
                    answer: vec![FIRST_ANSWER + rule[q]],
                }
            })
            .collect();
        let mut it = samples.into_iter();
        let eval: Vec<Sample> = it.by_ref().take(n_eval).collect();
        let router_fit: Vec<Sample> = it.by_ref().take(n_router).collect();
        let train: Vec<Sample> = it.collect();
        tasks.push(Task {
            id,
            rule,
            context_tokens: private,
            train,
            router_fit,
            eval,
        });
    }

    let mut generic = |n: usize| -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let mut prompt: Vec<usize> = (0..spec.context_len)
                    .map(|_| FIRST_ANSWER + rng.random_range(0..QUERY_TOKENS))
                    .collect();
                prompt.push(FIRST_QUERY + rng.random_range(0..QUERY_TOKENS));
                Sample {
                    prompt,
                    answer: Vec::new(),
                }
            })
            .collect()
    };
    let generic_router = generic(spec.generic_samples);
    let generic_eval = generic(spec.generic_samples);

    Ok(TaskStream {
        spec: spec.clone(),
        vocab,
        tasks,
        generic_router,
        generic_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let spec = StreamSpec::default();
        assert_eq!(
            generate_task_stream(&spec, 64).unwrap(),
            generate_task_stream(&spec, 64).unwrap()
        );
        let other = StreamSpec {
            seed: 4,
            ..StreamSpec::default()
        };
        assert_ne!(
            generate_task_stream(&spec, 64).unwrap(),
            generate_task_stream(&other, 64).unwrap()
        );
    }

    #[test]
    fn splits_have_expected_sizes_and_rules_hold() {
        let s = generate_task_stream(&StreamSpec::default(), 64).unwrap();
        assert_eq!(s.task_count(), 8);
        for t in &s.tasks {
            assert_eq!(
                (t.eval.len(), t.router_fit.len(), t.train.len()),
                (40, 20, 140)
            );
            for sample in t.train.iter().chain(&t.eval).chain(&t.router_fit) {
                assert_eq!(sample.prompt.len(), 13);
                let q = *sample.prompt.last().unwrap();
                assert_eq!(sample.answer, vec![t.answer_for(q)]);
                assert!(sample.prompt[..12]
                    .iter()
                    .all(|tok| t.context_tokens.contains(tok)));
            }
        }
        let rules: Vec<_> = s.tasks.iter().map(|t| t.rule.clone()).collect();
        for i in 0..rules.len() {
            for j in (i + 1)..rules.len() {
                assert_ne!(rules[i], rules[j]);
            }
        }
    }

    #[test]
    fn separation_bounds_are_enforced() {
        for sep in [-0.1, 1.5, f64::NAN] {
            let spec = StreamSpec {
                separation: sep,
                ..StreamSpec::default()
            };
            assert!(generate_task_stream(&spec, 64).is_err());
        }
    }

    #[test]
    fn orders() {
        let mut spec = StreamSpec::default();
        assert_eq!(spec.arrival_order().unwrap(), (0..8).collect::<Vec<_>>());
        spec.order = OrderKind::Order2;
        assert_eq!(spec.arrival_order().unwrap(), ORDER2_EIGHT.to_vec());
        spec.tasks = 3;
        assert_eq!(spec.arrival_order().unwrap(), vec![2, 1, 0]);
        spec.order = OrderKind::Custom;
        assert!(spec.arrival_order().is_err());
        spec.custom_order = Some(vec![1, 0, 2]);
        assert_eq!(spec.arrival_order().unwrap(), vec![1, 0, 2]);
        spec.custom_order = Some(vec![1, 1, 2]);
        assert!(spec.arrival_order().is_err());
    }
}

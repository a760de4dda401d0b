//! Batching, learning-rate schedule and evaluation shared by teacher
//! training and distillation.

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelKind, Parameters, TransformerModel};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use crate::tasks::{Example, Target, BOS};
use crate::tensor::Tape;

/// Groups example indices into buckets of identical (source, target) length
/// so every batch is rectangular.
#[derive(Debug, Clone)]
pub struct Batcher {
    buckets: Vec<Vec<usize>>,
}

impl Batcher {
    pub fn new(examples: &[Example]) -> Self {
        let mut order: Vec<(usize, usize)> = Vec::new();
        let mut by_key: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (i, e) in examples.iter().enumerate() {
            let key = (e.source.len(), e.sequence().map_or(0, <[u32]>::len));
            by_key
                .entry(key)
                .or_insert_with(|| {
                    order.push(key);
                    Vec::new()
                })
                .push(i);
        }
        Batcher {
            buckets: order.into_iter().map(|k| by_key.remove(&k).expect("key")).collect(),
        }
    }

    pub fn sequential(&self, size: usize) -> Vec<Vec<usize>> {
        self.buckets
            .iter()
            .flat_map(|b| b.chunks(size.max(1)).map(<[usize]>::to_vec))
            .collect()
    }

    /// One shuffled pass over the data.
    pub fn epoch(&self, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut batches = Vec::new();
        for b in &self.buckets {
            let mut idx = b.clone();
            idx.shuffle(rng);
            batches.extend(idx.chunks(size.max(1)).map(<[usize]>::to_vec));
        }
        batches.shuffle(rng);
        batches
    }
}

/// Endless seeded stream of training batches.
#[derive(Debug, Clone)]
pub struct BatchStream {
    batcher: Batcher,
    size: usize,
    rng: ChaCha8Rng,
    queue: VecDeque<Vec<usize>>,
}

impl BatchStream {
    pub fn new(examples: &[Example], size: usize, seed: u64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset("training split".into()));
        }
        if size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(BatchStream {
            batcher: Batcher::new(examples),
            size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: VecDeque::new(),
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.queue.extend(self.batcher.epoch(self.size, &mut self.rng));
        }
        self.queue.pop_front().expect("nonempty epoch")
    }
}

/// Model inputs and gold labels for a set of examples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source: Vec<Vec<u32>>,
    pub decoder_input: Option<Vec<Vec<u32>>>,
    /// Class ids, or target tokens flattened row-major for sequences.
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn gather(examples: &[Example], idx: &[usize]) -> Batch {
        let picked: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let source = picked.iter().map(|e| e.source.clone()).collect();
        let seq = picked.first().is_some_and(|e| e.sequence().is_some());
        let decoder_input = seq.then(|| picked.iter().filter_map(|e| e.decoder_input()).collect());
        let labels = picked
            .iter()
            .flat_map(|e| match &e.target {
                Target::Class(c) => vec![*c],
                Target::Sequence(s) => s.iter().map(|&t| t as usize).collect(),
            })
            .collect();
        Batch {
            source,
            decoder_input,
            labels,
        }
    }
}

/// Linear warmup to `base`, then linear decay to `base / 10` at `total`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let warm = if self.warmup == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup as f64).min(1.0)
        };
        let progress = step as f64 / self.total.max(1) as f64;
        self.base * warm * (1.0 - 0.9 * progress.min(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Class accuracy, or token accuracy under greedy decoding.
    pub accuracy: f64,
    /// Whole-sequence exact match (sequence tasks only).
    pub exact_match: Option<f64>,
    pub count: usize,
}

impl Metrics {
    /// The number sweeps compare: accuracy for classifiers, exact match for
    /// sequence tasks.
    pub fn primary(&self) -> f64 {
        self.exact_match.unwrap_or(self.accuracy)
    }
}

pub fn evaluate(model: &TransformerModel, examples: &[Example], batch_size: usize) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("evaluation split".into()));
    }
    let mut correct = 0usize;
    let mut positions = 0usize;
    let mut exact = 0usize;
    for idx in Batcher::new(examples).sequential(batch_size) {
        let batch = Batch::gather(examples, &idx);
        match model.spec().kind {
            ModelKind::EncoderClassifier => {
                let pred = model.predict_classes(&batch.source)?;
                correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
                positions += pred.len();
            }
            ModelKind::EncoderDecoder => {
                let len = examples[idx[0]].sequence().map_or(0, <[u32]>::len);
                let decoded = model.greedy_decode(&batch.source, BOS, len)?;
                for (d, &i) in decoded.iter().zip(&idx) {
                    let gold = examples[i].sequence().unwrap_or(&[]);
                    let hits = d.iter().zip(gold).filter(|(a, b)| a == b).count();
                    correct += hits;
                    positions += gold.len();
                    exact += usize::from(hits == gold.len());
                }
            }
        }
    }
    let n = examples.len();
    Ok(Metrics {
        accuracy: correct as f64 / positions.max(1) as f64,
        exact_match: (model.spec().kind == ModelKind::EncoderDecoder).then(|| exact as f64 / n as f64),
        count: n,
    })
}

/// Settings for plain supervised (cross-entropy) training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub eval_every: usize,
    /// Stop early once the dev primary metric reaches this value.
    pub target_metric: Option<f64>,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            optimizer: OptimizerKind::adam(),
            learning_rate: 1e-3,
            warmup_steps: 100,
            max_steps: 3000,
            batch_size: 32,
            grad_clip: Some(1.0),
            eval_every: 100,
            target_metric: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedOutcome {
    pub steps_run: usize,
    pub selected_step: usize,
    pub dev: Option<Metrics>,
    pub losses: Vec<f64>,
    pub evals: Vec<(usize, Metrics)>,
}

/// Cross-entropy training with dev-based best-parameter selection.
pub fn train_supervised(
    model: &mut TransformerModel,
    train: &[Example],
    dev: &[Example],
    config: &SupervisedConfig,
) -> Result<SupervisedOutcome> {
    let schedule = LrSchedule {
        base: config.learning_rate,
        warmup: config.warmup_steps,
        total: config.max_steps,
    };
    let mut stream = BatchStream::new(train, config.batch_size, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut tape = Tape::new();
    let mut losses = Vec::with_capacity(config.max_steps);
    let mut evals = Vec::new();
    let mut best: Option<(Metrics, usize, Parameters)> = None;
    let select = config.eval_every > 0 && !dev.is_empty();
    let mut steps_run = 0;
    for step in 0..config.max_steps {
        let batch = Batch::gather(train, &stream.next_batch());
        let loss = (|| -> Result<f64> {
            tape.reset();
            let bound = model.bind(&mut tape);
            let out = model.forward(&mut tape, &bound, &batch.source, batch.decoder_input.as_deref())?;
            let loss = tape.cross_entropy(out.logits, &batch.labels)?;
            tape.backward(loss)?;
            model.params_mut().zero_grad();
            model.params_mut().accumulate(&tape, &bound)?;
            if let Some(max) = config.grad_clip {
                if !clip_grad_norm(model.params_mut().tensors_mut(), max).is_finite() {
                    return Err(Error::NonFinite { op: "gradient" });
                }
            }
            optimizer.step(model.params_mut().tensors_mut(), schedule.at(step))?;
            tape.item(loss)
        })()
        .map_err(|e| Error::Training {
            step,
            source: Box::new(e),
        })?;
        losses.push(loss);
        steps_run = step + 1;
        let last = step + 1 == config.max_steps;
        if select && ((step + 1) % config.eval_every == 0 || last) {
            let metrics = evaluate(model, dev, 256)?;
            evals.push((step, metrics));
            if best.as_ref().is_none_or(|(m, _, _)| metrics.primary() > m.primary()) {
                best = Some((metrics, step, model.params().clone()));
            }
            if config.target_metric.is_some_and(|t| metrics.primary() >= t) {
                break;
            }
        }
    }
    let (dev_metrics, selected_step) = match best {
        Some((m, step, params)) => {
            *model.params_mut() = params;
            (Some(m), step)
        }
        None => (None, steps_run.saturating_sub(1)),
    };
    Ok(SupervisedOutcome {
        steps_run,
        selected_step,
        dev: dev_metrics,
        losses,
        evals,
    })
}

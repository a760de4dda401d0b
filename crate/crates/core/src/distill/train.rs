use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{hidden_match_loss, kl_loss, select_layers, total_distill_loss, LayerMapping, ProjectionSet, Strategy};
use crate::error::{Error, Result};
use crate::models::{ModelKind, Parameters, TransformerModel};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use crate::tasks::Example;
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{evaluate, Batch, BatchStream, Batcher, LrSchedule, Metrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Random,
    WeightCopy,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::Random => "random",
            InitScheme::WeightCopy => "weight_copy",
        }
    }
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitScheme::Random),
            "weight_copy" | "weight-copy" => Ok(InitScheme::WeightCopy),
            _ => Err(Error::Config(format!("unknown init scheme {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Mse,
}

/// Everything that determines one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lambda: f64,
    pub strategy: Strategy,
    pub init: InitScheme,
    pub distance: DistanceMetric,
    pub temperature: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    /// Dev evaluation interval for best-checkpoint selection; 0 disables.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 1.0,
            strategy: Strategy::Forward,
            init: InitScheme::Random,
            distance: DistanceMetric::Mse,
            temperature: 1.0,
            optimizer: OptimizerKind::sgd(0.9),
            learning_rate: 0.05,
            warmup_steps: 50,
            steps: 1000,
            batch_size: 32,
            grad_clip: Some(1.0),
            eval_every: 100,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        Ok(())
    }

    /// λ actually applied; the none strategy has no hidden term.
    pub fn effective_lambda(&self) -> f64 {
        if self.strategy == Strategy::None {
            0.0
        } else {
            self.lambda
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub kl: f64,
    pub hid: f64,
    pub total: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub mapping: LayerMapping,
    /// One projection set per stack, encoder first.
    pub projections: Vec<ProjectionSet>,
    pub log: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Step whose parameters were kept (last step when selection is off).
    pub selected_step: usize,
    pub dev: Option<Metrics>,
}

/// Frozen teacher outputs per example, computed once and shared by runs.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    fingerprint: String,
    num_layers: usize,
    /// `[example] -> logits rows`.
    logits: Vec<Vec<f64>>,
    /// `[example][stack][layer] -> [seq, hidden]`.
    hidden: Vec<Vec<Vec<Vec<f64>>>>,
    hidden_dim: usize,
    logit_width: usize,
}

impl TeacherCache {
    pub fn build(teacher: &TransformerModel, examples: &[Example], batch_size: usize) -> Result<Self> {
        let spec = teacher.spec();
        let width = match spec.kind {
            ModelKind::EncoderClassifier => spec.num_classes,
            ModelKind::EncoderDecoder => spec.vocab_size,
        };
        let mut logits = vec![Vec::new(); examples.len()];
        let mut hidden = vec![Vec::new(); examples.len()];
        for idx in Batcher::new(examples).sequential(batch_size) {
            let batch = Batch::gather(examples, &idx);
            let mut tape = Tape::new();
            let bound = teacher.bind_frozen(&mut tape);
            let out = teacher.forward(&mut tape, &bound, &batch.source, batch.decoder_input.as_deref())?;
            let lv = tape.value(out.logits);
            let per = lv.len() / idx.len();
            for (b, &i) in idx.iter().enumerate() {
                logits[i] = lv[b * per..(b + 1) * per].to_vec();
                hidden[i] = out
                    .stacks()
                    .iter()
                    .map(|stack| {
                        stack
                            .iter()
                            .map(|&h| {
                                let v = tape.value(h);
                                let per = v.len() / idx.len();
                                v[b * per..(b + 1) * per].to_vec()
                            })
                            .collect()
                    })
                    .collect();
            }
        }
        Ok(TeacherCache {
            fingerprint: teacher.params().fingerprint(),
            num_layers: spec.num_layers,
            logits,
            hidden,
            hidden_dim: spec.hidden_dim,
            logit_width: width,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    fn logits(&self, tape: &mut Tape, idx: &[usize]) -> Result<Var> {
        let data: Vec<f64> = idx.iter().flat_map(|&i| self.logits[i].iter().copied()).collect();
        let rows = data.len() / self.logit_width;
        Ok(tape.constant(Tensor::new(vec![rows, self.logit_width], data)?))
    }

    fn hidden(&self, tape: &mut Tape, idx: &[usize], stack: usize) -> Result<Vec<Var>> {
        (0..self.num_layers)
            .map(|layer| {
                let data: Vec<f64> = idx
                    .iter()
                    .flat_map(|&i| self.hidden[i][stack][layer].iter().copied())
                    .collect();
                let seq = data.len() / (idx.len() * self.hidden_dim);
                Ok(tape.constant(Tensor::new(vec![idx.len(), seq, self.hidden_dim], data)?))
            })
            .collect()
    }
}

fn trainable<'a>(
    student: &'a mut TransformerModel,
    projections: &'a mut [ProjectionSet],
) -> impl Iterator<Item = &'a mut Tensor> {
    student
        .params_mut()
        .tensors_mut()
        .chain(projections.iter_mut().flat_map(ProjectionSet::tensors_mut))
}

/// Distills `teacher` into `student` on `train`, selecting the best
/// parameters on `dev` when `config.eval_every > 0` and `dev` is nonempty.
///
/// The teacher is only read. Pass a [`TeacherCache`] built from the same
/// teacher and `train` to avoid recomputing teacher outputs.
pub fn distill(
    teacher: &TransformerModel,
    student: &mut TransformerModel,
    config: &DistillConfig,
    train: &[Example],
    dev: &[Example],
    cache: Option<&TeacherCache>,
) -> Result<DistillOutcome> {
    config.validate()?;
    teacher.spec().check_compatible(student.spec())?;
    let teacher_fp = teacher.params().fingerprint();
    let own_cache;
    let cache = match cache {
        Some(c) => {
            if c.fingerprint != teacher_fp || c.len() != train.len() {
                return Err(Error::Contract(
                    "teacher cache was built for a different teacher or dataset".into(),
                ));
            }
            c
        }
        None => {
            own_cache = TeacherCache::build(teacher, train, config.batch_size.max(64))?;
            &own_cache
        }
    };

    let (ls, lt) = (student.spec().num_layers, teacher.spec().num_layers);
    let mapping = select_layers(config.strategy, ls, lt, Some(config.seed))?;
    let dim = student.spec().hidden_dim;
    let mut projections: Vec<ProjectionSet> = (0..student.spec().num_stacks())
        .map(|s| {
            ProjectionSet::new(
                &mapping,
                dim,
                teacher.spec().hidden_dim,
                config.seed ^ (0x5eed + s as u64),
            )
        })
        .collect();
    let lambda = config.effective_lambda();
    let schedule = LrSchedule {
        base: config.learning_rate,
        warmup: config.warmup_steps,
        total: config.steps,
    };
    let mut stream = BatchStream::new(train, config.batch_size, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut log = Vec::with_capacity(config.steps);
    let mut evals = Vec::new();
    let mut best: Option<(Metrics, usize, Parameters, Vec<ProjectionSet>)> = None;
    let mut tape = Tape::new();
    let started = Instant::now();
    let select = config.eval_every > 0 && !dev.is_empty();

    for step in 0..config.steps {
        let idx = stream.next_batch();
        let batch = Batch::gather(train, &idx);
        let record = (|| -> Result<StepRecord> {
            tape.reset();
            let bound = student.bind(&mut tape);
            let bound_proj: Vec<_> = projections.iter().map(|p| p.bind(&mut tape)).collect();
            let out = student.forward(&mut tape, &bound, &batch.source, batch.decoder_input.as_deref())?;
            let teacher_logits = cache.logits(&mut tape, &idx)?;
            let kl = kl_loss(&mut tape, teacher_logits, out.logits, config.temperature)?;
            let mut hid: Option<Var> = None;
            for (s, stack) in out.stacks().into_iter().enumerate() {
                let teacher_hidden = cache.hidden(&mut tape, &idx, s)?;
                let h = hidden_match_loss(&mut tape, stack, &teacher_hidden, &mapping, &bound_proj[s])?;
                hid = Some(match hid {
                    Some(acc) => tape.add(acc, h)?,
                    None => h,
                });
            }
            let hid = hid.expect("at least one stack");
            let total = total_distill_loss(&mut tape, kl, hid, lambda)?;
            tape.backward(total)?;

            student.params_mut().zero_grad();
            student.params_mut().accumulate(&tape, &bound)?;
            for (p, b) in projections.iter_mut().zip(&bound_proj) {
                p.zero_grad();
                p.accumulate(&tape, b)?;
            }
            if let Some(max) = config.grad_clip {
                let norm = clip_grad_norm(trainable(student, &mut projections), max);
                if !norm.is_finite() {
                    return Err(Error::NonFinite { op: "gradient" });
                }
            }
            optimizer.step(trainable(student, &mut projections), schedule.at(step))?;
            Ok(StepRecord {
                step,
                kl: tape.item(kl)?,
                hid: tape.item(hid)?,
                total: tape.item(total)?,
                wall_time: started.elapsed().as_secs_f64(),
            })
        })()
        .map_err(|e| Error::Training {
            step,
            source: Box::new(e),
        })?;
        log.push(record);

        let last = step + 1 == config.steps;
        if select && ((step + 1) % config.eval_every == 0 || last) {
            let metrics = evaluate(student, dev, 256)?;
            evals.push(EvalRecord { step, metrics });
            if best.as_ref().is_none_or(|(m, ..)| metrics.primary() > m.primary()) {
                best = Some((metrics, step, student.params().clone(), projections.clone()));
            }
        }
    }

    if teacher.params().fingerprint() != teacher_fp {
        return Err(Error::Contract("teacher parameters changed during distillation".into()));
    }
    let (dev_metrics, selected_step) = match best {
        Some((m, step, params, kept)) => {
            *student.params_mut() = params;
            projections = kept;
            (Some(m), step)
        }
        None => (None, config.steps.saturating_sub(1)),
    };
    Ok(DistillOutcome {
        mapping,
        projections,
        log,
        evals,
        selected_step,
        dev: dev_metrics,
    })
}

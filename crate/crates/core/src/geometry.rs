//! Angle diagnostic: from a student hidden state `h`, the cosine of the angle
//! between the directions toward two teacher hidden states,
//! `u_k = t_k - h`. Positive cosines mean both teacher layers pull the
//! student the same broad way.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distill::{LayerMapping, Projection, ProjectionSet};
use crate::error::{Error, Result};
use crate::models::TransformerModel;
use crate::tasks::Example;
use crate::tensor::Tape;
use crate::training::{Batch, Batcher};

/// Difference vectors shorter than this have no direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Number of equal-width bins over `[-1, 1]` in per-layer histograms.
pub const HISTOGRAM_BINS: usize = 20;

/// Symmetric matrix of cosines over teacher-layer pairs. `None` marks pairs
/// touching a degenerate difference vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineMatrix {
    n: usize,
    values: Vec<Option<f64>>,
}

impl CosineMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Zero-based teacher layers `a`, `b`.
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        self.values[a * self.n + b]
    }
}

/// Cosines of the angles at `student` between every pair of directions
/// `teachers[a] - student`, `teachers[b] - student`.
pub fn pairwise_angle_cosines(student: &[f64], teachers: &[&[f64]]) -> Result<CosineMatrix> {
    if let Some(bad) = teachers.iter().find(|t| t.len() != student.len()) {
        return Err(Error::dim(
            "pairwise_angle_cosines",
            format!(
                "student vector has {} values, teacher vector {}",
                student.len(),
                bad.len()
            ),
        ));
    }
    let n = teachers.len();
    let diffs: Vec<Vec<f64>> = teachers
        .iter()
        .map(|t| t.iter().zip(student).map(|(a, b)| a - b).collect())
        .collect();
    let norms: Vec<f64> = diffs.iter().map(|u| dot(u, u).sqrt()).collect();
    let mut values = vec![None; n * n];
    for a in 0..n {
        if norms[a] < DEGENERATE_NORM {
            continue;
        }
        values[a * n + a] = Some(1.0);
        for b in a + 1..n {
            if norms[b] < DEGENERATE_NORM {
                continue;
            }
            let c = dot(&diffs[a], &diffs[b]) / (norms[a] * norms[b]);
            values[a * n + b] = Some(c);
            values[b * n + a] = Some(c);
        }
    }
    Ok(CosineMatrix { n, values })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Streaming mean and variance, mergeable with Chan's pairwise update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    /// Sum of squared deviations from the mean.
    pub m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    /// Population standard deviation; 0 for fewer than two samples.
    pub fn std(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }
}

/// Which vectors are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Every token position separately.
    #[default]
    PerToken,
    /// One mean-pooled vector per sequence.
    MeanPooled,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::PerToken => "per_token",
            Aggregation::MeanPooled => "mean_pooled",
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_token" | "per-token" => Ok(Aggregation::PerToken),
            "mean_pooled" | "mean-pooled" => Ok(Aggregation::MeanPooled),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// One aggregated `(student layer, teacher a, teacher b)` record, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub student_layer: usize,
    pub teacher_a: usize,
    pub teacher_b: usize,
    pub mean: f64,
    pub std: f64,
    pub count: u64,
    /// Observations dropped because a difference vector was degenerate.
    pub excluded: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleSummary {
    /// Mean over triples of each triple's mean cosine.
    pub mean_cosine: f64,
    /// Share of triples whose mean cosine is strictly positive.
    pub positive_fraction: f64,
    /// Triples with at least one defined observation.
    pub triples: usize,
    pub observations: u64,
    pub excluded: u64,
}

/// Aggregated cosine statistics for every student layer and teacher pair
/// `a < b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleReport {
    student_layers: usize,
    teacher_layers: usize,
    aggregation: Aggregation,
    pub metadata: BTreeMap<String, String>,
    /// Indexed by `student * pairs + pair_index(a, b)`.
    stats: Vec<RunningStats>,
    excluded: Vec<u64>,
    /// `[student][bin]` counts of clamped cosine values.
    histograms: Vec<Vec<u64>>,
}

impl AngleReport {
    pub fn new(student_layers: usize, teacher_layers: usize, aggregation: Aggregation) -> Self {
        let cells = student_layers * pair_count(teacher_layers);
        AngleReport {
            student_layers,
            teacher_layers,
            aggregation,
            metadata: BTreeMap::new(),
            stats: vec![RunningStats::default(); cells],
            excluded: vec![0; cells],
            histograms: vec![vec![0; HISTOGRAM_BINS]; student_layers],
        }
    }

    pub fn student_layers(&self) -> usize {
        self.student_layers
    }

    pub fn teacher_layers(&self) -> usize {
        self.teacher_layers
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn with_dataset(mut self, id: impl Into<String>) -> Self {
        self.metadata.insert("dataset".into(), id.into());
        self
    }

    fn cell(&self, student: usize, a: usize, b: usize) -> usize {
        let n = self.teacher_layers;
        // Row-major index of (a, b) in the strict upper triangle.
        let pair = a * (2 * n - a - 1) / 2 + (b - a - 1);
        student * pair_count(n) + pair
    }

    /// Adds one cosine matrix seen from zero-based `student` layer.
    pub fn observe(&mut self, student: usize, cosines: &CosineMatrix) -> Result<()> {
        if student >= self.student_layers || cosines.len() != self.teacher_layers {
            return Err(Error::Contract(format!(
                "observation for student layer {student} with {} teacher layers does not fit a {}x{} report",
                cosines.len(),
                self.student_layers,
                self.teacher_layers
            )));
        }
        for a in 0..self.teacher_layers {
            for b in a + 1..self.teacher_layers {
                let cell = self.cell(student, a, b);
                match cosines.get(a, b) {
                    Some(c) => {
                        let c = c.clamp(-1.0, 1.0);
                        self.stats[cell].push(c);
                        let bin = (((c + 1.0) / 2.0) * HISTOGRAM_BINS as f64) as usize;
                        self.histograms[student][bin.min(HISTOGRAM_BINS - 1)] += 1;
                    }
                    None => self.excluded[cell] += 1,
                }
            }
        }
        Ok(())
    }

    /// Folds `other` into `self`. Metadata from `self` wins on key clashes.
    pub fn merge(&mut self, other: &AngleReport) -> Result<()> {
        if (self.student_layers, self.teacher_layers, self.aggregation)
            != (other.student_layers, other.teacher_layers, other.aggregation)
        {
            return Err(Error::Contract(format!(
                "cannot merge a {}x{} {} report into a {}x{} {} report",
                other.student_layers,
                other.teacher_layers,
                other.aggregation.name(),
                self.student_layers,
                self.teacher_layers,
                self.aggregation.name()
            )));
        }
        for (s, o) in self.stats.iter_mut().zip(&other.stats) {
            s.merge(o);
        }
        for (s, o) in self.excluded.iter_mut().zip(&other.excluded) {
            *s += o;
        }
        for (hs, ho) in self.histograms.iter_mut().zip(&other.histograms) {
            hs.iter_mut().zip(ho).for_each(|(a, b)| *a += b);
        }
        for (k, v) in &other.metadata {
            self.metadata.entry(k.clone()).or_insert_with(|| v.clone());
        }
        Ok(())
    }

    pub fn triples(&self) -> Vec<TripleRecord> {
        let mut out = Vec::with_capacity(self.stats.len());
        for s in 0..self.student_layers {
            for a in 0..self.teacher_layers {
                for b in a + 1..self.teacher_layers {
                    let cell = self.cell(s, a, b);
                    let st = &self.stats[cell];
                    out.push(TripleRecord {
                        student_layer: s + 1,
                        teacher_a: a + 1,
                        teacher_b: b + 1,
                        mean: st.mean.clamp(-1.0, 1.0),
                        std: st.std(),
                        count: st.count,
                        excluded: self.excluded[cell],
                    });
                }
            }
        }
        out
    }

    pub fn stats(&self, student_layer: usize, teacher_a: usize, teacher_b: usize) -> Option<RunningStats> {
        let valid = (1..=self.student_layers).contains(&student_layer)
            && 1 <= teacher_a
            && teacher_a < teacher_b
            && teacher_b <= self.teacher_layers;
        valid.then(|| self.stats[self.cell(student_layer - 1, teacher_a - 1, teacher_b - 1)])
    }

    pub fn summary(&self) -> AngleSummary {
        let defined: Vec<&RunningStats> = self.stats.iter().filter(|s| s.count > 0).collect();
        let triples = defined.len();
        let mean_cosine = if triples == 0 {
            f64::NAN
        } else {
            defined.iter().map(|s| s.mean.clamp(-1.0, 1.0)).sum::<f64>() / triples as f64
        };
        let positive = defined.iter().filter(|s| s.mean > 0.0).count();
        AngleSummary {
            mean_cosine,
            positive_fraction: if triples == 0 {
                0.0
            } else {
                positive as f64 / triples as f64
            },
            triples,
            observations: self.stats.iter().map(|s| s.count).sum(),
            excluded: self.excluded.iter().sum(),
        }
    }

    /// Bin counts for zero-based `student` layer, bins spanning `[-1, 1]`.
    pub fn histogram(&self, student: usize) -> &[u64] {
        &self.histograms[student]
    }

    /// One tab-separated record per triple, then a summary block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# student_layers {}", self.student_layers);
        let _ = writeln!(out, "# teacher_layers {}", self.teacher_layers);
        let _ = writeln!(out, "# aggregation {}", self.aggregation.name());
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k} {v}");
        }
        out.push_str("student_layer\tteacher_a\tteacher_b\tmean\tstd\tcount\texcluded\n");
        for t in self.triples() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}",
                t.student_layer, t.teacher_a, t.teacher_b, t.mean, t.std, t.count, t.excluded
            );
        }
        let s = self.summary();
        out.push_str("\n[summary]\n");
        let _ = writeln!(out, "mean_cosine = {:.6}", s.mean_cosine);
        let _ = writeln!(out, "positive_fraction = {:.6}", s.positive_fraction);
        let _ = writeln!(out, "triples = {}", s.triples);
        let _ = writeln!(out, "observations = {}", s.observations);
        let _ = writeln!(out, "excluded = {}", s.excluded);
        out
    }

    /// Plain-text histogram for one zero-based student layer: bin lower
    /// edge, upper edge and count per line.
    pub fn histogram_text(&self, student: usize) -> String {
        let width = 2.0 / HISTOGRAM_BINS as f64;
        let mut out = format!("# student_layer {}\nlow\thigh\tcount\n", student + 1);
        for (i, c) in self.histograms[student].iter().enumerate() {
            let lo = -1.0 + i as f64 * width;
            let _ = writeln!(out, "{:.2}\t{:.2}\t{c}", lo, lo + width);
        }
        out
    }
}

fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Settings for [`build_angle_report`].
#[derive(Debug, Clone, Copy, Default)]
pub struct AngleOptions<'a> {
    pub aggregation: Aggregation,
    /// Hidden-state stack to compare (0 = encoder, 1 = decoder).
    pub stack: usize,
    /// Map mapped student layers through their distillation projections
    /// before comparing. Unmapped layers stay raw.
    pub projections: Option<(&'a LayerMapping, &'a ProjectionSet)>,
    /// Examples per forward pass.
    pub batch_size: usize,
}

/// Runs both models on `sample` and aggregates angle cosines for every
/// student layer against every teacher layer pair.
pub fn build_angle_report(
    student: &TransformerModel,
    teacher: &TransformerModel,
    sample: &[Example],
    options: &AngleOptions<'_>,
) -> Result<AngleReport> {
    if sample.is_empty() {
        return Err(Error::EmptyDataset("angle sample".into()));
    }
    let (ss, ts) = (student.spec(), teacher.spec());
    if ss.kind != ts.kind {
        return Err(Error::Contract("student and teacher are different model kinds".into()));
    }
    if options.stack >= ss.num_stacks() {
        return Err(Error::Contract(format!("model has no hidden stack {}", options.stack)));
    }
    let layer_maps = student_layer_maps(ss.num_layers, ss.hidden_dim, ts.hidden_dim, options.projections)?;
    let mut report = AngleReport::new(ss.num_layers, ts.num_layers, options.aggregation);
    report.metadata.insert("student".into(), student.params().fingerprint());
    report.metadata.insert("teacher".into(), teacher.params().fingerprint());
    report.metadata.insert("sample_size".into(), sample.len().to_string());
    report
        .metadata
        .insert("projected".into(), options.projections.is_some().to_string());
    for idx in Batcher::new(sample).sequential(options.batch_size.max(1)) {
        let batch = Batch::gather(sample, &idx);
        let s_hidden = stack_values(student, &batch, options.stack)?;
        let t_hidden = stack_values(teacher, &batch, options.stack)?;
        let rows = vectors(&t_hidden[0], ts.hidden_dim, idx.len(), options.aggregation).len();
        let t_vecs: Vec<Vec<Vec<f64>>> = t_hidden
            .iter()
            .map(|h| vectors(h, ts.hidden_dim, idx.len(), options.aggregation))
            .collect();
        for (layer, h) in s_hidden.iter().enumerate() {
            let s_vecs = vectors(h, ss.hidden_dim, idx.len(), options.aggregation);
            for r in 0..rows {
                let hs = match &layer_maps[layer] {
                    Some(a) => apply(a, &s_vecs[r]),
                    None => s_vecs[r].clone(),
                };
                let ts_row: Vec<&[f64]> = t_vecs.iter().map(|t| t[r].as_slice()).collect();
                report.observe(layer, &pairwise_angle_cosines(&hs, &ts_row)?)?;
            }
        }
    }
    Ok(report)
}

/// Per student layer, the `[teacher_dim, student_dim]` matrix to apply, if any.
fn student_layer_maps(
    student_layers: usize,
    student_dim: usize,
    teacher_dim: usize,
    projections: Option<(&LayerMapping, &ProjectionSet)>,
) -> Result<Vec<Option<Vec<f64>>>> {
    let mut maps = vec![None; student_layers];
    let mut covered = vec![student_dim == teacher_dim; student_layers];
    if let Some((mapping, set)) = projections {
        if set.len() != mapping.pairs().len() {
            return Err(Error::Contract("projection set does not match the mapping".into()));
        }
        if set.student_dim() != student_dim || set.teacher_dim() != teacher_dim {
            return Err(Error::Contract("projection dims do not match the models".into()));
        }
        for (&(s, _), p) in mapping.pairs().iter().zip(set.projections()) {
            let layer = s - 1;
            if layer >= student_layers {
                return Err(Error::Contract(format!("mapping names student layer {s}")));
            }
            if let Projection::Linear(a) = p {
                maps[layer] = Some(a.data().to_vec());
            }
            covered[layer] = true;
        }
    }
    if let Some(l) = covered.iter().position(|c| !c) {
        return Err(Error::Contract(format!(
            "student layer {} has width {student_dim} but the teacher has {teacher_dim} and no projection applies",
            l + 1
        )));
    }
    Ok(maps)
}

fn apply(a: &[f64], h: &[f64]) -> Vec<f64> {
    a.chunks(h.len()).map(|row| dot(row, h)).collect()
}

fn stack_values(model: &TransformerModel, batch: &Batch, stack: usize) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let out = model.forward(&mut tape, &bound, &batch.source, batch.decoder_input.as_deref())?;
    Ok(out.stacks()[stack].iter().map(|&v| tape.value(v).to_vec()).collect())
}

/// Splits a `[batch, seq, dim]` buffer into comparison vectors.
fn vectors(data: &[f64], dim: usize, batch: usize, aggregation: Aggregation) -> Vec<Vec<f64>> {
    match aggregation {
        Aggregation::PerToken => data.chunks(dim).map(<[f64]>::to_vec).collect(),
        Aggregation::MeanPooled => data
            .chunks(data.len() / batch)
            .map(|seq| {
                let t = (seq.len() / dim) as f64;
                let mut v = vec![0.0; dim];
                for tok in seq.chunks(dim) {
                    v.iter_mut().zip(tok).for_each(|(a, b)| *a += b);
                }
                v.iter_mut().for_each(|x| *x /= t);
                v
            })
            .collect(),
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plan::{Cell, ExperimentPlan};
use crate::distill::{distill, evenly_spaced, select_layers, DistillConfig, InitScheme, LayerMapping, TeacherCache};
use crate::error::{Error, Result};
use crate::geometry::{build_angle_report, Aggregation, AngleOptions, AngleReport, AngleSummary};
use crate::models::{
    build_model, init_student_from_teacher, load_checkpoint, save_checkpoint, ModelSpec, TransformerModel,
};
use crate::tasks::{Example, Split};
use crate::training::{evaluate, train_supervised, Metrics};

pub const DONE_MARKER: &str = "DONE";

/// Paths inside a sweep output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn plan(&self) -> PathBuf {
        self.root.join("plan.toml")
    }

    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.root.join("teacher").join("checkpoint")
    }

    pub fn teacher_metrics(&self) -> PathBuf {
        self.root.join("teacher").join("metrics.json")
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join("runs").join(id)
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.ndjson")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub task: String,
    pub spec: ModelSpec,
    pub seed: u64,
    pub training_seed: u64,
    pub steps_run: usize,
    pub selected_step: usize,
    pub dev: Metrics,
    pub test: Metrics,
    pub floor: f64,
    /// Dev primary metric is below `floor`.
    pub weak: bool,
    pub fingerprint: String,
    pub wall_time: f64,
}

/// Trains the plan's teacher to its target metric (or step budget) and
/// saves checkpoint and metrics under the plan's output directory.
pub fn train_teacher(plan: &ExperimentPlan) -> Result<TeacherReport> {
    let started = Instant::now();
    let data = plan.task.load()?;
    let (train, dev, test) = (
        data.split(Split::Train),
        data.split(Split::Dev),
        data.split(Split::Test),
    );
    let spec = plan.teacher.model_spec(&data);
    let mut model = build_model(&spec, plan.teacher.seed)?;
    let outcome = train_supervised(&mut model, &train, &dev, &plan.teacher.training)?;
    let dev_metrics = match outcome.dev {
        Some(m) => m,
        None => evaluate(&model, &dev, 256)?,
    };
    let test_metrics = evaluate(&model, &test, 256)?;
    let layout = Layout::new(&plan.output_dir);
    let metadata = BTreeMap::from([
        ("role".to_string(), "teacher".to_string()),
        ("task".to_string(), plan.task.id()),
    ]);
    let manifest = save_checkpoint(&model, layout.teacher_checkpoint(), metadata)?;
    let report = TeacherReport {
        task: plan.task.id(),
        spec,
        seed: plan.teacher.seed,
        training_seed: plan.teacher.training.seed,
        steps_run: outcome.steps_run,
        selected_step: outcome.selected_step,
        dev: dev_metrics,
        test: test_metrics,
        floor: plan.teacher.floor,
        weak: dev_metrics.primary() < plan.teacher.floor,
        fingerprint: manifest.fingerprint,
        wall_time: started.elapsed().as_secs_f64(),
    };
    fs::write(layout.teacher_metrics(), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn load_teacher(layout: &Layout) -> Result<(TransformerModel, TeacherReport)> {
    let path = layout.teacher_metrics();
    if !path.exists() {
        return Err(Error::Config(format!(
            "no teacher under {}; run train-teacher first",
            layout.root().display()
        )));
    }
    let report: TeacherReport = serde_json::from_str(&fs::read_to_string(path)?)?;
    let (model, manifest) = load_checkpoint(layout.teacher_checkpoint())?;
    if manifest.fingerprint != report.fingerprint {
        return Err(Error::Format(
            "teacher checkpoint does not match its metrics record".into(),
        ));
    }
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub steps: usize,
    pub first_total: f64,
    pub final_total: f64,
    pub min_total: f64,
    pub final_kl: f64,
    pub final_hid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub id: String,
    pub cell: Cell,
    pub status: RunStatus,
    pub error: Option<String>,
    pub dev: Option<Metrics>,
    pub test: Option<Metrics>,
    pub selected_step: Option<usize>,
    pub loss: Option<LossSummary>,
    pub wall_time: f64,
    pub checkpoint: Option<PathBuf>,
}

impl RunResult {
    fn failed(cell: Cell, error: String, wall_time: f64) -> Self {
        RunResult {
            id: cell.id(),
            cell,
            status: RunStatus::Failed,
            error: Some(error),
            dev: None,
            test: None,
            selected_step: None,
            loss: None,
            wall_time,
            checkpoint: None,
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == RunStatus::Success
    }

    /// Dev primary metric of a successful run.
    pub fn score(&self) -> Option<f64> {
        self.dev.map(|m| m.primary())
    }
}

/// Everything a run needs to be reproduced, written before training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub id: String,
    pub cell: Cell,
    pub task: String,
    pub student_spec: ModelSpec,
    pub student_seed: u64,
    pub teacher_fingerprint: String,
    pub copy_map: Option<Vec<usize>>,
    pub mapping: LayerMapping,
    pub config: DistillConfig,
    pub transfer_size: usize,
}

struct SweepContext<'a> {
    plan: &'a ExperimentPlan,
    layout: Layout,
    teacher: &'a TransformerModel,
    teacher_fp: String,
    cache: &'a TeacherCache,
    train: &'a [Example],
    dev: &'a [Example],
    test: &'a [Example],
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// One record per plan cell, in plan order.
    pub results: Vec<RunResult>,
    /// Cells executed by this call (the rest were already complete).
    pub executed: usize,
}

pub fn run_sweep(plan: &ExperimentPlan) -> Result<SweepOutcome> {
    run_sweep_with(plan, |_| {})
}

/// Runs every incomplete cell of `plan`, calling `on_done` as each
/// finishes. Cells whose directory holds a completion marker are skipped.
pub fn run_sweep_with(plan: &ExperimentPlan, on_done: impl Fn(&RunResult) + Sync) -> Result<SweepOutcome> {
    plan.validate()?;
    let layout = Layout::new(&plan.output_dir);
    fs::create_dir_all(layout.root())?;
    fs::write(layout.plan(), plan.to_toml()?)?;
    let (teacher, report) = load_teacher(&layout)?;
    if report.weak && !plan.allow_weak_teacher {
        return Err(Error::Config(format!(
            "teacher dev score {:.4} is below the floor {:.4}; set allow_weak_teacher to proceed",
            report.dev.primary(),
            report.floor
        )));
    }
    let data = plan.task.load()?;
    if plan.teacher.model_spec(&data) != *teacher.spec() {
        return Err(Error::Contract(
            "saved teacher does not match the plan's teacher and task".into(),
        ));
    }
    let mut train = data.split(Split::Train);
    if let Some(n) = plan.transfer_size {
        train.truncate(n);
    }
    let (dev, test) = (data.split(Split::Dev), data.split(Split::Test));

    let cells = plan.cells();
    let pending: Vec<Cell> = cells
        .iter()
        .copied()
        .filter(|c| !layout.run_dir(&c.id()).join(DONE_MARKER).exists())
        .collect();
    if !pending.is_empty() {
        let cache = TeacherCache::build(&teacher, &train, 256)?;
        let ctx = SweepContext {
            plan,
            layout: layout.clone(),
            teacher: &teacher,
            teacher_fp: report.fingerprint.clone(),
            cache: &cache,
            train: &train,
            dev: &dev,
            test: &test,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(plan.jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| {
            pending.par_iter().try_for_each(|&cell| -> Result<()> {
                let result = run_cell(&ctx, cell)?;
                on_done(&result);
                Ok(())
            })
        })?;
    }
    if teacher.params().fingerprint() != report.fingerprint {
        return Err(Error::Contract("teacher parameters changed during the sweep".into()));
    }

    let results = cells
        .iter()
        .map(|c| read_result(&layout, *c))
        .collect::<Result<Vec<_>>>()?;
    let mut out = fs::File::create(layout.results())?;
    for r in &results {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    super::report::report_tables(layout.root())?;
    Ok(SweepOutcome {
        results,
        executed: pending.len(),
    })
}

/// Stored result of a cell, or a failed placeholder if it never ran.
pub fn read_result(layout: &Layout, cell: Cell) -> Result<RunResult> {
    let path = layout.run_dir(&cell.id()).join("metrics.json");
    if !path.exists() {
        return Ok(RunResult::failed(cell, "not run".into(), 0.0));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Runs one cell. Training failures become a failed record; only I/O
/// problems writing that record are returned as errors.
fn run_cell(ctx: &SweepContext<'_>, cell: Cell) -> Result<RunResult> {
    let dir = ctx.layout.run_dir(&cell.id());
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let started = Instant::now();
    let result = match execute(ctx, cell, &dir, started) {
        Ok(r) => r,
        Err(e) => RunResult::failed(cell, e.to_string(), started.elapsed().as_secs_f64()),
    };
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&result)?)?;
    if result.is_success() {
        fs::write(dir.join(DONE_MARKER), "")?;
    }
    Ok(result)
}

fn execute(ctx: &SweepContext<'_>, cell: Cell, dir: &Path, started: Instant) -> Result<RunResult> {
    let teacher_spec = ctx.teacher.spec();
    let spec = teacher_spec.with_layers(cell.depth);
    let mut student = build_model(&spec, cell.student_seed())?;
    let copy_map = match cell.init {
        InitScheme::Random => None,
        InitScheme::WeightCopy => {
            let map = evenly_spaced(cell.depth, teacher_spec.num_layers);
            init_student_from_teacher(&mut student, ctx.teacher, &map)?;
            Some(map)
        }
    };
    let config = DistillConfig {
        strategy: cell.strategy,
        init: cell.init,
        seed: cell.seed,
        ..ctx.plan.distill.clone()
    };
    let mapping = select_layers(cell.strategy, cell.depth, teacher_spec.num_layers, Some(cell.seed))?;
    let manifest = RunManifest {
        id: cell.id(),
        cell,
        task: ctx.plan.task.id(),
        student_spec: spec,
        student_seed: cell.student_seed(),
        teacher_fingerprint: ctx.teacher_fp.clone(),
        copy_map,
        mapping: mapping.clone(),
        config: config.clone(),
        transfer_size: ctx.train.len(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let outcome = distill(ctx.teacher, &mut student, &config, ctx.train, ctx.dev, Some(ctx.cache))?;
    if outcome.mapping != mapping {
        return Err(Error::Contract(
            "distillation used a different mapping than the manifest".into(),
        ));
    }
    let mut log = std::io::BufWriter::new(fs::File::create(dir.join("log.ndjson"))?);
    for rec in &outcome.log {
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
    }
    log.flush()?;
    let mut evals = std::io::BufWriter::new(fs::File::create(dir.join("evals.ndjson"))?);
    for rec in &outcome.evals {
        writeln!(evals, "{}", serde_json::to_string(rec)?)?;
    }
    evals.flush()?;

    let checkpoint = dir.join("checkpoint");
    let metadata = BTreeMap::from([
        ("role".to_string(), "student".to_string()),
        ("run".to_string(), cell.id()),
    ]);
    save_checkpoint(&student, &checkpoint, metadata)?;
    let dev = match outcome.dev {
        Some(m) => m,
        None => evaluate(&student, ctx.dev, 256)?,
    };
    let test = evaluate(&student, ctx.test, 256)?;
    let totals = outcome.log.iter().map(|r| r.total);
    let last = outcome.log.last();
    let loss = LossSummary {
        steps: outcome.log.len(),
        first_total: outcome.log.first().map_or(f64::NAN, |r| r.total),
        final_total: last.map_or(f64::NAN, |r| r.total),
        min_total: totals.fold(f64::INFINITY, f64::min),
        final_kl: last.map_or(f64::NAN, |r| r.kl),
        final_hid: last.map_or(f64::NAN, |r| r.hid),
    };
    Ok(RunResult {
        id: cell.id(),
        cell,
        status: RunStatus::Success,
        error: None,
        dev: Some(dev),
        test: Some(test),
        selected_step: Some(outcome.selected_step),
        loss: Some(loss),
        wall_time: started.elapsed().as_secs_f64(),
        checkpoint: Some(checkpoint),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryOptions {
    pub aggregation: Aggregation,
    pub split: Split,
    /// Examples drawn from the start of the split.
    pub sample_size: usize,
    /// Partial reports computed independently, then merged.
    pub shards: usize,
}

impl Default for GeometryOptions {
    fn default() -> Self {
        GeometryOptions {
            aggregation: Aggregation::PerToken,
            split: Split::Dev,
            sample_size: 200,
            shards: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeometryOutcome {
    pub report: AngleReport,
    pub summary: AngleSummary,
    pub summary_line: String,
    pub out_dir: PathBuf,
}

/// Angle report for a sweep run's student against the sweep's teacher,
/// written to `runs/<id>/geometry`.
pub fn analyze_run_geometry(plan: &ExperimentPlan, run_id: &str, options: &GeometryOptions) -> Result<GeometryOutcome> {
    let layout = Layout::new(&plan.output_dir);
    let run = layout.run_dir(run_id);
    if !run.join(DONE_MARKER).exists() {
        return Err(Error::Config(format!("run {run_id} has not completed")));
    }
    analyze_geometry(
        plan,
        &run.join("checkpoint"),
        &layout.teacher_checkpoint(),
        options,
        &run.join("geometry"),
    )
}

/// Angle report for any compatible student/teacher checkpoint pair.
pub fn analyze_geometry(
    plan: &ExperimentPlan,
    student_checkpoint: &Path,
    teacher_checkpoint: &Path,
    options: &GeometryOptions,
    out_dir: &Path,
) -> Result<GeometryOutcome> {
    let (student, _) = load_checkpoint(student_checkpoint)?;
    let (teacher, _) = load_checkpoint(teacher_checkpoint)?;
    let data = plan.task.load()?;
    let mut sample = data.split(options.split);
    sample.truncate(options.sample_size.max(1));
    let report = sharded_angle_report(&student, &teacher, &sample, options.aggregation, options.shards)?
        .with_dataset(format!("{}:{:?}:{}", plan.task.id(), options.split, sample.len()));
    write_geometry(&report, out_dir)?;
    let summary = report.summary();
    let summary_line = summary_line(&summary);
    fs::write(out_dir.join("summary.txt"), format!("{summary_line}\n"))?;
    Ok(GeometryOutcome {
        report,
        summary,
        summary_line,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Splits `sample` into `shards` contiguous parts, builds their reports in
/// parallel and merges them in order.
pub fn sharded_angle_report(
    student: &TransformerModel,
    teacher: &TransformerModel,
    sample: &[Example],
    aggregation: Aggregation,
    shards: usize,
) -> Result<AngleReport> {
    let size = sample.len().div_ceil(shards.max(1)).max(1);
    let options = AngleOptions {
        aggregation,
        batch_size: 64,
        ..AngleOptions::default()
    };
    let parts: Vec<AngleReport> = sample
        .par_chunks(size)
        .map(|chunk| build_angle_report(student, teacher, chunk, &options))
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let mut merged = iter.next().ok_or_else(|| Error::EmptyDataset("angle sample".into()))?;
    for p in iter {
        merged.merge(&p)?;
    }
    merged.metadata.insert("sample_size".into(), sample.len().to_string());
    merged.metadata.insert("shards".into(), shards.max(1).to_string());
    Ok(merged)
}

pub fn summary_line(s: &AngleSummary) -> String {
    format!(
        "mean_cosine={:+.4} positive_fraction={:.4} triples={} observations={} excluded={}",
        s.mean_cosine, s.positive_fraction, s.triples, s.observations, s.excluded
    )
}

fn write_geometry(report: &AngleReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("angles.txt"), report.to_text())?;
    fs::write(out_dir.join("angles.json"), serde_json::to_string(report)?)?;
    for s in 0..report.student_layers() {
        fs::write(
            out_dir.join(format!("hist_student{}.tsv", s + 1)),
            report.histogram_text(s),
        )?;
    }
    Ok(())
}

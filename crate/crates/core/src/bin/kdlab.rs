use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use kdlab::geometry::Aggregation;
use kdlab::harness::{
    analyze_geometry, analyze_run_geometry, report_tables, run_sweep_with, train_teacher, ExperimentPlan,
    GeometryOptions, Layout,
};
use kdlab::tasks::{gen_classification_task, gen_seq2seq_task, write_token_file, Split};

#[derive(Parser)]
#[command(
    name = "kdlab",
    version,
    about = "Knowledge-distillation layer-selection experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and checkpoint the plan's teacher.
    TrainTeacher(PlanArgs),
    /// Run every incomplete cell of the plan, then rebuild the report.
    Sweep {
        #[command(flatten)]
        plan: PlanArgs,
        /// Train the teacher first if the output directory has none.
        #[arg(long)]
        train_teacher: bool,
    },
    /// Rebuild report.txt / report.tsv from a sweep directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Angle diagnostic for a run (or any checkpoint pair).
    Geometry(GeometryArgs),
    /// Write a synthetic dataset as a token file.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Plan file (TOML). Omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any plan field, e.g. `--set distill.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    inits: Option<Vec<String>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    teacher_seed: Option<u64>,
}

impl PlanArgs {
    fn load(&self) -> anyhow::Result<ExperimentPlan> {
        let mut sets = Vec::new();
        let list = |xs: &[String]| {
            format!(
                "[{}]",
                xs.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(",")
            )
        };
        let nums = |xs: Vec<String>| format!("[{}]", xs.join(","));
        if let Some(d) = &self.output_dir {
            sets.push(format!("output_dir={:?}", d.display().to_string()));
        }
        if let Some(j) = self.jobs {
            sets.push(format!("jobs={j}"));
        }
        if let Some(s) = &self.seeds {
            sets.push(format!("seeds={}", nums(s.iter().map(u64::to_string).collect())));
        }
        if let Some(d) = &self.depths {
            sets.push(format!(
                "student_depths={}",
                nums(d.iter().map(usize::to_string).collect())
            ));
        }
        if let Some(s) = &self.strategies {
            let names: Vec<String> = s.iter().map(|x| x.replace('-', "_")).collect();
            sets.push(format!("strategies={}", list(&names)));
        }
        if let Some(i) = &self.inits {
            let names: Vec<String> = i.iter().map(|x| x.replace('-', "_")).collect();
            sets.push(format!("inits={}", list(&names)));
        }
        if let Some(s) = self.steps {
            sets.push(format!("distill.steps={s}"));
        }
        if let Some(l) = self.lambda {
            sets.push(format!("distill.lambda={l:?}"));
        }
        if let Some(l) = self.lr {
            sets.push(format!("distill.learning_rate={l:?}"));
        }
        if let Some(s) = self.teacher_seed {
            sets.push(format!("teacher.seed={s}"));
        }
        sets.extend(self.sets.iter().cloned());
        ExperimentPlan::load(self.config.as_deref(), &sets).context("loading experiment plan")
    }
}

#[derive(Args)]
struct GeometryArgs {
    /// Sweep directory (its plan.toml supplies the task).
    #[arg(long)]
    dir: PathBuf,
    /// Run id inside the sweep.
    #[arg(long, conflicts_with_all = ["student", "teacher"])]
    run: Option<String>,
    /// Student checkpoint directory, with --teacher.
    #[arg(long, requires = "teacher")]
    student: Option<PathBuf>,
    #[arg(long, requires = "student")]
    teacher: Option<PathBuf>,
    /// Output directory for checkpoint-pair mode.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "per-token")]
    aggregation: AggregationArg,
    #[arg(long, value_enum, default_value = "dev")]
    split: SplitArg,
    #[arg(long, default_value_t = 200)]
    sample: usize,
    #[arg(long, default_value_t = 1)]
    shards: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    PerToken,
    MeanPooled,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Seq2seq,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "classification")]
    task: TaskArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 4000)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    seq_len: usize,
    #[arg(long, default_value_t = 6)]
    vocab: usize,
    /// Only write this split.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::TrainTeacher(args) => {
            let plan = args.load()?;
            println!(
                "training teacher (seed {}) into {}",
                plan.teacher.seed,
                plan.output_dir.display()
            );
            let report = train_teacher(&plan)?;
            println!(
                "teacher: dev {:.4} test {:.4} after {} steps (selected {}), fingerprint {}",
                report.dev.primary(),
                report.test.primary(),
                report.steps_run,
                report.selected_step,
                &report.fingerprint[..12]
            );
            if report.weak {
                println!(
                    "WARNING: dev score below the floor {:.4}; sweeps will refuse this teacher",
                    report.floor
                );
            }
        }
        Command::Sweep {
            plan,
            train_teacher: train_first,
        } => {
            let plan = plan.load()?;
            let layout = Layout::new(&plan.output_dir);
            if train_first && !layout.teacher_metrics().exists() {
                let report = train_teacher(&plan)?;
                println!("teacher: dev {:.4} (seed {})", report.dev.primary(), report.seed);
            }
            let total = plan.cells().len();
            println!(
                "sweep: {total} cells, {} jobs, output {}",
                plan.jobs,
                plan.output_dir.display()
            );
            let outcome = run_sweep_with(&plan, |r| match r.score() {
                Some(s) => println!("  {:<32} dev {:.4}  ({:.1}s)", r.id, s, r.wall_time),
                None => println!("  {:<32} FAILED: {}", r.id, r.error.as_deref().unwrap_or("?")),
            })?;
            let failed = outcome.results.iter().filter(|r| !r.is_success()).count();
            println!(
                "ran {} cells ({} already complete), {failed} failed",
                outcome.executed,
                total - outcome.executed
            );
            println!("{}", std::fs::read_to_string(plan.output_dir.join("report.txt"))?);
        }
        Command::Report { dir } => {
            let tables = report_tables(&dir)?;
            print!("{}", tables.text);
        }
        Command::Geometry(args) => {
            let plan = ExperimentPlan::from_toml(&std::fs::read_to_string(Layout::new(&args.dir).plan())?)?;
            let options = GeometryOptions {
                aggregation: match args.aggregation {
                    AggregationArg::PerToken => Aggregation::PerToken,
                    AggregationArg::MeanPooled => Aggregation::MeanPooled,
                },
                split: args.split.into(),
                sample_size: args.sample,
                shards: args.shards,
            };
            let outcome = match (&args.run, &args.student, &args.teacher) {
                (Some(run), _, _) => analyze_run_geometry(&plan, run, &options)?,
                (None, Some(s), Some(t)) => {
                    let out = args.out.clone().unwrap_or_else(|| args.dir.join("geometry"));
                    analyze_geometry(&plan, s, t, &options, &out)?
                }
                _ => bail!("pass --run, or --student with --teacher"),
            };
            println!("{}", outcome.summary_line);
            println!("wrote {}", outcome.out_dir.display());
        }
        Command::GenData(args) => {
            let data = match args.task {
                TaskArg::Classification => gen_classification_task(args.seed, args.size, args.seq_len, args.vocab)?,
                TaskArg::Seq2seq => gen_seq2seq_task(args.seed, args.size, args.seq_len, args.vocab)?,
            };
            write_token_file(&args.out, &data, args.split.map(Split::from))?;
            println!("wrote {} (seed {})", args.out.display(), args.seed);
        }
    }
    Ok(())
}

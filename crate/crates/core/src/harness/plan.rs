use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{DistillConfig, InitScheme, Strategy};
use crate::error::{Error, Result};
use crate::models::{ModelKind, ModelSpec};
use crate::tasks::{
    gen_classification_task, gen_seq2seq_task, load_token_file, Dataset, Split, TaskKind, TokenFileFormat,
};
use crate::training::SupervisedConfig;

/// Where the examples come from: a seeded generator, or a token file whose
/// lines are split by content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seed: u64,
    pub size: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub file: Option<PathBuf>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::Classification,
            seed: 1,
            size: 4000,
            seq_len: 8,
            vocab_size: 6,
            file: None,
        }
    }
}

impl TaskSpec {
    pub fn id(&self) -> String {
        let kind = match self.kind {
            TaskKind::Classification => "classification",
            TaskKind::Seq2seq => "seq2seq",
        };
        match &self.file {
            Some(p) => format!("{kind}:file:{}", p.display()),
            None => format!(
                "{kind}:seed{}:n{}:len{}:v{}",
                self.seed, self.size, self.seq_len, self.vocab_size
            ),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match &self.file {
            None => match self.kind {
                TaskKind::Classification => {
                    gen_classification_task(self.seed, self.size, self.seq_len, self.vocab_size)
                }
                TaskKind::Seq2seq => gen_seq2seq_task(self.seed, self.size, self.seq_len, self.vocab_size),
            },
            Some(path) => {
                let format = TokenFileFormat {
                    kind: self.kind,
                    split: Split::Train,
                    vocab: None,
                };
                let (mut data, _) = load_token_file(path, &format)?;
                for e in &mut data.examples {
                    e.split = Split::for_source(&e.source);
                }
                Ok(data)
            }
        }
    }
}

/// Teacher architecture (vocabulary, length and classes come from the task)
/// plus how to train it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherPlan {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub seed: u64,
    pub training: SupervisedConfig,
    /// Dev primary metric below which the teacher is flagged as weak.
    pub floor: f64,
}

impl Default for TeacherPlan {
    fn default() -> Self {
        TeacherPlan {
            num_layers: 12,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            seed: 1,
            training: SupervisedConfig {
                learning_rate: 2e-3,
                max_steps: 2000,
                eval_every: 250,
                target_metric: Some(0.995),
                ..SupervisedConfig::default()
            },
            floor: 0.95,
        }
    }
}

impl TeacherPlan {
    pub fn model_spec(&self, data: &Dataset) -> ModelSpec {
        let kind = match data.kind {
            TaskKind::Classification => ModelKind::EncoderClassifier,
            TaskKind::Seq2seq => ModelKind::EncoderDecoder,
        };
        ModelSpec {
            kind,
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            vocab_size: data.vocab.len(),
            max_seq_len: data.max_len(),
            num_classes: data.num_classes.max(1),
        }
    }
}

/// A full sweep: one teacher, and students over the cross product of
/// depths, init schemes, strategies and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub task: TaskSpec,
    pub teacher: TeacherPlan,
    pub student_depths: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub inits: Vec<InitScheme>,
    pub seeds: Vec<u64>,
    /// Seeds for random-strategy cells; `seeds` when empty.
    pub random_strategy_seeds: Vec<u64>,
    /// Distillation recipe; strategy, init and seed are set per cell.
    pub distill: DistillConfig,
    /// Use only the first this-many training examples as the transfer set.
    pub transfer_size: Option<usize>,
    pub output_dir: PathBuf,
    /// Cells run concurrently.
    pub jobs: usize,
    /// Run the sweep even if the teacher is below its floor.
    pub allow_weak_teacher: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            task: TaskSpec::default(),
            teacher: TeacherPlan::default(),
            student_depths: vec![3],
            strategies: Strategy::ALL.to_vec(),
            inits: vec![InitScheme::Random, InitScheme::WeightCopy],
            seeds: vec![1, 2, 3],
            random_strategy_seeds: vec![1, 2, 3, 4, 5],
            distill: DistillConfig {
                learning_rate: 0.1,
                steps: 2000,
                ..DistillConfig::default()
            },
            transfer_size: Some(300),
            output_dir: PathBuf::from("runs"),
            jobs: 1,
            allow_weak_teacher: false,
        }
    }
}

/// Recursive table overlay. A table naming a different `kind` (a tagged
/// enum variant) replaces the base table instead of merging into it.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o))
                if o.get("kind").is_none_or(|k| b.get("kind") == Some(k)) =>
            {
                merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// One sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub depth: usize,
    pub init: InitScheme,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Cell {
    /// Stable identifier built only from the factor values.
    pub fn id(&self) -> String {
        format!(
            "d{}_{}_{}_s{}",
            self.depth,
            self.init.name(),
            self.strategy.name(),
            self.seed
        )
    }

    /// Seed for the student's random initialization.
    pub fn student_seed(&self) -> u64 {
        // splitmix64 finalizer: decorrelates nearby run seeds.
        let mut z = self.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::load_str(text, &[])
    }

    /// Reads a plan, applying `key.path=value` overrides (values parsed as
    /// TOML, bare strings allowed) before deserializing.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let plan = Self::load_str(&text, overrides)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Layers the file and then the overrides onto the default plan, so a
    /// partial table keeps the plan defaults for its unset fields.
    fn load_str(text: &str, overrides: &[String]) -> Result<Self> {
        let config = |e: &dyn fmt::Display| Error::Config(e.to_string());
        let mut value = toml::Table::try_from(ExperimentPlan::default()).map_err(|e| config(&e))?;
        let file: toml::Table = toml::from_str(text).map_err(|e| config(&e))?;
        merge(&mut value, file);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| config(&e))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let nonempty = |name: &str, len: usize| {
            if len == 0 {
                Err(Error::Config(format!("plan lists no {name}")))
            } else {
                Ok(())
            }
        };
        nonempty("student depths", self.student_depths.len())?;
        nonempty("strategies", self.strategies.len())?;
        nonempty("init schemes", self.inits.len())?;
        nonempty("seeds", self.seeds.len())?;
        if !self.strategies.contains(&Strategy::None) {
            return Err(Error::Config("strategies must include the none baseline".into()));
        }
        if let Some(&d) = self
            .student_depths
            .iter()
            .find(|&&d| d == 0 || d > self.teacher.num_layers)
        {
            return Err(Error::Config(format!(
                "student depth {d} outside 1..={}",
                self.teacher.num_layers
            )));
        }
        distinct("student depths", &self.student_depths)?;
        distinct("strategies", &self.strategies)?;
        distinct("init schemes", &self.inits)?;
        distinct("seeds", &self.seeds)?;
        distinct("random-strategy seeds", &self.random_strategy_seeds)?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.transfer_size == Some(0) {
            return Err(Error::Config("transfer size must be positive".into()));
        }
        self.distill.validate()
    }

    /// Every cell in a fixed order: depth, init, strategy, seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &depth in &self.student_depths {
            for &init in &self.inits {
                for &strategy in &self.strategies {
                    let r = &self.random_strategy_seeds;
                    let seeds = if strategy == Strategy::Random && !r.is_empty() {
                        r
                    } else {
                        &self.seeds
                    };
                    out.extend(seeds.iter().map(|&seed| Cell {
                        depth,
                        init,
                        strategy,
                        seed,
                    }));
                }
            }
        }
        out
    }
}

fn distinct<T: std::hash::Hash + Eq + fmt::Debug>(name: &str, items: &[T]) -> Result<()> {
    let mut seen = HashSet::new();
    match items.iter().find(|i| !seen.insert(*i)) {
        Some(dup) => Err(Error::Config(format!("{name} lists {dup:?} twice"))),
        None => Ok(()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut table = root;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?} passes through a non-table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;

    #[test]
    fn default_plan_round_trips_through_toml() {
        let plan = ExperimentPlan::default();
        let text = plan.to_toml().unwrap();
        assert_eq!(ExperimentPlan::from_toml(&text).unwrap(), plan);
    }

    #[test]
    fn cross_product_has_unique_ids() {
        let plan = ExperimentPlan {
            inits: vec![InitScheme::Random, InitScheme::WeightCopy],
            seeds: vec![1, 2, 3],
            random_strategy_seeds: Vec::new(),
            ..ExperimentPlan::default()
        };
        let cells = plan.cells();
        assert_eq!(cells.len(), 30);
        let ids: HashSet<String> = cells.iter().map(Cell::id).collect();
        assert_eq!(ids.len(), 30);
    }

    #[test]
    fn random_cells_use_their_own_seeds() {
        let plan = ExperimentPlan {
            inits: vec![InitScheme::Random],
            ..ExperimentPlan::default()
        };
        let random = plan.cells().iter().filter(|c| c.strategy == Strategy::Random).count();
        assert_eq!(random, 5);
        assert_eq!(plan.cells().len(), 4 * 3 + 5);
    }

    #[test]
    fn ids_depend_only_on_factors() {
        let c = Cell {
            depth: 3,
            init: InitScheme::WeightCopy,
            strategy: Strategy::AllToOne,
            seed: 7,
        };
        assert_eq!(c.id(), "d3_weight_copy_all_to_one_s7");
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let plan = ExperimentPlan::load(
            None,
            &[
                "distill.lambda=0.5".into(),
                "seeds=[4,5,6]".into(),
                "output_dir=/tmp/x".into(),
                "teacher.training.max_steps=10".into(),
            ],
        )
        .unwrap();
        assert_eq!(plan.distill.lambda, 0.5);
        assert_eq!(plan.seeds, vec![4, 5, 6]);
        assert_eq!(plan.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(plan.teacher.training.max_steps, 10);
    }

    #[test]
    fn partial_tables_keep_plan_defaults() {
        let defaults = ExperimentPlan::default();
        let plan = ExperimentPlan::load(None, &["distill.lambda=0.3".into()]).unwrap();
        assert_eq!(plan.distill.learning_rate, defaults.distill.learning_rate);
        assert_eq!(plan.distill.steps, defaults.distill.steps);
        let plan = ExperimentPlan::from_toml("[teacher]\nseed = 9\n[distill]\nsteps = 7\n").unwrap();
        assert_eq!(plan.teacher.num_layers, defaults.teacher.num_layers);
        assert_eq!(
            plan.teacher.training.learning_rate,
            defaults.teacher.training.learning_rate
        );
        assert_eq!(plan.distill.learning_rate, defaults.distill.learning_rate);
        assert_eq!((plan.teacher.seed, plan.distill.steps), (9, 7));
        let plan =
            ExperimentPlan::from_toml("[distill.optimizer]\nkind = \"adam\"\nbeta1 = 0.8\nbeta2 = 0.99\neps = 1e-8\n")
                .unwrap();
        assert!(matches!(plan.distill.optimizer, OptimizerKind::Adam { beta1, .. } if beta1 == 0.8));
    }

    #[test]
    fn plans_without_baseline_or_with_bad_depth_are_rejected() {
        let mut plan = ExperimentPlan {
            strategies: vec![Strategy::Forward],
            ..ExperimentPlan::default()
        };
        assert!(plan.validate().is_err());
        plan.strategies = vec![Strategy::None];
        plan.student_depths = vec![13];
        assert!(plan.validate().is_err());
        plan.student_depths = vec![3, 3];
        assert!(plan.validate().is_err());
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plan::ExperimentPlan;
use super::run::{read_result, Layout, RunResult};
use crate::distill::{InitScheme, Strategy};
use crate::error::Result;

/// Aggregate of one (depth, init, strategy) combination over its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub depth: usize,
    pub init: InitScheme,
    pub strategy: Strategy,
    /// Successful runs.
    pub n: usize,
    /// Runs the plan asked for.
    pub expected: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation (0 for a single run).
    pub std: Option<f64>,
    /// `mean` minus the none baseline of the same depth and init.
    pub delta_vs_none: Option<f64>,
    /// Max minus min of the matching strategies' means in this block.
    pub spread: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ReportTables {
    pub rows: Vec<TableRow>,
    pub text: String,
    pub tsv: String,
}

pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

/// Groups raw results by plan combination. Failed or missing runs count
/// toward `expected` only.
pub fn aggregate(plan: &ExperimentPlan, results: &[RunResult]) -> Vec<TableRow> {
    let mut rows = Vec::new();
    for &depth in &plan.student_depths {
        for &init in &plan.inits {
            let block_start = rows.len();
            for &strategy in &plan.strategies {
                let in_cell: Vec<&RunResult> = results
                    .iter()
                    .filter(|r| r.cell.depth == depth && r.cell.init == init && r.cell.strategy == strategy)
                    .collect();
                let scores: Vec<f64> = in_cell.iter().filter_map(|r| r.score()).collect();
                let expected = plan
                    .cells()
                    .iter()
                    .filter(|c| (c.depth, c.init, c.strategy) == (depth, init, strategy))
                    .count();
                let stats = mean_std(&scores);
                rows.push(TableRow {
                    depth,
                    init,
                    strategy,
                    n: scores.len(),
                    expected,
                    mean: stats.map(|s| s.0),
                    std: stats.map(|s| s.1),
                    delta_vs_none: None,
                    spread: None,
                });
            }
            let block = &mut rows[block_start..];
            let none = block.iter().find(|r| r.strategy == Strategy::None).and_then(|r| r.mean);
            let matching: Vec<f64> = block
                .iter()
                .filter(|r| r.strategy != Strategy::None)
                .filter_map(|r| r.mean)
                .collect();
            let spread = (!matching.is_empty()).then(|| {
                let max = matching.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let min = matching.iter().copied().fold(f64::INFINITY, f64::min);
                max - min
            });
            for r in block.iter_mut() {
                r.delta_vs_none = r.mean.zip(none).map(|(m, n)| m - n);
                r.spread = spread;
            }
        }
    }
    rows
}

fn pct(x: Option<f64>, signed: bool) -> String {
    match (x, signed) {
        (Some(v), true) => format!("{:+.2}", 100.0 * v),
        (Some(v), false) => format!("{:.2}", 100.0 * v),
        (None, _) => "-".into(),
    }
}

/// Renders the fixed-width text table and the TSV (raw fractions).
pub fn render(rows: &[TableRow]) -> (String, String) {
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:<6} {:<12} {:<11} {:>16} {:>6} {:>9} {:>7}",
        "depth", "init", "strategy", "dev (%)", "runs", "vs none", "spread"
    );
    let mut tsv = String::from("depth\tinit\tstrategy\tn\texpected\tmean\tstd\tdelta_vs_none\tspread\n");
    let mut last_block = None;
    for r in rows {
        if last_block.is_some_and(|b| b != (r.depth, r.init)) {
            text.push('\n');
        }
        last_block = Some((r.depth, r.init));
        let score = match (r.mean, r.std) {
            (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
            _ => "missing".into(),
        };
        let _ = writeln!(
            text,
            "{:<6} {:<12} {:<11} {:>16} {:>6} {:>9} {:>7}",
            r.depth,
            r.init.name(),
            r.strategy.name(),
            score,
            format!("{}/{}", r.n, r.expected),
            pct(r.delta_vs_none, true),
            pct(r.spread, false),
        );
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            tsv,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.depth,
            r.init.name(),
            r.strategy.name(),
            r.n,
            r.expected,
            opt(r.mean),
            opt(r.std),
            opt(r.delta_vs_none),
            opt(r.spread)
        );
    }
    (text, tsv)
}

/// Rebuilds `report.txt` and `report.tsv` in a sweep directory from the
/// saved plan and per-run records.
pub fn report_tables(dir: &Path) -> Result<ReportTables> {
    let layout = Layout::new(dir);
    let plan = ExperimentPlan::from_toml(&fs::read_to_string(layout.plan())?)?;
    let results = plan
        .cells()
        .into_iter()
        .map(|c| read_result(&layout, c))
        .collect::<Result<Vec<_>>>()?;
    let rows = aggregate(&plan, &results);
    let (text, tsv) = render(&rows);
    fs::write(dir.join("report.txt"), &text)?;
    fs::write(dir.join("report.tsv"), &tsv)?;
    Ok(ReportTables { rows, text, tsv })
}

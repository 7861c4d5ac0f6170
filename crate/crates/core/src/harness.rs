//! Ablation grid and layer-count sweep over the synthetic task.
//!
//! Ablation CSV columns:
//! `mechanism,pair,variant,integration,status,n_seeds,n_failed,mean_accuracy,std_accuracy,mean_f1`
//!
//! * `mechanism`: `bi`, `c_bi` or `tri`.
//! * `pair`: the tri-attention variant the row is matched with.
//! * `variant`: the score function actually run (`dp`, `tdp`, ...).
//! * `integration`: value integration, `none` for bi rows.
//! * `status`: `ok`, `partial` (some seeds failed) or `failed`.
//!
//! Sweep CSV columns:
//! `variant,integration,layers,status,n_seeds,n_failed,mean_accuracy,std_accuracy`.
//! Plot files hold `layers,accuracy`.
//!
//! Standard deviations are population deviations over the successful seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, rule_oracle_accuracy, Dataset, OverlapBaseline, SyntheticSpec};
use crate::error::{invalid, Result};
use crate::model::{evaluate, train, Mode, Scores, TanConfig};
use crate::tri::{TriVariant, ValueIntegration};

pub const THREADS_ENV: &str = "TRIATTN_THREADS";
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub const ABLATION_HEADER: &str =
    "mechanism,pair,variant,integration,status,n_seeds,n_failed,mean_accuracy,std_accuracy,mean_f1";
pub const SWEEP_HEADER: &str =
    "variant,integration,layers,status,n_seeds,n_failed,mean_accuracy,std_accuracy";
pub const PLOT_HEADER: &str = "layers,accuracy";

/// One grid cell: a mechanism run with the score matched to `variant`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub mode: Mode,
    pub variant: TriVariant,
    pub integration: ValueIntegration,
}

impl Cell {
    pub fn new(mode: Mode, variant: TriVariant) -> Self {
        Self {
            mode,
            variant,
            integration: variant.default_integration(),
        }
    }

    fn variant_name(&self) -> &'static str {
        match self.mode {
            Mode::Tri => self.variant.name(),
            Mode::Bi | Mode::CBi => self.variant.bi_counterpart().name(),
        }
    }

    fn integration_name(&self) -> &'static str {
        match self.mode {
            Mode::Tri => self.integration.name(),
            Mode::Bi | Mode::CBi => "none",
        }
    }

    fn configure(&self, base: &TanConfig, seed: u64) -> TanConfig {
        TanConfig {
            mode: self.mode,
            variant: self.variant,
            integration: self.integration,
            seed,
            ..base.clone()
        }
    }
}

/// Variants compared in the standard ablation, one per bi score.
pub const MATCHED_VARIANTS: [TriVariant; 4] = [
    TriVariant::TAdd,
    TriVariant::Tdp,
    TriVariant::Tsdp,
    TriVariant::TriliEcon,
];

/// Model settings for the standard ablation and sweep.
pub fn ablation_config() -> TanConfig {
    TanConfig {
        dim: 12,
        embed_std: Some(1.0),
        learning_rate: 1.0,
        epochs: 10,
        grad_clip: Some(5.0),
        ..TanConfig::default()
    }
}

/// `bi`, `c_bi` and `tri` cells for each variant.
pub fn matched_grid(variants: &[TriVariant]) -> Vec<Cell> {
    variants
        .iter()
        .flat_map(|&v| [Mode::Bi, Mode::CBi, Mode::Tri].map(|m| Cell::new(m, v)))
        .collect()
}

/// Seed-level outcome: scores, or the error message of a failed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunOutcome {
    Done(Scores),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_seeds: usize,
    pub n_failed: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
}

impl Summary {
    fn from_runs(runs: &[RunOutcome]) -> Self {
        let done: Vec<&Scores> = runs
            .iter()
            .filter_map(|r| match r {
                RunOutcome::Done(s) => Some(s),
                RunOutcome::Failed(_) => None,
            })
            .collect();
        let n = done.len() as f64;
        let (mean, std, f1) = if done.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let mean = done.iter().map(|s| s.accuracy).sum::<f64>() / n;
            let var = done.iter().map(|s| (s.accuracy - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt(), done.iter().map(|s| s.f1).sum::<f64>() / n)
        };
        Self {
            n_seeds: runs.len(),
            n_failed: runs.len() - done.len(),
            mean_accuracy: mean,
            std_accuracy: std,
            mean_f1: f1,
        }
    }

    fn status(&self) -> &'static str {
        match self.n_failed {
            0 => "ok",
            n if n == self.n_seeds => "failed",
            _ => "partial",
        }
    }
}

fn fmt_stat(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: Cell,
    pub runs: Vec<RunOutcome>,
    pub summary: Summary,
}

/// Reference classifiers on the test split of each seed's dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub seed: u64,
    pub rule_accuracy: f64,
    pub overlap_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub oracles: Vec<OracleCheck>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ABLATION_HEADER);
        out.push('\n');
        for row in &self.rows {
            let s = &row.summary;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                row.cell.mode.name(),
                row.cell.variant.name(),
                row.cell.variant_name(),
                row.cell.integration_name(),
                s.status(),
                s.n_seeds,
                s.n_failed,
                fmt_stat(s.mean_accuracy),
                fmt_stat(s.std_accuracy),
                fmt_stat(s.mean_f1)
            );
        }
        out
    }

    pub fn row(&self, mode: Mode, variant: TriVariant) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.cell.mode == mode && r.cell.variant == variant)
    }
}

/// Rayon pool capped by `TRIATTN_THREADS` when it is set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| invalid(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))
}

fn datasets(spec: &SyntheticSpec, seeds: &[u64]) -> Result<Vec<Dataset>> {
    seeds
        .iter()
        .map(|&seed| gen_synthetic(&SyntheticSpec { seed, ..spec.clone() }))
        .collect()
}

fn run_one(config: &TanConfig, data: &Dataset) -> RunOutcome {
    match train(config, &data.train).and_then(|o| evaluate(&o.state, config, &data.test)) {
        Ok(s) => RunOutcome::Done(s),
        Err(e) => RunOutcome::Failed(e.to_string()),
    }
}

/// Trains and tests every cell for every seed. Seed `s` generates the data
/// (`spec.seed = s`) and initialises the model (`config.seed = s`), so all
/// cells of one seed see the same examples. Failed runs are recorded and the
/// grid continues.
pub fn run_ablation(
    base: &TanConfig,
    cells: &[Cell],
    spec: &SyntheticSpec,
    seeds: &[u64],
) -> Result<AblationReport> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(invalid("ablation needs at least one cell and one seed"));
    }
    base.validate()?;
    let data = datasets(spec, seeds)?;
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..seeds.len()).map(move |s| (c, s)))
        .collect();
    let pool = thread_pool()?;
    let results: Vec<RunOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, s)| run_one(&cells[c].configure(base, seeds[s]), &data[s]))
            .collect()
    });
    let rows = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let runs = results[c * seeds.len()..(c + 1) * seeds.len()].to_vec();
            AblationRow {
                cell: *cell,
                summary: Summary::from_runs(&runs),
                runs,
            }
        })
        .collect();
    let oracles = seeds
        .iter()
        .zip(&data)
        .map(|(&seed, d)| OracleCheck {
            seed,
            rule_accuracy: rule_oracle_accuracy(&d.test),
            overlap_accuracy: OverlapBaseline::fit(&d.train).accuracy(&d.test),
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
        oracles,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: TriVariant,
    pub integration: ValueIntegration,
    pub layers: usize,
    pub runs: Vec<RunOutcome>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_HEADER);
        out.push('\n');
        for row in &self.rows {
            let s = &row.summary;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                row.variant.name(),
                row.integration.name(),
                row.layers,
                s.status(),
                s.n_seeds,
                s.n_failed,
                fmt_stat(s.mean_accuracy),
                fmt_stat(s.std_accuracy)
            );
        }
        out
    }

    /// Two-column `layers,accuracy` series for one variant.
    pub fn plot_data(&self, variant: TriVariant) -> String {
        let mut out = String::from(PLOT_HEADER);
        out.push('\n');
        for row in self.rows.iter().filter(|r| r.variant == variant) {
            let _ = writeln!(out, "{},{}", row.layers, fmt_stat(row.summary.mean_accuracy));
        }
        out
    }

    pub fn variants(&self) -> Vec<TriVariant> {
        let mut out: Vec<TriVariant> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    /// Writes the CSV to `path` and one plot file per variant next to it,
    /// named `<stem>.<variant>.plot.csv`. Returns the plot paths.
    pub fn write(&self, path: &Path) -> Result<Vec<PathBuf>> {
        std::fs::write(path, self.to_csv())?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sweep".into());
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut written = Vec::new();
        for v in self.variants() {
            let p = dir.join(format!("{stem}.{}.plot.csv", v.name()));
            std::fs::write(&p, self.plot_data(v))?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Tri-attention accuracy for each variant and layer count.
pub fn run_layer_sweep(
    base: &TanConfig,
    variants: &[TriVariant],
    layers: &[usize],
    spec: &SyntheticSpec,
    seeds: &[u64],
) -> Result<SweepReport> {
    if variants.is_empty() || layers.is_empty() || seeds.is_empty() {
        return Err(invalid("sweep needs variants, layer counts and seeds"));
    }
    if let Some(n) = layers.iter().find(|n| !(1..=8).contains(*n)) {
        return Err(invalid(format!("layer count {n} outside 1..=8")));
    }
    base.validate()?;
    let data = datasets(spec, seeds)?;
    let mut keys = Vec::new();
    for &v in variants {
        for &n in layers {
            keys.push((v, n));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..keys.len())
        .flat_map(|k| (0..seeds.len()).map(move |s| (k, s)))
        .collect();
    let pool = thread_pool()?;
    let results: Vec<RunOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(k, s)| {
                let (variant, n) = keys[k];
                let cfg = TanConfig {
                    layers: n,
                    ..Cell::new(Mode::Tri, variant).configure(base, seeds[s])
                };
                run_one(&cfg, &data[s])
            })
            .collect()
    });
    let rows = keys
        .iter()
        .enumerate()
        .map(|(k, &(variant, n))| {
            let runs = results[k * seeds.len()..(k + 1) * seeds.len()].to_vec();
            SweepRow {
                variant,
                integration: variant.default_integration(),
                layers: n,
                summary: Summary::from_runs(&runs),
                runs,
            }
        })
        .collect();
    Ok(SweepReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (TanConfig, SyntheticSpec) {
        (
            TanConfig {
                dim: 3,
                epochs: 1,
                ..TanConfig::default()
            },
            SyntheticSpec {
                n_train: 12,
                n_test: 6,
                ..SyntheticSpec::default()
            },
        )
    }

    #[test]
    fn single_cell_single_seed() {
        let (cfg, spec) = tiny();
        let r = run_ablation(&cfg, &[Cell::new(Mode::Tri, TriVariant::Tdp)], &spec, &[3]).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].summary.std_accuracy, 0.0);
        let csv = r.to_csv();
        assert_eq!(csv.lines().next().unwrap(), ABLATION_HEADER);
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn failed_cells_are_marked() {
        let (mut cfg, spec) = tiny();
        cfg.learning_rate = 1e300;
        cfg.embed_std = Some(1e3);
        let r = run_ablation(&cfg, &[Cell::new(Mode::Tri, TriVariant::Tdp)], &spec, &[1, 2]).unwrap();
        assert_eq!(r.rows[0].summary.n_failed, 2);
        assert!(r.to_csv().lines().nth(1).unwrap().contains(",failed,"));
    }

    #[test]
    fn population_std() {
        let runs = [0.5, 1.0].map(|a| RunOutcome::Done(Scores { accuracy: a, f1: 0.0 }));
        let s = Summary::from_runs(&runs);
        assert!((s.std_accuracy - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sweep_rows_and_plot() {
        let (cfg, spec) = tiny();
        let r = run_layer_sweep(&cfg, &[TriVariant::Tsdp], &[1], &spec, &[1]).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.to_csv().lines().next().unwrap(), SWEEP_HEADER);
        assert_eq!(r.plot_data(TriVariant::Tsdp).lines().count(), 2);
        assert!(run_layer_sweep(&cfg, &[TriVariant::Tsdp], &[9], &spec, &[1]).is_err());
    }
}

//! Multi-seed experiment cells: branch ablation, random vs data-driven
//! edges, and corruption-rate sweeps.
//!
//! A cell is one (seed, configuration) training run on a freshly generated
//! dataset. Cells are independent and run in parallel; each cell is
//! single-threaded, and results are collected in cell order so tables are
//! identical across runs.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{corrupt_labels, generate, Dataset, GenParams};
use crate::error::{Error, Result};
use crate::trainer::{train, EdgeMode, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Ablation,
    NoiseSweep,
    Edges,
    SingleRun,
}

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Generator settings; `data.n` is the training-set size and
    /// `data.seed` is replaced by each cell's seed.
    pub data: GenParams,
    /// Clean held-out samples drawn from the same class prototypes.
    pub n_test: usize,
    /// Training-label corruption for ablation, edges and single runs.
    pub corruption: f64,
    /// Corruption rates for a noise sweep.
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub parallel: bool,
    /// Where table files are written.
    pub output_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            kind: ExperimentKind::SingleRun,
            data: GenParams::default(),
            n_test: 1000,
            corruption: 0.2,
            rates: vec![0.1, 0.2, 0.3],
            seeds: vec![0, 1, 2, 3, 4],
            train: TrainConfig::default(),
            parallel: true,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentSpec {
    /// Five classes, ten AUs, 2000 training samples, 40 epochs and five
    /// seeds, with batch size and step size scaled for a small scratch
    /// backbone.
    pub fn desk_scale(kind: ExperimentKind) -> Self {
        ExperimentSpec {
            kind,
            data: GenParams {
                classes: 5,
                aus: 10,
                dim: 16,
                n: 2000,
                class_spread: 4.0,
                within_noise: 1.5,
                au_noise: 0.05,
                seed: 0,
            },
            train: TrainConfig {
                batch_size: 64,
                lr_target: 0.1,
                lr_aux: 0.1,
                ..TrainConfig::default()
            },
            ..ExperimentSpec::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        if self.n_test == 0 {
            return Err(Error::Config("n_test must be positive".into()));
        }
        for &r in self.rates.iter().chain([&self.corruption]) {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("corruption rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Clean train/test split for `seed`, with the training labels corrupted at `rate`.
    pub fn datasets(&self, seed: u64, rate: f64) -> Result<(Dataset, Dataset)> {
        let params = GenParams {
            n: self.data.n + self.n_test,
            seed,
            ..self.data.clone()
        };
        let (train, test) = generate(&params)?.split_at(self.data.n);
        let train = corrupt_labels(&train, rate, seed ^ 0xC0_22_0B7)?;
        Ok((train, test))
    }
}

/// Summary of one training run against its held-out set and hidden labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub accuracy: f64,
    pub initial_noise_rate: f64,
    pub final_noise_rate: f64,
    /// Labels whose final value differs from the corrupted starting value.
    pub changed: usize,
    /// Of the changed labels, the fraction now equal to the truth.
    pub precision: Option<f64>,
    /// Of the initially wrong labels, the fraction now equal to the truth.
    pub recall: Option<f64>,
}

impl CellResult {
    pub fn from_outcome(seed: u64, initial: &Dataset, outcome: &TrainOutcome) -> Self {
        let mut changed = 0;
        let mut changed_correct = 0;
        let mut noisy = 0;
        let mut fixed = 0;
        for (a, b) in initial.samples.iter().zip(&outcome.dataset.samples) {
            if a.observed_label != a.true_label {
                noisy += 1;
                if b.observed_label == b.true_label {
                    fixed += 1;
                }
            }
            if a.observed_label != b.observed_label {
                changed += 1;
                if b.observed_label == b.true_label {
                    changed_correct += 1;
                }
            }
        }
        CellResult {
            seed,
            accuracy: outcome.report.last().map_or(0.0, |m| m.eval.accuracy),
            initial_noise_rate: initial.noise_rate(),
            final_noise_rate: outcome.dataset.noise_rate(),
            changed,
            precision: (changed > 0).then(|| changed_correct as f64 / changed as f64),
            recall: (noisy > 0).then(|| fixed as f64 / noisy as f64),
        }
    }
}

/// Trains one cell.
pub fn run_cell(spec: &ExperimentSpec, seed: u64, rate: f64, cfg: &TrainConfig) -> Result<CellResult> {
    let (train_ds, test_ds) = spec.datasets(seed, rate)?;
    let cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let outcome = train(train_ds.clone(), Some(test_ds), cfg)?;
    Ok(CellResult::from_outcome(seed, &train_ds, &outcome))
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn median_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| median(&v))
}

/// One configuration evaluated over every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub use_target: bool,
    pub use_aux: bool,
    pub edges: EdgeMode,
    pub rate: f64,
    pub cells: Vec<CellResult>,
}

impl Row {
    pub fn accuracies(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.accuracy).collect()
    }

    pub fn median_accuracy(&self) -> f64 {
        median(&self.accuracies())
    }

    pub fn median_precision(&self) -> Option<f64> {
        median_opt(self.cells.iter().map(|c| c.precision))
    }

    pub fn median_recall(&self) -> Option<f64> {
        median_opt(self.cells.iter().map(|c| c.recall))
    }

    pub fn median_final_noise(&self) -> f64 {
        median(&self.cells.iter().map(|c| c.final_noise_rate).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub kind: ExperimentKind,
    pub rows: Vec<Row>,
}

pub const TABLE_HEADER: &str = "label,target_branch,aux_branch,edges,corruption,median_accuracy,\
median_relabel_precision,median_relabel_recall,median_final_noise,accuracies";

impl Table {
    pub fn row(&self, label: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{TABLE_HEADER}\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
        for r in &self.rows {
            let accs: Vec<String> = r.accuracies().iter().map(|a| format!("{a:?}")).collect();
            let edges = match r.edges {
                EdgeMode::DataDriven => "data_driven",
                EdgeMode::Random => "random",
            };
            let _ = writeln!(
                out,
                "{},{},{},{edges},{:?},{:?},{},{},{:?},{}",
                r.label,
                r.use_target,
                r.use_aux,
                r.rate,
                r.median_accuracy(),
                opt(r.median_precision()),
                opt(r.median_recall()),
                r.median_final_noise(),
                accs.join(" ")
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<14} {:>6} {:>6} {:>12} {:>6} {:>9} {:>9} {:>9}\n",
            "row", "target", "aux", "edges", "rate", "median", "prec", "recall"
        );
        for r in &self.rows {
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
            let _ = writeln!(
                out,
                "{:<14} {:>6} {:>6} {:>12} {:>6.2} {:>9.2} {:>9} {:>9}",
                r.label,
                if r.use_target { "x" } else { "" },
                if r.use_aux { "x" } else { "" },
                format!("{:?}", r.edges),
                r.rate,
                100.0 * r.median_accuracy(),
                pct(r.median_precision()),
                pct(r.median_recall()),
            );
        }
        out
    }
}

struct RowPlan {
    label: String,
    rate: f64,
    cfg: TrainConfig,
}

fn run_rows(spec: &ExperimentSpec, kind: ExperimentKind, plans: Vec<RowPlan>) -> Result<Table> {
    let jobs: Vec<(usize, u64)> = (0..plans.len())
        .flat_map(|p| spec.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let run = |&(p, seed): &(usize, u64)| run_cell(spec, seed, plans[p].rate, &plans[p].cfg);
    let results: Vec<CellResult> = if spec.parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };

    let per_row = spec.seeds.len();
    let mut results = results.into_iter();
    let rows = plans
        .into_iter()
        .map(|plan| Row {
            label: plan.label,
            use_target: plan.cfg.use_target,
            use_aux: plan.cfg.use_aux,
            edges: plan.cfg.edges,
            rate: plan.rate,
            cells: results.by_ref().take(per_row).collect(),
        })
        .collect();
    Ok(Table { kind, rows })
}

fn with_branches(cfg: &TrainConfig, use_target: bool, use_aux: bool) -> TrainConfig {
    TrainConfig {
        use_target,
        use_aux,
        ..cfg.clone()
    }
}

/// The four target/auxiliary on-off combinations.
pub fn run_ablation(spec: &ExperimentSpec) -> Result<Table> {
    spec.validate()?;
    let plans = [
        ("neither", false, false),
        ("target_only", true, false),
        ("aux_only", false, true),
        ("full", true, true),
    ]
    .into_iter()
    .map(|(label, t, a)| RowPlan {
        label: label.into(),
        rate: spec.corruption,
        cfg: with_branches(&spec.train, t, a),
    })
    .collect();
    run_rows(spec, ExperimentKind::Ablation, plans)
}

/// Full method with random versus data-driven adjacency.
pub fn run_edges(spec: &ExperimentSpec) -> Result<Table> {
    spec.validate()?;
    let plans = [("random", EdgeMode::Random), ("data_driven", EdgeMode::DataDriven)]
        .into_iter()
        .map(|(label, edges)| RowPlan {
            label: label.into(),
            rate: spec.corruption,
            cfg: TrainConfig {
                edges,
                ..with_branches(&spec.train, true, true)
            },
        })
        .collect();
    run_rows(spec, ExperimentKind::Edges, plans)
}

/// Baseline (both branches off) and full method at every corruption rate.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<Table> {
    spec.validate()?;
    let mut plans = Vec::new();
    for &rate in &spec.rates {
        for (method, on) in [("baseline", false), ("ulc_ag", true)] {
            plans.push(RowPlan {
                label: format!("{method}@{rate}"),
                rate,
                cfg: with_branches(&spec.train, on, on),
            });
        }
    }
    run_rows(spec, ExperimentKind::NoiseSweep, plans)
}

/// The configuration in `spec.train` as-is.
pub fn run_single(spec: &ExperimentSpec) -> Result<Table> {
    spec.validate()?;
    let plans = vec![RowPlan {
        label: "run".into(),
        rate: spec.corruption,
        cfg: spec.train.clone(),
    }];
    run_rows(spec, ExperimentKind::SingleRun, plans)
}

pub fn run(spec: &ExperimentSpec) -> Result<Table> {
    match spec.kind {
        ExperimentKind::Ablation => run_ablation(spec),
        ExperimentKind::NoiseSweep => run_sweep(spec),
        ExperimentKind::Edges => run_edges(spec),
        ExperimentKind::SingleRun => run_single(spec),
    }
}

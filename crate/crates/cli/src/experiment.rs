//! Seeded runs, the ablation grid, the uniform-ensemble comparison, and the
//! files they leave behind.
//!
//! Output layout under the output directory:
//!
//! ```text
//! config.txt                          effective configuration
//! results.csv                         method,intra_da,inter_da,ast,seed,target_acc
//! results_aggregate.csv               method,intra_da,inter_da,ast,num_seeds,mean,std
//! results.txt                         aligned table, mean ± std in percent
//! runs/<method>/seed_<s>/metrics.csv  per-epoch metrics
//! runs/<method>/seed_<s>/checkpoint.bin
//! ```
//!
//! Standard deviations use the population denominator `n`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crma_core::losses::PseudoLabelWeighting;
use crma_core::trainer::{metrics_csv, parse_metrics_csv};
use crma_core::{generate_task, train, Ablation, EpochMetrics, Error as CoreError};

use crate::config::{Baseline, ConfigError, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run {method} seed {seed} diverged: {source}")]
    Diverged {
        method: String,
        seed: u64,
        #[source]
        source: CoreError,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        io(parent, fs::create_dir_all(parent))?;
    }
    io(path, fs::write(path, contents))
}

/// One row of a results table: a named training variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Method {
    pub name: String,
    pub ablation: Ablation,
    pub weighting: PseudoLabelWeighting,
}

impl Method {
    pub fn new(name: &str, ablation: Ablation, weighting: PseudoLabelWeighting) -> Self {
        Self {
            name: name.to_string(),
            ablation,
            weighting,
        }
    }
}

fn flags(intra_da: bool, inter_da: bool, ast: bool) -> Ablation {
    Ablation {
        intra_da,
        inter_da,
        ast,
    }
}

/// Methods named in `experiment.baselines`.
pub fn baseline_methods(config: &ExperimentConfig) -> Vec<Method> {
    config
        .baselines
        .iter()
        .map(|b| match b {
            Baseline::SourceOnly => {
                Method::new(b.name(), Ablation::SOURCE_ONLY, config.train.weighting)
            }
            Baseline::UniformEnsemble => {
                Method::new(b.name(), config.ablation(), PseudoLabelWeighting::Uniform)
            }
            Baseline::Crma => Method::new(b.name(), config.ablation(), config.train.weighting),
        })
        .collect()
}

/// The 2³ grid in table order: none, each single component, each pair, all.
pub fn ablation_methods(weighting: PseudoLabelWeighting) -> Vec<Method> {
    [
        ("source_only", flags(false, false, false)),
        ("intra_da", flags(true, false, false)),
        ("inter_da", flags(false, true, false)),
        ("ast", flags(false, false, true)),
        ("intra_da+inter_da", flags(true, true, false)),
        ("intra_da+ast", flags(true, false, true)),
        ("inter_da+ast", flags(false, true, true)),
        ("crma", flags(true, true, true)),
    ]
    .into_iter()
    .map(|(name, ab)| Method::new(name, ab, weighting))
    .collect()
}

/// Adaptive self-training against equal per-domain weights, both with the
/// configured alignment phases and self-training switched on.
pub fn uniform_methods(config: &ExperimentConfig) -> Vec<Method> {
    let ablation = Ablation {
        ast: true,
        ..config.ablation()
    };
    vec![
        Method::new("ast", ablation, PseudoLabelWeighting::Adaptive),
        Method::new("uniform_ensemble", ablation, PseudoLabelWeighting::Uniform),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub ablation: Ablation,
    pub seed: u64,
    pub target_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub ablation: Ablation,
    /// One accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
}

impl ResultRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let var = self
            .accuracies
            .iter()
            .map(|a| (a - mean).powi(2))
            .sum::<f64>()
            / self.accuracies.len() as f64;
        var.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub records: Vec<RunRecord>,
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

impl ResultTable {
    /// Groups records by method, keeping first-appearance order.
    pub fn from_records(records: Vec<RunRecord>) -> Self {
        let mut rows: Vec<ResultRow> = Vec::new();
        for r in &records {
            match rows.iter_mut().find(|row| row.method == r.method) {
                Some(row) => row.accuracies.push(r.target_acc),
                None => rows.push(ResultRow {
                    method: r.method.clone(),
                    ablation: r.ablation,
                    accuracies: vec![r.target_acc],
                }),
            }
        }
        Self { rows, records }
    }

    pub fn row(&self, method: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn per_seed_csv(&self) -> String {
        let mut out = String::from("method,intra_da,inter_da,ast,seed,target_acc\n");
        for r in &self.records {
            let a = r.ablation;
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method,
                yes_no(a.intra_da),
                yes_no(a.inter_da),
                yes_no(a.ast),
                r.seed,
                r.target_acc
            )
            .unwrap();
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("method,intra_da,inter_da,ast,num_seeds,mean,std\n");
        for r in &self.rows {
            let a = r.ablation;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method,
                yes_no(a.intra_da),
                yes_no(a.inter_da),
                yes_no(a.ast),
                r.accuracies.len(),
                r.mean(),
                r.std()
            )
            .unwrap();
        }
        out
    }

    /// Aligned text table with accuracies in percent.
    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "" };
        let width = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .max()
            .unwrap_or(0)
            .max("method".len());
        let mut out = format!(
            "{:<width$}  {:^8}  {:^8}  {:^3}  {:>5}  target acc (%)\n",
            "method", "intra_da", "inter_da", "ast", "seeds"
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<width$}  {:^8}  {:^8}  {:^3}  {:>5}  {:6.2} ± {:.2}",
                r.method,
                mark(r.ablation.intra_da),
                mark(r.ablation.inter_da),
                mark(r.ablation.ast),
                r.accuracies.len(),
                100.0 * r.mean(),
                100.0 * r.std()
            )
            .unwrap();
        }
        out
    }
}

pub fn run_dir(out: &Path, method: &str, seed: u64) -> PathBuf {
    out.join("runs").join(method).join(format!("seed_{seed}"))
}

fn write_tables(out: &Path, table: &ResultTable) -> Result<()> {
    write(&out.join("results.csv"), &table.per_seed_csv())?;
    write(&out.join("results_aggregate.csv"), &table.aggregate_csv())?;
    write(&out.join("results.txt"), &table.render())
}

fn final_accuracy(history: &[EpochMetrics]) -> f64 {
    history.last().map_or(f64::NAN, |e| e.target_acc)
}

/// Trains every method on `config.num_seeds` seeds and writes all artifacts.
///
/// Seed `i` uses `base_seed + i` for both data and training. A diverged run
/// stops the sweep; its partial metrics and the tables of completed runs stay
/// on disk.
pub fn execute(config: &ExperimentConfig, methods: &[Method]) -> Result<ResultTable> {
    config.validate()?;
    let out = &config.output_dir;
    io(out, fs::create_dir_all(out))?;
    write(&out.join("config.txt"), &config.to_text())?;

    let mut records = Vec::new();
    for i in 0..config.num_seeds {
        let (spec, base) = config.seeded(i)?;
        let seed = base.seed;
        let task = generate_task(&spec)?;
        for method in methods {
            let train_config = crma_core::TrainConfig {
                ablation: method.ablation,
                weighting: method.weighting,
                ..base.clone()
            };
            let dir = run_dir(out, &method.name, seed);
            log::info!("{} seed {seed}: training", method.name);
            match train(&train_config, &task) {
                Ok(run) => {
                    write(&dir.join("metrics.csv"), &metrics_csv(&run.history))?;
                    let path = dir.join("checkpoint.bin");
                    run.trainer.save(&path)?;
                    let acc = final_accuracy(&run.history);
                    log::info!("{} seed {seed}: target accuracy {acc:.4}", method.name);
                    records.push(RunRecord {
                        method: method.name.clone(),
                        ablation: method.ablation,
                        seed,
                        target_acc: acc,
                    });
                }
                Err(CoreError::Diverged {
                    iteration,
                    phase,
                    loss,
                    history,
                }) => {
                    write(&dir.join("metrics.csv"), &metrics_csv(&history))?;
                    write_tables(out, &sorted(records, methods))?;
                    return Err(ExperimentError::Diverged {
                        method: method.name.clone(),
                        seed,
                        source: CoreError::Diverged {
                            iteration,
                            phase,
                            loss,
                            history,
                        },
                    });
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    let table = sorted(records, methods);
    write_tables(out, &table)?;
    Ok(table)
}

/// Records ordered by method (in `methods` order), then seed.
fn sorted(mut records: Vec<RunRecord>, methods: &[Method]) -> ResultTable {
    let rank = |name: &str| {
        methods
            .iter()
            .position(|m| m.name == name)
            .unwrap_or(usize::MAX)
    };
    records.sort_by(|a, b| {
        rank(&a.method)
            .cmp(&rank(&b.method))
            .then(a.seed.cmp(&b.seed))
    });
    ResultTable::from_records(records)
}

pub fn run(config: &ExperimentConfig) -> Result<ResultTable> {
    execute(config, &baseline_methods(config))
}

pub fn ablation_sweep(config: &ExperimentConfig) -> Result<ResultTable> {
    execute(config, &ablation_methods(config.train.weighting))
}

pub fn uniform_ensemble_baseline(config: &ExperimentConfig) -> Result<ResultTable> {
    execute(config, &uniform_methods(config))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveEntry {
    pub method: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_target_acc: f64,
    /// Relative to the run directory.
    pub file: PathBuf,
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = io(path, fs::read_dir(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Validates every per-run metrics file under `run_dir/runs`, copies it to
/// `run_dir/curves/<method>_seed<s>.csv`, and writes `curves/manifest.csv`.
pub fn emit_curves(run_dir: &Path) -> Result<Vec<CurveEntry>> {
    let runs = run_dir.join("runs");
    let curves = run_dir.join("curves");
    let mut entries = Vec::new();
    for method_dir in sorted_dirs(&runs)? {
        let method = method_dir
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let mut seeds = Vec::new();
        for seed_dir in sorted_dirs(&method_dir)? {
            let name = seed_dir
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let Some(seed) = name
                .strip_prefix("seed_")
                .and_then(|s| s.parse::<u64>().ok())
            else {
                continue;
            };
            seeds.push((seed, seed_dir));
        }
        seeds.sort_by_key(|(s, _)| *s);
        for (seed, seed_dir) in seeds {
            let path = seed_dir.join("metrics.csv");
            let text = io(&path, fs::read_to_string(&path))?;
            let history = parse_metrics_csv(&text)?;
            let file = PathBuf::from(format!("{method}_seed{seed}.csv"));
            write(&curves.join(&file), &text)?;
            entries.push(CurveEntry {
                method: method.clone(),
                seed,
                epochs: history.len(),
                final_target_acc: final_accuracy(&history),
                file,
            });
        }
    }
    let mut manifest = String::from("method,seed,epochs,final_target_acc,file\n");
    for e in &entries {
        writeln!(
            manifest,
            "{},{},{},{},{}",
            e.method,
            e.seed,
            e.epochs,
            e.final_target_acc,
            e.file.display()
        )
        .unwrap();
    }
    write(&curves.join("manifest.csv"), &manifest)?;
    Ok(entries)
}

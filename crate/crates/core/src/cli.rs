//! Command-line front end.
//!
//! Every command resolves a flat key/value config: the `--config` file, then
//! `--set key=value` pairs, then explicit flags. Each run writes its artifacts
//! and a `manifest.json` with the resolved config and its SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use chrono::NaiveTime;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backtest::{run_backtest, BacktestConfig, BacktestError, Block, CvMeasure, Plan, SingleKind};
use crate::config::{ConfigError, KeyValues};
use crate::kernels::{gram_matrix, KernelError, KernelKind, KernelSpec};
use crate::market::synth::{starter_dictionary, synth_generate, SynthSpec, SPEC_KEYS};
use crate::market::{
    abnormal_threshold, event_csv_row, measure_event, read_prices, DropReason, LabelKind, LabeledEvent, LabelingConfig,
    MarketError, EVENTS_CSV_HEADER,
};
use crate::mkl::bench::{run_bench, BenchConfig, BenchMethod, CSV_HEADER};
use crate::mkl::{GapScale, MklError, MklProblem};
use crate::svm::{Labels, SmoSolver, SvmError, TrainingSet};
use crate::text::{bag_of_words, features_csv, read_documents, Dictionary, Document, TextError, TfidfModel};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("io: {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("input: {0}")]
    Input(String),
    #[error("text: {0}")]
    Text(#[from] TextError),
    #[error("market: {0}")]
    Market(#[from] MarketError),
    #[error("kernel: {0}")]
    Kernel(#[from] KernelError),
    #[error("svm: {0}")]
    Svm(#[from] SvmError),
    #[error("mkl: {0}")]
    Mkl(#[from] MklError),
    #[error("backtest: {0}")]
    Backtest(#[from] BacktestError),
}

impl CliError {
    /// Short error class used as the machine-readable prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Input(_) => "input",
            CliError::Text(_) => "text",
            CliError::Market(_) => "market",
            CliError::Kernel(_) => "kernel",
            CliError::Svm(_) => "svm",
            CliError::Mkl(_) => "mkl",
            CliError::Backtest(_) => "backtest",
        }
    }

    /// `error[kind]: message` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {msg}", self.kind())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "newsmkl",
    version,
    about = "Multiple kernel learning for news-driven return prediction"
)]
pub struct Cli {
    /// Log verbosity on stderr (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Cap on worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic documents, prices and ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Dictionary to draw words from (defaults to the bundled one).
        #[arg(long)]
        dictionary: Option<PathBuf>,
        #[arg(long)]
        n_events: Option<usize>,
        #[arg(long)]
        signal: Option<f64>,
    },
    /// Bag-of-words counts and tf-idf features of a document file.
    Featurize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        documents: Option<PathBuf>,
        #[arg(long)]
        dictionary: Option<PathBuf>,
    },
    /// Label events against prices at one horizon.
    Label {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        documents: Option<PathBuf>,
        #[arg(long)]
        prices: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<u32>,
    },
    /// Train one SVM on a feature CSV with a `label` column.
    TrainSvm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// linear, gaussian:SIGMA, polynomial:DEGREE or identity.
        #[arg(long)]
        kernel: Option<String>,
        #[arg(long)]
        c: Option<f64>,
    },
    /// Learn kernel weights on a feature CSV with a `label` column.
    TrainMkl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Semicolon-separated kernel list, e.g. "linear;gaussian:2;polynomial:2".
        #[arg(long)]
        kernels: Option<String>,
        #[arg(long)]
        c: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// accpm or redgrad.
        #[arg(long)]
        solver: Option<String>,
    },
    /// Sliding-window backtest.
    Backtest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        documents: Option<PathBuf>,
        #[arg(long)]
        prices: Option<PathBuf>,
        #[arg(long)]
        dictionary: Option<PathBuf>,
    },
    /// Compare MKL solvers on seeded synthetic kernel sets.
    BenchMkl {
        #[command(flatten)]
        common: Common,
        /// Number of kernels.
        #[arg(long)]
        kernels: Option<usize>,
        /// Kernel dimension (number of samples).
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Artifacts collected in memory and written together with the manifest.
struct Run {
    command: &'static str,
    kv: KeyValues,
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<(String, String)>,
    summary: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config_sha256: String,
    config: BTreeMap<&'a str, &'a str>,
    inputs: &'a BTreeMap<String, String>,
    outputs: BTreeMap<&'a str, String>,
    summary: &'a BTreeMap<String, serde_json::Value>,
}

impl Run {
    fn new(command: &'static str, kv: KeyValues) -> Result<Self, CliError> {
        let out: PathBuf = kv.require::<String>("out")?.into();
        Ok(Run {
            command,
            kv,
            out,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            summary: BTreeMap::new(),
        })
    }

    fn input(&mut self, key: &str) -> Result<(PathBuf, String), CliError> {
        let path: PathBuf = self.kv.require::<String>(key)?.into();
        let text = read_text(&path)?;
        self.inputs.insert(key.to_string(), sha256_hex(text.as_bytes()));
        Ok((path, text))
    }

    fn output(&mut self, name: &str, content: String) {
        self.outputs.push((name.to_string(), content));
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(
            key.to_string(),
            serde_json::to_value(value).expect("summary serializes"),
        );
    }

    /// The config as hashed: every key except the output directory.
    fn hashed_config(&self) -> BTreeMap<&str, &str> {
        self.kv.iter().filter(|(k, _)| *k != "out").collect()
    }

    fn finish(self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(io_err(&self.out))?;
        for (name, content) in &self.outputs {
            let path = self.out.join(name);
            fs::write(&path, content).map_err(io_err(&path))?;
        }
        let config = self.hashed_config();
        let canonical: String = config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.kv.get("seed").ok().flatten(),
            config_sha256: sha256_hex(canonical.as_bytes()),
            config,
            inputs: &self.inputs,
            outputs: self
                .outputs
                .iter()
                .map(|(n, c)| (n.as_str(), sha256_hex(c.as_bytes())))
                .collect(),
            summary: &self.summary,
        };
        let path = self.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(io_err(&path))?;
        log::info!(
            "{}: wrote {} artifacts to {}",
            self.command,
            self.outputs.len() + 1,
            self.out.display()
        );
        Ok(())
    }
}

/// File config, then `--set`, then the given flag values.
fn resolve(common: &Common, flags: &[(&str, Option<String>)], jobs: Option<usize>) -> Result<KeyValues, CliError> {
    let mut kv = match &common.config {
        Some(path) => KeyValues::parse(&read_text(path)?)?,
        None => KeyValues::default(),
    };
    for s in &common.set {
        kv.set_override(s)
            .map_err(|_| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
    }
    let mut all: Vec<(&str, Option<String>)> = vec![
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
        ("seed", common.seed.map(|s| s.to_string())),
        ("jobs", jobs.map(|j| j.to_string())),
    ];
    all.extend(flags.iter().cloned());
    for (k, v) in all {
        if let Some(v) = v {
            kv.set(k, &v);
        }
    }
    Ok(kv)
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn flag<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn parse_time(kv: &KeyValues, key: &str) -> Result<Option<NaiveTime>, CliError> {
    kv.raw(key)
        .map(|v| {
            NaiveTime::parse_from_str(v, "%H:%M").map_err(|_| {
                ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                }
                .into()
            })
        })
        .transpose()
}

fn parse_enum<T>(kv: &KeyValues, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>, CliError> {
    kv.raw(key)
        .map(|v| {
            parse(v).ok_or_else(|| {
                ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                }
                .into()
            })
        })
        .transpose()
}

fn parse_gap_scale(s: &str) -> Option<GapScale> {
    match s {
        "absolute" => Some(GapScale::Absolute),
        "relative" => Some(GapScale::Relative),
        _ => None,
    }
}

const LABEL_KEYS: [&str; 5] = [
    "percentile",
    "label_kind",
    "min_event_time",
    "utc_offset_minutes",
    "horizon",
];

fn labeling_config(kv: &KeyValues) -> Result<LabelingConfig, CliError> {
    let d = LabelingConfig::default();
    let cfg = LabelingConfig {
        horizon_minutes: kv.get_or("horizon", d.horizon_minutes)?,
        percentile: kv.get_or("percentile", d.percentile)?,
        label_kind: parse_enum(kv, "label_kind", LabelKind::parse)?.unwrap_or(d.label_kind),
        min_event_time: parse_time(kv, "min_event_time")?.unwrap_or(d.min_event_time),
        utc_offset_minutes: kv.get_or("utc_offset_minutes", d.utc_offset_minutes)?,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_dictionary(run: &mut Run) -> Result<Dictionary, CliError> {
    if run.kv.raw("dictionary").is_none() {
        return Ok(starter_dictionary());
    }
    let (_, text) = run.input("dictionary")?;
    Ok(Dictionary::parse(&text)?)
}

fn load_documents(run: &mut Run) -> Result<Vec<Document>, CliError> {
    let (_, text) = run.input("documents")?;
    Ok(read_documents(BufReader::new(text.as_bytes()))?)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let jobs = cli.jobs;
    match &cli.command {
        Command::Synth {
            common,
            dictionary,
            n_events,
            signal,
        } => {
            let kv = resolve(
                common,
                &[
                    ("dictionary", path_flag(dictionary)),
                    ("n_events", flag(n_events)),
                    ("signal", flag(signal)),
                ],
                jobs,
            )?;
            let mut known = vec!["out", "seed", "jobs", "dictionary"];
            known.extend(SPEC_KEYS);
            kv.check_known(&known)?;
            let spec = SynthSpec::from_key_values(&kv)?;
            let seed = kv.get_or("seed", 0u64)?;
            let mut run = Run::new("synth", kv)?;
            let dict = load_dictionary(&mut run)?;
            let data = synth_generate(seed, &spec, &dict).map_err(|e| ConfigError::Value {
                key: "spec".into(),
                value: e,
            })?;
            run.note("n_documents", data.documents.len());
            run.note("signal_stems", &data.signal_stems);
            run.output("documents.jsonl", crate::text::write_documents(&data.documents));
            run.output("prices.csv", data.prices_csv.clone());
            run.output("truth.csv", data.truth_csv());
            let dict_text: String = dict.stems().iter().map(|s| format!("{s}\n")).collect();
            run.output("dictionary.txt", dict_text);
            run.finish()
        }
        Command::Featurize {
            common,
            documents,
            dictionary,
        } => {
            let kv = resolve(
                common,
                &[
                    ("documents", path_flag(documents)),
                    ("dictionary", path_flag(dictionary)),
                ],
                jobs,
            )?;
            kv.check_known(&["out", "seed", "jobs", "documents", "dictionary"])?;
            let mut run = Run::new("featurize", kv)?;
            let docs = load_documents(&mut run)?;
            let dict = load_dictionary(&mut run)?;
            let bows: Vec<_> = docs.iter().map(|d| bag_of_words(&d.text, &dict)).collect();
            let counts: Vec<Vec<u32>> = bows.iter().map(|b| b.counts.clone()).collect();
            if counts.is_empty() {
                return Err(CliError::Input("no documents".into()));
            }
            let model = TfidfModel::fit(&counts)?;
            let mut count_rows = Vec::new();
            let mut tfidf_rows = Vec::new();
            for (doc, bow) in docs.iter().zip(&bows) {
                count_rows.push((doc.id.clone(), bow.counts.iter().map(|&c| c as f64).collect()));
                tfidf_rows.push((doc.id.clone(), model.transform(&bow.counts, bow.n_tokens)?));
            }
            run.note("n_documents", docs.len());
            run.note("n_stems", dict.len());
            run.output("counts.csv", features_csv(&dict, &count_rows));
            run.output("tfidf.csv", features_csv(&dict, &tfidf_rows));
            run.finish()
        }
        Command::Label {
            common,
            documents,
            prices,
            horizon,
        } => {
            let kv = resolve(
                common,
                &[
                    ("documents", path_flag(documents)),
                    ("prices", path_flag(prices)),
                    ("horizon", flag(horizon)),
                ],
                jobs,
            )?;
            let mut known = vec!["out", "seed", "jobs", "documents", "prices"];
            known.extend(LABEL_KEYS);
            kv.check_known(&known)?;
            let labeling = labeling_config(&kv)?;
            let mut run = Run::new("label", kv)?;
            let docs = load_documents(&mut run)?;
            let (_, price_text) = run.input("prices")?;
            let series = read_prices(BufReader::new(price_text.as_bytes()))?;
            let mut measured = Vec::new();
            let mut dropped: BTreeMap<&str, usize> = BTreeMap::new();
            for doc in &docs {
                let r = series
                    .get(&doc.ticker)
                    .ok_or(DropReason::UnknownTicker)
                    .and_then(|s| measure_event(s, doc.timestamp, &labeling));
                match r {
                    Ok(e) => measured.push((doc.id.clone(), e)),
                    Err(reason) => *dropped.entry(reason.name()).or_default() += 1,
                }
            }
            let threshold = match labeling.label_kind {
                LabelKind::Abnormal if !measured.is_empty() => {
                    let abs: Vec<f64> = measured.iter().map(|(_, e)| e.abs_future_return()).collect();
                    abnormal_threshold(&abs, labeling.percentile)?
                }
                _ => 0.0,
            };
            let mut csv = format!("{EVENTS_CSV_HEADER}\n");
            for (id, e) in &measured {
                let labeled = LabeledEvent {
                    doc_id: id.clone(),
                    label: e.label(labeling.label_kind, threshold),
                    label_kind: labeling.label_kind,
                    event: e.clone(),
                };
                csv.push_str(&event_csv_row(&labeled));
                csv.push('\n');
            }
            run.note("kept", measured.len());
            run.note("dropped", &dropped);
            run.note("threshold", threshold);
            run.output("events.csv", csv);
            run.finish()
        }
        Command::TrainSvm {
            common,
            data,
            kernel,
            c,
        } => {
            let kv = resolve(
                common,
                &[("data", path_flag(data)), ("kernel", kernel.clone()), ("c", flag(c))],
                jobs,
            )?;
            kv.check_known(&["out", "seed", "jobs", "data", "kernel", "c", "svm_tol", "features"])?;
            let spec = parse_kernel(kv.raw("kernel").unwrap_or("linear"))?;
            let c = kv.get_or("c", crate::svm::DEFAULT_C)?;
            let tol = kv.get_or("svm_tol", crate::svm::DEFAULT_TOLERANCE)?;
            let mut run = Run::new("train-svm", kv)?;
            let (path, text) = run.input("data")?;
            let table = read_table(&path, &text, run.kv.get_list("features")?)?;
            let gram = gram_matrix(&spec, &table.rows)?;
            let labels = Labels::from_signs(&table.labels)?;
            let model = SmoSolver::new(c, tol).solve(TrainingSet::new(&gram, &labels)?, None)?;
            let correct = (0..gram.size())
                .filter(|&i| model.predict(&labels, gram.row(i)).map(|(p, _)| p) == Ok(table.labels[i]))
                .count();
            run.note("train_accuracy", correct as f64 / gram.size() as f64);
            run.note("columns", &table.columns);
            let out =
                serde_json::json!({ "kernel": spec, "scale": gram.scale(), "columns": table.columns, "model": model });
            run.output(
                "model.json",
                serde_json::to_string_pretty(&out).expect("model serializes") + "\n",
            );
            run.finish()
        }
        Command::TrainMkl {
            common,
            data,
            kernels,
            c,
            epsilon,
            solver,
        } => {
            let kv = resolve(
                common,
                &[
                    ("data", path_flag(data)),
                    ("kernels", kernels.clone()),
                    ("c", flag(c)),
                    ("epsilon", flag(epsilon)),
                    ("solver", solver.clone()),
                ],
                jobs,
            )?;
            kv.check_known(&[
                "out",
                "seed",
                "jobs",
                "data",
                "kernels",
                "c",
                "epsilon",
                "solver",
                "gap_scale",
                "max_iters",
                "svm_tol",
                "features",
            ])?;
            let specs = kv
                .raw("kernels")
                .unwrap_or("linear")
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(parse_kernel)
                .collect::<Result<Vec<_>, _>>()?;
            let method = parse_enum(&kv, "solver", BenchMethod::parse)?.unwrap_or(BenchMethod::Accpm);
            let gap_scale = parse_enum(&kv, "gap_scale", parse_gap_scale)?.unwrap_or_default();
            let c = kv.get_or("c", crate::svm::DEFAULT_C)?;
            let eps = kv.get_or("epsilon", crate::mkl::DEFAULT_GAP_TOLERANCE)?;
            let max_iters = kv.get_or("max_iters", crate::mkl::DEFAULT_MAX_ITERS)?;
            let svm_tol = kv.get_or("svm_tol", crate::svm::DEFAULT_TOLERANCE)?;
            let mut run = Run::new("train-mkl", kv)?;
            let (path, text) = run.input("data")?;
            let table = read_table(&path, &text, run.kv.get_list("features")?)?;
            let grams = specs
                .iter()
                .map(|s| gram_matrix(s, &table.rows))
                .collect::<Result<Vec<_>, _>>()?;
            let problem = MklProblem::new(grams, Labels::from_signs(&table.labels)?, c)?
                .with_gap_tol(eps)
                .with_gap_scale(gap_scale)
                .with_max_iters(max_iters)
                .with_svm_tol(svm_tol);
            let sol = method.solve(&problem)?;
            run.note("status", sol.status);
            run.note("iterations", sol.iterations);
            run.note("svm_solves", sol.svm_solves);
            run.output(
                "weights.json",
                serde_json::to_string(&sol.weights).expect("weights serialize") + "\n",
            );
            let out = serde_json::json!({ "kernels": specs, "columns": table.columns, "solution": sol });
            run.output(
                "solution.json",
                serde_json::to_string_pretty(&out).expect("solution serializes") + "\n",
            );
            run.finish()
        }
        Command::Backtest {
            common,
            documents,
            prices,
            dictionary,
        } => {
            let kv = resolve(
                common,
                &[
                    ("documents", path_flag(documents)),
                    ("prices", path_flag(prices)),
                    ("dictionary", path_flag(dictionary)),
                ],
                jobs,
            )?;
            let config = backtest_config(&kv)?;
            let mut run = Run::new("backtest", kv)?;
            let docs = load_documents(&mut run)?;
            let (_, price_text) = run.input("prices")?;
            let series = read_prices(BufReader::new(price_text.as_bytes()))?;
            let dict = load_dictionary(&mut run)?;
            let report = run_backtest(&config, &docs, &series, &dict)?;
            for h in &report.horizons {
                run.note(&format!("accuracy_h{}", h.horizon), h.accuracy);
                run.note(&format!("sharpe_h{}", h.horizon), h.sharpe);
            }
            run.output("windows.csv", report.windows_csv());
            run.output("predictions.csv", report.predictions_csv());
            run.output("report.json", report.to_json());
            run.finish()
        }
        Command::BenchMkl {
            common,
            kernels,
            dim,
            methods,
            runs,
            epsilon,
        } => {
            let kv = resolve(
                common,
                &[
                    ("kernels", flag(kernels)),
                    ("dim", flag(dim)),
                    ("methods", methods.clone()),
                    ("runs", flag(runs)),
                    ("epsilon", flag(epsilon)),
                ],
                jobs,
            )?;
            kv.check_known(&[
                "out",
                "seed",
                "jobs",
                "kernels",
                "dim",
                "methods",
                "runs",
                "epsilon",
                "c",
                "gap_scale",
                "max_iters",
                "svm_tol",
            ])?;
            let methods = match kv.get_list::<String>("methods")? {
                Some(list) => list
                    .iter()
                    .map(|m| {
                        BenchMethod::parse(m).ok_or_else(|| ConfigError::Value {
                            key: "methods".into(),
                            value: m.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                None => vec![BenchMethod::Accpm, BenchMethod::ReducedGradient],
            };
            let config = BenchConfig {
                n_kernels: kv.get_or("kernels", 3)?,
                size: kv.get_or("dim", 500)?,
                runs: kv.get_or("runs", 1)?,
                seed: kv.get_or("seed", 0)?,
                c: kv.get_or("c", crate::svm::DEFAULT_C)?,
                gap_tol: kv.get_or("epsilon", crate::mkl::DEFAULT_GAP_TOLERANCE)?,
                gap_scale: parse_enum(&kv, "gap_scale", parse_gap_scale)?.unwrap_or(GapScale::Relative),
                max_iters: kv.get_or("max_iters", crate::mkl::DEFAULT_MAX_ITERS)?,
                svm_tol: kv.get_or("svm_tol", 1e-6)?,
                methods,
            };
            let mut run = Run::new("bench-mkl", kv)?;
            let rows = run_bench(&config)?;
            let mut csv = format!("{CSV_HEADER}\n");
            for r in &rows {
                csv.push_str(&r.to_csv());
                csv.push('\n');
            }
            run.note("rows", rows.len());
            run.output("bench.csv", csv);
            run.finish()
        }
    }
}

/// `linear`, `gaussian:SIGMA`, `polynomial:DEGREE`, `bow` or `identity`, trace-normalized.
pub fn parse_kernel(s: &str) -> Result<KernelSpec, CliError> {
    let bad = || {
        CliError::Config(ConfigError::Value {
            key: "kernel".into(),
            value: s.into(),
        })
    };
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    let kind = match (name, arg) {
        ("linear", None) => KernelKind::Linear,
        ("bow", None) => KernelKind::BagOfWords,
        ("identity", None) => KernelKind::Identity,
        ("gaussian", Some(a)) => KernelKind::Gaussian {
            sigma: a.parse().map_err(|_| bad())?,
        },
        ("polynomial", Some(a)) => KernelKind::Polynomial {
            degree: a.parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    Ok(KernelSpec::new(kind, true)?)
}

const META_COLUMNS: [&str; 5] = ["id", "timestamp", "horizon", "future_return", "label"];

struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
    labels: Vec<i8>,
}

/// Reads a CSV with a `label` column. Features are the named columns, or every
/// column except id, timestamp, horizon, future_return and label.
fn read_table(path: &Path, text: &str, features: Option<Vec<String>>) -> Result<Table, CliError> {
    let bad = |line: usize, msg: String| CliError::Input(format!("{}:{line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
    let header: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_col = header
        .iter()
        .position(|&h| h == "label")
        .ok_or_else(|| bad(1, "no label column".into()))?;
    let cols: Vec<usize> = match &features {
        Some(names) => names
            .iter()
            .map(|n| {
                header
                    .iter()
                    .position(|h| h == n)
                    .ok_or_else(|| bad(1, format!("no column {n}")))
            })
            .collect::<Result<_, _>>()?,
        None => (0..header.len())
            .filter(|&i| !META_COLUMNS.contains(&header[i]))
            .collect(),
    };
    if cols.is_empty() {
        return Err(bad(1, "no feature columns".into()));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != header.len() {
            return Err(bad(
                i + 1,
                format!("expected {} fields, got {}", header.len(), fields.len()),
            ));
        }
        let row = cols
            .iter()
            .map(|&c| {
                fields[c]
                    .parse::<f64>()
                    .map_err(|_| bad(i + 1, format!("column {}: {:?} is not a number", header[c], fields[c])))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let label = match fields[label_col] {
            "1" | "+1" => 1,
            "-1" => -1,
            other => return Err(bad(i + 1, format!("label {other:?} is not -1 or 1"))),
        };
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(bad(2, "no data rows".into()));
    }
    Ok(Table {
        columns: cols.iter().map(|&c| header[c].to_string()).collect(),
        rows,
        labels,
    })
}

pub const BACKTEST_KEYS: [&str; 28] = [
    "out",
    "seed",
    "jobs",
    "documents",
    "prices",
    "dictionary",
    "horizons",
    "percentile",
    "label_kind",
    "min_event_time",
    "train_min_event_time",
    "utc_offset_minutes",
    "plan",
    "features",
    "kernel",
    "random_kernels",
    "c_grid",
    "sigma_grid",
    "degree_grid",
    "mkl_sigmas",
    "solver",
    "epsilon",
    "gap_scale",
    "max_iters",
    "svm_tol",
    "cv_fraction",
    "cv_measure",
    "shuffle_labels",
];

/// Builds a backtest config from resolved keys.
pub fn backtest_config(kv: &KeyValues) -> Result<BacktestConfig, CliError> {
    kv.check_known(&BACKTEST_KEYS)?;
    let d = BacktestConfig::default();
    let plan = match kv.raw("plan").unwrap_or("single") {
        "single" => Plan::Single {
            block: parse_enum(kv, "features", Block::parse)?.unwrap_or(Block::Text),
            kind: parse_enum(kv, "kernel", SingleKind::parse)?.unwrap_or(SingleKind::Linear),
        },
        "mkl" => Plan::Mkl {
            random_kernels: kv.get_or("random_kernels", 0)?,
        },
        other => {
            return Err(ConfigError::Value {
                key: "plan".into(),
                value: other.into(),
            }
            .into())
        }
    };
    let labeling = labeling_config(kv)?;
    let config = BacktestConfig {
        labeling,
        horizons: kv.get_list("horizons")?.unwrap_or(d.horizons),
        train_min_event_time: parse_time(kv, "train_min_event_time")?,
        plan,
        c_grid: kv.get_list("c_grid")?.unwrap_or(d.c_grid),
        sigma_grid: kv.get_list("sigma_grid")?.unwrap_or(d.sigma_grid),
        degree_grid: kv.get_list("degree_grid")?.unwrap_or(d.degree_grid),
        mkl_sigmas: kv.get_list("mkl_sigmas")?.unwrap_or(d.mkl_sigmas),
        solver: parse_enum(kv, "solver", BenchMethod::parse)?.unwrap_or(d.solver),
        epsilon: kv.get_or("epsilon", d.epsilon)?,
        gap_scale: parse_enum(kv, "gap_scale", parse_gap_scale)?.unwrap_or(d.gap_scale),
        max_iters: kv.get_or("max_iters", d.max_iters)?,
        svm_tol: kv.get_or("svm_tol", d.svm_tol)?,
        cv_fraction: kv.get_or("cv_fraction", d.cv_fraction)?,
        cv_measure: parse_enum(kv, "cv_measure", CvMeasure::parse)?.unwrap_or(d.cv_measure),
        shuffle_labels: kv.get_or("shuffle_labels", d.shuffle_labels)?,
        seed: kv.get_or("seed", d.seed)?,
        jobs: kv.get_or("jobs", d.jobs)?,
    };
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_strings() {
        assert_eq!(parse_kernel("linear").unwrap(), KernelSpec::linear().normalized());
        assert_eq!(
            parse_kernel("polynomial:3").unwrap().kind,
            KernelKind::Polynomial { degree: 3 }
        );
        assert!(parse_kernel("gaussian").is_err());
        assert!(parse_kernel("gaussian:-1").is_err());
        assert!(parse_kernel("rbf:1").is_err());
    }

    #[test]
    fn table_skips_meta_columns() {
        let t = read_table(
            Path::new("x.csv"),
            "id,a,future_return,label\nx,1.5,0.2,1\ny,2,0.1,-1\n",
            None,
        )
        .unwrap();
        assert_eq!(t.columns, vec!["a"]);
        assert_eq!(t.rows, vec![vec![1.5], vec![2.0]]);
        assert_eq!(t.labels, vec![1, -1]);
        assert!(read_table(Path::new("x.csv"), "a,label\n1,0\n", None).is_err());
        assert!(read_table(Path::new("x.csv"), "a,label\n,1\n", None).is_err());
    }

    #[test]
    fn backtest_keys_parse() {
        let kv = KeyValues::parse("plan = mkl\nrandom_kernels = 3\nhorizons = 10,20\nc_grid = 500,1000\n").unwrap();
        let cfg = backtest_config(&kv).unwrap();
        assert_eq!(cfg.plan, Plan::Mkl { random_kernels: 3 });
        assert_eq!(cfg.horizons, vec![10, 20]);
        assert!(backtest_config(&KeyValues::parse("bogus = 1").unwrap()).is_err());
        assert!(backtest_config(&KeyValues::parse("horizons = 15").unwrap()).is_err());
    }
}

//! Sliding-window backtest: monthly windows, chronological cross-validation,
//! out-of-sample predictions and aggregated performance measures.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{DateTime, Datelike, Months, NaiveDate, NaiveTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::kernels::{
    gram_matrix, kernel_row, median_squared_distance, GramMatrix, KernelError, KernelKind, KernelSpec,
};
use crate::market::{measure_event, DropReason, LabelKind, LabelingConfig, MarketError, PriceSeries, N_RETURNS};
use crate::mkl::bench::BenchMethod;
use crate::mkl::{GapScale, MklError, MklProblem};
use crate::svm::{sign_label, Labels, SmoSolver, SvmError, SvmModel};
use crate::text::{bag_of_words, BagOfWords, Dictionary, Document, TextError, TfidfModel};

pub const TRAIN_MONTHS: u32 = 12;
pub const PERIODS_PER_YEAR: f64 = 252.0;
/// Dimension of the feature vector behind each random kernel.
pub const RANDOM_DIM: usize = 5;
/// Largest sample used to estimate a median distance.
const MEDIAN_SAMPLE: usize = 400;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("need at least {needed} months of data, got {got}")]
    SpanTooShort { needed: u32, got: u32 },
    #[error("sharpe ratio needs at least 2 observations, got {0}")]
    TooFewReturns(usize),
    #[error("predictions and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no predictions")]
    Empty,
    #[error("no window produced predictions")]
    NothingToEvaluate,
    #[error("invalid backtest config: {0}")]
    Config(String),
    #[error("test event {id} at {time} is not after the training end {train_end}")]
    Leak {
        id: String,
        time: DateTime<Utc>,
        train_end: DateTime<Utc>,
    },
    #[error("svm: {0}")]
    Svm(#[from] SvmError),
    #[error("mkl: {0}")]
    Mkl(#[from] MklError),
    #[error("kernel: {0}")]
    Kernel(#[from] KernelError),
    #[error("text: {0}")]
    Text(#[from] TextError),
    #[error("market: {0}")]
    Market(#[from] MarketError),
}

/// One calibration/evaluation window: train on `[train_start, test_start)`,
/// test on `[test_start, test_end)`. Dates are first days of months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Window {
    pub id: usize,
    pub train_start: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

fn month_start(d: NaiveDate) -> NaiveDate {
    d.with_day(1).expect("day 1 exists")
}

/// Windows of 12 training months and 1 test month, sliding by one month, over
/// the months `first..=last`.
pub fn build_windows(first: NaiveDate, last: NaiveDate) -> Result<Vec<Window>, BacktestError> {
    let (first, last) = (month_start(first), month_start(last));
    let span = if last < first {
        0
    } else {
        (last.year() - first.year()) * 12 + last.month() as i32 - first.month() as i32 + 1
    } as u32;
    if span < TRAIN_MONTHS + 1 {
        return Err(BacktestError::SpanTooShort {
            needed: TRAIN_MONTHS + 1,
            got: span,
        });
    }
    Ok((0..span - TRAIN_MONTHS)
        .map(|i| {
            let train_start = first + Months::new(i);
            let test_start = train_start + Months::new(TRAIN_MONTHS);
            Window {
                id: i as usize,
                train_start,
                test_start,
                test_end: test_start + Months::new(1),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `(TP + TN) / total`.
    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.tp + self.tn) as f64 / n as f64)
    }

    /// `TP / (TP + FN)`.
    pub fn recall(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

pub fn classification_metrics(predictions: &[i8], labels: &[i8]) -> Result<Confusion, BacktestError> {
    if predictions.len() != labels.len() {
        return Err(BacktestError::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(BacktestError::Empty);
    }
    let mut c = Confusion::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p > 0, l > 0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Daily `(wins - losses) / bets`, one entry per day with at least one bet, by date.
pub fn strategy_returns(predictions: &[i8], labels: &[i8], days: &[NaiveDate]) -> Vec<(NaiveDate, f64)> {
    let mut per_day: BTreeMap<NaiveDate, (i64, i64)> = BTreeMap::new();
    for ((&p, &l), &d) in predictions.iter().zip(labels).zip(days) {
        let e = per_day.entry(d).or_default();
        e.0 += if p == l { 1 } else { -1 };
        e.1 += 1;
    }
    per_day
        .into_iter()
        .map(|(d, (net, bets))| (d, net as f64 / bets as f64))
        .collect()
}

/// `sqrt(periods) * mean / std` with the sample standard deviation; `None` when
/// the standard deviation is 0.
pub fn sharpe(returns: &[f64], periods_per_year: f64) -> Result<Option<f64>, BacktestError> {
    let n = returns.len();
    if n < 2 {
        return Err(BacktestError::TooFewReturns(n));
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    Ok((std > 0.0).then(|| periods_per_year.sqrt() * mean / std))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMeasure {
    Sharpe,
    Accuracy,
}

impl CvMeasure {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sharpe" => Some(CvMeasure::Sharpe),
            "accuracy" => Some(CvMeasure::Accuracy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvChoice {
    pub index: usize,
    pub measure: CvMeasure,
    pub scores: Vec<f64>,
    /// The requested measure was unusable on the fold and accuracy was used.
    pub fell_back: bool,
}

/// Chronological one-fold cross-validation over time-ordered training events.
///
/// `predict(candidate, split)` fits on events `..split` and returns
/// predictions for `split..`. The candidate with the largest score wins; ties
/// go to the earliest. A candidate that fails to fit scores `-inf`.
pub fn chrono_cv<F>(
    labels: &[i8],
    days: &[NaiveDate],
    n_candidates: usize,
    fraction: f64,
    measure: CvMeasure,
    mut predict: F,
) -> Result<CvChoice, BacktestError>
where
    F: FnMut(usize, usize) -> Result<Vec<i8>, BacktestError>,
{
    if n_candidates == 0 {
        return Err(BacktestError::Config("no cross-validation candidates".into()));
    }
    if n_candidates == 1 {
        return Ok(CvChoice {
            index: 0,
            measure,
            scores: Vec::new(),
            fell_back: false,
        });
    }
    let split = ((labels.len() as f64 * fraction).floor() as usize).clamp(1, labels.len().saturating_sub(1).max(1));
    let fold = &labels[split..];
    let fold_days = &days[split..];
    let single_class = fold.iter().all(|&l| l == fold[0]);

    let mut preds = Vec::with_capacity(n_candidates);
    for c in 0..n_candidates {
        match predict(c, split) {
            Ok(p) => preds.push(Some(p)),
            Err(e) => {
                log::debug!("cv candidate {c} failed: {e}");
                preds.push(None);
            }
        }
    }
    let accuracy = |p: &[i8]| {
        classification_metrics(p, fold)
            .ok()
            .and_then(|c| c.accuracy())
            .unwrap_or(f64::NEG_INFINITY)
    };
    let sharpes: Option<Vec<f64>> = match measure {
        CvMeasure::Sharpe if !single_class => preds
            .iter()
            .map(|p| match p {
                Some(p) => {
                    let daily: Vec<f64> = strategy_returns(p, fold, fold_days)
                        .into_iter()
                        .map(|(_, r)| r)
                        .collect();
                    sharpe(&daily, PERIODS_PER_YEAR).ok().flatten()
                }
                None => Some(f64::NEG_INFINITY),
            })
            .collect(),
        _ => None,
    };
    let (scores, used) = match sharpes {
        Some(s) => (s, CvMeasure::Sharpe),
        None => (
            preds
                .iter()
                .map(|p| p.as_deref().map_or(f64::NEG_INFINITY, accuracy))
                .collect(),
            CvMeasure::Accuracy,
        ),
    };
    let index = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s > scores[best] { i } else { best });
    Ok(CvChoice {
        index,
        measure: used,
        fell_back: used != measure,
        scores,
    })
}

/// Feature group a kernel is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Text,
    Returns,
    TimeOfDay,
    DayOfWeek,
    Random(usize),
}

impl Block {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "text" => Some(Block::Text),
            "returns" => Some(Block::Returns),
            "time" | "time_of_day" => Some(Block::TimeOfDay),
            "dow" | "day_of_week" => Some(Block::DayOfWeek),
            _ => None,
        }
    }

    pub fn name(self) -> String {
        match self {
            Block::Text => "text".into(),
            Block::Returns => "returns".into(),
            Block::TimeOfDay => "time".into(),
            Block::DayOfWeek => "dow".into(),
            Block::Random(k) => format!("random{k}"),
        }
    }
}

/// Kernel family of a plan entry; gaussian widths are multiples of the
/// median squared distance of the training features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKernelKind {
    Linear,
    Gaussian { multiple: f64 },
    Polynomial { degree: u32 },
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanKernel {
    pub block: Block,
    pub kind: PlanKernelKind,
}

impl PlanKernel {
    pub fn name(&self) -> String {
        match self.kind {
            PlanKernelKind::Linear => format!("{}_linear", self.block.name()),
            PlanKernelKind::Gaussian { multiple } => format!("{}_gauss{multiple}", self.block.name()),
            PlanKernelKind::Polynomial { degree } => format!("{}_poly{degree}", self.block.name()),
            PlanKernelKind::Identity => "identity".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleKind {
    Linear,
    Gaussian,
    Polynomial,
}

impl SingleKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(SingleKind::Linear),
            "gaussian" => Some(SingleKind::Gaussian),
            "polynomial" => Some(SingleKind::Polynomial),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Plan {
    /// One kernel on one feature block; its parameter is cross-validated.
    Single { block: Block, kind: SingleKind },
    /// Linear and gaussian kernels on text and absolute returns, linear
    /// time-of-day and day-of-week kernels and the identity, plus
    /// `random_kernels` linear kernels on pure noise features.
    Mkl { random_kernels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestConfig {
    pub labeling: LabelingConfig,
    pub horizons: Vec<u32>,
    /// Training events earlier in the day than this are left out of training.
    pub train_min_event_time: Option<NaiveTime>,
    pub plan: Plan,
    pub c_grid: Vec<f64>,
    pub sigma_grid: Vec<f64>,
    pub degree_grid: Vec<u32>,
    /// Gaussian width multiples of the MKL plan, per block.
    pub mkl_sigmas: Vec<f64>,
    pub solver: BenchMethod,
    pub epsilon: f64,
    pub gap_scale: GapScale,
    pub max_iters: usize,
    pub svm_tol: f64,
    pub cv_fraction: f64,
    pub cv_measure: CvMeasure,
    pub shuffle_labels: bool,
    pub seed: u64,
    /// Worker cap; 0 lets the thread pool decide.
    pub jobs: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            labeling: LabelingConfig::default(),
            horizons: vec![10],
            train_min_event_time: None,
            plan: Plan::Single {
                block: Block::Text,
                kind: SingleKind::Linear,
            },
            c_grid: vec![crate::svm::DEFAULT_C],
            sigma_grid: vec![0.5, 1.0, 2.0],
            degree_grid: vec![2, 3],
            mkl_sigmas: vec![0.25, 0.5, 1.0, 2.0],
            solver: BenchMethod::Accpm,
            epsilon: crate::mkl::DEFAULT_GAP_TOLERANCE,
            gap_scale: GapScale::Relative,
            max_iters: crate::mkl::DEFAULT_MAX_ITERS,
            svm_tol: crate::svm::DEFAULT_TOLERANCE,
            cv_fraction: 0.75,
            cv_measure: CvMeasure::Sharpe,
            shuffle_labels: false,
            seed: 0,
            jobs: 0,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<(), BacktestError> {
        let bad = |m: &str| Err(BacktestError::Config(m.into()));
        if self.horizons.is_empty() {
            return bad("no horizons");
        }
        for &h in &self.horizons {
            self.labeling.with_horizon(h).validate()?;
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return bad("C grid must be nonempty and positive");
        }
        if !(self.cv_fraction > 0.0 && self.cv_fraction < 1.0) {
            return bad("cv_fraction must lie in (0, 1)");
        }
        if self
            .sigma_grid
            .iter()
            .chain(&self.mkl_sigmas)
            .any(|&s| !(s > 0.0 && s.is_finite()))
        {
            return bad("sigma multiples must be positive");
        }
        if self.degree_grid.contains(&0) {
            return bad("polynomial degrees must be at least 1");
        }
        match &self.plan {
            Plan::Single {
                kind: SingleKind::Gaussian,
                ..
            } if self.sigma_grid.is_empty() => bad("empty sigma grid"),
            Plan::Single {
                kind: SingleKind::Polynomial,
                ..
            } if self.degree_grid.is_empty() => bad("empty degree grid"),
            _ => Ok(()),
        }
    }

    /// Kernel sets to cross-validate, before crossing with the C grid.
    pub fn kernel_sets(&self) -> Vec<Vec<PlanKernel>> {
        match &self.plan {
            Plan::Single { block, kind } => {
                let kinds: Vec<PlanKernelKind> = match kind {
                    SingleKind::Linear => vec![PlanKernelKind::Linear],
                    SingleKind::Gaussian => self
                        .sigma_grid
                        .iter()
                        .map(|&multiple| PlanKernelKind::Gaussian { multiple })
                        .collect(),
                    SingleKind::Polynomial => self
                        .degree_grid
                        .iter()
                        .map(|&degree| PlanKernelKind::Polynomial { degree })
                        .collect(),
                };
                kinds
                    .into_iter()
                    .map(|kind| vec![PlanKernel { block: *block, kind }])
                    .collect()
            }
            Plan::Mkl { random_kernels } => {
                let mut set = Vec::new();
                for block in [Block::Text, Block::Returns] {
                    set.push(PlanKernel {
                        block,
                        kind: PlanKernelKind::Linear,
                    });
                    for &multiple in &self.mkl_sigmas {
                        set.push(PlanKernel {
                            block,
                            kind: PlanKernelKind::Gaussian { multiple },
                        });
                    }
                }
                for block in [Block::TimeOfDay, Block::DayOfWeek] {
                    set.push(PlanKernel {
                        block,
                        kind: PlanKernelKind::Linear,
                    });
                }
                set.push(PlanKernel {
                    block: Block::Text,
                    kind: PlanKernelKind::Identity,
                });
                for k in 0..*random_kernels {
                    set.push(PlanKernel {
                        block: Block::Random(k),
                        kind: PlanKernelKind::Linear,
                    });
                }
                vec![set]
            }
        }
    }

    fn needs_returns(&self) -> bool {
        match &self.plan {
            Plan::Single { block, .. } => *block == Block::Returns,
            Plan::Mkl { .. } => true,
        }
    }

    fn n_random(&self) -> usize {
        match self.plan {
            Plan::Mkl { random_kernels } => random_kernels,
            _ => 0,
        }
    }
}

/// A measured event with its raw features.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub time: DateTime<Utc>,
    pub day: NaiveDate,
    pub minute_of_day: NaiveTime,
    pub bow: BagOfWords,
    pub returns: Option<[f64; N_RETURNS]>,
    pub time_of_day: [f64; 3],
    pub day_of_week: [f64; 5],
    pub future_return: f64,
    pub random: Vec<f64>,
}

/// Training-window state needed to featurize any event.
struct FittedFeatures {
    tfidf: TfidfModel,
    ret_mean: [f64; N_RETURNS],
    ret_std: [f64; N_RETURNS],
}

impl FittedFeatures {
    fn fit(train: &[&Sample]) -> Result<Self, BacktestError> {
        let corpus: Vec<Vec<u32>> = train.iter().map(|s| s.bow.counts.clone()).collect();
        let tfidf = TfidfModel::fit(&corpus)?;
        let mut ret_mean = [0.0; N_RETURNS];
        let mut ret_std = [1.0; N_RETURNS];
        let rets: Vec<&[f64; N_RETURNS]> = train.iter().filter_map(|s| s.returns.as_ref()).collect();
        if rets.len() > 1 {
            for k in 0..N_RETURNS {
                let mean = rets.iter().map(|r| r[k]).sum::<f64>() / rets.len() as f64;
                let var = rets.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (rets.len() - 1) as f64;
                ret_mean[k] = mean;
                ret_std[k] = if var > 0.0 { var.sqrt() } else { 1.0 };
            }
        }
        Ok(FittedFeatures {
            tfidf,
            ret_mean,
            ret_std,
        })
    }

    fn features(&self, s: &Sample, block: Block) -> Result<Vec<f64>, BacktestError> {
        Ok(match block {
            Block::Text => self.tfidf.transform(&s.bow.counts, s.bow.n_tokens)?,
            Block::Returns => {
                let r = s.returns.unwrap_or([0.0; N_RETURNS]);
                (0..N_RETURNS)
                    .map(|k| (r[k] - self.ret_mean[k]) / self.ret_std[k])
                    .collect()
            }
            Block::TimeOfDay => s.time_of_day.to_vec(),
            Block::DayOfWeek => s.day_of_week.to_vec(),
            Block::Random(k) => s.random[k * RANDOM_DIM..(k + 1) * RANDOM_DIM].to_vec(),
        })
    }
}

fn median_of(features: &[Vec<f64>]) -> f64 {
    let stride = features.len().div_ceil(MEDIAN_SAMPLE).max(1);
    let sample: Vec<Vec<f64>> = features.iter().step_by(stride).cloned().collect();
    median_squared_distance(&sample)
}

/// A fitted classifier over a kernel set.
pub struct FittedModel {
    specs: Vec<KernelSpec>,
    scales: Vec<f64>,
    blocks: Vec<Block>,
    train_features: BTreeMap<usize, Vec<Vec<f64>>>,
    features: FittedFeatures,
    pub weights: Vec<f64>,
    model: SvmModel,
    labels: Labels,
}

fn block_key(b: Block) -> usize {
    match b {
        Block::Text => 0,
        Block::Returns => 1,
        Block::TimeOfDay => 2,
        Block::DayOfWeek => 3,
        Block::Random(k) => 4 + k,
    }
}

/// Fits the kernel set on `train`: a plain SVM for one kernel, MKL otherwise.
pub fn fit_model(
    train: &[&Sample],
    labels: &[i8],
    kernels: &[PlanKernel],
    c: f64,
    config: &BacktestConfig,
    force_mkl: bool,
) -> Result<FittedModel, BacktestError> {
    let features = FittedFeatures::fit(train)?;
    let mut train_features = BTreeMap::new();
    for k in kernels {
        if let std::collections::btree_map::Entry::Vacant(e) = train_features.entry(block_key(k.block)) {
            e.insert(
                train
                    .iter()
                    .map(|s| features.features(s, k.block))
                    .collect::<Result<Vec<_>, _>>()?,
            );
        }
    }
    let mut specs = Vec::with_capacity(kernels.len());
    let mut grams: Vec<GramMatrix> = Vec::with_capacity(kernels.len());
    for k in kernels {
        let x = &train_features[&block_key(k.block)];
        let kind = match k.kind {
            PlanKernelKind::Linear => KernelKind::Linear,
            PlanKernelKind::Gaussian { multiple } => KernelKind::Gaussian {
                sigma: multiple * median_of(x),
            },
            PlanKernelKind::Polynomial { degree } => KernelKind::Polynomial { degree },
            PlanKernelKind::Identity => KernelKind::Identity,
        };
        let spec = KernelSpec::new(kind, true)?;
        grams.push(gram_matrix(&spec, x)?);
        specs.push(spec);
    }
    let y = Labels::from_signs(labels)?;
    let (weights, model) = if kernels.len() == 1 && !force_mkl {
        let ts = crate::svm::TrainingSet::new(&grams[0], &y)?;
        (vec![1.0], SmoSolver::new(c, config.svm_tol).solve(ts, None)?)
    } else {
        let problem = MklProblem::new(grams.clone(), y.clone(), c)?
            .with_gap_tol(config.epsilon)
            .with_gap_scale(config.gap_scale)
            .with_max_iters(config.max_iters)
            .with_svm_tol(config.svm_tol);
        let sol = config.solver.solve(&problem)?;
        log::debug!(
            "mkl: {:?} after {} iterations, {} svm solves, gap {:.3e}",
            sol.status,
            sol.iterations,
            sol.svm_solves,
            sol.relative_gap
        );
        (sol.weights, sol.model)
    };
    Ok(FittedModel {
        scales: grams.iter().map(GramMatrix::scale).collect(),
        blocks: kernels.iter().map(|k| k.block).collect(),
        specs,
        train_features,
        features,
        weights,
        model,
        labels: y,
    })
}

impl FittedModel {
    pub fn decision_value(&self, s: &Sample) -> Result<f64, BacktestError> {
        let n = self.labels.len();
        let mut row = vec![0.0; n];
        let mut cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (i, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let key = block_key(self.blocks[i]);
            if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(key) {
                e.insert(self.features.features(s, self.blocks[i])?);
            }
            let r = kernel_row(&self.specs[i], &self.train_features[&key], &cache[&key], self.scales[i])?;
            row.iter_mut().zip(&r).for_each(|(a, b)| *a += w * b);
        }
        Ok(self.model.decision_value(&self.labels, &row)?)
    }

    pub fn predict(&self, s: &Sample) -> Result<i8, BacktestError> {
        Ok(sign_label(self.decision_value(s)?))
    }
}

/// One out-of-sample prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    pub window: usize,
    pub time: DateTime<Utc>,
    pub day: NaiveDate,
    /// Timestamp of the latest training event of the window.
    pub train_end: DateTime<Utc>,
    pub prediction: i8,
    pub label: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowReport {
    pub window: Window,
    pub horizon: u32,
    pub n_train: usize,
    pub n_test: usize,
    /// Documents published in the test month, kept or not.
    pub test_documents: usize,
    pub test_dropped: usize,
    pub threshold: f64,
    pub confusion: Confusion,
    pub accuracy: Option<f64>,
    pub recall: Option<f64>,
    pub sharpe: Option<f64>,
    pub weights: Vec<f64>,
    pub n_kernels_active: usize,
    pub cv: Option<CvChoice>,
    pub c: f64,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonReport {
    pub horizon: u32,
    pub accuracy: Option<f64>,
    pub recall: Option<f64>,
    pub sharpe: Option<f64>,
    pub n_predictions: usize,
    pub n_days: usize,
    pub confusion: Confusion,
    pub n_documents: usize,
    pub kept: usize,
    pub dropped: BTreeMap<String, usize>,
    pub n_windows: usize,
    pub skipped_windows: Vec<usize>,
    pub kernel_names: Vec<String>,
    /// Mean MKL weights over evaluated windows.
    pub mean_weights: Option<Vec<f64>>,
    pub windows: Vec<WindowReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestReport {
    pub horizons: Vec<HorizonReport>,
}

impl BacktestReport {
    pub fn predictions(&self) -> impl Iterator<Item = (u32, &Prediction)> {
        self.horizons.iter().flat_map(|h| {
            h.windows
                .iter()
                .flat_map(move |w| w.predictions.iter().map(move |p| (h.horizon, p)))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Per-window CSV, one weight column per kernel of the widest plan.
    pub fn windows_csv(&self) -> String {
        let names = self
            .horizons
            .first()
            .map(|h| h.kernel_names.clone())
            .unwrap_or_default();
        let mut out = String::from("window_id,horizon,n_train,n_test,accuracy,recall,sharpe,n_kernels_active");
        for n in &names {
            let _ = write!(out, ",w_{n}");
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for h in &self.horizons {
            for w in &h.windows {
                let _ = write!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    w.window.id,
                    w.horizon,
                    w.n_train,
                    w.n_test,
                    opt(w.accuracy),
                    opt(w.recall),
                    opt(w.sharpe),
                    w.n_kernels_active
                );
                for x in &w.weights {
                    let _ = write!(out, ",{x:.6}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("horizon,window_id,id,timestamp,train_end,prediction,label\n");
        for (h, p) in self.predictions() {
            let _ = writeln!(
                out,
                "{h},{},{},{},{},{},{}",
                p.window,
                p.id,
                crate::market::format_timestamp(p.time),
                crate::market::format_timestamp(p.train_end),
                p.prediction,
                p.label
            );
        }
        out
    }
}

/// Bag-of-words of every document, in document order.
pub fn featurize_documents(docs: &[Document], dict: &Dictionary) -> Vec<BagOfWords> {
    docs.par_iter().map(|d| bag_of_words(&d.text, dict)).collect()
}

struct Measured {
    samples: Vec<Sample>,
    dropped: Vec<(DateTime<Utc>, DropReason)>,
}

fn measure_all(
    docs: &[Document],
    bows: &[BagOfWords],
    prices: &BTreeMap<String, PriceSeries>,
    labeling: &LabelingConfig,
    config: &BacktestConfig,
) -> Measured {
    let mut samples = Vec::new();
    let mut dropped = Vec::new();
    for (doc, bow) in docs.iter().zip(bows) {
        let Some(series) = prices.get(&doc.ticker) else {
            dropped.push((doc.timestamp, DropReason::UnknownTicker));
            continue;
        };
        match measure_event(series, doc.timestamp, labeling) {
            Ok(e) if config.needs_returns() && e.returns.is_none() => {
                dropped.push((doc.timestamp, DropReason::InsufficientHistory));
            }
            Ok(e) => {
                let local = labeling.local(e.time);
                samples.push(Sample {
                    id: doc.id.clone(),
                    time: e.time,
                    day: local.date(),
                    minute_of_day: local.time(),
                    bow: bow.clone(),
                    returns: e.return_features(labeling.label_kind),
                    time_of_day: e.time_of_day,
                    day_of_week: e.day_of_week,
                    future_return: e.future_return,
                    random: Vec::new(),
                });
            }
            Err(reason) => dropped.push((doc.timestamp, reason)),
        }
    }
    samples.sort_by(|a, b| a.time.cmp(&b.time).then_with(|| a.id.cmp(&b.id)));
    let n_random = config.n_random();
    if n_random > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_4a4d);
        for s in &mut samples {
            s.random = (0..n_random * RANDOM_DIM).map(|_| rng.sample(StandardNormal)).collect();
        }
    }
    Measured { samples, dropped }
}

fn labels_for(samples: &[&Sample], kind: LabelKind, threshold: f64) -> Vec<i8> {
    samples
        .iter()
        .map(|s| match kind {
            LabelKind::Abnormal if s.future_return.abs() > threshold => 1,
            LabelKind::Direction if s.future_return > 0.0 => 1,
            _ => -1,
        })
        .collect()
}

fn in_range(t: DateTime<Utc>, labeling: &LabelingConfig, from: NaiveDate, to: NaiveDate) -> bool {
    let d = labeling.local(t).date();
    d >= from && d < to
}

fn run_window(
    window: &Window,
    measured: &Measured,
    labeling: &LabelingConfig,
    config: &BacktestConfig,
) -> Result<Option<WindowReport>, BacktestError> {
    let train: Vec<&Sample> = measured
        .samples
        .iter()
        .filter(|s| in_range(s.time, labeling, window.train_start, window.test_start))
        .filter(|s| config.train_min_event_time.is_none_or(|m| s.minute_of_day >= m))
        .collect();
    let test: Vec<&Sample> = measured
        .samples
        .iter()
        .filter(|s| in_range(s.time, labeling, window.test_start, window.test_end))
        .collect();
    let test_dropped = measured
        .dropped
        .iter()
        .filter(|(t, _)| in_range(*t, labeling, window.test_start, window.test_end))
        .count();
    if train.len() < 2 || test.is_empty() {
        log::info!(
            "window {}: skipped ({} training, {} test events)",
            window.id,
            train.len(),
            test.len()
        );
        return Ok(None);
    }

    let threshold = match labeling.label_kind {
        LabelKind::Abnormal => {
            let abs: Vec<f64> = train.iter().map(|s| s.future_return.abs()).collect();
            crate::market::abnormal_threshold(&abs, labeling.percentile)?
        }
        LabelKind::Direction => 0.0,
    };
    let mut train_labels = labels_for(&train, labeling.label_kind, threshold);
    let test_labels = labels_for(&test, labeling.label_kind, threshold);
    if config.shuffle_labels {
        let seed = config.seed ^ ((labeling.horizon_minutes as u64) << 32) ^ window.id as u64;
        train_labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    if train_labels.iter().all(|&l| l == train_labels[0]) {
        log::info!("window {}: skipped, training labels are one class", window.id);
        return Ok(None);
    }

    let sets = config.kernel_sets();
    let candidates: Vec<(usize, f64)> = (0..sets.len())
        .flat_map(|s| config.c_grid.iter().map(move |&c| (s, c)))
        .collect();
    let train_days: Vec<NaiveDate> = train.iter().map(|s| s.day).collect();
    let cv = chrono_cv(
        &train_labels,
        &train_days,
        candidates.len(),
        config.cv_fraction,
        config.cv_measure,
        |i, split| {
            let (set, c) = candidates[i];
            let fitted = fit_model(&train[..split], &train_labels[..split], &sets[set], c, config, false)?;
            train[split..].iter().map(|s| fitted.predict(s)).collect()
        },
    )?;
    let (set, c) = candidates[cv.index];
    let fitted = fit_model(&train, &train_labels, &sets[set], c, config, false)?;

    let train_end = train.iter().map(|s| s.time).max().expect("nonempty training set");
    let mut predictions = Vec::with_capacity(test.len());
    for (s, &label) in test.iter().zip(&test_labels) {
        if s.time <= train_end {
            return Err(BacktestError::Leak {
                id: s.id.clone(),
                time: s.time,
                train_end,
            });
        }
        predictions.push(Prediction {
            id: s.id.clone(),
            window: window.id,
            time: s.time,
            day: s.day,
            train_end,
            prediction: fitted.predict(s)?,
            label,
        });
    }
    let preds: Vec<i8> = predictions.iter().map(|p| p.prediction).collect();
    let confusion = classification_metrics(&preds, &test_labels)?;
    let days: Vec<NaiveDate> = predictions.iter().map(|p| p.day).collect();
    let daily: Vec<f64> = strategy_returns(&preds, &test_labels, &days)
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let weights = fitted.weights.clone();
    log::debug!(
        "window {} horizon {}: {} train, {} test, accuracy {:?}",
        window.id,
        labeling.horizon_minutes,
        train.len(),
        test.len(),
        confusion.accuracy()
    );
    Ok(Some(WindowReport {
        window: *window,
        horizon: labeling.horizon_minutes,
        n_train: train.len(),
        n_test: test.len(),
        test_documents: test.len() + test_dropped,
        test_dropped,
        threshold,
        accuracy: confusion.accuracy(),
        recall: confusion.recall(),
        sharpe: sharpe(&daily, PERIODS_PER_YEAR).ok().flatten(),
        n_kernels_active: weights.iter().filter(|&&w| w > 0.0).count(),
        weights,
        cv: (candidates.len() > 1).then_some(cv),
        c,
        confusion,
        predictions,
    }))
}

/// Runs the backtest for every configured horizon.
pub fn run_backtest(
    config: &BacktestConfig,
    docs: &[Document],
    prices: &BTreeMap<String, PriceSeries>,
    dict: &Dictionary,
) -> Result<BacktestReport, BacktestError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| BacktestError::Config(e.to_string()))?;
    pool.install(|| {
        let bows = featurize_documents(docs, dict);
        let kernel_names: Vec<String> = match config.kernel_sets().as_slice() {
            [only] => only.iter().map(PlanKernel::name).collect(),
            _ => vec!["kernel".into()],
        };
        let mut horizons = Vec::with_capacity(config.horizons.len());
        for &h in &config.horizons {
            let labeling = config.labeling.with_horizon(h);
            let measured = measure_all(docs, &bows, prices, &labeling, config);
            let mut dropped: BTreeMap<String, usize> = BTreeMap::new();
            for (_, r) in &measured.dropped {
                *dropped.entry(r.name().to_string()).or_default() += 1;
            }
            let (Some(first), Some(last)) = (measured.samples.first(), measured.samples.last()) else {
                return Err(BacktestError::NothingToEvaluate);
            };
            let windows = build_windows(first.day, last.day)?;
            let results: Vec<Result<Option<WindowReport>, BacktestError>> = windows
                .par_iter()
                .map(|w| run_window(w, &measured, &labeling, config))
                .collect();
            let mut reports = Vec::new();
            let mut skipped = Vec::new();
            for (w, r) in windows.iter().zip(results) {
                match r? {
                    Some(rep) => reports.push(rep),
                    None => skipped.push(w.id),
                }
            }
            if reports.is_empty() {
                return Err(BacktestError::NothingToEvaluate);
            }
            let mut confusion = Confusion::default();
            reports.iter().for_each(|r| confusion.add(&r.confusion));
            let all: Vec<&Prediction> = reports.iter().flat_map(|r| &r.predictions).collect();
            let preds: Vec<i8> = all.iter().map(|p| p.prediction).collect();
            let labels: Vec<i8> = all.iter().map(|p| p.label).collect();
            let days: Vec<NaiveDate> = all.iter().map(|p| p.day).collect();
            let daily: Vec<f64> = strategy_returns(&preds, &labels, &days)
                .into_iter()
                .map(|(_, r)| r)
                .collect();
            let n_kernels = reports[0].weights.len();
            let mean_weights = (kernel_names.len() == n_kernels && n_kernels > 1).then(|| {
                (0..n_kernels)
                    .map(|i| reports.iter().map(|r| r.weights[i]).sum::<f64>() / reports.len() as f64)
                    .collect()
            });
            log::info!(
                "horizon {h}: {} windows, {} predictions, accuracy {:?}",
                reports.len(),
                preds.len(),
                confusion.accuracy()
            );
            horizons.push(HorizonReport {
                horizon: h,
                accuracy: confusion.accuracy(),
                recall: confusion.recall(),
                sharpe: sharpe(&daily, PERIODS_PER_YEAR).ok().flatten(),
                n_predictions: preds.len(),
                n_days: daily.len(),
                confusion,
                n_documents: docs.len(),
                kept: measured.samples.len(),
                dropped,
                n_windows: reports.len(),
                skipped_windows: skipped,
                kernel_names: kernel_names.clone(),
                mean_weights,
                windows: reports,
            });
        }
        Ok(BacktestReport { horizons })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ym(y: i32, m: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, 1).unwrap()
    }

    #[test]
    fn windows_slide_by_a_month() {
        let w = build_windows(ym(2000, 1), ym(2001, 2)).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!((w[0].train_start, w[0].test_start), (ym(2000, 1), ym(2001, 1)));
        assert_eq!(
            (w[1].train_start, w[1].test_start, w[1].test_end),
            (ym(2000, 2), ym(2001, 2), ym(2001, 3))
        );
        assert_eq!(build_windows(ym(2000, 1), ym(2001, 1)).unwrap().len(), 1);
        assert_eq!(build_windows(ym(2000, 1), ym(2007, 12)).unwrap().len(), 84);
        assert!(build_windows(ym(2000, 1), ym(2000, 12)).is_err());
    }

    #[test]
    fn confusion_formulas() {
        let c = Confusion {
            tp: 2,
            tn: 3,
            fp: 1,
            fn_: 4,
        };
        assert_eq!(c.accuracy(), Some(0.5));
        assert_eq!(
            Confusion {
                tp: 2,
                fn_: 2,
                ..Default::default()
            }
            .recall(),
            Some(0.5)
        );
        let all = classification_metrics(&[1, 1], &[1, 1]).unwrap();
        assert_eq!((all.accuracy(), all.recall()), (Some(1.0), Some(1.0)));
        assert_eq!(
            Confusion {
                tn: 3,
                ..Default::default()
            }
            .recall(),
            None
        );
        assert!(classification_metrics(&[1], &[1, 1]).is_err());
    }

    #[test]
    fn daily_returns_and_sharpe() {
        let d = ym(2000, 1);
        assert_eq!(strategy_returns(&[1, 1], &[1, 1], &[d, d]), vec![(d, 1.0)]);
        assert_eq!(
            strategy_returns(&[1, 1, 1, 1], &[1, 1, -1, -1], &[d; 4]),
            vec![(d, 0.0)]
        );
        assert_eq!(sharpe(&[1.0, -1.0], 252.0).unwrap(), Some(0.0));
        assert_eq!(sharpe(&[0.5, 0.5, 0.5], 252.0).unwrap(), None);
        assert!(sharpe(&[1.0], 252.0).is_err());
    }

    #[test]
    fn cv_single_candidate_skips_evaluation() {
        let choice = chrono_cv(&[1, -1], &[ym(2000, 1); 2], 1, 0.75, CvMeasure::Sharpe, |_, _| {
            panic!("should not evaluate")
        })
        .unwrap();
        assert_eq!(choice.index, 0);
    }

    #[test]
    fn cv_prefers_dominant_and_first_on_ties() {
        let labels = [1, -1, 1, -1, 1, -1, 1, -1];
        let days: Vec<NaiveDate> = (1..=8).map(|d| NaiveDate::from_ymd_opt(2000, 1, d).unwrap()).collect();
        let choice = chrono_cv(&labels, &days, 3, 0.5, CvMeasure::Accuracy, |c, split| {
            Ok(labels[split..].iter().map(|&l| if c == 1 { l } else { -l }).collect())
        })
        .unwrap();
        assert_eq!(choice.index, 1);
        let tie = chrono_cv(&labels, &days, 2, 0.5, CvMeasure::Accuracy, |_, split| {
            Ok(vec![1; labels.len() - split])
        })
        .unwrap();
        assert_eq!(tie.index, 0);
    }

    #[test]
    fn cv_falls_back_on_single_class_fold() {
        let labels = [1, -1, 1, 1];
        let days = [ym(2000, 1); 4];
        let choice = chrono_cv(&labels, &days, 2, 0.5, CvMeasure::Sharpe, |c, _| {
            Ok(vec![if c == 0 { -1 } else { 1 }; 2])
        })
        .unwrap();
        assert!(choice.fell_back);
        assert_eq!(choice.index, 1);
    }

    #[test]
    fn mkl_plan_has_thirteen_kernels() {
        let config = BacktestConfig {
            plan: Plan::Mkl { random_kernels: 3 },
            ..Default::default()
        };
        let sets = config.kernel_sets();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].len(), 16);
        assert_eq!(
            sets[0].iter().filter(|k| !matches!(k.block, Block::Random(_))).count(),
            13
        );
    }
}

//! Hyperparameter search, model selection and model-quality monitoring.
//!
//! Two optimizers share one [`Budget`]: an exhaustive grid over `k` and a
//! global-best particle swarm. Around them sit the automated model selection with
//! cheap baselines, permutation feature importance, the drift report and the
//! promotion gate that only admits strictly better model versions.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::ops::RangeInclusive;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{Dataset, FeatureVector, FEATURE_NAMES, NUM_FEATURES};
use crate::knn::{self, confusion, ConfusionMatrix, EnsembleModel, KnnError, KnnModel, LoocvNeighbors};
use crate::par;

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("search space dimension {0}: lower bound must be below upper bound")]
    InvalidSpace(usize),
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("empty or invalid k range")]
    InvalidRange,
    #[error("repeats must be at least 1")]
    InvalidRepeats,
    #[error("no k produced a defined precision")]
    NoScore,
    #[error("all candidates failed")]
    AllCandidatesFailed,
    #[error("window contains no data points")]
    EmptyWindow,
    #[error("precision undefined: no positive predictions")]
    UndefinedPrecision,
    #[error("models are incomparable: thresholds {candidate:?} vs {incumbent:?}")]
    IncomparableModels { candidate: Vec<f64>, incumbent: Vec<f64> },
    #[error(transparent)]
    Knn(#[from] KnnError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dim {
    pub lower: f64,
    pub upper: f64,
    pub integer: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    dims: Vec<Dim>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dim>) -> Result<Self, TuningError> {
        if dims.is_empty() {
            return Err(TuningError::InvalidConfig("search space has no dimensions".into()));
        }
        for (i, d) in dims.iter().enumerate() {
            if !(d.lower < d.upper) {
                return Err(TuningError::InvalidSpace(i));
            }
        }
        Ok(SearchSpace { dims })
    }

    /// A box of identical continuous dimensions.
    pub fn cube(n: usize, lower: f64, upper: f64) -> Result<Self, TuningError> {
        Self::new(vec![
            Dim {
                lower,
                upper,
                integer: false
            };
            n
        ])
    }

    pub fn integer(lower: i64, upper: i64) -> Result<Self, TuningError> {
        Self::new(vec![Dim {
            lower: lower as f64,
            upper: upper as f64,
            integer: true,
        }])
    }

    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    /// Clamps into the box and rounds integer dimensions.
    pub fn snap(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.dims)
            .map(|(&v, d)| {
                let v = v.clamp(d.lower, d.upper);
                if d.integer {
                    v.round()
                } else {
                    v
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsoConfig {
    pub particles: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub seed: u64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        PsoConfig {
            particles: 10,
            iterations: 20,
            inertia: 0.7298,
            cognitive: 1.4962,
            social: 1.4962,
            seed: 0,
        }
    }
}

/// Limits on objective evaluations and wall-clock time. Optimizers stop between
/// rounds once either limit would be exceeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Budget {
    pub max_evaluations: Option<usize>,
    pub max_duration: Option<Duration>,
}

impl Budget {
    pub fn unlimited() -> Self {
        Budget::default()
    }

    pub fn evaluations(n: usize) -> Self {
        Budget {
            max_evaluations: Some(n),
            max_duration: None,
        }
    }

    /// Start of the wall-clock allowance; the clock is only read when one is set.
    fn start(&self) -> Option<Instant> {
        self.max_duration.map(|_| Instant::now())
    }

    fn out_of_time(&self, started: Option<Instant>) -> bool {
        match (self.max_duration, started) {
            (Some(d), Some(t)) => t.elapsed() >= d,
            _ => false,
        }
    }

    fn allows(&self, used: usize, next: usize, started: Option<Instant>) -> bool {
        if self.max_evaluations.is_some_and(|m| used + next > m) {
            return false;
        }
        !self.out_of_time(started)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    pub best_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    /// Entry 0 is the initial swarm, then one entry per completed iteration.
    pub trace: Vec<TracePoint>,
    pub evaluations: usize,
    pub budget_exhausted: bool,
}

pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("iteration,best_value\n");
    for t in trace {
        let _ = writeln!(out, "{},{}", t.iteration, t.best_value);
    }
    out
}

/// Global-best particle swarm minimization. Objective evaluations within one
/// iteration run concurrently; all random draws come from one seeded stream in a
/// fixed order, so results do not depend on scheduling.
pub fn pso_minimize<F>(objective: F, space: &SearchSpace, config: &PsoConfig, budget: &Budget) -> Result<PsoResult, TuningError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if config.particles < 2 {
        return Err(TuningError::InvalidConfig("need at least 2 particles".into()));
    }
    if config.iterations < 1 {
        return Err(TuningError::InvalidConfig("need at least 1 iteration".into()));
    }
    let started = budget.start();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dims = space.dims();
    let ranges: Vec<f64> = dims.iter().map(|d| d.upper - d.lower).collect();

    let mut x: Vec<Vec<f64>> = (0..config.particles)
        .map(|_| dims.iter().map(|d| rng.random_range(d.lower..=d.upper)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..config.particles)
        .map(|_| ranges.iter().map(|&r| rng.random_range(-r..=r) * 0.5).collect())
        .collect();

    let evaluate = |xs: &[Vec<f64>]| par::map_slice(xs, |p| objective(&space.snap(p)));

    let mut evaluations = 0;
    if !budget.allows(0, config.particles, started) {
        return Err(TuningError::InvalidConfig("budget too small for the initial swarm".into()));
    }
    let values = evaluate(&x);
    evaluations += config.particles;
    let mut pbest = x.clone();
    let mut pbest_val = values.clone();
    let mut g = 0;
    for i in 1..config.particles {
        if pbest_val[i] < pbest_val[g] {
            g = i;
        }
    }
    let mut gbest = pbest[g].clone();
    let mut gbest_val = pbest_val[g];
    let mut trace = vec![TracePoint {
        iteration: 0,
        best_value: gbest_val,
    }];
    let mut budget_exhausted = false;

    for iteration in 1..=config.iterations {
        if !budget.allows(evaluations, config.particles, started) {
            budget_exhausted = true;
            break;
        }
        for p in 0..config.particles {
            for j in 0..dims.len() {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let vel = config.inertia * v[p][j]
                    + config.cognitive * r1 * (pbest[p][j] - x[p][j])
                    + config.social * r2 * (gbest[j] - x[p][j]);
                v[p][j] = vel.clamp(-ranges[j], ranges[j]);
                x[p][j] = (x[p][j] + v[p][j]).clamp(dims[j].lower, dims[j].upper);
            }
        }
        let values = evaluate(&x);
        evaluations += config.particles;
        for p in 0..config.particles {
            if values[p] < pbest_val[p] {
                pbest_val[p] = values[p];
                pbest[p] = x[p].clone();
            }
            if values[p] < gbest_val {
                gbest_val = values[p];
                gbest = x[p].clone();
            }
        }
        trace.push(TracePoint {
            iteration,
            best_value: gbest_val,
        });
    }

    Ok(PsoResult {
        best_point: space.snap(&gbest),
        best_value: gbest_val,
        trace,
        evaluations,
        budget_exhausted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Validator {
    Loocv,
    Holdout { test_fraction: f64, repeats: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub k: usize,
    pub precision: Option<f64>,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best_k: usize,
    pub best_precision: f64,
    pub table: Vec<GridRow>,
    pub budget_exhausted: bool,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,precision,tp,fp,tn,fn\n");
        for r in &self.table {
            let p = r.precision.map_or(String::new(), |p| p.to_string());
            let c = r.confusion;
            let _ = writeln!(out, "{},{},{},{},{},{}", r.k, p, c.tp, c.fp, c.tn, c.fn_);
        }
        out
    }
}

/// Index of the best row: highest defined precision, earliest row on ties.
fn argmax_precision(table: &[GridRow]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in table.iter().enumerate() {
        if let Some(p) = r.precision {
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((i, p));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Evaluates every `k` in the range and keeps the one with the highest precision,
/// preferring the smaller `k` on ties.
pub fn grid_search_k(
    dataset: &Dataset,
    threshold: f64,
    k_range: RangeInclusive<usize>,
    validator: Validator,
    budget: &Budget,
) -> Result<GridResult, TuningError> {
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo == 0 || lo > hi {
        return Err(TuningError::InvalidRange);
    }
    let started = budget.start();
    let mut ks: Vec<usize> = k_range.collect();
    let mut budget_exhausted = false;
    if let Some(max) = budget.max_evaluations {
        if ks.len() > max {
            ks.truncate(max.max(1));
            budget_exhausted = true;
        }
    }
    let table: Vec<GridRow> = match validator {
        Validator::Loocv => {
            let max_k = *ks.last().expect("non-empty");
            let neighbors = LoocvNeighbors::build(dataset, max_k)?;
            let labels = dataset.labels_at(threshold);
            let mut rows = Vec::with_capacity(ks.len());
            for &k in &ks {
                if budget.out_of_time(started) && !rows.is_empty() {
                    budget_exhausted = true;
                    break;
                }
                let r = neighbors.evaluate(&labels, k)?;
                rows.push(GridRow {
                    k,
                    precision: r.precision(),
                    confusion: r.confusion,
                });
            }
            rows
        }
        Validator::Holdout {
            test_fraction,
            repeats,
            seed,
        } => {
            let rows = par::map_slice(&ks, |&k| {
                match knn::holdout_validate(dataset, k, threshold, test_fraction, repeats, seed) {
                    Ok(r) => Ok(GridRow {
                        k,
                        precision: Some(r.precision_mean),
                        confusion: r.confusion,
                    }),
                    Err(KnnError::NoPositivePredictions) => Ok(GridRow {
                        k,
                        precision: None,
                        confusion: ConfusionMatrix::default(),
                    }),
                    Err(e) => Err(e),
                }
            });
            rows.into_iter().collect::<Result<Vec<_>, _>>()?
        }
    };
    let best = argmax_precision(&table).ok_or(TuningError::NoScore)?;
    Ok(GridResult {
        best_k: table[best].k,
        best_precision: table[best].precision.expect("argmax has a precision"),
        table,
        budget_exhausted,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoTuneResult {
    pub k: usize,
    pub precision: f64,
    pub pso: PsoResult,
}

/// Particle swarm search for `k` maximizing leave-one-out precision. One shared
/// neighbor table serves every evaluation.
pub fn pso_tune_k(
    dataset: &Dataset,
    threshold: f64,
    k_range: RangeInclusive<usize>,
    config: &PsoConfig,
    budget: &Budget,
) -> Result<PsoTuneResult, TuningError> {
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo == 0 || lo > hi {
        return Err(TuningError::InvalidRange);
    }
    let neighbors = LoocvNeighbors::build(dataset, hi)?;
    let labels = dataset.labels_at(threshold);
    let precision_at = |k: usize| {
        neighbors
            .evaluate(&labels, k)
            .ok()
            .and_then(|r| r.precision())
    };
    if lo == hi {
        let precision = precision_at(lo).ok_or(TuningError::NoScore)?;
        return Ok(PsoTuneResult {
            k: lo,
            precision,
            pso: PsoResult {
                best_point: vec![lo as f64],
                best_value: -precision,
                trace: vec![TracePoint {
                    iteration: 0,
                    best_value: -precision,
                }],
                evaluations: 1,
                budget_exhausted: false,
            },
        });
    }
    let space = SearchSpace::integer(lo as i64, hi as i64)?;
    let pso = pso_minimize(
        |x| -precision_at(x[0] as usize).unwrap_or(0.0),
        &space,
        config,
        budget,
    )?;
    let k = pso.best_point[0] as usize;
    let precision = precision_at(k).ok_or(TuningError::NoScore)?;
    Ok(PsoTuneResult { k, precision, pso })
}

/// A fitted binary classifier for one threshold.
pub trait Classifier: Send + Sync {
    fn predict(&self, features: &FeatureVector) -> bool;
    /// Short description of the fitted parameters.
    fn describe(&self) -> String;
}

/// Something that can be tuned and fitted on a training split.
pub trait Learner: Sync {
    fn name(&self) -> &str;
    fn fit(&self, train: &Dataset, threshold: f64) -> Result<Box<dyn Classifier>, TuningError>;
}

impl Classifier for KnnModel {
    fn predict(&self, features: &FeatureVector) -> bool {
        KnnModel::predict(self, features).positive
    }

    fn describe(&self) -> String {
        format!("k={}", self.k())
    }
}

/// k-NN with `k` chosen by leave-one-out grid search on the training split.
#[derive(Debug, Clone)]
pub struct KnnLearner {
    pub name: String,
    pub k_range: RangeInclusive<usize>,
    pub budget: Budget,
}

impl KnnLearner {
    pub fn new(k_range: RangeInclusive<usize>) -> Self {
        KnnLearner {
            name: "knn".to_string(),
            k_range,
            budget: Budget::unlimited(),
        }
    }
}

impl Learner for KnnLearner {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit(&self, train: &Dataset, threshold: f64) -> Result<Box<dyn Classifier>, TuningError> {
        let k = if self.k_range.start() == self.k_range.end() {
            *self.k_range.start()
        } else {
            grid_search_k(train, threshold, self.k_range.clone(), Validator::Loocv, &self.budget)?.best_k
        };
        Ok(Box::new(knn::train(train, k, threshold)?))
    }
}

/// Predicts the training split's majority class for every input.
#[derive(Debug, Clone, Default)]
pub struct MajorityClass;

struct Constant(bool);

impl Classifier for Constant {
    fn predict(&self, _: &FeatureVector) -> bool {
        self.0
    }

    fn describe(&self) -> String {
        format!("always {}", if self.0 { "positive" } else { "negative" })
    }
}

impl Learner for MajorityClass {
    fn name(&self) -> &str {
        "majority"
    }

    fn fit(&self, train: &Dataset, threshold: f64) -> Result<Box<dyn Classifier>, TuningError> {
        let labels = train.labels_at(threshold);
        let positives = labels.iter().filter(|&&l| l).count();
        Ok(Box::new(Constant(2 * positives > labels.len())))
    }
}

/// One feature, one cut point, one direction; chosen for training accuracy.
#[derive(Debug, Clone, Default)]
pub struct DecisionStump;

struct Stump {
    feature: usize,
    cut: f64,
    above: bool,
}

impl Classifier for Stump {
    fn predict(&self, features: &FeatureVector) -> bool {
        (features.to_array()[self.feature] > self.cut) == self.above
    }

    fn describe(&self) -> String {
        let op = if self.above { ">" } else { "<=" };
        format!("{} {op} {}", FEATURE_NAMES[self.feature], self.cut)
    }
}

impl Learner for DecisionStump {
    fn name(&self) -> &str {
        "stump"
    }

    fn fit(&self, train: &Dataset, threshold: f64) -> Result<Box<dyn Classifier>, TuningError> {
        let labels = train.labels_at(threshold);
        let rows = train.feature_rows();
        if rows.is_empty() {
            return Err(KnnError::TooFewPoints { needed: 1, available: 0 }.into());
        }
        let total_pos = labels.iter().filter(|&&l| l).count();
        let n = labels.len();
        let mut best = (0usize, Stump { feature: 0, cut: f64::INFINITY, above: true });
        for f in 0..NUM_FEATURES {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| rows[a][f].total_cmp(&rows[b][f]));
            // sweep cuts between distinct values; pos_below counts positives at or below the cut
            let mut pos_below = 0;
            for (i, &idx) in order.iter().enumerate() {
                if labels[idx] {
                    pos_below += 1;
                }
                let below = i + 1;
                if i + 1 < n && rows[order[i + 1]][f] == rows[idx][f] {
                    continue;
                }
                let cut = if i + 1 < n {
                    (rows[idx][f] + rows[order[i + 1]][f]) / 2.0
                } else {
                    rows[idx][f]
                };
                // above: positives above + negatives below
                let correct_above = (total_pos - pos_below) + (below - pos_below);
                let correct_below = n - correct_above;
                for (correct, above) in [(correct_above, true), (correct_below, false)] {
                    if correct > best.0 {
                        best = (correct, Stump { feature: f, cut, above });
                    }
                }
            }
        }
        Ok(Box::new(best.1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderboardEntry {
    pub name: String,
    /// Mean precision over the repeats where it was defined.
    pub precision: Option<f64>,
    pub defined_repeats: usize,
    pub repeats: usize,
    pub detail: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaderboard {
    pub entries: Vec<LeaderboardEntry>,
}

impl Leaderboard {
    pub fn winner(&self) -> &LeaderboardEntry {
        &self.entries[0]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,name,precision,defined_repeats,repeats,detail,error\n");
        for (i, e) in self.entries.iter().enumerate() {
            let p = e.precision.map_or(String::new(), |p| p.to_string());
            let err = e.error.as_deref().unwrap_or("");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                i + 1,
                e.name,
                p,
                e.defined_repeats,
                e.repeats,
                e.detail.replace(',', ";"),
                err.replace(',', ";")
            );
        }
        out
    }
}

impl fmt::Display for Leaderboard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.entries.iter().enumerate() {
            let p = e.precision.map_or("undefined".to_string(), |p| format!("{p:.4}"));
            write!(f, "{:>2}. {:<12} precision {p}", i + 1, e.name)?;
            if let Some(err) = &e.error {
                write!(f, "  failed: {err}")?;
            } else if !e.detail.is_empty() {
                write!(f, "  ({})", e.detail)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Holdout splits shared by every candidate so all are validated identically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionValidator {
    pub test_fraction: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SelectionValidator {
    fn default() -> Self {
        SelectionValidator {
            test_fraction: 0.25,
            repeats: 3,
            seed: 0,
        }
    }
}

/// Tunes and validates each candidate on the same splits and ranks them by mean
/// precision, then by name.
pub fn select_model(
    candidates: &[&dyn Learner],
    dataset: &Dataset,
    threshold: f64,
    validator: &SelectionValidator,
) -> Result<Leaderboard, TuningError> {
    if candidates.is_empty() {
        return Err(TuningError::AllCandidatesFailed);
    }
    if validator.repeats == 0 {
        return Err(TuningError::InvalidRepeats);
    }
    if !(validator.test_fraction > 0.0 && validator.test_fraction < 1.0) {
        return Err(KnnError::InvalidFraction(validator.test_fraction).into());
    }
    let splits = knn::holdout_splits(dataset.len(), validator.test_fraction, validator.repeats, validator.seed);
    let labels = dataset.labels_at(threshold);
    let mut entries: Vec<LeaderboardEntry> = par::map_slice(candidates, |learner| {
        let mut precisions = Vec::new();
        let mut details = Vec::new();
        for (tr, test) in &splits {
            let model = match learner.fit(&dataset.subset(tr), threshold) {
                Ok(m) => m,
                Err(e) => {
                    return LeaderboardEntry {
                        name: learner.name().to_string(),
                        precision: None,
                        defined_repeats: 0,
                        repeats: splits.len(),
                        detail: String::new(),
                        error: Some(e.to_string()),
                    }
                }
            };
            details.push(model.describe());
            let preds: Vec<bool> = test.iter().map(|&i| model.predict(&dataset.points[i].features)).collect();
            let truth: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
            if let Some(p) = confusion(&preds, &truth).expect("equal lengths").precision() {
                precisions.push(p);
            }
        }
        LeaderboardEntry {
            name: learner.name().to_string(),
            precision: (!precisions.is_empty()).then(|| precisions.iter().sum::<f64>() / precisions.len() as f64),
            defined_repeats: precisions.len(),
            repeats: splits.len(),
            detail: details.join(" | "),
            error: None,
        }
    });
    if entries.iter().all(|e| e.error.is_some()) {
        return Err(TuningError::AllCandidatesFailed);
    }
    entries.sort_by(|a, b| {
        let pa = a.precision.unwrap_or(f64::NEG_INFINITY);
        let pb = b.precision.unwrap_or(f64::NEG_INFINITY);
        a.error
            .is_some()
            .cmp(&b.error.is_some())
            .then(pb.total_cmp(&pa))
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(Leaderboard { entries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImportance {
    pub feature: &'static str,
    /// Mean precision drop when the column is shuffled; undefined precision counts as 0.
    pub importance: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub baseline_precision: Option<f64>,
    pub scores: Vec<FeatureImportance>,
    pub repeats: usize,
    pub seed: u64,
    /// Caller's note on whether the data was the training data or held out.
    pub data_note: String,
}

impl ImportanceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,importance,std\n");
        for s in &self.scores {
            let _ = writeln!(out, "{},{},{}", s.feature, s.importance, s.std);
        }
        out
    }
}

impl fmt::Display for ImportanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = self.baseline_precision.map_or("undefined".into(), |p| format!("{p:.4}"));
        writeln!(f, "baseline precision {base} ({}, {} repeats, seed {})", self.data_note, self.repeats, self.seed)?;
        for s in &self.scores {
            writeln!(f, "{:<20} {:+.4} ± {:.4}", s.feature, s.importance, s.std)?;
        }
        Ok(())
    }
}

/// Permutation importance: precision drop when one feature column is shuffled.
pub fn feature_importance(
    model: &KnnModel,
    dataset: &Dataset,
    seed: u64,
    repeats: usize,
    data_note: &str,
) -> Result<ImportanceReport, TuningError> {
    if repeats == 0 {
        return Err(TuningError::InvalidRepeats);
    }
    let labels = dataset.labels_at(model.threshold());
    let rows = dataset.feature_rows();
    let precision_of = |rows: &[[f64; NUM_FEATURES]]| {
        let preds: Vec<bool> = rows
            .iter()
            .map(|r| model.predict(&FeatureVector::from_array(*r)).positive)
            .collect();
        confusion(&preds, &labels).expect("equal lengths").precision()
    };
    let baseline = precision_of(&rows);
    let base = baseline.unwrap_or(0.0);
    let drops = par::map_range(NUM_FEATURES * repeats, |task| {
        let j = task / repeats;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(task as u64);
        let mut column: Vec<f64> = rows.iter().map(|row| row[j]).collect();
        column.shuffle(&mut rng);
        let permuted: Vec<[f64; NUM_FEATURES]> = rows
            .iter()
            .zip(&column)
            .map(|(row, &v)| {
                let mut row = *row;
                row[j] = v;
                row
            })
            .collect();
        base - precision_of(&permuted).unwrap_or(0.0)
    });
    let scores = (0..NUM_FEATURES)
        .map(|j| {
            let d = &drops[j * repeats..(j + 1) * repeats];
            let mean = d.iter().sum::<f64>() / repeats as f64;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / repeats as f64;
            FeatureImportance {
                feature: FEATURE_NAMES[j],
                importance: mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(ImportanceReport {
        baseline_precision: baseline,
        scores,
        repeats,
        seed,
        data_note: data_note.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub window: (NaiveDate, NaiveDate),
    pub window_points: usize,
    pub window_precision: f64,
    /// Mean precision over random windows with as many distinct dates.
    pub baseline_precision: f64,
    pub baseline_samples: usize,
    pub delta: f64,
}

impl DriftReport {
    pub fn drifted(&self) -> bool {
        self.delta < 0.0
    }

    pub fn to_csv(&self) -> String {
        format!(
            "window_from,window_to,window_points,window_precision,baseline_precision,baseline_samples,delta\n{},{},{},{},{},{},{}\n",
            self.window.0,
            self.window.1,
            self.window_points,
            self.window_precision,
            self.baseline_precision,
            self.baseline_samples,
            self.delta
        )
    }
}

impl fmt::Display for DriftReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "window {}..{} ({} points): precision {:.4} vs baseline {:.4} over {} random windows, delta {:+.4}{}",
            self.window.0,
            self.window.1,
            self.window_points,
            self.window_precision,
            self.baseline_precision,
            self.baseline_samples,
            self.delta,
            if self.drifted() { " (drift)" } else { "" }
        )
    }
}

/// Compares precision inside a date window to random windows of the same number
/// of distinct dates drawn from the whole dataset.
pub fn drift_report(
    model: &KnnModel,
    dataset: &Dataset,
    window: (NaiveDate, NaiveDate),
    baseline_samples: usize,
    seed: u64,
) -> Result<DriftReport, TuningError> {
    if baseline_samples == 0 {
        return Err(TuningError::InvalidRepeats);
    }
    let in_window: Vec<usize> = (0..dataset.len())
        .filter(|&i| (window.0..=window.1).contains(&dataset.points[i].date))
        .collect();
    if in_window.is_empty() {
        return Err(TuningError::EmptyWindow);
    }
    let preds = par::map_slice(&dataset.points, |p| model.predict(&p.features).positive);
    let labels = dataset.labels_at(model.threshold());
    let precision_over = |idx: &[usize]| {
        let p: Vec<bool> = idx.iter().map(|&i| preds[i]).collect();
        let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        confusion(&p, &l).expect("equal lengths").precision()
    };
    let window_precision = precision_over(&in_window).ok_or(TuningError::UndefinedPrecision)?;

    let dates: Vec<NaiveDate> = dataset.points.iter().map(|p| p.date).collect::<BTreeSet<_>>().into_iter().collect();
    let width = in_window
        .iter()
        .map(|&i| dataset.points[i].date)
        .collect::<BTreeSet<_>>()
        .len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled = Vec::with_capacity(baseline_samples);
    for _ in 0..baseline_samples {
        let start = rng.random_range(0..=dates.len() - width);
        let (from, to) = (dates[start], dates[start + width - 1]);
        let idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| (from..=to).contains(&dataset.points[i].date))
            .collect();
        if let Some(p) = precision_over(&idx) {
            sampled.push(p);
        }
    }
    if sampled.is_empty() {
        return Err(TuningError::UndefinedPrecision);
    }
    let baseline_precision = sampled.iter().sum::<f64>() / sampled.len() as f64;
    Ok(DriftReport {
        window,
        window_points: in_window.len(),
        window_precision,
        baseline_precision,
        baseline_samples: sampled.len(),
        delta: window_precision - baseline_precision,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromotionDecision {
    pub accept: bool,
    pub candidate_precision: Option<f64>,
    pub incumbent_precision: Option<f64>,
}

impl fmt::Display for PromotionDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |p: Option<f64>| p.map_or("undefined".to_string(), |p| format!("{p:.4}"));
        write!(
            f,
            "{}: candidate {} vs incumbent {}",
            if self.accept { "accept" } else { "reject" },
            show(self.candidate_precision),
            show(self.incumbent_precision)
        )
    }
}

/// Accepts only a strict improvement. An undefined precision ranks below any
/// defined one, and an undefined candidate is never accepted.
pub fn gate_decision(candidate: Option<f64>, incumbent: Option<f64>) -> PromotionDecision {
    let accept = match (candidate, incumbent) {
        (Some(c), Some(i)) => c > i,
        (Some(_), None) => true,
        (None, _) => false,
    };
    PromotionDecision {
        accept,
        candidate_precision: candidate,
        incumbent_precision: incumbent,
    }
}

pub fn promotion_gate(candidate: &KnnModel, incumbent: &KnnModel, validation: &Dataset) -> Result<PromotionDecision, TuningError> {
    if candidate.threshold() != incumbent.threshold() {
        return Err(TuningError::IncomparableModels {
            candidate: vec![candidate.threshold()],
            incumbent: vec![incumbent.threshold()],
        });
    }
    Ok(gate_decision(
        candidate.evaluate(validation).precision(),
        incumbent.evaluate(validation).precision(),
    ))
}

/// Mean per-model precision of an ensemble; models without positive predictions
/// contribute 0.
pub fn ensemble_precision(ensemble: &EnsembleModel, validation: &Dataset) -> f64 {
    let per_model: Vec<f64> = ensemble
        .models()
        .iter()
        .map(|m| m.evaluate(validation).precision().unwrap_or(0.0))
        .collect();
    per_model.iter().sum::<f64>() / per_model.len() as f64
}

pub fn promotion_gate_ensemble(
    candidate: &EnsembleModel,
    incumbent: &EnsembleModel,
    validation: &Dataset,
) -> Result<PromotionDecision, TuningError> {
    if candidate.thresholds() != incumbent.thresholds() {
        return Err(TuningError::IncomparableModels {
            candidate: candidate.thresholds(),
            incumbent: incumbent.thresholds(),
        });
    }
    Ok(gate_decision(
        Some(ensemble_precision(candidate, validation)),
        Some(ensemble_precision(incumbent, validation)),
    ))
}

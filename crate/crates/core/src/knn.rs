//! k-nearest-neighbor threshold classifiers and their validation.
//!
//! A [`KnnModel`] answers one question: will the intraday gain reach its threshold?
//! Nineteen of them with ascending thresholds form an [`EnsembleModel`], whose
//! ranking rule scores a stock by the highest threshold any model predicts it clears.
//!
//! Neighbor search is exact brute force over standardized features with squared
//! Euclidean distance. Ties are broken by training-point index, so neighbor sets are
//! fully deterministic. A vote is positive only with a strict majority; an even split
//! is negative.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{Dataset, FeatureError, FeatureVector, Scaler, NUM_FEATURES};
use crate::par;

pub type Point = [f64; NUM_FEATURES];

pub const DEFAULT_ENSEMBLE_SIZE: usize = 19;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("need at least {needed} points, have {available}")]
    TooFewPoints { needed: usize, available: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("repeats must be at least 1")]
    InvalidRepeats,
    #[error("predictions and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no positive predictions, precision undefined")]
    NoPositivePredictions,
    #[error("ensemble thresholds must be strictly ascending")]
    UnorderedThresholds,
    #[error("ensemble has no models")]
    EmptyEnsemble,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("model file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("content hash mismatch: recorded {recorded}, computed {computed}")]
    HashMismatch { recorded: String, computed: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Default thresholds 0.6%, 1.1%, ..., 9.6%.
pub fn default_thresholds() -> Vec<f64> {
    (0..DEFAULT_ENSEMBLE_SIZE)
        .map(|i| (6 + 5 * i) as f64 / 1000.0)
        .collect()
}

#[inline]
pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    let mut s = 0.0;
    for j in 0..NUM_FEATURES {
        let d = a[j] - b[j];
        s += d * d;
    }
    s
}

/// Indices of the `k` nearest points ordered by (distance, index), optionally
/// skipping one index.
pub fn nearest(points: &[Point], query: &Point, k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    if k == 0 {
        return Vec::new();
    }
    for (i, p) in points.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        let d = squared_distance(p, query);
        if best.len() == k {
            // equal distance loses to the earlier index already held
            if d >= best[k - 1].0 {
                continue;
            }
            best.pop();
        }
        let pos = best.partition_point(|&(bd, _)| bd <= d);
        best.insert(pos, (d, i));
    }
    best.into_iter().map(|(_, i)| i).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub positive: bool,
    pub vote_fraction: f64,
}

fn vote(labels: &[bool], neighbors: &[usize]) -> Prediction {
    let positives = neighbors.iter().filter(|&&i| labels[i]).count();
    Prediction {
        positive: 2 * positives > neighbors.len(),
        vote_fraction: positives as f64 / neighbors.len() as f64,
    }
}

/// Standardized training features shared by every model trained on them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub points: Vec<Point>,
    pub scaler: Scaler,
    digest: String,
}

impl TrainingSet {
    pub fn new(points: Vec<Point>, scaler: Scaler) -> Self {
        let mut h = Sha256::new();
        for j in 0..NUM_FEATURES {
            h.update(scaler.mean[j].to_le_bytes());
            h.update(scaler.std[j].to_le_bytes());
            h.update([scaler.degenerate[j] as u8]);
        }
        for p in &points {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        let digest = hex::encode(h.finalize());
        TrainingSet {
            points,
            scaler,
            digest,
        }
    }

    /// Standardizes raw feature rows with `scaler`.
    pub fn from_raw(rows: &[Point], scaler: Scaler) -> Self {
        Self::new(rows.iter().map(|r| scaler.transform(r)).collect(), scaler)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }
}

/// Sequence number plus a content hash over everything that determines predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelVersion {
    pub seq: u64,
    pub hash: String,
}

impl fmt::Display for ModelVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.seq, self.hash)
    }
}

#[derive(Debug, Clone)]
pub struct KnnModel {
    k: usize,
    threshold: f64,
    store: Arc<TrainingSet>,
    labels: Vec<bool>,
    version: ModelVersion,
}

fn check_params(k: usize, threshold: f64, available: usize) -> Result<(), KnnError> {
    if k == 0 {
        return Err(KnnError::InvalidK);
    }
    if !(threshold > 0.0) {
        return Err(KnnError::InvalidThreshold(threshold));
    }
    if available < k {
        return Err(KnnError::TooFewPoints {
            needed: k,
            available,
        });
    }
    Ok(())
}

fn content_hash(k: usize, threshold: f64, store: &TrainingSet, labels: &[bool]) -> String {
    let mut h = Sha256::new();
    h.update((k as u64).to_le_bytes());
    h.update(threshold.to_le_bytes());
    h.update(store.digest.as_bytes());
    let packed: Vec<u8> = labels.iter().map(|&b| b as u8).collect();
    h.update(&packed);
    hex::encode(&h.finalize()[..8])
}

/// Scaler of a dataset: stored one if already standardized, else freshly fitted.
fn store_for(dataset: &Dataset) -> Result<TrainingSet, KnnError> {
    match dataset.scaler {
        Some(scaler) => Ok(TrainingSet::new(dataset.feature_rows(), scaler)),
        None => {
            let scaler = dataset.fit_scaler()?;
            Ok(TrainingSet::from_raw(&dataset.feature_rows(), scaler))
        }
    }
}

impl KnnModel {
    pub fn from_parts(
        k: usize,
        threshold: f64,
        store: Arc<TrainingSet>,
        labels: Vec<bool>,
        seq: u64,
    ) -> Result<Self, KnnError> {
        check_params(k, threshold, store.len())?;
        if labels.len() != store.len() {
            return Err(KnnError::LengthMismatch(labels.len(), store.len()));
        }
        let hash = content_hash(k, threshold, &store, &labels);
        Ok(KnnModel {
            k,
            threshold,
            store,
            labels,
            version: ModelVersion { seq, hash },
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn version(&self) -> &ModelVersion {
        &self.version
    }

    pub fn scaler(&self) -> &Scaler {
        &self.store.scaler
    }

    pub fn training_set(&self) -> &Arc<TrainingSet> {
        &self.store
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    /// Same training data and threshold, different neighbor count.
    pub fn with_k(&self, k: usize) -> Result<Self, KnnError> {
        Self::from_parts(k, self.threshold, self.store.clone(), self.labels.clone(), self.version.seq)
    }

    pub fn with_seq(mut self, seq: u64) -> Self {
        self.version.seq = seq;
        self
    }

    pub fn predict(&self, features: &FeatureVector) -> Prediction {
        self.predict_standardized(&self.store.scaler.transform(&features.to_array()))
    }

    pub fn predict_standardized(&self, z: &Point) -> Prediction {
        vote(&self.labels, &nearest(&self.store.points, z, self.k, None))
    }

    /// Confusion matrix over a raw (unstandardized) labeled dataset.
    pub fn evaluate(&self, dataset: &Dataset) -> ConfusionMatrix {
        let preds = par::map_slice(&dataset.points, |p| self.predict(&p.features).positive);
        let labels = dataset.labels_at(self.threshold);
        confusion(&preds, &labels).expect("equal lengths")
    }
}

/// Trains on a dataset, fitting a scaler unless the dataset is already standardized.
pub fn train(dataset: &Dataset, k: usize, threshold: f64) -> Result<KnnModel, KnnError> {
    check_params(k, threshold, dataset.len())?;
    let store = Arc::new(store_for(dataset)?);
    KnnModel::from_parts(k, threshold, store, dataset.labels_at(threshold), 1)
}

/// Trains on raw points with a given scaler.
pub fn train_with_scaler(dataset: &Dataset, k: usize, threshold: f64, scaler: Scaler) -> Result<KnnModel, KnnError> {
    check_params(k, threshold, dataset.len())?;
    let store = Arc::new(TrainingSet::from_raw(&dataset.feature_rows(), scaler));
    KnnModel::from_parts(k, threshold, store, dataset.labels_at(threshold), 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> Option<f64> {
        let predicted = self.tp + self.fp;
        (predicted > 0).then(|| self.tp as f64 / predicted as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let actual = self.tp + self.fn_;
        (actual > 0).then(|| self.tp as f64 / actual as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.tp + self.tn) as f64 / n as f64)
    }

    pub fn add(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }

    /// Plain-text matrix with the error categories spelled out. False positives buy
    /// losing stocks; false negatives only miss opportunities.
    pub fn report(&self) -> String {
        let fmt_opt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        format!(
            "              pred+   pred-\n\
             actual+  {:>8} {:>7}\n\
             actual-  {:>8} {:>7}\n\
             precision {}  recall {}  accuracy {}\n\
             false positives (capital at risk): {}\n\
             false negatives (missed opportunities): {}\n",
            self.tp,
            self.fn_,
            self.fp,
            self.tn,
            fmt_opt(self.precision()),
            fmt_opt(self.recall()),
            fmt_opt(self.accuracy()),
            self.fp,
            self.fn_
        )
    }
}

pub fn confusion(predictions: &[bool], labels: &[bool]) -> Result<ConfusionMatrix, KnnError> {
    if predictions.len() != labels.len() {
        return Err(KnnError::LengthMismatch(predictions.len(), labels.len()));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, false) => m.tn += 1,
            (false, true) => m.fn_ += 1,
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutResult {
    pub precision_mean: f64,
    pub precision_min: f64,
    pub precision_max: f64,
    /// `None` where a repeat made no positive prediction.
    pub per_repeat: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

/// Seeded random train/test splits. Each split lists (train, test) indices in
/// ascending order.
pub fn holdout_splits(n: usize, test_fraction: f64, repeats: usize, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let test_n = ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    (0..repeats)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut test = idx[..test_n].to_vec();
            let mut tr = idx[test_n..].to_vec();
            test.sort_unstable();
            tr.sort_unstable();
            (tr, test)
        })
        .collect()
}

/// Repeated random holdout validation; the model of each repeat sees only its
/// training split (scaler included).
pub fn holdout_validate(
    dataset: &Dataset,
    k: usize,
    threshold: f64,
    test_fraction: f64,
    repeats: usize,
    seed: u64,
) -> Result<HoldoutResult, KnnError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(KnnError::InvalidFraction(test_fraction));
    }
    if repeats == 0 {
        return Err(KnnError::InvalidRepeats);
    }
    let mut total = ConfusionMatrix::default();
    let mut per_repeat = Vec::with_capacity(repeats);
    for (tr, test) in holdout_splits(dataset.len(), test_fraction, repeats, seed) {
        let model = train(&dataset.subset(&tr), k, threshold)?;
        let m = model.evaluate(&dataset.subset(&test));
        per_repeat.push(m.precision());
        total = total.add(&m);
    }
    let defined: Vec<f64> = per_repeat.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(KnnError::NoPositivePredictions);
    }
    Ok(HoldoutResult {
        precision_mean: defined.iter().sum::<f64>() / defined.len() as f64,
        precision_min: defined.iter().copied().fold(f64::INFINITY, f64::min),
        precision_max: defined.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        per_repeat,
        confusion: total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValResult {
    pub predictions: Vec<bool>,
    pub vote_fractions: Vec<f64>,
    pub labels: Vec<bool>,
    pub confusion: ConfusionMatrix,
}

impl CrossValResult {
    pub fn precision(&self) -> Option<f64> {
        self.confusion.precision()
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.confusion.accuracy()
    }

    fn from_votes(votes: Vec<Prediction>, labels: Vec<bool>) -> Self {
        let predictions: Vec<bool> = votes.iter().map(|v| v.positive).collect();
        let confusion = confusion(&predictions, &labels).expect("equal lengths");
        CrossValResult {
            predictions,
            vote_fractions: votes.iter().map(|v| v.vote_fraction).collect(),
            labels,
            confusion,
        }
    }
}

/// Leave-one-out cross-validation without retraining: every point is classified by
/// its `k` nearest *other* points in the already standardized training set.
/// The scaler is fitted once on the full dataset.
pub fn loocv(dataset: &Dataset, k: usize, threshold: f64) -> Result<CrossValResult, KnnError> {
    check_params(k, threshold, dataset.len())?;
    if dataset.len() < k + 1 {
        return Err(KnnError::TooFewPoints {
            needed: k + 1,
            available: dataset.len(),
        });
    }
    let store = store_for(dataset)?;
    let labels = dataset.labels_at(threshold);
    let votes = par::map_range(store.len(), |i| {
        vote(&labels, &nearest(&store.points, &store.points[i], k, Some(i)))
    });
    Ok(CrossValResult::from_votes(votes, labels))
}

/// Neighbor lists for leave-one-out evaluation of many `k` at once: row `i` holds
/// the `max_k` nearest other points of point `i`. Any prefix of a row is the
/// neighbor set for the smaller `k`.
#[derive(Debug, Clone)]
pub struct LoocvNeighbors {
    rows: Vec<Vec<usize>>,
    max_k: usize,
}

impl LoocvNeighbors {
    pub fn build(dataset: &Dataset, max_k: usize) -> Result<Self, KnnError> {
        if max_k == 0 {
            return Err(KnnError::InvalidK);
        }
        if dataset.len() < max_k + 1 {
            return Err(KnnError::TooFewPoints {
                needed: max_k + 1,
                available: dataset.len(),
            });
        }
        let store = store_for(dataset)?;
        let rows = par::map_range(store.len(), |i| {
            nearest(&store.points, &store.points[i], max_k, Some(i))
        });
        Ok(LoocvNeighbors { rows, max_k })
    }

    pub fn max_k(&self) -> usize {
        self.max_k
    }

    pub fn evaluate(&self, labels: &[bool], k: usize) -> Result<CrossValResult, KnnError> {
        if k == 0 {
            return Err(KnnError::InvalidK);
        }
        if k > self.max_k {
            return Err(KnnError::TooFewPoints {
                needed: k,
                available: self.max_k,
            });
        }
        let votes = self.rows.iter().map(|r| vote(labels, &r[..k])).collect();
        Ok(CrossValResult::from_votes(votes, labels.to_vec()))
    }
}

/// Evaluation on the training data itself, each point counting as its own neighbor.
/// Optimistic by construction; kept for comparison against [`loocv`].
pub fn training_set_eval(dataset: &Dataset, k: usize, threshold: f64) -> Result<CrossValResult, KnnError> {
    let model = train(dataset, k, threshold)?;
    let votes = par::map_range(model.len(), |i| model.predict_standardized(&model.store.points[i]));
    Ok(CrossValResult::from_votes(votes, model.labels.clone()))
}

#[derive(Debug, Clone)]
pub struct EnsembleModel {
    models: Vec<KnnModel>,
    version: ModelVersion,
}

impl EnsembleModel {
    pub fn new(models: Vec<KnnModel>, seq: u64) -> Result<Self, KnnError> {
        if models.is_empty() {
            return Err(KnnError::EmptyEnsemble);
        }
        if models.windows(2).any(|w| !(w[0].threshold < w[1].threshold)) {
            return Err(KnnError::UnorderedThresholds);
        }
        let mut h = Sha256::new();
        for m in &models {
            h.update(m.version.hash.as_bytes());
        }
        let hash = hex::encode(&h.finalize()[..8]);
        Ok(EnsembleModel {
            models,
            version: ModelVersion { seq, hash },
        })
    }

    pub fn models(&self) -> &[KnnModel] {
        &self.models
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.models.iter().map(|m| m.threshold).collect()
    }

    pub fn version(&self) -> &ModelVersion {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    fn shares_store(&self) -> bool {
        let first = &self.models[0].store;
        self.models.iter().all(|m| Arc::ptr_eq(&m.store, first))
    }

    /// One prediction per model, in threshold order. Models sharing one training
    /// set share a single neighbor search.
    pub fn predict_all(&self, features: &FeatureVector) -> Vec<Prediction> {
        if self.shares_store() {
            let store = &self.models[0].store;
            let z = store.scaler.transform(&features.to_array());
            let max_k = self.models.iter().map(|m| m.k).max().unwrap_or(1);
            let neighbors = nearest(&store.points, &z, max_k, None);
            self.models
                .iter()
                .map(|m| vote(&m.labels, &neighbors[..m.k]))
                .collect()
        } else {
            self.models.iter().map(|m| m.predict(features)).collect()
        }
    }
}

/// Trains one model per threshold on a shared standardized training set. `ks` holds
/// one neighbor count per threshold, or a single value for all.
pub fn train_ensemble(dataset: &Dataset, thresholds: &[f64], ks: &[usize], seq: u64) -> Result<EnsembleModel, KnnError> {
    if thresholds.is_empty() {
        return Err(KnnError::EmptyEnsemble);
    }
    if ks.len() != 1 && ks.len() != thresholds.len() {
        return Err(KnnError::LengthMismatch(ks.len(), thresholds.len()));
    }
    let store = Arc::new(store_for(dataset)?);
    let models = thresholds
        .iter()
        .enumerate()
        .map(|(i, &tau)| {
            let k = if ks.len() == 1 { ks[0] } else { ks[i] };
            KnnModel::from_parts(k, tau, store.clone(), dataset.labels_at(tau), seq)
        })
        .collect::<Result<Vec<_>, _>>()?;
    EnsembleModel::new(models, seq)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedPrediction {
    pub symbol: String,
    /// Highest threshold with a positive prediction, 0 if none.
    pub score: f64,
    /// Vote fraction of the model that set the score (0 if none).
    pub vote_fraction: f64,
    pub outputs: Vec<Prediction>,
    pub features: FeatureVector,
}

/// Total order: score descending, then vote fraction descending, then symbol.
pub fn rank_order(a: &RankedPrediction, b: &RankedPrediction) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.vote_fraction.total_cmp(&a.vote_fraction))
        .then_with(|| a.symbol.cmp(&b.symbol))
}

pub fn ensemble_rank(ensemble: &EnsembleModel, features_by_symbol: &BTreeMap<String, FeatureVector>) -> Vec<RankedPrediction> {
    let entries: Vec<(&String, &FeatureVector)> = features_by_symbol.iter().collect();
    let mut ranked = par::map_slice(&entries, |(symbol, features)| {
        let outputs = ensemble.predict_all(features);
        let top = outputs.iter().rposition(|p| p.positive);
        let (score, vote_fraction) = match top {
            Some(i) => (ensemble.models[i].threshold, outputs[i].vote_fraction),
            None => (0.0, 0.0),
        };
        RankedPrediction {
            symbol: (*symbol).clone(),
            score,
            vote_fraction,
            outputs,
            features: **features,
        }
    });
    ranked.sort_by(rank_order);
    ranked
}

const MODEL_MAGIC: &str = "# knn-model v1";
const ENSEMBLE_MAGIC: &str = "# knn-ensemble v1";

fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Self-contained text form: a `key = value` header followed by one
/// `z1,..,z7,label` row per training point.
pub fn model_to_text(model: &KnnModel) -> String {
    let s = &model.store.scaler;
    let mut out = String::new();
    let _ = writeln!(out, "{MODEL_MAGIC}");
    let _ = writeln!(out, "k = {}", model.k);
    let _ = writeln!(out, "threshold = {}", model.threshold);
    let _ = writeln!(out, "seq = {}", model.version.seq);
    let _ = writeln!(out, "hash = {}", model.version.hash);
    let _ = writeln!(out, "scaler_mean = {}", join_floats(&s.mean));
    let _ = writeln!(out, "scaler_std = {}", join_floats(&s.std));
    let degenerate: Vec<&str> = s.degenerate.iter().map(|&d| if d { "1" } else { "0" }).collect();
    let _ = writeln!(out, "scaler_degenerate = {}", degenerate.join(","));
    let _ = writeln!(out, "points = {}", model.len());
    for (p, &l) in model.store.points.iter().zip(&model.labels) {
        let _ = writeln!(out, "{},{}", join_floats(p), l as u8);
    }
    out
}

fn parse_floats<const N: usize>(s: &str, line: usize) -> Result<[f64; N], KnnError> {
    let bad = || KnnError::Format {
        line,
        reason: format!("expected {N} numbers"),
    };
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != N {
        return Err(bad());
    }
    let mut out = [0.0; N];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p.trim().parse().map_err(|_| bad())?;
    }
    Ok(out)
}

struct ParsedModel {
    k: usize,
    threshold: f64,
    seq: u64,
    hash: String,
    points: Vec<Point>,
    scaler: Scaler,
    labels: Vec<bool>,
}

fn parse_model(text: &str) -> Result<ParsedModel, KnnError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == MODEL_MAGIC => {}
        _ => {
            return Err(KnnError::Format {
                line: 1,
                reason: "missing model header".into(),
            })
        }
    }
    let mut header: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut count = None;
    for (i, line) in lines.by_ref() {
        let (key, value) = line.split_once('=').ok_or(KnnError::Format {
            line: i + 1,
            reason: "expected `key = value`".into(),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key == "points" {
            count = Some(value.parse::<usize>().map_err(|_| KnnError::Format {
                line: i + 1,
                reason: "bad point count".into(),
            })?);
            break;
        }
        header.insert(key, (i + 1, value));
    }
    let get = |key: &str| {
        header.get(key).ok_or(KnnError::Format {
            line: 0,
            reason: format!("missing `{key}`"),
        })
    };
    let num_err = |line: usize, key: &str| KnnError::Format {
        line,
        reason: format!("bad `{key}`"),
    };
    let (l, v) = get("k")?;
    let k: usize = v.parse().map_err(|_| num_err(*l, "k"))?;
    let (l, v) = get("threshold")?;
    let threshold: f64 = v.parse().map_err(|_| num_err(*l, "threshold"))?;
    let (l, v) = get("seq")?;
    let seq: u64 = v.parse().map_err(|_| num_err(*l, "seq"))?;
    let hash = get("hash")?.1.clone();
    let (l, v) = get("scaler_mean")?;
    let mean = parse_floats::<NUM_FEATURES>(v, *l)?;
    let (l, v) = get("scaler_std")?;
    let std = parse_floats::<NUM_FEATURES>(v, *l)?;
    let (l, v) = get("scaler_degenerate")?;
    let deg = parse_floats::<NUM_FEATURES>(v, *l)?;
    let scaler = Scaler {
        mean,
        std,
        degenerate: deg.map(|d| d != 0.0),
    };
    let count = count.ok_or(KnnError::Format {
        line: 0,
        reason: "missing `points`".into(),
    })?;
    let mut points = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row = parse_floats::<{ NUM_FEATURES + 1 }>(line, i + 1)?;
        let mut p = [0.0; NUM_FEATURES];
        p.copy_from_slice(&row[..NUM_FEATURES]);
        points.push(p);
        labels.push(row[NUM_FEATURES] != 0.0);
    }
    if points.len() != count {
        return Err(KnnError::Format {
            line: 0,
            reason: format!("declared {count} points, found {}", points.len()),
        });
    }
    Ok(ParsedModel {
        k,
        threshold,
        seq,
        hash,
        points,
        scaler,
        labels,
    })
}

fn model_from_parsed(p: ParsedModel, store: Arc<TrainingSet>) -> Result<KnnModel, KnnError> {
    let model = KnnModel::from_parts(p.k, p.threshold, store, p.labels, p.seq)?;
    if model.version.hash != p.hash {
        return Err(KnnError::HashMismatch {
            recorded: p.hash,
            computed: model.version.hash,
        });
    }
    Ok(model)
}

pub fn model_from_text(text: &str) -> Result<KnnModel, KnnError> {
    let mut p = parse_model(text)?;
    let store = Arc::new(TrainingSet::new(std::mem::take(&mut p.points), p.scaler));
    model_from_parsed(p, store)
}

fn model_file_name(i: usize) -> String {
    format!("model_{i:02}.knn")
}

/// Writes `manifest.txt` plus one model file per threshold into `dir`.
pub fn save_ensemble(ensemble: &EnsembleModel, dir: &Path) -> Result<(), KnnError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "{ENSEMBLE_MAGIC}");
    let _ = writeln!(manifest, "seq = {}", ensemble.version.seq);
    let _ = writeln!(manifest, "hash = {}", ensemble.version.hash);
    let _ = writeln!(manifest, "models = {}", ensemble.len());
    for (i, m) in ensemble.models.iter().enumerate() {
        let name = model_file_name(i);
        std::fs::write(dir.join(&name), model_to_text(m))?;
        let _ = writeln!(manifest, "{name} = {} {}", m.threshold, m.version.hash);
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<EnsembleModel, KnnError> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut lines = manifest.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some(ENSEMBLE_MAGIC) {
        return Err(KnnError::Format {
            line: 1,
            reason: "missing ensemble header".into(),
        });
    }
    let mut seq = 0;
    let mut recorded_hash = String::new();
    let mut files = Vec::new();
    for (i, line) in lines {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "seq" => {
                seq = value.parse().map_err(|_| KnnError::Format {
                    line: i + 1,
                    reason: "bad seq".into(),
                })?
            }
            "hash" => recorded_hash = value.to_string(),
            "models" => {}
            name => files.push(name.to_string()),
        }
    }
    let mut models = Vec::with_capacity(files.len());
    let mut shared: Option<Arc<TrainingSet>> = None;
    for name in files {
        let mut p = parse_model(&std::fs::read_to_string(dir.join(&name))?)?;
        let store = match &shared {
            Some(s) if s.points == p.points && s.scaler == p.scaler => s.clone(),
            _ => {
                let s = Arc::new(TrainingSet::new(std::mem::take(&mut p.points), p.scaler));
                shared = Some(s.clone());
                s
            }
        };
        models.push(model_from_parsed(p, store)?);
    }
    let ensemble = EnsembleModel::new(models, seq)?;
    if ensemble.version.hash != recorded_hash {
        return Err(KnnError::HashMismatch {
            recorded: recorded_hash,
            computed: ensemble.version.hash,
        });
    }
    Ok(ensemble)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::LabeledPoint;
    use chrono::NaiveDate;

    pub(crate) fn point(i: usize, f: Point, label: f64) -> LabeledPoint {
        LabeledPoint {
            symbol: format!("S{i}"),
            date: NaiveDate::from_ymd_opt(2022, 1, 3).unwrap() + chrono::Days::new(i as u64),
            features: FeatureVector::from_array(f),
            label_value: label,
        }
    }

    fn line_dataset(n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| {
                    let x = i as f64;
                    point(i, [x, x * 0.5, 1.0 + x, 2.0, x * x, 0.1 * x, 100.0 + x], if i % 2 == 0 { 0.05 } else { 0.0 })
                })
                .collect(),
        )
    }

    #[test]
    fn default_grid() {
        let t = default_thresholds();
        assert_eq!(t.len(), 19);
        assert_eq!(t[0], 0.006);
        assert_eq!(t[2], 0.016);
        assert_eq!(t[4], 0.026);
        assert_eq!(t[18], 0.096);
    }

    #[test]
    fn train_boundaries() {
        let ds = line_dataset(10);
        let m = train(&ds, 5, 0.016).unwrap();
        assert_eq!(m.len(), 10);
        assert!(train(&ds, 10, 0.016).is_ok());
        assert!(matches!(train(&ds, 0, 0.016), Err(KnnError::InvalidK)));
        assert!(matches!(train(&ds, 11, 0.016), Err(KnnError::TooFewPoints { .. })));
        assert!(matches!(train(&ds, 3, 0.0), Err(KnnError::InvalidThreshold(_))));
    }

    #[test]
    fn self_match_and_majority() {
        let ds = line_dataset(10);
        let m = train(&ds, 1, 0.01).unwrap();
        for p in &ds.points {
            let pred = m.predict(&p.features);
            assert_eq!(pred.positive, p.label_value >= 0.01);
            assert!(pred.vote_fraction == 0.0 || pred.vote_fraction == 1.0);
        }
        assert_eq!(
            vote(&[true, true, false], &[0, 1, 2]),
            Prediction { positive: true, vote_fraction: 2.0 / 3.0 }
        );
        // even split resolves negative
        assert!(!vote(&[true, false], &[0, 1]).positive);
    }

    #[test]
    fn ties_break_by_index() {
        let pts = vec![[1.0; NUM_FEATURES], [0.0; NUM_FEATURES], [1.0; NUM_FEATURES], [-1.0; NUM_FEATURES]];
        assert_eq!(nearest(&pts, &[0.0; NUM_FEATURES], 3, None), vec![1, 0, 2]);
        assert_eq!(nearest(&pts, &[0.0; NUM_FEATURES], 2, Some(1)), vec![0, 2]);
    }

    #[test]
    fn confusion_examples() {
        assert!(matches!(confusion(&[true], &[]), Err(KnnError::LengthMismatch(1, 0))));
        let labels: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let m = confusion(&[true; 10], &labels).unwrap();
        assert_eq!((m.tp, m.fp, m.tn, m.fn_), (5, 5, 0, 0));
        assert_eq!(m.precision(), Some(0.5));
        let all_right = confusion(&labels, &labels).unwrap();
        assert_eq!((all_right.fp, all_right.fn_), (0, 0));
        assert_eq!(ConfusionMatrix::default().precision(), None);
        assert!(m.report().contains("false positives (capital at risk): 5"));
    }

    #[test]
    fn holdout_is_deterministic_and_validates_args() {
        let ds = line_dataset(40);
        let a = holdout_validate(&ds, 3, 0.01, 0.25, 2, 9);
        let b = holdout_validate(&ds, 3, 0.01, 0.25, 2, 9);
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert!(matches!(holdout_validate(&ds, 3, 0.01, 1.0, 1, 0), Err(KnnError::InvalidFraction(_))));
        assert!(matches!(holdout_validate(&ds, 3, 0.01, 0.5, 0, 0), Err(KnnError::InvalidRepeats)));
        for (tr, test) in holdout_splits(40, 0.25, 3, 1) {
            assert_eq!(test.len(), 10);
            assert_eq!(tr.len(), 30);
            assert!(tr.iter().all(|i| !test.contains(i)));
        }
    }

    #[test]
    fn neighbor_table_prefix_matches_loocv() {
        let m = crate::synthetic::SyntheticMarket::generate(&Default::default());
        let cal = crate::marketdata::build_calendar(&m.series, 0.5).unwrap();
        let ds = crate::features::build_dataset(&m.series, &cal, &crate::features::Prefilter::disabled()).unwrap();
        let ds = ds.subset(&(0..150).collect::<Vec<_>>());
        let table = LoocvNeighbors::build(&ds, 9).unwrap();
        for k in [1, 4, 9] {
            let direct = loocv(&ds, k, 0.01).unwrap();
            assert_eq!(table.evaluate(&ds.labels_at(0.01), k).unwrap(), direct);
        }
    }

    #[test]
    fn ensemble_ordering_and_ranking() {
        let ds = line_dataset(20);
        assert!(matches!(
            train_ensemble(&ds, &[0.02, 0.01], &[3], 1),
            Err(KnnError::UnorderedThresholds)
        ));
        let e = train_ensemble(&ds, &[0.006, 0.011, 0.016], &[1], 1).unwrap();
        let mut feats = BTreeMap::new();
        feats.insert("B".to_string(), ds.points[0].features);
        feats.insert("A".to_string(), ds.points[1].features);
        let ranked = ensemble_rank(&e, &feats);
        // point 0 has label 0.05 (positive everywhere), point 1 label 0.0
        assert_eq!(ranked[0].symbol, "B");
        assert_eq!(ranked[0].score, 0.016);
        assert_eq!(ranked[1].score, 0.0);
    }

    #[test]
    fn shared_search_matches_per_model_prediction() {
        let m = crate::synthetic::SyntheticMarket::generate(&Default::default());
        let cal = crate::marketdata::build_calendar(&m.series, 0.5).unwrap();
        let ds = crate::features::build_dataset(&m.series, &cal, &crate::features::Prefilter::disabled()).unwrap();
        let ks: Vec<usize> = (0..19).map(|i| 1 + (i * 7) % 23).collect();
        let e = train_ensemble(&ds, &default_thresholds(), &ks, 1).unwrap();
        for p in ds.points.iter().step_by(37) {
            let shared = e.predict_all(&p.features);
            let single: Vec<Prediction> = e.models().iter().map(|m| m.predict(&p.features)).collect();
            assert_eq!(shared, single);
        }
    }

    #[test]
    fn model_text_roundtrip_and_tamper_detection() {
        let ds = line_dataset(12);
        let m = train(&ds, 3, 0.016).unwrap().with_seq(4);
        let text = model_to_text(&m);
        let back = model_from_text(&text).unwrap();
        assert_eq!(back.version(), m.version());
        assert_eq!(back.labels(), m.labels());
        let tampered = text.replacen("k = 3", "k = 4", 1);
        assert!(matches!(model_from_text(&tampered), Err(KnnError::HashMismatch { .. })));
    }

    #[test]
    fn ensemble_dir_roundtrip_shares_store() {
        let ds = line_dataset(15);
        let e = train_ensemble(&ds, &default_thresholds(), &[3], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_ensemble(&e, dir.path()).unwrap();
        let back = load_ensemble(dir.path()).unwrap();
        assert_eq!(back.version(), e.version());
        assert!(back.shares_store());
        assert_eq!(back.thresholds(), e.thresholds());
    }
}

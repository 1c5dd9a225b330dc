//! The seven engineered features, the intraday-gain label and dataset assembly.
//!
//! For a prediction day `t` every feature is computed from bars strictly before `t`:
//!
//! | feature       | definition                                          |
//! |---------------|-----------------------------------------------------|
//! | `hl_rel`      | `H/L - 1` of day `t-1`                              |
//! | `co_rel`      | `C/O - 1` of day `t-1`                              |
//! | `ma7/14/21`   | mean close of the last 7/14/21 bars                 |
//! | `vol7_rel`    | population stddev of the last 7 closes / `ma7`      |
//! | `volume_prev` | volume of day `t-1`                                 |
//!
//! The label is `H/O - 1` of day `t` itself.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::NaiveDate;
use thiserror::Error;

use crate::marketdata::{Bar, Calendar, StockSeries};

pub const NUM_FEATURES: usize = 7;
/// Bars of history needed before a prediction day.
pub const HISTORY_DAYS: usize = 21;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "hl_rel",
    "co_rel",
    "ma7",
    "ma14",
    "ma21",
    "vol7_rel",
    "volume_prev",
];
pub const DEFAULT_PREFILTER_MIN_GAIN: f64 = 0.10;
/// Slack for comparing gains against thresholds, so 110/100 - 1 counts as 10%.
pub const GAIN_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("{symbol}: {available} bars before {date}, need {HISTORY_DAYS}")]
    InsufficientHistory {
        symbol: String,
        date: NaiveDate,
        available: usize,
    },
    #[error("{symbol} has no bar on {date}")]
    MissingDay { symbol: String, date: NaiveDate },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureVector {
    pub hl_rel: f64,
    pub co_rel: f64,
    pub ma7: f64,
    pub ma14: f64,
    pub ma21: f64,
    pub vol7_rel: f64,
    pub volume_prev: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.hl_rel,
            self.co_rel,
            self.ma7,
            self.ma14,
            self.ma21,
            self.vol7_rel,
            self.volume_prev,
        ]
    }

    pub fn from_array(a: [f64; NUM_FEATURES]) -> Self {
        FeatureVector {
            hl_rel: a[0],
            co_rel: a[1],
            ma7: a[2],
            ma14: a[3],
            ma21: a[4],
            vol7_rel: a[5],
            volume_prev: a[6],
        }
    }
}

/// Mean anchored at the first element; exact for constant input.
pub(crate) fn mean(xs: &[f64]) -> f64 {
    let first = xs[0];
    first + xs.iter().map(|x| x - first).sum::<f64>() / xs.len() as f64
}

pub(crate) fn population_std(xs: &[f64], mean: f64) -> f64 {
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Features from a history slice whose last bar is day `t-1`.
fn features_from_history(history: &[Bar]) -> FeatureVector {
    debug_assert!(history.len() >= HISTORY_DAYS);
    let prev = history[history.len() - 1];
    let closes: Vec<f64> = history[history.len() - HISTORY_DAYS..]
        .iter()
        .map(|b| b.close)
        .collect();
    let last7 = &closes[HISTORY_DAYS - 7..];
    let ma7 = mean(last7);
    FeatureVector {
        hl_rel: prev.high / prev.low - 1.0,
        co_rel: prev.close / prev.open - 1.0,
        ma7,
        ma14: mean(&closes[HISTORY_DAYS - 14..]),
        ma21: mean(&closes),
        vol7_rel: population_std(last7, ma7) / ma7,
        volume_prev: prev.volume as f64,
    }
}

pub fn extract_features(series: &StockSeries, t: NaiveDate) -> Result<FeatureVector, FeatureError> {
    let history = series.history_before(t);
    if history.len() < HISTORY_DAYS {
        return Err(FeatureError::InsufficientHistory {
            symbol: series.symbol.clone(),
            date: t,
            available: history.len(),
        });
    }
    Ok(features_from_history(history))
}

pub fn label_point(series: &StockSeries, t: NaiveDate) -> Result<f64, FeatureError> {
    series
        .bar_on(t)
        .map(|b| b.high / b.open - 1.0)
        .ok_or_else(|| FeatureError::MissingDay {
            symbol: series.symbol.clone(),
            date: t,
        })
}

/// How "gained the day before" is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrefilterRule {
    /// `C/O - 1` of day `t-1`, the same quantity as `co_rel`.
    #[default]
    OpenToClose,
    /// `C_{t-1}/C_{t-2} - 1`.
    CloseToClose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prefilter {
    pub min_gain: f64,
    pub rule: PrefilterRule,
}

impl Default for Prefilter {
    fn default() -> Self {
        Prefilter {
            min_gain: DEFAULT_PREFILTER_MIN_GAIN,
            rule: PrefilterRule::OpenToClose,
        }
    }
}

impl Prefilter {
    pub fn disabled() -> Self {
        Prefilter {
            min_gain: 0.0,
            rule: PrefilterRule::OpenToClose,
        }
    }

    /// A zero threshold admits every day, losers included.
    pub fn passes(&self, history: &[Bar]) -> bool {
        if self.min_gain <= 0.0 {
            return true;
        }
        let Some(prev) = history.last() else {
            return false;
        };
        let gain = match self.rule {
            PrefilterRule::OpenToClose => prev.close / prev.open - 1.0,
            PrefilterRule::CloseToClose => match history.len().checked_sub(2) {
                Some(i) => prev.close / history[i].close - 1.0,
                None => return false,
            },
        };
        gain >= self.min_gain - GAIN_EPSILON
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub symbol: String,
    /// The prediction day.
    pub date: NaiveDate,
    pub features: FeatureVector,
    pub label_value: f64,
}

/// Per-feature z-score parameters fitted on training data.
///
/// Constant features are flagged degenerate: they standardize to 0 regardless of
/// input and invert to the training constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaler {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
    pub degenerate: [bool; NUM_FEATURES],
}

impl Scaler {
    pub fn identity() -> Self {
        Scaler {
            mean: [0.0; NUM_FEATURES],
            std: [1.0; NUM_FEATURES],
            degenerate: [false; NUM_FEATURES],
        }
    }

    pub fn fit(rows: &[[f64; NUM_FEATURES]]) -> Result<Self, FeatureError> {
        if rows.is_empty() {
            return Err(FeatureError::EmptyDataset);
        }
        let mut scaler = Scaler::identity();
        let mut column = Vec::with_capacity(rows.len());
        for j in 0..NUM_FEATURES {
            column.clear();
            column.extend(rows.iter().map(|r| r[j]));
            let m = mean(&column);
            let s = population_std(&column, m);
            scaler.mean[j] = m;
            if s > 0.0 && s.is_finite() {
                scaler.std[j] = s;
            } else {
                log::warn!("feature {} is constant; standardized to zero", FEATURE_NAMES[j]);
                scaler.std[j] = 1.0;
                scaler.degenerate[j] = true;
            }
        }
        Ok(scaler)
    }

    pub fn degenerate_features(&self) -> Vec<&'static str> {
        (0..NUM_FEATURES)
            .filter(|&j| self.degenerate[j])
            .map(|j| FEATURE_NAMES[j])
            .collect()
    }

    pub fn transform(&self, x: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        let mut out = [0.0; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            out[j] = if self.degenerate[j] {
                0.0
            } else {
                (x[j] - self.mean[j]) / self.std[j]
            };
        }
        out
    }

    pub fn inverse(&self, z: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        let mut out = [0.0; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            out[j] = if self.degenerate[j] {
                self.mean[j]
            } else {
                z[j] * self.std[j] + self.mean[j]
            };
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub points: Vec<LabeledPoint>,
    /// Present iff `points` hold standardized features.
    pub scaler: Option<Scaler>,
}

impl Dataset {
    pub fn new(points: Vec<LabeledPoint>) -> Self {
        Dataset {
            points,
            scaler: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature_rows(&self) -> Vec<[f64; NUM_FEATURES]> {
        self.points.iter().map(|p| p.features.to_array()).collect()
    }

    pub fn labels_at(&self, threshold: f64) -> Vec<bool> {
        self.points
            .iter()
            .map(|p| label_is_positive(p.label_value, threshold))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
            scaler: self.scaler,
        }
    }

    /// Raw points only; fitting on standardized points would double-scale.
    pub fn fit_scaler(&self) -> Result<Scaler, FeatureError> {
        Scaler::fit(&self.feature_rows())
    }

    pub fn standardized(&self, scaler: &Scaler) -> Dataset {
        let points = self
            .points
            .iter()
            .map(|p| LabeledPoint {
                features: FeatureVector::from_array(scaler.transform(&p.features.to_array())),
                ..p.clone()
            })
            .collect();
        Dataset {
            points,
            scaler: Some(*scaler),
        }
    }

    /// `symbol,date,f1..f7,label`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("symbol,date,f1,f2,f3,f4,f5,f6,f7,label\n");
        for p in &self.points {
            let _ = write!(out, "{},{}", p.symbol, p.date.format("%Y-%m-%d"));
            for v in p.features.to_array() {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", p.label_value);
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Dataset, FeatureError> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "symbol,date,f1,f2,f3,f4,f5,f6,f7,label" {
                    return Err(FeatureError::Malformed {
                        line: 1,
                        reason: "unexpected header".into(),
                    });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| FeatureError::Malformed {
                line: i + 1,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 + NUM_FEATURES {
                return Err(bad("expected 10 fields"));
            }
            let date = NaiveDate::parse_from_str(fields[1], "%Y-%m-%d").map_err(|_| bad("bad date"))?;
            let mut f = [0.0; NUM_FEATURES];
            for (j, slot) in f.iter_mut().enumerate() {
                *slot = fields[2 + j].parse().map_err(|_| bad("bad feature value"))?;
            }
            let label_value = fields[2 + NUM_FEATURES]
                .parse()
                .map_err(|_| bad("bad label"))?;
            points.push(LabeledPoint {
                symbol: fields[0].to_string(),
                date,
                features: FeatureVector::from_array(f),
                label_value,
            });
        }
        Ok(Dataset::new(points))
    }
}

pub fn label_is_positive(label_value: f64, threshold: f64) -> bool {
    label_value >= threshold - GAIN_EPSILON
}

/// Features for day `t` of every series with enough history that passes the
/// prefilter. Series without 21 bars before `t` are skipped silently.
pub fn features_for_day(
    series_set: &[StockSeries],
    t: NaiveDate,
    prefilter: &Prefilter,
) -> BTreeMap<String, FeatureVector> {
    series_set
        .iter()
        .filter_map(|s| {
            let history = s.history_before(t);
            (history.len() >= HISTORY_DAYS && prefilter.passes(history))
                .then(|| (s.symbol.clone(), features_from_history(history)))
        })
        .collect()
}

/// One point per (stock, trading day) with enough history that passes the prefilter.
/// Points are ordered by series, then date.
pub fn build_dataset(
    series_set: &[StockSeries],
    calendar: &Calendar,
    prefilter: &Prefilter,
) -> Result<Dataset, FeatureError> {
    let mut points = Vec::new();
    for series in series_set {
        let bars = series.bars();
        for i in HISTORY_DAYS..bars.len() {
            let today = bars[i];
            if !calendar.contains(today.date) {
                continue;
            }
            let history = &bars[..i];
            if !prefilter.passes(history) {
                continue;
            }
            points.push(LabeledPoint {
                symbol: series.symbol.clone(),
                date: today.date,
                features: features_from_history(history),
                label_value: today.high / today.open - 1.0,
            });
        }
    }
    if points.is_empty() {
        return Err(FeatureError::EmptyDataset);
    }
    Ok(Dataset::new(points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::build_calendar;

    fn day(i: u64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2022, 1, 3).unwrap() + chrono::Days::new(i)
    }

    fn constant(n: usize, p: f64, v: u64) -> StockSeries {
        let bars = (0..n as u64)
            .map(|i| Bar::new(day(i), p, p, p, p, v).unwrap())
            .collect();
        StockSeries::new("C", bars).unwrap()
    }

    #[test]
    fn constant_series_degenerates_exactly() {
        for p in [0.1, 3.7, 101.33] {
            let s = constant(22, p, 500);
            let f = extract_features(&s, day(21)).unwrap();
            assert_eq!(f.to_array(), [0.0, 0.0, p, p, p, 0.0, 500.0]);
        }
    }

    #[test]
    fn needs_21_prior_days() {
        let s = constant(22, 5.0, 1);
        assert!(extract_features(&s, day(21)).is_ok());
        assert!(matches!(
            extract_features(&s, day(20)),
            Err(FeatureError::InsufficientHistory { available: 20, .. })
        ));
        // t need not be a bar of the series
        assert!(extract_features(&s, day(40)).is_ok());
    }

    #[test]
    fn labels() {
        let bar = |o: f64, h: f64| {
            StockSeries::new("X", vec![Bar::new(day(0), o, h, o, o, 1).unwrap()]).unwrap()
        };
        assert!((label_point(&bar(100.0, 102.6), day(0)).unwrap() - 0.026).abs() < 1e-12);
        assert_eq!(label_point(&bar(100.0, 100.0), day(0)).unwrap(), 0.0);
        assert!((label_point(&bar(50.0, 51.3), day(0)).unwrap() - 0.026).abs() < 1e-12);
        assert!(matches!(
            label_point(&bar(1.0, 1.0), day(1)),
            Err(FeatureError::MissingDay { .. })
        ));
    }

    #[test]
    fn scaled_prices_scale_only_moving_averages() {
        let m = crate::synthetic::SyntheticMarket::generate(&Default::default());
        let s = &m.series[0];
        let scaled_bars = s
            .bars()
            .iter()
            .map(|b| Bar { open: b.open * 3.0, high: b.high * 3.0, low: b.low * 3.0, close: b.close * 3.0, ..*b })
            .collect();
        let scaled = StockSeries::new(s.symbol.clone(), scaled_bars).unwrap();
        let t = s.bars()[30].date;
        let a = extract_features(s, t).unwrap();
        let b = extract_features(&scaled, t).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(1.0);
        assert!(close(a.hl_rel, b.hl_rel) && close(a.co_rel, b.co_rel) && close(a.vol7_rel, b.vol7_rel));
        assert_eq!(a.volume_prev, b.volume_prev);
        assert!(close(a.ma7 * 3.0, b.ma7) && close(a.ma14 * 3.0, b.ma14) && close(a.ma21 * 3.0, b.ma21));
    }

    fn series_with_gains(gains: &[f64]) -> StockSeries {
        let bars = gains
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let close = 100.0 * (1.0 + g);
                Bar::new(day(i as u64), 100.0, close.max(101.0), 99.0, close, 10).unwrap()
            })
            .collect();
        StockSeries::new("G", bars).unwrap()
    }

    #[test]
    fn prefilter_counts() {
        // 50 prediction days (indices 21..71); exactly three have a >= 10% prior-day gain
        let mut gains = vec![0.0; 71];
        for i in [25, 40, 62] {
            gains[i] = 0.10;
        }
        gains[30] = 0.099;
        let s = series_with_gains(&gains);
        let cal = build_calendar(std::slice::from_ref(&s), 1.0).unwrap();
        let all = build_dataset(std::slice::from_ref(&s), &cal, &Prefilter::disabled()).unwrap();
        assert_eq!(all.len(), 50);
        let ds = build_dataset(std::slice::from_ref(&s), &cal, &Prefilter::default()).unwrap();
        assert_eq!(ds.len(), 3);
        let dates: Vec<_> = ds.points.iter().map(|p| p.date).collect();
        assert_eq!(dates, vec![day(26), day(41), day(63)]);

        let flat = series_with_gains(&[0.0; 40]);
        let cal = build_calendar(std::slice::from_ref(&flat), 1.0).unwrap();
        assert_eq!(
            build_dataset(&[flat], &cal, &Prefilter::default()),
            Err(FeatureError::EmptyDataset)
        );
    }

    #[test]
    fn close_to_close_prefilter() {
        let mut gains = vec![0.0; 30];
        gains[24] = 0.12;
        let s = series_with_gains(&gains);
        let rule = Prefilter { min_gain: 0.10, rule: PrefilterRule::CloseToClose };
        let cal = build_calendar(std::slice::from_ref(&s), 1.0).unwrap();
        let ds = build_dataset(std::slice::from_ref(&s), &cal, &rule).unwrap();
        assert_eq!(ds.points.iter().map(|p| p.date).collect::<Vec<_>>(), vec![day(25)]);
    }

    #[test]
    fn scaler_cases() {
        let one = Scaler::fit(&[[1.0; NUM_FEATURES]]).unwrap();
        assert_eq!(one.degenerate, [true; NUM_FEATURES]);
        assert_eq!(one.transform(&[5.0; NUM_FEATURES]), [0.0; NUM_FEATURES]);

        let rows = [[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], [3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]];
        let s = Scaler::fit(&rows).unwrap();
        assert_eq!(s.transform(&rows[0]), [-1.0; NUM_FEATURES]);
        assert_eq!(s.transform(&rows[1]), [1.0; NUM_FEATURES]);
        assert!(Scaler::fit(&[]).is_err());
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let m = crate::synthetic::SyntheticMarket::generate(&Default::default());
        let cal = build_calendar(&m.series, 0.5).unwrap();
        let ds = build_dataset(&m.series, &cal, &Prefilter::disabled()).unwrap();
        assert_eq!(Dataset::parse_csv(&ds.to_csv()).unwrap(), ds);
    }
}

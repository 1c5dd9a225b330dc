//! Seeded synthetic market used by tests, the CLI's offline mode and the demo.
//!
//! Prices follow a lognormal random walk on weekdays (minus a few fixed holidays).
//! Occasionally a stock jumps by 10–22% open-to-close. Jump days come with either
//! heavy or normal volume; after a heavy-volume jump the next day's intraday upside
//! is large, after a normal-volume jump it is small. That gives the prefiltered
//! dataset a learnable relation between features and label.

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::marketdata::{Bar, StockSeries, Universe};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub symbols: usize,
    /// Calendar days spanned, weekends and holidays included.
    pub days: usize,
    pub start: NaiveDate,
    pub seed: u64,
    /// Probability that a given stock jumps on a given day.
    pub jump_probability: f64,
    /// Share of jump days that carry heavy volume (and a strong follow-through).
    pub heavy_share: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            symbols: 20,
            days: 120,
            start: NaiveDate::from_ymd_opt(2021, 1, 4).unwrap(),
            seed: 7,
            jump_probability: 0.08,
            heavy_share: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMarket {
    pub series: Vec<StockSeries>,
    pub universe: Universe,
}

pub fn is_market_day(date: NaiveDate) -> bool {
    if matches!(date.weekday(), Weekday::Sat | Weekday::Sun) {
        return false;
    }
    !matches!((date.month(), date.day()), (1, 1) | (7, 4) | (12, 25))
}

impl SyntheticMarket {
    pub fn generate(params: &SyntheticParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let dates: Vec<NaiveDate> = (0..params.days as u64)
            .map(|i| params.start + chrono::Days::new(i))
            .filter(|d| is_market_day(*d))
            .collect();
        let open_gap: Normal<f64> = Normal::new(0.0, 0.005).unwrap();
        let drift: Normal<f64> = Normal::new(0.0003, 0.015).unwrap();
        let wick: Normal<f64> = Normal::new(0.0, 0.008).unwrap();
        let vol_noise = Normal::new(0.0, 0.3).unwrap();

        let mut series = Vec::with_capacity(params.symbols);
        let mut universe = Vec::with_capacity(params.symbols);
        for s in 0..params.symbols {
            let symbol = format!("SYM{s:03}");
            let mut close = rng.random_range(10.0..200.0_f64);
            let base_volume = rng.random_range(2.0e5..5.0e6_f64);
            let mut follow: Option<bool> = None;
            let mut bars = Vec::with_capacity(dates.len());
            for &date in &dates {
                let open = close * f64::exp(open_gap.sample(&mut rng));
                let mut volume = base_volume * f64::exp(vol_noise.sample(&mut rng));
                let (high, low, new_close);
                if let Some(heavy) = follow.take() {
                    let upside = if heavy {
                        rng.random_range(0.03..0.10)
                    } else {
                        rng.random_range(0.0..0.02)
                    };
                    high = open * (1.0 + upside);
                    new_close = rng.random_range(open * 0.97..=high);
                    low = open.min(new_close) * (1.0 - wick.sample(&mut rng).abs());
                } else if rng.random_bool(params.jump_probability) {
                    let heavy = rng.random_bool(params.heavy_share);
                    if heavy {
                        volume *= 3.0;
                    }
                    new_close = open * (1.0 + rng.random_range(0.10..0.22));
                    high = new_close * (1.0 + wick.sample(&mut rng).abs() * 0.5);
                    low = open * (1.0 - wick.sample(&mut rng).abs() * 0.5);
                    follow = Some(heavy);
                } else {
                    new_close = open * f64::exp(drift.sample(&mut rng));
                    high = open.max(new_close) * (1.0 + wick.sample(&mut rng).abs());
                    low = open.min(new_close) * (1.0 - wick.sample(&mut rng).abs());
                }
                let bar = Bar::new(
                    date,
                    round_cents(open),
                    round_cents(high).max(round_cents(open)).max(round_cents(new_close)),
                    round_cents(low).min(round_cents(open)).min(round_cents(new_close)),
                    round_cents(new_close),
                    volume.round() as u64,
                )
                .expect("generated bar is valid");
                close = bar.close;
                bars.push(bar);
            }
            // keep 80% of the universe above the 2B cap filter
            let cap = if s % 5 == 4 { 1.0e9 } else { 2.5e9 + s as f64 * 1.0e8 };
            universe.push((symbol.clone(), cap));
            series.push(StockSeries::new(symbol, bars).expect("dates ascend"));
        }
        SyntheticMarket {
            series,
            universe: Universe::new(universe).expect("unique symbols"),
        }
    }

    pub fn last_date(&self) -> NaiveDate {
        self.series
            .iter()
            .filter_map(|s| s.bars().last().map(|b| b.date))
            .max()
            .expect("non-empty market")
    }

    pub fn first_date(&self) -> NaiveDate {
        self.series
            .iter()
            .filter_map(|s| s.bars().first().map(|b| b.date))
            .min()
            .expect("non-empty market")
    }
}

fn round_cents(p: f64) -> f64 {
    ((p * 100.0).round() / 100.0).max(0.01)
}

/// Copy of `series` without the bars on `dates`.
pub fn remove_days(series: &StockSeries, dates: &[NaiveDate]) -> StockSeries {
    let bars = series
        .bars()
        .iter()
        .filter(|b| !dates.contains(&b.date))
        .copied()
        .collect();
    StockSeries::new(series.symbol.clone(), bars).expect("subset of a valid series")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let p = SyntheticParams::default();
        let a = SyntheticMarket::generate(&p);
        let b = SyntheticMarket::generate(&p);
        assert_eq!(a, b);
        assert_eq!(a.series.len(), 20);
        assert!(a.series.iter().all(|s| s.len() > 80));
        for s in &a.series {
            for bar in s.bars() {
                bar.validate().unwrap();
                assert!(is_market_day(bar.date));
            }
        }
    }
}

//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export is deterministic in its seed and returns plain numbers, so the page
//! only has to draw them.

use chrono::NaiveDate;
use wasm_bindgen::prelude::*;

use knntrade_core::backtest::{run_backtest, BacktestConfig, FillPolicy};
use knntrade_core::features::{build_dataset, Prefilter};
use knntrade_core::knn::{default_thresholds, loocv, train_ensemble, training_set_eval};
use knntrade_core::marketdata::build_calendar;
use knntrade_core::synthetic::{SyntheticMarket, SyntheticParams};
use knntrade_core::tuning::{pso_minimize, Budget, PsoConfig, SearchSpace};
use knntrade_core::StockSeries;

fn market(seed: u32, symbols: usize, days: usize) -> SyntheticMarket {
    SyntheticMarket::generate(&SyntheticParams {
        symbols,
        days,
        start: NaiveDate::from_ymd_opt(2021, 1, 4).expect("valid date"),
        seed: seed as u64,
        ..SyntheticParams::default()
    })
}

/// Best-so-far objective per PSO iteration on the 2-d Rastrigin function.
#[wasm_bindgen]
pub fn pso_trace(seed: u32, particles: usize, iterations: usize) -> Result<Vec<f64>, JsError> {
    let rastrigin = |x: &[f64]| {
        20.0 + x
            .iter()
            .map(|v| v * v - 10.0 * (2.0 * std::f64::consts::PI * v).cos())
            .sum::<f64>()
    };
    let space = SearchSpace::cube(2, -5.12, 5.12)?;
    let config = PsoConfig {
        particles,
        iterations,
        seed: seed as u64,
        ..PsoConfig::default()
    };
    let result = pso_minimize(rastrigin, &space, &config, &Budget::unlimited())?;
    Ok(result.trace.iter().map(|t| t.best_value).collect())
}

/// Accuracy on the training set and under leave-one-out for k = 1..=max_k, as
/// `[train_1, loocv_1, train_2, loocv_2, ...]`.
#[wasm_bindgen]
pub fn validation_curve(seed: u32, threshold: f64, max_k: usize) -> Result<Vec<f64>, JsError> {
    let m = market(seed, 12, 200);
    let calendar = build_calendar(&m.series, 0.5)?;
    let ds = build_dataset(&m.series, &calendar, &Prefilter::disabled())?;
    let mut out = Vec::with_capacity(2 * max_k);
    for k in 1..=max_k {
        out.push(training_set_eval(&ds, k, threshold)?.accuracy().unwrap_or(f64::NAN));
        out.push(loocv(&ds, k, threshold)?.accuracy().unwrap_or(f64::NAN));
    }
    Ok(out)
}

/// Trains on the first half of a synthetic market and replays the second half.
/// Returns the pessimistic equity curve followed by the optimistic one.
#[wasm_bindgen]
pub fn backtest_equity(seed: u32, symbols: usize, k: usize, min_gain: f64) -> Result<Vec<f64>, JsError> {
    let m = market(seed, symbols, 300);
    let calendar = build_calendar(&m.series, 0.5)?;
    let days = calendar.trading_days();
    let split = days.len() / 2;
    let history: Vec<StockSeries> = m.series.iter().map(|s| s.slice_dates(days[0], days[split - 1])).collect();
    let prefilter = Prefilter {
        min_gain,
        ..Prefilter::default()
    };
    let ds = build_dataset(&history, &calendar, &prefilter)?;
    let ensemble = train_ensemble(&ds, &default_thresholds(), &[k], 1)?;
    let mut out = Vec::new();
    for policy in [FillPolicy::Pessimistic, FillPolicy::Optimistic] {
        let config = BacktestConfig {
            policy,
            prefilter,
            ..BacktestConfig::default()
        };
        let report = run_backtest(&m.series, &calendar, &ensemble, (days[split], days[days.len() - 1]), &config)?;
        out.extend(report.equity_curve.iter().map(|(_, c)| *c));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exports_return_data() {
        let trace = pso_trace(1, 12, 30).unwrap();
        assert_eq!(trace.len(), 31);
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));

        let curve = validation_curve(3, 0.016, 4).unwrap();
        assert_eq!(curve.len(), 8);
        assert_eq!(curve[0], 1.0);

        let equity = backtest_equity(5, 8, 5, 0.0).unwrap();
        assert_eq!(equity.len() % 2, 0);
        assert!(equity.iter().all(|c| c.is_finite() && *c > 0.0));
    }
}

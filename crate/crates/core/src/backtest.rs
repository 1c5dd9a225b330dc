//! Profit simulation: replay historical days through the ensemble and the trading
//! rules, filling bracket orders against daily bars.
//!
//! A bracket buys at the open and exits at the first of take-profit, stop-loss or
//! the close. Daily bars cannot tell which of take-profit and stop-loss was touched
//! first when both were, so a [`FillPolicy`] decides.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use chrono::NaiveDate;
use thiserror::Error;

use crate::features::{features_for_day, Prefilter, HISTORY_DAYS};
use crate::knn::{ensemble_rank, EnsembleModel, RankedPrediction};
use crate::marketdata::{Bar, Calendar, StockSeries};

pub const DEFAULT_TOP_N: usize = 5;
pub const DEFAULT_STOP_LOSS_FRAC: f64 = 0.02;
pub const DEFAULT_CAPITAL: f64 = 10_000.0;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("bar {bar_date} does not match plan for {symbol} on {plan_date} at open {entry}")]
    BarMismatch {
        symbol: String,
        plan_date: NaiveDate,
        bar_date: NaiveDate,
        entry: f64,
    },
    #[error("{date} has {available} trading days of history, need {HISTORY_DAYS}")]
    InsufficientHistory { date: NaiveDate, available: usize },
    #[error("no trading days in {0}..{1}")]
    EmptyRange(NaiveDate, NaiveDate),
    #[error("invalid backtest configuration: {0}")]
    InvalidConfig(String),
    #[error("{file} line {line}: {reason}")]
    Malformed { file: &'static str, line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FillPolicy {
    /// Both touched resolves to the stop-loss.
    #[default]
    Pessimistic,
    Optimistic,
}

impl FillPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            FillPolicy::Pessimistic => "pessimistic",
            FillPolicy::Optimistic => "optimistic",
        }
    }
}

impl std::str::FromStr for FillPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pessimistic" => Ok(FillPolicy::Pessimistic),
            "optimistic" => Ok(FillPolicy::Optimistic),
            other => Err(format!("unknown fill policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitReason {
    TakeProfit,
    StopLoss,
    Close,
}

impl ExitReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitReason::TakeProfit => "take_profit",
            ExitReason::StopLoss => "stop_loss",
            ExitReason::Close => "close",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "take_profit" => Some(ExitReason::TakeProfit),
            "stop_loss" => Some(ExitReason::StopLoss),
            "close" => Some(ExitReason::Close),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradePlan {
    pub date: NaiveDate,
    pub symbol: String,
    pub entry_price: f64,
    pub quantity: u64,
    pub take_profit_price: f64,
    pub stop_loss_price: f64,
    /// Ensemble score that set the take-profit.
    pub score: f64,
    pub stop_loss_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeResult {
    pub plan: TradePlan,
    pub exit_price: f64,
    pub exit_reason: ExitReason,
    pub pnl: f64,
    pub return_fraction: f64,
}

/// Resolves one bracket order against the bar of its day.
pub fn fill(plan: &TradePlan, bar: &Bar, policy: FillPolicy, fee: f64) -> Result<TradeResult, BacktestError> {
    if bar.date != plan.date || bar.open != plan.entry_price {
        return Err(BacktestError::BarMismatch {
            symbol: plan.symbol.clone(),
            plan_date: plan.date,
            bar_date: bar.date,
            entry: plan.entry_price,
        });
    }
    let tp_hit = bar.high >= plan.take_profit_price;
    let sl_hit = bar.low <= plan.stop_loss_price;
    let reason = match (tp_hit, sl_hit) {
        (true, true) => match policy {
            FillPolicy::Pessimistic => ExitReason::StopLoss,
            FillPolicy::Optimistic => ExitReason::TakeProfit,
        },
        (true, false) => ExitReason::TakeProfit,
        (false, true) => ExitReason::StopLoss,
        (false, false) => ExitReason::Close,
    };
    let (exit_price, return_fraction) = match reason {
        ExitReason::TakeProfit => (plan.take_profit_price, plan.score),
        ExitReason::StopLoss => (plan.stop_loss_price, -plan.stop_loss_frac),
        ExitReason::Close => (
            bar.close,
            (bar.close / plan.entry_price - 1.0).clamp(-plan.stop_loss_frac, plan.score),
        ),
    };
    Ok(TradeResult {
        exit_price,
        exit_reason: reason,
        pnl: plan.quantity as f64 * (exit_price - plan.entry_price) - fee,
        return_fraction,
        plan: plan.clone(),
    })
}

/// Equal split of `capital` over the first `top_n` ranked symbols with a positive
/// score. Symbols without an open price or affordable share are skipped and their
/// allocation stays in cash.
pub fn plan_trades(
    date: NaiveDate,
    ranked: &[RankedPrediction],
    bars_open: &BTreeMap<String, f64>,
    capital: f64,
    top_n: usize,
    stop_loss_frac: f64,
) -> Vec<TradePlan> {
    if top_n == 0 || !(capital > 0.0) {
        return Vec::new();
    }
    let allocation = capital / top_n as f64;
    ranked
        .iter()
        .filter(|r| r.score > 0.0)
        .take(top_n)
        .filter_map(|r| {
            let open = *bars_open.get(&r.symbol)?;
            let quantity = (allocation / open).floor() as u64;
            (quantity >= 1).then(|| TradePlan {
                date,
                symbol: r.symbol.clone(),
                entry_price: open,
                quantity,
                take_profit_price: open * (1.0 + r.score),
                stop_loss_price: open * (1.0 - stop_loss_frac),
                score: r.score,
                stop_loss_frac,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestConfig {
    pub top_n: usize,
    pub stop_loss_frac: f64,
    pub capital: f64,
    pub policy: FillPolicy,
    /// Flat fee charged per trade.
    pub fee: f64,
    pub prefilter: Prefilter,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            top_n: DEFAULT_TOP_N,
            stop_loss_frac: DEFAULT_STOP_LOSS_FRAC,
            capital: DEFAULT_CAPITAL,
            policy: FillPolicy::Pessimistic,
            fee: 0.0,
            prefilter: Prefilter::default(),
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<(), BacktestError> {
        if self.top_n == 0 {
            return Err(BacktestError::InvalidConfig("top_n must be at least 1".into()));
        }
        if !(self.capital > 0.0) {
            return Err(BacktestError::InvalidConfig("capital must be positive".into()));
        }
        if !(self.stop_loss_frac > 0.0 && self.stop_loss_frac < 1.0) {
            return Err(BacktestError::InvalidConfig("stop_loss_frac must lie in (0, 1)".into()));
        }
        if self.fee < 0.0 {
            return Err(BacktestError::InvalidConfig("fee must not be negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub initial_capital: f64,
    /// Capital at the end of each simulated day.
    pub equity_curve: Vec<(NaiveDate, f64)>,
    pub trades: Vec<TradeResult>,
    pub policy: FillPolicy,
}

impl BacktestReport {
    pub fn final_capital(&self) -> f64 {
        self.equity_curve.last().map_or(self.initial_capital, |e| e.1)
    }

    pub fn total_return(&self) -> f64 {
        self.final_capital() / self.initial_capital - 1.0
    }

    pub fn total_pnl(&self) -> f64 {
        self.trades.iter().map(|t| t.pnl).sum()
    }

    /// Fraction of trades with positive pnl; undefined without trades.
    pub fn realized_precision(&self) -> Option<f64> {
        (!self.trades.is_empty())
            .then(|| self.trades.iter().filter(|t| t.pnl > 0.0).count() as f64 / self.trades.len() as f64)
    }

    /// Largest peak-to-trough loss as a fraction of the peak.
    pub fn max_drawdown(&self) -> f64 {
        let mut peak = self.initial_capital;
        let mut worst: f64 = 0.0;
        for &(_, c) in &self.equity_curve {
            peak = peak.max(c);
            worst = worst.max((peak - c) / peak);
        }
        worst
    }

    pub fn trades_csv(&self) -> String {
        let mut out = String::from("date,symbol,entry,exit,reason,pnl\n");
        for t in &self.trades {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                t.plan.date,
                t.plan.symbol,
                t.plan.entry_price,
                t.exit_price,
                t.exit_reason.as_str(),
                t.pnl
            );
        }
        out
    }

    pub fn equity_csv(&self) -> String {
        let mut out = String::from("date,capital\n");
        for (d, c) in &self.equity_curve {
            let _ = writeln!(out, "{d},{c}");
        }
        out
    }

    pub fn summary(&self) -> String {
        let precision = self
            .realized_precision()
            .map_or("undefined".to_string(), |p| format!("{:.2}%", p * 100.0));
        let count = |r: ExitReason| self.trades.iter().filter(|t| t.exit_reason == r).count();
        format!(
            "policy {}\ndays {}\ntrades {} (take_profit {}, stop_loss {}, close {})\n\
             initial capital {:.2}\nfinal capital {:.2}\ntotal return {:.4}%\n\
             realized precision {}\nmax drawdown {:.4}%\n",
            self.policy.as_str(),
            self.equity_curve.len(),
            self.trades.len(),
            count(ExitReason::TakeProfit),
            count(ExitReason::StopLoss),
            count(ExitReason::Close),
            self.initial_capital,
            self.final_capital(),
            self.total_return() * 100.0,
            precision,
            self.max_drawdown() * 100.0
        )
    }
}

/// Row of a trades CSV as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeRow {
    pub date: NaiveDate,
    pub symbol: String,
    pub entry: f64,
    pub exit: f64,
    pub reason: ExitReason,
    pub pnl: f64,
}

fn malformed(file: &'static str, line: usize, reason: impl Into<String>) -> BacktestError {
    BacktestError::Malformed {
        file,
        line,
        reason: reason.into(),
    }
}

pub fn parse_trades_csv(text: &str) -> Result<Vec<TradeRow>, BacktestError> {
    let mut lines = text.lines();
    if lines.next() != Some("date,symbol,entry,exit,reason,pnl") {
        return Err(malformed("trades", 1, "bad header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| malformed("trades", i + 2, what.to_string());
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            Ok(TradeRow {
                date: f[0].parse().map_err(|_| bad("bad date"))?,
                symbol: f[1].to_string(),
                entry: f[2].parse().map_err(|_| bad("bad entry"))?,
                exit: f[3].parse().map_err(|_| bad("bad exit"))?,
                reason: ExitReason::parse(f[4]).ok_or_else(|| bad("bad reason"))?,
                pnl: f[5].parse().map_err(|_| bad("bad pnl"))?,
            })
        })
        .collect()
}

pub fn parse_equity_csv(text: &str) -> Result<Vec<(NaiveDate, f64)>, BacktestError> {
    let mut lines = text.lines();
    if lines.next() != Some("date,capital") {
        return Err(malformed("equity", 1, "bad header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let (d, c) = line.split_once(',').ok_or_else(|| malformed("equity", i + 2, "expected 2 fields"))?;
            Ok((
                d.parse().map_err(|_| malformed("equity", i + 2, "bad date"))?,
                c.parse().map_err(|_| malformed("equity", i + 2, "bad capital"))?,
            ))
        })
        .collect()
}

/// Replays every calendar day in `range`: rank eligible symbols, plan, fill, and
/// carry the capital forward.
pub fn run_backtest(
    series_set: &[StockSeries],
    calendar: &Calendar,
    ensemble: &EnsembleModel,
    range: (NaiveDate, NaiveDate),
    config: &BacktestConfig,
) -> Result<BacktestReport, BacktestError> {
    config.validate()?;
    let days = calendar.days_between(range.0, range.1);
    let first = *days.first().ok_or(BacktestError::EmptyRange(range.0, range.1))?;
    let available = calendar.index_of(first).expect("day from calendar");
    if available < HISTORY_DAYS {
        return Err(BacktestError::InsufficientHistory { date: first, available });
    }
    let mut capital = config.capital;
    let mut equity_curve = Vec::with_capacity(days.len());
    let mut trades = Vec::new();
    for &day in days {
        let tradable: Vec<StockSeries> = series_set
            .iter()
            .filter(|s| s.bar_on(day).is_some())
            .cloned()
            .collect();
        let features = features_for_day(&tradable, day, &config.prefilter);
        let ranked = ensemble_rank(ensemble, &features);
        let opens: BTreeMap<String, f64> = tradable
            .iter()
            .filter_map(|s| s.bar_on(day).map(|b| (s.symbol.clone(), b.open)))
            .collect();
        let plans = plan_trades(day, &ranked, &opens, capital, config.top_n, config.stop_loss_frac);
        let bars: BTreeMap<&str, &Bar> = tradable
            .iter()
            .filter_map(|s| s.bar_on(day).map(|b| (s.symbol.as_str(), b)))
            .collect();
        for plan in &plans {
            let result = fill(plan, bars[plan.symbol.as_str()], config.policy, config.fee)?;
            capital += result.pnl;
            trades.push(result);
        }
        equity_curve.push((day, capital));
    }
    Ok(BacktestReport {
        initial_capital: config.capital,
        equity_curve,
        trades,
        policy: config.policy,
    })
}

impl fmt::Display for BacktestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.summary())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::Prediction;

    fn d() -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 3, 1).unwrap()
    }

    fn plan() -> TradePlan {
        TradePlan {
            date: d(),
            symbol: "A".into(),
            entry_price: 100.0,
            quantity: 10,
            take_profit_price: 102.0,
            stop_loss_price: 98.0,
            score: 0.02,
            stop_loss_frac: 0.02,
        }
    }

    fn bar(h: f64, l: f64, c: f64) -> Bar {
        Bar::new(d(), 100.0, h, l, c, 1000).unwrap()
    }

    #[test]
    fn fill_cases() {
        let r = fill(&plan(), &bar(103.0, 99.0, 101.0), FillPolicy::Pessimistic, 0.0).unwrap();
        assert_eq!((r.exit_price, r.exit_reason), (102.0, ExitReason::TakeProfit));
        assert_eq!(r.pnl, 20.0);
        let r = fill(&plan(), &bar(101.0, 99.0, 100.5), FillPolicy::Pessimistic, 0.0).unwrap();
        assert_eq!((r.exit_price, r.exit_reason), (100.5, ExitReason::Close));
        let both = bar(103.0, 97.0, 100.0);
        let r = fill(&plan(), &both, FillPolicy::Pessimistic, 0.0).unwrap();
        assert_eq!((r.exit_price, r.exit_reason), (98.0, ExitReason::StopLoss));
        let r = fill(&plan(), &both, FillPolicy::Optimistic, 0.0).unwrap();
        assert_eq!((r.exit_price, r.exit_reason), (102.0, ExitReason::TakeProfit));
        let wrong = Bar::new(d(), 99.0, 103.0, 97.0, 100.0, 1).unwrap();
        assert!(matches!(fill(&plan(), &wrong, FillPolicy::Pessimistic, 0.0), Err(BacktestError::BarMismatch { .. })));
    }

    fn ranked(symbol: &str, score: f64) -> RankedPrediction {
        RankedPrediction {
            symbol: symbol.into(),
            score,
            vote_fraction: 1.0,
            outputs: vec![Prediction { positive: score > 0.0, vote_fraction: 1.0 }],
            features: Default::default(),
        }
    }

    #[test]
    fn planning() {
        let syms = ["A", "B", "C", "D", "E", "F"];
        let opens: BTreeMap<String, f64> = syms.iter().map(|s| (s.to_string(), 100.0)).collect();
        let all: Vec<_> = syms.iter().map(|s| ranked(s, 0.016)).collect();
        let plans = plan_trades(d(), &all, &opens, 10_000.0, 5, 0.02);
        assert_eq!(plans.len(), 5);
        assert!(plans.iter().all(|p| p.quantity == 20));
        assert!((plans[0].take_profit_price - 101.6).abs() < 1e-9);
        assert!(plans[0].stop_loss_price < plans[0].entry_price);

        let two = vec![ranked("A", 0.016), ranked("B", 0.011), ranked("C", 0.0)];
        assert_eq!(plan_trades(d(), &two, &opens, 10_000.0, 5, 0.02).len(), 2);

        let mut pricey = opens.clone();
        pricey.insert("A".into(), 5_000.0);
        let plans = plan_trades(d(), &all, &pricey, 10_000.0, 5, 0.02);
        assert_eq!(plans.len(), 4);
        assert_eq!(plans[0].symbol, "B");
    }

    #[test]
    fn report_csv_roundtrip() {
        let t = fill(&plan(), &bar(103.0, 99.0, 101.0), FillPolicy::Pessimistic, 0.0).unwrap();
        let report = BacktestReport {
            initial_capital: 1000.0,
            equity_curve: vec![(d(), 1020.0)],
            trades: vec![t],
            policy: FillPolicy::Pessimistic,
        };
        let rows = parse_trades_csv(&report.trades_csv()).unwrap();
        assert_eq!(rows[0].reason, ExitReason::TakeProfit);
        assert_eq!(rows[0].pnl, 20.0);
        assert_eq!(parse_equity_csv(&report.equity_csv()).unwrap(), report.equity_curve);
        assert_eq!(report.realized_precision(), Some(1.0));
        assert!(report.summary().contains("trades 1"));
    }
}

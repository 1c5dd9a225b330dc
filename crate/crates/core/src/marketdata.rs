//! Daily OHLCV bars, per-stock series and the cross-stock trading calendar.
//!
//! Bars are persisted one file per stock in a plain CSV format:
//!
//! ```text
//! date,open,high,low,close,volume
//! 2022-03-01,10,12,9,11,1000
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use chrono::NaiveDate;
use thiserror::Error;

pub const CSV_HEADER: &str = "date,open,high,low,close,volume";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketDataError {
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("missing or unexpected header, expected `{CSV_HEADER}`")]
    BadHeader,
    #[error("fragment for `{found}` does not belong to series `{expected}`")]
    SymbolMismatch { expected: String, found: String },
    #[error("conflicting duplicate bars for {symbol} on {date}")]
    ConflictingDuplicate { symbol: String, date: NaiveDate },
    #[error("no fragments to merge")]
    NoFragments,
    #[error("invalid bar on {date}: {reason}")]
    InvalidBar { date: NaiveDate, reason: String },
    #[error("bars are not strictly ascending at {date}")]
    Unordered { date: NaiveDate },
    #[error("duplicate symbol `{0}` in universe")]
    DuplicateSymbol(String),
    #[error("quorum must lie in (0, 1], got {0}")]
    InvalidQuorum(f64),
}

/// One trading day of OHLCV data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: u64,
}

impl Bar {
    pub fn new(
        date: NaiveDate,
        open: f64,
        high: f64,
        low: f64,
        close: f64,
        volume: u64,
    ) -> Result<Self, MarketDataError> {
        let bar = Bar {
            date,
            open,
            high,
            low,
            close,
            volume,
        };
        bar.validate()?;
        Ok(bar)
    }

    pub fn validate(&self) -> Result<(), MarketDataError> {
        let invalid = |reason: &str| MarketDataError::InvalidBar {
            date: self.date,
            reason: reason.to_string(),
        };
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(invalid("prices must be finite and strictly positive"));
        }
        if self.low > self.high {
            return Err(invalid("low above high"));
        }
        if self.open < self.low || self.open > self.high {
            return Err(invalid("open outside [low, high]"));
        }
        if self.close < self.low || self.close > self.high {
            return Err(invalid("close outside [low, high]"));
        }
        Ok(())
    }

    /// Bars compare equal on every field, prices compared bitwise.
    fn same_values(&self, other: &Bar) -> bool {
        self.date == other.date
            && self.open.to_bits() == other.open.to_bits()
            && self.high.to_bits() == other.high.to_bits()
            && self.low.to_bits() == other.low.to_bits()
            && self.close.to_bits() == other.close.to_bits()
            && self.volume == other.volume
    }
}

/// Ordered daily history of one symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct StockSeries {
    pub symbol: String,
    bars: Vec<Bar>,
}

impl StockSeries {
    /// Builds a series from bars already in strictly ascending date order.
    pub fn new(symbol: impl Into<String>, bars: Vec<Bar>) -> Result<Self, MarketDataError> {
        for pair in bars.windows(2) {
            if pair[1].date <= pair[0].date {
                return Err(MarketDataError::Unordered { date: pair[1].date });
            }
        }
        for bar in &bars {
            bar.validate()?;
        }
        Ok(StockSeries {
            symbol: symbol.into(),
            bars,
        })
    }

    pub fn empty(symbol: impl Into<String>) -> Self {
        StockSeries {
            symbol: symbol.into(),
            bars: Vec::new(),
        }
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.bars.iter().map(|b| b.date)
    }

    pub fn bar_on(&self, date: NaiveDate) -> Option<&Bar> {
        self.bars
            .binary_search_by_key(&date, |b| b.date)
            .ok()
            .map(|i| &self.bars[i])
    }

    /// Number of bars dated strictly before `date`.
    pub fn count_before(&self, date: NaiveDate) -> usize {
        self.bars.partition_point(|b| b.date < date)
    }

    /// All bars dated strictly before `date`.
    pub fn history_before(&self, date: NaiveDate) -> &[Bar] {
        &self.bars[..self.count_before(date)]
    }

    /// A copy holding only bars dated on or before `date`.
    pub fn truncated_through(&self, date: NaiveDate) -> StockSeries {
        let end = self.bars.partition_point(|b| b.date <= date);
        StockSeries {
            symbol: self.symbol.clone(),
            bars: self.bars[..end].to_vec(),
        }
    }

    /// Bars whose dates fall in `[from, to]`.
    pub fn slice_dates(&self, from: NaiveDate, to: NaiveDate) -> StockSeries {
        let start = self.bars.partition_point(|b| b.date < from);
        let end = self.bars.partition_point(|b| b.date <= to);
        StockSeries {
            symbol: self.symbol.clone(),
            bars: self.bars[start..end.max(start)].to_vec(),
        }
    }
}

/// Candidate symbols with their market capitalization in USD.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Universe {
    entries: Vec<(String, f64)>,
}

impl Universe {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self, MarketDataError> {
        let mut seen = HashSet::new();
        for (symbol, _) in &entries {
            if !seen.insert(symbol.as_str()) {
                return Err(MarketDataError::DuplicateSymbol(symbol.clone()));
            }
        }
        Ok(Universe { entries })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn symbols_with_min_cap(&self, min_cap: f64) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, cap)| *cap >= min_cap)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// Parses `symbol,market_cap_usd` lines; a leading header line is optional.
    pub fn parse_csv(text: &str) -> Result<Self, MarketDataError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if i == 0 && line.starts_with("symbol") {
                continue;
            }
            let malformed = |reason: &str| MarketDataError::MalformedRow {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (symbol, cap) = line
                .split_once(',')
                .ok_or_else(|| malformed("expected `symbol,market_cap_usd`"))?;
            let cap: f64 = cap
                .trim()
                .parse()
                .map_err(|_| malformed("market cap is not a number"))?;
            entries.push((symbol.trim().to_string(), cap));
        }
        Universe::new(entries)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("symbol,market_cap_usd\n");
        for (s, cap) in &self.entries {
            let _ = writeln!(out, "{s},{cap}");
        }
        out
    }
}

/// Trading days derived by cross-stock comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Calendar {
    trading_days: Vec<NaiveDate>,
    quorum: f64,
}

impl Calendar {
    pub fn from_days(days: impl IntoIterator<Item = NaiveDate>, quorum: f64) -> Self {
        let set: BTreeSet<NaiveDate> = days.into_iter().collect();
        Calendar {
            trading_days: set.into_iter().collect(),
            quorum,
        }
    }

    pub fn trading_days(&self) -> &[NaiveDate] {
        &self.trading_days
    }

    pub fn quorum(&self) -> f64 {
        self.quorum
    }

    pub fn len(&self) -> usize {
        self.trading_days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trading_days.is_empty()
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.trading_days.binary_search(&date).is_ok()
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.trading_days.binary_search(&date).ok()
    }

    /// Trading days in `[from, to]`.
    pub fn days_between(&self, from: NaiveDate, to: NaiveDate) -> &[NaiveDate] {
        let start = self.trading_days.partition_point(|d| *d < from);
        let end = self.trading_days.partition_point(|d| *d <= to);
        &self.trading_days[start..end.max(start)]
    }
}

pub const DEFAULT_QUORUM: f64 = 0.5;

/// A date is a trading day iff at least `quorum` of the series contain it.
pub fn build_calendar(series_set: &[StockSeries], quorum: f64) -> Result<Calendar, MarketDataError> {
    if !(quorum > 0.0 && quorum <= 1.0) {
        return Err(MarketDataError::InvalidQuorum(quorum));
    }
    let mut counts: BTreeMap<NaiveDate, usize> = BTreeMap::new();
    for series in series_set {
        for date in series.dates() {
            *counts.entry(date).or_default() += 1;
        }
    }
    let needed = quorum * series_set.len() as f64;
    let days = counts
        .into_iter()
        .filter(|&(_, n)| n as f64 >= needed)
        .map(|(d, _)| d);
    Ok(Calendar::from_days(days, quorum))
}

fn parse_price(field: &str, line: usize, name: &str) -> Result<f64, MarketDataError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| MarketDataError::MalformedRow {
            line,
            reason: format!("{name} `{field}` is not a decimal"),
        })
}

/// Parses the per-stock CSV format. Rows may arrive in any order; the result is
/// sorted ascending and identical duplicate rows are collapsed.
pub fn parse_series_csv(text: &str, symbol: &str) -> Result<StockSeries, MarketDataError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end_matches('\r') == CSV_HEADER => {}
        _ => return Err(MarketDataError::BadHeader),
    }
    let mut bars = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 6 {
            return Err(MarketDataError::MalformedRow {
                line: line_no,
                reason: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let date = NaiveDate::parse_from_str(fields[0].trim(), "%Y-%m-%d").map_err(|_| {
            MarketDataError::MalformedRow {
                line: line_no,
                reason: format!("bad date `{}`", fields[0]),
            }
        })?;
        let open = parse_price(fields[1], line_no, "open")?;
        let high = parse_price(fields[2], line_no, "high")?;
        let low = parse_price(fields[3], line_no, "low")?;
        let close = parse_price(fields[4], line_no, "close")?;
        let volume = fields[5]
            .trim()
            .parse::<u64>()
            .map_err(|_| MarketDataError::MalformedRow {
                line: line_no,
                reason: format!("volume `{}` is not a non-negative integer", fields[5]),
            })?;
        let bar = Bar::new(date, open, high, low, close, volume).map_err(|e| {
            MarketDataError::MalformedRow {
                line: line_no,
                reason: e.to_string(),
            }
        })?;
        bars.push(bar);
    }
    collapse(symbol, bars)
}

/// Writes the per-stock CSV format. Prices use the shortest representation that
/// parses back to the same value.
pub fn write_series_csv(series: &StockSeries) -> String {
    let mut out = String::with_capacity(32 * (series.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for b in series.bars() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            b.date.format("%Y-%m-%d"),
            b.open,
            b.high,
            b.low,
            b.close,
            b.volume
        );
    }
    out
}

fn collapse(symbol: &str, mut bars: Vec<Bar>) -> Result<StockSeries, MarketDataError> {
    bars.sort_by_key(|b| b.date);
    let mut merged: Vec<Bar> = Vec::with_capacity(bars.len());
    for bar in bars {
        match merged.last() {
            Some(prev) if prev.date == bar.date => {
                if !prev.same_values(&bar) {
                    return Err(MarketDataError::ConflictingDuplicate {
                        symbol: symbol.to_string(),
                        date: bar.date,
                    });
                }
            }
            _ => merged.push(bar),
        }
    }
    Ok(StockSeries {
        symbol: symbol.to_string(),
        bars: merged,
    })
}

/// Merges retrieval fragments of one symbol into a single ascending series.
pub fn merge_chunks(fragments: &[StockSeries]) -> Result<StockSeries, MarketDataError> {
    let first = fragments.first().ok_or(MarketDataError::NoFragments)?;
    let symbol = first.symbol.as_str();
    if let Some(bad) = fragments.iter().find(|f| f.symbol != symbol) {
        return Err(MarketDataError::SymbolMismatch {
            expected: symbol.to_string(),
            found: bad.symbol.clone(),
        });
    }
    let bars = fragments
        .iter()
        .flat_map(|f| f.bars.iter().copied())
        .collect();
    collapse(symbol, bars)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn flat(symbol: &str, dates: &[NaiveDate]) -> StockSeries {
        let bars = dates
            .iter()
            .map(|&date| Bar::new(date, 10.0, 11.0, 9.0, 10.5, 100).unwrap())
            .collect();
        StockSeries::new(symbol, bars).unwrap()
    }

    #[test]
    fn header_only_is_empty_series() {
        let s = parse_series_csv("date,open,high,low,close,volume\n", "X").unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn parses_a_row() {
        let text = "date,open,high,low,close,volume\n2022-03-01,10,12,9,11,1000\n";
        let s = parse_series_csv(text, "X").unwrap();
        let b = s.bars()[0];
        assert_eq!(b.date, d("2022-03-01"));
        assert_eq!((b.open, b.high, b.low, b.close, b.volume), (10.0, 12.0, 9.0, 11.0, 1000));
    }

    #[test]
    fn rejects_high_below_low() {
        let text = "date,open,high,low,close,volume\n2022-03-01,10,9,10,9.5,1\n";
        match parse_series_csv(text, "X") {
            Err(MarketDataError::MalformedRow { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_header_and_field_count() {
        assert_eq!(
            parse_series_csv("d,o,h,l,c,v\n", "X"),
            Err(MarketDataError::BadHeader)
        );
        let text = "date,open,high,low,close,volume\n2022-03-01,10,12,9\n";
        assert!(matches!(
            parse_series_csv(text, "X"),
            Err(MarketDataError::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn unordered_rows_are_sorted() {
        let text = "date,open,high,low,close,volume\n\
                    2022-03-02,10,12,9,11,1\n2022-03-01,10,12,9,11,1\n";
        let s = parse_series_csv(text, "X").unwrap();
        assert_eq!(s.bars()[0].date, d("2022-03-01"));
    }

    #[test]
    fn merge_single_fragment_is_identity() {
        let s = flat("A", &[d("2022-01-03"), d("2022-01-04")]);
        assert_eq!(merge_chunks(std::slice::from_ref(&s)).unwrap(), s);
    }

    #[test]
    fn merge_overlap_collapses_identical_day() {
        let days: Vec<NaiveDate> = (0..10)
            .map(|i| d("2022-01-03") + chrono::Days::new(i))
            .collect();
        let a = flat("A", &days[..6]);
        let b = flat("A", &days[5..]);
        // brute-force set union of dates
        let union: BTreeSet<NaiveDate> = a.dates().chain(b.dates()).collect();
        let merged = merge_chunks(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(merged.len(), union.len());
        assert_eq!(merged.len(), a.len() + b.len() - 1);
    }

    #[test]
    fn merge_rejects_conflicts_and_mismatches() {
        let day = d("2022-01-03");
        let a = flat("A", &[day]);
        let b = StockSeries::new("A", vec![Bar::new(day, 10.0, 11.0, 9.0, 10.0, 100).unwrap()])
            .unwrap();
        assert!(matches!(
            merge_chunks(&[a.clone(), b]),
            Err(MarketDataError::ConflictingDuplicate { .. })
        ));
        let c = flat("B", &[day]);
        assert!(matches!(
            merge_chunks(&[a, c]),
            Err(MarketDataError::SymbolMismatch { .. })
        ));
        assert_eq!(merge_chunks(&[]), Err(MarketDataError::NoFragments));
    }

    #[test]
    fn calendar_examples() {
        let days: Vec<NaiveDate> = (0..5).map(|i| d("2022-01-03") + chrono::Days::new(i)).collect();
        let three: Vec<_> = (0..3).map(|i| flat(&format!("S{i}"), &days)).collect();
        assert_eq!(build_calendar(&three, 0.5).unwrap().trading_days(), &days[..]);

        let missing = days[2];
        let mut four = three.clone();
        let partial: Vec<_> = days.iter().copied().filter(|x| *x != missing).collect();
        four.push(flat("S3", &partial));
        assert!(build_calendar(&four, 0.5).unwrap().contains(missing));
        assert!(!build_calendar(&four, 1.0).unwrap().contains(missing));

        let single = flat("A", &partial);
        let cal = build_calendar(std::slice::from_ref(&single), 1.0).unwrap();
        assert_eq!(cal.trading_days(), &partial[..]);

        assert!(build_calendar(&three, 0.0).is_err());
    }

    #[test]
    fn universe_rejects_duplicates_and_filters() {
        assert!(Universe::new(vec![("A".into(), 1.0), ("A".into(), 2.0)]).is_err());
        let u = Universe::parse_csv("symbol,market_cap_usd\nA,3e9\nB,1e9\n").unwrap();
        assert_eq!(u.symbols_with_min_cap(2e9), vec!["A"]);
        assert_eq!(Universe::parse_csv(&u.to_csv()).unwrap(), u);
    }
}

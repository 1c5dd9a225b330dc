//! The daily trading runtime.
//!
//! Ten minutes before the open the cycle fetches recent bars, drops stocks that fail
//! the gap check, predicts and ranks. At the open it submits bracket orders for the
//! top five, sized exactly as the backtest sizes them. Three minutes before the
//! close it liquidates everything. Every prediction is logged with the ensemble
//! version, and a date-stamped lock keeps a second run on the same day from trading.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use thiserror::Error;

use crate::backtest::{fill, plan_trades, FillPolicy, TradePlan, TradeResult, DEFAULT_STOP_LOSS_FRAC, DEFAULT_TOP_N};
use crate::clock::Clock;
use crate::features::{features_for_day, FeatureVector, Prefilter, NUM_FEATURES};
use crate::ingestion::{fetch_recent_all, IngestionError, RateLimiter, RecentProvider};
use crate::knn::{ensemble_rank, EnsembleModel, RankedPrediction};
use crate::marketdata::{build_calendar, Bar, StockSeries, DEFAULT_QUORUM};
use crate::quality::{detect_gaps, DEFAULT_MAX_CONSECUTIVE_MISSING};

#[derive(Debug, Error)]
pub enum TraderError {
    #[error("no recent data available: {0}")]
    DataUnavailable(String),
    #[error("quality check failed: {0}")]
    Quality(String),
    #[error("broker: {0}")]
    Broker(#[from] BrokerError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("{file} line {line}: {reason}")]
    Malformed { file: &'static str, line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BrokerError {
    #[error("order for {symbol} rejected: {reason}")]
    Rejected { symbol: String, reason: String },
    #[error("broker unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BracketOrder {
    pub symbol: String,
    pub quantity: u64,
    pub entry_price: f64,
    pub take_profit_price: f64,
    pub stop_loss_price: f64,
    pub submitted_at: NaiveDateTime,
    pub plan: TradePlan,
}

impl BracketOrder {
    pub fn from_plan(plan: &TradePlan, submitted_at: NaiveDateTime) -> Self {
        BracketOrder {
            symbol: plan.symbol.clone(),
            quantity: plan.quantity,
            entry_price: plan.entry_price,
            take_profit_price: plan.take_profit_price,
            stop_loss_price: plan.stop_loss_price,
            submitted_at,
            plan: plan.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct OrderId(pub u64);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Account {
    pub cash: f64,
    pub positions: BTreeMap<String, u64>,
}

/// What the runtime needs from a brokerage.
pub trait Broker {
    /// Opening price of `symbol` on `date`, once the market has opened.
    fn opening_price(&self, symbol: &str, date: NaiveDate) -> Option<f64>;
    fn submit_bracket(&mut self, order: &BracketOrder) -> Result<OrderId, BrokerError>;
    /// Closes every open position. Leaves no positions behind.
    fn liquidate_all(&mut self, at: NaiveDateTime) -> Result<Vec<TradeResult>, BrokerError>;
    fn account(&self) -> Account;
}

/// Paper broker that fills brackets against known daily bars with the backtest's
/// fill rule.
#[derive(Debug, Clone)]
pub struct MockBroker {
    bars: BTreeMap<(String, NaiveDate), Bar>,
    cash: f64,
    policy: FillPolicy,
    open: Vec<(OrderId, BracketOrder)>,
    next_id: u64,
    reject: BTreeSet<String>,
    submitted: Vec<BracketOrder>,
}

impl MockBroker {
    pub fn new(series_set: &[StockSeries], cash: f64, policy: FillPolicy) -> Self {
        let bars = series_set
            .iter()
            .flat_map(|s| s.bars().iter().map(move |b| ((s.symbol.clone(), b.date), *b)))
            .collect();
        MockBroker {
            bars,
            cash,
            policy,
            open: Vec::new(),
            next_id: 1,
            reject: BTreeSet::new(),
            submitted: Vec::new(),
        }
    }

    /// Orders for `symbol` will be rejected.
    pub fn reject_symbol(mut self, symbol: &str) -> Self {
        self.reject.insert(symbol.to_string());
        self
    }

    pub fn submitted(&self) -> &[BracketOrder] {
        &self.submitted
    }
}

impl Broker for MockBroker {
    fn opening_price(&self, symbol: &str, date: NaiveDate) -> Option<f64> {
        self.bars.get(&(symbol.to_string(), date)).map(|b| b.open)
    }

    fn submit_bracket(&mut self, order: &BracketOrder) -> Result<OrderId, BrokerError> {
        let rejected = |reason: &str| BrokerError::Rejected {
            symbol: order.symbol.clone(),
            reason: reason.to_string(),
        };
        if self.reject.contains(&order.symbol) {
            return Err(rejected("symbol not tradable"));
        }
        let date = order.submitted_at.date();
        if !self.bars.contains_key(&(order.symbol.clone(), date)) {
            return Err(rejected("no market for symbol today"));
        }
        if !(order.stop_loss_price < order.entry_price && order.entry_price < order.take_profit_price) || order.quantity == 0 {
            return Err(rejected("invalid bracket"));
        }
        let cost = order.quantity as f64 * order.entry_price;
        if cost > self.cash {
            return Err(rejected("insufficient cash"));
        }
        self.cash -= cost;
        let id = OrderId(self.next_id);
        self.next_id += 1;
        self.open.push((id, order.clone()));
        self.submitted.push(order.clone());
        Ok(id)
    }

    fn liquidate_all(&mut self, _at: NaiveDateTime) -> Result<Vec<TradeResult>, BrokerError> {
        let mut results = Vec::with_capacity(self.open.len());
        for (_, order) in self.open.drain(..) {
            let bar = self.bars[&(order.symbol.clone(), order.plan.date)];
            let result = fill(&order.plan, &bar, self.policy, 0.0).map_err(|e| BrokerError::Unavailable(e.to_string()))?;
            self.cash += order.quantity as f64 * result.exit_price;
            results.push(result);
        }
        Ok(results)
    }

    fn account(&self) -> Account {
        let mut positions = BTreeMap::new();
        for (_, o) in &self.open {
            *positions.entry(o.symbol.clone()).or_insert(0) += o.quantity;
        }
        Account {
            cash: self.cash,
            positions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleConfig {
    pub market_open: NaiveTime,
    pub market_close: NaiveTime,
    pub lead_minutes: u32,
    pub liquidate_minutes: u32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            market_open: NaiveTime::from_hms_opt(9, 30, 0).unwrap(),
            market_close: NaiveTime::from_hms_opt(16, 0, 0).unwrap(),
            lead_minutes: 10,
            liquidate_minutes: 3,
        }
    }
}

impl ScheduleConfig {
    pub fn prediction_start(&self, date: NaiveDate) -> NaiveDateTime {
        date.and_time(self.market_open) - chrono::Duration::minutes(self.lead_minutes as i64)
    }

    pub fn open_at(&self, date: NaiveDate) -> NaiveDateTime {
        date.and_time(self.market_open)
    }

    pub fn liquidation_at(&self, date: NaiveDate) -> NaiveDateTime {
        date.and_time(self.market_close) - chrono::Duration::minutes(self.liquidate_minutes as i64)
    }

    /// Warning when the last measured prediction batch would not fit in the lead time.
    pub fn lead_warning(&self, last_batch_seconds: Option<f64>) -> Option<String> {
        let last = last_batch_seconds?;
        let lead = self.lead_minutes as f64 * 60.0;
        (last >= lead).then(|| {
            format!("last prediction batch took {last:.1} s, lead time is only {lead:.0} s; decisions may miss the open")
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogMode {
    #[default]
    Full,
    PositivesOnly,
}

impl LogMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LogMode::Full => "full",
            LogMode::PositivesOnly => "positives_only",
        }
    }
}

impl std::str::FromStr for LogMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(LogMode::Full),
            "positives_only" => Ok(LogMode::PositivesOnly),
            other => Err(format!("unknown log mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub timestamp: NaiveDateTime,
    pub version: String,
    pub symbol: String,
    pub features: FeatureVector,
    /// One output per ensemble model, in threshold order.
    pub outputs: Vec<bool>,
    pub score: f64,
    pub invested: bool,
}

const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

pub fn prediction_log_header(models: usize) -> String {
    let mut h = String::from("timestamp,version,symbol");
    for i in 1..=NUM_FEATURES {
        let _ = write!(h, ",f{i}");
    }
    for i in 1..=models {
        let _ = write!(h, ",out_t{i}");
    }
    h.push_str(",score,decision");
    h
}

impl PredictionRecord {
    pub fn from_ranked(r: &RankedPrediction, timestamp: NaiveDateTime, version: &str, invested: bool) -> Self {
        PredictionRecord {
            timestamp,
            version: version.to_string(),
            symbol: r.symbol.clone(),
            features: r.features,
            outputs: r.outputs.iter().map(|o| o.positive).collect(),
            score: r.score,
            invested,
        }
    }

    pub fn to_csv_line(&self) -> String {
        let mut line = format!("{},{},{}", self.timestamp.format(TS_FORMAT), self.version, self.symbol);
        for v in self.features.to_array() {
            let _ = write!(line, ",{v}");
        }
        for &o in &self.outputs {
            line.push_str(if o { ",1" } else { ",0" });
        }
        let _ = write!(line, ",{},{}", self.score, if self.invested { "invested" } else { "skipped" });
        line
    }
}

fn malformed(line: usize, reason: &str) -> TraderError {
    TraderError::Malformed {
        file: "prediction log",
        line,
        reason: reason.to_string(),
    }
}

pub fn parse_prediction_log(text: &str) -> Result<Vec<PredictionRecord>, TraderError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed(1, "empty log"))?;
    let columns = header.split(',').count();
    let models = columns
        .checked_sub(5 + NUM_FEATURES)
        .ok_or_else(|| malformed(1, "bad header"))?;
    if header != prediction_log_header(models) {
        return Err(malformed(1, "bad header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let n = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != columns {
                return Err(malformed(n, "wrong field count"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| malformed(n, "bad number"));
            let mut features = [0.0; NUM_FEATURES];
            for (j, slot) in features.iter_mut().enumerate() {
                *slot = num(f[3 + j])?;
            }
            let outputs = f[3 + NUM_FEATURES..3 + NUM_FEATURES + models]
                .iter()
                .map(|s| match *s {
                    "1" => Ok(true),
                    "0" => Ok(false),
                    _ => Err(malformed(n, "bad output")),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let invested = match f[columns - 1] {
                "invested" => true,
                "skipped" => false,
                _ => return Err(malformed(n, "bad decision")),
            };
            Ok(PredictionRecord {
                timestamp: NaiveDateTime::parse_from_str(f[0], TS_FORMAT).map_err(|_| malformed(n, "bad timestamp"))?,
                version: f[1].to_string(),
                symbol: f[2].to_string(),
                features: FeatureVector::from_array(features),
                outputs,
                score: num(f[columns - 2])?,
                invested,
            })
        })
        .collect()
}

/// Append-only destination of log lines.
pub trait LogSink {
    fn append(&mut self, text: &str) -> io::Result<()>;
    /// True while nothing has been written, header included.
    fn is_empty(&self) -> bool;
}

#[derive(Debug)]
pub struct FileSink {
    path: PathBuf,
}

impl FileSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileSink { path: path.into() }
    }
}

impl LogSink for FileSink {
    fn append(&mut self, text: &str) -> io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(text.as_bytes())
    }

    fn is_empty(&self) -> bool {
        std::fs::metadata(&self.path).map_or(true, |m| m.len() == 0)
    }
}

/// In-memory sink that can be told to fail a number of appends.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub text: String,
    pub fail_next: usize,
}

impl LogSink for MemorySink {
    fn append(&mut self, text: &str) -> io::Result<()> {
        if self.fail_next > 0 {
            self.fail_next -= 1;
            return Err(io::Error::other("sink unavailable"));
        }
        self.text.push_str(text);
        Ok(())
    }

    fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

/// Buffers records whose append failed and retries them before the next write, so
/// a broken sink never interrupts trading.
pub struct PredictionLogger<S: LogSink> {
    sink: S,
    mode: LogMode,
    pending: Vec<String>,
    models: Option<usize>,
    written: usize,
}

impl<S: LogSink> PredictionLogger<S> {
    pub fn new(sink: S, mode: LogMode) -> Self {
        PredictionLogger {
            sink,
            mode,
            pending: Vec::new(),
            models: None,
            written: 0,
        }
    }

    pub fn mode(&self) -> LogMode {
        self.mode
    }

    /// Queues the record (if the mode keeps it) and tries to flush. Returns whether
    /// the record was kept.
    pub fn log(&mut self, record: &PredictionRecord) -> bool {
        if self.mode == LogMode::PositivesOnly && !record.invested {
            return false;
        }
        self.models.get_or_insert(record.outputs.len());
        self.pending.push(record.to_csv_line());
        if let Err(e) = self.flush() {
            log::warn!("prediction log append failed, {} records buffered: {e}", self.pending.len());
        }
        true
    }

    pub fn flush(&mut self) -> io::Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let mut text = String::new();
        if self.sink.is_empty() {
            text.push_str(&prediction_log_header(self.models.unwrap_or(0)));
            text.push('\n');
        }
        for line in &self.pending {
            text.push_str(line);
            text.push('\n');
        }
        self.sink.append(&text)?;
        self.written += self.pending.len();
        self.pending.clear();
        Ok(())
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }

    pub fn into_sink(self) -> S {
        self.sink
    }
}

/// Runs `runner`, timing it. With a path, appends `date,seconds` to that CSV.
pub fn measure_batch_duration<T>(
    runner: impl FnOnce() -> T,
    date: NaiveDate,
    durations_file: Option<&Path>,
) -> io::Result<(T, Duration)> {
    let started = Instant::now();
    let out = runner();
    let elapsed = started.elapsed();
    if let Some(path) = durations_file {
        let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "date,seconds")?;
        }
        writeln!(f, "{date},{}", elapsed.as_secs_f64())?;
    }
    Ok((out, elapsed))
}

pub fn parse_durations(text: &str) -> Result<Vec<(NaiveDate, f64)>, TraderError> {
    let bad = |line: usize| TraderError::Malformed {
        file: "durations",
        line,
        reason: "expected `date,seconds`".into(),
    };
    let mut lines = text.lines();
    if lines.next() != Some("date,seconds") {
        return Err(bad(1));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let (d, s) = l.split_once(',').ok_or(bad(i + 2))?;
            Ok((d.parse().map_err(|_| bad(i + 2))?, s.parse().map_err(|_| bad(i + 2))?))
        })
        .collect()
}

pub fn last_duration(path: &Path) -> Option<f64> {
    let text = std::fs::read_to_string(path).ok()?;
    parse_durations(&text).ok()?.last().map(|d| d.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleConfig {
    pub schedule: ScheduleConfig,
    pub top_n: usize,
    pub stop_loss_frac: f64,
    pub prefilter: Prefilter,
    /// Bars of recent history requested per symbol.
    pub recent_days: usize,
    pub max_consecutive_missing: usize,
    pub calendar_quorum: f64,
    /// Directory for the date-stamped cycle lock.
    pub lock_dir: PathBuf,
    pub durations_file: Option<PathBuf>,
}

impl CycleConfig {
    pub fn new(lock_dir: impl Into<PathBuf>) -> Self {
        CycleConfig {
            schedule: ScheduleConfig::default(),
            top_n: DEFAULT_TOP_N,
            stop_loss_frac: DEFAULT_STOP_LOSS_FRAC,
            prefilter: Prefilter::default(),
            recent_days: 30,
            max_consecutive_missing: DEFAULT_MAX_CONSECUTIVE_MISSING,
            calendar_quorum: DEFAULT_QUORUM,
            lock_dir: lock_dir.into(),
            durations_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CycleStatus {
    Completed,
    /// The lock for this date already existed; nothing was done.
    AlreadyRan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleReport {
    pub date: NaiveDate,
    pub status: CycleStatus,
    pub fetched: usize,
    pub missing: Vec<String>,
    pub excluded: Vec<String>,
    pub ranked: Vec<RankedPrediction>,
    pub positives: usize,
    pub orders: Vec<(OrderId, BracketOrder)>,
    pub rejections: Vec<BrokerError>,
    pub fills: Vec<TradeResult>,
    pub prediction_seconds: f64,
    pub logged: usize,
    pub log_pending: usize,
    pub warnings: Vec<String>,
}

impl CycleReport {
    fn skipped(date: NaiveDate) -> Self {
        CycleReport {
            date,
            status: CycleStatus::AlreadyRan,
            fetched: 0,
            missing: Vec::new(),
            excluded: Vec::new(),
            ranked: Vec::new(),
            positives: 0,
            orders: Vec::new(),
            rejections: Vec::new(),
            fills: Vec::new(),
            prediction_seconds: 0.0,
            logged: 0,
            log_pending: 0,
            warnings: Vec::new(),
        }
    }

    pub fn pnl(&self) -> f64 {
        self.fills.iter().map(|f| f.pnl).sum()
    }

    pub fn summary(&self) -> String {
        if self.status == CycleStatus::AlreadyRan {
            return format!("{}: cycle already ran, nothing to do\n", self.date);
        }
        let mut s = format!(
            "{}: fetched {} (missing {}), excluded {}, predicted {}, positives {}, orders {}, rejected {}\n\
             prediction batch {:.3} s, logged {} (pending {}), day pnl {:.2}\n",
            self.date,
            self.fetched,
            self.missing.len(),
            self.excluded.len(),
            self.ranked.len(),
            self.positives,
            self.orders.len(),
            self.rejections.len(),
            self.prediction_seconds,
            self.logged,
            self.log_pending,
            self.pnl()
        );
        for (id, o) in &self.orders {
            let _ = writeln!(
                s,
                "  order {} {} x{} entry {} tp {:.4} sl {:.4}",
                id.0, o.symbol, o.quantity, o.entry_price, o.take_profit_price, o.stop_loss_price
            );
        }
        for w in &self.warnings {
            let _ = writeln!(s, "  warning: {w}");
        }
        s
    }
}

fn lock_path(dir: &Path, date: NaiveDate) -> PathBuf {
    dir.join(format!("cycle-{date}.lock"))
}

/// Everything the cycle talks to.
pub struct CycleContext<'a, S: LogSink> {
    pub clock: &'a dyn Clock,
    pub provider: &'a dyn RecentProvider,
    pub gate: &'a RateLimiter,
    pub symbols: &'a [String],
    pub ensemble: &'a EnsembleModel,
    pub broker: &'a mut dyn Broker,
    pub logger: &'a mut PredictionLogger<S>,
}

/// One trading day. Any failure before the open returns an error with no order
/// placed; broker rejections are recorded and the remaining orders proceed.
pub fn daily_cycle<S: LogSink>(date: NaiveDate, ctx: CycleContext<'_, S>, config: &CycleConfig) -> Result<CycleReport, TraderError> {
    let lock = lock_path(&config.lock_dir, date);
    if lock.exists() {
        return Ok(CycleReport::skipped(date));
    }
    let mut warnings = Vec::new();
    if let Some(path) = &config.durations_file {
        if let Some(w) = config.schedule.lead_warning(last_duration(path)) {
            log::warn!("{w}");
            warnings.push(w);
        }
    }

    ctx.clock.sleep_until(config.schedule.prediction_start(date));
    let (series, missing) = match fetch_recent_all(ctx.symbols, config.recent_days, ctx.provider, ctx.gate, ctx.clock) {
        Ok(data) => (data.series, Vec::new()),
        Err(IngestionError::PartialResult { found, missing, .. }) if !found.is_empty() => {
            log::warn!("no recent data for {} symbols; they sit out today", missing.len());
            (found, missing)
        }
        Err(e) => return Err(TraderError::DataUnavailable(e.to_string())),
    };
    let series: Vec<StockSeries> = series.into_values().collect();
    let calendar = build_calendar(&series, config.calendar_quorum).map_err(|e| TraderError::Quality(e.to_string()))?;
    let quality = detect_gaps(&series, &calendar, config.max_consecutive_missing);
    let excluded: Vec<String> = quality.excluded_symbols().into_iter().collect();
    let retained: Vec<StockSeries> = series.into_iter().filter(|s| !quality.is_excluded(&s.symbol)).collect();

    let (ranked, elapsed) = measure_batch_duration(
        || ensemble_rank(ctx.ensemble, &features_for_day(&retained, date, &config.prefilter)),
        date,
        config.durations_file.as_deref(),
    )?;
    let positives = ranked.iter().filter(|r| r.score > 0.0).count();
    let predicted_at = ctx.clock.now();

    ctx.clock.sleep_until(config.schedule.open_at(date));
    let opens: BTreeMap<String, f64> = ranked
        .iter()
        .filter(|r| r.score > 0.0)
        .take(config.top_n)
        .filter_map(|r| ctx.broker.opening_price(&r.symbol, date).map(|p| (r.symbol.clone(), p)))
        .collect();
    let cash = ctx.broker.account().cash;
    let plans = plan_trades(date, &ranked, &opens, cash, config.top_n, config.stop_loss_frac);

    std::fs::create_dir_all(&config.lock_dir)?;
    File::create(&lock)?;
    let mut orders = Vec::new();
    let mut rejections = Vec::new();
    let mut invested = BTreeSet::new();
    for plan in &plans {
        let order = BracketOrder::from_plan(plan, ctx.clock.now());
        match ctx.broker.submit_bracket(&order) {
            Ok(id) => {
                invested.insert(order.symbol.clone());
                orders.push((id, order));
            }
            Err(e) => {
                log::warn!("{e}");
                rejections.push(e);
            }
        }
    }

    let version = ctx.ensemble.version().to_string();
    let mut logged = 0;
    for r in &ranked {
        let record = PredictionRecord::from_ranked(r, predicted_at, &version, invested.contains(&r.symbol));
        if ctx.logger.log(&record) {
            logged += 1;
        }
    }

    ctx.clock.sleep_until(config.schedule.liquidation_at(date));
    let fills = ctx.broker.liquidate_all(ctx.clock.now())?;
    let left = ctx.broker.account().positions;
    if !left.is_empty() {
        warnings.push(format!("positions still open after liquidation: {left:?}"));
    }
    if let Err(e) = ctx.logger.flush() {
        warnings.push(format!("prediction log still pending: {e}"));
    }

    Ok(CycleReport {
        date,
        status: CycleStatus::Completed,
        fetched: retained.len() + excluded.len(),
        missing,
        excluded,
        ranked,
        positives,
        orders,
        rejections,
        fills,
        prediction_seconds: elapsed.as_secs_f64(),
        logged,
        log_pending: ctx.logger.pending(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::Prediction;

    fn record(i: usize, invested: bool) -> PredictionRecord {
        PredictionRecord {
            timestamp: NaiveDate::from_ymd_opt(2021, 5, 3).unwrap().and_hms_opt(9, 20, 0).unwrap(),
            version: "1-abcd".into(),
            symbol: format!("S{i:03}"),
            features: FeatureVector::from_array([0.01, 0.1, 10.0, 10.5, 11.0, 0.02, 12345.0]),
            outputs: vec![invested; 19],
            score: if invested { 0.096 } else { 0.0 },
            invested,
        }
    }

    #[test]
    fn log_modes_filter() {
        let records: Vec<_> = (0..100).map(|i| record(i, i % 15 == 0)).collect();
        let mut full = PredictionLogger::new(MemorySink::default(), LogMode::Full);
        let mut pos = PredictionLogger::new(MemorySink::default(), LogMode::PositivesOnly);
        for r in &records {
            full.log(r);
            pos.log(r);
        }
        let full_text = full.into_sink().text;
        let pos_text = pos.into_sink().text;
        assert_eq!(full_text.lines().count(), 101);
        assert_eq!(pos_text.lines().count(), 8);
        assert!(pos_text.len() < full_text.len());
        assert_eq!(parse_prediction_log(&full_text).unwrap(), records);
    }

    #[test]
    fn failed_appends_are_retried() {
        let sink = MemorySink {
            fail_next: 2,
            ..Default::default()
        };
        let mut logger = PredictionLogger::new(sink, LogMode::Full);
        logger.log(&record(1, true));
        logger.log(&record(2, false));
        assert_eq!(logger.pending(), 2);
        logger.log(&record(3, true));
        assert_eq!(logger.pending(), 0);
        assert_eq!(parse_prediction_log(&logger.sink().text).unwrap().len(), 3);
    }

    #[test]
    fn durations_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("durations.csv");
        let day = NaiveDate::from_ymd_opt(2021, 5, 3).unwrap();
        let (_, fast) = measure_batch_duration(|| (), day, Some(&path)).unwrap();
        assert!(fast.as_secs_f64() < 0.5);
        let (_, slow) = measure_batch_duration(|| std::thread::sleep(Duration::from_millis(120)), day, Some(&path)).unwrap();
        assert!(slow >= Duration::from_millis(120));
        let rows = parse_durations(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(last_duration(&path).unwrap() >= 0.12);
        let sched = ScheduleConfig::default();
        assert!(sched.lead_warning(Some(600.0)).is_some());
        assert!(sched.lead_warning(Some(39.0)).is_none());
    }

    #[test]
    fn schedule_times() {
        let s = ScheduleConfig::default();
        let d = NaiveDate::from_ymd_opt(2021, 5, 3).unwrap();
        assert_eq!(s.prediction_start(d).time(), NaiveTime::from_hms_opt(9, 20, 0).unwrap());
        assert_eq!(s.liquidation_at(d).time(), NaiveTime::from_hms_opt(15, 57, 0).unwrap());
    }

    #[test]
    fn mock_broker_contract() {
        let d = NaiveDate::from_ymd_opt(2021, 5, 3).unwrap();
        let bar = Bar::new(d, 100.0, 103.0, 99.0, 101.0, 10).unwrap();
        let s = StockSeries::new("A", vec![bar]).unwrap();
        let mut broker = MockBroker::new(&[s], 1000.0, FillPolicy::Pessimistic);
        let ranked = vec![RankedPrediction {
            symbol: "A".into(),
            score: 0.02,
            vote_fraction: 1.0,
            outputs: vec![Prediction { positive: true, vote_fraction: 1.0 }],
            features: Default::default(),
        }];
        let opens = BTreeMap::from([("A".to_string(), 100.0)]);
        let plans = plan_trades(d, &ranked, &opens, 1000.0, 1, 0.02);
        let order = BracketOrder::from_plan(&plans[0], d.and_hms_opt(9, 30, 0).unwrap());
        broker.submit_bracket(&order).unwrap();
        assert_eq!(broker.account().positions["A"], 10);
        let fills = broker.liquidate_all(d.and_hms_opt(15, 57, 0).unwrap()).unwrap();
        assert_eq!(fills[0].exit_price, 102.0);
        assert!(broker.account().positions.is_empty());
        assert!((broker.account().cash - 1020.0).abs() < 1e-9);
    }
}

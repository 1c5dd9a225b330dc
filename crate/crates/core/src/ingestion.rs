//! Market-data retrieval through provider contracts.
//!
//! Historical training data arrives as 30-day CSV fragments ("chunks"), one request
//! per fragment, under strict per-minute and per-day quotas. Retrieval is driven by a
//! [`RetrievalPlan`] and a persisted [`FetchCheckpoint`] so a multi-day download can be
//! interrupted and resumed. Recent data for the daily cycle is fetched in batches of
//! up to 1,000 symbols per request.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{NaiveDate, NaiveDateTime};
use thiserror::Error;

use crate::clock::Clock;
use crate::marketdata::{self, MarketDataError, StockSeries, Universe};

/// Chunks per stock offered by the historical provider (720 days / 30).
pub const DEFAULT_CHUNKS_PER_STOCK: usize = 24;
pub const CHUNK_DAYS: i64 = 30;
pub const DEFAULT_MIN_MARKET_CAP: f64 = 2.0e9;
/// Symbols served by one recent-data request.
pub const RECENT_BATCH_SIZE: usize = 1000;
/// A failed chunk is attempted at most this many times across runs.
pub const MAX_CHUNK_ATTEMPTS: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("provider error: {0}")]
pub struct ProviderError(pub String);

#[derive(Debug, Error)]
pub enum IngestionError {
    #[error("no symbol in the universe meets the market-cap filter")]
    EmptyUniverse,
    #[error("daily budget must be positive")]
    InvalidBudget,
    #[error("invalid rate-limit policy: {0}")]
    InvalidPolicy(String),
    #[error("daily request budget exhausted")]
    DailyBudgetExhausted,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("no recent data for {} symbol(s): {}", missing.len(), missing.join(","))]
    PartialResult {
        found: BTreeMap<String, StockSeries>,
        missing: Vec<String>,
        requests: usize,
    },
    #[error("checkpoint line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Request quotas. A zero `max_per_minute` or `max_per_day` means unlimited.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateLimitPolicy {
    pub max_per_minute: u32,
    pub max_per_day: u32,
    pub min_gap: Duration,
}

impl RateLimitPolicy {
    pub fn new(max_per_minute: u32, max_per_day: u32, min_gap: Duration) -> Result<Self, IngestionError> {
        if max_per_minute > 0 {
            let needed = Duration::from_secs_f64(60.0 / max_per_minute as f64);
            if min_gap < needed {
                return Err(IngestionError::InvalidPolicy(format!(
                    "min gap {:?} shorter than 60 s / {max_per_minute}",
                    min_gap
                )));
            }
        }
        Ok(RateLimitPolicy {
            max_per_minute,
            max_per_day,
            min_gap,
        })
    }

    /// Historical provider: 5 requests per minute, 500 per day, 12 s apart.
    pub fn historical_default() -> Self {
        RateLimitPolicy {
            max_per_minute: 5,
            max_per_day: 500,
            min_gap: Duration::from_secs(12),
        }
    }

    /// Recent-data provider: 1,000 requests per minute.
    pub fn recent_default() -> Self {
        RateLimitPolicy {
            max_per_minute: 1000,
            max_per_day: 0,
            min_gap: Duration::from_millis(60),
        }
    }
}

#[derive(Debug, Default)]
struct LimiterState {
    window: VecDeque<NaiveDateTime>,
    last: Option<NaiveDateTime>,
    day: Option<NaiveDate>,
    used_today: u32,
}

/// Thread-safe dispatch gate. Callers block in [`RateLimiter::acquire`] until the
/// policy allows another request.
#[derive(Debug)]
pub struct RateLimiter {
    policy: RateLimitPolicy,
    state: Mutex<LimiterState>,
}

impl RateLimiter {
    pub fn new(policy: RateLimitPolicy) -> Self {
        RateLimiter {
            policy,
            state: Mutex::new(LimiterState::default()),
        }
    }

    /// Starts with `used` requests already spent on `day`.
    pub fn with_usage(policy: RateLimitPolicy, day: Option<NaiveDate>, used: u32) -> Self {
        RateLimiter {
            policy,
            state: Mutex::new(LimiterState {
                day,
                used_today: used,
                ..LimiterState::default()
            }),
        }
    }

    pub fn policy(&self) -> RateLimitPolicy {
        self.policy
    }

    /// Day stamp and count of requests dispatched on it.
    pub fn usage(&self) -> (Option<NaiveDate>, u32) {
        let st = self.state.lock().unwrap();
        (st.day, st.used_today)
    }

    /// Waits for a dispatch slot and returns the dispatch time.
    pub fn acquire(&self, clock: &dyn Clock) -> Result<NaiveDateTime, IngestionError> {
        let mut st = self.state.lock().unwrap();
        let now = clock.now();
        if st.day != Some(now.date()) {
            st.day = Some(now.date());
            st.used_today = 0;
        }
        if self.policy.max_per_day > 0 && st.used_today >= self.policy.max_per_day {
            return Err(IngestionError::DailyBudgetExhausted);
        }
        let minute = chrono::Duration::seconds(60);
        let mut at = now;
        if let Some(last) = st.last {
            at = at.max(last + chrono::Duration::from_std(self.policy.min_gap).unwrap());
        }
        while st.window.front().is_some_and(|t| *t + minute <= at) {
            st.window.pop_front();
        }
        let cap = self.policy.max_per_minute as usize;
        if cap > 0 && st.window.len() >= cap {
            let idx = st.window.len() - cap;
            at = at.max(st.window[idx] + minute);
        }
        clock.sleep_until(at);
        if st.day != Some(at.date()) {
            st.day = Some(at.date());
            st.used_today = 0;
        }
        st.window.push_back(at);
        st.last = Some(at);
        st.used_today += 1;
        Ok(at)
    }
}

pub trait HistoricalProvider: Send + Sync {
    /// Returns one 30-day CSV fragment. Chunk 0 is the most recent window.
    fn fetch_chunk(&self, symbol: &str, chunk_index: usize) -> Result<String, ProviderError>;
}

pub trait RecentProvider: Send + Sync {
    fn max_batch(&self) -> usize {
        RECENT_BATCH_SIZE
    }

    /// Returns the last `days` bars of every known symbol in `symbols`. Unknown
    /// symbols are omitted from the result.
    fn fetch_recent(&self, symbols: &[String], days: usize) -> Result<Vec<StockSeries>, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkRequest {
    pub symbol: String,
    pub chunk: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalPlan {
    pub symbols: Vec<String>,
    pub chunks_per_stock: usize,
    pub requests: Vec<ChunkRequest>,
    /// Days needed at the given daily budget.
    pub days: usize,
}

pub fn plan_retrieval(
    universe: &Universe,
    min_cap: f64,
    chunks_per_stock: usize,
    daily_budget: usize,
) -> Result<RetrievalPlan, IngestionError> {
    if daily_budget == 0 {
        return Err(IngestionError::InvalidBudget);
    }
    let symbols: Vec<String> = universe
        .symbols_with_min_cap(min_cap)
        .into_iter()
        .map(str::to_string)
        .collect();
    if symbols.is_empty() {
        return Err(IngestionError::EmptyUniverse);
    }
    let requests: Vec<ChunkRequest> = symbols
        .iter()
        .flat_map(|s| {
            (0..chunks_per_stock).map(move |chunk| ChunkRequest {
                symbol: s.clone(),
                chunk,
            })
        })
        .collect();
    let days = requests.len().div_ceil(daily_budget);
    Ok(RetrievalPlan {
        symbols,
        chunks_per_stock,
        requests,
        days,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkStatus {
    Pending,
    Done,
    Failed,
}

impl ChunkStatus {
    fn as_str(self) -> &'static str {
        match self {
            ChunkStatus::Pending => "pending",
            ChunkStatus::Done => "done",
            ChunkStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkEntry {
    pub status: ChunkStatus,
    pub attempts: u32,
}

/// Persistent per-chunk progress of a historical retrieval.
///
/// Text form, one entry per line, with the two counters as `#` metadata lines:
///
/// ```text
/// # day_stamp = 2024-01-02
/// # requests_today = 5
/// AAPL,0,done,1
/// AAPL,1,failed,2
/// ```
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FetchCheckpoint {
    entries: BTreeMap<(String, usize), ChunkEntry>,
    pub requests_today: u32,
    pub day_stamp: Option<NaiveDate>,
}

impl FetchCheckpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn status(&self, symbol: &str, chunk: usize) -> ChunkStatus {
        self.entry(symbol, chunk).status
    }

    pub fn entry(&self, symbol: &str, chunk: usize) -> ChunkEntry {
        self.entries
            .get(&(symbol.to_string(), chunk))
            .copied()
            .unwrap_or(ChunkEntry {
                status: ChunkStatus::Pending,
                attempts: 0,
            })
    }

    pub fn register(&mut self, symbol: &str, chunk: usize) {
        self.entries
            .entry((symbol.to_string(), chunk))
            .or_insert(ChunkEntry {
                status: ChunkStatus::Pending,
                attempts: 0,
            });
    }

    pub fn mark_done(&mut self, symbol: &str, chunk: usize) {
        let e = self.entries.entry((symbol.to_string(), chunk)).or_insert(ChunkEntry {
            status: ChunkStatus::Pending,
            attempts: 0,
        });
        if e.status != ChunkStatus::Done {
            e.status = ChunkStatus::Done;
            e.attempts += 1;
        }
    }

    /// No effect on chunks already done.
    pub fn mark_failed(&mut self, symbol: &str, chunk: usize) {
        let e = self.entries.entry((symbol.to_string(), chunk)).or_insert(ChunkEntry {
            status: ChunkStatus::Pending,
            attempts: 0,
        });
        if e.status != ChunkStatus::Done {
            e.status = ChunkStatus::Failed;
            e.attempts += 1;
        }
    }

    pub fn count(&self, status: ChunkStatus) -> usize {
        self.entries.values().filter(|e| e.status == status).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize, ChunkEntry)> {
        self.entries.iter().map(|((s, c), e)| (s.as_str(), *c, *e))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(day) = self.day_stamp {
            let _ = writeln!(out, "# day_stamp = {day}");
        }
        let _ = writeln!(out, "# requests_today = {}", self.requests_today);
        for ((symbol, chunk), e) in &self.entries {
            let _ = writeln!(out, "{symbol},{chunk},{},{}", e.status.as_str(), e.attempts);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, IngestionError> {
        let mut cp = FetchCheckpoint::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            let bad = |reason: &str| IngestionError::Checkpoint {
                line: i + 1,
                reason: reason.to_string(),
            };
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((key, value)) = meta.split_once('=') {
                    match key.trim() {
                        "day_stamp" => {
                            cp.day_stamp = Some(
                                NaiveDate::parse_from_str(value.trim(), "%Y-%m-%d")
                                    .map_err(|_| bad("bad day_stamp"))?,
                            )
                        }
                        "requests_today" => {
                            cp.requests_today =
                                value.trim().parse().map_err(|_| bad("bad requests_today"))?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 && fields.len() != 4 {
                return Err(bad("expected `symbol,chunk,status[,attempts]`"));
            }
            let chunk: usize = fields[1].parse().map_err(|_| bad("bad chunk index"))?;
            let status = match fields[2] {
                "pending" => ChunkStatus::Pending,
                "done" => ChunkStatus::Done,
                "failed" => ChunkStatus::Failed,
                _ => return Err(bad("unknown status")),
            };
            let attempts = match fields.get(3) {
                Some(a) => a.parse().map_err(|_| bad("bad attempt count"))?,
                None if status == ChunkStatus::Pending => 0,
                None => 1,
            };
            cp.entries
                .insert((fields[0].to_string(), chunk), ChunkEntry { status, attempts });
        }
        Ok(cp)
    }

    pub fn load(path: &Path) -> Result<Self, IngestionError> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestionError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_text())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}

pub fn chunk_file_name(symbol: &str, chunk: usize) -> String {
    format!("{symbol}.chunk{chunk}.csv")
}

pub fn series_file_name(symbol: &str) -> String {
    format!("{symbol}.csv")
}

/// Inverse of [`chunk_file_name`].
pub fn parse_chunk_file_name(name: &str) -> Option<(String, usize)> {
    let stem = name.strip_suffix(".csv")?;
    let (symbol, idx) = stem.rsplit_once(".chunk")?;
    if symbol.is_empty() {
        return None;
    }
    Some((symbol.to_string(), idx.parse().ok()?))
}

/// Destination for retrieved chunk fragments.
pub trait ChunkStore {
    fn put(&mut self, symbol: &str, chunk: usize, csv: &str) -> std::io::Result<()>;
}

/// Writes `<symbol>.chunk<index>.csv` files into a directory.
#[derive(Debug, Clone)]
pub struct DirChunkStore {
    pub dir: PathBuf,
}

impl DirChunkStore {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(DirChunkStore { dir })
    }
}

impl ChunkStore for DirChunkStore {
    fn put(&mut self, symbol: &str, chunk: usize, csv: &str) -> std::io::Result<()> {
        std::fs::write(self.dir.join(chunk_file_name(symbol, chunk)), csv)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryChunkStore {
    pub chunks: BTreeMap<(String, usize), String>,
}

impl ChunkStore for MemoryChunkStore {
    fn put(&mut self, symbol: &str, chunk: usize, csv: &str) -> std::io::Result<()> {
        self.chunks.insert((symbol.to_string(), chunk), csv.to_string());
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalOutcome {
    /// Provider calls made by this run.
    pub calls: usize,
    pub dispatches: Vec<NaiveDateTime>,
    pub stored: usize,
    pub failed: Vec<ChunkRequest>,
    /// The daily budget ran out before the plan finished; rerun later to resume.
    pub budget_exhausted: bool,
}

/// Executes the plan, skipping chunks the checkpoint marks done. Provider failures
/// mark the chunk failed and the run continues; failed chunks are retried on later
/// runs until they reach [`MAX_CHUNK_ATTEMPTS`].
pub fn run_retrieval(
    plan: &RetrievalPlan,
    provider: &dyn HistoricalProvider,
    policy: RateLimitPolicy,
    checkpoint: &mut FetchCheckpoint,
    clock: &dyn Clock,
    store: &mut dyn ChunkStore,
) -> Result<RetrievalOutcome, IngestionError> {
    let limiter = RateLimiter::with_usage(policy, checkpoint.day_stamp, checkpoint.requests_today);
    let mut outcome = RetrievalOutcome::default();
    for req in &plan.requests {
        checkpoint.register(&req.symbol, req.chunk);
    }
    for req in &plan.requests {
        let entry = checkpoint.entry(&req.symbol, req.chunk);
        match entry.status {
            ChunkStatus::Done => continue,
            ChunkStatus::Failed if entry.attempts >= MAX_CHUNK_ATTEMPTS => continue,
            _ => {}
        }
        let at = match limiter.acquire(clock) {
            Ok(at) => at,
            Err(IngestionError::DailyBudgetExhausted) => {
                outcome.budget_exhausted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        outcome.dispatches.push(at);
        outcome.calls += 1;
        let (day, used) = limiter.usage();
        checkpoint.day_stamp = day;
        checkpoint.requests_today = used;

        let fetched = provider
            .fetch_chunk(&req.symbol, req.chunk)
            .map_err(|e| e.0)
            .and_then(|text| {
                marketdata::parse_series_csv(&text, &req.symbol)
                    .map(|_| text)
                    .map_err(|e| e.to_string())
            });
        match fetched {
            Ok(text) => {
                store.put(&req.symbol, req.chunk, &text)?;
                checkpoint.mark_done(&req.symbol, req.chunk);
                outcome.stored += 1;
            }
            Err(reason) => {
                log::error!("chunk {} of {} failed: {reason}", req.chunk, req.symbol);
                checkpoint.mark_failed(&req.symbol, req.chunk);
                outcome.failed.push(req.clone());
            }
        }
    }
    Ok(outcome)
}

/// Reads every stored chunk of `symbol` from `dir` and merges them.
pub fn merge_chunk_files(dir: &Path, symbol: &str) -> Result<StockSeries, IngestionError> {
    let mut fragments = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some((sym, _)) = parse_chunk_file_name(&name.to_string_lossy()) else {
            continue;
        };
        if sym == symbol {
            let text = std::fs::read_to_string(entry.path())?;
            fragments.push(marketdata::parse_series_csv(&text, symbol)?);
        }
    }
    if fragments.is_empty() {
        return Ok(StockSeries::empty(symbol));
    }
    Ok(marketdata::merge_chunks(&fragments)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecentData {
    pub series: BTreeMap<String, StockSeries>,
    pub requests: usize,
}

/// Fetches recent bars for all symbols in batches of at most `provider.max_batch()`,
/// one thread per batch. Every dispatch goes through the shared `gate`.
pub fn fetch_recent_all(
    symbols: &[String],
    days: usize,
    provider: &dyn RecentProvider,
    gate: &RateLimiter,
    clock: &dyn Clock,
) -> Result<RecentData, IngestionError> {
    let batch = provider.max_batch().max(1);
    let batches: Vec<&[String]> = symbols.chunks(batch).collect();
    let results: Vec<Result<Vec<StockSeries>, IngestionError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = batches
            .iter()
            .map(|b| {
                scope.spawn(move || {
                    gate.acquire(clock)?;
                    Ok(provider.fetch_recent(b, days)?)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("fetch thread panicked"))
            .collect()
    });
    let wanted: HashSet<&str> = symbols.iter().map(String::as_str).collect();
    let mut found = BTreeMap::new();
    for result in results {
        match result {
            Ok(list) => {
                for s in list {
                    if wanted.contains(s.symbol.as_str()) && !s.is_empty() {
                        found.insert(s.symbol.clone(), s);
                    }
                }
            }
            Err(e) => log::warn!("recent-data batch failed: {e}"),
        }
    }
    let requests = batches.len();
    let missing: Vec<String> = symbols
        .iter()
        .filter(|s| !found.contains_key(s.as_str()))
        .cloned()
        .collect();
    if missing.is_empty() {
        Ok(RecentData {
            series: found,
            requests,
        })
    } else {
        Err(IngestionError::PartialResult {
            found,
            missing,
            requests,
        })
    }
}

/// In-memory historical provider serving 30-calendar-day windows ending at `as_of`.
#[derive(Debug)]
pub struct MockHistoricalProvider {
    series: HashMap<String, StockSeries>,
    as_of: NaiveDate,
    calls: AtomicUsize,
    fail_once: Mutex<HashSet<(String, usize)>>,
    fail_always: HashSet<(String, usize)>,
}

impl MockHistoricalProvider {
    pub fn new(series: impl IntoIterator<Item = StockSeries>, as_of: NaiveDate) -> Self {
        MockHistoricalProvider {
            series: series.into_iter().map(|s| (s.symbol.clone(), s)).collect(),
            as_of,
            calls: AtomicUsize::new(0),
            fail_once: Mutex::new(HashSet::new()),
            fail_always: HashSet::new(),
        }
    }

    /// The next request for this chunk fails; later ones succeed.
    pub fn fail_once(self, symbol: &str, chunk: usize) -> Self {
        self.fail_once.lock().unwrap().insert((symbol.to_string(), chunk));
        self
    }

    pub fn fail_always(mut self, symbol: &str, chunk: usize) -> Self {
        self.fail_always.insert((symbol.to_string(), chunk));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Date range `[from, to]` covered by `chunk`.
    pub fn chunk_window(&self, chunk: usize) -> (NaiveDate, NaiveDate) {
        let to = self.as_of - chrono::Duration::days(CHUNK_DAYS * chunk as i64);
        let from = to - chrono::Duration::days(CHUNK_DAYS - 1);
        (from, to)
    }
}

impl HistoricalProvider for MockHistoricalProvider {
    fn fetch_chunk(&self, symbol: &str, chunk_index: usize) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = (symbol.to_string(), chunk_index);
        if self.fail_always.contains(&key) || self.fail_once.lock().unwrap().remove(&key) {
            return Err(ProviderError(format!("injected failure for {symbol} chunk {chunk_index}")));
        }
        let series = self
            .series
            .get(symbol)
            .ok_or_else(|| ProviderError(format!("unknown symbol {symbol}")))?;
        let (from, to) = self.chunk_window(chunk_index);
        let window = series.slice_dates(from, to);
        // providers deliver newest-first
        let mut text = String::from(marketdata::CSV_HEADER);
        text.push('\n');
        let body = marketdata::write_series_csv(&window);
        let mut rows: Vec<&str> = body.lines().skip(1).collect();
        rows.reverse();
        for row in rows {
            text.push_str(row);
            text.push('\n');
        }
        Ok(text)
    }
}

/// In-memory recent-data provider returning the last `days` bars strictly before
/// `before` (or all bars when unset).
#[derive(Debug)]
pub struct MockRecentProvider {
    series: HashMap<String, StockSeries>,
    before: Option<NaiveDate>,
    calls: AtomicUsize,
    batch: usize,
}

impl MockRecentProvider {
    pub fn new(series: impl IntoIterator<Item = StockSeries>) -> Self {
        MockRecentProvider {
            series: series.into_iter().map(|s| (s.symbol.clone(), s)).collect(),
            before: None,
            calls: AtomicUsize::new(0),
            batch: RECENT_BATCH_SIZE,
        }
    }

    pub fn before(mut self, date: NaiveDate) -> Self {
        self.before = Some(date);
        self
    }

    pub fn with_batch_size(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl RecentProvider for MockRecentProvider {
    fn max_batch(&self) -> usize {
        self.batch
    }

    fn fetch_recent(&self, symbols: &[String], days: usize) -> Result<Vec<StockSeries>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut out = Vec::new();
        for sym in symbols {
            let Some(series) = self.series.get(sym) else {
                continue;
            };
            let bars = match self.before {
                Some(d) => series.history_before(d),
                None => series.bars(),
            };
            let start = bars.len().saturating_sub(days);
            out.push(
                StockSeries::new(sym.clone(), bars[start..].to_vec())
                    .map_err(|e| ProviderError(e.to_string()))?,
            );
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimulatedClock;
    use crate::synthetic::{SyntheticMarket, SyntheticParams};

    fn t0() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2024, 3, 4)
            .unwrap()
            .and_hms_opt(8, 0, 0)
            .unwrap()
    }

    fn market(n: usize) -> SyntheticMarket {
        SyntheticMarket::generate(&SyntheticParams {
            symbols: n,
            days: 200,
            seed: 3,
            ..SyntheticParams::default()
        })
    }

    #[test]
    fn plan_paper_scale() {
        let entries = (0..707).map(|i| (format!("S{i}"), 3.0e9)).collect();
        let u = Universe::new(entries).unwrap();
        let plan = plan_retrieval(&u, DEFAULT_MIN_MARKET_CAP, 24, 500).unwrap();
        assert_eq!(plan.requests.len(), 16_968);
        assert_eq!(plan.days, 34);
    }

    #[test]
    fn plan_small_cases() {
        let u = Universe::new(vec![("A".into(), 5e9)]).unwrap();
        let plan = plan_retrieval(&u, 2e9, 24, 500).unwrap();
        assert_eq!((plan.requests.len(), plan.days), (24, 1));

        let u = Universe::new(vec![
            ("A".into(), 5e9),
            ("B".into(), 1e9),
            ("C".into(), 2e9),
            ("D".into(), 0.5e9),
            ("E".into(), 9e9),
        ])
        .unwrap();
        let plan = plan_retrieval(&u, 2e9, 2, 4).unwrap();
        assert_eq!(plan.symbols, vec!["A", "C", "E"]);
        assert_eq!((plan.requests.len(), plan.days), (6, 2));

        assert!(matches!(
            plan_retrieval(&u, 1e12, 2, 4),
            Err(IngestionError::EmptyUniverse)
        ));
        assert!(matches!(plan_retrieval(&u, 0.0, 2, 0), Err(IngestionError::InvalidBudget)));
    }

    #[test]
    fn policy_gap_must_match_rate() {
        assert!(RateLimitPolicy::new(5, 500, Duration::from_secs(11)).is_err());
        assert!(RateLimitPolicy::new(5, 500, Duration::from_secs(12)).is_ok());
    }

    fn plan_for(m: &SyntheticMarket, symbols: usize, chunks: usize) -> RetrievalPlan {
        let entries = m.series[..symbols]
            .iter()
            .map(|s| (s.symbol.clone(), 3e9))
            .collect();
        plan_retrieval(&Universe::new(entries).unwrap(), 2e9, chunks, 500).unwrap()
    }

    #[test]
    fn ten_requests_take_at_least_108_seconds() {
        let m = market(5);
        let provider = MockHistoricalProvider::new(m.series.clone(), m.last_date());
        let plan = plan_for(&m, 5, 2);
        let clock = SimulatedClock::new(t0());
        let mut cp = FetchCheckpoint::new();
        let mut store = MemoryChunkStore::default();
        let out = run_retrieval(
            &plan,
            &provider,
            RateLimitPolicy::historical_default(),
            &mut cp,
            &clock,
            &mut store,
        )
        .unwrap();
        assert_eq!(out.calls, 10);
        assert!((clock.now() - t0()).num_seconds() >= 108);
        assert_eq!(cp.count(ChunkStatus::Done), 10);
    }

    #[test]
    fn resume_skips_done_chunks() {
        let m = market(5);
        let provider = MockHistoricalProvider::new(m.series.clone(), m.last_date());
        let plan = plan_for(&m, 5, 2);
        let clock = SimulatedClock::new(t0());
        let mut cp = FetchCheckpoint::new();
        let mut store = MemoryChunkStore::default();
        let policy = RateLimitPolicy::new(5, 5, Duration::from_secs(12)).unwrap();
        let first = run_retrieval(&plan, &provider, policy, &mut cp, &clock, &mut store).unwrap();
        assert!(first.budget_exhausted);
        assert_eq!(first.calls, 5);
        clock.advance(Duration::from_secs(86_400));
        let before = provider.calls();
        let second = run_retrieval(&plan, &provider, policy, &mut cp, &clock, &mut store).unwrap();
        assert_eq!(provider.calls() - before, 5);
        assert!(!second.budget_exhausted);
        assert_eq!(cp.count(ChunkStatus::Done), 10);
    }

    #[test]
    fn budget_stops_cleanly_with_pending_left() {
        let m = market(6);
        let provider = MockHistoricalProvider::new(m.series.clone(), m.last_date());
        let plan = plan_for(&m, 6, 2);
        let clock = SimulatedClock::new(t0());
        let mut cp = FetchCheckpoint::new();
        let mut store = MemoryChunkStore::default();
        let policy = RateLimitPolicy::new(5, 5, Duration::from_secs(12)).unwrap();
        let out = run_retrieval(&plan, &provider, policy, &mut cp, &clock, &mut store).unwrap();
        assert!(out.budget_exhausted);
        assert_eq!(cp.count(ChunkStatus::Done), 5);
        assert_eq!(cp.count(ChunkStatus::Pending), 7);
        assert_eq!(cp.requests_today, 5);
        // Same day: the persisted counter keeps the budget spent.
        let again = run_retrieval(&plan, &provider, policy, &mut cp, &clock, &mut store).unwrap();
        assert_eq!(again.calls, 0);
    }

    #[test]
    fn failed_chunks_retry_then_give_up() {
        let m = market(1);
        let sym = m.series[0].symbol.clone();
        let provider = MockHistoricalProvider::new(m.series.clone(), m.last_date())
            .fail_once(&sym, 0)
            .fail_always(&sym, 1);
        let plan = plan_for(&m, 1, 2);
        let clock = SimulatedClock::new(t0());
        let mut cp = FetchCheckpoint::new();
        let mut store = MemoryChunkStore::default();
        let policy = RateLimitPolicy::historical_default();
        let out = run_retrieval(&plan, &provider, policy, &mut cp, &clock, &mut store).unwrap();
        assert_eq!(out.failed.len(), 2);
        for _ in 0..4 {
            run_retrieval(&plan, &provider, policy, &mut cp, &clock, &mut store).unwrap();
        }
        assert_eq!(cp.status(&sym, 0), ChunkStatus::Done);
        let e = cp.entry(&sym, 1);
        assert_eq!((e.status, e.attempts), (ChunkStatus::Failed, MAX_CHUNK_ATTEMPTS));
        assert_eq!(provider.calls(), 2 + 1 + 2);
    }

    #[test]
    fn done_never_reverts() {
        let mut cp = FetchCheckpoint::new();
        cp.mark_done("A", 0);
        cp.mark_failed("A", 0);
        assert_eq!(cp.status("A", 0), ChunkStatus::Done);
    }

    #[test]
    fn checkpoint_text_roundtrip() {
        let mut cp = FetchCheckpoint::new();
        cp.register("A", 2);
        cp.mark_done("A", 0);
        cp.mark_failed("B", 1);
        cp.day_stamp = NaiveDate::from_ymd_opt(2024, 1, 2);
        cp.requests_today = 17;
        assert_eq!(FetchCheckpoint::parse(&cp.to_text()).unwrap(), cp);
        assert!(FetchCheckpoint::parse("A,x,done\n").is_err());
        let legacy = FetchCheckpoint::parse("A,0,done\n").unwrap();
        assert_eq!(legacy.entry("A", 0).attempts, 1);
    }

    #[test]
    fn chunk_names() {
        assert_eq!(chunk_file_name("AAPL", 3), "AAPL.chunk3.csv");
        assert_eq!(parse_chunk_file_name("AAPL.chunk3.csv"), Some(("AAPL".into(), 3)));
        assert_eq!(parse_chunk_file_name("AAPL.csv"), None);
    }

    #[test]
    fn chunks_merge_back_to_the_window() {
        let m = market(1);
        let s = &m.series[0];
        let provider = MockHistoricalProvider::new(m.series.clone(), m.last_date());
        let fragments: Vec<StockSeries> = (0..3)
            .rev()
            .map(|c| marketdata::parse_series_csv(&provider.fetch_chunk(&s.symbol, c).unwrap(), &s.symbol).unwrap())
            .collect();
        let merged = marketdata::merge_chunks(&fragments).unwrap();
        let (from, _) = provider.chunk_window(2);
        assert_eq!(merged, s.slice_dates(from, m.last_date()));
    }

    #[test]
    fn recent_batches_and_partial_results() {
        let m = market(4);
        let clock = SimulatedClock::new(t0());
        let gate = RateLimiter::new(RateLimitPolicy::recent_default());
        let provider = MockRecentProvider::new(m.series.clone()).with_batch_size(3);
        let mut symbols: Vec<String> = m.series.iter().map(|s| s.symbol.clone()).collect();
        let data = fetch_recent_all(&symbols, 22, &provider, &gate, &clock).unwrap();
        assert_eq!(data.requests, 2);
        assert!(data.series.values().all(|s| s.len() == 22));

        symbols.push("NOPE1".into());
        symbols.push("NOPE2".into());
        match fetch_recent_all(&symbols, 22, &provider, &gate, &clock) {
            Err(IngestionError::PartialResult { found, missing, .. }) => {
                assert_eq!(missing, vec!["NOPE1".to_string(), "NOPE2".to_string()]);
                assert_eq!(found.len(), 4);
            }
            other => panic!("expected partial result, got {other:?}"),
        }
    }

    #[test]
    fn recent_request_count_is_ceiling() {
        struct Counting;
        impl RecentProvider for Counting {
            fn fetch_recent(&self, symbols: &[String], _days: usize) -> Result<Vec<StockSeries>, ProviderError> {
                assert!(symbols.len() <= RECENT_BATCH_SIZE);
                Ok(symbols.iter().map(|s| {
                    let bar = marketdata::Bar::new(NaiveDate::from_ymd_opt(2024, 1, 2).unwrap(), 1.0, 1.0, 1.0, 1.0, 1).unwrap();
                    StockSeries::new(s.clone(), vec![bar]).unwrap()
                }).collect())
            }
        }
        let clock = SimulatedClock::new(t0());
        let gate = RateLimiter::new(RateLimitPolicy::recent_default());
        for (n, batches) in [(760, 1), (2500, 3), (1000, 1), (1001, 2)] {
            let symbols: Vec<String> = (0..n).map(|i| format!("S{i}")).collect();
            let data = fetch_recent_all(&symbols, 22, &Counting, &gate, &clock).unwrap();
            assert_eq!(data.requests, batches);
            assert_eq!(data.series.len(), n);
        }
    }
}

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::NaiveDate;
use knntrade_core::backtest::{run_backtest, BacktestConfig, FillPolicy};
use knntrade_core::clock::{Clock, SimulatedClock, SystemClock};
use knntrade_core::features::{build_dataset, Dataset, Prefilter};
use knntrade_core::ingestion::{
    self, merge_chunk_files, plan_retrieval, run_retrieval, series_file_name, ChunkStatus, DirChunkStore, FetchCheckpoint,
    MockHistoricalProvider, MockRecentProvider, RateLimitPolicy, RateLimiter,
};
use knntrade_core::knn::{self, EnsembleModel, KnnModel};
use knntrade_core::marketdata::{build_calendar, parse_series_csv, write_series_csv, StockSeries, Universe};
use knntrade_core::quality::{self, ExpectedFile, QualityReport};
use knntrade_core::synthetic::{SyntheticMarket, SyntheticParams};
use knntrade_core::trader::{self, daily_cycle, CycleConfig, CycleContext, CycleStatus, FileSink, LogMode, MockBroker, PredictionLogger};
use knntrade_core::tuning::{self, Budget, KnnLearner, Learner, PsoConfig, SelectionValidator, Validator};

use crate::{CliError, Command, Config, Layout, Method, RangeArgs, ValidatorArg, Which};

type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn dispatch(command: &Command, config: &Config) -> Result<String> {
    let layout = Layout::new(&config.data_dir);
    match command {
        Command::FetchHistorical(a) => fetch_historical(config, &layout, a),
        Command::Merge => merge(config, &layout),
        Command::Validate(a) => validate(config, &layout, a.delete),
        Command::ExtractFeatures(r) => extract_features(config, &layout, r),
        Command::Train(a) => train(config, &layout, &a.range, a.k.unwrap_or(config.k)),
        Command::Tune(a) => tune(config, &layout, a),
        Command::SelectModel(a) => select_model(config, &layout, a),
        Command::Importance(a) => importance(&layout, a),
        Command::Drift(a) => drift(&layout, a),
        Command::Backtest(a) => backtest(config, &layout, a),
        Command::Promote(r) => promote(&layout, r),
        Command::Run(a) => run(config, &layout, a),
        Command::Report => report(config, &layout),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn read_file(path: &Path, what: &'static str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::domain("IoError", format!("{what} {}: {e}", path.display())))
}

fn prefilter(config: &Config) -> Prefilter {
    Prefilter {
        min_gain: config.prefilter_min_gain,
        rule: config.prefilter_rule,
    }
}

fn load_universe(config: &Config) -> Result<Universe> {
    let path = config.resolve(&config.universe);
    Ok(Universe::parse_csv(&read_file(&path, "universe")?)?)
}

fn universe_symbols(config: &Config) -> Result<Vec<String>> {
    Ok(load_universe(config)?
        .symbols_with_min_cap(config.min_market_cap)
        .into_iter()
        .map(str::to_string)
        .collect())
}

fn series_paths(layout: &Layout) -> Result<Vec<PathBuf>> {
    let dir = layout.series();
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    Ok(paths)
}

fn load_all_series(layout: &Layout) -> Result<Vec<StockSeries>> {
    let mut out = Vec::new();
    for path in series_paths(layout)? {
        let symbol = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        out.push(parse_series_csv(&read_file(&path, "series")?, &symbol)?);
    }
    if out.is_empty() {
        return Err(CliError::domain("MarketDataError", "no merged series found; run `merge` first"));
    }
    Ok(out)
}

/// Symbols excluded by the last `validate` run.
fn excluded_symbols(layout: &Layout) -> Result<BTreeSet<String>> {
    let path = layout.quality();
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    Ok(read_file(&path, "quality report")?
        .lines()
        .skip(1)
        .filter_map(|l| {
            let mut f = l.split(',');
            let symbol = f.next()?;
            (f.next()? != "retained").then(|| symbol.to_string())
        })
        .collect())
}

fn retained_series(layout: &Layout) -> Result<Vec<StockSeries>> {
    let excluded = excluded_symbols(layout)?;
    Ok(load_all_series(layout)?
        .into_iter()
        .filter(|s| !excluded.contains(&s.symbol))
        .collect())
}

fn within(range: &RangeArgs, d: NaiveDate) -> bool {
    range.from.is_none_or(|f| d >= f) && range.to.is_none_or(|t| d <= t)
}

fn load_dataset(layout: &Layout, range: &RangeArgs) -> Result<Dataset> {
    let ds = Dataset::parse_csv(&read_file(&layout.dataset(), "dataset")?)?;
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| within(range, ds.points[i].date)).collect();
    if keep.is_empty() {
        return Err(CliError::domain("FeatureError", "no dataset points in the requested range"));
    }
    Ok(ds.subset(&keep))
}

fn load_model(layout: &Layout, which: Which) -> Result<EnsembleModel> {
    let dir = match which {
        Which::Current => layout.current_model(),
        Which::Candidate => layout.candidate_model(),
    };
    if !dir.join("manifest.txt").exists() {
        let hint = match which {
            Which::Current => "no promoted ensemble; run `train` and `promote`",
            Which::Candidate => "no candidate ensemble; run `train`",
        };
        return Err(CliError::domain("KnnError", hint));
    }
    Ok(knn::load_ensemble(&dir)?)
}

fn model_at(ensemble: &EnsembleModel, threshold: f64) -> Result<KnnModel> {
    ensemble
        .models()
        .iter()
        .find(|m| (m.threshold() - threshold).abs() < 1e-12)
        .cloned()
        .ok_or_else(|| {
            CliError::domain(
                "KnnError",
                format!("ensemble has no model at threshold {threshold}; thresholds are {:?}", ensemble.thresholds()),
            )
        })
}

fn fetch_historical(config: &Config, layout: &Layout, a: &crate::FetchArgs) -> Result<String> {
    let market = SyntheticMarket::generate(&SyntheticParams {
        symbols: a.symbols,
        days: a.days,
        start: a.start,
        seed: a.seed,
        ..SyntheticParams::default()
    });
    write_file(&config.resolve(&config.universe), &market.universe.to_csv())?;
    let per_day = a.budget.unwrap_or(config.requests_per_day);
    let policy = RateLimitPolicy::new(
        config.requests_per_minute,
        per_day,
        Duration::from_secs_f64(60.0 / config.requests_per_minute.max(1) as f64),
    )?;
    let plan = plan_retrieval(&market.universe, config.min_market_cap, config.chunks_per_stock, per_day.max(1) as usize)?;
    let provider = MockHistoricalProvider::new(market.series.clone(), market.last_date());
    let mut checkpoint = if layout.checkpoint().exists() {
        FetchCheckpoint::load(&layout.checkpoint())?
    } else {
        FetchCheckpoint::new()
    };
    // the offline source answers instantly, so the limits run on simulated time
    let start = SystemClock.now();
    let clock = SimulatedClock::new(start);
    let mut store = DirChunkStore::new(layout.chunks())?;
    let outcome = run_retrieval(&plan, &provider, policy, &mut checkpoint, &clock, &mut store)?;
    checkpoint.save(&layout.checkpoint())?;

    let mut s = String::new();
    let _ = writeln!(s, "source: synthetic market, {} symbols, seed {}", a.symbols, a.seed);
    let _ = writeln!(
        s,
        "plan: {} stocks x {} chunks = {} requests, {} day(s) at {} per day",
        plan.symbols.len(),
        plan.chunks_per_stock,
        plan.requests.len(),
        plan.days,
        per_day
    );
    let _ = writeln!(
        s,
        "this run: {} requests, {} stored, {} failed, simulated time {} s",
        outcome.calls,
        outcome.stored,
        outcome.failed.len(),
        (clock.now() - start).num_seconds()
    );
    let _ = writeln!(
        s,
        "checkpoint: {} done, {} failed, {} pending",
        checkpoint.count(ChunkStatus::Done),
        checkpoint.count(ChunkStatus::Failed),
        checkpoint.count(ChunkStatus::Pending)
    );
    if outcome.budget_exhausted {
        let _ = writeln!(s, "daily budget exhausted; rerun to resume");
    }
    Ok(s)
}

fn merge(config: &Config, layout: &Layout) -> Result<String> {
    let symbols = universe_symbols(config)?;
    std::fs::create_dir_all(layout.series())?;
    let mut merged = 0;
    let mut bars = 0;
    let mut empty = Vec::new();
    for symbol in &symbols {
        let series = merge_chunk_files(&layout.chunks(), symbol)?;
        if series.is_empty() {
            empty.push(symbol.clone());
            continue;
        }
        bars += series.len();
        merged += 1;
        write_file(&layout.series().join(series_file_name(symbol)), &write_series_csv(&series))?;
    }
    let mut s = format!("merged {merged} stocks, {bars} bars\n");
    if !empty.is_empty() {
        let _ = writeln!(s, "no chunks for: {}", empty.join(" "));
    }
    Ok(s)
}

fn validate(config: &Config, layout: &Layout, delete: bool) -> Result<String> {
    let symbols = universe_symbols(config)?;
    let checkpoint = if layout.checkpoint().exists() {
        FetchCheckpoint::load(&layout.checkpoint())?
    } else {
        FetchCheckpoint::new()
    };
    let expected_chunks: Vec<ExpectedFile> = checkpoint
        .iter()
        .filter(|(sym, _, _)| symbols.iter().any(|s| s == sym))
        .map(|(symbol, chunk, _)| ExpectedFile {
            symbol: symbol.to_string(),
            chunk: Some(chunk),
        })
        .collect();
    let chunk_paths: Vec<PathBuf> = match std::fs::read_dir(layout.chunks()) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
        Err(_) => Vec::new(),
    };
    // chunk files only need to exist; the line rule applies to merged files
    let chunk_report = quality::validate_chunks(&chunk_paths, &expected_chunks, 0);
    let expected_series: Vec<ExpectedFile> = symbols
        .iter()
        .map(|s| ExpectedFile {
            symbol: s.clone(),
            chunk: None,
        })
        .collect();
    let file_report = quality::validate_chunks(&series_paths(layout)?, &expected_series, config.min_lines);

    let usable: Vec<StockSeries> = load_all_series(layout)?
        .into_iter()
        .filter(|s| !file_report.is_excluded(&s.symbol))
        .collect();
    let gap_report = if usable.is_empty() {
        QualityReport::default()
    } else {
        let calendar = build_calendar(&usable, config.calendar_quorum)?;
        quality::detect_gaps(&usable, &calendar, config.max_consecutive_missing)
    };
    let report = chunk_report.merge(file_report).merge(gap_report);
    let summary = quality::quality_summary(&report);
    write_file(&layout.quality(), &report.to_csv())?;
    write_file(&layout.quality_summary(), &summary.to_csv())?;
    let touched = quality::delete_short_files(&report, !delete)?;

    let mut s = format!("checked {} stocks: {summary}\n", symbols.len());
    for (symbol, reason) in report.excluded() {
        let _ = writeln!(s, "excluded {symbol}: {}", reason.as_str());
    }
    for path in &touched {
        let verb = if delete { "deleted" } else { "would delete" };
        let _ = writeln!(s, "{verb} {}", path.display());
    }
    let _ = writeln!(s, "retained {} stocks", symbols.len() - report.excluded_symbols().len().min(symbols.len()));
    Ok(s)
}

fn extract_features(config: &Config, layout: &Layout, range: &RangeArgs) -> Result<String> {
    let series = retained_series(layout)?;
    let calendar = build_calendar(&series, config.calendar_quorum)?;
    let ds = build_dataset(&series, &calendar, &prefilter(config))?;
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| within(range, ds.points[i].date)).collect();
    let ds = ds.subset(&keep);
    write_file(&layout.dataset(), &ds.to_csv())?;
    let mut s = format!("{} points from {} stocks", ds.len(), series.len());
    if let (Some(first), Some(last)) = (ds.points.iter().map(|p| p.date).min(), ds.points.iter().map(|p| p.date).max()) {
        let _ = write!(s, ", {first} to {last}");
    }
    s.push('\n');
    Ok(s)
}

fn next_seq(layout: &Layout) -> u64 {
    [layout.current_model(), layout.candidate_model()]
        .iter()
        .filter_map(|d| knn::load_ensemble(d).ok())
        .map(|e| e.version().seq)
        .max()
        .unwrap_or(0)
        + 1
}

fn train(config: &Config, layout: &Layout, range: &RangeArgs, k: usize) -> Result<String> {
    let ds = load_dataset(layout, range)?;
    let ensemble = knn::train_ensemble(&ds, &config.thresholds, &[k], next_seq(layout))?;
    let dir = layout.candidate_model();
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    knn::save_ensemble(&ensemble, &dir)?;
    let mut s = format!("candidate {} trained on {} points, k={k}\n", ensemble.version(), ds.len());
    for m in ensemble.models() {
        let positives = m.labels().iter().filter(|&&l| l).count();
        let _ = writeln!(s, "  t={:<6} positives {positives}", m.threshold());
    }
    Ok(s)
}

fn budget(max_evals: Option<usize>, max_seconds: Option<u64>) -> Budget {
    Budget {
        max_evaluations: max_evals,
        max_duration: max_seconds.map(Duration::from_secs),
    }
}

fn k_range(config: &Config, n: usize) -> Result<std::ops::RangeInclusive<usize>> {
    let hi = config.k_max.min(n.saturating_sub(1));
    if config.k_min == 0 || config.k_min > hi {
        return Err(CliError::domain(
            "TuningError",
            format!("k range {}..={} does not fit {n} points", config.k_min, config.k_max),
        ));
    }
    Ok(config.k_min..=hi)
}

fn tune(config: &Config, layout: &Layout, a: &crate::TuneArgs) -> Result<String> {
    let ds = load_dataset(layout, &RangeArgs::default())?;
    let range = k_range(config, ds.len())?;
    let budget = budget(a.max_evals, a.max_seconds);
    let mut s = format!("seed {}\n", a.seed);
    match a.method {
        Method::Grid => {
            let validator = match a.validator {
                ValidatorArg::Loocv => Validator::Loocv,
                ValidatorArg::Holdout => Validator::Holdout {
                    test_fraction: 0.25,
                    repeats: 3,
                    seed: a.seed,
                },
            };
            let r = tuning::grid_search_k(&ds, a.threshold, range.clone(), validator, &budget)?;
            write_file(&layout.tune().join("grid.csv"), &r.to_csv())?;
            let _ = writeln!(
                s,
                "grid over k={}..={} ({} evaluated): best k={} precision {:.4}",
                range.start(),
                range.end(),
                r.table.len(),
                r.best_k,
                r.best_precision
            );
        }
        Method::Pso => {
            let cfg = PsoConfig {
                particles: a.particles,
                iterations: a.iterations,
                seed: a.seed,
                ..PsoConfig::default()
            };
            let r = tuning::pso_tune_k(&ds, a.threshold, range, &cfg, &budget)?;
            write_file(&layout.tune().join("trace.csv"), &tuning::trace_csv(&r.pso.trace))?;
            let _ = writeln!(
                s,
                "pso ({} evaluations): best k={} precision {:.4}",
                r.pso.evaluations, r.k, r.precision
            );
        }
    }
    Ok(s)
}

fn select_model(config: &Config, layout: &Layout, a: &crate::SelectArgs) -> Result<String> {
    let ds = load_dataset(layout, &RangeArgs::default())?;
    let train_size = ds.len() - (ds.len() as f64 * a.test_fraction).round() as usize;
    let knn = KnnLearner::new(k_range(config, train_size)?);
    let candidates: [&dyn Learner; 3] = [&knn, &tuning::MajorityClass, &tuning::DecisionStump];
    let validator = SelectionValidator {
        test_fraction: a.test_fraction,
        repeats: a.repeats,
        seed: a.seed,
    };
    let board = tuning::select_model(&candidates, &ds, a.threshold, &validator)?;
    write_file(&layout.leaderboard(), &board.to_csv())?;
    Ok(format!("seed {}\n{board}winner: {}\n", a.seed, board.winner().name))
}

fn importance(layout: &Layout, a: &crate::ImportanceArgs) -> Result<String> {
    let ds = load_dataset(layout, &RangeArgs::default())?;
    let model = model_at(&load_model(layout, a.model)?, a.threshold)?;
    let report = tuning::feature_importance(&model, &ds, a.seed, a.repeats, "full extracted dataset")?;
    write_file(&layout.importance(), &report.to_csv())?;
    Ok(format!("seed {}\n{report}", a.seed))
}

fn drift(layout: &Layout, a: &crate::DriftArgs) -> Result<String> {
    let ds = load_dataset(layout, &RangeArgs::default())?;
    let model = model_at(&load_model(layout, a.model)?, a.threshold)?;
    let report = tuning::drift_report(&model, &ds, (a.from, a.to), a.samples, a.seed)?;
    write_file(&layout.drift(), &report.to_csv())?;
    Ok(format!("seed {}\n{report}\n", a.seed))
}

fn backtest(config: &Config, layout: &Layout, a: &crate::BacktestArgs) -> Result<String> {
    let ensemble = match (a.model, load_model(layout, a.model)) {
        (_, Ok(e)) => e,
        (Which::Current, Err(_)) => load_model(layout, Which::Candidate)?,
        (_, Err(e)) => return Err(e),
    };
    let series = retained_series(layout)?;
    let calendar = build_calendar(&series, config.calendar_quorum)?;
    let base = BacktestConfig {
        top_n: config.top_n,
        stop_loss_frac: config.stop_loss_frac,
        capital: config.capital,
        policy: config.fill_policy,
        fee: config.fee,
        prefilter: prefilter(config),
    };
    let other_policy = match config.fill_policy {
        FillPolicy::Pessimistic => FillPolicy::Optimistic,
        FillPolicy::Optimistic => FillPolicy::Pessimistic,
    };
    let main = run_backtest(&series, &calendar, &ensemble, (a.from, a.to), &base)?;
    let other = run_backtest(
        &series,
        &calendar,
        &ensemble,
        (a.from, a.to),
        &BacktestConfig {
            policy: other_policy,
            ..base.clone()
        },
    )?;
    let dir = layout.backtest();
    write_file(&dir.join("trades.csv"), &main.trades_csv())?;
    write_file(&dir.join("equity.csv"), &main.equity_csv())?;
    let summary = format!("ensemble {}\n\n{}\n{}", ensemble.version(), main.summary(), other.summary());
    write_file(&dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

fn promote(layout: &Layout, range: &RangeArgs) -> Result<String> {
    let candidate = load_model(layout, Which::Candidate)?;
    let current_dir = layout.current_model();
    let decision = if current_dir.join("manifest.txt").exists() {
        let incumbent = knn::load_ensemble(&current_dir)?;
        let validation = load_dataset(layout, range)?;
        let d = tuning::promotion_gate_ensemble(&candidate, &incumbent, &validation)?;
        format!("{d}\n")
            .replace("candidate", &format!("candidate {}", candidate.version()))
            .replace("incumbent", &format!("incumbent {}", incumbent.version()))
            .to_string()
            + if d.accept { "" } else { "current ensemble kept\n" }
    } else {
        format!("accept: no current ensemble, installing candidate {}\n", candidate.version())
    };
    if decision.starts_with("accept") {
        if current_dir.exists() {
            std::fs::remove_dir_all(&current_dir)?;
        }
        knn::save_ensemble(&candidate, &current_dir)?;
    }
    Ok(decision)
}

fn run(config: &Config, layout: &Layout, a: &crate::RunArgs) -> Result<String> {
    if !a.paper {
        return Err(CliError::Usage(
            "no live broker client is built in; use `run --paper` to trade against the simulated broker".into(),
        ));
    }
    let mode: LogMode = match &a.log_mode {
        Some(m) => m.parse().map_err(CliError::Usage)?,
        None => config.log_mode,
    };
    let ensemble = load_model(layout, Which::Current)?;
    let series = load_all_series(layout)?;
    let symbols = universe_symbols(config)?;
    let last_run = trader::last_duration(&layout.durations());
    if let Some(w) = config.schedule().lead_warning(last_run) {
        log::warn!("{w}");
    }
    std::fs::create_dir_all(layout.logs())?;
    let clock = SimulatedClock::new(a.date.and_hms_opt(0, 0, 0).expect("midnight"));
    let provider = MockRecentProvider::new(series.clone()).before(a.date);
    let gate = RateLimiter::new(RateLimitPolicy::recent_default());
    let mut broker = MockBroker::new(&series, config.capital, config.fill_policy);
    let mut logger = PredictionLogger::new(FileSink::new(layout.predictions()), mode);
    let cycle_config = CycleConfig {
        schedule: config.schedule(),
        top_n: config.top_n,
        stop_loss_frac: config.stop_loss_frac,
        prefilter: prefilter(config),
        recent_days: config.recent_days,
        max_consecutive_missing: config.max_consecutive_missing,
        calendar_quorum: config.calendar_quorum,
        lock_dir: layout.locks(),
        durations_file: Some(layout.durations()),
    };
    let report = daily_cycle(
        a.date,
        CycleContext {
            clock: &clock,
            provider: &provider,
            gate: &gate,
            symbols: &symbols,
            ensemble: &ensemble,
            broker: &mut broker,
            logger: &mut logger,
        },
        &cycle_config,
    )?;
    log::info!("prediction batch took {:.3} s", report.prediction_seconds);
    if report.status == CycleStatus::AlreadyRan {
        return Ok(format!("{}: already traded, nothing done\n", a.date));
    }
    let mut s = format!(
        "{} paper trading with ensemble {} (log mode {})\n",
        a.date,
        ensemble.version(),
        mode.as_str()
    );
    let _ = writeln!(
        s,
        "fetched {} (missing {}), excluded {}, predicted {}, positives {}",
        report.fetched,
        report.missing.len(),
        report.excluded.len(),
        report.ranked.len(),
        report.positives
    );
    for (id, o) in &report.orders {
        let _ = writeln!(
            s,
            "order {} {} x{} entry {} take-profit {:.4} stop-loss {:.4}",
            id.0, o.symbol, o.quantity, o.entry_price, o.take_profit_price, o.stop_loss_price
        );
    }
    for r in &report.rejections {
        let _ = writeln!(s, "rejected: {r}");
    }
    for f in &report.fills {
        let _ = writeln!(s, "exit {} at {} ({}) pnl {:.2}", f.plan.symbol, f.exit_price, f.exit_reason.as_str(), f.pnl);
    }
    let _ = writeln!(s, "day pnl {:.2}; logged {} records", report.pnl(), report.logged);
    for w in &report.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    Ok(s)
}

fn count_lines(path: &Path) -> Option<usize> {
    std::fs::read_to_string(path).ok().map(|t| t.lines().count())
}

fn report(config: &Config, layout: &Layout) -> Result<String> {
    let mut s = format!("data directory {}\n", layout.root().display());
    if let Ok(u) = load_universe(config) {
        let _ = writeln!(
            s,
            "universe: {} stocks, {} above cap filter",
            u.len(),
            u.symbols_with_min_cap(config.min_market_cap).len()
        );
    }
    if let Ok(cp) = FetchCheckpoint::load(&layout.checkpoint()) {
        let _ = writeln!(
            s,
            "chunks: {} done, {} failed, {} pending",
            cp.count(ChunkStatus::Done),
            cp.count(ChunkStatus::Failed),
            cp.count(ChunkStatus::Pending)
        );
    }
    let _ = writeln!(s, "merged series: {}", series_paths(layout)?.len());
    if let Ok(text) = std::fs::read_to_string(layout.quality_summary()) {
        if let Some(row) = text.lines().nth(1) {
            let _ = writeln!(s, "quality (gapped,missing days,largest gap,excluded,short,missing files): {row}");
        }
    }
    if let Some(n) = count_lines(&layout.dataset()) {
        let _ = writeln!(s, "dataset: {} points", n.saturating_sub(1));
    }
    for (name, dir) in [("current", layout.current_model()), ("candidate", layout.candidate_model())] {
        if let Ok(e) = knn::load_ensemble(&dir) {
            let _ = writeln!(s, "{name} ensemble: {} ({} models)", e.version(), e.len());
        }
    }
    if let Ok(text) = std::fs::read_to_string(layout.backtest().join("summary.txt")) {
        let _ = writeln!(s, "last backtest:");
        for line in text.lines().filter(|l| !l.is_empty()) {
            let _ = writeln!(s, "  {line}");
        }
    }
    if let Some(n) = count_lines(&layout.predictions()) {
        let _ = writeln!(s, "prediction log: {} records", n.saturating_sub(1));
    }
    if let Some(d) = trader::last_duration(&layout.durations()) {
        let _ = writeln!(s, "last prediction batch: {d:.3} s");
    }
    let _ = ingestion::MAX_CHUNK_ATTEMPTS;
    Ok(s)
}

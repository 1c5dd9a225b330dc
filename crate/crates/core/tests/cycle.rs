use std::collections::BTreeSet;

use chrono::NaiveDate;

use knntrade_core::backtest::FillPolicy;
use knntrade_core::clock::{Clock, SimulatedClock};
use knntrade_core::features::{build_dataset, Prefilter};
use knntrade_core::ingestion::{MockRecentProvider, RateLimitPolicy, RateLimiter};
use knntrade_core::knn::{default_thresholds, train_ensemble, EnsembleModel};
use knntrade_core::marketdata::build_calendar;
use knntrade_core::synthetic::{remove_days, SyntheticMarket, SyntheticParams};
use knntrade_core::trader::{
    daily_cycle, parse_prediction_log, Broker, CycleConfig, CycleContext, CycleReport, CycleStatus, LogMode, MemorySink,
    MockBroker, PredictionLogger, TraderError,
};
use knntrade_core::StockSeries;

struct Setup {
    market: SyntheticMarket,
    day: NaiveDate,
    ensemble: EnsembleModel,
    symbols: Vec<String>,
}

fn setup() -> Setup {
    let market = SyntheticMarket::generate(&SyntheticParams::default());
    let day = market.last_date();
    let history: Vec<StockSeries> = market.series.iter().map(|s| s.slice_dates(s.bars()[0].date, day.pred_opt().unwrap())).collect();
    let calendar = build_calendar(&history, 0.5).unwrap();
    let ds = build_dataset(&history, &calendar, &Prefilter::disabled()).unwrap();
    let ensemble = train_ensemble(&ds, &default_thresholds(), &[5], 1).unwrap();
    let symbols = market.series.iter().map(|s| s.symbol.clone()).collect();
    Setup {
        market,
        day,
        ensemble,
        symbols,
    }
}

fn config(dir: &std::path::Path) -> CycleConfig {
    CycleConfig {
        prefilter: Prefilter::disabled(),
        ..CycleConfig::new(dir)
    }
}

fn run(
    s: &Setup,
    provider_series: Vec<StockSeries>,
    broker: &mut MockBroker,
    logger: &mut PredictionLogger<MemorySink>,
    cfg: &CycleConfig,
) -> Result<CycleReport, TraderError> {
    let clock = SimulatedClock::new(s.day.and_hms_opt(0, 0, 0).unwrap());
    let provider = MockRecentProvider::new(provider_series).before(s.day);
    let gate = RateLimiter::new(RateLimitPolicy::recent_default());
    let report = daily_cycle(
        s.day,
        CycleContext {
            clock: &clock,
            provider: &provider,
            gate: &gate,
            symbols: &s.symbols,
            ensemble: &s.ensemble,
            broker,
            logger,
        },
        cfg,
    );
    if report.as_ref().is_ok_and(|r| r.status == CycleStatus::Completed) {
        assert_eq!(clock.now(), cfg.schedule.liquidation_at(s.day));
    }
    report
}

#[test]
fn orders_match_top_five_and_log() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut broker = MockBroker::new(&s.market.series, 100_000.0, FillPolicy::Pessimistic);
    let mut logger = PredictionLogger::new(MemorySink::default(), LogMode::Full);
    let report = run(&s, s.market.series.clone(), &mut broker, &mut logger, &config(dir.path())).unwrap();

    assert!(report.positives > 0, "fixture should produce positives");
    assert_eq!(report.orders.len(), report.positives.min(5));
    assert!(broker.account().positions.is_empty());
    assert_eq!(report.fills.len(), report.orders.len());

    let records = parse_prediction_log(&logger.sink().text).unwrap();
    assert_eq!(records.len(), report.ranked.len());
    let invested: BTreeSet<String> = records.iter().filter(|r| r.invested).map(|r| r.symbol.clone()).collect();
    let ordered: BTreeSet<String> = report.orders.iter().map(|(_, o)| o.symbol.clone()).collect();
    assert_eq!(invested, ordered);
    assert!(records.iter().all(|r| r.version == s.ensemble.version().to_string()));
}

#[test]
fn gap_stocks_sit_out() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let cal_days: Vec<NaiveDate> = s.market.series[0].history_before(s.day).iter().rev().take(10).map(|b| b.date).collect();
    let gap = &cal_days[4..7];
    let damaged: BTreeSet<String> = ["SYM001", "SYM004", "SYM007"].iter().map(|x| x.to_string()).collect();
    let provider_series: Vec<StockSeries> = s
        .market
        .series
        .iter()
        .map(|x| if damaged.contains(&x.symbol) { remove_days(x, gap) } else { x.clone() })
        .collect();
    let mut broker = MockBroker::new(&s.market.series, 100_000.0, FillPolicy::Pessimistic);
    let mut logger = PredictionLogger::new(MemorySink::default(), LogMode::Full);
    let report = run(&s, provider_series, &mut broker, &mut logger, &config(dir.path())).unwrap();
    assert_eq!(report.excluded.iter().cloned().collect::<BTreeSet<_>>(), damaged);
    assert!(report.ranked.iter().all(|r| !damaged.contains(&r.symbol)));
    assert!(report.orders.iter().all(|(_, o)| !damaged.contains(&o.symbol)));
}

#[test]
fn second_run_same_day_does_nothing() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut broker = MockBroker::new(&s.market.series, 100_000.0, FillPolicy::Pessimistic);
    let mut logger = PredictionLogger::new(MemorySink::default(), LogMode::Full);
    let cfg = config(dir.path());
    let first = run(&s, s.market.series.clone(), &mut broker, &mut logger, &cfg).unwrap();
    let submitted = broker.submitted().len();
    let second = run(&s, s.market.series.clone(), &mut broker, &mut logger, &cfg).unwrap();
    assert_eq!(first.status, CycleStatus::Completed);
    assert_eq!(second.status, CycleStatus::AlreadyRan);
    assert_eq!(broker.submitted().len(), submitted);
}

#[test]
fn no_data_means_no_orders() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut broker = MockBroker::new(&s.market.series, 100_000.0, FillPolicy::Pessimistic);
    let mut logger = PredictionLogger::new(MemorySink::default(), LogMode::Full);
    let err = run(&s, Vec::new(), &mut broker, &mut logger, &config(dir.path())).unwrap_err();
    assert!(matches!(err, TraderError::DataUnavailable(_)));
    assert!(broker.submitted().is_empty());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn partial_data_trades_the_rest() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut broker = MockBroker::new(&s.market.series, 100_000.0, FillPolicy::Pessimistic);
    let mut logger = PredictionLogger::new(MemorySink::default(), LogMode::Full);
    let some: Vec<StockSeries> = s.market.series.iter().skip(2).cloned().collect();
    let report = run(&s, some, &mut broker, &mut logger, &config(dir.path())).unwrap();
    assert_eq!(report.missing, vec!["SYM000".to_string(), "SYM001".to_string()]);
    assert!(report.ranked.iter().all(|r| r.symbol != "SYM000" && r.symbol != "SYM001"));
}

#[test]
fn rejection_does_not_stop_other_orders() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut probe_broker = MockBroker::new(&s.market.series, 100_000.0, FillPolicy::Pessimistic);
    let mut probe_logger = PredictionLogger::new(MemorySink::default(), LogMode::Full);
    let probe = run(&s, s.market.series.clone(), &mut probe_broker, &mut probe_logger, &config(dir.path())).unwrap();
    let top = probe.orders[0].1.symbol.clone();

    let dir = tempfile::tempdir().unwrap();
    let mut broker = MockBroker::new(&s.market.series, 100_000.0, FillPolicy::Pessimistic).reject_symbol(&top);
    let mut logger = PredictionLogger::new(MemorySink::default(), LogMode::PositivesOnly);
    let report = run(&s, s.market.series.clone(), &mut broker, &mut logger, &config(dir.path())).unwrap();
    assert_eq!(report.rejections.len(), 1);
    assert_eq!(report.orders.len(), probe.orders.len() - 1);
    let records = parse_prediction_log(&logger.sink().text).unwrap();
    assert!(records.iter().all(|r| r.symbol != top));
    assert_eq!(records.len(), report.orders.len());
}

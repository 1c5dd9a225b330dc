use std::collections::BTreeMap;

use chrono::NaiveDate;
use proptest::prelude::*;

use knntrade_core::backtest::{fill, plan_trades, FillPolicy};
use knntrade_core::features::{Dataset, FeatureVector, LabeledPoint};
use knntrade_core::knn::{self, Prediction, RankedPrediction};
use knntrade_core::marketdata::{build_calendar, merge_chunks, parse_series_csv, write_series_csv};
use knntrade_core::tuning::{gate_decision, pso_minimize, Budget, PsoConfig, SearchSpace};
use knntrade_core::{Bar, StockSeries};

fn day(i: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(i as u64)
}

fn arb_bar(i: u32) -> impl Strategy<Value = Bar> {
    (1u32..50_000, 0u32..500, 0u32..500, 0u32..1000, 0u64..10_000_000).prop_map(move |(open, up, down, c, vol)| {
        let open = open as f64 / 100.0;
        let high = open + up as f64 / 100.0;
        let low = (open - down as f64 / 100.0).max(0.01);
        let close = low + (high - low) * c as f64 / 1000.0;
        let close = (close * 100.0).round() / 100.0;
        Bar::new(day(i), open, high, low, close.clamp(low, high), vol).unwrap()
    })
}

fn arb_series(max_len: u32) -> impl Strategy<Value = StockSeries> {
    proptest::collection::btree_set(0u32..200, 1..max_len as usize)
        .prop_flat_map(|days| days.into_iter().map(arb_bar).collect::<Vec<_>>())
        .prop_map(|bars| StockSeries::new("XYZ", bars).unwrap())
}

proptest! {
    #[test]
    fn series_csv_roundtrip(series in arb_series(40)) {
        let text = write_series_csv(&series);
        prop_assert_eq!(parse_series_csv(&text, "XYZ").unwrap(), series);
    }

    #[test]
    fn merge_ignores_fragment_order(series in arb_series(60), cuts in proptest::collection::vec(0usize..60, 0..4), seed in any::<u64>()) {
        let bars = series.bars();
        let mut bounds: Vec<usize> = cuts.into_iter().map(|c| c % (bars.len() + 1)).collect();
        bounds.push(0);
        bounds.push(bars.len());
        bounds.sort_unstable();
        // overlapping fragments: each one extends one bar into the next
        let mut fragments: Vec<StockSeries> = bounds
            .windows(2)
            .map(|w| StockSeries::new("XYZ", bars[w[0]..(w[1] + 1).min(bars.len())].to_vec()).unwrap())
            .collect();
        let forward = merge_chunks(&fragments).unwrap();
        let n = fragments.len();
        fragments.rotate_left((seed as usize) % n.max(1));
        fragments.reverse();
        prop_assert_eq!(merge_chunks(&fragments).unwrap(), forward.clone());
        prop_assert_eq!(forward, series);
    }

    #[test]
    fn calendar_shrinks_as_quorum_rises(a in arb_series(30), b in arb_series(30), c in arb_series(30)) {
        let set = vec![a, b, c];
        let loose = build_calendar(&set, 1.0 / 3.0).unwrap();
        let strict = build_calendar(&set, 1.0).unwrap();
        for d in strict.trading_days() {
            prop_assert!(loose.contains(*d));
        }
        for d in loose.trading_days() {
            prop_assert!(set.iter().any(|s| s.bar_on(*d).is_some()));
        }
    }

    #[test]
    fn loocv_matches_naive_retraining(
        rows in proptest::collection::vec((proptest::array::uniform7(-3i32..4), -20i32..40), 4..40),
        k in 1usize..4,
    ) {
        // a coarse grid makes distance ties common
        let points: Vec<LabeledPoint> = rows
            .iter()
            .enumerate()
            .map(|(i, (f, l))| LabeledPoint {
                symbol: format!("S{i}"),
                date: day(i as u32),
                features: FeatureVector::from_array(f.map(|v| v as f64)),
                label_value: *l as f64 / 1000.0,
            })
            .collect();
        let ds = Dataset::new(points);
        prop_assume!(ds.len() > k);
        let fast = knn::loocv(&ds, k, 0.016).unwrap();
        let scaler = ds.fit_scaler().unwrap();
        for i in 0..ds.len() {
            let others: Vec<usize> = (0..ds.len()).filter(|&j| j != i).collect();
            let model = knn::train_with_scaler(&ds.subset(&others), k, 0.016, scaler).unwrap();
            let p = model.predict(&ds.points[i].features);
            prop_assert_eq!(p.positive, fast.predictions[i]);
            prop_assert_eq!(p.vote_fraction.to_bits(), fast.vote_fractions[i].to_bits());
        }
    }

    #[test]
    fn pso_trace_never_rises(seed in any::<u64>(), shift in -3.0f64..3.0) {
        let space = SearchSpace::cube(2, -5.0, 5.0).unwrap();
        let cfg = PsoConfig { seed, ..Default::default() };
        let r = pso_minimize(|x| (x[0] - shift).abs() + (x[1] * 3.0).sin(), &space, &cfg, &Budget::unlimited()).unwrap();
        for w in r.trace.windows(2) {
            prop_assert!(w[1].best_value <= w[0].best_value);
        }
    }

    #[test]
    fn promotion_is_antisymmetric(a in proptest::option::of(0.0f64..1.0), b in proptest::option::of(0.0f64..1.0)) {
        prop_assert!(!(gate_decision(a, b).accept && gate_decision(b, a).accept));
    }

    #[test]
    fn trade_returns_stay_in_bracket(
        bar in arb_bar(0),
        score_idx in 0usize..19,
        sl in 0.005f64..0.1,
        optimistic in any::<bool>(),
    ) {
        let score = knn::default_thresholds()[score_idx];
        let ranked = vec![RankedPrediction {
            symbol: "XYZ".into(),
            score,
            vote_fraction: 1.0,
            outputs: vec![Prediction { positive: true, vote_fraction: 1.0 }],
            features: FeatureVector::default(),
        }];
        let opens = BTreeMap::from([("XYZ".to_string(), bar.open)]);
        let plans = plan_trades(bar.date, &ranked, &opens, 1.0e6, 5, sl);
        prop_assume!(!plans.is_empty());
        let policy = if optimistic { FillPolicy::Optimistic } else { FillPolicy::Pessimistic };
        let r = fill(&plans[0], &bar, policy, 0.0).unwrap();
        prop_assert!(r.return_fraction >= -sl && r.return_fraction <= score);
    }
}

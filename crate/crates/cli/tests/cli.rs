use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Fixture {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new(extra: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let config = tmp.path().join("knntrade.conf");
        std::fs::write(
            &config,
            format!("data_dir = {}\nchunks_per_stock = 8\nmin_lines = 50\nprefilter_min_gain = 0\n{extra}", data.display()),
        )
        .unwrap();
        Fixture { _tmp: tmp, config, data }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_knntrade"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    /// Six months of synthetic history from 2020-12-01, merged per stock.
    fn merged(&self) {
        self.ok(&["fetch-historical", "--start", "2020-12-01", "--days", "220", "--symbols", "10"]);
        self.ok(&["merge"]);
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn validate_dry_run_deletes_nothing() {
    let f = Fixture::new("");
    f.merged();
    // every merged file is shorter than this, so all of them are flagged
    let text = std::fs::read_to_string(&f.config).unwrap().replace("min_lines = 50", "min_lines = 1000");
    std::fs::write(&f.config, text).unwrap();
    let before = files_under(&f.data);

    let out = f.run(&["validate", "--dry-run"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("would delete"), "{stdout}");
    let after: Vec<PathBuf> = files_under(&f.data)
        .into_iter()
        .filter(|p| !p.ends_with("quality.csv") && !p.ends_with("quality_summary.csv"))
        .collect();
    assert_eq!(after, before);

    f.ok(&["validate", "--delete"]);
    assert_eq!(std::fs::read_dir(f.data.join("series")).unwrap().count(), 0);
}

#[test]
fn backtest_writes_trades_and_equity() {
    let f = Fixture::new("");
    f.merged();
    f.ok(&["validate"]);
    f.ok(&["extract-features", "--to", "2020-12-31"]);
    f.ok(&["train"]);
    let summary = f.ok(&["backtest", "--from", "2021-01-01", "--to", "2021-06-30"]);
    assert!(summary.contains("policy pessimistic") && summary.contains("policy optimistic"), "{summary}");
    for name in ["trades.csv", "equity.csv", "summary.txt"] {
        assert!(f.data.join("backtest").join(name).is_file(), "{name}");
    }
    let equity = std::fs::read_to_string(f.data.join("backtest/equity.csv")).unwrap();
    assert!(equity.lines().count() > 100);
}

#[test]
fn deterministic_summaries() {
    let f = Fixture::new("");
    f.merged();
    f.ok(&["extract-features"]);
    let a = f.ok(&["tune", "--method", "pso", "--seed", "4", "--max-evals", "12"]);
    let b = f.ok(&["tune", "--method", "pso", "--seed", "4", "--max-evals", "12"]);
    assert_eq!(a, b);
    assert!(a.starts_with("seed 4"));
    assert_eq!(f.ok(&["select-model", "--seed", "2"]), f.ok(&["select-model", "--seed", "2"]));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let f = Fixture::new("");
    let out = f.run(&["validate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("Usage"), "{stderr}");

    let out = f.run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn live_run_is_refused() {
    let f = Fixture::new("");
    let out = f.run(&["run", "--date", "2021-03-01"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("--paper"));
}

#[test]
fn domain_errors_name_their_module() {
    let f = Fixture::new("");
    let out = f.run(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("IoError"));

    let f = Fixture::new("api_key = secret\n");
    let out = f.run(&["report"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("ConfigError: line 5: unknown key `api_key`"));

    let f = Fixture::new("");
    f.merged();
    f.ok(&["extract-features", "--to", "2021-01-20"]);
    f.ok(&["train"]);
    let out = f.run(&["backtest", "--from", "2020-12-02", "--to", "2021-01-20"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("BacktestError"));
}

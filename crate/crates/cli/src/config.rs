//! Flat `key = value` configuration with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveTime;
use knntrade_core::backtest::{FillPolicy, DEFAULT_CAPITAL, DEFAULT_STOP_LOSS_FRAC, DEFAULT_TOP_N};
use knntrade_core::features::{PrefilterRule, DEFAULT_PREFILTER_MIN_GAIN};
use knntrade_core::ingestion::{DEFAULT_CHUNKS_PER_STOCK, DEFAULT_MIN_MARKET_CAP};
use knntrade_core::knn::{default_thresholds, DEFAULT_K};
use knntrade_core::marketdata::DEFAULT_QUORUM;
use knntrade_core::quality::{DEFAULT_MAX_CONSECUTIVE_MISSING, DEFAULT_MIN_LINES};
use knntrade_core::trader::{LogMode, ScheduleConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    BadValue { line: usize, key: String, reason: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub data_dir: PathBuf,
    /// Relative paths resolve against `data_dir`.
    pub universe: PathBuf,
    pub thresholds: Vec<f64>,
    pub k: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub prefilter_min_gain: f64,
    pub prefilter_rule: PrefilterRule,
    pub top_n: usize,
    pub stop_loss_frac: f64,
    pub capital: f64,
    pub fee: f64,
    pub fill_policy: FillPolicy,
    pub log_mode: LogMode,
    pub market_open: NaiveTime,
    pub market_close: NaiveTime,
    pub lead_minutes: u32,
    pub liquidate_minutes: u32,
    pub min_market_cap: f64,
    pub chunks_per_stock: usize,
    pub requests_per_minute: u32,
    pub requests_per_day: u32,
    pub min_lines: usize,
    pub max_consecutive_missing: usize,
    pub calendar_quorum: f64,
    pub recent_days: usize,
}

impl Default for Config {
    fn default() -> Self {
        let schedule = ScheduleConfig::default();
        Config {
            data_dir: PathBuf::from("data"),
            universe: PathBuf::from("universe.csv"),
            thresholds: default_thresholds(),
            k: DEFAULT_K,
            k_min: 5,
            k_max: 50,
            prefilter_min_gain: DEFAULT_PREFILTER_MIN_GAIN,
            prefilter_rule: PrefilterRule::OpenToClose,
            top_n: DEFAULT_TOP_N,
            stop_loss_frac: DEFAULT_STOP_LOSS_FRAC,
            capital: DEFAULT_CAPITAL,
            fee: 0.0,
            fill_policy: FillPolicy::Pessimistic,
            log_mode: LogMode::Full,
            market_open: schedule.market_open,
            market_close: schedule.market_close,
            lead_minutes: schedule.lead_minutes,
            liquidate_minutes: schedule.liquidate_minutes,
            min_market_cap: DEFAULT_MIN_MARKET_CAP,
            chunks_per_stock: DEFAULT_CHUNKS_PER_STOCK,
            requests_per_minute: 5,
            requests_per_day: 500,
            min_lines: DEFAULT_MIN_LINES,
            max_consecutive_missing: DEFAULT_MAX_CONSECUTIVE_MISSING,
            calendar_quorum: DEFAULT_QUORUM,
            recent_days: 30,
        }
    }
}

fn rule_str(r: PrefilterRule) -> &'static str {
    match r {
        PrefilterRule::OpenToClose => "open_to_close",
        PrefilterRule::CloseToClose => "close_to_close",
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        line,
        key: key.to_string(),
        reason: e.to_string(),
    })
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut c = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            let bad = |reason: &str| ConfigError::BadValue {
                line,
                key: key.to_string(),
                reason: reason.to_string(),
            };
            match key {
                "data_dir" => c.data_dir = PathBuf::from(value),
                "universe" => c.universe = PathBuf::from(value),
                "thresholds" => {
                    c.thresholds = value
                        .split(',')
                        .map(|v| parse_value::<f64>(line, key, v.trim()))
                        .collect::<Result<_, _>>()?;
                    if c.thresholds.is_empty() || c.thresholds.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(bad("thresholds must be strictly ascending"));
                    }
                }
                "k" => c.k = parse_value(line, key, value)?,
                "k_min" => c.k_min = parse_value(line, key, value)?,
                "k_max" => c.k_max = parse_value(line, key, value)?,
                "prefilter_min_gain" => c.prefilter_min_gain = parse_value(line, key, value)?,
                "prefilter_rule" => {
                    c.prefilter_rule = match value {
                        "open_to_close" => PrefilterRule::OpenToClose,
                        "close_to_close" => PrefilterRule::CloseToClose,
                        _ => return Err(bad("expected open_to_close or close_to_close")),
                    }
                }
                "top_n" => c.top_n = parse_value(line, key, value)?,
                "stop_loss_frac" => c.stop_loss_frac = parse_value(line, key, value)?,
                "capital" => c.capital = parse_value(line, key, value)?,
                "fee" => c.fee = parse_value(line, key, value)?,
                "fill_policy" => c.fill_policy = parse_value(line, key, value)?,
                "log_mode" => c.log_mode = parse_value(line, key, value)?,
                "market_open" => c.market_open = NaiveTime::parse_from_str(value, "%H:%M").map_err(|e| bad(&e.to_string()))?,
                "market_close" => c.market_close = NaiveTime::parse_from_str(value, "%H:%M").map_err(|e| bad(&e.to_string()))?,
                "lead_minutes" => c.lead_minutes = parse_value(line, key, value)?,
                "liquidate_minutes" => c.liquidate_minutes = parse_value(line, key, value)?,
                "min_market_cap" => c.min_market_cap = parse_value(line, key, value)?,
                "chunks_per_stock" => c.chunks_per_stock = parse_value(line, key, value)?,
                "requests_per_minute" => c.requests_per_minute = parse_value(line, key, value)?,
                "requests_per_day" => c.requests_per_day = parse_value(line, key, value)?,
                "min_lines" => c.min_lines = parse_value(line, key, value)?,
                "max_consecutive_missing" => c.max_consecutive_missing = parse_value(line, key, value)?,
                "calendar_quorum" => c.calendar_quorum = parse_value(line, key, value)?,
                "recent_days" => c.recent_days = parse_value(line, key, value)?,
                other => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: other.to_string(),
                    })
                }
            }
        }
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let thresholds: Vec<String> = self.thresholds.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "universe = {}", self.universe.display());
        let _ = writeln!(s, "thresholds = {}", thresholds.join(","));
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "k_min = {}", self.k_min);
        let _ = writeln!(s, "k_max = {}", self.k_max);
        let _ = writeln!(s, "prefilter_min_gain = {}", self.prefilter_min_gain);
        let _ = writeln!(s, "prefilter_rule = {}", rule_str(self.prefilter_rule));
        let _ = writeln!(s, "top_n = {}", self.top_n);
        let _ = writeln!(s, "stop_loss_frac = {}", self.stop_loss_frac);
        let _ = writeln!(s, "capital = {}", self.capital);
        let _ = writeln!(s, "fee = {}", self.fee);
        let _ = writeln!(s, "fill_policy = {}", self.fill_policy.as_str());
        let _ = writeln!(s, "log_mode = {}", self.log_mode.as_str());
        let _ = writeln!(s, "market_open = {}", self.market_open.format("%H:%M"));
        let _ = writeln!(s, "market_close = {}", self.market_close.format("%H:%M"));
        let _ = writeln!(s, "lead_minutes = {}", self.lead_minutes);
        let _ = writeln!(s, "liquidate_minutes = {}", self.liquidate_minutes);
        let _ = writeln!(s, "min_market_cap = {}", self.min_market_cap);
        let _ = writeln!(s, "chunks_per_stock = {}", self.chunks_per_stock);
        let _ = writeln!(s, "requests_per_minute = {}", self.requests_per_minute);
        let _ = writeln!(s, "requests_per_day = {}", self.requests_per_day);
        let _ = writeln!(s, "min_lines = {}", self.min_lines);
        let _ = writeln!(s, "max_consecutive_missing = {}", self.max_consecutive_missing);
        let _ = writeln!(s, "calendar_quorum = {}", self.calendar_quorum);
        let _ = writeln!(s, "recent_days = {}", self.recent_days);
        s
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_dir.join(p)
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            market_open: self.market_open,
            market_close: self.market_close,
            lead_minutes: self.lead_minutes,
            liquidate_minutes: self.liquidate_minutes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_comments() {
        let mut c = Config::default();
        c.top_n = 3;
        c.fill_policy = FillPolicy::Optimistic;
        c.prefilter_rule = PrefilterRule::CloseToClose;
        let text = format!("# tuned\n{}\n  # trailing\n", c.to_text());
        assert_eq!(Config::parse(&text).unwrap(), c);
        assert_eq!(Config::parse("capital = 500 # usd").unwrap().capital, 500.0);
    }

    #[test]
    fn rejects_unknown_and_bad() {
        assert!(matches!(Config::parse("api_key = x"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(Config::parse("top_n = many"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(Config::parse("k = 3\nk = 4"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(Config::parse("thresholds = 0.02,0.01"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(Config::parse("just text"), Err(ConfigError::Syntax { line: 1 })));
    }
}

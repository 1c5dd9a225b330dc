//! Automated data-quality checks.
//!
//! Two independent checks feed one [`QualityReport`]:
//! file-level checks on retrieved fragments (too few lines, expected file missing)
//! and calendar-gap analysis, which compares each stock against the trading days
//! observed across all stocks. Weekends and holidays never count as gaps because
//! they are absent from the cross-stock calendar.
//!
//! Nothing here touches files except [`delete_short_files`], which only deletes
//! when explicitly told it is not a dry run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use crate::ingestion::parse_chunk_file_name;
use crate::marketdata::{Calendar, StockSeries};

pub const DEFAULT_MIN_LINES: usize = 100;
pub const DEFAULT_MAX_CONSECUTIVE_MISSING: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExclusionReason {
    ShortFile,
    MissingChunk,
    ConsecutiveGap,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::ShortFile => "short_file",
            ExclusionReason::MissingChunk => "missing_chunk",
            ExclusionReason::ConsecutiveGap => "consecutive_gap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GapRecord {
    pub symbol: String,
    pub missing_days: Vec<NaiveDate>,
    pub max_consecutive: usize,
}

/// One expected fragment of a stock's history.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ExpectedFile {
    pub symbol: String,
    /// `None` for a merged per-stock file.
    pub chunk: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QualityReport {
    pub short_files: Vec<(PathBuf, usize)>,
    pub missing_chunks: Vec<(String, Option<usize>)>,
    excluded: BTreeMap<String, ExclusionReason>,
    pub gap_records: Vec<GapRecord>,
}

impl QualityReport {
    /// Records an exclusion unless the stock is already excluded.
    pub fn exclude(&mut self, symbol: &str, reason: ExclusionReason) {
        self.excluded.entry(symbol.to_string()).or_insert(reason);
    }

    pub fn excluded(&self) -> impl Iterator<Item = (&str, ExclusionReason)> {
        self.excluded.iter().map(|(s, r)| (s.as_str(), *r))
    }

    pub fn is_excluded(&self, symbol: &str) -> bool {
        self.excluded.contains_key(symbol)
    }

    pub fn excluded_symbols(&self) -> BTreeSet<String> {
        self.excluded.keys().cloned().collect()
    }

    pub fn merge(mut self, other: QualityReport) -> QualityReport {
        self.short_files.extend(other.short_files);
        self.missing_chunks.extend(other.missing_chunks);
        for (s, r) in other.excluded {
            self.excluded.entry(s).or_insert(r);
        }
        self.gap_records.extend(other.gap_records);
        self.gap_records.sort_by(|a, b| a.symbol.cmp(&b.symbol));
        self
    }

    /// `symbol,reason,missing_days,max_consecutive`, one row per stock that is
    /// excluded or has gaps.
    pub fn to_csv(&self) -> String {
        let gaps: BTreeMap<&str, &GapRecord> = self
            .gap_records
            .iter()
            .map(|g| (g.symbol.as_str(), g))
            .collect();
        let symbols: BTreeSet<&str> = gaps
            .keys()
            .copied()
            .chain(self.excluded.keys().map(String::as_str))
            .collect();
        let mut out = String::from("symbol,reason,missing_days,max_consecutive\n");
        for s in symbols {
            let reason = self.excluded.get(s).map_or("retained", |r| r.as_str());
            let (missing, run) = gaps
                .get(s)
                .map_or((0, 0), |g| (g.missing_days.len(), g.max_consecutive));
            let _ = writeln!(out, "{s},{reason},{missing},{run}");
        }
        out
    }
}

fn count_lines(path: &Path) -> std::io::Result<usize> {
    let text = std::fs::read(path)?;
    let mut n = text.iter().filter(|&&b| b == b'\n').count();
    if text.last().is_some_and(|&b| b != b'\n') {
        n += 1;
    }
    Ok(n)
}

/// Flags files with fewer than `min_lines` lines and expected files that are absent.
/// A short or missing file marks its stock for exclusion (or re-fetch).
pub fn validate_chunks(paths: &[PathBuf], expected: &[ExpectedFile], min_lines: usize) -> QualityReport {
    let mut report = QualityReport::default();
    let mut present: BTreeSet<ExpectedFile> = BTreeSet::new();
    for path in paths {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let key = match parse_chunk_file_name(&name) {
            Some((symbol, chunk)) => ExpectedFile {
                symbol,
                chunk: Some(chunk),
            },
            None => ExpectedFile {
                symbol: name.strip_suffix(".csv").unwrap_or(&name).to_string(),
                chunk: None,
            },
        };
        let lines = match count_lines(path) {
            Ok(n) => n,
            Err(e) => {
                log::error!("cannot read {}: {e}", path.display());
                continue;
            }
        };
        present.insert(key.clone());
        if lines < min_lines {
            log::error!("{} has {lines} lines (< {min_lines})", path.display());
            report.short_files.push((path.clone(), lines));
            report.exclude(&key.symbol, ExclusionReason::ShortFile);
        }
    }
    for exp in expected {
        if !present.contains(exp) {
            log::error!("missing file for {} chunk {:?}", exp.symbol, exp.chunk);
            report.missing_chunks.push((exp.symbol.clone(), exp.chunk));
            report.exclude(&exp.symbol, ExclusionReason::MissingChunk);
        }
    }
    report
}

/// Deletes the short files named in `report`. In dry-run mode nothing is touched
/// and the would-be deletions are returned.
pub fn delete_short_files(report: &QualityReport, dry_run: bool) -> std::io::Result<Vec<PathBuf>> {
    let mut deleted = Vec::new();
    for (path, _) in &report.short_files {
        if !dry_run {
            std::fs::remove_file(path)?;
        }
        deleted.push(path.clone());
    }
    Ok(deleted)
}

fn longest_run(indices: &[usize]) -> usize {
    let mut best = 0;
    let mut run = 0;
    let mut prev: Option<usize> = None;
    for &i in indices {
        run = match prev {
            Some(p) if p + 1 == i => run + 1,
            _ => 1,
        };
        best = best.max(run);
        prev = Some(i);
    }
    best
}

/// Finds trading days missing from each stock. Stocks with a run of more than
/// `max_consecutive_allowed` consecutive missing trading days are excluded; the
/// rest keep their gaps on record.
pub fn detect_gaps(series_set: &[StockSeries], calendar: &Calendar, max_consecutive_allowed: usize) -> QualityReport {
    let mut report = QualityReport::default();
    let days = calendar.trading_days();
    let mut ordered: Vec<&StockSeries> = series_set.iter().collect();
    ordered.sort_by(|a, b| a.symbol.cmp(&b.symbol));
    for series in ordered {
        let have: BTreeSet<NaiveDate> = series.dates().collect();
        let missing_idx: Vec<usize> = days
            .iter()
            .enumerate()
            .filter(|(_, d)| !have.contains(d))
            .map(|(i, _)| i)
            .collect();
        if missing_idx.is_empty() {
            continue;
        }
        let max_consecutive = longest_run(&missing_idx);
        if max_consecutive > max_consecutive_allowed {
            log::warn!(
                "{} excluded: {max_consecutive} consecutive missing trading days",
                series.symbol
            );
            report.exclude(&series.symbol, ExclusionReason::ConsecutiveGap);
        }
        report.gap_records.push(GapRecord {
            symbol: series.symbol.clone(),
            missing_days: missing_idx.iter().map(|&i| days[i]).collect(),
            max_consecutive,
        });
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QualitySummary {
    pub stocks_with_gaps: usize,
    pub total_missing_days: usize,
    pub largest_gap: usize,
    pub excluded_stocks: usize,
    pub short_files: usize,
    pub missing_files: usize,
}

impl QualitySummary {
    pub fn to_csv(&self) -> String {
        format!(
            "stocks_with_gaps,total_missing_days,largest_gap,excluded_stocks,short_files,missing_files\n{},{},{},{},{},{}\n",
            self.stocks_with_gaps,
            self.total_missing_days,
            self.largest_gap,
            self.excluded_stocks,
            self.short_files,
            self.missing_files
        )
    }
}

impl fmt::Display for QualitySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} stocks with gaps, {} missing days, max gap {}; {} excluded, {} short files, {} missing files",
            self.stocks_with_gaps,
            self.total_missing_days,
            self.largest_gap,
            self.excluded_stocks,
            self.short_files,
            self.missing_files
        )
    }
}

pub fn quality_summary(report: &QualityReport) -> QualitySummary {
    QualitySummary {
        stocks_with_gaps: report.gap_records.len(),
        total_missing_days: report.gap_records.iter().map(|g| g.missing_days.len()).sum(),
        largest_gap: report
            .gap_records
            .iter()
            .map(|g| g.max_consecutive)
            .max()
            .unwrap_or(0),
        excluded_stocks: report.excluded.len(),
        short_files: report.short_files.len(),
        missing_files: report.missing_chunks.len(),
    }
}

//! Symbol interpretability: per-position regressions of region outcomes on
//! emitted symbols, and per-class sentence-prefix patterns.

mod encode;
mod patterns;
mod regress;
mod report;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use encode::{encode_position, encode_symbols, Design, Level};
pub use patterns::{mine_prefixes, patterns_text, Pattern, PatternSummary};
pub use regress::{fit_linear, fit_logistic, fit_multinomial, LinearFit, LogisticFit, MultinomialFit, DEFAULT_L2};
pub use report::{table2_csv, table2_report, ModelKind, PositionStat, RegressionReport};

use crate::channel::{read_jsonl, SentenceRecord};
use crate::dataset::{read_stats, StatsRow};
use crate::error::{Error, Result};
use crate::synthdata::RegionStats;

/// Settings for the `analyze` step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Symbols seen fewer times than this at a position pool into OTHER.
    pub min_count: usize,
    /// Longest prefix considered by pattern mining.
    pub max_k: usize,
    /// Minimum fraction of a class a pattern must cover.
    pub min_coverage: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            min_count: 5,
            max_k: 2,
            min_coverage: 0.2,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_count == 0 || self.max_k == 0 {
            return Err(Error::Config("analysis.min_count and analysis.max_k must be at least 1".into()));
        }
        if !(self.min_coverage > 0.0 && self.min_coverage <= 1.0) {
            return Err(Error::Config(format!(
                "analysis.min_coverage must be in (0, 1], got {}",
                self.min_coverage
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub sample_id: String,
    pub slice_index: u32,
    pub ids: Vec<u32>,
    pub stats: RegionStats,
}

/// Sentences joined with their region statistics, sorted by
/// `(sample_id, slice_index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceLog {
    entries: Vec<LogEntry>,
    sentence_length: usize,
}

impl SentenceLog {
    /// Every sentence must match exactly one stats row; stats rows without a
    /// sentence are ignored.
    pub fn join(records: &[SentenceRecord], stats: &[StatsRow]) -> Result<Self> {
        let mut by_key: HashMap<(&str, u32), &StatsRow> = HashMap::new();
        for row in stats {
            if by_key.insert((row.sample_id.as_str(), row.slice_index), row).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate stats row for {}_{}",
                    row.sample_id, row.slice_index
                )));
            }
        }
        let mut missing = Vec::new();
        let mut entries = Vec::with_capacity(records.len());
        for r in records {
            match by_key.get(&(r.sample_id.as_str(), r.slice_index)) {
                Some(row) => entries.push(LogEntry {
                    sample_id: r.sample_id.clone(),
                    slice_index: r.slice_index,
                    ids: r.ids.clone(),
                    stats: row.stats.clone(),
                }),
                None => missing.push(format!("{}_{}", r.sample_id, r.slice_index)),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Join(missing));
        }
        Self::new(entries)
    }

    pub fn new(mut entries: Vec<LogEntry>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::InvalidArgument("sentence log is empty".into()));
        };
        let n_w = first.ids.len();
        if n_w == 0 {
            return Err(Error::InvalidArgument("sentences must not be empty".into()));
        }
        if let Some(bad) = entries.iter().find(|e| e.ids.len() != n_w) {
            return Err(Error::InvalidArgument(format!(
                "sentence {}_{} has length {}, expected {n_w}",
                bad.sample_id,
                bad.slice_index,
                bad.ids.len()
            )));
        }
        entries.sort_by(|a, b| (&a.sample_id, a.slice_index).cmp(&(&b.sample_id, b.slice_index)));
        if let Some(w) = entries
            .windows(2)
            .find(|w| (&w[0].sample_id, w[0].slice_index) == (&w[1].sample_id, w[1].slice_index))
        {
            return Err(Error::InvalidArgument(format!(
                "duplicate sentence for {}_{}",
                w[0].sample_id, w[0].slice_index
            )));
        }
        Ok(Self {
            entries,
            sentence_length: n_w,
        })
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sentence_length(&self) -> usize {
        self.sentence_length
    }

    /// Symbol ids at 1-based position `k`.
    pub fn column(&self, k: usize) -> Result<Vec<u32>> {
        if k == 0 || k > self.sentence_length {
            return Err(Error::InvalidArgument(format!(
                "position {k} outside 1..={}",
                self.sentence_length
            )));
        }
        Ok(self.entries.iter().map(|e| e.ids[k - 1]).collect())
    }

    /// Sub-log of the entries satisfying `keep`, or `None` if none do.
    pub fn filter(&self, keep: impl Fn(&LogEntry) -> bool) -> Option<Self> {
        let entries: Vec<_> = self.entries.iter().filter(|e| keep(e)).cloned().collect();
        (!entries.is_empty()).then_some(Self {
            entries,
            sentence_length: self.sentence_length,
        })
    }
}

/// Class label used for pattern mining: `tumor` or `normal`.
pub fn presence_labels(log: &SentenceLog) -> Vec<String> {
    log.entries()
        .iter()
        .map(|e| if e.stats.present { "tumor" } else { "normal" }.to_owned())
        .collect()
}

/// Joins a sentence log with stats.csv, runs the regressions and pattern
/// mining, and writes `table2.csv` and `patterns.txt` into `out`.
pub fn analyze_files(sentences: &Path, stats: &Path, out: &Path, cfg: &AnalysisConfig) -> Result<Vec<RegressionReport>> {
    cfg.validate()?;
    let records = read_jsonl(sentences)?;
    let rows = read_stats(stats)?;
    let log = SentenceLog::join(&records, &rows)?;
    let reports = table2_report(&log, cfg.min_count)?;
    let patterns = mine_prefixes(&log, &presence_labels(&log), cfg.max_k, cfg.min_coverage)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let t = out.join("table2.csv");
    std::fs::write(&t, table2_csv(&reports)).map_err(|e| Error::io(t, e))?;
    let p = out.join("patterns.txt");
    std::fs::write(&p, patterns_text(&patterns)).map_err(|e| Error::io(p, e))?;
    Ok(reports)
}

use std::collections::BTreeMap;
use std::fmt;

use super::SentenceLog;
use crate::error::Result;

/// A categorical level of a symbol predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Symbol(u32),
    /// Pool of symbols rarer than `min_count`.
    Other,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Symbol(id) => write!(f, "{id}"),
            Level::Other => f.write_str("OTHER"),
        }
    }
}

/// One-hot design for a single categorical predictor, reference level
/// dropped. No intercept column; the fitters add it.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub reference: Level,
    pub columns: Vec<Level>,
    /// Row-major `rows x columns.len()` indicators.
    pub x: Vec<f64>,
    pub rows: usize,
}

impl Design {
    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.x[i * c..(i + 1) * c]
    }
}

/// Encodes one symbol per record. Symbols seen fewer than `min_count`
/// times pool into [`Level::Other`]; the most frequent level (smallest on
/// ties, OTHER last) is the reference.
pub fn encode_symbols(ids: &[u32], min_count: usize) -> Design {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &id in ids {
        *counts.entry(id).or_default() += 1;
    }
    let level_of = |id: u32| {
        if counts[&id] >= min_count {
            Level::Symbol(id)
        } else {
            Level::Other
        }
    };
    let mut level_counts: BTreeMap<Level, usize> = BTreeMap::new();
    for &id in ids {
        *level_counts.entry(level_of(id)).or_default() += 1;
    }
    let reference = level_counts
        .iter()
        .fold(None, |acc: Option<(Level, usize)>, (&l, &c)| match acc {
            Some((_, bc)) if bc >= c => acc,
            _ => Some((l, c)),
        })
        .map(|(l, _)| l)
        .unwrap_or(Level::Other);
    let columns: Vec<Level> = level_counts.keys().copied().filter(|&l| l != reference).collect();
    let mut x = vec![0.0; ids.len() * columns.len()];
    for (r, &id) in ids.iter().enumerate() {
        if let Ok(c) = columns.binary_search(&level_of(id)) {
            x[r * columns.len() + c] = 1.0;
        }
    }
    Design {
        reference,
        columns,
        x,
        rows: ids.len(),
    }
}

/// Design for the symbols at 1-based position `k` of every sentence.
pub fn encode_position(log: &SentenceLog, k: usize, min_count: usize) -> Result<Design> {
    Ok(encode_symbols(&log.column(k)?, min_count))
}

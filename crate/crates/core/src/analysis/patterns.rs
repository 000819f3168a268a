use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::SentenceLog;
use crate::error::{Error, Result};

/// Records whose purity must exceed this to report a prefix.
pub const MIN_PURITY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub prefix: Vec<u32>,
    /// Records of this class starting with `prefix`.
    pub support: usize,
    /// `support` over the class size.
    pub coverage: f64,
    /// `support` over all records starting with `prefix`.
    pub purity: f64,
}

impl Pattern {
    /// `"657, 653, *"`.
    pub fn expression(&self) -> String {
        let mut s = String::new();
        for id in &self.prefix {
            write!(s, "{id}, ").expect("string write");
        }
        s.push('*');
        s
    }
}

/// Patterns per class label, sorted by label.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatternSummary {
    pub classes: BTreeMap<String, Vec<Pattern>>,
}

/// Finds, per class, the longest sentence prefixes (length 1 to `max_k`)
/// that cover at least `min_coverage` of the class and whose matching
/// records are more than 90% from that class. A prefix is dropped when a
/// longer reported prefix extends it.
pub fn mine_prefixes(log: &SentenceLog, labels: &[String], max_k: usize, min_coverage: f64) -> Result<PatternSummary> {
    if labels.len() != log.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} records",
            labels.len(),
            log.len()
        )));
    }
    let max_k = max_k.min(log.sentence_length());
    let mut class_size: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *class_size.entry(l.as_str()).or_default() += 1;
    }
    // prefix -> (total matches, matches per class)
    let mut counts: BTreeMap<&[u32], (usize, BTreeMap<&str, usize>)> = BTreeMap::new();
    for (e, l) in log.entries().iter().zip(labels) {
        for k in 1..=max_k {
            let c = counts.entry(&e.ids[..k]).or_default();
            c.0 += 1;
            *c.1.entry(l.as_str()).or_default() += 1;
        }
    }
    let mut summary = PatternSummary::default();
    for (&class, &size) in &class_size {
        let mut found: Vec<Pattern> = counts
            .iter()
            .filter_map(|(prefix, (total, per))| {
                let support = per.get(class).copied().unwrap_or(0);
                let coverage = support as f64 / size as f64;
                let purity = support as f64 / *total as f64;
                (support > 0 && coverage >= min_coverage && purity > MIN_PURITY).then(|| Pattern {
                    prefix: prefix.to_vec(),
                    support,
                    coverage,
                    purity,
                })
            })
            .collect();
        let reported: BTreeSet<Vec<u32>> = found.iter().map(|p| p.prefix.clone()).collect();
        found.retain(|p| {
            !reported
                .iter()
                .any(|q| q.len() > p.prefix.len() && q.starts_with(&p.prefix))
        });
        found.sort_by(|a, b| {
            b.coverage
                .total_cmp(&a.coverage)
                .then_with(|| a.prefix.cmp(&b.prefix))
        });
        summary.classes.insert(class.to_owned(), found);
    }
    Ok(summary)
}

/// One line per pattern: `class<TAB>expression<TAB>coverage<TAB>purity`.
pub fn patterns_text(summary: &PatternSummary) -> String {
    let mut out = String::new();
    for (class, pats) in &summary.classes {
        for p in pats {
            writeln!(out, "{class}\t{}\t{:.6}\t{:.6}", p.expression(), p.coverage, p.purity).expect("string write");
        }
    }
    out
}

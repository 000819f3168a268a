use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::encode::encode_position;
use super::regress::{fit_linear, fit_logistic, fit_multinomial, DEFAULT_L2};
use super::{LogEntry, SentenceLog};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    BinaryLogistic,
    MultinomialLogistic,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::BinaryLogistic => "binary_logistic",
            ModelKind::MultinomialLogistic => "multinomial_logistic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionStat {
    /// 1-based sentence position.
    pub position: usize,
    /// r² for linear fits, McFadden pseudo-R² otherwise.
    pub statistic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionReport {
    pub outcome: String,
    pub model_kind: ModelKind,
    pub positions: Vec<PositionStat>,
    /// `None` when the outcome was skipped.
    pub best_position: Option<usize>,
    pub skipped: Option<String>,
}

impl RegressionReport {
    pub fn best(&self) -> Option<PositionStat> {
        let k = self.best_position?;
        self.positions.iter().copied().find(|p| p.position == k)
    }
}

enum Response {
    Continuous(Vec<f64>),
    Binary(Vec<bool>),
    Categorical(Vec<usize>),
}

fn categorical<'a>(values: impl Iterator<Item = &'a str>) -> Vec<usize> {
    let values: Vec<&str> = values.collect();
    let levels: Vec<&str> = values.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    values
        .iter()
        .map(|v| levels.binary_search(v).expect("level present"))
        .collect()
}

fn level_count(resp: &Response) -> usize {
    match resp {
        Response::Continuous(_) => 2,
        Response::Binary(y) => y.iter().collect::<BTreeSet<_>>().len(),
        Response::Categorical(y) => y.iter().collect::<BTreeSet<_>>().len(),
    }
}

fn fit_outcome(
    outcome: &str,
    kind: ModelKind,
    log: Option<SentenceLog>,
    response: impl Fn(&SentenceLog) -> Response,
    min_count: usize,
) -> Result<RegressionReport> {
    let skip = |why: String| RegressionReport {
        outcome: outcome.to_owned(),
        model_kind: kind,
        positions: Vec::new(),
        best_position: None,
        skipped: Some(why),
    };
    let Some(log) = log else {
        return Ok(skip("no records".into()));
    };
    let resp = response(&log);
    if level_count(&resp) < 2 {
        return Ok(skip("fewer than two outcome levels".into()));
    }
    let mut positions = Vec::with_capacity(log.sentence_length());
    for k in 1..=log.sentence_length() {
        let d = encode_position(&log, k, min_count)?;
        let stat = match &resp {
            Response::Continuous(y) => fit_linear(&d.x, d.cols(), y).map(|f| f.r2),
            Response::Binary(y) => fit_logistic(&d.x, d.cols(), y, DEFAULT_L2).map(|f| f.pseudo_r2),
            Response::Categorical(y) => fit_multinomial(&d.x, d.cols(), y, DEFAULT_L2).map(|f| f.pseudo_r2),
        };
        match stat {
            Ok(s) => positions.push(PositionStat { position: k, statistic: s }),
            Err(Error::InvalidArgument(why) | Error::Degenerate(why)) => return Ok(skip(why)),
            Err(e) => return Err(e),
        }
    }
    let best = positions
        .iter()
        .fold(None, |acc: Option<PositionStat>, &p| match acc {
            Some(b) if b.statistic >= p.statistic => acc,
            _ => Some(p),
        })
        .map(|p| p.position);
    Ok(RegressionReport {
        outcome: outcome.to_owned(),
        model_kind: kind,
        positions,
        best_position: best,
        skipped: None,
    })
}

/// Fits every outcome against the symbol at each sentence position.
///
/// Tumor presence uses all records; area, eccentricity, laterality,
/// location and any extra categorical columns use only records with a
/// region present.
pub fn table2_report(log: &SentenceLog, min_count: usize) -> Result<Vec<RegressionReport>> {
    let present = || log.filter(|e| e.stats.present);
    let mut out = vec![
        fit_outcome(
            "Tumor",
            ModelKind::BinaryLogistic,
            Some(log.clone()),
            |l| Response::Binary(l.entries().iter().map(|e| e.stats.present).collect()),
            min_count,
        )?,
        fit_outcome(
            "Area",
            ModelKind::Linear,
            present(),
            |l| Response::Continuous(l.entries().iter().map(|e| e.stats.area as f64).collect()),
            min_count,
        )?,
        fit_outcome(
            "Eccentricity",
            ModelKind::Linear,
            present(),
            |l| Response::Continuous(l.entries().iter().map(|e| e.stats.eccentricity).collect()),
            min_count,
        )?,
        fit_outcome(
            "Laterality",
            ModelKind::MultinomialLogistic,
            present(),
            |l| Response::Categorical(categorical(l.entries().iter().map(|e| e.stats.laterality.as_str()))),
            min_count,
        )?,
        fit_outcome(
            "Location",
            ModelKind::MultinomialLogistic,
            present(),
            |l| Response::Categorical(categorical(l.entries().iter().map(|e| e.stats.location.as_str()))),
            min_count,
        )?,
    ];
    let extras: BTreeSet<&String> = log.entries().iter().flat_map(|e| e.stats.extra.keys()).collect();
    for name in extras {
        let extract = |e: &LogEntry| e.stats.extra.get(name).map(String::as_str).unwrap_or("none").to_owned();
        out.push(fit_outcome(
            name,
            ModelKind::MultinomialLogistic,
            present(),
            |l| {
                let vals: Vec<String> = l.entries().iter().map(extract).collect();
                Response::Categorical(categorical(vals.iter().map(String::as_str)))
            },
            min_count,
        )?);
    }
    Ok(out)
}

pub const TABLE2_HEADER: &str = "outcome,model_kind,position,statistic,is_best";

/// CSV with one row per (outcome, position); skipped outcomes get one row
/// with `NA` position and statistic.
pub fn table2_csv(reports: &[RegressionReport]) -> String {
    let mut out = String::from(TABLE2_HEADER);
    out.push('\n');
    for r in reports {
        if r.skipped.is_some() {
            writeln!(out, "{},{},NA,NA,false", r.outcome, r.model_kind.as_str()).expect("string write");
            continue;
        }
        for p in &r.positions {
            writeln!(
                out,
                "{},{},{},{:.6},{}",
                r.outcome,
                r.model_kind.as_str(),
                p.position,
                p.statistic,
                r.best_position == Some(p.position)
            )
            .expect("string write");
        }
    }
    out
}

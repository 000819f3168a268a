mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sunet::analysis::{
    encode_position, fit_linear, fit_logistic, fit_multinomial, mine_prefixes, patterns_text, table2_report, Level,
    LogEntry, SentenceLog, DEFAULT_L2,
};

use sunet::synthdata::{Laterality, Location, RegionStats};

use common::cs4941::cs4941_log;
use common::oracle::{grouped_loglik, mcfadden_oracle};

#[test]
fn logistic_six_rows_match_group_proportions() {
    let x = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let y = [true, false, false, true, true, false];
    let fit = fit_logistic(&x, 1, &y, 0.0).unwrap();
    let groups: Vec<usize> = x.iter().map(|&v| v as usize).collect();
    let yc: Vec<usize> = y.iter().map(|&b| b as usize).collect();
    // ℓ = 2 ln(1/3) + 2 ln(2/3) + ... evaluated row by row
    let p = |g: usize| -> f64 { if g == 0 { 1.0 / 3.0 } else { 2.0 / 3.0 } };
    let brute: f64 = groups
        .iter()
        .zip(&y)
        .map(|(&g, &t)| if t { p(g).ln() } else { (1.0 - p(g)).ln() })
        .sum();
    let null = 6.0 * 0.5f64.ln();
    assert!((fit.loglik - brute).abs() < 1e-6, "{} vs {brute}", fit.loglik);
    assert!((fit.null_loglik - null).abs() < 1e-12);
    assert!((fit.pseudo_r2 - (1.0 - brute / null)).abs() < 1e-6);
    assert!((fit.pseudo_r2 - mcfadden_oracle(&groups, &yc)).abs() < 1e-6);
    // intercept ln(1/2), slope ln(4)
    assert!((fit.coef[0] - 0.5f64.ln()).abs() < 1e-6);
    assert!((fit.coef[1] - 4.0f64.ln()).abs() < 1e-6);
}

#[test]
fn multinomial_nine_rows_match_brute_force() {
    let x = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
    let y = [0, 0, 0, 1, 2, 1, 1, 2, 0];
    let fit = fit_multinomial(&x, 1, &y, 0.0).unwrap();
    let groups: Vec<usize> = x.iter().map(|&v| v as usize).collect();
    assert_eq!(fit.reference, 0);
    assert_eq!(fit.classes, vec![1, 2]);
    // Rebuild the probabilities from the coefficients row by row.
    let mut ll = 0.0;
    for (r, &c) in y.iter().enumerate() {
        let etas: Vec<f64> = fit.coef.iter().map(|b| b[0] + b[1] * x[r]).collect();
        let denom = 1.0 + etas.iter().map(|e| e.exp()).sum::<f64>();
        let num = if c == 0 { 1.0 } else { etas[fit.classes.iter().position(|&k| k == c).unwrap()].exp() };
        ll += (num / denom).ln();
    }
    assert!((fit.loglik - ll).abs() < 1e-9);
    assert!((fit.loglik - grouped_loglik(&groups, &y)).abs() < 1e-6);
    assert!((fit.pseudo_r2 - mcfadden_oracle(&groups, &y)).abs() < 1e-6);
}

#[test]
fn uninformative_designs_score_zero() {
    let zeros = [0.0; 8];
    let y = [true, false, true, true, false, false, true, false];
    let fit = fit_logistic(&zeros, 1, &y, DEFAULT_L2).unwrap();
    assert!(fit.pseudo_r2.abs() < 1e-6);

    // An indicator with the same class mix on both sides.
    let x = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
    let y = [true, false, true, false, true, false, true, false];
    assert!(fit_logistic(&x, 1, &y, 0.0).unwrap().pseudo_r2.abs() < 1e-6);

    let x = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let y = [0, 1, 2, 2, 1, 0];
    assert!(fit_multinomial(&x, 1, &y, 0.0).unwrap().pseudo_r2.abs() < 1e-6);
    assert!(fit_multinomial(&[0.0; 6], 1, &y, DEFAULT_L2).unwrap().pseudo_r2.abs() < 1e-6);
}

#[test]
fn separable_logistic_stays_finite() {
    let x = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
    let y = [false, false, false, false, true, true, true, true];
    let fit = fit_logistic(&x, 1, &y, DEFAULT_L2).unwrap();
    assert!(fit.coef.iter().all(|c| c.is_finite()));
    assert!(fit.pseudo_r2 > 0.95, "{}", fit.pseudo_r2);
    assert!(fit.pseudo_r2 < 1.0);
    let direct: f64 = x
        .iter()
        .zip(&y)
        .map(|(&xi, &yi)| {
            let p = 1.0 / (1.0 + (-(fit.coef[0] + fit.coef[1] * xi)).exp());
            if yi { p.ln() } else { (1.0 - p).ln() }
        })
        .sum();
    assert!((direct - fit.loglik).abs() < 1e-9);
}

#[test]
fn multinomial_determined_by_indicators() {
    // Class k exactly when indicator k fires (class 0: none).
    let mut x = Vec::new();
    let mut y = Vec::new();
    for r in 0..12 {
        let c = r % 3;
        x.extend([(c == 1) as u8 as f64, (c == 2) as u8 as f64]);
        y.push(c);
    }
    let fit = fit_multinomial(&x, 2, &y, DEFAULT_L2).unwrap();
    assert!(fit.pseudo_r2 > 0.95, "{}", fit.pseudo_r2);
    assert!(fit.coef.iter().flatten().all(|c| c.is_finite()));
}

#[test]
fn pseudo_r2_grows_with_nested_columns() {
    // Three groups; one indicator merges groups 1 and 2.
    let g = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
    let y = [true, false, false, false, true, true, false, true, true, true, true, false];
    let one: Vec<f64> = g.iter().map(|&v| (v > 0) as u8 as f64).collect();
    let two: Vec<f64> = g.iter().flat_map(|&v| [(v == 1) as u8 as f64, (v == 2) as u8 as f64]).collect();
    let yc: Vec<usize> = y.iter().map(|&b| b as usize).collect();
    let a = fit_logistic(&one, 1, &y, 0.0).unwrap();
    let b = fit_logistic(&two, 2, &y, 0.0).unwrap();
    let merged: Vec<usize> = g.iter().map(|&v| (v > 0) as usize).collect();
    assert!((a.pseudo_r2 - mcfadden_oracle(&merged, &yc)).abs() < 1e-6);
    assert!((b.pseudo_r2 - mcfadden_oracle(&g, &yc)).abs() < 1e-6);
    assert!(b.pseudo_r2 >= a.pseudo_r2);
}

#[test]
fn linear_exact_fit_and_null_bound() {
    let fit = fit_linear(&[0.0, 1.0, 2.0], 1, &[1.0, 3.0, 5.0]).unwrap();
    assert!((fit.coef[0] - 1.0).abs() < 1e-6);
    assert!((fit.coef[1] - 2.0).abs() < 1e-6);
    assert!((fit.r2 - 1.0).abs() < 1e-12);

    let ind = [0.0, 1.0, 0.0, 1.0, 1.0];
    let y: Vec<f64> = ind.iter().map(|v| 4.0 - 2.5 * v).collect();
    assert!((fit_linear(&ind, 1, &y).unwrap().r2 - 1.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
    assert!(fit_linear(&x, 1, &y).unwrap().r2 < 0.02);
}

#[test]
fn cs4941_normal_pattern() {
    let (log, labels) = cs4941_log();
    let summary = mine_prefixes(&log, &labels, 2, 0.2).unwrap();
    let normal = &summary.classes["normal"];
    assert_eq!(normal.len(), 1);
    assert_eq!(normal[0].expression(), "657, 653, *");
    assert_eq!(normal[0].purity, 1.0);
    assert_eq!(normal[0].coverage, 1.0);
    let tumor: Vec<String> = summary.classes["tumor"].iter().map(|p| p.expression()).collect();
    assert_eq!(tumor, ["1168, *", "3912, *", "8584, *"]);
    assert!(patterns_text(&summary).starts_with("normal\t657, 653, *\t1.000000\t1.000000\n"));
}

#[test]
fn cs4941_first_column_reference_is_657() {
    let (log, _) = cs4941_log();
    let d = encode_position(&log, 1, 1).unwrap();
    assert_eq!(d.reference, Level::Symbol(657));
    assert_eq!(d.columns, vec![Level::Symbol(1168), Level::Symbol(3912), Level::Symbol(8584)]);
}

#[test]
fn constant_sentences_give_zero_statistics() {
    let entries: Vec<LogEntry> = (0..12)
        .map(|i| LogEntry {
            sample_id: format!("s{i:02}"),
            slice_index: 0,
            ids: vec![7, 7, 7],
            stats: if i % 3 == 0 {
                RegionStats::absent()
            } else {
                RegionStats {
                    present: true,
                    area: 10 + i,
                    eccentricity: 0.1 * (i % 4) as f64,
                    laterality: if i % 2 == 0 { Laterality::Left } else { Laterality::Right },
                    location: if i % 4 < 2 { Location::Upper } else { Location::Lower },
                    extra: Default::default(),
                }
            },
        })
        .collect();
    let reports = table2_report(&SentenceLog::new(entries).unwrap(), 1).unwrap();
    assert_eq!(reports.len(), 5);
    for r in &reports {
        assert_eq!(r.best_position, Some(1), "{}", r.outcome);
        assert!(r.positions.iter().all(|p| p.statistic.abs() < 1e-6), "{r:?}");
    }
}

#[test]
fn identical_records_give_full_length_prefix() {
    let entries: Vec<LogEntry> = (0..5)
        .map(|i| LogEntry {
            sample_id: format!("s{i}"),
            slice_index: 0,
            ids: vec![3, 1, 4],
            stats: RegionStats::absent(),
        })
        .collect();
    let log = SentenceLog::new(entries).unwrap();
    let summary = mine_prefixes(&log, &vec!["normal".to_owned(); 5], 3, 0.5).unwrap();
    let pats = &summary.classes["normal"];
    assert_eq!(pats.len(), 1);
    assert_eq!(pats[0].expression(), "3, 1, 4, *");
    assert_eq!(pats[0].coverage, 1.0);
}

#[test]
fn disjoint_first_symbols_give_pure_patterns() {
    let entries: Vec<LogEntry> = (0..8)
        .map(|i| LogEntry {
            sample_id: format!("s{i}"),
            slice_index: 0,
            ids: vec![if i < 4 { 1 } else { 2 }, i as u32 + 10],
            stats: RegionStats::absent(),
        })
        .collect();
    let labels: Vec<String> = (0..8).map(|i| if i < 4 { "a" } else { "b" }.to_owned()).collect();
    let summary = mine_prefixes(&SentenceLog::new(entries).unwrap(), &labels, 2, 0.5).unwrap();
    for (class, first) in [("a", 1), ("b", 2)] {
        let p = &summary.classes[class];
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].prefix, vec![first]);
        assert_eq!(p[0].purity, 1.0);
    }
}

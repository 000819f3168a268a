use std::collections::BTreeMap;

/// Log-likelihood when each group predicts its own class frequencies:
/// the maximum of any model whose design spans the group indicators.
pub fn grouped_loglik(groups: &[usize], y: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&g, &c) in groups.iter().zip(y) {
        *counts.entry(g).or_default().entry(c).or_default() += 1;
    }
    let mut ll = 0.0;
    for per in counts.values() {
        let n: usize = per.values().sum();
        for &k in per.values() {
            ll += k as f64 * (k as f64 / n as f64).ln();
        }
    }
    ll
}

pub fn mcfadden_oracle(groups: &[usize], y: &[usize]) -> f64 {
    1.0 - grouped_loglik(groups, y) / grouped_loglik(&vec![0; y.len()], y)
}


/// r² of fitting each group by its own mean.
pub fn group_mean_r2(groups: &[usize], y: &[f64]) -> f64 {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&g, &v) in groups.iter().zip(y) {
        let e = sums.entry(g).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let sse: f64 = groups
        .iter()
        .zip(y)
        .map(|(g, v)| {
            let (s, n) = sums[g];
            (v - s / n as f64).powi(2)
        })
        .sum();
    1.0 - sse / sst
}

//! Linear, binary logistic and multinomial logistic fits with an
//! unpenalized intercept.
//!
//! Designs are passed row-major without an intercept column.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_L2: f64 = 1e-4;
const LINEAR_JITTER: f64 = 1e-8;
const GRAD_TOL: f64 = 1e-8;
const MAX_ITER: usize = 100;

fn with_intercept(x: &[f64], cols: usize, rows: usize) -> Result<DMatrix<f64>> {
    if x.len() != rows * cols {
        return Err(Error::shape(
            "regression",
            format!("design has {} values, expected {rows}x{cols}", x.len()),
        ));
    }
    Ok(DMatrix::from_fn(rows, cols + 1, |r, c| if c == 0 { 1.0 } else { x[r * cols + c - 1] }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    /// Intercept first.
    pub coef: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Squared Pearson correlation of fitted and observed values.
    pub r2: f64,
}

fn squared_corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let scale_a: f64 = a.iter().map(|x| x * x).sum();
    let scale_b: f64 = b.iter().map(|x| x * x).sum();
    if saa <= 1e-24 * scale_a || sbb <= 1e-24 * scale_b || saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab * sab / (saa * sbb)).min(1.0)
}

/// Least squares through the normal equations with a `1e-8` ridge jitter.
/// A constant response gives `r2 = 0`.
pub fn fit_linear(x: &[f64], cols: usize, y: &[f64]) -> Result<LinearFit> {
    let rows = y.len();
    if rows < cols + 1 {
        return Err(Error::InvalidArgument(format!(
            "linear fit needs at least {} rows, got {rows}",
            cols + 1
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite response".into()));
    }
    let a = with_intercept(x, cols, rows)?;
    let yv = DVector::from_column_slice(y);
    let mut ata = a.transpose() * &a;
    for i in 0..ata.nrows() {
        ata[(i, i)] += LINEAR_JITTER;
    }
    let chol = ata
        .cholesky()
        .ok_or_else(|| Error::Degenerate("normal equations are not positive definite".into()))?;
    let beta = chol.solve(&(a.transpose() * &yv));
    let fitted: Vec<f64> = (&a * &beta).iter().copied().collect();
    let r2 = squared_corr(&fitted, y);
    Ok(LinearFit {
        coef: beta.iter().copied().collect(),
        fitted,
        r2,
    })
}

/// Result of a penalized Newton fit.
struct Newton {
    beta: DVector<f64>,
    iterations: usize,
    /// Penalized negative log-likelihood after each accepted iterate,
    /// starting with the initial point.
    trace: Vec<f64>,
}

/// Minimizes `f` given a closure returning (value, gradient, Hessian).
/// Falls back to damped, then plain gradient, steps when the Hessian is not
/// positive definite; every step is backtracked so `f` never increases.
fn newton(
    beta0: DVector<f64>,
    value: impl Fn(&DVector<f64>) -> f64,
    derivs: impl Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
) -> Newton {
    let mut beta = beta0;
    let mut f = value(&beta);
    let mut trace = vec![f];
    let mut iterations = 0;
    while iterations < MAX_ITER {
        let (g, h) = derivs(&beta);
        if g.norm() < GRAD_TOL {
            break;
        }
        iterations += 1;
        let dir = descent_direction(&g, h);
        let slope = g.dot(&dir);
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-14 {
            let cand = &beta - t * &dir;
            let fc = value(&cand);
            if fc.is_finite() && fc <= f - 1e-4 * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((b, fc)) => {
                beta = b;
                f = fc;
                trace.push(f);
            }
            None => break,
        }
    }
    Newton {
        beta,
        iterations,
        trace,
    }
}

fn descent_direction(g: &DVector<f64>, h: DMatrix<f64>) -> DVector<f64> {
    if let Some(c) = h.clone().cholesky() {
        return c.solve(g);
    }
    let scale = (0..h.nrows()).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let mut mu = 1e-10 * scale;
    for _ in 0..12 {
        let mut damped = h.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += mu;
        }
        if let Some(c) = damped.cholesky() {
            return c.solve(g);
        }
        mu *= 100.0;
    }
    g.clone()
}

fn penalty(beta: &DVector<f64>, l2: f64, block: usize) -> f64 {
    0.5 * l2
        * beta
            .iter()
            .enumerate()
            .filter(|(i, _)| i % block != 0)
            .map(|(_, b)| b * b)
            .sum::<f64>()
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn check_l2(l2: f64) -> Result<()> {
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::InvalidArgument(format!("l2 must be nonnegative, got {l2}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    /// Intercept first.
    pub coef: Vec<f64>,
    /// Unpenalized log-likelihood at `coef`.
    pub loglik: f64,
    /// Log-likelihood of the intercept-only maximum-likelihood model.
    pub null_loglik: f64,
    pub pseudo_r2: f64,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

fn mcfadden(loglik: f64, null: f64) -> f64 {
    (1.0 - loglik / null).max(0.0)
}

/// Binary logistic regression maximizing
/// `loglik - l2/2 * |w|^2` (intercept unpenalized) by Newton's method.
pub fn fit_logistic(x: &[f64], cols: usize, y: &[bool], l2: f64) -> Result<LogisticFit> {
    check_l2(l2)?;
    let rows = y.len();
    let a = with_intercept(x, cols, rows)?;
    let n1 = y.iter().filter(|&&v| v).count();
    let n0 = rows - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::Degenerate("binary outcome has a single class".into()));
    }
    let yv = DVector::from_iterator(rows, y.iter().map(|&v| f64::from(u8::from(v))));
    let p = cols + 1;
    let loglik = |b: &DVector<f64>| -> f64 {
        let eta = &a * b;
        eta.iter().zip(yv.iter()).map(|(e, y)| y * e - softplus(*e)).sum()
    };
    let value = |b: &DVector<f64>| -loglik(b) + penalty(b, l2, p);
    let derivs = |b: &DVector<f64>| {
        let eta = &a * b;
        let mu = eta.map(crate::grad::sigmoid);
        let mut g = a.transpose() * (&mu - &yv);
        let w = mu.map(|m| m * (1.0 - m));
        let aw = DMatrix::from_fn(rows, p, |r, c| a[(r, c)] * w[r]);
        let mut h = a.transpose() * aw;
        for i in 1..p {
            g[i] += l2 * b[i];
            h[(i, i)] += l2;
        }
        (g, h)
    };
    let mut beta0 = DVector::zeros(p);
    beta0[0] = (n1 as f64 / n0 as f64).ln();
    let fit = newton(beta0, value, derivs);
    let (n, n1, n0) = (rows as f64, n1 as f64, n0 as f64);
    let null = n1 * (n1 / n).ln() + n0 * (n0 / n).ln();
    let ll = loglik(&fit.beta);
    Ok(LogisticFit {
        coef: fit.beta.iter().copied().collect(),
        loglik: ll,
        null_loglik: null,
        pseudo_r2: mcfadden(ll, null),
        iterations: fit.iterations,
        objective_trace: fit.trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialFit {
    /// Most frequent class (smallest label on ties); its logit is fixed at 0.
    pub reference: usize,
    /// Non-reference classes in ascending label order.
    pub classes: Vec<usize>,
    /// One coefficient block (intercept first) per entry of `classes`.
    pub coef: Vec<Vec<f64>>,
    pub loglik: f64,
    pub null_loglik: f64,
    pub pseudo_r2: f64,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

/// Multinomial logistic regression against the most frequent class,
/// maximized by damped Newton iterations with backtracking line search.
pub fn fit_multinomial(x: &[f64], cols: usize, y: &[usize], l2: f64) -> Result<MultinomialFit> {
    check_l2(l2)?;
    let rows = y.len();
    let a = with_intercept(x, cols, rows)?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in y {
        *counts.entry(c).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Degenerate("categorical outcome has a single class".into()));
    }
    let reference = counts
        .iter()
        .fold((usize::MAX, 0), |acc, (&c, &n)| if n > acc.1 { (c, n) } else { acc })
        .0;
    let classes: Vec<usize> = counts.keys().copied().filter(|&c| c != reference).collect();
    let k = classes.len();
    let p = cols + 1;
    let m = k * p;
    // Index of each row's class among `classes`, or None for the reference.
    let yi: Vec<Option<usize>> = y.iter().map(|c| classes.binary_search(c).ok()).collect();

    // Per row: logits of the non-reference classes.
    let logits = |b: &DVector<f64>| -> DMatrix<f64> {
        let bm = DMatrix::from_fn(p, k, |r, c| b[c * p + r]);
        &a * bm
    };
    let row_probs = |eta: &DMatrix<f64>, r: usize| -> (Vec<f64>, f64) {
        let mx = (0..k).map(|j| eta[(r, j)]).fold(0.0, f64::max);
        let ex: Vec<f64> = (0..k).map(|j| (eta[(r, j)] - mx).exp()).collect();
        let denom = (-mx).exp() + ex.iter().sum::<f64>();
        (ex.iter().map(|e| e / denom).collect(), mx + denom.ln())
    };
    let loglik = |b: &DVector<f64>| -> f64 {
        let eta = logits(b);
        (0..rows)
            .map(|r| {
                let (_, lse) = row_probs(&eta, r);
                yi[r].map_or(0.0, |j| eta[(r, j)]) - lse
            })
            .sum()
    };
    let value = |b: &DVector<f64>| -loglik(b) + penalty(b, l2, p);
    let derivs = |b: &DVector<f64>| {
        let eta = logits(b);
        let mut g = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, m);
        for r in 0..rows {
            let (pi, _) = row_probs(&eta, r);
            let ar = a.row(r);
            for j in 0..k {
                let resid = pi[j] - f64::from(u8::from(yi[r] == Some(j)));
                for u in 0..p {
                    g[j * p + u] += resid * ar[u];
                }
                for l in 0..k {
                    let wjl = pi[j] * (f64::from(u8::from(j == l)) - pi[l]);
                    if wjl == 0.0 {
                        continue;
                    }
                    for u in 0..p {
                        let au = ar[u] * wjl;
                        if au == 0.0 {
                            continue;
                        }
                        for v in 0..p {
                            h[(j * p + u, l * p + v)] += au * ar[v];
                        }
                    }
                }
            }
        }
        for i in 0..m {
            if i % p != 0 {
                g[i] += l2 * b[i];
                h[(i, i)] += l2;
            }
        }
        (g, h)
    };
    let n_ref = counts[&reference] as f64;
    let mut beta0 = DVector::zeros(m);
    for (j, c) in classes.iter().enumerate() {
        beta0[j * p] = (counts[c] as f64 / n_ref).ln();
    }
    let fit = newton(beta0, value, derivs);
    let n = rows as f64;
    let null: f64 = counts.values().map(|&c| c as f64 * (c as f64 / n).ln()).sum();
    let ll = loglik(&fit.beta);
    Ok(MultinomialFit {
        reference,
        coef: (0..k).map(|j| fit.beta.rows(j * p, p).iter().copied().collect()).collect(),
        classes,
        loglik: ll,
        null_loglik: null,
        pseudo_r2: mcfadden(ll, null),
        iterations: fit.iterations,
        objective_trace: fit.trace,
    })
}

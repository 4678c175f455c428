//! Pearson, Spearman and Kendall τ-b coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMetric {
    Pearson,
    Spearman,
    Kendall,
}

fn check(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::dim("correlate", format!("series of length {} and {}", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::Domain(format!("correlation needs at least 3 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Domain("correlation of non-finite values".into()));
    }
    Ok(())
}

fn undefined() -> Error {
    Error::Domain("coefficient undefined for a constant series".into())
}

pub fn correlate(xs: &[f64], ys: &[f64], metric: CorrelationMetric) -> Result<f64> {
    check(xs, ys)?;
    match metric {
        CorrelationMetric::Pearson => pearson(xs, ys),
        CorrelationMetric::Spearman => pearson(&ranks(xs), &ranks(ys)),
        CorrelationMetric::Kendall => kendall_tau_b(xs, ys),
    }
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(undefined());
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given the mean of the positions they span.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn tied_pairs(xs: &[f64]) -> u64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mut total = 0;
    let mut run = 1u64;
    for w in v.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

fn kendall_tau_b(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as u64;
    let n0 = n * (n - 1) / 2;
    let (n1, n2) = (tied_pairs(xs), tied_pairs(ys));
    if n0 == n1 || n0 == n2 {
        return Err(undefined());
    }
    let (mut concordant, mut discordant) = (0i64, 0i64);
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let s = (xs[i] - xs[j]).signum() * (ys[i] - ys[j]).signum();
            let tied = xs[i] == xs[j] || ys[i] == ys[j];
            if tied {
                continue;
            }
            if s > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let denom = (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();
    Ok(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use CorrelationMetric::*;

    #[test]
    fn identical_and_reversed_series() {
        let xs = [1.0, 4.0, 2.0, 8.0, 5.0];
        let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
        for m in [Pearson, Spearman, Kendall] {
            assert!((correlate(&xs, &xs, m).unwrap() - 1.0).abs() < 1e-12);
            assert!((correlate(&xs, &neg, m).unwrap() + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn average_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn kendall_with_ties_known_value() {
        // Hand count: n0 = 10, x ties 1, y ties 1, C = 7, D = 1.
        let xs = [1.0, 2.0, 2.0, 3.0, 4.0];
        let ys = [1.0, 3.0, 2.0, 2.0, 5.0];
        let t = correlate(&xs, &ys, Kendall).unwrap();
        assert!((t - 6.0 / 9.0).abs() < 1e-12, "{t}");
    }

    #[test]
    fn errors() {
        assert!(correlate(&[1.0, 2.0], &[1.0, 2.0], Pearson).is_err());
        assert!(correlate(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], Spearman).is_err());
        assert!(correlate(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], Kendall).is_err());
        assert!(correlate(&[1.0, 2.0, 3.0], &[1.0, 2.0], Kendall).is_err());
    }
}

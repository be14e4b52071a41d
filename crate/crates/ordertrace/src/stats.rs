//! Rank statistics, the exact permutation engine, and small regression
//! helpers.
//!
//! The permutation test here is the exactness anchor for the whole crate:
//! for any deterministic statistic and any artifact independent of the
//! transcript's order, the returned p-value is exactly uniform on
//! `{(j+1)/(m+1)}` for `j = 0..m`. The analytic Spearman p-values are the
//! fast approximation layered on top and are tested against this engine.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::t_cdf;
use crate::error::Error;
use crate::rng::RandomSource;
use crate::transcript::{random_step_permutation, Transcript};
use crate::Result;

/// A deterministic statistic of a (possibly relabeled) transcript. The
/// artifact under test is captured by the closure.
pub type StatisticFn<'a> = dyn Fn(&Transcript) -> f64 + Sync + 'a;

/// Paired observations: a real-valued score per entry and the training step
/// it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    scores: Vec<f64>,
    steps: Vec<u64>,
}

impl ScoreSeries {
    /// Requires matching lengths, at least 3 pairs, and finite scores.
    pub fn new(scores: Vec<f64>, steps: Vec<u64>) -> Result<Self> {
        if scores.len() != steps.len() {
            return Err(Error::InvalidParameter(format!(
                "{} scores but {} steps",
                scores.len(),
                steps.len()
            )));
        }
        if scores.len() < 3 {
            return Err(Error::TooFewExamples {
                min: 3,
                found: scores.len(),
            });
        }
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(i));
        }
        Ok(Self { scores, steps })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }
}

/// 1-based average ranks: tied values all receive the mean of the rank
/// positions they span, so the rank sum is always n(n+1)/2.
pub fn ranks(values: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(i));
    }
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average of ranks i+1..=j+1.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    Ok(out)
}

/// Spearman rank correlation with its analytic t-approximation p-values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub n: usize,
    pub t_stat: f64,
    /// P(correlation this positive or more under independence); small when
    /// scores rise with step.
    pub p_one_sided: f64,
    pub p_two_sided: f64,
}

/// Rank correlation of scores against steps, one-sided toward positive
/// correlation, with the t-approximation on n − 2 degrees of freedom.
/// Perfect monotone series hit rho = ±1 exactly (rank arithmetic is exact
/// in doubles) and map to the limiting p-values 0 and 1.
pub fn spearman(series: &ScoreSeries) -> Result<SpearmanResult> {
    let n = series.len();
    let rx = ranks(series.scores())?;
    let steps_f: Vec<f64> = series.steps().iter().map(|&s| s as f64).collect();
    let ry = ranks(&steps_f)?;
    let mean = (n as f64 + 1.0) / 2.0;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = rx[i] - mean;
        let dy = ry[i] - mean;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateRanks);
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let dof = (n - 2) as f64;
    // Both tails are evaluated directly rather than as 1 - cdf, which
    // would round extreme p-values (the interesting ones) to exactly 0.
    let (t_stat, p_one_sided, p_opposite) = if rho >= 1.0 {
        (f64::INFINITY, 0.0, 1.0)
    } else if rho <= -1.0 {
        (f64::NEG_INFINITY, 1.0, 0.0)
    } else {
        let t = rho * (dof / (1.0 - rho * rho)).sqrt();
        (t, t_cdf(-t, dof), t_cdf(t, dof))
    };
    let p_two_sided = 2.0 * p_one_sided.min(p_opposite);
    Ok(SpearmanResult {
        rho,
        n,
        t_stat,
        p_one_sided,
        p_two_sided,
    })
}

/// Result of the exact permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    /// Lies exactly on the support {(j+1)/(m+1)} for j = 0..m.
    pub p_hat: f64,
    pub m: usize,
    pub observed: f64,
    /// Permutations counted at or above the observed statistic after tie
    /// resolution.
    pub exceed_count: u64,
}

/// Exact permutation test of order-independence.
///
/// Draws `m` uniform step relabelings, evaluates `phi` on each, and returns
/// `p_hat = (1 + #{j : phi_j >= observed}) / (m + 1)`, where exact ties
/// (bit-identical statistics; near-ties are not special-cased) are resolved
/// by ranking the observed value uniformly at random among its ties. That
/// placement is what makes p_hat exactly uniform for independent artifacts
/// even when the statistic collides, including the constant-statistic
/// extreme.
///
/// Permutation `j` draws from stream `j` of `r` and the tie placement from
/// stream 0, so the result is bit-identical at any thread count.
pub fn permutation_test<F>(t: &Transcript, phi: F, m: usize, r: &RandomSource) -> PermutationResult
where
    F: Fn(&Transcript) -> f64 + Sync,
{
    assert!(m >= 1, "permutation_test requires m >= 1");
    let observed = phi(t);
    let obs_bits = observed.to_bits();
    let (strict, ties) = (1..=m as u64)
        .into_par_iter()
        .map(|j| {
            let stream = r.stream(j);
            let perm = random_step_permutation(t.num_steps(), &stream);
            let relabeled = t.relabel_steps(&perm);
            let v = phi(&relabeled);
            if v > observed {
                (1u64, 0u64)
            } else if v.to_bits() == obs_bits {
                (0, 1)
            } else {
                (0, 0)
            }
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let tie_wins = if ties > 0 {
        r.stream(0).rng().random_range(0..=ties)
    } else {
        0
    };
    let exceed_count = strict + tie_wins;
    PermutationResult {
        p_hat: (1 + exceed_count) as f64 / (m as f64 + 1.0),
        m,
        observed,
        exceed_count,
    }
}

/// Residuals of `y` after ordinary least squares on an intercept plus the
/// given feature columns. `features` may be empty, in which case this is
/// mean-centering.
pub fn residualize(y: &[f64], features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = y.len();
    let d = features.len();
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(i));
    }
    for col in features {
        if col.len() != n {
            return Err(Error::InvalidParameter(format!(
                "feature column of length {} against {} responses",
                col.len(),
                n
            )));
        }
        if let Some(i) = col.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(i));
        }
    }
    if n <= d + 1 {
        return Err(Error::SingularDesign);
    }
    // Normal equations over the design [1 | features]. p = d + 1 columns.
    let p = d + 1;
    let col = |j: usize, i: usize| -> f64 {
        if j == 0 {
            1.0
        } else {
            features[j - 1][i]
        }
    };
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            let xj = col(j, i);
            b[j] += xj * y[i];
            for k in j..p {
                a[j][k] += xj * col(k, i);
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            a[j][k] = a[k][j];
        }
    }
    let beta = solve_spd(&mut a, &mut b)?;
    let mut res = Vec::with_capacity(n);
    for i in 0..n {
        let mut fit = 0.0;
        for j in 0..p {
            fit += beta[j] * col(j, i);
        }
        res.push(y[i] - fit);
    }
    Ok(res)
}

/// Gaussian elimination with partial pivoting; flags rank deficiency.
fn solve_spd(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>> {
    let p = b.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1e-300);
    for k in 0..p {
        let (pivot_row, pivot) = (k..p)
            .map(|r| (r, a[r][k].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).expect("finite"))
            .expect("non-empty");
        if pivot <= scale * 1e-12 {
            return Err(Error::SingularDesign);
        }
        a.swap(k, pivot_row);
        b.swap(k, pivot_row);
        for r in (k + 1)..p {
            let f = a[r][k] / a[k][k];
            for c in k..p {
                a[r][c] -= f * a[k][c];
            }
            b[r] -= f * b[k];
        }
    }
    let mut x = vec![0.0; p];
    for k in (0..p).rev() {
        let mut s = b[k];
        for c in (k + 1)..p {
            s -= a[k][c] * x[c];
        }
        x[k] = s / a[k][k];
    }
    Ok(x)
}

/// OLS slope of scores on steps, with its t-statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionSlope {
    pub slope: f64,
    pub t_stat: f64,
}

/// Diagnostic least-squares trend of scores over raw step values (not
/// ranks). An exact fit reports an infinite t.
pub fn regression_slope(series: &ScoreSeries) -> Result<RegressionSlope> {
    let n = series.len() as f64;
    let xs: Vec<f64> = series.steps().iter().map(|&s| s as f64).collect();
    let ys = series.scores();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..xs.len() {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateRanks);
    }
    let slope = sxy / sxx;
    let mut rss = 0.0;
    for i in 0..xs.len() {
        let fit = my + slope * (xs[i] - mx);
        rss += (ys[i] - fit) * (ys[i] - fit);
    }
    let dof = n - 2.0;
    let t_stat = if rss == 0.0 {
        if slope == 0.0 {
            0.0
        } else {
            f64::INFINITY * slope.signum()
        }
    } else {
        slope / (rss / dof / sxx).sqrt()
    };
    Ok(RegressionSlope { slope, t_stat })
}

/// Bonferroni combination: min(1, k * min(p)).
pub fn bonferroni(ps: &[f64]) -> Result<f64> {
    if ps.is_empty() {
        return Err(Error::InvalidParameter("no p-values to combine".into()));
    }
    for (i, &p) in ps.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "p-value {p} at index {i} outside (0, 1]"
            )));
        }
    }
    let min = ps.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((ps.len() as f64 * min).min(1.0))
}

/// One-sample Kolmogorov-Smirnov statistic against Uniform(0, 1).
pub fn ks_uniform_statistic(ps: &[f64]) -> f64 {
    let mut sorted = ps.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &p) in sorted.iter().enumerate() {
        d = d.max(p - i as f64 / n).max((i as f64 + 1.0) / n - p);
    }
    d
}

//! Effect size and paired significance testing used to compare runs.

use crate::error::{DeconError, Result};
use statrs::function::erf::erfc;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standardized mean difference with pooled sample standard deviation:
/// d = (M1 - M2) / sqrt(((n1-1)s1^2 + (n2-1)s2^2) / (n1+n2-2)).
pub fn cohens_d(group_a: &[f64], group_b: &[f64]) -> Result<f64> {
    let (n1, n2) = (group_a.len(), group_b.len());
    if n1 < 2 || n2 < 2 {
        return Err(DeconError::Stats(format!(
            "cohens_d needs at least 2 samples per group, got {n1} and {n2}"
        )));
    }
    let (s1, s2) = (sample_var(group_a), sample_var(group_b));
    let pooled = ((n1 - 1) as f64 * s1 + (n2 - 1) as f64 * s2) / (n1 + n2 - 2) as f64;
    if pooled <= 0.0 {
        return Err(DeconError::Stats("cohens_d: zero pooled variance".into()));
    }
    Ok((mean(group_a) - mean(group_b)) / pooled.sqrt())
}

/// Ranks of |diffs| with average ranks for ties, paired with the sign.
/// Zero differences must already be dropped.
fn signed_ranks(diffs: &[f64]) -> Vec<(f64, bool)> {
    let mut idx: Vec<usize> = (0..diffs.len()).collect();
    idx.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).expect("finite diffs"));
    let mut ranks = vec![0.0f64; diffs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && diffs[idx[j + 1]].abs() == diffs[idx[i]].abs() {
            j += 1;
        }
        // average rank for the tie group spanning sorted positions i..=j
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    diffs.iter().zip(ranks).map(|(&d, r)| (r, d > 0.0)).collect()
}

fn drop_zeros(diffs: &[f64]) -> Result<Vec<f64>> {
    let kept: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if kept.is_empty() {
        return Err(DeconError::Stats("wilcoxon: all differences are zero".into()));
    }
    Ok(kept)
}

/// Exact null distribution of W+ by counting subsets of the rank multiset.
/// Ranks are half-integers, so sums are tracked at twice their value.
fn exact_two_sided(ranks: &[f64], w_plus: f64) -> f64 {
    let scaled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = scaled.iter().sum();
    let mut dp = vec![0.0f64; total + 1];
    dp[0] = 1.0;
    for &r in &scaled {
        for s in (r..=total).rev() {
            dp[s] += dp[s - r];
        }
    }
    let patterns = 2.0f64.powi(ranks.len() as i32);
    let w2 = (2.0 * w_plus).round() as usize;
    let p_le: f64 = dp[..=w2].iter().sum::<f64>() / patterns;
    let p_ge: f64 = dp[w2..].iter().sum::<f64>() / patterns;
    (2.0 * p_le.min(p_ge)).min(1.0)
}

/// Normal approximation with continuity correction and tie correction.
fn normal_two_sided(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    // tie correction: sum(t^3 - t)/48 over tie groups
    let mut sorted: Vec<f64> = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ranks"));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    // continuity correction toward the mean, never across it
    let z = (w_plus - mean).abs().max(0.5) - 0.5;
    let z = z / var.sqrt();
    let phi = 0.5 * erfc(z / std::f64::consts::SQRT_2);
    (2.0 * phi).min(1.0)
}

/// Two-sided Wilcoxon signed-rank p-value. Exact enumeration for n <= 20
/// after dropping zero differences; normal approximation with continuity
/// correction above.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<f64> {
    let kept = drop_zeros(diffs)?;
    let sr = signed_ranks(&kept);
    let ranks: Vec<f64> = sr.iter().map(|(r, _)| *r).collect();
    let w_plus: f64 = sr.iter().filter(|(_, pos)| *pos).map(|(r, _)| *r).sum();
    if kept.len() <= 20 {
        Ok(exact_two_sided(&ranks, w_plus))
    } else {
        Ok(normal_two_sided(&ranks, w_plus))
    }
}

/// Exact p regardless of n (used to validate the approximation).
pub fn wilcoxon_exact(diffs: &[f64]) -> Result<f64> {
    let kept = drop_zeros(diffs)?;
    let sr = signed_ranks(&kept);
    let ranks: Vec<f64> = sr.iter().map(|(r, _)| *r).collect();
    let w_plus: f64 = sr.iter().filter(|(_, pos)| *pos).map(|(r, _)| *r).sum();
    Ok(exact_two_sided(&ranks, w_plus))
}

/// Normal-approximation p regardless of n (used to validate the approximation).
pub fn wilcoxon_normal_approx(diffs: &[f64]) -> Result<f64> {
    let kept = drop_zeros(diffs)?;
    let sr = signed_ranks(&kept);
    let ranks: Vec<f64> = sr.iter().map(|(r, _)| *r).collect();
    let w_plus: f64 = sr.iter().filter(|(_, pos)| *pos).map(|(r, _)| *r).sum();
    Ok(normal_two_sided(&ranks, w_plus))
}

/// Brute-force reference: enumerates every sign pattern explicitly.
/// Exponential in n; for tests only.
pub fn wilcoxon_brute_force(diffs: &[f64]) -> Result<f64> {
    let kept = drop_zeros(diffs)?;
    let sr = signed_ranks(&kept);
    let ranks: Vec<f64> = sr.iter().map(|(r, _)| *r).collect();
    let w_plus: f64 = sr.iter().filter(|(_, pos)| *pos).map(|(r, _)| *r).sum();
    let n = ranks.len();
    assert!(n <= 20, "brute force capped at n=20");
    let mut le = 0usize;
    let mut ge = 0usize;
    let eps = 1e-9;
    for pattern in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| pattern >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= w_plus + eps {
            le += 1;
        }
        if w >= w_plus - eps {
            ge += 1;
        }
    }
    let patterns = (1u64 << n) as f64;
    let p = 2.0 * (le.min(ge) as f64) / patterns;
    Ok(p.min(1.0))
}

//! Nonparametric comparison statistics: Cliff's delta, Mann-Whitney U,
//! Kruskal-Wallis, and the rank-skimming procedure for picking the
//! statistically indistinguishable best/worst groups.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
    #[error("need at least {0} groups, got {1}")]
    TooFewGroups(usize, usize),
    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    BadAlpha(String),
    #[error("samples contain NaN")]
    NotComparable,
}

/// Effect-size magnitude per the conventional |δ| thresholds 0.147 / 0.33 /
/// 0.474. A value exactly at a threshold takes the larger label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Magnitude {
    Negligible,
    Small,
    Medium,
    Large,
}

impl Magnitude {
    pub fn from_delta(delta: f64) -> Magnitude {
        let d = delta.abs();
        if d < 0.147 {
            Magnitude::Negligible
        } else if d < 0.33 {
            Magnitude::Small
        } else if d < 0.474 {
            Magnitude::Medium
        } else {
            Magnitude::Large
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub cliffs_delta: f64,
    pub magnitude: Magnitude,
    /// U statistic for the first sample (`U_a`).
    pub u_statistic: f64,
    /// Two-sided Mann-Whitney p-value.
    pub p_value: f64,
}

fn check(sample: &[f64]) -> Result<(), StatsError> {
    if sample.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if sample.iter().any(|x| x.is_nan()) {
        return Err(StatsError::NotComparable);
    }
    Ok(())
}

/// δ = (#{a_i > b_j} − #{a_i < b_j}) / (|a|·|b|).
pub fn cliffs_delta(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check(a)?;
    check(b)?;
    let mut gt = 0i64;
    let mut lt = 0i64;
    for &x in a {
        for &y in b {
            if x > y {
                gt += 1;
            } else if x < y {
                lt += 1;
            }
        }
    }
    Ok((gt - lt) as f64 / (a.len() as f64 * b.len() as f64))
}

/// Midranks of the pooled sample, in pooled order, plus Σ(t³−t) over ties.
fn midranks(pooled: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].partial_cmp(&pooled[j]).unwrap());
    let mut ranks = vec![0.0; pooled.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    (ranks, tie_term)
}

/// Number of (subset-size, rank-sum) arrangements for the exact Mann-Whitney
/// null distribution: counts subsets of {1..n} of size m with each possible
/// rank total.
fn exact_mwu_p(u_a: f64, n1: usize, n2: usize) -> f64 {
    // dp[m][s] = #subsets of the ranks seen so far with size m and U-sum s.
    // Tracked in U space directly: inserting the k-th smallest of sample a
    // among b's values... equivalently count subsets by U = rank_sum - m(m+1)/2.
    let max_u = n1 * n2;
    let mut dp = vec![vec![0u128; max_u + 1]; n1 + 1];
    dp[0][0] = 1;
    // Standard recurrence over n = n1 + n2 pooled ranks.
    for r in 1..=(n1 + n2) {
        for m in (1..=n1.min(r)).rev() {
            for s in 0..=max_u {
                // picking pooled rank r as the m-th member of sample a adds
                // (r - m) to U_a
                let add = r - m;
                if s >= add && dp[m - 1][s - add] > 0 {
                    let v = dp[m - 1][s - add];
                    dp[m][s] += v;
                }
            }
        }
    }
    let total: u128 = dp[n1].iter().sum();
    let u_low = u_a.min(max_u as f64 - u_a);
    let tail: u128 = dp[n1]
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s as f64) <= u_low + 1e-9)
        .map(|(_, &c)| c)
        .sum();
    let mut p = 2.0 * tail as f64 / total as f64;
    if p > 1.0 {
        p = 1.0;
    }
    p
}

/// Mann-Whitney U with midrank tie handling. Two-sided p from the normal
/// approximation with tie-corrected variance and continuity correction; exact
/// null distribution when |a| + |b| ≤ 16 and the pooled data is tie-free.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<(f64, f64), StatsError> {
    check(a)?;
    check(b)?;
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, tie_term) = midranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u_a = r1 - (n1 * (n1 + 1)) as f64 / 2.0;

    let n = (n1 + n2) as f64;
    let mean = (n1 * n2) as f64 / 2.0;
    let p = if n1 + n2 <= 16 && tie_term == 0.0 {
        exact_mwu_p(u_a, n1, n2)
    } else {
        let var = (n1 * n2) as f64 / 12.0 * (n + 1.0 - tie_term / (n * (n - 1.0)));
        if var == 0.0 {
            // all pooled values identical
            1.0
        } else {
            let z = (u_a - mean).abs() - 0.5; // continuity correction
            let z = z.max(0.0) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).unwrap();
            2.0 * (1.0 - normal.cdf(z))
        }
    };
    Ok((u_a, p.min(1.0)))
}

/// Cliff's delta, its magnitude label, and the Mann-Whitney test in one
/// record.
pub fn effect_report(a: &[f64], b: &[f64]) -> Result<EffectReport, StatsError> {
    let delta = cliffs_delta(a, b)?;
    let (u, p) = mann_whitney_u(a, b)?;
    Ok(EffectReport {
        cliffs_delta: delta,
        magnitude: Magnitude::from_delta(delta),
        u_statistic: u,
        p_value: p,
    })
}

/// Kruskal-Wallis H with tie correction; p from χ² with (groups − 1) degrees
/// of freedom. All-identical data yields H = 0, p = 1.
pub fn kruskal_wallis(groups: &[&[f64]]) -> Result<(f64, f64), StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(2, groups.len()));
    }
    for g in groups {
        check(g)?;
    }
    let pooled: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    let n = pooled.len() as f64;
    let (ranks, tie_term) = midranks(&pooled);
    let mut h = 0.0;
    let mut offset = 0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        h += r * r / g.len() as f64;
        offset += g.len();
    }
    h = 12.0 / (n * (n + 1.0)) * h - 3.0 * (n + 1.0);
    let correction = 1.0 - tie_term / (n * n * n - n);
    if correction == 0.0 {
        // every pooled value identical: no evidence of variation
        return Ok((0.0, 1.0));
    }
    h /= correction;
    let df = (groups.len() - 1) as f64;
    let chi = ChiSquared::new(df).unwrap();
    let p = 1.0 - chi.cdf(h.max(0.0));
    Ok((h.max(0.0), p))
}

/// Groups whose mean pooled rank is lowest and statistically
/// indistinguishable from each other, per the sequential Holm-Bonferroni
/// skimming procedure: an omnibus Kruskal-Wallis gate, then successive
/// pairwise Mann-Whitney tests walking up the rank ordering; the skim stops
/// at the first significant break. Empty when the omnibus test fails.
pub fn skim_best(groups: &[&[f64]], alpha: f64) -> Result<Vec<usize>, StatsError> {
    skim(groups, alpha, false)
}

/// Dual of [`skim_best`]: the statistically indistinguishable highest-rank
/// groups.
pub fn skim_worst(groups: &[&[f64]], alpha: f64) -> Result<Vec<usize>, StatsError> {
    skim(groups, alpha, true)
}

fn skim(groups: &[&[f64]], alpha: f64, worst: bool) -> Result<Vec<usize>, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::BadAlpha(format!("{alpha}")));
    }
    let (_, omnibus_p) = kruskal_wallis(groups)?;
    if omnibus_p >= alpha {
        return Ok(Vec::new());
    }
    // Order groups by mean pooled rank.
    let pooled: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    let (ranks, _) = midranks(&pooled);
    let mut mean_rank = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for g in groups {
        let m: f64 = ranks[offset..offset + g.len()].iter().sum::<f64>() / g.len() as f64;
        mean_rank.push(m);
        offset += g.len();
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = if worst {
            (mean_rank[j], mean_rank[i])
        } else {
            (mean_rank[i], mean_rank[j])
        };
        a.partial_cmp(&b).unwrap().then(i.cmp(&j))
    });
    // Walk up from the extreme group; Holm-Bonferroni over the sequence of
    // m − 1 successive comparisons.
    let m = groups.len();
    let mut members = vec![order[0]];
    for (step, &next) in order[1..].iter().enumerate() {
        let (_, p) = mann_whitney_u(groups[order[0]], groups[next])?;
        let adjusted_alpha = alpha / (m - 1 - step) as f64;
        if p < adjusted_alpha {
            break;
        }
        members.push(next);
    }
    members.sort_unstable();
    Ok(members)
}

//! Block-level difference-in-differences and randomization inference.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::assemble::{Block, BlockDesign, mid_ranks};
use crate::data::StudyPopulation;
use crate::error::{invalid, Error, Result};
use crate::stats::{quantile_sorted, Summary};

/// Signed-rank sizes up to this are handled by exact enumeration.
pub const EXACT_SIGNED_RANK_MAX: usize = 20;
/// Rank-sum problems with at most this many splits are enumerated.
pub const EXACT_RANK_SUM_MAX: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiD {
    pub block_id: usize,
    pub type_id: u8,
    pub value: f64,
}

pub fn block_did(block: &Block, pop: &StudyPopulation) -> Result<BlockDiD> {
    let mut value = 0.0;
    for m in &block.members {
        let rec = pop
            .records()
            .get(m.individual)
            .ok_or_else(|| invalid(format!("block {}: individual out of range", block.block_id)))?;
        let r = rec
            .outcome
            .ok_or_else(|| invalid(format!("block {}: {} has no outcome", block.block_id, rec.id)))?;
        value += m.role.sign as f64 * r;
    }
    Ok(BlockDiD {
        block_id: block.block_id,
        type_id: block.type_id,
        value,
    })
}

pub fn design_dids(design: &BlockDesign, pop: &StudyPopulation) -> Result<Vec<BlockDiD>> {
    design.blocks.iter().map(|b| block_did(b, pop)).collect()
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approximation {
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityResult {
    pub gamma: f64,
    pub upper_p: f64,
    pub lower_p: f64,
    /// Sum of ranks of |d| over positive differences.
    pub statistic: f64,
    /// Nonzero differences used.
    pub n: usize,
    pub exact: bool,
}

/// P(T ≥ t) where T = Σ rank_i·B_i, B_i independent Bernoulli(p). Ranks are
/// mid-ranks, so doubling them gives integers.
fn signed_rank_tail_exact(ranks: &[f64], t: f64, p: f64) -> f64 {
    let twice: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = twice.iter().sum();
    let mut dist = vec![0.0; total + 1];
    dist[0] = 1.0;
    let mut reach = 0;
    for &r in &twice {
        for s in (0..=reach).rev() {
            let v = dist[s];
            if v != 0.0 {
                dist[s + r] += v * p;
                dist[s] = v * (1.0 - p);
            }
        }
        reach += r;
    }
    let threshold = (2.0 * t).round() as usize;
    dist[threshold.min(total + 1)..].iter().sum::<f64>().min(1.0)
}

fn signed_rank_tail_normal(ranks: &[f64], t: f64, p: f64) -> f64 {
    let sum: f64 = ranks.iter().sum();
    let sum_sq: f64 = ranks.iter().map(|r| r * r).sum();
    let mean = p * sum;
    let sd = (p * (1.0 - p) * sum_sq).sqrt();
    if sd == 0.0 {
        return if t <= mean { 1.0 } else { 0.0 };
    }
    let z = (t - mean - 0.5) / sd;
    (1.0 - std_normal().cdf(z)).clamp(0.0, 1.0)
}

/// Bounds on the one-sided signed-rank p-value for a positive effect when
/// each block's sign is positive with probability between 1/(1+Γ) and Γ/(1+Γ).
pub fn signed_rank_gamma(values: &[f64], gamma: f64) -> Result<SensitivityResult> {
    signed_rank_gamma_with(values, gamma, Approximation::Auto)
}

pub fn signed_rank_gamma_with(values: &[f64], gamma: f64, how: Approximation) -> Result<SensitivityResult> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(invalid(format!("gamma must be ≥ 1, got {gamma}")));
    }
    if values.is_empty() {
        return Err(invalid("no differences to test"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("differences must be finite"));
    }
    let nz: Vec<f64> = values.iter().copied().filter(|&v| v != 0.0).collect();
    if nz.is_empty() {
        return Ok(SensitivityResult {
            gamma,
            upper_p: 1.0,
            lower_p: 1.0,
            statistic: 0.0,
            n: 0,
            exact: true,
        });
    }
    let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
    let ranks = mid_ranks(&abs);
    let t: f64 = ranks.iter().zip(&nz).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();
    let exact = match how {
        Approximation::Auto => nz.len() <= EXACT_SIGNED_RANK_MAX,
        Approximation::Exact => true,
        Approximation::Normal => false,
    };
    let hi = gamma / (1.0 + gamma);
    let lo = 1.0 / (1.0 + gamma);
    let tail = |p: f64| {
        if exact {
            signed_rank_tail_exact(&ranks, t, p)
        } else {
            signed_rank_tail_normal(&ranks, t, p)
        }
    };
    Ok(SensitivityResult {
        gamma,
        upper_p: tail(hi),
        lower_p: tail(lo),
        statistic: t,
        n: nz.len(),
        exact,
    })
}

/// Γ equivalent to a bias that multiplies the odds of treatment by λ and the
/// odds of a positive difference by Δ.
pub fn amplify(lambda: f64, delta: f64) -> Result<f64> {
    if !(lambda >= 1.0) || !(delta >= 1.0) || !lambda.is_finite() || !delta.is_finite() {
        return Err(invalid("amplification needs λ ≥ 1 and Δ ≥ 1"));
    }
    Ok((lambda * delta + 1.0) / (lambda + delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    pub statistic: f64,
    pub p_two_sided: f64,
    /// Median of all differences a − b.
    pub hl_estimate: f64,
    pub ci_95: (f64, f64),
    pub exact: bool,
}

fn n_choose(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Null distribution of the Mann–Whitney count U for sizes (m, n), no ties.
fn mann_whitney_counts(m: usize, n: usize) -> Vec<f64> {
    // f[i][j][u] built up one observation at a time.
    let mut prev: Vec<Vec<Vec<f64>>> = vec![vec![vec![1.0]; n + 1]; m + 1];
    for i in 0..=m {
        for j in 0..=n {
            if i == 0 || j == 0 {
                prev[i][j] = vec![1.0];
                continue;
            }
            let len = i * j + 1;
            let mut cur = vec![0.0; len];
            // Largest value from sample a: it exceeds all j of b.
            for (u, v) in prev[i - 1][j].iter().enumerate() {
                cur[u + j] += v;
            }
            for (u, v) in prev[i][j - 1].iter().enumerate() {
                cur[u] += v;
            }
            prev[i][j] = cur;
        }
    }
    prev[m][n].clone()
}

/// Wilcoxon rank-sum test of a against b with the Hodges–Lehmann shift.
pub fn wilcoxon_hl(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("both samples must be nonempty"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(invalid("samples must be finite"));
    }
    let m = a.len();
    let n = b.len();
    let big_n = m + n;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = mid_ranks(&pooled);
    let w: f64 = ranks[..m].iter().sum();
    let expected = m as f64 * (big_n as f64 + 1.0) / 2.0;

    let mut diffs: Vec<f64> = Vec::with_capacity(m * n);
    for &x in a {
        for &y in b {
            diffs.push(x - y);
        }
    }
    diffs.sort_by(f64::total_cmp);
    let hl = quantile_sorted(&diffs, 0.5);
    let mn = m * n;

    let exact = n_choose(big_n, m) <= EXACT_RANK_SUM_MAX;
    let z975 = std_normal().inverse_cdf(0.975);
    let (p, k) = if exact {
        // Enumerate every choice of m positions for sample a.
        let mut idx: Vec<usize> = (0..m).collect();
        let dev = (w - expected).abs() - 1e-9;
        let mut hits = 0usize;
        let mut count = 0usize;
        loop {
            count += 1;
            let s: f64 = idx.iter().map(|&i| ranks[i]).sum();
            if (s - expected).abs() >= dev {
                hits += 1;
            }
            let mut i = m;
            while i > 0 && idx[i - 1] == big_n - m + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..m {
                idx[j] = idx[j - 1] + 1;
            }
        }
        let counts = mann_whitney_counts(m, n);
        let total: f64 = counts.iter().sum();
        // Largest k with P(U ≤ k − 1) ≤ 0.025.
        let mut cum = 0.0;
        let mut k = 0;
        for (u, c) in counts.iter().enumerate() {
            cum += c / total;
            if cum > 0.025 {
                k = u;
                break;
            }
        }
        (hits as f64 / count as f64, k)
    } else {
        let mut ties = 0.0;
        let mut sorted = pooled.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            ties += t * t * t - t;
            i = j + 1;
        }
        let nf = big_n as f64;
        let var = m as f64 * n as f64 / 12.0 * ((nf + 1.0) - ties / (nf * (nf - 1.0)).max(1.0));
        let p = if var > 0.0 {
            let z = ((w - expected).abs() - 0.5).max(0.0) / var.sqrt();
            (2.0 * (1.0 - std_normal().cdf(z))).min(1.0)
        } else {
            1.0
        };
        let half = mn as f64 / 2.0;
        let k = (half - z975 * (mn as f64 * (nf + 1.0) / 12.0).sqrt()).floor().max(0.0) as usize;
        (p, k)
    };
    let ci = if k >= 1 && k <= mn {
        (diffs[k - 1], diffs[mn - k])
    } else {
        (diffs[0], diffs[mn - 1])
    };
    Ok(RankSumResult {
        statistic: w,
        p_two_sided: p,
        hl_estimate: hl,
        ci_95: ci,
        exact,
    })
}

/// Continuous, slope-one extension beyond ±β of the identity that levels
/// off at ±2β.
pub fn tail(y: f64, beta: f64) -> f64 {
    if beta <= 0.0 || y.abs() <= beta {
        y
    } else {
        y.signum() * (2.0 * beta - beta * (beta / y.abs()))
    }
}

/// Applies [`tail`] with β the `q`-quantile of |values|.
pub fn tail_transform(values: &[f64], q: f64) -> Result<(Vec<f64>, f64)> {
    if values.is_empty() {
        return Err(invalid("no values to transform"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid(format!("quantile {q} must lie in (0, 1)")));
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let beta = quantile_sorted(&abs, q);
    Ok((values.iter().map(|&y| tail(y, beta)).collect(), beta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidSummary {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// 0.1, 0.2, …, 0.9 quantiles.
    pub deciles: Vec<f64>,
    pub per_type: Vec<(u8, usize)>,
}

pub fn did_summary(dids: &[BlockDiD]) -> Result<DidSummary> {
    if dids.is_empty() {
        return Err(invalid("no block differences"));
    }
    let mut v: Vec<f64> = dids.iter().map(|d| d.value).collect();
    v.sort_by(f64::total_cmp);
    let mut types: Vec<u8> = dids.iter().map(|d| d.type_id).collect();
    types.sort_unstable();
    types.dedup();
    Ok(DidSummary {
        count: v.len(),
        median: quantile_sorted(&v, 0.5),
        q1: quantile_sorted(&v, 0.25),
        q3: quantile_sorted(&v, 0.75),
        deciles: (1..10).map(|i| quantile_sorted(&v, i as f64 / 10.0)).collect(),
        per_type: types
            .iter()
            .map(|&t| (t, dids.iter().filter(|d| d.type_id == t).count()))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeOptions {
    pub gammas: Vec<f64>,
    /// Block types pooled for the summaries and the sensitivity analysis.
    pub pooled_types: Vec<u8>,
    /// The two block types compared by rank sum, first minus second.
    pub compare: (u8, u8),
    pub tail_quantile: f64,
}

impl Default for OutcomeOptions {
    fn default() -> Self {
        OutcomeOptions {
            gammas: (0..=10).map(|i| 1.0 + 0.2 * i as f64).collect(),
            pooled_types: vec![2, 5],
            compare: (2, 5),
            tail_quantile: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeDids {
    pub type_id: u8,
    pub values: Vec<f64>,
    pub summary: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub per_type: Vec<TypeDids>,
    pub pooled_types: Vec<u8>,
    pub pooled: DidSummary,
    pub tail_beta: f64,
    pub transformed: DidSummary,
    pub sensitivity: Vec<SensitivityResult>,
    pub compare: (u8, u8),
    pub comparison: RankSumResult,
}

pub fn outcome_report(design: &BlockDesign, pop: &StudyPopulation, opts: &OutcomeOptions) -> Result<OutcomeReport> {
    let dids = design_dids(design, pop)?;
    let mut type_ids: Vec<u8> = design.plan.iter().map(|p| p.type_id).collect();
    type_ids.sort_unstable();
    let per_type: Vec<TypeDids> = type_ids
        .iter()
        .map(|&t| {
            let values: Vec<f64> = dids.iter().filter(|d| d.type_id == t).map(|d| d.value).collect();
            TypeDids {
                type_id: t,
                summary: Summary::of(&values),
                values,
            }
        })
        .collect();
    let pooled_dids: Vec<BlockDiD> = dids
        .iter()
        .filter(|d| opts.pooled_types.contains(&d.type_id))
        .cloned()
        .collect();
    if pooled_dids.is_empty() {
        return Err(invalid("no blocks in the pooled types"));
    }
    let pooled = did_summary(&pooled_dids)?;
    let values: Vec<f64> = pooled_dids.iter().map(|d| d.value).collect();
    let (tv, beta) = tail_transform(&values, opts.tail_quantile)?;
    let transformed_dids: Vec<BlockDiD> = pooled_dids
        .iter()
        .zip(&tv)
        .map(|(d, &v)| BlockDiD { value: v, ..d.clone() })
        .collect();
    let transformed = did_summary(&transformed_dids)?;
    let sensitivity = opts
        .gammas
        .iter()
        .map(|&g| signed_rank_gamma(&tv, g))
        .collect::<Result<Vec<_>>>()?;
    let side = |t: u8| -> Result<Vec<f64>> {
        per_type
            .iter()
            .find(|x| x.type_id == t)
            .map(|x| x.values.clone())
            .ok_or_else(|| Error::UnknownName(format!("block type {t}")))
    };
    let comparison = wilcoxon_hl(&side(opts.compare.0)?, &side(opts.compare.1)?)?;
    Ok(OutcomeReport {
        per_type,
        pooled_types: opts.pooled_types.clone(),
        pooled,
        tail_beta: beta,
        transformed,
        sensitivity,
        compare: opts.compare,
        comparison,
    })
}

//! Covariate balance between the +1 and −1 sides of each block type.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assemble::{BlockDesign, BlockTypePlan};
use crate::data::{eligibility_link, Group, StudyPopulation, GROUP_COUNT};
use crate::design::contrast_orthogonality;
use crate::error::{invalid, Error, Result};
use crate::stats::{fnv1a, mean, variance, Summary};

pub const DEFAULT_DRAWS: usize = 10_000;
pub const DEFAULT_TAU: f64 = 0.2;

/// Population indices on the +1 and −1 sides of a block type.
pub fn split_by_contrast(design: &BlockDesign, type_id: u8) -> Result<(Vec<usize>, Vec<usize>)> {
    if design.blocks.is_empty() {
        return Err(invalid("design has no blocks"));
    }
    design.plan_for(type_id)?;
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    for b in design.blocks_of(type_id) {
        for m in &b.members {
            if m.role.sign > 0 {
                plus.push(m.individual);
            } else {
                minus.push(m.individual);
            }
        }
    }
    Ok((plus, minus))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    Le,
    Iu,
    Time,
}

impl Factor {
    fn parse(t: &str) -> Option<Factor> {
        match t {
            "LE" => Some(Factor::Le),
            "IU" => Some(Factor::Iu),
            "TIME" => Some(Factor::Time),
            _ => None,
        }
    }

    fn position(self) -> usize {
        match self {
            Factor::Le => 0,
            Factor::Iu => 1,
            Factor::Time => 2,
        }
    }
}

/// A covariate, optionally times eligibility factors, written `age`,
/// `age*LE`, `age*IU*TIME`; a bare product such as `LE*TIME` has no covariate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub covariate: Option<String>,
    pub factors: Vec<Factor>,
}

impl FeatureSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut covariate = None;
        let mut factors = Vec::new();
        for tok in text.split('*').map(str::trim) {
            if tok.is_empty() {
                return Err(invalid(format!("empty term in feature `{text}`")));
            }
            match Factor::parse(tok) {
                Some(f) => factors.push(f),
                None if covariate.is_none() => covariate = Some(tok.to_string()),
                None => return Err(invalid(format!("feature `{text}` names two covariates"))),
            }
        }
        if covariate.is_none() && factors.is_empty() {
            return Err(invalid("empty feature"));
        }
        Ok(FeatureSpec { covariate, factors })
    }

    /// Comma-separated list.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        text.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(FeatureSpec::parse)
            .collect()
    }

    pub fn name(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        if let Some(c) = &self.covariate {
            parts.push(c);
        }
        for f in &self.factors {
            parts.push(match f {
                Factor::Le => "LE",
                Factor::Iu => "IU",
                Factor::Time => "TIME",
            });
        }
        parts.join("*")
    }

    /// Eligibility positions multiplied into the feature, squares cancelled.
    pub fn factor_positions(&self) -> Vec<usize> {
        let mut parity = [false; 3];
        for f in &self.factors {
            parity[f.position()] ^= true;
        }
        (0..3).filter(|&i| parity[i]).collect()
    }

    /// Whether the block type's contrast is aliased with this feature's
    /// eligibility pattern, including the factor a linked covariate carries.
    /// Exact aliasing when the covariate is a known constant within each
    /// group (e.g. an eligibility indicator); otherwise the generic rule.
    pub fn aliased_with_levels(&self, plan: &BlockTypePlan, levels: Option<&[f64; GROUP_COUNT]>) -> bool {
        let Some(levels) = levels else {
            return self.aliased_in(plan);
        };
        let own = self.factor_positions();
        let zeta: Vec<f64> = Group::all()
            .map(|g| {
                let e = g.eligibility();
                levels[g.index()] * own.iter().map(|&f| e[f] as f64).product::<f64>()
            })
            .collect();
        contrast_orthogonality(&plan.contrast(), &zeta)
            .map(|o| o.aliased)
            .unwrap_or(true)
    }

    pub fn aliased_in(&self, plan: &BlockTypePlan) -> bool {
        let own = self.factor_positions();
        if !own.is_empty() && plan.aliases(&own) {
            return true;
        }
        match self.covariate.as_deref().and_then(eligibility_link) {
            Some(link) => {
                let mut with = own;
                match with.iter().position(|&p| p == link) {
                    Some(i) => {
                        with.remove(i);
                    }
                    None => with.push(link),
                }
                !with.is_empty() && plan.aliases(&with)
            }
            None => false,
        }
    }
}

/// Feature values for every record of the population.
pub fn interaction_feature(pop: &StudyPopulation, spec: &FeatureSpec) -> Result<Vec<f64>> {
    let col = spec
        .covariate
        .as_deref()
        .map(|c| pop.covariate_index(c))
        .transpose()?;
    Ok(pop
        .records()
        .iter()
        .map(|r| {
            let base = col.map_or(1.0, |c| r.x[c]);
            let e = r.eligibility();
            spec.factors.iter().fold(base, |v, f| v * e[f.position()] as f64)
        })
        .collect())
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Two-sided permutation p-value for the difference in means, the observed
/// split counted among the draws. When every split can be listed within
/// `draws` evaluations the exact p-value is returned instead.
pub fn permutation_balance_pvalue(plus: &[f64], minus: &[f64], draws: usize, seed: u64) -> Result<f64> {
    if plus.is_empty() || minus.is_empty() {
        return Err(invalid("both sides need at least one value"));
    }
    if draws == 0 {
        return Err(invalid("draws must be positive"));
    }
    let pooled: Vec<f64> = plus.iter().chain(minus).copied().collect();
    let n = pooled.len();
    let m = plus.len();
    let total: f64 = pooled.iter().sum();
    if pooled.iter().all(|&v| v == pooled[0]) {
        return Ok(1.0);
    }
    let stat = |sum_plus: f64| (sum_plus / m as f64 - (total - sum_plus) / (n - m) as f64).abs();
    let observed = stat(plus.iter().sum());
    let scale = pooled.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let threshold = observed - 1e-9 * scale;

    if binomial(n, m) <= draws as f64 {
        let mut hits = 0usize;
        let mut count = 0usize;
        let mut idx: Vec<usize> = (0..m).collect();
        loop {
            count += 1;
            if stat(idx.iter().map(|&i| pooled[i]).sum()) >= threshold {
                hits += 1;
            }
            // Next m-combination in lexicographic order.
            let mut i = m;
            while i > 0 && idx[i - 1] == n - m + i - 1 {
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
        return Ok(hits as f64 / count as f64);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = pooled;
    let mut hits = 1usize;
    for _ in 0..draws {
        let mut sum = 0.0;
        for i in 0..m {
            let j = rng.random_range(i..n);
            work.swap(i, j);
            sum += work[i];
        }
        if stat(sum) >= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / (draws + 1) as f64)
}

/// Truncated product combination: W is the product of the p-values at or
/// below `tau`, and the result is P(W ≤ w) for independent uniforms.
pub fn truncated_product(pvalues: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(invalid(format!("truncation point {tau} must lie in (0, 1]")));
    }
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid(format!("p-value {p} outside [0, 1]")));
    }
    let selected: Vec<f64> = pvalues.iter().copied().filter(|&p| p <= tau).collect();
    if selected.is_empty() {
        return Ok(1.0);
    }
    let w: f64 = selected.iter().product();
    if w <= 0.0 {
        return Ok(0.0);
    }
    let l = pvalues.len();
    let ln_w = w.ln();
    let ln_tau = tau.ln();
    let mut total = 0.0;
    for k in 1..=l {
        let weight = binomial(l, k) * (1.0 - tau).powi((l - k) as i32);
        if weight == 0.0 {
            continue;
        }
        let tk = tau.powi(k as i32);
        let inner = if w <= tk {
            let z = k as f64 * ln_tau - ln_w;
            let mut term = 1.0;
            let mut sum = 1.0;
            for s in 1..k {
                term *= z / s as f64;
                sum += term;
            }
            w * sum
        } else {
            tk
        };
        total += weight * inner;
    }
    Ok(total.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceCell {
    pub feature: String,
    pub type_id: u8,
    pub p_value: f64,
    pub mean_plus: f64,
    pub mean_minus: f64,
    pub std_diff: f64,
    pub aliased: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceTable {
    pub type_ids: Vec<u8>,
    pub features: Vec<String>,
    /// `cells[f][t]` for feature f and the t-th block type.
    pub cells: Vec<Vec<BalanceCell>>,
    pub combined: Vec<f64>,
    pub draws: usize,
    pub tau: f64,
    /// Over all cells whose feature is not aliased in that block type.
    pub summary_balanceable: Option<Summary>,
    pub summary_aliased: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceOptions {
    pub draws: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        BalanceOptions {
            draws: DEFAULT_DRAWS,
            tau: DEFAULT_TAU,
            seed: 0,
        }
    }
}

pub fn cell_seed(seed: u64, feature: &str, type_id: u8) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(feature.as_bytes());
    bytes.push(0);
    bytes.push(type_id);
    fnv1a(&bytes)
}

fn std_diff(a: &[f64], b: &[f64]) -> f64 {
    let pooled = ((variance(a) + variance(b)) / 2.0).sqrt();
    if pooled > 0.0 {
        (mean(a) - mean(b)) / pooled
    } else {
        0.0
    }
}

pub fn balance_table(
    design: &BlockDesign,
    pop: &StudyPopulation,
    features: &[FeatureSpec],
    opts: &BalanceOptions,
) -> Result<BalanceTable> {
    use rayon::prelude::*;
    if opts.draws == 0 {
        return Err(invalid("draws must be positive"));
    }
    let mut plan = design.plan.clone();
    plan.sort_by_key(|p| p.type_id);
    let type_ids: Vec<u8> = plan.iter().map(|p| p.type_id).collect();
    let sides: Vec<(Vec<usize>, Vec<usize>)> = if features.is_empty() {
        Vec::new()
    } else {
        type_ids
            .iter()
            .map(|&t| split_by_contrast(design, t))
            .collect::<Result<_>>()?
    };
    let values: Vec<Vec<f64>> = features
        .iter()
        .map(|f| interaction_feature(pop, f))
        .collect::<Result<_>>()?;

    let members = pop.group_members();
    let levels: Vec<Option<[f64; GROUP_COUNT]>> = features
        .iter()
        .map(|f| match &f.covariate {
            None => Some([1.0; GROUP_COUNT]),
            Some(c) => group_levels(pop, pop.covariate_index(c).ok()?, &members),
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..features.len())
        .flat_map(|f| (0..type_ids.len()).map(move |t| (f, t)))
        .collect();
    let flat: Vec<BalanceCell> = jobs
        .par_iter()
        .map(|&(f, t)| -> Result<BalanceCell> {
            let name = features[f].name();
            let (plus_idx, minus_idx) = &sides[t];
            let plus: Vec<f64> = plus_idx.iter().map(|&i| values[f][i]).collect();
            let minus: Vec<f64> = minus_idx.iter().map(|&i| values[f][i]).collect();
            let seed = cell_seed(opts.seed, &name, type_ids[t]);
            let p_value = permutation_balance_pvalue(&plus, &minus, opts.draws, seed)
                .map_err(|e| Error::Validation(format!("feature {name}, type {}: {e}", type_ids[t])))?;
            let aliased = features[f].aliased_with_levels(&plan[t], levels[f].as_ref());
            Ok(BalanceCell {
                feature: name,
                type_id: type_ids[t],
                p_value,
                mean_plus: mean(&plus),
                mean_minus: mean(&minus),
                std_diff: std_diff(&plus, &minus),
                aliased,
                seed,
            })
        })
        .collect::<Result<_>>()?;

    let nt = type_ids.len();
    let mut cells: Vec<Vec<BalanceCell>> = Vec::with_capacity(features.len());
    let mut it = flat.into_iter();
    for _ in 0..features.len() {
        cells.push(it.by_ref().take(nt).collect());
    }
    let combined = cells
        .iter()
        .map(|row| truncated_product(&row.iter().map(|c| c.p_value).collect::<Vec<_>>(), opts.tau))
        .collect::<Result<Vec<_>>>()?;
    let (ok, aliased): (Vec<&BalanceCell>, Vec<&BalanceCell>) = cells.iter().flatten().partition(|c| !c.aliased);
    Ok(BalanceTable {
        type_ids,
        features: features.iter().map(FeatureSpec::name).collect(),
        summary_balanceable: Summary::of(&ok.iter().map(|c| c.p_value).collect::<Vec<_>>()),
        summary_aliased: Summary::of(&aliased.iter().map(|c| c.p_value).collect::<Vec<_>>()),
        cells,
        combined,
        draws: opts.draws,
        tau: opts.tau,
    })
}

/// The covariate's value in each group if it is constant within every
/// nonempty group.
fn group_levels(pop: &StudyPopulation, col: usize, members: &[Vec<usize>; GROUP_COUNT]) -> Option<[f64; GROUP_COUNT]> {
    let mut out = [0.0; GROUP_COUNT];
    for (g, m) in members.iter().enumerate() {
        let first = pop.records()[*m.first()?].x[col];
        if m.iter().any(|&i| pop.records()[i].x[col] != first) {
            return None;
        }
        out[g] = first;
    }
    Some(out)
}

impl BalanceTable {
    /// Feature × type grid of p-values plus the combined column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["feature".to_string()];
        header.extend(self.type_ids.iter().map(|t| format!("type_{t}")));
        header.push("combined".into());
        w.write_record(&header)?;
        for (row, comb) in self.cells.iter().zip(&self.combined) {
            let mut rec = vec![row.first().map(|c| c.feature.clone()).unwrap_or_default()];
            rec.extend(row.iter().map(|c| format!("{:.4}", c.p_value)));
            rec.push(format!("{comb:.4}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tidy per-member feature values for plotting outside this tool.
pub fn write_distributions_csv<W: Write>(
    design: &BlockDesign,
    pop: &StudyPopulation,
    features: &[FeatureSpec],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["feature", "type_id", "role_group", "sign", "individual_id", "value"])?;
    for f in features {
        let values = interaction_feature(pop, f)?;
        let name = f.name();
        for b in &design.blocks {
            for m in &b.members {
                w.write_record([
                    name.clone(),
                    b.type_id.to_string(),
                    m.role.group.label().to_string(),
                    m.role.sign.to_string(),
                    pop.records()[m.individual].id.clone(),
                    values[m.individual].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_feature_language() {
        let f = FeatureSpec::parse("age*LE*TIME").unwrap();
        assert_eq!(f.covariate.as_deref(), Some("age"));
        assert_eq!(f.factors, vec![Factor::Le, Factor::Time]);
        assert_eq!(f.name(), "age*LE*TIME");
        assert_eq!(FeatureSpec::parse("LE").unwrap().covariate, None);
        assert!(FeatureSpec::parse("age*female").is_err());
        assert!(FeatureSpec::parse("age**LE").is_err());
        assert_eq!(FeatureSpec::parse_list("age, age*LE,").unwrap().len(), 2);
        assert!(FeatureSpec::parse("age*LE*LE").unwrap().factor_positions().is_empty());
    }

    #[test]
    fn aliasing_of_features() {
        let plan = crate::assemble::default_plan();
        let types = |f: &str| -> Vec<u8> {
            let spec = FeatureSpec::parse(f).unwrap();
            plan.iter().filter(|p| spec.aliased_in(p)).map(|p| p.type_id).collect()
        };
        assert_eq!(types("age*LE*TIME"), [1, 3, 4, 6]);
        assert_eq!(types("age*IU*TIME"), [2, 3, 4, 5]);
        assert!(types("age*LE*IU").is_empty());
        assert!(types("prior_wage").is_empty());
        assert_eq!(types("prior_wage*TIME"), [1, 3, 4, 6]);
        assert_eq!(types("iu*LE*TIME"), [1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn exact_enumeration_small_case() {
        let p = permutation_balance_pvalue(&[0.0; 4], &[1.0; 4], 10_000, 1).unwrap();
        assert!((p - 2.0 / 70.0).abs() < 1e-15);
        assert_eq!(permutation_balance_pvalue(&[3.0; 4], &[3.0; 5], 10_000, 1).unwrap(), 1.0);
        assert_eq!(permutation_balance_pvalue(&[1.0, -1.0], &[-1.0, 1.0], 1000, 1).unwrap(), 1.0);
    }

    #[test]
    fn monte_carlo_counts_observed() {
        let plus: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let minus: Vec<f64> = (0..40).map(|i| i as f64 + 100.0).collect();
        let p = permutation_balance_pvalue(&plus, &minus, 1000, 3).unwrap();
        assert_eq!(p, 1.0 / 1001.0);
        let q = permutation_balance_pvalue(&minus, &plus, 1000, 3).unwrap();
        assert_eq!(p, q);
        assert!(permutation_balance_pvalue(&[], &[1.0], 1000, 3).is_err());
    }

    #[test]
    fn truncated_product_fisher_case() {
        let p = truncated_product(&[0.5, 0.5], 1.0).unwrap();
        let w: f64 = 0.25;
        assert!((p - w * (1.0 - w.ln())).abs() < 1e-12);
        assert_eq!(truncated_product(&[0.3, 0.5, 0.9, 0.25, 0.21, 0.99], 0.2).unwrap(), 1.0);
        assert!(truncated_product(&[0.5], 0.0).is_err());
        assert!(truncated_product(&[1.5], 0.2).is_err());
        assert_eq!(truncated_product(&[0.0, 0.5], 0.2).unwrap(), 0.0);
    }

    #[test]
    fn truncated_product_single_value() {
        // L = 1: P(W ≤ w) = w for w ≤ τ.
        let p = truncated_product(&[0.05], 0.2).unwrap();
        assert!((p - 0.05).abs() < 1e-15);
    }
}

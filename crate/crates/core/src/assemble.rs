//! Step 3: blocks of four from the matched samples.
//!
//! Within a block type, each after-period sample is paired with the
//! before-period sample of the same eligibility cell, then the two sets of
//! pairs are paired with each other using cross-pair distances.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::assign::optimal_assignment;
use crate::data::{eligibility_link, Group, StudyPopulation, GROUP_COUNT};
use crate::design::{contrast_orthogonality, Contrast};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub group: Group,
    pub sign: i8,
}

/// One block type: two after-period treatments and their before-period
/// counterparts, listed as (after +1, after −1, before −1, before +1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTypePlan {
    pub type_id: u8,
    pub roles: [Role; 4],
}

impl BlockTypePlan {
    pub fn new(type_id: u8, treated: Group, control: Group) -> Result<Self> {
        let plan = BlockTypePlan {
            type_id,
            roles: [
                Role { group: treated, sign: 1 },
                Role { group: control, sign: -1 },
                Role { group: treated.counterpart(), sign: -1 },
                Role { group: control.counterpart(), sign: 1 },
            ],
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let after = self.roles.iter().filter(|r| r.group.is_after()).count();
        if after != 2 {
            return Err(invalid(format!(
                "block type {} needs two after-period groups, has {after}",
                self.type_id
            )));
        }
        if self.roles.iter().map(|r| r.sign as i32).sum::<i32>() != 0 {
            return Err(invalid(format!("block type {} signs do not sum to zero", self.type_id)));
        }
        if self.roles.iter().any(|r| r.sign != 1 && r.sign != -1) {
            return Err(invalid(format!("block type {} signs must be ±1", self.type_id)));
        }
        for (a, ra) in self.roles.iter().enumerate() {
            if self.roles[a + 1..].iter().any(|rb| rb.group == ra.group) {
                return Err(invalid(format!("block type {} repeats group {}", self.type_id, ra.group)));
            }
        }
        for r in &self.roles[..2] {
            if !self.roles[2..].iter().any(|b| b.group == r.group.counterpart() && b.sign == -r.sign) {
                return Err(invalid(format!(
                    "block type {}: {} lacks its before-period counterpart with opposite sign",
                    self.type_id, r.group
                )));
            }
        }
        Ok(())
    }

    pub fn sign_of(&self, g: Group) -> Option<i8> {
        self.roles.iter().find(|r| r.group == g).map(|r| r.sign)
    }

    /// Contrast over the eight groups, zero outside the block type.
    pub fn contrast(&self) -> Contrast {
        let mut w = vec![0.0; GROUP_COUNT];
        for r in &self.roles {
            w[r.group.index()] = r.sign as f64;
        }
        Contrast::new(w).expect("signs sum to zero")
    }

    /// Whether a feature equal to the product of the given eligibility
    /// factors (0 = w′, 1 = w″, 2 = w‴) is aliased with this block's contrast.
    pub fn aliases(&self, factors: &[usize]) -> bool {
        let zeta: Vec<f64> = Group::all()
            .map(|g| {
                let e = g.eligibility();
                factors.iter().map(|&f| e[f] as f64).product()
            })
            .collect();
        contrast_orthogonality(&self.contrast(), &zeta)
            .map(|o| o.aliased)
            .unwrap_or(true)
    }
}

/// The six block types: every pair of the four after-period treatments.
pub fn default_plan() -> Vec<BlockTypePlan> {
    let g = |n: u8| Group::new(n).expect("static group");
    let (br_up, br, b_r, b_r_low) = (g(5), g(6), g(7), g(8));
    let pairs = [
        (br_up, br),
        (br_up, b_r),
        (br_up, b_r_low),
        (br, b_r),
        (br, b_r_low),
        (b_r, b_r_low),
    ];
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| BlockTypePlan::new(i as u8 + 1, a, b).expect("static plan"))
        .collect()
}

/// For each group, the block types it serves in, ascending; sample p of the
/// group goes to the p-th of these.
pub fn sample_slots(plan: &[BlockTypePlan]) -> [Vec<u8>; GROUP_COUNT] {
    let mut out: [Vec<u8>; GROUP_COUNT] = Default::default();
    let mut ordered: Vec<&BlockTypePlan> = plan.iter().collect();
    ordered.sort_by_key(|p| p.type_id);
    for p in ordered {
        for r in &p.roles {
            out[r.group.index()].push(p.type_id);
        }
    }
    out
}

pub fn validate_plan(plan: &[BlockTypePlan], samples_per_group: usize) -> Result<()> {
    let mut ids: Vec<u8> = plan.iter().map(|p| p.type_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != plan.len() {
        return Err(invalid("block type ids must be unique"));
    }
    for p in plan {
        p.validate()?;
    }
    for (g, slots) in sample_slots(plan).iter().enumerate() {
        if slots.len() != samples_per_group {
            return Err(invalid(format!(
                "group {} appears in {} block types but has {samples_per_group} samples",
                Group::from_index(g)?,
                slots.len()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Distances

#[derive(Debug, Clone, PartialEq)]
pub struct RankDistance {
    /// Rows index sample A, columns sample B.
    pub matrix: DMatrix<f64>,
    /// Set when the rank covariance had to be pseudo-inverted.
    pub pseudo_inverse: bool,
}

/// Mid-ranks of `values`, 1-based.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-based Mahalanobis distances between the rows of `a` and `b`, each
/// row holding the same covariates.
pub fn rank_mahalanobis(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<RankDistance> {
    let n = a.len() + b.len();
    if n < 2 {
        return Err(invalid("rank distances need at least two units"));
    }
    let k = a.first().or(b.first()).map_or(0, |r| r.len());
    if let Some(bad) = a.iter().chain(b).find(|r| r.len() != k) {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: bad.len(),
        });
    }
    let mut ranks: Vec<Vec<f64>> = Vec::with_capacity(k);
    for kk in 0..k {
        let col: Vec<f64> = a.iter().chain(b).map(|r| r[kk]).collect();
        let r = mid_ranks(&col);
        // A constant column carries no information.
        if r.iter().any(|&v| v != r[0]) {
            ranks.push(r);
        }
    }
    let kk = ranks.len();
    let mean = (n as f64 + 1.0) / 2.0;
    let mut cov = DMatrix::zeros(kk, kk);
    for p in 0..kk {
        for q in p..kk {
            let c: f64 = (0..n).map(|i| (ranks[p][i] - mean) * (ranks[q][i] - mean)).sum::<f64>() / n as f64;
            cov[(p, q)] = c;
            cov[(q, p)] = c;
        }
    }
    // Rescale so every diagonal entry is the variance of untied ranks.
    let untied = (n as f64 * n as f64 - 1.0) / 12.0;
    let sd: Vec<f64> = (0..kk).map(|p| cov[(p, p)].sqrt()).collect();
    let scaled = DMatrix::from_fn(kk, kk, |p, q| cov[(p, q)] * untied / (sd[p] * sd[q]));
    let (inv, pseudo) = match scaled.clone().cholesky() {
        Some(ch) => (ch.inverse(), false),
        None => (
            scaled
                .pseudo_inverse(1e-10)
                .map_err(|e| invalid(format!("rank covariance: {e}")))?,
            true,
        ),
    };
    let na = a.len();
    let nb = b.len();
    let ra: Vec<Vec<f64>> = (0..na).map(|i| ranks.iter().map(|c| c[i]).collect()).collect();
    let rb: Vec<Vec<f64>> = (0..nb).map(|j| ranks.iter().map(|c| c[na + j]).collect()).collect();
    let mut matrix = DMatrix::zeros(na, nb);
    let mut diff = vec![0.0; kk];
    for i in 0..na {
        for j in 0..nb {
            for p in 0..kk {
                diff[p] = ra[i][p] - rb[j][p];
            }
            let mut d = 0.0;
            for p in 0..kk {
                if diff[p] == 0.0 {
                    continue;
                }
                let mut row = 0.0;
                for q in 0..kk {
                    row += inv[(p, q)] * diff[q];
                }
                d += diff[p] * row;
            }
            matrix[(i, j)] = d.max(0.0);
        }
    }
    Ok(RankDistance {
        matrix,
        pseudo_inverse: pseudo,
    })
}

/// Optimal pairing of the rows of `a` with the rows of `b`, as (a, b) index
/// pairs in the order of `a`.
pub fn pair_within_type(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(Vec<(usize, usize)>, bool)> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() == 1 {
        return Ok((vec![(0, 0)], false));
    }
    let d = rank_mahalanobis(a, b)?;
    let sol = optimal_assignment(&d.matrix)?;
    Ok((sol.columns.iter().copied().enumerate().collect(), d.pseudo_inverse))
}

/// Sum of the four distances crossing pair `pa` (rows) and pair `pb` (columns).
pub fn cross_pair_distance(dist: &DMatrix<f64>, pa: (usize, usize), pb: (usize, usize)) -> f64 {
    dist[(pa.0, pb.0)] + dist[(pa.0, pb.1)] + dist[(pa.1, pb.0)] + dist[(pa.1, pb.1)]
}

/// Optimal pairing of pairs; `dist` runs from units of `pairs_a` to units of
/// `pairs_b`. Returns (index into pairs_a, index into pairs_b).
pub fn pair_of_pairs(
    dist: &DMatrix<f64>,
    pairs_a: &[(usize, usize)],
    pairs_b: &[(usize, usize)],
) -> Result<Vec<(usize, usize)>> {
    if pairs_a.len() != pairs_b.len() {
        return Err(Error::DimensionMismatch {
            expected: pairs_a.len(),
            found: pairs_b.len(),
        });
    }
    let n = pairs_a.len();
    let cost = DMatrix::from_fn(n, n, |i, j| cross_pair_distance(dist, pairs_a[i], pairs_b[j]));
    let sol = optimal_assignment(&cost)?;
    Ok(sol.columns.iter().copied().enumerate().collect())
}

// ---------------------------------------------------------------------------
// Design

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub role: Role,
    /// Index into the study population.
    pub individual: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub block_id: usize,
    pub type_id: u8,
    pub members: [Member; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDesign {
    pub plan: Vec<BlockTypePlan>,
    pub blocks: Vec<Block>,
}

/// Covariates linked to an eligibility factor (0 = w′, 1 = w″) cannot enter
/// the pair-of-pairs distance where that factor interacted with w‴ is aliased.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariatePolicy {
    /// Covariates for the before-after pairing.
    pub within: Vec<String>,
    /// Candidates for the pair-of-pairs distance.
    pub across: Vec<String>,
    pub links: Vec<(String, usize)>,
}

impl CovariatePolicy {
    pub fn for_population(pop: &StudyPopulation) -> Self {
        let names = pop.covariate_names().to_vec();
        let links = names
            .iter()
            .filter_map(|n| eligibility_link(n).map(|f| (n.clone(), f)))
            .collect();
        CovariatePolicy {
            within: names.clone(),
            across: names,
            links,
        }
    }

    /// Covariates usable across pairs in a block type.
    pub fn across_for(&self, plan: &BlockTypePlan) -> Vec<String> {
        self.across
            .iter()
            .filter(|name| {
                !self
                    .links
                    .iter()
                    .any(|(n, f)| n == *name && plan.aliases(&[*f, 2]))
            })
            .cloned()
            .collect()
    }
}

impl BlockDesign {
    pub fn plan_for(&self, type_id: u8) -> Result<&BlockTypePlan> {
        self.plan
            .iter()
            .find(|p| p.type_id == type_id)
            .ok_or_else(|| invalid(format!("unknown block type {type_id}")))
    }

    pub fn blocks_of(&self, type_id: u8) -> impl Iterator<Item = &Block> {
        self.blocks.iter().filter(move |b| b.type_id == type_id)
    }

    pub fn type_counts(&self) -> Vec<(u8, usize)> {
        self.plan
            .iter()
            .map(|p| (p.type_id, self.blocks_of(p.type_id).count()))
            .collect()
    }

    /// Checks the block structure against the plan and the population.
    pub fn validate(&self, pop: &StudyPopulation) -> Result<()> {
        let mut used = vec![false; pop.len()];
        let mut ids = std::collections::HashSet::new();
        for b in &self.blocks {
            if !ids.insert(b.block_id) {
                return Err(Error::Validation(format!("block id {} repeated", b.block_id)));
            }
            let plan = self
                .plan_for(b.type_id)
                .map_err(|e| Error::Validation(e.to_string()))?;
            let mut roles: Vec<Role> = b.members.iter().map(|m| m.role).collect();
            let mut want = plan.roles.to_vec();
            roles.sort_by_key(|r| r.group);
            want.sort_by_key(|r| r.group);
            if roles != want {
                return Err(Error::Validation(format!(
                    "block {} does not match the roles of type {}",
                    b.block_id, b.type_id
                )));
            }
            for m in &b.members {
                let rec = pop.records().get(m.individual).ok_or_else(|| {
                    Error::Validation(format!("block {}: individual out of range", b.block_id))
                })?;
                if rec.group() != m.role.group {
                    return Err(Error::Validation(format!(
                        "block {}: {} belongs to {}, not {}",
                        b.block_id,
                        rec.id,
                        rec.group(),
                        m.role.group
                    )));
                }
                if std::mem::replace(&mut used[m.individual], true) {
                    return Err(Error::Validation(format!(
                        "individual {} used in more than one block",
                        rec.id
                    )));
                }
            }
        }
        let counts = self.type_counts();
        if let Some(&(_, first)) = counts.first() {
            if let Some(&(t, c)) = counts.iter().find(|(_, c)| *c != first) {
                return Err(Error::Validation(format!(
                    "block type {t} has {c} blocks, expected {first}"
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, pop: &StudyPopulation, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["block_id", "type_id", "role_group", "sign", "individual_id"])?;
        for b in &self.blocks {
            for m in &b.members {
                let id = &pop
                    .records()
                    .get(m.individual)
                    .ok_or_else(|| invalid("design refers to a missing individual"))?
                    .id;
                w.write_record([
                    b.block_id.to_string(),
                    b.type_id.to_string(),
                    m.role.group.label().to_string(),
                    m.role.sign.to_string(),
                    id.clone(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a design written by [`BlockDesign::write_csv`]; members are
    /// resolved against `pop` by id.
    pub fn read_csv<R: Read>(reader: R, pop: &StudyPopulation, plan: Vec<BlockTypePlan>) -> Result<Self> {
        let index: HashMap<&str, usize> = pop
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let expected = ["block_id", "type_id", "role_group", "sign", "individual_id"];
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(invalid(format!("design header must be {}", expected.join(","))));
        }
        let mut blocks: Vec<Block> = Vec::new();
        let mut pending: Vec<Member> = Vec::new();
        let mut current: Option<(usize, u8)> = None;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            let field = |c: usize| rec.get(c).unwrap_or("");
            let parse_err = |c: usize, m: String| Error::Parse {
                row: line,
                column: expected[c].to_string(),
                message: m,
            };
            let block_id: usize = field(0).parse().map_err(|e| parse_err(0, format!("{e}")))?;
            let type_id: u8 = field(1).parse().map_err(|e| parse_err(1, format!("{e}")))?;
            let group = Group::parse(field(2)).map_err(|e| parse_err(2, e.to_string()))?;
            let sign: i8 = field(3).parse().map_err(|e| parse_err(3, format!("{e}")))?;
            let individual = *index
                .get(field(4))
                .ok_or_else(|| parse_err(4, format!("unknown individual `{}`", field(4))))?;
            if current != Some((block_id, type_id)) {
                if let Some((bid, tid)) = current.take() {
                    blocks.push(finish_block(bid, tid, std::mem::take(&mut pending))?);
                }
                current = Some((block_id, type_id));
            }
            pending.push(Member {
                role: Role { group, sign },
                individual,
            });
        }
        if let Some((bid, tid)) = current {
            blocks.push(finish_block(bid, tid, pending)?);
        }
        Ok(BlockDesign { plan, blocks })
    }
}

fn finish_block(block_id: usize, type_id: u8, members: Vec<Member>) -> Result<Block> {
    let n = members.len();
    let members: [Member; 4] = members
        .try_into()
        .map_err(|_| Error::Validation(format!("block {block_id} has {n} members, expected 4")))?;
    Ok(Block {
        block_id,
        type_id,
        members,
    })
}

fn covariate_rows(pop: &StudyPopulation, units: &[usize], names: &[String]) -> Result<Vec<Vec<f64>>> {
    let cols: Vec<usize> = names
        .iter()
        .map(|n| pop.covariate_index(n))
        .collect::<Result<_>>()?;
    Ok(units
        .iter()
        .map(|&i| cols.iter().map(|&c| pop.records()[i].x[c]).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyNotes {
    pub type_id: u8,
    pub across_covariates: Vec<String>,
    pub pseudo_inverse: bool,
}

/// Builds every block type from `samples[group][slot]` (population indices).
pub fn assemble_design(
    pop: &StudyPopulation,
    samples: &[Vec<Vec<usize>>],
    plan: &[BlockTypePlan],
    policy: &CovariatePolicy,
) -> Result<(BlockDesign, Vec<AssemblyNotes>)> {
    use rayon::prelude::*;
    if samples.len() != GROUP_COUNT {
        return Err(Error::DimensionMismatch {
            expected: GROUP_COUNT,
            found: samples.len(),
        });
    }
    let per_group = samples[0].len();
    validate_plan(plan, per_group)?;
    let s_bar = samples[0].first().map_or(0, |s| s.len());
    for (g, group) in samples.iter().enumerate() {
        if group.len() != per_group || group.iter().any(|s| s.len() != s_bar) {
            return Err(invalid(format!(
                "group {} samples do not all have size {s_bar}",
                Group::from_index(g)?
            )));
        }
    }
    let slots = sample_slots(plan);
    let sample_for = |g: Group, type_id: u8| -> &Vec<usize> {
        let p = slots[g.index()].iter().position(|&t| t == type_id).expect("validated plan");
        &samples[g.index()][p]
    };

    let mut ordered: Vec<&BlockTypePlan> = plan.iter().collect();
    ordered.sort_by_key(|p| p.type_id);
    let built: Vec<(Vec<[Member; 4]>, AssemblyNotes)> = ordered
        .par_iter()
        .map(|tp| -> Result<_> {
            let [t, c, tb, cb] = tp.roles;
            let (ta, tbefore) = (sample_for(t.group, tp.type_id), sample_for(tb.group, tp.type_id));
            let (ca, cbefore) = (sample_for(c.group, tp.type_id), sample_for(cb.group, tp.type_id));
            let mut pseudo = false;
            let mut pairs_of = |after: &[usize], before: &[usize]| -> Result<Vec<(usize, usize)>> {
                if after.is_empty() {
                    return Ok(Vec::new());
                }
                let (pairs, p) = pair_within_type(
                    &covariate_rows(pop, after, &policy.within)?,
                    &covariate_rows(pop, before, &policy.within)?,
                )?;
                pseudo |= p;
                Ok(pairs.into_iter().map(|(i, j)| (after[i], before[j])).collect())
            };
            let treated_pairs = pairs_of(ta, tbefore)?;
            let control_pairs = pairs_of(ca, cbefore)?;

            let across = policy.across_for(tp);
            let matched = if treated_pairs.len() <= 1 {
                (0..treated_pairs.len()).map(|i| (i, i)).collect()
            } else {
                let units_a: Vec<usize> = treated_pairs.iter().flat_map(|&(x, y)| [x, y]).collect();
                let units_b: Vec<usize> = control_pairs.iter().flat_map(|&(x, y)| [x, y]).collect();
                let d = rank_mahalanobis(
                    &covariate_rows(pop, &units_a, &across)?,
                    &covariate_rows(pop, &units_b, &across)?,
                )?;
                pseudo |= d.pseudo_inverse;
                let local_a: Vec<(usize, usize)> = (0..treated_pairs.len()).map(|i| (2 * i, 2 * i + 1)).collect();
                let local_b: Vec<(usize, usize)> = (0..control_pairs.len()).map(|i| (2 * i, 2 * i + 1)).collect();
                pair_of_pairs(&d.matrix, &local_a, &local_b)?
            };
            let blocks = matched
                .into_iter()
                .map(|(i, j)| {
                    let (a_after, a_before) = treated_pairs[i];
                    let (c_after, c_before) = control_pairs[j];
                    [
                        Member { role: t, individual: a_after },
                        Member { role: c, individual: c_after },
                        Member { role: tb, individual: a_before },
                        Member { role: cb, individual: c_before },
                    ]
                })
                .collect();
            Ok((
                blocks,
                AssemblyNotes {
                    type_id: tp.type_id,
                    across_covariates: across,
                    pseudo_inverse: pseudo,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let mut blocks = Vec::new();
    let mut notes = Vec::new();
    for (tp, (members, note)) in ordered.iter().zip(built) {
        for m in members {
            blocks.push(Block {
                block_id: blocks.len() + 1,
                type_id: tp.type_id,
                members: m,
            });
        }
        notes.push(note);
    }
    let design = BlockDesign {
        plan: ordered.into_iter().cloned().collect(),
        blocks,
    };
    design.validate(pop)?;
    Ok((design, notes))
}

//! Balanced partition integer programs.
//!
//! A group of I individuals with standardized covariates x_ik is split into P
//! disjoint samples of common size s, each sample's covariate totals within
//! ε_k·s of s·B_k. Step 1 maximizes s; Step 2 fixes s and either looks for any
//! feasible assignment or minimizes Σ ε_k.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lp::{LinearProgram, LpOutcome, Relation};

/// Slack allowed when re-checking balance constraints on an integral point.
pub const BALANCE_TOL: f64 = 1e-9;
const INT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionProblem {
    /// I rows of K standardized covariates.
    pub covariates: Vec<Vec<f64>>,
    pub template_means: Vec<f64>,
    pub epsilons: Vec<f64>,
    /// Number of samples P.
    pub samples: usize,
}

impl PartitionProblem {
    pub fn new(
        covariates: Vec<Vec<f64>>,
        template_means: Vec<f64>,
        epsilons: Vec<f64>,
        samples: usize,
    ) -> Result<Self> {
        let p = PartitionProblem {
            covariates,
            template_means,
            epsilons,
            samples,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.template_means.len();
        if self.epsilons.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: self.epsilons.len(),
            });
        }
        if self.samples == 0 {
            return Err(invalid("number of samples must be at least 1"));
        }
        if self.covariates.len() < self.samples {
            return Err(invalid(format!(
                "{} individuals cannot fill {} samples",
                self.covariates.len(),
                self.samples
            )));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return Err(invalid(format!("tolerance {e} must be positive and finite")));
        }
        if self.template_means.iter().any(|b| !b.is_finite()) {
            return Err(invalid("template means must be finite"));
        }
        for (i, row) in self.covariates.iter().enumerate() {
            if row.len() != k {
                return Err(invalid(format!(
                    "individual {i} has {} covariates, expected {k}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("individual {i} has a non-finite covariate")));
            }
        }
        Ok(())
    }

    pub fn n_units(&self) -> usize {
        self.covariates.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.template_means.len()
    }

    /// Deviations s·B_k − Σ_{i∈p} x_ik laid out as [p][k].
    fn deviations(&self, s: usize, assignment: &[(usize, usize)]) -> Vec<Vec<f64>> {
        let k = self.n_covariates();
        let mut dev: Vec<Vec<f64>> = (0..self.samples)
            .map(|_| self.template_means.iter().map(|b| -(s as f64) * b).collect())
            .collect();
        for &(i, p) in assignment {
            for (d, x) in dev[p].iter_mut().zip(&self.covariates[i]).take(k) {
                *d += x;
            }
        }
        dev
    }

    /// Per-covariate max over samples of |s·B_k − Σ x_ik| / s; zero when s = 0.
    pub fn achieved_epsilons(&self, s: usize, assignment: &[(usize, usize)]) -> Vec<f64> {
        let k = self.n_covariates();
        if s == 0 {
            return vec![0.0; k];
        }
        let dev = self.deviations(s, assignment);
        (0..k)
            .map(|kk| dev.iter().map(|d| d[kk].abs()).fold(0.0, f64::max) / s as f64)
            .collect()
    }

    /// Checks disjointness and common size, plus the balance constraints
    /// when `check_balance` is set.
    pub fn check(&self, s: usize, assignment: &[(usize, usize)], check_balance: bool) -> Result<()> {
        let mut seen = vec![false; self.n_units()];
        let mut counts = vec![0usize; self.samples];
        for &(i, p) in assignment {
            if i >= self.n_units() || p >= self.samples {
                return Err(Error::Validation(format!("assignment ({i}, {p}) out of range")));
            }
            if seen[i] {
                return Err(Error::Validation(format!("individual {i} assigned twice")));
            }
            seen[i] = true;
            counts[p] += 1;
        }
        if let Some(p) = counts.iter().position(|&c| c != s) {
            return Err(Error::Validation(format!(
                "sample {p} has {} members, expected {s}",
                counts[p]
            )));
        }
        if check_balance {
            let dev = self.deviations(s, assignment);
            for (p, row) in dev.iter().enumerate() {
                for (k, d) in row.iter().enumerate() {
                    if !within(*d, self.epsilons[k], s) {
                        return Err(Error::Validation(format!(
                            "sample {p}, covariate {k}: imbalance {:.3e} exceeds {:.3e}",
                            d.abs(),
                            self.epsilons[k] * s as f64
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn within(dev: f64, eps: f64, s: usize) -> bool {
    dev.abs() <= eps * s as f64 + BALANCE_TOL * (1.0 + s as f64)
}

/// Covariates taking at most two values, as (low, high, n_low, n_high, k).
struct TwoLevel(Vec<(f64, f64, usize, usize, usize)>);

impl TwoLevel {
    fn of(problem: &PartitionProblem) -> Self {
        let mut out = Vec::new();
        for k in 0..problem.n_covariates() {
            let mut levels: Vec<(f64, usize)> = Vec::new();
            for row in &problem.covariates {
                match levels.iter().position(|(v, _)| *v == row[k]) {
                    Some(i) => levels[i].1 += 1,
                    None => {
                        levels.push((row[k], 1));
                        if levels.len() > 2 {
                            break;
                        }
                    }
                }
            }
            if levels.len() > 2 {
                continue;
            }
            levels.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (lo, hi) = (levels[0], *levels.last().expect("nonempty"));
            if levels.len() == 1 {
                out.push((lo.0, lo.0, lo.1, 0, k));
            } else {
                out.push((lo.0, hi.0, lo.1, hi.1, k));
            }
        }
        TwoLevel(out)
    }

    /// Necessary condition for P disjoint balanced samples of size s: each
    /// sample needs a count of high values that keeps the covariate within
    /// tolerance, and the counts must fit the available units.
    fn admits(&self, problem: &PartitionProblem, s: usize) -> bool {
        let p = problem.samples;
        self.0.iter().all(|&(a, b, n_a, n_b, k)| {
            let base = s as f64 * (a - problem.template_means[k]);
            let ok = |c: usize| within(base + c as f64 * (b - a), problem.epsilons[k], s);
            let top = if n_b == 0 { 0 } else { s };
            let Some(c_min) = (0..=top).find(|&c| ok(c)) else {
                return false;
            };
            let c_max = (c_min..=top).rev().find(|&c| ok(c)).expect("c_min qualifies");
            (p * c_min).max((p * s).saturating_sub(n_a)) <= (p * c_max).min(n_b)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Feasibility,
    MinTotalEpsilon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BranchAndBound,
    LocalSearch,
    Enumeration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub proved_optimal: bool,
    /// Distance to the best known bound, in units of the objective; absent
    /// when no bound is known.
    pub gap: Option<f64>,
    pub upper_bound: Option<f64>,
    pub nodes: usize,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSolution {
    pub s: usize,
    /// Sparse (individual, sample) pairs, sorted by individual.
    pub assignment: Vec<(usize, usize)>,
    pub achieved_epsilons: Vec<f64>,
    pub certificate: Certificate,
}

impl PartitionSolution {
    fn build(problem: &PartitionProblem, s: usize, mut assignment: Vec<(usize, usize)>, certificate: Certificate) -> Self {
        assignment.sort_unstable();
        let achieved_epsilons = problem.achieved_epsilons(s, &assignment);
        PartitionSolution {
            s,
            assignment,
            achieved_epsilons,
            certificate,
        }
    }

    pub fn total_epsilon(&self) -> f64 {
        self.achieved_epsilons.iter().sum()
    }

    /// Member indices of each sample, ascending.
    pub fn samples(&self, n_samples: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_samples];
        for &(i, p) in &self.assignment {
            if p < n_samples {
                out[p].push(i);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FixedOutcome {
    Solved(PartitionSolution),
    Infeasible,
    /// The search budget ran out before either outcome was established.
    Undetermined { nodes: usize },
}

impl FixedOutcome {
    pub fn solution(&self) -> Option<&PartitionSolution> {
        match self {
            FixedOutcome::Solved(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Branch-and-bound node budget per fixed-size solve.
    pub node_limit: usize,
    /// Instances with I·P above this use LP-seeded local search.
    pub exact_limit: usize,
    /// Perturbation rounds of the local search before giving up on a size.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            node_limit: 100_000,
            exact_limit: 64,
            restarts: 10,
            seed: 0,
        }
    }
}

impl SolverOptions {
    fn exact(&self, problem: &PartitionProblem) -> bool {
        problem.n_units() * problem.samples <= self.exact_limit
    }
}

/// Largest s at which the LP relaxation is feasible. Feasibility of the
/// relaxation is monotone in s (scale a feasible point down), so this is a
/// valid bound for every size.
pub fn lp_upper_bound(problem: &PartitionProblem) -> Result<usize> {
    problem.validate()?;
    let n = problem.n_units();
    let p = problem.samples;
    let k = problem.n_covariates();
    let mut lp = LinearProgram::new(n + 1);
    for j in 0..n {
        lp.upper[j] = 1.0;
    }
    lp.upper[n] = n as f64;
    lp.objective[n] = -1.0;
    let mut sum: Vec<(usize, f64)> = (0..n).map(|j| (j, 1.0)).collect();
    sum.push((n, -1.0));
    lp.add(sum, Relation::Eq, 0.0);
    for kk in 0..k {
        let b = problem.template_means[kk];
        let e = problem.epsilons[kk];
        let row: Vec<(usize, f64)> = (0..n).map(|j| (j, problem.covariates[j][kk])).collect();
        let mut hi = row.clone();
        hi.push((n, -(b + e)));
        lp.add(hi, Relation::Le, 0.0);
        let mut lo = row;
        lo.push((n, -(b - e)));
        lp.add(lo, Relation::Ge, 0.0);
    }
    match lp.solve() {
        LpOutcome::Optimal { x, .. } => {
            let t = x[n];
            Ok(((t / p as f64) + INT_TOL).floor().min((n / p) as f64) as usize)
        }
        LpOutcome::Infeasible => Ok(0),
        other => Err(Error::Infeasible(format!("bounding LP failed: {other:?}"))),
    }
}

/// Step 1: the largest common sample size.
pub fn max_size_partition(problem: &PartitionProblem, opts: &SolverOptions) -> Result<PartitionSolution> {
    problem.validate()?;
    let ub = lp_upper_bound(problem)?;
    if opts.exact(problem) {
        max_size_exact(problem, ub, opts)
    } else {
        max_size_search(problem, ub, opts)
    }
}

fn trivial(problem: &PartitionProblem, ub: usize, nodes: usize, method: Method) -> PartitionSolution {
    PartitionSolution::build(
        problem,
        0,
        Vec::new(),
        Certificate {
            proved_optimal: ub == 0,
            gap: Some(ub as f64),
            upper_bound: Some(ub as f64),
            nodes,
            method,
        },
    )
}

// Feasibility need not be monotone in s, so every size from the bound down
// is tried until one is feasible.
fn max_size_exact(problem: &PartitionProblem, ub: usize, opts: &SolverOptions) -> Result<PartitionSolution> {
    let mut nodes = 0;
    let mut highest_open: Option<usize> = None;
    let levels = TwoLevel::of(problem);
    for s in (1..=ub).rev() {
        if !levels.admits(problem, s) {
            continue;
        }
        match branch_and_bound(problem, s, Mode::Feasibility, opts) {
            (FixedOutcome::Solved(mut sol), n) => {
                nodes += n;
                let open = highest_open.unwrap_or(s);
                sol.certificate = Certificate {
                    proved_optimal: highest_open.is_none(),
                    gap: Some((open - s) as f64),
                    upper_bound: Some(open as f64),
                    nodes,
                    method: Method::BranchAndBound,
                };
                return Ok(sol);
            }
            (FixedOutcome::Infeasible, n) => nodes += n,
            (FixedOutcome::Undetermined { .. }, n) => {
                nodes += n;
                highest_open.get_or_insert(s);
            }
        }
    }
    let open = highest_open.unwrap_or(0);
    let mut sol = trivial(problem, open, nodes, Method::BranchAndBound);
    sol.certificate.proved_optimal = highest_open.is_none();
    Ok(sol)
}

fn max_size_search(problem: &PartitionProblem, ub: usize, opts: &SolverOptions) -> Result<PartitionSolution> {
    let levels = TwoLevel::of(problem);
    let candidates: Vec<usize> = (1..=ub).rev().filter(|&s| levels.admits(problem, s)).collect();
    let attempt = |i: usize| local_search(problem, candidates[i], Mode::Feasibility, opts);
    // Gallop down the admissible sizes, then bisect between the last failure
    // and the first success.
    let mut i = 0;
    let mut step = 1;
    let mut failed: Option<usize> = None;
    let mut found = None;
    while i < candidates.len() {
        if let Some(sol) = attempt(i) {
            found = Some((i, sol));
            break;
        }
        failed = Some(i);
        i += step;
        step *= 2;
    }
    if found.is_none() {
        if let Some(f) = failed {
            // The gallop overshot the list; the smallest size is still untried.
            let last = candidates.len() - 1;
            if f != last {
                found = attempt(last).map(|sol| (last, sol));
            }
        }
    }
    let Some((mut hi, mut best)) = found else {
        return Ok(trivial(problem, ub, 0, Method::LocalSearch));
    };
    if let Some(mut lo) = failed {
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            match attempt(mid) {
                Some(sol) => {
                    hi = mid;
                    best = sol;
                }
                None => lo = mid,
            }
        }
    }
    best.certificate = Certificate {
        proved_optimal: best.s == ub,
        gap: Some((ub - best.s) as f64),
        upper_bound: Some(ub as f64),
        nodes: 0,
        method: Method::LocalSearch,
    };
    Ok(best)
}

/// Step 2 at a prescribed size.
pub fn fixed_size_partition(
    problem: &PartitionProblem,
    s_bar: usize,
    mode: Mode,
    opts: &SolverOptions,
) -> Result<FixedOutcome> {
    problem.validate()?;
    if s_bar * problem.samples > problem.n_units() {
        return Ok(FixedOutcome::Infeasible);
    }
    if s_bar == 0 {
        return Ok(FixedOutcome::Solved(trivial(problem, 0, 0, Method::Enumeration)));
    }
    if mode == Mode::Feasibility && (lp_upper_bound(problem)? < s_bar || !TwoLevel::of(problem).admits(problem, s_bar)) {
        return Ok(FixedOutcome::Infeasible);
    }
    if opts.exact(problem) {
        return Ok(branch_and_bound(problem, s_bar, mode, opts).0);
    }
    Ok(match local_search(problem, s_bar, mode, opts) {
        Some(sol) => FixedOutcome::Solved(sol),
        None => FixedOutcome::Undetermined { nodes: 0 },
    })
}

// ---------------------------------------------------------------------------
// Branch and bound

struct Node {
    bound: f64,
    seq: usize,
    fixings: Vec<(usize, f64)>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // BinaryHeap pops the greatest: smallest bound first, then oldest.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

fn base_program(problem: &PartitionProblem, s: usize, mode: Mode) -> LinearProgram {
    let n = problem.n_units();
    let np = problem.samples;
    let k = problem.n_covariates();
    let nc = n * np;
    let extra = if mode == Mode::MinTotalEpsilon { k } else { 0 };
    let mut lp = LinearProgram::new(nc + extra);
    for i in 0..n {
        for p in 0..np {
            // Samples are interchangeable: order them by smallest member,
            // so individual i can only sit in samples 0..=i.
            lp.upper[i * np + p] = if p > i { 0.0 } else { 1.0 };
        }
    }
    for kk in 0..extra {
        lp.objective[nc + kk] = 1.0;
    }
    for i in 0..n {
        lp.add((0..np).map(|p| (i * np + p, 1.0)).collect(), Relation::Le, 1.0);
    }
    for p in 0..np {
        lp.add((0..n).map(|i| (i * np + p, 1.0)).collect(), Relation::Eq, s as f64);
    }
    let sf = s as f64;
    for p in 0..np {
        for kk in 0..k {
            let row: Vec<(usize, f64)> = (0..n)
                .map(|i| (i * np + p, problem.covariates[i][kk]))
                .filter(|&(_, v)| v != 0.0)
                .collect();
            let target = sf * problem.template_means[kk];
            match mode {
                Mode::Feasibility => {
                    let e = sf * problem.epsilons[kk];
                    lp.add(row.clone(), Relation::Le, target + e);
                    lp.add(row, Relation::Ge, target - e);
                }
                Mode::MinTotalEpsilon => {
                    let mut hi = row.clone();
                    hi.push((nc + kk, -sf));
                    lp.add(hi, Relation::Le, target);
                    let mut lo = row;
                    lo.push((nc + kk, sf));
                    lp.add(lo, Relation::Ge, target);
                }
            }
        }
    }
    lp
}

/// Reads an integral point off rounded LP values, if it is structurally valid.
fn rounded_assignment(problem: &PartitionProblem, s: usize, x: &[f64]) -> Option<Vec<(usize, usize)>> {
    let np = problem.samples;
    let mut out = Vec::new();
    for i in 0..problem.n_units() {
        for p in 0..np {
            if x[i * np + p] > 0.5 {
                out.push((i, p));
            }
        }
    }
    problem.check(s, &out, false).ok().map(|_| out)
}

fn objective_of(problem: &PartitionProblem, s: usize, a: &[(usize, usize)], mode: Mode) -> Option<f64> {
    match mode {
        Mode::Feasibility => problem.check(s, a, true).ok().map(|_| 0.0),
        Mode::MinTotalEpsilon => Some(problem.achieved_epsilons(s, a).iter().sum()),
    }
}

fn branch_and_bound(
    problem: &PartitionProblem,
    s: usize,
    mode: Mode,
    opts: &SolverOptions,
) -> (FixedOutcome, usize) {
    let base = base_program(problem, s, mode);
    let nc = problem.n_units() * problem.samples;
    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;
    heap.push(Node {
        bound: f64::NEG_INFINITY,
        seq,
        fixings: Vec::new(),
    });
    let mut incumbent: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut nodes = 0usize;
    let mut exhausted = true;
    let mut lp_trouble = false;

    while let Some(node) = heap.pop() {
        if let Some((best, _)) = &incumbent {
            if node.bound >= best - 1e-9 {
                continue;
            }
        }
        if nodes >= opts.node_limit {
            heap.push(node);
            exhausted = false;
            break;
        }
        nodes += 1;
        let mut lp = base.clone();
        for &(j, v) in &node.fixings {
            lp.lower[j] = v;
            lp.upper[j] = v;
        }
        let (x, value) = match lp.solve() {
            LpOutcome::Optimal { x, value } => (x, value),
            LpOutcome::Infeasible => continue,
            LpOutcome::Unbounded | LpOutcome::IterationLimit => {
                lp_trouble = true;
                continue;
            }
        };
        if let Some((best, _)) = &incumbent {
            if value >= best - 1e-9 {
                continue;
            }
        }
        if let Some(a) = rounded_assignment(problem, s, &x) {
            if let Some(obj) = objective_of(problem, s, &a, mode) {
                if incumbent.as_ref().is_none_or(|(b, _)| obj < *b - 1e-12) {
                    incumbent = Some((obj, a));
                }
                if mode == Mode::Feasibility {
                    break;
                }
                if obj <= value + 1e-9 {
                    continue;
                }
            }
        }
        let mut branch: Option<(usize, f64)> = None;
        for (j, &v) in x.iter().enumerate().take(nc) {
            let frac = v.min(1.0 - v);
            if frac > INT_TOL && branch.is_none_or(|(_, f)| frac > f + 1e-12) {
                branch = Some((j, frac));
            }
        }
        let Some((j, _)) = branch else {
            // Integral but rejected by the exact re-check.
            continue;
        };
        for v in [1.0, 0.0] {
            seq += 1;
            let mut fixings = node.fixings.clone();
            fixings.push((j, v));
            heap.push(Node {
                bound: value,
                seq,
                fixings,
            });
        }
    }

    let open_bound = heap
        .iter()
        .map(|n| n.bound)
        .fold(f64::INFINITY, f64::min);
    let closed = exhausted && !lp_trouble;
    match incumbent {
        Some((obj, a)) => {
            let proved = mode == Mode::Feasibility || (closed && heap.is_empty());
            let gap = if proved {
                Some(0.0)
            } else if open_bound.is_finite() {
                Some((obj - open_bound).max(0.0))
            } else {
                None
            };
            let cert = Certificate {
                proved_optimal: proved,
                gap,
                upper_bound: None,
                nodes,
                method: Method::BranchAndBound,
            };
            (FixedOutcome::Solved(PartitionSolution::build(problem, s, a, cert)), nodes)
        }
        None if closed => (FixedOutcome::Infeasible, nodes),
        None => (FixedOutcome::Undetermined { nodes }, nodes),
    }
}

// ---------------------------------------------------------------------------
// Local search for instances beyond exact reach

/// Aggregated LP at fixed size: fractional y with Σy = P·s minimizing the
/// total absolute deviation of the pooled selection from the template.
fn seed_selection(problem: &PartitionProblem, s: usize) -> Vec<usize> {
    let n = problem.n_units();
    let k = problem.n_covariates();
    let total = (problem.samples * s) as f64;
    let mut lp = LinearProgram::new(n + 2 * k);
    for j in 0..n {
        lp.upper[j] = 1.0;
    }
    for kk in 0..k {
        lp.objective[n + 2 * kk] = 1.0;
        lp.objective[n + 2 * kk + 1] = 1.0;
    }
    lp.add((0..n).map(|j| (j, 1.0)).collect(), Relation::Eq, total);
    for kk in 0..k {
        let mut row: Vec<(usize, f64)> = (0..n).map(|j| (j, problem.covariates[j][kk])).collect();
        row.push((n + 2 * kk, -1.0));
        row.push((n + 2 * kk + 1, 1.0));
        lp.add(row, Relation::Eq, total * problem.template_means[kk]);
    }
    let y = match lp.solve() {
        LpOutcome::Optimal { x, .. } => x,
        _ => vec![1.0; n],
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[b].total_cmp(&y[a]).then(a.cmp(&b)));
    order.truncate(problem.samples * s);
    order
}

struct SearchState<'a> {
    problem: &'a PartitionProblem,
    s: usize,
    mode: Mode,
    members: Vec<Vec<usize>>,
    pool: Vec<usize>,
    dev: Vec<Vec<f64>>,
    margin: Vec<f64>,
}

impl<'a> SearchState<'a> {
    fn new(problem: &'a PartitionProblem, s: usize, mode: Mode) -> Self {
        let np = problem.samples;
        let k = problem.n_covariates();
        let selected = seed_selection(problem, s);
        let mut chosen = vec![false; problem.n_units()];
        for &i in &selected {
            chosen[i] = true;
        }
        let pool = (0..problem.n_units()).filter(|&i| !chosen[i]).collect();
        let margin = problem
            .epsilons
            .iter()
            .map(|e| 0.8 * e * s as f64)
            .collect();
        let mut st = SearchState {
            problem,
            s,
            mode,
            members: vec![Vec::with_capacity(s); np],
            pool,
            dev: vec![
                problem
                    .template_means
                    .iter()
                    .map(|b| -(s as f64) * b)
                    .collect();
                np
            ],
            margin,
        };
        // Greedy deal: each unit goes to the open sample it helps most.
        for &i in &selected {
            let x = &problem.covariates[i];
            let mut best: Option<(usize, f64)> = None;
            for p in 0..np {
                if st.members[p].len() >= s {
                    continue;
                }
                let delta: f64 = (0..k)
                    .map(|kk| st.phi(kk, st.dev[p][kk] + x[kk]) - st.phi(kk, st.dev[p][kk]))
                    .sum();
                if best.is_none_or(|(_, d)| delta < d) {
                    best = Some((p, delta));
                }
            }
            let p = best.map(|b| b.0).unwrap_or(0);
            st.members[p].push(i);
            for kk in 0..k {
                st.dev[p][kk] += x[kk];
            }
        }
        st
    }

    fn phi(&self, k: usize, d: f64) -> f64 {
        match self.mode {
            Mode::Feasibility => {
                let h = d.abs() - self.margin[k];
                if h > 0.0 {
                    h * h
                } else {
                    0.0
                }
            }
            Mode::MinTotalEpsilon => d * d,
        }
    }

    fn dphi(&self, k: usize, d: f64) -> f64 {
        match self.mode {
            Mode::Feasibility => {
                let h = d.abs() - self.margin[k];
                if h > 0.0 {
                    2.0 * h * d.signum()
                } else {
                    0.0
                }
            }
            Mode::MinTotalEpsilon => 2.0 * d,
        }
    }

    fn cost(&self, p: usize) -> f64 {
        self.dev[p]
            .iter()
            .enumerate()
            .map(|(k, &d)| self.phi(k, d))
            .sum()
    }

    fn total(&self) -> f64 {
        (0..self.members.len()).map(|p| self.cost(p)).sum()
    }

    fn feasible(&self) -> bool {
        self.dev
            .iter()
            .all(|row| row.iter().enumerate().all(|(k, &d)| within(d, self.problem.epsilons[k], self.s)))
    }

    fn assignment(&self) -> Vec<(usize, usize)> {
        self.members
            .iter()
            .enumerate()
            .flat_map(|(p, m)| m.iter().map(move |&i| (i, p)))
            .collect()
    }

    /// Cost change of sample p when `out` leaves and `inn` joins.
    fn swap_delta(&self, p: usize, out: usize, inn: usize) -> f64 {
        let xo = &self.problem.covariates[out];
        let xi = &self.problem.covariates[inn];
        self.dev[p]
            .iter()
            .enumerate()
            .map(|(k, &d)| self.phi(k, d - xo[k] + xi[k]) - self.phi(k, d))
            .sum()
    }

    fn apply(&mut self, p: usize, slot: usize, inn: usize, source: Source) {
        let out = self.members[p][slot];
        let k = self.problem.n_covariates();
        for kk in 0..k {
            let diff = self.problem.covariates[inn][kk] - self.problem.covariates[out][kk];
            self.dev[p][kk] += diff;
            if let Source::Sample(q, _) = source {
                self.dev[q][kk] -= diff;
            }
        }
        self.members[p][slot] = inn;
        match source {
            Source::Pool(idx) => self.pool[idx] = out,
            Source::Sample(q, qslot) => self.members[q][qslot] = out,
        }
    }

    fn score(&self, g: &[f64], i: usize) -> f64 {
        g.iter().zip(&self.problem.covariates[i]).map(|(a, b)| a * b).sum()
    }

    /// Best improving exchange for sample p among the `width` most promising
    /// candidates on each side, by first-order score.
    fn best_move(&self, p: usize, width: usize) -> Option<(f64, usize, usize, Source)> {
        let k = self.problem.n_covariates();
        let gp: Vec<f64> = (0..k).map(|kk| self.dphi(kk, self.dev[p][kk])).collect();
        let top = |items: &mut Vec<(f64, usize)>| {
            items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            items.truncate(width);
        };
        let mut best: Option<(f64, usize, usize, Source)> = None;
        let mut consider = |delta: f64, slot: usize, inn: usize, src: Source| {
            if delta < -1e-12 && best.as_ref().is_none_or(|b| delta < b.0 - 1e-15) {
                best = Some((delta, slot, inn, src));
            }
        };

        // Exchanges with the pool.
        let mut outs: Vec<(f64, usize)> = self.members[p]
            .iter()
            .enumerate()
            .map(|(slot, &i)| (-self.score(&gp, i), slot))
            .collect();
        top(&mut outs);
        let mut ins: Vec<(f64, usize)> = self
            .pool
            .iter()
            .enumerate()
            .map(|(idx, &i)| (self.score(&gp, i), idx))
            .collect();
        top(&mut ins);
        for &(_, slot) in &outs {
            for &(_, idx) in &ins {
                let d = self.swap_delta(p, self.members[p][slot], self.pool[idx]);
                consider(d, slot, self.pool[idx], Source::Pool(idx));
            }
        }

        // Exchanges with other samples.
        for q in 0..self.members.len() {
            if q == p {
                continue;
            }
            let g: Vec<f64> = (0..k)
                .map(|kk| gp[kk] - self.dphi(kk, self.dev[q][kk]))
                .collect();
            let mut outs: Vec<(f64, usize)> = self.members[p]
                .iter()
                .enumerate()
                .map(|(slot, &i)| (-self.score(&g, i), slot))
                .collect();
            top(&mut outs);
            let mut ins: Vec<(f64, usize)> = self.members[q]
                .iter()
                .enumerate()
                .map(|(slot, &i)| (self.score(&g, i), slot))
                .collect();
            top(&mut ins);
            for &(_, slot) in &outs {
                for &(_, qslot) in &ins {
                    let a = self.members[p][slot];
                    let b = self.members[q][qslot];
                    let d = self.swap_delta(p, a, b) + self.swap_delta(q, b, a);
                    consider(d, slot, b, Source::Sample(q, qslot));
                }
            }
        }
        best
    }

    fn perturb(&mut self, rng: &mut ChaCha8Rng, moves: usize) {
        let np = self.members.len();
        for _ in 0..moves {
            let p = rng.random_range(0..np);
            let slot = rng.random_range(0..self.s);
            let total_other = self.pool.len() + (np - 1) * self.s;
            if total_other == 0 {
                return;
            }
            let mut r = rng.random_range(0..total_other);
            if r < self.pool.len() {
                let inn = self.pool[r];
                self.apply(p, slot, inn, Source::Pool(r));
                continue;
            }
            r -= self.pool.len();
            let q_rank = r / self.s;
            let q = if q_rank >= p { q_rank + 1 } else { q_rank };
            let qslot = r % self.s;
            let inn = self.members[q][qslot];
            self.apply(p, slot, inn, Source::Sample(q, qslot));
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Pool(usize),
    Sample(usize, usize),
}

fn local_search(problem: &PartitionProblem, s: usize, mode: Mode, opts: &SolverOptions) -> Option<PartitionSolution> {
    let mut st = SearchState::new(problem, s, mode);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut best_total = st.total();
    let mut best_assignment = st.assignment();
    let mut restarts = 0;
    let max_steps = 50 * problem.samples * s + 1000;
    let mut steps = 0;
    let finish = |a: Vec<(usize, usize)>| {
        let cert = Certificate {
            proved_optimal: false,
            gap: None,
            upper_bound: None,
            nodes: 0,
            method: Method::LocalSearch,
        };
        PartitionSolution::build(problem, s, a, cert)
    };
    loop {
        if mode == Mode::Feasibility && st.feasible() {
            return Some(finish(st.assignment()));
        }
        steps += 1;
        if steps > max_steps {
            break;
        }
        // Work on the worst sample first; fall back to the others.
        let mut order: Vec<usize> = (0..problem.samples).collect();
        let costs: Vec<f64> = order.iter().map(|&p| st.cost(p)).collect();
        order.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]).then(a.cmp(&b)));
        let mut moved = false;
        'widths: for width in [8, 64, 512] {
            for &p in &order {
                if costs[p] <= 0.0 {
                    continue;
                }
                if let Some((_, slot, inn, src)) = st.best_move(p, width) {
                    st.apply(p, slot, inn, src);
                    moved = true;
                    break 'widths;
                }
            }
        }
        if moved {
            continue;
        }
        let total = st.total();
        if total < best_total - 1e-12 {
            best_total = total;
            best_assignment = st.assignment();
        }
        if restarts >= opts.restarts || total <= 0.0 {
            break;
        }
        restarts += 1;
        st.perturb(&mut rng, 2 + s / 10);
    }
    let total = st.total();
    if total < best_total {
        best_assignment = st.assignment();
    }
    match mode {
        Mode::Feasibility => None,
        Mode::MinTotalEpsilon => Some(finish(best_assignment)),
    }
}

// ---------------------------------------------------------------------------
// Steps 1 and 2 across groups

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepsResult {
    pub s_bar: usize,
    /// Smallest Step-1 optimum; exceeds `s_bar` when some group had no
    /// balanced partition at exactly that size.
    pub step1_min: usize,
    pub step1: Vec<PartitionSolution>,
    pub step2: Vec<PartitionSolution>,
}

impl StepsResult {
    /// Member indices per group and sample: `[group][sample]`.
    pub fn samples(&self, n_samples: usize) -> Vec<Vec<Vec<usize>>> {
        self.step2.iter().map(|s| s.samples(n_samples)).collect()
    }
}

fn group_name(g: usize, n: usize) -> String {
    if n == crate::data::GROUP_COUNT {
        crate::data::Group::from_index(g)
            .map(|gr| gr.label().to_string())
            .unwrap_or_else(|_| g.to_string())
    } else {
        format!("#{g}")
    }
}

/// Step 1 in every group, s̄ as the minimum optimum, then Step 2 at s̄.
pub fn run_steps_1_2(problems: &[PartitionProblem], mode: Mode, opts: &SolverOptions) -> Result<StepsResult> {
    use rayon::prelude::*;
    let first = problems
        .first()
        .ok_or_else(|| invalid("no groups to match"))?;
    for (g, p) in problems.iter().enumerate() {
        if p.samples != first.samples || p.n_covariates() != first.n_covariates() {
            return Err(invalid(format!(
                "group {} disagrees with group {} on P or K",
                group_name(g, problems.len()),
                group_name(0, problems.len())
            )));
        }
    }
    let n = problems.len();
    let step1: Vec<PartitionSolution> = problems
        .par_iter()
        .enumerate()
        .map(|(g, p)| {
            max_size_partition(p, opts).map_err(|e| {
                Error::Infeasible(format!("step 1, group {}: {e}", group_name(g, n)))
            })
        })
        .collect::<Result<_>>()?;
    let step1_min = step1.iter().map(|s| s.s).min().unwrap_or(0);
    // Balance feasibility is not monotone in s, so a group may fail at the
    // common size even though it succeeded above it; step down until every
    // group has a partition.
    let mut s_bar = step1_min;
    let step2 = loop {
        let attempt: Vec<std::result::Result<PartitionSolution, Error>> = problems
            .par_iter()
            .enumerate()
            .map(|(g, p)| {
                // The Step-1 optimum is a witness when it already equals s̄.
                if mode == Mode::Feasibility && step1[g].s == s_bar {
                    return Ok(step1[g].clone());
                }
                match fixed_size_partition(p, s_bar, mode, opts)? {
                    FixedOutcome::Solved(sol) => Ok(sol),
                    FixedOutcome::Infeasible => Err(Error::Infeasible(format!(
                        "step 2, group {}: no balanced partition at s = {s_bar}",
                        group_name(g, n)
                    ))),
                    FixedOutcome::Undetermined { nodes } => Err(Error::Infeasible(format!(
                        "step 2, group {}: search budget exhausted at s = {s_bar} after {nodes} nodes",
                        group_name(g, n)
                    ))),
                }
            })
            .collect();
        match attempt.into_iter().collect::<Result<Vec<_>>>() {
            Ok(sols) => break sols,
            Err(Error::Infeasible(_)) if s_bar > 1 => s_bar -= 1,
            Err(e) => return Err(e),
        }
    };
    for (g, (sol, p)) in step2.iter().zip(problems).enumerate() {
        p.check(s_bar, &sol.assignment, mode == Mode::Feasibility)
            .map_err(|e| Error::Validation(format!("group {}: {e}", group_name(g, n))))?;
    }
    Ok(StepsResult {
        s_bar,
        step1_min,
        step1,
        step2,
    })
}

// ---------------------------------------------------------------------------
// Exhaustive oracle

pub const BRUTE_FORCE_MAX_UNITS: usize = 12;
pub const BRUTE_FORCE_MAX_SAMPLES: usize = 2;

fn enumerate(problem: &PartitionProblem, mut visit: impl FnMut(usize, &[(usize, usize)])) -> Result<()> {
    problem.validate()?;
    let n = problem.n_units();
    let np = problem.samples;
    if n > BRUTE_FORCE_MAX_UNITS || np > BRUTE_FORCE_MAX_SAMPLES {
        return Err(invalid(format!(
            "enumeration is limited to I ≤ {BRUTE_FORCE_MAX_UNITS}, P ≤ {BRUTE_FORCE_MAX_SAMPLES}"
        )));
    }
    let base = np + 1;
    let total = base.pow(n as u32);
    let mut digits = vec![0usize; n];
    let mut assignment = Vec::with_capacity(n);
    let mut counts = vec![0usize; np];
    for code in 0..total {
        if code > 0 {
            let mut i = 0;
            loop {
                digits[i] += 1;
                if digits[i] < base {
                    break;
                }
                digits[i] = 0;
                i += 1;
            }
        }
        counts.iter_mut().for_each(|c| *c = 0);
        for &d in &digits {
            if d > 0 {
                counts[d - 1] += 1;
            }
        }
        if counts.iter().any(|&c| c != counts[0]) {
            continue;
        }
        assignment.clear();
        assignment.extend(
            digits
                .iter()
                .enumerate()
                .filter(|(_, &d)| d > 0)
                .map(|(i, &d)| (i, d - 1)),
        );
        visit(counts[0], &assignment);
    }
    Ok(())
}

fn oracle_certificate() -> Certificate {
    Certificate {
        proved_optimal: true,
        gap: Some(0.0),
        upper_bound: None,
        nodes: 0,
        method: Method::Enumeration,
    }
}

/// Exact Step-1 optimum by enumerating all (P+1)^I assignments.
pub fn brute_force_partition(problem: &PartitionProblem) -> Result<PartitionSolution> {
    let mut best: Option<(usize, Vec<(usize, usize)>)> = None;
    enumerate(problem, |s, a| {
        if best.as_ref().is_some_and(|(b, _)| *b >= s) {
            return;
        }
        if problem.check(s, a, true).is_ok() {
            best = Some((s, a.to_vec()));
        }
    })?;
    let (s, a) = best.unwrap_or((0, Vec::new()));
    Ok(PartitionSolution::build(problem, s, a, oracle_certificate()))
}

/// Exhaustive Step-2 oracle; `None` when no assignment of size `s` qualifies.
pub fn brute_force_fixed(problem: &PartitionProblem, s: usize, mode: Mode) -> Result<Option<PartitionSolution>> {
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    enumerate(problem, |size, a| {
        if size != s || (mode == Mode::Feasibility && best.is_some()) {
            return;
        }
        if let Some(obj) = objective_of(problem, s, a, mode) {
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, a.to_vec()));
            }
        }
    })?;
    Ok(best.map(|(_, a)| PartitionSolution::build(problem, s, a, oracle_certificate())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_cov(x: &[f64], b: f64, eps: f64, p: usize) -> PartitionProblem {
        PartitionProblem::new(x.iter().map(|&v| vec![v]).collect(), vec![b], vec![eps], p).unwrap()
    }

    #[test]
    fn without_constraints_only_sizes_bind() {
        let pr = PartitionProblem::new(vec![vec![]; 5], vec![], vec![], 2).unwrap();
        let sol = max_size_partition(&pr, &SolverOptions::default()).unwrap();
        assert_eq!(sol.s, 2);
        assert!(sol.certificate.proved_optimal);
        pr.check(sol.s, &sol.assignment, true).unwrap();
    }

    #[test]
    fn selects_everything_when_mean_matches() {
        let pr = one_cov(&[0.0, 0.0, 1.0, 1.0], 0.5, 1e-9, 1);
        assert_eq!(max_size_partition(&pr, &SolverOptions::default()).unwrap().s, 4);
        let pr = one_cov(&[0.0, 0.0, 1.0], 0.5, 1e-9, 1);
        let sol = max_size_partition(&pr, &SolverOptions::default()).unwrap();
        assert_eq!(sol.s, 2);
        assert_eq!(sol.assignment.len(), 2);
        assert!(sol.assignment.contains(&(2, 0)));
    }

    #[test]
    fn min_epsilon_picks_exact_match() {
        let pr = one_cov(&[0.0, 1.0], 0.0, 1.0, 1);
        let out = fixed_size_partition(&pr, 1, Mode::MinTotalEpsilon, &SolverOptions::default()).unwrap();
        let sol = out.solution().unwrap();
        assert_eq!(sol.assignment, vec![(0, 0)]);
        assert_eq!(sol.total_epsilon(), 0.0);
        assert!(sol.certificate.proved_optimal);
    }

    #[test]
    fn feasibility_is_not_monotone_in_size() {
        // s = 2 balances exactly, s = 1 cannot.
        let pr = one_cov(&[0.0, 1.0], 0.5, 1e-6, 1);
        let opts = SolverOptions::default();
        assert_eq!(max_size_partition(&pr, &opts).unwrap().s, 2);
        assert_eq!(fixed_size_partition(&pr, 1, Mode::Feasibility, &opts).unwrap(), FixedOutcome::Infeasible);
        assert_eq!(brute_force_fixed(&pr, 1, Mode::Feasibility).unwrap(), None);
    }

    #[test]
    fn oracle_single_unit() {
        let pr = one_cov(&[3.0], 0.0, 1e6, 1);
        assert_eq!(brute_force_partition(&pr).unwrap().s, 1);
    }

    #[test]
    fn enumeration_guard() {
        let pr = PartitionProblem::new(vec![vec![]; 13], vec![], vec![], 1).unwrap();
        assert!(brute_force_partition(&pr).is_err());
    }

    #[test]
    fn rejects_bad_problems() {
        assert!(PartitionProblem::new(vec![vec![1.0]], vec![0.0], vec![0.0], 1).is_err());
        assert!(PartitionProblem::new(vec![vec![1.0]], vec![0.0], vec![0.1], 2).is_err());
        assert!(PartitionProblem::new(vec![vec![1.0]], vec![0.0], vec![0.1], 0).is_err());
        assert!(PartitionProblem::new(vec![vec![1.0, 2.0]], vec![0.0], vec![0.1], 1).is_err());
    }

    #[test]
    fn binary_covariate_pairs_match_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let opts = SolverOptions::default();
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(0..2) as f64).collect();
            let pr = one_cov(&x, rng.random_range(0.0..1.0), 0.1, 2);
            for s in 0..=3 {
                let got = fixed_size_partition(&pr, s, Mode::Feasibility, &opts).unwrap();
                let want = brute_force_fixed(&pr, s, Mode::Feasibility).unwrap();
                assert_eq!(got.solution().is_some(), want.is_some(), "s = {s}, {pr:?}");
                assert_ne!(got, FixedOutcome::Undetermined { nodes: 0 });
            }
        }
    }

    #[test]
    fn local_search_handles_large_groups() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let k = 6;
        let x: Vec<Vec<f64>> = (0..600)
            .map(|_| (0..k).map(|kk| normal.sample(&mut rng) + 0.05 * kk as f64).collect())
            .collect();
        let pr = PartitionProblem::new(x, vec![0.0; k], vec![0.05; k], 3).unwrap();
        let opts = SolverOptions::default();
        let sol = max_size_partition(&pr, &opts).unwrap();
        pr.check(sol.s, &sol.assignment, true).unwrap();
        assert_eq!(sol.certificate.method, Method::LocalSearch);
        assert!(sol.s >= 150, "s = {}", sol.s);
        let ub = lp_upper_bound(&pr).unwrap();
        assert_eq!(sol.certificate.gap, Some((ub - sol.s) as f64));
    }

    #[test]
    fn steps_use_smallest_optimum() {
        let opts = SolverOptions::default();
        let big = one_cov(&[0.0, 1.0, 0.0, 1.0, 0.0, 1.0], 0.5, 0.01, 1);
        let small = one_cov(&[0.0, 1.0, 0.0, 0.0], 0.5, 0.01, 1);
        let res = run_steps_1_2(&[big.clone(), small, big], Mode::Feasibility, &opts).unwrap();
        assert_eq!(res.s_bar, 2);
        assert_eq!(res.step1[0].s, 6);
        for sol in &res.step2 {
            assert_eq!(sol.s, 2);
        }
    }

    #[test]
    fn solution_json_round_trip() {
        let pr = one_cov(&[0.0, 1.0, 0.0, 1.0], 0.5, 0.01, 2);
        let sol = max_size_partition(&pr, &SolverOptions::default()).unwrap();
        let text = serde_json::to_string(&sol).unwrap();
        assert!(text.contains("\"assignment\":[["));
        let back: PartitionSolution = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sol);
        let pj: PartitionProblem = serde_json::from_str(&serde_json::to_string(&pr).unwrap()).unwrap();
        assert_eq!(pj, pr);
    }
}

//! Dense two-phase primal simplex with bounded variables.
//!
//! Problems are small to medium (hundreds of rows), so the full tableau is
//! kept and updated in place. Variables have finite lower bounds and possibly
//! infinite upper bounds; nonbasic variables sit at one of their bounds.

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;
const OPT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coefs: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

/// minimize cᵀx subject to the constraints and lower ≤ x ≤ upper.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
    IterationLimit,
}

impl LinearProgram {
    pub fn new(n: usize) -> Self {
        LinearProgram {
            objective: vec![0.0; n],
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
            constraints: Vec::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add(&mut self, coefs: Vec<(usize, f64)>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint {
            coefs,
            relation,
            rhs,
        });
    }

    pub fn solve(&self) -> LpOutcome {
        Tableau::build(self).run(self)
    }

    /// Largest violation of any bound or constraint at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, &v) in x.iter().enumerate() {
            worst = worst.max(self.lower[j] - v).max(v - self.upper[j]);
        }
        for c in &self.constraints {
            let lhs: f64 = c.coefs.iter().map(|&(j, a)| a * x[j]).sum();
            let d = lhs - c.rhs;
            worst = worst.max(match c.relation {
                Relation::Le => d,
                Relation::Ge => -d,
                Relation::Eq => d.abs(),
            });
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum State {
    Basic(usize),
    AtLower,
    AtUpper,
}

struct Tableau {
    m: usize,
    n_struct: usize,
    n_total: usize,
    /// Row-major m × n_total, holding B⁻¹A.
    t: Vec<f64>,
    beta: Vec<f64>,
    basis: Vec<usize>,
    state: Vec<State>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    artificial_start: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Tableau {
        let m = lp.constraints.len();
        let n = lp.n_vars();
        // Structural, then one logical per inequality row, then one
        // artificial per row that needs it.
        let mut logical_of_row = vec![None; m];
        let mut n_total = n;
        for (i, c) in lp.constraints.iter().enumerate() {
            if c.relation != Relation::Eq {
                logical_of_row[i] = Some(n_total);
                n_total += 1;
            }
        }
        let mut lower = lp.lower.clone();
        let mut upper = lp.upper.clone();
        lower.resize(n_total, 0.0);
        upper.resize(n_total, f64::INFINITY);

        // Nonbasic structurals start at their lower bound.
        let mut residual: Vec<f64> = lp
            .constraints
            .iter()
            .map(|c| c.rhs - c.coefs.iter().map(|&(j, a)| a * lp.lower[j]).sum::<f64>())
            .collect();

        let artificial_start = n_total;
        let mut needs_art = Vec::new();
        let mut basis = vec![0usize; m];
        for (i, c) in lp.constraints.iter().enumerate() {
            let ok = match c.relation {
                Relation::Le => residual[i] >= 0.0,
                Relation::Ge => residual[i] <= 0.0,
                Relation::Eq => false,
            };
            if ok {
                basis[i] = logical_of_row[i].unwrap();
            } else {
                needs_art.push(i);
            }
        }
        let n_art = needs_art.len();
        let n_total = n_total + n_art;
        lower.resize(n_total, 0.0);
        upper.resize(n_total, f64::INFINITY);

        let mut t = vec![0.0; m * n_total];
        for (i, c) in lp.constraints.iter().enumerate() {
            let row = &mut t[i * n_total..(i + 1) * n_total];
            for &(j, a) in &c.coefs {
                row[j] += a;
            }
            if let Some(l) = logical_of_row[i] {
                row[l] = if c.relation == Relation::Le { 1.0 } else { -1.0 };
            }
        }
        for (k, &i) in needs_art.iter().enumerate() {
            let col = artificial_start + k;
            let sign = if residual[i] >= 0.0 { 1.0 } else { -1.0 };
            t[i * n_total + col] = sign;
            basis[i] = col;
        }
        // Express rows in terms of the starting basis: each basic column has a
        // single ±1 entry in its row, so scaling the row is enough.
        for i in 0..m {
            let piv = t[i * n_total + basis[i]];
            if piv != 1.0 {
                for v in &mut t[i * n_total..(i + 1) * n_total] {
                    *v /= piv;
                }
                residual[i] /= piv;
            }
        }
        let mut state = vec![State::AtLower; n_total];
        for (i, &b) in basis.iter().enumerate() {
            state[b] = State::Basic(i);
        }
        Tableau {
            m,
            n_struct: n,
            n_total,
            t,
            beta: residual,
            basis,
            state,
            lower,
            upper,
            artificial_start,
        }
    }

    fn value_of(&self, j: usize) -> f64 {
        match self.state[j] {
            State::Basic(i) => self.beta[i],
            State::AtLower => self.lower[j],
            State::AtUpper => self.upper[j],
        }
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.t[i * self.n_total..(i + 1) * self.n_total];
                for (dj, &a) in d.iter_mut().zip(row) {
                    *dj -= cb * a;
                }
            }
        }
        d
    }

    fn pivot(&mut self, r: usize, col: usize, d: &mut [f64]) {
        let n = self.n_total;
        let p = self.t[r * n + col];
        for v in &mut self.t[r * n..(r + 1) * n] {
            *v /= p;
        }
        let (before, rest) = self.t.split_at_mut(r * n);
        let (prow, after) = rest.split_at_mut(n);
        for chunk in before.chunks_mut(n).chain(after.chunks_mut(n)) {
            let f = chunk[col];
            if f != 0.0 {
                for (v, &a) in chunk.iter_mut().zip(prow.iter()) {
                    *v -= f * a;
                }
                chunk[col] = 0.0;
            }
        }
        let f = d[col];
        if f != 0.0 {
            for (v, &a) in d.iter_mut().zip(prow.iter()) {
                *v -= f * a;
            }
            d[col] = 0.0;
        }
    }

    /// Runs primal simplex iterations on cost vector `cost`.
    fn optimize(&mut self, cost: &[f64], max_iter: usize) -> Option<bool> {
        let mut d = self.reduced_costs(cost);
        let mut degenerate_run = 0usize;
        for _ in 0..max_iter {
            let bland = degenerate_run > 50;
            // Entering variable.
            let mut enter: Option<(usize, f64)> = None;
            for j in 0..self.n_total {
                let dir = match self.state[j] {
                    State::Basic(_) => continue,
                    State::AtLower if d[j] < -OPT_TOL && self.upper[j] > self.lower[j] => 1.0,
                    State::AtUpper if d[j] > OPT_TOL => -1.0,
                    _ => continue,
                };
                let score = d[j].abs();
                match enter {
                    None => enter = Some((j, dir)),
                    Some((k, _)) if !bland && score > d[k].abs() => enter = Some((j, dir)),
                    _ => {}
                }
                if bland && enter.is_some() {
                    break;
                }
            }
            let (col, dir) = match enter {
                None => return Some(true),
                Some(e) => e,
            };
            // Ratio test.
            let n = self.n_total;
            let mut best_t = self.upper[col] - self.lower[col];
            let mut leave: Option<(usize, bool)> = None;
            for i in 0..self.m {
                let a = self.t[i * n + col] * dir;
                if a.abs() <= PIVOT_TOL {
                    continue;
                }
                let b = self.basis[i];
                // basic value moves by −a·t
                let (limit, to_upper) = if a > 0.0 {
                    ((self.beta[i] - self.lower[b]) / a, false)
                } else if self.upper[b].is_finite() {
                    ((self.upper[b] - self.beta[i]) / -a, true)
                } else {
                    continue;
                };
                let limit = limit.max(0.0);
                let better = match leave {
                    _ if limit < best_t - 1e-12 => true,
                    Some((li, _)) if (limit - best_t).abs() <= 1e-12 => {
                        let cur = self.t[li * n + col].abs();
                        if bland {
                            self.basis[i] < self.basis[li]
                        } else {
                            a.abs() > cur
                        }
                    }
                    None if limit <= best_t + 1e-12 && !best_t.is_finite() => true,
                    _ => false,
                };
                if better {
                    best_t = limit;
                    leave = Some((i, to_upper));
                }
            }
            if !best_t.is_finite() {
                return Some(false);
            }
            degenerate_run = if best_t <= 1e-12 { degenerate_run + 1 } else { 0 };
            // Update basic values.
            for i in 0..self.m {
                let a = self.t[i * n + col];
                if a != 0.0 {
                    self.beta[i] -= a * dir * best_t;
                }
            }
            match leave {
                None => {
                    // Bound flip.
                    self.state[col] = if dir > 0.0 {
                        State::AtUpper
                    } else {
                        State::AtLower
                    };
                }
                Some((r, to_upper)) => {
                    let entering_value = self.value_of(col) + dir * best_t;
                    let out = self.basis[r];
                    self.state[out] = if to_upper {
                        State::AtUpper
                    } else {
                        State::AtLower
                    };
                    self.pivot(r, col, &mut d);
                    self.basis[r] = col;
                    self.state[col] = State::Basic(r);
                    self.beta[r] = entering_value;
                }
            }
        }
        None
    }

    fn run(mut self, lp: &LinearProgram) -> LpOutcome {
        if (0..lp.n_vars()).any(|j| lp.lower[j] > lp.upper[j] + FEAS_TOL) {
            return LpOutcome::Infeasible;
        }
        let max_iter = 50 * (self.m + self.n_total) + 1000;
        if self.artificial_start < self.n_total {
            let mut cost = vec![0.0; self.n_total];
            for c in &mut cost[self.artificial_start..] {
                *c = 1.0;
            }
            if self.optimize(&cost, max_iter).is_none() {
                return LpOutcome::IterationLimit;
            }
            let infeas: f64 = (self.artificial_start..self.n_total)
                .map(|j| self.value_of(j))
                .sum();
            if infeas > FEAS_TOL * (1.0 + self.m as f64).sqrt() {
                return LpOutcome::Infeasible;
            }
            for j in self.artificial_start..self.n_total {
                self.upper[j] = 0.0;
                if self.state[j] == State::AtUpper {
                    self.state[j] = State::AtLower;
                }
            }
        }
        let mut cost = vec![0.0; self.n_total];
        cost[..self.n_struct].copy_from_slice(&lp.objective);
        match self.optimize(&cost, max_iter) {
            None => LpOutcome::IterationLimit,
            Some(false) => LpOutcome::Unbounded,
            Some(true) => {
                let x: Vec<f64> = (0..self.n_struct)
                    .map(|j| {
                        let v = self.value_of(j);
                        v.clamp(lp.lower[j], lp.upper[j])
                    })
                    .collect();
                let value = x.iter().zip(&lp.objective).map(|(a, b)| a * b).sum();
                LpOutcome::Optimal { x, value }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn optimal(o: LpOutcome) -> (Vec<f64>, f64) {
        match o {
            LpOutcome::Optimal { x, value } => (x, value),
            other => panic!("expected optimum, got {other:?}"),
        }
    }

    #[test]
    fn textbook_maximization() {
        // max 3x + 5y st x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18 → (2, 6), 36
        let mut lp = LinearProgram::new(2);
        lp.objective = vec![-3.0, -5.0];
        lp.add(vec![(0, 1.0)], Relation::Le, 4.0);
        lp.add(vec![(1, 2.0)], Relation::Le, 12.0);
        lp.add(vec![(0, 3.0), (1, 2.0)], Relation::Le, 18.0);
        let (x, v) = optimal(lp.solve());
        assert!((x[0] - 2.0).abs() < 1e-9 && (x[1] - 6.0).abs() < 1e-9);
        assert!((v + 36.0).abs() < 1e-9);
    }

    #[test]
    fn equality_and_ge_rows_need_phase_one() {
        // min x + y st x + y ≥ 2, x − y = 1 → x = 1.5, y = 0.5
        let mut lp = LinearProgram::new(2);
        lp.objective = vec![1.0, 1.0];
        lp.add(vec![(0, 1.0), (1, 1.0)], Relation::Ge, 2.0);
        lp.add(vec![(0, 1.0), (1, -1.0)], Relation::Eq, 1.0);
        let (x, v) = optimal(lp.solve());
        assert!((v - 2.0).abs() < 1e-9);
        assert!(lp.max_violation(&x) < 1e-9);
    }

    #[test]
    fn upper_bounds_are_respected_without_rows() {
        // max x + y with x, y ∈ [0, 1] and x + y ≤ 1.5
        let mut lp = LinearProgram::new(2);
        lp.objective = vec![-1.0, -1.0];
        lp.upper = vec![1.0, 1.0];
        lp.add(vec![(0, 1.0), (1, 1.0)], Relation::Le, 1.5);
        let (x, v) = optimal(lp.solve());
        assert!((v + 1.5).abs() < 1e-9);
        assert!(x.iter().all(|&xi| (-1e-12..=1.0 + 1e-12).contains(&xi)));
    }

    #[test]
    fn fixed_variables_through_bounds() {
        let mut lp = LinearProgram::new(3);
        lp.objective = vec![1.0, 1.0, 1.0];
        lp.lower = vec![1.0, 0.0, 0.0];
        lp.upper = vec![1.0, 1.0, 1.0];
        lp.add(vec![(0, 1.0), (1, 1.0), (2, 1.0)], Relation::Eq, 2.0);
        let (x, v) = optimal(lp.solve());
        assert_eq!(x[0], 1.0);
        assert!((v - 2.0).abs() < 1e-9);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let mut lp = LinearProgram::new(1);
        lp.upper = vec![1.0];
        lp.add(vec![(0, 1.0)], Relation::Ge, 2.0);
        assert_eq!(lp.solve(), LpOutcome::Infeasible);

        let mut lp = LinearProgram::new(2);
        lp.objective = vec![-1.0, 0.0];
        lp.add(vec![(0, 1.0), (1, -1.0)], Relation::Le, 1.0);
        assert_eq!(lp.solve(), LpOutcome::Unbounded);

        let mut lp = LinearProgram::new(1);
        lp.lower = vec![2.0];
        lp.upper = vec![1.0];
        assert_eq!(lp.solve(), LpOutcome::Infeasible);
    }

    #[test]
    fn degenerate_problem_terminates() {
        // Klee–Minty-like degenerate vertex at the origin.
        let mut lp = LinearProgram::new(4);
        lp.objective = vec![-0.75, 150.0, -0.02, 6.0];
        lp.add(vec![(0, 0.25), (1, -60.0), (2, -0.04), (3, 9.0)], Relation::Le, 0.0);
        lp.add(vec![(0, 0.5), (1, -90.0), (2, -0.02), (3, 3.0)], Relation::Le, 0.0);
        lp.add(vec![(2, 1.0)], Relation::Le, 1.0);
        let (x, v) = optimal(lp.solve());
        assert!((v + 0.05).abs() < 1e-9, "value {v}, x {x:?}");
    }

    /// Brute-force vertex enumeration for tiny 2-variable programs.
    fn brute_min(lp: &LinearProgram) -> Option<f64> {
        let mut lines: Vec<(f64, f64, f64)> = lp
            .constraints
            .iter()
            .map(|c| {
                let mut a = [0.0; 2];
                for &(j, v) in &c.coefs {
                    a[j] += v;
                }
                (a[0], a[1], c.rhs)
            })
            .collect();
        for j in 0..2 {
            let mut a = [0.0; 2];
            a[j] = 1.0;
            lines.push((a[0], a[1], lp.lower[j]));
            lines.push((a[0], a[1], lp.upper[j]));
        }
        let mut best: Option<f64> = None;
        for p in 0..lines.len() {
            for q in p + 1..lines.len() {
                let (a1, b1, c1) = lines[p];
                let (a2, b2, c2) = lines[q];
                let det = a1 * b2 - a2 * b1;
                if det.abs() < 1e-12 || !c1.is_finite() || !c2.is_finite() {
                    continue;
                }
                let x = [(c1 * b2 - c2 * b1) / det, (a1 * c2 - a2 * c1) / det];
                if lp.max_violation(&x) < 1e-9 {
                    let v = lp.objective[0] * x[0] + lp.objective[1] * x[1];
                    best = Some(best.map_or(v, |b: f64| b.min(v)));
                }
            }
        }
        best
    }

    #[test]
    fn random_bounded_programs_match_vertex_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let mut lp = LinearProgram::new(2);
            lp.objective = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            lp.upper = vec![rng.random_range(0.5..5.0), rng.random_range(0.5..5.0)];
            for _ in 0..rng.random_range(1..5) {
                let rel = match rng.random_range(0..3) {
                    0 => Relation::Le,
                    1 => Relation::Ge,
                    _ => Relation::Eq,
                };
                lp.add(
                    vec![(0, rng.random_range(-2.0..2.0)), (1, rng.random_range(-2.0..2.0))],
                    rel,
                    rng.random_range(-2.0..3.0),
                );
            }
            let expected = brute_min(&lp);
            match (lp.solve(), expected) {
                (LpOutcome::Optimal { value, x }, Some(e)) => {
                    assert!((value - e).abs() < 1e-7, "{value} vs {e}");
                    assert!(lp.max_violation(&x) < 1e-7);
                }
                (LpOutcome::Infeasible, None) => {}
                (got, e) => panic!("mismatch: {got:?} vs {e:?} for {lp:?}"),
            }
        }
    }
}

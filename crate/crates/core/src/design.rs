//! Group-level design matrices and their alias structure.
//!
//! A [`DesignMatrix`] has one row per treatment group and one named column per
//! effect. Estimability of a linear combination of effects is decided by
//! row-space membership, and the least-squares estimator is reported as a
//! weight vector over groups.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative singular-value cutoff used for rank decisions.
pub const RANK_TOL: f64 = 1e-9;
/// Absolute tolerance for "sums to zero" on contrast weights.
pub const CONTRAST_TOL: f64 = 1e-12;
/// Threshold on |Σ h·ζ| above which a function is reported as aliased.
pub const ALIAS_TOL: f64 = 1e-9;

pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    group_labels: Vec<String>,
    columns: Vec<(String, Vec<f64>)>,
}

impl DesignMatrix {
    pub fn new(group_labels: Vec<String>, columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut design = DesignMatrix {
            group_labels,
            columns: Vec::with_capacity(columns.len()),
        };
        for (name, values) in columns {
            design.push_column(name, values)?;
        }
        Ok(design)
    }

    pub fn n_groups(&self) -> usize {
        self.group_labels.len()
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    pub fn columns(&self) -> &[(String, Vec<f64>)] {
        &self.columns
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|(n, _)| n == name)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Appends a column, enforcing length, unique names and the all-ones
    /// intercept convention.
    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.n_groups() {
            return Err(Error::DimensionMismatch {
                expected: self.n_groups(),
                found: values.len(),
            });
        }
        if self.column_index(&name).is_some() {
            return Err(invalid(format!("duplicate effect name `{name}`")));
        }
        if name == INTERCEPT && values.iter().any(|&v| v != 1.0) {
            return Err(invalid("intercept column must be all ones"));
        }
        self.columns.push((name, values));
        Ok(())
    }

    pub fn with_column(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        self.push_column(name, values)?;
        Ok(self)
    }

    /// Keeps the listed rows (0-based), in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_groups()) {
            return Err(invalid(format!("row {bad} out of range")));
        }
        Ok(DesignMatrix {
            group_labels: rows.iter().map(|&r| self.group_labels[r].clone()).collect(),
            columns: self
                .columns
                .iter()
                .map(|(n, v)| (n.clone(), rows.iter().map(|&r| v[r]).collect()))
                .collect(),
        })
    }

    /// G × C matrix with columns in declaration order.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_groups(), self.n_columns(), |g, c| self.columns[c].1[g])
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["group".to_string()];
        header.extend(self.columns.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for (g, label) in self.group_labels.iter().enumerate() {
            let mut row = vec![label.clone()];
            row.extend(self.columns.iter().map(|(_, v)| v[g].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.is_empty() {
            return Err(invalid("empty header"));
        }
        let names = &header[1..];
        let mut labels = Vec::new();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Parse {
                    row: row + 1,
                    column: "*".into(),
                    message: format!("expected {} fields, found {}", header.len(), rec.len()),
                });
            }
            labels.push(rec[0].to_string());
            for (c, name) in names.iter().enumerate() {
                let v: f64 = rec[c + 1].trim().parse().map_err(|_| Error::Parse {
                    row: row + 1,
                    column: name.clone(),
                    message: format!("not a number: `{}`", &rec[c + 1]),
                })?;
                values[c].push(v);
            }
        }
        DesignMatrix::new(labels, names.iter().cloned().zip(values).collect())
    }
}

/// Weights over groups that sum to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    weights: Vec<f64>,
}

impl Contrast {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        let scale = weights.iter().fold(1.0_f64, |m, w| m.max(w.abs()));
        if sum.abs() > CONTRAST_TOL * scale {
            return Err(invalid(format!("contrast weights sum to {sum}, not 0")));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(invalid("contrast has no nonzero weight"));
        }
        Ok(Contrast { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Rescaled so the positive weights sum to one.
    pub fn normalized(&self) -> Contrast {
        let pos: f64 = self.weights.iter().filter(|w| **w > 0.0).sum();
        Contrast {
            weights: self.weights.iter().map(|w| w / pos).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Contrast {
        Contrast {
            weights: self.weights.iter().map(|w| w * factor).collect(),
        }
    }

    /// True when `other` is a nonzero multiple of `self` within `tol`.
    pub fn is_proportional_to(&self, other: &[f64], tol: f64) -> bool {
        if other.len() != self.weights.len() {
            return false;
        }
        let (i, &pivot) = match self
            .weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        {
            Some(p) => p,
            None => return false,
        };
        if other[i] == 0.0 {
            return false;
        }
        let ratio = other[i] / pivot;
        self.weights
            .iter()
            .zip(other)
            .all(|(a, b)| (a * ratio - b).abs() <= tol * (1.0 + b.abs()))
    }
}

/// A linear relation Σ coef·column = 0 among named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dependency {
    pub terms: Vec<(String, f64)>,
}

impl Dependency {
    pub fn coefficient(&self, name: &str) -> f64 {
        self.terms
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| *c)
            .unwrap_or(0.0)
    }

    /// Evaluates the relation on the design's columns.
    pub fn residual(&self, design: &DesignMatrix) -> Result<Vec<f64>> {
        let mut out = vec![0.0; design.n_groups()];
        for (name, coef) in &self.terms {
            for (o, v) in out.iter_mut().zip(design.column(name)?) {
                *o += coef * v;
            }
        }
        Ok(out)
    }
}

impl std::fmt::Display for Dependency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, (name, c)) in self.terms.iter().enumerate() {
            let sign = if *c < 0.0 { "-" } else { "+" };
            if i == 0 {
                if *c < 0.0 {
                    write!(f, "-")?;
                }
            } else {
                write!(f, " {sign} ")?;
            }
            if (c.abs() - 1.0).abs() > 1e-12 {
                write!(f, "{}*", c.abs())?;
            }
            write!(f, "{name}")?;
        }
        write!(f, " = 0")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliasReport {
    pub estimable: bool,
    /// Least-squares weights on group means, present when estimable.
    pub weights: Option<Vec<f64>>,
    /// The same weights as a [`Contrast`] when they sum to zero.
    pub contrast: Option<Contrast>,
    pub dependencies: Vec<Dependency>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Orthogonality {
    pub value: f64,
    pub aliased: bool,
}

fn factor_name(j: usize) -> String {
    let mut name = String::new();
    let mut n = j;
    loop {
        name.insert(0, (b'A' + (n % 26) as u8) as char);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    name
}

/// Complete 2^k factorial in Yates order with the first factor varying
/// slowest; row 1 is all +1 and the last row all −1.
pub fn full_factorial(k: usize) -> Result<DesignMatrix> {
    if !(1..=20).contains(&k) {
        return Err(invalid(format!("number of factors must be in 1..=20, got {k}")));
    }
    let rows = 1usize << k;
    let labels = (1..=rows).map(|i| i.to_string()).collect();
    let columns = (0..k)
        .map(|j| {
            let shift = k - 1 - j;
            let col = (0..rows)
                .map(|i| if (i >> shift) & 1 == 0 { 1.0 } else { -1.0 })
                .collect();
            (factor_name(j), col)
        })
        .collect();
    DesignMatrix::new(labels, columns)
}

/// Elementwise product of the named columns.
pub fn interaction_column(design: &DesignMatrix, effect_names: &[&str]) -> Result<Vec<f64>> {
    let mut out = vec![1.0; design.n_groups()];
    for name in effect_names {
        for (o, v) in out.iter_mut().zip(design.column(name)?) {
            *o *= v;
        }
    }
    Ok(out)
}

struct Svd {
    u: DMatrix<f64>,
    sigma: DVector<f64>,
    v_t: DMatrix<f64>,
    rank: usize,
}

fn svd(m: &DMatrix<f64>) -> Svd {
    // nalgebra's thin SVD does not sort singular values; order them here.
    let decomposition = m.clone().svd(true, true);
    let u = decomposition.u.expect("u requested");
    let v_t = decomposition.v_t.expect("v_t requested");
    let sigma = decomposition.singular_values;
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v_t = DMatrix::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
    let sigma = DVector::from_iterator(order.len(), order.iter().map(|&i| sigma[i]));
    let cutoff = RANK_TOL * sigma.get(0).copied().unwrap_or(0.0);
    let rank = sigma.iter().filter(|&&s| s > cutoff && s > 0.0).count();
    Svd { u, sigma, v_t, rank }
}

/// Numerical rank with cutoff `RANK_TOL × σ_max`.
pub fn matrix_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    svd(m).rank
}

/// Basis of the right null space of `m` (columns of the returned matrix).
fn null_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let c = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::identity(c, c);
    }
    // Pad with zero rows so the thin SVD returns a full V.
    let padded = if m.nrows() < c {
        let mut p = DMatrix::zeros(c, c);
        p.view_mut((0, 0), (m.nrows(), c)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let s = svd(&padded);
    let v = s.v_t.transpose();
    v.columns(s.rank, c - s.rank).into_owned()
}

fn check_target(design: &DesignMatrix, target: &[f64]) -> Result<()> {
    if target.len() != design.n_columns() {
        return Err(Error::DimensionMismatch {
            expected: design.n_columns(),
            found: target.len(),
        });
    }
    Ok(())
}

/// Row-space membership decided by comparing ranks of `X` and `[X; λᵀ]`.
/// Kept as an independent route to cross-check [`estimable_contrast`].
pub fn is_estimable_by_rank(design: &DesignMatrix, target: &[f64]) -> Result<bool> {
    check_target(design, target)?;
    let x = design.matrix();
    let mut stacked = DMatrix::zeros(x.nrows() + 1, x.ncols());
    stacked.view_mut((0, 0), (x.nrows(), x.ncols())).copy_from(&x);
    for (c, &t) in target.iter().enumerate() {
        stacked[(x.nrows(), c)] = t;
    }
    Ok(matrix_rank(&stacked) == matrix_rank(&x))
}

/// Decides whether `target`·β is estimable and, if so, returns the
/// least-squares weights on group means. `replication` gives the number of
/// individuals per group (all ones when absent).
pub fn estimable_contrast(
    design: &DesignMatrix,
    target: &[f64],
    replication: Option<&[usize]>,
) -> Result<AliasReport> {
    check_target(design, target)?;
    let g = design.n_groups();
    let counts: Vec<f64> = match replication {
        Some(r) => {
            if r.len() != g {
                return Err(Error::DimensionMismatch {
                    expected: g,
                    found: r.len(),
                });
            }
            if r.contains(&0) {
                return Err(invalid("replication counts must be positive"));
            }
            r.iter().map(|&n| n as f64).collect()
        }
        None => vec![1.0; g],
    };
    let dependencies = alias_relations(design);
    let x = design.matrix();
    let lambda = DVector::from_column_slice(target);

    // Weighted least squares on group means is equivalent to ordinary least
    // squares on the replicated rows.
    let root_n = DVector::from_iterator(g, counts.iter().map(|n| n.sqrt()));
    let xw = DMatrix::from_fn(g, x.ncols(), |r, c| x[(r, c)] * root_n[r]);
    if x.ncols() == 0 {
        return Ok(AliasReport {
            estimable: false,
            weights: None,
            contrast: None,
            dependencies,
        });
    }
    let s = svd(&xw);
    let vr = s.v_t.rows(0, s.rank).transpose();
    let projected = &vr * (vr.transpose() * &lambda);
    let scale = lambda.amax().max(1.0);
    let estimable = (&projected - &lambda).amax() <= 1e-9 * scale;
    if !estimable {
        return Ok(AliasReport {
            estimable,
            weights: None,
            contrast: None,
            dependencies,
        });
    }
    // a = W (Xw⁺)ᵀ λ with Xw⁺ = V Σ⁻¹ Uᵀ.
    let ur = s.u.columns(0, s.rank);
    let inv_sigma = DVector::from_iterator(s.rank, (0..s.rank).map(|i| 1.0 / s.sigma[i]));
    let coef = (vr.transpose() * &lambda).component_mul(&inv_sigma);
    let a = ur * coef;
    let mut weights: Vec<f64> = (0..g).map(|r| a[r] * root_n[r]).collect();
    for w in &mut weights {
        *w = snap_rational(*w);
    }
    let contrast = Contrast::new(weights.clone()).ok();
    Ok(AliasReport {
        estimable,
        weights: Some(weights),
        contrast,
        dependencies,
    })
}

/// Integer designs have rational weights; recover the exact value when a
/// small denominator explains the float to within round-off.
fn snap_rational(w: f64) -> f64 {
    if w.abs() < 1e-14 {
        return 0.0;
    }
    for q in 1..=64 {
        let r = (w * q as f64).round() / q as f64;
        if (w - r).abs() <= 1e-10 * w.abs().max(1.0) {
            return r;
        }
    }
    w
}

/// Null-space basis of the columns as named relations. Each relation is
/// normalised to coefficient 1 on a pivot column, pivots chosen from the last
/// column backwards.
pub fn alias_relations(design: &DesignMatrix) -> Vec<Dependency> {
    let c = design.n_columns();
    if c == 0 {
        return Vec::new();
    }
    let basis = null_space(&design.matrix());
    let d = basis.ncols();
    if d == 0 {
        return Vec::new();
    }
    // Reduced row echelon form of basisᵀ (d × c), pivoting right to left.
    let mut m = basis.transpose();
    let mut pivot_row = 0;
    let mut pivots = Vec::new();
    for col in (0..c).rev() {
        if pivot_row == d {
            break;
        }
        let (best, val) = (pivot_row..d)
            .map(|r| (r, m[(r, col)].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        if val < 1e-10 {
            continue;
        }
        m.swap_rows(pivot_row, best);
        let p = m[(pivot_row, col)];
        for j in 0..c {
            m[(pivot_row, j)] /= p;
        }
        for r in 0..d {
            if r != pivot_row {
                let f = m[(r, col)];
                if f != 0.0 {
                    for j in 0..c {
                        m[(r, j)] -= f * m[(pivot_row, j)];
                    }
                }
            }
        }
        pivots.push(col);
        pivot_row += 1;
    }
    let names: Vec<&str> = design.column_names().collect();
    (0..pivot_row)
        .map(|r| {
            let mut terms: Vec<(String, f64)> = (0..c)
                .rev()
                .filter_map(|j| {
                    let v = m[(r, j)];
                    if v.abs() < 1e-10 {
                        return None;
                    }
                    let rounded = v.round();
                    let v = if (v - rounded).abs() < 1e-10 { rounded } else { v };
                    Some((names[j].to_string(), v))
                })
                .collect();
            terms.sort_by_key(|(n, _)| std::cmp::Reverse(design.column_index(n)));
            Dependency { terms }
        })
        .collect()
}

/// Σ_g h_g ζ_g, flagged as aliased when its magnitude exceeds [`ALIAS_TOL`].
pub fn contrast_orthogonality(h: &Contrast, zeta: &[f64]) -> Result<Orthogonality> {
    if zeta.len() != h.len() {
        return Err(Error::DimensionMismatch {
            expected: h.len(),
            found: zeta.len(),
        });
    }
    let value: f64 = h.weights().iter().zip(zeta).map(|(a, b)| a * b).sum();
    Ok(Orthogonality {
        value,
        aliased: value.abs() > ALIAS_TOL,
    })
}

/// Reference designs used throughout the library.
pub mod reference {
    use super::*;

    /// Rows 1, 4, 6, 7 of the complete 2³ factorial.
    pub fn half_fraction() -> DesignMatrix {
        full_factorial(3)
            .and_then(|d| d.select_rows(&[0, 3, 5, 6]))
            .expect("static design")
    }

    /// Four-cell difference-in-differences design with the treatment column
    /// coded (0, 0, 0, 1) for ineligible/eligible × before/after.
    pub fn difference_in_differences() -> DesignMatrix {
        DesignMatrix::new(
            vec![
                "ineligible-before".into(),
                "eligible-before".into(),
                "ineligible-after".into(),
                "eligible-after".into(),
            ],
            vec![
                (INTERCEPT.into(), vec![1.0; 4]),
                ("eligible".into(), vec![-1.0, 1.0, -1.0, 1.0]),
                ("time".into(), vec![-1.0, -1.0, 1.0, 1.0]),
                ("treatment".into(), vec![0.0, 0.0, 0.0, 1.0]),
            ],
        )
        .expect("static design")
    }

    /// Same design with the ±1 treatment coding (0, 0, −1, 1).
    pub fn difference_in_differences_signed() -> DesignMatrix {
        DesignMatrix::new(
            difference_in_differences().group_labels().to_vec(),
            vec![
                (INTERCEPT.into(), vec![1.0; 4]),
                ("eligible".into(), vec![-1.0, 1.0, -1.0, 1.0]),
                ("time".into(), vec![-1.0, -1.0, 1.0, 1.0]),
                ("treatment".into(), vec![0.0, 0.0, -1.0, 1.0]),
            ],
        )
        .expect("static design")
    }

    pub const GROUP_LABELS: [&str; 8] = ["~BR", "~Br", "~bR", "~br", "BR", "Br", "bR", "br"];

    /// Eight-group design: intercept, B/b, R/r, LE (w′), IU (w″), TIME (w‴).
    pub fn benefit_design() -> DesignMatrix {
        DesignMatrix::new(
            GROUP_LABELS.iter().map(|s| s.to_string()).collect(),
            vec![
                (INTERCEPT.into(), vec![1.0; 8]),
                ("B/b".into(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, -1.0, -1.0]),
                ("R/r".into(), vec![0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 1.0, -1.0]),
                ("LE".into(), vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0]),
                ("IU".into(), vec![1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0]),
                ("TIME".into(), vec![-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0]),
            ],
        )
        .expect("static design")
    }

    /// The difference-in-differences contrast for the B/b effect.
    pub fn benefit_contrast() -> Contrast {
        Contrast::new(vec![-0.25, -0.25, 0.25, 0.25, 0.25, 0.25, -0.25, -0.25])
            .expect("static contrast")
    }
}

#[cfg(test)]
mod tests {
    use super::reference::*;
    use super::*;

    fn coef(design: &DesignMatrix, name: &str) -> Vec<f64> {
        design
            .column_names()
            .map(|n| if n == name { 1.0 } else { 0.0 })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn factorial_rows_follow_yates_order() {
        let d = full_factorial(3).unwrap();
        let row = |i: usize| d.columns().iter().map(|(_, v)| v[i]).collect::<Vec<_>>();
        assert_eq!(d.n_groups(), 8);
        assert_eq!(row(0), vec![1.0, 1.0, 1.0]);
        assert_eq!(row(7), vec![-1.0, -1.0, -1.0]);
        assert_eq!(row(5), vec![-1.0, 1.0, -1.0]);

        let one = full_factorial(1).unwrap();
        assert_eq!(one.column("A").unwrap(), &[1.0, -1.0]);

        let two = full_factorial(2).unwrap();
        assert_eq!(two.column("A").unwrap(), &[1.0, 1.0, -1.0, -1.0]);
        assert_eq!(two.column("B").unwrap(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn factorial_rejects_out_of_range() {
        assert!(full_factorial(0).is_err());
        assert!(full_factorial(21).is_err());
    }

    #[test]
    fn design_matrix_invariants_enforced() {
        let labels = vec!["a".to_string(), "b".to_string()];
        assert!(DesignMatrix::new(labels.clone(), vec![("x".into(), vec![1.0])]).is_err());
        assert!(DesignMatrix::new(
            labels.clone(),
            vec![("x".into(), vec![1.0, 2.0]), ("x".into(), vec![1.0, 2.0])]
        )
        .is_err());
        assert!(DesignMatrix::new(labels, vec![(INTERCEPT.into(), vec![1.0, 0.0])]).is_err());
    }

    #[test]
    fn half_fraction_aliases_c_with_ab() {
        let d = half_fraction();
        let ab = interaction_column(&d, &["A", "B"]).unwrap();
        assert_eq!(ab, vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(d.column("C").unwrap(), ab.as_slice());
        let a = d.column("A").unwrap().to_vec();
        let with_one = d.clone().with_column(INTERCEPT, vec![1.0; 4]).unwrap();
        assert_eq!(interaction_column(&with_one, &["A", INTERCEPT]).unwrap(), a);
    }

    #[test]
    fn interaction_column_unknown_name() {
        let d = half_fraction();
        assert!(matches!(
            interaction_column(&d, &["A", "Z"]),
            Err(Error::UnknownName(_))
        ));
    }

    #[test]
    fn le_by_time_column_on_benefit_design() {
        let d = benefit_design();
        let col = interaction_column(&d, &["LE", "TIME"]).unwrap();
        assert_eq!(col, vec![-1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn half_fraction_main_effect_weights() {
        // The factorial effect of a ±1 factor is high minus low, i.e. 2β.
        let d = half_fraction();
        let r = estimable_contrast(&d, &[2.0, 0.0, 0.0], None).unwrap();
        assert!(r.estimable);
        assert_close(r.weights.as_ref().unwrap(), &[0.5, 0.5, -0.5, -0.5], 1e-12);
        let full = full_factorial(3).unwrap();
        let r = estimable_contrast(&full, &[2.0, 0.0, 0.0], None).unwrap();
        let quarter = [0.25, 0.25, 0.25, 0.25, -0.25, -0.25, -0.25, -0.25];
        assert_close(r.weights.as_ref().unwrap(), &quarter, 1e-12);
    }

    #[test]
    fn did_treatment_contrast_proportional_to_h() {
        let h = Contrast::new(vec![0.5, -0.5, -0.5, 0.5]).unwrap();
        for d in [difference_in_differences(), difference_in_differences_signed()] {
            let r = estimable_contrast(&d, &coef(&d, "treatment"), None).unwrap();
            assert!(r.estimable);
            assert!(h.is_proportional_to(r.contrast.unwrap().weights(), 1e-9));
        }
        let d = difference_in_differences();
        let r = estimable_contrast(&d, &coef(&d, "treatment"), None).unwrap();
        assert_close(r.weights.as_ref().unwrap(), &[1.0, -1.0, -1.0, 1.0], 1e-12);
    }

    #[test]
    fn did_treatment_aliased_by_eligibility_time_interaction() {
        let d = difference_in_differences();
        let inter = interaction_column(&d, &["eligible", "time"]).unwrap();
        let d = d.with_column("eligible*time", inter).unwrap();
        let r = estimable_contrast(&d, &coef(&d, "treatment"), None).unwrap();
        assert!(!r.estimable);
        assert!(r.contrast.is_none());
        assert_eq!(r.dependencies.len(), 1);
    }

    #[test]
    fn did_contrast_is_replication_invariant() {
        let d = difference_in_differences();
        let r = estimable_contrast(&d, &coef(&d, "treatment"), Some(&[3, 10, 7, 1])).unwrap();
        assert_close(r.weights.as_ref().unwrap(), &[1.0, -1.0, -1.0, 1.0], 1e-9);
    }

    #[test]
    fn benefit_design_full_rank_and_le_time_dependency() {
        let d = benefit_design();
        assert!(alias_relations(&d).is_empty());
        assert_eq!(matrix_rank(&d.matrix()), 6);

        let le_time = interaction_column(&d, &["LE", "TIME"]).unwrap();
        let aug = d.clone().with_column("LE*TIME", le_time).unwrap();
        let deps = alias_relations(&aug);
        assert_eq!(deps.len(), 1);
        let dep = &deps[0];
        assert_eq!(dep.coefficient("LE*TIME"), 1.0);
        assert_eq!(dep.coefficient("R/r"), -2.0);
        assert_eq!(dep.coefficient("LE"), 1.0);
        assert_eq!(dep.coefficient("B/b"), 0.0);
        assert!(dep.residual(&aug).unwrap().iter().all(|v| v.abs() < 1e-9));
        assert_eq!(dep.to_string(), "LE*TIME + LE - 2*R/r = 0");

        let h = benefit_contrast();
        for design in [&d, &aug] {
            let r = estimable_contrast(design, &coef(design, "B/b"), None).unwrap();
            assert!(r.estimable);
            assert_close(r.weights.as_ref().unwrap(), h.weights(), 1e-12);
        }
    }

    #[test]
    fn duplicate_column_reported() {
        let d = half_fraction()
            .with_column("A2", vec![1.0, 1.0, -1.0, -1.0])
            .unwrap();
        let deps = alias_relations(&d);
        assert_eq!(deps.len(), 1);
        assert_eq!(deps[0].coefficient("A2"), 1.0);
        assert_eq!(deps[0].coefficient("A"), -1.0);
    }

    #[test]
    fn orthogonality_of_benefit_contrast() {
        let d = benefit_design();
        let h = benefit_contrast();
        let le_time = interaction_column(&d, &["LE", "TIME"]).unwrap();
        let iu_time = interaction_column(&d, &["IU", "TIME"]).unwrap();
        let r = contrast_orthogonality(&h, &le_time).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(!r.aliased);
        let r = contrast_orthogonality(&h, &iu_time).unwrap();
        assert_eq!(r.value, 2.0);
        assert!(r.aliased);
        let r = contrast_orthogonality(&h, &[1.0; 8]).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(contrast_orthogonality(&h, &[1.0; 3]).is_err());
    }

    #[test]
    fn estimable_dimension_mismatch() {
        let d = half_fraction();
        assert!(matches!(
            estimable_contrast(&d, &[1.0], None),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(estimable_contrast(&d, &[1.0, 0.0, 0.0], Some(&[1, 1])).is_err());
    }

    #[test]
    fn contrast_validation() {
        assert!(Contrast::new(vec![1.0, 1.0]).is_err());
        assert!(Contrast::new(vec![0.0, 0.0]).is_err());
        assert!(Contrast::new(vec![1.0, -1.0]).is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let d = benefit_design()
            .with_column("odd", vec![0.1, 1.0 / 3.0, -2.5e-7, 1e300, 0.0, -0.0, 7.0, 3.25])
            .unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = DesignMatrix::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, d);
        let mut again = Vec::new();
        back.write_csv(&mut again).unwrap();
        assert_eq!(buf, again);
    }
}

//! Compilation of scalar and matrix sum-of-squares constraints into
//! semidefinite programs.
//!
//! A constraint asks that a polynomial (or polynomial matrix) whose
//! coefficients are affine in decision variables be nonnegative (resp.
//! positive semidefinite) on a box region. The compiler subtracts
//! Gram-parameterized region multipliers, introduces one Gram matrix for the
//! residual — over the monomial basis up to half the constraint degree,
//! tensored with the vector index for matrix constraints — and emits
//! coefficient-matching equalities so the identity holds monomial by
//! monomial. The output is a plain semidefinite program: symmetric PSD
//! variables, signed scalar variables, sparse equalities and an optional
//! linear objective.

use crate::polyalg::{Monomial, Polynomial};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SosError {
    #[error("constraint degree {0} is odd; no sum-of-squares representation exists")]
    OddDegree(usize),
    #[error("matrix constraint asymmetric: max |M - Mᵀ| entry {0:.3e} exceeds 1e-10")]
    Asymmetric(f64),
    #[error("matrix constraint must be square, got {rows}×{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("constraint kind does not match the compile entry point")]
    KindMismatch,
    #[error("expression degree {got} exceeds the declared bound {bound}")]
    DegreeBound { got: usize, bound: usize },
    #[error("multiplier degree {0} must be even")]
    OddMultiplierDegree(usize),
    #[error("duplicate variable name '{0}'")]
    DuplicateVariable(String),
}

/// Reference to a declared SDP variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarRef {
    Psd(usize),
    Scalar(usize),
}

/// One entry of a sparse linear functional: `coeff · V[row, col]` where `V`
/// is the referenced variable (row = col = 0 for scalars; PSD entries are
/// symmetric, so (row, col) and (col, row) address the same value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub var: VarRef,
    pub row: usize,
    pub col: usize,
    pub coeff: f64,
}

impl Term {
    pub fn psd(var: usize, row: usize, col: usize, coeff: f64) -> Self {
        let (r, c) = if row <= col { (row, col) } else { (col, row) };
        Term { var: VarRef::Psd(var), row: r, col: c, coeff }
    }

    pub fn scalar(var: usize, coeff: f64) -> Self {
        Term { var: VarRef::Scalar(var), row: 0, col: 0, coeff }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsdVar {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarSign {
    Nonneg,
    Free,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalarVar {
    pub name: String,
    pub sign: ScalarSign,
}

/// A sparse linear equality `Σ terms = rhs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearEq {
    pub label: String,
    pub terms: Vec<Term>,
    pub rhs: f64,
}

/// A semidefinite program over symmetric PSD matrix variables and signed
/// scalars, with sparse equality constraints and an optional linear objective
/// (always minimization).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SdpProblem {
    pub psd_vars: Vec<PsdVar>,
    pub scalar_vars: Vec<ScalarVar>,
    pub equalities: Vec<LinearEq>,
    pub objective: Option<Vec<Term>>,
    pub metadata: BTreeMap<String, String>,
}

impl SdpProblem {
    pub fn new() -> Self {
        SdpProblem::default()
    }

    pub fn add_psd_var(&mut self, name: &str, dim: usize) -> usize {
        assert!(
            self.psd_vars.iter().all(|v| v.name != name),
            "duplicate PSD variable '{name}'"
        );
        assert!(dim > 0);
        self.psd_vars.push(PsdVar { name: name.to_string(), dim });
        self.psd_vars.len() - 1
    }

    pub fn add_scalar_var(&mut self, name: &str, sign: ScalarSign) -> usize {
        assert!(
            self.scalar_vars.iter().all(|v| v.name != name),
            "duplicate scalar variable '{name}'"
        );
        self.scalar_vars.push(ScalarVar { name: name.to_string(), sign });
        self.scalar_vars.len() - 1
    }

    /// Append an equality, merging duplicate entries and dropping zeros.
    pub fn add_equality(&mut self, label: &str, terms: Vec<Term>, rhs: f64) {
        let mut merged: BTreeMap<(VarRef, usize, usize), f64> = BTreeMap::new();
        for t in terms {
            debug_assert!(self.term_in_range(&t), "equality references undeclared variable");
            let (r, c) = if t.row <= t.col { (t.row, t.col) } else { (t.col, t.row) };
            *merged.entry((t.var, r, c)).or_insert(0.0) += t.coeff;
        }
        let terms: Vec<Term> = merged
            .into_iter()
            .filter(|&(_, coeff)| coeff != 0.0)
            .map(|((var, row, col), coeff)| Term { var, row, col, coeff })
            .collect();
        self.equalities.push(LinearEq { label: label.to_string(), terms, rhs });
    }

    fn term_in_range(&self, t: &Term) -> bool {
        match t.var {
            VarRef::Psd(i) => {
                i < self.psd_vars.len()
                    && t.row < self.psd_vars[i].dim
                    && t.col < self.psd_vars[i].dim
            }
            VarRef::Scalar(i) => i < self.scalar_vars.len() && t.row == 0 && t.col == 0,
        }
    }

    /// Set the minimization objective.
    pub fn minimize(&mut self, terms: Vec<Term>) {
        self.objective = Some(terms);
    }

    pub fn psd_index(&self, name: &str) -> Option<usize> {
        self.psd_vars.iter().position(|v| v.name == name)
    }

    pub fn scalar_index(&self, name: &str) -> Option<usize> {
        self.scalar_vars.iter().position(|v| v.name == name)
    }

    pub fn var_name(&self, var: VarRef) -> &str {
        match var {
            VarRef::Psd(i) => &self.psd_vars[i].name,
            VarRef::Scalar(i) => &self.scalar_vars[i].name,
        }
    }

    /// Total number of scalar unknowns: upper triangles of PSD variables plus
    /// scalars. The complexity benchmarks record this count.
    pub fn scalar_unknowns(&self) -> usize {
        self.psd_vars.iter().map(|v| v.dim * (v.dim + 1) / 2).sum::<usize>()
            + self.scalar_vars.len()
    }

    /// Sparse text dump: one line per nonzero, `(constraint, var, row, col,
    /// value)`; right-hand sides use the pseudo-variable `rhs` and the
    /// objective the pseudo-constraint `objective`.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        for eq in &self.equalities {
            for t in &eq.terms {
                out.push_str(&format!(
                    "({}, {}, {}, {}, {:.17e})\n",
                    eq.label,
                    self.var_name(t.var),
                    t.row,
                    t.col,
                    t.coeff
                ));
            }
            if eq.rhs != 0.0 {
                out.push_str(&format!("({}, rhs, 0, 0, {:.17e})\n", eq.label, eq.rhs));
            }
        }
        if let Some(obj) = &self.objective {
            for t in obj {
                out.push_str(&format!(
                    "(objective, {}, {}, {}, {:.17e})\n",
                    self.var_name(t.var),
                    t.row,
                    t.col,
                    t.coeff
                ));
            }
        }
        out
    }
}

/// An affine expression `constant + Σ coeff·entry` over SDP variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub constant: f64,
    pub terms: Vec<Term>,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        LinExpr { constant: c, terms: Vec::new() }
    }

    pub fn term(t: Term) -> Self {
        LinExpr { constant: 0.0, terms: vec![t] }
    }

    pub fn add(&mut self, other: &LinExpr, scale: f64) {
        self.constant += scale * other.constant;
        self.terms.extend(other.terms.iter().map(|t| Term { coeff: scale * t.coeff, ..*t }));
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.terms.iter().all(|t| t.coeff == 0.0)
    }

    pub fn scaled(&self, s: f64) -> LinExpr {
        LinExpr {
            constant: self.constant * s,
            terms: self.terms.iter().map(|t| Term { coeff: t.coeff * s, ..*t }).collect(),
        }
    }
}

/// A polynomial in `x` whose coefficients are affine in SDP variables.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyExpr {
    pub nvars: usize,
    pub coeffs: BTreeMap<Monomial, LinExpr>,
}

impl PolyExpr {
    pub fn zero(nvars: usize) -> Self {
        PolyExpr { nvars, coeffs: BTreeMap::new() }
    }

    pub fn from_poly(p: &Polynomial) -> Self {
        let mut e = PolyExpr::zero(p.nvars);
        for (m, &c) in &p.terms {
            e.add_constant(m.clone(), c);
        }
        e
    }

    pub fn add_constant(&mut self, mono: Monomial, c: f64) {
        self.coeffs.entry(mono).or_insert_with(|| LinExpr::constant(0.0)).constant += c;
    }

    pub fn add_term(&mut self, mono: Monomial, t: Term) {
        self.coeffs.entry(mono).or_insert_with(|| LinExpr::constant(0.0)).terms.push(t);
    }

    pub fn add_expr(&mut self, other: &PolyExpr, scale: f64) {
        for (m, le) in &other.coeffs {
            self.coeffs
                .entry(m.clone())
                .or_insert_with(|| LinExpr::constant(0.0))
                .add(le, scale);
        }
    }

    /// Multiply by a constant-coefficient polynomial (stays affine).
    pub fn mul_poly(&self, p: &Polynomial) -> PolyExpr {
        let mut out = PolyExpr::zero(self.nvars);
        for (m1, le) in &self.coeffs {
            for (m2, &c) in &p.terms {
                let m = m1.mul(m2);
                out.coeffs
                    .entry(m)
                    .or_insert_with(|| LinExpr::constant(0.0))
                    .add(le, c);
            }
        }
        out
    }

    pub fn degree(&self) -> usize {
        self.coeffs
            .iter()
            .filter(|(_, le)| !le.is_zero())
            .map(|(m, _)| m.degree() as usize)
            .max()
            .unwrap_or(0)
    }

    /// Evaluate the affine coefficients at a solved variable assignment.
    pub fn eval_at_solution(&self, sol: &dyn Fn(VarRef, usize, usize) -> f64) -> Polynomial {
        let mut p = Polynomial::zero(self.nvars);
        for (m, le) in &self.coeffs {
            let mut v = le.constant;
            for t in &le.terms {
                v += t.coeff * sol(t.var, t.row, t.col);
            }
            p.add_term(m.clone(), v);
        }
        p
    }
}

/// A matrix of [`PolyExpr`] entries (row-major).
#[derive(Debug, Clone)]
pub struct PolyMatExpr {
    pub rows: usize,
    pub cols: usize,
    pub nvars: usize,
    pub entries: Vec<PolyExpr>,
}

impl PolyMatExpr {
    pub fn zeros(rows: usize, cols: usize, nvars: usize) -> Self {
        PolyMatExpr {
            rows,
            cols,
            nvars,
            entries: vec![PolyExpr::zero(nvars); rows * cols],
        }
    }

    pub fn from_const(m: &DMatrix<f64>, nvars: usize) -> Self {
        let mut out = PolyMatExpr::zeros(m.nrows(), m.ncols(), nvars);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    out.entry_mut(i, j).add_constant(Monomial::one(nvars), m[(i, j)]);
                }
            }
        }
        out
    }

    pub fn entry(&self, i: usize, j: usize) -> &PolyExpr {
        &self.entries[i * self.cols + j]
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut PolyExpr {
        &mut self.entries[i * self.cols + j]
    }

    pub fn degree(&self) -> usize {
        self.entries.iter().map(PolyExpr::degree).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SosKind {
    Scalar,
    Matrix,
}

/// A sum-of-squares constraint: `expr ⪰ 0` (entrywise scalar or as a matrix)
/// for all `x` in the region described by the nonneg polynomials `region`.
#[derive(Debug, Clone)]
pub struct SosConstraint {
    pub expr: PolyMatExpr,
    /// Region description `b_k(x) ≥ 0`; empty means all of ℝⁿ.
    pub region: Vec<Polynomial>,
    /// Even degree of the region multipliers (0 = constant nonneg scalars).
    pub multiplier_degree: usize,
    pub kind: SosKind,
    /// Optional assertion on the expression degree; compilation fails loudly
    /// if any entry exceeds it.
    pub expected_max_degree: Option<usize>,
}

impl SosConstraint {
    pub fn scalar(expr: PolyExpr, region: Vec<Polynomial>, multiplier_degree: usize) -> Self {
        let nvars = expr.nvars;
        let mat = PolyMatExpr { rows: 1, cols: 1, nvars, entries: vec![expr] };
        SosConstraint {
            expr: mat,
            region,
            multiplier_degree,
            kind: SosKind::Scalar,
            expected_max_degree: None,
        }
    }

    pub fn matrix(expr: PolyMatExpr, region: Vec<Polynomial>, multiplier_degree: usize) -> Self {
        SosConstraint {
            expr,
            region,
            multiplier_degree,
            kind: SosKind::Matrix,
            expected_max_degree: None,
        }
    }

    pub fn with_degree_bound(mut self, bound: usize) -> Self {
        self.expected_max_degree = Some(bound);
        self
    }
}

/// Handle to a compiled constraint: its Gram variable, multiplier variables
/// and the bases needed to reconstruct the certified polynomial.
#[derive(Debug, Clone)]
pub struct CompiledSos {
    pub tag: String,
    pub gram_var: usize,
    pub basis: Vec<Monomial>,
    pub block_size: usize,
    pub multipliers: Vec<CompiledMultiplier>,
    pub n_equalities: usize,
}

#[derive(Debug, Clone)]
pub struct CompiledMultiplier {
    pub var: VarRef,
    /// Gram basis for degree ≥ 2 multipliers; `None` for constant ones.
    pub basis: Option<Vec<Monomial>>,
    /// The region polynomial this multiplier is attached to.
    pub region_poly: Polynomial,
}

/// All monomials in `nvars` variables with degree in `0..=max_degree`.
pub fn monomials_up_to(nvars: usize, max_degree: usize) -> Vec<Monomial> {
    let mut out = vec![Monomial::one(nvars)];
    let mut frontier = vec![Monomial::one(nvars)];
    for _ in 0..max_degree {
        let mut next = Vec::new();
        for m in &frontier {
            // Extend on the last incremented variable onward to avoid
            // duplicates.
            let start = m
                .exponents
                .iter()
                .rposition(|&e| e > 0)
                .unwrap_or(0);
            for v in start..nvars {
                let mut e = m.exponents.clone();
                e[v] += 1;
                next.push(Monomial::new(e));
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out.sort();
    out.dedup();
    out
}

pub fn compile_scalar_sos(
    problem: &mut SdpProblem,
    c: &SosConstraint,
    tag: &str,
) -> Result<CompiledSos, SosError> {
    if c.kind != SosKind::Scalar {
        return Err(SosError::KindMismatch);
    }
    compile(problem, c, tag)
}

pub fn compile_matrix_sos(
    problem: &mut SdpProblem,
    c: &SosConstraint,
    tag: &str,
) -> Result<CompiledSos, SosError> {
    if c.kind != SosKind::Matrix {
        return Err(SosError::KindMismatch);
    }
    compile(problem, c, tag)
}

/// Multiplier degree escalation: +2 up to the cap (default 4).
pub fn escalate_multiplier_degree(current: usize, cap: usize) -> Option<usize> {
    if current + 2 <= cap {
        Some(current + 2)
    } else {
        None
    }
}

fn compile(
    problem: &mut SdpProblem,
    c: &SosConstraint,
    tag: &str,
) -> Result<CompiledSos, SosError> {
    if c.expr.rows != c.expr.cols {
        return Err(SosError::NotSquare { rows: c.expr.rows, cols: c.expr.cols });
    }
    if c.multiplier_degree % 2 != 0 {
        return Err(SosError::OddMultiplierDegree(c.multiplier_degree));
    }
    let s = c.expr.rows;
    let nvars = c.expr.nvars;
    let expr_degree = c.expr.degree();
    if let Some(bound) = c.expected_max_degree {
        if expr_degree > bound {
            return Err(SosError::DegreeBound { got: expr_degree, bound });
        }
    }

    // Symmetrize (M + Mᵀ)/2, guarding against real asymmetry.
    let mut target = PolyMatExpr::zeros(s, s, nvars);
    let mut max_dev: f64 = 0.0;
    for i in 0..s {
        for j in 0..s {
            let mut sym = c.expr.entry(i, j).clone();
            sym.add_expr(c.expr.entry(j, i), 1.0);
            for (m, le) in &sym.coeffs {
                // Deviation of M_ij from M_ji, measured on constants and on
                // each variable coefficient.
                let a = c.expr.entry(i, j).coeffs.get(m);
                let b = c.expr.entry(j, i).coeffs.get(m);
                max_dev = max_dev.max(coeff_gap(a, b));
                let _ = le;
            }
            *target.entry_mut(i, j) = scale_expr(sym, 0.5);
        }
    }
    if max_dev > 1e-10 {
        return Err(SosError::Asymmetric(max_dev));
    }

    // Region multipliers: σ_k(x)·b_k(x) subtracted from the diagonal.
    let mut multipliers = Vec::new();
    for (k, b_k) in c.region.iter().enumerate() {
        let (var, basis, sigma) = if c.multiplier_degree == 0 {
            let idx = problem.add_scalar_var(&format!("{tag}.mult{k}"), ScalarSign::Nonneg);
            let mut sigma = PolyExpr::zero(nvars);
            sigma.add_term(Monomial::one(nvars), Term::scalar(idx, 1.0));
            (VarRef::Scalar(idx), None, sigma)
        } else {
            let mb = monomials_up_to(nvars, c.multiplier_degree / 2);
            let idx = problem.add_psd_var(&format!("{tag}.mult{k}"), mb.len());
            let mut sigma = PolyExpr::zero(nvars);
            for (ai, a) in mb.iter().enumerate() {
                for (bi, b) in mb.iter().enumerate() {
                    sigma.add_term(a.mul(b), Term::psd(idx, ai, bi, 1.0));
                }
            }
            (VarRef::Psd(idx), Some(mb), sigma)
        };
        let prod = sigma.mul_poly(b_k);
        for i in 0..s {
            target.entry_mut(i, i).add_expr(&prod, -1.0);
        }
        multipliers.push(CompiledMultiplier { var, basis, region_poly: b_k.clone() });
    }

    let degree = target.degree();
    if degree % 2 != 0 {
        return Err(SosError::OddDegree(degree));
    }
    let basis = monomials_up_to(nvars, degree / 2);
    let bx = basis.len();
    let gram_dim = bx * s;
    let gram_var = problem.add_psd_var(&format!("{tag}.gram"), gram_dim);

    // Match coefficients of x^m·v_i·v_j between zᵀQz and the target.
    // Gram index layout: (monomial a, vector index i) → a·s + i.
    let mut buckets: BTreeMap<(Monomial, usize, usize), BTreeMap<(usize, usize), f64>> =
        BTreeMap::new();
    for (ai, a) in basis.iter().enumerate() {
        for (bi, b) in basis.iter().enumerate() {
            let m = a.mul(b);
            for i in 0..s {
                for j in 0..s {
                    let g1 = ai * s + i;
                    let g2 = bi * s + j;
                    let key = (m.clone(), i.min(j), i.max(j));
                    let entry = (g1.min(g2), g1.max(g2));
                    *buckets.entry(key).or_default().entry(entry).or_insert(0.0) += 1.0;
                }
            }
        }
    }
    // Monomials present in the target but unreachable by the basis would be
    // silently dropped; collect them too so the equality 0 = coeff is emitted.
    for i in 0..s {
        for j in i..s {
            for (m, le) in &target.entry(i, j).coeffs {
                if !le.is_zero() {
                    buckets.entry((m.clone(), i, j)).or_default();
                }
            }
        }
    }

    let mut n_equalities = 0;
    for ((m, i, j), gram_entries) in buckets {
        let factor = if i == j { 1.0 } else { 2.0 };
        let mut terms: Vec<Term> = gram_entries
            .into_iter()
            .map(|((r, cidx), count)| Term::psd(gram_var, r, cidx, count))
            .collect();
        let mut rhs = 0.0;
        if let Some(le) = target.entry(i, j).coeffs.get(&m) {
            rhs = factor * le.constant;
            terms.extend(le.terms.iter().map(|t| Term { coeff: -factor * t.coeff, ..*t }));
        }
        problem.add_equality(&format!("{tag}[{i},{j}]:{m}"), terms, rhs);
        n_equalities += 1;
    }

    Ok(CompiledSos {
        tag: tag.to_string(),
        gram_var,
        basis,
        block_size: s,
        multipliers,
        n_equalities,
    })
}

fn coeff_gap(a: Option<&LinExpr>, b: Option<&LinExpr>) -> f64 {
    let za = LinExpr::constant(0.0);
    let a = a.unwrap_or(&za);
    let mut gap: f64 = match b {
        Some(b) => (a.constant - b.constant).abs(),
        None => a.constant.abs(),
    };
    // Compare variable coefficients entry-wise.
    let mut amap: BTreeMap<(VarRef, usize, usize), f64> = BTreeMap::new();
    for t in &a.terms {
        *amap.entry((t.var, t.row.min(t.col), t.row.max(t.col))).or_insert(0.0) += t.coeff;
    }
    if let Some(b) = b {
        for t in &b.terms {
            *amap.entry((t.var, t.row.min(t.col), t.row.max(t.col))).or_insert(0.0) -= t.coeff;
        }
    }
    for (_, v) in amap {
        gap = gap.max(v.abs());
    }
    gap
}

fn scale_expr(mut e: PolyExpr, s: f64) -> PolyExpr {
    for (_, le) in e.coeffs.iter_mut() {
        *le = le.scaled(s);
    }
    e
}

/// Reconstruct entry `(i, j)` of the certified matrix from a solved Gram
/// matrix plus the multiplier add-back — the round-trip check against the
/// original expression.
pub fn reconstruct_entry(
    handle: &CompiledSos,
    i: usize,
    j: usize,
    sol: &dyn Fn(VarRef, usize, usize) -> f64,
) -> Polynomial {
    let s = handle.block_size;
    let nvars = handle.basis.first().map(Monomial::nvars).unwrap_or(0);
    let mut p = Polynomial::zero(nvars);
    for (ai, a) in handle.basis.iter().enumerate() {
        for (bi, b) in handle.basis.iter().enumerate() {
            let q = sol(VarRef::Psd(handle.gram_var), ai * s + i, bi * s + j);
            if q != 0.0 {
                p.add_term(a.mul(b), q);
            }
        }
    }
    // Multipliers act on the diagonal only.
    if i == j {
        for m in &handle.multipliers {
            let sigma = match (&m.var, &m.basis) {
                (VarRef::Scalar(_), _) => {
                    Polynomial::constant(nvars, sol(m.var, 0, 0))
                }
                (VarRef::Psd(_), Some(mb)) => {
                    let mut sp = Polynomial::zero(nvars);
                    for (ai, a) in mb.iter().enumerate() {
                        for (bi, b) in mb.iter().enumerate() {
                            sp.add_term(a.mul(b), sol(m.var, ai, bi));
                        }
                    }
                    sp
                }
                _ => unreachable!("degree ≥ 2 multiplier always has a basis"),
            };
            p = p.add(&sigma.mul(&m.region_poly));
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyalg::Monomial;

    fn x_poly(coeffs: &[(u32, f64)]) -> PolyExpr {
        let mut p = PolyExpr::zero(1);
        for &(e, c) in coeffs {
            p.add_constant(Monomial::new(vec![e]), c);
        }
        p
    }

    #[test]
    fn monomial_basis_counts() {
        assert_eq!(monomials_up_to(1, 2).len(), 3); // 1, x, x²
        assert_eq!(monomials_up_to(2, 1).len(), 3); // 1, x1, x2
        assert_eq!(monomials_up_to(2, 2).len(), 6);
        assert_eq!(monomials_up_to(3, 2).len(), 10);
    }

    #[test]
    fn odd_degree_rejected_before_solving() {
        let mut p = SdpProblem::new();
        let c = SosConstraint::scalar(x_poly(&[(3, 1.0)]), vec![], 0);
        match compile_scalar_sos(&mut p, &c, "odd") {
            Err(SosError::OddDegree(3)) => {}
            other => panic!("expected odd-degree error, got {other:?}"),
        }
    }

    #[test]
    fn kind_mismatch_rejected() {
        let mut p = SdpProblem::new();
        let c = SosConstraint::scalar(x_poly(&[(2, 1.0)]), vec![], 0);
        assert!(matches!(compile_matrix_sos(&mut p, &c, "k"), Err(SosError::KindMismatch)));
    }

    #[test]
    fn asymmetric_constant_part_rejected() {
        let mut p = SdpProblem::new();
        let mut expr = PolyMatExpr::zeros(2, 2, 1);
        expr.entry_mut(0, 1).add_constant(Monomial::one(1), 1.0);
        // (1,0) left at zero → asymmetry 1 ≫ 1e-10.
        let c = SosConstraint::matrix(expr, vec![], 0);
        match compile_matrix_sos(&mut p, &c, "asym") {
            Err(SosError::Asymmetric(d)) => assert!(d > 0.5),
            other => panic!("expected asymmetry error, got {other:?}"),
        }
    }

    #[test]
    fn degree_bound_assertion_fails_loudly() {
        let mut p = SdpProblem::new();
        let mut expr = PolyMatExpr::zeros(1, 1, 1);
        expr.entry_mut(0, 0).add_constant(Monomial::new(vec![2]), 1.0);
        let c = SosConstraint::matrix(expr, vec![], 0).with_degree_bound(1);
        assert!(matches!(
            compile_matrix_sos(&mut p, &c, "deg"),
            Err(SosError::DegreeBound { got: 2, bound: 1 })
        ));
    }

    #[test]
    fn variable_counts_are_deterministic() {
        let build = || {
            let mut p = SdpProblem::new();
            let c = SosConstraint::scalar(
                x_poly(&[(4, 1.0), (2, -2.0), (0, 1.0)]),
                vec![Polynomial::from_monomial(Monomial::new(vec![0]), 1.0)],
                2,
            );
            compile_scalar_sos(&mut p, &c, "t").unwrap();
            (p.scalar_unknowns(), p.equalities.len())
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn debug_dump_line_format() {
        let mut p = SdpProblem::new();
        let g = p.add_psd_var("g", 2);
        let s = p.add_scalar_var("s", ScalarSign::Nonneg);
        p.add_equality("eq0", vec![Term::psd(g, 0, 1, 2.0), Term::scalar(s, -1.0)], 3.0);
        p.minimize(vec![Term::scalar(s, 1.0)]);
        let dump = p.debug_dump();
        assert!(dump.contains("(eq0, g, 0, 1, 2"), "dump was:\n{dump}");
        assert!(dump.contains("(eq0, s, 0, 0, -1"), "dump was:\n{dump}");
        assert!(dump.contains("(eq0, rhs, 0, 0, 3"), "dump was:\n{dump}");
        assert!(dump.contains("(objective, s, 0, 0, 1"), "dump was:\n{dump}");
    }

    #[test]
    fn equality_terms_merge_and_canonicalize() {
        let mut p = SdpProblem::new();
        let g = p.add_psd_var("g", 3);
        p.add_equality(
            "merge",
            vec![
                Term::psd(g, 2, 1, 1.0),
                Term::psd(g, 1, 2, 0.5),
                Term::psd(g, 0, 0, 0.0),
            ],
            0.0,
        );
        let eq = &p.equalities[0];
        assert_eq!(eq.terms.len(), 1);
        assert_eq!((eq.terms[0].row, eq.terms[0].col), (1, 2));
        assert_eq!(eq.terms[0].coeff, 1.5);
    }
}

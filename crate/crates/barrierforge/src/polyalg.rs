//! Multivariate monomial/polynomial algebra and the Θ-factorization.
//!
//! A dictionary is an ordered list of monomials `R(x) = [r_1(x); …; r_M(x)]`
//! with every `r_k(0) = 0` (degree ≥ 1). Because the degree-1 block is always
//! present, the vector of dictionary values factors as `R(x) = Θ(x)·x` where
//! `Θ(x)` is an `M × n` polynomial matrix with full column rank for every `x`
//! — the factorization that lets quadratic certificates absorb polynomial
//! dynamics. The factorization is not unique; [`factorize_theta`] fixes the
//! lowest-index-divisor rule and [`factorize_theta_with`] accepts an explicit
//! column assignment so published layouts can be reproduced exactly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Errors raised by dictionary construction and Θ-factorization.
#[derive(Debug, Error)]
pub enum PolyError {
    #[error("dictionary entry {0} has degree 0; dictionaries require degree >= 1 (R(0) = 0)")]
    DegreeZeroEntry(usize),
    #[error("dictionary entries are not distinct (entry {0} repeats)")]
    DuplicateEntry(usize),
    #[error("dictionary must start with the full degree-1 block in {n} variables")]
    MissingLinearBlock { n: usize },
    #[error("dictionary entry count {m} is below the state dimension {n}")]
    TooFewEntries { m: usize, n: usize },
    #[error("theta column override for entry {entry} selects variable {var} with zero exponent")]
    BadThetaColumn { entry: usize, var: usize },
    #[error("theta override length {got} does not match dictionary size {want}")]
    ThetaOverrideLength { got: usize, want: usize },
    #[error("Theta(x) is rank deficient at x = {0:?}")]
    RankDeficient(Vec<f64>),
    #[error("exponent vector length {got} does not match state dimension {want}")]
    DimensionMismatch { got: usize, want: usize },
}

/// A monomial `x_1^{e_1} ⋯ x_n^{e_n}`, stored as its exponent vector.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Monomial {
    pub exponents: Vec<u32>,
}

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Monomial { exponents }
    }

    /// The monomial `1` in `n` variables.
    pub fn one(n: usize) -> Self {
        Monomial { exponents: vec![0; n] }
    }

    /// The unit monomial `x_{var}`.
    pub fn var(n: usize, var: usize) -> Self {
        let mut e = vec![0; n];
        e[var] = 1;
        Monomial { exponents: e }
    }

    pub fn nvars(&self) -> usize {
        self.exponents.len()
    }

    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.exponents
            .iter()
            .zip(x)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        Monomial {
            exponents: self
                .exponents
                .iter()
                .zip(&other.exponents)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Divide by `x_{var}` once; `None` when the exponent is zero.
    pub fn div_var(&self, var: usize) -> Option<Monomial> {
        if self.exponents[var] == 0 {
            return None;
        }
        let mut e = self.exponents.clone();
        e[var] -= 1;
        Some(Monomial { exponents: e })
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.degree() == 0 {
            return write!(f, "1");
        }
        let mut first = true;
        for (i, &e) in self.exponents.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, "*")?;
            }
            first = false;
            if e == 1 {
                write!(f, "x{}", i + 1)?;
            } else {
                write!(f, "x{}^{}", i + 1, e)?;
            }
        }
        Ok(())
    }
}

/// A real-coefficient polynomial as a sparse map from monomials to
/// coefficients; zero coefficients are never stored. Serializes as a term
/// list `{nvars, terms: [{exponents, coefficient}, …]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolynomialRepr", try_from = "PolynomialRepr")]
pub struct Polynomial {
    pub nvars: usize,
    pub terms: BTreeMap<Monomial, f64>,
}

#[derive(Serialize, Deserialize)]
struct TermRepr {
    exponents: Vec<u32>,
    coefficient: f64,
}

#[derive(Serialize, Deserialize)]
struct PolynomialRepr {
    nvars: usize,
    terms: Vec<TermRepr>,
}

impl From<Polynomial> for PolynomialRepr {
    fn from(p: Polynomial) -> Self {
        PolynomialRepr {
            nvars: p.nvars,
            terms: p
                .terms
                .into_iter()
                .map(|(m, c)| TermRepr { exponents: m.exponents, coefficient: c })
                .collect(),
        }
    }
}

impl TryFrom<PolynomialRepr> for Polynomial {
    type Error = String;
    fn try_from(r: PolynomialRepr) -> Result<Self, Self::Error> {
        let mut p = Polynomial::zero(r.nvars);
        for t in r.terms {
            if t.exponents.len() != r.nvars {
                return Err(format!(
                    "term has {} exponents, polynomial has {} variables",
                    t.exponents.len(),
                    r.nvars
                ));
            }
            p.add_term(Monomial::new(t.exponents), t.coefficient);
        }
        Ok(p)
    }
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Polynomial { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Polynomial::zero(nvars);
        p.add_term(Monomial::one(nvars), c);
        p
    }

    pub fn from_monomial(m: Monomial, c: f64) -> Self {
        let mut p = Polynomial::zero(m.nvars());
        p.add_term(m, c);
        p
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        debug_assert_eq!(m.nvars(), self.nvars);
        let entry = self.terms.entry(m).or_insert(0.0);
        *entry += c;
        if *entry == 0.0 {
            let key = self
                .terms
                .iter()
                .find(|(_, &v)| v == 0.0)
                .map(|(k, _)| k.clone());
            if let Some(k) = key {
                self.terms.remove(&k);
            }
        }
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            out.add_term(m.clone(), c);
        }
        out
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        if s == 0.0 {
            return Polynomial::zero(self.nvars);
        }
        Polynomial {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(m, &c)| (m.clone(), c * s)).collect(),
        }
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (ma, &ca) in &self.terms {
            for (mb, &cb) in &other.terms {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(m, &c)| c * m.eval(x)).sum()
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }
}

/// An ordered monomial dictionary `R(x)`; houses both the synthesis dictionary
/// and the true dynamics' monomial list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub n: usize,
    pub entries: Vec<Monomial>,
}

impl Dictionary {
    /// Validate invariants: distinct entries, all degrees ≥ 1, at least `n`
    /// entries with the degree-1 block up front (so Θ has full column rank
    /// everywhere, including `x = 0`).
    pub fn new(n: usize, entries: Vec<Monomial>) -> Result<Self, PolyError> {
        if entries.len() < n {
            return Err(PolyError::TooFewEntries { m: entries.len(), n });
        }
        let mut seen = std::collections::BTreeSet::new();
        for (k, e) in entries.iter().enumerate() {
            if e.nvars() != n {
                return Err(PolyError::DimensionMismatch { got: e.nvars(), want: n });
            }
            if e.degree() == 0 {
                return Err(PolyError::DegreeZeroEntry(k));
            }
            if !seen.insert(e.clone()) {
                return Err(PolyError::DuplicateEntry(k));
            }
        }
        let head: std::collections::BTreeSet<_> = entries[..n].iter().cloned().collect();
        let units: std::collections::BTreeSet<_> = (0..n).map(|v| Monomial::var(n, v)).collect();
        if head != units {
            return Err(PolyError::MissingLinearBlock { n });
        }
        Ok(Dictionary { n, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Evaluate `R(x)` as a column vector.
    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_iterator(self.len(), 1, self.entries.iter().map(|m| m.eval(x)))
    }

    pub fn max_degree(&self) -> u32 {
        self.entries.iter().map(Monomial::degree).max().unwrap_or(0)
    }
}

/// All monomials of degree `1..=dmax` in `n` variables, graded order
/// (degree-1 block first) with lexicographic tie-break. The count is
/// `C(n + dmax, dmax) − 1`.
pub fn build_dictionary(n: usize, dmax: u32) -> Dictionary {
    assert!(n >= 1 && dmax >= 1, "build_dictionary requires n >= 1 and dmax >= 1");
    let mut entries = Vec::new();
    for deg in 1..=dmax {
        let mut level = Vec::new();
        gen_exponents(n, deg, &mut vec![0; n], 0, &mut level);
        level.sort();
        level.reverse();
        entries.extend(level.into_iter().map(Monomial::new));
    }
    Dictionary::new(n, entries).expect("generated dictionary is always valid")
}

fn gen_exponents(n: usize, deg: u32, cur: &mut Vec<u32>, idx: usize, out: &mut Vec<Vec<u32>>) {
    if idx == n - 1 {
        cur[idx] = deg;
        out.push(cur.clone());
        cur[idx] = 0;
        return;
    }
    for e in (0..=deg).rev() {
        cur[idx] = e;
        gen_exponents(n, deg - e, cur, idx + 1, out);
        cur[idx] = 0;
    }
}

/// A dense matrix of polynomials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub entries: Vec<Polynomial>,
}

impl PolyMatrix {
    pub fn zeros(nvars: usize, rows: usize, cols: usize) -> Self {
        PolyMatrix {
            rows,
            cols,
            entries: vec![Polynomial::zero(nvars); rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> &Polynomial {
        &self.entries[r * self.cols + c]
    }

    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut Polynomial {
        &mut self.entries[r * self.cols + c]
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c).eval(x))
    }

    pub fn transpose(&self) -> PolyMatrix {
        let nvars = self.entries.first().map(|p| p.nvars).unwrap_or(0);
        let mut out = PolyMatrix::zeros(nvars, self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.get_mut(c, r) = self.get(r, c).clone();
            }
        }
        out
    }

    /// Largest entry degree.
    pub fn degree(&self) -> u32 {
        self.entries.iter().map(Polynomial::degree).max().unwrap_or(0)
    }

    /// Multiply by a constant matrix on the left: `out = m · self`.
    pub fn left_mul(&self, m: &DMatrix<f64>) -> PolyMatrix {
        assert_eq!(m.ncols(), self.rows);
        let nvars = self.entries.first().map(|p| p.nvars).unwrap_or(0);
        let mut out = PolyMatrix::zeros(nvars, m.nrows(), self.cols);
        for r in 0..m.nrows() {
            for c in 0..self.cols {
                let mut acc = Polynomial::zero(nvars);
                for k in 0..self.rows {
                    if m[(r, k)] != 0.0 {
                        acc = acc.add(&self.get(k, c).scale(m[(r, k)]));
                    }
                }
                *out.get_mut(r, c) = acc;
            }
        }
        out
    }
}

/// Θ-factorization with the lowest-index-divisor rule: each dictionary entry
/// is divided by its lowest-index variable with positive exponent and the
/// quotient is placed in that variable's column.
pub fn factorize_theta(dict: &Dictionary) -> Result<PolyMatrix, PolyError> {
    let cols: Vec<usize> = dict
        .entries
        .iter()
        .enumerate()
        .map(|(k, m)| {
            m.exponents
                .iter()
                .position(|&e| e > 0)
                .ok_or(PolyError::DegreeZeroEntry(k))
        })
        .collect::<Result<_, _>>()?;
    factorize_theta_with(dict, &cols)
}

/// Θ-factorization with an explicit column assignment (one column index per
/// dictionary entry); reproduces published layouts that deviate from the
/// lowest-index rule.
pub fn factorize_theta_with(dict: &Dictionary, cols: &[usize]) -> Result<PolyMatrix, PolyError> {
    if cols.len() != dict.len() {
        return Err(PolyError::ThetaOverrideLength { got: cols.len(), want: dict.len() });
    }
    let mut theta = PolyMatrix::zeros(dict.n, dict.len(), dict.n);
    for (k, (m, &col)) in dict.entries.iter().zip(cols).enumerate() {
        let q = m
            .div_var(col)
            .ok_or(PolyError::BadThetaColumn { entry: k, var: col })?;
        *theta.get_mut(k, col) = Polynomial::from_monomial(q, 1.0);
    }
    Ok(theta)
}

/// Left pseudoinverse `Θ†(x)` with `Θ†(x)·Θ(x) = I_n`, computed by QR at the
/// evaluation point.
pub fn theta_left_pinv(theta: &PolyMatrix, x: &[f64]) -> Result<DMatrix<f64>, PolyError> {
    let t = theta.eval(x);
    let n = t.ncols();
    let qr = t.clone().qr();
    let r = qr.r();
    let rank_tol = 1e-10 * r.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
    if r.diagonal().iter().any(|d| d.abs() < rank_tol) {
        return Err(PolyError::RankDeficient(x.to_vec()));
    }
    // Solve R·pinv = Qᵀ column by column (R is n×n upper triangular).
    let qt = qr.q().transpose();
    let mut pinv = DMatrix::zeros(n, t.nrows());
    for c in 0..t.nrows() {
        let col = qt.column(c).into_owned();
        let sol = r
            .clone()
            .solve_upper_triangular(&col)
            .ok_or_else(|| PolyError::RankDeficient(x.to_vec()))?;
        pinv.set_column(c, &sol);
    }
    Ok(pinv)
}

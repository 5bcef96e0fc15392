//! Per-subsystem certificate synthesis from a single noisy trajectory.
//!
//! Given the data matrices `(U⁰ᵀ, W⁰ᵀ, X⁰ᵀ, X¹ᵀ)` of one trajectory and the
//! dictionary factorization `R(x) = Θ(x)·x`, this module searches for a
//! quadratic control storage certificate `S(x) = xᵀPx` together with a
//! polynomial state feedback `u = U⁰ᵀ·H(x)·P·x`. Feasibility of a single
//! matrix sum-of-squares program certifies the dissipation inequality
//!
//! ```text
//! 𝖫S(x) ≤ −λ·S(x) + [w; x]ᵀ [[Z¹¹, Z¹²],[Z²¹, Z²²]] [w; x]   ∀x ∈ X, ∀w,
//! ```
//!
//! for every disturbance `w` — the supply-rate blocks are what the network
//! composition later consumes. The data enter through `Y = X¹ᵀ − D·W⁰ᵀ` and
//! the exact consistency equality `𝒩⁰ᵀ·H(x) = Θ(x)·S`, which pins the
//! closed-loop representation to the observed trajectory without ever
//! identifying the dynamics; measurement noise is absorbed by the `α·ΨΨᵀ`
//! inflation of the data block.
//!
//! Synthesis runs in two passes. Pass one shapes `S` under level-set geometry
//! (initial-set vertices inside the `L₀` sublevel set, unsafe boxes outside)
//! while maximizing the supply-rate margin `κ`; pass two freezes `S`, reopens
//! the remaining variables, and minimizes a uniform bound on the controller
//! gain rows so the resulting feedback stays moderate over the operating box.
//! Level constants `η` (over the initial set) and `μ` (over the unsafe set)
//! are extremized afterwards by small scalar SOS programs with `P` fixed,
//! which keeps every solve convex.

use crate::datagen::TrajectoryRecord;
use crate::models::{BoxRegion, Region, SynthHandle};
use crate::polyalg::{Dictionary, Monomial, PolyMatrix};
use crate::sdp::{self, SdpSettings, SdpSolution, SdpStatus};
use crate::soscomp::{
    compile_matrix_sos, compile_scalar_sos, monomials_up_to, CompiledSos, PolyExpr, PolyMatExpr,
    ScalarSign, SdpProblem, SosConstraint, SosError, Term,
};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Positive-definiteness margin on `S` (the certificate requires `P ≻ 0`;
/// the exact floor is a solver-side choice, exposed in the settings).
pub const DEFAULT_EPS_PD: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("trajectory data matrix is rank deficient (σ_min = {0:.3e})")]
    RankDeficient(f64),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(
        "{stage} SDP ended with status {status} (λ = {lambda}, π = {pi}, T = {t_samples}, \
         H degree {h_degree}, multiplier degree {multiplier_degree})"
    )]
    Infeasible {
        stage: &'static str,
        status: SdpStatus,
        lambda: f64,
        pi: f64,
        t_samples: usize,
        h_degree: usize,
        multiplier_degree: usize,
    },
    #[error("synthesized S is ill-conditioned (cond = {0:.3e})")]
    IllConditioned(f64),
    #[error("data-consistency residual {0:.3e} exceeds 1e-6")]
    ConsistencyResidual(f64),
    #[error("unsafe region is empty; μ is unbounded")]
    EmptyUnsafeRegion,
    #[error("operating region must be a single box for the SOS encoding")]
    RegionShape,
    #[error("level-set SDP for {0} did not reach optimality")]
    LevelFailure(&'static str),
}

/// Degree knobs. `h_degree = None` uses deg Θ, the smallest parameterization
/// the consistency equality admits; the multiplier degree applies to the
/// region certificates (0 ⇒ constant nonnegative multipliers).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthDegrees {
    pub h_degree: Option<usize>,
    pub multiplier_degree: usize,
}

impl Default for SynthDegrees {
    fn default() -> Self {
        SynthDegrees { h_degree: None, multiplier_degree: 0 }
    }
}

/// Synthesis configuration. `level_target` is the working normalization `L₀`
/// of the storage function (the initial-set vertices are pushed inside the
/// `L₀/(1+vertex_slack)` sublevel set, unsafe boxes outside `L₀`);
/// `coupling_gain_sq` bounds `‖𝕄‖²` of the interconnection the certificate
/// will later be composed under.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisSettings {
    pub lambda: f64,
    pub pi: f64,
    pub eps_pd: f64,
    pub level_target: f64,
    pub coupling_gain_sq: f64,
    pub vertex_slack: f64,
    /// Controller-gain reference radius; `None` derives it from the
    /// operating box.
    pub gain_cap_radius: Option<f64>,
    /// Safety factor on the composition link `κ ≥ λ_max(S)²·‖𝕄‖²·ρ`.
    pub link_margin: f64,
    pub weight_alpha: f64,
    pub weight_rho: f64,
    pub degrees: SynthDegrees,
    pub sdp: SdpSettings,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        SynthesisSettings {
            lambda: 0.99,
            pi: 1.0,
            eps_pd: DEFAULT_EPS_PD,
            level_target: 1.0,
            coupling_gain_sq: 1.0,
            vertex_slack: 0.05,
            gain_cap_radius: None,
            link_margin: 1.02,
            weight_alpha: 1e-3,
            weight_rho: 1e-3,
            degrees: SynthDegrees::default(),
            // Synthesis programs are feasibility-driven: equalities stay at
            // full precision while a 0.1% objective gap is immaterial — the
            // resulting certificate is re-validated independently (PSD
            // re-checks, consistency residual, region margins).
            sdp: SdpSettings { gap_tol: 1e-3, ..SdpSettings::default() },
        }
    }
}

/// Provenance carried inside every certificate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub benchmark: Option<String>,
    pub tau: f64,
    pub phi_bar: f64,
}

/// Row-major (de)serialization for dense matrices in certificate files.
pub mod mat_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Rep {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Rep { rows: m.nrows(), cols: m.ncols(), data }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rep = Rep::deserialize(d)?;
        if rep.data.len() != rep.rows * rep.cols {
            return Err(serde::de::Error::custom("matrix data length mismatch"));
        }
        Ok(DMatrix::from_row_slice(rep.rows, rep.cols, &rep.data))
    }
}

/// A control storage certificate for one subsystem: the quadratic storage
/// `S(x) = xᵀPx`, the feedback kernel `H(x)`, the supply-rate blocks in both
/// the solver frame (`Z̄`) and the composition frame (`Z`), and the level
/// constants once computed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StorageCertificate {
    pub n: usize,
    pub m: usize,
    pub t: usize,
    #[serde(with = "mat_serde")]
    pub p: DMatrix<f64>,
    /// `S = P⁻¹`, the matrix the dissipation program actually solved for.
    #[serde(with = "mat_serde")]
    pub s_inv: DMatrix<f64>,
    pub h: PolyMatrix,
    #[serde(with = "mat_serde")]
    pub zbar11: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    pub zbar12: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    pub zbar21: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    pub zbar22: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    pub z11: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    pub z12: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    pub z21: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    pub z22: DMatrix<f64>,
    pub alpha: f64,
    pub pi: f64,
    pub lambda: f64,
    pub eta: Option<f64>,
    pub mu: Option<f64>,
    /// `Q = H·P`.
    pub q: PolyMatrix,
    /// Controller kernel `F = U⁰ᵀ·H·P`; the feedback is `u = F(x)·x`.
    pub f: PolyMatrix,
    #[serde(with = "mat_serde")]
    pub u0t: DMatrix<f64>,
    pub provenance: Provenance,
}

impl StorageCertificate {
    /// `S(x) = xᵀPx`.
    pub fn eval_storage(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        (xv.transpose() * &self.p * &xv)[(0, 0)]
    }

    /// Decentralized feedback `u = U⁰ᵀ·H(x)·P·x = F(x)·x`.
    pub fn eval_controller(&self, x: &[f64]) -> DVector<f64> {
        let fx = self.f.eval(x);
        let xv = DVector::from_column_slice(x);
        fx * xv
    }

    /// Structural invariants: `P ≻ 0`, `Z̄²¹ = Z̄¹²ᵀ`, `Z̄²² ⪯ 0`, and the
    /// frame change `Z¹¹ = Z̄¹¹`, `Z¹² = Z̄¹²P`, `Z²¹ = Z¹²ᵀ`, `Z²² = PZ̄²²P`.
    pub fn validate(&self) -> Result<(), SynthError> {
        let eig = self.p.clone().symmetric_eigen();
        let pmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if pmin <= 0.0 {
            return Err(SynthError::IllConditioned(f64::INFINITY));
        }
        let tol = 1e-10
            * (1.0
                + self.zbar11.amax().max(self.zbar12.amax()).max(self.zbar22.amax())
                + self.p.amax());
        let asym = (&self.zbar21 - self.zbar12.transpose()).amax();
        let z22eig = self.zbar22.clone().symmetric_eigen();
        let z22max = z22eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let t11 = (&self.z11 - &self.zbar11).amax();
        let t12 = (&self.z12 - &self.zbar12 * &self.p).amax();
        let t21 = (&self.z21 - self.z12.transpose()).amax();
        let t22 = (&self.z22 - &self.p * &self.zbar22 * &self.p).amax();
        if asym > tol || t11 > tol || t12 > tol || t21 > tol || t22 > tol {
            return Err(SynthError::ConsistencyResidual(
                asym.max(t11).max(t12).max(t21).max(t22),
            ));
        }
        if z22max > 1e-8 * (1.0 + self.zbar22.amax()) {
            return Err(SynthError::ConsistencyResidual(z22max));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Shared assembly machinery
// ---------------------------------------------------------------------------

use crate::soscomp::LinExpr;

/// Variable handles of the dissipation core: the `H` coefficient blocks
/// (indexed `[monomial][data row][state column]`), `α`, and the compiled SOS
/// handle.
pub struct DissipationLayout {
    pub h_basis: Vec<Monomial>,
    pub h_vars: Vec<Vec<Vec<usize>>>,
    pub alpha: usize,
    pub sos: CompiledSos,
}

fn single_box(region: &Region) -> Result<&BoxRegion, SynthError> {
    if region.boxes.len() != 1 {
        return Err(SynthError::RegionShape);
    }
    Ok(&region.boxes[0])
}

/// Shared core: declares `H` and `α`, adds the data-consistency equalities
/// `𝒩⁰ᵀ·H(x) = Θ(x)·S` coefficient-wise, assembles the dissipation block
/// matrix and compiles it as a matrix SOS constraint over the operating box.
///
/// The `S`/`Z̄` entries arrive as affine expressions so the same code serves
/// the joint problem (everything variable), pass one (`Z̄²² = −κI`) and pass
/// two (`S` frozen).
#[allow(clippy::too_many_arguments)]
fn dissipation_core(
    pb: &mut SdpProblem,
    record: &TrajectoryRecord,
    d: &DMatrix<f64>,
    theta: &PolyMatrix,
    region_x: &Region,
    lambda: f64,
    pi: f64,
    degrees: &SynthDegrees,
    s_of: &dyn Fn(usize, usize) -> LinExpr,
    zb11_of: &dyn Fn(usize, usize) -> LinExpr,
    zb12_of: &dyn Fn(usize, usize) -> LinExpr,
    zb22_of: &dyn Fn(usize, usize) -> LinExpr,
    tag: &str,
) -> Result<DissipationLayout, SynthError> {
    let n = record.x0t.nrows();
    let t = record.t_samples;
    let mbar = record.n0t.nrows();
    assert_eq!(theta.rows, mbar, "Θ row count must match the dictionary");
    assert_eq!(theta.cols, n);

    let h_degree = degrees.h_degree.unwrap_or(theta.degree() as usize);
    let h_basis = monomials_up_to(n, h_degree);

    // H coefficient blocks, one T×n free matrix per basis monomial.
    let mut h_vars: Vec<Vec<Vec<usize>>> = Vec::with_capacity(h_basis.len());
    for (mi, _) in h_basis.iter().enumerate() {
        let mut rows = Vec::with_capacity(t);
        for k in 0..t {
            let mut cols = Vec::with_capacity(n);
            for c in 0..n {
                cols.push(pb.add_scalar_var(&format!("{tag}_H{mi}_{k}_{c}"), ScalarSign::Free));
            }
            rows.push(cols);
        }
        h_vars.push(rows);
    }
    let alpha = pb.add_scalar_var(&format!("{tag}_alpha"), ScalarSign::Nonneg);

    // Data-consistency equalities: for every dictionary row r and state
    // column c, the polynomial (𝒩⁰ᵀ·H(x))[r,c] − (Θ(x)·S)[r,c] vanishes
    // coefficient-wise.
    for r in 0..mbar {
        for c in 0..n {
            let mut e = PolyExpr::zero(n);
            for (mi, mono) in h_basis.iter().enumerate() {
                for k in 0..t {
                    let w = record.n0t[(r, k)];
                    if w != 0.0 {
                        e.add_term(mono.clone(), Term::scalar(h_vars[mi][k][c], w));
                    }
                }
            }
            for dcol in 0..n {
                let q = theta.get(r, dcol);
                for (mono, &coef) in &q.terms {
                    let le = s_of(dcol, c).scaled(-coef);
                    e.add_constant(mono.clone(), le.constant);
                    for term in le.terms {
                        e.add_term(mono.clone(), term);
                    }
                }
            }
            for (mono, le) in &e.coeffs {
                if le.is_zero() {
                    continue;
                }
                pb.add_equality(
                    &format!("{tag}_consist_{r}_{c}_{:?}", mono.exponents),
                    le.terms.clone(),
                    -le.constant,
                );
            }
        }
    }

    // Dissipation block matrix, block sizes [n, T, n]:
    //   [ −Y·H − HᵀYᵀ − αΨΨᵀ − πI − λS + Z̄²²   Hᵀ(x)   Z̄²¹            ]
    //   [ H(x)                                   αI_T     0              ]
    //   [ Z̄¹²                                    0        Z̄¹¹ − DᵀD/π  ]
    let y = &record.x1t - d * &record.w0t;
    let psi_sq = &record.psi * record.psi.transpose();
    let dtd_over_pi = d.transpose() * d / pi;
    let dim = 2 * n + t;
    let one = Monomial::one(n);
    let mut expr = PolyMatExpr::zeros(dim, dim, n);

    for i in 0..n {
        for j in 0..n {
            let ent = expr.entry_mut(i, j);
            // −(Y·H(x))[i,j] − (Y·H(x))[j,i]
            for (mi, mono) in h_basis.iter().enumerate() {
                for k in 0..t {
                    let yik = y[(i, k)];
                    if yik != 0.0 {
                        ent.add_term(mono.clone(), Term::scalar(h_vars[mi][k][j], -yik));
                    }
                    let yjk = y[(j, k)];
                    if yjk != 0.0 {
                        ent.add_term(mono.clone(), Term::scalar(h_vars[mi][k][i], -yjk));
                    }
                }
            }
            if psi_sq[(i, j)] != 0.0 {
                ent.add_term(one.clone(), Term::scalar(alpha, -psi_sq[(i, j)]));
            }
            if i == j {
                ent.add_constant(one.clone(), -pi);
            }
            let s_le = s_of(i, j).scaled(-lambda);
            ent.add_constant(one.clone(), s_le.constant);
            for term in s_le.terms {
                ent.add_term(one.clone(), term);
            }
            let z22 = zb22_of(i, j);
            ent.add_constant(one.clone(), z22.constant);
            for term in z22.terms {
                ent.add_term(one.clone(), term);
            }
        }
    }
    for k in 0..t {
        for c in 0..n {
            for (mi, mono) in h_basis.iter().enumerate() {
                let v = h_vars[mi][k][c];
                expr.entry_mut(c, n + k).add_term(mono.clone(), Term::scalar(v, 1.0));
                expr.entry_mut(n + k, c).add_term(mono.clone(), Term::scalar(v, 1.0));
            }
        }
        expr.entry_mut(n + k, n + k).add_term(one.clone(), Term::scalar(alpha, 1.0));
    }
    for a in 0..n {
        for b in 0..n {
            // Block (3,1) is Z̄¹², block (1,3) its transpose Z̄²¹.
            let le = zb12_of(a, b);
            for (r, c) in [(n + t + a, b), (b, n + t + a)] {
                let ent = expr.entry_mut(r, c);
                ent.add_constant(one.clone(), le.constant);
                for term in &le.terms {
                    ent.add_term(one.clone(), *term);
                }
            }
            let ent = expr.entry_mut(n + t + a, n + t + b);
            let le = zb11_of(a, b);
            ent.add_constant(one.clone(), le.constant - dtd_over_pi[(a, b)]);
            for term in le.terms {
                ent.add_term(one.clone(), term);
            }
        }
    }

    let region_polys = single_box(region_x)?.poly_description();
    let constraint = SosConstraint::matrix(expr, region_polys, degrees.multiplier_degree);
    let sos = compile_matrix_sos(pb, &constraint, &format!("{tag}_dissipation"))?;

    Ok(DissipationLayout { h_basis, h_vars, alpha, sos })
}

fn sym_var_grid(pb: &mut SdpProblem, name: &str, n: usize) -> Vec<Vec<usize>> {
    let mut grid = vec![vec![0usize; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = pb.add_scalar_var(&format!("{name}_{i}_{j}"), ScalarSign::Free);
            grid[i][j] = v;
            grid[j][i] = v;
        }
    }
    grid
}

fn grid_expr(grid: &[Vec<usize>]) -> impl Fn(usize, usize) -> LinExpr + '_ {
    move |i, j| LinExpr::term(Term::scalar(grid[i][j], 1.0))
}

fn const_expr(m: DMatrix<f64>) -> impl Fn(usize, usize) -> LinExpr {
    move |i, j| LinExpr::constant(m[(i, j)])
}

fn zero_expr() -> impl Fn(usize, usize) -> LinExpr {
    |_, _| LinExpr::constant(0.0)
}

/// Ties a PSD variable entrywise to an affine expression: declares `name ⪰ 0`
/// of dimension `n` and adds `name[i,j] − expr(i,j) = 0` for `i ≤ j`.
fn psd_pinned_to(
    pb: &mut SdpProblem,
    name: &str,
    n: usize,
    expr: &dyn Fn(usize, usize) -> LinExpr,
) -> usize {
    let v = pb.add_psd_var(name, n);
    for i in 0..n {
        for j in i..n {
            let le = expr(i, j);
            let mut terms = vec![Term::psd(v, i, j, 1.0)];
            for term in &le.terms {
                terms.push(Term { coeff: -term.coeff, ..*term });
            }
            pb.add_equality(&format!("{name}_pin_{i}_{j}"), terms, le.constant);
        }
    }
    v
}

// ---------------------------------------------------------------------------
// The spec-level joint assembly (all certificate blocks as variables)
// ---------------------------------------------------------------------------

/// Assemble the dissipation feasibility program with every certificate block
/// free: `H(x)` coefficients, symmetric `S ⪰ ε·I`, `α ≥ 0` and all four `Z̄`
/// blocks (`Z̄²¹ = Z̄¹²ᵀ` by construction, `Z̄²² ⪯ 0` through its negation).
#[allow(clippy::too_many_arguments)]
pub fn assemble_dissipation_problem(
    record: &TrajectoryRecord,
    d: &DMatrix<f64>,
    dict: &Dictionary,
    theta: &PolyMatrix,
    region_x: &Region,
    lambda: f64,
    pi: f64,
    degrees: &SynthDegrees,
) -> Result<(SdpProblem, DissipationLayout), SynthError> {
    assert_eq!(dict.len(), record.n0t.nrows());
    let n = record.x0t.nrows();
    let mut pb = SdpProblem::new();

    let s_grid = sym_var_grid(&mut pb, "S", n);
    let zb11_grid = sym_var_grid(&mut pb, "Zb11", n);
    // Z̄¹² is a full (not symmetric) matrix.
    let mut zb12_grid = vec![vec![0usize; n]; n];
    for (i, row) in zb12_grid.iter_mut().enumerate() {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = pb.add_scalar_var(&format!("Zb12_{i}_{j}"), ScalarSign::Free);
        }
    }
    // Z̄²² = −K with K ⪰ 0.
    let z22_neg = pb.add_psd_var("Zb22_neg", n);

    // S ⪰ ε·I.
    let s_of = grid_expr(&s_grid);
    psd_pinned_to(&mut pb, "S_floor", n, &|i, j| {
        let mut le = s_of(i, j);
        if i == j {
            le.constant -= DEFAULT_EPS_PD;
        }
        le
    });

    let layout = dissipation_core(
        &mut pb,
        record,
        d,
        theta,
        region_x,
        lambda,
        pi,
        degrees,
        &grid_expr(&s_grid),
        &grid_expr(&zb11_grid),
        &|i, j| LinExpr::term(Term::scalar(zb12_grid[i][j], 1.0)),
        &|i, j| LinExpr::term(Term::psd(z22_neg, i, j, -1.0)),
        "joint",
    )?;
    Ok((pb, layout))
}

// ---------------------------------------------------------------------------
// Two-pass pipeline
// ---------------------------------------------------------------------------

fn sign_unique_vertices(region: &Region) -> Vec<Vec<f64>> {
    let mut seen: std::collections::BTreeSet<Vec<u64>> = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for b in &region.boxes {
        for mut v in b.vertices() {
            if let Some(first) = v.iter().find(|&&c| c != 0.0) {
                if *first < 0.0 {
                    for c in v.iter_mut() {
                        *c = -*c;
                    }
                }
            }
            let key: Vec<u64> = v.iter().map(|c| c.to_bits()).collect();
            if seen.insert(key) {
                out.push(v);
            }
        }
    }
    out
}

/// Squared distance from the origin to the nearest unsafe box.
fn min_unsafe_distance_sq(xa: &Region) -> Result<f64, SynthError> {
    if xa.is_empty() {
        return Err(SynthError::EmptyUnsafeRegion);
    }
    let mut best = f64::INFINITY;
    for b in &xa.boxes {
        let p = b.nearest_to_origin();
        let d2: f64 = p.iter().map(|c| c * c).sum();
        best = best.min(d2);
    }
    if best <= 0.0 {
        return Err(SynthError::EmptyUnsafeRegion);
    }
    Ok(best)
}

struct PassA {
    problem: SdpProblem,
    s_grid: Vec<Vec<usize>>,
}

/// Pass one: shape `S`. Level geometry pins the initial-set vertices inside
/// `L₀/(1+δ)` and unsafe boxes outside `L₀`; the objective maximizes the
/// supply-rate margin `κ` (tempered by small `α`, `ρ` penalties) subject to
/// the composition link `κ ≥ s_cap²·‖𝕄‖²·ρ` and `κ ≤ π`.
fn build_pass_a(
    record: &TrajectoryRecord,
    handle: &SynthHandle,
    st: &SynthesisSettings,
) -> Result<(PassA, DissipationLayout), SynthError> {
    let n = handle.n;
    let l0 = st.level_target;
    let s_cap = min_unsafe_distance_sq(&handle.xa_region)? / l0;
    let mut pb = SdpProblem::new();

    let s_grid = sym_var_grid(&mut pb, "S", n);
    let zb11_grid = sym_var_grid(&mut pb, "Zb11", n);
    let kappa = pb.add_scalar_var("kappa", ScalarSign::Nonneg);
    let rho = pb.add_scalar_var("rho", ScalarSign::Nonneg);

    // ε·I ⪯ S ⪯ s_cap·I.
    {
        let s_of = grid_expr(&s_grid);
        psd_pinned_to(&mut pb, "S_floor", n, &|i, j| {
            let mut le = s_of(i, j);
            if i == j {
                le.constant -= st.eps_pd;
            }
            le
        });
        psd_pinned_to(&mut pb, "S_cap", n, &|i, j| {
            let mut le = s_of(i, j).scaled(-1.0);
            if i == j {
                le.constant += s_cap;
            }
            le
        });
        // Z̄¹¹ ⪯ ρ·I.
        psd_pinned_to(&mut pb, "Z11_cap", n, &|i, j| {
            let mut le = LinExpr::term(Term::scalar(zb11_grid[i][j], -1.0));
            if i == j {
                le.terms.push(Term::scalar(rho, 1.0));
            }
            le
        });
    }

    // Composition link κ ≥ s_cap²·‖𝕄‖²·ρ and the Young window κ ≤ π.
    let slack = pb.add_scalar_var("kappa_link_slack", ScalarSign::Nonneg);
    pb.add_equality(
        "kappa_link",
        vec![
            Term::scalar(kappa, 1.0),
            Term::scalar(rho, -s_cap * s_cap * st.coupling_gain_sq),
            Term::scalar(slack, -1.0),
        ],
        0.0,
    );
    let slack_pi = pb.add_scalar_var("kappa_pi_slack", ScalarSign::Nonneg);
    pb.add_equality(
        "kappa_pi",
        vec![Term::scalar(kappa, 1.0), Term::scalar(slack_pi, 1.0)],
        st.pi,
    );

    // Initial-set vertex coverage: [[L₀/(1+δ), vᵀ], [v, S]] ⪰ 0 per
    // sign-unique vertex.
    for (vi, v) in sign_unique_vertices(&handle.x0_region).iter().enumerate() {
        let g = pb.add_psd_var(&format!("vertex{vi}"), n + 1);
        pb.add_equality(
            &format!("vertex{vi}_corner"),
            vec![Term::psd(g, 0, 0, 1.0)],
            l0 / (1.0 + st.vertex_slack),
        );
        for (j, &vj) in v.iter().enumerate() {
            pb.add_equality(&format!("vertex{vi}_lin_{j}"), vec![Term::psd(g, 0, 1 + j, 1.0)], vj);
        }
        for i in 0..n {
            for j in i..n {
                pb.add_equality(
                    &format!("vertex{vi}_S_{i}_{j}"),
                    vec![Term::psd(g, 1 + i, 1 + j, 1.0), Term::scalar(s_grid[i][j], -1.0)],
                    0.0,
                );
            }
        }
    }

    // Unsafe-box separation along the nearest direction: aᵀSa ≤ b²/L₀.
    for (bi, b) in handle.xa_region.boxes.iter().enumerate() {
        let p = b.nearest_to_origin();
        let bn: f64 = p.iter().map(|c| c * c).sum::<f64>().sqrt();
        let a: Vec<f64> = p.iter().map(|c| c / bn).collect();
        let slack = pb.add_scalar_var(&format!("xa{bi}_slack"), ScalarSign::Nonneg);
        let mut terms = vec![Term::scalar(slack, 1.0)];
        for i in 0..n {
            for j in i..n {
                let w = if i == j { a[i] * a[i] } else { 2.0 * a[i] * a[j] };
                if w != 0.0 {
                    terms.push(Term::scalar(s_grid[i][j], w));
                }
            }
        }
        pb.add_equality(&format!("xa{bi}_sep"), terms, bn * bn / l0);
    }

    // Closed-loop contraction on the constant part of the feedback:
    // −Y·H₀ − H₀ᵀYᵀ ⪰ 2λ·S. Declared here but pinned after the core
    // allocates the H variables.
    let layout = dissipation_core(
        &mut pb,
        record,
        &handle.d,
        &handle.theta,
        &handle.x_region,
        st.lambda,
        st.pi,
        &st.degrees,
        &grid_expr(&s_grid),
        &grid_expr(&zb11_grid),
        &zero_expr(),
        &|i, j| {
            if i == j {
                LinExpr::term(Term::scalar(kappa, -1.0))
            } else {
                LinExpr::constant(0.0)
            }
        },
        "passA",
    )?;

    let y = &record.x1t - &handle.d * &record.w0t;
    let h0 = &layout.h_vars[0]; // constant-monomial block (basis is sorted, 1 first)
    let con = pb.add_psd_var("contraction", n);
    for i in 0..n {
        for j in i..n {
            let mut terms = vec![Term::psd(con, i, j, 1.0)];
            for k in 0..record.t_samples {
                if y[(i, k)] != 0.0 {
                    terms.push(Term::scalar(h0[k][j], y[(i, k)]));
                }
                if y[(j, k)] != 0.0 {
                    terms.push(Term::scalar(h0[k][i], y[(j, k)]));
                }
            }
            terms.push(Term::scalar(s_grid[i][j], 2.0 * st.lambda));
            pb.add_equality(&format!("contraction_{i}_{j}"), terms, 0.0);
        }
    }

    pb.minimize(vec![
        Term::scalar(kappa, -1.0),
        Term::scalar(layout.alpha, st.weight_alpha),
        Term::scalar(rho, st.weight_rho),
    ]);

    Ok((PassA { problem: pb, s_grid }, layout))
}

struct PassB {
    problem: SdpProblem,
    zb11_grid: Vec<Vec<usize>>,
    kappa: usize,
}

/// Pass two: freeze `S = S*`, reopen `H`, `α`, `κ`, `ρ`, `Z̄¹¹`, and minimize
/// a uniform controller-gain bound: every coefficient block of
/// `F(x) = U⁰ᵀ·H(x)·P*` is capped by `t_g / r^deg` elementwise, with `r` the
/// operating radius, so higher-degree feedback terms taper off.
fn build_pass_b(
    record: &TrajectoryRecord,
    handle: &SynthHandle,
    st: &SynthesisSettings,
    s_star: &DMatrix<f64>,
) -> Result<(PassB, DissipationLayout), SynthError> {
    let n = handle.n;
    let m = record.u0t.nrows();
    let s_eig = s_star.clone().symmetric_eigen();
    let s_max = s_eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p_star = invert_spd(s_star)?;
    let mut pb = SdpProblem::new();

    let zb11_grid = sym_var_grid(&mut pb, "Zb11", n);
    let kappa = pb.add_scalar_var("kappa", ScalarSign::Nonneg);
    let rho = pb.add_scalar_var("rho", ScalarSign::Nonneg);
    let gain = pb.add_scalar_var("gain_bound", ScalarSign::Nonneg);

    psd_pinned_to(&mut pb, "Z11_cap", n, &|i, j| {
        let mut le = LinExpr::term(Term::scalar(zb11_grid[i][j], -1.0));
        if i == j {
            le.terms.push(Term::scalar(rho, 1.0));
        }
        le
    });
    let slack = pb.add_scalar_var("kappa_link_slack", ScalarSign::Nonneg);
    pb.add_equality(
        "kappa_link",
        vec![
            Term::scalar(kappa, 1.0),
            Term::scalar(rho, -s_max * s_max * st.coupling_gain_sq * st.link_margin),
            Term::scalar(slack, -1.0),
        ],
        0.0,
    );

    let layout = dissipation_core(
        &mut pb,
        record,
        &handle.d,
        &handle.theta,
        &handle.x_region,
        st.lambda,
        st.pi,
        &st.degrees,
        &const_expr(s_star.clone()),
        &grid_expr(&zb11_grid),
        &zero_expr(),
        &|i, j| {
            if i == j {
                LinExpr::term(Term::scalar(kappa, -1.0))
            } else {
                LinExpr::constant(0.0)
            }
        },
        "passB",
    )?;

    // Contraction against the frozen S*.
    let y = &record.x1t - &handle.d * &record.w0t;
    let h0 = &layout.h_vars[0];
    let con = pb.add_psd_var("contraction", n);
    for i in 0..n {
        for j in i..n {
            let mut terms = vec![Term::psd(con, i, j, 1.0)];
            for k in 0..record.t_samples {
                if y[(i, k)] != 0.0 {
                    terms.push(Term::scalar(h0[k][j], y[(i, k)]));
                }
                if y[(j, k)] != 0.0 {
                    terms.push(Term::scalar(h0[k][i], y[(j, k)]));
                }
            }
            pb.add_equality(
                &format!("contraction_{i}_{j}"),
                terms,
                -2.0 * st.lambda * s_star[(i, j)],
            );
        }
    }

    // Elementwise gain caps |(U⁰ᵀ·H_m·P*)[a,b]| ≤ gain / r^deg.
    let radius = st.gain_cap_radius.unwrap_or_else(|| {
        handle.x_region.boxes[0]
            .lower
            .iter()
            .chain(handle.x_region.boxes[0].upper.iter())
            .fold(1.0f64, |acc, &v| acc.max(v.abs()))
    });
    for (mi, mono) in layout.h_basis.iter().enumerate() {
        let scale = radius.powi(mono.degree() as i32);
        for a in 0..m {
            for bcol in 0..n {
                for (sign, label) in [(1.0, "hi"), (-1.0, "lo")] {
                    let sl = pb.add_scalar_var(
                        &format!("gcap_{label}_{mi}_{a}_{bcol}"),
                        ScalarSign::Nonneg,
                    );
                    let mut terms = vec![Term::scalar(gain, 1.0 / scale), Term::scalar(sl, -1.0)];
                    for k in 0..record.t_samples {
                        for l in 0..n {
                            let w = record.u0t[(a, k)] * p_star[(l, bcol)];
                            if w != 0.0 {
                                terms.push(Term::scalar(layout.h_vars[mi][k][l], -sign * w));
                            }
                        }
                    }
                    pb.add_equality(&format!("gcap_{label}_{mi}_{a}_{bcol}"), terms, 0.0);
                }
            }
        }
    }

    pb.minimize(vec![
        Term::scalar(gain, 1.0),
        Term::scalar(kappa, 1.0),
        Term::scalar(layout.alpha, st.weight_alpha),
    ]);

    Ok((PassB { problem: pb, zb11_grid, kappa }, layout))
}

fn invert_spd(s: &DMatrix<f64>) -> Result<DMatrix<f64>, SynthError> {
    let n = s.nrows();
    let eig = s.clone().symmetric_eigen();
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let lmax = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lmin <= 0.0 || lmax / lmin > 1e10 {
        return Err(SynthError::IllConditioned(if lmin <= 0.0 {
            f64::INFINITY
        } else {
            lmax / lmin
        }));
    }
    let mut p = DMatrix::zeros(n, n);
    for k in 0..n {
        let v = eig.eigenvectors.column(k);
        p += v * v.transpose() / eig.eigenvalues[k];
    }
    // Exact symmetry for downstream transposition identities.
    Ok((&p + p.transpose()) * 0.5)
}

fn extract_sym(sol: &SdpSolution, grid: &[Vec<usize>]) -> DMatrix<f64> {
    let n = grid.len();
    DMatrix::from_fn(n, n, |i, j| sol.scalar_values[grid[i][j]])
}

fn extract_h(sol: &SdpSolution, layout: &DissipationLayout, t: usize, n: usize) -> PolyMatrix {
    let mut h = PolyMatrix::zeros(n, t, n);
    for (mi, mono) in layout.h_basis.iter().enumerate() {
        for k in 0..t {
            for c in 0..n {
                let v = sol.scalar_values[layout.h_vars[mi][k][c]];
                if v != 0.0 {
                    h.get_mut(k, c).add_term(mono.clone(), v);
                }
            }
        }
    }
    h
}

/// Maximum over random sample points of `‖𝒩⁰ᵀ·H(x) − Θ(x)·S‖_∞` — the
/// data-consistency identity every certificate must satisfy.
pub fn data_consistency_residual(
    n0t: &DMatrix<f64>,
    theta: &PolyMatrix,
    h: &PolyMatrix,
    s: &DMatrix<f64>,
    region: &Region,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x = region.boxes[0].sample(&mut rng);
        let lhs = n0t * h.eval(&x);
        let rhs = theta.eval(&x) * s;
        worst = worst.max((lhs - rhs).amax());
    }
    worst
}

/// Full two-pass synthesis: returns a populated certificate with the level
/// constants still unset (see [`compute_levels`]).
pub fn synthesize_csc(
    record: &TrajectoryRecord,
    handle: &SynthHandle,
    st: &SynthesisSettings,
    benchmark: Option<&str>,
) -> Result<StorageCertificate, SynthError> {
    let rank = crate::datagen::check_rank(&record.n0t);
    if !rank.full_row_rank {
        return Err(SynthError::RankDeficient(rank.smallest_singular_value));
    }
    let n = handle.n;
    let t = record.t_samples;
    let h_degree = st.degrees.h_degree.unwrap_or(handle.theta.degree() as usize);
    let infeasible = |stage: &'static str, status: SdpStatus| SynthError::Infeasible {
        stage,
        status,
        lambda: st.lambda,
        pi: st.pi,
        t_samples: t,
        h_degree,
        multiplier_degree: st.degrees.multiplier_degree,
    };

    // Pass one: shape S.
    let (pass_a, _layout_a) = build_pass_a(record, handle, st)?;
    let sol_a = sdp::solve(&pass_a.problem, &st.sdp);
    if !sol_a.is_solved() {
        return Err(infeasible("shaping", sol_a.status));
    }
    let s_star = extract_sym(&sol_a, &pass_a.s_grid);
    let p_star = invert_spd(&s_star)?;

    // Pass two: frozen S, tamed gains.
    let (pass_b, layout_b) = build_pass_b(record, handle, st, &s_star)?;
    let sol_b = sdp::solve(&pass_b.problem, &st.sdp);
    if !sol_b.is_solved() {
        return Err(infeasible("gain-taming", sol_b.status));
    }

    let h = extract_h(&sol_b, &layout_b, t, n);
    let alpha = sol_b.scalar_values[layout_b.alpha];
    let kappa = sol_b.scalar_values[pass_b.kappa];
    let zbar11 = extract_sym(&sol_b, &pass_b.zb11_grid);
    let zbar12 = DMatrix::zeros(n, n);
    let zbar22 = -DMatrix::identity(n, n) * kappa;

    let residual = data_consistency_residual(
        &record.n0t,
        &handle.theta,
        &h,
        &s_star,
        &handle.x_region,
        1000,
        record.seed ^ 0xC0FF_EE00,
    );
    if residual > 1e-6 {
        return Err(SynthError::ConsistencyResidual(residual));
    }

    let q = h.transpose().left_mul(&p_star).transpose();
    let f = q.left_mul(&record.u0t);
    let z12 = &zbar12 * &p_star;
    let z22 = &p_star * &zbar22 * &p_star;
    let phi_bar = if t > 0 { record.psi[(0, 0)] * record.psi[(0, 0)] / t as f64 } else { 0.0 };

    let cert = StorageCertificate {
        n,
        m: record.u0t.nrows(),
        t,
        p: p_star,
        s_inv: s_star,
        h,
        zbar11: zbar11.clone(),
        zbar21: zbar12.transpose(),
        zbar12,
        zbar22: zbar22.clone(),
        z11: zbar11,
        z21: z12.transpose(),
        z12,
        z22,
        alpha,
        pi: st.pi,
        lambda: st.lambda,
        eta: None,
        mu: None,
        q,
        f,
        u0t: record.u0t.clone(),
        provenance: Provenance {
            seed: record.seed,
            benchmark: benchmark.map(str::to_owned),
            tau: record.tau,
            phi_bar,
        },
    };
    cert.validate()?;
    Ok(cert)
}

// ---------------------------------------------------------------------------
// Level sets
// ---------------------------------------------------------------------------

fn quad_poly_expr(p: &DMatrix<f64>, sign: f64) -> PolyExpr {
    let n = p.nrows();
    let mut e = PolyExpr::zero(n);
    for i in 0..n {
        for j in i..n {
            let w = if i == j { p[(i, j)] } else { 2.0 * p[(i, j)] };
            if w != 0.0 {
                let mono = Monomial::var(n, i).mul(&Monomial::var(n, j));
                e.add_constant(mono, sign * w);
            }
        }
    }
    e
}

fn level_over_box(
    p: &DMatrix<f64>,
    b: &BoxRegion,
    maximize_storage: bool,
    degrees: &SynthDegrees,
    sdp_settings: &SdpSettings,
) -> Result<f64, SynthError> {
    let n = p.nrows();
    // Degenerate (point) boxes evaluate directly.
    if b.lower == b.upper {
        let x = b.lower.clone();
        let xv = DVector::from_column_slice(&x);
        return Ok((xv.transpose() * p * &xv)[(0, 0)]);
    }
    let mut pb = SdpProblem::new();
    let level = pb.add_scalar_var("level", ScalarSign::Nonneg);
    let mut expr = quad_poly_expr(p, if maximize_storage { -1.0 } else { 1.0 });
    expr.add_term(
        Monomial::one(n),
        Term::scalar(level, if maximize_storage { 1.0 } else { -1.0 }),
    );
    let c = SosConstraint::scalar(expr, b.poly_description(), degrees.multiplier_degree);
    compile_scalar_sos(&mut pb, &c, "level")?;
    pb.minimize(vec![Term::scalar(level, if maximize_storage { 1.0 } else { -1.0 })]);
    let sol = sdp::solve(&pb, sdp_settings);
    if sol.status != SdpStatus::Optimal {
        return Err(SynthError::LevelFailure(if maximize_storage {
            "initial-set level"
        } else {
            "unsafe-set level"
        }));
    }
    Ok(sol.scalar_values[level])
}

/// Level constants with `P` fixed: `η` upper-bounds `xᵀPx` over every
/// initial box (maximum over boxes), `μ` lower-bounds it over every unsafe
/// box (minimum over boxes). Each bound is one small scalar SOS program;
/// `η` is an over-approximation in general (safe direction) while `μ` is
/// exact for this convex minimization.
pub fn compute_levels(
    p: &DMatrix<f64>,
    x0: &Region,
    xa: &Region,
    degrees: &SynthDegrees,
    sdp_settings: &SdpSettings,
) -> Result<(f64, f64), SynthError> {
    if xa.is_empty() {
        return Err(SynthError::EmptyUnsafeRegion);
    }
    let mut eta = f64::NEG_INFINITY;
    for b in &x0.boxes {
        eta = eta.max(level_over_box(p, b, true, degrees, sdp_settings)?);
    }
    let mut mu = f64::INFINITY;
    for b in &xa.boxes {
        mu = mu.min(level_over_box(p, b, false, degrees, sdp_settings)?);
    }
    Ok((eta, mu))
}

/// Decentralized feedback `u = U⁰ᵀ·H(x)·P·x` for a given certificate.
pub fn eval_local_controller(cert: &StorageCertificate, x: &[f64]) -> DVector<f64> {
    cert.eval_controller(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{collect_trajectory, NoiseSpec};
    use crate::models::{build_benchmark, BenchmarkName, BenchmarkParams, SubsystemModel};
    use crate::polyalg::{build_dictionary, factorize_theta, theta_left_pinv};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    /// 1-D test plant ẋ = −x + u with dictionary [x]: the level geometry is
    /// chosen so S is pinned to 1.05 exactly (vertex floor meets the unsafe
    /// cap), making P = 1/1.05 a hand-derivable optimum.
    fn scalar_model(d: f64) -> SubsystemModel {
        let dict = build_dictionary(1, 1);
        let theta = factorize_theta(&dict).unwrap();
        SubsystemModel::new(
            DMatrix::from_row_slice(1, 1, &[-1.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::from_row_slice(1, 1, &[d]),
            dict,
            theta,
            Region::from_box(BoxRegion::new(vec![-2.0], vec![2.0])),
            Region::from_box(BoxRegion::new(vec![-1.0], vec![1.0])),
            Region::from_box(BoxRegion::new(vec![1.05f64.sqrt()], vec![2.0])),
            Region::from_box(BoxRegion::new(vec![-5.0], vec![5.0])),
            Region::from_box(BoxRegion::new(vec![-1.0], vec![1.0])),
            true,
        )
    }

    fn scalar_settings() -> SynthesisSettings {
        SynthesisSettings {
            level_target: 1.0,
            coupling_gain_sq: 1.0,
            gain_cap_radius: Some(2.0),
            ..SynthesisSettings::default()
        }
    }

    fn synth_scalar(d: f64, phi_bar: f64) -> Result<StorageCertificate, SynthError> {
        let model = scalar_model(d);
        let record =
            collect_trajectory(&model, 6, 0.01, &NoiseSpec::uniform(phi_bar), 2024).unwrap();
        synthesize_csc(&record, &model.synth_handle(), &scalar_settings(), None)
    }

    #[test]
    fn scalar_noiseless_matches_geometry_optimum() {
        let cert = synth_scalar(0.0, 0.0).expect("feasible");
        // The vertex floor S ≥ 1·(1+δ)/L₀ and the unsafe cap S ≤ b²/L₀ with
        // b² = 1.05 pinch S* = 1.05, so P* = 1/1.05.
        assert_abs_diff_eq!(cert.p[(0, 0)], 1.0 / 1.05, epsilon = 1e-4);
        cert.validate().unwrap();
    }

    #[test]
    fn scalar_levels_bracket_the_geometry() {
        let cert = synth_scalar(0.0, 0.0).expect("feasible");
        let model = scalar_model(0.0);
        let (eta, mu) = compute_levels(
            &cert.p,
            &model.synth_handle().x0_region,
            &model.synth_handle().xa_region,
            &SynthDegrees::default(),
            &SdpSettings::default(),
        )
        .unwrap();
        // max over [−1,1] of P·x² = P; min over the unsafe box = P·1.05 = 1.
        assert_abs_diff_eq!(eta, cert.p[(0, 0)], epsilon = 1e-4);
        assert_abs_diff_eq!(mu, 1.0, epsilon = 1e-4);
        assert!(mu > eta);
    }

    #[test]
    fn scalar_closed_loop_contracts() {
        let cert = synth_scalar(0.0, 0.0).expect("feasible");
        // ẋ = −x + u with u = F(x)·x; storage must decay from the initial-set
        // edge.
        let mut x = 1.0;
        let dt = 1e-3;
        let s0 = cert.eval_storage(&[x]);
        for _ in 0..4000 {
            let rhs = |xv: f64| -xv + cert.eval_controller(&[xv])[0];
            let k1 = rhs(x);
            let k2 = rhs(x + 0.5 * dt * k1);
            let k3 = rhs(x + 0.5 * dt * k2);
            let k4 = rhs(x + dt * k3);
            x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            assert!(x.is_finite() && x.abs() < 5.0);
        }
        assert!(cert.eval_storage(&[x]) < 0.2 * s0, "storage failed to decay");
    }

    #[test]
    fn scalar_dissipation_holds_against_true_model() {
        let cert = synth_scalar(0.3, 0.02).expect("feasible");
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let x = rng.gen_range(-2.0..2.0);
            let w = rng.gen_range(-1.0..1.0);
            let u = cert.eval_controller(&[x])[0];
            // The plant the data came from: ẋ = −x + u + 0.3·w.
            let xdot = -x + u + 0.3 * w;
            let s = cert.eval_storage(&[x]);
            let lie = 2.0 * cert.p[(0, 0)] * x * xdot;
            let supply = w * cert.z11[(0, 0)] * w
                + 2.0 * x * cert.z21[(0, 0)] * w
                + x * cert.z22[(0, 0)] * x;
            assert!(
                lie <= -cert.lambda * s + supply + 1e-6 * (1.0 + s.abs()),
                "dissipation violated at x={x}, w={w}"
            );
        }
    }

    #[test]
    fn noise_free_relaxation_stays_feasible() {
        // Same data pipeline, noise envelope removed: the feasible set only
        // grows, so synthesis must still succeed.
        assert!(synth_scalar(0.0, 0.02).is_ok());
        assert!(synth_scalar(0.0, 0.0).is_ok());
    }

    #[test]
    fn aggressive_decay_with_tiny_pi_is_infeasible() {
        let model = scalar_model(0.5);
        let record =
            collect_trajectory(&model, 6, 0.01, &NoiseSpec::uniform(0.02), 2024).unwrap();
        let st = SynthesisSettings {
            lambda: 1e3,
            pi: 1e-6,
            ..scalar_settings()
        };
        match synthesize_csc(&record, &model.synth_handle(), &st, None) {
            Err(SynthError::Infeasible { .. }) => {}
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn assemble_exposes_all_certificate_blocks() {
        let net = build_benchmark(BenchmarkName::DuffingBinary, 1, &BenchmarkParams::default())
            .unwrap();
        let sub = &net.subsystems[0];
        let record =
            collect_trajectory(sub, 18, 0.01, &NoiseSpec::uniform(0.08), 12345).unwrap();
        let handle = sub.synth_handle();
        let (pb, layout) = assemble_dissipation_problem(
            &record,
            &handle.d,
            &handle.dict,
            &handle.theta,
            &handle.x_region,
            0.99,
            1.0,
            &SynthDegrees::default(),
        )
        .unwrap();
        // One T×n coefficient block per basis monomial of H (6 for the cubic
        // dictionary), the symmetric S, α, and all four supply blocks.
        assert_eq!(layout.h_basis.len(), 6);
        assert_eq!(layout.h_vars.len(), 6);
        assert_eq!(layout.h_vars[0].len(), 18);
        assert!(pb.scalar_index("S_0_0").is_some());
        assert!(pb.scalar_index("S_0_1").is_some());
        assert!(pb.scalar_index("S_1_1").is_some());
        assert!(pb.scalar_index("joint_alpha").is_some());
        assert!(pb.scalar_index("Zb11_0_1").is_some());
        assert!(pb.scalar_index("Zb12_1_0").is_some());
        assert!(pb.psd_index("Zb22_neg").is_some());
        assert!(pb.psd_index("S_floor").is_some());
    }

    #[test]
    fn consistency_identity_and_constancy_of_quotient() {
        let cert = synth_scalar(0.0, 0.0).expect("feasible");
        let model = scalar_model(0.0);
        let record =
            collect_trajectory(&model, 6, 0.01, &NoiseSpec::uniform(0.0), 2024).unwrap();
        let handle = model.synth_handle();
        let res = data_consistency_residual(
            &record.n0t,
            &handle.theta,
            &cert.h,
            &cert.s_inv,
            &handle.x_region,
            1000,
            7,
        );
        assert!(res <= 1e-6, "identity residual {res}");
        // λ·Θ†(x)·𝒩⁰ᵀ·H(x) must be the constant λ·S.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = [rng.gen_range(-2.0..2.0f64)];
            let pinv = theta_left_pinv(&handle.theta, &x).unwrap();
            let recovered = &pinv * &record.n0t * cert.h.eval(&x);
            assert_abs_diff_eq!(
                cert.lambda * recovered[(0, 0)],
                cert.lambda * cert.s_inv[(0, 0)],
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn levels_identity_matrix_oracle() {
        let p = DMatrix::identity(2, 2);
        let x0 = Region::from_box(BoxRegion::cube(2, -1.0, 1.0));
        let xa = Region::from_box(BoxRegion::new(vec![2.0, 0.0], vec![2.0, 0.0]));
        let (eta, mu) =
            compute_levels(&p, &x0, &xa, &SynthDegrees::default(), &SdpSettings::default())
                .unwrap();
        // max ‖x‖² over [−1,1]² is at the corners; the unsafe point (2,0)
        // evaluates directly.
        assert_abs_diff_eq!(eta, 2.0, epsilon = 1e-4);
        assert_abs_diff_eq!(mu, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn controller_vanishes_at_origin_and_scales_quadratically_when_linear() {
        let cert = synth_scalar(0.0, 0.0).expect("feasible");
        assert_eq!(cert.eval_controller(&[0.0])[0], 0.0);

        // A hand-built kernel with purely linear H: u(c·x) = c²·u(x).
        let mut h = PolyMatrix::zeros(1, 2, 1);
        h.get_mut(0, 0).add_term(Monomial::var(1, 0), 0.7);
        h.get_mut(1, 0).add_term(Monomial::var(1, 0), -0.2);
        let u0t = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let p = DMatrix::from_row_slice(1, 1, &[3.0]);
        let f = h.transpose().left_mul(&p).transpose().left_mul(&u0t);
        let u_at = |x: f64| f.eval(&[x])[(0, 0)] * x;
        assert_abs_diff_eq!(u_at(2.0), 4.0 * u_at(1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(u_at(-3.0), 9.0 * u_at(-1.0), epsilon = 1e-12);
    }

    #[test]
    fn certificate_json_round_trip_is_stable() {
        let cert = synth_scalar(0.0, 0.0).expect("feasible");
        let s1 = serde_json::to_string_pretty(&cert).unwrap();
        let back: StorageCertificate = serde_json::from_str(&s1).unwrap();
        let s2 = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(back.p, cert.p);
        assert_eq!(back.h.eval(&[0.3]), cert.h.eval(&[0.3]));
    }

    #[test]
    #[ignore]
    fn debug_probe() {
        let model = scalar_model(0.0);
        let record =
            collect_trajectory(&model, 6, 0.01, &NoiseSpec::uniform(0.0), 2024).unwrap();
        let handle = model.synth_handle();
        let st = scalar_settings();
        let (pass_a, _la) = build_pass_a(&record, &handle, &st).unwrap();
        let sol_a = sdp::solve(&pass_a.problem, &st.sdp);
        println!(
            "pass A: status={:?} iters={} rp={:.2e} rd={:.2e} gap={:.2e} obj={:?}",
            sol_a.status,
            sol_a.iterations,
            sol_a.primal_residual,
            sol_a.dual_residual,
            sol_a.duality_gap,
            sol_a.objective
        );
        let s_star = extract_sym(&sol_a, &pass_a.s_grid);
        println!("S* = {s_star}");
        let (pass_b, _lb) = build_pass_b(&record, &handle, &st, &s_star).unwrap();
        println!("{}", pass_b.problem.debug_dump());
        let sol_b = sdp::solve(&pass_b.problem, &st.sdp);
        println!(
            "pass B: status={:?} iters={} rp={:.2e} rd={:.2e} gap={:.2e} obj={:?}",
            sol_b.status,
            sol_b.iterations,
            sol_b.primal_residual,
            sol_b.dual_residual,
            sol_b.duality_gap,
            sol_b.objective
        );
    }

    #[test]
    #[ignore]
    fn duffing_probe() {
        let net = build_benchmark(BenchmarkName::DuffingBinary, 1, &BenchmarkParams::default())
            .unwrap();
        let sub = &net.subsystems[0];
        let record =
            collect_trajectory(sub, 18, 0.01, &NoiseSpec::uniform(0.08), 12345).unwrap();
        let handle = sub.synth_handle();
        let st = SynthesisSettings {
            level_target: BenchmarkName::DuffingBinary.default_level_target(),
            coupling_gain_sq: 2.0,
            gain_cap_radius: Some(10.0),
            ..SynthesisSettings::default()
        };
        let t0 = std::time::Instant::now();
        let cert = synthesize_csc(&record, &handle, &st, Some("duffing")).expect("feasible");
        let t_synth = t0.elapsed();
        let t1 = std::time::Instant::now();
        let (eta, mu) = compute_levels(
            &cert.p,
            &handle.x0_region,
            &handle.xa_region,
            &st.degrees,
            &st.sdp,
        )
        .unwrap();
        println!(
            "synth {:.2?}  levels {:.2?}  P = {}  eta = {eta:.4}  mu = {mu:.4}  alpha = {:.3e}  u(4,4) = {:?}",
            t_synth,
            t1.elapsed(),
            cert.p,
            cert.alpha,
            cert.eval_controller(&[4.0, 4.0]).as_slice(),
        );
        assert!(mu > eta, "levels must separate: eta {eta}, mu {mu}");
    }

    #[test]
    fn empty_unsafe_region_is_rejected() {
        let p = DMatrix::identity(2, 2);
        let x0 = Region::from_box(BoxRegion::cube(2, -1.0, 1.0));
        let xa = Region { boxes: vec![] };
        assert!(matches!(
            compute_levels(&p, &x0, &xa, &SynthDegrees::default(), &SdpSettings::default()),
            Err(SynthError::EmptyUnsafeRegion)
        ));
    }
}

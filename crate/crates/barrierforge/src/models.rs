//! Benchmark subsystem dynamics, interconnection topologies and regions.
//!
//! Every subsystem is a polynomial system `ẋ_i = A_i·R_i(x_i) + B_i·u_i +
//! D_i·w_i` whose internal input `w_i` collects neighbor states through the
//! block coupling pattern `𝕄`: `w = 𝕄·x`. The shipped benchmarks are
//! homogeneous networks of Lorenz, Chen, spacecraft and Duffing oscillators
//! under fully-connected, ring, binary-tree, star and line topologies. The
//! `A`/`B` matrices are treated as unknown by the synthesis pipeline: they are
//! private to this module and only the simulator / ground-truth verifier side
//! reads them, while synthesis receives a [`SynthHandle`] that carries only
//! `D`, the dictionary, Θ and the regions.

use crate::polyalg::{factorize_theta_with, Dictionary, Monomial, PolyMatrix, Polynomial};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("binary topology requires N = 2^l - 1 subsystems, got {0}")]
    BadBinaryCount(usize),
    #[error("topology '{kind}' needs at least {min} subsystems, got {got}")]
    TooFewSubsystems { kind: String, min: usize, got: usize },
    #[error("spacecraft inertias must be three positive values, got {0:?}")]
    BadInertias(Vec<f64>),
    #[error("unknown benchmark '{0}'")]
    UnknownBenchmark(String),
    #[error("dimension mismatch: expected {want}, got {got}")]
    DimensionMismatch { want: usize, got: usize },
    #[error("dictionary/theta override invalid: {0}")]
    BadOverride(#[from] crate::polyalg::PolyError),
    #[error("region has no boxes")]
    EmptyRegion,
}

/// One axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        assert!(
            lower.iter().zip(&upper).all(|(l, u)| l <= u),
            "box lower bound exceeds upper bound"
        );
        BoxRegion { lower, upper }
    }

    pub fn cube(n: usize, lo: f64, hi: f64) -> Self {
        BoxRegion::new(vec![lo; n], vec![hi; n])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&xi, (&l, &u))| xi >= l && xi <= u)
    }

    /// Polynomial description: one entry `(x_k − l_k)(u_k − x_k)` per axis,
    /// all nonnegative exactly on the box.
    pub fn poly_description(&self) -> Vec<Polynomial> {
        let n = self.dim();
        (0..n)
            .map(|k| {
                let xk = Polynomial::from_monomial(Monomial::var(n, k), 1.0);
                let lo = Polynomial::constant(n, self.lower[k]);
                let hi = Polynomial::constant(n, self.upper[k]);
                xk.add(&lo.scale(-1.0)).mul(&hi.add(&xk.scale(-1.0)))
            })
            .collect()
    }

    /// All `2^n` corner points.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..(1usize << n))
            .map(|mask| {
                (0..n)
                    .map(|k| if mask >> k & 1 == 1 { self.upper[k] } else { self.lower[k] })
                    .collect()
            })
            .collect()
    }

    /// Closest point of the box to the origin (component-wise clamp of 0).
    pub fn nearest_to_origin(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| 0.0f64.max(l).min(u))
            .collect()
    }

    /// Uniform grid with `res` points per axis (degenerate axes collapse to
    /// their single value).
    pub fn grid(&self, res: usize) -> Vec<Vec<f64>> {
        let n = self.dim();
        let axes: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                if self.upper[k] == self.lower[k] || res <= 1 {
                    vec![self.lower[k]]
                } else {
                    (0..res)
                        .map(|i| {
                            self.lower[k]
                                + (self.upper[k] - self.lower[k]) * i as f64 / (res - 1) as f64
                        })
                        .collect()
                }
            })
            .collect();
        let total: usize = axes.iter().map(Vec::len).product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            out.push((0..n).map(|k| axes[k][idx[k]]).collect());
            for k in (0..n).rev() {
                idx[k] += 1;
                if idx[k] < axes[k].len() {
                    break;
                }
                idx[k] = 0;
            }
        }
        out
    }

    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if l == u { l } else { rng.gen_range(l..=u) })
            .collect()
    }
}

/// A union of axis-aligned boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub boxes: Vec<BoxRegion>,
}

impl Region {
    pub fn from_box(b: BoxRegion) -> Self {
        Region { boxes: vec![b] }
    }

    pub fn dim(&self) -> usize {
        self.boxes.first().map(BoxRegion::dim).unwrap_or(0)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.boxes.iter().any(|b| b.contains(x))
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Interconnection pattern kinds shipped with the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Fully,
    Ring,
    Binary,
    Star,
    Line,
    Custom,
}

/// Sparse block coupling pattern: `w_i = Σ_j weight_{ij} · x_j` over the
/// stored `(i, j, weight)` triples (block indices, no self-loops).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub n_subs: usize,
    pub kind: TopologyKind,
    /// `(receiver block, sender block, scalar weight)`, receiver ≠ sender.
    pub blocks: Vec<(usize, usize, f64)>,
    /// Per-subsystem state dimensions.
    pub dims: Vec<usize>,
}

impl Topology {
    pub fn new(
        kind: TopologyKind,
        n_subs: usize,
        dims: Vec<usize>,
        blocks: Vec<(usize, usize, f64)>,
    ) -> Result<Self, ModelError> {
        if dims.len() != n_subs {
            return Err(ModelError::DimensionMismatch { want: n_subs, got: dims.len() });
        }
        assert!(
            blocks.iter().all(|&(i, j, _)| i != j && i < n_subs && j < n_subs),
            "topology blocks must be off-diagonal and in range"
        );
        Ok(Topology { kind, n_subs, blocks, dims })
    }

    pub fn fully(n_subs: usize, dim: usize) -> Result<Self, ModelError> {
        if n_subs < 2 {
            return Err(ModelError::TooFewSubsystems { kind: "fully".into(), min: 2, got: n_subs });
        }
        let blocks = (0..n_subs)
            .flat_map(|i| (0..n_subs).filter(move |&j| j != i).map(move |j| (i, j, 1.0)))
            .collect();
        Topology::new(TopologyKind::Fully, n_subs, vec![dim; n_subs], blocks)
    }

    pub fn ring(n_subs: usize, dim: usize) -> Result<Self, ModelError> {
        if n_subs < 2 {
            return Err(ModelError::TooFewSubsystems { kind: "ring".into(), min: 2, got: n_subs });
        }
        let mut blocks: Vec<(usize, usize, f64)> = (1..n_subs).map(|i| (i, i - 1, 1.0)).collect();
        blocks.insert(0, (0, n_subs - 1, 1.0));
        Topology::new(TopologyKind::Ring, n_subs, vec![dim; n_subs], blocks)
    }

    pub fn line(n_subs: usize, dim: usize) -> Result<Self, ModelError> {
        if n_subs < 2 {
            return Err(ModelError::TooFewSubsystems { kind: "line".into(), min: 2, got: n_subs });
        }
        let blocks = (1..n_subs).map(|i| (i, i - 1, 1.0)).collect();
        Topology::new(TopologyKind::Line, n_subs, vec![dim; n_subs], blocks)
    }

    pub fn star(n_subs: usize, dim: usize) -> Result<Self, ModelError> {
        if n_subs < 2 {
            return Err(ModelError::TooFewSubsystems { kind: "star".into(), min: 2, got: n_subs });
        }
        let blocks = (1..n_subs).map(|i| (i, 0, 1.0)).collect();
        Topology::new(TopologyKind::Star, n_subs, vec![dim; n_subs], blocks)
    }

    /// Balanced binary tree: subsystem `i` (1-indexed `i ≥ 2`) receives the
    /// state of its parent `⌊i/2⌋`. Requires `N = 2^l − 1`.
    pub fn binary(n_subs: usize, dim: usize) -> Result<Self, ModelError> {
        if n_subs == 0 || (n_subs + 1) & n_subs != 0 {
            return Err(ModelError::BadBinaryCount(n_subs));
        }
        let blocks = (2..=n_subs).map(|i| (i - 1, i / 2 - 1, 1.0)).collect();
        Topology::new(TopologyKind::Binary, n_subs, vec![dim; n_subs], blocks)
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Offsets of each subsystem's block in the stacked state vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.n_subs);
        let mut acc = 0;
        for &d in &self.dims {
            off.push(acc);
            acc += d;
        }
        off
    }

    /// `w = 𝕄·x` without materializing `𝕄`; cost `O(nnz blocks)`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.total_dim(), "topology matvec dimension mismatch");
        let off = self.offsets();
        let mut w = vec![0.0; x.len()];
        for &(i, j, wt) in &self.blocks {
            debug_assert_eq!(self.dims[i], self.dims[j], "coupled blocks must share dims");
            for k in 0..self.dims[i] {
                w[off[i] + k] += wt * x[off[j] + k];
            }
        }
        w
    }

    /// `𝕄ᵀ·x`, the adjoint of [`Topology::matvec`].
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.total_dim(), "topology matvec dimension mismatch");
        let off = self.offsets();
        let mut w = vec![0.0; x.len()];
        for &(i, j, wt) in &self.blocks {
            for k in 0..self.dims[i] {
                w[off[j] + k] += wt * x[off[i] + k];
            }
        }
        w
    }

    /// Dense `𝕄` for small networks (tests and oracles).
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.total_dim();
        let off = self.offsets();
        let mut m = DMatrix::zeros(n, n);
        for &(i, j, wt) in &self.blocks {
            for k in 0..self.dims[i] {
                m[(off[i] + k, off[j] + k)] += wt;
            }
        }
        m
    }

    /// Number of neighbors feeding subsystem `i`.
    pub fn indegree(&self, i: usize) -> usize {
        self.blocks.iter().filter(|&&(r, _, _)| r == i).count()
    }

    /// Sum of |weights| feeding subsystem `i` (box scaling for the internal
    /// input region).
    pub fn in_weight(&self, i: usize) -> f64 {
        self.blocks
            .iter()
            .filter(|&&(r, _, _)| r == i)
            .map(|&(_, _, w)| w.abs())
            .sum()
    }

    /// Upper bound on `‖𝕄‖²` from the row/column-sum bound
    /// `‖𝕄‖² ≤ ‖𝕄‖_1·‖𝕄‖_∞` (exact for the shipped 0/1 patterns' needs).
    pub fn coupling_norm_sq_bound(&self) -> f64 {
        let mut row = vec![0.0f64; self.n_subs];
        let mut col = vec![0.0f64; self.n_subs];
        for &(i, j, w) in &self.blocks {
            row[i] += w.abs();
            col[j] += w.abs();
        }
        let rmax = row.iter().cloned().fold(0.0, f64::max);
        let cmax = col.iter().cloned().fold(0.0, f64::max);
        rmax * cmax
    }
}

/// Synthesis-side view of a subsystem: everything except the hidden `A`, `B`.
#[derive(Debug, Clone, Serialize)]
pub struct SynthHandle {
    pub n: usize,
    pub m: usize,
    pub d: DMatrix<f64>,
    pub dict: Dictionary,
    pub theta: PolyMatrix,
    pub x_region: Region,
    pub x0_region: Region,
    pub xa_region: Region,
    pub u_region: Region,
    pub w_region: Region,
}

/// One subsystem `ẋ = A·R(x) + B·u + D·w`. `A` and `B` are private: when the
/// model is flagged hidden, only the simulator/ground-truth-verification side
/// reads them via [`SubsystemModel::true_ab`].
#[derive(Debug, Clone)]
pub struct SubsystemModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub dict: Dictionary,
    pub theta: PolyMatrix,
    pub x_region: Region,
    pub x0_region: Region,
    pub xa_region: Region,
    pub u_region: Region,
    pub w_region: Region,
    pub hidden: bool,
}

impl SubsystemModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        dict: Dictionary,
        theta: PolyMatrix,
        x_region: Region,
        x0_region: Region,
        xa_region: Region,
        u_region: Region,
        w_region: Region,
        hidden: bool,
    ) -> Self {
        assert_eq!(a.nrows(), d.nrows());
        assert_eq!(a.ncols(), dict.len());
        assert_eq!(b.nrows(), a.nrows());
        SubsystemModel {
            a,
            b,
            d,
            dict,
            theta,
            x_region,
            x0_region,
            xa_region,
            u_region,
            w_region,
            hidden,
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m_inputs(&self) -> usize {
        self.b.ncols()
    }

    /// Simulator/ground-truth access to the hidden dynamics matrices. The
    /// synthesis pipeline never calls this; it operates on [`SynthHandle`].
    pub fn true_ab(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.a, &self.b)
    }

    /// The model view handed to synthesis: no `A`, no `B`.
    pub fn synth_handle(&self) -> SynthHandle {
        SynthHandle {
            n: self.n(),
            m: self.m_inputs(),
            d: self.d.clone(),
            dict: self.dict.clone(),
            theta: self.theta.clone(),
            x_region: self.x_region.clone(),
            x0_region: self.x0_region.clone(),
            xa_region: self.xa_region.clone(),
            u_region: self.u_region.clone(),
            w_region: self.w_region.clone(),
        }
    }

    /// True right-hand side `A·R(x) + B·u + D·w` (simulator side).
    pub fn rhs(&self, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
        let r = self.dict.eval(x);
        let u = DMatrix::from_column_slice(u.len(), 1, u);
        let w = DMatrix::from_column_slice(w.len(), 1, w);
        let out = &self.a * r + &self.b * u + &self.d * w;
        out.column(0).iter().copied().collect()
    }
}

/// An interconnected network: homogeneous or heterogeneous subsystem list plus
/// the coupling pattern.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub subsystems: Vec<SubsystemModel>,
    pub topology: Topology,
    pub benchmark: Option<BenchmarkName>,
}

impl NetworkModel {
    /// Full network right-hand side with `w = 𝕄x`.
    pub fn rhs(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let w = self.topology.matvec(x);
        let off = self.topology.offsets();
        let mut dx = vec![0.0; x.len()];
        let mut u_off = 0;
        for (i, sub) in self.subsystems.iter().enumerate() {
            let n = sub.n();
            let m = sub.m_inputs();
            let d = sub.rhs(
                &x[off[i]..off[i] + n],
                &u[u_off..u_off + m],
                &w[off[i]..off[i] + n],
            );
            dx[off[i]..off[i] + n].copy_from_slice(&d);
            u_off += m;
        }
        dx
    }

    pub fn total_inputs(&self) -> usize {
        self.subsystems.iter().map(SubsystemModel::m_inputs).sum()
    }
}

/// Benchmark identifiers (system family + topology).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkName {
    LorenzFully,
    LorenzRing,
    SpacecraftBinary,
    SpacecraftStar,
    ChenLine,
    DuffingBinary,
}

impl BenchmarkName {
    pub const ALL: [BenchmarkName; 6] = [
        BenchmarkName::LorenzFully,
        BenchmarkName::LorenzRing,
        BenchmarkName::SpacecraftBinary,
        BenchmarkName::SpacecraftStar,
        BenchmarkName::ChenLine,
        BenchmarkName::DuffingBinary,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BenchmarkName::LorenzFully => "lorenz_fully",
            BenchmarkName::LorenzRing => "lorenz_ring",
            BenchmarkName::SpacecraftBinary => "spacecraft_binary",
            BenchmarkName::SpacecraftStar => "spacecraft_star",
            BenchmarkName::ChenLine => "chen_line",
            BenchmarkName::DuffingBinary => "duffing_binary",
        }
    }

    /// Published table defaults: (N, T, phi_bar) per benchmark row.
    pub fn table_defaults(&self) -> (usize, usize, f64) {
        match self {
            BenchmarkName::LorenzFully => (1000, 15, 0.03),
            BenchmarkName::LorenzRing => (1500, 13, 0.12),
            BenchmarkName::SpacecraftBinary => (1023, 15, 0.75),
            BenchmarkName::SpacecraftStar => (2000, 17, 0.75),
            BenchmarkName::ChenLine => (1000, 12, 0.27),
            BenchmarkName::DuffingBinary => (1023, 18, 0.08),
        }
    }

    /// Default level-set normalization target for synthesis, on the order of
    /// the published μ_i for the row.
    pub fn default_level_target(&self) -> f64 {
        match self {
            BenchmarkName::LorenzFully => 100.0,
            BenchmarkName::LorenzRing => 125.0,
            BenchmarkName::SpacecraftBinary => 89.0,
            BenchmarkName::SpacecraftStar => 132.0,
            BenchmarkName::ChenLine => 36.0,
            BenchmarkName::DuffingBinary => 400.0,
        }
    }
}

impl std::str::FromStr for BenchmarkName {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BenchmarkName::ALL
            .iter()
            .copied()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| ModelError::UnknownBenchmark(s.to_string()))
    }
}

/// Tunable benchmark parameters; `Default` gives the published configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkParams {
    /// Spacecraft principal moments of inertia `(J1, J2, J3)`.
    pub inertias: Option<[f64; 3]>,
    /// External-input box half-width as a multiple of the largest state-box
    /// half-width (drives both the input region and data excitation).
    pub input_scale: f64,
    /// Explicit dictionary ordering override (exponent vectors).
    pub dict_override: Option<Vec<Vec<u32>>>,
    /// Explicit Θ column assignment (one column per dictionary entry).
    pub theta_override: Option<Vec<usize>>,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        BenchmarkParams {
            inertias: None,
            input_scale: 20.0,
            dict_override: None,
            theta_override: None,
        }
    }
}

fn mono3(e: [u32; 3]) -> Monomial {
    Monomial::new(e.to_vec())
}

fn mono2(e: [u32; 2]) -> Monomial {
    Monomial::new(e.to_vec())
}

/// The dictionary ordering used by the 3-D chaotic benchmarks:
/// `[x1, x2, x3, x1x3, x1x2, x2x3, x1², x2², x3²]`.
pub fn lorenz_dictionary() -> Dictionary {
    Dictionary::new(
        3,
        vec![
            mono3([1, 0, 0]),
            mono3([0, 1, 0]),
            mono3([0, 0, 1]),
            mono3([1, 0, 1]),
            mono3([1, 1, 0]),
            mono3([0, 1, 1]),
            mono3([2, 0, 0]),
            mono3([0, 2, 0]),
            mono3([0, 0, 2]),
        ],
    )
    .expect("static dictionary")
}

/// Spacecraft ordering: `[x1, x2, x3, x2x3, x3x1, x1x2, x1², x2², x3²]`.
pub fn spacecraft_dictionary() -> Dictionary {
    Dictionary::new(
        3,
        vec![
            mono3([1, 0, 0]),
            mono3([0, 1, 0]),
            mono3([0, 0, 1]),
            mono3([0, 1, 1]),
            mono3([1, 0, 1]),
            mono3([1, 1, 0]),
            mono3([2, 0, 0]),
            mono3([0, 2, 0]),
            mono3([0, 0, 2]),
        ],
    )
    .expect("static dictionary")
}

/// Duffing ordering: `[x1, x2, x1x2, x1², x2², x1²x2, x1x2², x1³, x2³]`.
pub fn duffing_dictionary() -> Dictionary {
    Dictionary::new(
        2,
        vec![
            mono2([1, 0]),
            mono2([0, 1]),
            mono2([1, 1]),
            mono2([2, 0]),
            mono2([0, 2]),
            mono2([2, 1]),
            mono2([1, 2]),
            mono2([3, 0]),
            mono2([0, 3]),
        ],
    )
    .expect("static dictionary")
}

/// Published Θ column assignments (deviating from the lowest-index rule where
/// the appendix layouts do).
fn theta_columns(name: BenchmarkName, dict: &Dictionary) -> Vec<usize> {
    let lowest: Vec<usize> = dict
        .entries
        .iter()
        .map(|m| m.exponents.iter().position(|&e| e > 0).unwrap())
        .collect();
    match name {
        BenchmarkName::DuffingBinary => {
            // x1²x2 is divided by x2 (quotient x1²) in the published layout.
            let mut cols = lowest;
            let idx = dict
                .entries
                .iter()
                .position(|m| m.exponents == vec![2, 1])
                .expect("duffing dictionary has x1^2 x2");
            cols[idx] = 1;
            cols
        }
        BenchmarkName::SpacecraftBinary | BenchmarkName::SpacecraftStar => {
            // x2x3 is divided by x3 (quotient x2) in the published layout.
            let mut cols = lowest;
            let idx = dict
                .entries
                .iter()
                .position(|m| m.exponents == vec![0, 1, 1])
                .expect("spacecraft dictionary has x2 x3");
            cols[idx] = 2;
            cols
        }
        _ => lowest,
    }
}

struct BenchPieces {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    dict: Dictionary,
    x: Region,
    x0: Region,
    xa: Region,
}

fn lorenz_like_a(dict: &Dictionary, a11: f64, a12: f64, a21: f64, a22: f64, a33: f64) -> DMatrix<f64> {
    // Rows over the declared dictionary: ẋ1 = a11·x1 + a12·x2,
    // ẋ2 = a21·x1 + a22·x2 − x1x3, ẋ3 = x1x2 + a33·x3.
    let idx = |e: [u32; 3]| {
        dict.entries
            .iter()
            .position(|m| m.exponents == e.to_vec())
            .expect("monomial in dictionary")
    };
    let mut a = DMatrix::zeros(3, dict.len());
    a[(0, idx([1, 0, 0]))] = a11;
    a[(0, idx([0, 1, 0]))] = a12;
    a[(1, idx([1, 0, 0]))] = a21;
    a[(1, idx([0, 1, 0]))] = a22;
    a[(1, idx([1, 0, 1]))] = -1.0;
    a[(2, idx([0, 0, 1]))] = a33;
    a[(2, idx([1, 1, 0]))] = 1.0;
    a
}

fn pieces(name: BenchmarkName, params: &BenchmarkParams) -> Result<BenchPieces, ModelError> {
    let dict = match (&params.dict_override, name) {
        (Some(list), _) => {
            let n = list.first().map(Vec::len).unwrap_or(0);
            Dictionary::new(n, list.iter().cloned().map(Monomial::new).collect())?
        }
        (None, BenchmarkName::DuffingBinary) => duffing_dictionary(),
        (None, BenchmarkName::SpacecraftBinary | BenchmarkName::SpacecraftStar) => {
            spacecraft_dictionary()
        }
        (None, _) => lorenz_dictionary(),
    };
    Ok(match name {
        BenchmarkName::LorenzFully => BenchPieces {
            a: lorenz_like_a(&dict, -10.0, 10.0, 28.0, -1.0, -8.0 / 3.0),
            b: DMatrix::identity(3, 3),
            d: DMatrix::identity(3, 3) * -1e-5,
            dict,
            x: Region::from_box(BoxRegion::cube(3, -20.0, 20.0)),
            x0: Region::from_box(BoxRegion::cube(3, -3.0, 3.0)),
            xa: Region {
                boxes: vec![
                    BoxRegion::new(vec![-20.0, -20.0, 4.0], vec![-4.0, -15.0, 20.0]),
                    BoxRegion::new(vec![5.0, 11.0, 4.0], vec![20.0, 20.0, 20.0]),
                    BoxRegion::new(vec![5.0, 11.0, -20.0], vec![20.0, 20.0, -4.0]),
                ],
            },
        },
        BenchmarkName::LorenzRing => BenchPieces {
            a: lorenz_like_a(&dict, -10.0, 10.0, 28.0, -1.0, -8.0 / 3.0),
            b: DMatrix::identity(3, 3),
            d: DMatrix::identity(3, 3) * -0.08,
            dict,
            x: Region::from_box(BoxRegion::cube(3, -20.0, 20.0)),
            x0: Region::from_box(BoxRegion::cube(3, -3.0, 3.0)),
            xa: Region {
                boxes: vec![
                    BoxRegion::new(vec![-20.0, -20.0, 5.0], vec![-10.0, -5.0, 20.0]),
                    BoxRegion::new(vec![3.5, 15.0, 5.0], vec![20.0, 20.0, 20.0]),
                    BoxRegion::new(vec![3.5, 15.0, -20.0], vec![20.0, 20.0, -5.0]),
                ],
            },
        },
        BenchmarkName::ChenLine => BenchPieces {
            a: lorenz_like_a(&dict, -35.0, 35.0, -7.0, 28.0, -3.0),
            b: DMatrix::identity(3, 3),
            d: DMatrix::identity(3, 3) * -0.005,
            dict,
            x: Region::from_box(BoxRegion::cube(3, -20.0, 20.0)),
            x0: Region::from_box(BoxRegion::cube(3, -2.5, 2.5)),
            xa: Region {
                boxes: vec![
                    BoxRegion::new(vec![-20.0, -20.0, -20.0], vec![-9.0, -11.0, -8.0]),
                    BoxRegion::new(vec![3.5, 5.0, 4.0], vec![20.0, 20.0, 20.0]),
                ],
            },
        },
        BenchmarkName::SpacecraftBinary | BenchmarkName::SpacecraftStar => {
            let j = params.inertias.unwrap_or([2.0, 1.0, 0.5]);
            if j.iter().any(|&ji| ji <= 0.0) {
                return Err(ModelError::BadInertias(j.to_vec()));
            }
            let idx = |e: [u32; 3]| {
                dict.entries
                    .iter()
                    .position(|m| m.exponents == e.to_vec())
                    .expect("monomial in dictionary")
            };
            let mut a = DMatrix::zeros(3, dict.len());
            a[(0, idx([0, 1, 1]))] = (j[1] - j[2]) / j[0];
            a[(1, idx([1, 0, 1]))] = (j[2] - j[0]) / j[1];
            a[(2, idx([1, 1, 0]))] = (j[0] - j[1]) / j[2];
            let binv = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
                1.0 / j[0],
                1.0 / j[1],
                1.0 / j[2],
            ]));
            let gain = if name == BenchmarkName::SpacecraftBinary { 0.08 } else { 0.02 };
            let (xa, x, x0) = if name == BenchmarkName::SpacecraftBinary {
                (
                    Region {
                        boxes: vec![
                            BoxRegion::new(vec![2.5, -5.0, -5.0], vec![5.0, -3.0, -2.5]),
                            BoxRegion::new(vec![2.5, 2.5, 2.5], vec![5.0, 5.0, 5.0]),
                            BoxRegion::new(vec![-5.0, 2.5, 2.5], vec![-3.0, 5.0, 5.0]),
                        ],
                    },
                    Region::from_box(BoxRegion::cube(3, -5.0, 5.0)),
                    Region::from_box(BoxRegion::cube(3, -2.0, 2.0)),
                )
            } else {
                (
                    Region {
                        boxes: vec![
                            BoxRegion::new(vec![2.5, -5.0, -5.0], vec![5.0, -3.0, -4.0]),
                            BoxRegion::new(vec![2.5, 4.0, 2.5], vec![5.0, 5.0, 5.0]),
                            BoxRegion::new(vec![-5.0, 4.0, 2.5], vec![-4.0, 5.0, 5.0]),
                        ],
                    },
                    Region::from_box(BoxRegion::cube(3, -5.0, 5.0)),
                    Region::from_box(BoxRegion::cube(3, -2.0, 2.0)),
                )
            };
            BenchPieces { a, b: binv.clone(), d: binv * gain, dict, x, x0, xa }
        }
        BenchmarkName::DuffingBinary => {
            let idx = |e: [u32; 2]| {
                dict.entries
                    .iter()
                    .position(|m| m.exponents == e.to_vec())
                    .expect("monomial in dictionary")
            };
            let mut a = DMatrix::zeros(2, dict.len());
            a[(0, idx([0, 1]))] = 1.0;
            a[(1, idx([1, 0]))] = 2.0;
            a[(1, idx([0, 1]))] = -0.5;
            a[(1, idx([3, 0]))] = -0.01;
            let mut d = DMatrix::zeros(2, 2);
            d[(1, 0)] = 0.005;
            BenchPieces {
                a,
                b: DMatrix::identity(2, 2),
                d,
                dict,
                x: Region::from_box(BoxRegion::cube(2, -10.0, 10.0)),
                x0: Region::from_box(BoxRegion::cube(2, -4.0, 4.0)),
                xa: Region {
                    boxes: vec![
                        BoxRegion::new(vec![-10.0, -10.0], vec![-6.0, -5.0]),
                        BoxRegion::new(vec![6.0, 5.0], vec![10.0, 10.0]),
                    ],
                },
            }
        }
    })
}

/// Assemble a benchmark network with `N` homogeneous subsystems. `A`, `B` are
/// flagged hidden; synthesis receives [`SynthHandle`]s.
pub fn build_benchmark(
    name: BenchmarkName,
    n_subs: usize,
    params: &BenchmarkParams,
) -> Result<NetworkModel, ModelError> {
    let p = pieces(name, params)?;
    let n = p.a.nrows();
    let topology = match name {
        BenchmarkName::LorenzFully => Topology::fully(n_subs, n)?,
        BenchmarkName::LorenzRing => Topology::ring(n_subs, n)?,
        BenchmarkName::SpacecraftBinary | BenchmarkName::DuffingBinary => {
            Topology::binary(n_subs, n)?
        }
        BenchmarkName::SpacecraftStar => Topology::star(n_subs, n)?,
        BenchmarkName::ChenLine => Topology::line(n_subs, n)?,
    };
    let cols = params
        .theta_override
        .clone()
        .unwrap_or_else(|| theta_columns(name, &p.dict));
    let theta = factorize_theta_with(&p.dict, &cols)?;
    // External input box: a scaled version of the state box.
    let hw = p.x.boxes[0]
        .upper
        .iter()
        .zip(&p.x.boxes[0].lower)
        .map(|(&u, &l)| (u - l) / 2.0)
        .fold(0.0f64, f64::max);
    let m_inputs = p.b.ncols();
    let u_region = Region::from_box(BoxRegion::cube(m_inputs, -params.input_scale * hw, params.input_scale * hw));
    // Internal input box: the state box image under 𝕄, scaled by each
    // subsystem's in-weight (zero box for uncoupled roots).
    let subsystems = (0..n_subs)
        .map(|i| {
            let scale = topology.in_weight(i);
            let wb = &p.x.boxes[0];
            let w_region = Region::from_box(BoxRegion::new(
                wb.lower.iter().map(|&l| l * scale).collect(),
                wb.upper.iter().map(|&u| u * scale).collect(),
            ));
            SubsystemModel::new(
                p.a.clone(),
                p.b.clone(),
                p.d.clone(),
                p.dict.clone(),
                theta.clone(),
                p.x.clone(),
                p.x0.clone(),
                p.xa.clone(),
                u_region.clone(),
                w_region,
                true,
            )
        })
        .collect();
    Ok(NetworkModel { subsystems, topology, benchmark: Some(name) })
}

/// The subsystem with the largest internal-input envelope — the representative
/// for homogeneous data collection (its `W` box covers every subsystem's).
pub fn representative_subsystem(net: &NetworkModel) -> usize {
    (0..net.topology.n_subs)
        .max_by(|&a, &b| {
            net.topology
                .in_weight(a)
                .partial_cmp(&net.topology.in_weight(b))
                .unwrap()
        })
        .unwrap_or(0)
}

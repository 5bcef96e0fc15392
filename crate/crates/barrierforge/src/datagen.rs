//! Trajectory simulation and single-trajectory data collection.
//!
//! Synthesis consumes one noisy input-state trajectory per subsystem: matrices
//! `U0T` (inputs), `W0T` (internal inputs), `X0T` (states) and `X1T` (noisy
//! state derivatives) sampled every `τ` seconds, with the derivative
//! measurement corrupted by a per-sample noise vector of bounded energy
//! `‖φ‖² ≤ φ̄`. The noise envelope is summarized by `Ψ = √(φ̄·T)·[I_n | 0]`,
//! so that `ΦΦᵀ ⪯ ΨΨᵀ` for every admissible realization. Excitation is
//! piecewise constant and uniformly drawn; if the lifted data matrix `N0T`
//! fails the full-row-rank requirement, collection re-draws with a derived
//! seed up to ten times.

use crate::models::{Region, SubsystemModel};
use crate::polyalg::Dictionary;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default half-width of the divergence guard box around the origin.
pub const DEFAULT_BLOWUP: f64 = 1e6;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("state escaped the blow-up box at t = {time:.6}")]
    Divergence { time: f64 },
    #[error("sample count {t} below minimum {min} (dictionary size + 1)")]
    TooFewSamples { t: usize, min: usize },
    #[error(
        "lifted data matrix rank-deficient after {attempts} draws \
         (last smallest singular value {sigma_min:.3e})"
    )]
    RankDeficient { attempts: usize, sigma_min: f64 },
    #[error("trajectory file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("trajectory file malformed: {0}")]
    Malformed(String),
    #[error("sidecar JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Noise model for the derivative measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Bound on the squared norm of every noise sample.
    pub phi_bar: f64,
    pub distribution: NoiseDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    /// Uniform over the ball of radius `√phi_bar`.
    UniformBall,
    /// Gaussian with σ = `√phi_bar`/3, rescaled onto the ball boundary when
    /// the draw exceeds the bound.
    ScaledGaussianClipped,
}

impl NoiseSpec {
    pub fn uniform(phi_bar: f64) -> Self {
        NoiseSpec { phi_bar, distribution: NoiseDistribution::UniformBall }
    }

    fn draw<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        if self.phi_bar == 0.0 {
            return vec![0.0; n];
        }
        let radius = self.phi_bar.sqrt();
        match self.distribution {
            NoiseDistribution::UniformBall => {
                // Direction from normalized Gaussians, radius ∝ U^(1/n).
                let g: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                let r = radius * rng.gen_range(0.0..1.0f64).powf(1.0 / n as f64);
                g.iter().map(|v| v / norm * r).collect()
            }
            NoiseDistribution::ScaledGaussianClipped => {
                let g: Vec<f64> = (0..n).map(|_| gaussian(rng) * radius / 3.0).collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > radius {
                    g.iter().map(|v| v / norm * radius).collect()
                } else {
                    g
                }
            }
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; two uniforms per sample keeps the stream deterministic.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One collected trajectory: everything synthesis is allowed to see, plus the
/// hidden noise realization for simulator-side validation only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub tau: f64,
    pub t0: f64,
    /// Sample count.
    pub t_samples: usize,
    pub u0t: DMatrix<f64>,
    pub w0t: DMatrix<f64>,
    pub x0t: DMatrix<f64>,
    pub x1t: DMatrix<f64>,
    /// Noise envelope `√(φ̄·T)·[I_n | 0]` (n × T).
    pub psi: DMatrix<f64>,
    /// Lifted data: column k = `R(x_k)` (M × T).
    pub n0t: DMatrix<f64>,
    pub seed: u64,
    /// Actual noise realization. Ground truth for validation; synthesis code
    /// must never read it.
    #[serde(skip)]
    phi: Option<DMatrix<f64>>,
}

impl TrajectoryRecord {
    /// Simulator-side access to the hidden noise realization.
    pub fn noise_realization(&self) -> Option<&DMatrix<f64>> {
        self.phi.as_ref()
    }
}

/// Fixed-step simulation output.
#[derive(Debug, Clone)]
pub struct SimPath {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
}

impl SimPath {
    pub fn final_state(&self) -> &[f64] {
        self.x.last().expect("non-empty path")
    }
}

fn rk4_step<F>(f: &F, t: f64, x: &[f64], dt: f64) -> Vec<f64>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let k1 = f(t, x);
    let x2: Vec<f64> = x.iter().zip(&k1).map(|(xi, ki)| xi + 0.5 * dt * ki).collect();
    let k2 = f(t + 0.5 * dt, &x2);
    let x3: Vec<f64> = x.iter().zip(&k2).map(|(xi, ki)| xi + 0.5 * dt * ki).collect();
    let k3 = f(t + 0.5 * dt, &x3);
    let x4: Vec<f64> = x.iter().zip(&k3).map(|(xi, ki)| xi + dt * ki).collect();
    let k4 = f(t + dt, &x4);
    x.iter()
        .enumerate()
        .map(|(i, xi)| xi + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Classical fixed-step RK4 integration of one subsystem under the given
/// input signals, with a divergence guard.
pub fn simulate<FU, FW>(
    model: &SubsystemModel,
    x0: &[f64],
    u_signal: FU,
    w_signal: FW,
    dt: f64,
    horizon: f64,
) -> Result<SimPath, DatagenError>
where
    FU: Fn(f64) -> Vec<f64>,
    FW: Fn(f64) -> Vec<f64>,
{
    simulate_with_bound(model, x0, u_signal, w_signal, dt, horizon, DEFAULT_BLOWUP)
}

/// [`simulate`] with an explicit blow-up box half-width.
#[allow(clippy::too_many_arguments)]
pub fn simulate_with_bound<FU, FW>(
    model: &SubsystemModel,
    x0: &[f64],
    u_signal: FU,
    w_signal: FW,
    dt: f64,
    horizon: f64,
    blow_up: f64,
) -> Result<SimPath, DatagenError>
where
    FU: Fn(f64) -> Vec<f64>,
    FW: Fn(f64) -> Vec<f64>,
{
    assert!(dt > 0.0, "dt must be positive");
    let f = |t: f64, x: &[f64]| model.rhs(x, &u_signal(t), &w_signal(t));
    let steps = (horizon / dt).floor() as usize;
    let remainder = horizon - steps as f64 * dt;
    let mut path = SimPath { t: Vec::with_capacity(steps + 2), x: Vec::with_capacity(steps + 2) };
    let mut x = x0.to_vec();
    let mut t = 0.0;
    path.t.push(t);
    path.x.push(x.clone());
    for k in 0..steps {
        x = rk4_step(&f, t, &x, dt);
        t = (k + 1) as f64 * dt;
        if x.iter().any(|v| !v.is_finite() || v.abs() > blow_up) {
            return Err(DatagenError::Divergence { time: t });
        }
        path.t.push(t);
        path.x.push(x.clone());
    }
    // Fractional last step so the path ends exactly at the horizon.
    if remainder > 1e-12 * dt {
        x = rk4_step(&f, t, &x, remainder);
        t = horizon;
        if x.iter().any(|v| !v.is_finite() || v.abs() > blow_up) {
            return Err(DatagenError::Divergence { time: t });
        }
        path.t.push(t);
        path.x.push(x.clone());
    }
    Ok(path)
}

/// Column-wise lift of state samples through the dictionary.
pub fn build_n0t(x0t: &DMatrix<f64>, dict: &Dictionary) -> DMatrix<f64> {
    let t = x0t.ncols();
    let m = dict.len();
    let mut n0t = DMatrix::zeros(m, t);
    for k in 0..t {
        let x: Vec<f64> = x0t.column(k).iter().copied().collect();
        let r = dict.eval(&x);
        for i in 0..m {
            n0t[(i, k)] = r[(i, 0)];
        }
    }
    n0t
}

/// Rank diagnosis for the lifted data matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankCheck {
    pub full_row_rank: bool,
    pub smallest_singular_value: f64,
}

/// Full row rank iff the smallest singular value exceeds
/// `1e-8 · σ_max`.
pub fn check_rank(n0t: &DMatrix<f64>) -> RankCheck {
    let svd = n0t.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let smin = if n0t.nrows() <= n0t.ncols() {
        svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min)
    } else {
        0.0
    };
    RankCheck {
        full_row_rank: smin > 1e-8 * smax && smin.is_finite(),
        smallest_singular_value: if smin.is_finite() { smin } else { 0.0 },
    }
}

fn sample_region<R: Rng>(region: &Region, rng: &mut R) -> Vec<f64> {
    assert!(!region.is_empty(), "cannot sample an empty region");
    let idx = if region.boxes.len() == 1 { 0 } else { rng.gen_range(0..region.boxes.len()) };
    region.boxes[idx].sample(rng)
}

/// Collect one noisy input-state trajectory with piecewise-constant uniform
/// excitation, re-drawing (derived seeds) until the lifted data matrix has
/// full row rank.
pub fn collect_trajectory(
    model: &SubsystemModel,
    t_samples: usize,
    tau: f64,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<TrajectoryRecord, DatagenError> {
    let m_dict = model.dict.len();
    if t_samples < m_dict + 1 {
        return Err(DatagenError::TooFewSamples { t: t_samples, min: m_dict + 1 });
    }
    let mut last_sigma = 0.0;
    for attempt in 0..10u64 {
        let record = collect_once(model, t_samples, tau, noise, seed, attempt)?;
        let rank = check_rank(&record.n0t);
        if rank.full_row_rank {
            return Ok(record);
        }
        last_sigma = rank.smallest_singular_value;
    }
    Err(DatagenError::RankDeficient { attempts: 10, sigma_min: last_sigma })
}

fn collect_once(
    model: &SubsystemModel,
    t_samples: usize,
    tau: f64,
    noise: &NoiseSpec,
    seed: u64,
    attempt: u64,
) -> Result<TrajectoryRecord, DatagenError> {
    let n = model.n();
    let m = model.m_inputs();
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let dt = tau / 50.0;

    let mut u0t = DMatrix::zeros(m, t_samples);
    let mut w0t = DMatrix::zeros(n, t_samples);
    let mut x0t = DMatrix::zeros(n, t_samples);
    let mut x1t = DMatrix::zeros(n, t_samples);
    let mut phi = DMatrix::zeros(n, t_samples);

    let mut x = sample_region(&model.x0_region, &mut rng);
    for k in 0..t_samples {
        let u = sample_region(&model.u_region, &mut rng);
        let w = sample_region(&model.w_region, &mut rng);
        let noise_k = noise.draw(n, &mut rng);
        let xdot = model.rhs(&x, &u, &w);
        for (i, &v) in u.iter().enumerate() {
            u0t[(i, k)] = v;
        }
        for i in 0..n {
            w0t[(i, k)] = w[i];
            x0t[(i, k)] = x[i];
            x1t[(i, k)] = xdot[i] + noise_k[i];
            phi[(i, k)] = noise_k[i];
        }
        // Advance to the next sample instant under the held inputs.
        let f = |_t: f64, s: &[f64]| model.rhs(s, &u, &w);
        for _ in 0..50 {
            x = rk4_step(&f, 0.0, &x, dt);
            if x.iter().any(|v| !v.is_finite() || v.abs() > DEFAULT_BLOWUP) {
                return Err(DatagenError::Divergence { time: k as f64 * tau });
            }
        }
    }

    let scale = (noise.phi_bar * t_samples as f64).sqrt();
    let mut psi = DMatrix::zeros(n, t_samples);
    for i in 0..n {
        psi[(i, i)] = scale;
    }
    let n0t = build_n0t(&x0t, &model.dict);
    Ok(TrajectoryRecord {
        tau,
        t0: 0.0,
        t_samples,
        u0t,
        w0t,
        x0t,
        x1t,
        psi,
        n0t,
        seed,
        phi: Some(phi),
    })
}

#[derive(Serialize, Deserialize)]
struct PsiSidecar {
    tau: f64,
    t0: f64,
    seed: u64,
    psi: Vec<Vec<f64>>,
}

/// Write a record as CSV (`t,u_1..u_m,w_1..w_n,x_1..x_n,xdot_1..xdot_n`) plus
/// a `.psi.json` sidecar carrying the noise envelope and sampling metadata.
pub fn export_csv(record: &TrajectoryRecord, path: &std::path::Path) -> Result<(), DatagenError> {
    let m = record.u0t.nrows();
    let n = record.x0t.nrows();
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|i| format!("u_{i}")));
    header.extend((1..=n).map(|i| format!("w_{i}")));
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=n).map(|i| format!("xdot_{i}")));
    wtr.write_record(&header)?;
    for k in 0..record.t_samples {
        let mut row = vec![format!("{:.17e}", record.t0 + k as f64 * record.tau)];
        row.extend((0..m).map(|i| format!("{:.17e}", record.u0t[(i, k)])));
        row.extend((0..n).map(|i| format!("{:.17e}", record.w0t[(i, k)])));
        row.extend((0..n).map(|i| format!("{:.17e}", record.x0t[(i, k)])));
        row.extend((0..n).map(|i| format!("{:.17e}", record.x1t[(i, k)])));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    let sidecar = PsiSidecar {
        tau: record.tau,
        t0: record.t0,
        seed: record.seed,
        psi: (0..n)
            .map(|i| (0..record.t_samples).map(|k| record.psi[(i, k)]).collect())
            .collect(),
    };
    let sidecar_path = sidecar_path_for(path);
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

fn sidecar_path_for(path: &std::path::Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".psi.json");
    std::path::PathBuf::from(s)
}

/// Load a record previously written by [`export_csv`]. The dictionary is
/// needed to rebuild the lifted data matrix; the noise realization is not
/// recoverable (by design).
pub fn import_csv(
    path: &std::path::Path,
    dict: &Dictionary,
) -> Result<TrajectoryRecord, DatagenError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.first() != Some(&"t") {
        return Err(DatagenError::Malformed("first column must be t".into()));
    }
    let m = names.iter().filter(|h| h.starts_with("u_")).count();
    let n = names.iter().filter(|h| h.starts_with("x_")).count();
    if names.len() != 1 + m + 3 * n {
        return Err(DatagenError::Malformed(format!(
            "expected 1 + m + 3n columns, got {} with m={m}, n={n}",
            names.len()
        )));
    }
    let mut times = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let vals: Vec<f64> = row
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DatagenError::Malformed(format!("bad float: {e}")))?;
        times.push(vals[0]);
        cols.push(vals[1..].to_vec());
    }
    let t_samples = cols.len();
    if t_samples == 0 {
        return Err(DatagenError::Malformed("no data rows".into()));
    }
    let grab = |offset: usize, rows: usize| {
        DMatrix::from_fn(rows, t_samples, |i, k| cols[k][offset + i])
    };
    let u0t = grab(0, m);
    let w0t = grab(m, n);
    let x0t = grab(m + n, n);
    let x1t = grab(m + 2 * n, n);
    let sidecar: PsiSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path_for(path))?)?;
    let psi = DMatrix::from_fn(n, t_samples, |i, k| sidecar.psi[i][k]);
    let n0t = build_n0t(&x0t, dict);
    Ok(TrajectoryRecord {
        tau: sidecar.tau,
        t0: sidecar.t0,
        t_samples,
        u0t,
        w0t,
        x0t,
        x1t,
        psi,
        n0t,
        seed: sidecar.seed,
        phi: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_benchmark, BenchmarkName, BenchmarkParams, BoxRegion, Region};
    use crate::polyalg::{build_dictionary, factorize_theta, Monomial};
    use approx::assert_abs_diff_eq;

    fn toy_model(a: DMatrix<f64>, dict: Dictionary) -> SubsystemModel {
        let n = a.nrows();
        let theta = factorize_theta(&dict).unwrap();
        let cube = Region::from_box(BoxRegion::cube(n, -10.0, 10.0));
        SubsystemModel::new(
            a,
            DMatrix::zeros(n, 1),
            DMatrix::zeros(n, n),
            dict,
            theta,
            cube.clone(),
            cube.clone(),
            cube.clone(),
            Region::from_box(BoxRegion::cube(1, 0.0, 0.0)),
            Region::from_box(BoxRegion::cube(n, 0.0, 0.0)),
            false,
        )
    }

    #[test]
    fn rk4_oscillator_full_period() {
        let dict = build_dictionary(2, 1);
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let model = toy_model(a, dict);
        let path = simulate(
            &model,
            &[1.0, 0.0],
            |_| vec![0.0],
            |_| vec![0.0, 0.0],
            1e-3,
            2.0 * std::f64::consts::PI,
        )
        .unwrap();
        let xf = path.final_state();
        assert_abs_diff_eq!(xf[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(xf[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_dynamics_path_is_constant() {
        let dict = build_dictionary(2, 1);
        let model = toy_model(DMatrix::zeros(2, 2), dict);
        let path = simulate(&model, &[0.3, -0.7], |_| vec![0.0], |_| vec![0.0, 0.0], 0.01, 1.0)
            .unwrap();
        for x in &path.x {
            assert_eq!(x, &vec![0.3, -0.7]);
        }
    }

    #[test]
    fn duffing_origin_is_equilibrium() {
        let net = build_benchmark(BenchmarkName::DuffingBinary, 7, &BenchmarkParams::default())
            .unwrap();
        let path = simulate(
            &net.subsystems[0],
            &[0.0, 0.0],
            |_| vec![0.0, 0.0],
            |_| vec![0.0, 0.0],
            1e-3,
            1.0,
        )
        .unwrap();
        assert_eq!(path.final_state(), &[0.0, 0.0]);
    }

    #[test]
    fn divergence_reports_escape_time() {
        // ẋ = x² from x0 = 5 blows up in finite time.
        let dict = build_dictionary(1, 2);
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let model = toy_model(a, dict);
        let err = simulate(&model, &[5.0], |_| vec![0.0], |_| vec![0.0], 1e-3, 1.0)
            .expect_err("must diverge");
        match err {
            DatagenError::Divergence { time } => assert!(time > 0.0 && time < 1.0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duffing_noise_envelope_matches_bound() {
        let net = build_benchmark(BenchmarkName::DuffingBinary, 7, &BenchmarkParams::default())
            .unwrap();
        let rec = collect_trajectory(
            &net.subsystems[1],
            18,
            0.01,
            &NoiseSpec::uniform(0.08),
            12345,
        )
        .unwrap();
        let pp = &rec.psi * rec.psi.transpose();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 0.08 * 18.0 } else { 0.0 };
                assert_abs_diff_eq!(pp[(i, j)], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn lorenz_noise_envelope_matches_bound() {
        let net = build_benchmark(BenchmarkName::LorenzFully, 3, &BenchmarkParams::default())
            .unwrap();
        let rec =
            collect_trajectory(&net.subsystems[0], 15, 0.01, &NoiseSpec::uniform(0.03), 7)
                .unwrap();
        let pp = &rec.psi * rec.psi.transpose();
        for i in 0..3 {
            assert_abs_diff_eq!(pp[(i, i)], 0.45, epsilon = 1e-12);
        }
    }

    #[test]
    fn noiseless_collection_gives_exact_derivatives() {
        let net = build_benchmark(BenchmarkName::DuffingBinary, 7, &BenchmarkParams::default())
            .unwrap();
        let sub = &net.subsystems[1];
        let rec = collect_trajectory(sub, 18, 0.01, &NoiseSpec::uniform(0.0), 3).unwrap();
        for k in 0..18 {
            let x: Vec<f64> = rec.x0t.column(k).iter().copied().collect();
            let u: Vec<f64> = rec.u0t.column(k).iter().copied().collect();
            let w: Vec<f64> = rec.w0t.column(k).iter().copied().collect();
            let xdot = sub.rhs(&x, &u, &w);
            for i in 0..2 {
                assert_abs_diff_eq!(rec.x1t[(i, k)], xdot[i], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn noise_gram_dominated_by_envelope() {
        let net = build_benchmark(BenchmarkName::LorenzFully, 3, &BenchmarkParams::default())
            .unwrap();
        for seed in [1u64, 2, 3, 4, 5] {
            let rec =
                collect_trajectory(&net.subsystems[0], 15, 0.01, &NoiseSpec::uniform(0.03), seed)
                    .unwrap();
            let phi = rec.noise_realization().unwrap();
            // Per-sample energy bound…
            for k in 0..15 {
                let e: f64 = (0..3).map(|i| phi[(i, k)].powi(2)).sum();
                assert!(e <= 0.03 + 1e-15, "sample energy {e} exceeds bound");
            }
            // …implies the Gram-domination ΦΦᵀ ⪯ ΨΨᵀ.
            let gap = &rec.psi * rec.psi.transpose() - phi * phi.transpose();
            let eig = gap.symmetric_eigen();
            for ev in eig.eigenvalues.iter() {
                assert!(*ev >= -1e-12, "envelope violated: eigenvalue {ev}");
            }
        }
    }

    #[test]
    fn lifted_matrix_columns_match_theta_factorization() {
        let net = build_benchmark(BenchmarkName::DuffingBinary, 7, &BenchmarkParams::default())
            .unwrap();
        let sub = &net.subsystems[1];
        let rec = collect_trajectory(sub, 18, 0.01, &NoiseSpec::uniform(0.08), 99).unwrap();
        for k in 0..18 {
            let x: Vec<f64> = rec.x0t.column(k).iter().copied().collect();
            let tx = sub.theta.eval(&x) * DMatrix::from_column_slice(2, 1, &x);
            for i in 0..sub.dict.len() {
                assert_abs_diff_eq!(rec.n0t[(i, k)], tx[(i, 0)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn build_n0t_single_variable() {
        let dict = build_dictionary(1, 1);
        let x0t = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let n0t = build_n0t(&x0t, &dict);
        assert_eq!(n0t, DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]));
    }

    #[test]
    fn build_n0t_mixed_monomial_column() {
        let dict = Dictionary::new(
            2,
            vec![
                Monomial::new(vec![1, 0]),
                Monomial::new(vec![0, 1]),
                Monomial::new(vec![1, 1]),
            ],
        )
        .unwrap();
        let x0t = DMatrix::from_column_slice(2, 1, &[2.0, 3.0]);
        let n0t = build_n0t(&x0t, &dict);
        assert_eq!(n0t.column(0).as_slice(), &[2.0, 3.0, 6.0]);
    }

    #[test]
    fn rank_check_examples() {
        let full = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(check_rank(&full).full_row_rank);
        let deficient = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(!check_rank(&deficient).full_row_rank);
    }

    #[test]
    fn collection_rejects_too_few_samples() {
        let net = build_benchmark(BenchmarkName::DuffingBinary, 7, &BenchmarkParams::default())
            .unwrap();
        let err = collect_trajectory(&net.subsystems[0], 9, 0.01, &NoiseSpec::uniform(0.0), 1)
            .expect_err("nine samples cannot cover a nine-entry dictionary");
        assert!(matches!(err, DatagenError::TooFewSamples { t: 9, min: 10 }));
    }

    #[test]
    fn collection_is_deterministic_per_seed() {
        let net = build_benchmark(BenchmarkName::DuffingBinary, 7, &BenchmarkParams::default())
            .unwrap();
        let a = collect_trajectory(&net.subsystems[1], 18, 0.01, &NoiseSpec::uniform(0.08), 42)
            .unwrap();
        let b = collect_trajectory(&net.subsystems[1], 18, 0.01, &NoiseSpec::uniform(0.08), 42)
            .unwrap();
        assert_eq!(a.x0t, b.x0t);
        assert_eq!(a.x1t, b.x1t);
        assert_eq!(a.u0t, b.u0t);
        assert_eq!(a.w0t, b.w0t);
    }

    #[test]
    fn data_identity_reproduces_true_dynamics() {
        // Any polynomial right-inverse Q(x) of the lifted data with
        // N0T·Q(x) = Θ(x) turns the cleaned data into AΘ(x) + B·F(x),
        // F = U0T·Q. Checked at 1000 random points.
        let net = build_benchmark(BenchmarkName::DuffingBinary, 7, &BenchmarkParams::default())
            .unwrap();
        let sub = &net.subsystems[1];
        let rec = collect_trajectory(sub, 18, 0.01, &NoiseSpec::uniform(0.08), 12345).unwrap();
        let pinv = rec
            .n0t
            .clone()
            .svd(true, true)
            .pseudo_inverse(1e-10)
            .expect("full row rank");
        let q = sub.theta.left_mul(&pinv); // T × n polynomial matrix
        let f = q.left_mul(&rec.u0t); // m × n
        let cleaned = &rec.x1t - &sub.d * &rec.w0t - rec.noise_realization().unwrap();
        let (a, b) = sub.true_ab();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        use rand::Rng;
        for _ in 0..1000 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let xv = DMatrix::from_column_slice(2, 1, &x);
            let lhs = cleaned.clone() * q.eval(&x) * &xv;
            let rhs = a * sub.theta.eval(&x) * &xv + b * f.eval(&x) * &xv;
            for i in 0..2 {
                assert_abs_diff_eq!(lhs[(i, 0)], rhs[(i, 0)], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn csv_roundtrip_preserves_record() {
        let net = build_benchmark(BenchmarkName::DuffingBinary, 7, &BenchmarkParams::default())
            .unwrap();
        let sub = &net.subsystems[1];
        let rec = collect_trajectory(sub, 18, 0.01, &NoiseSpec::uniform(0.08), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        export_csv(&rec, &path).unwrap();
        let back = import_csv(&path, &sub.dict).unwrap();
        assert_eq!(back.t_samples, rec.t_samples);
        assert_eq!(back.seed, rec.seed);
        assert_abs_diff_eq!(back.tau, rec.tau, epsilon = 0.0);
        for (got, want) in [
            (&back.u0t, &rec.u0t),
            (&back.w0t, &rec.w0t),
            (&back.x0t, &rec.x0t),
            (&back.x1t, &rec.x1t),
            (&back.psi, &rec.psi),
            (&back.n0t, &rec.n0t),
        ] {
            assert_eq!(got.nrows(), want.nrows());
            for (g, w) in got.iter().zip(want.iter()) {
                assert_abs_diff_eq!(g, w, epsilon = 0.0);
            }
        }
        assert!(back.noise_realization().is_none(), "noise must not survive export");
    }
}

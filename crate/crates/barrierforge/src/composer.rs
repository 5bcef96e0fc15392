//! Network-level composition of per-subsystem storage certificates.
//!
//! Each subsystem carries a storage function `S_i(x_i) = x_iᵀP_i x_i` with a
//! dissipation inequality against the quadratic supply rate
//! `[w_i; x_i]ᵀ ℤ_i [w_i; x_i]`. Interconnecting the subsystems through
//! `w = 𝕄·x` closes the supply loop, and the sum `𝓑(x) = Σ_i S_i(x_i)`
//! becomes a control barrier certificate for the whole network provided two
//! conditions hold: the composed supply must be dissipated,
//!
//! ```text
//!   [𝕄; I]ᵀ · blkdiag(ℤ_1, …, ℤ_N) · [𝕄; I] ⪯ 0 ,
//! ```
//!
//! and the summed level sets must stay separated, `Ση_i < Σμ_i`. The first
//! condition is a single linear-algebra check on block-structured data — no
//! further optimization — which is what makes the per-subsystem synthesis
//! compositional: networks of thousands of nodes are checked in the time it
//! takes to run a sparse eigenvalue iteration.
//!
//! This module builds the composed operator without materializing it,
//! evaluates the check, assembles the network certificate (decay rate
//! `λ = min_i λ_i`), and drives the enlarge-and-retry loop used when a check
//! fails: sample counts grow geometrically, synthesis re-runs with fresh
//! seeds, and every attempt is recorded.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certsynth::{
    compute_levels, synthesize_csc, StorageCertificate, SynthError, SynthesisSettings,
};
use crate::datagen::{collect_trajectory, DatagenError, NoiseSpec};
use crate::models::{representative_subsystem, NetworkModel, Topology};
use crate::sdp::{lambda_max_structured, SdpError};

/// Default bound certifying `λ_max ⪯ 0` in floating point. The dissipation
/// condition is exact in the theory; the tolerance is reported alongside the
/// computed value so the margin is always visible.
pub const DEFAULT_PSD_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("certificate {index} has no {which} level; run level computation first")]
    MissingLevel { index: usize, which: &'static str },
    #[error("certificate {index}: supply blocks are {got}×{got} but the state is {want}-dimensional")]
    BlockShape { index: usize, want: usize, got: usize },
    #[error("topology couples {want} subsystems but {got} certificates were supplied")]
    CountMismatch { want: usize, got: usize },
    #[error("composition check failed: λ_max = {lambda_max:.3e} (tol {psd_tol:.1e}), level margin = {level_margin:.3e}")]
    CheckFailed { lambda_max: f64, psd_tol: f64, level_margin: f64 },
    #[error("retries exhausted after {} attempts", attempts.len())]
    RetriesExhausted { attempts: Vec<AttemptRecord> },
    #[error("subsystem {index} synthesis failed: {source}")]
    Synthesis {
        index: usize,
        #[source]
        source: SynthError,
    },
    #[error("subsystem {index} data collection failed: {source}")]
    Data {
        index: usize,
        #[source]
        source: DatagenError,
    },
    #[error(transparent)]
    Eigen(#[from] SdpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Composed supply operator
// ---------------------------------------------------------------------------

/// Block-diagonal arrangement of the per-subsystem supply matrices,
///
/// ```text
///   ℤ^comp = [[blkdiag(Z¹¹_i), blkdiag(Z¹²_i)],
///             [blkdiag(Z²¹_i), blkdiag(Z²²_i)]] ,
/// ```
///
/// exposed through its matrix–vector product on stacked `[w; x]` vectors so
/// that large networks never pay for a dense `2n × 2n` matrix.
pub struct ZcompOperator<'a> {
    certs: &'a [StorageCertificate],
    offsets: Vec<usize>,
    total: usize,
}

impl<'a> ZcompOperator<'a> {
    /// Stacked state dimension `n = Σ n_i`.
    pub fn state_dim(&self) -> usize {
        self.total
    }

    /// Operator dimension `2n`.
    pub fn dim(&self) -> usize {
        2 * self.total
    }

    /// `ℤ^comp · [w; x]`, evaluated block-by-block in parallel.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim(), "zcomp matvec dimension mismatch");
        let (w, x) = v.split_at(self.total);
        let parts: Vec<(DVector<f64>, DVector<f64>)> = self
            .certs
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let o = self.offsets[i];
                let wi = DVector::from_column_slice(&w[o..o + c.n]);
                let xi = DVector::from_column_slice(&x[o..o + c.n]);
                (&c.z11 * &wi + &c.z12 * &xi, &c.z21 * &wi + &c.z22 * &xi)
            })
            .collect();
        let mut out = vec![0.0; self.dim()];
        for (i, (ow, ox)) in parts.iter().enumerate() {
            let o = self.offsets[i];
            out[o..o + ow.len()].copy_from_slice(ow.as_slice());
            out[self.total + o..self.total + o + ox.len()].copy_from_slice(ox.as_slice());
        }
        out
    }

    /// Dense `2n × 2n` materialization for small networks (tests, oracles).
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.total;
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        for (i, c) in self.certs.iter().enumerate() {
            let o = self.offsets[i];
            for r in 0..c.n {
                for s in 0..c.n {
                    m[(o + r, o + s)] = c.z11[(r, s)];
                    m[(o + r, n + o + s)] = c.z12[(r, s)];
                    m[(n + o + r, o + s)] = c.z21[(r, s)];
                    m[(n + o + r, n + o + s)] = c.z22[(r, s)];
                }
            }
        }
        m
    }
}

/// Arrange the certificates' supply blocks into the composed operator.
pub fn build_zcomp(certs: &[StorageCertificate]) -> Result<ZcompOperator<'_>, ComposeError> {
    let mut offsets = Vec::with_capacity(certs.len());
    let mut total = 0;
    for (i, c) in certs.iter().enumerate() {
        for blk in [&c.z11, &c.z12, &c.z21, &c.z22] {
            if blk.nrows() != c.n || blk.ncols() != c.n {
                return Err(ComposeError::BlockShape { index: i, want: c.n, got: blk.nrows() });
            }
        }
        offsets.push(total);
        total += c.n;
    }
    Ok(ZcompOperator { certs, offsets, total })
}

// ---------------------------------------------------------------------------
// Composition check
// ---------------------------------------------------------------------------

/// Outcome of the dissipativity + level check for one interconnection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompositionCheck {
    pub passes: bool,
    /// Largest eigenvalue of `𝕄ᵀZ¹¹𝕄 + 𝕄ᵀZ¹² + Z²¹𝕄 + Z²²`.
    pub lambda_max: f64,
    /// Tolerance under which `lambda_max` certifies `⪯ 0`.
    pub psd_tol: f64,
    /// `Ση_i < Σμ_i`.
    pub level_ok: bool,
    /// `Σμ_i − Ση_i`.
    pub level_margin: f64,
}

/// Evaluate the composition condition on the interconnected supply operator
/// `[𝕄; I]ᵀ ℤ^comp [𝕄; I]` restricted to the stacked state space.
///
/// A failing check is a normal result — it routes into the retry loop — so
/// only structural problems (shape mismatches, missing levels) are errors.
pub fn check_composition(
    top: &Topology,
    certs: &[StorageCertificate],
    psd_tol: f64,
) -> Result<CompositionCheck, ComposeError> {
    if top.n_subs != certs.len() {
        return Err(ComposeError::CountMismatch { want: top.n_subs, got: certs.len() });
    }
    for (i, (c, &d)) in certs.iter().zip(&top.dims).enumerate() {
        if c.n != d {
            return Err(ComposeError::BlockShape { index: i, want: d, got: c.n });
        }
    }
    let mut eta_sum = 0.0;
    let mut mu_sum = 0.0;
    for (i, c) in certs.iter().enumerate() {
        eta_sum += c.eta.ok_or(ComposeError::MissingLevel { index: i, which: "eta" })?;
        mu_sum += c.mu.ok_or(ComposeError::MissingLevel { index: i, which: "mu" })?;
    }

    let zcomp = build_zcomp(certs)?;
    let n = zcomp.state_dim();
    let composed = |x: &[f64]| -> Vec<f64> {
        // [𝕄;I]ᵀ ℤ [𝕄;I] x = 𝕄ᵀ(Z¹¹𝕄x + Z¹²x) + Z²¹𝕄x + Z²²x.
        let mut v = top.matvec(x);
        v.extend_from_slice(x);
        let z = zcomp.matvec(&v);
        let mut out = top.matvec_transpose(&z[..n]);
        for (o, zi) in out.iter_mut().zip(&z[n..]) {
            *o += zi;
        }
        out
    };
    let lambda_max = lambda_max_structured(composed, n, 1e-8)?;

    let level_ok = eta_sum < mu_sum;
    Ok(CompositionCheck {
        passes: lambda_max <= psd_tol && level_ok,
        lambda_max,
        psd_tol,
        level_ok,
        level_margin: mu_sum - eta_sum,
    })
}

// ---------------------------------------------------------------------------
// Barrier certificate
// ---------------------------------------------------------------------------

/// The network-level certificate: `𝓑(x) = Σ_i x_iᵀ P_i x_i` with initial
/// level `η = Ση_i`, unsafe level `μ = Σμ_i > η`, and decay rate
/// `λ = min_i λ_i`, together with the decentralized controller stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BarrierCertificate {
    pub topology: Topology,
    pub certs: Vec<StorageCertificate>,
    pub eta: f64,
    pub mu: f64,
    pub lambda: f64,
    pub check: CompositionCheck,
}

impl BarrierCertificate {
    pub fn n_subs(&self) -> usize {
        self.certs.len()
    }

    pub fn total_dim(&self) -> usize {
        self.topology.total_dim()
    }

    /// `𝓑(x) = Σ_i S_i(x_i)` on a stacked state.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let off = self.topology.offsets();
        self.certs
            .iter()
            .zip(&off)
            .map(|(c, &o)| c.eval_storage(&x[o..o + c.n]))
            .sum()
    }

    /// Stacked decentralized feedback `u = [u_1; …; u_N]`, each
    /// `u_i = F_i(x_i)·x_i` reading only its own subsystem state.
    pub fn eval_controllers(&self, x: &[f64]) -> Vec<f64> {
        let off = self.topology.offsets();
        let mut u = Vec::new();
        for (c, &o) in self.certs.iter().zip(&off) {
            u.extend_from_slice(c.eval_controller(&x[o..o + c.n]).as_slice());
        }
        u
    }
}

/// Combine checked storage certificates into the network CBC. Refuses a
/// failed check: the levels and the supply condition are exactly what make
/// the sum a barrier, so assembling without them would be meaningless.
pub fn assemble_cbc(
    top: &Topology,
    certs: Vec<StorageCertificate>,
    check: CompositionCheck,
) -> Result<BarrierCertificate, ComposeError> {
    if !check.passes {
        return Err(ComposeError::CheckFailed {
            lambda_max: check.lambda_max,
            psd_tol: check.psd_tol,
            level_margin: check.level_margin,
        });
    }
    let mut eta = 0.0;
    let mut mu = 0.0;
    let mut lambda = f64::INFINITY;
    for (i, c) in certs.iter().enumerate() {
        eta += c.eta.ok_or(ComposeError::MissingLevel { index: i, which: "eta" })?;
        mu += c.mu.ok_or(ComposeError::MissingLevel { index: i, which: "mu" })?;
        lambda = lambda.min(c.lambda);
    }
    Ok(BarrierCertificate { topology: top.clone(), certs, eta, mu, lambda, check })
}

// ---------------------------------------------------------------------------
// Retry policy
// ---------------------------------------------------------------------------

/// How the sample set grows when a composition check fails.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Multiplier on the per-subsystem sample count, rounded up.
    pub t_growth: f64,
    /// Additional attempts after the initial one.
    pub max_retries: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { t_growth: 1.25, max_retries: 3 }
    }
}

/// One synthesis-and-check attempt, kept for provenance whether it passed
/// or not.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub t_samples: usize,
    pub seed: u64,
    pub lambda_max: f64,
    pub level_margin: f64,
    pub passes: bool,
}

/// Settings for the next attempt: the sample count grows by the configured
/// factor and the seed moves to a fresh, deterministic stream.
pub fn next_attempt(t_samples: usize, seed: u64, policy: &RetryPolicy) -> (usize, u64) {
    let grown = (t_samples as f64 * policy.t_growth).ceil() as usize;
    (grown.max(t_samples + 1), seed.wrapping_add(0x9E37_79B9_7F4A_7C15))
}

// ---------------------------------------------------------------------------
// Network synthesis driver
// ---------------------------------------------------------------------------

/// Everything the network driver needs beyond the model itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSynthConfig {
    pub t_samples: usize,
    pub tau: f64,
    pub phi_bar: f64,
    pub seed: u64,
    #[serde(default)]
    pub settings: SynthesisSettings,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_psd_tol")]
    pub psd_tol: f64,
    /// Synthesize one representative subsystem and share its certificate
    /// when every subsystem has identical dynamics. `None` decides from the
    /// model (benchmark networks are homogeneous).
    #[serde(default)]
    pub homogeneous: Option<bool>,
}

fn default_psd_tol() -> f64 {
    DEFAULT_PSD_TOL
}

/// Synthesize certificates for every subsystem, check the composition, and
/// retry with enlarged sample sets until it passes or the budget runs out.
/// Returns the assembled CBC together with the full attempt history.
pub fn synthesize_network(
    net: &NetworkModel,
    cfg: &NetworkSynthConfig,
) -> Result<(BarrierCertificate, Vec<AttemptRecord>), ComposeError> {
    let homogeneous = cfg.homogeneous.unwrap_or(net.benchmark.is_some());
    compose_with(&net.topology, &cfg.retry, cfg.t_samples, cfg.seed, cfg.psd_tol, |t, seed| {
        synthesize_certs(net, cfg, homogeneous, t, seed)
    })
}

/// The retry loop itself, generic over the per-attempt certificate producer
/// so the bookkeeping is testable without running real synthesis.
fn compose_with<F>(
    top: &Topology,
    policy: &RetryPolicy,
    t0: usize,
    seed0: u64,
    psd_tol: f64,
    mut produce: F,
) -> Result<(BarrierCertificate, Vec<AttemptRecord>), ComposeError>
where
    F: FnMut(usize, u64) -> Result<Vec<StorageCertificate>, ComposeError>,
{
    let mut attempts = Vec::new();
    let mut t = t0;
    let mut seed = seed0;
    for _ in 0..=policy.max_retries {
        let certs = produce(t, seed)?;
        let check = check_composition(top, &certs, psd_tol)?;
        attempts.push(AttemptRecord {
            t_samples: t,
            seed,
            lambda_max: check.lambda_max,
            level_margin: check.level_margin,
            passes: check.passes,
        });
        if check.passes {
            let cbc = assemble_cbc(top, certs, check)?;
            return Ok((cbc, attempts));
        }
        (t, seed) = next_attempt(t, seed, policy);
    }
    Err(ComposeError::RetriesExhausted { attempts })
}

/// One round of per-subsystem synthesis. The coupling gain bound fed into
/// each local program always comes from the actual interconnection — that is
/// the only value under which the local supply rates compose.
fn synthesize_certs(
    net: &NetworkModel,
    cfg: &NetworkSynthConfig,
    homogeneous: bool,
    t_samples: usize,
    seed: u64,
) -> Result<Vec<StorageCertificate>, ComposeError> {
    let mut settings = cfg.settings.clone();
    settings.coupling_gain_sq = net.topology.coupling_norm_sq_bound().max(1e-9);
    if let Some(b) = net.benchmark {
        settings.level_target = b.default_level_target();
    }
    let noise = NoiseSpec::uniform(cfg.phi_bar);
    let bench_name = net.benchmark.map(|b| b.as_str().to_string());

    let synth_one = |index: usize, sub_seed: u64| -> Result<StorageCertificate, ComposeError> {
        let sub = &net.subsystems[index];
        let record = collect_trajectory(sub, t_samples, cfg.tau, &noise, sub_seed)
            .map_err(|source| ComposeError::Data { index, source })?;
        let handle = sub.synth_handle();
        let mut cert = synthesize_csc(&record, &handle, &settings, bench_name.as_deref())
            .map_err(|source| ComposeError::Synthesis { index, source })?;
        let (eta, mu) =
            compute_levels(&cert.p, &handle.x0_region, &handle.xa_region, &settings.degrees, &settings.sdp)
                .map_err(|source| ComposeError::Synthesis { index, source })?;
        cert.eta = Some(eta);
        cert.mu = Some(mu);
        Ok(cert)
    };

    if homogeneous {
        // One synthesis against the widest internal-input envelope covers
        // every subsystem: dissipation over a larger disturbance box implies
        // it over the smaller ones.
        let rep = representative_subsystem(net);
        let cert = synth_one(rep, seed)?;
        Ok(vec![cert; net.topology.n_subs])
    } else {
        (0..net.topology.n_subs)
            .into_par_iter()
            .map(|i| synth_one(i, seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Network certificate files
// ---------------------------------------------------------------------------

/// On-disk form of a composed certificate: the topology descriptor, file
/// references to the per-subsystem certificates, the network levels, and the
/// check that admitted them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkCertificateFile {
    pub topology: Topology,
    pub cert_refs: Vec<String>,
    pub eta: f64,
    pub mu: f64,
    pub lambda: f64,
    pub check: CompositionCheck,
    #[serde(default)]
    pub attempts: Vec<AttemptRecord>,
}

impl PartialEq for CompositionCheck {
    fn eq(&self, other: &Self) -> bool {
        self.passes == other.passes
            && self.lambda_max == other.lambda_max
            && self.psd_tol == other.psd_tol
            && self.level_ok == other.level_ok
            && self.level_margin == other.level_margin
    }
}

impl PartialEq for AttemptRecord {
    fn eq(&self, other: &Self) -> bool {
        self.t_samples == other.t_samples
            && self.seed == other.seed
            && self.lambda_max == other.lambda_max
            && self.level_margin == other.level_margin
            && self.passes == other.passes
    }
}

/// Write the network-level file; per-subsystem certificates are saved
/// separately under the paths recorded in `cert_refs`.
pub fn save_network_certificate(
    path: &Path,
    cbc: &BarrierCertificate,
    cert_refs: Vec<String>,
    attempts: Vec<AttemptRecord>,
) -> Result<(), ComposeError> {
    let file = NetworkCertificateFile {
        topology: cbc.topology.clone(),
        cert_refs,
        eta: cbc.eta,
        mu: cbc.mu,
        lambda: cbc.lambda,
        check: cbc.check,
        attempts,
    };
    let mut out = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut out, &file)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn load_network_certificate(path: &Path) -> Result<NetworkCertificateFile, ComposeError> {
    let data = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&data)?)
}

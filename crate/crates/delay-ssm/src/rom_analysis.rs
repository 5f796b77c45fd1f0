//! Predictions from the polar reduced-order model ρ̇ = a(ρ), θ̇ = b(ρ).
//!
//! Everything here consumes a [`Rom`] (and, where physical coordinates are
//! needed, the [`SsmExpansion`] that produced it):
//!
//! * backbone curves ω = b(ρ) for the conservative limit of free vibration,
//! * limit-cycle roots a(ρ*) = 0 with convergence diagnostics that separate
//!   genuine cycles from truncation artifacts,
//! * forced-response curves from the amplitude equation
//!   a(ρ)² + ρ²(b(ρ) − Ω)² = ε²|f(Ω)|², with saddle-node and Hopf detection
//!   and structural isola recognition,
//! * invariant circles of the slow rotating-frame flow, which lift to
//!   quasi-periodic tori of the full system.
//!
//! The forced response is computed along two independent routes — a per-Ω
//! amplitude sweep and a ρ-parameterized branch assembly — and the test suite
//! cross-checks them against each other.

use std::io::Write;

use anyhow::{ensure, Context, Result};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::delay_model::AmplitudeLaw;
use crate::linalg;
use crate::ssm::{Rom, SsmExpansion};

/// Amplitude roots beyond this fraction of the estimated convergence radius
/// are classified as spurious: the expansion has no authority there.
pub const RADIUS_BOUNDARY_FRACTION: f64 = 0.9;
/// Relative order-to-order drift above which a root is non-persistent.
pub const PERSISTENCE_REL_TOL: f64 = 0.01;
/// |Im|/|Re| below which a companion root counts as a real amplitude.
const REAL_ROOT_IMAG_TOL: f64 = 1e-7;
/// Target relative residual for polished amplitude-equation roots.
const AMPLITUDE_RESIDUAL_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Backbone curves
// ---------------------------------------------------------------------------

/// One point of the free-vibration backbone: instantaneous frequency b(ρ) at
/// reduced amplitude ρ.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BackbonePoint {
    pub rho: f64,
    pub omega: f64,
}

/// Backbone curve ω(ρ) = b(ρ) on a uniform amplitude grid (n+1 points
/// including both endpoints).
pub fn backbone(rom: &Rom, rho_max: f64, n: usize) -> Vec<BackbonePoint> {
    let n = n.max(1);
    (0..=n)
        .map(|i| {
            let rho = rho_max * i as f64 / n as f64;
            BackbonePoint { rho, omega: rom.b(rho) }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Convergence diagnostics
// ---------------------------------------------------------------------------

/// Cauchy–Hadamard-style estimate of the expansion's radius of validity in ρ,
/// from the trailing coefficient ratios of the a(ρ)/ρ polynomial in s = ρ².
/// Needs at least three nonzero coefficients (two ratio pairs); a single pair
/// carries no information beyond the root itself.
pub fn conv_radius_estimate(rom: &Rom) -> Option<f64> {
    let c = rom.a_coeffs_s();
    let mut ratios = Vec::new();
    for j in 0..c.len().saturating_sub(1) {
        if c[j] != 0.0 && c[j + 1] != 0.0 {
            ratios.push((c[j] / c[j + 1]).abs());
        }
    }
    if ratios.len() < 2 {
        return None;
    }
    let r = ratios[ratios.len() - 2] * ratios[ratios.len() - 1];
    Some(r.powf(0.25))
}

/// Largest ρ at which the order-O and order-(O−2) frequency polynomials agree
/// to `rel_tol` relatively — the practical domain of validity of the model.
/// Scans to twice the radius estimate and refines the first violation by
/// bisection; returns the scan bound itself if agreement never breaks.
pub fn convergence_domain(rom: &Rom, rel_tol: f64) -> Result<f64> {
    ensure!(rom.order >= 5, "convergence domain needs order ≥ 5, got {}", rom.order);
    let lower = rom.truncated(rom.order - 2);
    let bound = 2.0
        * conv_radius_estimate(rom)
            .context("convergence-radius estimate unavailable (too few nonzero coefficients)")?;
    let disagree = |rho: f64| -> bool {
        let bh = rom.b(rho);
        (bh - lower.b(rho)).abs() > rel_tol * bh.abs().max(f64::MIN_POSITIVE)
    };
    let n = 4000;
    let mut last_ok = 0.0;
    for i in 1..=n {
        let rho = bound * i as f64 / n as f64;
        if disagree(rho) {
            let (mut lo, mut hi) = (last_ok, rho);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if disagree(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(0.5 * (lo + hi));
        }
        last_ok = rho;
    }
    Ok(bound)
}

// ---------------------------------------------------------------------------
// Limit cycles of the autonomous model
// ---------------------------------------------------------------------------

/// Verdict on a limit-cycle amplitude root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RootClassification {
    /// The root persists under order truncation and sits well inside the
    /// expansion's estimated radius of validity.
    Converged,
    /// The root fails a persistence or radius check; treat it as a
    /// truncation artifact unless confirmed by direct simulation.
    Spurious,
}

/// A nontrivial root of a(ρ) = 0: a predicted limit cycle (or the ghost of
/// one) with its frequency, stability, and convergence verdict.
#[derive(Debug, Clone, Serialize)]
pub struct LimitCycleRoot {
    pub rho: f64,
    pub omega: f64,
    pub period: f64,
    pub stable: bool,
    pub classification: RootClassification,
    pub notes: Vec<String>,
}

/// All nontrivial amplitude roots of the model, with the diagnostics that
/// produced each verdict.
#[derive(Debug, Clone, Serialize)]
pub struct RootReport {
    pub roots: Vec<LimitCycleRoot>,
    pub conv_radius: Option<f64>,
    pub orders_checked: Vec<u32>,
}

/// Real positive roots of Σ c[k] s^k, ascending, Newton-polished.
fn positive_real_roots_s(coeffs: &[f64]) -> Vec<f64> {
    let Ok(roots) = linalg::poly_roots(coeffs) else {
        return Vec::new();
    };
    let eval = |s: f64| -> (f64, f64) {
        let mut p = 0.0;
        let mut dp = 0.0;
        for &c in coeffs.iter().rev() {
            dp = dp * s + p;
            p = p * s + c;
        }
        (p, dp)
    };
    let mut out: Vec<f64> = roots
        .iter()
        .filter(|z| z.im.abs() <= REAL_ROOT_IMAG_TOL * z.re.abs().max(1.0) && z.re > 1e-12)
        .map(|z| {
            let mut s = z.re;
            for _ in 0..3 {
                let (p, dp) = eval(s);
                if dp != 0.0 {
                    let step = p / dp;
                    if step.abs() < 0.1 * s.abs().max(1e-30) {
                        s -= step;
                    }
                }
            }
            s
        })
        .filter(|&s| s > 1e-12)
        .collect();
    out.sort_by(|a, b| a.total_cmp(b));
    out.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * b.abs().max(1.0));
    out
}

/// Find the nontrivial limit-cycle amplitudes a(ρ*) = 0, ρ* > 0, and classify
/// each as converged or spurious.
///
/// Two independent checks feed the verdict:
/// * **persistence** — the root must still exist two orders down, must exist
///   four orders down, and may move at most 1% between the top two orders;
/// * **radius** — the root must sit below 90% of the Cauchy–Hadamard radius
///   estimate, beyond which the truncated series carries no information.
pub fn limit_cycle_roots(rom: &Rom) -> RootReport {
    let conv_radius = conv_radius_estimate(rom);
    let mut orders_checked = vec![rom.order];
    for o in [rom.order.saturating_sub(2), rom.order.saturating_sub(4)] {
        if o >= 3 && o < rom.order {
            orders_checked.push(o);
        }
    }
    let lower_roots: Vec<(u32, Vec<f64>)> = orders_checked[1..]
        .iter()
        .map(|&o| {
            let s = positive_real_roots_s(&rom.truncated(o).a_coeffs_s());
            (o, s.iter().map(|&v| v.sqrt()).collect())
        })
        .collect();

    let mut roots = Vec::new();
    for s in positive_real_roots_s(&rom.a_coeffs_s()) {
        let rho = s.sqrt();
        let omega = rom.b(rho);
        let stable = rom.a_prime(rho) < 0.0;
        let mut notes = Vec::new();
        let mut spurious = false;

        if orders_checked.len() < 3 {
            notes.push(format!(
                "persistence unchecked: only {} odd order(s) available below {}",
                orders_checked.len() - 1,
                rom.order
            ));
        } else {
            let mut target = rho;
            for (i, (o, cands)) in lower_roots.iter().enumerate() {
                match cands
                    .iter()
                    .min_by(|a, b| (**a - target).abs().total_cmp(&(**b - target).abs()))
                {
                    None => {
                        spurious = true;
                        notes.push(format!("no matching amplitude root at order {o}"));
                        break;
                    }
                    Some(&m) => {
                        let drift = (m - target).abs() / target;
                        // The 1% drift tolerance binds only on the first
                        // truncation step; deeper truncations merely have to
                        // keep the root alive.
                        if i == 0 {
                            if drift > PERSISTENCE_REL_TOL {
                                spurious = true;
                                notes.push(format!(
                                    "root drifts {:.2}% from order {} to {} (tolerance {:.0}%)",
                                    100.0 * drift,
                                    rom.order,
                                    o,
                                    100.0 * PERSISTENCE_REL_TOL
                                ));
                            } else {
                                notes.push(format!(
                                    "order-to-order drift {:.3}% at order {o}",
                                    100.0 * drift
                                ));
                            }
                        }
                        target = m;
                    }
                }
            }
        }

        match conv_radius {
            Some(rc) => {
                let frac = rho / rc;
                notes.push(format!(
                    "root at {:.0}% of the estimated convergence radius {:.4}",
                    100.0 * frac,
                    rc
                ));
                if frac > RADIUS_BOUNDARY_FRACTION {
                    spurious = true;
                    notes.push(format!(
                        "beyond {:.0}% of the radius estimate: outside the expansion's authority",
                        100.0 * RADIUS_BOUNDARY_FRACTION
                    ));
                }
            }
            None => notes.push("convergence-radius estimate unavailable".to_string()),
        }

        roots.push(LimitCycleRoot {
            rho,
            omega,
            period: std::f64::consts::TAU / omega.abs().max(f64::MIN_POSITIVE),
            stable,
            classification: if spurious {
                RootClassification::Spurious
            } else {
                RootClassification::Converged
            },
            notes,
        });
    }
    RootReport { roots, conv_radius, orders_checked }
}

/// A limit cycle lifted to physical coordinates: one period sampled uniformly
/// in time, with the per-coordinate amplitude max_t |x_i(t)|.
#[derive(Debug, Clone, Serialize)]
pub struct PredictedCycle {
    pub rho: f64,
    pub omega: f64,
    pub period: f64,
    pub stable: bool,
    pub t: Vec<f64>,
    /// Physical coordinates (the first n entries of the chain state) per sample.
    pub x: Vec<Vec<f64>>,
    pub amplitude: Vec<f64>,
}

/// Lift the limit cycle at amplitude `rho` through the manifold embedding:
/// x(t) = W(ρ e^{i b(ρ) t}) over one period.
pub fn limit_cycle_predict(
    exp: &SsmExpansion,
    rom: &Rom,
    rho: f64,
    n_samples: usize,
) -> PredictedCycle {
    let omega = rom.b(rho);
    let period = std::f64::consts::TAU / omega.abs().max(f64::MIN_POSITIVE);
    let n_samples = n_samples.max(8);
    let n_phys = exp.n_phys;
    let mut t = Vec::with_capacity(n_samples);
    let mut x = Vec::with_capacity(n_samples);
    let mut amplitude = vec![0.0_f64; n_phys];
    for k in 0..n_samples {
        let tk = period * k as f64 / n_samples as f64;
        let p = Complex64::from_polar(rho, omega * tk);
        let z = exp.lift(p);
        let row: Vec<f64> = (0..n_phys).map(|i| z[i]).collect();
        for i in 0..n_phys {
            amplitude[i] = amplitude[i].max(row[i].abs());
        }
        t.push(tk);
        x.push(row);
    }
    PredictedCycle { rho, omega, period, stable: rom.a_prime(rho) < 0.0, t, x, amplitude }
}

// ---------------------------------------------------------------------------
// Forced response
// ---------------------------------------------------------------------------

/// A fixed point of the forced slow flow: one point of the forced-response
/// curve, with the phase ψ of the reduced coordinate relative to the forcing
/// phasor and the trace/determinant of the polar Jacobian.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FrcPoint {
    pub omega: f64,
    pub rho: f64,
    pub psi: f64,
    pub stable: bool,
    pub tr: f64,
    pub det: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BifurcationKind {
    SaddleNode,
    Hopf,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Bifurcation {
    pub kind: BifurcationKind,
    pub omega: f64,
    pub rho: f64,
}

/// A connected solution branch in ρ-parameterization. `is_isola` marks a
/// branch whose amplitude interval is detached from ρ = 0: a closed response
/// loop that no frequency sweep from small amplitude can reach.
#[derive(Debug, Clone, Serialize)]
pub struct FrcBranch {
    pub is_isola: bool,
    pub rho_lo: f64,
    pub rho_hi: f64,
    pub points: Vec<FrcPoint>,
}

/// Forced-response curve: the per-Ω sweep (primary route), the ρ-parameterized
/// branch topology (independent route), and the detected bifurcations.
#[derive(Debug, Clone, Serialize)]
pub struct Frc {
    pub epsilon: f64,
    pub rho_max: f64,
    pub points: Vec<FrcPoint>,
    pub branches: Vec<FrcBranch>,
    pub bifurcations: Vec<Bifurcation>,
    pub has_isola: bool,
}

/// Sweep controls for [`frc_periodic`].
#[derive(Debug, Clone, Copy)]
pub struct FrcOptions {
    pub omega_min: f64,
    pub omega_max: f64,
    /// Frequency resolution of the per-Ω sweep.
    pub grid_n: usize,
    /// Amplitude cap; defaults to 1.2× the convergence-radius estimate.
    pub rho_max: Option<f64>,
    /// Amplitude resolution of the bracketing scans.
    pub rho_scan_n: usize,
}

impl FrcOptions {
    pub fn new(omega_min: f64, omega_max: f64) -> Self {
        FrcOptions { omega_min, omega_max, grid_n: 400, rho_max: None, rho_scan_n: 2000 }
    }
}

/// Residual of the amplitude equation at (ρ, Ω):
/// h = a² + ρ²(b − Ω)² − ε²|f(Ω)|².
fn amplitude_h(rom: &Rom, eps_f_abs2: f64, omega: f64, rho: f64) -> f64 {
    let a = rom.a(rho);
    let d = rom.b(rho) - omega;
    a * a + rho * rho * d * d - eps_f_abs2
}

/// ∂h/∂ρ at fixed Ω.
fn amplitude_h_rho(rom: &Rom, omega: f64, rho: f64) -> f64 {
    let a = rom.a(rho);
    let d = rom.b(rho) - omega;
    2.0 * (a * rom.a_prime(rho) + rho * d * d + rho * rho * d * rom.b_prime(rho))
}

/// All ρ > 0 solving the amplitude equation at this Ω, by bracketing on a
/// uniform grid (h(0) = −ε²|f|² < 0 seeds the first bracket) followed by
/// bisection and a guarded Newton polish.
fn amplitude_equation_roots(
    rom: &Rom,
    eps_f_abs2: f64,
    omega: f64,
    rho_max: f64,
    scan_n: usize,
) -> Vec<f64> {
    let scan_n = scan_n.max(16);
    let mut roots = Vec::new();
    let mut prev_rho = 0.0;
    let mut prev_h = -eps_f_abs2;
    for i in 1..=scan_n {
        let rho = rho_max * i as f64 / scan_n as f64;
        let h = amplitude_h(rom, eps_f_abs2, omega, rho);
        if prev_h == 0.0 && prev_rho > 0.0 {
            roots.push(prev_rho);
        } else if prev_h * h < 0.0 {
            let (mut lo, mut hi) = (prev_rho, rho);
            let (mut hlo, _) = (prev_h, h);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let hm = amplitude_h(rom, eps_f_abs2, omega, mid);
                if hm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if hlo * hm < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    hlo = hm;
                }
            }
            let mut r = 0.5 * (lo + hi);
            let scale = eps_f_abs2.max(f64::MIN_POSITIVE);
            for _ in 0..8 {
                let hv = amplitude_h(rom, eps_f_abs2, omega, r);
                if hv.abs() <= AMPLITUDE_RESIDUAL_TOL * scale {
                    break;
                }
                let dv = amplitude_h_rho(rom, omega, r);
                if dv == 0.0 {
                    break;
                }
                let next = r - hv / dv;
                if next <= lo || next >= hi {
                    break;
                }
                r = next;
            }
            roots.push(r);
        }
        prev_rho = rho;
        prev_h = h;
    }
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * rho_max);
    roots
}

/// Phase of the fixed point: p = ρ e^{iψ} relative to the forcing phasor,
/// from the two polar fixed-point equations.
fn fixed_point_psi(rom: &Rom, eps: f64, omega: f64, rho: f64) -> f64 {
    let fe = rom.f_eff(omega).unwrap_or(Complex64::new(0.0, 0.0));
    let c = eps * fe.re;
    let s = eps * fe.im;
    let den = c * c + s * s;
    if den == 0.0 {
        return 0.0;
    }
    let a = rom.a(rho);
    let rd = rho * (rom.b(rho) - omega);
    let cos_psi = (-a * c - rd * s) / den;
    let sin_psi = (-a * s + rd * c) / den;
    sin_psi.atan2(cos_psi)
}

/// Trace and determinant of the polar Jacobian at a fixed point:
/// J = [[a′, −ρ(b−Ω)], [b′ + (b−Ω)/ρ, a/ρ]].
fn polar_trace_det(rom: &Rom, omega: f64, rho: f64) -> (f64, f64) {
    let a = rom.a(rho);
    let ap = rom.a_prime(rho);
    let d = rom.b(rho) - omega;
    let bp = rom.b_prime(rho);
    (ap + a / rho, ap * a / rho + rho * d * bp + d * d)
}

/// Trace and determinant of the rotating-frame Jacobian in Cartesian form,
/// via the Wirtinger derivatives of g(z) = (λ−iΩ)z + Σ γ_j z|z|^{2j} + εf.
/// Independent of [`polar_trace_det`]; the two agree at fixed points and the
/// Cartesian form also covers z = 0.
fn cartesian_trace_det(rom: &Rom, omega: f64, z: Complex64) -> (f64, f64) {
    let mu = rom.lambda - Complex64::new(0.0, omega);
    let s = z.norm_sqr();
    let mut gz = mu;
    let mut gzb = Complex64::new(0.0, 0.0);
    let mut sj = 1.0; // s^{j-1}
    for (idx, g) in rom.gamma.iter().enumerate() {
        let j = (idx + 1) as f64;
        gz += g * (j + 1.0) * sj * s;
        gzb += g * j * z * z * sj;
        sj *= s;
    }
    (2.0 * gz.re, gz.norm_sqr() - gzb.norm_sqr())
}

/// Divergence of the rotating-frame flow at z (phase-independent).
fn rotating_divergence(rom: &Rom, z: Complex64) -> f64 {
    let s = z.norm_sqr();
    let mut div = 2.0 * rom.lambda.re;
    let mut sj = s;
    for (idx, g) in rom.gamma.iter().enumerate() {
        div += 2.0 * (idx as f64 + 2.0) * g.re * sj;
        sj *= s;
    }
    div
}

fn make_frc_point(rom: &Rom, eps: f64, omega: f64, rho: f64) -> FrcPoint {
    let (tr, det) = polar_trace_det(rom, omega, rho);
    FrcPoint {
        omega,
        rho,
        psi: fixed_point_psi(rom, eps, omega, rho),
        stable: tr < 0.0 && det > 0.0,
        tr,
        det,
    }
}

/// ε|f(b(ρ))| − |a(ρ)|: positive exactly where some Ω solves the amplitude
/// equation (for the constant forcing law; for frequency-dependent laws the
/// law is evaluated at the detuning-free frequency Ω = b(ρ), which is where
/// the remaining terms balance).
fn solvable_margin(rom: &Rom, eps: f64, rho: f64) -> f64 {
    let f = rom.f_eff(rom.b(rho)).unwrap_or(Complex64::new(0.0, 0.0));
    eps * f.norm() - rom.a(rho).abs()
}

/// Maximal ρ-intervals on which the forced response exists, with a flag for
/// the interval containing ρ → 0 (the main branch).
fn solvable_intervals(rom: &Rom, eps: f64, rho_max: f64, n: usize) -> Vec<(f64, f64, bool)> {
    let n = n.max(64);
    let margin = |rho: f64| solvable_margin(rom, eps, rho);
    let refine = |mut lo: f64, mut hi: f64| -> f64 {
        // sign change of the margin bracketed in (lo, hi)
        let mlo = margin(lo);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if (margin(mid) >= 0.0) == (mlo >= 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let mut intervals = Vec::new();
    let mut run_start: Option<(usize, f64)> = None;
    for i in 0..=n {
        let rho = rho_max * i as f64 / n as f64;
        let ok = margin(rho) >= 0.0;
        match (ok, run_start) {
            (true, None) => run_start = Some((i, rho)),
            (false, Some((i0, r0))) => {
                let prev = rho_max * (i - 1) as f64 / n as f64;
                let lo = if i0 == 0 { 0.0 } else { refine(rho_max * (i0 - 1) as f64 / n as f64, r0) };
                intervals.push((lo, refine(prev, rho), i0 == 0));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some((i0, r0)) = run_start {
        let lo = if i0 == 0 { 0.0 } else { refine(rho_max * (i0 - 1) as f64 / n as f64, r0) };
        intervals.push((lo, rho_max, i0 == 0));
    }
    intervals
}

/// All forcing frequencies Ω > 0 at which amplitude ρ responds, ascending.
/// Closed-form pair for the constant law; quartic companion roots for the
/// Ω²-law.
fn omega_legs(rom: &Rom, eps: f64, rho: f64) -> Vec<f64> {
    let forcing = match &rom.forcing {
        Some(f) => f,
        None => return Vec::new(),
    };
    let a = rom.a(rho);
    let b = rom.b(rho);
    match forcing.law {
        AmplitudeLaw::Constant => {
            let r = eps * forcing.f_base.norm();
            let disc = r * r - a * a;
            // At a branch fold |a(ρ)| = ε|f| up to roundoff. Treat a
            // hair-negative discriminant as the double root so the sampled
            // legs reach the fold itself; otherwise the det = 0 crossing at
            // the fold can hide between the last interior sample and the
            // interval boundary, and a saddle-node point goes undetected.
            if disc < -(1e-12 * r * r) {
                return Vec::new();
            }
            let w = disc.max(0.0).sqrt() / rho;
            vec![b - w, b + w]
        }
        AmplitudeLaw::OmegaSquared => {
            let e2 = eps * eps * forcing.f_base.norm_sqr();
            let coeffs =
                [-(rho * rho * b * b + a * a), 2.0 * rho * rho * b, -rho * rho, 0.0, e2];
            let Ok(roots) = linalg::poly_roots(&coeffs) else {
                return Vec::new();
            };
            let mut out: Vec<f64> = roots
                .iter()
                .filter(|z| z.im.abs() <= REAL_ROOT_IMAG_TOL * z.re.abs().max(1.0) && z.re > 0.0)
                .map(|z| z.re)
                .collect();
            out.sort_by(|x, y| x.total_cmp(y));
            out
        }
    }
}

/// Refine a sign change of `quantity` (a function of tr, det) along leg `rank`
/// of the ρ-parameterized response, by bisection in ρ.
fn refine_on_leg(
    rom: &Rom,
    rank: usize,
    mut lo: f64,
    mut hi: f64,
    eps: f64,
    quantity: impl Fn(f64, f64) -> f64,
) -> Option<(f64, f64)> {
    let eval = |rho: f64| -> Option<f64> {
        let legs = omega_legs(rom, eps, rho);
        let omega = *legs.get(rank)?;
        let (tr, det) = polar_trace_det(rom, omega, rho);
        Some(quantity(tr, det))
    };
    let qlo = eval(lo)?;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        match eval(mid) {
            Some(q) if (q >= 0.0) == (qlo >= 0.0) => lo = mid,
            Some(_) => hi = mid,
            None => hi = mid, // leg vanished: the crossing is below mid
        }
    }
    let rho = 0.5 * (lo + hi);
    let omega = *omega_legs(rom, eps, rho).get(rank)?;
    Some((rho, omega))
}

/// Compute the forced-response curve at forcing strength `eps`.
///
/// The per-Ω sweep brackets every amplitude solution on a uniform frequency
/// grid. The ρ-parameterized route independently assembles the solution
/// branches, classifies detached branches as isolas, and locates saddle-node
/// (det = 0) and Hopf (tr = 0, det > 0) points along each branch.
pub fn frc_periodic(rom: &Rom, eps: f64, opts: &FrcOptions) -> Result<Frc> {
    ensure!(eps > 0.0, "forced response needs ε > 0, got {eps}");
    ensure!(
        opts.omega_min < opts.omega_max && opts.omega_min > 0.0,
        "need 0 < omega_min < omega_max, got [{}, {}]",
        opts.omega_min,
        opts.omega_max
    );
    let forcing = rom.forcing.as_ref().context("the reduced model carries no forcing term")?;
    ensure!(forcing.f_base.norm() > 0.0, "modal forcing amplitude is zero");
    let rho_max = match opts.rho_max {
        Some(r) => r,
        None => {
            1.2 * conv_radius_estimate(rom).context(
                "no rho_max given and the convergence-radius estimate is unavailable",
            )?
        }
    };
    ensure!(rho_max > 0.0, "rho_max must be positive");

    // Route 1: per-Ω amplitude sweep, fanned out across frequencies. The
    // ordered collect keeps the result identical to the sequential loop.
    let grid_n = opts.grid_n.max(2);
    let points: Vec<FrcPoint> = (0..grid_n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let omega = opts.omega_min
                + (opts.omega_max - opts.omega_min) * i as f64 / (grid_n - 1) as f64;
            let fe = rom.f_eff(omega).unwrap();
            let eps_f_abs2 = eps * eps * fe.norm_sqr();
            amplitude_equation_roots(rom, eps_f_abs2, omega, rho_max, opts.rho_scan_n)
                .into_iter()
                .map(move |rho| make_frc_point(rom, eps, omega, rho))
                .collect::<Vec<_>>()
        })
        .collect();

    // Route 2: ρ-parameterized branches with bifurcation detection.
    let window_pad = 0.25 * (opts.omega_max - opts.omega_min);
    let (win_lo, win_hi) = (opts.omega_min - window_pad, opts.omega_max + window_pad);
    let mut branches = Vec::new();
    let mut bifurcations = Vec::new();
    for (lo, hi, touches_zero) in solvable_intervals(rom, eps, rho_max, opts.rho_scan_n) {
        let n_branch = 400;
        // Sample every leg across the interval, keeping legs separate by rank.
        let mut legs: Vec<Vec<(f64, f64)>> = Vec::new();
        let floor = if touches_zero { (hi - lo).max(rho_max * 1e-6) * 1e-6 + lo } else { lo };
        for k in 0..=n_branch {
            let rho = floor + (hi - floor) * k as f64 / n_branch as f64;
            for (rank, omega) in omega_legs(rom, eps, rho).into_iter().enumerate() {
                if legs.len() <= rank {
                    legs.resize(rank + 1, Vec::new());
                }
                legs[rank].push((rho, omega));
            }
        }

        // Near ρ → 0 the legs steepen like ε|f|/ρ², so uniform ρ-sampling
        // under-resolves them in Ω. Subdivide any in-window segment whose
        // frequency jump exceeds the sweep resolution.
        let omega_tol = (win_hi - win_lo) / 400.0;
        for (rank, leg) in legs.iter_mut().enumerate() {
            for _ in 0..12 {
                if leg.len() > 8000 {
                    break;
                }
                let mut refined = Vec::with_capacity(leg.len());
                let mut inserted = false;
                for w in leg.windows(2) {
                    let (r0, o0) = w[0];
                    let (r1, o1) = w[1];
                    refined.push((r0, o0));
                    let in_window = o0.max(o1) >= win_lo && o0.min(o1) <= win_hi;
                    if in_window && (o1 - o0).abs() > omega_tol && r1 - r0 > 1e-12 {
                        let rm = 0.5 * (r0 + r1);
                        if let Some(&om) = omega_legs(rom, eps, rm).get(rank) {
                            refined.push((rm, om));
                            inserted = true;
                        }
                    }
                }
                if let Some(&last) = leg.last() {
                    refined.push(last);
                }
                *leg = refined;
                if !inserted {
                    break;
                }
            }
        }

        // Bifurcations: sign changes of det (saddle-node) and tr (Hopf,
        // det > 0) along each leg.
        for (rank, leg) in legs.iter().enumerate() {
            for w in leg.windows(2) {
                let (r0, o0) = w[0];
                let (r1, o1) = w[1];
                let (tr0, det0) = polar_trace_det(rom, o0, r0);
                let (tr1, det1) = polar_trace_det(rom, o1, r1);
                if det0 * det1 < 0.0 {
                    if let Some((rho, omega)) =
                        refine_on_leg(rom, rank, r0, r1, eps, |_, det| det)
                    {
                        bifurcations.push(Bifurcation {
                            kind: BifurcationKind::SaddleNode,
                            omega,
                            rho,
                        });
                    }
                }
                if tr0 * tr1 < 0.0 && det0 > 0.0 && det1 > 0.0 {
                    if let Some((rho, omega)) = refine_on_leg(rom, rank, r0, r1, eps, |tr, _| tr)
                    {
                        bifurcations.push(Bifurcation { kind: BifurcationKind::Hopf, omega, rho });
                    }
                }
            }
        }

        // Branch polyline: even legs ascending, odd legs descending, so a
        // detached two-leg branch closes into a loop.
        let mut branch_points = Vec::new();
        for (rank, leg) in legs.iter().enumerate() {
            let ordered: Vec<&(f64, f64)> = if rank % 2 == 0 {
                leg.iter().collect()
            } else {
                leg.iter().rev().collect()
            };
            for &&(rho, omega) in &ordered {
                if omega >= win_lo && omega <= win_hi {
                    branch_points.push(make_frc_point(rom, eps, omega, rho));
                }
            }
        }
        branches.push(FrcBranch {
            is_isola: !touches_zero,
            rho_lo: lo,
            rho_hi: hi,
            points: branch_points,
        });
    }

    bifurcations.retain(|b| b.omega >= win_lo && b.omega <= win_hi);
    bifurcations.sort_by(|x, y| x.omega.total_cmp(&y.omega).then(x.rho.total_cmp(&y.rho)));
    bifurcations.dedup_by(|x, y| {
        x.kind == y.kind
            && (x.omega - y.omega).abs() <= 1e-6 * y.omega.abs().max(1.0)
            && (x.rho - y.rho).abs() <= 1e-6 * rho_max
    });

    let has_isola = branches.iter().any(|b| b.is_isola);
    Ok(Frc { epsilon: eps, rho_max, points, branches, bifurcations, has_isola })
}

/// Agreement between the forced responses of two truncation orders.
#[derive(Debug, Clone, Serialize)]
pub struct OrderAgreement {
    pub order_hi: u32,
    pub order_lo: u32,
    /// sup over the frequency grid of the relative amplitude difference,
    /// where both orders respond.
    pub sup_rel_diff: f64,
    /// Fraction of grid frequencies where exactly one order responds.
    pub existence_mismatch: f64,
}

/// Order-convergence audit of the forced response.
#[derive(Debug, Clone, Serialize)]
pub struct FrcConvergence {
    pub per_pair: Vec<OrderAgreement>,
    pub rel_tol: f64,
    pub converged: bool,
}

/// Compare the forced response across successive truncation orders. The curve
/// of maximal response amplitude per frequency is the comparator; the sweep is
/// `converged` when the two highest orders agree to `rel_tol` everywhere and
/// respond on (nearly) the same frequency set. A failed audit means the
/// expansion does not control the forced response at this forcing strength.
pub fn frc_order_convergence(
    rom: &Rom,
    eps: f64,
    opts: &FrcOptions,
    rel_tol: f64,
) -> Result<FrcConvergence> {
    ensure!(rom.order >= 5, "order convergence needs order ≥ 5, got {}", rom.order);
    let rho_max = match opts.rho_max {
        Some(r) => r,
        None => {
            1.2 * conv_radius_estimate(rom)
                .context("no rho_max given and the convergence-radius estimate is unavailable")?
        }
    };
    let mut orders = Vec::new();
    let mut o = rom.order;
    while o >= 3 {
        orders.push(o);
        if o < 5 {
            break;
        }
        o -= 2;
    }
    let grid_n = opts.grid_n.clamp(2, 200);
    let curve = |order: u32| -> Vec<Option<f64>> {
        let r = rom.truncated(order);
        (0..grid_n)
            .map(|i| {
                let omega = opts.omega_min
                    + (opts.omega_max - opts.omega_min) * i as f64 / (grid_n - 1) as f64;
                let fe = r.f_eff(omega).unwrap_or(Complex64::new(0.0, 0.0));
                amplitude_equation_roots(
                    &r,
                    eps * eps * fe.norm_sqr(),
                    omega,
                    rho_max,
                    opts.rho_scan_n.min(600),
                )
                .last()
                .copied()
            })
            .collect()
    };
    let curves: Vec<Vec<Option<f64>>> = orders.iter().map(|&o| curve(o)).collect();
    let mut per_pair = Vec::new();
    for k in 0..curves.len() - 1 {
        let (hi, lo) = (&curves[k], &curves[k + 1]);
        let mut sup = 0.0_f64;
        let mut mismatch = 0usize;
        for (a, b) in hi.iter().zip(lo) {
            match (a, b) {
                (Some(x), Some(y)) => sup = sup.max((x - y).abs() / x.abs().max(1e-300)),
                (None, None) => {}
                _ => mismatch += 1,
            }
        }
        per_pair.push(OrderAgreement {
            order_hi: orders[k],
            order_lo: orders[k + 1],
            sup_rel_diff: sup,
            existence_mismatch: mismatch as f64 / grid_n as f64,
        });
    }
    let converged = per_pair
        .first()
        .map(|p| p.sup_rel_diff <= rel_tol && p.existence_mismatch <= 0.05)
        .unwrap_or(false);
    Ok(FrcConvergence { per_pair, rel_tol, converged })
}

// ---------------------------------------------------------------------------
// Invariant circles of the rotating-frame flow (tori of the full system)
// ---------------------------------------------------------------------------

/// An attracting invariant circle of the slow flow ż = (λ−iΩ)z + Σγ_j z|z|^{2j} + εf,
/// found as a limit cycle by Poincaré return iteration. In the full system it
/// lifts to a two-frequency torus (slow modulation at 2π/period, fast motion
/// at Ω).
#[derive(Debug, Clone, Serialize)]
pub struct RomCycle {
    pub omega: f64,
    pub epsilon: f64,
    /// The unstable focus the section line threads.
    pub anchor: Complex64,
    /// One loop, uniformly sampled in time.
    pub samples: Vec<Complex64>,
    /// Slow period in the rotating frame.
    pub period: f64,
    /// Nontrivial Floquet multiplier exp(∮ div dt); < 1 for attracting circles.
    pub multiplier: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct RomCycleOptions {
    pub steps_per_turn: usize,
    pub max_revolutions: usize,
    pub return_tol: f64,
    pub n_samples: usize,
}

impl Default for RomCycleOptions {
    fn default() -> Self {
        RomCycleOptions {
            steps_per_turn: 400,
            max_revolutions: 2000,
            return_tol: 1e-8,
            n_samples: 256,
        }
    }
}

fn rk4_step(g: &impl Fn(Complex64) -> Complex64, z: Complex64, h: f64) -> Complex64 {
    let k1 = g(z);
    let k2 = g(z + 0.5 * h * k1);
    let k3 = g(z + 0.5 * h * k2);
    let k4 = g(z + h * k3);
    z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Hunt for an attracting circle around `anchor` by iterating the return map
/// of the section line {Re z = Re anchor, Im z > Im anchor, increasing Re}.
fn hunt_cycle(
    rom: &Rom,
    ef: Complex64,
    omega: f64,
    anchor: Complex64,
    turn_time: f64,
    escape: f64,
    opts: &RomCycleOptions,
) -> Option<(Vec<Complex64>, f64, f64)> {
    let mu = rom.lambda - Complex64::new(0.0, omega);
    let g = |z: Complex64| -> Complex64 {
        let s = z.norm_sqr();
        let mut acc = mu;
        let mut sj = 1.0;
        for gamma in &rom.gamma {
            sj *= s;
            acc += gamma * sj;
        }
        acc * z + ef
    };
    let h = turn_time / opts.steps_per_turn as f64;
    let qa = anchor.re;
    // Refine the crossing inside one step by bisection on the substep length.
    let cross = |z0: Complex64| -> Complex64 {
        let (mut lo, mut hi) = (0.0, h);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if rk4_step(&g, z0, mid).re < qa {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        rk4_step(&g, z0, 0.5 * (lo + hi))
    };

    let mut z = anchor + Complex64::new(1e-3 * (1.0 + anchor.norm()), 0.0);
    let mut last_r: Option<f64> = None;
    let max_steps = opts.max_revolutions * opts.steps_per_turn;
    let mut start = None;
    for _ in 0..max_steps {
        let next = rk4_step(&g, z, h);
        if !next.re.is_finite() || !next.im.is_finite() || next.norm() > escape {
            return None;
        }
        // A loop around the anchor crosses the section line in the
        // increasing-Re direction exactly once per revolution; Im z at the
        // crossing is the return coordinate.
        if z.re < qa && next.re >= qa {
            let zc = cross(z);
            let r = zc.im;
            if let Some(r0) = last_r {
                if (r - r0).abs() <= opts.return_tol * r.abs().max(1.0) {
                    start = Some(zc);
                    break;
                }
            }
            last_r = Some(r);
        }
        z = next;
    }
    let start = start?;

    // One recorded loop from the converged crossing: states, elapsed time,
    // and the accumulated divergence integral (trapezoid).
    let mut path = vec![(0.0, start)];
    let mut div_acc = 0.0;
    let mut t = 0.0;
    let mut zc = start;
    for _ in 0..4 * opts.steps_per_turn {
        let next = rk4_step(&g, zc, h);
        if zc.re < qa && next.re >= qa {
            // partial step to the crossing
            let (mut lo, mut hi) = (0.0, h);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if rk4_step(&g, zc, mid).re < qa {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let hf = 0.5 * (lo + hi);
            let zf = rk4_step(&g, zc, hf);
            div_acc += 0.5 * hf * (rotating_divergence(rom, zc) + rotating_divergence(rom, zf));
            t += hf;
            path.push((t, zf));
            let period = t;
            let multiplier = div_acc.exp();
            // Uniform-in-time resampling of the recorded loop.
            let mut samples = Vec::with_capacity(opts.n_samples);
            let mut seg = 0;
            for k in 0..opts.n_samples {
                let tk = period * k as f64 / opts.n_samples as f64;
                while seg + 1 < path.len() && path[seg + 1].0 < tk {
                    seg += 1;
                }
                let (t0, z0) = path[seg];
                let (t1, z1) = path[(seg + 1).min(path.len() - 1)];
                let w = if t1 > t0 { (tk - t0) / (t1 - t0) } else { 0.0 };
                samples.push(z0 + (z1 - z0) * w);
            }
            return Some((samples, period, multiplier));
        }
        div_acc += 0.5 * h * (rotating_divergence(rom, zc) + rotating_divergence(rom, next));
        t += h;
        zc = next;
        path.push((t, zc));
    }
    None
}

/// Find attracting invariant circles of the rotating-frame flow at (Ω, ε).
///
/// Every unstable focus of the slow flow — the origin included when ε·f = 0 —
/// anchors a section; forward return-map iteration either converges to a
/// circle (reported with its period and Floquet multiplier) or rules one out
/// along that orbit. ε = 0 is allowed and probes the autonomous model in a
/// frame rotating at Ω.
pub fn rom_limit_cycles(
    rom: &Rom,
    eps: f64,
    omega: f64,
    rho_max: Option<f64>,
    opts: &RomCycleOptions,
) -> Result<Vec<RomCycle>> {
    ensure!(eps >= 0.0, "ε must be nonnegative, got {eps}");
    let rho_max = match rho_max {
        Some(r) => r,
        None => {
            1.2 * conv_radius_estimate(rom)
                .context("no rho_max given and the convergence-radius estimate is unavailable")?
        }
    };
    let ef = if eps > 0.0 {
        eps * rom
            .f_eff(omega)
            .context("ε > 0 but the reduced model carries no forcing term")?
    } else {
        Complex64::new(0.0, 0.0)
    };

    // Anchors: unstable foci of the slow flow.
    let mut anchors: Vec<Complex64> = Vec::new();
    if ef.norm() > 0.0 {
        for rho in amplitude_equation_roots(rom, ef.norm_sqr(), omega, rho_max, 2000) {
            let z = Complex64::from_polar(rho, fixed_point_psi(rom, eps, omega, rho));
            let (tr, det) = cartesian_trace_det(rom, omega, z);
            if tr > 0.0 && det > 0.0 && tr * tr < 4.0 * det {
                anchors.push(z);
            }
        }
    } else {
        let (tr, det) = cartesian_trace_det(rom, omega, Complex64::new(0.0, 0.0));
        if tr > 0.0 && det > 0.0 && tr * tr < 4.0 * det {
            anchors.push(Complex64::new(0.0, 0.0));
        }
    }

    let mut cycles: Vec<RomCycle> = Vec::new();
    for anchor in anchors {
        let (tr, det) = cartesian_trace_det(rom, omega, anchor);
        let rot = (det - 0.25 * tr * tr).sqrt();
        if !(rot > 0.0) {
            continue;
        }
        let turn_time = std::f64::consts::TAU / rot;
        if let Some((samples, period, multiplier)) =
            hunt_cycle(rom, ef, omega, anchor, turn_time, 10.0 * rho_max.max(1.0), opts)
        {
            let mean_r = samples.iter().map(|z| z.norm()).sum::<f64>() / samples.len() as f64;
            let duplicate = cycles.iter().any(|c| {
                let mr = c.samples.iter().map(|z| z.norm()).sum::<f64>() / c.samples.len() as f64;
                (mr - mean_r).abs() <= 1e-3 * mean_r.max(1e-12)
                    && (c.period - period).abs() <= 1e-3 * period
            });
            if !duplicate {
                cycles.push(RomCycle {
                    omega,
                    epsilon: eps,
                    anchor,
                    samples,
                    period,
                    multiplier,
                    stable: multiplier < 1.0,
                });
            }
        }
    }
    Ok(cycles)
}

/// Stroboscopic section of the lifted torus at forcing phase 0: the invariant
/// circle mapped through the manifold embedding plus the order-ε correction.
pub fn torus_section_curve(
    exp: &SsmExpansion,
    x0: &ndarray::Array1<Complex64>,
    cycle: &RomCycle,
) -> Vec<Vec<f64>> {
    cycle
        .samples
        .iter()
        .map(|&p| exp.lift_forced(p, x0, cycle.epsilon, 0.0).to_vec())
        .collect()
}

/// Quasi-periodic amplitude band of coordinate `coord` on the lifted torus:
/// for each point of the invariant circle, the peak |x_coord| over the fast
/// forcing phase; returns (min, max) of those peaks — the envelope of the
/// beating response.
pub fn torus_amplitude_band(
    exp: &SsmExpansion,
    x0: &ndarray::Array1<Complex64>,
    cycle: &RomCycle,
    coord: usize,
    n_phase: usize,
) -> (f64, f64) {
    let n_phase = n_phase.max(8);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &p in &cycle.samples {
        let mut peak = 0.0_f64;
        for k in 0..n_phase {
            let phase = std::f64::consts::TAU * k as f64 / n_phase as f64;
            let rot = Complex64::from_polar(1.0, phase);
            let z = exp.lift_forced(p * rot, x0, cycle.epsilon, phase);
            peak = peak.max(z[coord].abs());
        }
        lo = lo.min(peak);
        hi = hi.max(peak);
    }
    (lo, hi)
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

/// Backbone as CSV: rho, omega.
pub fn write_backbone_csv(points: &[BackbonePoint], w: &mut dyn Write) -> Result<()> {
    writeln!(w, "rho,omega")?;
    for p in points {
        writeln!(w, "{},{}", p.rho, p.omega)?;
    }
    Ok(())
}

/// Per-Ω forced-response sweep as CSV.
pub fn write_frc_csv(frc: &Frc, w: &mut dyn Write) -> Result<()> {
    writeln!(w, "omega,rho,psi,stable,tr,det")?;
    for p in &frc.points {
        writeln!(w, "{},{},{},{},{},{}", p.omega, p.rho, p.psi, p.stable, p.tr, p.det)?;
    }
    Ok(())
}

/// ρ-parameterized branches as CSV, one row per branch point.
pub fn write_frc_branches_csv(frc: &Frc, w: &mut dyn Write) -> Result<()> {
    writeln!(w, "branch,is_isola,omega,rho,stable")?;
    for (i, b) in frc.branches.iter().enumerate() {
        for p in &b.points {
            writeln!(w, "{},{},{},{},{}", i, b.is_isola, p.omega, p.rho, p.stable)?;
        }
    }
    Ok(())
}

/// Detected bifurcations as CSV.
pub fn write_bifurcations_csv(frc: &Frc, w: &mut dyn Write) -> Result<()> {
    writeln!(w, "kind,omega,rho")?;
    for b in &frc.bifurcations {
        let kind = match b.kind {
            BifurcationKind::SaddleNode => "saddle-node",
            BifurcationKind::Hopf => "hopf",
        };
        writeln!(w, "{},{},{}", kind, b.omega, b.rho)?;
    }
    Ok(())
}

/// Human-readable limit-cycle root report.
pub fn write_root_report(report: &RootReport, w: &mut dyn Write) -> Result<()> {
    match report.conv_radius {
        Some(r) => writeln!(w, "estimated convergence radius: {r:.6}")?,
        None => writeln!(w, "estimated convergence radius: unavailable")?,
    }
    writeln!(w, "orders checked: {:?}", report.orders_checked)?;
    if report.roots.is_empty() {
        writeln!(w, "no nontrivial limit-cycle amplitudes")?;
    }
    for root in &report.roots {
        writeln!(
            w,
            "rho = {:.6}  omega = {:.6}  period = {:.6}  {}  [{}]",
            root.rho,
            root.omega,
            root.period,
            if root.stable { "stable" } else { "unstable" },
            match root.classification {
                RootClassification::Converged => "CONVERGED",
                RootClassification::Spurious => "SPURIOUS",
            }
        )?;
        for n in &root.notes {
            writeln!(w, "    - {n}")?;
        }
    }
    Ok(())
}

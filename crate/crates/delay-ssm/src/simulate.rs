//! Reference time integrators used to validate every reduced-model prediction:
//! a method-of-steps RK4 for the delay equation itself and an L-stable
//! singly-diagonally-implicit RK3 for the stiff chain, plus steady-state
//! classification and stroboscopic Poincaré sections of the results.

use std::io::Write;

use anyhow::{bail, ensure, Context, Result};
use ndarray::{Array1, Array2};
use ndarray_linalg::{Factorize, Solve};
use serde::Serialize;

use crate::chain::ChainSystem;
use crate::delay_model::{DelaySystem, InitialHistory};

/// Fraction of a trajectory discarded as transient before classification.
pub const STEADY_DISCARD_FRAC: f64 = 0.6;
/// Relative peak-to-peak spread below which a response counts as periodic.
const PERIODIC_SPREAD_TOL: f64 = 0.02;
/// |log-amplitude drop| across the steady window that counts as decay/growth.
const DECAY_LOG_DROP: f64 = 0.5;

// ---------------------------------------------------------------------------
// Trajectories with dense output
// ---------------------------------------------------------------------------

/// A numerical trajectory with node derivatives, supporting cubic-Hermite
/// dense output between nodes.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<Array1<f64>>,
    pub dx: Vec<Array1<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map(|v| v.len()).unwrap_or(0)
    }

    pub fn t_end(&self) -> f64 {
        *self.t.last().unwrap_or(&0.0)
    }

    /// Cubic-Hermite interpolant; `t` is clamped to the covered span.
    pub fn sample(&self, t: f64) -> Array1<f64> {
        assert!(self.len() >= 2, "dense output needs at least two nodes");
        let t = t.clamp(self.t[0], *self.t.last().unwrap());
        let seg = self.t.partition_point(|&tk| tk <= t).clamp(1, self.len() - 1) - 1;
        let (t0, t1) = (self.t[seg], self.t[seg + 1]);
        let dt = t1 - t0;
        if dt <= 0.0 {
            return self.x[seg].clone();
        }
        let s = (t - t0) / dt;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let mut out = Array1::zeros(self.dim());
        for i in 0..self.dim() {
            out[i] = h00 * self.x[seg][i]
                + h10 * dt * self.dx[seg][i]
                + h01 * self.x[seg + 1][i]
                + h11 * dt * self.dx[seg + 1][i];
        }
        out
    }
}

/// Trajectory as CSV, one column per requested coordinate.
pub fn write_trajectory_csv(
    traj: &Trajectory,
    coords: &[usize],
    w: &mut dyn Write,
) -> Result<()> {
    let header: Vec<String> = coords.iter().map(|i| format!("x{i}")).collect();
    writeln!(w, "t,{}", header.join(","))?;
    for k in 0..traj.len() {
        let row: Vec<String> = coords.iter().map(|&i| traj.x[k][i].to_string()).collect();
        writeln!(w, "{},{}", traj.t[k], row.join(","))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Method-of-steps RK4 for the delay equation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct DdeOptions {
    /// Integer steps per delay interval (h = τ/m); at least 20.
    pub steps_per_delay: usize,
    /// Abort threshold on any state component.
    pub blowup: f64,
}

impl Default for DdeOptions {
    fn default() -> Self {
        DdeOptions { steps_per_delay: 40, blowup: 1e8 }
    }
}

/// Integrate the delay system from its initial history over [0, t_end] with
/// classical RK4 under the method of steps: the step size divides the delay
/// exactly, so every delayed argument falls on the already-computed part of
/// the solution (reached through the cubic-Hermite extension) or on the
/// history.
pub fn integrate_dde(
    sys: &DelaySystem,
    hist: &InitialHistory,
    t_end: f64,
    opts: &DdeOptions,
) -> Result<Trajectory> {
    ensure!(t_end > 0.0, "t_end must be positive, got {t_end}");
    ensure!(
        opts.steps_per_delay >= 20,
        "method of steps needs at least 20 steps per delay, got {}",
        opts.steps_per_delay
    );
    ensure!(sys.tau_d > 0.0, "delay must be positive, got {}", sys.tau_d);
    let m = opts.steps_per_delay;
    let h = sys.tau_d / m as f64;
    let n_steps = (t_end / h).ceil() as usize;

    let n = sys.n;
    let mut ts: Vec<f64> = Vec::with_capacity(n_steps + 1);
    let mut xs: Vec<Array1<f64>> = Vec::with_capacity(n_steps + 1);
    let mut dxs: Vec<Array1<f64>> = Vec::with_capacity(n_steps + 1);

    // Delayed state at time td ≤ current front: history for td ≤ 0, otherwise
    // the Hermite extension of the stored nodes. td always lands at least one
    // full step behind the front, so the segment is complete.
    let delayed = |td: f64, xs: &[Array1<f64>], dxs: &[Array1<f64>]| -> Array1<f64> {
        if td <= 0.0 {
            return hist.value(td);
        }
        let seg = ((td / h).floor() as usize).min(xs.len().saturating_sub(2));
        let s = (td - seg as f64 * h) / h;
        if s.abs() < 1e-12 {
            return xs[seg].clone();
        }
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let mut out = Array1::zeros(n);
        for i in 0..n {
            out[i] = h00 * xs[seg][i]
                + h10 * h * dxs[seg][i]
                + h01 * xs[seg + 1][i]
                + h11 * h * dxs[seg + 1][i];
        }
        out
    };

    let x0 = hist.value(0.0);
    let d0 = sys.eval(&x0, &hist.value(-sys.tau_d), 0.0);
    ts.push(0.0);
    xs.push(x0);
    dxs.push(d0);

    for k in 0..n_steps {
        let t = k as f64 * h;
        let x = xs[k].clone();
        let xd_b = delayed(t + 0.5 * h - sys.tau_d, &xs, &dxs);
        let xd_c = delayed(t + h - sys.tau_d, &xs, &dxs);

        // k1 reuses the node derivative, which already saw the delayed state.
        let k1 = dxs[k].clone();
        let k2 = sys.eval(&(&x + &(0.5 * h * &k1)), &xd_b, t + 0.5 * h);
        let k3 = sys.eval(&(&x + &(0.5 * h * &k2)), &xd_b, t + 0.5 * h);
        let k4 = sys.eval(&(&x + &(h * &k3)), &xd_c, t + h);

        let x1 = &x + &((h / 6.0) * &(&k1 + &(2.0 * &k2) + &(2.0 * &k3) + &k4));
        let t1 = (k + 1) as f64 * h;
        if x1.iter().any(|v| !v.is_finite() || v.abs() > opts.blowup) {
            bail!("delay-equation solution exceeded {} near t = {t1:.6}: diverging", opts.blowup);
        }
        let xd1 = delayed(t1 - sys.tau_d, &xs, &dxs);
        let d1 = sys.eval(&x1, &xd1, t1);
        ts.push(t1);
        xs.push(x1);
        dxs.push(d1);
    }
    Ok(Trajectory { t: ts, x: xs, dx: dxs })
}

// ---------------------------------------------------------------------------
// SDIRK3 for the stiff chain
// ---------------------------------------------------------------------------

/// Diagonal coefficient of the L-stable three-stage SDIRK scheme (the real
/// root of x³ − 3x² + 3x/2 − 1/6).
pub const SDIRK_GAMMA: f64 = 0.435866521508459;

#[derive(Debug, Clone, Copy)]
pub struct SdirkOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen from the horizon when absent.
    pub h0: Option<f64>,
    pub max_steps: usize,
    pub blowup: f64,
}

impl Default for SdirkOptions {
    fn default() -> Self {
        SdirkOptions { rtol: 1e-8, atol: 1e-10, h0: None, max_steps: 2_000_000, blowup: 1e8 }
    }
}

struct CachedLu {
    h: f64,
    lu: ndarray_linalg::LUFactorized<ndarray::OwnedRepr<f64>>,
}

/// Integrate the chain over [0, t_end] with an adaptive, stiffly accurate
/// SDIRK3 and an embedded second-order error estimate filtered through
/// (I − hγJ)⁻¹. The Jacobian is frozen over many steps: each stage runs a
/// modified Newton iteration against a cached LU factorization, which is
/// rebuilt only when the step size moves or the iteration degrades.
pub fn integrate_chain(
    cs: &ChainSystem,
    z0: Array1<f64>,
    t_end: f64,
    opts: &SdirkOptions,
) -> Result<Trajectory> {
    ensure!(t_end > 0.0, "t_end must be positive, got {t_end}");
    ensure!(
        (1e-12..=1e-3).contains(&opts.rtol),
        "rtol must lie in [1e-12, 1e-3], got {}",
        opts.rtol
    );
    ensure!(opts.atol > 0.0, "atol must be positive");
    ensure!(z0.len() == cs.dim, "state has dim {}, chain needs {}", z0.len(), cs.dim);

    let g = SDIRK_GAMMA;
    let c2 = 0.5 * (1.0 + g);
    let a21 = 0.5 * (1.0 - g);
    let b1 = -0.25 * (6.0 * g * g - 16.0 * g + 1.0);
    let b2 = 0.25 * (6.0 * g * g - 20.0 * g + 5.0);
    // Embedded second-order weights with a zero final stage.
    let bh2 = (1.0 - 2.0 * g) / (1.0 - g);
    let bh1 = 1.0 - bh2;

    let dim = cs.dim;
    let wrms = |e: &Array1<f64>, za: &Array1<f64>, zb: &Array1<f64>| -> f64 {
        let mut acc = 0.0;
        for i in 0..dim {
            let w = opts.atol + opts.rtol * za[i].abs().max(zb[i].abs());
            acc += (e[i] / w).powi(2);
        }
        (acc / dim as f64).sqrt()
    };

    let mut t = 0.0;
    let mut z = z0;
    let mut h = opts.h0.unwrap_or((1e-4 * t_end).max(1e-10)).min(t_end);
    let mut cache: Option<CachedLu> = None;
    let mut jac_state: Option<Array1<f64>> = None;

    let mut ts = vec![0.0];
    let mut dxs = vec![cs.eval_rhs(&z, 0.0)];
    let mut xs = vec![z.clone()];

    // One modified-Newton stage solve: Y with Y = base + hγ f(t_s, Y).
    // Returns (Y, f(t_s, Y)), or the iteration count it failed at.
    let stage = |base: &Array1<f64>,
                 t_s: f64,
                 h: f64,
                 guess: &Array1<f64>,
                 lu: &CachedLu|
     -> Result<(Array1<f64>, Array1<f64>, usize), usize> {
        let mut y = guess.clone();
        let mut last_norm = f64::INFINITY;
        for it in 0..10 {
            let f = cs.eval_rhs(&y, t_s);
            let gres = &y - base - &(h * g * &f);
            let delta = lu.lu.solve(&(-&gres)).map_err(|_| it)?;
            let mut dn = 0.0;
            for i in 0..dim {
                let w = opts.atol + opts.rtol * y[i].abs().max(1.0);
                dn += (delta[i] / w).powi(2);
            }
            let dn = (dn / dim as f64).sqrt();
            y = &y + &delta;
            if dn <= 0.03 {
                let f = cs.eval_rhs(&y, t_s);
                return Ok((y, f, it + 1));
            }
            if dn > 2.0 * last_norm {
                return Err(it + 1);
            }
            last_norm = dn;
        }
        Err(10)
    };

    let mut steps = 0usize;
    let mut rejects_in_row = 0usize;
    while t < t_end - 1e-12 * t_end {
        steps += 1;
        ensure!(steps <= opts.max_steps, "step budget {} exhausted at t = {t}", opts.max_steps);
        h = h.min(t_end - t);
        ensure!(h > 1e-14 * t_end, "step size underflow at t = {t}");

        // (Re)build the iteration matrix I − hγJ when the cache is stale.
        let need_refactor = match &cache {
            None => true,
            Some(c) => (c.h - h).abs() > 0.2 * c.h,
        };
        if need_refactor || jac_state.is_none() {
            let j = cs.eval_jacobian_dense(&z);
            let mut m = Array2::eye(dim);
            m.scaled_add(-h * g, &j);
            cache = Some(CachedLu {
                h,
                lu: m.factorize().context("failed to factorize the SDIRK iteration matrix")?,
            });
            jac_state = Some(z.clone());
        }
        let lu = cache.as_ref().unwrap();

        let attempt = (|| -> Result<(Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>)> {
            let (y1, k1, _) = stage(&z, t + g * h, h, &z, lu).map_err(|_| anyhow::anyhow!("stage 1"))?;
            let base2 = &z + &(h * a21 * &k1);
            let (y2, k2, _) =
                stage(&base2, t + c2 * h, h, &y1, lu).map_err(|_| anyhow::anyhow!("stage 2"))?;
            let base3 = &z + &(h * b1 * &k1) + &(h * b2 * &k2);
            let (y3, k3, _) =
                stage(&base3, t + h, h, &y2, lu).map_err(|_| anyhow::anyhow!("stage 3"))?;
            Ok((y3, k1, k2, k3))
        })();

        let (z1, k1, k2, k3) = match attempt {
            Ok(v) => v,
            Err(_) => {
                // Newton trouble: refresh the Jacobian at the current state,
                // halve the step, and retry.
                let j = cs.eval_jacobian_dense(&z);
                h *= 0.5;
                let mut m = Array2::eye(dim);
                m.scaled_add(-h * g, &j);
                cache = Some(CachedLu {
                    h,
                    lu: m.factorize().context("failed to factorize the SDIRK iteration matrix")?,
                });
                jac_state = Some(z.clone());
                rejects_in_row += 1;
                ensure!(rejects_in_row <= 40, "Newton iteration keeps failing near t = {t}");
                continue;
            }
        };

        // Embedded error, filtered through the iteration matrix so stiff
        // components do not inflate it.
        let raw = h * ((b1 - bh1) * &k1 + (b2 - bh2) * &k2 + g * &k3);
        let filtered = lu.lu.solve(&raw).context("error filter solve failed")?;
        let err = wrms(&filtered, &z, &z1);

        if err <= 1.0 {
            t += h;
            if z1.iter().any(|v| !v.is_finite() || v.abs() > opts.blowup) {
                bail!("chain solution exceeded {} near t = {t:.6}: diverging", opts.blowup);
            }
            z = z1;
            ts.push(t);
            xs.push(z.clone());
            dxs.push(k3); // k3 = f(t, z) because the scheme is stiffly accurate
            rejects_in_row = 0;
            let fac = (0.9 * err.max(1e-10).powf(-1.0 / 3.0)).clamp(0.2, 5.0);
            h *= fac;
        } else {
            rejects_in_row += 1;
            ensure!(rejects_in_row <= 40, "step keeps being rejected near t = {t}");
            let fac = (0.9 * err.powf(-1.0 / 3.0)).clamp(0.2, 0.8);
            h *= fac;
        }
    }
    Ok(Trajectory { t: ts, x: xs, dx: dxs })
}

// ---------------------------------------------------------------------------
// Steady-state classification
// ---------------------------------------------------------------------------

/// Long-time behaviour of one coordinate of a trajectory.
#[derive(Debug, Clone, Serialize)]
pub enum SteadyState {
    /// Oscillation dies out (or keeps decaying across the whole window).
    Decay { amplitude: f64 },
    /// Constant-amplitude oscillation.
    Periodic { amplitude: f64, period: f64 },
    /// Bounded oscillation with a modulated envelope.
    QuasiPeriodic { band: (f64, f64), modulation_period: Option<f64> },
    /// Still drifting (or too few oscillations to judge).
    Inconclusive,
}

/// Classification result plus the refined peaks it was based on.
#[derive(Debug, Clone, Serialize)]
pub struct SteadyStateReport {
    pub state: SteadyState,
    /// (time, value) of each local maximum in the steady window.
    pub peaks: Vec<(f64, f64)>,
    /// Start of the steady window.
    pub window_start: f64,
}

/// Local maxima of coordinate `coord` for t ≥ t_start, each refined by a
/// parabola through the three surrounding nodes.
fn refined_peaks(traj: &Trajectory, coord: usize, t_start: f64) -> Vec<(f64, f64)> {
    let mut peaks = Vec::new();
    for k in 1..traj.len().saturating_sub(1) {
        if traj.t[k] < t_start {
            continue;
        }
        let (ym, y0, yp) = (traj.x[k - 1][coord], traj.x[k][coord], traj.x[k + 1][coord]);
        if y0 > ym && y0 >= yp {
            let denom = ym - 2.0 * y0 + yp;
            if denom < 0.0 {
                let delta = 0.5 * (ym - yp) / denom;
                let h = traj.t[k + 1] - traj.t[k];
                let yv = y0 - 0.25 * (ym - yp) * delta;
                peaks.push((traj.t[k] + delta * h, yv));
            } else {
                peaks.push((traj.t[k], y0));
            }
        }
    }
    peaks
}

/// Classify the long-time behaviour of coordinate `coord`: the first 60% of
/// the trajectory is discarded as transient, local maxima are extracted, and
/// the envelope of their values decides between decay, a periodic response,
/// a quasi-periodic (modulated) response, and "still drifting".
pub fn classify_steady_state(traj: &Trajectory, coord: usize) -> SteadyStateReport {
    let t0 = traj.t.first().copied().unwrap_or(0.0);
    let t_start = t0 + STEADY_DISCARD_FRAC * (traj.t_end() - t0);
    let peaks = refined_peaks(traj, coord, t_start);

    let global_scale = traj
        .x
        .iter()
        .map(|x| x[coord].abs())
        .fold(0.0, f64::max);
    let window_max = traj
        .t
        .iter()
        .zip(&traj.x)
        .filter(|(t, _)| **t >= t_start)
        .map(|(_, x)| x[coord].abs())
        .fold(0.0, f64::max);

    let state = 'class: {
        if window_max <= 1e-8 * global_scale.max(f64::MIN_POSITIVE) || peaks.len() < 3 {
            break 'class SteadyState::Decay { amplitude: window_max };
        }
        let values: Vec<f64> = peaks.iter().map(|&(_, v)| v).collect();
        let first = values.first().copied().unwrap();
        let last = values.last().copied().unwrap();
        if first > 0.0 && last > 0.0 {
            let drop = (last / first).ln();
            if drop < -DECAY_LOG_DROP {
                break 'class SteadyState::Decay { amplitude: last };
            }
            if drop > DECAY_LOG_DROP {
                break 'class SteadyState::Inconclusive;
            }
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let vmax = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let vmin = values.iter().cloned().fold(f64::INFINITY, f64::min);
        if mean <= 0.0 {
            break 'class SteadyState::Inconclusive;
        }
        let spread = (vmax - vmin) / mean;
        let mean_gap = (peaks.last().unwrap().0 - peaks[0].0) / (peaks.len() - 1) as f64;
        if spread <= PERIODIC_SPREAD_TOL {
            break 'class SteadyState::Periodic { amplitude: mean, period: mean_gap };
        }
        // A genuinely modulated envelope turns around repeatedly; a monotone
        // envelope means the transient has not settled.
        let mut flips = 0;
        let mut last_sign = 0i8;
        for w in values.windows(2) {
            let s = (w[1] - w[0]).signum() as i8;
            if s != 0 {
                if last_sign != 0 && s != last_sign {
                    flips += 1;
                }
                last_sign = s;
            }
        }
        if flips >= 4 {
            // Envelope modulation period from the spacing of envelope maxima.
            let env_peaks: Vec<f64> = (1..values.len() - 1)
                .filter(|&i| values[i] > values[i - 1] && values[i] >= values[i + 1])
                .map(|i| peaks[i].0)
                .collect();
            let modulation_period = if env_peaks.len() >= 2 {
                Some((env_peaks[env_peaks.len() - 1] - env_peaks[0]) / (env_peaks.len() - 1) as f64)
            } else {
                None
            };
            break 'class SteadyState::QuasiPeriodic { band: (vmin, vmax), modulation_period };
        }
        SteadyState::Inconclusive
    };
    SteadyStateReport { state, peaks, window_start: t_start }
}

// ---------------------------------------------------------------------------
// Poincaré sections
// ---------------------------------------------------------------------------

/// Stroboscopic section: the trajectory sampled at the forcing phase zero,
/// t_k = k·2π/Ω, after discarding the leading `discard_frac` of the run.
pub fn poincare_section(
    traj: &Trajectory,
    omega: f64,
    discard_frac: f64,
) -> Vec<(f64, Array1<f64>)> {
    assert!(omega > 0.0, "forcing frequency must be positive");
    let period = std::f64::consts::TAU / omega;
    let t0 = traj.t.first().copied().unwrap_or(0.0);
    let t_start = t0 + discard_frac.clamp(0.0, 1.0) * (traj.t_end() - t0);
    let mut out = Vec::new();
    let mut k = (t_start / period).ceil() as i64;
    loop {
        let tk = k as f64 * period;
        if tk > traj.t_end() {
            break;
        }
        out.push((tk, traj.sample(tk)));
        k += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::build_chain;
    use crate::delay_model::make_duffing;
    use approx::assert_relative_eq;
    use ndarray::array;
    use ndarray_linalg::Eig;
    use num_complex::Complex64;
    use proptest::prelude::*;

    /// ẋ(t) = −(π/2)·x(t−1) with history cos(πs/2) has the exact solution
    /// x(t) = cos(πt/2) for all t.
    fn quarter_wave_system() -> DelaySystem {
        DelaySystem {
            n: 1,
            tau_d: 1.0,
            a_u0: array![[0.0]],
            a_un: array![[-std::f64::consts::FRAC_PI_2]],
            nonlinear: vec![],
            forcing: None,
            epsilon: 0.0,
            omega: 1.0,
        }
    }

    fn quarter_wave_history() -> InitialHistory {
        InitialHistory::from_fns(
            |s| array![(std::f64::consts::FRAC_PI_2 * s).cos()],
            |s| array![-std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * s).sin()],
        )
    }

    #[test]
    fn dde_reproduces_exact_delay_solution() {
        let sys = quarter_wave_system();
        let traj = integrate_dde(&sys, &quarter_wave_history(), 5.0, &DdeOptions::default())
            .unwrap();
        let mut max_err = 0.0_f64;
        for (t, x) in traj.t.iter().zip(&traj.x) {
            max_err = max_err.max((x[0] - (std::f64::consts::FRAC_PI_2 * t).cos()).abs());
        }
        assert!(max_err < 1e-5, "max error {max_err}");
    }

    #[test]
    fn dde_converges_at_order_four() {
        let sys = quarter_wave_system();
        let hist = quarter_wave_history();
        let t_end = 3.0;
        let mut hs = Vec::new();
        let mut errs = Vec::new();
        for m in [20usize, 40, 80, 160] {
            let traj = integrate_dde(
                &sys,
                &hist,
                t_end,
                &DdeOptions { steps_per_delay: m, blowup: 1e8 },
            )
            .unwrap();
            let mut err = 0.0_f64;
            for (t, x) in traj.t.iter().zip(&traj.x) {
                if *t >= t_end - 1.0 {
                    err = err.max((x[0] - (std::f64::consts::FRAC_PI_2 * t).cos()).abs());
                }
            }
            hs.push(sys.tau_d / m as f64);
            errs.push(err.max(1e-300));
        }
        let slope = crate::linalg::loglog_slope(&hs, &errs);
        assert!((3.5..=4.5).contains(&slope), "observed order {slope}");
    }

    #[test]
    fn undamped_oscillator_conserves_energy() {
        // δ = 0, β = 0: ẍ = −αx. E = x² + ẋ²/α is exactly conserved.
        let sys = make_duffing(0.0, 2.0, 0.0, 1.0, 0.0, 1.2).unwrap();
        let hist = InitialHistory::constant(array![0.7, 0.0]);
        let traj = integrate_dde(&sys, &hist, 100.0, &DdeOptions::default()).unwrap();
        let energy = |x: &Array1<f64>| x[0] * x[0] + x[1] * x[1] / 2.0;
        let e0 = energy(&traj.x[0]);
        let mut max_drift = 0.0_f64;
        for x in &traj.x {
            max_drift = max_drift.max((energy(x) - e0).abs() / e0);
        }
        assert!(max_drift < 1e-6, "energy drift {max_drift}");
    }

    #[test]
    fn dde_blowup_is_reported() {
        // ẋ = 2x + x(t−1): strongly unstable.
        let sys = DelaySystem {
            n: 1,
            tau_d: 1.0,
            a_u0: array![[2.0]],
            a_un: array![[1.0]],
            nonlinear: vec![],
            forcing: None,
            epsilon: 0.0,
            omega: 1.0,
        };
        let hist = InitialHistory::constant(array![1.0]);
        let err = integrate_dde(&sys, &hist, 50.0, &DdeOptions::default()).unwrap_err();
        assert!(format!("{err}").contains("diverging"), "{err}");
    }

    #[test]
    fn sdirk_matches_linear_chain_exponential() {
        // Linear scalar feedback chain: exact solution via eigendecomposition.
        let sys = DelaySystem {
            n: 1,
            tau_d: 1.0,
            a_u0: array![[0.0]],
            a_un: array![[-1.2]],
            nonlinear: vec![],
            forcing: None,
            epsilon: 0.0,
            omega: 1.0,
        };
        let cs = build_chain(&sys, 6).unwrap();
        let hist = InitialHistory::constant(array![0.7]);
        let z0 = cs.state_from_history(&hist);
        let t_end = 2.0;
        let traj = integrate_chain(
            &cs,
            z0.clone(),
            t_end,
            &SdirkOptions { rtol: 1e-9, atol: 1e-12, ..Default::default() },
        )
        .unwrap();

        let a = cs.a_dense().mapv(|v| Complex64::new(v, 0.0));
        let (vals, vecs) = a.eig().unwrap();
        // z(t) = V diag(e^{λt}) V⁻¹ z0, via solving V c = z0.
        let zc = z0.mapv(|v| Complex64::new(v, 0.0));
        let coef = vecs.solve(&zc).unwrap();
        let mut exact = Array1::from_elem(cs.dim, Complex64::new(0.0, 0.0));
        for (j, lam) in vals.iter().enumerate() {
            let w = coef[j] * (lam * t_end).exp();
            for i in 0..cs.dim {
                exact[i] += w * vecs[[i, j]];
            }
        }
        let zt = traj.x.last().unwrap();
        let mut max_err = 0.0_f64;
        for i in 0..cs.dim {
            assert!(exact[i].im.abs() < 1e-9);
            max_err = max_err.max((zt[i] - exact[i].re).abs());
        }
        assert!(max_err < 1e-6, "max error vs matrix exponential {max_err}");
    }

    #[test]
    fn chain_and_dde_solvers_agree() {
        // The two reference solvers integrate different formulations of the
        // same oscillator; agreement is limited by the N⁻² chain error.
        let sys = make_duffing(0.2, 2.0, 4.0, 1.0, 0.0, 1.2).unwrap();
        let hist = InitialHistory::constant(array![0.7, 0.0]);
        let dde = integrate_dde(&sys, &hist, 10.0, &DdeOptions::default()).unwrap();

        let cs = build_chain(&sys, 100).unwrap();
        let z0 = cs.state_from_history(&hist);
        let chain = integrate_chain(&cs, z0, 10.0, &SdirkOptions::default()).unwrap();

        let mut max_diff = 0.0_f64;
        for k in 0..=200 {
            let t = 10.0 * k as f64 / 200.0;
            let xd = dde.sample(t);
            let xc = chain.sample(t);
            max_diff = max_diff.max((xd[0] - xc[0]).abs());
        }
        assert!(max_diff < 1e-3, "cross-solver disagreement {max_diff}");
    }

    fn synthetic_trajectory(
        t_end: f64,
        dt: f64,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64,
    ) -> Trajectory {
        let n = (t_end / dt).round() as usize;
        let t: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
        let x: Vec<Array1<f64>> = t.iter().map(|&tk| array![f(tk)]).collect();
        let dx: Vec<Array1<f64>> = t.iter().map(|&tk| array![df(tk)]).collect();
        Trajectory { t, x, dx }
    }

    #[test]
    fn steady_state_classification_on_synthetic_signals() {
        // Decaying oscillation.
        let traj = synthetic_trajectory(
            400.0,
            0.05,
            |t| (-0.05 * t).exp() * (1.5 * t).cos(),
            |t| {
                (-0.05 * t).exp() * (-0.05 * (1.5 * t).cos() - 1.5 * (1.5 * t).sin())
            },
        );
        match classify_steady_state(&traj, 0).state {
            SteadyState::Decay { .. } => {}
            other => panic!("expected decay, got {other:?}"),
        }

        // Clean periodic response.
        let traj = synthetic_trajectory(
            400.0,
            0.05,
            |t| 2.3 * (1.5 * t).cos(),
            |t| -2.3 * 1.5 * (1.5 * t).sin(),
        );
        match classify_steady_state(&traj, 0).state {
            SteadyState::Periodic { amplitude, period } => {
                assert_relative_eq!(amplitude, 2.3, max_relative = 1e-3);
                assert_relative_eq!(
                    period,
                    std::f64::consts::TAU / 1.5,
                    max_relative = 1e-3
                );
            }
            other => panic!("expected periodic, got {other:?}"),
        }

        // Two-frequency beating.
        let env = |t: f64| 1.0 + 0.25 * (0.11 * t).cos();
        let denv = |t: f64| -0.25 * 0.11 * (0.11 * t).sin();
        let traj = synthetic_trajectory(
            800.0,
            0.05,
            |t| env(t) * (1.5 * t).cos(),
            |t| denv(t) * (1.5 * t).cos() - env(t) * 1.5 * (1.5 * t).sin(),
        );
        match classify_steady_state(&traj, 0).state {
            SteadyState::QuasiPeriodic { band, .. } => {
                assert!((0.70..=0.80).contains(&band.0), "band low {}", band.0);
                assert!((1.20..=1.30).contains(&band.1), "band high {}", band.1);
            }
            other => panic!("expected quasi-periodic, got {other:?}"),
        }

        // Still growing: no verdict.
        let traj = synthetic_trajectory(
            400.0,
            0.05,
            |t| (1.0 + 0.002 * t) * (1.5 * t).cos(),
            |t| 0.002 * (1.5 * t).cos() - (1.0 + 0.002 * t) * 1.5 * (1.5 * t).sin(),
        );
        match classify_steady_state(&traj, 0).state {
            SteadyState::Inconclusive => {}
            other => panic!("expected inconclusive, got {other:?}"),
        }
    }

    #[test]
    fn poincare_section_collapses_for_periodic_response() {
        // Forced, damped, stable regime: the stroboscopic section of the
        // steady state is a single point.
        let sys = make_duffing(0.2, 2.0, 4.0, 1.0, 0.01, 1.2).unwrap();
        let hist = InitialHistory::constant(array![0.1, 0.0]);
        let traj = integrate_dde(&sys, &hist, 3000.0, &DdeOptions::default()).unwrap();
        let pts = poincare_section(&traj, 1.2, STEADY_DISCARD_FRAC);
        assert!(pts.len() > 50, "expected many section points, got {}", pts.len());
        let last = &pts.last().unwrap().1;
        let mut diameter = 0.0_f64;
        for (_, p) in &pts {
            diameter =
                diameter.max(((p[0] - last[0]).powi(2) + (p[1] - last[1]).powi(2)).sqrt());
        }
        assert!(diameter < 1e-3, "section diameter {diameter}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Hermite dense output is exact on cubic polynomials.
        #[test]
        fn dense_output_reproduces_cubics(
            c0 in -2.0_f64..2.0,
            c1 in -2.0_f64..2.0,
            c2 in -2.0_f64..2.0,
            c3 in -2.0_f64..2.0,
            probe in 0.0_f64..1.0,
        ) {
            let f = |t: f64| c0 + c1 * t + c2 * t * t + c3 * t * t * t;
            let df = |t: f64| c1 + 2.0 * c2 * t + 3.0 * c3 * t * t;
            let t: Vec<f64> = (0..=10).map(|k| 0.3 * k as f64).collect();
            let x: Vec<Array1<f64>> = t.iter().map(|&tk| array![f(tk)]).collect();
            let dx: Vec<Array1<f64>> = t.iter().map(|&tk| array![df(tk)]).collect();
            let traj = Trajectory { t, x, dx };
            let tp = 3.0 * probe;
            let v = traj.sample(tp)[0];
            prop_assert!((v - f(tp)).abs() <= 1e-9 * (1.0 + f(tp).abs()),
                "Hermite {v} vs exact {}", f(tp));
        }
    }
}

//! Problem definitions: nonlinear DDEs with one discrete delay.
//!
//! A [`DelaySystem`] represents
//!
//! ```text
//! ẋ(t) = A_u0·x(t) + A_uN·x(t−τ_d) + Σ monomials(x(t), x(t−τ_d)) + ε·g(Ωt)
//! ```
//!
//! with polynomial nonlinearities of total degree ≥ 2 over the 2n variables
//! (current state, delayed state) and optional harmonic forcing
//! g(Ωt) = Re(ĝ(Ω)·e^{iΩt}). Builders for the three benchmark families
//! (delayed Duffing, delay-coupled oscillators, Galerkin-projected delayed
//! reaction–diffusion) live here, along with initial-history descriptions
//! used by the reference integrators.

use anyhow::{ensure, Result};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use std::f64::consts::PI;

/// How the complex forcing amplitude scales with the forcing frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AmplitudeLaw {
    /// ĝ(Ω) = amplitude (force-controlled excitation).
    Constant,
    /// ĝ(Ω) = Ω²·amplitude (base excitation).
    OmegaSquared,
}

impl AmplitudeLaw {
    /// Frequency-dependent scale factor applied to the base amplitude.
    pub fn scale(self, omega: f64) -> f64 {
        match self {
            AmplitudeLaw::Constant => 1.0,
            AmplitudeLaw::OmegaSquared => omega * omega,
        }
    }
}

/// Harmonic forcing descriptor: per-row complex amplitude and its frequency law.
///
/// The physical force on row i is ε·Re(amplitude[i]·scale(Ω)·e^{iΩt}).
#[derive(Debug, Clone)]
pub struct Forcing {
    pub amplitude: Array1<Complex64>,
    pub law: AmplitudeLaw,
}

impl Forcing {
    /// ĝ(Ω): the effective complex amplitude vector at forcing frequency Ω.
    pub fn amplitude_at(&self, omega: f64) -> Array1<Complex64> {
        let s = self.law.scale(omega);
        self.amplitude.mapv(|a| a * s)
    }
}

/// One polynomial term: coeff · Π current[i]^exps[i] · Π delayed[j]^exps[n+j],
/// added to the given target row of the vector field.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Monomial {
    /// Row of ẋ this term feeds (0-based).
    pub row: usize,
    /// Exponents over the 2n variables: first n current, last n delayed.
    pub exps: Vec<u32>,
    pub coeff: f64,
}

impl Monomial {
    pub fn degree(&self) -> u32 {
        self.exps.iter().sum()
    }
}

/// A nonlinear DDE with one discrete delay and optional harmonic forcing.
#[derive(Debug, Clone)]
pub struct DelaySystem {
    /// State dimension n.
    pub n: usize,
    /// Discrete delay τ_d > 0.
    pub tau_d: f64,
    /// Coefficient of the current state x(t).
    pub a_u0: Array2<f64>,
    /// Coefficient of the delayed state x(t−τ_d).
    pub a_un: Array2<f64>,
    /// Polynomial nonlinearities, each of total degree ≥ 2.
    pub nonlinear: Vec<Monomial>,
    /// Optional harmonic forcing shape.
    pub forcing: Option<Forcing>,
    /// Dimensionless forcing scale ε ≥ 0.
    pub epsilon: f64,
    /// Forcing angular frequency Ω (> 0 whenever forcing is present).
    pub omega: f64,
}

impl DelaySystem {
    /// Validate structural invariants shared by all constructors.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n > 0, "state dimension must be positive");
        ensure!(self.tau_d > 0.0, "delay must be positive, got {}", self.tau_d);
        ensure!(self.a_u0.dim() == (self.n, self.n), "A_u0 must be n×n");
        ensure!(self.a_un.dim() == (self.n, self.n), "A_uN must be n×n");
        ensure!(self.epsilon >= 0.0, "epsilon must be nonnegative");
        for m in &self.nonlinear {
            ensure!(m.row < self.n, "monomial targets row {} out of range", m.row);
            ensure!(m.exps.len() == 2 * self.n, "monomial exponent list must have length 2n");
            ensure!(
                m.degree() >= 2,
                "monomial on row {} has degree {} < 2; linear terms belong in A_u0/A_uN",
                m.row,
                m.degree()
            );
        }
        if let Some(f) = &self.forcing {
            ensure!(f.amplitude.len() == self.n, "forcing amplitude must have length n");
            ensure!(
                self.omega > 0.0,
                "forcing frequency must be positive when forcing is present"
            );
        }
        Ok(())
    }

    /// Autonomous right-hand side f(x, x_delayed), without forcing.
    pub fn eval_autonomous(&self, x: &Array1<f64>, xd: &Array1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.n);
        assert_eq!(xd.len(), self.n);
        let mut out = self.a_u0.dot(x) + self.a_un.dot(xd);
        for m in &self.nonlinear {
            let mut term = m.coeff;
            for (i, &e) in m.exps.iter().enumerate() {
                if e > 0 {
                    let v = if i < self.n { x[i] } else { xd[i - self.n] };
                    term *= v.powi(e as i32);
                }
            }
            out[m.row] += term;
        }
        out
    }

    /// Full right-hand side including forcing at time t.
    pub fn eval(&self, x: &Array1<f64>, xd: &Array1<f64>, t: f64) -> Array1<f64> {
        let mut out = self.eval_autonomous(x, xd);
        if let Some(f) = &self.forcing {
            if self.epsilon != 0.0 {
                let phase = Complex64::new(0.0, self.omega * t).exp();
                let g = f.amplitude_at(self.omega);
                for i in 0..self.n {
                    out[i] += self.epsilon * (g[i] * phase).re;
                }
            }
        }
        out
    }

    /// The characteristic matrix B(λ) = λI − A_u0 − A_uN·e^{−λτ_d}.
    pub fn characteristic_matrix(&self, lambda: Complex64) -> Array2<Complex64> {
        let n = self.n;
        let decay = (-lambda * self.tau_d).exp();
        let mut b = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                b[[i, j]] = -Complex64::new(self.a_u0[[i, j]], 0.0)
                    - decay * self.a_un[[i, j]];
                if i == j {
                    b[[i, j]] += lambda;
                }
            }
        }
        b
    }
}

/// Delayed Duffing oscillator: ẍ = −δ·ẋ(t−τ_d) − α·x − β·x³ + ε·cos(Ωt),
/// in first-order form (x1, x2) = (x, ẋ).
pub fn make_duffing(
    delta: f64,
    alpha: f64,
    beta: f64,
    tau_d: f64,
    epsilon: f64,
    omega: f64,
) -> Result<DelaySystem> {
    let a_u0 = ndarray::array![[0.0, 1.0], [-alpha, 0.0]];
    let a_un = ndarray::array![[0.0, 0.0], [0.0, -delta]];
    let nonlinear = vec![Monomial { row: 1, exps: vec![3, 0, 0, 0], coeff: -beta }];
    let forcing = (epsilon > 0.0).then(|| Forcing {
        amplitude: ndarray::array![Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)],
        law: AmplitudeLaw::Constant,
    });
    let sys = DelaySystem {
        n: 2,
        tau_d,
        a_u0,
        a_un,
        nonlinear,
        forcing,
        epsilon,
        omega: if omega > 0.0 { omega } else { 1.0 },
    };
    sys.validate()?;
    Ok(sys)
}

/// Two delay-coupled oscillators under base excitation, in first-order form
/// (q1, q̇1, q2, q̇2). See [`make_coupled_oscillators_with`] for the quadratic
/// self-coupling factor; this uses the default value 4.
pub fn make_coupled_oscillators(
    mu1: f64,
    mu2: f64,
    gamma: f64,
    beta1: f64,
    beta2: f64,
    tau_d: f64,
    epsilon: f64,
    omega: f64,
) -> Result<DelaySystem> {
    make_coupled_oscillators_with(mu1, mu2, gamma, beta1, beta2, tau_d, epsilon, omega, 4.0)
}

/// Coupled-oscillator builder with an explicit factor for the quadratic
/// self-coupling of the second oscillator (the −factor·γ·q2² term); the model's
/// stated form sums two such contributions to a net factor of 4.
#[allow(clippy::too_many_arguments)]
pub fn make_coupled_oscillators_with(
    mu1: f64,
    mu2: f64,
    gamma: f64,
    beta1: f64,
    beta2: f64,
    tau_d: f64,
    epsilon: f64,
    omega: f64,
    v_quad_factor: f64,
) -> Result<DelaySystem> {
    let w1_sq = 1.0 + gamma;
    let w2_sq = 1.0 + 3.0 * gamma;
    let mut a_u0 = Array2::zeros((4, 4));
    a_u0[[0, 1]] = 1.0;
    a_u0[[1, 0]] = -w1_sq;
    a_u0[[1, 1]] = -mu1;
    a_u0[[2, 3]] = 1.0;
    a_u0[[3, 2]] = -w2_sq;
    a_u0[[3, 3]] = -mu2;
    // Delayed position/velocity feedback acts identically on both oscillators.
    let mut a_un = Array2::zeros((4, 4));
    a_un[[1, 0]] = -beta1;
    a_un[[1, 1]] = -beta2;
    a_un[[3, 2]] = -beta1;
    a_un[[3, 3]] = -beta2;
    // Variables for exponent lists: (q1, q̇1, q2, q̇2 | delayed likewise).
    let nonlinear = vec![
        // q̈1: −2γ q1 q2 − γ q1 q2² − γ q1³
        Monomial { row: 1, exps: vec![1, 0, 1, 0, 0, 0, 0, 0], coeff: -2.0 * gamma },
        Monomial { row: 1, exps: vec![1, 0, 2, 0, 0, 0, 0, 0], coeff: -gamma },
        Monomial { row: 1, exps: vec![3, 0, 0, 0, 0, 0, 0, 0], coeff: -gamma },
        // q̈2: −(factor)γ q2² − γ q1² q2 − γ q2³
        Monomial { row: 3, exps: vec![0, 0, 2, 0, 0, 0, 0, 0], coeff: -v_quad_factor * gamma },
        Monomial { row: 3, exps: vec![2, 0, 1, 0, 0, 0, 0, 0], coeff: -gamma },
        Monomial { row: 3, exps: vec![0, 0, 3, 0, 0, 0, 0, 0], coeff: -gamma },
    ];
    // Base excitation: ε·Ω²·cos(Ωt) on q̈1 and ε·Ω²·sin(Ωt) on q̈2; sin(Ωt) is
    // cos rotated by −π/2, i.e. amplitude −i in the e^{iΩt} convention.
    let mut amplitude = Array1::zeros(4);
    amplitude[1] = Complex64::new(1.0, 0.0);
    amplitude[3] = Complex64::new(0.0, -1.0);
    let forcing =
        (epsilon > 0.0).then(|| Forcing { amplitude, law: AmplitudeLaw::OmegaSquared });
    let sys = DelaySystem {
        n: 4,
        tau_d,
        a_u0,
        a_un,
        nonlinear,
        forcing,
        epsilon,
        omega: if omega > 0.0 { omega } else { 1.0 },
    };
    sys.validate()?;
    Ok(sys)
}

/// Configuration for the Galerkin-projected delayed reaction–diffusion model
/// (a delayed logistic equation with diffusion on (0, π), Dirichlet boundary).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct HutchinsonConfig {
    /// Number of sine modes retained (state dimension of the projected DDE).
    pub m: usize,
    /// Diffusion coefficient d > 0.
    pub d: f64,
    /// Delayed-feedback gain a > 0.
    pub a: f64,
}

/// ∫₀^π sin(ix)·cos(mx) dx for nonnegative integers: 2i/(i²−m²) when i+m is
/// odd, zero otherwise (including i = m).
fn sine_cosine_integral(m: u32, i: u32) -> f64 {
    if (i + m) % 2 == 1 {
        let (fi, fm) = (i as f64, m as f64);
        2.0 * fi / (fi * fi - fm * fm)
    } else {
        0.0
    }
}

/// ∫₀^π sin(ix)·sin(jx)·sin(kx) dx via product-to-sum reduction.
/// Vanishes whenever i+j+k is even.
pub fn triple_sine_integral(i: u32, j: u32, k: u32) -> f64 {
    0.5 * (sine_cosine_integral(j.abs_diff(k), i) - sine_cosine_integral(j + k, i))
}

/// Galerkin inner product ⟨β_i, β_j·β_k⟩ with β_k(x) = √(2/π)·sin(kx)
/// (orthonormal under ∫₀^π f·g dx). Symmetric in (j, k); vanishes when
/// i+j+k is even.
pub fn hutchinson_coupling(i: u32, j: u32, k: u32) -> f64 {
    (2.0 / PI).powf(1.5) * triple_sine_integral(i, j, k)
}

/// Build the M-mode Galerkin projection of
/// ∂u/∂t = d·u_xx + u − a·u(t−1, x) − a·u(t−1, x)·u(t, x)
/// with u(t, 0) = u(t, π) = 0, τ_d = 1. Modal equations:
/// q̇_i = (1 − d·i²)·q_i − a·q_i(t−1) − a·Σ_{j,k} ⟨β_i, β_j β_k⟩·q_j(t−1)·q_k(t).
pub fn make_hutchinson(cfg: &HutchinsonConfig) -> Result<DelaySystem> {
    ensure!(cfg.m >= 1, "at least one Galerkin mode required");
    ensure!(cfg.d > 0.0, "diffusion coefficient must be positive");
    ensure!(cfg.a > 0.0, "delayed gain must be positive");
    let m = cfg.m;
    let mut a_u0 = Array2::zeros((m, m));
    for i in 0..m {
        let k = (i + 1) as f64;
        a_u0[[i, i]] = 1.0 - cfg.d * k * k;
    }
    let mut a_un = Array2::zeros((m, m));
    for i in 0..m {
        a_un[[i, i]] = -cfg.a;
    }
    let mut nonlinear = Vec::new();
    for i in 1..=m as u32 {
        for j in 1..=m as u32 {
            for k in 1..=m as u32 {
                let c = hutchinson_coupling(i, j, k);
                if c != 0.0 {
                    // Term −a·c·q_j(t−1)·q_k(t).
                    let mut exps = vec![0u32; 2 * m];
                    exps[(k - 1) as usize] += 1; // current q_k
                    exps[m + (j - 1) as usize] += 1; // delayed q_j
                    nonlinear.push(Monomial {
                        row: (i - 1) as usize,
                        exps,
                        coeff: -cfg.a * c,
                    });
                }
            }
        }
    }
    let sys = DelaySystem {
        n: m,
        tau_d: 1.0,
        a_u0,
        a_un,
        nonlinear,
        forcing: None,
        epsilon: 0.0,
        omega: 1.0,
    };
    sys.validate()?;
    Ok(sys)
}

/// Initial history for a DDE: the state on [−τ_d, 0], with an optional
/// derivative (finite-differenced from the value function when absent).
pub struct InitialHistory {
    value: Box<dyn Fn(f64) -> Array1<f64> + Send + Sync>,
    derivative: Option<Box<dyn Fn(f64) -> Array1<f64> + Send + Sync>>,
}

impl InitialHistory {
    /// Constant history x(s) = x0 (derivative identically zero).
    pub fn constant(x0: Array1<f64>) -> Self {
        let n = x0.len();
        Self {
            value: Box::new(move |_| x0.clone()),
            derivative: Some(Box::new(move |_| Array1::zeros(n))),
        }
    }

    /// History from a value function; derivative by central finite differences.
    pub fn from_fn(value: impl Fn(f64) -> Array1<f64> + Send + Sync + 'static) -> Self {
        Self { value: Box::new(value), derivative: None }
    }

    /// History from value and derivative functions.
    pub fn from_fns(
        value: impl Fn(f64) -> Array1<f64> + Send + Sync + 'static,
        derivative: impl Fn(f64) -> Array1<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { value: Box::new(value), derivative: Some(Box::new(derivative)) }
    }

    /// State at s ∈ [−τ_d, 0].
    pub fn value(&self, s: f64) -> Array1<f64> {
        (self.value)(s)
    }

    /// Derivative at s; one-sided differences are used at s = 0 so the stencil
    /// never leaves the history interval to the right.
    pub fn derivative(&self, s: f64) -> Array1<f64> {
        if let Some(d) = &self.derivative {
            return d(s);
        }
        let h = 1e-6;
        if s + h > 0.0 {
            // Backward difference at the right edge of the history window.
            (self.value(s) - self.value(s - h)) / h
        } else {
            (self.value(s + h) - self.value(s - h)) / (2.0 * h)
        }
    }
}

impl std::fmt::Debug for InitialHistory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InitialHistory")
            .field("derivative", &self.derivative.is_some())
            .finish()
    }
}

//! Strict TOML run configuration: one file drives one reproducible run.
//! Unknown keys are rejected with a path to the offending node.

use std::path::PathBuf;

use anyhow::{bail, Result};
use delay_ssm::delay_model::{
    make_coupled_oscillators, make_duffing, make_hutchinson, DelaySystem, HutchinsonConfig,
};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub discretization: Discretization,
    #[serde(default)]
    pub ssm: SsmConfig,
    pub spectrum: Option<SpectrumConfig>,
    pub predict: Option<PredictConfig>,
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Problem selection plus physical parameters. `epsilon`/`omega` describe the
/// harmonic forcing ε·g(Ωt); ε = 0 means autonomous.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    /// ẍ + δ·ẋ(t−τ_d) + α·x + β·x³ = ε·cos(Ωt)
    Duffing {
        delta: f64,
        alpha: f64,
        beta: f64,
        tau_d: f64,
        #[serde(default)]
        epsilon: f64,
        #[serde(default)]
        omega: f64,
    },
    /// Two delay-coupled oscillators under base excitation.
    Coupled {
        mu1: f64,
        mu2: f64,
        gamma: f64,
        beta1: f64,
        beta2: f64,
        tau_d: f64,
        #[serde(default)]
        epsilon: f64,
        #[serde(default)]
        omega: f64,
    },
    /// Galerkin-truncated delayed reaction–diffusion (Hutchinson) model.
    Hutchinson { modes: usize, diffusion: f64, a: f64 },
}

impl ProblemConfig {
    /// Build the delay system, optionally overriding the forcing amplitude
    /// and frequency (used by analysis tasks that carry their own ε, Ω).
    pub fn build_with(&self, epsilon: Option<f64>, omega: Option<f64>) -> Result<DelaySystem> {
        match *self {
            ProblemConfig::Duffing { delta, alpha, beta, tau_d, epsilon: e, omega: om } => {
                make_duffing(delta, alpha, beta, tau_d, epsilon.unwrap_or(e), omega.unwrap_or(om))
            }
            ProblemConfig::Coupled {
                mu1,
                mu2,
                gamma,
                beta1,
                beta2,
                tau_d,
                epsilon: e,
                omega: om,
            } => make_coupled_oscillators(
                mu1,
                mu2,
                gamma,
                beta1,
                beta2,
                tau_d,
                epsilon.unwrap_or(e),
                omega.unwrap_or(om),
            ),
            ProblemConfig::Hutchinson { modes, diffusion, a } => {
                if epsilon.unwrap_or(0.0) > 0.0 {
                    bail!("the reaction–diffusion model defines no harmonic forcing");
                }
                make_hutchinson(&HutchinsonConfig { m: modes, d: diffusion, a })
            }
        }
    }

    pub fn build(&self) -> Result<DelaySystem> {
        self.build_with(None, None)
    }

    pub fn epsilon(&self) -> f64 {
        match *self {
            ProblemConfig::Duffing { epsilon, .. } => epsilon,
            ProblemConfig::Coupled { epsilon, .. } => epsilon,
            ProblemConfig::Hutchinson { .. } => 0.0,
        }
    }

    /// Rebuild with one named parameter replaced (for Hopf sweeps).
    pub fn with_parameter(&self, name: &str, value: f64) -> Result<ProblemConfig> {
        let mut out = self.clone();
        match (&mut out, name) {
            (ProblemConfig::Duffing { tau_d, .. }, "tau_d") => *tau_d = value,
            (ProblemConfig::Duffing { delta, .. }, "delta") => *delta = value,
            (ProblemConfig::Coupled { beta1, .. }, "beta1") => *beta1 = value,
            (ProblemConfig::Coupled { tau_d, .. }, "tau_d") => *tau_d = value,
            (ProblemConfig::Hutchinson { a, .. }, "a") => *a = value,
            _ => bail!("parameter {name:?} cannot be swept for this problem kind"),
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    /// Number of chain stages N; the chain state has dimension (2N+1)·n.
    pub n: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsmConfig {
    /// Expansion order of the manifold (odd orders carry the resonant terms).
    pub order: u32,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig { order: 9 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    /// How many leading eigenvalues to validate and write (default: all).
    pub k: Option<usize>,
    /// Parameter sweep for Hopf detection.
    pub sweep: Option<SweepConfig>,
    /// Discretization-convergence study against the transcendental roots.
    pub convergence: Option<ConvergenceConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Which problem parameter to sweep (tau_d, delta, beta1, a).
    pub parameter: String,
    pub from: f64,
    pub to: f64,
    #[serde(default = "default_sweep_steps")]
    pub steps: usize,
}

fn default_sweep_steps() -> usize {
    26
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub grids: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Which predictions to emit: backbone, limit_cycle, frc, torus.
    pub tasks: Vec<PredictTask>,
    /// Amplitude cap for backbone / root searches (default: 1.2 × the
    /// convergence-radius estimate).
    pub rho_max: Option<f64>,
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    /// Load a previously persisted expansion instead of recomputing.
    pub expansion: Option<PathBuf>,
    pub frc: Option<FrcConfig>,
    pub torus: Option<TorusConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictTask {
    Backbone,
    LimitCycle,
    Frc,
    Torus,
}

fn default_n_points() -> usize {
    400
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrcConfig {
    pub omega_min: f64,
    pub omega_max: f64,
    /// Forcing amplitude (default: the problem's ε).
    pub epsilon: Option<f64>,
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    /// Also audit convergence across expansion orders.
    #[serde(default)]
    pub order_check: bool,
}

fn default_grid_n() -> usize {
    400
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorusConfig {
    pub omega: f64,
    /// Forcing amplitude (default: the problem's ε).
    pub epsilon: Option<f64>,
    #[serde(default = "default_n_phase")]
    pub n_phase: usize,
}

fn default_n_phase() -> usize {
    64
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub method: SimulateMethod,
    pub t_end: f64,
    /// Constant initial history (length = state dimension of the problem).
    pub history: Vec<f64>,
    #[serde(default = "default_steps_per_delay")]
    pub steps_per_delay: usize,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    /// Coordinates written to the trajectory CSV (default: all physical).
    pub coords: Option<Vec<usize>>,
    /// Keep every k-th node in the trajectory CSV.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Classify the long-time behaviour of coordinate `classify_coord`.
    #[serde(default = "default_true")]
    pub classify: bool,
    #[serde(default)]
    pub classify_coord: usize,
    /// Stroboscopic section at the forcing period (forced runs only).
    #[serde(default)]
    pub poincare: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulateMethod {
    Dde,
    Chain,
}

fn default_steps_per_delay() -> usize {
    40
}

fn default_rtol() -> f64 {
    1e-8
}

fn default_atol() -> f64 {
    1e-10
}

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory; overridden by --out.
    pub directory: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.discretization.n == 0 {
            bail!("discretization.n must be positive");
        }
        if self.ssm.order < 3 {
            bail!("ssm.order must be at least 3, got {}", self.ssm.order);
        }
        if let Some(p) = &self.predict {
            if p.tasks.is_empty() {
                bail!("predict.tasks must name at least one task");
            }
            if p.tasks.contains(&PredictTask::Frc) && p.frc.is_none() {
                bail!("predict.tasks includes \"frc\" but no [predict.frc] block is given");
            }
            if p.tasks.contains(&PredictTask::Torus) && p.torus.is_none() {
                bail!("predict.tasks includes \"torus\" but no [predict.torus] block is given");
            }
            if let Some(f) = &p.frc {
                if f.epsilon.unwrap_or(self.problem.epsilon()) <= 0.0 {
                    bail!("the frc task needs a positive forcing amplitude (predict.frc.epsilon or problem.epsilon)");
                }
            }
            if let Some(t) = &p.torus {
                if t.epsilon.unwrap_or(self.problem.epsilon()) <= 0.0 {
                    bail!("the torus task needs a positive forcing amplitude (predict.torus.epsilon or problem.epsilon)");
                }
            }
        }
        if let Some(s) = &self.simulate {
            if s.t_end <= 0.0 {
                bail!("simulate.t_end must be positive");
            }
            if s.history.is_empty() {
                bail!("simulate.history must not be empty");
            }
            if s.stride == 0 {
                bail!("simulate.stride must be at least 1");
            }
        }
        if let Some(sp) = &self.spectrum {
            if let Some(sw) = &sp.sweep {
                if !(sw.from < sw.to) || sw.steps < 2 {
                    bail!("spectrum.sweep needs from < to and at least 2 steps");
                }
            }
            if let Some(cv) = &sp.convergence {
                if cv.grids.len() < 2 {
                    bail!("spectrum.convergence.grids needs at least 2 resolutions");
                }
            }
        }
        Ok(())
    }
}

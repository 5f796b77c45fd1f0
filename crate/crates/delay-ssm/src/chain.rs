//! Delay-free chain approximation of a [`DelaySystem`].
//!
//! The delay interval is split into N stages τ_i = i·τ_d/N whose states
//! u_i(t) ≈ x(t−τ_i) evolve by a second-order Taylor closure (the closure
//! order is structural, not configurable):
//!
//! ```text
//! u̇_0 = A_u0·u_0 + A_uN·u_N + F(u_0, u_N) + ε·g(Ωt)
//! u̇_i = w_i
//! ẇ_i = (2N²/τ_d²)·(u_{i−1} − u_i − (τ_d/N)·w_i),   i = 1..N
//! ```
//!
//! The stacked state z = (u_0, …, u_N, w_1, …, w_N) has dimension (2N+1)·n.
//! Nonlinear terms are re-indexed so that x(t) reads from the u_0 block and
//! x(t−τ_d) from the u_N block; they only ever feed the first n rows.

use crate::delay_model::{DelaySystem, Monomial};
use crate::linalg::Csr;
use anyhow::{ensure, Context, Result};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use std::io::Write;

/// A polynomial term over chain coordinates, stored sparsely:
/// coeff · Π z[idx]^exp added to the given row.
#[derive(Debug, Clone)]
pub struct ChainMonomial {
    pub row: usize,
    /// (coordinate index, exponent) pairs with distinct indices, exponent ≥ 1.
    pub factors: Vec<(usize, u32)>,
    pub coeff: f64,
}

impl ChainMonomial {
    /// Evaluate the monomial (without the target-row bookkeeping).
    pub fn eval(&self, z: &Array1<f64>) -> f64 {
        let mut term = self.coeff;
        for &(idx, e) in &self.factors {
            term *= z[idx].powi(e as i32);
        }
        term
    }
}

/// The delay-free ODE chain ż = A·z + F(z) + ε·Re(ĝ(Ω)·e^{iΩt}) (rows 0..n).
#[derive(Debug, Clone)]
pub struct ChainSystem {
    /// Physical state dimension n.
    pub n: usize,
    /// Number of chain stages N.
    pub n_grid: usize,
    /// Full state dimension (2N+1)·n.
    pub dim: usize,
    a: Csr,
    /// Nonlinearities over chain coordinates (target rows all < n).
    pub nonlinear: Vec<ChainMonomial>,
    /// The originating delay system (forcing shape, ε, Ω, delay).
    pub meta: DelaySystem,
}

/// Build the chain approximation with N stages.
pub fn build_chain(sys: &DelaySystem, n_grid: usize) -> Result<ChainSystem> {
    sys.validate()?;
    ensure!(n_grid >= 1, "chain needs at least one stage");
    let n = sys.n;
    let big_n = n_grid;
    let dim = (2 * big_n + 1) * n;
    let tau = sys.tau_d;
    let c2 = 2.0 * (big_n as f64) * (big_n as f64) / (tau * tau);
    let c1 = 2.0 * (big_n as f64) / tau;
    let u_block = |i: usize| i * n; // start of u_i
    let w_block = |i: usize| (big_n + 1) * n + (i - 1) * n; // start of w_i, i ≥ 1

    let mut trip: Vec<(usize, usize, f64)> = Vec::new();
    // u̇_0 rows.
    for r in 0..n {
        for c in 0..n {
            if sys.a_u0[[r, c]] != 0.0 {
                trip.push((r, u_block(0) + c, sys.a_u0[[r, c]]));
            }
            if sys.a_un[[r, c]] != 0.0 {
                trip.push((r, u_block(big_n) + c, sys.a_un[[r, c]]));
            }
        }
    }
    // u̇_i = w_i and the closure rows.
    for i in 1..=big_n {
        for r in 0..n {
            trip.push((u_block(i) + r, w_block(i) + r, 1.0));
            trip.push((w_block(i) + r, u_block(i - 1) + r, c2));
            trip.push((w_block(i) + r, u_block(i) + r, -c2));
            trip.push((w_block(i) + r, w_block(i) + r, -c1));
        }
    }
    let a = Csr::from_triplets(dim, dim, &trip);

    // Re-index nonlinearities: current variable v → u_0 block, delayed → u_N block.
    let nonlinear = sys
        .nonlinear
        .iter()
        .map(|m: &Monomial| {
            let mut factors = Vec::new();
            for (v, &e) in m.exps.iter().enumerate() {
                if e > 0 {
                    let idx = if v < n { v } else { u_block(big_n) + (v - n) };
                    factors.push((idx, e));
                }
            }
            ChainMonomial { row: m.row, factors, coeff: m.coeff }
        })
        .collect();

    Ok(ChainSystem { n, n_grid: big_n, dim, a, nonlinear, meta: sys.clone() })
}

impl ChainSystem {
    /// The sparse linear part A.
    pub(crate) fn a(&self) -> &Csr {
        &self.a
    }

    /// Number of stored nonzeros in A.
    pub fn nnz(&self) -> usize {
        self.a.nnz()
    }

    /// Dense copy of A (for eigensolvers and factorizations).
    pub fn a_dense(&self) -> Array2<f64> {
        self.a.to_dense()
    }

    /// Complex forcing template ĝ(Ω) embedded in chain coordinates (nonzero
    /// only in the first n rows); the amplitude law is resolved at the given Ω.
    pub fn forcing_template(&self, omega: f64) -> Array1<Complex64> {
        let mut g = Array1::zeros(self.dim);
        if let Some(f) = &self.meta.forcing {
            let amp = f.amplitude_at(omega);
            for i in 0..self.n {
                g[i] = amp[i];
            }
        }
        g
    }

    /// Right-hand side ż = A·z + F(z) + ε·Re(ĝ(Ω)·e^{iΩt}).
    pub fn eval_rhs(&self, z: &Array1<f64>, t: f64) -> Array1<f64> {
        let mut out = self.a.matvec(z.view());
        for m in &self.nonlinear {
            out[m.row] += m.eval(z);
        }
        if self.meta.epsilon != 0.0 {
            if let Some(f) = &self.meta.forcing {
                let omega = self.meta.omega;
                let amp = f.amplitude_at(omega);
                let phase = Complex64::new(0.0, omega * t).exp();
                for i in 0..self.n {
                    out[i] += self.meta.epsilon * (amp[i] * phase).re;
                }
            }
        }
        out
    }

    /// Sparse Jacobian A + DF(z).
    #[cfg(test)]
    pub(crate) fn eval_jacobian(&self, z: &Array1<f64>) -> Csr {
        let mut trip: Vec<(usize, usize, f64)> = self.a.iter().collect();
        self.jacobian_nl_triplets(z, &mut trip);
        Csr::from_triplets(self.dim, self.dim, &trip)
    }

    /// Dense Jacobian (for implicit integrators).
    pub fn eval_jacobian_dense(&self, z: &Array1<f64>) -> Array2<f64> {
        let mut j = self.a.to_dense();
        let mut trip = Vec::new();
        self.jacobian_nl_triplets(z, &mut trip);
        for (r, c, v) in trip {
            j[[r, c]] += v;
        }
        j
    }

    /// ∂F/∂z triplets at z, appended to `out`.
    fn jacobian_nl_triplets(&self, z: &Array1<f64>, out: &mut Vec<(usize, usize, f64)>) {
        for m in &self.nonlinear {
            for (fi, &(idx, e)) in m.factors.iter().enumerate() {
                // d/dz[idx]: e·z[idx]^{e−1}·Π_{other} z^{e_other}
                let mut d = m.coeff * e as f64;
                if e > 1 {
                    d *= z[idx].powi(e as i32 - 1);
                }
                for (fj, &(jdx, ej)) in m.factors.iter().enumerate() {
                    if fi != fj {
                        d *= z[jdx].powi(ej as i32);
                    }
                }
                if d != 0.0 {
                    out.push((m.row, idx, d));
                }
            }
        }
    }

    /// Write A in MatrixMarket coordinate format and the forcing template (at
    /// the system's configured Ω) in MatrixMarket array format.
    pub fn export_matrix_market(
        &self,
        a_out: &mut dyn Write,
        forcing_out: &mut dyn Write,
    ) -> Result<()> {
        writeln!(a_out, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(a_out, "{} {} {}", self.dim, self.dim, self.a.nnz())?;
        for (r, c, v) in self.a.iter() {
            writeln!(a_out, "{} {} {}", r + 1, c + 1, v)?;
        }
        let g = self.forcing_template(self.meta.omega);
        writeln!(forcing_out, "%%MatrixMarket matrix array complex general")?;
        writeln!(forcing_out, "{} 1", self.dim)?;
        for v in g.iter() {
            writeln!(forcing_out, "{} {}", v.re, v.im)?;
        }
        Ok(())
    }

    /// Initial chain state from a DDE history: u_i(0) = x0(−τ_i),
    /// w_i(0) = ẋ0(−τ_i) with τ_i = i·τ_d/N.
    pub fn state_from_history(&self, hist: &crate::delay_model::InitialHistory) -> Array1<f64> {
        let n = self.n;
        let big_n = self.n_grid;
        let tau = self.meta.tau_d;
        let mut z = Array1::zeros(self.dim);
        for i in 0..=big_n {
            let s = -(i as f64) * tau / big_n as f64;
            let x = hist.value(s);
            for r in 0..n {
                z[i * n + r] = x[r];
            }
        }
        for i in 1..=big_n {
            let s = -(i as f64) * tau / big_n as f64;
            let dx = hist.derivative(s);
            for r in 0..n {
                z[(big_n + 1) * n + (i - 1) * n + r] = dx[r];
            }
        }
        z
    }
}

/// Convenience: build and immediately densify for small exploratory problems.
pub fn build_chain_dense(sys: &DelaySystem, n_grid: usize) -> Result<Array2<f64>> {
    Ok(build_chain(sys, n_grid).context("chain construction failed")?.a_dense())
}

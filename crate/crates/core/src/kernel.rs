//! Imaginary-time bath kernels.
//!
//! Integrating out the oscillators leaves a retarded interaction between
//! spin-flip vertices at imaginary times separated by `τ`:
//!
//! ```text
//! K̃_s(τ) = ∫ dω F(ω) e^{sω(τ-β/2)} / (2 sinh(ωβ/2))
//! ```
//!
//! and the spin-dependent pair kernel `K_{s,s'}(τ)` mixes the two signs
//! with weights set by `γ`. For `γ ≠ 1/2` and a quantum bath
//! `K_{1,-1} ≠ K_{-1,1}`, which is what breaks the Ising symmetry.

use crate::error::{Error, Result};
use crate::model::{BathKind, LatticeParams, ModelParams};
use crate::quad;
use std::io::Write;

/// Which spin-sign pattern receives the `γ²`/`(1-γ)²` combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KernelBranch {
    /// `γ²K̃_s + (1-γ)²K̃_{s'}` when `s ≠ s'`, `γ(1-γ)(K̃₁ + K̃₋₁)` when `s = s'`.
    #[default]
    AsPrinted,
    /// The two branches exchanged.
    Swapped,
}

/// `e^{sω(τ-β/2)} / (2 sinh(ωβ/2))`, evaluated without overflow.
#[inline]
fn thermal_factor(s: i8, omega: f64, tau: f64, beta: f64) -> f64 {
    let exponent = if s > 0 { omega * (tau - beta) } else { -omega * tau };
    exponent.exp() / -(-omega * beta).exp_m1()
}

/// `K̃_s(τ)` for `0 < τ < β`.
pub fn kernel_tilde(s: i8, tau: f64, beta: f64, p: &ModelParams, tol: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < beta) {
        return Err(Error::Domain(format!("kernel time {tau} outside (0, {beta})")));
    }
    match &p.bath {
        BathKind::ClassicalLimit => Ok(classical_constant(p, beta)),
        BathKind::DiscreteModes(modes) => Ok(modes
            .iter()
            .map(|m| m.lambda * m.lambda * thermal_factor(s, m.omega, tau, beta))
            .sum()),
        BathKind::QuantumContinuum => {
            if p.alpha == 0.0 {
                return Ok(0.0);
            }
            let c = 0.5 * p.alpha * p.omega_c.powf(1.0 - p.nu);
            let nu = p.nu;
            quad::integrate(
                |w| c * w.powf(nu) * thermal_factor(s, w, tau, beta),
                0.0,
                p.omega_c,
                tol,
                0.0,
                quad::DEFAULT_MAX_INTERVALS,
            )
        }
    }
}

/// Classical-bath kernel `αω_c/(2β)` (the `β → 0` limit of `∫F/(ωβ)`,
/// generalized to `αω_c/(2νβ)` for non-Ohmic exponents).
pub fn classical_constant(p: &ModelParams, beta: f64) -> f64 {
    p.alpha * p.omega_c / (2.0 * p.nu * beta)
}

/// Combines `K̃₊` and `K̃₋` at one separation into `K_{s,s'}`.
#[inline]
pub fn combine_pair(s: i8, s_prime: i8, plus: f64, minus: f64, gamma: f64, branch: KernelBranch) -> f64 {
    let pick = |sign: i8| if sign > 0 { plus } else { minus };
    let mixed = gamma * gamma * pick(s) + (1.0 - gamma) * (1.0 - gamma) * pick(-s);
    let diagonal = gamma * (1.0 - gamma) * (plus + minus);
    match (s == s_prime, branch) {
        (false, KernelBranch::AsPrinted) => mixed,
        (true, KernelBranch::AsPrinted) => diagonal,
        (true, KernelBranch::Swapped) => mixed,
        (false, KernelBranch::Swapped) => diagonal,
    }
}

/// `K_{s,s'}(τ)` computed directly from the bath.
pub fn kernel_pair(
    s: i8,
    s_prime: i8,
    tau: f64,
    beta: f64,
    p: &ModelParams,
    branch: KernelBranch,
    tol: f64,
) -> Result<f64> {
    let plus = kernel_tilde(1, tau, beta, p, tol)?;
    let minus = kernel_tilde(-1, tau, beta, p, tol)?;
    Ok(combine_pair(s, s_prime, plus, minus, p.gamma, branch))
}

/// `K̃±` tabulated at every slice separation `d = 1..N-1`.
#[derive(Clone, Debug)]
pub struct KernelTable {
    pub beta: f64,
    pub slices: usize,
    /// Indexed by separation; entry 0 is unused and zero.
    pub values_plus: Vec<f64>,
    pub values_minus: Vec<f64>,
    pub classical_constant: Option<f64>,
    pub bath: &'static str,
    pub alpha: f64,
    pub nu: f64,
    pub omega_c: f64,
}

impl KernelTable {
    pub fn build(lat: &LatticeParams, p: &ModelParams, tol: f64) -> Result<Self> {
        lat.validate()?;
        p.validate()?;
        let n = lat.slices;
        let tau = lat.tau();
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        for d in 1..n {
            let t = tau * d as f64;
            let at = |s| {
                kernel_tilde(s, t, lat.beta, p, tol).map_err(|e| Error::KernelPoint {
                    tau: t,
                    source: Box::new(e),
                })
            };
            plus[d] = at(1)?;
            minus[d] = at(-1)?;
        }
        Ok(KernelTable {
            beta: lat.beta,
            slices: n,
            values_plus: plus,
            values_minus: minus,
            classical_constant: matches!(p.bath, BathKind::ClassicalLimit).then(|| classical_constant(p, lat.beta)),
            bath: p.bath.label(),
            alpha: p.alpha,
            nu: p.nu,
            omega_c: p.omega_c,
        })
    }

    #[inline]
    pub fn tilde(&self, s: i8, separation: usize) -> f64 {
        if s > 0 {
            self.values_plus[separation]
        } else {
            self.values_minus[separation]
        }
    }

    #[inline]
    pub fn pair(&self, s: i8, s_prime: i8, separation: usize, gamma: f64, branch: KernelBranch) -> f64 {
        combine_pair(
            s,
            s_prime,
            self.values_plus[separation],
            self.values_minus[separation],
            gamma,
            branch,
        )
    }

    /// Three columns `τ K̃₊ K̃₋`, one row per separation.
    pub fn write_dump<W: Write>(&self, mut out: W, config_hash: &str) -> std::io::Result<()> {
        writeln!(out, "# config_hash={config_hash} bath={} beta={} slices={}", self.bath, self.beta, self.slices)?;
        writeln!(out, "# tau,k_plus,k_minus")?;
        let tau = self.beta / self.slices as f64;
        for d in 1..self.slices {
            writeln!(
                out,
                "{:.12e},{:.12e},{:.12e}",
                tau * d as f64,
                self.values_plus[d],
                self.values_minus[d]
            )?;
        }
        Ok(())
    }
}

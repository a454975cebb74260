//! Physical parameters of the dissipative chain and its bath.
//!
//! Each site carries a transverse field `delta`, an Ising exchange
//! `j_coupling` to its neighbours, and a local oscillator bath described by
//! the power-law spectral density
//!
//! ```text
//! F(ω) = (α/2) ω_c^{1-ν} ω^ν Θ(ω_c - ω)
//! ```
//!
//! The bath couples through `λ_k {a_k [γ σ⁻ + (1-γ) σ⁺] + h.c.}`, so `gamma`
//! interpolates between purely rotating and purely counter-rotating terms.
//! Units have ħ = 1.

use crate::error::{Error, Result};
use crate::quad;
use std::io::{BufRead, Write};

/// Default relative tolerance for bath integrals.
pub const DEFAULT_TOL: f64 = 1e-9;

/// A single bath oscillator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode {
    pub omega: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BathKind {
    /// The continuum `F(ω)` with full quantum kernels.
    QuantumContinuum,
    /// The high-temperature limit where every kernel collapses to a constant.
    ClassicalLimit,
    /// An explicit finite set of oscillators.
    DiscreteModes(Vec<Mode>),
}

impl BathKind {
    pub fn label(&self) -> &'static str {
        match self {
            BathKind::QuantumContinuum => "quantum",
            BathKind::ClassicalLimit => "classical",
            BathKind::DiscreteModes(_) => "discrete",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub delta: f64,
    pub j_coupling: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub nu: f64,
    pub omega_c: f64,
    pub bath: BathKind,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            delta: 1.0,
            j_coupling: 0.0,
            alpha: 0.0,
            gamma: 0.5,
            nu: 1.0,
            omega_c: 10.0,
            bath: BathKind::QuantumContinuum,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.j_coupling >= 0.0 && self.j_coupling.is_finite()) {
            return bad(format!("J must be non-negative, got {}", self.j_coupling));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return bad(format!("nu must be positive, got {}", self.nu));
        }
        if !(self.omega_c > 0.0 && self.omega_c.is_finite()) {
            return bad(format!("omega_c must be positive, got {}", self.omega_c));
        }
        if let BathKind::DiscreteModes(modes) = &self.bath {
            for (k, m) in modes.iter().enumerate() {
                if !(m.omega > 0.0 && m.omega.is_finite()) {
                    return bad(format!("mode {k}: frequency must be positive, got {}", m.omega));
                }
                if !m.lambda.is_finite() {
                    return bad(format!("mode {k}: coupling must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn with_bath(mut self, bath: BathKind) -> Self {
        self.bath = bath;
        self
    }

    pub fn modes(&self) -> Option<&[Mode]> {
        match &self.bath {
            BathKind::DiscreteModes(m) => Some(m),
            _ => None,
        }
    }

    /// Prefactor `c` in `F(ω) = c ω^ν` below the cutoff.
    fn density_prefactor(&self) -> f64 {
        0.5 * self.alpha * self.omega_c.powf(1.0 - self.nu)
    }

    /// `∫_a^b F(ω) ω^p dω` in closed form, for `0 ≤ a ≤ b ≤ ω_c`.
    fn power_moment(&self, a: f64, b: f64, p: f64) -> f64 {
        let e = self.nu + p + 1.0;
        self.density_prefactor() * (b.powf(e) - a.powf(e)) / e
    }
}

/// Spatial boundary condition of the chain. Imaginary time is always periodic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    Periodic,
    Open,
}

/// Discretization of the (1+1)-dimensional lattice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeParams {
    pub length: usize,
    pub slices: usize,
    pub beta: f64,
    pub boundary: Boundary,
}

impl LatticeParams {
    pub fn new(length: usize, slices: usize, beta: f64) -> Result<Self> {
        let lat = LatticeParams {
            length,
            slices,
            beta,
            boundary: Boundary::Periodic,
        };
        lat.validate()?;
        Ok(lat)
    }

    /// Picks the slice count so that `β/N` does not exceed `tau`.
    pub fn with_slice_width(length: usize, beta: f64, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("slice width must be positive, got {tau}")));
        }
        let slices = ((beta / tau) - 1e-9).ceil().max(2.0) as usize;
        Self::new(length, slices, beta)
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 1 {
            return Err(Error::InvalidParameter("chain length must be at least 1".into()));
        }
        if self.slices < 2 {
            return Err(Error::InvalidParameter("need at least 2 Trotter slices".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// Slice width `τ = β/N`.
    pub fn tau(&self) -> f64 {
        self.beta / self.slices as f64
    }

    /// The time coupling is only ferromagnetic while `τΔ < 2`.
    pub fn check_trotter(&self, delta: f64) -> Result<()> {
        if self.tau() * delta >= 2.0 {
            return Err(Error::InvalidParameter(format!(
                "slice width {} too coarse for delta {delta}: need tau*delta < 2",
                self.tau()
            )));
        }
        Ok(())
    }

    pub fn sites(&self) -> usize {
        self.length * self.slices
    }
}

/// `F(ω)` for a continuum bath.
pub fn spectral_density(omega: f64, p: &ModelParams) -> Result<f64> {
    if p.modes().is_some() {
        return Err(Error::Unsupported("spectral density of a discrete bath; use its mode list"));
    }
    if !(omega >= 0.0) {
        return Err(Error::Domain(format!("frequency must be non-negative, got {omega}")));
    }
    if omega > p.omega_c {
        return Ok(0.0);
    }
    Ok(p.density_prefactor() * omega.powf(p.nu))
}

/// `∫₀^{ω_c} F(ω) g(ω) dω` for continuum baths, `Σ_k λ_k² g(ω_k)` for discrete ones.
pub fn spectral_moment<G: Fn(f64) -> f64>(g: G, p: &ModelParams, tol: f64) -> Result<f64> {
    match &p.bath {
        BathKind::DiscreteModes(modes) => Ok(modes.iter().map(|m| m.lambda * m.lambda * g(m.omega)).sum()),
        _ => {
            if p.alpha == 0.0 {
                return Ok(0.0);
            }
            let c = p.density_prefactor();
            let nu = p.nu;
            quad::integrate(
                |w| c * w.powf(nu) * g(w),
                0.0,
                p.omega_c,
                tol,
                0.0,
                quad::DEFAULT_MAX_INTERVALS,
            )
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BinLayout {
    Linear,
    /// Geometric bins below `ω_c/10`, uniform bins above.
    #[default]
    LogLinear,
}

fn bin_edges(omega_c: f64, count: usize, layout: BinLayout) -> Vec<f64> {
    match layout {
        BinLayout::Linear => (0..=count).map(|k| omega_c * k as f64 / count as f64).collect(),
        BinLayout::LogLinear => {
            if count == 1 {
                return vec![0.0, omega_c];
            }
            let n_log = (count / 4).max(1);
            let n_lin = count - n_log;
            let split = omega_c / 10.0;
            let mut edges = vec![0.0];
            for k in 1..=n_log {
                edges.push(split * 2f64.powi(k as i32 - n_log as i32));
            }
            for k in 1..=n_lin {
                edges.push(split + (omega_c - split) * k as f64 / n_lin as f64);
            }
            edges
        }
    }
}

/// Replaces a continuum bath by `mode_count` oscillators, one per frequency
/// bin, with `λ_k² = ∫_bin F` and `ω_k` the `F`-weighted bin centroid.
pub fn discretize_bath(p: &ModelParams, mode_count: usize, layout: BinLayout) -> Result<ModelParams> {
    if p.bath != BathKind::QuantumContinuum {
        return Err(Error::Unsupported("discretization requires a quantum continuum bath"));
    }
    if mode_count == 0 {
        return Err(Error::InvalidParameter("need at least one bath mode".into()));
    }
    p.validate()?;
    let edges = bin_edges(p.omega_c, mode_count, layout);
    let modes = edges
        .windows(2)
        .map(|w| {
            let weight = p.power_moment(w[0], w[1], 0.0);
            let omega = if weight > 0.0 {
                p.power_moment(w[0], w[1], 1.0) / weight
            } else {
                // α = 0: keep a sensible frequency for an uncoupled mode
                let e = p.nu + 1.0;
                (e / (e + 1.0)) * (w[1].powf(e + 1.0) - w[0].powf(e + 1.0)) / (w[1].powf(e) - w[0].powf(e))
            };
            Mode {
                omega,
                lambda: weight.sqrt(),
            }
        })
        .collect();
    Ok(p.clone().with_bath(BathKind::DiscreteModes(modes)))
}

/// Writes modes as two whitespace-separated columns `ω_k λ_k`.
pub fn write_modes<W: Write>(mut out: W, modes: &[Mode]) -> std::io::Result<()> {
    writeln!(out, "# omega lambda")?;
    for m in modes {
        writeln!(out, "{:.17e} {:.17e}", m.omega, m.lambda)?;
    }
    Ok(())
}

pub fn read_modes<R: BufRead>(input: R) -> Result<Vec<Mode>> {
    let mut modes = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let cols: Vec<&str> = body.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        if cols.len() != 2 {
            return Err(Error::InvalidParameter(format!("mode list line {}: expected 2 columns", n + 1)));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::InvalidParameter(format!("mode list line {}: {e}", n + 1)))
        };
        modes.push(Mode {
            omega: parse(cols[0])?,
            lambda: parse(cols[1])?,
        });
    }
    Ok(modes)
}

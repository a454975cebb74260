//! Variational mean-field treatment of a spin dressed by its bath.
//!
//! Internally the spin field is written as `-Δ/2 σ^x`, which is unitarily
//! equivalent to the `+Δ/2 σ^x` of [`crate::oracle`] through `σ^z ⊗ (-1)^N`.
//! Energies and `σ^z` are unaffected; every reported `m_x` is converted back
//! to the `+Δ/2` convention, so it is negative in the ground state.
//!
//! Coherent-state rules used throughout, for real displacements `u`, `v`:
//! `<u|v> = exp(-Σ(u-v)²/2)`, `<u|a†a|v> = u·v <u|v>`, `<u|a|v> = v <u|v>`.

use crate::error::{Error, Result};
use crate::model::{spectral_moment, Mode, ModelParams, DEFAULT_TOL};
use crate::optim::{nelder_mead, newton_polish};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Overlap eigenvalues below this are projected out.
pub const OVERLAP_CUTOFF: f64 = 1e-12;
/// Larger displacements only arise from denominators near zero and ruin the
/// conditioning of the Ritz problem.
pub const MAX_DISPLACEMENT: f64 = 50.0;
pub const SELF_CONSISTENCY_TOL: f64 = 1e-10;
pub const MEAN_FIELD_TOL: f64 = 1e-8;
pub const ITERATION_BUDGET: usize = 10_000;
pub const MEAN_FIELD_SEEDS: [f64; 4] = [0.9, -0.9, 0.01, -0.01];
const DAMPING: f64 = 0.5;
const AITKEN_AFTER: usize = 20;
const RESTARTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveSpinField {
    pub delta_eff: f64,
    pub c_eff: f64,
    pub h_eff: f64,
    pub f: f64,
    pub f1: f64,
    pub delta_tilde: f64,
    pub c: f64,
}

/// Transverse field and energy shift of the adiabatically displaced state,
/// `(Δ + 2fΣλ²/ω, f²Σλ²/ω)`.
pub fn adiabatic_effective(p: &ModelParams, f: f64) -> Result<(f64, f64)> {
    if !(-1.0..=1.0).contains(&f) {
        return Err(Error::Domain(format!("f = {f} outside [-1, 1]")));
    }
    let s = spectral_moment(|w| 1.0 / w, p, DEFAULT_TOL)?;
    Ok((p.delta + 2.0 * f * s, f * f * s))
}

/// Energy of the undressed product state, spin along its field and every
/// mode displaced by half its coupling.
pub fn adiabatic_energy(p: &ModelParams) -> Result<f64> {
    Ok(-0.5 * p.delta - 0.25 * spectral_moment(|w| 1.0 / w, p, DEFAULT_TOL)?)
}

pub fn polaron_effective(p: &ModelParams, f: f64) -> Result<EffectiveSpinField> {
    let (delta_tilde, c) = adiabatic_effective(p, f)?;
    if delta_tilde <= 0.0 {
        return Err(Error::Domain(format!("dressed gap {delta_tilde} is not positive at f = {f}")));
    }
    let f1 = p.gamma - 0.5;
    let first = spectral_moment(|w| 1.0 / (w + delta_tilde), p, DEFAULT_TOL)?;
    let second = spectral_moment(|w| 1.0 / (w + delta_tilde).powi(2), p, DEFAULT_TOL)?;
    let weighted = spectral_moment(|w| w / (w + delta_tilde).powi(2), p, DEFAULT_TOL)?;
    Ok(EffectiveSpinField {
        delta_eff: (delta_tilde + 4.0 * f1 * f1 * first) * (-2.0 * f1 * f1 * second).exp(),
        c_eff: c + f1 * f1 * weighted,
        h_eff: 2.0 * f * f1 * first,
        f,
        f1,
        delta_tilde,
        c,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolaronGround {
    pub energy: f64,
    pub m_x: f64,
    pub m_z: f64,
    pub effective: EffectiveSpinField,
    pub iterations: usize,
}

pub fn polaron_ground(p: &ModelParams) -> Result<PolaronGround> {
    polaron_ground_in_field(p, 0.0)
}

/// Self-consistent ground state of `C_eff - Δ_eff/2 σ^x + (h_eff + field) σ^z`,
/// with `f` tied to half the effective-spin `<σ^x>`.
pub fn polaron_ground_in_field(p: &ModelParams, field: f64) -> Result<PolaronGround> {
    p.validate()?;
    let mut f = 0.5;
    let mut residual = f64::INFINITY;
    for it in 1..=ITERATION_BUDGET {
        let eff = polaron_effective(p, f)?;
        let h = eff.h_eff + field;
        let r = (0.25 * eff.delta_eff * eff.delta_eff + h * h).sqrt();
        let sx = 0.5 * eff.delta_eff / r;
        let target = 0.5 * sx;
        residual = (target - f).abs();
        if residual < SELF_CONSISTENCY_TOL {
            let eff = polaron_effective(p, target)?;
            let h = eff.h_eff + field;
            let r = (0.25 * eff.delta_eff * eff.delta_eff + h * h).sqrt();
            let dressing = (-2.0 * eff.f1 * eff.f1 * spectral_moment(|w| 1.0 / (w + eff.delta_tilde).powi(2), p, DEFAULT_TOL)?).exp();
            return Ok(PolaronGround {
                energy: eff.c_eff - r,
                m_x: -(0.5 * eff.delta_eff / r) * dressing,
                m_z: -h / r,
                effective: eff,
                iterations: it,
            });
        }
        f += DAMPING * (target - f);
    }
    Err(Error::NoConvergence {
        what: "polaron self-consistency",
        iterations: ITERATION_BUDGET,
        residual,
    })
}

/// Displacement parameters of the `2M` coherent states: spin-up state `i`
/// carries `-(fλ/ω + f_i λ/(ω+Δ_i))` in every mode, spin-down state `i`
/// carries `-(fλ/ω - f_i λ/(ω+Δ_i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalBasis {
    pub m: usize,
    pub f: f64,
    pub f_list: Vec<f64>,
    pub delta_list: Vec<f64>,
}

impl VariationalBasis {
    pub fn parameter_count(&self) -> usize {
        2 * self.m + 1
    }

    pub fn to_params(&self) -> Vec<f64> {
        let mut x = vec![self.f];
        x.extend(&self.f_list);
        x.extend(&self.delta_list);
        x
    }

    pub fn from_params(x: &[f64]) -> Result<Self> {
        if x.len() < 3 || x.len() % 2 == 0 {
            return Err(Error::InvalidParameter(format!("{} variational parameters; need 2M+1", x.len())));
        }
        let m = (x.len() - 1) / 2;
        Ok(VariationalBasis {
            m,
            f: x[0],
            f_list: x[1..=m].to_vec(),
            delta_list: x[m + 1..].to_vec(),
        })
    }

    pub fn is_admissible(&self, modes: &[Mode]) -> bool {
        let floor = modes.iter().map(|m| m.omega).fold(f64::INFINITY, f64::min);
        self.delta_list.iter().all(|&d| d.is_finite() && d > -floor) && self.f.is_finite() && self.f_list.iter().all(|v| v.is_finite())
    }

    fn displacements(&self, modes: &[Mode]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let build = |sign: f64| {
            (0..self.m)
                .map(|i| {
                    modes
                        .iter()
                        .map(|md| {
                            let shared = self.f * md.lambda / md.omega;
                            let own = self.f_list[i] * md.lambda / (md.omega + self.delta_list[i]);
                            -(shared + sign * own)
                        })
                        .collect()
                })
                .collect()
        };
        (build(1.0), build(-1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalGround {
    pub energy: f64,
    pub m_x: f64,
    pub m_z: f64,
    pub basis: VariationalBasis,
}

fn overlap(u: &[f64], v: &[f64]) -> f64 {
    (-0.5 * u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).exp()
}

/// Lowest Rayleigh-Ritz state in the span of the basis, with an extra
/// `field·σ^z` on the spin.
pub fn evaluate_basis(p: &ModelParams, basis: &VariationalBasis, field: f64) -> Result<VariationalGround> {
    let modes = p
        .modes()
        .ok_or(Error::Unsupported("the variational solver needs a discrete bath"))?;
    if !basis.is_admissible(modes) {
        return Err(Error::Domain("displacement denominators must stay positive".into()));
    }
    let m = basis.m;
    let (up, down) = basis.displacements(modes);
    if up.iter().chain(&down).flatten().any(|z| !(z.abs() <= MAX_DISPLACEMENT)) {
        return Err(Error::Domain("displacement exceeds the conditioning limit".into()));
    }
    let states: Vec<(&Vec<f64>, f64)> = up.iter().map(|u| (u, 1.0)).chain(down.iter().map(|d| (d, -1.0))).collect();
    let n = 2 * m;
    let mut s = DMatrix::zeros(n, n);
    let mut h = DMatrix::zeros(n, n);
    let g = p.gamma;
    for i in 0..n {
        for j in 0..=i {
            let (u, si) = states[i];
            let (v, sj) = states[j];
            let o = overlap(u, v);
            let value = if si == sj {
                s[(i, j)] = o;
                s[(j, i)] = o;
                let bosons: f64 = modes.iter().zip(u.iter().zip(v)).map(|(md, (a, b))| md.omega * a * b).sum();
                o * (bosons + si * field)
            } else {
                // i is spin-down here since up states come first
                let (down_z, up_z) = (u, v);
                let coupling: f64 = modes
                    .iter()
                    .zip(up_z.iter().zip(down_z))
                    .map(|(md, (zu, zd))| md.lambda * ((1.0 - g) * zd + g * zu))
                    .sum();
                o * (-0.5 * p.delta + coupling)
            };
            h[(i, j)] = value;
            h[(j, i)] = value;
        }
    }
    let se = SymmetricEigen::new(s.clone());
    let keep: Vec<usize> = (0..n).filter(|&k| se.eigenvalues[k] > OVERLAP_CUTOFF).collect();
    if keep.is_empty() {
        return Err(Error::SingularOverlap);
    }
    let mut x = DMatrix::zeros(n, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        let scale = 1.0 / se.eigenvalues[k].sqrt();
        for r in 0..n {
            x[(r, c)] = se.eigenvectors[(r, k)] * scale;
        }
    }
    let reduced = x.transpose() * &h * &x;
    let he = SymmetricEigen::new(reduced);
    let (idx, &energy) = he
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty reduced problem");
    let c = &x * he.eigenvectors.column(idx);
    let mut m_z = 0.0;
    let mut sigma_x = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (u, si) = states[i];
            let (v, sj) = states[j];
            if si == sj {
                m_z += si * c[i] * c[j] * s[(i, j)];
            } else {
                sigma_x += c[i] * c[j] * overlap(u, v);
            }
        }
    }
    Ok(VariationalGround {
        energy,
        m_x: -sigma_x,
        m_z,
        basis: basis.clone(),
    })
}

fn objective(p: &ModelParams, field: f64) -> impl Fn(&[f64]) -> f64 + '_ {
    move |x: &[f64]| match VariationalBasis::from_params(x).and_then(|b| evaluate_basis(p, &b, field)) {
        Ok(g) => g.energy,
        Err(_) => f64::INFINITY,
    }
}

fn polaron_seed(p: &ModelParams, m: usize, field: f64) -> Vec<f64> {
    let (f, f1, dt) = match polaron_ground_in_field(p, field) {
        Ok(pg) => (pg.effective.f, pg.effective.f1, pg.effective.delta_tilde),
        Err(_) => (0.5, p.gamma - 0.5, p.delta),
    };
    let mut x = vec![f];
    for i in 0..m {
        x.push(f1 * (1.0 - 0.3 * i as f64));
    }
    for i in 0..m {
        x.push(dt * (1.0 + i as f64));
    }
    x
}

fn minimize_from(p: &ModelParams, field: f64, starts: Vec<Vec<f64>>) -> Result<VariationalGround> {
    let modes = p
        .modes()
        .ok_or(Error::Unsupported("the variational solver needs a discrete bath"))?;
    let floor = modes.iter().map(|m| m.omega).fold(f64::INFINITY, f64::min);
    let obj = objective(p, field);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in starts {
        let n = start.len();
        let m = (n - 1) / 2;
        let scale: Vec<f64> = (0..n)
            .map(|i| if i <= m { 0.1 } else { 0.25 * (start[i] + floor).abs().max(0.1) })
            .collect();
        let mut r = nelder_mead(&obj, &start, &scale, 1e-13, 4000);
        // one restart around the first result shakes off a collapsed simplex
        let small: Vec<f64> = scale.iter().map(|s| 0.1 * s).collect();
        let r2 = nelder_mead(&obj, &r.x, &small, 1e-15, 2000);
        if r2.value <= r.value {
            r = r2;
        }
        if best.as_ref().is_none_or(|(v, _)| r.value < *v) {
            best = Some((r.value, r.x));
        }
    }
    let (value, x) = best.ok_or(Error::InvalidParameter("no starting points".into()))?;
    if !value.is_finite() {
        return Err(Error::NoConvergence {
            what: "variational minimization",
            iterations: RESTARTS,
            residual: value,
        });
    }
    let polished = newton_polish(&obj, &x, 1e-5, 40);
    let x = if polished.value <= value { polished.x } else { x };
    evaluate_basis(p, &VariationalBasis::from_params(&x)?, field)
}

fn restarts(seed: &[f64], m: usize, count: usize, salt: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ salt);
    let mut out = vec![seed.to_vec()];
    let mut flipped = seed.to_vec();
    for v in &mut flipped[1..=m] {
        *v = -*v;
    }
    out.push(flipped);
    while out.len() < count {
        let mut x = seed.to_vec();
        x[0] *= 1.0 + 0.3 * rng.random_range(-1.0..1.0);
        for v in &mut x[1..=m] {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
        for v in &mut x[m + 1..] {
            *v *= 2f64.powf(rng.random_range(-1.5..1.5));
        }
        out.push(x);
    }
    out
}

/// Optimizes the `2M+1` displacement parameters of the multi-coherent-state
/// ansatz. `M = 1` starts from the polaron solution; larger `M` starts from
/// the optimum at `M - 1` with one more coherent pair appended.
pub fn variational_ground(p: &ModelParams, m: usize) -> Result<VariationalGround> {
    variational_ground_in_field(p, m, 0.0, None)
}

pub fn variational_ground_in_field(p: &ModelParams, m: usize, field: f64, warm: Option<&[f64]>) -> Result<VariationalGround> {
    p.validate()?;
    if m == 0 {
        return Err(Error::InvalidParameter("basis half-size M must be at least 1".into()));
    }
    if p.modes().is_none() {
        return Err(Error::Unsupported("the variational solver needs a discrete bath"));
    }
    let seed = if m == 1 {
        polaron_seed(p, 1, field)
    } else {
        let lower = variational_ground_in_field(p, m - 1, field, warm.filter(|w| w.len() == 2 * m - 1))?;
        let b = lower.basis;
        let mut x = vec![b.f];
        x.extend(&b.f_list);
        x.push(0.5 * b.f_list[0] - 0.1f64.copysign(b.f_list[0]));
        x.extend(&b.delta_list);
        x.push(2.0 * b.delta_list[0].abs().max(p.delta));
        x
    };
    let mut starts = restarts(&seed, m, RESTARTS, m as u64);
    if let Some(w) = warm.filter(|w| w.len() == 2 * m + 1) {
        starts.insert(0, w.to_vec());
    }
    minimize_from(p, field, starts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeanFieldSolver {
    Polaron,
    Variational(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldSolution {
    pub m_z: f64,
    pub m_x: f64,
    pub energy_per_site: f64,
    /// The seed magnetization this branch was reached from.
    pub branch: f64,
    pub iterations: usize,
    pub residual: f64,
}

struct SiteSolve {
    m_z: f64,
    m_x: f64,
    energy: f64,
    params: Option<Vec<f64>>,
}

fn solve_site(p: &ModelParams, solver: MeanFieldSolver, field: f64, warm: Option<&[f64]>) -> Result<SiteSolve> {
    match solver {
        MeanFieldSolver::Polaron => {
            let g = polaron_ground_in_field(p, field)?;
            Ok(SiteSolve {
                m_z: g.m_z,
                m_x: g.m_x,
                energy: g.energy,
                params: None,
            })
        }
        MeanFieldSolver::Variational(m) => {
            let g = variational_ground_in_field(p, m, field, warm)?;
            Ok(SiteSolve {
                m_z: g.m_z,
                m_x: g.m_x,
                energy: g.energy,
                params: Some(g.basis.to_params()),
            })
        }
    }
}

fn iterate_branch(p: &ModelParams, solver: MeanFieldSolver, seed: f64) -> Result<MeanFieldSolution> {
    let j = p.j_coupling;
    let mut m = seed;
    let mut warm: Option<Vec<f64>> = None;
    let mut history: Vec<f64> = Vec::new();
    let mut residual = f64::INFINITY;
    for it in 1..=ITERATION_BUDGET {
        let site = solve_site(p, solver, -0.5 * j * m, warm.as_deref())?;
        residual = (site.m_z - m).abs();
        if residual < 0.1 * MEAN_FIELD_TOL {
            return Ok(MeanFieldSolution {
                m_z: m,
                m_x: site.m_x,
                energy_per_site: site.energy + 0.25 * j * m * m,
                branch: seed,
                iterations: it,
                residual,
            });
        }
        warm = site.params;
        let mut next = m + DAMPING * (site.m_z - m);
        history.push(next);
        if it > AITKEN_AFTER && history.len() >= 3 {
            let k = history.len();
            let (x0, x1, x2) = (history[k - 3], history[k - 2], history[k - 1]);
            let denom = x2 - 2.0 * x1 + x0;
            if denom.abs() > 1e-14 {
                let acc = x2 - (x2 - x1).powi(2) / denom;
                if acc.is_finite() && acc.abs() <= 1.0 && (acc - x2).abs() < 0.1 {
                    next = acc;
                    history.clear();
                }
            }
        }
        m = next.clamp(-1.0, 1.0);
    }
    Err(Error::NoConvergence {
        what: "mean-field self-consistency",
        iterations: ITERATION_BUDGET,
        residual,
    })
}

/// All distinct self-consistent branches of the chain mean field, lowest
/// energy first.
pub fn chain_mean_field(p: &ModelParams, solver: MeanFieldSolver) -> Result<Vec<MeanFieldSolution>> {
    p.validate()?;
    let outcomes: Vec<Result<MeanFieldSolution>> = MEAN_FIELD_SEEDS.par_iter().map(|&s| iterate_branch(p, solver, s)).collect();
    let mut found: Vec<MeanFieldSolution> = Vec::new();
    let mut last_err = None;
    for o in outcomes {
        match o {
            Ok(sol) => {
                if !found.iter().any(|f| (f.m_z - sol.m_z).abs() < 1e-6) {
                    found.push(sol);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    if found.is_empty() {
        return Err(last_err.unwrap_or(Error::NoConvergence {
            what: "mean-field self-consistency",
            iterations: 0,
            residual: f64::INFINITY,
        }));
    }
    found.sort_by(|a, b| a.energy_per_site.total_cmp(&b.energy_per_site));
    Ok(found)
}

/// The minimal-energy branch.
pub fn mean_field_ground(p: &ModelParams, solver: MeanFieldSolver) -> Result<MeanFieldSolution> {
    Ok(chain_mean_field(p, solver)?.remove(0))
}

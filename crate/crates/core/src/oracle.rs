//! Exact diagonalization of one or two spins with discrete baths.
//!
//! The Hamiltonian
//!
//! ```text
//! H = (Δ/2) Σσ^x - (J/4) Σ_bonds σ^zσ^z + Σ ω_k a†a
//!   + Σ λ_k { a [γσ⁻ + (1-γ)σ⁺] + a† [γσ⁺ + (1-γ)σ⁻] }
//! ```
//!
//! is assembled in a truncated occupation basis: every mode holds at most
//! `boson_cutoff` quanta and, optionally, all modes together at most
//! `total_cutoff`. Spatial bonds follow the sampler: a periodic pair counts
//! its bond twice and a single periodic site couples to itself.

use crate::error::{Error, Result};
use crate::model::{Boundary, ModelParams};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use std::collections::HashMap;

/// Largest dimension diagonalized densely.
pub const DENSE_LIMIT: usize = 4000;
/// Largest dimension accepted at all.
pub const DIMENSION_BUDGET: usize = 200_000;
/// Residual tolerance of the iterative ground-state solver.
pub const LANCZOS_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedHilbertSpec {
    pub sites: usize,
    pub boundary: Boundary,
    pub boson_cutoff: usize,
    pub total_cutoff: Option<usize>,
}

impl TruncatedHilbertSpec {
    pub fn single_site(boson_cutoff: usize) -> Self {
        TruncatedHilbertSpec {
            sites: 1,
            boundary: Boundary::Periodic,
            boson_cutoff,
            total_cutoff: None,
        }
    }

    pub fn with_total_cutoff(mut self, total: usize) -> Self {
        self.total_cutoff = Some(total);
        self
    }

    pub fn with_sites(mut self, sites: usize) -> Self {
        self.sites = sites;
        self
    }

    fn bonds(&self) -> Vec<(usize, usize)> {
        match (self.boundary, self.sites) {
            (Boundary::Periodic, l) => (0..l).map(|i| (i, (i + 1) % l)).collect(),
            (Boundary::Open, l) => (0..l.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
        }
    }
}

/// Sparse symmetric Hamiltonian on the truncated basis. Rows are ordered as
/// `spin_pattern · boson_states + boson_index`; bit `i` of the spin pattern is
/// set when site `i` points down.
#[derive(Clone, Debug)]
pub struct Hamiltonian {
    pub dim: usize,
    sites: usize,
    boson_states: usize,
    diag: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    /// Off-diagonal part coming from the spin-bath coupling only.
    coupling_row_ptr: Vec<usize>,
    coupling_cols: Vec<u32>,
    coupling_vals: Vec<f64>,
    boson_number: Vec<u32>,
}

fn enumerate_bosons(modes: usize, per_mode: usize, total: usize) -> Vec<Vec<u8>> {
    fn rec(k: usize, left: usize, per_mode: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if k == cur.len() {
            out.push(cur.clone());
            return;
        }
        for n in 0..=per_mode.min(left) {
            cur[k] = n as u8;
            rec(k + 1, left - n, per_mode, cur, out);
        }
        cur[k] = 0;
    }
    let mut out = Vec::new();
    rec(0, total, per_mode, &mut vec![0; modes], &mut out);
    out
}

fn count_bosons(modes: usize, per_mode: usize, total: usize) -> usize {
    // number of occupation vectors with entries ≤ per_mode summing to ≤ total
    let mut ways = vec![0usize; total + 1];
    ways[0] = 1;
    for _ in 0..modes {
        let mut next = vec![0usize; total + 1];
        for (s, &w) in ways.iter().enumerate() {
            if w == 0 {
                continue;
            }
            for n in 0..=per_mode.min(total - s) {
                next[s + n] = next[s + n].saturating_add(w);
            }
        }
        ways = next;
    }
    ways.iter().fold(0usize, |a, &b| a.saturating_add(b))
}

impl TruncatedHilbertSpec {
    /// Basis size for `modes` oscillators per site.
    pub fn dimension(&self, modes: usize) -> usize {
        let m = self.sites * modes;
        let total = self.total_cutoff.unwrap_or(m * self.boson_cutoff).min(m * self.boson_cutoff);
        count_bosons(m, self.boson_cutoff, total).saturating_mul(1 << self.sites)
    }
}

/// Assembles `H` for a discrete bath.
pub fn build_hamiltonian(spec: &TruncatedHilbertSpec, p: &ModelParams) -> Result<Hamiltonian> {
    p.validate()?;
    let modes = p
        .modes()
        .ok_or(Error::Unsupported("exact diagonalization needs a discrete bath"))?;
    if !(1..=2).contains(&spec.sites) {
        return Err(Error::InvalidParameter(format!("{} sites; the oracle handles 1 or 2", spec.sites)));
    }
    if spec.boson_cutoff == 0 || spec.boson_cutoff > 255 {
        return Err(Error::InvalidParameter("boson cutoff must lie in 1..=255".into()));
    }
    let dim = spec.dimension(modes.len());
    if dim > DIMENSION_BUDGET {
        return Err(Error::DimensionBudget {
            dim,
            budget: DIMENSION_BUDGET,
        });
    }
    let l = spec.sites;
    let k = modes.len();
    let m = l * k;
    let total = spec.total_cutoff.unwrap_or(m * spec.boson_cutoff).min(m * spec.boson_cutoff);
    let bosons = enumerate_bosons(m, spec.boson_cutoff, total);
    let nb = bosons.len();
    let index: HashMap<&[u8], u32> = bosons.iter().enumerate().map(|(i, v)| (v.as_slice(), i as u32)).collect();
    let spin_patterns = 1usize << l;
    debug_assert_eq!(nb * spin_patterns, dim);

    let bonds = spec.bonds();
    let mut diag = vec![0.0; dim];
    let mut boson_number = vec![0u32; dim];
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); dim];
    let mut coupling: Vec<Vec<(u32, f64)>> = vec![Vec::new(); dim];
    let g = p.gamma;
    for sp in 0..spin_patterns {
        let sz = |i: usize| if sp >> i & 1 == 0 { 1.0 } else { -1.0 };
        let ising: f64 = bonds.iter().map(|&(a, b)| -0.25 * p.j_coupling * sz(a) * sz(b)).sum();
        for (bi, occ) in bosons.iter().enumerate() {
            let r = sp * nb + bi;
            let mut e = ising;
            for (q, &n) in occ.iter().enumerate() {
                e += modes[q % k].omega * n as f64;
            }
            diag[r] = e;
            boson_number[r] = occ.iter().map(|&n| n as u32).sum();
            for i in 0..l {
                let c = (sp ^ (1 << i)) * nb + bi;
                rows[r].push((c as u32, 0.5 * p.delta));
            }
            // a_q lowers the occupation; the adjoint entries are mirrored below
            let mut lowered = occ.clone();
            for q in 0..m {
                let n = occ[q] as usize;
                if n == 0 {
                    continue;
                }
                let site = q / k;
                let lambda = modes[q % k].lambda;
                let up = sp >> site & 1 == 0;
                // a σ⁻ takes up → down with γ; a σ⁺ takes down → up with 1-γ
                let amp = lambda * (n as f64).sqrt() * if up { g } else { 1.0 - g };
                lowered[q] -= 1;
                let target = (sp ^ (1 << site)) * nb + index[lowered.as_slice()] as usize;
                lowered[q] += 1;
                if amp != 0.0 {
                    for (a, b) in [(r, target), (target, r)] {
                        rows[a].push((b as u32, amp));
                        coupling[a].push((b as u32, amp));
                    }
                }
            }
        }
    }
    let pack = |rows: Vec<Vec<(u32, f64)>>| {
        let mut ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        ptr.push(0);
        for mut row in rows {
            row.sort_unstable_by_key(|e| e.0);
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            ptr.push(cols.len());
        }
        (ptr, cols, vals)
    };
    let (row_ptr, cols, vals) = pack(rows);
    let (coupling_row_ptr, coupling_cols, coupling_vals) = pack(coupling);
    Ok(Hamiltonian {
        dim,
        sites: l,
        boson_states: nb,
        diag,
        row_ptr,
        cols,
        vals,
        coupling_row_ptr,
        coupling_cols,
        coupling_vals,
        boson_number,
    })
}

impl Hamiltonian {
    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.dim {
            let mut acc = self.diag[r] * x[r];
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[e] * x[self.cols[e] as usize];
            }
            y[r] = acc;
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            h[(r, r)] = self.diag[r];
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                h[(r, self.cols[e] as usize)] += self.vals[e];
            }
        }
        h
    }

    /// `σ^z` of `site` on basis row `r`.
    #[inline]
    pub fn sigma_z(&self, site: usize, r: usize) -> f64 {
        if (r / self.boson_states) >> site & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    fn flip_row(&self, site: usize, r: usize) -> usize {
        let sp = r / self.boson_states;
        let bi = r % self.boson_states;
        (sp ^ (1 << site)) * self.boson_states + bi
    }

    /// `<x|σ^x_i|y>` summed over the basis.
    pub fn sigma_x_between(&self, site: usize, x: &[f64], y: &[f64]) -> f64 {
        (0..self.dim).map(|r| x[r] * y[self.flip_row(site, r)]).sum()
    }

    pub fn coupling_between(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for r in 0..self.dim {
            for e in self.coupling_row_ptr[r]..self.coupling_row_ptr[r + 1] {
                acc += x[r] * self.coupling_vals[e] * y[self.coupling_cols[e] as usize];
            }
        }
        acc
    }

    pub fn boson_number(&self, r: usize) -> f64 {
        self.boson_number[r] as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lowest_ritz(alphas: &[f64], betas: &[f64]) -> (f64, DVector<f64>) {
    let k = alphas.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let (idx, &theta) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty tridiagonal");
    (theta, eig.eigenvectors.column(idx).into_owned())
}

/// Lowest eigenpair by restarted Lanczos. Each cycle runs the recurrence
/// twice (once for the Ritz pair, once to assemble the vector) so that only
/// three vectors are stored.
pub fn lanczos_ground(h: &Hamiltonian, start: &[f64], tol: f64, max_cycles: usize) -> Result<(f64, Vec<f64>)> {
    let n = h.dim;
    let max_iter = n.min(250);
    let mut x: Vec<f64> = start.to_vec();
    let mut last_residual = f64::INFINITY;
    for _ in 0..max_cycles {
        let norm = dot(&x, &x).sqrt();
        x.iter_mut().for_each(|v| *v /= norm);
        let run = |collect: Option<&DVector<f64>>, out: &mut Vec<f64>| -> (Vec<f64>, Vec<f64>) {
            let mut alphas = Vec::new();
            let mut betas = Vec::new();
            let mut v_prev = vec![0.0; n];
            let mut v = x.clone();
            let mut w = vec![0.0; n];
            let mut beta_prev = 0.0;
            for it in 0..max_iter {
                if let Some(y) = collect {
                    if it >= y.len() {
                        break;
                    }
                    for (o, vi) in out.iter_mut().zip(&v) {
                        *o += y[it] * vi;
                    }
                }
                h.apply(&v, &mut w);
                let a = dot(&w, &v);
                for r in 0..n {
                    w[r] -= a * v[r] + beta_prev * v_prev[r];
                }
                let b = dot(&w, &w).sqrt();
                alphas.push(a);
                if collect.is_none() && (it % 10 == 9 || b < 1e-14) {
                    let (_, y) = lowest_ritz(&alphas, &betas);
                    if (b * y[it]).abs() < 0.1 * tol || b < 1e-14 {
                        break;
                    }
                }
                if b < 1e-14 {
                    break;
                }
                betas.push(b);
                std::mem::swap(&mut v_prev, &mut v);
                for r in 0..n {
                    v[r] = w[r] / b;
                }
                beta_prev = b;
            }
            (alphas, betas)
        };
        let mut scratch = Vec::new();
        let (alphas, betas) = run(None, &mut scratch);
        let (theta, y) = lowest_ritz(&alphas, &betas[..alphas.len() - 1]);
        let mut vec = vec![0.0; n];
        run(Some(&y), &mut vec);
        let norm = dot(&vec, &vec).sqrt();
        vec.iter_mut().for_each(|v| *v /= norm);
        let mut hv = vec![0.0; n];
        h.apply(&vec, &mut hv);
        let energy = dot(&vec, &hv);
        let residual = hv.iter().zip(&vec).map(|(a, b)| (a - energy * b).powi(2)).sum::<f64>().sqrt();
        last_residual = residual;
        if residual < tol {
            return Ok((energy, vec));
        }
        let _ = theta;
        x = vec;
    }
    Err(Error::NoConvergence {
        what: "Lanczos ground state",
        iterations: max_cycles,
        residual: last_residual,
    })
}

#[derive(Clone, Debug)]
pub struct GroundState {
    pub energy: f64,
    pub sigma_z: Vec<f64>,
    /// For the `+Δ/2 σ^x` field, so negative in the ground state.
    pub sigma_x: Vec<f64>,
    pub coupling_energy: f64,
    pub boson_number: f64,
    pub vector: Vec<f64>,
}

fn ground_from_vector(h: &Hamiltonian, energy: f64, v: Vec<f64>) -> GroundState {
    let l = h.sites;
    let sigma_z = (0..l)
        .map(|i| (0..h.dim).map(|r| h.sigma_z(i, r) * v[r] * v[r]).sum())
        .collect();
    let sigma_x = (0..l).map(|i| h.sigma_x_between(i, &v, &v)).collect();
    GroundState {
        energy,
        sigma_z,
        sigma_x,
        coupling_energy: h.coupling_between(&v, &v),
        boson_number: (0..h.dim).map(|r| h.boson_number(r) * v[r] * v[r]).sum(),
        vector: v,
    }
}

pub fn ground_observables(spec: &TruncatedHilbertSpec, p: &ModelParams) -> Result<GroundState> {
    let h = build_hamiltonian(spec, p)?;
    if h.dim <= DENSE_LIMIT {
        let eig = SymmetricEigen::new(h.dense());
        let (idx, &e) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty spectrum");
        let v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        Ok(ground_from_vector(&h, e, v))
    } else {
        // start from the boson vacuum in the transverse-field ground state,
        // with a small tilt so no symmetry sector is missed
        let mut start = vec![0.0; h.dim];
        for r in 0..h.dim {
            let vacuum = h.boson_number[r] == 0;
            start[r] = if vacuum { 1.0 } else { 1e-3 * (((r * 2654435761) % 1000) as f64 / 1000.0 - 0.5) };
            let parity: usize = (0..h.sites).map(|i| (r / h.boson_states) >> i & 1).sum();
            if vacuum && parity % 2 == 1 {
                start[r] = -1.0;
            }
        }
        let (e, v) = lanczos_ground(&h, &start, LANCZOS_TOL, 60)?;
        Ok(ground_from_vector(&h, e, v))
    }
}

/// Full spectrum of a dense-sized Hamiltonian.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub hamiltonian: Hamiltonian,
    pub energies: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThermalObservables {
    pub beta: f64,
    pub energy: f64,
    pub sigma_z: Vec<f64>,
    pub sigma_x: Vec<f64>,
    /// `<H_SB>` summed over sites.
    pub coupling_energy: f64,
    pub boson_number: f64,
}

pub fn spectrum(spec: &TruncatedHilbertSpec, p: &ModelParams) -> Result<Spectrum> {
    let h = build_hamiltonian(spec, p)?;
    if h.dim > DENSE_LIMIT {
        return Err(Error::DimensionBudget {
            dim: h.dim,
            budget: DENSE_LIMIT,
        });
    }
    let eig = SymmetricEigen::new(h.dense());
    Ok(Spectrum {
        hamiltonian: h,
        energies: eig.eigenvalues,
        vectors: eig.eigenvectors,
    })
}

impl Spectrum {
    fn boltzmann(&self, beta: f64) -> (Vec<f64>, f64) {
        let e0 = self.energies.min();
        let w: Vec<f64> = self.energies.iter().map(|e| (-beta * (e - e0)).exp()).collect();
        let z = w.iter().sum();
        (w, z)
    }

    pub fn thermal(&self, beta: f64) -> ThermalObservables {
        let h = &self.hamiltonian;
        let (w, z) = self.boltzmann(beta);
        let l = h.sites;
        let mut sigma_z = vec![0.0; l];
        let mut sigma_x = vec![0.0; l];
        let mut coupling = 0.0;
        let mut bosons = 0.0;
        let mut energy = 0.0;
        for (n, &wn) in w.iter().enumerate() {
            if wn < 1e-300 {
                continue;
            }
            let v: Vec<f64> = self.vectors.column(n).iter().copied().collect();
            let pn = wn / z;
            energy += pn * self.energies[n];
            for i in 0..l {
                sigma_z[i] += pn * (0..h.dim).map(|r| h.sigma_z(i, r) * v[r] * v[r]).sum::<f64>();
                sigma_x[i] += pn * h.sigma_x_between(i, &v, &v);
            }
            coupling += pn * h.coupling_between(&v, &v);
            bosons += pn * (0..h.dim).map(|r| h.boson_number(r) * v[r] * v[r]).sum::<f64>();
        }
        ThermalObservables {
            beta,
            energy,
            sigma_z,
            sigma_x,
            coupling_energy: coupling,
            boson_number: bosons,
        }
    }

    /// `<m>` and `<m²>` of the slice-averaged magnetization
    /// `m = (1/(L·N)) Σ_{i,j} S_{i,j}` on `N` equally spaced imaginary times.
    pub fn discrete_magnetization_moments(&self, beta: f64, slices: usize) -> (f64, f64) {
        let h = &self.hamiltonian;
        let l = h.sites as f64;
        let (w, z) = self.boltzmann(beta);
        let e0 = self.energies.min();
        let mz: Vec<f64> = (0..h.dim)
            .map(|r| (0..h.sites).map(|i| h.sigma_z(i, r)).sum::<f64>() / l)
            .collect();
        let v = &self.vectors;
        let dim = h.dim;
        // M_mn = <m|σ^z_avg|n>
        let mut scaled = v.clone();
        for r in 0..dim {
            for c in 0..dim {
                scaled[(r, c)] *= mz[r];
            }
        }
        let m = v.transpose() * scaled;
        let first: f64 = (0..dim).map(|n| w[n] * m[(n, n)]).sum::<f64>() / z;
        let tau = beta / slices as f64;
        let mut second = 0.0;
        for d in 0..slices {
            let t = tau * d as f64;
            let mut c = 0.0;
            for a in 0..dim {
                let ea = (-(beta - t) * (self.energies[a] - e0)).exp();
                if ea < 1e-300 && t < beta {
                    continue;
                }
                for b in 0..dim {
                    let eb = (-t * (self.energies[b] - e0)).exp();
                    c += ea * eb * m[(a, b)] * m[(a, b)];
                }
            }
            second += c / z;
        }
        (first, second / slices as f64)
    }
}

pub fn thermal_observables(spec: &TruncatedHilbertSpec, p: &ModelParams, beta: f64) -> Result<ThermalObservables> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter(format!("beta = {beta} must be positive")));
    }
    Ok(spectrum(spec, p)?.thermal(beta))
}

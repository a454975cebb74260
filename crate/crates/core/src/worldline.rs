//! The (1+1)-dimensional classical configuration and its weight.
//!
//! A configuration is a spin field `S_{i,j} = ±1` on `L` sites and `N`
//! periodic Trotter slices, plus a set of boson lines. A line on site `i`
//! joins two time bonds `a < b`; bond `j` sits between slices `j` and
//! `j+1 (mod N)` and must be a kink (`S_{i,j} = -S_{i,j+1}`) while it hosts a
//! line. Each bond hosts at most one line. The log-weight is
//!
//! ```text
//! ln W = Σ_{i,j} (J_τ S_{i,j}S_{i,j+1} + J̃ S_{i,j}S_{i+1,j})
//!      + Σ_lines ln[(4/Δ²) K_{S_{i,a}, S_{i,b}}((β/N)(b-a))]
//! ```
//!
//! and is `-∞` whenever a constraint is broken.

use crate::error::{Error, Result};
use crate::kernel::{KernelBranch, KernelTable};
use crate::model::{Boundary, LatticeParams, ModelParams};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fmt::Write as _;
use std::io::{Read, Write};

const NO_LINE: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpinWorldline {
    length: usize,
    slices: usize,
    boundary: Boundary,
    spins: Vec<i8>,
}

impl SpinWorldline {
    pub fn all_up(length: usize, slices: usize, boundary: Boundary) -> Self {
        SpinWorldline {
            length,
            slices,
            boundary,
            spins: vec![1; length * slices],
        }
    }

    /// Site-major spins, `spins[i * N + j]`.
    pub fn from_spins(length: usize, slices: usize, boundary: Boundary, spins: Vec<i8>) -> Self {
        assert_eq!(spins.len(), length * slices, "spin array has wrong size");
        SpinWorldline {
            length,
            slices,
            boundary,
            spins,
        }
    }

    #[inline]
    pub fn length(&self) -> usize {
        self.length
    }
    #[inline]
    pub fn slices(&self) -> usize {
        self.slices
    }
    #[inline]
    pub fn boundary(&self) -> Boundary {
        self.boundary
    }
    #[inline]
    pub fn get(&self, site: usize, slice: usize) -> i8 {
        self.spins[site * self.slices + slice]
    }
    #[inline]
    pub fn set(&mut self, site: usize, slice: usize, value: i8) {
        self.spins[site * self.slices + slice] = value;
    }
    #[inline]
    pub fn flip(&mut self, site: usize, slice: usize) {
        self.spins[site * self.slices + slice] *= -1;
    }
    pub fn raw(&self) -> &[i8] {
        &self.spins
    }
    pub fn site(&self, site: usize) -> &[i8] {
        &self.spins[site * self.slices..(site + 1) * self.slices]
    }
    pub fn sum(&self) -> i64 {
        self.spins.iter().map(|&s| s as i64).sum()
    }
    pub fn flip_all(&mut self) {
        self.spins.iter_mut().for_each(|s| *s = -*s);
    }

    /// Is bond `j` (between slices `j` and `j+1`) a kink?
    #[inline]
    pub fn is_kink(&self, site: usize, bond: usize) -> bool {
        let next = if bond + 1 == self.slices { 0 } else { bond + 1 };
        self.get(site, bond) != self.get(site, next)
    }
}

/// Per-site boson lines with O(1) occupancy lookups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BosonLineSet {
    length: usize,
    slices: usize,
    per_site: Vec<Vec<(u32, u32)>>,
    occupancy: Vec<u8>,
    partner: Vec<u32>,
    slot: Vec<u32>,
}

impl BosonLineSet {
    pub fn new(length: usize, slices: usize) -> Self {
        BosonLineSet {
            length,
            slices,
            per_site: vec![Vec::new(); length],
            occupancy: vec![0; length * slices],
            partner: vec![NO_LINE; length * slices],
            slot: vec![NO_LINE; length * slices],
        }
    }

    /// Builds a set from raw `(site, j, j')` triples without enforcing any
    /// invariant, so that `validate` can report what is wrong.
    pub fn from_lines(length: usize, slices: usize, lines: &[(usize, usize, usize)]) -> Self {
        let mut set = BosonLineSet::new(length, slices);
        for &(site, j, jp) in lines {
            let (a, b) = (j.min(jp), j.max(jp));
            let list = &mut set.per_site[site];
            for bond in [a, b] {
                let k = site * slices + bond;
                set.occupancy[k] = set.occupancy[k].saturating_add(1);
                set.slot[k] = list.len() as u32;
            }
            set.partner[site * slices + a] = b as u32;
            set.partner[site * slices + b] = a as u32;
            list.push((a as u32, b as u32));
        }
        set
    }

    #[inline]
    pub fn occupancy(&self, site: usize, bond: usize) -> u8 {
        self.occupancy[site * self.slices + bond]
    }

    #[inline]
    pub fn is_occupied(&self, site: usize, bond: usize) -> bool {
        self.occupancy[site * self.slices + bond] != 0
    }

    /// The other endpoint of the line on this bond, if any.
    #[inline]
    pub fn partner(&self, site: usize, bond: usize) -> Option<usize> {
        let p = self.partner[site * self.slices + bond];
        (p != NO_LINE && self.occupancy[site * self.slices + bond] != 0).then_some(p as usize)
    }

    pub fn lines_at(&self, site: usize) -> &[(u32, u32)] {
        &self.per_site[site]
    }

    pub fn count_at(&self, site: usize) -> usize {
        self.per_site[site].len()
    }

    pub fn total(&self) -> usize {
        self.per_site.iter().map(Vec::len).sum()
    }

    /// All lines as `(site, a, b)` with `a < b`, sorted.
    pub fn sorted_lines(&self) -> Vec<(usize, usize, usize)> {
        let mut all: Vec<_> = self
            .per_site
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&(a, b)| (i, a as usize, b as usize)))
            .collect();
        all.sort_unstable();
        all
    }

    /// Adds the line `{a, b}` at `site`. Both bonds must be free and distinct.
    pub fn insert(&mut self, site: usize, a: usize, b: usize) {
        let (a, b) = (a.min(b), a.max(b));
        debug_assert!(a != b && !self.is_occupied(site, a) && !self.is_occupied(site, b));
        let n = self.slices;
        let list = &mut self.per_site[site];
        let slot = list.len() as u32;
        list.push((a as u32, b as u32));
        for (x, y) in [(a, b), (b, a)] {
            self.occupancy[site * n + x] = 1;
            self.partner[site * n + x] = y as u32;
            self.slot[site * n + x] = slot;
        }
    }

    /// Removes the `index`-th line at `site` and returns its endpoints.
    pub fn remove_at(&mut self, site: usize, index: usize) -> (usize, usize) {
        let n = self.slices;
        let list = &mut self.per_site[site];
        let (a, b) = list.swap_remove(index);
        if let Some(&(ma, mb)) = list.get(index) {
            self.slot[site * n + ma as usize] = index as u32;
            self.slot[site * n + mb as usize] = index as u32;
        }
        for x in [a, b] {
            let k = site * n + x as usize;
            self.occupancy[k] = 0;
            self.partner[k] = NO_LINE;
            self.slot[k] = NO_LINE;
        }
        (a as usize, b as usize)
    }

    pub fn length(&self) -> usize {
        self.length
    }
    pub fn slices(&self) -> usize {
        self.slices
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Configuration {
    pub spins: SpinWorldline,
    pub lines: BosonLineSet,
}

impl Configuration {
    pub fn all_up(lat: &LatticeParams) -> Self {
        Configuration {
            spins: SpinWorldline::all_up(lat.length, lat.slices, lat.boundary),
            lines: BosonLineSet::new(lat.length, lat.slices),
        }
    }

    /// `S → -S` with lines kept in place.
    pub fn flipped(&self) -> Self {
        let mut c = self.clone();
        c.spins.flip_all();
        c
    }
}

/// Couplings of the classical nearest-neighbour action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionCouplings {
    /// `J_τ = -½ ln(τΔ/2)`
    pub j_tau: f64,
    /// `J̃ = τJ/4`
    pub j_space: f64,
    /// `4/Δ²`
    pub line_prefactor: f64,
}

impl ActionCouplings {
    pub fn new(lat: &LatticeParams, p: &ModelParams) -> Result<Self> {
        lat.check_trotter(p.delta)?;
        let tau = lat.tau();
        Ok(ActionCouplings {
            j_tau: -0.5 * (tau * p.delta / 2.0).ln(),
            j_space: tau * p.j_coupling / 4.0,
            line_prefactor: 4.0 / (p.delta * p.delta),
        })
    }
}

/// Index of `(s, s')` into a four-entry table.
#[inline]
pub fn pair_index(s: i8, s_prime: i8) -> usize {
    (((s > 0) as usize) << 1) | (s_prime > 0) as usize
}

/// Everything needed to evaluate `ln W`: the couplings, the spatial
/// neighbour structure and `ln[(4/Δ²)K_{s,s'}(d)]` for every separation.
#[derive(Clone, Debug)]
pub struct Action {
    pub couplings: ActionCouplings,
    pub gamma: f64,
    pub branch: KernelBranch,
    length: usize,
    slices: usize,
    boundary: Boundary,
    /// `neighbours[i]` lists `(site, bond multiplicity)`.
    neighbours: Vec<Vec<(usize, f64)>>,
    /// `ln_line[d][pair_index(s, s')]`
    ln_line: Vec<[f64; 4]>,
}

impl Action {
    pub fn new(lat: &LatticeParams, table: &KernelTable, couplings: ActionCouplings, gamma: f64, branch: KernelBranch) -> Self {
        assert_eq!(table.slices, lat.slices, "kernel table built for another slice count");
        let l = lat.length;
        let neighbours = (0..l)
            .map(|i| match (lat.boundary, l) {
                (_, 1) => vec![],
                (Boundary::Periodic, 2) => vec![(1 - i, 2.0)],
                (Boundary::Open, 2) => vec![(1 - i, 1.0)],
                (Boundary::Periodic, _) => vec![((i + l - 1) % l, 1.0), ((i + 1) % l, 1.0)],
                (Boundary::Open, _) => {
                    let mut v = Vec::with_capacity(2);
                    if i > 0 {
                        v.push((i - 1, 1.0));
                    }
                    if i + 1 < l {
                        v.push((i + 1, 1.0));
                    }
                    v
                }
            })
            .collect();
        let mut ln_line = vec![[f64::NEG_INFINITY; 4]; lat.slices];
        for (d, entry) in ln_line.iter_mut().enumerate().skip(1) {
            for s in [-1i8, 1] {
                for sp in [-1i8, 1] {
                    entry[pair_index(s, sp)] = (couplings.line_prefactor * table.pair(s, sp, d, gamma, branch)).ln();
                }
            }
        }
        Action {
            couplings,
            gamma,
            branch,
            length: l,
            slices: lat.slices,
            boundary: lat.boundary,
            neighbours,
            ln_line,
        }
    }

    pub fn from_params(lat: &LatticeParams, p: &ModelParams, table: &KernelTable, branch: KernelBranch) -> Result<Self> {
        Ok(Self::new(lat, table, ActionCouplings::new(lat, p)?, p.gamma, branch))
    }

    #[inline]
    pub fn ln_line(&self, separation: usize, s: i8, s_prime: i8) -> f64 {
        self.ln_line[separation][pair_index(s, s_prime)]
    }

    #[inline]
    pub fn ln_line_row(&self, separation: usize) -> &[f64; 4] {
        &self.ln_line[separation]
    }

    #[inline]
    pub fn neighbours(&self, site: usize) -> &[(usize, f64)] {
        &self.neighbours[site]
    }

    pub fn length(&self) -> usize {
        self.length
    }
    pub fn slices(&self) -> usize {
        self.slices
    }
    pub fn boundary(&self) -> Boundary {
        self.boundary
    }
}

/// Full `ln W`, term by term. `-∞` for forbidden configurations.
pub fn log_weight(cfg: &Configuration, act: &Action) -> f64 {
    let sw = &cfg.spins;
    let (l, n) = (sw.length(), sw.slices());
    let c = act.couplings;
    let mut time_sum = 0i64;
    let mut space_sum = 0i64;
    for i in 0..l {
        for j in 0..n {
            let s = sw.get(i, j) as i64;
            time_sum += s * sw.get(i, (j + 1) % n) as i64;
            let right = match sw.boundary() {
                Boundary::Periodic => Some((i + 1) % l),
                Boundary::Open => (i + 1 < l).then_some(i + 1),
            };
            if let Some(r) = right {
                space_sum += s * sw.get(r, j) as i64;
            }
        }
    }
    let mut lw = c.j_tau * time_sum as f64 + c.j_space * space_sum as f64;
    for i in 0..l {
        for j in 0..n {
            match cfg.lines.occupancy(i, j) {
                0 => {}
                1 if sw.is_kink(i, j) => {}
                _ => return f64::NEG_INFINITY,
            }
        }
        for &(a, b) in cfg.lines.lines_at(i) {
            let (a, b) = (a as usize, b as usize);
            if a == b {
                return f64::NEG_INFINITY;
            }
            lw += act.ln_line(b - a, sw.get(i, a), sw.get(i, b));
        }
    }
    lw
}

#[inline]
fn in_arc(x: usize, start: usize, len: usize, n: usize) -> bool {
    (x + n - start) % n < len
}

/// `ln W(flipped) - ln W(current)` for negating the `len` spins of `site`
/// starting at slice `start` (wrapping in time). `len == N` flips the whole
/// worldline.
pub fn delta_log_weight_spin_segment(cfg: &Configuration, act: &Action, site: usize, start: usize, len: usize) -> f64 {
    let sw = &cfg.spins;
    let lines = &cfg.lines;
    let n = sw.slices();
    debug_assert!(len >= 1 && len <= n && start < n);
    let c = act.couplings;
    let mut delta = 0.0;

    if len < n {
        let left_bond = (start + n - 1) % n;
        let end = (start + len - 1) % n;
        let after = if end + 1 == n { 0 } else { end + 1 };
        let s_prev = sw.get(site, left_bond);
        let s_first = sw.get(site, start);
        let s_last = sw.get(site, end);
        let s_next = sw.get(site, after);
        // an occupied bond must stay a kink, and flipping one side never keeps it one
        if lines.is_occupied(site, left_bond) || lines.is_occupied(site, end) {
            return f64::NEG_INFINITY;
        }
        delta -= 2.0 * c.j_tau * (s_prev as f64 * s_first as f64 + s_last as f64 * s_next as f64);
    }

    let nbrs = act.neighbours(site);
    if !nbrs.is_empty() && c.j_space != 0.0 {
        let mut acc = 0.0;
        for k in 0..len {
            let j = if start + k >= n { start + k - n } else { start + k };
            let mut field = 0.0;
            for &(nb, mult) in nbrs {
                field += mult * sw.get(nb, j) as f64;
            }
            acc += sw.get(site, j) as f64 * field;
        }
        delta -= 2.0 * c.j_space * acc;
    }

    let line_list = lines.lines_at(site);
    if !line_list.is_empty() {
        let mut rescore = |a: usize, b: usize, fa: bool, fb: bool| {
            let sa = sw.get(site, a);
            let sb = sw.get(site, b);
            let na = if fa { -sa } else { sa };
            let nb = if fb { -sb } else { sb };
            let row = act.ln_line_row(b - a);
            delta += row[pair_index(na, nb)] - row[pair_index(sa, sb)];
        };
        if len == n {
            for &(a, b) in line_list {
                rescore(a as usize, b as usize, true, true);
            }
        } else if line_list.len() * 2 < len {
            for &(a, b) in line_list {
                let (a, b) = (a as usize, b as usize);
                let fa = in_arc(a, start, len, n);
                let fb = in_arc(b, start, len, n);
                if fa || fb {
                    rescore(a, b, fa, fb);
                }
            }
        } else {
            for k in 0..len {
                let j = (start + k) % n;
                if let Some(p) = lines.partner(site, j) {
                    let p_in = in_arc(p, start, len, n);
                    if p_in && p < j {
                        continue;
                    }
                    let (a, b) = (j.min(p), j.max(p));
                    rescore(a, b, in_arc(a, start, len, n), in_arc(b, start, len, n));
                }
            }
        }
    }
    delta
}

/// Negates the spins of an arc; counterpart of `delta_log_weight_spin_segment`.
pub fn flip_segment(cfg: &mut Configuration, site: usize, start: usize, len: usize) {
    let n = cfg.spins.slices();
    for k in 0..len {
        cfg.spins.flip(site, (start + k) % n);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    SpinValue,
    Occupancy,
    /// An occupied bond that is not a kink.
    KinkConstraint,
    ZeroSeparation,
    OutOfRange,
    /// Occupancy bookkeeping disagrees with the line list.
    Bookkeeping,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    pub site: usize,
    pub slice: usize,
    pub kind: ViolationKind,
}

/// Lists every broken invariant; empty iff the configuration is allowed.
pub fn validate(cfg: &Configuration) -> Vec<Violation> {
    let sw = &cfg.spins;
    let bl = &cfg.lines;
    let (l, n) = (sw.length(), sw.slices());
    let mut out = Vec::new();
    let mut push = |site, slice, kind| out.push(Violation { site, slice, kind });
    if bl.length() != l || bl.slices() != n {
        push(0, 0, ViolationKind::OutOfRange);
        return out;
    }
    let mut counted = vec![0u32; l * n];
    for i in 0..l {
        for &(a, b) in bl.lines_at(i) {
            let (a, b) = (a as usize, b as usize);
            if a >= n || b >= n {
                push(i, a.min(b), ViolationKind::OutOfRange);
                continue;
            }
            if a == b {
                push(i, a, ViolationKind::ZeroSeparation);
            }
            counted[i * n + a] += 1;
            if a != b {
                counted[i * n + b] += 1;
            }
        }
        for j in 0..n {
            let s = sw.get(i, j);
            if s != 1 && s != -1 {
                push(i, j, ViolationKind::SpinValue);
            }
            let occ = bl.occupancy(i, j);
            if occ as u32 != counted[i * n + j] {
                push(i, j, ViolationKind::Bookkeeping);
            }
            if occ > 1 {
                push(i, j, ViolationKind::Occupancy);
            } else if occ == 1 && !sw.is_kink(i, j) {
                push(i, j, ViolationKind::KinkConstraint);
            }
        }
    }
    out
}

const MAGIC: &[u8; 4] = b"SBWL";
const FORMAT_VERSION: u32 = 1;

/// Header of a binary worldline checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub length: u32,
    pub slices: u32,
    pub beta: f64,
    pub params_hash: u64,
    /// Generator state: seed, stream (chain id) and sweep counter.
    pub rng_seed: u64,
    pub rng_stream: u64,
    pub sweep_index: u64,
    pub boundary: Boundary,
}

/// Little-endian layout: magic, version, header fields, `L·N` spin bytes,
/// line count, then `(site, a, b)` as three `u32` per line.
pub fn write_checkpoint<W: Write>(mut w: W, header: &CheckpointHeader, cfg: &Configuration) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(header.length)?;
    w.write_u32::<LittleEndian>(header.slices)?;
    w.write_f64::<LittleEndian>(header.beta)?;
    w.write_u64::<LittleEndian>(header.params_hash)?;
    w.write_u64::<LittleEndian>(header.rng_seed)?;
    w.write_u64::<LittleEndian>(header.rng_stream)?;
    w.write_u64::<LittleEndian>(header.sweep_index)?;
    w.write_u8(match header.boundary {
        Boundary::Periodic => 0,
        Boundary::Open => 1,
    })?;
    let bytes: Vec<u8> = cfg.spins.raw().iter().map(|&s| s as u8).collect();
    w.write_all(&bytes)?;
    let lines = cfg.lines.sorted_lines();
    w.write_u64::<LittleEndian>(lines.len() as u64)?;
    for (i, a, b) in lines {
        w.write_u32::<LittleEndian>(i as u32)?;
        w.write_u32::<LittleEndian>(a as u32)?;
        w.write_u32::<LittleEndian>(b as u32)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointHeader, Configuration)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic number".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let length = r.read_u32::<LittleEndian>()?;
    let slices = r.read_u32::<LittleEndian>()?;
    let beta = r.read_f64::<LittleEndian>()?;
    let params_hash = r.read_u64::<LittleEndian>()?;
    let rng_seed = r.read_u64::<LittleEndian>()?;
    let rng_stream = r.read_u64::<LittleEndian>()?;
    let sweep_index = r.read_u64::<LittleEndian>()?;
    let boundary = match r.read_u8()? {
        0 => Boundary::Periodic,
        1 => Boundary::Open,
        b => return Err(Error::Checkpoint(format!("unknown boundary tag {b}"))),
    };
    let (l, n) = (length as usize, slices as usize);
    if l == 0 || n < 2 || l.checked_mul(n).is_none_or(|v| v > 1 << 32) {
        return Err(Error::Checkpoint(format!("implausible lattice {l}x{n}")));
    }
    let mut bytes = vec![0u8; l * n];
    r.read_exact(&mut bytes)?;
    let spins: Vec<i8> = bytes.into_iter().map(|b| b as i8).collect();
    let count = r.read_u64::<LittleEndian>()? as usize;
    if count > l * n {
        return Err(Error::Checkpoint(format!("{count} lines cannot fit on {l}x{n}")));
    }
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        let i = r.read_u32::<LittleEndian>()? as usize;
        let a = r.read_u32::<LittleEndian>()? as usize;
        let b = r.read_u32::<LittleEndian>()? as usize;
        if i >= l || a >= n || b >= n {
            return Err(Error::Checkpoint(format!("line ({i}, {a}, {b}) out of range")));
        }
        raw.push((i, a, b));
    }
    let cfg = Configuration {
        spins: SpinWorldline::from_spins(l, n, boundary, spins),
        lines: BosonLineSet::from_lines(l, n, &raw),
    };
    let bad = validate(&cfg);
    if let Some(v) = bad.first() {
        return Err(Error::Checkpoint(format!("invalid configuration: {v:?}")));
    }
    let header = CheckpointHeader {
        length,
        slices,
        beta,
        params_hash,
        rng_seed,
        rng_stream,
        sweep_index,
        boundary,
    };
    Ok((header, cfg))
}

/// Human-readable picture: one row per site (`+`/`-`, `|` after kinks that
/// carry a line), followed by the line list.
pub fn dump(cfg: &Configuration) -> String {
    let sw = &cfg.spins;
    let mut out = String::new();
    for i in 0..sw.length() {
        let _ = write!(out, "{i:>4} ");
        for j in 0..sw.slices() {
            out.push(if sw.get(i, j) > 0 { '+' } else { '-' });
            if cfg.lines.is_occupied(i, j) {
                out.push('|');
            }
        }
        out.push('\n');
    }
    for (i, a, b) in cfg.lines.sorted_lines() {
        let _ = writeln!(out, "line site={i} bonds=({a},{b})");
    }
    out
}

//! Metropolis sampling of worldline configurations.
//!
//! A sweep performs `L·N` local attempts drawn from the move mix (single
//! spin flips, arc flips, boson-line insertion/removal, whole-site flips),
//! followed by a fixed number of cluster updates and, optionally, one global
//! spin-flip proposal. The generator is repositioned at the start of every
//! sweep from `(seed, chain, sweep)`, so a resumed chain continues exactly
//! as an uninterrupted one would.

use crate::error::{Error, Result};
use crate::kernel::{KernelBranch, KernelTable};
use crate::model::{LatticeParams, ModelParams, DEFAULT_TOL};
use crate::observables::{magnetization_z, ChainRecord, Histogram, RunRecord, DEFAULT_BIN_WIDTH};
use crate::worldline::{
    delta_log_weight_spin_segment, flip_segment, pair_index, read_checkpoint, validate, write_checkpoint, Action,
    CheckpointHeader, Configuration,
};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// Probabilities of the local moves within a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoveMix {
    pub single_flip: f64,
    pub segment_flip: f64,
    /// Split evenly between insertion and removal.
    pub line_update: f64,
    pub site_flip: f64,
}

impl Default for MoveMix {
    fn default() -> Self {
        MoveMix {
            single_flip: 0.5,
            segment_flip: 0.1,
            line_update: 0.35,
            site_flip: 0.05,
        }
    }
}

impl MoveMix {
    pub fn validate(&self) -> Result<()> {
        let w = [self.single_flip, self.segment_flip, self.line_update, self.site_flip];
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidParameter(format!("move mix has a negative entry: {self:?}")));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("move mix sums to {total}, not 1")));
        }
        Ok(())
    }

    pub fn single_flip_only() -> Self {
        MoveMix {
            single_flip: 1.0,
            segment_flip: 0.0,
            line_update: 0.0,
            site_flip: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitialState {
    #[default]
    AllUp,
    AllDown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSchedule {
    pub thermalization_sweeps: u64,
    pub measurement_sweeps: u64,
    pub measure_every: u64,
    pub move_mix: MoveMix,
    /// Cluster updates appended to every sweep.
    pub clusters_per_sweep: u32,
    /// Propose `S → -S` once per sweep.
    pub global_flip: bool,
    pub seed: u64,
    pub replica_count: u32,
    pub initial: InitialState,
    pub bin_width: f64,
}

impl Default for SamplerSchedule {
    fn default() -> Self {
        SamplerSchedule {
            thermalization_sweeps: 1000,
            measurement_sweeps: 10_000,
            measure_every: 1,
            move_mix: MoveMix::default(),
            clusters_per_sweep: 4,
            global_flip: true,
            seed: 1,
            replica_count: 1,
            initial: InitialState::AllUp,
            bin_width: DEFAULT_BIN_WIDTH,
        }
    }
}

impl SamplerSchedule {
    pub fn validate(&self) -> Result<()> {
        self.move_mix.validate()?;
        if self.measure_every == 0 {
            return Err(Error::InvalidParameter("measure_every must be at least 1".into()));
        }
        if self.replica_count == 0 {
            return Err(Error::InvalidParameter("replica_count must be at least 1".into()));
        }
        Histogram::new(self.bin_width)?;
        Ok(())
    }

    pub fn total_sweeps(&self) -> u64 {
        self.thermalization_sweeps + self.measurement_sweeps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoveKind {
    SingleFlip = 0,
    SegmentFlip = 1,
    LineInsert = 2,
    LineRemove = 3,
    SiteFlip = 4,
    Cluster = 5,
    GlobalFlip = 6,
}

impl MoveKind {
    pub const ALL: [MoveKind; 7] = [
        MoveKind::SingleFlip,
        MoveKind::SegmentFlip,
        MoveKind::LineInsert,
        MoveKind::LineRemove,
        MoveKind::SiteFlip,
        MoveKind::Cluster,
        MoveKind::GlobalFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MoveKind::SingleFlip => "single_flip",
            MoveKind::SegmentFlip => "segment_flip",
            MoveKind::LineInsert => "line_insert",
            MoveKind::LineRemove => "line_remove",
            MoveKind::SiteFlip => "site_flip",
            MoveKind::Cluster => "cluster",
            MoveKind::GlobalFlip => "global_flip",
        }
    }

    /// Moves drawn from the local mix, `L·N` of them per sweep.
    pub fn is_local(self) -> bool {
        (self as usize) < 5
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MoveCounters {
    pub attempted: [u64; 7],
    pub accepted: [u64; 7],
}

impl MoveCounters {
    #[inline]
    fn record(&mut self, kind: MoveKind, accepted: bool) {
        self.attempted[kind as usize] += 1;
        self.accepted[kind as usize] += accepted as u64;
    }

    pub fn local_attempts(&self) -> u64 {
        MoveKind::ALL
            .iter()
            .filter(|k| k.is_local())
            .map(|&k| self.attempted[k as usize])
            .sum()
    }

    pub fn acceptance(&self, kind: MoveKind) -> f64 {
        let a = self.attempted[kind as usize];
        if a == 0 {
            0.0
        } else {
            self.accepted[kind as usize] as f64 / a as f64
        }
    }

    pub fn merge(&mut self, other: &MoveCounters) {
        for k in 0..7 {
            self.attempted[k] += other.attempted[k];
            self.accepted[k] += other.accepted[k];
        }
    }
}

/// A set of small integers with O(1) insert, remove and uniform draw.
#[derive(Clone, Debug)]
struct IndexedSet {
    items: Vec<u32>,
    pos: Vec<u32>,
}

const ABSENT: u32 = u32::MAX;

impl IndexedSet {
    fn new(capacity: usize) -> Self {
        IndexedSet {
            items: Vec::new(),
            pos: vec![ABSENT; capacity],
        }
    }

    #[inline]
    fn contains(&self, x: usize) -> bool {
        self.pos[x] != ABSENT
    }

    #[inline]
    fn insert(&mut self, x: usize) {
        if !self.contains(x) {
            self.pos[x] = self.items.len() as u32;
            self.items.push(x as u32);
        }
    }

    #[inline]
    fn remove(&mut self, x: usize) {
        let p = self.pos[x];
        if p != ABSENT {
            let last = *self.items.last().unwrap();
            self.items[p as usize] = last;
            self.pos[last as usize] = p;
            self.items.pop();
            self.pos[x] = ABSENT;
        }
    }

    #[inline]
    fn len(&self) -> usize {
        self.items.len()
    }
}

/// Metropolis test on a log ratio; `-∞` always rejects.
#[inline]
fn metropolis<R: Rng>(rng: &mut R, log_ratio: f64) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp()
}

/// One Markov chain: its configuration, generator and bookkeeping.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub config: Configuration,
    pub sweep_index: u64,
    pub counters: MoveCounters,
    seed: u64,
    chain_id: u64,
    rng: ChaCha8Rng,
    /// Per site: kink bonds not carrying a line.
    free: Vec<IndexedSet>,
    stamp: Vec<u32>,
    site_stamp: Vec<u32>,
    generation: u32,
    stack: Vec<(u32, u32)>,
    cluster: Vec<(u32, u32)>,
    touched: Vec<u32>,
}

impl ChainState {
    pub fn new(lat: &LatticeParams, initial: InitialState, seed: u64, chain_id: u64) -> Self {
        let mut config = Configuration::all_up(lat);
        if initial == InitialState::AllDown {
            config.spins.flip_all();
        }
        Self::from_config(config, seed, chain_id, 0)
    }

    pub fn from_config(config: Configuration, seed: u64, chain_id: u64, sweep_index: u64) -> Self {
        let (l, n) = (config.spins.length(), config.spins.slices());
        let mut cs = ChainState {
            config,
            sweep_index,
            counters: MoveCounters::default(),
            seed,
            chain_id,
            rng: ChaCha8Rng::seed_from_u64(seed),
            free: (0..l).map(|_| IndexedSet::new(n)).collect(),
            stamp: vec![0; l * n],
            site_stamp: vec![0; l],
            generation: 0,
            stack: Vec::new(),
            cluster: Vec::new(),
            touched: Vec::new(),
        };
        for i in 0..l {
            for b in 0..n {
                cs.sync_free(i, b);
            }
        }
        cs.position_rng();
        cs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn chain_id(&self) -> u64 {
        self.chain_id
    }

    fn position_rng(&mut self) {
        self.rng.set_stream(self.chain_id);
        self.rng.set_word_pos((self.sweep_index as u128) << 36);
    }

    #[inline]
    fn sync_free(&mut self, site: usize, bond: usize) {
        let free = self.config.spins.is_kink(site, bond) && !self.config.lines.is_occupied(site, bond);
        if free {
            self.free[site].insert(bond);
        } else {
            self.free[site].remove(bond);
        }
    }

    pub fn free_kinks(&self) -> usize {
        self.free.iter().map(IndexedSet::len).sum()
    }

    pub fn free_kinks_at(&self, site: usize) -> usize {
        self.free[site].len()
    }

    fn apply_segment(&mut self, site: usize, start: usize, len: usize) {
        let n = self.config.spins.slices();
        flip_segment(&mut self.config, site, start, len);
        if len < n {
            self.sync_free(site, (start + n - 1) % n);
            self.sync_free(site, (start + len - 1) % n);
        }
    }

    fn try_segment(&mut self, act: &Action, site: usize, start: usize, len: usize, kind: MoveKind) -> bool {
        let d = delta_log_weight_spin_segment(&self.config, act, site, start, len);
        let ok = metropolis(&mut self.rng, d);
        if ok {
            self.apply_segment(site, start, len);
        }
        self.counters.record(kind, ok);
        ok
    }

    pub fn update_single_flip(&mut self, act: &Action) -> bool {
        let (l, n) = (act.length(), act.slices());
        let site = self.rng.random_range(0..l);
        let slice = self.rng.random_range(0..n);
        self.try_segment(act, site, slice, 1, MoveKind::SingleFlip)
    }

    /// Flips an arc of random start and length `1..N-1` at a random site.
    pub fn update_segment_flip(&mut self, act: &Action) -> bool {
        let (l, n) = (act.length(), act.slices());
        let site = self.rng.random_range(0..l);
        let start = self.rng.random_range(0..n);
        let len = self.rng.random_range(1..n);
        self.try_segment(act, site, start, len, MoveKind::SegmentFlip)
    }

    pub fn update_site_flip(&mut self, act: &Action) -> bool {
        let site = self.rng.random_range(0..act.length());
        self.try_segment(act, site, 0, act.slices(), MoveKind::SiteFlip)
    }

    /// Log acceptance ratio for adding the line `{a, b}` at `site`, with the
    /// proposal correction for drawing an unordered pair out of `n` free
    /// kinks and later removing one of `m + 1` lines.
    pub fn insert_log_ratio(&self, act: &Action, site: usize, a: usize, b: usize) -> f64 {
        let (lo, hi) = (a.min(b), a.max(b));
        let n = self.free[site].len() as f64;
        let m = self.config.lines.count_at(site) as f64;
        let s = &self.config.spins;
        act.ln_line(hi - lo, s.get(site, lo), s.get(site, hi)) + (n * (n - 1.0) / 2.0).ln() - (m + 1.0).ln()
    }

    /// Log acceptance ratio for removing the `index`-th line at `site`.
    pub fn remove_log_ratio(&self, act: &Action, site: usize, index: usize) -> f64 {
        let (a, b) = self.config.lines.lines_at(site)[index];
        let (a, b) = (a as usize, b as usize);
        let n = self.free[site].len() as f64 + 2.0;
        let m = self.config.lines.count_at(site) as f64;
        let s = &self.config.spins;
        -act.ln_line(b - a, s.get(site, a), s.get(site, b)) + m.ln() - (n * (n - 1.0) / 2.0).ln()
    }

    pub fn update_line_insert(&mut self, act: &Action) -> bool {
        let site = self.rng.random_range(0..act.length());
        let n = self.free[site].len();
        if n < 2 {
            self.counters.record(MoveKind::LineInsert, false);
            return false;
        }
        let k1 = self.rng.random_range(0..n);
        let mut k2 = self.rng.random_range(0..n - 1);
        if k2 >= k1 {
            k2 += 1;
        }
        let a = self.free[site].items[k1] as usize;
        let b = self.free[site].items[k2] as usize;
        let log_ratio = self.insert_log_ratio(act, site, a, b);
        let ok = metropolis(&mut self.rng, log_ratio);
        if ok {
            self.config.lines.insert(site, a, b);
            self.free[site].remove(a);
            self.free[site].remove(b);
        }
        self.counters.record(MoveKind::LineInsert, ok);
        ok
    }

    pub fn update_line_remove(&mut self, act: &Action) -> bool {
        let site = self.rng.random_range(0..act.length());
        let m = self.config.lines.count_at(site);
        if m == 0 {
            self.counters.record(MoveKind::LineRemove, false);
            return false;
        }
        let k = self.rng.random_range(0..m);
        let log_ratio = self.remove_log_ratio(act, site, k);
        let ok = metropolis(&mut self.rng, log_ratio);
        if ok {
            let (a, b) = self.config.lines.remove_at(site, k);
            self.free[site].insert(a);
            self.free[site].insert(b);
        }
        self.counters.record(MoveKind::LineRemove, ok);
        ok
    }

    pub fn update_line_insert_remove(&mut self, act: &Action) -> bool {
        if self.rng.random::<bool>() {
            self.update_line_insert(act)
        } else {
            self.update_line_remove(act)
        }
    }

    fn next_generation(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.site_stamp.iter_mut().for_each(|s| *s = 0);
            self.generation = 1;
        }
    }

    /// Single-cluster update. Bonds of the nearest-neighbour action are
    /// activated with the usual `1 - e^{-2K}` probabilities, both spins next
    /// to a line-carrying bond always join together, and the kernel change of
    /// the resulting flip is accepted by a Metropolis test.
    pub fn update_cluster(&mut self, act: &Action) -> bool {
        let (l, n) = (act.length(), act.slices());
        let c = act.couplings;
        let p_time = -(-2.0 * c.j_tau).exp_m1();
        let p_space = |mult: f64| -(-2.0 * c.j_space * mult).exp_m1();
        self.next_generation();
        let g = self.generation;
        let i0 = self.rng.random_range(0..l);
        let j0 = self.rng.random_range(0..n);
        self.stack.clear();
        self.cluster.clear();
        self.stamp[i0 * n + j0] = g;
        self.stack.push((i0 as u32, j0 as u32));
        while let Some((i, j)) = self.stack.pop() {
            let (i, j) = (i as usize, j as usize);
            self.cluster.push((i as u32, j as u32));
            let s = self.config.spins.get(i, j);
            let next = if j + 1 == n { 0 } else { j + 1 };
            let prev = if j == 0 { n - 1 } else { j - 1 };
            for (other, bond) in [(next, j), (prev, prev)] {
                if self.stamp[i * n + other] == g {
                    continue;
                }
                let join = if self.config.lines.is_occupied(i, bond) {
                    true
                } else {
                    self.config.spins.get(i, other) == s && self.rng.random::<f64>() < p_time
                };
                if join {
                    self.stamp[i * n + other] = g;
                    self.stack.push((i as u32, other as u32));
                }
            }
            for &(nb, mult) in act.neighbours(i) {
                if self.stamp[nb * n + j] != g
                    && self.config.spins.get(nb, j) == s
                    && self.rng.random::<f64>() < p_space(mult)
                {
                    self.stamp[nb * n + j] = g;
                    self.stack.push((nb as u32, j as u32));
                }
            }
        }

        self.touched.clear();
        for &(i, _) in &self.cluster {
            if self.site_stamp[i as usize] != g {
                self.site_stamp[i as usize] = g;
                self.touched.push(i);
            }
        }
        let mut delta = 0.0;
        for &i in &self.touched {
            let i = i as usize;
            for &(a, b) in self.config.lines.lines_at(i) {
                let (a, b) = (a as usize, b as usize);
                let fa = self.stamp[i * n + a] == g;
                let fb = self.stamp[i * n + b] == g;
                if fa || fb {
                    let sa = self.config.spins.get(i, a);
                    let sb = self.config.spins.get(i, b);
                    let na = if fa { -sa } else { sa };
                    let nb = if fb { -sb } else { sb };
                    let row = act.ln_line_row(b - a);
                    delta += row[pair_index(na, nb)] - row[pair_index(sa, sb)];
                }
            }
        }
        let ok = metropolis(&mut self.rng, delta);
        if ok {
            for k in 0..self.cluster.len() {
                let (i, j) = self.cluster[k];
                self.config.spins.flip(i as usize, j as usize);
            }
            for k in 0..self.cluster.len() {
                let (i, j) = (self.cluster[k].0 as usize, self.cluster[k].1 as usize);
                self.sync_free(i, j);
                self.sync_free(i, if j == 0 { n - 1 } else { j - 1 });
            }
        }
        self.counters.record(MoveKind::Cluster, ok);
        ok
    }

    /// `ln W(-S) - ln W(S)`: only the kernel factors change.
    pub fn global_flip_log_ratio(&self, act: &Action) -> f64 {
        let s = &self.config.spins;
        let mut delta = 0.0;
        for i in 0..act.length() {
            for &(a, b) in self.config.lines.lines_at(i) {
                let (a, b) = (a as usize, b as usize);
                let (sa, sb) = (s.get(i, a), s.get(i, b));
                let row = act.ln_line_row(b - a);
                delta += row[pair_index(-sa, -sb)] - row[pair_index(sa, sb)];
            }
        }
        delta
    }

    pub fn update_global_flip(&mut self, act: &Action) -> bool {
        let d = self.global_flip_log_ratio(act);
        let ok = metropolis(&mut self.rng, d);
        if ok {
            self.config.spins.flip_all();
        }
        self.counters.record(MoveKind::GlobalFlip, ok);
        ok
    }

    /// One sweep of the schedule's move mix.
    pub fn sweep(&mut self, act: &Action, schedule: &SamplerSchedule) {
        self.position_rng();
        let mix = schedule.move_mix;
        let c1 = mix.single_flip;
        let c2 = c1 + mix.segment_flip;
        let c3 = c2 + mix.line_update;
        let attempts = act.length() * act.slices();
        for _ in 0..attempts {
            let u: f64 = self.rng.random();
            if u < c1 {
                self.update_single_flip(act);
            } else if u < c2 {
                self.update_segment_flip(act);
            } else if u < c3 {
                self.update_line_insert_remove(act);
            } else {
                self.update_site_flip(act);
            }
        }
        for _ in 0..schedule.clusters_per_sweep {
            self.update_cluster(act);
        }
        if schedule.global_flip {
            self.update_global_flip(act);
        }
        self.sweep_index += 1;
    }

    /// Debug helper: the configuration's violations plus any drift of the
    /// free-kink index.
    pub fn check(&self) -> bool {
        if !validate(&self.config).is_empty() {
            return false;
        }
        let (l, n) = (self.config.spins.length(), self.config.spins.slices());
        (0..l).all(|i| {
            (0..n).all(|b| {
                let want = self.config.spins.is_kink(i, b) && !self.config.lines.is_occupied(i, b);
                want == self.free[i].contains(b)
            })
        })
    }
}

/// Where and how often chains write checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    /// Sweeps between checkpoints; 0 writes only at the end.
    pub every: u64,
    pub resume: bool,
    /// Hash of the physical and lattice parameters, stored in the header.
    pub params_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub branch: KernelBranch,
    pub tol: f64,
    pub checkpoint: Option<CheckpointPolicy>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            branch: KernelBranch::AsPrinted,
            tol: DEFAULT_TOL,
            checkpoint: None,
        }
    }
}

pub fn checkpoint_path(dir: &Path, chain: u64) -> PathBuf {
    dir.join(format!("chain-{chain}.ckpt"))
}

fn save_chain(path: &Path, lat: &LatticeParams, policy: &CheckpointPolicy, cs: &ChainState, rec: &ChainRecord) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let header = CheckpointHeader {
            length: lat.length as u32,
            slices: lat.slices as u32,
            beta: lat.beta,
            params_hash: policy.params_hash,
            rng_seed: cs.seed,
            rng_stream: cs.chain_id,
            sweep_index: cs.sweep_index,
            boundary: lat.boundary,
        };
        write_checkpoint(&mut w, &header, &cs.config)?;
        for k in 0..7 {
            w.write_u64::<LittleEndian>(cs.counters.attempted[k])?;
            w.write_u64::<LittleEndian>(cs.counters.accepted[k])?;
        }
        w.write_u64::<LittleEndian>(rec.m_z.len() as u64)?;
        for k in 0..rec.m_z.len() {
            w.write_f64::<LittleEndian>(rec.m_z[k])?;
            w.write_u32::<LittleEndian>(rec.free_kinks[k])?;
            w.write_u32::<LittleEndian>(rec.lines[k])?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_chain(path: &Path, lat: &LatticeParams, policy: &CheckpointPolicy, seed: u64, chain: u64) -> Result<(ChainState, ChainRecord)> {
    let mut r = BufReader::new(File::open(path)?);
    let (h, config) = read_checkpoint(&mut r)?;
    if h.length as usize != lat.length || h.slices as usize != lat.slices || h.beta != lat.beta || h.boundary != lat.boundary {
        return Err(Error::Checkpoint("lattice differs from the requested run".into()));
    }
    if h.params_hash != policy.params_hash {
        return Err(Error::Checkpoint("parameter hash differs from the requested run".into()));
    }
    if h.rng_seed != seed || h.rng_stream != chain {
        return Err(Error::Checkpoint("seed or chain id differs from the requested run".into()));
    }
    let mut cs = ChainState::from_config(config, seed, chain, h.sweep_index);
    for k in 0..7 {
        cs.counters.attempted[k] = r.read_u64::<LittleEndian>()?;
        cs.counters.accepted[k] = r.read_u64::<LittleEndian>()?;
    }
    let count = r.read_u64::<LittleEndian>()? as usize;
    if count as u64 > h.sweep_index {
        return Err(Error::Checkpoint("more samples than sweeps".into()));
    }
    let mut rec = empty_record(seed, chain);
    for _ in 0..count {
        rec.m_z.push(r.read_f64::<LittleEndian>()?);
        rec.free_kinks.push(r.read_u32::<LittleEndian>()?);
        rec.lines.push(r.read_u32::<LittleEndian>()?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((cs, rec))
}

fn empty_record(seed: u64, chain: u64) -> ChainRecord {
    ChainRecord {
        chain_id: chain,
        seed,
        sweeps: 0,
        m_z: Vec::new(),
        free_kinks: Vec::new(),
        lines: Vec::new(),
        counters: MoveCounters::default(),
    }
}

/// Runs one chain to completion, checkpointing and resuming as configured.
pub fn run_chain(lat: &LatticeParams, act: &Action, schedule: &SamplerSchedule, opts: &RunOptions, chain: u64) -> Result<ChainRecord> {
    let seed = schedule.seed;
    let policy = opts.checkpoint.as_ref();
    let path = policy.map(|p| checkpoint_path(&p.dir, chain));
    let wrap = |sweep: u64| move |e: Error| Error::Chain { chain, sweep, source: Box::new(e) };

    let (mut cs, mut rec) = match (policy, &path) {
        (Some(p), Some(path)) if p.resume && path.exists() => load_chain(path, lat, p, seed, chain).map_err(wrap(0))?,
        _ => (ChainState::new(lat, schedule.initial, seed, chain), empty_record(seed, chain)),
    };
    let total = schedule.total_sweeps();
    while cs.sweep_index < total {
        cs.sweep(act, schedule);
        let done = cs.sweep_index;
        if done > schedule.thermalization_sweeps && (done - schedule.thermalization_sweeps) % schedule.measure_every == 0 {
            rec.m_z.push(magnetization_z(&cs.config));
            rec.free_kinks.push(cs.free_kinks() as u32);
            rec.lines.push(cs.config.lines.total() as u32);
        }
        if let (Some(p), Some(path)) = (policy, &path) {
            if (p.every > 0 && done % p.every == 0) || done == total {
                save_chain(path, lat, p, &cs, &rec).map_err(wrap(done))?;
            }
        }
    }
    rec.sweeps = cs.sweep_index;
    rec.counters = cs.counters;
    Ok(rec)
}

/// Builds the kernel table and runs every replica.
pub fn run(p: &ModelParams, lat: &LatticeParams, schedule: &SamplerSchedule, opts: &RunOptions) -> Result<RunRecord> {
    p.validate()?;
    lat.validate()?;
    schedule.validate()?;
    let table = KernelTable::build(lat, p, opts.tol)?;
    let act = Action::from_params(lat, p, &table, opts.branch)?;
    if let Some(policy) = &opts.checkpoint {
        std::fs::create_dir_all(&policy.dir)?;
    }
    let chains = (0..schedule.replica_count as u64)
        .into_par_iter()
        .map(|c| run_chain(lat, &act, schedule, opts, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunRecord {
        params: p.clone(),
        lattice: lat.clone(),
        schedule: schedule.clone(),
        branch: opts.branch,
        chains,
        bin_width: schedule.bin_width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BathKind, Boundary, Mode};
    use crate::worldline::{log_weight, BosonLineSet, SpinWorldline};
    use std::collections::HashMap;

    fn action(lat: &LatticeParams, p: &ModelParams) -> Action {
        let table = KernelTable::build(lat, p, DEFAULT_TOL).unwrap();
        Action::from_params(lat, p, &table, KernelBranch::AsPrinted).unwrap()
    }

    fn one_mode(alpha_like: f64, gamma: f64) -> ModelParams {
        ModelParams {
            gamma,
            bath: BathKind::DiscreteModes(vec![Mode {
                omega: 1.5,
                lambda: alpha_like,
            }]),
            ..ModelParams::default()
        }
    }

    /// Every allowed configuration of one site: spins times all matchings of
    /// its kink bonds.
    fn enumerate(n: usize) -> Vec<Configuration> {
        fn matchings(free: &[usize], acc: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
            out.push(acc.clone());
            for x in 0..free.len() {
                for y in x + 1..free.len() {
                    if acc.iter().all(|&(a, b)| a < free[x] && b != free[x] && b != free[y] && a != free[y]) {
                        acc.push((free[x], free[y]));
                        matchings(free, acc, out);
                        acc.pop();
                    }
                }
            }
        }
        let mut out = Vec::new();
        for bits in 0..1u32 << n {
            let spins: Vec<i8> = (0..n).map(|j| if bits >> j & 1 == 1 { -1 } else { 1 }).collect();
            let sw = SpinWorldline::from_spins(1, n, Boundary::Periodic, spins);
            let kinks: Vec<usize> = (0..n).filter(|&b| sw.is_kink(0, b)).collect();
            let mut sets = Vec::new();
            matchings(&kinks, &mut Vec::new(), &mut sets);
            for set in sets {
                let lines: Vec<_> = set.iter().map(|&(a, b)| (0, a, b)).collect();
                out.push(Configuration {
                    spins: sw.clone(),
                    lines: BosonLineSet::from_lines(1, n, &lines),
                });
            }
        }
        out
    }

    fn key(cfg: &Configuration) -> (Vec<i8>, Vec<(usize, usize, usize)>) {
        (cfg.spins.raw().to_vec(), cfg.lines.sorted_lines())
    }

    #[test]
    fn enumeration_is_complete_and_valid() {
        let all = enumerate(4);
        // 2 uniform + 12 two-kink + 2 four-kink spin patterns; lines: 1 way for
        // zero kinks, 2 for two kinks, 10 for four kinks (1 + 6 + 3)
        assert_eq!(all.len(), 2 + 12 * 2 + 2 * 10);
        assert!(all.iter().all(|c| validate(c).is_empty()));
    }

    #[test]
    fn line_ratios_are_reciprocal() {
        let lat = LatticeParams::new(1, 4, 2.0).unwrap();
        let p = one_mode(0.8, 0.7);
        let act = action(&lat, &p);
        let mut checked = 0;
        for cfg in enumerate(4) {
            let cs = ChainState::from_config(cfg.clone(), 1, 0, 0);
            let free: Vec<usize> = cs.free[0].items.iter().map(|&x| x as usize).collect();
            for x in 0..free.len() {
                for y in x + 1..free.len() {
                    let (a, b) = (free[x], free[y]);
                    let fwd = cs.insert_log_ratio(&act, 0, a, b);
                    let mut next = cfg.clone();
                    next.lines.insert(0, a, b);
                    let back_state = ChainState::from_config(next.clone(), 1, 0, 0);
                    let idx = next.lines.lines_at(0).iter().position(|&l| l == (a.min(b) as u32, a.max(b) as u32)).unwrap();
                    let bwd = back_state.remove_log_ratio(&act, 0, idx);
                    assert!((fwd + bwd).abs() < 1e-12);
                    // independent proposal probabilities: insert picks one of
                    // C(n, 2) pairs, removal one of m + 1 lines
                    let n = free.len() as f64;
                    let m = cfg.lines.count_at(0) as f64;
                    let q_fwd = 1.0 / (n * (n - 1.0) / 2.0);
                    let q_bwd = 1.0 / (m + 1.0);
                    let dw = log_weight(&next, &act) - log_weight(&cfg, &act);
                    assert!((fwd - (dw + q_bwd.ln() - q_fwd.ln())).abs() < 1e-12);
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn flip_ratios_satisfy_detailed_balance() {
        for l in [1, 2] {
            let lat = LatticeParams::new(l, 4, 2.0).unwrap();
            let mut p = one_mode(0.8, 0.3);
            p.j_coupling = 1.2;
            let act = action(&lat, &p);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..300 {
                let bits: Vec<i8> = (0..4 * l).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
                let mut cfg = Configuration {
                    spins: SpinWorldline::from_spins(l, 4, Boundary::Periodic, bits),
                    lines: BosonLineSet::new(l, 4),
                };
                for i in 0..l {
                    let kinks: Vec<usize> = (0..4).filter(|&b| cfg.spins.is_kink(i, b)).collect();
                    if kinks.len() >= 2 && rng.random::<bool>() {
                        cfg.lines.insert(i, kinks[0], kinks[1]);
                    }
                }
                let site = rng.random_range(0..l);
                let start = rng.random_range(0..4);
                let len = rng.random_range(1..=4);
                let fwd = delta_log_weight_spin_segment(&cfg, &act, site, start, len);
                let mut next = cfg.clone();
                flip_segment(&mut next, site, start, len);
                let bwd = delta_log_weight_spin_segment(&next, &act, site, start, len);
                let dw = log_weight(&next, &act) - log_weight(&cfg, &act);
                if fwd.is_finite() {
                    assert!((fwd + bwd).abs() < 1e-12 && (fwd - dw).abs() < 1e-12);
                } else {
                    assert_eq!(dw, f64::NEG_INFINITY);
                }
            }
        }
    }

    #[test]
    fn global_flip_ratio_matches_weights() {
        let lat = LatticeParams::new(1, 4, 2.0).unwrap();
        let act = action(&lat, &one_mode(0.8, 0.8));
        for cfg in enumerate(4) {
            let cs = ChainState::from_config(cfg.clone(), 1, 0, 0);
            let d = cs.global_flip_log_ratio(&act);
            let dw = log_weight(&cfg.flipped(), &act) - log_weight(&cfg, &act);
            assert!((d - dw).abs() < 1e-12);
        }
    }

    /// Independent samples from many short chains against exact weights.
    fn chi_square_against_enumeration(schedule: &SamplerSchedule, chains: u64, sweeps: u64) -> (f64, usize) {
        let lat = LatticeParams::new(1, 4, 2.0).unwrap();
        let p = one_mode(0.9, 0.7);
        let act = action(&lat, &p);
        let all = enumerate(4);
        let weights: Vec<f64> = all.iter().map(|c| log_weight(c, &act).exp()).collect();
        let z: f64 = weights.iter().sum();
        let index: HashMap<_, _> = all.iter().enumerate().map(|(k, c)| (key(c), k)).collect();
        let mut counts = vec![0u64; all.len()];
        for c in 0..chains {
            let mut cs = ChainState::new(&lat, InitialState::AllUp, 99, c);
            for _ in 0..sweeps {
                cs.sweep(&act, schedule);
            }
            counts[index[&key(&cs.config)]] += 1;
        }
        let n = chains as f64;
        let mut chi2 = 0.0;
        let mut dof = 0;
        for (k, &w) in weights.iter().enumerate() {
            let e = n * w / z;
            if e >= 5.0 {
                chi2 += (counts[k] as f64 - e).powi(2) / e;
                dof += 1;
            }
        }
        (chi2, dof - 1)
    }

    #[test]
    fn samples_exact_distribution() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let schedule = SamplerSchedule {
            clusters_per_sweep: 1,
            ..SamplerSchedule::default()
        };
        let (chi2, dof) = chi_square_against_enumeration(&schedule, 20_000, 30);
        let p = 1.0 - ChiSquared::new(dof as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} with {dof} dof, p = {p}");
    }

    #[test]
    fn visits_every_configuration() {
        let lat = LatticeParams::new(1, 4, 2.0).unwrap();
        let act = action(&lat, &one_mode(0.9, 0.6));
        let all = enumerate(4);
        let mut seen: HashMap<_, bool> = all.iter().map(|c| (key(c), false)).collect();
        let mut cs = ChainState::new(&lat, InitialState::AllUp, 5, 0);
        let schedule = SamplerSchedule {
            clusters_per_sweep: 0,
            global_flip: false,
            ..SamplerSchedule::default()
        };
        // 4 local attempts per sweep: 250 000 sweeps is 10⁶ attempts
        for _ in 0..250_000 {
            cs.sweep(&act, &schedule);
            *seen.get_mut(&key(&cs.config)).unwrap() = true;
        }
        let missing = seen.values().filter(|&&v| !v).count();
        assert_eq!(missing, 0);
    }

    #[test]
    fn zero_delta_always_accepted() {
        // J = 0, α = 0, a full-site flip changes nothing
        let lat = LatticeParams::new(2, 6, 1.0).unwrap();
        let act = action(&lat, &ModelParams::default());
        let mut cs = ChainState::new(&lat, InitialState::AllUp, 1, 0);
        for _ in 0..50 {
            assert!(cs.update_site_flip(&act));
        }
    }

    #[test]
    fn constrained_flip_rejected() {
        let lat = LatticeParams::new(1, 6, 1.0).unwrap();
        let act = action(&lat, &one_mode(1.0, 0.5));
        let mut spins = SpinWorldline::all_up(1, 6, Boundary::Periodic);
        spins.set(0, 2, -1);
        spins.set(0, 3, -1);
        let cfg = Configuration {
            spins,
            lines: BosonLineSet::from_lines(1, 6, &[(0, 1, 3)]),
        };
        let cs = ChainState::from_config(cfg.clone(), 1, 0, 0);
        // slice 2 sits right after the occupied bond 1
        assert_eq!(delta_log_weight_spin_segment(&cs.config, &act, 0, 2, 1), f64::NEG_INFINITY);
        assert_eq!(delta_log_weight_spin_segment(&cs.config, &act, 0, 1, 1), f64::NEG_INFINITY);
    }

    #[test]
    fn no_lines_without_coupling() {
        let lat = LatticeParams::new(2, 20, 2.0).unwrap();
        let act = action(&lat, &ModelParams::default());
        let mut cs = ChainState::new(&lat, InitialState::AllUp, 2, 0);
        let schedule = SamplerSchedule::default();
        for _ in 0..200 {
            cs.sweep(&act, &schedule);
        }
        assert_eq!(cs.counters.accepted[MoveKind::LineInsert as usize], 0);
        assert!(cs.counters.attempted[MoveKind::LineInsert as usize] > 0);
        assert_eq!(cs.config.lines.total(), 0);
    }

    #[test]
    fn sweep_counts_and_validity() {
        let lat = LatticeParams::new(4, 32, 3.2).unwrap();
        let p = ModelParams {
            alpha: 0.3,
            gamma: 0.6,
            j_coupling: 2.0,
            ..ModelParams::default()
        };
        let act = action(&lat, &p);
        let mut cs = ChainState::new(&lat, InitialState::AllUp, 3, 0);
        let schedule = SamplerSchedule::default();
        for s in 0..10_000u64 {
            let before = cs.counters.local_attempts();
            cs.sweep(&act, &schedule);
            assert_eq!(cs.counters.local_attempts() - before, 128);
            if s % 10 == 0 {
                assert!(cs.check(), "invalid state after sweep {s}");
            }
        }
        assert!(cs.check());
        assert!(cs.counters.accepted[MoveKind::LineInsert as usize] > 0);
    }

    #[test]
    fn single_flip_only_is_plain_ising() {
        // at α = 0 only single flips: delta equals the plain Ising energy change
        let lat = LatticeParams::new(3, 8, 0.8).unwrap();
        let p = ModelParams {
            j_coupling: 1.5,
            ..ModelParams::default()
        };
        let act = action(&lat, &p);
        let mut cs = ChainState::new(&lat, InitialState::AllUp, 4, 0);
        let schedule = SamplerSchedule {
            move_mix: MoveMix::single_flip_only(),
            clusters_per_sweep: 0,
            global_flip: false,
            ..SamplerSchedule::default()
        };
        for _ in 0..100 {
            cs.sweep(&act, &schedule);
        }
        assert_eq!(cs.counters.local_attempts(), 100 * 24);
        assert_eq!(cs.counters.attempted[MoveKind::SingleFlip as usize], 100 * 24);
    }

    #[test]
    fn deterministic_and_resumable() {
        let lat = LatticeParams::new(3, 20, 2.0).unwrap();
        let p = ModelParams {
            alpha: 0.3,
            gamma: 0.55,
            j_coupling: 1.5,
            ..ModelParams::default()
        };
        let schedule = SamplerSchedule {
            thermalization_sweeps: 20,
            measurement_sweeps: 60,
            replica_count: 2,
            seed: 17,
            ..SamplerSchedule::default()
        };
        let a = run(&p, &lat, &schedule, &RunOptions::default()).unwrap();
        let b = run(&p, &lat, &schedule, &RunOptions::default()).unwrap();
        assert_eq!(a.chains, b.chains);
        assert_ne!(a.chains[0].m_z, a.chains[1].m_z);

        let dir = std::env::temp_dir().join(format!("spinbath-resume-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let policy = CheckpointPolicy {
            dir: dir.clone(),
            every: 10,
            resume: true,
            params_hash: 7,
        };
        let opts = RunOptions {
            checkpoint: Some(policy),
            ..RunOptions::default()
        };
        // interrupted run: stop after 50 sweeps, then resume to the end
        let short = SamplerSchedule {
            measurement_sweeps: 30,
            ..schedule.clone()
        };
        run(&p, &lat, &short, &opts).unwrap();
        let resumed = run(&p, &lat, &schedule, &opts).unwrap();
        assert_eq!(resumed.chains, a.chains);

        let wrong = RunOptions {
            checkpoint: Some(CheckpointPolicy {
                params_hash: 8,
                ..opts.checkpoint.clone().unwrap()
            }),
            ..RunOptions::default()
        };
        let err = run(&p, &lat, &schedule, &wrong).unwrap_err();
        assert!(matches!(err, Error::Chain { chain: 0, .. }), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn relabeled_chain_is_exact_mirror() {
        let lat = LatticeParams::new(3, 16, 1.6).unwrap();
        let mk = |gamma: f64, initial| {
            let p = ModelParams {
                alpha: 0.4,
                gamma,
                j_coupling: 2.0,
                ..ModelParams::default()
            };
            let schedule = SamplerSchedule {
                thermalization_sweeps: 0,
                measurement_sweeps: 300,
                initial,
                seed: 23,
                ..SamplerSchedule::default()
            };
            run(&p, &lat, &schedule, &RunOptions::default()).unwrap()
        };
        let a = mk(0.3, InitialState::AllUp);
        let b = mk(0.7, InitialState::AllDown);
        for (x, y) in a.m_z().iter().zip(b.m_z()) {
            assert_eq!(*x, -y);
        }
    }
}

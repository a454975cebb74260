//! Estimators and error analysis for sampled magnetization streams.

use crate::error::{Error, Result};
use crate::kernel::KernelBranch;
use crate::model::{LatticeParams, ModelParams};
use crate::qmc::{self, MoveCounters, RunOptions, SamplerSchedule};
use crate::worldline::Configuration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;

/// Default histogram resolution in `m_Z`.
pub const DEFAULT_BIN_WIDTH: f64 = 0.05;

/// Shortest series accepted by `blocked_errors`.
pub const MIN_BLOCKING_LEN: usize = 64;

/// Space-time averaged spin of one configuration.
pub fn magnetization_z(cfg: &Configuration) -> f64 {
    cfg.spins.sum() as f64 / cfg.spins.raw().len() as f64
}

/// Counts over bins of width `w` centred on `k·w`, symmetric about zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    bin_width: f64,
    half: i64,
    counts: Vec<u64>,
}

impl Histogram {
    pub fn new(bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width <= 2.0) {
            return Err(Error::InvalidParameter(format!("bin width {bin_width} outside (0, 2]")));
        }
        let half = (1.0 / bin_width).round() as i64 + 1;
        Ok(Histogram {
            bin_width,
            half,
            counts: vec![0; (2 * half + 1) as usize],
        })
    }

    pub fn from_series(series: &[f64], bin_width: f64) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::SeriesTooShort { len: 0, min: 1 });
        }
        let mut h = Histogram::new(bin_width)?;
        series.iter().for_each(|&m| h.add(m));
        Ok(h)
    }

    #[inline]
    fn index(&self, m: f64) -> usize {
        let k = (m / self.bin_width).round() as i64;
        (k.clamp(-self.half, self.half) + self.half) as usize
    }

    pub fn add(&mut self, m: f64) {
        let i = self.index(m);
        self.counts[i] += 1;
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn centers(&self) -> Vec<f64> {
        (-self.half..=self.half).map(|k| k as f64 * self.bin_width).collect()
    }

    /// Probability mass per bin.
    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// The histogram of `-m`.
    pub fn mirrored(&self) -> Self {
        let mut h = self.clone();
        h.counts.reverse();
        h
    }

    /// Centres of the well-separated maxima of the three-bin smoothed mass.
    /// Two neighbouring maxima count separately only when the lowest point
    /// between them drops below `dip_ratio` times the smaller one.
    pub fn peaks(&self, dip_ratio: f64) -> Vec<f64> {
        let p = self.probabilities();
        let n = p.len();
        let smooth: Vec<f64> = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(1);
                let hi = (i + 1).min(n - 1);
                p[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
            })
            .collect();
        let mut maxima: Vec<usize> = Vec::new();
        let mut i = 0;
        while i < n {
            // treat plateaus as one candidate at their middle
            let mut k = i;
            while k + 1 < n && smooth[k + 1] == smooth[i] {
                k += 1;
            }
            let left_lower = i == 0 || smooth[i - 1] < smooth[i];
            let right_lower = k + 1 == n || smooth[k + 1] < smooth[i];
            if left_lower && right_lower && smooth[i] > 0.0 {
                maxima.push((i + k) / 2);
            }
            i = k + 1;
        }
        let mut kept: Vec<usize> = Vec::new();
        for m in maxima {
            if let Some(&last) = kept.last() {
                let dip = smooth[last..=m].iter().cloned().fold(f64::INFINITY, f64::min);
                if dip >= dip_ratio * smooth[last].min(smooth[m]) {
                    if smooth[m] > smooth[last] {
                        kept.pop();
                        kept.push(m);
                    }
                    continue;
                }
            }
            kept.push(m);
        }
        let centers = self.centers();
        kept.into_iter().map(|k| centers[k]).collect()
    }

    /// Rows `center,probability` under a commented header.
    pub fn write_table<W: Write>(&self, mut out: W, config_hash: &str) -> std::io::Result<()> {
        writeln!(
            out,
            "# config_hash={config_hash} bin_width={} total={} normalization=probability_mass",
            self.bin_width,
            self.total()
        )?;
        writeln!(out, "# m_z,probability")?;
        for (c, p) in self.centers().into_iter().zip(self.probabilities()) {
            writeln!(out, "{c:.6},{p:.9e}")?;
        }
        Ok(())
    }
}

/// `1 - <m⁴> / (3 <m²>²)`
pub fn binder_cumulant(series: &[f64]) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::SeriesTooShort { len: 0, min: 1 });
    }
    let n = series.len() as f64;
    let m2 = series.iter().map(|m| m * m).sum::<f64>() / n;
    let m4 = series.iter().map(|m| m.powi(4)).sum::<f64>() / n;
    if m2 == 0.0 {
        return Err(Error::ZeroSecondMoment);
    }
    Ok(1.0 - m4 / (3.0 * m2 * m2))
}

fn binder_from_moments(m2: f64, m4: f64) -> f64 {
    1.0 - m4 / (3.0 * m2 * m2)
}

pub fn mean(series: &[f64]) -> f64 {
    series.iter().sum::<f64>() / series.len() as f64
}

fn skewness_from_moments(n: f64, s1: f64, s2: f64, s3: f64) -> f64 {
    let mu = s1 / n;
    let var = s2 / n - mu * mu;
    let third = s3 / n - 3.0 * mu * s2 / n + 2.0 * mu.powi(3);
    if var <= 0.0 {
        0.0
    } else {
        third / var.powf(1.5)
    }
}

/// Sample skewness `<(m-μ)³> / σ³`.
pub fn skewness(series: &[f64]) -> f64 {
    let (s1, s2, s3) = series
        .iter()
        .fold((0.0, 0.0, 0.0), |(a, b, c), &m| (a + m, b + m * m, c + m * m * m));
    skewness_from_moments(series.len() as f64, s1, s2, s3)
}

/// Leave-one-block-out jackknife of a statistic built from per-block power
/// sums `Σm^p, p = 0..=P`. Returns `(full-sample value, error)`.
fn block_jackknife<const P: usize>(series: &[f64], blocks: usize, stat: impl Fn(&[f64; P]) -> f64) -> Result<(f64, f64)> {
    if blocks < 2 || series.len() < blocks {
        return Err(Error::SeriesTooShort { len: series.len(), min: blocks.max(2) });
    }
    let size = series.len() / blocks;
    let mut sums = vec![[0.0; P]; blocks];
    for (b, chunk) in series.chunks_exact(size).take(blocks).enumerate() {
        for &m in chunk {
            let mut x = 1.0;
            for slot in sums[b].iter_mut() {
                *slot += x;
                x *= m;
            }
        }
    }
    let mut total = [0.0; P];
    for s in &sums {
        for p in 0..P {
            total[p] += s[p];
        }
    }
    let full = stat(&total);
    let leave: Vec<f64> = sums
        .iter()
        .map(|s| {
            let mut t = total;
            for p in 0..P {
                t[p] -= s[p];
            }
            stat(&t)
        })
        .collect();
    let lbar = mean(&leave);
    let b = blocks as f64;
    let var = (b - 1.0) / b * leave.iter().map(|x| (x - lbar).powi(2)).sum::<f64>();
    Ok((full, var.sqrt()))
}

/// Skewness with a block-jackknife error bar.
pub fn skewness_with_error(series: &[f64], blocks: usize) -> Result<(f64, f64)> {
    block_jackknife::<4>(series, blocks, |s| skewness_from_moments(s[0], s[1], s[2], s[3]))
}

/// Binder cumulant with a block-jackknife error bar.
pub fn binder_with_error(series: &[f64], blocks: usize) -> Result<(f64, f64)> {
    block_jackknife::<5>(series, blocks, |s| binder_from_moments(s[2] / s[0], s[4] / s[0]))
}

/// One blocking level: block size and the naive standard error at that size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockLevel {
    pub block_size: usize,
    pub blocks: usize,
    pub error: f64,
    /// Statistical uncertainty of `error` itself.
    pub error_of_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinnedEstimate {
    pub mean: f64,
    pub error: f64,
    pub tau_int: f64,
    pub levels: Vec<BlockLevel>,
    /// False when no blocking plateau was found before blocks ran out.
    pub converged: bool,
}

/// Integrated autocorrelation time `1 + 2Σρ(t)` with self-consistent window
/// `W ≥ 6 τ_int(W)`.
pub fn integrated_autocorrelation(series: &[f64]) -> f64 {
    let n = series.len();
    let mu = mean(series);
    let c0 = series.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 || n < 2 {
        return 1.0;
    }
    let mut tau = 1.0;
    for t in 1..n / 2 {
        let ct = series[..n - t]
            .iter()
            .zip(&series[t..])
            .map(|(a, b)| (a - mu) * (b - mu))
            .sum::<f64>()
            / (n - t) as f64;
        tau += 2.0 * ct / c0;
        if t as f64 >= 6.0 * tau {
            break;
        }
    }
    tau.max(1.0)
}

/// Logarithmic blocking of a correlated series.
pub fn blocked_errors(series: &[f64]) -> Result<BinnedEstimate> {
    if series.len() < MIN_BLOCKING_LEN {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            min: MIN_BLOCKING_LEN,
        });
    }
    let mu = mean(series);
    let mut data = series.to_vec();
    let mut levels = Vec::new();
    let mut size = 1;
    while data.len() >= 32 {
        let n = data.len() as f64;
        let var = data.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0);
        let error = (var / n).sqrt();
        levels.push(BlockLevel {
            block_size: size,
            blocks: data.len(),
            error,
            error_of_error: error / (2.0 * (n - 1.0)).sqrt(),
        });
        data = data.chunks_exact(2).map(|c| 0.5 * (c[0] + c[1])).collect();
        size *= 2;
    }
    let plateau = (0..levels.len()).find(|&k| {
        levels[k + 1..]
            .iter()
            .all(|l| levels[k].error >= l.error - 1.5 * l.error_of_error)
    });
    let last = levels.len() - 1;
    let (error, converged) = match plateau {
        Some(k) => (levels[k].error, k + 2 <= last),
        None => (levels[last].error, false),
    };
    let converged = converged || error == 0.0;
    Ok(BinnedEstimate {
        mean: mu,
        error,
        tau_int: integrated_autocorrelation(series),
        levels,
        converged,
    })
}

/// Per-chain sample streams and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainRecord {
    pub chain_id: u64,
    pub seed: u64,
    pub sweeps: u64,
    pub m_z: Vec<f64>,
    /// Kinks not attached to a boson line, summed over sites.
    pub free_kinks: Vec<u32>,
    pub lines: Vec<u32>,
    pub counters: MoveCounters,
}

/// The merged output of one QMC run.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub params: ModelParams,
    pub lattice: LatticeParams,
    pub schedule: SamplerSchedule,
    pub branch: KernelBranch,
    pub chains: Vec<ChainRecord>,
    pub bin_width: f64,
}

impl RunRecord {
    /// All chains' `m_Z` samples, chain after chain.
    pub fn m_z(&self) -> Vec<f64> {
        self.chains.iter().flat_map(|c| c.m_z.iter().copied()).collect()
    }

    pub fn histogram(&self) -> Histogram {
        let mut h = Histogram::new(self.bin_width).expect("bin width validated by schedule");
        self.chains.iter().flat_map(|c| &c.m_z).for_each(|&m| h.add(m));
        h
    }

    /// `<σ^x>` per site from the free-kink count, for `H_S = +Δ/2 Σσ^x`.
    pub fn sigma_x(&self) -> Vec<f64> {
        let scale = -2.0 / (self.lattice.beta * self.params.delta * self.lattice.length as f64);
        self.chains
            .iter()
            .flat_map(|c| c.free_kinks.iter().map(move |&k| scale * k as f64))
            .collect()
    }

    /// `<H_SB>` per site from the boson-line count.
    pub fn coupling_energy(&self) -> Vec<f64> {
        let scale = -2.0 / (self.lattice.beta * self.lattice.length as f64);
        self.chains
            .iter()
            .flat_map(|c| c.lines.iter().map(move |&k| scale * k as f64))
            .collect()
    }

    pub fn estimate_m_z(&self) -> Result<BinnedEstimate> {
        blocked_errors(&self.m_z())
    }
}

/// Where two Binder curves cross, by linear interpolation of their
/// difference. Takes the first sign change from the small system above to
/// the large one above.
pub fn curve_crossing(j_grid: &[f64], small: &[f64], large: &[f64]) -> Option<f64> {
    let diff: Vec<f64> = large.iter().zip(small).map(|(l, s)| l - s).collect();
    (1..j_grid.len()).find_map(|k| {
        let (a, b) = (diff[k - 1], diff[k]);
        (a <= 0.0 && b > 0.0).then(|| j_grid[k - 1] + (j_grid[k] - j_grid[k - 1]) * a / (a - b))
    })
}

/// Mean crossing over adjacent size pairs. `curves[s][g]` is the cumulant of
/// size `s` at grid point `g`, sizes ascending.
pub fn locate_crossing(j_grid: &[f64], curves: &[Vec<f64>]) -> Option<(f64, Vec<f64>)> {
    let pairs: Vec<f64> = curves
        .windows(2)
        .filter_map(|w| curve_crossing(j_grid, &w[0], &w[1]))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    Some((mean(&pairs), pairs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossingEstimate {
    pub j_c: f64,
    pub error: f64,
    /// Crossing of each adjacent size pair that has one.
    pub pair_crossings: Vec<f64>,
    /// Bootstrap resamples that produced a crossing.
    pub resamples_used: usize,
}

/// Block-bootstrap uncertainty of the crossing. `series[s][g]` holds the
/// `m_Z` stream of size `s` at grid point `g`.
pub fn bootstrap_crossing(
    j_grid: &[f64],
    series: &[Vec<Vec<f64>>],
    resamples: usize,
    blocks: usize,
    seed: u64,
) -> Result<CrossingEstimate> {
    let curves: Vec<Vec<f64>> = series
        .iter()
        .map(|per_j| per_j.iter().map(|s| binder_cumulant(s)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let (j_c, pair_crossings) = locate_crossing(j_grid, &curves).ok_or(Error::NoBracket)?;

    // per-block (m², m⁴) sums
    let sums: Vec<Vec<Vec<(f64, f64, f64)>>> = series
        .iter()
        .map(|per_j| {
            per_j
                .iter()
                .map(|s| {
                    let size = (s.len() / blocks).max(1);
                    s.chunks(size)
                        .map(|c| {
                            let m2: f64 = c.iter().map(|m| m * m).sum();
                            let m4: f64 = c.iter().map(|m| m.powi(4)).sum();
                            (c.len() as f64, m2, m4)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let curves: Vec<Vec<f64>> = sums
            .iter()
            .map(|per_j| {
                per_j
                    .iter()
                    .map(|b| {
                        let (mut n, mut m2, mut m4) = (0.0, 0.0, 0.0);
                        for _ in 0..b.len() {
                            let (bn, b2, b4) = b[rng.random_range(0..b.len())];
                            n += bn;
                            m2 += b2;
                            m4 += b4;
                        }
                        binder_from_moments(m2 / n, m4 / n)
                    })
                    .collect()
            })
            .collect();
        if let Some((jc, _)) = locate_crossing(j_grid, &curves) {
            samples.push(jc);
        }
    }
    let error = if samples.len() > 1 {
        let mu = mean(&samples);
        (samples.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (samples.len() - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(CrossingEstimate {
        j_c,
        error,
        pair_crossings,
        resamples_used: samples.len(),
    })
}

/// Everything a Binder scan needs besides the grid and the sizes.
#[derive(Clone, Debug)]
pub struct ScanSettings {
    pub model: ModelParams,
    /// Trotter slice width; `N = ceil(β/τ)`.
    pub slice_width: f64,
    /// `β / L`
    pub aspect_ratio: f64,
    pub schedule: SamplerSchedule,
    pub options: RunOptions,
    pub bootstrap_resamples: usize,
    pub bootstrap_blocks: usize,
}

/// One `(J, L)` grid point of a scan.
#[derive(Clone, Debug)]
pub struct ScanPoint {
    pub j: f64,
    pub length: usize,
    pub beta: f64,
    pub slices: usize,
    pub binder: f64,
    pub binder_error: f64,
    pub m_abs: f64,
    pub record: RunRecord,
}

/// Runs QMC on every `(J, L)` pair with `β = aspect·L` and locates the
/// Binder crossing. Returns the points even when no crossing is bracketed.
pub fn critical_scan(
    j_grid: &[f64],
    sizes: &[usize],
    settings: &ScanSettings,
) -> Result<(Result<CrossingEstimate>, Vec<ScanPoint>)> {
    if sizes.len() < 2 || j_grid.len() < 2 {
        return Err(Error::InvalidParameter("a scan needs at least two sizes and two couplings".into()));
    }
    if !j_grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidParameter("coupling grid must be strictly increasing".into()));
    }
    let tasks: Vec<(usize, usize)> = (0..sizes.len())
        .flat_map(|s| (0..j_grid.len()).map(move |g| (s, g)))
        .collect();
    let points: Vec<ScanPoint> = tasks
        .par_iter()
        .map(|&(s, g)| {
            let l = sizes[s];
            let beta = settings.aspect_ratio * l as f64;
            let lat = LatticeParams::with_slice_width(l, beta, settings.slice_width)?;
            let p = ModelParams {
                j_coupling: j_grid[g],
                ..settings.model.clone()
            };
            let mut schedule = settings.schedule.clone();
            schedule.seed = settings.schedule.seed.wrapping_add(1000 * s as u64 + g as u64);
            let record = qmc::run(&p, &lat, &schedule, &settings.options)?;
            let m = record.m_z();
            let (binder, binder_error) = binder_with_error(&m, settings.bootstrap_blocks.max(2))?;
            Ok(ScanPoint {
                j: j_grid[g],
                length: l,
                beta,
                slices: lat.slices,
                binder,
                binder_error,
                m_abs: m.iter().map(|x| x.abs()).sum::<f64>() / m.len() as f64,
                record,
            })
        })
        .collect::<Result<_>>()?;
    let series: Vec<Vec<Vec<f64>>> = (0..sizes.len())
        .map(|s| (0..j_grid.len()).map(|g| points[s * j_grid.len() + g].record.m_z()).collect())
        .collect();
    let crossing = bootstrap_crossing(
        j_grid,
        &series,
        settings.bootstrap_resamples,
        settings.bootstrap_blocks,
        settings.schedule.seed ^ 0x5eed,
    );
    Ok((crossing, points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Boundary;
    use crate::worldline::{BosonLineSet, SpinWorldline};
    use rand_chacha::rand_core::RngCore;

    fn gaussian<R: Rng>(rng: &mut R) -> f64 {
        // Box-Muller
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn magnetization_examples() {
        let up = Configuration {
            spins: SpinWorldline::all_up(3, 4, Boundary::Periodic),
            lines: BosonLineSet::new(3, 4),
        };
        assert_eq!(magnetization_z(&up), 1.0);
        let mut half = up.clone();
        for j in 0..2 {
            for i in 0..3 {
                half.spins.set(i, j, -1);
            }
        }
        assert_eq!(magnetization_z(&half), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spins: Vec<i8> = (0..35).map(|_| if rng.next_u32() & 1 == 1 { 1 } else { -1 }).collect();
        let cfg = Configuration {
            spins: SpinWorldline::from_spins(5, 7, Boundary::Periodic, spins),
            lines: BosonLineSet::new(5, 7),
        };
        let mut naive = 0.0;
        for i in 0..5 {
            for j in 0..7 {
                naive += cfg.spins.get(i, j) as f64;
            }
        }
        assert!((magnetization_z(&cfg) - naive / 35.0).abs() < 1e-15);
    }

    #[test]
    fn histogram_examples() {
        let h = Histogram::from_series(&[0.3; 50], 0.05).unwrap();
        assert_eq!(h.occupied_bins(), 1);
        assert_eq!(h.total(), 50);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let a = Histogram::from_series(&s, 0.05).unwrap();
        let b = Histogram::from_series(&neg, 0.05).unwrap();
        assert_eq!(a.mirrored(), b);
        assert!(matches!(Histogram::from_series(&[], 0.05), Err(Error::SeriesTooShort { .. })));

        let centers = a.centers();
        assert!((centers[centers.len() / 2]).abs() < 1e-15);
        assert!((a.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_peaks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mono: Vec<f64> = (0..20000).map(|_| 0.15 * gaussian(&mut rng)).collect();
        let bi: Vec<f64> = (0..20000)
            .map(|_| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * 0.6 + 0.1 * gaussian(&mut rng)
            })
            .collect();
        let pm = Histogram::from_series(&mono, 0.05).unwrap().peaks(0.8);
        let pb = Histogram::from_series(&bi, 0.05).unwrap().peaks(0.8);
        assert_eq!(pm.len(), 1, "{pm:?}");
        assert!(pm[0].abs() < 0.1);
        assert_eq!(pb.len(), 2, "{pb:?}");
        assert!((pb[0] + 0.6).abs() < 0.1 && (pb[1] - 0.6).abs() < 0.1);
    }

    #[test]
    fn binder_examples() {
        let pm: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!((binder_cumulant(&pm).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: Vec<f64> = (0..400_000).map(|_| gaussian(&mut rng)).collect();
        let (u, err) = binder_with_error(&g, 50).unwrap();
        assert!(u.abs() < 4.0 * err.max(1e-3), "{u} ± {err}");
        assert!(matches!(binder_cumulant(&[0.0; 10]), Err(Error::ZeroSecondMoment)));
    }

    #[test]
    fn blocking_on_independent_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<f64> = (0..1 << 16).map(|_| gaussian(&mut rng)).collect();
        let est = blocked_errors(&s).unwrap();
        let naive = est.levels[0].error;
        for l in &est.levels {
            assert!((l.error - naive).abs() < 4.0 * l.error_of_error + 1e-12, "{l:?}");
        }
        assert!(est.converged);
        assert!((est.tau_int - 1.0).abs() < 0.15);
    }

    #[test]
    fn blocking_ar1_calibration() {
        let rho: f64 = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut x = 0.0;
        let s: Vec<f64> = (0..1 << 20)
            .map(|_| {
                x = rho * x + (1.0 - rho * rho).sqrt() * gaussian(&mut rng);
                x
            })
            .collect();
        let est = blocked_errors(&s).unwrap();
        let exact = (1.0 + rho) / (1.0 - rho);
        assert!((est.tau_int / exact - 1.0).abs() < 0.2, "tau_int {}", est.tau_int);
        let predicted = (exact / s.len() as f64).sqrt();
        assert!((est.error / predicted - 1.0).abs() < 0.2, "{} vs {predicted}", est.error);
        assert!(est.converged);
    }

    #[test]
    fn blocking_edge_cases() {
        let est = blocked_errors(&[0.25; 128]).unwrap();
        assert_eq!(est.error, 0.0);
        assert_eq!(est.mean, 0.25);
        assert!(matches!(blocked_errors(&[1.0; 10]), Err(Error::SeriesTooShort { len: 10, min: 64 })));
    }

    #[test]
    fn skewness_of_symmetric_and_skewed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g: Vec<f64> = (0..100_000).map(|_| gaussian(&mut rng)).collect();
        let (sk, err) = skewness_with_error(&g, 50).unwrap();
        assert!(sk.abs() < 3.0 * err + 1e-3, "{sk} ± {err}");
        let e: Vec<f64> = (0..100_000).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let (sk, err) = skewness_with_error(&e, 50).unwrap();
        assert!((sk - 2.0).abs() < 5.0 * err, "{sk} ± {err}");
        assert!((skewness(&e) - sk).abs() < 1e-12);
    }

    #[test]
    fn crossing_by_interpolation() {
        let j = [1.0, 2.0, 3.0];
        let small = [0.2, 0.4, 0.5];
        let large = [0.1, 0.4, 0.6];
        // diff = -0.1, 0.0, 0.1 → first positive step between 2 and 3 starting at 0
        let c = curve_crossing(&j, &small, &large).unwrap();
        assert!((c - 2.0).abs() < 1e-12);
        let large = [0.1, 0.45, 0.6];
        let c = curve_crossing(&j, &small, &large).unwrap();
        assert!((c - (1.0 + 0.1 / 0.15)).abs() < 1e-12);
        assert!(curve_crossing(&j, &large, &small).is_none());
        assert!(locate_crossing(&j, &[small.to_vec()]).is_none());
    }

    #[test]
    fn bootstrap_recovers_synthetic_crossing() {
        // noisy ±order mixtures whose order parameter sharpens with size around 2.0
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = [1.6, 1.8, 2.0, 2.2, 2.4];
        let make = |l: f64, j: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let order = 0.8 / (1.0 + (-2.0 * (j - 2.0) * l).exp());
            (0..4000)
                .map(|_| {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * order + 0.25 * gaussian(rng)
                })
                .collect()
        };
        let series: Vec<Vec<Vec<f64>>> = [2.0, 4.0]
            .iter()
            .map(|&l| grid.iter().map(|&j| make(l, j, &mut rng)).collect())
            .collect();
        let est = bootstrap_crossing(&grid, &series, 200, 40, 9).unwrap();
        assert!((est.j_c - 2.0).abs() < 0.1, "{est:?}");
        assert!(est.error.is_finite() && est.resamples_used > 100);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn histogram_is_a_mirrorable_probability_mass(series in prop::collection::vec(-1.0f64..=1.0, 1..400), width in 0.01f64..0.5) {
                let h = Histogram::from_series(&series, width).unwrap();
                prop_assert_eq!(h.total() as usize, series.len());
                let mass: f64 = h.probabilities().iter().sum();
                prop_assert!((mass - 1.0).abs() < 1e-12);
                let negated: Vec<f64> = series.iter().map(|m| -m).collect();
                let g = Histogram::from_series(&negated, width).unwrap();
                let mirrored = h.mirrored();
                prop_assert_eq!(mirrored.counts(), g.counts());
            }

            #[test]
            fn binder_is_sign_and_scale_invariant(series in prop::collection::vec(0.05f64..1.0, 2..200), flips in prop::collection::vec(any::<bool>(), 200), scale in 0.1f64..10.0) {
                let signed: Vec<f64> = series.iter().zip(&flips).map(|(m, &f)| if f { -m } else { *m }).collect();
                let scaled: Vec<f64> = series.iter().map(|m| m * scale).collect();
                let u = binder_cumulant(&series).unwrap();
                prop_assert!((u - binder_cumulant(&signed).unwrap()).abs() < 1e-12);
                prop_assert!((u - binder_cumulant(&scaled).unwrap()).abs() < 1e-10);
                prop_assert!(u <= 2.0 / 3.0 + 1e-12);
            }

            #[test]
            fn blocked_error_is_scale_covariant(seed in any::<u64>(), len in 64usize..2000, scale in 0.1f64..10.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x: Vec<f64> = (0..len).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
                let y: Vec<f64> = x.iter().map(|v| scale * v + 3.0).collect();
                let (a, b) = (blocked_errors(&x).unwrap(), blocked_errors(&y).unwrap());
                prop_assert!((b.mean - (scale * a.mean + 3.0)).abs() < 1e-9 * (1.0 + b.mean.abs()));
                prop_assert!((b.error - scale * a.error).abs() <= 1e-9 * b.error.max(1e-12));
            }
        }
    }
}

//! Subcommand drivers. Every table is comma-separated under a commented
//! header naming the columns and the config hash.

use crate::config::{ExperimentConfig, GridPoint, SolverChoice};
use anyhow::{Context, Result};
use rayon::prelude::*;
use spinbath::kernel::KernelTable;
use spinbath::observables::{binder_with_error, blocked_errors, bootstrap_crossing, BinnedEstimate};
use spinbath::oracle::{ground_observables, thermal_observables};
use spinbath::qmc::{run, CheckpointPolicy, MoveKind, RunOptions};
use spinbath::vmf::chain_mean_field;
use spinbath::{MeanFieldSolver, RunRecord, TruncatedHilbertSpec};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub struct RunContext {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub resume: bool,
    pub jobs: usize,
    pub started: Instant,
}

struct Table {
    path: PathBuf,
    body: String,
}

impl Table {
    fn new(dir: &Path, name: &str, hash: &str, columns: &str) -> Self {
        let mut body = String::new();
        writeln!(body, "# config_hash={hash}").unwrap();
        writeln!(body, "# {columns}").unwrap();
        Table {
            path: dir.join(name),
            body,
        }
    }

    fn row(&mut self, fields: &[String]) {
        self.body.push_str(&fields.join(","));
        self.body.push('\n');
    }

    fn save(self) -> Result<PathBuf> {
        std::fs::write(&self.path, self.body).with_context(|| format!("writing {}", self.path.display()))?;
        Ok(self.path)
    }
}

fn num(x: f64) -> String {
    format!("{x:.10e}")
}

fn point_fields(p: &GridPoint) -> Vec<String> {
    vec![num(p.j), num(p.gamma), num(p.alpha), p.length.to_string(), num(p.beta)]
}

const POINT_COLUMNS: &str = "j,gamma,alpha,length,beta";

/// Seed of grid point `k`; points never share a generator stream.
fn point_seed(base: u64, k: usize) -> u64 {
    base.wrapping_add((k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn qmc_point(ctx: &RunContext, k: usize, point: &GridPoint) -> Result<RunRecord> {
    let cfg = &ctx.config;
    let p = cfg.model_params_at(point)?;
    let lat = cfg.lattice_params(point.length, point.beta)?;
    let mut schedule = cfg.sampler_schedule();
    schedule.seed = point_seed(schedule.seed, k);
    let opts = RunOptions {
        branch: cfg.kernel_branch(),
        tol: cfg.model.quadrature_tol,
        checkpoint: Some(CheckpointPolicy {
            dir: ctx.out.join(format!("checkpoints-{}", cfg.hash())).join(format!("point-{k}")),
            every: cfg.schedule.checkpoint_every,
            resume: ctx.resume,
            params_hash: cfg.hash_u64() ^ k as u64,
        }),
    };
    run(&p, &lat, &schedule, &opts).with_context(|| format!("QMC at grid point {k} {point:?}"))
}

struct Summary {
    m_z: BinnedEstimate,
    abs_m: BinnedEstimate,
    m2: BinnedEstimate,
    sigma_x: BinnedEstimate,
    coupling: BinnedEstimate,
    binder: (f64, f64),
}

fn summarize(rec: &RunRecord, blocks: usize) -> Result<Summary> {
    let m = rec.m_z();
    let abs: Vec<f64> = m.iter().map(|x| x.abs()).collect();
    let sq: Vec<f64> = m.iter().map(|x| x * x).collect();
    Ok(Summary {
        m_z: blocked_errors(&m)?,
        abs_m: blocked_errors(&abs)?,
        m2: blocked_errors(&sq)?,
        sigma_x: blocked_errors(&rec.sigma_x())?,
        coupling: blocked_errors(&rec.coupling_energy())?,
        binder: binder_with_error(&m, blocks).unwrap_or((f64::NAN, f64::NAN)),
    })
}

fn acceptance_note(rec: &RunRecord) -> String {
    let mut merged = rec.chains[0].counters;
    for c in &rec.chains[1..] {
        merged.merge(&c.counters);
    }
    MoveKind::ALL
        .iter()
        .map(|&k| format!("{}={:.4}", k.name(), merged.acceptance(k)))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn qmc_run(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.config;
    let hash = cfg.hash();
    let point = cfg.base_point();
    let rec = qmc_point(ctx, 0, &point)?;
    let s = summarize(&rec, cfg.scan.bootstrap_blocks)?;
    let mut table = Table::new(
        &ctx.out,
        &format!("run-{hash}.csv"),
        &hash,
        &format!("{POINT_COLUMNS},slices,observable,mean,error,tau_int"),
    );
    let mut head = point_fields(&point);
    head.push(rec.lattice.slices.to_string());
    for (name, e) in [
        ("m_z", &s.m_z),
        ("abs_m_z", &s.abs_m),
        ("m_z_squared", &s.m2),
        ("sigma_x", &s.sigma_x),
        ("coupling_energy", &s.coupling),
    ] {
        let mut row = head.clone();
        row.extend([name.to_string(), num(e.mean), num(e.error), num(e.tau_int)]);
        table.row(&row);
    }
    let mut row = head.clone();
    row.extend(["binder".to_string(), num(s.binder.0), num(s.binder.1), String::new()]);
    table.row(&row);

    let hist_path = ctx.out.join(format!("hist-{hash}.csv"));
    rec.histogram()
        .write_table(BufWriter::new(File::create(&hist_path)?), &hash)
        .with_context(|| format!("writing {}", hist_path.display()))?;
    let mut files = vec![table.save()?, hist_path];
    files.push(manifest(ctx, "run", &[format!("acceptance {}", acceptance_note(&rec))])?);
    Ok(files)
}

pub fn qmc_scan(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.config;
    let hash = cfg.hash();
    let grid = cfg.grid();
    let records: Vec<RunRecord> = grid
        .par_iter()
        .enumerate()
        .map(|(k, p)| qmc_point(ctx, k, p))
        .collect::<Result<_>>()?;
    let mut table = Table::new(
        &ctx.out,
        &format!("scan-{hash}.csv"),
        &hash,
        &format!(
            "point,{POINT_COLUMNS},slices,m_z,m_z_error,tau_int,abs_m_z,abs_m_z_error,m_z_squared,m_z_squared_error,binder,binder_error,sigma_x,sigma_x_error,coupling_energy,coupling_energy_error"
        ),
    );
    let mut files = Vec::new();
    for (k, (p, rec)) in grid.iter().zip(&records).enumerate() {
        let s = summarize(rec, cfg.scan.bootstrap_blocks)?;
        let mut row = vec![k.to_string()];
        row.extend(point_fields(p));
        row.push(rec.lattice.slices.to_string());
        row.extend([s.m_z.mean, s.m_z.error, s.m_z.tau_int, s.abs_m.mean, s.abs_m.error, s.m2.mean, s.m2.error]
            .map(num));
        row.extend([s.binder.0, s.binder.1, s.sigma_x.mean, s.sigma_x.error, s.coupling.mean, s.coupling.error].map(num));
        table.row(&row);
        let hist_path = ctx.out.join(format!("hist-{hash}-{k}.csv"));
        rec.histogram().write_table(BufWriter::new(File::create(&hist_path)?), &hash)?;
        files.push(hist_path);
    }
    files.insert(0, table.save()?);
    let mut notes = Vec::new();
    if let Some(path) = crossing_table(ctx, &grid, &records, &mut notes)? {
        files.push(path);
    }
    files.push(manifest(ctx, "scan", &notes)?);
    Ok(files)
}

/// Binder crossing when the grid varies exactly `J` and `L`.
fn crossing_table(ctx: &RunContext, grid: &[GridPoint], records: &[RunRecord], notes: &mut Vec<String>) -> Result<Option<PathBuf>> {
    let cfg = &ctx.config;
    let Some(sw) = &cfg.sweep else { return Ok(None) };
    let (Some(js), Some(ls)) = (&sw.j, &sw.length) else { return Ok(None) };
    let single = |a: &Option<Vec<f64>>| a.as_ref().is_none_or(|v| v.len() == 1);
    if js.len() < 2 || ls.len() < 2 || !single(&sw.gamma) || !single(&sw.alpha) || !single(&sw.beta) {
        return Ok(None);
    }
    if !js.windows(2).all(|w| w[0] < w[1]) || !ls.windows(2).all(|w| w[0] < w[1]) {
        notes.push("crossing skipped: J and L axes must be increasing".into());
        return Ok(None);
    }
    let series: Vec<Vec<Vec<f64>>> = (0..ls.len())
        .map(|s| (0..js.len()).map(|g| records[s * js.len() + g].m_z()).collect())
        .collect();
    debug_assert_eq!(grid.len(), ls.len() * js.len());
    let hash = cfg.hash();
    match bootstrap_crossing(js, &series, cfg.scan.bootstrap_resamples, cfg.scan.bootstrap_blocks, cfg.schedule.seed ^ 0x5eed) {
        Ok(c) => {
            let mut table = Table::new(&ctx.out, &format!("crossing-{hash}.csv"), &hash, "pair,j_c,error,resamples_used");
            table.row(&["mean".into(), num(c.j_c), num(c.error), c.resamples_used.to_string()]);
            for (k, x) in c.pair_crossings.iter().enumerate() {
                table.row(&[k.to_string(), num(*x), String::new(), String::new()]);
            }
            Ok(Some(table.save()?))
        }
        Err(e) => {
            notes.push(format!("crossing not located: {e}"));
            Ok(None)
        }
    }
}

pub fn vmf_sweep(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.config;
    let hash = cfg.hash();
    let solver = match cfg.vmf.solver {
        SolverChoice::Polaron => MeanFieldSolver::Polaron,
        SolverChoice::Variational => MeanFieldSolver::Variational(cfg.vmf.basis_size),
    };
    let mut grid = cfg.grid();
    grid.dedup_by(|a, b| (a.j, a.gamma, a.alpha) == (b.j, b.gamma, b.alpha));
    let results: Vec<_> = grid
        .par_iter()
        .map(|point| {
            let p = cfg.model_params_at(point)?;
            chain_mean_field(&p, solver).with_context(|| format!("mean field at {point:?}"))
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(
        &ctx.out,
        &format!("vmf-{hash}.csv"),
        &hash,
        "j,gamma,alpha,branch,seed,m_z,m_x,energy_per_site,iterations,residual,chosen",
    );
    for (point, branches) in grid.iter().zip(&results) {
        for (b, s) in branches.iter().enumerate() {
            table.row(&[
                num(point.j),
                num(point.gamma),
                num(point.alpha),
                b.to_string(),
                num(s.branch),
                num(s.m_z),
                num(s.m_x),
                num(s.energy_per_site),
                s.iterations.to_string(),
                num(s.residual),
                u8::from(b == 0).to_string(),
            ]);
        }
    }
    Ok(vec![table.save()?, manifest(ctx, "vmf", &[])?])
}

pub fn oracle_ed(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.config;
    let hash = cfg.hash();
    let o = &cfg.oracle;
    let mut spec = TruncatedHilbertSpec::single_site(o.boson_cutoff).with_sites(o.sites);
    if let Some(t) = o.total_cutoff {
        spec = spec.with_total_cutoff(t);
    }
    let grid = cfg.grid();
    let rows: Vec<Vec<String>> = grid
        .par_iter()
        .map(|point| {
            let p = cfg.model_params_at(point)?;
            let dim = spec.dimension(p.modes().map_or(0, |m| m.len()));
            let (energy, sz, sx, coupling, n) = if o.thermal {
                let t = thermal_observables(&spec, &p, point.beta)?;
                (t.energy, t.sigma_z[0], t.sigma_x[0], t.coupling_energy, t.boson_number)
            } else {
                let g = ground_observables(&spec, &p)?;
                (g.energy, g.sigma_z[0], g.sigma_x[0], g.coupling_energy, g.boson_number)
            };
            let mut row = vec![num(point.j), num(point.gamma), num(point.alpha)];
            row.push(if o.thermal { num(point.beta) } else { "inf".into() });
            row.push(dim.to_string());
            row.extend([energy, sz, sx, coupling, n].map(num));
            Ok(row)
        })
        .collect::<Result<_>>()
        .context("exact diagonalization")?;
    let mut table = Table::new(
        &ctx.out,
        &format!("oracle-{hash}.csv"),
        &hash,
        "j,gamma,alpha,beta,dimension,energy,sigma_z,sigma_x,coupling_energy,boson_number",
    );
    for row in &rows {
        table.row(row);
    }
    Ok(vec![table.save()?, manifest(ctx, "oracle", &[])?])
}

pub fn kernel_dump(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.config;
    let hash = cfg.hash();
    let grid = cfg.grid();
    let mut files = Vec::new();
    for (k, point) in grid.iter().enumerate() {
        let p = cfg.model_params_at(point)?;
        let lat = cfg.lattice_params(point.length, point.beta)?;
        let table = KernelTable::build(&lat, &p, cfg.model.quadrature_tol).with_context(|| format!("kernel at {point:?}"))?;
        let name = if grid.len() == 1 {
            format!("kernel-{hash}.csv")
        } else {
            format!("kernel-{hash}-{k}.csv")
        };
        let path = ctx.out.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        table.write_dump(&mut w, &hash)?;
        w.flush()?;
        files.push(path);
    }
    files.push(manifest(ctx, "kernel", &[])?);
    Ok(files)
}

/// The only file carrying timestamps and host details.
fn manifest(ctx: &RunContext, command: &str, notes: &[String]) -> Result<PathBuf> {
    let cfg = &ctx.config;
    let hash = cfg.hash();
    let path = ctx.out.join(format!("manifest-{command}-{hash}.txt"));
    let mut m = String::new();
    writeln!(m, "command = {command}")?;
    writeln!(m, "config_hash = {hash}")?;
    writeln!(m, "version = {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(m, "build = {} {} {}", std::env::consts::ARCH, std::env::consts::OS, if cfg!(debug_assertions) { "debug" } else { "release" })?;
    writeln!(m, "host = {}", host_name())?;
    writeln!(m, "jobs = {}", ctx.jobs)?;
    writeln!(m, "resume = {}", ctx.resume)?;
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    writeln!(m, "finished_unix = {now}")?;
    writeln!(m, "elapsed_seconds = {:.3}", ctx.started.elapsed().as_secs_f64())?;
    let seeds: Vec<String> = (0..cfg.grid().len()).map(|k| point_seed(cfg.schedule.seed, k).to_string()).collect();
    writeln!(m, "point_seeds = {}", seeds.join(" "))?;
    for n in notes {
        writeln!(m, "note = {n}")?;
    }
    writeln!(m, "\n# effective configuration\n{}", cfg.echo())?;
    std::fs::write(&path, m).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn host_name() -> String {
    std::env::var("HOSTNAME")
        .ok()
        .or_else(|| std::fs::read_to_string("/etc/hostname").ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

//! Strict experiment configuration.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spinbath::model::{discretize_bath, read_modes, Mode};
use spinbath::{BathKind, BinLayout, Boundary, InitialState, KernelBranch, LatticeParams, ModelParams, MoveMix, SamplerSchedule};
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "format_version")]
    pub format_version: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub lattice: LatticeBlock,
    #[serde(default)]
    pub schedule: ScheduleBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepBlock>,
    #[serde(default)]
    pub vmf: VmfBlock,
    #[serde(default)]
    pub oracle: OracleBlock,
    #[serde(default)]
    pub scan: ScanBlock,
}

fn format_version() -> u32 {
    FORMAT_VERSION
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BathChoice {
    Quantum,
    Classical,
    Discrete,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutChoice {
    Linear,
    LogLinear,
}

impl From<LayoutChoice> for BinLayout {
    fn from(l: LayoutChoice) -> Self {
        match l {
            LayoutChoice::Linear => BinLayout::Linear,
            LayoutChoice::LogLinear => BinLayout::LogLinear,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchChoice {
    AsPrinted,
    Swapped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub delta: f64,
    pub j: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub nu: f64,
    pub omega_c: f64,
    pub bath: BathChoice,
    /// Explicit `[omega, lambda]` pairs for a discrete bath.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modes: Vec<[f64; 2]>,
    /// Two-column mode file, read when `modes` is empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes_file: Option<PathBuf>,
    /// Discretize the continuum into this many modes when neither list is given.
    pub mode_count: usize,
    pub layout: LayoutChoice,
    pub kernel_branch: BranchChoice,
    pub quadrature_tol: f64,
}

impl Default for ModelBlock {
    fn default() -> Self {
        let p = ModelParams::default();
        ModelBlock {
            delta: p.delta,
            j: p.j_coupling,
            alpha: p.alpha,
            gamma: p.gamma,
            nu: p.nu,
            omega_c: p.omega_c,
            bath: BathChoice::Quantum,
            modes: Vec::new(),
            modes_file: None,
            mode_count: 32,
            layout: LayoutChoice::LogLinear,
            kernel_branch: BranchChoice::AsPrinted,
            quadrature_tol: spinbath::model::DEFAULT_TOL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryChoice {
    Periodic,
    Open,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeBlock {
    pub length: usize,
    pub beta: f64,
    /// Fixed slice count; otherwise derived from `slice_width`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slices: Option<usize>,
    pub slice_width: f64,
    pub boundary: BoundaryChoice,
}

impl Default for LatticeBlock {
    fn default() -> Self {
        LatticeBlock {
            length: 10,
            beta: 10.0,
            slices: None,
            slice_width: 0.1,
            boundary: BoundaryChoice::Periodic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartChoice {
    Up,
    Down,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleBlock {
    pub thermalization: u64,
    pub measurement: u64,
    pub measure_every: u64,
    pub clusters_per_sweep: u32,
    pub global_flip: bool,
    pub seed: u64,
    pub replicas: u32,
    pub start: StartChoice,
    pub bin_width: f64,
    /// Sweeps between checkpoints; 0 writes one at the end of each chain.
    pub checkpoint_every: u64,
    pub single_flip: f64,
    pub segment_flip: f64,
    pub line_update: f64,
    pub site_flip: f64,
}

impl Default for ScheduleBlock {
    fn default() -> Self {
        let s = SamplerSchedule::default();
        ScheduleBlock {
            thermalization: s.thermalization_sweeps,
            measurement: s.measurement_sweeps,
            measure_every: s.measure_every,
            clusters_per_sweep: s.clusters_per_sweep,
            global_flip: s.global_flip,
            seed: s.seed,
            replicas: s.replica_count,
            start: StartChoice::Up,
            bin_width: s.bin_width,
            checkpoint_every: 0,
            single_flip: s.move_mix.single_flip,
            segment_flip: s.move_mix.segment_flip,
            line_update: s.move_mix.line_update,
            site_flip: s.move_mix.site_flip,
        }
    }
}

/// Grid axes; absent axes take the value from the model and lattice blocks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    Polaron,
    Variational,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmfBlock {
    pub solver: SolverChoice,
    pub basis_size: usize,
}

impl Default for VmfBlock {
    fn default() -> Self {
        VmfBlock {
            solver: SolverChoice::Variational,
            basis_size: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleBlock {
    pub sites: usize,
    pub boson_cutoff: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_cutoff: Option<usize>,
    /// Thermal averages at `lattice.beta` instead of the ground state.
    pub thermal: bool,
}

impl Default for OracleBlock {
    fn default() -> Self {
        OracleBlock {
            sites: 1,
            boson_cutoff: 8,
            total_cutoff: None,
            thermal: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanBlock {
    /// `β / L` applied when the grid varies `L` but not `β`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aspect_ratio: Option<f64>,
    pub bootstrap_resamples: usize,
    pub bootstrap_blocks: usize,
}

impl Default for ScanBlock {
    fn default() -> Self {
        ScanBlock {
            aspect_ratio: None,
            bootstrap_resamples: 200,
            bootstrap_blocks: 20,
        }
    }
}

/// Reads a config file, applies `key=value` overrides with dotted keys and
/// validates the result.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let origin = path.map_or("<defaults>".to_string(), |p| p.display().to_string());
    let mut table: toml::Table = text.parse().with_context(|| format!("parsing {origin}"))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = table.try_into().with_context(|| format!("in {origin}"))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for part in path {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override `{key}`: `{part}` is not a table"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            bail!("format_version {} is not supported (expected {FORMAT_VERSION})", self.format_version);
        }
        self.model_params().context("model")?;
        self.lattice_params(self.lattice.length, self.lattice.beta).context("lattice")?;
        self.sampler_schedule().validate().context("schedule")?;
        let m = &self.model;
        if !(m.quadrature_tol > 0.0 && m.quadrature_tol < 1.0) {
            bail!("model.quadrature_tol must lie in (0, 1), got {}", m.quadrature_tol);
        }
        if !m.modes.is_empty() && m.modes_file.is_some() {
            bail!("model.modes and model.modes_file are mutually exclusive");
        }
        if m.bath == BathChoice::Discrete && m.mode_count == 0 && m.modes.is_empty() && m.modes_file.is_none() {
            bail!("model.mode_count must be positive for a discrete bath");
        }
        if self.vmf.basis_size == 0 {
            bail!("vmf.basis_size must be at least 1");
        }
        if let Some(sw) = &self.sweep {
            let check = |name: &str, axis: &Option<Vec<f64>>| -> Result<()> {
                if let Some(v) = axis {
                    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                        bail!("sweep.{name} must be a non-empty list of finite numbers");
                    }
                }
                Ok(())
            };
            check("j", &sw.j)?;
            check("gamma", &sw.gamma)?;
            check("alpha", &sw.alpha)?;
            check("beta", &sw.beta)?;
            if sw.length.as_ref().is_some_and(|v| v.is_empty() || v.contains(&0)) {
                bail!("sweep.length must be a non-empty list of positive sizes");
            }
            for point in self.grid() {
                let p = self.model_params_at(&point).with_context(|| format!("sweep point {point:?}"))?;
                p.validate()?;
                self.lattice_params(point.length, point.beta).with_context(|| format!("sweep point {point:?}"))?;
            }
        }
        if let Some(r) = self.scan.aspect_ratio {
            if !(r > 0.0 && r.is_finite()) {
                bail!("scan.aspect_ratio must be positive");
            }
        }
        if self.scan.bootstrap_blocks < 2 {
            bail!("scan.bootstrap_blocks must be at least 2");
        }
        Ok(())
    }

    /// The bath modes as configured, before any sweep substitution.
    fn explicit_modes(&self) -> Result<Option<Vec<Mode>>> {
        if !self.model.modes.is_empty() {
            return Ok(Some(self.model.modes.iter().map(|&[omega, lambda]| Mode { omega, lambda }).collect()));
        }
        if let Some(path) = &self.model.modes_file {
            let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            return Ok(Some(read_modes(std::io::BufReader::new(file))?));
        }
        Ok(None)
    }

    pub fn model_params(&self) -> Result<ModelParams> {
        self.model_params_at(&self.base_point())
    }

    pub fn model_params_at(&self, point: &GridPoint) -> Result<ModelParams> {
        let m = &self.model;
        let p = ModelParams {
            delta: m.delta,
            j_coupling: point.j,
            alpha: point.alpha,
            gamma: point.gamma,
            nu: m.nu,
            omega_c: m.omega_c,
            bath: match m.bath {
                BathChoice::Quantum => BathKind::QuantumContinuum,
                BathChoice::Classical => BathKind::ClassicalLimit,
                BathChoice::Discrete => BathKind::QuantumContinuum,
            },
        };
        p.validate()?;
        if m.bath != BathChoice::Discrete {
            return Ok(p);
        }
        match self.explicit_modes()? {
            Some(modes) => {
                let q = p.with_bath(BathKind::DiscreteModes(modes));
                q.validate()?;
                Ok(q)
            }
            None => Ok(discretize_bath(&p, m.mode_count, m.layout.into())?),
        }
    }

    pub fn lattice_params(&self, length: usize, beta: f64) -> Result<LatticeParams> {
        let l = &self.lattice;
        let lat = match l.slices {
            Some(n) => LatticeParams::new(length, n, beta)?,
            None => LatticeParams::with_slice_width(length, beta, l.slice_width)?,
        };
        Ok(lat.with_boundary(match l.boundary {
            BoundaryChoice::Periodic => Boundary::Periodic,
            BoundaryChoice::Open => Boundary::Open,
        }))
    }

    pub fn sampler_schedule(&self) -> SamplerSchedule {
        let s = &self.schedule;
        SamplerSchedule {
            thermalization_sweeps: s.thermalization,
            measurement_sweeps: s.measurement,
            measure_every: s.measure_every,
            move_mix: MoveMix {
                single_flip: s.single_flip,
                segment_flip: s.segment_flip,
                line_update: s.line_update,
                site_flip: s.site_flip,
            },
            clusters_per_sweep: s.clusters_per_sweep,
            global_flip: s.global_flip,
            seed: s.seed,
            replica_count: s.replicas,
            initial: match s.start {
                StartChoice::Up => InitialState::AllUp,
                StartChoice::Down => InitialState::AllDown,
            },
            bin_width: s.bin_width,
        }
    }

    pub fn kernel_branch(&self) -> KernelBranch {
        match self.model.kernel_branch {
            BranchChoice::AsPrinted => KernelBranch::AsPrinted,
            BranchChoice::Swapped => KernelBranch::Swapped,
        }
    }

    /// The point given by the model and lattice blocks alone.
    pub fn base_point(&self) -> GridPoint {
        GridPoint {
            j: self.model.j,
            gamma: self.model.gamma,
            alpha: self.model.alpha,
            length: self.lattice.length,
            beta: self.lattice.beta,
        }
    }

    /// Cartesian product of the sweep axes, `L` outermost and `J` innermost.
    pub fn grid(&self) -> Vec<GridPoint> {
        let base = self.base_point();
        let Some(sw) = &self.sweep else {
            return vec![base];
        };
        let axis = |v: &Option<Vec<f64>>, default: f64| v.clone().unwrap_or_else(|| vec![default]);
        let lengths = sw.length.clone().unwrap_or_else(|| vec![base.length]);
        let betas = sw.beta.clone();
        let mut out = Vec::new();
        for &length in &lengths {
            let beta_axis = match (&betas, self.scan.aspect_ratio) {
                (Some(b), _) => b.clone(),
                (None, Some(r)) => vec![r * length as f64],
                (None, None) => vec![base.beta],
            };
            for &beta in &beta_axis {
                for &alpha in &axis(&sw.alpha, base.alpha) {
                    for &gamma in &axis(&sw.gamma, base.gamma) {
                        for &j in &axis(&sw.j, base.j) {
                            out.push(GridPoint {
                                j,
                                gamma,
                                alpha,
                                length,
                                beta,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Canonical TOML of the effective configuration.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical echo without the output directory,
    /// shortened to 16 characters.
    pub fn hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.output_dir = PathBuf::new();
        let digest = Sha256::digest(keyed.echo().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash_u64(&self) -> u64 {
        u64::from_str_radix(&self.hash(), 16).expect("hash is hex")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub j: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub length: usize,
    pub beta: f64,
}

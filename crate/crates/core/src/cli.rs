//! Configuration-driven experiment runner.
//!
//! A run reads a TOML scenario file, applies `BLOCHLAB_<SECTION>__<KEY>`
//! environment overrides, validates the result and dispatches one
//! subcommand. Every subcommand writes `<out>/<subcommand>.csv`, whose first
//! line is a provenance comment `# bloch-lab <version> config=<sha256>`.
//!
//! Exit codes: 0 success, 1 failed check or I/O error, 2 parse error,
//! 3 validation error, 4 numerical accuracy error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::basis::{PlaneWaveBasis, C64};
use crate::bloch::{auto_window, bloch_transform, inverse_bloch, KGrid, WindowedFunction};
use crate::classical::{gc_constant, GcOptions, TrigPotential};
use crate::error::{LabError, Result};
use crate::lattice::{gamma_bounds, CellGeometry, LatticeSpec};
use crate::observability::{
    c_bold, constant_pure, constant_toeplitz, hbar_threshold, std_dev_sqr, verify_pure_theorem,
    verify_toeplitz_theorem, ObservabilityScenario, TheoremReport,
};
use crate::par;
use crate::quantization::{
    husimi, observe_with_mask, periodic_trace, region_mask, toeplitz_quantize, FiberedDensity, PhaseGrid,
    PhaseSpaceDensity,
};
use crate::quantum::evolve_density;
use crate::region::{CellBox, PhaseBox, PhaseSet, Region};
use crate::states::{coherent_state, fiber_coherent, CoherentParams};
use crate::transport::{
    coupling_energy_husimi, coupling_energy_toeplitz, stability_envelope, CostParams, StabilityRun,
};

/// Prefix of environment-variable overrides.
pub const ENV_PREFIX: &str = "BLOCHLAB_";

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "bloch-lab", version, about = "Bloch-decomposed semiclassical transport experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario file (TOML).
    #[arg(long, global = true, env = "BLOCHLAB_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true, env = "BLOCHLAB_OUT")]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs the sequential path.
    #[arg(long, global = true, env = "BLOCHLAB_THREADS")]
    threads: Option<usize>,
    /// Multiplies every tolerance and error budget.
    #[arg(long, global = true, default_value_t = 1.0, env = "BLOCHLAB_TOLERANCE_SCALE")]
    tolerance_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Bloch isometry, round trip and coherent-state identity.
    BlochCheck,
    /// Density evolution with trace and observation time series.
    Evolve,
    /// Husimi density of the initial datum.
    Husimi,
    /// Coupling energies and their bounds.
    Metric,
    /// Stability envelope time series.
    Stability,
    /// Every constant of the scenario.
    Constants,
    /// Both sides of the observability inequality.
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::BlochCheck => "bloch-check",
            Command::Evolve => "evolve",
            Command::Husimi => "husimi",
            Command::Metric => "metric",
            Command::Stability => "stability",
            Command::Constants => "constants",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Counts {
    One(usize),
    Many(Vec<usize>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub lattice: Option<LatticeBlock>,
    #[serde(default)]
    pub potential: PotentialBlock,
    pub physics: Option<PhysicsBlock>,
    #[serde(default)]
    pub discretization: DiscretizationBlock,
    pub scenario: Option<ScenarioBlock>,
    pub initial: Option<InitialBlock>,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeBlock {
    pub basis: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialBlock {
    #[serde(default)]
    pub terms: Vec<TermSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    #[serde(alias = "G")]
    pub g: Vec<i64>,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsBlock {
    pub hbar: Option<f64>,
    pub lambda: Option<f64>,
    #[serde(alias = "T")]
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub lip: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationBlock {
    #[serde(alias = "M")]
    pub m: Option<usize>,
    #[serde(alias = "N_k")]
    pub n_k: Option<Counts>,
    #[serde(alias = "N_q")]
    pub n_q: Option<usize>,
    #[serde(alias = "N_p")]
    pub n_p: Option<usize>,
    pub p_max: Option<f64>,
    #[serde(alias = "L_cut")]
    pub l_cut: Option<usize>,
    pub time_steps: Option<usize>,
    pub stability_samples: Option<usize>,
    pub bloch_packets: Option<usize>,
    pub gc_grid: Option<usize>,
    pub gc_quasi_random: Option<usize>,
    pub gc_time_steps: Option<usize>,
    pub gc_dt: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseBoxSpec {
    pub x_lo: Option<Vec<f64>>,
    pub x_hi: Option<Vec<f64>>,
    pub p_lo: Vec<f64>,
    pub p_hi: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellBoxSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioBlock {
    #[serde(alias = "K")]
    pub k: Option<Vec<PhaseBoxSpec>>,
    #[serde(alias = "Omega")]
    pub omega: Option<Vec<CellBoxSpec>>,
    #[serde(default)]
    pub omega_full: bool,
    pub delta: Option<f64>,
    pub budget_scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialKind {
    Toeplitz,
    Pure,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialBlock {
    pub kind: Option<InitialKind>,
    pub q0: Option<Vec<f64>>,
    pub p0: Option<Vec<f64>>,
    pub sigma_q: Option<f64>,
    pub sigma_p: Option<f64>,
    pub nodes: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: Option<PathBuf>,
}

/// Position within the configuration text of a byte offset (1-based).
fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn parse_error(text: &str, e: toml::de::Error) -> LabError {
    let (line, column) = e.span().map_or((0, 0), |s| line_column(text, s.start));
    LabError::Parse {
        line,
        column,
        message: e.message().to_string(),
    }
}

/// Parsed configuration with overrides applied, plus its canonical hash.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: [u8; 32],
}

impl LoadedConfig {
    pub fn hash_hex(&self) -> String {
        self.hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Seed for every pseudo- and quasi-random sequence of the run.
    pub fn seed(&self) -> u64 {
        u64::from_le_bytes(self.hash[..8].try_into().expect("32-byte hash"))
    }
}

fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Parse `text` and apply `(SECTION__KEY, value)` overrides (prefix already
/// stripped, case-insensitive).
pub fn load_config(text: &str, overrides: &[(String, String)]) -> Result<LoadedConfig> {
    let mut table: toml::Table = text.parse().map_err(|e| parse_error(text, e))?;
    // Type errors are reported against the file itself, where spans are meaningful.
    toml::from_str::<ExperimentConfig>(text).map_err(|e| parse_error(text, e))?;
    for (name, raw) in overrides {
        let Some((section, key)) = name.split_once("__") else {
            continue;
        };
        let section = section.to_ascii_lowercase();
        let entry = table
            .entry(section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let Some(block) = entry.as_table_mut() else {
            return Err(LabError::Validation(format!("{ENV_PREFIX}{name}: [{section}] is not a table")));
        };
        let existing: Vec<String> = block.keys().filter(|k| k.eq_ignore_ascii_case(key)).cloned().collect();
        for k in existing {
            block.remove(&k);
        }
        block.insert(key.to_ascii_lowercase(), override_value(raw));
    }
    let canonical = toml::to_string(&table).map_err(|e| LabError::Validation(e.to_string()))?;
    let config: ExperimentConfig = toml::from_str(&canonical).map_err(|e| LabError::Parse {
        line: 0,
        column: 0,
        message: format!("after environment overrides: {}", e.message()),
    })?;
    let hash: [u8; 32] = Sha256::digest(canonical.as_bytes()).into();
    Ok(LoadedConfig { config, hash })
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Validation(msg.into()))
}

fn required<T: Clone>(v: &Option<T>, field: &str) -> Result<T> {
    match v {
        Some(x) => Ok(x.clone()),
        None => invalid(format!("missing field {field}")),
    }
}

fn positive(v: f64, field: &str) -> Result<f64> {
    if !(v > 0.0) || !v.is_finite() {
        return invalid(format!("{field} must be positive, got {v}"));
    }
    Ok(v)
}

fn grid_size(v: usize, field: &str) -> Result<usize> {
    if v < 2 {
        return invalid(format!("{field} must be at least 2, got {v}"));
    }
    Ok(v)
}

fn dims(v: &[f64], d: usize, field: &str) -> Result<()> {
    if v.len() != d {
        return invalid(format!("{field} has {} components, lattice dimension is {d}", v.len()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum InitialData {
    Toeplitz(PhaseSpaceDensity),
    Pure(CoherentParams),
}

/// Validated experiment. Fields that only some subcommands need are optional.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub lattice: LatticeSpec,
    pub geometry: CellGeometry,
    pub potential: TrigPotential,
    pub hbar: f64,
    pub lambda: Option<f64>,
    pub lip: Option<f64>,
    pub horizon: Option<f64>,
    pub dt: f64,
    pub m: usize,
    pub k_counts: Vec<usize>,
    pub n_q: Option<usize>,
    pub n_p: usize,
    pub p_max: Option<f64>,
    pub l_cut: Option<usize>,
    pub time_steps: usize,
    pub stability_samples: usize,
    pub bloch_packets: usize,
    pub gc: GcOptions,
    pub k_set: Option<PhaseSet>,
    pub omega: Option<Region>,
    pub delta: Option<f64>,
    pub budget_scale: f64,
    pub initial: Option<InitialData>,
    pub out_dir: Option<PathBuf>,
    pub tolerance_scale: f64,
    pub hash: String,
}

fn build_initial(block: &InitialBlock, d: usize, hbar: f64) -> Result<InitialData> {
    let kind = required(&block.kind, "initial.kind")?;
    let q0 = required(&block.q0, "initial.q0")?;
    let p0 = required(&block.p0, "initial.p0")?;
    dims(&q0, d, "initial.q0")?;
    dims(&p0, d, "initial.p0")?;
    match kind {
        InitialKind::Toeplitz => {
            let sq = positive(block.sigma_q.unwrap_or(0.1), "initial.sigma_q")?;
            let sp = positive(block.sigma_p.unwrap_or(0.1), "initial.sigma_p")?;
            let n = grid_size(block.nodes.unwrap_or(17), "initial.nodes")?;
            Ok(InitialData::Toeplitz(PhaseSpaceDensity::gaussian_bump(&q0, &p0, sq, sp, n)?))
        }
        InitialKind::Pure => Ok(InitialData::Pure(CoherentParams::new(&q0, &p0, hbar)?)),
    }
}

impl Experiment {
    /// Validate `cfg` for `command`. Missing required fields and violated
    /// constraints are validation errors; resolution limits are accuracy
    /// errors.
    pub fn from_config(cfg: &LoadedConfig, command: Command, tolerance_scale: f64) -> Result<Self> {
        let c = &cfg.config;
        positive(tolerance_scale, "--tolerance-scale")?;
        let lat_block = required(&c.lattice, "lattice")?;
        let rows = required(&lat_block.basis, "lattice.basis")?;
        let lattice = LatticeSpec::new(&rows).map_err(|e| LabError::Validation(format!("lattice.basis: {e}")))?;
        let d = lattice.dim();
        let geometry = gamma_bounds(&lattice)?;
        let mut terms = Vec::with_capacity(c.potential.terms.len());
        for t in &c.potential.terms {
            if t.g.len() != d {
                return invalid(format!("potential.terms: G has {} components, lattice dimension is {d}", t.g.len()));
            }
            terms.push((t.g.clone(), t.amplitude, t.phase));
        }
        let potential =
            TrigPotential::new(&lattice, &terms).map_err(|e| LabError::Validation(format!("potential.terms: {e}")))?;

        let physics = required(&c.physics, "physics")?;
        let hbar = positive(required(&physics.hbar, "physics.hbar")?, "physics.hbar")?;
        let lambda = physics.lambda.map(|l| positive(l, "physics.lambda")).transpose()?;
        let lip = match physics.lip {
            Some(l) if !(l >= 0.0) || !l.is_finite() => return invalid(format!("physics.lip must be nonnegative, got {l}")),
            l => l,
        };
        let needs_horizon = matches!(
            command,
            Command::Evolve | Command::Stability | Command::Constants | Command::Verify
        );
        let horizon = match physics.horizon {
            Some(t) => Some(positive(t, "physics.horizon (T)")?),
            None if needs_horizon => return invalid("missing field physics.horizon (T)"),
            None => None,
        };
        let dt = positive(physics.dt.unwrap_or(1e-3), "physics.dt")?;

        let disc = &c.discretization;
        let m = required(&disc.m, "discretization.m")?;
        if (m as f64) * hbar.sqrt() < 4.0 {
            return invalid(format!(
                "discretization.m: M·√ħ = {:.3} < 4; coherent states are not resolved",
                m as f64 * hbar.sqrt()
            ));
        }
        let k_counts = match disc.n_k.clone().unwrap_or(Counts::One(8)) {
            Counts::One(n) => vec![n; d],
            Counts::Many(v) => v,
        };
        if k_counts.len() != d {
            return invalid(format!("discretization.n_k has {} entries, lattice dimension is {d}", k_counts.len()));
        }
        for &n in &k_counts {
            grid_size(n, "discretization.n_k")?;
        }
        let n_q = disc.n_q.map(|n| grid_size(n, "discretization.n_q")).transpose()?;
        let n_p = grid_size(disc.n_p.unwrap_or(128), "discretization.n_p")?;
        let p_max = disc.p_max.map(|p| positive(p, "discretization.p_max")).transpose()?;
        let time_steps = grid_size(disc.time_steps.unwrap_or(200), "discretization.time_steps")?;
        let stability_samples = grid_size(disc.stability_samples.unwrap_or(20), "discretization.stability_samples")?;
        let bloch_packets = disc.bloch_packets.unwrap_or(10);
        if bloch_packets == 0 {
            return invalid("discretization.bloch_packets must be positive");
        }
        let gc_default = GcOptions::default();
        let gc = GcOptions {
            grid_per_axis: grid_size(disc.gc_grid.unwrap_or(gc_default.grid_per_axis), "discretization.gc_grid")?,
            quasi_random: disc.gc_quasi_random.unwrap_or(gc_default.quasi_random),
            time_steps: grid_size(disc.gc_time_steps.unwrap_or(gc_default.time_steps), "discretization.gc_time_steps")?,
            dt: positive(disc.gc_dt.unwrap_or(gc_default.dt), "discretization.gc_dt")?,
            seed: cfg.seed(),
        };

        let needs_scenario = matches!(command, Command::Evolve | Command::Constants | Command::Verify);
        let (k_set, omega, delta, budget_scale) = match &c.scenario {
            Some(s) => {
                let delta = positive(required(&s.delta, "scenario.delta")?, "scenario.delta")?;
                let budget_scale = s.budget_scale.unwrap_or(5e-3);
                if !(budget_scale >= 0.0) || !budget_scale.is_finite() {
                    return invalid("scenario.budget_scale must be nonnegative");
                }
                let mut boxes = Vec::new();
                for b in required(&s.k, "scenario.k")? {
                    dims(&b.p_lo, d, "scenario.k.p_lo")?;
                    dims(&b.p_hi, d, "scenario.k.p_hi")?;
                    let x = match (b.x_lo, b.x_hi) {
                        (Some(lo), Some(hi)) => {
                            dims(&lo, d, "scenario.k.x_lo")?;
                            dims(&hi, d, "scenario.k.x_hi")?;
                            Some((lo, hi))
                        }
                        (None, None) => None,
                        _ => return invalid("scenario.k: x_lo and x_hi must be given together"),
                    };
                    boxes.push(
                        PhaseBox::new(x, &b.p_lo, &b.p_hi)
                            .map_err(|e| LabError::Validation(format!("scenario.k: {e}")))?,
                    );
                }
                if boxes.is_empty() {
                    return invalid("scenario.k must contain at least one box");
                }
                let omega = if s.omega_full {
                    Region::full(&lattice)
                } else {
                    let mut cells = Vec::new();
                    for b in required(&s.omega, "scenario.omega")? {
                        dims(&b.lo, d, "scenario.omega.lo")?;
                        dims(&b.hi, d, "scenario.omega.hi")?;
                        cells.push(
                            CellBox::new(&b.lo, &b.hi).map_err(|e| LabError::Validation(format!("scenario.omega: {e}")))?,
                        );
                    }
                    Region::new(&lattice, cells).map_err(|e| LabError::Validation(format!("scenario.omega: {e}")))?
                };
                (Some(PhaseSet { boxes }), Some(omega), Some(delta), budget_scale)
            }
            None if needs_scenario => return invalid("missing field scenario"),
            None => (None, None, None, 5e-3),
        };

        let needs_initial = !matches!(command, Command::BlochCheck | Command::Constants);
        let initial = match &c.initial {
            Some(b) => Some(build_initial(b, d, hbar)?),
            None if needs_initial => return invalid("missing field initial"),
            None => None,
        };
        if command == Command::Stability && !matches!(initial, Some(InitialData::Toeplitz(_))) {
            return invalid("initial.kind: stability needs a toeplitz datum");
        }

        let ex = Self {
            lattice,
            geometry,
            potential,
            hbar,
            lambda,
            lip,
            horizon,
            dt,
            m,
            k_counts,
            n_q,
            n_p,
            p_max,
            l_cut: disc.l_cut,
            time_steps,
            stability_samples,
            bloch_packets,
            gc,
            k_set,
            omega,
            delta,
            budget_scale,
            initial,
            out_dir: c.output.dir.clone(),
            tolerance_scale,
            hash: cfg.hash_hex(),
        };
        ex.check_resolution()?;
        Ok(ex)
    }

    /// Largest momentum norm the run is expected to carry.
    pub fn momentum_extent(&self) -> f64 {
        let state = match &self.initial {
            Some(InitialData::Toeplitz(f)) => (0..f.len())
                .map(|j| f.p(j).iter().map(|p| p * p).sum::<f64>().sqrt())
                .fold(0.0, f64::max),
            Some(InitialData::Pure(c)) => c.p.iter().map(|p| p * p).sum::<f64>().sqrt(),
            None => 0.0,
        };
        let osc: f64 = 2.0 * self.potential.terms().iter().map(|t| t.amplitude.abs()).sum::<f64>();
        let d = self.lattice.dim();
        let k_half: f64 = (0..d).map(|j| self.lattice.b(j).iter().map(|b| b * b).sum::<f64>().sqrt() / 2.0).sum();
        (state * state + 2.0 * osc).sqrt() + self.hbar * k_half
    }

    /// Largest momentum resolved by the truncation, after the potential's
    /// bandwidth has been set aside for anti-aliasing.
    pub fn resolved_momentum(&self) -> f64 {
        let slab = self.lattice.reciprocal_slab_halfwidths().into_iter().fold(f64::INFINITY, f64::min);
        let usable = self.m as f64 - self.potential.bandwidth() as f64;
        self.hbar * usable * 2.0 * slab
    }

    fn check_resolution(&self) -> Result<()> {
        let need = self.momentum_extent() + 8.0 * self.hbar.sqrt();
        let have = self.resolved_momentum();
        if need > have {
            return Err(LabError::Accuracy(format!(
                "discretization.m = {} resolves |p| ≤ {have:.4} after anti-aliasing, the run needs {need:.4}",
                self.m
            )));
        }
        Ok(())
    }

    pub fn basis(&self) -> Result<Arc<PlaneWaveBasis>> {
        PlaneWaveBasis::new(&self.lattice, self.m)
    }

    pub fn k_grid(&self) -> Result<KGrid> {
        KGrid::monkhorst_pack(&self.lattice, &self.k_counts)
    }

    pub fn lip_value(&self) -> f64 {
        self.lip.unwrap_or_else(|| self.potential.lip_grad())
    }

    /// `λ` from the config, else `Lip(∇V)`, else 1.
    pub fn lambda_value(&self) -> f64 {
        self.lambda.unwrap_or_else(|| {
            let l = self.lip_value();
            if l > 0.0 {
                l
            } else {
                1.0
            }
        })
    }

    fn horizon_value(&self) -> Result<f64> {
        self.horizon.ok_or_else(|| LabError::Validation("missing field physics.horizon (T)".into()))
    }

    fn p_window(&self) -> f64 {
        self.p_max.unwrap_or_else(|| self.momentum_extent() + 8.0 * self.hbar.sqrt())
    }

    fn phase_grid(&self) -> Result<PhaseGrid> {
        let basis_n = 2 * self.m + 1;
        PhaseGrid::symmetric(&self.lattice, self.n_q.unwrap_or(basis_n.min(128)), self.p_window(), self.n_p)
    }

    pub fn initial_density(&self, basis: &Arc<PlaneWaveBasis>, grid: &KGrid) -> Result<FiberedDensity> {
        match &self.initial {
            Some(InitialData::Toeplitz(f)) => toeplitz_quantize(f, grid, basis, self.hbar),
            Some(InitialData::Pure(c)) => FiberedDensity::coherent_family(c, grid, basis),
            None => invalid("missing field initial"),
        }
    }

    pub fn scenario(&self) -> Result<ObservabilityScenario> {
        let missing = || LabError::Validation("missing field scenario".into());
        Ok(ObservabilityScenario {
            lattice: self.lattice.clone(),
            potential: self.potential.clone(),
            hbar: self.hbar,
            horizon: self.horizon_value()?,
            k_set: self.k_set.clone().ok_or_else(missing)?,
            omega: self.omega.clone().ok_or_else(missing)?,
            delta: self.delta.ok_or_else(missing)?,
            m: self.m,
            k_counts: self.k_counts.clone(),
            time_steps: self.time_steps,
            dt: self.dt,
            gc: self.gc.clone(),
            budget_scale: self.budget_scale * self.tolerance_scale,
            lip: self.lip,
        })
    }
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

/// CSV artifact: provenance comment, optional extra comments, header row.
struct Artifact {
    writer: csv::Writer<File>,
}

impl Artifact {
    fn create(dir: &Path, name: &str, hash: &str, comments: &[String], header: &[String]) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut file = File::create(dir.join(format!("{name}.csv")))?;
        writeln!(file, "# bloch-lab {VERSION} config={hash}")?;
        for c in comments {
            writeln!(file, "# {c}")?;
        }
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header)?;
        Ok(Self { writer })
    }

    fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

fn axis_names(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("{prefix}{j}")).collect()
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Outcome of a subcommand that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    Failed,
}

fn random_packet(rng: &mut ChaCha8Rng, ex: &Experiment, p_lim: f64) -> Result<Vec<(C64, CoherentParams)>> {
    let d = ex.lattice.dim();
    (0..3)
        .map(|_| {
            let t: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let q = ex.lattice.from_lattice_coords(&t);
            let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-p_lim..p_lim)).collect();
            let c = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            Ok((c, CoherentParams::new(&q, &p, ex.hbar)?))
        })
        .collect()
}

fn bloch_check(ex: &Experiment, dir: &Path) -> Result<Outcome> {
    let basis = ex.basis()?;
    let grid = ex.k_grid()?;
    let window = ex.l_cut.unwrap_or_else(|| auto_window(ex.hbar, ex.geometry.gamma_minus));
    if let Some(&n) = ex.k_counts.iter().find(|&&n| n < 2 * window + 1) {
        return Err(LabError::Accuracy(format!(
            "discretization.n_k = {n} aliases the {} translates of window L={window}; need n_k ≥ {}",
            2 * window + 1,
            2 * window + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ex.gc.seed);
    let p_lim = ((ex.resolved_momentum() - 8.0 * ex.hbar.sqrt()) / 2.0).max(0.0) + f64::MIN_POSITIVE;
    let tol_iso = 1e-10 * ex.tolerance_scale;
    let tol_round = 1e-9 * ex.tolerance_scale;
    let tol_coh = 1e-9 * ex.tolerance_scale;
    let mut out = Artifact::create(
        dir,
        Command::BlochCheck.name(),
        &ex.hash,
        &[format!("window={window} fibers={}", grid.len())],
        &strs(&["check", "sample", "error", "tolerance", "pass"]),
    )?;
    let mut all = true;
    let mut record = |out: &mut Artifact, check: &str, i: usize, err: f64, tol: f64| -> Result<()> {
        let ok = err <= tol;
        all &= ok;
        out.row([check.to_string(), i.to_string(), num(err), num(tol), ok.to_string()])
    };
    for i in 0..ex.bloch_packets {
        let packet = random_packet(&mut rng, ex, p_lim)?;
        let u = WindowedFunction::from_fn(&basis, window, |y| {
            packet.iter().fold(C64::new(0.0, 0.0), |acc, (c, p)| acc + c * coherent_state(p, y))
        });
        let n2 = u.norm_sqr();
        let state = bloch_transform(&u, &grid)?;
        record(&mut out, "isometry", i, (state.mean_norm_sqr() - n2).abs() / n2, tol_iso)?;
        let back = inverse_bloch(&state, window)?;
        let scale = (0..u.translates().len())
            .flat_map(|t| u.values(t).iter().map(|c| c.norm()))
            .fold(0.0, f64::max);
        record(&mut out, "round_trip", i, back.max_abs_diff(&u) / scale, tol_round)?;

        let (_, params) = &packet[0];
        let coh = WindowedFunction::from_fn(&basis, window, |y| coherent_state(params, y));
        let fibers = bloch_transform(&coh, &grid)?;
        let mut err: f64 = 0.0;
        for (ik, f) in fibers.fibers.iter().enumerate() {
            let exact = fiber_coherent(params, &basis, grid.point(ik))?;
            err = err.max(f.max_abs_diff(&exact));
        }
        record(&mut out, "coherent_identity", i, err, tol_coh)?;
    }
    out.finish()?;
    Ok(if all { Outcome::Passed } else { Outcome::Failed })
}

fn evolve(ex: &Experiment, dir: &Path) -> Result<Outcome> {
    let basis = ex.basis()?;
    let grid = ex.k_grid()?;
    let sc = ex.scenario()?;
    let region = sc.observed_region()?;
    let mask = region_mask(&basis, &region);
    let mut r = ex.initial_density(&basis, &grid)?;
    let n = ex.time_steps;
    let interval = sc.horizon / n as f64;
    let mut out = Artifact::create(
        dir,
        Command::Evolve.name(),
        &ex.hash,
        &[],
        &strs(&["t", "trace", "observed"]),
    )?;
    for i in 0..=n {
        if i > 0 {
            r = evolve_density(&r, interval, &ex.potential, ex.dt)?;
        }
        let t = i as f64 * interval;
        out.row([num(t), num(periodic_trace(&r)), num(observe_with_mask(&r, &mask))])?;
    }
    out.finish()?;
    Ok(Outcome::Passed)
}

fn husimi_cmd(ex: &Experiment, dir: &Path) -> Result<Outcome> {
    let basis = ex.basis()?;
    let grid = ex.k_grid()?;
    let r = ex.initial_density(&basis, &grid)?;
    let pgrid = ex.phase_grid()?;
    let h = husimi(&r, &pgrid)?;
    let d = ex.lattice.dim();
    let mut header = axis_names("q", d);
    header.extend(axis_names("p", d));
    header.extend(strs(&["weight", "value"]));
    let mut out = Artifact::create(
        dir,
        Command::Husimi.name(),
        &ex.hash,
        &[format!("mass={}", num(h.mass()))],
        &header,
    )?;
    for j in 0..h.len() {
        let mut row: Vec<String> = h.q(j).iter().chain(h.p(j)).map(|&v| num(v)).collect();
        row.push(num(h.weight(j)));
        row.push(num(h.value(j)));
        out.row(row)?;
    }
    out.finish()?;
    Ok(Outcome::Passed)
}

fn metric(ex: &Experiment, dir: &Path) -> Result<Outcome> {
    let basis = ex.basis()?;
    let grid = ex.k_grid()?;
    let (energy, lambda) = match &ex.initial {
        Some(InitialData::Toeplitz(f)) => {
            let lambda = ex.lambda_value();
            let cost = CostParams::new(lambda, ex.hbar, &ex.geometry)?;
            (coupling_energy_toeplitz(f, &cost, &grid, &basis)?, lambda)
        }
        _ => {
            let r = ex.initial_density(&basis, &grid)?;
            (coupling_energy_husimi(&r, &ex.geometry, &ex.phase_grid()?)?, 1.0)
        }
    };
    let d = ex.lattice.dim();
    let mut header = vec!["fiber".to_string()];
    header.extend(axis_names("k", d));
    header.extend(strs(&["position", "momentum", "energy"]));
    let bound = energy.bound.unwrap_or(f64::NAN);
    let mut out = Artifact::create(
        dir,
        Command::Metric.name(),
        &ex.hash,
        &[format!(
            "lambda={} total={} bound={}",
            num(lambda),
            num(energy.total),
            num(bound)
        )],
        &header,
    )?;
    for ik in 0..grid.len() {
        let mut row = vec![ik.to_string()];
        row.extend(grid.point(ik).iter().map(|&v| num(v)));
        row.push(num(energy.position[ik]));
        row.push(num(energy.momentum[ik]));
        row.push(num(energy.per_fiber[ik]));
        out.row(row)?;
    }
    out.finish()?;
    Ok(if energy.total <= bound * (1.0 + 1e-6 * ex.tolerance_scale) {
        Outcome::Passed
    } else {
        Outcome::Failed
    })
}

fn stability(ex: &Experiment, dir: &Path) -> Result<Outcome> {
    let Some(InitialData::Toeplitz(f)) = &ex.initial else {
        return invalid("initial.kind: stability needs a toeplitz datum");
    };
    let basis = ex.basis()?;
    let grid = ex.k_grid()?;
    let cost = CostParams::new(ex.lambda_value(), ex.hbar, &ex.geometry)?;
    let run = StabilityRun {
        potential: &ex.potential,
        grid: &grid,
        basis: &basis,
        horizon: ex.horizon_value()?,
        samples: ex.stability_samples,
        dt: ex.dt,
        lip: ex.lip,
    };
    let s = stability_envelope(f, &cost, &run)?;
    let mut out = Artifact::create(
        dir,
        Command::Stability.name(),
        &ex.hash,
        &[format!(
            "lambda={} lip={} eta={} eta_statement={}",
            num(cost.lambda),
            num(s.lip),
            num(s.eta),
            num(s.eta_half)
        )],
        &strs(&["t", "energy", "bound", "ratio"]),
    )?;
    for row in &s.rows {
        let ratio = if row.bound > 0.0 { row.energy / row.bound } else { 0.0 };
        out.row([num(row.t), num(row.energy), num(row.bound), num(ratio)])?;
    }
    out.finish()?;
    Ok(if s.worst_ratio() <= 1.0 + 1e-3 * ex.tolerance_scale {
        Outcome::Passed
    } else {
        Outcome::Failed
    })
}

/// `(name, value)` rows of the `constants` subcommand.
pub fn constants_table(ex: &Experiment) -> Result<Vec<(String, f64)>> {
    let sc = ex.scenario()?;
    let lip = ex.lip_value();
    let t = sc.horizon;
    let d = ex.lattice.dim();
    let ct = constant_toeplitz(&ex.geometry, t, lip)?;
    let cp = constant_pure(&ex.geometry, t, lip)?;
    let cost = CostParams::new(ct.lambda, ex.hbar, &ex.geometry)?;
    let gc = gc_constant(t, &sc.k_set, &sc.observed_region()?.base(), &ex.potential, &ex.gc)?;
    let mut rows = vec![
        ("gamma_minus".to_string(), ex.geometry.gamma_minus),
        ("gamma_plus".to_string(), ex.geometry.gamma_plus),
        ("lip".to_string(), lip),
        ("c_toeplitz".to_string(), ct.value),
        ("lambda_star".to_string(), ct.lambda),
        ("eta".to_string(), cost.eta(lip)),
        ("eta_statement".to_string(), cost.eta_half(lip)),
        ("c_pure".to_string(), cp),
        ("c_gc".to_string(), gc.value),
        ("gc_violated".to_string(), if gc.violated { 1.0 } else { 0.0 }),
        ("gc_samples".to_string(), gc.samples as f64),
        ("hbar_threshold".to_string(), hbar_threshold(sc.delta, d, gc.value, ct.value)?),
    ];
    if let Some(InitialData::Pure(_)) = &ex.initial {
        let basis = ex.basis()?;
        let r = ex.initial_density(&basis, &ex.k_grid()?)?;
        let delta2 = std_dev_sqr(&r)?;
        rows.push(("std_dev_sqr".to_string(), delta2));
        rows.push(("c_bold".to_string(), c_bold(&r)?));
    }
    Ok(rows)
}

fn constants(ex: &Experiment, dir: &Path) -> Result<Outcome> {
    let rows = constants_table(ex)?;
    let mut out = Artifact::create(dir, Command::Constants.name(), &ex.hash, &[], &strs(&["name", "value"]))?;
    for (name, v) in rows {
        out.row([name, num(v)])?;
    }
    out.finish()?;
    Ok(Outcome::Passed)
}

/// Run the observability check configured by `ex`.
pub fn verify_report(ex: &Experiment) -> Result<TheoremReport> {
    let sc = ex.scenario()?;
    match &ex.initial {
        Some(InitialData::Toeplitz(f)) => verify_toeplitz_theorem(f, &sc),
        Some(InitialData::Pure(_)) => {
            let r = ex.initial_density(&sc.basis()?, &sc.k_grid()?)?;
            verify_pure_theorem(&r, &sc)
        }
        None => invalid("missing field initial"),
    }
}

fn verify(ex: &Experiment, dir: &Path) -> Result<Outcome> {
    let rep = verify_report(ex)?;
    let passed = rep.passed();
    let comments: Vec<String> = std::iter::once(format!("case={:?} passed={passed}", rep.case))
        .chain(rep.warnings.iter().map(|w| format!("warning: {w}")))
        .collect();
    let mut out = Artifact::create(dir, Command::Verify.name(), &ex.hash, &comments, &strs(&["name", "value"]))?;
    for (name, v) in rep.entries() {
        out.row([name.to_string(), num(v)])?;
        println!("{name:>20} = {v:e}");
    }
    out.finish()?;
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}", if passed { "PASS" } else { "FAIL" });
    Ok(if passed { Outcome::Passed } else { Outcome::Failed })
}

/// Execute `command` for a validated experiment, writing into `dir`.
pub fn execute(command: Command, ex: &Experiment, dir: &Path) -> Result<Outcome> {
    match command {
        Command::BlochCheck => bloch_check(ex, dir),
        Command::Evolve => evolve(ex, dir),
        Command::Husimi => husimi_cmd(ex, dir),
        Command::Metric => metric(ex, dir),
        Command::Stability => stability(ex, dir),
        Command::Constants => constants(ex, dir),
        Command::Verify => verify(ex, dir),
    }
}

pub fn exit_code(e: &LabError) -> i32 {
    match e {
        LabError::Parse { .. } => 2,
        LabError::Validation(_) | LabError::Domain(_) => 3,
        LabError::Accuracy(_) => 4,
        LabError::Io(_) | LabError::Csv(_) => 1,
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(0) => invalid("--threads must be positive"),
        Some(1) => {
            let was = !par::is_parallel();
            par::force_sequential(true);
            let out = f();
            par::force_sequential(was);
            Ok(out)
        }
        #[cfg(feature = "parallel")]
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| LabError::Validation(format!("--threads: {e}")))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

fn run_inner(cli: &Cli, overrides: &[(String, String)]) -> Result<Outcome> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| LabError::Validation("missing --config <path>".into()))?;
    let text = std::fs::read_to_string(path)?;
    let loaded = load_config(&text, overrides)?;
    let ex = Experiment::from_config(&loaded, cli.command, cli.tolerance_scale)?;
    let dir = cli
        .out
        .clone()
        .or_else(|| ex.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    with_threads(cli.threads, || execute(cli.command, &ex, &dir))?
}

/// Entry point with explicit overrides (`SECTION__KEY`, value).
pub fn run_with_overrides<I, S>(args: I, overrides: &[(String, String)]) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run_inner(&cli, overrides) {
        Ok(Outcome::Passed) => 0,
        Ok(Outcome::Failed) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Overrides from the process environment, sorted by name.
pub fn env_overrides() -> Vec<(String, String)> {
    let vars: BTreeMap<String, String> = std::env::vars()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|s| (s.to_string(), v)))
        .filter(|(k, _)| k.contains("__"))
        .collect();
    vars.into_iter().collect()
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_with_overrides(args, &env_overrides())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[lattice]
basis = [[1.0]]

[physics]
hbar = 0.01
T = 1.0
dt = 0.01

[discretization]
M = 64
N_k = 4
time_steps = 20

[scenario]
K = [{ p_lo = [1.0], p_hi = [2.0] }]
Omega = [{ lo = [-0.1], hi = [0.1] }]
delta = 0.05

[initial]
kind = "toeplitz"
q0 = [0.0]
p0 = [1.5]
nodes = 5
"#;

    fn load(text: &str) -> Result<LoadedConfig> {
        load_config(text, &[])
    }

    #[test]
    fn parses_base_config() {
        let cfg = load(BASE).unwrap();
        let ex = Experiment::from_config(&cfg, Command::Verify, 1.0).unwrap();
        assert_eq!(ex.m, 64);
        assert_eq!(ex.k_counts, vec![4]);
        assert_eq!(ex.horizon, Some(1.0));
        assert!(matches!(ex.initial, Some(InitialData::Toeplitz(_))));
    }

    #[test]
    fn syntax_error_reports_position() {
        let text = "[physics]\nhbar = = 1\n";
        match load(text) {
            Err(LabError::Parse { line, column, .. }) => {
                assert_eq!(line, 2);
                assert!(column >= 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_hbar_names_field() {
        let text = BASE.replace("hbar = 0.01\n", "");
        let cfg = load(&text).unwrap();
        let err = Experiment::from_config(&cfg, Command::Constants, 1.0).unwrap_err();
        assert_eq!(exit_code(&err), 3);
        assert!(err.to_string().contains("physics.hbar"), "{err}");
    }

    #[test]
    fn zero_horizon_rejected() {
        let cfg = load(&BASE.replace("T = 1.0", "T = 0.0")).unwrap();
        let err = Experiment::from_config(&cfg, Command::Constants, 1.0).unwrap_err();
        assert_eq!(exit_code(&err), 3);
    }

    #[test]
    fn coarse_truncation_rejected() {
        let cfg = load(&BASE.replace("M = 64", "M = 30")).unwrap();
        let err = Experiment::from_config(&cfg, Command::Verify, 1.0).unwrap_err();
        assert_eq!(exit_code(&err), 3, "{err}");
        let cfg = load(&BASE.replace("p0 = [1.5]", "p0 = [3.9]")).unwrap();
        let err = Experiment::from_config(&cfg, Command::Verify, 1.0).unwrap_err();
        assert_eq!(exit_code(&err), 4, "{err}");
    }

    #[test]
    fn small_grids_rejected() {
        for (from, to) in [("N_k = 4", "N_k = 1"), ("time_steps = 20", "time_steps = 1"), ("nodes = 5", "nodes = 1")] {
            let cfg = load(&BASE.replace(from, to)).unwrap();
            let err = Experiment::from_config(&cfg, Command::Verify, 1.0).unwrap_err();
            assert_eq!(exit_code(&err), 3, "{from}");
        }
        let cfg = load(&BASE.replace("delta = 0.05", "delta = 0.0")).unwrap();
        assert!(Experiment::from_config(&cfg, Command::Verify, 1.0).is_err());
    }

    #[test]
    fn overrides_replace_values_and_hash() {
        let a = load(BASE).unwrap();
        let b = load_config(BASE, &[("PHYSICS__HBAR".into(), "0.02".into())]).unwrap();
        assert_eq!(b.config.physics.as_ref().unwrap().hbar, Some(0.02));
        assert_ne!(a.hash, b.hash);
        let c = load_config(BASE, &[("DISCRETIZATION__M".into(), "80".into())]).unwrap();
        assert_eq!(c.config.discretization.m, Some(80));
        assert_eq!(load(BASE).unwrap().hash, a.hash);
    }

    #[test]
    fn unknown_key_is_parse_error() {
        let err = load(&BASE.replace("dt = 0.01", "dtt = 0.01")).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn line_column_counts_from_one() {
        assert_eq!(line_column("ab\ncd", 4), (2, 2));
        assert_eq!(line_column("ab", 0), (1, 1));
    }
}

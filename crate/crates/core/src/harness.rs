//! Seeded ensemble driver: JSON run configurations, per-stream execution on the worker
//! pool, deterministic aggregation, and CSV / JSON-lines artifacts.
//!
//! Stream i draws from `stream(seed, i)`. Per-stream results come back in index order and
//! every sum runs over that order, so output does not depend on the thread count.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discrete::{
    collapse_run, simple_trajectory_step, tilted_walk_step, MassWalk, OqrwDiagonalState, TiltAngles, TiltedWalkState,
};
use crate::error::{Error, Result};
use crate::ito::{
    derive_noise_coefficients, duality_residual, leibniz_residual, unitarity_drift_residual, DilationData,
};
use crate::kernel::{MomentumGrid, MomentumKernel};
use crate::linalg::{c, pauli, random, scalar, validate_density, CMatrix, Tolerances, C64};
use crate::lindblad::{bin_ensemble, bin_index, compare_bins, fourier_bin_blocks, uniform_edges};
use crate::rng::{normal, par_map, stream};
use crate::scaling::{build_transition_pair, ModelParams, PairMode, TiltParameter};
use crate::sde::{simple_step, thermal_step, MomentumKernelCont, SimpleTrajState, TiltedScratch, TiltedSde};
use crate::spin_half::{
    integrate_theta, jump_statistics, mean_wait_time, occupation_density, occupation_moments, potential_and_invariant,
    SpinHalfParams, WaitMethod,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Either `{"pauli": [c0, c1, c2, c3]}` for c0 I + c1 s1 + c2 s2 + c3 s3, or
/// `{"entries": [[[re, im], ...], ...]}` row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Pauli { pauli: [f64; 4] },
    Entries { entries: Vec<Vec<[f64; 2]>> },
}

impl MatrixSpec {
    pub fn to_matrix(&self) -> Result<CMatrix> {
        match self {
            MatrixSpec::Pauli { pauli: k } => {
                let [s1, s2, s3] = pauli();
                Ok(scalar(k[0], 2) + s1 * c(k[1], 0.0) + s2 * c(k[2], 0.0) + s3 * c(k[3], 0.0))
            }
            MatrixSpec::Entries { entries } => {
                let n = entries.len();
                if n == 0 {
                    return Err(Error::ConfigInvalid("empty matrix".into()));
                }
                if let Some(row) = entries.iter().find(|r| r.len() != n) {
                    return Err(Error::NotSquare { rows: n, cols: row.len() });
                }
                Ok(CMatrix::from_fn(n, n, |i, j| c(entries[i][j][0], entries[i][j][1])))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub h: MatrixSpec,
    pub n: MatrixSpec,
    #[serde(default)]
    pub nbar: f64,
    /// Lattice spacing; only the discrete walk uses it.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl ModelSpec {
    fn matrices(&self) -> Result<(CMatrix, CMatrix)> {
        let (h, n) = (self.h.to_matrix()?, self.n.to_matrix()?);
        if h.nrows() != n.nrows() {
            return Err(Error::DimensionMismatch { expected: h.nrows(), found: n.nrows() });
        }
        if !(self.nbar >= 0.0 && self.nbar.is_finite()) {
            return Err(Error::ConfigInvalid(format!("nbar = {} must be a finite non-negative number", self.nbar)));
        }
        Ok((h, n))
    }
}

/// Gaussian bump in the momentum index with a global phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Packet {
    pub center: f64,
    pub width: f64,
    #[serde(default)]
    pub phase: f64,
}

/// Amplitudes sum_j e^{i phase_j} exp(-(k - c_j)^2 / (4 w_j^2)) on `support` (inclusive), normalized.
pub fn packet_amplitudes(sites: usize, packets: &[Packet], support: Option<[usize; 2]>) -> Result<Vec<C64>> {
    let [lo, hi] = support.unwrap_or([0, sites.saturating_sub(1)]);
    let amps: Vec<C64> = (0..sites)
        .map(|k| {
            if k < lo || k > hi {
                return c(0.0, 0.0);
            }
            packets
                .iter()
                .map(|p| C64::from_polar((-(k as f64 - p.center).powi(2) / (4.0 * p.width * p.width)).exp(), p.phase))
                .sum()
        })
        .collect();
    let norm = amps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::ConfigInvalid("packets have no mass on the support".into()));
    }
    Ok(amps.into_iter().map(|z| z / norm).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec { lo: -4.0, hi: 4.0, count: 32 }
    }
}

impl BinSpec {
    pub fn edges(&self) -> Vec<f64> {
        uniform_edges(self.lo, self.hi, self.count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    /// Tilted walk on Z_N with full amplitudes; `horizon` counts steps.
    DiscreteWalk {
        sites: usize,
        theta: f64,
        phi: f64,
        packets: Vec<Packet>,
        #[serde(default)]
        support: Option<[usize; 2]>,
    },
    /// Simple trajectories of the walk built from the model at spacing epsilon; dt = epsilon^2.
    DiscreteOqrw { model: ModelSpec, rho0: MatrixSpec },
    /// Continuum simple (or thermal, nbar > 0) trajectories.
    Trajectory { model: ModelSpec, rho0: MatrixSpec },
    /// Tilted continuum trajectories of a Gaussian product kernel.
    TiltedTrajectory { model: ModelSpec, rho0: MatrixSpec, v: [f64; 2], grid: GridSpec, packet_width: f64 },
    /// Deterministic propagation from a point mass at x = 0, snapshots at the emit times.
    Lindblad {
        model: ModelSpec,
        rho0: MatrixSpec,
        #[serde(default = "default_dk")]
        dk: f64,
    },
    /// Ito-algebra residuals over random finite stand-ins; `ensemble` is the seed count.
    ItoVerify { dims: Vec<usize>, nbars: Vec<f64> },
    SpinHalf {
        a: f64,
        omega0: f64,
        #[serde(default)]
        theta0: f64,
    },
    /// Mass-walk collapse runs; `horizon` is the step cap.
    CollapseStats {
        sites: usize,
        theta: f64,
        phi: f64,
        packets: Vec<Packet>,
        #[serde(default)]
        support: Option<[usize; 2]>,
        threshold: f64,
    },
}

fn default_dk() -> f64 {
    0.01
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::DiscreteWalk { .. } => "discrete-walk",
            Experiment::DiscreteOqrw { .. } => "discrete-oqrw",
            Experiment::Trajectory { .. } => "trajectory",
            Experiment::TiltedTrajectory { .. } => "tilted-trajectory",
            Experiment::Lindblad { .. } => "lindblad",
            Experiment::ItoVerify { .. } => "ito-verify",
            Experiment::SpinHalf { .. } => "spin-half",
            Experiment::CollapseStats { .. } => "collapse-stats",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub experiment: Experiment,
    pub seed: u64,
    pub ensemble: usize,
    pub dt: f64,
    pub horizon: f64,
    /// Steps between emitted time points.
    pub emit_every: usize,
    /// Streams 0..record_paths also write full paths.
    #[serde(default)]
    pub record_paths: usize,
    #[serde(default)]
    pub bins: BinSpec,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not {SCHEMA_VERSION}", self.schema_version));
        }
        if self.ensemble == 0 || self.emit_every == 0 {
            return bad("ensemble and emit_every must be positive".into());
        }
        if !(self.dt > 0.0 && self.horizon > 0.0 && self.dt.is_finite() && self.horizon.is_finite()) {
            return bad(format!("dt = {} and horizon = {} must be positive", self.dt, self.horizon));
        }
        if !(self.bins.count > 0 && self.bins.hi > self.bins.lo) {
            return bad("bins need count > 0 and hi > lo".into());
        }
        match &self.experiment {
            Experiment::DiscreteWalk { sites, packets, .. } | Experiment::CollapseStats { sites, packets, .. } => {
                if *sites < 2 || packets.is_empty() || packets.iter().any(|p| !(p.width > 0.0)) {
                    return bad("walks need sites >= 2 and packets with positive width".into());
                }
            }
            Experiment::DiscreteOqrw { model, .. } => match model.epsilon {
                Some(e) if e > 0.0 => {}
                _ => return bad("discrete-oqrw needs model.epsilon > 0".into()),
            },
            Experiment::TiltedTrajectory { grid, packet_width, .. } => {
                if grid.points < 2 || !(grid.hi > grid.lo) || !(*packet_width > 0.0) {
                    return bad("tilted-trajectory needs a grid with >= 2 points and packet_width > 0".into());
                }
            }
            Experiment::Lindblad { dk, .. } => {
                if !(*dk > 0.0) {
                    return bad("dk must be positive".into());
                }
            }
            Experiment::ItoVerify { dims, nbars } => {
                if dims.is_empty() || dims.contains(&0) || nbars.iter().any(|n| !(*n >= 0.0)) {
                    return bad("ito-verify needs positive dims and non-negative nbars".into());
                }
            }
            Experiment::SpinHalf { a, omega0, .. } => {
                SpinHalfParams::new(*a, *omega0)?;
            }
            Experiment::Trajectory { .. } => {}
        }
        if let Experiment::CollapseStats { threshold, .. } = &self.experiment {
            if !(*threshold > 0.0 && *threshold < 1.0) {
                return bad("threshold must lie in (0, 1)".into());
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization, output directory excluded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&RunConfig { output: None, ..self.clone() }).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn steps(&self) -> usize {
        (self.horizon / self.dt).round().max(1.0) as usize
    }

    /// Step indices at which rows are emitted: 0, emit_every, ..., and the last step.
    fn emit_steps(&self, steps: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..=steps).step_by(self.emit_every).collect();
        if *v.last().unwrap() != steps {
            v.push(steps);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamFailure {
    pub stream: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub t: f64,
    pub mean: f64,
    pub var: f64,
    pub count: usize,
}

/// Fixed-edge histogram; counts + underflow + overflow equals the number of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub name: String,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn from_samples(name: &str, edges: Vec<f64>, samples: impl IntoIterator<Item = f64>) -> Self {
        let mut h = Histogram { name: name.into(), counts: vec![0; edges.len() - 1], edges, underflow: 0, overflow: 0 };
        for x in samples {
            match bin_index(&h.edges, x) {
                Some(b) => h.counts[b] += 1,
                None if x < h.edges[0] => h.underflow += 1,
                None => h.overflow += 1,
            }
        }
        h
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub experiment: String,
    pub ensemble: usize,
    pub completed: usize,
    pub failures: Vec<StreamFailure>,
    /// Per-time mean and variance of the recorded scalar (X, the signal Y, or the site times epsilon).
    pub moments: Vec<MomentRow>,
    /// Ensemble average of the final internal state, column-major [re, im] entries.
    pub internal_average: Option<Vec<[f64; 2]>>,
    pub histograms: Vec<Histogram>,
    pub metrics: BTreeMap<String, f64>,
}

/// Column-exact CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(file: &str, header: &[&'static str]) -> Self {
        Table { file: file.into(), header: header.to_vec(), rows: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub summary: EnsembleSummary,
    pub tables: Vec<Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    /// Wall-clock metadata; the only non-reproducible field in any artifact.
    pub created_unix: u64,
}

/// Per-stream record: the scalar at each emit time, optional final internal state, optional path rows.
struct StreamRecord {
    xs: Vec<f64>,
    state: Option<CMatrix>,
    extra: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

/// Runs `f` with a worker pool of `threads` (None: the pool default).
#[cfg(feature = "parallel")]
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::ConfigInvalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<T: Send>(_threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(f())
}

fn density(m: &MatrixSpec) -> Result<CMatrix> {
    Ok(validate_density(&m.to_matrix()?, &Tolerances::default())?.into_inner())
}

fn bloch(rho: &CMatrix) -> [f64; 3] {
    if rho.nrows() != 2 {
        return [f64::NAN; 3];
    }
    let [s1, s2, s3] = pauli();
    [(rho * s1).trace().re, (rho * s2).trace().re, (rho * s3).trace().re]
}

fn purity(rho: &CMatrix) -> f64 {
    (rho * rho).trace().re
}

/// Splits per-stream results into records and failures, then aggregates moments and states.
fn aggregate(
    cfg: &RunConfig,
    times: &[f64],
    results: Vec<Result<StreamRecord>>,
) -> (EnsembleSummary, Vec<StreamRecord>) {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => ok.push(rec),
            Err(e) => failures.push(StreamFailure { stream: i as u64, error: e.to_string() }),
        }
    }
    let moments = times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let n = ok.len();
            let mean = ok.iter().map(|r| r.xs[j]).sum::<f64>() / n.max(1) as f64;
            let var =
                if n > 1 { ok.iter().map(|r| (r.xs[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
            MomentRow { t, mean, var, count: n }
        })
        .collect();
    let internal_average = ok.first().and_then(|r| r.state.as_ref()).map(|s0| {
        let mut acc = CMatrix::zeros(s0.nrows(), s0.ncols());
        for r in &ok {
            acc += r.state.as_ref().unwrap();
        }
        acc.iter().map(|z| [z.re / ok.len() as f64, z.im / ok.len() as f64]).collect()
    });
    let summary = EnsembleSummary {
        experiment: cfg.experiment.name().into(),
        ensemble: cfg.ensemble,
        completed: ok.len(),
        failures,
        moments,
        internal_average,
        histograms: Vec::new(),
        metrics: BTreeMap::new(),
    };
    (summary, ok)
}

fn final_histogram(name: &str, cfg: &RunConfig, ok: &[StreamRecord]) -> Histogram {
    Histogram::from_samples(name, cfg.bins.edges(), ok.iter().map(|r| *r.xs.last().unwrap()))
}

fn path_table(file: &str, header: &[&'static str], ok: &[StreamRecord]) -> Table {
    let mut t = Table::new(file, header);
    for r in ok {
        t.rows.extend(r.rows.iter().cloned());
    }
    t
}

/// Executes every stream of `cfg` and aggregates the results.
pub fn run_ensemble(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match &cfg.experiment {
        Experiment::Trajectory { model, rho0 } => run_trajectory(cfg, model, rho0),
        Experiment::DiscreteOqrw { model, rho0 } => run_discrete_oqrw(cfg, model, rho0),
        Experiment::TiltedTrajectory { model, rho0, v, grid, packet_width } => {
            run_tilted(cfg, model, rho0, C64::new(v[0], v[1]), grid, *packet_width)
        }
        Experiment::Lindblad { model, rho0, dk } => run_lindblad(cfg, model, rho0, *dk),
        Experiment::ItoVerify { dims, nbars } => run_ito(cfg, dims, nbars),
        Experiment::SpinHalf { a, omega0, theta0 } => run_spin_half(cfg, &SpinHalfParams::new(*a, *omega0)?, *theta0),
        Experiment::DiscreteWalk { sites, theta, phi, packets, support } => run_discrete_walk(
            cfg,
            *sites,
            TiltAngles { theta: *theta, phi: *phi },
            &packet_amplitudes(*sites, packets, *support)?,
        ),
        Experiment::CollapseStats { sites, theta, phi, packets, support, threshold } => run_collapse(
            cfg,
            *sites,
            TiltAngles { theta: *theta, phi: *phi },
            &packet_amplitudes(*sites, packets, *support)?,
            *threshold,
        ),
    }
}

const PATH_HEADER: [&str; 7] = ["stream", "t", "x", "purity", "q1", "q2", "q3"];

fn run_trajectory(cfg: &RunConfig, model: &ModelSpec, rho0: &MatrixSpec) -> Result<RunOutput> {
    let (h, n) = model.matrices()?;
    let rho0 = density(rho0)?;
    if rho0.nrows() != h.nrows() {
        return Err(Error::DimensionMismatch { expected: h.nrows(), found: rho0.nrows() });
    }
    let steps = cfg.steps();
    let emits = cfg.emit_steps(steps);
    let times: Vec<f64> = emits.iter().map(|&s| s as f64 * cfg.dt).collect();
    let sq = cfg.dt.sqrt();
    let nbar = model.nbar;
    let results = par_map(cfg.ensemble as u64, |i| -> Result<StreamRecord> {
        let mut rng = stream(cfg.seed, i);
        let mut s = SimpleTrajState::new(rho0.clone(), 0.0);
        let record = (i as usize) < cfg.record_paths;
        let mut rec =
            StreamRecord { xs: Vec::with_capacity(emits.len()), state: None, extra: Vec::new(), rows: Vec::new() };
        let mut next = 0;
        for step in 0..=steps {
            if emits[next] == step {
                rec.xs.push(s.x);
                if record {
                    let q = bloch(&s.rho);
                    rec.rows.push(vec![i as f64, step as f64 * cfg.dt, s.x, purity(&s.rho), q[0], q[1], q[2]]);
                }
                next += 1;
            }
            if step < steps {
                let db = sq * normal(&mut rng);
                s = if nbar > 0.0 {
                    thermal_step(&s, &h, &n, nbar, cfg.dt, db)?
                } else {
                    simple_step(&s, &h, &n, cfg.dt, db)?
                };
            }
        }
        rec.state = Some(s.rho);
        Ok(rec)
    });
    let (mut summary, ok) = aggregate(cfg, &times, results);
    summary.histograms.push(final_histogram("x_final", cfg, &ok));
    let moments = moments_table(&summary);
    Ok(RunOutput { tables: vec![moments, path_table("paths.csv", &PATH_HEADER, &ok)], summary })
}

fn run_discrete_oqrw(cfg: &RunConfig, model: &ModelSpec, rho0: &MatrixSpec) -> Result<RunOutput> {
    let (h, n) = model.matrices()?;
    let eps = model.epsilon.expect("validated");
    let pair = build_transition_pair(&ModelParams::new(h, n, eps)?, PairMode::Unitarized)?;
    let rho0 = density(rho0)?;
    let dt = eps * eps;
    let steps = (cfg.horizon / dt).round().max(1.0) as usize;
    let emits = cfg.emit_steps(steps);
    let times: Vec<f64> = emits.iter().map(|&s| s as f64 * dt).collect();
    let results = par_map(cfg.ensemble as u64, |i| -> Result<StreamRecord> {
        let mut rng = stream(cfg.seed, i);
        let mut s = OqrwDiagonalState { rho: rho0.clone(), site: 0 };
        let record = (i as usize) < cfg.record_paths;
        let mut rec = StreamRecord { xs: Vec::new(), state: None, extra: Vec::new(), rows: Vec::new() };
        let mut next = 0;
        for step in 0..=steps {
            if emits[next] == step {
                let x = eps * s.site as f64;
                rec.xs.push(x);
                if record {
                    let q = bloch(&s.rho);
                    rec.rows.push(vec![i as f64, step as f64 * dt, x, purity(&s.rho), q[0], q[1], q[2]]);
                }
                next += 1;
            }
            if step < steps {
                s = simple_trajectory_step(&s, &pair, rng.random::<f64>())?.0;
            }
        }
        rec.state = Some(s.rho);
        Ok(rec)
    });
    let (mut summary, ok) = aggregate(cfg, &times, results);
    summary.histograms.push(final_histogram("x_final", cfg, &ok));
    summary.metrics.insert("epsilon".into(), eps);
    let moments = moments_table(&summary);
    Ok(RunOutput { tables: vec![moments, path_table("paths.csv", &PATH_HEADER, &ok)], summary })
}

fn run_tilted(
    cfg: &RunConfig,
    model: &ModelSpec,
    rho0: &MatrixSpec,
    v: C64,
    grid: &GridSpec,
    width: f64,
) -> Result<RunOutput> {
    let (h, n) = model.matrices()?;
    let rho0 = density(rho0)?;
    let mg = MomentumGrid::uniform(grid.lo, grid.hi, grid.points);
    let k0 = MomentumKernel::product(mg.clone(), |p| c((-p * p / (4.0 * width * width)).exp(), 0.0), &rho0);
    let sde = TiltedSde::new(&h, &n, TiltParameter::new(v)?, &mg);
    let steps = cfg.steps();
    let emits = cfg.emit_steps(steps);
    let times: Vec<f64> = emits.iter().map(|&s| s as f64 * cfg.dt).collect();
    let sq = cfg.dt.sqrt();
    let results = par_map(cfg.ensemble as u64, |i| -> Result<StreamRecord> {
        let mut rng = stream(cfg.seed, i);
        let mut s = MomentumKernelCont { kernel: k0.clone(), y: 0.0, t: 0.0 };
        let mut scratch = TiltedScratch::default();
        let record = (i as usize) < cfg.record_paths;
        let mut rec = StreamRecord { xs: Vec::new(), state: None, extra: Vec::new(), rows: Vec::new() };
        let mut next = 0;
        for step in 0..=steps {
            if emits[next] == step {
                rec.xs.push(s.y);
                if record {
                    rec.rows.push(vec![i as f64, s.t, s.y, s.kernel.mean_momentum()]);
                }
                next += 1;
            }
            if step < steps {
                sde.step_in_place(&mut s, cfg.dt, sq * normal(&mut rng), &mut scratch)?;
            }
        }
        rec.extra.push(s.kernel.mean_momentum());
        Ok(rec)
    });
    let (mut summary, ok) = aggregate(cfg, &times, results);
    summary.histograms.push(final_histogram("y_final", cfg, &ok));
    let pe = uniform_edges(grid.lo, grid.hi, grid.points - 1);
    summary.histograms.push(Histogram::from_samples("mean_momentum_final", pe, ok.iter().map(|r| r.extra[0])));
    let moments = moments_table(&summary);
    Ok(RunOutput { tables: vec![moments, path_table("paths.csv", &["stream", "t", "y", "mean_p"], &ok)], summary })
}

fn run_lindblad(cfg: &RunConfig, model: &ModelSpec, rho0: &MatrixSpec, dk: f64) -> Result<RunOutput> {
    let (h, n) = model.matrices()?;
    let rho0 = density(rho0)?;
    let edges = cfg.bins.edges();
    let steps = cfg.steps();
    let emits = cfg.emit_steps(steps);
    let mut table = Table::new("field_snapshots.csv", &["t", "x", "trace", "q1", "q2", "q3"]);
    let mut moments = Vec::new();
    for &s in emits.iter().filter(|&&s| s > 0) {
        let t = s as f64 * cfg.dt;
        let blocks = fourier_bin_blocks(&rho0, 0.0, &h, &n, model.nbar, t, &edges, dk)?;
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for (b, blk) in blocks.iter().enumerate() {
            let width = edges[b + 1] - edges[b];
            let x = 0.5 * (edges[b] + edges[b + 1]);
            let dens = blk / c(width, 0.0);
            let tr = dens.trace().re;
            let q = bloch(&dens);
            table.rows.push(vec![t, x, tr, q[0], q[1], q[2]]);
            let mass = blk.trace().re;
            m0 += mass;
            m1 += mass * x;
            m2 += mass * x * x;
        }
        let mean = m1 / m0;
        moments.push(MomentRow { t, mean, var: m2 / m0 - mean * mean, count: 1 });
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("kappa".into(), 1.0 + 2.0 * model.nbar);
    let summary = EnsembleSummary {
        experiment: cfg.experiment.name().into(),
        ensemble: 1,
        completed: 1,
        failures: Vec::new(),
        moments,
        internal_average: None,
        histograms: Vec::new(),
        metrics,
    };
    let mt = moments_table(&summary);
    Ok(RunOutput { summary, tables: vec![mt, table] })
}

/// One row of `ito_residuals.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItoRow {
    pub dim: usize,
    pub nbar: f64,
    pub seed: u64,
    pub leibniz: f64,
    pub duality: f64,
    pub unitarity: f64,
    pub fit_nbar_error: f64,
    pub fit_consistency: f64,
    pub fit_residual: f64,
}

impl ItoRow {
    pub fn worst(&self) -> f64 {
        [self.leibniz, self.duality, self.unitarity, self.fit_nbar_error, self.fit_consistency, self.fit_residual]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Residuals for one (dim, nbar, seed); the unitarity check uses a Hermitian momentum stand-in.
pub fn ito_row(dim: usize, nbar: f64, master: u64, seed: u64) -> Result<ItoRow> {
    let mut rng = stream(master, seed);
    let data = DilationData::random(dim, nbar, false, &mut rng);
    let a = random::gaussian(dim, &mut rng);
    let b = random::gaussian(dim, &mut rng);
    let rho = random::density(dim, &mut rng);
    let fit = derive_noise_coefficients(&data, 12, &mut rng)?;
    let herm = DilationData::random(dim, nbar, true, &mut rng);
    Ok(ItoRow {
        dim,
        nbar,
        seed,
        leibniz: leibniz_residual(&data, &a, &b)?,
        duality: duality_residual(&data, &a, &rho)?,
        unitarity: unitarity_drift_residual(&herm),
        fit_nbar_error: (fit.nbar - nbar).abs(),
        fit_consistency: fit.consistency,
        fit_residual: fit.residual,
    })
}

fn run_ito(cfg: &RunConfig, dims: &[usize], nbars: &[f64]) -> Result<RunOutput> {
    let combos: Vec<(usize, f64, u64)> = dims
        .iter()
        .flat_map(|&d| nbars.iter().flat_map(move |&nb| (0..cfg.ensemble as u64).map(move |s| (d, nb, s))))
        .collect();
    let results = par_map(combos.len() as u64, |i| {
        let (d, nb, s) = combos[i as usize];
        ito_row(d, nb, cfg.seed ^ (d as u64) << 32, s)
    });
    let mut table = Table::new(
        "ito_residuals.csv",
        &[
            "dim",
            "nbar",
            "seed",
            "leibniz",
            "duality",
            "unitarity",
            "fit_nbar_error",
            "fit_consistency",
            "fit_residual",
        ],
    );
    let mut failures = Vec::new();
    let mut metrics = BTreeMap::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(row) => {
                for (k, v) in [
                    ("max_leibniz", row.leibniz),
                    ("max_duality", row.duality),
                    ("max_unitarity", row.unitarity),
                    ("max_fit_nbar_error", row.fit_nbar_error),
                    ("max_fit_consistency", row.fit_consistency),
                    ("max_fit_residual", row.fit_residual),
                ] {
                    let e = metrics.entry(k.to_string()).or_insert(0.0f64);
                    *e = e.max(v);
                }
                table.rows.push(vec![
                    row.dim as f64,
                    row.nbar,
                    row.seed as f64,
                    row.leibniz,
                    row.duality,
                    row.unitarity,
                    row.fit_nbar_error,
                    row.fit_consistency,
                    row.fit_residual,
                ]);
            }
            Err(e) => failures.push(StreamFailure { stream: i as u64, error: e.to_string() }),
        }
    }
    let summary = EnsembleSummary {
        experiment: cfg.experiment.name().into(),
        ensemble: combos.len(),
        completed: table.rows.len(),
        failures,
        moments: Vec::new(),
        internal_average: None,
        histograms: Vec::new(),
        metrics,
    };
    Ok(RunOutput { summary, tables: vec![table] })
}

fn run_spin_half(cfg: &RunConfig, p: &SpinHalfParams, theta0: f64) -> Result<RunOutput> {
    let dt = cfg.dt.min(p.theta_dt());
    let steps = (cfg.horizon / dt).round() as usize;
    let emits = cfg.emit_steps(steps);
    let times: Vec<f64> = emits.iter().map(|&s| s as f64 * dt).collect();
    let runs = par_map(cfg.ensemble as u64, |i| {
        let mut rng = stream(cfg.seed, i);
        integrate_theta(p, theta0, steps as f64 * dt, dt, cfg.emit_every, i, &mut rng)
    });
    let mut path_rows = Table::new("spin_paths.csv", &["stream", "t", "theta", "q1", "q3", "x"]);
    let mut wait_rows = Table::new("waiting_times.csv", &["stream", "index", "wait"]);
    let results: Vec<Result<StreamRecord>> = runs
        .iter()
        .map(|r| {
            let path = r.path.as_ref().expect("stride > 0 records the path");
            // integrate_theta records every stride-th step; the final step is appended when it is off-stride.
            let mut xs = path.x.clone();
            if xs.len() < emits.len() {
                xs.push(r.x);
            }
            Ok(StreamRecord { xs, state: None, extra: Vec::new(), rows: Vec::new() })
        })
        .collect();
    for r in runs.iter().take(cfg.record_paths) {
        let path = r.path.as_ref().unwrap();
        for ((t, th), x) in path.t.iter().zip(&path.theta).zip(&path.x) {
            path_rows.rows.push(vec![path.stream as f64, *t, *th, th.sin(), th.cos(), *x]);
        }
    }
    for (i, r) in runs.iter().enumerate() {
        for (j, w) in r.waiting_times().iter().enumerate() {
            wait_rows.rows.push(vec![i as f64, j as f64, *w]);
        }
    }
    let (mut summary, ok) = aggregate(cfg, &times, results);
    summary.histograms.push(final_histogram("x_final", cfg, &ok));
    let tau = mean_wait_time(p, WaitMethod::Quadrature);
    if let Ok(tau) = tau {
        summary.metrics.insert("tau_quadrature".into(), tau);
        let waits: Vec<f64> = runs.iter().flat_map(|r| r.waiting_times()).collect();
        summary.histograms.push(Histogram::from_samples(
            "wait_over_tau",
            uniform_edges(0.0, 8.0, 32),
            waits.iter().map(|w| w / tau),
        ));
        if let Ok(js) = jump_statistics(&runs, tau) {
            summary.metrics.insert("waits".into(), js.waits.len() as f64);
            summary.metrics.insert("mean_wait".into(), 1.0 / js.fitted_rate);
            summary.metrics.insert("ks_distance".into(), js.ks_distance);
            summary.metrics.insert("lag1".into(), js.lag1);
        }
    }
    summary.metrics.insert("tau_asymptotic".into(), p.tau_asymptotic());
    summary.metrics.insert(
        "abs_cos_path_average".into(),
        runs.iter().map(|r| r.abs_cos_integral).sum::<f64>() / runs.iter().map(|r| r.horizon).sum::<f64>(),
    );
    if let Ok((mass, cosm)) = occupation_moments(p) {
        summary.metrics.insert("abs_cos_quadrature".into(), cosm / mass);
    }
    let moments = moments_table(&summary);
    Ok(RunOutput { tables: vec![moments, potential_table(p), path_rows, wait_rows], summary })
}

/// W, the unnormalized invariant density and the passage occupation density on (0, pi).
pub fn potential_table(p: &SpinHalfParams) -> Table {
    let pot = potential_and_invariant(p);
    let mut t = Table::new("potential.csv", &["theta", "w", "invariant_density", "occupation"]);
    const POINTS: usize = 400;
    for j in 1..POINTS {
        let th = PI * j as f64 / POINTS as f64;
        t.rows.push(vec![th, pot.w(th), pot.invariant_density(th), occupation_density(th, p).unwrap_or(f64::NAN)]);
    }
    t
}

fn run_discrete_walk(cfg: &RunConfig, sites: usize, u: TiltAngles, amps: &[C64]) -> Result<RunOutput> {
    let steps = cfg.horizon.round().max(1.0) as usize;
    let emits = cfg.emit_steps(steps);
    let times: Vec<f64> = emits.iter().map(|&s| s as f64).collect();
    let s0 = TiltedWalkState::new(amps.to_vec())?;
    let results = par_map(cfg.ensemble as u64, |i| -> Result<StreamRecord> {
        let mut rng = stream(cfg.seed, i);
        let mut s = s0.clone();
        let record = (i as usize) < cfg.record_paths;
        let mut rec = StreamRecord { xs: Vec::new(), state: None, extra: Vec::new(), rows: Vec::new() };
        let mut next = 0;
        for step in 0..=steps {
            if emits[next] == step {
                let m = s.masses();
                let mean_k: f64 = m.iter().enumerate().map(|(k, w)| k as f64 * w).sum();
                rec.xs.push(mean_k);
                if record {
                    let pos = s.position_amplitudes();
                    for k in 0..sites {
                        rec.rows.push(vec![i as f64, step as f64, k as f64, m[k], pos[k].norm_sqr()]);
                    }
                }
                next += 1;
            }
            if step < steps {
                s = tilted_walk_step(&s, u, rng.random::<f64>())?.0;
            }
        }
        let m = s.masses();
        rec.extra
            .push(m.iter().enumerate().fold((0, f64::MIN), |b, (k, &x)| if x > b.1 { (k, x) } else { b }).0 as f64);
        Ok(rec)
    });
    let (mut summary, ok) = aggregate(cfg, &times, results);
    let edges: Vec<f64> = (0..=sites).map(|k| k as f64 - 0.5).collect();
    summary.histograms.push(Histogram::from_samples("k_argmax_final", edges, ok.iter().map(|r| r.extra[0])));
    let moments = moments_table(&summary);
    let snaps = path_table("walk_snapshots.csv", &["stream", "step", "index", "momentum_mass", "position_prob"], &ok);
    Ok(RunOutput { tables: vec![moments, snaps], summary })
}

fn run_collapse(cfg: &RunConfig, sites: usize, u: TiltAngles, amps: &[C64], threshold: f64) -> Result<RunOutput> {
    let m0: Vec<f64> = amps.iter().map(|z| z.norm_sqr()).collect();
    let walk = MassWalk::new(sites, u);
    let max_steps = cfg.horizon.round().max(1.0) as usize;
    let runs =
        par_map(cfg.ensemble as u64, |i| collapse_run(&walk, &m0, max_steps, threshold, &mut stream(cfg.seed, i)));
    let mut table = Table::new("collapse_runs.csv", &["stream", "peak", "steps", "peak_mass"]);
    for (i, r) in runs.iter().enumerate() {
        table.rows.push(vec![i as f64, r.peak as f64, r.steps as f64, r.peak_mass]);
    }
    let edges: Vec<f64> = (0..=sites).map(|k| k as f64 - 0.5).collect();
    let hist = Histogram::from_samples("k_collapse", edges, runs.iter().map(|r| r.peak as f64));
    let n = runs.len() as f64;
    let tv = 0.5 * hist.counts.iter().zip(&m0).map(|(c, m)| (*c as f64 / n - m).abs()).sum::<f64>();
    let mut law = Table::new("collapse_law.csv", &["k", "initial_mass", "empirical"]);
    for k in 0..sites {
        law.rows.push(vec![k as f64, m0[k], hist.counts[k] as f64 / n]);
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("tv_distance".into(), tv);
    metrics.insert("unresolved".into(), runs.iter().filter(|r| r.peak_mass <= threshold).count() as f64);
    metrics.insert("mean_steps".into(), runs.iter().map(|r| r.steps as f64).sum::<f64>() / n);
    let summary = EnsembleSummary {
        experiment: cfg.experiment.name().into(),
        ensemble: cfg.ensemble,
        completed: runs.len(),
        failures: Vec::new(),
        moments: Vec::new(),
        internal_average: None,
        histograms: vec![hist],
        metrics,
    };
    Ok(RunOutput { summary, tables: vec![table, law] })
}

fn moments_table(s: &EnsembleSummary) -> Table {
    let mut t = Table::new("moments.csv", &["t", "mean", "var", "count"]);
    for m in &s.moments {
        t.rows.push(vec![m.t, m.mean, m.var, m.count as f64]);
    }
    t
}

/// Trajectory-average versus Fourier-propagated Lindblad bins at the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config_hash: String,
    pub paths: usize,
    pub failed: usize,
    pub outside: usize,
    pub sup_trace: f64,
    pub sup_matrix: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn compare(cfg: &RunConfig, tolerance: f64) -> Result<CompareReport> {
    cfg.validate()?;
    let Experiment::Trajectory { model, rho0 } = &cfg.experiment else {
        return Err(Error::ConfigInvalid("compare needs a trajectory experiment".into()));
    };
    let (h, n) = model.matrices()?;
    let rho0 = density(rho0)?;
    let steps = cfg.steps();
    let sq = cfg.dt.sqrt();
    let nbar = model.nbar;
    let finals = par_map(cfg.ensemble as u64, |i| -> Result<SimpleTrajState> {
        let mut rng = stream(cfg.seed, i);
        let mut s = SimpleTrajState::new(rho0.clone(), 0.0);
        for _ in 0..steps {
            let db = sq * normal(&mut rng);
            s = if nbar > 0.0 {
                thermal_step(&s, &h, &n, nbar, cfg.dt, db)?
            } else {
                simple_step(&s, &h, &n, cfg.dt, db)?
            };
        }
        Ok(s)
    });
    let failed = finals.iter().filter(|r| r.is_err()).count();
    let ok: Vec<SimpleTrajState> = finals.into_iter().filter_map(|r| r.ok()).collect();
    if ok.is_empty() {
        return Err(Error::ConfigInvalid("every trajectory failed".into()));
    }
    let edges = cfg.bins.edges();
    let reference = fourier_bin_blocks(&rho0, 0.0, &h, &n, nbar, steps as f64 * cfg.dt, &edges, 0.01)?;
    let (bins, outside) = bin_ensemble(&ok, &edges);
    let (sup_trace, sup_matrix) = compare_bins(&bins, &reference);
    Ok(CompareReport {
        config_hash: cfg.hash(),
        paths: ok.len(),
        failed,
        outside,
        sup_trace,
        sup_matrix,
        tolerance,
        pass: sup_matrix <= tolerance && failed == 0,
    })
}

/// Writes summary.json, histograms.jsonl, manifest.json and every table into `dir`.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&out.summary)? + "\n")?;
    let mut lines = String::new();
    for h in &out.summary.histograms {
        lines.push_str(&serde_json::to_string(h)?);
        lines.push('\n');
    }
    std::fs::write(dir.join("histograms.jsonl"), lines)?;
    for t in &out.tables {
        let mut w = csv::Writer::from_path(dir.join(&t.file))?;
        w.write_record(&t.header)?;
        for row in &t.rows {
            w.write_record(row.iter().map(|x| x.to_string()))?;
        }
        w.flush()?;
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        experiment: cfg.experiment.name().into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION").into(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oqbm::harness::{
    compare, run_ensemble, with_threads, write_outputs, Experiment, Packet, RunConfig, SCHEMA_VERSION,
};
use oqbm::Error;

/// Seeded ensembles of open quantum walk and Brownian-motion trajectories.
#[derive(Debug, Parser)]
#[command(name = "oqbm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run any experiment described by a config file.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Propagate the averaged density by Fourier transform (lindblad or trajectory config).
    Lindblad {
        #[command(flatten)]
        common: Common,
    },
    /// Ito-algebra residuals over random finite-dimensional stand-ins.
    VerifyIto {
        #[command(flatten)]
        common: Common,
        /// Comma-separated internal dimensions.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        dims: Vec<usize>,
        /// Comma-separated thermal occupations.
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        nbar: Vec<f64>,
        /// Random instances per (dim, nbar).
        #[arg(long, default_value_t = 3)]
        instances: usize,
    },
    /// Spin-half angle paths, waiting times and the W(theta) potential.
    SpinHalf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: Option<f64>,
        #[arg(long)]
        omega0: Option<f64>,
    },
    /// Momentum collapse of the tilted walk against the initial law.
    CollapseStats {
        #[command(flatten)]
        common: Common,
    },
    /// Trajectory-averaged bins against the Fourier-propagated density.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Pass threshold on the max-norm bin distance.
        #[arg(long, default_value_t = 5e-2)]
        tolerance: f64,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON, schema_version 1).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, env = "OQBM_THREADS")]
    threads: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of streams; overrides the config.
    #[arg(long)]
    ensemble: Option<usize>,
    /// Final time; overrides the config.
    #[arg(long)]
    horizon: Option<f64>,
    /// Time step; overrides the config.
    #[arg(long)]
    dt: Option<f64>,
}

/// Validation and usage problems exit 1, everything else 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigInvalid(_)
        | Error::NotSquare { .. }
        | Error::DimensionMismatch { .. }
        | Error::InvalidDensity(_)
        | Error::DegenerateDirection(_)
        | Error::NonSpdMetric => 1,
        _ => 2,
    }
}

impl Common {
    fn load(&self, fallback: impl FnOnce() -> RunConfig) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::Io(io) => Error::ConfigInvalid(format!("{}: {io}", p.display())),
                e => e,
            })?,
            None => fallback(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.ensemble {
            cfg.ensemble = n;
        }
        if let Some(t) = self.horizon {
            cfg.horizon = t;
        }
        if let Some(dt) = self.dt {
            cfg.dt = dt;
        }
        if let Some(o) = &self.out {
            cfg.output = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn require(&self) -> Result<RunConfig, Error> {
        if self.config.is_none() {
            return Err(Error::ConfigInvalid("--config is required".into()));
        }
        self.load(|| unreachable!())
    }
}

fn base(experiment: Experiment, seed: u64, ensemble: usize, dt: f64, horizon: f64, emit_every: usize) -> RunConfig {
    RunConfig {
        schema_version: SCHEMA_VERSION,
        experiment,
        seed,
        ensemble,
        dt,
        horizon,
        emit_every,
        record_paths: 0,
        bins: Default::default(),
        output: None,
    }
}

fn default_collapse() -> RunConfig {
    let packets = [(17.0, 0.0), (19.5, 1.1), (22.5, 2.3), (25.0, 4.0)]
        .map(|(center, phase)| Packet { center, width: 0.7, phase })
        .to_vec();
    let exp = Experiment::CollapseStats {
        sites: 64,
        theta: 0.6,
        phi: 0.6,
        packets,
        support: Some([16, 26]),
        threshold: 0.999,
    };
    base(exp, 101, 1000, 1.0, 20_000.0, 1)
}

fn run(cli: Cli) -> Result<(), Error> {
    let (cfg, threads) = match &cli.command {
        Command::Simulate { common } => (common.require()?, common.threads),
        Command::Lindblad { common } => {
            let mut cfg = common.require()?;
            if let Experiment::Trajectory { model, rho0 } = cfg.experiment {
                cfg.experiment = Experiment::Lindblad { model, rho0, dk: 0.01 };
                cfg.emit_every = ((cfg.horizon / cfg.dt).round() as usize / 4).max(1);
            }
            if !matches!(cfg.experiment, Experiment::Lindblad { .. }) {
                return Err(Error::ConfigInvalid("lindblad needs a lindblad or trajectory config".into()));
            }
            (cfg, common.threads)
        }
        Command::VerifyIto { common, dims, nbar, instances } => {
            let exp = Experiment::ItoVerify { dims: dims.clone(), nbars: nbar.clone() };
            let cfg = common.load(|| base(exp.clone(), 1212, *instances, 1.0, 1.0, 1))?;
            (cfg, common.threads)
        }
        Command::SpinHalf { common, a, omega0 } => {
            let exp = Experiment::SpinHalf { a: 4.0, omega0: 1.0, theta0: 0.0 };
            let mut cfg = common.load(|| {
                let mut c = base(exp, 808, 1000, 1e-3, 200.0, 1000);
                c.record_paths = 2;
                c
            })?;
            if let Experiment::SpinHalf { a: ca, omega0: co, .. } = &mut cfg.experiment {
                *ca = a.unwrap_or(*ca);
                *co = omega0.unwrap_or(*co);
            } else {
                return Err(Error::ConfigInvalid("spin-half needs a spin-half config".into()));
            }
            cfg.validate()?;
            (cfg, common.threads)
        }
        Command::CollapseStats { common } => {
            let cfg = common.load(default_collapse)?;
            if !matches!(cfg.experiment, Experiment::CollapseStats { .. }) {
                return Err(Error::ConfigInvalid("collapse-stats needs a collapse-stats config".into()));
            }
            (cfg, common.threads)
        }
        Command::Compare { common, tolerance } => {
            let cfg = common.require()?;
            let dir = out_dir(&cfg);
            let report = with_threads(common.threads, || compare(&cfg, *tolerance))??;
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("compare_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            println!(
                "compare: sup matrix distance {:.3e}, sup trace distance {:.3e}, tolerance {:.1e}, {} -> {}",
                report.sup_matrix,
                report.sup_trace,
                report.tolerance,
                if report.pass { "pass" } else { "fail" },
                dir.display()
            );
            return Ok(());
        }
    };
    let dir = out_dir(&cfg);
    let out = with_threads(threads, || run_ensemble(&cfg))??;
    let manifest = write_outputs(&dir, &cfg, &out)?;
    println!(
        "{}: {}/{} streams completed, config {} -> {}",
        manifest.experiment,
        out.summary.completed,
        out.summary.ensemble,
        &manifest.config_hash[..12],
        dir.display()
    );
    for f in &out.summary.failures {
        eprintln!("stream {} failed: {}", f.stream, f.error);
    }
    for (k, v) in &out.summary.metrics {
        println!("  {k} = {v}");
    }
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| PathBuf::from("runs").join(cfg.experiment.name()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use uqboltz_core::config::ExperimentConfig;
use uqboltz_core::experiment::{self, all_passed, Check};
use uqboltz_core::{Error, Result};

mod output;

use output::{file_entries, sha256_hex, OutDir, RunManifest};

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "uqboltz", version, about = "Stochastic-Galerkin Boltzmann experiments with an uncertain collision kernel")]
struct Cli {
    #[command(subcommand)]
    command: RunCommand,
}

#[derive(Clone, Copy)]
enum Suite {
    Validate,
    Tensors,
    Gap,
    Decay,
    Convergence,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Override the seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "UQBOLTZ_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum RunCommand {
    /// Check every assumption on the kernel, measure and basis.
    Validate(Common),
    /// Dump the Galerkin tensors and run the tensor sanity checks.
    Tensors(Common),
    /// Spectral gap and coercivity constant over the K sweep.
    Gap(Common),
    /// Energy decay rates over the scaling sweep.
    Decay(Common),
    /// Error against stochastic collocation over the K sweep.
    Convergence(Common),
}

impl RunCommand {
    fn split(self) -> (Suite, Common) {
        match self {
            RunCommand::Validate(c) => (Suite::Validate, c),
            RunCommand::Tensors(c) => (Suite::Tensors, c),
            RunCommand::Gap(c) => (Suite::Gap, c),
            RunCommand::Decay(c) => (Suite::Decay, c),
            RunCommand::Convergence(c) => (Suite::Convergence, c),
        }
    }
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Validate => "validate",
            Suite::Tensors => "tensors",
            Suite::Gap => "gap",
            Suite::Decay => "decay",
            Suite::Convergence => "convergence",
        }
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn load(args: &Common) -> Result<(ExperimentConfig, String)> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok((cfg, sha256_hex(text.as_bytes())))
}

fn run_suite(suite: Suite, cfg: &ExperimentConfig, out: &mut OutDir) -> Result<Vec<Check>> {
    Ok(match suite {
        Suite::Validate => {
            let r = experiment::validate(cfg)?;
            out.json("validate.json", &r)?;
            r.checks
        }
        Suite::Tensors => {
            let r = experiment::tensors(cfg)?;
            out.json("tensors.json", &r)?;
            r.checks
        }
        Suite::Gap => {
            let r = experiment::gap(cfg)?;
            for note in &r.notes {
                println!("note: {note}");
            }
            output::write_gap(out, &r)?;
            r.checks
        }
        Suite::Decay => {
            let r = experiment::decay(cfg)?;
            output::write_decay(out, &r)?;
            r.checks
        }
        Suite::Convergence => {
            let r = experiment::convergence(cfg)?;
            output::write_convergence(out, &r)?;
            r.checks
        }
    })
}

fn execute(suite: Suite, args: Common) -> ExitCode {
    let started = now();
    let (cfg, config_sha256) = match load(&args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("uqboltz: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        if n == 0 {
            eprintln!("uqboltz: --threads must be at least 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("uqboltz: cannot start worker threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut out = match OutDir::create(&args.out) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("uqboltz: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };

    // Anything that goes wrong past loading is a failed run, including a
    // dense operator that does not fit the budget.
    let checks = match pool.install(|| run_suite(suite, &cfg, &mut out)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("uqboltz: {} failed: {e}", suite.name());
            vec![Check::new(format!("{} completed", suite.name()), false, e.to_string())]
        }
    };
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let passed = all_passed(&checks);
    let manifest = file_entries(&out).map(|files| RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        command: suite.name().to_string(),
        config: display(&args.config),
        config_sha256,
        seed: cfg.seed,
        threads: pool.current_num_threads(),
        started,
        finished: now(),
        files,
        checks,
        passed,
    });
    if let Err(e) = manifest.and_then(|m| out.json("manifest.json", &m)) {
        eprintln!("uqboltz: {e}");
        return ExitCode::from(EXIT_FAILED);
    }
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILED)
    }
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (suite, args) = cli.command.split();
    execute(suite, args)
}

//! `vqsim`: batch experiment runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use vqsim_core::circuits::Backend;
use vqsim_core::experiment::{self, Command, ExperimentConfig};
use vqsim_core::VqError;

#[derive(Parser, Debug)]
#[command(name = "vqsim", version, about = "Variational quantum circuit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Run the experiment named by the config's `command` field.
    Run(Flags),
    /// Train a classifier or QNN regressor.
    Train(Flags),
    /// Bond entanglement profile over layer counts.
    EntanglementScan(Flags),
    /// Fidelity-distribution and spectrum statistics against Haar states.
    Expressibility(Flags),
    /// Gradient variance of random circuits or the toy cost model.
    Gradvar(Flags),
    /// Fourier spectrum of a re-uploading model.
    Fourier(Flags),
    /// Generalisation bound from spectrum size and sample count.
    Bound(Flags),
    /// Noisy-channel inversion and self-consistency sweep.
    Deconvolve(Flags),
    /// Quantum neuron equivalence, noise and training experiments.
    Neuron(Flags),
    /// Two-qubit autoencoder training.
    Autoencoder(Flags),
    /// Circuit learning that maps a target state back to |0...0>.
    Unsample(Flags),
}

#[derive(Args, Debug, Clone)]
struct Flags {
    /// Config file (JSON).
    #[arg(value_name = "CONFIG")]
    config_pos: Option<PathBuf>,
    /// Config file (JSON); same as the positional argument.
    #[arg(long = "config", value_name = "PATH", conflicts_with = "config_pos")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel draws.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (VQSIM_OUT takes precedence).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Simulation backend.
    #[arg(long, value_parser = parse_backend)]
    backend: Option<Backend>,
    /// Maximum MPS bond dimension.
    #[arg(long = "chi-max")]
    chi_max: Option<usize>,
    /// Shots per setting, or `exact`.
    #[arg(long, value_parser = parse_shots)]
    shots: Option<Shots>,
}

#[derive(Debug, Clone, Copy)]
enum Shots {
    Exact,
    Count(u64),
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    match s {
        "dense" => Ok(Backend::Dense),
        "mps" => Ok(Backend::Mps),
        _ => Err(format!("expected dense or mps, got '{s}'")),
    }
}

fn parse_shots(s: &str) -> Result<Shots, String> {
    if s == "exact" {
        return Ok(Shots::Exact);
    }
    match s.parse::<u64>() {
        Ok(0) | Err(_) => Err(format!("expected a positive integer or 'exact', got '{s}'")),
        Ok(n) => Ok(Shots::Count(n)),
    }
}

fn fail(code: u8, e: &VqError) -> ExitCode {
    eprintln!("vqsim: {e}");
    ExitCode::from(code)
}

fn load_config(path: Option<&Path>, expected: Option<Command>) -> Result<ExperimentConfig, VqError> {
    match (path, expected) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| VqError::Config(format!("cannot read {}: {e}", p.display())))?;
            let cfg = ExperimentConfig::from_json(&text)?;
            if let Some(cmd) = expected {
                if cfg.command != cmd {
                    return Err(VqError::Config(format!("config is for '{}', not '{cmd}'", cfg.command)));
                }
            }
            Ok(cfg)
        }
        (None, Some(cmd)) => Ok(ExperimentConfig::new(cmd)),
        (None, None) => Err(VqError::Config("run needs a config file".into())),
    }
}

fn apply_flags(cfg: &mut ExperimentConfig, f: &Flags) {
    if let Some(s) = f.seed {
        cfg.seed = s;
    }
    if let Some(b) = f.backend {
        cfg.backend = b;
    }
    if let Some(c) = f.chi_max {
        cfg.truncation.chi_max = c;
    }
    match f.shots {
        Some(Shots::Exact) => cfg.shots = None,
        Some(Shots::Count(n)) => cfg.shots = Some(n),
        None => {}
    }
    if let Ok(dir) = std::env::var("VQSIM_OUT") {
        if !dir.is_empty() {
            cfg.output_dir = Some(PathBuf::from(dir));
            return;
        }
    }
    if let Some(o) = &f.out {
        cfg.output_dir = Some(o.clone());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (flags, expected) = match cli.command {
        Sub::Run(f) => (f, None),
        Sub::Train(f) => (f, Some(Command::Train)),
        Sub::EntanglementScan(f) => (f, Some(Command::EntanglementScan)),
        Sub::Expressibility(f) => (f, Some(Command::Expressibility)),
        Sub::Gradvar(f) => (f, Some(Command::Gradvar)),
        Sub::Fourier(f) => (f, Some(Command::Fourier)),
        Sub::Bound(f) => (f, Some(Command::Bound)),
        Sub::Deconvolve(f) => (f, Some(Command::Deconvolve)),
        Sub::Neuron(f) => (f, Some(Command::Neuron)),
        Sub::Autoencoder(f) => (f, Some(Command::Autoencoder)),
        Sub::Unsample(f) => (f, Some(Command::Unsample)),
    };
    if let Some(j) = flags.jobs {
        if j == 0 {
            return fail(2, &VqError::Config("--jobs must be at least 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            return fail(1, &VqError::Invalid(e.to_string()));
        }
    }
    let path = flags.config.as_deref().or(flags.config_pos.as_deref());
    let mut cfg = match load_config(path, expected) {
        Ok(c) => c,
        Err(e) => return fail(2, &e),
    };
    apply_flags(&mut cfg, &flags);
    let out_dir = experiment::output_dir(&cfg);

    let start = Instant::now();
    let resolved = match experiment::resolve(cfg) {
        Ok(r) => r,
        Err(e) => return fail(2, &e),
    };
    let out = match experiment::execute(&resolved) {
        Ok(o) => o,
        Err(e @ VqError::Config(_)) => return fail(2, &e),
        Err(e) => return fail(1, &e),
    };
    let rec = match experiment::record(&resolved, &out) {
        Ok(r) => r,
        Err(e) => return fail(1, &e),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let mut log = format!(
        "vqsim {}\ncommand: {}\ninput_hash: {}\nseed: {}\nthreads: {}\nwall_clock_s: {elapsed:.3}\n",
        rec.version,
        rec.command,
        rec.input_hash,
        resolved.config.seed,
        rayon::current_num_threads()
    );
    for (name, rows) in experiment::table_summary(&out) {
        log.push_str(&format!("table {name}.csv: {rows} rows\n"));
    }
    for n in &out.notes {
        log.push_str(&format!("note: {n}\n"));
    }
    if let Err(e) = experiment::write_outputs(&out_dir, &rec, &out, &log) {
        return fail(1, &e);
    }
    println!("{}", out_dir.join("result.json").display());
    ExitCode::SUCCESS
}

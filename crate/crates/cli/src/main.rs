//! `hanna`: profile, search, sample, retrain, sweep and filter from one
//! binary.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use hanna_core::analysis::{self, read_records, write_records, SweepSetup};
use hanna_core::childnet::{childnet_cost, sample_childnet, train_childnet, ChildNet};
use hanna_core::costmodel::{profile, CostTable, Metric};
use hanna_core::data::{stratified_split, Dataset};
use hanna_core::oracle::{self, MicroSpace};
use hanna_core::searchspace::{build_macro, ArchSource, MacroArch};
use hanna_core::supernet::Theta;
use hanna_core::trainer::run_search;
use hanna_core::Error;

use config::{ArchChoice, RunConfig};

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// A failed command: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn io(context: &Path, err: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_IO,
            message: format!("{}: {err}", context.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Shape(_) | Error::Invalid(_) | Error::Format { .. } => EXIT_VALIDATION,
            Error::Io(_) => EXIT_IO,
            Error::Csv(c) if c.is_io_error() => EXIT_IO,
            Error::Csv(_) => EXIT_VALIDATION,
            Error::NonFinite { .. } => EXIT_NUMERICAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Hardware-aware differentiable architecture search at laptop scale.
#[derive(Parser, Debug)]
#[command(name = "hanna", version)]
struct Cli {
    /// Run configuration file (flat `section.key=value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the search, child training and oracle streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fixed-order sequential execution for byte-identical outputs.
    #[arg(long, global = true)]
    strict: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write latency and energy lookup tables from the device model.
    Profile,
    /// Run the supernet search; writes theta snapshots and search_log.csv.
    Search,
    /// Extract the argmax child from a theta file.
    Sample {
        /// Theta file written by `search`.
        theta: PathBuf,
    },
    /// Retrain a child from scratch and report accuracy, latency and energy.
    TrainChild {
        /// Child file written by `sample`.
        child: PathBuf,
    },
    /// Search, sample and retrain once per knob setting; writes sweep.csv.
    Sweep,
    /// Keep the Pareto-optimal rows of a sweep CSV; writes pareto.csv.
    Pareto {
        /// Sweep CSV.
        csv: PathBuf,
    },
    /// Enumerate a random micro search space and compare exact and relaxed
    /// expectations.
    Oracle,
}

fn arch_of(cfg: &RunConfig, num_classes: usize) -> Result<MacroArch, Failure> {
    let arch = match &cfg.arch {
        ArchChoice::Preset(p) => build_macro(ArchSource::Preset(p), num_classes)?,
        ArchChoice::Explicit(e) => build_macro(ArchSource::Explicit(e), num_classes)?,
    };
    Ok(arch)
}

fn ensure_out(cfg: &RunConfig) -> Result<&Path, Failure> {
    fs::create_dir_all(&cfg.out).map_err(|e| Failure::io(&cfg.out, e))?;
    Ok(&cfg.out)
}

fn write(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn load_table(path: &Path, metric: Metric) -> Result<CostTable, Failure> {
    let t = CostTable::load(path)?;
    if t.metric != metric {
        return Err(Failure::validation(format!(
            "{} holds a {} table, expected {metric}",
            path.display(),
            t.metric
        )));
    }
    Ok(t)
}

/// Configured tables, or a fresh profile when none are given.
fn tables(cfg: &RunConfig, arch: &MacroArch) -> Result<(CostTable, CostTable), Failure> {
    let (lat, ener) = match (&cfg.lat_table, &cfg.ener_table) {
        (Some(l), Some(e)) => (load_table(l, Metric::Latency)?, load_table(e, Metric::Energy)?),
        (None, None) => profile(&cfg.device, arch)?,
        _ => {
            return Err(Failure::validation(
                "set both tables.latency and tables.energy, or neither",
            ))
        }
    };
    lat.check_matches(arch)?;
    ener.check_matches(arch)?;
    Ok((lat, ener))
}

/// Standardized dataset split into (search, held-out).
fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), Failure> {
    let mut ds = match &cfg.data.path {
        Some(p) => Dataset::load_raw(p)?,
        None => Dataset::synthetic(&cfg.data.synthetic)?,
    };
    ds.standardize();
    Ok(stratified_split(&ds, 1.0 - cfg.data.holdout, cfg.search.seed)?)
}

fn cmd_profile(cfg: &RunConfig) -> CmdResult {
    cfg.device.validate()?;
    let arch = arch_of(cfg, cfg.data.synthetic.classes)?;
    let (lat, ener) = profile(&cfg.device, &arch)?;
    let out = ensure_out(cfg)?;
    for (table, name) in [(&lat, "lat_lookup.txt"), (&ener, "ener_lookup.txt")] {
        let p = out.join(name);
        write(&p, &table.to_text())?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_search(cfg: &RunConfig) -> CmdResult {
    let (search_set, _) = datasets(cfg)?;
    let arch = arch_of(cfg, search_set.num_classes)?;
    let (lat, ener) = tables(cfg, &arch)?;
    let out = ensure_out(cfg)?;
    let config = hanna_core::trainer::SearchConfig {
        log_dir: Some(out.to_path_buf()),
        ..cfg.search.clone()
    };
    let result = run_search(&config, &arch, (&lat, &ener), &search_set)?;
    let last = result.logs.last().expect("validated config runs at least one epoch");
    let theta_path = out.join("theta.txt");
    result
        .theta
        .save(&theta_path, last.epoch, last.tau)
        .map_err(Failure::from)?;
    println!(
        "searched {} epochs; final weight-phase ce {:.4} acc {:.3}",
        result.logs.len(),
        last.weights.ce,
        last.weights.acc
    );
    println!("wrote {} and {}", theta_path.display(), out.join("search_log.csv").display());
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, theta_path: &Path) -> CmdResult {
    let (theta, _, _) = Theta::load(theta_path)?;
    let arch = arch_of(cfg, cfg.data.synthetic.classes)?;
    let child = sample_childnet(&theta, &arch)?;
    let (lat, ener) = tables(cfg, &arch)?;
    let (l, e) = childnet_cost(&child, &lat, &ener)?;
    let out = ensure_out(cfg)?;
    let path = out.join("child.txt");
    child.save(&path)?;
    println!("choices {:?}", child.choices);
    println!("latency_s {l}\nenergy_j {e}");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_train_child(cfg: &RunConfig, child_path: &Path) -> CmdResult {
    let child = ChildNet::load(child_path)?;
    let (train, held_out) = datasets(cfg)?;
    let arch = arch_of(cfg, train.num_classes)?;
    if child.arch != arch.name {
        return Err(Failure::validation(format!(
            "child was sampled from '{}', configured architecture is '{}'",
            child.arch, arch.name
        )));
    }
    let (lat, ener) = tables(cfg, &arch)?;
    let (l, e) = childnet_cost(&child, &lat, &ener)?;
    let child_cfg = hanna_core::childnet::ChildTrainConfig {
        seed: cfg.search.seed,
        ..cfg.child.clone()
    };
    let acc = train_childnet(&child, &arch, &train, &held_out, &child_cfg)?;
    let report = format!("accuracy={acc}\nlatency_s={l}\nenergy_j={e}\n");
    let out = ensure_out(cfg)?;
    write(&out.join("child_report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> CmdResult {
    let grid = cfg.knob_grid()?;
    let (train, held_out) = datasets(cfg)?;
    let arch = arch_of(cfg, train.num_classes)?;
    let (lat, ener) = tables(cfg, &arch)?;
    let out = ensure_out(cfg)?;
    let child_cfg = cfg.child.clone();
    let setup = SweepSetup {
        base: &cfg.search,
        arch: &arch,
        tables: (&lat, &ener),
        search_data: &train,
        child_train: &train,
        child_test: &held_out,
        child: &child_cfg,
    };
    let path = out.join("sweep.csv");
    let records = analysis::sweep(&grid, &setup, Some(&path))?;
    println!(
        "{} of {} sweep points succeeded; wrote {}",
        records.len(),
        grid.len(),
        path.display()
    );
    Ok(())
}

fn cmd_pareto(cfg: &RunConfig, csv: &Path) -> CmdResult {
    let records = read_records(csv)?;
    if records.is_empty() {
        return Err(Failure::validation(format!("{} has no records", csv.display())));
    }
    let front = analysis::pareto_front(&records);
    let out = ensure_out(cfg)?;
    let path = out.join("pareto.csv");
    write_records(&path, &front)?;
    println!("{} of {} records are Pareto-optimal; wrote {}", front.len(), records.len(), path.display());
    Ok(())
}

fn cmd_oracle(cfg: &RunConfig) -> CmdResult {
    let o = &cfg.oracle;
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let space = MicroSpace::random(&mut rng, o.layers, o.candidates)?;
    let logits = (0..o.layers * o.candidates)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let theta = Theta::new(o.layers, o.candidates, logits)?;
    let knobs = cfg.search.knobs;
    let all = oracle::enumerate(&space);
    let probs = oracle::architecture_probabilities(&theta, &space)?;
    let front = oracle::cost_pareto_set(&all);
    let mut r = String::new();
    let _ = writeln!(r, "# layers={} candidates={} architectures={}", o.layers, o.candidates, all.len());
    let _ = writeln!(r, "index,choices,latency,energy,ce,probability,cost_pareto");
    for (i, (a, p)) in all.iter().zip(&probs).enumerate() {
        let choices: Vec<String> = a.child.choices.iter().map(usize::to_string).collect();
        let _ = writeln!(
            r,
            "{i},{},{},{},{},{p},{}",
            choices.join(" "),
            a.lat,
            a.ener,
            a.ce,
            front.contains(&i)
        );
    }
    let exact = oracle::exact_expected_loss(&theta, &space, &knobs)?;
    let relaxed = oracle::relaxed_expected_loss(&theta, &space, &knobs)?;
    let _ = writeln!(r, "# exact_expected_loss={exact}");
    let _ = writeln!(r, "# relaxed_expected_loss={relaxed}");
    let _ = writeln!(r, "# relaxation_gap={}", relaxed - exact);
    let out = ensure_out(cfg)?;
    write(&out.join("oracle_report.txt"), &r)?;
    print!("{r}");
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.search.seed = seed;
        cfg.oracle.seed = seed;
    }
    if cli.strict {
        cfg.search.strict = true;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    cfg.check_paths()?;
    match &cli.command {
        Command::Profile => cmd_profile(&cfg),
        Command::Search => cmd_search(&cfg),
        Command::Sample { theta } => cmd_sample(&cfg, theta),
        Command::TrainChild { child } => cmd_train_child(&cfg, child),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Pareto { csv } => cmd_pareto(&cfg, csv),
        Command::Oracle => cmd_oracle(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

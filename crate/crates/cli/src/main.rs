use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pmtx_core::harness::{self, CrashTestSummary, RunOptions};
use pmtx_core::report;
use pmtx_core::workload::PRESETS;
use pmtx_core::{Config, KeyDistribution, LogMode, Policy, WorkloadSpec};

#[derive(Parser)]
#[command(
    name = "pmtx",
    version,
    about = "Flush-eliding persistent-memory transactions on an emulated cache"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a workload and report flush, barrier and dirtiness counters.
    Run(RunArgs),
    /// Crash, recover and check many seeded executions.
    Crashtest(CrashArgs),
    /// Compare direct object flushing with checksum creation and update.
    Microbench(MicroArgs),
    /// Convert saved run results between JSON and CSV.
    Report(ReportArgs),
    /// Print the effective configuration document.
    Config(ConfigArgs),
    /// List the built-in workload presets.
    Workloads,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyChoice {
    Lru,
    Plru,
    Bip,
    Random,
    All,
}

impl PolicyChoice {
    fn policies(self) -> Vec<Policy> {
        match self {
            PolicyChoice::Lru => vec![Policy::Lru],
            PolicyChoice::Plru => vec![Policy::Plru],
            PolicyChoice::Bip => vec![Policy::Bip],
            PolicyChoice::Random => vec![Policy::Random],
            PolicyChoice::All => vec![Policy::Lru, Policy::Plru, Policy::Bip, Policy::Random],
        }
    }
}

#[derive(Args)]
struct WorkloadArgs {
    /// Preset name or path to a JSON workload document.
    #[arg(long, default_value = "ycsb-a")]
    workload: String,
    #[arg(long, default_value = "undo")]
    mode: LogMode,
    /// Override the workload's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of operations.
    #[arg(long)]
    ops: Option<u64>,
    /// Override the number of preloaded records.
    #[arg(long)]
    objects: Option<u64>,
    /// Override the key distribution (uniform, zipfian[:theta], latest[:theta]).
    #[arg(long)]
    distribution: Option<KeyDistribution>,
    /// Concurrent clients.
    #[arg(long, default_value_t = 1)]
    clients: usize,
    /// Allocate fields and values independently instead of as packed pairs.
    #[arg(long)]
    split: bool,
    /// Percentage of writing transactions that abort.
    #[arg(long, default_value_t = 0)]
    abort_percent: u32,
    /// Volatile cache lines touched per operation.
    #[arg(long)]
    dram_lines: Option<u32>,
    /// JSON configuration document (cache geometry, pools, tracker).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Roll logically committed redo transactions forward during recovery.
    #[arg(long)]
    roll_forward: bool,
}

impl WorkloadArgs {
    fn spec(&self) -> Result<WorkloadSpec> {
        let mut spec = WorkloadSpec::resolve(&self.workload)
            .with_context(|| format!("loading workload {}", self.workload))?;
        if let Some(s) = self.seed {
            spec = spec.with_seed(s);
        }
        if let Some(n) = self.ops {
            spec = spec.with_ops(n);
        }
        if let Some(n) = self.objects {
            spec = spec.with_objects(n);
        }
        if let Some(d) = self.distribution {
            spec.distribution = d;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Options for `policy`, starting from `base` unless a configuration
    /// document was given.
    fn options(&self, base: RunOptions, policy: Option<Policy>) -> Result<RunOptions> {
        let mut opts = base;
        if let Some(path) = &self.config {
            opts.config = load_config(path)?;
        }
        opts.mode = self.mode;
        opts.clients = self.clients;
        opts.pair_alloc = !self.split;
        opts.abort_percent = self.abort_percent;
        opts.recovery.roll_forward_redo = self.roll_forward;
        if let Some(d) = self.dram_lines {
            opts.dram_lines_per_op = d;
        }
        if let Some(p) = policy {
            opts.config.cache.policy = p;
        }
        if let Some(s) = self.seed {
            opts.config.cache.seed = s;
        }
        Ok(opts)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Defer object flushes to the locality tracker.
    #[arg(long, visible_alias = "elide", default_value = "on")]
    archapt: Switch,
    /// Cache replacement policy; overrides the configuration document.
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Write the result here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CrashArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long, value_enum, default_value = "all")]
    policy: PolicyChoice,
    #[arg(long, default_value_t = 20)]
    crashes: u32,
    /// Crash repeatedly inside one long execution instead of once per run.
    #[arg(long)]
    interleaved: bool,
    /// Exit with a failure status if any crash broke a guarantee.
    #[arg(long)]
    assert: bool,
    /// Write the full JSON summaries here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MicroArgs {
    /// Object size in bytes.
    #[arg(long, default_value_t = 2048)]
    size: u64,
    #[arg(long, default_value_t = 1024)]
    count: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON files holding one result or an array of results.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Validate and print this document instead of the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: Config =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = io::stdout().lock();
            let nl = if text.ends_with('\n') { "" } else { "\n" };
            match write!(out, "{text}{nl}").and_then(|_| out.flush()) {
                Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let spec = a.workload.spec()?;
    let mut opts = a.workload.options(RunOptions::default(), a.policy)?;
    opts.elide = a.archapt == Switch::On;
    let r = harness::run(&spec, &opts)?;
    eprintln!("{} ops in {:.0} ops/s", r.ops, r.ops_per_sec);
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&r)?,
        Format::Csv => report::to_csv(std::slice::from_ref(&r))?,
    };
    emit(a.out.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_crashtest(a: CrashArgs) -> Result<ExitCode> {
    let spec = a.workload.spec()?;
    let mut violations = Vec::new();
    let mut docs = Vec::new();
    println!(
        "{:<12} {:<5} {:<7} {:>7} {:>7} {:>7}",
        "workload", "mode", "policy", "I_obj", "DI_obj", "CC_obj"
    );
    for policy in a.policy.policies() {
        let base = RunOptions::crash_scale(a.workload.mode, policy);
        let opts = a.workload.options(base, Some(policy))?;
        let (totals, v, doc) = if a.interleaved {
            let s = harness::interleaved_crashes(&spec, &opts, a.crashes)?;
            (s.totals.clone(), s.violations(), serde_json::to_value(&s)?)
        } else {
            let s: CrashTestSummary = harness::crashtest(&spec, &opts, a.crashes)?;
            (s.totals.clone(), s.violations(), serde_json::to_value(&s)?)
        };
        println!(
            "{:<12} {:<5} {:<7} {:>7} {:>7} {:>7}",
            spec.name, opts.mode, policy, totals.inconsistent, totals.detected, totals.uncorrected
        );
        violations.extend(v);
        docs.push(doc);
    }
    if let Some(p) = &a.out {
        emit(Some(p), &serde_json::to_string_pretty(&docs)?)?;
    }
    for v in &violations {
        eprintln!("violation: {v}");
    }
    if a.assert && !violations.is_empty() {
        eprintln!("{} violations", violations.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_microbench(a: MicroArgs) -> Result<ExitCode> {
    let m = harness::microbench_checksum(a.size, a.count, a.seed)?;
    eprintln!(
        "packed page: {} checksum vs {} object block flushes; {} B objects: create/flush {:.3}, update/flush {:.3}",
        m.full_page.checksum_flushes, m.full_page.object_flushes, m.object_size, m.create_ratio, m.update_ratio
    );
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&m)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(a: ReportArgs) -> Result<ExitCode> {
    let mut all = Vec::new();
    for p in &a.input {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        all.extend(
            report::parse_results(&text).with_context(|| format!("parsing {}", p.display()))?,
        );
    }
    let text = match a.format {
        Format::Json => report::to_json(&all)?,
        Format::Csv => report::to_csv(&all)?,
    };
    emit(a.out.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_config(a: ConfigArgs) -> Result<ExitCode> {
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => Config::default(),
    };
    emit(None, &serde_json::to_string_pretty(&cfg)?)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Crashtest(a) => cmd_crashtest(a),
        Command::Microbench(a) => cmd_microbench(a),
        Command::Report(a) => cmd_report(a),
        Command::Config(a) => cmd_config(a),
        Command::Workloads => {
            for p in PRESETS {
                let s = WorkloadSpec::preset(p).expect("built-in preset");
                println!("{p:<12} {} {}", s.mix, s.distribution);
            }
            Ok(ExitCode::SUCCESS)
        }
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(pm) = e.downcast_ref::<pmtx_core::Error>() {
                if matches!(pm, pmtx_core::Error::Config(_)) {
                    return ExitCode::from(2);
                }
            }
            ExitCode::FAILURE
        }
    }
}

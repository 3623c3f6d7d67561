//! `evidence-select`: generate synthetic bags, train the gated selector,
//! run diagnostics, sweeps, ablations and the brute-force oracles.

mod tables;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use evsel_core::diagnostics::{self, BagContext, DEFAULT_SWEEP_BUDGETS};
use evsel_core::recovery::{self, EvidenceRecord};
use evsel_core::synthbag::{self, GenConfig};
use evsel_core::{checkpoint, oracle, training, Error, ExperimentConfig, InjectionMode, Result, Split};

#[derive(Parser)]
#[command(name = "evidence-select", version, about = "Grounded evidence selection for multiple-instance bags")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted evidence.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus a metric log.
    Train(TrainArgs),
    /// Run the sufficiency / necessity / recoverability diagnostics.
    Diagnose(DiagnoseArgs),
    /// Retrain across evidence budgets.
    Sweep(SweepArgs),
    /// Train the component-ablation ladder.
    Ablate(AblateArgs),
    /// Run the brute-force oracle suites.
    Oracle(OracleArgs),
    /// Print the version.
    Version,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_bags: Option<usize>,
    /// Zero noise and no distractors.
    #[arg(long)]
    noiseless: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path. The metric log goes to `<out>.log.jsonl`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mode: Option<InjectionMode>,
    /// Evidence budget rho.
    #[arg(long)]
    budget: Option<f64>,
    /// Keep the selector temperature fixed at this value.
    #[arg(long)]
    fixed_temperature: Option<f64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: PathBuf,
    /// Also write the budget-matched table as CSV.
    #[arg(long)]
    emit_csv: Option<PathBuf>,
    /// Write recovered evidence subsets as JSON lines.
    #[arg(long)]
    evidence: Option<PathBuf>,
    #[arg(long)]
    split: Option<SplitArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds for the stability study.
    #[arg(long, value_delimiter = ',')]
    stability_seeds: Vec<u64>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    emit_csv: Option<PathBuf>,
    /// Comma-separated budgets; defaults to the standard grid.
    #[arg(long, value_delimiter = ',')]
    budgets: Vec<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    emit_csv: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OracleArgs {
    /// Small instances only (N <= 10).
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(arg: &ConfigArg) -> Result<ExperimentConfig> {
    match &arg.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".log.jsonl");
    PathBuf::from(name)
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    resolved_config: &'a ExperimentConfig,
    #[serde(flatten)]
    body: T,
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if args.noiseless {
        cfg.generate = GenConfig {
            seed: cfg.generate.seed,
            num_bags: cfg.generate.num_bags,
            ..GenConfig::noiseless()
        };
    }
    if let Some(seed) = args.seed {
        cfg.generate.seed = seed;
    }
    if let Some(n) = args.num_bags {
        cfg.generate.num_bags = n;
    }
    cfg.validate()?;
    let ds = synthbag::generate_dataset(&cfg.generate)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    synthbag::write_dataset(&ds, &args.out)?;
    let echo = args.out.join("config.toml");
    fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))?;
    println!("wrote {} bags to {}", ds.bags.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    let t = &mut cfg.train;
    if let Some(seed) = args.seed {
        t.seed = seed;
    }
    if let Some(e) = args.epochs {
        t.epochs = e;
    }
    if let Some(m) = args.mode {
        t.mode = m;
    }
    if let Some(b) = args.budget {
        t.budget = b;
    }
    if let Some(temp) = args.fixed_temperature {
        t.temperature = evsel_core::AnnealSchedule::constant(temp);
    }
    cfg.validate()?;
    let ds = synthbag::read_dataset(&args.data)?;
    let state = training::train(&ds, &cfg.train)?;
    checkpoint::save(&state.model, &args.out)?;

    let log = log_path(&args.out);
    let mut out = fs::File::create(&log).map_err(|e| Error::io(&log, e))?;
    let mut lines = vec![serde_json::to_string(&serde_json::json!({ "config": cfg }))?];
    for entry in &state.log {
        lines.push(serde_json::to_string(entry)?);
    }
    for line in lines {
        writeln!(out, "{line}").map_err(|e| Error::io(&log, e))?;
    }
    if let Some(last) = state.log.last() {
        println!(
            "epoch {} val_accuracy {:.4} val_macro_f1 {:.4} mean_gate {:.4}",
            last.epoch, last.val_accuracy, last.val_macro_f1, last.val_mean_gate
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(split) = args.split {
        cfg.diagnostics.split = split.into();
    }
    if let Some(seed) = args.seed {
        cfg.diagnostics.seed = seed;
    }
    if !args.stability_seeds.is_empty() {
        cfg.diagnostics.stability_seeds = args.stability_seeds.clone();
    }
    cfg.validate()?;
    let model = checkpoint::load(&args.ckpt)?;
    let ds = synthbag::read_dataset(&args.data)?;
    let report = diagnostics::diagnose(&model, &ds, &cfg.recovery, &cfg.diagnostics, Some(&cfg.train))?;
    write_json(&args.report, &Envelope { resolved_config: &cfg, body: &report })?;
    if let Some(path) = &args.emit_csv {
        tables::write_snr_csv(path, &report)?;
    }
    if let Some(path) = &args.evidence {
        let bags = ds.split(cfg.diagnostics.split);
        let mut records = Vec::new();
        if model.gating {
            for bag in bags {
                let ctx: BagContext<'_> = diagnostics::bag_context(&model, bag, &ds.anchors)?;
                let subset = ctx.recover(&cfg.recovery).expect("gated model")?;
                records.push(EvidenceRecord::new(&bag.id, &subset));
            }
        }
        recovery::write_evidence(path, &records)?;
    }
    println!("{}", tables::summary_line(&report));
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let budgets = if args.budgets.is_empty() {
        DEFAULT_SWEEP_BUDGETS.to_vec()
    } else {
        args.budgets.clone()
    };
    let ds = synthbag::read_dataset(&args.data)?;
    let rows = diagnostics::budget_sweep(&ds, &cfg.train, &cfg.recovery, &cfg.diagnostics, &budgets)?;
    #[derive(Serialize)]
    struct Body<'a> {
        rows: &'a [diagnostics::SweepRow],
    }
    write_json(&args.out, &Envelope { resolved_config: &cfg, body: Body { rows: &rows } })?;
    if let Some(path) = &args.emit_csv {
        tables::write_rows_csv(path, &rows)?;
    }
    for row in &rows {
        println!(
            "budget {:.2}{} macro_f1 {:.4} evidence_fraction {}",
            row.budget,
            if row.operating_point { "*" } else { "" },
            row.metrics.macro_f1,
            tables::opt(row.metrics.evidence_fraction)
        );
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let ds = synthbag::read_dataset(&args.data)?;
    let rows = diagnostics::ablation_suite(&ds, &cfg.train, &cfg.recovery, &cfg.diagnostics)?;
    #[derive(Serialize)]
    struct Body<'a> {
        rows: &'a [diagnostics::AblationRow],
    }
    write_json(&args.out, &Envelope { resolved_config: &cfg, body: Body { rows: &rows } })?;
    if let Some(path) = &args.emit_csv {
        tables::write_rows_csv(path, &rows)?;
    }
    for row in &rows {
        println!(
            "{:?} macro_f1 {:.4} cd_gap {} complement_degradation {} evidence_sufficiency {}",
            row.rung,
            row.metrics.macro_f1,
            tables::opt(row.metrics.cd_gap),
            tables::opt(row.metrics.complement_degradation),
            tables::opt(row.metrics.evidence_sufficiency)
        );
    }
    Ok(())
}

fn run_oracle(args: OracleArgs) -> Result<bool> {
    let results = oracle::run_all(args.seed, args.quick)?;
    let mut all = true;
    for r in &results {
        all &= r.passed();
        println!(
            "{} checked={} violations={} max_error={:e} {}",
            r.suite,
            r.checked,
            r.violations,
            r.max_error,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        eprintln!("{} took {:.2}s", r.suite, r.seconds);
    }
    if let Some(path) = &args.out {
        write_json(path, &results)?;
    }
    Ok(all)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Diagnose(a) => diagnose(a).map(|_| true),
        Command::Sweep(a) => sweep(a).map(|_| true),
        Command::Ablate(a) => ablate(a).map(|_| true),
        Command::Oracle(a) => run_oracle(a),
        Command::Version => {
            println!("{}", env!("CARGO_PKG_VERSION"));
            Ok(true)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} {msg}", e.kind());
            ExitCode::from(1)
        }
    }
}

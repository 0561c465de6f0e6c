//! `cadv` verbs: train, eval, attack, diagnose, gen-data, report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attacks::{AttackConfig, LossKind};
use crate::checkpoint::{load_classifier, save_classifier, save_synth, CheckpointMeta};
use crate::config::{NamedAttack, Precision, RunConfig};
use crate::data::{synth_generate, SyntheticCausalConfig};
use crate::error::Error;
use crate::harness::{
    evaluate_robustness, kl_bin_analysis, load_splits, obfuscation_checklist, overfitting_curve, train_with,
    ChecklistConfig, EvalOptions, MetricLog, RobustnessReport,
};
use crate::models::Classifier;
use crate::objectives::Variant;
use crate::real::Real;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cadv", version, about = "Adversarial training with style alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and evaluate its best and last checkpoints.
    Train(TrainArgs),
    /// Evaluate checkpoints of a run directory against its configured attacks.
    Eval(EvalArgs),
    /// Run one attack against a checkpoint.
    Attack(AttackArgs),
    /// Gradient-masking checklist, KL bins, or robust-overfitting summary.
    Diagnose(DiagnoseArgs),
    /// Write synthetic train/test splits.
    GenData(GenDataArgs),
    /// Comparison table over run directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in configuration `<dataset>:<variant>`, e.g. `mnist:causaladv_m`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Dotted-key override, e.g. `objective.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Best,
    Last,
    Both,
}

impl Which {
    fn kinds(self) -> &'static [&'static str] {
        match self {
            Which::Best => &["best"],
            Which::Last => &["last"],
            Which::Both => &["best", "last"],
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the final test-split evaluation.
    #[arg(long)]
    pub no_eval: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory holding `resolved.toml` and checkpoints.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub which: Which,
    #[command(flatten)]
    pub common: Common,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LossArg {
    Ce,
    Kl,
    Cw,
    Adaptive,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "best")]
    pub which: Which,
    #[arg(long, default_value_t = 0.3)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.01)]
    pub step_size: f64,
    #[arg(long, default_value_t = 40)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "ce")]
    pub loss: LossArg,
    /// Name recorded in the report; derived from the loss and steps when absent.
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "best")]
    pub which: Which,
    /// Only `obfuscation` is defined.
    #[arg(long)]
    pub checklist: Option<String>,
    /// Run directory or checkpoint of an independently trained surrogate.
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
    /// Number of KL bins.
    #[arg(long)]
    pub kl_bins: Option<usize>,
    /// Best-vs-last robust validation gap from `metrics.csv`.
    #[arg(long)]
    pub overfit: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories with `report_best.toml` and `report_last.toml`.
    pub runs: Vec<PathBuf>,
    /// Comma-separated output instead of aligned columns.
    #[arg(long)]
    pub csv: bool,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses `argv` (program name first), runs the verb and returns the exit code.
pub fn parse_and_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Built-in configuration for `<dataset>:<variant>`.
pub fn preset(name: &str) -> CliResult<RunConfig> {
    let (dataset, variant) = name.split_once(':').unwrap_or((name, "causaladv_m"));
    let variant = Variant::ALL
        .into_iter()
        .find(|v| v.name() == variant)
        .ok_or_else(|| CliError::Usage(format!("unknown variant {variant:?}")))?;
    match dataset {
        "mnist" => Ok(RunConfig::mnist(variant)),
        "mnist_full" => Ok(RunConfig::mnist_full(variant)),
        "synthetic" => Ok(RunConfig::synthetic(variant, SyntheticCausalConfig::default())),
        other => Err(CliError::Usage(format!("unknown preset dataset {other:?}"))),
    }
}

impl Common {
    /// Config from `--config`, else `--preset`, else `fallback`; then
    /// overrides and flags.
    fn resolve(&self, fallback: Option<RunConfig>) -> CliResult<RunConfig> {
        let base = match (&self.config, &self.preset, fallback) {
            (Some(path), _, _) => RunConfig::load(path).map_err(usage)?,
            (None, Some(p), _) => preset(p)?,
            (None, None, Some(cfg)) => cfg,
            (None, None, None) => return Err(CliError::Usage("need --config or --preset".into())),
        };
        let mut cfg = base.with_overrides(&self.overrides).map_err(usage)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(p) = self.precision {
            cfg.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io(path, e))
}

fn run_config(run: &Path) -> CliResult<RunConfig> {
    let path = run.join("resolved.toml");
    if !path.is_file() {
        return Err(CliError::Usage(format!("{} has no resolved.toml", run.display())));
    }
    RunConfig::load(&path).map_err(usage)
}

/// A checkpoint file, or `<dir>/<kind>.cadv` for a run directory.
pub fn checkpoint_path(path: &Path, kind: &str) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{kind}.cadv"))
    } else {
        path.to_path_buf()
    }
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        threads: cfg.threads,
        objective: Some(cfg.objective.clone()),
        ..EvalOptions::default()
    }
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let cfg = a.common.resolve(None)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("resolved.toml"), &cfg.to_toml()?)?;
    match cfg.precision {
        Precision::F32 => train_run::<f32>(&cfg, &a.out, !a.no_eval),
        Precision::F64 => train_run::<f64>(&cfg, &a.out, !a.no_eval),
    }
}

fn train_run<T: Real>(cfg: &RunConfig, out: &Path, eval: bool) -> CliResult<()> {
    let splits = load_splits(cfg)?;
    let (train, val) = (splits.train.cast::<T>(), splits.val.cast::<T>());
    let result = train_with(cfg, &train, &val, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  nat_val {:.4}  rob_val {:.4}  lr {}  {:.1}s",
            r.epoch, r.total_loss, r.nat_val_acc, r.rob_val_acc, r.lr, r.seconds
        )
    })?;
    result.log.write_csv(&out.join("metrics.csv"))?;
    let rows = result.log.rows();
    let best_row = result.best_row();
    let checkpoints = [
        ("best", &result.best, best_row, cfg.checkpoint.save_best),
        ("last", &result.last, rows.last(), cfg.checkpoint.save_last),
    ];
    for (kind, model, row, save) in checkpoints {
        if !save {
            continue;
        }
        let meta = CheckpointMeta {
            kind: kind.into(),
            epoch: row.map_or(0, |r| r.epoch),
            robust_val_acc: row.map(|r| r.rob_val_acc),
            natural_val_acc: row.map(|r| r.nat_val_acc),
            precision: cfg.precision.name().into(),
        };
        save_classifier(&out.join(format!("{kind}.cadv")), model, &meta)?;
        if eval {
            let test = splits.test.cast::<T>();
            let report = evaluate_robustness(model, &test, &cfg.eval_attacks, kind, &eval_options(cfg))?;
            report.write(&out.join(format!("report_{kind}.toml")))?;
            println!("{}", summary_line(&report));
        }
    }
    Ok(())
}

fn summary_line(r: &RobustnessReport) -> String {
    let mut s = format!("{:<5} natural {:.4}", r.checkpoint, r.natural_accuracy);
    for a in &r.attacks {
        let _ = write!(s, "  {} {:.4}", a.name, a.accuracy);
    }
    s
}

fn load_model<T: Real>(path: &Path, kind: &str) -> CliResult<Classifier<T>> {
    let file = checkpoint_path(path, kind);
    if !file.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", file.display())));
    }
    Ok(load_classifier::<T>(&file)?.0)
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let cfg = a.common.resolve(Some(run_config(&a.run)?))?;
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    create_dir(&out)?;
    match cfg.precision {
        Precision::F32 => eval_run::<f32>(&cfg, &a.run, a.which, &cfg.eval_attacks, &out, "report"),
        Precision::F64 => eval_run::<f64>(&cfg, &a.run, a.which, &cfg.eval_attacks, &out, "report"),
    }
}

fn eval_run<T: Real>(
    cfg: &RunConfig,
    run: &Path,
    which: Which,
    attacks: &[NamedAttack],
    out: &Path,
    stem: &str,
) -> CliResult<()> {
    let test = load_splits(cfg)?.test.cast::<T>();
    for kind in which.kinds() {
        let model = load_model::<T>(run, kind)?;
        let report = evaluate_robustness(&model, &test, attacks, kind, &eval_options(cfg))?;
        report.write(&out.join(format!("{stem}_{kind}.toml")))?;
        println!("{}", summary_line(&report));
    }
    Ok(())
}

fn cmd_attack(a: AttackArgs) -> CliResult<()> {
    let cfg = a.common.resolve(Some(run_config(&a.run)?))?;
    let kind = match a.loss {
        LossArg::Ce => LossKind::Ce,
        LossArg::Kl => LossKind::KlToNatural,
        LossArg::Cw => LossKind::CwMargin,
        LossArg::Adaptive => LossKind::AdaptiveFull,
    };
    let config = AttackConfig::pgd(a.epsilon, a.step_size, a.steps)
        .with_loss(kind)
        .with_seed(cfg.seed);
    config.validate().map_err(usage)?;
    let name = a.name.clone().unwrap_or_else(|| format!("{}-{}", kind.name(), a.steps));
    let attacks = [NamedAttack { name, config }];
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    create_dir(&out)?;
    match cfg.precision {
        Precision::F32 => eval_run::<f32>(&cfg, &a.run, a.which, &attacks, &out, "attack"),
        Precision::F64 => eval_run::<f64>(&cfg, &a.run, a.which, &attacks, &out, "attack"),
    }
}

fn cmd_diagnose(a: DiagnoseArgs) -> CliResult<()> {
    if a.checklist.is_none() && a.kl_bins.is_none() && !a.overfit {
        return Err(CliError::Usage("diagnose needs --checklist, --kl-bins or --overfit".into()));
    }
    if let Some(c) = &a.checklist {
        if c != "obfuscation" {
            return Err(CliError::Usage(format!("unknown checklist {c:?}")));
        }
        if a.surrogate.is_none() {
            return Err(CliError::Usage("--checklist obfuscation needs --surrogate".into()));
        }
    }
    if a.overfit {
        let log = MetricLog::read_csv(&a.run.join("metrics.csv"))?;
        let s = overfitting_curve(&log)?;
        println!(
            "best epoch {}  best robust {:.4}  final robust {:.4}  gap {:.4}",
            s.best_epoch, s.best_robust, s.final_robust, s.gap
        );
    }
    if a.checklist.is_none() && a.kl_bins.is_none() {
        return Ok(());
    }
    let cfg = a.common.resolve(Some(run_config(&a.run)?))?;
    match cfg.precision {
        Precision::F32 => diagnose_run::<f32>(&cfg, &a),
        Precision::F64 => diagnose_run::<f64>(&cfg, &a),
    }
}

fn diagnose_run<T: Real>(cfg: &RunConfig, a: &DiagnoseArgs) -> CliResult<()> {
    let test = load_splits(cfg)?.test.cast::<T>();
    let opts = eval_options(cfg);
    for kind in a.which.kinds() {
        let model = load_model::<T>(&a.run, kind)?;
        if let Some(sur) = a.surrogate.as_deref().filter(|_| a.checklist.is_some()) {
            let surrogate = load_model::<T>(sur, "best")?;
            let check = ChecklistConfig {
                seed: cfg.seed,
                ..ChecklistConfig::for_epsilon(cfg.val_attack.epsilon)
            };
            let report = obfuscation_checklist(&model, &surrogate, &test, &check, &opts)?;
            for line in report.lines() {
                println!("{line}");
            }
        }
        if let Some(n) = a.kl_bins {
            let attack = AttackConfig::pgd(0.3, 0.01, 20).with_seed(cfg.seed);
            println!("bin,lo,hi,count,robust_accuracy");
            for (i, b) in kl_bin_analysis(&model, &test, &attack, n, &opts)?.iter().enumerate() {
                let acc = b.robust_accuracy.map_or(String::new(), |v| format!("{v:.4}"));
                println!("{i},{:.6},{:.6},{},{acc}", b.lo, b.hi, b.count);
            }
        }
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> CliResult<()> {
    let synth_default = RunConfig::synthetic(Variant::CausaladvM, SyntheticCausalConfig::default());
    let cfg = a.common.resolve(Some(synth_default))?;
    let synth = cfg
        .dataset
        .synthetic
        .clone()
        .ok_or_else(|| CliError::Usage("config has no [dataset.synthetic] table".into()))?;
    create_dir(&a.out)?;
    write_text(&a.out.join("resolved.toml"), &cfg.to_toml()?)?;
    let n_train = cfg.dataset.train_samples.unwrap_or(4000);
    let n_test = cfg.dataset.test_samples.unwrap_or(2000);
    let train = synth_generate(&synth, n_train, cfg.seed)?;
    let test = synth_generate(&synth, n_test, cfg.seed ^ crate::harness::SYNTH_TEST_STREAM)?;
    save_synth(&a.out.join("train.cadv"), &train)?;
    save_synth(&a.out.join("test.cadv"), &test)?;
    println!("wrote {n_train} train and {n_test} test samples to {}", a.out.display());
    Ok(())
}

/// Row label of a run: its objective variant, or the directory name.
fn method_name(run: &Path) -> String {
    run_config(run)
        .map(|c| c.objective.variant.name().to_string())
        .unwrap_or_else(|_| run.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned()))
}

/// Rows = runs, columns = natural plus each attack, for best then last.
pub fn report_table(runs: &[PathBuf], csv: bool) -> CliResult<String> {
    if runs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    let mut columns: Vec<String> = Vec::new();
    let mut rows: Vec<(String, Vec<(String, RobustnessReport)>)> = Vec::new();
    for run in runs {
        let mut reports = Vec::new();
        for kind in ["best", "last"] {
            let path = run.join(format!("report_{kind}.toml"));
            if !path.is_file() {
                return Err(CliError::Usage(format!("missing {}", path.display())));
            }
            let r = RobustnessReport::read(&path)?;
            for a in &r.attacks {
                if !columns.contains(&a.name) {
                    columns.push(a.name.clone());
                }
            }
            reports.push((kind.to_string(), r));
        }
        rows.push((method_name(run), reports));
    }
    let mut header = vec!["method".to_string()];
    for kind in ["best", "last"] {
        header.push(format!("{kind}_natural"));
        header.extend(columns.iter().map(|c| format!("{kind}_{c}")));
    }
    let mut cells = vec![header];
    for (name, reports) in &rows {
        let mut line = vec![name.clone()];
        for (_, r) in reports {
            line.push(format!("{:.2}", 100.0 * r.natural_accuracy));
            line.extend(
                columns
                    .iter()
                    .map(|c| r.accuracy(c).map_or("-".into(), |v| format!("{:.2}", 100.0 * v))),
            );
        }
        cells.push(line);
    }
    let mut out = String::new();
    if csv {
        for line in &cells {
            let _ = writeln!(out, "{}", line.join(","));
        }
    } else {
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|j| cells.iter().map(|l| l[j].len()).max().unwrap_or(0))
            .collect();
        for line in &cells {
            let padded: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        }
    }
    Ok(out)
}

fn cmd_report(a: ReportArgs) -> CliResult<()> {
    let table = report_table(&a.runs, a.csv)?;
    print!("{table}");
    if let Some(path) = &a.out {
        write_text(path, &table)?;
    }
    Ok(())
}

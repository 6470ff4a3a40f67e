//! Command-line surface: `simulate`, `train`, `pseudo-label`, `evaluate`, `report`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::io::{self, ModelFile, ReportFile, RunConfig, SeedChain, FORMAT_VERSION};
use crate::metrics::{render_table, EvaluationReport};
use crate::pipeline::{evaluate, pr_curves};
use crate::rejection::{EnergyDirection, Strategy};
use crate::sim::{generate_scenario, pseudo_label_pass, run_four_step, TrainingMode};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "OSDET_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "osdet-out";

/// Parses a lowercase enum name through its serde representation, so the
/// CLI spelling always matches the file formats.
fn enum_arg<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unrecognised value {s:?}"))
}

#[derive(Debug, Parser)]
#[command(name = "osdet", version, about = "Open-set detection on a seeded synthetic detector")]
pub struct Cli {
    /// Worker threads for per-image parallelism (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print the fully resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scenario directory (manifest plus train/test splits).
    Simulate(SimulateArgs),
    /// Run the four-step schedule and write the model, trace and audit.
    Train(TrainArgs),
    /// Re-run pseudo-labeling with an existing model over the training split.
    PseudoLabel(PseudoLabelArgs),
    /// Detect on the test split with a rejection strategy and score it.
    Evaluate(EvaluateArgs),
    /// Combine report.json files of one scenario into a comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct OutDir {
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Scenario directory written by `simulate`.
    #[arg(long)]
    pub scenario: PathBuf,
    /// `unkad` or `standard`.
    #[arg(long, value_parser = enum_arg::<TrainingMode>)]
    pub mode: Option<TrainingMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Threshold multiplier; defaults to the one the model was trained with.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// `none`, `direct`, `msp`, `energy` or `odin`.
    #[arg(long, value_parser = enum_arg::<Strategy>)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub tau_msp: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub tau_energy: Option<f64>,
    #[arg(long)]
    pub tau_odin: Option<f64>,
    #[arg(long)]
    pub energy_temperature: Option<f64>,
    #[arg(long)]
    pub odin_temperature: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// `negative_energy` or `literal`.
    #[arg(long, value_parser = enum_arg::<EnergyDirection>)]
    pub energy_direction: Option<EnergyDirection>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json files, or directories containing one.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Base configuration (file or defaults) with the command's flags applied.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Simulate(a) => set(&mut cfg.scenario.seed, a.seed),
        Command::Train(a) => {
            set(&mut cfg.train.mode, a.mode);
            set(&mut cfg.train.seed, a.seed);
            set(&mut cfg.train.learning_rate, a.learning_rate);
            set(&mut cfg.train.lambda, a.lambda);
        }
        Command::PseudoLabel(a) => set(&mut cfg.train.lambda, a.lambda),
        Command::Evaluate(a) => {
            let r = &mut cfg.rejection;
            set(&mut r.strategy, a.strategy);
            set(&mut r.tau_msp, a.tau_msp);
            if a.tau_energy.is_some() {
                r.tau_energy = a.tau_energy;
            }
            set(&mut r.tau_odin, a.tau_odin);
            set(&mut r.energy_temperature, a.energy_temperature);
            set(&mut r.odin_temperature, a.odin_temperature);
            set(&mut r.epsilon, a.epsilon);
            set(&mut r.energy_direction, a.energy_direction);
            set(&mut r.nms_iou, a.nms_iou);
            set(&mut cfg.iou_threshold, a.iou_threshold);
        }
        Command::Report(_) => {}
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    if cli.print_config {
        let mut text = serde_json::to_string_pretty(&cfg).expect("config serializes");
        text.push('\n');
        return emit(&text);
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(&cfg, &a.out.out),
        Command::Train(a) => cmd_train(&cfg, &a.scenario, &a.out.out),
        Command::PseudoLabel(a) => {
            // without an explicit lambda, reuse the one the model was trained with
            let lambda = a.lambda.or(cli.config.as_ref().map(|_| cfg.train.lambda));
            cmd_pseudo_label(&a.scenario, &a.model, lambda, &a.out.out)
        }
        Command::Evaluate(a) => cmd_evaluate(&cfg, &a.scenario, &a.model, &a.out.out),
        Command::Report(a) => {
            let table = cmd_report(&a.reports)?;
            if let Some(p) = &a.out {
                io::write_text(p, &table)?;
            }
            emit(&table)
        }
    }
}

/// Writes to stdout; a closed pipe (`osdet ... | head`) is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let scenario = generate_scenario(&cfg.scenario)?;
    let manifest = io::write_scenario(out, &scenario)?;
    log::info!("scenario {} written to {}", manifest.config_hash, out.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, scenario_dir: &Path, out: &Path) -> Result<()> {
    let (manifest, scenario) = io::read_scenario(scenario_dir)?;
    let outcome = run_four_step(&scenario, &cfg.train)?;
    let seeds = SeedChain {
        scenario: manifest.seed,
        train: Some(cfg.train.seed),
    };
    let model = ModelFile {
        format_version: FORMAT_VERSION.into(),
        scenario_hash: manifest.config_hash.clone(),
        seeds,
        train_config: cfg.train.clone(),
        detector: outcome.detector,
    };
    io::create_dir(out)?;
    io::write_json(&out.join(io::MODEL_FILE), &model)?;
    io::write_trace(&out.join(io::TRACE_FILE), &model.detector.trace)?;
    let audit_path = out.join(io::PSEUDO_LABEL_FILE);
    if cfg.train.mode == TrainingMode::Unkad {
        io::write_pseudo_labels(&audit_path, &manifest.config_hash, seeds, &outcome.audit)?;
    } else if audit_path.exists() {
        // a stale audit from an earlier unkad run would misdescribe this model
        std::fs::remove_file(&audit_path).map_err(|source| Error::Io {
            path: audit_path.clone(),
            source,
        })?;
    }
    Ok(())
}

fn check_compatible(model: &ModelFile, manifest: &io::Manifest) -> Result<()> {
    let det = &model.detector;
    if det.feature_dim != manifest.config.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: det.feature_dim,
            actual: manifest.config.feature_dim,
        });
    }
    let scenario_space = manifest.config.label_space()?;
    if det.label_space.known_classes() != scenario_space.known_classes() {
        return Err(Error::InvalidLabelSpace(format!(
            "model knows {:?}, scenario annotates {:?}",
            det.label_space.known_classes(),
            scenario_space.known_classes()
        )));
    }
    if model.scenario_hash != manifest.config_hash {
        log::warn!(
            "model was trained on scenario {}, evaluating on {}",
            model.scenario_hash,
            manifest.config_hash
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelFile, String)> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((io::read_model(path)?, io::sha256_hex(&bytes)))
}

pub fn cmd_pseudo_label(
    scenario_dir: &Path,
    model_path: &Path,
    lambda: Option<f64>,
    out: &Path,
) -> Result<()> {
    let (manifest, scenario) = io::read_scenario(scenario_dir)?;
    let (model, _) = load_model(model_path)?;
    check_compatible(&model, &manifest)?;
    let lambda = lambda.unwrap_or(model.train_config.lambda);
    // pass 0 marks a standalone audit, as opposed to passes 1 and 2 of training
    let pass = pseudo_label_pass(&model.detector, &scenario.train, lambda, 0)?;
    io::write_pseudo_labels(
        &out.join(io::PSEUDO_LABEL_FILE),
        &manifest.config_hash,
        model.seeds,
        &[pass],
    )
}

pub fn cmd_evaluate(cfg: &RunConfig, scenario_dir: &Path, model_path: &Path, out: &Path) -> Result<()> {
    let (manifest, scenario) = io::read_scenario(scenario_dir)?;
    let (model, model_hash) = load_model(model_path)?;
    check_compatible(&model, &manifest)?;
    let evaluation = evaluate(
        &model.detector,
        model.train_config.mode,
        &scenario.test,
        &cfg.rejection,
        cfg.iou_threshold,
    )?;
    io::create_dir(out)?;
    let header = io::DetectionsHeader {
        format_version: FORMAT_VERSION.into(),
        scenario_hash: manifest.config_hash.clone(),
        model_hash: model_hash.clone(),
        seeds: model.seeds,
        rejection: cfg.rejection.resolved(),
        iou_threshold: cfg.iou_threshold,
    };
    io::write_detections(&out.join(io::DETECTIONS_FILE), &header, &evaluation.detections)?;
    let curves = pr_curves(
        &model.detector.label_space,
        &scenario.test,
        &evaluation.detections,
        cfg.iou_threshold,
    );
    io::write_pr_curves(&out.join(io::PR_CURVES_FILE), &curves)?;
    io::write_text(&out.join(io::REPORT_TEXT_FILE), &render_table(&[&evaluation.report]))?;
    let report = ReportFile {
        format_version: FORMAT_VERSION.into(),
        scenario_hash: manifest.config_hash,
        model_hash,
        seeds: model.seeds,
        report: evaluation.report,
    };
    io::write_json(&out.join(io::REPORT_JSON_FILE), &report)
}

fn row_order(r: &EvaluationReport) -> (usize, usize) {
    let training = ["standard", "unkad"]
        .iter()
        .position(|t| *t == r.training)
        .unwrap_or(2);
    let rejection = ["none", "direct", "msp", "energy", "odin"]
        .iter()
        .position(|s| *s == r.rejection)
        .unwrap_or(5);
    (training, rejection)
}

/// Loads reports and renders them as one table, baseline rows first. Values
/// are copied verbatim from the reports.
pub fn cmd_report(paths: &[PathBuf]) -> Result<String> {
    let mut files = Vec::with_capacity(paths.len());
    for p in paths {
        let path = if p.is_dir() {
            p.join(io::REPORT_JSON_FILE)
        } else {
            p.clone()
        };
        let file: ReportFile = io::read_json(&path)?;
        files.push(file);
    }
    if let Some(first) = files.first() {
        if let Some(other) = files.iter().find(|f| f.scenario_hash != first.scenario_hash) {
            return Err(Error::ManifestMismatch {
                left: first.scenario_hash.clone(),
                right: other.scenario_hash.clone(),
            });
        }
    }
    let mut reports: Vec<&EvaluationReport> = files.iter().map(|f| &f.report).collect();
    reports.sort_by_key(|r| row_order(r));
    Ok(render_table(&reports))
}

/// Parses arguments, runs the command inside a thread pool of the requested
/// size and maps the outcome to an exit code (0 ok, 1 invalid input,
/// 2 runtime failure).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! Command-line front end: configuration, experiment commands and report files.
//!
//! Exit codes are part of the interface: 0 on success, 2 for configuration or
//! data errors, 3 when training diverges, 1 for internal faults.

pub mod config;
pub mod output;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use latent_core::datagen::{generate, read_dataset, write_dataset, Dataset, Scenario, SplitKind};
use latent_core::losses::Strategy;
use latent_core::metrics::{render_consistency, render_table, EvalReport};
use latent_core::trainer::{
    benchmark_cell, evaluate, run_consistency, run_correctness, scale_diagnostics,
    train_selecting_lambda, TrainedModel,
};

use config::{ExperimentConfig, Overrides};
use output::{history_csv, report_header, report_lines, scale_lines, OutputDir, SCALE_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] latent_core::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(latent_core::Error::Internal(_)) | CliError::Internal(_) => 1,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "latent", version, about = "Recover probabilities of unobserved events from composite observations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scenario dataset (table plus JSON sidecar).
    Gen(Common),
    /// Train one strategy on one dataset and score it on the test split.
    Train(Common),
    /// Score a saved model on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model file written by `train`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Split to score.
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: SplitKind,
    },
    /// Train every strategy on every product scenario.
    Benchmark(Common),
    /// Hide `Send` in the email chain and recover it.
    Correctness(Common),
    /// Agreement of thresholded predictions across two seeds on the search graph.
    Consistency(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Option<Scenario>,
    /// Existing dataset table instead of generating one.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Seed for both data generation and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Use 100000 samples instead of the desk-scale 20000.
    #[arg(long)]
    pub full_size: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    Scenario::parse(s).map_err(|e| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitKind, String> {
    SplitKind::parse(s).map_err(|e| e.to_string())
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            lambda: self.lambda,
            alpha: self.alpha,
            strategy: self.strategy,
            epochs: self.epochs,
            batch_size: self.batch_size,
            full_size: self.full_size,
            out: self.out.clone(),
            scenario: self.scenario,
            dataset: self.dataset.clone(),
        }
    }

    /// File values, then flags, then defaults.
    pub fn resolve(&self, command: &str) -> Result<ExperimentConfig, CliError> {
        let file = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Ok(file.with_overrides(&self.overrides()).materialize(command))
    }
}

/// Runs one command; the returned text is printed on success.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Gen(c) => cmd_gen(&c.resolve("gen")?),
        Command::Train(c) => cmd_train(&c.resolve("train")?),
        Command::Eval {
            common,
            model,
            split,
        } => cmd_eval(&common.resolve("eval")?, model.as_deref(), split),
        Command::Benchmark(c) => cmd_benchmark(&c.resolve("benchmark")?),
        Command::Correctness(c) => cmd_correctness(&c.resolve("correctness")?),
        Command::Consistency(c) => cmd_consistency(&c.resolve("consistency")?),
    }
}

/// Loads `cfg.dataset` or generates the configured scenario.
fn load_or_generate(
    cfg: &ExperimentConfig,
    out: &mut OutputDir,
    default: Option<Scenario>,
) -> Result<Dataset, CliError> {
    if let Some(path) = &cfg.dataset {
        out.input(path);
        out.input(&latent_core::datagen::sidecar_path(path));
        return Ok(read_dataset(path)?);
    }
    let scenario = match (cfg.data.scenario, default) {
        (Some(s), _) => s,
        (None, Some(s)) => s,
        (None, None) => cfg.scenario()?,
    };
    Ok(generate(&cfg.scenario_spec(scenario))?)
}

fn expect_scenario(ds: &Dataset, want: Scenario) -> Result<(), CliError> {
    if ds.spec.scenario != want {
        return Err(CliError::Config(format!(
            "this command needs a {want} dataset, got {}",
            ds.spec.scenario
        )));
    }
    Ok(())
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let scenario = cfg.scenario()?;
    let ds = generate(&cfg.scenario_spec(scenario))?;
    let mut out = OutputDir::create(cfg.out_dir())?;
    let table = out.path(&format!("{}.csv", scenario.name().to_lowercase()));
    write_dataset(&ds, &table)?;
    out.record(table.clone());
    out.record(latent_core::datagen::sidecar_path(&table));
    let mut msg = String::new();
    let _ = writeln!(
        msg,
        "{scenario}: {} rows (train {}, val {}, test {}) -> {}",
        ds.len(),
        ds.split.train.len(),
        ds.split.val.len(),
        ds.split.test.len(),
        table.display()
    );
    for (name, labels) in &ds.labels {
        let rate = labels.iter().sum::<f64>() / labels.len() as f64;
        let _ = writeln!(msg, "  label {name}: rate {rate:.4}");
    }
    let head_max = scenario
        .preset()
        .head_names()
        .iter()
        .filter_map(|h| ds.true_probs.get(*h))
        .flatten()
        .fold(0.0f64, |m, &p| m.max(p));
    let _ = writeln!(msg, "  max head probability {head_max:.6}");
    out.finish("gen", cfg)?;
    Ok(msg)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let mut out = OutputDir::create(cfg.out_dir())?;
    let ds = load_or_generate(cfg, &mut out, None)?;
    let proto = cfg.protocol();
    let graph = proto.graph(&ds)?;
    let targets = proto.targets(&ds, None)?;
    let strategy = cfg.strategy();
    let run = train_selecting_lambda(&graph, &ds, &cfg.train_config(), &proto.lambda, Some(&targets))?;
    let report = evaluate(&run.model, &graph, &ds, SplitKind::Test, strategy.name())?;
    let scales = scale_diagnostics(&run.model, &graph, &ds, SplitKind::Test)?;
    let scenario = ds.spec.scenario.name();

    out.write("model.txt", &run.model.to_text())?;
    out.write("history.csv", &history_csv(&run.history))?;
    let mut csv = report_header() + "\n";
    report_lines(&mut csv, scenario, run.lambda, &report);
    out.write("report.csv", &csv)?;
    let mut sc = String::from(SCALE_HEADER) + "\n";
    scale_lines(&mut sc, scenario, strategy.name(), run.lambda, &scales);
    out.write("scales.csv", &sc)?;
    let table = render_table(std::slice::from_ref(&report));
    out.write("table.txt", &table)?;
    out.finish("train", cfg)?;
    Ok(format!(
        "{scenario} {strategy} lambda={} best epoch {}\n{table}",
        run.lambda,
        run.history.best_epoch.map_or("none".to_string(), |e| e.to_string())
    ))
}

pub fn cmd_eval(cfg: &ExperimentConfig, model: Option<&Path>, split: SplitKind) -> Result<String, CliError> {
    let mut out = OutputDir::create(cfg.out_dir())?;
    let ds = load_or_generate(cfg, &mut out, None)?;
    let proto = cfg.protocol();
    let graph = proto.graph(&ds)?;
    let model = match model {
        Some(path) => {
            out.input(path);
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let m = TrainedModel::from_text(&text)?;
            m.check_graph(&graph)?;
            m
        }
        None => TrainedModel::init(&graph, cfg.train.seed.unwrap_or(config::DEFAULT_SEED))?,
    };
    let label = if cfg.train.strategy.is_some() {
        cfg.strategy().name()
    } else {
        "model"
    };
    let report = evaluate(&model, &graph, &ds, split, label)?;
    let mut csv = report_header() + "\n";
    report_lines(&mut csv, ds.spec.scenario.name(), f64::NAN, &report);
    out.write("report.csv", &csv)?;
    let table = render_table(std::slice::from_ref(&report));
    out.write("table.txt", &table)?;
    out.finish("eval", cfg)?;
    Ok(table)
}

pub fn cmd_benchmark(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let mut out = OutputDir::create(cfg.out_dir())?;
    let scenarios = cfg.benchmark.scenarios.clone().unwrap_or_default();
    let strategies = cfg.benchmark.strategies.clone().unwrap_or_default();
    if scenarios.is_empty() || strategies.is_empty() {
        return Err(CliError::Config("benchmark needs scenarios and strategies".into()));
    }
    let proto = cfg.protocol();
    let mut csv = report_header() + "\n";
    let mut sc = String::from(SCALE_HEADER) + "\n";
    let mut reports: Vec<EvalReport> = Vec::new();
    let mut summary = String::new();
    for scenario in scenarios {
        if !Scenario::PRODUCT.contains(&scenario) {
            return Err(CliError::Config(format!(
                "benchmark takes the product scenarios, got {scenario}"
            )));
        }
        let ds = generate(&cfg.scenario_spec(scenario))?;
        for &strategy in &strategies {
            let cell = benchmark_cell(&ds, strategy, &proto).map_err(|e| match e {
                latent_core::Error::Numerical(m) => {
                    latent_core::Error::Numerical(format!("[{scenario}/{strategy}] {m}"))
                }
                other => other,
            })?;
            report_lines(&mut csv, scenario.name(), cell.lambda, &cell.report);
            scale_lines(&mut sc, scenario.name(), strategy.name(), cell.lambda, &cell.scales);
            out.write(
                &format!("models/{}_{}.txt", scenario.name().to_lowercase(), strategy.name().to_lowercase()),
                &cell.model.to_text(),
            )?;
            let _ = writeln!(
                summary,
                "{scenario} {strategy} lambda={} mean unobserved MAPE {:.2}%",
                cell.lambda,
                cell.report.mean_unobserved_mape() * 1e2
            );
            let mut r = cell.report;
            r.strategy = format!("{}/{}", short(scenario), strategy.name());
            reports.push(r);
        }
    }
    out.write("grid.csv", &csv)?;
    out.write("scales.csv", &sc)?;
    let table = render_table(&reports);
    out.write("table.txt", &table)?;
    out.finish("benchmark", cfg)?;
    Ok(format!("{summary}\n{table}"))
}

fn short(s: Scenario) -> &'static str {
    match s {
        Scenario::IndCovKwn => "KWN",
        Scenario::IndCovUnk => "UNK",
        Scenario::ParOvUnk => "PAR",
        Scenario::ComOv => "COM",
        Scenario::EmailChain => "EML",
        Scenario::SearchDag => "SRC",
    }
}

pub fn cmd_correctness(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let mut out = OutputDir::create(cfg.out_dir())?;
    let ds = load_or_generate(cfg, &mut out, Some(Scenario::EmailChain))?;
    expect_scenario(&ds, Scenario::EmailChain)?;
    let strategies = cfg.benchmark.strategies.clone().unwrap_or(Strategy::ALL.to_vec());
    let runs = run_correctness(&ds, &strategies, &cfg.protocol())?;
    let mut csv = report_header() + "\n";
    for r in &runs {
        report_lines(&mut csv, Scenario::EmailChain.name(), r.lambda, &r.report);
        out.write(
            &format!("models/{}.txt", r.strategy.name().to_lowercase()),
            &r.model.to_text(),
        )?;
    }
    out.write("report.csv", &csv)?;
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    let table = render_table(&reports);
    out.write("table.txt", &table)?;
    out.finish("correctness", cfg)?;
    Ok(table)
}

pub fn cmd_consistency(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let mut out = OutputDir::create(cfg.out_dir())?;
    let ds = load_or_generate(cfg, &mut out, Some(Scenario::SearchDag))?;
    expect_scenario(&ds, Scenario::SearchDag)?;
    let strategies = cfg.benchmark.strategies.clone().unwrap_or(Strategy::ALL.to_vec());
    let [a, b] = cfg.consistency.seeds.unwrap_or([11, 12]);
    let proto = cfg.protocol();
    let reports = run_consistency(&ds, &strategies, &proto, (a, b))?;
    out.write(
        "consistency.csv",
        &output::consistency_csv(Scenario::SearchDag.name(), &reports),
    )?;
    let table = render_consistency(&reports);
    out.write("table.txt", &table)?;
    out.finish("consistency", cfg)?;
    Ok(table)
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use outlier_gradient::data;
use outlier_gradient::harness::{self, PipelineConfig, TableRow};
use outlier_gradient::model::{self, GradientMatrix, LayerSelector, TrainedModel};
use outlier_gradient::outlier::{self, Method, TrimPlan};
use outlier_gradient::{Error, Result};

#[derive(Parser)]
#[command(name = "ogtrim", version, about = "Find detrimental training samples via outliers in gradient space")]
struct Cli {
    /// Pipeline configuration (JSON); omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test/validation CSVs from the configured generator.
    GenData,
    /// Train a model on a dataset CSV and save a JSON checkpoint.
    Train(TrainArgs),
    /// Per-sample gradients of a checkpoint on a dataset, as CSV.
    Grads(GradsArgs),
    /// Score samples and write a budgeted trim plan.
    Score(ScoreArgs),
    /// Drop the samples flagged by a trim plan.
    Trim(TrimArgs),
    /// Run the full pipeline and write an evaluation report.
    Pipeline,
    /// Evaluate several methods on one dataset and model.
    Compare(CompareArgs),
    /// Evaluate a range of fractional trimming budgets.
    SweepBudget(SweepBudgetArgs),
    /// Evaluate the isolation forest at several tree counts.
    SweepTrees(SweepTreesArgs),
    /// Time the scoring stage across training-set sizes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct GradsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `last_layer` or `all`; defaults to the config value.
    #[arg(long, value_parser = parse_layer)]
    layer: Option<LayerSelector>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Gradient CSV (for iforest, l1, l2).
    #[arg(long)]
    grads: Option<PathBuf>,
    /// Checkpoint and training data (for influence methods and semi_inlier).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation CSV for semi_inlier or an external evaluation set.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    /// Absolute budget; the config budget is used otherwise.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args)]
struct TrimArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    plan: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, value_delimiter = ',', default_value = "iforest,l1,l2,exact,trace,lissa")]
    methods: Vec<Method>,
}

#[derive(Args)]
struct SweepBudgetArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.025,0.05,0.075,0.1,0.125")]
    budgets: Vec<f64>,
}

#[derive(Args)]
struct SweepTreesArgs {
    #[arg(long, value_delimiter = ',', default_value = "25,50,100,200")]
    counts: Vec<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "500,1000")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "iforest,l1,l2")]
    methods: Vec<Method>,
}

fn parse_layer(s: &str) -> std::result::Result<LayerSelector, String> {
    match s {
        "all" => Ok(LayerSelector::All),
        "last_layer" => Ok(LayerSelector::LastLayer),
        other => Err(format!("unknown layer `{other}` (expected `all` or `last_layer`)")),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_json_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn write_rows<T: serde::Serialize>(rows: &[T], out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => harness::write_table(rows, path),
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn score(cli: &Cli, cfg: &PipelineConfig, args: &ScoreArgs) -> Result<()> {
    let method = args.method.unwrap_or(cfg.method);
    let budget = args.budget.map(harness::Budget::Count).unwrap_or(cfg.budget);
    let scores = match method {
        Method::Iforest | Method::L1 | Method::L2 if args.grads.is_some() => {
            let g = GradientMatrix::read_csv(args.grads.as_ref().unwrap(), cfg.layer)?;
            match method {
                Method::L1 => outlier::l1_scores(&g),
                Method::L2 => outlier::l2_scores(&g),
                _ => {
                    let seeds = cfg.seeds.resolve(cfg.seed);
                    let params = outlier::IForestParams {
                        n_trees: cfg.iforest.n_trees,
                        psi: cfg.iforest.psi,
                        seed: seeds.detector,
                    };
                    let x = if cfg.standardize { outlier::standardize(&g.rows) } else { g.rows.clone() };
                    outlier::fit_iforest(&x, params)?.scores(&x)?
                }
            }
        }
        _ => {
            let (Some(model_path), Some(data_path)) = (&args.model, &args.data) else {
                return Err(Error::Config(format!("method {method} needs --model and --data (or --grads for gradient detectors)")));
            };
            let model = TrainedModel::load_json(model_path)?;
            let train = data::read_csv(data_path)?;
            let validation = args.validation.as_ref().map(data::read_csv).transpose()?;
            let prepared = harness::Prepared {
                config: cfg.resolved()?,
                seeds: cfg.seeds.resolve(cfg.seed),
                spec: model.spec,
                train_config: model.train_config,
                splits: harness::Splits {
                    test: train.clone(),
                    train,
                    validation,
                },
                model,
                load_seconds: 0.0,
                train_seconds: 0.0,
            };
            let g = prepared.gradients()?;
            prepared.score(method, cfg.iforest.n_trees, &g)?.0
        }
    };
    budget.validate()?;
    let k = budget.resolve(scores.len());
    let plan = outlier::select_outliers(&scores, k, method);
    info!("flagged {} of {} samples with {method}", plan.flagged.len(), scores.len());
    write_json(&plan, cli.out.as_deref())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            let dir = require_out(cli)?;
            std::fs::create_dir_all(dir)?;
            let splits = cfg.dataset.load(&cfg.seeds.resolve(cfg.seed))?;
            data::write_csv(&splits.train, dir.join("train.csv"))?;
            data::write_csv(&splits.test, dir.join("test.csv"))?;
            if let Some(v) = &splits.validation {
                data::write_csv(v, dir.join("validation.csv"))?;
            }
            info!("wrote {} train / {} test samples to {}", splits.train.len(), splits.test.len(), dir.display());
        }
        Command::Train(args) => {
            let ds = data::read_csv(&args.data)?;
            let spec = cfg.model.spec(ds.n_features(), ds.n_classes);
            let resolved = cfg.resolved()?;
            let train_cfg = resolved.train.expect("resolved").with_seed(cfg.seeds.resolve(cfg.seed).train);
            let m = model::train(&ds, spec, train_cfg)?;
            info!("final training loss {:.6}", m.final_train_loss);
            m.save_json(require_out(cli)?)?;
        }
        Command::Grads(args) => {
            let m = TrainedModel::load_json(&args.model)?;
            let ds = data::read_csv(&args.data)?;
            let g = model::per_sample_gradients(&m, &ds, args.layer.unwrap_or(cfg.layer))?;
            g.write_csv(require_out(cli)?)?;
        }
        Command::Score(args) => score(cli, &cfg, args)?,
        Command::Trim(args) => {
            let ds = data::read_csv(&args.data)?;
            let text = std::fs::read_to_string(&args.plan)?;
            let plan: TrimPlan = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: args.plan.clone(),
                reason: e.to_string(),
            })?;
            let trimmed = outlier::trim(&ds, &plan)?;
            data::write_csv(&trimmed, require_out(cli)?)?;
        }
        Command::Pipeline => {
            let report = harness::run_pipeline(&cfg)?;
            if cfg.out.is_none() {
                write_json(&report, None)?;
            }
        }
        Command::Compare(args) => {
            let reports = harness::compare_methods(&cfg, &args.methods)?;
            let rows: Vec<TableRow> = reports.iter().map(TableRow::from).collect();
            write_rows(&rows, cli.out.as_deref())?;
        }
        Command::SweepBudget(args) => {
            let reports = harness::sweep_budget(&cfg, &args.budgets)?;
            let rows: Vec<TableRow> = reports.iter().map(TableRow::from).collect();
            write_rows(&rows, cli.out.as_deref())?;
        }
        Command::SweepTrees(args) => {
            let reports = harness::sweep_trees(&cfg, &args.counts)?;
            let rows: Vec<TableRow> = reports.iter().map(TableRow::from).collect();
            write_rows(&rows, cli.out.as_deref())?;
        }
        Command::Bench(args) => {
            let mut rows = Vec::new();
            for &method in &args.methods {
                let c = PipelineConfig { method, ..cfg.clone() };
                rows.extend(harness::bench_timing(&c, &args.sizes)?);
            }
            write_rows(&rows, cli.out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

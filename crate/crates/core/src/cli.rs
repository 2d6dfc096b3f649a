//! Command-line front end.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Axis;
use serde::Serialize;

use crate::checkpoint::{load_model, TrainState};
use crate::config::{resolve_output, RunConfig};
use crate::datasets::{load_dataset, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ClusteringReport};
use crate::model::Model;
use crate::theoremlab::{sweep, InitMode, Regime, RelationMode, SweepTable, TrialSpec, DEFAULT_ITERATIONS};
use crate::trainer::{final_inference, label_features, Trainer};
use crate::viz::{render_attention_overlay, ScatterMap};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gaussclust", version, about = "Cluster unlabelled images into k groups")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Score a checkpoint against a labelled dataset.
    Eval(EvalArgs),
    /// Write the planar scatter map and attention overlays of a checkpoint.
    Visualize(VisualizeArgs),
    /// Optimise free label features directly and report whether they collapse.
    TheoremCheck(TheoremArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write each macro-batch's pseudo-targets to `<run>/targets/`.
    #[arg(long)]
    pub dump_targets: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A run config (`.toml`) or an image folder.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of attention overlays to write.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RegimeArg {
    Dac,
    Gat,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RelationArg {
    GroundTruth,
    SelfEstimated,
    AllOnes,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InitArg {
    Random,
    NearCollapse,
}

#[derive(Debug, Args)]
pub struct TheoremArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub k: usize,
    /// Seeds `0..S` are run.
    #[arg(long)]
    pub seeds: u64,
    #[arg(long, value_enum)]
    pub regime: RegimeArg,
    #[arg(long, value_enum, default_value = "ground-truth")]
    pub relations: RelationArg,
    #[arg(long, value_enum, default_value = "random")]
    pub init: InitArg,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iterations: usize,
    /// Directory for `verdicts.json` and `verdicts.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Train(a) => command_train(a).map(|dir| println!("{}", dir.display())),
        Command::Eval(a) => {
            let report = command_eval(a)?;
            println!("{}", serde_json::to_string_pretty(&EvalSummary::from(&report))?);
            eprint!("{}", report_table(&report));
            Ok(())
        }
        Command::Visualize(a) => command_visualize(a),
        Command::TheoremCheck(a) => {
            let table = command_theorem_check(a)?;
            print!("{}", table.to_csv());
            Ok(())
        }
    }
}

/// Creates a fresh `run-<unix seconds>` directory under `root`.
pub fn new_run_dir(root: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut dir = root.join(format!("run-{stamp}"));
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("run-{stamp}-{n}"));
        n += 1;
    }
    std::fs::create_dir(&dir)?;
    Ok(dir)
}

/// Trains per the config and returns the run directory.
pub fn command_train(args: &TrainArgs) -> Result<PathBuf> {
    let cfg = RunConfig::load(&args.config)?;
    let data = cfg.dataset.load()?;
    let dir = new_run_dir(&cfg.output_root())?;
    cfg.save(&dir.join("config.toml"))?;
    let log = crate::trainer::RunLog::open(&dir)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let state = TrainState::load(path)?;
            if state.model_config != cfg.model_config() {
                return Err(Error::Incompatible("checkpoint model differs from the config".into()));
            }
            Trainer::from_state(&data, state)?
        }
        None => Trainer::new(&data, Model::new(cfg.model_config(), cfg.seed)?, cfg.train_config())?,
    }
    .with_log(log);
    if args.dump_targets {
        trainer = trainer.with_target_dump(dir.join("targets"))?;
    }
    trainer.run()?;
    Ok(dir)
}

fn folder_has_classes(root: &Path) -> Result<bool> {
    Ok(std::fs::read_dir(root)?.filter_map(|e| e.ok()).any(|e| e.path().is_dir()))
}

/// Loads `--data`: the dataset of a run config, or an image folder read at
/// the model's input geometry. A folder has ground truth when it holds class
/// subdirectories.
pub fn data_for_model(path: &Path, model: &Model) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    if path.is_file() {
        return RunConfig::load(path)?.dataset.load();
    }
    let cfg = model.config();
    let spec = DatasetSpec {
        root_path: path.to_path_buf(),
        image_size: cfg.input_size,
        grayscale: cfg.in_channels == 1,
        cluster_count: cfg.cluster_count,
        has_ground_truth: folder_has_classes(path)?,
        manifest: None,
    };
    load_dataset(&spec)
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub nmi_degenerate: bool,
    pub samples: u64,
}

impl From<&ClusteringReport> for EvalSummary {
    fn from(r: &ClusteringReport) -> Self {
        Self { acc: r.acc, nmi: r.nmi, ari: r.ari, nmi_degenerate: r.nmi_degenerate, samples: r.table.total() }
    }
}

/// Plain-text scores and contingency table.
pub fn report_table(r: &ClusteringReport) -> String {
    use std::fmt::Write as _;
    let mut out = format!("ACC {:.4}  NMI {:.4}  ARI {:.4}\n", r.acc, r.nmi, r.ari);
    let _ = write!(out, "{:>10}", "pred\\true");
    for c in &r.table.col_labels {
        let _ = write!(out, "{c:>7}");
    }
    out.push('\n');
    for (i, p) in r.table.row_labels.iter().enumerate() {
        let _ = write!(out, "{p:>10}");
        for n in r.table.counts.row(i) {
            let _ = write!(out, "{n:>7}");
        }
        out.push('\n');
    }
    out
}

pub fn command_eval(args: &EvalArgs) -> Result<ClusteringReport> {
    let model = load_model(&args.checkpoint)?;
    let data = data_for_model(&args.data, &model)?;
    let truth = data.ground_truth().ok_or(Error::GroundTruthRequired)?;
    let ids = final_inference(&model, &data, args.batch)?;
    evaluate(&ids, truth)
}

/// Writes `scatter.csv`, `scatter.png` and `attention_<i>.png` files.
pub fn command_visualize(args: &VisualizeArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let data = data_for_model(&args.data, &model)?;
    let out = resolve_output(&args.out);
    std::fs::create_dir_all(&out)?;
    let features = label_features(&model, &data, args.batch)?.mapv(|v| v as f64);
    let (colors, accuracy) = match data.ground_truth() {
        Some(truth) => {
            let ids = crate::model::argmax_rows(&features);
            (Some(truth.labels().to_vec()), Some(evaluate(&ids, truth)?.acc))
        }
        None => (None, None),
    };
    let scatter = ScatterMap::from_features(features.view(), colors, accuracy)?;
    scatter.write(&out.join("scatter.csv"), &out.join("scatter.png"), 512)?;
    let count = args.samples.min(data.len());
    if count > 0 {
        let ids: Vec<usize> = (0..count).collect();
        let batch = data.batch(&ids)?;
        let output = model.forward_eval(batch.samples())?;
        for (i, sample) in output.to_outputs().iter().enumerate() {
            let image = batch.samples().index_axis(Axis(0), i);
            render_attention_overlay(image, &sample.attention_map, &out.join(format!("attention_{i}.png")))?;
        }
    }
    Ok(())
}

pub fn command_theorem_check(args: &TheoremArgs) -> Result<SweepTable> {
    let regime = match args.regime {
        RegimeArg::Dac => Regime::Dac,
        RegimeArg::Gat => Regime::Gat,
    };
    let relations = match args.relations {
        RelationArg::GroundTruth => RelationMode::GroundTruth,
        RelationArg::SelfEstimated => RelationMode::SelfEstimated,
        RelationArg::AllOnes => RelationMode::AllOnes,
    };
    let init = match args.init {
        InitArg::Random => InitMode::Random,
        InitArg::NearCollapse => InitMode::NearCollapse,
    };
    let grid: Vec<TrialSpec> = (0..args.seeds)
        .map(|seed| TrialSpec { n: args.n, k: args.k, regime, relations, init, seed, iterations: args.iterations })
        .collect();
    let table = sweep(&grid)?;
    if let Some(dir) = &args.out {
        let dir = resolve_output(dir);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("verdicts.json"), serde_json::to_string_pretty(&table)?)?;
        std::fs::write(dir.join("verdicts.csv"), table.to_csv())?;
    }
    Ok(table)
}

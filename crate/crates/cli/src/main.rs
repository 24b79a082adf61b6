use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mthd_core::dataset::{generate_dataset, load_dataset, save_dataset, Study};
use mthd_core::experiment::{run_ablation, ExperimentConfig};
use mthd_core::froc_eval::{EvalReport, PredictionFile, StudyPredictions};
use mthd_core::hetero_net::HeteroNet;
use mthd_core::trainer::{assign_splits, evaluate_studies, fit, predict_study, Checkpoint, Phase};

mod plot;

#[derive(Parser, Debug)]
#[command(
    name = "mthd",
    version,
    about = "Semi-supervised hetero-modal lesion detection"
)]
struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides both the dataset and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dataset directory.
    #[arg(long, global = true, env = "MTHD_DATA_ROOT", default_value = "data")]
    data_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenerateData {
        /// Target directory; defaults to the data root.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace a non-empty target directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the supervised initialization on labeled studies.
    TrainSupervised(TrainArgs),
    /// Mean-teacher training from a supervised checkpoint.
    TrainSsl {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, required = true)]
        init_checkpoint: PathBuf,
    },
    /// Score a checkpoint on one split and write the five-point report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Only feed these sequences (comma separated).
        #[arg(long, value_delimiter = ',')]
        sequences: Option<Vec<String>>,
        /// Report path (JSON); the table is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-study detections here.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Series name used by plot-froc.
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Render FROC curves and sensitivity against labeled fraction.
    PlotFroc {
        /// Reports written by `evaluate` or `run-ablation`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "froc.svg")]
        out: PathBuf,
    },
    /// Train every configured ablation row and print the comparison table.
    RunAblation {
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[arg(long)]
        labeled_fraction: Option<f64>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Checkpoint and log directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Keep labels on this fraction of training studies.
    #[arg(long)]
    labeled_fraction: Option<f64>,
    /// Steps of the phase being run.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false)
}

fn load_studies(root: &Path) -> Result<Vec<Study>> {
    let (studies, _) =
        load_dataset(root).with_context(|| format!("loading dataset from {}", root.display()))?;
    Ok(studies)
}

fn generate(cli: &Cli, out: Option<&Path>, force: bool) -> Result<()> {
    let cfg = load_config(cli)?;
    let dir = out.unwrap_or(&cli.data_root);
    if dir.is_file() {
        bail!("{} is a file", dir.display());
    }
    if is_nonempty_dir(dir) {
        if !force {
            bail!("{} is not empty; pass --force to replace it", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    let (studies, manifest) = generate_dataset(&cfg.dataset)?;
    save_dataset(dir, &studies, &manifest)?;
    println!("{}", manifest.summary());
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs, phase: Phase, init: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let mut t = cfg.train.clone();
    t.phase = phase;
    if let Some(f) = args.labeled_fraction {
        t.labeled_fraction = f;
    }
    if let Some(n) = args.steps {
        match phase {
            Phase::Supervised => t.steps = n,
            Phase::Ssl => t.ssl_steps = n,
        }
    }
    t.checkpoint_dir = Some(args.out.clone());
    t.log_path = Some(args.out.join("metrics.jsonl"));
    t.validate()?;
    let init = init
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let studies = load_studies(&cli.data_root)?;
    let out = fit(&cfg.model, &t, studies, init.as_ref())?;
    println!(
        "{} labeled / {} unlabeled / {} val / {} test studies",
        out.splits.train_labeled.len(),
        out.splits.train_unlabeled.len(),
        out.splits.val.len(),
        out.splits.test.len()
    );
    match out.best.val_average {
        Some(v) => println!("best step {} val average {:.1}", out.best.step, 100.0 * v),
        None => println!("no validation lesions; kept the last step"),
    }
    println!("checkpoints in {}", args.out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    cli: &Cli,
    checkpoint: &Path,
    split: SplitArg,
    sequences: Option<&[String]>,
    out: Option<&Path>,
    predictions: Option<&Path>,
    label: &str,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let studies = load_studies(&cli.data_root)?;
    let tc = &ck.train;
    let splits = assign_splits(&studies, &tc.split, tc.labeled_fraction, tc.use_incomplete)?;
    let idx: Vec<usize> = match split {
        SplitArg::Train => splits.train_labeled.clone(),
        SplitArg::Val => splits.val.clone(),
        SplitArg::Test => splits.test.clone(),
        SplitArg::All => (0..studies.len())
            .filter(|&i| studies[i].boxes.is_some())
            .collect(),
    };
    let set: Vec<&Study> = idx.iter().map(|&i| &studies[i]).collect();
    let net = HeteroNet::new(ck.model.clone())?;
    let params = ck.inference_params()?;
    let r = evaluate_studies(
        &net,
        &params,
        &set,
        sequences,
        tc.decode,
        Default::default(),
    )?;
    print!("{}", r.table(label));
    if let Some(p) = out {
        EvalReport::new(label, Some(tc.labeled_fraction), &r).save(p)?;
    }
    if let Some(p) = predictions {
        let rows = set
            .iter()
            .map(|s| {
                Ok(StudyPredictions::new(
                    &s.study_id,
                    &predict_study(&net, &params, s, sequences, tc.decode)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        PredictionFile::new(rows).save(p)?;
    }
    Ok(())
}

fn ablation(cli: &Cli, out: &Path, labeled_fraction: Option<f64>) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(f) = labeled_fraction {
        cfg.train.labeled_fraction = f;
    }
    let studies = load_studies(&cli.data_root)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let table = run_ablation(&cfg, &studies, Some(out), |r| {
        println!(
            "{} (seed {}): {:.1}",
            r.variant.label(),
            r.seed,
            100.0 * r.test.average
        );
        let name = format!("{:?}", r.variant).to_lowercase();
        let path = out
            .join(format!("seed{}", r.seed))
            .join(name)
            .join("report.json");
        let report = EvalReport::new(r.variant.label(), Some(cfg.train.labeled_fraction), &r.test);
        if let Err(e) = report.save(&path) {
            eprintln!("warning: {e}");
        }
    })?;
    let text = table.render()?;
    print!("{text}");
    fs::write(out.join("ablation.txt"), &text)
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData { out, force } => generate(cli, out.as_deref(), *force),
        Command::TrainSupervised(args) => train(cli, args, Phase::Supervised, None),
        Command::TrainSsl {
            train: args,
            init_checkpoint,
        } => train(cli, args, Phase::Ssl, Some(init_checkpoint)),
        Command::Evaluate {
            checkpoint,
            split,
            sequences,
            out,
            predictions,
            label,
        } => evaluate(
            cli,
            checkpoint,
            *split,
            sequences.as_deref(),
            out.as_deref(),
            predictions.as_deref(),
            label,
        ),
        Command::PlotFroc { reports, out } => {
            let loaded = reports
                .iter()
                .map(|p| EvalReport::load(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            plot::render(&loaded, out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::RunAblation {
            out,
            labeled_fraction,
        } => ablation(cli, out, *labeled_fraction),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! `liftkit` command-line harness.
//!
//! Exit codes: 0 on success, 2 for invalid input or configuration, 1 when a
//! computation fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use liftkit::aggregate::Strategy;
use liftkit::experiment::{
    aggregate_entries, confidence_csv, load_pipeline_outputs, model_dims, prepare_data,
    run_pipeline, sample_test_set, study_conditioning_ablation, study_confidence,
    study_hypothesis_count, train_model, write_ablation_study, write_confidence_study,
    write_hypothesis_sets, write_hypothesis_study, write_text, ExperimentConfig, Layout,
};
use liftkit::metrics::evaluate_files;
use liftkit::pose::io::{read_hypotheses, read_labelled_poses, read_poses, write_poses, write_predictions};
use liftkit::sampler::{SamplerConfig, SamplerVariant};
use liftkit::trainer::load_checkpoint;
use liftkit::{Error, Result};

#[derive(Parser)]
#[command(name = "liftkit", version, about = "Diffusion-based 2D-to-3D human pose lifting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a configuration file holding every default.
    Config {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the train and test sets into <out>/data.
    GenData(ExperimentArgs),
    /// Train a denoiser on a dataset file into <out>/ckpt/model.ckpt.
    Train(TrainArgs),
    /// Draw hypotheses for every frame of a dataset.
    Sample(SampleArgs),
    /// Reduce hypotheses to one pose per frame.
    Aggregate(AggregateArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Sweeps over a finished pipeline run.
    #[command(subcommand)]
    Study(StudyCommand),
    /// Run gen-data, train, sample, aggregate and eval in sequence.
    Run(ExperimentArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Training dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    hypotheses: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    variant: Option<SamplerVariant>,
    #[arg(long)]
    seed: Option<u64>,
    /// Hypotheses file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    hypotheses: PathBuf,
    /// One of A, M, R, B, Bjoint.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Ground truth; required by B and Bjoint.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Aggregated pose file; confidences go next to it as `<stem>_confidence.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    per_action: bool,
    /// Report JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Error of every strategy against the number of hypotheses.
    Hypotheses(ExperimentArgs),
    /// Error of the kept frames against recall under confidence filtering.
    Confidence(ExperimentArgs),
    /// Pose, context and combined conditioning, each with its own model.
    Ablation {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Fail instead of training missing ablation checkpoints.
        #[arg(long)]
        no_train: bool,
    },
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} {} does not exist", path.display())))
    }
}

fn optional_config(path: &Option<PathBuf>) -> Result<Option<ExperimentConfig>> {
    path.as_deref().map(ExperimentConfig::load).transpose()
}

fn gen_data(args: &ExperimentArgs) -> Result<()> {
    let cfg = args.load()?;
    let layout = Layout::new(&cfg.output_dir);
    let (train, test) = prepare_data(&cfg)?;
    let dims = model_dims(&cfg.model);
    write_poses(&layout.train_data(), dims, &train)?;
    write_poses(&layout.test_data(), dims, &test)?;
    println!("{}", layout.train_data().display());
    println!("{}", layout.test_data().display());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.experiment.load()?;
    require_file(&args.data, "training data")?;
    if let Some(r) = &args.resume {
        require_file(r, "checkpoint")?;
    }
    let (_, data) = read_poses(&args.data)?;
    let ckpt = Layout::new(&cfg.output_dir).checkpoint();
    let state = train_model(&cfg, cfg.model.mask, &data, Some(&ckpt), args.resume.as_deref())?;
    if let Some(last) = state.history.last() {
        println!("epochs {} loss {:.6}", state.epoch, last.mean_loss);
    }
    println!("{}", ckpt.display());
    Ok(())
}

fn sample(args: &SampleArgs) -> Result<()> {
    require_file(&args.ckpt, "checkpoint")?;
    require_file(&args.data, "dataset")?;
    let base = optional_config(&args.config)?;
    let mut sampler = base
        .as_ref()
        .map_or_else(SamplerConfig::default, |c| c.sampler.clone());
    if let Some(h) = args.hypotheses {
        sampler.hypotheses = h;
    }
    if let Some(k) = args.steps {
        sampler.steps = k;
    }
    if let Some(v) = args.variant {
        sampler.variant = v;
    }
    if let Some(s) = args.seed {
        sampler.seed = s;
    }
    let state = load_checkpoint(&args.ckpt)?;
    sampler.validate(state.schedule.steps())?;
    let (dims, test) = read_poses(&args.data)?;
    let sets = sample_test_set(&state, &test, &sampler)?;
    write_hypothesis_sets(&args.out, dims, &sets)?;
    println!("{}", args.out.display());
    Ok(())
}

fn aggregate(args: &AggregateArgs) -> Result<()> {
    require_file(&args.hypotheses, "hypotheses file")?;
    let base = optional_config(&args.config)?;
    let strategy = args
        .strategy
        .or(base.as_ref().map(|c| c.aggregate.strategy))
        .unwrap_or(Strategy::Median);
    let seed = args.seed.or(base.as_ref().map(|c| c.seed)).unwrap_or(0);
    let gt = match &args.gt {
        Some(path) => {
            require_file(path, "ground truth")?;
            Some(read_labelled_poses(path)?.1)
        }
        None if strategy.needs_ground_truth() => {
            return Err(Error::Validation(format!("strategy {strategy} needs --gt")))
        }
        None => None,
    };
    let (header, entries) = read_hypotheses(&args.hypotheses)?;
    let frames = aggregate_entries(&entries, strategy, gt.as_deref(), seed)?;
    let poses: Vec<_> = frames.iter().map(|f| f.pose.clone()).collect();
    write_predictions(&args.out, header.dims, &poses)?;
    let stem = args.out.file_stem().unwrap_or_default().to_string_lossy();
    let conf = args.out.with_file_name(format!("{stem}_confidence.csv"));
    write_text(&conf, &confidence_csv(&frames))?;
    println!("{}", args.out.display());
    println!("{}", conf.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    require_file(&args.pred, "predictions")?;
    require_file(&args.gt, "ground truth")?;
    let base = optional_config(&args.config)?;
    let per_action = args.per_action || base.is_some_and(|c| c.eval.per_action);
    let report = evaluate_files(&args.pred, &args.gt, per_action)?;
    write_text(&args.out, &report.to_json())?;
    if let Some(csv) = &args.csv {
        write_text(csv, &report.to_csv())?;
    }
    print!("{}", report.to_csv());
    Ok(())
}

fn study(cmd: &StudyCommand) -> Result<()> {
    match cmd {
        StudyCommand::Hypotheses(args) => {
            let cfg = args.load()?;
            let (test, state, _) = load_pipeline_outputs(&cfg)?;
            let max = cfg.study.hypothesis_counts.iter().copied().max().unwrap_or(1);
            let sampler = SamplerConfig {
                hypotheses: max,
                ..cfg.sampler.clone()
            };
            let sets = sample_test_set(&state, &test, &sampler)?;
            let rows = study_hypothesis_count(&sets, &test, &cfg.study.hypothesis_counts, cfg.seed)?;
            write_hypothesis_study(&Layout::new(&cfg.output_dir), &rows)?;
            for r in &rows {
                println!("H={} {} {:.3}", r.hypotheses, r.strategy, r.mpjpe_mm);
            }
        }
        StudyCommand::Confidence(args) => {
            let cfg = args.load()?;
            let (test, _, sets) = load_pipeline_outputs(&cfg)?;
            let rows = study_confidence(
                &sets,
                &test,
                cfg.aggregate.strategy,
                &cfg.study.recalls,
                cfg.seed,
            )?;
            write_confidence_study(&Layout::new(&cfg.output_dir), &rows)?;
            for r in &rows {
                println!("recall {} kept {:.3} all {:.3}", r.recall, r.mpjpe_kept_mm, r.mpjpe_all_mm);
            }
        }
        StudyCommand::Ablation { experiment, no_train } => {
            let cfg = experiment.load()?;
            let layout = Layout::new(&cfg.output_dir);
            let (train, test) = if layout.train_data().is_file() && layout.test_data().is_file() {
                (read_poses(&layout.train_data())?.1, read_poses(&layout.test_data())?.1)
            } else {
                prepare_data(&cfg)?
            };
            let rows = study_conditioning_ablation(&cfg, &train, &test, !no_train)?;
            write_ablation_study(&layout, &rows)?;
            for r in &rows {
                println!(
                    "{} A {:.3} M {:.3} B {:.3} Bjoint {:.3}",
                    r.conditioning.label(),
                    r.average,
                    r.median,
                    r.best,
                    r.best_joint
                );
            }
        }
    }
    Ok(())
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::Config { seed } => {
            print!("{}", ExperimentConfig::with_seed(*seed).to_toml_string());
            Ok(())
        }
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Sample(args) => sample(args),
        Command::Aggregate(args) => aggregate(args),
        Command::Eval(args) => eval(args),
        Command::Study(cmd) => study(cmd),
        Command::Run(args) => {
            let cfg = args.load()?;
            let out = run_pipeline(&cfg)?;
            print!("{}", out.report.to_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

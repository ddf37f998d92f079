//! `etm`: command-line front end for episodic triplet mining.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure during training.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use etm_core::dataset::{self, DataManifest, SplitManifest};
use etm_core::evaluator::{evaluate_with, EvalConfig, InferenceRule};
use etm_core::experiment::{run_experiment, DataSource, ExperimentConfig, SplitConfig};
use etm_core::json::{read_json, write_json};
use etm_core::trainer::{write_log_jsonl, Checkpoint, LossKind, TrainConfig, Trainer};
use etm_core::{Dataset, EtmError, Execution, SyntheticSpec, UnlabeledMode};

#[derive(Parser)]
#[command(name = "etm", version, about = "Few-shot classification with episodic triplet mining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Gaussian-cluster dataset (data.csv + manifest.json)
    GenData(GenDataArgs),
    /// Partition a dataset's classes into train/val/test (split.json)
    Split(SplitArgs),
    /// Train an embedding network
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on N-way K-shot test episodes
    Eval(EvalArgs),
    /// Run a full experiment from a JSON config
    Run(RunArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long)]
    dim: usize,
    /// Within-class standard deviation
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Standard deviation of the class means
    #[arg(long, default_value_t = 10.0)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Existing output directory
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Clone)]
struct SplitFlags {
    /// Number of training classes (default: 70% of classes)
    #[arg(long)]
    train_classes: Option<usize>,
    /// Number of validation classes (default: 10% of classes, 0 with --train-classes)
    #[arg(long)]
    val_classes: Option<usize>,
    /// Number of test classes (default: the remaining classes)
    #[arg(long)]
    test_classes: Option<usize>,
    /// Fraction of each training class kept labeled
    #[arg(long, default_value_t = 1.0)]
    labeled_fraction: f64,
}

impl SplitFlags {
    fn manifest(&self, ds: &Dataset, seed: u64) -> Result<SplitManifest, EtmError> {
        let cfg = SplitConfig {
            train_classes: self.train_classes,
            val_classes: self.val_classes,
            test_classes: self.test_classes,
            ..SplitConfig::default()
        };
        Ok(SplitManifest::new(&cfg.spec(ds, self.labeled_fraction, seed)?, seed))
    }
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset CSV
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    split: SplitFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Etm,
    Proto,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    Weak,
    Full,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset CSV
    #[arg(long)]
    data: PathBuf,
    /// Split manifest from `etm split`; otherwise one is derived from the split flags and --seed
    #[arg(long)]
    split: Option<PathBuf>,
    #[command(flatten)]
    split_flags: SplitFlags,
    /// JSON training config; flags given on the command line override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint (its config is used; --episodes may extend it)
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Support samples per class [default: 20]
    #[arg(long)]
    ns: Option<usize>,
    /// Query samples per class [default: 15]
    #[arg(long)]
    nq: Option<usize>,
    /// Classes per episode [default: 5]
    #[arg(long)]
    nc: Option<usize>,
    /// Triplet margin [default: 0.3]
    #[arg(long)]
    margin: Option<f64>,
    /// Farthest positives averaged per query [default: 3]
    #[arg(long)]
    np: Option<usize>,
    /// Nearest negatives averaged per query [default: 5]
    #[arg(long)]
    nn: Option<usize>,
    /// Training episodes [default: 10000]
    #[arg(long)]
    episodes: Option<usize>,
    /// Initial Adam learning rate [default: 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// Episodes between learning-rate halvings [default: 1000]
    #[arg(long)]
    lr_period: Option<usize>,
    /// Supervised episodes before unlabeled samples are used [default: 50]
    #[arg(long)]
    warmup: Option<usize>,
    /// Loss function [default: etm]
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Source of unlabeled episode samples [default: none]
    #[arg(long, value_enum)]
    unlabeled_mode: Option<ModeArg>,
    /// Unlabeled samples per episode class [default: 0]
    #[arg(long)]
    nr: Option<usize>,
    /// Hidden layer widths, comma separated [default: 64,64]
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Embedding dimension [default: 128]
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// Seed for the split, initialisation and episodes [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially, 0 uses every core
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output directory
    #[arg(short, long)]
    output: PathBuf,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig, EtmError> {
        let mut cfg: TrainConfig = match &self.config {
            Some(path) => read_json(path)?,
            None => TrainConfig::default(),
        };
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.episode.n_support, self.ns);
        set(&mut cfg.episode.n_query, self.nq);
        set(&mut cfg.episode.n_way, self.nc);
        set(&mut cfg.mining.n_positive, self.np);
        set(&mut cfg.mining.n_negative, self.nn);
        set(&mut cfg.episodes, self.episodes);
        set(&mut cfg.lr_halving_period, self.lr_period);
        set(&mut cfg.warmup_supervised_episodes, self.warmup);
        set(&mut cfg.episode.n_unlabeled, self.nr);
        set(&mut cfg.embedding_dim, self.embedding_dim);
        if let Some(m) = self.margin {
            cfg.mining.margin = m;
        }
        if let Some(lr) = self.lr {
            cfg.lr0 = lr;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(h) = &self.hidden {
            cfg.hidden_dims = h.clone();
        }
        if let Some(loss) = self.loss {
            cfg.loss_kind = match loss {
                LossArg::Etm => LossKind::Etm,
                LossArg::Proto => LossKind::Prototypical,
            };
        }
        if let Some(mode) = self.unlabeled_mode {
            cfg.episode.unlabeled_mode = match mode {
                ModeArg::None => UnlabeledMode::None,
                ModeArg::Weak => UnlabeledMode::WeaklyLabeled,
                ModeArg::Full => UnlabeledMode::CompletelyUnlabeled,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InferenceArg {
    Vote,
    Prototype,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV
    #[arg(long)]
    data: PathBuf,
    /// Split manifest; its test classes are evaluated
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 1)]
    shot: usize,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    /// Query samples per class
    #[arg(long, default_value_t = 15)]
    queries: usize,
    /// Nearest neighbours that vote
    #[arg(long, default_value_t = 3)]
    np: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prediction rule (default: vote for ETM checkpoints, prototype for the baseline)
    #[arg(long, value_enum)]
    inference: Option<InferenceArg>,
    /// Worker threads; 1 runs sequentially, 0 uses every core. Affects wall time only.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output directory
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON
    #[arg(long)]
    config: PathBuf,
    /// Overrides the experiment seed and, for synthetic data, the data seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output directory (default: the config's output_dir)
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn with_threads<T>(threads: usize, f: impl FnOnce(Execution) -> T + Send) -> Result<T, EtmError>
where
    T: Send,
{
    if threads == 1 {
        return Ok(f(Execution::Sequential));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| EtmError::Config(format!("cannot start {threads} threads: {e}")))?;
    Ok(pool.install(|| f(Execution::Parallel)))
}

fn create_dir(path: &Path) -> Result<(), EtmError> {
    std::fs::create_dir_all(path).map_err(|e| EtmError::Io { path: path.to_path_buf(), source: e })
}

fn gen_data(a: GenDataArgs) -> Result<(), EtmError> {
    if !a.output.is_dir() {
        return Err(EtmError::Io {
            path: a.output.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        });
    }
    let spec = SyntheticSpec {
        num_classes: a.classes,
        samples_per_class: a.per_class,
        feature_dim: a.dim,
        class_mean_scale: a.scale,
        noise_sigma: a.sigma,
        seed: a.seed,
    };
    let ds = dataset::generate_synthetic(&spec)?;
    dataset::save_csv(&ds, a.output.join("data.csv"))?;
    let manifest = DataManifest {
        synthetic: spec,
        rows: ds.len(),
        feature_dim: ds.feature_dim(),
        csv: "data.csv".into(),
    };
    write_json(&manifest, a.output.join("manifest.json"))?;
    println!("wrote {} rows to {}", ds.len(), a.output.join("data.csv").display());
    Ok(())
}

fn split_cmd(a: SplitArgs) -> Result<(), EtmError> {
    let ds = dataset::load_csv(&a.data)?;
    let manifest = a.split.manifest(&ds, a.seed)?;
    manifest.apply(&ds)?;
    write_json(&manifest, &a.output)?;
    println!(
        "{} train / {} val / {} test classes -> {}",
        manifest.train_classes.len(),
        manifest.val_classes.len(),
        manifest.test_classes.len(),
        a.output.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), EtmError> {
    let ds = dataset::load_csv(&a.data)?;
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let cfg = match &resume {
        Some(ck) => ck.config.clone(),
        None => a.config()?,
    };
    let manifest: SplitManifest = match &a.split {
        Some(path) => read_json(path)?,
        None => a.split_flags.manifest(&ds, cfg.seed)?,
    };
    let split = manifest.apply(&ds)?;
    create_dir(&a.output)?;

    let (checkpoint, log) = with_threads(a.threads, |exec| -> Result<_, EtmError> {
        let trainer = match &resume {
            Some(ck) => Trainer::resume(&split.train_labeled, &split.train_unlabeled, ck, a.episodes)?,
            None => Trainer::new(&split.train_labeled, &split.train_unlabeled, cfg.clone())?,
        };
        let mut trainer = trainer.with_validation(&split.val).with_execution(exec);
        trainer.run()?;
        Ok((trainer.checkpoint(), trainer.log().to_vec()))
    })??;

    checkpoint.save(a.output.join("checkpoint.json"))?;
    write_log_jsonl(&log, a.output.join("train_log.jsonl"))?;
    write_json(&checkpoint.config, a.output.join("train_config.json"))?;
    write_json(&manifest, a.output.join("split.json"))?;
    if let Some(last) = log.last() {
        println!("trained to episode {}; final episode loss {:.6}", checkpoint.episode, last.loss);
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), EtmError> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let net = checkpoint.network()?;
    let ds = dataset::load_csv(&a.data)?;
    let manifest: SplitManifest = read_json(&a.split)?;
    let split = manifest.apply(&ds)?;
    let inference = match a.inference {
        Some(InferenceArg::Vote) => InferenceRule::TopKVote,
        Some(InferenceArg::Prototype) => InferenceRule::NearestPrototype,
        None => match checkpoint.config.loss_kind {
            LossKind::Etm => InferenceRule::TopKVote,
            LossKind::Prototypical => InferenceRule::NearestPrototype,
        },
    };
    let cfg = EvalConfig {
        way: a.way,
        shot: a.shot,
        queries_per_class: a.queries,
        episodes: a.episodes,
        n_positive: a.np,
        seed: a.seed,
        inference,
    };
    let report = with_threads(a.threads, |exec| evaluate_with(&net, &split.test, &cfg, exec))??;
    create_dir(&a.output)?;
    let stem = format!("eval_{}way_{}shot", a.way, a.shot);
    report.save_json(a.output.join(format!("{stem}.json")))?;
    report.save_accuracies_csv(a.output.join(format!("{stem}.csv")))?;
    println!(
        "{}-way {}-shot: accuracy {:.4} +/- {:.4} over {} episodes",
        a.way, a.shot, report.mean_accuracy, report.ci95, report.episodes
    );
    Ok(())
}

fn run_cmd(a: RunArgs) -> Result<(), EtmError> {
    let mut cfg: ExperimentConfig = read_json(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        if let DataSource::Synthetic(spec) = &mut cfg.data {
            spec.seed = seed;
        }
    }
    let out = a
        .output
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| EtmError::Config("no output directory: pass -o or set output_dir".into()))?;
    let rows = with_threads(a.threads, |exec| run_experiment(&cfg, Some(&out), exec))??;
    println!("{:<20} {:>5} {:>5} {:>10} {:>8}", "run", "way", "shot", "accuracy", "ci95");
    for r in &rows {
        println!("{:<20} {:>5} {:>5} {:>10.4} {:>8.4}", r.run, r.way, r.shot, r.mean_acc, r.ci95);
    }
    println!("summary written to {}", out.join("summary.json").display());
    Ok(())
}

fn exit_code(e: &EtmError) -> u8 {
    match e {
        EtmError::Config(_) => 1,
        e if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Split(a) => split_cmd(a),
        Command::Train(a) => train_cmd(*a),
        Command::Eval(a) => eval_cmd(a),
        Command::Run(a) => run_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `imbforge` command-line front end.
//!
//! ```text
//! imbforge <gen-data|train|eval|ablate|scm> --config <path> [--data <dir>] [--out <dir>] [--seed <n>]
//! ```

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use imbforge_core::config::{parse_config, Config, DatasetKind};
use imbforge_core::encoding::{normalize_scm, soft_confusion_matrix};
use imbforge_core::metrics::{minority_classes, percent};
use imbforge_core::trainer::{self, ArmResult, Trainer};
use imbforge_core::{Dataset, EncodingMode, Error, MetricsBundle, NetworkParams};
use serde::Serialize;

pub const CHECKPOINT_FILE: &str = "checkpoint.eenn";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVAL_FILE: &str = "eval.json";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Process exit codes, one per failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Runtime = 1,
    Usage = 2,
    Config = 3,
    MissingFile = 4,
    BadData = 5,
    BadCheckpoint = 6,
    Output = 7,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Classifies a core error raised while doing `stage`.
fn fail(stage: Exit) -> impl Fn(Error) -> CliError {
    move |e| {
        let exit = match (&e, stage) {
            (Error::Io { source, .. }, _) if source.kind() == std::io::ErrorKind::NotFound => {
                if stage == Exit::Output {
                    Exit::Output
                } else {
                    Exit::MissingFile
                }
            }
            (Error::Config(_), _) => Exit::Config,
            _ => stage,
        };
        CliError {
            exit,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "imbforge",
    version,
    about = "Enhancement label encoding for imbalanced classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct RunSpec {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory: CSV splits from `gen-data`, or the MNIST IDX files.
    #[arg(long, env = "IMBFORGE_DATA_DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the training seed (and the ablation seed list).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint for `eval` and `scm`; defaults to `<out>/checkpoint.eenn`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/val/test CSV splits.
    GenData(RunSpec),
    /// Train a network and score it on the test split.
    Train(RunSpec),
    /// Score a checkpoint on the test split.
    Eval(RunSpec),
    /// Compare baseline, re-weighting, cost-sensitive and full encodings.
    Ablate(RunSpec),
    /// Dump a checkpoint's validation and test soft-confusion matrices.
    Scm(RunSpec),
}

/// Fixed-name metrics document.
#[derive(Debug, Serialize)]
pub struct MetricsDoc {
    pub top1: f64,
    pub top5: f64,
    pub minority_top1: f64,
    pub minority_classes: Vec<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub mode: EncodingMode,
    pub epsilon: f64,
    pub mu: f64,
    pub loss: String,
}

impl MetricsDoc {
    fn new(m: &MetricsBundle, cfg: &Config) -> Self {
        Self {
            top1: m.top1,
            top5: *m.topk.values().last().expect("top-k requested"),
            minority_top1: m.minority_top1,
            minority_classes: m.minority_classes.clone(),
            epochs: cfg.epochs,
            seed: cfg.seed,
            mode: cfg.mode,
            epsilon: cfg.epsilon,
            mu: cfg.mu,
            loss: cfg.loss_kind().name().to_string(),
        }
    }
}

struct Splits {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn load_config(spec: &RunSpec) -> CliResult<Config> {
    let mut cfg = parse_config(&spec.config).map_err(|e| CliError {
        exit: match e {
            Error::Io { .. } => Exit::MissingFile,
            _ => Exit::Config,
        },
        message: e.to_string(),
    })?;
    if let Some(seed) = spec.seed {
        cfg.seed = seed;
        cfg.ablate_seeds = vec![seed];
    }
    Ok(cfg)
}

fn csv_splits_in(dir: &Path) -> bool {
    dir.join("train.csv").is_file()
}

fn mnist_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("mnist");
    if sub.join("train-images-idx3-ubyte").is_file() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn load_splits(cfg: &Config, data: Option<&Path>) -> CliResult<Splits> {
    let n = cfg.num_classes();
    let (train, val, test) = match data {
        Some(dir) if csv_splits_in(dir) => {
            let load = |name: &str| Dataset::load_csv(dir.join(name), Some(n));
            (
                load("train.csv").map_err(fail(Exit::BadData))?,
                load("val.csv").map_err(fail(Exit::BadData))?,
                load("test.csv").map_err(fail(Exit::BadData))?,
            )
        }
        _ => {
            let dir = match (cfg.dataset, data) {
                (DatasetKind::Mnist, None) => {
                    return Err(CliError {
                        exit: Exit::MissingFile,
                        message: "dataset = \"mnist\" needs --data <dir> or IMBFORGE_DATA_DIR"
                            .into(),
                    })
                }
                (_, d) => d.map(mnist_dir),
            };
            cfg.load_datasets(dir.as_deref())
                .map_err(fail(Exit::BadData))?
        }
    };
    Ok(Splits { train, val, test })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError {
        exit: Exit::Output,
        message: format!("{}: {e}", dir.display()),
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError {
        exit: Exit::Output,
        message: format!("{}: {e}", path.display()),
    })
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn checkpoint_path(spec: &RunSpec) -> PathBuf {
    spec.checkpoint
        .clone()
        .unwrap_or_else(|| spec.out.join(CHECKPOINT_FILE))
}

fn load_checkpoint(spec: &RunSpec, cfg: &Config) -> CliResult<NetworkParams> {
    let path = checkpoint_path(spec);
    let params = NetworkParams::load(&path).map_err(fail(Exit::BadCheckpoint))?;
    if params.input_dim() != cfg.layer_sizes[0] || params.num_classes() != cfg.num_classes() {
        return Err(CliError {
            exit: Exit::BadCheckpoint,
            message: format!(
                "{}: network is {}→{}, config expects {}→{}",
                path.display(),
                params.input_dim(),
                params.num_classes(),
                cfg.layer_sizes[0],
                cfg.num_classes()
            ),
        });
    }
    Ok(params)
}

fn minority_of(cfg: &Config, splits: &Splits) -> CliResult<Vec<usize>> {
    minority_classes(&splits.train.counts(), cfg.n_min).map_err(fail(Exit::Config))
}

fn gen_data(spec: &RunSpec) -> CliResult<String> {
    let cfg = load_config(spec)?;
    // Always build from the config, never from previously written CSVs.
    let data = spec.data.as_deref().filter(|d| !csv_splits_in(d));
    let splits = load_splits(&cfg, data)?;
    create_dir(&spec.out)?;
    for (name, ds) in [
        ("train.csv", &splits.train),
        ("val.csv", &splits.val),
        ("test.csv", &splits.test),
    ] {
        write(&spec.out.join(name), ds.to_csv())?;
    }
    Ok(format!(
        "wrote {} train / {} val / {} test rows to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        spec.out.display()
    ))
}

fn train(spec: &RunSpec) -> CliResult<String> {
    let cfg = load_config(spec)?;
    let splits = load_splits(&cfg, spec.data.as_deref())?;
    let minority = minority_of(&cfg, &splits)?;
    let mut t = Trainer::new(cfg.train_config(), &splits.train, &splits.val)
        .map_err(fail(Exit::Runtime))?;
    for _ in 0..cfg.epochs {
        t.run_epoch().map_err(fail(Exit::Runtime))?;
    }
    let (params, history) = t.finish();
    let m = trainer::evaluate(&params, &splits.test, &minority).map_err(fail(Exit::Runtime))?;

    create_dir(&spec.out)?;
    params
        .save(spec.out.join(CHECKPOINT_FILE))
        .map_err(fail(Exit::Output))?;
    write(&spec.out.join(HISTORY_FILE), history.to_jsonl())?;
    let snaps = spec.out.join("snapshots");
    create_dir(&snaps)?;
    for rec in &history.epochs {
        write(
            &snaps.join(format!("generator_{:03}.csv", rec.epoch)),
            rec.generator.to_csv(),
        )?;
        write(
            &snaps.join(format!("val_scm_{:03}.csv", rec.epoch)),
            rec.val_scm.to_csv(),
        )?;
    }
    let doc = MetricsDoc::new(&m, &cfg);
    write(&spec.out.join(METRICS_FILE), json(&doc))?;
    Ok(format!(
        "top1 {}%  top5 {}%  minority {}% (classes {:?})",
        percent(doc.top1),
        percent(doc.top5),
        percent(doc.minority_top1),
        doc.minority_classes
    ))
}

fn eval(spec: &RunSpec) -> CliResult<String> {
    let cfg = load_config(spec)?;
    let params = load_checkpoint(spec, &cfg)?;
    let splits = load_splits(&cfg, spec.data.as_deref())?;
    let minority = minority_of(&cfg, &splits)?;
    let m = trainer::evaluate(&params, &splits.test, &minority).map_err(fail(Exit::Runtime))?;
    let doc = MetricsDoc::new(&m, &cfg);
    create_dir(&spec.out)?;
    write(&spec.out.join(EVAL_FILE), json(&doc))?;
    Ok(format!(
        "top1 {}%  top5 {}%  minority {}%",
        percent(doc.top1),
        percent(doc.top5),
        percent(doc.minority_top1)
    ))
}

/// `mode,top1,minority` with mean percentages over the seeds.
pub fn ablation_table(arms: &[ArmResult]) -> String {
    let mut s = String::from("mode,top1,minority\n");
    for a in arms {
        s.push_str(&format!(
            "{},{},{}\n",
            a.mode,
            percent(a.mean_top1()),
            percent(a.mean_minority())
        ));
    }
    s
}

fn ablate(spec: &RunSpec) -> CliResult<String> {
    let cfg = load_config(spec)?;
    if cfg.ablate_seeds.is_empty() {
        return Err(CliError {
            exit: Exit::Config,
            message: format!("{}: ablate_seeds is empty", spec.config.display()),
        });
    }
    let splits = load_splits(&cfg, spec.data.as_deref())?;
    let minority = minority_of(&cfg, &splits)?;
    let arms = trainer::run_ablation(
        &cfg.train_config(),
        &EncodingMode::ALL,
        &cfg.ablate_seeds,
        &splits.train,
        &splits.val,
        &splits.test,
        &minority,
    )
    .map_err(fail(Exit::Runtime))?;
    let table = ablation_table(&arms);
    create_dir(&spec.out)?;
    write(&spec.out.join(ABLATION_FILE), &table)?;
    write(&spec.out.join("ablation.json"), json(&arms))?;
    Ok(table.trim_end().to_string())
}

fn scm(spec: &RunSpec) -> CliResult<String> {
    let cfg = load_config(spec)?;
    let params = load_checkpoint(spec, &cfg)?;
    let splits = load_splits(&cfg, spec.data.as_deref())?;
    create_dir(&spec.out)?;
    for (name, ds) in [("scm_val.csv", &splits.val), ("scm_test.csv", &splits.test)] {
        let outputs = params.predict(&ds.features).map_err(fail(Exit::Runtime))?;
        let s =
            soft_confusion_matrix(&ds.one_hot_labels(), &outputs).map_err(fail(Exit::Runtime))?;
        let s = normalize_scm(&s, &ds.counts()).map_err(fail(Exit::BadData))?;
        write(&spec.out.join(name), s.to_csv())?;
    }
    Ok(format!(
        "wrote scm_val.csv and scm_test.csv to {}",
        spec.out.display()
    ))
}

pub fn run(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::GenData(s) => gen_data(s),
        Command::Train(s) => train(s),
        Command::Eval(s) => eval(s),
        Command::Ablate(s) => ablate(s),
        Command::Scm(s) => scm(s),
    }
}

/// Parses `args`, runs the command, reports on stdout/stderr and returns
/// the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                Exit::Usage as i32
            } else {
                Exit::Ok as i32
            };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            Exit::Ok as i32
        }
        Err(e) => {
            eprintln!("imbforge: error: {e}");
            e.exit as i32
        }
    }
}

//! Command-line front end. `run` parses arguments, prints the resolved
//! configuration, executes one subcommand and maps failures to exit codes.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use thiserror::Error;

use crate::autodiff::TensorError;
use crate::complexity_profiler::{compare, profile_named, summary_csv, summary_table, ProfileError};
use crate::dataset_io::{DatasetError, ImageStore, SplitManifest, TRIPLET_STYLES};
use crate::evaluator::{cross_domain_report, export_embeddings, export_trajectory, CheckpointModel, EvalError, SceneSplit};
use crate::losses::LossError;
use crate::model::{Checkpoint, ModelError};
use crate::scene_synth::{augment_split, build_dataset, CameraIntrinsics, DomainStyle, SceneError, SceneSpec};
use crate::trainer::{train, Regime, TrainConfig, TrainError};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Usage,
    Io,
    Config,
    Numeric,
}

impl Category {
    pub fn code(self) -> i32 {
        match self {
            Category::Usage => EXIT_USAGE,
            Category::Io => EXIT_IO,
            Category::Config => EXIT_CONFIG,
            Category::Numeric => EXIT_NUMERIC,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Io => "io",
            Category::Config => "config",
            Category::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn dataset_category(e: &DatasetError) -> Category {
    match e {
        DatasetError::Io { .. } | DatasetError::MissingImage(_) | DatasetError::Image { .. } => Category::Io,
        _ => Category::Config,
    }
}

fn model_category(e: &ModelError) -> Category {
    match e {
        ModelError::Io(_) | ModelError::Checkpoint(_) => Category::Io,
        ModelError::Tensor(t) => tensor_category(t),
        _ => Category::Config,
    }
}

fn tensor_category(e: &TensorError) -> Category {
    match e {
        TensorError::DegenerateNorm { .. } => Category::Numeric,
        _ => Category::Config,
    }
}

impl CliError {
    pub fn category(&self) -> Category {
        match self {
            CliError::Usage(_) => Category::Usage,
            CliError::Io { .. } => Category::Io,
            CliError::Scene(e) => match e {
                SceneError::Io { .. } => Category::Io,
                SceneError::Dataset(d) => dataset_category(d),
                _ => Category::Config,
            },
            CliError::Data(e) => dataset_category(e),
            CliError::Train(e) => match e {
                TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } => Category::Numeric,
                TrainError::Loss(LossError::DegenerateQuaternion { .. }) => Category::Numeric,
                TrainError::Loss(LossError::Tensor(t)) | TrainError::Tensor(t) => tensor_category(t),
                TrainError::Io { .. } => Category::Io,
                TrainError::Data(d) => dataset_category(d),
                TrainError::Model(m) => model_category(m),
                _ => Category::Config,
            },
            CliError::Eval(e) => match e {
                EvalError::Io { .. } | EvalError::MissingDomain(_) => Category::Io,
                EvalError::Data(d) => dataset_category(d),
                EvalError::Model(m) => model_category(m),
                _ => Category::Config,
            },
            CliError::Profile(ProfileError::Model(m)) | CliError::Model(m) => model_category(m),
            CliError::Profile(_) => Category::Usage,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "poseadapt", version, about = "Domain-adaptive camera pose regression at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic scene into train and test splits.
    GenData(GenDataArgs),
    /// Add style variants to an existing dataset.
    Augment(AugmentArgs),
    /// Train a three-branch (da) or single-branch (sb) model.
    Train(TrainArgs),
    /// Median errors per domain on the test split.
    Eval(EvalArgs),
    /// Ground-truth and predicted test trajectory as CSV.
    Trajectory(TrajectoryArgs),
    /// Latent embeddings with a 2-D PCA projection as CSV.
    Embeddings(EmbeddingsArgs),
    /// Analytic FLOPs, parameters, activations and memory.
    Complexity(ComplexityArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Seeds the scene and both trajectories.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub n_train: usize,
    #[arg(long, default_value_t = 100)]
    pub n_test: usize,
    /// Comma-separated styles; mosaic, udnie and starry name the -like variants.
    #[arg(long, default_value = "real,fog,night")]
    pub styles: String,
    #[arg(long, default_value_t = 24)]
    pub landmarks: usize,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "fog,night")]
    pub styles: String,
    /// Comma-separated splits to augment.
    #[arg(long, default_value = "train,test")]
    pub splits: String,
}

/// Every training flag is named after its config key. Flags given on the
/// command line override the config file, which overrides the preset.
#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// da or sb.
    #[arg(long, default_value = "da")]
    pub regime: String,
    /// desk, indoor or outdoor.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Backbone profile [default: from preset].
    #[arg(long)]
    pub profile: Option<String>,
    /// Seeds initialisation, shuffling, crops and dropout.
    #[arg(long, default_value = "0")]
    pub seed: String,
    /// [default: from preset]
    #[arg(long)]
    pub epochs: Option<String>,
    /// [default: from preset]
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long, default_value = "0.001")]
    pub lr: String,
    #[arg(long, default_value = "0.0001")]
    pub weight_decay: String,
    /// Epochs between learning-rate decays [default: from preset].
    #[arg(long)]
    pub step_size: Option<String>,
    /// Learning-rate decay factor [default: from preset].
    #[arg(long)]
    pub gamma: Option<String>,
    /// Off-diagonal weight of the redundancy term.
    #[arg(long, default_value = "0.0051")]
    pub lambda: String,
    #[arg(long, default_value = "0.0000001")]
    pub alpha1: String,
    #[arg(long, default_value = "0.001")]
    pub alpha2: String,
    #[arg(long, default_value = "0.00001")]
    pub bt_eps: String,
    #[arg(long, default_value = "1")]
    pub weight_bt: String,
    #[arg(long, default_value = "1")]
    pub weight_l2: String,
    #[arg(long, default_value = "1")]
    pub weight_aug_pose: String,
    /// Leading DA epochs without the consistency terms [default: from preset].
    #[arg(long)]
    pub consistency_warmup: Option<String>,
    #[arg(long, default_value = "0.9")]
    pub beta1: String,
    #[arg(long, default_value = "0.999")]
    pub beta2: String,
    #[arg(long, default_value = "0.00000001")]
    pub adam_eps: String,
    /// [default: from preset]
    #[arg(long)]
    pub latent_dim: Option<String>,
    #[arg(long, default_value = "7")]
    pub heads: String,
    #[arg(long, default_value = "0.0025")]
    pub attention_dropout: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated dataset roots, one per scene.
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value = "real,fog,night,mosaic,udnie,starry")]
    pub domains: String,
    /// Also write the report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrajectoryArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "real")]
    pub domain: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EmbeddingsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "real,fog,night,mosaic,udnie,starry")]
    pub domains: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ComplexityArgs {
    /// Comma-separated profiles.
    #[arg(long, default_value = "mobilenetv3-large,mobilenetv3-small,desk-small")]
    pub profile: String,
    /// Print the per-layer breakdown too.
    #[arg(long)]
    pub layers: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}

/// Canonical style tag; `mosaic`, `udnie` and `starry` are accepted for
/// the `-like` styles.
pub fn style_tag(name: &str) -> Result<&'static str, SceneError> {
    let full = match name {
        "mosaic" | "udnie" | "starry" => format!("{name}-like"),
        other => other.to_string(),
    };
    Ok(full.parse::<DomainStyle>()?.tag())
}

fn style_tags(list: &str) -> Result<Vec<&'static str>, CliError> {
    let tags: Vec<&'static str> = split_list(list).iter().map(|s| style_tag(s)).collect::<Result<_, _>>()?;
    if tags.is_empty() {
        return Err(CliError::Usage("empty style list".into()));
    }
    Ok(tags)
}

/// `id = value` for every argument that has a value.
fn describe(name: &str, m: &ArgMatches) -> String {
    let mut out = format!("command = {name}\n");
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(name) else {
        return out;
    };
    for id in sub.get_arguments().map(|a| a.get_id()) {
        if let Ok(Some(vals)) = m.try_get_raw(id.as_str()) {
            let v: Vec<String> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
            let _ = writeln!(out, "{id} = {}", v.join(","));
        }
    }
    out
}

fn read_config(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(TrainConfig::parse_kv(&text)?)
}

/// Training config from the config file and the flags actually given.
pub fn resolve_train_config(args: &TrainArgs, m: &ArgMatches) -> Result<TrainConfig, CliError> {
    let file = match &args.config {
        Some(p) => read_config(p)?,
        None => Vec::new(),
    };
    let mut flags = Vec::new();
    for key in crate::trainer::KEYS {
        if m.value_source(key) == Some(ValueSource::CommandLine) {
            if let Some(v) = m.get_one::<String>(key) {
                flags.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(TrainConfig::resolve(&file, &flags)?)
}

fn load_model(path: &Path) -> Result<CheckpointModel, CliError> {
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        ModelError::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        e => e.into(),
    })?;
    Ok(CheckpointModel::new(&ckpt)?)
}

fn load_split(root: &Path) -> Result<SceneSplit, CliError> {
    Ok(SceneSplit::from_root(root)?)
}

fn execute(cmd: Command, sub: &ArgMatches, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let mut say = |s: &str| {
        let _ = out.write_all(s.as_bytes());
    };
    match cmd {
        Command::GenData(a) => {
            say(&describe("gen-data", sub));
            let styles: Vec<DomainStyle> = style_tags(&a.styles)?.iter().map(|t| t.parse()).collect::<Result<_, _>>()?;
            let scene = SceneSpec::generate(a.seed, a.landmarks)?;
            let built = build_dataset(&scene, &CameraIntrinsics::desk(), a.n_train, a.n_test, &styles, &a.out, a.seed)?;
            say(&format!("wrote {} and {}\n", built.train_manifest.display(), built.test_manifest.display()));
        }
        Command::Augment(a) => {
            say(&describe("augment", sub));
            let styles: Vec<DomainStyle> = style_tags(&a.styles)?.iter().map(|t| t.parse()).collect::<Result<_, _>>()?;
            for split in split_list(&a.splits) {
                let m = SplitManifest::load(&a.data.join(format!("{split}.manifest")))?;
                let n = augment_split(&m, &styles)?;
                say(&format!("{split}: wrote {n} images\n"));
            }
        }
        Command::Train(a) => {
            let cfg = resolve_train_config(&a, sub)?;
            say(&format!("command = train\ndata = {}\nout = {}\n", a.data.display(), a.out.display()));
            say(&cfg.to_kv_text());
            let styles: &[&str] = match cfg.regime {
                Regime::Da => &TRIPLET_STYLES,
                Regime::Sb => &["real"],
            };
            let manifest = SplitManifest::load(&a.data.join("train.manifest"))?;
            let store = ImageStore::load(&manifest, styles, cfg.preprocess())?;
            let outcome = train(&store, &cfg, Some(&a.out))?;
            if let Some(p) = outcome.final_path {
                say(&format!("saved {}\n", p.display()));
            }
        }
        Command::Eval(a) => {
            say(&describe("eval", sub));
            let domains = style_tags(&a.domains)?;
            let model = load_model(&a.ckpt)?;
            let scenes = split_list(&a.data).iter().map(|r| load_split(Path::new(r))).collect::<Result<Vec<_>, _>>()?;
            let report = cross_domain_report(&model, &scenes, &domains)?;
            say(&report.to_table());
            if let Some(p) = &a.csv {
                crate::evaluator::write_file(p, &report.to_csv())?;
            }
        }
        Command::Trajectory(a) => {
            say(&describe("trajectory", sub));
            let model = load_model(&a.ckpt)?;
            let n = export_trajectory(&model, &load_split(&a.data)?, style_tag(&a.domain)?, &a.out)?;
            say(&format!("wrote {n} rows to {}\n", a.out.display()));
        }
        Command::Embeddings(a) => {
            say(&describe("embeddings", sub));
            let domains = style_tags(&a.domains)?;
            let model = load_model(&a.ckpt)?;
            let set = export_embeddings(&model, &load_split(&a.data)?, &domains, &a.out)?;
            say(&format!("wrote {} rows to {}\n", set.keys.len(), a.out.display()));
        }
        Command::Complexity(a) => {
            say(&describe("complexity", sub));
            let profiles = split_list(&a.profile).iter().map(|p| profile_named(p)).collect::<Result<Vec<_>, _>>()?;
            if a.layers {
                for p in &profiles {
                    say(&format!("{}\n", p.name));
                    say(&p.layer_table());
                }
            }
            say(&summary_table(&profiles));
            if profiles.len() > 1 {
                say(&compare(&profiles)?.to_table());
            }
            if let Some(p) = &a.csv {
                crate::evaluator::write_file(p, &summary_csv(&profiles))?;
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the subcommand, writing
/// normal output to `out` and a one-line `error[category]: message` to
/// `err` on failure. Returns the process exit code.
pub fn run_with<I, T>(argv: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(err, "error[usage]: {first}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error[usage]: {}", e.to_string().trim());
            return EXIT_USAGE;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m.clone()).unwrap_or_default();
    match execute(cli.command, &sub, out) {
        Ok(()) => 0,
        Err(e) => {
            let c = e.category();
            let _ = writeln!(err, "error[{}]: {}", c.name(), e.to_string().replace('\n', " "));
            c.code()
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

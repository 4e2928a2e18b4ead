//! The `chatter` command line: synth, extract, train, eval, predict.
//!
//! Every tunable can come from a flag, a `--config` key=value file, or the
//! built-in default, in that order of precedence. Config keys are the long
//! flag names without the leading dashes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::dataset::{
    build_dataset, class_distribution, load_dataset, save_dataset, SourceInput, Split,
};
use crate::evaluation::{emit_report, evaluate};
use crate::model::{
    build_model_with, load_model, save_model, train, training_log_csv, Hyperparameters,
};
use crate::signal_io::{load_labels, load_wav, save_labels, save_wav, MachiningClass};
use crate::spectral::{export_frame_pgm, extract_frames, SpectralConfig};
use crate::synth::{generate_corpus, parse_corpus_manifest, CorpusParams};

/// Name of the corpus manifest written by `synth` and read by `extract`.
pub const CORPUS_MANIFEST: &str = "manifest.txt";

pub const DEFAULT_PER_CLASS: usize = 300;
pub const DEFAULT_AMBIGUOUS_FRACTION: f64 = 0.1;
pub const DEFAULT_RPM: [f64; 3] = [1800.0, 2400.0, 3000.0];
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_TEST_FRACTION: f64 = 0.3;

const CONFIG_KEYS: &[&str] = &[
    "per-class",
    "ambiguous-frac",
    "rpm",
    "seed",
    "hop",
    "window",
    "lines",
    "fmax",
    "crop-db",
    "test-frac",
    "batch",
    "lr",
    "epochs",
    "dropout",
    "split",
];

#[derive(Debug, Parser)]
#[command(
    name = "chatter",
    version,
    about = "Machining chatter detection from vibration spectra"
)]
pub struct Cli {
    /// key=value file overriding built-in defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Increase log output (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic corpus
    Synth(SynthArgs),
    /// Turn recordings into a split spectral dataset
    Extract(ExtractArgs),
    /// Train a classifier on a dataset
    Train(TrainArgs),
    /// Evaluate a model on one dataset split
    Eval(EvalArgs),
    /// Classify every frame of a WAV file
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub ambiguous_frac: Option<f64>,
    /// Comma-separated spindle speeds
    #[arg(long)]
    pub rpm: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct SpectralArgs {
    #[arg(long)]
    pub hop: Option<f64>,
    #[arg(long)]
    pub window: Option<f64>,
    #[arg(long)]
    pub lines: Option<usize>,
    #[arg(long)]
    pub fmax: Option<f64>,
    #[arg(long)]
    pub crop_db: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub spectral: SpectralArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub test_frac: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model file; the epoch log goes to `<out>.log.csv`
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val, test or test2
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub wav: PathBuf,
    /// Write one PGM image per frame here
    #[arg(long)]
    pub emit_frames: Option<PathBuf>,
    #[command(flatten)]
    pub spectral: SpectralArgs,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Pipeline(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Pipeline(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Pipeline(m) => write!(f, "error: {m}"),
        }
    }
}

fn pipeline(e: impl std::fmt::Display) -> CliError {
    CliError::Pipeline(e.to_string())
}

/// Values read from a `--config` file.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected key=value", n + 1))
            })?;
            let key = k.trim().trim_start_matches("--").replace('_', "-");
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!(
                    "config line {}: unknown key {key:?}",
                    n + 1
                )));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Flag value if given, else the config value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| CliError::Usage(format!("config key {key}: invalid value {raw:?}"))),
            None => Ok(default),
        }
    }
}

pub fn parse_rpm_list(text: &str) -> Result<Vec<f64>, CliError> {
    let rpms: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--rpm: cannot parse {text:?}")))?;
    if rpms.is_empty() || rpms.iter().any(|r| !(*r > 0.0)) {
        return Err(CliError::Usage(format!(
            "--rpm: speeds must be positive, got {text:?}"
        )));
    }
    Ok(rpms)
}

pub fn resolve_spectral(args: &SpectralArgs, cfg: &ConfigFile) -> Result<SpectralConfig, CliError> {
    let d = SpectralConfig::default();
    Ok(SpectralConfig {
        hop_s: cfg.pick(args.hop, "hop", d.hop_s)?,
        window_s: cfg.pick(args.window, "window", d.window_s)?,
        n_lines: cfg.pick(args.lines, "lines", d.n_lines)?,
        f_max_hz: cfg.pick(args.fmax, "fmax", d.f_max_hz)?,
        crop_db: cfg.pick(args.crop_db, "crop-db", d.crop_db)?,
        ..d
    })
}

pub fn resolve_hyperparameters(
    args: &TrainArgs,
    cfg: &ConfigFile,
) -> Result<Hyperparameters, CliError> {
    let d = Hyperparameters::default();
    Ok(Hyperparameters {
        batch_size: cfg.pick(args.batch, "batch", d.batch_size)?,
        learning_rate: cfg.pick(args.lr, "lr", d.learning_rate)?,
        epochs: cfg.pick(args.epochs, "epochs", d.epochs)?,
        dropout_rate: cfg.pick(args.dropout, "dropout", d.dropout_rate)?,
        rng_seed: cfg.pick(args.seed, "seed", DEFAULT_SEED)?,
        ..d
    })
}

/// Parses `argv` (program name first), runs the subcommand, and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match execute(&cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command, writing any report text to `out`.
pub fn execute(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &cfg, out),
        Command::Extract(a) => cmd_extract(a, &cfg, out),
        Command::Train(a) => cmd_train(a, &cfg, out),
        Command::Eval(a) => cmd_eval(a, &cfg, out),
        Command::Predict(a) => cmd_predict(a, &cfg, out),
    }
}

fn cmd_synth(
    a: &SynthArgs,
    cfg: &ConfigFile,
    out: &mut dyn std::io::Write,
) -> Result<(), CliError> {
    let per_class = cfg.pick(a.per_class, "per-class", DEFAULT_PER_CLASS)?;
    let frac = cfg.pick(
        a.ambiguous_frac,
        "ambiguous-frac",
        DEFAULT_AMBIGUOUS_FRACTION,
    )?;
    let rpm = match cfg.pick(a.rpm.clone(), "rpm", String::new())? {
        s if s.is_empty() => DEFAULT_RPM.to_vec(),
        s => parse_rpm_list(&s)?,
    };
    let seed = cfg.pick(a.seed, "seed", DEFAULT_SEED)?;
    if per_class == 0 {
        return Err(CliError::Usage("--per-class must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&frac) {
        return Err(CliError::Usage(format!(
            "--ambiguous-frac {frac} outside [0, 1]"
        )));
    }

    let corpus =
        generate_corpus(per_class, frac, &rpm, seed, &CorpusParams::default()).map_err(pipeline)?;
    fs::create_dir_all(&a.out).map_err(pipeline)?;
    for item in &corpus.items {
        save_wav(&item.signal, a.out.join(format!("{}.wav", item.id))).map_err(pipeline)?;
        save_labels(&item.labels, a.out.join(format!("{}.csv", item.id))).map_err(pipeline)?;
    }
    fs::write(a.out.join(CORPUS_MANIFEST), corpus.manifest()).map_err(pipeline)?;
    writeln!(
        out,
        "wrote {} signals to {}",
        corpus.items.len(),
        a.out.display()
    )
    .map_err(pipeline)?;
    Ok(())
}

/// Pairs each recording in `dir` with its label file, using the corpus
/// manifest when present and otherwise every `*.wav` with a sibling `*.csv`.
fn collect_sources(dir: &Path) -> Result<Vec<SourceInput>, CliError> {
    let manifest_path = dir.join(CORPUS_MANIFEST);
    let entries: Vec<(String, bool, String)> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(pipeline)?;
        parse_corpus_manifest(&text)
            .map_err(|e| CliError::Pipeline(format!("CorruptDataset: {e}")))?
            .into_iter()
            .map(|e| {
                let origin = e.spec.as_ref().map(|s| s.to_record()).unwrap_or_default();
                (e.id, e.ambiguous, origin)
            })
            .collect()
    } else {
        let mut ids: Vec<String> = fs::read_dir(dir)
            .map_err(pipeline)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .filter(|p| p.with_extension("csv").exists())
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        ids.sort();
        ids.into_iter()
            .map(|id| {
                let origin = format!("{id}.wav");
                (id, false, origin)
            })
            .collect()
    };

    entries
        .into_iter()
        .map(|(id, ambiguous, origin)| {
            let signal = load_wav(dir.join(format!("{id}.wav"))).map_err(pipeline)?;
            let labels = load_labels(dir.join(format!("{id}.csv"))).map_err(pipeline)?;
            Ok(SourceInput {
                id,
                signal,
                labels,
                ambiguous,
                origin,
            })
        })
        .collect()
}

fn cmd_extract(
    a: &ExtractArgs,
    cfg: &ConfigFile,
    out: &mut dyn std::io::Write,
) -> Result<(), CliError> {
    let config = resolve_spectral(&a.spectral, cfg)?;
    let seed = cfg.pick(a.seed, "seed", DEFAULT_SEED)?;
    let test_frac = cfg.pick(a.test_frac, "test-frac", DEFAULT_TEST_FRACTION)?;
    if !(0.0..1.0).contains(&test_frac) {
        return Err(CliError::Usage(format!(
            "--test-frac {test_frac} outside [0, 1)"
        )));
    }

    let sources = collect_sources(&a.input)?;
    if sources.is_empty() {
        return Err(CliError::Pipeline(format!(
            "EmptyDataset: no labeled recordings in {}",
            a.input.display()
        )));
    }
    let ds = build_dataset(&sources, &config, seed, test_frac).map_err(pipeline)?;
    ds.require_all_classes().map_err(pipeline)?;
    save_dataset(&ds, &a.out).map_err(pipeline)?;

    writeln!(
        out,
        "{} frames from {} recordings ({} dropped)",
        ds.len(),
        sources.len(),
        ds.manifest.dropped_frames()
    )
    .map_err(pipeline)?;
    for split in Split::ALL {
        let dist = class_distribution(&ds, split);
        let counts: Vec<String> = MachiningClass::ALL
            .iter()
            .map(|c| format!("{c}={}", dist.get(c).copied().unwrap_or(0)))
            .collect();
        writeln!(out, "{split}: {}", counts.join(" ")).map_err(pipeline)?;
    }
    Ok(())
}

/// Path of the training log that accompanies a model file.
pub fn log_path(model_path: &Path) -> PathBuf {
    let mut name = model_path.as_os_str().to_owned();
    name.push(".log.csv");
    PathBuf::from(name)
}

fn cmd_train(
    a: &TrainArgs,
    cfg: &ConfigFile,
    out: &mut dyn std::io::Write,
) -> Result<(), CliError> {
    let hp = resolve_hyperparameters(a, cfg)?;
    hp.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let ds = load_dataset(&a.data).map_err(pipeline)?;
    ds.require_all_classes().map_err(pipeline)?;
    let model = build_model_with(ds.n_lines(), hp.dropout_rate, hp.rng_seed)
        .with_crop_db(ds.manifest.config.crop_db as f32);
    info!(
        "training on {} frames for {} epochs",
        ds.indices(Split::Train).len(),
        hp.epochs
    );
    let model = train(model, &ds, &hp).map_err(pipeline)?;

    save_model(&model, &a.out).map_err(pipeline)?;
    fs::write(log_path(&a.out), training_log_csv(&model.training_log)).map_err(pipeline)?;
    let best = model
        .training_log
        .iter()
        .map(|e| e.val_accuracy)
        .fold(f64::NAN, f64::max);
    writeln!(
        out,
        "trained {} epochs, best val accuracy {best:.4}",
        model.training_log.len()
    )
    .map_err(pipeline)?;
    Ok(())
}

fn unix_timestamp() -> String {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_default()
}

fn cmd_eval(a: &EvalArgs, cfg: &ConfigFile, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let split: Split = cfg
        .pick(a.split.clone(), "split", "test".to_string())?
        .parse()
        .map_err(|_| CliError::Usage("--split must be one of train, val, test, test2".into()))?;
    let model = load_model(&a.model).map_err(pipeline)?;
    let ds = load_dataset(&a.data).map_err(pipeline)?;

    let mut predictions = Vec::new();
    let mut labels = Vec::new();
    for s in ds.split_samples(split) {
        predictions.push(model.predict(&s.lines_f32()).map_err(pipeline)?);
        labels.push(s.label);
    }
    let model_id = a
        .model
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let report = evaluate(
        &predictions,
        &labels,
        split.name(),
        &model_id,
        &unix_timestamp(),
    )
    .map_err(pipeline)?;
    emit_report(&report, &a.out).map_err(pipeline)?;

    writeln!(
        out,
        "{split}: accuracy {:.4} on {} frames",
        report.metrics.accuracy, report.metrics.total
    )
    .map_err(pipeline)?;
    Ok(())
}

fn cmd_predict(
    a: &PredictArgs,
    cfg: &ConfigFile,
    out: &mut dyn std::io::Write,
) -> Result<(), CliError> {
    let model = load_model(&a.model).map_err(pipeline)?;
    let mut config = resolve_spectral(&a.spectral, cfg)?;
    if a.spectral.lines.is_none() {
        config.n_lines = model.n_inputs();
    }
    if a.spectral.crop_db.is_none() {
        config.crop_db = f64::from(model.crop_db());
    }
    let signal = load_wav(&a.wav).map_err(pipeline)?;
    let frames = extract_frames(&signal, &config).map_err(pipeline)?;
    if let Some(dir) = &a.emit_frames {
        fs::create_dir_all(dir).map_err(pipeline)?;
    }

    let mut text = String::from("t_start,label,p_chatter,p_machining,p_rotation\n");
    let mut flagged = 0;
    for frame in &frames {
        let lines: Vec<f32> = frame.lines.iter().map(|&v| v as f32).collect();
        let p = model.predict(&lines).map_err(pipeline)?;
        flagged += usize::from(p.input_out_of_range);
        let [c, m, r] = p.probabilities;
        let _ = writeln!(
            text,
            "{:.3},{},{c:.6},{m:.6},{r:.6}",
            frame.t_start_s, p.predicted
        );
        if let Some(dir) = &a.emit_frames {
            let path = dir.join(format!("frame_{:05}.pgm", frame.frame_index));
            export_frame_pgm(frame, config.crop_db, path).map_err(pipeline)?;
        }
    }
    if flagged > 0 {
        warn!("{flagged} frames had inputs outside the model's range");
    }
    out.write_all(text.as_bytes()).map_err(pipeline)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let cfg = ConfigFile::parse("# comment\nlr = 0.01\n--epochs=3\ntest_frac=0.2\n").unwrap();
        assert_eq!(cfg.pick(None, "lr", 1.0f32).unwrap(), 0.01);
        assert_eq!(cfg.pick(Some(7usize), "epochs", 30).unwrap(), 7);
        assert_eq!(cfg.pick(None, "epochs", 30usize).unwrap(), 3);
        assert_eq!(cfg.pick(None, "test-frac", 0.3).unwrap(), 0.2);
        assert_eq!(cfg.pick(None, "batch", 2usize).unwrap(), 2);
        assert!(matches!(
            ConfigFile::parse("nonsense"),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            ConfigFile::parse("colour=red"),
            Err(CliError::Usage(_))
        ));
        let bad = ConfigFile::parse("lr=fast").unwrap();
        assert!(bad.pick(None, "lr", 1.0f32).is_err());
    }

    #[test]
    fn rpm_lists() {
        assert_eq!(parse_rpm_list("1800, 3000").unwrap(), vec![1800.0, 3000.0]);
        assert!(parse_rpm_list("1800,x").is_err());
        assert!(parse_rpm_list("-5").is_err());
    }

    #[test]
    fn log_path_appends_suffix() {
        assert_eq!(
            log_path(Path::new("a/m.chmd")),
            PathBuf::from("a/m.chmd.log.csv")
        );
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["chatter"]), 1);
        assert_eq!(run(["chatter", "train", "--data", "x"]), 1);
        assert_eq!(
            run(["chatter", "synth", "--out", "x", "--per-class", "many"]),
            1
        );
        assert_eq!(run(["chatter", "--help"]), 0);
    }
}

//! The `bfpcnn` command line: argument parsing, run configuration and the
//! five subcommands.

mod data;

pub use data::{gen_synthetic, ingest, load_dataset, prepare_image, synthetic_image, DatasetManifest, CLASS_NAMES};

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::model::{build_model, load_checkpoint, save_checkpoint, ModelConfig, ModelGraph};
use crate::preprocess::{preprocess_stages, read_pgm, write_pgm, DEFAULT_TARGET, DEFAULT_WINDOW};
use crate::train::{evaluate, history_csv, train_with, Evaluation, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "bfpcnn", version, about = "Alzheimer's MRI classifier: data generation, preprocessing, training and inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic four-class PGM dataset.
    Gen(GenArgs),
    /// Equalize, median-filter and resize every image of a dataset tree.
    Preprocess(PreprocessArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset tree.
    Eval(EvalArgs),
    /// Classify one image.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TARGET)]
    pub target: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Also write each intermediate stage under OUT/stages/.
    #[arg(long)]
    pub stages: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` file; explicit flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Val,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model config; defaults to config.txt beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Restrict to one side of the training split recorded beside the checkpoint.
    #[arg(long, value_enum, default_value_t = Split::All)]
    pub split: Split,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Model config; defaults to config.txt beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Model and training settings of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl RunSpec {
    /// `seed` seeds both initialization and training; `model_seed` only the former.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => {
                self.model.set("seed", value)?;
                self.train.set("seed", value)?;
            }
            "model_seed" => {
                self.model.set("seed", value)?;
            }
            _ => {
                if !self.model.set(key, value)? && !self.train.set(key, value)? {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut spec = Self::default();
        spec.apply_text(&fs::read_to_string(path)?)?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.class_count != CLASS_NAMES.len() {
            return Err(Error::Config(format!("class_count must be {} for this dataset layout", CLASS_NAMES.len())));
        }
        Ok(())
    }

    /// The fully resolved settings; feeding this back through `apply_text`
    /// reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.train.to_pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        for (k, v) in self.model.to_pairs() {
            let k = if k == "seed" { "model_seed" } else { k };
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

/// Build the output tree in a sibling temp directory and rename it into
/// place once `fill` succeeds. `out` may exist only as an empty directory.
fn atomic_dir<T>(out: &Path, fill: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if out.exists() {
        let empty = out.is_dir() && fs::read_dir(out)?.next().is_none();
        if !empty {
            return Err(Error::Config(format!("output {} already exists and is not an empty directory", out.display())));
        }
    }
    let name = out.file_name().ok_or_else(|| Error::Config(format!("bad output path {}", out.display())))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp)?;
    match fill(&tmp) {
        Ok(v) => {
            if out.exists() {
                fs::remove_dir(out)?;
            }
            fs::rename(&tmp, out)?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

pub fn cmd_gen(args: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = atomic_dir(&args.out, |tmp| gen_synthetic(tmp, args.per_class, args.size, args.seed))?;
    for (name, n) in CLASS_NAMES.iter().zip(manifest.counts()) {
        writeln!(out, "{name} {n}")?;
    }
    writeln!(out, "total {}", manifest.total())?;
    Ok(())
}

pub fn cmd_preprocess(args: &PreprocessArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = ingest(&args.input)?;
    atomic_dir(&args.out, |tmp| {
        for (label, path) in manifest.samples() {
            let stages = preprocess_stages(&read_pgm(path)?, args.target, args.window)?;
            let file = path.file_name().expect("listed files have names");
            let class = CLASS_NAMES[label];
            let emit = |dir: PathBuf, img| -> Result<()> {
                fs::create_dir_all(&dir)?;
                write_pgm(&dir.join(file), img)
            };
            emit(tmp.join(class), &stages.resized)?;
            if args.stages {
                let st = tmp.join("stages");
                emit(st.join("equalized").join(class), &stages.equalized)?;
                emit(st.join("median").join(class), &stages.filtered)?;
                emit(st.join("resized").join(class), &stages.resized)?;
            }
        }
        for name in CLASS_NAMES {
            fs::create_dir_all(tmp.join(name))?;
        }
        Ok(())
    })?;
    for (name, n) in CLASS_NAMES.iter().zip(manifest.counts()) {
        writeln!(out, "{name} {n}")?;
    }
    writeln!(out, "processed {} images to {}x{}", manifest.total(), args.target, args.target)?;
    Ok(())
}

/// Which train flags were given explicitly on the command line.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub lr: bool,
    pub epochs: bool,
    pub batch: bool,
    pub seed: bool,
}

impl Overrides {
    fn from_matches(m: &ArgMatches) -> Self {
        let given = |id: &str| m.value_source(id) == Some(ValueSource::CommandLine);
        Self { lr: given("lr"), epochs: given("epochs"), batch: given("batch"), seed: given("seed") }
    }
}

/// Defaults, then the config file, then explicit flags.
pub fn resolve_train_spec(args: &TrainArgs, given: Overrides) -> Result<RunSpec> {
    let mut spec = match &args.config {
        Some(p) => RunSpec::from_file(p)?,
        None => RunSpec::default(),
    };
    if given.lr || args.config.is_none() {
        spec.train.learning_rate = args.lr;
    }
    if given.epochs || args.config.is_none() {
        spec.train.epochs = args.epochs;
    }
    if given.batch || args.config.is_none() {
        spec.train.batch_size = args.batch;
    }
    if given.seed || args.config.is_none() {
        spec.set("seed", &args.seed.to_string())?;
    }
    spec.validate()?;
    Ok(spec)
}

fn metrics_text(e: &Evaluation) -> String {
    format!("loss {:.6}\n{}", e.loss, e.metrics.summary(&CLASS_NAMES))
}

fn write_confusion(dir: &Path, e: &Evaluation) -> Result<()> {
    fs::write(dir.join("confusion.csv"), e.confusion.to_csv(&CLASS_NAMES))?;
    fs::write(dir.join("confusion_normalized.csv"), e.confusion.to_normalized_csv(&CLASS_NAMES))?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, given: Overrides, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let spec = resolve_train_spec(args, given)?;
    let manifest = ingest(&args.data)?;
    let data = load_dataset(&manifest, spec.model.input_size)?;
    let samples: Vec<PathBuf> = manifest.samples().map(|(_, p)| manifest.relative(p).to_path_buf()).collect();
    let report = atomic_dir(&args.out, |tmp| {
        fs::write(tmp.join("config.txt"), spec.to_text())?;
        let mut model = build_model(&spec.model)?;
        writeln!(log, "parameters {} layers {}", model.param_count(), model.layer_count())?;
        let report = train_with(&mut model, &data, &spec.train, |t, v| {
            let _ = writeln!(
                log,
                "epoch {:>3} train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}",
                t.epoch, t.loss, t.accuracy, v.loss, v.accuracy
            );
        })?;
        save_checkpoint(&model, &tmp.join("model.ckpt"))?;
        fs::write(tmp.join("history.csv"), history_csv(&report.history))?;
        write_confusion(tmp, &report.val)?;
        fs::write(tmp.join("metrics.txt"), format!("[train]\n{}[val]\n{}", metrics_text(&report.train), metrics_text(&report.val)))?;
        let mut split = String::new();
        for (side, idx) in [("train", &report.train_indices), ("val", &report.val_indices)] {
            for &i in idx {
                split.push_str(&format!("{side} {}\n", samples[i].display()));
            }
        }
        fs::write(tmp.join("split.txt"), split)?;
        Ok(report)
    })?;
    writeln!(out, "train accuracy {:.6}", report.train.metrics.accuracy)?;
    writeln!(out, "val accuracy {:.6}", report.val.metrics.accuracy)?;
    writeln!(out, "run written to {}", args.out.display())?;
    Ok(())
}

fn sibling(ckpt: &Path, name: &str) -> PathBuf {
    ckpt.parent().unwrap_or(Path::new(".")).join(name)
}

/// The run spec for a checkpoint: the explicit file, else `config.txt` beside
/// the checkpoint, else the defaults.
pub fn spec_for_checkpoint(ckpt: &Path, config: Option<&Path>) -> Result<RunSpec> {
    let echo = sibling(ckpt, "config.txt");
    match config {
        Some(p) => RunSpec::from_file(p),
        None if echo.is_file() => RunSpec::from_file(&echo),
        None => Ok(RunSpec::default()),
    }
}

fn open_model(ckpt: &Path, config: Option<&Path>) -> Result<(RunSpec, ModelGraph)> {
    let spec = spec_for_checkpoint(ckpt, config)?;
    spec.validate()?;
    let model = load_checkpoint(ckpt, &spec.model)?;
    Ok((spec, model))
}

fn split_indices(manifest: &DatasetManifest, ckpt: &Path, split: Split) -> Result<Vec<usize>> {
    let all: Vec<PathBuf> = manifest.samples().map(|(_, p)| manifest.relative(p).to_path_buf()).collect();
    let side = match split {
        Split::All => return Ok((0..all.len()).collect()),
        Split::Train => "train",
        Split::Val => "val",
    };
    let listing = fs::read_to_string(sibling(ckpt, "split.txt"))?;
    let mut idx = Vec::new();
    for line in listing.lines() {
        let Some((s, rel)) = line.split_once(' ') else { continue };
        if s != side {
            continue;
        }
        let i = all
            .iter()
            .position(|p| p == Path::new(rel))
            .ok_or_else(|| Error::ShapeConflict(format!("split file lists {rel}, which is not in the dataset")))?;
        idx.push(i);
    }
    if idx.is_empty() {
        return Err(Error::EmptyClass(format!("no {side} samples listed in split.txt")));
    }
    Ok(idx)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (spec, model) = open_model(&args.ckpt, args.config.as_deref())?;
    let manifest = ingest(&args.data)?;
    let data = load_dataset(&manifest, spec.model.input_size)?;
    let idx = split_indices(&manifest, &args.ckpt, args.split)?;
    let eval = evaluate(&model, &data, &idx, spec.train.batch_size)?;
    let text = metrics_text(&eval);
    atomic_dir(&args.out, |tmp| {
        fs::write(tmp.join("metrics.txt"), &text)?;
        write_confusion(tmp, &eval)
    })?;
    out.write_all(text.as_bytes())?;
    Ok(())
}

/// Class probabilities for one image file.
pub fn predict_file(model: &ModelGraph, image: &Path) -> Result<Vec<f32>> {
    let size = model.config().input_size;
    let pixels = prepare_image(&read_pgm(image)?, size)?;
    let probs = model.predict(&crate::tensor::Tensor::new(&[1, 1, size, size], pixels)?)?;
    Ok(probs.into_data())
}

pub fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let (_, model) = open_model(&args.ckpt, args.config.as_deref())?;
    let probs = predict_file(&model, &args.image)?;
    let mut best = 0;
    for (i, (name, p)) in CLASS_NAMES.iter().zip(&probs).enumerate() {
        writeln!(out, "{name} {p}")?;
        if *p > probs[best] {
            best = i;
        }
    }
    writeln!(out, "predicted {}", CLASS_NAMES[best])?;
    Ok(())
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Parse `args` (program name first), run the command and return the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = out.write_all(text.as_bytes());
                EXIT_OK
            } else {
                let _ = err.write_all(text.as_bytes());
                EXIT_USAGE
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = err.write_all(e.render().to_string().as_bytes());
            return EXIT_USAGE;
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a, out),
        Command::Preprocess(a) => cmd_preprocess(a, out),
        Command::Train(a) => {
            let given = matches.subcommand_matches("train").map(Overrides::from_matches).unwrap_or_default();
            cmd_train(a, given, out, err)
        }
        Command::Eval(a) => cmd_eval(a, out),
        Command::Predict(a) => cmd_predict(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_data_error() {
                EXIT_DATA
            } else {
                EXIT_USAGE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_and_comments() {
        let p = parse_pairs("# run\nlr = 0.01 # fast\n\nepochs=3\n").unwrap();
        assert_eq!(p, vec![("lr".into(), "0.01".into()), ("epochs".into(), "3".into())]);
        assert!(parse_pairs("nonsense").is_err());
    }

    #[test]
    fn spec_text_roundtrip() {
        let mut spec = RunSpec::default();
        spec.apply_text("seed = 9\nmodel_seed = 4\ninput_size = 64\nbatch_size = 16\noptimizer = sgd").unwrap();
        assert_eq!((spec.train.seed, spec.model.seed), (9, 4));
        let mut back = RunSpec::default();
        back.apply_text(&spec.to_text()).unwrap();
        assert_eq!(back, spec);
        assert!(RunSpec::default().apply_text("bogus = 1").is_err());
    }
}

//! `mcpt`: synthesize corpora, compute discrepancy curves, pretrain,
//! fine-tune, evaluate and export artifacts.
//!
//! Exit codes: 0 success, 1 validation error (nothing written), 2 runtime
//! failure (output directories keep an `INCOMPLETE` marker).

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mcpt_core::encoder::{self, Sidecar};
use mcpt_core::eval::Protocol;
use mcpt_core::imaging::{self, ClassRecord, CorpusSpec, GcdSplit, Image, NoiseSpec};
use mcpt_core::{aft, pipeline, spectral, ParamStore, RunConfig};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "mcpt", version, about = "Spectrum-guided cross-modal prior transfer for SAR category discovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired corpus and classification corpus (PNGs + manifests).
    Synth(SynthArgs),
    /// Compute per-pair discrepancy curves and write them as CSV.
    Mdc(MdcArgs),
    /// Paired contrastive pretraining; writes checkpoints, logs, curves and token maps.
    Pretrain(PretrainArgs),
    /// Prototype fine-tuning on a classification corpus.
    Finetune(FinetuneArgs),
    /// Score a fine-tuned checkpoint; writes a report and embeddings.
    Eval(EvalArgs),
    /// Re-emit a stored artifact from a run directory.
    Export(ExportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; missing fields keep their lower-precedence values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed (config path `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config path, e.g. `--set loss.tau=0.1`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 40)]
    train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    test_per_class: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Canonical poses, per-class hues and noiseless SAR.
    #[arg(long)]
    separable: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MdcArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Pair manifest (`data.pairs`).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Ring count (`data.bands`).
    #[arg(long)]
    bands: Option<usize>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Epoch count for this stage.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Ablation configuration a–f (`ablation`).
    #[arg(long, value_name = "ROW")]
    ablation_row: Option<char>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Pair manifest (`data.pairs`).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Ring count (`data.bands`).
    #[arg(long)]
    bands: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Classification manifest (`data.classes`).
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Comma-separated old class ids (`data.old_classes`).
    #[arg(long, value_name = "IDS")]
    old_classes: Option<String>,
    /// Labeled share of each old class (`data.label_fraction`).
    #[arg(long)]
    label_fraction: Option<f64>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Stripped pretraining checkpoint; a random backbone is used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Prototype count (`data.num_classes`).
    #[arg(long)]
    num_classes: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Fine-tuned checkpoint (with prototypes).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Transductive)]
    protocol: ProtocolArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Transductive,
    Inductive,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Curves,
    Tokens,
    Embeddings,
}

impl What {
    fn file(self) -> &'static str {
        match self {
            What::Curves => "curves.csv",
            What::Tokens => "tokens.csv",
            What::Embeddings => "embeddings.csv",
        }
    }
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, value_enum)]
    what: What,
    /// Directory written by `pretrain` (curves, tokens) or `eval` (embeddings).
    #[arg(long)]
    run: PathBuf,
    /// Destination file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// failure classes

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn invalid(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Outcome<T> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }
    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn bad(msg: impl Into<String>) -> Failure {
    Failure::Invalid(anyhow!(msg.into()))
}

// ---------------------------------------------------------------------------
// config resolution

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn json_str(p: &Path) -> String {
    serde_json::to_string(&p.to_string_lossy()).expect("string serializes")
}

/// Layers: defaults (or a checkpoint's config) < `--config` file < flags.
fn resolve(args: &ConfigArgs, base: Option<(&str, Value)>, mut flags: Vec<(String, String)>) -> Outcome<RunConfig> {
    let (label, mut v) = match base {
        Some((label, v)) => (label.to_string(), v),
        None => ("defaults".to_string(), serde_json::to_value(RunConfig::default()).invalid()?),
    };
    eprintln!("config: base = {label}");
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display())).invalid()?;
        let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display())).invalid()?;
        eprintln!("config: file {} overrides base", path.display());
        merge(&mut v, file);
    }
    let cfg: RunConfig = serde_json::from_value(v).context("config does not match the schema").invalid()?;
    if let Some(seed) = args.seed {
        flags.push(("seed".into(), seed.to_string()));
    }
    for s in &args.set {
        let (k, val) = s.split_once('=').ok_or_else(|| bad(format!("--set expects PATH=VALUE, got `{s}`")))?;
        flags.push((k.trim().to_string(), val.trim().to_string()));
    }
    for (k, val) in &flags {
        eprintln!("config: flag {k} = {val}");
    }
    let cfg = cfg.with_overrides(&flags).invalid()?;
    eprintln!("config: resolved (flags > file > base)\n{}", cfg.to_json());
    Ok(cfg)
}

fn schedule_flags(stage: &str, s: &ScheduleArgs) -> Outcome<Vec<(String, String)>> {
    let mut f = Vec::new();
    if let Some(e) = s.epochs {
        f.push((format!("schedule.{stage}.epochs"), e.to_string()));
    }
    if let Some(b) = s.batch_size {
        f.push((format!("schedule.{stage}.batch_size"), b.to_string()));
    }
    if let Some(lr) = s.lr {
        f.push((format!("schedule.{stage}.lr"), lr.to_string()));
    }
    if let Some(row) = s.ablation_row {
        let a = mcpt_core::Ablation::row(row).invalid()?;
        f.push(("ablation".into(), serde_json::to_string(&a).invalid()?));
    }
    Ok(f)
}

fn split_flags(s: &SplitArgs) -> Outcome<Vec<(String, String)>> {
    let mut f = Vec::new();
    if let Some(p) = &s.classes {
        f.push(("data.classes".into(), json_str(p)));
    }
    if let Some(ids) = &s.old_classes {
        let parsed: Vec<usize> = ids
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("--old-classes expects comma-separated ids, got `{ids}`"))
            .invalid()?;
        f.push(("data.old_classes".into(), serde_json::to_string(&parsed).invalid()?));
    }
    if let Some(x) = s.label_fraction {
        f.push(("data.label_fraction".into(), x.to_string()));
    }
    Ok(f)
}

fn required<'a>(field: &'a Option<String>, what: &str) -> Outcome<&'a str> {
    field.as_deref().ok_or_else(|| bad(format!("no {what} given (flag or config)")))
}

fn load_split(cfg: &RunConfig) -> Outcome<(Vec<ClassRecord>, Vec<Image>, GcdSplit)> {
    let manifest = required(&cfg.data.classes, "classification manifest")?;
    let (records, images) = imaging::load_class_corpus(manifest).with_context(|| format!("loading {manifest}")).invalid()?;
    let old: BTreeSet<usize> = cfg.data.old_classes.iter().copied().collect();
    let split = imaging::make_splits(&records, &old, cfg.data.label_fraction, cfg.seed).invalid()?;
    eprintln!(
        "split: {} labeled, {} unlabeled, {} test; old {:?}, new {:?}",
        split.labeled.len(),
        split.unlabeled.len(),
        split.test.len(),
        split.old_classes,
        split.new_classes
    );
    Ok((records, images, split))
}

fn load_ckpt(path: &Path) -> Outcome<(ParamStore<f32>, Sidecar)> {
    if !path.is_file() {
        return Err(bad(format!("checkpoint {} does not exist", path.display())));
    }
    encoder::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display())).invalid()
}

// ---------------------------------------------------------------------------
// output handling

/// An output directory flagged `INCOMPLETE` until [`RunDir::finish`].
struct RunDir {
    dir: PathBuf,
}

impl RunDir {
    fn create(dir: &Path, cfg: &RunConfig) -> Outcome<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).runtime()?;
        let run = RunDir { dir: dir.to_path_buf() };
        fs::write(run.path("INCOMPLETE"), "run did not finish\n").runtime()?;
        fs::write(run.path("config.json"), cfg.to_json() + "\n").runtime()?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Outcome<()> {
        fs::write(self.path(name), bytes).with_context(|| format!("writing {name}")).runtime()
    }

    fn finish(self) -> Outcome<()> {
        fs::remove_file(self.path("INCOMPLETE")).runtime()
    }
}

/// Write `bytes` next to `path` and rename, so a failed write leaves no file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Outcome<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display())).runtime()?;
    fs::rename(&tmp, path).runtime()
}

fn jsonl<R: serde::Serialize>(records: &[R]) -> Outcome<Vec<u8>> {
    let mut buf = Vec::new();
    pipeline::write_jsonl(&mut buf, records).runtime()?;
    Ok(buf)
}

// ---------------------------------------------------------------------------
// commands

fn synth(a: &SynthArgs) -> Outcome<()> {
    let spec = if a.separable {
        CorpusSpec { classes: a.classes, pairs: a.pairs, train_per_class: a.train_per_class, test_per_class: a.test_per_class, size: a.size, ..CorpusSpec::separable() }
    } else {
        CorpusSpec {
            classes: a.classes,
            pairs: a.pairs,
            train_per_class: a.train_per_class,
            test_per_class: a.test_per_class,
            size: a.size,
            noise: NoiseSpec::default(),
            ..CorpusSpec::default()
        }
    };
    if spec.classes == 0 || spec.size < 4 {
        return Err(bad("synth needs at least one class and images of at least 4x4"));
    }
    eprintln!("corpus: seed {} {}", a.seed, serde_json::to_string(&spec).invalid()?);
    let (pairs, classes) = imaging::write_synthetic_corpus(&a.out, &spec, a.seed).runtime()?;
    println!("{}\n{}", pairs.display(), classes.display());
    Ok(())
}

fn mdc(a: &MdcArgs) -> Outcome<()> {
    let mut flags = Vec::new();
    if let Some(p) = &a.pairs {
        flags.push(("data.pairs".into(), json_str(p)));
    }
    if let Some(b) = a.bands {
        flags.push(("data.bands".into(), b.to_string()));
    }
    let cfg = resolve(&a.cfg, None, flags)?;
    let manifest = required(&cfg.data.pairs, "pair manifest")?;
    let pairs = imaging::load_pairs(manifest).with_context(|| format!("loading {manifest}")).invalid()?;
    if pairs.is_empty() {
        return Err(bad("pair manifest is empty"));
    }
    let curves = pipeline::pair_curves(&cfg, &pairs).runtime()?;
    let named: Vec<_> = pairs.iter().map(|p| p.pair_id.clone()).zip(curves).collect();
    let mut buf = Vec::new();
    spectral::write_curves_csv(&mut buf, &named).runtime()?;
    write_atomic(&a.out, &buf)?;
    eprintln!("wrote {} curves x {} bands to {}", named.len(), cfg.data.bands, a.out.display());
    Ok(())
}

/// Pairs for which token maps are stored.
const TOKEN_PAIRS: usize = 8;

fn pretrain(a: &PretrainArgs) -> Outcome<()> {
    let mut flags = schedule_flags("pretrain", &a.schedule)?;
    if let Some(p) = &a.pairs {
        flags.push(("data.pairs".into(), json_str(p)));
    }
    if let Some(b) = a.bands {
        flags.push(("data.bands".into(), b.to_string()));
    }
    let cfg = resolve(&a.cfg, None, flags)?;
    if !cfg.ablation.mcpt {
        return Err(bad("pretraining needs ablation.mcpt = true (row a has no pretraining stage)"));
    }
    let manifest = required(&cfg.data.pairs, "pair manifest")?;
    let pairs = imaging::load_pairs(manifest).with_context(|| format!("loading {manifest}")).invalid()?;
    if pairs.is_empty() {
        return Err(bad("pair manifest is empty"));
    }
    let run = RunDir::create(&a.out, &cfg)?;
    let curves = pipeline::pair_curves(&cfg, &pairs).runtime()?;
    let named: Vec<_> = pairs.iter().map(|p| p.pair_id.clone()).zip(curves.iter().cloned()).collect();
    let mut buf = Vec::new();
    spectral::write_curves_csv(&mut buf, &named).runtime()?;
    run.write("curves.csv", &buf)?;

    let out = pipeline::pretrain(&cfg, &pairs).runtime()?;
    run.write("pretrain_log.jsonl", &jsonl(&out.log)?)?;
    encoder::save_checkpoint(run.path("pretrain.ckpt"), &out.stripped, &out.sidecar).runtime()?;
    encoder::save_checkpoint(run.path("pretrain_full.ckpt"), &out.full, &out.sidecar).runtime()?;
    if cfg.ablation.refinement() == mcpt_core::Refinement::Experts {
        let n = pairs.len().min(TOKEN_PAIRS);
        let maps = pipeline::token_maps(&cfg, &out.full, &pairs[..n], &curves[..n], cfg.seed).runtime()?;
        let mut buf = Vec::new();
        aft::write_token_energy_csv(&mut buf, &maps).runtime()?;
        run.write("tokens.csv", &buf)?;
    }
    let (first, last) = (out.epoch_means.first(), out.epoch_means.last());
    eprintln!("pretrain: {} steps; epoch mean loss {first:?} -> {last:?}", out.log.len());
    run.finish()
}

const APPROXIMATION_NOTE: &str =
    "note: the fine-tuner is a self-contained prototype-based approximation of the ProtoGCD recipe, not a replication";

fn finetune(a: &FinetuneArgs) -> Outcome<()> {
    let mut flags = schedule_flags("finetune", &a.schedule)?;
    flags.extend(split_flags(&a.split)?);
    if let Some(k) = a.num_classes {
        flags.push(("data.num_classes".into(), k.to_string()));
    }
    let ckpt = a.checkpoint.as_deref().map(load_ckpt).transpose()?;
    let base = ckpt.as_ref().map(|(_, s)| ("checkpoint sidecar", s.config.clone()));
    let cfg = resolve(&a.cfg, base, flags)?;
    let init = match ckpt {
        Some((store, _)) => {
            if encoder::has_auxiliary(&store) {
                return Err(bad("checkpoint still holds AFT/FER tensors; pass the stripped pretrain.ckpt"));
            }
            store
        }
        None => {
            eprintln!("finetune: no --checkpoint, starting from a random backbone");
            pipeline::random_backbone(&cfg).invalid()?
        }
    };
    let (_, images, split) = load_split(&cfg)?;
    pipeline::class_count(&cfg, &split).invalid()?;
    eprintln!("{APPROXIMATION_NOTE}");
    let run = RunDir::create(&a.out, &cfg)?;
    let out = pipeline::finetune(&cfg, &init, &images, &split).runtime()?;
    run.write("finetune_log.jsonl", &jsonl(&out.log)?)?;
    encoder::save_checkpoint(run.path("finetune.ckpt"), &out.store, &out.sidecar).runtime()?;
    eprintln!("finetune: {} steps", out.log.len());
    run.finish()
}

fn eval(a: &EvalArgs) -> Outcome<()> {
    let (store, sidecar) = load_ckpt(&a.checkpoint)?;
    if !store.contains(encoder::PROTOTYPES) {
        return Err(bad("checkpoint has no prototypes; evaluate a fine-tuned checkpoint"));
    }
    let cfg = resolve(&a.cfg, Some(("checkpoint sidecar", sidecar.config)), split_flags(&a.split)?)?;
    let (records, images, split) = load_split(&cfg)?;
    let protocol = match a.protocol {
        ProtocolArg::Transductive => Protocol::Transductive,
        ProtocolArg::Inductive => Protocol::Inductive,
    };
    let pool = match protocol {
        Protocol::Transductive => &split.unlabeled,
        Protocol::Inductive => &split.test,
    };
    if pool.is_empty() {
        return Err(bad(format!("{protocol:?} evaluation needs a non-empty pool")));
    }
    eprintln!("{APPROXIMATION_NOTE}");
    let run = RunDir::create(&a.out, &cfg)?;
    let out = pipeline::evaluate(&store, &cfg, &records, &images, &split, protocol).runtime()?;
    let mut report = serde_json::to_vec_pretty(&out.report).runtime()?;
    report.push(b'\n');
    run.write("report.json", &report)?;
    let mut buf = Vec::new();
    mcpt_core::eval::write_embeddings_csv(&mut buf, &out.ids, &out.truth, &split.old_classes, &out.embeddings).runtime()?;
    run.write("embeddings.csv", &buf)?;
    let r = &out.report;
    println!("{protocol:?}: All {:.2}  Old {:.2}  New {:.2}  (intra {:.4}, inter {:.4}, ratio {:.4})", r.all, r.old, r.new, r.intra, r.inter, r.ratio);
    run.finish()
}

fn export(a: &ExportArgs) -> Outcome<()> {
    let src = a.run.join(a.what.file());
    if a.run.join("INCOMPLETE").exists() {
        return Err(bad(format!("{} is flagged INCOMPLETE", a.run.display())));
    }
    let bytes = fs::read(&src).with_context(|| format!("no stored artifact at {}", src.display())).invalid()?;
    match &a.out {
        Some(path) => write_atomic(path, &bytes),
        None => std::io::stdout().write_all(&bytes).runtime(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Mdc(a) => mdc(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("runtime failure: {e:#}");
            ExitCode::from(2)
        }
    }
}

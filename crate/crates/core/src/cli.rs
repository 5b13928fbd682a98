//! Command-line front end.
//!
//! Every command resolves its settings from `--config` files and `--set`
//! overrides, writes its outputs, and merges the resolved settings into a
//! `run.lock` next to them. Keys in the lock are prefixed with the command
//! and its primary output, `generate(out/synth.dsv).batch = 32`, so several
//! runs can share one output directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::classifier::{train_multilabel, TrainHyper, TrainedOn};
use crate::features::{ConditionSource, Embeddings, IdentityExtractor, PseudoConditionExtractor};
use crate::io::{
    read_audit, read_classifier, read_dataset, read_filter, write_audit, write_classifier, write_dataset,
    write_embeddings, write_filter, KvConfig,
};
use crate::metrics::{evaluate, EvalContext, EvalReport, Embedding};
use crate::pipeline::{
    cross_site_share, generate_dataset, site_specs, unconditional_baseline, CrossSiteConfig, CrossSiteReport,
    Pipeline, PipelineConfig, Site,
};
use crate::privacy::{calibrate_on_datasets, identity_attack, targets_from_real, targets_from_release, ThresholdObjective};
use crate::world::{build_world, sample_dataset, split_dataset, Dataset, Origin, Split, SplitOptions, WorldSpec};
use crate::{seed, Error, Result};

const WORLD_KEYS: &[&str] = &[
    "preset",
    "n_identities",
    "dim",
    "n_classes",
    "cluster_std",
    "identity_separation",
    "identity_radius",
    "predicate_offset",
    "identities_per_pattern",
    "single_label",
    "covariate_shift",
    "condition_dim",
    "seed",
];
const PIPELINE_KEYS: &[&str] = &[
    "batch",
    "guidance",
    "guidance_decrement",
    "guidance_floor",
    "max_rounds",
    "kernel_width",
    "conditioning",
    "steps",
    "sigma_min",
    "sigma_max",
    "rho",
    "solver",
];
const OTHER_KEYS: &[&str] = &[
    "epochs",
    "learning_rate",
    "train_frac",
    "val_frac",
    "test_frac",
    "allow_subject_overlap",
    "embedding",
    "objective",
    "extractor",
];

#[derive(Debug, Parser)]
#[command(name = "pso-forge", version, about = "Synthetic-release simulator on Gaussian-mixture worlds")]
pub struct Cli {
    /// Global seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Flat `key = value` files, applied in order.
    #[arg(long = "config", global = true, value_name = "FILE")]
    pub configs: Vec<PathBuf>,
    /// `key=value` overrides, applied after the config files.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a world and sample a split real dataset from it.
    MakeWorld(MakeWorldArgs),
    /// Fit the re-identification threshold on the val split, score on test.
    Calibrate(CalibrateArgs),
    /// Train a multi-label classifier.
    Train(TrainArgs),
    /// Generate a release from the train split of a real dataset.
    Generate(GenerateArgs),
    /// FID, IRS, downstream gap and (with a sidecar) the linkage audit.
    Evaluate(EvaluateArgs),
    /// Identity-linkage attack on a release.
    Audit(AuditArgs),
    /// Simulate several sites, release at each and pool the releases.
    CrossSite(CrossSiteArgs),
    /// Collect reports into result tables.
    Table(TableArgs),
}

#[derive(Debug, Args)]
pub struct MakeWorldArgs {
    /// Output directory; receives world.cfg and real.dsv.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from a named world (default, reference, adversarial).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 2900)]
    pub records: usize,
    /// At most one active class per identity.
    #[arg(long)]
    pub single_label: bool,
    /// Split by record instead of by identity.
    #[arg(long)]
    pub allow_subject_overlap: bool,
    /// Also write pseudo-condition embeddings to real.emb.
    #[arg(long)]
    pub embeddings: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// Real dataset with val and test splits.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `youden` or `fnr:<budget>`.
    #[arg(long)]
    pub objective: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = ["real", "synthetic", "combined"])]
    pub on: String,
    /// Real datasets; their val splits select the checkpoint and their train
    /// splits are the training data for `--on real`.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// Releases to train on for `--on synthetic` (one) or `combined` (any).
    #[arg(long)]
    pub synthetic: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// Real dataset; its train split is released.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long, required_unless_present = "unconditional")]
    pub clf: Option<PathBuf>,
    #[arg(long, required_unless_present = "unconditional")]
    pub filter: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, required_unless_present = "unconditional")]
    pub audit: Option<PathBuf>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    /// `pseudo_condition` or `classifier` (classifier logits as the condition).
    #[arg(long)]
    pub extractor: Option<String>,
    /// Plain unguided sampling without filtering or selection.
    #[arg(long)]
    pub unconditional: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// Real dataset with train, val and test splits.
    #[arg(long)]
    pub real: PathBuf,
    /// Release to evaluate. A real dataset contributes its train split.
    #[arg(long)]
    pub synth: PathBuf,
    /// Provenance sidecar; enables the linkage audit.
    #[arg(long)]
    pub audit: Option<PathBuf>,
    #[arg(long)]
    pub filter: Option<PathBuf>,
    /// Real-trained classifier to reuse instead of training one.
    #[arg(long)]
    pub clf: Option<PathBuf>,
    #[arg(long)]
    pub embedding: Option<String>,
    /// Report path, usually report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Release to attack. A real dataset is attacked with its own identities.
    #[arg(long)]
    pub released: PathBuf,
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub world: PathBuf,
    /// Provenance sidecar; defaults to the release path with extension `aud`.
    #[arg(long)]
    pub audit: Option<PathBuf>,
    #[arg(long)]
    pub filter: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrossSiteArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub sites: usize,
    /// Records per site before splitting.
    #[arg(long, default_value_t = 900)]
    pub records: usize,
    #[arg(long, default_value_t = 0.5)]
    pub shift: f64,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["report", "cross_site"])))]
pub struct TableArgs {
    /// `LABEL=report.json`, one row each (FID / IRS / gap table).
    #[arg(long)]
    pub report: Vec<String>,
    /// cross_site.json; emits the train-site × test-site grid and a pooled row.
    #[arg(long)]
    pub cross_site: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print one line to stderr: `error kind=<kind> code=<n> msg="<text>"`.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            eprintln!("error kind=usage code=2 msg={first:?}");
            return 2;
        }
    };
    match execute(&cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error kind={} code={code} msg={:?}", e.kind(), e.to_string());
            code
        }
    }
}

/// Runs a parsed command. `argv` is echoed into the lock file.
pub fn execute(cli: &Cli, argv: &[OsString]) -> Result<()> {
    let kv = resolve(cli)?;
    let command_line = argv
        .iter()
        .map(|a| {
            let s = a.to_string_lossy();
            if s.is_empty() || s.contains(char::is_whitespace) {
                format!("{s:?}")
            } else {
                s.into_owned()
            }
        })
        .collect::<Vec<_>>()
        .join(" ");
    let mut lock = Lock::new(&command_line, cli.seed);
    let dir = match &cli.command {
        Command::MakeWorld(a) => make_world(a, &kv, cli.seed, &mut lock)?,
        Command::Calibrate(a) => calibrate(a, &kv, cli.seed, &mut lock)?,
        Command::Train(a) => train(a, &kv, cli.seed, &mut lock)?,
        Command::Generate(a) => return generate(a, &kv, cli.seed, lock),
        Command::Evaluate(a) => evaluate_cmd(a, &kv, cli.seed, &mut lock)?,
        Command::Audit(a) => audit(a, &mut lock)?,
        Command::CrossSite(a) => cross_site(a, &kv, cli.seed, &mut lock)?,
        Command::Table(a) => table(a, &mut lock)?,
    };
    lock.write(&dir, &section(&cli.command))
}

/// Lock-file section of one run: the command and its primary output.
fn section(c: &Command) -> String {
    let (name, out) = match c {
        Command::MakeWorld(a) => ("make-world", &a.out),
        Command::Calibrate(a) => ("calibrate", &a.out),
        Command::Train(a) => ("train", &a.out),
        Command::Generate(a) => ("generate", &a.out),
        Command::Evaluate(a) => ("evaluate", &a.out),
        Command::Audit(a) => ("audit", &a.out),
        Command::CrossSite(a) => ("cross-site", &a.out),
        Command::Table(a) => ("table", &a.out),
    };
    format!("{name}({})", out.display())
}

/// Config files in order, then `--set` overrides. Unknown keys are errors.
fn resolve(cli: &Cli) -> Result<KvConfig> {
    let mut kv = KvConfig::default();
    for path in &cli.configs {
        kv.merge(&KvConfig::load(path)?);
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{o}` is not KEY=VALUE")))?;
        kv.set(k.trim(), v.trim());
    }
    for (k, _) in kv.iter() {
        if ![WORLD_KEYS, PIPELINE_KEYS, OTHER_KEYS].iter().any(|keys| keys.contains(&k)) {
            return Err(Error::config(format!("unknown config key `{k}`")));
        }
    }
    Ok(kv)
}

/// Resolved settings of one command, written into `run.lock`.
struct Lock {
    entries: KvConfig,
}

impl Lock {
    fn new(command_line: &str, seed: u64) -> Self {
        let mut entries = KvConfig::default();
        entries.set("command", command_line);
        entries.set("seed", seed);
        entries.set("version", env!("CARGO_PKG_VERSION"));
        Lock { entries }
    }

    fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.set(key, value);
    }

    fn path(&mut self, key: &str, p: &Path) {
        self.entries.set(key, p.display());
    }

    fn extend(&mut self, kv: &KvConfig) {
        self.entries.merge(kv);
    }

    /// Replaces this run's section of `dir/run.lock`.
    fn write(&self, dir: &Path, section: &str) -> Result<()> {
        let path = dir.join("run.lock");
        let prefix = format!("{section}.");
        let mut merged = KvConfig::default();
        if path.exists() {
            for (k, v) in KvConfig::load(&path)?.iter() {
                if !k.starts_with(&prefix) {
                    merged.set(k, v);
                }
            }
        }
        for (k, v) in self.entries.iter() {
            merged.set(&format!("{prefix}{k}"), v);
        }
        Ok(fs::write(path, merged.to_string())?)
    }
}

fn parent_dir(path: &Path) -> Result<PathBuf> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_world(path: &Path) -> Result<WorldSpec> {
    WorldSpec::from_config(&KvConfig::load(path)?)
}

fn hyper(kv: &KvConfig, seed: u64) -> Result<TrainHyper> {
    let mut h = TrainHyper {
        seed,
        ..TrainHyper::default()
    };
    if let Some(v) = kv.get("epochs")? {
        h.epochs = v;
    }
    if let Some(v) = kv.get("learning_rate")? {
        h.learning_rate = v;
    }
    Ok(h)
}

fn lock_hyper(lock: &mut Lock, h: &TrainHyper) {
    lock.set("epochs", h.epochs);
    lock.set("learning_rate", h.learning_rate);
}

fn require(ds: Dataset, what: &str) -> Result<Dataset> {
    if ds.is_empty() {
        return Err(Error::data(format!("no {what} records")));
    }
    Ok(ds)
}

fn make_world(a: &MakeWorldArgs, kv: &KvConfig, seed: u64, lock: &mut Lock) -> Result<PathBuf> {
    let mut world_kv = KvConfig::default();
    for (k, v) in kv.iter().filter(|(k, _)| WORLD_KEYS.contains(k)) {
        world_kv.set(k, v);
    }
    if let Some(p) = &a.preset {
        world_kv.set("preset", p);
    }
    if world_kv.get_str("seed").is_none() {
        world_kv.set("seed", seed);
    }
    let mut spec = WorldSpec::from_config(&world_kv)?;
    if a.single_label {
        spec.single_label = true;
    }
    let mut split = SplitOptions {
        seed: seed::derive(seed, "split", 0),
        allow_subject_overlap: a.allow_subject_overlap,
        ..SplitOptions::default()
    };
    if let Some(v) = kv.get("train_frac")? {
        split.train = v;
    }
    if let Some(v) = kv.get("val_frac")? {
        split.val = v;
    }
    if let Some(v) = kv.get("test_frac")? {
        split.test = v;
    }
    if let Some(v) = kv.get("allow_subject_overlap")? {
        split.allow_subject_overlap = v;
    }
    let world = build_world(&spec)?;
    let raw = sample_dataset(&world, a.records, seed::derive(seed, "records", 0))?;
    let real = split_dataset(&raw, &split)?;

    fs::create_dir_all(&a.out)?;
    let world_cfg = spec.to_config();
    fs::write(a.out.join("world.cfg"), world_cfg.to_string())?;
    write_dataset(&a.out.join("real.dsv"), &real)?;
    if a.embeddings {
        let ex = PseudoConditionExtractor::for_world(&spec)?;
        let emb = Embeddings::from_fn(&real, spec.condition_dim, |x| ex.extract(x).values);
        write_embeddings(&a.out.join("real.emb"), &emb)?;
    }
    lock.path("out", &a.out);
    lock.set("records", a.records);
    lock.set("train_frac", split.train);
    lock.set("val_frac", split.val);
    lock.set("test_frac", split.test);
    lock.set("allow_subject_overlap", split.allow_subject_overlap);
    lock.set("embeddings", a.embeddings);
    for (k, v) in world_cfg.iter() {
        lock.set(&format!("world.{k}"), v);
    }
    Ok(a.out.clone())
}

fn calibrate(a: &CalibrateArgs, kv: &KvConfig, seed: u64, lock: &mut Lock) -> Result<PathBuf> {
    let spec = load_world(&a.world)?;
    let real = read_dataset(&a.data)?;
    let objective: ThresholdObjective = match a.objective.as_deref().or(kv.get_str("objective")) {
        Some(s) => s.parse()?,
        None => ThresholdObjective::Youden,
    };
    let val = require(real.split(Split::Val), "val")?;
    let test = require(real.split(Split::Test), "test")?;
    let filter = calibrate_on_datasets(IdentityExtractor::for_world(&spec)?, &val, &test, objective, seed)?;
    let dir = parent_dir(&a.out)?;
    write_filter(&a.out, &filter)?;
    lock.path("world", &a.world);
    lock.path("data", &a.data);
    lock.path("out", &a.out);
    lock.set("objective", objective);
    Ok(dir)
}

fn train(a: &TrainArgs, kv: &KvConfig, seed: u64, lock: &mut Lock) -> Result<PathBuf> {
    let on: TrainedOn = a.on.parse()?;
    let reals = a.data.iter().map(|p| read_dataset(p)).collect::<Result<Vec<_>>>()?;
    let vals: Vec<Dataset> = reals.iter().map(|d| d.split(Split::Val)).collect();
    let val = require(Dataset::concat(&vals.iter().collect::<Vec<_>>())?, "val")?;
    let train_set = match on {
        TrainedOn::Real => {
            let trains: Vec<Dataset> = reals.iter().map(|d| d.split(Split::Train)).collect();
            Dataset::concat(&trains.iter().collect::<Vec<_>>())?
        }
        TrainedOn::Synthetic | TrainedOn::Combined => {
            if a.synthetic.is_empty() || (on == TrainedOn::Synthetic && a.synthetic.len() != 1) {
                return Err(Error::config(format!(
                    "--on {on} needs {} --synthetic file",
                    if on == TrainedOn::Synthetic { "exactly one" } else { "at least one" }
                )));
            }
            let synth = a.synthetic.iter().map(|p| read_dataset(p)).collect::<Result<Vec<_>>>()?;
            Dataset::concat(&synth.iter().collect::<Vec<_>>())?
        }
    };
    let h = hyper(kv, seed)?;
    let clf = train_multilabel(&require(train_set, "training")?, &val, &h, on)?;
    let dir = parent_dir(&a.out)?;
    write_classifier(&a.out, &clf)?;
    lock.set("on", on);
    lock.set("data", a.data.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","));
    lock.set("synthetic", a.synthetic.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","));
    lock.path("out", &a.out);
    lock_hyper(lock, &h);
    Ok(dir)
}

fn generate(a: &GenerateArgs, kv: &KvConfig, seed: u64, mut lock: Lock) -> Result<()> {
    let spec = load_world(&a.world)?;
    let world = build_world(&spec)?;
    let real = read_dataset(&a.train)?;
    let train_set = require(real.split(Split::Train), "train")?;
    let mut cfg = PipelineConfig::default();
    cfg.apply_config(kv)?;
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if let Some(g) = a.guidance {
        cfg.guidance.strength = g;
    }
    cfg.seed = seed;
    cfg.validate()?;
    let dir = parent_dir(&a.out)?;
    lock.path("world", &a.world);
    lock.path("train", &a.train);
    lock.path("out", &a.out);
    lock.set("unconditional", a.unconditional);

    if a.unconditional {
        let released = unconditional_baseline(&train_set, &world, &cfg.schedule, seed)?;
        write_dataset(&a.out, &released)?;
        let schedule = cfg.to_config();
        for key in ["steps", "sigma_min", "sigma_max", "rho", "solver"] {
            lock.set(key, schedule.get_str(key).unwrap_or_default());
        }
        return lock.write(&dir, &section_of_generate(a));
    }

    let (clf_path, filter_path, audit_path) = match (&a.clf, &a.filter, &a.audit) {
        (Some(c), Some(f), Some(p)) => (c, f, p),
        _ => return Err(Error::config("generate needs --clf, --filter and --audit")),
    };
    let clf = read_classifier(clf_path)?;
    let filter = read_filter(filter_path)?;
    let source: ConditionSource = match a.extractor.as_deref().or(kv.get_str("extractor")) {
        Some(s) => s.parse()?,
        None => ConditionSource::PseudoCondition,
    };
    let pipeline = Pipeline::new(&world, &clf, &filter, cfg.clone(), source)?;
    let generation = generate_dataset(&train_set, &pipeline)?;
    write_dataset(&a.out, &generation.released)?;
    write_audit(audit_path, &generation.audit_rows())?;
    lock.path("clf", clf_path);
    lock.path("filter", filter_path);
    lock.path("audit", audit_path);
    lock.set(
        "extractor",
        match source {
            ConditionSource::PseudoCondition => "pseudo_condition",
            ConditionSource::Classifier => "classifier",
        },
    );
    lock.extend(&cfg.to_config());
    lock.write(&dir, &section_of_generate(a))?;
    if generation.dropped.is_empty() {
        return Ok(());
    }
    let ids: Vec<String> = generation.dropped.iter().map(|d| d.source_record_id.to_string()).collect();
    Err(Error::UnsatisfiableRecords {
        dropped: generation.dropped.len(),
        total: train_set.len(),
        ids: ids.join(","),
    })
}

fn section_of_generate(a: &GenerateArgs) -> String {
    format!("generate({})", a.out.display())
}

fn evaluate_cmd(a: &EvaluateArgs, kv: &KvConfig, seed: u64, lock: &mut Lock) -> Result<PathBuf> {
    let spec = load_world(&a.world)?;
    let real = read_dataset(&a.real)?;
    let mut synth = read_dataset(&a.synth)?;
    if synth.origin == Origin::Real {
        synth = synth.split(Split::Train);
    }
    let clf = a.clf.as_deref().map(read_classifier).transpose()?;
    let rows = a.audit.as_deref().map(read_audit).transpose()?;
    let filter = a.filter.as_deref().map(read_filter).transpose()?;
    let embedding: Embedding = match a.embedding.as_deref().or(kv.get_str("embedding")) {
        Some(s) => s.parse()?,
        None => Embedding::default(),
    };
    let h = hyper(kv, seed)?;
    let report = evaluate(
        &real,
        &synth,
        &EvalContext {
            world: &spec,
            hyper: h,
            embedding,
            clf_real: clf.as_ref(),
            audit: rows.as_deref(),
            filter: filter.as_ref(),
        },
    )?;
    let dir = parent_dir(&a.out)?;
    fs::write(&a.out, report.to_json()? + "\n")?;
    lock.path("world", &a.world);
    lock.path("real", &a.real);
    lock.path("synth", &a.synth);
    for (key, p) in [("audit", &a.audit), ("filter", &a.filter), ("clf", &a.clf)] {
        if let Some(p) = p {
            lock.path(key, p);
        }
    }
    lock.set("embedding", embedding);
    lock_hyper(lock, &h);
    lock.path("out", &a.out);
    Ok(dir)
}

fn audit(a: &AuditArgs, lock: &mut Lock) -> Result<PathBuf> {
    let spec = load_world(&a.world)?;
    let real = read_dataset(&a.real)?;
    let released = read_dataset(&a.released)?;
    let train_set = require(real.split(Split::Train), "train")?;
    let ex = IdentityExtractor::for_world(&spec)?;
    let filter = a.filter.as_deref().map(read_filter).transpose()?;
    let n_ids = train_set.identities().len();
    let report = if released.origin == Origin::Real {
        let own = released.split(Split::Train);
        identity_attack(&targets_from_real(&own)?, &train_set, &ex, n_ids, filter.as_ref())?
    } else {
        let sidecar = a.audit.clone().unwrap_or_else(|| a.released.with_extension("aud"));
        let rows = read_audit(&sidecar)?;
        lock.path("audit", &sidecar);
        let targets = targets_from_release(&released, &rows, &train_set)?;
        identity_attack(&targets, &train_set, &ex, n_ids, filter.as_ref())?
    };
    let dir = parent_dir(&a.out)?;
    fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n")?;
    lock.path("released", &a.released);
    lock.path("real", &a.real);
    lock.path("world", &a.world);
    if let Some(f) = &a.filter {
        lock.path("filter", f);
    }
    lock.path("out", &a.out);
    Ok(dir)
}

fn cross_site(a: &CrossSiteArgs, kv: &KvConfig, seed: u64, lock: &mut Lock) -> Result<PathBuf> {
    if a.sites == 0 {
        return Err(Error::config("need at least one site"));
    }
    let mut world_kv = KvConfig::default();
    for (k, v) in kv.iter().filter(|(k, _)| WORLD_KEYS.contains(k)) {
        world_kv.set(k, v);
    }
    if world_kv.get_str("seed").is_none() {
        world_kv.set("seed", seed);
    }
    let base = WorldSpec::from_config(&world_kv)?;
    let split = SplitOptions {
        seed: seed::derive(seed, "split", 0),
        ..SplitOptions::default()
    };
    let sites = site_specs(&base, a.sites, a.shift)
        .iter()
        .enumerate()
        .map(|(i, s)| Site::simulate(&format!("site{}", i + 1), s, a.records, &split))
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = CrossSiteConfig {
        hyper: hyper(kv, seed)?,
        ..CrossSiteConfig::default()
    };
    cfg.pipeline.apply_config(kv)?;
    cfg.pipeline.seed = seed;
    if let Some(s) = kv.get_str("objective") {
        cfg.objective = s.parse()?;
    }
    if let Some(s) = kv.get_str("embedding") {
        cfg.embedding = s.parse()?;
    }
    let report = cross_site_share(&sites, &cfg)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("cross_site.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(a.out.join("grid.csv"), report.to_csv())?;
    lock.path("out", &a.out);
    lock.set("sites", a.sites);
    lock.set("records", a.records);
    lock.set("shift", a.shift);
    for (k, v) in base.to_config().iter() {
        lock.set(&format!("world.{k}"), v);
    }
    lock.extend(&cfg.pipeline.to_config());
    lock_hyper(lock, &cfg.hyper);
    lock.set("objective", cfg.objective);
    lock.set("embedding", cfg.embedding);
    Ok(a.out.clone())
}

fn table(a: &TableArgs, lock: &mut Lock) -> Result<PathBuf> {
    let csv = match &a.cross_site {
        Some(path) => {
            let report: CrossSiteReport = serde_json::from_str(&fs::read_to_string(path)?)?;
            lock.path("cross_site", path);
            cross_site_table(&report)
        }
        None => {
            let mut out = format!("{}\n", EvalReport::CSV_HEADER);
            for (i, spec) in a.report.iter().enumerate() {
                let (label, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("report `{spec}` is not LABEL=PATH")))?;
                if label.contains(',') {
                    return Err(Error::config(format!("label `{label}` contains a comma")));
                }
                let report: EvalReport = serde_json::from_str(&fs::read_to_string(path)?)?;
                out.push_str(&report.csv_row(label));
                out.push('\n');
                lock.set(&format!("report.{i}"), spec);
            }
            out
        }
    };
    let dir = parent_dir(&a.out)?;
    fs::write(&a.out, csv)?;
    lock.path("out", &a.out);
    Ok(dir)
}

/// Synthetic train-site × test-site grid plus the pooled ("DS") row.
pub fn cross_site_table(report: &CrossSiteReport) -> String {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut out = format!("train,{},mean\n", report.sites.join(","));
    let mut row = |label: &str, vals: &[f64]| {
        let cells: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&format!("{label},{},{:.6}\n", cells.join(","), mean(vals)));
    };
    for (name, vals) in report.sites.iter().zip(&report.synthetic) {
        row(name, vals);
    }
    row("DS", &report.combined);
    out
}

//! Command-line front end: `synth`, `train`, `eval` and `ablate`.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::synth::{synth_generate, SynthConfig};
use crate::data::{
    chronological_split, fit_transform_numerical, load_dataset_config, save_csv, Boundary, Dataset,
    DatasetConfig, DatasetSplit, Granularity, SplitBoundaries, SplitViews,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, relative_change, MetricReport, PopRec};
use crate::model::{
    check_config, load_checkpoint, make_variant, AblationFlags, AnDaConfig, AnDaModel, Variant,
};
use crate::train::{encode_train_set, train, TrainConfig, TrainOptions};

#[derive(Debug, Parser)]
#[command(
    name = "anda",
    version,
    about = "Attribute-aware next-basket recommender"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Run configuration (JSON). See the README for the schema; every field
    /// except `dataset` has a default.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the `seed` field of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Poprec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Validation,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted patterns.
    Synth(Common),
    /// Train one model and keep the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Ablation variant: Full, P, B, B-, T or I.
        #[arg(long, default_value = "Full")]
        variant: Variant,
        /// Continue from a `last.ckpt` written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test (or validation) split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Add a baseline row.
        #[arg(long)]
        baseline: Option<Baseline>,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        /// Score every basket in the split instead of only the last one.
        #[arg(long)]
        all_steps: bool,
    },
    /// Train and test every variant over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Restrict to these variants (repeatable).
        #[arg(long)]
        variant: Vec<Variant>,
        #[arg(long)]
        baseline: Option<Baseline>,
    },
}

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSection {
    /// A dataset config describing CSV files. Relative paths resolve against
    /// the run config's directory.
    Path(PathBuf),
    /// Generated on the fly. The last step is the test range, the one
    /// before it validation, the rest training.
    Synth(SynthConfig),
}

fn d_embed() -> usize {
    16
}
fn d_len() -> usize {
    30
}
fn d_period() -> usize {
    7
}
fn d_heads() -> Vec<usize> {
    vec![1]
}
fn yes() -> bool {
    true
}

/// Model hyperparameters; vocabulary sizes come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_embed")]
    pub embed_dim: usize,
    #[serde(default = "d_len")]
    pub max_len: usize,
    #[serde(default = "d_period")]
    pub period: usize,
    /// Item slots per step; defaults to the largest training basket.
    #[serde(default)]
    pub vmax: Option<usize>,
    #[serde(default = "d_heads")]
    pub time_heads: Vec<usize>,
    #[serde(default = "d_heads")]
    pub intra_heads: Vec<usize>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub flags: AblationFlags,
    #[serde(default = "yes")]
    pub time_aware_padding: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

fn d_ks() -> Vec<usize> {
    vec![5, 10]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_ks")]
    pub ks: Vec<usize>,
    /// Variants trained by `ablate`; all six when empty.
    #[serde(default)]
    pub variants: Vec<Variant>,
    /// Seeds used by `ablate`; the run seed when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        if let DatasetSection::Path(p) = &mut cfg.dataset {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Loaded, split and normalised data.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: DatasetSplit,
    pub views: SplitViews,
}

const SYNTH_EPOCH: (i32, u32, u32) = (2020, 1, 1);

fn synth_epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(SYNTH_EPOCH.0, SYNTH_EPOCH.1, SYNTH_EPOCH.2).expect("valid date")
}

/// Train `[0, n-2)`, validation `[n-2, n-1)`, test `[n-1, n)`.
pub fn synth_split(num_steps: usize) -> Result<DatasetSplit> {
    let n = num_steps as i64;
    if n < 3 {
        return Err(Error::contract(
            "synthetic data needs at least 3 steps to split",
        ));
    }
    DatasetSplit::contiguous(0, n - 2, n - 1, n)
}

pub fn prepare(section: &DatasetSection, seed: u64, all_steps: bool) -> Result<Prepared> {
    let (dataset, split) = match section {
        DatasetSection::Path(p) => {
            let files = load_dataset_config(p)?;
            (files.dataset, files.split)
        }
        DatasetSection::Synth(cfg) => {
            let (d, _) = synth_generate(cfg, seed)?;
            (d, synth_split(cfg.num_steps)?)
        }
    };
    let dataset = if dataset.schema.num_numerical() > 0 {
        fit_transform_numerical(&dataset, &split)?.0
    } else {
        dataset
    };
    let views = chronological_split(&dataset, &split, all_steps);
    Ok(Prepared {
        dataset,
        split,
        views,
    })
}

/// Resolves the model section against the dataset's vocabularies.
pub fn model_config(section: &ModelSection, prepared: &Prepared) -> AnDaConfig {
    let schema = &prepared.dataset.schema;
    AnDaConfig {
        num_items: prepared.dataset.num_items,
        embed_dim: section.embed_dim,
        max_len: section.max_len,
        period: section.period,
        vmax: section
            .vmax
            .unwrap_or_else(|| Dataset::max_basket_size(&prepared.views.train).max(1)),
        num_cat_values: schema.num_categorical_values(),
        num_cat_attrs: schema.num_categorical_attrs(),
        num_numerical: schema.num_numerical(),
        time_heads: section.time_heads.clone(),
        intra_heads: section.intra_heads.clone(),
        dropout: section.dropout,
        flags: section.flags,
        time_aware_padding: section.time_aware_padding,
    }
}

/// Failure classes mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum CliError {
    Usage(Error),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => e,
        }
    }
}

trait Classify<T> {
    fn usage(self) -> std::result::Result<T, CliError>;
    fn runtime(self) -> std::result::Result<T, CliError>;
}

impl<T> Classify<T> for Result<T> {
    fn usage(self) -> std::result::Result<T, CliError> {
        self.map_err(CliError::Usage)
    }
    fn runtime(self) -> std::result::Result<T, CliError> {
        self.map_err(CliError::Runtime)
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !force {
            return Err(Error::contract(format!(
                "output directory {} exists; pass --force to overwrite",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
    crc32: u32,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: serde_json::Value,
    files: Vec<ManifestEntry>,
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<ManifestEntry>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != "manifest.json") {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            out.push(ManifestEntry {
                path: p.strip_prefix(root).unwrap_or(&p).display().to_string(),
                bytes: bytes.len() as u64,
                crc32: crc32fast::hash(&bytes),
            });
        }
    }
    Ok(())
}

fn write_manifest(out: &Path, command: &str, seed: u64, config: &impl Serialize) -> Result<()> {
    let mut files = vec![];
    list_files(out, out, &mut files)?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config: serde_json::to_value(config)?,
        files,
    };
    write_json(&out.join("manifest.json"), &manifest)
}

fn load_run(common: &Common) -> CliResult<(RunConfig, u64)> {
    let cfg = RunConfig::load(&common.config).usage()?;
    let seed = common.seed.unwrap_or(cfg.seed);
    Ok((cfg, seed))
}

fn cmd_synth(common: &Common) -> CliResult {
    let (cfg, seed) = load_run(common)?;
    let DatasetSection::Synth(synth) = &cfg.dataset else {
        return Err(CliError::Usage(Error::contract(
            "synth needs a `dataset.synth` section",
        )));
    };
    synth.validate().usage()?;
    let split = synth_split(synth.num_steps).usage()?;
    prepare_out(&common.out, common.force).usage()?;
    let (dataset, meta) = synth_generate(synth, seed).runtime()?;
    let epoch = synth_epoch();
    let (inter, attrs) = save_csv(&dataset, &common.out, epoch, Granularity::Day).runtime()?;
    let name = |p: &Path| PathBuf::from(p.file_name().expect("file path"));
    let pair = |r: crate::data::TimeRange| [Boundary::Index(r.start), Boundary::Index(r.end)];
    let dataset_cfg = DatasetConfig {
        catalog_size: dataset.num_items,
        schema: dataset.schema.clone(),
        granularity: Granularity::Day,
        epoch: Some(epoch.to_string()),
        interactions: name(&inter),
        attributes: attrs.as_deref().map(name),
        split: SplitBoundaries {
            train: pair(split.train),
            validation: pair(split.validation),
            test: pair(split.test),
        },
    };
    write_json(&common.out.join("dataset.json"), &dataset_cfg).runtime()?;
    write_json(&common.out.join("synth_metadata.json"), &meta).runtime()?;
    info!(
        "wrote {} users, {} baskets to {}",
        dataset.users.len(),
        dataset.users.iter().map(|u| u.baskets.len()).sum::<usize>(),
        common.out.display()
    );
    write_manifest(&common.out, "synth", seed, &cfg).runtime()
}

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    run: &'a RunConfig,
    seed: u64,
    variant: Variant,
    model: &'a AnDaConfig,
}

fn cmd_train(common: &Common, variant: Variant, resume: Option<&Path>) -> CliResult {
    let (cfg, seed) = load_run(common)?;
    cfg.train.validate().usage()?;
    let prepared = prepare(&cfg.dataset, seed, false).usage()?;
    let model_cfg = make_variant(&model_config(&cfg.model, &prepared), variant);
    model_cfg.validate().usage()?;
    let resume = resume.map(load_checkpoint).transpose().usage()?;
    if let Some(ckpt) = &resume {
        check_config(&ckpt.config, &model_cfg).usage()?;
    }
    if resume.is_none() || !common.out.exists() {
        prepare_out(&common.out, common.force).usage()?;
    }
    let resolved = ResolvedTrain {
        run: &cfg,
        seed,
        variant,
        model: &model_cfg,
    };
    info!(
        "resolved config: {}",
        serde_json::to_string(&resolved).unwrap_or_default()
    );
    write_json(&common.out.join("resolved_config.json"), &resolved).runtime()?;

    let model = AnDaModel::new(model_cfg.clone(), seed).usage()?;
    info!("{} parameters", model.params.num_scalars());
    let train_set = encode_train_set(&prepared.views.train, &model).usage()?;
    let outcome = train(
        model,
        &train_set,
        &prepared.views.validation,
        &cfg.train,
        seed,
        TrainOptions {
            out_dir: Some(common.out.clone()),
            resume,
        },
    )
    .runtime()?;
    info!(
        "finished after {} epochs; best epoch {:?}, validation HR@{} {:?}",
        outcome.epochs_run, outcome.best_epoch, cfg.train.eval_k, outcome.best_metric
    );
    write_manifest(&common.out, "train", seed, &resolved).runtime()
}

fn print_report(label: &str, report: &MetricReport) {
    let cells: Vec<String> = report
        .summary()
        .iter()
        .filter(|(k, _)| k.as_str() != "num_users")
        .map(|(k, v)| format!("{k} {v:.4}"))
        .collect();
    println!(
        "{label:<8} users {:>6}  {}",
        report.num_users(),
        cells.join("  ")
    );
}

fn cmd_eval(
    common: &Common,
    checkpoint: &Path,
    baseline: Option<Baseline>,
    split: EvalSplit,
    all_steps: bool,
) -> CliResult {
    let (cfg, seed) = load_run(common)?;
    let prepared = prepare(&cfg.dataset, seed, all_steps).usage()?;
    let ckpt = load_checkpoint(checkpoint).usage()?;
    let expected = model_config(&cfg.model, &prepared);
    // The variant's flags come from the checkpoint; everything else must agree.
    let expected = AnDaConfig {
        flags: ckpt.config.flags,
        vmax: if cfg.model.vmax.is_none() {
            ckpt.config.vmax
        } else {
            expected.vmax
        },
        ..expected
    };
    check_config(&ckpt.config, &expected).usage()?;
    let model = AnDaModel::from_checkpoint(&ckpt).usage()?;
    prepare_out(&common.out, common.force).usage()?;
    let instances = match split {
        EvalSplit::Test => &prepared.views.test,
        EvalSplit::Validation => &prepared.views.validation,
    };
    if instances.is_empty() {
        return Err(CliError::Usage(Error::contract(
            "no evaluable users in the chosen split",
        )));
    }
    let report =
        evaluate_model(&model, instances, &cfg.eval.ks, cfg.train.eval_batch_size).runtime()?;
    print_report("AnDa", &report);
    let mut rows = serde_json::Map::new();
    rows.insert(
        "anda".into(),
        serde_json::to_value(report.summary())
            .map_err(Error::from)
            .runtime()?,
    );
    report
        .write_per_user_csv(&common.out.join("per_user.csv"))
        .runtime()?;
    if baseline == Some(Baseline::Poprec) {
        let pop = PopRec::fit(&prepared.views.train, prepared.dataset.num_items);
        let r = pop.evaluate(instances, &cfg.eval.ks).runtime()?;
        print_report("PopRec", &r);
        rows.insert(
            "poprec".into(),
            serde_json::to_value(r.summary())
                .map_err(Error::from)
                .runtime()?,
        );
    }
    write_json(&common.out.join("metrics.json"), &rows).runtime()?;
    write_manifest(&common.out, "eval", seed, &cfg).runtime()
}

/// One trained-and-tested variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub metrics: std::collections::BTreeMap<String, f64>,
}

/// Per-variant mean and relative change against Full.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub mean: std::collections::BTreeMap<String, f64>,
    /// `(variant − Full) / Full` per metric; empty without a Full row.
    pub delta: std::collections::BTreeMap<String, f64>,
}

pub fn ablation_table(runs: &[AblationRun]) -> Vec<AblationRow> {
    let mut names: Vec<&str> = vec![];
    for r in runs {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    let mut rows: Vec<AblationRow> = names
        .iter()
        .map(|&name| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == name).collect();
            let mut mean = std::collections::BTreeMap::new();
            for key in mine[0].metrics.keys() {
                let s: f64 = mine.iter().map(|r| r.metrics[key]).sum();
                mean.insert(key.clone(), s / mine.len() as f64);
            }
            AblationRow {
                variant: name.to_string(),
                seeds: mine.iter().map(|r| r.seed).collect(),
                mean,
                delta: Default::default(),
            }
        })
        .collect();
    if let Some(full) = rows
        .iter()
        .find(|r| r.variant == Variant::Full.tag())
        .map(|r| r.mean.clone())
    {
        for row in &mut rows {
            row.delta = row
                .mean
                .iter()
                .filter(|(k, _)| k.as_str() != "num_users")
                .map(|(k, &v)| (k.clone(), relative_change(v, full[k])))
                .collect();
        }
    }
    rows
}

/// Trains `variant` with `seed` and tests its best checkpoint.
pub fn run_variant(
    cfg: &RunConfig,
    prepared: &Prepared,
    variant: Variant,
    seed: u64,
    out_dir: Option<PathBuf>,
) -> Result<(AblationRun, MetricReport)> {
    let model_cfg = make_variant(&model_config(&cfg.model, prepared), variant);
    let model = AnDaModel::new(model_cfg, seed)?;
    let train_set = encode_train_set(&prepared.views.train, &model)?;
    let outcome = train(
        model,
        &train_set,
        &prepared.views.validation,
        &cfg.train,
        seed,
        TrainOptions {
            out_dir,
            resume: None,
        },
    )?;
    let report = evaluate_model(
        &outcome.best,
        &prepared.views.test,
        &cfg.eval.ks,
        cfg.train.eval_batch_size,
    )?;
    Ok((
        AblationRun {
            variant: variant.tag().to_string(),
            seed,
            epochs: outcome.epochs_run,
            metrics: report.summary(),
        },
        report,
    ))
}

fn cmd_ablate(common: &Common, variants: &[Variant], baseline: Option<Baseline>) -> CliResult {
    let (cfg, seed) = load_run(common)?;
    cfg.train.validate().usage()?;
    let variants: Vec<Variant> = if !variants.is_empty() {
        variants.to_vec()
    } else if !cfg.eval.variants.is_empty() {
        cfg.eval.variants.clone()
    } else {
        Variant::ALL.to_vec()
    };
    let seeds = if cfg.eval.seeds.is_empty() || common.seed.is_some() {
        vec![seed]
    } else {
        cfg.eval.seeds.clone()
    };
    prepare_out(&common.out, common.force).usage()?;
    let mut runs = vec![];
    let mut pop_runs = vec![];
    for &s in &seeds {
        let prepared = prepare(&cfg.dataset, s, false).usage()?;
        if prepared.views.test.is_empty() {
            return Err(CliError::Usage(Error::contract(
                "no evaluable users in the test split",
            )));
        }
        if baseline == Some(Baseline::Poprec) {
            let pop = PopRec::fit(&prepared.views.train, prepared.dataset.num_items);
            let r = pop.evaluate(&prepared.views.test, &cfg.eval.ks).runtime()?;
            pop_runs.push(AblationRun {
                variant: "PopRec".into(),
                seed: s,
                epochs: 0,
                metrics: r.summary(),
            });
        }
        for &v in &variants {
            let dir = common.out.join(format!("{}-seed{s}", v.tag()));
            match run_variant(&cfg, &prepared, v, s, Some(dir)) {
                Ok((run, report)) => {
                    print_report(&format!("{v}/{s}"), &report);
                    runs.push(run);
                    write_json(&common.out.join("runs.json"), &runs).runtime()?;
                }
                Err(e) => {
                    warn!("variant {v} with seed {s} failed; partial results are in runs.json");
                    return Err(CliError::Runtime(e));
                }
            }
        }
    }
    runs.extend(pop_runs);
    write_json(&common.out.join("runs.json"), &runs).runtime()?;
    let table = ablation_table(&runs);
    println!(
        "{:<8} {:>10} {:>10} {:>10} {:>10}",
        "variant", "HR@5", "NDCG@5", "MAP", "ΔHR@5"
    );
    for row in &table {
        let get = |m: &std::collections::BTreeMap<String, f64>, k: &str| {
            m.get(k).copied().unwrap_or(f64::NAN)
        };
        println!(
            "{:<8} {:>10.4} {:>10.4} {:>10.4} {:>+9.2}%  seeds {:?}",
            row.variant,
            get(&row.mean, "hr@5"),
            get(&row.mean, "ndcg@5"),
            get(&row.mean, "map"),
            100.0 * get(&row.delta, "hr@5"),
            row.seeds
        );
    }
    write_json(&common.out.join("ablation.json"), &table).runtime()?;
    write_manifest(&common.out, "ablate", seed, &cfg).runtime()
}

pub fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Synth(c) => cmd_synth(c),
        Command::Train {
            common,
            variant,
            resume,
        } => cmd_train(common, *variant, resume.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            baseline,
            split,
            all_steps,
        } => cmd_eval(common, checkpoint, *baseline, *split, *all_steps),
        Command::Ablate {
            common,
            variant,
            baseline,
        } => cmd_ablate(common, variant, *baseline),
    }
}

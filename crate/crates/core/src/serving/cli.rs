//! The `sscbm` command line. Every stage reads an optional TOML config and
//! applies flag overrides on top.
//!
//! Config layout: top-level keys are [`TrainConfig`] fields; the optional
//! tables `[data]`, `[split]`, `[sweep]` and `[intervention]` configure the
//! other stages.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use super::{router, ServerConfig, ServerState, SharedState};
use crate::alignment::{concept_heatmaps, export_saliency, render_saliency};
use crate::dataset::{
    generate_synthetic, load_dataset, load_regions, train_test_split, Dataset, SemiSplit, SplitManifest, SplitMode,
    SplitSpec, SyntheticSpec, SPLIT_FILE,
};
use crate::encoder::{load_checkpoint, save_checkpoint, Model, Variant};
use crate::error::{Error, IoContext, Result};
use crate::pseudolabel::{
    pseudo_label_from_features, pseudo_label_split, read_feature_file, read_pseudo_labels, write_pseudo_labels,
    PseudoLabel, PSEUDO_LABELS_FILE,
};
use crate::training::{
    ablation_study, evaluate, intervention_sweep, ratio_range, saliency_localization, sweep_label_ratios, train,
    write_ablation_csv, write_intervention_csv, write_sweep_csv, Ablation, InterventionMode, SelectionOrder,
    TrainConfig, ABLATION_FILE, HISTORY_FILE, INTERVENTION_FILE,
};

const METRICS_FILE: &str = "metrics.json";
const LOCALIZATION_FILE: &str = "localization.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub ratio: Option<f64>,
    pub per_class: Option<usize>,
    pub test_fraction: f64,
    pub seed: u64,
    pub strict_unsupervised: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            ratio: None,
            per_class: None,
            test_fraction: 0.2,
            seed: 0,
            strict_unsupervised: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub ratios: Vec<f64>,
    pub per_class: Vec<usize>,
    pub variants: Vec<Variant>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ratios: vec![0.05, 0.1, 0.2],
            per_class: Vec::new(),
            variants: vec![Variant::Sscbm, Variant::CemSsl, Variant::CbmSsl],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionSection {
    pub ratios: String,
    pub mode: InterventionMode,
    pub random_order_seed: Option<u64>,
}

impl Default for InterventionSection {
    fn default() -> Self {
        Self {
            ratios: "0.0:1.0:0.1".into(),
            mode: InterventionMode::Individual,
            random_order_seed: None,
        }
    }
}

/// A parsed config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub split: SplitSection,
    pub sweep: SweepSection,
    pub intervention: InterventionSection,
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |e: toml::de::Error| Error::Config(e.message().to_string());
        let mut table: toml::Table = text.parse().map_err(bad)?;
        fn section<T: for<'de> Deserialize<'de> + Default>(table: &mut toml::Table, name: &str) -> Result<T> {
            match table.remove(name) {
                None => Ok(T::default()),
                Some(v) => v
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::Config(format!("[{name}]: {}", e.message()))),
            }
        }
        let data = section(&mut table, "data")?;
        let split = section(&mut table, "split")?;
        let sweep = section(&mut table, "sweep")?;
        let intervention = section(&mut table, "intervention")?;
        let train: TrainConfig = toml::Value::Table(table).try_into().map_err(bad)?;
        train.validate()?;
        Ok(Self {
            train,
            data,
            split,
            sweep,
            intervention,
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).at(p)?;
                Self::parse(&text).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("{}: {msg}", p.display())),
                    other => other,
                })
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sscbm", version, about = "Semi-supervised concept bottleneck model workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Hold out a test set and split the rest into labeled / unlabeled.
    Split(SplitArgs),
    /// Assign KNN pseudo concept labels to the unlabeled examples.
    PseudoLabel(PseudoLabelArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train the full model and its ablations on one split.
    Ablate(AblateArgs),
    /// Train every variant across labeled-data settings.
    Sweep(SweepArgs),
    /// Task accuracy as a growing share of concepts is set to ground truth.
    InterveneSweep(InterveneSweepArgs),
    /// Write saliency maps for the test split.
    ExportSaliency(ExportSaliencyArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Split file; defaults to `<data>/split.json`.
    #[arg(long)]
    split: Option<PathBuf>,
}

impl DataArgs {
    fn split_path(&self) -> PathBuf {
        self.split.clone().unwrap_or_else(|| self.data.join(SPLIT_FILE))
    }

    /// Dataset, train partition and test set.
    fn load(&self) -> Result<(Dataset, SemiSplit, Dataset)> {
        let dataset = load_dataset(&self.data)?;
        let manifest = SplitManifest::load(&self.split_path())?;
        let (split, test) = manifest.materialize(&dataset)?;
        Ok((dataset, split, test))
    }
}

#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    k_nn: Option<usize>,
    #[arg(long, value_parser = parse_from_str::<Variant>)]
    variant: Option<Variant>,
    #[arg(long, value_parser = parse_from_str::<Ablation>)]
    ablation: Option<Ablation>,
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl TrainOverrides {
    fn apply(&self, mut c: TrainConfig) -> Result<TrainConfig> {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(seed, epochs, lr, batch_size, lambda1, lambda2, tau, beta, k_nn, variant, ablation);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_examples: Option<usize>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to `<data>/split.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Labeled fraction of the training part.
    #[arg(long, conflicts_with = "per_class")]
    ratio: Option<f64>,
    /// Labeled examples per class.
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Withhold class labels of unlabeled examples too.
    #[arg(long)]
    strict_unsupervised: bool,
}

#[derive(Debug, Args)]
struct PseudoLabelArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Defaults to `<data>/pseudo_labels.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Precomputed reference features (JSONL `{"id", "vec"}`) instead of the
    /// built-in frozen encoder.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    k_nn: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Defaults to `<data>/pseudo_labels.jsonl`.
    #[arg(long)]
    pseudo: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Evaluate on the test split after every epoch.
    #[arg(long)]
    eval_each_epoch: bool,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to `<checkpoint>/metrics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    pseudo: Option<PathBuf>,
    /// Output directory for `ablation.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated training seeds; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated labeled ratios.
    #[arg(long, value_delimiter = ',')]
    ratios: Vec<f64>,
    /// Comma-separated per-class label counts.
    #[arg(long, value_delimiter = ',')]
    per_class: Vec<usize>,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',', value_parser = parse_from_str::<Variant>)]
    variants: Vec<Variant>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Individual,
    Group,
}

#[derive(Debug, Args)]
struct InterveneSweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `start:end:step`, inclusive.
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Pick concepts in a seeded random order instead of most-erroneous
    /// first.
    #[arg(long)]
    random_order_seed: Option<u64>,
    /// Defaults to `<checkpoint>/intervention.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportSaliencyArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to `<checkpoint>/saliency`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write PNG renders.
    #[arg(long)]
    png: bool,
    /// Export at most this many test examples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Overridden by `SSCBM_CHECKPOINT_DIR`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Exported saliency tree.
    #[arg(long)]
    saliency: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Seconds between checks for a new checkpoint; 0 disables reloading.
    #[arg(long, default_value_t = 2)]
    reload_interval: u64,
}

/// Parse `args` (including the program name) and run. Returns the process
/// exit code: 0 on success, 2 on usage errors, 1 on any other failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            1
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Split(a) => split(a),
        Command::PseudoLabel(a) => pseudo_label(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep(a) => sweep(a),
        Command::InterveneSweep(a) => intervene_sweep(a),
        Command::ExportSaliency(a) => export(a),
        Command::Serve(a) => serve(a),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?).at(path)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec = CliConfig::load(a.common.config.as_deref())?.data;
    if let Some(v) = a.n_examples {
        spec.n_examples = v;
    }
    if let Some(v) = a.n_classes {
        spec.n_classes = v;
    }
    if let Some(v) = a.image_size {
        spec.image_size = v;
    }
    if let Some(v) = a.noise_std {
        spec.noise_std = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    let synth = generate_synthetic(&spec)?;
    synth.save(&a.out)?;
    log::info!("wrote {} examples to {}", synth.dataset.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let mut s = CliConfig::load(a.common.config.as_deref())?.split;
    if let Some(v) = a.ratio {
        s.ratio = Some(v);
        s.per_class = None;
    }
    if let Some(v) = a.per_class {
        s.per_class = Some(v);
        s.ratio = None;
    }
    if let Some(v) = a.test_fraction {
        s.test_fraction = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    s.strict_unsupervised |= a.strict_unsupervised;
    let mode = match (s.ratio, s.per_class) {
        (Some(_), Some(_)) => return Err(Error::Config("[split] sets both ratio and per_class".into())),
        (Some(r), None) => SplitMode::Ratio(r),
        (None, Some(k)) => SplitMode::PerClassK(k),
        (None, None) => SplitMode::Ratio(0.1),
    };
    let spec = SplitSpec {
        mode,
        seed: s.seed,
        strict_unsupervised: s.strict_unsupervised,
    };
    let dataset = load_dataset(&a.data)?;
    let manifest = SplitManifest::build(&dataset, s.test_fraction, &spec)?;
    let out = a.out.unwrap_or_else(|| a.data.join(SPLIT_FILE));
    manifest.save(&out)?;
    print_json(&serde_json::json!({
        "test": manifest.test.len(),
        "labeled": manifest.labeled.len(),
        "unlabeled": manifest.unlabeled.len(),
    }))
}

fn pseudo_label(a: PseudoLabelArgs) -> Result<()> {
    let mut cfg = CliConfig::load(a.common.config.as_deref())?.train;
    if let Some(v) = a.k_nn {
        cfg.k_nn = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let (dataset, split, _) = a.data.load()?;
    let labels = match &a.features {
        Some(path) => pseudo_label_from_features(&read_feature_file(path)?, &split, cfg.k_nn)?,
        None => {
            let shape = dataset
                .input_shape()
                .ok_or_else(|| Error::Config("empty dataset".into()))?;
            let encoder = cfg.reference_encoder(shape, dataset.schema.k, dataset.n_classes)?;
            pseudo_label_split(&encoder, &split, cfg.k_nn)?
        }
    };
    let out = a.out.unwrap_or_else(|| a.data.data.join(PSEUDO_LABELS_FILE));
    write_pseudo_labels(&out, &labels)?;
    print_json(&serde_json::json!({ "pseudo_labels": labels.len(), "path": out }))
}

fn load_pseudo(data: &DataArgs, given: Option<&Path>) -> Result<BTreeMap<String, PseudoLabel>> {
    read_pseudo_labels(&given.map_or_else(|| data.data.join(PSEUDO_LABELS_FILE), Path::to_path_buf))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.overrides.apply(CliConfig::load(a.common.config.as_deref())?.train)?;
    let (dataset, split, test) = a.data.load()?;
    let pseudo = load_pseudo(&a.data, a.pseudo.as_deref())?;
    let shape = dataset
        .input_shape()
        .ok_or_else(|| Error::Config("empty dataset".into()))?;
    let mut model = Model::new(cfg.model_config(shape, dataset.schema.k, dataset.n_classes), cfg.seed)?;
    fs::create_dir_all(&a.out).at(&a.out)?;
    let history_path = a.out.join(HISTORY_FILE);
    let mut history = File::create(&history_path).at(&history_path)?;
    let mut write_err = None;
    let eval_set = (a.eval_each_epoch && !test.is_empty()).then_some(&test);
    let result = train(&mut model, &split, &pseudo, &cfg, eval_set, |r| {
        let line = serde_json::to_string(r).map(|l| writeln!(history, "{l}"));
        if let Ok(Err(e)) = line {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(Error::Io {
            path: history_path,
            source: e,
        });
    }
    // On divergence the model holds the last finite parameters; keep them.
    save_checkpoint(&a.out, &model, &dataset.schema)?;
    fs::write(a.out.join("train_config.toml"), toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?)
        .at(a.out.join("train_config.toml"))?;
    result?;
    if test.is_empty() {
        return Ok(());
    }
    let report = evaluate(&model, &test)?;
    write_json(&a.out.join(METRICS_FILE), &report)?;
    print_json(&serde_json::json!({
        "concept_accuracy": report.concept_accuracy,
        "task_accuracy": report.task_accuracy,
    }))
}

fn eval(a: EvalArgs) -> Result<()> {
    CliConfig::load(a.common.config.as_deref())?;
    let (_, _, test) = a.data.load()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let report = evaluate(&ck.model, &test)?;
    write_json(&a.out.unwrap_or_else(|| a.checkpoint.join(METRICS_FILE)), &report)?;
    print_json(&report)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.overrides.apply(CliConfig::load(a.common.config.as_deref())?.train)?;
    let (_, split, test) = a.data.load()?;
    let pseudo = load_pseudo(&a.data, a.pseudo.as_deref())?;
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds };
    let rows = ablation_study(
        &split,
        &pseudo,
        &test,
        &[Ablation::Full, Ablation::WoImg, Ablation::WoAlign],
        &seeds,
        &cfg,
        |r| log::info!("{} seed {}: C {:.4} A {:.4}", r.ablation, r.seed, r.concept_acc, r.task_acc),
    )?;
    fs::create_dir_all(&a.out).at(&a.out)?;
    write_ablation_csv(&a.out.join(ABLATION_FILE), &rows)?;
    for r in &rows {
        print_json(r)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let file = CliConfig::load(a.common.config.as_deref())?;
    let cfg = a.overrides.apply(file.train)?;
    let mut sec = file.sweep;
    if !a.ratios.is_empty() || !a.per_class.is_empty() {
        sec.ratios = a.ratios;
        sec.per_class = a.per_class;
    }
    if !a.variants.is_empty() {
        sec.variants = a.variants;
    }
    let test_fraction = a.test_fraction.unwrap_or(file.split.test_fraction);
    let settings: Vec<SplitMode> = sec
        .ratios
        .iter()
        .map(|&r| SplitMode::Ratio(r))
        .chain(sec.per_class.iter().map(|&k| SplitMode::PerClassK(k)))
        .collect();
    if settings.is_empty() || sec.variants.is_empty() {
        return Err(Error::Config("sweep needs at least one setting and one variant".into()));
    }
    let dataset = load_dataset(&a.data)?;
    let (train_ex, test_ex) = train_test_split(&dataset.examples, test_fraction, file.split.seed)?;
    let test = Dataset::new(dataset.schema.clone(), dataset.n_classes, test_ex)?;
    let cells = sweep_label_ratios(&train_ex, &test, &settings, &sec.variants, &cfg, |c| {
        log::info!("{} {}: C {:.4} A {:.4}", c.setting, c.variant, c.concept_acc, c.task_acc)
    })?;
    write_sweep_csv(&a.out, &cells)?;
    for c in &cells {
        print_json(c)?;
    }
    Ok(())
}

fn intervene_sweep(a: InterveneSweepArgs) -> Result<()> {
    let sec = CliConfig::load(a.common.config.as_deref())?.intervention;
    let ratios = ratio_range(a.ratios.as_deref().unwrap_or(&sec.ratios))?;
    let mode = match a.mode {
        Some(ModeArg::Individual) => InterventionMode::Individual,
        Some(ModeArg::Group) => InterventionMode::Group,
        None => sec.mode,
    };
    let order = match a.random_order_seed.or(sec.random_order_seed) {
        Some(seed) => SelectionOrder::Random { seed },
        None => SelectionOrder::MostErroneous,
    };
    let (_, _, test) = a.data.load()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let points = intervention_sweep(&ck.model, &test, &ratios, mode, order)?;
    let out = a.out.unwrap_or_else(|| a.checkpoint.join(INTERVENTION_FILE));
    write_intervention_csv(&out, &points)?;
    for p in &points {
        print_json(p)?;
    }
    Ok(())
}

fn export(a: ExportSaliencyArgs) -> Result<()> {
    CliConfig::load(a.common.config.as_deref())?;
    let (_, _, test) = a.data.load()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = &ck.model;
    let root = a.out.unwrap_or_else(|| a.checkpoint.join("saliency"));
    let n = a.limit.unwrap_or(test.len()).min(test.len());
    for ex in &test.examples[..n] {
        let out = model.forward(&ex.input)?;
        let stack = concept_heatmaps(&out.feature_map, &model.heatmap_vectors(&out))?;
        for i in 0..model.config.k {
            let sal = render_saliency(&stack, i, ex.input.height, ex.input.width)?;
            export_saliency(&root, &ex.id, &sal, a.png)?;
        }
    }
    let mut summary = serde_json::json!({ "examples": n, "path": root });
    if let Some(regions) = load_regions(&a.data.data)? {
        let report = saliency_localization(model, &test, &regions)?;
        write_json(&root.join(LOCALIZATION_FILE), &report)?;
        summary["localization"] = serde_json::to_value(report)?;
    }
    print_json(&summary)
}

fn serve(a: ServeArgs) -> Result<()> {
    CliConfig::load(a.common.config.as_deref())?;
    let cfg = ServerConfig {
        checkpoint_dir: a.checkpoint,
        data_dir: a.data.data.clone(),
        split_file: Some(a.data.split_path()).filter(|p| p.exists()),
        saliency_dir: a.saliency,
    }
    .with_env_override();
    let state = SharedState::new(ServerState::load(&cfg)?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Config(format!("tokio runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr).await.map_err(|source| Error::Io {
            path: PathBuf::from(a.addr.to_string()),
            source,
        })?;
        log::info!("listening on {}", a.addr);
        if a.reload_interval > 0 {
            let (shared, cfg) = (state.clone(), cfg.clone());
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(Duration::from_secs(a.reload_interval));
                loop {
                    tick.tick().await;
                    let (s, c) = (shared.clone(), cfg.clone());
                    match tokio::task::spawn_blocking(move || s.reload_if_changed(&c)).await {
                        Ok(Ok(true)) => log::info!("reloaded checkpoint from {}", cfg.checkpoint_dir.display()),
                        Ok(Ok(false)) => {}
                        Ok(Err(e)) => log::warn!("checkpoint reload failed: {e}"),
                        Err(e) => log::warn!("checkpoint reload task failed: {e}"),
                    }
                }
            });
        }
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|source| Error::Io {
                path: PathBuf::from(a.addr.to_string()),
                source,
            })
    })
}

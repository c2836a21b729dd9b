//! Subcommand entry point. Every run directory gets a `manifest.json`
//! recording the command, effective configuration, seed and artifact hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{
    generate_motif_dataset, load_fasta, stratified_split, HeadLabels, LabelDictionary, LabeledDataset, MotifSpec,
    Vocabulary,
};
use crate::error::{bail, Result};
use crate::evaluation::{
    evaluate_masks, explain_all, html_document, html_gallery, render_mask, render_rounded, target_masks, EvalOptions,
    EvaluationReport, RenderFormat,
};
use crate::explainer::{Explainer, ExplainerConfig};
use crate::explanandum::{EncoderKind, Explanandum, ExplanandumConfig, Pooling};
use crate::losses::{AreaBounds, LossWeights};
use crate::masking::{round_mask, ClassLayout};
use crate::training::{train_explainer, train_explanandum, write_steps_csv, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub k: usize,
    pub sequence_bases: usize,
    pub classes: Vec<usize>,
    pub motif_tokens: usize,
    pub plantings: usize,
    pub n_per_class: usize,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            k: 4,
            sequence_bases: 256,
            classes: vec![4, 12],
            motif_tokens: 3,
            plantings: 2,
            n_per_class: 220,
            test_fraction: 0.15,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplanandumSection {
    pub embed_dim: usize,
    pub encoder: EncoderKind,
    pub pooling: Pooling,
}

impl Default for ExplanandumSection {
    fn default() -> Self {
        ExplanandumSection {
            embed_dim: 32,
            encoder: EncoderKind::Attention,
            pooling: Pooling::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerSection {
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
    pub concat_cell: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ExplainerSection {
    fn default() -> Self {
        let c = ExplainerConfig::new(4, vec![2]);
        ExplainerSection {
            embed_dim: c.embed_dim,
            hidden: c.hidden,
            layers: c.layers,
            bidirectional: c.bidirectional,
            concat_cell: c.concat_cell,
            bn_momentum: c.bn_momentum,
            bn_eps: c.bn_eps,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub weights: LossWeights,
    pub bounds: AreaBounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub threshold: f64,
    pub batch_size: usize,
    pub occlusion_items: usize,
    pub gallery_items: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let o = EvalOptions::default();
        EvaluationSection {
            threshold: o.threshold,
            batch_size: o.batch_size,
            occlusion_items: o.occlusion_items,
            gallery_items: 20,
        }
    }
}

impl EvaluationSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            threshold: self.threshold,
            batch_size: self.batch_size,
            occlusion_items: self.occlusion_items,
        }
    }
}

/// Whole-pipeline configuration. Training sections default to the
/// large-corpus settings; desk-scale runs override them from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataSection,
    pub explanandum: ExplanandumSection,
    pub explanandum_training: TrainConfig,
    pub explainer: ExplainerSection,
    pub explainer_training: TrainConfig,
    pub loss: LossSection,
    pub evaluation: EvaluationSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            data: DataSection::default(),
            explanandum: ExplanandumSection::default(),
            explanandum_training: TrainConfig {
                batch_size: 128,
                epochs: 5,
                ..TrainConfig::default()
            },
            explainer: ExplainerSection::default(),
            explainer_training: TrainConfig::default(),
            loss: LossSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| crate::Error::Config(format!("{}: {}", path.display(), e)))?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            toml::from_str(&text).map_err(|e| crate::Error::Config(format!("{}: {}", path.display(), e)))
        }
    }

    pub fn explanandum_config(&self, vocab_size: usize, head_classes: Vec<usize>, seed: u64) -> ExplanandumConfig {
        let mut c = ExplanandumConfig::new(vocab_size, head_classes);
        c.embed_dim = self.explanandum.embed_dim;
        c.encoder = self.explanandum.encoder;
        c.pooling = self.explanandum.pooling;
        c.seed = seed;
        c
    }

    pub fn explainer_config(&self, vocab_size: usize, head_classes: Vec<usize>, seed: u64) -> ExplainerConfig {
        let s = &self.explainer;
        let mut c = ExplainerConfig::new(vocab_size, head_classes);
        c.embed_dim = s.embed_dim;
        c.hidden = s.hidden;
        c.layers = s.layers;
        c.bidirectional = s.bidirectional;
        c.concat_cell = s.concat_cell;
        c.bn_momentum = s.bn_momentum;
        c.bn_eps = s.bn_eps;
        c.seed = seed;
        c
    }
}

/// Independent seed for one use of the run seed.
pub fn sub_seed(seed: u64, purpose: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(purpose)
}

const SEED_DATA: u64 = 1;
const SEED_SPLIT: u64 = 2;
const SEED_EXPLANANDUM: u64 = 3;
const SEED_EXPLAINER: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<Artifact>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(command: &str, argv: &[String], out: &Path, seed: Option<u64>, config: &impl Serialize) -> Result<Self> {
        fs::create_dir_all(out)?;
        Ok(Run {
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                argv: argv.to_vec(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                config: serde_json::to_value(config)?,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                started_unix: unix_now(),
                finished_unix: 0,
            },
        })
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.manifest
            .inputs
            .insert(name.to_string(), path.display().to_string());
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let sha256 = sha256_file(&self.out.join(name))?;
        self.manifest.outputs.push(Artifact {
            path: name.to_string(),
            sha256,
        });
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.out.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tokmask",
    version,
    about = "Learned token saliency masks for sequence classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice in this run.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for outputs.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for parallel evaluation.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, c: &mut TrainConfig) {
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(b) = self.batch_size {
            c.batch_size = b;
        }
        if let Some(lr) = self.lr {
            c.lr = lr;
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate planted-motif data, or tokenize a labelled FASTA file, and
    /// write stratified train/val/test splits.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Class counts per head, coarse to fine, e.g. 4x12.
        #[arg(long)]
        classes: Option<String>,
        /// Sequences per finest class.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        fasta: Option<PathBuf>,
        /// CSV with an `id` column and one column per head.
        #[arg(long, requires = "fasta")]
        labels_csv: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Pre-train the classifier.
    TrainExplanandum {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainOverrides,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the explainer against a frozen classifier.
    TrainExplainer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainOverrides,
        #[arg(long)]
        data: PathBuf,
        /// Classifier checkpoint.
        #[arg(long)]
        explanandum: PathBuf,
    },
    /// Write masks for a split and render them.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        explanandum: PathBuf,
        #[arg(long)]
        explainer: PathBuf,
        /// ansi or html.
        #[arg(long, default_value = "html")]
        format: String,
        /// Only the first N sequences.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score masks under every masking condition.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        explanandum: PathBuf,
        #[arg(long)]
        explainer: PathBuf,
    },
    /// Regenerate the Markdown table and CSV exports from a stored report.
    Report {
        /// report.json written by evaluate.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_classes(s: &str) -> Result<Vec<usize>> {
    let parts: std::result::Result<Vec<usize>, _> = s.split('x').map(str::parse).collect();
    match parts {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => bail!(Config, "--classes expects counts like 4x12, got {:?}", s),
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    match &common.config {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

struct DataDir {
    labels: LabelDictionary,
}

impl DataDir {
    fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("labels.json");
        if !path.exists() {
            bail!(Data, "{} has no labels.json; run gen-data first", dir.display());
        }
        Ok(DataDir {
            labels: LabelDictionary::load(&path)?,
        })
    }

    fn split(&self, dir: &Path, name: &str) -> Result<LabeledDataset> {
        if !["train", "val", "test"].contains(&name) {
            bail!(Config, "unknown split {:?}", name);
        }
        let d = LabeledDataset::read_jsonl(&dir.join(format!("{name}.jsonl")), self.labels.head_classes())?;
        d.check_vocab(self.labels.vocab.size())?;
        Ok(d)
    }

    fn head_names(&self) -> Vec<String> {
        self.labels.heads.iter().map(|h| h.name.clone()).collect()
    }
}

fn load_models(
    explanandum: &Path,
    explainer: Option<&Path>,
    data: &DataDir,
) -> Result<(Explanandum, Option<Explainer>)> {
    let hash = &data.labels.vocab_hash;
    let m = Checkpoint::load(explanandum)?;
    m.check_vocab(hash)?;
    let model = m.into_explanandum()?;
    if model.head_classes() != data.labels.head_classes() {
        bail!(
            Checkpoint,
            "classifier heads {:?} do not match the data's {:?}",
            model.head_classes(),
            data.labels.head_classes()
        );
    }
    let explainer = match explainer {
        Some(p) => {
            let e = Checkpoint::load(p)?;
            e.check_vocab(hash)?;
            let e = e.into_explainer()?;
            if e.config().head_classes != model.head_classes() {
                bail!(Checkpoint, "explainer and classifier heads differ");
            }
            Some(e)
        }
        None => None,
    };
    Ok((model, explainer))
}

fn gen_data(
    argv: &[String],
    common: &Common,
    classes: Option<&str>,
    n: Option<usize>,
    fasta: Option<&Path>,
    labels_csv: Option<&Path>,
    k: Option<usize>,
) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(c) = classes {
        config.data.classes = parse_classes(c)?;
    }
    if let Some(n) = n {
        config.data.n_per_class = n;
    }
    if let Some(k) = k {
        config.data.k = k;
    }
    let seed = common.seed.unwrap_or(config.seed);
    config.seed = seed;
    let mut run = Run::start("gen-data", argv, &common.out, Some(seed), &config)?;
    let d = &config.data;
    let vocab = Vocabulary::nucleotide(d.k)?;

    let (data, labels) = match fasta {
        Some(fasta) => {
            let Some(csv) = labels_csv else {
                bail!(Config, "--fasta needs --labels-csv");
            };
            run.input("fasta", fasta);
            run.input("labels_csv", csv);
            let load = load_fasta(fasta, csv, &vocab)?;
            if load.skipped > 0 {
                log::warn!("{} records without labels skipped", load.skipped);
            }
            (load.dataset, load.labels)
        }
        None => {
            let spec = MotifSpec::random(
                d.k,
                d.sequence_bases,
                d.classes.clone(),
                d.motif_tokens,
                d.plantings,
                sub_seed(seed, SEED_DATA),
            )?;
            fs::write(run.path("motifs.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
            run.record("motifs.json")?;
            let data = generate_motif_dataset(&spec, d.n_per_class, sub_seed(seed, SEED_DATA))?;
            let heads = d
                .classes
                .iter()
                .enumerate()
                .map(|(i, c)| HeadLabels {
                    name: format!("level{i}"),
                    classes: (0..*c).map(|j| format!("L{i}C{j}")).collect(),
                })
                .collect();
            (data, LabelDictionary::new(vocab, heads))
        }
    };
    let split = stratified_split(&data, d.test_fraction, d.val_fraction, sub_seed(seed, SEED_SPLIT))?;
    labels.save(&run.path("labels.json"))?;
    run.record("labels.json")?;
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        part.write_jsonl(&run.path(&format!("{name}.jsonl")))?;
        run.record(&format!("{name}.jsonl"))?;
    }
    log::info!(
        "wrote {} train, {} val, {} test sequences",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    run.finish()
}

fn train_explanandum_cmd(argv: &[String], common: &Common, overrides: &TrainOverrides, data_dir: &Path) -> Result<()> {
    let mut config = load_config(common)?;
    overrides.apply(&mut config.explanandum_training);
    let seed = common.seed.unwrap_or(config.seed);
    config.seed = seed;
    config.explanandum_training.seed = sub_seed(seed, SEED_EXPLANANDUM);
    let data = DataDir::open(data_dir)?;
    let train = data.split(data_dir, "train")?;
    let val = data.split(data_dir, "val")?;
    let mut run = Run::start("train-explanandum", argv, &common.out, Some(seed), &config)?;
    run.input("data", data_dir);

    let mc = config.explanandum_config(
        data.labels.vocab.size(),
        data.labels.head_classes(),
        sub_seed(seed, SEED_EXPLANANDUM),
    );
    let result = train_explanandum(Explanandum::new(mc)?, &train, &val, &config.explanandum_training)?;
    let mut model = result.model;
    model.freeze();
    Checkpoint::from_explanandum(&model, &data.labels.vocab_hash).save(&run.path("explanandum.json"))?;
    run.record("explanandum.json")?;
    result.history.write_csv(&run.path("history.csv"))?;
    run.record("history.csv")?;
    run.finish()
}

fn train_explainer_cmd(
    argv: &[String],
    common: &Common,
    overrides: &TrainOverrides,
    data_dir: &Path,
    explanandum: &Path,
) -> Result<()> {
    let mut config = load_config(common)?;
    overrides.apply(&mut config.explainer_training);
    let seed = common.seed.unwrap_or(config.seed);
    config.seed = seed;
    config.explainer_training.seed = sub_seed(seed, SEED_EXPLAINER);
    let data = DataDir::open(data_dir)?;
    let (model, _) = load_models(explanandum, None, &data)?;
    let train = data.split(data_dir, "train")?;
    let val = data.split(data_dir, "val")?;
    let mut run = Run::start("train-explainer", argv, &common.out, Some(seed), &config)?;
    run.input("data", data_dir);
    run.input("explanandum", explanandum);

    let ec = config.explainer_config(
        data.labels.vocab.size(),
        data.labels.head_classes(),
        sub_seed(seed, SEED_EXPLAINER),
    );
    let before = model.params().hash();
    let result = train_explainer(
        Explainer::new(ec)?,
        &model,
        &train,
        &val,
        &config.loss.weights,
        &config.loss.bounds,
        &config.explainer_training,
    )?;
    if model.params().hash() != before {
        bail!(Model, "classifier changed during explainer training");
    }
    Checkpoint::from_explainer(&result.explainer, &data.labels.vocab_hash).save(&run.path("explainer.json"))?;
    run.record("explainer.json")?;
    result.history.write_csv(&run.path("history.csv"))?;
    run.record("history.csv")?;
    write_steps_csv(&result.steps, &run.path("steps.csv"))?;
    run.record("steps.csv")?;
    run.finish()
}

#[derive(Serialize)]
struct MaskRecord<'a> {
    id: &'a str,
    ids: &'a [usize],
    valid_len: usize,
    labels: &'a [usize],
    mask: &'a [f64],
    stack: Vec<&'a [f64]>,
}

#[allow(clippy::too_many_arguments)]
fn explain_cmd(
    argv: &[String],
    common: &Common,
    data_dir: &Path,
    split: &str,
    explanandum: &Path,
    explainer: &Path,
    format: &str,
    limit: Option<usize>,
) -> Result<()> {
    let format: RenderFormat = format.parse()?;
    let config = load_config(common)?;
    let data = DataDir::open(data_dir)?;
    let (model, explainer_model) = load_models(explanandum, Some(explainer), &data)?;
    let explainer_model = explainer_model.expect("requested");
    let mut items = data.split(data_dir, split)?;
    if let Some(n) = limit {
        items.examples.truncate(n);
    }
    if items.is_empty() {
        bail!(Data, "nothing to explain");
    }
    let mut run = Run::start("explain", argv, &common.out, None, &config)?;
    run.input("data", data_dir);
    run.input("explanandum", explanandum);
    run.input("explainer", explainer);

    let batch = config.evaluation.batch_size;
    let stacks = explain_all(&explainer_model, &items.examples, batch)?;
    let masks = target_masks(&model, &stacks, &items.examples)?;
    let layout = ClassLayout::new(model.head_classes());
    let mut jsonl = String::new();
    for ((e, s), m) in items.examples.iter().zip(&stacks).zip(&masks) {
        let c = layout.total();
        let rec = MaskRecord {
            id: &e.id,
            ids: e.tokens.valid_ids(),
            valid_len: e.tokens.valid_len(),
            labels: &e.labels.0,
            mask: m.values(),
            stack: (0..s.valid_len).map(|i| &s.values.data()[i * c..(i + 1) * c]).collect(),
        };
        jsonl.push_str(&serde_json::to_string(&rec)?);
        jsonl.push('\n');
    }
    fs::write(run.path("masks.jsonl"), jsonl)?;
    run.record("masks.jsonl")?;

    let vocab = &data.labels.vocab;
    let threshold = config.evaluation.threshold;
    match format {
        RenderFormat::Html => {
            let html = html_gallery(&items.examples, &masks, vocab, threshold, items.len())?;
            fs::write(run.path("masks.html"), html)?;
            run.record("masks.html")?;
        }
        RenderFormat::Ansi => {
            for (e, m) in items.examples.iter().zip(&masks) {
                println!("{}", e.id);
                println!("{}", render_mask(&e.tokens, m, vocab, RenderFormat::Ansi)?);
                println!(
                    "{}",
                    render_rounded(&e.tokens, &round_mask(m, threshold), vocab, RenderFormat::Ansi)?
                );
            }
        }
    }
    run.finish()
}

fn write_report_outputs(run: &mut Run, report: &EvaluationReport) -> Result<()> {
    fs::write(run.path("report.md"), report.markdown())?;
    run.record("report.md")?;
    report.write_csv_exports(&run.out)?;
    for f in [
        "histogram.csv",
        "positional.csv",
        "chunk_counts.csv",
        "chunk_lengths.csv",
    ] {
        run.record(f)?;
    }
    Ok(())
}

fn evaluate_cmd(
    argv: &[String],
    common: &Common,
    data_dir: &Path,
    split: &str,
    explanandum: &Path,
    explainer: &Path,
) -> Result<()> {
    let config = load_config(common)?;
    let data = DataDir::open(data_dir)?;
    let (model, explainer_model) = load_models(explanandum, Some(explainer), &data)?;
    let explainer_model = explainer_model.expect("requested");
    let test = data.split(data_dir, split)?;
    let mut run = Run::start("evaluate", argv, &common.out, None, &config)?;
    run.input("data", data_dir);
    run.input("explanandum", explanandum);
    run.input("explainer", explainer);

    let options = &config.evaluation.options();
    let stacks = explain_all(&explainer_model, &test.examples, options.batch_size)?;
    let masks = target_masks(&model, &stacks, &test.examples)?;
    let report = evaluate_masks(&model, &test, &masks, &data.head_names(), options)?;
    fs::write(run.path("report.json"), report.to_json()? + "\n")?;
    run.record("report.json")?;
    write_report_outputs(&mut run, &report)?;
    let gallery = html_gallery(
        &test.examples,
        &masks,
        &data.labels.vocab,
        options.threshold,
        config.evaluation.gallery_items,
    )?;
    fs::write(run.path("gallery.html"), gallery)?;
    run.record("gallery.html")?;
    print!("{}", report.markdown());
    run.finish()
}

fn report_cmd(argv: &[String], report_path: &Path, out: &Path) -> Result<()> {
    let report = EvaluationReport::from_json(&fs::read_to_string(report_path)?)?;
    let mut run = Run::start("report", argv, out, None, &serde_json::Value::Null)?;
    run.input("report", report_path);
    write_report_outputs(&mut run, &report)?;
    let table = html_document(
        "Evaluation",
        &[("Balanced accuracy".into(), markdown_to_html_table(&report))],
    );
    fs::write(run.path("report.html"), table)?;
    run.record("report.html")?;
    print!("{}", report.markdown());
    run.finish()
}

fn markdown_to_html_table(report: &EvaluationReport) -> String {
    let mut out = String::from("<table border=\"1\" cellpadding=\"4\"><tr><th>Condition</th>");
    for h in &report.head_names {
        out.push_str(&format!("<th>{h}</th>"));
    }
    out.push_str("</tr>");
    for c in &report.conditions {
        out.push_str(&format!("<tr><td>{}</td>", c.condition.label()));
        for a in &c.per_head {
            out.push_str(&format!("<td>{:.2}%</td>", 100.0 * a));
        }
        out.push_str("</tr>");
    }
    out.push_str("</table>");
    out
}

fn run_command(argv: &[String], command: Command) -> Result<()> {
    match &command {
        Command::GenData {
            common,
            classes,
            n,
            fasta,
            labels_csv,
            k,
        } => gen_data(
            argv,
            common,
            classes.as_deref(),
            *n,
            fasta.as_deref(),
            labels_csv.as_deref(),
            *k,
        ),
        Command::TrainExplanandum { common, train, data } => train_explanandum_cmd(argv, common, train, data),
        Command::TrainExplainer {
            common,
            train,
            data,
            explanandum,
        } => train_explainer_cmd(argv, common, train, data, explanandum),
        Command::Explain {
            common,
            data,
            split,
            explanandum,
            explainer,
            format,
            limit,
        } => explain_cmd(argv, common, data, split, explanandum, explainer, format, *limit),
        Command::Evaluate {
            common,
            data,
            split,
            explanandum,
            explainer,
        } => evaluate_cmd(argv, common, data, split, explanandum, explainer),
        Command::Report { report, out } => report_cmd(argv, report, out),
    }
}

fn threads_of(command: &Command) -> Option<usize> {
    match command {
        Command::GenData { common, .. }
        | Command::TrainExplanandum { common, .. }
        | Command::TrainExplainer { common, .. }
        | Command::Explain { common, .. }
        | Command::Evaluate { common, .. } => common.threads,
        Command::Report { .. } => None,
    }
}

/// Runs one command line. Returns 0 on success, 2 on a usage error and 1
/// when the command fails.
pub fn dispatch(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads_of(&cli.command) {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| run_command(argv, cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

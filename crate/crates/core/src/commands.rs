//! Subcommand implementations behind the `sam-ctr` binary.
//!
//! Every command reads a resolved [`RunConfig`], writes machine-readable
//! reports into the output directory, and records the configuration in
//! `manifest.json`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::complexity::{count_complexity, grid_csv, ComplexityReport};
use crate::data::dataset::{format_encoded, read_encoded, read_raw, split_sizes};
use crate::data::{
    build_vocab, generate_dcm, Dataset, Discretizer, FieldKind, FieldSchema, LabelMode, RawRecord,
    SyntheticSpec,
};
use crate::equivalence::{run_proposition, EquivalenceReport, Proposition};
use crate::error::{Error, Result};
use crate::gradcheck::{check_model, ModelCheck};
use crate::kind::ModelKind;
use crate::linalg::sigmoid;
use crate::metrics::{self, MetricsReport};
use crate::model::{Model, ModelConfig, ModelSpec};
use crate::train::{train, TrainConfig};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Prepare,
    Generate,
    Train,
    Eval,
    Gradcheck,
    Equivalence,
    Complexity,
    Ablation,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Prepare => "prepare",
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Equivalence => "equivalence",
            Command::Complexity => "complexity",
            Command::Ablation => "ablation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldEntry {
    pub name: String,
    pub kind: FieldKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub min_count: usize,
    pub ratios: [f64; 3],
    /// Single character; `\t` or `,` in practice.
    pub delimiter: char,
    /// Field names and kinds; all categorical when omitted.
    pub fields: Option<Vec<FieldEntry>>,
    pub log_base: f64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            min_count: 10,
            ratios: [0.8, 0.1, 0.1],
            delimiter: '\t',
            fields: None,
            log_base: std::f64::consts::E,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linear,
    Factorization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub family: Family,
    pub categories: Vec<usize>,
    pub dim: usize,
    pub linear_scale: f64,
    pub embedding_scale: f64,
    pub theta: f64,
    pub noise: f64,
    pub samples: usize,
    pub ratios: [f64; 3],
    pub label_mode: LabelMode,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            family: Family::Factorization,
            categories: vec![4; 10],
            dim: 8,
            linear_scale: 0.3,
            embedding_scale: 0.23,
            theta: 0.0,
            noise: 0.3,
            samples: 120_000,
            ratios: [100.0 / 120.0, 10.0 / 120.0, 10.0 / 120.0],
            label_mode: LabelMode::Logistic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Empty means the whole zoo.
    pub models: Vec<ModelKind>,
    pub n: usize,
    pub vocab: usize,
    pub d: usize,
    pub layers: usize,
    pub batch: usize,
    pub eps: f64,
    pub tol: f64,
    /// Adds this to one analytic gradient entry before comparing.
    pub corrupt: Option<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            models: Vec::new(),
            n: 5,
            vocab: 7,
            d: 4,
            layers: 2,
            batch: 8,
            eps: 1e-5,
            tol: 1e-6,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceConfig {
    /// Empty means every proposition plus the negative control.
    pub propositions: Vec<Proposition>,
    pub n: usize,
    pub vocab: usize,
    pub d: usize,
    pub trials: usize,
    pub samples: usize,
    pub tol: f64,
    pub negative_tol: f64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig {
            propositions: Vec::new(),
            n: 5,
            vocab: 4,
            d: 4,
            trials: 5,
            samples: 1000,
            tol: 1e-8,
            negative_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComplexityConfig {
    pub model: Option<ModelKind>,
    pub n: usize,
    pub d: usize,
    pub layers: usize,
    /// Sweep n in 2..=8, d in 1..=8, L in 1..=3 instead of one point.
    pub grid: bool,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        ComplexityConfig {
            model: None,
            n: 5,
            d: 8,
            layers: 1,
            grid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub layers: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            layers: vec![1, 2, 3, 4],
        }
    }
}

/// The full configuration of one run; mirrors the JSON config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Schema file; defaults to `schema.json` inside the data directory.
    pub schema: Option<PathBuf>,
    /// Saved model for `eval`; defaults to `model.json` in the output directory.
    pub checkpoint: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub prepare: PrepareConfig,
    pub generate: GenerateConfig,
    pub gradcheck: GradcheckConfig,
    pub equivalence: EquivalenceConfig,
    pub complexity: ComplexityConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out)?;
        Ok(out)
    }

    fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::config("--data is required"))
    }

    fn model_config(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::config("no model selected (--model or config)"))
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub model: Option<ModelKind>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub d: Option<usize>,
    pub layers: Option<usize>,
    pub min_count: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub l2: Option<f64>,
    pub dropout: Option<f64>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
}

impl Overrides {
    /// `--model`, `--d` and `--layers` land in the section the command reads.
    pub fn apply(&self, cmd: Command, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.data {
            cfg.data = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.out = Some(p.clone());
        }
        if let Some(m) = self.min_count {
            cfg.prepare.min_count = m;
        }
        let t = &mut cfg.train;
        t.lr = self.lr.unwrap_or(t.lr);
        t.batch_size = self.batch.unwrap_or(t.batch_size);
        t.l2 = self.l2.unwrap_or(t.l2);
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.patience = self.patience.unwrap_or(t.patience);
        if self.dropout.is_some() {
            t.dropout = self.dropout;
        }
        match cmd {
            Command::Gradcheck => {
                if let Some(k) = self.model {
                    cfg.gradcheck.models = vec![k];
                }
                cfg.gradcheck.d = self.d.unwrap_or(cfg.gradcheck.d);
                cfg.gradcheck.layers = self.layers.unwrap_or(cfg.gradcheck.layers);
            }
            Command::Equivalence => {
                cfg.equivalence.d = self.d.unwrap_or(cfg.equivalence.d);
            }
            Command::Complexity => {
                if self.model.is_some() {
                    cfg.complexity.model = self.model;
                }
                cfg.complexity.d = self.d.unwrap_or(cfg.complexity.d);
                cfg.complexity.layers = self.layers.unwrap_or(cfg.complexity.layers);
            }
            _ => {
                if cmd == Command::Ablation && cfg.model.is_none() {
                    cfg.model = Some(ModelConfig::new(ModelKind::Sam3A));
                }
                if let Some(k) = self.model {
                    match &mut cfg.model {
                        Some(m) => m.model = k,
                        None => cfg.model = Some(ModelConfig::new(k)),
                    }
                }
                if self.d.is_some() || self.layers.is_some() {
                    let m = cfg.model.as_mut().ok_or_else(|| {
                        Error::config("--d/--layers need a model (--model or config)")
                    })?;
                    m.d = self.d.unwrap_or(m.d);
                    m.layers = self.layers.unwrap_or(m.layers);
                }
            }
        }
        Ok(())
    }
}

/// Files written and a JSON summary for stdout.
#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub summary: Value,
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<CommandOutput> {
    let out = match cmd {
        Command::Prepare => cmd_prepare(cfg),
        Command::Generate => cmd_generate(cfg),
        Command::Train => cmd_train(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::Gradcheck => cmd_gradcheck(cfg),
        Command::Equivalence => cmd_equivalence(cfg),
        Command::Complexity => cmd_complexity(cfg),
        Command::Ablation => cmd_ablation(cfg),
    };
    // Verification failures still leave their reports behind.
    let (result, files, summary) = match out {
        Ok((files, summary)) => (Ok(()), files, summary),
        Err(Failure {
            error,
            files,
            summary,
        }) => (Err(error), files, summary),
    };
    if cfg.out.is_some() || !files.is_empty() {
        write_manifest(cmd, cfg, &files, &summary)?;
    }
    result.map(|_| CommandOutput { files, summary })
}

struct Failure {
    error: Error,
    files: Vec<PathBuf>,
    summary: Value,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Failure {
            error,
            files: Vec::new(),
            summary: Value::Null,
        }
    }
}

type Outcome = std::result::Result<(Vec<PathBuf>, Value), Failure>;

fn write_manifest(cmd: Command, cfg: &RunConfig, files: &[PathBuf], summary: &Value) -> Result<()> {
    let out = cfg.out_dir()?;
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = json!({
        "command": cmd.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "outputs": files,
        "summary": summary,
        "created_unix": created,
    });
    std::fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn write(path: PathBuf, contents: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, contents)?;
    files.push(path);
    Ok(())
}

fn write_json<T: Serialize>(path: PathBuf, value: &T, files: &mut Vec<PathBuf>) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value)?, files)
}

fn cmd_prepare(cfg: &RunConfig) -> Outcome {
    let p = &cfg.prepare;
    let raw_path = cfg.data_dir()?;
    let text = std::fs::read_to_string(raw_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", raw_path.display())))?;
    let width = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .map(|l| l.split(p.delimiter).count().saturating_sub(1))
        .ok_or_else(|| Error::data(format!("{} has no records", raw_path.display())))?;
    let fields: Vec<(String, FieldKind)> = match &p.fields {
        Some(f) => f.iter().map(|e| (e.name.clone(), e.kind)).collect(),
        None => (1..=width)
            .map(|i| (format!("f{i}"), FieldKind::Categorical))
            .collect(),
    };
    let raw = read_raw(raw_path, p.delimiter, fields.len())?;
    let sizes = split_sizes(raw.len(), p.ratios)?;
    let order = shuffled(raw.len(), cfg.seed);
    let part = |a: usize, b: usize| -> Vec<RawRecord> {
        order[a..b].iter().map(|&i| raw[i].clone()).collect()
    };
    let (tr, va, te) = (
        part(0, sizes[0]),
        part(sizes[0], sizes[0] + sizes[1]),
        part(sizes[0] + sizes[1], raw.len()),
    );
    let vocab = build_vocab(
        &tr,
        &fields,
        p.min_count,
        Discretizer {
            log_base: p.log_base,
        },
    )?;
    let out = cfg.out_dir()?;
    let mut files = Vec::new();
    for (name, rows) in [("train", &tr), ("valid", &va), ("test", &te)] {
        let enc = rows
            .iter()
            .map(|r| vocab.encode(r))
            .collect::<Result<Vec<_>>>()?;
        write(
            out.join(format!("{name}.tsv")),
            &format_encoded(&enc),
            &mut files,
        )?;
    }
    write_json(out.join("vocab.json"), &vocab, &mut files)?;
    write_json(out.join("schema.json"), &vocab.schema, &mut files)?;
    let summary = json!({
        "records": raw.len(),
        "splits": sizes,
        "vocab_sizes": vocab.schema.vocab_sizes(),
    });
    Ok((files, summary))
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    order
}

/// The synthetic specification a generate run would use.
pub fn synthetic_spec(cfg: &RunConfig) -> SyntheticSpec {
    let g = &cfg.generate;
    let mut spec = match g.family {
        Family::Factorization => SyntheticSpec::random_factorization(
            g.categories.clone(),
            g.dim,
            g.linear_scale,
            g.embedding_scale,
            g.theta,
            g.noise,
            g.samples,
            cfg.seed,
        ),
        Family::Linear => SyntheticSpec::random_linear(
            g.categories.clone(),
            g.linear_scale,
            g.theta,
            g.noise,
            g.samples,
            cfg.seed,
        ),
    };
    spec.label_mode = g.label_mode;
    spec
}

fn format_probs(p: &[f64]) -> String {
    p.iter().map(|x| format!("{x}\n")).collect()
}

fn cmd_generate(cfg: &RunConfig) -> Outcome {
    let spec = synthetic_spec(cfg);
    let data = generate_dcm(&spec)?;
    let sizes = split_sizes(data.dataset.len(), cfg.generate.ratios)?;
    let out = cfg.out_dir()?;
    let mut files = Vec::new();
    let mut oracle_auc = serde_json::Map::new();
    let bounds = [
        (0, sizes[0]),
        (sizes[0], sizes[0] + sizes[1]),
        (sizes[0] + sizes[1], data.dataset.len()),
    ];
    for (name, (a, b)) in ["train", "valid", "test"].into_iter().zip(bounds) {
        let recs = &data.dataset.records[a..b];
        write(
            out.join(format!("{name}.tsv")),
            &format_encoded(recs),
            &mut files,
        )?;
        write(
            out.join(format!("{name}.oracle")),
            &format_probs(&data.oracle[a..b]),
            &mut files,
        )?;
        let labels: Vec<u8> = recs.iter().map(|r| r.label).collect();
        let auc = metrics::auc(&data.oracle[a..b], &labels).ok();
        oracle_auc.insert(name.into(), json!(auc));
    }
    write_json(out.join("schema.json"), &data.dataset.schema, &mut files)?;
    let meta = json!({ "spec": spec, "splits": sizes, "oracle_auc": oracle_auc });
    write_json(out.join("synthetic.json"), &meta, &mut files)?;
    Ok((files, json!({ "splits": sizes, "oracle_auc": oracle_auc })))
}

/// Train, validation, and (when present) test splits of a data directory.
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Option<Dataset>,
    pub test_oracle: Option<Vec<f64>>,
}

pub fn load_schema(cfg: &RunConfig) -> Result<FieldSchema> {
    let path = match &cfg.schema {
        Some(p) => p.clone(),
        None => cfg.data_dir()?.join("schema.json"),
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("cannot read schema {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{} is not a schema: {e}", path.display())))
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let schema = load_schema(cfg)?;
    let dir = cfg.data_dir()?;
    let test_path = dir.join("test.tsv");
    let test = if test_path.exists() {
        Some(read_encoded(&test_path, &schema)?)
    } else {
        None
    };
    let oracle_path = dir.join("test.oracle");
    let test_oracle = if oracle_path.exists() {
        let text = std::fs::read_to_string(&oracle_path)?;
        let p = text
            .lines()
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::data(format!("bad oracle value `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(p)
    } else {
        None
    };
    Ok(Splits {
        train: read_encoded(&dir.join("train.tsv"), &schema)?,
        valid: read_encoded(&dir.join("valid.tsv"), &schema)?,
        test,
        test_oracle,
    })
}

fn evaluate(model: &Model, ds: &Dataset) -> Result<MetricsReport> {
    let logits = model.logits(&ds.records)?;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let mut report = metrics::evaluate(&probs, &ds.labels())?;
    // rank on logits so saturated probabilities keep their order
    report.auc = metrics::auc(&logits, &ds.labels())?;
    Ok(report)
}

fn bayes_auc(splits: &Splits) -> Option<f64> {
    let (test, oracle) = (splits.test.as_ref()?, splits.test_oracle.as_ref()?);
    (oracle.len() == test.len())
        .then(|| metrics::auc(oracle, &test.labels()).ok())
        .flatten()
}

/// Builds and trains one model; returns it with its metrics summary.
pub fn train_one(
    cfg: &RunConfig,
    spec: ModelSpec,
    splits: &Splits,
) -> Result<(Model, crate::train::TrainOutcome, Value)> {
    let mut model = Model::build(spec, cfg.seed)?;
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let outcome = train(&mut model, &splits.train, &splits.valid, &train_cfg)?;
    let valid = evaluate(&model, &splits.valid)?;
    let test = splits
        .test
        .as_ref()
        .map(|t| evaluate(&model, t))
        .transpose()?;
    let summary = json!({
        "model": model.kind(),
        "best_epoch": outcome.history.best_epoch,
        "epochs_run": outcome.history.epochs.len(),
        "valid": valid,
        "test": test,
        "bayes_auc": bayes_auc(splits),
    });
    Ok((model, outcome, summary))
}

fn cmd_train(cfg: &RunConfig) -> Outcome {
    let splits = load_splits(cfg)?;
    let spec = cfg.model_config()?.to_spec(&splits.train.schema)?;
    let (model, outcome, summary) = train_one(cfg, spec, &splits)?;
    let out = cfg.out_dir()?;
    let mut files = Vec::new();
    let model_path = out.join("model.json");
    model.save(&model_path)?;
    files.push(model_path);
    write(
        out.join("history.csv"),
        &outcome.history.to_csv(),
        &mut files,
    )?;
    write_json(out.join("history.json"), &outcome.history, &mut files)?;
    write_json(out.join("metrics.json"), &summary, &mut files)?;
    Ok((files, summary))
}

fn cmd_eval(cfg: &RunConfig) -> Outcome {
    let out = cfg.out_dir()?;
    let path = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("model.json"));
    let model = Model::load(&path)?;
    let splits = load_splits(cfg)?;
    if splits.valid.schema != model.spec.schema {
        return Err(Error::data("model and data schemas differ").into());
    }
    let valid = evaluate(&model, &splits.valid)?;
    let test = splits
        .test
        .as_ref()
        .map(|t| evaluate(&model, t))
        .transpose()?;
    let summary = json!({
        "model": model.kind(),
        "checkpoint": path,
        "valid": valid,
        "test": test,
        "bayes_auc": bayes_auc(&splits),
    });
    let mut files = Vec::new();
    write_json(out.join("eval.json"), &summary, &mut files)?;
    Ok((files, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub model: ModelKind,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Random records over `n` fields of `vocab` rows each.
fn gradcheck_batch(
    schema: &FieldSchema,
    batch: usize,
    seed: u64,
) -> Vec<crate::data::EncodedRecord> {
    let mut recs = crate::equivalence::sample_records(schema, batch, seed);
    for (k, r) in recs.iter_mut().enumerate() {
        r.label = (k % 2) as u8;
    }
    recs
}

/// Moves constant-initialized slots (biases, unit gates) off their exact
/// starting values so no ReLU input sits on the kink.
fn jitter_constants(model: &mut Model, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x6a17);
    for slot in model.store.slots_mut() {
        if matches!(slot.init, crate::params::Init::Constant(_)) {
            slot.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
    }
}

pub fn gradcheck_suite(g: &GradcheckConfig, seed: u64) -> Result<Vec<GradcheckEntry>> {
    let schema = FieldSchema::with_vocab_sizes(&vec![g.vocab; g.n])?;
    let records = gradcheck_batch(&schema, g.batch, seed);
    let models = if g.models.is_empty() {
        ModelKind::ALL.to_vec()
    } else {
        g.models.clone()
    };
    models
        .into_iter()
        .map(|kind| {
            let mut spec = ModelSpec::new(kind, schema.clone(), g.d);
            spec.layers = g.layers;
            let mut model = Model::build(spec, seed)?;
            jitter_constants(&mut model, seed);
            let opts = ModelCheck {
                eps: g.eps,
                dropout_seed: kind.has_mlp().then_some(seed),
                corrupt: g.corrupt,
            };
            let err = check_model(&model, &records, opts)?;
            Ok(GradcheckEntry {
                model: kind,
                max_rel_err: err,
                passed: err < g.tol,
            })
        })
        .collect()
}

fn cmd_gradcheck(cfg: &RunConfig) -> Outcome {
    let entries = gradcheck_suite(&cfg.gradcheck, cfg.seed)?;
    let out = cfg.out_dir()?;
    let mut files = Vec::new();
    write_json(out.join("gradcheck.json"), &entries, &mut files)?;
    let failed: Vec<String> = entries
        .iter()
        .filter(|e| !e.passed)
        .map(|e| e.model.to_string())
        .collect();
    let summary = json!({ "tol": cfg.gradcheck.tol, "results": entries });
    if failed.is_empty() {
        Ok((files, summary))
    } else {
        Err(Failure {
            error: Error::Verification(format!("gradient check failed for {}", failed.join(", "))),
            files,
            summary,
        })
    }
}

pub fn equivalence_suite(e: &EquivalenceConfig, seed: u64) -> Result<Vec<EquivalenceReport>> {
    let schema = FieldSchema::with_vocab_sizes(&vec![e.vocab; e.n])?;
    let props = if e.propositions.is_empty() {
        Proposition::ALL.to_vec()
    } else {
        e.propositions.clone()
    };
    let mut out = Vec::new();
    for p in props {
        let tol = if p == Proposition::Negative {
            e.negative_tol
        } else {
            e.tol
        };
        out.extend(run_proposition(
            p, &schema, e.d, e.trials, e.samples, tol, seed,
        )?);
    }
    Ok(out)
}

fn cmd_equivalence(cfg: &RunConfig) -> Outcome {
    let reports = equivalence_suite(&cfg.equivalence, cfg.seed)?;
    let out = cfg.out_dir()?;
    let mut files = Vec::new();
    write_json(out.join("equivalence.json"), &reports, &mut files)?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.construction.as_str())
        .collect();
    let summary = json!({ "reports": reports });
    if failed.is_empty() {
        Ok((files, summary))
    } else {
        Err(Failure {
            error: Error::Verification(format!("equivalence failed: {}", failed.join("; "))),
            files,
            summary,
        })
    }
}

fn complexity_point(
    kind: ModelKind,
    n: usize,
    d: usize,
    layers: usize,
) -> Result<ComplexityReport> {
    let schema = FieldSchema::with_vocab_sizes(&vec![3; n])?;
    let mut spec = ModelSpec::new(kind, schema, d);
    spec.layers = layers;
    Ok(count_complexity(&Model::build(spec, 0)?))
}

/// Reports for the sweep n in 2..=8, d in 1..=8, L in 1..=3.
pub fn complexity_grid(kinds: &[ModelKind]) -> Result<Vec<ComplexityReport>> {
    let mut out = Vec::new();
    for &kind in kinds {
        for n in 2..=8 {
            for d in 1..=8 {
                for l in 1..=3 {
                    out.push(complexity_point(kind, n, d, l)?);
                }
            }
        }
    }
    Ok(out)
}

pub const TABLE_MODELS: [ModelKind; 8] = [
    ModelKind::Lr,
    ModelKind::Fm,
    ModelKind::Sam1,
    ModelKind::Sam2A,
    ModelKind::Sam2E,
    ModelKind::AutoInt,
    ModelKind::Sam3A,
    ModelKind::Sam3E,
];

fn cmd_complexity(cfg: &RunConfig) -> Outcome {
    let c = &cfg.complexity;
    let out = cfg.out_dir()?;
    let mut files = Vec::new();
    if c.grid {
        let kinds = match c.model {
            Some(k) => vec![k],
            None => TABLE_MODELS.to_vec(),
        };
        let reports = complexity_grid(&kinds)?;
        write(
            out.join("complexity_grid.csv"),
            &grid_csv(&reports),
            &mut files,
        )?;
        let mismatches = reports
            .iter()
            .filter(|r| r.matches_table() == Some(false))
            .count();
        return Ok((
            files,
            json!({ "rows": reports.len(), "mismatches": mismatches }),
        ));
    }
    let kinds = match c.model {
        Some(k) => vec![k],
        None => ModelKind::ALL.to_vec(),
    };
    let reports = kinds
        .into_iter()
        .map(|k| complexity_point(k, c.n, c.d, c.layers))
        .collect::<Result<Vec<_>>>()?;
    for r in &reports {
        for note in &r.notes {
            eprintln!("warning: {}: {note}", r.model);
        }
    }
    write_json(out.join("complexity.json"), &reports, &mut files)?;
    write(out.join("complexity.csv"), &grid_csv(&reports), &mut files)?;
    Ok((files, json!({ "reports": reports })))
}

fn cmd_ablation(cfg: &RunConfig) -> Outcome {
    let layers = &cfg.ablation.layers;
    if layers.is_empty() || layers.contains(&0) {
        return Err(
            Error::config("ablation layers must be a non-empty list of positive counts").into(),
        );
    }
    let splits = load_splits(cfg)?;
    let base = cfg
        .model
        .clone()
        .unwrap_or_else(|| ModelConfig::new(ModelKind::Sam3A));
    if !base.model.is_sam3() {
        return Err(Error::config(format!(
            "layer ablation needs a SAM3 model, got {}",
            base.model
        ))
        .into());
    }
    let mut csv =
        String::from("layers,best_epoch,epochs_run,val_auc,val_logloss,test_auc,test_logloss\n");
    let mut rows = Vec::new();
    for &l in layers {
        let mut mc = base.clone();
        mc.layers = l;
        let spec = mc.to_spec(&splits.train.schema)?;
        let (_, outcome, summary) = train_one(cfg, spec, &splits)?;
        let get = |split: &str, key: &str| {
            summary[split][key]
                .as_f64()
                .map(|v| v.to_string())
                .unwrap_or_default()
        };
        csv.push_str(&format!(
            "{l},{},{},{},{},{},{}\n",
            outcome.history.best_epoch,
            outcome.history.epochs.len(),
            get("valid", "auc"),
            get("valid", "logloss"),
            get("test", "auc"),
            get("test", "logloss"),
        ));
        rows.push(json!({ "layers": l, "metrics": summary }));
    }
    let out = cfg.out_dir()?;
    let mut files = Vec::new();
    write(out.join("ablation.csv"), &csv, &mut files)?;
    Ok((files, json!({ "model": base.model, "rows": rows })))
}

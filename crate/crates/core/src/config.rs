//! Pipeline configuration and run manifests.
//!
//! A single JSON config file drives every command; `--set section.key=value`
//! flags override individual fields. Each run writes a manifest recording
//! the effective config, the digests of its inputs, and the seed, so any
//! artifact can be reproduced bit-identically from its manifest alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::model::ModelConfig;
use crate::tokenizer::Variant;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Environment variable naming the default config file, consulted when no
/// `--config` flag is given.
pub const CONFIG_ENV_VAR: &str = "CELLFM_CONFIG";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Directory holding matrix.txt / genes.tsv / cells.tsv.
    pub corpus: PathBuf,
    /// Median dictionary file.
    pub medians: PathBuf,
    /// Tokenized shard directory.
    pub shards: PathBuf,
    /// Checkpoint output directory.
    pub checkpoints: PathBuf,
    /// Reports, metrics, and embeddings output directory.
    pub reports: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            corpus: "data/corpus".into(),
            medians: "out/medians.tsv".into(),
            shards: "out/shards".into(),
            checkpoints: "out/checkpoints".into(),
            reports: "out/reports".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct QcSection {
    /// Minimum total transcript count, exclusive ("fewer than" is removed).
    pub min_counts: u64,
    /// Maximum mitochondrial fraction, exclusive ("more than" is removed).
    pub max_mito_frac: f64,
}

impl Default for QcSection {
    fn default() -> Self {
        QcSection { min_counts: 225, max_mito_frac: 0.10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub context_len: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection { context_len: 2048 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Named size preset; explicit dimensions below win when non-zero.
    pub preset: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { preset: "10m".into(), n_layers: 0, d_model: 0, n_heads: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub mask_rate: f64,
    pub w_mlm: f64,
    pub w_cls: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Fraction of cells held out for validation-loss logging.
    pub val_frac: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            max_lr: t.max_lr,
            warmup_steps: t.warmup_steps,
            total_steps: t.total_steps,
            weight_decay: t.weight_decay,
            mask_rate: t.mask_rate,
            w_mlm: t.w_mlm,
            w_cls: t.w_cls,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            val_frac: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    /// Cross-validation folds for the held-out-diseases task.
    pub folds: usize,
    /// Donor fraction kept for training in the held-out-donors task.
    pub train_frac: f64,
    /// Highly variable genes used by the classical baseline.
    pub top_k_genes: usize,
    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,
    pub seeds: Vec<u64>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        BenchmarkSection {
            folds: 3,
            train_frac: 0.70,
            top_k_genes: 512,
            finetune_epochs: 8,
            finetune_batch_size: 16,
            seeds: vec![0, 1, 2],
        }
    }
}

/// Everything a pipeline run needs, serialized as one JSON document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Global seed recorded into every output artifact.
    pub seed: u64,
    /// Tokenization variant: "g" (gene identity) or "x" (expression value).
    pub variant: String,
    pub paths: PathsSection,
    pub qc: QcSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub benchmark: BenchmarkSection,
}

impl PipelineConfig {
    pub fn variant(&self) -> Result<Variant> {
        if self.variant.is_empty() {
            return Ok(Variant::G);
        }
        self.variant.parse()
    }

    /// Resolve the model section into a concrete configuration.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let variant = self.variant()?;
        let ctx = self.tokenizer.context_len;
        let m = &self.model;
        let cfg = if m.n_layers > 0 || m.d_model > 0 || m.n_heads > 0 {
            if m.n_layers == 0 || m.d_model == 0 || m.n_heads == 0 {
                return Err(Error::InvalidConfig(
                    "model.n_layers, model.d_model, and model.n_heads must all be set \
                     when overriding the preset"
                        .into(),
                ));
            }
            ModelConfig::new(variant, m.n_layers, m.d_model, m.n_heads, ctx, vocab_size)
        } else {
            ModelConfig::preset(&m.preset, variant, ctx, vocab_size)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            batch_size: t.batch_size,
            max_lr: t.max_lr,
            warmup_steps: t.warmup_steps,
            total_steps: t.total_steps,
            weight_decay: t.weight_decay,
            mask_rate: t.mask_rate,
            seed: self.seed,
            w_mlm: t.w_mlm,
            w_cls: t.w_cls,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.variant()?;
        if !(self.train.val_frac >= 0.0 && self.train.val_frac < 1.0) {
            return Err(Error::InvalidConfig("train.val_frac must be in [0, 1)".into()));
        }
        if self.benchmark.folds < 2 {
            return Err(Error::InvalidConfig("benchmark.folds must be at least 2".into()));
        }
        if !(self.benchmark.train_frac > 0.0 && self.benchmark.train_frac < 1.0) {
            return Err(Error::InvalidConfig("benchmark.train_frac must be in (0, 1)".into()));
        }
        if self.tokenizer.context_len == 0 {
            return Err(Error::InvalidConfig("tokenizer.context_len must be positive".into()));
        }
        Ok(())
    }
}

/// Apply one `section.key=value` override to a JSON document. The value is
/// parsed as JSON when possible and falls back to a plain string, so
/// `--set train.max_lr=3e-4` and `--set variant=x` both work.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::InvalidConfig(format!("override {spec:?} is not of the form section.key=value"))
    })?;
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or(Value::String(raw.to_string()));
    let mut node = doc;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidConfig(format!("override path {path:?} has an empty segment")));
    }
    for seg in &segments[..segments.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("{path:?} does not address a field")))?
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::InvalidConfig(format!("{path:?} does not address a field")))?
        .insert(segments.last().unwrap().to_string(), parsed);
    Ok(())
}

/// Load the effective config: the file (explicit flag, else the
/// [`CONFIG_ENV_VAR`] environment variable, else built-in defaults) with
/// overrides applied. Returns the typed config together with its JSON
/// snapshot for the manifest.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<(PipelineConfig, Value)> {
    let env_path = std::env::var_os(CONFIG_ENV_VAR).map(PathBuf::from);
    let path = file.map(Path::to_path_buf).or(env_path);
    let mut doc = match &path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => serde_json::to_value(PipelineConfig::default())
            .expect("default config serializes"),
    };
    for ov in overrides {
        apply_override(&mut doc, ov)?;
    }
    let text = serde_json::to_string(&doc).expect("json document re-serializes");
    let mut de = serde_json::de::Deserializer::from_str(&text);
    let cfg: PipelineConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        Error::InvalidConfig(format!("field {}: {}", e.path(), e.inner()))
    })?;
    cfg.validate()?;
    Ok((cfg, doc))
}

/// SHA-256 of a file's contents, hex-encoded.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Digest of a path: the file digest, or for a directory the digest of its
/// sorted `name:digest` lines (non-recursive over regular files).
pub fn digest_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return sha256_file(path);
    }
    let mut lines = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        if entry.file_type().map_err(|e| Error::io(path, e))?.is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            lines.push(format!("{name}:{}", sha256_file(&entry.path())?));
        }
    }
    lines.sort();
    let mut hasher = Sha256::new();
    for l in &lines {
        hasher.update(l.as_bytes());
        hasher.update(b"\n");
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// Effective config snapshot after overrides.
    pub config: Value,
    /// Input path -> SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: Value) -> Manifest {
        Manifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: BTreeMap::new(),
        }
    }

    /// Digest an input path and record it; missing optional inputs are the
    /// caller's responsibility to skip.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), digest_path(path)?);
        Ok(())
    }

    /// Write `manifest.json` into the given output directory.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

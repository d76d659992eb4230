//! Bidirectional transformer encoder with a masked-gene head (categorical for
//! the G variant, scalar for the X variant) and four annotation
//! classification heads.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradStore, NodeId, Tape};
use crate::corpus::Category;
use crate::tokenizer::{MaskedBatch, TokenizedCell, Variant};
use crate::{Error, Result};

/// Additive attention penalty at padded key positions.
const NEG_INF: f64 = -1e30;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// context_len + 4 prompt slots.
    pub max_positions: usize,
    pub vocab_size: usize,
    /// Class counts for disease, tissue_type, cell_type, sex heads.
    pub head_sizes: [usize; 4],
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(
        variant: Variant,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        context_len: usize,
        vocab_size: usize,
    ) -> ModelConfig {
        ModelConfig {
            variant,
            n_layers,
            d_model,
            n_heads,
            d_ff: 4 * d_model,
            max_positions: context_len + 4,
            vocab_size,
            head_sizes: [10, 17, 13, 3],
            dropout: 0.0,
        }
    }

    /// Named presets. Names indicate approximate parameter counts; the
    /// sub-10m presets are sized for desk-scale runs and tests.
    pub fn preset(
        name: &str,
        variant: Variant,
        context_len: usize,
        vocab_size: usize,
    ) -> Result<ModelConfig> {
        let (layers, d, heads) = match name {
            "10m" => (3, 128, 2),
            "30m" => (6, 256, 4),
            "70m" => (12, 512, 8),
            "160m" => (12, 768, 12),
            "400m" => (24, 1024, 16),
            "0.1m" => (2, 48, 4),
            "0.5m" => (4, 96, 4),
            "2m" => (6, 160, 4),
            other => {
                return Err(Error::InvalidConfig(format!("unknown model preset {other:?}")))
            }
        };
        Ok(ModelConfig::new(variant, layers, d, heads, context_len, vocab_size))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::InvalidConfig("zero-sized model dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn head_size(&self, cat: Category) -> usize {
        match cat {
            Category::Disease => self.head_sizes[0],
            Category::TissueType => self.head_sizes[1],
            Category::CellType => self.head_sizes[2],
            Category::Sex => self.head_sizes[3],
        }
    }
}

fn cls_key(cat: Category) -> String {
    format!("cls_{}", cat.name())
}

/// Model parameters: named f64 tensors.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: IndexMap<String, Arc<Array2<f64>>>,
}

impl ModelParams {
    pub fn tensor(&self, name: &str) -> Option<&Arc<Array2<f64>>> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Arc<Array2<f64>>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Add an auxiliary tensor (e.g. a fine-tuning head) so it shares the
    /// optimizer path with the backbone.
    pub(crate) fn insert_tensor(&mut self, name: &str, t: Array2<f64>) {
        self.tensors.insert(name.to_string(), Arc::new(t));
    }

    pub(crate) fn from_tensors(
        config: ModelConfig,
        tensors: IndexMap<String, Arc<Array2<f64>>>,
    ) -> ModelParams {
        ModelParams { config, tensors }
    }

    /// Whether decoupled weight decay applies to a tensor: weight matrices
    /// only, never biases, normalization gains, or embedding tables.
    pub fn is_decayed(name: &str) -> bool {
        let weight_suffix = [".wq", ".wk", ".wv", ".wo", ".w1", ".w2", ".w"]
            .iter()
            .any(|s| name.ends_with(s));
        weight_suffix && !name.starts_with("tok_emb") && !name.starts_with("pos_emb")
    }
}

/// Deterministic scaled-normal initialization: variance 1/d_model for
/// projections and embeddings, zeros for biases, ones for norm gains.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (cfg.d_model as f64).sqrt();
    let mut tensors: IndexMap<String, Arc<Array2<f64>>> = IndexMap::new();
    let mut normal = |name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng| {
        let t = Array2::from_shape_fn((r, c), |_| {
            // Box-Muller from two uniforms keeps init independent of
            // rand_distr internals
            let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std
        });
        tensors.insert(name.to_string(), Arc::new(t));
    };
    let d = cfg.d_model;
    normal("tok_emb", cfg.vocab_size, d, &mut rng);
    normal("pos_emb", cfg.max_positions, d, &mut rng);
    if cfg.variant == Variant::X {
        normal("value_proj.w", 1, d, &mut rng);
        normal("mask_flag", 1, d, &mut rng);
    }
    for l in 0..cfg.n_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            normal(&format!("l{l}.attn.{w}"), d, d, &mut rng);
        }
        normal(&format!("l{l}.ffn.w1"), d, cfg.d_ff, &mut rng);
        normal(&format!("l{l}.ffn.w2"), cfg.d_ff, d, &mut rng);
    }
    let mlm_out = match cfg.variant {
        Variant::G => cfg.vocab_size,
        Variant::X => 1,
    };
    normal("mlm_head.w", d, mlm_out, &mut rng);
    for cat in Category::ALL {
        normal(&format!("{}.w", cls_key(cat)), d, cfg.head_size(cat), &mut rng);
    }
    // zero biases and unit norm gains, declared after the random tensors so
    // their insertion order is stable
    let zeros = |name: &str, r: usize, c: usize, tensors: &mut IndexMap<String, Arc<Array2<f64>>>| {
        tensors.insert(name.to_string(), Arc::new(Array2::zeros((r, c))));
    };
    let ones = |name: &str, c: usize, tensors: &mut IndexMap<String, Arc<Array2<f64>>>| {
        tensors.insert(name.to_string(), Arc::new(Array2::ones((1, c))));
    };
    for l in 0..cfg.n_layers {
        for b in ["bq", "bk", "bv", "bo"] {
            zeros(&format!("l{l}.attn.{b}"), 1, d, &mut tensors);
        }
        zeros(&format!("l{l}.ffn.b1"), 1, cfg.d_ff, &mut tensors);
        zeros(&format!("l{l}.ffn.b2"), 1, d, &mut tensors);
        ones(&format!("l{l}.ln1.g"), d, &mut tensors);
        zeros(&format!("l{l}.ln1.b"), 1, d, &mut tensors);
        ones(&format!("l{l}.ln2.g"), d, &mut tensors);
        zeros(&format!("l{l}.ln2.b"), 1, d, &mut tensors);
    }
    ones("final_ln.g", d, &mut tensors);
    zeros("final_ln.b", 1, d, &mut tensors);
    zeros("mlm_head.b", 1, mlm_out, &mut tensors);
    for cat in Category::ALL {
        zeros(&format!("{}.b", cls_key(cat)), 1, cfg.head_size(cat), &mut tensors);
    }
    Ok(ModelParams { config: cfg.clone(), tensors })
}

/// Per-cell forward results.
#[derive(Debug, Clone)]
pub struct CellOutput {
    /// Final-layer hidden states, one row per (padded) position.
    pub hidden: Array2<f64>,
    /// G-variant: V-way logits at each masked position.
    pub mlm_logits: Option<Array2<f64>>,
    /// X-variant: predicted scalar at each masked position.
    pub mlm_preds: Option<Vec<f64>>,
    /// Classification logits at each attached prompt position.
    pub cls_logits: BTreeMap<Category, Vec<f64>>,
    /// Attention probability matrices (layer-major, head-minor), recorded on
    /// request.
    pub attn: Vec<Array2<f64>>,
}

/// Batch forward results.
#[derive(Debug, Clone)]
pub struct ModelOutputs {
    pub cells: Vec<CellOutput>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    pub record_attn: bool,
}

struct CellGraph {
    tape: Tape,
    output: CellOutput,
    hidden: NodeId,
    mlm_loss: NodeId,
    cls_losses: BTreeMap<Category, NodeId>,
}

/// Per-cell row of a [`MaskedBatch`] prepared for graph construction.
struct CellRow<'a> {
    tokens: &'a [u32],
    values: &'a [f64],
    attn: &'a [bool],
    value_masked: &'a [bool],
    masked_positions: &'a [usize],
    token_targets: &'a [u32],
    value_targets: &'a [f64],
    cls_targets: &'a BTreeMap<Category, (usize, usize)>,
}

fn build_cell_graph(
    params: &ModelParams,
    row: &CellRow<'_>,
    opts: ForwardOpts,
) -> Result<CellGraph> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = d / heads;
    let s = row.tokens.len();
    if let Some(&t) = row.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::ShapeMismatch(format!(
            "token id {t} exceeds vocab size {}",
            cfg.vocab_size
        )));
    }
    if s > cfg.max_positions {
        return Err(Error::ShapeMismatch(format!(
            "sequence length {s} exceeds max_positions {}",
            cfg.max_positions
        )));
    }

    let mut tape = Tape::new();
    let p = |name: &str| params.tensor(name).expect("tensor exists").clone();

    let tok_idx: Vec<usize> = row.tokens.iter().map(|&t| t as usize).collect();
    let pos_idx: Vec<usize> = (0..s).collect();
    let tok = tape.gather_param("tok_emb", &p("tok_emb"), &tok_idx);
    let pos = tape.gather_param("pos_emb", &p("pos_emb"), &pos_idx);
    let mut x = tape.add(tok, pos);
    if cfg.variant == Variant::X {
        let vp = tape.param("value_proj.w", p("value_proj.w"));
        let injected = tape.outer_scale(row.values, vp);
        x = tape.add(x, injected);
        let flags: Vec<f64> =
            row.value_masked.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        if flags.iter().any(|&f| f != 0.0) {
            let mf = tape.param("mask_flag", p("mask_flag"));
            let flagged = tape.outer_scale(&flags, mf);
            x = tape.add(x, flagged);
        }
    }

    // additive key mask: 0 at real positions, -inf at pads
    let mut mask_row = vec![0.0f64; s];
    for (j, &real) in row.attn.iter().enumerate() {
        if !real {
            mask_row[j] = NEG_INF;
        }
    }
    let attn_mask = tape.constant(Array2::from_shape_fn((s, s), |(_, j)| mask_row[j]));

    let mut attn_records = Vec::new();
    for l in 0..cfg.n_layers {
        let ln1g = tape.param(&format!("l{l}.ln1.g"), p(&format!("l{l}.ln1.g")));
        let ln1b = tape.param(&format!("l{l}.ln1.b"), p(&format!("l{l}.ln1.b")));
        let h1 = tape.layer_norm(x, ln1g, ln1b);
        let proj = |w: &str, b: &str, tape: &mut Tape| {
            let wn = tape.param(w, p(w));
            let bn = tape.param(b, p(b));
            let m = tape.matmul(h1, wn);
            tape.add_row(m, bn)
        };
        let q = proj(&format!("l{l}.attn.wq"), &format!("l{l}.attn.bq"), &mut tape);
        let k = proj(&format!("l{l}.attn.wk"), &format!("l{l}.attn.bk"), &mut tape);
        let v = proj(&format!("l{l}.attn.wv"), &format!("l{l}.attn.bv"), &mut tape);
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_t(qh, kh, false, true);
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = tape.add(scores, attn_mask);
            let probs = tape.softmax_rows(scores);
            if opts.record_attn {
                attn_records.push(tape.value(probs).clone());
            }
            head_outs.push(tape.matmul(probs, vh));
        }
        let concat = tape.concat_cols(&head_outs);
        let wo = tape.param(&format!("l{l}.attn.wo"), p(&format!("l{l}.attn.wo")));
        let bo = tape.param(&format!("l{l}.attn.bo"), p(&format!("l{l}.attn.bo")));
        let o = tape.matmul(concat, wo);
        let o = tape.add_row(o, bo);
        x = tape.add(x, o);

        let ln2g = tape.param(&format!("l{l}.ln2.g"), p(&format!("l{l}.ln2.g")));
        let ln2b = tape.param(&format!("l{l}.ln2.b"), p(&format!("l{l}.ln2.b")));
        let h2 = tape.layer_norm(x, ln2g, ln2b);
        let w1 = tape.param(&format!("l{l}.ffn.w1"), p(&format!("l{l}.ffn.w1")));
        let b1 = tape.param(&format!("l{l}.ffn.b1"), p(&format!("l{l}.ffn.b1")));
        let w2 = tape.param(&format!("l{l}.ffn.w2"), p(&format!("l{l}.ffn.w2")));
        let b2 = tape.param(&format!("l{l}.ffn.b2"), p(&format!("l{l}.ffn.b2")));
        let f = tape.matmul(h2, w1);
        let f = tape.add_row(f, b1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, b2);
        x = tape.add(x, f);
    }
    let fg = tape.param("final_ln.g", p("final_ln.g"));
    let fb = tape.param("final_ln.b", p("final_ln.b"));
    let hidden = tape.layer_norm(x, fg, fb);

    // masked-gene head
    let mlm_rows = tape.gather_rows(hidden, row.masked_positions);
    let mw = tape.param("mlm_head.w", p("mlm_head.w"));
    let mb = tape.param("mlm_head.b", p("mlm_head.b"));
    let mlm_proj = tape.matmul(mlm_rows, mw);
    let mlm_proj = tape.add_row(mlm_proj, mb);
    let (mlm_loss, mlm_logits, mlm_preds) = match params.config.variant {
        Variant::G => {
            let targets: Vec<usize> = row.token_targets.iter().map(|&t| t as usize).collect();
            let loss = tape.cross_entropy(mlm_proj, &targets);
            (loss, Some(tape.value(mlm_proj).clone()), None)
        }
        Variant::X => {
            let loss = tape.half_squared_error(mlm_proj, row.value_targets);
            let preds = tape.value(mlm_proj).column(0).to_vec();
            (loss, None, Some(preds))
        }
    };

    // classification heads at attached prompt positions
    let mut cls_losses = BTreeMap::new();
    let mut cls_logits = BTreeMap::new();
    for (&cat, &(pos, class_idx)) in row.cls_targets {
        let hrow = tape.gather_rows(hidden, &[pos]);
        let w = tape.param(&format!("{}.w", cls_key(cat)), p(&format!("{}.w", cls_key(cat))));
        let b = tape.param(&format!("{}.b", cls_key(cat)), p(&format!("{}.b", cls_key(cat))));
        let logits = tape.matmul(hrow, w);
        let logits = tape.add_row(logits, b);
        cls_logits.insert(cat, tape.value(logits).row(0).to_vec());
        cls_losses.insert(cat, tape.cross_entropy(logits, &[class_idx]));
    }

    let output = CellOutput {
        hidden: tape.value(hidden).clone(),
        mlm_logits,
        mlm_preds,
        cls_logits,
        attn: attn_records,
    };
    Ok(CellGraph { tape, output, hidden, mlm_loss, cls_losses })
}

fn cell_rows(batch: &MaskedBatch) -> Vec<CellRow<'_>> {
    (0..batch.n_cells())
        .map(|i| CellRow {
            tokens: &batch.tokens[i],
            values: &batch.values[i],
            attn: &batch.attn_mask[i],
            value_masked: &batch.value_masked[i],
            masked_positions: &batch.masked_positions[i],
            token_targets: &batch.mlm_token_targets[i],
            value_targets: &batch.mlm_value_targets[i],
            cls_targets: &batch.cls_targets[i],
        })
        .collect()
}

/// Bidirectional forward pass over a padded batch. Padded positions receive
/// zero attention weight and do not affect real positions.
pub fn forward(params: &ModelParams, batch: &MaskedBatch, opts: ForwardOpts) -> Result<ModelOutputs> {
    if batch.variant != params.config.variant {
        return Err(Error::ShapeMismatch("batch variant differs from model variant".into()));
    }
    let rows = cell_rows(batch);
    let cells: Result<Vec<CellOutput>> = rows
        .par_iter()
        .map(|row| build_cell_graph(params, row, opts).map(|g| g.output))
        .collect();
    Ok(ModelOutputs { cells: cells? })
}

fn log_softmax_pick(logits: &Array2<f64>, row: usize, target: usize) -> f64 {
    let r = logits.row(row);
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = r.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    r[target] - lse
}

/// G-variant MLM loss: mean over cells of the per-cell mean over masked
/// positions of -log softmax(logits)[target].
pub fn mlm_g_loss(outputs: &ModelOutputs, batch: &MaskedBatch) -> f64 {
    assert_eq!(batch.variant, Variant::G);
    let mut total = 0.0;
    for (cell, out) in outputs.cells.iter().enumerate() {
        let logits = out.mlm_logits.as_ref().expect("G-variant outputs");
        let targets = &batch.mlm_token_targets[cell];
        let mut cell_loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            cell_loss -= log_softmax_pick(logits, i, t as usize);
        }
        total += cell_loss / targets.len() as f64;
    }
    total / outputs.cells.len() as f64
}

/// X-variant MLM loss: mean over cells of the per-cell mean over masked
/// positions of 0.5 (r - f)^2 (the constant 0.5 ln 2 pi is dropped).
pub fn mlm_x_loss(outputs: &ModelOutputs, batch: &MaskedBatch) -> f64 {
    assert_eq!(batch.variant, Variant::X);
    let mut total = 0.0;
    for (cell, out) in outputs.cells.iter().enumerate() {
        let preds = out.mlm_preds.as_ref().expect("X-variant outputs");
        let targets = &batch.mlm_value_targets[cell];
        let mut cell_loss = 0.0;
        for (&p, &t) in preds.iter().zip(targets) {
            cell_loss += 0.5 * (p - t) * (p - t);
        }
        total += cell_loss / targets.len() as f64;
    }
    total / outputs.cells.len() as f64
}

/// Annotation loss: sum over categories of the mean cross-entropy over cells
/// where that prompt is attached with a known target; absent categories
/// contribute 0.
pub fn cls_loss(outputs: &ModelOutputs, batch: &MaskedBatch) -> f64 {
    let mut total = 0.0;
    for cat in Category::ALL {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (cell, out) in outputs.cells.iter().enumerate() {
            if let (Some(logits), Some(&(_, class_idx))) =
                (out.cls_logits.get(&cat), batch.cls_targets[cell].get(&cat))
            {
                let row = Array2::from_shape_vec((1, logits.len()), logits.clone()).unwrap();
                sum -= log_softmax_pick(&row, 0, class_idx);
                n += 1;
            }
        }
        if n > 0 {
            total += sum / n as f64;
        }
    }
    total
}

/// Composite pre-training objective: MLM loss plus annotation loss, unit
/// weights by default.
pub fn pretrain_loss(outputs: &ModelOutputs, batch: &MaskedBatch) -> f64 {
    pretrain_loss_weighted(outputs, batch, 1.0, 1.0)
}

pub fn pretrain_loss_weighted(
    outputs: &ModelOutputs,
    batch: &MaskedBatch,
    w_mlm: f64,
    w_cls: f64,
) -> f64 {
    let mlm = match batch.variant {
        Variant::G => mlm_g_loss(outputs, batch),
        Variant::X => mlm_x_loss(outputs, batch),
    };
    w_mlm * mlm + w_cls * cls_loss(outputs, batch)
}

/// Loss components reported by [`backward`] and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub mlm: f64,
    pub cls: f64,
}

/// Gradient of the (weighted) pre-training loss with respect to every
/// parameter tensor. Per-cell graphs run in parallel; gradients reduce in
/// cell order so the result is independent of thread count.
pub fn backward(
    params: &ModelParams,
    batch: &MaskedBatch,
    w_mlm: f64,
    w_cls: f64,
) -> Result<(LossReport, GradStore)> {
    let rows = cell_rows(batch);
    let n = rows.len() as f64;
    // attached-prompt counts per category determine each cell's share of the
    // per-category mean
    let mut cat_counts: BTreeMap<Category, usize> = BTreeMap::new();
    for row in &rows {
        for &cat in row.cls_targets.keys() {
            *cat_counts.entry(cat).or_insert(0) += 1;
        }
    }

    let per_cell: Result<Vec<(f64, BTreeMap<Category, f64>, GradStore)>> = rows
        .par_iter()
        .map(|row| {
            let mut g = build_cell_graph(params, row, ForwardOpts::default())?;
            let mut terms = vec![(g.mlm_loss, w_mlm / n)];
            for (&cat, &node) in &g.cls_losses {
                terms.push((node, w_cls / cat_counts[&cat] as f64));
            }
            let total = g.tape.weighted_sum(&terms);
            let mut store = GradStore::default();
            g.tape.backward(total, 1.0, &mut store);
            let cls_vals: BTreeMap<Category, f64> =
                g.cls_losses.iter().map(|(&c, &n)| (c, g.tape.scalar(n))).collect();
            Ok((g.tape.scalar(g.mlm_loss), cls_vals, store))
        })
        .collect();

    let mut grads = GradStore::default();
    let mut mlm_total = 0.0;
    let mut cls_sums: BTreeMap<Category, f64> = BTreeMap::new();
    for (mlm, cls_vals, store) in per_cell? {
        mlm_total += mlm / n;
        for (cat, v) in cls_vals {
            *cls_sums.entry(cat).or_insert(0.0) += v;
        }
        grads.add_assign(&store);
    }
    let cls_total: f64 =
        cls_sums.iter().map(|(cat, sum)| sum / cat_counts[cat] as f64).sum();
    let report = LossReport {
        total: w_mlm * mlm_total + w_cls * cls_total,
        mlm: mlm_total,
        cls: cls_total,
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite { tensor: "loss".into() });
    }
    for (name, g) in grads.iter() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { tensor: name.to_string() });
        }
    }
    Ok((report, grads))
}

/// Zero-shot cell embedding: mean of final-layer hidden states over gene
/// positions only (prompt and pad positions excluded). No masking applied.
pub fn embed_cell(params: &ModelParams, tc: &TokenizedCell) -> Result<Vec<f64>> {
    Ok(embed_cells(params, std::slice::from_ref(tc))?.remove(0))
}

/// Batched [`embed_cell`]; each cell is embedded independently.
pub fn embed_cells(params: &ModelParams, cells: &[TokenizedCell]) -> Result<Vec<Vec<f64>>> {
    cells
        .par_iter()
        .map(|tc| {
            if tc.gene_tokens.is_empty() {
                return Err(Error::EmptyCell);
            }
            let p = tc.prompts.len();
            let len = tc.seq_len();
            let mut tokens = Vec::with_capacity(len);
            for &cat in &tc.prompts {
                tokens.push(crate::tokenizer::vocab::prompt_token(cat));
            }
            tokens.extend_from_slice(&tc.gene_tokens);
            let mut values = vec![0.0f64; len];
            if params.config.variant == Variant::X {
                for (k, &v) in tc.values.iter().enumerate() {
                    values[p + k] = v as f64;
                }
            }
            let attn = vec![true; len];
            let value_masked = vec![false; len];
            let row = CellRow {
                tokens: &tokens,
                values: &values,
                attn: &attn,
                value_masked: &value_masked,
                masked_positions: &[p], // placeholder so the head has a row
                token_targets: &[0],
                value_targets: &[0.0],
                cls_targets: &BTreeMap::new(),
            };
            let g = build_cell_graph(params, &row, ForwardOpts::default())?;
            let gene_rows: Vec<usize> = (p..len).collect();
            let mut mean = vec![0.0f64; params.config.d_model];
            for &r in &gene_rows {
                for (m, &h) in mean.iter_mut().zip(g.output.hidden.row(r)) {
                    *m += h;
                }
            }
            for m in &mut mean {
                *m /= gene_rows.len() as f64;
            }
            Ok(mean)
        })
        .collect()
}

/// Mean-pooled hidden state over gene positions for every cell of a masked
/// batch graph; used by fine-tuning. Returns (pooled node, tape) per cell.
pub(crate) fn pooled_graph(
    params: &ModelParams,
    row_tokens: &[u32],
    row_values: &[f64],
    prompt_len: usize,
) -> Result<(Tape, NodeId)> {
    let len = row_tokens.len();
    let attn = vec![true; len];
    let value_masked = vec![false; len];
    let row = CellRow {
        tokens: row_tokens,
        values: row_values,
        attn: &attn,
        value_masked: &value_masked,
        masked_positions: &[prompt_len],
        token_targets: &[0],
        value_targets: &[0.0],
        cls_targets: &BTreeMap::new(),
    };
    let g = build_cell_graph(params, &row, ForwardOpts::default())?;
    let mut tape = g.tape;
    let gene_rows: Vec<usize> = (prompt_len..len).collect();
    let pooled = tape.mean_rows(g.hidden, &gene_rows);
    Ok((tape, pooled))
}

/// Row-wise mean-pooled embedding over gene positions, computed outside any
/// tape (convenience for metrics).
pub fn mean_pool(hidden: &Array2<f64>, prompt_len: usize, seq_len: usize) -> Vec<f64> {
    let rows: Vec<usize> = (prompt_len..seq_len).collect();
    let mut mean = vec![0.0; hidden.ncols()];
    for &r in &rows {
        for (m, &h) in mean.iter_mut().zip(hidden.row(r)) {
            *m += h;
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    mean
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

//! Cell encoding: rank ordering, scaled-rank values, class-balanced
//! annotation prompts, and MLM masking.

pub mod shards;
pub mod vocab;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CellMeta, Category, CountMatrix};
use crate::normalize::GeneMedianDictionary;
use crate::{Error, Result};

pub use shards::{read_shards, write_shards};
pub use vocab::{build_vocabulary, Vocabulary, MASK, NUM_SPECIALS, PAD};

/// Default context length (gene positions per cell).
pub const DEFAULT_CONTEXT_LEN: usize = 2048;
/// Default MLM mask rate.
pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// Encoding variant: gene-identity MLM targets vs scaled-rank value targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    G,
    X,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "g" => Ok(Variant::G),
            "x" => Ok(Variant::X),
            other => Err(Error::InvalidInput(format!("unknown variant {other:?}, expected g|x"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::G => "g",
            Variant::X => "x",
        })
    }
}

/// A cell encoded as ordered gene tokens, optionally with scaled-rank values,
/// plus annotation prompt state.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedCell {
    /// Prompt categories attached this pass, in fixed order.
    pub prompts: Vec<Category>,
    /// Label token id per category with a known label (attached or not).
    pub targets: BTreeMap<Category, u32>,
    /// Gene token ids, strictly by descending median-scaled expression,
    /// ties broken by ascending token id; length J <= context_len.
    pub gene_tokens: Vec<u32>,
    /// X-variant scaled ranks aligned with `gene_tokens`; empty for G.
    pub values: Vec<f32>,
}

impl TokenizedCell {
    pub fn seq_len(&self) -> usize {
        self.prompts.len() + self.gene_tokens.len()
    }
}

fn ordered_genes(scaled: &[(u32, f64)], vocab: &Vocabulary, context_len: usize) -> Result<Vec<u32>> {
    if scaled.is_empty() {
        return Err(Error::EmptyCell);
    }
    let mut pairs: Vec<(u32, f64)> =
        scaled.iter().map(|&(g, v)| (vocab.gene_token(g), v)).collect();
    pairs.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite expression values")
            .then(a.0.cmp(&b.0))
    });
    pairs.truncate(context_len);
    Ok(pairs.into_iter().map(|(t, _)| t).collect())
}

/// G-variant encoding: gene tokens ordered by descending scaled expression.
pub fn encode_rank(
    scaled: &[(u32, f64)],
    vocab: &Vocabulary,
    context_len: usize,
) -> Result<TokenizedCell> {
    Ok(TokenizedCell {
        prompts: Vec::new(),
        targets: BTreeMap::new(),
        gene_tokens: ordered_genes(scaled, vocab, context_len)?,
        values: Vec::new(),
    })
}

/// X-variant encoding: same ordering, plus ranks scaled linearly to [-1, 1]
/// over the retained window (+1 for the most expressed, -1 for the least;
/// a single-gene cell gets +1).
pub fn encode_value(
    scaled: &[(u32, f64)],
    vocab: &Vocabulary,
    context_len: usize,
) -> Result<TokenizedCell> {
    let gene_tokens = ordered_genes(scaled, vocab, context_len)?;
    let j = gene_tokens.len();
    let values: Vec<f32> = if j == 1 {
        vec![1.0]
    } else {
        (0..j).map(|k| (1.0 - 2.0 * k as f64 / (j - 1) as f64) as f32).collect()
    };
    Ok(TokenizedCell {
        prompts: Vec::new(),
        targets: BTreeMap::new(),
        gene_tokens,
        values,
    })
}

/// Inclusion probability per label: q(label) = min_count / count(label).
/// The rarest label is always included; the expected marginal over included
/// labels is uniform.
pub fn class_balance_probs(label_counts: &BTreeMap<String, u64>) -> BTreeMap<String, f64> {
    let min = label_counts.values().copied().min().unwrap_or(0);
    assert!(min > 0, "labels with zero count must be excluded upstream");
    label_counts
        .iter()
        .map(|(label, &count)| (label.clone(), min as f64 / count as f64))
        .collect()
}

/// Per-category label inclusion probabilities built from corpus label counts.
#[derive(Debug, Clone, Default)]
pub struct BalanceTables {
    per_category: BTreeMap<Category, BTreeMap<String, f64>>,
}

impl BalanceTables {
    /// Count labels over the corpus and derive inclusion probabilities.
    pub fn from_corpus(corpus: &CountMatrix) -> BalanceTables {
        let mut per_category = BTreeMap::new();
        for cat in Category::ALL {
            let mut counts: BTreeMap<String, u64> = BTreeMap::new();
            for cell in &corpus.cells {
                if let Some(label) = cell.labels.get(&cat) {
                    *counts.entry(label.clone()).or_insert(0) += 1;
                }
            }
            if !counts.is_empty() {
                per_category.insert(cat, class_balance_probs(&counts));
            }
        }
        BalanceTables { per_category }
    }

    /// Attach-everything tables (q = 1 for every label), used for
    /// deterministic evaluation.
    pub fn always() -> BalanceTables {
        BalanceTables::default()
    }

    pub fn prob(&self, cat: Category, label: &str) -> f64 {
        self.per_category
            .get(&cat)
            .and_then(|m| m.get(label))
            .copied()
            .unwrap_or(1.0)
    }
}

/// Record the cell's known labels as targets and sample which prompt tokens
/// to attach, independently per category with probability q(label).
/// Attached prompts keep the fixed order disease, tissue_type, cell_type, sex.
pub fn attach_annotations(
    tc: &mut TokenizedCell,
    meta: &CellMeta,
    vocab: &Vocabulary,
    probs: &BalanceTables,
    rng: &mut ChaCha8Rng,
) {
    tc.targets.clear();
    for cat in Category::ALL {
        if let Some(label) = meta.labels.get(&cat) {
            if let Some(token) = vocab.label_token(cat, label) {
                tc.targets.insert(cat, token);
            }
        }
    }
    resample_prompts(tc, vocab, probs, rng);
}

/// Re-draw the attached prompt subset from the stored targets; categories
/// with absent labels are never attached.
pub fn resample_prompts(
    tc: &mut TokenizedCell,
    vocab: &Vocabulary,
    probs: &BalanceTables,
    rng: &mut ChaCha8Rng,
) {
    tc.prompts.clear();
    for cat in Category::ALL {
        if let Some(&token) = tc.targets.get(&cat) {
            let label = vocab.label_string_of_token(token).unwrap_or_default().to_string();
            let q = probs.prob(cat, &label);
            if rng.gen::<f64>() < q {
                tc.prompts.push(cat);
            }
        }
    }
}

/// A padded, masked batch ready for the model.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub variant: Variant,
    pub max_len: usize,
    /// Token id matrix, one padded row per cell.
    pub tokens: Vec<Vec<u32>>,
    /// Value channel (X-variant): 0.0 at masked, prompt, and pad positions.
    pub values: Vec<Vec<f64>>,
    /// True at real (unpadded) positions.
    pub attn_mask: Vec<Vec<bool>>,
    /// Number of prompt positions at the head of each row.
    pub prompt_len: Vec<usize>,
    /// Masked gene positions (absolute indices into the padded row).
    pub masked_positions: Vec<Vec<usize>>,
    /// G-variant: original gene token at each masked position.
    pub mlm_token_targets: Vec<Vec<u32>>,
    /// X-variant: scaled rank at each masked position.
    pub mlm_value_targets: Vec<Vec<f64>>,
    /// X-variant: mask-flag channel per position.
    pub value_masked: Vec<Vec<bool>>,
    /// Per cell: category -> (prompt position, class index within category).
    pub cls_targets: Vec<BTreeMap<Category, (usize, usize)>>,
}

impl MaskedBatch {
    pub fn n_cells(&self) -> usize {
        self.tokens.len()
    }

    pub fn total_masked(&self) -> usize {
        self.masked_positions.iter().map(|m| m.len()).sum()
    }
}

/// Deterministic per-cell RNG: all stochastic choices for a cell derive from
/// (seed, step, ordinal, purpose), so results are independent of worker
/// scheduling and batch decomposition.
pub fn cell_rng(seed: u64, step: u64, ordinal: u64, purpose: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(step.to_le_bytes());
    h.update(ordinal.to_le_bytes());
    h.update(purpose.to_le_bytes());
    let digest = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

/// Purpose tags for [`cell_rng`].
pub mod rng_purpose {
    pub const MASK: u64 = 1;
    pub const PROMPTS: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DROPOUT: u64 = 4;
}

/// Mask gene positions i.i.d. at `rate`; a cell drawing zero masks gets its
/// single highest-index gene position forced in. Prompt positions are never
/// masked. G-variant replaces the token with `<mask>`; X-variant keeps the
/// token and masks only the value channel.
pub fn mask(
    batch: &[TokenizedCell],
    variant: Variant,
    rate: f64,
    vocab: &Vocabulary,
    seed: u64,
    step: u64,
) -> MaskedBatch {
    assert!(rate > 0.0 && rate < 1.0, "mask rate must be in (0, 1)");
    let max_len = batch.iter().map(TokenizedCell::seq_len).max().unwrap_or(0);
    let n = batch.len();
    let mut out = MaskedBatch {
        variant,
        max_len,
        tokens: Vec::with_capacity(n),
        values: Vec::with_capacity(n),
        attn_mask: Vec::with_capacity(n),
        prompt_len: Vec::with_capacity(n),
        masked_positions: Vec::with_capacity(n),
        mlm_token_targets: Vec::with_capacity(n),
        mlm_value_targets: Vec::with_capacity(n),
        value_masked: Vec::with_capacity(n),
        cls_targets: Vec::with_capacity(n),
    };
    for (ordinal, tc) in batch.iter().enumerate() {
        let mut rng = cell_rng(seed, step, ordinal as u64, rng_purpose::MASK);
        let p = tc.prompts.len();
        let j = tc.gene_tokens.len();
        let len = p + j;

        let mut tokens = vec![PAD; max_len];
        let mut values = vec![0.0f64; max_len];
        let mut attn = vec![false; max_len];
        let mut vmask = vec![false; max_len];
        let mut cls = BTreeMap::new();
        for (i, &cat) in tc.prompts.iter().enumerate() {
            tokens[i] = vocab::prompt_token(cat);
            attn[i] = true;
            if let Some(&label_token) = tc.targets.get(&cat) {
                if let Some((c, class_idx)) = vocab.label_of_token(label_token) {
                    debug_assert_eq!(c, cat);
                    cls.insert(cat, (i, class_idx));
                }
            }
        }
        for (k, &t) in tc.gene_tokens.iter().enumerate() {
            tokens[p + k] = t;
            attn[p + k] = true;
            if variant == Variant::X {
                values[p + k] = tc.values[k] as f64;
            }
        }

        let mut masked: Vec<usize> = (0..j).filter(|_| rng.gen::<f64>() < rate).collect();
        if masked.is_empty() && j > 0 {
            masked.push(j - 1);
        }

        let mut token_targets = Vec::with_capacity(masked.len());
        let mut value_targets = Vec::with_capacity(masked.len());
        let mut positions = Vec::with_capacity(masked.len());
        for &k in &masked {
            let pos = p + k;
            positions.push(pos);
            match variant {
                Variant::G => {
                    token_targets.push(tc.gene_tokens[k]);
                    tokens[pos] = MASK;
                }
                Variant::X => {
                    value_targets.push(tc.values[k] as f64);
                    values[pos] = 0.0;
                    vmask[pos] = true;
                }
            }
        }

        debug_assert!(positions.iter().all(|&pos| pos >= p && pos < len));
        out.tokens.push(tokens);
        out.values.push(values);
        out.attn_mask.push(attn);
        out.prompt_len.push(p);
        out.masked_positions.push(positions);
        out.mlm_token_targets.push(token_targets);
        out.mlm_value_targets.push(value_targets);
        out.value_masked.push(vmask);
        out.cls_targets.push(cls);
    }
    out
}

/// Encode every corpus cell under the given variant, recording annotation
/// targets from cell metadata (prompts are sampled later, per training step).
pub fn tokenize_corpus(
    corpus: &CountMatrix,
    dict: &GeneMedianDictionary,
    vocab: &Vocabulary,
    variant: Variant,
    context_len: usize,
) -> Result<Vec<TokenizedCell>> {
    let by_idx = dict.by_gene_index(corpus);
    let mut out = Vec::with_capacity(corpus.n_cells);
    for cell in 0..corpus.n_cells {
        let scaled = crate::normalize::normalized_cell(corpus, cell, &by_idx)?;
        let mut tc = match variant {
            Variant::G => encode_rank(&scaled, vocab, context_len)?,
            Variant::X => encode_value(&scaled, vocab, context_len)?,
        };
        for cat in Category::ALL {
            if let Some(label) = corpus.cells[cell].labels.get(&cat) {
                if let Some(token) = vocab.label_token(cat, label) {
                    tc.targets.insert(cat, token);
                }
            }
        }
        out.push(tc);
    }
    Ok(out)
}

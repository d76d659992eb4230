//! Donor-disjoint evaluation harness: held-out-diseases and held-out-donors
//! task construction, fine-tuning and linear probing of pre-trained models,
//! a classical logistic-regression baseline over highly variable genes, and
//! accuracy / class-weighted F1 reporting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::GradStore;
use crate::corpus::{Category, CountMatrix};
use crate::model::checkpoint::OptState;
use crate::model::{self, ModelParams};
use crate::normalize::DEPTH_TARGET;
use crate::tokenizer::{cell_rng, TokenizedCell, Variant};
use crate::train::{adamw_step, TrainConfig};
use crate::{Error, Result};

/// RNG purposes local to the benchmark harness (disjoint from the
/// tokenizer's tags).
mod purpose {
    pub const SUBSAMPLE: u64 = 101;
    pub const SUBSPLIT: u64 = 102;
    pub const DONOR_SPLIT: u64 = 103;
    pub const FT_SHUFFLE: u64 = 104;
}

/// Disease label meaning "not diseased" in the default annotation schema.
pub const HEALTHY_LABEL: &str = "healthy";

/// Learning rates swept during fine-tuning and probing, ascending.
pub const LR_CANDIDATES: [f64; 6] = [2e-5, 5e-5, 1e-4, 2e-4, 5e-4, 1e-3];

/// Default number of mean-expression bins for dispersion normalization.
const HVG_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    HeldOutDiseases,
    HeldOutDonors,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::HeldOutDiseases => "held_out_diseases",
            TaskKind::HeldOutDonors => "held_out_donors",
        }
    }
}

/// One train/val/test split; entries index into [`EvalTask::cell_ids`].
#[derive(Debug, Clone, Default)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// A benchmark task: a label space, the participating cells with their
/// labels and donors, and donor-disjoint folds.
#[derive(Debug, Clone)]
pub struct EvalTask {
    pub kind: TaskKind,
    /// Label space; index = class id.
    pub labels: Vec<String>,
    pub cell_ids: Vec<String>,
    pub cell_donors: Vec<String>,
    /// Class id per cell.
    pub cell_labels: Vec<usize>,
    pub folds: Vec<Fold>,
}

impl EvalTask {
    /// Verify that train/val/test donor sets are pairwise disjoint in every
    /// fold.
    pub fn check_donor_disjoint(&self) -> Result<()> {
        for fold in &self.folds {
            let donors = |idx: &[usize]| -> HashSet<&str> {
                idx.iter().map(|&c| self.cell_donors[c].as_str()).collect()
            };
            let tr = donors(&fold.train);
            let va = donors(&fold.val);
            let te = donors(&fold.test);
            let mut overlap: Vec<String> = tr
                .intersection(&va)
                .chain(tr.intersection(&te))
                .chain(va.intersection(&te))
                .map(|s| s.to_string())
                .collect();
            if !overlap.is_empty() {
                overlap.sort();
                overlap.dedup();
                return Err(Error::DonorOverlap(overlap));
            }
        }
        Ok(())
    }

    /// Class counts over a split.
    pub fn class_counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut counts = vec![0usize; self.labels.len()];
        for &c in idx {
            counts[self.cell_labels[c]] += 1;
        }
        counts
    }

    fn check_nonempty(&self) -> Result<()> {
        for (i, f) in self.folds.iter().enumerate() {
            if f.train.is_empty() || f.val.is_empty() || f.test.is_empty() {
                return Err(Error::InvalidInput(format!("fold {i} has an empty split")));
            }
        }
        Ok(())
    }
}

/// Uniformly subsample the majority class of a binary-labeled index set so
/// both classes have equal counts.
fn subsample_to_balance(
    idx: &mut Vec<usize>,
    labels: &[usize],
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &c in idx.iter() {
        by_class[labels[c]].push(c);
    }
    let keep = by_class[0].len().min(by_class[1].len());
    let mut out = Vec::with_capacity(2 * keep);
    for class in &mut by_class {
        class.shuffle(rng);
        class.truncate(keep);
        out.extend_from_slice(class);
    }
    out.sort_unstable();
    *idx = out;
}

/// Donor-disjoint k-fold task for binary healthy-vs-diseased classification.
///
/// Donors are greedily dealt into k groups balancing per-class cell counts;
/// each group serves once as a test fold. Test and train sets are 50/50
/// class-balanced by uniform subsampling of the majority class, and train
/// donors are further split 80/20 into train/val sub-splits.
pub fn build_disease_folds(data: &CountMatrix, k: usize, seed: u64) -> Result<EvalTask> {
    if k < 2 {
        return Err(Error::InvalidInput("need at least 2 folds".into()));
    }
    // class 0 = diseased, 1 = healthy; cells without a disease label are
    // excluded
    let labels = vec!["diseased".to_string(), HEALTHY_LABEL.to_string()];
    let mut cell_ids = Vec::new();
    let mut cell_donors = Vec::new();
    let mut cell_labels = Vec::new();
    for meta in &data.cells {
        if let Some(d) = meta.labels.get(&Category::Disease) {
            cell_ids.push(meta.cell_id.clone());
            cell_donors.push(meta.donor_id.clone());
            cell_labels.push(usize::from(d == HEALTHY_LABEL));
        }
    }
    if cell_ids.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    // per-donor class tallies, deterministic order
    let mut tallies: BTreeMap<&str, [usize; 2]> = BTreeMap::new();
    for (c, donor) in cell_donors.iter().enumerate() {
        tallies.entry(donor.as_str())
            .or_insert([0, 0])[cell_labels[c]] += 1;
    }
    for class in 0..2 {
        let n = tallies.values().filter(|t| t[class] > 0).count();
        if n < k {
            return Err(Error::InvalidInput(format!(
                "class {:?} has {n} donors, need at least {k} for {k}-fold splits",
                labels[class]
            )));
        }
    }

    // deal donors (majority-diseased first, largest first) to the group with
    // the fewest cells of the donor's majority class
    let mut donors: Vec<(&str, [usize; 2])> = tallies.into_iter().collect();
    donors.sort_by(|a, b| {
        let (ta, tb) = (a.1[0] + a.1[1], b.1[0] + b.1[1]);
        tb.cmp(&ta).then(a.0.cmp(b.0))
    });
    let mut group_of: HashMap<&str, usize> = HashMap::new();
    let mut group_tallies = vec![[0usize; 2]; k];
    for &(donor, t) in &donors {
        let major = usize::from(t[1] > t[0]);
        let g = (0..k)
            .min_by_key(|&g| (group_tallies[g][major], group_tallies[g][0] + group_tallies[g][1], g))
            .unwrap();
        group_tallies[g][0] += t[0];
        group_tallies[g][1] += t[1];
        group_of.insert(donor, g);
    }

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let mut test: Vec<usize> = (0..cell_ids.len())
            .filter(|&c| group_of[cell_donors[c].as_str()] == f)
            .collect();
        let mut pool: Vec<usize> = (0..cell_ids.len())
            .filter(|&c| group_of[cell_donors[c].as_str()] != f)
            .collect();
        let mut rng = cell_rng(seed, f as u64, 0, purpose::SUBSAMPLE);
        subsample_to_balance(&mut test, &cell_labels, &mut rng);
        subsample_to_balance(&mut pool, &cell_labels, &mut rng);

        // 80/20 donor-disjoint train/val sub-split of the pool
        let mut pool_donors: Vec<&str> = {
            let set: HashSet<&str> = pool.iter().map(|&c| cell_donors[c].as_str()).collect();
            let mut v: Vec<&str> = set.into_iter().collect();
            v.sort();
            v
        };
        let mut rng = cell_rng(seed, f as u64, 0, purpose::SUBSPLIT);
        pool_donors.shuffle(&mut rng);
        let n_train = ((pool_donors.len() as f64) * 0.8).round() as usize;
        let n_train = n_train.clamp(1, pool_donors.len().saturating_sub(1).max(1));
        let train_donors: HashSet<&str> = pool_donors[..n_train].iter().copied().collect();
        let (train, val): (Vec<usize>, Vec<usize>) = pool
            .into_iter()
            .partition(|&c| train_donors.contains(cell_donors[c].as_str()));
        folds.push(Fold { train, val, test });
    }

    let task = EvalTask {
        kind: TaskKind::HeldOutDiseases,
        labels,
        cell_ids,
        cell_donors,
        cell_labels,
        folds,
    };
    task.check_donor_disjoint()?;
    Ok(task)
}

/// Held-out-donors task: donor-level train/val split of the training corpus
/// plus the entire held-out corpus as the test set, classifying the disease
/// condition (multi-way over the union of observed labels).
pub fn build_donor_task(
    train_data: &CountMatrix,
    heldout_data: &CountMatrix,
    train_frac: f64,
    seed: u64,
) -> Result<EvalTask> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidInput("train_frac must be in (0, 1)".into()));
    }
    let train_donors: HashSet<String> = train_data.donors().into_iter().collect();
    let mut overlap: Vec<String> = heldout_data
        .donors()
        .into_iter()
        .filter(|d| train_donors.contains(d))
        .collect();
    if !overlap.is_empty() {
        overlap.sort();
        return Err(Error::DonorOverlap(overlap));
    }

    // label space: union of disease conditions, sorted
    let mut label_set: HashSet<&str> = HashSet::new();
    for meta in train_data.cells.iter().chain(&heldout_data.cells) {
        if let Some(d) = meta.labels.get(&Category::Disease) {
            label_set.insert(d.as_str());
        }
    }
    let mut labels: Vec<String> = label_set.into_iter().map(str::to_string).collect();
    labels.sort();
    if labels.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let label_idx: HashMap<&str, usize> =
        labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();

    let mut cell_ids = Vec::new();
    let mut cell_donors = Vec::new();
    let mut cell_labels = Vec::new();
    let mut from_train = Vec::new();
    for (is_train, corpus) in [(true, train_data), (false, heldout_data)] {
        for meta in &corpus.cells {
            if let Some(d) = meta.labels.get(&Category::Disease) {
                cell_ids.push(meta.cell_id.clone());
                cell_donors.push(meta.donor_id.clone());
                cell_labels.push(label_idx[d.as_str()]);
                from_train.push(is_train);
            }
        }
    }

    // donor-level train/val split of the training corpus
    let mut donors: Vec<String> = {
        let set: HashSet<&str> = cell_donors
            .iter()
            .zip(&from_train)
            .filter(|(_, &t)| t)
            .map(|(d, _)| d.as_str())
            .collect();
        let mut v: Vec<String> = set.into_iter().map(str::to_string).collect();
        v.sort();
        v
    };
    if donors.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 training donors".into()));
    }
    let mut rng = cell_rng(seed, 0, 0, purpose::DONOR_SPLIT);
    donors.shuffle(&mut rng);
    let n_train = ((donors.len() as f64) * train_frac).round() as usize;
    let n_train = n_train.clamp(1, donors.len() - 1);
    let split_train: HashSet<&str> = donors[..n_train].iter().map(String::as_str).collect();

    let mut fold = Fold::default();
    for c in 0..cell_ids.len() {
        if !from_train[c] {
            fold.test.push(c);
        } else if split_train.contains(cell_donors[c].as_str()) {
            fold.train.push(c);
        } else {
            fold.val.push(c);
        }
    }
    let task = EvalTask {
        kind: TaskKind::HeldOutDonors,
        labels,
        cell_ids,
        cell_donors,
        cell_labels,
        folds: vec![fold],
    };
    task.check_donor_disjoint()?;
    Ok(task)
}

/// Write the task definition file: `cell_id  fold  split  label`.
pub fn save_task(task: &EvalTask, path: &Path) -> Result<()> {
    let mut out = String::from("cell_id\tfold\tsplit\tlabel\n");
    for (f, fold) in task.folds.iter().enumerate() {
        for (split, idx) in [("train", &fold.train), ("val", &fold.val), ("test", &fold.test)] {
            for &c in idx {
                out.push_str(&format!(
                    "{}\t{f}\t{split}\t{}\n",
                    task.cell_ids[c], task.labels[task.cell_labels[c]]
                ));
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// Support-weighted mean of per-class F1.
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Exact-match accuracy plus per-class precision/recall/F1 with the 0/0 -> 0
/// convention and support-weighted F1.
pub fn evaluate(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidInput("no predictions to evaluate".into()));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::InvalidInput(format!(
            "class id {bad} outside label space of size {n_classes}"
        )));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut correct = 0usize;
    for (&p, &t) in predictions.iter().zip(labels) {
        confusion[t][p] += 1;
        correct += usize::from(p == t);
    }
    let n = labels.len();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut per_class = Vec::with_capacity(n_classes);
    let mut weighted_f1 = 0.0;
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..n_classes).map(|t| confusion[t][c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        weighted_f1 += (support as f64 / n as f64) * f1;
        per_class.push(ClassMetrics { precision, recall, f1, support });
    }
    Ok(Metrics { accuracy: correct as f64 / n as f64, weighted_f1, per_class })
}

/// Result of one (fold, seed) arm after learning-rate selection.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub fold: usize,
    pub seed: u64,
    pub chosen_lr: f64,
    pub metrics: Metrics,
}

/// Cross-fold/seed aggregate: mean and sample standard deviation.
#[derive(Debug, Clone)]
pub struct TaskMetrics {
    pub runs: Vec<RunMetrics>,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub mean_weighted_f1: f64,
    pub sd_weighted_f1: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl TaskMetrics {
    pub fn from_runs(runs: Vec<RunMetrics>) -> TaskMetrics {
        let accs: Vec<f64> = runs.iter().map(|r| r.metrics.accuracy).collect();
        let f1s: Vec<f64> = runs.iter().map(|r| r.metrics.weighted_f1).collect();
        let (mean_accuracy, sd_accuracy) = mean_sd(&accs);
        let (mean_weighted_f1, sd_weighted_f1) = mean_sd(&f1s);
        TaskMetrics { runs, mean_accuracy, sd_accuracy, mean_weighted_f1, sd_weighted_f1 }
    }
}

// ---------------------------------------------------------------------------
// Multinomial logistic regression by full-batch gradient descent (shared by
// the linear probe and the classical baseline)

/// Train softmax regression with optional L2 penalty. Returns weights of
/// shape [d+1, C]; the last row is the bias (never regularized). Zero
/// initialization makes the result deterministic.
pub fn softmax_regression(
    x: &Array2<f64>,
    y: &[usize],
    n_classes: usize,
    lr: f64,
    l2: f64,
    iters: usize,
) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n == 0 || n != y.len() {
        return Err(Error::ShapeMismatch(format!("{n} feature rows vs {} labels", y.len())));
    }
    let d = x.ncols();
    let mut w = Array2::<f64>::zeros((d + 1, n_classes));
    let mut probs = Array2::<f64>::zeros((n, n_classes));
    for _ in 0..iters {
        // forward: logits = x.w + bias row
        for i in 0..n {
            let mut row = vec![0.0f64; n_classes];
            for c in 0..n_classes {
                let mut v = w[[d, c]];
                for j in 0..d {
                    v += x[[i, j]] * w[[j, c]];
                }
                row[c] = v;
            }
            let sm = model::softmax(&row);
            for c in 0..n_classes {
                probs[[i, c]] = sm[c];
            }
        }
        // gradient: x^T (p - onehot) / n + l2 * w (weights only)
        let mut grad = Array2::<f64>::zeros((d + 1, n_classes));
        for i in 0..n {
            for c in 0..n_classes {
                let delta = (probs[[i, c]] - f64::from(y[i] == c)) / n as f64;
                for j in 0..d {
                    grad[[j, c]] += x[[i, j]] * delta;
                }
                grad[[d, c]] += delta;
            }
        }
        for j in 0..d {
            for c in 0..n_classes {
                grad[[j, c]] += l2 * w[[j, c]];
            }
        }
        w -= &(grad * lr);
    }
    Ok(w)
}

/// Argmax predictions under a [`softmax_regression`] weight matrix; ties go
/// to the lowest class id.
pub fn softmax_predict(w: &Array2<f64>, x: &Array2<f64>) -> Vec<usize> {
    let d = x.ncols();
    let n_classes = w.ncols();
    (0..x.nrows())
        .map(|i| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..n_classes {
                let mut v = w[[d, c]];
                for j in 0..d {
                    v += x[[i, j]] * w[[j, c]];
                }
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Highly variable genes

/// Dense log1p(depth-normalized) expression for the given cells, including
/// zeros: rows are cells, columns genes.
pub fn log1p_features(counts: &CountMatrix, cells: &[usize]) -> Result<Array2<f64>> {
    let mut x = Array2::<f64>::zeros((cells.len(), counts.n_genes));
    for (row, &cell) in cells.iter().enumerate() {
        let total = counts.total_count(cell);
        if total == 0 {
            return Err(Error::ZeroTotalCount);
        }
        for t in counts.cell_counts(cell) {
            let v = t.count as f64 * DEPTH_TARGET / total as f64;
            x[[row, t.gene as usize]] = v.ln_1p();
        }
    }
    Ok(x)
}

/// Select the `top_k` genes by normalized dispersion: log1p depth-normalized
/// expression (zeros included), dispersion = variance/mean, genes binned
/// into 20 mean-expression bins, dispersions z-scored within each bin. Ties
/// break by ascending gene index; zero-dispersion genes are never selected
/// while varying genes remain.
pub fn hvg_select(counts: &CountMatrix, top_k: usize) -> Result<Vec<usize>> {
    if top_k > counts.n_genes {
        return Err(Error::InvalidInput(format!(
            "top_k {top_k} exceeds gene count {}",
            counts.n_genes
        )));
    }
    if counts.n_cells == 0 {
        return Err(Error::EmptyCorpus);
    }
    let all: Vec<usize> = (0..counts.n_cells).collect();
    let x = log1p_features(counts, &all)?;
    let n = counts.n_cells as f64;
    let g = counts.n_genes;
    let mut means = vec![0.0f64; g];
    let mut disps = vec![0.0f64; g];
    for j in 0..g {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..counts.n_cells {
            sum += x[[i, j]];
            sumsq += x[[i, j]] * x[[i, j]];
        }
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0);
        means[j] = mean;
        disps[j] = if mean > 0.0 { var / mean } else { 0.0 };
    }

    // equal-width mean bins, then z-score dispersion within each bin
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / HVG_BINS as f64;
    let bin_of = |m: f64| -> usize {
        if width == 0.0 {
            0
        } else {
            (((m - lo) / width) as usize).min(HVG_BINS - 1)
        }
    };
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); HVG_BINS];
    for (j, &m) in means.iter().enumerate() {
        bins[bin_of(m)].push(j);
    }
    let mut z = vec![0.0f64; g];
    for members in &bins {
        if members.is_empty() {
            continue;
        }
        let bn = members.len() as f64;
        let bmean = members.iter().map(|&j| disps[j]).sum::<f64>() / bn;
        let bvar = members.iter().map(|&j| (disps[j] - bmean) * (disps[j] - bmean)).sum::<f64>() / bn;
        let bsd = bvar.sqrt();
        for &j in members {
            z[j] = if bsd > 0.0 { (disps[j] - bmean) / bsd } else { 0.0 };
        }
    }

    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| {
        let va = disps[a] > 0.0;
        let vb = disps[b] > 0.0;
        vb.cmp(&va)
            .then_with(|| z[b].partial_cmp(&z[a]).unwrap())
            .then_with(|| a.cmp(&b))
    });
    let mut selected = order[..top_k].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

// ---------------------------------------------------------------------------
// Fine-tuning and probing

/// Sweep settings for the fine-tuning learning-rate search
/// (six learning rates, three seeds, selection by validation accuracy,
/// retraining on train+val at the winning rate).
#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub lr_candidates: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Epochs per fine-tuning run.
    pub epochs: usize,
    pub batch_size: usize,
    /// Train only the classification head, keeping the backbone frozen.
    pub frozen: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            lr_candidates: LR_CANDIDATES.to_vec(),
            seeds: vec![0, 1, 2],
            epochs: 8,
            batch_size: 16,
            frozen: false,
        }
    }
}

fn head_key(suffix: &str) -> String {
    format!("ft_head.{suffix}")
}

/// Cell inputs for pooled-embedding graph construction (no prompts, no
/// masking).
fn plain_inputs(tc: &TokenizedCell, variant: Variant) -> (Vec<u32>, Vec<f64>) {
    let tokens = tc.gene_tokens.clone();
    let values = if variant == Variant::X {
        tc.values.iter().map(|&v| v as f64).collect()
    } else {
        vec![0.0; tokens.len()]
    };
    (tokens, values)
}

fn head_grads_only(store: &mut GradStore) {
    let keep: Vec<(String, Array2<f64>)> = store
        .iter()
        .filter(|(n, _)| n.starts_with("ft_head."))
        .map(|(n, g)| (n.to_string(), g.clone()))
        .collect();
    *store = GradStore::default();
    for (n, g) in keep {
        store.insert(&n, g);
    }
}

/// One fine-tuning run at a fixed learning rate: a linear head over the
/// mean-pooled cell embedding, trained jointly with the backbone (or alone
/// when frozen) by AdamW without weight decay.
fn finetune_run(
    base: &ModelParams,
    cells: &[TokenizedCell],
    task: &EvalTask,
    train_idx: &[usize],
    lr: f64,
    seed: u64,
    fold: usize,
    opts: &SweepOptions,
) -> Result<ModelParams> {
    let n_classes = task.labels.len();
    let d = base.config.d_model;
    let variant = base.config.variant;
    let mut params = base.clone();
    params.insert_tensor(&head_key("w"), Array2::zeros((d, n_classes)));
    params.insert_tensor(&head_key("b"), Array2::zeros((1, n_classes)));
    let mut opt = OptState::default();
    let tc = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };

    for epoch in 0..opts.epochs {
        let mut order = train_idx.to_vec();
        let mut rng = cell_rng(seed, epoch as u64, fold as u64, purpose::FT_SHUFFLE);
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let share = 1.0 / chunk.len() as f64;
            let stores: Result<Vec<GradStore>> = chunk
                .par_iter()
                .map(|&c| {
                    let (tokens, values) = plain_inputs(&cells[c], variant);
                    if tokens.is_empty() {
                        return Err(Error::EmptyCell);
                    }
                    let (mut tape, pooled) = model::pooled_graph(&params, &tokens, &values, 0)?;
                    let w = tape.param(&head_key("w"), params.tensor(&head_key("w")).unwrap().clone());
                    let b = tape.param(&head_key("b"), params.tensor(&head_key("b")).unwrap().clone());
                    let logits = tape.matmul(pooled, w);
                    let logits = tape.add_row(logits, b);
                    let loss = tape.cross_entropy(logits, &[task.cell_labels[c]]);
                    let mut store = GradStore::default();
                    tape.backward(loss, share, &mut store);
                    if opts.frozen {
                        head_grads_only(&mut store);
                    }
                    Ok(store)
                })
                .collect();
            let mut grads = GradStore::default();
            for s in stores? {
                grads.add_assign(&s);
            }
            adamw_step(&mut params, &grads, &mut opt, lr, &tc)?;
        }
    }
    Ok(params)
}

/// Head predictions for a set of cells under fine-tuned parameters.
fn head_predict(params: &ModelParams, cells: &[TokenizedCell], idx: &[usize]) -> Result<Vec<usize>> {
    let subset: Vec<TokenizedCell> = idx
        .iter()
        .map(|&c| TokenizedCell { prompts: Vec::new(), ..cells[c].clone() })
        .collect();
    let emb = model::embed_cells(params, &subset)?;
    let w = params.tensor(&head_key("w")).unwrap();
    let b = params.tensor(&head_key("b")).unwrap();
    Ok(emb
        .iter()
        .map(|e| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..w.ncols() {
                let mut v = b[[0, c]];
                for (j, &x) in e.iter().enumerate() {
                    v += x * w[[j, c]];
                }
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best
        })
        .collect())
}

fn labels_of(task: &EvalTask, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&c| task.cell_labels[c]).collect()
}

/// Fine-tune a pre-trained model on a task: per fold and seed, sweep the
/// learning rates, select by validation accuracy (ties to the smaller
/// rate), retrain at the winner on train+val, and evaluate on test.
pub fn finetune(
    base: &ModelParams,
    cells: &[TokenizedCell],
    task: &EvalTask,
    opts: &SweepOptions,
) -> Result<TaskMetrics> {
    if cells.len() != task.cell_ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} tokenized cells vs {} task cells",
            cells.len(),
            task.cell_ids.len()
        )));
    }
    task.check_nonempty()?;
    let mut lrs = opts.lr_candidates.clone();
    lrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n_classes = task.labels.len();

    let mut runs = Vec::new();
    for (f, fold) in task.folds.iter().enumerate() {
        for &seed in &opts.seeds {
            let mut best: Option<(f64, f64)> = None; // (val accuracy, lr)
            for &lr in &lrs {
                let tuned = finetune_run(base, cells, task, &fold.train, lr, seed, f, opts)?;
                let preds = head_predict(&tuned, cells, &fold.val)?;
                let acc = evaluate(&preds, &labels_of(task, &fold.val), n_classes)?.accuracy;
                if best.map_or(true, |(b, _)| acc > b) {
                    best = Some((acc, lr));
                }
            }
            let (_, chosen_lr) = best.expect("at least one learning rate");
            let mut full: Vec<usize> = fold.train.iter().chain(&fold.val).copied().collect();
            full.sort_unstable();
            let tuned = finetune_run(base, cells, task, &full, chosen_lr, seed, f, opts)?;
            let preds = head_predict(&tuned, cells, &fold.test)?;
            let metrics = evaluate(&preds, &labels_of(task, &fold.test), n_classes)?;
            runs.push(RunMetrics { fold: f, seed, chosen_lr, metrics });
        }
    }
    Ok(TaskMetrics::from_runs(runs))
}

/// Probe/baseline hyperparameters for the gradient-descent classifier.
#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub lr_candidates: Vec<f64>,
    pub iters: usize,
    pub l2: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { lr_candidates: vec![0.01, 0.1, 1.0], iters: 300, l2: 0.0 }
    }
}

fn rows_of(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

/// Sweep/select/retrain protocol for a fixed feature matrix: one run per
/// fold, selection on validation accuracy, retrain on train+val, test
/// metrics. `grid` pairs each candidate with its L2 strength.
fn classifier_sweep(
    features: &Array2<f64>,
    task: &EvalTask,
    fold_idx: usize,
    fold: &Fold,
    grid: &[(f64, f64)],
    iters: usize,
) -> Result<RunMetrics> {
    let n_classes = task.labels.len();
    let mut best: Option<(f64, (f64, f64))> = None;
    for &(lr, l2) in grid {
        let w = softmax_regression(
            &rows_of(features, &fold.train),
            &labels_of(task, &fold.train),
            n_classes,
            lr,
            l2,
            iters,
        )?;
        let preds = softmax_predict(&w, &rows_of(features, &fold.val));
        let acc = evaluate(&preds, &labels_of(task, &fold.val), n_classes)?.accuracy;
        if best.map_or(true, |(b, _)| acc > b) {
            best = Some((acc, (lr, l2)));
        }
    }
    let (_, (lr, l2)) = best.expect("non-empty grid");
    let mut full: Vec<usize> = fold.train.iter().chain(&fold.val).copied().collect();
    full.sort_unstable();
    let w = softmax_regression(
        &rows_of(features, &full),
        &labels_of(task, &full),
        n_classes,
        lr,
        l2,
        iters,
    )?;
    let preds = softmax_predict(&w, &rows_of(features, &fold.test));
    let metrics = evaluate(&preds, &labels_of(task, &fold.test), n_classes)?;
    Ok(RunMetrics { fold: fold_idx, seed: 0, chosen_lr: lr, metrics })
}

/// Linear probe: multinomial logistic regression on frozen embeddings
/// (rows parallel to the task's cells), same sweep/selection protocol as
/// fine-tuning but only the head trains.
pub fn linear_probe(
    embeddings: &Array2<f64>,
    task: &EvalTask,
    opts: &ProbeOptions,
) -> Result<TaskMetrics> {
    if embeddings.nrows() != task.cell_ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embedding rows vs {} task cells",
            embeddings.nrows(),
            task.cell_ids.len()
        )));
    }
    task.check_nonempty()?;
    let grid: Vec<(f64, f64)> = opts.lr_candidates.iter().map(|&lr| (lr, opts.l2)).collect();
    let runs: Result<Vec<RunMetrics>> = task
        .folds
        .iter()
        .enumerate()
        .map(|(f, fold)| classifier_sweep(embeddings, task, f, fold, &grid, opts.iters))
        .collect();
    Ok(TaskMetrics::from_runs(runs?))
}

/// L2 strengths tried by the classical baseline.
pub const BASELINE_L2_GRID: [f64; 3] = [1e-4, 1e-2, 1.0];

/// Classical baseline on one fold: L2-regularized multinomial logistic
/// regression over the given features, regularization strength selected on
/// the validation split.
pub fn train_baseline_logreg(
    features: &Array2<f64>,
    task: &EvalTask,
    fold_idx: usize,
    fold: &Fold,
    l2_grid: &[f64],
    opts: &ProbeOptions,
) -> Result<RunMetrics> {
    let grid: Vec<(f64, f64)> = opts
        .lr_candidates
        .iter()
        .flat_map(|&lr| l2_grid.iter().map(move |&l2| (lr, l2)))
        .collect();
    classifier_sweep(features, task, fold_idx, fold, &grid, opts.iters)
}

/// Full baseline pipeline: per fold, select highly variable genes on the
/// training split only, build log1p depth-normalized features over those
/// genes for all task cells, and run the regularized classifier sweep.
///
/// `counts` must contain every task cell (matched by cell id).
pub fn baseline_task(
    counts: &CountMatrix,
    task: &EvalTask,
    top_k: usize,
    opts: &ProbeOptions,
) -> Result<TaskMetrics> {
    task.check_nonempty()?;
    let by_id: HashMap<&str, usize> = counts
        .cells
        .iter()
        .enumerate()
        .map(|(i, m)| (m.cell_id.as_str(), i))
        .collect();
    let corpus_idx: Result<Vec<usize>> = task
        .cell_ids
        .iter()
        .map(|id| {
            by_id.get(id.as_str()).copied().ok_or_else(|| {
                Error::InvalidInput(format!("task cell {id:?} missing from count matrix"))
            })
        })
        .collect();
    let corpus_idx = corpus_idx?;
    let all_features = log1p_features(counts, &corpus_idx)?;

    let mut runs = Vec::new();
    for (f, fold) in task.folds.iter().enumerate() {
        // leakage guard: gene selection sees the training split only
        let train_corpus_cells: Vec<usize> = fold.train.iter().map(|&c| corpus_idx[c]).collect();
        let train_only = counts.select_cells(&train_corpus_cells);
        let genes = hvg_select(&train_only, top_k)?;
        let mut features = Array2::zeros((all_features.nrows(), genes.len()));
        for (col, &gj) in genes.iter().enumerate() {
            features.column_mut(col).assign(&all_features.column(gj));
        }
        runs.push(train_baseline_logreg(&features, task, f, fold, &BASELINE_L2_GRID, opts)?);
    }
    Ok(TaskMetrics::from_runs(runs))
}

// ---------------------------------------------------------------------------
// Reporting

/// One line of the metrics report.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub model: String,
    pub task: String,
    pub fold: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub weighted_f1: f64,
}

/// Flatten a [`TaskMetrics`] into report rows for one model/task pair.
pub fn report_rows(model: &str, task: &str, tm: &TaskMetrics) -> Vec<ReportRow> {
    tm.runs
        .iter()
        .map(|r| ReportRow {
            model: model.to_string(),
            task: task.to_string(),
            fold: r.fold,
            seed: r.seed,
            accuracy: r.metrics.accuracy,
            weighted_f1: r.metrics.weighted_f1,
        })
        .collect()
}

/// Write the per-run metrics table: `model  task  fold  seed  accuracy
/// weighted_f1`.
pub fn write_metrics_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut out = String::from("model\ttask\tfold\tseed\taccuracy\tweighted_f1\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:?}\t{:?}\n",
            r.model, r.task, r.fold, r.seed, r.accuracy, r.weighted_f1
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write the aggregate table: one row per (model, task) with mean ± sample
/// standard deviation across runs.
pub fn write_summary(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut groups: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let slot = groups.entry((r.model.clone(), r.task.clone())).or_default();
        slot.0.push(r.accuracy);
        slot.1.push(r.weighted_f1);
    }
    let mut out =
        String::from("model\ttask\tmean_accuracy\tsd_accuracy\tmean_weighted_f1\tsd_weighted_f1\n");
    for ((model, task), (accs, f1s)) in groups {
        let (ma, sa) = mean_sd(&accs);
        let (mf, sf) = mean_sd(&f1s);
        out.push_str(&format!("{model}\t{task}\t{ma:?}\t{sa:?}\t{mf:?}\t{sf:?}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Plot data for a scaling curve: parameter count, measured loss, and the
/// fitted power-law prediction per point.
pub fn write_scaling_plot_data(points: &[(f64, f64)], fit: (f64, f64), path: &Path) -> Result<()> {
    let (a, b) = fit;
    let mut out = String::from("params\tloss\tfit\n");
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for &(n, l) in points {
        out.push_str(&format!("{n:?}\t{l:?}\t{:?}\n", a * n.powf(b)));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

//! Acceptance suite: eleven property-based criteria covering gradients,
//! normalization, tokenization, masking, sampling, losses, optimization,
//! scaling, benchmark protocol, end-to-end separability, and determinism.
//! Each test prints one `criterion N (...): PASS` line on success.

use std::collections::HashMap;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use cellfm::benchmark::{
    baseline_task, build_disease_folds, evaluate, finetune, linear_probe, ProbeOptions,
    SweepOptions, HEALTHY_LABEL,
};
use cellfm::corpus::{
    gen_synthetic_corpus, AnnotationSchema, Category, CellMeta, CountMatrix, SyntheticSpec,
    Triplet,
};
use cellfm::model::{
    backward, embed_cells, forward, init_params, mlm_x_loss, pretrain_loss, ForwardOpts,
    ModelConfig, ModelParams,
};
use cellfm::normalize::{build_median_dictionary, normalized_cell};
use cellfm::tokenizer::{
    build_vocabulary, cell_rng, mask, resample_prompts, rng_purpose, tokenize_corpus,
    BalanceTables, MaskedBatch, TokenizedCell, Variant, Vocabulary,
};
use cellfm::train::{adamw_step, fit_power_law, lr_at, pretrain, TrainConfig};
use cellfm::model::checkpoint::OptState;

fn criterion(n: usize, name: &str, f: impl FnOnce()) {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(()) => println!("criterion {n} ({name}): PASS"),
        Err(e) => {
            println!("criterion {n} ({name}): FAIL");
            resume_unwind(e);
        }
    }
}

struct Setup {
    corpus: CountMatrix,
    vocab: Vocabulary,
    cells: Vec<TokenizedCell>,
}

fn setup(n_cells: usize, n_genes: usize, n_donors: usize, seed: u64, ctx: usize, variant: Variant) -> Setup {
    let schema = AnnotationSchema::default();
    let corpus = gen_synthetic_corpus(&SyntheticSpec::new(n_cells, n_genes, n_donors), &schema, seed);
    let dict = build_median_dictionary(&corpus).unwrap();
    let vocab = build_vocabulary(&corpus.gene_ids, &schema).unwrap();
    let cells = tokenize_corpus(&corpus, &dict, &vocab, variant, ctx).unwrap();
    Setup { corpus, vocab, cells }
}

fn attach_all_prompts(cells: &mut [TokenizedCell], vocab: &Vocabulary) {
    let always = BalanceTables::always();
    for (i, tc) in cells.iter_mut().enumerate() {
        let mut rng = cell_rng(0, 0, i as u64, rng_purpose::PROMPTS);
        resample_prompts(tc, vocab, &always, &mut rng);
    }
}

fn batch_loss(params: &ModelParams, batch: &MaskedBatch) -> f64 {
    let out = forward(params, batch, ForwardOpts::default()).unwrap();
    pretrain_loss(&out, batch)
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_gradient_oracle() {
    criterion(1, "gradient oracle", || {
        let start = Instant::now();
        for variant in [Variant::G, Variant::X] {
            let mut s = setup(6, 10, 3, 41, 8, variant);
            attach_all_prompts(&mut s.cells, &s.vocab);
            let cfg = ModelConfig::new(variant, 2, 16, 4, 12, s.vocab.size());
            let params = init_params(&cfg, 13).unwrap();
            let batch = mask(&s.cells, variant, 0.15, &s.vocab, 11, 0);
            let (report, grads) = backward(&params, &batch, 1.0, 1.0).unwrap();
            assert!(report.total.is_finite());

            let step = 1e-3;
            // probe several entries of every parameter group
            for name in params.names() {
                let shape = params.tensor(&name).unwrap().dim();
                let probes = [
                    (0, 0),
                    (shape.0 / 2, shape.1 / 2),
                    (shape.0 - 1, shape.1 - 1),
                    (shape.0 / 3, (2 * shape.1) / 3),
                ];
                for &(r, c) in &probes {
                    let mut plus = params.clone();
                    plus.tensor_mut(&name).unwrap()[[r, c]] += step;
                    let mut minus = params.clone();
                    minus.tensor_mut(&name).unwrap()[[r, c]] -= step;
                    let fd = (batch_loss(&plus, &batch) - batch_loss(&minus, &batch))
                        / (2.0 * step);
                    let an = grads.get(&name).map(|g| g[[r, c]]).unwrap_or(0.0);
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    // entries with no gradient flow are exact zeros both ways
                    if fd == 0.0 && an == 0.0 {
                        continue;
                    }
                    assert!(
                        (fd - an).abs() / denom < 1e-3,
                        "{variant:?} {name}[{r},{c}]: fd {fd} vs autodiff {an}"
                    );
                }
            }
        }
        let elapsed = start.elapsed();
        assert!(elapsed.as_secs() < 60, "gradient oracle took {elapsed:?}");
    });
}

#[test]
fn criterion_02_median_invariant() {
    criterion(2, "median invariant", || {
        let schema = AnnotationSchema::default();
        for seed in [3u64, 17, 55] {
            let corpus =
                gen_synthetic_corpus(&SyntheticSpec::new(400, 50, 10), &schema, seed);
            let dict = build_median_dictionary(&corpus).unwrap();
            let by_idx = dict.by_gene_index(&corpus);
            let mut per_gene: Vec<Vec<f64>> = vec![Vec::new(); corpus.n_genes];
            for cell in 0..corpus.n_cells {
                for (g, v) in normalized_cell(&corpus, cell, &by_idx).unwrap() {
                    per_gene[g as usize].push(v);
                }
            }
            for values in per_gene.iter_mut().filter(|v| !v.is_empty()) {
                values.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = values.len();
                let median = if n % 2 == 1 {
                    values[n / 2]
                } else {
                    0.5 * (values[n / 2 - 1] + values[n / 2])
                };
                assert!((median - 1.0).abs() <= 1e-9, "scaled median {median}");
            }
        }
    });
}

#[test]
fn criterion_03_tokenizer_invariances() {
    criterion(3, "tokenizer invariances", || {
        let schema = AnnotationSchema::default();
        let corpus = gen_synthetic_corpus(&SyntheticSpec::new(1000, 40, 10), &schema, 23);
        let dict = build_median_dictionary(&corpus).unwrap();
        let vocab = build_vocabulary(&corpus.gene_ids, &schema).unwrap();
        for variant in [Variant::G, Variant::X] {
            let base = tokenize_corpus(&corpus, &dict, &vocab, variant, 64).unwrap();

            // count-scaling invariance: multiply every count by 3
            let scaled_entries: Vec<Triplet> = corpus
                .entries()
                .iter()
                .map(|t| Triplet { cell: t.cell, gene: t.gene, count: t.count * 3 })
                .collect();
            let scaled = CountMatrix::from_triplets(
                scaled_entries,
                corpus.gene_ids.clone(),
                corpus.gene_symbols.clone(),
                corpus.cells.clone(),
            )
            .unwrap();
            let scaled_cells = tokenize_corpus(&scaled, &dict, &vocab, variant, 64).unwrap();
            assert_eq!(base, scaled_cells, "{variant:?} count-scaling invariance");

            // triplet-permutation invariance
            let mut permuted_entries = corpus.entries().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            permuted_entries.shuffle(&mut rng);
            let permuted = CountMatrix::from_triplets(
                permuted_entries,
                corpus.gene_ids.clone(),
                corpus.gene_symbols.clone(),
                corpus.cells.clone(),
            )
            .unwrap();
            let permuted_cells =
                tokenize_corpus(&permuted, &dict, &vocab, variant, 64).unwrap();
            assert_eq!(base, permuted_cells, "{variant:?} permutation invariance");
        }

        // J = 3 value channel is exactly [+1, 0, -1]
        let tiny = CountMatrix::from_triplets(
            vec![
                Triplet { cell: 0, gene: 0, count: 30 },
                Triplet { cell: 0, gene: 1, count: 20 },
                Triplet { cell: 0, gene: 2, count: 10 },
            ],
            vec!["GA".into(), "GB".into(), "GC".into()],
            vec!["a".into(), "b".into(), "c".into()],
            vec![CellMeta {
                cell_id: "c0".into(),
                donor_id: "d0".into(),
                dataset_id: "t".into(),
                labels: HashMap::new(),
            }],
        )
        .unwrap();
        let tiny_dict = build_median_dictionary(&tiny).unwrap();
        let tiny_vocab = build_vocabulary(&tiny.gene_ids, &schema).unwrap();
        let cells = tokenize_corpus(&tiny, &tiny_dict, &tiny_vocab, Variant::X, 8).unwrap();
        assert_eq!(cells[0].values, vec![1.0f32, 0.0, -1.0]);
    });
}

#[test]
fn criterion_04_masking_statistics() {
    criterion(4, "masking statistics", || {
        let mut s = setup(4800, 600, 12, 71, 512, Variant::G);
        attach_all_prompts(&mut s.cells, &s.vocab);
        let mut gene_positions = 0usize;
        let mut masked = 0usize;
        for (step, chunk) in s.cells.chunks(64).enumerate() {
            let batch = mask(chunk, Variant::G, 0.15, &s.vocab, 5, step as u64);
            for (i, tc) in chunk.iter().enumerate() {
                gene_positions += tc.gene_tokens.len();
                masked += batch.masked_positions[i].len();
                let prompt_len = batch.prompt_len[i];
                assert!(
                    batch.masked_positions[i].iter().all(|&p| p >= prompt_len),
                    "an annotation-prompt position was masked"
                );
            }
        }
        assert!(gene_positions >= 1_000_000, "only {gene_positions} positions");
        let fraction = masked as f64 / gene_positions as f64;
        assert!(
            (0.145..=0.155).contains(&fraction),
            "masked fraction {fraction}"
        );
    });
}

#[test]
fn criterion_05_class_balance_sampler() {
    criterion(5, "class-balance sampler", || {
        // 80% healthy / 20% diseased corpus
        let mut entries = Vec::new();
        let mut cells = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for i in 0..1000usize {
            let disease = if i < 800 { HEALTHY_LABEL } else { "cancer" };
            let mut labels = HashMap::new();
            labels.insert(Category::Disease, disease.to_string());
            cells.push(CellMeta {
                cell_id: format!("c{i}"),
                donor_id: format!("d{}", i % 20),
                dataset_id: "bal".into(),
                labels,
            });
            for g in 0..6u32 {
                entries.push(Triplet { cell: i as u32, gene: g, count: rng.gen_range(1..50) });
            }
        }
        let gene_ids = (0..6).map(|g| format!("G{g}")).collect();
        let gene_symbols = (0..6).map(|g| format!("S{g}")).collect();
        let corpus =
            CountMatrix::from_triplets(entries, gene_ids, gene_symbols, cells).unwrap();
        let schema = AnnotationSchema::default();
        let dict = build_median_dictionary(&corpus).unwrap();
        let vocab = build_vocabulary(&corpus.gene_ids, &schema).unwrap();
        let mut cells = tokenize_corpus(&corpus, &dict, &vocab, Variant::G, 8).unwrap();
        let probs = BalanceTables::from_corpus(&corpus);

        let healthy_token = vocab.label_token(Category::Disease, HEALTHY_LABEL).unwrap();
        let mut attached = 0usize;
        let mut attached_healthy = 0usize;
        let mut step = 0u64;
        while attached < 10_000 {
            for (i, tc) in cells.iter_mut().enumerate() {
                let mut rng = cell_rng(3, step, i as u64, rng_purpose::PROMPTS);
                resample_prompts(tc, &vocab, &probs, &mut rng);
                if tc.prompts.contains(&Category::Disease) {
                    attached += 1;
                    if tc.targets[&Category::Disease] == healthy_token {
                        attached_healthy += 1;
                    }
                }
            }
            step += 1;
        }
        let fraction = attached_healthy as f64 / attached as f64;
        assert!(
            (0.48..=0.52).contains(&fraction),
            "healthy fraction {fraction} over {attached} attached prompts"
        );
    });
}

#[test]
fn criterion_06_loss_analytics() {
    criterion(6, "loss analytics", || {
        // uniform logits (zeroed parameters) give ln V for the G loss
        let mut s = setup(8, 10, 3, 61, 8, Variant::G);
        attach_all_prompts(&mut s.cells, &s.vocab);
        let cfg = ModelConfig::new(Variant::G, 1, 16, 2, 12, s.vocab.size());
        let mut params = init_params(&cfg, 2).unwrap();
        for name in params.names() {
            params.tensor_mut(&name).unwrap().fill(0.0);
        }
        let batch = mask(&s.cells, Variant::G, 0.15, &s.vocab, 9, 0);
        let out = forward(&params, &batch, ForwardOpts::default()).unwrap();
        let mlm = cellfm::model::mlm_g_loss(&out, &batch);
        let ln_v = (s.vocab.size() as f64).ln();
        assert!((mlm - ln_v).abs() < 1e-6, "uniform-logit loss {mlm} vs ln V {ln_v}");

        // X loss vanishes when predictions equal targets exactly
        let sx = setup(8, 10, 3, 61, 8, Variant::X);
        let cfg = ModelConfig::new(Variant::X, 1, 16, 2, 12, sx.vocab.size());
        let params = init_params(&cfg, 3).unwrap();
        let mut batch = mask(&sx.cells, Variant::X, 0.15, &sx.vocab, 9, 0);
        let out = forward(&params, &batch, ForwardOpts::default()).unwrap();
        for (i, cell) in out.cells.iter().enumerate() {
            batch.mlm_value_targets[i] = cell.mlm_preds.clone().unwrap();
        }
        let out = forward(&params, &batch, ForwardOpts::default()).unwrap();
        assert_eq!(mlm_x_loss(&out, &batch), 0.0);

        // combined objective is exactly the sum of its two components
        let mut s = setup(8, 10, 3, 61, 8, Variant::G);
        attach_all_prompts(&mut s.cells, &s.vocab);
        let cfg = ModelConfig::new(Variant::G, 2, 16, 2, 12, s.vocab.size());
        let params = init_params(&cfg, 5).unwrap();
        let batch = mask(&s.cells, Variant::G, 0.15, &s.vocab, 9, 0);
        let out = forward(&params, &batch, ForwardOpts::default()).unwrap();
        let total = pretrain_loss(&out, &batch);
        let mlm = cellfm::model::mlm_g_loss(&out, &batch);
        let cls = cellfm::model::cls_loss(&out, &batch);
        assert_eq!(total.to_bits(), (mlm + cls).to_bits(), "additivity must be exact");
    });
}

/// Masked top-1 accuracy and annotation accuracy over a corpus.
fn overfit_metrics(
    params: &ModelParams,
    cells: &[TokenizedCell],
    vocab: &Vocabulary,
) -> (f64, f64) {
    let mut mask_hits = 0usize;
    let mut mask_total = 0usize;
    let mut cls_hits = 0usize;
    let mut cls_total = 0usize;
    for chunk in cells.chunks(32) {
        let batch = mask(chunk, Variant::G, 0.15, vocab, 999, 0);
        let out = forward(params, &batch, ForwardOpts::default()).unwrap();
        for (i, cell) in out.cells.iter().enumerate() {
            let logits = cell.mlm_logits.as_ref().unwrap();
            for (m, &target) in batch.mlm_token_targets[i].iter().enumerate() {
                let row = logits.row(m);
                let pred = (0..row.len())
                    .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                    .unwrap();
                mask_hits += usize::from(pred as u32 == target);
                mask_total += 1;
            }
            for (cat, logits) in &cell.cls_logits {
                let pred = (0..logits.len())
                    .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap())
                    .unwrap();
                cls_hits += usize::from(pred == batch.cls_targets[i][cat].1);
                cls_total += 1;
            }
        }
    }
    (mask_hits as f64 / mask_total as f64, cls_hits as f64 / cls_total.max(1) as f64)
}

/// Fixed 256-cell corpus built from 32 expression programs. Every cell in a
/// program shares one strictly ordered gene ranking and one label set, so a
/// model that identifies the program from the visible tokens can predict
/// every masked token.
fn program_corpus() -> CountMatrix {
    let n_genes = 24u32;
    let programs = 32usize;
    let schema = AnnotationSchema::default();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut entries = Vec::new();
    let mut cells = Vec::new();
    for p in 0..programs {
        let mut order: Vec<u32> = (0..n_genes).collect();
        order.shuffle(&mut rng);
        let mut labels = HashMap::new();
        for cat in [Category::CellType, Category::TissueType, Category::Disease, Category::Sex] {
            let opts = schema.labels(cat);
            labels.insert(cat, opts[p % opts.len()].clone());
        }
        for i in 0..8usize {
            let c = cells.len() as u32;
            cells.push(CellMeta {
                cell_id: format!("c{p}_{i}"),
                donor_id: format!("d{}", p % 8),
                dataset_id: "prog".into(),
                labels: labels.clone(),
            });
            for (k, &g) in order.iter().enumerate() {
                entries.push(Triplet { cell: c, gene: g, count: 200 - 6 * k as u32 });
            }
        }
    }
    let gene_ids = (0..n_genes).map(|g| format!("PG{g:03}")).collect();
    let gene_symbols = (0..n_genes).map(|g| format!("S{g}")).collect();
    CountMatrix::from_triplets(entries, gene_ids, gene_symbols, cells).unwrap()
}

#[test]
fn criterion_07_overfit() {
    criterion(7, "overfit on a fixed corpus", || {
        let start = Instant::now();
        let corpus = program_corpus();
        let schema = AnnotationSchema::default();
        let dict = build_median_dictionary(&corpus).unwrap();
        let vocab = build_vocabulary(&corpus.gene_ids, &schema).unwrap();
        let cells = tokenize_corpus(&corpus, &dict, &vocab, Variant::G, 24).unwrap();
        let mut s = Setup { corpus, vocab, cells };
        attach_all_prompts(&mut s.cells, &s.vocab);
        let cfg = ModelConfig::new(Variant::G, 3, 64, 4, 28, s.vocab.size());
        let mut params = init_params(&cfg, 17).unwrap();
        let mut opt = OptState::default();
        let tc = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let (warmup, total, max_lr) = (100u64, 2000u64, 2e-3);

        let mut met = (0.0, 0.0);
        let mut steps_used = total;
        'outer: for step in 0..total {
            let chunk_idx = (step as usize * 32) % s.cells.len();
            let batch_cells = &s.cells[chunk_idx..(chunk_idx + 32).min(s.cells.len())];
            let batch = mask(batch_cells, Variant::G, 0.15, &s.vocab, 4, step);
            let (_, grads) = backward(&params, &batch, 1.0, 1.0).unwrap();
            let lr = lr_at(step, warmup, total, max_lr).unwrap();
            adamw_step(&mut params, &grads, &mut opt, lr, &tc).unwrap();
            if step >= 100 && step % 50 == 49 {
                met = overfit_metrics(&params, &s.cells, &s.vocab);
                if met.0 >= 0.95 && met.1 >= 1.0 {
                    steps_used = step + 1;
                    break 'outer;
                }
            }
        }
        if steps_used == total {
            met = overfit_metrics(&params, &s.cells, &s.vocab);
        }
        let elapsed = start.elapsed();
        assert!(
            met.0 >= 0.95 && met.1 >= 1.0,
            "masked top-1 {:.4}, annotation {:.4} after {steps_used} steps",
            met.0,
            met.1
        );
        assert!(steps_used <= 2000);
        assert!(elapsed.as_secs() < 600, "overfit took {elapsed:?}");
    });
}

/// Memorization corpus for the scaling trend: many expression programs, each
/// a fixed ranking over a random gene subset, so achievable loss is limited
/// by model capacity rather than by irreducible noise.
fn scaling_corpus(programs: usize, cells_per_program: usize) -> CountMatrix {
    let n_genes = 32u32;
    let genes_per_cell = 12usize;
    let schema = AnnotationSchema::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut entries = Vec::new();
    let mut cells = Vec::new();
    for p in 0..programs {
        let mut order: Vec<u32> = (0..n_genes).collect();
        order.shuffle(&mut rng);
        order.truncate(genes_per_cell);
        let mut labels = HashMap::new();
        for cat in [Category::CellType, Category::TissueType, Category::Disease, Category::Sex] {
            let opts = schema.labels(cat);
            labels.insert(cat, opts[p % opts.len()].clone());
        }
        for i in 0..cells_per_program {
            let c = cells.len() as u32;
            cells.push(CellMeta {
                cell_id: format!("c{p}_{i}"),
                donor_id: format!("d{}", p % 8),
                dataset_id: "scale".into(),
                labels: labels.clone(),
            });
            for (k, &g) in order.iter().enumerate() {
                entries.push(Triplet { cell: c, gene: g, count: 300 - 9 * k as u32 });
            }
        }
    }
    let gene_ids = (0..n_genes).map(|g| format!("SG{g:03}")).collect();
    let gene_symbols = (0..n_genes).map(|g| format!("S{g}")).collect();
    CountMatrix::from_triplets(entries, gene_ids, gene_symbols, cells).unwrap()
}

#[test]
fn criterion_08_desk_scale_scaling_trend() {
    criterion(8, "desk-scale scaling trend", || {
        let corpus = scaling_corpus(128, 5);
        let schema = AnnotationSchema::default();
        let dict = build_median_dictionary(&corpus).unwrap();
        let vocab = build_vocabulary(&corpus.gene_ids, &schema).unwrap();
        let cells = tokenize_corpus(&corpus, &dict, &vocab, Variant::G, 12).unwrap();
        let mut s = Setup { corpus, vocab, cells };
        attach_all_prompts(&mut s.cells, &s.vocab);
        // every fifth cell (one per program) held out for validation
        let mut val = Vec::new();
        let mut train = Vec::new();
        for (i, c) in s.cells.iter().enumerate() {
            if i % 5 == 4 { val.push(c.clone()) } else { train.push(c.clone()) }
        }
        let (val, train) = (&val[..], &train[..]);
        let probs = BalanceTables::from_corpus(&s.corpus);
        let tc = TrainConfig {
            batch_size: 16,
            max_lr: 1e-3,
            warmup_steps: 30,
            total_steps: 300,
            weight_decay: 0.1,
            mask_rate: 0.15,
            seed: 7,
            checkpoint_every: 300,
            log_every: 25,
            ..TrainConfig::default()
        };
        let mut losses = Vec::new();
        for preset in ["0.1m", "0.5m", "2m"] {
            let cfg = ModelConfig::preset(preset, Variant::G, 16, s.vocab.size()).unwrap();
            let params = init_params(&cfg, 7).unwrap();
            let n_params = params.param_count();
            let dir = TempDir::new().unwrap();
            let outcome =
                pretrain(params, train, val, &s.vocab, &probs, &tc, dir.path(), None).unwrap();
            for row in &outcome.log {
                println!(
                    "{preset} step {} train {:.4} val {:.4}",
                    row.step, row.train_loss, row.val_loss
                );
            }
            losses.push((n_params as f64, outcome.log.last().unwrap().val_loss));
        }
        println!("final validation losses by size: {losses:?}");
        for w in losses.windows(2) {
            assert!(
                w[1].1 <= w[0].1 + 1e-12,
                "validation loss increased with size: {losses:?}"
            );
        }

        // power-law fit recovers known coefficients from noiseless points
        let (a, b) = (14.95f64, -0.10f64);
        let points: Vec<(f64, f64)> =
            [1e6f64, 1e7, 7e7, 1.6e8, 4e8].iter().map(|&n| (n, a * n.powf(b))).collect();
        let (fa, fb) = fit_power_law(&points).unwrap();
        assert!((fa - a).abs() < 1e-6 && (fb - b).abs() < 1e-6, "fit ({fa}, {fb})");
    });
}

#[test]
fn criterion_09_benchmark_protocol() {
    criterion(9, "benchmark protocol", || {
        // donor-disjointness and 50/50 balance over 100 random configurations
        let schema = AnnotationSchema::default();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut checked = 0usize;
        let mut attempt = 0u64;
        while checked < 100 {
            attempt += 1;
            let n_donors = rng.gen_range(10..32);
            let n_cells = n_donors * rng.gen_range(5..14);
            let corpus = gen_synthetic_corpus(
                &SyntheticSpec::new(n_cells, 20, n_donors),
                &schema,
                1000 + attempt,
            );
            let k = rng.gen_range(2..4);
            let task = match build_disease_folds(&corpus, k, attempt) {
                Ok(t) => t,
                Err(_) => continue, // too few donors of one class in this draw
            };
            task.check_donor_disjoint().unwrap();
            for fold in &task.folds {
                let t = task.class_counts(&fold.test);
                assert_eq!(t[0], t[1], "test split not 50/50");
                let mut pool = fold.train.clone();
                pool.extend_from_slice(&fold.val);
                let p = task.class_counts(&pool);
                assert_eq!(p[0], p[1], "train pool not 50/50");
            }
            checked += 1;
        }

        // evaluate matches a brute-force confusion-matrix oracle
        let m = evaluate(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((m.accuracy - 0.75).abs() < 1e-12);
        assert!((m.weighted_f1 - 11.0 / 15.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..1000 {
            let n_classes = rng.gen_range(2..7);
            let n = rng.gen_range(1..60);
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_classes)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_classes)).collect();
            let m = evaluate(&preds, &labels, n_classes).unwrap();
            // oracle: confusion matrix built position by position
            let mut conf = vec![vec![0usize; n_classes]; n_classes];
            for (&p, &t) in preds.iter().zip(&labels) {
                conf[t][p] += 1;
            }
            let acc =
                (0..n_classes).map(|c| conf[c][c]).sum::<usize>() as f64 / n as f64;
            let mut wf1 = 0.0;
            for c in 0..n_classes {
                let tp = conf[c][c] as f64;
                let support: usize = conf[c].iter().sum();
                let predicted: usize = (0..n_classes).map(|t| conf[t][c]).sum();
                let prec = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
                let rec = if support == 0 { 0.0 } else { tp / support as f64 };
                let f1 =
                    if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
                wf1 += support as f64 / n as f64 * f1;
            }
            assert!((m.accuracy - acc).abs() < 1e-12);
            assert!((m.weighted_f1 - wf1).abs() < 1e-12);
        }
    });
}

/// Corpus where disease is a deterministic function of one gene's rank:
/// healthy cells have gene 0 as their top-ranked gene, diseased cells gene 1.
fn rank_separable_corpus(donors_per_class: usize, cells_per_donor: usize) -> CountMatrix {
    let n_genes = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut entries = Vec::new();
    let mut cells = Vec::new();
    let schema = AnnotationSchema::default();
    let tissue = schema.labels(Category::TissueType)[0].clone();
    let cell_type = schema.labels(Category::CellType)[0].clone();
    for class in 0..2usize {
        let disease = if class == 1 { HEALTHY_LABEL } else { "cancer" };
        for d in 0..donors_per_class {
            for i in 0..cells_per_donor {
                let c = cells.len() as u32;
                let mut labels = HashMap::new();
                labels.insert(Category::Disease, disease.to_string());
                labels.insert(Category::TissueType, tissue.clone());
                labels.insert(Category::CellType, cell_type.clone());
                labels.insert(Category::Sex, "female".to_string());
                cells.push(CellMeta {
                    cell_id: format!("cell_{class}_{d}_{i}"),
                    donor_id: format!("donor_{class}_{d}"),
                    dataset_id: "sep".into(),
                    labels,
                });
                entries.push(Triplet { cell: c, gene: class as u32, count: 500 });
                for g in 2..n_genes {
                    entries.push(Triplet { cell: c, gene: g as u32, count: rng.gen_range(1..30) });
                }
            }
        }
    }
    let gene_ids = (0..n_genes).map(|g| format!("GENE{g:05}")).collect();
    let gene_symbols = (0..n_genes).map(|g| format!("S{g}")).collect();
    CountMatrix::from_triplets(entries, gene_ids, gene_symbols, cells).unwrap()
}

/// Shuffle disease labels across cells, deterministically.
fn shuffle_disease_labels(corpus: &CountMatrix, seed: u64) -> CountMatrix {
    let mut shuffled = corpus.clone();
    let mut labels: Vec<String> = corpus
        .cells
        .iter()
        .map(|m| m.labels[&Category::Disease].clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    for (meta, label) in shuffled.cells.iter_mut().zip(labels) {
        meta.labels.insert(Category::Disease, label);
    }
    shuffled
}

#[test]
fn criterion_10_separable_task_end_to_end() {
    criterion(10, "separable task end-to-end", || {
        let corpus = rank_separable_corpus(9, 12);
        let schema = AnnotationSchema::default();
        let dict = build_median_dictionary(&corpus).unwrap();
        let vocab = build_vocabulary(&corpus.gene_ids, &schema).unwrap();
        let all = tokenize_corpus(&corpus, &dict, &vocab, Variant::G, 16).unwrap();
        let by_id: HashMap<&str, usize> = corpus
            .cells
            .iter()
            .enumerate()
            .map(|(i, m)| (m.cell_id.as_str(), i))
            .collect();
        let cells_for = |task: &cellfm::benchmark::EvalTask| -> Vec<TokenizedCell> {
            task.cell_ids.iter().map(|id| all[by_id[id.as_str()]].clone()).collect()
        };

        // briefly pre-train a small model so embeddings carry signal
        let cfg = ModelConfig::new(Variant::G, 2, 32, 2, 20, vocab.size());
        let params = init_params(&cfg, 9).unwrap();
        let probs = BalanceTables::from_corpus(&corpus);
        let tc = TrainConfig {
            batch_size: 16,
            max_lr: 1e-3,
            warmup_steps: 20,
            total_steps: 150,
            seed: 9,
            checkpoint_every: 150,
            log_every: 150,
            ..TrainConfig::default()
        };
        let dir = TempDir::new().unwrap();
        let outcome = pretrain(params, &all, &[], &vocab, &probs, &tc, dir.path(), None).unwrap();
        let trained =
            cellfm::model::checkpoint::load(&outcome.checkpoint_path).unwrap().params;

        let probe_opts = ProbeOptions::default();
        let sweep = SweepOptions {
            lr_candidates: vec![1e-3, 5e-3],
            seeds: vec![0],
            epochs: 10,
            batch_size: 16,
            frozen: false,
        };

        let embed_matrix = |task: &cellfm::benchmark::EvalTask| -> Array2<f64> {
            let cells = cells_for(task);
            let raw = embed_cells(&trained, &cells).unwrap();
            let mut emb = Array2::zeros((raw.len(), trained.config.d_model));
            for (i, row) in raw.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    emb[[i, j]] = v;
                }
            }
            emb
        };

        // true labels: all three protocols solve the task
        let task = build_disease_folds(&corpus, 3, 3).unwrap();
        let bl = baseline_task(&corpus, &task, 6, &probe_opts).unwrap();
        assert!(bl.mean_accuracy >= 0.99, "baseline accuracy {}", bl.mean_accuracy);
        let pr = linear_probe(&embed_matrix(&task), &task, &probe_opts).unwrap();
        assert!(pr.mean_accuracy >= 0.99, "probe accuracy {}", pr.mean_accuracy);
        let ft = finetune(&trained, &cells_for(&task), &task, &sweep).unwrap();
        assert!(ft.mean_accuracy >= 0.99, "finetune accuracy {}", ft.mean_accuracy);

        // shuffled labels: everything collapses to the majority-class rate
        let shuffled = shuffle_disease_labels(&corpus, 99);
        let task_s = build_disease_folds(&shuffled, 3, 3).unwrap();
        // test splits are 50/50 balanced, so the majority rate is 0.5
        let majority = 0.5;
        let bl = baseline_task(&shuffled, &task_s, 6, &probe_opts).unwrap();
        assert!(
            (bl.mean_accuracy - majority).abs() <= 0.05,
            "shuffled baseline accuracy {}",
            bl.mean_accuracy
        );
        let cells_s: Vec<TokenizedCell> = {
            let dict_s = build_median_dictionary(&shuffled).unwrap();
            let all_s = tokenize_corpus(&shuffled, &dict_s, &vocab, Variant::G, 16).unwrap();
            let by_id_s: HashMap<&str, usize> = shuffled
                .cells
                .iter()
                .enumerate()
                .map(|(i, m)| (m.cell_id.as_str(), i))
                .collect();
            task_s.cell_ids.iter().map(|id| all_s[by_id_s[id.as_str()]].clone()).collect()
        };
        let raw = embed_cells(&trained, &cells_s).unwrap();
        let mut emb_s = Array2::zeros((raw.len(), trained.config.d_model));
        for (i, row) in raw.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                emb_s[[i, j]] = v;
            }
        }
        let pr = linear_probe(&emb_s, &task_s, &probe_opts).unwrap();
        assert!(
            (pr.mean_accuracy - majority).abs() <= 0.05,
            "shuffled probe accuracy {}",
            pr.mean_accuracy
        );
        let ft = finetune(&trained, &cells_s, &task_s, &sweep).unwrap();
        assert!(
            (ft.mean_accuracy - majority).abs() <= 0.05,
            "shuffled finetune accuracy {}",
            ft.mean_accuracy
        );
    });
}

#[test]
fn criterion_11_determinism_and_resume() {
    criterion(11, "determinism and resume", || {
        let mut s = setup(64, 20, 4, 52, 16, Variant::G);
        attach_all_prompts(&mut s.cells, &s.vocab);
        let probs = BalanceTables::from_corpus(&s.corpus);
        let (val, train) = s.cells.split_at(8);
        let cfg = ModelConfig::new(Variant::G, 1, 16, 2, 20, s.vocab.size());
        let tc = TrainConfig {
            batch_size: 8,
            max_lr: 1e-3,
            warmup_steps: 4,
            total_steps: 12,
            seed: 33,
            checkpoint_every: 6,
            log_every: 1,
            ..TrainConfig::default()
        };

        // identical seeds -> bit-identical loss logs
        let dirs: Vec<TempDir> = (0..2).map(|_| TempDir::new().unwrap()).collect();
        for dir in &dirs {
            let params = init_params(&cfg, 33).unwrap();
            pretrain(params, train, val, &s.vocab, &probs, &tc, dir.path(), None).unwrap();
        }
        let log_a = std::fs::read(dirs[0].path().join("loss_log.tsv")).unwrap();
        let log_b = std::fs::read(dirs[1].path().join("loss_log.tsv")).unwrap();
        assert_eq!(log_a, log_b, "loss logs differ between identical runs");

        // resuming from the mid-run checkpoint reproduces the final state
        let mid = dirs[0].path().join("checkpoint-00000006.ckpt");
        let ckpt = cellfm::model::checkpoint::load(&mid).unwrap();
        let resume_dir = TempDir::new().unwrap();
        let params = ckpt.params.clone();
        pretrain(params, train, val, &s.vocab, &probs, &tc, resume_dir.path(), Some(ckpt))
            .unwrap();
        let final_a = std::fs::read(dirs[0].path().join("checkpoint-00000012.ckpt")).unwrap();
        let final_r =
            std::fs::read(resume_dir.path().join("checkpoint-00000012.ckpt")).unwrap();
        assert_eq!(final_a, final_r, "resumed final checkpoint differs byte-for-byte");
    });
}

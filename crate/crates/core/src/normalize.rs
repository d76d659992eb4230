//! Depth normalization and the per-gene non-zero median dictionary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::CountMatrix;
use crate::{Error, Result};

/// Target total per cell after depth normalization.
pub const DEPTH_TARGET: f64 = 10_000.0;

/// Sparse real-valued expression vector: (gene index, value) with values > 0.
pub type SparseVec = Vec<(u32, f64)>;

/// Per-gene non-zero median of depth-normalized expression over a build
/// corpus. Genes never observed non-zero are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneMedianDictionary {
    medians: BTreeMap<String, f64>,
    pub build_corpus_fingerprint: String,
}

impl GeneMedianDictionary {
    pub fn median(&self, gene_id: &str) -> Option<f64> {
        self.medians.get(gene_id).copied()
    }

    pub fn len(&self) -> usize {
        self.medians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.medians.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.medians.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Medians resolved to gene indices of `m` (None for absent genes).
    pub fn by_gene_index(&self, m: &CountMatrix) -> Vec<Option<f64>> {
        m.gene_ids.iter().map(|id| self.median(id)).collect()
    }

    /// Tab-separated `gene_id<TAB>median`, sorted by gene_id, with a header
    /// comment carrying the build-corpus fingerprint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        writeln!(w, "# corpus_fingerprint={}", self.build_corpus_fingerprint)
            .map_err(|e| Error::io(path, e))?;
        for (gene, median) in &self.medians {
            // {:?} prints the shortest representation that round-trips f64
            writeln!(w, "{gene}\t{median:?}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GeneMedianDictionary> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut medians = BTreeMap::new();
        let mut fingerprint = String::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(fp) = rest.trim().strip_prefix("corpus_fingerprint=") {
                    fingerprint = fp.to_string();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (gene, value) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: "expected `gene_id<TAB>median`".into(),
            })?;
            let median: f64 = value.parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("bad median: {e}"),
            })?;
            medians.insert(gene.to_string(), median);
        }
        Ok(GeneMedianDictionary { medians, build_corpus_fingerprint: fingerprint })
    }
}

/// Scale a cell's counts so they total [`DEPTH_TARGET`]; sparsity unchanged.
pub fn depth_normalize(cell: &[(u32, u32)]) -> Result<SparseVec> {
    let total: u64 = cell.iter().map(|&(_, c)| c as u64).sum();
    if total == 0 {
        return Err(Error::ZeroTotalCount);
    }
    Ok(cell
        .iter()
        .map(|&(g, c)| (g, c as f64 * DEPTH_TARGET / total as f64))
        .collect())
}

fn depth_normalized_cell(m: &CountMatrix, cell: usize) -> Result<SparseVec> {
    let pairs: Vec<(u32, u32)> =
        m.cell_counts(cell).iter().map(|t| (t.gene, t.count)).collect();
    depth_normalize(&pairs)
}

/// Exact median of a non-empty slice; even cardinality takes the mean of the
/// two central values.
fn exact_median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite expression values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Collect each gene's non-zero depth-normalized values over the corpus and
/// take the exact median.
///
/// Per-gene value collection runs in parallel; values are sorted before
/// selection so the result is independent of worker count and cell order.
pub fn build_median_dictionary(corpus: &CountMatrix) -> Result<GeneMedianDictionary> {
    if corpus.n_cells == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut per_gene: Vec<Vec<f64>> = vec![Vec::new(); corpus.n_genes];
    for cell in 0..corpus.n_cells {
        for (gene, value) in depth_normalized_cell(corpus, cell)? {
            per_gene[gene as usize].push(value);
        }
    }
    let medians: Vec<Option<f64>> = per_gene
        .par_iter_mut()
        .map(|values| {
            if values.is_empty() {
                None
            } else {
                Some(exact_median(values))
            }
        })
        .collect();
    let map: BTreeMap<String, f64> = corpus
        .gene_ids
        .iter()
        .zip(medians)
        .filter_map(|(id, m)| m.map(|m| (id.clone(), m)))
        .collect();
    Ok(GeneMedianDictionary {
        medians: map,
        build_corpus_fingerprint: corpus.fingerprint(),
    })
}

/// Divide each depth-normalized value by its gene's dictionary median.
/// Genes absent from the dictionary are dropped from the output.
pub fn median_scale(cell: &[(u32, f64)], medians_by_index: &[Option<f64>]) -> SparseVec {
    cell.iter()
        .filter_map(|&(g, v)| medians_by_index[g as usize].map(|m| (g, v / m)))
        .collect()
}

/// Depth-normalize then median-scale one corpus cell.
pub fn normalized_cell(
    m: &CountMatrix,
    cell: usize,
    medians_by_index: &[Option<f64>],
) -> Result<SparseVec> {
    Ok(median_scale(&depth_normalized_cell(m, cell)?, medians_by_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic_corpus, AnnotationSchema, SyntheticSpec};
    use tempfile::TempDir;

    #[test]
    fn depth_normalize_arithmetic() {
        let out = depth_normalize(&[(0, 5), (1, 15)]).unwrap();
        assert_eq!(out, vec![(0, 2500.0), (1, 7500.0)]);
        let single = depth_normalize(&[(3, 7)]).unwrap();
        assert_eq!(single, vec![(3, 10_000.0)]);
    }

    #[test]
    fn depth_normalize_ratio_invariance() {
        let a = depth_normalize(&[(0, 5), (1, 15), (2, 7)]).unwrap();
        let b = depth_normalize(&[(0, 15), (1, 45), (2, 21)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn depth_normalize_rejects_zero_total() {
        assert!(matches!(depth_normalize(&[]), Err(Error::ZeroTotalCount)));
    }

    #[test]
    fn median_selection() {
        assert_eq!(exact_median(&mut [400.0]), 400.0);
        assert_eq!(exact_median(&mut [400.0, 100.0, 200.0]), 200.0);
        assert_eq!(exact_median(&mut [100.0, 200.0, 400.0, 300.0]), 250.0);
    }

    #[test]
    fn scaled_corpus_has_unit_medians() {
        let schema = AnnotationSchema::default();
        let corpus = gen_synthetic_corpus(&SyntheticSpec::new(1000, 80, 20), &schema, 5);
        let dict = build_median_dictionary(&corpus).unwrap();
        let by_idx = dict.by_gene_index(&corpus);
        // oracle: recompute per-gene non-zero medians of the scaled values
        let mut per_gene: Vec<Vec<f64>> = vec![Vec::new(); corpus.n_genes];
        for cell in 0..corpus.n_cells {
            for (g, v) in normalized_cell(&corpus, cell, &by_idx).unwrap() {
                per_gene[g as usize].push(v);
            }
        }
        for values in per_gene.iter_mut().filter(|v| !v.is_empty()) {
            let m = exact_median(values);
            assert!((m - 1.0).abs() <= 1e-9, "scaled median {m}");
        }
    }

    #[test]
    fn dictionary_invariant_to_cell_order_and_rescaling() {
        let schema = AnnotationSchema::default();
        let corpus = gen_synthetic_corpus(&SyntheticSpec::new(60, 30, 6), &schema, 9);
        let dict = build_median_dictionary(&corpus).unwrap();

        // reversed cell order
        let order: Vec<usize> = (0..corpus.n_cells).rev().collect();
        let reversed = corpus.select_cells(&order);
        let dict_rev = build_median_dictionary(&reversed).unwrap();
        for (gene, m) in dict.iter() {
            assert_eq!(dict_rev.median(gene), Some(m));
        }

        // per-cell count rescaling by a positive constant
        let mut entries: Vec<crate::corpus::Triplet> = corpus.entries().to_vec();
        for t in &mut entries {
            if t.cell % 2 == 0 {
                t.count *= 3;
            }
        }
        let rescaled = crate::corpus::CountMatrix::from_triplets(
            entries,
            corpus.gene_ids.clone(),
            corpus.gene_symbols.clone(),
            corpus.cells.clone(),
        )
        .unwrap();
        let dict_rescaled = build_median_dictionary(&rescaled).unwrap();
        for (gene, m) in dict.iter() {
            let other = dict_rescaled.median(gene).unwrap();
            assert!((m - other).abs() <= 1e-9 * m.abs().max(1.0));
        }
    }

    #[test]
    fn median_scale_drops_absent_genes() {
        let by_idx = vec![Some(2500.0), None, Some(100.0)];
        let cell = vec![(0u32, 7500.0), (1, 50.0), (2, 100.0)];
        let out = median_scale(&cell, &by_idx);
        assert_eq!(out, vec![(0, 3.0), (2, 1.0)]);
    }

    #[test]
    fn dictionary_roundtrip_bit_exact() {
        let schema = AnnotationSchema::default();
        let corpus = gen_synthetic_corpus(&SyntheticSpec::new(50, 25, 5), &schema, 2);
        let dict = build_median_dictionary(&corpus).unwrap();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("medians.tsv");
        dict.save(&path).unwrap();
        let back = GeneMedianDictionary::load(&path).unwrap();
        assert_eq!(dict, back);
    }

    #[test]
    fn empty_corpus_rejected() {
        let m = crate::corpus::CountMatrix::from_triplets(vec![], vec![], vec![], vec![]).unwrap();
        assert!(matches!(build_median_dictionary(&m), Err(Error::EmptyCorpus)));
    }
}

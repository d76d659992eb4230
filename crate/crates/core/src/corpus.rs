//! Sparse count-matrix ingestion, quality control, donor holdouts, and
//! synthetic corpus generation.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// The four annotation categories carried as supervision targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Disease,
    TissueType,
    CellType,
    Sex,
}

impl Category {
    /// Fixed prompt order: disease, tissue_type, cell_type, sex.
    pub const ALL: [Category; 4] = [
        Category::Disease,
        Category::TissueType,
        Category::CellType,
        Category::Sex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Disease => "disease",
            Category::TissueType => "tissue_type",
            Category::CellType => "cell_type",
            Category::Sex => "sex",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered coarse label lists per annotation category (43 labels total).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSchema {
    pub disease: Vec<String>,
    pub tissue_type: Vec<String>,
    pub cell_type: Vec<String>,
    pub sex: Vec<String>,
}

impl Default for AnnotationSchema {
    fn default() -> Self {
        fn v(labels: &[&str]) -> Vec<String> {
            labels.iter().map(|s| s.to_string()).collect()
        }
        AnnotationSchema {
            disease: v(&[
                "brain",
                "cancer",
                "cardiovascular",
                "genetic",
                "immune",
                "infectious",
                "kidney",
                "respiratory",
                "other",
                "healthy",
            ]),
            tissue_type: v(&[
                "adipose",
                "cardiovascular",
                "central nervous",
                "digestive",
                "embryonic",
                "endocrine",
                "exocrine",
                "eye",
                "hematopoietic",
                "hepatic",
                "integumentary",
                "musculature",
                "renal",
                "reproductive",
                "respiratory",
                "sensory",
                "unknown",
            ]),
            cell_type: v(&[
                "ciliated",
                "connective",
                "contractile",
                "embryonic",
                "epithelial",
                "hematopoietic",
                "immune",
                "neural",
                "perivascular",
                "precursor",
                "secretory",
                "skeletal",
                "unknown",
            ]),
            sex: v(&["male", "female", "unknown"]),
        }
    }
}

impl AnnotationSchema {
    pub fn labels(&self, cat: Category) -> &[String] {
        match cat {
            Category::Disease => &self.disease,
            Category::TissueType => &self.tissue_type,
            Category::CellType => &self.cell_type,
            Category::Sex => &self.sex,
        }
    }

    /// Total label count across the four categories.
    pub fn total_labels(&self) -> usize {
        Category::ALL.iter().map(|&c| self.labels(c).len()).sum()
    }

    pub fn contains(&self, cat: Category, label: &str) -> bool {
        self.labels(cat).iter().any(|l| l == label)
    }

    /// Position of a label within its category's ordered list.
    pub fn label_index(&self, cat: Category, label: &str) -> Option<usize> {
        self.labels(cat).iter().position(|l| l == label)
    }
}

/// Per-cell metadata: identity, donor, dataset, and coarse annotation labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellMeta {
    pub cell_id: String,
    pub donor_id: String,
    pub dataset_id: String,
    /// Absent categories carry no entry.
    pub labels: HashMap<Category, String>,
}

/// One stored non-zero count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub cell: u32,
    pub gene: u32,
    pub count: u32,
}

/// Sparse cell x gene raw-count matrix with per-cell metadata.
///
/// Entries are stored sorted by (cell, gene) with row offsets so per-cell
/// slices are O(1) to obtain. Zeros are absent, never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMatrix {
    pub n_cells: usize,
    pub n_genes: usize,
    entries: Vec<Triplet>,
    row_offsets: Vec<usize>,
    pub gene_ids: Vec<String>,
    pub gene_symbols: Vec<String>,
    pub cells: Vec<CellMeta>,
}

impl CountMatrix {
    /// Assemble a matrix from unordered triplets, validating invariants.
    pub fn from_triplets(
        mut entries: Vec<Triplet>,
        gene_ids: Vec<String>,
        gene_symbols: Vec<String>,
        cells: Vec<CellMeta>,
    ) -> Result<CountMatrix> {
        let n_cells = cells.len();
        let n_genes = gene_ids.len();
        let mut seen_genes = HashSet::new();
        for g in &gene_ids {
            if !seen_genes.insert(g.clone()) {
                return Err(Error::DuplicateGeneId(g.clone()));
            }
        }
        let mut seen_cells = HashSet::new();
        for c in &cells {
            if !seen_cells.insert(c.cell_id.clone()) {
                return Err(Error::DuplicateCellId(c.cell_id.clone()));
            }
        }
        for t in &entries {
            if t.cell as usize >= n_cells || t.gene as usize >= n_genes {
                return Err(Error::InvalidInput(format!(
                    "triplet ({}, {}) out of bounds for {} cells x {} genes",
                    t.cell, t.gene, n_cells, n_genes
                )));
            }
            if t.count == 0 {
                return Err(Error::InvalidInput(
                    "zero count stored explicitly".to_string(),
                ));
            }
        }
        entries.sort_by_key(|t| (t.cell, t.gene));
        for w in entries.windows(2) {
            if w[0].cell == w[1].cell && w[0].gene == w[1].gene {
                return Err(Error::InvalidInput(format!(
                    "duplicate entry for cell {}, gene {}",
                    w[0].cell, w[0].gene
                )));
            }
        }
        let row_offsets = build_offsets(&entries, n_cells);
        Ok(CountMatrix {
            n_cells,
            n_genes,
            entries,
            row_offsets,
            gene_ids,
            gene_symbols,
            cells,
        })
    }

    /// Non-zero (gene index, count) pairs for one cell, ascending by gene.
    pub fn cell_counts(&self, cell: usize) -> &[Triplet] {
        &self.entries[self.row_offsets[cell]..self.row_offsets[cell + 1]]
    }

    pub fn entries(&self) -> &[Triplet] {
        &self.entries
    }

    pub fn total_count(&self, cell: usize) -> u64 {
        self.cell_counts(cell).iter().map(|t| t.count as u64).sum()
    }

    /// Distinct donor ids present, in first-seen order.
    pub fn donors(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for c in &self.cells {
            if seen.insert(c.donor_id.clone()) {
                out.push(c.donor_id.clone());
            }
        }
        out
    }

    /// New matrix keeping only the cells at `keep` (in the given order),
    /// gene axis unchanged.
    pub fn select_cells(&self, keep: &[usize]) -> CountMatrix {
        let mut entries = Vec::new();
        let mut cells = Vec::with_capacity(keep.len());
        for (new_idx, &old_idx) in keep.iter().enumerate() {
            cells.push(self.cells[old_idx].clone());
            for t in self.cell_counts(old_idx) {
                entries.push(Triplet { cell: new_idx as u32, gene: t.gene, count: t.count });
            }
        }
        let row_offsets = build_offsets(&entries, cells.len());
        CountMatrix {
            n_cells: cells.len(),
            n_genes: self.n_genes,
            entries,
            row_offsets,
            gene_ids: self.gene_ids.clone(),
            gene_symbols: self.gene_symbols.clone(),
            cells,
        }
    }

    /// SHA-256 over the logical content, used to fingerprint derived artifacts.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.n_cells.to_le_bytes());
        h.update(self.n_genes.to_le_bytes());
        for t in &self.entries {
            h.update(t.cell.to_le_bytes());
            h.update(t.gene.to_le_bytes());
            h.update(t.count.to_le_bytes());
        }
        for g in &self.gene_ids {
            h.update(g.as_bytes());
            h.update([0]);
        }
        for c in &self.cells {
            h.update(c.cell_id.as_bytes());
            h.update([0]);
        }
        hex_digest(&h.finalize())
    }
}

fn build_offsets(entries: &[Triplet], n_cells: usize) -> Vec<usize> {
    let mut offsets = vec![0usize; n_cells + 1];
    for t in entries {
        offsets[t.cell as usize + 1] += 1;
    }
    for i in 0..n_cells {
        offsets[i + 1] += offsets[i];
    }
    offsets
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Load a corpus from the three text files (matrix triplets, genes, cells).
///
/// The matrix file holds a `n_cells n_genes n_entries` header followed by
/// 1-based `cell_idx gene_idx count` triplets; indices are converted to
/// 0-based here. Unknown annotation labels are rejected, not coerced.
pub fn load_counts(
    matrix_path: &Path,
    genes_path: &Path,
    cells_path: &Path,
    schema: &AnnotationSchema,
) -> Result<CountMatrix> {
    let (gene_ids, gene_symbols) = load_genes(genes_path)?;
    let cells = load_cells(cells_path, schema)?;

    let file = File::open(matrix_path).map_err(|e| Error::io(matrix_path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (line_no, header) = lines
        .next()
        .ok_or_else(|| parse_err(matrix_path, 1, "empty matrix file"))?;
    let header = header.map_err(|e| Error::io(matrix_path, e))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(matrix_path, line_no + 1, &format!("bad header: {e}")))?;
    if dims.len() != 3 {
        return Err(parse_err(matrix_path, 1, "header must be `n_cells n_genes n_entries`"));
    }
    let (n_cells, n_genes, n_entries) = (dims[0], dims[1], dims[2]);
    if n_cells != cells.len() {
        return Err(parse_err(
            matrix_path,
            1,
            &format!("header declares {} cells but cells file has {}", n_cells, cells.len()),
        ));
    }
    if n_genes != gene_ids.len() {
        return Err(parse_err(
            matrix_path,
            1,
            &format!("header declares {} genes but genes file has {}", n_genes, gene_ids.len()),
        ));
    }

    let mut entries = Vec::with_capacity(n_entries);
    let mut seen = HashSet::with_capacity(n_entries);
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(matrix_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut field = |name: &str| -> Result<u64> {
            it.next()
                .ok_or_else(|| parse_err(matrix_path, line_no, &format!("missing {name}")))?
                .parse::<u64>()
                .map_err(|e| parse_err(matrix_path, line_no, &format!("bad {name}: {e}")))
        };
        let cell_1b = field("cell index")?;
        let gene_1b = field("gene index")?;
        let count = field("count")?;
        if it.next().is_some() {
            return Err(parse_err(matrix_path, line_no, "trailing fields"));
        }
        if cell_1b == 0 || cell_1b as usize > n_cells {
            return Err(Error::IndexOutOfBounds {
                path: matrix_path.to_path_buf(),
                line: line_no,
                msg: format!("cell index {cell_1b} not in [1, {n_cells}]"),
            });
        }
        if gene_1b == 0 || gene_1b as usize > n_genes {
            return Err(Error::IndexOutOfBounds {
                path: matrix_path.to_path_buf(),
                line: line_no,
                msg: format!("gene index {gene_1b} not in [1, {n_genes}]"),
            });
        }
        if count == 0 {
            return Err(Error::ZeroCount { path: matrix_path.to_path_buf(), line: line_no });
        }
        let (cell, gene) = ((cell_1b - 1) as u32, (gene_1b - 1) as u32);
        if !seen.insert((cell, gene)) {
            return Err(Error::DuplicateEntry {
                path: matrix_path.to_path_buf(),
                line: line_no,
                cell: cell as usize,
                gene: gene as usize,
            });
        }
        entries.push(Triplet { cell, gene, count: count as u32 });
    }
    if entries.len() != n_entries {
        return Err(parse_err(
            matrix_path,
            1,
            &format!("header declares {} entries but file has {}", n_entries, entries.len()),
        ));
    }
    CountMatrix::from_triplets(entries, gene_ids, gene_symbols, cells)
}

fn parse_err(path: &Path, line: usize, msg: &str) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.to_string() }
}

fn load_genes(path: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut symbols = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        let id = it
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(path, idx + 1, "missing gene_id"))?;
        let symbol = it.next().unwrap_or("");
        ids.push(id.to_string());
        symbols.push(symbol.to_string());
    }
    Ok((ids, symbols))
}

fn load_cells(path: &Path, schema: &AnnotationSchema) -> Result<Vec<CellMeta>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut cells = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(parse_err(
                path,
                idx + 1,
                &format!("expected 7 tab-separated fields, got {}", fields.len()),
            ));
        }
        let mut labels = HashMap::new();
        for (cat, field) in Category::ALL.iter().zip(&fields[3..7]) {
            if field.is_empty() {
                continue;
            }
            if !schema.contains(*cat, field) {
                return Err(Error::UnknownLabel {
                    category: cat.name().to_string(),
                    label: field.to_string(),
                });
            }
            labels.insert(*cat, field.to_string());
        }
        cells.push(CellMeta {
            cell_id: fields[0].to_string(),
            donor_id: fields[1].to_string(),
            dataset_id: fields[2].to_string(),
            labels,
        });
    }
    Ok(cells)
}

/// Write a corpus back to the three-file text layout read by [`load_counts`].
pub fn save_counts(m: &CountMatrix, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let matrix_path = dir.join("matrix.txt");
    let mut w = BufWriter::new(File::create(&matrix_path).map_err(|e| Error::io(&matrix_path, e))?);
    writeln!(w, "{} {} {}", m.n_cells, m.n_genes, m.entries.len())
        .map_err(|e| Error::io(&matrix_path, e))?;
    for t in &m.entries {
        writeln!(w, "{} {} {}", t.cell + 1, t.gene + 1, t.count)
            .map_err(|e| Error::io(&matrix_path, e))?;
    }
    let genes_path = dir.join("genes.tsv");
    let mut w = BufWriter::new(File::create(&genes_path).map_err(|e| Error::io(&genes_path, e))?);
    for (id, sym) in m.gene_ids.iter().zip(&m.gene_symbols) {
        writeln!(w, "{id}\t{sym}").map_err(|e| Error::io(&genes_path, e))?;
    }
    let cells_path = dir.join("cells.tsv");
    let mut w = BufWriter::new(File::create(&cells_path).map_err(|e| Error::io(&cells_path, e))?);
    for c in &m.cells {
        let get = |cat| c.labels.get(&cat).map(String::as_str).unwrap_or("");
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.cell_id,
            c.donor_id,
            c.dataset_id,
            get(Category::Disease),
            get(Category::TissueType),
            get(Category::CellType),
            get(Category::Sex),
        )
        .map_err(|e| Error::io(&cells_path, e))?;
    }
    Ok(())
}

/// Load a corpus from a directory written by [`save_counts`].
pub fn load_corpus_dir(dir: &Path, schema: &AnnotationSchema) -> Result<CountMatrix> {
    load_counts(
        &dir.join("matrix.txt"),
        &dir.join("genes.tsv"),
        &dir.join("cells.tsv"),
        schema,
    )
}

/// Mitochondrial gene set: gene ids whose symbol starts with "MT-".
pub fn default_mito_genes(m: &CountMatrix) -> HashSet<String> {
    m.gene_ids
        .iter()
        .zip(&m.gene_symbols)
        .filter(|(_, sym)| sym.starts_with("MT-"))
        .map(|(id, _)| id.clone())
        .collect()
}

/// Remove low-quality cells: total count below `min_counts` or mitochondrial
/// fraction above `max_mito_frac` (both strict inequalities). Gene axis and
/// survivor order are unchanged.
pub fn qc_filter(
    m: &CountMatrix,
    min_counts: u64,
    max_mito_frac: f64,
    mito_genes: &HashSet<String>,
) -> CountMatrix {
    let mito_idx: HashSet<u32> = m
        .gene_ids
        .iter()
        .enumerate()
        .filter(|(_, id)| mito_genes.contains(*id))
        .map(|(i, _)| i as u32)
        .collect();
    let keep: Vec<usize> = (0..m.n_cells)
        .filter(|&i| {
            let total = m.total_count(i);
            if total < min_counts {
                return false;
            }
            let mito: u64 = m
                .cell_counts(i)
                .iter()
                .filter(|t| mito_idx.contains(&t.gene))
                .map(|t| t.count as u64)
                .sum();
            let frac = if total == 0 { 0.0 } else { mito as f64 / total as f64 };
            frac <= max_mito_frac
        })
        .collect();
    m.select_cells(&keep)
}

/// QC defaults: minimum total count per cell.
pub const DEFAULT_MIN_COUNTS: u64 = 225;
/// QC defaults: maximum mitochondrial count fraction.
pub const DEFAULT_MAX_MITO_FRAC: f64 = 0.10;

/// Partition cells by donor: (cells whose donor is NOT held, cells whose donor is held).
pub fn split_by_donors(
    m: &CountMatrix,
    held_donors: &HashSet<String>,
) -> (CountMatrix, CountMatrix) {
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for (i, c) in m.cells.iter().enumerate() {
        if held_donors.contains(&c.donor_id) {
            held.push(i);
        } else {
            kept.push(i);
        }
    }
    (m.select_cells(&kept), m.select_cells(&held))
}

/// Download `url` to `dest`, verifying a hex SHA-256 digest when given.
/// Transient network failures are retried a bounded number of times.
pub fn fetch_dataset(url: &str, dest: &Path, expected_digest: Option<&str>) -> Result<PathBuf> {
    const RETRIES: usize = 3;
    let mut last_err = String::new();
    for attempt in 0..RETRIES {
        match ureq::get(url).call() {
            Ok(resp) => {
                let mut body = Vec::new();
                resp.into_reader()
                    .read_to_end(&mut body)
                    .map_err(|e| Error::Network { url: url.to_string(), msg: e.to_string() })?;
                if let Some(expected) = expected_digest {
                    let actual = hex_digest(&Sha256::digest(&body));
                    if !actual.eq_ignore_ascii_case(expected) {
                        return Err(Error::DigestMismatch {
                            expected: expected.to_string(),
                            actual,
                        });
                    }
                }
                if let Some(parent) = dest.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                std::fs::write(dest, &body).map_err(|e| Error::io(dest, e))?;
                return Ok(dest.to_path_buf());
            }
            Err(e) => {
                last_err = e.to_string();
                if attempt + 1 < RETRIES {
                    std::thread::sleep(std::time::Duration::from_millis(100 << attempt));
                }
            }
        }
    }
    Err(Error::Network { url: url.to_string(), msg: format!("after {RETRIES} attempts: {last_err}") })
}

/// Parameters for [`gen_synthetic_corpus`].
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_cells: usize,
    pub n_genes: usize,
    pub n_donors: usize,
    /// Range of expressed genes per cell (inclusive bounds).
    pub genes_per_cell: (usize, usize),
}

impl SyntheticSpec {
    pub fn new(n_cells: usize, n_genes: usize, n_donors: usize) -> Self {
        let hi = (n_genes / 2).max(2);
        let lo = (n_genes / 5).clamp(1, hi);
        SyntheticSpec { n_cells, n_genes, n_donors, genes_per_cell: (lo, hi) }
    }
}

/// Deterministic synthetic corpus for tests and desk-scale runs.
///
/// Every cell carries all four annotation labels; donors are assigned
/// round-robin so each donor has at least one cell; counts are drawn from a
/// log-normal so rank encodings are non-degenerate.
pub fn gen_synthetic_corpus(
    spec: &SyntheticSpec,
    schema: &AnnotationSchema,
    seed: u64,
) -> CountMatrix {
    assert!(spec.n_donors <= spec.n_cells, "n_donors must be <= n_cells");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gene_ids: Vec<String> = (0..spec.n_genes).map(|i| format!("GENE{i:05}")).collect();
    let gene_symbols: Vec<String> = (0..spec.n_genes).map(|i| format!("Sym{i}")).collect();
    let lognorm = LogNormal::new(2.0, 1.2).expect("valid lognormal");

    let mut entries = Vec::new();
    let mut cells = Vec::with_capacity(spec.n_cells);
    for cell in 0..spec.n_cells {
        let donor = cell % spec.n_donors;
        let mut labels = HashMap::new();
        for cat in Category::ALL {
            let opts = schema.labels(cat);
            labels.insert(cat, opts[rng.gen_range(0..opts.len())].clone());
        }
        cells.push(CellMeta {
            cell_id: format!("cell{cell:06}"),
            donor_id: format!("donor{donor:04}"),
            dataset_id: "synthetic".to_string(),
            labels,
        });

        let (lo, hi) = spec.genes_per_cell;
        let k = rng.gen_range(lo..=hi).min(spec.n_genes);
        let mut picked = BTreeSet::new();
        while picked.len() < k {
            picked.insert(rng.gen_range(0..spec.n_genes) as u32);
        }
        for gene in picked {
            let count: f64 = lognorm.sample(&mut rng);
            let count = count.ceil().max(1.0) as u32;
            entries.push(Triplet { cell: cell as u32, gene, count });
        }
    }
    CountMatrix::from_triplets(entries, gene_ids, gene_symbols, cells)
        .expect("synthetic corpus satisfies invariants by construction")
}

//! Token vocabulary: special tokens, annotation label tokens, gene tokens.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::corpus::{AnnotationSchema, Category};
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;

/// Number of special tokens: `<pad>`, `<mask>`, and the four prompt tokens.
pub const NUM_SPECIALS: u32 = 6;

/// Special prompt token id for a category.
pub fn prompt_token(cat: Category) -> u32 {
    match cat {
        Category::Disease => 2,
        Category::TissueType => 3,
        Category::CellType => 4,
        Category::Sex => 5,
    }
}

fn category_of_prompt(token: u32) -> Option<Category> {
    match token {
        2 => Some(Category::Disease),
        3 => Some(Category::TissueType),
        4 => Some(Category::CellType),
        5 => Some(Category::Sex),
        _ => None,
    }
}

/// Dense, deterministic token id assignment: specials occupy the lowest ids,
/// then the 43 annotation label tokens in schema order, then genes in the
/// order given at construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    schema: AnnotationSchema,
    gene_ids: Vec<String>,
    gene_base: u32,
    /// Label-token base per category, in prompt order.
    label_bases: [u32; 4],
    #[serde(skip)]
    gene_lookup: std::cell::OnceCell<HashMap<String, u32>>,
}

impl Vocabulary {
    pub fn new(gene_ids: Vec<String>, schema: AnnotationSchema) -> Result<Vocabulary> {
        let mut seen = std::collections::HashSet::new();
        for g in &gene_ids {
            if !seen.insert(g) {
                return Err(Error::DuplicateGeneId(g.clone()));
            }
        }
        let mut label_bases = [0u32; 4];
        let mut next = NUM_SPECIALS;
        for (i, cat) in Category::ALL.iter().enumerate() {
            label_bases[i] = next;
            next += schema.labels(*cat).len() as u32;
        }
        Ok(Vocabulary {
            schema,
            gene_ids,
            gene_base: next,
            label_bases,
            gene_lookup: std::cell::OnceCell::new(),
        })
    }

    /// Total vocabulary size V.
    pub fn size(&self) -> usize {
        self.gene_base as usize + self.gene_ids.len()
    }

    pub fn schema(&self) -> &AnnotationSchema {
        &self.schema
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    /// Token id for the gene at `gene_index` (the corpus gene axis).
    pub fn gene_token(&self, gene_index: u32) -> u32 {
        debug_assert!((gene_index as usize) < self.gene_ids.len());
        self.gene_base + gene_index
    }

    /// Corpus gene index for a gene token, if it is one.
    pub fn gene_index(&self, token: u32) -> Option<u32> {
        if token >= self.gene_base && ((token - self.gene_base) as usize) < self.gene_ids.len() {
            Some(token - self.gene_base)
        } else {
            None
        }
    }

    pub fn gene_id_of_token(&self, token: u32) -> Option<&str> {
        self.gene_index(token).map(|i| self.gene_ids[i as usize].as_str())
    }

    pub fn token_of_gene_id(&self, gene_id: &str) -> Option<u32> {
        let lookup = self.gene_lookup.get_or_init(|| {
            self.gene_ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), self.gene_base + i as u32))
                .collect()
        });
        lookup.get(gene_id).copied()
    }

    /// Token id of a label within its category.
    pub fn label_token(&self, cat: Category, label: &str) -> Option<u32> {
        let idx = self.schema.label_index(cat, label)?;
        let cat_pos = Category::ALL.iter().position(|&c| c == cat).unwrap();
        Some(self.label_bases[cat_pos] + idx as u32)
    }

    /// Resolve a label token to (category, class index within the category).
    pub fn label_of_token(&self, token: u32) -> Option<(Category, usize)> {
        for (i, cat) in Category::ALL.iter().enumerate() {
            let base = self.label_bases[i];
            let n = self.schema.labels(*cat).len() as u32;
            if token >= base && token < base + n {
                return Some((*cat, (token - base) as usize));
            }
        }
        None
    }

    pub fn label_string_of_token(&self, token: u32) -> Option<&str> {
        let (cat, idx) = self.label_of_token(token)?;
        Some(self.schema.labels(cat)[idx].as_str())
    }

    pub fn category_of_prompt_token(&self, token: u32) -> Option<Category> {
        category_of_prompt(token)
    }

    /// Printable form of any token id.
    pub fn describe(&self, token: u32) -> String {
        match token {
            PAD => "<pad>".to_string(),
            MASK => "<mask>".to_string(),
            t if category_of_prompt(t).is_some() => {
                format!("<{}>", category_of_prompt(t).unwrap().name())
            }
            t => {
                if let Some((cat, idx)) = self.label_of_token(t) {
                    format!("{}:{}", cat.name(), self.schema.labels(cat)[idx])
                } else if let Some(id) = self.gene_id_of_token(t) {
                    id.to_string()
                } else {
                    format!("<invalid:{t}>")
                }
            }
        }
    }
}

/// Deterministic vocabulary over the given gene list and schema.
pub fn build_vocabulary(gene_ids: &[String], schema: &AnnotationSchema) -> Result<Vocabulary> {
    Vocabulary::new(gene_ids.to_vec(), schema.clone())
}

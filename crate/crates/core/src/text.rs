//! Tokenization and the TF-IDF vector space shared by the resolver's name
//! match and by memory pick-up.
//!
//! The variant is fixed: raw term counts, `idf = ln((1 + n) / (1 + df)) + 1`,
//! L2-normalized vectors, tokens are case-folded maximal alphanumeric runs.
//! Terms outside the fitted vocabulary carry no weight.

use std::collections::{BTreeMap, BTreeSet, HashMap};

/// Case-folded maximal alphanumeric runs, in order of appearance.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().collect()
}

/// Sparse term-weight vector keyed by token.
pub type SparseVector = BTreeMap<String, f64>;

#[derive(Debug, Clone, Default)]
pub struct TfIdfSpace {
    doc_count: usize,
    doc_freq: HashMap<String, usize>,
}

impl TfIdfSpace {
    pub fn fit<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut doc_freq = HashMap::new();
        for doc in corpus {
            for term in token_set(doc.as_ref()) {
                *doc_freq.entry(term).or_insert(0) += 1;
            }
        }
        TfIdfSpace {
            doc_count: corpus.len(),
            doc_freq,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.doc_freq.get(term).map(|&df| {
            ((1.0 + self.doc_count as f64) / (1.0 + df as f64)).ln() + 1.0
        })
    }

    /// Unnormalized tf·idf weights over in-vocabulary terms.
    pub fn weights(&self, text: &str) -> SparseVector {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokenize(text) {
            *counts.entry(t).or_insert(0) += 1;
        }
        counts
            .into_iter()
            .filter_map(|(term, tf)| self.idf(&term).map(|idf| (term, tf as f64 * idf)))
            .collect()
    }

    /// L2-normalized vector; the zero vector when nothing is in vocabulary.
    pub fn vectorize(&self, text: &str) -> SparseVector {
        let mut v = self.weights(text);
        let norm = v.values().map(|w| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for w in v.values_mut() {
                *w /= norm;
            }
        }
        v
    }

    /// Cosine similarity in `[0, 1]`; 0 if either side is the zero vector.
    pub fn cosine(&self, a: &str, b: &str) -> f64 {
        cosine_sparse(&self.weights(a), &self.weights(b))
    }
}

pub fn cosine_sparse(a: &SparseVector, b: &SparseVector) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small
        .iter()
        .filter_map(|(t, w)| large.get(t).map(|x| w * x))
        .sum();
    let na: f64 = a.values().map(|w| w * w).sum();
    let nb: f64 = b.values().map(|w| w * w).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
}

/// Rough token estimate used for budgets: one token per four characters.
pub fn approx_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

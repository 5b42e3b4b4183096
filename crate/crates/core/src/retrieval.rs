//! Retrievers behind one interface, so benchmarks and the feedback-loop
//! simulator can swap sparse, trigram and fuzzy matching freely.

use std::sync::Arc;

use crate::baselines::{FuzzyConfig, FuzzyRetriever, TrigramRetriever};
use crate::encoder::{encode_doc, EncoderParams};
use crate::error::Result;
use crate::index::{DocEntry, IndexDoc, InvertedIndex, SearchHit};
use crate::sparse::{dot_score, encode_query_with, normalize, QueryWeighting, SparseVector};
use crate::tokenizer::{TokenizerModel, UNK_ID};

pub trait Retriever {
    /// Top-`k` documents, ids referring to build order.
    fn retrieve(&self, query: &str, k: usize) -> Vec<SearchHit>;

    /// Score a document with the query's own text would receive; used to
    /// turn raw scores into a similarity in `[0, 1]`.
    fn self_score(&self, query: &str) -> f64;
}

/// How document text becomes a sparse vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum DocEncoding {
    /// Weight 1 for every distinct token of the text.
    #[default]
    Binary,
    /// Learned expansion.
    Expansion(EncoderParams),
}

impl DocEncoding {
    /// Unknown characters are dropped; a text with no known tokens encodes
    /// to the empty vector.
    pub fn encode(&self, tokenizer: &TokenizerModel, text: &str) -> Result<SparseVector> {
        let mut ids = tokenizer.segment(&normalize(text));
        ids.retain(|&t| t != UNK_ID);
        if ids.is_empty() {
            return Ok(SparseVector::empty());
        }
        match self {
            DocEncoding::Binary => SparseVector::from_pairs(ids.into_iter().map(|t| (t, 1.0))),
            DocEncoding::Expansion(params) => encode_doc(params, &ids),
        }
    }
}

/// Granular-tokenizer sparse retrieval over an inverted index.
#[derive(Debug, Clone)]
pub struct SparseRetriever {
    tokenizer: Arc<TokenizerModel>,
    encoding: DocEncoding,
    weighting: QueryWeighting,
    index: InvertedIndex,
}

impl SparseRetriever {
    pub fn build<I, S, T>(tokenizer: Arc<TokenizerModel>, encoding: DocEncoding, docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let mut prepared = Vec::new();
        for (id, text) in docs {
            let vector = encoding.encode(&tokenizer, text.as_ref())?;
            prepared.push(IndexDoc::new(id, text.as_ref(), vector));
        }
        let index = InvertedIndex::build(prepared)?;
        Ok(Self { tokenizer, encoding, weighting: QueryWeighting::Idf, index })
    }

    /// Wraps an index built elsewhere (for example from external vectors).
    pub fn from_index(tokenizer: Arc<TokenizerModel>, encoding: DocEncoding, index: InvertedIndex) -> Self {
        Self { tokenizer, encoding, weighting: QueryWeighting::Idf, index }
    }

    pub fn with_weighting(mut self, weighting: QueryWeighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    pub fn tokenizer(&self) -> &TokenizerModel {
        &self.tokenizer
    }

    pub fn encode_query(&self, query: &str) -> SparseVector {
        encode_query_with(&self.tokenizer, self.index.stats(), query, self.weighting)
    }

    pub fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>> {
        self.index.search(&self.encode_query(query), k)
    }

    pub fn doc(&self, hit: &SearchHit) -> &DocEntry {
        self.index.doc(hit.doc_id).expect("hits refer to indexed documents")
    }
}

impl Retriever for SparseRetriever {
    fn retrieve(&self, query: &str, k: usize) -> Vec<SearchHit> {
        self.index.search_scored(&self.encode_query(query), k)
    }

    fn self_score(&self, query: &str) -> f64 {
        let doc = self.encoding.encode(&self.tokenizer, query).unwrap_or_default();
        dot_score(&self.encode_query(query), &doc)
    }
}

impl Retriever for TrigramRetriever {
    fn retrieve(&self, query: &str, k: usize) -> Vec<SearchHit> {
        self.index().search_scored(&self.encode_query(query), k)
    }

    fn self_score(&self, query: &str) -> f64 {
        TrigramRetriever::self_score(self, query)
    }
}

/// [`FuzzyRetriever`] bound to one configuration.
#[derive(Debug, Clone)]
pub struct ConfiguredFuzzy {
    pub inner: FuzzyRetriever,
    pub cfg: FuzzyConfig,
}

impl Retriever for ConfiguredFuzzy {
    fn retrieve(&self, query: &str, k: usize) -> Vec<SearchHit> {
        if k == 0 {
            return Vec::new();
        }
        self.inner.search(query, &self.cfg, k).unwrap_or_default()
    }

    fn self_score(&self, query: &str) -> f64 {
        self.inner.self_score(query)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Piece;

    fn tokenizer() -> Arc<TokenizerModel> {
        let pieces = ["p", "i", "n", "k", "!", "pi", "nk", "m", "e", "me"]
            .iter()
            .map(|t| Piece { text: t.to_string(), log_prob: -(t.len() as f64).recip() - 1.0 })
            .collect();
        Arc::new(TokenizerModel::new(pieces, 3).unwrap())
    }

    #[test]
    fn sparse_matches_short_words_and_variants() {
        let r = SparseRetriever::build(tokenizer(), DocEncoding::Binary, [("a", "pink"), ("b", "me"), ("c", "kin")])
            .unwrap();
        let hits = r.search("p!nk", 3).unwrap();
        assert_eq!(r.doc(&hits[0]).ext_id, "a");
        let hits = r.search("me", 3).unwrap();
        assert_eq!(r.doc(&hits[0]).ext_id, "b");
        assert!(r.self_score("pink") >= hits[0].score.min(r.self_score("pink")));
        assert!(r.search("zzz", 3).unwrap().is_empty());
    }

    #[test]
    fn unknown_only_text_encodes_empty() {
        let v = DocEncoding::Binary.encode(&tokenizer(), "zzz").unwrap();
        assert!(v.is_empty());
    }
}

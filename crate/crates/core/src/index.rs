//! Exact top-k dot-product retrieval over quantized document vectors.
//!
//! Postings are kept per token id, sorted by document id, and carry binary16
//! weights. Search is term-at-a-time into a dense accumulator; with desk-scale
//! corpora that is cheap and gives exact scores, so no dynamic pruning.
//!
//! On-disk layout (little-endian):
//!
//! ```text
//! "SFNS" | u16 version | u64 len, doc_table | u64 len, postings | u64 len, stats | u32 crc32c
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::sparse::{dequantize, quantize, QuantizedWeight, SparseVector, TokenId, VocabStats};

pub type DocId = u64;

const MAGIC: &[u8; 4] = b"SFNS";
pub const FORMAT_VERSION: u16 = 1;

/// A document handed to [`InvertedIndex::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct IndexDoc {
    /// External identifier, unique within the index.
    pub ext_id: String,
    pub text: String,
    pub payload: Option<String>,
    pub vector: SparseVector,
}

impl IndexDoc {
    pub fn new(ext_id: impl Into<String>, text: impl Into<String>, vector: SparseVector) -> Self {
        Self { ext_id: ext_id.into(), text: text.into(), payload: None, vector }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocEntry {
    pub ext_id: String,
    pub text: String,
    pub payload: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: DocId,
    pub weight: QuantizedWeight,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub doc_id: DocId,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvertedIndex {
    postings: BTreeMap<TokenId, Vec<Posting>>,
    docs: Vec<DocEntry>,
    stats: VocabStats,
}

impl InvertedIndex {
    /// Document ids are assigned in input order. Weights are stored as
    /// binary16; entries that round to zero are not indexed.
    pub fn build<I>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = IndexDoc>,
    {
        let mut seen = HashSet::new();
        let mut index = Self::default();
        for doc in docs {
            if !seen.insert(doc.ext_id.clone()) {
                return Err(Error::DuplicateDoc(doc.ext_id));
            }
            let id = index.docs.len() as DocId;
            let mut stored = Vec::with_capacity(doc.vector.len());
            for (token, w) in doc.vector.iter() {
                let q = quantize(w)?;
                if q.bits() != 0 {
                    index.postings.entry(token).or_default().push(Posting { doc: id, weight: q });
                    stored.push((token, dequantize(q)));
                }
            }
            index.stats.add_document(&SparseVector::from_sorted_unchecked(stored));
            index.docs.push(DocEntry { ext_id: doc.ext_id, text: doc.text, payload: doc.payload });
        }
        Ok(index)
    }

    pub fn stats(&self) -> &VocabStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc(&self, id: DocId) -> Option<&DocEntry> {
        self.docs.get(id as usize)
    }

    pub fn docs(&self) -> &[DocEntry] {
        &self.docs
    }

    pub fn postings(&self, token: TokenId) -> &[Posting] {
        self.postings.get(&token).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn num_postings(&self) -> usize {
        self.postings.values().map(Vec::len).sum()
    }

    /// Mean number of stored non-zero dimensions per document.
    pub fn avg_nonzero_dims(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.num_postings() as f64 / self.docs.len() as f64
        }
    }

    /// Reassembles the stored (dequantized) vector of one document.
    pub fn doc_vector(&self, id: DocId) -> SparseVector {
        let mut entries = Vec::new();
        for (&token, list) in &self.postings {
            if let Ok(i) = list.binary_search_by_key(&id, |p| p.doc) {
                entries.push((token, dequantize(list[i].weight)));
            }
        }
        SparseVector::from_sorted_unchecked(entries)
    }

    /// Exact top-k by dot product. Ties go to the lower document id; only
    /// documents with a positive score are returned.
    pub fn search(&self, q: &SparseVector, k: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        Ok(self.search_scored(q, k))
    }

    pub(crate) fn search_scored(&self, q: &SparseVector, k: usize) -> Vec<SearchHit> {
        if q.is_empty() || self.docs.is_empty() {
            return Vec::new();
        }
        let mut acc = vec![0.0f64; self.docs.len()];
        let mut touched: Vec<DocId> = Vec::new();
        for (token, qw) in q.iter() {
            let qw = f64::from(qw);
            for p in self.postings(token) {
                let slot = &mut acc[p.doc as usize];
                if *slot == 0.0 {
                    touched.push(p.doc);
                }
                *slot += qw * f64::from(dequantize(p.weight));
            }
        }
        let mut scored: Vec<(DocId, f64)> =
            touched.into_iter().map(|d| (d, acc[d as usize])).filter(|&(_, s)| s > 0.0).collect();
        let order = |a: &(DocId, f64), b: &(DocId, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        scored.into_iter().enumerate().map(|(i, (doc_id, score))| SearchHit { doc_id, score, rank: i + 1 }).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut docs = ByteWriter::default();
        docs.u64(self.docs.len() as u64);
        for d in &self.docs {
            docs.str(&d.ext_id);
            docs.str(&d.text);
            match &d.payload {
                Some(p) => {
                    docs.u8(1);
                    docs.str(p);
                }
                None => docs.u8(0),
            }
        }

        let mut postings = ByteWriter::default();
        postings.u32(self.postings.len() as u32);
        for (&token, list) in &self.postings {
            postings.u32(token);
            postings.u64(list.len() as u64);
            for p in list {
                postings.u64(p.doc);
                postings.u16(p.weight.bits());
            }
        }

        let mut stats = ByteWriter::default();
        stats.u64(self.stats.doc_count());
        stats.u64(self.stats.doc_freqs().len() as u64);
        for (&token, &df) in self.stats.doc_freqs() {
            stats.u32(token);
            stats.u64(df);
        }

        let mut out = ByteWriter::default();
        out.bytes(MAGIC);
        out.u16(FORMAT_VERSION);
        for section in [docs, postings, stats] {
            let section = section.into_inner();
            out.u64(section.len() as u64);
            out.bytes(&section);
        }
        out.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = crate::codec::open_container(bytes, MAGIC, "SFNS", FORMAT_VERSION, 3)?;

        let mut r = ByteReader::new(sections[0], "doc_table");
        let n_docs = r.u64()?;
        let mut docs = Vec::with_capacity(n_docs.min(1 << 20) as usize);
        for _ in 0..n_docs {
            let ext_id = r.string()?;
            let text = r.string()?;
            let payload = match r.u8()? {
                0 => None,
                1 => Some(r.string()?),
                t => return Err(Error::Corrupt(format!("bad payload tag {t}"))),
            };
            docs.push(DocEntry { ext_id, text, payload });
        }
        r.expect_end()?;

        let mut r = ByteReader::new(sections[1], "postings");
        let n_terms = r.u32()?;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let token = r.u32()?;
            let len = r.u64()?;
            let mut list = Vec::with_capacity(len.min(1 << 20) as usize);
            for _ in 0..len {
                let doc = r.u64()?;
                let weight = QuantizedWeight::from_bits(r.u16()?);
                if doc >= n_docs || list.last().is_some_and(|p: &Posting| p.doc >= doc) {
                    return Err(Error::Corrupt(format!("postings for token {token} out of order")));
                }
                list.push(Posting { doc, weight });
            }
            if postings.insert(token, list).is_some() {
                return Err(Error::Corrupt(format!("token {token} listed twice")));
            }
        }
        r.expect_end()?;

        let mut r = ByteReader::new(sections[2], "stats");
        let doc_count = r.u64()?;
        let n = r.u64()?;
        let mut doc_freq = BTreeMap::new();
        for _ in 0..n {
            let token = r.u32()?;
            doc_freq.insert(token, r.u64()?);
        }
        r.expect_end()?;
        let stats = VocabStats::new(doc_count, doc_freq).map_err(|e| Error::Corrupt(e.to_string()))?;

        if stats.doc_count() != docs.len() as u64
            || stats.doc_freqs().len() != postings.len()
            || postings.iter().any(|(t, list)| stats.doc_freq(*t) != list.len() as u64)
        {
            return Err(Error::Corrupt("stats disagree with postings".into()));
        }
        Ok(Self { postings, docs, stats })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

//! Sparse vectors, corpus statistics and the inference-free query path.
//!
//! A [`SparseVector`] maps vocabulary token ids to strictly positive weights
//! and is what both sides of the engine speak: documents carry expansion
//! weights produced offline, queries carry IDF weights computed from
//! tokenization alone. Scores are plain dot products.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use half::f16;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenizerModel, UNK_ID};

/// Index into the tokenizer vocabulary.
pub type TokenId = u32;

/// Canonical text form used before any tokenization: NFKC, lowercase,
/// whitespace runs collapsed to one space, trimmed. Punctuation is kept.
pub fn normalize(text: &str) -> String {
    let folded: String = text.nfkc().flat_map(char::to_lowercase).collect();
    let mut out = String::with_capacity(folded.len());
    for word in folded.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Sorted `(token_id, weight)` pairs with unique ids and weights `> 0`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector {
    entries: Vec<(TokenId, f32)>,
}

impl SparseVector {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a vector from arbitrary pairs: sorts by id, merges duplicate
    /// ids by max and drops zero weights. Negative or non-finite weights are
    /// rejected.
    pub fn from_pairs<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (TokenId, f32)>,
    {
        let mut entries: Vec<(TokenId, f32)> = Vec::new();
        for (id, w) in pairs {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("weight for token {id} must be finite and non-negative, got {w}")));
            }
            if w > 0.0 {
                entries.push((id, w));
            }
        }
        entries.sort_by_key(|&(id, _)| id);
        entries.dedup_by(|next, kept| {
            if next.0 == kept.0 {
                kept.1 = kept.1.max(next.1);
                true
            } else {
                false
            }
        });
        Ok(Self { entries })
    }

    /// Caller guarantees ids are strictly increasing and weights positive.
    pub(crate) fn from_sorted_unchecked(entries: Vec<(TokenId, f32)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        debug_assert!(entries.iter().all(|&(_, w)| w > 0.0 && w.is_finite()));
        Self { entries }
    }

    pub fn entries(&self) -> &[(TokenId, f32)] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, f32)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: TokenId) -> Option<f32> {
        self.entries.binary_search_by_key(&token, |&(id, _)| id).ok().map(|i| self.entries[i].1)
    }

    /// `token_id:weight` pairs separated by single spaces, weights printed
    /// with 9 significant digits (enough to round-trip an `f32`).
    pub fn to_line(&self) -> String {
        let mut line = String::new();
        for (i, &(id, w)) in self.entries.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{id}:{}", format_sig9(w));
        }
        line
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for field in line.split_whitespace() {
            let (id, w) =
                field.split_once(':').ok_or_else(|| Error::invalid(format!("expected `id:weight`, got `{field}`")))?;
            let id: TokenId = id.parse().map_err(|_| Error::invalid(format!("bad token id `{id}`")))?;
            let w: f32 = w.parse().map_err(|_| Error::invalid(format!("bad weight `{w}`")))?;
            pairs.push((id, w));
        }
        Self::from_pairs(pairs)
    }
}

/// `%.9g`-style rendering.
pub(crate) fn format_sig9(w: f32) -> String {
    let x = f64::from(w);
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if !(-5..9).contains(&exp) {
        let mantissa = trim_fraction(mantissa);
        return format!("{mantissa}e{exp}");
    }
    let decimals = (8 - exp) as usize;
    trim_fraction(&format!("{x:.decimals$}")).to_string()
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Corpus statistics backing IDF: document count and per-token document
/// frequency, computed over the indexed vectors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VocabStats {
    doc_count: u64,
    doc_freq: BTreeMap<TokenId, u64>,
}

impl VocabStats {
    pub fn new(doc_count: u64, doc_freq: BTreeMap<TokenId, u64>) -> Result<Self> {
        if let Some((&t, &df)) = doc_freq.iter().find(|(_, &df)| df > doc_count) {
            return Err(Error::invalid(format!("doc_freq[{t}] = {df} exceeds doc_count {doc_count}")));
        }
        Ok(Self { doc_count, doc_freq })
    }

    pub fn from_vectors<'a, I>(vectors: I) -> Self
    where
        I: IntoIterator<Item = &'a SparseVector>,
    {
        let mut stats = Self::default();
        for v in vectors {
            stats.add_document(v);
        }
        stats
    }

    pub(crate) fn add_document(&mut self, v: &SparseVector) {
        self.doc_count += 1;
        for (id, _) in v.iter() {
            *self.doc_freq.entry(id).or_insert(0) += 1;
        }
    }

    pub fn doc_count(&self) -> u64 {
        self.doc_count
    }

    pub fn doc_freq(&self, token: TokenId) -> u64 {
        self.doc_freq.get(&token).copied().unwrap_or(0)
    }

    pub fn doc_freqs(&self) -> &BTreeMap<TokenId, u64> {
        &self.doc_freq
    }

    /// Header `N=<doc_count>` then one `token_id<TAB>df` line per token.
    pub fn to_text(&self) -> String {
        let mut out = format!("N={}\n", self.doc_count);
        for (t, df) in &self.doc_freq {
            let _ = writeln!(out, "{t}\t{df}");
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "missing `N=` header".into() })?;
        let doc_count = header
            .strip_prefix("N=")
            .and_then(|n| n.trim().parse().ok())
            .ok_or(Error::Parse { line: 1, msg: format!("bad header `{header}`") })?;
        let mut doc_freq = BTreeMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Parse { line: i + 1, msg: format!("expected `token<TAB>df`, got `{line}`") };
            let (t, df) = line.split_once('\t').ok_or_else(bad)?;
            let t: TokenId = t.parse().map_err(|_| bad())?;
            let df: u64 = df.trim().parse().map_err(|_| bad())?;
            doc_freq.insert(t, df);
        }
        Self::new(doc_count, doc_freq)
    }
}

/// Smoothed inverse document frequency `ln((N + 1) / (df + 1)) + 1`.
///
/// Unknown tokens count as `df = 0`. The value is at least 1 whenever
/// `df <= N`, so every matched query token contributes to the score.
pub fn idf(stats: &VocabStats, token: TokenId) -> f32 {
    idf_from_counts(stats.doc_count(), stats.doc_freq(token))
}

pub(crate) fn idf_from_counts(doc_count: u64, df: u64) -> f32 {
    let n = doc_count as f64;
    let df = df as f64;
    (((n + 1.0) / (df + 1.0)).ln() + 1.0) as f32
}

/// How query tokens are weighted. `Idf` is the production path; `Indicator`
/// gives every token weight 1 and exists for diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum QueryWeighting {
    #[default]
    Idf,
    Indicator,
}

/// Inference-free query encoding: tokenize, keep each distinct known token
/// once, weight it by IDF. An empty or all-unknown query yields an empty
/// vector.
pub fn encode_query(tokenizer: &TokenizerModel, stats: &VocabStats, text: &str) -> SparseVector {
    encode_query_with(tokenizer, stats, text, QueryWeighting::Idf)
}

pub fn encode_query_with(
    tokenizer: &TokenizerModel,
    stats: &VocabStats,
    text: &str,
    weighting: QueryWeighting,
) -> SparseVector {
    let normalized = normalize(text);
    let mut ids = tokenizer.segment(&normalized);
    ids.retain(|&id| id != UNK_ID);
    weight_token_set(ids, stats, weighting)
}

pub(crate) fn weight_token_set(mut ids: Vec<TokenId>, stats: &VocabStats, weighting: QueryWeighting) -> SparseVector {
    ids.sort_unstable();
    ids.dedup();
    let entries = ids
        .into_iter()
        .map(|id| {
            let w = match weighting {
                QueryWeighting::Idf => idf(stats, id),
                QueryWeighting::Indicator => 1.0,
            };
            (id, w)
        })
        .collect();
    SparseVector::from_sorted_unchecked(entries)
}

/// `Σ q_j · d_j` over shared ids, accumulated in `f64` in ascending id order.
pub fn dot_score(q: &SparseVector, d: &SparseVector) -> f64 {
    let (a, b) = (q.entries(), d.entries());
    let (mut i, mut j) = (0, 0);
    let mut acc = 0.0f64;
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += f64::from(a[i].1) * f64::from(b[j].1);
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// A document-side weight stored as IEEE 754 binary16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantizedWeight(u16);

impl QuantizedWeight {
    pub fn from_bits(bits: u16) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u16 {
        self.0
    }
}

/// Round-to-nearest-even conversion to binary16. Rejects negative and
/// non-finite inputs as well as values that overflow the binary16 range.
pub fn quantize(w: f32) -> Result<QuantizedWeight> {
    if !w.is_finite() || w < 0.0 {
        return Err(Error::invalid(format!("quantize expects a finite non-negative weight, got {w}")));
    }
    let h = f16::from_f32(w);
    if h.is_infinite() {
        return Err(Error::invalid(format!("weight {w} overflows binary16")));
    }
    // -0.0 collapses to +0.0 so the stored value is non-negative.
    Ok(QuantizedWeight(h.to_bits() & 0x7fff))
}

/// Exact widening of a stored weight.
pub fn dequantize(q: QuantizedWeight) -> f32 {
    f16::from_bits(q.0).to_f32()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(pairs: &[(TokenId, f32)]) -> SparseVector {
        SparseVector::from_pairs(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn idf_fixed_points() {
        let stats = VocabStats::new(3, [(1, 1), (2, 3)].into()).unwrap();
        assert!((idf(&stats, 1) - 1.693_147).abs() < 1e-6);
        assert_eq!(idf(&stats, 2), 1.0);
        assert_eq!(idf(&VocabStats::default(), 7), 1.0);
        // Unknown token behaves as df = 0.
        assert!((idf(&stats, 99) - ((4.0f64).ln() + 1.0) as f32).abs() < 1e-6);
    }

    #[test]
    fn idf_is_non_increasing_in_df() {
        for n in 0..40u64 {
            let mut last = f32::INFINITY;
            for df in 0..=n {
                let v = idf_from_counts(n, df);
                assert!(v >= 1.0 && v <= last);
                last = v;
            }
        }
    }

    #[test]
    fn dot_score_examples() {
        assert_eq!(dot_score(&sv(&[(0, 2.0)]), &sv(&[(0, 3.0), (1, 1.0)])), 6.0);
        assert_eq!(dot_score(&sv(&[(0, 2.0)]), &sv(&[(1, 1.0)])), 0.0);
        assert_eq!(dot_score(&SparseVector::empty(), &sv(&[(1, 1.0)])), 0.0);
    }

    #[test]
    fn construction_sorts_merges_and_drops_zeros() {
        let v = sv(&[(5, 1.0), (2, 0.0), (5, 3.0), (1, 0.5)]);
        assert_eq!(v.entries(), &[(1, 0.5), (5, 3.0)]);
        assert!(SparseVector::from_pairs([(1, -1.0)]).is_err());
        assert!(SparseVector::from_pairs([(1, f32::NAN)]).is_err());
    }

    #[test]
    fn quantize_known_values() {
        assert_eq!(quantize(1.0).unwrap().bits(), 0x3c00);
        assert_eq!(dequantize(quantize(1.0).unwrap()), 1.0);
        assert_eq!(quantize(0.0).unwrap().bits(), 0);
        assert!(quantize(-1.0).is_err());
        assert!(quantize(f32::INFINITY).is_err());
        assert!(quantize(1e6).is_err());
    }

    #[test]
    fn text_line_round_trip() {
        let v = sv(&[(3, 0.1), (10, 1234.5678), (11, 1e-7)]);
        let line = v.to_line();
        assert_eq!(line, "3:0.100000001 10:1234.56775 11:1.00000001e-7");
        assert_eq!(SparseVector::parse_line(&line).unwrap(), v);
        assert_eq!(SparseVector::parse_line("").unwrap(), SparseVector::empty());
    }

    #[test]
    fn stats_text_round_trip() {
        let stats = VocabStats::new(3, [(1, 1), (2, 3)].into()).unwrap();
        assert_eq!(stats.to_text(), "N=3\n1\t1\n2\t3\n");
        assert_eq!(VocabStats::parse_text(&stats.to_text()).unwrap(), stats);
        assert!(VocabStats::new(1, [(1, 2)].into()).is_err());
        assert!(VocabStats::parse_text("M=3\n").is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize("  P!NK \t\n Ｔaylor  "), "p!nk taylor");
        assert_eq!(normalize("   "), "");
    }

    proptest! {
        #[test]
        fn construction_is_idempotent(pairs in prop::collection::vec((0u32..50, 0.0f32..10.0), 0..40)) {
            let v = SparseVector::from_pairs(pairs).unwrap();
            let again = SparseVector::from_pairs(v.iter()).unwrap();
            prop_assert_eq!(&v, &again);
            prop_assert!(v.entries().windows(2).all(|w| w[0].0 < w[1].0));
            prop_assert!(v.iter().all(|(_, w)| w > 0.0));
        }

        #[test]
        fn dot_score_is_commutative(
            a in prop::collection::vec((0u32..30, 0.0f32..5.0), 0..20),
            b in prop::collection::vec((0u32..30, 0.0f32..5.0), 0..20),
        ) {
            let (a, b) = (SparseVector::from_pairs(a).unwrap(), SparseVector::from_pairs(b).unwrap());
            prop_assert_eq!(dot_score(&a, &b), dot_score(&b, &a));
        }

        #[test]
        fn line_format_round_trips(pairs in prop::collection::vec((0u32..1000, 0.0f32..1e4), 0..30)) {
            let v = SparseVector::from_pairs(pairs).unwrap();
            prop_assert_eq!(SparseVector::parse_line(&v.to_line()).unwrap(), v);
        }
    }
}

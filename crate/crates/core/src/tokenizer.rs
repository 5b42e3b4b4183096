//! Granular unigram subword tokenizer and the character-trigram analyzer.
//!
//! The unigram model is trained with the usual EM-and-prune loop, except that
//! every piece is capped at `max_piece_len` characters (3 by default). Short
//! pieces make spelling variants share most of their tokens, which is what
//! lets an IDF-weighted query bag match a misspelled document.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sparse::{normalize, TokenId};

/// Token id emitted for characters no piece covers. Never part of a
/// retrieval vector.
pub const UNK_ID: TokenId = TokenId::MAX;

pub const DEFAULT_MAX_PIECE_LEN: usize = 3;
/// Vocabulary size used by the production deployment.
pub const PRODUCTION_VOCAB_SIZE: usize = 32_000;

/// What `segment` does with characters missing from the vocabulary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum UnkPolicy {
    /// Emit one [`UNK_ID`] per uncovered character.
    #[default]
    EmitUnk,
    /// Leave uncovered characters out of the output entirely.
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub text: String,
    pub log_prob: f64,
}

#[derive(Debug, Clone)]
pub struct TokenizerModel {
    pieces: Vec<Piece>,
    lookup: HashMap<String, TokenId>,
    max_piece_len: usize,
    unk_policy: UnkPolicy,
    unk_score: f64,
}

impl PartialEq for TokenizerModel {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces && self.max_piece_len == other.max_piece_len && self.unk_policy == other.unk_policy
    }
}

impl TokenizerModel {
    /// Pieces are assigned token ids in the order given.
    pub fn new(pieces: Vec<Piece>, max_piece_len: usize) -> Result<Self> {
        if max_piece_len == 0 {
            return Err(Error::invalid("max_piece_len must be at least 1"));
        }
        let mut lookup = HashMap::with_capacity(pieces.len());
        for (id, p) in pieces.iter().enumerate() {
            let len = p.text.chars().count();
            if len == 0 || len > max_piece_len {
                return Err(Error::invalid(format!("piece `{}` has {len} chars, outside 1..={max_piece_len}", p.text)));
            }
            if p.text.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("piece `{}` contains whitespace", p.text)));
            }
            if !p.log_prob.is_finite() || p.log_prob > 0.0 {
                return Err(Error::invalid(format!(
                    "piece `{}` has log_prob {} (must be finite and <= 0)",
                    p.text, p.log_prob
                )));
            }
            if lookup.insert(p.text.clone(), id as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate piece `{}`", p.text)));
            }
        }
        if pieces.len() >= UNK_ID as usize {
            return Err(Error::invalid("vocabulary too large"));
        }
        let min_lp = pieces.iter().map(|p| p.log_prob).fold(0.0, f64::min);
        Ok(Self { pieces, lookup, max_piece_len, unk_policy: UnkPolicy::default(), unk_score: min_lp - 10.0 })
    }

    pub fn with_unk_policy(mut self, policy: UnkPolicy) -> Self {
        self.unk_policy = policy;
        self
    }

    pub fn unk_policy(&self) -> UnkPolicy {
        self.unk_policy
    }

    pub fn max_piece_len(&self) -> usize {
        self.max_piece_len
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn token_id(&self, piece: &str) -> Option<TokenId> {
        self.lookup.get(piece).copied()
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.pieces.get(id as usize).map(|p| p.text.as_str())
    }

    pub fn log_prob(&self, id: TokenId) -> Option<f64> {
        self.pieces.get(id as usize).map(|p| p.log_prob)
    }

    /// Viterbi segmentation of already-normalized text. Words (split on
    /// whitespace) are segmented independently.
    pub fn segment(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            for tok in self.viterbi(&chars, None) {
                if tok.id != UNK_ID || self.unk_policy == UnkPolicy::EmitUnk {
                    out.push(tok.id);
                }
            }
        }
        out
    }

    /// Piece strings of a segmentation, with uncovered characters rendered
    /// as themselves.
    pub fn segment_pieces(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            for tok in self.viterbi(&chars, None) {
                out.push(chars[tok.start..tok.end].iter().collect());
            }
        }
        out
    }

    /// Sum of log-probabilities of the best segmentation of one word.
    pub fn best_score(&self, word: &str) -> f64 {
        let chars: Vec<char> = word.chars().collect();
        self.viterbi(&chars, None).iter().map(|t| self.edge_score(t.id)).sum()
    }

    fn edge_score(&self, id: TokenId) -> f64 {
        if id == UNK_ID {
            self.unk_score
        } else {
            self.pieces[id as usize].log_prob
        }
    }

    /// Best path over one word's lattice. Ties on score go to fewer tokens,
    /// then to the lexicographically earliest piece sequence. `exclude`
    /// removes one piece from consideration (used while pruning).
    fn viterbi(&self, chars: &[char], exclude: Option<TokenId>) -> Vec<Tok> {
        let n = chars.len();
        if n == 0 {
            return Vec::new();
        }
        let mut best: Vec<Option<Node>> = vec![None; n + 1];
        best[0] = Some(Node { score: 0.0, path: Vec::new() });
        let mut buf = String::new();
        for end in 1..=n {
            let mut winner: Option<Node> = None;
            for len in 1..=self.max_piece_len.min(end) {
                let start = end - len;
                let Some(prev) = &best[start] else { continue };
                buf.clear();
                buf.extend(&chars[start..end]);
                let id = match self.lookup.get(buf.as_str()) {
                    Some(&id) if Some(id) != exclude => id,
                    // A character with no usable single-char piece still
                    // needs an edge so every word has a covering.
                    _ if len == 1 => UNK_ID,
                    _ => continue,
                };
                let mut path = prev.path.clone();
                path.push(Tok { id, start, end });
                let cand = Node { score: prev.score + self.edge_score(id), path };
                winner = match winner {
                    Some(w) if !cand.beats(&w, chars) => Some(w),
                    _ => Some(cand),
                };
            }
            best[end] = winner;
        }
        best[n].take().map(|node| node.path).unwrap_or_default()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("#unigram max_len={} vocab={}\n", self.max_piece_len, self.pieces.len());
        for p in &self.pieces {
            let _ = writeln!(out, "{}\t{}", p.text, p.log_prob);
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse { line: 1, msg: "empty model file".into() })?;
        let bad_header = || Error::Parse { line: 1, msg: format!("bad header `{header}`") };
        let rest = header.strip_prefix("#unigram ").ok_or_else(bad_header)?;
        let mut max_len = None;
        let mut vocab = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("max_len", v)) => max_len = v.parse::<usize>().ok(),
                Some(("vocab", v)) => vocab = v.parse::<usize>().ok(),
                _ => return Err(bad_header()),
            }
        }
        let (max_len, vocab) = max_len.zip(vocab).ok_or_else(bad_header)?;
        let mut pieces = Vec::with_capacity(vocab);
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { line: i + 2, msg };
            let (piece, lp) =
                line.rsplit_once('\t').ok_or_else(|| bad(format!("expected `piece<TAB>log_prob`, got `{line}`")))?;
            let log_prob = lp.parse().map_err(|_| bad(format!("bad log_prob `{lp}`")))?;
            pieces.push(Piece { text: piece.to_string(), log_prob });
        }
        if pieces.len() != vocab {
            return Err(Error::Corrupt(format!("header declares {vocab} pieces, found {}", pieces.len())));
        }
        Self::new(pieces, max_len)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct Tok {
    id: TokenId,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone)]
struct Node {
    score: f64,
    path: Vec<Tok>,
}

/// Relative gap below which two path scores are treated as equal.
const SCORE_TIE_TOLERANCE: f64 = 1e-12;

impl Node {
    fn beats(&self, other: &Node, chars: &[char]) -> bool {
        // The same pieces summed in a different order can differ in the last
        // bits, so scores this close count as a tie.
        let tol = SCORE_TIE_TOLERANCE * self.score.abs().max(other.score.abs()).max(1.0);
        if self.score > other.score + tol {
            return true;
        }
        if other.score > self.score + tol {
            return false;
        }
        match self.path.len().cmp(&other.path.len()) {
            Ordering::Less => return true,
            Ordering::Greater => return false,
            Ordering::Equal => {}
        }
        for (a, b) in self.path.iter().zip(&other.path) {
            match chars[a.start..a.end].cmp(&chars[b.start..b.end]) {
                Ordering::Less => return true,
                Ordering::Greater => return false,
                Ordering::Equal => {}
            }
        }
        false
    }
}

/// Unigram training schedule.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub vocab_size: usize,
    pub max_piece_len: usize,
    /// Fraction of pieces kept after each pruning round.
    pub shrink_factor: f64,
    /// EM iterations run before each pruning round.
    pub em_iters: usize,
    /// Seed vocabulary is capped at `seed_cap_factor * vocab_size`.
    pub seed_cap_factor: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1_000,
            max_piece_len: DEFAULT_MAX_PIECE_LEN,
            shrink_factor: 0.75,
            em_iters: 2,
            seed_cap_factor: 100,
        }
    }
}

impl TrainerConfig {
    pub fn with_vocab_size(vocab_size: usize) -> Self {
        Self { vocab_size, ..Self::default() }
    }
}

/// Trains a unigram model on raw lines of text (normalized internally).
pub fn train_unigram<I, S>(corpus: I, cfg: &TrainerConfig) -> Result<TokenizerModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if cfg.max_piece_len == 0 {
        return Err(Error::invalid("max_piece_len must be at least 1"));
    }
    if !(cfg.shrink_factor > 0.0 && cfg.shrink_factor < 1.0) {
        return Err(Error::invalid("shrink_factor must lie in (0, 1)"));
    }
    if cfg.em_iters == 0 {
        return Err(Error::invalid("em_iters must be positive"));
    }

    let mut word_counts: BTreeMap<Vec<char>, f64> = BTreeMap::new();
    for line in corpus {
        for word in normalize(line.as_ref()).split(' ').filter(|w| !w.is_empty()) {
            *word_counts.entry(word.chars().collect()).or_insert(0.0) += 1.0;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let words: Vec<(Vec<char>, f64)> = word_counts.into_iter().collect();

    let alphabet: BTreeSet<char> = words.iter().flat_map(|(w, _)| w.iter().copied()).collect();
    if cfg.vocab_size < alphabet.len() {
        return Err(Error::invalid(format!(
            "vocab_size {} is smaller than the alphabet ({} characters)",
            cfg.vocab_size,
            alphabet.len()
        )));
    }

    let mut pieces = seed_pieces(&words, &alphabet, cfg);
    let mut trainer = Lattice::new(cfg.max_piece_len);
    loop {
        for _ in 0..cfg.em_iters {
            pieces = trainer.em_step(&words, &pieces);
        }
        if pieces.len() <= cfg.vocab_size {
            break;
        }
        let target = ((pieces.len() as f64 * cfg.shrink_factor) as usize).max(cfg.vocab_size);
        pieces = trainer.prune(&words, pieces, target);
        log::debug!("unigram: pruned to {} pieces", pieces.len());
    }

    let mut ordered: Vec<(String, f64)> = pieces.into_iter().collect();
    ordered.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let pieces = ordered.into_iter().map(|(text, log_prob)| Piece { text, log_prob }).collect();
    TokenizerModel::new(pieces, cfg.max_piece_len)
}

/// All substrings up to `max_piece_len` chars ranked by frequency × length,
/// capped; single characters always kept.
fn seed_pieces(words: &[(Vec<char>, f64)], alphabet: &BTreeSet<char>, cfg: &TrainerConfig) -> BTreeMap<String, f64> {
    let mut freq: HashMap<String, f64> = HashMap::new();
    for (w, count) in words {
        for start in 0..w.len() {
            for len in 2..=cfg.max_piece_len.min(w.len() - start) {
                let s: String = w[start..start + len].iter().collect();
                *freq.entry(s).or_insert(0.0) += count;
            }
        }
    }
    let mut chars: BTreeMap<String, f64> = alphabet.iter().map(|c| (c.to_string(), 0.0)).collect();
    for (w, count) in words {
        for c in w {
            *chars.get_mut(&c.to_string()).expect("alphabet covers corpus") += count;
        }
    }

    let cap = cfg.seed_cap_factor.saturating_mul(cfg.vocab_size);
    let mut multi: Vec<(String, f64)> = freq
        .into_iter()
        .map(|(s, f)| {
            let score = f * s.chars().count() as f64;
            (s, score)
        })
        .collect();
    multi.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    multi.truncate(cap.saturating_sub(chars.len()));

    let mut seed = chars;
    seed.extend(multi);
    to_log_probs(seed)
}

fn to_log_probs(counts: BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let total: f64 = counts.values().sum();
    let log_total = total.ln();
    counts.into_iter().map(|(s, c)| (s, c.ln() - log_total)).collect()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Expected count assigned to single characters that EM would otherwise
/// starve; keeps them in the model and their log-probs finite.
const CHAR_COUNT_FLOOR: f64 = 0.5;

struct Lattice {
    max_len: usize,
}

impl Lattice {
    fn new(max_len: usize) -> Self {
        Self { max_len }
    }

    /// Edges ending at each position: `(start, piece string)`.
    fn edges(&self, w: &[char], pieces: &BTreeMap<String, f64>) -> Vec<Vec<(usize, String, f64)>> {
        let n = w.len();
        let mut ends = vec![Vec::new(); n + 1];
        for (end, slot) in ends.iter_mut().enumerate().skip(1) {
            for len in 1..=self.max_len.min(end) {
                let s: String = w[end - len..end].iter().collect();
                if let Some(&lp) = pieces.get(&s) {
                    slot.push((end - len, s, lp));
                }
            }
        }
        ends
    }

    /// One forward-backward pass plus re-estimation. Multi-char pieces whose
    /// expected count vanishes are dropped.
    fn em_step(&mut self, words: &[(Vec<char>, f64)], pieces: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
        let mut counts: BTreeMap<String, f64> = pieces.keys().map(|k| (k.clone(), 0.0)).collect();
        for (w, freq) in words {
            let n = w.len();
            let ends = self.edges(w, pieces);
            let mut alpha = vec![f64::NEG_INFINITY; n + 1];
            alpha[0] = 0.0;
            for end in 1..=n {
                for (start, _, lp) in &ends[end] {
                    alpha[end] = log_add(alpha[end], alpha[*start] + lp);
                }
            }
            let mut beta = vec![f64::NEG_INFINITY; n + 1];
            beta[n] = 0.0;
            for end in (1..=n).rev() {
                for (start, _, lp) in &ends[end] {
                    beta[*start] = log_add(beta[*start], beta[end] + lp);
                }
            }
            let z = alpha[n];
            if !z.is_finite() {
                continue;
            }
            for (end, edges) in ends.iter().enumerate() {
                for (start, s, lp) in edges {
                    let post = (alpha[*start] + lp + beta[end] - z).exp();
                    *counts.get_mut(s).expect("edge piece is in vocabulary") += freq * post;
                }
            }
        }
        let kept: BTreeMap<String, f64> = counts
            .into_iter()
            .filter_map(|(s, c)| {
                if s.chars().count() == 1 {
                    Some((s, c.max(CHAR_COUNT_FLOOR)))
                } else if c > 1e-9 {
                    Some((s, c))
                } else {
                    None
                }
            })
            .collect();
        to_log_probs(kept)
    }

    /// Keeps all single characters plus the multi-char pieces whose removal
    /// would cost the most likelihood, up to `target` pieces.
    fn prune(
        &mut self,
        words: &[(Vec<char>, f64)],
        pieces: BTreeMap<String, f64>,
        target: usize,
    ) -> BTreeMap<String, f64> {
        let model = TokenizerModel::new(
            pieces.iter().map(|(t, &lp)| Piece { text: t.clone(), log_prob: lp }).collect(),
            self.max_len,
        )
        .expect("trainer pieces satisfy model invariants");

        let mut viterbi_freq = vec![0.0f64; model.vocab_size()];
        for (w, freq) in words {
            for tok in model.viterbi(w, None) {
                if tok.id != UNK_ID {
                    viterbi_freq[tok.id as usize] += freq;
                }
            }
        }

        let mut singles = BTreeMap::new();
        let mut scored: Vec<(f64, String, f64)> = Vec::new();
        for (id, p) in model.pieces().iter().enumerate() {
            let chars: Vec<char> = p.text.chars().collect();
            if chars.len() == 1 {
                singles.insert(p.text.clone(), p.log_prob);
                continue;
            }
            let freq = viterbi_freq[id];
            let loss = if freq == 0.0 {
                0.0
            } else {
                let alt: f64 = model.viterbi(&chars, Some(id as TokenId)).iter().map(|t| model.edge_score(t.id)).sum();
                freq * (p.log_prob - alt)
            };
            scored.push((loss, p.text.clone(), p.log_prob));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let room = target.saturating_sub(singles.len());
        let mut kept = singles;
        kept.extend(scored.into_iter().take(room).map(|(_, s, lp)| (s, lp)));
        kept
    }
}

/// Character trigrams of each whitespace-delimited word. Words shorter than
/// three characters contribute nothing.
pub fn trigrams(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        out.extend(chars.windows(3).map(|w| w.iter().collect::<String>()));
    }
    out
}

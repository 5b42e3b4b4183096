//! Relevance metrics, a benchmark runner, and a seeded synthetic catalog
//! with typo'd queries and a matching behavior log.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::hash::Hash;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use chrono::{Duration, NaiveDate};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::{BehaviorLog, LogRecord};

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    Ok(())
}

fn relevant_in_top<T: Eq + Hash>(hits: &[T], relevant: &HashSet<T>, k: usize) -> usize {
    hits.iter().take(k).filter(|h| relevant.contains(h)).count()
}

pub fn recall_at_k<T: Eq + Hash>(hits: &[T], relevant: &HashSet<T>, k: usize) -> Result<f64> {
    check_k(k)?;
    if relevant.is_empty() {
        return Ok(0.0);
    }
    Ok(relevant_in_top(hits, relevant, k) as f64 / relevant.len() as f64)
}

/// Divides by `k`, not by the number of hits returned.
pub fn precision_at_k<T: Eq + Hash>(hits: &[T], relevant: &HashSet<T>, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(relevant_in_top(hits, relevant, k) as f64 / k as f64)
}

pub fn ndcg_at_k<T: Eq + Hash>(hits: &[T], relevant: &HashSet<T>, k: usize) -> Result<f64> {
    check_k(k)?;
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 =
        hits.iter().take(k).enumerate().filter(|(_, h)| relevant.contains(h)).map(|(i, _)| discount(i + 1)).sum();
    let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    if ideal == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg / ideal)
}

/// Binary relevance judgments, query id to relevant doc ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels(BTreeMap<String, BTreeSet<String>>);

#[derive(Serialize, Deserialize)]
struct QrelLine {
    query: String,
    docs: Vec<String>,
}

impl Qrels {
    pub fn new(map: BTreeMap<String, BTreeSet<String>>) -> Result<Self> {
        if let Some((q, _)) = map.iter().find(|(_, d)| d.is_empty()) {
            return Err(Error::Validation(format!("query {q:?} has no relevant documents")));
        }
        Ok(Self(map))
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.0.get(query_id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.0.iter()
    }

    /// One `{"query": id, "docs": [...]}` object per line; repeated query
    /// ids are merged.
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: QrelLine =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            map.entry(rec.query).or_default().extend(rec.docs);
        }
        Self::new(map)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (query, docs) in &self.0 {
            let line = QrelLine { query: query.clone(), docs: docs.iter().cloned().collect() };
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// A benchmark query. `category` and every tag each define a slice of the
/// report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub category: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

/// A catalog entry: external id plus searchable text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogDoc {
    pub id: String,
    pub text: String,
}

fn read_jsonl_items<T: for<'de> Deserialize<'de>, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}

fn write_jsonl_items<T: Serialize, W: Write>(items: &[T], mut w: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_queries<R: BufRead>(reader: R) -> Result<Vec<EvalQuery>> {
    read_jsonl_items(reader)
}

pub fn read_catalog<R: BufRead>(reader: R) -> Result<Vec<CatalogDoc>> {
    read_jsonl_items(reader)
}

pub fn load_queries(path: &Path) -> Result<Vec<EvalQuery>> {
    read_queries(BufReader::new(File::open(path)?))
}

pub fn load_catalog(path: &Path) -> Result<Vec<CatalogDoc>> {
    read_catalog(BufReader::new(File::open(path)?))
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    Qrels::read_jsonl(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub queries: usize,
    pub at_k: BTreeMap<usize, Metrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub ks: Vec<usize>,
    pub overall: SliceReport,
    pub slices: BTreeMap<String, SliceReport>,
    /// Query ids absent from the judgments; they are not scored.
    pub missing_qrels: Vec<String>,
    /// Queries per second over the timed pass; hardware dependent.
    pub qps: f64,
    pub warmup_queries: usize,
}

impl BenchmarkReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.overall.at_k.get(&k).map(|m| m.recall)
    }

    pub fn slice_recall(&self, slice: &str, k: usize) -> Option<f64> {
        self.slices.get(slice)?.at_k.get(&k).map(|m| m.recall)
    }

    /// `slice,k,queries,recall,precision,ndcg` rows, overall first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slice,k,queries,recall,precision,ndcg\n");
        let all = std::iter::once(("all", &self.overall)).chain(self.slices.iter().map(|(n, s)| (n.as_str(), s)));
        for (name, slice) in all {
            for (k, m) in &slice.at_k {
                out.push_str(&format!(
                    "{name},{k},{},{:.6},{:.6},{:.6}\n",
                    slice.queries, m.recall, m.precision, m.ndcg
                ));
            }
        }
        out
    }
}

const MAX_WARMUP: usize = 8;

fn mean_report(per_query: &BTreeMap<&str, Vec<Metrics>>, ks: &[usize]) -> SliceReport {
    let n = per_query.len();
    let mut at_k = BTreeMap::new();
    for (i, &k) in ks.iter().enumerate() {
        let mut sum = Metrics::default();
        for m in per_query.values() {
            sum.recall += m[i].recall;
            sum.precision += m[i].precision;
            sum.ndcg += m[i].ndcg;
        }
        let d = n.max(1) as f64;
        at_k.insert(k, Metrics { recall: sum.recall / d, precision: sum.precision / d, ndcg: sum.ndcg / d });
    }
    SliceReport { queries: n, at_k }
}

/// Mean metrics per `k`, overall and per slice. `retriever` returns ranked
/// doc ids. A few leading queries run once untimed before the timed pass.
pub fn run_benchmark<F>(queries: &[EvalQuery], qrels: &Qrels, retriever: F, ks: &[usize]) -> Result<BenchmarkReport>
where
    F: Fn(&str) -> Vec<String>,
{
    if ks.is_empty() {
        return Err(Error::Validation("at least one cutoff k is required".into()));
    }
    for &k in ks {
        check_k(k)?;
    }
    let mut seen = HashSet::new();
    for q in queries {
        if !seen.insert(q.id.as_str()) {
            return Err(Error::Validation(format!("duplicate query id {:?}", q.id)));
        }
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let depth = *ks.last().expect("non-empty");

    let (judged, missing): (Vec<&EvalQuery>, Vec<&EvalQuery>) =
        queries.iter().partition(|q| qrels.get(&q.id).is_some());

    let warmup = judged.len().min(MAX_WARMUP);
    for q in &judged[..warmup] {
        let _ = retriever(&q.text);
    }
    let start = Instant::now();
    let mut ranked = Vec::with_capacity(judged.len());
    for q in &judged {
        let mut hits = retriever(&q.text);
        hits.truncate(depth);
        ranked.push(hits);
    }
    let elapsed = start.elapsed().as_secs_f64();

    let mut per_query: BTreeMap<&str, Vec<Metrics>> = BTreeMap::new();
    let mut slice_members: BTreeMap<&str, BTreeMap<&str, Vec<Metrics>>> = BTreeMap::new();
    for (q, hits) in judged.iter().zip(&ranked) {
        let relevant: HashSet<&str> = qrels.get(&q.id).expect("judged").iter().map(String::as_str).collect();
        let hits: Vec<&str> = hits.iter().map(String::as_str).collect();
        let mut ms = Vec::with_capacity(ks.len());
        for &k in &ks {
            ms.push(Metrics {
                recall: recall_at_k(&hits, &relevant, k)?,
                precision: precision_at_k(&hits, &relevant, k)?,
                ndcg: ndcg_at_k(&hits, &relevant, k)?,
            });
        }
        let slices =
            std::iter::once(q.category.as_str()).filter(|c| !c.is_empty()).chain(q.tags.iter().map(String::as_str));
        for s in slices {
            slice_members.entry(s).or_default().insert(q.id.as_str(), ms.clone());
        }
        per_query.insert(q.id.as_str(), ms);
    }

    let qps = if elapsed > 0.0 { judged.len() as f64 / elapsed } else { 0.0 };
    if !missing.is_empty() {
        log::warn!("{} queries have no judgments and were skipped", missing.len());
    }
    Ok(BenchmarkReport {
        overall: mean_report(&per_query, &ks),
        slices: slice_members.iter().map(|(s, m)| (s.to_string(), mean_report(m, &ks))).collect(),
        ks,
        missing_qrels: missing.iter().map(|q| q.id.clone()).collect(),
        qps,
        warmup_queries: warmup,
    })
}

/// Surface perturbations used to derive queries from canonical names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TypoOp {
    Substitute,
    TransposeAdjacent,
    Delete,
    Insert,
    SplitWord,
    JoinWords,
    SwapWordOrder,
    /// Look-alike symbol for a letter, as in "p!nk".
    CharVariation,
    /// Appends a generic term such as "songs".
    IncidentalTerm,
}

impl TypoOp {
    pub fn category(self) -> &'static str {
        match self {
            TypoOp::SwapWordOrder => "transposition",
            TypoOp::CharVariation => "character_variation",
            TypoOp::IncidentalTerm => "incidental",
            _ => "misspelling",
        }
    }

    fn is_edit(self) -> bool {
        matches!(self, TypoOp::Substitute | TypoOp::TransposeAdjacent | TypoOp::Delete | TypoOp::Insert)
    }
}

/// Weighted typo operations plus a distribution over how many operations a
/// query receives. The first operation decides the query's category; the
/// rest are character edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypoSpec {
    pub ops: Vec<(TypoOp, f64)>,
    pub edits_per_query: Vec<(usize, f64)>,
}

impl Default for TypoSpec {
    fn default() -> Self {
        Self {
            ops: vec![
                (TypoOp::Substitute, 0.15),
                (TypoOp::TransposeAdjacent, 0.10),
                (TypoOp::Delete, 0.10),
                (TypoOp::Insert, 0.10),
                (TypoOp::SplitWord, 0.025),
                (TypoOp::JoinWords, 0.025),
                (TypoOp::SwapWordOrder, 0.25),
                (TypoOp::CharVariation, 0.15),
                (TypoOp::IncidentalTerm, 0.10),
            ],
            edits_per_query: vec![(1, 0.6), (2, 0.4)],
        }
    }
}

const WEIGHT_TOL: f64 = 1e-9;

impl TypoSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |ws: &mut dyn Iterator<Item = f64>, what: &str| -> Result<()> {
            let mut sum = 0.0;
            for w in ws {
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::Validation(format!("{what} weights must be finite and non-negative")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::Validation(format!("{what} weights sum to {sum}, not 1")));
            }
            Ok(())
        };
        check(&mut self.ops.iter().map(|o| o.1), "op")?;
        check(&mut self.edits_per_query.iter().map(|e| e.1), "edit count")?;
        if self.edits_per_query.iter().any(|&(n, w)| n == 0 && w > 0.0) {
            return Err(Error::Validation("a query needs at least one edit".into()));
        }
        Ok(())
    }

    /// Every query gets exactly one operation, always `op`.
    pub fn single(op: TypoOp) -> Self {
        Self { ops: vec![(op, 1.0)], edits_per_query: vec![(1, 1.0)] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthQuery {
    pub id: String,
    pub text: String,
    pub entity: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    pub ops: Vec<TypoOp>,
}

impl SynthQuery {
    pub fn to_eval(&self) -> EvalQuery {
        EvalQuery {
            id: self.id.clone(),
            text: self.text.clone(),
            category: self.category.clone(),
            tags: self.tags.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub docs: Vec<CatalogDoc>,
    /// Canonical queries (category `canonical`) followed by variants,
    /// grouped by entity.
    pub queries: Vec<SynthQuery>,
    pub qrels: Qrels,
    pub log: BehaviorLog,
}

pub const CANONICAL: &str = "canonical";
/// Tag on queries whose entity name contains a word of at most two
/// characters.
pub const SHORT_WORD_TAG: &str = "short_word";

impl SynthCorpus {
    pub fn eval_queries(&self) -> Vec<EvalQuery> {
        self.queries.iter().map(SynthQuery::to_eval).collect()
    }

    /// Only the perturbed queries.
    pub fn variant_queries(&self) -> Vec<EvalQuery> {
        self.queries.iter().filter(|q| q.category != CANONICAL).map(SynthQuery::to_eval).collect()
    }

    /// Writes `catalog.jsonl`, `queries.jsonl`, `qrels.jsonl` and
    /// `log.jsonl` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        let mut w = open("catalog.jsonl")?;
        write_jsonl_items(&self.docs, &mut w)?;
        w.flush()?;
        let mut w = open("queries.jsonl")?;
        write_jsonl_items(&self.queries, &mut w)?;
        w.flush()?;
        let mut w = open("qrels.jsonl")?;
        self.qrels.write_jsonl(&mut w)?;
        w.flush()?;
        let mut w = open("log.jsonl")?;
        self.log.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "ch", "dr", "gr", "kr",
    "sh", "st", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "a", "e", "o", "ai", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "s", "m", "x"];
const SHORT_WORDS: &[&str] =
    &["me", "dj", "mc", "el", "la", "lo", "da", "de", "jo", "yo", "oh", "up", "go", "no", "mi", "tu", "xo", "ka"];
const INCIDENTAL: &[&str] = &["songs", "music", "live", "remix", "album", "lyrics", "radio", "playlist"];
const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const LOOKALIKES: &[(char, &[char])] = &[
    ('a', &['4', '@']),
    ('e', &['3']),
    ('i', &['!', '1']),
    ('o', &['0']),
    ('s', &['$', '5']),
    ('t', &['7']),
    ('l', &['1']),
];

const SHORT_WORD_RATE: f64 = 0.3;
const VARIANT_ATTEMPTS: usize = 30;
const LOG_DAYS: i64 = 7;

fn syllable_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..n {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
        if rng.gen_bool(0.3) {
            w.push_str(CODAS.choose(rng).unwrap());
        }
    }
    w
}

fn random_letter(rng: &mut ChaCha8Rng, avoid: Option<char>) -> char {
    loop {
        let c = *LETTERS.choose(rng).unwrap() as char;
        if Some(c) != avoid {
            return c;
        }
    }
}

/// Picks a word index satisfying `ok`, preferring words longer than two
/// characters so short words survive most edits.
fn pick_word(words: &[String], rng: &mut ChaCha8Rng, ok: impl Fn(&str) -> bool) -> Option<usize> {
    let long: Vec<usize> = (0..words.len()).filter(|&i| ok(&words[i]) && words[i].chars().count() > 2).collect();
    if let Some(&i) = long.choose(rng) {
        return Some(i);
    }
    let any: Vec<usize> = (0..words.len()).filter(|&i| ok(&words[i])).collect();
    any.choose(rng).copied()
}

fn apply_op(op: TypoOp, words: &mut Vec<String>, rng: &mut ChaCha8Rng) -> bool {
    let chars_of = |w: &str| w.chars().collect::<Vec<char>>();
    match op {
        TypoOp::Substitute => {
            let Some(i) = pick_word(words, rng, |w| !w.is_empty()) else { return false };
            let mut cs = chars_of(&words[i]);
            let p = rng.gen_range(0..cs.len());
            cs[p] = random_letter(rng, Some(cs[p]));
            words[i] = cs.into_iter().collect();
        }
        TypoOp::TransposeAdjacent => {
            let ok = |w: &str| w.chars().collect::<Vec<_>>().windows(2).any(|p| p[0] != p[1]);
            let Some(i) = pick_word(words, rng, ok) else { return false };
            let mut cs = chars_of(&words[i]);
            let spots: Vec<usize> = (0..cs.len() - 1).filter(|&p| cs[p] != cs[p + 1]).collect();
            let p = *spots.choose(rng).unwrap();
            cs.swap(p, p + 1);
            words[i] = cs.into_iter().collect();
        }
        TypoOp::Delete => {
            let Some(i) = pick_word(words, rng, |w| w.chars().count() >= 3) else { return false };
            let mut cs = chars_of(&words[i]);
            cs.remove(rng.gen_range(0..cs.len()));
            words[i] = cs.into_iter().collect();
        }
        TypoOp::Insert => {
            let Some(i) = pick_word(words, rng, |_| true) else { return false };
            let mut cs = chars_of(&words[i]);
            let p = rng.gen_range(0..=cs.len());
            cs.insert(p, random_letter(rng, None));
            words[i] = cs.into_iter().collect();
        }
        TypoOp::SplitWord => {
            let Some(i) = pick_word(words, rng, |w| w.chars().count() >= 4) else { return false };
            let cs = chars_of(&words[i]);
            let p = rng.gen_range(2..=cs.len() - 2);
            let right: String = cs[p..].iter().collect();
            words[i] = cs[..p].iter().collect();
            words.insert(i + 1, right);
        }
        TypoOp::JoinWords => {
            if words.len() < 2 {
                return false;
            }
            let i = rng.gen_range(0..words.len() - 1);
            let right = words.remove(i + 1);
            words[i].push_str(&right);
        }
        TypoOp::SwapWordOrder => {
            let pairs: Vec<(usize, usize)> = (0..words.len())
                .flat_map(|a| (a + 1..words.len()).map(move |b| (a, b)))
                .filter(|&(a, b)| words[a] != words[b])
                .collect();
            let Some(&(a, b)) = pairs.choose(rng) else { return false };
            words.swap(a, b);
        }
        TypoOp::CharVariation => {
            let has = |w: &str| w.chars().any(|c| LOOKALIKES.iter().any(|l| l.0 == c));
            let Some(i) = pick_word(words, rng, has) else { return false };
            let mut cs = chars_of(&words[i]);
            let spots: Vec<usize> = (0..cs.len()).filter(|&p| LOOKALIKES.iter().any(|l| l.0 == cs[p])).collect();
            let p = *spots.choose(rng).unwrap();
            let subs = LOOKALIKES.iter().find(|l| l.0 == cs[p]).unwrap().1;
            cs[p] = *subs.choose(rng).unwrap();
            words[i] = cs.into_iter().collect();
        }
        TypoOp::IncidentalTerm => {
            let term = *INCIDENTAL.choose(rng).unwrap();
            if words.iter().any(|w| w == term) {
                return false;
            }
            words.push(term.to_string());
        }
    }
    true
}

fn generate_names(rng: &mut ChaCha8Rng, n_entities: usize) -> Vec<String> {
    // Words are drawn with a skewed distribution so common words are shared
    // by many names, as with real artist and title vocabularies.
    let pool_size = (n_entities * 2).max(16);
    let mut pool = BTreeSet::new();
    let mut pool_words = Vec::with_capacity(pool_size);
    while pool_words.len() < pool_size {
        let w = syllable_word(rng);
        if pool.insert(w.clone()) {
            pool_words.push(w);
        }
    }
    let weights: Vec<f64> = (1..=pool_size).map(|r| 1.0 / (r as f64).powf(0.8)).collect();
    let word_dist = WeightedIndex::new(&weights).expect("positive weights");
    let len_dist = WeightedIndex::new([0.1, 0.6, 0.3]).expect("positive weights");

    let mut seen = BTreeSet::new();
    let mut names = Vec::with_capacity(n_entities);
    while names.len() < n_entities {
        let n_words = len_dist.sample(rng) + 1;
        let mut words: Vec<String> = Vec::with_capacity(n_words + 1);
        while words.len() < n_words {
            let w = &pool_words[word_dist.sample(rng)];
            if !words.contains(w) {
                words.push(w.clone());
            }
        }
        if rng.gen_bool(SHORT_WORD_RATE) {
            let short = SHORT_WORDS.choose(rng).unwrap().to_string();
            let at = rng.gen_range(0..=words.len());
            words.insert(at, short);
        }
        let mut key = words.clone();
        key.sort();
        if seen.insert(key) {
            names.push(words.join(" "));
        }
    }
    names
}

fn sample_variant(
    canonical: &[String],
    typo: &TypoSpec,
    op_dist: &WeightedIndex<f64>,
    edit_dist: &WeightedIndex<f64>,
    rng: &mut ChaCha8Rng,
) -> Option<(String, Vec<TypoOp>)> {
    let edit_ops = [TypoOp::Substitute, TypoOp::TransposeAdjacent, TypoOp::Delete, TypoOp::Insert];
    let primary = typo.ops[op_dist.sample(rng)].0;
    let n_edits = typo.edits_per_query[edit_dist.sample(rng)].0;
    let mut words = canonical.to_vec();
    if !apply_op(primary, &mut words, rng) {
        return None;
    }
    let mut ops = vec![primary];
    while ops.len() < n_edits {
        let extra = *edit_ops.choose(rng).unwrap();
        if apply_op(extra, &mut words, rng) {
            ops.push(extra);
        }
    }
    debug_assert!(ops[1..].iter().all(|o| o.is_edit()));
    Some((words.join(" "), ops))
}

/// Deterministic for a given seed and arguments.
pub fn synth_corpus(seed: u64, n_entities: usize, queries_per_entity: usize, typo: &TypoSpec) -> Result<SynthCorpus> {
    typo.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let op_dist =
        WeightedIndex::new(typo.ops.iter().map(|o| o.1)).map_err(|e| Error::Validation(format!("op weights: {e}")))?;
    let edit_dist = WeightedIndex::new(typo.edits_per_query.iter().map(|e| e.1))
        .map_err(|e| Error::Validation(format!("edit count weights: {e}")))?;
    let names = generate_names(&mut rng, n_entities);
    let start = NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date");

    let mut docs = Vec::with_capacity(n_entities);
    let mut queries = Vec::new();
    let mut judgments = BTreeMap::new();
    let mut records = Vec::new();
    for (e, name) in names.iter().enumerate() {
        let entity = format!("e{e:05}");
        docs.push(CatalogDoc { id: entity.clone(), text: name.clone() });
        let words: Vec<String> = name.split(' ').map(str::to_string).collect();
        let tags =
            if words.iter().any(|w| w.chars().count() <= 2) { vec![SHORT_WORD_TAG.to_string()] } else { Vec::new() };

        let mut texts = BTreeSet::from([name.clone()]);
        let mut entity_queries = vec![SynthQuery {
            id: format!("q{e:05}-0"),
            text: name.clone(),
            entity: entity.clone(),
            category: CANONICAL.to_string(),
            tags: tags.clone(),
            ops: Vec::new(),
        }];
        for _ in 0..queries_per_entity {
            for _ in 0..VARIANT_ATTEMPTS {
                let Some((text, ops)) = sample_variant(&words, typo, &op_dist, &edit_dist, &mut rng) else {
                    continue;
                };
                if texts.insert(text.clone()) {
                    entity_queries.push(SynthQuery {
                        id: format!("q{e:05}-{}", entity_queries.len()),
                        text,
                        entity: entity.clone(),
                        category: ops[0].category().to_string(),
                        tags: tags.clone(),
                        ops,
                    });
                    break;
                }
            }
        }
        for q in entity_queries {
            judgments.insert(q.id.clone(), BTreeSet::from([entity.clone()]));
            records.push(LogRecord {
                query: q.text.clone(),
                entity: entity.clone(),
                engagements: rng.gen_range(4..=30),
                day: start + Duration::days(rng.gen_range(0..LOG_DAYS)),
            });
            queries.push(q);
        }
    }
    Ok(SynthCorpus { docs, queries, qrels: Qrels::new(judgments)?, log: BehaviorLog::new(records)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::levenshtein;
    use proptest::prelude::*;

    fn set(xs: &[&'static str]) -> HashSet<&'static str> {
        xs.iter().copied().collect()
    }

    #[test]
    fn metric_examples() {
        let hits = ["e2", "e1"];
        let rel = set(&["e1"]);
        assert_eq!(recall_at_k(&hits, &rel, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&hits, &rel, 2).unwrap(), 1.0);
        assert_eq!(precision_at_k(&hits, &rel, 2).unwrap(), 0.5);
        assert!((ndcg_at_k(&hits, &rel, 2).unwrap() - 1.0 / 3f64.log2()).abs() < 1e-12);

        let none: [&str; 0] = [];
        for k in [1, 5] {
            assert_eq!(recall_at_k(&none, &rel, k).unwrap(), 0.0);
            assert_eq!(precision_at_k(&none, &rel, k).unwrap(), 0.0);
            assert_eq!(ndcg_at_k(&none, &rel, k).unwrap(), 0.0);
        }
        let one = ["e1"];
        assert_eq!(recall_at_k(&one, &rel, 1).unwrap(), 1.0);
        assert_eq!(precision_at_k(&one, &rel, 1).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&one, &rel, 1).unwrap(), 1.0);
        assert!(recall_at_k(&one, &rel, 0).is_err());
        assert!(ndcg_at_k(&one, &rel, 0).is_err());
    }

    proptest! {
        #[test]
        fn recall_monotone_and_ndcg_bounded(order in Just((0u8..20).collect::<Vec<u8>>()).prop_shuffle(),
                                            n in 0usize..15,
                                            rel in proptest::collection::hash_set(0u8..20, 1..6)) {
            let hits = &order[..n];
            let mut prev = 0.0;
            for k in 1..=16 {
                let r = recall_at_k(hits, &rel, k).unwrap();
                prop_assert!(r >= prev && r <= 1.0);
                prev = r;
                let g = ndcg_at_k(hits, &rel, k).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&g));
            }
        }

        #[test]
        fn ndcg_is_one_iff_relevant_fill_top(rel in proptest::collection::btree_set(0u8..20, 1..6),
                                             rest in proptest::collection::vec(20u8..40, 0..5),
                                             k in 1usize..10) {
            let rel_set: HashSet<u8> = rel.iter().copied().collect();
            let mut hits: Vec<u8> = rel.iter().copied().collect();
            hits.extend(rest.iter().copied());
            prop_assert!((ndcg_at_k(&hits, &rel_set, k).unwrap() - 1.0).abs() < 1e-12);
            if !rest.is_empty() {
                let mut worse = vec![rest[0]];
                worse.extend(rel.iter().copied());
                prop_assert!(ndcg_at_k(&worse, &rel_set, k).unwrap() < 1.0);
            }
        }
    }

    fn tiny() -> (Vec<EvalQuery>, Qrels) {
        let qs = vec![
            EvalQuery { id: "a".into(), text: "x".into(), category: "c1".into(), tags: vec![] },
            EvalQuery { id: "b".into(), text: "y".into(), category: "c2".into(), tags: vec!["t".into()] },
            EvalQuery { id: "z".into(), text: "w".into(), category: "c2".into(), tags: vec![] },
        ];
        let qrels = Qrels::new(BTreeMap::from([
            ("a".to_string(), BTreeSet::from(["d1".to_string()])),
            ("b".to_string(), BTreeSet::from(["d2".to_string(), "d3".to_string()])),
        ]))
        .unwrap();
        (qs, qrels)
    }

    #[test]
    fn oracle_and_empty_retrievers() {
        let (qs, qrels) = tiny();
        let oracle = |t: &str| match t {
            "x" => vec!["d1".to_string()],
            _ => vec!["d2".to_string(), "d3".to_string()],
        };
        let r = run_benchmark(&qs, &qrels, oracle, &[2, 1]).unwrap();
        assert_eq!(r.ks, vec![1, 2]);
        assert_eq!(r.missing_qrels, vec!["z".to_string()]);
        assert_eq!(r.overall.queries, 2);
        let m = r.overall.at_k[&2];
        assert_eq!((m.recall, m.ndcg), (1.0, 1.0));
        assert_eq!(r.slice_recall("t", 2), Some(1.0));

        let r = run_benchmark(&qs, &qrels, |_| Vec::new(), &[1, 10]).unwrap();
        for m in r.overall.at_k.values() {
            assert_eq!((m.recall, m.precision, m.ndcg), (0.0, 0.0, 0.0));
        }
        assert!(run_benchmark(&qs, &qrels, |_| Vec::new(), &[0]).is_err());
        assert!(run_benchmark(&qs, &qrels, |_| Vec::new(), &[]).is_err());
    }

    #[test]
    fn metrics_ignore_query_order() {
        let (mut qs, qrels) = tiny();
        let retr = |t: &str| if t == "y" { vec!["d3".to_string(), "d9".to_string()] } else { vec![] };
        let a = run_benchmark(&qs, &qrels, retr, &[1, 2]).unwrap();
        qs.reverse();
        let b = run_benchmark(&qs, &qrels, retr, &[1, 2]).unwrap();
        assert_eq!(a.overall, b.overall);
        assert_eq!(a.slices, b.slices);
    }

    #[test]
    fn qrels_reject_empty_and_round_trip() {
        assert!(Qrels::new(BTreeMap::from([("q".to_string(), BTreeSet::new())])).is_err());
        let (_, qrels) = tiny();
        let mut buf = Vec::new();
        qrels.write_jsonl(&mut buf).unwrap();
        assert_eq!(Qrels::read_jsonl(&buf[..]).unwrap(), qrels);
    }

    fn serialize(c: &SynthCorpus) -> Vec<u8> {
        let mut buf = Vec::new();
        write_jsonl_items(&c.docs, &mut buf).unwrap();
        write_jsonl_items(&c.queries, &mut buf).unwrap();
        c.qrels.write_jsonl(&mut buf).unwrap();
        c.log.write_jsonl(&mut buf).unwrap();
        buf
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = TypoSpec::default();
        let a = synth_corpus(7, 60, 4, &spec).unwrap();
        let b = synth_corpus(7, 60, 4, &spec).unwrap();
        assert_eq!(serialize(&a), serialize(&b));
        let c = synth_corpus(8, 60, 4, &spec).unwrap();
        assert_ne!(serialize(&a), serialize(&c));
    }

    #[test]
    fn synth_covers_categories_and_judges_every_query() {
        let c = synth_corpus(1, 200, 4, &TypoSpec::default()).unwrap();
        assert_eq!(c.docs.len(), 200);
        let cats: BTreeSet<&str> = c.queries.iter().map(|q| q.category.as_str()).collect();
        for cat in ["canonical", "misspelling", "character_variation", "transposition", "incidental"] {
            assert!(cats.contains(cat), "missing {cat}");
        }
        assert!(c.queries.iter().any(|q| q.tags.iter().any(|t| t == SHORT_WORD_TAG)));
        for q in &c.queries {
            assert_eq!(c.qrels.get(&q.id).unwrap(), &BTreeSet::from([q.entity.clone()]));
        }
        // Every record clears the behavioral validation threshold.
        assert!(c.log.records().iter().all(|r| r.engagements > 3));
    }

    #[test]
    fn swap_variant_keeps_word_multiset() {
        let c = synth_corpus(3, 100, 2, &TypoSpec::single(TypoOp::SwapWordOrder)).unwrap();
        let names: BTreeMap<&str, &str> = c.docs.iter().map(|d| (d.id.as_str(), d.text.as_str())).collect();
        let mut checked = 0;
        for q in c.queries.iter().filter(|q| q.category == "transposition") {
            let name = names[q.entity.as_str()];
            if name.split(' ').count() != 2 {
                continue;
            }
            assert_ne!(q.text, name);
            let mut a: Vec<&str> = q.text.split(' ').collect();
            let mut b: Vec<&str> = name.split(' ').collect();
            a.sort();
            b.sort();
            assert_eq!(a, b);
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn substitution_variants_are_one_edit_away() {
        let c = synth_corpus(5, 300, 3, &TypoSpec::single(TypoOp::Substitute)).unwrap();
        let names: BTreeMap<&str, &str> = c.docs.iter().map(|d| (d.id.as_str(), d.text.as_str())).collect();
        let variants: Vec<&SynthQuery> = c.queries.iter().filter(|q| q.category != CANONICAL).collect();
        let close = variants.iter().filter(|q| levenshtein(&q.text, names[q.entity.as_str()]) <= 1).count();
        assert!(close as f64 >= 0.9 * variants.len() as f64, "{close}/{}", variants.len());
    }

    #[test]
    fn typo_spec_weights_must_sum_to_one() {
        let mut s = TypoSpec::default();
        s.ops[0].1 += 0.1;
        assert!(s.validate().is_err());
        assert!(synth_corpus(0, 5, 1, &s).is_err());
        let s = TypoSpec { ops: vec![(TypoOp::Delete, 1.0)], edits_per_query: vec![(0, 1.0)] };
        assert!(s.validate().is_err());
    }
}

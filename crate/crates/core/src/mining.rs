//! Weak supervision from behaviour logs.
//!
//! Positive pairs are queries that led to the same entity, have similar
//! lengths and sit within a small, length-scaled edit distance. Hard
//! negatives come from whatever retriever the caller supplies, minus any
//! candidate that shares an engaged entity with the query. Train/test splits
//! assign whole connected components of the query–entity graph to one side.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::io::{BufRead, Write};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::normalize;

/// One aggregated engagement observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    #[serde(rename = "q")]
    pub query: String,
    #[serde(rename = "e")]
    pub entity: String,
    #[serde(rename = "n")]
    pub engagements: u32,
    pub day: NaiveDate,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BehaviorLog {
    records: Vec<LogRecord>,
    /// query → entity → summed engagements.
    by_query: BTreeMap<String, BTreeMap<String, u64>>,
}

impl BehaviorLog {
    /// Normalizes every query; rejects records with zero engagements or a
    /// query that normalizes to nothing.
    pub fn new(records: Vec<LogRecord>) -> Result<Self> {
        let mut log = Self::default();
        for mut r in records {
            if r.engagements == 0 {
                return Err(Error::invalid(format!("record `{}` -> `{}` has zero engagements", r.query, r.entity)));
            }
            r.query = normalize(&r.query);
            if r.query.is_empty() {
                return Err(Error::invalid(format!("empty query for entity `{}`", r.entity)));
            }
            *log.by_query.entry(r.query.clone()).or_default().entry(r.entity.clone()).or_insert(0) +=
                u64::from(r.engagements);
            log.records.push(r);
        }
        Ok(log)
    }

    /// Reads JSONL `{"q", "e", "n", "day"}` records, dropping those with
    /// fewer than `min_engagements`.
    pub fn read_jsonl<R: BufRead>(reader: R, min_engagements: u32) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: LogRecord =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            if r.engagements >= min_engagements.max(1) {
                records.push(r);
            }
        }
        Self::new(records)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct queries in lexicographic order.
    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.by_query.keys().map(String::as_str)
    }

    pub fn num_queries(&self) -> usize {
        self.by_query.len()
    }

    /// Entities engaged from `query` with their summed engagement counts.
    pub fn entities_of(&self, query: &str) -> Option<&BTreeMap<String, u64>> {
        self.by_query.get(query)
    }

    pub fn shares_entity(&self, a: &str, b: &str) -> bool {
        match (self.by_query.get(a), self.by_query.get(b)) {
            (Some(ea), Some(eb)) => ea.keys().any(|e| eb.contains_key(e)),
            _ => false,
        }
    }

    /// Share of `query`'s engagements that went to each entity.
    pub fn engagement_shares(&self, query: &str) -> BTreeMap<String, f64> {
        let Some(ents) = self.by_query.get(query) else { return BTreeMap::new() };
        let total: u64 = ents.values().sum();
        ents.iter().map(|(e, &n)| (e.clone(), n as f64 / total as f64)).collect()
    }

    pub(crate) fn entity_to_queries(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut out: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (q, ents) in &self.by_query {
            for e in ents.keys() {
                out.entry(e.as_str()).or_default().insert(q.as_str());
            }
        }
        out
    }
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_chars(&a, &b)
}

pub(crate) fn levenshtein_chars(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `max(1, ⌊len / 10⌋)`.
pub fn distance_threshold(len: usize) -> usize {
    (len / 10).max(1)
}

/// Length-ratio and edit-distance rules for a candidate positive pair.
/// Lengths are in characters; the threshold uses the shorter query.
pub fn lexically_close(a: &str, b: &str) -> bool {
    let la = a.chars().count();
    let lb = b.chars().count();
    let (short, long) = if la <= lb { (la, lb) } else { (lb, la) };
    if long == 0 || 5 * short < 4 * long {
        return false;
    }
    levenshtein(a, b) <= distance_threshold(short)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedPair {
    pub q: String,
    pub q_pos: String,
    pub shared_entities: BTreeSet<String>,
}

/// Emits every accepted pair in both orientations, sorted by `(q, q_pos)`.
/// Only queries that share an entity are ever compared.
pub fn mine_positive_pairs(log: &BehaviorLog) -> Vec<MinedPair> {
    let mut accepted: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut rejected: BTreeSet<(&str, &str)> = BTreeSet::new();
    for queries in log.entity_to_queries().values() {
        let qs: Vec<&str> = queries.iter().copied().collect();
        for (i, &a) in qs.iter().enumerate() {
            for &b in &qs[i + 1..] {
                if accepted.contains(&(a, b)) || rejected.contains(&(a, b)) {
                    continue;
                }
                if lexically_close(a, b) {
                    accepted.insert((a, b));
                } else {
                    rejected.insert((a, b));
                }
            }
        }
    }

    let mut out = Vec::with_capacity(accepted.len() * 2);
    for (a, b) in accepted {
        let ea = log.entities_of(a).expect("pair queries come from the log");
        let eb = log.entities_of(b).expect("pair queries come from the log");
        let shared: BTreeSet<String> = ea.keys().filter(|e| eb.contains_key(*e)).cloned().collect();
        out.push(MinedPair { q: a.to_string(), q_pos: b.to_string(), shared_entities: shared.clone() });
        out.push(MinedPair { q: b.to_string(), q_pos: a.to_string(), shared_entities: shared });
    }
    out.sort_by(|x, y| (&x.q, &x.q_pos).cmp(&(&y.q, &y.q_pos)));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainTriple {
    pub q: String,
    #[serde(rename = "pos")]
    pub q_pos: String,
    #[serde(rename = "negs")]
    pub negatives: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HardNegatives {
    pub triples: Vec<TrainTriple>,
    /// Pairs that ended with fewer than `n` negatives.
    pub starved: usize,
}

/// Keeps, per pair, the first `n` retrieved queries that share no engaged
/// entity with `q`. The retriever is a parameter so callers can re-mine with
/// each new checkpoint.
pub fn mine_hard_negatives<F, E>(
    pairs: &[MinedPair],
    mut retriever: F,
    log: &BehaviorLog,
    n: usize,
) -> Result<HardNegatives>
where
    F: FnMut(&str) -> std::result::Result<Vec<String>, E>,
    E: Display,
{
    let mut out = HardNegatives::default();
    for pair in pairs {
        let candidates =
            retriever(&pair.q).map_err(|e| Error::Retriever { query: pair.q.clone(), msg: e.to_string() })?;
        let mut negatives: Vec<String> = Vec::with_capacity(n);
        for c in candidates {
            if negatives.len() == n {
                break;
            }
            if c == pair.q || c == pair.q_pos || log.shares_entity(&pair.q, &c) || negatives.contains(&c) {
                continue;
            }
            negatives.push(c);
        }
        if negatives.len() < n {
            out.starved += 1;
        }
        out.triples.push(TrainTriple { q: pair.q.clone(), q_pos: pair.q_pos.clone(), negatives });
    }
    if out.starved > 0 {
        log::warn!("{} of {} pairs got fewer than {n} hard negatives", out.starved, pairs.len());
    }
    Ok(out)
}

/// Minimal union-find with path halving and union by size.
#[derive(Debug, Clone)]
pub(crate) struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Component {
    pub id: usize,
    pub queries: Vec<String>,
    pub entities: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Components ordered by their smallest query; `id` is the position.
    pub components: Vec<Component>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub test_fraction: f64,
    pub train_components: Vec<usize>,
    pub test_components: Vec<usize>,
    pub train_queries: usize,
    pub test_queries: usize,
}

impl Split {
    fn side<'a>(&'a self, ids: &'a [usize]) -> impl Iterator<Item = &'a Component> {
        ids.iter().map(move |&i| &self.components[i])
    }

    pub fn train_queries(&self) -> BTreeSet<&str> {
        self.side(&self.train).flat_map(|c| c.queries.iter().map(String::as_str)).collect()
    }

    pub fn test_queries(&self) -> BTreeSet<&str> {
        self.side(&self.test).flat_map(|c| c.queries.iter().map(String::as_str)).collect()
    }

    pub fn train_entities(&self) -> BTreeSet<&str> {
        self.side(&self.train).flat_map(|c| c.entities.iter().map(String::as_str)).collect()
    }

    pub fn test_entities(&self) -> BTreeSet<&str> {
        self.side(&self.test).flat_map(|c| c.entities.iter().map(String::as_str)).collect()
    }

    pub fn manifest(&self, seed: u64, test_fraction: f64) -> SplitManifest {
        let count = |ids: &[usize]| self.side(ids).map(|c| c.queries.len()).sum();
        SplitManifest {
            seed,
            test_fraction,
            train_components: self.train.clone(),
            test_components: self.test.clone(),
            train_queries: count(&self.train),
            test_queries: count(&self.test),
        }
    }
}

/// Partitions the log's query–entity graph by connected components. After
/// a seeded shuffle, components go to the test side until it holds at least
/// `test_fraction` of the queries; a component is skipped if taking it would
/// leave the train side smaller than that target.
pub fn split_by_components(log: &BehaviorLog, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    if log.is_empty() {
        return Err(Error::invalid("cannot split an empty log"));
    }

    let queries: Vec<&str> = log.queries().collect();
    let mut entity_ids: BTreeMap<&str, usize> = BTreeMap::new();
    for ents in log.by_query.values() {
        for e in ents.keys() {
            let next = queries.len() + entity_ids.len();
            entity_ids.entry(e.as_str()).or_insert(next);
        }
    }
    let mut uf = UnionFind::new(queries.len() + entity_ids.len());
    for (qi, q) in queries.iter().enumerate() {
        for e in log.by_query[*q].keys() {
            uf.union(qi, entity_ids[e.as_str()]);
        }
    }

    // Queries are visited in sorted order, so component order is by
    // smallest query.
    let mut root_to_comp: BTreeMap<usize, usize> = BTreeMap::new();
    let mut components: Vec<Component> = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let root = uf.find(qi);
        let id = *root_to_comp.entry(root).or_insert_with(|| {
            components.push(Component { id: components.len(), queries: vec![], entities: vec![] });
            components.len() - 1
        });
        components[id].queries.push(q.to_string());
    }
    for (e, &node) in &entity_ids {
        let id = root_to_comp[&uf.find(node)];
        components[id].entities.push(e.to_string());
    }

    let total = queries.len();
    let target = ((test_fraction * total as f64).ceil() as usize).max(1);
    let max_component = total.saturating_sub(target);
    let largest = components.iter().map(|c| c.queries.len()).max().unwrap_or(0);
    if largest as f64 > (1.0 - test_fraction) * total as f64 || largest > max_component {
        let mut sizes: Vec<usize> = components.iter().map(|c| c.queries.len()).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        return Err(Error::SplitInfeasible { largest, total, max_allowed: max_component, component_sizes: sizes });
    }

    let mut order: Vec<usize> = (0..components.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut test_q = 0;
    for id in order {
        let size = components[id].queries.len();
        if test_q < target && test_q + size <= max_component {
            test_q += size;
            test.push(id);
        } else {
            train.push(id);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { components, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(q: &str, e: &str, n: u32) -> LogRecord {
        LogRecord {
            query: q.to_string(),
            entity: e.to_string(),
            engagements: n,
            day: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
        }
    }

    fn log(records: &[(&str, &str)]) -> BehaviorLog {
        BehaviorLog::new(records.iter().map(|(q, e)| rec(q, e, 5)).collect()).unwrap()
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("tayler", "taylor"), 1);
        assert_eq!(levenshtein("sonideroaczino", "sonidero aczino"), 1);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", ""), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("ñandú", "nandu"), 2);
    }

    #[test]
    fn threshold_table() {
        for len in 1..=19 {
            assert_eq!(distance_threshold(len), 1, "len {len}");
        }
        for len in 20..=29 {
            assert_eq!(distance_threshold(len), 2, "len {len}");
        }
        assert_eq!(distance_threshold(0), 1);
        assert_eq!(distance_threshold(30), 3);
    }

    #[test]
    fn worked_pair_examples() {
        assert!(lexically_close("tayler swift", "taylor swift"));
        assert!(!lexically_close("taylor swift", "taylor swift songs"));
        assert!(lexically_close("sonideroaczino", "sonidero aczino"));
        assert!(lexically_close("radha kawach", "radha kavach"));
    }

    #[test]
    fn mining_requires_a_shared_entity() {
        let l = log(&[
            ("tayler swift", "ts"),
            ("taylor swift", "ts"),
            ("taylor swift songs", "ts"),
            ("taylor swit", "other"),
        ]);
        let pairs = mine_positive_pairs(&l);
        let got: Vec<(&str, &str)> = pairs.iter().map(|p| (p.q.as_str(), p.q_pos.as_str())).collect();
        assert_eq!(got, [("tayler swift", "taylor swift"), ("taylor swift", "tayler swift")]);
        assert_eq!(pairs[0].shared_entities, BTreeSet::from(["ts".to_string()]));
    }

    #[test]
    fn log_validation_and_shares() {
        assert!(BehaviorLog::new(vec![rec("a", "e", 0)]).is_err());
        assert!(BehaviorLog::new(vec![rec("   ", "e", 1)]).is_err());
        let l = BehaviorLog::new(vec![rec("A  b", "e1", 3), rec("a b", "e2", 1)]).unwrap();
        assert_eq!(l.num_queries(), 1);
        let shares = l.engagement_shares("a b");
        assert_eq!(shares["e1"], 0.75);
        assert_eq!(shares["e2"], 0.25);
    }

    #[test]
    fn jsonl_round_trip_and_filter() {
        let input = "{\"q\":\"pink\",\"e\":\"p\",\"n\":4,\"day\":\"2024-01-02\"}\n\
                     {\"q\":\"p!nk\",\"e\":\"p\",\"n\":2,\"day\":\"2024-01-03\"}\n";
        let l = BehaviorLog::read_jsonl(input.as_bytes(), 3).unwrap();
        assert_eq!(l.records().len(), 1);
        let mut buf = Vec::new();
        l.write_jsonl(&mut buf).unwrap();
        assert_eq!(BehaviorLog::read_jsonl(buf.as_slice(), 1).unwrap(), l);
        assert!(matches!(BehaviorLog::read_jsonl("{\"q\":1}".as_bytes(), 1), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn hard_negative_filtering() {
        let l = log(&[("q", "e1"), ("qp", "e1"), ("x", "e1"), ("y", "e2"), ("z", "e3")]);
        let pair = MinedPair { q: "q".into(), q_pos: "qp".into(), shared_entities: BTreeSet::new() };
        let retr = |_: &str| Ok::<_, String>(vec!["qp".into(), "x".into(), "y".into(), "z".into()]);
        let out = mine_hard_negatives(std::slice::from_ref(&pair), retr, &l, 1).unwrap();
        assert_eq!(out.triples[0].negatives, ["y"]);
        assert_eq!(out.starved, 0);

        let out = mine_hard_negatives(std::slice::from_ref(&pair), retr, &l, 0).unwrap();
        assert!(out.triples[0].negatives.is_empty());
        assert_eq!(out.starved, 0);

        let err = mine_hard_negatives(&[pair], |_: &str| Err::<Vec<String>, _>("boom"), &l, 2).unwrap_err();
        assert!(matches!(err, Error::Retriever { ref query, .. } if query == "q"));
    }

    #[test]
    fn starvation_is_counted() {
        let l = log(&[("a", "e"), ("b", "e"), ("c", "e")]);
        let pair = MinedPair { q: "a".into(), q_pos: "b".into(), shared_entities: BTreeSet::new() };
        let out = mine_hard_negatives(&[pair], |_: &str| Ok::<_, String>(vec!["b".into(), "c".into()]), &l, 2).unwrap();
        assert!(out.triples[0].negatives.is_empty());
        assert_eq!(out.starved, 1);
    }

    #[test]
    fn components_keep_linked_queries_together() {
        let l = log(&[("q1", "e1"), ("q2", "e1"), ("q3", "e2")]);
        for seed in 0..10 {
            let split = split_by_components(&l, 0.3, seed).unwrap();
            assert_eq!(split.components.len(), 2);
            assert_eq!(split.components[0].queries, ["q1", "q2"]);
            assert_eq!(split.components[0].entities, ["e1"]);
            let test = split.test_queries();
            assert_eq!(test.contains("q1"), test.contains("q2"));
            assert!(!split.test.is_empty() && !split.train.is_empty());
        }
    }

    #[test]
    fn single_component_is_infeasible() {
        let l = log(&[("a", "e"), ("b", "e"), ("c", "e"), ("d", "e"), ("f", "e")]);
        match split_by_components(&l, 0.2, 1) {
            Err(Error::SplitInfeasible { largest: 5, total: 5, component_sizes, .. }) => {
                assert_eq!(component_sizes, [5]);
            }
            other => panic!("expected infeasible split, got {other:?}"),
        }
        assert!(split_by_components(&l, 0.0, 1).is_err());
        assert!(split_by_components(&BehaviorLog::default(), 0.5, 1).is_err());
    }

    #[test]
    fn union_find_basics() {
        let mut uf = UnionFind::new(5);
        uf.union(0, 1);
        uf.union(3, 4);
        uf.union(1, 4);
        assert_eq!(uf.find(0), uf.find(3));
        assert_ne!(uf.find(2), uf.find(0));
    }
}

//! Replay of the high-confidence-index feedback loop: epoch-wise retrieval
//! through an exact channel over memorized query-entity pairs plus a fuzzy
//! exploration channel, behavioral validation, and write-back.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{FuzzyConfig, FuzzyRetriever, TrigramRetriever};
use crate::error::{Error, Result};
use crate::eval::CatalogDoc;
use crate::mining::BehaviorLog;
use crate::retrieval::{ConfiguredFuzzy, DocEncoding, Retriever, SparseRetriever};
use crate::tokenizer::TokenizerModel;

/// Entity id to engagement probability `P(E|Q')`.
pub type EntityScores = BTreeMap<String, f64>;

/// Memorized query-entity affinities, keyed by normalized query text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HciMemory {
    entries: BTreeMap<String, EntityScores>,
}

impl HciMemory {
    pub fn get(&self, query: &str) -> Option<&EntityScores> {
        self.entries.get(query)
    }

    pub fn entries(&self) -> &BTreeMap<String, EntityScores> {
        &self.entries
    }

    /// Number of stored (query, entity) pairs.
    pub fn num_pairs(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    /// Adds pairs not yet present and returns how many were new. Existing
    /// pairs keep their stored probability.
    pub fn insert_all(&mut self, validated: &[(String, String, f64)]) -> Result<usize> {
        if let Some(v) = validated.iter().find(|v| !(0.0..=1.0).contains(&v.2)) {
            return Err(Error::Validation(format!("engagement share {} outside [0, 1]", v.2)));
        }
        let mut added = 0;
        for (query, entity, share) in validated {
            let scores = self.entries.entry(query.clone()).or_default();
            if !scores.contains_key(entity) {
                scores.insert(entity.clone(), *share);
                added += 1;
            }
        }
        Ok(added)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochState {
    pub epoch: usize,
    pub memory: HciMemory,
    pub recall_so_far: f64,
}

/// Returns the state with `validated` merged in; never removes or lowers
/// an entry.
pub fn write_back(state: &EpochState, validated: &[(String, String, f64)]) -> Result<EpochState> {
    let mut next = state.clone();
    next.memory.insert_all(validated)?;
    Ok(next)
}

/// A stored query proposed by a channel, with its similarity `P(Q'|Q)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<'a> {
    pub entities: &'a EntityScores,
    pub sim: f64,
    /// Came from the exact channel.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntity {
    pub entity: String,
    pub score: f64,
}

/// Factorized score `Σ_Q' P(Q'|Q)·P(E|Q')` over the candidates. Entities
/// reached through the exact channel rank ahead of those found only by
/// exploration; within each tier by score descending, then entity id.
pub fn hci_score(candidates: &[Candidate<'_>]) -> Vec<RankedEntity> {
    let mut scores: BTreeMap<&str, (bool, f64)> = BTreeMap::new();
    for c in candidates {
        for (entity, p) in c.entities {
            let slot = scores.entry(entity.as_str()).or_insert((false, 0.0));
            slot.0 |= c.exact;
            slot.1 += c.sim * p;
        }
    }
    let mut ranked: Vec<(bool, RankedEntity)> =
        scores.into_iter().map(|(e, (exact, score))| (exact, RankedEntity { entity: e.to_string(), score })).collect();
    ranked.sort_by(|a, b| {
        b.0.cmp(&a.0).then_with(|| b.1.score.total_cmp(&a.1.score)).then_with(|| a.1.entity.cmp(&b.1.entity))
    });
    ranked.into_iter().map(|(_, r)| r).collect()
}

/// The exploration channel used after the cold start.
#[derive(Debug, Clone)]
pub enum Channel {
    /// Exact matches only.
    None,
    Trigram,
    Sparse {
        tokenizer: Arc<TokenizerModel>,
        encoding: DocEncoding,
    },
    Fuzzy(FuzzyConfig),
    /// Proposes the behaviorally true entities directly.
    Oracle,
}

impl Channel {
    pub fn name(&self) -> &'static str {
        match self {
            Channel::None => "none",
            Channel::Trigram => "trigram",
            Channel::Sparse { .. } => "sparse",
            Channel::Fuzzy(_) => "fuzzy",
            Channel::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayMode {
    /// Every epoch evaluates the whole log.
    ReplayAll,
    /// Epoch `e` evaluates queries logged on the first `e` distinct days.
    DaySliced,
}

#[derive(Debug, Clone)]
pub struct ReplayConfig {
    pub channel: Channel,
    pub epochs: usize,
    pub k_eval: usize,
    pub fuzzy_top: usize,
    pub mode: ReplayMode,
}

impl ReplayConfig {
    pub fn new(channel: Channel) -> Self {
        Self { channel, epochs: 15, k_eval: 25, fuzzy_top: 10, mode: ReplayMode::DaySliced }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub queries: usize,
    pub recall: f64,
    pub new_entries: usize,
    pub total_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub channel: String,
    pub mode: ReplayMode,
    pub k_eval: usize,
    pub fuzzy_top: usize,
    pub epochs: Vec<EpochReport>,
    /// First epoch that added no entries, once every day is visible.
    pub fixed_point_epoch: Option<usize>,
}

impl SimReport {
    pub fn cold_start_recall(&self) -> f64 {
        self.epochs.first().map_or(0.0, |e| e.recall)
    }

    pub fn final_recall(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.recall)
    }
}

/// Stored documents of the exploration index: memorized queries, then
/// catalog names mapped to their entity with probability 1.
struct Snapshot {
    targets: Vec<EntityScores>,
    retriever: Option<Box<dyn Retriever>>,
}

impl Snapshot {
    fn build(channel: &Channel, memory: &HciMemory, catalog: &[CatalogDoc]) -> Result<Self> {
        let mut ids = Vec::new();
        let mut texts = Vec::new();
        let mut targets = Vec::new();
        for (q, scores) in memory.entries() {
            ids.push(format!("q:{q}"));
            texts.push(q.clone());
            targets.push(scores.clone());
        }
        for d in catalog {
            ids.push(format!("c:{}", d.id));
            texts.push(d.text.clone());
            targets.push(BTreeMap::from([(d.id.clone(), 1.0)]));
        }
        let docs = ids.into_iter().zip(texts.iter().cloned());
        let retriever: Option<Box<dyn Retriever>> = match channel {
            Channel::None | Channel::Oracle => None,
            Channel::Trigram => Some(Box::new(TrigramRetriever::build(docs)?)),
            Channel::Sparse { tokenizer, encoding } => {
                Some(Box::new(SparseRetriever::build(tokenizer.clone(), encoding.clone(), docs)?))
            }
            Channel::Fuzzy(cfg) => Some(Box::new(ConfiguredFuzzy { inner: FuzzyRetriever::build(texts), cfg: *cfg })),
        };
        Ok(Self { targets, retriever })
    }

    fn candidates(&self, query: &str, top: usize) -> Vec<(usize, f64)> {
        let Some(r) = &self.retriever else { return Vec::new() };
        let norm = r.self_score(query);
        if norm <= 0.0 {
            return Vec::new();
        }
        r.retrieve(query, top).into_iter().map(|h| (h.doc_id as usize, (h.score / norm).clamp(0.0, 1.0))).collect()
    }
}

fn recall_of(ranked: &[String], truth: &EntityScores) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    ranked.iter().filter(|e| truth.contains_key(*e)).count() as f64 / truth.len() as f64
}

/// Replays the log epoch by epoch. Epoch 0 matches queries against the
/// catalog text only; later epochs combine the exact channel over the
/// memory with the configured exploration channel. Every retrieved entity
/// the log confirms is written back at the end of its epoch.
pub fn run_replay(log: &BehaviorLog, catalog: &[CatalogDoc], cfg: &ReplayConfig) -> Result<SimReport> {
    if cfg.epochs < 1 {
        return Err(Error::Validation("epochs must be at least 1".into()));
    }
    if cfg.k_eval < 1 {
        return Err(Error::Validation("k_eval must be at least 1".into()));
    }

    let mut first_day: HashMap<&str, chrono::NaiveDate> = HashMap::new();
    for r in log.records() {
        let d = first_day.entry(r.query.as_str()).or_insert(r.day);
        *d = (*d).min(r.day);
    }
    let days: Vec<chrono::NaiveDate> = first_day.values().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let truth: BTreeMap<&str, EntityScores> = log.queries().map(|q| (q, log.engagement_shares(q))).collect();
    let visible = |epoch: usize| -> Vec<&str> {
        match cfg.mode {
            ReplayMode::ReplayAll => truth.keys().copied().collect(),
            ReplayMode::DaySliced => {
                let cutoff = days.get(epoch.max(1) - 1).or(days.last());
                truth.keys().copied().filter(|q| cutoff.is_some_and(|c| first_day[q] <= *c)).collect()
            }
        }
    };
    let all_days_visible = |epoch: usize| cfg.mode == ReplayMode::ReplayAll || epoch >= days.len();

    let cold = TrigramRetriever::build(catalog.iter().map(|d| (d.id.clone(), d.text.clone())))?;
    let mut state = EpochState::default();
    let mut reports = Vec::new();
    let mut fixed_point = None;

    for epoch in 0..cfg.epochs {
        let queries = visible(epoch);
        let snapshot = if epoch == 0 { None } else { Some(Snapshot::build(&cfg.channel, &state.memory, catalog)?) };
        let mut validated = Vec::new();
        let mut recall_sum = 0.0;
        for &q in &queries {
            let ranked: Vec<String> = match &snapshot {
                None => {
                    cold.retrieve(q, cfg.k_eval).into_iter().map(|h| catalog[h.doc_id as usize].id.clone()).collect()
                }
                Some(snap) => {
                    let oracle_truth;
                    let mut cands = Vec::new();
                    if let Some(scores) = state.memory.get(q) {
                        cands.push(Candidate { entities: scores, sim: 1.0, exact: true });
                    }
                    if let Channel::Oracle = cfg.channel {
                        oracle_truth = truth[q].clone();
                        cands.push(Candidate { entities: &oracle_truth, sim: 1.0, exact: false });
                        hci_score(&cands)
                    } else {
                        for (doc, sim) in snap.candidates(q, cfg.fuzzy_top) {
                            cands.push(Candidate { entities: &snap.targets[doc], sim, exact: false });
                        }
                        hci_score(&cands)
                    }
                    .into_iter()
                    .take(cfg.k_eval)
                    .map(|r| r.entity)
                    .collect()
                }
            };
            let shares = &truth[q];
            recall_sum += recall_of(&ranked, shares);
            for e in ranked {
                if let Some(&share) = shares.get(&e) {
                    validated.push((q.to_string(), e, share));
                }
            }
        }
        let before = state.memory.num_pairs();
        state = write_back(&state, &validated)?;
        let added = state.memory.num_pairs() - before;
        let recall = if queries.is_empty() { 0.0 } else { recall_sum / queries.len() as f64 };
        state.epoch = epoch;
        state.recall_so_far = recall;
        log::info!("epoch {epoch}: recall {recall:.4} over {} queries, {added} new entries", queries.len());
        reports.push(EpochReport {
            epoch,
            queries: queries.len(),
            recall,
            new_entries: added,
            total_entries: state.memory.num_pairs(),
        });
        if added == 0 && epoch > 0 && all_days_visible(epoch) {
            fixed_point = Some(epoch);
            break;
        }
    }

    Ok(SimReport {
        channel: cfg.channel.name().to_string(),
        mode: cfg.mode,
        k_eval: cfg.k_eval,
        fuzzy_top: cfg.fuzzy_top,
        epochs: reports,
        fixed_point_epoch: fixed_point,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::LogRecord;
    use chrono::NaiveDate;

    fn scores(xs: &[(&str, f64)]) -> EntityScores {
        xs.iter().map(|&(e, p)| (e.to_string(), p)).collect()
    }

    #[test]
    fn factorized_score_example() {
        let a = scores(&[("e1", 0.5)]);
        let b = scores(&[("e1", 1.0)]);
        let ranked = hci_score(&[
            Candidate { entities: &a, sim: 0.8, exact: false },
            Candidate { entities: &b, sim: 0.2, exact: false },
        ]);
        assert_eq!(ranked.len(), 1);
        assert!((ranked[0].score - 0.6).abs() < 1e-12);
        assert!(hci_score(&[]).is_empty());
    }

    #[test]
    fn exact_entities_rank_first_and_ties_break_by_id() {
        let exact = scores(&[("e9", 0.1)]);
        let fuzzy = scores(&[("e2", 1.0), ("e1", 1.0)]);
        let ranked = hci_score(&[
            Candidate { entities: &fuzzy, sim: 0.9, exact: false },
            Candidate { entities: &exact, sim: 1.0, exact: true },
        ]);
        let order: Vec<&str> = ranked.iter().map(|r| r.entity.as_str()).collect();
        assert_eq!(order, ["e9", "e1", "e2"]);
    }

    #[test]
    fn write_back_is_idempotent_and_never_lowers() {
        let s0 = EpochState::default();
        assert_eq!(write_back(&s0, &[]).unwrap(), s0);
        let v = vec![("q".to_string(), "e".to_string(), 0.7)];
        let s1 = write_back(&s0, &v).unwrap();
        assert_eq!(write_back(&s1, &v).unwrap(), s1);
        let lower = vec![("q".to_string(), "e".to_string(), 0.1)];
        assert_eq!(write_back(&s1, &lower).unwrap().memory.get("q").unwrap()["e"], 0.7);
        assert!(write_back(&s0, &[("q".into(), "e".into(), 1.5)]).is_err());
    }

    fn day(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 1, d).unwrap()
    }

    fn toy() -> (BehaviorLog, Vec<CatalogDoc>) {
        let rec = |q: &str, e: &str, d| LogRecord { query: q.into(), entity: e.into(), engagements: 5, day: day(d) };
        let log = BehaviorLog::new(vec![
            rec("taylor swift", "e1", 1),
            rec("tayler swift", "e1", 1),
            rec("swift taylr", "e1", 2),
            rec("sabrina carpenter", "e2", 2),
            rec("carpenter sabrna", "e2", 3),
            rec("zzz", "e2", 3),
        ])
        .unwrap();
        let catalog = vec![
            CatalogDoc { id: "e1".into(), text: "taylor swift".into() },
            CatalogDoc { id: "e2".into(), text: "sabrina carpenter".into() },
            CatalogDoc { id: "e3".into(), text: "post malone".into() },
        ];
        (log, catalog)
    }

    fn replay(channel: Channel, mode: ReplayMode) -> SimReport {
        let (log, catalog) = toy();
        let cfg = ReplayConfig { channel, epochs: 15, k_eval: 1, fuzzy_top: 10, mode };
        run_replay(&log, &catalog, &cfg).unwrap()
    }

    #[test]
    fn oracle_saturates_after_one_epoch() {
        let r = replay(Channel::Oracle, ReplayMode::ReplayAll);
        assert_eq!(r.epochs[1].recall, 1.0);
        assert_eq!(r.fixed_point_epoch, Some(2));
    }

    #[test]
    fn no_channel_pins_recall_at_cold_start() {
        let r = replay(Channel::None, ReplayMode::ReplayAll);
        assert!(r.epochs.iter().all(|e| e.recall == r.cold_start_recall()));
        assert_eq!(r.fixed_point_epoch, Some(1));
    }

    #[test]
    fn cold_start_ignores_channel_and_recall_is_monotone() {
        let none = replay(Channel::None, ReplayMode::ReplayAll);
        for ch in [Channel::Trigram, Channel::Fuzzy(FuzzyConfig::default()), Channel::Oracle] {
            let r = replay(ch, ReplayMode::ReplayAll);
            assert_eq!(r.epochs[0], none.epochs[0]);
            assert!(r.epochs.windows(2).all(|w| w[1].recall >= w[0].recall));
            assert!(r.fixed_point_epoch.is_some());
        }
    }

    #[test]
    fn day_slicing_reveals_queries_progressively() {
        let r = replay(Channel::Trigram, ReplayMode::DaySliced);
        let counts: Vec<usize> = r.epochs.iter().map(|e| e.queries).collect();
        assert_eq!(&counts[..4], &[2, 2, 4, 6]);
        assert!(r.fixed_point_epoch.unwrap() >= 3);
    }

    #[test]
    fn memorized_pair_is_retrieved_exactly() {
        let (log, catalog) = toy();
        let mut memory = HciMemory::default();
        memory.insert_all(&[("zzz".into(), "e2".into(), 1.0)]).unwrap();
        let snap = Snapshot::build(&Channel::None, &memory, &catalog).unwrap();
        assert!(snap.candidates("zzz", 10).is_empty());
        let c = [Candidate { entities: memory.get("zzz").unwrap(), sim: 1.0, exact: true }];
        assert_eq!(hci_score(&c)[0].entity, "e2");
        let cfg = ReplayConfig { epochs: 0, ..ReplayConfig::new(Channel::None) };
        assert!(run_replay(&log, &catalog, &cfg).is_err());
    }
}

//! Command implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use sfns_core::baselines::{FuzzyConfig, FuzzyRetriever, TrigramRetriever};
use sfns_core::encoder::{self, EncoderParams, TrainConfig};
use sfns_core::eval::{self, run_benchmark, synth_corpus, CatalogDoc, Qrels, TypoSpec};
use sfns_core::hci_sim::{run_replay, Channel, ReplayConfig, ReplayMode};
use sfns_core::index::{IndexDoc, InvertedIndex};
use sfns_core::mining::{
    mine_hard_negatives, mine_positive_pairs, split_by_components, BehaviorLog, MinedPair, TrainTriple,
};
use sfns_core::retrieval::{ConfiguredFuzzy, DocEncoding, Retriever, SparseRetriever};
use sfns_core::sparse::{normalize, QueryWeighting, SparseVector, VocabStats};
use sfns_core::tokenizer::{train_unigram, TokenizerModel, TrainerConfig, UNK_ID};

use crate::args::*;
use crate::report::{at, io_at, read_jsonl, read_lines, write_jsonl, CliError, CliResult, Report};

pub fn run(cli: &Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let ctx = Ctx { seed: cli.seed, threads: cli.threads };
    match &cli.command {
        Command::Tokenize(TokenizeCmd::Train(a)) => tokenize_train(&ctx, a),
        Command::Tokenize(TokenizeCmd::Apply(a)) => tokenize_apply(&ctx, a),
        Command::Encoder(EncoderCmd::Train(a)) => encoder_train(&ctx, a),
        Command::Encoder(EncoderCmd::Encode(a)) => encoder_encode(&ctx, a),
        Command::Index(IndexCmd::Build(a)) => index_build(&ctx, a),
        Command::Index(IndexCmd::Search(a)) => index_search(&ctx, a),
        Command::Index(IndexCmd::Stats(a)) => index_stats(&ctx, a),
        Command::Mine(MineCmd::Pairs(a)) => mine_pairs(&ctx, a),
        Command::Mine(MineCmd::Negatives(a)) => mine_negatives(&ctx, a),
        Command::Mine(MineCmd::Split(a)) => mine_split(&ctx, a),
        Command::Eval(EvalCmd::Run(a)) => eval_run(&ctx, a),
        Command::Sim(SimCmd::Replay(a)) => sim_replay(&ctx, a),
        Command::Gen(GenCmd::Synth(a)) => gen_synth(&ctx, a),
        Command::Search(a) => search(&ctx, a),
    }
}

struct Ctx {
    seed: u64,
    threads: usize,
}

impl Ctx {
    fn report(&self, command: &str, config: &impl Serialize, result: &impl Serialize) -> Report {
        Report::new(command, self.seed, self.threads, config, result)
    }
}

fn load_tokenizer(path: &Path) -> CliResult<Arc<TokenizerModel>> {
    at(path, TokenizerModel::load(path)).map(Arc::new)
}

fn load_params(path: &Path, tokenizer: &TokenizerModel) -> CliResult<EncoderParams> {
    let params = at(path, EncoderParams::load(path))?;
    if params.vocab_size() != tokenizer.vocab_size() {
        return Err(CliError::Usage(format!(
            "encoder vocabulary ({}) does not match the tokenizer ({})",
            params.vocab_size(),
            tokenizer.vocab_size()
        )));
    }
    Ok(params)
}

fn load_log(path: &Path, min_engagements: u32) -> CliResult<BehaviorLog> {
    at(path, BehaviorLog::read_jsonl(crate::report::open(path)?, min_engagements))
}

fn load_catalog(path: &Path) -> CliResult<Vec<CatalogDoc>> {
    at(path, eval::load_catalog(path))
}

fn require<'a, T>(value: &'a Option<T>, flag: &str, why: &str) -> CliResult<&'a T> {
    value.as_ref().ok_or_else(|| CliError::Usage(format!("{flag} is required {why}")))
}

fn doc_encoding(params: Option<&Path>, tokenizer: &TokenizerModel) -> CliResult<DocEncoding> {
    Ok(match params {
        Some(p) => DocEncoding::Expansion(load_params(p, tokenizer)?),
        None => DocEncoding::Binary,
    })
}

fn fuzzy_config(max_edits: usize, prefix_lock: usize) -> CliResult<FuzzyConfig> {
    Ok(FuzzyConfig::new(max_edits, prefix_lock)?)
}

/// Documents in retriever id order plus the retriever over them.
struct Searcher {
    docs: Vec<(String, String)>,
    retriever: Box<dyn Retriever>,
}

impl Searcher {
    fn new(method: Method, src: &SourceArgs) -> CliResult<Self> {
        let index = src.index.as_deref().map(|p| at(p, InvertedIndex::load(p))).transpose()?;
        let docs: Vec<(String, String)> = match (&index, &src.catalog) {
            (Some(index), _) => index.docs().iter().map(|d| (d.ext_id.clone(), d.text.clone())).collect(),
            (None, Some(path)) => load_catalog(path)?.into_iter().map(|d| (d.id, d.text)).collect(),
            (None, None) => return Err(CliError::Usage("one of --index or --catalog is required".into())),
        };
        Self::over(method, docs, index, src)
    }

    fn over(
        method: Method,
        docs: Vec<(String, String)>,
        index: Option<InvertedIndex>,
        src: &SourceArgs,
    ) -> CliResult<Self> {
        let retriever: Box<dyn Retriever> = match method {
            Method::Trigram => Box::new(TrigramRetriever::build(docs.iter().map(|(id, t)| (id.as_str(), t.as_str())))?),
            Method::Fuzzy => Box::new(ConfiguredFuzzy {
                inner: FuzzyRetriever::build(docs.iter().map(|(_, t)| t.as_str())),
                cfg: fuzzy_config(src.max_edits, src.prefix_lock)?,
            }),
            Method::Sparse => {
                let tok_path = require(&src.tokenizer, "--tokenizer", "for the sparse method")?;
                let tokenizer = load_tokenizer(tok_path)?;
                match index {
                    Some(index) => {
                        if src.params.is_some() {
                            log::warn!("--params ignored: the index already holds document vectors");
                        }
                        Box::new(SparseRetriever::from_index(tokenizer, DocEncoding::Binary, index))
                    }
                    None => {
                        let encoding = doc_encoding(src.params.as_deref(), &tokenizer)?;
                        Box::new(SparseRetriever::build(
                            tokenizer,
                            encoding,
                            docs.iter().map(|(id, t)| (id.as_str(), t.as_str())),
                        )?)
                    }
                }
            }
        };
        Ok(Self { docs, retriever })
    }

    fn hits(&self, query: &str, k: usize) -> Vec<serde_json::Value> {
        self.retriever
            .retrieve(query, k)
            .into_iter()
            .map(|h| {
                let (id, text) = &self.docs[h.doc_id as usize];
                json!({ "rank": h.rank, "id": id, "text": text, "score": h.score })
            })
            .collect()
    }

    fn ids(&self, query: &str, k: usize) -> Vec<String> {
        self.retriever.retrieve(query, k).into_iter().map(|h| self.docs[h.doc_id as usize].0.clone()).collect()
    }
}

fn tokenize_train(ctx: &Ctx, a: &TokenizeTrainArgs) -> CliResult<()> {
    let corpus = read_lines(&a.input)?;
    let cfg = TrainerConfig { vocab_size: a.vocab_size, max_piece_len: a.max_piece_len, ..TrainerConfig::default() };
    let model = train_unigram(corpus.iter(), &cfg)?;
    at(&a.out, model.save(&a.out))?;
    let longest = model.pieces().iter().map(|p| p.text.chars().count()).max().unwrap_or(0);
    let result = json!({ "lines": corpus.len(), "vocab_size": model.vocab_size(), "longest_piece": longest });
    ctx.report("tokenize train", a, &result).emit(None)
}

fn tokenize_apply(ctx: &Ctx, a: &TokenizeApplyArgs) -> CliResult<()> {
    let tokenizer = load_tokenizer(&a.tokenizer)?;
    let texts = match (&a.input, &a.text) {
        (Some(path), _) => read_lines(path)?,
        (None, Some(text)) => vec![text.clone()],
        (None, None) => return Err(CliError::Usage("one of --input or --text is required".into())),
    };
    let rows: Vec<serde_json::Value> = texts
        .iter()
        .map(|t| {
            let normalized = normalize(t);
            json!({
                "text": t,
                "pieces": tokenizer.segment_pieces(&normalized),
                "ids": tokenizer.segment(&normalized).into_iter().map(|id| (id != UNK_ID).then_some(id)).collect::<Vec<_>>(),
            })
        })
        .collect();
    match &a.out {
        Some(path) => {
            write_jsonl(path, &rows)?;
            ctx.report("tokenize apply", a, &json!({ "texts": rows.len() })).emit(None)
        }
        None => ctx.report("tokenize apply", a, &rows).emit(None),
    }
}

fn encoder_train(ctx: &Ctx, a: &EncoderTrainArgs) -> CliResult<()> {
    let tokenizer = load_tokenizer(&a.tokenizer)?;
    let triples: Vec<TrainTriple> = read_jsonl(&a.pairs)?;
    let stats = match &a.catalog {
        Some(path) => {
            let docs = load_catalog(path)?;
            let vectors = docs
                .iter()
                .map(|d| DocEncoding::Binary.encode(&tokenizer, &d.text))
                .collect::<sfns_core::Result<Vec<_>>>()?;
            VocabStats::from_vectors(vectors.iter().filter(|v| !v.is_empty()))
        }
        None => {
            let texts: BTreeSet<&str> = triples
                .iter()
                .flat_map(|t| std::iter::once(t.q_pos.as_str()).chain(t.negatives.iter().map(String::as_str)))
                .collect();
            let vectors = texts
                .into_iter()
                .map(|t| DocEncoding::Binary.encode(&tokenizer, t))
                .collect::<sfns_core::Result<Vec<SparseVector>>>()?;
            VocabStats::from_vectors(vectors.iter().filter(|v| !v.is_empty()))
        }
    };
    let items = encoder::training_items(&triples, &tokenizer, &stats);
    let init = EncoderParams::init(tokenizer.vocab_size(), a.dim, a.init_bias, ctx.seed)?;
    let cfg = TrainConfig {
        lr: a.lr,
        momentum: a.momentum,
        steps: a.steps,
        batch_size: a.batch_size,
        lambda_reg: a.lambda_reg,
        seed: ctx.seed,
        ..TrainConfig::default()
    };
    let (params, telemetry) = encoder::train(&init, &items, &cfg)?;
    at(&a.out, params.save(&a.out))?;

    let rows: Vec<_> = telemetry
        .iter()
        .map(|t| {
            json!({
                "step": t.step,
                "loss": t.loss.total,
                "infonce": t.loss.infonce,
                "flops": t.loss.flops,
                "avg_nonzero_dims": t.avg_nonzero_dims,
            })
        })
        .collect();
    if let Some(path) = &a.telemetry {
        write_jsonl(path, &rows)?;
    }
    let result = json!({
        "triples": triples.len(),
        "items": items.len(),
        "first_step": rows.first(),
        "last_step": rows.last(),
    });
    ctx.report("encoder train", a, &result).emit(None)
}

fn encoder_encode(ctx: &Ctx, a: &EncoderEncodeArgs) -> CliResult<()> {
    let tokenizer = load_tokenizer(&a.tokenizer)?;
    let encoding = DocEncoding::Expansion(load_params(&a.params, &tokenizer)?);
    let docs = load_catalog(&a.docs)?;
    let mut rows = Vec::with_capacity(docs.len());
    let mut total_dims = 0usize;
    for d in &docs {
        let v = encoding.encode(&tokenizer, &d.text)?;
        total_dims += v.len();
        let vec: BTreeMap<&str, f32> =
            v.iter().map(|(t, w)| (tokenizer.piece(t).expect("encoder output stays in vocabulary"), w)).collect();
        rows.push(json!({ "id": d.id, "text": d.text, "vec": vec }));
    }
    write_jsonl(&a.out, &rows)?;
    let avg = if docs.is_empty() { 0.0 } else { total_dims as f64 / docs.len() as f64 };
    ctx.report("encoder encode", a, &json!({ "docs": docs.len(), "avg_nonzero_dims": avg })).emit(None)
}

fn index_summary(index: &InvertedIndex) -> serde_json::Value {
    json!({
        "docs": index.len(),
        "terms": index.num_terms(),
        "postings": index.num_postings(),
        "avg_nonzero_dims": index.avg_nonzero_dims(),
    })
}

fn index_build(ctx: &Ctx, a: &IndexBuildArgs) -> CliResult<()> {
    let tokenizer = load_tokenizer(&a.tokenizer)?;
    let mut skipped = 0;
    let index = match (&a.vectors, &a.catalog) {
        (Some(path), _) => {
            let ext = at(path, encoder::load_external_vectors(path, &tokenizer))?;
            skipped = ext.skipped_entries;
            let docs = ext.docs.into_iter().map(|d| IndexDoc::new(d.id, d.text.unwrap_or_default(), d.vector));
            at(path, InvertedIndex::build(docs))?
        }
        (None, Some(path)) => {
            let encoding = doc_encoding(a.params.as_deref(), &tokenizer)?;
            let docs = load_catalog(path)?;
            let built =
                SparseRetriever::build(tokenizer, encoding, docs.iter().map(|d| (d.id.as_str(), d.text.as_str())));
            at(path, built)?.index().clone()
        }
        (None, None) => return Err(CliError::Usage("one of --vectors or --catalog is required".into())),
    };
    at(&a.out, index.save(&a.out))?;
    let mut result = index_summary(&index);
    result["skipped_entries"] = json!(skipped);
    ctx.report("index build", a, &result).emit(None)
}

fn index_search(ctx: &Ctx, a: &IndexSearchArgs) -> CliResult<()> {
    let tokenizer = load_tokenizer(&a.tokenizer)?;
    let index = at(&a.index, InvertedIndex::load(&a.index))?;
    let weighting = match a.encoder {
        QueryEncoder::Idf => QueryWeighting::Idf,
        QueryEncoder::None => QueryWeighting::Indicator,
    };
    let retriever = SparseRetriever::from_index(tokenizer, DocEncoding::Binary, index).with_weighting(weighting);
    let hits: Vec<_> = retriever
        .search(&a.query, a.k)?
        .iter()
        .map(|h| {
            let d = retriever.doc(h);
            json!({ "rank": h.rank, "id": d.ext_id, "text": d.text, "score": h.score })
        })
        .collect();
    ctx.report("index search", a, &json!({ "hits": hits })).emit(None)
}

fn index_stats(ctx: &Ctx, a: &IndexStatsArgs) -> CliResult<()> {
    let index = at(&a.index, InvertedIndex::load(&a.index))?;
    let mut result = index_summary(&index);
    result["doc_count"] = json!(index.stats().doc_count());
    ctx.report("index stats", a, &result).emit(None)
}

fn mine_pairs(ctx: &Ctx, a: &MinePairsArgs) -> CliResult<()> {
    let log = load_log(&a.log, a.min_engagements)?;
    let pairs = mine_positive_pairs(&log);
    write_jsonl(
        &a.out,
        pairs.iter().map(|p| TrainTriple { q: p.q.clone(), q_pos: p.q_pos.clone(), negatives: Vec::new() }),
    )?;
    let result = json!({ "records": log.records().len(), "queries": log.num_queries(), "pairs": pairs.len() });
    ctx.report("mine pairs", a, &result).emit(None)
}

fn mine_negatives(ctx: &Ctx, a: &MineNegativesArgs) -> CliResult<()> {
    let log = load_log(&a.log, a.min_engagements)?;
    let triples: Vec<TrainTriple> = read_jsonl(&a.pairs)?;
    let pairs: Vec<MinedPair> =
        triples.into_iter().map(|t| MinedPair { q: t.q, q_pos: t.q_pos, shared_entities: BTreeSet::new() }).collect();
    // Candidates are the logged queries themselves.
    let queries: Vec<(String, String)> = log.queries().map(|q| (q.to_string(), q.to_string())).collect();
    let src = SourceArgs {
        index: None,
        catalog: None,
        tokenizer: a.tokenizer.clone(),
        params: a.params.clone(),
        max_edits: 2,
        prefix_lock: 0,
    };
    let searcher = Searcher::over(a.method, queries, None, &src)?;
    let mined = mine_hard_negatives(&pairs, |q| Ok::<_, CliError>(searcher.ids(q, a.depth)), &log, a.n)?;
    write_jsonl(&a.out, &mined.triples)?;
    ctx.report("mine negatives", a, &json!({ "pairs": pairs.len(), "starved": mined.starved })).emit(None)
}

fn mine_split(ctx: &Ctx, a: &MineSplitArgs) -> CliResult<()> {
    let log = load_log(&a.log, a.min_engagements)?;
    let split = split_by_components(&log, a.test_frac, ctx.seed)?;
    let result = json!({ "manifest": split.manifest(ctx.seed, a.test_frac), "components": split.components });
    ctx.report("mine split", a, &result).emit(a.out.as_deref())
}

fn eval_run(ctx: &Ctx, a: &EvalRunArgs) -> CliResult<()> {
    let queries = at(&a.queries, eval::load_queries(&a.queries))?;
    let qrels: Qrels = at(&a.qrels, eval::load_qrels(&a.qrels))?;
    let searcher = Searcher::new(a.method, &a.source)?;
    let depth = a.k.iter().copied().max().unwrap_or(0);
    let bench = run_benchmark(&queries, &qrels, |q| searcher.ids(q, depth), &a.k)?;
    if let Some(path) = &a.csv {
        std::fs::write(path, bench.to_csv()).map_err(io_at(path))?;
    }
    ctx.report("eval run", a, &bench).move_to_meta("qps").emit(a.out.as_deref())
}

fn sim_replay(ctx: &Ctx, a: &SimReplayArgs) -> CliResult<()> {
    let log = load_log(&a.log, a.min_engagements)?;
    let catalog = load_catalog(&a.catalog)?;
    let channel = match a.channel {
        ChannelArg::Trigram => Channel::Trigram,
        ChannelArg::Fuzzy => Channel::Fuzzy(fuzzy_config(a.max_edits, a.prefix_lock)?),
        ChannelArg::None => Channel::None,
        ChannelArg::Oracle => Channel::Oracle,
        ChannelArg::Sparse => {
            let tokenizer = load_tokenizer(require(&a.tokenizer, "--tokenizer", "for the sparse channel")?)?;
            let encoding = doc_encoding(a.params.as_deref(), &tokenizer)?;
            Channel::Sparse { tokenizer, encoding }
        }
    };
    let cfg = ReplayConfig {
        channel,
        epochs: a.epochs,
        k_eval: a.k,
        fuzzy_top: a.fuzzy_top,
        mode: if a.replay_all_each_epoch { ReplayMode::ReplayAll } else { ReplayMode::DaySliced },
    };
    let report = run_replay(&log, &catalog, &cfg)?;
    ctx.report("sim replay", a, &report).emit(a.out.as_deref())
}

fn gen_synth(ctx: &Ctx, a: &GenSynthArgs) -> CliResult<()> {
    let corpus = synth_corpus(ctx.seed, a.entities, a.queries_per_entity, &TypoSpec::default())?;
    at(&a.out_dir, corpus.write_dir(&a.out_dir))?;
    let mut by_category: BTreeMap<&str, usize> = BTreeMap::new();
    for q in &corpus.queries {
        *by_category.entry(q.category.as_str()).or_default() += 1;
    }
    let result = json!({
        "docs": corpus.docs.len(),
        "queries": corpus.queries.len(),
        "log_records": corpus.log.records().len(),
        "by_category": by_category,
    });
    ctx.report("gen synth", a, &result).emit(None)
}

fn search(ctx: &Ctx, a: &SearchArgs) -> CliResult<()> {
    let searcher = Searcher::new(a.method, &a.source)?;
    ctx.report("search", a, &json!({ "hits": searcher.hits(&a.query, a.k) })).emit(None)
}

//! Desk-scale document expansion encoder.
//!
//! Each input token `t` has a static embedding `h_t`; the output layer maps
//! it onto the whole vocabulary, and the document weight of token `j` is the
//! saturated ReLU max-pooled over input positions:
//!
//! ```text
//! w_j = max_t ln(1 + relu(E_j · h_t + b_j))
//! ```
//!
//! Training minimises InfoNCE over (query, positive, negatives) plus a FLOPS
//! penalty `λ Σ_j (mean_d w_j(d))²`. Queries stay on the inference-free IDF
//! path, so only document-side parameters learn.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::codec::{verify_crc, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::mining::TrainTriple;
use crate::sparse::{encode_query, normalize, SparseVector, TokenId, VocabStats};
use crate::tokenizer::{TokenizerModel, UNK_ID};

const MAGIC: &[u8; 4] = b"SFNE";

/// Embedding table, output projection and bias, all `f32`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    vocab: usize,
    dim: usize,
    embed: Vec<f32>,
    proj: Vec<f32>,
    bias: Vec<f32>,
}

impl EncoderParams {
    pub fn new(vocab: usize, dim: usize, embed: Vec<f32>, proj: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if vocab == 0 || dim == 0 {
            return Err(Error::invalid("encoder needs vocab >= 1 and dim >= 1"));
        }
        if embed.len() != vocab * dim || proj.len() != vocab * dim || bias.len() != vocab {
            return Err(Error::invalid(format!("parameter shapes do not match vocab={vocab}, dim={dim}")));
        }
        if embed.iter().chain(&proj).chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("encoder parameters must be finite"));
        }
        Ok(Self { vocab, dim, embed, proj, bias })
    }

    /// Unit-norm random embeddings with the projection tied to them and a
    /// uniform negative bias: every token activates itself with weight
    /// `ln(1 + 1 + bias)` and only its closest neighbours besides.
    pub fn init(vocab: usize, dim: usize, bias: f32, seed: u64) -> Result<Self> {
        if vocab == 0 || dim == 0 {
            return Err(Error::invalid("encoder needs vocab >= 1 and dim >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut embed = Vec::with_capacity(vocab * dim);
        for _ in 0..vocab {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            embed.extend(row.iter().map(|x| (x / norm) as f32));
        }
        let proj = embed.clone();
        Self::new(vocab, dim, embed, proj, vec![bias; vocab])
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self) -> &[f32] {
        &self.embed
    }

    pub fn proj(&self) -> &[f32] {
        &self.proj
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Mutable views over (embed, proj, bias), used by optimisers and tests.
    pub fn tensors_mut(&mut self) -> [&mut [f32]; 3] {
        [&mut self.embed, &mut self.proj, &mut self.bias]
    }

    fn embed_row(&self, t: TokenId) -> &[f32] {
        let t = t as usize;
        &self.embed[t * self.dim..(t + 1) * self.dim]
    }

    fn proj_row(&self, j: usize) -> &[f32] {
        &self.proj[j * self.dim..(j + 1) * self.dim]
    }

    fn pre_activation(&self, j: usize, t: TokenId) -> f64 {
        let dot: f64 = self.proj_row(j).iter().zip(self.embed_row(t)).map(|(&e, &h)| f64::from(e) * f64::from(h)).sum();
        dot + f64::from(self.bias[j])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(self.vocab as u32);
        w.u32(self.dim as u32);
        for &v in self.embed.iter().chain(&self.proj).chain(&self.bias) {
            w.f32(v);
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "header");
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic { expected: "SFNE" });
        }
        let vocab = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let floats = vocab
            .checked_mul(dim)
            .and_then(|vd| vd.checked_mul(2))
            .and_then(|n| n.checked_add(vocab))
            .ok_or_else(|| Error::Corrupt("dimension header overflows".into()))?;
        let expected = floats
            .checked_mul(4)
            .and_then(|n| n.checked_add(4))
            .ok_or_else(|| Error::Corrupt("dimension header overflows".into()))?;
        match r.remaining().cmp(&expected) {
            std::cmp::Ordering::Less => return Err(Error::Truncated("encoder parameters")),
            std::cmp::Ordering::Greater => {
                return Err(Error::Corrupt(format!("{} unexpected trailing bytes", r.remaining() - expected)))
            }
            std::cmp::Ordering::Equal => {}
        }
        verify_crc(bytes)?;
        let mut read = |n: usize| -> Result<Vec<f32>> { (0..n).map(|_| r.f32()).collect() };
        let embed = read(vocab * dim)?;
        let proj = read(vocab * dim)?;
        let bias = read(vocab)?;
        Self::new(vocab, dim, embed, proj, bias).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Forward pass of one document, kept for backpropagation.
struct DocForward {
    /// Distinct input tokens in first-occurrence order.
    tokens: Vec<TokenId>,
    /// Dense output weights, one per vocabulary entry.
    weights: Vec<f64>,
    /// For active outputs: winning input position and its pre-activation.
    winners: Vec<Option<(usize, f64)>>,
}

fn distinct_tokens(params: &EncoderParams, tokens: &[TokenId]) -> Result<Vec<TokenId>> {
    if tokens.is_empty() {
        return Err(Error::invalid("cannot encode a document with no tokens"));
    }
    let mut out: Vec<TokenId> = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t as usize >= params.vocab {
            return Err(Error::invalid(format!("token {t} outside encoder vocabulary of {}", params.vocab)));
        }
        if !out.contains(&t) {
            out.push(t);
        }
    }
    Ok(out)
}

fn forward(params: &EncoderParams, tokens: &[TokenId]) -> Result<DocForward> {
    let tokens = distinct_tokens(params, tokens)?;
    let mut weights = vec![0.0; params.vocab];
    let mut winners = vec![None; params.vocab];
    for j in 0..params.vocab {
        let mut best: Option<(usize, f64)> = None;
        for (pos, &t) in tokens.iter().enumerate() {
            let z = params.pre_activation(j, t);
            // Strict comparison: ties keep the lowest position.
            if z > 0.0 && best.is_none_or(|(_, bz)| z > bz) {
                best = Some((pos, z));
            }
        }
        if let Some((_, z)) = best {
            weights[j] = z.ln_1p();
        }
        winners[j] = best;
    }
    Ok(DocForward { tokens, weights, winners })
}

/// Expands a tokenized document into its sparse weight vector. Invariant to
/// token order and repetition.
pub fn encode_doc(params: &EncoderParams, tokens: &[TokenId]) -> Result<SparseVector> {
    let fwd = forward(params, tokens)?;
    let entries = fwd
        .weights
        .iter()
        .enumerate()
        .filter_map(|(j, &w)| {
            let w = w as f32;
            (w > 0.0).then_some((j as TokenId, w))
        })
        .collect();
    Ok(SparseVector::from_sorted_unchecked(entries))
}

/// One contrastive example. The query is already IDF-encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub query: SparseVector,
    pub positive: Vec<TokenId>,
    pub negatives: Vec<Vec<TokenId>>,
}

fn known_tokens(tokenizer: &TokenizerModel, text: &str) -> Vec<TokenId> {
    let mut ids = tokenizer.segment(&normalize(text));
    ids.retain(|&t| t != UNK_ID);
    ids
}

/// Turns mined triples into training items: queries are IDF-encoded
/// against `stats`, documents are tokenized. Triples whose query or
/// positive has no known token are dropped, as are empty negatives.
pub fn training_items(triples: &[TrainTriple], tokenizer: &TokenizerModel, stats: &VocabStats) -> Vec<TrainItem> {
    triples
        .iter()
        .filter_map(|t| {
            let query = encode_query(tokenizer, stats, &t.q);
            let positive = known_tokens(tokenizer, &t.q_pos);
            if query.is_empty() || positive.is_empty() {
                return None;
            }
            let negatives = t.negatives.iter().map(|n| known_tokens(tokenizer, n)).filter(|n| !n.is_empty()).collect();
            Some(TrainItem { query, positive, negatives })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    items: Vec<TrainItem>,
}

impl TrainBatch {
    pub fn new(items: Vec<TrainItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("a training batch needs at least one item"));
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    /// Every document entering the batch: positives first (item order), then
    /// each item's hard negatives.
    fn documents(&self) -> Vec<&[TokenId]> {
        let mut docs: Vec<&[TokenId]> = self.items.iter().map(|it| it.positive.as_slice()).collect();
        for it in &self.items {
            docs.extend(it.negatives.iter().map(Vec::as_slice));
        }
        docs
    }

    /// Candidate document indices for item `i`: its positive first, then its
    /// hard negatives, then the other items' positives.
    fn candidates(&self, i: usize) -> Vec<usize> {
        let b = self.items.len();
        let mut out = vec![i];
        let offset: usize = b + self.items[..i].iter().map(|it| it.negatives.len()).sum::<usize>();
        out.extend(offset..offset + self.items[i].negatives.len());
        out.extend((0..b).filter(|&k| k != i));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub infonce: f64,
    /// Unscaled FLOPS term; `total = infonce + lambda_reg * flops`.
    pub flops: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embed: Vec<f64>,
    pub proj: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    fn zeros(params: &EncoderParams) -> Self {
        Self {
            embed: vec![0.0; params.embed.len()],
            proj: vec![0.0; params.proj.len()],
            bias: vec![0.0; params.bias.len()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.embed.iter().chain(&self.proj).chain(&self.bias).map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn check_lambda(lambda_reg: f64) -> Result<()> {
    if lambda_reg.is_finite() && lambda_reg >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("lambda_reg must be >= 0, got {lambda_reg}")))
    }
}

fn sparse_dense_dot(q: &SparseVector, dense: &[f64]) -> f64 {
    q.iter().filter_map(|(j, w)| dense.get(j as usize).map(|d| f64::from(w) * d)).sum()
}

struct BatchForward {
    docs: Vec<DocForward>,
    /// Softmax over each item's candidates, aligned with `TrainBatch::candidates`.
    probs: Vec<Vec<f64>>,
    loss: LossBreakdown,
    mean_weights: Vec<f64>,
}

fn batch_forward(params: &EncoderParams, batch: &TrainBatch, lambda_reg: f64) -> Result<BatchForward> {
    check_lambda(lambda_reg)?;
    let docs = batch.documents().into_iter().map(|d| forward(params, d)).collect::<Result<Vec<_>>>()?;

    let mut infonce = 0.0;
    let mut probs = Vec::with_capacity(batch.items.len());
    for (i, item) in batch.items.iter().enumerate() {
        let scores: Vec<f64> =
            batch.candidates(i).into_iter().map(|c| sparse_dense_dot(&item.query, &docs[c].weights)).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        infonce += z.ln() + max - scores[0];
        probs.push(exp.into_iter().map(|e| e / z).collect());
    }
    infonce /= batch.items.len() as f64;

    let n = docs.len() as f64;
    let mut mean_weights = vec![0.0; params.vocab];
    for d in &docs {
        for (m, w) in mean_weights.iter_mut().zip(&d.weights) {
            *m += w;
        }
    }
    mean_weights.iter_mut().for_each(|m| *m /= n);
    let flops: f64 = mean_weights.iter().map(|m| m * m).sum();

    Ok(BatchForward {
        docs,
        probs,
        loss: LossBreakdown { total: infonce + lambda_reg * flops, infonce, flops },
        mean_weights,
    })
}

pub fn loss(params: &EncoderParams, batch: &TrainBatch, lambda_reg: f64) -> Result<LossBreakdown> {
    Ok(batch_forward(params, batch, lambda_reg)?.loss)
}

/// Analytic gradients of [`loss`]. At max-pooling ties the lowest input
/// position receives the gradient; the ReLU derivative at 0 is 0.
pub fn grad(params: &EncoderParams, batch: &TrainBatch, lambda_reg: f64) -> Result<Gradients> {
    Ok(loss_and_grad(params, batch, lambda_reg)?.1)
}

pub fn loss_and_grad(
    params: &EncoderParams,
    batch: &TrainBatch,
    lambda_reg: f64,
) -> Result<(LossBreakdown, Gradients)> {
    let fwd = batch_forward(params, batch, lambda_reg)?;
    let b = batch.items.len() as f64;
    let n = fwd.docs.len() as f64;

    // dL/dw_j for every document, dense.
    let flops_grad: Vec<f64> = fwd.mean_weights.iter().map(|m| lambda_reg * 2.0 * m / n).collect();
    let mut dw: Vec<Vec<f64>> = vec![flops_grad; fwd.docs.len()];
    for (i, item) in batch.items.iter().enumerate() {
        for (slot, c) in batch.candidates(i).into_iter().enumerate() {
            let target = if slot == 0 { 1.0 } else { 0.0 };
            let ds = (fwd.probs[i][slot] - target) / b;
            for (j, qw) in item.query.iter() {
                if let Some(g) = dw[c].get_mut(j as usize) {
                    *g += ds * f64::from(qw);
                }
            }
        }
    }

    let mut grads = Gradients::zeros(params);
    let dim = params.dim;
    for (doc, g_doc) in fwd.docs.iter().zip(&dw) {
        for (j, winner) in doc.winners.iter().enumerate() {
            let Some((pos, z)) = *winner else { continue };
            let dz = g_doc[j] / (1.0 + z);
            if dz == 0.0 {
                continue;
            }
            let t = doc.tokens[pos] as usize;
            let h = params.embed_row(t as TokenId);
            let e = params.proj_row(j);
            for k in 0..dim {
                grads.proj[j * dim + k] += dz * f64::from(h[k]);
                grads.embed[t * dim + k] += dz * f64::from(e[k]);
            }
            grads.bias[j] += dz;
        }
    }
    Ok((fwd.loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lambda_reg: f64,
    pub seed: u64,
    pub negatives_per_query: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, steps: 200, batch_size: 16, lambda_reg: 1e-2, seed: 0, negatives_per_query: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTelemetry {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Mean count of non-zero output weights over the batch's documents.
    pub avg_nonzero_dims: f64,
}

/// SGD with momentum over shuffled minibatches. Deterministic for a given
/// seed; `steps = 0` returns the parameters untouched.
pub fn train(
    params: &EncoderParams,
    dataset: &[TrainItem],
    cfg: &TrainConfig,
) -> Result<(EncoderParams, Vec<StepTelemetry>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    check_lambda(cfg.lambda_reg)?;
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::invalid("lr must be >= 0 and momentum in [0, 1)"));
    }

    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut velocity = Gradients::zeros(&params);
    let mut telemetry = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut items = Vec::with_capacity(cfg.batch_size);
        while items.len() < cfg.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let mut item = dataset[order[cursor]].clone();
            item.negatives.truncate(cfg.negatives_per_query);
            items.push(item);
            cursor += 1;
        }
        let batch = TrainBatch::new(items)?;
        let (loss, g) = loss_and_grad(&params, &batch, cfg.lambda_reg)?;

        let docs = batch.documents();
        let nnz: usize = docs.iter().map(|d| encode_doc(&params, d).map(|v| v.len())).sum::<Result<usize>>()?;
        telemetry.push(StepTelemetry { step, loss, avg_nonzero_dims: nnz as f64 / docs.len() as f64 });
        log::debug!("step {step}: loss {:.5} (flops {:.5})", loss.total, loss.flops);

        let [embed, proj, bias] = params.tensors_mut();
        for (p, (v, g)) in [
            (embed, (&mut velocity.embed, &g.embed)),
            (proj, (&mut velocity.proj, &g.proj)),
            (bias, (&mut velocity.bias, &g.bias)),
        ] {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = cfg.momentum * *v - cfg.lr * g;
                *p = (f64::from(*p) + *v) as f32;
            }
        }
    }
    Ok((params, telemetry))
}

/// Vectors produced by an external encoder, keyed by piece strings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalDoc {
    pub id: String,
    pub text: Option<String>,
    pub vector: SparseVector,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExternalVectors {
    pub docs: Vec<ExternalDoc>,
    /// Entries dropped because their piece is not in the tokenizer.
    pub skipped_entries: usize,
}

#[derive(Deserialize)]
struct ExternalLine {
    id: serde_json::Value,
    #[serde(default)]
    text: Option<String>,
    vec: HashMap<String, f64>,
}

/// Reads `{"id": ..., "vec": {"<piece>": weight}}` lines. Unknown pieces are
/// skipped with a warning; malformed lines abort with their line number.
pub fn read_external_vectors<R: BufRead>(reader: R, tokenizer: &TokenizerModel) -> Result<ExternalVectors> {
    let mut out = ExternalVectors::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ExternalLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let id = match parsed.id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(Error::Parse { line: lineno, msg: format!("unsupported id {other}") }),
        };
        let mut pairs = Vec::with_capacity(parsed.vec.len());
        let mut entries: Vec<(String, f64)> = parsed.vec.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for (piece, w) in entries {
            match tokenizer.token_id(&piece) {
                Some(t) => pairs.push((t, w as f32)),
                None => {
                    log::warn!("line {lineno}: unknown piece `{piece}` skipped");
                    out.skipped_entries += 1;
                }
            }
        }
        let vector = SparseVector::from_pairs(pairs).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        out.docs.push(ExternalDoc { id, text: parsed.text, vector });
    }
    Ok(out)
}

pub fn load_external_vectors(path: impl AsRef<Path>, tokenizer: &TokenizerModel) -> Result<ExternalVectors> {
    let file = std::fs::File::open(path)?;
    read_external_vectors(std::io::BufReader::new(file), tokenizer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Piece;

    /// vocab 2, dim 1: proj/bias chosen so pre-activations are easy to read.
    fn tiny(proj: [f32; 2], bias: [f32; 2], embed: [f32; 2]) -> EncoderParams {
        EncoderParams::new(2, 1, embed.to_vec(), proj.to_vec(), bias.to_vec()).unwrap()
    }

    fn sv(pairs: &[(TokenId, f32)]) -> SparseVector {
        SparseVector::from_pairs(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn encode_doc_examples() {
        let e = std::f32::consts::E;
        // Output 0 sees e - 1, output 1 is negative.
        let p = tiny([1.0, -1.0], [e - 2.0, 0.0], [1.0, 0.0]);
        let v = encode_doc(&p, &[0]).unwrap();
        assert_eq!(v.len(), 1);
        assert!((v.get(0).unwrap() - 1.0).abs() < 1e-6);

        let dead = tiny([1.0, 1.0], [-5.0, -5.0], [1.0, 1.0]);
        assert!(encode_doc(&dead, &[0, 1]).unwrap().is_empty());

        // Output 0 pre-activations 0.3 (token 0) and 0.7 (token 1).
        let p = tiny([1.0, 0.0], [0.0, -1.0], [0.3, 0.7]);
        let v = encode_doc(&p, &[0, 1]).unwrap();
        assert!((v.get(0).unwrap() - 0.7f32.ln_1p()).abs() < 1e-7);
        assert_eq!(encode_doc(&p, &[1, 0, 1]).unwrap(), v);

        assert!(encode_doc(&p, &[]).is_err());
        assert!(encode_doc(&p, &[7]).is_err());
    }

    #[test]
    fn symmetric_softmax_gives_ln2() {
        // Positive and negative encode identically.
        let p = tiny([1.0, 1.0], [0.0, 0.0], [1.0, 1.0]);
        let batch =
            TrainBatch::new(vec![TrainItem { query: sv(&[(0, 1.0)]), positive: vec![0], negatives: vec![vec![1]] }])
                .unwrap();
        let l = loss(&p, &batch, 0.0).unwrap();
        assert!((l.infonce - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.total, l.infonce);
    }

    #[test]
    fn flops_term_arithmetic() {
        // Both documents encode to {0: 1.0}.
        let e = std::f32::consts::E;
        let p = tiny([1.0, -1.0], [e - 2.0, 0.0], [1.0, 1.0]);
        let batch = TrainBatch::new(vec![
            TrainItem { query: sv(&[(0, 1.0)]), positive: vec![0], negatives: vec![] },
            TrainItem { query: sv(&[(0, 1.0)]), positive: vec![1], negatives: vec![] },
        ])
        .unwrap();
        let l = loss(&p, &batch, 0.5).unwrap();
        assert!((l.flops - 1.0).abs() < 1e-6);
        assert!((l.total - (l.infonce + 0.5 * l.flops)).abs() < 1e-12);
        assert!(loss(&p, &batch, -1.0).is_err());
    }

    #[test]
    fn loss_vanishes_as_positive_score_grows() {
        // Positive doc token 0 has pre-activation h0 on output 0; the
        // negative's is -1, so s- = 0 and s+ = ln(1 + h0).
        let loss_at = |h0: f32| {
            let p = EncoderParams::new(2, 1, vec![h0, -1.0], vec![1.0, -1.0], vec![0.0, -1.0]).unwrap();
            let batch = TrainBatch::new(vec![TrainItem {
                query: sv(&[(0, 1.0)]),
                positive: vec![0],
                negatives: vec![vec![1]],
            }])
            .unwrap();
            loss(&p, &batch, 0.0).unwrap().infonce
        };
        assert!((loss_at(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for h0 in [1.0, 10.0, 1e3, 1e6] {
            let l = loss_at(h0);
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-5);
    }

    #[test]
    fn zero_lambda_means_no_flops_gradient() {
        let p = EncoderParams::init(6, 3, 0.2, 7).unwrap();
        let batch = TrainBatch::new(vec![TrainItem {
            query: SparseVector::empty(),
            positive: vec![0, 1],
            negatives: vec![vec![2]],
        }])
        .unwrap();
        // An empty query makes every InfoNCE gradient vanish; what is left
        // is the FLOPS term alone.
        let g0 = grad(&p, &batch, 0.0).unwrap();
        assert_eq!(g0.norm(), 0.0);
        assert!(grad(&p, &batch, 0.1).unwrap().norm() > 0.0);
    }

    #[test]
    fn dead_output_gets_no_gradient() {
        let mut p = EncoderParams::init(4, 2, 0.3, 1).unwrap();
        p.bias[3] = -100.0;
        let batch = TrainBatch::new(vec![
            TrainItem { query: sv(&[(3, 2.0), (0, 1.0)]), positive: vec![0, 3], negatives: vec![vec![1]] },
            TrainItem { query: sv(&[(1, 1.0)]), positive: vec![2], negatives: vec![] },
        ])
        .unwrap();
        let g = grad(&p, &batch, 0.5).unwrap();
        assert!(g.proj[6..8].iter().all(|&v| v == 0.0));
        assert_eq!(g.bias[3], 0.0);
    }

    #[test]
    fn params_file_round_trip_and_corruption() {
        let p = EncoderParams::init(5, 3, -0.5, 3).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"SFNE");
        assert_eq!(bytes.len(), 4 + 8 + 4 * (2 * 15 + 5) + 4);
        let back = EncoderParams::from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[20] ^= 0x01;
        assert!(matches!(EncoderParams::from_bytes(&bad), Err(Error::Checksum { .. })));
        assert!(matches!(EncoderParams::from_bytes(&bytes[..30]), Err(Error::Truncated(_))));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(EncoderParams::from_bytes(&magic), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn train_with_zero_steps_is_identity() {
        let p = EncoderParams::init(4, 2, -0.5, 0).unwrap();
        let data = vec![TrainItem { query: sv(&[(0, 1.0)]), positive: vec![0], negatives: vec![] }];
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let (out, tele) = train(&p, &data, &cfg).unwrap();
        assert_eq!(out, p);
        assert!(tele.is_empty());
        assert!(train(&p, &[], &cfg).is_err());
    }

    #[test]
    fn external_vectors() {
        let tok = TokenizerModel::new(
            ["pi", "nk"].iter().map(|t| Piece { text: t.to_string(), log_prob: -1.0 }).collect(),
            3,
        )
        .unwrap();
        let input = concat!(
            "{\"id\":\"d1\",\"vec\":{\"pi\":1.5,\"nk\":0.5}}\n",
            "\n",
            "{\"id\":2,\"vec\":{\"pi\":0,\"zzzz\":3.0,\"nk\":1}}\n",
        );
        let ext = read_external_vectors(input.as_bytes(), &tok).unwrap();
        assert_eq!(ext.docs.len(), 2);
        assert_eq!(ext.docs[0].id, "d1");
        assert_eq!(ext.docs[0].vector, sv(&[(0, 1.5), (1, 0.5)]));
        assert_eq!(ext.docs[1].id, "2");
        assert_eq!(ext.docs[1].vector, sv(&[(1, 1.0)]));
        assert_eq!(ext.skipped_entries, 1);

        let err = read_external_vectors("{\"id\":\"a\",\"vec\":{}}\n{oops\n".as_bytes(), &tok).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn triples_become_items() {
        let tok = TokenizerModel::new(
            ["p", "i", "n", "k", "pi", "nk"].iter().map(|t| Piece { text: t.to_string(), log_prob: -1.0 }).collect(),
            3,
        )
        .unwrap();
        let stats = VocabStats::from_vectors([&sv(&[(4, 1.0), (5, 1.0)]), &sv(&[(4, 1.0)])]);
        let triple = |q: &str, pos: &str, negs: &[&str]| TrainTriple {
            q: q.into(),
            q_pos: pos.into(),
            negatives: negs.iter().map(|n| n.to_string()).collect(),
        };
        let items = training_items(
            &[triple("pink", "pnk", &["zz", "ink"]), triple("zzz", "pink", &[]), triple("pink", "zzz", &[])],
            &tok,
            &stats,
        );
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].positive, vec![0, 5]);
        assert_eq!(items[0].negatives, vec![vec![1, 5]]);
        assert_eq!(items[0].query.len(), 2);
    }
}

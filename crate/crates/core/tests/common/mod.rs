//! Reference implementations the library is checked against. They favour
//! obviousness over speed and share no code with the crate beyond its
//! public data types.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeMap;

use sfns_core::encoder::{EncoderParams, TrainItem};
use sfns_core::index::{DocId, InvertedIndex};
use sfns_core::sparse::{SparseVector, TokenId};

/// Decodes IEEE 754 binary16 bits by hand.
pub fn binary16_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let frac = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        0x1f if frac == 0.0 => sign * f64::INFINITY,
        0x1f => f64::NAN,
        _ => sign * (1.0 + frac / 1024.0) * 2f64.powi(exp - 15),
    }
}

/// Ranks every document by a direct dot product over the stored weights:
/// score descending, then document id ascending, positive scores only.
pub fn brute_force_ranking(index: &InvertedIndex, q: &SparseVector, k: usize) -> Vec<(DocId, f64)> {
    let mut doc_weights: Vec<BTreeMap<TokenId, f64>> = vec![BTreeMap::new(); index.len()];
    for (token, _) in q.iter() {
        for p in index.postings(token) {
            doc_weights[p.doc as usize].insert(token, binary16_to_f64(p.weight.bits()));
        }
    }
    let mut scored = Vec::new();
    for (doc, weights) in doc_weights.iter().enumerate() {
        let mut s = 0.0f64;
        for (token, qw) in q.iter() {
            if let Some(dw) = weights.get(&token) {
                s += f64::from(qw) * dw;
            }
        }
        if s > 0.0 {
            scored.push((doc as DocId, s));
        }
    }
    scored.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap() {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    scored.truncate(k);
    scored
}

/// Best segmentation by enumerating every covering of `word` with pieces
/// from `vocab`: higher total log-probability, then fewer pieces, then the
/// lexicographically smallest piece sequence. Scores are left-to-right sums;
/// sums within a relative 1e-12 of each other count as equal.
pub fn exhaustive_segmentation(
    word: &str,
    vocab: &BTreeMap<String, f64>,
    max_len: usize,
) -> Option<(f64, Vec<String>)> {
    let chars: Vec<char> = word.chars().collect();
    let mut best: Option<(f64, Vec<String>)> = None;
    let mut stack: Vec<(usize, f64, Vec<String>)> = vec![(0, 0.0, Vec::new())];
    while let Some((pos, score, pieces)) = stack.pop() {
        if pos == chars.len() {
            let better = match &best {
                None => true,
                Some((bs, bp)) => {
                    let tol = 1e-12 * score.abs().max(bs.abs()).max(1.0);
                    let tied = (score - bs).abs() <= tol;
                    (!tied && score > *bs)
                        || (tied && (pieces.len() < bp.len() || (pieces.len() == bp.len() && pieces < *bp)))
                }
            };
            if better {
                best = Some((score, pieces));
            }
            continue;
        }
        for len in 1..=max_len.min(chars.len() - pos) {
            let piece: String = chars[pos..pos + len].iter().collect();
            if let Some(lp) = vocab.get(&piece) {
                let mut next = pieces.clone();
                next.push(piece);
                stack.push((pos + len, score + lp, next));
            }
        }
    }
    best
}

/// Dense `f64` view of the encoder parameters.
#[derive(Debug, Clone)]
pub struct DenseParams {
    pub vocab: usize,
    pub dim: usize,
    pub embed: Vec<f64>,
    pub proj: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn from_params(p: &EncoderParams) -> Self {
        let widen = |xs: &[f32]| xs.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
        Self {
            vocab: p.vocab_size(),
            dim: p.dim(),
            embed: widen(p.embed()),
            proj: widen(p.proj()),
            bias: widen(p.bias()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.embed.len() + self.proj.len() + self.bias.len()
    }

    /// Parameter `i` in the order embed, proj, bias.
    pub fn slot(&mut self, i: usize) -> &mut f64 {
        let (e, p) = (self.embed.len(), self.proj.len());
        if i < e {
            &mut self.embed[i]
        } else if i < e + p {
            &mut self.proj[i - e]
        } else {
            &mut self.bias[i - e - p]
        }
    }

    pub fn pre_activation(&self, j: usize, t: usize) -> f64 {
        let mut z = 0.0;
        for k in 0..self.dim {
            z += self.proj[j * self.dim + k] * self.embed[t * self.dim + k];
        }
        z + self.bias[j]
    }

    /// Document weights `max_t ln(1 + relu(z_jt))`.
    pub fn doc_weights(&self, tokens: &[TokenId]) -> Vec<f64> {
        (0..self.vocab)
            .map(|j| tokens.iter().map(|&t| self.pre_activation(j, t as usize).max(0.0).ln_1p()).fold(0.0, f64::max))
            .collect()
    }

    /// Smallest distance of any pre-activation from the ReLU kink and of
    /// any max-pool winner from its runner-up, over the given documents.
    pub fn kink_margin(&self, docs: &[&[TokenId]]) -> f64 {
        let mut margin = f64::INFINITY;
        for tokens in docs {
            let mut distinct: Vec<TokenId> = tokens.to_vec();
            distinct.sort_unstable();
            distinct.dedup();
            for j in 0..self.vocab {
                let mut zs: Vec<f64> = distinct.iter().map(|&t| self.pre_activation(j, t as usize)).collect();
                for z in &zs {
                    margin = margin.min(z.abs());
                }
                zs.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if zs.len() >= 2 && zs[0] > 0.0 {
                    margin = margin.min(zs[0] - zs[1]);
                }
            }
        }
        margin
    }

    /// Contrastive loss with the FLOPS penalty, computed from scratch. Each
    /// item is scored against its positive, its own negatives and every
    /// other item's positive.
    pub fn loss(&self, items: &[TrainItem], lambda: f64) -> f64 {
        let positives: Vec<Vec<f64>> = items.iter().map(|it| self.doc_weights(&it.positive)).collect();
        let negatives: Vec<Vec<Vec<f64>>> =
            items.iter().map(|it| it.negatives.iter().map(|n| self.doc_weights(n)).collect()).collect();
        let score = |q: &SparseVector, d: &[f64]| q.iter().map(|(j, w)| f64::from(w) * d[j as usize]).sum::<f64>();

        let mut ce = 0.0;
        for (i, item) in items.iter().enumerate() {
            let pos = score(&item.query, &positives[i]);
            let mut all = vec![pos];
            all.extend(negatives[i].iter().map(|d| score(&item.query, d)));
            all.extend((0..items.len()).filter(|&o| o != i).map(|o| score(&item.query, &positives[o])));
            let log_z = all.iter().map(|s| s.exp()).sum::<f64>().ln();
            ce += log_z - pos;
        }
        ce /= items.len() as f64;

        let docs: Vec<&Vec<f64>> = positives.iter().chain(negatives.iter().flatten()).collect();
        let mut flops = 0.0;
        for j in 0..self.vocab {
            let mean = docs.iter().map(|d| d[j]).sum::<f64>() / docs.len() as f64;
            flops += mean * mean;
        }
        ce + lambda * flops
    }
}

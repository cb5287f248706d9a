//! Contextual encoding of an item list against a user history.
//!
//! Each slot's item embedding is refined into three `D`-wide blocks and the
//! results are concatenated to a `3D`-wide vector:
//!
//! * *self-attention* over the list itself (queries, keys, values all
//!   projected from item embeddings) plus an identity path — what else is
//!   on display. The identity path is load-bearing: at small random init,
//!   attention weights are near-uniform, so the bare attention output is
//!   almost the same mean vector for every slot; downstream cosine scores
//!   then saturate at 1, where their gradient vanishes and nothing can
//!   train. Adding the slot's own input keeps encodings item-specific.
//! * *history-attention* with the slot's item as query over the user's
//!   past items — how the item relates to this user. An empty history
//!   contributes a zero vector.
//! * a *taste interaction*: the slot's raw embedding times the mean history
//!   embedding, elementwise. Attention reads need aligned projections
//!   before they say anything user-specific, which makes them slow to
//!   bootstrap from random init; this multiplicative path gives the loss a
//!   direct route for co-adapting the embeddings of an item and of the
//!   items its fans interacted with, matrix-factorization style. Empty
//!   histories contribute a zero vector.
//!
//! No positional signal is injected here unless `with_positions` is set, so
//! the bare encoder is equivariant: permuting the list permutes the slot
//! encodings and changes nothing else. The evaluator opts into positional
//! encodings; the denoiser deliberately does not (its order sensitivity
//! comes from condition queries instead).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::tape::{NodeId, Tape};
use crate::model::{sinusoidal_encoding, Embedding, EncoderParams};
use crate::perm::ItemId;

/// Leaf bookkeeping for one forward pass: which tape nodes hold which
/// parameter tensors, so gradients can be routed back after `backward`.
#[derive(Debug)]
pub(crate) struct EncoderCtx {
    pub dim: usize,
    pub self_q: NodeId,
    pub self_k: NodeId,
    pub self_v: NodeId,
    pub hist_q: NodeId,
    pub hist_k: NodeId,
    pub hist_v: NodeId,
    /// Embedding-table row -> leaf, so a row used many times accumulates
    /// all of its gradient on a single node.
    pub emb_rows: BTreeMap<usize, NodeId>,
}

impl EncoderCtx {
    /// Loads the projection matrices onto the tape.
    pub fn new(tape: &mut Tape, enc: &EncoderParams, dim: usize) -> Self {
        EncoderCtx {
            dim,
            self_q: tape.leaf(enc.self_q.clone()),
            self_k: tape.leaf(enc.self_k.clone()),
            self_v: tape.leaf(enc.self_v.clone()),
            hist_q: tape.leaf(enc.hist_q.clone()),
            hist_k: tape.leaf(enc.hist_k.clone()),
            hist_v: tape.leaf(enc.hist_v.clone()),
            emb_rows: BTreeMap::new(),
        }
    }

    /// Leaf for an item's embedding row (cached per row).
    pub fn embed(&mut self, tape: &mut Tape, emb: &Embedding, id: ItemId) -> NodeId {
        let row = emb.row_of(id);
        *self.emb_rows.entry(row).or_insert_with(|| {
            tape.leaf(emb.table[row * self.dim..(row + 1) * self.dim].to_vec())
        })
    }

    /// Encodes `items` (optionally with sinusoidal slot codes added to the
    /// embeddings) against `history`; returns one `3D`-wide node per slot.
    pub fn encode(
        &mut self,
        tape: &mut Tape,
        emb: &Embedding,
        items: &[ItemId],
        history: &[ItemId],
        with_positions: bool,
    ) -> Result<Vec<NodeId>> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty list".into()));
        }
        let d = self.dim;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        // Slot inputs; the raw embeddings (no positional codes) also feed
        // the taste-interaction block.
        let raw: Vec<NodeId> = items.iter().map(|&id| self.embed(tape, emb, id)).collect();
        let xs: Vec<NodeId> = raw
            .iter()
            .enumerate()
            .map(|(k, &e)| {
                if with_positions {
                    tape.add_const(e, &sinusoidal_encoding(k, d))
                } else {
                    e
                }
            })
            .collect();

        // Self-attention over the list.
        let keys: Vec<NodeId> = xs.iter().map(|&x| tape.matvec(self.self_k, x, d, d)).collect();
        let vals: Vec<NodeId> = xs.iter().map(|&x| tape.matvec(self.self_v, x, d, d)).collect();
        let mut self_out = Vec::with_capacity(xs.len());
        for &x in &xs {
            let q = tape.matvec(self.self_q, x, d, d);
            let scores: Vec<NodeId> = keys.iter().map(|&k| tape.dot(q, k)).collect();
            let z = tape.gather(&scores);
            let z = tape.scale_const(z, inv_sqrt_d);
            let a = tape.softmax(z);
            let attn = tape.attend(a, &vals);
            self_out.push(tape.add(x, attn));
        }

        // History-attention (keys/values shared across slots) and the
        // multiplicative taste block against the mean history embedding.
        let (hist_out, inter_out): (Vec<NodeId>, Vec<NodeId>) = if history.is_empty() {
            let zero = tape.leaf(vec![0.0; d]);
            (vec![zero; xs.len()], vec![zero; xs.len()])
        } else {
            let hx: Vec<NodeId> = history
                .iter()
                .map(|&id| self.embed(tape, emb, id))
                .collect();
            let hkeys: Vec<NodeId> = hx.iter().map(|&h| tape.matvec(self.hist_k, h, d, d)).collect();
            let hvals: Vec<NodeId> = hx.iter().map(|&h| tape.matvec(self.hist_v, h, d, d)).collect();
            let attended = xs
                .iter()
                .map(|&x| {
                    let q = tape.matvec(self.hist_q, x, d, d);
                    let scores: Vec<NodeId> = hkeys.iter().map(|&k| tape.dot(q, k)).collect();
                    let z = tape.gather(&scores);
                    let z = tape.scale_const(z, inv_sqrt_d);
                    let a = tape.softmax(z);
                    tape.attend(a, &hvals)
                })
                .collect();
            let mut hsum = hx[0];
            for &h in &hx[1..] {
                hsum = tape.add(hsum, h);
            }
            let hmean = tape.scale_const(hsum, 1.0 / hx.len() as f64);
            let inter = raw.iter().map(|&e| tape.mul(e, hmean)).collect();
            (attended, inter)
        };

        Ok(self_out
            .into_iter()
            .zip(hist_out)
            .zip(inter_out)
            .map(|((s, h), i)| {
                let sh = tape.concat(s, h);
                tape.concat(sh, i)
            })
            .collect())
    }

    /// Adds this pass's encoder/embedding gradients into buffers laid out as
    /// `[emb.table, self_q, self_k, self_v, hist_q, hist_k, hist_v]`
    /// (the shared prefix of both models' tensor orders), scaled by `scale`.
    pub fn accumulate_grads(&self, tape: &Tape, out: &mut [Vec<f64>], scale: f64) {
        for (row, &leaf) in &self.emb_rows {
            let dst = &mut out[0][row * self.dim..(row + 1) * self.dim];
            for (d2, g) in dst.iter_mut().zip(tape.grad(leaf)) {
                *d2 += g * scale;
            }
        }
        for (i, &leaf) in [
            self.self_q, self.self_k, self.self_v, self.hist_q, self.hist_k, self.hist_v,
        ]
        .iter()
        .enumerate()
        {
            for (d2, g) in out[i + 1].iter_mut().zip(tape.grad(leaf)) {
                *d2 += g * scale;
            }
        }
    }
}

/// Contextual encoding as plain vectors: one `3D`-wide vector per slot.
///
/// Inspection/testing entry point; the training paths keep the computation
/// on a tape instead.
pub fn encode_context(
    emb: &Embedding,
    enc: &EncoderParams,
    items: &[ItemId],
    history: &[ItemId],
    with_positions: bool,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let mut ctx = EncoderCtx::new(&mut tape, enc, emb.dim());
    let nodes = ctx.encode(&mut tape, emb, items, history, with_positions)?;
    Ok(nodes.into_iter().map(|n| tape.value(n).to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelHyper;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize) -> (Embedding, EncoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vocab: Vec<ItemId> = (1..=12).map(ItemId).collect();
        let den = crate::model::DenoiserParams::init(
            &vocab,
            ModelHyper {
                dim,
                hidden: 4,
                tau: 0.1,
            },
            &mut rng,
        )
        .unwrap();
        (den.emb, den.enc)
    }

    #[test]
    fn output_shape_is_three_d_per_slot() {
        let (emb, enc) = setup(6);
        let items: Vec<ItemId> = [1, 2, 3].map(ItemId).to_vec();
        let hist: Vec<ItemId> = [4, 5].map(ItemId).to_vec();
        let out = encode_context(&emb, &enc, &items, &hist, false).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|v| v.len() == 18));
    }

    #[test]
    fn empty_history_blocks_are_zero() {
        let (emb, enc) = setup(6);
        let items: Vec<ItemId> = [1, 2, 3].map(ItemId).to_vec();
        let out = encode_context(&emb, &enc, &items, &[], false).unwrap();
        for slot in &out {
            assert!(slot[6..].iter().all(|&x| x == 0.0));
            assert!(slot[..6].iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn taste_block_is_the_embedding_times_the_history_mean() {
        let (emb, enc) = setup(4);
        let items: Vec<ItemId> = [1, 2].map(ItemId).to_vec();
        let hist: Vec<ItemId> = [3, 4, 5].map(ItemId).to_vec();
        let out = encode_context(&emb, &enc, &items, &hist, false).unwrap();
        let mean: Vec<f64> = (0..4)
            .map(|j| hist.iter().map(|&h| emb.vector(h)[j]).sum::<f64>() / 3.0)
            .collect();
        for (slot, &id) in out.iter().zip(&items) {
            for (j, &got) in slot[8..].iter().enumerate() {
                let want = emb.vector(id)[j] * mean[j];
                assert!((got - want).abs() < 1e-12, "coord {j}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn encoding_without_positions_is_equivariant() {
        let (emb, enc) = setup(8);
        let items: Vec<ItemId> = [3, 1, 7, 5].map(ItemId).to_vec();
        let hist: Vec<ItemId> = [2, 9, 4].map(ItemId).to_vec();
        let base = encode_context(&emb, &enc, &items, &hist, false).unwrap();
        // Permute the list: slot encodings follow their items.
        let perm = [2usize, 0, 3, 1];
        let permuted_items: Vec<ItemId> = perm.iter().map(|&i| items[i]).collect();
        let out = encode_context(&emb, &enc, &permuted_items, &hist, false).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            for (a, b) in out[slot].iter().zip(&base[src]) {
                assert!((a - b).abs() < 1e-12, "slot {slot}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn positional_codes_break_equivariance() {
        let (emb, enc) = setup(8);
        let items: Vec<ItemId> = [3, 1, 7, 5].map(ItemId).to_vec();
        let base = encode_context(&emb, &enc, &items, &[], true).unwrap();
        let swapped: Vec<ItemId> = [1, 3, 7, 5].map(ItemId).to_vec();
        let out = encode_context(&emb, &enc, &swapped, &[], true).unwrap();
        // Item 7 stayed in slot 2, but its encoding still shifts because the
        // attention context saw different (position-tagged) inputs.
        let diff: f64 = out[2]
            .iter()
            .zip(&base[2])
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "positional signal had no effect");
    }

    #[test]
    fn unknown_items_fall_back_to_shared_embedding() {
        let (emb, enc) = setup(6);
        let a = encode_context(&emb, &enc, &[ItemId(555)], &[], false).unwrap();
        let b = encode_context(&emb, &enc, &[ItemId(777)], &[], false).unwrap();
        assert_eq!(a, b);
    }
}

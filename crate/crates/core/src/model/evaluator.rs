//! Listwise sequence evaluator: per-slot positive-feedback probabilities
//! and a rank-discounted utility for whole arrangements.
//!
//! Each slot's contextual encoding (position-aware here, unlike the
//! denoiser's) runs through a small tanh MLP and a sigmoid, yielding the
//! probability that the slot earns positive feedback. The utility of an
//! arrangement discounts those scores by display rank:
//! `U = Σ_k s_k / log2(k + 1)` with slots counted from 1, so the top slot
//! has weight 1 and lower slots matter progressively less.

use crate::error::{Error, Result};
use crate::model::encoder::EncoderCtx;
use crate::model::tape::{NodeId, Tape};
use crate::model::{EvaluatorParams, GradSet};
use crate::perm::ItemId;

/// One labeled arrangement for evaluator training.
#[derive(Debug, Clone, Copy)]
pub struct EvalTrainExample<'a> {
    /// Items in display order.
    pub items: &'a [ItemId],
    /// Feedback per slot, each in `{0.0, 1.0}`.
    pub labels: &'a [f64],
    /// The viewing user's past items.
    pub history: &'a [ItemId],
}

/// Shared forward pass: per-slot feedback logits on a tape.
struct Pass {
    tape: Tape,
    ctx: EncoderCtx,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    logits: NodeId,
}

impl Pass {
    fn build(p: &EvaluatorParams, items: &[ItemId], history: &[ItemId]) -> Result<Self> {
        let d = p.hyper.dim;
        let hidden = p.hyper.hidden;
        let mut tape = Tape::new();
        let mut ctx = EncoderCtx::new(&mut tape, &p.enc, d);
        let encoded = ctx.encode(&mut tape, &p.emb, items, history, true)?;

        let w1 = tape.leaf(p.mlp_w1.clone());
        let b1 = tape.leaf(p.mlp_b1.clone());
        let w2 = tape.leaf(p.mlp_w2.clone());
        let b2 = tape.leaf(p.mlp_b2.clone());

        let slot_logits: Vec<NodeId> = encoded
            .into_iter()
            .map(|e| {
                let h = tape.matvec(w1, e, hidden, 3 * d);
                let h = tape.add(h, b1);
                let h = tape.tanh(h);
                let z = tape.matvec(w2, h, 1, hidden);
                tape.add(z, b2)
            })
            .collect();
        let logits = tape.gather(&slot_logits);
        Ok(Pass {
            tape,
            ctx,
            w1,
            b1,
            w2,
            b2,
            logits,
        })
    }

    /// Routes gradients into `out` (aligned with
    /// [`EvaluatorParams::named_tensors`]), scaled by `scale`.
    fn accumulate_grads(&self, out: &mut GradSet, scale: f64) {
        self.ctx
            .accumulate_grads(&self.tape, &mut out.by_tensor[..7], scale);
        for (slot, leaf) in [(7, self.w1), (8, self.b1), (9, self.w2), (10, self.b2)] {
            for (dst, g) in out.by_tensor[slot].iter_mut().zip(self.tape.grad(leaf)) {
                *dst += g * scale;
            }
        }
    }
}

/// Per-slot positive-feedback probabilities for `items` shown to a user
/// with `history`.
pub fn evaluator_scores(
    p: &EvaluatorParams,
    items: &[ItemId],
    history: &[ItemId],
) -> Result<Vec<f64>> {
    let pass = Pass::build(p, items, history)?;
    Ok(pass
        .tape
        .value(pass.logits)
        .iter()
        .map(|&z| 1.0 / (1.0 + (-z).exp()))
        .collect())
}

/// Rank-discounted utility `Σ_k s_k / log2(k + 1)`, slots counted from 1.
pub fn evaluator_utility(scores: &[f64]) -> f64 {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| s / ((i + 2) as f64).log2())
        .sum()
}

/// Mean per-slot binary cross-entropy over the batch and its parameter
/// gradients.
pub fn evaluator_grads(
    p: &EvaluatorParams,
    batch: &[EvalTrainExample],
) -> Result<(f64, GradSet)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let mut grads = GradSet::zeros_like(&p.named_tensors());
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        if ex.labels.len() != ex.items.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} slots",
                ex.labels.len(),
                ex.items.len()
            )));
        }
        if ex.labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidArgument(
                "feedback labels must be 0 or 1".into(),
            ));
        }
        let mut pass = Pass::build(p, ex.items, ex.history)?;
        let bce = pass.tape.bce_with_logits(ex.labels, pass.logits);
        let l = pass.tape.scalar(bce);
        if !l.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite evaluator loss {l} on a {}-slot example",
                ex.items.len()
            )));
        }
        loss += l * scale;
        pass.tape.backward(bce);
        pass.accumulate_grads(&mut grads, scale);
    }
    Ok((loss, grads))
}

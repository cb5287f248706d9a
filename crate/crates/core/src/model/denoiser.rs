//! Conditional reverse-process model: scores candidate refinements of a
//! noisy arrangement, steered by per-slot feedback targets.
//!
//! For each slot the model forms a *condition query* — the embedding of the
//! wanted feedback (positive or negative) plus a sinusoidal slot code — and
//! attends with it over the contextual encodings of the current arrangement.
//! The attention output is the *expected representation*: what the model
//! thinks should sit at that slot to realize the wanted feedback. A candidate
//! arrangement is then scored by how well its items match those expectations,
//! as the mean cosine similarity across slots, sharpened by a learned scale
//! and the temperature `tau` before the softmax.
//!
//! Because the encoder is equivariant and all candidates in a refinement step
//! arrange the *same* items, one encoding pass serves every candidate; only
//! the cheap cosine lookups differ. [`PermScorer`] packages that observation
//! for inference loops.
//!
//! Two candidate spaces are supported, mirroring the forward corruptions:
//! whole arrangements one swap away (`perm`), and per-slot distributions over
//! the candidate list (`token`).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::forward::Categorical;
use crate::model::encoder::EncoderCtx;
use crate::model::tape::{NodeId, Tape};
use crate::model::{DenoiserParams, GradSet};
use crate::perm::{ItemId, ItemSequence};

/// One denoising query: the arrangement to refine, the per-slot feedback the
/// refinement should realize, and the user's interaction history.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseInput<'a> {
    /// Current (noisy) arrangement.
    pub seq: &'a ItemSequence,
    /// Wanted feedback per slot, `true` = positive; same length as `seq`.
    pub condition: &'a [bool],
    /// Past items of the user the list is for (may be empty).
    pub history: &'a [ItemId],
}

/// One forward pass of the denoiser on a tape, reused for every candidate
/// set scored against the same input.
struct Pass {
    tape: Tape,
    ctx: EncoderCtx,
    cond_pos: NodeId,
    cond_neg: NodeId,
    /// Slot-code leaves actually used: `(row, leaf)`.
    pos_rows: Vec<(usize, NodeId)>,
    out_scale: NodeId,
    /// Expected representation per slot, each `3D` wide.
    expected: Vec<NodeId>,
    /// Candidate-list index -> its contextual encoding, where available.
    enc_by_cand: Vec<Option<NodeId>>,
    /// `(slot, candidate index) -> cosine node`, deduplicated across
    /// candidates that place the same item in the same slot.
    cos_cache: BTreeMap<(usize, usize), NodeId>,
    inv_tau: f64,
}

impl Pass {
    /// Encodes the input and forms the per-slot expected representations.
    ///
    /// With `encode_all_candidates`, the entire candidate list is encoded
    /// (as its own context) so any candidate index can be scored in any
    /// slot; otherwise only the items present in the arrangement can.
    fn build(p: &DenoiserParams, input: &DenoiseInput, encode_all_candidates: bool) -> Result<Self> {
        let seq = input.seq;
        if input.condition.len() != seq.len() {
            return Err(Error::InvalidArgument(format!(
                "condition has {} entries for {} slots",
                input.condition.len(),
                seq.len()
            )));
        }
        let d = p.hyper.dim;
        let enc_width = 3 * d;
        let mut tape = Tape::new();
        let mut ctx = EncoderCtx::new(&mut tape, &p.enc, d);

        let encoded = ctx.encode(&mut tape, &p.emb, &seq.items(), input.history, false)?;
        let mut enc_by_cand: Vec<Option<NodeId>> = vec![None; seq.base().len()];
        if encode_all_candidates {
            let all: Vec<ItemId> = seq.base().iter().copied().collect();
            let enc_all = ctx.encode(&mut tape, &p.emb, &all, input.history, false)?;
            for (i, n) in enc_all.into_iter().enumerate() {
                enc_by_cand[i] = Some(n);
            }
        } else {
            // Equivariance makes the arrangement's own slot encodings valid
            // representations for any candidate built from the same items.
            for (j, &b) in seq.positions().iter().enumerate() {
                enc_by_cand[b] = Some(encoded[j]);
            }
        }

        let cond_pos = tape.leaf(p.cond_pos.clone());
        let cond_neg = tape.leaf(p.cond_neg.clone());
        let out_scale = tape.leaf(p.out_scale.clone());
        let inv_sqrt = 1.0 / (enc_width as f64).sqrt();

        let mut pos_rows = Vec::with_capacity(seq.len());
        let expected = (0..seq.len())
            .map(|k| {
                let base = if input.condition[k] { cond_pos } else { cond_neg };
                let code = tape.leaf(p.pos_q[k * enc_width..(k + 1) * enc_width].to_vec());
                pos_rows.push((k, code));
                let query = tape.add(base, code);
                let scores: Vec<NodeId> =
                    encoded.iter().map(|&e| tape.dot(query, e)).collect();
                let z = tape.gather(&scores);
                let z = tape.scale_const(z, inv_sqrt);
                let a = tape.softmax(z);
                tape.attend(a, &encoded)
            })
            .collect();

        Ok(Pass {
            tape,
            ctx,
            cond_pos,
            cond_neg,
            pos_rows,
            out_scale,
            expected,
            enc_by_cand,
            cos_cache: BTreeMap::new(),
            inv_tau: 1.0 / p.hyper.tau,
        })
    }

    /// Cosine between slot `k`'s expectation and candidate `cand`'s encoding.
    fn cos(&mut self, k: usize, cand: usize) -> Result<NodeId> {
        if let Some(&n) = self.cos_cache.get(&(k, cand)) {
            return Ok(n);
        }
        let enc = self.enc_by_cand[cand].ok_or_else(|| {
            Error::SupportMismatch(format!(
                "candidate index {cand} is not part of the arrangement being refined"
            ))
        })?;
        let n = self.tape.cosine(self.expected[k], enc);
        self.cos_cache.insert((k, cand), n);
        Ok(n)
    }

    /// Logits over whole-arrangement candidates (one per row of `cands`).
    fn perm_logits(&mut self, cands: &[&[usize]]) -> Result<NodeId> {
        let l = self.expected.len();
        let mut per_cand = Vec::with_capacity(cands.len());
        for cand in cands {
            if cand.len() != l {
                return Err(Error::SupportMismatch(format!(
                    "candidate arranges {} slots, expected {l}",
                    cand.len()
                )));
            }
            let mut coses = Vec::with_capacity(l);
            for (k, &b) in cand.iter().enumerate() {
                coses.push(self.cos(k, b)?);
            }
            let g = self.tape.gather(&coses);
            per_cand.push(self.tape.mean(g));
        }
        let scores = self.tape.gather(&per_cand);
        let scaled = self.tape.scale_by_scalar(scores, self.out_scale);
        Ok(self.tape.scale_const(scaled, self.inv_tau))
    }

    /// Logits for slot `k` over the whole candidate list.
    fn token_slot_logits(&mut self, k: usize) -> Result<NodeId> {
        let n = self.enc_by_cand.len();
        let mut coses = Vec::with_capacity(n);
        for i in 0..n {
            coses.push(self.cos(k, i)?);
        }
        let g = self.tape.gather(&coses);
        let scaled = self.tape.scale_by_scalar(g, self.out_scale);
        Ok(self.tape.scale_const(scaled, self.inv_tau))
    }

    /// Routes this pass's gradients into `out` (aligned with
    /// [`DenoiserParams::named_tensors`]), scaled by `scale`.
    fn accumulate_grads(&self, out: &mut GradSet, scale: f64) {
        self.ctx
            .accumulate_grads(&self.tape, &mut out.by_tensor[..7], scale);
        for (slot, leaf) in [(7, self.cond_pos), (8, self.cond_neg), (10, self.out_scale)] {
            for (dst, g) in out.by_tensor[slot].iter_mut().zip(self.tape.grad(leaf)) {
                *dst += g * scale;
            }
        }
        let width = self.tape.grad(self.cond_pos).len();
        for &(row, leaf) in &self.pos_rows {
            let dst = &mut out.by_tensor[9][row * width..(row + 1) * width];
            for (d, g) in dst.iter_mut().zip(self.tape.grad(leaf)) {
                *d += g * scale;
            }
        }
    }
}

/// Softmax of `logits` as probabilities (max-shifted for stability).
fn probs_from_logits(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Model distribution over one-swap refinements of `input.seq`, with support
/// `[current] ++ swap neighbors` (pair order), matching the layout of the
/// exact reverse-step targets.
pub fn denoise_distribution_perm(
    p: &DenoiserParams,
    input: &DenoiseInput,
) -> Result<Categorical<ItemSequence>> {
    let mut pass = Pass::build(p, input, false)?;
    let mut support = vec![input.seq.clone()];
    support.extend(input.seq.swap_neighbors());
    let cands: Vec<&[usize]> = support.iter().map(|s| s.positions()).collect();
    let logits_node = pass.perm_logits(&cands)?;
    let probs = probs_from_logits(pass.tape.value(logits_node));
    Categorical::new(support, probs)
}

/// Per-slot model distributions over the candidate list (token view);
/// support is the candidate index range, matching the per-slot targets.
pub fn denoise_distribution_token(
    p: &DenoiserParams,
    input: &DenoiseInput,
) -> Result<Vec<Categorical<usize>>> {
    let mut pass = Pass::build(p, input, true)?;
    (0..input.seq.len())
        .map(|k| {
            let node = pass.token_slot_logits(k)?;
            let probs = probs_from_logits(pass.tape.value(node));
            Categorical::new((0..input.seq.base().len()).collect(), probs)
        })
        .collect()
}

/// Precomputed slot-by-candidate match scores for a fixed item set,
/// condition, and history.
///
/// Within one refinement run every candidate arrangement uses the same
/// items, so the expensive encoding/attention work is done once here; each
/// candidate's logit is then a mean of table lookups. Logits from this
/// table equal those of the full forward pass.
#[derive(Debug, Clone)]
pub struct PermScorer {
    /// `cos[k][b]`: match between slot `k`'s expectation and candidate `b`
    /// (`NaN` for candidates outside the arrangement's item set).
    cos: Vec<Vec<f64>>,
    scale_over_tau: f64,
    len: usize,
}

impl PermScorer {
    /// Number of arranged slots.
    pub fn len(&self) -> usize {
        self.len
    }

    /// True when there are no slots (never constructible).
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Unnormalized logit of one candidate arrangement.
    pub fn logit(&self, positions: &[usize]) -> f64 {
        assert_eq!(positions.len(), self.len, "candidate/slot count mismatch");
        let sum: f64 = positions
            .iter()
            .enumerate()
            .map(|(k, &b)| self.cos[k][b])
            .sum();
        let z = self.scale_over_tau * sum / self.len as f64;
        debug_assert!(z.is_finite(), "candidate outside the scored item set");
        z
    }

    /// Log-probabilities of `cands` under a softmax restricted to them.
    pub fn log_probs(&self, cands: &[Vec<usize>]) -> Vec<f64> {
        let logits: Vec<f64> = cands.iter().map(|c| self.logit(c)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        logits.into_iter().map(|z| z - lse).collect()
    }
}

/// Builds a [`PermScorer`] for `input`'s item set, condition, and history.
pub fn perm_scorer(p: &DenoiserParams, input: &DenoiseInput) -> Result<PermScorer> {
    let mut pass = Pass::build(p, input, false)?;
    let l = input.seq.len();
    let n = input.seq.base().len();
    let mut cos = vec![vec![f64::NAN; n]; l];
    for k in 0..l {
        for &b in input.seq.positions() {
            let node = pass.cos(k, b)?;
            cos[k][b] = pass.tape.scalar(node);
        }
    }
    Ok(PermScorer {
        cos,
        scale_over_tau: p.out_scale[0] / p.hyper.tau,
        len: l,
    })
}

/// One training example for the swap-candidate objective: the target is the
/// exact reverse-step distribution aligned with `[seq] ++ swap neighbors`.
#[derive(Debug, Clone, Copy)]
pub struct PermTrainExample<'a> {
    /// Noised arrangement, feedback condition, history.
    pub input: DenoiseInput<'a>,
    /// Target probabilities, `1 + l(l-1)/2` entries in support order.
    pub target: &'a [f64],
}

/// One training example for the per-slot objective: one target distribution
/// over the candidate list per slot.
#[derive(Debug, Clone, Copy)]
pub struct TokenTrainExample<'a> {
    /// Noised arrangement, feedback condition, history.
    pub input: DenoiseInput<'a>,
    /// Per-slot target probabilities, each over the full candidate list.
    pub targets: &'a [Vec<f64>],
}

fn check_target_probs(t: &[f64]) -> Result<()> {
    if t.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
        return Err(Error::InvalidArgument(
            "target probabilities must lie in [0, 1]".into(),
        ));
    }
    let sum: f64 = t.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "target probabilities sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Mean KL(target ‖ model) over the batch and its parameter gradients for
/// the swap-candidate objective.
pub fn denoiser_grads_perm(
    p: &DenoiserParams,
    batch: &[PermTrainExample],
) -> Result<(f64, GradSet)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let mut grads = GradSet::zeros_like(&p.named_tensors());
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        let seq = ex.input.seq;
        let mut cand_pos: Vec<Vec<usize>> = vec![seq.positions().to_vec()];
        cand_pos.extend(crate::perm::swap_neighbors(seq.positions()));
        if ex.target.len() != cand_pos.len() {
            return Err(Error::SupportMismatch(format!(
                "target has {} entries for a support of {}",
                ex.target.len(),
                cand_pos.len()
            )));
        }
        check_target_probs(ex.target)?;
        let mut pass = Pass::build(p, &ex.input, false)?;
        let cands: Vec<&[usize]> = cand_pos.iter().map(|c| c.as_slice()).collect();
        let logits = pass.perm_logits(&cands)?;
        let kl = pass.tape.kl_vs_softmax(ex.target, logits);
        loss += pass.tape.scalar(kl) * scale;
        pass.tape.backward(kl);
        pass.accumulate_grads(&mut grads, scale);
    }
    Ok((loss, grads))
}

/// Mean summed per-slot KL over the batch and its parameter gradients for
/// the per-slot objective.
pub fn denoiser_grads_token(
    p: &DenoiserParams,
    batch: &[TokenTrainExample],
) -> Result<(f64, GradSet)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let mut grads = GradSet::zeros_like(&p.named_tensors());
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        let l = ex.input.seq.len();
        let n = ex.input.seq.base().len();
        if ex.targets.len() != l {
            return Err(Error::SupportMismatch(format!(
                "{} slot targets for {} slots",
                ex.targets.len(),
                l
            )));
        }
        let mut pass = Pass::build(p, &ex.input, true)?;
        let mut slot_kls = Vec::with_capacity(l);
        for (k, target) in ex.targets.iter().enumerate() {
            if target.len() != n {
                return Err(Error::SupportMismatch(format!(
                    "slot {k} target has {} entries for {n} candidates",
                    target.len()
                )));
            }
            check_target_probs(target)?;
            let logits = pass.token_slot_logits(k)?;
            slot_kls.push(pass.tape.kl_vs_softmax(target, logits));
        }
        let gathered = pass.tape.gather(&slot_kls);
        let mean_kl = pass.tape.mean(gathered);
        let total = pass.tape.scale_const(mean_kl, l as f64);
        loss += pass.tape.scalar(total) * scale;
        pass.tape.backward(total);
        pass.accumulate_grads(&mut grads, scale);
    }
    Ok((loss, grads))
}

/// KL divergence `sum_i q_i ln(q_i / p_i)` between two distributions that
/// must share the same support in the same order.
///
/// Terms with `q_i = 0` contribute zero; a `q_i > 0` facing `p_i = 0` makes
/// the divergence infinite.
pub fn kl_loss<T: PartialEq>(q: &Categorical<T>, p: &Categorical<T>) -> Result<f64> {
    if q.support() != p.support() {
        return Err(Error::SupportMismatch(
            "KL requires identical supports in identical order".into(),
        ));
    }
    Ok(q.probs()
        .iter()
        .zip(p.probs())
        .map(|(&qi, &pi)| {
            if qi == 0.0 {
                0.0
            } else if pi == 0.0 {
                f64::INFINITY
            } else {
                qi * (qi / pi).ln()
            }
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{NoiseSchedule, PermTransitionModel};
    use crate::model::ModelHyper;
    use crate::perm::unrank;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn small_params(dim: usize, seed: u64) -> DenoiserParams {
        let vocab: Vec<ItemId> = (1..=10).map(ItemId).collect();
        DenoiserParams::init(
            &vocab,
            ModelHyper {
                dim,
                hidden: 4,
                tau: 0.1,
            },
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn seq(items: &[u64], positions: &[usize]) -> ItemSequence {
        let base: Arc<[ItemId]> = items.iter().map(|&i| ItemId(i)).collect();
        ItemSequence::new(base, positions.to_vec()).unwrap()
    }

    #[test]
    fn kl_of_point_mass_against_uniform_is_ln_two() {
        let q = Categorical::new(vec!["a", "b"], vec![1.0, 0.0]).unwrap();
        let p = Categorical::new(vec!["a", "b"], vec![0.5, 0.5]).unwrap();
        let kl = kl_loss(&q, &p).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let q = Categorical::new(vec![1, 2, 3], vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(kl_loss(&q, &q.clone()).unwrap(), 0.0);
    }

    #[test]
    fn kl_rejects_support_mismatch() {
        let q = Categorical::new(vec!["a", "b"], vec![0.5, 0.5]).unwrap();
        let p = Categorical::new(vec!["b", "a"], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            kl_loss(&q, &p),
            Err(Error::SupportMismatch(_))
        ));
    }

    #[test]
    fn kl_is_infinite_when_model_misses_target_mass() {
        let q = Categorical::new(vec!["a", "b"], vec![0.5, 0.5]).unwrap();
        let p = Categorical::new(vec!["a", "b"], vec![1.0, 0.0]).unwrap();
        assert!(kl_loss(&q, &p).unwrap().is_infinite());
    }

    #[test]
    fn perm_distribution_covers_current_and_neighbors() {
        let p = small_params(6, 3);
        let s = seq(&[4, 7, 2], &[0, 1, 2]);
        let cond = [true, true, false];
        let hist = [ItemId(9)];
        let dist = denoise_distribution_perm(
            &p,
            &DenoiseInput {
                seq: &s,
                condition: &cond,
                history: &hist,
            },
        )
        .unwrap();
        assert_eq!(dist.support().len(), 4); // self + 3 swap neighbors
        assert_eq!(dist.support()[0], s);
        let sum: f64 = dist.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(dist.probs().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn identical_embeddings_give_uniform_scores() {
        // When every item looks the same, no candidate can be preferred.
        let mut p = small_params(4, 5);
        let row: Vec<f64> = p.emb.table[0..4].to_vec();
        for r in 1..(p.emb.table.len() / 4) {
            p.emb.table[r * 4..(r + 1) * 4].copy_from_slice(&row);
        }
        let s = seq(&[1, 2, 3], &[2, 0, 1]);
        let cond = [true, false, true];
        let dist = denoise_distribution_perm(
            &p,
            &DenoiseInput {
                seq: &s,
                condition: &cond,
                history: &[],
            },
        )
        .unwrap();
        for &pr in dist.probs() {
            assert!((pr - 0.25).abs() < 1e-9, "expected uniform, got {pr}");
        }
    }

    #[test]
    fn scorer_logits_match_full_pass() {
        let p = small_params(6, 11);
        let s = seq(&[4, 7, 2, 9], &[1, 3, 0, 2]);
        let cond = [true, false, false, true];
        let hist = [ItemId(5), ItemId(6)];
        let input = DenoiseInput {
            seq: &s,
            condition: &cond,
            history: &hist,
        };
        let dist = denoise_distribution_perm(&p, &input).unwrap();
        let scorer = perm_scorer(&p, &input).unwrap();
        let cands: Vec<Vec<usize>> = dist
            .support()
            .iter()
            .map(|c| c.positions().to_vec())
            .collect();
        let lp = scorer.log_probs(&cands);
        for (model_p, &log_p) in dist.probs().iter().zip(&lp) {
            assert!((model_p - log_p.exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn scorer_is_invariant_to_which_arrangement_seeds_it() {
        // Any arrangement of the same items yields the same scorer, so one
        // pass can serve a whole refinement run.
        let p = small_params(6, 13);
        let cond = [true, true, false];
        let hist = [ItemId(8)];
        let a = seq(&[4, 7, 2], &[0, 1, 2]);
        let b = seq(&[4, 7, 2], &[2, 0, 1]);
        let sa = perm_scorer(
            &p,
            &DenoiseInput {
                seq: &a,
                condition: &cond,
                history: &hist,
            },
        )
        .unwrap();
        let sb = perm_scorer(
            &p,
            &DenoiseInput {
                seq: &b,
                condition: &cond,
                history: &hist,
            },
        )
        .unwrap();
        for cand in [&[0usize, 1, 2][..], &[1, 0, 2], &[2, 1, 0]] {
            assert!((sa.logit(cand) - sb.logit(cand)).abs() < 1e-9);
        }
    }

    #[test]
    fn token_distributions_cover_whole_candidate_list() {
        let p = small_params(4, 17);
        // Arrangement uses 3 of 5 candidates; slots may move to any of 5.
        let base: Arc<[ItemId]> = (1..=5).map(ItemId).collect();
        let s = ItemSequence::new(base, vec![4, 0, 2]).unwrap();
        let cond = [false, true, true];
        let dists = denoise_distribution_token(
            &p,
            &DenoiseInput {
                seq: &s,
                condition: &cond,
                history: &[ItemId(3)],
            },
        )
        .unwrap();
        assert_eq!(dists.len(), 3);
        for d in &dists {
            assert_eq!(d.support().len(), 5);
            assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn training_target_against_exact_reverse_step_aligns_support() {
        // The transition model's posterior support ordering must match the
        // scorer's candidate ordering, slot for slot.
        let schedule = NoiseSchedule::new(0.3, 6).unwrap();
        let tm = PermTransitionModel::build(3, schedule).unwrap();
        let s = seq(&[4, 7, 2], &[1, 0, 2]);
        let now = s.rank_index().unwrap();
        let start = 0u64; // identity arrangement
        let post = tm.posterior(now, start, 3).unwrap();
        // Posterior support: [now] ++ neighbor ranks of now, in pair order.
        assert_eq!(post.support()[0], now);
        let nbrs = s.swap_neighbors();
        for (i, nb) in nbrs.iter().enumerate() {
            assert_eq!(post.support()[i + 1], nb.rank_index().unwrap());
        }
        // And those targets feed straight into the trainer.
        let p = small_params(4, 19);
        let cond = [true, true, true];
        let ex = PermTrainExample {
            input: DenoiseInput {
                seq: &s,
                condition: &cond,
                history: &[],
            },
            target: post.probs(),
        };
        let (loss, grads) = denoiser_grads_perm(&p, &[ex]).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(grads.by_tensor.len(), 11);
        assert!(grads
            .by_tensor
            .iter()
            .any(|t| t.iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn repeating_an_example_leaves_mean_gradient_unchanged() {
        let p = small_params(4, 23);
        let s = seq(&[4, 7, 2], &[0, 2, 1]);
        let cond = [true, false, true];
        let target = [0.7, 0.1, 0.1, 0.1];
        let ex = PermTrainExample {
            input: DenoiseInput {
                seq: &s,
                condition: &cond,
                history: &[ItemId(1)],
            },
            target: &target,
        };
        let (l1, g1) = denoiser_grads_perm(&p, &[ex]).unwrap();
        let (l2, g2) = denoiser_grads_perm(&p, &[ex, ex, ex]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.by_tensor.iter().zip(&g2.by_tensor) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trainer_rejects_misaligned_targets() {
        let p = small_params(4, 29);
        let s = seq(&[4, 7, 2], &[0, 1, 2]);
        let cond = [true, true, true];
        let bad = [0.5, 0.5]; // support needs 4 entries
        let err = denoiser_grads_perm(
            &p,
            &[PermTrainExample {
                input: DenoiseInput {
                    seq: &s,
                    condition: &cond,
                    history: &[],
                },
                target: &bad,
            }],
        )
        .unwrap_err();
        assert!(matches!(err, Error::SupportMismatch(_)));
    }

    #[test]
    fn condition_flip_changes_the_distribution() {
        let p = small_params(6, 31);
        let s = seq(&[4, 7, 2], &[0, 1, 2]);
        let hist = [ItemId(9), ItemId(5)];
        let all_pos = [true, true, true];
        let mixed = [true, false, true];
        let d1 = denoise_distribution_perm(
            &p,
            &DenoiseInput {
                seq: &s,
                condition: &all_pos,
                history: &hist,
            },
        )
        .unwrap();
        let d2 = denoise_distribution_perm(
            &p,
            &DenoiseInput {
                seq: &s,
                condition: &mixed,
                history: &hist,
            },
        )
        .unwrap();
        let diff: f64 = d1
            .probs()
            .iter()
            .zip(d2.probs())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-12, "conditioning had no effect");
    }

    #[test]
    fn token_training_runs_and_batches_average() {
        let p = small_params(4, 37);
        let base: Arc<[ItemId]> = (1..=4).map(ItemId).collect();
        let s = ItemSequence::new(base, vec![1, 3]).unwrap();
        let cond = [true, false];
        let targets = vec![
            vec![0.1, 0.6, 0.2, 0.1],
            vec![0.25, 0.25, 0.25, 0.25],
        ];
        let ex = TokenTrainExample {
            input: DenoiseInput {
                seq: &s,
                condition: &cond,
                history: &[ItemId(2)],
            },
            targets: &targets,
        };
        let (l1, g1) = denoiser_grads_token(&p, &[ex]).unwrap();
        let (l2, g2) = denoiser_grads_token(&p, &[ex, ex]).unwrap();
        assert!(l1.is_finite() && l1 > 0.0);
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.by_tensor.iter().zip(&g2.by_tensor) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perm_gradients_match_finite_differences() {
        let p = small_params(3, 43);
        let s = seq(&[4, 7, 2], &[1, 0, 2]);
        let cond = [true, false, true];
        let hist = [ItemId(5)];
        let target = [0.55, 0.15, 0.2, 0.1];
        let batch = [PermTrainExample {
            input: DenoiseInput {
                seq: &s,
                condition: &cond,
                history: &hist,
            },
            target: &target,
        }];
        let (_, grads) = denoiser_grads_perm(&p, &batch).unwrap();
        crate::model::testgrad::fd_check(
            &grads,
            |tensor, coord, delta| {
                let mut q = p.clone();
                q.named_tensors_mut()[tensor].1[coord] += delta;
                denoiser_grads_perm(&q, &batch).unwrap().0
            },
            8,
            7,
        );
    }

    #[test]
    fn token_gradients_match_finite_differences() {
        let p = small_params(3, 47);
        let base: Arc<[ItemId]> = (1..=4).map(ItemId).collect();
        let s = ItemSequence::new(base, vec![2, 0]).unwrap();
        let cond = [false, true];
        let targets = vec![vec![0.4, 0.2, 0.3, 0.1], vec![0.1, 0.1, 0.1, 0.7]];
        let batch = [TokenTrainExample {
            input: DenoiseInput {
                seq: &s,
                condition: &cond,
                history: &[ItemId(3)],
            },
            targets: &targets,
        }];
        let (_, grads) = denoiser_grads_token(&p, &batch).unwrap();
        crate::model::testgrad::fd_check(
            &grads,
            |tensor, coord, delta| {
                let mut q = p.clone();
                q.named_tensors_mut()[tensor].1[coord] += delta;
                denoiser_grads_token(&q, &batch).unwrap().0
            },
            8,
            11,
        );
    }

    #[test]
    fn scorer_enumerates_all_arrangements_consistently() {
        // Normalizing scorer logits over all 3! arrangements gives a proper
        // distribution identical to the full pass restricted to that set.
        let p = small_params(4, 41);
        let s = seq(&[4, 7, 2], &[0, 1, 2]);
        let cond = [true, true, false];
        let input = DenoiseInput {
            seq: &s,
            condition: &cond,
            history: &[],
        };
        let scorer = perm_scorer(&p, &input).unwrap();
        let all: Vec<Vec<usize>> = (0..6).map(|r| unrank(r, 3).unwrap()).collect();
        let lp = scorer.log_probs(&all);
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

//! Orchestration: training (corrupt, compute the exact reversal target,
//! regress the model onto it) and inference (beam search over reverse steps
//! with a feedback-likelihood stopping rule and utility-based selection).
//!
//! Training draws a noise level per session, pushes the logged arrangement
//! through the forward chain, and fits the denoiser to the exact posterior
//! of the reverse step while the evaluator fits the logged feedback.
//! Inference starts from the arrangement to fix, repeatedly expands each
//! beam candidate through the denoiser's reverse distribution, keeps the
//! `K` best accumulated paths (merging duplicates by their best path, so a
//! wide enough beam degenerates to exact max-product search), and halts
//! once the best candidate's condition likelihood stops improving. The
//! final answer is the beam candidate the evaluator scores highest.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Session;
use crate::error::{Error, ErrorKind, Result};
use crate::forward::{NoiseSchedule, OpKind, PermTransitionModel, TokenTransitionModel};
use crate::metrics::{auc, ndcg_at_k};
use crate::model::denoiser::{
    denoise_distribution_token, denoiser_grads_perm, denoiser_grads_token, perm_scorer,
    DenoiseInput, PermScorer, PermTrainExample, TokenTrainExample,
};
use crate::model::evaluator::{
    evaluator_grads, evaluator_scores, evaluator_utility, EvalTrainExample,
};
use crate::model::optim::{OptimConfig, Optimizer};
use crate::model::{Checkpoint, CheckpointHyper, DenoiserParams, EvaluatorParams, ModelHyper};
use crate::perm::{swap_neighbors, unrank, ItemId, ItemSequence, SequenceSpec};

/// Settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Passes over the training sessions.
    pub epochs: usize,
    /// Sessions per optimizer update.
    pub batch_size: usize,
    /// Which corruption process to train against.
    pub op: OpKind,
    /// Corruption strength and horizon.
    pub schedule: NoiseSchedule,
    /// Update rule shared by both models.
    pub optim: OptimConfig,
    /// Learning rate for the proposal model when it should differ from the
    /// shared one. The reverse-step objective is noisier than the feedback
    /// objective (a fresh corruption draw per example), so the proposal model
    /// usually wants a larger step to make comparable progress per epoch.
    pub denoiser_lr: Option<f64>,
    /// Seed for parameter init, noise-level draws, corruption, shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            op: OpKind::Perm,
            schedule: NoiseSchedule { beta: 0.2, t_max: 5 },
            optim: OptimConfig::default(),
            denoiser_lr: None,
            seed: 17,
        }
    }
}

impl TrainConfig {
    /// Checks every field, including the nested schedule and optimizer.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch_size must be at least 1".into(),
            ));
        }
        NoiseSchedule::new(self.schedule.beta, self.schedule.t_max)?;
        self.optim.validate()?;
        if let Some(lr) = self.denoiser_lr {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "denoiser_lr must be finite and nonnegative, got {lr}"
                )));
            }
        }
        Ok(())
    }
}

/// Losses of one optimizer update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    /// Mean reverse-step divergence over the batch.
    pub denoiser_loss: f64,
    /// Mean per-slot feedback cross-entropy over the batch.
    pub evaluator_loss: f64,
    /// Sessions that contributed (the rest were skipped as inconsistent).
    pub sessions: usize,
}

/// Aggregated losses of one pass over the training sessions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Session-weighted mean denoiser loss.
    pub mean_denoiser_loss: f64,
    /// Session-weighted mean evaluator loss.
    pub mean_evaluator_loss: f64,
    /// Sessions that contributed an update.
    pub sessions_used: usize,
    /// Sessions dropped this epoch because their corruption draw had no
    /// consistent reversal.
    pub sessions_skipped: u64,
    /// Optimizer updates applied.
    pub batches: usize,
}

enum Draw {
    Perm {
        noised: ItemSequence,
        target: Vec<f64>,
    },
    Token {
        noised: ItemSequence,
        targets: Vec<Vec<f64>>,
    },
}

/// Owns both models, their optimizers, and the forward chain; performs
/// corruption draws and gradient updates.
pub struct Trainer {
    spec: SequenceSpec,
    cfg: TrainConfig,
    denoiser: DenoiserParams,
    evaluator: EvaluatorParams,
    perm_chain: Option<PermTransitionModel>,
    token_chain: Option<TokenTransitionModel>,
    den_opt: Optimizer,
    eva_opt: Optimizer,
    rng: ChaCha8Rng,
    skipped: u64,
}

impl Trainer {
    /// Fresh models and chain for the given shape and vocabulary.
    pub fn new(
        vocab: &[ItemId],
        hyper: ModelHyper,
        spec: SequenceSpec,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let spec = SequenceSpec::new(spec.n_candidates, spec.n_arranged)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let denoiser = DenoiserParams::init(vocab, hyper, &mut rng)?;
        let evaluator = EvaluatorParams::init(vocab, hyper, &mut rng)?;
        let (perm_chain, token_chain) = match cfg.op {
            OpKind::Perm => (
                Some(PermTransitionModel::build(spec.n_arranged, cfg.schedule)?),
                None,
            ),
            OpKind::Token => (
                None,
                Some(TokenTransitionModel::build(spec.n_candidates, cfg.schedule)?),
            ),
        };
        let den_optim = OptimConfig {
            lr: cfg.denoiser_lr.unwrap_or(cfg.optim.lr),
            ..cfg.optim
        };
        let den_opt = Optimizer::new(den_optim, &denoiser.named_tensors())?;
        let eva_opt = Optimizer::new(cfg.optim, &evaluator.named_tensors())?;
        Ok(Trainer {
            spec,
            cfg,
            denoiser,
            evaluator,
            perm_chain,
            token_chain,
            den_opt,
            eva_opt,
            rng,
            skipped: 0,
        })
    }

    /// The proposal model in its current state.
    pub fn denoiser(&self) -> &DenoiserParams {
        &self.denoiser
    }

    /// The feedback model in its current state.
    pub fn evaluator(&self) -> &EvaluatorParams {
        &self.evaluator
    }

    /// Problem shape this trainer was built for.
    pub fn spec(&self) -> SequenceSpec {
        self.spec
    }

    /// The run settings.
    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Total sessions dropped so far because a corruption draw admitted no
    /// consistent reversal.
    pub fn skipped_sessions(&self) -> u64 {
        self.skipped
    }

    fn check_session(&self, s: &Session) -> Result<()> {
        if s.displayed.len() != self.spec.n_arranged
            || s.displayed.base().len() != self.spec.n_candidates
        {
            return Err(Error::InvalidArgument(format!(
                "session {}: shape {} arranged of {} candidates does not match \
                 the run's {} of {}",
                s.session_id,
                s.displayed.len(),
                s.displayed.base().len(),
                self.spec.n_arranged,
                self.spec.n_candidates
            )));
        }
        if s.feedback.len() != s.displayed.len() {
            return Err(Error::Integrity(format!(
                "session {}: {} feedback entries for {} slots",
                s.session_id,
                s.feedback.len(),
                s.displayed.len()
            )));
        }
        Ok(())
    }

    fn draw(&mut self, s: &Session, t: usize) -> Result<Draw> {
        match self.cfg.op {
            OpKind::Perm => {
                let chain = self.perm_chain.as_ref().expect("perm run builds its chain");
                let r0 = s.displayed.rank_index().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "session {}: whole-arrangement training needs the displayed \
                         slots to arrange the first {} candidates",
                        s.session_id,
                        s.displayed.len()
                    ))
                })?;
                let rt = chain.sample_forward(r0, t, &mut self.rng)?;
                let post = chain.posterior(rt, r0, t)?;
                let noised = s.displayed.with_positions(unrank(rt, s.displayed.len())?)?;
                Ok(Draw::Perm {
                    noised,
                    target: post.probs().to_vec(),
                })
            }
            OpKind::Token => {
                let chain = self
                    .token_chain
                    .as_ref()
                    .expect("token run builds its chain");
                let start = s.displayed.positions();
                let now = chain.sample_forward(start, t, &mut self.rng)?;
                let posts = chain.posterior_seq(&now, start, t)?;
                let noised = s.displayed.with_positions(now)?;
                Ok(Draw::Token {
                    noised,
                    targets: posts.iter().map(|c| c.probs().to_vec()).collect(),
                })
            }
        }
    }

    /// One corruption draw and update per session, each at its explicit
    /// noise level `ts[i] in 1..=t_max`. Sessions whose draw admits no
    /// consistent reversal are dropped (counted, with `None` returned when
    /// nothing is left).
    pub fn train_batch(&mut self, sessions: &[&Session], ts: &[usize]) -> Result<Option<BatchStats>> {
        if sessions.is_empty() || sessions.len() != ts.len() {
            return Err(Error::InvalidArgument(format!(
                "need one noise level per session, got {} sessions / {} levels",
                sessions.len(),
                ts.len()
            )));
        }
        for s in sessions {
            self.check_session(s)?;
        }
        let mut used: Vec<usize> = Vec::with_capacity(sessions.len());
        let mut draws: Vec<Draw> = Vec::with_capacity(sessions.len());
        for (i, s) in sessions.iter().enumerate() {
            match self.draw(s, ts[i]) {
                Ok(d) => {
                    used.push(i);
                    draws.push(d);
                }
                Err(e) if e.kind() == ErrorKind::InconsistentEvidence => self.skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if used.is_empty() {
            return Ok(None);
        }

        let (denoiser_loss, den_grads) = match self.cfg.op {
            OpKind::Perm => {
                let batch: Vec<PermTrainExample> = used
                    .iter()
                    .zip(&draws)
                    .map(|(&i, d)| {
                        let Draw::Perm { noised, target } = d else {
                            unreachable!("perm run draws perm corruption")
                        };
                        PermTrainExample {
                            input: DenoiseInput {
                                seq: noised,
                                condition: &sessions[i].feedback,
                                history: &sessions[i].history,
                            },
                            target,
                        }
                    })
                    .collect();
                denoiser_grads_perm(&self.denoiser, &batch)?
            }
            OpKind::Token => {
                let batch: Vec<TokenTrainExample> = used
                    .iter()
                    .zip(&draws)
                    .map(|(&i, d)| {
                        let Draw::Token { noised, targets } = d else {
                            unreachable!("token run draws token corruption")
                        };
                        TokenTrainExample {
                            input: DenoiseInput {
                                seq: noised,
                                condition: &sessions[i].feedback,
                                history: &sessions[i].history,
                            },
                            targets,
                        }
                    })
                    .collect();
                denoiser_grads_token(&self.denoiser, &batch)?
            }
        };

        let items: Vec<Vec<ItemId>> = used.iter().map(|&i| sessions[i].displayed.items()).collect();
        let labels: Vec<Vec<f64>> = used
            .iter()
            .map(|&i| {
                sessions[i]
                    .feedback
                    .iter()
                    .map(|&b| if b { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let eval_batch: Vec<EvalTrainExample> = used
            .iter()
            .enumerate()
            .map(|(j, &i)| EvalTrainExample {
                items: &items[j],
                labels: &labels[j],
                history: &sessions[i].history,
            })
            .collect();
        let (evaluator_loss, eva_grads) = evaluator_grads(&self.evaluator, &eval_batch)?;

        self.den_opt
            .apply(&mut self.denoiser.named_tensors_mut(), &den_grads)?;
        self.eva_opt
            .apply(&mut self.evaluator.named_tensors_mut(), &eva_grads)?;
        Ok(Some(BatchStats {
            denoiser_loss,
            evaluator_loss,
            sessions: used.len(),
        }))
    }

    /// One corruption draw and update from a single session at an explicit
    /// noise level.
    pub fn train_step(&mut self, session: &Session, t: usize) -> Result<Option<BatchStats>> {
        self.train_batch(&[session], &[t])
    }

    /// One shuffled pass over `sessions`, noise levels drawn uniformly from
    /// `1..=t_max` per session.
    pub fn train_epoch(&mut self, sessions: &[Session]) -> Result<EpochStats> {
        if sessions.is_empty() {
            return Err(Error::InvalidArgument("no training sessions".into()));
        }
        let mut order: Vec<usize> = (0..sessions.len()).collect();
        order.shuffle(&mut self.rng);
        let t_max = self.cfg.schedule.t_max;
        let ts: Vec<usize> = (0..sessions.len())
            .map(|_| self.rng.random_range(1..=t_max))
            .collect();
        let skipped_before = self.skipped;
        let mut den_sum = 0.0;
        let mut eva_sum = 0.0;
        let mut sessions_used = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let refs: Vec<&Session> = chunk.iter().map(|&i| &sessions[i]).collect();
            let chunk_ts: Vec<usize> = chunk.iter().map(|&i| ts[i]).collect();
            if let Some(stats) = self.train_batch(&refs, &chunk_ts)? {
                den_sum += stats.denoiser_loss * stats.sessions as f64;
                eva_sum += stats.evaluator_loss * stats.sessions as f64;
                sessions_used += stats.sessions;
                batches += 1;
            }
        }
        if sessions_used == 0 {
            return Err(Error::InconsistentEvidence(
                "every session in the epoch was dropped".into(),
            ));
        }
        Ok(EpochStats {
            mean_denoiser_loss: den_sum / sessions_used as f64,
            mean_evaluator_loss: eva_sum / sessions_used as f64,
            sessions_used,
            sessions_skipped: self.skipped - skipped_before,
            batches,
        })
    }

    /// Runs `epochs` passes and returns their statistics.
    pub fn fit(&mut self, sessions: &[Session]) -> Result<Vec<EpochStats>> {
        (0..self.cfg.epochs)
            .map(|_| self.train_epoch(sessions))
            .collect()
    }

    /// Snapshot of both models plus run metadata.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let h = CheckpointHyper {
            dim: self.denoiser.hyper.dim,
            hidden: self.evaluator.hyper.hidden,
            tau: self.denoiser.hyper.tau,
            op: self.cfg.op,
            beta: self.cfg.schedule.beta,
            t_max: self.cfg.schedule.t_max,
        };
        Checkpoint::from_models(
            self.spec,
            h,
            &self.denoiser,
            &self.evaluator,
            self.cfg.seed,
            self.den_opt.step_count(),
        )
    }
}

/// How the wanted-feedback condition is chosen at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionPolicy {
    /// Ask for positive feedback in every slot (the production default).
    AllPositive,
    /// Explicit per-slot mask, `true` = positive.
    Mask(Vec<bool>),
}

impl ConditionPolicy {
    /// Materializes the per-slot mask for a list of `len` slots.
    pub fn expand(&self, len: usize) -> Result<Vec<bool>> {
        match self {
            ConditionPolicy::AllPositive => Ok(vec![true; len]),
            ConditionPolicy::Mask(m) if m.len() == len => Ok(m.clone()),
            ConditionPolicy::Mask(m) => Err(Error::InvalidArgument(format!(
                "condition mask has {} entries for {len} slots",
                m.len()
            ))),
        }
    }
}

/// Settings for one rerank call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Beam width `K`.
    pub beam: usize,
    /// Maximum reverse steps.
    pub max_steps: usize,
    /// Halt once the best candidate's condition likelihood improves by less
    /// than this between steps.
    pub early_stop: f64,
    /// Wanted feedback per slot.
    pub condition: ConditionPolicy,
    /// Per-slot shortlist width when expanding under the token-level chain.
    pub top_m: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            beam: 4,
            max_steps: 3,
            early_stop: 1e-3,
            condition: ConditionPolicy::AllPositive,
            top_m: 4,
        }
    }
}

impl InferenceConfig {
    /// Checks every field.
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::InvalidArgument("beam must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument(
                "max_steps must be at least 1".into(),
            ));
        }
        if !self.early_stop.is_finite() || self.early_stop < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "early_stop must be finite and non-negative, got {}",
                self.early_stop
            )));
        }
        if self.top_m == 0 {
            return Err(Error::InvalidArgument("top_m must be at least 1".into()));
        }
        Ok(())
    }
}

/// One scored arrangement inside a beam snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamEntry {
    /// Lexicographic arrangement rank, when the candidate is a permutation
    /// of the arranged slots.
    pub rank_index: Option<u64>,
    /// Accumulated reverse-step log-probability of the best path here.
    pub log_prob: f64,
    /// Items in display order.
    pub items: Vec<u64>,
}

/// Step-by-step record of one rerank call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankDiagnostics {
    /// Reverse steps actually executed.
    pub steps_executed: usize,
    /// True when the likelihood improvement fell under the threshold before
    /// `max_steps` was reached.
    pub early_stopped: bool,
    /// Best position-discounted condition likelihood before any step, then
    /// after each step.
    pub step_likelihoods: Vec<f64>,
    /// Beam after each executed step, best accumulated path first.
    pub beams: Vec<Vec<BeamEntry>>,
    /// Step whose beam the output was selected from: the step with the best
    /// likelihood so far, 0 meaning the input arrangement itself.
    pub chosen_step: usize,
    /// Evaluator utility of each candidate in the selected beam, beam order.
    pub candidate_utilities: Vec<f64>,
    /// Utility of the returned arrangement.
    pub chosen_utility: f64,
}

/// What a rerank call returns: the arrangement and why it was chosen.
#[derive(Debug, Clone)]
pub struct RerankOutcome {
    /// The arrangement to show.
    pub output: ItemSequence,
    /// Step-by-step record.
    pub diagnostics: RerankDiagnostics,
}

/// Geometric mean of probabilities (each in `[0, 1]`).
pub fn geometric_mean(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument(
            "geometric mean of nothing is undefined".into(),
        ));
    }
    if let Some(&p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    let mean_ln = probs.iter().map(|&p| p.ln()).sum::<f64>() / probs.len() as f64;
    Ok(mean_ln.exp())
}

fn masked_probs(scores: &[f64], condition: &[bool]) -> Vec<f64> {
    scores
        .iter()
        .zip(condition)
        .map(|(&s, &want)| if want { s } else { 1.0 - s })
        .collect()
}

/// Length-normalized probability that the arrangement earns the wanted
/// feedback pattern: the geometric mean of per-slot probabilities under the
/// evaluator.
pub fn condition_likelihood(
    evaluator: &EvaluatorParams,
    items: &[ItemId],
    condition: &[bool],
    history: &[ItemId],
) -> Result<f64> {
    if items.len() != condition.len() {
        return Err(Error::InvalidArgument(format!(
            "{} condition entries for {} items",
            condition.len(),
            items.len()
        )));
    }
    let scores = evaluator_scores(evaluator, items, history)?;
    geometric_mean(&masked_probs(&scores, condition))
}

/// Geometric mean with the same position discounts as the utility: slot `i`
/// carries weight `1 / log2(i + 2)`. The reranker monitors this instead of
/// the unweighted mean so that stepping, halting, and the final utility
/// selection all chase the same top-heavy objective; improvements confined
/// to the bottom slots no longer keep the chain walking.
fn discounted_geometric_mean(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot average an empty probability list".into(),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "probability out of range: {p}"
            )));
        }
        let w = 1.0 / ((i + 2) as f64).log2();
        num += w * p.ln();
        den += w;
    }
    Ok((num / den).exp())
}

fn by_score_then_lex(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

fn rank_of(positions: &[usize]) -> Option<u64> {
    if positions.iter().any(|&p| p >= positions.len()) {
        return None;
    }
    crate::perm::rank(positions).ok()
}

fn perm_children(
    scorer: &PermScorer,
    parent: &[usize],
    width: usize,
) -> Vec<(Vec<usize>, f64)> {
    let mut support = vec![parent.to_vec()];
    support.extend(swap_neighbors(parent));
    let lps = scorer.log_probs(&support);
    let mut out: Vec<(Vec<usize>, f64)> = support.into_iter().zip(lps).collect();
    out.sort_by(by_score_then_lex);
    out.truncate(width);
    out
}

/// Trained models plus the candidate space their reverse steps move in.
pub struct Reranker {
    /// Proposal model.
    pub denoiser: DenoiserParams,
    /// Feedback model, used for the stopping rule and final selection.
    pub evaluator: EvaluatorParams,
    /// Candidate space of one reverse step.
    pub op: OpKind,
}

impl Reranker {
    /// Wraps already-trained models.
    pub fn new(denoiser: DenoiserParams, evaluator: EvaluatorParams, op: OpKind) -> Self {
        Reranker {
            denoiser,
            evaluator,
            op,
        }
    }

    /// Restores both models from a snapshot.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (denoiser, evaluator) = ck.restore()?;
        Ok(Reranker::new(denoiser, evaluator, ck.hyperparameters.op))
    }

    /// Likelihood and utility of one arrangement of `input`'s candidates,
    /// memoized per call site.
    fn eval_arrangement(
        &self,
        input: &ItemSequence,
        positions: &[usize],
        condition: &[bool],
        history: &[ItemId],
        cache: &mut BTreeMap<Vec<usize>, (f64, f64)>,
    ) -> Result<(f64, f64)> {
        if let Some(&v) = cache.get(positions) {
            return Ok(v);
        }
        let items: Vec<ItemId> = positions.iter().map(|&p| input.base()[p]).collect();
        let scores = evaluator_scores(&self.evaluator, &items, history)?;
        let entry = (
            discounted_geometric_mean(&masked_probs(&scores, condition))?,
            evaluator_utility(&scores),
        );
        cache.insert(positions.to_vec(), entry);
        Ok(entry)
    }

    /// Children of one beam candidate under the token-level chain: per-slot
    /// shortlists of the `top_m` most likely candidates, combined slot by
    /// slot under a duplicate-free constraint, keeping the `width` best
    /// partial sequences. Falls back to carrying the parent when every
    /// combination dies (so expansion never returns empty).
    fn token_children(
        &self,
        input: &ItemSequence,
        parent: &[usize],
        condition: &[bool],
        history: &[ItemId],
        width: usize,
        top_m: usize,
    ) -> Result<Vec<(Vec<usize>, f64)>> {
        let seq = input.with_positions(parent.to_vec())?;
        let din = DenoiseInput {
            seq: &seq,
            condition,
            history,
        };
        let dists = denoise_distribution_token(&self.denoiser, &din)?;
        let mut slots: Vec<Vec<(usize, f64)>> = Vec::with_capacity(dists.len());
        for d in &dists {
            let mut row: Vec<(usize, f64)> = d.probs().iter().copied().enumerate().collect();
            row.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| a.0.cmp(&b.0))
            });
            row.truncate(top_m);
            slots.push(row.into_iter().map(|(i, p)| (i, p.ln())).collect());
        }
        let mut partials: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        for row in &slots {
            let mut next = Vec::new();
            for (prefix, acc) in &partials {
                for &(cand, lp) in row {
                    if !prefix.contains(&cand) {
                        let mut grown = prefix.clone();
                        grown.push(cand);
                        next.push((grown, acc + lp));
                    }
                }
            }
            next.sort_by(by_score_then_lex);
            next.truncate(width);
            partials = next;
            if partials.is_empty() {
                break;
            }
        }
        if partials.is_empty() {
            let lp: f64 = parent
                .iter()
                .enumerate()
                .map(|(k, &b)| dists[k].probs()[b].ln())
                .sum();
            partials.push((parent.to_vec(), lp));
        }
        Ok(partials)
    }

    /// Fixes up an arrangement: beam search over reverse steps, feedback-
    /// likelihood early stop, then utility-based selection from the beam of
    /// the best-likelihood step (the input itself when nothing improved).
    pub fn rerank(
        &self,
        input: &ItemSequence,
        history: &[ItemId],
        cfg: &InferenceConfig,
    ) -> Result<RerankOutcome> {
        cfg.validate()?;
        let condition = cfg.condition.expand(input.len())?;
        if input.has_duplicates() {
            return Err(Error::InvalidArgument(
                "input arrangement repeats a candidate".into(),
            ));
        }
        let scorer = match self.op {
            OpKind::Perm => {
                if input.rank_index().is_none() {
                    return Err(Error::InvalidArgument(
                        "whole-arrangement reranking needs the slots to arrange \
                         the first candidates"
                            .into(),
                    ));
                }
                let din = DenoiseInput {
                    seq: input,
                    condition: &condition,
                    history,
                };
                Some(perm_scorer(&self.denoiser, &din)?)
            }
            OpKind::Token => None,
        };

        let mut cache: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        let mut beam: Vec<(Vec<usize>, f64)> = vec![(input.positions().to_vec(), 0.0)];
        let (start_likelihood, _) =
            self.eval_arrangement(input, input.positions(), &condition, history, &mut cache)?;
        let mut step_likelihoods = vec![start_likelihood];
        let mut beams: Vec<Vec<BeamEntry>> = Vec::new();
        let mut early_stopped = false;
        // Anytime behavior: remember the beam of the best-likelihood step seen
        // so far (the input arrangement is the step-0 floor). The chain halts
        // on the first step that fails to improve, and that step's beam can be
        // worse than what came before it; selecting from the peak instead
        // makes extra steps harmless and a no-gain rerank return its input.
        let mut peak_likelihood = start_likelihood;
        let mut peak_step = 0usize;
        let mut peak_beam = beam.clone();

        for step in 1..=cfg.max_steps {
            let mut pool: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
            for (parent, acc) in &beam {
                let children = match &scorer {
                    Some(sc) => perm_children(sc, parent, cfg.beam),
                    None => self.token_children(
                        input,
                        parent,
                        &condition,
                        history,
                        cfg.beam,
                        cfg.top_m,
                    )?,
                };
                for (child, lp) in children {
                    let total = acc + lp;
                    pool.entry(child)
                        .and_modify(|best| *best = best.max(total))
                        .or_insert(total);
                }
            }
            let mut cands: Vec<(Vec<usize>, f64)> = pool.into_iter().collect();
            cands.sort_by(by_score_then_lex);
            cands.truncate(cfg.beam);
            beam = cands;

            beams.push(
                beam.iter()
                    .map(|(pos, acc)| BeamEntry {
                        rank_index: rank_of(pos),
                        log_prob: *acc,
                        items: pos.iter().map(|&p| input.base()[p].0).collect(),
                    })
                    .collect(),
            );
            let mut best_likelihood = f64::NEG_INFINITY;
            for (pos, _) in &beam {
                let (lik, _) = self.eval_arrangement(input, pos, &condition, history, &mut cache)?;
                best_likelihood = best_likelihood.max(lik);
            }
            let previous = *step_likelihoods.last().expect("seeded with the input");
            step_likelihoods.push(best_likelihood);
            if best_likelihood > peak_likelihood {
                peak_likelihood = best_likelihood;
                peak_step = step;
                peak_beam = beam.clone();
            }
            if best_likelihood - previous < cfg.early_stop {
                early_stopped = step < cfg.max_steps;
                break;
            }
        }

        let mut candidate_utilities = Vec::with_capacity(peak_beam.len());
        let mut best: Option<usize> = None;
        for (i, (pos, _)) in peak_beam.iter().enumerate() {
            let (_, utility) =
                self.eval_arrangement(input, pos, &condition, history, &mut cache)?;
            candidate_utilities.push(utility);
            let better = match best {
                None => true,
                Some(b) => {
                    utility > candidate_utilities[b]
                        || (utility == candidate_utilities[b] && pos < &peak_beam[b].0)
                }
            };
            if better {
                best = Some(i);
            }
        }
        let best = best.expect("beam is never empty");
        let chosen_utility = candidate_utilities[best];
        let output = input.with_positions(peak_beam[best].0.clone())?;
        Ok(RerankOutcome {
            output,
            diagnostics: RerankDiagnostics {
                steps_executed: beams.len(),
                early_stopped,
                step_likelihoods,
                beams,
                chosen_step: peak_step,
                candidate_utilities,
                chosen_utility,
            },
        })
    }
}

/// Baseline: the arrangement exactly as logged.
pub fn logged_order(session: &Session) -> ItemSequence {
    session.displayed.clone()
}

/// Baseline: items sorted by the evaluator's score for each item shown on
/// its own (list context deliberately ignored); stable on ties.
pub fn pointwise_greedy_order(
    evaluator: &EvaluatorParams,
    session: &Session,
) -> Result<ItemSequence> {
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(session.displayed.len());
    for k in 0..session.displayed.len() {
        let alone = [session.displayed.item_at(k)];
        let s = evaluator_scores(evaluator, &alone, &session.history)?[0];
        scored.push((k, s));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    let positions = scored
        .iter()
        .map(|&(k, _)| session.displayed.positions()[k])
        .collect();
    session.displayed.with_positions(positions)
}

/// Aggregate quality of arrangements against the logged feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrangementEval {
    /// Mean per-session ranking AUC over sessions where it is defined.
    pub auc: Option<f64>,
    /// Sessions with single-class feedback, where AUC is undefined.
    pub auc_undefined: usize,
    /// Mean NDCG at the cutoff.
    pub mean_ndcg: f64,
    /// Per-session NDCG at the cutoff, in input order.
    pub ndcg_per_session: Vec<f64>,
}

/// Scores arrangements of logged items against the logged feedback: each
/// item inherits its logged label, an item's rank score is its distance
/// from the bottom of the output, and NDCG gains follow the output order.
/// `outputs[i]` must arrange exactly the items of `sessions[i]`.
pub fn evaluate_arrangements(
    sessions: &[&Session],
    outputs: &[ItemSequence],
    ndcg_k: usize,
) -> Result<ArrangementEval> {
    if sessions.is_empty() || sessions.len() != outputs.len() {
        return Err(Error::InvalidArgument(format!(
            "need one output per session, got {} sessions / {} outputs",
            sessions.len(),
            outputs.len()
        )));
    }
    let mut auc_sum = 0.0;
    let mut auc_defined = 0usize;
    let mut auc_undefined = 0usize;
    let mut ndcg_per_session = Vec::with_capacity(sessions.len());
    for (s, o) in sessions.iter().zip(outputs) {
        let mut label_of: BTreeMap<ItemId, bool> = BTreeMap::new();
        for (k, item) in s.displayed.items().into_iter().enumerate() {
            if label_of.insert(item, s.feedback[k]).is_some() {
                return Err(Error::Integrity(format!(
                    "session {}: item {item} logged twice",
                    s.session_id
                )));
            }
        }
        let out_items = o.items();
        if out_items.len() != label_of.len() || o.has_duplicates() {
            return Err(Error::Integrity(format!(
                "session {}: output does not arrange the logged items",
                s.session_id
            )));
        }
        let l = out_items.len();
        let mut gains = Vec::with_capacity(l);
        let mut scored = Vec::with_capacity(l);
        for (k, item) in out_items.iter().enumerate() {
            let Some(&label) = label_of.get(item) else {
                return Err(Error::Integrity(format!(
                    "session {}: output item {item} was never logged",
                    s.session_id
                )));
            };
            gains.push(if label { 1.0 } else { 0.0 });
            scored.push(((l - k) as f64, label));
        }
        ndcg_per_session.push(ndcg_at_k(&gains, ndcg_k));
        match auc(&scored) {
            Some(a) => {
                auc_sum += a;
                auc_defined += 1;
            }
            None => auc_undefined += 1,
        }
    }
    Ok(ArrangementEval {
        auc: (auc_defined > 0).then(|| auc_sum / auc_defined as f64),
        auc_undefined,
        mean_ndcg: ndcg_per_session.iter().sum::<f64>() / ndcg_per_session.len() as f64,
        ndcg_per_session,
    })
}

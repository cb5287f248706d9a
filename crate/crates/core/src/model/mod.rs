//! Learned components: the conditional denoiser and the sequence evaluator.
//!
//! Both share one architecture for turning an item list plus a user history
//! into per-slot representations (the *contextual encoder*, see
//! [`encoder`]): item embeddings run through one self-attention layer over
//! the list, one cross-attention layer over the history, and a
//! multiplicative taste block against the mean history embedding,
//! concatenated to a `3D`-wide vector per slot.
//!
//! * The **denoiser** ([`denoiser`]) scores candidate arrangements for one
//!   reverse-corruption step. Its encoder uses *no* positional signal, so
//!   encoding is equivariant under permutation of the list; order
//!   sensitivity enters only through feedback-condition queries (which carry
//!   a fixed sinusoidal slot signal) attending over the encoded slots.
//! * The **evaluator** ([`evaluator`]) predicts per-slot positive-feedback
//!   probabilities for an arrangement; its job is position-sensitive, so it
//!   adds sinusoidal positional encodings to the item embeddings.
//!
//! All gradients are exact: forward passes are recorded on a [`tape::Tape`]
//! and differentiated in reverse. Training state serializes to a single
//! JSON [`Checkpoint`] with base64-encoded `f32` tensors.

pub mod denoiser;
pub mod encoder;
pub mod evaluator;
pub mod optim;
pub mod tape;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::OpKind;
use crate::perm::{ItemId, SequenceSpec};

/// Width and temperature settings shared by both models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    /// Item-embedding width `D`; contextual encodings are `3D` wide.
    pub dim: usize,
    /// Hidden width of the evaluator's per-slot MLP.
    pub hidden: usize,
    /// Softmax temperature for candidate scores (cosines live in `[-1, 1]`,
    /// so a temperature well below 1 gives the distribution contrast).
    pub tau: f64,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper {
            dim: 32,
            hidden: 64,
            tau: 0.1,
        }
    }
}

impl ModelHyper {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("model widths must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Uniform(-0.05, 0.05), the init used for every trainable tensor.
fn init_vec<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-0.05..0.05)).collect()
}

/// Item-id to embedding-row table with a shared out-of-vocabulary row.
#[derive(Debug, Clone)]
pub struct Embedding {
    dim: usize,
    vocab: Vec<ItemId>,
    index: BTreeMap<ItemId, usize>,
    /// `(vocab.len() + 1) * dim`, row 0 is the shared OOV embedding.
    pub table: Vec<f64>,
}

impl Embedding {
    /// Fresh table over `vocab` (deduplicated, order preserved).
    pub fn new<R: Rng + ?Sized>(vocab: &[ItemId], dim: usize, rng: &mut R) -> Self {
        let mut index = BTreeMap::new();
        let mut kept = Vec::new();
        for &id in vocab {
            if !index.contains_key(&id) {
                index.insert(id, kept.len());
                kept.push(id);
            }
        }
        let table = init_vec((kept.len() + 1) * dim, rng);
        Embedding {
            dim,
            vocab: kept,
            index,
            table,
        }
    }

    /// Embedding width.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Known items, in table order.
    pub fn vocab(&self) -> &[ItemId] {
        &self.vocab
    }

    /// Table row for an item; unknown items share row 0.
    pub fn row_of(&self, id: ItemId) -> usize {
        self.index.get(&id).map(|i| i + 1).unwrap_or(0)
    }

    /// Embedding vector for an item.
    pub fn vector(&self, id: ItemId) -> &[f64] {
        let r = self.row_of(id);
        &self.table[r * self.dim..(r + 1) * self.dim]
    }

    /// Table rows, including the shared out-of-vocabulary row 0.
    pub fn n_rows(&self) -> usize {
        self.vocab.len() + 1
    }
}

/// Projection matrices of the contextual encoder; all `D x D`, row-major.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    /// Self-attention query projection.
    pub self_q: Vec<f64>,
    /// Self-attention key projection.
    pub self_k: Vec<f64>,
    /// Self-attention value projection.
    pub self_v: Vec<f64>,
    /// History-attention query projection (applied to list items).
    pub hist_q: Vec<f64>,
    /// History-attention key projection (applied to history items).
    pub hist_k: Vec<f64>,
    /// History-attention value projection (applied to history items).
    pub hist_v: Vec<f64>,
}

impl EncoderParams {
    fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        EncoderParams {
            self_q: init_vec(dim * dim, rng),
            self_k: init_vec(dim * dim, rng),
            self_v: init_vec(dim * dim, rng),
            hist_q: init_vec(dim * dim, rng),
            hist_k: init_vec(dim * dim, rng),
            hist_v: init_vec(dim * dim, rng),
        }
    }
}

/// Parameters of the conditional denoiser.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    /// Shared widths/temperature.
    pub hyper: ModelHyper,
    /// Item embeddings (width `D`).
    pub emb: Embedding,
    /// Contextual encoder projections.
    pub enc: EncoderParams,
    /// Condition embedding for positive feedback (width `3D`, used as an
    /// attention query over the encoded slots).
    pub cond_pos: Vec<f64>,
    /// Condition embedding for negative feedback (width `3D`).
    pub cond_neg: Vec<f64>,
    /// Learnable slot codes added to the condition queries, one `3D` row per
    /// slot (`MAX_ARRANGED x 3D`, row-major), initialized to the sinusoidal
    /// codes. They must be trainable: with every candidate arranging the
    /// same items, only the slot-dependent part of the match scores can
    /// distinguish candidates, and fixed codes cannot learn to point slot
    /// `k` at the item that belongs there.
    pub pos_q: Vec<f64>,
    /// Learnable scale applied to candidate scores before the temperature
    /// softmax; length 1.
    pub out_scale: Vec<f64>,
}

impl DenoiserParams {
    /// Fresh denoiser with uniform(-0.05, 0.05) weights; the slot codes
    /// start at their sinusoidal values.
    pub fn init<R: Rng + ?Sized>(vocab: &[ItemId], hyper: ModelHyper, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let width = 3 * hyper.dim;
        let pos_q = (0..crate::perm::MAX_ARRANGED)
            .flat_map(|k| sinusoidal_encoding(k, width))
            .collect();
        Ok(DenoiserParams {
            hyper,
            emb: Embedding::new(vocab, hyper.dim, rng),
            enc: EncoderParams::new(hyper.dim, rng),
            cond_pos: init_vec(width, rng),
            cond_neg: init_vec(width, rng),
            pos_q,
            out_scale: vec![1.0],
        })
    }

    /// Tensor views in a stable order (checkpointing, optimizers, gradient
    /// checks).
    pub fn named_tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("emb.table", &self.emb.table),
            ("enc.self_q", &self.enc.self_q),
            ("enc.self_k", &self.enc.self_k),
            ("enc.self_v", &self.enc.self_v),
            ("enc.hist_q", &self.enc.hist_q),
            ("enc.hist_k", &self.enc.hist_k),
            ("enc.hist_v", &self.enc.hist_v),
            ("cond_pos", &self.cond_pos),
            ("cond_neg", &self.cond_neg),
            ("pos_q", &self.pos_q),
            ("out_scale", &self.out_scale),
        ]
    }

    /// Mutable tensor views, same order as [`Self::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("emb.table", &mut self.emb.table),
            ("enc.self_q", &mut self.enc.self_q),
            ("enc.self_k", &mut self.enc.self_k),
            ("enc.self_v", &mut self.enc.self_v),
            ("enc.hist_q", &mut self.enc.hist_q),
            ("enc.hist_k", &mut self.enc.hist_k),
            ("enc.hist_v", &mut self.enc.hist_v),
            ("cond_pos", &mut self.cond_pos),
            ("cond_neg", &mut self.cond_neg),
            ("pos_q", &mut self.pos_q),
            ("out_scale", &mut self.out_scale),
        ]
    }
}

/// Parameters of the sequence evaluator.
#[derive(Debug, Clone)]
pub struct EvaluatorParams {
    /// Shared widths/temperature.
    pub hyper: ModelHyper,
    /// Item embeddings (independent of the denoiser's).
    pub emb: Embedding,
    /// Contextual encoder projections (independent copy).
    pub enc: EncoderParams,
    /// Per-slot MLP: `hidden x 3D` weight.
    pub mlp_w1: Vec<f64>,
    /// Per-slot MLP: `hidden` bias.
    pub mlp_b1: Vec<f64>,
    /// Per-slot MLP: `1 x hidden` weight.
    pub mlp_w2: Vec<f64>,
    /// Per-slot MLP: output bias, length 1.
    pub mlp_b2: Vec<f64>,
}

impl EvaluatorParams {
    /// Fresh evaluator with uniform(-0.05, 0.05) weights.
    pub fn init<R: Rng + ?Sized>(vocab: &[ItemId], hyper: ModelHyper, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        Ok(EvaluatorParams {
            hyper,
            emb: Embedding::new(vocab, hyper.dim, rng),
            enc: EncoderParams::new(hyper.dim, rng),
            mlp_w1: init_vec(hyper.hidden * 3 * hyper.dim, rng),
            mlp_b1: init_vec(hyper.hidden, rng),
            mlp_w2: init_vec(hyper.hidden, rng),
            mlp_b2: init_vec(1, rng),
        })
    }

    /// Tensor views in a stable order.
    pub fn named_tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("emb.table", &self.emb.table),
            ("enc.self_q", &self.enc.self_q),
            ("enc.self_k", &self.enc.self_k),
            ("enc.self_v", &self.enc.self_v),
            ("enc.hist_q", &self.enc.hist_q),
            ("enc.hist_k", &self.enc.hist_k),
            ("enc.hist_v", &self.enc.hist_v),
            ("mlp.w1", &self.mlp_w1),
            ("mlp.b1", &self.mlp_b1),
            ("mlp.w2", &self.mlp_w2),
            ("mlp.b2", &self.mlp_b2),
        ]
    }

    /// Mutable tensor views, same order as [`Self::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("emb.table", &mut self.emb.table),
            ("enc.self_q", &mut self.enc.self_q),
            ("enc.self_k", &mut self.enc.self_k),
            ("enc.self_v", &mut self.enc.self_v),
            ("enc.hist_q", &mut self.enc.hist_q),
            ("enc.hist_k", &mut self.enc.hist_k),
            ("enc.hist_v", &mut self.enc.hist_v),
            ("mlp.w1", &mut self.mlp_w1),
            ("mlp.b1", &mut self.mlp_b1),
            ("mlp.w2", &mut self.mlp_w2),
            ("mlp.b2", &mut self.mlp_b2),
        ]
    }
}

/// Gradients for one parameter set, aligned with its `named_tensors` order.
#[derive(Debug, Clone)]
pub struct GradSet {
    /// One buffer per tensor, same shapes and order as the parameters.
    pub by_tensor: Vec<Vec<f64>>,
}

impl GradSet {
    /// Zero gradients shaped like `shapes`.
    pub fn zeros_like(shapes: &[(&'static str, &[f64])]) -> Self {
        GradSet {
            by_tensor: shapes.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    /// `self += other * scale`.
    pub fn add_scaled(&mut self, other: &GradSet, scale: f64) {
        assert_eq!(self.by_tensor.len(), other.by_tensor.len());
        for (a, b) in self.by_tensor.iter_mut().zip(&other.by_tensor) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y * scale;
            }
        }
    }
}

/// Classic sinusoidal positional code of width `dim` for slot `pos`
/// (0-based): `sin(pos / 10000^(2i/dim))` and `cos` interleaved.
pub fn sinusoidal_encoding(pos: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let mut i = 0;
    while i < dim {
        let freq = 1.0 / 10000f64.powf(i as f64 / dim as f64);
        let angle = pos as f64 * freq;
        v[i] = angle.sin();
        if i + 1 < dim {
            v[i + 1] = angle.cos();
        }
        i += 2;
    }
    v
}

/// Version written by, and required from, checkpoint files.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Hyperparameters pinned inside a checkpoint.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHyper {
    /// Model widths/temperature.
    pub dim: usize,
    /// Evaluator MLP hidden width.
    pub hidden: usize,
    /// Candidate-score softmax temperature.
    pub tau: f64,
    /// Which corruption process the denoiser was trained against.
    pub op: OpKind,
    /// Corruption strength the chain was built with.
    pub beta: f64,
    /// Forward horizon the chain was built with.
    pub t_max: usize,
}

/// Single-file JSON training snapshot: shapes, hyperparameters, tensors
/// (base64 `f32`), RNG seed and optimizer step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Must equal [`CHECKPOINT_FORMAT_VERSION`] to load.
    pub format_version: u32,
    /// Problem shape the models were trained for.
    pub spec: SequenceSpec,
    /// Hyperparameters needed to rebuild the models and chain.
    pub hyperparameters: CheckpointHyper,
    /// Item vocabulary (decimal ids; JSON numbers cannot hold all u64s).
    pub vocab: Vec<String>,
    /// Named flat tensors, `f32` little-endian, base64.
    pub arrays: BTreeMap<String, String>,
    /// Training RNG seed, recorded for reproducibility.
    pub rng_seed: u64,
    /// Optimizer steps taken when the snapshot was written.
    pub step: u64,
}

fn encode_f32(v: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for &x in v {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn decode_f32(s: &str, expect_len: usize, name: &str) -> Result<Vec<f64>> {
    let bytes = BASE64
        .decode(s)
        .map_err(|e| Error::Checkpoint(format!("array {name}: bad base64: {e}")))?;
    if bytes.len() != expect_len * 4 {
        return Err(Error::Checkpoint(format!(
            "array {name}: expected {expect_len} f32 values, file holds {}",
            bytes.len() / 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

impl Checkpoint {
    /// Snapshots the two models plus run metadata.
    pub fn from_models(
        spec: SequenceSpec,
        hyperparameters: CheckpointHyper,
        denoiser: &DenoiserParams,
        evaluator: &EvaluatorParams,
        rng_seed: u64,
        step: u64,
    ) -> Result<Self> {
        if denoiser.emb.vocab() != evaluator.emb.vocab() {
            return Err(Error::Checkpoint(
                "denoiser and evaluator must share one vocabulary".into(),
            ));
        }
        let mut arrays = BTreeMap::new();
        for (name, t) in denoiser.named_tensors() {
            arrays.insert(format!("denoiser.{name}"), encode_f32(t));
        }
        for (name, t) in evaluator.named_tensors() {
            arrays.insert(format!("evaluator.{name}"), encode_f32(t));
        }
        Ok(Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            spec,
            hyperparameters,
            vocab: denoiser.emb.vocab().iter().map(|i| i.0.to_string()).collect(),
            arrays,
            rng_seed,
            step,
        })
    }

    /// Rebuilds both parameter sets from the stored tensors.
    pub fn restore(&self) -> Result<(DenoiserParams, EvaluatorParams)> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} not supported (expected {})",
                self.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        let vocab: Vec<ItemId> = self
            .vocab
            .iter()
            .map(|s| {
                s.parse::<u64>().map(ItemId).map_err(|_| {
                    Error::Checkpoint(format!("vocab entry {s:?} is not a decimal item id"))
                })
            })
            .collect::<Result<_>>()?;
        let hyper = ModelHyper {
            dim: self.hyperparameters.dim,
            hidden: self.hyperparameters.hidden,
            tau: self.hyperparameters.tau,
        };
        // Deterministic placeholder init, then overwrite every tensor.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut den = DenoiserParams::init(&vocab, hyper, &mut rng)?;
        let mut eva = EvaluatorParams::init(&vocab, hyper, &mut rng)?;
        for (name, t) in den.named_tensors_mut() {
            let key = format!("denoiser.{name}");
            let s = self
                .arrays
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
            t.copy_from_slice(&decode_f32(s, t.len(), &key)?);
        }
        for (name, t) in eva.named_tensors_mut() {
            let key = format!("evaluator.{name}");
            let s = self
                .arrays
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
            t.copy_from_slice(&decode_f32(s, t.len(), &key)?);
        }
        Ok((den, eva))
    }

    /// Writes pretty-printed JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        f.write_all(body.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Reads and version-checks a checkpoint file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut body = String::new();
        std::fs::File::open(path)?.read_to_string(&mut body)?;
        let ck: Checkpoint = serde_json::from_str(&body)
            .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} not supported (expected {})",
                path.display(),
                ck.format_version,
                CHECKPOINT_FORMAT_VERSION
            )));
        }
        Ok(ck)
    }
}

/// Central-finite-difference verification of analytic gradients, shared by
/// the model test suites.
#[cfg(test)]
pub(crate) mod testgrad {
    use super::GradSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Compares `grads` against `(f(x+h) - f(x-h)) / 2h` at
    /// `samples_per_tensor` random coordinates of every tensor.
    ///
    /// `loss_at(tensor, coord, delta)` must recompute the loss with that one
    /// coordinate shifted by `delta`. Agreement means an absolute gap below
    /// 1e-8 or a relative gap below 1e-4.
    pub(crate) fn fd_check<F: FnMut(usize, usize, f64) -> f64>(
        grads: &GradSet,
        mut loss_at: F,
        samples_per_tensor: usize,
        seed: u64,
    ) {
        const H: f64 = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (ti, tensor) in grads.by_tensor.iter().enumerate() {
            for _ in 0..samples_per_tensor.min(tensor.len()) {
                let ci = rng.random_range(0..tensor.len());
                let fd = (loss_at(ti, ci, H) - loss_at(ti, ci, -H)) / (2.0 * H);
                let g = tensor[ci];
                let diff = (fd - g).abs();
                let rel = diff / fd.abs().max(g.abs()).max(1e-12);
                assert!(
                    diff < 1e-8 || rel < 1e-4,
                    "tensor {ti} coord {ci}: analytic {g} vs finite-difference {fd}"
                );
            }
        }
    }
}

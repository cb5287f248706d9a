//! Session data: a synthetic world with genuine listwise interplay, and CSV
//! ingestion of logged sessions.
//!
//! The synthetic generator models three effects a reranker should exploit:
//! user-item affinity (topic match), redundancy (an item similar to one
//! shown above it earns fewer positives, weight `lambda`), and position
//! bias (top slots earn more positives regardless of content). Displayed
//! lists come from a deliberately noisy affinity pre-ranker, so a reranker
//! with access to user history has headroom over the logged order.
//!
//! CSV schemas (UTF-8, LF, header row required):
//!
//! * `sessions.csv`: `session_id,user_id,position,item_id,feedback` — one
//!   row per slot, positions contiguous from 0, feedback in `{0,1}`.
//! * `histories.csv`: `user_id,seq_no,item_id` — one row per past item,
//!   `seq_no` ascending in time (larger = more recent).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perm::{ItemId, ItemSequence};

/// Most recent history entries kept per user.
pub const HISTORY_CAP: usize = 50;

/// One logged impression: what a user saw and how they reacted.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    /// Unique id; ascending ids mean later sessions.
    pub session_id: u64,
    /// The viewing user.
    pub user_id: u64,
    /// The user's past items, most recent first, at most [`HISTORY_CAP`].
    pub history: Vec<ItemId>,
    /// The logged list, slot 0 on top.
    pub displayed: ItemSequence,
    /// Feedback per slot, `true` = positive.
    pub feedback: Vec<bool>,
}

/// Knobs of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    /// Distinct users.
    pub n_users: usize,
    /// Catalog size.
    pub n_items: usize,
    /// Sessions to generate (last 20% become the test split).
    pub n_sessions: usize,
    /// Topic space dimensionality for users and items.
    pub n_topics: usize,
    /// Additive per-slot engagement bias, one entry per slot, each in
    /// `[0, 1]`; its length is the list length.
    pub position_bias: Vec<f64>,
    /// Redundancy penalty: weight on the similarity to items shown above.
    pub lambda: f64,
    /// Standard deviation of per-slot feedback noise.
    pub noise: f64,
    /// Standard deviation of the pre-ranker's scoring noise (how bad the
    /// logged order is).
    pub preranker_noise: f64,
    /// Bootstrap history length per user.
    pub history_len: usize,
    /// Master seed; every draw derives from it.
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            n_users: 100,
            n_items: 300,
            n_sessions: 2000,
            n_topics: 8,
            position_bias: vec![0.5, 0.42, 0.35, 0.29, 0.24, 0.2],
            lambda: 1.0,
            noise: 0.3,
            preranker_noise: 0.75,
            history_len: 12,
            seed: 7,
        }
    }
}

impl SyntheticWorldConfig {
    /// List length (one bias entry per slot).
    pub fn list_len(&self) -> usize {
        self.position_bias.len()
    }

    /// Rejects empty counts, out-of-range biases, and negative noise.
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.n_sessions == 0 {
            return Err(Error::InvalidArgument(
                "user, item, and session counts must be positive".into(),
            ));
        }
        if self.n_topics < 2 {
            return Err(Error::InvalidArgument(
                "need at least 2 topics for meaningful similarity".into(),
            ));
        }
        if self.position_bias.len() < 2 {
            return Err(Error::InvalidArgument(
                "position_bias must have one entry per slot (at least 2)".into(),
            ));
        }
        if self.position_bias.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::InvalidArgument(
                "position_bias entries must lie in [0, 1]".into(),
            ));
        }
        if self.n_items < 3 * self.list_len() {
            return Err(Error::InvalidArgument(format!(
                "catalog of {} items cannot fill candidate pools of {}",
                self.n_items,
                3 * self.list_len()
            )));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("noise", self.noise),
            ("preranker_noise", self.preranker_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.history_len > HISTORY_CAP {
            return Err(Error::InvalidArgument(format!(
                "history_len {} exceeds the cap of {HISTORY_CAP}",
                self.history_len
            )));
        }
        Ok(())
    }
}

/// Generated sessions, split by time.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// First 80% of sessions.
    pub train: Vec<Session>,
    /// Last 20% of sessions.
    pub test: Vec<Session>,
}

impl Dataset {
    /// Train then test, in time order.
    pub fn all(&self) -> impl Iterator<Item = &Session> {
        self.train.iter().chain(self.test.iter())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// The ground-truth preference model behind a synthetic dataset; exposed so
/// tests and benchmarks can query true probabilities and simulate feedback
/// for arbitrary arrangements.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    cfg: SyntheticWorldConfig,
    /// Unit topic mixtures, one per user.
    user_vecs: Vec<Vec<f64>>,
    /// Unit topic mixtures, one per item (index = id - 1).
    item_vecs: Vec<Vec<f64>>,
    /// Bootstrap history per user, most recent first.
    histories: Vec<Vec<ItemId>>,
}

impl SyntheticWorld {
    /// Builds users, items, and histories from `cfg.seed`.
    pub fn build(cfg: &SyntheticWorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let t = cfg.n_topics;

        // Items: a dominant topic plus a little smear, L2-normalized so
        // similarity is a plain dot product in [0, 1].
        let item_vecs: Vec<Vec<f64>> = (0..cfg.n_items)
            .map(|i| {
                let mut v = vec![0.0; t];
                v[i % t] = 1.0;
                for x in v.iter_mut() {
                    *x += 0.15 * rng.random::<f64>();
                }
                normalize(&mut v);
                v
            })
            .collect();

        // Users: random topic taste with exponential weights — most users
        // have one or two leading topics with frequent near-ties, so
        // diversifying a list can genuinely pay off.
        let user_vecs: Vec<Vec<f64>> = (0..cfg.n_users)
            .map(|_| {
                let mut v: Vec<f64> = (0..t)
                    .map(|_| {
                        let u: f64 = rng.random::<f64>().max(1e-9);
                        -u.ln()
                    })
                    .collect();
                normalize(&mut v);
                v
            })
            .collect();

        let mut world = SyntheticWorld {
            cfg: cfg.clone(),
            user_vecs,
            item_vecs,
            histories: Vec::new(),
        };

        // Histories: affinity-weighted draws, oldest first, then reversed so
        // storage is most-recent-first.
        world.histories = (0..cfg.n_users)
            .map(|u| {
                let weights: Vec<f64> = (0..cfg.n_items)
                    .map(|i| (2.0 * world.affinity(u as u64, ItemId(i as u64 + 1))).exp())
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut h: Vec<ItemId> = (0..cfg.history_len)
                    .map(|_| {
                        let mut target = rng.random::<f64>() * total;
                        let mut pick = cfg.n_items - 1;
                        for (i, w) in weights.iter().enumerate() {
                            if target < *w {
                                pick = i;
                                break;
                            }
                            target -= w;
                        }
                        ItemId(pick as u64 + 1)
                    })
                    .collect();
                h.reverse();
                h
            })
            .collect();
        Ok(world)
    }

    /// World settings.
    pub fn config(&self) -> &SyntheticWorldConfig {
        &self.cfg
    }

    /// Bootstrap history of a user, most recent first.
    pub fn history_of(&self, user: u64) -> &[ItemId] {
        &self.histories[user as usize]
    }

    fn item_vec(&self, id: ItemId) -> &[f64] {
        &self.item_vecs[(id.0 - 1) as usize]
    }

    /// Taste match in roughly `[-1.5, 2.5]`: scaled topic dot product.
    pub fn affinity(&self, user: u64, item: ItemId) -> f64 {
        let dot: f64 = self.user_vecs[user as usize]
            .iter()
            .zip(self.item_vec(item))
            .map(|(a, b)| a * b)
            .sum();
        4.0 * dot - 1.5
    }

    /// Topic similarity of two items in `[0, 1]`.
    pub fn similarity(&self, a: ItemId, b: ItemId) -> f64 {
        self.item_vec(a)
            .iter()
            .zip(self.item_vec(b))
            .map(|(x, y)| x * y)
            .sum()
    }

    /// Noise-free probability of positive feedback for `item` at slot `k`
    /// given the items already placed above it.
    pub fn positive_probability(&self, user: u64, item: ItemId, k: usize, above: &[ItemId]) -> f64 {
        let max_sim = above
            .iter()
            .map(|&a| self.similarity(item, a))
            .fold(0.0, f64::max);
        sigmoid(self.affinity(user, item) - self.cfg.lambda * max_sim + self.cfg.position_bias[k])
    }

    /// Draws feedback for `items` shown to `user` in that order.
    ///
    /// One noise and one threshold draw per slot, regardless of settings, so
    /// runs with different `lambda`/`noise` but the same seed stay aligned.
    pub fn simulate_feedback<R: Rng + ?Sized>(
        &self,
        user: u64,
        items: &[ItemId],
        rng: &mut R,
    ) -> Vec<bool> {
        items
            .iter()
            .enumerate()
            .map(|(k, &item)| {
                let max_sim = items[..k]
                    .iter()
                    .map(|&a| self.similarity(item, a))
                    .fold(0.0, f64::max);
                let eps: f64 = StandardNormal.sample(rng);
                let p = sigmoid(
                    self.affinity(user, item) - self.cfg.lambda * max_sim
                        + self.cfg.position_bias[k]
                        + self.cfg.noise * eps,
                );
                rng.random::<f64>() < p
            })
            .collect()
    }

    /// The stage-one ranker: draws a candidate pool of `3 * list_len`
    /// distinct items and returns the top `list_len` by noisy affinity.
    pub fn sample_displayed<R: Rng + ?Sized>(&self, user: u64, rng: &mut R) -> Vec<ItemId> {
        let l = self.cfg.list_len();
        let mut pool: Vec<usize> = Vec::with_capacity(3 * l);
        while pool.len() < 3 * l {
            let i = rng.random_range(0..self.cfg.n_items);
            if !pool.contains(&i) {
                pool.push(i);
            }
        }
        let mut scored: Vec<(f64, ItemId)> = pool
            .into_iter()
            .map(|i| {
                let id = ItemId(i as u64 + 1);
                let eps: f64 = StandardNormal.sample(rng);
                (
                    self.affinity(user, id) + self.cfg.preranker_noise * eps,
                    id,
                )
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1 .0.cmp(&b.1 .0)));
        scored.into_iter().take(l).map(|(_, id)| id).collect()
    }

    /// Generates the full session stream and splits off the last 20%.
    pub fn generate(&self) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(1));
        let sessions: Vec<Session> = (0..self.cfg.n_sessions)
            .map(|sid| {
                let user = rng.random_range(0..self.cfg.n_users) as u64;
                let items = self.sample_displayed(user, &mut rng);
                let feedback = self.simulate_feedback(user, &items, &mut rng);
                let base: Arc<[ItemId]> = items.into();
                let positions = (0..base.len()).collect();
                Session {
                    session_id: sid as u64,
                    user_id: user,
                    history: self.histories[user as usize].clone(),
                    displayed: ItemSequence::new(base, positions).expect("valid display list"),
                    feedback,
                }
            })
            .collect();
        let n_test = sessions.len() / 5;
        let n_train = sessions.len() - n_test;
        let mut train = sessions;
        let test = train.split_off(n_train);
        Dataset { train, test }
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v.iter_mut() {
        *x /= norm;
    }
}

/// Builds the world and generates its dataset in one call.
pub fn generate_synthetic(cfg: &SyntheticWorldConfig) -> Result<Dataset> {
    Ok(SyntheticWorld::build(cfg)?.generate())
}

/// Sorted distinct item ids across displayed lists and histories.
pub fn collect_vocabulary(sessions: &[Session]) -> Vec<ItemId> {
    let mut set = BTreeSet::new();
    for s in sessions {
        set.extend(s.displayed.base().iter().copied());
        set.extend(s.history.iter().copied());
    }
    set.into_iter().collect()
}

/// Writes one row per slot to `path` (schema in the module docs).
pub fn write_sessions_csv(sessions: &[Session], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(["session_id", "user_id", "position", "item_id", "feedback"])
        .map_err(csv_io)?;
    for s in sessions {
        for (k, item) in s.displayed.items().iter().enumerate() {
            w.write_record([
                s.session_id.to_string(),
                s.user_id.to_string(),
                k.to_string(),
                item.0.to_string(),
                (s.feedback[k] as u8).to_string(),
            ])
            .map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes each user's history once, `seq_no` ascending in time.
///
/// Fails with an integrity error if two sessions disagree about one user's
/// history.
pub fn write_histories_csv(sessions: &[Session], path: &Path) -> Result<()> {
    let mut per_user: BTreeMap<u64, &[ItemId]> = BTreeMap::new();
    for s in sessions {
        match per_user.get(&s.user_id) {
            Some(&h) if h != s.history.as_slice() => {
                return Err(Error::Integrity(format!(
                    "sessions disagree about the history of user {}",
                    s.user_id
                )));
            }
            Some(_) => {}
            None => {
                per_user.insert(s.user_id, &s.history);
            }
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(["user_id", "seq_no", "item_id"]).map_err(csv_io)?;
    for (user, history) in per_user {
        // Stored most-recent-first; emit chronological.
        for (seq_no, item) in history.iter().rev().enumerate() {
            w.write_record([user.to_string(), seq_no.to_string(), item.0.to_string()])
                .map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Integrity(format!("csv write: {e}"))
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<T> {
    let raw = rec.get(idx).ok_or(Error::Parse {
        line,
        msg: format!("missing column {name}"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {name} value {raw:?}"),
    })
}

fn record_line(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn check_headers(got: &csv::StringRecord, want: &[&str], path: &Path) -> Result<()> {
    let got_cols: Vec<&str> = got.iter().collect();
    if got_cols != want {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "{}: header {:?} does not match required {:?}",
                path.display(),
                got_cols,
                want
            ),
        });
    }
    Ok(())
}

/// Loads sessions (and their users' histories) from the two-file schema.
///
/// Sessions come back ordered by `session_id`. Histories longer than
/// [`HISTORY_CAP`] keep only the most recent entries. Users absent from the
/// histories file get an empty history.
pub fn load_sessions_csv(sessions_path: &Path, histories_path: &Path) -> Result<Vec<Session>> {
    // user -> (seq_no -> item)
    let mut histories: BTreeMap<u64, BTreeMap<u64, ItemId>> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(histories_path).map_err(parse_any)?;
    check_headers(rdr.headers().map_err(parse_any)?, &["user_id", "seq_no", "item_id"], histories_path)?;
    for rec in rdr.records() {
        let rec = rec.map_err(parse_any)?;
        let line = record_line(&rec);
        let user: u64 = parse_field(&rec, 0, "user_id", line)?;
        let seq_no: u64 = parse_field(&rec, 1, "seq_no", line)?;
        let item: u64 = parse_field(&rec, 2, "item_id", line)?;
        if histories
            .entry(user)
            .or_default()
            .insert(seq_no, ItemId(item))
            .is_some()
        {
            return Err(Error::Integrity(format!(
                "line {line}: duplicate history entry (user {user}, seq_no {seq_no})"
            )));
        }
    }
    let histories: BTreeMap<u64, Vec<ItemId>> = histories
        .into_iter()
        .map(|(u, by_seq)| {
            let mut items: Vec<ItemId> = by_seq.into_values().collect();
            items.reverse(); // most recent first
            items.truncate(HISTORY_CAP);
            (u, items)
        })
        .collect();

    // session -> (user, position -> (item, feedback, line))
    struct Slot {
        item: ItemId,
        feedback: bool,
        line: usize,
    }
    let mut raw: BTreeMap<u64, (u64, BTreeMap<u64, Slot>)> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(sessions_path).map_err(parse_any)?;
    check_headers(
        rdr.headers().map_err(parse_any)?,
        &["session_id", "user_id", "position", "item_id", "feedback"],
        sessions_path,
    )?;
    for rec in rdr.records() {
        let rec = rec.map_err(parse_any)?;
        let line = record_line(&rec);
        let sid: u64 = parse_field(&rec, 0, "session_id", line)?;
        let user: u64 = parse_field(&rec, 1, "user_id", line)?;
        let pos: u64 = parse_field(&rec, 2, "position", line)?;
        let item: u64 = parse_field(&rec, 3, "item_id", line)?;
        let fb: u8 = parse_field(&rec, 4, "feedback", line)?;
        if fb > 1 {
            return Err(Error::Integrity(format!(
                "line {line}: feedback must be 0 or 1, got {fb}"
            )));
        }
        let entry = raw.entry(sid).or_insert_with(|| (user, BTreeMap::new()));
        if entry.0 != user {
            return Err(Error::Integrity(format!(
                "line {line}: session {sid} appears with users {} and {user}",
                entry.0
            )));
        }
        if entry
            .1
            .insert(
                pos,
                Slot {
                    item: ItemId(item),
                    feedback: fb == 1,
                    line,
                },
            )
            .is_some()
        {
            return Err(Error::Integrity(format!(
                "line {line}: duplicate (session {sid}, position {pos})"
            )));
        }
    }

    raw.into_iter()
        .map(|(sid, (user, slots))| {
            let l = slots.len();
            let mut items = Vec::with_capacity(l);
            let mut feedback = Vec::with_capacity(l);
            for (want, (pos, slot)) in slots.into_iter().enumerate() {
                if pos != want as u64 {
                    return Err(Error::Integrity(format!(
                        "session {sid}: positions must be contiguous from 0, missing {want}"
                    )));
                }
                if items.contains(&slot.item) {
                    return Err(Error::Integrity(format!(
                        "line {}: item {} shown twice in session {sid}",
                        slot.line, slot.item
                    )));
                }
                items.push(slot.item);
                feedback.push(slot.feedback);
            }
            let base: Arc<[ItemId]> = items.into();
            let positions = (0..base.len()).collect();
            Ok(Session {
                session_id: sid,
                user_id: user,
                history: histories.get(&user).cloned().unwrap_or_default(),
                displayed: ItemSequence::new(base, positions)?,
                feedback,
            })
        })
        .collect()
}

fn parse_any(e: csv::Error) -> Error {
    let line = match e.position() {
        Some(p) => p.line() as usize,
        None => 0,
    };
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

//! Forward corruption processes and their exact posteriors.
//!
//! Two discrete Markov chains gradually destroy an ordered list:
//!
//! * **arrangement level** ([`PermTransitionModel`]): one step keeps the
//!   arrangement with probability `1 - beta` and otherwise swaps a uniformly
//!   chosen pair of slots. States are whole permutations, indexed by their
//!   lexicographic rank, so the one-step matrix `Q` is `l_o! x l_o!` with
//!   `Q[i][j] = 1-beta` if `i = j`, `beta / C(l_o,2)` if the permutations
//!   differ by exactly one swap (distance 2), and `0` otherwise;
//! * **token level** ([`TokenTransitionModel`]): each slot independently
//!   keeps its item with probability `1 - beta` and otherwise is replaced by
//!   a uniformly chosen other candidate: `O[i][j] = 1-beta` on the diagonal
//!   and `beta / (l_s - 1)` off it.
//!
//! Both matrices are symmetric and doubly stochastic, so the uniform
//! distribution is stationary and repeated noising forgets the input. The
//! cumulative products `Qbar_t = Q^t` (resp. `Obar_t`) are materialized up
//! front; they give the closed-form marginal of the state after `t` steps
//! and the exact one-step posterior
//!
//! ```text
//! q(prev | now, start) = Q[now][prev] * Qbar_{t-1}[start][prev]
//!                        / Qbar_t[start][now]
//! ```
//!
//! which is the training target for the learned reverse process. The
//! posterior's support at the arrangement level is `{now} U swap_neighbors
//! (now)` — everything one swap away — which keeps it small even though the
//! state space is factorial.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::perm::{factorial, n_swap_pairs, rank, swap_neighbors, unrank, MAX_ARRANGED};

/// Upper bound on memory spent by one transition model's matrix stack.
///
/// `Qbar` needs `(t_max + 1)` dense `l_o! x l_o!` matrices; beyond roughly
/// `l_o = 7` that stops being desk-scale, so builds that would exceed this
/// cap fail with a capacity error instead of thrashing.
pub const MATRIX_MEMORY_CAP_BYTES: u64 = 2 * 1024 * 1024 * 1024;

/// Which corruption process a run operates at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    /// Whole-arrangement chain: corruption swaps slot pairs, candidates stay
    /// permutations of the input.
    Perm,
    /// Per-slot chain: each slot's item is independently substituted.
    Token,
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OpKind::Perm => write!(f, "perm"),
            OpKind::Token => write!(f, "token"),
        }
    }
}

/// Constant-rate noise schedule: corruption strength `beta` applied for up
/// to `t_max` steps.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    /// Per-step corruption probability, strictly inside `(0, 1)`.
    pub beta: f64,
    /// Number of forward steps the chain supports.
    pub t_max: usize,
}

impl NoiseSchedule {
    /// Validates `0 < beta < 1` and `t_max >= 1`.
    pub fn new(beta: f64, t_max: usize) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must lie strictly in (0, 1), got {beta}"
            )));
        }
        if t_max == 0 {
            return Err(Error::InvalidArgument("t_max must be at least 1".into()));
        }
        Ok(NoiseSchedule { beta, t_max })
    }
}

/// Discrete distribution over an explicit, duplicate-free support.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical<T> {
    support: Vec<T>,
    probs: Vec<f64>,
}

impl<T: PartialEq> Categorical<T> {
    /// Builds a distribution, verifying shape, non-negativity, support
    /// distinctness, and that the probabilities already sum to 1 within
    /// `1e-6` (they are then renormalized exactly).
    pub fn new(support: Vec<T>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() || support.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "support/probability length mismatch: {} vs {}",
                support.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Numerical(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        for i in 0..support.len() {
            for j in i + 1..support.len() {
                if support[i] == support[j] {
                    return Err(Error::InvalidArgument(format!(
                        "duplicate support entries at indices {i} and {j}"
                    )));
                }
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numerical(format!(
                "probabilities sum to {sum}, outside the 1e-6 normalization guard"
            )));
        }
        let probs = probs.iter().map(|p| p / sum).collect();
        Ok(Categorical { support, probs })
    }

    /// Support in construction order.
    pub fn support(&self) -> &[T] {
        &self.support
    }

    /// Probabilities aligned with [`Self::support`].
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of one outcome, if it is in the support.
    pub fn prob_of(&self, x: &T) -> Option<f64> {
        self.support
            .iter()
            .position(|s| s == x)
            .map(|i| self.probs[i])
    }

    /// Draws one outcome by inverse-CDF.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &T {
        let u: f64 = rng.random();
        &self.support[index_by_cdf(&self.probs, u)]
    }
}

/// Index of the CDF cell containing `u`; clamps to the last cell so that
/// accumulated rounding can never run off the end.
fn index_by_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Dense one-step arrangement kernel over all `l_o!` permutations.
///
/// Stand-alone so the matrix can be inspected without committing to the full
/// cumulative stack; [`PermTransitionModel::build`] uses it internally.
pub fn perm_kernel_matrix(n_arranged: usize, beta: f64) -> Result<Array2<f64>> {
    let sched = NoiseSchedule::new(beta, 1)?;
    if !(2..=MAX_ARRANGED).contains(&n_arranged) {
        return Err(Error::InvalidArgument(format!(
            "arrangement kernel needs 2 <= length <= {MAX_ARRANGED}, got {n_arranged}"
        )));
    }
    let n = factorial(n_arranged);
    let bytes = n * n * 8;
    if bytes > MATRIX_MEMORY_CAP_BYTES {
        return Err(Error::Capacity(format!(
            "dense {n}x{n} kernel needs {bytes} bytes, over the cap of {MATRIX_MEMORY_CAP_BYTES}"
        )));
    }
    let n = n as usize;
    let stay = 1.0 - sched.beta;
    let hop = sched.beta / n_swap_pairs(n_arranged) as f64;
    let mut q = Array2::zeros((n, n));
    for i in 0..n {
        q[[i, i]] = stay;
        let p = unrank(i as u64, n_arranged)?;
        for nb in swap_neighbors(&p) {
            q[[i, rank(&nb)? as usize]] = hop;
        }
    }
    Ok(q)
}

/// Dense one-step token kernel over `l_s` candidates.
pub fn token_kernel_matrix(n_candidates: usize, beta: f64) -> Result<Array2<f64>> {
    let sched = NoiseSchedule::new(beta, 1)?;
    if n_candidates < 2 {
        return Err(Error::InvalidArgument(format!(
            "token kernel needs at least 2 candidates, got {n_candidates}"
        )));
    }
    let stay = 1.0 - sched.beta;
    let hop = sched.beta / (n_candidates - 1) as f64;
    let mut o = Array2::from_elem((n_candidates, n_candidates), hop);
    for i in 0..n_candidates {
        o[[i, i]] = stay;
    }
    Ok(o)
}

/// Arrangement-level forward process with the full `Qbar` stack.
#[derive(Debug, Clone)]
pub struct PermTransitionModel {
    n_arranged: usize,
    schedule: NoiseSchedule,
    q: Array2<f64>,
    /// `qbar[t - 1]` is `Q^t`, for `t = 1..=t_max`.
    qbar: Vec<Array2<f64>>,
    /// `neighbors[r]` lists the ranks one swap away from rank `r`, ordered
    /// by the swapped slot pair `(i, j)` lexicographically.
    neighbors: Vec<Vec<u32>>,
}

impl PermTransitionModel {
    /// Builds `Q` and `Qbar_1 ..= Qbar_t_max` for arrangements of the given
    /// length.
    pub fn build(n_arranged: usize, schedule: NoiseSchedule) -> Result<Self> {
        if !(2..=MAX_ARRANGED).contains(&n_arranged) {
            return Err(Error::InvalidArgument(format!(
                "arrangement process needs 2 <= length <= {MAX_ARRANGED}, got {n_arranged}"
            )));
        }
        let n = factorial(n_arranged);
        let bytes = (schedule.t_max as u64 + 1) * n * n * 8;
        if bytes > MATRIX_MEMORY_CAP_BYTES {
            return Err(Error::Capacity(format!(
                "storing {} dense {n}x{n} matrices needs {bytes} bytes, \
                 over the cap of {MATRIX_MEMORY_CAP_BYTES}",
                schedule.t_max + 1
            )));
        }
        let n = n as usize;
        let mut neighbors = Vec::with_capacity(n);
        for i in 0..n {
            let p = unrank(i as u64, n_arranged)?;
            let nbr: Vec<u32> = swap_neighbors(&p)
                .iter()
                .map(|q| rank(q).map(|r| r as u32))
                .collect::<Result<_>>()?;
            neighbors.push(nbr);
        }
        let stay = 1.0 - schedule.beta;
        let hop = schedule.beta / n_swap_pairs(n_arranged) as f64;
        let mut q = Array2::zeros((n, n));
        for (i, nbr) in neighbors.iter().enumerate() {
            q[[i, i]] = stay;
            for &j in nbr {
                q[[i, j as usize]] = hop;
            }
        }
        // Qbar_t = Qbar_{t-1} Q. Q has 1 + C(l_o,2) non-zeros per column
        // (itself and its swap neighbors, by symmetry), so each product is
        // O(n^2 * C) instead of O(n^3).
        let mut qbar = Vec::with_capacity(schedule.t_max);
        qbar.push(q.clone());
        for _ in 1..schedule.t_max {
            let prev = qbar.last().unwrap();
            let mut next = Array2::zeros((n, n));
            for i in 0..n {
                let prow = prev.row(i);
                let prow = prow.as_slice().expect("row-major layout");
                let mut orow = next.row_mut(i);
                let orow = orow.as_slice_mut().expect("row-major layout");
                for (j, nbr) in neighbors.iter().enumerate() {
                    let mut acc = stay * prow[j];
                    for &r in nbr {
                        acc += hop * prow[r as usize];
                    }
                    orow[j] = acc;
                }
            }
            qbar.push(next);
        }
        Ok(PermTransitionModel {
            n_arranged,
            schedule,
            q,
            qbar,
            neighbors,
        })
    }

    /// Arrangement length `l_o`.
    pub fn n_arranged(&self) -> usize {
        self.n_arranged
    }

    /// Number of permutation states, `l_o!`.
    pub fn n_states(&self) -> usize {
        self.qbar[0].nrows()
    }

    /// The schedule this model was built with.
    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    /// One-step kernel `Q`.
    pub fn q(&self) -> &Array2<f64> {
        &self.q
    }

    /// Cumulative kernel `Q^t` for `1 <= t <= t_max`.
    pub fn qbar(&self, t: usize) -> Result<&Array2<f64>> {
        self.check_t(t)?;
        Ok(&self.qbar[t - 1])
    }

    /// Ranks one swap away from `r`, in swapped-pair order. This is exactly
    /// the off-diagonal support of row `r` of `Q`.
    pub fn neighbor_ranks(&self, r: u64) -> &[u32] {
        &self.neighbors[r as usize]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.schedule.t_max {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside the built horizon 1..={}",
                self.schedule.t_max
            )));
        }
        Ok(())
    }

    fn check_rank(&self, r: u64, what: &str) -> Result<()> {
        if (r as usize) < self.n_states() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{what} rank {r} out of range for {} states",
                self.n_states()
            )))
        }
    }

    /// Draws the rank of the arrangement after `t` forward steps from the
    /// arrangement with rank `start`, using the closed-form marginal
    /// (row `start` of `Qbar_t`).
    pub fn sample_forward<R: Rng + ?Sized>(&self, start: u64, t: usize, rng: &mut R) -> Result<u64> {
        self.check_t(t)?;
        self.check_rank(start, "start")?;
        let row = self.qbar[t - 1].row(start as usize);
        let u: f64 = rng.random();
        Ok(index_by_cdf(row.as_slice().expect("row-major layout"), u) as u64)
    }

    /// Exact posterior over the arrangement at step `t - 1` given the
    /// arrangement `now` at step `t` and the clean arrangement `start`.
    ///
    /// The support is `now` followed by its swap neighbors in swapped-pair
    /// order. Errors: inconsistent evidence if `now` is unreachable from
    /// `start` in `t` steps; numerical failure if the renormalization drift
    /// exceeds `1e-6`.
    pub fn posterior(&self, now: u64, start: u64, t: usize) -> Result<Categorical<u64>> {
        self.check_t(t)?;
        self.check_rank(now, "now")?;
        self.check_rank(start, "start")?;
        let denom = self.qbar[t - 1][[start as usize, now as usize]];
        if denom <= 0.0 {
            return Err(Error::InconsistentEvidence(format!(
                "arrangement {now} has zero probability {t} steps from {start}"
            )));
        }
        let mut support = Vec::with_capacity(1 + self.neighbors[now as usize].len());
        support.push(now);
        support.extend(self.neighbors[now as usize].iter().map(|&r| r as u64));
        let probs: Vec<f64> = support
            .iter()
            .map(|&r| {
                let step_back = self.q[[now as usize, r as usize]];
                let reach = if t == 1 {
                    // Qbar_0 is the identity: the chain started at `start`.
                    if r == start {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    self.qbar[t - 2][[start as usize, r as usize]]
                };
                step_back * reach / denom
            })
            .collect();
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numerical(format!(
                "arrangement posterior sums to {sum}; evidence (now={now}, start={start}, t={t}) \
                 is internally inconsistent"
            )));
        }
        Categorical::new(support, probs)
    }
}

/// Token-level forward process with the full `Obar` stack.
#[derive(Debug, Clone)]
pub struct TokenTransitionModel {
    n_candidates: usize,
    schedule: NoiseSchedule,
    o: Array2<f64>,
    /// `obar[t - 1]` is `O^t`, for `t = 1..=t_max`.
    obar: Vec<Array2<f64>>,
}

impl TokenTransitionModel {
    /// Builds `O` and `Obar_1 ..= Obar_t_max` over `l_s` candidates.
    pub fn build(n_candidates: usize, schedule: NoiseSchedule) -> Result<Self> {
        let o = token_kernel_matrix(n_candidates, schedule.beta)?;
        let mut obar = Vec::with_capacity(schedule.t_max);
        obar.push(o.clone());
        for _ in 1..schedule.t_max {
            let next = obar.last().unwrap().dot(&o);
            obar.push(next);
        }
        Ok(TokenTransitionModel {
            n_candidates,
            schedule,
            o,
            obar,
        })
    }

    /// Candidate count `l_s`.
    pub fn n_candidates(&self) -> usize {
        self.n_candidates
    }

    /// The schedule this model was built with.
    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    /// One-step kernel `O`.
    pub fn o(&self) -> &Array2<f64> {
        &self.o
    }

    /// Cumulative kernel `O^t` for `1 <= t <= t_max`.
    pub fn obar(&self, t: usize) -> Result<&Array2<f64>> {
        self.check_t(t)?;
        Ok(&self.obar[t - 1])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.schedule.t_max {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside the built horizon 1..={}",
                self.schedule.t_max
            )));
        }
        Ok(())
    }

    fn check_token(&self, z: usize, what: &str) -> Result<()> {
        if z < self.n_candidates {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{what} token {z} out of range for {} candidates",
                self.n_candidates
            )))
        }
    }

    /// Independently corrupts each slot of `start` for `t` steps; entries
    /// are candidate indices.
    pub fn sample_forward<R: Rng + ?Sized>(
        &self,
        start: &[usize],
        t: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        self.check_t(t)?;
        let bar = &self.obar[t - 1];
        start
            .iter()
            .map(|&z| {
                self.check_token(z, "start")?;
                let u: f64 = rng.random();
                Ok(index_by_cdf(bar.row(z).as_slice().expect("row-major"), u))
            })
            .collect()
    }

    /// Exact per-slot posterior over the token at step `t - 1` given token
    /// `now` at step `t` and the clean token `start`. The support is all
    /// `l_s` candidates in index order.
    pub fn posterior(&self, now: usize, start: usize, t: usize) -> Result<Categorical<usize>> {
        self.check_t(t)?;
        self.check_token(now, "now")?;
        self.check_token(start, "start")?;
        let denom = self.obar[t - 1][[start, now]];
        if denom <= 0.0 {
            return Err(Error::InconsistentEvidence(format!(
                "token {now} has zero probability {t} steps from {start}"
            )));
        }
        let probs: Vec<f64> = (0..self.n_candidates)
            .map(|i| {
                let step_back = self.o[[now, i]];
                let reach = if t == 1 {
                    if i == start {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    self.obar[t - 2][[start, i]]
                };
                step_back * reach / denom
            })
            .collect();
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numerical(format!(
                "token posterior sums to {sum}; evidence (now={now}, start={start}, t={t}) \
                 is internally inconsistent"
            )));
        }
        Categorical::new((0..self.n_candidates).collect(), probs)
    }

    /// Posterior for every slot of a sequence at once.
    pub fn posterior_seq(
        &self,
        now: &[usize],
        start: &[usize],
        t: usize,
    ) -> Result<Vec<Categorical<usize>>> {
        if now.len() != start.len() {
            return Err(Error::InvalidArgument(format!(
                "length mismatch: {} vs {}",
                now.len(),
                start.len()
            )));
        }
        now.iter()
            .zip(start)
            .map(|(&zn, &zs)| self.posterior(zn, zs, t))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::new(0.3, 5).is_ok());
        assert!(NoiseSchedule::new(0.0, 5).is_err());
        assert!(NoiseSchedule::new(1.0, 5).is_err());
        assert!(NoiseSchedule::new(f64::NAN, 5).is_err());
        assert!(NoiseSchedule::new(0.3, 0).is_err());
    }

    #[test]
    fn perm_kernel_row_for_three_slots() {
        // beta = 0.3, l_o = 3: stay 0.7, each of the three swap neighbors
        // 0.1, the two 3-cycles 0.
        let q = perm_kernel_matrix(3, 0.3).unwrap();
        let from = rank(&[0, 1, 2]).unwrap() as usize;
        let stay = 1.0 - 0.3;
        let hop = 0.3 / 3.0;
        assert_eq!(q[[from, from]], stay);
        for nb in [[1, 0, 2], [2, 1, 0], [0, 2, 1]] {
            assert_eq!(q[[from, rank(&nb).unwrap() as usize]], hop);
        }
        for cyc in [[1, 2, 0], [2, 0, 1]] {
            assert_eq!(q[[from, rank(&cyc).unwrap() as usize]], 0.0);
        }
        assert_abs_diff_eq!(q[[from, from]], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(q[[from, 1]], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn token_kernel_entries() {
        let o = token_kernel_matrix(4, 0.3).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 - 0.3 } else { 0.3 / 3.0 };
                assert_eq!(o[[i, j]], want);
            }
        }
        assert!(token_kernel_matrix(1, 0.3).is_err());
    }

    #[test]
    fn kernels_are_symmetric_doubly_stochastic() {
        for beta in [0.1, 0.3, 0.5] {
            for l in 2..=5 {
                let q = perm_kernel_matrix(l, beta).unwrap();
                let n = q.nrows();
                for i in 0..n {
                    assert_abs_diff_eq!(q.row(i).sum(), 1.0, epsilon = 1e-12);
                    assert_abs_diff_eq!(q.column(i).sum(), 1.0, epsilon = 1e-12);
                }
                assert!(max_abs_diff(&q, &q.t().to_owned()) == 0.0);

                let o = token_kernel_matrix(l + 1, beta).unwrap();
                for i in 0..l + 1 {
                    assert_abs_diff_eq!(o.row(i).sum(), 1.0, epsilon = 1e-12);
                    assert_abs_diff_eq!(o.column(i).sum(), 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn tiny_beta_approaches_identity() {
        let q = perm_kernel_matrix(3, 1e-12).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(q[[i, j]], want, epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn qbar_matches_dense_matrix_powers() {
        // Oracle: plain repeated ndarray matmul, no neighbor-list shortcut.
        for (l, beta) in [(3, 0.3), (4, 0.45)] {
            let model =
                PermTransitionModel::build(l, NoiseSchedule::new(beta, 5).unwrap()).unwrap();
            let mut power = model.q().clone();
            for t in 1..=5 {
                assert!(
                    max_abs_diff(model.qbar(t).unwrap(), &power) < 1e-12,
                    "l={l} t={t}"
                );
                power = power.dot(model.q());
            }
        }
    }

    #[test]
    fn qbar_stays_symmetric_doubly_stochastic() {
        let model = PermTransitionModel::build(4, NoiseSchedule::new(0.3, 8).unwrap()).unwrap();
        for t in 1..=8 {
            let m = model.qbar(t).unwrap();
            for i in 0..m.nrows() {
                assert_abs_diff_eq!(m.row(i).sum(), 1.0, epsilon = 1e-9);
                assert_abs_diff_eq!(m.column(i).sum(), 1.0, epsilon = 1e-9);
            }
            assert!(max_abs_diff(m, &m.t().to_owned()) < 1e-12);
        }
    }

    #[test]
    fn obar_matches_closed_form() {
        // O = aI + bJ diagonalizes to Obar_t[ii] = 1/n + (1-1/n) a^t with
        // a = 1 - beta * n/(n-1); off-diagonals share the complement.
        for (n, beta) in [(2usize, 0.5), (4, 0.3), (6, 0.1)] {
            let model =
                TokenTransitionModel::build(n, NoiseSchedule::new(beta, 12).unwrap()).unwrap();
            let a = 1.0 - beta * n as f64 / (n as f64 - 1.0);
            for t in 1..=12 {
                let bar = model.obar(t).unwrap();
                let diag = 1.0 / n as f64 + (1.0 - 1.0 / n as f64) * a.powi(t as i32);
                let off = (1.0 - diag) / (n as f64 - 1.0);
                for i in 0..n {
                    for j in 0..n {
                        let want = if i == j { diag } else { off };
                        assert_abs_diff_eq!(bar[[i, j]], want, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn two_candidates_half_beta_mixes_in_one_step() {
        let model = TokenTransitionModel::build(2, NoiseSchedule::new(0.5, 4).unwrap()).unwrap();
        for t in 1..=4 {
            let bar = model.obar(t).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    assert_abs_diff_eq!(bar[[i, j]], 0.5, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn forward_samples_match_marginal_row() {
        // 1e6 draws from the t=2 marginal; total variation against the
        // exact row stays under 0.005 (multinomial noise is ~1e-3 here).
        let model = PermTransitionModel::build(3, NoiseSchedule::new(0.3, 2).unwrap()).unwrap();
        let start = rank(&[0, 1, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n_draws = 1_000_000usize;
        let mut counts = vec![0usize; model.n_states()];
        for _ in 0..n_draws {
            counts[model.sample_forward(start, 2, &mut rng).unwrap() as usize] += 1;
        }
        let row = model.qbar(2).unwrap().row(start as usize);
        let tv: f64 = counts
            .iter()
            .zip(row.iter())
            .map(|(&c, &p)| (c as f64 / n_draws as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.005, "tv = {tv}");
    }

    #[test]
    fn tiny_beta_forward_sample_is_identity() {
        let model = PermTransitionModel::build(4, NoiseSchedule::new(1e-9, 5).unwrap()).unwrap();
        let start = rank(&[2, 0, 3, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(model.sample_forward(start, 5, &mut rng).unwrap(), start);
        }
    }

    #[test]
    fn posterior_hand_case() {
        // l_o = 3, beta = 0.3, two steps, observed = start = identity:
        // numerator 0.7^2 for staying vs 0.1^2 per neighbor, denominator
        // Qbar_2[0][0] = 0.49 + 3 * 0.01 = 0.52, so 49/52 and 1/52.
        let model = PermTransitionModel::build(3, NoiseSchedule::new(0.3, 2).unwrap()).unwrap();
        let e = rank(&[0, 1, 2]).unwrap();
        let post = model.posterior(e, e, 2).unwrap();
        assert_eq!(post.support()[0], e);
        assert_abs_diff_eq!(post.probs()[0], 49.0 / 52.0, epsilon = 1e-12);
        for k in 1..=3 {
            assert_abs_diff_eq!(post.probs()[k], 1.0 / 52.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn posterior_is_point_mass_at_step_one() {
        let model = PermTransitionModel::build(3, NoiseSchedule::new(0.3, 3).unwrap()).unwrap();
        let start = rank(&[0, 1, 2]).unwrap();
        let now = rank(&[1, 0, 2]).unwrap();
        let post = model.posterior(now, start, 1).unwrap();
        for (r, p) in post.support().iter().zip(post.probs()) {
            let want = if *r == start { 1.0 } else { 0.0 };
            assert_eq!(*p, want);
        }
    }

    #[test]
    fn posterior_rejects_unreachable_evidence() {
        // Two disjoint swaps have distance 4: impossible after one step.
        let model = PermTransitionModel::build(4, NoiseSchedule::new(0.3, 3).unwrap()).unwrap();
        let start = rank(&[0, 1, 2, 3]).unwrap();
        let now = rank(&[1, 0, 3, 2]).unwrap();
        let err = model.posterior(now, start, 1).unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::InconsistentEvidence);
        // Reachable at t = 2.
        assert!(model.posterior(now, start, 2).is_ok());
    }

    /// Brute-force Bayes over the whole permutation space, built from
    /// definitional matrix powers (independent of neighbor lists).
    fn posterior_oracle(l: usize, beta: f64, t: usize, now: usize, start: usize) -> Vec<f64> {
        let q = perm_kernel_matrix(l, beta).unwrap();
        let n = q.nrows();
        let mut bars = vec![Array2::eye(n)];
        for i in 1..=t {
            let next = bars[i - 1].dot(&q);
            bars.push(next);
        }
        let denom = bars[t][[start, now]];
        (0..n)
            .map(|r| q[[r, now]] * bars[t - 1][[start, r]] / denom)
            .collect()
    }

    #[test]
    fn posterior_matches_bayes_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for l in [3usize, 4] {
            for beta in [0.2, 0.5] {
                let model =
                    PermTransitionModel::build(l, NoiseSchedule::new(beta, 5).unwrap()).unwrap();
                for t in [2usize, 3, 5] {
                    for _ in 0..5 {
                        let start = rng.random_range(0..model.n_states()) as u64;
                        let now = model.sample_forward(start, t, &mut rng).unwrap();
                        let post = model.posterior(now, start, t).unwrap();
                        let oracle =
                            posterior_oracle(l, beta, t, now as usize, start as usize);
                        let mut covered = 0.0;
                        for (r, p) in post.support().iter().zip(post.probs()) {
                            assert_abs_diff_eq!(*p, oracle[*r as usize], epsilon = 1e-9);
                            covered += oracle[*r as usize];
                        }
                        // Nothing outside the one-swap support.
                        assert_abs_diff_eq!(covered, 1.0, epsilon = 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn token_posterior_matches_bayes_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for n in [2usize, 4, 6] {
            for beta in [0.2, 0.5] {
                let model =
                    TokenTransitionModel::build(n, NoiseSchedule::new(beta, 5).unwrap()).unwrap();
                let o = token_kernel_matrix(n, beta).unwrap();
                let mut bars = vec![Array2::eye(n)];
                for t in 1..=5 {
                    let next = bars[t - 1].dot(&o);
                    bars.push(next);
                }
                for t in [1usize, 2, 3, 5] {
                    for _ in 0..5 {
                        let start = rng.random_range(0..n);
                        let now = *model
                            .sample_forward(&[start], t, &mut rng)
                            .unwrap()
                            .first()
                            .unwrap();
                        let post = model.posterior(now, start, t).unwrap();
                        let denom = bars[t][[start, now]];
                        for i in 0..n {
                            let want = o[[i, now]] * bars[t - 1][[start, i]] / denom;
                            assert_abs_diff_eq!(post.probs()[i], want, epsilon = 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn token_marginal_forgets_start_at_large_t() {
        // Forward marginal: Obar rows flatten to uniform, so sampling at
        // large t is uniform per slot regardless of the start.
        let model = TokenTransitionModel::build(2, NoiseSchedule::new(0.5, 80).unwrap()).unwrap();
        let bar = model.obar(80).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(bar[[i, j]], 0.5, epsilon = 1e-12);
            }
        }
        // The posterior, by contrast, converges to the one-step backward
        // kernel row once Obar_{t-1} is flat.
        let model = TokenTransitionModel::build(5, NoiseSchedule::new(0.4, 80).unwrap()).unwrap();
        let post = model.posterior(3, 1, 80).unwrap();
        for (i, p) in post.probs().iter().enumerate() {
            let want = if i == 3 { 0.6 } else { 0.1 };
            assert_abs_diff_eq!(*p, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn memory_cap_rejects_oversized_builds() {
        // l_o = 8 would need ~13 GB per dense matrix.
        let err =
            PermTransitionModel::build(8, NoiseSchedule::new(0.3, 2).unwrap()).unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::Capacity);
    }

    #[test]
    fn categorical_guards() {
        assert!(Categorical::new(vec![0, 1], vec![0.5, 0.5]).is_ok());
        assert!(Categorical::new(vec![0, 0], vec![0.5, 0.5]).is_err());
        assert!(Categorical::new(vec![0, 1], vec![0.7, 0.5]).is_err());
        assert!(Categorical::new(vec![0, 1], vec![-0.1, 1.1]).is_err());
        let c = Categorical::new(vec![7, 9], vec![0.25, 0.75]).unwrap();
        assert_eq!(c.prob_of(&9), Some(0.75));
        assert_eq!(c.prob_of(&8), None);
    }

    proptest! {
        #[test]
        fn posteriors_are_proper_distributions(
            l in 3usize..=4,
            beta in 0.05f64..0.95,
            t in 1usize..=5,
            seed in 0u64..500,
        ) {
            let model = PermTransitionModel::build(l, NoiseSchedule::new(beta, 5).unwrap()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let start = rng.random_range(0..model.n_states()) as u64;
            let now = model.sample_forward(start, t, &mut rng).unwrap();
            let post = model.posterior(now, start, t).unwrap();
            let sum: f64 = post.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(post.probs().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn token_forward_keeps_tokens_in_range(
            n in 2usize..=6,
            beta in 0.05f64..0.95,
            t in 1usize..=5,
            seed in 0u64..500,
        ) {
            let model = TokenTransitionModel::build(n, NoiseSchedule::new(beta, 5).unwrap()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let start: Vec<usize> = (0..n.min(4)).collect();
            let out = model.sample_forward(&start, t, &mut rng).unwrap();
            prop_assert_eq!(out.len(), start.len());
            prop_assert!(out.iter().all(|&z| z < n));
        }
    }
}

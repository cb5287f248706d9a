//! Permutation and sequence primitives.
//!
//! The diffusion machinery works on short ordered lists. This module owns the
//! two representations everything else builds on:
//!
//! * raw *position vectors* (`&[usize]`) with lexicographic Lehmer
//!   rank/unrank, Hamming-style distance, and adjacent-by-one-swap
//!   neighborhoods;
//! * [`ItemSequence`], an arrangement of opaque item ids drawn from a shared
//!   candidate list.
//!
//! Invariants enforced here:
//!
//! * ranks are lexicographic: `[0,1,..,n-1]` has rank 0, the reversed
//!   permutation has rank `n! - 1`, and `rank` / `unrank` are mutual
//!   inverses;
//! * two distinct permutations of the same items never differ in exactly one
//!   position, so a single swap always changes the distance by exactly 2;
//! * arrangement lengths are capped at [`MAX_ARRANGED`] because downstream
//!   transition matrices are dense over all `l_o!` permutations.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on the arranged-list length `l_o`; `8! = 40320` is the largest
/// permutation space we are willing to enumerate densely.
pub const MAX_ARRANGED: usize = 8;

/// Opaque identifier of a catalog item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u64);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Shape of the reranking problem: `l_s` candidates, of which `l_o` are
/// arranged and shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpec {
    /// Number of candidate items (`l_s`).
    pub n_candidates: usize,
    /// Number of arranged output slots (`l_o`).
    pub n_arranged: usize,
}

impl SequenceSpec {
    /// Validates `1 <= l_o <= l_s` and the dense-enumeration cap `l_o <= 8`.
    pub fn new(n_candidates: usize, n_arranged: usize) -> Result<Self> {
        if n_arranged == 0 || n_arranged > n_candidates {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= arranged ({n_arranged}) <= candidates ({n_candidates})"
            )));
        }
        if n_arranged > MAX_ARRANGED {
            return Err(Error::Capacity(format!(
                "arranged length {n_arranged} exceeds the cap of {MAX_ARRANGED} \
                 (the permutation space is enumerated densely)"
            )));
        }
        Ok(SequenceSpec {
            n_candidates,
            n_arranged,
        })
    }
}

/// `n!` as `u64`. Panics if `n > 20` (beyond u64); callers stay far below.
pub fn factorial(n: usize) -> u64 {
    assert!(n <= 20, "factorial({n}) overflows u64");
    (1..=n as u64).product()
}

/// Number of unordered position pairs `C(n, 2)`.
pub fn n_swap_pairs(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

fn check_permutation(seq: &[usize]) -> Result<()> {
    let n = seq.len();
    let mut seen = [false; MAX_ARRANGED];
    if n > MAX_ARRANGED {
        return Err(Error::Capacity(format!(
            "permutation length {n} exceeds the cap of {MAX_ARRANGED}"
        )));
    }
    for &v in seq {
        if v >= n {
            return Err(Error::InvalidArgument(format!(
                "entry {v} out of range for a permutation of length {n}"
            )));
        }
        if seen[v] {
            return Err(Error::InvalidArgument(format!(
                "duplicate entry {v} in permutation"
            )));
        }
        seen[v] = true;
    }
    Ok(())
}

/// Lexicographic rank of a permutation of `0..n` via its Lehmer code.
///
/// `[0,1,2] -> 0`, `[0,2,1] -> 1`, `[2,1,0] -> 5`.
pub fn rank(seq: &[usize]) -> Result<u64> {
    check_permutation(seq)?;
    let n = seq.len();
    let mut r = 0u64;
    for i in 0..n {
        // Lehmer digit: how many entries to the right are smaller.
        let smaller_right = seq[i + 1..].iter().filter(|&&v| v < seq[i]).count() as u64;
        r += smaller_right * factorial(n - 1 - i);
    }
    Ok(r)
}

/// Permutation of `0..n` with the given lexicographic rank.
///
/// Inverse of [`rank`]; errors if `r >= n!` or `n` exceeds the cap.
pub fn unrank(r: u64, n: usize) -> Result<Vec<usize>> {
    if n > MAX_ARRANGED {
        return Err(Error::Capacity(format!(
            "permutation length {n} exceeds the cap of {MAX_ARRANGED}"
        )));
    }
    if r >= factorial(n) {
        return Err(Error::InvalidArgument(format!(
            "rank {r} out of range for length {n} (max {})",
            factorial(n) - 1
        )));
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    let mut r = r;
    for i in 0..n {
        let f = factorial(n - 1 - i);
        let idx = (r / f) as usize;
        r %= f;
        out.push(remaining.remove(idx));
    }
    Ok(out)
}

/// Number of positions at which two equal-length sequences differ.
///
/// For two permutations of the same set this is never 1: fixing all but one
/// position forces the last one.
pub fn seq_distance(a: &[usize], b: &[usize]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

/// All sequences obtained by swapping one pair of positions, ordered by the
/// swapped index pair `(i, j)`, `i < j`, lexicographically.
///
/// Returns exactly `C(len, 2)` sequences; for permutation inputs each is at
/// distance exactly 2 from the input.
pub fn swap_neighbors(seq: &[usize]) -> Vec<Vec<usize>> {
    let n = seq.len();
    let mut out = Vec::with_capacity(n_swap_pairs(n));
    for i in 0..n {
        for j in i + 1..n {
            let mut s = seq.to_vec();
            s.swap(i, j);
            out.push(s);
        }
    }
    out
}

/// An ordered arrangement of items drawn (by index) from a shared candidate
/// list.
///
/// `positions[k]` indexes into the candidate list; duplicates are legal
/// (token-level corruption produces them) but [`ItemSequence::rank_index`]
/// is only defined when the arrangement is a permutation of the first
/// `len()` candidates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ItemSequence {
    base: Arc<[ItemId]>,
    positions: Vec<usize>,
}

impl ItemSequence {
    /// Arrangement selecting `positions` out of the candidate list `base`.
    pub fn new(base: Arc<[ItemId]>, positions: Vec<usize>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("empty arrangement".into()));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= base.len()) {
            return Err(Error::InvalidArgument(format!(
                "position {p} out of range for {} candidates",
                base.len()
            )));
        }
        Ok(ItemSequence { base, positions })
    }

    /// The arrangement `[0, 1, .., n_arranged-1]`: candidates shown in
    /// candidate-list order.
    pub fn prefix(base: Arc<[ItemId]>, n_arranged: usize) -> Result<Self> {
        if n_arranged == 0 || n_arranged > base.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot arrange {n_arranged} of {} candidates",
                base.len()
            )));
        }
        Ok(ItemSequence {
            base,
            positions: (0..n_arranged).collect(),
        })
    }

    /// Convenience constructor: the items themselves are the candidate list
    /// and are shown in the given order.
    pub fn from_items(items: Vec<ItemId>) -> Result<Self> {
        let n = items.len();
        Self::prefix(items.into(), n)
    }

    /// Shared candidate list.
    pub fn base(&self) -> &Arc<[ItemId]> {
        &self.base
    }

    /// Number of arranged slots.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// True when the arrangement has zero slots (never constructible).
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Candidate-list indices in display order.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Item shown at slot `k`.
    pub fn item_at(&self, k: usize) -> ItemId {
        self.base[self.positions[k]]
    }

    /// Items in display order.
    pub fn items(&self) -> Vec<ItemId> {
        self.positions.iter().map(|&p| self.base[p]).collect()
    }

    /// True if some candidate appears in more than one slot.
    pub fn has_duplicates(&self) -> bool {
        let mut seen = vec![false; self.base.len()];
        self.positions.iter().any(|&p| std::mem::replace(&mut seen[p], true))
    }

    /// Lexicographic rank of the arrangement viewed as a permutation of the
    /// first `len()` candidates; `None` when it is not such a permutation.
    pub fn rank_index(&self) -> Option<u64> {
        let n = self.positions.len();
        if self.positions.iter().any(|&p| p >= n) {
            return None;
        }
        rank(&self.positions).ok()
    }

    /// Same candidate list, different arrangement.
    pub fn with_positions(&self, positions: Vec<usize>) -> Result<Self> {
        Self::new(Arc::clone(&self.base), positions)
    }

    /// All arrangements one position-swap away, ordered by swapped pair.
    pub fn swap_neighbors(&self) -> Vec<ItemSequence> {
        swap_neighbors(&self.positions)
            .into_iter()
            .map(|positions| ItemSequence {
                base: Arc::clone(&self.base),
                positions,
            })
            .collect()
    }
}

impl fmt::Display for ItemSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, item) in self.items().iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{item}")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: all permutations of 0..n in lexicographic order,
    /// generated recursively (no Lehmer arithmetic involved).
    fn lex_perms(n: usize) -> Vec<Vec<usize>> {
        fn go(prefix: &mut Vec<usize>, rest: &[usize], out: &mut Vec<Vec<usize>>) {
            if rest.is_empty() {
                out.push(prefix.clone());
                return;
            }
            for (i, &v) in rest.iter().enumerate() {
                let mut rest2 = rest.to_vec();
                rest2.remove(i);
                prefix.push(v);
                go(prefix, &rest2, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        go(&mut Vec::new(), &(0..n).collect::<Vec<_>>(), &mut out);
        out
    }

    #[test]
    fn rank_frozen_values() {
        assert_eq!(rank(&[0, 1, 2]).unwrap(), 0);
        assert_eq!(rank(&[0, 2, 1]).unwrap(), 1);
        assert_eq!(rank(&[2, 1, 0]).unwrap(), 5);
    }

    #[test]
    fn unrank_frozen_values() {
        assert_eq!(unrank(0, 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(unrank(2, 3).unwrap(), vec![1, 0, 2]);
        assert_eq!(unrank(5, 3).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn rank_matches_lexicographic_enumeration_up_to_6() {
        for n in 1..=6 {
            let perms = lex_perms(n);
            assert_eq!(perms.len() as u64, factorial(n));
            for (i, p) in perms.iter().enumerate() {
                assert_eq!(rank(p).unwrap(), i as u64, "perm {p:?}");
                assert_eq!(&unrank(i as u64, n).unwrap(), p);
            }
        }
    }

    #[test]
    fn rank_rejects_bad_input() {
        assert!(rank(&[0, 0, 1]).is_err());
        assert!(rank(&[0, 3, 1]).is_err());
        assert!(unrank(6, 3).is_err());
        assert!(unrank(0, 9).is_err());
    }

    #[test]
    fn distance_frozen_values() {
        assert_eq!(seq_distance(&[0, 1, 2], &[0, 2, 1]).unwrap(), 2);
        assert_eq!(seq_distance(&[0, 1, 2], &[1, 2, 0]).unwrap(), 3);
        assert_eq!(seq_distance(&[0, 1, 2], &[0, 1, 2]).unwrap(), 0);
        assert!(seq_distance(&[0, 1], &[0, 1, 2]).is_err());
    }

    #[test]
    fn swap_neighbors_of_identity_3() {
        let n = swap_neighbors(&[0, 1, 2]);
        assert_eq!(
            n,
            vec![vec![1, 0, 2], vec![2, 1, 0], vec![0, 2, 1]],
            "ordered by swapped pair (0,1), (0,2), (1,2)"
        );
    }

    #[test]
    fn swap_neighbors_counts_and_distance() {
        for n in 2..=6 {
            for r in [0u64, factorial(n) / 2, factorial(n) - 1] {
                let p = unrank(r, n).unwrap();
                let nbrs = swap_neighbors(&p);
                assert_eq!(nbrs.len(), n_swap_pairs(n));
                let mut seen = std::collections::HashSet::new();
                for q in &nbrs {
                    assert_eq!(seq_distance(&p, q).unwrap(), 2);
                    assert!(seen.insert(q.clone()), "duplicate neighbor {q:?}");
                }
            }
        }
    }

    #[test]
    fn spec_rejects_bad_shapes() {
        assert!(SequenceSpec::new(6, 6).is_ok());
        assert!(SequenceSpec::new(6, 0).is_err());
        assert!(SequenceSpec::new(4, 6).is_err());
        let err = SequenceSpec::new(12, 9).unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::Capacity);
    }

    #[test]
    fn item_sequence_basics() {
        let base: Arc<[ItemId]> = vec![ItemId(10), ItemId(20), ItemId(30), ItemId(40)].into();
        let seq = ItemSequence::new(Arc::clone(&base), vec![2, 0, 1]).unwrap();
        assert_eq!(seq.items(), vec![ItemId(30), ItemId(10), ItemId(20)]);
        assert_eq!(seq.rank_index(), Some(4)); // [2,0,1] is 5th in lex order
        assert!(!seq.has_duplicates());

        // Uses candidate 3 which is outside the first 3: no rank.
        let seq = ItemSequence::new(Arc::clone(&base), vec![3, 0, 1]).unwrap();
        assert_eq!(seq.rank_index(), None);

        // Duplicates: still a valid sequence, but no rank.
        let seq = ItemSequence::new(Arc::clone(&base), vec![1, 1, 0]).unwrap();
        assert!(seq.has_duplicates());
        assert_eq!(seq.rank_index(), None);

        assert!(ItemSequence::new(base, vec![4]).is_err());
    }

    #[test]
    fn item_sequence_swap_neighbors_share_base() {
        let seq = ItemSequence::from_items(vec![ItemId(1), ItemId(2), ItemId(3)]).unwrap();
        let nbrs = seq.swap_neighbors();
        assert_eq!(nbrs.len(), 3);
        assert_eq!(nbrs[0].items(), vec![ItemId(2), ItemId(1), ItemId(3)]);
        for n in &nbrs {
            assert!(Arc::ptr_eq(n.base(), seq.base()));
        }
    }

    proptest! {
        #[test]
        fn rank_unrank_roundtrip_7_and_8(n in 7usize..=8, r in 0u64..5040) {
            let r = r % factorial(n);
            let p = unrank(r, n).unwrap();
            prop_assert_eq!(rank(&p).unwrap(), r);
        }

        #[test]
        fn distinct_permutations_never_differ_in_one_slot(
            n in 2usize..=6,
            a in 0u64..720,
            b in 0u64..720,
        ) {
            let a = a % factorial(n);
            let b = b % factorial(n);
            let pa = unrank(a, n).unwrap();
            let pb = unrank(b, n).unwrap();
            let d = seq_distance(&pa, &pb).unwrap();
            prop_assert_ne!(d, 1);
            prop_assert_eq!(d == 0, a == b);
            // Symmetry.
            prop_assert_eq!(d, seq_distance(&pb, &pa).unwrap());
        }
    }
}

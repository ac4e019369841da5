//! Top-K n-element subsets of a descending score list.
//!
//! The frontier starts at `{0, .., n-1}` and expands by bumping any single
//! index to the next free rank. A subset's predecessor always ranks strictly
//! before it under (total desc, index tuple asc), so pops come out in exactly
//! that order and match the brute-force enumeration, ties included.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use crate::error::{Error, Result};

/// Upper bound on subsets the brute-force oracle will enumerate.
pub const BRUTE_FORCE_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSubset {
    /// Strictly increasing indices into the score list.
    pub indices: Vec<usize>,
    pub total: f64,
}

/// Binomial coefficient, saturating at `u128::MAX`.
pub fn binomial(m: usize, n: usize) -> u128 {
    if n > m {
        return 0;
    }
    let n = n.min(m - n);
    let mut acc: u128 = 1;
    for i in 0..n {
        // exact at every step: acc * (m - i) is divisible by (i + 1)
        acc = match acc.checked_mul((m - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Smallest `m` with `C(m, n) >= k`, capped at `mask_count`.
pub fn min_candidate_count(mask_count: usize, n: usize, k: usize) -> usize {
    let n = n.max(1);
    let k = k.max(1) as u128;
    let mut m = n;
    while m < mask_count && binomial(m, n) < k {
        m += 1;
    }
    m.min(mask_count)
}

fn total_of(scores: &[f64], indices: &[usize]) -> f64 {
    indices.iter().fold(0.0, |acc, &i| acc + scores[i])
}

fn rank_order(a: &ScoredSubset, b: &ScoredSubset) -> Ordering {
    b.total
        .total_cmp(&a.total)
        .then_with(|| a.indices.cmp(&b.indices))
}

struct Entry(ScoredSubset);

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // max-heap: the best-ranked subset must compare greatest
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&other.0, &self.0)
    }
}

/// The `k` best `n`-subsets of `scores` (sorted non-increasing).
pub fn top_k_subsets(scores: &[f64], n: usize, k: usize) -> Result<Vec<ScoredSubset>> {
    let len = scores.len();
    if n > len {
        return Err(Error::SubsetTooLarge { n, len });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let first: Vec<usize> = (0..n).collect();
    let mut heap = BinaryHeap::new();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    seen.insert(first.clone());
    heap.push(Entry(ScoredSubset {
        total: total_of(scores, &first),
        indices: first,
    }));

    let mut out = Vec::with_capacity(k);
    while let Some(Entry(best)) = heap.pop() {
        for j in 0..n {
            let next = best.indices[j] + 1;
            let limit = best.indices.get(j + 1).copied().unwrap_or(len);
            if next >= limit {
                continue;
            }
            let mut indices = best.indices.clone();
            indices[j] = next;
            if seen.insert(indices.clone()) {
                heap.push(Entry(ScoredSubset {
                    total: total_of(scores, &indices),
                    indices,
                }));
            }
        }
        out.push(best);
        if out.len() == k {
            break;
        }
    }
    Ok(out)
}

/// Reference enumeration of every `n`-subset, ranked and truncated to `k`.
pub fn brute_force_subsets(scores: &[f64], n: usize, k: usize) -> Result<Vec<ScoredSubset>> {
    let len = scores.len();
    if n > len {
        return Err(Error::SubsetTooLarge { n, len });
    }
    let count = binomial(len, n);
    if count > BRUTE_FORCE_CAP {
        return Err(Error::TooManyCombinations(count));
    }
    let mut all = Vec::with_capacity(count as usize);
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        all.push(ScoredSubset {
            total: total_of(scores, &idx),
            indices: idx.clone(),
        });
        // next combination in lexicographic order
        let Some(j) = (0..n).rev().find(|&j| idx[j] < len - n + j) else {
            break;
        };
        idx[j] += 1;
        for t in j + 1..n {
            idx[t] = idx[t - 1] + 1;
        }
    }
    all.sort_by(rank_order);
    all.truncate(k);
    Ok(all)
}

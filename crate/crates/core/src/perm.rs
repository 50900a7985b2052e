//! Exhaustive label permutations.

use crate::error::{Error, Result};

/// Largest label count searched exhaustively.
pub const MAX_EXHAUSTIVE: usize = 8;

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Result<Vec<Vec<usize>>> {
    if k > MAX_EXHAUSTIVE {
        return Err(Error::PermutationLimit(k));
    }
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    loop {
        out.push(current.clone());
        // Next lexicographic permutation.
        let Some(i) = (1..k).rev().find(|&i| current[i - 1] < current[i]) else {
            break;
        };
        let j = (i..k).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
    }
    Ok(out)
}

/// Permutation minimising `cost(j, perm[j])` summed over `j`; ties go to the
/// lexicographically first permutation.
pub fn best_assignment(k: usize, cost: impl Fn(usize, usize) -> f64) -> Result<Vec<usize>> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(k)? {
        let c: f64 = perm.iter().enumerate().map(|(j, &m)| cost(j, m)).sum();
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, perm));
        }
    }
    Ok(best.map(|(_, p)| p).unwrap_or_default())
}

//! Combinatorial number system over k-subsets of `0..n`, lexicographic order.

use num_bigint::BigUint;
use num_traits::{One, Zero};

use crate::error::{Error, Result};

/// Exact binomial coefficient C(n, k); zero when k > n.
pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) at every step.
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// Returns the `rank`-th k-subset of `0..n` in lexicographic order of sorted tuples.
pub fn unrank_subset(n: usize, k: usize, rank: &BigUint) -> Result<Vec<usize>> {
    let total = binomial(n, k);
    if *rank >= total {
        return Err(Error::RankOutOfRange {
            n,
            k,
            rank: rank.to_string(),
        });
    }
    let mut rank = rank.clone();
    let mut out = Vec::with_capacity(k);
    let mut candidate = 0usize;
    for slot in 0..k {
        loop {
            // subsets whose `slot`-th element is `candidate`
            let block = binomial(n - candidate - 1, k - slot - 1);
            if rank < block {
                out.push(candidate);
                candidate += 1;
                break;
            }
            rank -= block;
            candidate += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`unrank_subset`].
pub fn rank_subset(n: usize, indices: &[usize]) -> Result<BigUint> {
    validate_subset(n, indices)?;
    let k = indices.len();
    let mut rank = BigUint::zero();
    let mut start = 0usize;
    for (slot, &idx) in indices.iter().enumerate() {
        for skipped in start..idx {
            rank += binomial(n - skipped - 1, k - slot - 1);
        }
        start = idx + 1;
    }
    Ok(rank)
}

pub(crate) fn validate_subset(n: usize, indices: &[usize]) -> Result<()> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidSubset {
            n,
            reason: format!("index {bad} out of range"),
        });
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSubset {
            n,
            reason: "indices must be strictly increasing".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// All k-subsets of 0..n in lexicographic order, by brute force.
    fn enumerate(n: usize, k: usize) -> Vec<Vec<usize>> {
        fn rec(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in start..n {
                cur.push(i);
                rec(n, k, i + 1, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(n, k, 0, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn binomial_small_values() {
        assert_eq!(binomial(5, 2), BigUint::from(10u32));
        assert_eq!(binomial(7, 0), BigUint::one());
        assert_eq!(binomial(3, 4), BigUint::zero());
        assert_eq!(binomial(6, 3), BigUint::from(20u32));
    }

    #[test]
    fn unrank_examples() {
        assert_eq!(unrank_subset(5, 2, &0u32.into()).unwrap(), vec![0, 1]);
        assert_eq!(unrank_subset(5, 2, &9u32.into()).unwrap(), vec![3, 4]);
        let last = binomial(8, 3) - 1u32;
        assert_eq!(unrank_subset(8, 3, &last).unwrap(), vec![5, 6, 7]);
        assert!(matches!(
            unrank_subset(5, 2, &10u32.into()),
            Err(Error::RankOutOfRange { .. })
        ));
    }

    #[test]
    fn rank_examples_match_enumeration() {
        assert_eq!(rank_subset(5, &[0, 1]).unwrap(), BigUint::zero());
        assert_eq!(rank_subset(5, &[3, 4]).unwrap(), BigUint::from(9u32));
        let all = enumerate(6, 3);
        assert_eq!(all.len(), 20);
        let pos = all.iter().position(|s| s == &[0, 2, 5]).unwrap();
        assert_eq!(rank_subset(6, &[0, 2, 5]).unwrap(), BigUint::from(pos));
    }

    #[test]
    fn rank_rejects_bad_subsets() {
        assert!(matches!(rank_subset(5, &[1, 1]), Err(Error::InvalidSubset { .. })));
        assert!(matches!(rank_subset(5, &[3, 2]), Err(Error::InvalidSubset { .. })));
        assert!(matches!(rank_subset(5, &[0, 5]), Err(Error::InvalidSubset { .. })));
    }

    #[test]
    fn exhaustive_bijection_and_order() {
        for &(n, k) in &[(5, 2), (6, 3), (8, 3), (10, 4), (4, 0), (4, 4)] {
            let oracle = enumerate(n, k);
            assert_eq!(BigUint::from(oracle.len()), binomial(n, k));
            for (r, expected) in oracle.iter().enumerate() {
                let got = unrank_subset(n, k, &BigUint::from(r)).unwrap();
                assert_eq!(&got, expected);
                assert_eq!(rank_subset(n, &got).unwrap(), BigUint::from(r));
            }
        }
    }
}

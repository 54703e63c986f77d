use std::cmp::Ordering;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use super::{ImagingError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OtsuThreshold {
    /// Pixels `<= threshold` form the lower class.
    pub threshold: u8,
    /// True when every split has zero between-class variance (a single
    /// occupied bin). The threshold is then 0.
    pub degenerate: bool,
}

/// Threshold maximizing between-class variance of the classes `<= t` and
/// `> t`; ties go to the smallest `t`.
///
/// Scores are compared exactly. With `N` total pixels, `S` total intensity
/// and `n0`, `s0` the cumulative count and intensity up to `t`, the
/// between-class variance is proportional to `(N*s0 - n0*S)^2 / (n0*n1)`.
/// Candidates are compared by cross-multiplication in big integers, so
/// plateaus of equal variance resolve deterministically.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<OtsuThreshold> {
    let total: u128 = histogram.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return Err(ImagingError::EmptyHistogram);
    }
    let sum: u128 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();

    // (numerator, denominator) of the best score so far.
    let mut best: Option<(BigUint, BigUint, u8)> = None;
    let mut n0: u128 = 0;
    let mut s0: u128 = 0;
    for t in 0..256usize {
        n0 += histogram[t] as u128;
        s0 += t as u128 * histogram[t] as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let a = BigUint::from(total) * BigUint::from(s0);
        let b = BigUint::from(n0) * BigUint::from(sum);
        let diff = if a >= b { a - b } else { b - a };
        if diff == BigUint::ZERO {
            continue;
        }
        let num = &diff * &diff;
        let den = BigUint::from(n0) * BigUint::from(n1);
        let better = match &best {
            None => true,
            Some((bn, bd, _)) => (&num * bd).cmp(&(bn * &den)) == Ordering::Greater,
        };
        if better {
            best = Some((num, den, t as u8));
        }
    }
    Ok(match best {
        Some((_, _, t)) => OtsuThreshold {
            threshold: t,
            degenerate: false,
        },
        None => OtsuThreshold {
            threshold: 0,
            degenerate: true,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_spikes_pick_lower_edge_of_plateau() {
        let mut h = [0u64; 256];
        h[10] = 500;
        h[200] = 500;
        let r = otsu_threshold(&h).unwrap();
        assert_eq!(r, OtsuThreshold { threshold: 10, degenerate: false });
    }

    #[test]
    fn single_value_is_degenerate() {
        let mut h = [0u64; 256];
        h[128] = 4096;
        assert_eq!(
            otsu_threshold(&h).unwrap(),
            OtsuThreshold { threshold: 0, degenerate: true }
        );
    }

    #[test]
    fn empty_histogram_is_an_error() {
        assert!(matches!(otsu_threshold(&[0; 256]), Err(ImagingError::EmptyHistogram)));
    }

    #[test]
    fn extreme_counts_do_not_overflow() {
        let mut h = [0u64; 256];
        h[0] = u64::MAX / 4;
        h[255] = u64::MAX / 4;
        h[77] = 12345;
        let r = otsu_threshold(&h).unwrap();
        assert!(!r.degenerate);
    }
}

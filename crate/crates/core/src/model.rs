//! Binary symmetric channel parameters and the information constants derived from them.
//!
//! All quantities are in bits. `C` is the capacity, `C2 = log2(q/p)` is the largest
//! one-step change of a log-likelihood ratio and `C1 = (q - p) C2` is the drift of the
//! leading candidate once it is repeated on its own.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum ChannelError {
    #[error("crossover probability {0} must be greater than 0")]
    NotPositive(f64),
    #[error("crossover probability {0} must be less than 0.5")]
    NotBelowHalf(f64),
    #[error("target capacity {0} must lie strictly between 0 and 1")]
    CapacityOutOfRange(f64),
}

/// Immutable channel description with precomputed constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    p: f64,
    q: f64,
    c: f64,
    c1: f64,
    c2: f64,
}

impl ChannelParams {
    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Capacity `1 - H(p)`.
    pub fn capacity(&self) -> f64 {
        self.c
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    /// `p / q`, the factor applied to a member per disagreeing channel output.
    pub fn ratio(&self) -> f64 {
        self.p / self.q
    }
}

/// `1 + p log2 p + q log2 q` for `p` in `(0, 1)`.
pub fn capacity(p: f64) -> f64 {
    let q = 1.0 - p;
    1.0 + p * p.log2() + q * q.log2()
}

pub fn make_channel(p: f64) -> Result<ChannelParams, ChannelError> {
    if !(p > 0.0) {
        return Err(ChannelError::NotPositive(p));
    }
    if !(p < 0.5) {
        return Err(ChannelError::NotBelowHalf(p));
    }
    let q = 1.0 - p;
    let c2 = (q / p).log2();
    let params = ChannelParams { p, q, c: capacity(p), c1: (q - p) * c2, c2 };
    debug_assert!(params.c <= params.c1 && params.c1 <= params.c2);
    Ok(params)
}

/// Crossover probability whose capacity equals `target`, by bisection.
pub fn solve_p_for_capacity(target: f64) -> Result<f64, ChannelError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(ChannelError::CapacityOutOfRange(target));
    }
    let (mut lo, mut hi) = (0.0_f64, 0.5_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let c = capacity(mid);
        if (c - target).abs() <= 1e-15 {
            return Ok(mid);
        }
        // Capacity falls as p grows.
        if c > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    Ok(mid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quarter_constants() {
        let ch = make_channel(0.25).unwrap();
        assert_abs_diff_eq!(ch.c2(), 3f64.log2(), epsilon = 1e-15);
        assert_abs_diff_eq!(ch.c1(), 0.5 * 3f64.log2(), epsilon = 1e-15);
        assert_abs_diff_eq!(ch.capacity(), 0.188_721_875_540_867, epsilon = 1e-14);
    }

    #[test]
    fn rejects_out_of_range() {
        assert_eq!(make_channel(0.0), Err(ChannelError::NotPositive(0.0)));
        assert_eq!(make_channel(0.5), Err(ChannelError::NotBelowHalf(0.5)));
        assert!(make_channel(f64::NAN).is_err());
        assert!(solve_p_for_capacity(1.0).is_err());
        assert!(solve_p_for_capacity(0.0).is_err());
    }

    #[test]
    fn near_half_is_nearly_useless() {
        let ch = make_channel(0.499_999).unwrap();
        assert!(ch.capacity() < 1e-10);
    }

    #[test]
    fn round_trip_grid() {
        let mut prev = f64::INFINITY;
        for i in 1..=45 {
            let p = i as f64 / 100.0;
            let c = capacity(p);
            assert!(c < prev);
            prev = c;
            let back = solve_p_for_capacity(c).unwrap();
            assert!((back - p).abs() <= 1e-10, "p={p} back={back}");
            assert!((capacity(back) - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn figure_capacities() {
        let p50 = solve_p_for_capacity(0.5).unwrap();
        let p75 = solve_p_for_capacity(0.75).unwrap();
        // Frozen from a 40-digit bisection of the entropy form.
        assert_abs_diff_eq!(p50, 0.110_027_864_438_359_55, epsilon = 1e-12);
        assert_abs_diff_eq!(p75, 0.041_692_690_273_656_70, epsilon = 1e-12);
    }
}

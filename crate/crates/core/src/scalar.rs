//! Numeric abstraction shared by the fairness and rate-planning code.
//!
//! The allocators are written once against [`Scalar`] and instantiated with
//! `f64` in the run loop, `u64` in the data plane and `Rational64` when an
//! exact answer is needed (tests, oracles).

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Num, ToPrimitive};

/// A quantity that can be divided among a number of claimants.
pub trait Scalar: Num + Copy + PartialOrd + Debug {
    /// Splits `total` into `parts` equal shares.
    ///
    /// Returns the share and how many claimants receive one extra unit
    /// (`Self::one()`) on top of it. Types with exact division always report
    /// zero extra units; integer types report `total % parts`.
    fn split(total: Self, parts: usize) -> (Self, usize);

    /// Lossy conversion used for reporting.
    fn to_f64_lossy(self) -> f64;

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    fn split(total: Self, parts: usize) -> (Self, usize) {
        (total / parts as f64, 0)
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn split(total: Self, parts: usize) -> (Self, usize) {
        (total / parts as f32, 0)
    }

    fn to_f64_lossy(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for u64 {
    fn split(total: Self, parts: usize) -> (Self, usize) {
        let parts = parts as u64;
        (total / parts, (total % parts) as usize)
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for Ratio<i64> {
    fn split(total: Self, parts: usize) -> (Self, usize) {
        (total / Ratio::from_integer(parts as i64), 0)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

//! Reuse patterns: subsets of BTS indices packed into a bitmask.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Largest network size for which the `2^n` pattern space is materialized.
pub const MAX_BTS: usize = 16;

/// A subset of BTS indices `0..n`. Bit `i` is set iff BTS `i` shares the
/// spectrum slice described by this pattern.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReusePattern(pub u32);

impl ReusePattern {
    pub const EMPTY: ReusePattern = ReusePattern(0);

    /// The pattern containing every BTS of an `n`-cell network.
    pub fn full(n: usize) -> Self {
        debug_assert!(n <= MAX_BTS);
        ReusePattern(((1u64 << n) - 1) as u32)
    }

    pub fn singleton(i: usize) -> Self {
        ReusePattern(1 << i)
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(indices: I) -> Self {
        ReusePattern(indices.into_iter().fold(0, |m, i| m | (1 << i)))
    }

    #[inline]
    pub fn bits(self) -> u32 {
        self.0
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    #[inline]
    pub fn with(self, i: usize) -> Self {
        ReusePattern(self.0 | 1 << i)
    }

    #[inline]
    pub fn without(self, i: usize) -> Self {
        ReusePattern(self.0 & !(1 << i))
    }

    #[inline]
    pub fn intersect(self, other: Self) -> Self {
        ReusePattern(self.0 & other.0)
    }

    #[inline]
    pub fn is_subset_of(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    /// Member indices in increasing order.
    pub fn members(self) -> Members {
        Members(self.0)
    }

    /// Whether every member is a valid index of an `n`-cell network.
    pub fn fits(self, n: usize) -> bool {
        (self.0 as u64) < (1u64 << n)
    }

    /// All `2^n` patterns of an `n`-cell network, by increasing bitmask.
    pub fn all(n: usize) -> impl Iterator<Item = ReusePattern> {
        (0..(1u32 << n)).map(ReusePattern)
    }

    /// All subsets of `self` (including the empty set and `self`).
    pub fn subsets(self) -> Subsets {
        Subsets { mask: self.0, next: Some(0) }
    }
}

impl fmt::Display for ReusePattern {
    /// One-based member list, e.g. `{1,3}`, to match how cells are usually
    /// numbered in reports.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, i) in self.members().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", i + 1)?;
        }
        write!(f, "}}")
    }
}

pub struct Members(u32);

impl Iterator for Members {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.0 == 0 {
            return None;
        }
        let i = self.0.trailing_zeros() as usize;
        self.0 &= self.0 - 1;
        Some(i)
    }
}

/// Submask enumeration in increasing numeric order.
pub struct Subsets {
    mask: u32,
    next: Option<u32>,
}

impl Iterator for Subsets {
    type Item = ReusePattern;

    fn next(&mut self) -> Option<ReusePattern> {
        let cur = self.next?;
        self.next = if cur == self.mask {
            None
        } else {
            // next submask above `cur`
            Some(((cur | !self.mask).wrapping_add(1)) & self.mask)
        };
        Some(ReusePattern(cur))
    }
}

//! Bandwidth allocations over reuse patterns.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::network::EfficiencyTable;
use crate::pattern::{ReusePattern, MAX_BTS};

/// Fractions below this (of the total band) are treated as zero when counting
/// active patterns.
pub const ZERO_TOL: f64 = 1e-6;

const SUM_TOL: f64 = 1e-9;

/// A point on the `2^n`-simplex: `x[B]` is the fraction of the band shared by
/// exactly the BTSs in `B`. The empty pattern always carries zero bandwidth.
#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    n: usize,
    x: Vec<f64>,
}

impl Allocation {
    /// Validates and wraps a dense vector indexed by pattern bitmask. Tiny
    /// negative round-off (above `-1e-12`) is clamped to zero.
    pub fn new(n: usize, mut x: Vec<f64>) -> Result<Self> {
        if n == 0 || n > MAX_BTS {
            return Err(Error::InvalidAllocation(format!("unsupported network size {n}")));
        }
        if x.len() != 1 << n {
            return Err(Error::InvalidAllocation(format!("{} entries for {} patterns", x.len(), 1 << n)));
        }
        for (b, v) in x.iter_mut().enumerate() {
            if !v.is_finite() || *v < -1e-12 {
                return Err(Error::InvalidAllocation(format!("x[{b}] = {v}")));
            }
            *v = v.max(0.0);
        }
        if x[0] > 1e-12 {
            return Err(Error::InvalidAllocation(format!("empty pattern carries {}", x[0])));
        }
        x[0] = 0.0;
        let sum: f64 = x.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidAllocation(format!("fractions sum to {sum}")));
        }
        Ok(Allocation { n, x })
    }

    /// Builds from sparse weights, normalizing them to sum to one.
    pub fn from_weights(n: usize, weights: &[(ReusePattern, f64)]) -> Result<Self> {
        let mut x = vec![0.0; 1 << n];
        for &(p, w) in weights {
            if !p.fits(n) {
                return Err(Error::InvalidAllocation(format!("pattern {p} outside {n}-BTS network")));
            }
            x[p.index()] += w;
        }
        let sum: f64 = x.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidAllocation("weights sum to zero".into()));
        }
        x.iter_mut().for_each(|v| *v /= sum);
        Self::new(n, x)
    }

    /// All bandwidth on the pattern containing every BTS.
    pub fn full_reuse(n: usize) -> Self {
        let mut x = vec![0.0; 1 << n];
        x[ReusePattern::full(n).index()] = 1.0;
        Allocation { n, x }
    }

    /// Equal exclusive slices for every BTS.
    pub fn uniform_orthogonal(n: usize) -> Self {
        let mut x = vec![0.0; 1 << n];
        for i in 0..n {
            x[1 << i] = 1.0 / n as f64;
        }
        Allocation { n, x }
    }

    pub(crate) fn from_raw_unchecked(n: usize, x: Vec<f64>) -> Self {
        debug_assert_eq!(x.len(), 1 << n);
        Allocation { n, x }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, p: ReusePattern) -> f64 {
        self.x[p.index()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.x
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.x
    }

    /// Patterns carrying positive bandwidth, by increasing bitmask.
    pub fn nonzero(&self) -> impl Iterator<Item = (ReusePattern, f64)> + '_ {
        self.x.iter().enumerate().filter(|(_, v)| **v > 0.0).map(|(b, v)| (ReusePattern(b as u32), *v))
    }

    /// Total fraction of the band available to BTS `i`.
    pub fn bandwidth_of(&self, i: usize) -> f64 {
        self.nonzero().filter(|(p, _)| p.contains(i)).map(|(_, v)| v).sum()
    }

    pub fn total_variation(&self, other: &Allocation) -> f64 {
        assert_eq!(self.n, other.n, "allocations of different network sizes");
        0.5 * self.x.iter().zip(&other.x).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub fn support(&self) -> Vec<ReusePattern> {
        support_patterns(self)
    }

    pub fn check_table(&self, tbl: &EfficiencyTable) -> Result<()> {
        if tbl.n() != self.n {
            return Err(Error::Dimension(format!("allocation for {} BTSs, table for {}", self.n, tbl.n())));
        }
        Ok(())
    }
}

/// Active patterns (`x_B > ZERO_TOL`), sorted by bitmask.
pub fn support_patterns(x: &Allocation) -> Vec<ReusePattern> {
    x.nonzero().filter(|(_, v)| *v > ZERO_TOL).map(|(p, _)| p).collect()
}

#[derive(Serialize, Deserialize)]
struct AllocationRecord {
    n: usize,
    /// Pattern bitmask -> fraction; absent patterns carry zero.
    fractions: BTreeMap<u32, f64>,
}

impl Serialize for Allocation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let fractions = self.nonzero().map(|(p, v)| (p.bits(), v)).collect();
        AllocationRecord { n: self.n, fractions }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Allocation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = AllocationRecord::deserialize(d)?;
        if rec.n == 0 || rec.n > MAX_BTS {
            return Err(serde::de::Error::custom(format!("unsupported network size {}", rec.n)));
        }
        let mut x = vec![0.0; 1 << rec.n];
        for (b, v) in rec.fractions {
            let slot = x
                .get_mut(b as usize)
                .ok_or_else(|| serde::de::Error::custom(format!("pattern bitmask {b} out of range")))?;
            *slot = v;
        }
        Allocation::new(rec.n, x).map_err(serde::de::Error::custom)
    }
}

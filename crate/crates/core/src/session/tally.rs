//! Per-basis, per-intensity detection and error counts.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::model::Intensity;
use crate::scalar::Real;

/// Detections `n` and errors `m` for one basis, indexed by intensity class.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BasisCounts<T> {
    pub n: [T; 2],
    pub m: [T; 2],
}

impl<T: Copy + std::ops::Add<Output = T>> BasisCounts<T> {
    pub fn n_total(&self) -> T {
        self.n[0] + self.n[1]
    }

    pub fn m_total(&self) -> T {
        self.m[0] + self.m[1]
    }

    pub fn n_at(&self, k: Intensity) -> T {
        self.n[k.index()]
    }

    pub fn m_at(&self, k: Intensity) -> T {
        self.m[k.index()]
    }
}

/// Inputs of the one-decoy bounds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TallySet<T> {
    pub z: BasisCounts<T>,
    pub x: BasisCounts<T>,
}

impl TallySet<u64> {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("Z", &self.z), ("X", &self.x)] {
            for k in 0..2 {
                if b.m[k] > b.n[k] {
                    return domain(format!("{name} tally has more errors than detections"));
                }
            }
        }
        Ok(())
    }

    pub fn to_real<T: Real>(&self) -> TallySet<T> {
        let c = |b: &BasisCounts<u64>| BasisCounts { n: b.n.map(T::count), m: b.m.map(T::count) };
        TallySet { z: c(&self.z), x: c(&self.x) }
    }

    pub fn merge(&mut self, other: &TallySet<u64>) {
        for k in 0..2 {
            self.z.n[k] += other.z.n[k];
            self.z.m[k] += other.z.m[k];
            self.x.n[k] += other.x.n[k];
            self.x.m[k] += other.x.m[k];
        }
    }
}

/// Counts Alice can form directly from Bob's disclosures.
///
/// Only the destructive interferometer output is monitored, so an X-basis
/// "detection" is not observed directly. The side slots t0 and t2 of an
/// `|+>` frame carry together half the mean photon number that the
/// interfering slot carries over both outputs, so twice their click count
/// stands in for `n_X`; central-slot clicks are the X errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RawTallies {
    /// Alice sent Z and Bob's Z detector fired (sifted events).
    pub n_z: [u64; 2],
    /// Sifted events that turned out wrong after error correction.
    pub m_z: [u64; 2],
    /// Alice sent X and the monitored output fired in t0 or t2.
    pub x_side: [u64; 2],
    /// Alice sent X and the monitored output fired in t1.
    pub x_central: [u64; 2],
}

impl RawTallies {
    pub fn tally_set(&self) -> TallySet<u64> {
        TallySet {
            z: BasisCounts { n: self.n_z, m: self.m_z },
            x: BasisCounts {
                n: [0, 1].map(|k| (2 * self.x_side[k]).max(self.x_central[k])),
                m: self.x_central,
            },
        }
    }

    pub fn merge(&mut self, o: &RawTallies) {
        for k in 0..2 {
            self.n_z[k] += o.n_z[k];
            self.m_z[k] += o.m_z[k];
            self.x_side[k] += o.x_side[k];
            self.x_central[k] += o.x_central[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn x_detections_never_below_errors() {
        let raw = RawTallies { x_side: [3, 0], x_central: [5, 2], ..Default::default() };
        let t = raw.tally_set();
        assert_eq!(t.x.n, [6, 2]);
        t.validate().unwrap();
    }

    #[test]
    fn merge_adds() {
        let mut a = RawTallies { n_z: [1, 2], m_z: [0, 1], x_side: [4, 4], x_central: [1, 0] };
        a.merge(&a.clone());
        assert_eq!(a.n_z, [2, 4]);
        assert_eq!(a.x_side, [8, 8]);
    }
}

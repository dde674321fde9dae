//! Shared protocol types and the closed-form primitives every stage uses.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::scalar::Real;

/// Protocol-level constants.
///
/// Intensities are mean photon numbers per symbol at the channel input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct ProtocolParams<T> {
    /// Pulses per second.
    pub rep_rate: T,
    pub mu1: T,
    pub mu2: T,
    /// Probability of sending the signal intensity `mu1`.
    pub p_mu1: T,
    /// Probability that Alice prepares a Z-basis state.
    pub p_z_alice: T,
    pub eps_sec: T,
    pub eps_corr: T,
    /// Error-correction frame length in bits.
    pub ec_frame_bits: usize,
    /// Error-correction frames per privacy-amplification block.
    pub ec_frames_per_pa: usize,
}

impl<T: Real> Default for ProtocolParams<T> {
    fn default() -> Self {
        Self {
            rep_rate: T::lit(2.5e9),
            mu1: T::lit(0.5),
            mu2: T::lit(0.25),
            p_mu1: T::lit(0.5),
            p_z_alice: T::lit(0.67),
            eps_sec: T::lit(1e-9),
            eps_corr: T::lit(1e-9),
            ec_frame_bits: 8192,
            ec_frames_per_pa: 1000,
        }
    }
}

impl<T: Real> ProtocolParams<T> {
    pub fn validate(&self) -> Result<()> {
        let zero = T::zero();
        let one = T::one();
        if !(self.rep_rate > zero) {
            return domain("rep_rate must be positive");
        }
        if !(self.mu2 > zero && self.mu1 > self.mu2) {
            return domain(format!(
                "intensities must satisfy 0 < mu2 < mu1 (got mu1={:?}, mu2={:?})",
                self.mu1, self.mu2
            ));
        }
        for (name, p) in [("p_mu1", self.p_mu1), ("p_z_alice", self.p_z_alice)] {
            if !(p > zero && p < one) {
                return domain(format!("{name} must lie in (0, 1), got {p:?}"));
            }
        }
        for (name, e) in [("eps_sec", self.eps_sec), ("eps_corr", self.eps_corr)] {
            if !(e > zero && e < one) {
                return domain(format!("{name} must lie in (0, 1), got {e:?}"));
            }
        }
        if self.ec_frame_bits == 0 || self.ec_frames_per_pa == 0 {
            return domain("error-correction frame and block sizes must be non-zero");
        }
        Ok(())
    }

    /// Privacy-amplification block size in bits.
    pub fn pa_block_bits(&self) -> usize {
        self.ec_frame_bits * self.ec_frames_per_pa
    }

    pub fn p_mu2(&self) -> T {
        T::one() - self.p_mu1
    }

    pub fn p_x_alice(&self) -> T {
        T::one() - self.p_z_alice
    }

    /// `(mu, probability)` of each intensity class, signal first.
    pub fn intensities(&self) -> [(T, T); 2] {
        [(self.mu1, self.p_mu1), (self.mu2, self.p_mu2())]
    }

    pub fn mu(&self, class: Intensity) -> T {
        match class {
            Intensity::Mu1 => self.mu1,
            Intensity::Mu2 => self.mu2,
        }
    }

    pub fn p_intensity(&self, class: Intensity) -> T {
        match class {
            Intensity::Mu1 => self.p_mu1,
            Intensity::Mu2 => self.p_mu2(),
        }
    }

    pub fn p_basis(&self, basis: Basis) -> T {
        match basis {
            Basis::Z => self.p_z_alice,
            Basis::X => self.p_x_alice(),
        }
    }

    /// Probability that Alice prepares `sym` in a given frame.
    pub fn symbol_probability(&self, sym: StateSymbol) -> T {
        let bit = match sym.basis {
            Basis::Z => T::lit(0.5),
            Basis::X => T::one(),
        };
        self.p_basis(sym.basis) * bit * self.p_intensity(sym.intensity)
    }

    /// Converts every field to another scalar type.
    pub fn cast<U: Real>(&self) -> ProtocolParams<U> {
        let c = |x: T| U::lit(x.to_f64().unwrap_or(f64::NAN));
        ProtocolParams {
            rep_rate: c(self.rep_rate),
            mu1: c(self.mu1),
            mu2: c(self.mu2),
            p_mu1: c(self.p_mu1),
            p_z_alice: c(self.p_z_alice),
            eps_sec: c(self.eps_sec),
            eps_corr: c(self.eps_corr),
            ec_frame_bits: self.ec_frame_bits,
            ec_frames_per_pa: self.ec_frames_per_pa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Intensity {
    Mu1,
    Mu2,
}

impl Intensity {
    pub const ALL: [Intensity; 2] = [Intensity::Mu1, Intensity::Mu2];

    pub fn index(self) -> usize {
        match self {
            Intensity::Mu1 => 0,
            Intensity::Mu2 => 1,
        }
    }
}

/// One of the six prepared states: `|0>`, `|1>` or `|+>` at either intensity.
///
/// X-basis symbols carry no key bit; `bit` is always `false` for them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateSymbol {
    pub basis: Basis,
    pub bit: bool,
    pub intensity: Intensity,
}

impl StateSymbol {
    pub const ALL: [StateSymbol; 6] = [
        StateSymbol::z(false, Intensity::Mu1),
        StateSymbol::z(true, Intensity::Mu1),
        StateSymbol::plus(Intensity::Mu1),
        StateSymbol::z(false, Intensity::Mu2),
        StateSymbol::z(true, Intensity::Mu2),
        StateSymbol::plus(Intensity::Mu2),
    ];

    pub const fn z(bit: bool, intensity: Intensity) -> Self {
        Self { basis: Basis::Z, bit, intensity }
    }

    pub const fn plus(intensity: Intensity) -> Self {
        Self { basis: Basis::X, bit: false, intensity }
    }

    /// Dense index into [`StateSymbol::ALL`].
    pub fn index(self) -> usize {
        let within = match (self.basis, self.bit) {
            (Basis::Z, false) => 0,
            (Basis::Z, true) => 1,
            (Basis::X, _) => 2,
        };
        within + 3 * self.intensity.index()
    }

    /// Compact one-byte code used by record dumps: bit 0 = key bit,
    /// bit 1 = X basis, bit 2 = decoy intensity.
    pub fn code(self) -> u8 {
        (self.bit as u8) | ((self.basis == Basis::X) as u8) << 1 | (self.intensity.index() as u8) << 2
    }

    pub fn from_code(code: u8) -> Option<Self> {
        if code & !0b111 != 0 {
            return None;
        }
        let intensity = if code & 0b100 != 0 { Intensity::Mu2 } else { Intensity::Mu1 };
        if code & 0b10 != 0 {
            (code & 1 == 0).then_some(Self::plus(intensity))
        } else {
            Some(Self::z(code & 1 != 0, intensity))
        }
    }
}

/// Per-block outcome in the units used by the result tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecretKeyResult<T> {
    /// Block acquisition time in seconds.
    pub block_time_t: T,
    /// Sifted Z bits per second.
    pub raw_key_rate: T,
    pub qber_z: T,
    pub phi_z_upper: T,
    /// Secret bits per second, never negative.
    pub skr: T,
    pub leakage_lambda: T,
}

/// Binary Shannon entropy in bits, with `h(0) = h(1) = 0`.
pub fn binary_entropy<T: Real>(p: T) -> Result<T> {
    if !(p >= T::zero() && p <= T::one()) {
        return domain(format!("binary entropy needs p in [0, 1], got {p:?}"));
    }
    if p == T::zero() || p == T::one() {
        return Ok(T::zero());
    }
    let q = T::one() - p;
    Ok(-(p * p.log2()) - q * q.log2())
}

/// Power transmittance for a loss given in dB.
pub fn db_to_transmittance<T: Real>(attenuation_db: T) -> Result<T> {
    if !(attenuation_db >= T::zero()) {
        return domain(format!("attenuation must be >= 0 dB, got {attenuation_db:?}"));
    }
    Ok(T::lit(10.0).powf(-attenuation_db / T::lit(10.0)))
}

fn ln_factorial<T: Real>(n: u32) -> T {
    (2..=n).fold(T::zero(), |acc, i| acc + T::lit(f64::from(i)).ln())
}

/// Probability that Alice emits exactly `n` photons, averaged over the two
/// intensity classes. Evaluated in log space so large `n` does not overflow.
pub fn tau_n<T: Real>(n: u32, params: &ProtocolParams<T>) -> T {
    let ln_fact = ln_factorial::<T>(n);
    params
        .intensities()
        .iter()
        .map(|&(mu, p)| {
            if mu == T::zero() {
                return if n == 0 { p } else { T::zero() };
            }
            let log_term = -mu + T::lit(f64::from(n)) * mu.ln() - ln_fact;
            p * log_term.exp()
        })
        .fold(T::zero(), |a, b| a + b)
}

/// Fixed finite-key cost `6 log2(19/eps_sec) + log2(2/eps_corr)` in bits.
pub fn finite_key_penalty<T: Real>(params: &ProtocolParams<T>) -> T {
    T::lit(6.0) * (T::lit(19.0) / params.eps_sec).log2() + (T::lit(2.0) / params.eps_corr).log2()
}

/// Secret key rate of one privacy-amplification block.
///
/// The bracketed secret length is clamped at zero before dividing by the
/// acquisition time `t`.
pub fn skr_per_block<T: Real>(
    s0: T,
    s1: T,
    phi_z: T,
    lambda: T,
    t: T,
    params: &ProtocolParams<T>,
) -> Result<T> {
    if !(t > T::zero()) {
        return domain(format!("block time must be positive, got {t:?}"));
    }
    if !(s0 >= T::zero() && s1 >= T::zero() && lambda >= T::zero()) {
        return domain("s0, s1 and lambda must be non-negative");
    }
    if !(phi_z >= T::zero() && phi_z <= T::lit(0.5)) {
        return domain(format!("phase error must lie in [0, 0.5], got {phi_z:?}"));
    }
    let len = s0 + s1 * (T::one() - binary_entropy(phi_z)?) - lambda - finite_key_penalty(params);
    Ok(len.max(T::zero()) / t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn entropy_fixed_points() {
        assert_eq!(binary_entropy(0.5f64).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0f64).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0f64).unwrap(), 0.0);
        assert!(binary_entropy(1.5f64).is_err());
        assert!(binary_entropy(-0.1f64).is_err());
        assert!(binary_entropy(f64::NAN).is_err());
    }

    #[test]
    fn entropy_at_two_percent() {
        // 50-digit evaluation of -p log2 p - (1-p) log2 (1-p) at p = 0.02 (mpmath).
        let oracle = 0.141_440_542_541_820_65_f64;
        assert_relative_eq!(binary_entropy(0.02f64).unwrap(), oracle, max_relative = 1e-12);
        // single precision instantiation agrees to its own epsilon
        assert_relative_eq!(binary_entropy(0.02f32).unwrap(), oracle as f32, max_relative = 1e-6);
    }

    #[test]
    fn transmittance() {
        assert_eq!(db_to_transmittance(0.0f64).unwrap(), 1.0);
        assert_relative_eq!(db_to_transmittance(30.0f64).unwrap(), 1e-3, max_relative = 1e-14);
        // 10^(-3.95) to 30 digits
        assert_relative_eq!(
            db_to_transmittance(39.5f64).unwrap(),
            1.122_018_454_301_963_4e-4,
            max_relative = 1e-13
        );
        assert!(db_to_transmittance(-1.0f64).is_err());
    }

    #[test]
    fn tau_vacuum_example() {
        let p = ProtocolParams { mu1: 0.5, mu2: 0.25, p_mu1: 0.5, ..ProtocolParams::<f64>::default() };
        // 0.5 e^-0.5 + 0.5 e^-0.25, high precision
        let oracle = 0.692_665_721_392_019_1;
        assert_relative_eq!(tau_n(0, &p), oracle, max_relative = 1e-14);
    }

    #[test]
    fn tau_degenerate_intensities_is_poisson() {
        let mu = 0.4f64;
        let p = ProtocolParams { mu1: mu, mu2: mu, p_mu1: 0.3, ..ProtocolParams::<f64>::default() };
        let mut fact = 1.0;
        for n in 0..12u32 {
            if n > 0 {
                fact *= f64::from(n);
            }
            let poisson = (-mu).exp() * mu.powi(n as i32) / fact;
            assert_relative_eq!(tau_n(n, &p), poisson, max_relative = 1e-12);
        }
    }

    #[test]
    fn tau_normalises_and_vanishes_in_the_tail() {
        let p = ProtocolParams { mu1: 1.0, mu2: 0.2, p_mu1: 0.7, ..ProtocolParams::<f64>::default() };
        let mut partial = 0.0;
        let mut last_deficit = f64::INFINITY;
        for n in 0..=100u32 {
            partial += tau_n(n, &p);
            let deficit = 1.0 - partial;
            assert!(deficit <= last_deficit + 1e-16);
            last_deficit = deficit;
        }
        assert!(last_deficit.abs() < 1e-12);
        assert!(tau_n(60, &p) < 1e-80);
        assert!(tau_n(60, &p) > 0.0);
    }

    #[test]
    fn skr_clamps_and_constants() {
        let p = ProtocolParams::<f64>::default();
        assert_eq!(skr_per_block(0.0, 0.0, 0.1, 0.0, 1.0, &p).unwrap(), 0.0);
        assert!(skr_per_block(1.0, 1.0, 0.0, 0.0, 0.0, &p).is_err());
        // 6 log2(1.9e10) + log2(2e9) evaluated at 40 digits
        let penalty = 6.0 * 34.145_280_367_429_85 + 30.897_352_853_986_26;
        assert_relative_eq!(finite_key_penalty(&p), penalty, max_relative = 1e-13);
        let skr = skr_per_block(1e5, 1e6, 0.0, 0.0, 10.0, &p).unwrap();
        assert_relative_eq!(skr, (1.1e6 - penalty) / 10.0, max_relative = 1e-13);
    }

    #[test]
    fn symbol_codes_roundtrip() {
        for s in StateSymbol::ALL {
            assert_eq!(StateSymbol::from_code(s.code()), Some(s));
            assert_eq!(StateSymbol::ALL[s.index()], s);
        }
        assert_eq!(StateSymbol::from_code(0b011), None);
        let p = ProtocolParams::<f64>::default();
        let total: f64 = StateSymbol::ALL.iter().map(|&s| p.symbol_probability(s)).sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-15);
    }

    proptest! {
        #[test]
        fn entropy_symmetric_and_concave(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
            let h = |x| binary_entropy(x).unwrap();
            prop_assert!((h(p) - h(1.0 - p)).abs() < 1e-12);
            let mid = 0.5 * (p + q);
            prop_assert!(h(mid) + 1e-12 >= 0.5 * (h(p) + h(q)));
        }

        #[test]
        fn skr_monotone_in_phase_error_and_leakage(
            s0 in 0.0f64..1e5, s1 in 0.0f64..1e7,
            phi_a in 0.0f64..0.5, phi_b in 0.0f64..0.5,
            lam_a in 0.0f64..1e6, lam_b in 0.0f64..1e6,
        ) {
            let p = ProtocolParams::<f64>::default();
            let (plo, phi_hi) = if phi_a <= phi_b { (phi_a, phi_b) } else { (phi_b, phi_a) };
            let (llo, lhi) = if lam_a <= lam_b { (lam_a, lam_b) } else { (lam_b, lam_a) };
            let f = |phi, lam| skr_per_block(s0, s1, phi, lam, 3.0, &p).unwrap();
            prop_assert!(f(phi_hi, llo) <= f(plo, llo));
            prop_assert!(f(plo, lhi) <= f(plo, llo));
        }
    }
}

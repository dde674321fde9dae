//! One-decoy finite-key bounds: vacuum and single-photon detections, the
//! phase-error rate and the extractable secret length.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{binary_entropy, finite_key_penalty, tau_n, Intensity, ProtocolParams};
use crate::scalar::Real;
use crate::session::tally::{BasisCounts, TallySet};

/// Smallest error fraction fed to the sampling correction, which is
/// undefined at exactly zero.
const MIN_ERROR_FRACTION: f64 = 1e-15;

/// Deviation term `sqrt(total/2 * ln(19/eps_sec))`.
pub fn hoeffding_delta<T: Real>(total: T, eps_sec: T) -> T {
    (total / T::lit(2.0) * (T::lit(19.0) / eps_sec).ln()).sqrt()
}

/// Confidence interval `count -/+ delta`, clamped to `[0, total]`.
pub fn hoeffding_interval<T: Real>(count: T, total: T, eps_sec: T) -> Result<(T, T)> {
    if !(count >= T::zero() && count <= total) {
        return domain(format!("count {count:?} outside [0, total={total:?}]"));
    }
    if !(eps_sec > T::zero() && eps_sec < T::one()) {
        return domain("eps_sec must lie in (0, 1)");
    }
    let d = hoeffding_delta(total, eps_sec);
    Ok(((count - d).max(T::zero()), (count + d).min(total)))
}

/// Bounds derived from one basis' tallies.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BasisBounds<T> {
    pub s0_lower: T,
    pub s0_upper: T,
    pub s1_lower: T,
    /// Upper bound on single-photon errors.
    pub v1_upper: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Bounds<T> {
    pub s0_lower: T,
    pub s0_upper: T,
    pub s1_lower: T,
    /// Single-photon X errors, upper bound.
    pub v_x1_upper: T,
    /// Single-photon X detections, lower bound.
    pub s_x1_lower: T,
    pub phi_z_upper: T,
    pub secret_len: T,
}

fn check_intensities<T: Real>(params: &ProtocolParams<T>) -> Result<()> {
    if !(params.mu1 > params.mu2 && params.mu2 > T::zero()) {
        return domain("decoy bounds need mu1 > mu2 > 0");
    }
    Ok(())
}

/// Rescaled interval `(e^mu_k / p_k) (count -/+ delta)` for one intensity.
fn rescaled<T: Real>(count: T, total: T, k: Intensity, params: &ProtocolParams<T>) -> Result<(T, T)> {
    let (lo, hi) = hoeffding_interval(count, total, params.eps_sec)?;
    let f = params.mu(k).exp() / params.p_intensity(k);
    Ok((f * lo, f * hi))
}

/// Vacuum and single-photon bounds for one basis.
pub fn basis_bounds<T: Real>(c: &BasisCounts<T>, params: &ProtocolParams<T>) -> Result<BasisBounds<T>> {
    check_intensities(params)?;
    let (mu1, mu2) = (params.mu1, params.mu2);
    let zero = T::zero();
    let n_total = c.n_total();
    let m_total = c.m_total();
    for k in 0..2 {
        if !(c.m[k] >= zero && c.m[k] <= c.n[k]) {
            return domain("tallies must satisfy 0 <= m <= n");
        }
    }
    if n_total == zero {
        return Ok(BasisBounds::default());
    }
    let tau0 = tau_n(0, params);
    let tau1 = tau_n(1, params);
    let (_, n1_plus) = rescaled(c.n[0], n_total, Intensity::Mu1, params)?;
    let (n2_minus, _) = rescaled(c.n[1], n_total, Intensity::Mu2, params)?;

    let s0_upper = (T::lit(2.0) * (m_total + hoeffding_delta(m_total, params.eps_sec))).min(n_total);
    let s0_lower = (tau0 * (mu1 * n2_minus - mu2 * n1_plus) / (mu1 - mu2)).max(zero).min(s0_upper);

    let mu1_sq = mu1 * mu1;
    let mu2_sq = mu2 * mu2;
    let bracket = n2_minus - mu2_sq / mu1_sq * n1_plus - (mu1_sq - mu2_sq) / mu1_sq * s0_upper / tau0;
    let s1_lower = (tau1 * mu1 / (mu2 * (mu1 - mu2)) * bracket).max(zero).min(n_total);

    let v1_upper = if m_total > zero {
        let (_, m1_plus) = rescaled(c.m[0], m_total, Intensity::Mu1, params)?;
        let (m2_minus, _) = rescaled(c.m[1], m_total, Intensity::Mu2, params)?;
        (tau1 * (m1_plus - m2_minus) / (mu1 - mu2)).max(zero)
    } else {
        zero
    };
    Ok(BasisBounds { s0_lower, s0_upper, s1_lower, v1_upper })
}

/// Z-basis vacuum/single-photon bounds and the X-basis single-photon
/// quantities feeding the phase-error estimate.
pub fn decoy_bounds<T: Real>(tallies: &TallySet<T>, params: &ProtocolParams<T>) -> Result<Bounds<T>> {
    let z = basis_bounds(&tallies.z, params)?;
    let x = basis_bounds(&tallies.x, params)?;
    Ok(Bounds {
        s0_lower: z.s0_lower,
        s0_upper: z.s0_upper,
        s1_lower: z.s1_lower,
        v_x1_upper: x.v1_upper.min(x.s1_lower),
        s_x1_lower: x.s1_lower,
        phi_z_upper: T::zero(),
        secret_len: T::zero(),
    })
}

/// Random-sampling correction between the X and Z single-photon sets.
pub fn gamma<T: Real>(a: T, b: T, c: T, d: T) -> T {
    let b = b.max(T::lit(MIN_ERROR_FRACTION));
    let one = T::one();
    let cd = c * d;
    let var = (c + d) * (one - b) * b;
    let inner = (c + d) / (cd * (one - b) * b) * T::lit(441.0) / (a * a);
    (var / (cd * T::LN_2()) * inner.log2()).sqrt()
}

/// Upper bound on the Z-basis single-photon phase-error rate.
pub fn phase_error_upper<T: Real>(bounds: &Bounds<T>, params: &ProtocolParams<T>) -> Result<T> {
    let half = T::lit(0.5);
    let (c, d) = (bounds.s_x1_lower, bounds.s1_lower);
    if !(c > T::zero() && d > T::zero()) {
        return Err(Error::Abort("no single-photon detections can be certified".into()));
    }
    let b = bounds.v_x1_upper / c;
    if b >= half {
        return Ok(half);
    }
    let phi = b + gamma(params.eps_sec, b, c, d);
    Ok(if phi.is_nan() { half } else { phi.max(T::zero()).min(half) })
}

/// Extractable key length in bits, floored and clamped at zero.
pub fn secret_length<T: Real>(bounds: &Bounds<T>, phi_z: T, lambda: T, params: &ProtocolParams<T>) -> Result<T> {
    let h = binary_entropy(phi_z)?;
    let raw = bounds.s0_lower + bounds.s1_lower * (T::one() - h) - lambda - finite_key_penalty(params);
    Ok(raw.floor().max(T::zero()))
}

/// Full evaluation: bounds, phase error and secret length. A block without
/// certifiable single photons yields zero key rather than an error.
pub fn evaluate<T: Real>(tallies: &TallySet<T>, lambda: T, params: &ProtocolParams<T>) -> Result<Bounds<T>> {
    let mut b = decoy_bounds(tallies, params)?;
    match phase_error_upper(&b, params) {
        Ok(phi) => {
            b.phi_z_upper = phi;
            b.secret_len = secret_length(&b, phi, lambda, params)?;
        }
        Err(Error::Abort(_)) => {
            b.phi_z_upper = T::lit(0.5);
            b.secret_len = T::zero();
        }
        Err(e) => return Err(e),
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params() -> ProtocolParams<f64> {
        ProtocolParams::default()
    }

    #[test]
    fn hoeffding_examples() {
        assert_eq!(hoeffding_interval(0.0, 0.0, 1e-9).unwrap(), (0.0, 0.0));
        // sqrt(5e5 * ln(1.9e10))
        assert_relative_eq!(hoeffding_delta(1e6, 1e-9), 3_440.036_687_021_873_3, max_relative = 1e-12);
        let mut prev = 0.0;
        for total in [1.0, 10.0, 1e3, 1e5, 1e7] {
            let (lo, hi) = hoeffding_interval(0.5 * total, total, 1e-9).unwrap();
            let w = hi - lo;
            assert!(w >= prev);
            prev = w;
        }
        assert!(hoeffding_interval(5.0, 4.0, 1e-9).is_err());
    }

    #[test]
    fn zero_detections_give_zero_bounds() {
        let b = decoy_bounds(&TallySet::<f64>::default(), &params()).unwrap();
        assert_eq!(b, Bounds::default());
        assert!(matches!(phase_error_upper(&b, &params()), Err(Error::Abort(_))));
    }

    #[test]
    fn equal_intensities_rejected() {
        let mut p = params();
        p.mu2 = p.mu1;
        assert!(decoy_bounds(&TallySet::<f64>::default(), &p).is_err());
    }

    #[test]
    fn constant_terms() {
        // 6 log2(1.9e10) + log2(2e9)
        assert_relative_eq!(
            finite_key_penalty(&params()),
            6.0 * 34.145_280_367_429_85 + 30.897_352_853_986_26,
            max_relative = 1e-13
        );
        let b = Bounds { s1_lower: 1e3, ..Default::default() };
        assert_eq!(secret_length(&b, 0.0, 1e9, &params()).unwrap(), 0.0);
    }

    #[test]
    fn error_free_limit_leaves_small_gamma() {
        let b = Bounds { s1_lower: 1e9, s_x1_lower: 1e9, v_x1_upper: 0.0, ..Default::default() };
        let phi = phase_error_upper(&b, &params()).unwrap();
        assert!(phi > 0.0 && phi < 1e-5, "{phi}");
    }

    #[test]
    fn gamma_decreases_with_sample_sizes() {
        let mut prev = f64::INFINITY;
        for e in 0..=30 {
            let c = 10f64.powf(3.0 + e as f64 / 10.0);
            let g = gamma(1e-9, 0.02, c, 10.0 * c);
            assert!(g < prev);
            prev = g;
        }
    }

    /// Expected tallies of an error-free lossy channel with Poisson photon
    /// statistics: n_k = N p_k (1 - e^{-mu_k eta}).
    #[test]
    fn infinite_statistics_recovers_single_photons() {
        // A weak decoy keeps the multi-photon leakage of the bound small.
        let p = ProtocolParams { mu2: 0.02, ..params() };
        let eta = 1e-3;
        let frames = 1e10 / (0.67 * eta * 0.26);
        let mut t = TallySet::<f64>::default();
        let mut true_single = 0.0;
        for k in Intensity::ALL {
            let (mu, pk) = (p.mu(k), p.p_intensity(k));
            t.z.n[k.index()] = frames * p.p_z_alice * pk * (1.0 - (-mu * eta).exp());
            // single photon emitted and detected: e^-mu mu (eta)
            true_single += frames * p.p_z_alice * pk * (-mu).exp() * mu * eta;
        }
        let b = decoy_bounds(&t, &p).unwrap();
        assert!(b.s1_lower / true_single >= 0.99, "{}", b.s1_lower / true_single);
        assert!(b.s1_lower <= true_single * 1.0001);
    }

    fn tally(nz: [f64; 2], mz: [f64; 2], nx: [f64; 2], mx: [f64; 2]) -> TallySet<f64> {
        TallySet { z: BasisCounts { n: nz, m: mz }, x: BasisCounts { n: nx, m: mx } }
    }

    proptest! {
        #[test]
        fn clamps_hold_for_arbitrary_tallies(
            nz1 in 0u32..2_000_000, nz2 in 0u32..2_000_000, fz1 in 0.0f64..1.0, fz2 in 0.0f64..1.0,
            nx1 in 0u32..200_000, nx2 in 0u32..200_000, fx1 in 0.0f64..1.0, fx2 in 0.0f64..1.0,
            lambda in 0.0f64..1e6,
        ) {
            let nz = [nz1 as f64, nz2 as f64];
            let nx = [nx1 as f64, nx2 as f64];
            let t = tally(nz, [(nz[0] * fz1).floor(), (nz[1] * fz2).floor()], nx, [(nx[0] * fx1).floor(), (nx[1] * fx2).floor()]);
            let b = evaluate(&t, lambda, &params()).unwrap();
            prop_assert!(b.s0_lower >= 0.0 && b.s0_lower <= b.s0_upper);
            prop_assert!(b.s1_lower >= 0.0 && b.v_x1_upper >= 0.0);
            prop_assert!(b.phi_z_upper >= 0.0 && b.phi_z_upper <= 0.5);
            prop_assert!(b.secret_len >= 0.0);
        }

        #[test]
        fn more_x_errors_never_lower_phase_error(
            mx in 0u32..500, extra in 1u32..500, mx2 in 0u32..300,
        ) {
            let base = |m: f64| tally([1.2e6, 6e5], [1e4, 6e3], [4e4, 2e4], [m, mx2 as f64]);
            let p = params();
            let a = evaluate(&base(mx as f64), 0.0, &p).unwrap().phi_z_upper;
            let b = evaluate(&base((mx + extra) as f64), 0.0, &p).unwrap().phi_z_upper;
            prop_assert!(b >= a - 1e-12);
        }

        #[test]
        fn more_z_detections_never_lower_s1(nz in 1e5f64..1e7, scale in 1.0f64..3.0, extra_decoy in 0.0f64..1e6) {
            let p = params();
            let base = tally([nz, 0.5 * nz], [0.01 * nz, 0.005 * nz], [1e4, 5e3], [50.0, 30.0]);
            let a = decoy_bounds(&base, &p).unwrap().s1_lower;
            let mut scaled = base;
            scaled.z.n = base.z.n.map(|v| v * scale);
            prop_assert!(decoy_bounds(&scaled, &p).unwrap().s1_lower >= a);
            let mut more_decoy = base;
            more_decoy.z.n[1] += extra_decoy;
            prop_assert!(decoy_bounds(&more_decoy, &p).unwrap().s1_lower >= a);
        }
    }

    #[test]
    fn doubling_statistics_more_than_doubles_secret_length() {
        let p = params();
        let t = tally([1.2e6, 6e5], [6e3, 3e3], [4e4, 2e4], [200.0, 90.0]);
        let t2 = tally([2.4e6, 1.2e6], [1.2e4, 6e3], [8e4, 4e4], [400.0, 180.0]);
        let l1 = evaluate(&t, 1.5e5, &p).unwrap().secret_len;
        let l2 = evaluate(&t2, 3e5, &p).unwrap().secret_len;
        let pen = finite_key_penalty(&p);
        assert!(l1 > 0.0);
        assert!(l2 > 2.0 * l1 - pen, "{l2} vs {l1}");
        assert!(l2 + pen > 2.0 * (l1 + pen));
    }

    #[test]
    fn f32_instantiation_agrees() {
        let p64 = params();
        let p32: ProtocolParams<f32> = p64.cast();
        let t = tally([1.2e6, 6e5], [6e3, 3e3], [4e4, 2e4], [200.0, 90.0]);
        let t32 = TallySet {
            z: BasisCounts { n: t.z.n.map(|v| v as f32), m: t.z.m.map(|v| v as f32) },
            x: BasisCounts { n: t.x.n.map(|v| v as f32), m: t.x.m.map(|v| v as f32) },
        };
        let a = evaluate(&t, 1e5, &p64).unwrap();
        let b = evaluate(&t32, 1e5f32, &p32).unwrap();
        assert!((a.phi_z_upper - b.phi_z_upper as f64).abs() < 1e-4);
        assert!((a.s1_lower - b.s1_lower as f64).abs() / a.s1_lower < 1e-4);
    }
}

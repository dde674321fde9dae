//! Privacy amplification by Toeplitz hashing.
//!
//! The `l x n` matrix has `T[i][j] = seed[i - j + n - 1]`, so the output is a
//! slice of the GF(2) convolution of the seed with the key. Small inputs use
//! packed words directly; large ones use a floating-point FFT per key chunk.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{domain, Result};

/// Above this many matrix entries the FFT route is used.
const DIRECT_LIMIT: u128 = 1 << 30;
/// Largest FFT length used per key chunk.
const MAX_FFT: usize = 1 << 22;

pub fn seed_len(input_len: usize, output_len: usize) -> usize {
    if output_len == 0 {
        0
    } else {
        input_len + output_len - 1
    }
}

fn check(seed: &[u8], key: &[u8], output_len: usize) -> Result<()> {
    if output_len > key.len() {
        return domain(format!("output of {output_len} bits exceeds input of {}", key.len()));
    }
    if seed.len() != seed_len(key.len(), output_len) {
        return domain(format!(
            "seed has {} bits, {} needed",
            seed.len(),
            seed_len(key.len(), output_len)
        ));
    }
    Ok(())
}

/// Hashes `key` to `output_len` bits.
pub fn toeplitz_hash(seed: &[u8], key: &[u8], output_len: usize) -> Result<Vec<u8>> {
    check(seed, key, output_len)?;
    if output_len == 0 {
        return Ok(Vec::new());
    }
    if (output_len as u128) * (key.len() as u128) <= DIRECT_LIMIT {
        Ok(direct(seed, key, output_len))
    } else {
        Ok(via_fft(seed, key, output_len))
    }
}

fn pack(bits: impl ExactSizeIterator<Item = u8>) -> Vec<u64> {
    let mut w = vec![0u64; bits.len().div_ceil(64) + 1];
    for (i, b) in bits.enumerate() {
        w[i / 64] |= ((b & 1) as u64) << (i % 64);
    }
    w
}

/// Row `i` equals the reversed seed read from offset `l - 1 - i`.
pub fn direct(seed: &[u8], key: &[u8], output_len: usize) -> Vec<u8> {
    let n = key.len();
    let x = pack(key.iter().copied());
    let r = pack(seed.iter().rev().copied());
    let words = n.div_ceil(64);
    let tail_mask = if n.is_multiple_of(64) { u64::MAX } else { (1u64 << (n % 64)) - 1 };
    (0..output_len)
        .map(|i| {
            let o = output_len - 1 - i;
            let (q, sh) = (o / 64, o % 64);
            let mut acc = 0u64;
            for w in 0..words {
                let lo = r[q + w] >> sh;
                let hi = if sh == 0 { 0 } else { r.get(q + w + 1).copied().unwrap_or(0) << (64 - sh) };
                let mut win = lo | hi;
                if w + 1 == words {
                    win &= tail_mask;
                }
                acc ^= win & x[w];
            }
            (acc.count_ones() & 1) as u8
        })
        .collect()
}

struct Plans {
    len: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

/// Splits the key into chunks, convolves each with the seed section it
/// meets, and folds the parities together.
pub fn via_fft(seed: &[u8], key: &[u8], output_len: usize) -> Vec<u8> {
    via_fft_capped(seed, key, output_len, MAX_FFT)
}

fn via_fft_capped(seed: &[u8], key: &[u8], output_len: usize, max_fft: usize) -> Vec<u8> {
    let n = key.len();
    let l = output_len;
    let mut chunk = n;
    while chunk > 1 && (l + 2 * chunk).next_power_of_two() > max_fft.max((l + 2).next_power_of_two() * 2) {
        chunk = chunk.div_ceil(2);
    }
    let mut planner = FftPlanner::new();
    let mut plans: Option<Plans> = None;
    let mut out = vec![0u8; l];
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let fft_len = (l + 2 * len).next_power_of_two();
        if plans.as_ref().map(|p| p.len) != Some(fft_len) {
            plans = Some(Plans {
                len: fft_len,
                fwd: planner.plan_fft_forward(fft_len),
                inv: planner.plan_fft_inverse(fft_len),
            });
        }
        let p = plans.as_ref().expect("planned");
        // Seed section: seed[n - start - len + u] for u < l + len - 1.
        let base = n - start - len;
        let mut a = vec![Complex64::new(0.0, 0.0); fft_len];
        for (u, v) in a.iter_mut().take(l + len - 1).enumerate() {
            v.re = seed[base + u] as f64;
        }
        let mut b = vec![Complex64::new(0.0, 0.0); fft_len];
        for (t, v) in b.iter_mut().take(len).enumerate() {
            v.re = key[start + t] as f64;
        }
        p.fwd.process(&mut a);
        p.fwd.process(&mut b);
        for (x, y) in a.iter_mut().zip(&b) {
            *x *= y;
        }
        p.inv.process(&mut a);
        let scale = 1.0 / fft_len as f64;
        for (i, o) in out.iter_mut().enumerate() {
            let v = a[i + len - 1].re * scale;
            let c = v.round();
            debug_assert!((v - c).abs() < 0.25, "FFT rounding error {v}");
            *o ^= (c as i64 & 1) as u8;
        }
        start += len;
    }
    out
}

//! Key confirmation with a polynomial hash over GF(2^64).

/// Bits charged to the leakage budget for one confirmation.
pub const CONFIRM_BITS: u64 = 31;

/// Low part of the reduction polynomial x^64 + x^4 + x^3 + x + 1.
const POLY: u64 = 0b1_1011;

pub fn gf64_mul(a: u64, b: u64) -> u64 {
    let mut hi = 0u64;
    let mut lo = 0u64;
    for i in 0..64 {
        if b >> i & 1 == 1 {
            lo ^= a << i;
            if i > 0 {
                hi ^= a >> (64 - i);
            }
        }
    }
    // Fold the high word twice; the second fold cannot overflow again.
    for _ in 0..2 {
        let h = hi;
        hi = 0;
        for i in (0..5).filter(|i| POLY >> i & 1 == 1) {
            lo ^= h << i;
            if i > 0 {
                hi ^= h >> (64 - i);
            }
        }
    }
    lo
}

/// Evaluates the key, packed into 64-bit words and followed by its length,
/// as a polynomial at `seed`. Two distinct keys of `n` bits collide for at
/// most `n/64 + 1` seeds.
pub fn confirm_key_hash(bits: &[u8], seed: u64) -> u64 {
    let mut acc = 0u64;
    for chunk in bits.chunks(64) {
        let w = chunk.iter().enumerate().fold(0u64, |w, (i, &b)| w | ((b & 1) as u64) << i);
        acc = gf64_mul(acc ^ w, seed);
    }
    gf64_mul(acc ^ bits.len() as u64, seed)
}

/// Draws a non-zero hash seed.
pub fn confirm_seed<R: rand::Rng + ?Sized>(rng: &mut R) -> u64 {
    loop {
        let s = rng.random::<u64>();
        if s != 0 {
            return s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn field_identities() {
        assert_eq!(gf64_mul(1, 0xdead), 0xdead);
        assert_eq!(gf64_mul(2, 1 << 63), POLY);
        // x^126 reduces to x^63 + x^62 + x^6 + x^4 + x^3 + x.
        assert_eq!(gf64_mul(1 << 63, 1 << 63), 0xC000_0000_0000_005A);
    }

    #[test]
    fn single_flip_always_detected() {
        let key: Vec<u8> = (0..1000).map(|i| (i * 7 % 3 == 0) as u8).collect();
        for pos in [0, 63, 64, 500, 999] {
            let mut k2 = key.clone();
            k2[pos] ^= 1;
            for seed in [1, 2, 0x1234_5678_9abc_def0] {
                assert_ne!(confirm_key_hash(&key, seed), confirm_key_hash(&k2, seed));
            }
        }
        assert_ne!(confirm_key_hash(&key[..999], 9), confirm_key_hash(&key, 9));
    }

    proptest! {
        #[test]
        fn multiplication_commutes_and_distributes(a: u64, b: u64, c: u64) {
            prop_assert_eq!(gf64_mul(a, b), gf64_mul(b, a));
            prop_assert_eq!(gf64_mul(a, b ^ c), gf64_mul(a, b) ^ gf64_mul(a, c));
            prop_assert_eq!(gf64_mul(gf64_mul(a, b), c), gf64_mul(a, gf64_mul(b, c)));
        }
    }
}

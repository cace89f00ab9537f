use std::sync::OnceLock;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;

const MR_ROUNDS: usize = 40;

fn small_primes() -> &'static [u32] {
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        const LIMIT: usize = 2000;
        let mut sieve = vec![true; LIMIT];
        sieve[0] = false;
        sieve[1] = false;
        for i in 2..LIMIT {
            if sieve[i] {
                for j in (i * i..LIMIT).step_by(i) {
                    sieve[j] = false;
                }
            }
        }
        (0..LIMIT as u32).filter(|&i| sieve[i as usize]).collect()
    })
}

/// Uniform integer in `[0, bound)`.
pub(crate) fn random_below<R: Rng + ?Sized>(bound: &BigUint, rng: &mut R) -> BigUint {
    assert!(!bound.is_zero(), "empty range");
    let bits = bound.bits();
    let mut buf = vec![0u8; bits.div_ceil(8) as usize];
    let excess = buf.len() as u64 * 8 - bits;
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xff >> excess;
        let v = BigUint::from_bytes_be(&buf);
        if &v < bound {
            return v;
        }
    }
}

/// Miller–Rabin with random bases after trial division by small primes.
pub(crate) fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rng: &mut R) -> bool {
    if let Some(v) = n.to_u32() {
        if v < 2 {
            return false;
        }
        if small_primes().binary_search(&v).is_ok() {
            return true;
        }
    }
    for &p in small_primes() {
        if (n % p).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_1 = n - &one;
    let s = n_minus_1.trailing_zeros().expect("n > 1");
    let d = &n_minus_1 >> s;
    let three = BigUint::from(3u8);
    'witness: for _ in 0..MR_ROUNDS {
        // base in [2, n − 2]
        let a = random_below(&(n - &three), rng) + 2u8;
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&BigUint::from(2u8), n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random prime with exactly `bits` bits and the top two bits set, so the
/// product of two such primes has exactly `2·bits` bits.
pub(crate) fn random_prime<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    assert!(bits >= 8, "prime size too small");
    let top = (BigUint::one() << (bits - 1)) | (BigUint::one() << (bits - 2));
    loop {
        let mut c = random_below(&(BigUint::one() << bits), rng) | &top;
        if c.is_even() {
            c += 1u8;
        }
        if c.bits() == bits && is_probable_prime(&c, rng) {
            return c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trial_division(n: u64) -> bool {
        n >= 2 && (2..).take_while(|i| i * i <= n).all(|i| !n.is_multiple_of(i))
    }

    #[test]
    fn agrees_with_trial_division() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 0u64..20_000 {
            assert_eq!(is_probable_prime(&BigUint::from(n), &mut rng), trial_division(n), "{n}");
        }
    }

    #[test]
    fn rejects_carmichael_and_known_composites() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [561u64, 41041, 825265, 321197185, 5394826801, 232250619601, 9746347772161] {
            assert!(!is_probable_prime(&BigUint::from(n), &mut rng), "{n}");
        }
        // 2^127 − 1 is prime, 2^128 + 1 is not
        let m127 = (BigUint::one() << 127u32) - 1u8;
        assert!(is_probable_prime(&m127, &mut rng));
        assert!(!is_probable_prime(&((BigUint::one() << 128u32) + 1u8), &mut rng));
    }

    #[test]
    fn prime_has_requested_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for bits in [16u64, 64, 128] {
            let p = random_prime(bits, &mut rng);
            assert_eq!(p.bits(), bits);
            assert!(p.bit(bits - 2));
        }
    }

    #[test]
    fn random_below_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bound = BigUint::from(1000u32);
        let mut seen = [false; 1000];
        for _ in 0..20_000 {
            let v = random_below(&bound, &mut rng).to_usize().unwrap();
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}

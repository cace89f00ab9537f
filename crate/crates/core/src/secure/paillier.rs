//! Paillier cryptosystem with the `g = n + 1` simplification.
//!
//! Not constant time and without any hardening: fit for simulating the
//! protocol, not for protecting real data.

use std::fmt;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::primes::{random_below, random_prime};
use crate::error::{Error, Result};

pub const DEFAULT_KEY_BITS: u64 = 2048;
pub const MIN_KEY_BITS: u64 = 128;

/// SHA-256 of the big-endian public modulus.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyId([u8; 32]);

impl KeyId {
    fn of(n: &BigUint) -> Self {
        KeyId(Sha256::digest(n.to_bytes_be()).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Decode(format!("key fingerprint: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Decode("key fingerprint must be 32 bytes".into()))?;
        Ok(KeyId(arr))
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({}…)", &self.to_hex()[..12])
    }
}

fn check_key(expected: KeyId, found: KeyId) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::KeyMismatch {
            expected: expected.to_hex(),
            found: found.to_hex(),
        })
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PublicRepr", into = "PublicRepr")]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    id: KeyId,
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("bits", &self.bits())
            .field("id", &self.id)
            .finish()
    }
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Result<Self> {
        if n.bits() < MIN_KEY_BITS || n.is_even() {
            return Err(Error::invalid(format!("unusable modulus of {} bits", n.bits())));
        }
        Ok(Self {
            n_squared: &n * &n,
            id: KeyId::of(&n),
            n,
        })
    }

    pub fn modulus(&self) -> &BigUint {
        &self.n
    }

    /// Bit length of the plaintext modulus.
    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    pub fn id(&self) -> KeyId {
        self.id
    }

    /// Serialized ciphertexts never exceed this many bytes.
    pub fn ciphertext_bytes(&self) -> usize {
        self.n_squared.bits().div_ceil(8) as usize
    }

    fn check(&self, c: &Ciphertext) -> Result<()> {
        check_key(self.id, c.key)?;
        if c.value.is_zero() || c.value >= self.n_squared {
            return Err(Error::Decode("ciphertext outside (0, n²)".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PublicRepr {
    kind: String,
    bits: u64,
    n: String,
}

impl From<PublicKey> for PublicRepr {
    fn from(k: PublicKey) -> Self {
        PublicRepr {
            kind: "paillier-public".into(),
            bits: k.bits(),
            n: k.n.to_str_radix(16),
        }
    }
}

fn parse_hex(s: &str, what: &str) -> Result<BigUint> {
    BigUint::parse_bytes(s.as_bytes(), 16).ok_or_else(|| Error::Decode(format!("{what} is not hex")))
}

impl TryFrom<PublicRepr> for PublicKey {
    type Error = Error;

    fn try_from(r: PublicRepr) -> Result<Self> {
        if r.kind != "paillier-public" {
            return Err(Error::Decode(format!("expected a public key, found {:?}", r.kind)));
        }
        PublicKey::from_modulus(parse_hex(&r.n, "n")?)
    }
}

/// Decryption trapdoor. Holds a copy of the public key.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "SecretRepr", into = "SecretRepr")]
pub struct SecretKey {
    public: PublicKey,
    p: BigUint,
    q: BigUint,
    lambda: BigUint,
    mu: BigUint,
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretKey").field("public", &self.public).finish_non_exhaustive()
    }
}

impl SecretKey {
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self> {
        if p == q {
            return Err(Error::invalid("p and q must differ"));
        }
        let n = &p * &q;
        let one = BigUint::one();
        let phi = (&p - &one) * (&q - &one);
        if !n.gcd(&phi).is_one() {
            return Err(Error::invalid("gcd(n, φ(n)) must be 1"));
        }
        let lambda = (&p - &one).lcm(&(&q - &one));
        let public = PublicKey::from_modulus(n)?;
        let mu = lambda
            .modinv(&public.n)
            .ok_or_else(|| Error::invalid("λ is not invertible mod n"))?;
        Ok(Self {
            public,
            p,
            q,
            lambda,
            mu,
        })
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }
}

#[derive(Serialize, Deserialize)]
struct SecretRepr {
    kind: String,
    bits: u64,
    p: String,
    q: String,
}

impl From<SecretKey> for SecretRepr {
    fn from(k: SecretKey) -> Self {
        SecretRepr {
            kind: "paillier-secret".into(),
            bits: k.public.bits(),
            p: k.p.to_str_radix(16),
            q: k.q.to_str_radix(16),
        }
    }
}

impl TryFrom<SecretRepr> for SecretKey {
    type Error = Error;

    fn try_from(r: SecretRepr) -> Result<Self> {
        if r.kind != "paillier-secret" {
            return Err(Error::Decode(format!("expected a secret key, found {:?}", r.kind)));
        }
        SecretKey::from_primes(parse_hex(&r.p, "p")?, parse_hex(&r.q, "q")?)
    }
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

/// Generates a key whose modulus has exactly `bits` bits.
pub fn keygen<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> Result<KeyPair> {
    if bits < MIN_KEY_BITS || !bits.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "key size must be even and at least {MIN_KEY_BITS} bits, got {bits}"
        )));
    }
    loop {
        let p = random_prime(bits / 2, rng);
        let q = random_prime(bits / 2, rng);
        if let Ok(secret) = SecretKey::from_primes(p, q) {
            debug_assert_eq!(secret.public.bits(), bits);
            return Ok(KeyPair {
                public: secret.public.clone(),
                secret,
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    key: KeyId,
}

impl Ciphertext {
    pub(crate) fn from_parts(value: BigUint, key: KeyId) -> Self {
        Self { value, key }
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key(&self) -> KeyId {
        self.key
    }
}

/// `(1 + m·n) · rⁿ mod n²` with fresh random `r`.
pub fn encrypt<R: Rng + ?Sized>(pk: &PublicKey, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
    if m >= &pk.n {
        return Err(Error::invalid(format!(
            "plaintext of {} bits does not fit a {}-bit modulus",
            m.bits(),
            pk.bits()
        )));
    }
    let r = loop {
        let r = random_below(&pk.n, rng);
        if !r.is_zero() && r.gcd(&pk.n).is_one() {
            break r;
        }
    };
    let gm = (BigUint::one() + m * &pk.n) % &pk.n_squared;
    let value = gm * r.modpow(&pk.n, &pk.n_squared) % &pk.n_squared;
    Ok(Ciphertext { value, key: pk.id })
}

/// Ciphertext of the plaintext sum.
pub fn he_add(pk: &PublicKey, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    pk.check(a)?;
    pk.check(b)?;
    Ok(Ciphertext {
        value: &a.value * &b.value % &pk.n_squared,
        key: pk.id,
    })
}

/// Ciphertext of `k` times the plaintext.
pub fn he_scale(pk: &PublicKey, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext> {
    pk.check(c)?;
    if k.is_zero() {
        return Err(Error::invalid("scalar must be positive"));
    }
    Ok(Ciphertext {
        value: c.value.modpow(k, &pk.n_squared),
        key: pk.id,
    })
}

pub fn decrypt(sk: &SecretKey, c: &Ciphertext) -> Result<BigUint> {
    let pk = &sk.public;
    pk.check(c)?;
    let u = c.value.modpow(&sk.lambda, &pk.n_squared);
    let (l, rem) = (u - 1u8).div_rem(&pk.n);
    if !rem.is_zero() {
        return Err(Error::Decode("ciphertext is not a valid encryption under this key".into()));
    }
    Ok(l * &sk.mu % &pk.n)
}

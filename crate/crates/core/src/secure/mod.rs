//! Aggregation of client weights under additively homomorphic encryption.
//!
//! Each client encodes its weights as signed fixed-point integers, packs
//! several into one plaintext and encrypts the blocks. The server raises each
//! block to the client's sample count `n_k` and multiplies blocks across
//! clients, which sums `n_k · slot` inside every slot without decrypting.
//! Only the key holder decrypts, unpacks and divides by `N · 2^frac_bits`.
//!
//! The Paillier implementation here is for protocol simulation only. It is
//! not constant time, has no side-channel or chosen-ciphertext hardening and
//! must not be used to protect real data.

mod codec;
mod paillier;
mod primes;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::NormalizationMode;
use crate::container::{frame_len, read_frame, write_frame};
use crate::error::{Error, ParseError, Result};
use crate::fed::ClientUpdate;
use crate::solver::BlWeights;

pub use codec::{
    decode_slots, encode_weights, pack_slots, unpack_slots, FixedPointCodec, Layout, DEFAULT_FRAC_BITS,
    DEFAULT_INT_BITS, MAX_SLOT_BITS,
};
pub use paillier::{
    decrypt, encrypt, he_add, he_scale, keygen, Ciphertext, KeyId, KeyPair, PublicKey, SecretKey, DEFAULT_KEY_BITS,
    MIN_KEY_BITS,
};

pub const FDBE_MAGIC: &[u8; 4] = b"FDBE";
pub const FDBE_VERSION: u16 = 1;

/// Non-secret metadata needed to rebuild [`BlWeights`] after decryption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightMeta {
    pub lambda: f64,
    pub normalization_mode: NormalizationMode,
    #[serde(default)]
    pub bias: bool,
}

impl WeightMeta {
    fn of(w: &BlWeights) -> Self {
        Self {
            lambda: w.lambda(),
            normalization_mode: w.normalization_mode(),
            bias: w.has_bias(),
        }
    }

    fn build(&self, layout: &Layout, values: Vec<f64>) -> Result<BlWeights> {
        let m = DMatrix::from_row_slice(layout.rows, layout.cols, &values);
        BlWeights::with_bias(m, self.lambda, self.normalization_mode, self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedUpdate {
    pub client_id: String,
    pub n_k: u64,
    pub layout: Layout,
    pub model: WeightMeta,
    pub key: KeyId,
    pub ciphertexts: Vec<Ciphertext>,
}

/// Encodes, packs and encrypts one client's upload.
pub fn encrypt_update<R: Rng + ?Sized>(
    pk: &PublicKey,
    update: &ClientUpdate,
    codec: &FixedPointCodec,
    rng: &mut R,
) -> Result<EncryptedUpdate> {
    let w = update.weights();
    let layout = Layout::new(*codec, w.dim(), w.num_classes(), pk.bits())?;
    let blocks = pack_slots(&encode_weights(w, codec)?, &layout)?;
    let ciphertexts = blocks
        .iter()
        .map(|b| encrypt(pk, b, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncryptedUpdate {
        client_id: update.client_id().to_owned(),
        n_k: update.n_k(),
        layout,
        model: WeightMeta::of(w),
        key: pk.id(),
        ciphertexts,
    })
}

/// Key-holder view of a single update (no `n_k` scaling).
pub fn decrypt_update(sk: &SecretKey, update: &EncryptedUpdate) -> Result<BlWeights> {
    let slots = decrypt_blocks(sk, &update.ciphertexts, &update.layout, 1)?;
    update.model.build(&update.layout, decode_slots(&slots, &update.layout.codec, 1))
}

fn decrypt_blocks(sk: &SecretKey, cts: &[Ciphertext], layout: &Layout, additions: u64) -> Result<Vec<i128>> {
    let blocks = cts.iter().map(|c| decrypt(sk, c)).collect::<Result<Vec<BigUint>>>()?;
    unpack_slots(&blocks, layout, additions)
}

/// Proof that a layout can absorb a given total weight. The only way to
/// obtain an [`Accumulator`].
#[derive(Debug)]
pub struct CapacityGrant {
    layout: Layout,
    key: KeyId,
    budget: u64,
}

impl CapacityGrant {
    /// Checks `total_n` against the guard bits and the block width against
    /// the key.
    pub fn admit(pk: &PublicKey, layout: &Layout, total_n: u64) -> Result<Self> {
        if total_n > layout.codec.capacity() {
            return Err(Error::Overflow(format!(
                "total weight {total_n} exceeds slot capacity {} ({} guard bits)",
                layout.codec.capacity(),
                layout.codec.guard_bits
            )));
        }
        if layout.block_bits() >= pk.bits() {
            return Err(Error::Overflow(format!(
                "{}-bit blocks do not fit a {}-bit key",
                layout.block_bits(),
                pk.bits()
            )));
        }
        Ok(Self {
            layout: *layout,
            key: pk.id(),
            budget: total_n,
        })
    }
}

/// Running homomorphic weighted sum. Every addition is charged against the
/// grant, so the guard bits cannot be exhausted.
pub struct Accumulator<'a> {
    pk: &'a PublicKey,
    grant: CapacityGrant,
    blocks: Option<Vec<Ciphertext>>,
    model: Option<WeightMeta>,
    total_n: u64,
    contributors: Vec<(String, u64)>,
}

impl<'a> Accumulator<'a> {
    pub fn new(pk: &'a PublicKey, grant: CapacityGrant) -> Result<Self> {
        if grant.key != pk.id() {
            return Err(Error::KeyMismatch {
                expected: pk.id().to_hex(),
                found: grant.key.to_hex(),
            });
        }
        Ok(Self {
            pk,
            grant,
            blocks: None,
            model: None,
            total_n: 0,
            contributors: Vec::new(),
        })
    }

    pub fn add(&mut self, u: &EncryptedUpdate) -> Result<()> {
        if u.layout != self.grant.layout {
            return Err(Error::incompatible(format!("client {} uses a different layout", u.client_id)));
        }
        if u.key != self.pk.id() {
            return Err(Error::KeyMismatch {
                expected: self.pk.id().to_hex(),
                found: u.key.to_hex(),
            });
        }
        if u.ciphertexts.len() != u.layout.num_blocks() {
            return Err(Error::incompatible(format!(
                "client {} sent {} blocks, layout needs {}",
                u.client_id,
                u.ciphertexts.len(),
                u.layout.num_blocks()
            )));
        }
        if u.n_k == 0 || u.n_k > self.grant.budget {
            return Err(Error::Overflow(format!(
                "client {} weight {} exceeds remaining capacity {}",
                u.client_id, u.n_k, self.grant.budget
            )));
        }
        match self.model {
            Some(m) if m != u.model => {
                return Err(Error::incompatible(format!("client {} model metadata differs", u.client_id)))
            }
            _ => self.model = Some(u.model),
        }
        self.grant.budget -= u.n_k;

        let k = BigUint::from(u.n_k);
        let scaled = u
            .ciphertexts
            .iter()
            .map(|c| he_scale(self.pk, c, &k))
            .collect::<Result<Vec<_>>>()?;
        self.blocks = Some(match self.blocks.take() {
            None => scaled,
            Some(acc) => acc
                .iter()
                .zip(&scaled)
                .map(|(a, b)| he_add(self.pk, a, b))
                .collect::<Result<Vec<_>>>()?,
        });
        self.total_n += u.n_k;
        self.contributors.push((u.client_id.clone(), u.n_k));
        Ok(())
    }

    pub fn finish(self) -> Result<EncryptedAggregate> {
        let ciphertexts = self
            .blocks
            .ok_or_else(|| Error::invalid("no updates were accumulated"))?;
        Ok(EncryptedAggregate {
            layout: self.grant.layout,
            model: self.model.expect("set with blocks"),
            key: self.pk.id(),
            ciphertexts,
            total_n: self.total_n,
            contributors: self.contributors,
        })
    }
}

/// Server-side result: still encrypted.
#[derive(Debug, Clone)]
pub struct EncryptedAggregate {
    pub layout: Layout,
    pub model: WeightMeta,
    pub key: KeyId,
    pub ciphertexts: Vec<Ciphertext>,
    pub total_n: u64,
    pub contributors: Vec<(String, u64)>,
}

/// Homomorphic `Σ n_k · W_k`, reduced in sorted `client_id` order. Layout,
/// key and capacity are validated before any ciphertext is touched.
pub fn encrypted_aggregate(updates: &[EncryptedUpdate], pk: &PublicKey) -> Result<EncryptedAggregate> {
    let first = updates
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate an empty set of updates"))?;
    let mut order: Vec<&EncryptedUpdate> = updates.iter().collect();
    order.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    let mut seen = HashSet::new();
    let mut total_n = 0u64;
    for u in &order {
        if !seen.insert(u.client_id.as_str()) {
            return Err(Error::invalid(format!("duplicate client id {}", u.client_id)));
        }
        if u.layout != first.layout || u.model != first.model {
            return Err(Error::incompatible(format!("client {} uses a different layout", u.client_id)));
        }
        if u.key != pk.id() {
            return Err(Error::KeyMismatch {
                expected: pk.id().to_hex(),
                found: u.key.to_hex(),
            });
        }
        total_n = total_n
            .checked_add(u.n_k)
            .ok_or_else(|| Error::Overflow("total sample count overflows u64".into()))?;
    }
    let grant = CapacityGrant::admit(pk, &first.layout, total_n)?;
    let mut acc = Accumulator::new(pk, grant)?;
    for u in order {
        acc.add(u)?;
    }
    acc.finish()
}

/// Key-holder step: decrypt, unpack and divide by `N · 2^frac_bits`.
pub fn decrypt_aggregate(sk: &SecretKey, agg: &EncryptedAggregate) -> Result<BlWeights> {
    let slots = decrypt_blocks(sk, &agg.ciphertexts, &agg.layout, agg.total_n)?;
    agg.model.build(&agg.layout, decode_slots(&slots, &agg.layout.codec, agg.total_n))
}

/// Result of simulating a whole encrypted round in one process.
#[derive(Debug, Clone)]
pub struct EncryptedRound {
    pub weights: BlWeights,
    pub codec: FixedPointCodec,
    pub total_n: u64,
    /// Serialized `FDBE` size of each client's upload.
    pub upload_bytes: BTreeMap<String, u64>,
    pub blocks_per_client: usize,
}

/// Clients encrypt under `keys.public`, the server aggregates blindly and
/// the key holder decrypts.
///
/// The codec's integer width is sized from the largest weight across all
/// clients; a deployment would fix it in advance with the rest of the model
/// configuration.
pub fn federate_encrypted<R: Rng + ?Sized>(
    updates: &[ClientUpdate],
    keys: &KeyPair,
    frac_bits: u32,
    rng: &mut R,
) -> Result<EncryptedRound> {
    let max_abs = updates
        .iter()
        .flat_map(|u| u.weights().values().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let total_n: u64 = updates.iter().map(ClientUpdate::n_k).sum();
    let codec = FixedPointCodec::covering(frac_bits, max_abs, total_n)?;
    let enc = updates
        .iter()
        .map(|u| encrypt_update(&keys.public, u, &codec, rng))
        .collect::<Result<Vec<_>>>()?;
    let upload_bytes = enc
        .iter()
        .map(|e| Ok((e.client_id.clone(), fdbe_len(e)? as u64)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let agg = encrypted_aggregate(&enc, &keys.public)?;
    Ok(EncryptedRound {
        weights: decrypt_aggregate(&keys.secret, &agg)?,
        codec,
        total_n: agg.total_n,
        upload_bytes,
        blocks_per_client: agg.layout.num_blocks(),
    })
}

#[derive(Serialize, Deserialize)]
struct FdbeHeader {
    client_id: String,
    n_k: u64,
    layout: Layout,
    model: WeightMeta,
    key_fingerprint: String,
}

fn fdbe_header(u: &EncryptedUpdate) -> FdbeHeader {
    FdbeHeader {
        client_id: u.client_id.clone(),
        n_k: u.n_k,
        layout: u.layout,
        model: u.model,
        key_fingerprint: u.key.to_hex(),
    }
}

/// `"FDBE" | u16 version | u32 header length | JSON header | per block:
/// u32 length, big-endian ciphertext`.
pub fn encode_fdbe(u: &EncryptedUpdate) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_frame(&mut out, FDBE_MAGIC, FDBE_VERSION, &fdbe_header(u))?;
    for c in &u.ciphertexts {
        let bytes = c.value().to_bytes_be();
        out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

/// Serialized size, i.e. the encrypted upload in bytes.
pub fn fdbe_len(u: &EncryptedUpdate) -> Result<usize> {
    let body: usize = u.ciphertexts.iter().map(|c| 4 + c.value().to_bytes_be().len()).sum();
    Ok(frame_len(&fdbe_header(u))? + body)
}

pub fn decode_fdbe(bytes: &[u8]) -> Result<EncryptedUpdate> {
    let (h, mut cur): (FdbeHeader, _) = read_frame(bytes, FDBE_MAGIC, FDBE_VERSION)?;
    let key = KeyId::from_hex(&h.key_fingerprint).map_err(|e| ParseError::Header(e.to_string()))?;
    let spb = h.layout.slots_per_block;
    if spb == 0 || h.layout.rows == 0 || h.layout.cols == 0 {
        return Err(ParseError::Header("degenerate layout".into()).into());
    }
    let blocks = h.layout.num_blocks();
    let mut ciphertexts = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let len = cur.u32("ciphertext length")? as usize;
        let raw = cur.take(len, "ciphertext")?;
        ciphertexts.push(Ciphertext::from_parts(BigUint::from_bytes_be(raw), key));
    }
    cur.finish()?;
    Ok(EncryptedUpdate {
        client_id: h.client_id,
        n_k: h.n_k,
        layout: h.layout,
        model: h.model,
        key,
        ciphertexts,
    })
}

pub fn write_fdbe(u: &EncryptedUpdate, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_fdbe(u)?)?;
    Ok(())
}

pub fn read_fdbe(path: impl AsRef<Path>) -> Result<EncryptedUpdate> {
    decode_fdbe(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fed::aggregate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn kp() -> &'static KeyPair {
        static K: OnceLock<KeyPair> = OnceLock::new();
        K.get_or_init(|| keygen(512, &mut ChaCha8Rng::seed_from_u64(42)).unwrap())
    }

    fn update(id: &str, n: u64, rows: usize, cols: usize, seed: u64) -> ClientUpdate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-3.0..3.0));
        ClientUpdate::new(id, n, BlWeights::new(m, 1e-6, NormalizationMode::L2).unwrap()).unwrap()
    }

    #[test]
    fn single_client_roundtrip() {
        let kp = kp();
        let codec = FixedPointCodec::for_population(32, 4, 1).unwrap();
        let u = update("a", 1, 5, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = encrypt_update(&kp.public, &u, &codec, &mut rng).unwrap();
        assert_eq!(e.layout.total_slots(), 15);
        assert_eq!(e.ciphertexts.len(), e.layout.num_blocks());
        let agg = encrypted_aggregate(std::slice::from_ref(&e), &kp.public).unwrap();
        for w in [decrypt_aggregate(&kp.secret, &agg).unwrap(), decrypt_update(&kp.secret, &e).unwrap()] {
            let err = (w.values() - u.weights().values()).abs().max();
            assert!(err <= 2f64.powi(-32), "{err}");
        }
    }

    #[test]
    fn matches_plaintext_aggregate() {
        let kp = kp();
        let ups = vec![
            update("c", 300, 8, 4, 2),
            update("a", 120, 8, 4, 3),
            update("b", 7, 8, 4, 4),
        ];
        let codec = FixedPointCodec::for_population(32, 3, 427).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc: Vec<_> = ups
            .iter()
            .map(|u| encrypt_update(&kp.public, u, &codec, &mut rng).unwrap())
            .collect();
        let agg = encrypted_aggregate(&enc, &kp.public).unwrap();
        assert_eq!(agg.total_n, 427);
        let w = decrypt_aggregate(&kp.secret, &agg).unwrap();
        let plain = aggregate(&ups).unwrap();
        let err = (w.values() - plain.weights.values()).abs().max();
        assert!(err <= 2f64.powi(-32) * 2.0, "{err}");
    }

    #[test]
    fn would_overflow_layout_is_rejected_before_any_op() {
        let kp = kp();
        let codec = FixedPointCodec::new(32, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc: Vec<_> = [("a", 3), ("b", 2)]
            .iter()
            .enumerate()
            .map(|(i, (id, n))| encrypt_update(&kp.public, &update(id, *n, 2, 2, i as u64), &codec, &mut rng).unwrap())
            .collect();
        assert!(matches!(encrypted_aggregate(&enc, &kp.public), Err(Error::Overflow(_))));
        assert!(matches!(CapacityGrant::admit(&kp.public, &enc[0].layout, 5), Err(Error::Overflow(_))));

        // a grant for less than the real total stops the accumulator itself
        let grant = CapacityGrant::admit(&kp.public, &enc[0].layout, 4).unwrap();
        let mut acc = Accumulator::new(&kp.public, grant).unwrap();
        acc.add(&enc[0]).unwrap();
        assert!(matches!(acc.add(&enc[1]), Err(Error::Overflow(_))));
    }

    #[test]
    fn rejects_mixed_inputs() {
        let kp = kp();
        let other = keygen(512, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
        let codec = FixedPointCodec::for_population(32, 4, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = encrypt_update(&kp.public, &update("a", 1, 2, 2, 1), &codec, &mut rng).unwrap();
        let b = encrypt_update(&other.public, &update("b", 1, 2, 2, 2), &codec, &mut rng).unwrap();
        assert!(matches!(encrypted_aggregate(&[a.clone(), b], &kp.public), Err(Error::KeyMismatch { .. })));
        let c = encrypt_update(&kp.public, &update("c", 1, 2, 3, 3), &codec, &mut rng).unwrap();
        assert!(matches!(encrypted_aggregate(&[a.clone(), c], &kp.public), Err(Error::Incompatible(_))));
        assert!(encrypted_aggregate(&[a.clone(), a], &kp.public).is_err());
        assert!(encrypted_aggregate(&[], &kp.public).is_err());
    }

    #[test]
    fn fdbe_roundtrip_and_errors() {
        let kp = kp();
        let codec = FixedPointCodec::for_population(32, 4, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = encrypt_update(&kp.public, &update("x", 9, 6, 3, 1), &codec, &mut rng).unwrap();
        let bytes = encode_fdbe(&e).unwrap();
        assert_eq!(bytes.len(), fdbe_len(&e).unwrap());
        assert_eq!(&bytes[..4], b"FDBE");
        assert_eq!(decode_fdbe(&bytes).unwrap(), e);
        assert!(matches!(
            decode_fdbe(&bytes[..bytes.len() - 3]),
            Err(Error::Parse(ParseError::Truncated { .. }))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_fdbe(&extra), Err(Error::Parse(ParseError::TrailingBytes(1)))));
    }

    #[test]
    fn packing_capacity_law() {
        let pk = &kp().public;
        let codec = FixedPointCodec::default();
        let l = Layout::new(codec, 768, 9, pk.bits()).unwrap();
        assert_eq!(l.num_blocks(), (768usize * 9).div_ceil(l.slots_per_block));
        assert_eq!(l.slots_per_block, 511 / codec.slot_bits() as usize);
    }
}

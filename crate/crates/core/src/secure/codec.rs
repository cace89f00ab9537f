use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::BlWeights;

pub const DEFAULT_FRAC_BITS: u32 = 32;
pub const DEFAULT_INT_BITS: u32 = 20;
/// Slots are handled as `i128` once unpacked.
pub const MAX_SLOT_BITS: u32 = 126;

/// Signed fixed-point format for one weight entry inside a packed plaintext.
///
/// A slot is `frac_bits + int_bits + 1` bits wide plus `guard_bits` of
/// headroom, so up to `2^guard_bits` unit-weight additions never carry into
/// the neighbouring slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    pub frac_bits: u32,
    pub int_bits: u32,
    pub guard_bits: u32,
}

fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

impl FixedPointCodec {
    pub fn new(frac_bits: u32, int_bits: u32, guard_bits: u32) -> Result<Self> {
        if frac_bits == 0 || int_bits == 0 {
            return Err(Error::invalid("frac_bits and int_bits must be positive"));
        }
        if guard_bits > 63 {
            return Err(Error::invalid(format!("guard_bits {guard_bits} exceeds 63")));
        }
        let c = Self {
            frac_bits,
            int_bits,
            guard_bits,
        };
        if c.slot_bits() > MAX_SLOT_BITS {
            return Err(Error::invalid(format!(
                "slot width {} exceeds {MAX_SLOT_BITS} bits",
                c.slot_bits()
            )));
        }
        Ok(c)
    }

    /// Guard bits sized for a total sample count of up to `n_max`.
    pub fn for_population(frac_bits: u32, int_bits: u32, n_max: u64) -> Result<Self> {
        Self::new(frac_bits, int_bits, ceil_log2(n_max.max(1)))
    }

    /// Smallest `int_bits` (plus one bit of margin) that holds `max_abs`.
    pub fn covering(frac_bits: u32, max_abs: f64, n_max: u64) -> Result<Self> {
        if !max_abs.is_finite() || max_abs < 0.0 {
            return Err(Error::invalid(format!("cannot size a codec for |w| = {max_abs}")));
        }
        let int_bits = if max_abs < 1.0 {
            1
        } else {
            max_abs.log2().floor() as u32 + 2
        };
        Self::for_population(frac_bits, int_bits, n_max)
    }

    pub fn slot_bits(&self) -> u32 {
        self.frac_bits + self.int_bits + 1 + self.guard_bits
    }

    /// Largest total weight `Σ n_k` the guard bits absorb.
    pub fn capacity(&self) -> u64 {
        1u64 << self.guard_bits
    }

    /// Offset added to each signed slot so packed values are non-negative.
    pub fn bias(&self) -> u128 {
        1u128 << (self.frac_bits + self.int_bits)
    }

    fn scale(&self) -> f64 {
        (self.frac_bits as f64).exp2()
    }
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        Self::for_population(DEFAULT_FRAC_BITS, DEFAULT_INT_BITS, 1 << 16).expect("default codec is valid")
    }
}

/// Row-major `rows × cols` weights packed `slots_per_block` to a plaintext.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub codec: FixedPointCodec,
    pub rows: usize,
    pub cols: usize,
    pub slots_per_block: usize,
}

impl Layout {
    /// Packs as many slots as fit strictly below a `modulus_bits`-bit modulus.
    pub fn new(codec: FixedPointCodec, rows: usize, cols: usize, modulus_bits: u64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("layout needs a non-empty matrix"));
        }
        let spb = (modulus_bits.saturating_sub(1) / codec.slot_bits() as u64) as usize;
        if spb == 0 {
            return Err(Error::invalid(format!(
                "a {modulus_bits}-bit modulus cannot hold one {}-bit slot",
                codec.slot_bits()
            )));
        }
        Ok(Self {
            codec,
            rows,
            cols,
            slots_per_block: spb,
        })
    }

    pub fn total_slots(&self) -> usize {
        self.rows * self.cols
    }

    pub fn num_blocks(&self) -> usize {
        self.total_slots().div_ceil(self.slots_per_block)
    }

    /// Bits of plaintext a packed block may occupy.
    pub fn block_bits(&self) -> u64 {
        self.slots_per_block as u64 * self.codec.slot_bits() as u64
    }
}

/// `round(w · 2^frac_bits)` for every entry, row-major.
pub fn encode_weights(w: &BlWeights, codec: &FixedPointCodec) -> Result<Vec<i128>> {
    let limit = (codec.int_bits as f64).exp2();
    let slot_limit = codec.bias() as f64;
    let scale = codec.scale();
    let mut out = Vec::with_capacity(w.dim() * w.num_classes());
    for row in w.values().row_iter() {
        for &v in row.iter() {
            let index = out.len();
            let s = (v * scale).round();
            if !(v.abs() < limit && s.abs() < slot_limit) {
                return Err(Error::Range {
                    index,
                    detail: format!("{v} does not fit in {} integer bits", codec.int_bits),
                });
            }
            out.push(s as i128);
        }
    }
    Ok(out)
}

/// Inverse of [`encode_weights`] for a sum with total weight `divisor`.
pub fn decode_slots(slots: &[i128], codec: &FixedPointCodec, divisor: u64) -> Vec<f64> {
    let denom = divisor as f64 * codec.scale();
    slots.iter().map(|&s| s as f64 / denom).collect()
}

/// Packs biased slots little-endian (slot 0 in the lowest bits).
pub fn pack_slots(slots: &[i128], layout: &Layout) -> Result<Vec<BigUint>> {
    if slots.len() != layout.total_slots() {
        return Err(Error::incompatible(format!(
            "{} slots for a layout of {}",
            slots.len(),
            layout.total_slots()
        )));
    }
    let codec = &layout.codec;
    let bias = codec.bias() as i128;
    let width = codec.slot_bits() as usize;
    let mut blocks = Vec::with_capacity(layout.num_blocks());
    for (b, chunk) in slots.chunks(layout.slots_per_block).enumerate() {
        let mut acc = BigUint::zero();
        for (j, &s) in chunk.iter().enumerate().rev() {
            if s <= -bias || s >= bias {
                return Err(Error::Range {
                    index: b * layout.slots_per_block + j,
                    detail: format!("slot {s} exceeds {} bits", width - codec.guard_bits as usize),
                });
            }
            acc <<= width;
            acc += BigUint::from((s + bias) as u128);
        }
        blocks.push(acc);
    }
    Ok(blocks)
}

/// Splits blocks back into signed slots, removing `additions` copies of the
/// bias. `additions` is the total unit weight summed into each slot.
pub fn unpack_slots(blocks: &[BigUint], layout: &Layout, additions: u64) -> Result<Vec<i128>> {
    if blocks.len() != layout.num_blocks() {
        return Err(Error::incompatible(format!(
            "{} blocks for a layout of {}",
            blocks.len(),
            layout.num_blocks()
        )));
    }
    let codec = &layout.codec;
    if additions == 0 || additions > codec.capacity() {
        return Err(Error::Overflow(format!(
            "{additions} additions with capacity {}",
            codec.capacity()
        )));
    }
    let width = codec.slot_bits() as usize;
    let mask = (BigUint::from(1u8) << width) - 1u8;
    let offset = additions as i128 * codec.bias() as i128;
    let mut out = Vec::with_capacity(layout.total_slots());
    for (b, block) in blocks.iter().enumerate() {
        if block.bits() > layout.block_bits() {
            return Err(Error::Decode(format!("block {b} has {} bits", block.bits())));
        }
        let n = (layout.total_slots() - b * layout.slots_per_block).min(layout.slots_per_block);
        let mut rest = block.clone();
        for _ in 0..n {
            let chunk = (&rest & &mask).to_u128().expect("slot fits in u128");
            out.push(chunk as i128 - offset);
            rest >>= width;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::NormalizationMode;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn codec() -> FixedPointCodec {
        FixedPointCodec::new(32, 8, 4).unwrap()
    }

    fn weights(rows: usize, vals: &[f64]) -> BlWeights {
        BlWeights::new(DMatrix::from_row_slice(rows, vals.len() / rows, vals), 1e-6, NormalizationMode::L2).unwrap()
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_weights(&weights(2, &[0.0; 4]), &codec()).unwrap(), vec![0; 4]);
        assert_eq!(encode_weights(&weights(1, &[1.0]), &codec()).unwrap(), vec![1i128 << 32]);
        let e = encode_weights(&weights(1, &[0.5, 300.0]), &codec()).unwrap_err();
        assert!(matches!(e, Error::Range { index: 1, .. }));
    }

    #[test]
    fn sizing() {
        let c = FixedPointCodec::for_population(32, 16, 1000).unwrap();
        assert_eq!(c.guard_bits, 10);
        assert_eq!(c.slot_bits(), 59);
        assert!(c.slot_bits() > 32 + 16 + 10);
        assert_eq!(FixedPointCodec::for_population(32, 16, 1024).unwrap().guard_bits, 10);
        assert_eq!(FixedPointCodec::for_population(32, 16, 1025).unwrap().guard_bits, 11);
        assert_eq!(FixedPointCodec::covering(32, 3.9, 1).unwrap().int_bits, 3);
        assert!(FixedPointCodec::new(64, 60, 8).is_err());
        let l = Layout::new(codec(), 64, 6, 512).unwrap();
        assert_eq!(l.slots_per_block, 511 / 45);
        assert_eq!(l.num_blocks(), 384usize.div_ceil(11));
        assert!(Layout::new(codec(), 1, 1, 40).is_err());
    }

    #[test]
    fn one_slot_block_is_biased_identity() {
        let l = Layout::new(codec(), 1, 3, 50).unwrap();
        assert_eq!(l.slots_per_block, 1);
        let blocks = pack_slots(&[0, 5, -5], &l).unwrap();
        let b = codec().bias();
        assert_eq!(blocks, vec![BigUint::from(b), BigUint::from(b + 5), BigUint::from(b - 5)]);
    }

    #[test]
    fn unpack_checks() {
        let l = Layout::new(codec(), 1, 2, 512).unwrap();
        let blocks = pack_slots(&[1, 2], &l).unwrap();
        assert!(matches!(unpack_slots(&blocks, &l, 17), Err(Error::Overflow(_))));
        assert!(unpack_slots(&[], &l, 1).is_err());
        let over = l.codec.bias() as i128;
        assert!(matches!(pack_slots(&[0, over], &l), Err(Error::Range { index: 1, .. })));
    }

    #[test]
    fn decode_error_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let c = FixedPointCodec::new(32, 4, 0).unwrap();
        let vals: Vec<f64> = (0..1000).map(|_| rng.random_range(-4.0..4.0)).collect();
        let w = weights(10, &vals);
        let back = decode_slots(&encode_weights(&w, &c).unwrap(), &c, 1);
        let err = vals.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 2.4e-10, "{err}");
    }

    fn slot() -> impl Strategy<Value = i128> {
        let b = (1i128 << 40) - 1;
        -b..=b
    }

    proptest! {
        #[test]
        fn pack_roundtrip(slots in proptest::collection::vec(slot(), 1..60), bits in 50u64..700) {
            let l = Layout::new(codec(), 1, slots.len(), bits).unwrap();
            let blocks = pack_slots(&slots, &l).unwrap();
            prop_assert_eq!(blocks.len(), slots.len().div_ceil(l.slots_per_block));
            prop_assert_eq!(unpack_slots(&blocks, &l, 1).unwrap(), slots);
        }

        #[test]
        fn packed_addition_is_slotwise(pairs in proptest::collection::vec((slot(), slot()), 1..40), bits in 50u64..600) {
            let (a, b): (Vec<i128>, Vec<i128>) = pairs.into_iter().unzip();
            let l = Layout::new(codec(), 1, a.len(), bits).unwrap();
            let sum: Vec<BigUint> = pack_slots(&a, &l).unwrap()
                .into_iter()
                .zip(pack_slots(&b, &l).unwrap())
                .map(|(x, y)| x + y)
                .collect();
            let expected: Vec<i128> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            prop_assert_eq!(unpack_slots(&sum, &l, 2).unwrap(), expected);
        }

        #[test]
        fn weighted_sum_at_capacity(a in proptest::collection::vec(slot(), 1..20), b in proptest::collection::vec(slot(), 20), k in 1u64..16) {
            // k·a + (16 − k)·b uses every guard bit
            let b = &b[..a.len()];
            let l = Layout::new(codec(), 1, a.len(), 300).unwrap();
            let pa = pack_slots(&a, &l).unwrap();
            let pb = pack_slots(b, &l).unwrap();
            let sum: Vec<BigUint> = pa.iter().zip(&pb).map(|(x, y)| x * k + y * (16 - k)).collect();
            let expected: Vec<i128> = a.iter().zip(b).map(|(x, y)| x * k as i128 + y * (16 - k) as i128).collect();
            prop_assert_eq!(unpack_slots(&sum, &l, 16).unwrap(), expected);
        }
    }
}

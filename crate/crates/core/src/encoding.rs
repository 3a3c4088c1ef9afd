//! Fixed-point translation between signed real quantities (kW) and field
//! elements.
//!
//! A real θ becomes ⌊10^δ·θ⌋ mod e; negatives land in the field's upper
//! half, and the inverse map φ sends anything at or above e/2 back below
//! zero. Sums of up to `capacity` encodings decode unambiguously because the
//! codec refuses configurations where `capacity · 10^δ · magnitude_bound`
//! could reach e/2.

use crate::field::{FieldElement, FieldPrime};
use crate::{Error, Result};

/// Immutable codec configuration shared by every agent of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointCodec {
    delta: u32,
    scale: f64, // 10^delta
    field: FieldPrime,
    capacity: u64,
    magnitude_bound: f64,
}

impl FixedPointCodec {
    /// `delta` is the number of preserved decimal digits, `capacity` the
    /// maximum number of encoded values ever summed before decoding, and
    /// `magnitude_bound` the largest |θ| that `encode` will accept.
    pub fn new(
        delta: u32,
        field: FieldPrime,
        capacity: u64,
        magnitude_bound: f64,
    ) -> Result<Self> {
        if delta > 12 {
            return Err(Error::Config(format!(
                "delta = {delta} preserved digits is beyond f64 fixed-point range"
            )));
        }
        if capacity == 0 {
            return Err(Error::Config("codec capacity must be at least 1".into()));
        }
        if !(magnitude_bound.is_finite() && magnitude_bound > 0.0) {
            return Err(Error::Config(format!(
                "magnitude bound must be positive and finite, got {magnitude_bound}"
            )));
        }
        let scale = 10f64.powi(delta as i32);
        // Worst-case scaled sum must stay strictly inside (−e/2, e/2) or the
        // signed decode of a sum becomes ambiguous.
        let headroom = capacity as f64 * scale * magnitude_bound;
        if headroom >= field.modulus() as f64 / 2.0 {
            return Err(Error::Config(format!(
                "codec overflow: capacity {capacity} × 10^{delta} × bound {magnitude_bound} \
                 = {headroom} reaches half the modulus {}",
                field.modulus()
            )));
        }
        Ok(FixedPointCodec {
            delta,
            scale,
            field,
            capacity,
            magnitude_bound,
        })
    }

    pub fn delta(&self) -> u32 {
        self.delta
    }

    pub fn field(&self) -> FieldPrime {
        self.field
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn magnitude_bound(&self) -> f64 {
        self.magnitude_bound
    }

    /// ⌊10^δ·θ⌋ mod e.
    pub fn encode(&self, theta: f64) -> Result<FieldElement> {
        if !theta.is_finite() || theta.abs() > self.magnitude_bound {
            return Err(Error::Range(format!(
                "value {theta} exceeds the codec magnitude bound {}",
                self.magnitude_bound
            )));
        }
        let scaled = (self.scale * theta).floor() as i128;
        Ok(self.field.element_from_i128(scaled))
    }

    /// φ(z)/10^δ where φ maps the upper half of the field to negatives.
    pub fn decode(&self, z: FieldElement) -> f64 {
        let e = self.field.modulus();
        let v = z.value();
        let signed = if 2 * (v as u128) >= e as u128 {
            v as i128 - e as i128
        } else {
            v as i128
        };
        signed as f64 / self.scale
    }

    pub fn encode_vector(&self, values: &[f64]) -> Result<Vec<FieldElement>> {
        values.iter().map(|&v| self.encode(v)).collect()
    }

    pub fn decode_vector(&self, elements: &[FieldElement]) -> Vec<f64> {
        elements.iter().map(|&z| self.decode(z)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const MERSENNE31: u64 = 2_147_483_647;

    fn codec(delta: u32, capacity: u64, bound: f64) -> FixedPointCodec {
        let field = FieldPrime::new(MERSENNE31).unwrap();
        FixedPointCodec::new(delta, field, capacity, bound).unwrap()
    }

    #[test]
    fn encode_examples() {
        let c = codec(3, 20, 10.0);
        assert_eq!(c.encode(0.0).unwrap().value(), 0);
        // ⌊1234.5⌋ = 1234 (the f64 nearest 1.2345 is just below it)
        assert_eq!(c.encode(1.2345).unwrap().value(), 1234);
        // (−500) mod (2³¹ − 1)
        assert_eq!(c.encode(-0.5).unwrap().value(), 2_147_483_147);
    }

    #[test]
    fn decode_examples() {
        let c = codec(3, 20, 10.0);
        assert_eq!(c.decode(c.field().element(0)), 0.0);
        assert_eq!(c.decode(c.field().element(MERSENNE31 - 500)), -0.5);
        let roundtrip = c.decode(c.encode(3.3).unwrap());
        assert_eq!(roundtrip, 3.300);
    }

    #[test]
    fn out_of_bound_value_rejected() {
        let c = codec(3, 20, 6.6);
        assert!(matches!(c.encode(6.7), Err(Error::Range(_))));
        assert!(matches!(c.encode(-6.7), Err(Error::Range(_))));
        assert!(c.encode(6.6).is_ok());
        assert!(c.encode(f64::NAN).is_err());
    }

    #[test]
    fn overflowing_codec_configuration_rejected() {
        let field = FieldPrime::new(17).unwrap();
        // 3 · 10⁰ · 4 = 12 ≥ 17/2
        assert!(FixedPointCodec::new(0, field, 3, 4.0).is_err());
        // 3 · 10⁰ · 2 = 6 < 8.5
        assert!(FixedPointCodec::new(0, field, 3, 2.0).is_ok());
        assert!(FixedPointCodec::new(3, field, 0, 1.0).is_err());
        assert!(FixedPointCodec::new(13, FieldPrime::new(MERSENNE31).unwrap(), 1, 1.0).is_err());
    }

    #[test]
    fn vector_roundtrip_examples() {
        let c = codec(3, 20, 10.0);
        assert!(c.encode_vector(&[]).unwrap().is_empty());
        let enc = c.encode_vector(&[1.0, -1.0]).unwrap();
        assert_eq!(enc[0].value(), 1000);
        assert_eq!(enc[1].value(), MERSENNE31 - 1000);
        let dec = c.decode_vector(&enc);
        assert_eq!(dec, vec![1.0, -1.0]);
    }

    #[test]
    fn roundtrip_error_below_ulp_of_delta() {
        let c = codec(3, 20, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let x = (rng.next_u64() % 20_000) as f64 / 1000.0 - 10.0;
            let back = c.decode(c.encode(x).unwrap());
            assert!(
                (back - x).abs() < 1e-3,
                "roundtrip error for {x}: {back}"
            );
            // sign correctness
            if x < 0.0 {
                assert!(2 * (c.encode(x).unwrap().value() as u128) >= MERSENNE31 as u128);
            }
        }
    }

    /// Field-summing encodings and decoding once equals the sum of floors.
    #[test]
    fn additive_homomorphism_within_capacity() {
        let c = codec(3, 20, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = 2 + (rng.next_u64() % 19) as usize;
            let xs: Vec<f64> = (0..n)
                .map(|_| (rng.next_u64() % 20_000) as f64 / 1000.0 - 10.0)
                .collect();
            let mut acc = c.field().zero();
            let mut floor_sum = 0i64;
            for &x in &xs {
                acc = acc.add(c.encode(x).unwrap()).unwrap();
                floor_sum += (1000.0 * x).floor() as i64;
            }
            let decoded = c.decode(acc);
            assert_eq!(decoded, floor_sum as f64 / 1000.0);
            let true_sum: f64 = xs.iter().sum();
            assert!((decoded - true_sum).abs() < n as f64 * 1e-3);
        }
    }
}

use num_bigint::BigUint;
use num_traits::{FromPrimitive, ToPrimitive, Zero};

use super::{FieldElement, FieldError, Zq};

/// Default number of fraction bits.
pub const DEFAULT_FRACTION_BITS: u32 = 16;

/// Signed fixed-point encoding into Z_q with scale 2^F. Negative values wrap
/// to q - |v|; decoding reads anything above q/2 as negative.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointCodec {
    fraction_bits: u32,
    field: Zq,
    half: BigUint,
    limit: f64,
}

impl FixedPointCodec {
    pub fn new(fraction_bits: u32, field: Zq) -> Self {
        let half = field.modulus() >> 1u32;
        let q = field.modulus().to_f64().unwrap_or(f64::INFINITY);
        let limit = q / 2f64.powi(fraction_bits as i32 + 1);
        FixedPointCodec {
            fraction_bits,
            field,
            half,
            limit,
        }
    }

    pub fn with_default_precision(field: Zq) -> Self {
        Self::new(DEFAULT_FRACTION_BITS, field)
    }

    pub fn fraction_bits(&self) -> u32 {
        self.fraction_bits
    }

    pub fn field(&self) -> &Zq {
        &self.field
    }

    /// Largest magnitude accepted by `encode` (exclusive).
    pub fn limit(&self) -> f64 {
        self.limit
    }

    fn scale(&self) -> f64 {
        2f64.powi(self.fraction_bits as i32)
    }

    pub fn encode(&self, x: f64) -> Result<FieldElement, FieldError> {
        if !x.is_finite() || x.abs() >= self.limit {
            return Err(FieldError::Overflow(x));
        }
        let scaled = (x * self.scale()).round();
        let magnitude = BigUint::from_f64(scaled.abs()).ok_or(FieldError::Overflow(x))?;
        if magnitude.is_zero() {
            return Ok(self.field.zero());
        }
        if scaled < 0.0 {
            Ok(self.field.element(self.field.modulus() - magnitude))
        } else {
            Ok(self.field.element(magnitude))
        }
    }

    pub fn decode(&self, e: &FieldElement) -> f64 {
        let v = e.value();
        let (magnitude, negative) = if *v > self.half {
            (self.field.modulus() - v, true)
        } else {
            (v.clone(), false)
        };
        let m = magnitude.to_f64().unwrap_or(f64::INFINITY) / self.scale();
        if negative {
            -m
        } else {
            m
        }
    }

    pub fn encode_vec(&self, xs: &[f64]) -> Result<Vec<FieldElement>, FieldError> {
        xs.iter().map(|&x| self.encode(x)).collect()
    }

    pub fn decode_vec(&self, es: &[FieldElement]) -> Vec<f64> {
        es.iter().map(|e| self.decode(e)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GroupParams;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn codec() -> FixedPointCodec {
        static PARAMS: OnceLock<GroupParams> = OnceLock::new();
        let params = PARAMS.get_or_init(|| GroupParams::generate(128, 64, 3).unwrap());
        FixedPointCodec::with_default_precision(params.scalars())
    }

    #[test]
    fn zero_encodes_to_zero() {
        assert!(codec().encode(0.0).unwrap().is_zero());
    }

    #[test]
    fn one_encodes_to_scale() {
        assert_eq!(codec().encode(1.0).unwrap().value(), &BigUint::from(65536u32));
    }

    #[test]
    fn negative_quarter_maps_to_q_minus_2_pow_14() {
        let c = codec();
        let e = c.encode(-0.25).unwrap();
        assert_eq!(e.value(), &(c.field().modulus() - BigUint::from(1u32 << 14)));
        assert_eq!(c.decode(&e), -0.25);
    }

    #[test]
    fn negation_wraps_around_q() {
        let c = codec();
        for x in [0.5, 3.25, 1234.0001, 7.0e6] {
            let pos = c.encode(x).unwrap();
            let neg = c.encode(-x).unwrap();
            assert_eq!(neg.value(), &(c.field().modulus() - pos.value()));
        }
    }

    #[test]
    fn out_of_range_overflows() {
        let c = codec();
        assert!(matches!(c.encode(c.limit()), Err(FieldError::Overflow(_))));
        assert!(matches!(c.encode(-c.limit() * 2.0), Err(FieldError::Overflow(_))));
        assert!(matches!(c.encode(f64::NAN), Err(FieldError::Overflow(_))));
        assert!(c.encode(c.limit() / 2.0).is_ok());
    }

    #[test]
    fn tiny_field_limit() {
        // q = 23, F = 2: |x| < 23 / 8.
        let c = FixedPointCodec::new(2, Zq::new(23u32.into()));
        assert!(c.encode(2.75).is_ok());
        assert!(c.encode(2.875).is_err());
        assert_eq!(c.decode(&c.encode(-2.75).unwrap()), -2.75);
    }

    proptest! {
        #[test]
        fn roundtrip_within_one_ulp(x in -1.0e6f64..1.0e6) {
            let c = codec();
            let back = c.decode(&c.encode(x).unwrap());
            prop_assert!((back - x).abs() <= 2f64.powi(-16));
        }

        #[test]
        fn dyadic_values_roundtrip_exactly(num in -(1i64 << 26)..(1i64 << 26)) {
            // |x| < 2^10 with 16 fraction bits.
            let x = num as f64 / 65536.0;
            let c = codec();
            prop_assert_eq!(c.decode(&c.encode(x).unwrap()), x);
        }

        #[test]
        fn homomorphic_sum(u in prop::collection::vec(-1.0e3f64..1.0e3, 16),
                           v in prop::collection::vec(-1.0e3f64..1.0e3, 16)) {
            let c = codec();
            let f = c.field();
            for (a, b) in u.iter().zip(&v) {
                let s = f.add(&c.encode(*a).unwrap(), &c.encode(*b).unwrap());
                prop_assert!((c.decode(&s) - (a + b)).abs() <= 2.0 * 2f64.powi(-16));
            }
        }
    }
}

//! Modular arithmetic over Z_q, the order-q subgroup of Z_p^*, and the
//! fixed-point codec that maps real-valued model parameters into Z_q.

pub(crate) mod bytes;
mod codec;
mod group;
mod prime;

pub use codec::FixedPointCodec;
pub use group::GroupParams;
pub use prime::{is_probable_prime, MILLER_RABIN_ROUNDS};

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::RngCore;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("invalid group parameters: {0}")]
    InvalidGroup(&'static str),
    #[error("bits_q ({bits_q}) must be at least 2 and smaller than bits_p ({bits_p})")]
    BitSizes { bits_p: u64, bits_q: u64 },
    #[error("no {bits_p}/{bits_q}-bit group found within the search budget")]
    GenerationExhausted { bits_p: u64, bits_q: u64 },
    #[error("division by zero in Z_q")]
    DivisionByZero,
    #[error("value {0} is outside the fixed-point range")]
    Overflow(f64),
    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
}

/// An element of Z_q. The value is always reduced.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FieldElement(BigUint);

impl FieldElement {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn into_value(self) -> BigUint {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

/// Arithmetic context for Z_q.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Zq {
    q: BigUint,
}

impl Zq {
    pub fn new(q: BigUint) -> Self {
        assert!(q > BigUint::one(), "modulus must exceed 1");
        Zq { q }
    }

    pub fn modulus(&self) -> &BigUint {
        &self.q
    }

    pub fn element(&self, v: impl Into<BigUint>) -> FieldElement {
        FieldElement(v.into() % &self.q)
    }

    /// Accepts only values already in [0, q).
    pub fn checked_element(&self, v: BigUint) -> Result<FieldElement, FieldError> {
        if v < self.q {
            Ok(FieldElement(v))
        } else {
            Err(FieldError::Malformed("field element not reduced"))
        }
    }

    pub fn zero(&self) -> FieldElement {
        FieldElement(BigUint::zero())
    }

    pub fn one(&self) -> FieldElement {
        FieldElement(BigUint::one())
    }

    pub fn random<R: RngCore + ?Sized>(&self, rng: &mut R) -> FieldElement {
        FieldElement(rng.gen_biguint_below(&self.q))
    }

    pub fn add(&self, a: &FieldElement, b: &FieldElement) -> FieldElement {
        let s = &a.0 + &b.0;
        if s >= self.q {
            FieldElement(s - &self.q)
        } else {
            FieldElement(s)
        }
    }

    pub fn sub(&self, a: &FieldElement, b: &FieldElement) -> FieldElement {
        if a.0 >= b.0 {
            FieldElement(&a.0 - &b.0)
        } else {
            FieldElement(&self.q - &b.0 + &a.0)
        }
    }

    pub fn neg(&self, a: &FieldElement) -> FieldElement {
        if a.0.is_zero() {
            a.clone()
        } else {
            FieldElement(&self.q - &a.0)
        }
    }

    pub fn mul(&self, a: &FieldElement, b: &FieldElement) -> FieldElement {
        FieldElement((&a.0 * &b.0) % &self.q)
    }

    pub fn pow(&self, a: &FieldElement, e: &BigUint) -> FieldElement {
        FieldElement(a.0.modpow(e, &self.q))
    }

    /// Multiplicative inverse via the extended Euclidean algorithm.
    pub fn inv(&self, a: &FieldElement) -> Result<FieldElement, FieldError> {
        if a.0.is_zero() {
            return Err(FieldError::DivisionByZero);
        }
        // modinv returns None only when gcd(a, q) != 1, impossible for prime q.
        a.0.modinv(&self.q).map(FieldElement).ok_or(FieldError::DivisionByZero)
    }

    pub fn div(&self, a: &FieldElement, b: &FieldElement) -> Result<FieldElement, FieldError> {
        Ok(self.mul(a, &self.inv(b)?))
    }
}

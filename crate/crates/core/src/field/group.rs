use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::prime::is_probable_prime;
use super::{bytes, FieldError, Zq};

/// Candidate q values tried before giving up.
const MAX_Q_ATTEMPTS: usize = 20_000;
/// Cofactor candidates tried for each q.
const MAX_COFACTOR_ATTEMPTS: usize = 4_000;

/// Order-q subgroup of Z_p^* with generator g.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupParams {
    p: BigUint,
    q: BigUint,
    g: BigUint,
}

impl GroupParams {
    /// Validates all invariants: p and q prime, q | p - 1, g of order q.
    pub fn new(p: BigUint, q: BigUint, g: BigUint) -> Result<Self, FieldError> {
        if !is_probable_prime(&p) {
            return Err(FieldError::InvalidGroup("p is not prime"));
        }
        if !is_probable_prime(&q) {
            return Err(FieldError::InvalidGroup("q is not prime"));
        }
        if !((&p - 1u32) % &q).is_zero() {
            return Err(FieldError::InvalidGroup("q does not divide p - 1"));
        }
        if g < BigUint::from(2u32) || g >= p {
            return Err(FieldError::InvalidGroup("g outside [2, p-1]"));
        }
        if !g.modpow(&q, &p).is_one() {
            return Err(FieldError::InvalidGroup("g^q != 1 mod p"));
        }
        Ok(GroupParams { p, q, g })
    }

    /// Deterministic parameter generation: a random `bits_q`-bit prime q, then
    /// p = k*q + 1 of exactly `bits_p` bits, then g = h^((p-1)/q) for the
    /// smallest h >= 2 that yields g != 1.
    pub fn generate(bits_p: u64, bits_q: u64, seed: u64) -> Result<Self, FieldError> {
        Self::generate_with_budget(bits_p, bits_q, seed, MAX_Q_ATTEMPTS)
    }

    pub(crate) fn generate_with_budget(
        bits_p: u64,
        bits_q: u64,
        seed: u64,
        q_attempts: usize,
    ) -> Result<Self, FieldError> {
        if bits_q >= bits_p {
            return Err(FieldError::BitSizes { bits_p, bits_q });
        }
        if bits_q < 2 {
            return Err(FieldError::BitSizes { bits_p, bits_q });
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let one = BigUint::one();
        let p_low = &one << (bits_p - 1);
        let p_high = &one << bits_p;

        for _ in 0..q_attempts {
            let mut q = rng.gen_biguint(bits_q);
            q.set_bit(bits_q - 1, true);
            q.set_bit(0, true);
            if !is_probable_prime(&q) {
                continue;
            }
            // p = k*q + 1 with p in [2^(bits_p-1), 2^bits_p): k in [k_lo, k_hi).
            let k_lo = (&p_low - &one).div_ceil(&q);
            let k_hi = (&p_high - &one).div_ceil(&q);
            if k_lo >= k_hi {
                continue;
            }
            for _ in 0..MAX_COFACTOR_ATTEMPTS {
                let mut k = rng.gen_biguint_range(&k_lo, &k_hi);
                if k.is_odd() {
                    k += 1u32;
                    if k >= k_hi {
                        continue;
                    }
                }
                let p = &k * &q + &one;
                if p.bits() != bits_p || !is_probable_prime(&p) {
                    continue;
                }
                let exp = &k;
                let mut h = BigUint::from(2u32);
                while h < p {
                    let g = h.modpow(exp, &p);
                    if !g.is_one() {
                        return GroupParams::new(p, q, g);
                    }
                    h += 1u32;
                }
            }
        }
        Err(FieldError::GenerationExhausted { bits_p, bits_q })
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    /// Scalar field Z_q of exponents.
    pub fn scalars(&self) -> Zq {
        Zq::new(self.q.clone())
    }

    /// base^exp mod p.
    pub fn group_pow(&self, base: &BigUint, exp: &BigUint) -> BigUint {
        base.modpow(exp, &self.p)
    }

    /// g^exp mod p.
    pub fn g_pow(&self, exp: &BigUint) -> BigUint {
        self.g.modpow(exp, &self.p)
    }

    pub fn group_mul(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a * b) % &self.p
    }

    /// True when x lies in the order-q subgroup generated by g.
    pub fn in_subgroup(&self, x: &BigUint) -> bool {
        !x.is_zero() && *x < self.p && x.modpow(&self.q, &self.p).is_one()
    }

    /// Byte length of p, used for fixed-width group element encodings.
    pub fn element_len(&self) -> usize {
        (self.p.bits() as usize).div_ceil(8)
    }

    /// Canonical encoding: length-prefixed big-endian p || q || g.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        bytes::put_biguint(&mut out, &self.p);
        bytes::put_biguint(&mut out, &self.q);
        bytes::put_biguint(&mut out, &self.g);
        out
    }

    pub fn from_bytes(input: &[u8]) -> Result<Self, FieldError> {
        let mut r = bytes::Reader::new(input);
        let p = r.biguint()?;
        let q = r.biguint()?;
        let g = r.biguint()?;
        r.finish()?;
        GroupParams::new(p, q, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_512_160_satisfies_invariants() {
        let params = GroupParams::generate(512, 160, 1).unwrap();
        assert_eq!(params.p().bits(), 512);
        assert_eq!(params.q().bits(), 160);
        assert!(is_probable_prime(params.p()));
        assert!(is_probable_prime(params.q()));
        assert!(((params.p() - 1u32) % params.q()).is_zero());
        assert!(params.g_pow(params.q()).is_one());
        assert!(!params.g().is_one());
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = GroupParams::generate(128, 64, 9).unwrap();
        let b = GroupParams::generate(128, 64, 9).unwrap();
        let c = GroupParams::generate(128, 64, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn small_group_generator_has_exact_order_q() {
        let params = GroupParams::generate(16, 8, 7).unwrap();
        let p = params.p().clone();
        let q: u64 = params.q().try_into().unwrap();
        // Enumerate powers of g until we return to 1.
        let mut x = BigUint::one();
        let mut order = 0u64;
        loop {
            x = (&x * params.g()) % &p;
            order += 1;
            if x.is_one() {
                break;
            }
            assert!(order <= q, "order exceeds q");
        }
        assert_eq!(order, q);
    }

    #[test]
    fn rejects_q_not_smaller_than_p() {
        assert!(matches!(
            GroupParams::generate(64, 64, 1),
            Err(FieldError::BitSizes { .. })
        ));
        assert!(matches!(
            GroupParams::generate(32, 64, 1),
            Err(FieldError::BitSizes { .. })
        ));
    }

    #[test]
    fn reports_exhaustion_when_budget_runs_out() {
        assert!(matches!(
            GroupParams::generate_with_budget(64, 32, 3, 0),
            Err(FieldError::GenerationExhausted { .. })
        ));
    }

    #[test]
    fn new_rejects_bad_generator() {
        // p = 23, q = 11; 5 has order 22, not 11.
        let err = GroupParams::new(23u32.into(), 11u32.into(), 5u32.into()).unwrap_err();
        assert!(matches!(err, FieldError::InvalidGroup(_)));
        // 4 = 2^2 has order 11.
        assert!(GroupParams::new(23u32.into(), 11u32.into(), 4u32.into()).is_ok());
    }

    #[test]
    fn canonical_bytes_roundtrip() {
        let params = GroupParams::generate(128, 64, 4).unwrap();
        let bytes = params.to_bytes();
        assert_eq!(GroupParams::from_bytes(&bytes).unwrap(), params);
        // p is first, prefixed by its byte length as u32 big-endian.
        assert_eq!(&bytes[..4], &16u32.to_be_bytes());
    }
}

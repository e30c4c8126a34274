//! Feldman verifiable secret sharing over Z_q, applied independently to each
//! coordinate of a parameter vector.
//!
//! Participants are indexed from 1 and their index doubles as the evaluation
//! point of their share. Dealer id 0 is reserved for bundles produced by
//! [`sum_shares`], which belong to no single dealer.

use std::collections::BTreeSet;

use num_bigint::BigUint;
use num_traits::One;
use rand::RngCore;
use thiserror::Error;

use crate::field::bytes::{self, Reader};
use crate::field::{FieldElement, FieldError, FixedPointCodec, GroupParams, Zq};

/// Dealer tag carried by summed bundles.
pub const AGGREGATE_DEALER: u32 = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VssError {
    #[error("threshold {th} invalid for {n} participants")]
    InvalidThreshold { th: usize, n: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("need {needed} shares with distinct points, got {got}")]
    InsufficientShares { needed: usize, got: usize },
}

/// f(x) = a_0 + a_1 x + ... + a_{th-1} x^{th-1} with a_0 the secret.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharePolynomial {
    coefficients: Vec<FieldElement>,
}

impl SharePolynomial {
    pub fn random<R: RngCore + ?Sized>(secret: FieldElement, th: usize, field: &Zq, rng: &mut R) -> Self {
        assert!(th >= 1);
        let mut coefficients = Vec::with_capacity(th);
        coefficients.push(secret);
        for _ in 1..th {
            coefficients.push(field.random(rng));
        }
        SharePolynomial { coefficients }
    }

    pub fn from_coefficients(coefficients: Vec<FieldElement>) -> Result<Self, VssError> {
        if coefficients.is_empty() {
            return Err(VssError::Malformed("polynomial needs a constant term".into()));
        }
        Ok(SharePolynomial { coefficients })
    }

    pub fn threshold(&self) -> usize {
        self.coefficients.len()
    }

    pub fn secret(&self) -> &FieldElement {
        &self.coefficients[0]
    }

    pub fn coefficients(&self) -> &[FieldElement] {
        &self.coefficients
    }

    pub fn evaluate(&self, x: u32, field: &Zq) -> FieldElement {
        let x = field.element(x);
        self.coefficients
            .iter()
            .rev()
            .fold(field.zero(), |acc, a| field.add(&field.mul(&acc, &x), a))
    }

    /// Feldman commitments g^{a_k} mod p.
    pub fn commitments(&self, params: &GroupParams) -> Vec<BigUint> {
        self.coefficients.iter().map(|a| params.g_pow(a.value())).collect()
    }
}

/// One recipient's shares of a dealer's vector, one value per coordinate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShareBundle {
    pub dealer: u32,
    pub recipient: u32,
    pub values: Vec<FieldElement>,
}

impl ShareBundle {
    pub fn eval_point(&self) -> u32 {
        self.recipient
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        bytes::put_u32(&mut out, self.dealer);
        bytes::put_u32(&mut out, self.recipient);
        bytes::put_u32(&mut out, self.values.len() as u32);
        bytes::put_u32(&mut out, 1);
        for v in &self.values {
            bytes::put_biguint(&mut out, v.value());
        }
        out
    }

    pub fn from_bytes(input: &[u8], field: &Zq) -> Result<Self, VssError> {
        let mut r = Reader::new(input);
        let dealer = r.u32()?;
        let recipient = r.u32()?;
        let d = r.u32()? as usize;
        if r.u32()? != 1 {
            return Err(VssError::Malformed("share bundle width must be 1".into()));
        }
        let mut values = Vec::with_capacity(d.min(1 << 16));
        for _ in 0..d {
            values.push(field.checked_element(r.biguint()?)?);
        }
        r.finish()?;
        Ok(ShareBundle {
            dealer,
            recipient,
            values,
        })
    }
}

/// A dealer's Feldman commitments, `th` group elements per coordinate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitmentVector {
    pub dealer: u32,
    pub per_coordinate: Vec<Vec<BigUint>>,
}

impl CommitmentVector {
    pub fn dimension(&self) -> usize {
        self.per_coordinate.len()
    }

    pub fn threshold(&self) -> usize {
        self.per_coordinate.first().map_or(0, Vec::len)
    }

    /// Same header layout as [`ShareBundle::to_bytes`] with recipient 0 and
    /// the threshold as the per-coordinate width.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        bytes::put_u32(&mut out, self.dealer);
        bytes::put_u32(&mut out, 0);
        bytes::put_u32(&mut out, self.dimension() as u32);
        bytes::put_u32(&mut out, self.threshold() as u32);
        for coord in &self.per_coordinate {
            for c in coord {
                bytes::put_biguint(&mut out, c);
            }
        }
        out
    }

    pub fn from_bytes(input: &[u8], params: &GroupParams) -> Result<Self, VssError> {
        let mut r = Reader::new(input);
        let dealer = r.u32()?;
        if r.u32()? != 0 {
            return Err(VssError::Malformed("commitment header recipient must be 0".into()));
        }
        let d = r.u32()? as usize;
        let th = r.u32()? as usize;
        if th == 0 {
            return Err(VssError::Malformed("commitment width must be positive".into()));
        }
        let mut per_coordinate = Vec::with_capacity(d.min(1 << 16));
        for _ in 0..d {
            let mut coord = Vec::with_capacity(th.min(1 << 8));
            for _ in 0..th {
                let c = r.biguint()?;
                if !params.in_subgroup(&c) {
                    return Err(VssError::Malformed("commitment outside the subgroup".into()));
                }
                coord.push(c);
            }
            per_coordinate.push(coord);
        }
        r.finish()?;
        Ok(CommitmentVector { dealer, per_coordinate })
    }
}

/// Output of a sharing: one bundle per recipient 1..=n plus the commitments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dealing {
    pub bundles: Vec<ShareBundle>,
    pub commitments: CommitmentVector,
}

fn check_threshold(th: usize, n: usize) -> Result<(), VssError> {
    if th == 0 || th > n || n > u32::MAX as usize {
        return Err(VssError::InvalidThreshold { th, n });
    }
    Ok(())
}

/// Shares a real-valued vector through the fixed-point codec.
pub fn share<R: RngCore + ?Sized>(
    secret: &[f64],
    dealer: u32,
    th: usize,
    n: usize,
    params: &GroupParams,
    codec: &FixedPointCodec,
    rng: &mut R,
) -> Result<Dealing, VssError> {
    check_threshold(th, n)?;
    let encoded = codec.encode_vec(secret)?;
    share_encoded(&encoded, dealer, th, n, params, rng)
}

pub fn share_encoded<R: RngCore + ?Sized>(
    secret: &[FieldElement],
    dealer: u32,
    th: usize,
    n: usize,
    params: &GroupParams,
    rng: &mut R,
) -> Result<Dealing, VssError> {
    check_threshold(th, n)?;
    let field = params.scalars();
    let polys: Vec<SharePolynomial> = secret
        .iter()
        .map(|s| SharePolynomial::random(s.clone(), th, &field, rng))
        .collect();
    share_with_polynomials(&polys, dealer, n, params)
}

/// Deterministic core of [`share`]: evaluates caller-chosen polynomials.
pub fn share_with_polynomials(
    polys: &[SharePolynomial],
    dealer: u32,
    n: usize,
    params: &GroupParams,
) -> Result<Dealing, VssError> {
    let th = polys.first().map_or(1, SharePolynomial::threshold);
    check_threshold(th, n)?;
    if polys.iter().any(|p| p.threshold() != th) {
        return Err(VssError::Malformed("polynomials disagree on threshold".into()));
    }
    let field = params.scalars();
    let bundles = (1..=n as u32)
        .map(|j| ShareBundle {
            dealer,
            recipient: j,
            values: polys.iter().map(|p| p.evaluate(j, &field)).collect(),
        })
        .collect();
    let commitments = CommitmentVector {
        dealer,
        per_coordinate: polys.iter().map(|p| p.commitments(params)).collect(),
    };
    Ok(Dealing { bundles, commitments })
}

/// Checks g^{s_j} = prod_k c_k^{j^k} for every coordinate. Exponents j^k are
/// reduced mod q, which is sound because every commitment has order q.
pub fn verify(bundle: &ShareBundle, commitments: &CommitmentVector, params: &GroupParams) -> Result<bool, VssError> {
    if bundle.dealer != commitments.dealer {
        return Err(VssError::Malformed(format!(
            "bundle from dealer {} checked against commitments of dealer {}",
            bundle.dealer, commitments.dealer
        )));
    }
    if bundle.dimension() != commitments.dimension() {
        return Err(VssError::Malformed(format!(
            "bundle has {} coordinates, commitments have {}",
            bundle.dimension(),
            commitments.dimension()
        )));
    }
    let th = commitments.threshold();
    if th == 0 || commitments.per_coordinate.iter().any(|c| c.len() != th) {
        return Err(VssError::Malformed("ragged commitment vector".into()));
    }
    if bundle.recipient == 0 {
        return Err(VssError::Malformed("evaluation point 0 reveals the secret".into()));
    }

    let field = params.scalars();
    let j = field.element(bundle.recipient);
    let mut exps = Vec::with_capacity(th);
    let mut power = field.one();
    for _ in 0..th {
        exps.push(power.clone());
        power = field.mul(&power, &j);
    }

    for (value, coeffs) in bundle.values.iter().zip(&commitments.per_coordinate) {
        let lhs = params.g_pow(value.value());
        let rhs = coeffs.iter().zip(&exps).fold(BigUint::one(), |acc, (c, e)| {
            params.group_mul(&acc, &params.group_pow(c, e.value()))
        });
        if lhs != rhs {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Lagrange interpolation of f(0) from (x_i, f(x_i)) with distinct nonzero x_i.
pub fn lagrange_at_zero(points: &[(u32, &FieldElement)], field: &Zq) -> Result<FieldElement, VssError> {
    let mut acc = field.zero();
    for (i, (xi, yi)) in points.iter().enumerate() {
        let xi = field.element(*xi);
        let mut num = field.one();
        let mut den = field.one();
        for (k, (xk, _)) in points.iter().enumerate() {
            if k == i {
                continue;
            }
            let xk = field.element(*xk);
            num = field.mul(&num, &field.neg(&xk));
            den = field.mul(&den, &field.sub(&xi, &xk));
        }
        let basis = field.div(&num, &den)?;
        acc = field.add(&acc, &field.mul(yi, &basis));
    }
    Ok(acc)
}

/// Reconstructs the shared field vector from the `th` lowest evaluation
/// points among `bundles`.
pub fn reconstruct_encoded(bundles: &[ShareBundle], th: usize, field: &Zq) -> Result<Vec<FieldElement>, VssError> {
    if th == 0 {
        return Err(VssError::InvalidThreshold { th, n: bundles.len() });
    }
    let first = bundles
        .first()
        .ok_or(VssError::InsufficientShares { needed: th, got: 0 })?;
    let mut seen = BTreeSet::new();
    for b in bundles {
        if b.dealer != first.dealer {
            return Err(VssError::Malformed("bundles come from different dealers".into()));
        }
        if b.dimension() != first.dimension() {
            return Err(VssError::Malformed("bundles disagree on dimension".into()));
        }
        if b.recipient == 0 {
            return Err(VssError::Malformed("evaluation point 0".into()));
        }
        if !seen.insert(b.recipient) {
            return Err(VssError::Malformed(format!(
                "duplicate evaluation point {}",
                b.recipient
            )));
        }
    }
    if bundles.len() < th {
        return Err(VssError::InsufficientShares {
            needed: th,
            got: bundles.len(),
        });
    }
    let mut chosen: Vec<&ShareBundle> = bundles.iter().collect();
    chosen.sort_by_key(|b| b.recipient);
    chosen.truncate(th);

    (0..first.dimension())
        .map(|coord| {
            let points: Vec<(u32, &FieldElement)> = chosen.iter().map(|b| (b.recipient, &b.values[coord])).collect();
            lagrange_at_zero(&points, field)
        })
        .collect()
}

pub fn reconstruct(bundles: &[ShareBundle], th: usize, codec: &FixedPointCodec) -> Result<Vec<f64>, VssError> {
    let encoded = reconstruct_encoded(bundles, th, codec.field())?;
    Ok(codec.decode_vec(&encoded))
}

/// Coordinate-wise sum of one recipient's bundles from distinct dealers. The
/// result reconstructs to the sum of the dealers' secrets.
pub fn sum_shares(bundles: &[ShareBundle], field: &Zq) -> Result<ShareBundle, VssError> {
    let first = bundles
        .first()
        .ok_or_else(|| VssError::Malformed("nothing to sum".into()))?;
    if bundles.len() == 1 {
        return Ok(first.clone());
    }
    let mut dealers = BTreeSet::new();
    let mut values = vec![field.zero(); first.dimension()];
    for b in bundles {
        if b.recipient != first.recipient {
            return Err(VssError::Malformed(format!(
                "evaluation points {} and {} mixed",
                first.recipient, b.recipient
            )));
        }
        if b.dimension() != first.dimension() {
            return Err(VssError::Malformed("bundles disagree on dimension".into()));
        }
        if !dealers.insert(b.dealer) {
            return Err(VssError::Malformed(format!("dealer {} summed twice", b.dealer)));
        }
        for (acc, v) in values.iter_mut().zip(&b.values) {
            *acc = field.add(acc, v);
        }
    }
    Ok(ShareBundle {
        dealer: AGGREGATE_DEALER,
        recipient: first.recipient,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// p = 47 = 2*23 + 1; 2 is a quadratic residue mod 47 so it has order 23.
    fn group23() -> GroupParams {
        GroupParams::new(47u32.into(), 23u32.into(), 2u32.into()).unwrap()
    }

    fn group64() -> GroupParams {
        GroupParams::generate(128, 64, 21).unwrap()
    }

    fn poly(coeffs: &[u32], field: &Zq) -> SharePolynomial {
        SharePolynomial::from_coefficients(coeffs.iter().map(|&c| field.element(c)).collect()).unwrap()
    }

    #[test]
    fn hand_evaluated_shares_over_q23() {
        // f(x) = 5 + 3x: f(1) = 8, f(2) = 11, f(3) = 14.
        let params = group23();
        let field = params.scalars();
        let dealing = share_with_polynomials(&[poly(&[5, 3], &field)], 1, 3, &params).unwrap();
        let vals: Vec<u32> = dealing
            .bundles
            .iter()
            .map(|b| b.values[0].value().try_into().unwrap())
            .collect();
        assert_eq!(vals, vec![8, 11, 14]);
        for b in &dealing.bundles {
            assert!(verify(b, &dealing.commitments, &params).unwrap());
        }
    }

    #[test]
    fn hand_lagrange_over_q23() {
        // From (1, 8), (2, 11): l1(0) = 2, l2(0) = -1 => 16 - 11 = 5.
        let field = group23().scalars();
        let (y1, y2) = (field.element(8u32), field.element(11u32));
        let s = lagrange_at_zero(&[(1, &y1), (2, &y2)], &field).unwrap();
        assert_eq!(s, field.element(5u32));
    }

    #[test]
    fn threshold_one_gives_constant_shares() {
        let params = group64();
        let codec = FixedPointCodec::with_default_precision(params.scalars());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let secret = [1.5, -2.25, 0.0];
        let dealing = share(&secret, 1, 1, 4, &params, &codec, &mut rng).unwrap();
        let enc = codec.encode_vec(&secret).unwrap();
        for b in &dealing.bundles {
            assert_eq!(b.values, enc);
        }
        let back = reconstruct(&dealing.bundles[2..3], 1, &codec).unwrap();
        assert_eq!(back, secret.to_vec());
    }

    #[test]
    fn threshold_above_n_rejected() {
        let params = group64();
        let codec = FixedPointCodec::with_default_precision(params.scalars());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            share(&[1.0], 1, 5, 4, &params, &codec, &mut rng),
            Err(VssError::InvalidThreshold { th: 5, n: 4 })
        );
    }

    #[test]
    fn unencodable_coordinate_overflows() {
        let params = group64();
        let codec = FixedPointCodec::with_default_precision(params.scalars());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = share(&[1.0, f64::INFINITY], 1, 2, 4, &params, &codec, &mut rng).unwrap_err();
        assert!(matches!(err, VssError::Field(FieldError::Overflow(_))));
    }

    #[test]
    fn tampered_value_fails_verification() {
        let params = group64();
        let field = params.scalars();
        let codec = FixedPointCodec::with_default_precision(field.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dealing = share(&[0.5, 1.0, -3.0], 2, 3, 4, &params, &codec, &mut rng).unwrap();
        let mut bad = dealing.bundles[1].clone();
        bad.values[1] = field.add(&bad.values[1], &field.one());
        assert!(!verify(&bad, &dealing.commitments, &params).unwrap());
    }

    #[test]
    fn cross_dealer_verification_is_malformed() {
        let params = group64();
        let codec = FixedPointCodec::with_default_precision(params.scalars());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = share(&[1.0], 1, 2, 4, &params, &codec, &mut rng).unwrap();
        let b = share(&[1.0], 2, 2, 4, &params, &codec, &mut rng).unwrap();
        assert!(matches!(
            verify(&b.bundles[0], &a.commitments, &params),
            Err(VssError::Malformed(_))
        ));
        let mut short = a.bundles[0].clone();
        short.values.push(params.scalars().one());
        assert!(matches!(
            verify(&short, &a.commitments, &params),
            Err(VssError::Malformed(_))
        ));
    }

    #[test]
    fn reconstruct_error_paths() {
        let params = group64();
        let codec = FixedPointCodec::with_default_precision(params.scalars());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = share(&[7.0], 1, 3, 4, &params, &codec, &mut rng).unwrap();
        assert_eq!(
            reconstruct(&d.bundles[..2], 3, &codec),
            Err(VssError::InsufficientShares { needed: 3, got: 2 })
        );
        let dup = vec![d.bundles[0].clone(), d.bundles[0].clone(), d.bundles[1].clone()];
        assert!(matches!(reconstruct(&dup, 3, &codec), Err(VssError::Malformed(_))));
        assert_eq!(reconstruct(&d.bundles[1..], 3, &codec).unwrap(), vec![7.0]);
    }

    #[test]
    fn sum_then_reconstruct_gives_sum_of_secrets() {
        let params = group23();
        let field = params.scalars();
        // Two dealers share 1.0 and 2.0 with F = 1 (q = 23 leaves |x| < 5.75).
        let codec = FixedPointCodec::new(1, field.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = share(&[1.0], 1, 2, 3, &params, &codec, &mut rng).unwrap();
        let b = share(&[2.0], 2, 2, 3, &params, &codec, &mut rng).unwrap();
        let summed: Vec<ShareBundle> = (0..3)
            .map(|j| sum_shares(&[a.bundles[j].clone(), b.bundles[j].clone()], &field).unwrap())
            .collect();
        assert!(summed.iter().all(|s| s.dealer == AGGREGATE_DEALER));
        assert_eq!(reconstruct(&summed[1..], 2, &codec).unwrap(), vec![3.0]);
    }

    #[test]
    fn sum_of_one_bundle_is_identity() {
        let field = group23().scalars();
        let b = ShareBundle {
            dealer: 3,
            recipient: 2,
            values: vec![field.element(9u32)],
        };
        assert_eq!(sum_shares(std::slice::from_ref(&b), &field).unwrap(), b);
    }

    #[test]
    fn sum_rejects_mixed_points() {
        let field = group23().scalars();
        let mk = |dealer, recipient| ShareBundle {
            dealer,
            recipient,
            values: vec![field.element(1u32)],
        };
        assert!(matches!(
            sum_shares(&[mk(1, 1), mk(2, 2)], &field),
            Err(VssError::Malformed(_))
        ));
    }

    #[test]
    fn canonical_bytes_roundtrip_and_header() {
        let params = group64();
        let codec = FixedPointCodec::with_default_precision(params.scalars());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = share(&[1.0, -1.0], 3, 2, 4, &params, &codec, &mut rng).unwrap();
        let bb = d.bundles[1].to_bytes();
        assert_eq!(&bb[..16], &[0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 1]);
        assert_eq!(ShareBundle::from_bytes(&bb, &params.scalars()).unwrap(), d.bundles[1]);
        let cb = d.commitments.to_bytes();
        assert_eq!(&cb[..16], &[0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 2]);
        assert_eq!(CommitmentVector::from_bytes(&cb, &params).unwrap(), d.commitments);
    }
}

//! The share-delay poisoning attacker: greedy sign-vector crafting, the
//! orchestration step that reconstructs the honest average from observed
//! shares, and the cosine filter the crafted vector is meant to slip past.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FixedPointCodec, GroupParams};
use crate::vss::{self, CommitmentVector, ShareBundle, VssError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("invalid crafting parameters: {0}")]
    InvalidParams(&'static str),
    #[error(transparent)]
    Vss(#[from] VssError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsdpParams {
    /// The loop stops once the running cosine drops to this value.
    pub theta_cos: f64,
    /// Added to the running squared norm for every visited coordinate.
    pub delta: f64,
}

impl Default for AsdpParams {
    fn default() -> Self {
        AsdpParams {
            theta_cos: 0.5,
            delta: 1.0,
        }
    }
}

impl AsdpParams {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(AttackError::InvalidParams("delta must be positive"));
        }
        if !(-1.0..=1.0).contains(&self.theta_cos) {
            return Err(AttackError::InvalidParams("theta_cos outside [-1, 1]"));
        }
        Ok(())
    }
}

/// One iteration of the crafting loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CraftStep {
    pub index: usize,
    pub norm: f64,
    pub cos: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crafted {
    pub vector: Vec<f64>,
    pub steps: Vec<CraftStep>,
    /// True when the loop stopped on the threshold rather than running out
    /// of coordinates.
    pub hit_threshold: bool,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, AttackError> {
    if u.len() != v.len() {
        return Err(AttackError::Degenerate("dimension mismatch"));
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(AttackError::Degenerate("zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

/// ||v||_1 / (||v||_2 sqrt(d)): the cosine between v and its sign vector.
pub fn tau0(v: &[f64]) -> Result<f64, AttackError> {
    let n2 = l2_norm(v);
    if v.is_empty() || n2 == 0.0 {
        return Err(AttackError::Degenerate("zero vector"));
    }
    let n1: f64 = v.iter().map(|x| x.abs()).sum();
    Ok(n1 / (n2 * (v.len() as f64).sqrt()))
}

/// Builds a sign vector over the largest-magnitude coordinates of `target`
/// until the running cosine falls to `theta_cos`, then rescales it to the
/// target's norm.
///
/// The running norm grows by `delta` per coordinate as written in the
/// original procedure, so with `delta != 1` the loop's cosine differs from
/// the true one. The final rescale uses the true norm of the sign vector so
/// the output norm always equals the target norm.
pub fn asdp_craft(target: &[f64], params: &AsdpParams) -> Result<Crafted, AttackError> {
    params.validate()?;
    let target_norm = l2_norm(target);
    if target.is_empty() || target_norm == 0.0 || !target_norm.is_finite() {
        return Err(AttackError::Degenerate("target must be a finite non-zero vector"));
    }
    let mut indices: Vec<usize> = (0..target.len()).collect();
    // Stable sort keeps lower indices first among equal magnitudes.
    indices.sort_by(|&a, &b| target[b].abs().total_cmp(&target[a].abs()));

    let mut out = vec![0.0; target.len()];
    let mut norm_squared = 0.0;
    let mut indicator = 0.0;
    let mut steps = Vec::new();
    let mut hit_threshold = false;
    for idx in indices {
        out[idx] = sign(target[idx]);
        indicator += target[idx] * out[idx];
        norm_squared += params.delta;
        let norm = norm_squared.sqrt();
        let cos = indicator / (target_norm * norm);
        steps.push(CraftStep { index: idx, norm, cos });
        if cos <= params.theta_cos {
            hit_threshold = true;
            break;
        }
    }
    let actual = l2_norm(&out);
    let factor = target_norm / actual;
    for x in &mut out {
        *x *= factor;
    }
    Ok(Crafted {
        vector: out,
        steps,
        hit_threshold,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum DefenseVerdict {
    Accept { cos: f64 },
    Reject { cos: Option<f64>, reason: &'static str },
}

impl DefenseVerdict {
    pub fn accepted(&self) -> bool {
        matches!(self, DefenseVerdict::Accept { .. })
    }
}

/// Cosine filter: accept iff cos(candidate, reference) >= bound.
pub fn defense_cosine_check(candidate: &[f64], reference: &[f64], bound: f64) -> DefenseVerdict {
    match cosine(candidate, reference) {
        Ok(cos) if cos >= bound => DefenseVerdict::Accept { cos },
        Ok(cos) => DefenseVerdict::Reject {
            cos: Some(cos),
            reason: "cosine below bound",
        },
        Err(_) => DefenseVerdict::Reject {
            cos: None,
            reason: "degenerate vector",
        },
    }
}

/// What the attacker submits in a round.
#[derive(Clone, Debug, PartialEq)]
pub enum AttackerMove {
    /// Enough shares were observed to reconstruct the honest average.
    Adaptive { honest_average: Vec<f64>, crafted: Crafted },
    /// The observation precondition failed; the caller picks a non-adaptive
    /// vector.
    Fallback { reason: String },
}

/// Reconstructs each expected dealer's vector from the shares the attacker
/// has seen, averages them, and crafts against the average. Shares that fail
/// verification against the dealer's commitments are ignored.
pub fn acumpa_step(
    observed: &BTreeMap<u32, (CommitmentVector, Vec<ShareBundle>)>,
    expected_dealers: &[u32],
    th: usize,
    group: &GroupParams,
    codec: &FixedPointCodec,
    params: &AsdpParams,
) -> Result<AttackerMove, AttackError> {
    if expected_dealers.is_empty() {
        return Ok(AttackerMove::Fallback {
            reason: "no dealers to observe".into(),
        });
    }
    let mut sum: Option<Vec<f64>> = None;
    for dealer in expected_dealers {
        let Some((commitments, bundles)) = observed.get(dealer) else {
            return Ok(AttackerMove::Fallback {
                reason: format!("nothing observed from dealer {dealer}"),
            });
        };
        let valid: Vec<ShareBundle> = bundles
            .iter()
            .filter(|b| matches!(vss::verify(b, commitments, group), Ok(true)))
            .cloned()
            .collect();
        if valid.len() < th {
            return Ok(AttackerMove::Fallback {
                reason: format!("{} of {th} shares from dealer {dealer}", valid.len()),
            });
        }
        let secret = vss::reconstruct(&valid, th, codec)?;
        match &mut sum {
            None => sum = Some(secret),
            Some(acc) => {
                if acc.len() != secret.len() {
                    return Err(AttackError::Degenerate("dealers disagree on dimension"));
                }
                acc.iter_mut().zip(&secret).for_each(|(a, s)| *a += s);
            }
        }
    }
    let k = expected_dealers.len() as f64;
    let honest_average: Vec<f64> = sum.expect("non-empty dealer list").iter().map(|s| s / k).collect();
    let crafted = asdp_craft(&honest_average, params)?;
    Ok(AttackerMove::Adaptive {
        honest_average,
        crafted,
    })
}

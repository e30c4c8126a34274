use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::netsim::{NodeId, Time};

/// First round (1-indexed) at which accuracy reached the target, or never.
/// Serialized as a number or the string "inf".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InferenceTime(pub Option<usize>);

impl InferenceTime {
    pub const NEVER: InferenceTime = InferenceTime(None);

    pub fn rounds(&self) -> Option<usize> {
        self.0
    }

    pub fn as_f64(&self) -> f64 {
        self.0.map_or(f64::INFINITY, |r| r as f64)
    }
}

impl Ord for InferenceTime {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.0, other.0) {
            (Some(a), Some(b)) => a.cmp(&b),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        }
    }
}

impl PartialOrd for InferenceTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for InferenceTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(r) => write!(f, "{r}"),
            None => write!(f, "inf"),
        }
    }
}

impl Serialize for InferenceTime {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Some(r) => s.serialize_u64(r as u64),
            None => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for InferenceTime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(InferenceTime(Some(n as usize))),
            Raw::S(s) if s == "inf" => Ok(InferenceTime::NEVER),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "expected a round or \"inf\", got {s:?}"
            ))),
        }
    }
}

pub fn inference_time(accuracies: &[f64], tau: f64) -> InferenceTime {
    InferenceTime(accuracies.iter().position(|&a| a >= tau).map(|i| i + 1))
}

/// What the attacker did in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub attacker: NodeId,
    pub round: usize,
    /// The adaptive precondition held: enough current-round shares were
    /// readable to reconstruct the honest average.
    pub adaptive: bool,
    pub fallback: bool,
    pub reason: Option<String>,
    pub submitted_at: Option<Time>,
    /// Cosine between the submission and the reconstructed honest average.
    pub cos_to_honest: Option<f64>,
    /// The crafting loop reached the cosine threshold before running out of
    /// coordinates.
    pub hit_threshold: Option<bool>,
    /// Whether honest participants aggregated the submission.
    pub included: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Test accuracy of each honest participant's model.
    pub accuracy: BTreeMap<NodeId, f64>,
    pub mean_accuracy: f64,
    /// Mean over honest participants of the training cross-entropy on their
    /// local data.
    pub train_error: f64,
    /// Number of dealers aggregated this round.
    pub z: usize,
    pub dealers: Vec<NodeId>,
    /// Cosine of each reconstructed dealer vector against the previous
    /// aggregate. Only available where individual vectors are reconstructed.
    pub dealer_cosines: BTreeMap<NodeId, f64>,
    /// Ticks from round start to the new model at the reporting participant.
    pub latency: Option<Time>,
    /// All honest participants hold bit-identical models.
    pub consistent: bool,
    /// Model of the lowest-id honest participant.
    pub params: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

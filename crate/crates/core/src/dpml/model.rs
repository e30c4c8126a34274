//! Two-class logistic regression on synthetic Gaussian data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Synthetic task. Each example has `dimension - 1` Gaussian features plus a
/// constant bias feature; the first `informative` features are shifted by
/// `±separation` according to the label, the rest are pure noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub samples_per_participant: usize,
    pub test_samples: usize,
    pub dimension: usize,
    pub informative: usize,
    pub separation: f64,
    /// Initial weights are uniform in [-init_scale, init_scale].
    pub init_scale: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            samples_per_participant: 200,
            test_samples: 2000,
            dimension: 16,
            informative: 3,
            separation: 0.9,
            init_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Rows of length `dimension`, the last entry always 1.
    pub features: Vec<Vec<f64>>,
    /// 0 or 1.
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.dimension < 2 {
            return Err("dimension must be at least 2".into());
        }
        if self.informative >= self.dimension {
            return Err("informative features must leave room for the bias".into());
        }
        if self.samples_per_participant == 0 || self.test_samples == 0 {
            return Err("sample counts must be positive".into());
        }
        if !self.separation.is_finite() {
            return Err("separation must be finite".into());
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err("init_scale must be positive".into());
        }
        Ok(())
    }

    fn sample(&self, seed: u64, stream: u64, count: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut features = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let y: bool = rng.gen();
            let shift = if y { self.separation } else { -self.separation };
            let mut x: Vec<f64> = (0..self.dimension - 1)
                .map(|j| {
                    let noise: f64 = rng.sample(StandardNormal);
                    if j < self.informative {
                        noise + shift
                    } else {
                        noise
                    }
                })
                .collect();
            x.push(1.0);
            features.push(x);
            labels.push(if y { 1.0 } else { 0.0 });
        }
        Dataset { features, labels }
    }

    /// Local training data of participant `id`.
    pub fn participant(&self, seed: u64, id: u32) -> Dataset {
        self.sample(seed, 1 + id as u64, self.samples_per_participant)
    }

    /// The held-out set every accuracy figure is measured on.
    pub fn test_set(&self, seed: u64) -> Dataset {
        self.sample(seed, 0, self.test_samples)
    }

    /// Common starting model.
    pub fn initial_model(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        (0..self.dimension)
            .map(|_| rng.gen_range(-self.init_scale..=self.init_scale))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn predict(w: &[f64], x: &[f64]) -> f64 {
    sigmoid(dot(w, x))
}

/// Mean cross-entropy.
pub fn loss(w: &[f64], data: &Dataset) -> f64 {
    let total: f64 = data
        .features
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| {
            let z = dot(w, x);
            // -y log σ(z) - (1-y) log(1-σ(z)) = softplus(z) - y z
            softplus(z) - y * z
        })
        .sum();
    total / data.len() as f64
}

pub fn gradient(w: &[f64], data: &Dataset) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    for (x, &y) in data.features.iter().zip(&data.labels) {
        let r = predict(w, x) - y;
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi += r * xi;
        }
    }
    let m = data.len() as f64;
    g.iter_mut().for_each(|gi| *gi /= m);
    g
}

/// One full-batch gradient step.
pub fn local_train(w: &[f64], data: &Dataset, learning_rate: f64) -> Vec<f64> {
    if learning_rate == 0.0 {
        return w.to_vec();
    }
    let g = gradient(w, data);
    w.iter().zip(&g).map(|(wi, gi)| wi - learning_rate * gi).collect()
}

pub fn accuracy(w: &[f64], data: &Dataset) -> f64 {
    let correct = data
        .features
        .iter()
        .zip(&data.labels)
        .filter(|(x, &y)| (dot(w, x) >= 0.0) == (y == 1.0))
        .count();
    correct as f64 / data.len() as f64
}

//! Labeled data drawn from a logit discrete choice model.
//!
//! A record's click utility is `H(X) - theta + k * noise` with standard
//! Gumbel noise, which gives click probability `sigmoid((H(X) - theta) / k)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::schema::{EncodedRecord, FieldSchema, FIRST_VALUE_INDEX};
use crate::error::{Error, Result};
use crate::linalg::sigmoid;

/// Ground-truth deterministic utility H(X), indexed by observed category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum UtilityFamily {
    /// H(X) = sum_i w_i[x_i]
    Linear { weights: Vec<Vec<f64>> },
    /// H(X) = sum_i w_i[x_i] + sum_{i<j} <v_i[x_i], v_j[x_j]>
    Factorization {
        linear: Vec<Vec<f64>>,
        embeddings: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Bernoulli draw from the closed-form click probability.
    #[default]
    Logistic,
    /// Explicit utilities for click / no-click with independent Gumbel noise.
    Gumbel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Observed categories per field (reserved indices come on top).
    pub categories: Vec<usize>,
    pub utility: UtilityFamily,
    /// Expected utility theta.
    pub theta: f64,
    /// Noise level k.
    pub noise: f64,
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub label_mode: LabelMode,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// True click probability of every record.
    pub oracle: Vec<f64>,
}

/// Inverse-CDF draw from the standard Gumbel distribution.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

fn normal_table<R: Rng>(rng: &mut R, rows: usize, scale: f64) -> Vec<f64> {
    (0..rows)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>()
}

impl SyntheticSpec {
    /// Factorization-machine ground truth with Gaussian parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn random_factorization(
        categories: Vec<usize>,
        dim: usize,
        linear_scale: f64,
        embedding_scale: f64,
        theta: f64,
        noise: f64,
        samples: usize,
        seed: u64,
    ) -> SyntheticSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a7a);
        let linear = categories
            .iter()
            .map(|&c| normal_table(&mut rng, c, linear_scale))
            .collect();
        let embeddings = categories
            .iter()
            .map(|&c| {
                (0..c)
                    .map(|_| normal_table(&mut rng, dim, embedding_scale))
                    .collect()
            })
            .collect();
        SyntheticSpec {
            categories,
            utility: UtilityFamily::Factorization { linear, embeddings },
            theta,
            noise,
            samples,
            seed,
            label_mode: LabelMode::Logistic,
        }
    }

    pub fn random_linear(
        categories: Vec<usize>,
        scale: f64,
        theta: f64,
        noise: f64,
        samples: usize,
        seed: u64,
    ) -> SyntheticSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a7a);
        let weights = categories
            .iter()
            .map(|&c| normal_table(&mut rng, c, scale))
            .collect();
        SyntheticSpec {
            categories,
            utility: UtilityFamily::Linear { weights },
            theta,
            noise,
            samples,
            seed,
            label_mode: LabelMode::Logistic,
        }
    }

    pub fn schema(&self) -> Result<FieldSchema> {
        FieldSchema::categorical(&self.categories)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise > 0.0) {
            return Err(Error::domain("noise level k must be positive"));
        }
        if self.categories.is_empty() || self.categories.contains(&0) {
            return Err(Error::domain("every field needs at least one category"));
        }
        let n = self.categories.len();
        let sizes_ok = |t: &Vec<Vec<f64>>| {
            t.len() == n && t.iter().zip(&self.categories).all(|(w, &c)| w.len() == c)
        };
        let ok = match &self.utility {
            UtilityFamily::Linear { weights } => sizes_ok(weights),
            UtilityFamily::Factorization { linear, embeddings } => {
                let dim = embeddings
                    .first()
                    .and_then(|f| f.first())
                    .map_or(0, |v| v.len());
                sizes_ok(linear)
                    && embeddings.len() == n
                    && embeddings
                        .iter()
                        .zip(&self.categories)
                        .all(|(f, &c)| f.len() == c && f.iter().all(|v| v.len() == dim))
            }
        };
        if !ok {
            return Err(Error::domain(
                "utility tables do not match the category counts",
            ));
        }
        Ok(())
    }

    /// H(X) for an encoded record whose indices are observed categories.
    pub fn utility(&self, record: &EncodedRecord) -> f64 {
        let cat = |i: usize| (record.indices[i] - FIRST_VALUE_INDEX) as usize;
        match &self.utility {
            UtilityFamily::Linear { weights } => {
                weights.iter().enumerate().map(|(i, w)| w[cat(i)]).sum()
            }
            UtilityFamily::Factorization { linear, embeddings } => {
                let n = linear.len();
                let mut h: f64 = linear.iter().enumerate().map(|(i, w)| w[cat(i)]).sum();
                for i in 0..n {
                    for j in i + 1..n {
                        let (a, b) = (&embeddings[i][cat(i)], &embeddings[j][cat(j)]);
                        h += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                h
            }
        }
    }

    pub fn click_probability(&self, record: &EncodedRecord) -> f64 {
        sigmoid((self.utility(record) - self.theta) / self.noise)
    }
}

/// Samples categories uniformly per field, then a label from the choice model.
pub fn generate_dcm(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let schema = spec.schema()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.samples);
    let mut oracle = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let indices: Vec<u32> = spec
            .categories
            .iter()
            .map(|&c| FIRST_VALUE_INDEX + rng.gen_range(0..c) as u32)
            .collect();
        let mut rec = EncodedRecord { label: 0, indices };
        let h = spec.utility(&rec);
        let p = sigmoid((h - spec.theta) / spec.noise);
        let click = match spec.label_mode {
            LabelMode::Logistic => rng.gen::<f64>() < p,
            LabelMode::Gumbel => {
                let click_utility = h - spec.theta + spec.noise * sample_gumbel(&mut rng);
                let skip_utility = spec.noise * sample_gumbel(&mut rng);
                click_utility > skip_utility
            }
        };
        rec.label = click as u8;
        records.push(rec);
        oracle.push(p);
    }
    Ok(SyntheticData {
        dataset: Dataset { schema, records },
        oracle,
    })
}

//! Aggregation (AL) and space transform (ST): concatenation, field
//! combination, mean/sum pooling, and the MLP / affine head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::params::{Init, ParameterStore, SlotId};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregationSpec {
    Concat,
    FieldCombination { weights: Vec<f64> },
    Mean,
    Sum,
}

pub fn aggregate(spec: &AggregationSpec, vectors: &[DenseVector]) -> Result<DenseVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::domain("aggregation of no vectors"))?;
    if let AggregationSpec::Concat = spec {
        return Ok(DenseVector::new(
            vectors
                .iter()
                .flat_map(|v| v.as_slice().iter().copied())
                .collect(),
        ));
    }
    if vectors.iter().any(|v| v.len() != first.len()) {
        return Err(Error::shape("aggregated vectors differ in length"));
    }
    let weights: Vec<f64> = match spec {
        AggregationSpec::FieldCombination { weights } => {
            if weights.len() != vectors.len() {
                return Err(Error::shape(format!(
                    "{} combination weights for {} vectors",
                    weights.len(),
                    vectors.len()
                )));
            }
            weights.clone()
        }
        AggregationSpec::Mean => vec![1.0 / vectors.len() as f64; vectors.len()],
        AggregationSpec::Sum => vec![1.0; vectors.len()],
        AggregationSpec::Concat => unreachable!(),
    };
    let mut out = DenseVector::zeros(first.len());
    for (v, w) in vectors.iter().zip(weights) {
        out.add_assign(&v.scaled(w))?;
    }
    Ok(out)
}

/// Hidden ReLU stack followed by an affine map to one logit. No hidden
/// layers gives the plain linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    /// Drop probability for hidden activations during training.
    pub dropout: f64,
    /// Skip connections `F(x) + x` on hidden layers whose width is unchanged.
    #[serde(default)]
    pub residual: bool,
}

impl MlpSpec {
    pub fn linear() -> Self {
        MlpSpec {
            hidden: Vec::new(),
            dropout: 0.0,
            residual: false,
        }
    }

    pub fn deep(dropout: f64) -> Self {
        MlpSpec {
            hidden: vec![32; 3],
            dropout,
            residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layers need at least one unit"));
        }
        Ok(())
    }
}

/// Slots of an allocated MLP: `(weight in x out, bias 1 x out)` per layer,
/// the last one being the logit head.
#[derive(Debug, Clone)]
pub struct MlpSlots {
    pub layers: Vec<(SlotId, SlotId)>,
    pub input: usize,
}

pub fn allocate_mlp(store: &mut ParameterStore, input: usize, spec: &MlpSpec) -> Result<MlpSlots> {
    spec.validate()?;
    let mut widths = vec![input];
    widths.extend(&spec.hidden);
    widths.push(1);
    let mut layers = Vec::new();
    for (k, w) in widths.windows(2).enumerate() {
        let prefix = if k == spec.hidden.len() {
            "head".to_string()
        } else {
            format!("mlp.{k}")
        };
        let weight = store.add(
            &format!("{prefix}.w"),
            w[0],
            w[1],
            Init::Xavier {
                fan_in: w[0],
                fan_out: w[1],
            },
        )?;
        let bias = store.add(&format!("{prefix}.b"), 1, w[1], Init::Constant(0.0))?;
        layers.push((weight, bias));
    }
    Ok(MlpSlots { layers, input })
}

/// Inverted-dropout mask: kept entries become `1 / (1 - p)`.
pub fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Value-level forward; returns the head output (length 1).
pub fn mlp_forward<R: Rng + ?Sized>(
    spec: &MlpSpec,
    slots: &MlpSlots,
    z0: &DenseVector,
    store: &ParameterStore,
    mut dropout: Option<&mut R>,
) -> Result<DenseVector> {
    if z0.len() != slots.input {
        return Err(Error::shape(format!(
            "MLP input {} != {}",
            z0.len(),
            slots.input
        )));
    }
    let mut x = DenseMatrix::from_vec(1, z0.len(), z0.as_slice().to_vec())?;
    let last = slots.layers.len() - 1;
    for (k, &(w, b)) in slots.layers.iter().enumerate() {
        let mut y = x.matmul(store.value(w))?;
        y.add_assign(store.value(b))?;
        if k < last {
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            if spec.residual && y.shape() == x.shape() {
                y.add_assign(&x)?;
            }
            if let Some(rng) = dropout.as_deref_mut() {
                if spec.dropout > 0.0 {
                    let mask = dropout_mask(rng, y.len(), spec.dropout);
                    y.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                }
            }
        }
        x = y;
    }
    Ok(DenseVector::new(x.into_data()))
}

/// Tape forward of a `1 x input` row to a `1 x 1` logit.
pub fn mlp_node<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParameterStore,
    spec: &MlpSpec,
    slots: &MlpSlots,
    row: NodeId,
    mut dropout: Option<&mut R>,
) -> Result<NodeId> {
    if tape.value(row).shape() != (1, slots.input) {
        return Err(Error::shape(format!(
            "MLP input {:?}, expected (1, {})",
            tape.value(row).shape(),
            slots.input
        )));
    }
    let mut x = row;
    let last = slots.layers.len() - 1;
    for (k, &(w, b)) in slots.layers.iter().enumerate() {
        let wn = tape.param(store, w);
        let bn = tape.param(store, b);
        let xw = tape.matmul(x, wn)?;
        let mut y = tape.add(xw, bn)?;
        if k < last {
            y = tape.relu(y);
            if spec.residual && tape.value(y).shape() == tape.value(x).shape() {
                y = tape.add(y, x)?;
            }
            if let Some(rng) = dropout.as_deref_mut() {
                if spec.dropout > 0.0 {
                    let len = tape.value(y).len();
                    let mask = tape.constant(DenseMatrix::from_vec(
                        1,
                        len,
                        dropout_mask(rng, len, spec.dropout),
                    )?);
                    y = tape.hadamard(y, mask)?;
                }
            }
        }
        x = y;
    }
    Ok(x)
}

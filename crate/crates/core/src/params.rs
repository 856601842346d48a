//! Named parameter slots with gradient buffers, seeded initialization, and
//! the JSON checkpoint container.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotId(pub(crate) usize);

impl SlotId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a slot is filled by [`ParameterStore::init_xavier`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    Constant(f64),
}

#[derive(Debug, Clone)]
pub struct Slot {
    pub name: String,
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
    pub trainable: bool,
    pub init: Init,
}

#[derive(Debug, Clone)]
pub struct ParameterStore {
    slots: Vec<Slot>,
    index: HashMap<String, SlotId>,
    rng: ChaCha8Rng,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            slots: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Allocates a zero-filled trainable slot.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<SlotId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter slot `{name}`")));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!("slot `{name}` has an empty shape")));
        }
        let id = SlotId(self.slots.len());
        self.slots.push(Slot {
            name: name.to_string(),
            value: DenseMatrix::zeros(rows, cols),
            grad: DenseMatrix::zeros(rows, cols),
            trainable: true,
            init,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<SlotId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter slot `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&DenseMatrix> {
        Ok(&self.slots[self.id(name)?.0].value)
    }

    pub fn slot(&self, id: SlotId) -> &Slot {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: SlotId) -> &mut Slot {
        &mut self.slots[id.0]
    }

    pub fn value(&self, id: SlotId) -> &DenseMatrix {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: SlotId) -> &mut DenseMatrix {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: SlotId) -> &DenseMatrix {
        &self.slots[id.0].grad
    }

    pub fn grad_mut(&mut self, id: SlotId) -> &mut DenseMatrix {
        &mut self.slots[id.0].grad
    }

    pub fn set_trainable(&mut self, id: SlotId, trainable: bool) {
        self.slots[id.0].trainable = trainable;
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [Slot] {
        &mut self.slots
    }

    pub fn ids(&self) -> impl Iterator<Item = SlotId> {
        (0..self.slots.len()).map(SlotId)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.fill(0.0);
        }
    }

    /// Refills every slot from its init rule, in slot order, from a fresh
    /// stream seeded with `seed`.
    pub fn init_xavier(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in &mut self.slots {
            match slot.init {
                Init::Xavier { fan_in, fan_out } => {
                    let a = xavier_bound(fan_in, fan_out);
                    for x in slot.value.data_mut() {
                        *x = self.rng.gen_range(-a..a);
                    }
                }
                Init::Constant(c) => slot.value.fill(c),
            }
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        for slot in &mut self.slots {
            let src = other.get(&slot.name)?;
            if src.shape() != slot.value.shape() {
                return Err(Error::shape(format!("slot `{}` shape differs", slot.name)));
            }
            slot.value = src.clone();
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            slots: self
                .slots
                .iter()
                .map(|s| CheckpointSlot {
                    name: s.name.clone(),
                    shape: [s.value.rows(), s.value.cols()],
                    values: s.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Loads values by slot name; every slot of `self` must be present with
    /// the same shape.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let by_name: HashMap<&str, &CheckpointSlot> =
            ckpt.slots.iter().map(|s| (s.name.as_str(), s)).collect();
        for slot in &mut self.slots {
            let src = by_name
                .get(slot.name.as_str())
                .ok_or_else(|| Error::data(format!("checkpoint has no slot `{}`", slot.name)))?;
            if src.shape != [slot.value.rows(), slot.value.cols()] {
                return Err(Error::data(format!(
                    "checkpoint slot `{}` has shape {:?}, expected {}x{}",
                    slot.name,
                    src.shape,
                    slot.value.rows(),
                    slot.value.cols()
                )));
            }
            slot.value = DenseMatrix::from_vec(src.shape[0], src.shape[1], src.values.clone())?;
        }
        Ok(())
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

const CHECKPOINT_FORMAT: &str = "sam-ctr-checkpoint/1";

/// Self-describing parameter container: slot name, shape, row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub slots: Vec<CheckpointSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSlot {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!(
                "unknown checkpoint format `{}`",
                ckpt.format
            )));
        }
        for s in &ckpt.slots {
            if s.shape[0] * s.shape[1] != s.values.len() {
                return Err(Error::data(format!("slot `{}` is truncated", s.name)));
            }
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new(0);
        s.add("w", 2, 2, Init::Constant(0.0)).unwrap();
        assert!(matches!(
            s.add("w", 1, 1, Init::Constant(0.0)),
            Err(Error::Config(_))
        ));
        assert!(s.id("nope").is_err());
    }

    #[test]
    fn xavier_is_seeded_and_bounded() {
        let build = |seed| {
            let mut s = ParameterStore::new(0);
            s.add(
                "emb",
                1000,
                16,
                Init::Xavier {
                    fan_in: 1000,
                    fan_out: 16,
                },
            )
            .unwrap();
            s.init_xavier(seed);
            s
        };
        let a = build(7);
        let b = build(7);
        assert_eq!(a.get("emb").unwrap(), b.get("emb").unwrap());
        assert_ne!(a.get("emb").unwrap(), build(8).get("emb").unwrap());
        let bound = xavier_bound(1000, 16);
        let vals = a.get("emb").unwrap().data();
        assert!(vals.iter().all(|x| x.abs() < bound));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 3.0 * bound / (16000f64).sqrt());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut s = ParameterStore::new(0);
        s.add(
            "a",
            3,
            4,
            Init::Xavier {
                fan_in: 3,
                fan_out: 4,
            },
        )
        .unwrap();
        s.add("b", 1, 1, Init::Constant(0.1 + 0.2)).unwrap();
        s.init_xavier(11);
        s.value_mut(SlotId(0)).set(0, 0, 1e-300);
        s.value_mut(SlotId(0)).set(0, 1, -std::f64::consts::PI);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        s.to_checkpoint().save(&path).unwrap();
        let mut t = ParameterStore::new(1);
        t.add("a", 3, 4, Init::Constant(0.0)).unwrap();
        t.add("b", 1, 1, Init::Constant(0.0)).unwrap();
        t.load_checkpoint(&Checkpoint::load(&path).unwrap())
            .unwrap();
        for (x, y) in s.slots().iter().zip(t.slots()) {
            let xb: Vec<u64> = x.value.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn checkpoint_shape_mismatch_is_data_error() {
        let mut s = ParameterStore::new(0);
        s.add("a", 2, 2, Init::Constant(1.0)).unwrap();
        s.init_xavier(0);
        let ckpt = s.to_checkpoint();
        let mut t = ParameterStore::new(0);
        t.add("a", 4, 1, Init::Constant(0.0)).unwrap();
        assert!(matches!(t.load_checkpoint(&ckpt), Err(Error::Data(_))));
    }
}

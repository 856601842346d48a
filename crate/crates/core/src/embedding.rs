//! Per-field lookup tables mapping category indices into the utility space.

use crate::data::{EncodedRecord, FieldSchema};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::params::{Init, ParameterStore, SlotId};
use crate::tape::{NodeId, Tape};

/// The embedded fields f = [f_1, ..., f_n] of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFields {
    pub fields: Vec<DenseVector>,
}

impl LatentFields {
    pub fn new(fields: Vec<DenseVector>) -> Result<Self> {
        let d = fields.first().map(|f| f.len()).unwrap_or(0);
        if fields.is_empty() || d == 0 || fields.iter().any(|f| f.len() != d) {
            return Err(Error::shape(
                "latent fields must be non-empty and share one width",
            ));
        }
        Ok(LatentFields { fields })
    }

    pub fn n(&self) -> usize {
        self.fields.len()
    }

    pub fn dim(&self) -> usize {
        self.fields[0].len()
    }

    /// Stacked n x d matrix, row i = f_i.
    pub fn to_matrix(&self) -> DenseMatrix {
        let data = self
            .fields
            .iter()
            .flat_map(|f| f.as_slice().iter().copied())
            .collect();
        DenseMatrix::from_vec(self.n(), self.dim(), data).expect("uniform widths")
    }

    pub fn from_matrix(m: &DenseMatrix) -> Self {
        LatentFields {
            fields: (0..m.rows()).map(|r| m.row_vector(r)).collect(),
        }
    }
}

/// Field-aware latent vectors: `get(i, t)` is field i's vector for target field t.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldAwareLatent {
    n: usize,
    vectors: Vec<Option<DenseVector>>,
}

impl FieldAwareLatent {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, t: usize) -> Result<&DenseVector> {
        self.vectors[i * self.n + t]
            .as_ref()
            .ok_or_else(|| Error::contract(format!("no field-aware vector for ({i}, {t})")))
    }
}

/// One `vocab_i x d` matrix per field.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    slots: Vec<SlotId>,
    dim: usize,
}

impl EmbeddingTable {
    pub fn allocate(
        store: &mut ParameterStore,
        prefix: &str,
        schema: &FieldSchema,
        dim: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be at least 1"));
        }
        let slots = schema
            .fields
            .iter()
            .enumerate()
            .map(|(i, f)| {
                store.add(
                    &format!("{prefix}.{i}"),
                    f.vocab_size,
                    dim,
                    Init::Xavier {
                        fan_in: f.vocab_size,
                        fan_out: dim,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbeddingTable { slots, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slots(&self) -> &[SlotId] {
        &self.slots
    }

    fn check(&self, store: &ParameterStore, record: &EncodedRecord) -> Result<()> {
        if record.indices.len() != self.slots.len() {
            return Err(Error::contract(format!(
                "record has {} fields, table has {}",
                record.indices.len(),
                self.slots.len()
            )));
        }
        for (&slot, &idx) in self.slots.iter().zip(&record.indices) {
            if idx as usize >= store.value(slot).rows() {
                return Err(Error::contract(format!(
                    "index {idx} out of range for `{}`",
                    store.slot(slot).name
                )));
            }
        }
        Ok(())
    }

    /// f_i = row x_i of W_i.
    pub fn lookup(&self, store: &ParameterStore, record: &EncodedRecord) -> Result<LatentFields> {
        self.check(store, record)?;
        LatentFields::new(
            self.slots
                .iter()
                .zip(&record.indices)
                .map(|(&s, &idx)| store.value(s).row_vector(idx as usize))
                .collect(),
        )
    }

    /// Stacked n x d lookup on the tape.
    pub fn lookup_node(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        record: &EncodedRecord,
    ) -> Result<NodeId> {
        self.check(store, record)?;
        tape.lookup(
            store,
            self.slots
                .iter()
                .zip(&record.indices)
                .map(|(&s, &idx)| (s, idx as usize))
                .collect(),
        )
    }
}

/// One `vocab_i x d` matrix per ordered field pair (i, t), t != i.
#[derive(Debug, Clone)]
pub struct FieldAwareEmbeddingTable {
    n: usize,
    slots: Vec<Option<SlotId>>,
    dim: usize,
}

impl FieldAwareEmbeddingTable {
    pub fn allocate(
        store: &mut ParameterStore,
        prefix: &str,
        schema: &FieldSchema,
        dim: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be at least 1"));
        }
        let n = schema.n_fields();
        let mut slots = Vec::with_capacity(n * n);
        for (i, f) in schema.fields.iter().enumerate() {
            for t in 0..n {
                slots.push(if t == i {
                    None
                } else {
                    Some(store.add(
                        &format!("{prefix}.{i}.{t}"),
                        f.vocab_size,
                        dim,
                        Init::Xavier {
                            fan_in: f.vocab_size,
                            fan_out: dim,
                        },
                    )?)
                });
            }
        }
        Ok(FieldAwareEmbeddingTable { n, slots, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrices(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    fn slot(&self, i: usize, t: usize) -> SlotId {
        self.slots[i * self.n + t].expect("t != i")
    }

    pub fn lookup(
        &self,
        store: &ParameterStore,
        record: &EncodedRecord,
    ) -> Result<FieldAwareLatent> {
        if record.indices.len() != self.n {
            return Err(Error::contract("record width differs from the table"));
        }
        let mut vectors = Vec::with_capacity(self.n * self.n);
        for i in 0..self.n {
            for t in 0..self.n {
                vectors.push(if t == i {
                    None
                } else {
                    let m = store.value(self.slot(i, t));
                    let idx = record.indices[i] as usize;
                    if idx >= m.rows() {
                        return Err(Error::contract(format!("index {idx} out of range")));
                    }
                    Some(m.row_vector(idx))
                });
            }
        }
        Ok(FieldAwareLatent { n: self.n, vectors })
    }

    /// For each ordered pair (i, j), rows f_{i,F(j)} and f_{j,F(i)}.
    pub fn pair_nodes(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        record: &EncodedRecord,
        pairs: &[(usize, usize)],
    ) -> Result<(NodeId, NodeId)> {
        if record.indices.len() != self.n {
            return Err(Error::contract("record width differs from the table"));
        }
        let left = pairs
            .iter()
            .map(|&(i, j)| (self.slot(i, j), record.indices[i] as usize))
            .collect();
        let right = pairs
            .iter()
            .map(|&(i, j)| (self.slot(j, i), record.indices[j] as usize))
            .collect();
        Ok((tape.lookup(store, left)?, tape.lookup(store, right)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_selects_rows_and_is_linear_in_one_hot() {
        let schema = FieldSchema::with_vocab_sizes(&[4, 6]).unwrap();
        let mut store = ParameterStore::new(0);
        let table = EmbeddingTable::allocate(&mut store, "emb", &schema, 3).unwrap();
        store.init_xavier(5);
        let rec = EncodedRecord {
            label: 0,
            indices: vec![2, 5],
        };
        let f = table.lookup(&store, &rec).unwrap();
        for (i, &idx) in rec.indices.iter().enumerate() {
            let w = store.value(table.slots()[i]);
            // W_i^T e_j
            let mut one_hot = DenseMatrix::zeros(w.rows(), 1);
            one_hot.set(idx as usize, 0, 1.0);
            let projected = w.transpose().matmul(&one_hot).unwrap();
            assert_eq!(projected.data(), f.fields[i].as_slice());
        }
        let bad = EncodedRecord {
            label: 0,
            indices: vec![4, 0],
        };
        assert!(matches!(
            table.lookup(&store, &bad),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn field_aware_table_has_n_times_n_minus_one_matrices() {
        let schema = FieldSchema::with_vocab_sizes(&[3, 3, 4]).unwrap();
        let mut store = ParameterStore::new(0);
        let t = FieldAwareEmbeddingTable::allocate(&mut store, "ffm", &schema, 2).unwrap();
        assert_eq!(t.matrices(), 6);
        store.init_xavier(1);
        let rec = EncodedRecord {
            label: 1,
            indices: vec![0, 1, 3],
        };
        let lat = t.lookup(&store, &rec).unwrap();
        assert!(lat.get(0, 0).is_err());
        assert_eq!(
            lat.get(2, 0).unwrap().as_slice(),
            store.get("ffm.2.0").unwrap().row(3)
        );
    }

    #[test]
    fn d_one_gives_scalar_weights() {
        let schema = FieldSchema::with_vocab_sizes(&[3, 3]).unwrap();
        let mut store = ParameterStore::new(0);
        let t = EmbeddingTable::allocate(&mut store, "w", &schema, 1).unwrap();
        store.init_xavier(2);
        let f = t
            .lookup(
                &store,
                &EncodedRecord {
                    label: 0,
                    indices: vec![1, 2],
                },
            )
            .unwrap();
        assert_eq!(f.dim(), 1);
        assert_eq!(store.trainable_count(), 6);
    }
}

//! Field schema, numeric discretization, and per-field vocabularies.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved index for values below the frequency threshold or never seen.
pub const OOV_INDEX: u32 = 0;
/// Reserved index for empty cells.
pub const MISSING_INDEX: u32 = 1;
/// First index handed to an observed value.
pub const FIRST_VALUE_INDEX: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub name: String,
    pub kind: FieldKind,
    /// Number of embedding rows, reserved indices included.
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub fields: Vec<FieldDescriptor>,
}

impl FieldSchema {
    pub fn new(fields: Vec<FieldDescriptor>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::config("a schema needs at least one field"));
        }
        if let Some(f) = fields
            .iter()
            .find(|f| f.vocab_size < FIRST_VALUE_INDEX as usize)
        {
            return Err(Error::config(format!(
                "field `{}` has vocabulary size {} (reserved indices need {})",
                f.name, f.vocab_size, FIRST_VALUE_INDEX
            )));
        }
        Ok(FieldSchema { fields })
    }

    /// Categorical schema with `categories[i]` observed values in field i.
    pub fn categorical(categories: &[usize]) -> Result<Self> {
        FieldSchema::new(
            categories
                .iter()
                .enumerate()
                .map(|(i, c)| FieldDescriptor {
                    name: format!("f{i}"),
                    kind: FieldKind::Categorical,
                    vocab_size: c + FIRST_VALUE_INDEX as usize,
                })
                .collect(),
        )
    }

    /// Categorical schema with the given full vocabulary sizes.
    pub fn with_vocab_sizes(sizes: &[usize]) -> Result<Self> {
        FieldSchema::new(
            sizes
                .iter()
                .enumerate()
                .map(|(i, &v)| FieldDescriptor {
                    name: format!("f{i}"),
                    kind: FieldKind::Categorical,
                    vocab_size: v,
                })
                .collect(),
        )
    }

    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.vocab_size).collect()
    }

    /// Number of distinct encoded records (saturating).
    pub fn combinations(&self) -> usize {
        self.fields
            .iter()
            .fold(1usize, |acc, f| acc.saturating_mul(f.vocab_size))
    }
}

/// Numeric-to-category rule: `floor(2 log x)` above 2, `trunc(x - 2)` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    /// Base of the logarithm; natural log by default.
    pub log_base: f64,
}

impl Default for Discretizer {
    fn default() -> Self {
        Discretizer {
            log_base: std::f64::consts::E,
        }
    }
}

impl Discretizer {
    pub fn key(&self, x: f64) -> i64 {
        if x > 2.0 {
            (2.0 * x.ln() / self.log_base.ln()).floor() as i64
        } else {
            (x - 2.0).trunc() as i64
        }
    }
}

/// Natural-log discretization of one numeric value.
pub fn discretize_numeric(x: f64) -> i64 {
    Discretizer::default().key(x)
}

/// One raw input line: label plus one optional cell per field.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub label: u8,
    pub values: Vec<Option<String>>,
}

/// Label plus exactly one category index per field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncodedRecord {
    pub label: u8,
    pub indices: Vec<u32>,
}

impl EncodedRecord {
    pub fn check(&self, schema: &FieldSchema) -> Result<()> {
        if self.indices.len() != schema.n_fields() {
            return Err(Error::contract(format!(
                "record has {} fields, schema has {}",
                self.indices.len(),
                schema.n_fields()
            )));
        }
        for (i, (&idx, f)) in self.indices.iter().zip(&schema.fields).enumerate() {
            if idx as usize >= f.vocab_size {
                return Err(Error::contract(format!(
                    "field {i} index {idx} outside vocabulary of {}",
                    f.vocab_size
                )));
            }
        }
        Ok(())
    }
}

/// Schema plus the value → index dictionary of every field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub schema: FieldSchema,
    pub discretizer: Discretizer,
    pub min_count: usize,
    pub dictionaries: Vec<BTreeMap<String, u32>>,
}

impl Vocabulary {
    fn cell_key(&self, kind: FieldKind, cell: &str) -> Result<String> {
        cell_key(kind, cell, &self.discretizer)
    }

    /// Total: missing cells map to the missing index, unknown values to OOV.
    pub fn encode(&self, raw: &RawRecord) -> Result<EncodedRecord> {
        if raw.values.len() != self.schema.n_fields() {
            return Err(Error::data(format!(
                "row has {} fields, schema has {}",
                raw.values.len(),
                self.schema.n_fields()
            )));
        }
        let mut indices = Vec::with_capacity(raw.values.len());
        for ((cell, field), dict) in raw
            .values
            .iter()
            .zip(&self.schema.fields)
            .zip(&self.dictionaries)
        {
            let idx = match cell {
                None => MISSING_INDEX,
                Some(c) => {
                    let key = self.cell_key(field.kind, c)?;
                    dict.get(&key).copied().unwrap_or(OOV_INDEX)
                }
            };
            indices.push(idx);
        }
        Ok(EncodedRecord {
            label: raw.label,
            indices,
        })
    }
}

fn cell_key(kind: FieldKind, cell: &str, disc: &Discretizer) -> Result<String> {
    match kind {
        FieldKind::Categorical => Ok(cell.to_string()),
        FieldKind::Numeric => {
            let x: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::data(format!("`{cell}` is not numeric")))?;
            if !x.is_finite() {
                return Err(Error::data(format!("`{cell}` is not finite")));
            }
            Ok(disc.key(x).to_string())
        }
    }
}

/// Counts values per field and indexes those seen at least `min_count`
/// times. Indices are assigned in sorted key order after the reserved ones.
pub fn build_vocab(
    records: &[RawRecord],
    fields: &[(String, FieldKind)],
    min_count: usize,
    discretizer: Discretizer,
) -> Result<Vocabulary> {
    if records.is_empty() {
        return Err(Error::domain("cannot build a vocabulary from zero records"));
    }
    if min_count < 1 {
        return Err(Error::domain("min_count must be at least 1"));
    }
    let mut counts: Vec<HashMap<String, usize>> = vec![HashMap::new(); fields.len()];
    for r in records {
        if r.values.len() != fields.len() {
            return Err(Error::data(format!(
                "row has {} fields, expected {}",
                r.values.len(),
                fields.len()
            )));
        }
        for ((cell, (_, kind)), c) in r.values.iter().zip(fields).zip(counts.iter_mut()) {
            if let Some(cell) = cell {
                *c.entry(cell_key(*kind, cell, &discretizer)?).or_insert(0) += 1;
            }
        }
    }
    let mut dictionaries = Vec::with_capacity(fields.len());
    let mut descriptors = Vec::with_capacity(fields.len());
    for ((name, kind), c) in fields.iter().zip(counts) {
        let kept: BTreeMap<String, usize> =
            c.into_iter().filter(|(_, n)| *n >= min_count).collect();
        let dict: BTreeMap<String, u32> = kept
            .into_keys()
            .enumerate()
            .map(|(i, k)| (k, FIRST_VALUE_INDEX + i as u32))
            .collect();
        descriptors.push(FieldDescriptor {
            name: name.clone(),
            kind: *kind,
            vocab_size: dict.len() + FIRST_VALUE_INDEX as usize,
        });
        dictionaries.push(dict);
    }
    Ok(Vocabulary {
        schema: FieldSchema::new(descriptors)?,
        discretizer,
        min_count,
        dictionaries,
    })
}

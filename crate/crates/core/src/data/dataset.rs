//! Encoded datasets, seeded splitting, batching, and the delimited text
//! formats on disk.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schema::{EncodedRecord, FieldSchema, RawRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FieldSchema,
    pub records: Vec<EncodedRecord>,
}

impl Dataset {
    pub fn new(schema: FieldSchema, records: Vec<EncodedRecord>) -> Result<Self> {
        for r in &records {
            r.check(&schema)?;
        }
        Ok(Dataset { schema, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub seed: u64,
}

/// Split sizes for `n` records: boundaries at `round(n * cumulative ratio)`.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::domain("split ratios must all be positive"));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::domain("split ratios must sum to 1"));
    }
    if n < 3 {
        return Err(Error::domain(format!(
            "{n} records cannot fill three splits"
        )));
    }
    let b1 = ((n as f64) * ratios[0]).round() as usize;
    let b2 = ((n as f64) * (ratios[0] + ratios[1])).round() as usize;
    let sizes = [b1, b2.saturating_sub(b1), n.saturating_sub(b2)];
    if sizes.contains(&0) {
        return Err(Error::domain(format!(
            "{n} records leave an empty split for ratios {ratios:?}"
        )));
    }
    Ok(sizes)
}

/// Seeded uniform permutation followed by contiguous slicing.
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let sizes = split_sizes(dataset.len(), ratios)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| Dataset {
        schema: dataset.schema.clone(),
        records: order[range]
            .iter()
            .map(|&i| dataset.records[i].clone())
            .collect(),
    };
    Ok(DatasetSplit {
        train: take(0..sizes[0]),
        valid: take(sizes[0]..sizes[0] + sizes[1]),
        test: take(sizes[0] + sizes[1]..dataset.len()),
        seed,
    })
}

/// Raw delimited text: label first, then one cell per field; empty = missing.
pub fn parse_raw(text: &str, delimiter: char, n_fields: usize) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(delimiter);
        let label = parse_label(cells.next().unwrap_or(""), lineno)?;
        let values: Vec<Option<String>> = cells
            .map(|c| {
                if c.is_empty() {
                    None
                } else {
                    Some(c.to_string())
                }
            })
            .collect();
        if values.len() != n_fields {
            return Err(Error::data(format!(
                "line {}: {} fields, expected {n_fields}",
                lineno + 1,
                values.len()
            )));
        }
        out.push(RawRecord { label, values });
    }
    Ok(out)
}

fn parse_label(cell: &str, lineno: usize) -> Result<u8> {
    match cell.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::data(format!(
            "line {}: label `{other}` is not 0 or 1",
            lineno + 1
        ))),
    }
}

pub fn read_raw(path: &Path, delimiter: char, n_fields: usize) -> Result<Vec<RawRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    parse_raw(&text, delimiter, n_fields)
}

pub fn format_raw(records: &[RawRecord], delimiter: char) -> String {
    let mut s = String::new();
    for r in records {
        let _ = write!(s, "{}", r.label);
        for v in &r.values {
            s.push(delimiter);
            if let Some(v) = v {
                s.push_str(v);
            }
        }
        s.push('\n');
    }
    s
}

/// Encoded records as tab-separated `label idx_1 ... idx_n`.
pub fn format_encoded(records: &[EncodedRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = write!(s, "{}", r.label);
        for i in &r.indices {
            let _ = write!(s, "\t{i}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_encoded(text: &str, schema: &FieldSchema) -> Result<Vec<EncodedRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split('\t');
        let label = parse_label(cells.next().unwrap_or(""), lineno)?;
        let indices = cells
            .map(|c| {
                c.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::data(format!("line {}: bad index `{c}`", lineno + 1)))
            })
            .collect::<Result<Vec<u32>>>()?;
        let rec = EncodedRecord { label, indices };
        rec.check(schema)
            .map_err(|e| Error::data(format!("line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_encoded(path: &Path, schema: &FieldSchema) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(Dataset {
        schema: schema.clone(),
        records: parse_encoded(&text, schema)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let schema = FieldSchema::categorical(&[3]).unwrap();
        let records = (0..n)
            .map(|i| EncodedRecord {
                label: (i % 2) as u8,
                indices: vec![(i % 5) as u32],
            })
            .collect();
        Dataset::new(schema, records).unwrap()
    }

    #[test]
    fn ten_records_split_eight_one_one() {
        let s = split(&toy(10), [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let data = toy(97);
        let a = split(&data, [0.8, 0.1, 0.1], 42).unwrap();
        let b = split(&data, [0.8, 0.1, 0.1], 42).unwrap();
        assert_eq!(a, b);
        let c = split(&data, [0.8, 0.1, 0.1], 43).unwrap();
        assert_ne!(a.train.records, c.train.records);
        let total = a.train.len() + a.valid.len() + a.test.len();
        assert_eq!(total, 97);
        for (got, ratio) in [
            (a.train.len(), 0.8),
            (a.valid.len(), 0.1),
            (a.test.len(), 0.1),
        ] {
            assert!((got as f64 - 97.0 * ratio).abs() <= 1.0);
        }
    }

    #[test]
    fn split_preconditions() {
        assert!(matches!(
            split(&toy(10), [1.0, 0.0, 0.0], 0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            split(&toy(2), [0.8, 0.1, 0.1], 0),
            Err(Error::Domain(_))
        ));
        assert!(split(&toy(10), [0.5, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn raw_and_encoded_text() {
        let text = "1\ta\t\n0\t\t3.5\n";
        let rows = parse_raw(text, '\t', 2).unwrap();
        assert_eq!(rows[0].values, vec![Some("a".to_string()), None]);
        assert_eq!(format_raw(&rows, '\t'), text);
        assert!(parse_raw("2\ta\tb\n", '\t', 2).is_err());
        assert!(parse_raw("1,a\n", ',', 2).is_err());
        let schema = FieldSchema::categorical(&[2, 2]).unwrap();
        let enc = parse_encoded("1\t0\t3\n", &schema).unwrap();
        assert_eq!(format_encoded(&enc), "1\t0\t3\n");
        assert!(parse_encoded("1\t0\t4\n", &schema).is_err());
    }
}

//! Ingestion, encoding, splitting, and synthetic generation.

pub mod dataset;
pub mod schema;
pub mod synthetic;

pub use dataset::{split, Dataset, DatasetSplit};
pub use schema::{
    build_vocab, discretize_numeric, Discretizer, EncodedRecord, FieldDescriptor, FieldKind,
    FieldSchema, RawRecord, Vocabulary, FIRST_VALUE_INDEX, MISSING_INDEX, OOV_INDEX,
};
pub use synthetic::{generate_dcm, LabelMode, SyntheticData, SyntheticSpec, UtilityFamily};

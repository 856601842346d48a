//! The feature-interaction (FI) layer: similarity, utility, neighborhood,
//! the pairwise operator `b` and the neighborhood sum `B`, and the catalog of
//! FI rows for every zoo model.
//!
//! This module evaluates FI on plain values, one record at a time. The model
//! zoo runs vectorized equivalents on the tape; the two are checked against
//! each other in the model tests.

use serde::{Deserialize, Serialize};

use crate::embedding::{FieldAwareLatent, LatentFields};
use crate::error::{Error, Result};
use crate::kind::ModelKind;
use crate::linalg::{dot, hadamard, relu, softmax_weights, DenseMatrix, DenseVector};
use crate::params::ParameterStore;

/// Parameter slot names shared by the catalog and the model builder.
pub mod slots {
    pub const FWFM_R: &str = "fi.fwfm.r";
    pub const IPNN_THETA: &str = "fi.ipnn.theta";
    pub const DCN_W: &str = "fi.dcn.w";
    pub const CIN_W: &str = "fi.cin.w";
    pub const AFM_W: &str = "fi.afm.w";
    pub const AFM_H: &str = "fi.afm.h";
    pub const AFM_B: &str = "fi.afm.b";
    pub const AFM_P: &str = "fi.afm.p";
    pub const AUTOINT_Q: &str = "fi.autoint.q";
    pub const AUTOINT_K: &str = "fi.autoint.k";
    pub const AUTOINT_V: &str = "fi.autoint.v";
    pub const SAM2_W: &str = "fi.sam2.w";

    pub fn sam3_k(layer: usize) -> String {
        format!("fi.sam3.{layer}.k")
    }

    pub fn sam3_w(layer: usize) -> String {
        format!("fi.sam3.{layer}.w")
    }
}

/// How a scalar weight slot is indexed by the pair (i, j).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "index", rename_all = "snake_case")]
pub enum ScalarWeights {
    /// `n x 1`, entry i.
    PerField { slot: String },
    /// `n(n-1)/2 x 1`, one entry per unordered pair i != j.
    SymmetricPair { slot: String },
    /// `n x n`, entry (i, j).
    Pair { slot: String },
}

impl ScalarWeights {
    fn lookup(&self, store: &ParameterStore, (i, j): (usize, usize), n: usize) -> Result<f64> {
        match self {
            ScalarWeights::PerField { slot } => Ok(store.get(slot)?.get(i, 0)),
            ScalarWeights::Pair { slot } => Ok(store.get(slot)?.get(i, j)),
            ScalarWeights::SymmetricPair { slot } => {
                if i == j {
                    return Err(Error::contract("symmetric pair weights exclude i = j"));
                }
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                Ok(store.get(slot)?.get(triangle_index(a, b, n), 0))
            }
        }
    }
}

/// Position of the unordered pair (i, j), i < j, in row-major upper-triangle order.
pub fn triangle_index(i: usize, j: usize, n: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimilaritySpec {
    Constant {
        value: f64,
    },
    One,
    InnerProduct,
    /// `<Q f_i, K v>`; a missing `q` means the identity.
    ProjectedInner {
        q: Option<String>,
        k: String,
    },
    /// Softmax over the neighborhood of the wrapped raw score.
    SoftmaxNormalized {
        inner: Box<SimilaritySpec>,
    },
    /// `h . relu(W (f_i . v) + b)`, softmax-normalized over all pairs.
    AfmAttention {
        w: String,
        h: String,
        b: String,
    },
}

impl SimilaritySpec {
    pub fn softmax(inner: SimilaritySpec) -> Self {
        SimilaritySpec::SoftmaxNormalized {
            inner: Box::new(inner),
        }
    }

    pub fn is_normalized(&self) -> bool {
        matches!(
            self,
            SimilaritySpec::SoftmaxNormalized { .. } | SimilaritySpec::AfmAttention { .. }
        )
    }

    /// Unnormalized score S(f_i, v).
    pub fn score(&self, store: &ParameterStore, fi: &DenseVector, v: &DenseVector) -> Result<f64> {
        check_len(fi, v)?;
        match self {
            SimilaritySpec::Constant { value } => Ok(*value),
            SimilaritySpec::One => Ok(1.0),
            SimilaritySpec::InnerProduct => Ok(dot(fi.as_slice(), v.as_slice())),
            SimilaritySpec::ProjectedInner { q, k } => {
                let qf = match q {
                    Some(q) => store.get(q)?.matvec(fi)?,
                    None => fi.clone(),
                };
                let kv = store.get(k)?.matvec(v)?;
                Ok(dot(qf.as_slice(), kv.as_slice()))
            }
            SimilaritySpec::SoftmaxNormalized { inner } => inner.score(store, fi, v),
            SimilaritySpec::AfmAttention { w, h, b } => {
                let prod = hadamard(fi, v)?;
                let pre = store.get(w)?.matvec(&prod)?;
                let b = store.get(b)?;
                let h = store.get(h)?;
                Ok(pre
                    .as_slice()
                    .iter()
                    .enumerate()
                    .map(|(t, x)| h.data()[t] * relu(x + b.data()[t]))
                    .sum())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilitySpec {
    /// Scalar 1.
    One,
    /// `v` itself.
    Identity,
    /// Scalar weight.
    ScalarWeight { weights: ScalarWeights },
    /// `w . v` with a scalar weight per target field.
    ScaledIdentity { weights: ScalarWeights },
    /// Scalar `<theta_i, theta_j>`, rows of an `n x d` slot.
    ScalarInner { theta: String },
    /// `W_{i,j}`, row `i n + j` of an `n^2 x d` slot.
    VectorWeight { table: String },
    /// `f_i . v` element-wise.
    Hadamard,
    /// `V v`.
    LinearMap { v: String },
    /// Scalar `p . (f_i . v)`.
    ProjectedHadamard { p: String },
}

impl UtilitySpec {
    pub fn is_scalar(&self) -> bool {
        matches!(
            self,
            UtilitySpec::One
                | UtilitySpec::ScalarWeight { .. }
                | UtilitySpec::ScalarInner { .. }
                | UtilitySpec::ProjectedHadamard { .. }
        )
    }

    pub fn evaluate(
        &self,
        store: &ParameterStore,
        fi: &DenseVector,
        v: &DenseVector,
        pair: (usize, usize),
        n: usize,
    ) -> Result<DenseVector> {
        check_len(fi, v)?;
        let (i, j) = pair;
        Ok(match self {
            UtilitySpec::One => DenseVector::new(vec![1.0]),
            UtilitySpec::Identity => v.clone(),
            UtilitySpec::ScalarWeight { weights } => {
                DenseVector::new(vec![weights.lookup(store, pair, n)?])
            }
            UtilitySpec::ScaledIdentity { weights } => v.scaled(weights.lookup(store, pair, n)?),
            UtilitySpec::ScalarInner { theta } => {
                let t = store.get(theta)?;
                DenseVector::new(vec![dot(t.row(i), t.row(j))])
            }
            UtilitySpec::VectorWeight { table } => store.get(table)?.row_vector(i * n + j),
            UtilitySpec::Hadamard => hadamard(fi, v)?,
            UtilitySpec::LinearMap { v: map } => store.get(map)?.matvec(v)?,
            UtilitySpec::ProjectedHadamard { p } => {
                let p = store.get(p)?;
                DenseVector::new(vec![dot(p.data(), hadamard(fi, v)?.as_slice())])
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborhoodSpec {
    SelfOnly,
    AllOthers,
    All,
    OrderedPairs,
}

impl NeighborhoodSpec {
    /// Neighbor indices of target field `i` among `n`.
    pub fn resolve(self, i: usize, n: usize) -> Vec<usize> {
        match self {
            NeighborhoodSpec::SelfOnly => vec![i],
            NeighborhoodSpec::AllOthers => (0..n).filter(|&j| j != i).collect(),
            NeighborhoodSpec::All | NeighborhoodSpec::OrderedPairs => (0..n).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arity {
    PerField,
    PerPair,
}

/// Which ordered pairs a per-pair FI emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSet {
    /// All n^2 ordered pairs including i = j.
    #[default]
    All,
    /// Only i < j.
    Upper,
}

impl PairSet {
    pub fn pairs(self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..n {
            let start = match self {
                PairSet::All => 0,
                PairSet::Upper => i + 1,
            };
            for j in start..n {
                out.push((i, j));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FIConfig {
    pub similarity: SimilaritySpec,
    pub utility: UtilitySpec,
    pub neighborhood: NeighborhoodSpec,
    pub arity: Arity,
    /// Pairs read field-aware vectors f_{i,F(j)} and f_{j,F(i)}.
    #[serde(default)]
    pub field_aware: bool,
    #[serde(default)]
    pub pairs: PairSet,
    /// Literal `f_i . f_i` element-wise utility instead of `f_i . f_j`.
    #[serde(default)]
    pub self_hadamard: bool,
}

impl FIConfig {
    fn per_field(
        similarity: SimilaritySpec,
        utility: UtilitySpec,
        neighborhood: NeighborhoodSpec,
    ) -> Self {
        FIConfig {
            similarity,
            utility,
            neighborhood,
            arity: Arity::PerField,
            field_aware: false,
            pairs: PairSet::All,
            self_hadamard: false,
        }
    }

    /// The catalog row of `kind`; `layer` selects SAM3 slot names.
    pub fn for_model(kind: ModelKind, layer: usize) -> Self {
        use NeighborhoodSpec::*;
        use SimilaritySpec as S;
        use UtilitySpec as U;
        match kind {
            ModelKind::Lr | ModelKind::DeepFmDeep | ModelKind::Sam1 => {
                FIConfig::per_field(S::One, U::Identity, SelfOnly)
            }
            ModelKind::Fm => FIConfig::per_field(S::InnerProduct, U::One, AllOthers),
            ModelKind::Ffm => FIConfig {
                field_aware: true,
                ..FIConfig::per_field(S::InnerProduct, U::One, AllOthers)
            },
            ModelKind::Fwfm => FIConfig::per_field(
                S::InnerProduct,
                U::ScalarWeight {
                    weights: ScalarWeights::SymmetricPair {
                        slot: slots::FWFM_R.into(),
                    },
                },
                AllOthers,
            ),
            ModelKind::Ipnn => FIConfig::per_field(
                S::InnerProduct,
                U::ScalarInner {
                    theta: slots::IPNN_THETA.into(),
                },
                All,
            ),
            ModelKind::Dcn => FIConfig::per_field(
                S::One,
                U::ScaledIdentity {
                    weights: ScalarWeights::PerField {
                        slot: slots::DCN_W.into(),
                    },
                },
                SelfOnly,
            ),
            ModelKind::Cin2 => FIConfig::per_field(
                S::InnerProduct,
                U::ScalarWeight {
                    weights: ScalarWeights::Pair {
                        slot: slots::CIN_W.into(),
                    },
                },
                All,
            ),
            ModelKind::Afm => FIConfig::per_field(
                S::AfmAttention {
                    w: slots::AFM_W.into(),
                    h: slots::AFM_H.into(),
                    b: slots::AFM_B.into(),
                },
                U::ProjectedHadamard {
                    p: slots::AFM_P.into(),
                },
                AllOthers,
            ),
            ModelKind::AutoInt => FIConfig::per_field(
                S::softmax(S::ProjectedInner {
                    q: Some(slots::AUTOINT_Q.into()),
                    k: slots::AUTOINT_K.into(),
                }),
                U::LinearMap {
                    v: slots::AUTOINT_V.into(),
                },
                All,
            ),
            ModelKind::Sam2A | ModelKind::Sam2E => FIConfig {
                arity: Arity::PerPair,
                ..FIConfig::per_field(
                    S::InnerProduct,
                    if kind == ModelKind::Sam2A {
                        U::VectorWeight {
                            table: slots::SAM2_W.into(),
                        }
                    } else {
                        U::Hadamard
                    },
                    OrderedPairs,
                )
            },
            ModelKind::Sam3A | ModelKind::Sam3E => FIConfig::per_field(
                S::softmax(S::ProjectedInner {
                    q: None,
                    k: slots::sam3_k(layer),
                }),
                if kind == ModelKind::Sam3A {
                    U::VectorWeight {
                        table: slots::sam3_w(layer),
                    }
                } else {
                    U::Hadamard
                },
                All,
            ),
        }
    }

    /// Toggles softmax normalization of a projected similarity.
    pub fn with_softmax(mut self, on: bool) -> Self {
        self.similarity = match (self.similarity, on) {
            (SimilaritySpec::SoftmaxNormalized { inner }, false) => *inner,
            (s @ SimilaritySpec::ProjectedInner { .. }, true) => SimilaritySpec::softmax(s),
            (s, _) => s,
        };
        self
    }

    pub fn with_pairs(mut self, pairs: PairSet) -> Self {
        self.pairs = pairs;
        self
    }

    pub fn with_self_hadamard(mut self, on: bool) -> Self {
        self.self_hadamard = on;
        self
    }
}

/// The catalog row for a model name.
pub fn fi_catalog(model_name: &str) -> Result<FIConfig> {
    Ok(FIConfig::for_model(model_name.parse()?, 0))
}

fn check_len(a: &DenseVector, b: &DenseVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `S(f_i, v) U(f_i, v)`. A normalized similarity contributes its raw score.
pub fn b_pair(
    s: &SimilaritySpec,
    u: &UtilitySpec,
    store: &ParameterStore,
    fi: &DenseVector,
    v: &DenseVector,
    pair: (usize, usize),
    n: usize,
) -> Result<DenseVector> {
    let score = s.score(store, fi, v)?;
    Ok(u.evaluate(store, fi, v, pair, n)?.scaled(score))
}

/// `sum_v S(f_i, v) U(f_i, v)` over the resolved neighborhood `(j, v)` of
/// field `i`, with joint softmax weights when `s` is normalized.
pub fn b_sum(
    s: &SimilaritySpec,
    u: &UtilitySpec,
    store: &ParameterStore,
    i: usize,
    fi: &DenseVector,
    neighbors: &[(usize, &DenseVector)],
    n: usize,
) -> Result<DenseVector> {
    if neighbors.is_empty() {
        return Err(Error::domain("empty neighborhood"));
    }
    let scores = neighbors
        .iter()
        .map(|(_, v)| s.score(store, fi, v))
        .collect::<Result<Vec<f64>>>()?;
    let weights = if s.is_normalized() {
        softmax_weights(&scores)?
    } else {
        scores
    };
    let mut acc: Option<DenseVector> = None;
    for ((j, v), w) in neighbors.iter().zip(weights) {
        let term = u.evaluate(store, fi, v, (i, *j), n)?.scaled(w);
        match acc.as_mut() {
            Some(a) => a.add_assign(&term)?,
            None => acc = Some(term),
        }
    }
    Ok(acc.expect("nonempty"))
}

/// Plain or field-aware embedded fields.
#[derive(Debug, Clone, Copy)]
pub enum FiInput<'a> {
    Shared(&'a LatentFields),
    FieldAware(&'a FieldAwareLatent),
}

impl<'a> From<&'a LatentFields> for FiInput<'a> {
    fn from(f: &'a LatentFields) -> Self {
        FiInput::Shared(f)
    }
}

impl<'a> From<&'a FieldAwareLatent> for FiInput<'a> {
    fn from(f: &'a FieldAwareLatent) -> Self {
        FiInput::FieldAware(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FiOutput {
    /// z_i for each field.
    PerField(Vec<DenseVector>),
    /// T[i][j] for ordered pairs, row-major over an `n x n` grid; pairs
    /// outside the configured set are `None`.
    PerPair {
        n: usize,
        cells: Vec<Option<DenseVector>>,
    },
}

impl FiOutput {
    pub fn per_field(&self) -> Option<&[DenseVector]> {
        match self {
            FiOutput::PerField(z) => Some(z),
            FiOutput::PerPair { .. } => None,
        }
    }

    pub fn pair(&self, i: usize, j: usize) -> Option<&DenseVector> {
        match self {
            FiOutput::PerPair { n, cells } => cells[i * n + j].as_ref(),
            FiOutput::PerField(_) => None,
        }
    }

    /// Stacked output: per-field rows, or present pair cells in row-major order.
    pub fn to_matrix(&self) -> DenseMatrix {
        let rows: Vec<&DenseVector> = match self {
            FiOutput::PerField(z) => z.iter().collect(),
            FiOutput::PerPair { cells, .. } => cells.iter().flatten().collect(),
        };
        let cols = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| r.as_slice().iter().copied())
            .collect();
        DenseMatrix::from_vec(rows.len(), cols, data).expect("uniform rows")
    }
}

/// Evaluates one FI layer on one record's embedded fields.
pub fn fi_forward(config: &FIConfig, f: FiInput<'_>, store: &ParameterStore) -> Result<FiOutput> {
    match (config.field_aware, f) {
        (true, FiInput::FieldAware(fa)) => return field_aware_forward(config, fa, store),
        (false, FiInput::Shared(_)) => {}
        _ => {
            return Err(Error::contract(
                "FI input does not match the config's field awareness",
            ))
        }
    }
    let FiInput::Shared(f) = f else {
        unreachable!()
    };
    let n = f.n();
    let fields = &f.fields;

    if config.arity == Arity::PerPair {
        let mut cells = vec![None; n * n];
        for (i, j) in config.pairs.pairs(n) {
            let other = if config.self_hadamard {
                &fields[i]
            } else {
                &fields[j]
            };
            let score = config.similarity.score(store, &fields[i], &fields[j])?;
            let utility = config
                .utility
                .evaluate(store, &fields[i], other, (i, j), n)?;
            cells[i * n + j] = Some(utility.scaled(score));
        }
        return Ok(FiOutput::PerPair { n, cells });
    }

    if let SimilaritySpec::AfmAttention { .. } = config.similarity {
        return afm_forward(config, f, store);
    }

    let z = (0..n)
        .map(|i| {
            let neighbors: Vec<(usize, &DenseVector)> = config
                .neighborhood
                .resolve(i, n)
                .into_iter()
                .map(|j| (j, &fields[j]))
                .collect();
            b_sum(
                &config.similarity,
                &config.utility,
                store,
                i,
                &fields[i],
                &neighbors,
                n,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FiOutput::PerField(z))
}

/// Attention weights normalized over every ordered pair i != j at once.
fn afm_forward(config: &FIConfig, f: &LatentFields, store: &ParameterStore) -> Result<FiOutput> {
    let n = f.n();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let scores = pairs
        .iter()
        .map(|&(i, j)| config.similarity.score(store, &f.fields[i], &f.fields[j]))
        .collect::<Result<Vec<_>>>()?;
    let weights = softmax_weights(&scores)?;
    let mut z = vec![DenseVector::zeros(1); n];
    for (&(i, j), a) in pairs.iter().zip(weights) {
        let u = config
            .utility
            .evaluate(store, &f.fields[i], &f.fields[j], (i, j), n)?;
        z[i].add_assign(&u.scaled(a))?;
    }
    Ok(FiOutput::PerField(z))
}

fn field_aware_forward(
    config: &FIConfig,
    f: &FieldAwareLatent,
    store: &ParameterStore,
) -> Result<FiOutput> {
    let n = f.n();
    let z = (0..n)
        .map(|i| {
            let mut acc = DenseVector::zeros(1);
            for j in config.neighborhood.resolve(i, n) {
                let (a, b) = (f.get(i, j)?, f.get(j, i)?);
                acc.add_assign(&b_pair(
                    &config.similarity,
                    &config.utility,
                    store,
                    a,
                    b,
                    (i, j),
                    n,
                )?)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FiOutput::PerField(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec())
    }

    fn empty() -> ParameterStore {
        ParameterStore::new(0)
    }

    #[test]
    fn b_pair_examples() {
        let s = empty();
        let fi = v(&[0.3, -0.7]);
        let nb = v(&[2.0, 5.0]);
        let out = b_pair(
            &SimilaritySpec::One,
            &UtilitySpec::Identity,
            &s,
            &fi,
            &nb,
            (0, 1),
            2,
        )
        .unwrap();
        assert_eq!(out, nb);
        let orth = b_pair(
            &SimilaritySpec::InnerProduct,
            &UtilitySpec::Hadamard,
            &s,
            &v(&[1.0, 0.0]),
            &v(&[0.0, 3.0]),
            (0, 1),
            2,
        )
        .unwrap();
        assert_eq!(orth.as_slice(), &[0.0, 0.0]);
        let hand = b_pair(
            &SimilaritySpec::InnerProduct,
            &UtilitySpec::Hadamard,
            &s,
            &v(&[1.0, 0.0]),
            &v(&[2.0, 0.0]),
            (0, 1),
            2,
        )
        .unwrap();
        assert_eq!(hand.as_slice(), &[4.0, 0.0]);
        assert!(matches!(
            b_pair(
                &SimilaritySpec::InnerProduct,
                &UtilitySpec::One,
                &s,
                &v(&[1.0]),
                &v(&[1.0, 2.0]),
                (0, 1),
                2
            ),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn b_sum_examples() {
        let s = empty();
        let fi = v(&[1.0, 0.0]);
        let nb = v(&[0.5, 2.0]);
        let single = b_sum(
            &SimilaritySpec::InnerProduct,
            &UtilitySpec::Hadamard,
            &s,
            0,
            &fi,
            &[(1, &nb)],
            2,
        )
        .unwrap();
        let pair = b_pair(
            &SimilaritySpec::InnerProduct,
            &UtilitySpec::Hadamard,
            &s,
            &fi,
            &nb,
            (0, 1),
            2,
        )
        .unwrap();
        assert_eq!(single, pair);

        let soft = SimilaritySpec::softmax(SimilaritySpec::Constant { value: 3.0 });
        let (a, b, c) = (v(&[3.0, 0.0]), v(&[0.0, 6.0]), v(&[3.0, 3.0]));
        let avg = b_sum(
            &soft,
            &UtilitySpec::Identity,
            &s,
            0,
            &fi,
            &[(0, &a), (1, &b), (2, &c)],
            3,
        )
        .unwrap();
        for (x, want) in avg.as_slice().iter().zip([2.0, 3.0]) {
            assert!((x - want).abs() < 1e-12);
        }

        let fields = [v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[1.0, 1.0])];
        let nbrs: Vec<(usize, &DenseVector)> = vec![(1, &fields[1]), (2, &fields[2])];
        let fm = b_sum(
            &SimilaritySpec::InnerProduct,
            &UtilitySpec::One,
            &s,
            0,
            &fields[0],
            &nbrs,
            3,
        )
        .unwrap();
        assert_eq!(fm.as_slice(), &[1.0]);

        assert!(matches!(
            b_sum(&SimilaritySpec::One, &UtilitySpec::One, &s, 0, &fi, &[], 1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn catalog_rows() {
        let fm = fi_catalog("FM").unwrap();
        assert_eq!(fm.similarity, SimilaritySpec::InnerProduct);
        assert_eq!(fm.utility, UtilitySpec::One);
        assert_eq!(fm.neighborhood, NeighborhoodSpec::AllOthers);
        assert!(matches!(
            fi_catalog("FwFM").unwrap().utility,
            UtilitySpec::ScalarWeight {
                weights: ScalarWeights::SymmetricPair { .. }
            }
        ));
        let sam2a = fi_catalog("SAM2_A").unwrap();
        assert!(matches!(sam2a.utility, UtilitySpec::VectorWeight { .. }));
        assert_eq!(sam2a.arity, Arity::PerPair);
        assert!(matches!(fi_catalog("OPNN"), Err(Error::Catalog(_))));
        for k in ModelKind::ALL {
            let c = fi_catalog(k.name()).unwrap();
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<FIConfig>(&json).unwrap(), c);
        }
    }

    #[test]
    fn sam1_is_identity_and_sam2e_hand_value() {
        let s = empty();
        let f = LatentFields::new(vec![v(&[0.1, 0.2]), v(&[-1.0, 4.0])]).unwrap();
        let out = fi_forward(&fi_catalog("SAM1").unwrap(), (&f).into(), &s).unwrap();
        assert_eq!(out.per_field().unwrap(), &f.fields[..]);

        let f = LatentFields::new(vec![v(&[1.0, 1.0]), v(&[1.0, 1.0])]).unwrap();
        let out = fi_forward(&fi_catalog("SAM2_E").unwrap(), (&f).into(), &s).unwrap();
        assert_eq!(out.pair(0, 1).unwrap().as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn autoint_singleton_returns_input() {
        let mut s = empty();
        for name in [slots::AUTOINT_Q, slots::AUTOINT_K, slots::AUTOINT_V] {
            let id = s.add(name, 3, 3, Init::Constant(0.0)).unwrap();
            *s.value_mut(id) = DenseMatrix::identity(3);
        }
        let f = LatentFields::new(vec![v(&[0.5, -2.0, 1.5])]).unwrap();
        let out = fi_forward(&fi_catalog("AutoInt").unwrap(), (&f).into(), &s).unwrap();
        assert_eq!(out.per_field().unwrap()[0], f.fields[0]);
    }

    #[test]
    fn missing_slot_is_contract_error() {
        let f = LatentFields::new(vec![v(&[1.0]), v(&[2.0])]).unwrap();
        let r = fi_forward(&fi_catalog("CIN2").unwrap(), (&f).into(), &empty());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn afm_weights_sum_to_one() {
        let mut s = ParameterStore::new(3);
        s.add(
            slots::AFM_W,
            3,
            2,
            Init::Xavier {
                fan_in: 2,
                fan_out: 3,
            },
        )
        .unwrap();
        s.add(
            slots::AFM_H,
            3,
            1,
            Init::Xavier {
                fan_in: 3,
                fan_out: 1,
            },
        )
        .unwrap();
        s.add(slots::AFM_B, 1, 3, Init::Constant(0.1)).unwrap();
        // With p = 0.5 and every f = (1, 1), each pair utility is exactly 1.
        s.add(slots::AFM_P, 2, 1, Init::Constant(0.5)).unwrap();
        s.init_xavier(3);
        let f = LatentFields::new(vec![v(&[1.0, 1.0]); 4]).unwrap();
        let out = fi_forward(&fi_catalog("AFM").unwrap(), (&f).into(), &s).unwrap();
        let total: f64 = out
            .per_field()
            .unwrap()
            .iter()
            .map(|z| z.as_slice()[0])
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    fn random_fields(seed: u64, n: usize, d: usize) -> LatentFields {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        LatentFields::new(
            (0..n)
                .map(|_| v(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
                .collect(),
        )
        .unwrap()
    }

    proptest::proptest! {
        #[test]
        fn fm_matches_double_loop(seed in 0u64..1000, n in 2usize..7, d in 1usize..6) {
            let f = random_fields(seed, n, d);
            let out = fi_forward(&fi_catalog("FM").unwrap(), (&f).into(), &empty()).unwrap();
            let fi_half: f64 = 0.5 * out.per_field().unwrap().iter().map(|z| z.as_slice()[0]).sum::<f64>();
            let mut oracle = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    for k in 0..d {
                        oracle += f.fields[i].as_slice()[k] * f.fields[j].as_slice()[k];
                    }
                }
            }
            proptest::prop_assert!((fi_half - oracle).abs() < 1e-12);
        }

        #[test]
        fn inner_product_fi_is_bilinear(seed in 0u64..1000, c in -3.0f64..3.0) {
            let n = 4;
            let d = 3;
            let mut s = ParameterStore::new(seed);
            s.add(slots::CIN_W, n, n, Init::Xavier { fan_in: n, fan_out: n }).unwrap();
            s.add(slots::SAM2_W, n * n, d, Init::Xavier { fan_in: n * n, fan_out: d }).unwrap();
            s.init_xavier(seed);
            let f = random_fields(seed, n, d);
            let g = random_fields(seed + 7, n, d);
            for name in ["FM", "CIN2", "SAM2_A"] {
                let cfg = fi_catalog(name).unwrap();
                let eval = |x: &LatentFields| fi_forward(&cfg, x.into(), &s).unwrap().to_matrix();
                // Linear in f_0 with the other fields held fixed.
                let mut mix = f.clone();
                mix.fields[0] = DenseVector::new(
                    f.fields[0].as_slice().iter().zip(g.fields[0].as_slice()).map(|(a, b)| a + c * b).collect(),
                );
                let mut only_g = f.clone();
                only_g.fields[0] = g.fields[0].clone();
                let mut zero = f.clone();
                zero.fields[0] = DenseVector::zeros(d);
                let (m, a, b, z) = (eval(&mix), eval(&f), eval(&only_g), eval(&zero));
                // Rows touching field 0 only: (i = 0) or (j = 0).
                // CIN2's row 0 holds the quadratic self term <f_0, f_0>.
                let rows: Vec<usize> = match (cfg.arity, name) {
                    (_, "CIN2") => vec![],
                    (Arity::PerField, _) => vec![0],
                    (Arity::PerPair, _) => (1..n).chain((1..n).map(|i| i * n)).collect(),
                };
                for r in rows {
                    for k in 0..m.cols() {
                        let want = a.get(r, k) + c * (b.get(r, k) - z.get(r, k));
                        proptest::prop_assert!((m.get(r, k) - want).abs() < 1e-10, "{name}");
                    }
                }
                // Quadratic under global scaling.
                let scaled = LatentFields::new(f.fields.iter().map(|x| x.scaled(c)).collect()).unwrap();
                let sc = eval(&scaled);
                for (x, y) in sc.data().iter().zip(a.data()) {
                    proptest::prop_assert!((x - c * c * y).abs() < 1e-10, "{name}");
                }
            }
        }

        #[test]
        fn sam2e_is_symmetric(seed in 0u64..1000, n in 1usize..6) {
            let f = random_fields(seed, n, 3);
            let out = fi_forward(&fi_catalog("SAM2_E").unwrap(), (&f).into(), &empty()).unwrap();
            for i in 0..n {
                for j in 0..n {
                    proptest::prop_assert_eq!(out.pair(i, j), out.pair(j, i));
                }
            }
        }

        #[test]
        fn softmax_similarity_weights_sum_to_one(seed in 0u64..1000, n in 1usize..6) {
            let d = 3;
            let mut s = ParameterStore::new(seed);
            s.add(&slots::sam3_k(0), d, d, Init::Xavier { fan_in: d, fan_out: d }).unwrap();
            s.init_xavier(seed);
            let f = random_fields(seed, n, d);
            let sim = FIConfig::for_model(ModelKind::Sam3E, 0).similarity;
            let ones = DenseVector::new(vec![1.0]);
            for i in 0..n {
                // Utility 1 per neighbor makes the weighted sum the weight total.
                let nb: Vec<(usize, &DenseVector)> = (0..n).map(|j| (j, &f.fields[j])).collect();
                let total = b_sum(&sim, &UtilitySpec::One, &s, i, &f.fields[i], &nb, n).unwrap();
                proptest::prop_assert!((total.as_slice()[0] - ones.as_slice()[0]).abs() < 1e-12);
            }
        }
    }
}

//! Parameter constructions that embed one model family in another, and a
//! logit-level comparison that checks them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EncodedRecord, FieldSchema};
use crate::error::{Error, Result};
use crate::interaction::slots;
use crate::kind::ModelKind;
use crate::model::{Model, ModelSpec};
use crate::params::ParameterStore;

/// Schemas at or below this many records are compared exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 1 << 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub source: ModelKind,
    pub target: ModelKind,
    pub construction: String,
    pub samples: usize,
    pub exhaustive: bool,
    pub max_abs_diff: f64,
    pub tol: f64,
    /// Negative controls expect a difference at or above `tol`.
    pub expect_equal: bool,
    pub passed: bool,
}

fn set(store: &mut ParameterStore, name: &str, r: usize, c: usize, v: f64) -> Result<()> {
    let id = store.id(name)?;
    store.value_mut(id).set(r, c, v);
    Ok(())
}

fn zero_all(store: &mut ParameterStore) {
    for s in store.slots_mut() {
        s.value.fill(0.0);
    }
}

fn require(model: &Model, kind: ModelKind) -> Result<()> {
    if model.kind() != kind {
        return Err(Error::contract(format!(
            "expected a {kind} model, got {}",
            model.kind()
        )));
    }
    Ok(())
}

fn copy_slot(
    dst: &mut ParameterStore,
    src: &ParameterStore,
    dst_name: &str,
    src_name: &str,
) -> Result<()> {
    let value = src.get(src_name)?.clone();
    let id = dst.id(dst_name)?;
    if dst.value(id).shape() != value.shape() {
        return Err(Error::shape(format!(
            "`{src_name}` and `{dst_name}` differ in shape"
        )));
    }
    *dst.value_mut(id) = value;
    Ok(())
}

fn copy_first_order(dst: &mut Model, src: &Model) -> Result<()> {
    for i in 0..src.spec.n() {
        let name = format!("linear.{i}");
        copy_slot(&mut dst.store, &src.store, &name, &name)?;
    }
    Ok(())
}

/// Every scalar of `store` redrawn uniformly from `[-scale, scale]`.
pub fn randomize(store: &mut ParameterStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in store.slots_mut() {
        for x in s.value.data_mut() {
            *x = rng.gen_range(-scale..=scale);
        }
    }
}

/// SAM1 whose field `i` embedding carries the LR weight in coordinate 0 and
/// whose head sums those coordinates.
pub fn lift_lr_to_sam1(lr: &Model, d: usize) -> Result<Model> {
    require(lr, ModelKind::Lr)?;
    let n = lr.spec.n();
    let mut m = Model::build(
        ModelSpec::new(ModelKind::Sam1, lr.spec.schema.clone(), d),
        0,
    )?;
    zero_all(&mut m.store);
    for i in 0..n {
        let w = lr.store.get(&format!("emb.{i}"))?;
        for v in 0..w.rows() {
            set(&mut m.store, &format!("emb.{i}"), v, 0, w.get(v, 0))?;
        }
        set(&mut m.store, "head.w", i * d, 0, 1.0)?;
    }
    let b = lr.store.get("bias")?.get(0, 0);
    set(&mut m.store, "head.b", 0, 0, b)?;
    Ok(m)
}

/// LR with `w_i[v] = <head block i, f_i[v]>`.
pub fn reduce_sam1_to_lr(sam1: &Model) -> Result<Model> {
    require(sam1, ModelKind::Sam1)?;
    let n = sam1.spec.n();
    let d = sam1.spec.d;
    let mut m = Model::build(
        ModelSpec::new(ModelKind::Lr, sam1.spec.schema.clone(), 1),
        0,
    )?;
    zero_all(&mut m.store);
    let head = sam1.store.get("head.w")?;
    for i in 0..n {
        let e = sam1.store.get(&format!("emb.{i}"))?;
        for v in 0..e.rows() {
            let w: f64 = (0..d).map(|k| head.get(i * d + k, 0) * e.get(v, k)).sum();
            set(&mut m.store, &format!("emb.{i}"), v, 0, w)?;
        }
    }
    let b = sam1.store.get("head.b")?.get(0, 0);
    set(&mut m.store, "bias", 0, 0, b)?;
    Ok(m)
}

/// SAM2_A over all ordered pairs with `W_ij = c_ij e_0` and head blocks `e_0`,
/// `c_ij = 1/2` off the diagonal and `0` on it. FM's first-order term and
/// bias move to the first-order toggle and the head bias.
pub fn lift_fm_to_sam2a(fm: &Model) -> Result<Model> {
    require(fm, ModelKind::Fm)?;
    let n = fm.spec.n();
    let d = fm.spec.d;
    let mut spec = ModelSpec::new(ModelKind::Sam2A, fm.spec.schema.clone(), d);
    spec.linear = fm.spec.linear;
    let mut m = Model::build(spec, 0)?;
    zero_all(&mut m.store);
    for i in 0..n {
        let name = format!("emb.{i}");
        copy_slot(&mut m.store, &fm.store, &name, &name)?;
    }
    if fm.spec.linear {
        copy_first_order(&mut m, fm)?;
    }
    for (p, &(i, j)) in m.pairs().to_vec().iter().enumerate() {
        let c = if i == j { 0.0 } else { 0.5 };
        set(&mut m.store, slots::SAM2_W, i * n + j, 0, c)?;
        set(&mut m.store, "head.w", p * d, 0, 1.0)?;
    }
    if fm.spec.bias {
        let b = fm.store.get("bias")?.get(0, 0);
        set(&mut m.store, "head.b", 0, 0, b)?;
    }
    Ok(m)
}

/// One-layer SAM3_A with raw similarities, `K = I`, zero residual map, unit
/// field-combination weights, head `e_0`, and `W_ij = a_ij e_0` where `a_ij`
/// is the SAM2_A head block applied to `W_ij`.
pub fn lift_sam2a_to_sam3a(sam2a: &Model) -> Result<Model> {
    require(sam2a, ModelKind::Sam2A)?;
    let n = sam2a.spec.n();
    let d = sam2a.spec.d;
    let mut spec = ModelSpec::new(ModelKind::Sam3A, sam2a.spec.schema.clone(), d);
    spec.layers = 1;
    spec.softmax = false;
    spec.linear = sam2a.spec.linear;
    let mut m = Model::build(spec, 0)?;
    zero_all(&mut m.store);
    for i in 0..n {
        let name = format!("emb.{i}");
        copy_slot(&mut m.store, &sam2a.store, &name, &name)?;
    }
    if sam2a.spec.linear {
        copy_first_order(&mut m, sam2a)?;
    }
    for k in 0..d {
        set(&mut m.store, &slots::sam3_k(0), k, k, 1.0)?;
    }
    for i in 0..n {
        set(&mut m.store, "agg.w", i, 0, 1.0)?;
    }
    set(&mut m.store, "head.w", 0, 0, 1.0)?;
    let head = sam2a.store.get("head.w")?;
    let w2 = sam2a.store.get(slots::SAM2_W)?;
    for (p, &(i, j)) in sam2a.pairs().iter().enumerate() {
        let a: f64 = (0..d)
            .map(|k| head.get(p * d + k, 0) * w2.get(i * n + j, k))
            .sum();
        set(&mut m.store, &slots::sam3_w(0), i * n + j, 0, a)?;
    }
    let b = sam2a.store.get("head.b")?.get(0, 0);
    set(&mut m.store, "head.b", 0, 0, b)?;
    Ok(m)
}

/// Every encoded record of a schema in lexicographic order.
pub fn enumerate_records(schema: &FieldSchema) -> Vec<EncodedRecord> {
    let sizes = schema.vocab_sizes();
    let total = schema.combinations();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0u32; sizes.len()];
    for _ in 0..total {
        out.push(EncodedRecord {
            label: 0,
            indices: idx.clone(),
        });
        for f in (0..sizes.len()).rev() {
            idx[f] += 1;
            if (idx[f] as usize) < sizes[f] {
                break;
            }
            idx[f] = 0;
        }
    }
    out
}

/// Uniform draws over every index of every field, reserved ones included.
pub fn sample_records(schema: &FieldSchema, count: usize, seed: u64) -> Vec<EncodedRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = schema.vocab_sizes();
    (0..count)
        .map(|_| EncodedRecord {
            label: 0,
            indices: sizes.iter().map(|&v| rng.gen_range(0..v as u32)).collect(),
        })
        .collect()
}

/// Largest absolute logit gap over the schema (exhaustive when small enough,
/// otherwise `samples` random records).
pub fn max_logit_gap(
    m1: &Model,
    m2: &Model,
    samples: usize,
    seed: u64,
) -> Result<(f64, usize, bool)> {
    if m1.spec.schema != m2.spec.schema {
        return Err(Error::contract("models are defined on different schemas"));
    }
    let schema = &m1.spec.schema;
    let exhaustive = schema.combinations() <= EXHAUSTIVE_LIMIT;
    let records = if exhaustive {
        enumerate_records(schema)
    } else {
        sample_records(schema, samples, seed)
    };
    let a = m1.logits(&records)?;
    let b = m2.logits(&records)?;
    let gap = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok((gap, records.len(), exhaustive))
}

pub fn verify_equivalence(
    m1: &Model,
    m2: &Model,
    samples: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    let (gap, count, exhaustive) = max_logit_gap(m1, m2, samples, seed)?;
    Ok(EquivalenceReport {
        source: m1.kind(),
        target: m2.kind(),
        construction: "direct comparison".into(),
        samples: count,
        exhaustive,
        max_abs_diff: gap,
        tol,
        expect_equal: true,
        passed: gap < tol,
    })
}

/// The checks the `equivalence` command can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposition {
    /// LR and SAM1 in both directions.
    Prop1,
    /// FM inside SAM2_A.
    Prop2,
    /// SAM2_A inside SAM3_A.
    Prop3,
    /// FM through SAM2_A into SAM3_A.
    Chain,
    /// LR sharing FM's first-order part still misses the pair terms.
    Negative,
}

impl Proposition {
    pub const ALL: [Proposition; 5] = [
        Proposition::Prop1,
        Proposition::Prop2,
        Proposition::Prop3,
        Proposition::Chain,
        Proposition::Negative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Proposition::Prop1 => "prop1",
            Proposition::Prop2 => "prop2",
            Proposition::Prop3 => "prop3",
            Proposition::Chain => "chain",
            Proposition::Negative => "negative",
        }
    }
}

impl std::str::FromStr for Proposition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Proposition::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config(format!("unknown proposition `{s}`")))
    }
}

fn random_model(kind: ModelKind, schema: &FieldSchema, d: usize, seed: u64) -> Result<Model> {
    let mut m = Model::build(ModelSpec::new(kind, schema.clone(), d), seed)?;
    randomize(&mut m.store, seed ^ 0xa11ce, 1.0);
    Ok(m)
}

fn combine(reports: Vec<EquivalenceReport>, construction: &str) -> EquivalenceReport {
    let mut out = reports[0].clone();
    out.construction = construction.into();
    out.samples = reports.iter().map(|r| r.samples).sum();
    out.exhaustive = reports.iter().all(|r| r.exhaustive);
    out.max_abs_diff = reports.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    out.passed = reports.iter().all(|r| r.passed);
    out
}

/// Runs `trials` random instances of a proposition on an `n`-field schema.
pub fn run_proposition(
    prop: Proposition,
    schema: &FieldSchema,
    d: usize,
    trials: usize,
    samples: usize,
    tol: f64,
    seed: u64,
) -> Result<Vec<EquivalenceReport>> {
    if trials == 0 {
        return Err(Error::config("at least one trial is required"));
    }
    let mut forward = Vec::new();
    let mut backward = Vec::new();
    for t in 0..trials as u64 {
        let s = seed.wrapping_mul(1_000_003).wrapping_add(t);
        let check = |a: &Model, b: &Model, expect_equal: bool| -> Result<EquivalenceReport> {
            let mut r = verify_equivalence(a, b, samples, tol, s)?;
            r.expect_equal = expect_equal;
            r.passed = if expect_equal {
                r.max_abs_diff < tol
            } else {
                r.max_abs_diff >= tol
            };
            Ok(r)
        };
        match prop {
            Proposition::Prop1 => {
                let lr = random_model(ModelKind::Lr, schema, 1, s)?;
                forward.push(check(&lr, &lift_lr_to_sam1(&lr, d)?, true)?);
                let sam1 = random_model(ModelKind::Sam1, schema, d, s)?;
                backward.push(check(&sam1, &reduce_sam1_to_lr(&sam1)?, true)?);
            }
            Proposition::Prop2 => {
                let fm = random_model(ModelKind::Fm, schema, d, s)?;
                forward.push(check(&fm, &lift_fm_to_sam2a(&fm)?, true)?);
            }
            Proposition::Prop3 => {
                let sam2 = random_model(ModelKind::Sam2A, schema, d, s)?;
                forward.push(check(&sam2, &lift_sam2a_to_sam3a(&sam2)?, true)?);
            }
            Proposition::Chain => {
                let fm = random_model(ModelKind::Fm, schema, d, s)?;
                let sam3 = lift_sam2a_to_sam3a(&lift_fm_to_sam2a(&fm)?)?;
                forward.push(check(&fm, &sam3, true)?);
            }
            Proposition::Negative => {
                let fm = random_model(ModelKind::Fm, schema, d, s)?;
                let mut lr = Model::build(ModelSpec::new(ModelKind::Lr, schema.clone(), 1), 0)?;
                for i in 0..schema.n_fields() {
                    copy_slot(
                        &mut lr.store,
                        &fm.store,
                        &format!("emb.{i}"),
                        &format!("linear.{i}"),
                    )?;
                }
                copy_slot(&mut lr.store, &fm.store, "bias", "bias")?;
                forward.push(check(&fm, &lr, false)?);
            }
        }
    }
    let mut out = vec![combine(forward, construction(prop, true))];
    if !backward.is_empty() {
        out.push(combine(backward, construction(prop, false)));
    }
    Ok(out)
}

fn construction(prop: Proposition, forward: bool) -> &'static str {
    match (prop, forward) {
        (Proposition::Prop1, true) => "lift_lr_to_sam1",
        (Proposition::Prop1, false) => "reduce_sam1_to_lr",
        (Proposition::Prop2, _) => "lift_fm_to_sam2a",
        (Proposition::Prop3, _) => "lift_sam2a_to_sam3a",
        (Proposition::Chain, _) => "lift_sam2a_to_sam3a . lift_fm_to_sam2a",
        (Proposition::Negative, _) => "LR sharing FM first-order weights",
    }
}

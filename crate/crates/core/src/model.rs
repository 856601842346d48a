//! Complete models `M = ST . AL . FI . EL`, one code path per zoo entry.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    aggregate, allocate_mlp, mlp_forward, mlp_node, AggregationSpec, MlpSlots, MlpSpec,
};
use crate::data::{EncodedRecord, FieldSchema};
use crate::embedding::{EmbeddingTable, FieldAwareEmbeddingTable, LatentFields};
use crate::error::{Error, Result};
use crate::interaction::{fi_forward, slots, triangle_index, FIConfig, FiOutput, PairSet};
use crate::kind::ModelKind;
use crate::linalg::{sigmoid, DenseMatrix, DenseVector};
use crate::params::{Checkpoint, Init, ParameterStore, SlotId};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub schema: FieldSchema,
    /// Embedding width (LR always uses 1).
    pub d: usize,
    /// Stacked SAM3 layers.
    pub layers: usize,
    pub mlp: MlpSpec,
    /// First-order term `sum_i w_i[x_i]`.
    pub linear: bool,
    /// Global bias on head-less models.
    pub bias: bool,
    pub pairs: PairSet,
    pub self_hadamard: bool,
    /// Softmax over SAM3 similarities.
    pub softmax: bool,
    /// AFM attention width; defaults to `d`.
    pub attention_width: Option<usize>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, schema: FieldSchema, d: usize) -> Self {
        ModelSpec {
            kind,
            schema,
            d,
            layers: 1,
            mlp: if kind.has_mlp() {
                MlpSpec::deep(0.5)
            } else {
                MlpSpec::linear()
            },
            linear: kind.default_linear(),
            bias: kind.default_linear() || kind == ModelKind::Lr,
            pairs: PairSet::All,
            self_hadamard: false,
            softmax: true,
            attention_width: None,
        }
    }

    pub fn n(&self) -> usize {
        self.schema.n_fields()
    }

    pub fn embedding_dim(&self) -> usize {
        if self.kind == ModelKind::Lr {
            1
        } else {
            self.d
        }
    }

    pub fn has_head(&self) -> bool {
        !matches!(
            self.kind,
            ModelKind::Lr | ModelKind::Fm | ModelKind::Ffm | ModelKind::Fwfm | ModelKind::Afm
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.d == 0 {
            return Err(Error::config("d must be at least 1"));
        }
        if self.kind.is_sam3() && self.layers == 0 {
            return Err(Error::config("SAM3 needs at least one layer"));
        }
        let pairwise = matches!(
            self.kind,
            ModelKind::Fm | ModelKind::Ffm | ModelKind::Fwfm | ModelKind::Afm
        );
        if pairwise && n < 2 {
            return Err(Error::config(format!(
                "{} needs at least two fields",
                self.kind
            )));
        }
        if self.kind.is_sam2() && self.pairs == PairSet::Upper && n < 2 {
            return Err(Error::config("the i < j pair set is empty for one field"));
        }
        self.mlp.validate()?;
        if !self.kind.has_mlp() && !self.mlp.hidden.is_empty() {
            return Err(Error::config(format!(
                "{} has a linear head; hidden layers not allowed",
                self.kind
            )));
        }
        if self.bias && self.has_head() {
            return Err(Error::config(format!(
                "{} carries its bias in the head",
                self.kind
            )));
        }
        if self.kind == ModelKind::Lr && self.linear {
            return Err(Error::config("LR is already the first-order term"));
        }
        if self.attention_width == Some(0) {
            return Err(Error::config("attention width must be positive"));
        }
        Ok(())
    }

    /// FI row of layer `layer` with this spec's toggles applied.
    pub fn fi_config(&self, layer: usize) -> FIConfig {
        let cfg = FIConfig::for_model(self.kind, layer);
        match self.kind {
            ModelKind::Sam2A | ModelKind::Sam2E => cfg
                .with_pairs(self.pairs)
                .with_self_hadamard(self.self_hadamard),
            ModelKind::Sam3A | ModelKind::Sam3E => cfg.with_softmax(self.softmax),
            _ => cfg,
        }
    }

    /// Aggregation layer; SAM3's weights live in the `agg.w` slot.
    pub fn aggregation(&self) -> AggregationSpec {
        match self.kind {
            ModelKind::Lr | ModelKind::Fm | ModelKind::Ffm | ModelKind::Fwfm | ModelKind::Afm => {
                AggregationSpec::Sum
            }
            ModelKind::Sam3A | ModelKind::Sam3E => AggregationSpec::FieldCombination {
                weights: vec![1.0 / self.n() as f64; self.n()],
            },
            _ => AggregationSpec::Concat,
        }
    }

    fn afm_width(&self) -> usize {
        self.attention_width.unwrap_or(self.d)
    }
}

/// The model-config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model: ModelKind,
    /// Field count; checked against the data schema when given.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Hidden widths for MLP heads; `None` keeps the default 3 x 32.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub linear: Option<bool>,
    #[serde(default)]
    pub bias: Option<bool>,
    #[serde(default)]
    pub pairs: PairSet,
    #[serde(default)]
    pub self_hadamard: bool,
    #[serde(default = "default_true")]
    pub softmax: bool,
    #[serde(default)]
    pub attention_width: Option<usize>,
}

fn default_d() -> usize {
    8
}
fn default_layers() -> usize {
    1
}
fn default_dropout() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn new(model: ModelKind) -> Self {
        serde_json::from_value(serde_json::json!({ "model": model.name() })).expect("defaults")
    }

    pub fn to_spec(&self, schema: &FieldSchema) -> Result<ModelSpec> {
        if let Some(n) = self.n {
            if n != schema.n_fields() {
                return Err(Error::config(format!(
                    "config declares n = {n}, data has {} fields",
                    schema.n_fields()
                )));
            }
        }
        let mut spec = ModelSpec::new(self.model, schema.clone(), self.d);
        spec.layers = self.layers;
        if self.model.has_mlp() {
            spec.mlp.dropout = self.dropout;
            if let Some(h) = &self.hidden {
                spec.mlp.hidden = h.clone();
            }
        }
        if let Some(l) = self.linear {
            spec.linear = l;
        }
        if let Some(b) = self.bias {
            spec.bias = b;
        }
        spec.pairs = self.pairs;
        spec.self_hadamard = self.self_hadamard;
        spec.softmax = self.softmax;
        spec.attention_width = self.attention_width;
        spec.validate()?;
        Ok(spec)
    }

    pub fn fi_config(&self) -> FIConfig {
        let mut cfg = FIConfig::for_model(self.model, 0);
        if self.model.is_sam2() {
            cfg = cfg
                .with_pairs(self.pairs)
                .with_self_hadamard(self.self_hadamard);
        }
        if self.model.is_sam3() {
            cfg = cfg.with_softmax(self.softmax);
        }
        cfg
    }
}

#[derive(Debug, Clone)]
struct Sam3Slots {
    k: SlotId,
    w: Option<SlotId>,
    q: SlotId,
}

/// Index tables fixed at build time.
#[derive(Debug, Clone, Default)]
struct Consts {
    pairs: Vec<(usize, usize)>,
    left: Vec<usize>,
    right: Vec<usize>,
    /// Row `i n + j` of an `n^2 x d` pair table for each pair.
    pair_rows: Vec<usize>,
    /// FwFM: triangle slot entry for each (i, j) of the `n x n` grid.
    tri: Vec<usize>,
    offdiag: Option<DenseMatrix>,
    /// SAM3_A: sums each block of n consecutive rows.
    block_sum: Option<DenseMatrix>,
}

/// Nodes of one record's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Trace {
    /// FI output (first layer for SAM3).
    pub fi: NodeId,
    pub logit: NodeId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParameterStore,
    emb: Option<EmbeddingTable>,
    ffm: Option<FieldAwareEmbeddingTable>,
    linear: Option<EmbeddingTable>,
    bias: Option<SlotId>,
    fi: Vec<SlotId>,
    sam3: Vec<Sam3Slots>,
    agg: Option<SlotId>,
    head: Option<MlpSlots>,
    consts: Consts,
}

enum Readout {
    Sum(NodeId),
    Head(NodeId),
}

impl Model {
    /// Allocates and initializes every slot; identical seeds give identical stores.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let kind = spec.kind;
        let n = spec.n();
        let d = spec.embedding_dim();
        let mut store = ParameterStore::new(seed);
        let xavier = |a: usize, b: usize| Init::Xavier {
            fan_in: a,
            fan_out: b,
        };

        let (emb, ffm) = if kind == ModelKind::Ffm {
            (
                None,
                Some(FieldAwareEmbeddingTable::allocate(
                    &mut store,
                    "ffm",
                    &spec.schema,
                    d,
                )?),
            )
        } else {
            (
                Some(EmbeddingTable::allocate(
                    &mut store,
                    "emb",
                    &spec.schema,
                    d,
                )?),
                None,
            )
        };
        let linear = if spec.linear {
            Some(EmbeddingTable::allocate(
                &mut store,
                "linear",
                &spec.schema,
                1,
            )?)
        } else {
            None
        };
        let bias = if spec.bias {
            Some(store.add("bias", 1, 1, Init::Constant(0.0))?)
        } else {
            None
        };

        let mut consts = Consts::default();
        let mut fi = Vec::new();
        let mut sam3 = Vec::new();
        let mut agg = None;
        match kind {
            ModelKind::Fwfm => {
                let m = n * (n - 1) / 2;
                fi.push(store.add(slots::FWFM_R, m, 1, Init::Constant(1.0))?);
                let mut off = DenseMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            off.set(i, j, 1.0);
                            consts.tri.push(triangle_index(i.min(j), i.max(j), n));
                        } else {
                            consts.tri.push(0);
                        }
                    }
                }
                consts.offdiag = Some(off);
            }
            ModelKind::Ipnn => fi.push(store.add(slots::IPNN_THETA, n, d, xavier(n, d))?),
            ModelKind::Dcn => fi.push(store.add(slots::DCN_W, n, 1, Init::Constant(1.0))?),
            ModelKind::Cin2 => fi.push(store.add(slots::CIN_W, n, n, xavier(n, n))?),
            ModelKind::Afm => {
                let t = spec.afm_width();
                fi.push(store.add(slots::AFM_W, t, d, xavier(d, t))?);
                fi.push(store.add(slots::AFM_H, t, 1, xavier(t, 1))?);
                fi.push(store.add(slots::AFM_B, 1, t, Init::Constant(0.0))?);
                fi.push(store.add(slots::AFM_P, d, 1, xavier(d, 1))?);
            }
            ModelKind::AutoInt => {
                for name in [slots::AUTOINT_Q, slots::AUTOINT_K, slots::AUTOINT_V] {
                    fi.push(store.add(name, d, d, xavier(d, d))?);
                }
            }
            ModelKind::Sam2A => fi.push(store.add(slots::SAM2_W, n * n, d, xavier(n * n, d))?),
            ModelKind::Sam3A | ModelKind::Sam3E => {
                for l in 0..spec.layers {
                    let k = store.add(&slots::sam3_k(l), d, d, xavier(d, d))?;
                    let w = if kind == ModelKind::Sam3A {
                        Some(store.add(&slots::sam3_w(l), n * n, d, xavier(n * n, d))?)
                    } else {
                        None
                    };
                    let q = store.add(&format!("res.{l}.q"), d, d, xavier(d, d))?;
                    sam3.push(Sam3Slots { k, w, q });
                }
                agg = Some(store.add("agg.w", n, 1, Init::Constant(1.0 / n as f64))?);
                if kind == ModelKind::Sam3A {
                    let mut b = DenseMatrix::zeros(n, n * n);
                    for i in 0..n {
                        for j in 0..n {
                            b.set(i, i * n + j, 1.0);
                        }
                    }
                    consts.block_sum = Some(b);
                }
            }
            _ => {}
        }

        consts.pairs = match kind {
            ModelKind::Ffm | ModelKind::Afm => (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .collect(),
            ModelKind::Sam2A | ModelKind::Sam2E => spec.pairs.pairs(n),
            _ => Vec::new(),
        };
        consts.left = consts.pairs.iter().map(|p| p.0).collect();
        consts.right = consts.pairs.iter().map(|p| p.1).collect();
        consts.pair_rows = consts.pairs.iter().map(|&(i, j)| i * n + j).collect();

        let head_input = match kind {
            ModelKind::Sam1 | ModelKind::Dcn | ModelKind::AutoInt | ModelKind::DeepFmDeep => {
                Some(n * d)
            }
            ModelKind::Sam2A | ModelKind::Sam2E => Some(consts.pairs.len() * d),
            ModelKind::Cin2 | ModelKind::Ipnn => Some(n),
            ModelKind::Sam3A | ModelKind::Sam3E => Some(d),
            _ => None,
        };
        let head = match head_input {
            Some(w) => Some(allocate_mlp(&mut store, w, &spec.mlp)?),
            None => None,
        };

        store.init_xavier(seed);
        Ok(Model {
            spec,
            store,
            emb,
            ffm,
            linear,
            bias,
            fi,
            sam3,
            agg,
            head,
            consts,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn check_record(&self, rec: &EncodedRecord) -> Result<()> {
        rec.check(&self.spec.schema)
            .map_err(|e| Error::contract(format!("record does not match the model schema: {e}")))
    }

    /// Records one record's forward pass; `dropout` enables training-mode masks.
    pub fn trace(
        &self,
        tape: &mut Tape,
        rec: &EncodedRecord,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Trace> {
        self.trace_with(&self.store, tape, rec, dropout)
    }

    /// `trace` reading parameters from `store`, which must share this
    /// model's slot layout (a clone of `self.store`, say).
    pub fn trace_with(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        rec: &EncodedRecord,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Trace> {
        self.check_record(rec)?;
        let s = store;
        let n = self.spec.n();
        let d = self.spec.embedding_dim();
        let c = &self.consts;
        let e = match &self.emb {
            Some(t) => Some(t.lookup_node(tape, s, rec)?),
            None => None,
        };
        let emb = || e.expect("shared embeddings");
        let p = |tape: &mut Tape, k: usize| tape.param(s, self.fi[k]);

        let (fi, readout) = match self.spec.kind {
            ModelKind::Lr => (emb(), Readout::Sum(tape.sum_all(emb()))),
            ModelKind::Fm => {
                let e = emb();
                let total = tape.col_sums(e);
                let cross = tape.matmul_nt(e, total)?;
                let own = tape.row_dot(e, e)?;
                let z = tape.sub(cross, own)?;
                (z, half_sum(tape, z))
            }
            ModelKind::Ffm => {
                let table = self.ffm.as_ref().expect("field-aware table");
                let (a, b) = table.pair_nodes(tape, s, rec, &c.pairs)?;
                let dots = tape.row_dot(a, b)?;
                let grid = tape.reshape(dots, n, n - 1)?;
                let z = tape.row_sums(grid);
                (z, half_sum(tape, z))
            }
            ModelKind::Fwfm => {
                let e = emb();
                let g = tape.matmul_nt(e, e)?;
                let r = p(tape, 0);
                let r = tape.gather(r, c.tri.clone(), n, n)?;
                let mask = tape.constant(c.offdiag.clone().expect("mask"));
                let r = tape.hadamard(r, mask)?;
                let weighted = tape.hadamard(g, r)?;
                let z = tape.row_sums(weighted);
                (z, half_sum(tape, z))
            }
            ModelKind::Ipnn => {
                let e = emb();
                let g = tape.matmul_nt(e, e)?;
                let th = p(tape, 0);
                let t = tape.matmul_nt(th, th)?;
                let gt = tape.hadamard(g, t)?;
                let z = tape.row_sums(gt);
                (z, Readout::Head(tape.reshape(z, 1, n)?))
            }
            ModelKind::Dcn => {
                let w = p(tape, 0);
                let z = tape.row_scale(emb(), w)?;
                (z, Readout::Head(tape.reshape(z, 1, n * d)?))
            }
            ModelKind::Sam1 | ModelKind::DeepFmDeep => {
                let z = emb();
                (z, Readout::Head(tape.reshape(z, 1, n * d)?))
            }
            ModelKind::Cin2 => {
                let e = emb();
                let g = tape.matmul_nt(e, e)?;
                let w = p(tape, 0);
                let gw = tape.hadamard(g, w)?;
                let z = tape.row_sums(gw);
                (z, Readout::Head(tape.reshape(z, 1, n)?))
            }
            ModelKind::Afm => {
                let e = emb();
                let l = tape.index_rows(e, c.left.clone())?;
                let r = tape.index_rows(e, c.right.clone())?;
                let prod = tape.hadamard(l, r)?;
                let (w, h, b, pv) = (p(tape, 0), p(tape, 1), p(tape, 2), p(tape, 3));
                let pre = tape.matmul_nt(prod, w)?;
                let pre = tape.add_row_broadcast(pre, b)?;
                let hidden = tape.relu(pre);
                let raw = tape.matmul(hidden, h)?;
                let att = tape.softmax_all(raw);
                let util = tape.matmul(prod, pv)?;
                let terms = tape.hadamard(att, util)?;
                let grid = tape.reshape(terms, n, n - 1)?;
                let z = tape.row_sums(grid);
                (z, Readout::Sum(tape.sum_all(z)))
            }
            ModelKind::AutoInt => {
                let e = emb();
                let (q, k, v) = (p(tape, 0), p(tape, 1), p(tape, 2));
                let qf = tape.matmul_nt(e, q)?;
                let kf = tape.matmul_nt(e, k)?;
                let vf = tape.matmul_nt(e, v)?;
                let scores = tape.matmul_nt(qf, kf)?;
                let att = tape.softmax_rows(scores);
                let z = tape.matmul(att, vf)?;
                (z, Readout::Head(tape.reshape(z, 1, n * d)?))
            }
            ModelKind::Sam2A | ModelKind::Sam2E => {
                let e = emb();
                let m = c.pairs.len();
                let l = tape.index_rows(e, c.left.clone())?;
                let r = tape.index_rows(e, c.right.clone())?;
                let sims = tape.row_dot(l, r)?;
                let util = if self.spec.kind == ModelKind::Sam2A {
                    let w = p(tape, 0);
                    tape.index_rows(w, c.pair_rows.clone())?
                } else if self.spec.self_hadamard {
                    tape.hadamard(l, l)?
                } else {
                    tape.hadamard(l, r)?
                };
                let t = tape.row_scale(util, sims)?;
                (t, Readout::Head(tape.reshape(t, 1, m * d)?))
            }
            ModelKind::Sam3A | ModelKind::Sam3E => {
                let mut x = emb();
                let mut first = None;
                for layer in &self.sam3 {
                    let k = tape.param(s, layer.k);
                    let kx = tape.matmul_nt(x, k)?;
                    let mut att = tape.matmul_nt(x, kx)?;
                    if self.spec.softmax {
                        att = tape.softmax_rows(att);
                    }
                    let z = match layer.w {
                        Some(w) => {
                            let w = tape.param(s, w);
                            let flat = tape.reshape(att, n * n, 1)?;
                            let scaled = tape.row_scale(w, flat)?;
                            let blocks = tape.constant(c.block_sum.clone().expect("block sum"));
                            tape.matmul(blocks, scaled)?
                        }
                        None => {
                            let mixed = tape.matmul(att, x)?;
                            tape.hadamard(x, mixed)?
                        }
                    };
                    first.get_or_insert(z);
                    let q = tape.param(s, layer.q);
                    let res = tape.matmul_nt(x, q)?;
                    x = tape.add(z, res)?;
                }
                let w = tape.param(s, self.agg.expect("aggregation weights"));
                let weighted = tape.row_scale(x, w)?;
                let pooled = tape.col_sums(weighted);
                (first.expect("at least one layer"), Readout::Head(pooled))
            }
        };

        let mut logit = match readout {
            Readout::Sum(node) => node,
            Readout::Head(row) => {
                let head = self.head.as_ref().expect("head slots");
                mlp_node(tape, s, &self.spec.mlp, head, row, dropout)?
            }
        };
        if let Some(lin) = &self.linear {
            let w = lin.lookup_node(tape, s, rec)?;
            let sum = tape.sum_all(w);
            logit = tape.add(logit, sum)?;
        }
        if let Some(b) = self.bias {
            let b = tape.param(s, b);
            logit = tape.add(logit, b)?;
        }
        Ok(Trace { fi, logit })
    }

    pub fn logit_node(
        &self,
        tape: &mut Tape,
        rec: &EncodedRecord,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        Ok(self.trace(tape, rec, dropout)?.logit)
    }

    /// One logit per record; `dropout` switches on training-mode masks.
    pub fn forward(
        &self,
        records: &[EncodedRecord],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<f64>> {
        records
            .iter()
            .map(|r| {
                let mut tape = Tape::new();
                let id = self.logit_node(&mut tape, r, dropout.as_deref_mut())?;
                tape.value(id).item()
            })
            .collect()
    }

    /// Inference-mode logits.
    pub fn logits(&self, records: &[EncodedRecord]) -> Result<Vec<f64>> {
        self.forward(records, None)
    }

    pub fn predict(&self, records: &[EncodedRecord]) -> Result<Vec<f64>> {
        Ok(self.logits(records)?.into_iter().map(sigmoid).collect())
    }

    /// Mean binary cross-entropy of a batch as a tape node.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        records: &[EncodedRecord],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        self.batch_loss_with(&self.store, tape, records, dropout)
    }

    pub fn batch_loss_with(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        records: &[EncodedRecord],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        if records.is_empty() {
            return Err(Error::domain("loss of an empty batch"));
        }
        let mut terms = Vec::with_capacity(records.len());
        for r in records {
            let logit = self
                .trace_with(store, tape, r, dropout.as_deref_mut())?
                .logit;
            terms.push(tape.bce_with_logits(logit, r.label as f64)?);
        }
        let total = tape.add_n(terms)?;
        Ok(tape.scale(total, 1.0 / records.len() as f64))
    }

    fn latent(&self, rec: &EncodedRecord) -> Result<LatentFields> {
        self.emb
            .as_ref()
            .expect("shared embeddings")
            .lookup(&self.store, rec)
    }

    /// FI output of the value-level catalog path (first layer for SAM3), stacked.
    pub fn fi_reference(&self, rec: &EncodedRecord) -> Result<DenseMatrix> {
        self.check_record(rec)?;
        let cfg = self.spec.fi_config(0);
        let out = if let Some(ffm) = &self.ffm {
            fi_forward(&cfg, (&ffm.lookup(&self.store, rec)?).into(), &self.store)?
        } else {
            fi_forward(&cfg, (&self.latent(rec)?).into(), &self.store)?
        };
        Ok(out.to_matrix())
    }

    /// Logit composed from the value-level layers alone, without the tape.
    pub fn reference_logit(&self, rec: &EncodedRecord) -> Result<f64> {
        self.check_record(rec)?;
        let s = &self.store;
        let n = self.spec.n();
        let kind = self.spec.kind;
        let sum_first = |z: &[DenseVector]| z.iter().map(|v| v.as_slice()[0]).sum::<f64>();

        let core = if kind.is_sam3() {
            let mut x = self.latent(rec)?;
            for (l, layer) in self.sam3.iter().enumerate() {
                let out = fi_forward(&self.spec.fi_config(l), (&x).into(), s)?;
                let q = s.value(layer.q);
                let next = out
                    .per_field()
                    .expect("per-field")
                    .iter()
                    .zip(&x.fields)
                    .map(|(z, f)| {
                        let mut v = q.matvec(f)?;
                        v.add_assign(z)?;
                        Ok(v)
                    })
                    .collect::<Result<Vec<_>>>()?;
                x = LatentFields::new(next)?;
            }
            let weights = s
                .value(self.agg.expect("aggregation weights"))
                .data()
                .to_vec();
            let pooled = aggregate(&AggregationSpec::FieldCombination { weights }, &x.fields)?;
            self.head_value(&pooled)?
        } else {
            let cfg = self.spec.fi_config(0);
            let out = if let Some(ffm) = &self.ffm {
                fi_forward(&cfg, (&ffm.lookup(s, rec)?).into(), s)?
            } else {
                fi_forward(&cfg, (&self.latent(rec)?).into(), s)?
            };
            match (&out, kind) {
                (FiOutput::PerField(z), ModelKind::Lr | ModelKind::Afm) => sum_first(z),
                (FiOutput::PerField(z), ModelKind::Fm | ModelKind::Ffm | ModelKind::Fwfm) => {
                    0.5 * sum_first(z)
                }
                (FiOutput::PerField(z), _) => {
                    self.head_value(&aggregate(&AggregationSpec::Concat, z)?)?
                }
                (FiOutput::PerPair { cells, .. }, _) => {
                    let present: Vec<DenseVector> = cells.iter().flatten().cloned().collect();
                    self.head_value(&aggregate(&AggregationSpec::Concat, &present)?)?
                }
            }
        };
        let mut logit = core;
        if let Some(lin) = &self.linear {
            logit += (0..n)
                .map(|i| s.value(lin.slots()[i]).get(rec.indices[i] as usize, 0))
                .sum::<f64>();
        }
        if let Some(b) = self.bias {
            logit += s.value(b).get(0, 0);
        }
        Ok(logit)
    }

    fn head_value(&self, z: &DenseVector) -> Result<f64> {
        let head = self.head.as_ref().expect("head slots");
        Ok(mlp_forward::<ChaCha8Rng>(&self.spec.mlp, head, z, &self.store, None)?.as_slice()[0])
    }

    pub fn embedding_table(&self) -> Option<&EmbeddingTable> {
        self.emb.as_ref()
    }

    pub fn field_aware_table(&self) -> Option<&FieldAwareEmbeddingTable> {
        self.ffm.as_ref()
    }

    pub fn linear_table(&self) -> Option<&EmbeddingTable> {
        self.linear.as_ref()
    }

    pub fn bias_slot(&self) -> Option<SlotId> {
        self.bias
    }

    pub fn head_slots(&self) -> Option<&MlpSlots> {
        self.head.as_ref()
    }

    pub fn aggregation_slot(&self) -> Option<SlotId> {
        self.agg
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.consts.pairs
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            spec: self.spec.clone(),
            checkpoint: self.store.to_checkpoint(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        let file: ModelFile = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{} is not a model file: {e}", path.display())))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::data(format!(
                "unknown model format `{}`",
                file.format
            )));
        }
        let mut model = Model::build(file.spec, 0)?;
        model.store.load_checkpoint(&file.checkpoint)?;
        Ok(model)
    }
}

fn half_sum(tape: &mut Tape, z: NodeId) -> Readout {
    let total = tape.sum_all(z);
    Readout::Sum(tape.scale(total, 0.5))
}

const MODEL_FORMAT: &str = "sam-ctr-model/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    spec: ModelSpec,
    checkpoint: Checkpoint,
}

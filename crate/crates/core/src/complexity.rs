//! Parameter and multiply-add accounting per layer, against the closed forms
//! of the complexity table.
//!
//! Counting convention: biases are ignored; EL counts the embedding entries
//! one record activates (`dn`, plus `n` for a first-order term); FI counts
//! interaction weights; ST counts the weights of the readout. For SAM3 the
//! field-combination weights and the `d`-wide head compose into one linear
//! readout over the `n x d` layer output, which is counted as `dn` under ST.
//! The per-layer residual maps are reported on their own line.

use serde::{Deserialize, Serialize};

use crate::kind::ModelKind;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub model: ModelKind,
    pub n: usize,
    pub d: usize,
    pub layers: usize,
    pub el: usize,
    pub fi: usize,
    pub al: usize,
    pub st: usize,
    /// `el + fi + al + st`.
    pub total: usize,
    /// SAM3 residual maps, outside the table convention.
    pub residual: usize,
    /// Every trainable scalar actually allocated.
    pub stored_parameters: usize,
    pub multiply_adds: usize,
    pub table_space: Option<usize>,
    pub table_time: Option<usize>,
    pub notes: Vec<String>,
}

impl ComplexityReport {
    pub fn matches_table(&self) -> Option<bool> {
        self.table_space.map(|t| t == self.total)
    }
}

/// Space column of the complexity table, where the table has a row.
pub fn table_space(kind: ModelKind, n: usize, d: usize, layers: usize) -> Option<usize> {
    Some(match kind {
        ModelKind::Lr => n,
        ModelKind::Sam1 => 2 * d * n,
        ModelKind::Fm => n + d * n,
        ModelKind::Sam2A => 2 * d * n * n + d * n,
        ModelKind::Sam2E => d * n * n + d * n,
        ModelKind::AutoInt => 3 * layers * d * d + 2 * d * n,
        ModelKind::Sam3A => layers * (d * d + d * n * n) + 2 * d * n,
        ModelKind::Sam3E => layers * d * d + 2 * d * n,
        _ => return None,
    })
}

/// Time column of the complexity table.
pub fn table_time(kind: ModelKind, n: usize, d: usize, layers: usize) -> Option<usize> {
    Some(match kind {
        ModelKind::Lr => n,
        ModelKind::Sam1 | ModelKind::Fm => d * n,
        ModelKind::Sam2A | ModelKind::Sam2E => 2 * d * n * n,
        ModelKind::AutoInt => layers * (3 * d * d * n + 2 * d * n * n) + d * n,
        ModelKind::Sam3A | ModelKind::Sam3E => layers * (d * d * n + 2 * d * n * n) + d * n,
        _ => return None,
    })
}

fn mlp_weights(input: usize, hidden: &[usize]) -> usize {
    let mut widths = vec![input];
    widths.extend(hidden);
    widths.push(1);
    widths.windows(2).map(|w| w[0] * w[1]).sum()
}

pub fn count_complexity(model: &Model) -> ComplexityReport {
    let spec = &model.spec;
    let kind = spec.kind;
    let n = spec.n();
    let d = spec.embedding_dim();
    let l = if kind.is_sam3() { spec.layers } else { 1 };
    let m = model.pairs().len();
    let hidden = &spec.mlp.hidden;
    let lin = if spec.linear { n } else { 0 };
    let mut notes = Vec::new();

    let el = match kind {
        ModelKind::Ffm => n * (n - 1) * d,
        _ => n * d,
    } + lin;

    let (fi, st, time) = match kind {
        ModelKind::Lr => (0, 0, n),
        ModelKind::Fm => (0, 0, d * n),
        ModelKind::Ffm => (0, 0, d * n * (n - 1) / 2),
        ModelKind::Fwfm => (n * (n - 1) / 2, 0, d * n * (n - 1) / 2 + n * (n - 1) / 2),
        ModelKind::Ipnn => (
            n * d,
            mlp_weights(n, hidden),
            2 * d * n * n + mlp_weights(n, hidden),
        ),
        ModelKind::Dcn => (n, n * d, 2 * n * d),
        ModelKind::DeepFmDeep => (0, mlp_weights(n * d, hidden), mlp_weights(n * d, hidden)),
        ModelKind::Cin2 => (n * n, n, d * n * n + n * n + n),
        ModelKind::Afm => {
            let t = spec.attention_width.unwrap_or(d);
            let pairs = n * (n - 1);
            (t * d + t + d, 0, pairs * (d + t * d + t + d + 1))
        }
        ModelKind::AutoInt => {
            if spec.layers > 1 {
                notes.push(format!(
                    "AutoInt is built with one attention layer; L = {} is not applied",
                    spec.layers
                ));
            }
            (3 * d * d, n * d, 3 * d * d * n + 2 * d * n * n + d * n)
        }
        ModelKind::Sam1 => (0, n * d, n * d),
        ModelKind::Sam2A => (n * n * d, m * d, 2 * m * d),
        ModelKind::Sam2E => (0, m * d, 3 * m * d),
        ModelKind::Sam3A | ModelKind::Sam3E => {
            let per_layer_fi = d * d
                + if kind == ModelKind::Sam3A {
                    n * n * d
                } else {
                    0
                };
            // projection, scores, mixing, residual map
            let mix = if kind == ModelKind::Sam3A {
                n * n * d
            } else {
                d * n * n + d * n
            };
            let per_layer_time = d * d * n + d * n * n + mix + d * d * n;
            (l * per_layer_fi, n * d, l * per_layer_time + d * n + d)
        }
    };
    if !kind.is_sam3() && kind != ModelKind::AutoInt && spec.layers > 1 {
        notes.push(format!(
            "L = {} ignored: {kind} has no stacked layers",
            spec.layers
        ));
    }
    let residual = if kind.is_sam3() { l * d * d } else { 0 };
    let al = 0;
    let linear_time = lin;
    let total = el + fi + al + st;

    let table_layers = if kind == ModelKind::AutoInt { 1 } else { l };
    let mut table_space_v = table_space(kind, n, d, table_layers);
    if kind.is_sam2() && (spec.pairs != crate::interaction::PairSet::All) {
        notes.push("table row assumes all n^2 ordered pairs".into());
        table_space_v = None;
    }
    if matches!(kind, ModelKind::Sam1 | ModelKind::Sam2A | ModelKind::Sam2E) && spec.linear {
        notes.push("first-order term adds n to EL".into());
    }

    ComplexityReport {
        model: kind,
        n,
        d,
        layers: l,
        el,
        fi,
        al,
        st,
        total,
        residual,
        stored_parameters: model.store.trainable_count(),
        multiply_adds: time + linear_time,
        table_space: table_space_v,
        table_time: table_time(kind, n, d, table_layers),
        notes,
    }
}

/// Grid sweep as CSV: one row per (model, n, d, L).
pub fn grid_csv(reports: &[ComplexityReport]) -> String {
    let mut out = String::from(
        "model,n,d,layers,el,fi,al,st,total,table_space,matches,multiply_adds,table_time\n",
    );
    for r in reports {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        let matches = r.matches_table().map(|b| b.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.model,
            r.n,
            r.d,
            r.layers,
            r.el,
            r.fi,
            r.al,
            r.st,
            r.total,
            opt(r.table_space),
            matches,
            r.multiply_adds,
            opt(r.table_time)
        ));
    }
    out
}

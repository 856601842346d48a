//! Central-difference gradient checker.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::EncodedRecord;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParameterStore;
use crate::tape::Tape;

/// Largest `|analytic - numeric| / max(1, |numeric|)` over every entry of
/// every trainable slot, where `analytic` is read from the store's gradient
/// buffers and `numeric` is the central difference of `f` with step `eps`.
pub fn finite_diff_check(
    f: &dyn Fn(&ParameterStore) -> Result<f64>,
    store: &mut ParameterStore,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::domain("finite-difference step must be positive"));
    }
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().filter(|id| store.slot(*id).trainable).collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            let numeric = central_difference(f, store, id, k, eps)?;
            let analytic = store.grad(id).data()[k];
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCheck {
    pub eps: f64,
    /// Fixed dropout stream; `None` checks inference mode.
    pub dropout_seed: Option<u64>,
    /// Added to the first analytic gradient entry, to exercise the checker.
    pub corrupt: Option<f64>,
}

impl Default for ModelCheck {
    fn default() -> Self {
        ModelCheck {
            eps: 1e-5,
            dropout_seed: None,
            corrupt: None,
        }
    }
}

/// Checks the tape gradient of a model's mean batch loss against central
/// differences over every trainable parameter.
pub fn check_model(model: &Model, records: &[EncodedRecord], opts: ModelCheck) -> Result<f64> {
    let loss_of = |store: &ParameterStore, tape: &mut Tape| {
        let mut rng = opts.dropout_seed.map(ChaCha8Rng::seed_from_u64);
        model.batch_loss_with(store, tape, records, rng.as_mut())
    };
    let mut store = model.store.clone();
    store.zero_grad();
    let mut tape = Tape::new();
    let root = loss_of(&store, &mut tape)?;
    tape.backward(root, &mut store)?;
    if let Some(delta) = opts.corrupt {
        if let Some(id) = store.ids().find(|id| store.slot(*id).trainable) {
            store.grad_mut(id).data_mut()[0] += delta;
        }
    }
    let f = |st: &ParameterStore| {
        let mut tape = Tape::new();
        let root = loss_of(st, &mut tape)?;
        tape.value(root).item()
    };
    finite_diff_check(&f, &mut store, opts.eps)
}

/// Central difference at step `eps`, shrunk tenfold until two successive
/// steps agree, so a step that straddles a ReLU kink is not trusted.
fn central_difference(
    f: &dyn Fn(&ParameterStore) -> Result<f64>,
    store: &mut ParameterStore,
    id: crate::params::SlotId,
    k: usize,
    eps: f64,
) -> Result<f64> {
    let mut h = eps;
    let mut prev = central_step(f, store, id, k, h)?;
    for _ in 0..MAX_SHRINKS {
        h /= 10.0;
        let next = central_step(f, store, id, k, h)?;
        if (next - prev).abs() <= AGREEMENT * prev.abs().max(1.0) {
            return Ok(prev);
        }
        prev = next;
    }
    Ok(prev)
}

const MAX_SHRINKS: usize = 3;
const AGREEMENT: f64 = 1e-8;

fn central_step(
    f: &dyn Fn(&ParameterStore) -> Result<f64>,
    store: &mut ParameterStore,
    id: crate::params::SlotId,
    k: usize,
    eps: f64,
) -> Result<f64> {
    let orig = store.value(id).data()[k];
    store.value_mut(id).data_mut()[k] = orig + eps;
    let plus = f(store);
    store.value_mut(id).data_mut()[k] = orig - eps;
    let minus = f(store);
    store.value_mut(id).data_mut()[k] = orig;
    let (plus, minus) = (plus?, minus?);
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite evaluation while perturbing `{}`",
            store.slot(id).name
        )));
    }
    Ok((plus - minus) / (2.0 * eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sigmoid;
    use crate::params::Init;
    use crate::tape::Tape;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new(0);
        s.add(
            "w",
            4,
            1,
            Init::Xavier {
                fan_in: 4,
                fan_out: 1,
            },
        )
        .unwrap();
        s.init_xavier(9);
        s
    }

    const X: [f64; 4] = [0.5, -1.0, 2.0, 0.25];

    fn sigmoid_inner(s: &ParameterStore) -> Result<f64> {
        let w = s.get("w")?.data();
        Ok(sigmoid(w.iter().zip(X).map(|(a, b)| a * b).sum()))
    }

    fn fill_analytic(s: &mut ParameterStore) {
        let id = s.id("w").unwrap();
        s.zero_grad();
        let mut t = Tape::new();
        let w = t.param(s, id);
        let x = t.constant(crate::linalg::DenseMatrix::column(X.to_vec()));
        let z = t.inner(w, x).unwrap();
        let y = t.sigmoid(z);
        t.backward(y, s).unwrap();
    }

    #[test]
    fn linear_function_is_exact() {
        let mut s = store();
        let id = s.id("w").unwrap();
        s.grad_mut(id).data_mut().copy_from_slice(&X);
        let f = |s: &ParameterStore| -> Result<f64> {
            Ok(s.get("w")?.data().iter().zip(X).map(|(a, b)| a * b).sum())
        };
        let err = finite_diff_check(&f, &mut s, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_of_inner_passes() {
        let mut s = store();
        fill_analytic(&mut s);
        let err = finite_diff_check(&sigmoid_inner, &mut s, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut s = store();
        fill_analytic(&mut s);
        let id = s.id("w").unwrap();
        s.grad_mut(id).data_mut()[2] += 0.1;
        let err = finite_diff_check(&sigmoid_inner, &mut s, 1e-5).unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn step_straddling_a_kink_is_shrunk() {
        let mut s = ParameterStore::new(0);
        let id = s.add("w", 1, 1, Init::Constant(0.0)).unwrap();
        s.value_mut(id).data_mut()[0] = 3e-6;
        s.grad_mut(id).data_mut()[0] = 2.0;
        let f = |s: &ParameterStore| -> Result<f64> { Ok(2.0 * s.get("w")?.data()[0].max(0.0)) };
        let err = finite_diff_check(&f, &mut s, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn bad_step_and_non_finite_are_errors() {
        let mut s = store();
        assert!(finite_diff_check(&sigmoid_inner, &mut s, 0.0).is_err());
        let nan = |_: &ParameterStore| -> Result<f64> { Ok(f64::NAN) };
        assert!(matches!(
            finite_diff_check(&nan, &mut s, 1e-5),
            Err(Error::Numeric(_))
        ));
    }

    fn small_batch(schema: &crate::data::FieldSchema) -> Vec<EncodedRecord> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..4)
            .map(|_| EncodedRecord {
                label: rng.gen_range(0..2),
                indices: schema
                    .fields
                    .iter()
                    .map(|f| rng.gen_range(0..f.vocab_size as u32))
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn every_model_gradient_matches_differences() {
        use crate::kind::ModelKind;
        use crate::model::ModelSpec;
        let schema = crate::data::FieldSchema::with_vocab_sizes(&[4, 3, 5]).unwrap();
        let batch = small_batch(&schema);
        for k in ModelKind::ALL {
            let mut spec = ModelSpec::new(k, schema.clone(), 3);
            spec.layers = 2;
            let model = Model::build(spec, 2).unwrap();
            let err = check_model(&model, &batch, ModelCheck::default()).unwrap();
            assert!(err < 1e-6, "{k}: {err}");
            if k.has_mlp() {
                let opts = ModelCheck {
                    dropout_seed: Some(8),
                    ..ModelCheck::default()
                };
                let err = check_model(&model, &batch, opts).unwrap();
                assert!(err < 1e-6, "{k} with dropout: {err}");
            }
            let bad = ModelCheck {
                corrupt: Some(0.1),
                ..ModelCheck::default()
            };
            assert!(check_model(&model, &batch, bad).unwrap() > 1e-2, "{k}");
        }
    }
}

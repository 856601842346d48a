//! Mini-batch Adam with L2 regularization, dropout, and early stopping on
//! validation AUC.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{sigmoid, DenseMatrix};
use crate::metrics;
use crate::model::Model;
use crate::params::{Checkpoint, ParameterStore};
use crate::tape::Tape;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2: f64,
    /// Overrides the model's MLP dropout rate when set.
    pub dropout: Option<f64>,
    pub seed: u64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 1024,
            epochs: 20,
            l2: 1e-5,
            dropout: None,
            seed: 0,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epochs must be positive"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::config(format!(
                "L2 weight {} must be non-negative",
                self.l2
            )));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("dropout {p} outside [0, 1)")));
            }
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch number (1-based) of the restored checkpoint.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_auc\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.epoch, e.train_loss, e.val_loss, e.val_auc
            );
        }
        out
    }
}

/// First and second moment buffers, one per slot.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros = |s: &crate::params::Slot| DenseMatrix::zeros(s.value.rows(), s.value.cols());
        AdamState {
            m: store.slots().iter().map(zeros).collect(),
            v: store.slots().iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState, t: u64, lr: f64) -> Result<()> {
    if t < 1 {
        return Err(Error::contract("Adam step counter starts at 1"));
    }
    if state.m.len() != store.len() {
        return Err(Error::contract(
            "optimizer state does not match the parameter store",
        ));
    }
    let c1 = 1.0 - BETA1.powf(t as f64);
    let c2 = 1.0 - BETA2.powf(t as f64);
    for (k, slot) in store.slots_mut().iter_mut().enumerate() {
        if state.m[k].shape() != slot.value.shape() {
            return Err(Error::contract(format!(
                "optimizer state shape mismatch on `{}`",
                slot.name
            )));
        }
        if !slot.trainable {
            continue;
        }
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let g = slot.grad.data();
        let w = slot.value.data_mut();
        for idx in 0..w.len() {
            m[idx] = BETA1 * m[idx] + (1.0 - BETA1) * g[idx];
            v[idx] = BETA2 * v[idx] + (1.0 - BETA2) * g[idx] * g[idx];
            let m_hat = m[idx] / c1;
            let v_hat = v[idx] / c2;
            w[idx] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// `lambda * sum(theta^2)` over trainable slots.
pub fn l2_penalty(store: &ParameterStore, lambda: f64) -> f64 {
    lambda
        * store
            .slots()
            .iter()
            .filter(|s| s.trainable)
            .flat_map(|s| s.value.data())
            .map(|x| x * x)
            .sum::<f64>()
}

/// Adds `2 * lambda * theta` to every trainable gradient.
pub fn add_l2_grad(store: &mut ParameterStore, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for slot in store.slots_mut().iter_mut().filter(|s| s.trainable) {
        let w = slot.value.data();
        for (g, x) in slot.grad.data_mut().iter_mut().zip(w) {
            *g += 2.0 * lambda * x;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best: Checkpoint,
}

/// Validation logloss and AUC of the current parameters.
pub fn validation_metrics(model: &Model, valid: &Dataset) -> Result<(f64, f64)> {
    let logits = model.logits(&valid.records)?;
    let labels = valid.labels();
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok((
        metrics::logloss(&probs, &labels)?,
        metrics::auc(&logits, &labels)?,
    ))
}

/// Trains in place and leaves the best-validation parameters in `model`.
pub fn train(
    model: &mut Model,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.schema != model.spec.schema || valid.schema != model.spec.schema {
        return Err(Error::contract(
            "train, validation and model schemas differ",
        ));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::domain(
            "training and validation splits must be non-empty",
        ));
    }
    if let Some(p) = cfg.dropout {
        if !model.spec.mlp.hidden.is_empty() {
            model.spec.mlp.dropout = p;
        }
    }
    let use_dropout = model.spec.mlp.dropout > 0.0 && !model.spec.mlp.hidden.is_empty();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd50_f0a7);
    let mut state = AdamState::new(&model.store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stale = 0;
    let mut t = 0u64;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<_> = chunk.iter().map(|&i| train.records[i].clone()).collect();
            model.store.zero_grad();
            let mut tape = Tape::new();
            let drop = if use_dropout {
                Some(&mut dropout_rng)
            } else {
                None
            };
            let root = model.batch_loss(&mut tape, &batch, drop)?;
            let loss = tape.value(root).item()?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            tape.backward(root, &mut model.store)?;
            add_l2_grad(&mut model.store, cfg.l2);
            t += 1;
            adam_step(&mut model.store, &mut state, t, cfg.lr)?;
            loss_sum += loss * batch.len() as f64;
        }
        let (val_loss, val_auc) = validation_metrics(model, valid)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: 0,
                loss: val_loss,
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_auc,
        });
        match &best {
            Some((auc, _)) if val_auc <= *auc => {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
            _ => {
                best = Some((val_auc, model.store.to_checkpoint()));
                history.best_epoch = epoch;
                stale = 0;
            }
        }
    }

    let (_, ckpt) = best.expect("at least one epoch ran");
    model.store.load_checkpoint(&ckpt)?;
    Ok(TrainOutcome {
        history,
        best: ckpt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dcm, FieldSchema, SyntheticSpec};
    use crate::kind::ModelKind;
    use crate::model::ModelSpec;
    use crate::params::Init;

    fn single(value: f64, grad: f64) -> ParameterStore {
        let mut s = ParameterStore::new(0);
        let id = s.add("w", 1, 1, Init::Constant(value)).unwrap();
        s.init_xavier(0);
        s.grad_mut(id).set(0, 0, grad);
        s
    }

    fn w(s: &ParameterStore) -> f64 {
        s.get("w").unwrap().get(0, 0)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = single(0.3, 0.0);
        let mut st = AdamState::new(&s);
        for t in 1..=5 {
            adam_step(&mut s, &mut st, t, 0.1).unwrap();
        }
        assert_eq!(w(&s), 0.3);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [2.5, -0.01, 1e3] {
            let mut s = single(0.0, g);
            let mut st = AdamState::new(&s);
            adam_step(&mut s, &mut st, 1, 0.01).unwrap();
            assert!((w(&s) + 0.01 * g.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut s = single(0.0, 0.37);
        let mut st = AdamState::new(&s);
        let mut prev = 0.0;
        let mut step = 0.0;
        for t in 1..=2000 {
            let id = s.id("w").unwrap();
            s.grad_mut(id).set(0, 0, 0.37);
            adam_step(&mut s, &mut st, t, 1e-3).unwrap();
            step = prev - w(&s);
            prev = w(&s);
        }
        assert!((step - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn step_zero_is_rejected() {
        let mut s = single(0.0, 1.0);
        let mut st = AdamState::new(&s);
        assert!(matches!(
            adam_step(&mut s, &mut st, 0, 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn l2_gradient_matches_differences() {
        let mut s = ParameterStore::new(0);
        s.add(
            "a",
            2,
            3,
            Init::Xavier {
                fan_in: 2,
                fan_out: 3,
            },
        )
        .unwrap();
        s.add(
            "b",
            1,
            4,
            Init::Xavier {
                fan_in: 1,
                fan_out: 4,
            },
        )
        .unwrap();
        s.init_xavier(9);
        let lambda = 0.37;
        s.zero_grad();
        add_l2_grad(&mut s, lambda);
        let err =
            crate::gradcheck::finite_diff_check(&|st| Ok(l2_penalty(st, lambda)), &mut s, 1e-5)
                .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    fn lr_data(noise: f64, samples: usize, seed: u64) -> (Dataset, Dataset) {
        let spec = SyntheticSpec::random_linear(vec![4, 5, 3], 2.0, 0.0, noise, samples, seed);
        let ds = generate_dcm(&spec).unwrap().dataset;
        let cut = samples * 4 / 5;
        let valid = Dataset::new(ds.schema.clone(), ds.records[cut..].to_vec()).unwrap();
        let train = Dataset::new(ds.schema, ds.records[..cut].to_vec()).unwrap();
        (train, valid)
    }

    fn lr_model(schema: &FieldSchema, seed: u64) -> Model {
        Model::build(ModelSpec::new(ModelKind::Lr, schema.clone(), 1), seed).unwrap()
    }

    #[test]
    fn separable_lr_loss_falls_below_a_tenth() {
        let (tr, va) = lr_data(1e-3, 2000, 4);
        let mut m = lr_model(&tr.schema, 1);
        let cfg = TrainConfig {
            lr: 0.05,
            batch_size: 64,
            epochs: 40,
            l2: 0.0,
            patience: 40,
            ..Default::default()
        };
        let out = train(&mut m, &tr, &va, &cfg).unwrap();
        let losses: Vec<f64> = out.history.epochs.iter().map(|e| e.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        assert!(*losses.last().unwrap() < 0.1, "{losses:?}");
    }

    #[test]
    fn huge_penalty_drives_loss_to_ln2() {
        let (tr, va) = lr_data(0.5, 600, 2);
        let mut m = lr_model(&tr.schema, 3);
        let cfg = TrainConfig {
            lr: 0.01,
            batch_size: 32,
            epochs: 30,
            l2: 1e6,
            patience: 100,
            ..Default::default()
        };
        let out = train(&mut m, &tr, &va, &cfg).unwrap();
        let last = out.history.epochs.last().unwrap();
        assert!(
            (last.val_loss - std::f64::consts::LN_2).abs() < 0.02,
            "{last:?}"
        );
        let max = m
            .store
            .slots()
            .iter()
            .flat_map(|s| s.value.data())
            .fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(max < 0.05, "{max}");
    }

    #[test]
    fn same_seed_same_history() {
        let (tr, va) = lr_data(0.3, 400, 5);
        let schema = tr.schema.clone();
        let cfg = TrainConfig {
            lr: 0.01,
            batch_size: 16,
            epochs: 3,
            seed: 11,
            ..Default::default()
        };
        let run = || {
            let mut spec = ModelSpec::new(ModelKind::Ipnn, schema.clone(), 3);
            spec.mlp.hidden = vec![4, 4];
            let mut m = Model::build(spec, 8).unwrap();
            let out = train(&mut m, &tr, &va, &cfg).unwrap();
            (out.history, m.store.to_checkpoint())
        };
        let (h1, c1) = run();
        let (h2, c2) = run();
        assert_eq!(h1, h2);
        assert_eq!(
            serde_json::to_string(&c1).unwrap(),
            serde_json::to_string(&c2).unwrap()
        );
        assert!(
            h1.best().unwrap().val_auc >= h1.epochs.iter().map(|e| e.val_auc).fold(0.0, f64::max)
        );
    }

    fn regularized_loss(m: &Model, batch: &[crate::data::EncodedRecord], l2: f64) -> f64 {
        let mut tape = Tape::new();
        let root = m.batch_loss(&mut tape, batch, None).unwrap();
        tape.value(root).item().unwrap() + l2_penalty(&m.store, l2)
    }

    #[test]
    fn small_step_decreases_every_model() {
        let schema = FieldSchema::with_vocab_sizes(&[4, 3, 5, 3]).unwrap();
        let spec = SyntheticSpec::random_linear(vec![2, 1, 3, 1], 1.0, 0.0, 1.0, 16, 3);
        let batch = generate_dcm(&spec).unwrap().dataset.records;
        let l2 = 1e-5;
        for kind in ModelKind::ALL {
            let mut s = ModelSpec::new(kind, schema.clone(), 3);
            s.layers = 2;
            let mut m = Model::build(s, 5).unwrap();
            let before = regularized_loss(&m, &batch, l2);
            m.store.zero_grad();
            let mut tape = Tape::new();
            let root = m.batch_loss(&mut tape, &batch, None).unwrap();
            tape.backward(root, &mut m.store).unwrap();
            add_l2_grad(&mut m.store, l2);
            let mut st = AdamState::new(&m.store);
            adam_step(&mut m.store, &mut st, 1, 1e-5).unwrap();
            let after = regularized_loss(&m, &batch, l2);
            assert!(after < before, "{kind}: {before} -> {after}");
        }
    }

    #[test]
    fn loss_without_dropout_is_forward_logloss() {
        let schema = FieldSchema::with_vocab_sizes(&[4, 3, 5, 3]).unwrap();
        let spec = SyntheticSpec::random_linear(vec![2, 1, 3, 1], 1.0, 0.0, 1.0, 20, 6);
        let batch = generate_dcm(&spec).unwrap().dataset.records;
        for kind in [ModelKind::DeepFmDeep, ModelKind::Ipnn, ModelKind::Sam2A] {
            let m = Model::build(ModelSpec::new(kind, schema.clone(), 3), 2).unwrap();
            let mut tape = Tape::new();
            let root = m.batch_loss(&mut tape, &batch, None).unwrap();
            let probs = m.predict(&batch).unwrap();
            let labels: Vec<u8> = batch.iter().map(|r| r.label).collect();
            let reference = metrics::logloss(&probs, &labels).unwrap();
            assert!((tape.value(root).item().unwrap() - reference).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_schema_and_bad_config_rejected() {
        let (tr, va) = lr_data(0.3, 100, 5);
        let other = FieldSchema::with_vocab_sizes(&[3, 3]).unwrap();
        let mut m = lr_model(&other, 0);
        assert!(matches!(
            train(&mut m, &tr, &va, &TrainConfig::default()),
            Err(Error::Contract(_))
        ));
        let bad = TrainConfig {
            patience: 0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn history_csv_lists_each_epoch() {
        let h = TrainHistory {
            epochs: vec![
                EpochRecord {
                    epoch: 1,
                    train_loss: 0.5,
                    val_loss: 0.6,
                    val_auc: 0.7,
                },
                EpochRecord {
                    epoch: 2,
                    train_loss: 0.4,
                    val_loss: 0.55,
                    val_auc: 0.75,
                },
            ],
            best_epoch: 2,
        };
        assert_eq!(
            h.to_csv(),
            "epoch,train_loss,val_loss,val_auc\n1,0.5,0.6,0.7\n2,0.4,0.55,0.75\n"
        );
    }
}

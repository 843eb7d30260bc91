use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, Adam};
use super::{evaluate_predictions, TrainEvalError};
use crate::model::{decode_labels, forward_nodes, Batch, EncodedQuery, ForwardOptions, Model, ModelError};
use crate::numerics::{GradientTape, NumericsError, Scalar, LOG_FLOOR};
use crate::querydata::QueryRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    /// Global gradient norm cap.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            epochs: 20,
            batch_size: 32,
            eval_batch_size: 256,
            seed: 0,
            patience: 3,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainEvalError> {
        let bad = |m: &str| Err(TrainEvalError::InvalidConfig(m.to_string()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs and batch sizes must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_token_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Row 0 holds the losses of the initial parameters.
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_token_acc\n");
        for e in &self.log {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_token_acc
            ));
        }
        s
    }
}

/// Encoded queries cut into batches of at most `size`, in order.
fn batches<T: Scalar>(
    model: &Model<T>,
    encoded: &[EncodedQuery],
    size: usize,
) -> Result<Vec<(Batch<T>, usize)>, ModelError> {
    encoded
        .chunks(size)
        .map(|c| {
            let refs: Vec<&EncodedQuery> = c.iter().collect();
            Ok((model.batch(&refs)?, c.len()))
        })
        .collect()
}

/// Mean query loss and predicted labels over prepared batches.
fn loss_and_predictions<T: Scalar>(
    model: &Model<T>,
    batches: &[(Batch<T>, usize)],
) -> Result<(f64, Vec<Vec<u8>>), ModelError> {
    let mut total = 0.0;
    let mut n = 0;
    let mut preds = Vec::new();
    for (b, size) in batches {
        let mut tape = GradientTape::new(&model.params);
        let nodes = forward_nodes(&mut tape, &model.config, b, ForwardOptions::default())?;
        let loss = tape.softmax_cross_entropy(nodes.logits, &b.targets, &b.row_weights, T::of(LOG_FLOOR));
        total += tape.value(loss).data()[0].as_f64() * *size as f64;
        n += size;
        preds.extend(decode_labels(tape.value(nodes.logits), &b.layout));
    }
    Ok((total / n as f64, preds))
}

/// Trains `model` in place with Adam and early stopping on validation
/// loss. On return the model holds the parameters of the best epoch.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    train_set: &[QueryRecord],
    val_set: &[QueryRecord],
) -> Result<TrainReport, TrainEvalError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainEvalError::Empty);
    }
    let encoded = train_set
        .iter()
        .map(|r| model.encode(r))
        .collect::<Result<Vec<_>, _>>()?;
    let val_encoded = val_set.iter().map(|r| model.encode(r)).collect::<Result<Vec<_>, _>>()?;
    let val_batches = batches(model, &val_encoded, cfg.eval_batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::<T>::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);

    let validate = |model: &Model<T>| -> Result<(f64, f64), TrainEvalError> {
        let (loss, preds) = loss_and_predictions(model, &val_batches)?;
        Ok((loss, evaluate_predictions(val_set, &preds)?.token_acc))
    };

    let initial_train = loss_and_predictions(model, &batches(model, &encoded, cfg.eval_batch_size)?)?.0;
    let (val_loss, val_token_acc) = validate(model)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: initial_train,
        val_loss,
        val_token_acc,
    }];
    let mut best = (0, val_loss, model.params.clone());
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..encoded.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&EncodedQuery> = chunk.iter().map(|&i| &encoded[i]).collect();
            let batch = model.batch(&refs)?;
            let opts = ForwardOptions {
                gate_override: None,
                dropout_rng: (model.config.dropout > 0.0).then_some(&mut rng),
            };
            let diverged = |loss: f64| TrainEvalError::Diverged { epoch, batch: bi, loss };
            let (loss, mut grads) = match model.loss_and_gradients(&batch, opts) {
                Ok(v) => v,
                Err(ModelError::Numerics(NumericsError::NonFinite { .. })) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e.into()),
            };
            let loss = loss.as_f64();
            if !grads.iter().all(|g| g.is_finite()) {
                return Err(diverged(loss));
            }
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            opt.step(model.params.tensors_mut(), &grads);
            total += loss * chunk.len() as f64;
        }
        if !model.params.tensors().iter().all(|t| t.is_finite()) {
            return Err(TrainEvalError::Diverged {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size) - 1,
                loss: f64::NAN,
            });
        }
        let (val_loss, val_token_acc) = validate(model)?;
        log.push(EpochLog {
            epoch,
            train_loss: total / encoded.len() as f64,
            val_loss,
            val_token_acc,
        });
        if val_loss < best.1 {
            best = (epoch, val_loss, model.params.clone());
        } else if epoch - best.0 >= cfg.patience {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    model.params = best.2;
    Ok(TrainReport {
        log,
        best_epoch: best.0,
        best_val_loss: best.1,
        stopped_early,
    })
}

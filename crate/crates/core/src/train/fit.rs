use rand::seq::SliceRandom;

use super::config::TrainConfig;
use crate::data::Sample;
use crate::error::{Result, TabsError};
use crate::fsio;
use crate::model::{named_rng, Checkpoint, Model};
use crate::tensor::{AdamState, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// State at the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    out
}

fn loss_mask(sample: &Sample, masking: bool) -> Option<&[bool]> {
    masking.then_some(sample.mask.as_slice())
}

/// Loss of one sample and the gradient of every parameter.
pub fn sample_gradients(
    model: &Model<f32>,
    sample: &Sample,
    masking: bool,
) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let mut tape = Tape::new();
    let x = tape.constant(sample.input.clone());
    let fwd = model.forward(&mut tape, x, true)?;
    let loss = tape.mse_loss(fwd.output, &sample.gt, loss_mask(sample, masking))?;
    let value = tape.value(loss).item() as f64;
    let mut grads = tape.backward(loss)?;
    Ok((value, fwd.params.iter().map(|v| grads.take(*v)).collect()))
}

/// Mean loss over `samples` without recording gradients.
pub fn evaluation_loss(model: &Model<f32>, samples: &[Sample], masking: bool) -> Result<f64> {
    if samples.is_empty() {
        return Err(TabsError::config("validation set is empty"));
    }
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let x = tape.constant(s.input.clone());
        let fwd = model.forward(&mut tape, x, false)?;
        let loss = tape.mse_loss(fwd.output, &s.gt, loss_mask(s, masking))?;
        total += tape.value(loss).item() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Mini-batch Adam over `train` with per-epoch seeded shuffling; keeps the
/// state with the lowest validation loss. `on_epoch` sees every record.
pub fn fit(
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TabsError::config("training set is empty"));
    }
    if val.is_empty() {
        return Err(TabsError::config("validation set is empty"));
    }
    let mut model = Model::<f32>::new(&cfg.model)?;
    let mut adam = AdamState::new(cfg.hyper(), model.params().tensors());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs as u32 {
        order.sort_unstable();
        order.shuffle(&mut named_rng(cfg.seed, &format!("shuffle.epoch{epoch}")));
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Option<Tensor<f32>>> = vec![None; model.params().len()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, grads) = sample_gradients(&model, &train[i], cfg.loss_masking)?;
                if !loss.is_finite() {
                    return Err(TabsError::Numeric(format!(
                        "non-finite loss at epoch {epoch}, batch {} (subject {})",
                        b + 1,
                        train[i].subject
                    )));
                }
                batch_loss += loss;
                for (a, g) in acc.iter_mut().zip(grads) {
                    match (a.as_mut(), g) {
                        (Some(a), Some(g)) => {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                        (None, Some(g)) => *a = Some(g),
                        _ => {}
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for g in acc.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
                if g.data().iter().any(|x| !x.is_finite()) {
                    return Err(TabsError::Numeric(format!(
                        "non-finite gradient at epoch {epoch}, batch {}",
                        b + 1
                    )));
                }
            }
            let grads: Vec<Option<&Tensor<f32>>> = acc.iter().map(Option::as_ref).collect();
            adam.step(model.params_mut().tensors_mut(), &grads)?;
            epoch_loss += batch_loss;
        }
        let val_loss = evaluation_loss(&model, val, cfg.loss_masking)?;
        if !val_loss.is_finite() {
            return Err(TabsError::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|b| val_loss < b.best_validation_loss) {
            best = Some(Checkpoint {
                config: cfg.model.clone(),
                params: model.params().clone(),
                adam: adam.clone(),
                epoch,
                best_validation_loss: val_loss,
            });
        }
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch"),
        history,
    })
}

/// Loads the configured datasets, trains, then writes the selected
/// checkpoint and the history CSV.
pub fn train(cfg: &TrainConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let missing = |k: &str| TabsError::config(format!("training config needs `{k}`"));
    let train_ref = cfg.train.as_ref().ok_or_else(|| missing("train"))?;
    let val_ref = cfg.val.as_ref().ok_or_else(|| missing("val"))?;
    let train_set = train_ref.load(Some(1))?;
    let val_set = val_ref.load(Some(1))?;
    let outcome = fit(cfg, &train_set, &val_set, on_epoch)?;
    if let Some(path) = &cfg.checkpoint {
        outcome.checkpoint.save(path)?;
    }
    if let Some(path) = cfg.history_path() {
        fsio::write_atomic_str(&path, &outcome.history_csv())?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, render_scan, PhantomSpec, SiteParams};
    use crate::model::{ModelConfig, Variant};

    fn phantom_sample(size: usize, seed: u64) -> Sample {
        let (gt, _) = generate_phantom(&PhantomSpec::sample(size, seed, 0.2)).unwrap();
        let scan = render_scan(&gt, &SiteParams::preset("siteA").unwrap(), seed).unwrap();
        Sample::from_volumes("s", "siteA", 1, &scan, &gt).unwrap()
    }

    fn small(epochs: usize) -> TrainConfig {
        let mut model = ModelConfig::desk(Variant::Tabs);
        model.input_size = 16;
        let mut cfg = TrainConfig::desk(model);
        cfg.epochs = epochs;
        cfg
    }

    #[test]
    fn single_phantom_loss_decreases() {
        let set = vec![phantom_sample(16, 1)];
        let out = fit(&small(50), &set, &set, |_| {}).unwrap();
        assert!(out.history.last().unwrap().train_loss < out.history[0].train_loss);
    }

    #[test]
    fn history_and_selection() {
        let train = vec![phantom_sample(16, 1), phantom_sample(16, 2)];
        let val = vec![phantom_sample(16, 3)];
        let out = fit(&small(6), &train, &val, |_| {}).unwrap();
        assert_eq!(out.history.len(), 6);
        let min = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.checkpoint.best_validation_loss, min);
        let best = &out.history[out.checkpoint.epoch as usize - 1];
        assert_eq!(best.val_loss, min);
        assert_eq!(out.history_csv().lines().count(), 7);
    }

    #[test]
    fn empty_training_set_is_config_error() {
        let val = vec![phantom_sample(16, 3)];
        let err = fit(&small(1), &[], &val, |_| {}).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn nan_loss_reports_coordinates() {
        let mut bad = phantom_sample(16, 1);
        bad.input.data_mut()[0] = f32::NAN;
        let err = fit(&small(1), &[bad.clone()], &[bad], |_| {}).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("epoch 1, batch 1"), "{err}");
    }
}

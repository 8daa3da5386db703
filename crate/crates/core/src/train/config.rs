use std::path::{Path, PathBuf};

use crate::config::{Flag, KeyValues};
use crate::data::DatasetRef;
use crate::error::{Result, TabsError};
use crate::model::ModelConfig;
use crate::tensor::AdamHyper;

/// Learning rate of the desk preset. The full-size rate of 1e-5 barely moves
/// a network this small within a few hundred epochs; 2e-2 was the fastest
/// stable rate across all four variants on 32³ phantoms.
pub const DESK_LEARNING_RATE: f64 = 2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Restrict the loss to brain-mask voxels.
    pub loss_masking: bool,
    pub train: Option<DatasetRef>,
    pub val: Option<DatasetRef>,
    pub test: Option<DatasetRef>,
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

impl TrainConfig {
    pub fn desk(model: ModelConfig) -> Self {
        TrainConfig {
            seed: model.seed,
            model,
            learning_rate: DESK_LEARNING_RATE,
            weight_decay: 1e-6,
            batch_size: 3,
            epochs: 200,
            loss_masking: true,
            train: None,
            val: None,
            test: None,
            checkpoint: None,
            history: None,
        }
    }

    /// Full-size protocol: learning rate 1e-5, weight decay 1e-6, batch 3,
    /// 350 epochs.
    pub fn paper(model: ModelConfig) -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            epochs: 350,
            ..Self::desk(model)
        }
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(TabsError::config("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(TabsError::config("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TabsError::config("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TabsError::config("weight_decay must be non-negative"));
        }
        Ok(())
    }

    /// Consumes training keys from `kv`; relative paths resolve against `base`.
    pub fn take_from(kv: &mut KeyValues, base: &Path) -> Result<Self> {
        let preset = kv.peek("preset").map(str::to_string);
        let model = ModelConfig::take_from(kv)?;
        let mut cfg = match preset.as_deref() {
            Some("paper") => TrainConfig::paper(model),
            _ => TrainConfig::desk(model),
        };
        cfg.learning_rate = kv.take_or("learning_rate", cfg.learning_rate)?;
        cfg.weight_decay = kv.take_or("weight_decay", cfg.weight_decay)?;
        cfg.batch_size = kv.take_or("batch_size", cfg.batch_size)?;
        cfg.epochs = kv.take_or("epochs", cfg.epochs)?;
        cfg.loss_masking = kv.take_or("loss_masking", Flag(cfg.loss_masking))?.0;
        let dataset = |kv: &mut KeyValues, key: &str| -> Result<Option<DatasetRef>> {
            kv.take_str(key)
                .map(|s| DatasetRef::parse(&s).map(|d| resolve_dataset(d, base)))
                .transpose()
        };
        cfg.train = dataset(kv, "train")?;
        cfg.val = dataset(kv, "val")?;
        cfg.test = dataset(kv, "test")?;
        cfg.checkpoint = kv.take_str("checkpoint").map(|p| base.join(p));
        cfg.history = kv.take_str("history").map(|p| base.join(p));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::read(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let cfg = Self::take_from(&mut kv, base)?;
        kv.finish()?;
        Ok(cfg)
    }

    /// Where the per-epoch history goes when no explicit path is given.
    pub fn history_path(&self) -> Option<PathBuf> {
        self.history.clone().or_else(|| {
            self.checkpoint
                .as_ref()
                .map(|c| c.with_extension("history.csv"))
        })
    }
}

pub(crate) fn resolve_dataset(d: DatasetRef, base: &Path) -> DatasetRef {
    DatasetRef {
        dir: base.join(d.dir),
        split: d.split,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn parses_training_file() {
        let text = "variant = unet\nepochs = 5\nbatch_size = 2\nloss_masking = off\ntrain = data/siteA:train\ncheckpoint = out/m.ckpt\n";
        let mut kv = KeyValues::parse(text, "t").unwrap();
        let cfg = TrainConfig::take_from(&mut kv, Path::new("/w")).unwrap();
        kv.finish().unwrap();
        assert_eq!(cfg.model.variant, Variant::Unet);
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.loss_masking), (5, 2, false));
        assert_eq!(cfg.train.as_ref().unwrap().dir, PathBuf::from("/w/data/siteA"));
        assert_eq!(cfg.history_path().unwrap(), PathBuf::from("/w/out/m.history.csv"));
    }

    #[test]
    fn paper_preset_uses_published_protocol() {
        let mut kv = KeyValues::parse("preset = paper\n", "t").unwrap();
        let cfg = TrainConfig::take_from(&mut kv, Path::new("")).unwrap();
        assert_eq!(cfg.model.input_size, 192);
        assert_eq!((cfg.learning_rate, cfg.weight_decay, cfg.batch_size, cfg.epochs), (1e-5, 1e-6, 3, 350));
    }

    #[test]
    fn invalid_values_rejected() {
        let mut kv = KeyValues::parse("batch_size = 0\n", "t").unwrap();
        assert!(TrainConfig::take_from(&mut kv, Path::new("")).is_err());
    }
}

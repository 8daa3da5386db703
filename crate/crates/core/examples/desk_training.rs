//! Trains one variant on a fresh siteA phantom set and reports held-out DICE.
//!
//! cargo run --release --example desk_training -- [variant] [epochs] [learning_rate]

use std::path::Path;
use std::time::Instant;

use tabs::data::{generate_dataset, DatasetRef, PhantomOptions, Semantics, Split, Volume};
use tabs::metrics::{evaluate_pair, Metric, Tissue};
use tabs::model::{ModelConfig, Variant};
use tabs::train::{fit, TrainConfig};

fn main() -> tabs::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant: Variant = args.first().map_or(Ok(Variant::Tabs), |s| s.parse())?;
    let epochs: usize = args.get(1).map_or(40, |s| s.parse().expect("epochs"));
    let dir = Path::new("target/desk-phantoms");
    if !dir.join("manifest.csv").exists() {
        generate_dataset(&PhantomOptions::desk("siteA", 40, 7)?, dir)?;
    }
    let load = |s| DatasetRef::new(dir, Some(s)).load(Some(1));
    let (train, val, test) = (load(Split::Train)?, load(Split::Val)?, load(Split::Test)?);

    let mut cfg = TrainConfig::desk(ModelConfig::desk(variant));
    cfg.epochs = epochs;
    if let Some(lr) = args.get(2) {
        cfg.learning_rate = lr.parse().expect("learning rate");
    }
    let start = Instant::now();
    let outcome = fit(&cfg, &train, &val, |r| {
        println!(
            "epoch {:3}  train {:.5}  val {:.5}  ({:.0}s)",
            r.epoch,
            r.train_loss,
            r.val_loss,
            start.elapsed().as_secs_f64()
        )
    })?;
    println!(
        "selected epoch {} with validation loss {:.5}",
        outcome.checkpoint.epoch, outcome.checkpoint.best_validation_loss
    );

    let model = outcome.checkpoint.model()?;
    let mut dice = Vec::new();
    for s in &test {
        let gt = Volume::from_tensor(&s.gt, Semantics::TissueProbs, Default::default())?;
        let pred = Volume::from_tensor(&model.predict(&s.input)?, Semantics::TissueProbs, Default::default())?;
        let rec = evaluate_pair(&pred, &gt)?;
        let d: Vec<f64> = Tissue::ALL.iter().filter_map(|&t| rec.get(t, Metric::Dice)).collect();
        dice.push(d.iter().sum::<f64>() / d.len() as f64);
    }
    println!("{} test DICE {:.4}", variant.key(), dice.iter().sum::<f64>() / dice.len() as f64);
    Ok(())
}

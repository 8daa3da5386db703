//! Runs the three experiments end to end on tiny phantom sets and prints the
//! report tables.
//!
//! cargo run --release --example experiments -- [epochs]

use std::path::Path;

use tabs::data::{generate_dataset, DatasetRef, PhantomOptions};
use tabs::model::{ModelConfig, Variant};
use tabs::train::{run_experiment, ExperimentKind, ExperimentPlan, TrainConfig};

fn main() -> tabs::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(10, |s| s.parse().expect("epochs"));
    let root = Path::new("target/example-experiments");
    for (site, seed, retest) in [("siteA", 11, false), ("siteB", 12, false), ("siteC", 13, true)] {
        let mut opts = PhantomOptions::desk(site, 10, seed)?;
        opts.retest = retest;
        generate_dataset(&opts, &root.join(site))?;
    }
    let mut train = TrainConfig::desk(ModelConfig::desk(Variant::Tabs));
    train.epochs = epochs;
    let dataset = |s: &str| DatasetRef::new(root.join(s), None);
    let plan = |kind, targets: Vec<DatasetRef>, variants: Vec<Variant>| ExperimentPlan {
        kind,
        sources: vec![dataset("siteA")],
        targets,
        variants,
        checkpoints: root.join("checkpoints"),
        report: root.join(format!("{kind:?}").to_lowercase()),
        jobs: 1,
        train: train.clone(),
    };
    let runs = [
        plan(ExperimentKind::Performance, vec![], Variant::ALL.to_vec()),
        plan(ExperimentKind::Generality, vec![dataset("siteB"), dataset("siteC")], Variant::ALL.to_vec()),
        plan(ExperimentKind::Reliability, vec![dataset("siteC")], vec![Variant::Tabs]),
    ];
    for p in runs {
        let report = run_experiment(&p, &mut |label: &str, r: &tabs::train::EpochRecord| {
            if r.epoch as usize == epochs {
                println!("{label}: final train {:.5} val {:.5}", r.train_loss, r.val_loss)
            }
        })?;
        println!("\n{}", report.render_text());
    }
    Ok(())
}

//! Saves a freshly initialised checkpoint, reloads it, and shows that the
//! bytes and the predictions survive the trip.
//!
//! cargo run --release --example checkpoint_roundtrip

use tabs::model::{Checkpoint, ModelConfig, Variant};
use tabs::tensor::Tensor;
use tabs::train::TrainConfig;

fn main() -> tabs::Result<()> {
    let dir = std::env::temp_dir().join("tabs-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| tabs::TabsError::io("create_dir", e))?;
    let config = ModelConfig::desk(Variant::ResUnet);
    let ckpt = Checkpoint::initial(&config, TrainConfig::desk(config.clone()).hyper())?;
    let path = dir.join("resunet.ckpt");
    ckpt.save(&path)?;
    let back = Checkpoint::load(&path)?;
    println!("{} parameters, {} bytes on disk", back.params.numel(), std::fs::metadata(&path).map_or(0, |m| m.len()));
    println!("bytes identical after reload: {}", back.to_bytes() == ckpt.to_bytes());

    let n = config.input_size;
    let x = Tensor::from_fn(&[1, n, n, n], |i| ((i % 17) as f32 / 8.0) - 1.0);
    let (a, b) = (ckpt.model()?.predict(&x)?, back.model()?.predict(&x)?);
    println!("predictions identical: {}", a.data() == b.data());
    Ok(())
}

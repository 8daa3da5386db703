//! Prints the symbolic shape chain of the full-size model next to the
//! desk-size chain, then runs the desk forward pass to confirm it.
//!
//! cargo run --release --example shape_chain -- [variant]

use tabs::model::{count_parameters, shape_chain, Model, ModelConfig, Variant};
use tabs::tensor::Tensor;

fn main() -> tabs::Result<()> {
    let variant: Variant = std::env::args().nth(1).map_or(Ok(Variant::Tabs), |s| s.parse())?;
    let (paper, desk) = (ModelConfig::paper(variant), ModelConfig::desk(variant));
    let (big, small) = (shape_chain(&paper)?, shape_chain(&desk)?);
    println!("{:<24}{:<24}{}", "stage", "full size", "desk size");
    for (a, b) in big.iter().zip(&small) {
        println!("{:<24}{:<24}{}", a.name, a.dims(), b.dims());
    }
    println!("parameters: {} full, {} desk", count_parameters(&paper)?, count_parameters(&desk)?);

    let model = Model::<f32>::new(&desk)?;
    let n = desk.input_size;
    let traced = model.trace_shapes(&Tensor::zeros(&[1, n, n, n]))?;
    println!("desk forward pass {} the symbolic chain", if traced == small { "matches" } else { "DIFFERS from" });
    Ok(())
}

//! Compares tape gradients of a small conv → group norm → softmax → loss
//! chain against central differences.
//!
//! cargo run --release --example gradient_check

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tabs::tensor::{Tape, Tensor};

fn loss(x: &Tensor<f64>, w: &Tensor<f64>, target: &Tensor<f64>) -> tabs::Result<(f64, Tensor<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let wv = tape.constant(w.clone());
    let y = tape.conv3d(xv, wv, None, 1, 1)?;
    let ones = tape.constant(Tensor::from_fn(&[3], |_| 1.0));
    let zeros = tape.constant(Tensor::zeros(&[3]));
    let y = tape.group_norm(y, 3, ones, zeros, 1e-5)?;
    let y = tape.softmax(y, 0)?;
    let l = tape.mse_loss(y, target, None)?;
    let grads = tape.backward(l)?;
    Ok((tape.value(l).item(), grads.get(xv).expect("input gradient").clone()))
}

fn main() -> tabs::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let (x, w, target) = (u(&[2, 4, 4, 4]), u(&[3, 2, 3, 3, 3]), u(&[3, 4, 4, 4]));
    let (value, analytic) = loss(&x, &w, &target)?;
    println!("loss {value:.6}");

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in (0..x.numel()).step_by(7) {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let numeric = (loss(&plus, &w, &target)?.0 - loss(&minus, &w, &target)?.0) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-9);
        worst = worst.max(rel);
        println!("x[{i:3}]  tape {a:+.6e}  finite difference {numeric:+.6e}");
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}

use tabs::model::blocks::{multi_head_attention, se_block, AttentionWeights, SeWeights};
use tabs::tensor::Tensor;

use super::{gradient_error, rng, uniform};

pub const SEEDS: u64 = 5;
pub const GRAD_TOL: f64 = 1e-4;

type Suite = Vec<(&'static str, f64)>;

/// Worst relative error of every differentiable operation over `SEEDS`
/// random inputs each.
pub fn run_suite() -> Suite {
    let mut out: Suite = Vec::new();
    let mut record = |name: &'static str, err: f64| match out.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(err),
        None => out.push((name, err)),
    };
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut u = |shape: &[usize]| uniform(shape, &mut r);

        let inputs = [u(&[2, 4, 4, 4]), u(&[3, 2, 3, 3, 3]), u(&[3])];
        record("conv3d", gradient_error(&inputs, seed, |t, v| t.conv3d(v[0], v[1], Some(v[2]), 1, 1).unwrap()));
        let inputs = [u(&[2, 5, 5, 5]), u(&[2, 2, 3, 3, 3])];
        record("conv3d", gradient_error(&inputs, seed, |t, v| t.conv3d(v[0], v[1], None, 2, 1).unwrap()));

        let inputs = [u(&[3, 2, 2, 2]), u(&[3, 2, 2, 2, 2]), u(&[2])];
        record(
            "conv_transpose3d",
            gradient_error(&inputs, seed, |t, v| t.conv_transpose3d(v[0], v[1], Some(v[2]), 2).unwrap()),
        );

        let inputs = [u(&[4, 3, 3, 3]), u(&[4]), u(&[4])];
        record(
            "group_norm",
            gradient_error(&inputs, seed, |t, v| t.group_norm(v[0], 2, v[1], v[2], 1e-5).unwrap()),
        );

        let inputs = [u(&[3, 4]), u(&[4, 5]), u(&[5])];
        record("linear", gradient_error(&inputs, seed, |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()));

        let inputs = [u(&[3, 4]), u(&[4, 2])];
        record("matmul", gradient_error(&inputs, seed, |t, v| t.matmul(v[0], v[1]).unwrap()));

        let inputs = [u(&[3, 6]), u(&[6]), u(&[6])];
        record(
            "layer_norm",
            gradient_error(&inputs, seed, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        );

        let inputs = [u(&[3, 5])];
        record("softmax", gradient_error(&inputs, seed, |t, v| t.softmax(v[0], 1).unwrap()));
        record("softmax", gradient_error(&inputs, seed, |t, v| t.softmax(v[0], 0).unwrap()));

        let mut inputs = vec![u(&[4, 8])];
        for _ in 0..4 {
            inputs.push(u(&[8, 8]));
            inputs.push(u(&[8]));
        }
        record(
            "attention",
            gradient_error(&inputs, seed, |t, v| {
                let w = AttentionWeights {
                    q_w: v[1],
                    q_b: v[2],
                    k_w: v[3],
                    k_b: v[4],
                    v_w: v[5],
                    v_b: v[6],
                    o_w: v[7],
                    o_b: v[8],
                };
                multi_head_attention(t, v[0], &w, 2).unwrap().0
            }),
        );

        let inputs = [u(&[4, 3, 3, 3]), u(&[4, 2]), u(&[2]), u(&[2, 4]), u(&[4])];
        record(
            "se_block",
            gradient_error(&inputs, seed, |t, v| {
                let w = SeWeights {
                    fc1_w: v[1],
                    fc1_b: v[2],
                    fc2_w: v[3],
                    fc2_b: v[4],
                };
                se_block(t, v[0], &w).unwrap()
            }),
        );

        let target = u(&[3, 2, 2, 2]);
        let mask: Vec<bool> = (0..8).map(|i| (i + seed as usize) % 3 != 0).collect();
        let inputs = [u(&[3, 2, 2, 2])];
        record(
            "mse_loss",
            gradient_error(&inputs, seed, |t, v| t.mse_loss(v[0], &target, Some(&mask)).unwrap()),
        );
        record(
            "mse_loss",
            gradient_error(&inputs, seed, |t, v| t.mse_loss(v[0], &target, None).unwrap()),
        );
    }
    out
}

/// Sanity check of the oracle itself: an operation with a known gradient.
pub fn oracle_self_check() -> f64 {
    let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    gradient_error(&[x], 0, |t, v| t.mul(v[0], v[0]).unwrap())
}

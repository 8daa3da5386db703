use rand::Rng;
use tabs::data::{generate_phantom, PhantomSpec, Volume};
use tabs::metrics::{
    dice, evaluate_pair, hausdorff, jaccard, mse, pearson, spearman, BinaryMap, Metric, Tissue,
};

use super::{
    brute_dice, brute_evaluate, brute_hausdorff, brute_jaccard, brute_mse, brute_pearson, brute_spearman,
    compare_records, random_bits, random_probs, rng,
};

pub const PAIRS: u64 = 100;
pub const EDGE: usize = 8;
pub const CONTINUOUS_TOL: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= CONTINUOUS_TOL * a.abs().max(b.abs())
}

/// Library metrics against the brute-force versions on random 8³ pairs:
/// raw binary sets and continuous vectors, then whole evaluations.
pub fn oracle_equivalence() -> Result<(), String> {
    let dims = [EDGE; 3];
    let n = EDGE * EDGE * EDGE;
    for seed in 0..PAIRS {
        let mut r = rng(1000 + seed);
        let density = r.random_range(0.02..0.6);
        let (a, b) = (random_bits(n, density, &mut r), random_bits(n, density, &mut r));
        let (ma, mb) = (BinaryMap::new(dims, a.clone()).unwrap(), BinaryMap::new(dims, b.clone()).unwrap());
        if dice(&ma, &mb).ok() != brute_dice(&a, &b) {
            return Err(format!("pair {seed}: dice"));
        }
        if jaccard(&ma, &mb).ok() != brute_jaccard(&a, &b) {
            return Err(format!("pair {seed}: jaccard"));
        }
        if hausdorff(&ma, &mb).ok() != brute_hausdorff(dims, &a, &b) {
            return Err(format!("pair {seed}: hausdorff"));
        }

        let quantized = seed % 2 == 0;
        let x: Vec<f32> = (0..n)
            .map(|_| if quantized { r.random_range(0..5) as f32 / 4.0 } else { r.random() })
            .collect();
        let y: Vec<f32> = (0..n)
            .map(|_| if quantized { r.random_range(0..5) as f32 / 4.0 } else { r.random() })
            .collect();
        let mask = random_bits(n, 0.7, &mut r);
        let checks = [
            ("pearson", pearson(&x, &y, &mask).ok(), brute_pearson(&x, &y, &mask)),
            ("spearman", spearman(&x, &y, &mask).ok(), brute_spearman(&x, &y, &mask)),
            ("mse", mse(&x, &y, &mask).ok(), brute_mse(&x, &y, &mask)),
        ];
        for (name, got, want) in checks {
            match (got, want) {
                (Some(g), Some(w)) if close(g, w) => {}
                (None, None) => {}
                _ => return Err(format!("pair {seed}: {name} {got:?} vs {want:?}")),
            }
        }

        let pred = random_probs(dims, &mut r, quantized, false);
        let reference = random_probs(dims, &mut r, quantized, true);
        let got = evaluate_pair(&pred, &reference).map_err(|e| e.to_string())?;
        compare_records(&got, &brute_evaluate(&pred, &reference), CONTINUOUS_TOL)
            .map_err(|e| format!("pair {seed}: evaluate {e}"))?;
    }
    Ok(())
}

/// Jaccard/DICE relation, perfect self-agreement and insensitivity to
/// anything outside the reference mask.
pub fn identities() -> Result<(), String> {
    let dims = [EDGE; 3];
    let n = EDGE * EDGE * EDGE;
    for seed in 0..PAIRS {
        let mut r = rng(5000 + seed);
        let density = r.random_range(0.05..0.7);
        let a = BinaryMap::new(dims, random_bits(n, density, &mut r)).unwrap();
        let b = BinaryMap::new(dims, random_bits(n, density, &mut r)).unwrap();
        if let (Ok(d), Ok(j)) = (dice(&a, &b), jaccard(&a, &b)) {
            if j > d {
                return Err(format!("pair {seed}: jaccard {j} > dice {d}"));
            }
            if (d - 2.0 * j / (1.0 + j)).abs() > 1e-12 {
                return Err(format!("pair {seed}: dice {d} != 2J/(1+J) with J = {j}"));
            }
        }

        let reference = random_probs(dims, &mut r, false, true);
        let own = evaluate_pair(&reference, &reference).map_err(|e| e.to_string())?;
        if !own.is_perfect() {
            // A tissue that never wins the argmax has undefined overlap and
            // distance; every defined value must still be ideal.
            for t in Tissue::ALL {
                for m in Metric::ALL {
                    if let Some(v) = own.get(t, m) {
                        if v != m.ideal() {
                            return Err(format!("pair {seed}: self {} {} = {v}", t.key(), m.key()));
                        }
                    }
                }
            }
        }

        let pred = random_probs(dims, &mut r, false, false);
        let mut perturbed: Volume = pred.clone();
        let voxels = reference.voxels();
        for i in 0..voxels {
            let inside = (0..3).any(|c| reference.data[c * voxels + i] > 0.0);
            if !inside {
                let w: [f32; 3] = std::array::from_fn(|_| r.random_range(0.01..1.0));
                let s: f32 = w.iter().sum();
                for c in 0..3 {
                    perturbed.data[c * voxels + i] = w[c] / s;
                }
            }
        }
        let before = evaluate_pair(&pred, &reference).map_err(|e| e.to_string())?;
        let after = evaluate_pair(&perturbed, &reference).map_err(|e| e.to_string())?;
        if before != after {
            return Err(format!("pair {seed}: outside-mask perturbation changed the record"));
        }
    }
    for seed in 0..10 {
        let (gt, _) = generate_phantom(&PhantomSpec::sample(16, seed, 0.1 * seed as f64)).unwrap();
        let own = evaluate_pair(&gt, &gt).map_err(|e| e.to_string())?;
        if !own.is_perfect() {
            return Err(format!("phantom {seed}: self-evaluation not perfect: {own:?}"));
        }
    }
    Ok(())
}

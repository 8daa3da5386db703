#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tabs::data::{generate_phantom, render_scan, Metadata, PhantomSpec, Sample, Semantics, SiteParams, Volume};
use tabs::metrics::{Metric, MetricsRecord, Tissue, TissueMetrics};
use tabs::tensor::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// ---- finite differences -------------------------------------------------

pub const FD_STEP: f64 = 1e-4;

/// Gradients whose norms sum below this are compared absolutely (the key
/// bias of attention, for one, has an identically zero gradient).
pub const NORM_FLOOR: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖ + ‖n‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / (norm(analytic) + norm(numeric)).max(NORM_FLOOR)
}

/// Scalar objective `Σ out ⊙ R` for a fixed random `R`, so every output
/// entry contributes a distinct weight.
fn objective<F>(build: &F, inputs: &[Tensor<f64>], weights: &Tensor<f64>, grads: bool) -> (f64, Vec<Vec<f64>>)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grads)).collect();
    let out = build(&mut tape, &vars);
    let r = tape.constant(weights.clone());
    let prod = tape.mul(out, r).expect("projection shape");
    let loss = tape.sum(prod);
    let value = tape.value(loss).item();
    if !grads {
        return (value, Vec::new());
    }
    let g = tape.backward(loss).expect("backward");
    let per = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.get(*v).map_or_else(|| vec![0.0; t.numel()], |x| x.data().to_vec()))
        .collect();
    (value, per)
}

/// Worst relative error between the tape gradient and central differences
/// over all inputs of `build`.
pub fn gradient_error<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let weights = uniform(&shape, &mut rng(seed ^ 0x9e37_79b9));
    let (_, analytic) = objective(&build, inputs, &weights, true);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[i] += FD_STEP;
            let up = objective(&build, &shifted, &weights, false).0;
            shifted[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = objective(&build, &shifted, &weights, false).0;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[k], &numeric));
    }
    worst
}

// ---- brute-force metrics ------------------------------------------------

fn idx(dims: [usize; 3], p: [usize; 3]) -> usize {
    (p[0] * dims[1] + p[1]) * dims[2] + p[2]
}

fn coords(dims: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..dims[0]).flat_map(move |x| (0..dims[1]).flat_map(move |y| (0..dims[2]).map(move |z| [x, y, z])))
}

pub fn brute_dice(a: &[bool], b: &[bool]) -> Option<f64> {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    (total > 0).then(|| 2.0 * inter as f64 / total as f64)
}

pub fn brute_jaccard(a: &[bool], b: &[bool]) -> Option<f64> {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Symmetric Hausdorff distance by exhaustive pairwise search.
pub fn brute_hausdorff(dims: [usize; 3], a: &[bool], b: &[bool]) -> Option<f64> {
    let pa: Vec<[usize; 3]> = coords(dims).filter(|p| a[idx(dims, *p)]).collect();
    let pb: Vec<[usize; 3]> = coords(dims).filter(|p| b[idx(dims, *p)]).collect();
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let d2 = |p: &[usize; 3], q: &[usize; 3]| -> usize {
        (0..3).map(|k| p[k].abs_diff(q[k]).pow(2)).sum()
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .map(|p| to.iter().map(|q| d2(p, q)).min().unwrap())
            .max()
            .unwrap()
    };
    Some((directed(&pa, &pb).max(directed(&pb, &pa)) as f64).sqrt())
}

fn masked(x: &[f32], y: &[f32], mask: &[bool]) -> (Vec<f64>, Vec<f64>) {
    x.iter()
        .zip(y)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((a, b), _)| (*a as f64, *b as f64))
        .unzip()
}

/// Correlation through standardized scores with `n − 1` normalization.
fn zscore_correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n as f64;
        let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        (m, sd)
    };
    let ((mx, sx), (my, sy)) = (stats(x), stats(y));
    if sx == 0.0 || sy == 0.0 {
        return None;
    }
    let s: f64 = x.iter().zip(y).map(|(a, b)| ((a - mx) / sx) * ((b - my) / sy)).sum();
    Some(s / (n - 1) as f64)
}

pub fn brute_pearson(x: &[f32], y: &[f32], mask: &[bool]) -> Option<f64> {
    let (a, b) = masked(x, y, mask);
    zscore_correlation(&a, &b)
}

/// Rank of each value: one plus the number strictly below it, plus half the
/// number of other values equal to it.
pub fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn brute_spearman(x: &[f32], y: &[f32], mask: &[bool]) -> Option<f64> {
    let (a, b) = masked(x, y, mask);
    zscore_correlation(&brute_ranks(&a), &brute_ranks(&b))
}

pub fn brute_mse(x: &[f32], y: &[f32], mask: &[bool]) -> Option<f64> {
    let (a, b) = masked(x, y, mask);
    if a.is_empty() {
        return None;
    }
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    Some(s / a.len() as f64)
}

/// Whole evaluation written out directly: reference mask, first-maximum
/// labels, per-tissue sets restricted to the mask.
pub fn brute_evaluate(pred: &Volume, reference: &Volume) -> MetricsRecord {
    let dims = reference.dims();
    let n = reference.voxels();
    let mask: Vec<bool> = (0..n)
        .map(|i| reference.data[i] + reference.data[n + i] + reference.data[2 * n + i] > 0.0)
        .collect();
    let label = |v: &Volume, i: usize| {
        let p = [v.data[i], v.data[n + i], v.data[2 * n + i]];
        let mut best = 0;
        for c in [1, 2] {
            if p[c] > p[best] {
                best = c;
            }
        }
        best
    };
    let mut tissues = [TissueMetrics::default(); 3];
    for t in Tissue::ALL {
        let c = t.index();
        let sa: Vec<bool> = (0..n).map(|i| mask[i] && label(pred, i) == c).collect();
        let sb: Vec<bool> = (0..n).map(|i| mask[i] && label(reference, i) == c).collect();
        let (xa, xb) = (&pred.data[c * n..(c + 1) * n], &reference.data[c * n..(c + 1) * n]);
        tissues[c] = TissueMetrics {
            dice: brute_dice(&sa, &sb),
            jaccard: brute_jaccard(&sa, &sb),
            hausdorff: brute_hausdorff(dims, &sa, &sb),
            pearson: brute_pearson(xa, xb, &mask),
            spearman: brute_spearman(xa, xb, &mask),
            mse: brute_mse(xa, xb, &mask),
        };
    }
    MetricsRecord {
        tissues,
        mask_voxels: mask.iter().filter(|m| **m).count(),
    }
}

/// Compares two records: set metrics exactly, continuous ones within
/// `rel_tol`. Returns a description of the first mismatch.
pub fn compare_records(got: &MetricsRecord, want: &MetricsRecord, rel_tol: f64) -> Result<(), String> {
    if got.mask_voxels != want.mask_voxels {
        return Err(format!("mask voxels {} vs {}", got.mask_voxels, want.mask_voxels));
    }
    for t in Tissue::ALL {
        for m in Metric::ALL {
            let (g, w) = (got.get(t, m), want.get(t, m));
            let ok = match (g, w) {
                (None, None) => true,
                (Some(a), Some(b)) => match m {
                    Metric::Dice | Metric::Jaccard | Metric::Hausdorff => a == b,
                    _ => a == b || (a - b).abs() <= rel_tol * a.abs().max(b.abs()),
                },
                _ => false,
            };
            if !ok {
                return Err(format!("{} {}: {g:?} vs {w:?}", t.key(), m.key()));
            }
        }
    }
    Ok(())
}

// ---- random and phantom volumes ----------------------------------------

/// Random 3-channel probabilities; voxels outside a random box are all
/// zero when `with_background`. Quantized maps produce ties.
pub fn random_probs(dims: [usize; 3], rng: &mut ChaCha8Rng, quantized: bool, with_background: bool) -> Volume {
    let n = dims.iter().product::<usize>();
    let lo: [usize; 3] = std::array::from_fn(|k| rng.random_range(0..dims[k] / 2));
    let hi: [usize; 3] = std::array::from_fn(|k| rng.random_range(dims[k] / 2 + 1..=dims[k]));
    let mut data = vec![0.0f32; 3 * n];
    for p in coords(dims) {
        let inside = (0..3).all(|k| p[k] >= lo[k] && p[k] < hi[k]);
        if with_background && !inside {
            continue;
        }
        let i = idx(dims, p);
        let mut w: [f64; 3] = std::array::from_fn(|_| {
            if quantized {
                rng.random_range(0..4) as f64 + 0.5
            } else {
                rng.random_range(0.01..1.0)
            }
        });
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        for c in 0..3 {
            data[c * n + i] = w[c] as f32;
        }
    }
    Volume::new(3, dims, Semantics::TissueProbs, Metadata::default(), data).unwrap()
}

pub fn random_bits(n: usize, density: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(density)).collect()
}

pub fn phantom_sample(size: usize, seed: u64, site: &str) -> (Sample, Volume) {
    let (gt, _) = generate_phantom(&PhantomSpec::sample(size, seed, 0.3)).unwrap();
    let scan = render_scan(&gt, &SiteParams::preset(site).unwrap(), seed.wrapping_add(1)).unwrap();
    (Sample::from_volumes("phantom", site, 1, &scan, &gt).unwrap(), gt)
}

pub fn probs_volume(t: &Tensor<f32>) -> Volume {
    Volume::from_tensor(t, Semantics::TissueProbs, Metadata::default()).unwrap()
}

pub fn mean_dice(rec: &MetricsRecord) -> f64 {
    Tissue::ALL
        .iter()
        .map(|&t| rec.get(t, Metric::Dice).unwrap_or(0.0))
        .sum::<f64>()
        / 3.0
}
pub mod gradients;
pub mod metric_checks;

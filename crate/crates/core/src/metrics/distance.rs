//! Exact Euclidean distance transform and Hausdorff distance.

use super::binary::BinaryMap;
use crate::error::{Result, TabsError};

/// Squared distance along one line to the nearest site, given squared
/// distances `f` of the already-processed axes (lower envelope of parabolas).
fn envelope_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pf = p as f64;
                    let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
                    if s <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel centre to the nearest member
/// of `set` (infinite everywhere if the set is empty).
pub fn squared_distance_transform(set: &BinaryMap) -> Vec<f64> {
    let dims = set.dims;
    let mut d: Vec<f64> = set
        .bits
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let len = dims[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for (t, l) in line.iter_mut().enumerate() {
                    *l = d[base + t * strides[axis]];
                }
                envelope_1d(&line, &mut out, &mut v, &mut z);
                for (t, o) in out.iter().enumerate() {
                    d[base + t * strides[axis]] = *o;
                }
            }
        }
    }
    d
}

/// `max_{p∈a} min_{q∈b} |p − q|` in voxel units.
pub fn directed_hausdorff(a: &BinaryMap, b: &BinaryMap) -> Result<f64> {
    if a.dims != b.dims {
        return Err(TabsError::data(format!("binary maps differ in dims: {:?} vs {:?}", a.dims, b.dims)));
    }
    if a.is_empty() || b.is_empty() {
        return Err(TabsError::UndefinedMetric("hausdorff distance with an empty set".into()));
    }
    let dt = squared_distance_transform(b);
    let worst = a
        .bits
        .iter()
        .zip(&dt)
        .filter(|(m, _)| **m)
        .map(|(_, d)| *d)
        .fold(0.0, f64::max);
    Ok(worst.sqrt())
}

/// Symmetric Hausdorff distance between two nonempty voxel sets.
pub fn hausdorff(a: &BinaryMap, b: &BinaryMap) -> Result<f64> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

//! Mask-restricted agreement of continuous probability maps.

use crate::error::{Result, TabsError};

fn masked(x: &[f32], y: &[f32], mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != y.len() || x.len() != mask.len() {
        return Err(TabsError::data(format!(
            "length mismatch: x {}, y {}, mask {}",
            x.len(),
            y.len(),
            mask.len()
        )));
    }
    let (xs, ys) = x
        .iter()
        .zip(y)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((a, b), _)| (*a as f64, *b as f64))
        .unzip::<_, _, Vec<f64>, Vec<f64>>();
    if xs.is_empty() {
        return Err(TabsError::UndefinedMetric("empty mask".into()));
    }
    Ok((xs, ys))
}

fn correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(TabsError::UndefinedMetric("correlation of a constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

pub fn pearson(x: &[f32], y: &[f32], mask: &[bool]) -> Result<f64> {
    let (xs, ys) = masked(x, y, mask)?;
    correlation(&xs, &ys)
}

pub fn spearman(x: &[f32], y: &[f32], mask: &[bool]) -> Result<f64> {
    let (xs, ys) = masked(x, y, mask)?;
    correlation(&average_ranks(&xs), &average_ranks(&ys))
}

pub fn mse(x: &[f32], y: &[f32], mask: &[bool]) -> Result<f64> {
    let (xs, ys) = masked(x, y, mask)?;
    Ok(xs.iter().zip(&ys).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squares_example() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 4.0, 9.0, 16.0];
        let m = [true; 4];
        assert_eq!(spearman(&x, &y, &m).unwrap(), 1.0);
        // 25 / sqrt(5 · 129)
        let r = pearson(&x, &y, &m).unwrap();
        assert!((r - 0.984_374_038_697_697_2).abs() < 1e-12, "{r}");
        let neg: Vec<f32> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson(&x, &neg, &m).unwrap(), -1.0);
        assert_eq!(mse(&x, &x, &m).unwrap(), 0.0);
    }

    #[test]
    fn ties_share_rank() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn constant_is_undefined() {
        let m = [true; 3];
        assert!(matches!(pearson(&[1.0; 3], &[1.0, 2.0, 3.0], &m), Err(TabsError::UndefinedMetric(_))));
        assert!(mse(&[1.0], &[2.0], &[false]).is_err());
    }
}

use crate::data::{Semantics, Volume};
use crate::error::{Result, TabsError};

/// Dense boolean voxel set on a fixed grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub dims: [usize; 3],
    pub bits: Vec<bool>,
}

impl BinaryMap {
    pub fn new(dims: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.iter().product::<usize>() {
            return Err(TabsError::data(format!(
                "binary map of {} voxels does not fit {dims:?}",
                bits.len()
            )));
        }
        Ok(BinaryMap { dims, bits })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        BinaryMap {
            dims,
            bits: vec![false; dims.iter().product()],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    pub fn and(&self, other: &BinaryMap) -> BinaryMap {
        BinaryMap {
            dims: self.dims,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }

    /// Voxel coordinates of set members in row-major order.
    pub fn points(&self) -> Vec<[usize; 3]> {
        let [_, dy, dz] = self.dims;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| [i / (dy * dz), (i / dz) % dy, i % dz])
            .collect()
    }

    pub fn to_volume(&self) -> Volume {
        let mut v = Volume::zeros(1, self.dims, Semantics::Mask);
        for (o, b) in v.data.iter_mut().zip(&self.bits) {
            *o = if *b { 1.0 } else { 0.0 };
        }
        v
    }

    pub fn from_volume(v: &Volume) -> Self {
        BinaryMap {
            dims: v.dims(),
            bits: v.channel(0).iter().map(|&x| x != 0.0).collect(),
        }
    }
}

fn check_probs(v: &Volume, what: &str) -> Result<()> {
    if v.channels() != 3 {
        return Err(TabsError::data(format!(
            "{what} must have 3 tissue channels, got {}",
            v.channels()
        )));
    }
    Ok(())
}

/// Voxels where the reference probabilities sum to more than zero.
pub fn brain_mask(reference: &Volume) -> Result<BinaryMap> {
    check_probs(reference, "reference")?;
    let n = reference.voxels();
    let bits: Vec<bool> = (0..n)
        .map(|i| (0..3).map(|c| reference.data[c * n + i]).sum::<f32>() > 0.0)
        .collect();
    let mask = BinaryMap {
        dims: reference.dims(),
        bits,
    };
    if mask.is_empty() {
        return Err(TabsError::UndefinedMetric("brain mask is empty".into()));
    }
    Ok(mask)
}

/// Per-voxel tissue label (0 = GM, 1 = WM, 2 = CSF); ties go to the lower index.
pub fn argmax_map(prob: &Volume) -> Result<Volume> {
    check_probs(prob, "probability map")?;
    let n = prob.voxels();
    let mut out = Volume::zeros(1, prob.dims(), Semantics::Labels);
    out.header.meta = prob.meta().clone();
    for i in 0..n {
        let mut best = 0;
        for c in 1..3 {
            if prob.data[c * n + i] > prob.data[best * n + i] {
                best = c;
            }
        }
        out.data[i] = best as f32;
    }
    Ok(out)
}

/// One-hot maps of a label volume; together they partition the grid.
pub fn binary_maps(labels: &Volume) -> Result<[BinaryMap; 3]> {
    if labels.channels() != 1 {
        return Err(TabsError::data("label volume must have one channel"));
    }
    if let Some(bad) = labels.data.iter().find(|&&l| !matches!(l, 0.0 | 1.0 | 2.0)) {
        return Err(TabsError::data(format!("invalid tissue label {bad}")));
    }
    Ok(std::array::from_fn(|t| BinaryMap {
        dims: labels.dims(),
        bits: labels.data.iter().map(|&l| l == t as f32).collect(),
    }))
}

fn overlap(a: &BinaryMap, b: &BinaryMap) -> Result<(usize, usize, usize)> {
    if a.dims != b.dims {
        return Err(TabsError::data(format!("binary maps differ in dims: {:?} vs {:?}", a.dims, b.dims)));
    }
    let mut both = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    Ok((both, na, nb))
}

pub fn dice(a: &BinaryMap, b: &BinaryMap) -> Result<f64> {
    let (both, na, nb) = overlap(a, b)?;
    if na + nb == 0 {
        return Err(TabsError::UndefinedMetric("dice of two empty sets".into()));
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

pub fn jaccard(a: &BinaryMap, b: &BinaryMap) -> Result<f64> {
    let (both, na, nb) = overlap(a, b)?;
    let union = na + nb - both;
    if union == 0 {
        return Err(TabsError::UndefinedMetric("jaccard of two empty sets".into()));
    }
    Ok(both as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Metadata;

    #[test]
    fn argmax_ties_go_low() {
        let v = Volume::new(3, [1, 1, 2], Semantics::TissueProbs, Metadata::new(), vec![0.2, 0.4, 0.5, 0.4, 0.3, 0.2]).unwrap();
        assert_eq!(argmax_map(&v).unwrap().data, vec![1.0, 0.0]);
    }

    #[test]
    fn single_voxel_mask() {
        let mut v = Volume::zeros(3, [2, 2, 2], Semantics::TissueProbs);
        v.data[3] = 0.2;
        v.data[8 + 3] = 0.3;
        v.data[16 + 3] = 0.5;
        assert_eq!(brain_mask(&v).unwrap().points(), vec![[0, 1, 1]]);
        assert!(matches!(
            brain_mask(&Volume::zeros(3, [2, 2, 2], Semantics::TissueProbs)),
            Err(TabsError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn overlap_scores() {
        let a = BinaryMap::new([1, 1, 3], vec![true, true, false]).unwrap();
        let b = BinaryMap::new([1, 1, 3], vec![false, true, true]).unwrap();
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(jaccard(&a, &b).unwrap(), 1.0 / 3.0);
        let e = BinaryMap::empty([1, 1, 3]);
        assert!(dice(&e, &e).is_err() && jaccard(&e, &e).is_err());
        assert_eq!(dice(&a, &e).unwrap(), 0.0);
    }
}

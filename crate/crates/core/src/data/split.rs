use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TabsError};

pub const STRATA: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = TabsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(TabsError::data(format!("unknown split `{other}`"))),
        }
    }
}

/// Subject indices of each part.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn part(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn part_mut(&mut self, s: Split) -> &mut Vec<usize> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// Split label of every subject.
    pub fn labels(&self, n: usize) -> Vec<Split> {
        let mut out = vec![Split::Train; n];
        for s in Split::ALL {
            for &i in self.part(s) {
                out[i] = s;
            }
        }
        out
    }
}

/// Largest-remainder apportionment of `total` into parts proportional to
/// `weights`. Ties go to the earlier part.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let wsum: usize = weights.iter().sum();
    if wsum == 0 {
        return vec![0; weights.len()];
    }
    let mut counts: Vec<usize> = weights.iter().map(|w| total * w / wsum).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(total * weights[i] % wsum));
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Stratified split: subjects are binned into quintiles of `covariate`, each
/// bin is divided in `ratios`, and the per-bin counts are rounded jointly so
/// the totals match the global apportionment of `n`.
pub fn split_dataset(covariate: &[f64], ratios: [usize; 3], seed: u64) -> Result<SplitIndices> {
    if ratios.iter().sum::<usize>() == 0 {
        return Err(TabsError::config("split ratios must not all be zero"));
    }
    if covariate.iter().any(|a| !a.is_finite()) {
        return Err(TabsError::data("split covariate contains a non-finite value"));
    }
    let n = covariate.len();
    let totals = apportion(n, &ratios);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| covariate[a].total_cmp(&covariate[b]).then(a.cmp(&b)));
    let bins: Vec<Vec<usize>> = (0..STRATA)
        .map(|b| order[b * n / STRATA..(b + 1) * n / STRATA].to_vec())
        .collect();

    let wsum: usize = ratios.iter().sum();
    let mut table: Vec<[usize; 3]> = bins
        .iter()
        .map(|bin| std::array::from_fn(|j| bin.len() * ratios[j] / wsum))
        .collect();
    let mut row_short: Vec<usize> = bins
        .iter()
        .zip(&table)
        .map(|(bin, row)| bin.len() - row.iter().sum::<usize>())
        .collect();
    let mut col_short: [usize; 3] =
        std::array::from_fn(|j| totals[j] - table.iter().map(|r| r[j]).sum::<usize>());

    // Hand out the remaining units one per cell, bins with the largest
    // shortfall first, each to the part that is furthest behind.
    let mut rows: Vec<usize> = (0..STRATA).collect();
    rows.sort_by_key(|&b| std::cmp::Reverse(row_short[b]));
    for b in rows {
        while row_short[b] > 0 {
            let j = (0..3)
                .filter(|&j| col_short[j] > 0 && table[b][j] == bins[b].len() * ratios[j] / wsum)
                .max_by_key(|&j| (col_short[j], bins[b].len() * ratios[j] % wsum, std::cmp::Reverse(j)))
                .ok_or_else(|| TabsError::data("stratified split could not balance part sizes"))?;
            table[b][j] += 1;
            row_short[b] -= 1;
            col_short[j] -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitIndices::default();
    for (bin, counts) in bins.iter().zip(&table) {
        let mut members = bin.clone();
        members.shuffle(&mut rng);
        let mut rest = members.as_slice();
        for (s, &k) in Split::ALL.iter().zip(counts) {
            let (take, tail) = rest.split_at(k);
            out.part_mut(*s).extend_from_slice(take);
            rest = tail;
        }
    }
    for s in Split::ALL {
        out.part_mut(s).sort_unstable();
    }
    Ok(out)
}

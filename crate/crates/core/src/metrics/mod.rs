//! Per-tissue agreement between probability maps, restricted to the brain.

mod binary;
mod continuous;
mod distance;

pub use binary::{argmax_map, binary_maps, brain_mask, dice, jaccard, BinaryMap};
pub use continuous::{average_ranks, mse, pearson, spearman};
pub use distance::{directed_hausdorff, hausdorff, squared_distance_transform};

use crate::data::Volume;
use crate::error::{Result, TabsError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tissue {
    Gm,
    Wm,
    Csf,
}

impl Tissue {
    pub const ALL: [Tissue; 3] = [Tissue::Gm, Tissue::Wm, Tissue::Csf];

    pub fn key(self) -> &'static str {
        match self {
            Tissue::Gm => "GM",
            Tissue::Wm => "WM",
            Tissue::Csf => "CSF",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Tissue::Gm => "Gray Matter",
            Tissue::Wm => "White Matter",
            Tissue::Csf => "CSF",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Dice,
    Jaccard,
    Pearson,
    Spearman,
    Hausdorff,
    Mse,
}

impl Metric {
    /// Row order of the report tables.
    pub const ALL: [Metric; 6] = [
        Metric::Dice,
        Metric::Jaccard,
        Metric::Pearson,
        Metric::Spearman,
        Metric::Hausdorff,
        Metric::Mse,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Jaccard => "jaccard",
            Metric::Pearson => "pearson",
            Metric::Spearman => "spearman",
            Metric::Hausdorff => "hausdorff",
            Metric::Mse => "mse",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Metric::Dice => "DICE",
            Metric::Jaccard => "Jaccard Index",
            Metric::Pearson => "Pearson",
            Metric::Spearman => "Spearman",
            Metric::Hausdorff => "HD",
            Metric::Mse => "MSE",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Hausdorff | Metric::Mse)
    }

    /// Value of a perfect agreement.
    pub fn ideal(self) -> f64 {
        if self.higher_is_better() {
            1.0
        } else {
            0.0
        }
    }
}

/// Six scores for one tissue; `None` marks an undefined metric.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TissueMetrics {
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub hausdorff: Option<f64>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub mse: Option<f64>,
}

impl TissueMetrics {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Dice => self.dice,
            Metric::Jaccard => self.jaccard,
            Metric::Hausdorff => self.hausdorff,
            Metric::Pearson => self.pearson,
            Metric::Spearman => self.spearman,
            Metric::Mse => self.mse,
        }
    }

    pub fn set(&mut self, m: Metric, v: Option<f64>) {
        *match m {
            Metric::Dice => &mut self.dice,
            Metric::Jaccard => &mut self.jaccard,
            Metric::Hausdorff => &mut self.hausdorff,
            Metric::Pearson => &mut self.pearson,
            Metric::Spearman => &mut self.spearman,
            Metric::Mse => &mut self.mse,
        } = v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub tissues: [TissueMetrics; 3],
    pub mask_voxels: usize,
}

pub const CSV_COLUMNS: [&str; 8] = [
    "tissue",
    "dice",
    "jaccard",
    "hausdorff",
    "pearson",
    "spearman",
    "mse",
    "mask_voxels",
];

/// Shortest round-trip decimal; empty for a missing value.
pub fn format_value(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn parse_value(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| TabsError::data(format!("invalid metric value `{s}`")))
}

impl MetricsRecord {
    pub fn tissue(&self, t: Tissue) -> &TissueMetrics {
        &self.tissues[t.index()]
    }

    pub fn get(&self, t: Tissue, m: Metric) -> Option<f64> {
        self.tissue(t).get(m)
    }

    /// Every metric of every tissue is defined and at its ideal value.
    pub fn is_perfect(&self) -> bool {
        Tissue::ALL
            .iter()
            .all(|&t| Metric::ALL.iter().all(|&m| self.get(t, m) == Some(m.ideal())))
    }

    /// Rows in [`CSV_COLUMNS`] order, one per tissue.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        Tissue::ALL
            .iter()
            .map(|&t| {
                let m = self.tissue(t);
                vec![
                    t.key().to_string(),
                    format_value(m.dice),
                    format_value(m.jaccard),
                    format_value(m.hausdorff),
                    format_value(m.pearson),
                    format_value(m.spearman),
                    format_value(m.mse),
                    self.mask_voxels.to_string(),
                ]
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        for row in self.csv_rows() {
            w.write_record(&row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| TabsError::data(format!("csv encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(TabsError::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Compares two probability maps inside `mask`: correlations and MSE on the
/// probabilities, overlap and Hausdorff distance on masked argmax maps.
pub fn evaluate_with_mask(a: &Volume, b: &Volume, mask: &BinaryMap) -> Result<MetricsRecord> {
    if a.channels() != 3 || b.channels() != 3 || a.dims() != b.dims() || mask.dims != a.dims() {
        return Err(TabsError::data(format!(
            "cannot compare {}×{:?} with {}×{:?} under a {:?} mask",
            a.channels(),
            a.dims(),
            b.channels(),
            b.dims(),
            mask.dims
        )));
    }
    if mask.is_empty() {
        return Err(TabsError::UndefinedMetric("brain mask is empty".into()));
    }
    let maps_a = binary_maps(&argmax_map(a)?)?;
    let maps_b = binary_maps(&argmax_map(b)?)?;
    let mut tissues = [TissueMetrics::default(); 3];
    for t in Tissue::ALL {
        let i = t.index();
        let (xa, xb) = (a.channel(i), b.channel(i));
        let (sa, sb) = (maps_a[i].and(mask), maps_b[i].and(mask));
        tissues[i] = TissueMetrics {
            dice: defined(dice(&sa, &sb))?,
            jaccard: defined(jaccard(&sa, &sb))?,
            hausdorff: defined(hausdorff(&sa, &sb))?,
            pearson: defined(pearson(xa, xb, &mask.bits))?,
            spearman: defined(spearman(xa, xb, &mask.bits))?,
            mse: defined(mse(xa, xb, &mask.bits))?,
        };
    }
    Ok(MetricsRecord {
        tissues,
        mask_voxels: mask.count(),
    })
}

/// Prediction against reference, inside the reference brain mask.
pub fn evaluate_pair(pred: &Volume, reference: &Volume) -> Result<MetricsRecord> {
    let mask = brain_mask(reference)?;
    evaluate_with_mask(pred, reference, &mask)
}

/// Agreement of two segmentations of repeated scans under a shared mask.
pub fn reliability_pair(t1: &Volume, t2: &Volume, mask: &BinaryMap) -> Result<MetricsRecord> {
    evaluate_with_mask(t1, t2, mask)
}

//! Phantom dataset directories: volumes plus a `manifest.csv` index.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::phantom::{generate_phantom, render_scan, PhantomSpec, SiteParams};
use super::preprocess::normalize_intensity;
use super::split::{split_dataset, Split};
use super::volume::Volume;
use crate::error::{Result, TabsError};
use crate::fsio;
use crate::model::named_rng;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.csv";

/// One scan of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject: String,
    pub site: String,
    pub atrophy: f64,
    pub timepoint: u32,
    pub split: String,
    /// Paths relative to the dataset directory.
    pub gt: String,
    pub scan: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let bytes = fsio::read_file(&path)?;
        let mut reader = csv::Reader::from_reader(bytes.as_slice());
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()
            .map_err(|e| TabsError::data(format!("{}: {e}", path.display())))?;
        for r in &rows {
            r.split.parse::<Split>()?;
        }
        Ok(Manifest {
            dir: dir.to_path_buf(),
            rows,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| TabsError::data(format!("manifest encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write(&self) -> Result<()> {
        fsio::write_atomic_str(&self.dir.join(MANIFEST), &self.to_csv()?)
    }

    pub fn rows_in(&self, split: Option<Split>) -> Vec<&ManifestRow> {
        self.rows
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s.name()))
            .collect()
    }

    pub fn subjects(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.subject.as_str()) {
                out.push(&r.subject);
            }
        }
        out
    }
}

/// A dataset directory, optionally restricted to one split. Written as
/// `DIR` or `DIR:SPLIT`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetRef {
    pub dir: PathBuf,
    pub split: Option<Split>,
}

impl DatasetRef {
    pub fn new(dir: impl Into<PathBuf>, split: Option<Split>) -> Self {
        DatasetRef {
            dir: dir.into(),
            split,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if let Some((dir, split)) = s.rsplit_once(':') {
            if let Ok(split) = split.parse::<Split>() {
                return Ok(DatasetRef::new(dir, Some(split)));
            }
        }
        if s.is_empty() {
            return Err(TabsError::config("empty dataset path"));
        }
        Ok(DatasetRef::new(s, None))
    }

    /// Scans of the selected split at `timepoint` (all timepoints if `None`).
    pub fn rows(&self, timepoint: Option<u32>) -> Result<(Manifest, Vec<ManifestRow>)> {
        let m = Manifest::read(&self.dir)?;
        let rows = m
            .rows_in(self.split)
            .into_iter()
            .filter(|r| timepoint.is_none_or(|t| r.timepoint == t))
            .cloned()
            .collect();
        Ok((m, rows))
    }

    pub fn load(&self, timepoint: Option<u32>) -> Result<Vec<Sample>> {
        let (_, rows) = self.rows(timepoint)?;
        rows.iter().map(|r| Sample::load(&self.dir, r)).collect()
    }
}

impl std::fmt::Display for DatasetRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.dir.display())?;
        if let Some(s) = self.split {
            write!(f, ":{s}")?;
        }
        Ok(())
    }
}

/// Network-ready input, ground truth and brain mask of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject: String,
    pub site: String,
    pub timepoint: u32,
    /// Normalized scan `[1, N, N, N]`.
    pub input: Tensor<f32>,
    /// Tissue probabilities `[3, N, N, N]`.
    pub gt: Tensor<f32>,
    /// Voxels where the ground truth is nonzero.
    pub mask: Vec<bool>,
}

impl Sample {
    pub fn from_volumes(subject: &str, site: &str, timepoint: u32, scan: &Volume, gt: &Volume) -> Result<Self> {
        if scan.dims() != gt.dims() || scan.channels() != 1 || gt.channels() != 3 {
            return Err(TabsError::data(format!(
                "{subject}: scan {}×{:?} and ground truth {}×{:?} do not pair",
                scan.channels(),
                scan.dims(),
                gt.channels(),
                gt.dims()
            )));
        }
        let input = normalize_intensity(scan)?.to_tensor();
        let n = gt.voxels();
        let mask = (0..n)
            .map(|i| (0..3).any(|c| gt.data[c * n + i] != 0.0))
            .collect();
        Ok(Sample {
            subject: subject.to_string(),
            site: site.to_string(),
            timepoint,
            input,
            gt: gt.to_tensor(),
            mask,
        })
    }

    pub fn load(dir: &Path, row: &ManifestRow) -> Result<Self> {
        let scan = Volume::load(&dir.join(&row.scan))?;
        let gt = Volume::load(&dir.join(&row.gt))?;
        Self::from_volumes(&row.subject, &row.site, row.timepoint, &scan, &gt)
    }
}

#[derive(Clone, Debug)]
pub struct PhantomOptions {
    pub count: usize,
    pub size: usize,
    pub site: SiteParams,
    /// Overrides the site's atrophy range.
    pub atrophy_range: Option<(f64, f64)>,
    pub retest: bool,
    pub seed: u64,
}

impl PhantomOptions {
    pub fn desk(site: &str, count: usize, seed: u64) -> Result<Self> {
        Ok(PhantomOptions {
            count,
            size: 32,
            site: SiteParams::preset(site)?,
            atrophy_range: None,
            retest: false,
            seed,
        })
    }
}

/// Generates `count` subjects, writes their volumes under `out`, assigns a
/// stratified 3:1:1 split and writes the manifest last.
pub fn generate_dataset(opts: &PhantomOptions, out: &Path) -> Result<Manifest> {
    if opts.count == 0 {
        return Err(TabsError::config("phantom count must be positive"));
    }
    opts.site.validate()?;
    let (lo, hi) = opts.atrophy_range.unwrap_or(opts.site.atrophy_range);
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(TabsError::config(format!("atrophy range {lo}..{hi} is not inside [0, 1]")));
    }
    let site = &opts.site.id;
    let timepoints: u32 = if opts.retest { 2 } else { 1 };
    let mut subjects = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let mut rng = named_rng(opts.seed, &format!("{site}.subject{i}"));
        let geometry_seed = rng.next_u64();
        let atrophy = lo + (hi - lo) * rng.random::<f64>();
        let noise_seeds: Vec<u64> = (0..timepoints).map(|_| rng.next_u64()).collect();
        subjects.push((format!("{site}-{i:03}"), geometry_seed, atrophy, noise_seeds));
    }
    let atrophies: Vec<f64> = subjects.iter().map(|s| s.2).collect();
    let labels = split_dataset(&atrophies, [3, 1, 1], opts.seed)?.labels(opts.count);

    let mut rows = Vec::new();
    for ((id, geometry_seed, atrophy, noise_seeds), split) in subjects.iter().zip(labels) {
        let spec = PhantomSpec::sample(opts.size, *geometry_seed, *atrophy);
        let (mut gt, _) = generate_phantom(&spec)?;
        gt.header.meta.set("site", site);
        gt.header.meta.set("subject", id);
        let gt_name = format!("gt_{id}.tvol");
        gt.save(&out.join(&gt_name))?;
        for (t, &noise_seed) in noise_seeds.iter().enumerate() {
            let timepoint = t as u32 + 1;
            let mut scan = render_scan(&gt, &opts.site, noise_seed)?;
            scan.header.meta.set("timepoint", timepoint);
            let scan_name = format!("scan_{id}_t{timepoint}.tvol");
            scan.save(&out.join(&scan_name))?;
            rows.push(ManifestRow {
                subject: id.clone(),
                site: site.clone(),
                atrophy: (atrophy * 1e6).round() / 1e6,
                timepoint,
                split: split.name().to_string(),
                gt: gt_name.clone(),
                scan: scan_name,
            });
        }
    }
    let manifest = Manifest {
        dir: out.to_path_buf(),
        rows,
    };
    manifest.write()?;
    Ok(manifest)
}

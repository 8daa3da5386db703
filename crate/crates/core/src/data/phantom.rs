//! Synthetic nested-ellipsoid head phantoms and per-site scan rendering.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::volume::{Metadata, Semantics, Volume};
use crate::error::{Result, TabsError};
use crate::model::named_rng;

/// Semi-axes of the reference anatomy as fractions of the grid edge.
const HEAD: [f64; 3] = [0.42, 0.44, 0.40];
const GM_SHELL: [f64; 3] = [0.36, 0.38, 0.34];
const WM_CORE: [f64; 3] = [0.26, 0.28, 0.24];
const VENTRICLES: [f64; 3] = [0.07, 0.10, 0.06];
const AXIS_JITTER: f64 = 0.04;
const CENTER_JITTER: f64 = 0.02;
/// Relative GM-shell shrink and ventricle growth at full atrophy.
const GM_THINNING: f64 = 0.10;
const VENTRICLE_GROWTH: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    pub geometry_seed: u64,
    pub atrophy: f64,
    /// Semi-axes in voxels.
    pub head: [f64; 3],
    pub gm: [f64; 3],
    pub wm: [f64; 3],
    pub ventricles: [f64; 3],
    /// Offset of the common centre from the grid centre, in voxels.
    pub offset: [f64; 3],
    /// Boundary width in voxels (standard deviation of the logistic edge).
    pub softness: f64,
}

impl PhantomSpec {
    /// Reference anatomy with seed-driven size and position jitter, then
    /// atrophy applied to the GM shell and ventricles.
    pub fn sample(size: usize, geometry_seed: u64, atrophy: f64) -> Self {
        let mut rng = named_rng(geometry_seed, "phantom.geometry");
        let n = size as f64;
        let mut scale = [0.0; 3];
        let mut offset = [0.0; 3];
        for a in 0..3 {
            scale[a] = n * (1.0 + rng.random_range(-AXIS_JITTER..AXIS_JITTER));
            offset[a] = n * rng.random_range(-CENTER_JITTER..CENTER_JITTER);
        }
        let axes = |frac: [f64; 3], k: f64| std::array::from_fn(|a| frac[a] * scale[a] * k);
        PhantomSpec {
            size,
            geometry_seed,
            atrophy,
            head: axes(HEAD, 1.0),
            gm: axes(GM_SHELL, 1.0 - GM_THINNING * atrophy),
            wm: axes(WM_CORE, 1.0),
            ventricles: axes(VENTRICLES, 1.0 + VENTRICLE_GROWTH * atrophy),
            offset,
            softness: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 16 != 0 {
            return Err(TabsError::config(format!(
                "phantom size {} is not a positive multiple of 16",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.atrophy) {
            return Err(TabsError::config(format!("atrophy {} outside [0, 1]", self.atrophy)));
        }
        if !(self.softness > 0.0) {
            return Err(TabsError::config("phantom softness must be positive"));
        }
        let layers = [
            ("ventricles", self.ventricles),
            ("wm", self.wm),
            ("gm", self.gm),
            ("head", self.head),
        ];
        for w in layers.windows(2) {
            let ((inner, a), (outer, b)) = (w[0], w[1]);
            if (0..3).any(|i| !(a[i] > 0.0 && a[i] < b[i])) {
                return Err(TabsError::config(format!(
                    "phantom geometry not nested: {inner} {a:?} must lie inside {outer} {b:?}"
                )));
            }
        }
        let half = self.size as f64 / 2.0;
        if (0..3).any(|i| self.head[i] + self.offset[i].abs() > half) {
            return Err(TabsError::config("phantom head does not fit in the grid"));
        }
        Ok(())
    }
}

/// Approximate signed distance to an axis-aligned ellipsoid (negative inside).
fn ellipsoid_sdf(p: [f64; 3], r: [f64; 3]) -> f64 {
    let k0 = (0..3).map(|i| (p[i] / r[i]).powi(2)).sum::<f64>().sqrt();
    let k1 = (0..3).map(|i| (p[i] / (r[i] * r[i])).powi(2)).sum::<f64>().sqrt();
    if k1 == 0.0 {
        -r.iter().cloned().fold(f64::INFINITY, f64::min)
    } else {
        k0 * (k0 - 1.0) / k1
    }
}

fn inside_probability(d: f64, slope: f64) -> f64 {
    1.0 / (1.0 + (d / slope).exp())
}

/// Ground-truth tissue probabilities `[GM, WM, CSF]` and the hard head mask.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, Volume)> {
    spec.validate()?;
    let n = spec.size;
    let nv = n * n * n;
    let slope = spec.softness * 3f64.sqrt() / PI;
    let center: [f64; 3] = std::array::from_fn(|a| n as f64 / 2.0 + spec.offset[a]);
    let mut probs = vec![0f32; 3 * nv];
    let mut mask = vec![0f32; nv];
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let idx = (x * n + y) * n + z;
                let p = [
                    x as f64 + 0.5 - center[0],
                    y as f64 + 0.5 - center[1],
                    z as f64 + 0.5 - center[2],
                ];
                if ellipsoid_sdf(p, spec.head) > 0.0 {
                    continue;
                }
                mask[idx] = 1.0;
                let g = inside_probability(ellipsoid_sdf(p, spec.gm), slope);
                let w = inside_probability(ellipsoid_sdf(p, spec.wm), slope);
                let v = inside_probability(ellipsoid_sdf(p, spec.ventricles), slope);
                let wm = g * w * (1.0 - v);
                let gm = g * (1.0 - w);
                let csf = 1.0 - gm - wm;
                probs[idx] = gm as f32;
                probs[nv + idx] = wm as f32;
                probs[2 * nv + idx] = csf as f32;
            }
        }
    }
    let meta = Metadata::new()
        .with("provenance", "phantom")
        .with("geometry_seed", spec.geometry_seed)
        .with("atrophy", format!("{:.6}", spec.atrophy));
    let gt = Volume::new(3, [n; 3], Semantics::TissueProbs, meta.clone(), probs)?;
    let head = Volume::new(1, [n; 3], Semantics::Mask, meta, mask)?;
    Ok((gt, head))
}

/// Acquisition characteristics of one emulated site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteParams {
    pub id: String,
    /// Mean intensity of GM, WM and CSF.
    pub means: [f64; 3],
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    /// Wavelength of the bias field as a multiple of the field of view.
    pub bias_scale: f64,
    pub gain: f64,
    /// Range subjects' atrophy values are drawn from.
    pub atrophy_range: (f64, f64),
}

impl SiteParams {
    pub const PRESETS: [&'static str; 4] = ["siteA", "siteB", "siteC", "siteD"];

    pub fn preset(name: &str) -> Result<Self> {
        let site = |means, noise_sigma, bias_amplitude, bias_scale, gain, atrophy_range| SiteParams {
            id: name.to_string(),
            means,
            noise_sigma,
            bias_amplitude,
            bias_scale,
            gain,
            atrophy_range,
        };
        match name {
            "siteA" => Ok(site([0.55, 0.80, 0.20], 0.02, 0.10, 1.5, 1.0, (0.0, 0.6))),
            "siteB" => Ok(site([0.50, 0.85, 0.15], 0.03, 0.15, 1.2, 1.25, (0.0, 0.6))),
            "siteC" => Ok(site([0.60, 0.75, 0.28], 0.04, 0.05, 2.0, 0.8, (0.0, 0.6))),
            "siteD" => Ok(site([0.52, 0.78, 0.22], 0.03, 0.12, 1.6, 1.1, (0.4, 1.0))),
            other => Err(TabsError::config(format!(
                "unknown site `{other}` (expected one of {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [g, w, c] = self.means;
        if g == w || g == c || w == c {
            return Err(TabsError::config(format!("site {}: tissue means must differ", self.id)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.bias_amplitude >= 0.0) || self.bias_amplitude >= 1.0 {
            return Err(TabsError::config(format!(
                "site {}: need noise >= 0 and 0 <= bias amplitude < 1",
                self.id
            )));
        }
        if !(self.bias_scale > 0.0) || !(self.gain > 0.0) {
            return Err(TabsError::config(format!(
                "site {}: bias scale and gain must be positive",
                self.id
            )));
        }
        let (lo, hi) = self.atrophy_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(TabsError::config(format!("site {}: bad atrophy range", self.id)));
        }
        Ok(())
    }

    /// Smooth multiplicative field in `[1 - β, 1 + β]`, fixed per site.
    pub fn bias_field(&self, dims: [usize; 3]) -> Vec<f64> {
        let mut rng = named_rng(0, &format!("site.bias.{}", self.id));
        let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        let terms: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                (0..dims[a])
                    .map(|i| {
                        let u = (i as f64 + 0.5) / dims[a] as f64;
                        (2.0 * PI * u / self.bias_scale + phase[a]).sin()
                    })
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let mix = (terms[0][x] + terms[1][y] + terms[2][z]) / 3.0;
                    out.push(1.0 + self.bias_amplitude * mix);
                }
            }
        }
        out
    }
}

impl FromStr for SiteParams {
    type Err = TabsError;
    fn from_str(s: &str) -> Result<Self> {
        SiteParams::preset(s)
    }
}

/// T1-like scan: `gain · bias · Σ_t p_t · mean_t`, plus Gaussian noise inside
/// the head.
pub fn render_scan(gt: &Volume, site: &SiteParams, noise_seed: u64) -> Result<Volume> {
    site.validate()?;
    if gt.channels() != 3 {
        return Err(TabsError::data(format!(
            "render_scan needs 3 tissue channels, got {}",
            gt.channels()
        )));
    }
    let nv = gt.voxels();
    let bias = site.bias_field(gt.dims());
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, site.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut data = vec![0f32; nv];
    for (i, out) in data.iter_mut().enumerate() {
        let p = [gt.data[i], gt.data[nv + i], gt.data[2 * nv + i]];
        if p.iter().all(|&v| v == 0.0) {
            continue;
        }
        let tissue: f64 = (0..3).map(|t| p[t] as f64 * site.means[t]).sum();
        let mut v = site.gain * bias[i] * tissue;
        if site.noise_sigma > 0.0 {
            v += noise.sample(&mut rng);
        }
        *out = v as f32;
    }
    let mut meta = gt.meta().clone();
    meta.set("provenance", "render_scan");
    meta.set("site", &site.id);
    meta.set("noise_seed", noise_seed);
    Volume::new(1, gt.dims(), Semantics::RawT1, meta, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_argmax(gt: &Volume, class: usize) -> usize {
        let n = gt.voxels();
        (0..n)
            .filter(|&i| {
                let p = [gt.data[i], gt.data[n + i], gt.data[2 * n + i]];
                p.iter().any(|&v| v > 0.0)
                    && (0..3).all(|c| c == class || p[class] > p[c])
            })
            .count()
    }

    #[test]
    fn probabilities_sum_to_one_inside_head() {
        let (gt, head) = generate_phantom(&PhantomSpec::sample(32, 3, 0.4)).unwrap();
        let n = gt.voxels();
        for i in 0..n {
            let s: f32 = (0..3).map(|c| gt.data[c * n + i]).sum();
            if head.data[i] == 1.0 {
                assert!((s - 1.0).abs() <= 1e-4, "voxel {i}: {s}");
            } else {
                assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn atrophy_grows_csf_and_shrinks_gm() {
        let (young, _) = generate_phantom(&PhantomSpec::sample(32, 9, 0.0)).unwrap();
        let (old, _) = generate_phantom(&PhantomSpec::sample(32, 9, 1.0)).unwrap();
        assert!(count_argmax(&old, 2) > count_argmax(&young, 2));
        let total = |v: &Volume, c: usize| v.channel(c).iter().map(|&x| x as f64).sum::<f64>();
        assert!(total(&old, 0) < total(&young, 0));
        assert!(total(&old, 2) > total(&young, 2));
    }

    #[test]
    fn deep_white_matter_is_pure() {
        let spec = PhantomSpec::sample(64, 1, 0.0);
        let (gt, _) = generate_phantom(&spec).unwrap();
        let c = 32.0 + spec.offset[0];
        // midway between the ventricle wall and the WM boundary along x
        let x = (c + (spec.ventricles[0] + spec.wm[0]) / 2.0).floor() as usize;
        let yc = (32.0 + spec.offset[1]).floor() as usize;
        let zc = (32.0 + spec.offset[2]).floor() as usize;
        let i = gt.index(x, yc, zc);
        let n = gt.voxels();
        assert!(gt.data[i] < 1e-3);
        assert!((gt.data[n + i] - 1.0).abs() < 1e-3);
        assert!(gt.data[2 * n + i] < 1e-3);
    }

    #[test]
    fn broken_nesting_is_rejected() {
        let mut spec = PhantomSpec::sample(32, 0, 0.0);
        spec.wm[1] = spec.gm[1] + 1.0;
        assert!(spec.validate().unwrap_err().to_string().contains("nested"));
    }

    #[test]
    fn noiseless_flat_scan_is_weighted_means() {
        let (gt, _) = generate_phantom(&PhantomSpec::sample(16, 2, 0.2)).unwrap();
        let mut site = SiteParams::preset("siteA").unwrap();
        site.noise_sigma = 0.0;
        site.bias_amplitude = 0.0;
        site.gain = 1.0;
        let scan = render_scan(&gt, &site, 5).unwrap();
        let n = gt.voxels();
        for i in 0..n {
            let want: f64 = (0..3).map(|t| gt.data[t * n + i] as f64 * site.means[t]).sum();
            assert_eq!(scan.data[i], want as f32);
        }
        let mut doubled = site.clone();
        doubled.gain = 2.0;
        let scan2 = render_scan(&gt, &doubled, 5).unwrap();
        assert!(scan.data.iter().zip(&scan2.data).all(|(a, b)| *b == 2.0 * a));
    }

    #[test]
    fn retest_scans_differ_only_by_noise() {
        let (gt, _) = generate_phantom(&PhantomSpec::sample(16, 2, 0.2)).unwrap();
        let site = SiteParams::preset("siteB").unwrap();
        let a = render_scan(&gt, &site, 1).unwrap();
        let b = render_scan(&gt, &site, 2).unwrap();
        assert_ne!(a.data, b.data);
        assert_eq!(render_scan(&gt, &site, 1).unwrap(), a);
    }
}

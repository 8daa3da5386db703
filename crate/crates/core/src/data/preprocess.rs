use super::volume::{Metadata, Semantics, Volume};
use crate::error::{Result, TabsError};

/// Dataset occupancy: voxels whose maximum absolute intensity over all
/// `volumes` (and all their channels) exceeds `threshold`.
pub fn mip_mask(volumes: &[&Volume], threshold: f32) -> Result<Volume> {
    let first = volumes
        .first()
        .ok_or_else(|| TabsError::data("mip_mask needs at least one volume"))?;
    let dims = first.dims();
    let n = first.voxels();
    let mut mip = vec![0f32; n];
    for v in volumes {
        if v.dims() != dims {
            return Err(TabsError::data(format!(
                "mip_mask: dims {:?} differ from {:?}",
                v.dims(),
                dims
            )));
        }
        for c in 0..v.channels() {
            for (m, x) in mip.iter_mut().zip(v.channel(c)) {
                *m = m.max(x.abs());
            }
        }
    }
    let data = mip
        .into_iter()
        .map(|m| if m > threshold { 1.0 } else { 0.0 })
        .collect();
    Volume::new(1, dims, Semantics::Mask, Metadata::new().with("provenance", "mip_mask"), data)
}

/// Inclusive bounding box of nonzero mask voxels along each axis.
fn bounding_box(mask: &Volume) -> Option<[(usize, usize); 3]> {
    let [dx, dy, dz] = mask.dims();
    let mut bb: Option<[(usize, usize); 3]> = None;
    let m = mask.channel(0);
    for x in 0..dx {
        for y in 0..dy {
            for z in 0..dz {
                if m[(x * dy + y) * dz + z] == 0.0 {
                    continue;
                }
                let p = [x, y, z];
                let b = bb.get_or_insert([(x, x), (y, y), (z, z)]);
                for a in 0..3 {
                    b[a].0 = b[a].0.min(p[a]);
                    b[a].1 = b[a].1.max(p[a]);
                }
            }
        }
    }
    bb
}

/// Per-axis copy plan: `(src_start, dst_start, len)`.
fn axis_plan(axis: usize, extent: usize, target: usize, bb: Option<(usize, usize)>) -> Result<(usize, usize, usize)> {
    if extent <= target {
        return Ok((0, (target - extent) / 2, extent));
    }
    let (lo, hi) = bb.unwrap_or((extent / 2, (extent - 1) / 2));
    let span = hi - lo + 1;
    if span > target {
        return Err(TabsError::data(format!(
            "axis {axis}: dataset mask spans {span} voxels, more than the target {target}; cropping would cut anatomy"
        )));
    }
    let slack = target - span;
    let start = lo.saturating_sub(slack / 2).min(extent - target);
    Ok((start, 0, target))
}

/// Pads with zeros or crops each axis to `target`. Crops keep a window
/// centred on the bounding box of `dataset_mask`, clamped to the array.
pub fn pad_crop(v: &Volume, target: usize, dataset_mask: &Volume) -> Result<Volume> {
    if dataset_mask.dims() != v.dims() {
        return Err(TabsError::data(format!(
            "pad_crop: mask dims {:?} differ from volume dims {:?}",
            dataset_mask.dims(),
            v.dims()
        )));
    }
    if target == 0 {
        return Err(TabsError::config("pad_crop: target must be positive"));
    }
    let dims = v.dims();
    let bb = bounding_box(dataset_mask);
    let mut plan = [(0, 0, 0); 3];
    for a in 0..3 {
        plan[a] = axis_plan(a, dims[a], target, bb.map(|b| b[a]))?;
    }
    let mut out = Volume::zeros(v.channels(), [target; 3], v.header.semantics);
    out.header.meta = v.header.meta.clone();
    let [(sx, tx, lx), (sy, ty, ly), (sz, tz, lz)] = plan;
    for c in 0..v.channels() {
        let src = v.channel(c);
        let dst = out.channel_mut(c);
        for x in 0..lx {
            for y in 0..ly {
                let s = ((sx + x) * dims[1] + sy + y) * dims[2] + sz;
                let d = ((tx + x) * target + ty + y) * target + tz;
                dst[d..d + lz].copy_from_slice(&src[s..s + lz]);
            }
        }
    }
    Ok(out)
}

/// Linear map sending the volume minimum to −1 and maximum to 1.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(TabsError::data(format!(
            "cannot normalize a constant or non-finite volume (min {lo}, max {hi})"
        )));
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    let mut out = v.clone();
    for x in out.data.iter_mut() {
        *x = (2.0 * ((*x as f64 - lo) / range) - 1.0) as f32;
    }
    Ok(out)
}

//! `TABSVOL1` volume files.
//!
//! ```text
//! "TABSVOL1" u32 version=1
//! u32 channels, u32 dx, u32 dy, u32 dz, u32 dtype (0 = f32), u32 semantics
//! u32 len, UTF-8 metadata (`key=value` lines)
//! payload: f32 LE, channel-major, row-major spatial (z fastest)
//! ```

use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Result, TabsError};
use crate::fsio::{self, put_f32s, put_u32, Reader};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TABSVOL1";
pub const VERSION: u32 = 1;
const FIXED_HEADER: usize = 8 + 4 * 7 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Semantics {
    RawT1,
    TissueProbs,
    Labels,
    Mask,
}

impl Semantics {
    pub fn code(self) -> u32 {
        match self {
            Semantics::RawT1 => 0,
            Semantics::TissueProbs => 1,
            Semantics::Labels => 2,
            Semantics::Mask => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => Semantics::RawT1,
            1 => Semantics::TissueProbs,
            2 => Semantics::Labels,
            3 => Semantics::Mask,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Semantics::RawT1 => "raw_t1",
            Semantics::TissueProbs => "tissue_probs",
            Semantics::Labels => "labels",
            Semantics::Mask => "mask",
        }
    }
}

impl fmt::Display for Semantics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered `key=value` metadata. Conventional keys are `provenance`, `site`,
/// `subject` and `timepoint`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Metadata {
    entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.set(key, value);
        self
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    fn encode(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    fn decode(text: &str) -> Option<Self> {
        let mut entries = Vec::new();
        if text.is_empty() {
            return Some(Metadata { entries });
        }
        let body = text.strip_suffix('\n')?;
        for line in body.split('\n') {
            let (k, v) = line.split_once('=')?;
            if k.is_empty() || entries.iter().any(|(e, _): &(String, String)| e == k) {
                return None;
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Some(Metadata { entries })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VolumeHeader {
    pub channels: usize,
    pub dims: [usize; 3],
    pub semantics: Semantics,
    pub meta: Metadata,
}

impl VolumeHeader {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.channels * self.voxels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for VolumeHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "channels={} dims={}×{}×{} semantics={}",
            self.channels, self.dims[0], self.dims[1], self.dims[2], self.semantics
        )?;
        for (k, v) in self.meta.entries() {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(
        channels: usize,
        dims: [usize; 3],
        semantics: Semantics,
        meta: Metadata,
        data: Vec<f32>,
    ) -> Result<Self> {
        let header = VolumeHeader {
            channels,
            dims,
            semantics,
            meta,
        };
        if channels == 0 || dims.contains(&0) {
            return Err(TabsError::data(format!("volume extents must be positive: {header}")));
        }
        if data.len() != header.len() {
            return Err(TabsError::data(format!(
                "volume {header} needs {} values, got {}",
                header.len(),
                data.len()
            )));
        }
        Ok(Volume { header, data })
    }

    pub fn zeros(channels: usize, dims: [usize; 3], semantics: Semantics) -> Self {
        let n = channels * dims.iter().product::<usize>();
        Volume {
            header: VolumeHeader {
                channels,
                dims,
                semantics,
                meta: Metadata::new(),
            },
            data: vec![0.0; n],
        }
    }

    /// Wraps a `[C, X, Y, Z]` tensor.
    pub fn from_tensor(t: &Tensor<f32>, semantics: Semantics, meta: Metadata) -> Result<Self> {
        match *t.shape() {
            [c, x, y, z] => Volume::new(c, [x, y, z], semantics, meta, t.data().to_vec()),
            ref s => Err(TabsError::data(format!("expected a [C,X,Y,Z] tensor, got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let [x, y, z] = self.header.dims;
        Tensor::new(vec![self.header.channels, x, y, z], self.data.clone())
            .expect("volume invariant")
    }

    pub fn channels(&self) -> usize {
        self.header.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    pub fn voxels(&self) -> usize {
        self.header.voxels()
    }

    pub fn meta(&self) -> &Metadata {
        &self.header.meta
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [_, dy, dz] = self.header.dims;
        (x * dy + y) * dz + z
    }

    /// Checks the per-voxel sum rule of tissue probability maps.
    pub fn check_probabilities(&self, tol: f32) -> Result<()> {
        if self.header.channels != 3 {
            return Err(TabsError::data(format!(
                "tissue probabilities need 3 channels, got {}",
                self.header.channels
            )));
        }
        let n = self.voxels();
        for i in 0..n {
            let s: f32 = (0..3).map(|c| self.data[c * n + i]).sum();
            if s != 0.0 && (s - 1.0).abs() > tol {
                return Err(TabsError::data(format!(
                    "voxel {i}: probabilities sum to {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.header.meta.encode();
        let mut out = Vec::with_capacity(FIXED_HEADER + meta.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.header.channels as u32);
        for d in self.header.dims {
            put_u32(&mut out, d as u32);
        }
        put_u32(&mut out, 0);
        put_u32(&mut out, self.header.semantics.code());
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(meta.as_bytes());
        put_f32s(&mut out, &self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let header = read_header(&mut r)?;
        let expected = bytes.len() - r.remaining() + 4 * header.len();
        if bytes.len() != expected {
            return r.fail(format!(
                "payload length mismatch: file is {} bytes, header implies {expected}",
                bytes.len()
            ));
        }
        let data = r.f32s(header.len(), "payload")?;
        Ok(Volume { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read_file(path)?)
    }
}

fn read_header(r: &mut Reader) -> Result<VolumeHeader> {
    r.expect_magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(TabsError::format(8, format!("unsupported volume version {version}")));
    }
    let channels = r.u32("channels")? as usize;
    let dims = [
        r.u32("dx")? as usize,
        r.u32("dy")? as usize,
        r.u32("dz")? as usize,
    ];
    let dtype_at = r.offset();
    let dtype = r.u32("dtype")?;
    if dtype != 0 {
        return Err(TabsError::format(dtype_at, format!("unsupported dtype {dtype}")));
    }
    let sem_at = r.offset();
    let code = r.u32("semantics")?;
    let semantics = Semantics::from_code(code)
        .ok_or_else(|| TabsError::format(sem_at, format!("unknown semantics code {code}")))?;
    let len = r.u32("metadata length")? as usize;
    let meta_at = r.offset();
    let text = r.string(len, "metadata")?;
    let meta = Metadata::decode(&text)
        .ok_or_else(|| TabsError::format(meta_at, "malformed metadata"))?;
    if channels == 0 || dims.contains(&0) {
        return Err(TabsError::format(12, "zero volume extent"));
    }
    dims.iter()
        .try_fold(channels, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| TabsError::format(12, "volume extents overflow"))?;
    Ok(VolumeHeader {
        channels,
        dims,
        semantics,
        meta,
    })
}

/// Reads only the header of a volume file and checks the file length against
/// it, without loading the payload.
pub fn inspect(path: &Path) -> Result<VolumeHeader> {
    if !path.exists() {
        return Err(TabsError::MissingFile(path.to_path_buf()));
    }
    let mut f = File::open(path).map_err(|e| TabsError::io(path, e))?;
    let file_len = f.metadata().map_err(|e| TabsError::io(path, e))?.len();
    let mut fixed = vec![0u8; FIXED_HEADER.min(file_len as usize)];
    f.read_exact(&mut fixed).map_err(|e| TabsError::io(path, e))?;
    let meta_len = if fixed.len() == FIXED_HEADER {
        u32::from_le_bytes(fixed[FIXED_HEADER - 4..].try_into().expect("4 bytes")) as u64
    } else {
        0
    };
    let meta_len = meta_len.min(file_len.saturating_sub(FIXED_HEADER as u64));
    let mut head = fixed;
    let mut meta = vec![0u8; meta_len as usize];
    f.read_exact(&mut meta).map_err(|e| TabsError::io(path, e))?;
    head.extend_from_slice(&meta);
    let mut r = Reader::new(&head);
    let header = read_header(&mut r)?;
    let expected = head.len() as u64 + 4 * header.len() as u64;
    if file_len != expected {
        return Err(TabsError::format(
            head.len() as u64,
            format!("payload length mismatch: file is {file_len} bytes, header implies {expected}"),
        ));
    }
    Ok(header)
}

//! Tensor value types and the two binary container formats used between
//! pipeline stages.
//!
//! `RMTF` (tensor file, version 1):
//!
//! ```text
//! magic  "RMTF"            4 bytes
//! version u32 LE = 1
//! ndim    u32 LE
//! dims    u32 LE x ndim
//! dtype   u8 (1 = float32 LE)
//! payload float32 LE, row-major over dims
//! ```
//!
//! `RMDS` (descriptor file, version 1):
//!
//! ```text
//! magic  "RMDS"            4 bytes
//! version u32 LE = 1
//! count   u64 LE
//! dim     u32 LE
//! count x { id_len u16 LE, id UTF-8 bytes, dim x float32 LE }
//! ```
//!
//! All floats on disk are 32-bit little-endian. Norms and sums are
//! accumulated in `f64`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result, ResultExt};

pub const TENSOR_MAGIC: &[u8; 4] = b"RMTF";
pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"RMDS";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

/// A `C x H x W` activation tensor stored as `[channel][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(Error::Contract(format!(
                "feature map dims must be positive (C={channels}, W={width}, H={height})"
            )));
        }
        if data.len() != channels * width * height {
            return Err(Error::Contract(format!(
                "feature map data length {} != C*W*H = {}",
                data.len(),
                channels * width * height
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite activation {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self {
            channels,
            width,
            height,
            data,
        })
    }

    pub fn zeros(channels: usize, width: usize, height: usize) -> Result<Self> {
        Self::new(
            channels,
            width,
            height,
            vec![0.0; channels * width * height],
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// The `H x W` plane of one channel.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// Multiply every activation by `alpha`.
    pub fn scaled(&self, alpha: f32) -> Result<Self> {
        Self::new(
            self.channels,
            self.width,
            self.height,
            self.data.iter().map(|v| v * alpha).collect(),
        )
    }
}

/// A finite, non-empty `f32` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Contract("vector dim must be >= 1".into()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at index {i}",
                data[i]
            )));
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl AsRef<[f32]> for Vector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

pub(crate) fn norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Scale `v` to unit Euclidean norm in place. A zero vector stays zero.
pub fn normalize_in_place(v: &mut [f32]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x = ((*x as f64) / n) as f32;
        }
    }
}

/// Unit-norm copy of `v`; the zero vector maps to itself.
pub fn l2_normalize(v: &Vector) -> Vector {
    let mut out = v.0.clone();
    normalize_in_place(&mut out);
    Vector(out)
}

/// An in-memory descriptor collection, stored contiguously (`ids.len() * dim` floats).
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl DescriptorSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Self {
            dim,
            ids: Vec::with_capacity(n),
            data: Vec::with_capacity(n * dim),
        }
    }

    /// Wrap pre-built contiguous storage.
    pub fn from_parts(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::Contract(format!(
                "descriptor storage holds {} floats, expected {} x {dim}",
                data.len(),
                ids.len()
            )));
        }
        Ok(Self { dim, ids, data })
    }

    pub fn push(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Contract(format!(
                "descriptor dim {} != set dim {}",
                vector.len(),
                self.dim
            )));
        }
        self.ids.push(id.into());
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.data.chunks_exact(self.dim.max(1)))
    }

    pub fn into_parts(self) -> (usize, Vec<String>, Vec<f32>) {
        (self.dim, self.ids, self.data)
    }

    /// First id that appears more than once, if any.
    pub fn first_duplicate(&self) -> Option<&str> {
        let mut seen = HashSet::with_capacity(self.ids.len());
        self.ids
            .iter()
            .find(|id| !seen.insert(id.as_str()))
            .map(String::as_str)
    }
}

/// Reader that tracks the byte offset so decode errors can point at it.
struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn bytes(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::format(
                self.offset,
                format!("truncated while reading {what}"),
            )),
            Err(e) => Err(Error::format(self.offset, format!("read failed: {e}"))),
        }
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let mut m = [0u8; 4];
        self.bytes(&mut m, "magic")?;
        if &m != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&m),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.bytes(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.bytes(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn version(&mut self) -> Result<()> {
        let at = self.offset;
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    /// Read `out.len()` finite little-endian f32 values.
    fn f32s(&mut self, out: &mut [f32], what: &str) -> Result<()> {
        const CHUNK: usize = 4096;
        let mut buf = [0u8; CHUNK * 4];
        for block in out.chunks_mut(CHUNK) {
            let start = self.offset;
            let bytes = &mut buf[..block.len() * 4];
            self.bytes(bytes, what)?;
            for (i, (dst, src)) in block.iter_mut().zip(bytes.chunks_exact(4)).enumerate() {
                let v = f32::from_le_bytes([src[0], src[1], src[2], src[3]]);
                if !v.is_finite() {
                    return Err(Error::format(
                        start + 4 * i as u64,
                        format!("non-finite value {v} in {what}"),
                    ));
                }
                *dst = v;
            }
        }
        Ok(())
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format(self.offset, "trailing bytes after payload")),
            Err(e) => Err(Error::format(self.offset, format!("read failed: {e}"))),
        }
    }
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len().min(4096) * 4);
    for chunk in values.chunks(4096) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<OffsetReader<BufReader<File>>> {
    File::open(path)
        .map(|f| OffsetReader::new(BufReader::new(f)))
        .map_err(|e| Error::io(path, e))
}

/// Serialize a feature map as a 3-d `RMTF` tensor with dims `[C, H, W]`.
pub fn encode_tensor<W: Write>(w: &mut W, map: &FeatureMap) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&3u32.to_le_bytes())?;
    for d in [map.channels, map.height, map.width] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&[DTYPE_F32])?;
    write_f32s(w, &map.data)
}

/// Decode an `RMTF` tensor. Accepts `[C, H, W]` or `[1, C, H, W]`.
pub fn decode_tensor<R: Read>(r: R) -> Result<FeatureMap> {
    let mut r = OffsetReader::new(r);
    r.magic(TENSOR_MAGIC)?;
    r.version()?;
    let ndim_at = r.offset;
    let ndim = r.u32("ndim")? as usize;
    if ndim > 8 {
        return Err(Error::format(ndim_at, format!("implausible ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32("dims")? as usize);
    }
    let dtype_at = r.offset;
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(
            dtype_at,
            format!("unsupported dtype {dtype}"),
        ));
    }
    let (c, h, w) = match dims.as_slice() {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::format(
                ndim_at,
                format!("expected a [C,H,W] feature map, got dims {dims:?}"),
            ))
        }
    };
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::format(ndim_at, format!("zero-sized dims {dims:?}")));
    }
    let mut data = vec![0.0f32; c * h * w];
    r.f32s(&mut data, "tensor payload")?;
    r.expect_eof()?;
    FeatureMap::new(c, w, h, data)
}

pub fn write_tensor(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    encode_tensor(&mut w, map)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let r = open(path)?;
    decode_tensor(r.inner).with_context(|| format!("reading {}", path.display()))
}

pub fn encode_descriptors<W: Write>(w: &mut W, set: &DescriptorSet) -> Result<()> {
    if let Some(dup) = set.first_duplicate() {
        return Err(Error::Contract(format!("duplicate descriptor id `{dup}`")));
    }
    let io = |e| Error::format(0, format!("write failed: {e}"));
    w.write_all(DESCRIPTOR_MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(set.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(set.dim as u32).to_le_bytes()).map_err(io)?;
    for (id, v) in set.iter() {
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Contract(format!("id `{id}` longer than 65535 bytes")))?;
        w.write_all(&len.to_le_bytes()).map_err(io)?;
        w.write_all(id.as_bytes()).map_err(io)?;
        write_f32s(w, v).map_err(io)?;
    }
    Ok(())
}

/// Decode an `RMDS` file. Duplicate ids are not rejected here; index
/// building reports them.
pub fn decode_descriptors<R: Read>(r: R) -> Result<DescriptorSet> {
    let mut r = OffsetReader::new(r);
    r.magic(DESCRIPTOR_MAGIC)?;
    r.version()?;
    let count = r.u64("count")? as usize;
    let dim = r.u32("dim")? as usize;
    if dim == 0 && count > 0 {
        return Err(Error::format(16, "dim 0 with non-empty record list"));
    }
    // Cap the up-front reservation; a corrupt count must not allocate terabytes.
    let mut set = DescriptorSet::with_capacity(dim, count.min(1 << 20));
    let mut v = vec![0.0f32; dim];
    let mut id_buf = Vec::new();
    for _ in 0..count {
        let at = r.offset;
        let len = r.u16("id length")? as usize;
        id_buf.resize(len, 0);
        r.bytes(&mut id_buf, "id")?;
        let id = std::str::from_utf8(&id_buf)
            .map_err(|_| Error::format(at + 2, "id is not valid UTF-8"))?
            .to_owned();
        r.f32s(&mut v, "descriptor values")?;
        set.ids.push(id);
        set.data.extend_from_slice(&v);
    }
    r.expect_eof()?;
    Ok(set)
}

pub fn write_descriptors(path: impl AsRef<Path>, set: &DescriptorSet) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    encode_descriptors(&mut w, set)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_descriptors(path: impl AsRef<Path>) -> Result<DescriptorSet> {
    let path = path.as_ref();
    let r = open(path)?;
    decode_descriptors(r.inner).with_context(|| format!("reading {}", path.display()))
}

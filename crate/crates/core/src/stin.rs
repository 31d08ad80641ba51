//! Portable tensor and checkpoint serialization.
//!
//! Single-tensor "STIN" format (all integers little-endian):
//!
//! ```text
//! magic  b"STIN"
//! u32    version        (currently 1)
//! u32    ndim
//! u64×ndim  dims
//! u32    dtype tag      (0 = float32)
//! bytes  payload        row-major little-endian float32
//! ```
//!
//! Checkpoints use a container ("STNC") that wraps named STIN records plus a
//! structured-text header describing the model configuration:
//!
//! ```text
//! magic  b"STNC"
//! u32    version        (currently 1)
//! u32    header length, then UTF-8 header text
//! u32    entry count
//! per entry: u32 name length, UTF-8 name, embedded STIN record
//! ```
//!
//! Entries are written in a canonical order, so re-serializing the same
//! weights always produces byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const STIN_MAGIC: &[u8; 4] = b"STIN";
pub const STIN_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const CONTAINER_MAGIC: &[u8; 4] = b"STNC";
pub const CONTAINER_VERSION: u32 = 1;

const MAX_NDIM: usize = 8;
const MAX_NUMEL: u64 = 1 << 31;

/// Serializes a tensor to STIN bytes.
pub fn tensor_to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.ndim() * 8 + t.numel() * 4);
    out.extend_from_slice(STIN_MAGIC);
    out.extend_from_slice(&STIN_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Byte cursor with bounds-checked reads.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Format(format!(
                "truncated while reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn read_tensor_record(cur: &mut Cursor<'_>) -> Result<Tensor<f32>> {
    let magic = cur.take(4, "magic")?;
    if magic != STIN_MAGIC {
        return Err(CoreError::Format(format!("bad magic {magic:?}, expected STIN")));
    }
    let version = cur.u32("version")?;
    if version != STIN_VERSION {
        return Err(CoreError::Format(format!("unsupported STIN version {version}")));
    }
    let ndim = cur.u32("ndim")? as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(CoreError::Format(format!("ndim {ndim} outside [1, {MAX_NDIM}]")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: u64 = 1;
    for i in 0..ndim {
        let d = cur.u64(&format!("dim {i}"))?;
        if d == 0 {
            return Err(CoreError::Format(format!("dim {i} is zero")));
        }
        numel = numel
            .checked_mul(d)
            .filter(|&n| n <= MAX_NUMEL)
            .ok_or_else(|| CoreError::Format(format!("element count overflows past dim {i}")))?;
        shape.push(d as usize);
    }
    let dtype = cur.u32("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(CoreError::Format(format!("unsupported dtype tag {dtype}")));
    }
    let payload = cur.take(numel as usize * 4, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}

/// Parses a single STIN record, rejecting trailing bytes.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut cur = Cursor::new(bytes);
    let t = read_tensor_record(&mut cur)?;
    if cur.remaining() != 0 {
        return Err(CoreError::Format(format!(
            "{} trailing bytes after tensor payload",
            cur.remaining()
        )));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    with_path(path, fs::write(path, tensor_to_bytes(t)))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = with_path(path, fs::read(path))?;
    tensor_from_bytes(&bytes).map_err(|e| annotate(path, e))
}

/// Writes a checkpoint container with a canonical entry order (caller supplies
/// the order; the format preserves it exactly).
pub fn write_container(path: &Path, header: &str, entries: &[(String, &Tensor<f32>)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&tensor_to_bytes(t));
    }
    let mut f = with_path(path, fs::File::create(path))?;
    with_path(path, f.write_all(&out))?;
    Ok(())
}

/// Reads a checkpoint container, returning the header text and named entries
/// in file order.
pub fn read_container(path: &Path) -> Result<(String, Vec<(String, Tensor<f32>)>)> {
    let bytes = with_path(path, fs::read(path))?;
    parse_container(&bytes).map_err(|e| annotate(path, e))
}

fn parse_container(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor<f32>)>)> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4, "container magic")?;
    if magic != CONTAINER_MAGIC {
        return Err(CoreError::Format(format!("bad magic {magic:?}, expected STNC")));
    }
    let version = cur.u32("container version")?;
    if version != CONTAINER_VERSION {
        return Err(CoreError::Format(format!("unsupported container version {version}")));
    }
    let header_len = cur.u32("header length")? as usize;
    let header = std::str::from_utf8(cur.take(header_len, "header")?)
        .map_err(|_| CoreError::Format("header is not valid UTF-8".into()))?
        .to_string();
    let n_entries = cur.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for i in 0..n_entries {
        let name_len = cur.u32("entry name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "entry name")?)
            .map_err(|_| CoreError::Format(format!("entry {i} name is not valid UTF-8")))?
            .to_string();
        let t = read_tensor_record(&mut cur)?;
        entries.push((name, t));
    }
    if cur.remaining() != 0 {
        return Err(CoreError::Format(format!(
            "{} trailing bytes after last entry",
            cur.remaining()
        )));
    }
    Ok((header, entries))
}

/// Writes a binary portable pixmap (P6) with 8-bit RGB samples.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(CoreError::Invalid(format!(
            "ppm buffer length {} does not match {width}x{height} RGB",
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    with_path(path, fs::write(path, out))
}

fn with_path<V>(path: &Path, r: std::io::Result<V>) -> Result<V> {
    r.map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))
}

fn annotate(path: &Path, e: CoreError) -> CoreError {
    match e {
        CoreError::Format(msg) => CoreError::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}

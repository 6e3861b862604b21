//! Binary tensor blobs indexed by a plain-text manifest.
//!
//! Blob layout (all integers little-endian):
//!
//! ```text
//! "DTAMBLOB" | u32 version | u32 count
//! repeated count times:
//!   u32 name_len | name (UTF-8) | u8 dtype (0 = f64, 1 = f32)
//!   u32 ndim | u64 dim × ndim | payload (row-major IEEE-754)
//! ```
//!
//! The manifest repeats each record's name, dtype, shape, byte offset and
//! length, plus the SHA-256 of the whole blob, one `key value...` per line.

use crate::error::{NumError, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::path::Path;

pub const BLOB_MAGIC: &[u8; 8] = b"DTAMBLOB";
pub const BLOB_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            t => Err(NumError::Corrupt(format!("unknown dtype tag {t}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F64 => "f64",
            DType::F32 => "f32",
        })
    }
}

impl std::str::FromStr for DType {
    type Err = NumError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(DType::F64),
            "f32" => Ok(DType::F32),
            other => Err(NumError::Format(format!("unknown dtype {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobIndex {
    pub entries: Vec<BlobEntry>,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes `tensors` in order. `f32` storage rounds each value.
pub fn encode_blob(tensors: &[(&str, &Tensor)], dtype: DType) -> Result<(Vec<u8>, BlobIndex)> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(NumError::Format(format!("invalid tensor name {name:?}")));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype.tag());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let offset = out.len();
        for &v in t.data() {
            match dtype {
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        entries.push(BlobEntry {
            name: name.to_string(),
            dtype,
            shape: t.shape().to_vec(),
            offset,
            bytes: out.len() - offset,
        });
    }
    let sha256 = sha256_hex(&out);
    Ok((out, BlobIndex { entries, sha256 }))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NumError::Corrupt(format!(
                "truncated at byte {} (wanted {n} more of {})",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a blob. When `index` is given, the hash and every record must match it.
pub fn decode_blob(bytes: &[u8], index: Option<&BlobIndex>) -> Result<Vec<(String, Tensor)>> {
    if let Some(idx) = index {
        let actual = sha256_hex(bytes);
        if actual != idx.sha256 {
            return Err(NumError::Corrupt(format!(
                "blob hash {actual} does not match manifest {}",
                idx.sha256
            )));
        }
    }
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != BLOB_MAGIC {
        return Err(NumError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != BLOB_VERSION {
        return Err(NumError::Format(format!("unsupported blob version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NumError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_tag(r.take(1)?[0])?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let offset = r.pos;
        let payload = r.take(n * dtype.width())?;
        let data = match dtype {
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        if let Some(idx) = index {
            let e = idx.entries.get(k).ok_or_else(|| {
                NumError::Corrupt(format!("blob has more records than manifest ({count})"))
            })?;
            if e.name != name || e.dtype != dtype || e.shape != shape || e.offset != offset {
                return Err(NumError::Corrupt(format!("record {k} ({name}) disagrees with manifest")));
            }
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(NumError::Corrupt("trailing bytes after last record".into()));
    }
    if let Some(idx) = index {
        if idx.entries.len() != count {
            return Err(NumError::Corrupt("manifest lists a different record count".into()));
        }
    }
    Ok(out)
}

impl BlobIndex {
    pub fn to_manifest_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("blob_format {BLOB_VERSION}"),
            format!("blob_sha256 {}", self.sha256),
            format!("tensors {}", self.entries.len()),
        ];
        for e in &self.entries {
            let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            lines.push(format!(
                "tensor {} {} [{}] {} {}",
                e.name,
                e.dtype,
                shape.join(","),
                e.offset,
                e.bytes
            ));
        }
        lines
    }

    /// Reads the `blob_sha256` and `tensor` lines, ignoring any other keys.
    pub fn from_manifest_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut sha = None;
        let mut entries = Vec::new();
        let mut declared = None;
        for line in lines {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("blob_sha256") => sha = parts.next().map(str::to_string),
                Some("tensors") => {
                    declared = parts.next().and_then(|v| v.parse::<usize>().ok());
                }
                Some("tensor") => {
                    let fields: Vec<&str> = parts.collect();
                    if fields.len() != 5 {
                        return Err(NumError::Format(format!("bad tensor line: {line}")));
                    }
                    let dims = fields[2].trim_start_matches('[').trim_end_matches(']');
                    let shape = if dims.is_empty() {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| NumError::Format(format!("bad shape in: {line}")))?
                    };
                    let num = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| NumError::Format(format!("bad number in: {line}")))
                    };
                    entries.push(BlobEntry {
                        name: fields[0].to_string(),
                        dtype: fields[1].parse()?,
                        shape,
                        offset: num(fields[3])?,
                        bytes: num(fields[4])?,
                    });
                }
                _ => {}
            }
        }
        let sha256 = sha.ok_or_else(|| NumError::Format("manifest lacks blob_sha256".into()))?;
        if declared != Some(entries.len()) {
            return Err(NumError::Corrupt("manifest tensor count mismatch".into()));
        }
        Ok(Self { entries, sha256 })
    }
}

/// Writes `<stem>.bin` and `<stem>.manifest` into `dir`.
pub fn save_tensors(dir: &Path, stem: &str, tensors: &[(&str, &Tensor)], dtype: DType) -> Result<BlobIndex> {
    fs::create_dir_all(dir)?;
    let (bytes, index) = encode_blob(tensors, dtype)?;
    fs::write(dir.join(format!("{stem}.bin")), &bytes)?;
    let mut text = index.to_manifest_lines().join("\n");
    text.push('\n');
    fs::write(dir.join(format!("{stem}.manifest")), text)?;
    Ok(index)
}

pub fn load_tensors(dir: &Path, stem: &str) -> Result<Vec<(String, Tensor)>> {
    let text = fs::read_to_string(dir.join(format!("{stem}.manifest")))?;
    let index = BlobIndex::from_manifest_lines(text.lines())?;
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    decode_blob(&bytes, Some(&index))
}

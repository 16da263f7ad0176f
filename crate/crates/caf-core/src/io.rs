//! Bit-exact persistence: a minimal tensor file, a checkpoint container,
//! a dataset manifest, and a comma-separated detection interchange format.
//! All integers and floats are little-endian regardless of platform, and
//! every writer goes through a temp-file rename so failures never leave
//! partial output behind.

use crate::metrics::DetBox;
use crate::tensor::{Scalar, Tensor4};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("dimension overflow reading header")]
    DimensionOverflow,
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("line {line}: {detail}")]
    MalformedLine { line: usize, detail: String },
    #[error("no entry named {0:?}")]
    MissingEntry(String),
    #[error("duplicate entry {0:?}")]
    DuplicateEntry(String),
    #[error("corrupt container: {0}")]
    Corrupt(String),
}

pub type IoResult<T> = Result<T, IoError>;

const TENSOR_MAGIC: [u8; 4] = *b"CAFT";
const CHECKPOINT_MAGIC: [u8; 4] = *b"CAFC";
const FORMAT_VERSION: u16 = 1;

/// Element types the tensor format can carry; the dtype tag comes from
/// [`Scalar::DTYPE`].
pub trait Element: Scalar {
    const SIZE: usize;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const SIZE: usize = 4;
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("caller slices exactly SIZE bytes"))
    }
}

impl Element for f64 {
    const SIZE: usize = 8;
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("caller slices exactly SIZE bytes"))
    }
}

/// Write `bytes` next to `path` and rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> IoResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> IoResult<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(IoError::Truncated(format!(
                "{what}: wanted {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> IoResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16_le(&mut self, what: &str) -> IoResult<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32_le(&mut self, what: &str) -> IoResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64_le(&mut self, what: &str) -> IoResult<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn expect_end(&self, what: &str) -> IoResult<()> {
        if self.remaining() != 0 {
            return Err(IoError::Corrupt(format!(
                "{what}: {} trailing bytes",
                self.remaining()
            )));
        }
        Ok(())
    }
}

/// Encode one tensor: magic, version, dtype, rank, dims, row-major payload.
pub fn tensor_to_bytes<T: Element>(t: &Tensor4<T>) -> Vec<u8> {
    let (n, c, h, w) = t.shape();
    let mut out = Vec::with_capacity(4 + 2 + 1 + 1 + 32 + t.numel() * T::SIZE);
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE);
    out.push(4);
    for d in [n, c, h, w] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.put_le(&mut out);
    }
    out
}

pub fn tensor_from_bytes<T: Element>(bytes: &[u8]) -> IoResult<Tensor4<T>> {
    let mut cur = Cursor::new(bytes);
    let tensor = tensor_from_cursor(&mut cur)?;
    cur.expect_end("tensor file")?;
    Ok(tensor)
}

fn tensor_from_cursor<T: Element>(cur: &mut Cursor) -> IoResult<Tensor4<T>> {
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if magic != TENSOR_MAGIC {
        return Err(IoError::BadMagic {
            expected: TENSOR_MAGIC,
            found: magic,
        });
    }
    let version = cur.u16_le("version")?;
    if version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let dtype = cur.u8("dtype")?;
    if dtype != T::DTYPE {
        return Err(IoError::ShapeMismatch(format!(
            "dtype code {dtype} where {} was expected",
            T::DTYPE
        )));
    }
    let rank = cur.u8("rank")?;
    if rank != 4 {
        return Err(IoError::ShapeMismatch(format!("rank {rank} tensor, expected rank 4")));
    }
    let mut dims = [0usize; 4];
    let mut numel = 1usize;
    for d in &mut dims {
        let v = cur.u64_le("dimension")?;
        *d = usize::try_from(v).map_err(|_| IoError::DimensionOverflow)?;
        numel = numel.checked_mul(*d).ok_or(IoError::DimensionOverflow)?;
    }
    numel
        .checked_mul(T::SIZE)
        .ok_or(IoError::DimensionOverflow)?;
    let payload = cur.take(numel * T::SIZE, "payload")?;
    let data: Vec<T> = payload.chunks_exact(T::SIZE).map(T::get_le).collect();
    Tensor4::new((dims[0], dims[1], dims[2], dims[3]), data)
        .map_err(|e| IoError::Corrupt(e.to_string()))
}

pub fn write_tensor<T: Element>(path: &Path, t: &Tensor4<T>) -> IoResult<()> {
    atomic_write(path, &tensor_to_bytes(t))
}

pub fn read_tensor<T: Element>(path: &Path) -> IoResult<Tensor4<T>> {
    tensor_from_bytes(&fs::read(path)?)
}

/// Named tensors plus an echoed configuration, stored as a manifest over
/// concatenated tensor blobs. Entry order is preserved, so load then save
/// reproduces the file byte for byte.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    entries: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new(config: Vec<(String, String)>) -> Self {
        Checkpoint {
            config,
            entries: Vec::new(),
        }
    }

    pub fn push_tensor<T: Element>(&mut self, name: &str, t: &Tensor4<T>) -> IoResult<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(IoError::DuplicateEntry(name.to_string()));
        }
        self.entries.push((name.to_string(), tensor_to_bytes(t)));
        Ok(())
    }

    pub fn tensor<T: Element>(&self, name: &str) -> IoResult<Tensor4<T>> {
        let (_, blob) = self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| IoError::MissingEntry(name.to_string()))?;
        tensor_from_bytes(blob)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        for (k, v) in &self.config {
            for s in [k, v] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, blob) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            offset += blob.len() as u64;
        }
        for (_, blob) in &self.entries {
            out.extend_from_slice(blob);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> IoResult<Self> {
        let mut cur = Cursor::new(bytes);
        let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(IoError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = cur.u16_le("version")?;
        if version != FORMAT_VERSION {
            return Err(IoError::UnsupportedVersion(version));
        }
        let read_string = |cur: &mut Cursor, what: &str| -> IoResult<String> {
            let len = cur.u32_le(what)? as usize;
            let raw = cur.take(len, what)?;
            String::from_utf8(raw.to_vec()).map_err(|_| IoError::Corrupt(format!("{what} is not utf-8")))
        };

        let config_len = cur.u32_le("config count")? as usize;
        let mut config = Vec::with_capacity(config_len);
        for _ in 0..config_len {
            let k = read_string(&mut cur, "config key")?;
            let v = read_string(&mut cur, "config value")?;
            config.push((k, v));
        }

        let entry_len = cur.u32_le("entry count")? as usize;
        let mut manifest = Vec::with_capacity(entry_len);
        for _ in 0..entry_len {
            let name = read_string(&mut cur, "entry name")?;
            let offset = cur.u64_le("entry offset")? as usize;
            let length = cur.u64_le("entry length")? as usize;
            manifest.push((name, offset, length));
        }

        let blob_section = cur.take(cur.remaining(), "blob section")?;
        let mut expected_offset = 0usize;
        let mut entries = Vec::with_capacity(entry_len);
        for (name, offset, length) in manifest {
            if offset != expected_offset {
                return Err(IoError::Corrupt(format!(
                    "entry {name:?} at offset {offset}, expected {expected_offset}"
                )));
            }
            let end = offset
                .checked_add(length)
                .filter(|&e| e <= blob_section.len())
                .ok_or_else(|| IoError::Truncated(format!("blob for entry {name:?}")))?;
            if entries.iter().any(|(n, _): &(String, Vec<u8>)| *n == name) {
                return Err(IoError::DuplicateEntry(name));
            }
            entries.push((name, blob_section[offset..end].to_vec()));
            expected_offset = end;
        }
        if expected_offset != blob_section.len() {
            return Err(IoError::Corrupt(format!(
                "{} unclaimed blob bytes",
                blob_section.len() - expected_offset
            )));
        }
        Ok(Checkpoint { config, entries })
    }

    pub fn write(&self, path: &Path) -> IoResult<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> IoResult<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// One detection or ground-truth line. Ground truth has no score field and
/// is scored 1.0 when turned into a [`DetBox`].
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: usize,
    pub score: Option<f64>,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl DetectionRecord {
    pub fn from_box(image_id: &str, b: &DetBox, with_score: bool) -> Self {
        DetectionRecord {
            image_id: image_id.to_string(),
            class_id: b.class_id,
            score: with_score.then_some(b.score),
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        }
    }

    pub fn to_box(&self) -> DetBox {
        DetBox {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
            class_id: self.class_id,
            score: self.score.unwrap_or(1.0),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.image_id.is_empty() {
            return Err("empty image id".into());
        }
        if self.image_id.contains([',', '#', '\n', '\r']) {
            return Err(format!("image id {:?} contains a delimiter", self.image_id));
        }
        for v in [self.x1, self.y1, self.x2, self.y2] {
            if !v.is_finite() {
                return Err("non-finite coordinate".into());
            }
        }
        if self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(format!(
                "corners out of order: ({}, {}) to ({}, {})",
                self.x1, self.y1, self.x2, self.y2
            ));
        }
        if let Some(s) = self.score {
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(format!("score {s} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Render records one per line; `# comment` lines and blanks are legal in
/// files but never produced here.
pub fn format_detections(records: &[DetectionRecord]) -> IoResult<String> {
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|detail| IoError::MalformedLine {
            line: i + 1,
            detail,
        })?;
        match r.score {
            Some(s) => writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.image_id, r.class_id, s, r.x1, r.y1, r.x2, r.y2
            ),
            None => writeln!(
                out,
                "{},{},{},{},{},{}",
                r.image_id, r.class_id, r.x1, r.y1, r.x2, r.y2
            ),
        }
        .expect("writing to a String cannot fail");
    }
    Ok(out)
}

pub fn parse_detections(text: &str) -> IoResult<Vec<DetectionRecord>> {
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let bad = |detail: String| IoError::MalformedLine { line, detail };
        let (score_field, coord_start) = match fields.len() {
            7 => (Some(fields[2]), 3),
            6 => (None, 2),
            n => {
                return Err(bad(format!("{n} fields, expected 6 (ground truth) or 7 (detection)")))
            }
        };
        let class_id: usize = fields[1]
            .parse()
            .map_err(|_| bad(format!("class id {:?} is not a non-negative integer", fields[1])))?;
        let score = match score_field {
            Some(s) => Some(
                s.parse::<f64>()
                    .map_err(|_| bad(format!("score {s:?} is not a number")))?,
            ),
            None => None,
        };
        let mut coords = [0.0f64; 4];
        for (slot, f) in coords.iter_mut().zip(&fields[coord_start..]) {
            *slot = f
                .parse()
                .map_err(|_| bad(format!("coordinate {f:?} is not a number")))?;
        }
        let rec = DetectionRecord {
            image_id: fields[0].to_string(),
            class_id,
            score,
            x1: coords[0],
            y1: coords[1],
            x2: coords[2],
            y2: coords[3],
        };
        rec.validate().map_err(|detail| IoError::MalformedLine { line, detail })?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> IoResult<()> {
    atomic_write(path, format_detections(records)?.as_bytes())
}

pub fn read_detections(path: &Path) -> IoResult<Vec<DetectionRecord>> {
    let text = fs::read_to_string(path)?;
    parse_detections(&text)
}

/// Align detection and ground-truth records into per-image box lists over
/// the union of image ids (sorted), ready for evaluation.
pub fn records_to_eval_inputs(
    dets: &[DetectionRecord],
    gts: &[DetectionRecord],
) -> (Vec<Vec<DetBox>>, Vec<Vec<DetBox>>, Vec<String>) {
    let mut ids: Vec<String> = dets
        .iter()
        .chain(gts.iter())
        .map(|r| r.image_id.clone())
        .collect();
    ids.sort();
    ids.dedup();
    let collect = |records: &[DetectionRecord]| -> Vec<Vec<DetBox>> {
        ids.iter()
            .map(|id| {
                records
                    .iter()
                    .filter(|r| &r.image_id == id)
                    .map(|r| r.to_box())
                    .collect()
            })
            .collect()
    };
    (collect(dets), collect(gts), ids)
}

/// Index of a generated dataset directory: scene dimensions plus the image
/// ids, stored as `key=value` lines with indexed `image.N` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub image_ids: Vec<String>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "version={FORMAT_VERSION}").unwrap();
        writeln!(out, "seed={}", self.seed).unwrap();
        writeln!(out, "height={}", self.height).unwrap();
        writeln!(out, "width={}", self.width).unwrap();
        writeln!(out, "classes={}", self.classes).unwrap();
        writeln!(out, "count={}", self.image_ids.len()).unwrap();
        for (i, id) in self.image_ids.iter().enumerate() {
            writeln!(out, "image.{i}={id}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> IoResult<Self> {
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (k, v) = trimmed.split_once('=').ok_or_else(|| IoError::MalformedLine {
                line,
                detail: format!("{trimmed:?} is not key=value"),
            })?;
            pairs.push((line, k.to_string(), v.to_string()));
        }
        let lookup = |key: &str| -> IoResult<String> {
            pairs
                .iter()
                .find(|(_, k, _)| k == key)
                .map(|(_, _, v)| v.clone())
                .ok_or_else(|| IoError::MissingEntry(key.to_string()))
        };
        let parse_num = |key: &str| -> IoResult<u64> {
            let v = lookup(key)?;
            v.parse().map_err(|_| IoError::Corrupt(format!("{key}={v} is not a number")))
        };
        let version = parse_num("version")?;
        if version != FORMAT_VERSION as u64 {
            return Err(IoError::UnsupportedVersion(version.min(u16::MAX as u64) as u16));
        }
        let count = parse_num("count")? as usize;
        let mut image_ids = Vec::with_capacity(count);
        for i in 0..count {
            image_ids.push(lookup(&format!("image.{i}"))?);
        }
        Ok(DatasetManifest {
            seed: parse_num("seed")?,
            height: parse_num("height")? as usize,
            width: parse_num("width")? as usize,
            classes: parse_num("classes")? as usize,
            image_ids,
        })
    }

    pub fn write(&self, path: &Path) -> IoResult<()> {
        atomic_write(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> IoResult<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

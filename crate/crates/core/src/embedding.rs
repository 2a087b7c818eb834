//! Tri-stream embedding records and the `TSDW` binary file format.
//!
//! Every image carries three vectors: face, head-limb and global. A missing
//! face is an all-zeros vector of full width; `face_present` is derived from
//! its norm on construction and never stored on disk.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "TSDW" | version u32 (=1) | count u32 | D_f u32 | D_l u32 | D_g u32
//! per record:
//!   id_len u16 | id utf-8 | person u32 | camera u16 | clothes u32
//!   D_f + D_l + D_g f32 values (face, head-limb, global)
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSDW";
pub const FORMAT_VERSION: u32 = 1;

/// Norm below which a vector counts as the zero vector.
pub const EPS_ZERO: f64 = 1e-8;

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Which of the three feature streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Face,
    HeadLimb,
    Global,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Face, Stream::HeadLimb, Stream::Global];

    pub fn index(self) -> usize {
        match self {
            Stream::Face => 0,
            Stream::HeadLimb => 1,
            Stream::Global => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Face => "face",
            Stream::HeadLimb => "head_limb",
            Stream::Global => "global",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDims {
    pub face: usize,
    pub head_limb: usize,
    pub global: usize,
}

impl StreamDims {
    pub fn uniform(d: usize) -> Self {
        Self {
            face: d,
            head_limb: d,
            global: d,
        }
    }

    pub fn get(&self, stream: Stream) -> usize {
        match stream {
            Stream::Face => self.face,
            Stream::HeadLimb => self.head_limb,
            Stream::Global => self.global,
        }
    }
}

impl Default for StreamDims {
    fn default() -> Self {
        Self::uniform(2048)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetRole {
    Query,
    Gallery,
    Train,
}

/// Borrowed view of one image's three stream vectors.
#[derive(Debug, Clone, Copy)]
pub struct StreamView<'a> {
    pub face: &'a [f64],
    pub head_limb: &'a [f64],
    pub global: &'a [f64],
    pub face_present: bool,
}

impl<'a> StreamView<'a> {
    pub fn stream(&self, stream: Stream) -> &'a [f64] {
        match stream {
            Stream::Face => self.face,
            Stream::HeadLimb => self.head_limb,
            Stream::Global => self.global,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub person_id: u32,
    pub camera_id: u16,
    pub clothes_id: u32,
    pub face: Vec<f64>,
    pub head_limb: Vec<f64>,
    pub global_feat: Vec<f64>,
    face_present: bool,
}

impl EmbeddingRecord {
    /// Builds a record and derives `face_present` from the face norm.
    pub fn new(
        image_id: impl Into<String>,
        person_id: u32,
        camera_id: u16,
        clothes_id: u32,
        face: Vec<f64>,
        head_limb: Vec<f64>,
        global_feat: Vec<f64>,
    ) -> Self {
        let face_present = l2_norm(&face) >= EPS_ZERO;
        Self {
            image_id: image_id.into(),
            person_id,
            camera_id,
            clothes_id,
            face,
            head_limb,
            global_feat,
            face_present,
        }
    }

    pub fn face_present(&self) -> bool {
        self.face_present
    }

    pub fn stream(&self, stream: Stream) -> &[f64] {
        match stream {
            Stream::Face => &self.face,
            Stream::HeadLimb => &self.head_limb,
            Stream::Global => &self.global_feat,
        }
    }

    pub fn view(&self) -> StreamView<'_> {
        StreamView {
            face: &self.face,
            head_limb: &self.head_limb,
            global: &self.global_feat,
            face_present: self.face_present,
        }
    }

    pub fn dims(&self) -> StreamDims {
        StreamDims {
            face: self.face.len(),
            head_limb: self.head_limb.len(),
            global: self.global_feat.len(),
        }
    }

    /// Checks the finiteness and non-absence invariants. `index` is only used
    /// in error messages.
    pub fn validate(&self, index: usize) -> Result<()> {
        for stream in Stream::ALL {
            if self.stream(stream).iter().any(|x| !x.is_finite()) {
                return Err(Error::Value(format!(
                    "record {index} ({}): non-finite value in {} stream",
                    self.image_id,
                    stream.name()
                )));
            }
        }
        for stream in [Stream::HeadLimb, Stream::Global] {
            if l2_norm(self.stream(stream)) < EPS_ZERO {
                return Err(Error::Value(format!(
                    "record {index} ({}): {} stream is the zero vector",
                    self.image_id,
                    stream.name()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub records: Vec<EmbeddingRecord>,
    pub dims: StreamDims,
    pub role: SetRole,
}

impl EmbeddingSet {
    /// Validates every record and the set-level invariants.
    pub fn new(records: Vec<EmbeddingRecord>, dims: StreamDims, role: SetRole) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            if rec.dims() != dims {
                return Err(Error::Dimension(format!(
                    "record {i} ({}) has dims {:?}, set dims are {:?}",
                    rec.image_id,
                    rec.dims(),
                    dims
                )));
            }
            rec.validate(i)?;
            if !seen.insert(rec.image_id.as_str()) {
                return Err(Error::Value(format!(
                    "duplicate image_id {:?} at record {i}",
                    rec.image_id
                )));
            }
        }
        Ok(Self { records, dims, role })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn face_absent_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let absent = self.records.iter().filter(|r| !r.face_present()).count();
        absent as f64 / self.records.len() as f64
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.saturating_mul(4), what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

struct ParseFailure {
    record: usize,
    error: Error,
}

/// Parses the record body. `override_floats` replaces the float count of a
/// single record; it is only used to locate a misaligned record.
fn parse_records(
    cur: &mut Cursor<'_>,
    count: usize,
    dims: StreamDims,
    override_floats: Option<(usize, usize)>,
) -> std::result::Result<Vec<EmbeddingRecord>, ParseFailure> {
    let total = dims.face + dims.head_limb + dims.global;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let fail = |error| ParseFailure { record: i, error };
        let id_len = cur.u16("image_id length").map_err(fail)? as usize;
        let id = cur.take(id_len, "image_id").map_err(fail)?;
        let image_id = String::from_utf8(id.to_vec())
            .map_err(|_| fail(Error::Format(format!("record {i}: image_id is not utf-8"))))?;
        let person_id = cur.u32("person_id").map_err(fail)?;
        let camera_id = cur.u16("camera_id").map_err(fail)?;
        let clothes_id = cur.u32("clothes_id").map_err(fail)?;
        let n = match override_floats {
            Some((k, n)) if k == i => n,
            _ => total,
        };
        let mut values = cur.f32s(n, "stream values").map_err(fail)?;
        if n != total {
            values.resize(total, 0.0);
        }
        let global_feat = values.split_off(dims.face + dims.head_limb);
        let head_limb = values.split_off(dims.face);
        records.push(EmbeddingRecord::new(
            image_id,
            person_id,
            camera_id,
            clothes_id,
            values,
            head_limb,
            global_feat,
        ));
    }
    if cur.pos != cur.bytes.len() {
        return Err(ParseFailure {
            record: count,
            error: Error::Format(format!(
                "{} trailing bytes after {count} records",
                cur.bytes.len() - cur.pos
            )),
        });
    }
    Ok(records)
}

// Upper bound on candidate re-parses when hunting for a misaligned record.
const RESYNC_BUDGET: usize = 200_000;

/// Looks for a single record whose float block length differs from the header
/// dims, such that the rest of the file parses cleanly.
fn locate_misaligned_record(
    bytes: &[u8],
    body_start: usize,
    count: usize,
    dims: StreamDims,
    failed_at: usize,
) -> Option<(usize, usize)> {
    let total = dims.face + dims.head_limb + dims.global;
    let last = failed_at.min(count.saturating_sub(1));
    if (last + 1).saturating_mul(2 * total + 1).saturating_mul(count.max(1)) > RESYNC_BUDGET {
        return None;
    }
    for k in 0..=last {
        for n in (0..=2 * total).filter(|&n| n != total) {
            let mut cur = Cursor { bytes, pos: body_start };
            if parse_records(&mut cur, count, dims, Some((k, n))).is_ok() {
                return Some((k, n));
            }
        }
    }
    None
}

/// Decodes an embedding set from raw bytes.
pub fn decode_embeddings(bytes: &[u8], role: SetRole) -> Result<EmbeddingSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32("record count")? as usize;
    let dims = StreamDims {
        face: cur.u32("D_f")? as usize,
        head_limb: cur.u32("D_l")? as usize,
        global: cur.u32("D_g")? as usize,
    };
    let body_start = cur.pos;
    match parse_records(&mut cur, count, dims, None) {
        Ok(records) => EmbeddingSet::new(records, dims, role),
        Err(ParseFailure { record, error }) => match locate_misaligned_record(bytes, body_start, count, dims, record) {
            Some((k, n)) => Err(Error::Dimension(format!(
                "record {k} holds {n} stream values, header dims {:?} require {}",
                dims,
                dims.face + dims.head_limb + dims.global
            ))),
            None => Err(error),
        },
    }
}

/// Decodes an embedding set from any reader.
pub fn read_embeddings<R: Read>(reader: &mut R, role: SetRole) -> Result<EmbeddingSet> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    decode_embeddings(&bytes, role)
}

/// Encodes an embedding set. Values are narrowed to `f32`.
pub fn write_embeddings<W: Write>(set: &EmbeddingSet, writer: &mut W) -> Result<()> {
    let to_u32 =
        |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")));
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(set.records.len(), "record count")?.to_le_bytes());
    for d in [set.dims.face, set.dims.head_limb, set.dims.global] {
        buf.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
    }
    for rec in &set.records {
        let id = rec.image_id.as_bytes();
        let id_len =
            u16::try_from(id.len()).map_err(|_| Error::Format(format!("image_id {:?} too long", rec.image_id)))?;
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id);
        buf.extend_from_slice(&rec.person_id.to_le_bytes());
        buf.extend_from_slice(&rec.camera_id.to_le_bytes());
        buf.extend_from_slice(&rec.clothes_id.to_le_bytes());
        for stream in Stream::ALL {
            for &x in rec.stream(stream) {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    writer
        .write_all(&buf)
        .map_err(|e| Error::Format(format!("write failed: {e}")))
}

pub fn load_embeddings(path: impl AsRef<Path>, role: SetRole) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(&mut BufReader::new(file), role)
}

pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_embeddings(set, &mut writer)?;
    writer.flush().map_err(|e| Error::io(path, e))
}

fn normalize_in_place(v: &mut [f64]) {
    let n = l2_norm(v);
    if n >= EPS_ZERO {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Scales every present vector to unit L2 norm. Absent faces stay exactly zero.
pub fn l2_normalize_set(set: &EmbeddingSet) -> EmbeddingSet {
    let mut out = set.clone();
    for rec in &mut out.records {
        if rec.face_present {
            normalize_in_place(&mut rec.face);
        }
        normalize_in_place(&mut rec.head_limb);
        normalize_in_place(&mut rec.global_feat);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, face: Vec<f64>, d: usize) -> EmbeddingRecord {
        EmbeddingRecord::new(id, 1, 0, 10, face, vec![1.0; d], vec![0.5; d])
    }

    fn encode(set: &EmbeddingSet) -> Vec<u8> {
        let mut buf = Vec::new();
        write_embeddings(set, &mut buf).unwrap();
        buf
    }

    #[test]
    fn zero_face_flagged_on_load() {
        let set = EmbeddingSet::new(
            vec![rec("a", vec![1.0, 2.0, 3.0, 4.0], 4), rec("b", vec![0.0; 4], 4)],
            StreamDims::uniform(4),
            SetRole::Query,
        )
        .unwrap();
        let loaded = read_embeddings(&mut encode(&set).as_slice(), SetRole::Query).unwrap();
        assert_eq!(loaded.len(), 2);
        assert!(loaded.records[0].face_present());
        assert!(!loaded.records[1].face_present());
    }

    #[test]
    fn empty_body_keeps_header_dims() {
        let dims = StreamDims {
            face: 3,
            head_limb: 5,
            global: 7,
        };
        let set = EmbeddingSet::new(vec![], dims, SetRole::Gallery).unwrap();
        let bytes = encode(&set);
        assert_eq!(bytes.len(), 24);
        let loaded = read_embeddings(&mut bytes.as_slice(), SetRole::Gallery).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(loaded.dims, dims);
    }

    #[test]
    fn corrupt_record_dim_names_index() {
        // Record 3 is written one float short of the header dims.
        let d = 2usize;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&5u32.to_le_bytes());
        for _ in 0..3 {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for i in 0..5u32 {
            let id = format!("img{i}");
            buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            buf.extend_from_slice(&i.to_le_bytes());
            buf.extend_from_slice(&0u16.to_le_bytes());
            buf.extend_from_slice(&i.to_le_bytes());
            let n = if i == 3 { 3 * d - 1 } else { 3 * d };
            for _ in 0..n {
                buf.extend_from_slice(&1.0f32.to_le_bytes());
            }
        }
        match read_embeddings(&mut buf.as_slice(), SetRole::Train).unwrap_err() {
            Error::Dimension(msg) => assert!(msg.starts_with("record 3 "), "{msg}"),
            other => panic!("expected DimensionError, got {other:?}"),
        }

        let mut records: Vec<_> = (0..5).map(|i| rec(&format!("img{i}"), vec![1.0; d], d)).collect();
        records[3].face.pop();
        let err = EmbeddingSet::new(records, StreamDims::uniform(d), SetRole::Train).unwrap_err();
        assert!(matches!(err, Error::Dimension(msg) if msg.contains("record 3")));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let bytes = b"TSDX\x01\0\0\0\0\0\0\0\x01\0\0\0\x01\0\0\0\x01\0\0\0";
        assert!(matches!(
            read_embeddings(&mut bytes.as_slice(), SetRole::Query),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn non_finite_is_value_error() {
        let mut r = rec("x", vec![1.0, 0.0], 2);
        r.global_feat[1] = f64::NAN;
        assert!(matches!(
            EmbeddingSet::new(vec![r], StreamDims::uniform(2), SetRole::Query),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn zero_head_limb_rejected() {
        let mut r = rec("x", vec![1.0, 0.0], 2);
        r.head_limb = vec![0.0, 0.0];
        assert!(matches!(
            EmbeddingSet::new(vec![r], StreamDims::uniform(2), SetRole::Query),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = rec("x", vec![1.0, 0.0], 2);
        assert!(EmbeddingSet::new(vec![a.clone(), a], StreamDims::uniform(2), SetRole::Query).is_err());
    }

    #[test]
    fn normalize_examples() {
        let set = EmbeddingSet::new(
            vec![rec("a", vec![3.0, 4.0], 2), rec("b", vec![0.0, 0.0], 2)],
            StreamDims::uniform(2),
            SetRole::Query,
        )
        .unwrap();
        let n = l2_normalize_set(&set);
        assert!((n.records[0].face[0] - 0.6).abs() < 1e-15);
        assert!((n.records[0].face[1] - 0.8).abs() < 1e-15);
        assert_eq!(n.records[1].face, vec![0.0, 0.0]);
        assert!(!n.records[1].face_present());

        let twice = l2_normalize_set(&n);
        for (a, b) in n.records.iter().zip(&twice.records) {
            for s in Stream::ALL {
                for (x, y) in a.stream(s).iter().zip(b.stream(s)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}

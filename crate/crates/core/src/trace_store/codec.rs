use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Endianness, TraceError, TraceHeader, TraceRecord, Unembedding, FORMAT_VERSION};

pub const TRACE_MAGIC: &[u8; 8] = b"VLTRACE1";
pub const UNEMBEDDING_MAGIC: &[u8; 8] = b"VLUNEMB1";

/// Serializes a trace. Records are checked against the header before any
/// bytes are produced.
pub fn encode_trace(header: &TraceHeader, records: &[TraceRecord]) -> Result<Vec<u8>, TraceError> {
    check_header(header)?;
    if header.num_records != records.len() {
        return Err(TraceError::RecordCount {
            declared: header.num_records,
            actual: records.len(),
        });
    }
    for (index, rec) in records.iter().enumerate() {
        check_record_shape(header, index, rec)?;
    }

    let header_json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(estimate_size(header, records, header_json.len()));
    out.extend_from_slice(TRACE_MAGIC);
    put_len(&mut out, header_json.len());
    out.extend_from_slice(&header_json);
    for rec in records {
        put_len(&mut out, rec.datapoint_id.len());
        out.extend_from_slice(rec.datapoint_id.as_bytes());
        for layer in &rec.hidden_states {
            put_f32s(&mut out, layer);
        }
        put_len(&mut out, rec.generated_token_ids.len());
        for step in &rec.output_logits {
            put_f32s(&mut out, step);
        }
        for &id in &rec.generated_token_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        match rec.correct {
            Some(label) => out.extend_from_slice(&[1, label as u8]),
            None => out.extend_from_slice(&[0, 0]),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn write_trace(header: &TraceHeader, records: &[TraceRecord], path: impl AsRef<Path>) -> Result<(), TraceError> {
    let bytes = encode_trace(header, records)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<(TraceHeader, Vec<TraceRecord>), TraceError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_trace(&bytes)
}

/// Parses a complete trace file image. Never panics on malformed input.
pub fn decode_trace(bytes: &[u8]) -> Result<(TraceHeader, Vec<TraceRecord>), TraceError> {
    let mut cur = Cursor::new(bytes);
    cur.expect_magic(TRACE_MAGIC, "VLTRACE1")?;
    let header: TraceHeader = cur.json_header()?;
    check_header(&header)?;

    let layer_bytes = header.hidden_dim * 4;
    let step_bytes = header.vocab_size * 4;
    // A record needs at least its id length, hidden block, step count and label.
    let min_record = layer_bytes
        .checked_mul(header.num_layers)
        .and_then(|b| b.checked_add(10))
        .ok_or_else(|| TraceError::Header("record size overflows".into()))?;
    let max_possible = cur.remaining() / min_record;
    if header.num_records > max_possible {
        return Err(TraceError::Corrupt {
            offset: bytes.len(),
            detail: format!(
                "header declares {} records but only {} bytes remain",
                header.num_records,
                cur.remaining()
            ),
        });
    }

    let mut records = Vec::with_capacity(header.num_records);
    for _ in 0..header.num_records {
        let id_len = cur.u32()? as usize;
        let id_offset = cur.pos;
        let datapoint_id = String::from_utf8(cur.take(id_len)?.to_vec()).map_err(|_| TraceError::Corrupt {
            offset: id_offset,
            detail: "datapoint id is not valid UTF-8".into(),
        })?;
        let mut hidden_states = Vec::with_capacity(header.num_layers);
        for _ in 0..header.num_layers {
            hidden_states.push(cur.f32s(header.hidden_dim)?);
        }
        let steps = cur.u32()? as usize;
        let needed = steps
            .checked_mul(step_bytes + 4)
            .ok_or_else(|| cur.corrupt("step count overflows"))?;
        cur.ensure(needed)?;
        let mut output_logits = Vec::with_capacity(steps);
        for _ in 0..steps {
            output_logits.push(cur.f32s(header.vocab_size)?);
        }
        let mut generated_token_ids = Vec::with_capacity(steps);
        for _ in 0..steps {
            generated_token_ids.push(cur.u32()?);
        }
        let flag_offset = cur.pos;
        let flag = cur.take(2)?;
        let correct = match (flag[0], flag[1]) {
            (0, 0) => None,
            (1, 0) => Some(false),
            (1, 1) => Some(true),
            (f, l) => {
                return Err(TraceError::Corrupt {
                    offset: flag_offset,
                    detail: format!("invalid label bytes {f} {l}"),
                })
            }
        };
        records.push(TraceRecord {
            datapoint_id,
            hidden_states,
            output_logits,
            generated_token_ids,
            correct,
        });
    }
    cur.finish_with_checksum()?;
    Ok((header, records))
}

#[derive(Serialize, Deserialize)]
struct UnembeddingHeader {
    format_version: u32,
    model_id: String,
    vocab_size: usize,
    hidden_dim: usize,
    endianness: Endianness,
}

/// Unembedding files share the trace framing: magic, JSON header, raw
/// row-major f32 matrix, trailing CRC32.
pub fn encode_unembedding(u: &Unembedding) -> Vec<u8> {
    let header = UnembeddingHeader {
        format_version: FORMAT_VERSION,
        model_id: u.model_id.clone(),
        vocab_size: u.vocab_size(),
        hidden_dim: u.hidden_dim(),
        endianness: Endianness::Little,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + u.as_slice().len() * 4);
    out.extend_from_slice(UNEMBEDDING_MAGIC);
    put_len(&mut out, json.len());
    out.extend_from_slice(&json);
    put_f32s(&mut out, u.as_slice());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_unembedding(bytes: &[u8]) -> Result<Unembedding, TraceError> {
    let mut cur = Cursor::new(bytes);
    cur.expect_magic(UNEMBEDDING_MAGIC, "VLUNEMB1")?;
    let header: UnembeddingHeader = cur.json_header()?;
    if header.format_version != FORMAT_VERSION {
        return Err(TraceError::UnsupportedVersion(header.format_version));
    }
    let count = header
        .vocab_size
        .checked_mul(header.hidden_dim)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| TraceError::Header("unembedding dimensions overflow".into()))?;
    let data = cur.f32s(count)?;
    cur.finish_with_checksum()?;
    Unembedding::new(header.model_id, header.vocab_size, header.hidden_dim, data)
}

pub fn write_unembedding(u: &Unembedding, path: impl AsRef<Path>) -> Result<(), TraceError> {
    write_bytes(path.as_ref(), &encode_unembedding(u))
}

pub fn read_unembedding(path: impl AsRef<Path>) -> Result<Unembedding, TraceError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_unembedding(&bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), TraceError> {
    fs::write(path, bytes).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_header(header: &TraceHeader) -> Result<(), TraceError> {
    if header.format_version != FORMAT_VERSION {
        return Err(TraceError::UnsupportedVersion(header.format_version));
    }
    for (name, v) in [
        ("num_layers", header.num_layers),
        ("hidden_dim", header.hidden_dim),
        ("vocab_size", header.vocab_size),
    ] {
        if v == 0 {
            return Err(TraceError::Header(format!("{name} must be at least 1")));
        }
    }
    if header.vocab_size > u32::MAX as usize + 1 {
        return Err(TraceError::Header("vocab_size exceeds u32 token ids".into()));
    }
    header
        .hidden_dim
        .checked_mul(4)
        .and_then(|b| b.checked_mul(header.num_layers))
        .and(header.vocab_size.checked_mul(4))
        .ok_or_else(|| TraceError::Header("dimensions overflow".into()))?;
    Ok(())
}

fn check_record_shape(header: &TraceHeader, index: usize, rec: &TraceRecord) -> Result<(), TraceError> {
    let fail = |detail: String| TraceError::Dimension {
        index,
        datapoint_id: rec.datapoint_id.clone(),
        detail,
    };
    if rec.datapoint_id.len() > u32::MAX as usize {
        return Err(fail("datapoint id too long".into()));
    }
    if rec.hidden_states.len() != header.num_layers {
        return Err(fail(format!(
            "{} hidden layers, header declares {}",
            rec.hidden_states.len(),
            header.num_layers
        )));
    }
    if let Some((l, v)) = rec
        .hidden_states
        .iter()
        .enumerate()
        .find(|(_, v)| v.len() != header.hidden_dim)
    {
        return Err(fail(format!(
            "layer {} has {} values, header declares hidden_dim {}",
            l + 1,
            v.len(),
            header.hidden_dim
        )));
    }
    if rec.output_logits.len() != rec.generated_token_ids.len() {
        return Err(fail(format!(
            "{} logit steps but {} generated tokens",
            rec.output_logits.len(),
            rec.generated_token_ids.len()
        )));
    }
    if let Some((t, v)) = rec
        .output_logits
        .iter()
        .enumerate()
        .find(|(_, v)| v.len() != header.vocab_size)
    {
        return Err(fail(format!(
            "step {t} has {} logits, header declares vocab_size {}",
            v.len(),
            header.vocab_size
        )));
    }
    if let Some(&id) = rec
        .generated_token_ids
        .iter()
        .find(|&&id| id as usize >= header.vocab_size)
    {
        return Err(fail(format!(
            "token id {id} outside vocabulary of {}",
            header.vocab_size
        )));
    }
    Ok(())
}

fn estimate_size(header: &TraceHeader, records: &[TraceRecord], header_len: usize) -> usize {
    let per_record = header.num_layers * header.hidden_dim * 4 + 16;
    16 + header_len
        + records
            .iter()
            .map(|r| per_record + r.datapoint_id.len() + r.generated_token_ids.len() * (header.vocab_size + 1) * 4)
            .sum::<usize>()
}

fn put_len(out: &mut Vec<u8>, len: usize) {
    out.extend_from_slice(&(len as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn corrupt(&self, detail: impl Into<String>) -> TraceError {
        TraceError::Corrupt {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn ensure(&self, n: usize) -> Result<(), TraceError> {
        if self.remaining() < n {
            Err(self.corrupt(format!("truncated: need {n} bytes, {} available", self.remaining())))
        } else {
            Ok(())
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TraceError> {
        self.ensure(n)?;
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TraceError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, TraceError> {
        let len = n.checked_mul(4).ok_or_else(|| self.corrupt("block size overflows"))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn expect_magic(&mut self, magic: &[u8; 8], name: &'static str) -> Result<(), TraceError> {
        match self.bytes.get(..8) {
            Some(m) if m == magic => {
                self.pos = 8;
                Ok(())
            }
            _ => Err(TraceError::BadMagic { expected: name }),
        }
    }

    fn json_header<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T, TraceError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        // Version is checked before the full shape so that future headers
        // with new fields still report a version error.
        if let Ok(v) = serde_json::from_slice::<serde_json::Value>(raw) {
            if let Some(ver) = v.get("format_version").and_then(|x| x.as_u64()) {
                if ver != FORMAT_VERSION as u64 {
                    return Err(TraceError::UnsupportedVersion(ver.min(u32::MAX as u64) as u32));
                }
            }
        }
        serde_json::from_slice(raw).map_err(|e| TraceError::Header(e.to_string()))
    }

    fn finish_with_checksum(&mut self) -> Result<(), TraceError> {
        let body_end = self.pos;
        let stored = self.u32()?;
        if self.remaining() != 0 {
            return Err(self.corrupt(format!("{} trailing bytes after checksum", self.remaining())));
        }
        let computed = crc32fast::hash(&self.bytes[..body_end]);
        if stored != computed {
            return Err(TraceError::Checksum { stored, computed });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::Setting;
    use super::*;

    fn header(n: usize) -> TraceHeader {
        TraceHeader::new("tiny", Setting::Visual, 2, 3, 5, n)
    }

    fn record() -> TraceRecord {
        TraceRecord {
            datapoint_id: "dp-0".into(),
            hidden_states: vec![vec![0.5, -1.0, 2.25], vec![1e-8, f32::MAX, -0.0]],
            output_logits: vec![vec![0.1, 0.2, 0.3, 0.4, 0.5], vec![1.0; 5]],
            generated_token_ids: vec![4, 0],
            correct: Some(false),
        }
    }

    fn bits(records: &[TraceRecord]) -> Vec<Vec<u32>> {
        records
            .iter()
            .map(|r| {
                r.hidden_states
                    .iter()
                    .chain(&r.output_logits)
                    .flatten()
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn round_trip_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vlt");
        let recs = vec![record()];
        write_trace(&header(1), &recs, &path).unwrap();
        let (h, back) = read_trace(&path).unwrap();
        assert_eq!(h, header(1));
        assert_eq!(back, recs);
        assert_eq!(bits(&back), bits(&recs));
    }

    #[test]
    fn empty_trace_is_valid() {
        let bytes = encode_trace(&header(0), &[]).unwrap();
        let (h, recs) = decode_trace(&bytes).unwrap();
        assert_eq!(h.num_records, 0);
        assert!(recs.is_empty());
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let a = encode_trace(&header(1), &[record()]).unwrap();
        let b = encode_trace(&header(1), &[record()]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layout_matches_documented_framing() {
        let bytes = encode_trace(&header(1), &[record()]).unwrap();
        assert_eq!(&bytes[..8], b"VLTRACE1");
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(json["endianness"], "little");
        assert_eq!(json["setting"], "Visual");
        let mut p = 12 + hlen;
        assert_eq!(u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()), 4);
        p += 4;
        assert_eq!(&bytes[p..p + 4], b"dp-0");
        p += 4;
        assert_eq!(f32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()), 0.5);
        p += 2 * 3 * 4;
        assert_eq!(u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()), 2);
        p += 4 + 2 * 5 * 4;
        assert_eq!(u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()), 4);
        p += 8;
        assert_eq!(&bytes[p..p + 2], &[1, 0]);
        p += 2;
        let crc = u32::from_le_bytes(bytes[p..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&bytes[..p]));
    }

    #[test]
    fn wrong_hidden_dim_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vlt");
        let mut rec = record();
        rec.hidden_states[0] = vec![0.0; 4];
        let err = write_trace(&header(1), &[rec], &path).unwrap_err();
        assert!(matches!(err, TraceError::Dimension { index: 0, .. }), "{err}");
        assert!(!path.exists());
    }

    #[test]
    fn token_out_of_range_rejected() {
        let mut rec = record();
        rec.generated_token_ids[1] = 5;
        assert!(matches!(
            encode_trace(&header(1), &[rec]),
            Err(TraceError::Dimension { .. })
        ));
    }

    #[test]
    fn count_mismatch_rejected() {
        assert!(matches!(
            encode_trace(&header(2), &[record()]),
            Err(TraceError::RecordCount { declared: 2, actual: 1 })
        ));
    }

    #[test]
    fn flipped_magic_is_format_error() {
        let mut bytes = encode_trace(&header(1), &[record()]).unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(decode_trace(&bytes), Err(TraceError::BadMagic { .. })));
    }

    #[test]
    fn unknown_version_is_format_error() {
        let mut h = header(0);
        h.format_version = 9;
        let json = serde_json::to_vec(&h).unwrap();
        let mut bytes = TRACE_MAGIC.to_vec();
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_trace(&bytes), Err(TraceError::UnsupportedVersion(9))));
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = encode_trace(&header(1), &[record()]).unwrap();
        let cut = bytes.len() - 30;
        match decode_trace(&bytes[..cut]) {
            Err(TraceError::Corrupt { offset, .. }) => assert!(offset <= cut),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = encode_trace(&header(1), &[record()]).unwrap();
        for cut in 0..bytes.len() {
            assert!(decode_trace(&bytes[..cut]).is_err(), "prefix {cut} accepted");
        }
    }

    #[test]
    fn bit_flip_in_body_fails_checksum() {
        let mut bytes = encode_trace(&header(1), &[record()]).unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0x01;
        assert!(matches!(decode_trace(&bytes), Err(TraceError::Checksum { .. })));
    }

    #[test]
    fn huge_declared_count_does_not_allocate() {
        let mut h = header(0);
        h.num_records = usize::MAX / 2;
        let json = serde_json::to_vec(&h).unwrap();
        let mut bytes = TRACE_MAGIC.to_vec();
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        assert!(matches!(decode_trace(&bytes), Err(TraceError::Corrupt { .. })));
    }

    #[test]
    fn unembedding_round_trip() {
        let u = Unembedding::new("tiny", 2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.5, 0.0]).unwrap();
        let back = decode_unembedding(&encode_unembedding(&u)).unwrap();
        assert_eq!(back, u);
        let mut bytes = encode_unembedding(&u);
        bytes[3] = b'X';
        assert!(matches!(decode_unembedding(&bytes), Err(TraceError::BadMagic { .. })));
    }
}

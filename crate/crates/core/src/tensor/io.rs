//! Tensor container records: one JSON header line `{"shape":[..],"name":".."}`
//! followed by the raw little-endian f32 payload in row-major order.
//! Checkpoints prefix a sequence of records with a JSON manifest line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    shape: Vec<usize>,
    name: String,
}

pub fn write_record<W: Write>(w: &mut W, name: &str, tensor: &Tensor) -> Result<()> {
    let header = RecordHeader { shape: tensor.shape().to_vec(), name: name.to_string() };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(tensor.numel() * 4);
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_line<R: BufRead>(r: &mut R) -> Result<Option<String>> {
    let mut line = Vec::new();
    let n = r.read_until(b'\n', &mut line)?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        return Err(Error::Data("truncated header line".into()));
    }
    line.pop();
    String::from_utf8(line).map(Some).map_err(|_| Error::Data("header is not UTF-8".into()))
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_record<R: BufRead>(r: &mut R) -> Result<Option<(String, Tensor)>> {
    let Some(line) = read_line(r)? else { return Ok(None) };
    let header: RecordHeader = serde_json::from_str(&line)?;
    let numel: usize = header.shape.iter().product();
    let mut raw = vec![0u8; numel * 4];
    r.read_exact(&mut raw).map_err(|e| Error::Data(format!("record '{}' payload: {e}", header.name)))?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let tensor = Tensor::new(header.shape, data)?;
    Ok(Some((header.name, tensor)))
}

/// Writes a manifest line (any serialisable value that carries the record
/// names) followed by the named records in order.
pub fn write_checkpoint<W: Write, M: Serialize>(w: &mut W, manifest: &M, records: &[(String, &Tensor)]) -> Result<()> {
    serde_json::to_writer(&mut *w, manifest)?;
    w.write_all(b"\n")?;
    for (name, t) in records {
        write_record(w, name, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead, M: for<'de> Deserialize<'de>>(r: &mut R) -> Result<(M, Vec<(String, Tensor)>)> {
    let line = read_line(r)?.ok_or_else(|| Error::Data("empty checkpoint".into()))?;
    let manifest = serde_json::from_str(&line)?;
    let mut records = Vec::new();
    while let Some(rec) = read_record(r)? {
        records.push(rec);
    }
    Ok((manifest, records))
}

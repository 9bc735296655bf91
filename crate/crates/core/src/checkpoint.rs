//! Checkpoint files: a text header followed by raw little-endian `f32` data.
//!
//! ```text
//! PRUNETUNE-CHECKPOINT 1
//! header_len 0000000412
//! vocab_size=16
//! ...
//! tensor embed 16,64 0
//! tensor layers.0.attn_norm 64 4096
//! ...
//! end
//! <payload>
//! ```
//!
//! `header_len` counts every header byte including the `end` line, so the
//! payload starts at that offset. Tensor offsets are relative to the
//! payload start and must be contiguous in manifest order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::hexfloat;
use crate::io::write_atomic;
use crate::model::{ModelConfig, TransformerModel, POSITIONAL_SCHEME};
use crate::tensor::Tensor;

pub const MAGIC: &str = "PRUNETUNE-CHECKPOINT";
pub const VERSION: u32 = 1;
const LEN_DIGITS: usize = 10;

/// Manifest entry for one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: usize,
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn header_body(model: &TransformerModel) -> (String, Vec<TensorEntry>) {
    let c = &model.config;
    let mut body = String::new();
    body.push_str(&format!("vocab_size={}\n", c.vocab_size));
    body.push_str(&format!("d_model={}\n", c.d_model));
    body.push_str(&format!("n_heads={}\n", c.n_heads));
    body.push_str(&format!("max_seq_len={}\n", c.max_seq_len));
    body.push_str(&format!("ffn_widths={}\n", join(&c.ffn_widths)));
    body.push_str(&format!("rope_base={}\n", hexfloat::format(c.rope_base)));
    body.push_str(&format!("norm_eps={}\n", hexfloat::format(c.norm_eps)));
    body.push_str(&format!("positional={POSITIONAL_SCHEME}\n"));
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in model.named_tensors() {
        body.push_str(&format!("tensor {name} {} {offset}\n", join(t.shape())));
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel();
    }
    body.push_str("end\n");
    (body, entries)
}

pub fn encode_checkpoint(model: &TransformerModel) -> Vec<u8> {
    let (body, _) = header_body(model);
    let first = format!("{MAGIC} {VERSION}\n");
    let len = first.len() + "header_len \n".len() + LEN_DIGITS + body.len();
    let mut out = format!("{first}header_len {len:0LEN_DIGITS$}\n{body}").into_bytes();
    for (_, t) in model.named_tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &TransformerModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

/// Parsed header: model config, tensor manifest, and payload start.
pub fn read_header(bytes: &[u8]) -> Result<(ModelConfig, Vec<TensorEntry>, usize)> {
    let first_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed("missing magic line"))?;
    let first = std::str::from_utf8(&bytes[..first_end]).map_err(|_| malformed("magic line is not UTF-8"))?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| malformed("not a checkpoint file"))?
        .parse::<u32>()
        .map_err(|_| malformed("unreadable version"))?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let len_line_start = first_end + 1;
    let len_line_end = len_line_start + "header_len ".len() + LEN_DIGITS;
    if bytes.len() <= len_line_end {
        return Err(malformed("missing header_len"));
    }
    let len_line = std::str::from_utf8(&bytes[len_line_start..len_line_end]).map_err(|_| malformed("header_len"))?;
    let header_len: usize = len_line
        .strip_prefix("header_len ")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| malformed(format!("bad header_len line `{len_line}`")))?;
    if bytes[len_line_end] != b'\n' || header_len > bytes.len() || header_len <= len_line_end {
        return Err(malformed("header_len out of range"));
    }
    let body = std::str::from_utf8(&bytes[len_line_end + 1..header_len]).map_err(|_| malformed("header is not UTF-8"))?;
    if !body.ends_with("end\n") {
        return Err(malformed("header does not end with `end`"));
    }

    let mut cfg = ModelConfig::new(0, 0, 0, 0, vec![]);
    let mut seen = std::collections::BTreeSet::new();
    let mut entries = Vec::new();
    for line in body.lines() {
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let [name, shape, offset] = parts.as_slice() else {
                return Err(malformed(format!("bad tensor line `{line}`")));
            };
            let shape = shape
                .split(',')
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| malformed(format!("bad shape in `{line}`")))?;
            let offset = offset.parse().map_err(|_| malformed(format!("bad offset in `{line}`")))?;
            entries.push(TensorEntry {
                name: name.to_string(),
                shape,
                offset,
            });
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| malformed(format!("bad line `{line}`")))?;
        let int = || value.parse::<usize>().map_err(|_| malformed(format!("bad value for {key}")));
        match key {
            "vocab_size" => cfg.vocab_size = int()?,
            "d_model" => cfg.d_model = int()?,
            "n_heads" => cfg.n_heads = int()?,
            "max_seq_len" => cfg.max_seq_len = int()?,
            "ffn_widths" => {
                cfg.ffn_widths = if value.is_empty() {
                    vec![]
                } else {
                    value
                        .split(',')
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| malformed("bad ffn_widths"))?
                }
            }
            "rope_base" => cfg.rope_base = hexfloat::parse(value).map_err(|_| malformed("bad rope_base"))?,
            "norm_eps" => cfg.norm_eps = hexfloat::parse(value).map_err(|_| malformed("bad norm_eps"))?,
            "positional" if value == POSITIONAL_SCHEME => {}
            "positional" => return Err(malformed(format!("unsupported positional scheme `{value}`"))),
            _ => return Err(malformed(format!("unknown key `{key}`"))),
        }
        seen.insert(key.to_string());
    }
    for key in ["vocab_size", "d_model", "n_heads", "max_seq_len", "ffn_widths", "rope_base", "norm_eps"] {
        if !seen.contains(key) {
            return Err(malformed(format!("missing key `{key}`")));
        }
    }
    Ok((cfg, entries, header_len))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TransformerModel> {
    let (cfg, entries, start) = read_header(bytes)?;
    let mut expected_offset = 0;
    for e in &entries {
        if e.offset != expected_offset {
            return Err(Error::CheckpointInvariant(format!(
                "tensor {} at offset {}, expected {expected_offset}",
                e.name, e.offset
            )));
        }
        expected_offset += 4 * e.shape.iter().product::<usize>();
    }
    let payload = &bytes[start..];
    if payload.len() < expected_offset {
        return Err(Error::TruncatedPayload {
            expected: expected_offset,
            found: payload.len(),
        });
    }
    if payload.len() > expected_offset {
        return Err(malformed(format!(
            "{} trailing bytes after payload",
            payload.len() - expected_offset
        )));
    }
    cfg.validate().map_err(|e| Error::CheckpointInvariant(e.to_string()))?;
    let mut model = TransformerModel::init(0, cfg).map_err(|e| Error::CheckpointInvariant(e.to_string()))?;
    let slots = model.named_tensors_mut();
    if slots.len() != entries.len() {
        return Err(Error::CheckpointInvariant(format!(
            "manifest lists {} tensors, config implies {}",
            entries.len(),
            slots.len()
        )));
    }
    for ((name, slot), e) in slots.into_iter().zip(&entries) {
        if name != e.name || slot.shape() != e.shape.as_slice() {
            return Err(Error::CheckpointInvariant(format!(
                "manifest entry {} {:?} does not match expected {name} {:?}",
                e.name,
                e.shape,
                slot.shape()
            )));
        }
        let n = slot.numel();
        let data = payload[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *slot = Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::CheckpointInvariant(format!("tensor {}: {err}", e.name)))?;
    }
    model.validate().map_err(|e| Error::CheckpointInvariant(e.to_string()))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TransformerModel {
        TransformerModel::init(4, ModelConfig::new(16, 8, 2, 12, vec![10, 7])).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let back = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
        assert!(back.bit_eq(&m));
        assert_eq!(back.tensor_hashes(), m.tensor_hashes());
        let empty = TransformerModel::init(1, ModelConfig::new(16, 4, 1, 8, vec![])).unwrap();
        assert!(decode_checkpoint(&encode_checkpoint(&empty)).unwrap().bit_eq(&empty));
    }

    #[test]
    fn header_len_marks_payload_start() {
        let m = model();
        let bytes = encode_checkpoint(&m);
        let (_, entries, start) = read_header(&bytes).unwrap();
        assert_eq!(&bytes[start - 4..start], b"end\n");
        assert_eq!(bytes.len() - start, 4 * m.num_params());
        assert_eq!(entries.len(), m.named_tensors().len());
    }

    #[test]
    fn corruption_gives_distinct_errors() {
        let bytes = encode_checkpoint(&model());
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_checkpoint(short), Err(Error::TruncatedPayload { .. })));
        let mut v2 = bytes.clone();
        let pos = MAGIC.len() + 1;
        v2[pos] = b'2';
        assert!(matches!(
            decode_checkpoint(&v2),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
        assert!(matches!(decode_checkpoint(b"hello\n"), Err(Error::MalformedHeader(_))));
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_checkpoint(&nan), Err(Error::CheckpointInvariant(_))));
        let mut widened = bytes.clone();
        let at = bytes.windows(15).position(|w| w == b"ffn_widths=10,7").unwrap();
        widened[at + 14] = b'8';
        assert!(matches!(decode_checkpoint(&widened), Err(Error::CheckpointInvariant(_))));
    }

    #[test]
    fn save_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        assert!(load_checkpoint(&path).unwrap().bit_eq(&m));
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}

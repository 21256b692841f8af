//! Checkpoint container: a tar archive holding `manifest.json` followed by
//! one `tensors/<name>.bin` blob per parameter, in parameter order.
//!
//! Blob layout: `u32` rank, `rank` x `u32` dims, then the elements as
//! little-endian `f32`, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamSet;
use crate::tensor::Tensor;

const MANIFEST: &str = "manifest.json";
const TENSOR_DIR: &str = "tensors/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub params: ParamSet,
}

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>, CheckpointError> {
    let word = |i: usize| -> Result<[u8; 4], CheckpointError> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|s| s.try_into().unwrap())
            .ok_or_else(|| CheckpointError::Malformed("truncated tensor blob".into()))
    };
    let rank = u32::from_le_bytes(word(0)?) as usize;
    let shape = (0..rank).map(|i| word(1 + i).map(|w| u32::from_le_bytes(w) as usize)).collect::<Result<Vec<_>, _>>()?;
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * (1 + rank + n) {
        return Err(CheckpointError::Malformed(format!("tensor blob of {} bytes for shape {shape:?}", bytes.len())));
    }
    let data = bytes[4 * (1 + rank)..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::from_vec(&shape, data))
}

fn append(builder: &mut tar::Builder<impl Write>, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_cksum();
    builder.append_data(&mut header, name, bytes)
}

/// Serializes to bytes; identical inputs give identical bytes.
pub fn to_bytes(manifest: &serde_json::Value, params: &ParamSet) -> Result<Vec<u8>, CheckpointError> {
    let mut builder = tar::Builder::new(Vec::new());
    append(&mut builder, MANIFEST, &serde_json::to_vec_pretty(manifest)?)?;
    for (name, t) in params.iter() {
        append(&mut builder, &format!("{TENSOR_DIR}{name}.bin"), &encode_tensor(t))?;
    }
    Ok(builder.into_inner()?)
}

pub fn from_reader(reader: impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut archive = tar::Archive::new(reader);
    let mut manifest = None;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.to_string_lossy().into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes)?;
        if path == MANIFEST {
            manifest = Some(serde_json::from_slice(&bytes)?);
        } else if let Some(name) = path.strip_prefix(TENSOR_DIR).and_then(|p| p.strip_suffix(".bin")) {
            names.push(name.to_string());
            tensors.push(decode_tensor(&bytes)?);
        } else {
            return Err(CheckpointError::Malformed(format!("unexpected entry {path}")));
        }
    }
    let manifest = manifest.ok_or_else(|| CheckpointError::Malformed("missing manifest.json".into()))?;
    Ok(Checkpoint { manifest, params: ParamSet::from_parts(names, tensors) })
}

pub fn save(path: impl AsRef<Path>, manifest: &serde_json::Value, params: &ParamSet) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&to_bytes(manifest, params)?)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    from_reader(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn round_trip_preserves_names_order_and_bits() {
        let mut p = ParamSet::new();
        p.add("enc.w", &[2, 1, 3, 3], Init::Normal(1.0), 3);
        p.add("enc.b", &[2], Init::Zeros, 3);
        p.add("scalar", &[1], Init::Ones, 3);
        let manifest = serde_json::json!({"arch": "test", "seed": 3});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &manifest, &p).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.manifest, manifest);
        assert_eq!(back.params, p);
        assert_eq!(to_bytes(&manifest, &p).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let t = Tensor::from_vec(&[3], vec![1.0f32, 2.0, 3.0]);
        let mut b = encode_tensor(&t);
        b.pop();
        assert!(decode_tensor(&b).is_err());
    }
}

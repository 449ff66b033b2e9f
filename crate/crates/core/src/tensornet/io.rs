//! Model file: `RENAS1\n`, a little-endian `u32` header length, a JSON
//! header, the parameters as little-endian `f64`, and a SHA-256 trailer over
//! everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{NetError, PredictorArch, PredictorModel};
use crate::encoder::{Encoder, NormScaler};

pub const MAGIC: &[u8] = b"RENAS1\n";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    arch: PredictorArch,
    encoder: Encoder,
    scaler: NormScaler,
    seed: u64,
    param_count: usize,
}

pub(crate) fn to_bytes(model: &PredictorModel) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        arch: model.arch.clone(),
        encoder: model.encoder,
        scaler: model.scaler,
        seed: model.seed,
        param_count: model.params.len(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + 8 * model.params.len() + CHECKSUM_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<PredictorModel, NetError> {
    let corrupt = |msg: &str| NetError::CorruptFile(msg.to_string());
    if bytes.len() < MAGIC.len() {
        return Err(corrupt("file shorter than the magic string"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        if bytes.starts_with(b"RENAS") {
            return Err(NetError::VersionMismatch(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(&bytes[..MAGIC.len()])
            )));
        }
        return Err(corrupt("bad magic string"));
    }
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(corrupt("file truncated"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(corrupt("checksum mismatch"));
    }
    let mut pos = MAGIC.len();
    let header_len = u32::from_le_bytes(body[pos..pos + 4].try_into().expect("4 bytes")) as usize;
    pos += 4;
    let header_bytes = body.get(pos..pos + header_len).ok_or_else(|| corrupt("header truncated"))?;
    pos += header_len;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| NetError::CorruptFile(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(NetError::VersionMismatch(format!(
            "file has format version {}, expected {FORMAT_VERSION}",
            header.format_version
        )));
    }
    let weights = &body[pos..];
    if weights.len() != 8 * header.param_count {
        return Err(corrupt("parameter block has the wrong length"));
    }
    let params = weights.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    PredictorModel::from_parts(header.arch, header.encoder, header.scaler, header.seed, params)
}

pub fn save(model: &PredictorModel, path: impl AsRef<Path>) -> Result<(), NetError> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<PredictorModel, NetError> {
    from_bytes(&fs::read(path)?)
}

//! Checkpoint format: a magic line, a one-line JSON header, then the row-major
//! little-endian `f64` weights of `W_img` followed by `W_txt`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::EncoderParams;
use super::train::LossMode;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAGIC: &[u8] = b"OFFCLIP-CKPT 1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub d_img: usize,
    pub d_txt: usize,
    pub d_embed: usize,
    pub temperature: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
}

pub fn encode_checkpoint(params: &EncoderParams, seed: u64, loss_mode: LossMode) -> Vec<u8> {
    let header = CheckpointHeader {
        d_img: params.d_img(),
        d_txt: params.d_txt(),
        d_embed: params.d_embed(),
        temperature: params.temperature,
        seed,
        loss_mode,
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    for v in params.w_img.as_slice().iter().chain(params.w_txt.as_slice()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, EncoderParams)> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::invalid("not a checkpoint file (bad magic)"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::invalid("checkpoint header is not terminated"))?;
    let header: CheckpointHeader = serde_json::from_slice(&rest[..nl])?;
    let body = &rest[nl + 1..];
    let n_img = header.d_embed * header.d_img;
    let n_txt = header.d_embed * header.d_txt;
    if body.len() != 8 * (n_img + n_txt) {
        return Err(Error::invalid(format!(
            "checkpoint body has {} bytes, header implies {}",
            body.len(),
            8 * (n_img + n_txt)
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect();
    let w_img = Matrix::from_vec(header.d_embed, header.d_img, values[..n_img].to_vec())?;
    let w_txt = Matrix::from_vec(header.d_embed, header.d_txt, values[n_img..].to_vec())?;
    let params = EncoderParams::new(w_img, w_txt, header.temperature)?;
    Ok((header, params))
}

pub fn write_checkpoint(path: &Path, params: &EncoderParams, seed: u64, loss_mode: LossMode) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, seed, loss_mode)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, EncoderParams)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

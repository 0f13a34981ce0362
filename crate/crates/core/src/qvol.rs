//! QVOL binary container.
//!
//! Layout (little-endian):
//!
//! | bytes        | content                                  |
//! |--------------|------------------------------------------|
//! | `0..4`       | magic `QVM1`                             |
//! | `4..8`       | `u32` header length `H`                  |
//! | `8..8+H`     | UTF-8 JSON header                        |
//! | `8+H..`      | raw payload                              |
//!
//! Volume payloads are stored in the element order of [`crate::volume`].
//! A `param` payload is the S0 volume followed by the R2* volume. Other
//! crates reuse the framing for their own kinds through
//! [`write_container`] / [`read_container`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, EchoStack, FMap, Mask, ParamMap, Volume};

pub const MAGIC: &[u8; 4] = b"QVM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QvolHeader {
    pub kind: String,
    pub dims: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_echoes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_times_ms: Option<Vec<f64>>,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_factor: Option<f64>,
}

impl QvolHeader {
    pub fn dims(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
    }

    /// Payload size in bytes implied by the header.
    pub fn payload_len(&self) -> Result<usize> {
        let vox = self.dims().voxels();
        Ok(match self.kind.as_str() {
            "mgre" | "fmap" => {
                let n = self
                    .n_echoes
                    .ok_or_else(|| Error::Header(format!("{} header missing n_echoes", self.kind)))?;
                vox * n * 4
            }
            "param" => vox * 2 * 4,
            "mask" => vox,
            other => return Err(Error::UnknownKind(other.to_string())),
        })
    }
}

/// Write magic, header and payload to `path`.
pub fn write_container<H: Serialize>(path: &Path, header: &H, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let hlen = u32::try_from(json.len()).map_err(|_| Error::Header("header too large".into()))?;
    let mut bytes = Vec::with_capacity(8 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&hlen.to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a container, returning the raw JSON header and payload bytes.
pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    split_container(&bytes)
}

fn split_container(bytes: &[u8]) -> Result<(serde_json::Value, Vec<u8>)> {
    if bytes.len() < 8 {
        let mut m = [0u8; 4];
        let n = bytes.len().min(4);
        m[..n].copy_from_slice(&bytes[..n]);
        if &m != MAGIC {
            return Err(Error::BadMagic(m));
        }
        return Err(Error::Header("file shorter than fixed preamble".into()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let hend = 8usize
        .checked_add(hlen)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| Error::Header("header length exceeds file size".into()))?;
    let header: serde_json::Value =
        serde_json::from_slice(&bytes[8..hend]).map_err(|e| Error::Header(e.to_string()))?;
    Ok((header, bytes[hend..].to_vec()))
}

fn f32_bytes(values: &[f32], out: &mut Vec<u8>) -> Result<()> {
    out.reserve(values.len() * 4);
    for v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn bytes_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Header and payload for a volume, without touching the filesystem.
pub fn encode(volume: &Volume, norm_factor: Option<f64>) -> Result<(QvolHeader, Vec<u8>)> {
    let dims = volume.dims().as_array();
    let mut payload = Vec::new();
    let header = match volume {
        Volume::Mgre(st) => {
            f32_bytes(st.data(), &mut payload)?;
            QvolHeader {
                kind: "mgre".into(),
                dims,
                n_echoes: Some(st.n_echoes()),
                echo_times_ms: Some(st.echo_times_ms().to_vec()),
                dtype: "f32".into(),
                norm_factor,
            }
        }
        Volume::Fmap(f) => {
            f32_bytes(f.values(), &mut payload)?;
            QvolHeader {
                kind: "fmap".into(),
                dims,
                n_echoes: Some(f.n_echoes()),
                echo_times_ms: Some(f.echo_times_ms().to_vec()),
                dtype: "f32".into(),
                norm_factor,
            }
        }
        Volume::Param(p) => {
            f32_bytes(p.s0(), &mut payload)?;
            f32_bytes(p.r2star(), &mut payload)?;
            QvolHeader {
                kind: "param".into(),
                dims,
                n_echoes: None,
                echo_times_ms: None,
                dtype: "f32".into(),
                norm_factor,
            }
        }
        Volume::Mask(m) => {
            payload.extend(m.values().iter().map(|v| *v as u8));
            QvolHeader {
                kind: "mask".into(),
                dims,
                n_echoes: None,
                echo_times_ms: None,
                dtype: "u8".into(),
                norm_factor,
            }
        }
    };
    Ok((header, payload))
}

/// Inverse of [`encode`]. Invariants of the typed volume are checked.
pub fn decode(header: &QvolHeader, payload: &[u8]) -> Result<Volume> {
    let expected = header.payload_len()?;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    let expected_dtype = if header.kind == "mask" { "u8" } else { "f32" };
    if header.dtype != expected_dtype {
        return Err(Error::Header(format!(
            "kind {} requires dtype {expected_dtype}, found {}",
            header.kind, header.dtype
        )));
    }
    let dims = header.dims();
    let times = || {
        let t = header
            .echo_times_ms
            .clone()
            .ok_or_else(|| Error::Header("missing echo_times_ms".into()))?;
        if Some(t.len()) != header.n_echoes {
            return Err(Error::Header("n_echoes disagrees with echo_times_ms".into()));
        }
        Ok(t)
    };
    Ok(match header.kind.as_str() {
        "mgre" => Volume::Mgre(EchoStack::new(dims, times()?, bytes_f32(payload))?),
        "fmap" => Volume::Fmap(FMap::new(dims, times()?, bytes_f32(payload))?),
        "param" => {
            let values = bytes_f32(payload);
            let (s0, r2) = values.split_at(dims.voxels());
            // The container has no mask plane: any non-sentinel voxel is in-mask.
            let mask = Mask::new(
                dims,
                s0.iter().zip(r2).map(|(a, b)| *a != 0.0 || *b != 0.0).collect(),
            )?;
            Volume::Param(ParamMap::new(s0.to_vec(), r2.to_vec(), mask)?)
        }
        "mask" => {
            if payload.iter().any(|b| *b > 1) {
                return Err(Error::Invariant("mask bytes must be 0 or 1".into()));
            }
            Volume::Mask(Mask::new(dims, payload.iter().map(|b| *b == 1).collect())?)
        }
        other => return Err(Error::UnknownKind(other.to_string())),
    })
}

pub fn write_qvol(path: &Path, volume: &Volume) -> Result<()> {
    write_qvol_with_norm(path, volume, None)
}

pub fn write_qvol_with_norm(path: &Path, volume: &Volume, norm_factor: Option<f64>) -> Result<()> {
    if let Some(f) = norm_factor {
        if !(f.is_finite() && f > 0.0) {
            return Err(Error::Invariant("norm_factor must be finite and > 0".into()));
        }
    }
    let (header, payload) = encode(volume, norm_factor)?;
    write_container(path, &header, &payload)
}

pub fn read_qvol(path: &Path) -> Result<Volume> {
    Ok(read_qvol_with_header(path)?.0)
}

pub fn read_qvol_with_header(path: &Path) -> Result<(Volume, QvolHeader)> {
    let (raw, payload) = read_container(path)?;
    let header: QvolHeader = serde_json::from_value(raw).map_err(|e| Error::Header(e.to_string()))?;
    let vol = decode(&header, &payload)?;
    Ok((vol, header))
}

fn wrong_kind(path: &Path, want: &str, got: &Volume) -> Error {
    Error::Header(format!("{}: expected kind {want}, found {}", path.display(), got.kind()))
}

pub fn read_mgre(path: &Path) -> Result<EchoStack> {
    match read_qvol(path)? {
        Volume::Mgre(v) => Ok(v),
        other => Err(wrong_kind(path, "mgre", &other)),
    }
}

pub fn read_fmap(path: &Path) -> Result<FMap> {
    match read_qvol(path)? {
        Volume::Fmap(v) => Ok(v),
        other => Err(wrong_kind(path, "fmap", &other)),
    }
}

pub fn read_param(path: &Path) -> Result<ParamMap> {
    match read_qvol(path)? {
        Volume::Param(v) => Ok(v),
        other => Err(wrong_kind(path, "param", &other)),
    }
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    match read_qvol(path)? {
        Volume::Mask(v) => Ok(v),
        other => Err(wrong_kind(path, "mask", &other)),
    }
}

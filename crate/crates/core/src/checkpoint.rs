//! Model checkpoints: the voxel field plus the settings needed to render it.
//!
//! Binary layout (little endian):
//! `SLCK` magic, u32 version, u64 header length, JSON header, density values
//! as f64, color values as f64, then a CRC-32 of everything before it.
//! Files ending in `.json` hold the same content as a single JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VoxelField;
use crate::geometry::Aabb;
use crate::render::{RendererKind, SurfaceParams};

const MAGIC: &[u8; 4] = b"SLCK";
const VERSION: u32 = 1;

/// How a checkpoint is rendered.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSettings {
    pub renderer: RendererKind,
    pub surface: SurfaceParams,
    pub coarse_samples: usize,
    pub fine_samples: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            renderer: RendererKind::SingleSurface,
            surface: SurfaceParams::default(),
            coarse_samples: 64,
            fine_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub field: VoxelField,
    pub settings: RenderSettings,
    /// Training iteration the parameters come from.
    pub iteration: usize,
    /// Validation PSNR measured at that iteration, if any.
    pub val_psnr: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    settings: RenderSettings,
    iteration: usize,
    val_psnr: Option<f64>,
    resolution: [usize; 3],
    bounds: Aabb,
    medium_color: [f64; 3],
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            settings: self.settings,
            iteration: self.iteration,
            val_psnr: self.val_psnr,
            resolution: self.field.resolution,
            bounds: self.field.bounds,
            medium_color: self.field.medium_color,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * (self.field.density.len() + self.field.color.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.field.density.iter().chain(&self.field.color) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let corrupt = |detail: String| Error::Corrupt {
            path: path.into(),
            detail,
        };
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&body[16..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let n = header.resolution.iter().product::<usize>();
        let values = &body[header_end..];
        if values.len() != 8 * 4 * n {
            return Err(corrupt(format!("expected {} parameter bytes, found {}", 32 * n, values.len())));
        }
        let floats: Vec<f64> = values
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut field = VoxelField::new(header.resolution, header.bounds).map_err(|e| corrupt(e.to_string()))?;
        field.density.copy_from_slice(&floats[..n]);
        field.color.copy_from_slice(&floats[n..]);
        field.medium_color = header.medium_color;
        Ok(Checkpoint {
            field,
            settings: header.settings,
            iteration: header.iteration,
            val_psnr: header.val_psnr,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if is_json(path) {
            serde_json::to_vec_pretty(self).expect("checkpoint serializes")
        } else {
            self.to_bytes()
        };
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::MissingInput {
            path: path.into(),
            detail: e.to_string(),
        })?;
        if is_json(path) {
            let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
                path: path.into(),
                detail: e.to_string(),
            })?;
            let n = ck.field.resolution.iter().product::<usize>();
            if ck.field.density.len() != n || ck.field.color.len() != 3 * n {
                return Err(Error::Corrupt {
                    path: path.into(),
                    detail: "parameter arrays do not match the resolution".into(),
                });
            }
            return Ok(ck);
        }
        Checkpoint::from_bytes(&bytes, path)
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

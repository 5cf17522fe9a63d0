//! Binary field checkpoints: a versioned header ("AVBF"), layer shape
//! table, and raw little-endian f32 weights, so parameters round-trip
//! bit-exactly.

use std::path::Path;

use super::{FieldConfig, FieldError, FieldParams};
use crate::field::encoding::PosEncoding;
use crate::field::mlp::{Activation, Mlp};

const MAGIC: &[u8; 4] = b"AVBF";
const VERSION: u32 = 1;

/// Serializes the field to `path`.
pub fn save_field(params: &FieldParams, path: &Path) -> Result<(), FieldError> {
    let bytes = encode_field(params);
    std::fs::write(path, bytes).map_err(|source| FieldError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a field previously written by [`save_field`].
pub fn load_field(path: &Path) -> Result<FieldParams, FieldError> {
    let bytes = std::fs::read(path).map_err(|source| FieldError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_field(&bytes)
}

/// The checkpoint body as bytes (also embedded in run checkpoints).
pub(crate) fn encode_field(params: &FieldParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&params.config.bound.to_le_bytes());
    out.extend_from_slice(&params.config.logistic_scale_init.to_le_bytes());
    out.extend_from_slice(&params.config.softplus_beta.to_le_bytes());
    out.extend_from_slice(&params.config.point_octaves.to_le_bytes());
    out.extend_from_slice(&params.config.view_octaves.to_le_bytes());
    out.extend_from_slice(&params.logistic_scale.to_le_bytes());
    for mlp in [&params.sdf_mlp, &params.color_mlp] {
        out.extend_from_slice(&(mlp.layers.len() as u32).to_le_bytes());
        for layer in &mlp.layers {
            out.extend_from_slice(&(layer.in_dim as u32).to_le_bytes());
            out.extend_from_slice(&(layer.out_dim as u32).to_le_bytes());
        }
    }
    for mlp in [&params.sdf_mlp, &params.color_mlp] {
        for layer in &mlp.layers {
            for w in &layer.w {
                out.extend_from_slice(&w.to_le_bytes());
            }
            for b in &layer.b {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FieldError> {
        if self.pos + n > self.bytes.len() {
            return Err(FieldError::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FieldError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, FieldError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes back into parameters.
pub(crate) fn decode_field(bytes: &[u8]) -> Result<FieldParams, FieldError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(FieldError::Checkpoint(
            "bad magic: not a field checkpoint".into(),
        ));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(FieldError::Checkpoint(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let bound = cur.f32()?;
    let logistic_scale_init = cur.f32()?;
    let softplus_beta = cur.f32()?;
    let point_octaves = cur.u32()?;
    let view_octaves = cur.u32()?;
    let logistic_scale = cur.f32()?;

    let mut shapes: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
    for shape in shapes.iter_mut() {
        let n_layers = cur.u32()? as usize;
        if !(2..=64).contains(&n_layers) {
            return Err(FieldError::Checkpoint(format!(
                "implausible layer count {n_layers}"
            )));
        }
        for _ in 0..n_layers {
            let in_dim = cur.u32()? as usize;
            let out_dim = cur.u32()? as usize;
            if in_dim == 0 || out_dim == 0 || in_dim > 1 << 20 || out_dim > 1 << 20 {
                return Err(FieldError::Checkpoint(format!(
                    "implausible layer shape {in_dim}x{out_dim}"
                )));
            }
            shape.push((in_dim, out_dim));
        }
    }

    let pos_enc = PosEncoding::new(point_octaves);
    let view_enc = PosEncoding::new(view_octaves);
    if shapes[0][0].0 != pos_enc.dim() {
        return Err(FieldError::Checkpoint(format!(
            "distance net input {} does not match {} encoding channels",
            shapes[0][0].0,
            pos_enc.dim()
        )));
    }
    if shapes[1][0].0 != pos_enc.dim() + view_enc.dim() {
        return Err(FieldError::Checkpoint(format!(
            "color net input {} does not match {} encoding channels",
            shapes[1][0].0,
            pos_enc.dim() + view_enc.dim()
        )));
    }
    if shapes[0].last().unwrap().1 != 1 || shapes[1].last().unwrap().1 != 3 {
        return Err(FieldError::Checkpoint("wrong head widths".into()));
    }
    for shape in &shapes {
        for pair in shape.windows(2) {
            if pair[0].1 != pair[1].0 {
                return Err(FieldError::Checkpoint(format!(
                    "layer shapes do not chain: {:?} then {:?}",
                    pair[0], pair[1]
                )));
            }
        }
    }

    let config = FieldConfig {
        hidden_dim: shapes[0][0].1,
        sdf_hidden_layers: shapes[0].len() - 1,
        color_hidden_layers: shapes[1].len() - 1,
        point_octaves,
        view_octaves,
        bound,
        logistic_scale_init,
        softplus_beta,
    };
    let act = Activation::Softplus {
        beta: softplus_beta,
    };
    let dims = |shape: &[(usize, usize)]| -> Vec<usize> {
        let mut d = vec![shape[0].0];
        d.extend(shape.iter().map(|&(_, o)| o));
        d
    };
    let mut sdf_mlp = Mlp::zeros(&dims(&shapes[0]), act, Activation::Linear);
    let mut color_mlp = Mlp::zeros(&dims(&shapes[1]), act, Activation::Sigmoid);
    for mlp in [&mut sdf_mlp, &mut color_mlp] {
        for layer in mlp.layers.iter_mut() {
            for w in layer.w.iter_mut() {
                *w = cur.f32()?;
            }
            for b in layer.b.iter_mut() {
                *b = cur.f32()?;
            }
        }
    }
    if cur.pos != bytes.len() {
        return Err(FieldError::Checkpoint(format!(
            "{} trailing bytes after weights",
            bytes.len() - cur.pos
        )));
    }

    Ok(FieldParams {
        config,
        sdf_mlp,
        color_mlp,
        logistic_scale,
        pos_enc,
        view_enc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> FieldParams {
        FieldParams::geometric_init(
            &FieldConfig {
                hidden_dim: 24,
                ..Default::default()
            },
            0.9,
            13,
        )
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let mut params = sample_params();
        params.logistic_scale = 41.5;
        let dir = std::env::temp_dir().join("avatarforge_field_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("field.bin");
        save_field(&params, &path).unwrap();
        let back = load_field(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(back.flatten(), params.flatten());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode_field(&sample_params());
        bytes[0] = b'X';
        let err = decode_field(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn future_version_is_rejected_with_the_version() {
        let mut bytes = encode_field(&sample_params());
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        let err = decode_field(&bytes).unwrap_err();
        assert!(err.to_string().contains('9'));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode_field(&sample_params());
        let err = decode_field(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }
}

//! Versioned, checksummed run checkpoints: everything needed to continue
//! an interrupted optimization bit-identically — field weights, optimizer
//! moments, step counters, the random-generator state, the resolution
//! ladder, and the recent diagnostics window. The whole payload is
//! guarded by a SHA-256 checksum so corruption is caught before any
//! field is parsed.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::{decode_field, encode_field, FieldParams};
use crate::guidance::StepDiagnostic;
use crate::hash::sha256;
use crate::optim::Adam;
use crate::schedule::ResolutionLadder;

use super::PipelineError;

const MAGIC: &[u8; 4] = b"AVRC";
const VERSION: u32 = 1;

/// Serializable snapshot of a seeded ChaCha generator: key, stream, and
/// position. Restoring produces a generator that continues the exact
/// draw sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        let word_pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (word_pos >> 64) as u64,
            word_pos_lo: word_pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// One saved training state.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCheckpoint {
    /// Completed optimization steps.
    pub step: u64,
    pub face_steps: u64,
    pub body_steps: u64,
    /// The ladder the run was configured with; resuming under a different
    /// ladder is rejected.
    pub ladder: ResolutionLadder,
    pub rng: RngState,
    pub params: FieldParams,
    pub optimizer: Adam,
    /// Most recent diagnostics, oldest first.
    pub diagnostics: Vec<StepDiagnostic>,
}

/// The structured part of the payload; weights and moments follow as raw
/// little-endian sections.
#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    face_steps: u64,
    body_steps: u64,
    ladder: ResolutionLadder,
    rng: RngState,
    adam_lr: f32,
    adam_beta1: f32,
    adam_beta2: f32,
    adam_eps: f32,
    adam_step: u64,
    diagnostics: Vec<StepDiagnostic>,
}

fn push_section(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn push_f32_section(out: &mut Vec<u8>, values: &[f32]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the checkpoint to bytes (exposed for checksum tests).
pub(crate) fn encode_run_checkpoint(ckpt: &RunCheckpoint) -> Result<Vec<u8>, PipelineError> {
    let header = Header {
        step: ckpt.step,
        face_steps: ckpt.face_steps,
        body_steps: ckpt.body_steps,
        ladder: ckpt.ladder.clone(),
        rng: ckpt.rng.clone(),
        adam_lr: ckpt.optimizer.lr,
        adam_beta1: ckpt.optimizer.beta1,
        adam_beta2: ckpt.optimizer.beta2,
        adam_eps: ckpt.optimizer.eps,
        adam_step: ckpt.optimizer.step,
        diagnostics: ckpt.diagnostics.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| PipelineError::Checkpoint(format!("header serialization: {e}")))?;

    let mut payload = Vec::new();
    push_section(&mut payload, &header_json);
    push_section(&mut payload, &encode_field(&ckpt.params));
    push_f32_section(&mut payload, &ckpt.optimizer.m);
    push_f32_section(&mut payload, &ckpt.optimizer.v);

    let mut out = Vec::with_capacity(payload.len() + 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&sha256(&payload));
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_run_checkpoint(ckpt: &RunCheckpoint, path: &Path) -> Result<(), PipelineError> {
    let bytes = encode_run_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        if self.pos + n > self.bytes.len() {
            return Err(PipelineError::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn section(&mut self) -> Result<&'a [u8], PipelineError> {
        let len = self.u64()? as usize;
        self.take(len)
    }

    fn f32_section(&mut self) -> Result<Vec<f32>, PipelineError> {
        let count = self.u64()? as usize;
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| {
            PipelineError::Checkpoint("implausible moment-vector length".into())
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses checkpoint bytes (exposed for checksum tests).
pub(crate) fn decode_run_checkpoint(bytes: &[u8]) -> Result<RunCheckpoint, PipelineError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(PipelineError::Checkpoint(
            "bad magic: not a run checkpoint".into(),
        ));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(PipelineError::Checkpoint(format!(
            "incompatible run checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let stored_digest: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let payload = cur.section()?;
    if cur.pos != bytes.len() {
        return Err(PipelineError::Checkpoint(format!(
            "{} trailing bytes after the payload",
            bytes.len() - cur.pos
        )));
    }
    if sha256(payload) != stored_digest {
        return Err(PipelineError::Checkpoint(
            "checksum mismatch: checkpoint is corrupt, nothing was loaded".into(),
        ));
    }

    let mut cur = Cursor {
        bytes: payload,
        pos: 0,
    };
    let header: Header = serde_json::from_slice(cur.section()?)
        .map_err(|e| PipelineError::Checkpoint(format!("header parse: {e}")))?;
    let params = decode_field(cur.section()?)
        .map_err(|e| PipelineError::Checkpoint(format!("field blob: {e}")))?;
    let m = cur.f32_section()?;
    let v = cur.f32_section()?;
    if cur.pos != payload.len() {
        return Err(PipelineError::Checkpoint(format!(
            "{} trailing bytes after the moment vectors",
            payload.len() - cur.pos
        )));
    }
    let n_params = params.n_params();
    if m.len() != n_params || v.len() != n_params {
        return Err(PipelineError::Checkpoint(format!(
            "moment vectors hold {}/{} entries for {} parameters",
            m.len(),
            v.len(),
            n_params
        )));
    }

    Ok(RunCheckpoint {
        step: header.step,
        face_steps: header.face_steps,
        body_steps: header.body_steps,
        ladder: header.ladder,
        rng: header.rng,
        params,
        optimizer: Adam {
            lr: header.adam_lr,
            beta1: header.adam_beta1,
            beta2: header.adam_beta2,
            eps: header.adam_eps,
            step: header.adam_step,
            m,
            v,
        },
        diagnostics: header.diagnostics,
    })
}

pub fn read_run_checkpoint(path: &Path) -> Result<RunCheckpoint, PipelineError> {
    let bytes = std::fs::read(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_run_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use crate::field::FieldConfig;
    use crate::renderer::RenderKind;
    use crate::sampler::FocusTag;

    use super::*;

    fn sample_checkpoint() -> RunCheckpoint {
        let params = FieldParams::geometric_init(
            &FieldConfig {
                hidden_dim: 16,
                sdf_hidden_layers: 2,
                color_hidden_layers: 2,
                point_octaves: 2,
                view_octaves: 1,
                ..Default::default()
            },
            0.7,
            11,
        );
        let n = params.n_params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(3);
        for _ in 0..17 {
            rng.next_u64();
        }
        let mut optimizer = Adam::new(0.004, n);
        for (i, (m, v)) in optimizer.m.iter_mut().zip(optimizer.v.iter_mut()).enumerate() {
            *m = (i as f32).sin();
            *v = (i as f32).cos().abs();
        }
        optimizer.step = 42;
        RunCheckpoint {
            step: 42,
            face_steps: 10,
            body_steps: 32,
            ladder: ResolutionLadder {
                stages: vec![(32, 30), (64, 12)],
            },
            rng: RngState::capture(&rng),
            params,
            optimizer,
            diagnostics: vec![StepDiagnostic {
                step: 41,
                t: 512,
                focus: FocusTag::Body,
                kind: RenderKind::Color,
                latent_grad_norm: 0.123456789,
            }],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample_checkpoint();
        let bytes = encode_run_checkpoint(&ckpt).unwrap();
        let back = decode_run_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        // Same draw sequence from the restored generator.
        let mut a = ckpt.rng.restore();
        let mut b = back.rng.restore();
        for _ in 0..8 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn restored_generators_continue_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..23 {
            rng.next_u64();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        for _ in 0..16 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn corruption_is_caught_by_the_checksum() {
        let bytes = encode_run_checkpoint(&sample_checkpoint()).unwrap();
        // Flip one payload byte (past magic + version + digest + length).
        let mut corrupt = bytes.clone();
        let i = corrupt.len() - 5;
        corrupt[i] ^= 0x40;
        let err = decode_run_checkpoint(&corrupt).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn foreign_magic_and_versions_are_rejected() {
        let bytes = encode_run_checkpoint(&sample_checkpoint()).unwrap();
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'Z';
        assert!(decode_run_checkpoint(&wrong_magic)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        let mut wrong_version = bytes;
        wrong_version[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = decode_run_checkpoint(&wrong_version).unwrap_err();
        assert!(err.to_string().contains("version 7"), "{err}");
    }

    #[test]
    fn file_round_trip_works() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let ckpt = sample_checkpoint();
        write_run_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(read_run_checkpoint(&path).unwrap(), ckpt);
    }
}

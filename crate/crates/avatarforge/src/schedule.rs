//! Multi-resolution supervision schedule: maps an optimization step to its
//! supervision resolution and upsamples low-resolution renders to that
//! target before latent encoding.
//!
//! Renders stay at one fixed (small) resolution for a whole run; only the
//! upsample target grows across stages, which sharpens supervision without
//! re-paying render cost. Upsampling is align-corners bilinear, so
//! same-size upsampling is the identity and corner pixels keep their source
//! values; [`upsample_adjoint`] is the exact transpose of the same linear
//! map for backpropagation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageBuf;
use crate::parallel;

/// Errors from ladder lookups and resampling.
#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("schedule contract violation: {0}")]
    Contract(String),
}

/// Ordered `(resolution, steps)` stages of the supervision ladder.
///
/// Stage resolutions are square upsample targets in pixels; `steps` is how
/// many optimization steps run at that target. Configurable from the run
/// config as a list of `[resolution, steps]` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionLadder {
    pub stages: Vec<(u32, u32)>,
}

impl Default for ResolutionLadder {
    fn default() -> Self {
        Self {
            stages: vec![(512, 2000), (640, 2000), (768, 4000)],
        }
    }
}

impl ResolutionLadder {
    /// Checks the stage list is nonempty with strictly increasing
    /// resolutions and positive step counts.
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.stages.is_empty() {
            return Err(ScheduleError::Contract(
                "resolution ladder has no stages".into(),
            ));
        }
        for (i, &(res, steps)) in self.stages.iter().enumerate() {
            if steps == 0 {
                return Err(ScheduleError::Contract(format!(
                    "stage {i} ({res} px) has zero steps"
                )));
            }
            if res == 0 {
                return Err(ScheduleError::Contract(format!(
                    "stage {i} has zero resolution"
                )));
            }
            if i > 0 && self.stages[i - 1].0 >= res {
                return Err(ScheduleError::Contract(format!(
                    "stage resolutions must strictly increase, got {} then {}",
                    self.stages[i - 1].0,
                    res
                )));
            }
        }
        Ok(())
    }

    /// Total steps across all stages.
    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|&(_, s)| s as usize).sum()
    }

    /// Supervision resolution for a 0-based step index.
    pub fn stage_for_step(&self, step: usize) -> Result<u32, ScheduleError> {
        let mut start = 0usize;
        for &(res, steps) in &self.stages {
            let end = start + steps as usize;
            if step < end {
                return Ok(res);
            }
            start = end;
        }
        Err(ScheduleError::Contract(format!(
            "step {step} is past the ladder's {} total steps",
            self.total_steps()
        )))
    }
}

/// Per-output-index source taps for one axis of align-corners bilinear
/// resampling: `(lower index, upper index, upper weight)`.
fn axis_taps(src: u32, dst: u32) -> Vec<(usize, usize, f32)> {
    let last = src as usize - 1;
    if src == 1 || dst == 1 {
        return vec![(0, 0, 0.0); dst as usize];
    }
    let scale = (src as f64 - 1.0) / (dst as f64 - 1.0);
    (0..dst)
        .map(|i| {
            let u = i as f64 * scale;
            let i0 = (u.floor() as usize).min(last);
            (i0, (i0 + 1).min(last), (u - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinearly resamples `image` to a square `target`-pixel image.
///
/// Align-corners: the four corner pixels keep their source values,
/// same-size input passes through bit-identically, and every output pixel
/// is a convex blend of source pixels, so values stay in [0, 1].
pub fn upsample(image: &ImageBuf, target: u32) -> Result<ImageBuf, ScheduleError> {
    if target < image.height.max(image.width) {
        return Err(ScheduleError::Contract(format!(
            "upsample target {target} is below the {}x{} source",
            image.height, image.width
        )));
    }
    let row_taps = axis_taps(image.height, target);
    let col_taps = axis_taps(image.width, target);
    let t = target as usize;
    let sw = image.width as usize;
    let src = &image.data;
    let row_stride = t * 3;
    let rows_per_chunk = t.div_ceil(64).max(1);
    let mut out = vec![0.0f32; t * row_stride];
    parallel::for_each_slice(&mut out, rows_per_chunk * row_stride, |ci, chunk| {
        for (dr, row_out) in chunk.chunks_mut(row_stride).enumerate() {
            let (r0, r1, wr) = row_taps[ci * rows_per_chunk + dr];
            for (c, px) in row_out.chunks_mut(3).enumerate() {
                let (c0, c1, wc) = col_taps[c];
                for (ch, v) in px.iter_mut().enumerate() {
                    let top = (1.0 - wc) * src[(r0 * sw + c0) * 3 + ch]
                        + wc * src[(r0 * sw + c1) * 3 + ch];
                    let bot = (1.0 - wc) * src[(r1 * sw + c0) * 3 + ch]
                        + wc * src[(r1 * sw + c1) * 3 + ch];
                    *v = (1.0 - wr) * top + wr * bot;
                }
            }
        }
    });
    Ok(ImageBuf {
        height: target,
        width: target,
        data: out,
    })
}

/// Transpose of [`upsample`]: scatters a cotangent on the upsampled image
/// back to source resolution.
///
/// The returned buffer carries gradient values, not colors, so entries may
/// fall outside [0, 1].
pub fn upsample_adjoint(
    cotangent: &ImageBuf,
    src_height: u32,
    src_width: u32,
) -> Result<ImageBuf, ScheduleError> {
    if cotangent.height < src_height || cotangent.width < src_width {
        return Err(ScheduleError::Contract(format!(
            "cotangent {}x{} is smaller than the {src_height}x{src_width} source",
            cotangent.height, cotangent.width
        )));
    }
    let row_taps = axis_taps(src_height, cotangent.height);
    let col_taps = axis_taps(src_width, cotangent.width);
    let sw = src_width as usize;
    let mut out = vec![0.0f32; (src_height * src_width * 3) as usize];
    for (r, &(r0, r1, wr)) in row_taps.iter().enumerate() {
        for (c, &(c0, c1, wc)) in col_taps.iter().enumerate() {
            let g = cotangent.pixel(r as u32, c as u32);
            for (ch, &gv) in g.iter().enumerate() {
                out[(r0 * sw + c0) * 3 + ch] += (1.0 - wr) * (1.0 - wc) * gv;
                out[(r0 * sw + c1) * 3 + ch] += (1.0 - wr) * wc * gv;
                out[(r1 * sw + c0) * 3 + ch] += wr * (1.0 - wc) * gv;
                out[(r1 * sw + c1) * 3 + ch] += wr * wc * gv;
            }
        }
    }
    Ok(ImageBuf {
        height: src_height,
        width: src_width,
        data: out,
    })
}

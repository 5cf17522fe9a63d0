//! Score-distillation guidance: the noise schedule and forward process,
//! the latent codec and guidance-backend contracts, the gradient engine
//! that turns noise predictions into field updates, face/body routing, and
//! the analytic oracle backend that verification runs against.

mod backend;
mod codec;
mod engine;
mod wire;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    oracle_backend, BackendCall, CallLog, GuidanceBackend, OracleBackend, RecordingBackend,
};
pub use codec::{IdentityCodec, LatentCodec, PooledCodec};
pub use engine::{
    sds_grad, GuidanceRouter, SdsConfig, SdsEngine, SdsWeight, StepDiagnostic,
};
pub use wire::{
    read_request, read_response, serve_noise_prediction, write_request, write_response,
    NoiseRequest, NoiseResponse, RemoteBackend, WIRE_VERSION,
};

/// Errors from guidance operations. Backend failures are retriable
/// (transient transport or service trouble); contract violations and
/// unsupported operations are not.
#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("guidance contract violation: {0}")]
    Contract(String),
    #[error("guidance backend failure (retriable): {0}")]
    Backend(String),
    #[error("operation not supported by this backend: {0}")]
    Unsupported(String),
}

impl GuidanceError {
    /// Whether retrying the same call may succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(self, GuidanceError::Backend(_))
    }
}

impl From<crate::renderer::RenderError> for GuidanceError {
    fn from(e: crate::renderer::RenderError) -> Self {
        GuidanceError::Contract(e.to_string())
    }
}

impl From<crate::schedule::ScheduleError> for GuidanceError {
    fn from(e: crate::schedule::ScheduleError) -> Self {
        GuidanceError::Contract(e.to_string())
    }
}

impl From<crate::image::ImageError> for GuidanceError {
    fn from(e: crate::image::ImageError) -> Self {
        GuidanceError::Contract(e.to_string())
    }
}

/// Diffusion forward-process schedule: cumulative signal fractions
/// `alpha_bar` indexed by timestep `t` in `[1, T]`, plus the sub-range
/// `[t_min, t_max]` that score-distillation draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f32>,
    pub t_min: u32,
    pub t_max: u32,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear_beta(1e-4, 2e-2, 1000, 20, 980)
    }
}

impl NoiseSchedule {
    /// Builds the cumulative schedule from per-step noise rates that grow
    /// linearly from `beta_start` to `beta_end` over `timesteps` steps.
    pub fn linear_beta(
        beta_start: f64,
        beta_end: f64,
        timesteps: usize,
        t_min: u32,
        t_max: u32,
    ) -> NoiseSchedule {
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut product = 1.0f64;
        for i in 0..timesteps {
            let frac = if timesteps > 1 {
                i as f64 / (timesteps - 1) as f64
            } else {
                0.0
            };
            let beta = beta_start + frac * (beta_end - beta_start);
            product *= 1.0 - beta;
            alpha_bar.push(product as f32);
        }
        NoiseSchedule {
            alpha_bar,
            t_min,
            t_max,
        }
    }

    /// Total timesteps `T`.
    pub fn timesteps(&self) -> u32 {
        self.alpha_bar.len() as u32
    }

    /// Signal fraction at timestep `t` in `[1, T]`.
    pub fn alpha_bar_at(&self, t: u32) -> Result<f32, GuidanceError> {
        if t < 1 || t > self.timesteps() {
            return Err(GuidanceError::Contract(format!(
                "timestep {t} is outside [1, {}]",
                self.timesteps()
            )));
        }
        Ok(self.alpha_bar[(t - 1) as usize])
    }

    /// Uniform draw from the score-distillation range `[t_min, t_max]`.
    pub fn sample_t<R: Rng>(&self, rng: &mut R) -> u32 {
        rng.gen_range(self.t_min..=self.t_max)
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        let t = self.alpha_bar.len();
        if t == 0 {
            return Err(GuidanceError::Contract("empty noise schedule".into()));
        }
        for (i, &a) in self.alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) || !a.is_finite() {
                return Err(GuidanceError::Contract(format!(
                    "alpha_bar[{i}] = {a} is outside (0, 1]"
                )));
            }
            if i > 0 && a > self.alpha_bar[i - 1] {
                return Err(GuidanceError::Contract(format!(
                    "alpha_bar increases at index {i}"
                )));
            }
        }
        if t > 1 && self.alpha_bar[0] <= self.alpha_bar[t - 1] {
            return Err(GuidanceError::Contract(
                "alpha_bar must decay from start to end".into(),
            ));
        }
        if !(1 <= self.t_min && self.t_min < self.t_max && self.t_max <= t as u32) {
            return Err(GuidanceError::Contract(format!(
                "sampling range [{}, {}] must satisfy 1 <= t_min < t_max <= {t}",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }
}

/// Dense latent tensor in row-major (height, width, channel) layout —
/// the codec's output and the tensor score distillation operates on.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Latent {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Latent, GuidanceError> {
        if data.len() != height * width * channels {
            return Err(GuidanceError::Contract(format!(
                "latent data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Latent {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Latent {
        Latent {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Independent standard-normal entries.
    pub fn standard_normal<R: Rng>(
        height: usize,
        width: usize,
        channels: usize,
        rng: &mut R,
    ) -> Latent {
        let data = (0..height * width * channels)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        Latent {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Mean squared difference, in f64.
    pub fn mse(&self, other: &Latent) -> f64 {
        assert_eq!(self.shape(), other.shape(), "latent shapes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Euclidean norm, in f64.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }
}

/// Diffusion forward process: `z_t = sqrt(alpha_bar_t) * z0 +
/// sqrt(1 - alpha_bar_t) * eps`.
pub fn add_noise(
    z0: &Latent,
    t: u32,
    eps: &Latent,
    schedule: &NoiseSchedule,
) -> Result<Latent, GuidanceError> {
    if eps.shape() != z0.shape() {
        return Err(GuidanceError::Contract(format!(
            "noise shape {:?} does not match the latent shape {:?}",
            eps.shape(),
            z0.shape()
        )));
    }
    let alpha_bar = schedule.alpha_bar_at(t)?;
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    let data = z0
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&z, &e)| signal * z + noise * e)
        .collect();
    Ok(Latent {
        height: z0.height,
        width: z0.width,
        channels: z0.channels,
        data,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn default_schedule_decays_across_the_full_range() {
        let s = NoiseSchedule::default();
        s.validate().unwrap();
        assert_eq!(s.timesteps(), 1000);
        assert_eq!(s.t_min, 20);
        assert_eq!(s.t_max, 980);
        // First step keeps almost all signal; by the last step the signal
        // fraction has decayed into the 1e-5 decade (the value a
        // sum-of-logs estimate of the cumulative product puts it in).
        assert!((s.alpha_bar[0] - (1.0 - 1e-4)).abs() < 1e-7);
        let last = s.alpha_bar[999];
        assert!(
            (3e-5..5e-5).contains(&last),
            "terminal signal fraction {last}"
        );
        for w in s.alpha_bar.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn schedule_invariants_are_enforced() {
        let mut s = NoiseSchedule::default();
        s.t_min = 980;
        s.t_max = 20;
        assert!(s.validate().is_err());

        let increasing = NoiseSchedule {
            alpha_bar: vec![0.5, 0.9],
            t_min: 1,
            t_max: 2,
        };
        assert!(increasing.validate().is_err());

        let out_of_range = NoiseSchedule {
            alpha_bar: vec![1.5, 0.5],
            t_min: 1,
            t_max: 2,
        };
        assert!(out_of_range.validate().is_err());

        let empty = NoiseSchedule {
            alpha_bar: vec![],
            t_min: 1,
            t_max: 1,
        };
        assert!(empty.validate().is_err());
    }

    fn random_latent(seed: u64) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Latent::standard_normal(4, 4, 3, &mut rng)
    }

    #[test]
    fn noise_free_timestep_returns_the_signal() {
        let schedule = NoiseSchedule {
            alpha_bar: vec![1.0],
            t_min: 1,
            t_max: 1,
        };
        let z0 = random_latent(1);
        let eps = random_latent(2);
        let z_t = add_noise(&z0, 1, &eps, &schedule).unwrap();
        assert_eq!(z_t.data, z0.data);
    }

    #[test]
    fn full_noise_limit_returns_the_noise() {
        let schedule = NoiseSchedule {
            alpha_bar: vec![1e-12],
            t_min: 1,
            t_max: 1,
        };
        let z0 = random_latent(3);
        let eps = random_latent(4);
        let z_t = add_noise(&z0, 1, &eps, &schedule).unwrap();
        for (got, want) in z_t.data.iter().zip(&eps.data) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn out_of_range_timesteps_are_rejected() {
        let schedule = NoiseSchedule::default();
        let z0 = random_latent(5);
        let eps = random_latent(6);
        assert!(add_noise(&z0, 0, &eps, &schedule).is_err());
        assert!(add_noise(&z0, 1001, &eps, &schedule).is_err());
        assert!(add_noise(&z0, 1000, &eps, &schedule).is_ok());
    }

    #[test]
    fn mismatched_noise_shapes_are_rejected() {
        let schedule = NoiseSchedule::default();
        let z0 = random_latent(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let eps = Latent::standard_normal(4, 4, 1, &mut rng);
        assert!(add_noise(&z0, 500, &eps, &schedule).is_err());
    }

    #[test]
    fn noised_latent_statistics_match_the_forward_process() {
        // Monte-Carlo check: over many unit-normal noise draws, z_t has
        // mean sqrt(alpha_bar) * z0 and variance (1 - alpha_bar).
        let schedule = NoiseSchedule::default();
        let t = 500;
        let alpha_bar = schedule.alpha_bar_at(t).unwrap() as f64;
        let z0 = Latent::new(4, 4, 3, vec![0.7; 48]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 10_000;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut n = 0usize;
        for _ in 0..draws {
            let eps = Latent::standard_normal(4, 4, 3, &mut rng);
            let z_t = add_noise(&z0, t, &eps, &schedule).unwrap();
            for &v in &z_t.data {
                sum += v as f64;
                sum_sq += (v as f64) * (v as f64);
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let want_mean = alpha_bar.sqrt() * 0.7;
        let want_var = 1.0 - alpha_bar;
        assert!(
            (mean - want_mean).abs() < 0.05 * want_mean.abs().max(0.01),
            "mean {mean} vs {want_mean}"
        );
        assert!(
            (var - want_var).abs() < 0.05 * want_var,
            "variance {var} vs {want_var}"
        );
    }
}

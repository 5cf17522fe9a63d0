//! Guidance backends: the pluggable noise-prediction service contract, an
//! analytic oracle that scores against a known target, and a recording
//! wrapper for call auditing and fault injection in tests.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::image::ImageBuf;

use super::{GuidanceError, Latent, LatentCodec, NoiseSchedule};

/// A denoising-diffusion service: predicts the noise content of a noised
/// latent under a text prompt, and can be specialized on a small image
/// set. Implementations must be safe to share across threads.
pub trait GuidanceBackend: Send + Sync {
    /// Classifier-free-guided noise prediction for `z_t` at timestep `t`.
    /// `condition` optionally carries a pose-conditioning image.
    fn predict_noise(
        &self,
        z_t: &Latent,
        t: u32,
        prompt: &str,
        condition: Option<&ImageBuf>,
        guidance_scale: f32,
    ) -> Result<Latent, GuidanceError>;

    /// Returns a new backend specialized on `dataset` (image, caption)
    /// pairs for `steps` optimization steps. The receiver is unchanged.
    fn finetune(
        &self,
        dataset: &[(ImageBuf, String)],
        steps: u32,
    ) -> Result<Box<dyn GuidanceBackend>, GuidanceError>;

    /// Samples an image for `prompt`, optionally conditioned on a pose
    /// image. Randomness comes only from `rng`.
    fn generate(
        &self,
        prompt: &str,
        condition: Option<&ImageBuf>,
        rng: &mut dyn RngCore,
    ) -> Result<ImageBuf, GuidanceError>;
}

// Backend handles ride inside checkpoints and error payloads whose other
// fields want `{:?}`; implementors stay free of any Debug bound.
impl std::fmt::Debug for dyn GuidanceBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("<guidance backend>")
    }
}

/// Analytic backend that knows the target latent `z*`. Inverting the
/// forward process at `z_t = sqrt(ab) z0 + sqrt(1-ab) eps` gives the
/// prediction `(z_t - sqrt(ab) z*) / sqrt(1-ab)`, which equals the true
/// noise exactly when `z0 = z*` — so score distillation against it pulls
/// the rendered image toward the target. Prompts and the guidance scale
/// are accepted but do not change the prediction.
pub struct OracleBackend {
    target: Latent,
    schedule: NoiseSchedule,
    codec: Arc<dyn LatentCodec>,
}

/// Builds an oracle backend whose target is `target_image` encoded by
/// `codec`.
pub fn oracle_backend(
    target_image: &ImageBuf,
    codec: Arc<dyn LatentCodec>,
    schedule: NoiseSchedule,
) -> Result<OracleBackend, GuidanceError> {
    schedule.validate()?;
    let target = codec.encode(target_image)?;
    Ok(OracleBackend {
        target,
        schedule,
        codec,
    })
}

impl OracleBackend {
    pub fn with_target(
        target: Latent,
        codec: Arc<dyn LatentCodec>,
        schedule: NoiseSchedule,
    ) -> Result<OracleBackend, GuidanceError> {
        schedule.validate()?;
        Ok(OracleBackend {
            target,
            schedule,
            codec,
        })
    }

    pub fn target_latent(&self) -> &Latent {
        &self.target
    }
}

impl GuidanceBackend for OracleBackend {
    fn predict_noise(
        &self,
        z_t: &Latent,
        t: u32,
        _prompt: &str,
        _condition: Option<&ImageBuf>,
        _guidance_scale: f32,
    ) -> Result<Latent, GuidanceError> {
        if z_t.shape() != self.target.shape() {
            return Err(GuidanceError::Contract(format!(
                "latent shape {:?} does not match the oracle target {:?}",
                z_t.shape(),
                self.target.shape()
            )));
        }
        let alpha_bar = self.schedule.alpha_bar_at(t)?;
        let one_minus = 1.0 - alpha_bar;
        if one_minus < 1e-12 {
            return Err(GuidanceError::Contract(format!(
                "timestep {t} carries no noise to predict"
            )));
        }
        let signal = alpha_bar.sqrt();
        let inv_noise = 1.0 / one_minus.sqrt();
        let data = z_t
            .data
            .iter()
            .zip(&self.target.data)
            .map(|(&zt, &zs)| (zt - signal * zs) * inv_noise)
            .collect();
        Latent::new(z_t.height, z_t.width, z_t.channels, data)
    }

    fn finetune(
        &self,
        dataset: &[(ImageBuf, String)],
        _steps: u32,
    ) -> Result<Box<dyn GuidanceBackend>, GuidanceError> {
        if dataset.is_empty() {
            return Err(GuidanceError::Contract(
                "finetune dataset is empty".into(),
            ));
        }
        // Specializing the oracle on a dataset re-centers its target on
        // the dataset's encoded mean.
        let mut mean: Option<Latent> = None;
        for (image, _caption) in dataset {
            let latent = self.codec.encode(image)?;
            match &mut mean {
                None => mean = Some(latent),
                Some(acc) => {
                    if acc.shape() != latent.shape() {
                        return Err(GuidanceError::Contract(format!(
                            "finetune image latent {:?} does not match {:?}",
                            latent.shape(),
                            acc.shape()
                        )));
                    }
                    for (a, b) in acc.data.iter_mut().zip(&latent.data) {
                        *a += b;
                    }
                }
            }
        }
        let mut mean = mean.expect("dataset checked non-empty");
        let inv = 1.0 / dataset.len() as f32;
        for v in &mut mean.data {
            *v *= inv;
        }
        Ok(Box::new(OracleBackend {
            target: mean,
            schedule: self.schedule.clone(),
            codec: Arc::clone(&self.codec),
        }))
    }

    fn generate(
        &self,
        _prompt: &str,
        _condition: Option<&ImageBuf>,
        rng: &mut dyn RngCore,
    ) -> Result<ImageBuf, GuidanceError> {
        let base = self.codec.decode(&self.target)?;
        let mut data = base.data.clone();
        for v in &mut data {
            let n: f32 = rng.sample(StandardNormal);
            *v = (*v + 0.02 * n).clamp(0.0, 1.0);
        }
        ImageBuf::new(base.height, base.width, data).map_err(GuidanceError::from)
    }
}

/// One backend invocation, as seen by a [`RecordingBackend`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendCall {
    PredictNoise { t: u32, prompt: String },
    Finetune { dataset_size: usize, steps: u32 },
    Generate { prompt: String, conditioned: bool },
}

/// Shared, clonable call log. Backends derived by `finetune` append to
/// the same log as their parent.
#[derive(Clone, Default)]
pub struct CallLog(Arc<Mutex<Vec<BackendCall>>>);

impl CallLog {
    pub fn new() -> CallLog {
        CallLog::default()
    }

    pub fn snapshot(&self) -> Vec<BackendCall> {
        self.0.lock().expect("call log poisoned").clone()
    }

    fn push(&self, call: BackendCall) {
        self.0.lock().expect("call log poisoned").push(call);
    }
}

/// Wraps a backend, logging every successful call and optionally
/// injecting a failure at a chosen call index (counted across all calls,
/// including those made through backends derived by `finetune`).
pub struct RecordingBackend {
    inner: Box<dyn GuidanceBackend>,
    log: CallLog,
    calls_made: Arc<AtomicUsize>,
    fail_at: Arc<AtomicUsize>,
}

impl RecordingBackend {
    pub fn new(inner: Box<dyn GuidanceBackend>, log: CallLog) -> RecordingBackend {
        RecordingBackend {
            inner,
            log,
            calls_made: Arc::new(AtomicUsize::new(0)),
            fail_at: Arc::new(AtomicUsize::new(usize::MAX)),
        }
    }

    /// Makes the `index`-th call (0-based, counted across derived
    /// backends) fail with a retriable error instead of reaching the
    /// inner backend. Each armed index fires at most once.
    pub fn fail_call(&self, index: usize) {
        self.fail_at.store(index, Ordering::SeqCst);
    }

    pub fn calls_made(&self) -> usize {
        self.calls_made.load(Ordering::SeqCst)
    }

    /// Counts this call, returning an injected failure if armed for it.
    fn admit(&self, what: &str) -> Result<(), GuidanceError> {
        let index = self.calls_made.fetch_add(1, Ordering::SeqCst);
        if self.fail_at.load(Ordering::SeqCst) == index {
            self.fail_at.store(usize::MAX, Ordering::SeqCst);
            return Err(GuidanceError::Backend(format!(
                "injected failure on call {index} ({what})"
            )));
        }
        Ok(())
    }
}

impl GuidanceBackend for RecordingBackend {
    fn predict_noise(
        &self,
        z_t: &Latent,
        t: u32,
        prompt: &str,
        condition: Option<&ImageBuf>,
        guidance_scale: f32,
    ) -> Result<Latent, GuidanceError> {
        self.admit("predict_noise")?;
        let out = self
            .inner
            .predict_noise(z_t, t, prompt, condition, guidance_scale)?;
        self.log.push(BackendCall::PredictNoise {
            t,
            prompt: prompt.to_string(),
        });
        Ok(out)
    }

    fn finetune(
        &self,
        dataset: &[(ImageBuf, String)],
        steps: u32,
    ) -> Result<Box<dyn GuidanceBackend>, GuidanceError> {
        self.admit("finetune")?;
        let derived = self.inner.finetune(dataset, steps)?;
        self.log.push(BackendCall::Finetune {
            dataset_size: dataset.len(),
            steps,
        });
        // The derived backend shares this recorder's log, counter, and
        // failure trigger so audits see one linear history.
        Ok(Box::new(RecordingBackend {
            inner: derived,
            log: self.log.clone(),
            calls_made: Arc::clone(&self.calls_made),
            fail_at: Arc::clone(&self.fail_at),
        }))
    }

    fn generate(
        &self,
        prompt: &str,
        condition: Option<&ImageBuf>,
        rng: &mut dyn RngCore,
    ) -> Result<ImageBuf, GuidanceError> {
        self.admit("generate")?;
        let out = self.inner.generate(prompt, condition, rng)?;
        self.log.push(BackendCall::Generate {
            prompt: prompt.to_string(),
            conditioned: condition.is_some(),
        });
        Ok(out)
    }
}

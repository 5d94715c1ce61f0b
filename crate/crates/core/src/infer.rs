//! Sampling-based fusion: condition, DDIM over the latent, modulated backbone.

use std::cell::Cell;
use std::time::{Duration, Instant};

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Fusion;
use crate::data::{Batch, Dataset};
use crate::diffusion::{ddim_sample, Denoise, SigmaPolicy};
use crate::error::Result;
use crate::kernelgen::Modulation;
use crate::nn;
use crate::training::KsDiff;

/// Counts evaluations of the wrapped network.
pub struct Counting<'a, D: ?Sized> {
    inner: &'a D,
    calls: Cell<usize>,
}

impl<'a, D: ?Sized> Counting<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<D: Denoise + ?Sized> Denoise for Counting<'_, D> {
    fn denoise(&self, z_t: &Tensor, ts: &[usize], c: &Tensor) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.denoise(z_t, ts, c)
    }
}

impl<F: Fusion + ?Sized> Fusion for Counting<'_, F> {
    fn fuse(&self, pan: &Tensor, lrms: &Tensor, z: Option<&Tensor>, mode: Modulation) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.fuse(pan, lrms, z, mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSettings {
    pub steps: usize,
    pub sigma: SigmaPolicy,
    pub seed: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            steps: 25,
            sigma: SigmaPolicy::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timing {
    pub encode: Duration,
    pub sample: Duration,
    pub fuse: Duration,
}

impl Timing {
    pub fn total(&self) -> Duration {
        self.encode + self.sample + self.fuse
    }
}

#[derive(Debug, Clone)]
pub struct Fused {
    pub image: Tensor,
    pub latent: Tensor,
    pub denoiser_calls: usize,
    pub backbone_calls: usize,
    pub timing: Timing,
}

/// Fuses one batch. The RNG is seeded per call so results do not depend on
/// what ran before.
pub fn fuse(model: &KsDiff, pan: &Tensor, lrms: &Tensor, s: &SamplerSettings) -> Result<Fused> {
    let t0 = Instant::now();
    let c = model.condition.forward(pan, lrms)?;
    let t1 = Instant::now();
    let denoiser = Counting::new(&model.denoiser);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let z = ddim_sample(&denoiser, &model.schedule, &c, s.steps, s.sigma, &mut rng)?;
    let t2 = Instant::now();
    let backbone = Counting::new(&model.backbone);
    let image = backbone.fuse(pan, lrms, Some(&z), Modulation::Generated)?;
    let t3 = Instant::now();
    Ok(Fused {
        image,
        latent: z,
        denoiser_calls: denoiser.calls(),
        backbone_calls: backbone.calls(),
        timing: Timing {
            encode: t1 - t0,
            sample: t2 - t1,
            fuse: t3 - t2,
        },
    })
}

pub fn fuse_batch(model: &KsDiff, batch: &Batch, s: &SamplerSettings) -> Result<Fused> {
    fuse(model, &batch.pan, &batch.lrms, s)
}

/// Mean L1 of sampled fusions against references, one sample at a time.
pub fn sampled_l1(model: &KsDiff, data: &Dataset, s: &SamplerSettings) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.len() {
        let b = data.batch(&[i], model.dtype())?;
        let gt = b
            .gt
            .as_ref()
            .ok_or_else(|| crate::Error::Data("dataset has no references".into()))?;
        let settings = SamplerSettings { seed: s.seed.wrapping_add(i as u64), ..*s };
        let out = fuse_batch(model, &b, &settings)?;
        total += nn::l1_loss(&out.image, gt)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total / data.len() as f64)
}

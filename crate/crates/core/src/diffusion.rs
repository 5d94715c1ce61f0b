//! Latent diffusion: cosine schedule, forward noising, the clean-latent
//! denoiser, ancestral and DDIM samplers.
//!
//! Timesteps are 1-based: `t` runs over `1..=T` and `t = 0` denotes the clean
//! latent, so `alpha_bar(0) == 1`.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, gelu, Linear, Scope};

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip applied to every beta.
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

fn cosine_f(t: f64, steps: f64) -> f64 {
    let x = ((t / steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

impl Schedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config(format!("diffusion needs at least 2 steps, got {steps}")));
        }
        let n = steps as f64;
        let betas: Vec<f64> = (1..=steps)
            .map(|t| (1.0 - cosine_f(t as f64, n) / cosine_f(t as f64 - 1.0, n)).min(MAX_BETA))
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::config("betas must lie in (0, 1) with at least 2 steps"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.steps() || (!allow_zero && t == 0) {
            return Err(Error::Timestep { t, steps: self.steps() });
        }
        Ok(())
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t, false)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t, false)?;
        Ok(self.alphas[t - 1])
    }

    /// Cumulative product up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t, true)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Posterior variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check(t, false)?;
        Ok((1.0 - self.alpha_bar(t - 1)?) / (1.0 - self.alpha_bar(t)?) * self.beta(t)?)
    }
}

fn per_item(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat(1).take(like.rank() - 1));
    Ok(Tensor::from_vec(values.to_vec(), shape, like.device())?.to_dtype(like.dtype())?)
}

fn coeffs(sched: &Schedule, ts: &[usize], like: &Tensor, f: impl Fn(usize) -> Result<f64>) -> Result<Tensor> {
    if like.rank() == 0 || like.dim(0)? != ts.len() {
        return Err(Error::shape(format!(
            "{} timesteps for a batch of shape {:?}",
            ts.len(),
            like.dims()
        )));
    }
    for &t in ts {
        sched.check(t, true)?;
    }
    let v = ts.iter().map(|&t| f(t)).collect::<Result<Vec<_>>>()?;
    per_item(&v, like)
}

/// Closed-form forward marginal `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`,
/// one timestep per batch item (leading axis).
pub fn q_sample(sched: &Schedule, z0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::shape("noise must match the latent shape"));
    }
    let a = coeffs(sched, ts, z0, |t| Ok(sched.alpha_bar(t)?.sqrt()))?;
    let b = coeffs(sched, ts, z0, |t| Ok((1.0 - sched.alpha_bar(t)?).sqrt()))?;
    Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// One forward transition `sqrt(alpha_t) z_{t-1} + sqrt(beta_t) eps`.
pub fn q_step(sched: &Schedule, prev: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    Ok(((prev * sched.alpha(t)?.sqrt())? + (eps * sched.beta(t)?.sqrt())?)?)
}

/// Noise implied by a clean-latent prediction.
pub fn eps_from_z0(sched: &Schedule, z_t: &Tensor, z0: &Tensor, t: usize) -> Result<Tensor> {
    sched.check(t, false)?;
    let ab = sched.alpha_bar(t)?;
    Ok(((z_t - (z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
}

/// Clean latent implied by a noise prediction.
pub fn z0_from_eps(sched: &Schedule, z_t: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
    sched.check(t, false)?;
    let ab = sched.alpha_bar(t)?;
    Ok(((z_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
}

#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: Tensor,
    pub variance: f64,
}

/// Reverse-step posterior given the current state and a clean prediction.
pub fn posterior(sched: &Schedule, z_t: &Tensor, z0_hat: &Tensor, t: usize) -> Result<Posterior> {
    let eps = eps_from_z0(sched, z_t, z0_hat, t)?;
    let alpha = sched.alpha(t)?;
    let k = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)?).sqrt();
    let mean = ((z_t - (eps * k)?)? / alpha.sqrt())?;
    Ok(Posterior {
        mean,
        variance: sched.posterior_variance(t)?,
    })
}

/// Anything that maps `(z_t, t, c)` to a clean-latent prediction.
pub trait Denoise {
    /// `z_t` and `c` are `(B, N, Cz)`; `ts` has one entry per batch item.
    fn denoise(&self, z_t: &Tensor, ts: &[usize], c: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub tokens: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            tokens: 16,
            latent_dim: 128,
            hidden: 256,
            blocks: 5,
            time_dim: 64,
        }
    }
}

/// Sinusoidal embedding, `(B, dim)`: sines then cosines.
pub fn time_embedding(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::config(format!("time embedding width must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp() * t as f64);
        let f: Vec<f64> = freqs.collect();
        v.extend(f.iter().map(|x| x.sin()));
        v.extend(f.iter().map(|x| x.cos()));
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct MixerBlock {
    pub token_mix: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MixerBlock {
    fn new(scope: &Scope, tokens: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            token_mix: Linear::new(&scope.pp("token_mix"), tokens, tokens)?,
            fc1: Linear::new(&scope.pp("fc1"), hidden, 2 * hidden)?,
            fc2: Linear::new(&scope.pp("fc2"), 2 * hidden, hidden)?,
        })
    }

    fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let mixed = self.token_mix.forward(&h.transpose(1, 2)?.contiguous()?)?.transpose(1, 2)?;
        let h = (h + mixed)?;
        let m = self.fc2.forward(&gelu(&self.fc1.forward(&h)?)?)?;
        Ok((h + m)?)
    }
}

/// Token MLP denoiser predicting the clean latent.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub time: Linear,
    pub input: Linear,
    pub blocks: Vec<MixerBlock>,
    pub output: Linear,
}

impl Denoiser {
    pub fn new(scope: &Scope, cfg: DenoiserConfig) -> Result<Self> {
        if cfg.tokens == 0 || cfg.latent_dim == 0 || cfg.hidden == 0 || cfg.blocks == 0 {
            return Err(Error::config("denoiser dimensions must be positive"));
        }
        Ok(Self {
            time: Linear::new(&scope.pp("time"), cfg.time_dim, cfg.time_dim)?,
            input: Linear::new(&scope.pp("input"), 2 * cfg.latent_dim + cfg.time_dim, cfg.hidden)?,
            blocks: (0..cfg.blocks)
                .map(|i| MixerBlock::new(&scope.pp(format!("block{i}")), cfg.tokens, cfg.hidden))
                .collect::<Result<_>>()?,
            output: Linear::zeros(&scope.pp("output"), cfg.hidden, cfg.latent_dim)?,
            cfg,
        })
    }

    pub fn forward(&self, z_t: &Tensor, ts: &[usize], c: &Tensor) -> Result<Tensor> {
        let (b, n, cz) = z_t.dims3()?;
        if c.dims() != z_t.dims() || n != self.cfg.tokens || cz != self.cfg.latent_dim || ts.len() != b {
            return Err(Error::shape(format!(
                "denoiser expects ({b}, {}, {}) latents and condition with {b} timesteps; got z {:?}, c {:?}, {} timesteps",
                self.cfg.tokens,
                self.cfg.latent_dim,
                z_t.dims(),
                c.dims(),
                ts.len()
            )));
        }
        let temb = self.time.forward(&time_embedding(ts, self.cfg.time_dim, z_t.dtype())?)?;
        let temb = temb.unsqueeze(1)?.broadcast_as((b, n, self.cfg.time_dim))?;
        let mut h = self.input.forward(&Tensor::cat(&[z_t, c, &temb], 2)?)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        self.output.forward(&h)
    }
}

impl Denoise for Denoiser {
    fn denoise(&self, z_t: &Tensor, ts: &[usize], c: &Tensor) -> Result<Tensor> {
        self.forward(z_t, ts, c)
    }
}

/// Stochasticity of the DDIM update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaPolicy {
    /// 0 is deterministic; 1 matches the ancestral variance.
    pub eta: f64,
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        Self { eta: 0.0 }
    }
}

impl SigmaPolicy {
    pub fn sigma(&self, sched: &Schedule, t: usize, prev: usize) -> Result<f64> {
        if self.eta == 0.0 {
            return Ok(0.0);
        }
        let (ab_t, ab_p) = (sched.alpha_bar(t)?, sched.alpha_bar(prev)?);
        Ok(self.eta * ((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)).max(0.0).sqrt())
    }
}

/// Sub-sequence of timesteps `round(i * T / steps)` for `i = 0..=steps`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::config(format!("sampling steps must be in 1..={total}, got {steps}")));
    }
    Ok((0..=steps)
        .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
        .collect())
}

/// Deterministic-by-default DDIM sampling of a clean latent for condition `c`.
pub fn ddim_sample<D: Denoise + ?Sized>(
    denoiser: &D,
    sched: &Schedule,
    c: &Tensor,
    steps: usize,
    sigma: SigmaPolicy,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let taus = ddim_timesteps(sched.steps(), steps)?;
    let b = c.dim(0)?;
    let mut z = nn::randn(rng, c.dims(), c.dtype())?;
    let mut z0 = z.zeros_like()?;
    for i in (1..taus.len()).rev() {
        let (t, prev) = (taus[i], taus[i - 1]);
        z0 = denoiser.denoise(&z, &vec![t; b], c)?;
        let eps = eps_from_z0(sched, &z, &z0, t)?;
        let ab_p = sched.alpha_bar(prev)?;
        let s = sigma.sigma(sched, t, prev)?;
        let dir = (1.0 - ab_p - s * s).max(0.0).sqrt();
        z = ((&z0 * ab_p.sqrt())? + (eps * dir)?)?;
        if s > 0.0 && prev > 0 {
            z = (z + (nn::randn(rng, c.dims(), c.dtype())? * s)?)?;
        }
    }
    Ok(z0)
}

/// Full ancestral sampling through every timestep.
pub fn ddpm_sample<D: Denoise + ?Sized>(
    denoiser: &D,
    sched: &Schedule,
    c: &Tensor,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let b = c.dim(0)?;
    let mut z = nn::randn(rng, c.dims(), c.dtype())?;
    for t in (1..=sched.steps()).rev() {
        let z0 = denoiser.denoise(&z, &vec![t; b], c)?;
        let post = posterior(sched, &z, &z0, t)?;
        z = if t > 1 {
            (post.mean + (nn::randn(rng, c.dims(), c.dtype())? * post.variance.sqrt())?)?
        } else {
            post.mean
        };
    }
    Ok(z)
}

//! Latent-conditioned convolution kernels.
//!
//! A learned base kernel `W0` of shape `(C_in, C_out, k_h, k_w)` is modulated
//! elementwise by `W = 1 + tanh(G x1 U1 x2 U2 x3 U3 x4 U4)`. The core `G` comes
//! from an MLP on the mean-pooled latent code; the four factor matrices are
//! produced from the layer's own input features by a small shared conv stem
//! followed by four attention heads (one per tensor mode). Factors are stored
//! as `(d_n, r_n)` so the mode products land on the kernel shape.

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, conv2d, gelu, softmax, Conv2d, Init, Linear, Scope};

/// Smallest spatial size the factor stem accepts. Padded stride-2
/// convolutions keep at least one pixel, so any non-empty map works.
pub const MIN_FACTOR_SPATIAL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Tucker core from the latent, factors from the features.
    #[default]
    Tucker,
    /// Ablation: an MLP maps the latent centroid straight to every kernel entry.
    NaiveMlp,
}

/// How a modulated layer builds its effective kernel for this forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Modulation {
    #[default]
    Generated,
    /// Force `W = 1` everywhere so the layer reduces to its base kernel.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelGenConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub ranks: [usize; 4],
    pub latent_dim: usize,
    pub core_hidden: usize,
    /// Number of hidden layers in the core MLP; 0 gives a single linear map.
    pub core_layers: usize,
    pub factor_width: usize,
    pub token_grid: usize,
    pub kind: GeneratorKind,
}

impl KernelGenConfig {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, ranks: [usize; 4], latent_dim: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            ranks,
            latent_dim,
            core_hidden: 256,
            core_layers: 2,
            factor_width: 32,
            token_grid: 8,
            kind: GeneratorKind::Tucker,
        }
    }

    pub fn mode_sizes(&self) -> [usize; 4] {
        [self.c_in, self.c_out, self.kernel, self.kernel]
    }

    pub fn core_len(&self) -> usize {
        self.ranks.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranks.iter().any(|&r| r == 0) {
            return Err(Error::config(format!("core ranks must be >= 1, got {:?}", self.ranks)));
        }
        if self.c_in == 0 || self.c_out == 0 || self.kernel == 0 || self.latent_dim == 0 {
            return Err(Error::config("kernel generator dimensions must be positive"));
        }
        if self.core_layers > 0 && self.core_hidden == 0 {
            return Err(Error::config("core_hidden must be positive"));
        }
        if self.factor_width == 0 || self.token_grid == 0 {
            return Err(Error::config("factor_width and token_grid must be positive"));
        }
        Ok(())
    }
}

/// Generator hyperparameters shared by every modulated layer of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSettings {
    pub core_hidden: usize,
    pub core_layers: usize,
    pub factor_width: usize,
    pub token_grid: usize,
    pub kind: GeneratorKind,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        let d = KernelGenConfig::new(1, 1, 1, [1; 4], 1);
        Self {
            core_hidden: d.core_hidden,
            core_layers: d.core_layers,
            factor_width: d.factor_width,
            token_grid: d.token_grid,
            kind: d.kind,
        }
    }
}

impl GeneratorSettings {
    pub fn layer(&self, c_in: usize, c_out: usize, kernel: usize, ranks: [usize; 4], latent_dim: usize) -> KernelGenConfig {
        KernelGenConfig {
            c_in,
            c_out,
            kernel,
            ranks,
            latent_dim,
            core_hidden: self.core_hidden,
            core_layers: self.core_layers,
            factor_width: self.factor_width,
            token_grid: self.token_grid,
            kind: self.kind,
        }
    }
}

/// Low-rank core, shape `(r1, r2, r3, r4)` or batched `(B, r1, r2, r3, r4)`.
#[derive(Debug, Clone)]
pub struct CoreTensor(pub Tensor);

impl CoreTensor {
    pub fn new(values: Tensor) -> Result<Self> {
        let d = values.dims();
        if !(d.len() == 4 || d.len() == 5) || d.iter().any(|&x| x == 0) {
            return Err(Error::shape(format!("core tensor must be rank 4 (or batched 5) with nonzero dims, got {d:?}")));
        }
        Ok(Self(values))
    }

    pub fn ranks(&self) -> [usize; 4] {
        let d = self.0.dims();
        let o = d.len() - 4;
        [d[o], d[o + 1], d[o + 2], d[o + 3]]
    }

    pub fn is_finite(&self) -> Result<bool> {
        all_finite(&self.0)
    }
}

/// Factor matrices `U1..U4`, each `(d_n, r_n)` or batched `(B, d_n, r_n)`.
#[derive(Debug, Clone)]
pub struct FactorSet(pub [Tensor; 4]);

impl FactorSet {
    pub fn new(factors: [Tensor; 4]) -> Result<Self> {
        let rank = factors[0].rank();
        if !(rank == 2 || rank == 3) || factors.iter().any(|f| f.rank() != rank) {
            return Err(Error::shape("factor matrices must all be rank 2 (or batched 3)"));
        }
        Ok(Self(factors))
    }

    pub fn mode_sizes(&self) -> [usize; 4] {
        let o = self.0[0].rank() - 2;
        std::array::from_fn(|n| self.0[n].dims()[o])
    }

    pub fn ranks(&self) -> [usize; 4] {
        let o = self.0[0].rank() - 2;
        std::array::from_fn(|n| self.0[n].dims()[o + 1])
    }
}

fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

/// Mean over the token axis: `(N, Cz) -> (Cz)` or `(B, N, Cz) -> (B, Cz)`.
pub fn pool_centroid(z: &Tensor) -> Result<Tensor> {
    let d = z.dims();
    if !(d.len() == 2 || d.len() == 3) {
        return Err(Error::shape(format!("latent code must be (N, Cz) or (B, N, Cz), got {d:?}")));
    }
    let axis = d.len() - 2;
    if d[axis] == 0 {
        return Err(Error::shape("latent code has no tokens"));
    }
    Ok(z.mean(axis)?)
}

/// Contracts mode `mode` (0..4) of `t` with `u`, mapping size `r_mode` to `d`.
/// `t` is `(B, a0, a1, a2, a3)` and `u` is `(B, d, r_mode)`.
pub fn mode_product(t: &Tensor, u: &Tensor, mode: usize) -> Result<Tensor> {
    if mode > 3 {
        return Err(Error::shape(format!("mode {mode} out of range for a 4-way tensor")));
    }
    let dims = t.dims().to_vec();
    let (b, d, r) = u.dims3()?;
    let axis = mode + 1;
    if dims.len() != 5 || dims[0] != b || dims[axis] != r {
        return Err(Error::shape(format!(
            "mode-{} product: tensor {:?} vs factor {:?}",
            mode + 1,
            dims,
            u.dims()
        )));
    }
    let mut perm: Vec<usize> = vec![0, axis];
    perm.extend((1..5).filter(|&a| a != axis));
    let moved = t.permute(perm.clone())?.contiguous()?;
    let rest: usize = perm[2..].iter().map(|&a| dims[a]).product();
    let prod = u.matmul(&moved.reshape((b, r, rest))?)?;
    let mut new_dims: Vec<usize> = vec![b, d];
    new_dims.extend(perm[2..].iter().map(|&a| dims[a]));
    let mut inverse = [0usize; 5];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    Ok(prod.reshape(new_dims)?.permute(inverse.to_vec())?.contiguous()?)
}

/// Expands a core with its factors in mode order 1, 2, 3, 4.
pub fn tucker_expand(core: &CoreTensor, factors: &FactorSet) -> Result<Tensor> {
    tucker_expand_ordered(core, factors, [0, 1, 2, 3])
}

/// Expands a core applying the four mode products in the given order.
pub fn tucker_expand_ordered(core: &CoreTensor, factors: &FactorSet, order: [usize; 4]) -> Result<Tensor> {
    let mut seen = [false; 4];
    for &m in &order {
        if m > 3 || seen[m] {
            return Err(Error::config(format!("invalid mode order {order:?}")));
        }
        seen[m] = true;
    }
    if core.ranks() != factors.ranks() {
        return Err(Error::shape(format!(
            "core ranks {:?} do not match factor ranks {:?}",
            core.ranks(),
            factors.ranks()
        )));
    }
    let batched = core.0.rank() == 5;
    if batched != (factors.0[0].rank() == 3) {
        return Err(Error::shape("core and factors disagree on batching"));
    }
    let (mut t, us): (Tensor, Vec<Tensor>) = if batched {
        (core.0.clone(), factors.0.to_vec())
    } else {
        (
            core.0.unsqueeze(0)?,
            factors.0.iter().map(|u| u.unsqueeze(0)).collect::<candle_core::Result<_>>()?,
        )
    };
    for &m in &order {
        t = mode_product(&t, &us[m], m)?;
    }
    if batched {
        Ok(t)
    } else {
        Ok(t.squeeze(0)?)
    }
}

/// `W1 = W0 * W` elementwise. `W` may carry a leading batch axis.
pub fn modulate(base: &Tensor, w: &Tensor) -> Result<Tensor> {
    let bd = base.dims();
    let wd = w.dims();
    let ok = bd == wd || (wd.len() == bd.len() + 1 && &wd[1..] == bd);
    if !ok {
        return Err(Error::shape(format!("modulation {wd:?} does not match base kernel {bd:?}")));
    }
    Ok(w.broadcast_mul(base)?)
}

/// MLP from the latent centroid to the flattened core.
#[derive(Debug, Clone)]
pub struct CoreGenerator {
    pub layers: Vec<Linear>,
    ranks: [usize; 4],
}

impl CoreGenerator {
    pub fn new(scope: &Scope, cfg: &KernelGenConfig) -> Result<Self> {
        Self::with_output(scope, cfg, cfg.core_len()).map(|(layers, _)| Self {
            layers,
            ranks: cfg.ranks,
        })
    }

    fn with_output(scope: &Scope, cfg: &KernelGenConfig, out: usize) -> Result<(Vec<Linear>, usize)> {
        let mut layers = Vec::new();
        let mut width = cfg.latent_dim;
        for i in 0..cfg.core_layers {
            layers.push(Linear::new(&scope.pp(format!("l{i}")), width, cfg.core_hidden)?);
            width = cfg.core_hidden;
        }
        // Zero final layer: the initial core is 0, hence W = 1 at step 0.
        layers.push(Linear::zeros(&scope.pp(format!("l{}", cfg.core_layers)), width, out)?);
        Ok((layers, out))
    }

    /// `e`: `(Cz)` or `(B, Cz)`.
    pub fn forward(&self, e: &Tensor) -> Result<CoreTensor> {
        let mut h = e.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = gelu(&h)?;
            }
        }
        let [a, b, c, d] = self.ranks;
        let values = if e.rank() == 1 {
            h.reshape((a, b, c, d))?
        } else {
            h.reshape((e.dim(0)?, a, b, c, d))?
        };
        CoreTensor::new(values)
    }
}

/// One mode's attention head: learned query rows attend over the feature tokens.
#[derive(Debug, Clone)]
pub struct FactorHead {
    pub queries: Var,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
}

impl FactorHead {
    fn new(scope: &Scope, width: usize, rank: usize, size: usize) -> Result<Self> {
        Ok(Self {
            queries: scope.var("queries", &[rank, width], Init::Normal(1.0 / (width as f64).sqrt()))?,
            key: Linear::no_bias(&scope.pp("key"), width, width)?,
            value: Linear::no_bias(&scope.pp("value"), width, width)?,
            proj: Linear::new(&scope.pp("proj"), width, size)?,
        })
    }

    /// `tokens`: `(B, T, width)` -> factor `(B, d, r)`.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let width = self.key.in_dim();
        let k = self.key.forward(tokens)?;
        let v = self.value.forward(tokens)?;
        let logits = k
            .broadcast_matmul(&self.queries.t()?)?
            .transpose(1, 2)?
            .affine(1.0 / (width as f64).sqrt(), 0.0)?; // (B, r, T)
        let attn = softmax(&logits.contiguous()?, 2)?;
        let ctx = attn.matmul(&v)?; // (B, r, width)
        Ok(self.proj.forward(&ctx)?.transpose(1, 2)?.contiguous()?)
    }
}

/// Shared conv stem plus one attention head per tensor mode.
#[derive(Debug, Clone)]
pub struct FactorGenerator {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub heads: [FactorHead; 4],
    token_grid: usize,
}

impl FactorGenerator {
    pub fn new(scope: &Scope, cfg: &KernelGenConfig) -> Result<Self> {
        let w = cfg.factor_width;
        let sizes = cfg.mode_sizes();
        let heads = [0, 1, 2, 3].map(|n| FactorHead::new(&scope.pp(format!("head{n}")), w, cfg.ranks[n], sizes[n]));
        let [h0, h1, h2, h3] = heads;
        Ok(Self {
            conv1: Conv2d::new(&scope.pp("conv1"), cfg.c_in, w, 3, 2)?,
            conv2: Conv2d::new(&scope.pp("conv2"), w, w, 3, 2)?,
            heads: [h0?, h1?, h2?, h3?],
            token_grid: cfg.token_grid,
        })
    }

    /// Token grid side for a stem output of `side` pixels; maps smaller than
    /// the configured grid are used at full resolution.
    pub fn grid_for(&self, side: usize) -> usize {
        self.token_grid.min(side)
    }

    /// `feat`: `(B, C_in, H, W)` -> tokens `(B, T, width)`.
    pub fn tokens(&self, feat: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = feat.dims4()?;
        if h < MIN_FACTOR_SPATIAL || w < MIN_FACTOR_SPATIAL {
            return Err(Error::shape(format!(
                "feature map {h}x{w} too small for the factor stem (needs >= {MIN_FACTOR_SPATIAL})"
            )));
        }
        let x = gelu(&self.conv1.forward(feat)?)?;
        let x = gelu(&self.conv2.forward(&x)?)?;
        let (b, c, sh, sw) = x.dims4()?;
        let pooled = nn::adaptive_avg_pool(&x, self.grid_for(sh), self.grid_for(sw))?;
        let t = pooled.dims()[2] * pooled.dims()[3];
        Ok(pooled.reshape((b, c, t))?.transpose(1, 2)?.contiguous()?)
    }

    pub fn factors_from_tokens(&self, tokens: &Tensor) -> Result<FactorSet> {
        let [a, b, c, d] = &self.heads;
        FactorSet::new([a.forward(tokens)?, b.forward(tokens)?, c.forward(tokens)?, d.forward(tokens)?])
    }

    pub fn forward(&self, feat: &Tensor) -> Result<FactorSet> {
        self.factors_from_tokens(&self.tokens(feat)?)
    }
}

/// Ablation generator: centroid MLP emitting every kernel entry directly.
#[derive(Debug, Clone)]
pub struct NaiveKernelMlp {
    pub layers: Vec<Linear>,
    shape: [usize; 4],
}

impl NaiveKernelMlp {
    pub fn new(scope: &Scope, cfg: &KernelGenConfig) -> Result<Self> {
        let shape = [cfg.c_in, cfg.c_out, cfg.kernel, cfg.kernel];
        let (layers, _) = CoreGenerator::with_output(scope, cfg, shape.iter().product())?;
        Ok(Self { layers, shape })
    }

    /// `e`: `(B, Cz)` -> raw modulation logits `(B, C_in, C_out, k, k)`.
    pub fn forward(&self, e: &Tensor) -> Result<Tensor> {
        let mut h = e.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = gelu(&h)?;
            }
        }
        let [a, b, c, d] = self.shape;
        Ok(h.reshape((e.dim(0)?, a, b, c, d))?)
    }
}

#[derive(Debug, Clone)]
pub enum Generator {
    Tucker { core: CoreGenerator, factors: FactorGenerator },
    Naive(NaiveKernelMlp),
}

impl Generator {
    pub fn new(scope: &Scope, cfg: &KernelGenConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            GeneratorKind::Tucker => Generator::Tucker {
                core: CoreGenerator::new(&scope.pp("core"), cfg)?,
                factors: FactorGenerator::new(&scope.pp("factors"), cfg)?,
            },
            GeneratorKind::NaiveMlp => Generator::Naive(NaiveKernelMlp::new(&scope.pp("naive"), cfg)?),
        })
    }

    /// Unbounded modulation logits, `(B, C_in, C_out, k, k)`.
    pub fn logits(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let e = pool_centroid(z)?;
        match self {
            Generator::Tucker { core, factors } => {
                let core = core.forward(&e)?;
                let factors = factors.forward(x)?;
                tucker_expand(&core, &factors)
            }
            Generator::Naive(mlp) => mlp.forward(&e),
        }
    }

    /// Bounded modulation `W = 1 + tanh(logits)`.
    pub fn modulation(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        Ok((self.logits(x, z)?.tanh()? + 1.0)?)
    }
}

/// Base kernel `W0` (C_in, C_out, k, k) plus optional bias.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub base: Var,
    pub bias: Option<Var>,
}

/// A convolution whose kernel is modulated per batch element.
///
/// Without a generator this is a plain stride-1 "same" convolution with `W0`.
#[derive(Debug, Clone)]
pub struct KsConv {
    pub spec: KernelSpec,
    pub generator: Option<Generator>,
    pub cfg: KernelGenConfig,
}

impl KsConv {
    pub fn new(scope: &Scope, cfg: KernelGenConfig, modulated: bool) -> Result<Self> {
        cfg.validate()?;
        let bound = 1.0 / ((cfg.c_in * cfg.kernel * cfg.kernel) as f64).sqrt();
        let spec = KernelSpec {
            base: scope.var("base", &[cfg.c_in, cfg.c_out, cfg.kernel, cfg.kernel], Init::Uniform(bound))?,
            bias: Some(scope.var("bias", &[cfg.c_out], Init::Uniform(bound))?),
        };
        let generator = if modulated {
            Some(Generator::new(&scope.pp("gen"), &cfg)?)
        } else {
            None
        };
        Ok(Self { spec, generator, cfg })
    }

    pub fn is_modulated(&self) -> bool {
        self.generator.is_some()
    }

    /// Conv-layout view `(C_out, C_in, k, k)` of the base kernel.
    fn base_conv_layout(&self) -> Result<Tensor> {
        Ok(self.spec.base.as_tensor().transpose(0, 1)?.contiguous()?)
    }

    /// Effective per-sample kernels `W1`, `(B, C_in, C_out, k, k)`.
    pub fn effective_kernel(&self, x: &Tensor, z: Option<&Tensor>, mode: Modulation) -> Result<Tensor> {
        let b = x.dim(0)?;
        let base = self.spec.base.as_tensor();
        let w = match (&self.generator, mode) {
            (Some(g), Modulation::Generated) => {
                let z = z.ok_or_else(|| Error::config("modulated convolution needs a latent code"))?;
                check_latent(z, b, self.cfg.latent_dim)?;
                g.modulation(x, z)?
            }
            _ => {
                let mut d = vec![b];
                d.extend_from_slice(base.dims());
                Tensor::ones(d, base.dtype(), base.device())?
            }
        };
        modulate(base, &w)
    }

    pub fn forward(&self, x: &Tensor, z: Option<&Tensor>, mode: Modulation) -> Result<Tensor> {
        let c_in = x.dim(1)?;
        if c_in != self.cfg.c_in {
            return Err(Error::shape(format!("ks-conv expects {} input channels, got {c_in}", self.cfg.c_in)));
        }
        let pad = self.cfg.kernel / 2;
        let y = if self.generator.is_none() {
            conv2d(x, &self.base_conv_layout()?, 1, pad)?
        } else {
            let w1 = self.effective_kernel(x, z, mode)?;
            conv2d(x, &w1.transpose(1, 2)?.contiguous()?, 1, pad)?
        };
        nn::add_channel_bias(&y, self.spec.bias.as_ref())
    }
}

fn check_latent(z: &Tensor, batch: usize, latent_dim: usize) -> Result<()> {
    match z.dims() {
        [b, n, c] if *b == batch && *n > 0 && *c == latent_dim => Ok(()),
        d => Err(Error::shape(format!(
            "latent code {d:?} incompatible with batch {batch} and Cz={latent_dim}"
        ))),
    }
}

/// Closed-form learnable-parameter count of the factorized generator
/// (core MLP plus factor stem and heads), excluding the shared base kernel.
pub fn param_count(cfg: &KernelGenConfig) -> usize {
    let core = mlp_count(cfg, cfg.core_len());
    let w = cfg.factor_width;
    let stem = (cfg.c_in * w * 9 + w) + (w * w * 9 + w);
    let heads: usize = cfg
        .ranks
        .iter()
        .zip(cfg.mode_sizes())
        .map(|(&r, d)| r * w + 2 * w * w + w * d + d)
        .sum();
    core + stem + heads
}

/// Parameter count of the naive generator: same hidden stack, but the last
/// layer emits all `C_in * C_out * k^2` kernel entries.
pub fn naive_mlp_param_count(cfg: &KernelGenConfig) -> usize {
    mlp_count(cfg, cfg.c_in * cfg.c_out * cfg.kernel * cfg.kernel)
}

fn mlp_count(cfg: &KernelGenConfig, out: usize) -> usize {
    let mut n = 0;
    let mut width = cfg.latent_dim;
    for _ in 0..cfg.core_layers {
        n += width * cfg.core_hidden + cfg.core_hidden;
        width = cfg.core_hidden;
    }
    n + width * out + out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;

    fn t(v: Vec<f64>, d: &[usize]) -> Tensor {
        Tensor::from_vec(v, d, &Device::Cpu).unwrap()
    }

    #[test]
    fn centroid_of_two_tokens() {
        let z = t(vec![1.0, 3.0, 3.0, 5.0], &[2, 2]);
        assert_eq!(pool_centroid(&z).unwrap().to_vec1::<f64>().unwrap(), vec![2.0, 4.0]);
        let one = t(vec![0.5, -1.5, 2.0], &[1, 3]);
        assert_eq!(pool_centroid(&one).unwrap().to_vec1::<f64>().unwrap(), vec![0.5, -1.5, 2.0]);
        assert!(pool_centroid(&Tensor::zeros((0, 3), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn rank_one_ones_expand_to_ones() {
        let core = CoreTensor::new(t(vec![1.0], &[1, 1, 1, 1])).unwrap();
        let f = FactorSet::new([
            t(vec![1.0; 2], &[2, 1]),
            t(vec![1.0; 2], &[2, 1]),
            t(vec![1.0], &[1, 1]),
            t(vec![1.0], &[1, 1]),
        ])
        .unwrap();
        let w = tucker_expand(&core, &f).unwrap();
        assert_eq!(w.dims(), &[2, 2, 1, 1]);
        assert_eq!(w.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn expand_rejects_mismatched_ranks() {
        let core = CoreTensor::new(Tensor::ones((2, 2, 1, 1), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let f = FactorSet::new([
            Tensor::ones((3, 1), DType::F64, &Device::Cpu).unwrap(),
            Tensor::ones((3, 2), DType::F64, &Device::Cpu).unwrap(),
            Tensor::ones((1, 1), DType::F64, &Device::Cpu).unwrap(),
            Tensor::ones((1, 1), DType::F64, &Device::Cpu).unwrap(),
        ])
        .unwrap();
        assert!(matches!(tucker_expand(&core, &f), Err(Error::Shape(_))));
    }

    #[test]
    fn modulate_identity_and_annihilator() {
        let base = t((0..8).map(|i| i as f64 - 3.0).collect(), &[2, 2, 1, 2]);
        let ones = Tensor::ones((2, 2, 1, 2), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        let a = modulate(&base, &ones).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, base.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let z = modulate(&base, &zeros).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(modulate(&base, &Tensor::ones((2, 2, 2, 1), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn zero_final_layer_gives_zero_core_and_expected_size() {
        let store = ParamStore::new(DType::F32, 1);
        let cfg = KernelGenConfig::new(32, 32, 3, [4, 4, 2, 2], 128);
        let g = CoreGenerator::new(&store.root(), &cfg).unwrap();
        let e = Tensor::ones(128, DType::F32, &Device::Cpu).unwrap();
        let core = g.forward(&e).unwrap();
        assert_eq!(core.ranks(), [4, 4, 2, 2]);
        assert_eq!(core.0.elem_count(), 64);
        assert!(core.0.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn factor_shapes_follow_mode_sizes() {
        let store = ParamStore::new(DType::F32, 2);
        let mut cfg = KernelGenConfig::new(32, 32, 3, [4, 4, 2, 2], 128);
        cfg.factor_width = 8;
        let fg = FactorGenerator::new(&store.root(), &cfg).unwrap();
        let x = Tensor::zeros((2, 32, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let f = fg.forward(&x).unwrap();
        let dims: Vec<Vec<usize>> = f.0.iter().map(|u| u.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![2, 32, 4], vec![2, 32, 4], vec![2, 3, 2], vec![2, 3, 2]]);
        let one = Tensor::zeros((1, 32, 1, 1), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(fg.tokens(&one).unwrap().dims(), &[1, 1, 8]);
        let empty = Tensor::zeros((1, 32, 0, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(fg.forward(&empty), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_tokens_give_identical_factor_columns() {
        let store = ParamStore::new(DType::F64, 3);
        let mut cfg = KernelGenConfig::new(4, 5, 3, [3, 2, 2, 2], 8);
        cfg.factor_width = 6;
        let fg = FactorGenerator::new(&store.root(), &cfg).unwrap();
        let row: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
        let tokens = t(row.repeat(9), &[1, 9, 6]);
        let f = fg.factors_from_tokens(&tokens).unwrap();
        for u in &f.0 {
            let u = u.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
            for r in &u {
                for v in r {
                    assert!((v - r[0]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unmodulated_layer_needs_no_latent_and_zero_base_gives_bias() {
        let store = ParamStore::new(DType::F64, 4);
        let cfg = KernelGenConfig::new(2, 3, 3, [1, 1, 1, 1], 4);
        let layer = KsConv::new(&store.root(), cfg, true).unwrap();
        layer.spec.base.set(&layer.spec.base.zeros_like().unwrap()).unwrap();
        let x = Tensor::ones((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let z = Tensor::ones((1, 2, 4), DType::F64, &Device::Cpu).unwrap();
        let y = layer.forward(&x, Some(&z), Modulation::Generated).unwrap();
        let bias = layer.spec.bias.as_ref().unwrap().to_vec1::<f64>().unwrap();
        let y = y.squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        for (c, plane) in y.iter().enumerate() {
            assert!(plane.iter().flatten().all(|v| *v == bias[c]));
        }
        assert!(layer.forward(&x, None, Modulation::Generated).is_err());
    }

    #[test]
    fn factorized_count_is_linear_in_mode_sizes() {
        let base = KernelGenConfig::new(16, 16, 3, [4, 4, 2, 2], 64);
        for mode in 0..2 {
            let at = |d: usize| {
                let mut c = base;
                if mode == 0 {
                    c.c_in = d
                } else {
                    c.c_out = d
                }
                param_count(&c) as i64
            };
            assert_eq!(at(18) - at(17), at(17) - at(16));
            assert_eq!(at(40) - at(20), 20 * (at(17) - at(16)));
        }
    }
}

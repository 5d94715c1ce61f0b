//! Pyramid latent fusion encoders.
//!
//! The prior encoder sees PAN, upsampled LRMS and the reference HRMS and
//! compresses them to an `(N, Cz)` token matrix. The condition encoder sees
//! only PAN and LRMS. Each pyramid stage refines a branch feature `X` under a
//! guidance feature `Y` with linear-complexity cross-attention and a gated
//! blend, then halves the resolution.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, gelu, sigmoid, softmax, Conv2d, Linear, Scope};

/// What to do when the input size is not a multiple of `2^num_stages`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    #[default]
    Error,
    /// Mirror-pad bottom/right edges up to the next multiple.
    Reflect,
}

impl PadPolicy {
    /// Applies the policy to an NCHW map.
    pub fn apply(self, x: &Tensor, multiple: usize) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % multiple == 0 && w % multiple == 0 {
            return Ok(x.clone());
        }
        match self {
            PadPolicy::Error => Err(Error::PaddingRequired { height: h, width: w, multiple }),
            PadPolicy::Reflect => nn::reflect_pad_to(x, multiple),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlfeConfig {
    pub bands: usize,
    /// Stem width; doubles after every stage.
    pub base_width: usize,
    pub num_stages: usize,
    /// Side of the token grid; `N = token_side^2`.
    pub token_side: usize,
    pub latent_dim: usize,
    #[serde(default)]
    pub pad_policy: PadPolicy,
}

impl Default for PlfeConfig {
    fn default() -> Self {
        Self {
            bands: 8,
            base_width: 32,
            num_stages: 3,
            token_side: 4,
            latent_dim: 128,
            pad_policy: PadPolicy::Error,
        }
    }
}

impl PlfeConfig {
    pub fn num_tokens(&self) -> usize {
        self.token_side * self.token_side
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.num_stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.base_width == 0 || self.latent_dim == 0 || self.token_side == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.num_stages == 0 {
            return Err(Error::config("encoder needs at least one pyramid stage"));
        }
        Ok(())
    }
}

/// Softmax-normalized attention pieces, all `(B, L, d)` with `L = H*W`.
#[derive(Debug, Clone)]
pub struct AttentionParts {
    /// Rows sum to one over channels.
    pub query: Tensor,
    /// Columns sum to one over positions.
    pub key: Tensor,
    pub value: Tensor,
    /// `(B, d, d)` context `K^T V`.
    pub context: Tensor,
    /// `Q A`, `(B, L, d)`.
    pub mixed: Tensor,
}

/// Efficient attention on flattened maps: `Q` softmaxed over channels,
/// `K` over positions, output `Q (K^T V)`. Inputs are raw `(B, L, d)`.
pub fn efficient_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<AttentionParts> {
    let (b, l, d) = q.dims3()?;
    if k.dims() != [b, l, d] || v.dims() != [b, l, d] {
        return Err(Error::shape(format!(
            "attention operands disagree: q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let query = softmax(q, 2)?;
    let key = softmax(k, 1)?;
    let context = key.transpose(1, 2)?.contiguous()?.matmul(v)?;
    let mixed = query.matmul(&context)?;
    Ok(AttentionParts {
        query,
        key,
        value: v.clone(),
        context,
        mixed,
    })
}

fn flatten_map(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

fn unflatten_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Cross-attention where the refined branch provides queries and the
/// guidance provides keys and values.
#[derive(Debug, Clone)]
pub struct LinearCrossAttention {
    pub to_q: Conv2d,
    pub to_k: Conv2d,
    pub to_v: Conv2d,
    pub out: Conv2d,
}

impl LinearCrossAttention {
    pub fn new(scope: &Scope, width: usize, guide_width: usize) -> Result<Self> {
        Ok(Self {
            to_q: Conv2d::new(&scope.pp("q"), width, width, 1, 1)?,
            to_k: Conv2d::new(&scope.pp("k"), guide_width, width, 1, 1)?,
            to_v: Conv2d::new(&scope.pp("v"), guide_width, width, 1, 1)?,
            out: Conv2d::new(&scope.pp("out"), width, width, 1, 1)?,
        })
    }

    pub fn parts(&self, x: &Tensor, y: &Tensor) -> Result<AttentionParts> {
        let (_, cx, h, w) = x.dims4()?;
        let (_, cy, hy, wy) = y.dims4()?;
        if cx != self.to_q.in_channels() || cy != self.to_k.in_channels() || (h, w) != (hy, wy) {
            return Err(Error::shape(format!(
                "cross-attention got X {:?} and Y {:?}",
                x.dims(),
                y.dims()
            )));
        }
        efficient_attention(
            &flatten_map(&self.to_q.forward(x)?)?,
            &flatten_map(&self.to_k.forward(y)?)?,
            &flatten_map(&self.to_v.forward(y)?)?,
        )
    }

    pub fn forward(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let parts = self.parts(x, y)?;
        self.out.forward(&unflatten_map(&parts.mixed, h, w)?)
    }
}

/// `F = G*X + (1-G)*Proj(Y) + O` with `G = sigmoid(conv([X, Proj(Y)]))`.
#[derive(Debug, Clone)]
pub struct FusionGate {
    pub proj: Conv2d,
    pub gate: Conv2d,
}

impl FusionGate {
    pub fn new(scope: &Scope, width: usize, guide_width: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(&scope.pp("proj"), guide_width, width, 1, 1)?,
            gate: Conv2d::new(&scope.pp("gate"), 2 * width, width, 1, 1)?,
        })
    }

    pub fn gate_values(&self, x: &Tensor, projected: &Tensor) -> Result<Tensor> {
        if x.dims() != projected.dims() {
            return Err(Error::shape(format!(
                "gate inputs differ: {:?} vs {:?}",
                x.dims(),
                projected.dims()
            )));
        }
        sigmoid(&self.gate.forward(&Tensor::cat(&[x, projected], 1)?)?)
    }

    pub fn forward(&self, x: &Tensor, y: &Tensor, o: &Tensor) -> Result<Tensor> {
        let py = self.proj.forward(y)?;
        let g = self.gate_values(x, &py)?;
        let blend = ((&g * x)? + (g.affine(-1.0, 1.0)? * &py)?)?;
        Ok((blend + o)?)
    }
}

/// One pyramid level for one refined branch.
#[derive(Debug, Clone)]
pub struct GuidedStage {
    pub attn: LinearCrossAttention,
    pub gate: FusionGate,
    pub down: Conv2d,
}

impl GuidedStage {
    fn new(scope: &Scope, width: usize, guide_width: usize, out_width: usize) -> Result<Self> {
        Ok(Self {
            attn: LinearCrossAttention::new(&scope.pp("attn"), width, guide_width)?,
            gate: FusionGate::new(&scope.pp("gate"), width, guide_width)?,
            down: Conv2d::new(&scope.pp("down"), width, out_width, 3, 2)?,
        })
    }

    /// Returns the fused map before downsampling and the downsampled map.
    fn forward(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let o = self.attn.forward(x, y)?;
        let f = self.gate.forward(x, y, &o)?;
        let next = gelu(&self.down.forward(&f)?)?;
        Ok((f, next))
    }
}

#[derive(Debug, Clone)]
struct Stem(Conv2d);

impl Stem {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        gelu(&self.0.forward(x)?)
    }
}

#[derive(Debug, Clone)]
struct GuidedBranch {
    stem: Stem,
    stages: Vec<GuidedStage>,
}

impl GuidedBranch {
    fn new(scope: &Scope, cfg: &PlfeConfig, in_channels: usize) -> Result<Self> {
        let stem = Stem(Conv2d::new(&scope.pp("stem"), in_channels, cfg.base_width, 3, 1)?);
        let stages = (0..cfg.num_stages)
            .map(|s| {
                GuidedStage::new(
                    &scope.pp(format!("stage{s}")),
                    cfg.stage_width(s),
                    cfg.base_width,
                    cfg.stage_width(s + 1),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { stem, stages })
    }

    /// Runs all stages; `guides[s]` is the guidance map at stage `s`.
    fn forward(&self, x: &Tensor, guides: &[Tensor], trace: &mut Vec<Vec<usize>>) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?;
        for (stage, y) in self.stages.iter().zip(guides) {
            let (f, next) = stage.forward(&h, y)?;
            trace.push(f.dims().to_vec());
            h = next;
        }
        Ok(h)
    }
}

/// Builds the guidance pyramid by repeated bilinear halving.
fn guidance_pyramid(y: Tensor, stages: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(stages);
    let mut cur = y;
    for s in 0..stages {
        if s > 0 {
            cur = nn::bilinear_half(&cur)?;
        }
        out.push(cur.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct TokenHead(Linear);

impl TokenHead {
    /// `(B, C, h, w)` -> `(B, N, Cz)`.
    fn forward(&self, feat: &Tensor, side: usize) -> Result<Tensor> {
        let pooled = nn::adaptive_avg_pool(feat, side, side)?;
        self.0.forward(&flatten_map(&pooled)?)
    }
}

fn check_inputs(pan: &Tensor, others: &[&Tensor], bands: usize) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = pan.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("PAN must have one channel, got {c}")));
    }
    for t in others {
        let (bo, co, ho, wo) = t.dims4()?;
        if (bo, ho, wo) != (b, h, w) || co != bands {
            return Err(Error::shape(format!(
                "expected a ({b}, {bands}, {h}, {w}) image, got {:?}",
                t.dims()
            )));
        }
    }
    Ok((b, h, w))
}

/// Prior encoder: `(P, M, G) -> z`.
#[derive(Debug, Clone)]
pub struct PriorEncoder {
    pub cfg: PlfeConfig,
    pan: GuidedBranch,
    lrms: GuidedBranch,
    guide: Stem,
    head: TokenHead,
}

impl PriorEncoder {
    pub fn new(scope: &Scope, cfg: PlfeConfig) -> Result<Self> {
        cfg.validate()?;
        let out_width = 2 * cfg.stage_width(cfg.num_stages);
        Ok(Self {
            pan: GuidedBranch::new(&scope.pp("pan"), &cfg, 1)?,
            lrms: GuidedBranch::new(&scope.pp("lrms"), &cfg, cfg.bands)?,
            guide: Stem(Conv2d::new(&scope.pp("hrms.stem"), cfg.bands, cfg.base_width, 3, 1)?),
            head: TokenHead(Linear::new(&scope.pp("head"), out_width, cfg.latent_dim)?),
            cfg,
        })
    }

    pub fn forward(&self, pan: &Tensor, lrms: &Tensor, gt: &Tensor) -> Result<Tensor> {
        self.forward_traced(pan, lrms, gt).map(|(z, _)| z)
    }

    /// Also returns the fused map shape at every stage of the PAN branch.
    pub fn forward_traced(&self, pan: &Tensor, lrms: &Tensor, gt: &Tensor) -> Result<(Tensor, Vec<Vec<usize>>)> {
        check_inputs(pan, &[lrms, gt], self.cfg.bands)?;
        let m = self.cfg.size_multiple();
        let (pan, lrms, gt) = (
            self.cfg.pad_policy.apply(pan, m)?,
            self.cfg.pad_policy.apply(lrms, m)?,
            self.cfg.pad_policy.apply(gt, m)?,
        );
        let guides = guidance_pyramid(self.guide.forward(&gt)?, self.cfg.num_stages)?;
        let mut trace = Vec::new();
        let fp = self.pan.forward(&pan, &guides, &mut trace)?;
        let fl = self.lrms.forward(&lrms, &guides, &mut Vec::new())?;
        trace.push(fp.dims().to_vec());
        let z = self.head.forward(&Tensor::cat(&[&fp, &fl], 1)?, self.cfg.token_side)?;
        Ok((z, trace))
    }
}

/// Condition encoder: `(P, M) -> c`, with the PAN feature guiding the LRMS branch.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    pub cfg: PlfeConfig,
    lrms: GuidedBranch,
    guide: Stem,
    head: TokenHead,
}

impl ConditionEncoder {
    pub fn new(scope: &Scope, cfg: PlfeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            lrms: GuidedBranch::new(&scope.pp("lrms"), &cfg, cfg.bands)?,
            guide: Stem(Conv2d::new(&scope.pp("pan.stem"), 1, cfg.base_width, 3, 1)?),
            head: TokenHead(Linear::new(
                &scope.pp("head"),
                cfg.stage_width(cfg.num_stages),
                cfg.latent_dim,
            )?),
            cfg,
        })
    }

    pub fn forward(&self, pan: &Tensor, lrms: &Tensor) -> Result<Tensor> {
        check_inputs(pan, &[lrms], self.cfg.bands)?;
        let m = self.cfg.size_multiple();
        let (pan, lrms) = (self.cfg.pad_policy.apply(pan, m)?, self.cfg.pad_policy.apply(lrms, m)?);
        let guides = guidance_pyramid(self.guide.forward(&pan)?, self.cfg.num_stages)?;
        let fl = self.lrms.forward(&lrms, &guides, &mut Vec::new())?;
        self.head.forward(&fl, self.cfg.token_side)
    }
}

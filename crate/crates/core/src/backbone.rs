//! Detail-injection fusion networks hosting modulated convolutions.
//!
//! Images are NCHW tensors: PAN `(B, 1, H, W)`, upsampled LRMS `(B, C, H, W)`.
//! Every network predicts a residual that is added back to the LRMS.

use std::collections::BTreeSet;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernelgen::{GeneratorSettings, KsConv, Modulation};
use crate::nn::{self, gelu, Conv2d, Scope};
use crate::plfe::PadPolicy;

/// `dup_C(P) - M`.
pub fn detail_input(pan: &Tensor, lrms: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = lrms.dims4()?;
    let pd = pan.dims4()?;
    if pd != (b, 1, h, w) {
        return Err(Error::shape(format!(
            "PAN {:?} does not match LRMS {:?}",
            pan.dims(),
            lrms.dims()
        )));
    }
    Ok(pan.broadcast_as((b, c, h, w))?.sub(lrms)?)
}

/// Averages consecutive groups of `factor` tokens: `(B, N, Cz) -> (B, N/factor, Cz)`.
pub fn rescale_latent(z: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, n, c) = z.dims3()?;
    if factor == 0 || n % factor != 0 {
        return Err(Error::shape(format!("cannot pool {n} tokens by {factor}")));
    }
    if factor == 1 {
        return Ok(z.clone());
    }
    Ok(z.reshape((b, n / factor, factor, c))?.mean(2)?)
}

/// Anything that fuses `(P, M)` into an HRMS estimate under a latent code.
pub trait Fusion {
    fn fuse(&self, pan: &Tensor, lrms: &Tensor, z: Option<&Tensor>, mode: Modulation) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub bands: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Core ranks per depth.
    pub ranks: Vec<[usize; 4]>,
    /// Token pooling factor per depth.
    pub latent_pool: Vec<usize>,
    pub latent_dim: usize,
    pub modulated: bool,
    #[serde(default)]
    pub generator: GeneratorSettings,
    #[serde(default)]
    pub pad_policy: PadPolicy,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            bands: 8,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2, 4],
            ranks: vec![[4, 4, 2, 2], [4, 4, 2, 2], [4, 4, 2, 2], [8, 8, 2, 2]],
            latent_pool: vec![1, 2, 2, 4],
            latent_dim: 128,
            modulated: true,
            generator: GeneratorSettings::default(),
            pad_policy: PadPolicy::Error,
        }
    }
}

impl BackboneConfig {
    pub fn depth(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn size_multiple(&self) -> usize {
        1 << (self.depth() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.depth();
        if d == 0 {
            return Err(Error::config("backbone needs at least one level"));
        }
        if self.ranks.len() != d || self.latent_pool.len() != d {
            return Err(Error::config(format!(
                "backbone has {d} levels but {} rank tuples and {} pooling factors",
                self.ranks.len(),
                self.latent_pool.len()
            )));
        }
        if self.bands == 0 || self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return Err(Error::config("backbone widths must be positive"));
        }
        Ok(())
    }
}

/// Residual block: modulated 3x3, GELU, plain 3x3, plus a 1x1 skip when
/// the width changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: KsConv,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub latent_pool: usize,
}

impl ResBlock {
    pub fn new(
        scope: &Scope,
        c_in: usize,
        c_out: usize,
        ranks: [usize; 4],
        latent_pool: usize,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        let layer = cfg.generator.layer(c_in, c_out, 3, ranks, cfg.latent_dim);
        Ok(Self {
            conv1: KsConv::new(&scope.pp("conv1"), layer, cfg.modulated)?,
            conv2: Conv2d::new(&scope.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&scope.pp("skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
            latent_pool,
        })
    }

    pub fn forward(&self, x: &Tensor, z: Option<&Tensor>, mode: Modulation) -> Result<Tensor> {
        let zl = match z {
            Some(z) if self.conv1.is_modulated() => Some(rescale_latent(z, self.latent_pool)?),
            _ => None,
        };
        let h = gelu(&self.conv1.forward(x, zl.as_ref(), mode)?)?;
        let h = self.conv2.forward(&h)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + s)?)
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    conv: Conv2d,
    block: ResBlock,
}

/// Four-level encoder/decoder with concatenation skips.
#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: BackboneConfig,
    head: Conv2d,
    encoders: Vec<ResBlock>,
    downs: Vec<Conv2d>,
    bottom: ResBlock,
    ups: Vec<UpStage>,
    out: Conv2d,
}

impl UNet {
    pub fn new(scope: &Scope, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.depth();
        let mut encoders = Vec::with_capacity(d);
        let mut downs = Vec::with_capacity(d - 1);
        let mut c_prev = cfg.channels(0);
        for l in 0..d {
            let c = cfg.channels(l);
            encoders.push(ResBlock::new(
                &scope.pp(format!("enc{l}")),
                c_prev,
                c,
                cfg.ranks[l],
                cfg.latent_pool[l],
                &cfg,
            )?);
            if l + 1 < d {
                downs.push(Conv2d::new(&scope.pp(format!("down{l}")), c, c, 3, 2)?);
            }
            c_prev = c;
        }
        let top = d - 1;
        let bottom = ResBlock::new(
            &scope.pp(format!("dec{top}")),
            cfg.channels(top),
            cfg.channels(top),
            cfg.ranks[top],
            cfg.latent_pool[top],
            &cfg,
        )?;
        let mut ups = Vec::with_capacity(top);
        for l in (0..top).rev() {
            let c = cfg.channels(l);
            ups.push(UpStage {
                conv: Conv2d::new(&scope.pp(format!("up{l}")), cfg.channels(l + 1), c, 3, 1)?,
                block: ResBlock::new(
                    &scope.pp(format!("dec{l}")),
                    2 * c,
                    c,
                    cfg.ranks[l],
                    cfg.latent_pool[l],
                    &cfg,
                )?,
            });
        }
        Ok(Self {
            head: Conv2d::new(&scope.pp("head"), cfg.bands, cfg.channels(0), 3, 1)?,
            out: Conv2d::zeros(&scope.pp("out"), cfg.channels(0), cfg.bands, 3)?,
            encoders,
            downs,
            bottom,
            ups,
            cfg,
        })
    }

    /// Every residual block, encoder first.
    pub fn blocks(&self) -> Vec<&ResBlock> {
        let mut v: Vec<&ResBlock> = self.encoders.iter().collect();
        v.push(&self.bottom);
        v.extend(self.ups.iter().map(|u| &u.block));
        v
    }

    pub fn forward(&self, pan: &Tensor, lrms: &Tensor, z: Option<&Tensor>, mode: Modulation) -> Result<Tensor> {
        let (_, c, h, w) = lrms.dims4()?;
        if c != self.cfg.bands {
            return Err(Error::shape(format!("backbone expects {} bands, got {c}", self.cfg.bands)));
        }
        let mult = self.cfg.size_multiple();
        let (pan_p, lrms_p) = (
            self.cfg.pad_policy.apply(pan, mult)?,
            self.cfg.pad_policy.apply(lrms, mult)?,
        );
        let x = self.head.forward(&detail_input(&pan_p, &lrms_p)?)?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut cur = x;
        for (l, enc) in self.encoders.iter().enumerate() {
            cur = enc.forward(&cur, z, mode)?;
            if l < self.downs.len() {
                skips.push(cur.clone());
                cur = self.downs[l].forward(&cur)?;
            }
        }
        cur = self.bottom.forward(&cur, z, mode)?;
        for up in &self.ups {
            let skip = skips.pop().expect("one skip per up stage");
            let u = up.conv.forward(&nn::upsample_nearest2(&cur)?)?;
            cur = up.block.forward(&Tensor::cat(&[&u, &skip], 1)?, z, mode)?;
        }
        let res = self.out.forward(&cur)?;
        let res = if res.dims()[2] != h || res.dims()[3] != w {
            res.narrow(2, 0, h)?.narrow(3, 0, w)?
        } else {
            res
        };
        Ok((res + lrms)?)
    }
}

impl Fusion for UNet {
    fn fuse(&self, pan: &Tensor, lrms: &Tensor, z: Option<&Tensor>, mode: Modulation) -> Result<Tensor> {
        self.forward(pan, lrms, z, mode)
    }
}

/// How a described network builds its first feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetInput {
    /// `dup(P) - M`, `C` channels.
    Detail,
    /// `[P, M]`, `C + 1` channels.
    Concat,
}

/// One layer of a plain residual CNN description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { name: String, c_in: usize, c_out: usize, kernel: usize },
    Relu { name: String },
    /// conv1, ReLU, conv2, identity skip, ReLU; convs named `<name>.conv1/2`.
    ResBlock { name: String, channels: usize },
}

impl LayerSpec {
    fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. } | LayerSpec::Relu { name } | LayerSpec::ResBlock { name, .. } => name,
        }
    }
}

/// Description of a third-party style fusion network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input: NetInput,
    pub bands: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    /// Detail input, conv C->32, four 32-channel residual blocks, conv 32->C.
    pub fn fusionnet(bands: usize) -> Self {
        let mut layers = vec![
            LayerSpec::Conv { name: "conv_in".into(), c_in: bands, c_out: 32, kernel: 3 },
            LayerSpec::Relu { name: "act_in".into() },
        ];
        layers.extend((1..=4).map(|i| LayerSpec::ResBlock { name: format!("res{i}"), channels: 32 }));
        layers.push(LayerSpec::Conv { name: "conv_out".into(), c_in: 32, c_out: bands, kernel: 3 });
        Self { input: NetInput::Detail, bands, layers }
    }

    /// Names of every convolution inside the residual blocks.
    pub fn fusionnet_designations() -> Vec<String> {
        (1..=4).flat_map(|i| [format!("res{i}.conv1"), format!("res{i}.conv2")]).collect()
    }

    /// `[P, M]` input, three 64-channel convolutions.
    pub fn dicnn(bands: usize) -> Self {
        Self {
            input: NetInput::Concat,
            bands,
            layers: vec![
                LayerSpec::Conv { name: "conv1".into(), c_in: bands + 1, c_out: 64, kernel: 3 },
                LayerSpec::Relu { name: "act1".into() },
                LayerSpec::Conv { name: "conv2".into(), c_in: 64, c_out: 64, kernel: 3 },
                LayerSpec::Relu { name: "act2".into() },
                LayerSpec::Conv { name: "conv3".into(), c_in: 64, c_out: bands, kernel: 3 },
            ],
        }
    }

    pub fn conv_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for l in &self.layers {
            match l {
                LayerSpec::Conv { name, .. } => v.push(name.clone()),
                LayerSpec::ResBlock { name, .. } => {
                    v.push(format!("{name}.conv1"));
                    v.push(format!("{name}.conv2"));
                }
                LayerSpec::Relu { .. } => {}
            }
        }
        v
    }
}

#[derive(Debug, Clone)]
enum WrappedLayer {
    Conv(KsConv),
    Relu,
    ResBlock(KsConv, KsConv),
}

/// A described network with its designated convolutions modulated.
#[derive(Debug, Clone)]
pub struct WrappedNet {
    pub spec: NetSpec,
    layers: Vec<WrappedLayer>,
    modulated: Vec<String>,
}

/// Builds `spec` with each designated convolution replaced by a modulated one.
pub fn wrap_backbone(
    scope: &Scope,
    spec: &NetSpec,
    designated: &[String],
    ranks: [usize; 4],
    latent_dim: usize,
    generator: GeneratorSettings,
) -> Result<WrappedNet> {
    let convs: BTreeSet<String> = spec.conv_names().into_iter().collect();
    let mut names = BTreeSet::new();
    for l in &spec.layers {
        if !names.insert(l.name().to_string()) {
            return Err(Error::config(format!("duplicate layer name {:?}", l.name())));
        }
    }
    for d in designated {
        if !convs.contains(d) {
            let what = if names.contains(d) { "is not a convolution" } else { "does not exist" };
            return Err(Error::config(format!("designated layer {d:?} {what}")));
        }
    }
    let wanted: BTreeSet<&String> = designated.iter().collect();
    let make = |name: &str, c_in: usize, c_out: usize, k: usize| -> Result<KsConv> {
        if k % 2 == 0 {
            return Err(Error::config(format!("layer {name:?} needs an odd kernel, got {k}")));
        }
        let cfg = generator.layer(c_in, c_out, k, ranks, latent_dim);
        KsConv::new(&scope.pp(name), cfg, wanted.contains(&name.to_string()))
    };
    let mut layers = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        layers.push(match l {
            LayerSpec::Conv { name, c_in, c_out, kernel } => WrappedLayer::Conv(make(name, *c_in, *c_out, *kernel)?),
            LayerSpec::Relu { .. } => WrappedLayer::Relu,
            LayerSpec::ResBlock { name, channels } => WrappedLayer::ResBlock(
                make(&format!("{name}.conv1"), *channels, *channels, 3)?,
                make(&format!("{name}.conv2"), *channels, *channels, 3)?,
            ),
        });
    }
    Ok(WrappedNet {
        spec: spec.clone(),
        layers,
        modulated: designated.to_vec(),
    })
}

impl WrappedNet {
    pub fn modulated_layers(&self) -> &[String] {
        &self.modulated
    }

    pub fn forward(&self, pan: &Tensor, lrms: &Tensor, z: Option<&Tensor>, mode: Modulation) -> Result<Tensor> {
        let mut x = match self.spec.input {
            NetInput::Detail => detail_input(pan, lrms)?,
            NetInput::Concat => {
                detail_input(pan, lrms)?;
                Tensor::cat(&[pan, lrms], 1)?
            }
        };
        for l in &self.layers {
            x = match l {
                WrappedLayer::Conv(c) => c.forward(&x, z, mode)?,
                WrappedLayer::Relu => x.relu()?,
                WrappedLayer::ResBlock(c1, c2) => {
                    let h = c1.forward(&x, z, mode)?.relu()?;
                    (c2.forward(&h, z, mode)? + &x)?.relu()?
                }
            };
        }
        Ok((x + lrms)?)
    }
}

impl Fusion for WrappedNet {
    fn fuse(&self, pan: &Tensor, lrms: &Tensor, z: Option<&Tensor>, mode: Modulation) -> Result<Tensor> {
        self.forward(pan, lrms, z, mode)
    }
}

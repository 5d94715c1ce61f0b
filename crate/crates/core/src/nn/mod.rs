//! Minimal neural-network toolkit on top of `candle-core`: a named parameter
//! registry, dense and convolutional layers, activations and the pooling
//! helpers the models need.

pub mod conv;
pub mod ema;
pub mod optim;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use conv::conv2d;

/// Initialization rule for a freshly registered parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Uniform(f64),
    Normal(f64),
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Shared registry of named trainable variables.
///
/// Cloning the store is cheap and yields a handle to the same registry.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("len", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total scalar count of all variables whose name starts with `prefix`.
    pub fn num_params(&self, prefix: &str) -> usize {
        self.vars(prefix).iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Variables whose name starts with `prefix`, in name order.
    pub fn vars(&self, prefix: &str) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    /// Detached copies of every variable.
    pub fn snapshot(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.vars(prefix)
            .into_iter()
            .map(|(k, v)| (k, v.as_detached_tensor().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrites variables from `values`. Every registered variable under
    /// `prefix` must be present with a matching shape.
    pub fn assign(&self, prefix: &str, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars(prefix) {
            let value = values
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if value.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    value.dims(),
                    var.dims()
                )));
            }
            var.set(&value.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Sets only the named parameters; unknown names are an error.
    pub fn set_values(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in values {
            let var = self
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if value.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("parameter {name}: shape {:?}, expected {:?}", value.dims(), var.dims())));
            }
            var.set(&value.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    fn fetch(&self, name: &str, dims: &[usize], init: Init) -> Result<Var> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(v) = inner.vars.get(name) {
            if v.dims() != dims {
                return Err(Error::shape(format!(
                    "parameter {name} registered as {:?}, requested {:?}",
                    v.dims(),
                    dims
                )));
            }
            return Ok(v.clone());
        }
        let n: usize = dims.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| inner.rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| s * inner.rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let t = Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        inner.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }
}

/// A path prefix into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn path(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn var(&self, name: &str, dims: &[usize], init: Init) -> Result<Var> {
        self.store.fetch(&self.pp(name).prefix, dims, init)
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Logistic sigmoid written through `tanh` so saturated inputs give exact 0/1.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// The normalizer is accumulated in f64 so long f32 axes still sum to one
/// within 1e-6.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let total = e.to_dtype(DType::F64)?.sum_keepdim(dim)?.to_dtype(e.dtype())?;
    Ok(e.broadcast_div(&total)?)
}

/// Mean absolute error over every element, accumulated in f64.
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("l1 loss on {:?} vs {:?}", a.dims(), b.dims())));
    }
    let d = (a - b)?.abs()?;
    Ok(d.to_dtype(DType::F64)?.mean_all()?.to_dtype(d.dtype())?)
}

/// Average pooling of an NCHW map by an integer factor.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    avg_pool_hw(x, factor, factor)
}

/// Average pooling with separate vertical and horizontal factors.
pub fn avg_pool_hw(x: &Tensor, fh: usize, fw: usize) -> Result<Tensor> {
    if fh == 1 && fw == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    if fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0 {
        return Err(Error::shape(format!("cannot pool {h}x{w} by {fh}x{fw}")));
    }
    Ok(x
        .contiguous()?
        .reshape((b, c, h / fh, fh, w / fw, fw))?
        .mean(5)?
        .mean(3)?)
}

/// Adaptive average pooling to a `gh`x`gw` grid. Bin `i` covers
/// `floor(i*n/g) .. ceil((i+1)*n/g)`, so uneven sizes get overlapping bins.
pub fn adaptive_avg_pool(x: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if gh == 0 || gw == 0 || gh > h || gw > w {
        return Err(Error::shape(format!("cannot pool {h}x{w} to a {gh}x{gw} grid")));
    }
    if h % gh == 0 && w % gw == 0 {
        return avg_pool_hw(x, h / gh, w / gw);
    }
    let bins = |n: usize, g: usize| -> Vec<(usize, usize)> {
        (0..g).map(|i| (i * n / g, ((i + 1) * n).div_ceil(g))).collect()
    };
    let mut rows = Vec::with_capacity(gh);
    for (r0, r1) in bins(h, gh) {
        let band = x.narrow(2, r0, r1 - r0)?.mean_keepdim(2)?;
        let cols = bins(w, gw)
            .into_iter()
            .map(|(c0, c1)| band.narrow(3, c0, c1 - c0)?.mean_keepdim(3))
            .collect::<candle_core::Result<Vec<_>>>()?;
        rows.push(Tensor::cat(&cols, 3)?);
    }
    Ok(Tensor::cat(&rows, 2)?)
}

/// Bilinear resize to half size. For even sizes with half-pixel centers the
/// bilinear taps fall exactly between pixel pairs, so this is a 2x2 mean.
pub fn bilinear_half(x: &Tensor) -> Result<Tensor> {
    avg_pool(x, 2)
}

/// Nearest-neighbour upsampling of an NCHW map by 2.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Reflect-pads the bottom and right edges of an NCHW map so both spatial
/// sizes become multiples of `multiple` (mirror without repeating the edge).
pub fn reflect_pad_to(x: &Tensor, multiple: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut out = x.clone();
    for (axis, n) in [(2usize, h), (3usize, w)] {
        let extra = (multiple - n % multiple) % multiple;
        if extra == 0 {
            continue;
        }
        if extra >= n {
            return Err(Error::shape(format!("cannot reflect-pad size {n} by {extra}")));
        }
        let idx: Vec<u32> = (0..n + extra)
            .map(|i| if i < n { i } else { 2 * (n - 1) - i } as u32)
            .collect();
        let idx = Tensor::from_vec(idx, n + extra, x.device())?;
        out = out.index_select(&idx, axis)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: scope.var("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: Some(scope.var("bias", &[out_dim], Init::Uniform(bound))?),
        })
    }

    pub fn no_bias(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: scope.var("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: None,
        })
    }

    pub fn zeros(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.var("weight", &[out_dim, in_dim], Init::Zeros)?,
            bias: Some(scope.var("bias", &[out_dim], Init::Zeros)?),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies the layer over the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.dim(D::Minus1)? != self.in_dim() {
            return Err(Error::shape(format!(
                "linear expects last dim {}, got {:?}",
                self.in_dim(),
                x.dims()
            )));
        }
        if x.rank() == 1 {
            return self.forward(&x.unsqueeze(0)?)?.squeeze(0).map_err(Into::into);
        }
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square convolution with "same" padding for odd kernels at stride 1.
    pub fn new(scope: &Scope, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Ok(Self {
            weight: scope.var("weight", &[c_out, c_in, k, k], Init::Uniform(bound))?,
            bias: Some(scope.var("bias", &[c_out], Init::Uniform(bound))?),
            stride,
            pad: k / 2,
        })
    }

    pub fn zeros(scope: &Scope, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.var("weight", &[c_out, c_in, k, k], Init::Zeros)?,
            bias: Some(scope.var("bias", &[c_out], Init::Zeros)?),
            stride: 1,
            pad: k / 2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.stride, self.pad)?;
        add_channel_bias(&y, self.bias.as_ref())
    }
}

pub(crate) fn add_channel_bias(y: &Tensor, bias: Option<&Var>) -> Result<Tensor> {
    match bias {
        Some(b) => {
            let c = b.dims()[0];
            Ok(y.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?)
        }
        None => Ok(y.clone()),
    }
}

/// Seeded standard-normal tensor.
pub fn randn(rng: &mut impl Rng, dims: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

//! Synthetic scenes, reduced-resolution simulation and on-disk datasets.
//!
//! Images are `(H, W, C)` arrays with values in `[0, 1]`. On disk a split is a
//! directory holding `data.safetensors` with stacked `(N, H, W, C)` arrays and
//! a `manifest.json` describing them.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Array, Container};
use crate::error::{Error, Result};

pub type Image = Array3<f32>;

pub const DATA_FILE: &str = "data.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Procedural multispectral scene: a shared sharp structure (rectangles,
/// straight edges, smooth undulation) scaled per band, plus a weak smooth
/// band-specific field. Values stay inside `[0.05, 0.95]`.
pub fn synth_hrms(seed: u64, height: usize, width: usize, bands: usize) -> Result<Image> {
    if height == 0 || width == 0 || bands == 0 {
        return Err(Error::Data("synthetic scene dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let mut structure = Array2::<f64>::zeros((height, width));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.1..0.3),
            )
        })
        .collect();
    let rects: Vec<(f64, f64, f64, f64, f64)> = (0..rng.random_range(4..9))
        .map(|_| {
            let (y0, x0) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
            let (dy, dx) = (rng.random_range(0.1..0.4) * h, rng.random_range(0.1..0.4) * w);
            (y0, x0, y0 + dy, x0 + dx, rng.random_range(-0.6..0.6))
        })
        .collect();
    let edges: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (a.cos(), a.sin(), rng.random_range(0.3..0.7), rng.random_range(-0.4..0.4))
        })
        .collect();
    for ((i, j), v) in structure.indexed_iter_mut() {
        let (y, x) = (i as f64, j as f64);
        let mut acc = 0.0;
        for &(fy, fx, ph, amp) in &waves {
            acc += amp * (std::f64::consts::TAU * (fy * y / h + fx * x / w) + ph).sin();
        }
        for &(y0, x0, y1, x1, amp) in &rects {
            if y >= y0 && y < y1 && x >= x0 && x < x1 {
                acc += amp;
            }
        }
        for &(cy, cx, off, amp) in &edges {
            if cy * (y / h - 0.5) + cx * (x / w - 0.5) + 0.5 > off {
                acc += amp;
            }
        }
        *v = acc;
    }
    let (lo, hi) = structure.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = (hi - lo).max(1e-9);
    structure.mapv_inplace(|v| (v - lo) / span);

    let mut out = Array3::<f32>::zeros((height, width, bands));
    for b in 0..bands {
        let gain: f64 = rng.random_range(0.55..1.0);
        let offset: f64 = rng.random_range(0.0..0.1);
        let (fy, fx, ph): (f64, f64, f64) = (
            rng.random_range(0.2..1.0),
            rng.random_range(0.2..1.0),
            rng.random_range(0.0..std::f64::consts::TAU),
        );
        for ((i, j), v) in out.index_axis_mut(Axis(2), b).indexed_iter_mut() {
            let smooth = 0.5 + 0.5 * (std::f64::consts::TAU * (fy * i as f64 / h + fx * j as f64 / w) + ph).sin();
            let val = 0.05 + 0.75 * gain * structure[[i, j]] + 0.1 * smooth + offset;
            *v = val.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let taps: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Half-sample symmetric index reflection (`-1 -> 0`, `n -> n-1`).
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur of every band.
pub fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w, c) = img.dim();
    let mut tmp = Array3::<f64>::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for b in 0..c {
                tmp[[i, j, b]] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * img[[reflect_index(i as i64 + t as i64 - r, h), j, b]])
                    .sum();
            }
        }
    }
    let mut out = Array3::<f64>::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for b in 0..c {
                out[[i, j, b]] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * tmp[[i, reflect_index(j as i64 + t as i64 - r, w), b]])
                    .sum();
            }
        }
    }
    out
}

/// Keeps every `ratio`-th sample, starting at the centre of each block.
pub fn decimate(img: &Array3<f64>, ratio: usize) -> Array3<f64> {
    let off = (ratio / 2) as isize;
    img.slice(s![off..;ratio as isize, off..;ratio as isize, ..]).to_owned()
}

/// Keys cubic convolution weight with `a = -0.5`.
pub fn cubic_weight(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

fn cubic_taps(n_out: usize, n_in: usize, ratio: usize) -> Vec<[(usize, f64); 4]> {
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) / ratio as f64 - 0.5;
            let base = src.floor();
            std::array::from_fn(|k| {
                let idx = base as i64 - 1 + k as i64;
                (idx.clamp(0, n_in as i64 - 1) as usize, cubic_weight(src - idx as f64))
            })
        })
        .collect()
}

/// Separable bicubic upsampling by an integer factor (edge-clamped).
pub fn bicubic_upsample(img: &Array3<f64>, ratio: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let (ty, tx) = (cubic_taps(h * ratio, h, ratio), cubic_taps(w * ratio, w, ratio));
    let mut rows = Array3::<f64>::zeros((h * ratio, w, c));
    for (o, taps) in ty.iter().enumerate() {
        for j in 0..w {
            for b in 0..c {
                rows[[o, j, b]] = taps.iter().map(|(i, wt)| wt * img[[*i, j, b]]).sum();
            }
        }
    }
    let mut out = Array3::<f64>::zeros((h * ratio, w * ratio, c));
    for i in 0..h * ratio {
        for (o, taps) in tx.iter().enumerate() {
            for b in 0..c {
                out[[i, o, b]] = taps.iter().map(|(j, wt)| wt * rows[[i, *j, b]]).sum();
            }
        }
    }
    out
}

/// Nonnegative band mixture normalized to sum to one.
pub fn pan_from_bands(img: &Array3<f64>, weights: Option<&[f64]>) -> Result<Array3<f64>> {
    let c = img.dim().2;
    let w: Vec<f64> = match weights {
        Some(w) if w.len() == c && w.iter().all(|v| *v >= 0.0) && w.iter().sum::<f64>() > 0.0 => {
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        }
        Some(w) => {
            return Err(Error::Data(format!(
                "PAN weights must be {c} nonnegative values with a positive sum, got {w:?}"
            )))
        }
        None => vec![1.0 / c as f64; c],
    };
    let mut pan = Array3::<f64>::zeros((img.dim().0, img.dim().1, 1));
    for ((i, j, b), v) in img.indexed_iter() {
        pan[[i, j, 0]] += w[b] * v;
    }
    Ok(pan)
}

/// PAN, low-res MS, its upsampled version and (optionally) the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub pan: Image,
    pub lrms: Image,
    pub lrms_up: Image,
    pub gt: Option<Image>,
}

fn to_f64(img: ArrayView3<f32>) -> Array3<f64> {
    img.mapv(|v| v as f64)
}

fn to_f32(img: &Array3<f64>) -> Image {
    img.mapv(|v| v as f32)
}

/// Reduced-resolution simulation: blur, decimate, bicubic back up; PAN from
/// the band mixture; the input becomes the reference.
pub fn wald_degrade(hrms: &Image, ratio: usize, pan_weights: Option<&[f64]>) -> Result<Triplet> {
    let (h, w, _) = hrms.dim();
    if ratio == 0 || h % ratio != 0 || w % ratio != 0 {
        return Err(Error::Data(format!("image {h}x{w} is not divisible by ratio {ratio}")));
    }
    let x = to_f64(hrms.view());
    let lrms = decimate(&gaussian_blur(&x, 0.5 * ratio as f64), ratio);
    let up = bicubic_upsample(&lrms, ratio);
    Ok(Triplet {
        pan: to_f32(&pan_from_bands(&x, pan_weights)?),
        lrms: to_f32(&lrms),
        lrms_up: to_f32(&up),
        gt: Some(hrms.clone()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub split: String,
    pub samples: usize,
    pub patch_size: usize,
    pub bands: usize,
    pub ratio: usize,
    /// Stored values are divided by this on load.
    pub divisor: f64,
    pub has_gt: bool,
    #[serde(default)]
    pub pan_weights: Option<Vec<f64>>,
}

/// A split held in memory, already normalized.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub pan: Array4<f32>,
    pub lrms: Array4<f32>,
    pub lrms_up: Array4<f32>,
    pub gt: Option<Array4<f32>>,
}

/// Batched NCHW tensors for the models.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pan: Tensor,
    pub lrms: Tensor,
    pub gt: Option<Tensor>,
    pub indices: Vec<usize>,
}

fn stack(images: Vec<Image>) -> Result<Array4<f32>> {
    let views: Vec<_> = images.iter().map(|i| i.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::Data(format!("inconsistent image sizes: {e}")))
}

fn to_nchw(a: &Array4<f32>, idx: &[usize], dtype: DType) -> Result<Tensor> {
    let (_, h, w, c) = a.dim();
    let mut v = Vec::with_capacity(idx.len() * h * w * c);
    for &i in idx {
        v.extend(a.index_axis(Axis(0), i).iter().copied());
    }
    Ok(Tensor::from_vec(v, (idx.len(), h, w, c), &Device::Cpu)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?)
}

fn array4(a: &Array4<f32>) -> Array {
    Array::F32 {
        shape: a.shape().to_vec(),
        data: a.iter().copied().collect(),
    }
}

impl Dataset {
    pub fn from_triplets(split: &str, ratio: usize, triplets: Vec<Triplet>, pan_weights: Option<Vec<f64>>) -> Result<Self> {
        let first = triplets
            .first()
            .ok_or_else(|| Error::Data("a dataset needs at least one sample".into()))?;
        let (h, w, c) = first.lrms_up.dim();
        if h != w {
            return Err(Error::Data(format!("patches must be square, got {h}x{w}")));
        }
        let has_gt = first.gt.is_some();
        if triplets.iter().any(|t| t.gt.is_some() != has_gt) {
            return Err(Error::Data("either every sample or none carries a reference".into()));
        }
        let manifest = Manifest {
            split: split.to_string(),
            samples: triplets.len(),
            patch_size: h,
            bands: c,
            ratio,
            divisor: 1.0,
            has_gt,
            pan_weights,
        };
        let mut pans = Vec::new();
        let mut lows = Vec::new();
        let mut ups = Vec::new();
        let mut gts = Vec::new();
        for t in triplets {
            pans.push(t.pan);
            lows.push(t.lrms);
            ups.push(t.lrms_up);
            if let Some(g) = t.gt {
                gts.push(g);
            }
        }
        let ds = Self {
            manifest,
            pan: stack(pans)?,
            lrms: stack(lows)?,
            lrms_up: stack(ups)?,
            gt: if has_gt { Some(stack(gts)?) } else { None },
        };
        ds.check()?;
        Ok(ds)
    }

    /// Synthetic reduced-resolution split: one procedural scene per sample.
    pub fn synthetic(split: &str, seed: u64, samples: usize, size: usize, bands: usize, ratio: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let triplets = (0..samples)
            .map(|_| wald_degrade(&synth_hrms(rng.random(), size, size, bands)?, ratio, None))
            .collect::<Result<Vec<_>>>()?;
        Self::from_triplets(split, ratio, triplets, None)
    }

    fn check(&self) -> Result<()> {
        let m = &self.manifest;
        let (n, p, r, c) = (m.samples, m.patch_size, m.ratio, m.bands);
        if r == 0 || p % r != 0 {
            return Err(Error::Data(format!("patch size {p} not divisible by ratio {r}")));
        }
        let expect = |name: &str, got: &[usize], want: [usize; 4]| -> Result<()> {
            if got != want {
                return Err(Error::Data(format!("{name} has shape {got:?}, manifest implies {want:?}")));
            }
            Ok(())
        };
        expect("pan", self.pan.shape(), [n, p, p, 1])?;
        expect("lrms", self.lrms.shape(), [n, p / r, p / r, c])?;
        expect("lrms_up", self.lrms_up.shape(), [n, p, p, c])?;
        match (&self.gt, m.has_gt) {
            (Some(g), true) => expect("gt", g.shape(), [n, p, p, c]),
            (None, false) => Ok(()),
            _ => Err(Error::Data("reference presence disagrees with the manifest".into())),
        }
    }

    pub fn len(&self) -> usize {
        self.manifest.samples
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn triplet(&self, i: usize) -> Result<Triplet> {
        if i >= self.len() {
            return Err(Error::Data(format!("sample {i} out of range ({} samples)", self.len())));
        }
        Ok(Triplet {
            pan: self.pan.index_axis(Axis(0), i).to_owned(),
            lrms: self.lrms.index_axis(Axis(0), i).to_owned(),
            lrms_up: self.lrms_up.index_axis(Axis(0), i).to_owned(),
            gt: self.gt.as_ref().map(|g| g.index_axis(Axis(0), i).to_owned()),
        })
    }

    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<Batch> {
        if let Some(bad) = indices.iter().find(|i| **i >= self.len()) {
            return Err(Error::Data(format!("sample {bad} out of range ({} samples)", self.len())));
        }
        Ok(Batch {
            pan: to_nchw(&self.pan, indices, dtype)?,
            lrms: to_nchw(&self.lrms_up, indices, dtype)?,
            gt: self.gt.as_ref().map(|g| to_nchw(g, indices, dtype)).transpose()?,
            indices: indices.to_vec(),
        })
    }

    /// Sample order for an epoch; a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        epoch_order(self.len(), seed, epoch)
    }

    /// Index batches covering one epoch; the last batch may be short.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(seed, epoch)
            .chunks(batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }

    pub fn split_dir(root: &Path, split: &str) -> PathBuf {
        root.join(split)
    }

    /// Writes `<root>/<split>/{data.safetensors, manifest.json}`. Values are
    /// stored multiplied back by the divisor.
    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        let dir = Self::split_dir(root, &self.manifest.split);
        std::fs::create_dir_all(&dir)?;
        let d = self.manifest.divisor as f32;
        let scale = |a: &Array4<f32>| if d == 1.0 { a.clone() } else { a.mapv(|v| v * d) };
        let mut c = Container::default();
        c.insert("pan", array4(&scale(&self.pan)));
        c.insert("lrms", array4(&scale(&self.lrms)));
        c.insert("lrms_up", array4(&scale(&self.lrms_up)));
        if let Some(g) = &self.gt {
            c.insert("gt", array4(&scale(g)));
        }
        c.metadata.insert("manifest".into(), serde_json::to_string(&self.manifest)?);
        c.save(&dir.join(DATA_FILE))?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(dir)
    }

    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let dir = Self::split_dir(root, split);
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", mpath.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.divisor <= 0.0 || !manifest.divisor.is_finite() {
            return Err(Error::Data(format!("invalid normalization divisor {}", manifest.divisor)));
        }
        let c = Container::load(&dir.join(DATA_FILE))?;
        let read = |name: &str| -> Result<Array4<f32>> {
            let a = c.get(name)?;
            let shape: [usize; 4] = a
                .shape()
                .try_into()
                .map_err(|_| Error::Data(format!("{name} must be 4-D, got {:?}", a.shape())))?;
            let v = a.to_f32();
            let arr = Array4::from_shape_vec(shape, v).map_err(|e| Error::Data(e.to_string()))?;
            Ok(if manifest.divisor == 1.0 {
                arr
            } else {
                arr.mapv(|x| x / manifest.divisor as f32)
            })
        };
        let ds = Self {
            pan: read("pan")?,
            lrms: read("lrms")?,
            lrms_up: read("lrms_up")?,
            gt: if manifest.has_gt { Some(read("gt")?) } else { None },
            manifest,
        };
        ds.check()?;
        Ok(ds)
    }
}

pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng);
    v
}

/// `(H, W, C)` image from a single NCHW batch item.
pub fn image_from_tensor(t: &Tensor, item: usize) -> Result<Image> {
    let x = t.get(item)?.permute((1, 2, 0))?.contiguous()?.to_dtype(DType::F32)?;
    let (h, w, c) = x.dims3()?;
    Array3::from_shape_vec((h, w, c), x.flatten_all()?.to_vec1::<f32>()?).map_err(|e| Error::Data(e.to_string()))
}

/// `(1, C, H, W)` tensor from an `(H, W, C)` image.
pub fn tensor_from_image(img: &Image, dtype: DType) -> Result<Tensor> {
    let (h, w, c) = img.dim();
    Ok(Tensor::from_vec(img.iter().copied().collect::<Vec<_>>(), (1, h, w, c), &Device::Cpu)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?)
}

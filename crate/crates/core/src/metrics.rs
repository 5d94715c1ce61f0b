//! Fusion quality indices on `(H, W, C)` images.
//!
//! With-reference: SAM, ERGAS, SCC, Q2n. Without reference: spectral and
//! spatial distortion (QNR style) and their hybrid product.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{decimate, gaussian_blur};
use crate::error::{Error, Result};

fn same_shape(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("images differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::shape("empty image"));
    }
    Ok(())
}

/// Mean spectral angle in degrees; pixels where either vector is zero are skipped.
pub fn sam(x: ArrayView3<f64>, y: ArrayView3<f64>) -> Result<f64> {
    same_shape(&x, &y)?;
    let (h, w, _) = x.dim();
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            let (px, py) = (x.slice(s![i, j, ..]), y.slice(s![i, j, ..]));
            let (nx, ny) = (px.dot(&px).sqrt(), py.dot(&py).sqrt());
            if nx == 0.0 || ny == 0.0 {
                continue;
            }
            // Half-angle form stays accurate near zero where acos does not.
            let (ux, uy) = (&px / nx, &py / ny);
            let (d, p) = (&ux - &uy, &ux + &uy);
            total += 2.0 * d.dot(&d).sqrt().atan2(p.dot(&p).sqrt());
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { (total / count as f64).to_degrees() })
}

/// Relative dimensionless global error; `reference` supplies the band means.
pub fn ergas(fused: ArrayView3<f64>, reference: ArrayView3<f64>, ratio: f64) -> Result<f64> {
    same_shape(&fused, &reference)?;
    if ratio <= 0.0 {
        return Err(Error::config("ERGAS ratio must be positive"));
    }
    let c = fused.dim().2;
    let mut acc = 0.0;
    for b in 0..c {
        let (f, r) = (fused.index_axis(Axis(2), b), reference.index_axis(Axis(2), b));
        let mse = (&f - &r).mapv(|d| d * d).mean().unwrap_or(0.0);
        let mu = r.mean().unwrap_or(0.0);
        if mu == 0.0 {
            return Err(Error::Data(format!("band {b} of the reference has zero mean")));
        }
        acc += mse / (mu * mu);
    }
    Ok(100.0 / ratio * (acc / c as f64).sqrt())
}

/// 3x3 Laplacian over the valid interior.
pub fn laplacian(band: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = band.dim();
    if h < 3 || w < 3 {
        return Array2::zeros((0, 0));
    }
    Array2::from_shape_fn((h - 2, w - 2), |(i, j)| {
        let (i, j) = (i + 1, j + 1);
        band[[i - 1, j]] + band[[i + 1, j]] + band[[i, j - 1]] + band[[i, j + 1]] - 4.0 * band[[i, j]]
    })
}

fn pearson(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    match (saa == 0.0, sbb == 0.0) {
        (true, true) => {
            if a == b {
                1.0
            } else {
                0.0
            }
        }
        (true, false) | (false, true) => 0.0,
        _ => sab / (saa * sbb).sqrt(),
    }
}

/// Spatial correlation: mean over bands of the correlation between
/// Laplacian-filtered images.
pub fn scc(fused: ArrayView3<f64>, reference: ArrayView3<f64>) -> Result<f64> {
    same_shape(&fused, &reference)?;
    let (h, w, c) = fused.dim();
    if h < 3 || w < 3 {
        return Err(Error::shape("SCC needs images of at least 3x3"));
    }
    let total: f64 = (0..c)
        .map(|b| {
            pearson(
                laplacian(fused.index_axis(Axis(2), b)).view(),
                laplacian(reference.index_axis(Axis(2), b)).view(),
            )
        })
        .sum();
    Ok(total / c as f64)
}

/// Cayley-Dickson conjugate.
pub fn hc_conj(a: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = a.iter().map(|x| -x).collect();
    v[0] = a[0];
    v
}

/// Cayley-Dickson product `(a, b)(c, d) = (ac - conj(d) b, d a + b conj(c))`
/// for arrays of length `2^k`.
pub fn hc_mul(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    debug_assert_eq!(n, y.len());
    if n == 1 {
        return vec![x[0] * y[0]];
    }
    let h = n / 2;
    let (a, b) = x.split_at(h);
    let (c, d) = y.split_at(h);
    let ac = hc_mul(a, c);
    let db = hc_mul(&hc_conj(d), b);
    let da = hc_mul(d, a);
    let bc = hc_mul(b, &hc_conj(c));
    let mut out: Vec<f64> = ac.iter().zip(&db).map(|(p, q)| p - q).collect();
    out.extend(da.iter().zip(&bc).map(|(p, q)| p + q));
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Hypercomplex quality of one block; both blocks are `(s, s, 2^k)` and
/// already normalized.
fn q2n_block(x: ArrayView3<f64>, y: ArrayView3<f64>) -> f64 {
    let (h, w, c) = x.dim();
    let n = (h * w) as f64;
    let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    let mx: Vec<f64> = (0..c).map(|b| x.index_axis(Axis(2), b).mean().unwrap()).collect();
    let my: Vec<f64> = (0..c).map(|b| y.index_axis(Axis(2), b).mean().unwrap()).collect();
    let (nmx, nmy) = (norm(&mx), norm(&my));
    let mean_term = if nmx * nmx + nmy * nmy == 0.0 {
        1.0
    } else {
        2.0 * nmx * nmy / (nmx * nmx + nmy * nmy)
    };
    let mut ex2 = 0.0;
    let mut ey2 = 0.0;
    let mut exy = vec![0.0; c];
    for i in 0..h {
        for j in 0..w {
            let px: Vec<f64> = x.slice(s![i, j, ..]).to_vec();
            let py: Vec<f64> = y.slice(s![i, j, ..]).to_vec();
            ex2 += px.iter().map(|v| v * v).sum::<f64>();
            ey2 += py.iter().map(|v| v * v).sum::<f64>();
            for (acc, v) in exy.iter_mut().zip(hc_mul(&px, &hc_conj(&py))) {
                *acc += v;
            }
        }
    }
    let var_sum = unbias * (ex2 / n + ey2 / n) - unbias * (nmx * nmx + nmy * nmy);
    if var_sum <= 0.0 {
        return mean_term;
    }
    let mm = hc_mul(&mx, &hc_conj(&my));
    let cov: Vec<f64> = exy.iter().zip(&mm).map(|(e, m)| unbias * (e / n - m)).collect();
    norm(&cov) * mean_term * 2.0 / var_sum
}

/// Hypercomplex quality index averaged over non-overlapping `block` squares.
/// Bands are zero-padded to a power of two; each block is normalized by the
/// reference's per-band mean and standard deviation.
pub fn q2n(fused: ArrayView3<f64>, reference: ArrayView3<f64>, block: usize) -> Result<f64> {
    same_shape(&fused, &reference)?;
    let (h, w, c) = fused.dim();
    if block == 0 || h < block || w < block {
        return Err(Error::shape(format!("Q2n block {block} does not fit a {h}x{w} image")));
    }
    let width = c.next_power_of_two().max(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..h / block {
        for bj in 0..w / block {
            let win = s![bi * block..(bi + 1) * block, bj * block..(bj + 1) * block, ..];
            let (rf, rr) = (fused.slice(win), reference.slice(win));
            let mut xr = Array3::<f64>::zeros((block, block, width));
            let mut xf = Array3::<f64>::zeros((block, block, width));
            for b in 0..c {
                let band = rr.index_axis(Axis(2), b);
                let mu = band.mean().unwrap();
                let sd = band.std(1.0);
                let scale = if sd > 0.0 { sd } else { 1.0 };
                xr.index_axis_mut(Axis(2), b).assign(&band.mapv(|v| (v - mu) / scale + 1.0));
                xf.index_axis_mut(Axis(2), b)
                    .assign(&rf.index_axis(Axis(2), b).mapv(|v| (v - mu) / scale + 1.0));
            }
            total += q2n_block(xr.view(), xf.view());
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Universal image quality index of two single-band images, averaged over
/// non-overlapping blocks (the whole image if smaller than a block).
pub fn uiqi(a: ArrayView2<f64>, b: ArrayView2<f64>, block: usize) -> Result<f64> {
    if a.dim() != b.dim() || a.is_empty() {
        return Err(Error::shape(format!("UIQI operands differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    let (bh, bw) = (block.clamp(1, h), block.clamp(1, w));
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..h / bh {
        for j in 0..w / bw {
            let win = s![i * bh..(i + 1) * bh, j * bw..(j + 1) * bw];
            total += uiqi_single(a.slice(win), b.slice(win));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn uiqi_single(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let d = if n > 1.0 { n - 1.0 } else { 1.0 };
    let (sab, saa, sbb) = (sab / d, saa / d, sbb / d);
    let den = (saa + sbb) * (ma * ma + mb * mb);
    if den == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    4.0 * sab * ma * mb / den
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoRefConfig {
    pub ratio: usize,
    pub block: usize,
    pub p: f64,
    pub q: f64,
}

impl Default for NoRefConfig {
    fn default() -> Self {
        Self {
            ratio: 4,
            block: 32,
            p: 1.0,
            q: 1.0,
        }
    }
}

/// Spectral distortion: inter-band quality of the fused image versus that of
/// the low-resolution LRMS.
pub fn d_lambda(fused: ArrayView3<f64>, lrms: ArrayView3<f64>, cfg: &NoRefConfig) -> Result<f64> {
    let (h, w, c) = fused.dim();
    let (lh, lw, lc) = lrms.dim();
    if lc != c || lh * cfg.ratio != h || lw * cfg.ratio != w {
        return Err(Error::shape(format!(
            "LRMS {:?} is not fused {:?} reduced by {}",
            lrms.dim(),
            fused.dim(),
            cfg.ratio
        )));
    }
    if c < 2 {
        return Ok(0.0);
    }
    let low_block = (cfg.block / cfg.ratio).max(1);
    let mut acc = 0.0;
    for l in 0..c {
        for r in 0..c {
            if l == r {
                continue;
            }
            let qf = uiqi(fused.index_axis(Axis(2), l), fused.index_axis(Axis(2), r), cfg.block)?;
            let qm = uiqi(lrms.index_axis(Axis(2), l), lrms.index_axis(Axis(2), r), low_block)?;
            acc += (qf - qm).abs().powf(cfg.p);
        }
    }
    Ok((acc / (c * (c - 1)) as f64).powf(1.0 / cfg.p))
}

/// Spatial distortion: band-to-PAN quality at full resolution versus the
/// same relation between LRMS and a degraded PAN.
pub fn d_s(fused: ArrayView3<f64>, lrms: ArrayView3<f64>, pan: ArrayView3<f64>, cfg: &NoRefConfig) -> Result<f64> {
    let (h, w, c) = fused.dim();
    if pan.dim() != (h, w, 1) {
        return Err(Error::shape(format!("PAN {:?} does not match fused {:?}", pan.dim(), fused.dim())));
    }
    let (lh, lw, lc) = lrms.dim();
    if lc != c || lh * cfg.ratio != h || lw * cfg.ratio != w {
        return Err(Error::shape("LRMS is not the fused image reduced by the ratio"));
    }
    let pan_low = decimate(&gaussian_blur(&pan.to_owned(), 0.5 * cfg.ratio as f64), cfg.ratio);
    let low_block = (cfg.block / cfg.ratio).max(1);
    let mut acc = 0.0;
    for l in 0..c {
        let qf = uiqi(fused.index_axis(Axis(2), l), pan.index_axis(Axis(2), 0), cfg.block)?;
        let qm = uiqi(lrms.index_axis(Axis(2), l), pan_low.index_axis(Axis(2), 0), low_block)?;
        acc += (qf - qm).abs().powf(cfg.q);
    }
    Ok((acc / c as f64).powf(1.0 / cfg.q))
}

pub fn hqnr(d_lambda: f64, d_s: f64) -> f64 {
    (1.0 - d_lambda) * (1.0 - d_s)
}

/// Per-pixel mean absolute error across bands, raw and scaled to `[0, 1]`
/// by the maximum.
pub fn error_map(fused: ArrayView3<f64>, reference: ArrayView3<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    same_shape(&fused, &reference)?;
    let raw = (&fused - &reference).mapv(f64::abs).mean_axis(Axis(2)).expect("non-empty band axis");
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let shown = if max > 0.0 { raw.mapv(|v| v / max) } else { raw.clone() };
    Ok((raw, shown))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub ratio: usize,
    pub q2n_block: usize,
    #[serde(default)]
    pub no_ref: NoRefConfig,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ratio: 4,
            q2n_block: 32,
            no_ref: NoRefConfig::default(),
        }
    }
}

pub fn reduced_resolution(fused: ArrayView3<f64>, reference: ArrayView3<f64>, cfg: &MetricConfig) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    m.insert("SAM".into(), sam(fused, reference)?);
    m.insert("ERGAS".into(), ergas(fused, reference, cfg.ratio as f64)?);
    m.insert("SCC".into(), scc(fused, reference)?);
    let block = cfg.q2n_block.min(fused.dim().0).min(fused.dim().1);
    m.insert("Q2n".into(), q2n(fused, reference, block)?);
    Ok(m)
}

pub fn full_resolution(
    fused: ArrayView3<f64>,
    lrms: ArrayView3<f64>,
    pan: ArrayView3<f64>,
    cfg: &NoRefConfig,
) -> Result<BTreeMap<String, f64>> {
    let dl = d_lambda(fused, lrms, cfg)?;
    let ds = d_s(fused, lrms, pan, cfg)?;
    let mut m = BTreeMap::new();
    m.insert("D_lambda".into(), dl);
    m.insert("D_s".into(), ds);
    m.insert("HQNR".into(), hqnr(dl, ds));
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Per-sample values and their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ratio: usize,
    pub samples: Vec<BTreeMap<String, f64>>,
    pub summary: BTreeMap<String, Summary>,
}

impl MetricsReport {
    pub fn new(ratio: usize, samples: Vec<BTreeMap<String, f64>>) -> Self {
        let mut summary = BTreeMap::new();
        let keys: Vec<String> = samples.first().map(|s| s.keys().cloned().collect()).unwrap_or_default();
        for k in keys {
            let v: Vec<f64> = samples.iter().filter_map(|s| s.get(&k).copied()).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            summary.insert(k, Summary { mean, std });
        }
        Self { ratio, samples, summary }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>14} {:>14}\n", "metric", "mean", "std");
        for (k, s) in &self.summary {
            out.push_str(&format!("{:<10} {:>14.6} {:>14.6}\n", k, s.mean, s.std));
        }
        out.push_str(&format!("samples: {}\n", self.samples.len()));
        out
    }
}

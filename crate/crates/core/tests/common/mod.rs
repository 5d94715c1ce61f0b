#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use ksdiff::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-1, 1)`.
pub fn uniform(rng: &mut impl Rng, dims: &[usize], dtype: DType) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    to_vec(a).iter().zip(to_vec(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `sum(out * weights)` with fixed weights, a smooth scalar probe of `out`.
pub fn probe(out: &Tensor, weights: &Tensor) -> Result<Tensor> {
    Ok((out * weights)?.sum_all()?)
}

pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug)]
pub struct GradReport {
    pub worst: String,
    pub rel_err: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients with central differences. The error per
/// variable is `|a - n| / max(|a|, |n|)` over the probed entries (vector
/// norms) with the denominator floored at `GRAD_FLOOR`, so gradients that
/// vanish analytically compare against finite-difference noise in absolute
/// terms. At most `max_probe` evenly spaced entries are perturbed per variable.
pub fn grad_check(vars: &[(String, Var)], loss: impl Fn() -> Result<Tensor>, h: f64, max_probe: usize) -> GradReport {
    let grads = loss().unwrap().backward().unwrap();
    let mut report = GradReport { worst: String::new(), rel_err: 0.0, checked: 0 };
    for (name, var) in vars {
        let base = var.as_tensor().copy().unwrap();
        let values = to_vec(&base);
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec(g),
            None => vec![0.0; values.len()],
        };
        let stride = values.len().div_ceil(max_probe).max(1);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in (0..values.len()).step_by(stride) {
            let eval = |delta: f64| {
                let mut v = values.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, base.dims(), &Device::Cpu).unwrap().to_dtype(base.dtype()).unwrap();
                var.set(&t).unwrap();
                scalar(&loss().unwrap())
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
            report.checked += 1;
        }
        var.set(&base).unwrap();
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(GRAD_FLOOR);
        if rel >= report.rel_err {
            report.rel_err = rel;
            report.worst = name.clone();
        }
    }
    report
}

/// Overwrites every variable with fresh uniform values scaled by `scale`, so
/// zero-initialised layers stop hiding upstream gradients.
pub fn randomize(vars: &[(String, Var)], rng: &mut impl Rng, scale: f64) {
    for (_, v) in vars {
        let t = (uniform(rng, v.dims(), v.dtype()) * scale).unwrap();
        v.set(&t).unwrap();
    }
}

/// Direct quadruple sum `W[i,j,k,l] = sum G[a,b,c,d] U1[i,a] U2[j,b] U3[k,c] U4[l,d]`
/// over row-major buffers; factor `n` is `(d_n, r_n)`.
pub fn tucker_brute(core: &[f64], ranks: [usize; 4], factors: [&[f64]; 4], sizes: [usize; 4]) -> Vec<f64> {
    let [r1, r2, r3, r4] = ranks;
    let [d1, d2, d3, d4] = sizes;
    let mut out = vec![0.0; d1 * d2 * d3 * d4];
    for i in 0..d1 {
        for j in 0..d2 {
            for k in 0..d3 {
                for l in 0..d4 {
                    let mut s = 0.0;
                    for a in 0..r1 {
                        for b in 0..r2 {
                            for c in 0..r3 {
                                for d in 0..r4 {
                                    s += core[((a * r2 + b) * r3 + c) * r4 + d]
                                        * factors[0][i * r1 + a]
                                        * factors[1][j * r2 + b]
                                        * factors[2][k * r3 + c]
                                        * factors[3][l * r4 + d];
                                }
                            }
                        }
                    }
                    out[((i * d2 + j) * d3 + k) * d4 + l] = s;
                }
            }
        }
    }
    out
}

/// Zero-padded stride-1 cross-correlation of one image with its own kernel.
/// `x`: `(C_in, H, W)`, `kernel`: `(C_in, C_out, k, k)`, result `(C_out, H, W)`.
pub fn conv_dense(x: &[f64], c_in: usize, h: usize, w: usize, kernel: &[f64], c_out: usize, k: usize, bias: &[f64]) -> Vec<f64> {
    let p = (k / 2) as i64;
    let mut y = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for r in 0..h {
            for c in 0..w {
                let mut s = bias[o];
                for i in 0..c_in {
                    for u in 0..k {
                        for v in 0..k {
                            let (rr, cc) = (r as i64 + u as i64 - p, c as i64 + v as i64 - p);
                            if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                                continue;
                            }
                            s += x[(i * h + rr as usize) * w + cc as usize] * kernel[((i * c_out + o) * k + u) * k + v];
                        }
                    }
                }
                y[(o * h + r) * w + c] = s;
            }
        }
    }
    y
}

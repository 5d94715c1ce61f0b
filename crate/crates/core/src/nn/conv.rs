//! Dense 2D convolution on CPU via im2col and GEMM, with hand-written backward.
//!
//! The kernel may be shared by the whole batch, shape `(C_out, C_in, k_h, k_w)`,
//! or given per batch element, shape `(B, C_out, C_in, k_h, k_w)`. Both paths
//! run the same per-sample loop so a per-sample kernel filled with copies of a
//! shared kernel produces bit-identical output.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    c_in: usize,
    height: usize,
    width: usize,
    c_out: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
    per_sample: bool,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let [batch, c_in, height, width] = match x {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => candle_core::bail!("conv2d input must be rank 4, got {x:?}"),
        };
        let (per_sample, c_out, wc_in, k_h, k_w) = match w {
            [o, i, kh, kw] => (false, *o, *i, *kh, *kw),
            [b, o, i, kh, kw] => {
                if *b != batch {
                    candle_core::bail!("per-sample kernel batch {b} != input batch {batch}");
                }
                (true, *o, *i, *kh, *kw)
            }
            _ => candle_core::bail!("conv2d kernel must be rank 4 or 5, got {w:?}"),
        };
        if wc_in != c_in {
            candle_core::bail!("conv2d channel mismatch: input {c_in}, kernel {wc_in}");
        }
        if stride == 0 {
            candle_core::bail!("conv2d stride must be positive");
        }
        if height + 2 * pad < k_h || width + 2 * pad < k_w {
            candle_core::bail!("conv2d kernel {k_h}x{k_w} larger than padded input {height}x{width}");
        }
        let out_h = (height + 2 * pad - k_h) / stride + 1;
        let out_w = (width + 2 * pad - k_w) / stride + 1;
        Ok(Self {
            batch,
            c_in,
            height,
            width,
            c_out,
            k_h,
            k_w,
            out_h,
            out_w,
            stride,
            pad,
            per_sample,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k_h * self.k_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.c_in * self.height * self.width
    }

    fn kernel_len(&self) -> usize {
        self.c_out * self.patch_len()
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.pad == 0
    }

    fn kernel_offset(&self, b: usize) -> usize {
        if self.per_sample {
            b * self.kernel_len()
        } else {
            0
        }
    }
}

trait Scalar: Copy + Default + std::ops::AddAssign + 'static {
    const ZERO: Self;
    const ONE: Self;
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices covering every index reachable
                // through (m, k, n) and the given strides.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

fn im2col<T: Scalar>(g: &Geometry, x: &[T], col: &mut [T]) {
    let out_len = g.out_len();
    for c in 0..g.c_in {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut col[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, col: &[T], dx: &mut [T]) {
    let out_len = g.out_len();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src = &col[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Scalar>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (k, n) = (g.patch_len(), g.out_len());
    let mut out = vec![T::ZERO; g.batch * g.c_out * n];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; k * n] };
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        let wb = &w[g.kernel_offset(b)..g.kernel_offset(b) + g.kernel_len()];
        let ob = &mut out[b * g.c_out * n..(b + 1) * g.c_out * n];
        T::gemm(g.c_out, k, n, wb, k as isize, 1, cols, n as isize, 1, T::ZERO, ob, n as isize, 1);
    }
    out
}

fn grad_input<T: Scalar>(g: &Geometry, dy: &[T], w: &[T]) -> Vec<T> {
    let (k, n) = (g.patch_len(), g.out_len());
    let mut dx = vec![T::ZERO; g.batch * g.in_len()];
    let mut dcol = vec![T::ZERO; k * n];
    for b in 0..g.batch {
        let wb = &w[g.kernel_offset(b)..g.kernel_offset(b) + g.kernel_len()];
        let dyb = &dy[b * g.c_out * n..(b + 1) * g.c_out * n];
        let dxb = &mut dx[b * g.in_len()..(b + 1) * g.in_len()];
        if g.is_pointwise() {
            T::gemm(k, g.c_out, n, wb, 1, k as isize, dyb, n as isize, 1, T::ZERO, dxb, n as isize, 1);
        } else {
            T::gemm(k, g.c_out, n, wb, 1, k as isize, dyb, n as isize, 1, T::ZERO, &mut dcol, n as isize, 1);
            col2im(g, &dcol, dxb);
        }
    }
    dx
}

fn grad_kernel<T: Scalar>(g: &Geometry, x: &[T], dy: &[T]) -> Vec<T> {
    let (k, n) = (g.patch_len(), g.out_len());
    let kernels = if g.per_sample { g.batch } else { 1 };
    let mut dw = vec![T::ZERO; kernels * g.kernel_len()];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; k * n] };
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        let dyb = &dy[b * g.c_out * n..(b + 1) * g.c_out * n];
        let off = g.kernel_offset(b);
        let beta = if g.per_sample || b == 0 { T::ZERO } else { T::ONE };
        let dwb = &mut dw[off..off + g.kernel_len()];
        T::gemm(g.c_out, n, k, dyb, n as isize, 1, cols, 1, n as isize, beta, dwb, k as isize, 1);
    }
    dw
}

fn slice<'a, T: candle_core::WithDType>(
    s: &'a CpuStorage,
    l: &Layout,
) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d expects contiguous operands"),
    }
}

#[derive(Debug, Clone, Copy)]
enum Role {
    Forward,
    GradInput { x_dims: [usize; 4] },
    GradKernel { w_dims: [usize; 5], per_sample: bool },
}

#[derive(Debug, Clone, Copy)]
struct ConvOp {
    stride: usize,
    pad: usize,
    role: Role,
}

impl ConvOp {
    fn run<T: Scalar + candle_core::WithDType>(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(Vec<T>, Shape)> {
        let a = slice::<T>(s1, l1)?;
        let b = slice::<T>(s2, l2)?;
        match self.role {
            Role::Forward => {
                let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
                let out = forward(&g, a, b);
                Ok((out, Shape::from((g.batch, g.c_out, g.out_h, g.out_w))))
            }
            Role::GradInput { x_dims } => {
                // a = dy, b = kernel
                let g = Geometry::new(&x_dims, l2.dims(), self.stride, self.pad)?;
                let dx = grad_input(&g, a, b);
                Ok((dx, Shape::from(x_dims.to_vec())))
            }
            Role::GradKernel { w_dims, per_sample } => {
                // a = x, b = dy
                let wd: &[usize] = if per_sample { &w_dims } else { &w_dims[1..] };
                let g = Geometry::new(l1.dims(), wd, self.stride, self.pad)?;
                let dw = grad_kernel(&g, a, b);
                Ok((dw, Shape::from(wd.to_vec())))
            }
        }
    }
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                let (v, s) = self.run::<f32>(s1, l1, s2, l2)?;
                Ok((CpuStorage::F32(v), s))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                let (v, s) = self.run::<f64>(s1, l1, s2, l2)?;
                Ok((CpuStorage::F64(v), s))
            }
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let x_dims: [usize; 4] = x.dims4()?.into();
        let (per_sample, w_dims) = match w.dims() {
            [o, i, kh, kw] => (false, [x_dims[0], *o, *i, *kh, *kw]),
            [b, o, i, kh, kw] => (true, [*b, *o, *i, *kh, *kw]),
            d => candle_core::bail!("unexpected kernel dims {d:?}"),
        };
        let gx = grad.apply_op2_no_bwd(
            w,
            &ConvOp {
                role: Role::GradInput { x_dims },
                ..*self
            },
        )?;
        let gw = x.apply_op2_no_bwd(
            &grad,
            &ConvOp {
                role: Role::GradKernel { w_dims, per_sample },
                ..*self
            },
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

/// Convolves `x` (B, C_in, H, W) with a shared `(C_out, C_in, k, k)` or per-sample
/// `(B, C_out, C_in, k, k)` kernel. Zero padding `pad` on every side.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if !matches!(x.dtype(), DType::F32 | DType::F64) || x.dtype() != kernel.dtype() {
        return Err(Error::shape(format!(
            "conv2d dtype mismatch: input {:?}, kernel {:?}",
            x.dtype(),
            kernel.dtype()
        )));
    }
    Geometry::new(x.dims(), kernel.dims(), stride, pad).map_err(|e| Error::shape(e.to_string()))?;
    let x = x.contiguous()?;
    let kernel = kernel.contiguous()?;
    Ok(x.apply_op2(
        &kernel,
        ConvOp {
            stride,
            pad,
            role: Role::Forward,
        },
    )?)
}

/// Straightforward seven-loop convolution used as a reference in tests.
pub fn conv2d_reference(
    x: &[f64],
    x_dims: [usize; 4],
    w: &[f64],
    w_dims: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, ci, h, wd] = x_dims;
    let [co, _, kh, kw] = w_dims;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * oh * ow];
    for n in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for x0 in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x0 * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((n * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((n * co + o) * oh + y) * ow + x0] = acc;
                }
            }
        }
    }
    (out, [b, co, oh, ow])
}

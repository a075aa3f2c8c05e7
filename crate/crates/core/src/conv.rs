//! 2-D convolution as im2col followed by a single-threaded GEMM, with a
//! GEMM-based backward pass. Candle's CPU backward for convolutions goes
//! through a direct transposed convolution that dominates training time.

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Module, Shape, Tensor, WithDType};
use candle_nn::VarBuilder;

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (&[batch, c, h, w], &[o, ci, k, k2]) = (x, wt) else {
            candle_core::bail!("conv expects rank-4 input and weight, got {x:?} and {wt:?}")
        };
        if ci != c || k != k2 || h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            candle_core::bail!("conv: incompatible input {x:?} and weight {wt:?}")
        }
        Ok(Self {
            batch,
            c,
            h,
            w,
            o,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn cols(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

}

/// Output columns `[lo, hi)` whose tap `k` lands inside an axis of length `n`.
fn valid_outputs(g: &Geometry, k: usize, n: usize, out: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(k).div_ceil(g.stride);
    let hi = if n + g.pad > k {
        ((n + g.pad - k - 1) / g.stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// `(C·k·k, Ho·Wo)` patch matrix of one image `(C, H, W)`.
fn im2col<T: WithDType>(g: &Geometry, x: &[T], out: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y0, y1) = valid_outputs(g, ky, g.h, g.ho);
            for kx in 0..g.k {
                let (x0, x1) = valid_outputs(g, kx, g.w, g.wo);
                let row = &mut out[((ci * g.k + ky) * g.k + kx) * p..][..p];
                row.fill(T::zero());
                for oy in y0..y1 {
                    let src = &plane[(oy * g.stride + ky - g.pad) * g.w..];
                    let dst = &mut row[oy * g.wo..];
                    for ox in x0..x1 {
                        dst[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto an image `(C, H, W)`.
fn col2im<T: WithDType>(g: &Geometry, cols: &[T], out: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y0, y1) = valid_outputs(g, ky, g.h, g.ho);
            for kx in 0..g.k {
                let (x0, x1) = valid_outputs(g, kx, g.w, g.wo);
                let row = &cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in y0..y1 {
                    let dst = &mut plane[(oy * g.stride + ky - g.pad) * g.w..];
                    let src = &row[oy * g.wo..];
                    for ox in x0..x1 {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// A strided matrix view: `(data, row stride, column stride)`.
type View<'a, T> = (&'a [T], isize, isize);

/// `dst (m×n, row-major) = [dst +] lhs (m×k) · rhs (k×n)`.
fn gemm<T: WithDType>(
    (m, n, k): (usize, usize, usize),
    dst: &mut [T],
    accumulate: bool,
    lhs: View<T>,
    rhs: View<T>,
) {
    assert!(dst.len() >= m * n);
    // SAFETY: every view covers its m×k / k×n / m×n extent, checked by the
    // callers' sizing, and `gemm` only reads/writes inside those extents.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.0.as_ptr(),
            lhs.2,
            lhs.1,
            rhs.0.as_ptr(),
            rhs.2,
            rhs.1,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

fn forward<T: WithDType>(g: &Geometry, x: &[T], wt: &[T], bias: &[T]) -> Vec<T> {
    let (kk, p) = (g.cols(), g.positions());
    let mut cols = vec![T::zero(); kk * p];
    let mut y = vec![T::zero(); g.batch * g.o * p];
    for (row, chunk) in y.chunks_mut(p).enumerate() {
        chunk.fill(bias[row % g.o]);
    }
    for b in 0..g.batch {
        im2col(g, &x[b * g.c * g.h * g.w..][..g.c * g.h * g.w], &mut cols);
        gemm(
            (g.o, p, kk),
            &mut y[b * g.o * p..][..g.o * p],
            true,
            (wt, kk as isize, 1),
            (&cols, p as isize, 1),
        );
    }
    y
}

fn backward<T: WithDType>(g: &Geometry, x: &[T], wt: &[T], gy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (kk, p) = (g.cols(), g.positions());
    let image = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); kk * p];
    let mut gcols = vec![T::zero(); kk * p];
    let mut gx = vec![T::zero(); g.batch * image];
    let mut gw = vec![T::zero(); g.o * kk];
    let mut gb = vec![T::zero(); g.o];
    for (row, chunk) in gy.chunks(p).enumerate() {
        gb[row % g.o] += chunk.iter().fold(T::zero(), |a, &v| a + v);
    }
    for b in 0..g.batch {
        let gy_b = &gy[b * g.o * p..][..g.o * p];
        im2col(g, &x[b * image..][..image], &mut cols);
        // dW += dY · colsᵀ
        gemm((g.o, kk, p), &mut gw, b > 0, (gy_b, p as isize, 1), (&cols, 1, p as isize));
        // dcols = Wᵀ · dY
        gemm((kk, p, g.o), &mut gcols, false, (wt, 1, kk as isize), (gy_b, p as isize, 1));
        col2im(g, &gcols, &mut gx[b * image..][..image]);
    }
    (gx, gw, gb)
}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&s[start..end]),
        None => candle_core::bail!("conv expects contiguous operands"),
    }
}

struct ConvOp {
    stride: usize,
    pad: usize,
}

impl CustomOp3 for ConvOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        if l3.dims() != [g.o] {
            candle_core::bail!("conv bias {:?} for {} output channels", l3.dims(), g.o)
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(
                forward(&g, contiguous(x, l1)?, contiguous(w, l2)?, contiguous(b, l3)?),
            ),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(
                forward(&g, contiguous(x, l1)?, contiguous(w, l2)?, contiguous(b, l3)?),
            ),
            _ => candle_core::bail!("conv supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from((g.batch, g.o, g.ho, g.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = Geometry::new(x.dims(), w.dims(), self.stride, self.pad)?;
        fn run<T: WithDType>(
            g: &Geometry,
            x: &Tensor,
            w: &Tensor,
            b: &Tensor,
            grad: &Tensor,
        ) -> candle_core::Result<[Tensor; 3]> {
            let flat = |t: &Tensor| t.flatten_all()?.to_vec1::<T>();
            let (gx, gw, gb) = backward(g, &flat(x)?, &flat(w)?, &flat(grad)?);
            Ok([
                Tensor::from_vec(gx, x.shape(), x.device())?,
                Tensor::from_vec(gw, w.shape(), w.device())?,
                Tensor::from_vec(gb, b.shape(), b.device())?,
            ])
        }
        let [gx, gw, gb] = match x.dtype() {
            DType::F32 => run::<f32>(&g, x, w, b, grad)?,
            DType::F64 => run::<f64>(&g, x, w, b, grad)?,
            dt => candle_core::bail!("conv backward does not support {dt:?}"),
        };
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// Cross-correlation of `x (B, C, H, W)` with `weight (O, C, k, k)` plus
/// `bias (O)`, zero padding `pad` on every side.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(
        &weight.contiguous()?,
        &bias.contiguous()?,
        ConvOp { stride, pad },
    )
}

/// Convolution layer with bias; parameters `weight (O, C, k, k)` and `bias (O)`.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        Ok(Self {
            weight: vb.get((out_c, in_c, kernel, kernel), "weight")?,
            bias: vb.get(out_c, "bias")?,
            stride,
            pad,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        conv2d(x, &self.weight, &self.bias, self.stride, self.pad)
    }
}

//! GELU, 3×3 depthwise convolution and affine normalisation as fused CPU
//! kernels with hand-written backward passes. Built from primitive tensor ops,
//! their backward passes allocate a dozen intermediates and run strided
//! reductions per call.

use candle_core::{
    CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType,
};

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&s[start..end]),
        None => candle_core::bail!("expected a contiguous operand"),
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_slope(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

struct Gelu;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-erf"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn map<T: WithDType>(x: &[T]) -> Vec<T> {
            x.iter().map(|&v| T::from_f64(gelu_value(v.to_f64()))).collect()
        }
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(map(contiguous(x, l)?)),
            CpuStorage::F64(x) => CpuStorage::F64(map(contiguous(x, l)?)),
            _ => candle_core::bail!("gelu supports f32 and f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        fn run<T: WithDType>(x: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
            let xs = x.flatten_all()?.to_vec1::<T>()?;
            let gs = grad.flatten_all()?.to_vec1::<T>()?;
            let out: Vec<T> = xs
                .iter()
                .zip(&gs)
                .map(|(&v, &g)| T::from_f64(gelu_slope(v.to_f64()) * g.to_f64()))
                .collect();
            Tensor::from_vec(out, x.shape(), x.device())
        }
        Ok(Some(match x.dtype() {
            DType::F32 => run::<f32>(x, grad)?,
            DType::F64 => run::<f64>(x, grad)?,
            dt => candle_core::bail!("gelu backward does not support {dt:?}"),
        }))
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}

/// Valid range of output index `o` for tap offset `d - 1` on an axis of `n`.
fn tap_range(d: usize, n: usize) -> (usize, usize) {
    match d {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

fn dw_forward<T: WithDType>(
    dims: (usize, usize, usize, usize),
    x: &[T],
    w: &[T],
    bias: &[T],
) -> Vec<T> {
    let (b, c, h, wd) = dims;
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * wd;
            let (xp, yp) = (&x[base..base + h * wd], &mut y[base..base + h * wd]);
            yp.fill(bias[ci]);
            for dy in 0..3 {
                let (i0, i1) = tap_range(dy, h);
                for dx in 0..3 {
                    let k = w[ci * 9 + dy * 3 + dx];
                    let (j0, j1) = tap_range(dx, wd);
                    for i in i0..i1 {
                        let src = (i + dy - 1) * wd;
                        for j in j0..j1 {
                            yp[i * wd + j] += k * xp[src + j + dx - 1];
                        }
                    }
                }
            }
        }
    }
    y
}

fn dw_backward<T: WithDType>(
    dims: (usize, usize, usize, usize),
    x: &[T],
    w: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, h, wd) = dims;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); c * 9];
    let mut gb = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * wd;
            let (xp, gyp) = (&x[base..base + h * wd], &gy[base..base + h * wd]);
            gb[ci] += gyp.iter().fold(T::zero(), |a, &v| a + v);
            let gxp = &mut gx[base..base + h * wd];
            for dy in 0..3 {
                let (i0, i1) = tap_range(dy, h);
                for dx in 0..3 {
                    let k = w[ci * 9 + dy * 3 + dx];
                    let (j0, j1) = tap_range(dx, wd);
                    let mut acc = T::zero();
                    for i in i0..i1 {
                        let src = (i + dy - 1) * wd;
                        for j in j0..j1 {
                            let g = gyp[i * wd + j];
                            acc += g * xp[src + j + dx - 1];
                            gxp[src + j + dx - 1] += k * g;
                        }
                    }
                    gw[ci * 9 + dy * 3 + dx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

struct Depthwise;

impl CustomOp3 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise-conv3x3"
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
        let dims = l1.shape().dims4()?;
        if l2.dims() != [dims.1, 1, 3, 3] || l3.dims() != [dims.1] {
            candle_core::bail!("depthwise weight {:?} for input {:?}", l2.dims(), l1.dims())
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(
                dw_forward(dims, contiguous(x, l1)?, contiguous(w, l2)?, contiguous(b, l3)?),
            ),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(
                dw_forward(dims, contiguous(x, l1)?, contiguous(w, l2)?, contiguous(b, l3)?),
            ),
            _ => candle_core::bail!("depthwise conv supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        fn run<T: WithDType>(x: &Tensor, w: &Tensor, b: &Tensor, grad: &Tensor) -> candle_core::Result<[Tensor; 3]> {
            let (gx, gw, gb) = dw_backward(x.dims4()?, &flat::<T>(x)?, &flat::<T>(w)?, &flat::<T>(grad)?);
            Ok([
                Tensor::from_vec(gx, x.shape(), x.device())?,
                Tensor::from_vec(gw, w.shape(), w.device())?,
                Tensor::from_vec(gb, b.shape(), b.device())?,
            ])
        }
        let [gx, gw, gb] = match x.dtype() {
            DType::F32 => run::<f32>(x, w, b, grad)?,
            DType::F64 => run::<f64>(x, w, b, grad)?,
            dt => candle_core::bail!("depthwise backward does not support {dt:?}"),
        };
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// Per-channel 3×3 cross-correlation with zero padding 1 plus bias; `weight` is
/// `(C, 1, 3, 3)`, `bias` is `(C)`.
pub fn depthwise3x3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op3(&weight.contiguous()?, &bias.contiguous()?, Depthwise)
}

pub(crate) fn flat<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

/// How a normalisation partitions a contiguous tensor: consecutive blocks of
/// `block` elements are normalised independently; element `o` of block `n` uses
/// affine channel `(n % groups) · (block / inner) + o / inner`.
#[derive(Debug, Clone, Copy)]
pub struct NormSpec {
    pub block: usize,
    pub groups: usize,
    pub inner: usize,
    pub eps: f64,
}

impl NormSpec {
    fn channel(&self, n: usize, o: usize) -> usize {
        (n % self.groups) * (self.block / self.inner) + o / self.inner
    }

    /// Mean and inverse standard deviation of one block.
    fn moments<T: WithDType>(&self, xs: &[T]) -> (f64, f64) {
        let m = xs.len() as f64;
        let mean = xs.iter().map(|v| v.to_f64()).sum::<f64>() / m;
        let var = xs.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / m;
        (mean, 1.0 / (var + self.eps).sqrt())
    }
}

fn norm_forward<T: WithDType>(spec: &NormSpec, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (n, (xs, ys)) in x.chunks(spec.block).zip(y.chunks_mut(spec.block)).enumerate() {
        let (mean, inv) = spec.moments(xs);
        for (o, (v, out)) in xs.iter().zip(ys.iter_mut()).enumerate() {
            let c = spec.channel(n, o);
            *out = T::from_f64((v.to_f64() - mean) * inv * gamma[c].to_f64() + beta[c].to_f64());
        }
    }
    y
}

fn norm_backward<T: WithDType>(
    spec: &NormSpec,
    x: &[T],
    gamma: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![0.0; gamma.len()];
    let mut gb = vec![0.0; gamma.len()];
    let mut dxhat = vec![0.0; spec.block];
    for (n, ((xs, gys), gxs)) in x
        .chunks(spec.block)
        .zip(gy.chunks(spec.block))
        .zip(gx.chunks_mut(spec.block))
        .enumerate()
    {
        let (mean, inv) = spec.moments(xs);
        let (mut sum_d, mut sum_dx) = (0.0, 0.0);
        for o in 0..xs.len() {
            let c = spec.channel(n, o);
            let xhat = (xs[o].to_f64() - mean) * inv;
            let g = gys[o].to_f64();
            gg[c] += g * xhat;
            gb[c] += g;
            dxhat[o] = g * gamma[c].to_f64();
            sum_d += dxhat[o];
            sum_dx += dxhat[o] * xhat;
        }
        let m = xs.len() as f64;
        for o in 0..xs.len() {
            let xhat = (xs[o].to_f64() - mean) * inv;
            gxs[o] = T::from_f64(inv * (dxhat[o] - sum_d / m - xhat * sum_dx / m));
        }
    }
    (gx, gg, gb)
}

struct AffineNorm(NormSpec);

impl CustomOp3 for AffineNorm {
    fn name(&self) -> &'static str {
        "affine-norm"
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
        let spec = &self.0;
        if l1.shape().elem_count() % spec.block != 0 {
            candle_core::bail!("norm block {} does not divide {:?}", spec.block, l1.dims())
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(
                norm_forward(spec, contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?),
            ),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(
                norm_forward(spec, contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?),
            ),
            _ => candle_core::bail!("norm supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let spec = self.0;
        fn run<T: WithDType>(
            spec: &NormSpec,
            x: &Tensor,
            gamma: &Tensor,
            grad: &Tensor,
        ) -> candle_core::Result<(Tensor, Vec<f64>, Vec<f64>)> {
            let (gx, gg, gb) = norm_backward(spec, &flat::<T>(x)?, &flat::<T>(gamma)?, &flat::<T>(grad)?);
            Ok((Tensor::from_vec(gx, x.shape(), x.device())?, gg, gb))
        }
        let (gx, gg, gb) = match x.dtype() {
            DType::F32 => run::<f32>(&spec, x, gamma, grad)?,
            DType::F64 => run::<f64>(&spec, x, gamma, grad)?,
            dt => candle_core::bail!("norm backward does not support {dt:?}"),
        };
        let param = |v: Vec<f64>, like: &Tensor| {
            Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())
        };
        Ok((Some(gx), Some(param(gg, gamma)?), Some(param(gb, beta)?)))
    }
}

/// Normalises `x` blockwise per `spec`, then applies the per-channel affine map.
pub fn affine_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, spec: NormSpec) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, AffineNorm(spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap()
    }

    #[test]
    fn gelu_matches_candle_value_and_finite_differences() {
        let x = Var::from_tensor(&rand(&[3, 7], 1)).unwrap();
        let up = rand(&[3, 7], 2);
        let ours = gelu(&x).unwrap();
        let reference = x.gelu_erf().unwrap();
        assert!(max_diff(&ours, &reference) < 1e-12);
        let grads = (ours * &up).unwrap().sum_all().unwrap().backward().unwrap();
        let analytic: Vec<f64> = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let xs: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let us: Vec<f64> = up.flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-5;
        for i in 0..xs.len() {
            let fd = (gelu_value(xs[i] + h) - gelu_value(xs[i] - h)) / (2.0 * h) * us[i];
            assert!((analytic[i] - fd).abs() < 1e-8, "{} vs {fd}", analytic[i]);
        }
    }

    #[test]
    fn depthwise_matches_grouped_convolution() {
        for (h, w) in [(5, 6), (1, 4), (3, 1)] {
            let x = Var::from_tensor(&rand(&[2, 3, h, w], 3)).unwrap();
            let k = Var::from_tensor(&rand(&[3, 1, 3, 3], 4)).unwrap();
            let b = Var::from_tensor(&rand(&[3], 8)).unwrap();
            let zero = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
            let ours = depthwise3x3(&x, &k, &b).unwrap();
            let reference = x
                .conv2d(&k, 1, 1, 1, 3)
                .unwrap()
                .broadcast_add(&b.reshape((1, 3, 1, 1)).unwrap())
                .unwrap();
            assert!(max_diff(&ours, &reference) < 1e-12);
            let up = rand(&[2, 3, h, w], 5);
            // Bilinear in (x, k) once the bias is removed.
            let grads = (ours * &up).unwrap().sum_all().unwrap().backward().unwrap();
            let loss = |a: &Tensor, c: &Tensor| -> f64 {
                (depthwise3x3(a, c, &zero).unwrap() * &up).unwrap().sum_all().unwrap().to_scalar().unwrap()
            };
            let dx = rand(&[2, 3, h, w], 6);
            let dk = rand(&[3, 1, 3, 3], 7);
            let inner = |v: &Var, d: &Tensor| -> f64 {
                (grads.get(v).unwrap() * d).unwrap().sum_all().unwrap().to_scalar().unwrap()
            };
            assert!((inner(&x, &dx) - loss(&dx, &k)).abs() < 1e-10);
            assert!((inner(&k, &dk) - loss(&x, &dk)).abs() < 1e-10);
            let gb: Vec<f64> = grads.get(&b).unwrap().to_vec1().unwrap();
            let expect: Vec<f64> = up.sum((0, 2, 3)).unwrap().to_vec1().unwrap();
            for (g, e) in gb.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-10);
            }
        }
    }

    fn composite_group_norm(x: &Tensor, g: &Tensor, b: &Tensor, groups: usize, eps: f64) -> Tensor {
        let (n, c, h, w) = x.dims4().unwrap();
        let xs = x.reshape((n, groups, c / groups * h * w)).unwrap();
        let mean = xs.mean_keepdim(2).unwrap();
        let centred = xs.broadcast_sub(&mean).unwrap();
        let var = centred.sqr().unwrap().mean_keepdim(2).unwrap();
        let normed = centred
            .broadcast_div(&(var + eps).unwrap().sqrt().unwrap())
            .unwrap()
            .reshape((n, c, h, w))
            .unwrap();
        normed
            .broadcast_mul(&g.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    #[test]
    fn group_norm_matches_composite_in_value_and_gradient() {
        let (c, h, w, groups) = (6, 3, 4, 3);
        let x = Var::from_tensor(&rand(&[2, c, h, w], 11)).unwrap();
        let g = Var::from_tensor(&rand(&[c], 12)).unwrap();
        let b = Var::from_tensor(&rand(&[c], 13)).unwrap();
        let up = rand(&[2, c, h, w], 14);
        let spec = NormSpec {
            block: c / groups * h * w,
            groups,
            inner: h * w,
            eps: 1e-5,
        };
        let ours = affine_norm(&x, &g, &b, spec).unwrap();
        let reference = composite_group_norm(&x, &g, &b, groups, 1e-5);
        assert!(max_diff(&ours, &reference) < 1e-12);
        let ga = (ours * &up).unwrap().sum_all().unwrap().backward().unwrap();
        let gr = (reference * &up).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &g, &b] {
            assert!(max_diff(ga.get(v).unwrap(), gr.get(v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn layer_norm_over_last_axis() {
        let x = Var::from_tensor(&rand(&[2, 5, 4], 21)).unwrap();
        let g = Var::from_tensor(&rand(&[4], 22)).unwrap();
        let b = Var::from_tensor(&rand(&[4], 23)).unwrap();
        let up = rand(&[2, 5, 4], 24);
        let spec = NormSpec { block: 4, groups: 1, inner: 1, eps: 1e-6 };
        let ours = affine_norm(&x, &g, &b, spec).unwrap();
        let mean = x.mean_keepdim(2).unwrap();
        let centred = x.broadcast_sub(&mean).unwrap();
        let var = centred.sqr().unwrap().mean_keepdim(2).unwrap();
        let reference = centred
            .broadcast_div(&(var + 1e-6).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&g)
            .unwrap()
            .broadcast_add(&b)
            .unwrap();
        assert!(max_diff(&ours, &reference) < 1e-12);
        let ga = (ours * &up).unwrap().sum_all().unwrap().backward().unwrap();
        let gr = (reference * &up).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &g, &b] {
            assert!(max_diff(ga.get(v).unwrap(), gr.get(v).unwrap()) < 1e-10);
        }
    }
}

//! Direct "same" convolution (stride 1, odd square kernel, zero padding
//! `k/2`) for the CPU backend with its own backward pass.
//!
//! The enhancer's layers have few channels at high resolution, where the
//! generic im2col path spends most of its time copying. Looping over kernel
//! taps with contiguous row updates is several times faster there.

use std::ops::{Add, AddAssign, Mul};

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};

use crate::error::{shape_err, Result};

trait Elem: Copy + Default + Add<Output = Self> + Mul<Output = Self> + AddAssign {}
impl Elem for f32 {}
impl Elem for f64 {}

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    c: usize,
    o: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Dims {
    /// Row span `[lo, hi)` of outputs whose tap at offset `d` is in bounds.
    fn span(n: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (n as isize - d.max(0)).max(0) as usize;
        (lo, hi.max(lo))
    }
}

fn forward<T: Elem + PartialOrd>(x: &[T], w: &[T], bias: Option<&[T]>, relu: bool, d: Dims) -> Vec<T> {
    let Dims { b, c, o, h, w: wd, k } = d;
    let p = (k / 2) as isize;
    let hw = h * wd;
    let mut out = vec![T::default(); b * o * hw];
    for bi in 0..b {
        for oi in 0..o {
            let dst = &mut out[(bi * o + oi) * hw..(bi * o + oi + 1) * hw];
            if let Some(bias) = bias {
                dst.fill(bias[oi]);
            }
            for ci in 0..c {
                let src = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (y0, y1) = Dims::span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - p;
                        let (x0, x1) = Dims::span(wd, dx);
                        let wv = w[((oi * c + ci) * k + ky) * k + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut dst[y * wd + x0..y * wd + x1];
                            let sx0 = (x0 as isize + dx) as usize;
                            let srow = &src[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)];
                            for (a, &s) in drow.iter_mut().zip(srow) {
                                *a += wv * s;
                            }
                        }
                    }
                }
            }
            if relu {
                for v in dst.iter_mut() {
                    if !(*v > T::default()) {
                        *v = T::default();
                    }
                }
            }
        }
    }
    out
}

/// `∂L/∂w[o,c,ky,kx] = Σ_{b,y,x} g[b,o,y,x] · x[b,c,y+dy,x+dx]`.
fn weight_grad<T: Elem>(x: &[T], g: &[T], d: Dims) -> Vec<T> {
    let Dims { b, c, o, h, w: wd, k } = d;
    let p = (k / 2) as isize;
    let hw = h * wd;
    let mut gw = vec![T::default(); o * c * k * k];
    for bi in 0..b {
        for oi in 0..o {
            let gp = &g[(bi * o + oi) * hw..(bi * o + oi + 1) * hw];
            for ci in 0..c {
                let src = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (y0, y1) = Dims::span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - p;
                        let (x0, x1) = Dims::span(wd, dx);
                        let mut acc = T::default();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let grow = &gp[y * wd + x0..y * wd + x1];
                            let srow = &src[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)];
                            acc += dot(grow, srow);
                        }
                        gw[((oi * c + ci) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Dot product with eight independent accumulators so the loop vectorises.
fn dot<T: Elem>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::default(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = T::default();
    for (&x, &y) in ar.iter().zip(br) {
        tail += x * y;
    }
    let l = lanes;
    ((l[0] + l[4]) + (l[1] + l[5])) + ((l[2] + l[6]) + (l[3] + l[7])) + tail
}

fn contiguous<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("same_conv needs contiguous inputs"),
    }
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                let ($a, $b) = (contiguous::<f32>($s1, $l1)?, contiguous::<f32>($s2, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                let ($a, $b) = (contiguous::<f64>($s1, $l1)?, contiguous::<f64>($s2, $l2)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("same_conv supports matching f32 or f64 inputs"),
        }
    };
}

fn conv_dims(l1: &Layout, l2: &Layout) -> candle_core::Result<Dims> {
    let (b, c, h, w) = l1.shape().dims4()?;
    let (o, c2, k, _) = l2.shape().dims4()?;
    if c != c2 {
        candle_core::bail!("same_conv channel mismatch {c} vs {c2}");
    }
    Ok(Dims { b, c, o, h, w, k })
}

/// Convolution plus bias, optionally followed by ReLU.
struct FusedConv {
    relu: bool,
}

impl CustomOp3 for FusedConv {
    fn name(&self) -> &'static str {
        "same-conv"
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
        let d = conv_dims(l1, l2)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(_), CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(forward(
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
                Some(contiguous::<f32>(s3, l3)?),
                self.relu,
                d,
            )),
            (CpuStorage::F64(_), CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(forward(
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
                Some(contiguous::<f64>(s3, l3)?),
                self.relu,
                d,
            )),
            _ => candle_core::bail!("same_conv supports matching f32 or f64 inputs"),
        };
        Ok((out, Shape::from((d.b, d.o, d.h, d.w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _bias: &Tensor,
        res: &Tensor,
        g: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = g.contiguous()?;
        let g = if self.relu {
            g.apply_op2_no_bwd(res, &ReluMask)?
        } else {
            g
        };
        let k = w.dims()[2];
        let rev: Vec<u32> = (0..k as u32).rev().collect();
        let rev = Tensor::new(rev, w.device())?;
        // Correlation with the flipped, channel-swapped kernel.
        let wt = w
            .index_select(&rev, 2)?
            .index_select(&rev, 3)?
            .transpose(0, 1)?
            .contiguous()?;
        let gx = g.apply_op2_no_bwd(&wt, &PlainConv)?;
        let gw = x.apply_op2_no_bwd(&g, &WeightGrad { k })?;
        let gb = g.apply_op1_no_bwd(&ChannelSum)?;
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

struct PlainConv;

impl CustomOp2 for PlainConv {
    fn name(&self) -> &'static str {
        "same-conv-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = conv_dims(l1, l2)?;
        let out = dispatch2!(s1, l1, s2, l2, |x, w| forward(x, w, None, false, d));
        Ok((out, Shape::from((d.b, d.o, d.h, d.w))))
    }
}

/// Zeroes the upstream gradient where the ReLU output was not positive.
struct ReluMask;

impl CustomOp2 for ReluMask {
    fn name(&self) -> &'static str {
        "relu-mask"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn mask<T: Elem + PartialOrd>(g: &[T], r: &[T]) -> Vec<T> {
            g.iter()
                .zip(r)
                .map(|(&g, &r)| if r > T::default() { g } else { T::default() })
                .collect()
        }
        let out = dispatch2!(s1, l1, s2, l2, |g, r| mask(g, r));
        Ok((out, l1.shape().clone()))
    }
}

/// Per-channel sum of a `B×C×H×W` tensor.
struct ChannelSum;

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn sum<T: Elem>(v: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
            let mut out = vec![T::default(); c];
            for bi in 0..b {
                for (ci, o) in out.iter_mut().enumerate() {
                    let plane = &v[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let mut lanes = [T::default(); 8];
                    let chunks = plane.chunks_exact(8);
                    let rem = chunks.remainder();
                    for ch in chunks {
                        for i in 0..8 {
                            lanes[i] += ch[i];
                        }
                    }
                    let mut t = T::default();
                    for &r in rem {
                        t += r;
                    }
                    *o += lanes.iter().fold(t, |a, &x| a + x);
                }
            }
            out
        }
        let (b, c, h, w) = l.shape().dims4()?;
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(sum(contiguous::<f32>(s, l)?, b, c, h * w)),
            CpuStorage::F64(_) => CpuStorage::F64(sum(contiguous::<f64>(s, l)?, b, c, h * w)),
            _ => candle_core::bail!("channel sum supports f32 or f64"),
        };
        Ok((out, Shape::from(c)))
    }
}

struct WeightGrad {
    k: usize,
}

impl CustomOp2 for WeightGrad {
    fn name(&self) -> &'static str {
        "same-conv-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let (_, o, _, _) = l2.shape().dims4()?;
        let d = Dims { b, c, o, h, w, k: self.k };
        let out = dispatch2!(s1, l1, s2, l2, |x, g| weight_grad(x, g, d));
        Ok((out, Shape::from((o, c, self.k, self.k))))
    }
}

/// Below this many pixels per plane the generic path is faster.
const MIN_PLANE: usize = 2048;

/// Whether [`same_conv`] handles this configuration.
pub fn supported(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> bool {
    let xd = x.dims();
    xd.len() == 4 && xd[2] * xd[3] >= MIN_PLANE && applicable(x, weight, stride, padding)
}

fn applicable(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> bool {
    let wd = weight.dims();
    x.dims().len() == 4
        && x.device().is_cpu()
        && matches!(x.dtype(), DType::F32 | DType::F64)
        && x.dtype() == weight.dtype()
        && stride == 1
        && wd.len() == 4
        && wd[2] == wd[3]
        && wd[2] % 2 == 1
        && padding == wd[2] / 2
}

/// Stride-1 convolution with zero padding `k/2` plus a per-channel bias,
/// optionally followed by ReLU; output has the input's spatial size.
pub fn same_conv(x: &Tensor, weight: &Tensor, bias: &Tensor, relu: bool) -> Result<Tensor> {
    if !applicable(x, weight, 1, weight.dims().get(2).copied().unwrap_or(0) / 2)
        || bias.dims() != [weight.dims()[0]]
    {
        return Err(shape_err(format!(
            "same_conv does not support input {:?} with kernel {:?} and bias {:?}",
            x.dims(),
            weight.dims(),
            bias.dims()
        )));
    }
    Ok(x.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, FusedConv { relu })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        let v = crate::nn::Init::new(seed).normal(n, 1.0);
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        crate::nn::scalar(&(a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap()).unwrap()
    }

    #[test]
    fn matches_reference_conv_and_its_gradients() {
        for relu in [false, true] {
            for (k, c, o, h, w) in [(3, 3, 5, 7, 9), (1, 4, 2, 5, 5), (5, 2, 3, 6, 4), (3, 2, 2, 1, 3), (3, 3, 2, 13, 11)] {
                let x = Var::from_tensor(&rand(&[2, c, h, w], 1)).unwrap();
                let wt = Var::from_tensor(&rand(&[o, c, k, k], 2)).unwrap();
                let b = Var::from_tensor(&rand(&[o], 4)).unwrap();
                let up = rand(&[2, o, h, w], 3);
                let ours = same_conv(&x, &wt, &b, relu).unwrap();
                let mut refr = x
                    .conv2d(&wt, k / 2, 1, 1, 1)
                    .unwrap()
                    .broadcast_add(&b.reshape((1, o, 1, 1)).unwrap())
                    .unwrap();
                if relu {
                    refr = refr.relu().unwrap();
                }
                assert!(max_diff(&ours, &refr) < 1e-12);
                let g1 = (ours * &up).unwrap().sum_all().unwrap().backward().unwrap();
                let g2 = (refr * &up).unwrap().sum_all().unwrap().backward().unwrap();
                for v in [&x, &wt, &b] {
                    assert!(max_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-10);
                }
            }
        }
    }

    #[test]
    fn unsupported_configurations_are_rejected() {
        let x = rand(&[1, 2, 4, 4], 1);
        assert!(same_conv(&x, &rand(&[1, 2, 2, 2], 2), &rand(&[1], 3), false).is_err());
        assert!(same_conv(&x, &rand(&[1, 2, 3, 3], 2), &rand(&[2], 3), false).is_err());
        assert!(!supported(&x, &rand(&[1, 2, 3, 3], 2), 2, 1));
    }
}

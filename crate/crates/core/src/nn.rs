//! Small differentiable building blocks on top of candle.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Result};
use crate::image::resize_weights;

/// Differentiable bilinear resize of a `B×C×H×W` tensor expressed as two
/// matrix products, so gradients reach the input pixels.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == height && w == width {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(resize_weights(h, height), (height, h), dev)?.to_dtype(x.dtype())?;
    let rxt = Tensor::from_vec(resize_weights(w, width), (width, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let rows = ry.broadcast_matmul(&x.contiguous()?)?;
    Ok(rows.broadcast_matmul(&rxt)?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, false)
    }

    /// `relu(forward(x))`, fused when the fast path applies.
    pub fn forward_relu(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, true)
    }

    fn apply(&self, x: &Tensor, relu: bool) -> Result<Tensor> {
        if let Some(b) = &self.bias {
            if crate::fastconv::supported(x, &self.weight, self.stride, self.padding) {
                return crate::fastconv::same_conv(x, &self.weight, b, relu);
            }
        }
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        };
        Ok(if relu { y.relu()? } else { y })
    }
}

/// `x · wᵀ + b` over the last dimension.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(&weight.t()?)?;
    Ok(match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// `x · σ(1.702 x)`.
pub fn quick_gelu(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 1.702)?.silu()? / 1.702)?)
}

/// Softmax over the last dimension with the row maximum subtracted.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Seeded parameter initialisation.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, n: usize, bound: f64) -> Vec<f32> {
        (0..n)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect()
    }

    pub fn normal(&mut self, n: usize, std: f64) -> Vec<f32> {
        (0..n)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                (z * std) as f32
            })
            .collect()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Ordered, named trainable parameters.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Var)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, data: Vec<f32>, shape: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.entries.push((name.into(), var));
        Ok(out)
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `map`; names and shapes must match.
    pub fn load_map(&self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.entries {
            let src = map
                .get(name)
                .ok_or_else(|| shape_err(format!("missing parameter '{name}'")))?;
            if src.dims() != var.dims() {
                return Err(shape_err(format!(
                    "parameter '{name}' has shape {:?}, checkpoint has {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint_map(&self.to_map())
    }
}

/// SHA-256 over names, shapes and little-endian f32 values, in name order.
pub fn fingerprint_map(map: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in map {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        let vals = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for v in vals {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Reads a scalar tensor of any float dtype as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_resize_matches_cpu_resize() {
        let img = crate::image::ImageTensor::from_fn(12, 10, |c, y, x| {
            ((c + 1) * (y * 3 + x * 5) % 23) as f32 / 22.0
        });
        let t = img.to_tensor(DType::F64, &Device::Cpu).unwrap();
        let r = resize_bilinear(&t, 7, 15).unwrap();
        let back = crate::image::ImageTensor::unstack(&r).unwrap().remove(0);
        let cpu = img.resize_bilinear(7, 15);
        for (a, b) in back.data().iter().zip(cpu.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &dev).unwrap();
        let g = Tensor::ones(4, DType::F64, &dev).unwrap();
        let b = Tensor::zeros(4, DType::F64, &dev).unwrap();
        let y = layer_norm(&x, &g, &b, 0.0).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let dev = Device::Cpu;
        let mut p = ParamSet::new();
        p.add("a", vec![1.0, 2.0], &[2], DType::F32, &dev).unwrap();
        let before = p.fingerprint().unwrap();
        assert_eq!(before, p.fingerprint().unwrap());
        p.get("a")
            .unwrap()
            .set(&Tensor::new(&[1.0f32, 2.5], &dev).unwrap())
            .unwrap();
        assert_ne!(before, p.fingerprint().unwrap());
    }
}

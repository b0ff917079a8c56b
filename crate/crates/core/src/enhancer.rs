//! U-Net illumination estimator and Retinex composition `I_t = I_b / I_i`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::image::ImageTensor;
use crate::nn::{Conv2d, Init, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancerConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// Lower bound of the illumination map; bounds the gain at `1/eps_illum`.
    pub eps_illum: f64,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 32,
            eps_illum: 0.01,
        }
    }
}

impl EnhancerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 6 || self.base_channels == 0 {
            return Err(Error::Config(format!(
                "enhancer depth must be 1..=6 and base_channels positive, got {self:?}"
            )));
        }
        if !(self.eps_illum > 0.0 && self.eps_illum < 1.0) {
            return Err(Error::Config(format!("eps_illum must be in (0,1), got {}", self.eps_illum)));
        }
        Ok(())
    }

    fn multiple(&self) -> usize {
        1 << self.depth
    }
}

/// The sigmoid spans `[eps, ILLUM_CEIL]` before the map is clipped to 1.
pub const ILLUM_CEIL: f64 = 1.1;
/// Initial head bias; `sigmoid(3)` puts the unclipped map near 1.05, so the
/// untrained net is the identity.
pub const HEAD_BIAS: f32 = 3.0;

struct Block {
    a: Conv2d,
    b: Conv2d,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.b.forward_relu(&self.a.forward_relu(x)?)
    }
}

struct Layers {
    down: Vec<Block>,
    bottleneck: Block,
    up: Vec<Block>,
    head: Conv2d,
}

pub struct Enhancer {
    cfg: EnhancerConfig,
    params: ParamSet,
    layers: Layers,
}

impl Enhancer {
    pub fn new(cfg: EnhancerConfig, seed: u64, dtype: DType, dev: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut params = ParamSet::new();
        let mut conv = |params: &mut ParamSet, name: String, cin: usize, cout: usize, k: usize| -> Result<()> {
            let bound = 1.0 / ((cin * k * k) as f64).sqrt();
            params.add(format!("{name}.w"), init.uniform(cout * cin * k * k, bound), &[cout, cin, k, k], dtype, dev)?;
            params.add(format!("{name}.b"), init.uniform(cout, bound), &[cout], dtype, dev)?;
            Ok(())
        };
        let ch = |i: usize| cfg.base_channels << i;
        for i in 0..cfg.depth {
            let cin = if i == 0 { 3 } else { ch(i - 1) };
            conv(&mut params, format!("down{i}.a"), cin, ch(i), 3)?;
            conv(&mut params, format!("down{i}.b"), ch(i), ch(i), 3)?;
        }
        conv(&mut params, "mid.a".into(), ch(cfg.depth - 1), ch(cfg.depth), 3)?;
        conv(&mut params, "mid.b".into(), ch(cfg.depth), ch(cfg.depth), 3)?;
        for i in 0..cfg.depth {
            conv(&mut params, format!("up{i}.a"), ch(i + 1) + ch(i), ch(i), 3)?;
            conv(&mut params, format!("up{i}.b"), ch(i), ch(i), 3)?;
        }
        // Near-zero head weights and a positive bias: the initial map is
        // close to 1 everywhere.
        params.add("head.w", init.normal(ch(0), 1e-3), &[1, ch(0), 1, 1], dtype, dev)?;
        params.add("head.b", vec![HEAD_BIAS], &[1], dtype, dev)?;
        let layers = build_layers(&cfg, &params.to_map())?;
        Ok(Self { cfg, params, layers })
    }

    pub fn config(&self) -> &EnhancerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.vars().next().map(|v| v.dtype()).unwrap_or(DType::F32)
    }

    pub fn device(&self) -> Device {
        self.params
            .vars()
            .next()
            .map(|v| v.device().clone())
            .unwrap_or(Device::Cpu)
    }

    /// Overwrites all weights; architecture must match.
    pub fn load_tensors(&self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        self.params.load_map(map)
    }

    fn net(&self, layers: &Layers, x: &Tensor) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x.clone();
        for block in &layers.down {
            h = block.forward(&h)?;
            skips.push(h.clone());
            h = h.max_pool2d(2)?;
        }
        h = layers.bottleneck.forward(&h)?;
        for (block, skip) in layers.up.iter().zip(skips.iter()).rev() {
            let (_, _, sh, sw) = skip.dims4()?;
            h = Tensor::cat(&[&h.upsample_nearest2d(sh, sw)?, skip], 1)?;
            h = block.forward(&h)?;
        }
        layers.head.forward(&h)
    }

    /// `min(1, eps + (ILLUM_CEIL - eps) * sigmoid(z))`. Monotone, so lowering
    /// `z` brightens every pixel alike. The clip to 1 passes gradients straight
    /// through: the identity is reached at a finite `z` and a clipped pixel can
    /// still be pulled back below 1, where a sigmoid topping out at 1 would
    /// saturate and stop learning for good.
    fn squash(&self, z: &Tensor) -> Result<Tensor> {
        let eps = self.cfg.eps_illum;
        let sig = (z * 0.5)?.tanh()?.affine(0.5, 0.5)?;
        let raw = sig.affine(ILLUM_CEIL - eps, eps)?;
        let over = (&raw - 1.0)?.relu()?.detach();
        Ok((raw - over)?)
    }

    /// Illumination map `B×1×H×W` for `B×3×H×W` input of any size.
    pub fn estimate_illumination(&self, x: &Tensor) -> Result<Tensor> {
        self.illumination_with(&self.layers, x)
    }

    fn illumination_with(&self, layers: &Layers, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(shape_err(format!("enhancer expects 3 channels, got {c}")));
        }
        let k = self.cfg.multiple();
        let (ph, pw) = ((k - h % k) % k, (k - w % k) % k);
        let padded = reflect_pad(x, ph, pw)?;
        let illum = self.squash(&self.net(layers, &padded)?)?;
        Ok(illum.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    /// `(enhanced, illumination)`; differentiable in the weights.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let illum = self.estimate_illumination(x)?;
        Ok((compose(x, &illum)?, illum))
    }

    /// Inference on one image without building a gradient graph.
    pub fn enhance_image(&self, img: &ImageTensor) -> Result<(ImageTensor, Vec<f32>)> {
        img.validate()?;
        let frozen = build_layers(&self.cfg, &detached(&self.params))?;
        let x = img.to_tensor(self.dtype(), &self.device())?;
        let illum = self.illumination_with(&frozen, &x)?;
        let out = compose(&x, &illum)?;
        let map = illum.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok((ImageTensor::unstack(&out)?.remove(0), map))
    }

    /// Batched inference without a gradient graph.
    pub fn enhance_batch(&self, x: &Tensor) -> Result<Tensor> {
        let frozen = build_layers(&self.cfg, &detached(&self.params))?;
        let illum = self.illumination_with(&frozen, &x.detach())?;
        compose(&x.detach(), &illum)
    }
}

fn detached(params: &ParamSet) -> BTreeMap<String, Tensor> {
    params
        .iter()
        .map(|(k, v)| (k.to_string(), v.as_tensor().detach()))
        .collect()
}

fn build_layers(cfg: &EnhancerConfig, p: &BTreeMap<String, Tensor>) -> Result<Layers> {
    let conv = |name: &str, pad: usize| -> Result<Conv2d> {
        let get = |k: String| {
            p.get(&k)
                .cloned()
                .ok_or_else(|| shape_err(format!("enhancer weights missing '{k}'")))
        };
        Ok(Conv2d::new(get(format!("{name}.w"))?, Some(get(format!("{name}.b"))?), 1, pad))
    };
    let block = |name: &str| -> Result<Block> {
        Ok(Block {
            a: conv(&format!("{name}.a"), 1)?,
            b: conv(&format!("{name}.b"), 1)?,
        })
    };
    Ok(Layers {
        down: (0..cfg.depth).map(|i| block(&format!("down{i}"))).collect::<Result<_>>()?,
        bottleneck: block("mid")?,
        up: (0..cfg.depth).map(|i| block(&format!("up{i}"))).collect::<Result<_>>()?,
        head: conv("head", 0)?,
    })
}

/// `clamp(input / illum, 0, 1)` with the map broadcast over channels.
pub fn compose(input: &Tensor, illum: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = input.dims4()?;
    if illum.dims() != [b, 1, h, w] {
        return Err(shape_err(format!(
            "illumination map {:?} does not match input {:?}",
            illum.dims(),
            input.dims()
        )));
    }
    Ok(input.broadcast_div(illum)?.clamp(0.0, 1.0)?)
}

/// Reflect-pads bottom and right edges.
pub fn reflect_pad(x: &Tensor, ph: usize, pw: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (ph > 0 && ph >= h) || (pw > 0 && pw >= w) {
        return Err(invalid(format!("image {h}x{w} too small to reflect-pad by {ph}x{pw}")));
    }
    let idx = |n: usize, p: usize| -> Vec<u32> {
        (0..n + p)
            .map(|i| if i < n { i } else { 2 * (n - 1) - i } as u32)
            .collect()
    };
    let mut out = x.clone();
    if ph > 0 {
        out = out.index_select(&Tensor::new(idx(h, ph), x.device())?, 2)?;
    }
    if pw > 0 {
        out = out.index_select(&Tensor::new(idx(w, pw), x.device())?, 3)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn small() -> Enhancer {
        let cfg = EnhancerConfig {
            depth: 3,
            base_channels: 4,
            eps_illum: 0.01,
        };
        Enhancer::new(cfg, 7, DType::F32, &Device::Cpu).unwrap()
    }

    fn img(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |c, y, x| ((c * 31 + y * 7 + x * 13) % 50) as f32 / 60.0)
    }

    #[test]
    fn illumination_shape_and_range() {
        let e = small();
        let x = img(13, 21).to_tensor(DType::F32, &Device::Cpu).unwrap();
        let m = e.estimate_illumination(&x).unwrap();
        assert_eq!(m.dims(), &[1, 1, 13, 21]);
        for v in m.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((0.01..=1.0).contains(&v));
        }
        let again = e.estimate_illumination(&x).unwrap();
        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(flat(&m), flat(&again));
    }

    #[test]
    fn compose_cases() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[0.2f32, 0.8, 0.5], &dev).unwrap().reshape((1, 3, 1, 1)).unwrap();
        let half = Tensor::new(&[0.5f32], &dev).unwrap().reshape((1, 1, 1, 1)).unwrap();
        let out = compose(&x, &half).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(out, vec![0.4, 1.0, 1.0]);
        let one = Tensor::ones((1, 1, 1, 1), DType::F32, &dev).unwrap();
        let out = compose(&x, &one).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![0.2, 0.8, 0.5]);
        let wrong = Tensor::ones((1, 1, 2, 1), DType::F32, &dev).unwrap();
        assert!(compose(&x, &wrong).is_err());
    }

    #[test]
    fn initial_network_is_near_identity_and_brighten_only() {
        let e = small();
        let input = img(24, 40);
        let (out, _) = e.enhance_image(&input).unwrap();
        assert!(psnr(&out, &input).unwrap() > 40.0);
        for (o, i) in out.data().iter().zip(input.data()) {
            assert!(*o >= *i);
        }
    }

    #[test]
    fn gradients_reach_weights() {
        let e = small();
        let x = img(16, 16).to_tensor(DType::F32, &Device::Cpu).unwrap();
        let (out, _) = e.forward(&x).unwrap();
        let g = out.mean_all().unwrap().backward().unwrap();
        let total: f32 = e
            .params()
            .vars()
            .filter_map(|v| g.get(v.as_tensor()))
            .map(|t| t.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap())
            .sum();
        assert!(total > 0.0);
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let x = Tensor::new(&[1f32, 2., 3.], &Device::Cpu).unwrap().reshape((1, 1, 1, 3)).unwrap();
        let p = reflect_pad(&x, 0, 2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(p, vec![1., 2., 3., 2., 1.]);
    }

    #[test]
    fn nan_input_rejected() {
        let mut i = img(8, 8);
        i.set(0, 0, 0, f32::NAN);
        assert!(small().enhance_image(&i).is_err());
    }
}

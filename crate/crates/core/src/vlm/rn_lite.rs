//! `rn-lite`: a compact CLIP-shaped backbone with seeded weights.
//!
//! The image tower is a five-stage residual CNN (stem plus four residual
//! stages) whose channel-pooled activations are centred, whitened and
//! projected into the joint space. The whitening statistics are fitted once,
//! when the weight file is first built, on a procedural calibration corpus of
//! scenes with varied exposure, colour casts and local shading. The text tower
//! is a causal pre-LN transformer with learned positions that pools the
//! end-of-text position. Weights are written to a safetensors file on first
//! use and loaded from it afterwards.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::tokenizer::{context_ids, tokenize, EOT, SOT};
use super::{check_images, BackboneOptions, LayerFeatures, VisionLanguageModel};
use crate::error::{shape_err, Error, Result};
use crate::image::ImageTensor;
use crate::nn::{
    fingerprint_map, l2_normalize, layer_norm, linear, quick_gelu, resize_bilinear, softmax_last,
    Conv2d, Init,
};

pub(super) const ID: &str = "rn-lite";

const PIXEL_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const PIXEL_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RnLiteConfig {
    pub embed_dim: usize,
    pub image_size: usize,
    pub widths: [usize; 5],
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_mlp: usize,
    pub vocab: usize,
    pub max_context: usize,
    pub logit_scale: f64,
    pub seed: u64,
    pub calibration_images: usize,
    /// Whitening adds this fraction of the largest calibration eigenvalue
    /// to every eigenvalue. Small values equalise all directions; larger ones
    /// keep the dominant photometric directions dominant.
    pub whiten_floor: f64,
}

impl Default for RnLiteConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            image_size: 64,
            widths: [16, 16, 32, 64, 128],
            text_layers: 2,
            text_heads: 8,
            text_mlp: 1024,
            vocab: 2048,
            max_context: 77,
            logit_scale: 10.0,
            seed: 0x5eed_c11b,
            calibration_images: 256,
            whiten_floor: 0.03,
        }
    }
}

impl RnLiteConfig {
    fn pooled_dim(&self) -> usize {
        self.widths.iter().sum()
    }

    fn tag(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(&json)[..6])
    }

    pub fn weights_file(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{ID}-{}.safetensors", self.tag()))
    }
}

struct TextLayer {
    ln1: (Tensor, Tensor),
    in_w: Tensor,
    in_b: Tensor,
    out_w: Tensor,
    out_b: Tensor,
    ln2: (Tensor, Tensor),
    fc_w: Tensor,
    fc_b: Tensor,
    proj_w: Tensor,
    proj_b: Tensor,
}

struct Stage {
    a: Conv2d,
    b: Conv2d,
    skip: Conv2d,
}

pub struct RnLite {
    cfg: RnLiteConfig,
    num_tokens: usize,
    dtype: DType,
    device: Device,
    weights: BTreeMap<String, Tensor>,
    pixel_mean: Tensor,
    pixel_std: Tensor,
    stem: Conv2d,
    stages: Vec<Stage>,
    pool_mean: Tensor,
    whiten: Tensor,
    img_proj: Tensor,
    token: Tensor,
    pos: Tensor,
    layers: Vec<TextLayer>,
    ln_final: (Tensor, Tensor),
    txt_proj: Tensor,
    causal_mask: Tensor,
}

impl RnLite {
    /// Loads the weight file for `cfg` from the resolved weights directory,
    /// building and saving it first if absent.
    pub fn load_or_build(cfg: RnLiteConfig, opts: &BackboneOptions) -> Result<Self> {
        let dir = opts.resolved_weights_dir();
        let file = cfg.weights_file(&dir);
        let weights = if file.exists() {
            load_weights(&file)?
        } else {
            log::info!("building {ID} weights at {}", file.display());
            let w = synthesize(&cfg)?;
            std::fs::create_dir_all(&dir)?;
            let tmp = tempfile::NamedTempFile::new_in(&dir)?;
            candle_core::safetensors::save(&w, tmp.path())?;
            tmp.persist(&file).map_err(|e| e.error)?;
            w.into_iter().collect()
        };
        Self::from_weights(cfg, weights, opts)
    }

    pub fn from_weights(
        cfg: RnLiteConfig,
        weights: BTreeMap<String, Tensor>,
        opts: &BackboneOptions,
    ) -> Result<Self> {
        if opts.num_tokens == 0 || opts.num_tokens + 2 > cfg.max_context {
            return Err(Error::Config(format!(
                "num_tokens must be in 1..={}, got {}",
                cfg.max_context - 2,
                opts.num_tokens
            )));
        }
        let (dtype, device) = (opts.dtype, opts.device.clone());
        let weights: BTreeMap<String, Tensor> = weights
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(dtype)?.to_device(&device)?)))
            .collect::<Result<_>>()?;
        let g = |name: &str| -> Result<Tensor> {
            weights
                .get(name)
                .cloned()
                .ok_or_else(|| shape_err(format!("{ID} weights missing '{name}'")))
        };
        let conv = |p: &str, stride: usize, pad: usize| -> Result<Conv2d> {
            Ok(Conv2d::new(g(&format!("{p}.w"))?, Some(g(&format!("{p}.b"))?), stride, pad))
        };
        let stages = (1..5)
            .map(|l| {
                Ok(Stage {
                    a: conv(&format!("img.l{l}.a"), 1, 1)?,
                    b: conv(&format!("img.l{l}.b"), 1, 1)?,
                    skip: conv(&format!("img.l{l}.skip"), 1, 0)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let layers = (0..cfg.text_layers)
            .map(|i| {
                let p = format!("txt.l{i}");
                Ok(TextLayer {
                    ln1: (g(&format!("{p}.ln1.g"))?, g(&format!("{p}.ln1.b"))?),
                    in_w: g(&format!("{p}.attn.in.w"))?,
                    in_b: g(&format!("{p}.attn.in.b"))?,
                    out_w: g(&format!("{p}.attn.out.w"))?,
                    out_b: g(&format!("{p}.attn.out.b"))?,
                    ln2: (g(&format!("{p}.ln2.g"))?, g(&format!("{p}.ln2.b"))?),
                    fc_w: g(&format!("{p}.mlp.fc.w"))?,
                    fc_b: g(&format!("{p}.mlp.fc.b"))?,
                    proj_w: g(&format!("{p}.mlp.proj.w"))?,
                    proj_b: g(&format!("{p}.mlp.proj.b"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let l = opts.num_tokens + 2;
        let mask: Vec<f32> = (0..l * l)
            .map(|i| if i % l > i / l { -1e9 } else { 0.0 })
            .collect();
        let chan = |v: [f32; 3]| -> Result<Tensor> {
            Ok(Tensor::new(&v, &device)?
                .reshape((1, 3, 1, 1))?
                .to_dtype(dtype)?)
        };
        let token = g("txt.token")?;
        if token.dims() != [cfg.vocab, cfg.embed_dim] {
            return Err(shape_err(format!(
                "token table has shape {:?}, config expects [{}, {}]",
                token.dims(),
                cfg.vocab,
                cfg.embed_dim
            )));
        }
        Ok(Self {
            num_tokens: opts.num_tokens,
            pixel_mean: chan(PIXEL_MEAN)?,
            pixel_std: chan(PIXEL_STD)?,
            stem: conv("img.stem", 2, 1)?,
            stages,
            pool_mean: g("img.pool.mean")?,
            whiten: g("img.pool.whiten")?,
            img_proj: g("img.proj")?,
            token,
            pos: g("txt.pos")?.narrow(0, 0, l)?,
            layers,
            ln_final: (g("txt.ln.g")?, g("txt.ln.b")?),
            txt_proj: g("txt.proj")?,
            causal_mask: Tensor::from_vec(mask, (l, l), &device)?.to_dtype(dtype)?,
            cfg,
            dtype,
            device,
            weights,
        })
    }

    pub fn config(&self) -> &RnLiteConfig {
        &self.cfg
    }

    fn image_tower(&self, images: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let s = self.cfg.image_size;
        let x = resize_bilinear(&images.to_dtype(self.dtype)?, s, s)?;
        let x = x
            .broadcast_sub(&self.pixel_mean)?
            .broadcast_div(&self.pixel_std)?;
        let mut h = self.stem.forward(&x)?.relu()?;
        let mut feats = vec![h.clone()];
        for (i, st) in self.stages.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2d(2)?;
            }
            let a = st.a.forward(&h)?.relu()?;
            h = (st.b.forward(&a)? + st.skip.forward(&h)?)?.relu()?;
            feats.push(h.clone());
        }
        let pooled = Tensor::cat(
            &feats
                .iter()
                .map(|f| f.mean((2, 3)))
                .collect::<candle_core::Result<Vec<_>>>()?,
            1,
        )?;
        Ok((pooled, feats))
    }

    fn text_tower(&self, seq: &Tensor) -> Result<Tensor> {
        let (p, l, d) = seq.dims3()?;
        let heads = self.cfg.text_heads;
        let dh = d / heads;
        let mut x = seq.broadcast_add(&self.pos)?;
        for layer in &self.layers {
            let h = layer_norm(&x, &layer.ln1.0, &layer.ln1.1, 1e-5)?;
            let qkv = linear(&h, &layer.in_w, Some(&layer.in_b))?;
            let split = |i: usize| -> Result<Tensor> {
                Ok(qkv
                    .narrow(2, i * d, d)?
                    .reshape((p, l, heads, dh))?
                    .transpose(1, 2)?
                    .contiguous()?)
            };
            let (q, k, v) = (split(0)?, split(1)?, split(2)?);
            let att = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?
                .broadcast_add(&self.causal_mask)?;
            let att = softmax_last(&att)?;
            let o = att
                .matmul(&v)?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((p, l, d))?;
            x = (x + linear(&o, &layer.out_w, Some(&layer.out_b))?)?;
            let h = layer_norm(&x, &layer.ln2.0, &layer.ln2.1, 1e-5)?;
            let h = quick_gelu(&linear(&h, &layer.fc_w, Some(&layer.fc_b))?)?;
            x = (x + linear(&h, &layer.proj_w, Some(&layer.proj_b))?)?;
        }
        let x = layer_norm(&x, &self.ln_final.0, &self.ln_final.1, 1e-5)?;
        let pooled = x.narrow(1, l - 1, 1)?.squeeze(1)?;
        l2_normalize(&pooled.matmul(&self.txt_proj)?)
    }

    fn lookup(&self, ids: &[u32]) -> Result<Tensor> {
        let idx = Tensor::new(ids, &self.device)?;
        Ok(self.token.index_select(&idx, 0)?)
    }
}

impl VisionLanguageModel for RnLite {
    fn id(&self) -> &str {
        ID
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    fn logit_scale(&self) -> f64 {
        self.cfg.logit_scale
    }

    fn input_size(&self) -> usize {
        self.cfg.image_size
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn encode_image_full(&self, images: &Tensor) -> Result<(Tensor, LayerFeatures)> {
        check_images(images)?;
        let (pooled, feats) = self.image_tower(images)?;
        let z = pooled
            .broadcast_sub(&self.pool_mean)?
            .matmul(&self.whiten)?;
        let emb = l2_normalize(&linear(&z, &self.img_proj, None)?)?;
        Ok((emb, LayerFeatures::new(feats)?))
    }

    fn encode_prompt(&self, tokens: &Tensor) -> Result<Tensor> {
        let (p, n, d) = match tokens.dims() {
            &[n, d] => (1, n, d),
            &[p, n, d] => (p, n, d),
            dims => return Err(shape_err(format!("prompt tokens must be N×D or P×N×D, got {dims:?}"))),
        };
        if n != self.num_tokens || d != self.cfg.embed_dim {
            return Err(shape_err(format!(
                "prompt tokens must be {}×{}, got {n}×{d}",
                self.num_tokens, self.cfg.embed_dim
            )));
        }
        let tokens = tokens.reshape((p, n, d))?.to_dtype(self.dtype)?;
        let sot = self.lookup(&[SOT])?.unsqueeze(0)?.broadcast_as((p, 1, d))?;
        let eot = self.lookup(&[EOT])?.unsqueeze(0)?.broadcast_as((p, 1, d))?;
        let seq = Tensor::cat(&[&sot, &tokens, &eot], 1)?;
        self.text_tower(&seq)
    }

    fn encode_text(&self, text: &str) -> Result<Tensor> {
        let (ids, _) = context_ids(text, self.cfg.vocab, self.num_tokens);
        let seq = self.lookup(&ids)?.unsqueeze(0)?;
        Ok(self.text_tower(&seq)?.squeeze(0)?)
    }

    fn word_embeddings(&self, phrase: &str) -> Result<(Tensor, bool)> {
        let mut ids = tokenize(phrase, self.cfg.vocab);
        let truncated = ids.len() > self.num_tokens;
        ids.truncate(self.num_tokens);
        let d = self.cfg.embed_dim;
        let rows = if ids.is_empty() {
            Tensor::zeros((self.num_tokens, d), self.dtype, &self.device)?
        } else {
            self.lookup(&ids)?
                .pad_with_zeros(0, 0, self.num_tokens - ids.len())?
        };
        Ok((rows, truncated))
    }

    fn fingerprint(&self) -> Result<String> {
        fingerprint_map(&self.weights)
    }
}

fn load_weights(file: &Path) -> Result<BTreeMap<String, Tensor>> {
    let map: HashMap<String, Tensor> = candle_core::safetensors::load(file, &Device::Cpu)?;
    Ok(map.into_iter().collect())
}

/// Seeds every tensor, then fits the pooled-feature whitening on the
/// calibration corpus.
fn synthesize(cfg: &RnLiteConfig) -> Result<HashMap<String, Tensor>> {
    let dev = Device::Cpu;
    let mut init = Init::new(cfg.seed);
    let mut w: HashMap<String, Tensor> = HashMap::new();

    let wd = cfg.widths;
    conv_init(&mut w, &mut init, "img.stem", 3, wd[0], 3)?;
    for l in 1..5 {
        conv_init(&mut w, &mut init, &format!("img.l{l}.a"), wd[l - 1], wd[l], 3)?;
        conv_init(&mut w, &mut init, &format!("img.l{l}.b"), wd[l], wd[l], 3)?;
        conv_init(&mut w, &mut init, &format!("img.l{l}.skip"), wd[l - 1], wd[l], 1)?;
    }

    let d = cfg.embed_dim;
    let layers = cfg.text_layers;
    let attn_std = (d as f64).powf(-0.5);
    let proj_std = attn_std * ((2 * layers) as f64).powf(-0.5);
    let fc_std = ((2 * d) as f64).powf(-0.5);
    let mut token = init.normal(cfg.vocab * d, 0.02);
    token[..d].iter_mut().for_each(|v| *v = 0.0);
    put(&mut w, "txt.token", token, &[cfg.vocab, d])?;
    let pos = init.normal(cfg.max_context * d, 0.01);
    put(&mut w, "txt.pos", pos, &[cfg.max_context, d])?;
    for i in 0..layers {
        let p = format!("txt.l{i}");
        for ln in ["ln1", "ln2"] {
            put(&mut w, format!("{p}.{ln}.g"), vec![1.0; d], &[d])?;
            put(&mut w, format!("{p}.{ln}.b"), vec![0.0; d], &[d])?;
        }
        put(&mut w, format!("{p}.attn.in.w"), init.normal(3 * d * d, attn_std), &[3 * d, d])?;
        put(&mut w, format!("{p}.attn.in.b"), vec![0.0; 3 * d], &[3 * d])?;
        put(&mut w, format!("{p}.attn.out.w"), init.normal(d * d, proj_std), &[d, d])?;
        put(&mut w, format!("{p}.attn.out.b"), vec![0.0; d], &[d])?;
        put(&mut w, format!("{p}.mlp.fc.w"), init.normal(cfg.text_mlp * d, fc_std), &[cfg.text_mlp, d])?;
        put(&mut w, format!("{p}.mlp.fc.b"), vec![0.0; cfg.text_mlp], &[cfg.text_mlp])?;
        put(&mut w, format!("{p}.mlp.proj.w"), init.normal(d * cfg.text_mlp, proj_std), &[d, cfg.text_mlp])?;
        put(&mut w, format!("{p}.mlp.proj.b"), vec![0.0; d], &[d])?;
    }
    put(&mut w, "txt.ln.g", vec![1.0; d], &[d])?;
    put(&mut w, "txt.ln.b", vec![0.0; d], &[d])?;
    put(&mut w, "txt.proj", init.normal(d * d, attn_std), &[d, d])?;

    // Orthonormal columns from a QR factorisation of a Gaussian matrix.
    let pd = cfg.pooled_dim();
    let g = DMatrix::<f64>::from_vec(d, pd, init.normal(d * pd, 1.0).iter().map(|&v| v as f64).collect());
    let q = g.qr().q();
    let proj: Vec<f32> = (0..d)
        .flat_map(|r| (0..pd).map(move |c| (r, c)))
        .map(|(r, c)| q[(r, c)] as f32)
        .collect();
    put(&mut w, "img.proj", proj, &[d, pd])?;

    // Whitening fitted on calibration scenes.
    put(&mut w, "img.pool.mean", vec![0.0; pd], &[pd])?;
    put(&mut w, "img.pool.whiten", identity(pd), &[pd, pd])?;
    let probe = RnLite::from_weights(
        cfg.clone(),
        w.clone().into_iter().collect(),
        &BackboneOptions {
            num_tokens: 1,
            ..Default::default()
        },
    )?;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(cfg.calibration_images);
    let batch = 32;
    let mut produced = 0;
    while produced < cfg.calibration_images {
        let n = batch.min(cfg.calibration_images - produced);
        let imgs: Vec<ImageTensor> = (0..n)
            .map(|_| calibration_scene(init.rng(), cfg.image_size))
            .collect();
        let t = ImageTensor::stack(&imgs, DType::F32, &dev)?;
        let (pooled, _) = probe.image_tower(&t)?;
        for r in pooled.to_dtype(DType::F64)?.to_vec2::<f64>()? {
            rows.push(r);
        }
        produced += n;
    }
    let (mean, whiten) = whitening(&rows, pd, cfg.whiten_floor);
    put(&mut w, "img.pool.mean", mean, &[pd])?;
    put(&mut w, "img.pool.whiten", whiten, &[pd, pd])?;
    Ok(w)
}

fn put(w: &mut HashMap<String, Tensor>, name: impl Into<String>, data: Vec<f32>, shape: &[usize]) -> Result<()> {
    w.insert(name.into(), Tensor::from_vec(data, shape, &Device::Cpu)?);
    Ok(())
}

fn conv_init(w: &mut HashMap<String, Tensor>, init: &mut Init, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    put(w, format!("{name}.w"), init.uniform(cout * cin * k * k, bound), &[cout, cin, k, k])?;
    put(w, format!("{name}.b"), init.uniform(cout, bound), &[cout])
}

fn identity(n: usize) -> Vec<f32> {
    (0..n * n)
        .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
        .collect()
}

/// Mean and symmetric (ZCA) whitening matrix, each eigenvalue raised by
/// `floor` times the largest.
fn whitening(rows: &[Vec<f64>], dim: usize, floor: f64) -> (Vec<f32>, Vec<f32>) {
    let n = rows.len() as f64;
    let mut mean = vec![0f64; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for r in rows {
        let c = nalgebra::DVector::from_iterator(dim, r.iter().zip(&mean).map(|(v, m)| v - m));
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    let eig = cov.symmetric_eigen();
    let floor = eig.eigenvalues.max() * floor;
    let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + floor).sqrt()));
    let wm = &eig.eigenvectors * scale * eig.eigenvectors.transpose();
    let whiten = (0..dim * dim)
        .map(|i| wm[(i / dim, i % dim)] as f32)
        .collect();
    (mean.into_iter().map(|v| v as f32).collect(), whiten)
}

/// Procedural scene: colour gradient, oriented texture, a few discs, a
/// global exposure and, half the time, a smooth local shading field.
fn calibration_scene(rng: &mut impl Rng, size: usize) -> ImageTensor {
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let gx: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
    let gy: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
    let amp: f32 = rng.random_range(0.0..0.3);
    let freq: f32 = rng.random_range(1.0..12.0);
    let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
    let discs: Vec<(f32, f32, f32, [f32; 3])> = (0..rng.random_range(0..4))
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.05..0.3),
                std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            )
        })
        .collect();
    let exposure: f32 = rng.random_range(0.1..1.6);
    let shade = rng.random_bool(0.5).then(|| {
        (
            rng.random_range(0.0..1.0f32),
            rng.random_range(0.0..1.0f32),
            rng.random_range(0.15..0.6f32),
            rng.random_range(0.05..1.0f32),
        )
    });
    ImageTensor::from_fn(size, size, |c, y, x| {
        let u = x as f32 / (size - 1) as f32;
        let v = y as f32 / (size - 1) as f32;
        let wave = (freq * std::f32::consts::TAU * (u * theta.cos() + v * theta.sin()) + phase).sin();
        let mut val = base[c] + gx[c] * u + gy[c] * v + amp * tint[c] * wave;
        for (cx, cy, r, col) in &discs {
            if (u - cx).powi(2) + (v - cy).powi(2) < r * r {
                val = col[c] + 0.5 * amp * wave;
            }
        }
        let mut gain = exposure;
        if let Some((cx, cy, r, lo)) = shade {
            let dist = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
            let inside = 1.0 / (1.0 + ((dist - r) / 0.05).exp());
            gain *= 1.0 - inside * (1.0 - lo);
        }
        (val * gain).clamp(0.0, 1.0)
    })
}

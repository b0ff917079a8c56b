//! The learnable prompt pair and the prompt-side objectives: binary
//! classification during initialisation, the negative similarity score and
//! the two margin ranking losses used during refinement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::blob;
use crate::error::{invalid, shape_err, Error, Result};
use crate::image::ImageTensor;
use crate::nn::{softmax_last, Init};
use crate::vlm::VisionLanguageModel;

/// Probability clip applied before taking logs.
pub const BCE_CLIP: f64 = 1e-7;
const BLOB_KIND: &str = "prompts";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitMode {
    PureRandom,
    WordSeeded { negative: String, positive: String },
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::WordSeeded {
            negative: "low light".into(),
            positive: "normal light".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Margins {
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            m0: 0.9,
            m1: 0.2,
            m2: 0.2,
        }
    }
}

impl Margins {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.m1 && self.m1 <= self.m0 && self.m0 <= 1.0 && self.m2 >= 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "margins must satisfy 0 <= m1 <= m0 <= 1 and m2 >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Negative (`T_n`) and positive (`T_p`) token-embedding matrices.
pub struct PromptPair {
    negative: Var,
    positive: Var,
    init_mode: InitMode,
    truncated: bool,
}

impl PromptPair {
    pub fn init(model: &dyn VisionLanguageModel, mode: &InitMode, seed: u64) -> Result<Self> {
        let (n, d) = (model.num_tokens(), model.embed_dim());
        let (dtype, dev) = (model.dtype(), model.device());
        let (neg, pos, truncated) = match mode {
            InitMode::PureRandom => {
                let mut init = Init::new(seed);
                let neg = Tensor::from_vec(init.normal(n * d, 0.02), (n, d), dev)?;
                let pos = Tensor::from_vec(init.normal(n * d, 0.02), (n, d), dev)?;
                (neg.to_dtype(dtype)?, pos.to_dtype(dtype)?, false)
            }
            InitMode::WordSeeded { negative, positive } => {
                let (neg, tn) = model.word_embeddings(negative)?;
                let (pos, tp) = model.word_embeddings(positive)?;
                if tn || tp {
                    log::warn!("prompt seed phrase truncated to {n} tokens");
                }
                (neg, pos, tn || tp)
            }
        };
        Ok(Self {
            negative: Var::from_tensor(&neg)?,
            positive: Var::from_tensor(&pos)?,
            init_mode: mode.clone(),
            truncated,
        })
    }

    pub fn negative(&self) -> &Tensor {
        self.negative.as_tensor()
    }

    pub fn positive(&self) -> &Tensor {
        self.positive.as_tensor()
    }

    pub fn vars(&self) -> [(&str, &Var); 2] {
        [("T_n", &self.negative), ("T_p", &self.positive)]
    }

    pub fn init_mode(&self) -> &InitMode {
        &self.init_mode
    }

    /// Whether a seed phrase was cut to fit the token count.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn shape(&self) -> (usize, usize) {
        let d = self.negative.dims();
        (d[0], d[1])
    }

    /// Unit-norm text embeddings, rows `[negative, positive]`.
    pub fn encode(&self, model: &dyn VisionLanguageModel) -> Result<Tensor> {
        let stacked = Tensor::stack(&[self.negative(), self.positive()], 0)?;
        model.encode_prompt(&stacked)
    }

    /// `S` for each image, evaluated in batches.
    pub fn score_images(
        &self,
        model: &dyn VisionLanguageModel,
        images: &[ImageTensor],
        scale: f64,
    ) -> Result<Vec<f64>> {
        let text = self.encode(model)?.detach();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(8) {
            let emb = if chunk.iter().all(|i| i.height() == chunk[0].height() && i.width() == chunk[0].width()) {
                model.encode_image(&ImageTensor::stack(chunk, model.dtype(), model.device())?)?
            } else {
                let rows = chunk
                    .iter()
                    .map(|i| model.encode_image(&i.to_tensor(model.dtype(), model.device())?))
                    .collect::<Result<Vec<_>>>()?;
                Tensor::cat(&rows, 0)?
            };
            let s = negative_score(&emb, &text, scale)?;
            out.extend(s.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.as_tensor().clone()))
            .collect()
    }

    pub fn load_tensors(&self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars() {
            let t = map
                .get(name)
                .ok_or_else(|| shape_err(format!("prompt checkpoint lacks {name}")))?;
            if t.dims() != var.dims() {
                return Err(shape_err(format!(
                    "{name} has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, iteration: u64) -> Result<()> {
        let (n, d) = self.shape();
        let meta = json!({
            "num_tokens": n,
            "embed_dim": d,
            "init_mode": self.init_mode,
            "truncated": self.truncated,
            "iteration": iteration,
        });
        blob::write(path, BLOB_KIND, &self.to_tensors(), meta)
    }

    /// Returns the pair and the iteration it was saved at.
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<(Self, u64)> {
        let (tensors, meta) = blob::read(path, BLOB_KIND)?;
        let get = |k: &str| -> Result<Tensor> {
            Ok(tensors
                .get(k)
                .ok_or_else(|| shape_err(format!("prompt checkpoint lacks {k}")))?
                .to_dtype(dtype)?
                .to_device(device)?)
        };
        let (neg, pos) = (get("T_n")?, get("T_p")?);
        let n = meta["num_tokens"].as_u64().unwrap_or(0) as usize;
        let d = meta["embed_dim"].as_u64().unwrap_or(0) as usize;
        if neg.dims() != [n, d] || pos.dims() != [n, d] {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                reason: format!("header says {n}x{d}, tensors are {:?} and {:?}", neg.dims(), pos.dims()),
            });
        }
        let init_mode = serde_json::from_value(meta["init_mode"].clone())?;
        Ok((
            Self {
                negative: Var::from_tensor(&neg)?,
                positive: Var::from_tensor(&pos)?,
                init_mode,
                truncated: meta["truncated"].as_bool().unwrap_or(false),
            },
            meta["iteration"].as_u64().unwrap_or(0),
        ))
    }

    /// Plain-text matrix dump: a header, then one row per token.
    pub fn dump_text(&self) -> Result<String> {
        let (n, d) = self.shape();
        let mut s = format!("# prompt pair {n}x{d}\n");
        for (name, var) in self.vars() {
            let _ = writeln!(s, "[{name}]");
            for row in var.to_dtype(DType::F64)?.to_vec2::<f64>()? {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
                let _ = writeln!(s, "{}", line.join(" "));
            }
        }
        Ok(s)
    }
}

/// Two-way softmax over scaled cosines. `image_emb` is `B×D`, `text` is
/// `2×D` with rows `[negative, positive]`; returns `B×2` probabilities.
pub fn probabilities(image_emb: &Tensor, text: &Tensor, scale: f64) -> Result<Tensor> {
    let cos = image_emb.matmul(&text.t()?)?;
    softmax_last(&(cos * scale)?)
}

/// `S(I)`: the negative prompt's share, shape `B`.
pub fn negative_score(image_emb: &Tensor, text: &Tensor, scale: f64) -> Result<Tensor> {
    Ok(probabilities(image_emb, text, scale)?.narrow(1, 0, 1)?.squeeze(1)?)
}

/// `ŷ`: the positive prompt's share, shape `B`.
pub fn y_hat(image_emb: &Tensor, text: &Tensor, scale: f64) -> Result<Tensor> {
    Ok(probabilities(image_emb, text, scale)?.narrow(1, 1, 1)?.squeeze(1)?)
}

/// Batch-mean binary cross entropy; label 1 is well-lit, 0 backlit.
pub fn initial_loss(y_hat: &Tensor, labels: &[f32]) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(invalid("initial loss over an empty batch"));
    }
    if y_hat.dims() != [labels.len()] {
        return Err(shape_err(format!(
            "{} labels for predictions of shape {:?}",
            labels.len(),
            y_hat.dims()
        )));
    }
    let y = Tensor::from_slice(labels, labels.len(), y_hat.device())?.to_dtype(y_hat.dtype())?;
    let p = y_hat.clamp(BCE_CLIP, 1.0 - BCE_CLIP)?;
    let pos = (&y * p.log()?)?;
    let neg = (y.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

fn hinge(x: &Tensor, margin: f64) -> Result<Tensor> {
    Ok((x + margin)?.relu()?)
}

/// First refinement round, batch mean. All inputs have shape `B`.
pub fn refine_loss_round1(s_w: &Tensor, s_b: &Tensor, s_t: &Tensor, m: &Margins) -> Result<Tensor> {
    let a = hinge(&(s_w - s_b)?, m.m0)?;
    let b = hinge(&(s_t - s_b)?, m.m0)?;
    let c = hinge(&(s_w - s_t)?, m.m1)?;
    Ok(((a + b)? + c)?.mean_all()?)
}

/// Later refinement rounds; `s_tm1` scores the previous round's outputs.
pub fn refine_loss_round2(
    s_w: &Tensor,
    s_b: &Tensor,
    s_t: &Tensor,
    s_tm1: Option<&Tensor>,
    m: &Margins,
) -> Result<Tensor> {
    let s_tm1 = s_tm1.ok_or_else(|| {
        Error::State("no previous-round outputs are cached; use refine_loss_round1".into())
    })?;
    let a = hinge(&(s_w - s_b)?, m.m0)?;
    let b = hinge(&(s_tm1 - s_b)?, m.m0)?;
    let c = hinge(&(s_w - s_t)?, m.m1)?;
    let d = hinge(&(s_t - s_tm1)?, m.m2)?;
    Ok((((a + b)? + c)? + d)?.mean_all()?)
}

/// Plain-number versions of the prompt formulas.
pub mod scalar {
    use super::{Margins, BCE_CLIP};

    /// `(ŷ, S)` from the two cosines.
    pub fn scores(cos_pos: f64, cos_neg: f64, scale: f64) -> (f64, f64) {
        let (a, b) = (scale * cos_pos, scale * cos_neg);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        (ea / (ea + eb), eb / (ea + eb))
    }

    pub fn bce(y_hat: &[f64], labels: &[f64]) -> f64 {
        let n = y_hat.len() as f64;
        y_hat
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n
    }

    pub fn round1(s_w: f64, s_b: f64, s_t: f64, m: &Margins) -> f64 {
        (s_w - s_b + m.m0).max(0.0) + (s_t - s_b + m.m0).max(0.0) + (s_w - s_t + m.m1).max(0.0)
    }

    pub fn round2(s_w: f64, s_b: f64, s_t: f64, s_tm1: f64, m: &Margins) -> f64 {
        (s_w - s_b + m.m0).max(0.0)
            + (s_tm1 - s_b + m.m0).max(0.0)
            + (s_w - s_t + m.m1).max(0.0)
            + (s_t - s_tm1 + m.m2).max(0.0)
    }
}

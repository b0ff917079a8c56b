//! Enhancement-side objectives: the prompt-guided score on the output, the
//! multi-layer identity term and their weighted sum.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::prompt::negative_score;
use crate::vlm::{LayerFeatures, VisionLanguageModel, LAYER_COUNT};

/// Added under the square root so a zero difference has a finite gradient;
/// subtracted back out so identical inputs give exactly zero.
pub const RMS_EPS: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityPhase {
    SelfReconstruction,
    Enhancement,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityWeights {
    pub alpha: [f64; LAYER_COUNT],
}

impl IdentityWeights {
    pub fn for_phase(phase: IdentityPhase) -> Self {
        match phase {
            IdentityPhase::SelfReconstruction => Self { alpha: [1.0; 5] },
            IdentityPhase::Enhancement => Self {
                alpha: [1.0, 1.0, 1.0, 1.0, 0.5],
            },
        }
    }
}

/// Mean `S` of the enhanced batch under fixed text embeddings.
pub fn clip_enhance_loss(enhanced_emb: &Tensor, text: &Tensor, scale: f64) -> Result<Tensor> {
    Ok(negative_score(enhanced_emb, text, scale)?.mean_all()?)
}

/// `Σ_l α_l · RMS(Φ_l(input) − Φ_l(enhanced))`, the RMS taken per sample
/// over the layer's elements, then averaged over the batch.
pub fn identity_loss(input: &LayerFeatures, enhanced: &LayerFeatures, w: &IdentityWeights) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (l, (a, b)) in input.iter().zip(enhanced.iter()).enumerate() {
        if a.dims() != b.dims() {
            return Err(shape_err(format!(
                "layer {l} features differ in shape: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        if w.alpha[l] == 0.0 {
            continue;
        }
        let mse = (a - b)?.sqr()?.flatten_from(1)?.mean(1)?;
        let rms = ((mse + RMS_EPS)?.sqrt()? - RMS_EPS.sqrt())?;
        let term = (rms.mean_all()? * w.alpha[l])?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(Tensor::zeros((), input.layer(0).dtype(), input.layer(0).device())?),
    }
}

pub struct EnhanceLoss {
    pub clip: Tensor,
    pub identity: Tensor,
    pub total: Tensor,
}

/// `clip + w · identity` from one backbone pass over the enhanced batch.
/// `input_feats` are the (gradient-free) features of the input batch.
pub fn enhance_loss(
    model: &dyn VisionLanguageModel,
    input_feats: &LayerFeatures,
    enhanced: &Tensor,
    text: &Tensor,
    scale: f64,
    w: f64,
    idw: &IdentityWeights,
) -> Result<EnhanceLoss> {
    let (emb, feats) = model.encode_image_full(enhanced)?;
    let clip = clip_enhance_loss(&emb, text, scale)?;
    let identity = identity_loss(input_feats, &feats, idw)?;
    let total = (&clip + (&identity * w)?)?;
    Ok(EnhanceLoss { clip, identity, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use candle_core::{DType, Device};

    fn feats(seed: u64) -> LayerFeatures {
        let mut init = crate::nn::Init::new(seed);
        let dev = Device::Cpu;
        let shapes = [(2, 3, 4, 4), (2, 4, 4, 4), (2, 5, 2, 2), (2, 6, 2, 2), (2, 7, 1, 1)];
        LayerFeatures::new(
            shapes
                .iter()
                .map(|&(b, c, h, w)| {
                    Tensor::from_vec(init.normal(b * c * h * w, 1.0), (b, c, h, w), &dev)
                        .unwrap()
                        .to_dtype(DType::F64)
                        .unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_features_give_zero() {
        let f = feats(1);
        let w = IdentityWeights::for_phase(IdentityPhase::SelfReconstruction);
        assert_eq!(scalar(&identity_loss(&f, &f, &w).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn matches_brute_force_and_is_linear_in_alpha() {
        let (a, b) = (feats(1), feats(2));
        let w = IdentityWeights::for_phase(IdentityPhase::Enhancement);
        let got = scalar(&identity_loss(&a, &b, &w).unwrap()).unwrap();
        let mut oracle = 0.0;
        for l in 0..5 {
            let x = a.layer(l).flatten_from(1).unwrap().to_vec2::<f64>().unwrap();
            let y = b.layer(l).flatten_from(1).unwrap().to_vec2::<f64>().unwrap();
            let mut per = 0.0;
            for (xr, yr) in x.iter().zip(&y) {
                let ss: f64 = xr.iter().zip(yr).map(|(p, q)| (p - q) * (p - q)).sum();
                per += (ss / xr.len() as f64).sqrt();
            }
            oracle += w.alpha[l] * per / x.len() as f64;
        }
        assert!((got - oracle).abs() < 1e-5);
        let doubled = IdentityWeights {
            alpha: w.alpha.map(|v| 2.0 * v),
        };
        let got2 = scalar(&identity_loss(&a, &b, &doubled).unwrap()).unwrap();
        assert!((got2 - 2.0 * got).abs() < 1e-12);
    }

    #[test]
    fn alpha_schedule() {
        assert_eq!(IdentityWeights::for_phase(IdentityPhase::SelfReconstruction).alpha, [1.0; 5]);
        assert_eq!(
            IdentityWeights::for_phase(IdentityPhase::Enhancement).alpha,
            [1.0, 1.0, 1.0, 1.0, 0.5]
        );
    }

    #[test]
    fn clip_term_hand_value() {
        let dev = Device::Cpu;
        let text = Tensor::new(&[[-1.0f64, 0.0], [1.0, 0.0]], &dev).unwrap();
        let img = Tensor::new(&[[1.0f64, 0.0]], &dev).unwrap();
        let v = scalar(&clip_enhance_loss(&img, &text, 1.0).unwrap()).unwrap();
        let e = std::f64::consts::E;
        assert!((v - (1.0 / e) / (1.0 / e + e)).abs() < 1e-15);
        assert!((v - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn mismatched_layers_rejected() {
        let a = feats(1);
        let dev = Device::Cpu;
        let b = LayerFeatures::new(
            (0..5)
                .map(|_| Tensor::zeros((1, 1, 1, 1), DType::F64, &dev).unwrap())
                .collect(),
        )
        .unwrap();
        let w = IdentityWeights::for_phase(IdentityPhase::Enhancement);
        assert!(identity_loss(&a, &b, &w).is_err());
    }
}

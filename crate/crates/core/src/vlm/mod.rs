//! Frozen vision-language backbones.
//!
//! A backbone exposes image encoding (pooled embedding plus five per-layer
//! feature maps), text encoding from raw token embeddings, and the standard
//! tokenizer path. Implementations never expose their weights as trainable
//! variables: gradients flow through them to images or prompt tokens only.

mod rn_lite;
pub mod tokenizer;

use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, Error, Result};

pub use rn_lite::{RnLite, RnLiteConfig};

/// Number of image-encoder layers exposed for the identity loss.
pub const LAYER_COUNT: usize = 5;

/// Per-layer feature maps `features[0..5]`, shallowest first.
#[derive(Clone, Debug)]
pub struct LayerFeatures {
    features: Vec<Tensor>,
}

impl LayerFeatures {
    pub fn new(features: Vec<Tensor>) -> Result<Self> {
        if features.len() != LAYER_COUNT {
            return Err(Error::Shape(format!(
                "expected {LAYER_COUNT} layers, got {}",
                features.len()
            )));
        }
        Ok(Self { features })
    }

    pub fn layer_count(&self) -> usize {
        self.features.len()
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.features[l]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.features.iter()
    }
}

pub trait VisionLanguageModel: Send + Sync {
    fn id(&self) -> &str;

    /// Shared dimensionality of image and text embeddings.
    fn embed_dim(&self) -> usize;

    /// Learnable token slots per prompt.
    fn num_tokens(&self) -> usize;

    /// Multiplier on cosine similarities before the two-way softmax.
    fn logit_scale(&self) -> f64;

    /// Side length images are resampled to before encoding.
    fn input_size(&self) -> usize;

    fn dtype(&self) -> DType;

    fn device(&self) -> &Device;

    /// `B×3×H×W` in `[0,1]` to unit-norm `B×embed_dim` embeddings plus
    /// per-layer features, in one pass.
    fn encode_image_full(&self, images: &Tensor) -> Result<(Tensor, LayerFeatures)>;

    fn encode_image(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.encode_image_full(images)?.0)
    }

    fn encode_image_layers(&self, images: &Tensor) -> Result<LayerFeatures> {
        Ok(self.encode_image_full(images)?.1)
    }

    /// `P×N×embed_dim` raw token embeddings to unit-norm `P×embed_dim`; the
    /// begin/end sentinels are added here.
    fn encode_prompt(&self, tokens: &Tensor) -> Result<Tensor>;

    /// The standard path: tokenizer, embedding lookup, encoder. Returns a
    /// unit-norm vector of length `embed_dim`.
    fn encode_text(&self, text: &str) -> Result<Tensor>;

    /// Token-table rows for `phrase`, zero-padded or truncated to
    /// `num_tokens`. The flag reports truncation.
    fn word_embeddings(&self, phrase: &str) -> Result<(Tensor, bool)>;

    /// Content hash of every frozen weight, computed from live values.
    fn fingerprint(&self) -> Result<String>;
}

/// Checks the image contract shared by all encoders: 4-D, 3 channels, finite.
pub fn check_images(images: &Tensor) -> Result<()> {
    let dims = images.dims();
    if dims.len() != 4 || dims[1] != 3 {
        return Err(Error::Shape(format!(
            "expected B×3×H×W images, got {dims:?}"
        )));
    }
    let finite = images
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(invalid("image contains NaN or infinite values"));
    }
    Ok(())
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("cosine of a zero-norm vector"));
    }
    Ok(dot / (na * nb))
}

/// Construction parameters common to every backbone.
#[derive(Clone, Debug)]
pub struct BackboneOptions {
    pub weights_dir: Option<PathBuf>,
    pub num_tokens: usize,
    pub dtype: DType,
    pub device: Device,
}

impl Default for BackboneOptions {
    fn default() -> Self {
        Self {
            weights_dir: None,
            num_tokens: 16,
            dtype: DType::F32,
            device: Device::Cpu,
        }
    }
}

/// Environment variable overriding the weight cache directory.
pub const WEIGHTS_DIR_ENV: &str = "RELIT_WEIGHTS_DIR";

impl BackboneOptions {
    /// Explicit directory, then `$RELIT_WEIGHTS_DIR`, then
    /// `$HOME/.cache/relit/weights`, then the system temp dir.
    pub fn resolved_weights_dir(&self) -> PathBuf {
        if let Some(d) = &self.weights_dir {
            return d.clone();
        }
        if let Ok(d) = std::env::var(WEIGHTS_DIR_ENV) {
            if !d.is_empty() {
                return PathBuf::from(d);
            }
        }
        if let Ok(home) = std::env::var("HOME") {
            return PathBuf::from(home).join(".cache/relit/weights");
        }
        std::env::temp_dir().join("relit-weights")
    }
}

pub type BackboneFactory = fn(&BackboneOptions) -> Result<Box<dyn VisionLanguageModel>>;

/// Backbones selectable by name.
pub struct BackboneRegistry {
    entries: BTreeMap<String, BackboneFactory>,
}

impl BackboneRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(rn_lite::ID, |opts| {
            Ok(Box::new(RnLite::load_or_build(RnLiteConfig::default(), opts)?))
        });
        r
    }

    pub fn register(&mut self, name: &str, factory: BackboneFactory) {
        self.entries.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, opts: &BackboneOptions) -> Result<Box<dyn VisionLanguageModel>> {
        let factory = self.entries.get(name).ok_or_else(|| Error::UnknownEntry {
            kind: "backbone",
            name: name.to_string(),
            known: self.names().join(", "),
        })?;
        factory(opts)
    }
}

pub const DEFAULT_BACKBONE: &str = rn_lite::ID;

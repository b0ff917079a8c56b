//! Alternating optimisation of the prompt pair and the enhancer.
//!
//! Stages run in this order, all drawing from one global iteration budget:
//! prompt initialisation, self-reconstruction, initial enhancement, then
//! refinement and enhancement tuning in turn until the budget is spent.
//! Refinement and enhancement stages end when the sum of their last
//! `thr_window` losses drops below the stage threshold or after
//! `stage_cap` iterations.
//!
//! Every iteration draws its randomness from a generator seeded by
//! `(seed, iteration)`, so a resumed run replays the uninterrupted one.

pub mod checkpoint;
pub mod config;
mod log;

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::blob;
use crate::data::{training_base, training_sample, Pool};
use crate::enhancer::Enhancer;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{enhance_loss, identity_loss, IdentityPhase, IdentityWeights};
use crate::metrics::psnr;
use crate::nn::scalar;
use crate::optim::Adam;
use crate::prompt::{initial_loss, negative_score, refine_loss_round1, refine_loss_round2, y_hat, PromptPair};
use crate::vlm::VisionLanguageModel;

pub use checkpoint::OutputSets;
pub use config::TrainConfig;
use log::LineLog;

/// Set to an iteration number to make that iteration's loss NaN.
pub const INJECT_NAN_ENV: &str = "RELIT_INJECT_NAN_AT";

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const NAN_DUMP_DIR: &str = "nan_dump";

const CURRENT: &str = "current";
const PREVIOUS: &str = "previous";
const STAGE1: &str = "stage1";
/// Images per backbone or enhancer call outside the training step.
const CHUNK: usize = 8;
/// Slack for the brighten-only check on stored outputs.
const BRIGHTEN_SLACK: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PromptInit,
    SelfRecon,
    EnhanceInitial,
    PromptRefine,
    EnhanceTune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PromptInit => "prompt_init",
            Stage::SelfRecon => "self_recon",
            Stage::EnhanceInitial => "enhance_initial",
            Stage::PromptRefine => "prompt_refine",
            Stage::EnhanceTune => "enhance_tune",
        }
    }

    pub fn trains_prompts(self) -> bool {
        matches!(self, Stage::PromptInit | Stage::PromptRefine)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Training images resized to the crop size, with their ids.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub backlit_ids: Vec<String>,
    pub backlit: Vec<ImageTensor>,
    pub welllit_ids: Vec<String>,
    pub welllit: Vec<ImageTensor>,
    /// Files that failed to decode, as `(pool/file, reason)`.
    pub skipped: Vec<(String, String)>,
}

impl TrainData {
    pub fn new(backlit: Vec<(String, ImageTensor)>, welllit: Vec<(String, ImageTensor)>, crop: usize) -> Result<Self> {
        if backlit.is_empty() || welllit.is_empty() {
            return Err(Error::Config("both image pools need at least one image".into()));
        }
        let split = |v: Vec<(String, ImageTensor)>| -> (Vec<String>, Vec<ImageTensor>) {
            v.into_iter().map(|(id, img)| (id, training_base(&img, crop))).unzip()
        };
        let (backlit_ids, backlit) = split(backlit);
        let (welllit_ids, welllit) = split(welllit);
        Ok(Self {
            backlit_ids,
            backlit,
            welllit_ids,
            welllit,
            skipped: Vec::new(),
        })
    }

    pub fn from_pools(backlit: &Pool, welllit: &Pool, crop: usize) -> Result<Self> {
        let pair = |p: &Pool| p.ids.iter().cloned().zip(p.images.iter().cloned()).collect();
        let mut data = Self::new(pair(backlit), pair(welllit), crop)?;
        for (tag, p) in [("backlit", backlit), ("welllit", welllit)] {
            data.skipped
                .extend(p.skipped.iter().map(|(f, r)| (format!("{tag}/{f}"), r.clone())));
        }
        Ok(data)
    }
}

#[derive(Clone, Debug)]
pub struct RunPaths {
    pub out_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: u64,
    pub stage: Stage,
    pub round_t: u64,
    pub loss_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_bce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_rank: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_clip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_identity: Option<f64>,
}

impl IterRecord {
    fn new(stage: Stage, round_t: u64, loss_total: f64) -> Self {
        Self {
            iter: 0,
            stage,
            round_t,
            loss_total,
            loss_bce: None,
            loss_rank: None,
            loss_clip: None,
            loss_identity: None,
        }
    }
}

/// Mean `S` of each population at the start of a refinement round, under
/// the prompts of that moment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundScores {
    pub round: u64,
    pub iter: u64,
    pub s_backlit: f64,
    pub s_current: f64,
    pub s_previous: Option<f64>,
    pub s_welllit: f64,
}

/// Alternation bookkeeping; everything needed to resume besides tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    pub stage_iter: u64,
    pub round_t: u64,
    pub iter: u64,
    /// Losses of the current stage's last `thr_window` iterations.
    pub window: VecDeque<f64>,
    /// Iterations spent per stage name; sums to `iter`.
    pub stage_iters: BTreeMap<String, u64>,
    pub prompt_init_accuracy: Option<f64>,
    pub self_recon_psnr: Option<f64>,
    pub rounds: Vec<RoundScores>,
    pub log_lines: u64,
    pub timing_lines: u64,
}

impl TrainState {
    fn new() -> Self {
        Self {
            stage: Stage::PromptInit,
            stage_iter: 0,
            round_t: 0,
            iter: 0,
            window: VecDeque::new(),
            stage_iters: BTreeMap::new(),
            prompt_init_accuracy: None,
            self_recon_psnr: None,
            rounds: Vec::new(),
            log_lines: 0,
            timing_lines: 0,
        }
    }
}

/// End-of-run numbers, all scored with the final prompts on the
/// crop-resolution training images.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: u64,
    pub rounds: u64,
    pub stage_iters: BTreeMap<String, u64>,
    pub prompt_init_accuracy: Option<f64>,
    pub self_recon_psnr: Option<f64>,
    pub round_scores: Vec<RoundScores>,
    pub mean_s_backlit: f64,
    pub mean_s_output: f64,
    pub mean_s_welllit: f64,
    /// Outputs of the network as it stood when the first refinement began.
    pub mean_s_stage1_output: Option<f64>,
    /// Output pixels darker than their input.
    pub brighten_violations: u64,
    pub vlm_fingerprint_before: String,
    pub vlm_fingerprint_after: String,
}

pub struct Trainer<'m> {
    cfg: TrainConfig,
    model: &'m dyn VisionLanguageModel,
    data: TrainData,
    paths: RunPaths,
    scale: f64,
    prompts: PromptPair,
    net: Enhancer,
    opt_prompt: Adam,
    opt_net: Adam,
    st: TrainState,
    emb_backlit: Tensor,
    emb_welllit: Tensor,
    outputs: OutputSets,
    emb_current: Option<Tensor>,
    emb_previous: Option<Tensor>,
    frozen_text: Option<Tensor>,
    metrics: LineLog,
    timing: LineLog,
    fingerprint: String,
    last_checkpoint: Option<u64>,
    inject_nan_at: Option<u64>,
}

fn embed(model: &dyn VisionLanguageModel, images: &[ImageTensor]) -> Result<Tensor> {
    let mut rows = Vec::new();
    for chunk in images.chunks(CHUNK) {
        let x = ImageTensor::stack(chunk, model.dtype(), model.device())?;
        rows.push(model.encode_image(&x)?.detach());
    }
    Ok(Tensor::cat(&rows, 0)?)
}

fn mean_s(emb: &Tensor, text: &Tensor, scale: f64) -> Result<f64> {
    scalar(&negative_score(emb, text, scale)?.mean_all()?)
}

fn indices(rng: &mut impl Rng, n: usize, k: usize) -> Vec<u32> {
    (0..k).map(|_| rng.random_range(0..n) as u32).collect()
}

fn pick(emb: &Tensor, idx: &[u32]) -> Result<Tensor> {
    let t = Tensor::from_slice(idx, idx.len(), emb.device())?;
    Ok(emb.index_select(&t, 0)?)
}

fn check_num_tokens(cfg: &TrainConfig, model: &dyn VisionLanguageModel) -> Result<()> {
    if cfg.num_tokens != model.num_tokens() {
        return Err(Error::Config(format!(
            "num_tokens: config asks for {}, backbone was built for {}",
            cfg.num_tokens,
            model.num_tokens()
        )));
    }
    Ok(())
}

impl<'m> Trainer<'m> {
    /// A fresh run. Creates the output and checkpoint directories and
    /// writes the manifest.
    pub fn new(cfg: TrainConfig, model: &'m dyn VisionLanguageModel, data: TrainData, paths: RunPaths) -> Result<Self> {
        cfg.validate()?;
        check_num_tokens(&cfg, model)?;
        std::fs::create_dir_all(&paths.out_dir)?;
        std::fs::create_dir_all(&paths.checkpoint_dir)?;
        let prompts = PromptPair::init(model, &cfg.init_mode, cfg.seed)?;
        let net = Enhancer::new(cfg.enhancer.clone(), cfg.seed, model.dtype(), model.device())?;
        let metrics = LineLog::create(&paths.out_dir.join(METRICS_FILE))?;
        let timing = LineLog::create(&paths.out_dir.join(TIMING_FILE))?;
        let t = Self::assemble(cfg, model, data, paths, prompts, net, TrainState::new(), metrics, timing)?;
        t.write_manifest(None)?;
        Ok(t)
    }

    /// Continues from the newest checkpoint under `paths.checkpoint_dir`.
    /// The config may differ from the checkpointed one only in
    /// `total_iters` and `checkpoint_every`.
    pub fn resume(cfg: TrainConfig, model: &'m dyn VisionLanguageModel, data: TrainData, paths: RunPaths) -> Result<Self> {
        cfg.validate()?;
        check_num_tokens(&cfg, model)?;
        let dir = checkpoint::resolve(&paths.checkpoint_dir)?;
        let (tensors, meta) = blob::read(&dir.join(checkpoint::STATE_FILE), checkpoint::STATE_KIND)?;
        let stored: TrainConfig = serde_json::from_value(meta["config"].clone())?;
        if !cfg.resumable_from(&stored) {
            return Err(Error::Config(format!(
                "configuration differs from the one checkpointed in {} beyond total_iters/checkpoint_every",
                dir.display()
            )));
        }
        let fp = model.fingerprint()?;
        if meta["vlm_fingerprint"].as_str() != Some(fp.as_str()) {
            return Err(Error::Config(format!(
                "backbone weights differ from those used for checkpoint {}",
                dir.display()
            )));
        }
        let ids_b: Vec<String> = serde_json::from_value(meta["backlit_ids"].clone())?;
        let ids_w: Vec<String> = serde_json::from_value(meta["welllit_ids"].clone())?;
        if ids_b != data.backlit_ids || ids_w != data.welllit_ids {
            return Err(Error::Config("training images differ from those of the checkpointed run".into()));
        }
        let st: TrainState = serde_json::from_value(meta["state"].clone())?;
        let (prompts, _) = PromptPair::load(&dir.join(checkpoint::PROMPTS_FILE), model.dtype(), model.device())?;
        let (net, _) = checkpoint::load_enhancer(
            &dir.join(checkpoint::ENHANCER_FILE),
            Some(&cfg.enhancer),
            model.dtype(),
            model.device(),
        )?;
        let metrics = LineLog::truncate_to(&paths.out_dir.join(METRICS_FILE), st.log_lines)?;
        let timing = LineLog::truncate_to(&paths.out_dir.join(TIMING_FILE), st.timing_lines)?;
        let mut t = Self::assemble(cfg, model, data, paths, prompts, net, st, metrics, timing)?;
        let steps = |k: &str| meta[k].as_u64().unwrap_or(0);
        t.opt_prompt
            .load_state(&checkpoint::strip_prefix("prompt.", &tensors), steps("opt_prompt_steps"))?;
        t.opt_net
            .load_state(&checkpoint::strip_prefix("net.", &tensors), steps("opt_net_steps"))?;
        let out_path = dir.join(checkpoint::OUTPUTS_FILE);
        if out_path.is_file() {
            t.outputs = checkpoint::load_outputs(&out_path)?;
            t.emb_current = t.embed_set(CURRENT)?;
            t.emb_previous = t.embed_set(PREVIOUS)?;
        }
        t.last_checkpoint = Some(t.st.iter);
        Ok(t)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: TrainConfig,
        model: &'m dyn VisionLanguageModel,
        data: TrainData,
        paths: RunPaths,
        prompts: PromptPair,
        net: Enhancer,
        st: TrainState,
        metrics: LineLog,
        timing: LineLog,
    ) -> Result<Self> {
        let scale = cfg.logit_scale.unwrap_or_else(|| model.logit_scale());
        let emb_backlit = embed(model, &data.backlit)?;
        let emb_welllit = embed(model, &data.welllit)?;
        let inject_nan_at = std::env::var(INJECT_NAN_ENV).ok().and_then(|v| v.trim().parse().ok());
        Ok(Self {
            opt_prompt: Adam::new(cfg.lr_prompt, cfg.adam_beta1, cfg.adam_beta2),
            opt_net: Adam::new(cfg.lr_net, cfg.adam_beta1, cfg.adam_beta2),
            fingerprint: model.fingerprint()?,
            outputs: OutputSets {
                ids: data.backlit_ids.clone(),
                sets: BTreeMap::new(),
            },
            cfg,
            model,
            data,
            paths,
            scale,
            prompts,
            net,
            st,
            emb_backlit,
            emb_welllit,
            emb_current: None,
            emb_previous: None,
            frozen_text: None,
            metrics,
            timing,
            last_checkpoint: None,
            inject_nan_at,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.st
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn prompts(&self) -> &PromptPair {
        &self.prompts
    }

    pub fn enhancer(&self) -> &Enhancer {
        &self.net
    }

    pub fn logit_scale(&self) -> f64 {
        self.scale
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    /// Output sets kept for refinement: `current`, `previous`, `stage1`.
    pub fn outputs(&self) -> &OutputSets {
        &self.outputs
    }

    pub fn metrics_path(&self) -> &Path {
        self.metrics.path()
    }

    fn embed_set(&self, name: &str) -> Result<Option<Tensor>> {
        self.outputs
            .sets
            .get(name)
            .map(|imgs| embed(self.model, imgs))
            .transpose()
    }

    /// Runs all remaining iterations, then [`Trainer::finish`].
    pub fn run(&mut self) -> Result<TrainSummary> {
        while self.step()?.is_some() {}
        self.finish()
    }

    /// One optimisation step, switching stage first if the current one is
    /// done. `None` once the budget is spent.
    pub fn step(&mut self) -> Result<Option<IterRecord>> {
        if self.st.iter >= self.cfg.total_iters {
            return Ok(None);
        }
        if let Some(reason) = self.stage_end_reason() {
            if self.last_checkpoint != Some(self.st.iter) {
                self.checkpoint()?;
            }
            self.advance(reason)?;
        }
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.st.iter);
        let (mut rec, loss) = match self.st.stage {
            Stage::PromptInit => self.prompt_init_loss(&mut rng)?,
            Stage::PromptRefine => self.refine_loss(&mut rng)?,
            Stage::SelfRecon => self.enhance_loss(&mut rng, true)?,
            Stage::EnhanceInitial | Stage::EnhanceTune => self.enhance_loss(&mut rng, false)?,
        };
        rec.iter = self.st.iter + 1;
        if self.inject_nan_at == Some(rec.iter) {
            rec.loss_total = f64::NAN;
        }
        if !rec.loss_total.is_finite() {
            return Err(self.nan_abort(&rec));
        }
        let grads = loss.backward()?;
        if self.st.stage.trains_prompts() {
            self.opt_prompt.step(self.prompts.vars(), &grads)?;
        } else {
            self.opt_net.step(self.net.params().iter(), &grads)?;
        }
        self.st.iter += 1;
        self.st.stage_iter += 1;
        *self.st.stage_iters.entry(self.st.stage.name().to_string()).or_default() += 1;
        self.st.window.push_back(rec.loss_total);
        while self.st.window.len() > self.cfg.thr_window {
            self.st.window.pop_front();
        }
        self.metrics.write(&rec)?;
        self.timing.write(&json!({
            "iter": rec.iter,
            "stage": rec.stage,
            "seconds": started.elapsed().as_secs_f64(),
        }))?;
        if let Some(every) = self.cfg.checkpoint_every {
            if self.st.iter % every == 0 {
                self.checkpoint()?;
            }
        }
        Ok(Some(rec))
    }

    fn threshold_met(&self, thr: f64) -> bool {
        self.st.window.len() >= self.cfg.thr_window && self.st.window.iter().sum::<f64>() < thr
    }

    fn stage_end_reason(&self) -> Option<&'static str> {
        let it = self.st.stage_iter;
        match self.st.stage {
            Stage::PromptInit => (it >= self.cfg.prompt_init_iters).then_some("complete"),
            Stage::SelfRecon => (it >= self.cfg.self_recon_iters).then_some("complete"),
            stage => {
                let thr = if stage == Stage::PromptRefine {
                    self.cfg.thr_a
                } else {
                    self.cfg.thr_b
                };
                if self.threshold_met(thr) {
                    Some("threshold")
                } else if it >= self.cfg.stage_cap {
                    Some("cap")
                } else {
                    None
                }
            }
        }
    }

    fn event(&mut self, name: &str, mut fields: Value) -> Result<()> {
        let obj = fields.as_object_mut().expect("event fields are an object");
        obj.insert("event".into(), json!(name));
        obj.insert("iter".into(), json!(self.st.iter));
        obj.insert("stage".into(), json!(self.st.stage));
        obj.insert("round_t".into(), json!(self.st.round_t));
        self.metrics.write(&fields)
    }

    fn advance(&mut self, reason: &str) -> Result<()> {
        let from = self.st.stage;
        let mut info = json!({ "reason": reason, "stage_iters": self.st.stage_iter });
        let next = match from {
            Stage::PromptInit => {
                let acc = self.prompt_accuracy()?;
                self.st.prompt_init_accuracy = Some(acc);
                info["accuracy"] = json!(acc);
                Stage::SelfRecon
            }
            Stage::SelfRecon => {
                let outs = self.infer_backlit()?;
                let mut total = 0.0;
                for (o, i) in outs.iter().zip(&self.data.backlit) {
                    total += psnr(o, i)?;
                }
                let p = total / outs.len() as f64;
                self.st.self_recon_psnr = Some(p);
                info["psnr"] = json!(p);
                Stage::EnhanceInitial
            }
            Stage::EnhanceInitial | Stage::EnhanceTune => Stage::PromptRefine,
            Stage::PromptRefine => Stage::EnhanceTune,
        };
        self.event("stage_end", info)?;
        self.st.stage = next;
        self.st.stage_iter = 0;
        self.st.window.clear();
        self.frozen_text = None;
        if next == Stage::PromptRefine {
            self.start_round()?;
        }
        self.event("stage_start", json!({}))
    }

    /// Refreshes the output caches: the outputs computed at the previous
    /// round's start become `previous`, the current network's outputs
    /// become `current`.
    fn start_round(&mut self) -> Result<()> {
        self.st.round_t += 1;
        let outs = self.infer_backlit()?;
        if let Some(cur) = self.outputs.sets.remove(CURRENT) {
            self.outputs.sets.insert(PREVIOUS.into(), cur);
            self.emb_previous = self.emb_current.take();
        }
        if self.st.round_t == 1 {
            self.outputs.sets.insert(STAGE1.into(), outs.clone());
        }
        self.emb_current = Some(embed(self.model, &outs)?);
        self.outputs.sets.insert(CURRENT.into(), outs);
        let text = self.prompts.encode(self.model)?.detach();
        let scores = RoundScores {
            round: self.st.round_t,
            iter: self.st.iter,
            s_backlit: mean_s(&self.emb_backlit, &text, self.scale)?,
            s_current: mean_s(self.emb_current.as_ref().unwrap(), &text, self.scale)?,
            s_previous: match &self.emb_previous {
                Some(e) => Some(mean_s(e, &text, self.scale)?),
                None => None,
            },
            s_welllit: mean_s(&self.emb_welllit, &text, self.scale)?,
        };
        self.event("round_scores", serde_json::to_value(&scores)?)?;
        self.st.rounds.push(scores);
        Ok(())
    }

    /// Current network applied to every backlit training image.
    pub fn infer_backlit(&self) -> Result<Vec<ImageTensor>> {
        let mut out = Vec::with_capacity(self.data.backlit.len());
        for chunk in self.data.backlit.chunks(CHUNK) {
            let x = ImageTensor::stack(chunk, self.net.dtype(), &self.net.device())?;
            out.extend(ImageTensor::unstack(&self.net.enhance_batch(&x)?)?);
        }
        Ok(out)
    }

    /// Fraction of training images on the right side of `ŷ = 0.5`.
    pub fn prompt_accuracy(&self) -> Result<f64> {
        let text = self.prompts.encode(self.model)?.detach();
        let yb = y_hat(&self.emb_backlit, &text, self.scale)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let yw = y_hat(&self.emb_welllit, &text, self.scale)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let correct = yb.iter().filter(|&&y| y <= 0.5).count() + yw.iter().filter(|&&y| y > 0.5).count();
        Ok(correct as f64 / (yb.len() + yw.len()) as f64)
    }

    fn prompt_init_loss(&mut self, rng: &mut ChaCha8Rng) -> Result<(IterRecord, Tensor)> {
        let nb = self.cfg.batch_prompt / 2;
        let nw = self.cfg.batch_prompt - nb;
        let ib = indices(rng, self.data.backlit.len(), nb);
        let iw = indices(rng, self.data.welllit.len(), nw);
        let emb = Tensor::cat(&[pick(&self.emb_backlit, &ib)?, pick(&self.emb_welllit, &iw)?], 0)?;
        let labels: Vec<f32> = std::iter::repeat_n(0.0, nb).chain(std::iter::repeat_n(1.0, nw)).collect();
        let text = self.prompts.encode(self.model)?;
        let loss = initial_loss(&y_hat(&emb, &text, self.scale)?, &labels)?;
        let v = scalar(&loss)?;
        let mut rec = IterRecord::new(self.st.stage, self.st.round_t, v);
        rec.loss_bce = Some(v);
        Ok((rec, loss))
    }

    fn refine_loss(&mut self, rng: &mut ChaCha8Rng) -> Result<(IterRecord, Tensor)> {
        let k = self.cfg.batch_prompt;
        let ib = indices(rng, self.data.backlit.len(), k);
        let iw = indices(rng, self.data.welllit.len(), k);
        let text = self.prompts.encode(self.model)?;
        let s = |emb: &Tensor, idx: &[u32]| negative_score(&pick(emb, idx)?, &text, self.scale);
        let cur = self
            .emb_current
            .as_ref()
            .ok_or_else(|| Error::State("refinement without current outputs".into()))?;
        let (s_w, s_b, s_t) = (s(&self.emb_welllit, &iw)?, s(&self.emb_backlit, &ib)?, s(cur, &ib)?);
        let loss = if self.st.round_t <= 1 {
            refine_loss_round1(&s_w, &s_b, &s_t, &self.cfg.margins)?
        } else {
            let s_tm1 = match &self.emb_previous {
                Some(e) => Some(s(e, &ib)?),
                None => None,
            };
            refine_loss_round2(&s_w, &s_b, &s_t, s_tm1.as_ref(), &self.cfg.margins)?
        };
        let v = scalar(&loss)?;
        let mut rec = IterRecord::new(self.st.stage, self.st.round_t, v);
        rec.loss_rank = Some(v);
        Ok((rec, loss))
    }

    fn enhance_loss(&mut self, rng: &mut ChaCha8Rng, identity_only: bool) -> Result<(IterRecord, Tensor)> {
        let samples: Vec<ImageTensor> = (0..self.cfg.batch_net)
            .map(|_| training_sample(&self.data.backlit, rng).1)
            .collect();
        let x = ImageTensor::stack(&samples, self.net.dtype(), &self.net.device())?;
        let in_feats = self.model.encode_image_layers(&x)?;
        let (enhanced, _) = self.net.forward(&x)?;
        let mut rec;
        let loss = if identity_only {
            let w = IdentityWeights::for_phase(IdentityPhase::SelfReconstruction);
            let out_feats = self.model.encode_image_layers(&enhanced)?;
            let l = identity_loss(&in_feats, &out_feats, &w)?;
            let v = scalar(&l)?;
            rec = IterRecord::new(self.st.stage, self.st.round_t, v);
            rec.loss_identity = Some(v);
            l
        } else {
            if self.frozen_text.is_none() {
                self.frozen_text = Some(self.prompts.encode(self.model)?.detach());
            }
            let text = self.frozen_text.as_ref().unwrap();
            let w = IdentityWeights::for_phase(IdentityPhase::Enhancement);
            let l = enhance_loss(self.model, &in_feats, &enhanced, text, self.scale, self.cfg.identity_weight, &w)?;
            rec = IterRecord::new(self.st.stage, self.st.round_t, scalar(&l.total)?);
            rec.loss_clip = Some(scalar(&l.clip)?);
            rec.loss_identity = Some(scalar(&l.identity)?);
            l.total
        };
        Ok((rec, loss))
    }

    fn nan_abort(&mut self, rec: &IterRecord) -> Error {
        let dump = self.paths.checkpoint_dir.join(NAN_DUMP_DIR);
        let written = (|| -> Result<()> {
            if dump.exists() {
                std::fs::remove_dir_all(&dump)?;
            }
            std::fs::create_dir_all(&dump)?;
            self.write_checkpoint_files(&dump)?;
            let reason = json!({ "iter": rec.iter, "stage": rec.stage, "round_t": rec.round_t, "loss": format!("{}", rec.loss_total) });
            std::fs::write(dump.join("reason.json"), serde_json::to_vec_pretty(&reason)?)?;
            Ok(())
        })();
        if let Err(e) = written {
            ::log::error!("could not write the state dump: {e}");
        }
        Error::NonFiniteLoss {
            iter: rec.iter,
            stage: rec.stage.name().to_string(),
            dump,
        }
    }

    fn write_checkpoint_files(&mut self, dir: &Path) -> Result<()> {
        self.st.log_lines = self.metrics.lines();
        self.st.timing_lines = self.timing.lines();
        let mut tensors: BTreeMap<String, Tensor> = checkpoint::prefixed("prompt.", self.opt_prompt.state_tensors()).collect();
        tensors.extend(checkpoint::prefixed("net.", self.opt_net.state_tensors()));
        let meta = json!({
            "state": self.st,
            "config": self.cfg,
            "config_hash": self.cfg.hash(),
            "vlm_fingerprint": self.fingerprint,
            "opt_prompt_steps": self.opt_prompt.steps(),
            "opt_net_steps": self.opt_net.steps(),
            "backlit_ids": self.data.backlit_ids,
            "welllit_ids": self.data.welllit_ids,
        });
        self.prompts.save(&dir.join(checkpoint::PROMPTS_FILE), self.st.iter)?;
        checkpoint::save_enhancer(&dir.join(checkpoint::ENHANCER_FILE), &self.net, self.st.round_t, self.st.iter)?;
        if !self.outputs.sets.is_empty() {
            checkpoint::save_outputs(&dir.join(checkpoint::OUTPUTS_FILE), &self.outputs)?;
        }
        // Written last: a directory without it is never resumed from.
        blob::write(&dir.join(checkpoint::STATE_FILE), checkpoint::STATE_KIND, &tensors, meta)
    }

    /// Writes a complete checkpoint and points `LATEST` at it.
    pub fn checkpoint(&mut self) -> Result<PathBuf> {
        let dir = checkpoint::begin(&self.paths.checkpoint_dir, self.st.iter)?;
        self.write_checkpoint_files(&dir)?;
        checkpoint::commit(&self.paths.checkpoint_dir, &dir)?;
        self.last_checkpoint = Some(self.st.iter);
        Ok(dir)
    }

    fn manifest(&self, fingerprint_after: Option<&str>) -> Value {
        json!({
            "tool_version": env!("CARGO_PKG_VERSION"),
            "config": self.cfg,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "backbone": self.model.id(),
            "vlm_fingerprint": self.fingerprint,
            "vlm_fingerprint_after": fingerprint_after,
            "enhancer_parameters": self.net.params().num_elements(),
            "images": { "backlit": self.data.backlit.len(), "welllit": self.data.welllit.len() },
            "skipped_files": self.data.skipped.iter().map(|(f, r)| json!({ "file": f, "reason": r })).collect::<Vec<_>>(),
            "prompt_truncated": self.prompts.truncated(),
            "decisions": {
                "logit_scale": self.scale,
                "loss_reduction": "batch mean",
                "threshold_rule": format!("sum of the last {} per-iteration losses of a stage", self.cfg.thr_window),
                "thr_a": self.cfg.thr_a,
                "thr_b": self.cfg.thr_b,
                "identity_distance": "per-layer RMS of feature differences",
                "illumination_range": [self.cfg.enhancer.eps_illum, 1.0],
                "first_refinement_loss": "three-term ranking loss; four-term loss from round 2",
                "prompt_refinement": "continues from the current prompt pair",
                "prompt_phase_images": "un-augmented crop-resolution images",
                "augmentation": "zoom-crop scale [0.8,1], horizontal flip p=0.5, rotation by multiples of 90 degrees",
            },
        })
    }

    fn write_manifest(&self, fingerprint_after: Option<&str>) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(&self.manifest(fingerprint_after))?;
        blob::write_atomic(&self.paths.out_dir.join(MANIFEST_FILE), &bytes)
    }

    /// Final checkpoint, summary and manifest.
    pub fn finish(&mut self) -> Result<TrainSummary> {
        if self.last_checkpoint != Some(self.st.iter) {
            self.checkpoint()?;
        }
        let text = self.prompts.encode(self.model)?.detach();
        let outs = self.infer_backlit()?;
        let mut violations = 0u64;
        for (o, i) in outs.iter().zip(&self.data.backlit) {
            violations += o
                .data()
                .iter()
                .zip(i.data())
                .filter(|(o, i)| **o + BRIGHTEN_SLACK < **i)
                .count() as u64;
        }
        let stage1 = match self.outputs.sets.get(STAGE1) {
            Some(imgs) => Some(mean_s(&embed(self.model, imgs)?, &text, self.scale)?),
            None => None,
        };
        let after = self.model.fingerprint()?;
        let summary = TrainSummary {
            iterations: self.st.iter,
            rounds: self.st.round_t,
            stage_iters: self.st.stage_iters.clone(),
            prompt_init_accuracy: self.st.prompt_init_accuracy,
            self_recon_psnr: self.st.self_recon_psnr,
            round_scores: self.st.rounds.clone(),
            mean_s_backlit: mean_s(&self.emb_backlit, &text, self.scale)?,
            mean_s_output: mean_s(&embed(self.model, &outs)?, &text, self.scale)?,
            mean_s_welllit: mean_s(&self.emb_welllit, &text, self.scale)?,
            mean_s_stage1_output: stage1,
            brighten_violations: violations,
            vlm_fingerprint_before: self.fingerprint.clone(),
            vlm_fingerprint_after: after.clone(),
        };
        blob::write_atomic(
            &self.paths.out_dir.join(SUMMARY_FILE),
            &serde_json::to_vec_pretty(&summary)?,
        )?;
        std::fs::write(self.paths.out_dir.join("prompts.txt"), self.prompts.dump_text()?)?;
        self.write_manifest(Some(&after))?;
        Ok(summary)
    }
}

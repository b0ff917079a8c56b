use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use log::{info, warn};
use relit_core::data::{comparison_grid, inference_resize, list_image_files, load_image, load_pool, write_png};
use relit_core::image::ImageTensor;
use relit_core::metrics::{plot_histograms, EvalReport, ImageRecord, MetricRegistry, ScoreStats, SkipRecord};
use relit_core::prompt::PromptPair;
use relit_core::trainer::{checkpoint, RunPaths, TrainData, Trainer};
use relit_core::vlm::{BackboneOptions, BackboneRegistry, VisionLanguageModel};
use relit_core::{Error, Result};
use serde_json::json;

use crate::config::{check_device, RunConfig};
use crate::Common;

/// Training progress is logged this often.
const PROGRESS_EVERY: u64 = 50;
/// Longest side of each tile in the comparison grid.
const GRID_TILE: usize = 256;

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok());
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(d) = &common.device {
        cfg.device = d.clone();
    }
    let level = std::env::var("RUST_LOG").unwrap_or_else(|_| cfg.log_level.clone());
    let _ = env_logger::Builder::new().parse_filters(&level).try_init();
    Ok(cfg)
}

fn backbone(cfg: &RunConfig, num_tokens: usize) -> Result<Box<dyn VisionLanguageModel>> {
    let opts = BackboneOptions {
        weights_dir: cfg.weights_dir.clone(),
        num_tokens,
        dtype: DType::F32,
        device: Device::Cpu,
    };
    BackboneRegistry::with_defaults().create(&cfg.backbone, &opts)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn command_manifest(out: &Path, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Result<()> {
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "config": cfg,
            "inputs": extra,
        }),
    )
}

pub fn train(common: &Common, checkpoint: Option<PathBuf>, output: Option<PathBuf>, resume: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(o) = output {
        cfg.paths.out_dir = Some(o);
    }
    if let Some(c) = checkpoint {
        cfg.paths.checkpoint_dir = Some(c);
    }
    cfg.validate_for_training()?;
    let out_dir = cfg.paths.out_dir.clone().unwrap();
    let paths = RunPaths {
        checkpoint_dir: cfg.checkpoint_dir().unwrap(),
        out_dir: out_dir.clone(),
    };
    let backlit = load_pool(cfg.paths.backlit_dir.as_ref().unwrap())?;
    let welllit = load_pool(cfg.paths.welllit_dir.as_ref().unwrap())?;
    info!("{} backlit and {} well-lit images", backlit.len(), welllit.len());
    let data = TrainData::from_pools(&backlit, &welllit, cfg.train.crop_size)?;
    let model = backbone(&cfg, cfg.train.num_tokens)?;
    let mut trainer = if resume {
        Trainer::resume(cfg.train.clone(), model.as_ref(), data, paths)?
    } else {
        Trainer::new(cfg.train.clone(), model.as_ref(), data, paths)?
    };
    let started = Instant::now();
    while let Some(rec) = trainer.step()? {
        if rec.iter % PROGRESS_EVERY == 0 {
            info!(
                "iter {} {} round {} loss {:.5} ({:.0}s)",
                rec.iter,
                rec.stage,
                rec.round_t,
                rec.loss_total,
                started.elapsed().as_secs_f64()
            );
        }
    }
    let s = trainer.finish()?;
    println!(
        "trained {} iterations over {} rounds; mean S backlit {:.4}, output {:.4}, well-lit {:.4}",
        s.iterations, s.rounds, s.mean_s_backlit, s.mean_s_output, s.mean_s_welllit
    );
    println!("outputs in {}", out_dir.display());
    Ok(())
}

fn output_name(file: &str) -> String {
    let stem = Path::new(file).file_stem().map(|s| s.to_string_lossy().into_owned());
    format!("{}.png", stem.unwrap_or_else(|| file.to_string()))
}

fn thumbnail(img: &ImageTensor) -> ImageTensor {
    let long = img.height().max(img.width());
    if long <= GRID_TILE {
        return img.clone();
    }
    let s = GRID_TILE as f64 / long as f64;
    let fit = |v: usize| ((v as f64 * s).round() as usize).max(1);
    img.resize_filtered(fit(img.height()), fit(img.width()))
}

pub fn infer(common: &Common, ckpt: &Path, input: &Path, output: &Path, grid: bool) -> Result<()> {
    let cfg = load_config(common)?;
    check_device(&cfg.device)?;
    let expected = common.config.as_ref().map(|_| &cfg.train.enhancer);
    let path = checkpoint::find_enhancer(ckpt)?;
    let (net, _) = checkpoint::load_enhancer(&path, expected, DType::F32, &Device::Cpu)?;
    if !input.is_dir() {
        return Err(Error::Config(format!("--input: {} is not a directory", input.display())));
    }
    let files = list_image_files(input)?;
    std::fs::create_dir_all(output)?;
    if files.is_empty() {
        warn!("no PNG or JPEG files in {}", input.display());
    }
    let mut timings = Vec::new();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (name, file) in files {
        let img = match load_image(&file) {
            Ok(i) => i,
            Err(e) => {
                warn!("skipping {}: {e}", file.display());
                skipped.push(json!({ "file": name, "reason": e.to_string() }));
                continue;
            }
        };
        let started = Instant::now();
        let src = inference_resize(&img);
        let (out, _) = net.enhance_image(&src)?;
        let secs = started.elapsed().as_secs_f64();
        let out_name = output_name(&name);
        write_png(&out, &output.join(&out_name))?;
        println!("{name}\t{}x{}\t{secs:.3}s", out.width(), out.height());
        timings.push(json!({
            "file": name,
            "output": out_name,
            "width": out.width(),
            "height": out.height(),
            "seconds": secs,
        }));
        if grid {
            pairs.push((thumbnail(&src), thumbnail(&out)));
        }
    }
    if grid && !pairs.is_empty() {
        let refs: Vec<(&ImageTensor, &ImageTensor)> = pairs.iter().map(|(a, b)| (a, b)).collect();
        if let Some(g) = comparison_grid(&refs) {
            write_png(&g, &output.join("comparison_grid.png"))?;
        }
    }
    let total: f64 = timings.iter().map(|t| t["seconds"].as_f64().unwrap()).sum();
    write_json(
        &output.join("timing.json"),
        &json!({ "images": timings, "skipped": skipped, "total_seconds": total }),
    )?;
    command_manifest(
        output,
        "infer",
        &cfg,
        json!({ "checkpoint": path, "input": input }),
    )?;
    println!("{} images enhanced in {total:.2}s", timings.len());
    Ok(())
}

pub fn eval(common: &Common, input: &Path, reference: Option<&Path>, output: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let registry = MetricRegistry::with_defaults();
    let metrics: Vec<_> = registry
        .iter()
        .filter(|m| reference.is_some() || !m.needs_reference())
        .collect();
    if metrics.is_empty() {
        return Err(Error::Config(format!(
            "--reference is required: registered metrics ({}) all need one",
            registry.names().join(", ")
        )));
    }
    let files = list_image_files(input)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG or JPEG files in {}", input.display())));
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (name, file) in &files {
        let skip = |reason: String| SkipRecord {
            name: name.clone(),
            reason,
        };
        let out = match load_image(file) {
            Ok(i) => i,
            Err(e) => {
                skipped.push(skip(e.to_string()));
                continue;
            }
        };
        let refimg = match reference {
            Some(dir) => {
                let p = dir.join(name);
                if !p.is_file() {
                    skipped.push(skip(format!("no reference {}", p.display())));
                    continue;
                }
                match load_image(&p) {
                    Ok(i) => Some(i),
                    Err(e) => {
                        skipped.push(skip(e.to_string()));
                        continue;
                    }
                }
            }
            None => None,
        };
        let mut values = BTreeMap::new();
        let mut failed = None;
        for m in &metrics {
            match m.compute(&out, refimg.as_ref()) {
                Ok(v) => {
                    values.insert(m.name().to_string(), v);
                }
                Err(e) => {
                    failed = Some(format!("{}: {e}", m.name()));
                    break;
                }
            }
        }
        match failed {
            Some(reason) => skipped.push(skip(reason)),
            None => records.push(ImageRecord {
                name: name.clone(),
                metrics: values,
            }),
        }
    }
    for s in &skipped {
        warn!("skipped {}: {}", s.name, s.reason);
    }
    let report = EvalReport::from_records(records, skipped);
    std::fs::create_dir_all(output)?;
    std::fs::write(output.join("report.jsonl"), report.to_jsonl()?)?;
    write_json(&output.join("summary.json"), &serde_json::to_value(&report)?)?;
    command_manifest(output, "eval", &cfg, json!({ "input": input, "reference": reference }))?;
    for (k, v) in &report.means {
        println!("mean {k}: {v:.6}");
    }
    println!("{} evaluated, {} skipped", report.records.len(), report.skipped.len());
    if report.records.is_empty() {
        return Err(Error::Config(format!("all {} images were skipped", files.len())));
    }
    Ok(())
}

pub fn analyze(common: &Common, ckpt: &Path, inputs: &[PathBuf], output: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    check_device(&cfg.device)?;
    let path = checkpoint::find_prompts(ckpt)?;
    let (prompts, _) = PromptPair::load(&path, DType::F32, &Device::Cpu)?;
    let model = backbone(&cfg, prompts.shape().0)?;
    let scale = cfg.train.logit_scale.unwrap_or_else(|| model.logit_scale());
    std::fs::create_dir_all(output)?;
    let mut lines = String::new();
    let mut stats = BTreeMap::new();
    for dir in inputs {
        let pool = load_pool(dir)?;
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let s = prompts.score_images(model.as_ref(), &pool.images, scale)?;
        let y: Vec<f64> = s.iter().map(|s| 1.0 - s).collect();
        for ((name, y), s) in pool.ids.iter().zip(&y).zip(&s) {
            lines += &serde_json::to_string(&json!({ "pool": label, "file": name, "y_hat": y, "s": s }))?;
            lines.push('\n');
        }
        let st = ScoreStats::from_scores(&y)?;
        println!(
            "{label}: {} images, mean y_hat {:.4} (std {:.4})",
            st.count, st.mean, st.std
        );
        stats.insert(label, st);
    }
    std::fs::write(output.join("scores.jsonl"), lines)?;
    write_json(&output.join("stats.json"), &serde_json::to_value(&stats)?)?;
    let pools: Vec<(&str, &ScoreStats)> = stats.iter().map(|(k, v)| (k.as_str(), v)).collect();
    plot_histograms(&pools, &output.join("histogram.png"))?;
    command_manifest(
        output,
        "analyze",
        &cfg,
        json!({ "prompts": path, "pools": inputs, "logit_scale": scale }),
    )?;
    Ok(())
}

//! Full-reference quality metrics, score-distribution statistics and a
//! name-keyed metric registry that third-party metrics can join.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::image::ImageTensor;

pub const PSNR_CAP: f64 = 100.0;
pub const HISTOGRAM_BINS: usize = 20;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(shape_err(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10·log10(1/MSE)` over all samples, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of a `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM on BT.601 luma with an 11×11 Gaussian window (σ = 1.5) over
/// valid window positions.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (x, y) = (a.luma(), b.luma());
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let mxx = filter_valid(&prod(&x, &x), h, w, &k);
    let myy = filter_valid(&prod(&y, &y), h, w, &k);
    let mxy = filter_valid(&prod(&x, &y), h, w, &k);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// An image-quality metric selectable by name. Full-reference metrics
/// receive the reference; no-reference ones ignore it.
pub trait ImageMetric: Send + Sync {
    fn name(&self) -> &str;
    fn needs_reference(&self) -> bool;
    fn compute(&self, output: &ImageTensor, reference: Option<&ImageTensor>) -> Result<f64>;
}

struct FullReference {
    name: &'static str,
    f: fn(&ImageTensor, &ImageTensor) -> Result<f64>,
}

impl ImageMetric for FullReference {
    fn name(&self) -> &str {
        self.name
    }

    fn needs_reference(&self) -> bool {
        true
    }

    fn compute(&self, output: &ImageTensor, reference: Option<&ImageTensor>) -> Result<f64> {
        let r = reference.ok_or_else(|| invalid(format!("{} needs a reference image", self.name)))?;
        (self.f)(output, r)
    }
}

/// Metrics by name. Learned metrics (LPIPS, MUSIQ and the like) are not
/// bundled; callers register their own implementations.
pub struct MetricRegistry {
    entries: BTreeMap<String, Box<dyn ImageMetric>>,
}

impl MetricRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(FullReference { name: "psnr", f: psnr }));
        r.register(Box::new(FullReference { name: "ssim", f: ssim }));
        r
    }

    pub fn register(&mut self, metric: Box<dyn ImageMetric>) {
        self.entries.insert(metric.name().to_string(), metric);
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn ImageMetric> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownEntry {
                kind: "metric",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn ImageMetric> {
        self.entries.values().map(|b| b.as_ref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub name: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<ImageRecord>,
    pub skipped: Vec<SkipRecord>,
    /// Arithmetic mean of each metric over `records`.
    pub means: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn from_records(records: Vec<ImageRecord>, skipped: Vec<SkipRecord>) -> Self {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &records {
            for (k, v) in &r.metrics {
                let e = sums.entry(k.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        let means = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        Self {
            records,
            skipped,
            means,
        }
    }

    /// One JSON record per line, skips included, then a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out += &serde_json::to_string(&serde_json::json!({"record": r}))?;
            out.push('\n');
        }
        for s in &self.skipped {
            out += &serde_json::to_string(&serde_json::json!({"skip": s}))?;
            out.push('\n');
        }
        out += &serde_json::to_string(&serde_json::json!({
            "summary": {"count": self.records.len(), "skipped": self.skipped.len(), "means": self.means}
        }))?;
        out.push('\n');
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    /// First quartile, median, third quartile (linear interpolation).
    pub quartiles: [f64; 3],
    /// Counts over `[0,1]` in equal-width bins; 1.0 lands in the last bin.
    pub histogram: Vec<u64>,
}

impl ScoreStats {
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(invalid("score statistics over an empty pool"));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        };
        let mut histogram = vec![0u64; HISTOGRAM_BINS];
        for &s in scores {
            let bin = ((s.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            histogram[bin] += 1;
        }
        Ok(Self {
            count: scores.len(),
            mean,
            std,
            quartiles: [q(0.25), q(0.5), q(0.75)],
            histogram,
        })
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("spearman needs two equal-length series of at least 2 values"));
    }
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

const PLOT_COLORS: [[u8; 3]; 4] = [[200, 60, 50], [50, 110, 200], [60, 160, 80], [150, 90, 170]];

/// Overlaid per-pool histograms as a PNG: one translucent bar series per
/// pool, bins left to right over `[0,1]`.
pub fn plot_histograms(pools: &[(&str, &ScoreStats)], path: &Path) -> Result<()> {
    let (bin_w, height, margin) = (24u32, 200u32, 10u32);
    let width = bin_w * HISTOGRAM_BINS as u32 + 2 * margin;
    let total_h = height + 2 * margin;
    let mut img = image::RgbImage::from_pixel(width, total_h, image::Rgb([255, 255, 255]));
    let peak = pools
        .iter()
        .flat_map(|(_, s)| s.histogram.iter().map(move |&c| c as f64 / s.count as f64))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    for (p, (_, stats)) in pools.iter().enumerate() {
        let col = PLOT_COLORS[p % PLOT_COLORS.len()];
        for (b, &c) in stats.histogram.iter().enumerate() {
            let frac = c as f64 / stats.count as f64 / peak;
            let bar = (frac * height as f64).round() as u32;
            let x0 = margin + b as u32 * bin_w + 2;
            for x in x0..x0 + bin_w - 4 {
                for y in (margin + height - bar)..(margin + height) {
                    let px = img.get_pixel_mut(x, y);
                    for ch in 0..3 {
                        px[ch] = ((px[ch] as u16 + col[ch] as u16) / 2) as u8;
                    }
                }
            }
        }
    }
    for x in margin..width - margin {
        img.put_pixel(x, margin + height, image::Rgb([0, 0, 0]));
    }
    img.save(path)?;
    Ok(())
}

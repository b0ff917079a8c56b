//! Procedural unpaired pools for smoke runs and tests.
//!
//! A well-lit scene is a tinted gradient with sinusoidal texture and a few
//! solid discs. Its backlit counterpart multiplies the scene by a smooth gain
//! map that darkens a central subject and the ground below a horizon, leaving
//! the sky at full brightness.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::ImageTensor;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn scene(rng: &mut impl Rng, size: usize) -> ImageTensor {
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.7));
    let grad: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
    let waves: Vec<(f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(2.0..12.0),
                rng.random_range(2.0..12.0),
                rng.random_range(0.0..std::f32::consts::TAU),
                std::array::from_fn(|_| rng.random_range(-0.075..0.075)),
            )
        })
        .collect();
    let discs: Vec<(f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.23),
                std::array::from_fn(|_| rng.random_range(0.3..0.8)),
            )
        })
        .collect();
    let step = 1.0 / (size.max(2) - 1) as f32;
    ImageTensor::from_fn(size, size, |c, y, x| {
        let (u, v) = (x as f32 * step, y as f32 * step);
        let mut val = base[c] + grad[c] * v;
        for (fx, fy, ph, amp) in &waves {
            val += amp[c] * (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin();
        }
        for (cx, cy, r, col) in &discs {
            if ((u - cx).powi(2) + (v - cy).powi(2)).sqrt() < *r {
                val = col[c];
            }
        }
        val.clamp(0.0, 1.0)
    })
}

pub fn welllit(rng: &mut impl Rng, size: usize) -> ImageTensor {
    scene(rng, size)
}

/// A backlit image and the single-channel gain map that produced it.
pub fn backlit_with_gain(rng: &mut impl Rng, size: usize) -> (ImageTensor, Vec<f32>) {
    let img = scene(rng, size);
    let cx = rng.random_range(0.3..0.7f32);
    let cy = rng.random_range(0.45..0.75f32);
    let r = rng.random_range(0.25..0.4f32);
    let horizon = rng.random_range(0.6..0.8f32);
    let lo = rng.random_range(0.12..0.27f32);
    let step = 1.0 / (size.max(2) - 1) as f32;
    let mut gain = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f32 * step, y as f32 * step);
            let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
            let mask = sigmoid((r - d) / 0.03).max(sigmoid((v - horizon) / 0.03));
            gain[y * size + x] = 1.0 - mask * (1.0 - lo);
        }
    }
    let out = ImageTensor::from_fn(size, size, |c, y, x| {
        (img.get(c, y, x) * gain[y * size + x]).clamp(0.0, 1.0)
    });
    (out, gain)
}

pub fn backlit(rng: &mut impl Rng, size: usize) -> ImageTensor {
    backlit_with_gain(rng, size).0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Backlit,
    WellLit,
}

pub fn pool(kind: PoolKind, n: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| match kind {
            PoolKind::Backlit => backlit(&mut rng, size),
            PoolKind::WellLit => welllit(&mut rng, size),
        })
        .collect()
}

/// Writes `n` PNGs named `<prefix>_<index>.png` into `dir`.
pub fn write_pool(dir: &Path, kind: PoolKind, n: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let prefix = match kind {
        PoolKind::Backlit => "backlit",
        PoolKind::WellLit => "welllit",
    };
    pool(kind, n, size, seed)
        .into_iter()
        .enumerate()
        .map(|(i, img)| {
            let p = dir.join(format!("{prefix}_{i:03}.png"));
            crate::data::write_png(&img, &p)?;
            Ok(p)
        })
        .collect()
}

/// `steps` copies of `img` scaled by exposures evenly spaced in
/// `[lo, hi]`, clipped to `[0,1]`.
pub fn exposure_ramp(img: &ImageTensor, steps: usize, lo: f32, hi: f32) -> Vec<ImageTensor> {
    (0..steps)
        .map(|i| {
            let e = lo + (hi - lo) * i as f32 / (steps.max(2) - 1) as f32;
            ImageTensor::from_fn(img.height(), img.width(), |c, y, x| {
                (img.get(c, y, x) * e).clamp(0.0, 1.0)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backlit_pool_is_darker() {
        let b = pool(PoolKind::Backlit, 8, 48, 1);
        let w = pool(PoolKind::WellLit, 8, 48, 2);
        let mean = |p: &[ImageTensor]| p.iter().map(|i| i.mean()).sum::<f64>() / p.len() as f64;
        assert!(mean(&b) + 0.1 < mean(&w));
    }

    #[test]
    fn inverting_the_gain_restores_the_scene() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let (b, gain) = backlit_with_gain(&mut r1, 32);
        let w = welllit(&mut r2, 32);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let restored = b.get(c, y, x) / gain[y * 32 + x];
                    assert!((restored - w.get(c, y, x)).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn ramp_is_monotone_in_mean() {
        let img = pool(PoolKind::WellLit, 1, 16, 3).remove(0);
        let r = exposure_ramp(&img, 6, 0.2, 1.2);
        for pair in r.windows(2) {
            assert!(pair[0].mean() <= pair[1].mean());
        }
    }
}

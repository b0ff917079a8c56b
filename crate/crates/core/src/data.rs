//! Unpaired image pools: directory ingestion, training samples and the
//! inference-time resize rule.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Images whose sides both exceed this are scaled down for inference.
pub const INFERENCE_MAX_SIDE: usize = 2048;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug)]
pub struct Pool {
    pub dir: PathBuf,
    /// File names, sorted.
    pub ids: Vec<String>,
    pub images: Vec<ImageTensor>,
    /// `(file name, reason)` for every file that failed to decode.
    pub skipped: Vec<(String, String)>,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// PNG and JPEG files in `dir`, sorted by file name.
pub fn list_image_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Config(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.push((name, path));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Decodes any supported file to RGB; ICC profiles are ignored.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let decoded = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let img = ImageTensor::from_dynamic(&decoded);
    img.validate()?;
    Ok(img)
}

/// Loads every decodable image; corrupt files are skipped with a warning.
/// An empty result is a configuration error.
pub fn load_pool(dir: &Path) -> Result<Pool> {
    let mut pool = Pool {
        dir: dir.to_path_buf(),
        ids: Vec::new(),
        images: Vec::new(),
        skipped: Vec::new(),
    };
    for (name, path) in list_image_files(dir)? {
        match load_image(&path) {
            Ok(img) => {
                pool.ids.push(name);
                pool.images.push(img);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                pool.skipped.push((name, e.to_string()));
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::Config(format!("no decodable images in {}", dir.display())));
    }
    Ok(pool)
}

/// Square training base: the whole image resized to `size×size`.
pub fn training_base(img: &ImageTensor, size: usize) -> ImageTensor {
    img.resize_filtered(size, size)
}

/// Random zoom-crop (scale in `[0.8, 1]`, resized back), horizontal flip
/// with probability 0.5 and a random multiple of 90° rotation.
pub fn augment(base: &ImageTensor, rng: &mut impl Rng) -> ImageTensor {
    let (h, w) = (base.height(), base.width());
    let scale: f64 = rng.random_range(0.8..=1.0);
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let mut out = base
        .crop(top, left, ch, cw)
        .expect("crop lies inside the image")
        .resize_filtered(h, w);
    if rng.random_bool(0.5) {
        out = out.flip_horizontal();
    }
    let turns = rng.random_range(0..4u8);
    out.rotate90(turns)
}

/// One augmented training sample drawn from `bases`; returns its index too.
pub fn training_sample(bases: &[ImageTensor], rng: &mut impl Rng) -> (usize, ImageTensor) {
    let i = rng.random_range(0..bases.len());
    (i, augment(&bases[i], rng))
}

/// Scales so the long side is 2048 when both sides exceed 2048; otherwise
/// returns the image unchanged.
pub fn inference_resize(img: &ImageTensor) -> ImageTensor {
    match inference_size(img.height(), img.width()) {
        Some((h, w)) => img.resize_filtered(h, w),
        None => img.clone(),
    }
}

pub fn inference_size(height: usize, width: usize) -> Option<(usize, usize)> {
    if height <= INFERENCE_MAX_SIDE || width <= INFERENCE_MAX_SIDE {
        return None;
    }
    let long = height.max(width) as f64;
    let s = INFERENCE_MAX_SIDE as f64 / long;
    let fit = |v: usize| ((v as f64 * s).round() as usize).clamp(1, INFERENCE_MAX_SIDE);
    Some((fit(height), fit(width)))
}

pub fn write_png(img: &ImageTensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.to_dynamic().save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Inputs side by side with outputs, one row per pair.
pub fn comparison_grid(pairs: &[(&ImageTensor, &ImageTensor)]) -> Option<ImageTensor> {
    let h = pairs.iter().map(|(a, _)| a.height()).max()?;
    let w = pairs.iter().map(|(a, b)| a.width() + b.width()).max()?;
    let total_h = h * pairs.len();
    let mut grid = ImageTensor::filled(total_h, w, [0.0; 3]);
    for (row, (a, b)) in pairs.iter().enumerate() {
        for c in 0..3 {
            for y in 0..a.height() {
                for x in 0..a.width() {
                    grid.set(c, row * h + y, x, a.get(c, y, x));
                }
            }
            for y in 0..b.height() {
                for x in 0..b.width() {
                    grid.set(c, row * h + y, a.width() + x, b.get(c, y, x));
                }
            }
        }
    }
    Some(grid)
}

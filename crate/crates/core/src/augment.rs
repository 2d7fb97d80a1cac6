//! Training-time augmentation of labelled grayscale frames: synthetic pitch
//! by vertical cropping, photometric/optical jitter and horizontal flip.

use std::f64::consts::PI;
use std::io;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;
use crate::pose::Pose;

/// Rows kept by the pitch crop.
pub const CROP_ROWS: usize = 96;
/// Pitch represented by the top (or bottom) crop of a 160-row frame.
pub const MAX_PITCH_DEG: f64 = 14.0;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("row offset {offset} outside [0, {max}]")]
    OffsetOutOfRange { offset: usize, max: usize },
    #[error("image has {0} rows, need more than {CROP_ROWS}")]
    TooShort(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("labels: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image: GrayImage,
    pub label: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub contrast_range: (f64, f64),
    pub brightness_range: (f64, f64),
    pub gamma_range: (f64, f64),
    /// Vignette radius as a fraction of the half-diagonal.
    pub vignette_radius_range: (f64, f64),
    pub vignette_strength_range: (f64, f64),
    pub blur_sigma: f64,
    /// Probability of applying each photometric op, and of flipping.
    pub probability: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            contrast_range: (0.7, 2.0),
            brightness_range: (-0.2, 0.2),
            gamma_range: (0.4, 2.0),
            vignette_radius_range: (0.6, 1.4),
            vignette_strength_range: (0.2, 0.8),
            blur_sigma: 3.0,
            probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let ranges = [
            ("contrast", self.contrast_range),
            ("brightness", self.brightness_range),
            ("gamma", self.gamma_range),
            ("vignette radius", self.vignette_radius_range),
            ("vignette strength", self.vignette_strength_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) {
                return Err(AugmentError::Config(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(AugmentError::Config(format!("probability {} outside [0, 1]", self.probability)));
        }
        if self.gamma_range.0 <= 0.0 || self.blur_sigma < 0.0 {
            return Err(AugmentError::Config("gamma and blur sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Keeps rows `[row_offset, row_offset + 96)` and returns the pitch (radians)
/// the crop approximates: the top crop looks up by +14 degrees, the middle
/// crop is level, the bottom crop looks down by 14 degrees.
pub fn pitch_crop(img: &GrayImage, row_offset: usize) -> Result<(GrayImage, f64), AugmentError> {
    if img.height <= CROP_ROWS {
        return Err(AugmentError::TooShort(img.height));
    }
    let max = img.height - CROP_ROWS;
    if row_offset > max {
        return Err(AugmentError::OffsetOutOfRange { offset: row_offset, max });
    }
    let out = img.crop(0, row_offset, img.width, CROP_ROWS).expect("bounds checked");
    let center = max as f64 / 2.0;
    let pitch_deg = MAX_PITCH_DEG * (center - row_offset as f64) / center;
    Ok((out, pitch_deg.to_radians()))
}

/// Concrete photometric parameters; `None` skips the op.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhotometricOps {
    pub contrast: Option<f64>,
    pub brightness: Option<f64>,
    pub gamma: Option<f64>,
    /// `(radius fraction, strength)`.
    pub vignette: Option<(f64, f64)>,
    pub blur_sigma: Option<f64>,
}

impl PhotometricOps {
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let p = cfg.probability;
        let contrast = rng.gen_bool(p).then(|| uniform(rng, cfg.contrast_range));
        let brightness = rng.gen_bool(p).then(|| uniform(rng, cfg.brightness_range));
        let gamma = rng.gen_bool(p).then(|| uniform(rng, cfg.gamma_range));
        let vignette = rng
            .gen_bool(p)
            .then(|| (uniform(rng, cfg.vignette_radius_range), uniform(rng, cfg.vignette_strength_range)));
        let blur_sigma = rng.gen_bool(p).then_some(cfg.blur_sigma);
        Self { contrast, brightness, gamma, vignette, blur_sigma }
    }

    /// Applies the ops in fixed order (contrast, brightness, gamma, vignette,
    /// blur) on `[0, 1]` intensities, clamping after each step and rounding
    /// back to 8 bits once at the end.
    pub fn apply(&self, img: &GrayImage) -> GrayImage {
        let mut v: Vec<f64> = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let map = |v: &mut Vec<f64>, f: &dyn Fn(f64) -> f64| v.iter_mut().for_each(|x| *x = f(*x).clamp(0.0, 1.0));
        if let Some(c) = self.contrast {
            map(&mut v, &|x| x * c);
        }
        if let Some(b) = self.brightness {
            map(&mut v, &|x| x + b);
        }
        if let Some(g) = self.gamma {
            map(&mut v, &|x| x.powf(g));
        }
        if let Some((r, s)) = self.vignette {
            vignette(&mut v, img.width, img.height, r, s);
        }
        if let Some(sigma) = self.blur_sigma.filter(|&s| s > 0.0) {
            v = gaussian_blur(&v, img.width, img.height, sigma);
        }
        GrayImage {
            width: img.width,
            height: img.height,
            pixels: v.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo < hi {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Multiplicative cosine falloff: 1 at the centre, `1 - strength` at and
/// beyond `radius * half_diagonal`.
fn vignette(v: &mut [f64], w: usize, h: usize, radius: f64, strength: f64) {
    let half_diag = ((w * w + h * h) as f64).sqrt() / 2.0;
    let r = (radius * half_diag).max(1e-9);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    for y in 0..h {
        for x in 0..w {
            let d = (x as f64 - cx).hypot(y as f64 - cy);
            let t = (d / r).min(1.0);
            let factor = 1.0 - strength * (1.0 - (t * PI / 2.0).cos());
            let p = &mut v[y * w + x];
            *p = (*p * factor).clamp(0.0, 1.0);
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|x| x / sum).collect()
}

/// Separable Gaussian blur with replicated borders.
fn gaussian_blur(v: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clampi = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; v.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k.iter().enumerate().map(|(j, kj)| kj * v[y * w + clampi(x as i64 + j as i64 - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; v.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(j, kj)| kj * tmp[clampi(y as i64 + j as i64 - r, h) * w + x]).sum();
        }
    }
    out
}

/// Samples and applies one random photometric op set.
pub fn photometric<R: Rng + ?Sized>(img: &GrayImage, cfg: &AugmentConfig, rng: &mut R) -> GrayImage {
    PhotometricOps::sample(cfg, rng).apply(img)
}

/// Mirrors about the vertical axis; the label's `y` and `theta` change sign.
pub fn hflip(li: &LabeledImage) -> LabeledImage {
    let img = &li.image;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        pixels.extend(img.row(y).iter().rev());
    }
    let l = li.label;
    LabeledImage {
        image: GrayImage { width: img.width, height: img.height, pixels },
        label: Pose::new(l.x, -l.y, l.z, -l.theta),
    }
}

/// Full pipeline on a full-height frame: random pitch crop, photometric ops,
/// then a flip with probability `cfg.probability`.
pub fn augment<R: Rng + ?Sized>(
    src: &LabeledImage,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<LabeledImage, AugmentError> {
    cfg.validate()?;
    let max = src.image.height.checked_sub(CROP_ROWS).ok_or(AugmentError::TooShort(src.image.height))?;
    let offset = rng.gen_range(0..=max);
    let (cropped, _) = pitch_crop(&src.image, offset)?;
    let image = photometric(&cropped, cfg, rng);
    let out = LabeledImage { image, label: src.label };
    Ok(if rng.gen_bool(cfg.probability) { hflip(&out) } else { out })
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    x: f64,
    y: f64,
    z: f64,
    theta: f64,
}

/// Reads `x,y,z,theta` rows (with header; `#` lines are comments).
pub fn read_labels(path: &Path) -> Result<Vec<Pose>, AugmentError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    rdr.deserialize::<LabelRow>()
        .map(|r| r.map(|r| Pose::new(r.x, r.y, r.z, r.theta)).map_err(AugmentError::from))
        .collect()
}

pub fn write_labels<W: io::Write>(out: W, labels: &[Pose]) -> Result<(), AugmentError> {
    let mut w = csv::Writer::from_writer(out);
    for p in labels {
        w.serialize(LabelRow { x: p.x, y: p.y, z: p.z, theta: p.theta })?;
    }
    w.flush()?;
    Ok(())
}

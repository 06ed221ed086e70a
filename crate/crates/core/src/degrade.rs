//! Parametric synthetic degradations and the pretext-corpus builder.
//!
//! Six families, each with severity levels 0..=5 where level 0 is the exact
//! identity. Physical parameters are a fixed function of (kind, level); the
//! per-level tables are chosen so that reconstruction error against the clean
//! image grows monotonically with level.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::{save_image, Image, ImageError};
use crate::manifest::{DatasetManifest, ManifestRow};

pub const MAX_LEVEL: u8 = 5;

pub const BLUR_SIGMA: [f64; 6] = [0.0, 0.75, 1.5, 2.5, 3.5, 5.0];
pub const NOISE_SIGMA_255: [f64; 6] = [0.0, 5.0, 10.0, 20.0, 35.0, 50.0];
pub const SATURATION_SCALE: [f64; 6] = [1.0, 0.8, 0.6, 0.4, 0.2, 0.0];
pub const CONTRAST_SCALE: [f64; 6] = [1.0, 0.85, 0.7, 0.55, 0.4, 0.25];
pub const MEAN_SHIFT_DELTA: [f64; 6] = [0.0, 0.04, 0.08, 0.12, 0.16, 0.20];
/// Quantizer level counts; 0 stands for "unquantized" (identity).
pub const QUANT_LEVELS: [u32; 6] = [0, 64, 32, 16, 8, 4];

const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];
const QUANT_BLOCK: usize = 8;

#[derive(Debug, Error)]
pub enum DegradeError {
    #[error("unknown degradation kind: {0}")]
    UnknownKind(String),
    #[error("severity level {0} out of range 0..=5")]
    LevelOutOfRange(u8),
    #[error("no source images given")]
    EmptySourceList,
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DegradationKind {
    GaussianBlur,
    GaussianNoise,
    ColorSaturation,
    ContrastChange,
    MeanShift,
    BlockQuantization,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 6] = [
        DegradationKind::GaussianBlur,
        DegradationKind::GaussianNoise,
        DegradationKind::ColorSaturation,
        DegradationKind::ContrastChange,
        DegradationKind::MeanShift,
        DegradationKind::BlockQuantization,
    ];

    /// Short tag used in file names.
    pub fn tag(&self) -> &'static str {
        match self {
            DegradationKind::GaussianBlur => "blur",
            DegradationKind::GaussianNoise => "noise",
            DegradationKind::ColorSaturation => "sat",
            DegradationKind::ContrastChange => "contrast",
            DegradationKind::MeanShift => "shift",
            DegradationKind::BlockQuantization => "quant",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DegradationKind::GaussianBlur => "GaussianBlur",
            DegradationKind::GaussianNoise => "GaussianNoise",
            DegradationKind::ColorSaturation => "ColorSaturation",
            DegradationKind::ContrastChange => "ContrastChange",
            DegradationKind::MeanShift => "MeanShift",
            DegradationKind::BlockQuantization => "BlockQuantization",
        };
        f.write_str(name)
    }
}

impl FromStr for DegradationKind {
    type Err = DegradeError;

    fn from_str(s: &str) -> Result<Self, DegradeError> {
        match s {
            "GaussianBlur" => Ok(DegradationKind::GaussianBlur),
            "GaussianNoise" => Ok(DegradationKind::GaussianNoise),
            "ColorSaturation" => Ok(DegradationKind::ColorSaturation),
            "ContrastChange" => Ok(DegradationKind::ContrastChange),
            "MeanShift" => Ok(DegradationKind::MeanShift),
            "BlockQuantization" => Ok(DegradationKind::BlockQuantization),
            other => Err(DegradeError::UnknownKind(other.to_string())),
        }
    }
}

/// A degradation kind plus severity level. `seed` only influences
/// `GaussianNoise`; every other kind is a deterministic pixel map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub level: u8,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, level: u8) -> Result<Self, DegradeError> {
        if level > MAX_LEVEL {
            return Err(DegradeError::LevelOutOfRange(level));
        }
        Ok(DegradationSpec {
            kind,
            level,
            seed: 0,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The physical parameter implied by (kind, level): blur sigma, noise
    /// sigma in [0,1] units, scale factor, shift, or quantizer level count.
    pub fn param(&self) -> f64 {
        let l = self.level as usize;
        match self.kind {
            DegradationKind::GaussianBlur => BLUR_SIGMA[l],
            DegradationKind::GaussianNoise => NOISE_SIGMA_255[l] / 255.0,
            DegradationKind::ColorSaturation => SATURATION_SCALE[l],
            DegradationKind::ContrastChange => CONTRAST_SCALE[l],
            DegradationKind::MeanShift => MEAN_SHIFT_DELTA[l],
            DegradationKind::BlockQuantization => {
                if self.level == 0 {
                    f64::INFINITY
                } else {
                    QUANT_LEVELS[l] as f64
                }
            }
        }
    }
}

/// Apply a degradation. Level 0 returns the input bit-identically; all other
/// outputs keep the input shape and reference id and stay inside `[0,1]`.
pub fn apply_degradation(img: &Image, spec: &DegradationSpec) -> Result<Image, DegradeError> {
    if spec.level > MAX_LEVEL {
        return Err(DegradeError::LevelOutOfRange(spec.level));
    }
    if spec.level == 0 {
        return Ok(img.clone());
    }
    let out = match spec.kind {
        DegradationKind::GaussianBlur => gaussian_blur(img, spec.param()),
        DegradationKind::GaussianNoise => add_gaussian_noise(img, spec),
        DegradationKind::ColorSaturation => rescale_saturation(img, spec.param() as f32),
        DegradationKind::ContrastChange => rescale_contrast(img, spec.param() as f32),
        DegradationKind::MeanShift => shift_mean(img, spec.param() as f32),
        DegradationKind::BlockQuantization => quantize_blocks(img, QUANT_LEVELS[spec.level as usize]),
    };
    Ok(out)
}

/// Normalized 2D Gaussian kernel truncated at radius `ceil(3*sigma)`, in f64.
pub fn gaussian_kernel_2d(sigma: f64) -> (usize, Vec<f64>) {
    let radius = (3.0 * sigma).ceil() as usize;
    let side = 2 * radius + 1;
    let mut kernel = vec![0.0f64; side * side];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut sum = 0.0;
    for dy in 0..side {
        for dx in 0..side {
            let y = dy as f64 - radius as f64;
            let x = dx as f64 - radius as f64;
            let w = (-(x * x + y * y) * inv).exp();
            kernel[dy * side + dx] = w;
            sum += w;
        }
    }
    for w in &mut kernel {
        *w /= sum;
    }
    (radius, kernel)
}

/// Fold an out-of-range index back into `0..n` by repeated reflection
/// (`-1` maps to `0`, `n` maps to `n-1`).
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

pub(crate) fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let (radius, kernel) = gaussian_kernel_2d(sigma);
    let side = 2 * radius + 1;
    let (h, w, ch) = img.shape();
    let mut data = vec![0.0f32; img.data.len()];
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = 0.0f64;
                for dy in 0..side {
                    let sr = reflect(r as isize + dy as isize - radius as isize, h);
                    for dx in 0..side {
                        let sc = reflect(c as isize + dx as isize - radius as isize, w);
                        acc += kernel[dy * side + dx] * img.at(sr, sc, k) as f64;
                    }
                }
                data[(r * w + c) * ch + k] = (acc as f32).clamp(0.0, 1.0);
            }
        }
    }
    Image {
        data,
        reference_id: img.reference_id.clone(),
        ..*img
    }
}

/// FNV-1a over the quantities that identify one degraded rendition, so noise
/// is reproducible for a given (image content, spec) without a shared rng.
fn noise_stream_seed(img: &Image, spec: &DegradationSpec) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut mix = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    mix(img.reference_id.as_bytes());
    mix(&[spec.kind.tag().as_bytes()[0], spec.level]);
    mix(&spec.seed.to_le_bytes());
    h
}

fn add_gaussian_noise(img: &Image, spec: &DegradationSpec) -> Image {
    let sigma = spec.param() as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_stream_seed(img, spec));
    let data = img
        .data
        .iter()
        .map(|&v| {
            // Box-Muller, cosine branch
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            (v + sigma * z as f32).clamp(0.0, 1.0)
        })
        .collect();
    Image {
        data,
        reference_id: img.reference_id.clone(),
        ..*img
    }
}

fn rescale_saturation(img: &Image, s: f32) -> Image {
    if img.channels == 1 {
        // gray equals the input; interpolation toward it is the identity
        return img.clone();
    }
    let (h, w, ch) = img.shape();
    let mut data = Vec::with_capacity(img.data.len());
    for r in 0..h {
        for c in 0..w {
            let gray: f32 = (0..ch).map(|k| LUMA_WEIGHTS[k] * img.at(r, c, k)).sum();
            for k in 0..ch {
                data.push((gray + s * (img.at(r, c, k) - gray)).clamp(0.0, 1.0));
            }
        }
    }
    Image {
        data,
        reference_id: img.reference_id.clone(),
        ..*img
    }
}

fn rescale_contrast(img: &Image, c: f32) -> Image {
    let mean = (img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len() as f64) as f32;
    let data = img
        .data
        .iter()
        .map(|&v| (mean + c * (v - mean)).clamp(0.0, 1.0))
        .collect();
    Image {
        data,
        reference_id: img.reference_id.clone(),
        ..*img
    }
}

fn shift_mean(img: &Image, delta: f32) -> Image {
    let data = img.data.iter().map(|&v| (v + delta).min(1.0)).collect();
    Image {
        data,
        reference_id: img.reference_id.clone(),
        ..*img
    }
}

/// Uniform `levels`-step quantizer applied per 8x8 block and channel; the
/// block mean is restored afterwards so only local detail is destroyed.
fn quantize_blocks(img: &Image, levels: u32) -> Image {
    let (h, w, ch) = img.shape();
    let steps = (levels - 1) as f32;
    let mut data = img.data.clone();
    for k in 0..ch {
        for br in (0..h).step_by(QUANT_BLOCK) {
            for bc in (0..w).step_by(QUANT_BLOCK) {
                let rows = br..(br + QUANT_BLOCK).min(h);
                let cols = bc..(bc + QUANT_BLOCK).min(w);
                let count = (rows.len() * cols.len()) as f64;
                let mut before = 0.0f64;
                let mut after = 0.0f64;
                for r in rows.clone() {
                    for c in cols.clone() {
                        let idx = (r * w + c) * ch + k;
                        before += data[idx] as f64;
                        let q = (data[idx] * steps).round() / steps;
                        data[idx] = q;
                        after += q as f64;
                    }
                }
                let correction = ((before - after) / count) as f32;
                for r in rows.clone() {
                    for c in cols.clone() {
                        let idx = (r * w + c) * ch + k;
                        data[idx] = (data[idx] + correction).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Image {
        data,
        reference_id: img.reference_id.clone(),
        ..*img
    }
}

/// Render every (source, kind, level 0..=5) combination into `out_dir` and
/// return the manifest describing it. Paths in the manifest are relative to
/// `out_dir`; rows carry `reference_id = source stem` and no score.
pub fn build_synthetic_dataset(
    sources: &[PathBuf],
    kinds: &[DegradationKind],
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest, DegradeError> {
    if sources.is_empty() || kinds.is_empty() {
        return Err(DegradeError::EmptySourceList);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for source in sources {
        let img = crate::image::load_image(source)?;
        for &kind in kinds {
            for level in 0..=MAX_LEVEL {
                let spec = DegradationSpec::new(kind, level)?.with_seed(seed);
                let degraded = apply_degradation(&img, &spec)?;
                let ext = if degraded.channels == 3 { "ppm" } else { "pgm" };
                let name = format!("{}_{}_l{}.{}", img.reference_id, kind.tag(), level, ext);
                save_image(&degraded, &out_dir.join(&name))?;
                rows.push(ManifestRow {
                    path: name,
                    reference_id: img.reference_id.clone(),
                    kind,
                    level,
                    score: None,
                });
            }
        }
    }
    Ok(DatasetManifest::new(rows, out_dir.to_path_buf()))
}

//! Image representation and file I/O (binary PPM/PGM read+write, PNG read).
//!
//! Pixels are stored row-major as `f32` in `[0,1]`, interleaved by channel.
//! Every image carries a `reference_id` naming the pristine content it was
//! derived from; augmentations and degradations preserve it.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read {path}: {source}")]
    UnreadableFile {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("cannot write {path}: {source}")]
    UnwritableDestination {
        path: String,
        source: std::io::Error,
    },
    #[error("crop {size} exceeds image {height}x{width}")]
    CropLargerThanImage {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

/// An in-memory image: `height * width * channels` values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub reference_id: String,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
        reference_id: impl Into<String>,
    ) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::InvalidImage(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(ImageError::InvalidImage(format!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::InvalidImage(format!(
                "pixel value {v} outside [0,1]"
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
            reference_id: reference_id.into(),
        })
    }

    /// Build an image from a per-(row, col, channel) function; values are clamped to `[0,1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        reference_id: impl Into<String>,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch).clamp(0.0, 1.0));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
            reference_id: reference_id.into(),
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Mean squared difference over all values; images must have equal shape.
    pub fn mse(&self, other: &Image) -> f32 {
        assert_eq!(self.shape(), other.shape(), "mse over mismatched shapes");
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        (sum / self.data.len() as f64) as f32
    }
}

/// Load a PNG, binary PPM (P6), or binary PGM (P5) image, mapping integer
/// samples `[0, 2^bits - 1]` to `[0,1]` by division. The reference id is the
/// file stem.
pub fn load_image(path: &Path) -> Result<Image, ImageError> {
    let mut file = BufReader::new(File::open(path).map_err(|source| ImageError::UnreadableFile {
        path: path.display().to_string(),
        source,
    })?);
    let mut magic = [0u8; 2];
    file.read_exact(&mut magic)
        .map_err(|_| ImageError::CorruptHeader("file shorter than 2 bytes".into()))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match &magic {
        b"P5" | b"P6" => load_pnm(&magic, file, stem),
        [0x89, b'P'] => load_png(path, stem),
        other => Err(ImageError::UnsupportedFormat(format!(
            "unrecognized magic bytes {other:?}"
        ))),
    }
}

fn load_pnm(magic: &[u8; 2], mut file: impl Read, stem: String) -> Result<Image, ImageError> {
    let channels = if magic == b"P6" { 3 } else { 1 };
    let width = read_pnm_int(&mut file)?;
    let height = read_pnm_int(&mut file)?;
    let maxval = read_pnm_int(&mut file)?;
    if maxval == 0 || maxval > 65535 {
        return Err(ImageError::CorruptHeader(format!("maxval {maxval}")));
    }
    if height == 0 || width == 0 {
        return Err(ImageError::CorruptHeader("zero image dimension".into()));
    }
    let samples = height * width * channels;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let mut raw = vec![0u8; samples * bytes_per];
    file.read_exact(&mut raw)
        .map_err(|_| ImageError::CorruptHeader("pixel data shorter than header implies".into()))?;
    let scale = 1.0 / maxval as f32;
    let data: Vec<f32> = if bytes_per == 1 {
        raw.iter().map(|&b| b as f32 * scale).collect()
    } else {
        raw.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 * scale)
            .collect()
    };
    Image::new(height, width, channels, data, stem)
}

/// Read one whitespace-delimited unsigned integer, skipping `#` comments.
fn read_pnm_int(file: &mut impl Read) -> Result<usize, ImageError> {
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    // skip whitespace and comments
    loop {
        file.read_exact(&mut byte)
            .map_err(|_| ImageError::CorruptHeader("truncated header".into()))?;
        if in_comment {
            if byte[0] == b'\n' {
                in_comment = false;
            }
        } else if byte[0] == b'#' {
            in_comment = true;
        } else if !byte[0].is_ascii_whitespace() {
            break;
        }
    }
    if !byte[0].is_ascii_digit() {
        return Err(ImageError::CorruptHeader(format!(
            "expected digit, got byte {}",
            byte[0]
        )));
    }
    let mut value = 0usize;
    loop {
        value = value * 10 + (byte[0] - b'0') as usize;
        if value > 1 << 28 {
            return Err(ImageError::CorruptHeader("header value too large".into()));
        }
        match file.read_exact(&mut byte) {
            Ok(()) if byte[0].is_ascii_digit() => continue,
            Ok(()) if byte[0].is_ascii_whitespace() => break,
            Ok(()) => {
                return Err(ImageError::CorruptHeader(format!(
                    "unexpected byte {} in header",
                    byte[0]
                )))
            }
            Err(_) => return Err(ImageError::CorruptHeader("truncated header".into())),
        }
    }
    Ok(value)
}

fn load_png(path: &Path, stem: String) -> Result<Image, ImageError> {
    let file = File::open(path).map_err(|source| ImageError::UnreadableFile {
        path: path.display().to_string(),
        source,
    })?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| ImageError::CorruptHeader(format!("png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageError::CorruptHeader(format!("png: {e}")))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let (in_ch, keep_ch) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => {
            return Err(ImageError::UnsupportedFormat(format!(
                "png color type {other:?}"
            )))
        }
    };
    let channels = if keep_ch == 3 { 3 } else { 1 };
    let mut data = Vec::with_capacity(height * width * channels);
    match info.bit_depth {
        png::BitDepth::Eight => {
            let raw = &buf[..height * width * in_ch];
            for px in raw.chunks_exact(in_ch) {
                for &s in &px[..keep_ch] {
                    data.push(s as f32 / 255.0);
                }
            }
        }
        png::BitDepth::Sixteen => {
            let raw = &buf[..height * width * in_ch * 2];
            for px in raw.chunks_exact(in_ch * 2) {
                for i in 0..keep_ch {
                    let s = u16::from_be_bytes([px[2 * i], px[2 * i + 1]]);
                    data.push(s as f32 / 65535.0);
                }
            }
        }
        other => {
            return Err(ImageError::UnsupportedFormat(format!(
                "png bit depth {other:?}"
            )))
        }
    }
    Image::new(height, width, channels, data, stem)
}

/// Write as 8-bit binary PPM (3 channels) or PGM (1 channel) via `round(v * 255)`.
pub fn save_image(img: &Image, path: &Path) -> Result<(), ImageError> {
    let mut out = Vec::with_capacity(img.data.len() + 32);
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    out.extend_from_slice(format!("{magic}\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend(img.data.iter().map(|v| (v * 255.0).round() as u8));
    let mut file = File::create(path).map_err(|source| ImageError::UnwritableDestination {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&out)
        .map_err(|source| ImageError::UnwritableDestination {
            path: path.display().to_string(),
            source,
        })
}

/// Crop a `size x size` window at offsets drawn uniformly from the valid range.
pub fn random_crop(img: &Image, size: usize, rng: &mut impl Rng) -> Result<Image, ImageError> {
    if size > img.height || size > img.width {
        return Err(ImageError::CropLargerThanImage {
            size,
            height: img.height,
            width: img.width,
        });
    }
    let row0 = rng.gen_range(0..=img.height - size);
    let col0 = rng.gen_range(0..=img.width - size);
    Ok(crop_at(img, row0, col0, size))
}

/// Deterministic center crop, used at inference time.
pub fn center_crop(img: &Image, size: usize) -> Result<Image, ImageError> {
    if size > img.height || size > img.width {
        return Err(ImageError::CropLargerThanImage {
            size,
            height: img.height,
            width: img.width,
        });
    }
    Ok(crop_at(img, (img.height - size) / 2, (img.width - size) / 2, size))
}

pub fn crop_at(img: &Image, row0: usize, col0: usize, size: usize) -> Image {
    let mut data = Vec::with_capacity(size * size * img.channels);
    for r in row0..row0 + size {
        let start = (r * img.width + col0) * img.channels;
        data.extend_from_slice(&img.data[start..start + size * img.channels]);
    }
    Image {
        height: size,
        width: size,
        channels: img.channels,
        data,
        reference_id: img.reference_id.clone(),
    }
}

/// With probability `p`, reverse the column order of every row.
pub fn random_hflip(img: &Image, p: f64, rng: &mut impl Rng) -> Image {
    if rng.gen::<f64>() < p {
        hflip(img)
    } else {
        img.clone()
    }
}

pub fn hflip(img: &Image) -> Image {
    let mut data = Vec::with_capacity(img.data.len());
    for r in 0..img.height {
        for c in (0..img.width).rev() {
            let start = (r * img.width + c) * img.channels;
            data.extend_from_slice(&img.data[start..start + img.channels]);
        }
    }
    Image {
        data,
        reference_id: img.reference_id.clone(),
        ..*img
    }
}

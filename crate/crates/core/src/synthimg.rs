//! Seeded procedural source images for desk-scale experiments.
//!
//! Each image mixes smooth structure (gradients, gratings, filled shapes)
//! with high-contrast speckle so that every blur level leaves a measurably
//! different rendition.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{save_image, Image, ImageError};

/// One procedural image, fully determined by (size, seed). Component counts
/// and amplitudes vary widely from image to image so that content statistics
/// differ far more across references than across degradation levels.
pub fn generate_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = vec![[0.0f32; 3]; size * size];

    // per-channel linear gradients
    let grad: Vec<[f32; 3]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(0.1..0.9),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
            ]
        })
        .collect();
    for r in 0..size {
        for c in 0..size {
            for ch in 0..3 {
                let [base, dr, dc] = grad[ch];
                field[r * size + c][ch] =
                    base + dr * r as f32 / size as f32 + dc * c as f32 / size as f32;
            }
        }
    }

    // sinusoidal gratings at mixed orientations and frequencies
    let gratings = rng.gen_range(0..6usize);
    for _ in 0..gratings {
        let fx: f32 = rng.gen_range(0.5..14.0);
        let fy: f32 = rng.gen_range(0.5..14.0);
        let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let amp: f32 = rng.gen_range(0.03..0.3);
        let weights: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for r in 0..size {
            for c in 0..size {
                let v = amp
                    * (std::f32::consts::TAU * (fx * r as f32 + fy * c as f32) / size as f32
                        + phase)
                        .sin();
                for ch in 0..3 {
                    field[r * size + c][ch] += v * weights[ch];
                }
            }
        }
    }

    // hard-edged rectangles
    let rects = rng.gen_range(1..8usize);
    for _ in 0..rects {
        let h = rng.gen_range(size / 10..size / 2);
        let w = rng.gen_range(size / 10..size / 2);
        let r0 = rng.gen_range(0..size - h);
        let c0 = rng.gen_range(0..size - w);
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let alpha: f32 = rng.gen_range(0.3..1.0);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                for ch in 0..3 {
                    let px = &mut field[r * size + c][ch];
                    *px = *px * (1.0 - alpha) + color[ch] * alpha;
                }
            }
        }
    }

    // high-contrast speckle: the component every blur level erodes further.
    // Amplitude, density and chroma differ per image.
    let speckle_amp: f32 = rng.gen_range(0.05..0.5);
    let speckle_density: f32 = rng.gen_range(0.2..1.0);
    let chroma: f32 = rng.gen_range(0.0..1.0);
    for px in field.iter_mut() {
        if rng.gen::<f32>() > speckle_density {
            // skipped pixels still consume one draw so layouts stay aligned
            let _ = rng.gen::<f32>();
            continue;
        }
        let base = if rng.gen::<f32>() < 0.5 {
            speckle_amp
        } else {
            -speckle_amp
        };
        for (ch, v) in px.iter_mut().enumerate() {
            let tint = 1.0 - chroma * (ch as f32 - 1.0).abs() / 2.0;
            *v += base * tint;
        }
    }

    let sharp = Image::from_fn(size, size, 3, format!("synth{seed}"), |r, c, ch| {
        field[r * size + c][ch]
    });
    // per-image base smoothness, so pristine references span a range of
    // intrinsic sharpness and absolute detail energy does not encode the
    // degradation level across references
    let base_sigma: f64 = rng.gen_range(0.0..1.0);
    if base_sigma < 0.05 {
        sharp
    } else {
        crate::degrade::gaussian_blur(&sharp, base_sigma)
    }
}

/// Write `count` procedural PPM images into `dir` and return their paths in
/// name order (`synth_000.ppm`, ...).
pub fn generate_corpus(
    dir: &Path,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PathBuf>, ImageError> {
    std::fs::create_dir_all(dir).map_err(|source| ImageError::UnwritableDestination {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let mut img = generate_image(size, seed.wrapping_add(i as u64));
        img.reference_id = format!("synth_{i:03}");
        let path = dir.join(format!("synth_{i:03}.ppm"));
        save_image(&img, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

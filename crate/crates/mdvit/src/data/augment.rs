//! Training-time augmentation: geometric warps (applied identically to image
//! and mask), plus image-only noise and brightness/contrast jitter.
//!
//! Each transform fires independently with probability 0.5. Magnitudes are
//! conventional dermoscopy-pipeline defaults; all are gated by config
//! toggles. The result is a pure function of (sample, options, seed).

use super::Sample;
use crate::config::TrainConfig;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct AugmentOptions {
    pub scale: bool,
    pub shift: bool,
    pub rotate: bool,
    pub flip: bool,
    pub noise: bool,
    pub brightness_contrast: bool,
}

impl AugmentOptions {
    pub fn all() -> Self {
        AugmentOptions {
            scale: true,
            shift: true,
            rotate: true,
            flip: true,
            noise: true,
            brightness_contrast: true,
        }
    }

    pub fn none() -> Self {
        AugmentOptions {
            scale: false,
            shift: false,
            rotate: false,
            flip: false,
            noise: false,
            brightness_contrast: false,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        if !cfg.augment {
            return AugmentOptions::none();
        }
        AugmentOptions {
            scale: cfg.aug_scale,
            shift: cfg.aug_shift,
            rotate: cfg.aug_rotate,
            flip: cfg.aug_flip,
            noise: cfg.aug_noise,
            brightness_contrast: cfg.aug_brightness_contrast,
        }
    }
}

fn bilinear_at(img: &Array3<f32>, y: f32, x: f32, c: usize) -> f32 {
    let (h, w, _) = img.dim();
    if y < -0.5 || x < -0.5 || y > h as f32 - 0.5 || x > w as f32 - 0.5 {
        return 0.0;
    }
    let y0 = y.floor().max(0.0) as usize;
    let x0 = x.floor().max(0.0) as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (y - y0 as f32).clamp(0.0, 1.0);
    let fx = (x - x0 as f32).clamp(0.0, 1.0);
    let top = img[[y0, x0, c]] * (1.0 - fx) + img[[y0, x1, c]] * fx;
    let bot = img[[y1, x0, c]] * (1.0 - fx) + img[[y1, x1, c]] * fx;
    top * (1.0 - fy) + bot * fy
}

fn nearest_at(mask: &Array2<f32>, y: f32, x: f32) -> f32 {
    let (h, w) = mask.dim();
    let yi = y.round() as isize;
    let xi = x.round() as isize;
    if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
        return 0.0;
    }
    mask[[yi as usize, xi as usize]]
}

/// Apply the configured augmentations. Mask stays binary; image stays in
/// [0, 1]; geometry is shared between image and mask exactly.
pub fn augment(sample: &Sample, opts: &AugmentOptions, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, _) = sample.image.dim();

    // Geometric parameters (identity by default).
    let mut scale = 1.0f32;
    let mut angle = 0.0f32;
    let mut shift = (0.0f32, 0.0f32);
    if opts.scale && rng.gen_bool(0.5) {
        scale = rng.gen_range(0.9..=1.1);
    }
    if opts.shift && rng.gen_bool(0.5) {
        let limit = 0.0625;
        shift = (
            rng.gen_range(-limit..=limit) * h as f32,
            rng.gen_range(-limit..=limit) * w as f32,
        );
    }
    if opts.rotate && rng.gen_bool(0.5) {
        angle = rng.gen_range(-45.0f32..=45.0).to_radians();
    }
    let (mut flip_h, mut flip_v) = (false, false);
    if opts.flip && rng.gen_bool(0.5) {
        if rng.gen_bool(0.5) {
            flip_h = true;
        } else {
            flip_v = true;
        }
    }

    let warp = scale != 1.0 || angle != 0.0 || shift != (0.0, 0.0);
    let (mut image, mut mask) = if warp {
        let cy = (h as f32 - 1.0) / 2.0;
        let cx = (w as f32 - 1.0) / 2.0;
        let (sin, cos) = (-angle).sin_cos();
        let mut image = Array3::<f32>::zeros((h, w, 3));
        let mut mask = Array2::<f32>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                // Inverse map: undo shift, then rotate back and unscale
                // around the center.
                let dy = y as f32 - shift.0 - cy;
                let dx = x as f32 - shift.1 - cx;
                let sy = (cos * dy - sin * dx) / scale + cy;
                let sx = (sin * dy + cos * dx) / scale + cx;
                for c in 0..3 {
                    image[[y, x, c]] = bilinear_at(&sample.image, sy, sx, c);
                }
                mask[[y, x]] = nearest_at(&sample.mask, sy, sx);
            }
        }
        (image, mask)
    } else {
        (sample.image.clone(), sample.mask.clone())
    };

    if flip_h {
        image = flip_image(&image, false);
        mask = flip_mask(&mask, false);
    }
    if flip_v {
        image = flip_image(&image, true);
        mask = flip_mask(&mask, true);
    }

    if opts.noise && rng.gen_bool(0.5) {
        let sigma: f32 = rng.gen_range(0.0..=0.05);
        for v in image.iter_mut() {
            // Box-Muller pair, first component only; cheap and adequate here.
            let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
            let u2: f32 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
            *v = (*v + sigma * z).clamp(0.0, 1.0);
        }
    }

    if opts.brightness_contrast && rng.gen_bool(0.5) {
        let brightness: f32 = rng.gen_range(0.8..=1.2);
        let contrast: f32 = rng.gen_range(0.8..=1.2);
        for v in image.iter_mut() {
            *v = (((*v * brightness) - 0.5) * contrast + 0.5).clamp(0.0, 1.0);
        }
    }

    Sample {
        image,
        mask,
        domain: sample.domain,
        id: sample.id.clone(),
    }
}

fn flip_image(img: &Array3<f32>, vertical: bool) -> Array3<f32> {
    let (h, w, _) = img.dim();
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if vertical {
                (h - 1 - y, x)
            } else {
                (y, w - 1 - x)
            };
            for c in 0..3 {
                out[[y, x, c]] = img[[sy, sx, c]];
            }
        }
    }
    out
}

fn flip_mask(mask: &Array2<f32>, vertical: bool) -> Array2<f32> {
    let (h, w) = mask.dim();
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if vertical {
                (h - 1 - y, x)
            } else {
                (y, w - 1 - x)
            };
            out[[y, x]] = mask[[sy, sx]];
        }
    }
    out
}

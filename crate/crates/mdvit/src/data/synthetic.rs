//! Synthetic multi-domain generator: desk-scale stand-in for multi-source
//! segmentation corpora.
//!
//! Every sample is an ellipse blob with a radial intensity gradient on a
//! textured background; domains differ in palette, noise level, and
//! eccentricity. In conflict mode, domains pair up (m with m + M/2): the
//! pair shares one appearance style, but the first half labels the blob's
//! inner core while the second half labels only the surrounding ring. The
//! two label rules are exactly disjoint regions of the same blob, so joint
//! training without domain labels receives contradictory supervision — a
//! controlled trigger for negative knowledge transfer. This construction is
//! the artifact's own benchmark, not a published procedure.

use super::{DomainDataset, Sample};
use crate::error::Result;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Fraction of the blob radius that separates core from ring.
pub const CORE_SCALE: f64 = 0.6;

#[derive(Debug, Clone)]
pub struct SyntheticOptions {
    pub num_domains: usize,
    pub n_per_domain: usize,
    pub size: usize,
    pub conflict: bool,
    pub seed: u64,
}

/// Which region of the blob a domain labels as foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// The inner core (radial coordinate <= CORE_SCALE).
    Core,
    /// The ring between CORE_SCALE and the blob boundary.
    Ring,
    /// The whole blob (used when conflict mode is off).
    Full,
}

/// Appearance parameters shared by all samples of one style.
#[derive(Debug, Clone)]
pub struct Style {
    pub background: [f32; 3],
    pub texture_amp: f32,
    pub noise_sigma: f32,
    pub fg_inner: [f32; 3],
    pub fg_outer: [f32; 3],
    pub eccentricity: f32,
}

/// Deterministic style table; distinct palettes per style id.
pub fn style(style_id: usize) -> Style {
    const PALETTES: [([f32; 3], [f32; 3], [f32; 3]); 4] = [
        ([0.25, 0.20, 0.18], [0.85, 0.55, 0.40], [0.45, 0.25, 0.20]),
        ([0.15, 0.22, 0.30], [0.90, 0.85, 0.60], [0.55, 0.45, 0.25]),
        ([0.30, 0.30, 0.25], [0.50, 0.75, 0.85], [0.20, 0.40, 0.55]),
        ([0.20, 0.15, 0.25], [0.80, 0.60, 0.85], [0.45, 0.25, 0.50]),
    ];
    let (background, fg_inner, fg_outer) = PALETTES[style_id % PALETTES.len()];
    Style {
        background,
        texture_amp: 0.03 + 0.02 * (style_id % 3) as f32,
        noise_sigma: 0.01 + 0.01 * (style_id % 4) as f32,
        fg_inner,
        fg_outer,
        eccentricity: 0.1 + 0.1 * (style_id % 3) as f32,
    }
}

/// Label rule and style id for domain `m` of `num_domains`.
pub fn domain_rule(m: usize, num_domains: usize, conflict: bool) -> (LabelRule, usize) {
    if !conflict {
        return (LabelRule::Full, m);
    }
    let half = num_domains.div_ceil(2);
    if m < half {
        (LabelRule::Core, m)
    } else {
        (LabelRule::Ring, m - half)
    }
}

/// Render one sample. The blob geometry comes from `rng`; appearance from
/// `style`; the mask from `rule`. Rendering the same geometry under Core and
/// Ring yields exactly disjoint masks.
pub fn render_sample(
    sty: &Style,
    rule: LabelRule,
    size: usize,
    domain: usize,
    id: &str,
    rng: &mut ChaCha8Rng,
) -> Sample {
    let s = size as f32;
    let cy = rng.gen_range(0.38..0.62) * s;
    let cx = rng.gen_range(0.38..0.62) * s;
    let r = rng.gen_range(0.18..0.28) * s;
    let ecc = 1.0 + rng.gen_range(0.0..sty.eccentricity);
    let (ry, rx) = (r * ecc, r / ecc);
    let phi = rng.gen_range(0.0..std::f32::consts::PI);
    let (sin, cos) = phi.sin_cos();

    // Background texture phases and frequencies.
    let fy = rng.gen_range(1.0f32..3.0);
    let fx = rng.gen_range(1.0f32..3.0);
    let py = rng.gen_range(0.0f32..1.0);
    let px = rng.gen_range(0.0f32..1.0);

    let mut image = Array3::<f32>::zeros((size, size, 3));
    let mut mask = Array2::<f32>::zeros((size, size));
    let tau = std::f32::consts::TAU;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f32 - cy;
            let dx = x as f32 - cx;
            let u = (cos * dy + sin * dx) / ry;
            let v = (-sin * dy + cos * dx) / rx;
            let rho = (u * u + v * v).sqrt();

            let tex = sty.texture_amp
                * ((tau * (fy * y as f32 / s + py)).sin() * (tau * (fx * x as f32 / s + px)).sin());
            let noise = sty.noise_sigma * (rng.gen::<f32>() - 0.5) * 2.0;
            for c in 0..3 {
                let base = if rho <= 1.0 {
                    // Radial gradient makes the core/ring boundary legible.
                    sty.fg_inner[c] * (1.0 - rho) + sty.fg_outer[c] * rho
                } else {
                    sty.background[c] + tex
                };
                image[[y, x, c]] = (base + noise).clamp(0.0, 1.0);
            }

            let inside_core = rho as f64 <= CORE_SCALE;
            let inside_blob = rho <= 1.0;
            let fg = match rule {
                LabelRule::Core => inside_core,
                LabelRule::Ring => inside_blob && !inside_core,
                LabelRule::Full => inside_blob,
            };
            mask[[y, x]] = if fg { 1.0 } else { 0.0 };
        }
    }
    Sample {
        image,
        mask,
        domain,
        id: id.to_string(),
    }
}

/// Generate M domain datasets; a pure function of the options.
pub fn make_synthetic(opts: &SyntheticOptions) -> Vec<DomainDataset> {
    assert!(opts.num_domains >= 1, "need at least one domain");
    (0..opts.num_domains)
        .map(|m| {
            let (rule, style_id) = domain_rule(m, opts.num_domains, opts.conflict);
            let sty = style(style_id);
            let samples: Vec<Sample> = (0..opts.n_per_domain)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                    rng.set_stream(((m as u64) << 32) | i as u64);
                    render_sample(&sty, rule, opts.size, m, &format!("d{m}_{i:04}"), &mut rng)
                })
                .collect();
            DomainDataset::new(
                format!("domain{m}"),
                samples,
                opts.seed.wrapping_add(m as u64),
            )
        })
        .collect()
}

/// Write datasets in the standard on-disk layout
/// (`<dir>/<name>/images/*.png`, `masks/*.png`, `split.json`).
pub fn write_datasets(dir: impl AsRef<Path>, datasets: &[DomainDataset]) -> Result<()> {
    let dir = dir.as_ref();
    for ds in datasets {
        let root = dir.join(&ds.name);
        let images = root.join("images");
        let masks = root.join("masks");
        std::fs::create_dir_all(&images)?;
        std::fs::create_dir_all(&masks)?;
        let mut split = std::collections::BTreeMap::new();
        for (i, s) in ds.samples.iter().enumerate() {
            let (h, w, _) = s.image.dim();
            let mut img = image::RgbImage::new(w as u32, h as u32);
            let mut msk = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [
                        (s.image[[y, x, 0]] * 255.0).round() as u8,
                        (s.image[[y, x, 1]] * 255.0).round() as u8,
                        (s.image[[y, x, 2]] * 255.0).round() as u8,
                    ];
                    img.put_pixel(x as u32, y as u32, image::Rgb(px));
                    let mv = if s.mask[[y, x]] > 0.5 { 255u8 } else { 0u8 };
                    msk.put_pixel(x as u32, y as u32, image::Luma([mv]));
                }
            }
            img.save(images.join(format!("{}.png", s.id)))?;
            msk.save(masks.join(format!("{}.png", s.id)))?;
            split.insert(s.id.clone(), ds.folds[i]);
        }
        std::fs::write(
            root.join("split.json"),
            serde_json::to_string_pretty(&split)?,
        )?;
    }
    Ok(())
}

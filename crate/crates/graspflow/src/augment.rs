//! Input pipeline: normalization plus three stochastic augmentations.
//!
//! Fixed stage order: symmetrize (independent vertical/horizontal flips),
//! multiplicative height scaling by a Gamma factor (optionally applied to the
//! grasp depth z as well, which is what keeps the label valid), additive
//! low-frequency noise from a bicubically upsampled Gaussian grid, and
//! finally normalization by the training split's pooled pixel statistics.
//! Multiplicative noise acts on physical heights, so it must precede
//! normalization; z stays in raw meters throughout.
//!
//! Each stage separates sampling from application so tests can force draws.
//! Per-example RNG streams are derived from (seed, image id, epoch), making
//! results independent of batch composition and processing order.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::data::{GraspExample, IMAGE_SIDE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub normalize: bool,
    pub symmetrize: bool,
    pub mult_pixels: bool,
    pub mult_adjust_z: bool,
    pub gp_noise: bool,
    /// Gamma shape; with shape·scale = 1 the factor concentrates around 1.
    pub gamma_shape: f64,
    /// Gamma scale.
    pub gamma_scale: f64,
    /// Standard deviation of the noise grid entries, meters.
    pub gp_sigma: f64,
    /// Noise grid side length before upsampling.
    pub gp_grid: usize,
    /// Probability that a given example receives grid noise.
    pub gp_prob: f64,
    /// Probability of each flip, drawn independently per axis.
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    /// Every stage enabled with the published parameters.
    fn default() -> AugmentConfig {
        AugmentConfig {
            normalize: true,
            symmetrize: true,
            mult_pixels: true,
            mult_adjust_z: true,
            gp_noise: true,
            gamma_shape: 1000.0,
            gamma_scale: 0.001,
            gp_sigma: 0.005,
            gp_grid: 8,
            gp_prob: 0.5,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Normalization only; every stochastic stage disabled.
    pub fn normalize_only() -> AugmentConfig {
        AugmentConfig {
            symmetrize: false,
            mult_pixels: false,
            mult_adjust_z: false,
            gp_noise: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mult_adjust_z && !self.mult_pixels {
            return Err(Error::Config(
                "mult_adjust_z scales z by the pixel factor and needs mult_pixels on".into(),
            ));
        }
        if self.gamma_shape <= 0.0 || self.gamma_scale <= 0.0 {
            return Err(Error::Config(format!(
                "gamma shape {} and scale {} must be positive",
                self.gamma_shape, self.gamma_scale
            )));
        }
        if self.gp_sigma <= 0.0 || self.gp_grid < 2 {
            return Err(Error::Config(format!(
                "noise grid needs positive sigma and side >= 2, got {} / {}",
                self.gp_sigma, self.gp_grid
            )));
        }
        for (name, p) in [("gp_prob", self.gp_prob), ("flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Pooled pixel statistics of the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn new(mean: f64, std: f64) -> Result<NormStats> {
        if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::Config(format!(
                "normalization needs finite mean and positive std, got ({mean}, {std})"
            )));
        }
        Ok(NormStats { mean, std })
    }
}

/// Mean and population standard deviation over all pixels of all images,
/// pooled. Single Welford pass in f64.
pub fn compute_norm_stats<I>(images: &[I]) -> Result<NormStats>
where
    I: AsRef<[f32]>,
{
    let mut count = 0u64;
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for image in images {
        for &px in image.as_ref() {
            let v = px as f64;
            count += 1;
            let d = v - mean;
            mean += d / count as f64;
            m2 += d * (v - mean);
        }
    }
    if count == 0 {
        return Err(Error::Config("no pixels to compute statistics over".into()));
    }
    let var = m2 / count as f64;
    if var <= 0.0 {
        return Err(Error::Config(
            "all training pixels are equal; normalization is undefined".into(),
        ));
    }
    NormStats::new(mean, var.sqrt())
}

/// (x − mean) / std, elementwise; z is deliberately left untouched by
/// normalization.
pub fn normalize(image: &mut [f32], stats: &NormStats) {
    for px in image {
        *px = ((*px as f64 - stats.mean) / stats.std) as f32;
    }
}

pub fn flip_vertical(image: &mut [f32], h: usize, w: usize) {
    debug_assert_eq!(image.len(), h * w);
    for row in 0..h / 2 {
        let (top, rest) = image.split_at_mut((h - 1 - row) * w);
        top[row * w..(row + 1) * w].swap_with_slice(&mut rest[..w]);
    }
}

pub fn flip_horizontal(image: &mut [f32], h: usize, w: usize) {
    debug_assert_eq!(image.len(), h * w);
    for row in image.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Applies the two flips from explicit decisions (for forced-draw tests).
pub fn apply_symmetrize(image: &mut [f32], h: usize, w: usize, flip_v: bool, flip_h: bool) {
    if flip_v {
        flip_vertical(image, h, w);
    }
    if flip_h {
        flip_horizontal(image, h, w);
    }
}

/// Independent vertical then horizontal flip, each with `flip_prob`. Returns
/// the (vertical, horizontal) decisions. Label and z are unaffected.
pub fn symmetrize<R: Rng>(
    image: &mut [f32],
    h: usize,
    w: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (bool, bool) {
    let flip_v = rng.gen_bool(cfg.flip_prob);
    let flip_h = rng.gen_bool(cfg.flip_prob);
    apply_symmetrize(image, h, w, flip_v, flip_h);
    (flip_v, flip_h)
}

/// One Gamma(shape, scale) draw; with shape 1000 and scale 0.001 the factor
/// has mean 1 and standard deviation sqrt(shape)·scale ≈ 0.0316.
pub fn sample_gamma_factor<R: Rng>(rng: &mut R, shape: f64, scale: f64) -> f64 {
    Gamma::new(shape, scale)
        .expect("validated gamma parameters")
        .sample(rng)
}

/// Scales every pixel by g; scales z by the same g only when `adjust_z`.
pub fn apply_mult(image: &mut [f32], z: &mut f32, g: f64, adjust_z: bool) {
    for px in image.iter_mut() {
        *px = (*px as f64 * g) as f32;
    }
    if adjust_z {
        *z = (*z as f64 * g) as f32;
    }
}

/// Multiplicative height augmentation; returns the sampled factor.
pub fn mult_augment<R: Rng>(
    image: &mut [f32],
    z: &mut f32,
    cfg: &AugmentConfig,
    rng: &mut R,
    adjust_z: bool,
) -> f64 {
    let g = sample_gamma_factor(rng, cfg.gamma_shape, cfg.gamma_scale);
    apply_mult(image, z, g, adjust_z);
    g
}

/// Catmull-Rom cubic convolution kernel (a = −0.5).
fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four-tap table for one axis: source indices (clamped to the border) and
/// kernel weights per destination index, under the half-pixel convention
/// src = (dst + 0.5)·(n_in/n_out) − 0.5.
fn tap_table(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let src = (d as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut idx = [0usize; 4];
            let mut wt = [0f64; 4];
            for k in 0..4 {
                let i = base as isize + k as isize - 1;
                idx[k] = i.clamp(0, n_in as isize - 1) as usize;
                wt[k] = cubic_kernel(t - (k as f64 - 1.0));
            }
            (idx, wt)
        })
        .collect()
}

/// Separable 1-D pass used by `bicubic_upsample`; exposed so tests can check
/// separability directly.
pub fn upsample_1d(values: &[f64], n_out: usize) -> Vec<f64> {
    tap_table(values.len(), n_out)
        .iter()
        .map(|(idx, wt)| (0..4).map(|k| values[idx[k]] * wt[k]).sum())
        .collect()
}

/// Bicubic upsampling of a square grid to `out`×`out` with Catmull-Rom
/// weights, half-pixel coordinates, and border samples clamped at the edges.
/// Linear in the grid by construction; reproduces constants because the
/// kernel weights sum to one.
pub fn bicubic_upsample(grid: &[f64], side: usize, out: usize) -> Vec<f64> {
    debug_assert_eq!(grid.len(), side * side);
    let taps = tap_table(side, out);
    // Rows first: side×side → side×out.
    let mut rows = vec![0.0; side * out];
    for r in 0..side {
        let src = &grid[r * side..(r + 1) * side];
        for (d, (idx, wt)) in taps.iter().enumerate() {
            rows[r * out + d] = (0..4).map(|k| src[idx[k]] * wt[k]).sum();
        }
    }
    // Then columns: side×out → out×out.
    let mut full = vec![0.0; out * out];
    for (d, (idx, wt)) in taps.iter().enumerate() {
        for c in 0..out {
            full[d * out + c] = (0..4).map(|k| rows[idx[k] * out + c] * wt[k]).sum();
        }
    }
    full
}

/// Adds an upsampled noise grid to a 32×32 image (for forced-grid tests).
pub fn apply_gp_grid(image: &mut [f32], grid: &[f64], side: usize) -> Result<()> {
    if image.len() != IMAGE_SIDE * IMAGE_SIDE {
        return Err(Error::dimension(
            "gp_augment",
            format!("image has {} elements, want {IMAGE_SIDE}x{IMAGE_SIDE}", image.len()),
        ));
    }
    let noise = bicubic_upsample(grid, side, IMAGE_SIDE);
    for (px, n) in image.iter_mut().zip(noise) {
        *px = (*px as f64 + n) as f32;
    }
    Ok(())
}

/// With probability `gp_prob`, adds low-frequency noise: an i.i.d.
/// Normal(0, gp_sigma²) grid upsampled bicubically to the image size.
/// Returns whether noise was applied.
pub fn gp_augment<R: Rng>(image: &mut [f32], cfg: &AugmentConfig, rng: &mut R) -> Result<bool> {
    if image.len() != IMAGE_SIDE * IMAGE_SIDE {
        return Err(Error::dimension(
            "gp_augment",
            format!("image has {} elements, want {IMAGE_SIDE}x{IMAGE_SIDE}", image.len()),
        ));
    }
    if !rng.gen_bool(cfg.gp_prob) {
        return Ok(false);
    }
    let normal = Normal::new(0.0, cfg.gp_sigma).expect("validated sigma");
    let grid: Vec<f64> = (0..cfg.gp_grid * cfg.gp_grid).map(|_| normal.sample(rng)).collect();
    apply_gp_grid(image, &grid, cfg.gp_grid)?;
    Ok(true)
}

/// Audit record of the stochastic decisions taken for one example.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AugmentTrace {
    pub flip_v: bool,
    pub flip_h: bool,
    pub mult_factor: Option<f64>,
    pub gp_applied: bool,
}

/// Full pipeline over one example: symmetrize → multiplicative → grid noise →
/// normalize, with disabled stages as identity. The label passes through
/// unchanged; the caller derives `rng` from (seed, image id, epoch).
pub fn apply_pipeline<R: Rng>(
    example: &GraspExample,
    cfg: &AugmentConfig,
    stats: &NormStats,
    rng: &mut R,
) -> Result<(Vec<f32>, f32, u8, AugmentTrace)> {
    cfg.validate()?;
    let mut image = example.image.clone();
    let mut z = example.z;
    let mut trace = AugmentTrace::default();
    if cfg.symmetrize {
        let (v, h) = symmetrize(&mut image, IMAGE_SIDE, IMAGE_SIDE, cfg, rng);
        trace.flip_v = v;
        trace.flip_h = h;
    }
    if cfg.mult_pixels {
        trace.mult_factor = Some(mult_augment(&mut image, &mut z, cfg, rng, cfg.mult_adjust_z));
    }
    if cfg.gp_noise {
        trace.gp_applied = gp_augment(&mut image, cfg, rng)?;
    }
    if cfg.normalize {
        normalize(&mut image, stats);
    }
    Ok((image, z, example.label, trace))
}

/// 16-bit PGM (P5, big-endian samples) with [lo, hi] mapped onto the full
/// sample range; used by the augmentation preview.
pub fn write_pgm16<P: AsRef<Path>>(
    path: P,
    image: &[f32],
    h: usize,
    w: usize,
    lo: f32,
    hi: f32,
) -> Result<()> {
    if image.len() != h * w {
        return Err(Error::dimension(
            "write_pgm16",
            format!("{} elements for {h}x{w}", image.len()),
        ));
    }
    if !(hi > lo) {
        return Err(Error::contract("write_pgm16", format!("empty range [{lo}, {hi}]")));
    }
    let mut out = Vec::with_capacity(32 + image.len() * 2);
    write!(&mut out, "P5\n{w} {h}\n65535\n")?;
    for &px in image {
        let unit = ((px - lo) / (hi - lo)).clamp(0.0, 1.0);
        let v = (unit as f64 * 65535.0).round() as u16;
        out.extend_from_slice(&v.to_be_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

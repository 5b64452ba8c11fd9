//! Multi-scale oval datasets: a 4x4 grid of anti-aliased ellipses on a
//! black background. In variant 1 all ovals of an image share one color
//! (up to a small jitter) and orientations are independent; in variant 2
//! they share one orientation and colors are independent.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ImageSet;
use crate::error::{Error, Result};

pub const GRID: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsdsParams {
    pub variant: u8,
    pub size: usize,
    /// Full major and minor axis lengths in pixels.
    pub axes: (f64, f64),
    /// Half-width of the uniform center jitter in pixels.
    pub jitter: f64,
    /// Standard deviation of per-oval color noise (variant 1).
    pub color_jitter: f64,
    /// Color channels are drawn from `[color_min, 1]`.
    pub color_min: f64,
    /// Subsamples per pixel edge for anti-aliasing.
    pub supersample: usize,
}

impl MsdsParams {
    pub fn new(variant: u8) -> Self {
        Self {
            variant,
            size: 32,
            axes: (5.0, 2.5),
            jitter: 1.0,
            color_jitter: 0.02,
            color_min: 0.2,
            supersample: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant != 1 && self.variant != 2 {
            return Err(Error::InvalidArgument(format!("variant must be 1 or 2, got {}", self.variant)));
        }
        if self.size == 0 || self.size % GRID != 0 {
            return Err(Error::InvalidArgument(format!("image size {} not divisible by {GRID}", self.size)));
        }
        let cell = (self.size / GRID) as f64;
        if self.axes.0 / 2.0 + self.jitter > cell / 2.0 || self.axes.1 > self.axes.0 || self.axes.1 <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "axes {:?} with jitter {} do not fit a {cell}-pixel cell",
                self.axes, self.jitter
            )));
        }
        if self.supersample == 0 || !(0.0..=1.0).contains(&self.color_min) {
            return Err(Error::InvalidArgument("bad supersampling or color range".into()));
        }
        Ok(())
    }
}

/// One rendered ellipse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OvalSpec {
    /// `(row, col)` in pixels, continuous coordinates.
    pub center: (f64, f64),
    /// Major-axis angle from the column axis, in `[0, π)`.
    pub orientation: f64,
    pub color: [f64; 3],
    pub axes: (f64, f64),
}

/// Generator for image `index` of the stream seeded by `seed`; independent
/// of how many other images are drawn.
fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn draw_ovals(params: &MsdsParams, seed: u64, index: u64) -> Vec<OvalSpec> {
    let mut rng = image_rng(seed, index);
    let cell = (params.size / GRID) as f64;
    let lo = params.color_min;
    let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.random_range(lo..=1.0));
    let global_color = color(&mut rng);
    let global_angle = rng.random_range(0.0..PI);
    let noise = Normal::new(0.0, params.color_jitter.max(0.0)).expect("finite std");
    let mut ovals = Vec::with_capacity(GRID * GRID);
    for r in 0..GRID {
        for c in 0..GRID {
            let jr = rng.random_range(-params.jitter..=params.jitter);
            let jc = rng.random_range(-params.jitter..=params.jitter);
            let center = ((r as f64 + 0.5) * cell + jr, (c as f64 + 0.5) * cell + jc);
            let (orientation, color) = if params.variant == 1 {
                let col = global_color.map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
                (rng.random_range(0.0..PI), col)
            } else {
                (global_angle, color(&mut rng))
            };
            ovals.push(OvalSpec { center, orientation, color, axes: params.axes });
        }
    }
    ovals
}

/// Renders ovals into an `L x L x 3` buffer of values in `[0, 1]`.
pub fn render(ovals: &[OvalSpec], size: usize, supersample: usize) -> Vec<f64> {
    let mut img = vec![0.0; size * size * 3];
    let s = supersample;
    let inv = 1.0 / (s * s) as f64;
    for o in ovals {
        let (a, b) = (o.axes.0 / 2.0, o.axes.1 / 2.0);
        let (sin, cos) = o.orientation.sin_cos();
        let r0 = (o.center.0 - a).floor().max(0.0) as usize;
        let r1 = ((o.center.0 + a).ceil() as usize).min(size);
        let c0 = (o.center.1 - a).floor().max(0.0) as usize;
        let c1 = ((o.center.1 + a).ceil() as usize).min(size);
        for i in r0..r1 {
            for j in c0..c1 {
                let mut hits = 0usize;
                for u in 0..s {
                    for v in 0..s {
                        let y = i as f64 + (u as f64 + 0.5) / s as f64 - o.center.0;
                        let x = j as f64 + (v as f64 + 0.5) / s as f64 - o.center.1;
                        let along = x * cos + y * sin;
                        let across = -x * sin + y * cos;
                        if (along / a).powi(2) + (across / b).powi(2) <= 1.0 {
                            hits += 1;
                        }
                    }
                }
                let cover = hits as f64 * inv;
                for ch in 0..3 {
                    let p = &mut img[(i * size + j) * 3 + ch];
                    *p = (*p + cover * o.color[ch]).min(1.0);
                }
            }
        }
    }
    img
}

pub fn quantize(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

/// `n` images with indices `start..start + n` of the stream `seed`.
pub fn gen_msds(params: &MsdsParams, n: usize, seed: u64) -> Result<ImageSet> {
    gen_msds_range(params, 0, n, seed)
}

pub fn gen_msds_range(params: &MsdsParams, start: usize, n: usize, seed: u64) -> Result<ImageSet> {
    params.validate()?;
    let dim = params.size * params.size * 3;
    let mut pixels = Array2::zeros((n, dim));
    for (k, mut row) in pixels.outer_iter_mut().enumerate() {
        let ovals = draw_ovals(params, seed, (start + k) as u64);
        let img = quantize(&render(&ovals, params.size, params.supersample));
        row.assign(&ndarray::ArrayView1::from(&img));
    }
    ImageSet::new(params.size, 3, pixels)
}

/// Estimated color of the oval in each grid cell: the mean of the pixels
/// whose brightness is within 90% of the brightest pixel of the cell.
pub fn oval_colors(image: &[f64], size: usize) -> Vec<[f64; 3]> {
    let cell = size / GRID;
    let mut out = Vec::with_capacity(GRID * GRID);
    for r in 0..GRID {
        for c in 0..GRID {
            let pixels: Vec<[f64; 3]> = (r * cell..(r + 1) * cell)
                .flat_map(|i| (c * cell..(c + 1) * cell).map(move |j| (i, j)))
                .map(|(i, j)| {
                    let k = (i * size + j) * 3;
                    [image[k], image[k + 1], image[k + 2]]
                })
                .collect();
            let bright = |p: &[f64; 3]| p.iter().sum::<f64>();
            let top = pixels.iter().map(bright).fold(f64::MIN, f64::max);
            let chosen: Vec<&[f64; 3]> = pixels.iter().filter(|p| bright(p) >= 0.9 * top).collect();
            let mut mean = [0.0; 3];
            for p in &chosen {
                for ch in 0..3 {
                    mean[ch] += p[ch] / chosen.len() as f64;
                }
            }
            out.push(mean);
        }
    }
    out
}

/// Within-image and across-image spread of oval colors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorStats {
    /// Per image: RMS over channels of the std across its ovals.
    pub within: Vec<f64>,
    /// RMS over channels of the std of per-image mean colors.
    pub across: f64,
}

impl ColorStats {
    pub fn median_within(&self) -> f64 {
        let mut v = self.within.clone();
        v.sort_by(f64::total_cmp);
        match v.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => v[n / 2],
            n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        }
    }
}

pub fn color_stats(per_image: &[Vec<[f64; 3]>]) -> ColorStats {
    let mut within = Vec::with_capacity(per_image.len());
    let mut means = Vec::with_capacity(per_image.len());
    for colors in per_image {
        let n = colors.len() as f64;
        let mean: [f64; 3] = std::array::from_fn(|ch| colors.iter().map(|c| c[ch]).sum::<f64>() / n);
        let var: f64 = (0..3)
            .map(|ch| colors.iter().map(|c| (c[ch] - mean[ch]).powi(2)).sum::<f64>() / n)
            .sum::<f64>()
            / 3.0;
        within.push(var.sqrt());
        means.push(mean);
    }
    let n = means.len() as f64;
    let grand: [f64; 3] = std::array::from_fn(|ch| means.iter().map(|m| m[ch]).sum::<f64>() / n);
    let across_var: f64 = (0..3)
        .map(|ch| means.iter().map(|m| (m[ch] - grand[ch]).powi(2)).sum::<f64>() / n)
        .sum::<f64>()
        / 3.0;
    ColorStats { within, across: across_var.sqrt() }
}

/// Circular variance `1 - |mean e^{2iθ}|` of axial angles.
pub fn axial_circular_variance(angles: &[f64]) -> f64 {
    let n = angles.len() as f64;
    let (s, c) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), &t| (s + (2.0 * t).sin(), c + (2.0 * t).cos()));
    1.0 - (s * s + c * c).sqrt() / n
}

/// Mean axial angle in `[0, π)`.
pub fn axial_mean(angles: &[f64]) -> f64 {
    let (s, c) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), &t| (s + (2.0 * t).sin(), c + (2.0 * t).cos()));
    (s.atan2(c) / 2.0).rem_euclid(PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(xs: &[f64]) -> f64 {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
    }

    /// Global/local split measured on the generator's own oval parameters.
    fn split(variant: u8) -> (f64, f64) {
        let p = MsdsParams::new(variant);
        let ovals: Vec<Vec<OvalSpec>> = (0..1000).map(|k| draw_ovals(&p, 5, k)).collect();
        let colors: Vec<Vec<[f64; 3]>> = ovals.iter().map(|o| o.iter().map(|s| s.color).collect()).collect();
        let cs = color_stats(&colors);
        let within_c = cs.within.iter().map(|w| w * w).sum::<f64>() / cs.within.len() as f64;
        let color_ratio = within_c / (cs.across * cs.across);
        let angles: Vec<Vec<f64>> = ovals.iter().map(|o| o.iter().map(|s| s.orientation).collect()).collect();
        let within_o = angles.iter().map(|a| axial_circular_variance(a)).sum::<f64>() / 1000.0;
        let means: Vec<f64> = angles.iter().map(|a| axial_mean(a)).collect();
        let across_o = axial_circular_variance(&means);
        (color_ratio, within_o / across_o)
    }

    #[test]
    fn variant_one_has_global_color() {
        let (color, orient) = split(1);
        assert!(color < 0.05, "color ratio {color}");
        assert!(orient > 0.5, "orientation ratio {orient}");
    }

    #[test]
    fn variant_two_has_global_orientation() {
        let (color, orient) = split(2);
        assert!(color > 0.5, "color ratio {color}");
        assert!(orient < 0.05, "orientation ratio {orient}");
    }

    #[test]
    fn variant_one_color_spread_within_jitter() {
        let p = MsdsParams::new(1);
        for k in 0..50 {
            let ovals = draw_ovals(&p, 1, k);
            for ch in 0..3 {
                let v: Vec<f64> = ovals.iter().map(|o| o.color[ch]).collect();
                assert!(var(&v).sqrt() <= 3.0 * p.color_jitter);
            }
            let angles: Vec<f64> = ovals.iter().map(|o| o.orientation).collect();
            assert!(angles.iter().all(|a| (0.0..PI).contains(a)));
        }
    }

    #[test]
    fn ovals_stay_inside_cells() {
        let p = MsdsParams::new(1);
        let cell = 8.0;
        for k in 0..100 {
            for (n, o) in draw_ovals(&p, 2, k).iter().enumerate() {
                let (r, c) = ((n / GRID) as f64 * cell, (n % GRID) as f64 * cell);
                assert!(o.center.0 - 2.5 >= r && o.center.0 + 2.5 <= r + cell);
                assert!(o.center.1 - 2.5 >= c && o.center.1 + 2.5 <= c + cell);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_and_antialiased() {
        let p = MsdsParams::new(2);
        let a = gen_msds(&p, 4, 9).unwrap();
        let b = gen_msds(&p, 4, 9).unwrap();
        assert_eq!(a.pixels, b.pixels);
        let tail = gen_msds_range(&p, 2, 2, 9).unwrap();
        assert_eq!(tail.pixels.row(0), a.pixels.row(2));
        // edges produce intermediate intensities
        let row = a.pixels.row(0);
        let distinct: std::collections::BTreeSet<u8> = row.iter().copied().collect();
        assert!(distinct.len() > 20);
    }

    #[test]
    fn oval_color_estimate_recovers_rendered_colors() {
        let p = MsdsParams::new(2);
        let ovals = draw_ovals(&p, 3, 0);
        let img = render(&ovals, 32, 4);
        for (est, o) in oval_colors(&img, 32).iter().zip(&ovals) {
            for ch in 0..3 {
                assert!((est[ch] - o.color[ch]).abs() < 0.05, "{est:?} vs {:?}", o.color);
            }
        }
    }

    #[test]
    fn bad_params_rejected() {
        let mut p = MsdsParams::new(3);
        assert!(p.validate().is_err());
        p.variant = 1;
        p.size = 30;
        assert!(p.validate().is_err());
        p.size = 32;
        p.axes = (7.5, 2.0);
        assert!(p.validate().is_err());
        assert_eq!(gen_msds(&MsdsParams::new(1), 0, 1).unwrap().len(), 0);
    }
}

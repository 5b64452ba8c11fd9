//! Read-only analyses of a trained hierarchical flow: receptive fields,
//! latent sweeps, scale mixing, cone-restricted inpainting and PSNR, plus
//! the quadrant-purity score for 2-D latents.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_grid, write_png, Dequantizer, ImageSet, Noise, BINS};
use crate::error::{Error, Result};
use crate::lattice::{LatentIndex, LatticeSpec, PixelRegion};
use crate::model::{FlowModel, LatentPyramid, RgFlowModel, TemperatureSchedule};
use crate::nn::{Binding, Real, Tape, Var};

/// Reported in place of `+∞` for identical images.
pub const PSNR_MAX: f64 = 100.0;

/// Rows evaluated per derivative sweep.
const SWEEP_CHUNK: usize = 128;

/// Monte Carlo receptive field of one latent: `E_z |∂G(z)/∂z_l|` summed
/// over channels, on the `L x L` pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceptiveField {
    pub l: LatentIndex,
    pub map: Array2<f64>,
    pub strength: f64,
}

/// Midpoint-dequantized model-space rows for images `rows` of `set`.
pub fn image_rows<T: Real>(set: &ImageSet, rows: &[usize]) -> Array2<T> {
    let x8 = set.pixels.select(Axis(0), rows);
    Dequantizer::default().preprocess::<T, ChaCha8Rng>(x8.view(), Noise::Midpoint).0
}

/// Tangents `∂G(z_r)/∂z_{slot_r}` for each row `r` of `z`: one forward
/// derivative pass covers a whole batch of (sample, latent) pairs.
pub fn decode_tangents<T: Real>(model: &RgFlowModel<T>, z: &LatentPyramid<T>, slots: &[usize]) -> Result<Array2<T>> {
    let spec = &model.spec;
    if slots.len() != z.batch() {
        return Err(Error::shape(format!("{} slots", z.batch()), format!("{}", slots.len())));
    }
    let offsets = spec.latent_offsets();
    let counts = spec.latent_counts();
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &model.store);
    let leaves: Vec<Var<T>> = z.levels.iter().map(|l| tape.leaf(l.clone())).collect();
    let mut seeds: Vec<Array2<T>> = counts.iter().map(|&k| Array2::zeros((z.batch(), k))).collect();
    for (r, &slot) in slots.iter().enumerate() {
        if slot >= spec.dim() {
            return Err(Error::InvalidAddress(format!("latent slot {slot}")));
        }
        let h = (0..counts.len()).rev().find(|&h| offsets[h] <= slot).expect("offset 0 exists");
        seeds[h][[r, slot - offsets[h]]] = T::one();
    }
    let (x, _) = model.decode_var(&b, &leaves)?;
    let pairs: Vec<(&Var<T>, Array2<T>)> = leaves.iter().zip(seeds).collect();
    let tangent = tape.jvp(&pairs, &[&x]).pop().flatten();
    Ok(tangent.unwrap_or_else(|| Array2::zeros((z.batch(), spec.dim()))))
}

fn channel_norm_map<T: Real>(spec: &LatticeSpec, row: ndarray::ArrayView1<'_, T>, into: &mut Array2<f64>, weight: f64) {
    let c = spec.channels;
    for i in 0..spec.size {
        for j in 0..spec.size {
            let base = (i * spec.size + j) * c;
            let s: f64 = (0..c).map(|k| row[base + k].as_f64().abs()).sum();
            into[[i, j]] += weight * s;
        }
    }
}

fn prior_draws<T: Real>(model: &RgFlowModel<T>, n: usize, seed: u64) -> Result<LatentPyramid<T>> {
    let temps = TemperatureSchedule::uniform(1.0, model.spec.num_levels())?;
    model.sample_latents(&temps, n, seed)
}

fn repeat_rows<T: Real>(z: &LatentPyramid<T>, rows: &[usize]) -> LatentPyramid<T> {
    LatentPyramid {
        levels: z.levels.iter().map(|l| l.select(Axis(0), rows)).collect(),
    }
}

pub fn receptive_field<T: Real>(model: &RgFlowModel<T>, l: LatentIndex, n_samples: usize, seed: u64) -> Result<ReceptiveField> {
    let spec = &model.spec;
    let slot = spec.flat_index(l)?;
    let n = n_samples.max(1);
    let z = prior_draws(model, n, seed)?;
    let mut map = Array2::zeros((spec.size, spec.size));
    for start in (0..n).step_by(SWEEP_CHUNK) {
        let end = (start + SWEEP_CHUNK).min(n);
        let zc = z.rows(start, end);
        let t = decode_tangents(model, &zc, &vec![slot; end - start])?;
        for row in t.outer_iter() {
            channel_norm_map(spec, row, &mut map, 1.0 / n as f64);
        }
    }
    let strength = map.mean().unwrap_or(0.0);
    Ok(ReceptiveField { l, map, strength })
}

/// Strength (pixel mean of the receptive field) of every latent on level
/// `h`, in flat order, from `n_samples` shared prior draws.
pub fn level_strengths<T: Real>(model: &RgFlowModel<T>, h: usize, n_samples: usize, seed: u64) -> Result<Vec<f64>> {
    let spec = &model.spec;
    if h >= spec.num_levels() {
        return Err(Error::InvalidAddress(format!("level {h}")));
    }
    let n = n_samples.max(1);
    let z = prior_draws(model, n, seed)?;
    let (offset, count) = (spec.latent_offsets()[h], spec.latent_counts()[h]);
    let pairs: Vec<(usize, usize)> = (0..count).flat_map(|k| (0..n).map(move |s| (k, s))).collect();
    let mut strengths = vec![0.0; count];
    let norm = 1.0 / (n * spec.size * spec.size) as f64;
    for chunk in pairs.chunks(SWEEP_CHUNK) {
        let rows: Vec<usize> = chunk.iter().map(|&(_, s)| s).collect();
        let slots: Vec<usize> = chunk.iter().map(|&(k, _)| offset + k).collect();
        let t = decode_tangents(model, &repeat_rows(&z, &rows), &slots)?;
        for (row, &(k, _)) in t.outer_iter().zip(chunk) {
            strengths[k] += norm * row.iter().map(|v| v.as_f64().abs()).sum::<f64>();
        }
    }
    Ok(strengths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
}

/// Logarithmically spaced bins spanning the positive strengths; zero
/// strengths fall in the first bin.
pub fn rf_histogram(strengths: &[f64], bins: usize) -> Histogram {
    let positive: Vec<f64> = strengths.iter().copied().filter(|&s| s > 0.0).collect();
    if strengths.is_empty() || bins == 0 {
        return Histogram { bins: Vec::new() };
    }
    let lo = positive.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = positive.iter().copied().fold(0.0, f64::max);
    if positive.is_empty() || lo == hi {
        let v = if positive.is_empty() { 0.0 } else { lo };
        return Histogram {
            bins: vec![HistogramBin { lower: v, upper: v, count: strengths.len() }],
        };
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    let width = (lhi - llo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|k| HistogramBin {
            lower: (llo + k as f64 * width).exp(),
            upper: (llo + (k + 1) as f64 * width).exp(),
            count: 0,
        })
        .collect();
    for &s in strengths {
        let k = if s <= 0.0 { 0 } else { (((s.ln() - llo) / width) as usize).min(bins - 1) };
        out[k].count += 1;
    }
    Histogram { bins: out }
}

/// Decodes `z` (one row) once per value, with slot `l` set to that value.
pub fn vary_latent<T: Real>(model: &RgFlowModel<T>, z: &LatentPyramid<T>, l: LatentIndex, values: &[f64]) -> Result<Array2<T>> {
    let spec = &model.spec;
    if z.batch() != 1 {
        return Err(Error::shape("one latent row", format!("{}", z.batch())));
    }
    let slot = spec.flat_index(l)? - spec.latent_offsets()[l.h];
    let mut batch = repeat_rows(z, &vec![0; values.len()]);
    for (r, &v) in values.iter().enumerate() {
        batch.levels[l.h][[r, slot]] = T::of(v);
    }
    Ok(model.decode(&batch)?.0)
}

/// Level `h` from `a` when `h >= theta`, from `b` otherwise.
pub fn splice<T: Real>(a: &LatentPyramid<T>, b: &LatentPyramid<T>, theta: usize) -> LatentPyramid<T> {
    LatentPyramid {
        levels: a
            .levels
            .iter()
            .zip(&b.levels)
            .enumerate()
            .map(|(h, (za, zb))| if h >= theta { za.clone() } else { zb.clone() })
            .collect(),
    }
}

/// Large scales from `xa`, small scales from `xb`; `theta` runs from 0
/// (all of `xa`) to the number of levels (all of `xb`).
pub fn mix_hyperbolic<T: Real>(model: &RgFlowModel<T>, xa: &Array2<T>, xb: &Array2<T>, theta: usize) -> Result<Array2<T>> {
    if theta > model.spec.num_levels() {
        return Err(Error::InvalidArgument(format!(
            "threshold {theta} outside 0..={}",
            model.spec.num_levels()
        )));
    }
    let (za, _) = model.encode(xa)?;
    let (zb, _) = model.encode(xb)?;
    if za.batch() != zb.batch() {
        return Err(Error::shape(format!("{} rows", za.batch()), format!("{}", zb.batch())));
    }
    Ok(model.decode(&splice(&za, &zb, theta))?.0)
}

/// `decode(λ encode(xa) + (1 - λ) encode(xb))`
pub fn mix_linear<T: Real>(model: &RgFlowModel<T>, xa: &Array2<T>, xb: &Array2<T>, lambda: f64) -> Result<Array2<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("λ = {lambda} outside [0, 1]")));
    }
    let (za, _) = model.encode(xa)?;
    let (zb, _) = model.encode(xb)?;
    let (la, lb) = (T::of(lambda), T::of(1.0 - lambda));
    let z = LatentPyramid {
        levels: za.levels.iter().zip(&zb.levels).map(|(a, b)| a * la + b * lb).collect(),
    };
    Ok(model.decode(&z)?.0)
}

/// `10 log10(1 / MSE)` for intensities in `[0, 1]`.
pub fn psnr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape(format!("{} values", x.len()), format!("{}", y.len())));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_MAX);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_MAX))
}

/// Writes a non-negative map as an 8-bit grayscale image scaled to its
/// maximum.
pub fn write_heatmap(path: &Path, map: &Array2<f64>) -> Result<()> {
    let max = map.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let px: Vec<u8> = map.iter().map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8).collect();
    write_png(path, &px, map.ncols(), map.nrows(), 1)
}

/// How the latent plane is cut into four regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrants {
    /// Sign quadrants, bounded by the coordinate axes.
    Signs,
    /// Sectors centred on the four half-axes, bounded by the diagonals.
    /// A product Laplacian has its heavy tails along these half-axes.
    Axes,
}

impl Quadrants {
    fn of(self, z0: f64, z1: f64) -> usize {
        match self {
            Self::Signs => usize::from(z0 >= 0.0) + 2 * usize::from(z1 >= 0.0),
            Self::Axes if z0.abs() >= z1.abs() => usize::from(z0 >= 0.0),
            Self::Axes => 2 + usize::from(z1 >= 0.0),
        }
    }
}

/// Fraction of points whose latent quadrant's majority label is their own.
pub fn quadrant_purity(latents: &Array2<f64>, labels: &[usize], split: Quadrants) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut counts = vec![vec![0usize; classes]; 4];
    for (row, &label) in latents.outer_iter().zip(labels) {
        counts[split.of(row[0], row[1])][label] += 1;
    }
    counts.iter().map(|c| c.iter().copied().max().unwrap_or(0)).sum::<usize>() as f64 / n as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InpaintArm {
    /// Free latents are the region's inference cone.
    Cone,
    /// Free latents are a seeded random subset of the same size.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintConfig {
    /// Prior draws for the free latents; the most likely one starts Adam.
    pub inits: usize,
    pub max_steps: usize,
    pub lr: f64,
    /// Stop when the log-likelihood gains less than `tol` over `window`
    /// steps.
    pub window: usize,
    pub tol: f64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            inits: 200,
            max_steps: 2000,
            lr: 0.05,
            window: 50,
            tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InpaintResult {
    /// The corrupted image with the region replaced by the generated patch.
    pub pixels: Vec<u8>,
    /// Model-space composite at the best iterate.
    pub composite: Array2<f64>,
    pub log_prob: f64,
    pub steps: usize,
    pub free: Vec<usize>,
    /// Flat latents at the best iterate.
    pub latents: Array2<f64>,
    /// False when the step budget ran out before the gain fell below `tol`.
    pub converged: bool,
}

/// Latent slots that `arm` lets the optimizer change for `region`.
pub fn free_latents(spec: &LatticeSpec, region: PixelRegion, arm: InpaintArm, seed: u64) -> Result<Vec<usize>> {
    let cone = spec.inference_cone(region)?;
    match arm {
        InpaintArm::Cone => Ok(cone.latents.clone()),
        InpaintArm::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample_indices(&mut rng, spec.dim(), cone.latents.len()).into_vec();
            picked.sort_unstable();
            Ok(picked)
        }
    }
}

/// Value columns of the pixels in `region`.
fn region_columns(spec: &LatticeSpec, region: PixelRegion) -> Vec<usize> {
    let mut cols = Vec::with_capacity(region.area() * spec.channels);
    for i in region.row..region.row + region.height {
        for j in region.col..region.col + region.width {
            for c in 0..spec.channels {
                cols.push((i * spec.size + j) * spec.channels + c);
            }
        }
    }
    cols
}

/// Builds `B x D` rows that take column `k` from `base` unless `k` is listed
/// in `replaced`, in which case it comes from the matching column of
/// `patch`.
fn paste_map(dim: usize, replaced: &[usize], patch_cols: usize, patch_index: impl Fn(usize, usize) -> usize) -> std::sync::Arc<[usize]> {
    let mut map: Vec<usize> = (0..dim).collect();
    for (pos, &k) in replaced.iter().enumerate() {
        map[k] = dim + patch_index(pos, k);
    }
    debug_assert!(map.iter().all(|&m| m < dim + patch_cols));
    map.into()
}

struct Objective<'a, T: Real> {
    model: &'a RgFlowModel<T>,
    z_fixed: Array2<T>,
    x_corrupt: Array2<T>,
    free_map: std::sync::Arc<[usize]>,
    pixel_map: std::sync::Arc<[usize]>,
    level_maps: Vec<std::sync::Arc<[usize]>>,
    /// Model-space range of valid pixels; the generated patch is clamped
    /// into it so that far-off draws still give a finite objective.
    range: (T, T),
}

impl<'a, T: Real> Objective<'a, T> {
    fn new(model: &'a RgFlowModel<T>, x_corrupt: &Array2<T>, z_fixed: Array2<T>, free: &[usize], region: PixelRegion) -> Self {
        let spec = &model.spec;
        let dim = spec.dim();
        let cols = region_columns(spec, region);
        let deq = Dequantizer::default();
        let offsets = spec.latent_offsets();
        let level_maps = spec
            .latent_counts()
            .iter()
            .zip(&offsets)
            .map(|(&k, &o)| (o..o + k).collect::<Vec<usize>>().into())
            .collect();
        Self {
            model,
            z_fixed,
            x_corrupt: x_corrupt.clone(),
            free_map: paste_map(dim, free, free.len(), |pos, _| pos),
            pixel_map: paste_map(dim, &cols, dim, |_, k| k),
            level_maps,
            range: (T::of(deq.forward_value(0.0).0), T::of(deq.forward_value(BINS).0)),
        }
    }

    /// Composite image and its log-likelihood for free-latent rows `zf`.
    fn eval(&self, b: &Binding<'_, T>, zf: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let tape = b.tape();
        let rows = zf.shape().0;
        let fixed = tape.constant(broadcast_rows(&self.z_fixed, rows));
        let z = tape.gather_cols(&tape.concat_cols(&fixed, zf), &self.free_map);
        let zs: Vec<Var<T>> = self.level_maps.iter().map(|m| tape.gather_cols(&z, m)).collect();
        let (xg, _) = self.model.decode_var(b, &zs)?;
        let xg = tape.clamp(&xg, self.range.0, self.range.1);
        let base = tape.constant(broadcast_rows(&self.x_corrupt, rows));
        let xf = tape.gather_cols(&tape.concat_cols(&base, &xg), &self.pixel_map);
        let lp = self.model.log_prob_var(b, &xf)?;
        Ok((xf, lp))
    }
}

fn broadcast_rows<T: Real>(row: &Array2<T>, n: usize) -> Array2<T> {
    row.broadcast((n, row.ncols())).expect("single row").to_owned()
}

/// Fills `region` of the image `x8` by maximizing the likelihood of the
/// composite over the latents `free`, everything else fixed at the
/// encoding of `x8`. Only region pixels of the output can differ from
/// `x8`.
pub fn inpaint<T: Real>(
    model: &RgFlowModel<T>,
    x8: &[u8],
    region: PixelRegion,
    free: &[usize],
    config: &InpaintConfig,
    seed: u64,
) -> Result<InpaintResult> {
    let spec = &model.spec;
    if x8.len() != spec.dim() {
        return Err(Error::shape(format!("{} pixel values", spec.dim()), format!("{}", x8.len())));
    }
    if region.row + region.height > spec.size || region.col + region.width > spec.size {
        return Err(Error::InvalidArgument(format!("region {region} leaves the {0}x{0} image", spec.size)));
    }
    let deq = Dequantizer::default();
    let row8 = Array2::from_shape_vec((1, spec.dim()), x8.to_vec()).expect("one row");
    let x = deq.preprocess::<T, ChaCha8Rng>(row8.view(), Noise::Midpoint).0;
    let (z0, _) = model.encode(&x)?;
    let z0 = z0.to_flat();
    let to_f64 = |a: &Array2<T>| a.mapv(|v| v.as_f64());
    if region.is_empty() || free.is_empty() {
        let lp = model.log_prob(&x)?[0].as_f64();
        return Ok(InpaintResult {
            pixels: x8.to_vec(),
            composite: to_f64(&x),
            log_prob: lp,
            steps: 0,
            free: free.to_vec(),
            latents: to_f64(&z0),
            converged: true,
        });
    }
    let objective = Objective::new(model, &x, z0.clone(), free, region);

    // Screen prior draws for the starting point.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inits = config.inits.max(1);
    let candidates = Array2::from_shape_simple_fn((inits, free.len()), || T::of(model.config.prior.sample(&mut rng, 1.0)));
    let mut best_start = (f64::NEG_INFINITY, 0);
    for start in (0..inits).step_by(SWEEP_CHUNK) {
        let end = (start + SWEEP_CHUNK).min(inits);
        let tape = Tape::no_grad();
        let b = Binding::frozen(&tape, &model.store);
        let (_, lp) = objective.eval(&b, &tape.constant(candidates.slice(s![start..end, ..]).to_owned()))?;
        for (k, v) in lp.value().iter().enumerate() {
            if v.as_f64() > best_start.0 {
                best_start = (v.as_f64(), start + k);
            }
        }
    }
    let mut zf: Array1<f64> = candidates.row(best_start.1).mapv(|v| v.as_f64());

    // Adam ascent on the composite log-likelihood.
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = Array1::<f64>::zeros(free.len());
    let mut v = Array1::<f64>::zeros(free.len());
    let mut history: Vec<f64> = Vec::new();
    let mut best = (f64::NEG_INFINITY, zf.clone());
    let mut converged = false;
    let mut steps = 0;
    for t in 1..=config.max_steps {
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &model.store);
        let leaf = tape.leaf(zf.mapv(T::of).insert_axis(Axis(0)));
        let (_, lp) = objective.eval(&b, &leaf)?;
        let value = lp.value()[[0, 0]].as_f64();
        if !value.is_finite() {
            break;
        }
        if value > best.0 {
            best = (value, zf.clone());
        }
        history.push(best.0);
        if history.len() > config.window && best.0 - history[history.len() - 1 - config.window] < config.tol {
            converged = true;
            break;
        }
        let loss = tape.scale(&lp, T::of(-1.0));
        let grads = tape.backward(&loss)?;
        let g = grads.get(&leaf).map(|g| g.row(0).mapv(|x| x.as_f64())).unwrap_or_else(|| Array1::zeros(free.len()));
        m = &m * b1 + &g * (1.0 - b1);
        v = &v * b2 + &(&g * &g) * (1.0 - b2);
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        zf = &zf - &(m.mapv(|x| x / c1) / (v.mapv(|x| (x / c2).sqrt()) + eps) * config.lr);
        steps = t;
    }

    let tape = Tape::no_grad();
    let b = Binding::frozen(&tape, &model.store);
    let (xf, lp) = objective.eval(&b, &tape.constant(best.1.mapv(T::of).insert_axis(Axis(0))))?;
    let generated = deq.postprocess(xf.value());
    let mut pixels = x8.to_vec();
    for k in region_columns(spec, region) {
        pixels[k] = generated[[0, k]];
    }
    let mut latents = to_f64(&z0);
    for (pos, &k) in free.iter().enumerate() {
        latents[[0, k]] = best.1[pos];
    }
    Ok(InpaintResult {
        pixels,
        composite: to_f64(xf.value()),
        log_prob: lp.value()[[0, 0]].as_f64(),
        steps,
        free: free.to_vec(),
        latents,
        converged,
    })
}

/// Replaces `region` with seeded uniform noise.
pub fn corrupt(spec: &LatticeSpec, x8: &[u8], region: PixelRegion, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x8.to_vec();
    for k in region_columns(spec, region) {
        out[k] = rng.random();
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub arm: InpaintArm,
    pub psnr: f64,
    pub log_prob: f64,
    pub free: usize,
    pub steps: usize,
    pub converged: bool,
    #[serde(skip)]
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub index: usize,
    pub region: String,
    pub outside_region_unchanged: bool,
    pub arms: Vec<ArmOutcome>,
    #[serde(skip)]
    pub truth: Vec<u8>,
    #[serde(skip)]
    pub corrupted: Vec<u8>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: InpaintArm,
    pub mean_psnr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InpaintReport {
    pub images: Vec<ImageOutcome>,
    pub arms: Vec<ArmSummary>,
    /// Images where the cone arm scores a strictly higher PSNR than the
    /// random arm (when both ran).
    pub cone_wins: Option<usize>,
}

impl InpaintReport {
    /// Rows: truth, corrupted, then one row per arm.
    pub fn write_grid<T: Real>(&self, path: &Path, model: &RgFlowModel<T>) -> Result<()> {
        let spec = &model.spec;
        let n = self.images.len();
        if n == 0 {
            return Ok(());
        }
        let rows = 2 + self.images[0].arms.len();
        let mut px = Array2::<u8>::zeros((rows * n, spec.dim()));
        for (k, img) in self.images.iter().enumerate() {
            px.row_mut(k).assign(&ndarray::ArrayView1::from(&img.truth));
            px.row_mut(n + k).assign(&ndarray::ArrayView1::from(&img.corrupted));
            for (a, arm) in img.arms.iter().enumerate() {
                px.row_mut((2 + a) * n + k).assign(&ndarray::ArrayView1::from(&arm.pixels));
            }
        }
        write_grid(path, &ImageSet::new(spec.size, spec.channels, px)?, n)
    }
}

fn unit(x8: &[u8]) -> Vec<f64> {
    x8.iter().map(|&v| v as f64 / 255.0).collect()
}

/// Corrupts each image in a region (fixed, or a random `size x size`
/// square), inpaints it under every arm and scores PSNR against the truth.
#[allow(clippy::too_many_arguments)]
pub fn inpaint_benchmark<T: Real>(
    model: &RgFlowModel<T>,
    set: &ImageSet,
    indices: &[usize],
    fixed_region: Option<PixelRegion>,
    size: usize,
    arms: &[InpaintArm],
    config: &InpaintConfig,
    seed: u64,
) -> Result<InpaintReport> {
    let spec = &model.spec;
    if size > spec.size {
        return Err(Error::InvalidArgument(format!("region edge {size} exceeds the image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(indices.len());
    for &index in indices {
        let region = fixed_region.unwrap_or_else(|| {
            let r = rng.random_range(0..=spec.size - size);
            let c = rng.random_range(0..=spec.size - size);
            PixelRegion::new(r, c, size, size)
        });
        let img_seed: u64 = rng.random();
        let truth = set.image(index).to_vec();
        let corrupted = corrupt(spec, &truth, region, img_seed);
        let cols = region_columns(spec, region);
        let mut outcomes = Vec::new();
        let mut unchanged = true;
        for &arm in arms {
            let free = free_latents(spec, region, arm, img_seed ^ 0x5eed)?;
            let res = inpaint(model, &corrupted, region, &free, config, img_seed)?;
            unchanged &= res
                .pixels
                .iter()
                .zip(&corrupted)
                .enumerate()
                .all(|(k, (a, b))| a == b || cols.binary_search(&k).is_ok());
            outcomes.push(ArmOutcome {
                arm,
                psnr: psnr(&unit(&res.pixels), &unit(&truth))?,
                log_prob: res.log_prob,
                free: free.len(),
                steps: res.steps,
                converged: res.converged,
                pixels: res.pixels,
            });
        }
        images.push(ImageOutcome {
            index,
            region: region.to_string(),
            outside_region_unchanged: unchanged,
            arms: outcomes,
            truth,
            corrupted,
        });
    }
    let summaries = arms
        .iter()
        .enumerate()
        .map(|(a, &arm)| ArmSummary {
            arm,
            mean_psnr: images.iter().map(|i| i.arms[a].psnr).sum::<f64>() / images.len().max(1) as f64,
        })
        .collect();
    let cone = arms.iter().position(|&a| a == InpaintArm::Cone);
    let random = arms.iter().position(|&a| a == InpaintArm::Random);
    let cone_wins = cone.zip(random).map(|(c, r)| images.iter().filter(|i| i.arms[c].psnr > i.arms[r].psnr).count());
    Ok(InpaintReport {
        images,
        arms: summaries,
        cone_wins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_msds, MsdsParams};
    use crate::model::ModelConfig;

    fn identity(size: usize, channels: usize) -> RgFlowModel<f64> {
        RgFlowModel::new(ModelConfig::tiny(size, 4, channels), 0).unwrap()
    }

    fn random(size: usize, channels: usize, gain: f64) -> RgFlowModel<f64> {
        let mut m = identity(size, channels);
        m.randomize(3, gain);
        m
    }

    #[test]
    fn identity_receptive_field_is_a_home_spike() {
        let m = identity(8, 1);
        for flat in [0, 17, 63] {
            let l = m.spec.latent_index(flat).unwrap();
            let rf = receptive_field(&m, l, 4, 1).unwrap();
            let (hi, hj) = m.spec.home_pixel(l);
            for ((i, j), &v) in rf.map.indexed_iter() {
                let want = if (i, j) == (hi, hj) { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12, "{flat} ({i},{j}) {v}");
            }
            assert!((rf.strength - 1.0 / 64.0).abs() < 1e-12);
        }
        let all = level_strengths(&m, 0, 2, 0).unwrap();
        assert!(all.iter().all(|&s| (s - 1.0 / 64.0).abs() < 1e-12));
        assert_eq!(rf_histogram(&all, 10).bins.len(), 1);
    }

    #[test]
    fn receptive_field_stays_in_generation_cone() {
        let m = random(16, 1, 0.05);
        for flat in [3, 70, 200, 250, 255] {
            let l = m.spec.latent_index(flat).unwrap();
            let rf = receptive_field(&m, l, 3, 2).unwrap();
            let cone = m.spec.generation_cone(l).unwrap();
            for ((i, j), &v) in rf.map.indexed_iter() {
                if !cone.contains_pixel(i, j) {
                    assert_eq!(v, 0.0, "latent {flat} leaks to ({i},{j})");
                }
            }
            assert!(rf.map.iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn batched_strengths_match_single_fields() {
        let m = random(8, 1, 0.05);
        let strengths = level_strengths(&m, 1, 3, 5).unwrap();
        let offset = m.spec.latent_offsets()[1];
        for k in [0, strengths.len() - 1] {
            let l = m.spec.latent_index(offset + k).unwrap();
            let rf = receptive_field(&m, l, 3, 5).unwrap();
            assert!((rf.strength - strengths[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn tangents_match_finite_differences() {
        let m = random(8, 1, 0.05);
        let z = prior_draws(&m, 1, 4).unwrap();
        let slot = 40;
        let t = decode_tangents(&m, &z, &[slot]).unwrap();
        let mut flat = z.to_flat();
        let eps = 1e-6;
        flat[[0, slot]] += eps;
        let up = m.decode(&LatentPyramid::from_flat(&m.spec, &flat).unwrap()).unwrap().0;
        flat[[0, slot]] -= 2.0 * eps;
        let down = m.decode(&LatentPyramid::from_flat(&m.spec, &flat).unwrap()).unwrap().0;
        let fd = (up - down) / (2.0 * eps);
        assert!((&fd - &t).iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn histogram_bins_are_logarithmic() {
        let h = rf_histogram(&[1e-4, 3e-4, 5e-3, 1e-1, 0.0], 3);
        assert_eq!(h.bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![3, 1, 1]);
        assert!((h.bins[1].lower - 1e-4f64.powf(2.0 / 3.0) * 1e-1f64.powf(1.0 / 3.0)).abs() < 1e-12);
        assert!(rf_histogram(&[], 4).bins.is_empty());
    }

    #[test]
    fn vary_latent_keeps_pixels_outside_the_cone() {
        let m = random(16, 1, 0.05);
        let z = prior_draws(&m, 1, 7).unwrap();
        let l = m.spec.latent_index(100).unwrap();
        let xs = vary_latent(&m, &z, l, &[-2.0, 0.0, 3.0]).unwrap();
        let cone = m.spec.generation_cone(l).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                if !cone.contains_pixel(i, j) {
                    assert_eq!(xs[[0, i * 16 + j]], xs[[2, i * 16 + j]]);
                }
            }
        }
        let slot = m.spec.flat_index(l).unwrap() - m.spec.latent_offsets()[l.h];
        let same = vary_latent(&m, &z, l, &[z.levels[l.h][[0, slot]].as_f64()]).unwrap();
        assert_eq!(same, m.decode(&z).unwrap().0);
    }

    #[test]
    fn mixing_identities() {
        let m = random(16, 3, 0.03);
        let set = gen_msds(&MsdsParams { size: 16, ..MsdsParams::new(1) }, 2, 3).unwrap_or_else(|_| {
            let px = Array2::from_shape_fn((2, 16 * 16 * 3), |(r, c)| ((r * 31 + c * 7) % 256) as u8);
            ImageSet::new(16, 3, px).unwrap()
        });
        let xa = image_rows::<f64>(&set, &[0]);
        let xb = image_rows::<f64>(&set, &[1]);
        let deq = Dequantizer::default();
        let top = m.spec.num_levels();
        for theta in 0..=top {
            let aa = mix_hyperbolic(&m, &xa, &xa, theta).unwrap();
            assert_eq!(deq.postprocess(&aa), deq.postprocess(&xa), "theta {theta}");
        }
        let a = mix_hyperbolic(&m, &xa, &xb, 0).unwrap();
        let b = mix_hyperbolic(&m, &xa, &xb, top).unwrap();
        assert!((&a - &xa).iter().all(|d| d.abs() < 1e-8));
        assert!((&b - &xb).iter().all(|d| d.abs() < 1e-8));
        assert_eq!(deq.postprocess(&a), deq.postprocess(&xa));
        assert_eq!(deq.postprocess(&b), deq.postprocess(&xb));
        let l1 = mix_linear(&m, &xa, &xb, 1.0).unwrap();
        assert!((&l1 - &xa).iter().all(|d| d.abs() < 1e-8));
        assert!(mix_linear(&m, &xa, &xb, 1.5).is_err());
        assert!(mix_hyperbolic(&m, &xa, &xb, top + 1).is_err());
    }

    #[test]
    fn splice_takes_levels_by_threshold() {
        let spec = LatticeSpec::new(8, 4, 1).unwrap();
        let mut a = LatentPyramid::<f64>::zeros(&spec, 1);
        let b = LatentPyramid::<f64>::zeros(&spec, 1);
        for l in &mut a.levels {
            l.fill(1.0);
        }
        for theta in 0..=spec.num_levels() {
            let s = splice(&a, &b, theta);
            for (h, lvl) in s.levels.iter().enumerate() {
                let want = if h >= theta { 1.0 } else { 0.0 };
                assert!(lvl.iter().all(|&v| v == want));
            }
        }
    }

    #[test]
    fn linear_mix_on_identity_is_pixel_average() {
        let m = identity(8, 1);
        let xa = Array2::from_shape_fn((1, 64), |(_, c)| c as f64 * 0.1 - 3.0);
        let xb = Array2::from_shape_fn((1, 64), |(_, c)| 2.0 - c as f64 * 0.05);
        let mixed = mix_linear(&m, &xa, &xb, 0.5).unwrap();
        assert!((&mixed - &((&xa + &xb) * 0.5)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn psnr_values() {
        assert_eq!(psnr(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), PSNR_MAX);
        assert!((psnr(&[0.1], &[0.2]).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&[0.0; 4], &[1.0; 4]).unwrap().abs() < 1e-12);
        assert!(psnr(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn purity_of_separated_quadrants() {
        let z = ndarray::array![[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [2.0, 2.0]];
        assert_eq!(quadrant_purity(&z, &[0, 1, 2, 3, 0], Quadrants::Signs), 1.0);
        assert_eq!(quadrant_purity(&z, &[0, 1, 2, 3, 1], Quadrants::Signs), 0.8);
        // Points on the half-axes split cleanly into sectors but straddle
        // sign quadrants.
        let axes = ndarray::array![[2.0, 0.1], [2.0, -0.1], [0.1, 2.0], [-0.1, 2.0], [-2.0, 0.1], [-2.0, -0.1], [0.1, -2.0], [-0.1, -2.0]];
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        assert_eq!(quadrant_purity(&axes, &labels, Quadrants::Axes), 1.0);
        assert_eq!(quadrant_purity(&axes, &labels, Quadrants::Signs), 0.5);
    }

    #[test]
    fn inpainting_respects_region_and_free_set() {
        let m: RgFlowModel<f64> = random(8, 1, 0.05);
        let x8: Vec<u8> = (0..64).map(|k| (k * 3 % 256) as u8).collect();
        let region = PixelRegion::new(2, 3, 3, 2);
        let free = free_latents(&m.spec, region, InpaintArm::Cone, 0).unwrap();
        assert_eq!(free, m.spec.inference_cone(region).unwrap().latents);
        let config = InpaintConfig { inits: 8, max_steps: 30, ..Default::default() };
        let res = inpaint(&m, &x8, region, &free, &config, 1).unwrap();
        for k in 0..64 {
            if !region.contains(k / 8, k % 8) {
                assert_eq!(res.pixels[k], x8[k]);
            }
        }
        let (z0, _) = m.encode(&image_rows_from(&x8, &m.spec)).unwrap();
        let z0 = z0.to_flat();
        for k in 0..64 {
            if free.binary_search(&k).is_err() {
                assert_eq!(res.latents[[0, k]], z0[[0, k]], "fixed latent {k} moved");
            }
        }
        let random_free = free_latents(&m.spec, region, InpaintArm::Random, 0).unwrap();
        assert_eq!(random_free.len(), free.len());

        let empty = inpaint(&m, &x8, PixelRegion::new(0, 0, 0, 0), &[], &config, 1).unwrap();
        assert_eq!(empty.pixels, x8);
        assert_eq!(empty.steps, 0);
    }

    fn image_rows_from(x8: &[u8], spec: &LatticeSpec) -> Array2<f64> {
        let row = Array2::from_shape_vec((1, spec.dim()), x8.to_vec()).unwrap();
        Dequantizer::default().preprocess::<f64, ChaCha8Rng>(row.view(), Noise::Midpoint).0
    }

    #[test]
    fn inpainting_improves_likelihood() {
        let m: RgFlowModel<f64> = random(8, 1, 0.05);
        let x8: Vec<u8> = (0..64).map(|k| (128 + (k % 8) * 4) as u8).collect();
        let region = PixelRegion::new(2, 2, 4, 4);
        let free = free_latents(&m.spec, region, InpaintArm::Cone, 0).unwrap();
        let short = inpaint(&m, &x8, region, &free, &InpaintConfig { inits: 4, max_steps: 1, ..Default::default() }, 2).unwrap();
        let long = inpaint(&m, &x8, region, &free, &InpaintConfig { inits: 4, max_steps: 200, ..Default::default() }, 2).unwrap();
        assert!(long.log_prob > short.log_prob, "{} vs {}", long.log_prob, short.log_prob);
    }
}

//! The hierarchical flow: per-level disentangler and decimator stacks.
//!
//! Level states are `B x (n·n·C)` matrices with column `(i·n + j)·C + c`.
//! Each stack sees the state regrouped into `B·P` patch rows of `m²C`
//! values via precomputed column maps, so one matrix product serves every
//! block of a level.

use std::path::Path;
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prior::{Prior, TemperatureSchedule};
use super::FlowModel;
use crate::coupling::{BijectorStack, CouplingMask, NetSize};
use crate::error::{Error, Result};
use crate::lattice::{BlockAddress, BlockRole, LatticeSpec};
use crate::nn::{Binding, Checkpoint, ParamStore, Real, Tape, Var};

/// Rows per eager evaluation chunk.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub size: usize,
    pub kernel: usize,
    pub channels: usize,
    /// Coupling blocks per level, low to high. A single entry applies to
    /// every level. Split evenly between disentangler and decimator; the
    /// top level has a decimator only and takes them all.
    pub n_layer: Vec<usize>,
    pub n_res: usize,
    pub hidden: usize,
    pub prior: Prior,
    /// Reuse level 0's stacks on every level.
    #[serde(default)]
    pub share_levels: bool,
}

impl ModelConfig {
    /// `n_layer = 8, 6, 4, 2`, `n_res = 4`, width 512.
    pub fn large(size: usize, kernel: usize, channels: usize) -> Self {
        Self {
            size,
            kernel,
            channels,
            n_layer: vec![8, 6, 4, 2],
            n_res: 4,
            hidden: 512,
            prior: Prior::default(),
            share_levels: false,
        }
    }

    /// `n_layer = 4` on every level, `n_res = 4`.
    pub fn msds(hidden: usize) -> Self {
        Self {
            size: 32,
            kernel: 4,
            channels: 3,
            n_layer: vec![4],
            n_res: 4,
            hidden,
            prior: Prior::default(),
            share_levels: false,
        }
    }

    /// Small model for tests and oracles.
    pub fn tiny(size: usize, kernel: usize, channels: usize) -> Self {
        Self {
            size,
            kernel,
            channels,
            n_layer: vec![2],
            n_res: 1,
            hidden: 8,
            prior: Prior::default(),
            share_levels: false,
        }
    }

    pub fn spec(&self) -> Result<LatticeSpec> {
        LatticeSpec::new(self.size, self.kernel, self.channels)
    }

    pub fn layers_at(&self, h: usize) -> usize {
        match self.n_layer.as_slice() {
            [n] => *n,
            list => list[h],
        }
    }

    pub fn validate(&self) -> Result<LatticeSpec> {
        let spec = self.spec()?;
        self.prior.validate()?;
        if self.n_layer.is_empty() || (self.n_layer.len() != 1 && self.n_layer.len() != spec.num_levels()) {
            return Err(Error::InvalidArgument(format!(
                "n_layer needs 1 or {} entries, got {:?}",
                spec.num_levels(),
                self.n_layer
            )));
        }
        if self.n_res == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("n_res and hidden must be positive".into()));
        }
        if self.share_levels {
            let first = self.layers_at(0);
            if (0..spec.num_levels()).any(|h| self.layers_at(h) != first) {
                return Err(Error::InvalidArgument("shared levels need equal n_layer".into()));
            }
        }
        Ok(spec)
    }

    fn split(&self, h: usize, top: usize) -> (usize, usize) {
        let n = self.layers_at(h);
        if h == top {
            (0, n)
        } else {
            (n / 2, n - n / 2)
        }
    }
}

/// Column maps for one level.
#[derive(Clone, Debug)]
struct LevelMaps {
    blocks: usize,
    /// state → disentangler patch order
    to_dis: Arc<[usize]>,
    /// disentangler order (state order without a disentangler) → decimator order
    to_dec: Arc<[usize]>,
    /// decimator order → next-level state
    keep: Arc<[usize]>,
    /// decimator order → latents of this level
    emit: Arc<[usize]>,
    /// `[kept | latents]` → decimator order
    merge: Arc<[usize]>,
    /// decimator order → disentangler order (or state order)
    from_dec: Arc<[usize]>,
    /// disentangler order → state
    from_dis: Arc<[usize]>,
}

fn invert(map: &[usize]) -> Vec<usize> {
    let mut inv = vec![usize::MAX; map.len()];
    for (k, &s) in map.iter().enumerate() {
        inv[s] = k;
    }
    inv
}

impl LevelMaps {
    fn build(spec: &LatticeSpec, h: usize) -> Self {
        let n = spec.level_size(h);
        let c = spec.channels;
        let nb = spec.blocks_per_side(h);
        let order = |role: BlockRole| -> Vec<usize> {
            let mut out = Vec::with_capacity(n * n * c);
            for p in 0..nb {
                for q in 0..nb {
                    let pos = spec.block_positions(BlockAddress { h, p, q, role }).expect("valid block");
                    for (i, j) in pos {
                        out.extend((0..c).map(|ch| (i * n + j) * c + ch));
                    }
                }
            }
            out
        };
        let top = h == spec.top_level();
        let dec = order(BlockRole::Decimator);
        let dec_inv = invert(&dec);
        let (to_dis, to_dec, from_dec, from_dis): (Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) = if top {
            (Vec::new(), dec.clone(), dec_inv.clone(), Vec::new())
        } else {
            let dis = order(BlockRole::Disentangler);
            let dis_inv = invert(&dis);
            let to_dec = dec.iter().map(|&s| dis_inv[s]).collect();
            let from_dec = dis.iter().map(|&s| dec_inv[s]).collect();
            (dis, to_dec, from_dec, dis_inv)
        };
        let keep: Vec<usize> = if top {
            Vec::new()
        } else {
            let nn = n / 2;
            (0..nn * nn)
                .flat_map(|k| {
                    let (i, j) = (2 * (k / nn), 2 * (k % nn));
                    (0..c).map(move |ch| (i * n + j) * c + ch)
                })
                .map(|s| dec_inv[s])
                .collect()
        };
        let emit: Vec<usize> = spec
            .latent_positions(h)
            .into_iter()
            .flat_map(|(i, j)| (0..c).map(move |ch| (i * n + j) * c + ch))
            .map(|s| dec_inv[s])
            .collect();
        let merge = invert(&keep.iter().chain(&emit).copied().collect::<Vec<_>>());
        Self {
            blocks: nb * nb,
            to_dis: to_dis.into(),
            to_dec: to_dec.into(),
            keep: keep.into(),
            emit: emit.into(),
            merge: merge.into(),
            from_dec: from_dec.into(),
            from_dis: from_dis.into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Level {
    pub dis: Option<BijectorStack>,
    pub dec: BijectorStack,
    maps: LevelMaps,
}

/// Latent variables grouped by level; each level is `B x count_h`, with
/// columns in flat latent order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPyramid<T> {
    pub levels: Vec<Array2<T>>,
}

impl<T: Real> LatentPyramid<T> {
    pub fn zeros(spec: &LatticeSpec, batch: usize) -> Self {
        Self {
            levels: spec.latent_counts().into_iter().map(|k| Array2::zeros((batch, k))).collect(),
        }
    }

    /// Splits `B x L²C` flat rows by level.
    pub fn from_flat(spec: &LatticeSpec, flat: &Array2<T>) -> Result<Self> {
        if flat.ncols() != spec.dim() {
            return Err(Error::shape(format!("{} latent columns", spec.dim()), format!("{}", flat.ncols())));
        }
        let offsets = spec.latent_offsets();
        let levels = spec
            .latent_counts()
            .into_iter()
            .zip(offsets)
            .map(|(k, o)| flat.slice(s![.., o..o + k]).to_owned())
            .collect();
        Ok(Self { levels })
    }

    pub fn to_flat(&self) -> Array2<T> {
        let views: Vec<_> = self.levels.iter().map(|l| l.view()).collect();
        concatenate(Axis(1), &views).expect("levels share the batch size")
    }

    pub fn batch(&self) -> usize {
        self.levels.first().map_or(0, |l| l.nrows())
    }

    pub fn rows(&self, start: usize, end: usize) -> Self {
        Self {
            levels: self.levels.iter().map(|l| l.slice(s![start..end, ..]).to_owned()).collect(),
        }
    }

    fn check(&self, spec: &LatticeSpec) -> Result<()> {
        let want = spec.latent_counts();
        let got: Vec<usize> = self.levels.iter().map(|l| l.ncols()).collect();
        if want != got {
            return Err(Error::shape(format!("{want:?} latents per level"), format!("{got:?}")));
        }
        if self.levels.iter().any(|l| l.nrows() != self.batch()) {
            return Err(Error::shape("equal batch per level", "ragged levels"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RgFlowModel<T> {
    pub config: ModelConfig,
    pub spec: LatticeSpec,
    pub store: ParamStore<T>,
    pub levels: Vec<Level>,
}

const CKPT_KIND: &str = "rgflow";

impl<T: Real> RgFlowModel<T> {
    /// Identity-initialized model (every projection gain is zero).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let spec = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let size = NetSize { hidden: config.hidden, n_res: config.n_res };
        let (m, c) = (spec.kernel, spec.channels);
        let mask = move |p| CouplingMask::checkerboard(m, c, p);
        let top = spec.top_level();
        let mut levels: Vec<Level> = Vec::with_capacity(spec.num_levels());
        for h in 0..spec.num_levels() {
            let maps = LevelMaps::build(&spec, h);
            let (n_dis, n_dec) = config.split(h, top);
            let shared = config.share_levels && h > 0;
            let dis = if h == top {
                None
            } else if shared {
                levels[0].dis.clone()
            } else {
                Some(BijectorStack::new(&mut store, &format!("L{h}.dis"), n_dis, mask, size, h, &mut rng))
            };
            let dec = if shared && h < top {
                levels[0].dec.clone()
            } else if shared {
                // top level: reuse the disentangler then decimator blocks in sequence
                let mut blocks = levels[0].dis.clone().map(|s| s.blocks).unwrap_or_default();
                blocks.extend(levels[0].dec.blocks.iter().cloned());
                BijectorStack { blocks }
            } else {
                BijectorStack::new(&mut store, &format!("L{h}.dec"), n_dec, mask, size, h, &mut rng)
            };
            levels.push(Level { dis, dec, maps });
        }
        Ok(Self { config, spec, store, levels })
    }

    /// Redraws every coupling network so the model is far from the
    /// identity; `gain` scales the final projections.
    pub fn randomize(&mut self, seed: u64, gain: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for level in &self.levels {
            if let Some(dis) = &level.dis {
                dis.randomize(&mut self.store, &mut rng, gain);
            }
            level.dec.randomize(&mut self.store, &mut rng, gain);
        }
    }

    pub fn cast<U: Real>(&self) -> RgFlowModel<U> {
        RgFlowModel {
            config: self.config.clone(),
            spec: self.spec,
            store: self.store.cast(),
            levels: self.levels.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_state(&self, h: usize, x: &Var<T>) -> Result<()> {
        let n = self.spec.level_size(h);
        let want = n * n * self.spec.channels;
        if x.shape().1 != want {
            return Err(Error::shape(format!("{want} columns at level {h}"), format!("{}", x.shape().1)));
        }
        Ok(())
    }

    fn apply_stack(
        &self,
        b: &Binding<'_, T>,
        stack: &BijectorStack,
        blocks: usize,
        x: &Var<T>,
        inverse: bool,
    ) -> Result<(Var<T>, Var<T>)> {
        let tape = b.tape();
        let (rows, cols) = x.shape();
        let d = cols / blocks;
        let patches = tape.reshape(x, rows * blocks, d);
        let (y, ld) = if inverse {
            stack.inverse(b, &patches)?
        } else {
            stack.forward(b, &patches)?
        };
        let y = tape.reshape(&y, rows, cols);
        let ld = tape.sum_cols(&tape.reshape(&ld, rows, blocks));
        Ok((y, ld))
    }

    /// One RG step `x_h ↦ (x_{h+1}, z_h)` with its log-determinant (`B x 1`).
    /// At the top level `x_{h+1}` has no columns.
    pub fn rg_step_forward_var(&self, b: &Binding<'_, T>, h: usize, x: &Var<T>) -> Result<(Var<T>, Var<T>, Var<T>)> {
        self.check_state(h, x)?;
        let tape = b.tape();
        let level = &self.levels[h];
        let maps = &level.maps;
        let (mut cur, mut logdet) = (x.clone(), None);
        if let Some(dis) = &level.dis {
            let g = tape.gather_cols(&cur, &maps.to_dis);
            let (y, ld) = self.apply_stack(b, dis, maps.blocks, &g, false)?;
            cur = y;
            logdet = Some(ld);
        }
        let g = tape.gather_cols(&cur, &maps.to_dec);
        let (y, ld) = self.apply_stack(b, &level.dec, maps.blocks, &g, false)?;
        let logdet = match logdet {
            Some(l) => tape.add(&l, &ld),
            None => ld,
        };
        let next = tape.gather_cols(&y, &maps.keep);
        let z = tape.gather_cols(&y, &maps.emit);
        Ok((next, z, logdet))
    }

    /// Inverse RG step; the log-determinant is that of the inverse map.
    pub fn rg_step_inverse_var(
        &self,
        b: &Binding<'_, T>,
        h: usize,
        next: &Var<T>,
        z: &Var<T>,
    ) -> Result<(Var<T>, Var<T>)> {
        let tape = b.tape();
        let level = &self.levels[h];
        let maps = &level.maps;
        if next.shape().1 != maps.keep.len() || z.shape().1 != maps.emit.len() || next.shape().0 != z.shape().0 {
            return Err(Error::shape(
                format!("{} coarse and {} latent columns", maps.keep.len(), maps.emit.len()),
                format!("{:?} and {:?}", next.shape(), z.shape()),
            ));
        }
        let joined = if maps.keep.is_empty() { z.clone() } else { tape.concat_cols(next, z) };
        let y = tape.gather_cols(&joined, &maps.merge);
        let (x, ld_dec) = self.apply_stack(b, &level.dec, maps.blocks, &y, true)?;
        let x = tape.gather_cols(&x, &maps.from_dec);
        match &level.dis {
            Some(dis) => {
                let (x, ld_dis) = self.apply_stack(b, dis, maps.blocks, &x, true)?;
                Ok((tape.gather_cols(&x, &maps.from_dis), tape.add(&ld_dec, &ld_dis)))
            }
            None => Ok((x, ld_dec)),
        }
    }

    /// Image rows to latents per level plus `log |det ∂R/∂x|` (`B x 1`).
    pub fn encode_var(&self, b: &Binding<'_, T>, x: &Var<T>) -> Result<(Vec<Var<T>>, Var<T>)> {
        let tape = b.tape();
        let mut zs = Vec::with_capacity(self.spec.num_levels());
        let mut logdet = tape.constant(Array2::zeros((x.shape().0, 1)));
        let mut cur = x.clone();
        for h in 0..self.spec.num_levels() {
            let (next, z, ld) = self.rg_step_forward_var(b, h, &cur)?;
            logdet = tape.add(&logdet, &ld);
            zs.push(z);
            cur = next;
        }
        Ok((zs, logdet))
    }

    /// Latents to image rows plus `log |det ∂G/∂z|` (`B x 1`).
    pub fn decode_var(&self, b: &Binding<'_, T>, zs: &[Var<T>]) -> Result<(Var<T>, Var<T>)> {
        let tape = b.tape();
        if zs.len() != self.spec.num_levels() {
            return Err(Error::shape(format!("{} latent levels", self.spec.num_levels()), format!("{}", zs.len())));
        }
        let rows = zs[0].shape().0;
        let mut logdet = tape.constant(Array2::zeros((rows, 1)));
        let mut cur = tape.constant(Array2::zeros((rows, 0)));
        for h in (0..self.spec.num_levels()).rev() {
            let (x, ld) = self.rg_step_inverse_var(b, h, &cur, &zs[h])?;
            logdet = tape.add(&logdet, &ld);
            cur = x;
        }
        Ok((cur, logdet))
    }

    /// `Σ_l log p(z_l)` per row.
    pub fn prior_log_prob_var(&self, tape: &Tape<T>, zs: &[Var<T>]) -> Var<T> {
        let mut total = tape.constant(Array2::zeros((zs[0].shape().0, 1)));
        for z in zs {
            total = tape.add(&total, &self.config.prior.log_prob_var(tape, z));
        }
        total
    }

    fn check_images(&self, x: &Array2<T>) -> Result<()> {
        if x.ncols() != self.spec.dim() {
            return Err(Error::shape(format!("{} image columns", self.spec.dim()), format!("{}", x.ncols())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Array2<T>) -> Result<(LatentPyramid<T>, Array1<T>)> {
        self.check_images(x)?;
        let mut levels: Vec<Vec<Array2<T>>> = vec![Vec::new(); self.spec.num_levels()];
        let mut logdets = Vec::with_capacity(x.nrows());
        for chunk in x.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
            let tape = Tape::no_grad();
            let b = Binding::frozen(&tape, &self.store);
            let (zs, ld) = self.encode_var(&b, &tape.constant(chunk.to_owned()))?;
            for (acc, z) in levels.iter_mut().zip(zs) {
                acc.push(z.into_value());
            }
            logdets.extend(ld.value().iter().copied());
        }
        let levels = levels
            .into_iter()
            .enumerate()
            .map(|(h, parts)| stack_rows(parts, self.spec.latent_counts()[h]))
            .collect();
        Ok((LatentPyramid { levels }, Array1::from(logdets)))
    }

    pub fn decode(&self, z: &LatentPyramid<T>) -> Result<(Array2<T>, Array1<T>)> {
        z.check(&self.spec)?;
        if z.levels.iter().any(|l| l.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("latents"));
        }
        let mut parts = Vec::new();
        let mut logdets = Vec::with_capacity(z.batch());
        for start in (0..z.batch()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(z.batch());
            let tape = Tape::no_grad();
            let b = Binding::frozen(&tape, &self.store);
            let zs: Vec<Var<T>> = z.levels.iter().map(|l| tape.constant(l.slice(s![start..end, ..]).to_owned())).collect();
            let (x, ld) = self.decode_var(&b, &zs)?;
            parts.push(x.into_value());
            logdets.extend(ld.value().iter().copied());
        }
        Ok((stack_rows(parts, self.spec.dim()), Array1::from(logdets)))
    }

    /// `log p(x)` per row in model space.
    pub fn log_prob(&self, x: &Array2<T>) -> Result<Array1<T>> {
        self.check_images(x)?;
        let mut out = Vec::with_capacity(x.nrows());
        for chunk in x.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
            let tape = Tape::no_grad();
            let b = Binding::frozen(&tape, &self.store);
            let lp = self.log_prob_var(&b, &tape.constant(chunk.to_owned()))?;
            out.extend(lp.value().iter().copied());
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log-likelihood"));
        }
        Ok(Array1::from(out))
    }

    pub fn rg_step_forward(&self, h: usize, x: &Array2<T>) -> Result<(Array2<T>, Array2<T>, Array1<T>)> {
        let tape = Tape::no_grad();
        let b = Binding::frozen(&tape, &self.store);
        let (next, z, ld) = self.rg_step_forward_var(&b, h, &tape.constant(x.clone()))?;
        Ok((next.into_value(), z.into_value(), ld.into_value().remove_axis(Axis(1))))
    }

    pub fn rg_step_inverse(&self, h: usize, next: &Array2<T>, z: &Array2<T>) -> Result<(Array2<T>, Array1<T>)> {
        let tape = Tape::no_grad();
        let b = Binding::frozen(&tape, &self.store);
        let (x, ld) = self.rg_step_inverse_var(&b, h, &tape.constant(next.clone()), &tape.constant(z.clone()))?;
        Ok((x.into_value(), ld.into_value().remove_axis(Axis(1))))
    }

    pub fn sample_latents(&self, temps: &TemperatureSchedule, n: usize, seed: u64) -> Result<LatentPyramid<T>> {
        if temps.temps.len() != self.spec.num_levels() {
            return Err(Error::InvalidArgument(format!(
                "{} temperatures for {} levels",
                temps.temps.len(),
                self.spec.num_levels()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = self.spec.latent_counts();
        let mut z = LatentPyramid::zeros(&self.spec, n);
        for r in 0..n {
            for (h, &k) in counts.iter().enumerate() {
                for c in 0..k {
                    z.levels[h][[r, c]] = T::of(self.config.prior.sample(&mut rng, temps.level(h)));
                }
            }
        }
        Ok(z)
    }

    /// Model-space image rows decoded from prior draws.
    pub fn sample(&self, temps: &TemperatureSchedule, n: usize, seed: u64) -> Result<Array2<T>> {
        let z = self.sample_latents(temps, n, seed)?;
        Ok(self.decode(&z)?.0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({ "kind": CKPT_KIND, "model": self.config }));
        for (name, value) in self.store.names().iter().zip(self.store.values()) {
            ck.push(name.clone(), value);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(CKPT_KIND) {
            return Err(Error::Checkpoint("not an RG flow checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(ck.meta["model"].clone())?;
        let mut model = Self::new(config, 0)?;
        model.load_params(ck)?;
        Ok(model)
    }

    /// Overwrites parameters with the same-named tensors of `ck`.
    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        load_store(&mut self.store, ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub(crate) fn load_store<T: Real>(store: &mut ParamStore<T>, ck: &Checkpoint) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let value: Array2<T> = ck
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if value.dim() != store.get(id).dim() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?}, expected {:?}",
                value.dim(),
                store.get(id).dim()
            )));
        }
        *store.get_mut(id) = value;
    }
    Ok(())
}

fn stack_rows<T: Real>(parts: Vec<Array2<T>>, cols: usize) -> Array2<T> {
    if parts.is_empty() {
        return Array2::zeros((0, cols));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("chunks share width")
}

impl<T: Real> FlowModel<T> for RgFlowModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn log_prob_var(&self, b: &Binding<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (zs, logdet) = self.encode_var(b, x)?;
        let lp = self.prior_log_prob_var(b.tape(), &zs);
        Ok(b.tape().add(&lp, &logdet))
    }

    fn to_checkpoint(&self) -> Checkpoint {
        RgFlowModel::to_checkpoint(self)
    }

    fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        RgFlowModel::load_params(self, ck)
    }
}

//! Geometry of the RG hierarchy: block partitions, latent indexing and
//! causal cones. Nothing here is learnable.
//!
//! Level `h` is stored compactly as an `n x n x C` array with
//! `n = L / 2^h`; compact position `(i, j)` sits at original-lattice pixel
//! `2^h · (i, j)`. Decimator blocks tile the level starting at the origin;
//! disentangler blocks are shifted by `m/2` in both directions and wrap
//! periodically. Inside a decimator block the stride-2 offsets are kept for
//! the next level and the rest become latents.
//!
//! Flat latent order is level-major, then row-major over the decimated
//! positions of that level, then channel.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeSpec {
    /// Image edge length `L`.
    pub size: usize,
    /// Kernel edge `m`.
    pub kernel: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatentIndex {
    pub h: usize,
    pub i: usize,
    pub j: usize,
    pub c: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockRole {
    Disentangler,
    Decimator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockAddress {
    pub h: usize,
    pub p: usize,
    pub q: usize,
    pub role: BlockRole,
}

/// Offsets `(k·a, k·b)` inside an `m x m` square.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelSet(pub Vec<(usize, usize)>);

/// Axis-aligned pixel rectangle on the level-0 image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRegion {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl PixelRegion {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self { row, col, height, width }
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.row && i < self.row + self.height && j >= self.col && j < self.col + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// The `h x w` rectangle centred on an `size x size` image.
    pub fn centered(size: usize, height: usize, width: usize) -> Self {
        Self::new((size - height) / 2, (size - width) / 2, height, width)
    }
}

/// Parses `HxW@ROW,COL`, e.g. `10x10@11,11`.
impl FromStr for PixelRegion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("region `{s}` is not of the form HxW@ROW,COL"));
        let (dims, at) = s.split_once('@').ok_or_else(bad)?;
        let (h, w) = dims.split_once(['x', 'X']).ok_or_else(bad)?;
        let (r, c) = at.split_once(',').ok_or_else(bad)?;
        let p = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        Ok(Self::new(p(r)?, p(c)?, p(h)?, p(w)?))
    }
}

impl fmt::Display for PixelRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}@{},{}", self.height, self.width, self.row, self.col)
    }
}

pub fn square_set(m: usize, stride: usize) -> Result<PixelSet> {
    if stride == 0 || m % stride != 0 {
        return Err(Error::InvalidStride { m, stride });
    }
    let n = m / stride;
    Ok(PixelSet(
        (0..n)
            .flat_map(|a| (0..n).map(move |b| (stride * a, stride * b)))
            .collect(),
    ))
}

impl LatticeSpec {
    pub fn new(size: usize, kernel: usize, channels: usize) -> Result<Self> {
        if !size.is_power_of_two() || !kernel.is_power_of_two() {
            return Err(Error::InvalidSpec(format!(
                "size {size} and kernel {kernel} must be powers of two"
            )));
        }
        if kernel < 2 || size < kernel {
            return Err(Error::InvalidSpec(format!("need 2 <= kernel <= size, got m={kernel}, L={size}")));
        }
        if channels == 0 {
            return Err(Error::InvalidSpec("channel count must be positive".into()));
        }
        Ok(Self { size, kernel, channels })
    }

    /// `h_L = log2 L - log2 m`
    pub fn top_level(&self) -> usize {
        (self.size.trailing_zeros() - self.kernel.trailing_zeros()) as usize
    }

    pub fn num_levels(&self) -> usize {
        self.top_level() + 1
    }

    /// Edge of the compact level-`h` lattice.
    pub fn level_size(&self, h: usize) -> usize {
        self.size >> h
    }

    pub fn blocks_per_side(&self, h: usize) -> usize {
        self.level_size(h) / self.kernel
    }

    /// Number of values in an image, `L² · C`.
    pub fn dim(&self) -> usize {
        self.size * self.size * self.channels
    }

    pub fn patch_dim(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Whether compact position `(i, j)` of level `h` survives to level `h+1`.
    pub fn is_kept(&self, h: usize, i: usize, j: usize) -> bool {
        h < self.top_level() && i % 2 == 0 && j % 2 == 0
    }

    /// Decimated positions of level `h`, row-major.
    pub fn latent_positions(&self, h: usize) -> Vec<(usize, usize)> {
        let n = self.level_size(h);
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !self.is_kept(h, i, j))
            .collect()
    }

    pub fn latent_counts(&self) -> Vec<usize> {
        (0..self.num_levels())
            .map(|h| {
                let n = self.level_size(h);
                if h == self.top_level() {
                    n * n * self.channels
                } else {
                    n * n * 3 / 4 * self.channels
                }
            })
            .collect()
    }

    /// Start of each level's slice in the flat latent vector.
    pub fn latent_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.latent_counts()
            .into_iter()
            .map(|c| {
                let o = acc;
                acc += c;
                o
            })
            .collect()
    }

    /// Row-major rank of a decimated position among its level's latents.
    fn latent_rank(&self, h: usize, i: usize, j: usize) -> Option<usize> {
        let n = self.level_size(h);
        if i >= n || j >= n || self.is_kept(h, i, j) {
            return None;
        }
        if h == self.top_level() {
            return Some(i * n + j);
        }
        let half = n / 2;
        let before = (i / 2) * (half + n) + if i % 2 == 1 { half } else { 0 };
        Some(before + if i % 2 == 0 { j / 2 } else { j })
    }

    pub fn flat_index(&self, l: LatentIndex) -> Result<usize> {
        if l.h >= self.num_levels() || l.c >= self.channels {
            return Err(Error::InvalidArgument(format!("latent {l:?} outside lattice")));
        }
        let rank = self
            .latent_rank(l.h, l.i, l.j)
            .ok_or_else(|| Error::InvalidArgument(format!("{l:?} is not a decimated position")))?;
        Ok(self.latent_offsets()[l.h] + rank * self.channels + l.c)
    }

    pub fn latent_index(&self, flat: usize) -> Result<LatentIndex> {
        if flat >= self.dim() {
            return Err(Error::InvalidArgument(format!("flat latent {flat} >= {}", self.dim())));
        }
        let offsets = self.latent_offsets();
        let h = offsets.iter().rposition(|&o| o <= flat).expect("offset 0 exists");
        let local = flat - offsets[h];
        let (rank, c) = (local / self.channels, local % self.channels);
        let (i, j) = self.latent_positions(h)[rank];
        Ok(LatentIndex { h, i, j, c })
    }

    /// Original-lattice pixel a latent sits on.
    pub fn home_pixel(&self, l: LatentIndex) -> (usize, usize) {
        (l.i << l.h, l.j << l.h)
    }

    fn check_address(&self, addr: BlockAddress) -> Result<()> {
        let nb = if addr.h < self.num_levels() { self.blocks_per_side(addr.h) } else { 0 };
        let has_role = addr.role == BlockRole::Decimator || addr.h < self.top_level();
        if addr.h >= self.num_levels() || addr.p >= nb || addr.q >= nb || !has_role {
            return Err(Error::InvalidAddress(format!("{addr:?} for {self:?}")));
        }
        Ok(())
    }

    /// Compact level-`h` positions a block covers, ordered row-major over
    /// the in-block offsets `(a, b)`.
    pub fn block_positions(&self, addr: BlockAddress) -> Result<Vec<(usize, usize)>> {
        self.check_address(addr)?;
        let (m, n) = (self.kernel, self.level_size(addr.h));
        let shift = match addr.role {
            BlockRole::Disentangler => m / 2,
            BlockRole::Decimator => 0,
        };
        Ok((0..m)
            .flat_map(|a| (0..m).map(move |b| (a, b)))
            .map(|(a, b)| ((m * addr.p + shift + a) % n, (m * addr.q + shift + b) % n))
            .collect())
    }

    /// Absolute pixel positions `2^h · (block positions)` on the original
    /// lattice.
    pub fn block_pixels(&self, addr: BlockAddress) -> Result<Vec<(usize, usize)>> {
        Ok(self
            .block_positions(addr)?
            .into_iter()
            .map(|(i, j)| (i << addr.h, j << addr.h))
            .collect())
    }

    /// Block of `role` containing compact position `(i, j)` at level `h`.
    pub fn block_of(&self, h: usize, role: BlockRole, i: usize, j: usize) -> (usize, usize) {
        let (m, n) = (self.kernel, self.level_size(h));
        match role {
            BlockRole::Decimator => (i / m, j / m),
            BlockRole::Disentangler => ((i + n - m / 2) % n / m, (j + n - m / 2) % n / m),
        }
    }

    pub fn generation_cone(&self, l: LatentIndex) -> Result<CausalCone> {
        self.flat_index(l)?;
        let mut levels = vec![Vec::new(); self.num_levels()];
        let n = self.level_size(l.h);
        let mut mask = vec![false; n * n];
        mask[l.i * n + l.j] = true;
        let mut h = l.h;
        loop {
            mask = self.expand(h, BlockRole::Decimator, &mask);
            if h < self.top_level() {
                mask = self.expand(h, BlockRole::Disentangler, &mask);
            }
            levels[h] = mask.clone();
            if h == 0 {
                break;
            }
            // x^(h) position (i, j) is kept position (2i, 2j) one level down
            let nn = self.level_size(h - 1);
            let n = self.level_size(h);
            let mut down = vec![false; nn * nn];
            for (k, &on) in mask.iter().enumerate() {
                if on {
                    down[(2 * (k / n)) * nn + 2 * (k % n)] = true;
                }
            }
            mask = down;
            h -= 1;
        }
        Ok(CausalCone {
            kind: ConeKind::Generation,
            spec: *self,
            level_masks: levels,
            latents: Vec::new(),
        })
    }

    pub fn inference_cone(&self, region: PixelRegion) -> Result<CausalCone> {
        if region.row + region.height > self.size || region.col + region.width > self.size {
            return Err(Error::InvalidArgument(format!("region {region} exceeds {0}x{0} image", self.size)));
        }
        let mut levels = vec![Vec::new(); self.num_levels()];
        let mut latents = Vec::new();
        let offsets = self.latent_offsets();
        let n0 = self.size;
        let mut mask: Vec<bool> = (0..n0 * n0).map(|k| region.contains(k / n0, k % n0)).collect();
        for h in 0..self.num_levels() {
            let n = self.level_size(h);
            if h < self.top_level() {
                mask = self.expand(h, BlockRole::Disentangler, &mask);
            }
            mask = self.expand(h, BlockRole::Decimator, &mask);
            for (rank, &(i, j)) in self.latent_positions(h).iter().enumerate() {
                if mask[i * n + j] {
                    latents.extend((0..self.channels).map(|c| offsets[h] + rank * self.channels + c));
                }
            }
            levels[h] = mask.clone();
            if h < self.top_level() {
                let nn = n / 2;
                mask = (0..nn * nn).map(|k| mask[(2 * (k / nn)) * n + 2 * (k % nn)]).collect();
            }
        }
        Ok(CausalCone {
            kind: ConeKind::Inference,
            spec: *self,
            level_masks: levels,
            latents,
        })
    }

    /// Union of all `role` blocks at level `h` that intersect `mask`.
    fn expand(&self, h: usize, role: BlockRole, mask: &[bool]) -> Vec<bool> {
        let n = self.level_size(h);
        let nb = self.blocks_per_side(h);
        let mut hit = vec![false; nb * nb];
        for (k, &on) in mask.iter().enumerate() {
            if on {
                let (p, q) = self.block_of(h, role, k / n, k % n);
                hit[p * nb + q] = true;
            }
        }
        let mut out = vec![false; n * n];
        for (b, _) in hit.iter().enumerate().filter(|(_, &h)| h) {
            let addr = BlockAddress { h, p: b / nb, q: b % nb, role };
            for (i, j) in self.block_positions(addr).expect("valid block") {
                out[i * n + j] = true;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConeKind {
    Generation,
    Inference,
}

#[derive(Clone, Debug)]
pub struct CausalCone {
    pub kind: ConeKind,
    pub spec: LatticeSpec,
    /// Per level, a compact `n x n` mask. Generation: positions of `x^(h)`
    /// the seed can change. Inference: positions of the level-`h`
    /// decimator output the region can change.
    pub level_masks: Vec<Vec<bool>>,
    /// Sorted flat latent slots (inference cones only).
    pub latents: Vec<usize>,
}

impl CausalCone {
    /// Level-0 footprint as an `L x L` mask.
    pub fn pixel_mask(&self) -> &[bool] {
        &self.level_masks[0]
    }

    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let n = self.spec.size;
        self.pixel_mask()
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(k, _)| (k / n, k % n))
            .collect()
    }

    pub fn contains_pixel(&self, i: usize, j: usize) -> bool {
        self.pixel_mask()[i * self.spec.size + j]
    }

    pub fn latent_count(&self) -> usize {
        self.latents.len()
    }

    /// Latent count per level (inference cones).
    pub fn level_counts(&self) -> Vec<usize> {
        let offsets = self.spec.latent_offsets();
        let counts = self.spec.latent_counts();
        offsets
            .iter()
            .zip(&counts)
            .map(|(&o, &c)| self.latents.iter().filter(|&&l| l >= o && l < o + c).count())
            .collect()
    }
}

/// Mean inference-cone size over every placement of an `h x w` region.
pub fn mean_inference_cone_size(spec: &LatticeSpec, height: usize, width: usize) -> Result<f64> {
    let mut total = 0usize;
    let mut n = 0usize;
    for row in 0..=spec.size - height {
        for col in 0..=spec.size - width {
            total += spec.inference_cone(PixelRegion::new(row, col, height, width))?.latent_count();
            n += 1;
        }
    }
    Ok(total as f64 / n as f64)
}

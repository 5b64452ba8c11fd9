//! Synthetic datasets, preprocessing and on-disk image sets.

pub mod msds;
pub mod pinwheel;
pub mod preprocess;

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use msds::{color_stats, gen_msds, gen_msds_range, oval_colors, ColorStats, MsdsParams, OvalSpec};
pub use pinwheel::{gen_pinwheel, Pinwheel, PinwheelParams};
pub use preprocess::{bits_per_dim, Dequantizer, Noise, UniformOracle, BINS};

use crate::error::{Error, Result};

/// `n` square 8-bit images stored as rows of `L·L·C` values, row-major
/// over pixels and channel-minor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub size: usize,
    pub channels: usize,
    pub pixels: Array2<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub n: usize,
    #[serde(rename = "L")]
    pub size: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    pub seed: u64,
    pub params: serde_json::Value,
    /// SHA-256 over the PNG files in index order.
    pub sha256: String,
}

pub const MANIFEST: &str = "manifest.json";

fn file_name(k: usize) -> String {
    format!("{k:06}.png")
}

impl ImageSet {
    pub fn new(size: usize, channels: usize, pixels: Array2<u8>) -> Result<Self> {
        if pixels.ncols() != size * size * channels || !(channels == 1 || channels == 3) {
            return Err(Error::Dataset(format!(
                "{} columns do not form {size}x{size}x{channels} images",
                pixels.ncols()
            )));
        }
        Ok(Self { size, channels, pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn image(&self, k: usize) -> ArrayView1<'_, u8> {
        self.pixels.row(k)
    }

    /// Image `k` with intensities in `[0, 1]`.
    pub fn unit(&self, k: usize) -> Vec<f64> {
        self.image(k).iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            size: self.size,
            channels: self.channels,
            pixels: self.pixels.select(ndarray::Axis(0), rows),
        }
    }

    /// Writes one PNG per image plus a manifest and returns the manifest.
    pub fn save_dir(&self, dir: &Path, name: &str, seed: u64, params: serde_json::Value) -> Result<DatasetManifest> {
        fs::create_dir_all(dir)?;
        let mut hasher = Sha256::new();
        for k in 0..self.len() {
            let bytes = encode_png(self.image(k).as_slice().expect("contiguous row"), self.size, self.size, self.channels)?;
            hasher.update(&bytes);
            fs::write(dir.join(file_name(k)), bytes)?;
        }
        let manifest = DatasetManifest {
            name: name.to_string(),
            n: self.len(),
            size: self.size,
            channels: self.channels,
            seed,
            params,
            sha256: hex(&hasher.finalize()),
        };
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Reads a directory written by [`save_dir`](Self::save_dir) and checks
    /// the file count and checksum against its manifest.
    pub fn load_dir(dir: &Path) -> Result<(Self, DatasetManifest)> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        let on_disk = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
            .count();
        if on_disk != manifest.n {
            return Err(Error::Dataset(format!("manifest lists {} images, found {on_disk}", manifest.n)));
        }
        let dim = manifest.size * manifest.size * manifest.channels;
        let mut pixels = Array2::zeros((manifest.n, dim));
        let mut hasher = Sha256::new();
        for k in 0..manifest.n {
            let bytes = fs::read(dir.join(file_name(k)))?;
            hasher.update(&bytes);
            let (data, w, h, c) = decode_png(&bytes)?;
            if (w, h, c) != (manifest.size, manifest.size, manifest.channels) {
                return Err(Error::Dataset(format!("{} is {w}x{h}x{c}", file_name(k))));
            }
            pixels.row_mut(k).assign(&ArrayView1::from(&data));
        }
        if hex(&hasher.finalize()) != manifest.sha256 {
            return Err(Error::Dataset("checksum mismatch".into()));
        }
        Ok((Self::new(manifest.size, manifest.channels, pixels)?, manifest))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_png(data: &[u8], width: usize, height: usize, channels: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), width as u32, height as u32);
        enc.set_color(if channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
    }
    Ok(out)
}

/// Returns `(pixels, width, height, channels)` for 8-bit gray or RGB files.
pub fn decode_png(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize, usize)> {
    let decoder = png::Decoder::new(BufReader::new(std::io::Cursor::new(bytes)));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Dataset("image too large".into()))?];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Dataset(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::Dataset(format!("unsupported color type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    Ok((buf, info.width as usize, info.height as usize, channels))
}

pub fn write_png(path: &Path, data: &[u8], width: usize, height: usize, channels: usize) -> Result<()> {
    fs::write(path, encode_png(data, width, height, channels)?)?;
    Ok(())
}

/// Tiles images into a grid with a one-pixel gap, `cols` per row.
pub fn write_grid(path: &Path, images: &ImageSet, cols: usize) -> Result<()> {
    let (l, c) = (images.size, images.channels);
    let cols = cols.max(1).min(images.len().max(1));
    let rows = images.len().div_ceil(cols).max(1);
    let (w, h) = (cols * (l + 1) + 1, rows * (l + 1) + 1);
    let mut canvas = vec![0u8; w * h * c];
    for k in 0..images.len() {
        let (gr, gc) = (k / cols, k % cols);
        let img = images.image(k);
        for i in 0..l {
            for j in 0..l {
                let (y, x) = (1 + gr * (l + 1) + i, 1 + gc * (l + 1) + j);
                for ch in 0..c {
                    canvas[(y * w + x) * c + ch] = img[(i * l + j) * c + ch];
                }
            }
        }
    }
    write_png(path, &canvas, w, h, c)
}

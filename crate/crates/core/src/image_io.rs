//! Tile loading, block partitioning, perturbations and the synthetic dataset.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ColorType, ImageFormat, RgbImage};
use jpeg_encoder::{Encoder, SamplingFactor};
use ndarray::{s, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Side length of a block in pixels.
pub const BLOCK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
    Unknown,
}

impl Label {
    /// Binary target with Fake as the positive class.
    pub fn target(self) -> Option<f64> {
        match self {
            Label::Real => Some(0.0),
            Label::Fake => Some(1.0),
            Label::Unknown => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
            Label::Unknown => "unknown",
        })
    }
}

/// An RGB image with values in `[0, 1]`, stored as `(height, width, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub pixels: Array3<f64>,
    pub label: Label,
    pub id: String,
}

impl Tile {
    /// Validates the shape and value invariants.
    pub fn new(pixels: Array3<f64>, label: Label, id: impl Into<String>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % BLOCK != 0 || w % BLOCK != 0 {
            return Err(Error::Shape(format!("tile dimensions {h}x{w} are not positive multiples of {BLOCK}")));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Tile { pixels, label, id: id.into() })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn blocks_per_tile(&self) -> usize {
        (self.height() / BLOCK) * (self.width() / BLOCK)
    }

    pub fn from_rgb8(img: &RgbImage, label: Label, id: impl Into<String>) -> Result<Self> {
        let (w, h) = img.dimensions();
        let raw = img.as_raw();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            raw[(y * w as usize + x) * 3 + c] as f64 / 255.0
        });
        Tile::new(pixels, label, id)
    }

    /// Quantizes to 8 bits with round-to-nearest.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w, _) = self.pixels.dim();
        let data: Vec<u8> = self.pixels.iter().map(|&v| quantize(v)).collect();
        RgbImage::from_raw(w as u32, h as u32, data).expect("buffer sized from tile")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, ImageFormat::Png).map_err(|e| match e {
            image::ImageError::IoError(source) => Error::io(path, source),
            other => Error::Codec(other.to_string()),
        })
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub pixels: Array3<f64>,
    pub tile_id: String,
    /// Block row and column within the tile.
    pub position: (usize, usize),
}

/// Decodes a PNG or JPEG file into a tile.
pub fn load_tile(path: &Path, label: Label) -> Result<Tile> {
    let img = image::open(path).map_err(|source| Error::Decode { path: path.to_path_buf(), source })?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::Shape(format!("{}: expected 8-bit RGB, got {:?}", path.display(), img.color())));
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Tile::from_rgb8(&img.to_rgb8(), label, id)
}

/// Splits a tile into non-overlapping 16x16 blocks in row-major order.
pub fn partition_blocks(tile: &Tile) -> Vec<Block> {
    let rows = tile.height() / BLOCK;
    let cols = tile.width() / BLOCK;
    let mut blocks = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            blocks.push(Block {
                pixels: block_view(&tile.pixels, r * BLOCK, c * BLOCK).to_owned(),
                tile_id: tile.id.clone(),
                position: (r, c),
            });
        }
    }
    blocks
}

/// A 16x16 window with its top-left corner at pixel `(y, x)`.
pub fn block_view(pixels: &Array3<f64>, y: usize, x: usize) -> ArrayView3<'_, f64> {
    pixels.slice(s![y..y + BLOCK, x..x + BLOCK, ..])
}

/// Inverse of [`partition_blocks`].
pub fn reassemble(blocks: &[Block], height: usize, width: usize) -> Result<Array3<f64>> {
    let mut out = Array3::zeros((height, width, 3));
    for b in blocks {
        let (r, c) = b.position;
        if (r + 1) * BLOCK > height || (c + 1) * BLOCK > width {
            return Err(Error::Shape(format!("block {r},{c} outside {height}x{width}")));
        }
        out.slice_mut(s![r * BLOCK..(r + 1) * BLOCK, c * BLOCK..(c + 1) * BLOCK, ..]).assign(&b.pixels);
    }
    Ok(out)
}

/// Area-average downsampling to `target` pixels wide. The scale factor
/// `width / target` must be an integer dividing both dimensions.
pub fn resize(tile: &Tile, target: usize) -> Result<Tile> {
    let (h, w, _) = tile.pixels.dim();
    if target == 0 || !target.is_multiple_of(BLOCK) {
        return Err(Error::Shape(format!("target {target} is not a multiple of {BLOCK}")));
    }
    if target >= w || w % target != 0 {
        return Err(Error::Shape(format!("cannot downscale width {w} to {target} by an integer factor")));
    }
    let f = w / target;
    if h % f != 0 || !(h / f).is_multiple_of(BLOCK) {
        return Err(Error::Shape(format!("height {h} incompatible with factor {f}")));
    }
    let norm = 1.0 / (f * f) as f64;
    let pixels = Array3::from_shape_fn((h / f, w / f, 3), |(y, x, c)| {
        let mut sum = 0.0;
        for dy in 0..f {
            for dx in 0..f {
                sum += tile.pixels[[y * f + dy, x * f + dx, c]];
            }
        }
        (sum * norm).clamp(0.0, 1.0)
    });
    Ok(Tile { pixels, label: tile.label, id: tile.id.clone() })
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every sample and clamps to `[0, 1]`.
pub fn add_gaussian_noise(tile: &Tile, sigma: f64, seed: u64) -> Result<Tile> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(tile.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = tile.clone();
    for v in out.pixels.iter_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Baseline JPEG encode (4:2:0 chroma) at `quality`, then decode.
pub fn jpeg_roundtrip(tile: &Tile, quality: u8) -> Result<Tile> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Invalid(format!("JPEG quality {quality} outside 1..=100")));
    }
    let rgb = tile.to_rgb8();
    let mut buf = Vec::new();
    let mut encoder = Encoder::new(&mut buf, quality);
    encoder.set_sampling_factor(SamplingFactor::R_4_2_0);
    encoder
        .encode(rgb.as_raw(), rgb.width() as u16, rgb.height() as u16, jpeg_encoder::ColorType::Rgb)
        .map_err(|e| Error::Codec(e.to_string()))?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)
        .map_err(|e| Error::Codec(e.to_string()))?
        .to_rgb8();
    Tile::from_rgb8(&decoded, tile.label, tile.id.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Perturbation {
    None,
    Resize { target_size: usize },
    Awgn { sigma: f64, seed: u64 },
    Jpeg { quality: u8 },
}

impl Perturbation {
    /// The evaluation grid: clean, two resizes, three noise levels and three
    /// JPEG quality factors.
    pub fn grid(seed: u64) -> Vec<Perturbation> {
        let mut grid = vec![
            Perturbation::None,
            Perturbation::Resize { target_size: 128 },
            Perturbation::Resize { target_size: 64 },
        ];
        grid.extend([0.02, 0.06, 0.1].map(|sigma| Perturbation::Awgn { sigma, seed }));
        grid.extend([95, 85, 75].map(|quality| Perturbation::Jpeg { quality }));
        grid
    }

    /// Applies the perturbation to one tile. Noise seeds are mixed with the
    /// tile id so that every tile receives its own noise field.
    pub fn apply(&self, tile: &Tile) -> Result<Tile> {
        match *self {
            Perturbation::None => Ok(tile.clone()),
            Perturbation::Resize { target_size } => resize(tile, target_size),
            Perturbation::Awgn { sigma, seed } => add_gaussian_noise(tile, sigma, seed ^ fnv1a(tile.id.as_bytes())),
            Perturbation::Jpeg { quality } => jpeg_roundtrip(tile, quality),
        }
    }

    pub fn apply_all(&self, tiles: &[Tile]) -> Result<Vec<Tile>> {
        if *self == Perturbation::None {
            return Ok(tiles.to_vec());
        }
        par::try_map(tiles, |t| self.apply(t))
    }

    /// Attaches a seed to noise specs parsed without one.
    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            Perturbation::Awgn { sigma, .. } => Perturbation::Awgn { sigma, seed },
            other => other,
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::None => write!(f, "none"),
            Perturbation::Resize { target_size } => write!(f, "resize:{target_size}"),
            Perturbation::Awgn { sigma, .. } => write!(f, "awgn:{sigma}"),
            Perturbation::Jpeg { quality } => write!(f, "jpeg:{quality}"),
        }
    }
}

/// Parses `none`, `resize:N`, `awgn:SIGMA` or `jpeg:Q`. Quality factors
/// written as fractions (`jpeg:0.75`) are mapped onto the 1..=100 scale.
/// Noise seeds default to 0; see [`Perturbation::with_seed`].
impl FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("bad perturbation spec {s:?}"));
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        match (kind, arg) {
            ("none", None) => Ok(Perturbation::None),
            ("resize", Some(a)) => {
                let target_size = a.parse().map_err(|_| bad())?;
                if target_size == 0 || target_size % BLOCK != 0 {
                    return Err(bad());
                }
                Ok(Perturbation::Resize { target_size })
            }
            ("awgn", Some(a)) => {
                let sigma: f64 = a.parse().map_err(|_| bad())?;
                if !sigma.is_finite() || sigma < 0.0 {
                    return Err(bad());
                }
                Ok(Perturbation::Awgn { sigma, seed: 0 })
            }
            ("jpeg", Some(a)) => {
                let q: f64 = a.parse().map_err(|_| bad())?;
                let q = if q > 0.0 && q <= 1.0 && a.contains('.') { q * 100.0 } else { q };
                let q = q.round();
                if !(1.0..=100.0).contains(&q) {
                    return Err(bad());
                }
                Ok(Perturbation::Jpeg { quality: q as u8 })
            }
            _ => Err(bad()),
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub tiles: Vec<Tile>,
}

/// Loads `<root>/real/*` and `<root>/fake/*` (PNG or JPEG) in filename order.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut files = Vec::new();
    for (sub, label) in [("real", Label::Real), ("fake", Label::Fake)] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            continue;
        }
        let mut names: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect();
        names.sort();
        files.extend(names.into_iter().map(|p| (p, label)));
    }
    if files.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no images under {}/real or {}/fake",
            root.display(),
            root.display()
        )));
    }
    let tiles = par::try_map(&files, |(p, label)| load_tile(p, *label))?;
    Ok(Dataset { root: root.to_path_buf(), tiles })
}

/// Knobs for the procedural dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Tile side length in pixels (multiple of 16).
    pub size: usize,
    /// Standard deviation of the fine texture added to every tile.
    pub texture_sigma: f64,
    /// Gaussian blur applied to fakes, in pixels.
    pub blur_sigma: f64,
    /// Amplitude of the periodic pattern injected into fakes.
    pub pattern_amplitude: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { size: 64, texture_sigma: 0.05, blur_sigma: 1.0, pattern_amplitude: 0.02 }
    }
}

/// Real-like content: a smooth colour field, a few sharp-edged patches and
/// fine texture noise.
fn synth_scene(rng: &mut ChaCha8Rng, params: &SynthParams) -> Array3<f64> {
    let n = params.size;
    // Smooth field: bilinear interpolation of a coarse random colour grid.
    let grid = 5;
    let coarse: Vec<[f64; 3]> = (0..grid * grid)
        .map(|_| {
            let base = rng.random_range(0.25..0.75);
            [
                base + rng.random_range(-0.12..0.12),
                base + rng.random_range(-0.12..0.12),
                base + rng.random_range(-0.12..0.12),
            ]
        })
        .collect();
    let mut img = Array3::from_shape_fn((n, n, 3), |(y, x, c)| {
        let gy = y as f64 / n as f64 * (grid - 1) as f64;
        let gx = x as f64 / n as f64 * (grid - 1) as f64;
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
        let at = |r: usize, q: usize| coarse[r * grid + q][c];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    });
    // Sharp-edged rectangles ("buildings", "fields").
    let n_rects = 2 + n / 16;
    for _ in 0..n_rects {
        let h = rng.random_range(3..=n / 3);
        let w = rng.random_range(3..=n / 3);
        let y = rng.random_range(0..n - h);
        let x = rng.random_range(0..n - w);
        let shift = [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)];
        let mut region = img.slice_mut(s![y..y + h, x..x + w, ..]);
        for ((_, _, c), v) in region.indexed_iter_mut() {
            *v += shift[c];
        }
    }
    // Fine texture: luminance-correlated noise plus a little chroma noise.
    let lum = Normal::new(0.0, params.texture_sigma).expect("finite sigma");
    let chroma = Normal::new(0.0, params.texture_sigma * 0.3).expect("finite sigma");
    for y in 0..n {
        for x in 0..n {
            let l = lum.sample(rng);
            for c in 0..3 {
                img[[y, x, c]] += l + chroma.sample(rng);
            }
        }
    }
    img
}

fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w, _) = img.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
        i.clamp(0, n - 1) as usize
    };
    let horizontal = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * img[[y, reflect(x as isize + k as isize - radius, w), c]])
            .sum::<f64>()
    });
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * horizontal[[reflect(y as isize + k as isize - radius, h), x, c]])
            .sum::<f64>()
    })
}

/// Generates one synthetic tile. Fakes are independent real-like draws with
/// high frequencies suppressed and a faint period-2 pattern added.
pub fn synth_tile(label: Label, index: usize, seed: u64, params: &SynthParams) -> Result<Tile> {
    let class_salt: u64 = match label {
        Label::Fake => 0x9e37_79b9_7f4a_7c15,
        _ => 0,
    };
    let stream = seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(class_salt).wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut img = synth_scene(&mut rng, params);
    if label == Label::Fake {
        img = gaussian_blur(&img, params.blur_sigma);
        let a = params.pattern_amplitude;
        for ((y, x, _), v) in img.indexed_iter_mut() {
            let checker = if (x + y) % 2 == 0 { a } else { -a };
            let stripes = if x % 4 < 2 { 0.5 * a } else { -0.5 * a };
            *v += checker + stripes;
        }
    }
    img.mapv_inplace(|v| quantize(v) as f64 / 255.0);
    Tile::new(img, label, format!("{label}_{index:05}"))
}

/// Writes `n_per_class` tiles into each of `<out>/real` and `<out>/fake`.
pub fn synth_dataset(n_per_class: usize, out_dir: &Path, seed: u64, params: &SynthParams) -> Result<()> {
    if n_per_class == 0 {
        return Err(Error::Invalid("n_per_class must be at least 1".into()));
    }
    if params.size == 0 || !params.size.is_multiple_of(BLOCK) {
        return Err(Error::Shape(format!("synthetic tile size {} not a multiple of {BLOCK}", params.size)));
    }
    let jobs: Vec<(Label, usize)> =
        [Label::Real, Label::Fake].into_iter().flat_map(|l| (0..n_per_class).map(move |i| (l, i))).collect();
    for sub in ["real", "fake"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    par::try_map(&jobs, |&(label, i)| {
        let tile = synth_tile(label, i, seed, params)?;
        tile.save_png(&out_dir.join(label.to_string()).join(format!("{}.png", tile.id)))
    })?;
    Ok(())
}

/// In-memory variant of [`synth_dataset`], in the same order as
/// [`load_dataset`] would return the written files.
pub fn synth_tiles(n_per_class: usize, seed: u64, params: &SynthParams) -> Result<Vec<Tile>> {
    let jobs: Vec<(Label, usize)> =
        [Label::Real, Label::Fake].into_iter().flat_map(|l| (0..n_per_class).map(move |i| (l, i))).collect();
    par::try_map(&jobs, |&(label, i)| synth_tile(label, i, seed, params))
}

//! Procedural four-category sky scenes and dataset plumbing.
//!
//! Scenes compose a vertical sky gradient, translucent white cloud
//! blobs, darker gray cloud blobs (both from thresholded multi-octave
//! value noise), and an optional sun disk with a radial halo. Category
//! ids: 0 background, 1 white cloud, 2 gray cloud, 3 sun; overlaps
//! resolve with priority sun > gray > white > background.

pub mod pnm;

pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm, PnmError};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::elem::Elem;
use crate::error::TensorError;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_WHITE_CLOUD: u8 = 1;
pub const LABEL_GRAY_CLOUD: u8 = 2;
pub const LABEL_SUN: u8 = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

pub type DataResult<T> = std::result::Result<T, DataError>;

// ---------------------------------------------------------------------------
// scene generation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SceneConfig {
    /// square extent; must be a positive multiple of 16
    pub size: usize,
    pub seed: u64,
    pub sun_probability: f64,
    /// inclusive blob-count range for white clouds
    pub white_clouds: (usize, usize),
    /// inclusive blob-count range for gray clouds
    pub gray_clouds: (usize, usize),
    pub noise_octaves: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            seed: 0,
            sun_probability: 0.6,
            white_clouds: (1, 3),
            gray_clouds: (1, 2),
            noise_octaves: 3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> DataResult<()> {
        if self.size == 0 || self.size % 16 != 0 {
            return Err(DataError::Invalid(format!(
                "scene size {} must be a positive multiple of 16",
                self.size
            )));
        }
        if self.white_clouds.0 > self.white_clouds.1 || self.gray_clouds.0 > self.gray_clouds.1 {
            return Err(DataError::Invalid("cloud count range reversed".into()));
        }
        Ok(())
    }
}

/// One paired image (planar `[3][S][S]`, values in [0,1]) and label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub size: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

impl SceneSample {
    pub fn image_tensor<E: Elem>(&self) -> Tensor<E> {
        let s = self.size;
        let data: Vec<E> = self.image.iter().map(|&v| E::from_f64(v as f64)).collect();
        Tensor::from_vec(vec![3, s, s], data).unwrap()
    }
}

/// Bilinearly interpolated lattice noise in [0,1]; octaves halve in
/// amplitude as their lattice doubles in resolution.
struct ValueNoise {
    octaves: Vec<(usize, Vec<f64>)>,
    norm: f64,
}

impl ValueNoise {
    fn draw(rng: &mut Rng, octaves: usize) -> Self {
        let mut tables = Vec::new();
        let mut norm = 0.0;
        let mut amp = 1.0;
        for o in 0..octaves {
            let res = 4 << o;
            let cells = (res + 1) * (res + 1);
            let table: Vec<f64> = (0..cells).map(|_| rng.next_f64()).collect();
            tables.push((res, table));
            norm += amp;
            amp *= 0.5;
        }
        ValueNoise {
            octaves: tables,
            norm,
        }
    }

    /// `u`, `v` in [0,1].
    fn at(&self, u: f64, v: f64) -> f64 {
        let mut acc = 0.0;
        let mut amp = 1.0;
        for (res, table) in &self.octaves {
            let res = *res;
            let x = u * res as f64;
            let y = v * res as f64;
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x0, y0) = (x0.min(res - 1), y0.min(res - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let idx = |i: usize, j: usize| table[j * (res + 1) + i];
            let v00 = idx(x0, y0);
            let v10 = idx(x0 + 1, y0);
            let v01 = idx(x0, y0 + 1);
            let v11 = idx(x0 + 1, y0 + 1);
            let val = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10)
                + fy * ((1.0 - fx) * v01 + fx * v11);
            acc += amp * val;
            amp *= 0.5;
        }
        acc / self.norm
    }
}

struct CloudBlob {
    cx: f64,
    cy: f64,
    radius: f64,
    albedo: f64,
    noise: ValueNoise,
}

impl CloudBlob {
    fn draw(rng: &mut Rng, size: f64, octaves: usize, albedo_range: (f64, f64)) -> Self {
        CloudBlob {
            cx: rng.range_f64(0.12, 0.88) * size,
            cy: rng.range_f64(0.12, 0.88) * size,
            radius: rng.range_f64(0.10, 0.20) * size,
            albedo: rng.range_f64(albedo_range.0, albedo_range.1),
            noise: ValueNoise::draw(rng, octaves),
        }
    }

    /// Coverage in [0,1]: >= 0.55 at the blob core, fading to 0 at the rim.
    fn alpha(&self, x: f64, y: f64, size: f64) -> f64 {
        let d = ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt() / self.radius;
        if d >= 1.0 {
            return 0.0;
        }
        let t = ((1.0 - d) / 0.55).clamp(0.0, 1.0);
        let falloff = t * t * (3.0 - 2.0 * t);
        let n = self.noise.at(x / size, y / size);
        (falloff * (0.55 + 0.5 * n)).clamp(0.0, 1.0)
    }
}

struct SunDisk {
    cx: f64,
    cy: f64,
    radius: f64,
}

/// Deterministic scene synthesis: identical `(cfg, index)` pairs yield
/// byte-identical samples.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> SceneSample {
    cfg.validate().expect("scene config");
    let s = cfg.size;
    let sf = s as f64;
    let mut rng = Rng::new(cfg.seed).derive(index);

    // all stochastic choices happen up front, in a fixed order
    let top = [
        rng.range_f64(0.10, 0.30),
        rng.range_f64(0.35, 0.55),
        rng.range_f64(0.75, 0.95),
    ];
    let bottom = [
        rng.range_f64(0.45, 0.65),
        rng.range_f64(0.65, 0.80),
        rng.range_f64(0.85, 1.00),
    ];
    let sun = if rng.chance(cfg.sun_probability) {
        Some(SunDisk {
            cx: rng.range_f64(0.15, 0.85) * sf,
            cy: rng.range_f64(0.15, 0.85) * sf,
            radius: rng.range_f64(0.05, 0.10) * sf,
        })
    } else {
        None
    };
    let n_white =
        cfg.white_clouds.0 + rng.below(cfg.white_clouds.1 - cfg.white_clouds.0 + 1);
    let whites: Vec<CloudBlob> = (0..n_white)
        .map(|_| CloudBlob::draw(&mut rng, sf, cfg.noise_octaves, (0.88, 0.98)))
        .collect();
    let n_gray = cfg.gray_clouds.0 + rng.below(cfg.gray_clouds.1 - cfg.gray_clouds.0 + 1);
    let grays: Vec<CloudBlob> = (0..n_gray)
        .map(|_| CloudBlob::draw(&mut rng, sf, cfg.noise_octaves, (0.40, 0.58)))
        .collect();

    let mut image = vec![0f32; 3 * s * s];
    let mut labels = vec![LABEL_BACKGROUND; s * s];
    for iy in 0..s {
        let t = iy as f64 / (s - 1).max(1) as f64;
        for ix in 0..s {
            let p = iy * s + ix;
            let (x, y) = (ix as f64 + 0.5, iy as f64 + 0.5);
            let mut rgb = [
                top[0] + (bottom[0] - top[0]) * t,
                top[1] + (bottom[1] - top[1]) * t,
                top[2] + (bottom[2] - top[2]) * t,
            ];
            // white clouds, then gray on top (label priority grows)
            for (blobs, label, tint) in [
                (&whites, LABEL_WHITE_CLOUD, [1.00, 1.00, 1.00]),
                (&grays, LABEL_GRAY_CLOUD, [0.95, 0.97, 1.02]),
            ] {
                for blob in blobs.iter() {
                    let a = blob.alpha(x, y, sf);
                    if a <= 0.0 {
                        continue;
                    }
                    let shade = blob.albedo
                        * (0.85 + 0.3 * blob.noise.at(x / sf * 0.7, y / sf * 0.7));
                    for (c, channel) in rgb.iter_mut().enumerate() {
                        *channel += a * (shade * tint[c] - *channel);
                    }
                    if a > 0.5 {
                        labels[p] = label;
                    }
                }
            }
            if let Some(sun) = &sun {
                let d = ((x - sun.cx).powi(2) + (y - sun.cy).powi(2)).sqrt();
                if d <= sun.radius {
                    rgb = [1.0, 0.94, 0.78];
                    labels[p] = LABEL_SUN;
                } else if d < 3.0 * sun.radius {
                    let t = 1.0 - (d - sun.radius) / (2.0 * sun.radius);
                    let glow = 0.55 * t * t;
                    rgb[0] += glow;
                    rgb[1] += glow * 0.92;
                    rgb[2] += glow * 0.70;
                }
            }
            for (c, channel) in rgb.iter().enumerate() {
                image[c * s * s + p] = channel.clamp(0.0, 1.0) as f32;
            }
        }
    }
    SceneSample {
        size: s,
        image,
        labels,
    }
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// Rotates a planar multi-channel map by `quarters x 90` degrees
/// clockwise. Quarter turns on non-square maps would swap extents, so
/// they are rejected.
pub fn rotate_quarter(
    channels: usize,
    h: usize,
    w: usize,
    data: &[f32],
    labels: &[u8],
    quarters: usize,
) -> DataResult<(Vec<f32>, Vec<u8>)> {
    if quarters % 2 == 1 && h != w {
        return Err(DataError::Invalid(format!(
            "right-angle rotation needs a square map, got {h}x{w}"
        )));
    }
    let q = quarters % 4;
    // source pixel feeding out(i, j) for a clockwise turn count
    let map = |i: usize, j: usize| -> (usize, usize) {
        match q {
            0 => (i, j),
            1 => (w - 1 - j, i),
            2 => (h - 1 - i, w - 1 - j),
            _ => (j, h - 1 - i),
        }
    };
    let mut out_img = vec![0f32; data.len()];
    let mut out_lab = vec![0u8; labels.len()];
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = map(i, j);
            for c in 0..channels {
                out_img[(c * h + i) * w + j] = data[(c * h + si) * w + sj];
            }
            out_lab[i * w + j] = labels[si * w + sj];
        }
    }
    Ok((out_img, out_lab))
}

fn flip_horizontal(channels: usize, h: usize, w: usize, data: &mut [f32], labels: &mut [u8]) {
    for c in 0..channels {
        for i in 0..h {
            data[(c * h + i) * w..(c * h + i + 1) * w].reverse();
        }
    }
    for i in 0..h {
        labels[i * w..(i + 1) * w].reverse();
    }
}

/// Random right-angle rotation (uniform over 0/90/180/270) followed by a
/// horizontal flip with probability 0.3; image and labels transform
/// identically. Draw order is fixed: rotation first, then the flip coin.
pub fn augment(sample: &SceneSample, rng: &mut Rng) -> DataResult<SceneSample> {
    let s = sample.size;
    let quarters = rng.below(4);
    let flip = rng.chance(0.3);
    let (mut image, mut labels) =
        rotate_quarter(3, s, s, &sample.image, &sample.labels, quarters)?;
    if flip {
        flip_horizontal(3, s, s, &mut image, &mut labels);
    }
    Ok(SceneSample {
        size: s,
        image,
        labels,
    })
}

// ---------------------------------------------------------------------------
// splits and the on-disk dataset layout
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic disjoint 70/15/15 split covering 0..n exactly once.
pub fn make_splits(n: usize, seed: u64) -> DataResult<Splits> {
    if n < 10 {
        return Err(DataError::Invalid(format!(
            "need at least 10 samples to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let n_train = (n as f64 * 0.70).floor() as usize;
    let n_val = (n as f64 * 0.15).floor() as usize;
    let val_end = n_train + n_val;
    Ok(Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..val_end].to_vec(),
        test: order[val_end..].to_vec(),
    })
}

/// Writes samples as `scene_NNNN.ppm/.pgm` plus a `dataset.txt` manifest
/// with one `image_path label_path split` line per sample.
pub fn write_dataset(dir: &Path, samples: &[SceneSample], splits: &Splits) -> DataResult<()> {
    fs::create_dir_all(dir)?;
    let split_of = |i: usize| -> Split {
        if splits.train.contains(&i) {
            Split::Train
        } else if splits.val.contains(&i) {
            Split::Val
        } else {
            Split::Test
        }
    };
    let mut manifest = String::new();
    for (i, sample) in samples.iter().enumerate() {
        let img = format!("scene_{i:04}.ppm");
        let lab = format!("scene_{i:04}.pgm");
        write_ppm(&dir.join(&img), &sample.image, sample.size, sample.size)?;
        write_pgm(&dir.join(&lab), &sample.labels, sample.size, sample.size)?;
        manifest.push_str(&format!("{img} {lab} {}\n", split_of(i)));
    }
    fs::write(dir.join("dataset.txt"), manifest)?;
    Ok(())
}

/// Reads a dataset directory back into memory.
pub fn load_dataset(dir: &Path) -> DataResult<Vec<(SceneSample, Split)>> {
    let manifest = fs::read_to_string(dir.join("dataset.txt"))?;
    let mut out = Vec::new();
    for (ln, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (img, lab, split) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(DataError::Manifest {
                    line: ln + 1,
                    msg: "expected `image label split`".into(),
                })
            }
        };
        let split = Split::parse(split).ok_or_else(|| DataError::Manifest {
            line: ln + 1,
            msg: format!("unknown split `{split}`"),
        })?;
        let (image, h, w) = read_ppm(&dir.join(img))?;
        let (labels, lh, lw) = read_pgm(&dir.join(lab))?;
        if h != w || lh != h || lw != w {
            return Err(DataError::Manifest {
                line: ln + 1,
                msg: format!("extent mismatch: image {h}x{w}, labels {lh}x{lw}"),
            });
        }
        out.push((
            SceneSample {
                size: h,
                image,
                labels,
            },
            split,
        ));
    }
    Ok(out)
}

/// Paths of one dataset entry (used by the data-generation CLI).
pub fn dataset_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("scene_{index:04}.ppm")),
        dir.join(format!("scene_{index:04}.pgm")),
    )
}

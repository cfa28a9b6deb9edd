//! Image corpora: a synthetic generator, the on-disk container and augmentation.
//!
//! On disk a corpus is a directory holding
//!
//! - `images.bin`: magic `SEMTOKIM`, then little-endian `u32` version (1),
//!   count, height, width and channels, then `count·H·W·C` bytes of `u8`
//!   pixels, each image row-major `H × W × C`;
//! - `index.json`: the same geometry, the class count, one label per image
//!   and, for generated corpora, the generator parameters.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const IMAGES_MAGIC: &[u8; 8] = b"SEMTOKIM";
pub const CORPUS_VERSION: u32 = 1;
pub const IMAGES_FILE: &str = "images.bin";
pub const INDEX_FILE: &str = "index.json";

/// Model inputs are centered and scaled pixel intensities.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

pub fn normalize_pixel(v: u8) -> f64 {
    (v as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD
}

/// Parameters of the synthetic "shapes on textured backgrounds" family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    pub seed: u64,
}

fn default_side() -> usize {
    32
}

fn default_classes() -> usize {
    4
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "synthetic images must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    format: String,
    version: u32,
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    classes: usize,
    labels: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<SyntheticSpec>,
}

/// Labeled `u8` images of one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pixels: Vec<Vec<u8>>,
    pub labels: Vec<u32>,
    pub generator: Option<SyntheticSpec>,
}

impl Corpus {
    pub fn new(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            channels,
            classes,
            pixels: Vec::new(),
            labels: Vec::new(),
            generator: None,
        }
    }

    pub fn push(&mut self, pixels: Vec<u8>, label: u32) -> Result<()> {
        if pixels.len() != self.height * self.width * self.channels {
            return Err(Error::shape(
                "corpus image",
                &[pixels.len()],
                &[self.height, self.width, self.channels],
            ));
        }
        self.pixels.push(pixels);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        &self.pixels[i]
    }

    /// Image `i` as an `H × W × C` model input: each byte `v` becomes
    /// `(v/255 − PIXEL_MEAN) / PIXEL_STD`.
    pub fn image<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let data = self.pixels[i].iter().map(|&p| T::of(normalize_pixel(p))).collect();
        Tensor::new([self.height, self.width, self.channels], data).expect("validated on push")
    }

    pub fn images<T: Scalar>(&self) -> Vec<Tensor<T>> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    /// A corpus holding images `range` of this one.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Corpus {
        Corpus {
            pixels: self.pixels[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            ..self.clone()
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bin = Vec::with_capacity(28 + self.pixels.iter().map(Vec::len).sum::<usize>());
        bin.extend_from_slice(IMAGES_MAGIC);
        for v in [CORPUS_VERSION, self.len() as u32, self.height as u32, self.width as u32, self.channels as u32] {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.pixels {
            bin.extend_from_slice(p);
        }
        fs::File::create(dir.join(IMAGES_FILE))?.write_all(&bin)?;
        let index = Index {
            format: "semtok-corpus".into(),
            version: CORPUS_VERSION,
            count: self.len(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            classes: self.classes,
            labels: self.labels.clone(),
            generator: self.generator,
        };
        let mut json = serde_json::to_string_pretty(&index)?;
        json.push('\n');
        fs::write(dir.join(INDEX_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let index: Index = serde_json::from_str(&fs::read_to_string(&index_path)?).map_err(|e| Error::Format {
            path: index_path.display().to_string(),
            msg: e.to_string(),
        })?;
        let bin_path = dir.join(IMAGES_FILE);
        let bad = |msg: String| Error::Format {
            path: bin_path.display().to_string(),
            msg,
        };
        let mut bin = Vec::new();
        fs::File::open(&bin_path)?.read_to_end(&mut bin)?;
        if bin.len() < 28 || &bin[..8] != IMAGES_MAGIC {
            return Err(bad("missing image container header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bin[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (version, count, h, w, c) = (word(0) as u32, word(1), word(2), word(3), word(4));
        if version != CORPUS_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        if (count, h, w, c) != (index.count, index.height, index.width, index.channels) {
            return Err(bad("header disagrees with index.json".into()));
        }
        if index.labels.len() != count {
            return Err(bad(format!("{} labels for {count} images", index.labels.len())));
        }
        let per = h * w * c;
        if bin.len() != 28 + count * per {
            return Err(bad(format!("expected {} pixel bytes, found {}", count * per, bin.len() - 28)));
        }
        let pixels = bin[28..].chunks(per.max(1)).take(count).map(<[u8]>::to_vec).collect();
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            classes: index.classes,
            pixels,
            labels: index.labels,
            generator: index.generator,
        })
    }
}

/// Class-conditioned shapes on striped, noisy backgrounds.
///
/// The class fixes the shape kind (square, disk, triangle, cross, cycling)
/// and a hue; size, position, texture and noise are random. Deterministic per seed.
pub fn make_synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = Corpus::new(spec.height, spec.width, 3, spec.classes);
    corpus.generator = Some(*spec);
    for i in 0..spec.count {
        let label = (i % spec.classes) as u32;
        let img = render_image(spec, label as usize, &mut rng);
        corpus.push(img, label)?;
    }
    Ok(corpus)
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn render_image(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let base: [f64; 3] = [rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5)];
    let freq = rng.gen_range(0.3..1.2);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut px = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let stripe = 0.08 * ((x as f64 * ca + y as f64 * sa) * freq).sin();
            for c in 0..3 {
                px[(y * w + x) * 3 + c] = base[c] + stripe + rng.gen_range(-0.04..0.04);
            }
        }
    }
    let hue = class as f64 / spec.classes as f64 + rng.gen_range(-0.04..0.04);
    let color = hue_to_rgb(hue).map(|v| 0.25 + 0.75 * v);
    let side = h.min(w) as f64;
    let radius = rng.gen_range(0.18 * side..0.32 * side);
    let cy = rng.gen_range(radius..h as f64 - radius);
    let cx = rng.gen_range(radius..w as f64 - radius);
    let kind = class % 4;
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let inside = match kind {
                0 => dx.abs() <= radius * 0.85 && dy.abs() <= radius * 0.85,
                1 => dx * dx + dy * dy <= radius * radius,
                2 => dy <= radius * 0.8 && dy >= -radius && dx.abs() <= (dy + radius) * 0.6,
                _ => {
                    (dx.abs() <= radius * 0.3 && dy.abs() <= radius) || (dy.abs() <= radius * 0.3 && dx.abs() <= radius)
                }
            };
            if inside {
                for c in 0..3 {
                    px[(y * w + x) * 3 + c] = color[c] + rng.gen_range(-0.03..0.03);
                }
            }
        }
    }
    px.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Crop of random area fraction and aspect ratio, resized bilinearly back to
/// the input size.
pub fn random_resized_crop<T: Scalar>(
    image: &Tensor<T>,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut dyn RngCore,
) -> Result<Tensor<T>> {
    let [h, w, c]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::shape("random_resized_crop", image.shape(), &[0, 0, 0]))?;
    let area = (h * w) as f64;
    let (mut ch, mut cw, mut top, mut left) = (h, w, 0usize, 0usize);
    for _ in 0..10 {
        let target = area * rng.gen_range(scale.0..=scale.1);
        let log_r = rng.gen_range(ratio.0.ln()..=ratio.1.ln());
        let ar = log_r.exp();
        let cw_try = (target * ar).sqrt().round() as usize;
        let ch_try = (target / ar).sqrt().round() as usize;
        if cw_try >= 1 && ch_try >= 1 && cw_try <= w && ch_try <= h {
            ch = ch_try;
            cw = cw_try;
            top = rng.gen_range(0..=h - ch);
            left = rng.gen_range(0..=w - cw);
            break;
        }
    }
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let sy = ((y as f64 + 0.5) * ch as f64 / h as f64 - 0.5).clamp(0.0, (ch - 1) as f64) + top as f64;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(top + ch - 1);
        let fy = sy - y0 as f64;
        for x in 0..w {
            let sx = ((x as f64 + 0.5) * cw as f64 / w as f64 - 0.5).clamp(0.0, (cw - 1) as f64) + left as f64;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(left + cw - 1);
            let fx = sx - x0 as f64;
            for k in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + k].as_f64();
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                out.push(T::of(v));
            }
        }
    }
    Tensor::new([h, w, c], out)
}

/// Crop parameters used during training.
pub const CROP_SCALE: (f64, f64) = (0.5, 1.0);
pub const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

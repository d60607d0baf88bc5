//! Segmentation samples: a seeded synthetic multi-scale generator, a PNG
//! directory loader and the train/validation/test split.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const SPLIT_STREAM: u64 = 0x5EED_5A11;
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `C × H × W`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `H × W` labels.
    pub mask: Vec<usize>,
    pub id: String,
}

impl Sample {
    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&l| l > 0).count() as f64 / self.mask.len() as f64
    }
}

/// Stacks samples into an `N×C×H×W` batch and the concatenated labels.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor, Vec<usize>)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let x = Tensor::stack(&images)?;
    let labels = samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
    Ok((x, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub r_min: f64,
    pub r_max: f64,
    pub noise_sigma: f64,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::Config(format!("image size {} too small", self.size)));
        }
        if !(self.r_min >= 1.0 && self.r_min <= self.r_max) {
            return Err(Error::Config(format!(
                "radius range [{}, {}] must satisfy 1 <= r_min <= r_max",
                self.r_min, self.r_max
            )));
        }
        if !(self.r_max < self.size as f64 / 2.0) {
            return Err(Error::Config(format!(
                "r_max {} must be below half the image size {}",
                self.r_max, self.size
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// A rotated ellipse in pixel-centre coordinates (`x` = column, `y` = row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    /// Intensity added over the background.
    pub contrast: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    fn half_extent(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let ex = (self.a * self.a * c * c + self.b * self.b * s * s).sqrt();
        let ey = (self.a * self.a * s * s + self.b * self.b * c * c).sqrt();
        (ex, ey)
    }

    fn raster(&self, size: usize) -> Vec<usize> {
        let mut px = Vec::new();
        for y in 0..size {
            for x in 0..size {
                if self.contains(x as f64, y as f64) {
                    px.push(y * size + x);
                }
            }
        }
        px
    }
}

/// A synthetic sample together with the shapes that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample: Sample,
    pub shapes: Vec<Ellipse>,
    pub background: f64,
}

fn log_uniform(rng: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo.ln()..=hi.ln()).exp()
    }
}

/// Sample `index` of the synthetic set; a pure function of `(params.seed, index)`.
///
/// One to three non-overlapping bright ellipses on a flat background, radii
/// drawn log-uniformly from `[r_min, r_max]`, contrast from `[0.2, 0.6]`,
/// additive Gaussian noise, clamped to `[0, 1]`.
pub fn synth_sample(params: &SynthParams, index: usize) -> Result<SynthSample> {
    params.validate()?;
    let size = params.size;
    let mut rng = rng::derived(params.seed, index as u64);
    let background = rng.gen_range(0.1..0.3);
    let wanted = rng.gen_range(1..=3usize);
    let mut mask = vec![0usize; size * size];
    let mut shapes = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while shapes.len() < wanted && attempts < PLACEMENT_ATTEMPTS {
        attempts += 1;
        let mut e = Ellipse {
            cx: 0.0,
            cy: 0.0,
            a: log_uniform(&mut rng, params.r_min, params.r_max),
            b: log_uniform(&mut rng, params.r_min, params.r_max),
            angle: rng.gen_range(0.0..PI),
            contrast: rng.gen_range(0.2..0.6),
        };
        let (ex, ey) = e.half_extent();
        let hi = size as f64 - 1.0;
        e.cx = if ex <= hi - ex { rng.gen_range(ex..=hi - ex) } else { hi / 2.0 };
        e.cy = if ey <= hi - ey { rng.gen_range(ey..=hi - ey) } else { hi / 2.0 };
        let px = e.raster(size);
        if px.is_empty() || px.iter().any(|&p| mask[p] != 0) {
            continue;
        }
        px.iter().for_each(|&p| mask[p] = 1);
        shapes.push(e);
    }
    if shapes.len() < wanted {
        log::warn!(
            "synthetic sample {index}: placed {} of {wanted} shapes after {PLACEMENT_ATTEMPTS} attempts",
            shapes.len()
        );
    }
    let mut image = vec![background; size * size];
    for e in &shapes {
        for p in e.raster(size) {
            image[p] += e.contrast;
        }
    }
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma).expect("validated sigma");
        for v in image.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let sample = Sample {
        image: Tensor::new(&[1, size, size], image)?,
        mask,
        id: format!("synth_{}_{index:05}", params.seed),
    };
    Ok(SynthSample {
        sample,
        shapes,
        background,
    })
}

pub fn synth_multiscale(params: &SynthParams) -> Result<Vec<Sample>> {
    (0..params.n)
        .map(|i| synth_sample(params, i).map(|s| s.sample))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn standard(seed: u64) -> Self {
        Self {
            train_frac: 0.70,
            val_frac: 0.10,
            test_frac: 0.20,
            seed,
        }
    }

    /// `(floor(train·n), floor(val·n), remainder)`.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train_frac);
        let val = floor(self.val_frac);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Sorts by id, shuffles with the split seed and partitions by fractions.
pub fn split(samples: Vec<Sample>, spec: &SplitSpec) -> Result<Split> {
    let total = spec.train_frac + spec.val_frac + spec.test_frac;
    if (total - 1.0).abs() > 1e-9 || [spec.train_frac, spec.val_frac, spec.test_frac].iter().any(|&f| f < 0.0) {
        return Err(Error::Config(format!("split fractions must be >= 0 and sum to 1, got {total}")));
    }
    if samples.len() < 10 {
        return Err(Error::Data(format!("need at least 10 samples to split, got {}", samples.len())));
    }
    let counts = spec.counts(samples.len());
    split_counts(samples, counts, spec.seed)
}

/// Like [`split`] with explicit `(train, val, test)` sizes.
pub fn split_counts(mut samples: Vec<Sample>, counts: (usize, usize, usize), seed: u64) -> Result<Split> {
    let (tr, va, te) = counts;
    if tr + va + te != samples.len() {
        return Err(Error::Data(format!(
            "split sizes {tr}+{va}+{te} do not cover {} samples",
            samples.len()
        )));
    }
    let ids: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    if ids.len() != samples.len() {
        return Err(Error::Data("sample ids are not unique".into()));
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::derived(seed, SPLIT_STREAM));
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Sample> {
        let mut part: Vec<Sample> = idx.iter().map(|&i| slots[i].take().expect("each index once")).collect();
        part.sort_by(|a, b| a.id.cmp(&b.id));
        part
    };
    Ok(Split {
        train: take(&order[..tr]),
        val: take(&order[tr..tr + va]),
        test: take(&order[tr + va..]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub target_size: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub num_classes: usize,
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Data(format!("{}: palette not expanded", path.display())))
        }
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!("{}: expected 8-bit samples", path.display())));
    }
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        pixels: buf,
    })
}

fn nearest_index(dst: usize, dst_size: usize, src_size: usize) -> usize {
    dst * src_size / dst_size
}

/// Nearest-neighbour resize of a row-major plane.
pub fn resize_nearest<T: Copy>(src: &[T], src_h: usize, src_w: usize, size: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = nearest_index(y, size, src_h);
        for x in 0..size {
            out.push(src[sy * src_w + nearest_index(x, size, src_w)]);
        }
    }
    out
}

/// Intensity plane of one output channel.
fn channel_plane(d: &Decoded, channel: usize, want: usize) -> Vec<f64> {
    let colour = if d.channels >= 3 { 3 } else { 1 };
    let px = d.width * d.height;
    (0..px)
        .map(|p| {
            let base = p * d.channels;
            let v = if want == 1 && colour == 3 {
                (d.pixels[base] as f64 + d.pixels[base + 1] as f64 + d.pixels[base + 2] as f64) / 3.0
            } else if colour == 3 {
                d.pixels[base + channel] as f64
            } else {
                d.pixels[base] as f64
            };
            v / 255.0
        })
        .collect()
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let unreadable = |e: std::io::Error| Error::Data(format!("{}: {e}", dir.display()));
    let entries = std::fs::read_dir(dir).map_err(unreadable)?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(unreadable)?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Data(format!("non UTF-8 file name {}", path.display())))?
                .to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads `<images_dir>/*.png` with masks of the same stem from `masks_dir`.
///
/// Images are scaled to `[0, 1]`; colour images are averaged when one channel
/// is requested and grayscale images are replicated when three are. Both
/// images and masks are resized by nearest neighbour. With two classes masks
/// are binarised at `> 127`; otherwise pixel values are the labels.
pub fn load_directory(images_dir: &Path, masks_dir: &Path, opts: &LoadOptions) -> Result<Vec<Sample>> {
    if !matches!(opts.channels, 1 | 3) {
        return Err(Error::Config(format!("channels must be 1 or 3, got {}", opts.channels)));
    }
    if opts.target_size == 0 || opts.num_classes < 2 {
        return Err(Error::Config("target size must be positive and classes >= 2".into()));
    }
    let images = png_stems(images_dir)?;
    let masks = png_stems(masks_dir)?;
    let image_stems: BTreeSet<&str> = images.iter().map(|(s, _)| s.as_str()).collect();
    let mask_stems: BTreeSet<&str> = masks.iter().map(|(s, _)| s.as_str()).collect();
    let unpaired: Vec<&str> = image_stems.symmetric_difference(&mask_stems).copied().collect();
    if !unpaired.is_empty() {
        return Err(Error::Data(format!("unpaired files: {}", unpaired.join(", "))));
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", images_dir.display())));
    }
    let mut failures = Vec::new();
    let mut samples = Vec::with_capacity(images.len());
    for ((stem, img_path), (_, mask_path)) in images.iter().zip(&masks) {
        match load_pair(stem, img_path, mask_path, opts) {
            Ok(s) => samples.push(s),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Data(format!("failed to load: {}", failures.join("; "))));
    }
    Ok(samples)
}

fn image_tensor(img: &Decoded, channels: usize, size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        let plane = channel_plane(img, c, channels);
        data.extend(resize_nearest(&plane, img.height, img.width, size));
    }
    Tensor::new(&[channels, size, size], data)
}

/// One PNG as a `channels × size × size` tensor, preprocessed like [`load_directory`].
pub fn load_image(path: &Path, channels: usize, size: usize) -> Result<Tensor> {
    if !matches!(channels, 1 | 3) || size == 0 {
        return Err(Error::Config(format!("cannot load {channels} channels at size {size}")));
    }
    image_tensor(&decode_png(path)?, channels, size)
}

fn load_pair(stem: &str, img_path: &Path, mask_path: &Path, opts: &LoadOptions) -> Result<Sample> {
    let img = decode_png(img_path)?;
    let mask = decode_png(mask_path)?;
    if (img.width, img.height) != (mask.width, mask.height) {
        return Err(Error::Data(format!(
            "{stem}: image {}x{} and mask {}x{} differ",
            img.width, img.height, mask.width, mask.height
        )));
    }
    let size = opts.target_size;
    let image = image_tensor(&img, opts.channels, size)?;
    let raw: Vec<u8> = (0..mask.width * mask.height).map(|p| mask.pixels[p * mask.channels]).collect();
    let labels = raw
        .iter()
        .map(|&v| {
            if opts.num_classes == 2 {
                Ok(usize::from(v > 127))
            } else if (v as usize) < opts.num_classes {
                Ok(v as usize)
            } else {
                Err(Error::Data(format!("{stem}: mask label {v} >= {} classes", opts.num_classes)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        image,
        mask: resize_nearest(&labels, mask.height, mask.width, size),
        id: stem.to_string(),
    })
}

fn write_png(path: &Path, width: usize, height: usize, colour: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(colour);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writer
        .finish()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes `<root>/images/<id>.png` and `<root>/masks/<id>.png`.
///
/// Binary masks are stored as 0/255, multi-class masks as raw labels.
pub fn save_sample(root: &Path, sample: &Sample, num_classes: usize) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (c, h, w) = (sample.channels(), sample.height(), sample.width());
    let colour = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Data(format!("cannot write {c}-channel image"))),
    };
    let mut px = vec![0u8; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            let v = sample.image.data()[ch * h * w + p];
            px[p * c + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    write_png(&images.join(format!("{}.png", sample.id)), w, h, colour, &px)?;
    let mask: Vec<u8> = sample
        .mask
        .iter()
        .map(|&l| if num_classes == 2 { if l > 0 { 255 } else { 0 } } else { l as u8 })
        .collect();
    write_png(&masks.join(format!("{}.png", sample.id)), w, h, png::ColorType::Grayscale, &mask)
}

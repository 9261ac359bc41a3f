//! Dataset manifests, image I/O, preprocessing and batching.
//!
//! A manifest is a CSV file with header `path,label,mask_path`. Paths are
//! relative to the manifest's directory; `mask_path` is empty when a sample has
//! no mask. Optional leading directives fix the label table and split:
//!
//! ```text
//! # labels: Normal,Pneumonia,COVID-19
//! # split: train
//! path,label,mask_path
//! img/0001.png,Normal,mask/0001.png
//! ```
//!
//! Without a `labels` directive the table is the distinct labels in order of
//! first appearance.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split {other:?}"))),
        }
    }
}

/// Full chest image, or lung-restricted image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    Full,
    Masked,
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PipelineMode::Full => "full",
            PipelineMode::Masked => "masked",
        })
    }
}

impl FromStr for PipelineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(PipelineMode::Full),
            "masked" => Ok(PipelineMode::Masked),
            other => Err(Error::Config(format!("mode must be full or masked, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleEntry {
    pub image: PathBuf,
    pub label: usize,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub samples: Vec<SampleEntry>,
    pub label_names: Vec<String>,
    pub split: Option<Split>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// One `name: count` line per class.
    pub fn count_report(&self) -> String {
        self.label_names
            .iter()
            .zip(self.class_counts())
            .map(|(n, c)| format!("{n}: {c}\n"))
            .collect()
    }

    pub fn all_masked(&self) -> bool {
        self.samples.iter().all(|s| s.mask.is_some())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Reads a manifest, building the label table from the file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    read_manifest(path, None)
}

/// Reads a manifest whose labels must come from `labels` (e.g. a test split
/// that has to share the training split's class indices).
pub fn load_manifest_with_labels(path: &Path, labels: &[String]) -> Result<DatasetManifest> {
    read_manifest(path, Some(labels))
}

fn read_manifest(path: &Path, fixed: Option<&[String]>) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut declared: Option<Vec<String>> = None;
    let mut split = None;
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix('#') else {
            if line.trim().is_empty() {
                continue;
            }
            break;
        };
        let lineno = Some(i as u64 + 1);
        if let Some((key, value)) = rest.split_once(':') {
            match key.trim() {
                "labels" => {
                    declared = Some(value.split(',').map(|s| s.trim().to_string()).collect());
                }
                "split" => {
                    split = Some(
                        value
                            .parse()
                            .map_err(|_| Error::data_at(path, lineno, format!("unknown split {:?}", value.trim())))?,
                    );
                }
                _ => {}
            }
        }
    }
    if let (Some(fixed), Some(declared)) = (fixed, &declared) {
        if fixed != declared.as_slice() {
            return Err(Error::data_at(
                path,
                None,
                format!("label table {declared:?} differs from expected {fixed:?}"),
            ));
        }
    }
    let closed = fixed.map(<[String]>::to_vec).or(declared.clone());
    let mut labels: Vec<String> = closed.clone().unwrap_or_default();

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::data_at(path, None, e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols != ["path", "label", "mask_path"] && cols != ["path", "label"] {
        return Err(Error::data_at(
            path,
            headers.position().map(|p| p.line()),
            format!("header must be path,label,mask_path, got {}", cols.join(",")),
        ));
    }
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::data_at(path, e.position().map(|p| p.line()), e.to_string()))?;
        let line = rec.position().map(|p| p.line());
        let bad = |msg: String| Error::data_at(path, line, msg);
        if rec.len() < 2 || rec.len() > 3 {
            return Err(bad(format!("expected 2 or 3 fields, got {}", rec.len())));
        }
        let rel = &rec[0];
        if rel.is_empty() {
            return Err(bad("empty image path".into()));
        }
        let name = &rec[1];
        let label = match labels.iter().position(|l| l == name) {
            Some(i) => i,
            None if closed.is_none() && !name.is_empty() => {
                labels.push(name.to_string());
                labels.len() - 1
            }
            None => return Err(bad(format!("unknown label {name:?}"))),
        };
        let image = base.join(rel);
        if !image.is_file() {
            return Err(bad(format!("image {} does not exist", image.display())));
        }
        if !seen.insert(image.clone()) {
            return Err(bad(format!("duplicate image path {rel}")));
        }
        let mask = match rec.get(2) {
            Some(m) if !m.is_empty() => {
                let m = base.join(m);
                if !m.is_file() {
                    return Err(bad(format!("mask {} does not exist", m.display())));
                }
                Some(m)
            }
            _ => None,
        };
        samples.push(SampleEntry { image, label, mask });
    }
    Ok(DatasetManifest {
        samples,
        label_names: labels,
        split,
    })
}

/// Writes `manifest` to `path`, storing paths relative to the file's directory
/// where possible.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
    let mut out = format!("# labels: {}\n", manifest.label_names.join(","));
    if let Some(s) = manifest.split {
        out.push_str(&format!("# split: {s}\n"));
    }
    out.push_str("path,label,mask_path\n");
    for s in &manifest.samples {
        out.push_str(&format!(
            "{},{},{}\n",
            rel(&s.image),
            manifest.label_names[s.label],
            s.mask.as_deref().map(rel).unwrap_or_default()
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::data(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }
}

/// Reads an 8-bit grayscale PNG (other PNG color types are converted) or a
/// binary/ASCII PGM.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        return parse_pgm(&bytes).map_err(|m| Error::data_at(path, None, m));
    }
    let img = image::load_from_memory(&bytes).map_err(|e| Error::data_at(path, None, e.to_string()))?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    GrayImage::new(w as usize, h as usize, luma.into_raw())
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 2;
    let mut header = [0usize; 3];
    for slot in &mut header {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed PGM header")?;
    }
    let [w, h, maxval] = header;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PGM maxval {maxval}"));
    }
    let scale = |v: usize| ((v * 255 + maxval / 2) / maxval) as u8;
    let pixels: Vec<u8> = if bytes.starts_with(b"P5") {
        let data = bytes.get(pos + 1..pos + 1 + w * h).ok_or("truncated PGM data")?;
        data.iter().map(|&v| scale(v as usize)).collect()
    } else {
        std::str::from_utf8(&bytes[pos..])
            .map_err(|_| "malformed PGM data")?
            .split_ascii_whitespace()
            .take(w * h)
            .map(|t| {
                t.parse::<usize>()
                    .map(scale)
                    .map_err(|_| "malformed PGM value".to_string())
            })
            .collect::<std::result::Result<_, _>>()?
    };
    GrayImage::new(w, h, pixels).map_err(|e| e.to_string())
}

pub fn write_png(path: &Path, img: &GrayImage) -> Result<()> {
    image::save_buffer_with_format(
        path,
        &img.pixels,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::data_at(path, None, other.to_string()),
    })
}

/// Binary (P5) PGM.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A grayscale image with an optional binary mask of the same extents.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: GrayImage,
    /// Values in `{0, 1}`.
    pub mask: Option<Vec<u8>>,
}

impl ImageSample {
    pub fn new(image: GrayImage, mask: Option<Vec<u8>>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.len() != image.pixels.len() {
                return Err(Error::data("mask extents differ from image extents"));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::data("mask values must be 0 or 1"));
            }
        }
        Ok(Self { image, mask })
    }

    /// Loads an entry's image and, if present, its mask (0/255 → 0/1).
    pub fn load(entry: &SampleEntry) -> Result<Self> {
        let image = read_gray(&entry.image)?;
        let mask = match &entry.mask {
            None => None,
            Some(p) => {
                let m = read_gray(p)?;
                if (m.width, m.height) != (image.width, image.height) {
                    return Err(Error::data_at(
                        p,
                        None,
                        format!(
                            "mask is {}x{}, image is {}x{}",
                            m.width, m.height, image.width, image.height
                        ),
                    ));
                }
                let bits = m
                    .pixels
                    .iter()
                    .map(|&v| match v {
                        0 => Ok(0),
                        1 | 255 => Ok(1),
                        other => Err(Error::data_at(p, None, format!("mask value {other} is not 0 or 255"))),
                    })
                    .collect::<Result<Vec<u8>>>()?;
                Some(bits)
            }
        };
        Self::new(image, mask)
    }
}

/// Bilinear resize with corner-aligned sampling: output pixel `i` samples
/// source coordinate `i·(in−1)/(out−1)`, so corners map onto corners.
pub fn resize_bilinear(src: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let x0 = (x.floor() as usize).min(n_in - 1);
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, height, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, width, out_w);
            let at = |y: usize, x: usize| src[y * width + x];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Turns a sample into a `[channels × size × size]` model input.
///
/// Masked mode zeroes pixels outside the mask, then both modes resize
/// bilinearly, scale 8-bit values to `[0, 1]` and standardize with mean 0.5
/// and std 0.5, and finally replicate the gray channel `channels` times.
pub fn preprocess(sample: &ImageSample, size: usize, mode: PipelineMode, channels: usize) -> Result<Tensor> {
    let img = &sample.image;
    let mut px: Vec<f64> = img.pixels.iter().map(|&v| f64::from(v)).collect();
    if mode == PipelineMode::Masked {
        let mask = sample
            .mask
            .as_ref()
            .ok_or_else(|| Error::data("masked mode needs a mask for every sample"))?;
        if mask.iter().all(|&m| m == 0) {
            log::warn!("all-zero mask; sample becomes a blank image");
        }
        for (p, &m) in px.iter_mut().zip(mask) {
            *p *= f64::from(m);
        }
    }
    let resized = resize_bilinear(&px, img.width, img.height, size, size);
    let plane: Vec<f64> = resized.iter().map(|v| (v / 255.0 - 0.5) / 0.5).collect();
    let mut data = Vec::with_capacity(plane.len() * channels);
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    Tensor::new(vec![channels, size, size], data)
}

/// Every sample of a manifest, preprocessed and held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl PreparedDataset {
    pub fn load(manifest: &DatasetManifest, size: usize, mode: PipelineMode, channels: usize) -> Result<Self> {
        if mode == PipelineMode::Masked && !manifest.all_masked() {
            return Err(Error::data("masked mode needs a mask path for every sample"));
        }
        let inputs = manifest
            .samples
            .iter()
            .map(|e| preprocess(&ImageSample::load(e)?, size, mode, channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs,
            labels: manifest.labels(),
            num_classes: manifest.num_classes(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Stacks the given samples into `[B × C × S × S]`.
    pub fn stack(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let first = self
            .inputs
            .get(*indices.first().ok_or_else(|| Error::Usage("empty batch".into()))?);
        let shape = first
            .ok_or_else(|| Error::Usage("batch index out of range".into()))?
            .shape()
            .to_vec();
        let mut data = Vec::with_capacity(indices.len() * shape.iter().product::<usize>());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let t = self
                .inputs
                .get(i)
                .ok_or_else(|| Error::Usage("batch index out of range".into()))?;
            data.extend_from_slice(t.data());
            labels.push(self.labels[i]);
        }
        let mut full = vec![indices.len()];
        full.extend(shape);
        Ok((Tensor::new(full, data)?, labels))
    }

    /// Batches for one epoch, see [`batch_order`].
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize, shuffle: bool) -> Result<BatchIter<'_>> {
        Ok(BatchIter {
            data: self,
            order: batch_order(self.len(), batch_size, seed, epoch, shuffle)?.into_iter(),
        })
    }
}

/// Stream offset for per-epoch shuffling.
const SHUFFLE_STREAM: u64 = 1 << 32;

/// Sample indices for one epoch split into batches. Every index appears once,
/// the last batch may be short, and a shuffled order depends only on `seed`
/// and `epoch`.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::Usage("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        Rng::stream(seed, SHUFFLE_STREAM + epoch as u64).shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub struct BatchIter<'a> {
    data: &'a PreparedDataset,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<(Tensor, Vec<usize>)>;

    fn next(&mut self) -> Option<Self::Item> {
        self.order.next().map(|idx| self.data.stack(&idx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStyle {
    /// Two ellipses roughly where lungs sit on a frontal radiograph.
    Lungs,
    /// Every pixel inside; masked preprocessing becomes the identity.
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Pgm,
}

/// Parameters of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub split: Split,
    pub mask_style: MaskStyle,
    pub format: ImageFormat,
}

impl SynthSpec {
    pub fn new(classes: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            image_size,
            seed,
            split: Split::Train,
            mask_style: MaskStyle::Lungs,
            format: ImageFormat::Png,
        }
    }
}

fn lung_mask(size: usize) -> Vec<u8> {
    let s = size as f64;
    let (cy, ry, rx) = (0.5 * s, 0.36 * s, 0.17 * s);
    let mut m = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = [0.3 * s, 0.7 * s].iter().any(|&cx| {
                let dx = (fx - cx) / rx;
                let dy = (fy - cy) / ry;
                dx * dx + dy * dy <= 1.0
            });
            m[y * size + x] = u8::from(inside);
        }
    }
    m
}

/// Class `k` carries a bright blob inside one lung field, whose position
/// cycles through a fixed set of sites, plus an oriented grating; noise and
/// positional jitter come from the seed.
fn synth_image(class: usize, classes: usize, size: usize, rng: &mut Rng) -> Vec<u8> {
    let s = size as f64;
    let sites = [
        (0.3, 0.27),
        (0.7, 0.73),
        (0.3, 0.73),
        (0.7, 0.27),
        (0.3, 0.5),
        (0.7, 0.5),
    ];
    let (sx, sy) = sites[class % sites.len()];
    let ring = (class / sites.len()) as f64;
    let bx = sx * s + rng.uniform_range(-0.03, 0.03) * s;
    let by = sy * s + rng.uniform_range(-0.03, 0.03) * s;
    let radius = (0.09 + 0.03 * ring) * s;
    let angle = std::f64::consts::PI * class as f64 / classes as f64;
    let freq = 2.0 * std::f64::consts::PI * (2.0 + (class % 3) as f64) / s;
    let (ca, sa) = (angle.cos(), angle.sin());
    let phase = rng.uniform_range(0.0, 0.5);
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let chest = 70.0 + 40.0 * (1.0 - ((fx - 0.5 * s) / (0.5 * s)).powi(2));
            let d2 = ((fx - bx).powi(2) + (fy - by).powi(2)) / (radius * radius);
            let blob = 120.0 * (-0.5 * d2).exp();
            let grating = 25.0 * ((fx * ca + fy * sa) * freq + phase).sin();
            let noise = rng.uniform_range(-15.0, 15.0);
            px.push((chest + blob + grating + noise).round().clamp(0.0, 255.0) as u8);
        }
    }
    px
}

/// Writes a seeded, learnable synthetic dataset under `dir` and returns its
/// manifest (also written to `dir/<split>.csv`). File names are prefixed by
/// the split, so a train and a test set can share one directory.
pub fn generate_synthetic(spec: &SynthSpec, dir: &Path) -> Result<DatasetManifest> {
    if spec.classes == 0 || spec.per_class == 0 || spec.image_size == 0 {
        return Err(Error::Usage(
            "class count, per-class count and image size must be at least 1".into(),
        ));
    }
    let img_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let ext = match spec.format {
        ImageFormat::Png => "png",
        ImageFormat::Pgm => "pgm",
    };
    let write = |path: &Path, img: &GrayImage| match spec.format {
        ImageFormat::Png => write_png(path, img),
        ImageFormat::Pgm => write_pgm(path, img),
    };
    let size = spec.image_size;
    let mask_bits = match spec.mask_style {
        MaskStyle::Lungs => lung_mask(size),
        MaskStyle::Ones => vec![1; size * size],
    };
    let mask_img = GrayImage::new(size, size, mask_bits.iter().map(|&b| b * 255).collect())?;
    let mut rng = Rng::new(spec.seed);
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for i in 0..spec.per_class {
        for class in 0..spec.classes {
            let idx = i * spec.classes + class;
            let name = format!("{}_{idx:05}_c{class}.{ext}", spec.split);
            let img = GrayImage::new(size, size, synth_image(class, spec.classes, size, &mut rng))?;
            let image = img_dir.join(&name);
            let mask = mask_dir.join(&name);
            write(&image, &img)?;
            write(&mask, &mask_img)?;
            samples.push(SampleEntry {
                image,
                label: class,
                mask: Some(mask),
            });
        }
    }
    let manifest = DatasetManifest {
        samples,
        label_names: (0..spec.classes).map(|c| format!("class{c}")).collect(),
        split: Some(spec.split),
    };
    write_manifest(&dir.join(format!("{}.csv", spec.split)), &manifest)?;
    Ok(manifest)
}

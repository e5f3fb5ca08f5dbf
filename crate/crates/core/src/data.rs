//! Identity-labelled image sets: loading, resizing, crop augmentation, class-disjoint
//! splitting and a synthetic generator.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a person identity within a [`Dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `3 × H × W`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub person_id: String,
    /// File path, or `"synthetic"`.
    pub source: String,
}

/// Images grouped by person. Classes are ordered by name; images keep insertion order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    images: Vec<LabeledImage>,
    classes: Vec<String>,
    members: Vec<Vec<usize>>,
    labels: Vec<ClassId>,
}

impl Dataset {
    pub fn new(images: Vec<LabeledImage>) -> Result<Self> {
        let mut by_name: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            let (c, _, _) = img.pixels.dims3()?;
            if c != 3 {
                return Err(Error::shape(format!("{}: expected 3 channels, got {c}", img.source)));
            }
            if img.pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract(format!("{}: pixel outside [0, 1]", img.source)));
            }
            by_name.entry(&img.person_id).or_default().push(i);
        }
        let mut labels = vec![ClassId(0); images.len()];
        let mut classes = Vec::with_capacity(by_name.len());
        let mut members = Vec::with_capacity(by_name.len());
        for (c, (name, idx)) in by_name.into_iter().enumerate() {
            for &i in &idx {
                labels[i] = ClassId(c);
            }
            classes.push(name.to_string());
            members.push(idx);
        }
        Ok(Dataset {
            images,
            classes,
            members,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn image(&self, index: usize) -> &LabeledImage {
        &self.images[index]
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> {
        (0..self.classes.len()).map(ClassId)
    }

    pub fn class_name(&self, class: ClassId) -> &str {
        &self.classes[class.0]
    }

    /// Image indices belonging to `class`.
    pub fn members(&self, class: ClassId) -> &[usize] {
        &self.members[class.0]
    }

    pub fn label(&self, index: usize) -> ClassId {
        self.labels[index]
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    /// New dataset holding only the given classes.
    pub fn subset(&self, classes: &[ClassId]) -> Result<Self> {
        let mut images = Vec::new();
        for &c in classes {
            images.extend(self.members(c).iter().map(|&i| self.images[i].clone()));
        }
        Dataset::new(images)
    }
}

/// Center crop with a small random shift, used for training-time augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    /// Largest shift in pixels along each axis.
    pub max_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_height: 230,
            crop_width: 80,
            max_shift: 5,
        }
    }
}

impl AugmentConfig {
    /// Checks that every shifted crop stays inside an `height × width` image.
    pub fn check_fits(&self, height: usize, width: usize) -> Result<()> {
        let fits = |crop: usize, extent: usize| {
            crop >= 1 && crop <= extent && (extent - crop) / 2 >= self.max_shift
                && extent - crop - (extent - crop) / 2 >= self.max_shift
        };
        if fits(self.crop_height, height) && fits(self.crop_width, width) {
            Ok(())
        } else {
            Err(Error::config(format!(
                "crop {}x{} with shift {} does not fit a {height}x{width} image",
                self.crop_height, self.crop_width, self.max_shift
            )))
        }
    }
}

/// Crops `crop_height × crop_width` at the center offset by `(dy, dx)` drawn uniformly from
/// `[-max_shift, max_shift]²`. Without an rng the exact center crop is returned.
pub fn augment_crop<R: Rng + ?Sized>(
    image: &Tensor,
    cfg: &AugmentConfig,
    rng: Option<&mut R>,
) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    cfg.check_fits(h, w)?;
    let (dy, dx) = match rng {
        Some(rng) if cfg.max_shift > 0 => {
            let r = cfg.max_shift as i64;
            (rng.random_range(-r..=r), rng.random_range(-r..=r))
        }
        _ => (0, 0),
    };
    let top = ((h - cfg.crop_height) / 2) as i64 + dy;
    let left = ((w - cfg.crop_width) / 2) as i64 + dx;
    crop(image, top as usize, left as usize, cfg.crop_height, cfg.crop_width)
}

/// Brings an image to the network input size: unchanged if it already matches, otherwise an
/// augmentation crop (random with an rng, centered without). The crop size must equal the
/// target.
pub fn prepare_input<R: Rng + ?Sized>(
    image: &Tensor,
    height: usize,
    width: usize,
    augment: &AugmentConfig,
    rng: Option<&mut R>,
) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    if (augment.crop_height, augment.crop_width) != (height, width) {
        return Err(Error::config(format!(
            "images are {h}x{w} but the network takes {height}x{width} and the crop is {}x{}",
            augment.crop_height, augment.crop_width
        )));
    }
    augment_crop(image, augment, rng)
}

pub fn crop(image: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if top + height > h || left + width > w || height == 0 || width == 0 {
        return Err(Error::shape(format!(
            "crop {height}x{width} at ({top}, {left}) exceeds {h}x{w}"
        )));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in top..top + height {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&src[row + left..row + left + width]);
        }
    }
    Tensor::from_vec(vec![c, height, width], out)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if height == 0 || width == 0 {
        return Err(Error::shape("resize target must be nonzero"));
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(height, h);
    let xs = axis(width, w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_vec(vec![c, height, width], out)
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "ppm", "pgm", "pnm", "pam"];

fn read_sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

pub fn decode_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0; 3 * h * w];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * h * w + p] = f64::from(v) / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Loads `root/<person_id>/<image>` files, resizing each to `height × width`.
///
/// Unreadable files and empty identity directories are skipped with a warning.
pub fn load_dataset(root: &Path, height: usize, width: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::config(format!("{} is not a directory", root.display())));
    }
    let mut images = Vec::new();
    for dir in read_sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let person = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let before = images.len();
        for file in read_sorted_dir(&dir)? {
            let is_image = file
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str()));
            if !file.is_file() || !is_image {
                continue;
            }
            match decode_image(&file).and_then(|t| resize(&t, height, width)) {
                Ok(pixels) => images.push(LabeledImage {
                    pixels,
                    person_id: person.clone(),
                    source: file.display().to_string(),
                }),
                Err(e) => warn!("skipping unreadable image: {e}"),
            }
        }
        if images.len() == before {
            warn!("identity {person:?} has no readable images; omitted");
        }
    }
    if images.is_empty() {
        return Err(Error::config(format!("no images found under {}", root.display())));
    }
    Dataset::new(images)
}

/// Writes `root/<person_id>/<nnn>.png`, quantizing pixels to 8 bits.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for class in dataset.class_ids() {
        let dir = root.join(dataset.class_name(class));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (n, &i) in dataset.members(class).iter().enumerate() {
            let path = dir.join(format!("{n:03}.png"));
            encode_png(&dataset.image(i).pixels, &path)?;
        }
    }
    Ok(())
}

fn encode_png(pixels: &Tensor, path: &Path) -> Result<()> {
    let (_, h, w) = pixels.dims3()?;
    let data = pixels.data();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (p, px) in buf.pixels_mut().enumerate() {
        for ch in 0..3 {
            px.0[ch] = (data[ch * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    buf.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Partitions by person: the first `floor(n · train_fraction)` shuffled classes train.
pub fn split_train_test<R: Rng + ?Sized>(
    dataset: &Dataset,
    train_fraction: f64,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let mut classes: Vec<ClassId> = dataset.class_ids().collect();
    // The small bias absorbs representation error such as 10 * 0.6.
    let n_train = ((classes.len() as f64 * train_fraction) + 1e-9).floor() as usize;
    classes.shuffle(rng);
    let (train, test) = classes.split_at(n_train.min(classes.len()));
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort();
    test.sort();
    Ok((dataset.subset(&train)?, dataset.subset(&test)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    /// Amplitude of both the per-pixel uniform noise and the per-image brightness shift.
    pub noise_level: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 10,
            images_per_class: 6,
            noise_level: 0.1,
            height: 20,
            width: 12,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.images_per_class == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("synthetic image count and size must be positive"));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(Error::config("noise level must be finite and non-negative"));
        }
        Ok(())
    }
}

const PALETTE: [f64; 3] = [0.1, 0.5, 0.9];
const MIN_TEMPLATE_RMS: f64 = 0.25;

fn template<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let mut pick = || [0, 1, 2].map(|_| PALETTE[rng.random_range(0..3)]);
    let upper = pick();
    let lower = pick();
    let split = (h * 9 / 20).max(1);
    let period = rng.random_range(2..=4);
    let phase = rng.random_range(0..period);
    let stripe_channel = rng.random_range(0..3);
    Tensor::from_fn(&[3, h, w], |i| {
        let ch = i / (h * w);
        let y = (i / w) % h;
        let base = if y < split { upper[ch] } else { lower[ch] };
        let stripe = if ch == stripe_channel && (y + phase) / period % 2 == 1 {
            if base > 0.5 { -0.1 } else { 0.1 }
        } else {
            0.0
        };
        base + stripe
    })
}

fn rms(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    (a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
}

/// Class templates plus the generated images.
///
/// Each class has a two-tone "upper body / lower body" color template with a horizontal
/// stripe pattern; templates are pairwise at least 0.25 apart in RMS. Each image adds
/// uniform per-pixel noise and a uniform brightness shift, both of amplitude
/// `noise_level`, clamped to `[0, 1]`.
pub fn synth_dataset_with_templates<R: Rng + ?Sized>(
    spec: &SynthSpec,
    rng: &mut R,
) -> Result<(Dataset, Vec<Tensor>)> {
    spec.validate()?;
    let mut templates: Vec<Tensor> = Vec::with_capacity(spec.num_classes);
    while templates.len() < spec.num_classes {
        let mut best: Option<(f64, Tensor)> = None;
        for _ in 0..1000 {
            let t = template(spec, rng);
            let nearest = templates.iter().map(|o| rms(o, &t)).fold(f64::INFINITY, f64::min);
            if nearest >= MIN_TEMPLATE_RMS {
                best = Some((nearest, t));
                break;
            }
            if best.as_ref().is_none_or(|(d, _)| nearest > *d) {
                best = Some((nearest, t));
            }
        }
        templates.push(best.expect("at least one candidate").1);
    }

    let a = spec.noise_level;
    let mut images = Vec::with_capacity(spec.num_classes * spec.images_per_class);
    for (c, tmpl) in templates.iter().enumerate() {
        for _ in 0..spec.images_per_class {
            let mut pixels = tmpl.clone();
            if a > 0.0 {
                let shift = rng.random_range(-a..=a);
                for v in pixels.data_mut() {
                    *v = (*v + shift + rng.random_range(-a..=a)).clamp(0.0, 1.0);
                }
            }
            images.push(LabeledImage {
                pixels,
                person_id: format!("p{c:03}"),
                source: "synthetic".into(),
            });
        }
    }
    Ok((Dataset::new(images)?, templates))
}

pub fn synth_dataset<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<Dataset> {
    synth_dataset_with_templates(spec, rng).map(|(d, _)| d)
}

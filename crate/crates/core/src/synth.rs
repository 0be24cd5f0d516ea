//! Seeded synthetic background / crop / weed scenes.
//!
//! Crops are disks, weeds are irregular blobs grown pixel by pixel, and the
//! background is box-smoothed noise. Each image draws its own per-class
//! pixel budget around the configured fraction, so per-image imbalance
//! varies while the dataset mean tracks the target. Image and mask are
//! rendered from the same geometry.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::acquisition::ImageId;
use crate::container::Metadata;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{ClassMask, Image};

pub const BACKGROUND: u8 = 0;
pub const CROP: u8 = 1;
pub const WEED: u8 = 2;
pub const CLASSES: usize = 3;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const GENERATION_META: &str = "generation.meta";

/// Amplitude of the texture added on top of blob intensities.
const BLOB_TEXTURE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Target pixel fractions (background, crop, weed).
    pub fractions: [f64; 3],
    /// Inclusive crop disk radius range in pixels.
    pub crop_radius: (usize, usize),
    /// Inclusive weed blob radius range in pixels; a blob of radius `r`
    /// covers about `π r²` pixels.
    pub weed_radius: (usize, usize),
    pub background_level: f64,
    pub noise_amplitude: f64,
    pub smoothing_radius: usize,
    pub crop_intensity: f64,
    pub weed_intensity: f64,
    pub tag: String,
    pub seed: u64,
}

impl SceneConfig {
    fn base(tag: &str, fractions: [f64; 3]) -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            fractions,
            crop_radius: (3, 7),
            weed_radius: (1, 3),
            background_level: 0.3,
            noise_amplitude: 0.08,
            smoothing_radius: 2,
            crop_intensity: 0.8,
            weed_intensity: 0.55,
            tag: tag.to_string(),
            seed: 0,
        }
    }

    /// 98.5% background, 1.3% crop, 0.2% weed.
    pub fn sugarbeet() -> Self {
        SceneConfig {
            crop_radius: (2, 5),
            weed_radius: (1, 2),
            ..Self::base("sugarbeet", [0.985, 0.013, 0.002])
        }
    }

    /// 89.8% background, 6.2% crop, 4.0% weed.
    pub fn corn_weed() -> Self {
        Self::base("corn-weed", [0.898, 0.062, 0.040])
    }

    /// Pre-training distribution: calm background, bright plants.
    pub fn pretrain_a() -> Self {
        Self::base("A-pretrain", [0.898, 0.062, 0.040])
    }

    /// Field distribution: noisier soil and dimmer plants than
    /// [`SceneConfig::pretrain_a`].
    pub fn field_b() -> Self {
        // brighter, flatter soil
        SceneConfig {
            background_level: 0.55,
            noise_amplitude: 0.04,
            crop_intensity: 0.78,
            weed_intensity: 0.62,
            ..Self::base("B-field", [0.898, 0.062, 0.040])
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "sugarbeet" => Ok(Self::sugarbeet()),
            "corn_weed" | "corn-weed" => Ok(Self::corn_weed()),
            "pretrain_a" | "A-pretrain" => Ok(Self::pretrain_a()),
            "field_b" | "B-field" => Ok(Self::field_b()),
            other => Err(Error::InvalidArgument(format!(
                "unknown scene profile {other:?} (sugarbeet, corn_weed, pretrain_a, field_b)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidArgument(m));
        if self.height == 0 || self.width == 0 {
            return invalid("image dims must be positive".into());
        }
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return invalid(format!("fractions {:?} outside [0,1]", self.fractions));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return invalid(format!("fractions sum to {sum}, not 1"));
        }
        for (name, (lo, hi)) in [("crop", self.crop_radius), ("weed", self.weed_radius)] {
            if lo < 1 || hi < lo {
                return invalid(format!("{name} radius range [{lo}, {hi}] is invalid"));
            }
        }
        for (name, v) in [
            ("background_level", self.background_level),
            ("crop_intensity", self.crop_intensity),
            ("weed_intensity", self.weed_intensity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} {v} outside [0,1]"));
            }
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return invalid(format!("noise amplitude {}", self.noise_amplitude));
        }
        let unsat = |m: String| Err(Error::Unsatisfiable(m));
        let pixels = (self.height * self.width) as f64;
        let side = self.height.min(self.width);
        if self.fractions[1] > 0.0 {
            if 2 * self.crop_radius.1 + 1 > side {
                return unsat(format!(
                    "crop radius {} does not fit a {}x{} image",
                    self.crop_radius.1, self.height, self.width
                ));
            }
            let smallest = disk_offsets(self.crop_radius.0).len() as f64;
            if self.fractions[1] * pixels < 0.5 * smallest {
                return unsat(format!(
                    "crop budget of {:.1} pixels is below half the smallest disk ({smallest} pixels)",
                    self.fractions[1] * pixels
                ));
            }
        }
        if self.fractions[2] > 0.0 && self.fractions[2] * pixels < 1.0 {
            return unsat(format!(
                "weed budget of {:.2} pixels is below one pixel",
                self.fractions[2] * pixels
            ));
        }
        if self.fractions[1] + self.fractions[2] > 0.9 {
            return unsat("crop + weed above 90% of the image cannot be packed".into());
        }
        Ok(())
    }

    pub fn to_meta(&self) -> Metadata {
        let mut m = Metadata::new();
        m.insert("height".into(), self.height.to_string());
        m.insert("width".into(), self.width.to_string());
        m.insert("fraction_background".into(), self.fractions[0].to_string());
        m.insert("fraction_crop".into(), self.fractions[1].to_string());
        m.insert("fraction_weed".into(), self.fractions[2].to_string());
        m.insert("crop_radius_min".into(), self.crop_radius.0.to_string());
        m.insert("crop_radius_max".into(), self.crop_radius.1.to_string());
        m.insert("weed_radius_min".into(), self.weed_radius.0.to_string());
        m.insert("weed_radius_max".into(), self.weed_radius.1.to_string());
        m.insert("background_level".into(), self.background_level.to_string());
        m.insert("noise_amplitude".into(), self.noise_amplitude.to_string());
        m.insert("smoothing_radius".into(), self.smoothing_radius.to_string());
        m.insert("crop_intensity".into(), self.crop_intensity.to_string());
        m.insert("weed_intensity".into(), self.weed_intensity.to_string());
        m.insert("tag".into(), self.tag.clone());
        m.insert("seed".into(), self.seed.to_string());
        m
    }
}

fn disk_offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// White noise smoothed by a separable box filter, scaled to max |v| = 1.
fn smooth_noise(h: usize, w: usize, radius: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut field: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    if radius > 0 {
        let r = radius as isize;
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -r..=r {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    s += field[y * w + xx];
                }
                tmp[y * w + x] = s;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -r..=r {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    s += tmp[yy * w + x];
                }
                field[y * w + x] = s;
            }
        }
    }
    let max = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        field.iter_mut().for_each(|v| *v /= max);
    }
    field
}

fn paint_crops(cfg: &SceneConfig, mask: &mut [u8], budget: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = (cfg.height as isize, cfg.width as isize);
    let mut remaining = budget;
    let mut attempts = 0;
    while remaining > 0.0 && attempts < 10_000 {
        attempts += 1;
        let r = rng.gen_range(cfg.crop_radius.0..=cfg.crop_radius.1);
        let cy = rng.gen_range(0..h);
        let cx = rng.gen_range(0..w);
        let fresh: Vec<usize> = disk_offsets(r)
            .into_iter()
            .map(|(dy, dx)| (cy + dy, cx + dx))
            .filter(|&(y, x)| y >= 0 && x >= 0 && y < h && x < w)
            .map(|(y, x)| (y * w + x) as usize)
            .filter(|&i| mask[i] == BACKGROUND)
            .collect();
        if fresh.is_empty() {
            continue;
        }
        // limit overshoot on the last blob
        if fresh.len() as f64 > 1.5 * remaining {
            if r == cfg.crop_radius.0 {
                break;
            }
            continue;
        }
        for &i in &fresh {
            mask[i] = CROP;
        }
        remaining -= fresh.len() as f64;
    }
}

fn paint_weeds(cfg: &SceneConfig, mask: &mut [u8], budget: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = (cfg.height, cfg.width);
    let mut remaining = budget.round() as usize;
    let mut attempts = 0;
    while remaining > 0 && attempts < 10_000 {
        attempts += 1;
        let r = rng.gen_range(cfg.weed_radius.0..=cfg.weed_radius.1) as f64;
        let size = ((std::f64::consts::PI * r * r).round() as usize).clamp(1, remaining);
        let start = rng.gen_range(0..h * w);
        if mask[start] != BACKGROUND {
            continue;
        }
        mask[start] = WEED;
        let mut grown = 1;
        let mut frontier = Vec::new();
        let push_neighbours = |i: usize, mask: &[u8], frontier: &mut Vec<usize>| {
            let (y, x) = (i / w, i % w);
            if y > 0 && mask[i - w] == BACKGROUND {
                frontier.push(i - w);
            }
            if y + 1 < h && mask[i + w] == BACKGROUND {
                frontier.push(i + w);
            }
            if x > 0 && mask[i - 1] == BACKGROUND {
                frontier.push(i - 1);
            }
            if x + 1 < w && mask[i + 1] == BACKGROUND {
                frontier.push(i + 1);
            }
        };
        push_neighbours(start, mask, &mut frontier);
        while grown < size && !frontier.is_empty() {
            let i = frontier.swap_remove(rng.gen_range(0..frontier.len()));
            if mask[i] != BACKGROUND {
                continue;
            }
            mask[i] = WEED;
            grown += 1;
            push_neighbours(i, mask, &mut frontier);
        }
        remaining -= grown;
    }
}

/// Renders scene `index` of the dataset described by `cfg`.
pub fn render_scene(cfg: &SceneConfig, index: u64) -> Result<(Image, ClassMask)> {
    cfg.validate()?;
    let mut rng = seed::derived_rng(cfg.seed, &[seed::stream::SCENE, index]);
    let (h, w) = (cfg.height, cfg.width);
    let pixels = (h * w) as f64;
    let mut mask = vec![BACKGROUND; h * w];
    let crop_budget = cfg.fractions[1] * pixels * rng.gen_range(0.5..1.5);
    let weed_budget = cfg.fractions[2] * pixels * rng.gen_range(0.5..1.5);
    if cfg.fractions[1] > 0.0 {
        paint_crops(cfg, &mut mask, crop_budget, &mut rng);
    }
    if cfg.fractions[2] > 0.0 {
        paint_weeds(cfg, &mut mask, weed_budget, &mut rng);
    }
    let soil = smooth_noise(h, w, cfg.smoothing_radius, &mut rng);
    let texture = smooth_noise(h, w, 1, &mut rng);
    let data: Vec<f32> = mask
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let v = match c {
                CROP => cfg.crop_intensity + BLOB_TEXTURE * texture[i],
                WEED => cfg.weed_intensity + BLOB_TEXTURE * texture[i],
                _ => cfg.background_level + cfg.noise_amplitude * soil[i],
            };
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok((Image::new(1, h, w, data)?, ClassMask::new(h, w, mask)?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: ImageId,
    /// Relative to the manifest directory unless absolute.
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub tag: String,
    pub group: u32,
}

/// Image/mask file listing, stored as `manifest.csv` with header
/// `id,image_path,mask_path,tag,group`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn ids(&self) -> Vec<ImageId> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Csv {
            path: path.clone(),
            message: e.to_string(),
        };
        w.write_record(["id", "image_path", "mask_path", "tag", "group"])
            .map_err(csv_err)?;
        for e in &self.entries {
            w.write_record([
                e.id.to_string(),
                e.image_path.to_string_lossy().into_owned(),
                e.mask_path.to_string_lossy().into_owned(),
                e.tag.clone(),
                e.group.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv {
            path: path.clone(),
            message: e.to_string(),
        })?;
        crate::container::write_atomic(&path, &bytes).map_err(|e| Error::file(&path, e))?;
        Ok(path)
    }

    /// Reads a manifest file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::file(path, e))?;
        let bad = |message: String| Error::Csv {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = csv::Reader::from_reader(text.as_slice());
        let header = reader.headers().map_err(|e| bad(e.to_string()))?;
        if header != vec!["id", "image_path", "mask_path", "tag", "group"] {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let id: ImageId = rec[0].parse().map_err(|_| bad(format!("bad id {:?}", &rec[0])))?;
            if !seen.insert(id) {
                return Err(Error::DuplicateImage(id));
            }
            entries.push(ManifestEntry {
                id,
                image_path: PathBuf::from(&rec[1]),
                mask_path: PathBuf::from(&rec[2]),
                tag: rec[3].to_string(),
                group: rec[4]
                    .parse()
                    .map_err(|_| bad(format!("bad group {:?}", &rec[4])))?,
            });
        }
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(DatasetManifest { root, entries })
    }
}

fn image_file(id: ImageId) -> String {
    format!("img_{id:05}.alts")
}

fn mask_file(id: ImageId) -> String {
    format!("mask_{id:05}.alts")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: ImageId,
    pub image: Image,
    pub mask: ClassMask,
    pub tag: String,
    pub group: u32,
}

/// In-memory image/mask pairs keyed by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
    index: HashMap<ImageId, usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if index.insert(s.id, i).is_some() {
                return Err(Error::DuplicateImage(s.id));
            }
            if s.image.height() != s.mask.height() || s.image.width() != s.mask.width() {
                return Err(Error::DimensionMismatch(format!(
                    "image {} is {}x{} but its mask is {}x{}",
                    s.id,
                    s.image.height(),
                    s.image.width(),
                    s.mask.height(),
                    s.mask.width()
                )));
            }
        }
        Ok(Dataset { samples, index })
    }

    /// Renders `n` scenes in memory with ids `first_id..first_id + n`.
    pub fn synthesize(cfg: &SceneConfig, n: usize, first_id: ImageId) -> Result<Self> {
        cfg.validate()?;
        let samples = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let (image, mask) = render_scene(cfg, i)?;
                let id = first_id + i as ImageId;
                Ok(Sample {
                    id,
                    image,
                    mask,
                    tag: cfg.tag.clone(),
                    group: id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }

    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let samples = manifest
            .entries
            .par_iter()
            .map(|e| {
                let image = Image::read(&manifest.resolve(&e.image_path))
                    .map_err(|err| err.context(format!("image {}", e.id)))?;
                let mask = ClassMask::read(&manifest.resolve(&e.mask_path))
                    .map_err(|err| err.context(format!("mask {}", e.id)))?;
                Ok(Sample {
                    id: e.id,
                    image,
                    mask,
                    tag: e.tag.clone(),
                    group: e.group,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }

    /// Writes every sample plus `manifest.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let entries = self
            .samples
            .par_iter()
            .map(|s| {
                let image_path = PathBuf::from(image_file(s.id));
                let mask_path = PathBuf::from(mask_file(s.id));
                let mut meta = Metadata::new();
                meta.insert("id".into(), s.id.to_string());
                meta.insert("tag".into(), s.tag.clone());
                s.image.write(&dir.join(&image_path), &meta)?;
                s.mask.write(&dir.join(&mask_path), &meta)?;
                Ok(ManifestEntry {
                    id: s.id,
                    image_path,
                    mask_path,
                    tag: s.tag.clone(),
                    group: s.group,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = DatasetManifest {
            root: dir.to_path_buf(),
            entries,
        };
        manifest.save()?;
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn ids(&self) -> Vec<ImageId> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn get(&self, id: ImageId) -> Option<&Sample> {
        self.index.get(&id).map(|&i| &self.samples[i])
    }

    pub fn max_id(&self) -> Option<ImageId> {
        self.samples.iter().map(|s| s.id).max()
    }

    /// Appends `other`, failing on id collisions.
    pub fn extend(&mut self, other: Dataset) -> Result<()> {
        let mut all = std::mem::take(&mut self.samples);
        all.extend(other.samples);
        *self = Dataset::new(all)?;
        Ok(())
    }

    pub fn in_channels(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.channels())
    }

    /// Pixel fractions of each class over every mask.
    pub fn class_fractions(&self) -> Vec<f64> {
        let mut counts = [0u64; CLASSES];
        for s in &self.samples {
            for &c in s.mask.data() {
                counts[(c as usize).min(CLASSES - 1)] += 1;
            }
        }
        fractions(&counts)
    }
}

fn fractions(counts: &[u64; CLASSES]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// Renders `n` scenes to `out_dir` and writes `manifest.csv` plus a
/// `generation.meta` echo of `cfg`.
pub fn generate_dataset(cfg: &SceneConfig, n: usize, out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one image".into()));
    }
    let data = Dataset::synthesize(cfg, n, 0)?;
    let manifest = data.save(out_dir)?;
    let mut meta = cfg.to_meta();
    meta.insert("n_images".into(), n.to_string());
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let path = out_dir.join(GENERATION_META);
    crate::container::write_atomic(&path, text.as_bytes()).map_err(|e| Error::file(&path, e))?;
    Ok(manifest)
}

/// Per-class pixel fractions (background, crop, weed) over every mask in
/// the manifest.
pub fn class_stats(manifest: &DatasetManifest) -> Result<Vec<f64>> {
    let per_mask = manifest
        .entries
        .par_iter()
        .map(|e| {
            let mask = ClassMask::read(&manifest.resolve(&e.mask_path))
                .map_err(|err| err.context(format!("mask {}", e.id)))?;
            let mut counts = [0u64; CLASSES];
            for &c in mask.data() {
                if c as usize >= CLASSES {
                    return Err(Error::InvalidArgument(format!(
                        "mask {} has class id {c}",
                        e.id
                    )));
                }
                counts[c as usize] += 1;
            }
            Ok(counts)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = [0u64; CLASSES];
    for c in per_mask {
        total.iter_mut().zip(c).for_each(|(t, v)| *t += v);
    }
    Ok(fractions(&total))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Maximum translation in pixels along each axis.
    pub max_shift: usize,
    /// Half-width of the uniform noise added to the image.
    pub noise_amplitude: f64,
}

fn shifted<T: Copy>(src: &[T], h: usize, w: usize, dy: isize, dx: isize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h as isize {
        let sy = (y - dy).clamp(0, h as isize - 1) as usize;
        for x in 0..w as isize {
            let sx = (x - dx).clamp(0, w as isize - 1) as usize;
            out.push(src[sy * w + sx]);
        }
    }
    out
}

/// Adds `factor - 1` jittered near-duplicates per sample, sharing the
/// source's redundancy group. New ids follow the current maximum id.
pub fn inject_redundancy_in_memory(
    data: &Dataset,
    factor: usize,
    jitter: Jitter,
    seed: u64,
) -> Result<Dataset> {
    if factor == 0 {
        return Err(Error::InvalidArgument("duplication factor must be >= 1".into()));
    }
    if !(jitter.noise_amplitude >= 0.0 && jitter.noise_amplitude.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise amplitude {}",
            jitter.noise_amplitude
        )));
    }
    for s in data.samples() {
        if jitter.max_shift >= s.image.height().min(s.image.width()) {
            return Err(Error::InvalidArgument(format!(
                "jitter of {} pixels exceeds the {}x{} image {}",
                jitter.max_shift,
                s.image.height(),
                s.image.width(),
                s.id
            )));
        }
    }
    let mut out = data.samples().to_vec();
    let mut next_id = data.max_id().map_or(0, |m| m + 1);
    for s in data.samples() {
        for k in 1..factor as u64 {
            let mut rng = seed::derived_rng(seed, &[seed::stream::JITTER, s.id as u64, k]);
            let j = jitter.max_shift as isize;
            let dy = rng.gen_range(-j..=j);
            let dx = rng.gen_range(-j..=j);
            let (c, h, w) = (s.image.channels(), s.image.height(), s.image.width());
            let mut pixels = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                pixels.extend(shifted(&s.image.data()[ch * h * w..(ch + 1) * h * w], h, w, dy, dx));
            }
            if jitter.noise_amplitude > 0.0 {
                let a = jitter.noise_amplitude;
                for v in pixels.iter_mut() {
                    *v = (f64::from(*v) + rng.gen_range(-a..=a)).clamp(0.0, 1.0) as f32;
                }
            }
            out.push(Sample {
                id: next_id,
                image: Image::new(c, h, w, pixels)?,
                mask: ClassMask::new(h, w, shifted(s.mask.data(), h, w, dy, dx))?,
                tag: s.tag.clone(),
                group: s.group,
            });
            next_id += 1;
        }
    }
    Dataset::new(out)
}

/// On-disk variant of [`inject_redundancy_in_memory`]: writes the new
/// duplicates next to the manifest and rewrites `manifest.csv`.
pub fn inject_redundancy(
    manifest: &DatasetManifest,
    factor: usize,
    jitter: Jitter,
    seed: u64,
) -> Result<DatasetManifest> {
    if factor == 1 {
        return Ok(manifest.clone());
    }
    let data = Dataset::load(manifest)?;
    let expanded = inject_redundancy_in_memory(&data, factor, jitter, seed)?;
    let known: std::collections::HashSet<ImageId> = manifest.ids().into_iter().collect();
    let mut entries = manifest.entries.clone();
    for s in expanded.samples().iter().filter(|s| !known.contains(&s.id)) {
        let image_path = PathBuf::from(image_file(s.id));
        let mask_path = PathBuf::from(mask_file(s.id));
        let mut meta = Metadata::new();
        meta.insert("id".into(), s.id.to_string());
        meta.insert("group".into(), s.group.to_string());
        s.image.write(&manifest.root.join(&image_path), &meta)?;
        s.mask.write(&manifest.root.join(&mask_path), &meta)?;
        entries.push(ManifestEntry {
            id: s.id,
            image_path,
            mask_path,
            tag: s.tag.clone(),
            group: s.group,
        });
    }
    let out = DatasetManifest {
        root: manifest.root.clone(),
        entries,
    };
    out.save()?;
    Ok(out)
}

/// Group sizes keyed by redundancy group.
pub fn group_sizes(manifest: &DatasetManifest) -> BTreeMap<u32, usize> {
    let mut m = BTreeMap::new();
    for e in &manifest.entries {
        *m.entry(e.group).or_insert(0) += 1;
    }
    m
}

//! Synthetic shapes corpus, COCO-style annotation I/O and the
//! single-dataset batch sampler.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob;
use crate::config::hex;
use crate::error::{ensure, Error, Result};
use crate::geometry::{normalize_box, AbsoluteBox, NormalizedBox};
use crate::par;
use crate::real::Real;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 6] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring, Shape::Bar];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Bar => "bar",
        }
    }

    /// Membership of a point in the unit-extent shape centered at the origin.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            Shape::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Ring => {
                let r = u * u + v * v;
                (0.45..=1.0).contains(&r)
            }
            Shape::Bar => u.abs() <= 1.0 && v.abs() <= 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: u32,
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub dataset_id: u32,
    pub name: String,
    pub image_size: usize,
    pub categories: Vec<CategorySpec>,
    /// Inclusive range.
    pub objects_per_image: (usize, usize),
    pub occlusion_allowed: bool,
    /// Standard deviation of per-pixel noise as a fraction of full scale.
    pub noise_level: f64,
    /// Half-extent range of objects, as a fraction of the image size.
    pub object_scale: (f64, f64),
    /// Per-instance uniform offset of each channel around the category color.
    #[serde(default = "default_jitter")]
    pub color_jitter: f64,
    /// Categories that share a shape never appear in the same image.
    #[serde(default)]
    pub separate_lookalikes: bool,
}

fn default_jitter() -> f64 {
    12.0
}

const PALETTE_A: [[u8; 3]; 6] = [
    [230, 50, 50],
    [50, 200, 60],
    [60, 90, 235],
    [235, 215, 40],
    [215, 60, 215],
    [40, 215, 215],
];

const PALETTE_B: [[u8; 3]; 6] = [
    [245, 140, 30],
    [150, 70, 220],
    [240, 240, 240],
    [30, 140, 120],
    [170, 120, 60],
    [250, 150, 190],
];

impl SceneSpec {
    /// Six shape categories with one palette; ids start at `first_id`.
    pub fn shapes(dataset_id: u32, name: &str, first_id: u32, palette: &[[u8; 3]; 6], image_size: usize) -> Self {
        let categories = Shape::ALL
            .iter()
            .zip(palette)
            .enumerate()
            .map(|(i, (&shape, &color))| CategorySpec {
                id: first_id + i as u32,
                name: format!("{}-{}", name, shape.name()),
                shape,
                color,
            })
            .collect();
        SceneSpec {
            dataset_id,
            name: name.to_string(),
            image_size,
            categories,
            objects_per_image: (1, 3),
            occlusion_allowed: false,
            noise_level: 0.05,
            object_scale: (0.09, 0.2),
            color_jitter: default_jitter(),
            separate_lookalikes: false,
        }
    }

    /// Two datasets with disjoint category ids (1-6 and 7-12).
    pub fn default_pair(image_size: usize) -> Vec<SceneSpec> {
        vec![
            Self::shapes(0, "shapes-a", 1, &PALETTE_A, image_size),
            Self::shapes(1, "shapes-b", 7, &PALETTE_B, image_size),
        ]
    }

    /// Three shapes, each in two close colors: six categories forming three
    /// near-duplicate pairs.
    pub fn confusable_pair(image_size: usize) -> Vec<SceneSpec> {
        [(0, "pairs-a", 1, &PALETTE_A), (1, "pairs-b", 7, &PALETTE_B)]
            .into_iter()
            .map(|(ds, name, first, pal)| {
                let mut s = Self::shapes(ds, name, first, pal, image_size);
                s.categories.truncate(3);
                s.color_jitter = 30.0;
                s.separate_lookalikes = true;
                s.with_near_duplicates(3)
            })
            .collect()
    }

    /// Every shape in four colors (both palettes plus a darker copy of
    /// each): 24 categories per dataset, far more than one batch covers.
    pub fn wide_pair(image_size: usize) -> Vec<SceneSpec> {
        [(0, "wide-a", 1, &PALETTE_A, &PALETTE_B), (1, "wide-b", 25, &PALETTE_B, &PALETTE_A)]
            .into_iter()
            .map(|(ds, name, first, p1, p2)| {
                let mut s = Self::shapes(ds, name, first, p1, image_size);
                let mut rotated = *p2;
                rotated.rotate_left(3);
                let second = Self::shapes(ds, name, first + 6, &rotated, image_size);
                s.categories.extend(second.categories.into_iter().map(|mut c| {
                    c.name.push_str("-alt");
                    c
                }));
                s.color_jitter = 30.0;
                s.separate_lookalikes = true;
                s.with_near_duplicates(12)
            })
            .collect()
    }

    /// Appends `n` categories that copy an existing shape with a nearby color.
    pub fn with_near_duplicates(mut self, n: usize) -> Self {
        let base = self.categories.clone();
        let mut next = self.categories.iter().map(|c| c.id).max().unwrap_or(0) + 1;
        for c in base.iter().take(n) {
            let color = c.color.map(|v| if v > 127 { v - 45 } else { v + 45 });
            self.categories.push(CategorySpec {
                id: next,
                name: format!("{}-dark", c.name),
                shape: c.shape,
                color,
            });
            next += 1;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.categories.len() >= 2, Validation, "a scene needs at least two categories");
        ensure!(
            self.image_size >= 32 && self.image_size % 32 == 0,
            Validation,
            "image size {} must be a positive multiple of 32",
            self.image_size
        );
        let (lo, hi) = self.objects_per_image;
        ensure!(lo >= 1 && lo <= hi, Validation, "objects per image range ({lo}, {hi}) is empty or allows zero");
        let (a, b) = self.object_scale;
        ensure!(a > 0.0 && a <= b && b < 0.5, Validation, "object scale range ({a}, {b}) invalid");
        ensure!((0.0..=1.0).contains(&self.noise_level), Validation, "noise level must lie in [0, 1]");
        ensure!((0.0..=128.0).contains(&self.color_jitter), Validation, "color jitter must lie in [0, 128]");
        let mut ids: Vec<u32> = self.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ensure!(ids.len() == self.categories.len(), Validation, "duplicate category ids");
        Ok(())
    }

    pub fn category_ids(&self) -> Vec<u32> {
        self.categories.iter().map(|c| c.id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub bbox: AbsoluteBox,
    pub category_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: u64,
    pub dataset_id: u32,
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub pixels: Vec<u8>,
    pub annotations: Vec<Annotation>,
}

impl AnnotatedImage {
    /// `(H*W) x 3` with values in `[0, 1]`.
    pub fn to_matrix<T: Real>(&self) -> Matrix<T> {
        let data = self.pixels.iter().map(|&p| T::of(p as f64 / 255.0)).collect();
        Matrix::from_vec(self.width * self.height, 3, data)
    }

    pub fn hflip(&self) -> AnnotatedImage {
        let (w, h) = (self.width, self.height);
        let mut pixels = vec![0u8; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                let s = (y * w + x) * 3;
                let d = (y * w + (w - 1 - x)) * 3;
                pixels[d..d + 3].copy_from_slice(&self.pixels[s..s + 3]);
            }
        }
        let annotations = self
            .annotations
            .iter()
            .map(|a| Annotation {
                bbox: AbsoluteBox {
                    x0: w as f64 - a.bbox.x1,
                    y0: a.bbox.y0,
                    x1: w as f64 - a.bbox.x0,
                    y1: a.bbox.y1,
                },
                category_id: a.category_id,
            })
            .collect();
        AnnotatedImage {
            pixels,
            annotations,
            ..self.clone()
        }
    }

    pub fn normalized(&self) -> Vec<(NormalizedBox, u32)> {
        self.annotations
            .iter()
            .map(|a| {
                (
                    normalize_box(&a.bbox, self.width as f64, self.height as f64).expect("validated annotation"),
                    a.category_id,
                )
            })
            .collect()
    }

    /// Categories present, ascending, with their boxes in annotation order.
    pub fn boxes_by_category(&self) -> BTreeMap<u32, Vec<NormalizedBox>> {
        let mut m: BTreeMap<u32, Vec<NormalizedBox>> = BTreeMap::new();
        for (b, c) in self.normalized() {
            m.entry(c).or_default().push(b);
        }
        m
    }
}

pub fn image_id(dataset_id: u32, index: usize) -> u64 {
    dataset_id as u64 * 1_000_000 + index as u64 + 1
}

/// Every tenth image by id hash is held out.
pub fn is_val(image_id: u64) -> bool {
    Sha256::digest(image_id.to_le_bytes())[0] % 10 == 0
}

fn image_rng(seed: u64, image_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id);
    rng
}

/// Renders one scene from its own RNG stream.
pub fn render_image(spec: &SceneSpec, image_id: u64, seed: u64) -> AnnotatedImage {
    let mut rng = image_rng(seed, image_id);
    let s = spec.image_size;
    let base: f64 = rng.random_range(30.0..100.0);
    let mut canvas: Vec<f64> = (0..s * s * 3)
        .map(|_| base + spec.noise_level * 255.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n_obj = rng.random_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let allowed: Vec<&CategorySpec> = spec
            .categories
            .iter()
            .filter(|c| {
                !spec.separate_lookalikes
                    || annotations.iter().all(|a| {
                        let other = spec.categories.iter().find(|o| o.id == a.category_id).expect("known id");
                        other.id == c.id || other.shape != c.shape
                    })
            })
            .collect();
        let cat = allowed[rng.random_range(0..allowed.len())];
        for _attempt in 0..50 {
            let r = rng.random_range(spec.object_scale.0..=spec.object_scale.1) * s as f64;
            let aspect: f64 = rng.random_range(0.8..1.25);
            let (mut rx, mut ry) = (r * aspect.sqrt(), r / aspect.sqrt());
            let vertical = cat.shape == Shape::Bar && rng.random_bool(0.5);
            if vertical {
                std::mem::swap(&mut rx, &mut ry);
            }
            let cx = rng.random_range(rx..s as f64 - rx);
            let cy = rng.random_range(ry..s as f64 - ry);
            let j = spec.color_jitter;
            let jitter: [f64; 3] = [0, 1, 2].map(|_| if j > 0.0 { rng.random_range(-j..j) } else { 0.0 });
            let mut mask = Vec::new();
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for y in (cy - ry).floor().max(0.0) as usize..((cy + ry).ceil() as usize).min(s) {
                for x in (cx - rx).floor().max(0.0) as usize..((cx + rx).ceil() as usize).min(s) {
                    let (mut u, mut v) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                    if vertical {
                        std::mem::swap(&mut u, &mut v);
                    }
                    if cat.shape.contains(u, v) {
                        mask.push(y * s + x);
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                    }
                }
            }
            if mask.is_empty() || x1 - x0 < 2 || y1 - y0 < 2 {
                continue;
            }
            let bbox = AbsoluteBox {
                x0: x0 as f64,
                y0: y0 as f64,
                x1: x1 as f64,
                y1: y1 as f64,
            };
            let overlaps = annotations.iter().any(|a| {
                bbox.x0 < a.bbox.x1 + 1.0 && a.bbox.x0 < bbox.x1 + 1.0 && bbox.y0 < a.bbox.y1 + 1.0 && a.bbox.y0 < bbox.y1 + 1.0
            });
            if overlaps && !spec.occlusion_allowed {
                continue;
            }
            for p in mask {
                for c in 0..3 {
                    canvas[p * 3 + c] = cat.color[c] as f64 + jitter[c];
                }
            }
            annotations.push(Annotation {
                bbox,
                category_id: cat.id,
            });
            break;
        }
    }
    if annotations.is_empty() {
        // Guarantee one object: a centered instance of the first category.
        let cat = &spec.categories[0];
        let r = spec.object_scale.1 * s as f64;
        let c = s as f64 / 2.0;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..s {
            for x in 0..s {
                if cat.shape.contains((x as f64 + 0.5 - c) / r, (y as f64 + 0.5 - c) / r) {
                    for k in 0..3 {
                        canvas[(y * s + x) * 3 + k] = cat.color[k] as f64;
                    }
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        annotations.push(Annotation {
            bbox: AbsoluteBox {
                x0: x0 as f64,
                y0: y0 as f64,
                x1: x1 as f64,
                y1: y1 as f64,
            },
            category_id: cat.id,
        });
    }
    if spec.noise_level > 0.0 {
        for v in canvas.iter_mut() {
            *v += spec.noise_level * 255.0 * 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    AnnotatedImage {
        image_id,
        dataset_id: spec.dataset_id,
        width: s,
        height: s,
        pixels: canvas.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
        annotations,
    }
}

/// In-memory dataset with its category dictionary.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn dataset_id(&self) -> u32 {
        self.spec.dataset_id
    }

    pub fn category_ids(&self) -> Vec<u32> {
        self.spec.category_ids()
    }

    pub fn split(&self, val: bool) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            images: self.images.iter().filter(|im| is_val(im.image_id) == val).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Renders `n_images` scenes; output is independent of worker count.
pub fn generate(spec: &SceneSpec, n_images: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    ensure!(n_images >= 1, Validation, "need at least one image");
    let images = par::map_range(n_images, |i| render_image(spec, image_id(spec.dataset_id, i), seed));
    Ok(Dataset {
        spec: spec.clone(),
        images,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    /// `[x, y, w, h]` in pixels.
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct CocoCategory {
    id: u32,
    name: String,
    supercategory: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub spec: SceneSpec,
    pub seed: u64,
    pub n_images: usize,
    /// Relative path to sha256, sorted by path.
    pub checksums: BTreeMap<String, String>,
}

impl DatasetManifest {
    /// Hash over all file checksums.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.checksums {
            h.update(k.as_bytes());
            h.update(v.as_bytes());
        }
        hex(&h.finalize())
    }
}

fn coco_for(ds: &Dataset, images: &[&AnnotatedImage]) -> CocoFile {
    let mut ann_id = 0;
    let mut annotations = Vec::new();
    for im in images {
        for a in &im.annotations {
            ann_id += 1;
            let xywh = a.bbox.to_xywh();
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: im.image_id,
                category_id: a.category_id,
                bbox: xywh,
                area: xywh[2] * xywh[3],
                iscrowd: 0,
            });
        }
    }
    CocoFile {
        images: images
            .iter()
            .map(|im| CocoImage {
                id: im.image_id,
                file_name: format!("images/{:08}.png", im.image_id),
                width: im.width,
                height: im.height,
            })
            .collect(),
        annotations,
        categories: ds
            .spec
            .categories
            .iter()
            .map(|c| CocoCategory {
                id: c.id,
                name: c.name.clone(),
                supercategory: c.shape.name().to_string(),
            })
            .collect(),
    }
}

fn encode_png(im: &AnnotatedImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(enc, &im.pixels, im.width as u32, im.height as u32, image::ExtendedColorType::Rgb8)?;
    Ok(out)
}

/// Writes `images/*.png`, `train.json`, `val.json` and `manifest.json`.
pub fn write_dataset(ds: &Dataset, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let pngs = par::map_slice(&ds.images, encode_png);
    for (im, png) in ds.images.iter().zip(pngs) {
        blob::write_bytes(&img_dir.join(format!("{:08}.png", im.image_id)), &png?)?;
    }
    let train: Vec<&AnnotatedImage> = ds.images.iter().filter(|im| !is_val(im.image_id)).collect();
    let val: Vec<&AnnotatedImage> = ds.images.iter().filter(|im| is_val(im.image_id)).collect();
    blob::write_json(&dir.join("train.json"), &coco_for(ds, &train))?;
    blob::write_json(&dir.join("val.json"), &coco_for(ds, &val))?;
    let mut checksums = BTreeMap::new();
    for name in ["train.json", "val.json"] {
        checksums.insert(name.to_string(), blob::sha256_file(&dir.join(name))?);
    }
    for im in &ds.images {
        let rel = format!("images/{:08}.png", im.image_id);
        checksums.insert(rel.clone(), blob::sha256_file(&dir.join(&rel))?);
    }
    let manifest = DatasetManifest {
        spec: ds.spec.clone(),
        seed,
        n_images: ds.images.len(),
        checksums,
    };
    blob::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Generates and writes one dataset.
pub fn generate_dataset(spec: &SceneSpec, n_images: usize, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let ds = generate(spec, n_images, seed)?;
    write_dataset(&ds, seed, dir)
}

fn read_coco(dir: &Path, file: &str, dataset_id: u32) -> Result<Vec<AnnotatedImage>> {
    let path = dir.join(file);
    let coco: CocoFile = blob::read_json(&path)?;
    let mut by_image: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
    for a in &coco.annotations {
        let bbox = AbsoluteBox::from_xywh(a.bbox).map_err(|e| Error::format(&path, e.to_string()))?;
        by_image.entry(a.image_id).or_default().push(Annotation {
            bbox,
            category_id: a.category_id,
        });
    }
    coco.images
        .iter()
        .map(|ci| {
            let p = dir.join(&ci.file_name);
            let img = image::open(&p)?.to_rgb8();
            if img.width() as usize != ci.width || img.height() as usize != ci.height {
                return Err(Error::format(&p, "image size disagrees with annotations"));
            }
            Ok(AnnotatedImage {
                image_id: ci.id,
                dataset_id,
                width: ci.width,
                height: ci.height,
                pixels: img.into_raw(),
                annotations: by_image.remove(&ci.id).unwrap_or_default(),
            })
        })
        .collect()
}

/// Reads a dataset directory back; images are returned in id order.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Dataset)> {
    let manifest: DatasetManifest = blob::read_json(&dir.join("manifest.json"))?;
    let id = manifest.spec.dataset_id;
    let mut images = read_coco(dir, "train.json", id)?;
    images.extend(read_coco(dir, "val.json", id)?);
    images.sort_by_key(|im| im.image_id);
    let known: Vec<u32> = manifest.spec.category_ids();
    for im in &images {
        for a in &im.annotations {
            if !known.contains(&a.category_id) {
                return Err(Error::format(dir, format!("unknown category {}", a.category_id)));
            }
            if !a.bbox.within(im.width as f64, im.height as f64) {
                return Err(Error::format(dir, format!("box outside image {}", im.image_id)));
            }
        }
    }
    let spec = manifest.spec.clone();
    Ok((manifest, Dataset { spec, images }))
}

/// Re-hashes every file listed in the manifest.
pub fn verify_dataset(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    for (rel, want) in &manifest.checksums {
        let got = blob::sha256_file(&dir.join(rel))?;
        if &got != want {
            return Err(Error::format(dir.join(rel), "checksum mismatch"));
        }
    }
    Ok(())
}

pub fn dataset_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Index into the sampler's dataset list.
    pub dataset: usize,
    /// Image indices within that dataset.
    pub indices: Vec<usize>,
}

/// Emits batches that never mix datasets. Each epoch shuffles every dataset,
/// cuts it into batches and interleaves all batches in random order, so a
/// dataset's share of batches follows its size.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    sizes: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(sizes: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        ensure!(batch_size >= 1, Validation, "batch size must be positive");
        ensure!(sizes.iter().any(|&n| n > 0), Validation, "sampler needs at least one non-empty dataset");
        Ok(BatchSampler { sizes, batch_size, seed })
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut batches = Vec::new();
        for (d, &n) in self.sizes.iter().enumerate() {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            for chunk in idx.chunks(self.batch_size) {
                batches.push(Batch {
                    dataset: d,
                    indices: chunk.to_vec(),
                });
            }
        }
        batches.shuffle(&mut rng);
        for b in &batches {
            assert!(b.indices.iter().all(|&i| i < self.sizes[b.dataset]), "batch mixes datasets");
        }
        batches
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sizes.iter().map(|n| n.div_ceil(self.batch_size)).sum()
    }

    /// Endless stream over consecutive epochs.
    pub fn stream(&self) -> impl Iterator<Item = Batch> + '_ {
        (0u64..).flat_map(move |e| self.epoch(e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec::default_pair(64).remove(0)
    }

    #[test]
    fn deterministic_and_nonempty() {
        let a = generate(&spec(), 30, 7).unwrap();
        let b = generate(&spec(), 30, 7).unwrap();
        assert_eq!(a.images, b.images);
        for im in &a.images {
            assert!(!im.annotations.is_empty());
            for an in &im.annotations {
                assert!(an.bbox.within(64.0, 64.0));
            }
        }
        let c = generate(&spec(), 30, 8).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&spec(), 12, 3).unwrap();
        let m = write_dataset(&ds, 3, dir.path()).unwrap();
        let (m2, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back.images, ds.images);
        verify_dataset(dir.path(), &m).unwrap();
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = spec();
        s.categories.truncate(1);
        assert!(generate(&s, 3, 0).is_err());
        let mut s = spec();
        s.image_size = 50;
        assert!(s.validate().is_err());
    }

    #[test]
    fn hflip_mirrors_boxes() {
        let im = render_image(&spec(), 5, 1);
        let f = im.hflip();
        assert_eq!(f.hflip(), im);
        let (a, b) = (im.normalized()[0].0, f.normalized()[0].0);
        assert!((a.cx + b.cx - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_never_mixes() {
        let s = BatchSampler::new(vec![37, 11], 4, 9).unwrap();
        let e = s.epoch(0);
        assert_eq!(e.len(), s.batches_per_epoch());
        let mut seen = vec![vec![false; 37], vec![false; 11]];
        for b in &e {
            for &i in &b.indices {
                assert!(!seen[b.dataset][i]);
                seen[b.dataset][i] = true;
            }
        }
        assert!(seen.iter().all(|v| v.iter().all(|&x| x)));
        assert_eq!(s.epoch(3), BatchSampler::new(vec![37, 11], 4, 9).unwrap().epoch(3));
    }
}

//! Dataset readers and writers: MVTec-style and VisA-style layouts, k-shot
//! selection, the generated-dataset manifest, and a procedural toy dataset.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pipeline::{mix_seed, GeneratedRecord};
use crate::types::ImageSample;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    MvtecStyle,
    VisaStyle,
    GeneratedManifest,
    /// Procedural toy data, stored in the MVTec-style layout.
    Toy,
}

impl std::str::FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvtec" | "mvtec-style" => Ok(Layout::MvtecStyle),
            "visa" | "visa-style" => Ok(Layout::VisaStyle),
            "generated" | "generated-manifest" => Ok(Layout::GeneratedManifest),
            "toy" => Ok(Layout::Toy),
            _ => Err(Error::invalid("layout", format!("unknown layout `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub layout: Layout,
    pub categories: Vec<String>,
    pub split: Split,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::invalid("categories", "empty"));
        }
        if !self.root.is_dir() {
            return Err(Error::Dataset { path: self.root.clone(), reason: "dataset root does not exist".into() });
        }
        Ok(())
    }

    pub fn with_split(&self, split: Split) -> Self {
        Self { split, ..self.clone() }
    }
}

/// One image with its image label and pixel ground truth (all-zero for
/// normal images).
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub image: ImageSample,
    pub y_img: u8,
    pub gt: Array2<f64>,
}

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset { path: path.to_path_buf(), reason: reason.into() }
}

pub fn read_image(path: &Path, category: &str) -> Result<ImageSample> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?.to_rgb8();
    let (w, h) = img.dimensions();
    let px = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0);
    ImageSample::new(px, category, Some(path.to_string_lossy().into_owned()))
}

/// Grayscale mask scaled to `[0, 1]`.
pub fn read_mask(path: &Path) -> Result<Array2<f64>> {
    if !path.is_file() {
        return Err(dataset_err(path, "missing mask"));
    }
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn write_image(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w, _) = pixels.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(pixels[[y, x, 0]]), to_u8(pixels[[y, x, 1]]), to_u8(pixels[[y, x, 2]])])
    });
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// 8-bit grayscale PNG holding `round(255 v)`.
pub fn write_mask(path: &Path, values: &Array2<f64>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(values[[y as usize, x as usize]])]));
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Values as stored in an 8-bit mask file.
pub fn quantize_mask(values: &Array2<f64>) -> Array2<f64> {
    values.mapv(|v| to_u8(v) as f64 / 255.0)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| dataset_err(dir, e.to_string()))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| dataset_err(dir, e.to_string()))?;
    let mut out: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    out.sort();
    Ok(out)
}

fn normal_sample(path: &Path, category: &str) -> Result<LoadedSample> {
    let image = read_image(path, category)?;
    let gt = Array2::zeros((image.height(), image.width()));
    Ok(LoadedSample { image, y_img: 0, gt })
}

fn anomalous_sample(path: &Path, mask: &Path, category: &str) -> Result<LoadedSample> {
    let image = read_image(path, category)?;
    let gt = read_mask(mask)?;
    if gt.dim() != (image.height(), image.width()) {
        return Err(dataset_err(mask, "mask size differs from image"));
    }
    Ok(LoadedSample { image, y_img: 1, gt })
}

fn mvtec_train_normals(root: &Path, category: &str) -> Result<Vec<PathBuf>> {
    sorted_pngs(&root.join(category).join("train").join("good"))
}

fn load_mvtec(root: &Path, category: &str, split: Split) -> Result<Vec<LoadedSample>> {
    let cat = root.join(category);
    match split {
        Split::Train => mvtec_train_normals(root, category)?.iter().map(|p| normal_sample(p, category)).collect(),
        Split::Test => {
            let mut out = Vec::new();
            for dir in sorted_subdirs(&cat.join("test"))? {
                let defect = dir.file_name().unwrap().to_string_lossy().into_owned();
                for p in sorted_pngs(&dir)? {
                    if defect == "good" {
                        out.push(normal_sample(&p, category)?);
                    } else {
                        let stem = p.file_stem().unwrap().to_string_lossy();
                        let mask = cat.join("ground_truth").join(&defect).join(format!("{stem}_mask.png"));
                        out.push(anomalous_sample(&p, &mask, category)?);
                    }
                }
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct VisaRow {
    object: String,
    split: String,
    label: String,
    image: String,
    #[serde(default)]
    mask: String,
}

pub const VISA_SPLIT_FILE: &str = "split.csv";

fn visa_rows(root: &Path, category: &str, split: Split) -> Result<Vec<VisaRow>> {
    let path = root.join(VISA_SPLIT_FILE);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| dataset_err(&path, e.to_string()))?;
    let want = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut out = Vec::new();
    for row in rdr.deserialize::<VisaRow>() {
        let row = row.map_err(|e| dataset_err(&path, e.to_string()))?;
        if row.object == category && row.split == want {
            out.push(row);
        }
    }
    Ok(out)
}

fn load_visa(root: &Path, category: &str, split: Split) -> Result<Vec<LoadedSample>> {
    visa_rows(root, category, split)?
        .iter()
        .map(|r| {
            let img = root.join(&r.image);
            match r.label.as_str() {
                "normal" => normal_sample(&img, category),
                "anomaly" => {
                    if r.mask.is_empty() {
                        return Err(dataset_err(&img, "anomalous image has no mask entry"));
                    }
                    anomalous_sample(&img, &root.join(&r.mask), category)
                }
                other => Err(dataset_err(&root.join(VISA_SPLIT_FILE), format!("unknown label `{other}`"))),
            }
        })
        .collect()
}

pub fn load_split(spec: &DatasetSpec, category: &str) -> Result<Vec<LoadedSample>> {
    spec.validate()?;
    match spec.layout {
        Layout::MvtecStyle | Layout::Toy => load_mvtec(&spec.root, category, spec.split),
        Layout::VisaStyle => load_visa(&spec.root, category, spec.split),
        Layout::GeneratedManifest => Ok(read_generated(&spec.root.join(category))?
            .into_iter()
            .map(|e| LoadedSample { image: e.image, y_img: e.record.y_img, gt: e.y_pix })
            .collect()),
    }
}

/// Canonical (sorted) training normals of a category.
pub fn train_normal_paths(spec: &DatasetSpec, category: &str) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    match spec.layout {
        Layout::MvtecStyle | Layout::Toy => mvtec_train_normals(&spec.root, category),
        Layout::VisaStyle => Ok(visa_rows(&spec.root, category, Split::Train)?
            .into_iter()
            .filter(|r| r.label == "normal")
            .map(|r| spec.root.join(r.image))
            .collect()),
        Layout::GeneratedManifest => Err(Error::invalid("layout", "k-shot sampling needs a real dataset layout")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KShot {
    Count(usize),
    All,
}

impl std::str::FromStr for KShot {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(KShot::All),
            "1" => Ok(KShot::Count(1)),
            "2" => Ok(KShot::Count(2)),
            "4" => Ok(KShot::Count(4)),
            _ => Err(Error::invalid("k", format!("expected 1, 2, 4 or all, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for KShot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KShot::Count(k) => write!(f, "{k}"),
            KShot::All => f.write_str("all"),
        }
    }
}

impl Serialize for KShot {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KShot {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        let s = match Raw::deserialize(d)? {
            Raw::N(n) => n.to_string(),
            Raw::S(s) => s,
        };
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KShotSample {
    pub k: KShot,
    pub seed: u64,
    pub selected: Vec<PathBuf>,
}

/// Seeded shuffle of the canonical order, then the first `k`. `All` keeps
/// the canonical order.
pub fn select_kshot(candidates: &[PathBuf], k: KShot, seed: u64) -> Result<KShotSample> {
    let selected = match k {
        KShot::All => candidates.to_vec(),
        KShot::Count(n) => {
            if n == 0 || n > candidates.len() {
                return Err(Error::invalid("k", format!("requested {n} normals, {} available", candidates.len())));
            }
            let mut idx: Vec<usize> = (0..candidates.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx[..n].iter().map(|&i| candidates[i].clone()).collect()
        }
    };
    if selected.is_empty() {
        return Err(Error::invalid("k", "no training normals available"));
    }
    Ok(KShotSample { k, seed, selected })
}

pub fn sample_kshot(spec: &DatasetSpec, category: &str, k: KShot, seed: u64) -> Result<KShotSample> {
    select_kshot(&train_normal_paths(spec, category)?, k, seed)
}

pub fn load_kshot(sel: &KShotSample, category: &str) -> Result<Vec<ImageSample>> {
    sel.selected.iter().map(|p| read_image(p, category)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub y_img: u8,
    pub seed: u64,
    pub gamma: f64,
    pub prompt: String,
    pub source_normal: String,
    pub anomaly_tokens: Vec<usize>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn indexed_name(i: usize) -> String {
    format!("{i:05}.png")
}

/// Writes `<dir>/images/<idx>.png`, `<dir>/masks/<idx>.png` and
/// `<dir>/manifest.jsonl`.
pub fn write_generated(records: &[GeneratedRecord], dir: &Path) -> Result<Vec<ManifestRecord>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(records.len());
    let mut text = String::new();
    for (index, r) in records.iter().enumerate() {
        let s = &r.sample;
        write_image(&dir.join("images").join(indexed_name(index)), &s.image.pixels)?;
        write_mask(&dir.join("masks").join(indexed_name(index)), &s.y_pix)?;
        let rec = ManifestRecord {
            index,
            y_img: s.y_img,
            seed: s.seed,
            gamma: s.gamma,
            prompt: s.prompt.text.clone(),
            source_normal: r.source_normal.clone(),
            anomaly_tokens: s.prompt.anomaly_token_indices.clone(),
        };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
        manifest.push(rec);
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedEntry {
    pub record: ManifestRecord,
    pub image: ImageSample,
    pub y_pix: Array2<f64>,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| dataset_err(&path, e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| dataset_err(&path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Reads a generated dataset directory; the category is the directory name.
pub fn read_generated(dir: &Path) -> Result<Vec<GeneratedEntry>> {
    let category = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_manifest(dir)?
        .into_iter()
        .map(|record| {
            let image = read_image(&dir.join("images").join(indexed_name(record.index)), &category)?;
            let y_pix = read_mask(&dir.join("masks").join(indexed_name(record.index)))?;
            Ok(GeneratedEntry { record, image, y_pix })
        })
        .collect()
}

pub const TOY_SIDE: usize = 128;
pub const TOY_CATEGORY: &str = "disk";
pub const TOY_DEFECTS: [&str; 3] = ["scratch", "blob", "wedge"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyScene {
    pub center: (f64, f64),
    pub radius: f64,
    pub disk: [f64; 3],
    pub background: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToyDefect {
    Scratch { from: (f64, f64), to: (f64, f64), half_width: f64, color: [f64; 3] },
    Blob { center: (f64, f64), radius: f64, color: [f64; 3] },
    /// Sector removed from the disk, angles in radians.
    Wedge { start: f64, span: f64 },
}

fn quantize(v: f64) -> f64 {
    to_u8(v) as f64 / 255.0
}

impl ToyScene {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let c = TOY_SIDE as f64 / 2.0;
        let mut jitter = |a: f64| rng.random_range(-a..=a);
        let center = (c + jitter(1.0), c + jitter(1.0));
        let radius = 40.0 + jitter(1.0);
        let d = jitter(0.02);
        let b = jitter(0.01);
        Self { center, radius, disk: [0.55 + d, 0.45 + d, 0.30 + d], background: [0.88 + b, 0.88 + b, 0.86 + b] }
    }

    fn inside(&self, y: f64, x: f64) -> bool {
        (y - self.center.0).powi(2) + (x - self.center.1).powi(2) < self.radius * self.radius
    }
}

impl ToyDefect {
    pub fn random(kind: usize, scene: &ToyScene, rng: &mut ChaCha8Rng) -> Self {
        let (cy, cx) = scene.center;
        let r = scene.radius;
        let mut point = |frac: f64| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let d = r * frac * rng.random_range(0.0f64..1.0).sqrt();
            (cy + d * a.sin(), cx + d * a.cos())
        };
        match kind % 3 {
            0 => {
                let from = point(0.8);
                let to = point(0.8);
                Self::Scratch { from, to, half_width: rng.random_range(1.0..2.0), color: [0.15, 0.13, 0.12] }
            }
            1 => {
                let center = point(0.6);
                Self::Blob { center, radius: rng.random_range(6.0..11.0), color: [0.80, 0.25, 0.20] }
            }
            _ => Self::Wedge { start: rng.random_range(0.0..std::f64::consts::TAU), span: rng.random_range(0.45..0.8) },
        }
    }

    fn covers(&self, y: f64, x: f64, scene: &ToyScene) -> Option<[f64; 3]> {
        if !scene.inside(y, x) {
            return None;
        }
        match *self {
            ToyDefect::Scratch { from, to, half_width, color } => {
                let (dy, dx) = (to.0 - from.0, to.1 - from.1);
                let len2 = (dy * dy + dx * dx).max(1e-12);
                let t = (((y - from.0) * dy + (x - from.1) * dx) / len2).clamp(0.0, 1.0);
                let (py, px) = (from.0 + t * dy, from.1 + t * dx);
                ((y - py).powi(2) + (x - px).powi(2) <= half_width * half_width).then_some(color)
            }
            ToyDefect::Blob { center, radius, color } => {
                ((y - center.0).powi(2) + (x - center.1).powi(2) <= radius * radius).then_some(color)
            }
            ToyDefect::Wedge { start, span } => {
                let a = (y - scene.center.0).atan2(x - scene.center.1);
                let rel = (a - start).rem_euclid(std::f64::consts::TAU);
                (rel < span).then_some(scene.background)
            }
        }
    }
}

/// Renders a scene (optionally with a defect) at 8-bit precision.
pub fn render_toy(scene: &ToyScene, defect: Option<&ToyDefect>) -> Array3<f64> {
    Array3::from_shape_fn((TOY_SIDE, TOY_SIDE, 3), |(y, x, c)| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let base = if scene.inside(fy, fx) { scene.disk[c] } else { scene.background[c] };
        let v = defect.and_then(|d| d.covers(fy, fx, scene)).map_or(base, |col| col[c]);
        quantize(v)
    })
}

/// Pixels whose rendering differs by more than `1/255` in any channel.
pub fn difference_mask(clean: &Array3<f64>, defective: &Array3<f64>) -> Array2<f64> {
    let (h, w, _) = clean.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let differs = (0..3).any(|c| (clean[[y, x, c]] - defective[[y, x, c]]).abs() > 1.0 / 255.0 + 1e-9);
        differs as u8 as f64
    })
}

/// Clean render, defective render and ground-truth mask of anomalous toy
/// image `index`.
pub fn render_toy_pair(seed: u64, index: usize) -> (Array3<f64>, Array3<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2_000_000 + index as u64));
    let scene = ToyScene::random(&mut rng);
    let defect = ToyDefect::random(index, &scene, &mut rng);
    let clean = render_toy(&scene, None);
    let bad = render_toy(&scene, Some(&defect));
    let mask = difference_mask(&clean, &bad);
    (clean, bad, mask)
}

fn render_toy_normal(seed: u64, salt: u64, index: usize) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, salt + index as u64));
    render_toy(&ToyScene::random(&mut rng), None)
}

/// Writes a toy dataset in the MVTec-style layout under `out`:
/// `n_normal` training normals, `n_normal` test normals and `n_anomalous`
/// defective test images with masks.
pub fn make_toy_dataset(out: &Path, n_normal: usize, n_anomalous: usize, seed: u64) -> Result<DatasetSpec> {
    if n_normal == 0 {
        return Err(Error::invalid("n_normal", "must be >= 1"));
    }
    let cat = out.join(TOY_CATEGORY);
    for i in 0..n_normal {
        write_image(&cat.join("train/good").join(format!("{i:03}.png")), &render_toy_normal(seed, 0, i))?;
        write_image(&cat.join("test/good").join(format!("{i:03}.png")), &render_toy_normal(seed, 1_000_000, i))?;
    }
    for i in 0..n_anomalous {
        let (_, bad, mask) = render_toy_pair(seed, i);
        let kind = TOY_DEFECTS[i % 3];
        write_image(&cat.join("test").join(kind).join(format!("{i:03}.png")), &bad)?;
        write_mask(&cat.join("ground_truth").join(kind).join(format!("{i:03}_mask.png")), &mask)?;
    }
    Ok(DatasetSpec { root: out.to_path_buf(), layout: Layout::Toy, categories: vec![TOY_CATEGORY.into()], split: Split::Test })
}

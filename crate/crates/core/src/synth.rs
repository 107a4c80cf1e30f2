//! Synthetic cell-like datasets and their on-disk layout.
//!
//! A dataset directory holds `manifest.json` plus one `img_NNNN.npa`
//! (`f32 [1, H, W]`) and `lbl_NNNN.npa` (`u32 [H, W]`) pair per image under
//! `train/`, `val/` and `test/`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instanceseg::InstanceMap;
use crate::npa;
use crate::tensor::{NdArray, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Instance,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Msa,
    Dice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub contrast: f64,
    pub noise: f64,
    pub overlap_allowed: bool,
    pub task: Task,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            n_train: 200,
            n_val: 20,
            n_test: 20,
            min_instances: 3,
            max_instances: 8,
            min_radius: 6.0,
            max_radius: 14.0,
            contrast: 0.4,
            noise: 0.05,
            overlap_allowed: false,
            task: Task::Instance,
            seed: 0,
        }
    }
}

impl GenSpec {
    /// One training and one validation image.
    pub fn two_image(seed: u64) -> Self {
        Self {
            n_train: 1,
            n_val: 1,
            n_test: 10,
            seed,
            ..Self::default()
        }
    }

    pub fn metric(&self) -> Metric {
        match self.task {
            Task::Instance => Metric::Msa,
            Task::Semantic => Metric::Dice,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 8 {
            return bad(format!("image size {} is too small", self.image_size));
        }
        if self.min_instances > self.max_instances {
            return bad(format!("instances ({}, {}) out of order", self.min_instances, self.max_instances));
        }
        if !(self.min_radius >= 2.0 && self.min_radius <= self.max_radius) {
            return bad(format!("radius range ({}, {}) needs 2 <= min <= max", self.min_radius, self.max_radius));
        }
        if self.max_radius >= self.image_size as f64 / 2.0 {
            return bad(format!("max radius {} must be below half the image size", self.max_radius));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return bad(format!("contrast {} outside (0, 1]", self.contrast));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise sigma {} must be non-negative", self.noise));
        }
        if self.task == Task::Semantic && self.max_instances > 1 {
            return bad("semantic datasets hold one object per image".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub image: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub task: Task,
    pub metric: Metric,
    pub image_size: usize,
    pub splits: BTreeMap<String, Vec<PairEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<GenSpec>,
}

/// One image with its instance annotation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `[1, H, W]` in `[0, 1]`.
    pub image: NdArray<f32>,
    pub labels: InstanceMap,
}

struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Blob {
    fn contains(&self, r: usize, c: usize) -> bool {
        let (dy, dx) = (r as f64 - self.cy, c as f64 - self.cx);
        let (s, co) = self.theta.sin_cos();
        let u = dy * co + dx * s;
        let v = -dy * s + dx * co;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn pixels(&self, size: usize) -> Vec<usize> {
        let rad = self.a.max(self.b).ceil() as isize;
        let (cy, cx) = (self.cy as isize, self.cx as isize);
        let mut out = Vec::new();
        for r in (cy - rad).max(0)..=(cy + rad).min(size as isize - 1) {
            for c in (cx - rad).max(0)..=(cx + rad).min(size as isize - 1) {
                if self.contains(r as usize, c as usize) {
                    out.push(r as usize * size + c as usize);
                }
            }
        }
        out
    }
}

fn split_rng(seed: u64, split: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((split as u64) << 40));
    rng.set_stream(index as u64);
    rng
}

/// Renders one image and its labels.
pub fn render(spec: &GenSpec, split: usize, index: usize) -> Result<(NdArray<f32>, InstanceMap)> {
    let n = spec.image_size;
    let mut rng = split_rng(spec.seed, split, index);
    let count = rng.random_range(spec.min_instances..=spec.max_instances);
    let background = rng.random_range(0.0..0.15);
    let mut labels = vec![0u32; n * n];
    let mut image = vec![background; n * n];
    for id in 1..=count as u32 {
        let mut placed = None;
        for _ in 0..1000 {
            let a = rng.random_range(spec.min_radius..=spec.max_radius);
            let b = rng.random_range(spec.min_radius..=spec.max_radius);
            let rad = a.max(b).ceil();
            let lo = rad.min(n as f64 / 2.0 - 1.0);
            let blob = Blob {
                cy: rng.random_range(lo..=n as f64 - 1.0 - lo).round(),
                cx: rng.random_range(lo..=n as f64 - 1.0 - lo).round(),
                a,
                b,
                theta: rng.random_range(0.0..PI),
            };
            let pix = blob.pixels(n);
            // keep a one-pixel gap so separate objects never touch
            let clash = !spec.overlap_allowed
                && pix.iter().any(|&p| {
                    labels[p] != 0 || crate::instanceseg::neighbors4(p, n, n).any(|q| labels[q] != 0)
                });
            if !clash {
                placed = Some(pix);
                break;
            }
        }
        let Some(pix) = placed else {
            return Err(Error::Data(format!(
                "{} image {index}: could not place instance {id} without overlap after 1000 attempts",
                SPLITS[split]
            )));
        };
        let intensity = background + spec.contrast + rng.random_range(0.0..=(1.0 - spec.contrast) * 0.5);
        for p in pix {
            labels[p] = id;
            image[p] = intensity;
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in image.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let image = NdArray::new(vec![1, n, n], image.into_iter().map(|v: f64| v.clamp(0.0, 1.0) as f32).collect())?;
    Ok((image, InstanceMap::new(n, n, labels)?))
}

fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a dataset for `spec` to `out_dir`. Output bytes depend only on
/// `spec`.
pub fn generate(spec: &GenSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut splits = BTreeMap::new();
    for (si, (name, count)) in SPLITS.iter().zip([spec.n_train, spec.n_val, spec.n_test]).enumerate() {
        let dir = out_dir.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let (image, labels) = render(spec, si, i)?;
            let entry = PairEntry {
                image: format!("{name}/img_{i:04}.npa"),
                label: format!("{name}/lbl_{i:04}.npa"),
            };
            npa::write(&out_dir.join(&entry.image), &Tensor::from_f32(&image))?;
            npa::write(&out_dir.join(&entry.label), &labels.to_tensor())?;
            entries.push(entry);
        }
        splits.insert(name.to_string(), entries);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        task: spec.task,
        metric: spec.metric(),
        image_size: spec.image_size,
        splits,
        spec: Some(spec.clone()),
    };
    write_manifest(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// An opened dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Opens `path`, which is either a dataset directory or its manifest.
    pub fn open(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join("manifest.json"))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: file.clone(),
            msg: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path: file,
                msg: format!("unsupported format version {}", manifest.format_version),
            });
        }
        Ok(Self { root, manifest })
    }

    pub fn len(&self, split: &str) -> usize {
        self.manifest.splits.get(split).map_or(0, Vec::len)
    }

    pub fn entries(&self, split: &str) -> Result<&[PairEntry]> {
        self.manifest
            .splits
            .get(split)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("dataset has no {split:?} split")))
    }

    pub fn load_entry(&self, entry: &PairEntry) -> Result<Sample> {
        let ipath = self.root.join(&entry.image);
        let lpath = self.root.join(&entry.label);
        let image = npa::read(&ipath)?.to_float::<f32>().map_err(|e| Error::Format {
            path: ipath.clone(),
            msg: e.to_string(),
        })?;
        let labels = InstanceMap::from_tensor(&npa::read(&lpath)?).map_err(|e| Error::Format {
            path: lpath.clone(),
            msg: e.to_string(),
        })?;
        let image = match image.shape() {
            [h, w] => image.clone().reshaped(&[1, *h, *w])?,
            _ => image,
        };
        let s = image.shape();
        if s.len() != 3 || (s[1], s[2]) != labels.shape() {
            return Err(Error::Data(format!(
                "{}: image {:?} does not match labels {:?}",
                ipath.display(),
                s,
                labels.shape()
            )));
        }
        Ok(Sample {
            id: entry.image.clone(),
            image: normalize(image),
            labels,
        })
    }

    /// Samples of `split` in manifest order.
    pub fn load(&self, split: &str) -> Result<Vec<Sample>> {
        self.entries(split)?.iter().map(|e| self.load_entry(e)).collect()
    }
}

/// Min-max scales to `[0, 1]`; constant images become zero.
pub fn normalize(mut a: NdArray<f32>) -> NdArray<f32> {
    let (lo, hi) = a
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    for v in a.data_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
    a
}

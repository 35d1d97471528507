//! Seeded synthetic lesion benchmark.
//!
//! Each sample is a textured background with one elliptical or star-polygon
//! lesion. A scalar irregularity `q` drives the shape (ellipse eccentricity
//! equals `q`; polygons additionally jitter their vertex radii by `q`) and the
//! label: `q > cutoff` is malignant.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{write_file, BinaryMask, GrayImage};
use crate::seed;

pub const BENIGN: &str = "benign";
pub const MALIGNANT: &str = "malignant";
pub const DEFAULT_QUERY: &str = "Can you segment the lesion and give the diagnosis?";

pub fn label_vocabulary() -> Vec<String> {
    vec![BENIGN.to_owned(), MALIGNANT.to_owned()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Polygon,
    /// Alternates ellipse (even index) and polygon (odd index).
    Mixed,
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(ShapeKind::Ellipse),
            "polygon" => Ok(ShapeKind::Polygon),
            "mixed" => Ok(ShapeKind::Mixed),
            other => Err(Error::invalid(format!("unknown lesion shape {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub shape: ShapeKind,
    /// Lesion area as a fraction of the image, sampled uniformly.
    pub area_min: f64,
    pub area_max: f64,
    /// Irregularity, sampled uniformly from `[irregularity_min, irregularity_max)`.
    pub irregularity_min: f64,
    pub irregularity_max: f64,
    /// Irregularity above this is labelled malignant.
    pub cutoff: f64,
    pub polygon_vertices: usize,
    /// Relative vertex-radius jitter per unit irregularity.
    pub polygon_jitter: f64,
    pub background: f64,
    pub lesion: f64,
    /// Standard deviation of the per-pixel texture noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            shape: ShapeKind::Mixed,
            area_min: 0.11,
            area_max: 0.17,
            irregularity_min: 0.0,
            irregularity_max: 0.9,
            cutoff: 0.45,
            polygon_vertices: 12,
            polygon_jitter: 0.3,
            background: 0.3,
            lesion: 0.7,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("image size must be nonzero"));
        }
        if !(self.area_min > 0.0 && self.area_min <= self.area_max && self.area_max <= 0.5) {
            return Err(Error::invalid("area fractions must satisfy 0 < min <= max <= 0.5"));
        }
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            return Err(Error::invalid("label cutoff must lie in (0, 1)"));
        }
        if !(self.irregularity_min >= 0.0
            && self.irregularity_min <= self.irregularity_max
            && self.irregularity_max < 1.0)
        {
            return Err(Error::invalid("irregularity range must lie in [0, 1)"));
        }
        if self.polygon_vertices < 3 {
            return Err(Error::invalid("polygons need at least 3 vertices"));
        }
        if !(self.polygon_jitter >= 0.0 && self.polygon_jitter < 1.0) {
            return Err(Error::invalid("polygon jitter must lie in [0, 1)"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise scale must be finite and >= 0"));
        }
        // Largest ellipse the spec can ask for must fit.
        let radius = semi_major(self.area_max * self.pixel_count(), self.irregularity_max);
        if 2.0 * radius.ceil() + 1.0 > self.height.min(self.width) as f64 {
            return Err(Error::invalid(format!(
                "lesion of radius {radius:.1} does not fit a {}x{} image",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn pixel_count(&self) -> f64 {
        (self.height * self.width) as f64
    }

    pub fn label_for(&self, irregularity: f64) -> &'static str {
        if irregularity > self.cutoff {
            MALIGNANT
        } else {
            BENIGN
        }
    }

    fn shape_at(&self, index: usize) -> ShapeKind {
        match self.shape {
            ShapeKind::Mixed if index % 2 == 0 => ShapeKind::Ellipse,
            ShapeKind::Mixed => ShapeKind::Polygon,
            fixed => fixed,
        }
    }
}

/// Axis ratio of an ellipse with eccentricity `q`.
fn axis_ratio(q: f64) -> f64 {
    (1.0 - q * q).sqrt()
}

fn semi_major(area: f64, q: f64) -> f64 {
    (area / (PI * axis_ratio(q))).sqrt()
}

/// Exact geometry a sample was rasterized from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lesion {
    Ellipse {
        center: (f64, f64),
        semi_major: f64,
        semi_minor: f64,
        angle: f64,
    },
    Polygon {
        /// `(row, col)` vertices in order.
        vertices: Vec<(f64, f64)>,
    },
}

impl Lesion {
    /// Whether the point `(row, col)` lies inside.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Lesion::Ellipse {
                center,
                semi_major,
                semi_minor,
                angle,
            } => {
                let (dy, dx) = (y - center.0, x - center.1);
                let (s, c) = angle.sin_cos();
                let u = (dx * c + dy * s) / semi_major;
                let v = (-dx * s + dy * c) / semi_minor;
                u * u + v * v <= 1.0
            }
            Lesion::Polygon { vertices } => {
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (yi, xi) = vertices[i];
                    let (yj, xj) = vertices[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    /// Analytic area.
    pub fn area(&self) -> f64 {
        match self {
            Lesion::Ellipse {
                semi_major,
                semi_minor,
                ..
            } => PI * semi_major * semi_minor,
            Lesion::Polygon { vertices } => polygon_area(vertices),
        }
    }

    /// Analytic perimeter (Ramanujan's approximation for ellipses).
    pub fn perimeter(&self) -> f64 {
        match self {
            Lesion::Ellipse {
                semi_major: a,
                semi_minor: b,
                ..
            } => PI * (3.0 * (a + b) - ((3.0 * a + b) * (a + 3.0 * b)).sqrt()),
            Lesion::Polygon { vertices } => {
                let n = vertices.len();
                (0..n)
                    .map(|i| {
                        let (a, b) = (vertices[i], vertices[(i + 1) % n]);
                        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
                    })
                    .sum()
            }
        }
    }

    /// Pixels whose centres fall inside the lesion.
    pub fn rasterize(&self, height: usize, width: usize) -> BinaryMask {
        let mut mask = BinaryMask::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                if self.contains(r as f64 + 0.5, c as f64 + 0.5) {
                    mask.set(r, c, true);
                }
            }
        }
        mask
    }
}

fn polygon_area(vertices: &[(f64, f64)]) -> f64 {
    let n = vertices.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            a.1 * b.0 - b.1 * a.0
        })
        .sum();
    twice.abs() / 2.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub label: String,
    pub irregularity: f64,
    pub query: String,
    pub subset: String,
    pub lesion: Lesion,
}

/// Places a lesion of bounding radius `radius` with its centre on a pixel
/// centre, fully inside the image.
fn place(rng: &mut ChaCha8Rng, radius: f64, height: usize, width: usize) -> Result<(f64, f64)> {
    let r = radius.ceil() as usize;
    if 2 * r + 1 > height || 2 * r + 1 > width {
        return Err(Error::invalid(format!(
            "lesion of radius {radius:.1} does not fit a {height}x{width} image"
        )));
    }
    let row = rng.random_range(r..=height - 1 - r);
    let col = rng.random_range(r..=width - 1 - r);
    Ok((row as f64 + 0.5, col as f64 + 0.5))
}

fn generate_one(spec: &SceneSpec, index: usize) -> Result<Sample> {
    let mut rng = seed::rng(seed::derive(spec.seed, &[seed::TAG_DATASET, index as u64]));
    let area_frac = rng.random_range(spec.area_min..=spec.area_max);
    let q = if spec.irregularity_max > spec.irregularity_min {
        rng.random_range(spec.irregularity_min..spec.irregularity_max)
    } else {
        spec.irregularity_min
    };
    let area = area_frac * spec.pixel_count();
    let angle = rng.random_range(0.0..PI);
    let a = semi_major(area, q);
    let b = a * axis_ratio(q);
    let shape = spec.shape_at(index);
    let lesion = match shape {
        ShapeKind::Polygon => {
            let n = spec.polygon_vertices;
            let (s, c) = angle.sin_cos();
            let mut local: Vec<(f64, f64)> = (0..n)
                .map(|k| {
                    let t = 2.0 * PI * k as f64 / n as f64;
                    let jitter = 1.0 + spec.polygon_jitter * q * rng.random_range(-1.0..=1.0);
                    let (u, v) = (a * t.cos() * jitter, b * t.sin() * jitter);
                    (u * s + v * c, u * c - v * s)
                })
                .collect();
            let scale = (area / polygon_area(&local)).sqrt();
            for p in &mut local {
                p.0 *= scale;
                p.1 *= scale;
            }
            let radius = local
                .iter()
                .map(|p| (p.0 * p.0 + p.1 * p.1).sqrt())
                .fold(0.0, f64::max);
            let center = place(&mut rng, radius, spec.height, spec.width)?;
            Lesion::Polygon {
                vertices: local
                    .into_iter()
                    .map(|(y, x)| (y + center.0, x + center.1))
                    .collect(),
            }
        }
        _ => {
            let center = place(&mut rng, a, spec.height, spec.width)?;
            Lesion::Ellipse {
                center,
                semi_major: a,
                semi_minor: b,
                angle,
            }
        }
    };
    let mask = lesion.rasterize(spec.height, spec.width);
    if mask.count_ones() == 0 {
        return Err(Error::invalid("lesion rasterized to an empty mask"));
    }
    let pixels = mask
        .bits()
        .iter()
        .map(|&inside| {
            let base = if inside { spec.lesion } else { spec.background };
            let noise: f64 = StandardNormal.sample(&mut rng);
            // Quantized so that a PGM round trip is lossless.
            ((base + spec.noise * noise).clamp(0.0, 1.0) * 255.0).round() / 255.0
        })
        .collect();
    let subset = match shape {
        ShapeKind::Polygon => "polygon",
        _ => "ellipse",
    };
    Ok(Sample {
        id: format!("{index:05}"),
        image: GrayImage::new(spec.height, spec.width, pixels)?,
        mask,
        label: spec.label_for(q).to_owned(),
        irregularity: q,
        query: DEFAULT_QUERY.to_owned(),
        subset: subset.to_owned(),
        lesion,
    })
}

/// `count` samples, each seeded from `(spec.seed, index)`.
pub fn generate(spec: &SceneSpec, count: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    spec.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub label: String,
    pub subset: String,
    pub query: String,
    pub irregularity: f64,
    pub lesion: Lesion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: Option<SceneSpec>,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `images/<id>.pgm`, `masks/<id>.pbm` and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, spec: Option<&SceneSpec>, samples: &[Sample]) -> Result<()> {
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = format!("images/{}.pgm", s.id);
        let mask = format!("masks/{}.pbm", s.id);
        s.image.write_pgm(&dir.join(&image))?;
        s.mask.write_pbm(&dir.join(&mask))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image,
            mask,
            label: s.label.clone(),
            subset: s.subset.clone(),
            query: s.query.clone(),
            irregularity: s.irregularity,
            lesion: s.lesion.clone(),
        });
    }
    let manifest = DatasetManifest {
        spec: spec.cloned(),
        samples: entries,
    };
    write_file(
        &dir.join(MANIFEST_FILE),
        (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes(),
    )
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.samples.is_empty() {
        return Err(Error::invalid("dataset manifest lists no samples"));
    }
    manifest
        .samples
        .into_iter()
        .map(|e| {
            let image = GrayImage::read_pgm(&dir.join(&e.image))?;
            let mask = BinaryMask::read_pbm(&dir.join(&e.mask))?;
            if mask.shape() != (image.height(), image.width()) {
                return Err(Error::invalid(format!("sample {}: mask and image sizes differ", e.id)));
            }
            Ok(Sample {
                id: e.id,
                image,
                mask,
                label: e.label,
                irregularity: e.irregularity,
                query: e.query,
                subset: e.subset,
                lesion: e.lesion,
            })
        })
        .collect()
}

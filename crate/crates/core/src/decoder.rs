//! Toy mask decoder. Per-pixel score is
//! `logistic(<feature, seg> + gain * upsampled_region)`, thresholded into bits.

use serde::{Deserialize, Serialize};

use rand_distr::{Distribution, StandardNormal};

use crate::embeddings::SegEmbedding;
use crate::error::{Error, Result};
use crate::raster::{to_byte, write_file, BinaryMask, GrayImage};
use crate::rvls2m::RegionMask;
use crate::seed;

/// Per-pixel statistics: 3x3 local mean, 3x3 local variance, constant 1.
pub const LOCAL_STATS: usize = 3;

/// `height x width x dim` features, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl VisualFeatures {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 || values.len() != height * width * dim {
            return Err(Error::invalid("feature buffer disagrees with its dimensions"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features contain non-finite values"));
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Result<Self> {
        Self::new(height, width, dim, vec![0.0; height * width * dim])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let at = (row * self.width + col) * self.dim;
        &self.values[at..at + self.dim]
    }
}

/// Local mean and variance over the 3x3 neighbourhood, borders replicated.
pub fn local_stats(image: &GrayImage, row: usize, col: usize) -> [f64; LOCAL_STATS] {
    let (h, w) = (image.height() as isize, image.width() as isize);
    let mut sum = 0.0;
    let mut sq = 0.0;
    for dr in -1isize..=1 {
        for dc in -1isize..=1 {
            let r = (row as isize + dr).clamp(0, h - 1) as usize;
            let c = (col as isize + dc).clamp(0, w - 1) as usize;
            let v = image.get(r, c);
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / 9.0;
    let var = (sq / 9.0 - mean * mean).max(0.0);
    [mean, var, 1.0]
}

/// Fixed linear map from local statistics to per-pixel features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    dim: usize,
    /// `dim x LOCAL_STATS`, row-major.
    weights: Vec<f64>,
}

impl FeatureExtractor {
    pub fn seeded(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature width must be >= 1"));
        }
        let mut rng = seed::rng(seed::derive(seed, &[seed::TAG_FEATURES]));
        let weights = (0..dim * LOCAL_STATS)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self { dim, weights })
    }

    pub fn from_weights(dim: usize, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || weights.len() != dim * LOCAL_STATS {
            return Err(Error::invalid(format!(
                "feature extractor needs {dim}x{LOCAL_STATS} weights"
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature weights must be finite"));
        }
        Ok(Self { dim, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn extract(&self, image: &GrayImage) -> VisualFeatures {
        let (h, w) = (image.height(), image.width());
        let mut values = Vec::with_capacity(h * w * self.dim);
        for r in 0..h {
            for c in 0..w {
                let stats = local_stats(image, r, c);
                for row in self.weights.chunks_exact(LOCAL_STATS) {
                    values.push(row.iter().zip(&stats).map(|(a, s)| a * s).sum());
                }
            }
        }
        VisualFeatures {
            height: h,
            width: w,
            dim: self.dim,
            values,
        }
    }
}

/// Seeded per-pixel features of width `dim`.
pub fn extract_features(image: &GrayImage, dim: usize, seed: u64) -> Result<VisualFeatures> {
    Ok(FeatureExtractor::seeded(dim, seed)?.extract(image))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Weight of the region prompt in the pixel logit.
    pub gain: f64,
    /// Score at or above which a pixel is set.
    pub threshold: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        // 0.6 keeps logistic(0) = 0.5 strictly below threshold.
        Self {
            gain: 4.0,
            threshold: 0.6,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain >= 0.0 && self.gain.is_finite()) {
            return Err(Error::invalid("decoder gain must be finite and >= 0"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("decoder threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Decoder output: scores plus the thresholded bits.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedMask {
    scores: Vec<f64>,
    mask: BinaryMask,
    threshold: f64,
}

impl PredictedMask {
    pub fn from_scores(height: usize, width: usize, scores: Vec<f64>, threshold: f64) -> Result<Self> {
        let bits = scores.iter().map(|&s| s >= threshold).collect();
        Ok(Self {
            mask: BinaryMask::new(height, width, bits)?,
            scores,
            threshold,
        })
    }

    /// Wraps a hard mask with scores 1.0 / 0.0.
    pub fn from_mask(mask: BinaryMask) -> Self {
        let scores = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self {
            mask,
            scores,
            threshold: 0.5,
        }
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn to_pbm(&self) -> Vec<u8> {
        self.mask.to_pbm()
    }

    /// Scores scaled to 0..=255 as binary PGM.
    pub fn scores_to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width(), self.height()).into_bytes();
        out.extend(self.scores.iter().map(|s| to_byte(*s)));
        out
    }

    pub fn write_pbm(&self, path: &std::path::Path) -> Result<()> {
        write_file(path, &self.to_pbm())
    }
}

/// Nearest-neighbour upsampling of a `g x g` prompt to `height x width`.
pub fn upsample(region: &RegionMask, height: usize, width: usize) -> BinaryMask {
    let g = region.grid();
    let mut out = BinaryMask::zeros(height, width);
    for r in 0..height {
        let k = r * g / height;
        for c in 0..width {
            out.set(r, c, region.get(k, c * g / width));
        }
    }
    out
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Feature/embedding logits, independent of the region prompt. Decoding many
/// prompts against one embedding reuses this.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLogits {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl PixelLogits {
    pub fn new(feats: &VisualFeatures, seg: &SegEmbedding) -> Result<Self> {
        if feats.dim != seg.dim() {
            return Err(Error::invalid(format!(
                "features have width {}, segmentation embedding {}",
                feats.dim,
                seg.dim()
            )));
        }
        let values = feats
            .values
            .chunks_exact(feats.dim)
            .map(|f| f.iter().zip(seg.values()).map(|(a, b)| a * b).sum())
            .collect();
        Ok(Self {
            height: feats.height,
            width: feats.width,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Scores of every pixel with the prompt off and on under `cfg`.
    pub fn prompt_scores(&self, cfg: &DecoderConfig) -> Result<PromptScores> {
        cfg.validate()?;
        let off: Vec<f64> = self.values.iter().map(|&z| logistic(z + 0.0)).collect();
        let on: Vec<f64> = self.values.iter().map(|&z| logistic(z + cfg.gain)).collect();
        Ok(PromptScores {
            height: self.height,
            width: self.width,
            off_bits: off.iter().map(|&s| s >= cfg.threshold).collect(),
            on_bits: on.iter().map(|&s| s >= cfg.threshold).collect(),
            off,
            on,
            threshold: cfg.threshold,
        })
    }

    pub fn decode(&self, region: &RegionMask, cfg: &DecoderConfig) -> Result<PredictedMask> {
        self.prompt_scores(cfg)?.decode(region)
    }
}

/// Per-pixel scores for a fixed embedding and decoder configuration. Any
/// prompt selects, pixel by pixel, one of the two.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptScores {
    height: usize,
    width: usize,
    off: Vec<f64>,
    on: Vec<f64>,
    off_bits: Vec<bool>,
    on_bits: Vec<bool>,
    threshold: f64,
}

impl PromptScores {
    fn upsampled(&self, region: &RegionMask) -> Result<BinaryMask> {
        let g = region.grid();
        if g > self.height.min(self.width) {
            return Err(Error::invalid(format!(
                "{g}x{g} prompt is finer than the {}x{} feature grid",
                self.height, self.width
            )));
        }
        Ok(upsample(region, self.height, self.width))
    }

    pub fn decode(&self, region: &RegionMask) -> Result<PredictedMask> {
        let up = self.upsampled(region)?;
        let scores = up
            .bits()
            .iter()
            .enumerate()
            .map(|(p, &on)| if on { self.on[p] } else { self.off[p] })
            .collect();
        PredictedMask::from_scores(self.height, self.width, scores, self.threshold)
    }

    /// The bits [`decode`](Self::decode) would produce, without the scores.
    pub fn decode_bits(&self, region: &RegionMask) -> Result<BinaryMask> {
        let mut up = self.upsampled(region)?;
        for (p, b) in up.bits_mut().iter_mut().enumerate() {
            *b = if *b { self.on_bits[p] } else { self.off_bits[p] };
        }
        Ok(up)
    }
}

/// Fuses features, embedding, and region prompt into a pixel mask.
pub fn decode(
    feats: &VisualFeatures,
    seg: &SegEmbedding,
    region: &RegionMask,
    cfg: &DecoderConfig,
) -> Result<PredictedMask> {
    PixelLogits::new(feats, seg)?.decode(region, cfg)
}

//! A deterministic toy vision-language model.
//!
//! The patch encoder and feature extractor are built so that the projected
//! segmentation embedding of the model's base hidden state reads out image
//! brightness: `sim_i = similarity_gain * patch_mean_i` and
//! `<feature_p, seg> = feature_gain * (local_mean_p - 0.5)`. Every other
//! direction of the weights is seeded noise orthogonal to that embedding,
//! so jittered hidden states (reasoning paths) read the image differently.
//!
//! The diagnosis is a thresholded estimate of lesion eccentricity from
//! second moments of the largest bright component.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::{FeatureExtractor, VisualFeatures, LOCAL_STATS};
use crate::embeddings::{
    extract_seg_token, project, Activation, EmbeddingMatrix, HeadWidths, PatchEncoder,
    ProjectionHead, SegEmbedding, SegTokenRaw, PATCH_STATS,
};
use crate::error::{Error, Result};
use crate::metrics::SEG_MARKER;
use crate::raster::GrayImage;
use crate::seed;
use crate::synthdata::{BENIGN, MALIGNANT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    /// Hidden-state width of the segmentation token.
    pub hidden_dim: usize,
    pub projection_hidden: usize,
    /// Shared width of image tokens, features and the projected embedding.
    pub embed_dim: usize,
    pub relu: bool,
    pub patch: usize,
    pub similarity_gain: f64,
    pub feature_gain: f64,
    /// Scale of the seeded weight components orthogonal to the base embedding.
    pub cross_talk: f64,
    /// Intensity separating lesion from background for the diagnosis estimate.
    pub lesion_threshold: f64,
    pub diagnosis_cutoff: f64,
    /// Standard deviation of the diagnosis jitter per unit of path noise.
    pub diagnosis_noise: f64,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            projection_hidden: 64,
            embed_dim: 16,
            relu: true,
            patch: 1,
            similarity_gain: 8.0,
            feature_gain: 1.0,
            cross_talk: 0.5,
            lesion_threshold: 0.5,
            diagnosis_cutoff: 0.45,
            diagnosis_noise: 0.5,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn head_widths(&self) -> HeadWidths {
        HeadWidths {
            input: self.hidden_dim,
            hidden: self.projection_hidden,
            output: self.embed_dim,
        }
    }

    pub fn activation(&self) -> Activation {
        if self.relu {
            Activation::Relu
        } else {
            Activation::Tanh
        }
    }
}

/// One sampled reasoning path.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningPath {
    pub index: usize,
    pub seed: u64,
    pub noise: f64,
    pub text: String,
    pub tokens: Vec<String>,
    pub seg_raw: SegTokenRaw,
    pub diagnosis: String,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ToyModelConfig,
    head: ProjectionHead,
    base_state: SegTokenRaw,
    anchor: SegEmbedding,
    encoder: PatchEncoder,
    extractor: FeatureExtractor,
}

const OPENINGS: [&str; 4] = [
    "Looking at the image,",
    "On inspection,",
    "Reviewing the scan,",
    "After examining the image,",
];

const CLOSINGS: [&str; 4] = [
    "The lesion is",
    "Overall the lesion appears",
    "The findings indicate the lesion is",
    "This lesion looks",
];

/// Builds `dim x stats` weights whose transpose maps `anchor` onto `readout`,
/// plus seeded components orthogonal to `anchor`.
fn aligned_weights(
    anchor: &[f64],
    readout: &[f64],
    cross_talk: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let dim = anchor.len();
    let stats = readout.len();
    let norm2: f64 = anchor.iter().map(|a| a * a).sum();
    let mut weights = vec![0.0; dim * stats];
    for (j, &target) in readout.iter().enumerate() {
        let mut noise: Vec<f64> = (0..dim)
            .map(|_| cross_talk * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        let along = noise.iter().zip(anchor).map(|(n, a)| n * a).sum::<f64>() / norm2;
        for (n, a) in noise.iter_mut().zip(anchor) {
            *n -= along * a;
        }
        for k in 0..dim {
            weights[k * stats + j] = target * anchor[k] / norm2 + noise[k];
        }
    }
    weights
}

impl ToyModel {
    pub fn new(cfg: ToyModelConfig) -> Result<Self> {
        if cfg.patch == 0 {
            return Err(Error::invalid("patch size must be >= 1"));
        }
        let head = ProjectionHead::seeded(cfg.head_widths(), cfg.activation(), cfg.seed)?;
        let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::TAG_SEG_STATE]));
        // Redraw until the projection is not degenerate.
        let (base_state, anchor) = loop {
            let state: Vec<f64> = (0..cfg.hidden_dim)
                .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let state = SegTokenRaw::new(state)?;
            let anchor = project(&state, &head)?;
            if anchor.values().iter().map(|v| v * v).sum::<f64>() > 1e-6 {
                break (state, anchor);
            }
        };
        let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::TAG_ENCODER]));
        let mut readout = [0.0; PATCH_STATS];
        readout[0] = cfg.similarity_gain;
        let encoder = PatchEncoder::from_weights(
            cfg.embed_dim,
            aligned_weights(anchor.values(), &readout, cfg.cross_talk, &mut rng),
        )?;
        let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::TAG_FEATURES]));
        let readout: [f64; LOCAL_STATS] = [cfg.feature_gain, 0.0, -0.5 * cfg.feature_gain];
        let extractor = FeatureExtractor::from_weights(
            cfg.embed_dim,
            aligned_weights(anchor.values(), &readout, cfg.cross_talk, &mut rng),
        )?;
        Ok(Self {
            cfg,
            head,
            base_state,
            anchor,
            encoder,
            extractor,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn head(&self) -> &ProjectionHead {
        &self.head
    }

    pub fn base_state(&self) -> &SegTokenRaw {
        &self.base_state
    }

    /// Projection of the base hidden state.
    pub fn anchor(&self) -> &SegEmbedding {
        &self.anchor
    }

    pub fn encode(&self, image: &GrayImage) -> Result<EmbeddingMatrix> {
        self.encoder.encode(image, self.cfg.patch)
    }

    pub fn features(&self, image: &GrayImage) -> VisualFeatures {
        self.extractor.extract(image)
    }

    /// Eccentricity of the largest 4-connected component of pixels whose
    /// 5x5 box mean exceeds the lesion threshold; 0 when it has < 3 pixels.
    pub fn lesion_eccentricity(&self, image: &GrayImage) -> f64 {
        let (h, w) = (image.height(), image.width());
        let smooth = box_mean(image, 2);
        let bright: Vec<bool> = smooth.iter().map(|&v| v > self.cfg.lesion_threshold).collect();
        let component = largest_component(&bright, h, w);
        if component.len() < 3 {
            return 0.0;
        }
        let n = component.len() as f64;
        let (mut my, mut mx) = (0.0, 0.0);
        for &(r, c) in &component {
            my += r as f64;
            mx += c as f64;
        }
        my /= n;
        mx /= n;
        let (mut syy, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
        for &(r, c) in &component {
            let (dy, dx) = (r as f64 - my, c as f64 - mx);
            syy += dy * dy;
            sxx += dx * dx;
            sxy += dy * dx;
        }
        let (syy, sxx, sxy) = (syy / n, sxx / n, sxy / n);
        let mid = (syy + sxx) / 2.0;
        let rad = (((syy - sxx) / 2.0).powi(2) + sxy * sxy).sqrt();
        let (major, minor) = (mid + rad, (mid - rad).max(0.0));
        if major <= 0.0 {
            return 0.0;
        }
        (1.0 - minor / major).max(0.0).sqrt()
    }

    fn label_for(&self, statistic: f64) -> &'static str {
        if statistic > self.cfg.diagnosis_cutoff {
            MALIGNANT
        } else {
            BENIGN
        }
    }

    /// Renders path `index` from its seed. `eccentricity` is the image's
    /// [`lesion_eccentricity`](Self::lesion_eccentricity).
    pub fn path_from_statistic(
        &self,
        eccentricity: f64,
        index: usize,
        path_seed: u64,
        noise: f64,
    ) -> Result<ReasoningPath> {
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::invalid("path noise must be finite and >= 0"));
        }
        let mut rng = seed::rng(path_seed);
        let state: Vec<f64> = self
            .base_state
            .values()
            .iter()
            .map(|v| v + noise * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let jitter: f64 = Distribution::<f64>::sample(&StandardNormal, &mut rng);
        let diagnosis = self.label_for(eccentricity + noise * self.cfg.diagnosis_noise * jitter);
        let opening = OPENINGS[rng.random_range(0..OPENINGS.len())];
        let closing = CLOSINGS[rng.random_range(0..CLOSINGS.len())];
        let text = format!(
            "{opening} the suspicious region is outlined. It is {SEG_MARKER}. {closing} {diagnosis}."
        );
        let tokens = tokenize(&text);
        let hidden: Vec<Vec<f64>> = tokens
            .iter()
            .map(|t| {
                if t == SEG_MARKER {
                    state.clone()
                } else {
                    (0..self.cfg.hidden_dim)
                        .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng))
                        .collect()
                }
            })
            .collect();
        let seg_raw = extract_seg_token(&hidden, &tokens, &SEG_MARKER.to_owned())?;
        Ok(ReasoningPath {
            index,
            seed: path_seed,
            noise,
            text,
            tokens,
            seg_raw,
            diagnosis: diagnosis.to_owned(),
        })
    }

    pub fn sample_path(
        &self,
        image: &GrayImage,
        index: usize,
        path_seed: u64,
        noise: f64,
    ) -> Result<ReasoningPath> {
        self.path_from_statistic(self.lesion_eccentricity(image), index, path_seed, noise)
    }
}

/// Whitespace tokens with the segmentation marker split off as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut rest = word;
        while let Some(pos) = rest.find(SEG_MARKER) {
            if pos > 0 {
                out.push(rest[..pos].to_owned());
            }
            out.push(SEG_MARKER.to_owned());
            rest = &rest[pos + SEG_MARKER.len()..];
        }
        if !rest.is_empty() {
            out.push(rest.to_owned());
        }
    }
    out
}

fn box_mean(image: &GrayImage, radius: usize) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(h - 1));
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(w - 1));
            let mut acc = 0.0;
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    acc += image.get(rr, cc);
                }
            }
            out.push(acc / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64);
        }
    }
    out
}

fn largest_component(on: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut seen = vec![false; on.len()];
    let mut best: Vec<(usize, usize)> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            comp.push((r, c));
            let mut visit = |nr: usize, nc: usize| {
                let j = nr * w + nc;
                if on[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < h {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < w {
                visit(r, c + 1);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

//! Test-time scaling: `m` reasoning paths times `n` perturbed region prompts,
//! decoded into candidate masks and reduced to one by quality.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, PixelLogits, PredictedMask, PromptScores, VisualFeatures};
use crate::embeddings::{project, ProjectionHead};
use crate::error::{Error, Result};
use crate::metrics::{extract_diagnosis, quality, MaskPair};
use crate::raster::{BinaryMask, GrayImage};
use crate::rvls2m::RegionMask;
use crate::seed;
use crate::toy::{ReasoningPath, ToyModel};

/// `m` paths for one image; path `i` is seeded with `base_seed + i`.
/// The toy model gives the same answer to every query, so `query` is only
/// checked for presence.
pub fn sample_paths(
    model: &ToyModel,
    image: &GrayImage,
    query: &str,
    m: usize,
    base_seed: u64,
    noise: f64,
) -> Result<Vec<ReasoningPath>> {
    if m == 0 {
        return Err(Error::invalid("at least one reasoning path is required"));
    }
    if query.trim().is_empty() {
        return Err(Error::invalid("query text is empty"));
    }
    let statistic = model.lesion_eccentricity(image);
    (0..m)
        .map(|i| model.path_from_statistic(statistic, i, base_seed.wrapping_add(i as u64), noise))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerturbationParams {
    pub flips: usize,
    /// 0 or 1.
    pub radius: usize,
    pub seed: u64,
}

impl PerturbationParams {
    pub fn identity() -> Self {
        Self {
            flips: 0,
            radius: 0,
            seed: 0,
        }
    }

    pub fn validate(&self, g: usize) -> Result<()> {
        if self.radius > 1 {
            return Err(Error::invalid("dilation radius must be 0 or 1"));
        }
        if self.flips > g * g {
            return Err(Error::invalid(format!(
                "flip budget {} exceeds the {} cells of the grid",
                self.flips,
                g * g
            )));
        }
        Ok(())
    }
}

/// Distribution the perturbation parameters are drawn from: a uniform flip
/// budget in `0..=flip_max` and dilation with probability `dilate_prob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationFamily {
    pub flip_max: usize,
    pub dilate_prob: f64,
}

impl Default for PerturbationFamily {
    fn default() -> Self {
        Self {
            flip_max: 4,
            dilate_prob: 0.3,
        }
    }
}

impl PerturbationFamily {
    pub fn identity() -> Self {
        Self {
            flip_max: 0,
            dilate_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dilate_prob) {
            return Err(Error::invalid("dilation probability must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Parameters of perturbation `j`. They depend only on `(base_seed, j)`,
    /// so every path shares them.
    pub fn draw(&self, base_seed: u64, j: usize, g: usize) -> PerturbationParams {
        let mut rng = seed::rng(seed::derive(base_seed, &[seed::TAG_PERTURB, j as u64]));
        let flips = rng.random_range(0..=self.flip_max).min(g * g);
        let radius = usize::from(rng.random_bool(self.dilate_prob));
        PerturbationParams {
            flips,
            radius,
            seed: rng.random(),
        }
    }
}

/// 8-neighbourhood dilation by `params.radius`, then `params.flips` distinct
/// cells toggled.
pub fn perturb(region: &RegionMask, params: &PerturbationParams) -> Result<RegionMask> {
    let g = region.grid();
    params.validate(g)?;
    let src = region.mask();
    let mut out = src.clone();
    if params.radius == 1 {
        for r in 0..g {
            for c in 0..g {
                if src.get(r, c) {
                    for rr in r.saturating_sub(1)..=(r + 1).min(g - 1) {
                        for cc in c.saturating_sub(1)..=(c + 1).min(g - 1) {
                            out.set(rr, cc, true);
                        }
                    }
                }
            }
        }
    }
    if params.flips > 0 {
        let mut rng = seed::rng(params.seed);
        let bits = out.bits_mut();
        for cell in index::sample(&mut rng, g * g, params.flips) {
            bits[cell] = !bits[cell];
        }
    }
    RegionMask::new(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub path: usize,
    pub perturbation: usize,
    pub params: PerturbationParams,
    pub mask: PredictedMask,
}

/// Candidates in `(path, perturbation)` row-major order, plus any planted
/// masks after them.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub m: usize,
    pub n: usize,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Appends a fixed mask as an extra candidate with path index `m`.
    pub fn plant(&mut self, mask: BinaryMask) {
        let perturbation = self.candidates.iter().filter(|c| c.path == self.m).count();
        self.candidates.push(Candidate {
            path: self.m,
            perturbation,
            params: PerturbationParams::identity(),
            mask: PredictedMask::from_mask(mask),
        });
    }

    /// Quality of every candidate against the reference `mode` implies.
    pub fn assess(&self, mode: &SelectionMode) -> Result<Vec<f64>> {
        let first = self
            .candidates
            .first()
            .ok_or_else(|| Error::invalid("candidate set is empty"))?;
        let pseudo;
        let reference = match mode {
            SelectionMode::Oracle(gt) => gt,
            SelectionMode::ReferenceFree => {
                pseudo = majority_mask(self, first.mask.height(), first.mask.width());
                &pseudo
            }
        };
        self.candidates
            .iter()
            .map(|c| Ok(quality(&MaskPair::new(c.mask.mask(), reference)?)))
            .collect()
    }
}

fn majority_mask(set: &CandidateSet, height: usize, width: usize) -> BinaryMask {
    let mut votes = vec![0usize; height * width];
    for c in &set.candidates {
        for (v, &b) in votes.iter_mut().zip(c.mask.mask().bits()) {
            *v += usize::from(b);
        }
    }
    let total = set.candidates.len();
    let bits = votes.into_iter().map(|v| 2 * v > total).collect();
    BinaryMask::new(height, width, bits).expect("shape taken from a candidate")
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectionMode {
    /// Score against the ground truth.
    Oracle(BinaryMask),
    /// Score against the per-pixel strict majority of all candidates.
    ReferenceFree,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub mask: PredictedMask,
    pub path: usize,
    pub perturbation: usize,
    pub score: f64,
}

/// Decodes candidate `(i, j)` as prompt `perturb(regions[i], θ_j)` against the
/// projected embedding of path `i`.
#[allow(clippy::too_many_arguments)]
pub fn generate_candidates(
    paths: &[ReasoningPath],
    n: usize,
    regions: &[RegionMask],
    feats: &VisualFeatures,
    head: &ProjectionHead,
    cfg: &DecoderConfig,
    family: &PerturbationFamily,
    base_seed: u64,
) -> Result<CandidateSet> {
    if n == 0 {
        return Err(Error::invalid("at least one perturbation per path is required"));
    }
    if paths.is_empty() {
        return Err(Error::invalid("at least one reasoning path is required"));
    }
    if regions.len() != paths.len() {
        return Err(Error::invalid(format!(
            "{} region masks for {} paths",
            regions.len(),
            paths.len()
        )));
    }
    family.validate()?;
    cfg.validate()?;
    let scores: Vec<PromptScores> = paths
        .par_iter()
        .map(|p| PixelLogits::new(feats, &project(&p.seg_raw, head)?)?.prompt_scores(cfg))
        .collect::<Result<_>>()?;
    let m = paths.len();
    let candidates = (0..m * n)
        .into_par_iter()
        .map(|cell| {
            let (i, j) = (cell / n, cell % n);
            let params = family.draw(base_seed, j, regions[i].grid());
            let prompt = perturb(&regions[i], &params)?;
            Ok(Candidate {
                path: i,
                perturbation: j,
                params,
                mask: scores[i].decode(&prompt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateSet { m, n, candidates })
}

/// Highest-quality candidate; the earliest `(path, perturbation)` wins ties.
pub fn select(set: &CandidateSet, mode: &SelectionMode) -> Result<Selection> {
    let scores = set.assess(mode)?;
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        let (c, b) = (&set.candidates[k], &set.candidates[best]);
        if s > scores[best] || (s == scores[best] && (c.path, c.perturbation) < (b.path, b.perturbation)) {
            best = k;
        }
    }
    let c = &set.candidates[best];
    Ok(Selection {
        mask: c.mask.clone(),
        path: c.path,
        perturbation: c.perturbation,
        score: scores[best],
    })
}

/// Most frequent diagnosis among the path texts. Ties go to the label voted
/// by the earliest path; `None` when no text names a label.
pub fn majority_diagnosis(paths: &[ReasoningPath], vocabulary: &[String]) -> Option<String> {
    let votes: Vec<String> = paths
        .iter()
        .filter_map(|p| extract_diagnosis(&p.text, vocabulary))
        .collect();
    let mut best: Option<(&String, usize)> = None;
    for label in &votes {
        let count = votes.iter().filter(|v| *v == label).count();
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((label, count));
        }
    }
    best.map(|(l, _)| l.clone())
}

//! Region-aware similarity to mask: token-level similarity between image
//! tokens and the segmentation embedding, softmax normalization, reshape to a
//! 2D map, block-mean pooling onto a `g x g` grid, and top-k style
//! thresholding into a binary region prompt.

use serde::{Deserialize, Serialize};

use crate::embeddings::{project, EmbeddingMatrix, ProjectionHead, SegEmbedding, SegTokenRaw};
use crate::error::{Error, Result};
use crate::raster::BinaryMask;

/// Similarity of every image token to the segmentation embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector {
    values: Vec<f64>,
    normalized: bool,
}

impl SimilarityVector {
    /// Unnormalized scores.
    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Row-major `height x width` map with zero-filled trailing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pad_count: usize,
}

impl SimilarityMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Builds a map directly from values; used for pooling arbitrary grids.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::invalid("map dimensions disagree with value count"));
        }
        Ok(Self {
            height,
            width,
            values,
            pad_count: 0,
        })
    }
}

/// Block means on a `g x g` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMatrix {
    g: usize,
    block: usize,
    values: Vec<f64>,
}

impl RegionMatrix {
    pub fn grid(&self) -> usize {
        self.g
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.values[k * self.g + l]
    }

    pub fn from_values(g: usize, values: Vec<f64>) -> Result<Self> {
        if g == 0 || values.len() != g * g {
            return Err(Error::invalid("region matrix must be g x g"));
        }
        Ok(Self {
            g,
            block: 1,
            values,
        })
    }
}

/// Binary `g x g` region prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RegionMask(BinaryMask);

impl RegionMask {
    pub fn new(mask: BinaryMask) -> Result<Self> {
        if mask.height() != mask.width() || mask.height() == 0 {
            return Err(Error::invalid("region mask must be square and nonempty"));
        }
        Ok(Self(mask))
    }

    pub fn empty(g: usize) -> Self {
        Self(BinaryMask::zeros(g, g))
    }

    pub fn grid(&self) -> usize {
        self.0.height()
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.0
    }

    pub fn into_mask(self) -> BinaryMask {
        self.0
    }

    pub fn get(&self, k: usize, l: usize) -> bool {
        self.0.get(k, l)
    }

    pub fn count_ones(&self) -> usize {
        self.0.count_ones()
    }

    pub fn to_pbm(&self) -> Vec<u8> {
        self.0.to_pbm()
    }

    /// JSON array with one '0'/'1' string per row.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.0.to_row_strings()).unwrap()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rows: Vec<String> = serde_json::from_str(text)?;
        Self::new(BinaryMask::from_row_strings(&rows)?)
    }
}

/// Thresholding rule applied to the region matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TauStrategy {
    /// The `k` largest cells.
    TopK(usize),
    /// Cells with value `>= t`.
    AbsoluteThreshold(f64),
    /// The `max(1, ceil(f * g^2))` largest cells.
    TopFraction(f64),
}

impl Default for TauStrategy {
    fn default() -> Self {
        TauStrategy::TopK(36)
    }
}

impl TauStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TauStrategy::TopK(0) => Err(Error::invalid("top-k needs k >= 1")),
            TauStrategy::AbsoluteThreshold(t) if !t.is_finite() => {
                Err(Error::invalid("threshold must be finite"))
            }
            TauStrategy::TopFraction(f) if !(f > 0.0 && f <= 1.0) => Err(Error::invalid(format!(
                "top fraction must lie in (0, 1], got {f}"
            ))),
            _ => Ok(()),
        }
    }

    /// Number of selected cells for the rank-based variants.
    pub fn resolved_k(&self, g: usize) -> Option<usize> {
        match *self {
            TauStrategy::TopK(k) => Some(k),
            TauStrategy::TopFraction(f) => Some(((f * (g * g) as f64).ceil() as usize).max(1)),
            TauStrategy::AbsoluteThreshold(_) => None,
        }
    }
}

/// Dot product of every image token with the segmentation embedding.
pub fn similarity(imgs: &EmbeddingMatrix, seg: &SegEmbedding) -> Result<SimilarityVector> {
    if imgs.dim() != seg.dim() {
        return Err(Error::invalid(format!(
            "image tokens have width {}, segmentation embedding {}",
            imgs.dim(),
            seg.dim()
        )));
    }
    let values = imgs
        .values()
        .chunks_exact(imgs.dim())
        .map(|row| row.iter().zip(seg.values()).map(|(a, b)| a * b).sum())
        .collect();
    Ok(SimilarityVector::raw(values))
}

/// Softmax with max subtraction.
pub fn normalize(sim: &SimilarityVector) -> Result<SimilarityVector> {
    if sim.normalized {
        return Err(Error::ContractViolation(
            "similarity vector is already normalized".into(),
        ));
    }
    if sim.values.is_empty() {
        return Err(Error::invalid("empty similarity vector"));
    }
    if sim.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("similarity contains NaN or infinity"));
    }
    let max = sim.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sim.values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(SimilarityVector {
        values: exps.into_iter().map(|e| e / total).collect(),
        normalized: true,
    })
}

/// `(height, width)` of the map for `n` tokens: `floor(sqrt(n))` rows and
/// `ceil(n / rows)` columns.
pub fn map_shape(n: usize) -> (usize, usize) {
    let h = n.isqrt();
    (h, n.div_ceil(h))
}

/// Row-major reshape; cells past the last token are zero.
pub fn to_map(sim: &SimilarityVector) -> Result<SimilarityMap> {
    if !sim.normalized {
        return Err(Error::ContractViolation(
            "reshape expects a softmax-normalized similarity vector".into(),
        ));
    }
    let n = sim.values.len();
    let (height, width) = map_shape(n);
    let mut values = sim.values.clone();
    values.resize(height * width, 0.0);
    Ok(SimilarityMap {
        height,
        width,
        values,
        pad_count: height * width - n,
    })
}

/// Mean of each `b x b` block, `b = floor(min(h, w) / g)`. Rows and columns
/// at index `>= b * g` never contribute.
pub fn pool_regions(map: &SimilarityMap, g: usize) -> Result<RegionMatrix> {
    if g == 0 {
        return Err(Error::invalid("grid size must be >= 1"));
    }
    let min_side = map.height.min(map.width);
    if g > min_side {
        return Err(Error::GridTooFine { g, min_side });
    }
    let b = min_side / g;
    let area = (b * b) as f64;
    let mut values = Vec::with_capacity(g * g);
    for k in 0..g {
        for l in 0..g {
            let mut acc = 0.0;
            for i in b * k..b * (k + 1) {
                for j in b * l..b * (l + 1) {
                    acc += map.get(i, j);
                }
            }
            values.push(acc / area);
        }
    }
    Ok(RegionMatrix { g, block: b, values })
}

/// Binarizes the region matrix. Rank-based strategies break ties by the
/// smallest row-major index.
pub fn apply_tau(regions: &RegionMatrix, strategy: TauStrategy) -> Result<RegionMask> {
    let g = regions.g;
    strategy.validate()?;
    let mut bits = vec![false; g * g];
    match strategy {
        TauStrategy::AbsoluteThreshold(t) => {
            for (bit, v) in bits.iter_mut().zip(&regions.values) {
                *bit = *v >= t;
            }
        }
        _ => {
            let k = strategy.resolved_k(g).unwrap().min(g * g);
            let mut order: Vec<usize> = (0..g * g).collect();
            order.sort_by(|&a, &b| {
                regions.values[b]
                    .total_cmp(&regions.values[a])
                    .then(a.cmp(&b))
            });
            for &idx in &order[..k] {
                bits[idx] = true;
            }
        }
    }
    RegionMask::new(BinaryMask::new(g, g, bits)?)
}

/// Every intermediate of one region-prompt computation.
#[derive(Debug, Clone)]
pub struct Rvls2mTrace {
    pub seg: SegEmbedding,
    pub similarity: SimilarityVector,
    pub normalized: SimilarityVector,
    pub map: SimilarityMap,
    pub regions: RegionMatrix,
    pub mask: RegionMask,
}

/// Runs the stages starting from an already projected embedding.
pub fn rvls2m_trace_from_seg(
    imgs: &EmbeddingMatrix,
    seg: SegEmbedding,
    g: usize,
    strategy: TauStrategy,
) -> Result<Rvls2mTrace> {
    let similarity = similarity(imgs, &seg)?;
    let normalized = normalize(&similarity)?;
    let map = to_map(&normalized)?;
    let regions = pool_regions(&map, g)?;
    let mask = apply_tau(&regions, strategy)?;
    Ok(Rvls2mTrace {
        seg,
        similarity,
        normalized,
        map,
        regions,
        mask,
    })
}

pub fn rvls2m_trace(
    imgs: &EmbeddingMatrix,
    raw: &SegTokenRaw,
    head: &ProjectionHead,
    g: usize,
    strategy: TauStrategy,
) -> Result<Rvls2mTrace> {
    rvls2m_trace_from_seg(imgs, project(raw, head)?, g, strategy)
}

/// Region prompt for the image tokens and raw segmentation hidden state.
pub fn rvls2m(
    imgs: &EmbeddingMatrix,
    raw: &SegTokenRaw,
    head: &ProjectionHead,
    g: usize,
    strategy: TauStrategy,
) -> Result<RegionMask> {
    Ok(rvls2m_trace(imgs, raw, head, g, strategy)?.mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(n: usize, i: usize) -> Vec<f64> {
        (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn similarity_of_basis_rows() {
        let rows: Vec<f64> = (0..4).flat_map(|i| basis(4, i)).collect();
        let imgs = EmbeddingMatrix::new(4, 4, rows).unwrap();
        let seg = SegEmbedding::new(basis(4, 0)).unwrap();
        assert_eq!(similarity(&imgs, &seg).unwrap().values(), &[1.0, 0.0, 0.0, 0.0]);
        let orth = EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let seg = SegEmbedding::new(vec![0.0, 3.0]).unwrap();
        assert_eq!(similarity(&orth, &seg).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn similarity_dimension_mismatch() {
        let imgs = EmbeddingMatrix::new(1, 3, vec![1.0; 3]).unwrap();
        let seg = SegEmbedding::new(vec![1.0; 2]).unwrap();
        assert!(matches!(similarity(&imgs, &seg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let s = normalize(&SimilarityVector::raw(vec![-3.7; 4])).unwrap();
        assert_eq!(s.values(), &[0.25; 4]);
        let s = normalize(&SimilarityVector::raw(vec![0.0, 3f64.ln()])).unwrap();
        assert!((s.values()[0] - 0.25).abs() < 1e-15);
        assert!((s.values()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite_and_double_normalization() {
        assert!(matches!(
            normalize(&SimilarityVector::raw(vec![0.0, f64::NAN])),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            normalize(&SimilarityVector::raw(vec![f64::INFINITY])),
            Err(Error::InvalidInput(_))
        ));
        let once = normalize(&SimilarityVector::raw(vec![1.0, 2.0])).unwrap();
        assert!(matches!(normalize(&once), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn map_shapes() {
        let uniform = |n: usize| normalize(&SimilarityVector::raw(vec![0.0; n])).unwrap();
        let m = to_map(&uniform(16)).unwrap();
        assert_eq!((m.height(), m.width(), m.pad_count()), (4, 4, 0));
        let m = to_map(&uniform(10)).unwrap();
        assert_eq!((m.height(), m.width(), m.pad_count()), (3, 4, 2));
        assert_eq!(&m.values()[10..], &[0.0, 0.0]);
        let m = to_map(&uniform(576)).unwrap();
        assert_eq!((m.height(), m.width()), (24, 24));
        assert!(m.values().iter().all(|&v| v == 1.0 / 576.0));
    }

    #[test]
    fn map_requires_normalized_input() {
        assert!(matches!(
            to_map(&SimilarityVector::raw(vec![1.0; 4])),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn pooling_known_blocks() {
        let map = SimilarityMap::from_values(4, 4, (1..=16).map(f64::from).collect()).unwrap();
        let r = pool_regions(&map, 2).unwrap();
        assert_eq!(r.values(), &[3.5, 5.5, 11.5, 13.5]);
        let c = SimilarityMap::from_values(6, 6, vec![0.125; 36]).unwrap();
        for g in 1..=6 {
            assert!(pool_regions(&c, g).unwrap().values().iter().all(|&v| v == 0.125));
        }
    }

    #[test]
    fn pooling_ignores_trailing_rows_and_columns() {
        let mut vals = vec![1.0; 25];
        for i in 0..5 {
            vals[4 * 5 + i] = 1e6;
            vals[i * 5 + 4] = 1e6;
        }
        let map = SimilarityMap::from_values(5, 5, vals).unwrap();
        let r = pool_regions(&map, 2).unwrap();
        assert_eq!(r.block(), 2);
        assert_eq!(r.values(), &[1.0; 4]);
    }

    #[test]
    fn pooling_grid_too_fine() {
        let map = SimilarityMap::from_values(3, 5, vec![0.0; 15]).unwrap();
        assert!(matches!(
            pool_regions(&map, 4),
            Err(Error::GridTooFine { g: 4, min_side: 3 })
        ));
    }

    #[test]
    fn tau_top_k_cases() {
        let r = RegionMatrix::from_values(4, vec![0.5; 16]).unwrap();
        let m = apply_tau(&r, TauStrategy::TopK(16)).unwrap();
        assert_eq!(m.count_ones(), 16);
        let m = apply_tau(&r, TauStrategy::TopK(3)).unwrap();
        let on: Vec<usize> = m.mask().bits().iter().enumerate().filter(|x| *x.1).map(|x| x.0).collect();
        assert_eq!(on, vec![0, 1, 2]);
        assert!(apply_tau(&r, TauStrategy::TopK(0)).is_err());
        assert_eq!(apply_tau(&r, TauStrategy::TopK(17)).unwrap().count_ones(), 16);
    }

    #[test]
    fn tau_threshold_and_fraction() {
        let r = RegionMatrix::from_values(2, vec![0.1, 0.4, 0.3, 0.2]).unwrap();
        let m = apply_tau(&r, TauStrategy::AbsoluteThreshold(0.3)).unwrap();
        assert_eq!(m.mask().bits(), &[false, true, true, false]);
        let m = apply_tau(&r, TauStrategy::TopFraction(0.3)).unwrap();
        assert_eq!(m.mask().bits(), &[false, true, true, false]);
        assert_eq!(TauStrategy::TopFraction(36.0 / 256.0).resolved_k(16), Some(36));
        assert_eq!(TauStrategy::TopFraction(36.0 / 256.0).resolved_k(4), Some(3));
        assert_eq!(TauStrategy::TopFraction(1e-9).resolved_k(4), Some(1));
        assert!(apply_tau(&r, TauStrategy::TopFraction(0.0)).is_err());
    }

    #[test]
    fn region_mask_json() {
        let r = RegionMatrix::from_values(2, vec![0.1, 0.4, 0.3, 0.2]).unwrap();
        let m = apply_tau(&r, TauStrategy::TopK(1)).unwrap();
        assert_eq!(m.to_json(), r#"["01","00"]"#);
        assert_eq!(RegionMask::from_json(&m.to_json()).unwrap(), m);
    }
}

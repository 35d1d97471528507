//! Seeded stand-ins for the vision-language model: patch-token embeddings,
//! the segmentation-token hidden state, and the two-layer projection head.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::raster::GrayImage;
use crate::seed;

/// Number of per-patch statistics fed to the patch encoder:
/// mean, variance, row centroid offset, column centroid offset.
pub const PATCH_STATS: usize = 4;

/// `rows x dim` image-token embeddings, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::invalid("embedding matrix needs at least one row and column"));
        }
        if values.len() != rows * dim {
            return Err(Error::invalid(format!(
                "embedding buffer has {} values, expected {rows}x{dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite values"));
        }
        Ok(Self { rows, dim, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Little-endian binary: `rows: u32`, `dim: u32`, then `rows*dim` f32 values.
    /// Values are narrowed to single precision.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.values.len());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::invalid("embedding header truncated"));
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload = &bytes[8..];
        if payload.len() != rows * dim * 4 {
            return Err(Error::invalid(format!(
                "embedding payload has {} bytes, expected {}",
                payload.len(),
                rows * dim * 4
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(rows, dim, values)
    }

    /// One line per token, comma separated.
    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(",")).unwrap();
        }
        String::from_utf8(out).unwrap()
    }
}

/// Raw hidden state of the segmentation token, before projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTokenRaw(Vec<f64>);

impl SegTokenRaw {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_vector(&values, "segmentation hidden state")?;
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Projected segmentation embedding living in the image-token space.
#[derive(Debug, Clone, PartialEq)]
pub struct SegEmbedding(Vec<f64>);

impl SegEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_vector(&values, "segmentation embedding")?;
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Multiplies every component by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

fn check_vector(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::invalid(format!("{what} is empty")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Statistics of one `p x p` patch, in the order consumed by [`PatchEncoder`].
pub fn patch_stats(image: &GrayImage, top: usize, left: usize, p: usize) -> [f64; PATCH_STATS] {
    let area = (p * p) as f64;
    let mut sum = 0.0;
    let mut row_moment = 0.0;
    let mut col_moment = 0.0;
    for r in 0..p {
        for c in 0..p {
            let v = image.get(top + r, left + c);
            sum += v;
            row_moment += v * (r as f64 + 0.5);
            col_moment += v * (c as f64 + 0.5);
        }
    }
    let mean = sum / area;
    let mut var = 0.0;
    for r in 0..p {
        for c in 0..p {
            let dv = image.get(top + r, left + c) - mean;
            var += dv * dv;
        }
    }
    var /= area;
    let half = p as f64 / 2.0;
    let (cy, cx) = if sum > 0.0 {
        (
            (row_moment / sum - half) / p as f64,
            (col_moment / sum - half) / p as f64,
        )
    } else {
        (0.0, 0.0)
    };
    [mean, var, cy, cx]
}

/// Fixed linear map from patch statistics to token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder {
    dim: usize,
    /// `dim x PATCH_STATS`, row-major.
    weights: Vec<f64>,
}

impl PatchEncoder {
    /// Standard-normal weights drawn from `seed`.
    pub fn seeded(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding width must be >= 1"));
        }
        let mut rng = seed::rng(seed::derive(seed, &[seed::TAG_ENCODER]));
        let weights = (0..dim * PATCH_STATS)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self { dim, weights })
    }

    pub fn from_weights(dim: usize, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || weights.len() != dim * PATCH_STATS {
            return Err(Error::invalid(format!(
                "patch encoder needs {dim}x{PATCH_STATS} weights"
            )));
        }
        check_vector(&weights, "patch encoder weights")?;
        Ok(Self { dim, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Embeds every full `p x p` patch, patches in row-major order.
    /// Trailing rows/columns that do not fill a patch are dropped.
    pub fn encode(&self, image: &GrayImage, p: usize) -> Result<EmbeddingMatrix> {
        if p == 0 {
            return Err(Error::invalid("patch size must be >= 1"));
        }
        if image.height() < p || image.width() < p {
            return Err(Error::invalid(format!(
                "{}x{} image is smaller than one {p}x{p} patch",
                image.height(),
                image.width()
            )));
        }
        let (ph, pw) = (image.height() / p, image.width() / p);
        let mut values = Vec::with_capacity(ph * pw * self.dim);
        for pr in 0..ph {
            for pc in 0..pw {
                let stats = patch_stats(image, pr * p, pc * p, p);
                for row in self.weights.chunks_exact(PATCH_STATS) {
                    values.push(row.iter().zip(&stats).map(|(w, s)| w * s).sum());
                }
            }
        }
        EmbeddingMatrix::new(ph * pw, self.dim, values)
    }
}

/// Seeded patch embedding of `image` with `p x p` patches and width `dim`.
pub fn toy_encode(image: &GrayImage, p: usize, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    PatchEncoder::seeded(dim, seed)?.encode(image, p)
}

/// Hidden state at the last position whose token equals `seg_id`.
pub fn extract_seg_token<T: PartialEq>(
    hidden_states: &[Vec<f64>],
    token_ids: &[T],
    seg_id: &T,
) -> Result<SegTokenRaw> {
    if hidden_states.len() != token_ids.len() {
        return Err(Error::invalid(format!(
            "{} hidden states for {} tokens",
            hidden_states.len(),
            token_ids.len()
        )));
    }
    let pos = token_ids
        .iter()
        .rposition(|t| t == seg_id)
        .ok_or(Error::NoSegToken)?;
    SegTokenRaw::new(hidden_states[pos].clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Layer widths of the projection head: input, hidden, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadWidths {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Default for HeadWidths {
    fn default() -> Self {
        Self {
            input: 32,
            hidden: 64,
            output: 16,
        }
    }
}

/// Two affine layers with a pointwise nonlinearity in between.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    widths: HeadWidths,
    activation: Activation,
    seed: Option<u64>,
    /// `hidden x input`
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `output x hidden`
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl ProjectionHead {
    /// Weights ~ N(0, 1/fan_in), biases ~ N(0, 0.01), all drawn from `seed`.
    pub fn seeded(widths: HeadWidths, activation: Activation, seed: u64) -> Result<Self> {
        check_widths(widths)?;
        let mut rng = seed::rng(seed::derive(seed, &[seed::TAG_HEAD]));
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect()
        };
        let w1 = draw(widths.hidden * widths.input, (widths.input as f64).sqrt().recip());
        let b1 = draw(widths.hidden, 0.1);
        let w2 = draw(widths.output * widths.hidden, (widths.hidden as f64).sqrt().recip());
        let b2 = draw(widths.output, 0.1);
        Ok(Self {
            widths,
            activation,
            seed: Some(seed),
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// Explicit weights; `w1` is `hidden x input`, `w2` is `output x hidden`, both row-major.
    pub fn from_parts(
        widths: HeadWidths,
        activation: Activation,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        check_widths(widths)?;
        if w1.len() != widths.hidden * widths.input
            || b1.len() != widths.hidden
            || w2.len() != widths.output * widths.hidden
            || b2.len() != widths.output
        {
            return Err(Error::invalid("projection head parameter shapes disagree with widths"));
        }
        for part in [&w1, &b1, &w2, &b2] {
            if part.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("projection head has non-finite parameters"));
            }
        }
        Ok(Self {
            widths,
            activation,
            seed: None,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn widths(&self) -> HeadWidths {
        self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn layer1(&self) -> (&[f64], &[f64]) {
        (&self.w1, &self.b1)
    }

    pub fn layer2(&self) -> (&[f64], &[f64]) {
        (&self.w2, &self.b2)
    }

    /// Upper bound on the Lipschitz constant of the head, using Frobenius
    /// norms as operator-norm bounds (both activations are 1-Lipschitz).
    pub fn lipschitz_bound(&self) -> f64 {
        frobenius(&self.w1) * frobenius(&self.w2)
    }
}

fn check_widths(w: HeadWidths) -> Result<()> {
    if w.input == 0 || w.hidden == 0 || w.output == 0 {
        return Err(Error::invalid("projection head widths must be >= 1"));
    }
    Ok(())
}

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn affine(weights: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    weights
        .chunks_exact(x.len())
        .zip(bias)
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect()
}

/// Applies the projection head to a raw segmentation hidden state.
pub fn project(raw: &SegTokenRaw, head: &ProjectionHead) -> Result<SegEmbedding> {
    if raw.dim() != head.widths.input {
        return Err(Error::invalid(format!(
            "hidden state has width {}, head expects {}",
            raw.dim(),
            head.widths.input
        )));
    }
    let mut hidden = affine(&head.w1, &head.b1, raw.values());
    for h in &mut hidden {
        *h = head.activation.apply(*h);
    }
    let out = affine(&head.w2, &head.b2, &hidden);
    SegEmbedding::new(out)
        .map_err(|_| Error::invalid("projection produced non-finite values"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> GrayImage {
        let mut rng = seed::rng(seed);
        GrayImage::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_image_gives_identical_rows() {
        let img = GrayImage::filled(8, 8, 0.0).unwrap();
        let m = toy_encode(&img, 4, 5, 3).unwrap();
        assert_eq!(m.rows(), 4);
        for i in 1..4 {
            assert_eq!(m.row(i), m.row(0));
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let img = random_image(12, 12, 1);
        let a = toy_encode(&img, 3, 8, 7).unwrap();
        let b = toy_encode(&img, 3, 8, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, toy_encode(&img, 3, 8, 8).unwrap());
    }

    #[test]
    fn encoding_matches_direct_pixel_loop() {
        let img = random_image(16, 16, 42);
        let (p, d, s) = (4, 6, 11);
        let enc = PatchEncoder::seeded(d, s).unwrap();
        let m = enc.encode(&img, p).unwrap();
        assert_eq!(m.rows(), 16);
        for token in 0..16 {
            let (top, left) = ((token / 4) * p, (token % 4) * p);
            let pixels: Vec<(usize, usize, f64)> = (0..p)
                .flat_map(|r| (0..p).map(move |c| (r, c)))
                .map(|(r, c)| (r, c, img.get(top + r, left + c)))
                .collect();
            let n = pixels.len() as f64;
            let mean = pixels.iter().map(|x| x.2).sum::<f64>() / n;
            let var = pixels.iter().map(|x| (x.2 - mean).powi(2)).sum::<f64>() / n;
            let mass: f64 = pixels.iter().map(|x| x.2).sum();
            let cy = pixels.iter().map(|x| x.2 * (x.0 as f64 + 0.5)).sum::<f64>() / mass;
            let cx = pixels.iter().map(|x| x.2 * (x.1 as f64 + 0.5)).sum::<f64>() / mass;
            let stats = [mean, var, (cy - 2.0) / 4.0, (cx - 2.0) / 4.0];
            for k in 0..d {
                let expect: f64 = (0..PATCH_STATS).map(|j| enc.weights()[k * PATCH_STATS + j] * stats[j]).sum();
                assert!((m.row(token)[k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_image_is_rejected() {
        let img = GrayImage::filled(3, 8, 0.5).unwrap();
        assert!(matches!(toy_encode(&img, 4, 2, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn seg_token_position_rules() {
        let states = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert_eq!(extract_seg_token(&states, &["a", "SEG", "b"], &"SEG").unwrap().values(), &[2.0]);
        assert_eq!(extract_seg_token(&states, &["SEG", "a", "SEG"], &"SEG").unwrap().values(), &[3.0]);
        assert!(matches!(
            extract_seg_token(&states[..2], &["a", "b"], &"SEG"),
            Err(Error::NoSegToken)
        ));
    }

    #[test]
    fn zero_input_through_zero_bias_relu_is_zero() {
        let w = HeadWidths { input: 3, hidden: 4, output: 2 };
        let seeded = ProjectionHead::seeded(w, Activation::Relu, 5).unwrap();
        let head = ProjectionHead::from_parts(
            w,
            Activation::Relu,
            seeded.layer1().0.to_vec(),
            vec![0.0; 4],
            seeded.layer2().0.to_vec(),
            vec![0.0; 2],
        )
        .unwrap();
        let out = project(&SegTokenRaw::new(vec![0.0; 3]).unwrap(), &head).unwrap();
        assert_eq!(out.values(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_head_is_identity_on_nonnegative_input() {
        let n = 4;
        let eye: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let w = HeadWidths { input: n, hidden: n, output: n };
        let head = ProjectionHead::from_parts(w, Activation::Relu, eye.clone(), vec![0.0; n], eye, vec![0.0; n]).unwrap();
        let x = vec![0.0, 1.5, 2.0, 0.25];
        let out = project(&SegTokenRaw::new(x.clone()).unwrap(), &head).unwrap();
        assert_eq!(out.values(), &x[..]);
    }

    #[test]
    fn projection_matches_hand_rolled_layers() {
        for (act, seed) in [(Activation::Relu, 1u64), (Activation::Tanh, 2)] {
            let head = ProjectionHead::seeded(HeadWidths::default(), act, seed).unwrap();
            let mut rng = seed::rng(seed + 100);
            let x: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
            let out = project(&SegTokenRaw::new(x.clone()).unwrap(), &head).unwrap();
            let (w1, b1) = head.layer1();
            let (w2, b2) = head.layer2();
            let mut hidden = [0.0f64; 64];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut acc = b1[j];
                for i in 0..32 {
                    acc += w1[j * 32 + i] * x[i];
                }
                *h = match act {
                    Activation::Relu => if acc > 0.0 { acc } else { 0.0 },
                    Activation::Tanh => acc.tanh(),
                };
            }
            for k in 0..16 {
                let mut acc = b2[k];
                for j in 0..64 {
                    acc += w2[k * 64 + j] * hidden[j];
                }
                assert!((out.values()[k] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded_head_is_reproducible() {
        let a = ProjectionHead::seeded(HeadWidths::default(), Activation::Relu, 9).unwrap();
        let b = ProjectionHead::seeded(HeadWidths::default(), Activation::Relu, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projection_rejects_width_mismatch() {
        let head = ProjectionHead::seeded(HeadWidths::default(), Activation::Relu, 0).unwrap();
        assert!(project(&SegTokenRaw::new(vec![1.0; 5]).unwrap(), &head).is_err());
    }

    #[test]
    fn binary_and_csv_encodings() {
        let m = EmbeddingMatrix::new(2, 3, vec![1.0, -0.5, 0.25, 2.0, 0.0, 3.5]).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(EmbeddingMatrix::from_bytes(&bytes).unwrap(), m);
        assert_eq!(m.to_csv(), "1,-0.5,0.25\n2,0,3.5\n");
        assert!(EmbeddingMatrix::from_bytes(&bytes[..10]).is_err());
    }
}

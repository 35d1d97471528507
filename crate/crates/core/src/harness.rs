//! Experiment orchestration: run configuration, end-to-end evaluation,
//! threshold and test-time-scaling sweeps, and SVG heatmaps.
//!
//! Configuration files are plain `key = value` lines; `#` starts a comment.
//! Keys match [`RunConfig::set`]. Later assignments override earlier ones, so
//! command-line overrides are applied after the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, PixelLogits, PromptScores};
use crate::embeddings::project;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, OptimizerConstants};
use crate::metrics::{EvalReport, MaskPair, Overlap, SampleOutcome};
use crate::raster::{write_file, BinaryMask};
use crate::rvls2m::{map_shape, rvls2m, RegionMatrix, SimilarityMap, TauStrategy};
use crate::seed;
use crate::synthdata::{generate, label_vocabulary, load_dataset, Sample, SceneSpec};
use crate::toy::{ToyModel, ToyModelConfig};
use crate::tts::{
    generate_candidates, majority_diagnosis, perturb, sample_paths, select, PerturbationFamily,
    SelectionMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionKind {
    Oracle,
    ReferenceFree,
}

impl std::str::FromStr for SelectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(SelectionKind::Oracle),
            "reference-free" => Ok(SelectionKind::ReferenceFree),
            other => Err(Error::Config(format!("unknown selection mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsConfig {
    pub m: usize,
    pub n: usize,
    /// Jitter scale of the reasoning paths.
    pub noise: f64,
    pub family: PerturbationFamily,
    pub selection: SelectionKind,
}

impl Default for TtsConfig {
    fn default() -> Self {
        Self {
            m: 1,
            n: 1,
            noise: 0.0,
            family: PerturbationFamily::identity(),
            selection: SelectionKind::Oracle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// A directory written by [`crate::synthdata::write_dataset`].
    Dir(PathBuf),
    Synth { spec: SceneSpec, count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub model: ToyModelConfig,
    pub grid: usize,
    pub tau: TauStrategy,
    pub decoder: DecoderConfig,
    pub loss: LossWeights,
    /// Recorded only.
    pub optimizer: OptimizerConstants,
    pub tts: TtsConfig,
    /// Adds the ground truth to every candidate set.
    pub plant_truth: bool,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synth {
                spec: SceneSpec::default(),
                count: 50,
            },
            model: ToyModelConfig::default(),
            grid: 16,
            tau: TauStrategy::default(),
            decoder: DecoderConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConstants::default(),
            tts: TtsConfig::default(),
            plant_truth: false,
            out_dir: None,
            seed: 0,
            threads: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// `topk:K`, `fraction:F` or `threshold:T`.
pub fn parse_tau(value: &str) -> Result<TauStrategy> {
    let (kind, arg) = value
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("tau: expected kind:value, got {value:?}")))?;
    match kind {
        "topk" => Ok(TauStrategy::TopK(parse("tau", arg)?)),
        "fraction" => Ok(TauStrategy::TopFraction(parse("tau", arg)?)),
        "threshold" => Ok(TauStrategy::AbsoluteThreshold(parse("tau", arg)?)),
        _ => Err(Error::Config(format!("tau: unknown strategy {kind:?}"))),
    }
}

impl RunConfig {
    fn synth_mut(&mut self) -> (&mut SceneSpec, &mut usize) {
        if !matches!(self.dataset, DatasetSource::Synth { .. }) {
            self.dataset = DatasetSource::Synth {
                spec: SceneSpec::default(),
                count: 50,
            };
        }
        match &mut self.dataset {
            DatasetSource::Synth { spec, count } => (spec, count),
            DatasetSource::Dir(_) => unreachable!(),
        }
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "dataset" => self.dataset = DatasetSource::Dir(PathBuf::from(v)),
            "synth.count" => *self.synth_mut().1 = parse(key, v)?,
            "synth.height" => self.synth_mut().0.height = parse(key, v)?,
            "synth.width" => self.synth_mut().0.width = parse(key, v)?,
            "synth.shape" => self.synth_mut().0.shape = parse(key, v)?,
            "synth.area_min" => self.synth_mut().0.area_min = parse(key, v)?,
            "synth.area_max" => self.synth_mut().0.area_max = parse(key, v)?,
            "synth.irregularity_min" => self.synth_mut().0.irregularity_min = parse(key, v)?,
            "synth.irregularity_max" => self.synth_mut().0.irregularity_max = parse(key, v)?,
            "synth.cutoff" => self.synth_mut().0.cutoff = parse(key, v)?,
            "synth.polygon_vertices" => self.synth_mut().0.polygon_vertices = parse(key, v)?,
            "synth.polygon_jitter" => self.synth_mut().0.polygon_jitter = parse(key, v)?,
            "synth.background" => self.synth_mut().0.background = parse(key, v)?,
            "synth.lesion" => self.synth_mut().0.lesion = parse(key, v)?,
            "synth.noise" => self.synth_mut().0.noise = parse(key, v)?,
            "synth.seed" => self.synth_mut().0.seed = parse(key, v)?,
            "model.hidden_dim" => self.model.hidden_dim = parse(key, v)?,
            "model.projection_hidden" => self.model.projection_hidden = parse(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "model.activation" => {
                self.model.relu = match v {
                    "relu" => true,
                    "tanh" => false,
                    _ => return Err(Error::Config(format!("{key}: expected relu or tanh"))),
                }
            }
            "model.patch" => self.model.patch = parse(key, v)?,
            "model.similarity_gain" => self.model.similarity_gain = parse(key, v)?,
            "model.feature_gain" => self.model.feature_gain = parse(key, v)?,
            "model.cross_talk" => self.model.cross_talk = parse(key, v)?,
            "model.lesion_threshold" => self.model.lesion_threshold = parse(key, v)?,
            "model.diagnosis_cutoff" => self.model.diagnosis_cutoff = parse(key, v)?,
            "model.diagnosis_noise" => self.model.diagnosis_noise = parse(key, v)?,
            "model.seed" => self.model.seed = parse(key, v)?,
            "grid" => self.grid = parse(key, v)?,
            "tau" => self.tau = parse_tau(v)?,
            "decoder.gain" => self.decoder.gain = parse(key, v)?,
            "decoder.threshold" => self.decoder.threshold = parse(key, v)?,
            "loss.txt" => self.loss.txt = parse(key, v)?,
            "loss.mask" => self.loss.mask = parse(key, v)?,
            "loss.bce" => self.loss.bce = parse(key, v)?,
            "loss.dice" => self.loss.dice = parse(key, v)?,
            "optim.learning_rate" => self.optimizer.learning_rate = parse(key, v)?,
            "optim.weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "optim.batch_size" => self.optimizer.batch_size = parse(key, v)?,
            "optim.grad_accumulation" => self.optimizer.grad_accumulation = parse(key, v)?,
            "optim.epochs" => self.optimizer.epochs = parse(key, v)?,
            "tts.m" => self.tts.m = parse(key, v)?,
            "tts.n" => self.tts.n = parse(key, v)?,
            "tts.noise" => self.tts.noise = parse(key, v)?,
            "tts.flip_max" => self.tts.family.flip_max = parse(key, v)?,
            "tts.dilate_prob" => self.tts.family.dilate_prob = parse(key, v)?,
            "tts.selection" => self.tts.selection = v.parse()?,
            "plant_truth" => self.plant_truth = parse_bool(key, v)?,
            "out" => self.out_dir = Some(PathBuf::from(v)),
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = Some(parse(key, v)?),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every assignment in `text` in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Synth { spec, count } = &self.dataset {
            spec.validate()?;
            if *count == 0 {
                return Err(Error::Config("synth.count must be >= 1".into()));
            }
        }
        if self.grid == 0 {
            return Err(Error::Config("grid must be >= 1".into()));
        }
        self.tau.validate()?;
        self.decoder.validate()?;
        self.loss.validate()?;
        self.tts.family.validate()?;
        if self.tts.m == 0 || self.tts.n == 0 {
            return Err(Error::Config("tts.m and tts.n must be >= 1".into()));
        }
        if !(self.tts.noise >= 0.0 && self.tts.noise.is_finite()) {
            return Err(Error::Config("tts.noise must be finite and >= 0".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        match &self.dataset {
            DatasetSource::Dir(dir) => load_dataset(dir),
            DatasetSource::Synth { spec, count } => generate(spec, *count),
        }
    }

    /// Runs `f` on a pool of `threads` workers, or the global pool.
    pub fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.threads {
            Some(t) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
                Ok(pool.install(f))
            }
            None => Ok(f()),
        }
    }
}

/// Checks that `g` divides the token map of an `height x width` image.
fn check_grid(model: &ToyModelConfig, height: usize, width: usize, g: usize) -> Result<()> {
    let p = model.patch;
    let (h, w) = map_shape((height / p) * (width / p));
    if g > h.min(w) {
        return Err(Error::GridTooFine {
            g,
            min_side: h.min(w),
        });
    }
    Ok(())
}

/// Result for one sample of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub outcome: SampleOutcome,
    pub mask: BinaryMask,
    pub path: usize,
    pub perturbation: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub report: EvalReport,
    pub samples: Vec<SampleResult>,
}

fn sample_seed(master: u64, index: usize) -> u64 {
    seed::derive(master, &[seed::TAG_SAMPLE, index as u64])
}

fn evaluate_sample(
    cfg: &RunConfig,
    model: &ToyModel,
    sample: &Sample,
    base_seed: u64,
    vocabulary: &[String],
) -> Result<SampleResult> {
    let paths = sample_paths(model, &sample.image, &sample.query, cfg.tts.m, base_seed, cfg.tts.noise)?;
    let tokens = model.encode(&sample.image)?;
    let regions = paths
        .iter()
        .map(|p| rvls2m(&tokens, &p.seg_raw, model.head(), cfg.grid, cfg.tau))
        .collect::<Result<Vec<_>>>()?;
    let feats = model.features(&sample.image);
    let mut set = generate_candidates(
        &paths,
        cfg.tts.n,
        &regions,
        &feats,
        model.head(),
        &cfg.decoder,
        &cfg.tts.family,
        base_seed,
    )?;
    if cfg.plant_truth {
        set.plant(sample.mask.clone());
    }
    let mode = match cfg.tts.selection {
        SelectionKind::Oracle => SelectionMode::Oracle(sample.mask.clone()),
        SelectionKind::ReferenceFree => SelectionMode::ReferenceFree,
    };
    let chosen = select(&set, &mode)?;
    let overlap = MaskPair::new(chosen.mask.mask(), &sample.mask)?.overlap();
    Ok(SampleResult {
        outcome: SampleOutcome {
            sample_id: sample.id.clone(),
            subset: sample.subset.clone(),
            overlap,
            truth: sample.label.clone(),
            predicted: majority_diagnosis(&paths, vocabulary),
        },
        mask: chosen.mask.mask().clone(),
        path: chosen.path,
        perturbation: chosen.perturbation,
        score: chosen.score,
    })
}

fn evaluate_samples(cfg: &RunConfig, samples: &[Sample]) -> Result<EvalRun> {
    cfg.validate()?;
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    check_grid(&cfg.model, first.image.height(), first.image.width(), cfg.grid)?;
    let model = ToyModel::new(cfg.model.clone())?;
    let vocabulary = label_vocabulary();
    let results = cfg.in_pool(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                evaluate_sample(cfg, &model, s, sample_seed(cfg.seed, i), &vocabulary)
                    .map_err(|e| e.in_sample(&s.id))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let outcomes: Vec<SampleOutcome> = results.iter().map(|r| r.outcome.clone()).collect();
    Ok(EvalRun {
        report: EvalReport::from_outcomes(&outcomes)?,
        samples: results,
    })
}

/// Evaluates every sample of the configured dataset and, when an output
/// directory is set, writes the report and per-sample artifacts there.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalRun> {
    let samples = cfg.load_samples()?;
    let run = evaluate_samples(cfg, &samples)?;
    if let Some(dir) = &cfg.out_dir {
        write_eval(&run, dir)?;
    }
    Ok(run)
}

pub const SAMPLES_HEADER: &str =
    "sample_id,subset,intersection,union,iou,truth,predicted,path,perturbation,score";

/// One row per sample with exact pixel counts.
pub fn samples_csv(run: &EvalRun) -> String {
    let mut out = format!("{SAMPLES_HEADER}\n");
    for r in &run.samples {
        let o = &r.outcome;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            o.sample_id,
            o.subset,
            o.overlap.intersection,
            o.overlap.union,
            o.overlap.iou(),
            o.truth,
            o.predicted.as_deref().unwrap_or(""),
            r.path,
            r.perturbation,
            r.score
        )
        .unwrap();
    }
    out
}

/// Parses [`samples_csv`] back into outcomes.
pub fn parse_samples_csv(text: &str) -> Result<Vec<SampleOutcome>> {
    let mut lines = text.lines();
    if lines.next() != Some(SAMPLES_HEADER) {
        return Err(Error::invalid("unexpected per-sample CSV header"));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::invalid(format!("malformed per-sample row {line:?}")));
            }
            Ok(SampleOutcome {
                sample_id: f[0].to_owned(),
                subset: f[1].to_owned(),
                overlap: Overlap {
                    intersection: parse("intersection", f[2])?,
                    union: parse("union", f[3])?,
                },
                truth: f[5].to_owned(),
                predicted: (!f[6].is_empty()).then(|| f[6].to_owned()),
            })
        })
        .collect()
}

pub fn write_eval(run: &EvalRun, dir: &Path) -> Result<()> {
    write_file(&dir.join("report.csv"), run.report.to_csv().as_bytes())?;
    write_file(&dir.join("report.json"), run.report.to_json().as_bytes())?;
    write_file(&dir.join("samples.csv"), samples_csv(run).as_bytes())?;
    for r in &run.samples {
        r.mask
            .write_pbm(&dir.join("masks").join(format!("{}.pbm", r.outcome.sample_id)))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Tau,
    Tts,
}

/// One setting of a sweep. Metrics lie in [0, 1]; `mean_q` is the mean
/// per-sample quality of the selected masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub g: usize,
    pub tau: TauStrategy,
    pub m: usize,
    pub n: usize,
    pub giou: f64,
    pub ciou: f64,
    pub acc: f64,
    pub mean_q: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub noise: f64,
    pub rows: Vec<SweepRow>,
}

fn tau_label(tau: &TauStrategy, g: usize) -> String {
    match *tau {
        TauStrategy::AbsoluteThreshold(t) => format!("threshold:{t}"),
        _ => format!("topk:{}", tau.resolved_k(g).expect("rank-based strategy")),
    }
}

impl SweepResult {
    pub fn row(&self, axis: &str, pred: impl Fn(&SweepRow) -> bool) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.axis == axis && pred(r))
    }

    /// Threshold sweeps: `axis,g,tau,gIoU,cIoU,Acc,mean_Q,n`, metrics in
    /// percent. Scaling sweeps: `m,n,noise,mean_Q,accuracy,trials` in [0, 1].
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self.kind {
            SweepKind::Tau => {
                out.push_str("axis,g,tau,gIoU,cIoU,Acc,mean_Q,n\n");
                for r in &self.rows {
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{},{}",
                        r.axis,
                        r.g,
                        tau_label(&r.tau, r.g),
                        r.giou * 100.0,
                        r.ciou * 100.0,
                        r.acc * 100.0,
                        r.mean_q * 100.0,
                        r.trials
                    )
                    .unwrap();
                }
            }
            SweepKind::Tts => {
                out.push_str("m,n,noise,mean_Q,accuracy,trials\n");
                for r in &self.rows {
                    writeln!(out, "{},{},{},{},{},{}", r.m, r.n, self.noise, r.mean_q, r.acc, r.trials)
                        .unwrap();
                }
            }
        }
        out
    }
}

/// Fraction of grid cells the configured strategy selects, if rank-based.
fn area_fraction(tau: &TauStrategy, g: usize) -> Option<f64> {
    match *tau {
        TauStrategy::TopK(k) => Some(k as f64 / (g * g) as f64),
        TauStrategy::TopFraction(f) => Some(f),
        TauStrategy::AbsoluteThreshold(_) => None,
    }
}

/// Evaluates `TopK(k)` at the configured grid for every `k`, then every `g`
/// with the configured selected-area fraction held fixed.
pub fn sweep_tau(cfg: &RunConfig, ks: &[usize], gs: &[usize]) -> Result<SweepResult> {
    cfg.validate()?;
    let samples = cfg.load_samples()?;
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let mut settings = Vec::new();
    for &k in ks {
        settings.push(("k", cfg.grid, TauStrategy::TopK(k)));
    }
    for &g in gs {
        let tau = match area_fraction(&cfg.tau, cfg.grid) {
            Some(f) => TauStrategy::TopFraction(f),
            None => cfg.tau,
        };
        settings.push(("g", g, tau));
    }
    for (_, g, tau) in &settings {
        if *g == 0 {
            return Err(Error::Config("grid sizes must be >= 1".into()));
        }
        tau.validate()?;
        check_grid(&cfg.model, first.image.height(), first.image.width(), *g)?;
    }
    let mut rows = Vec::with_capacity(settings.len());
    for (axis, g, tau) in settings {
        let run = evaluate_samples(
            &RunConfig {
                grid: g,
                tau,
                ..cfg.clone()
            },
            &samples,
        )?;
        let o = &run.report.overall;
        rows.push(SweepRow {
            axis: axis.to_owned(),
            g,
            tau,
            m: cfg.tts.m,
            n: cfg.tts.n,
            giou: o.giou,
            ciou: o.ciou,
            acc: o.acc,
            mean_q: o.giou,
            trials: o.n,
        });
    }
    Ok(SweepResult {
        kind: SweepKind::Tau,
        noise: cfg.tts.noise,
        rows,
    })
}

/// Selected quality, overlap and diagnosis hit of every setting for one
/// sample in one trial.
fn tts_trial(
    cfg: &RunConfig,
    model: &ToyModel,
    sample: &Sample,
    tokens: &crate::embeddings::EmbeddingMatrix,
    feats: &crate::decoder::VisualFeatures,
    base_seed: u64,
    settings: &[(usize, usize)],
    vocabulary: &[String],
) -> Result<Vec<(f64, Overlap, bool)>> {
    let m_max = settings.iter().map(|s| s.0).max().unwrap_or(1);
    let n_max = settings.iter().map(|s| s.1).max().unwrap_or(1);
    let paths = sample_paths(model, &sample.image, &sample.query, m_max, base_seed, cfg.tts.noise)?;
    let params: Vec<_> = (0..n_max)
        .map(|j| cfg.tts.family.draw(base_seed, j, cfg.grid))
        .collect();
    // cells[i][j]: decoded mask bits of candidate (i, j)
    let mut cells: Vec<Vec<BinaryMask>> = Vec::with_capacity(m_max);
    for p in &paths {
        let region = rvls2m(tokens, &p.seg_raw, model.head(), cfg.grid, cfg.tau)?;
        let scores: PromptScores =
            PixelLogits::new(feats, &project(&p.seg_raw, model.head())?)?.prompt_scores(&cfg.decoder)?;
        let row = params
            .iter()
            .map(|theta| scores.decode_bits(&perturb(&region, theta)?))
            .collect::<Result<Vec<_>>>()?;
        cells.push(row);
    }
    let truth_overlaps: Vec<Vec<Overlap>> = cells
        .iter()
        .map(|row| {
            row.iter()
                .map(|b| Ok(MaskPair::new(b, &sample.mask)?.overlap()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let planted = Overlap {
        intersection: sample.mask.count_ones() as u64,
        union: sample.mask.count_ones() as u64,
    };
    let mut out = Vec::with_capacity(settings.len());
    for &(m, n) in settings {
        let mut best: Option<(f64, Overlap)> = None;
        let reference = match cfg.tts.selection {
            SelectionKind::Oracle => None,
            SelectionKind::ReferenceFree => {
                let mut votes = vec![0usize; sample.mask.bits().len()];
                for row in &cells[..m] {
                    for b in &row[..n] {
                        for (v, &x) in votes.iter_mut().zip(b.bits()) {
                            *v += usize::from(x);
                        }
                    }
                }
                let total = m * n + usize::from(cfg.plant_truth);
                if cfg.plant_truth {
                    for (v, &x) in votes.iter_mut().zip(sample.mask.bits()) {
                        *v += usize::from(x);
                    }
                }
                let bits = votes.into_iter().map(|v| 2 * v > total).collect();
                Some(BinaryMask::new(sample.mask.height(), sample.mask.width(), bits)?)
            }
        };
        let mut consider = |bits: &BinaryMask, truth: Overlap| -> Result<()> {
            let score = match &reference {
                None => truth.iou(),
                Some(r) => MaskPair::new(bits, r)?.overlap().iou(),
            };
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, truth));
            }
            Ok(())
        };
        for i in 0..m {
            for j in 0..n {
                consider(&cells[i][j], truth_overlaps[i][j])?;
            }
        }
        if cfg.plant_truth {
            consider(&sample.mask, planted)?;
        }
        let (_, overlap) = best.expect("at least one candidate");
        let hit = majority_diagnosis(&paths[..m], vocabulary).as_deref() == Some(sample.label.as_str());
        out.push((overlap.iou(), overlap, hit));
    }
    Ok(out)
}

/// Mean selected quality and majority-vote accuracy for every `(m, n)` in
/// `ms x ns`, over `trials` seeded repetitions of the dataset.
pub fn sweep_tts(cfg: &RunConfig, ms: &[usize], ns: &[usize], trials: usize) -> Result<SweepResult> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    if ms.is_empty() || ns.is_empty() || ms.contains(&0) || ns.contains(&0) {
        return Err(Error::Config("m and n values must be nonempty and >= 1".into()));
    }
    let samples = cfg.load_samples()?;
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    check_grid(&cfg.model, first.image.height(), first.image.width(), cfg.grid)?;
    let model = ToyModel::new(cfg.model.clone())?;
    let vocabulary = label_vocabulary();
    let settings: Vec<(usize, usize)> = ms
        .iter()
        .flat_map(|&m| ns.iter().map(move |&n| (m, n)))
        .collect();
    let per_sample = cfg.in_pool(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(s, sample)| {
                let tokens = model.encode(&sample.image)?;
                let feats = model.features(&sample.image);
                (0..trials)
                    .map(|t| {
                        let base = seed::derive(cfg.seed, &[seed::TAG_TRIAL, t as u64, s as u64]);
                        tts_trial(cfg, &model, sample, &tokens, &feats, base, &settings, &vocabulary)
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| e.in_sample(&sample.id))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let count = (samples.len() * trials) as f64;
    let rows = settings
        .iter()
        .enumerate()
        .map(|(k, &(m, n))| {
            let (mut q, mut hits, mut inter, mut union) = (0.0, 0usize, 0u64, 0u64);
            for trial in per_sample.iter().flatten() {
                let (qi, o, hit) = trial[k];
                q += qi;
                hits += usize::from(hit);
                inter += o.intersection;
                union += o.union;
            }
            SweepRow {
                axis: "mn".to_owned(),
                g: cfg.grid,
                tau: cfg.tau,
                m,
                n,
                giou: q / count,
                ciou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
                acc: hits as f64 / count,
                mean_q: q / count,
                trials,
            }
        })
        .collect();
    Ok(SweepResult {
        kind: SweepKind::Tts,
        noise: cfg.tts.noise,
        rows,
    })
}

/// Anything drawable as a grid of cells.
pub trait HeatmapGrid {
    fn shape(&self) -> (usize, usize);
    fn cells(&self) -> &[f64];
}

impl HeatmapGrid for SimilarityMap {
    fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    fn cells(&self) -> &[f64] {
        self.values()
    }
}

impl HeatmapGrid for RegionMatrix {
    fn shape(&self) -> (usize, usize) {
        (self.grid(), self.grid())
    }

    fn cells(&self) -> &[f64] {
        self.values()
    }
}

const HEATMAP_CELL: usize = 8;

/// SVG with one square per cell, grey level linear between the grid's min
/// (black) and max (white). A constant grid is mid-grey.
pub fn heatmap_svg(grid: &impl HeatmapGrid) -> String {
    let (h, w) = grid.shape();
    let values = grid.cells();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" shape-rendering=\"crispEdges\">\n",
        w * HEATMAP_CELL,
        h * HEATMAP_CELL
    );
    for r in 0..h {
        for c in 0..w {
            let v = values[r * w + c];
            let level = if max > min {
                (255.0 * (v - min) / (max - min)).round() as u8
            } else {
                128
            };
            writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{HEATMAP_CELL}\" height=\"{HEATMAP_CELL}\" fill=\"rgb({level},{level},{level})\"/>",
                c * HEATMAP_CELL,
                r * HEATMAP_CELL
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    out
}

pub fn emit_heatmap(grid: &impl HeatmapGrid, path: &Path) -> Result<()> {
    write_file(path, heatmap_svg(grid).as_bytes())
}

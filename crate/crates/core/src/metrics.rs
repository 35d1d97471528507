//! Overlap metrics, diagnosis extraction and accuracy, and evaluation reports.
//!
//! gIoU is the mean of per-image IoU; cIoU is cumulative intersection over
//! cumulative union. An empty-vs-empty pair scores IoU 1.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BinaryMask;

/// Pixel counts of one prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaskPair<'a> {
    pub pred: &'a BinaryMask,
    pub gt: &'a BinaryMask,
}

impl<'a> MaskPair<'a> {
    pub fn new(pred: &'a BinaryMask, gt: &'a BinaryMask) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::invalid(format!(
                "prediction is {:?}, ground truth {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        Ok(Self { pred, gt })
    }

    pub fn overlap(&self) -> Overlap {
        let mut intersection = 0;
        let mut union = 0;
        for (&p, &g) in self.pred.bits().iter().zip(self.gt.bits()) {
            intersection += (p && g) as u64;
            union += (p || g) as u64;
        }
        Overlap {
            intersection,
            union,
        }
    }
}

pub fn iou(pair: &MaskPair) -> f64 {
    pair.overlap().iou()
}

fn nonempty(pairs: &[MaskPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::invalid("metric over an empty dataset"));
    }
    Ok(())
}

pub fn giou_dataset(pairs: &[MaskPair]) -> Result<f64> {
    nonempty(pairs)?;
    let overlaps: Vec<Overlap> = pairs.iter().map(MaskPair::overlap).collect();
    Ok(giou_from_overlaps(&overlaps))
}

pub fn ciou_dataset(pairs: &[MaskPair]) -> Result<f64> {
    nonempty(pairs)?;
    let overlaps: Vec<Overlap> = pairs.iter().map(MaskPair::overlap).collect();
    Ok(ciou_from_overlaps(&overlaps))
}

pub fn giou_from_overlaps(overlaps: &[Overlap]) -> f64 {
    overlaps.iter().map(Overlap::iou).sum::<f64>() / overlaps.len() as f64
}

pub fn ciou_from_overlaps(overlaps: &[Overlap]) -> f64 {
    let inter: u64 = overlaps.iter().map(|o| o.intersection).sum();
    let union: u64 = overlaps.iter().map(|o| o.union).sum();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Candidate quality: mean of gIoU and cIoU of the single pair.
pub fn quality(pair: &MaskPair) -> f64 {
    let overlap = [pair.overlap()];
    (giou_from_overlaps(&overlap) + ciou_from_overlaps(&overlap)) / 2.0
}

/// Marker separating the segmentation answer from the diagnosis.
pub const SEG_MARKER: &str = "[SEG]";

/// Vocabulary label occurring earliest (case-insensitively) after the first
/// `[SEG]` marker; the whole text is searched when the marker is absent.
/// At equal positions the longer label wins.
pub fn extract_diagnosis(text: &str, vocabulary: &[String]) -> Option<String> {
    let lower = text.to_lowercase();
    let start = lower
        .find(&SEG_MARKER.to_lowercase())
        .map_or(0, |i| i + SEG_MARKER.len());
    let tail = &lower[start..];
    vocabulary
        .iter()
        .filter(|label| !label.is_empty())
        .filter_map(|label| tail.find(&label.to_lowercase()).map(|pos| (pos, label)))
        .min_by(|a, b| a.0.cmp(&b.0).then(b.1.len().cmp(&a.1.len())))
        .map(|(_, label)| label.clone())
}

/// Fraction of positions where the prediction equals the truth.
pub fn accuracy(predictions: &[Option<String>], truths: &[String]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::invalid("accuracy over an empty list"));
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p.as_deref() == Some(t.as_str()))
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Per-sample outcome that every report aggregate is computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub subset: String,
    pub overlap: Overlap,
    pub truth: String,
    pub predicted: Option<String>,
}

impl SampleOutcome {
    pub fn correct(&self) -> bool {
        self.predicted.as_deref() == Some(self.truth.as_str())
    }
}

/// Aggregates for one subset (or the whole set). Values lie in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub subset: String,
    pub giou: f64,
    pub ciou: f64,
    pub acc: f64,
    pub n: usize,
}

impl SubsetScore {
    pub fn from_outcomes(subset: &str, outcomes: &[&SampleOutcome]) -> Self {
        let overlaps: Vec<Overlap> = outcomes.iter().map(|o| o.overlap).collect();
        let hits = outcomes.iter().filter(|o| o.correct()).count();
        Self {
            subset: subset.to_owned(),
            giou: giou_from_overlaps(&overlaps),
            ciou: ciou_from_overlaps(&overlaps),
            acc: hits as f64 / outcomes.len() as f64,
            n: outcomes.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subsets: Vec<SubsetScore>,
    pub overall: SubsetScore,
}

impl EvalReport {
    /// Subsets are listed in lexicographic order.
    pub fn from_outcomes(outcomes: &[SampleOutcome]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::invalid("report over an empty dataset"));
        }
        let mut groups: BTreeMap<&str, Vec<&SampleOutcome>> = BTreeMap::new();
        for o in outcomes {
            groups.entry(o.subset.as_str()).or_default().push(o);
        }
        let subsets = groups
            .iter()
            .map(|(name, members)| SubsetScore::from_outcomes(name, members))
            .collect();
        let all: Vec<&SampleOutcome> = outcomes.iter().collect();
        Ok(Self {
            subsets,
            overall: SubsetScore::from_outcomes("overall", &all),
        })
    }

    /// `subset,gIoU,cIoU,Acc,n` with metrics in percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,gIoU,cIoU,Acc,n\n");
        for row in self.subsets.iter().chain(std::iter::once(&self.overall)) {
            writeln!(
                out,
                "{},{},{},{},{}",
                row.subset,
                row.giou * 100.0,
                row.ciou * 100.0,
                row.acc * 100.0,
                row.n
            )
            .unwrap();
        }
        out
    }

    /// Per-subset columns plus an overall block, metrics in percent.
    pub fn to_json(&self) -> String {
        let row = |s: &SubsetScore| {
            serde_json::json!({
                "gIoU": s.giou * 100.0,
                "cIoU": s.ciou * 100.0,
                "Acc": s.acc * 100.0,
                "n": s.n,
            })
        };
        let subsets: serde_json::Map<String, serde_json::Value> = self
            .subsets
            .iter()
            .map(|s| (s.subset.clone(), row(s)))
            .collect();
        let doc = serde_json::json!({
            "subsets": subsets,
            "overall": row(&self.overall),
        });
        serde_json::to_string_pretty(&doc).unwrap() + "\n"
    }
}

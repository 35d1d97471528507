//! Chain-of-thought data generation: a medical assistant writes a diagnostic
//! reasoning chain, a critic reviews it, and rejections are fed back for a
//! bounded number of rounds before the sample goes to human review.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "X-Ray")]
    XRay,
    Dermoscopy,
    Endoscopy,
    Ultrasound,
    #[serde(rename = "Fundus Photography")]
    FundusPhotography,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::XRay,
        Modality::Dermoscopy,
        Modality::Endoscopy,
        Modality::Ultrasound,
        Modality::FundusPhotography,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::XRay => "X-Ray",
            Modality::Dermoscopy => "Dermoscopy",
            Modality::Endoscopy => "Endoscopy",
            Modality::Ultrasound => "Ultrasound",
            Modality::FundusPhotography => "Fundus Photography",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown modality {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleInput {
    pub image_id: String,
    pub question: String,
    pub modality: Modality,
    pub diagnosis: String,
}

impl SampleInput {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("image_id", &self.image_id),
            ("question", &self.question),
            ("diagnosis", &self.diagnosis),
        ] {
            if v.trim().is_empty() {
                return Err(Error::invalid(format!("sample field {name} is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailureClass {
    #[serde(rename = "Missing Step")]
    MissingStep,
    #[serde(rename = "Logical Flaw")]
    LogicalFlaw,
    #[serde(rename = "Factual Error")]
    FactualError,
    #[serde(rename = "Non-standard Terminology")]
    NonstandardTerminology,
}

impl FailureClass {
    pub const ALL: [FailureClass; 4] = [
        FailureClass::MissingStep,
        FailureClass::LogicalFlaw,
        FailureClass::FactualError,
        FailureClass::NonstandardTerminology,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FailureClass::MissingStep => "Missing Step",
            FailureClass::LogicalFlaw => "Logical Flaw",
            FailureClass::FactualError => "Factual Error",
            FailureClass::NonstandardTerminology => "Non-standard Terminology",
        }
    }
}

impl fmt::Display for FailureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Pass,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub decision: Decision,
    /// Set exactly when rejected.
    pub failure: Option<FailureClass>,
    pub raw: String,
}

const GENERATION_TEMPLATE: &str = "Question: {question}

Query: You're a medical assistant. Please generate Chain-of-Thought answer in the following format by thinking step by step...

Firstly, the modality of the image is {modality}

Secondly, I will start to analyze the image ...

Then, ...

...

Finally, {answer}";

const REVIEW_TEMPLATE: &str = "Input: {CoT}

As a rigorous critical assistant, evaluate whether the diagnostic Chain-of-Thought generated by the Medical Assistant is valid.  Assess strictly against these criteria:

Review Dimensions:

1. **Step Completeness**

- Explicitly identifies imaging modality.

- Progressively analyzes key image features.

- Derives final diagnosis through medical reasoning.

2. **Logical Rigor**

- No contradictions/jumps in reasoning.

- Image features substantiate the diagnosis.

- Rules out differential diagnoses (when applicable).

3. **Medical Reliability**

- Terminology conforms to medical standards.

- Diagnosis aligns with current medical consensus.

- No unverifiable/fabricated medical claims.

Output Specifications:

1. **APPROVED** (if all pass):

- Please output [pass]

2. **REJECTED** (if any failure):

- Please output [reject]

Classify failure type:

`Missing Step` | `Logical Flaw` | `Factual Error` | `Non-standard Terminology`

Final decision: [pass]/[reject]";

pub const CORRECTION_HEADER: &str = "Correction:";

pub fn build_generation_prompt(sample: &SampleInput, feedback: Option<FailureClass>) -> String {
    let mut prompt = GENERATION_TEMPLATE
        .replace("{question}", &sample.question)
        .replace("{modality}", sample.modality.name())
        .replace("{answer}", &sample.diagnosis);
    if let Some(class) = feedback {
        prompt.push_str(&format!(
            "\n\n{CORRECTION_HEADER} the previous answer was rejected by the reviewer as `{class}`. \
             Write a new answer in the same format that fixes this problem."
        ));
    }
    prompt
}

pub fn build_review_prompt(cot: &str) -> String {
    REVIEW_TEMPLATE.replace("{CoT}", cot)
}

const DECISION_MARKER: &str = "final decision:";

/// Reads the decision following the last `Final decision:` marker. A bare
/// echo of the `[pass]/[reject]` placeholder is not a decision.
pub fn parse_verdict(text: &str) -> Result<ReviewVerdict> {
    let lower = text.to_lowercase();
    let at = lower.rfind(DECISION_MARKER).ok_or(Error::UnparseableVerdict)?;
    let rest = lower[at + DECISION_MARKER.len()..].trim_start_matches(|c: char| c.is_whitespace() || c == '*');
    let (decision, tail) = if let Some(t) = rest.strip_prefix("[pass]") {
        (Decision::Pass, t)
    } else if let Some(t) = rest.strip_prefix("[reject]") {
        (Decision::Reject, t)
    } else {
        return Err(Error::UnparseableVerdict);
    };
    if tail.trim_start().starts_with('/') {
        return Err(Error::UnparseableVerdict);
    }
    let failure = match decision {
        Decision::Pass => None,
        Decision::Reject => Some(
            FailureClass::ALL
                .into_iter()
                .filter_map(|c| lower.find(&c.name().to_lowercase()).map(|p| (p, c)))
                .min_by_key(|(p, _)| *p)
                .map_or(FailureClass::LogicalFlaw, |(_, c)| c),
        ),
    };
    Ok(ReviewVerdict {
        decision,
        failure,
        raw: text.to_owned(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Medical,
    Critic,
}

/// Request document sent to an assistant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssistantRequest {
    pub role: Role,
    pub prompt: String,
    pub sample_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssistantReply {
    pub text: String,
}

/// Something that answers prompts. Errors are transport failures.
pub trait Assistant {
    fn respond(&mut self, request: &AssistantRequest) -> std::result::Result<String, String>;
}

/// Canned replies consumed in order; every request is kept for inspection.
#[derive(Debug, Clone, Default)]
pub struct MockAssistant {
    script: VecDeque<String>,
    requests: Vec<AssistantRequest>,
}

impl MockAssistant {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self {
            script: replies.into_iter().map(Into::into).collect(),
            requests: Vec::new(),
        }
    }

    /// One `{"text": ...}` document per non-blank line.
    pub fn from_ndjson(text: &str) -> Result<Self> {
        let replies = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str::<AssistantReply>(l)?.text))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(replies))
    }

    pub fn requests(&self) -> &[AssistantRequest] {
        &self.requests
    }

    pub fn remaining(&self) -> usize {
        self.script.len()
    }
}

impl Assistant for MockAssistant {
    fn respond(&mut self, request: &AssistantRequest) -> std::result::Result<String, String> {
        self.requests.push(request.clone());
        self.script
            .pop_front()
            .ok_or_else(|| "mock script exhausted".to_owned())
    }
}

/// JSON-over-HTTP assistant: `POST url` with an [`AssistantRequest`] body,
/// expecting an [`AssistantReply`].
#[derive(Debug, Clone)]
pub struct HttpAssistant {
    url: String,
    retries: usize,
    agent: ureq::Agent,
}

impl HttpAssistant {
    pub fn new(url: impl Into<String>, timeout: Duration, retries: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            retries,
            agent,
        }
    }

    fn attempt(&self, request: &AssistantRequest) -> std::result::Result<String, String> {
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| e.to_string())?;
        let reply: AssistantReply = response.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(reply.text)
    }
}

impl Assistant for HttpAssistant {
    fn respond(&mut self, request: &AssistantRequest) -> std::result::Result<String, String> {
        let mut last = String::new();
        for _ in 0..=self.retries {
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(e) => last = e,
            }
        }
        Err(format!("{} attempts failed, last: {last}", self.retries + 1))
    }
}

/// Source of record timestamps, in milliseconds since the Unix epoch.
pub trait Clock {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RoundOutcome {
    Reviewed { verdict: ReviewVerdict },
    Unparseable { raw: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Approved,
    HumanReview,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTRecord {
    pub sample_id: String,
    pub modality: Modality,
    pub diagnosis: String,
    /// Reasoning chain of the last round.
    pub cot: String,
    pub status: RecordStatus,
    pub rounds: usize,
    pub history: Vec<RoundOutcome>,
    pub started_ms: u64,
    pub finished_ms: u64,
}

pub const DEFAULT_MAX_ROUNDS: usize = 3;

/// Generate, review, and retry with the rejection class as feedback, for at
/// most `max_rounds` rounds.
pub fn run_pipeline(
    sample: &SampleInput,
    medical: &mut dyn Assistant,
    critic: &mut dyn Assistant,
    max_rounds: usize,
    clock: &dyn Clock,
) -> Result<CoTRecord> {
    sample.validate()?;
    if max_rounds == 0 {
        return Err(Error::invalid("at least one review round is required"));
    }
    let io = |message: String| Error::PipelineIo {
        sample_id: sample.image_id.clone(),
        message,
    };
    let started_ms = clock.now_ms();
    let mut history = Vec::new();
    let mut feedback = None;
    let mut cot = String::new();
    let mut status = RecordStatus::HumanReview;
    while history.len() < max_rounds {
        cot = medical
            .respond(&AssistantRequest {
                role: Role::Medical,
                prompt: build_generation_prompt(sample, feedback),
                sample_id: sample.image_id.clone(),
            })
            .map_err(io)?;
        let review = critic
            .respond(&AssistantRequest {
                role: Role::Critic,
                prompt: build_review_prompt(&cot),
                sample_id: sample.image_id.clone(),
            })
            .map_err(io)?;
        match parse_verdict(&review) {
            Ok(verdict) => {
                let decision = verdict.decision;
                feedback = verdict.failure;
                history.push(RoundOutcome::Reviewed { verdict });
                if decision == Decision::Pass {
                    status = RecordStatus::Approved;
                    break;
                }
            }
            Err(_) => {
                history.push(RoundOutcome::Unparseable { raw: review });
                break;
            }
        }
    }
    Ok(CoTRecord {
        sample_id: sample.image_id.clone(),
        modality: sample.modality,
        diagnosis: sample.diagnosis.clone(),
        cot,
        status,
        rounds: history.len(),
        history,
        started_ms,
        finished_ms: clock.now_ms(),
    })
}

/// Appends `record` as one JSON line.
pub fn append_record(path: &Path, record: &CoTRecord) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(file, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

pub fn read_ndjson<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub const RECORDS_FILE: &str = "records.ndjson";
pub const HUMAN_REVIEW_FILE: &str = "human_review.ndjson";

/// Runs every sample in order, appending each record to `records.ndjson`
/// and the ones needing review also to `human_review.ndjson` under `dir`.
pub fn run_batch(
    samples: &[SampleInput],
    medical: &mut dyn Assistant,
    critic: &mut dyn Assistant,
    max_rounds: usize,
    clock: &dyn Clock,
    dir: &Path,
) -> Result<Vec<CoTRecord>> {
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rec = run_pipeline(s, medical, critic, max_rounds, clock)?;
        append_record(&dir.join(RECORDS_FILE), &rec)?;
        if rec.status == RecordStatus::HumanReview {
            append_record(&dir.join(HUMAN_REVIEW_FILE), &rec)?;
        }
        records.push(rec);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::invalid("split ratios must be finite and >= 0"));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub modalities: BTreeMap<Modality, SplitCounts>,
}

/// Seeded shuffle of the approved records (taken in id order), then
/// contiguous train/val/test slices with cumulatively rounded boundaries.
pub fn package_dataset(records: &[CoTRecord], ratios: SplitRatios, seed_value: u64) -> Result<SplitManifest> {
    ratios.validate()?;
    let mut approved: Vec<&CoTRecord> = records
        .iter()
        .filter(|r| r.status == RecordStatus::Approved)
        .collect();
    if approved.is_empty() {
        return Err(Error::EmptyDataset);
    }
    approved.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    approved.shuffle(&mut seed::rng(seed_value));
    let n = approved.len() as f64;
    let b1 = ((n * ratios.train).round() as usize).min(approved.len());
    let b2 = ((n * (ratios.train + ratios.val)).round() as usize).clamp(b1, approved.len());
    let ids = |rs: &[&CoTRecord]| rs.iter().map(|r| r.sample_id.clone()).collect::<Vec<_>>();
    let mut modalities: BTreeMap<Modality, SplitCounts> = BTreeMap::new();
    for (k, r) in approved.iter().enumerate() {
        let c = modalities.entry(r.modality).or_default();
        match k {
            k if k < b1 => c.train += 1,
            k if k < b2 => c.val += 1,
            _ => c.test += 1,
        }
        c.total += 1;
    }
    Ok(SplitManifest {
        seed: seed_value,
        ratios,
        train: ids(&approved[..b1]),
        val: ids(&approved[b1..b2]),
        test: ids(&approved[b2..]),
        modalities,
    })
}

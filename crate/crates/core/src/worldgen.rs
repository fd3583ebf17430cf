//! Synthetic corpus generation and simulated model behaviour.
//!
//! Every sampler is a pure function of identifiers and a seed: each draw
//! seeds its own ChaCha stream from a hash of `(seed, document, page, op)`,
//! so outcomes do not depend on call order or scheduling.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::domain::{ConfidenceModelKind, ConfigError, Document, DocumentId, PipelineConfig};
use crate::hash::KeyHasher;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("stitched text is empty")]
    EmptyInput,
    #[error("page {0} is not a cover page")]
    NotACoverPage(u32),
    #[error("malformed page payload: {0}")]
    BadPayload(String),
}

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

/// Linear token model for the parse backend, anchored at one document size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenModel {
    pub anchor_words: f64,
    pub anchor_input_tokens: f64,
    pub anchor_output_tokens: f64,
    /// Dollars per input token.
    pub input_price: f64,
    /// Dollars per output token.
    pub output_price: f64,
}

impl TokenModel {
    pub fn tokens(&self, words: usize) -> (u64, u64) {
        let r = words as f64 / self.anchor_words;
        ((self.anchor_input_tokens * r).round() as u64, (self.anchor_output_tokens * r).round() as u64)
    }

    pub fn cost(&self, input: u64, output: u64) -> f64 {
        input as f64 * self.input_price + output as f64 * self.output_price
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    /// Uniform service-time range in model seconds.
    pub latency: (f64, f64),
    pub accuracy: f64,
    /// Dollars per call (token-priced backends leave this at zero).
    pub unit_cost: f64,
    pub tokens: Option<TokenModel>,
}

impl BackendProfile {
    fn new(name: &str, latency: (f64, f64), accuracy: f64, unit_cost: f64) -> Self {
        BackendProfile { name: name.to_owned(), latency, accuracy, unit_cost, tokens: None }
    }

    pub fn mean_latency(&self) -> f64 {
        (self.latency.0 + self.latency.1) / 2.0
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let key = |k: &str| format!("calibration.{}.{k}", self.name);
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(ConfigError::invalid(key("accuracy"), "must lie in [0, 1]"));
        }
        if !(self.latency.0 > 0.0 && self.latency.1 >= self.latency.0) {
            return Err(ConfigError::invalid(key("latency"), "must be a positive range"));
        }
        if self.unit_cost < 0.0 {
            return Err(ConfigError::invalid(key("unit_cost"), "must be non-negative"));
        }
        Ok(())
    }
}

/// Clip confidence generator. Pages are hard with probability `p_hard`;
/// the classifier's accuracy and confidence depend only on difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceModel {
    pub kind: ConfidenceModelKind,
    pub p_hard: f64,
    pub easy_accuracy: f64,
    pub hard_accuracy: f64,
    /// Two-point model: easy confidences are uniform on this range (above threshold).
    pub easy_range: (f64, f64),
    /// Two-point model: hard confidences are uniform on this range (below threshold).
    pub hard_range: (f64, f64),
}

impl ConfidenceModel {
    /// Clip accuracy implied by the mixture.
    pub fn clip_accuracy(&self) -> f64 {
        (1.0 - self.p_hard) * self.easy_accuracy + self.p_hard * self.hard_accuracy
    }

    /// Accuracy when hard pages are re-classified by a model of accuracy `a_vlm`.
    pub fn hybrid_accuracy(&self, a_vlm: f64) -> f64 {
        (1.0 - self.p_hard) * self.easy_accuracy + self.p_hard * a_vlm
    }

    /// Probability that clip confidence is at or below `threshold`.
    pub fn fallback_probability(&self, threshold: f64) -> f64 {
        let (easy, hard) = match self.kind {
            ConfidenceModelKind::TwoPoint => (uniform_cdf(threshold, self.easy_range), uniform_cdf(threshold, self.hard_range)),
            ConfidenceModelKind::BetaMixture => {
                (beta_cdf((threshold - 0.7) / 0.3, 4.0, 1.5), beta_cdf(threshold / 0.7, 4.0, 2.0))
            }
        };
        (1.0 - self.p_hard) * easy + self.p_hard * hard
    }
}

fn uniform_cdf(x: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        return if x >= lo { 1.0 } else { 0.0 };
    }
    ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Regularized incomplete beta by midpoint integration; plenty for a, b >= 1.
fn beta_cdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    const N: usize = 20_000;
    let pdf = |t: f64| t.powf(a - 1.0) * (1.0 - t).powf(b - 1.0);
    let h = 1.0 / N as f64;
    let (mut below, mut total) = (0.0, 0.0);
    for i in 0..N {
        let t = (i as f64 + 0.5) * h;
        let v = pdf(t);
        total += v;
        if t < x {
            below += v;
        }
    }
    below / total
}

/// The default backend calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub clip: BackendProfile,
    pub vlm_classify: BackendProfile,
    pub ocr: BackendProfile,
    pub detector: BackendProfile,
    pub vlm_detect: BackendProfile,
    pub parse: BackendProfile,
    pub confidence: ConfidenceModel,
    pub words_per_page: (u32, u32),
    pub ocr_word_confidence: (f64, f64),
}

// p_hard fixes the fallback mass. Hybrid accuracy cannot exceed
// (clip accuracy) + p_hard * a_vlm = 0.9592 when hard pages are never right,
// so the easy accuracy is balanced between the 0.92 and 0.96 targets:
// a_easy = 0.9204 / 0.96, giving clip 0.9204 and hybrid 0.9596.
const P_HARD: f64 = 0.04;
const A_HARD: f64 = 0.0;
const A_EASY: f64 = 0.9204 / 0.96;

/// Words in the anchor document: 8 pages of 120 words on average.
const ANCHOR_WORDS: f64 = 960.0;
const INPUT_PRICE: f64 = 0.03 / 6500.0;

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            clip: BackendProfile::new("clip", (0.5, 1.0), 0.92, 0.0),
            vlm_classify: BackendProfile::new("vlm_classify", (2.0, 3.0), 0.98, 0.01),
            ocr: BackendProfile::new("ocr", (1.0, 2.0), 1.0, 0.0),
            detector: BackendProfile::new("detector", (0.2, 0.4), 0.95, 0.0),
            vlm_detect: BackendProfile::new("vlm_detect", (2.0, 3.0), 0.97, 0.01),
            parse: BackendProfile {
                tokens: Some(TokenModel {
                    anchor_words: ANCHOR_WORDS,
                    anchor_input_tokens: 4500.0,
                    anchor_output_tokens: 400.0,
                    input_price: INPUT_PRICE,
                    output_price: 5.0 * INPUT_PRICE,
                }),
                ..BackendProfile::new("parse", (2.5, 3.5), 0.97, 0.0)
            },
            confidence: ConfidenceModel {
                kind: ConfidenceModelKind::TwoPoint,
                p_hard: P_HARD,
                easy_accuracy: A_EASY,
                hard_accuracy: A_HARD,
                easy_range: (0.75, 0.99),
                hard_range: (0.30, 0.65),
            },
            words_per_page: (100, 140),
            ocr_word_confidence: (0.85, 0.999),
        }
    }
}

impl Calibration {
    pub fn for_config(config: &PipelineConfig) -> Self {
        let mut c = Calibration::default();
        c.confidence.kind = config.inference.confidence_model;
        c
    }

    pub fn profile(&self, op: &str) -> Option<&BackendProfile> {
        match op {
            "clip" | "classify_clip" => Some(&self.clip),
            "vlm_classify" | "classify_vlm" => Some(&self.vlm_classify),
            "ocr" => Some(&self.ocr),
            "detector" => Some(&self.detector),
            "vlm_detect" => Some(&self.vlm_detect),
            "parse" => Some(&self.parse),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for p in [&self.clip, &self.vlm_classify, &self.ocr, &self.detector, &self.vlm_detect, &self.parse] {
            p.validate()?;
        }
        let c = &self.confidence;
        if !(0.0..=1.0).contains(&c.p_hard) {
            return Err(ConfigError::invalid("calibration.confidence.p_hard", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Expected classification dollars per page under confidence-gated routing.
    pub fn expected_hybrid_cost(&self, threshold: f64) -> f64 {
        self.clip.unit_cost + self.confidence.fallback_probability(threshold) * self.vlm_classify.unit_cost
    }

    /// GPU-class model seconds an average document of `pages` pages consumes.
    pub fn mean_gpu_seconds(&self, pages: f64) -> f64 {
        pages * (self.clip.mean_latency() + self.ocr.mean_latency())
    }
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverMetadata {
    pub date_stamp: String,
    pub barcode: String,
    pub signature: bool,
}

/// A page with its ground truth. Serialized as the page blob itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPage {
    pub document_id: DocumentId,
    pub page_index: u32,
    pub true_label: String,
    pub difficulty: Difficulty,
    pub cover: bool,
    pub true_text: Vec<String>,
    pub true_fields: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<CoverMetadata>,
    /// Size of the scanned image this page stands in for.
    pub nominal_bytes: u64,
}

impl SyntheticPage {
    pub fn to_blob(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("page serializes")
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self, WorldError> {
        serde_json::from_slice(bytes).map_err(|e| WorldError::BadPayload(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDocument {
    pub document: Document,
    pub pages: Vec<SyntheticPage>,
    pub true_fields: BTreeMap<String, String>,
}

impl SyntheticDocument {
    pub fn label(&self) -> &str {
        &self.document.doc_type
    }

    pub fn page_blobs(&self) -> Vec<Vec<u8>> {
        self.pages.iter().map(SyntheticPage::to_blob).collect()
    }

    pub fn word_count(&self) -> usize {
        self.pages.iter().map(|p| p.true_text.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PagesDistribution {
    Fixed(u32),
    /// Inclusive integer range.
    Uniform { min: u32, max: u32 },
    Weighted(Vec<(u32, f64)>),
}

impl Default for PagesDistribution {
    fn default() -> Self {
        PagesDistribution::Fixed(8)
    }
}

impl PagesDistribution {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |c: &str| Err(ConfigError::invalid("corpus.pages", c));
        match self {
            PagesDistribution::Fixed(0) => bad("page count must be at least 1"),
            PagesDistribution::Uniform { min, max } if *min == 0 || max < min => bad("range must satisfy 1 <= min <= max"),
            PagesDistribution::Weighted(w) if w.is_empty() => bad("weights must be non-empty"),
            PagesDistribution::Weighted(w) if w.iter().any(|(n, p)| *n == 0 || p.is_nan() || *p < 0.0) => bad("weights need pages >= 1 and p >= 0"),
            PagesDistribution::Weighted(w) if w.iter().map(|(_, p)| p).sum::<f64>() <= 0.0 => bad("weights must have positive mass"),
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            PagesDistribution::Fixed(n) => *n as f64,
            PagesDistribution::Uniform { min, max } => (*min as f64 + *max as f64) / 2.0,
            PagesDistribution::Weighted(w) => {
                let total: f64 = w.iter().map(|(_, p)| p).sum();
                w.iter().map(|(n, p)| *n as f64 * p).sum::<f64>() / total
            }
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> u32 {
        match self {
            PagesDistribution::Fixed(n) => *n,
            PagesDistribution::Uniform { min, max } => rng.random_range(*min..=*max),
            PagesDistribution::Weighted(w) => {
                let total: f64 = w.iter().map(|(_, p)| p).sum();
                let mut x = rng.random::<f64>() * total;
                for (n, p) in w {
                    if x < *p {
                        return *n;
                    }
                    x -= p;
                }
                w.last().expect("non-empty").0
            }
        }
    }
}

/// Weighted labels; empty means uniform over the configured doc types.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution(pub Vec<(String, f64)>);

impl LabelDistribution {
    pub fn uniform(labels: &[String]) -> Self {
        LabelDistribution(labels.iter().map(|l| (l.clone(), 1.0)).collect())
    }

    fn sample(&self, rng: &mut impl Rng) -> String {
        let total: f64 = self.0.iter().map(|(_, p)| p).sum();
        let mut x = rng.random::<f64>() * total;
        for (l, p) in &self.0 {
            if x < *p {
                return l.clone();
            }
            x -= p;
        }
        self.0.last().expect("non-empty").0.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_docs: usize,
    pub pages: PagesDistribution,
    pub labels: LabelDistribution,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn new(n_docs: usize, seed: u64) -> Self {
        CorpusSpec { n_docs, pages: PagesDistribution::default(), labels: LabelDistribution::default(), seed }
    }

    pub fn with_pages(mut self, pages: PagesDistribution) -> Self {
        self.pages = pages;
        self
    }
}

/// Deterministic per-draw RNG.
pub fn substream(seed: u64, doc: &DocumentId, page: Option<u32>, op: &str) -> ChaCha8Rng {
    let h = KeyHasher::new().u64(seed).str(doc.as_str()).u64(page.map_or(u64::MAX, u64::from)).str(op).finish();
    ChaCha8Rng::seed_from_u64(h)
}

const VOCAB: [&str; 32] = [
    "the", "of", "and", "policy", "date", "amount", "total", "page", "claim", "account", "number", "service", "period",
    "reference", "payment", "signed", "office", "section", "notice", "review", "balance", "due", "item", "record",
    "address", "client", "report", "terms", "copy", "form", "entry", "value",
];

/// Generates a corpus. Labels must name configured doc types.
pub fn generate_corpus(
    spec: &CorpusSpec,
    config: &PipelineConfig,
    calibration: &Calibration,
) -> Result<Vec<SyntheticDocument>, ConfigError> {
    if spec.n_docs == 0 {
        return Err(ConfigError::invalid("corpus.n_docs", "must be at least 1"));
    }
    spec.pages.validate()?;
    let labels = if spec.labels.0.is_empty() { LabelDistribution::uniform(&config.labels()) } else { spec.labels.clone() };
    if labels.0.iter().any(|(l, p)| config.doc_type(l).is_none() || p.is_nan() || *p < 0.0) {
        return Err(ConfigError::invalid("corpus.labels", "labels must be configured doc types with non-negative weight"));
    }
    if labels.0.iter().map(|(_, p)| p).sum::<f64>() <= 0.0 {
        return Err(ConfigError::invalid("corpus.labels", "weights must have positive mass"));
    }

    let mut out = Vec::with_capacity(spec.n_docs);
    for i in 0..spec.n_docs {
        let id = DocumentId::new(format!("doc-{:x}-{i:05}", spec.seed));
        let mut rng = substream(spec.seed, &id, None, "corpus");
        let label = labels.sample(&mut rng);
        let n_pages = spec.pages.sample(&mut rng);
        let fields: BTreeMap<String, String> = config
            .doc_type(&label)
            .expect("validated")
            .fields
            .iter()
            .map(|f| (f.clone(), format!("{}{:08x}", &f[..f.len().min(3)], rng.random::<u32>())))
            .collect();
        let field_names: Vec<&String> = fields.keys().collect();
        let mut pages = Vec::with_capacity(n_pages as usize);
        for p in 0..n_pages {
            let mut prng = substream(spec.seed, &id, Some(p), "page");
            let difficulty =
                if prng.random::<f64>() < calibration.confidence.p_hard { Difficulty::Hard } else { Difficulty::Easy };
            let n_words = prng.random_range(calibration.words_per_page.0..=calibration.words_per_page.1) as usize;
            let mut words: Vec<String> = (0..n_words).map(|_| VOCAB.choose(&mut prng).expect("vocab").to_string()).collect();
            for (j, name) in field_names.iter().enumerate() {
                if j as u32 % n_pages == p && !words.is_empty() {
                    let free: Vec<usize> = (0..words.len()).filter(|&i| !words[i].contains(':')).collect();
                    if let Some(&pos) = free.choose(&mut prng) {
                        words[pos] = format!("{name}:{}", fields[*name]);
                    }
                }
            }
            let cover = p == 0;
            let metadata = cover.then(|| CoverMetadata {
                date_stamp: format!("2024-{:02}-{:02}", prng.random_range(1..=12), prng.random_range(1..=28)),
                barcode: format!("{:012}", prng.random_range(0..1_000_000_000_000u64)),
                signature: prng.random_bool(0.8),
            });
            pages.push(SyntheticPage {
                document_id: id.clone(),
                page_index: p,
                true_label: label.clone(),
                difficulty,
                cover,
                true_text: words,
                true_fields: fields.clone(),
                metadata,
                nominal_bytes: prng.random_range(2u64 << 20..=90u64 << 20),
            });
        }
        let document = Document::with_pages(id, label, n_pages, Timestamp::ZERO);
        out.push(SyntheticDocument { document, pages, true_fields: fields });
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ManifestLine<'a> {
    id: &'a str,
    label: &'a str,
    page_count: usize,
    seed: u64,
}

/// Writes one JSON line per document for reproducibility audits.
pub fn write_manifest(path: &Path, corpus: &[SyntheticDocument], seed: u64) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in corpus {
        let line = ManifestLine { id: d.document.id.as_str(), label: d.label(), page_count: d.pages.len(), seed };
        writeln!(f, "{}", serde_json::to_string(&line).expect("manifest serializes"))?;
    }
    f.flush()
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutcome {
    pub label: String,
    pub confidence: f64,
}

fn wrong_label(rng: &mut impl Rng, truth: &str, labels: &[String]) -> String {
    let others: Vec<&String> = labels.iter().filter(|l| l.as_str() != truth).collect();
    match others.choose(rng) {
        Some(l) => (*l).clone(),
        None => format!("not-{truth}"),
    }
}

/// Samples a classification. `backend.name` selects clip or the VLM; the
/// VLM always reports confidence 1.0.
pub fn sample_classifier_outcome(
    page: &SyntheticPage,
    backend: &BackendProfile,
    model: &ConfidenceModel,
    labels: &[String],
    seed: u64,
) -> ClassifierOutcome {
    let mut rng = substream(seed, &page.document_id, Some(page.page_index), &backend.name);
    if backend.name.starts_with("vlm") {
        let correct = rng.random::<f64>() < backend.accuracy;
        let label = if correct { page.true_label.clone() } else { wrong_label(&mut rng, &page.true_label, labels) };
        return ClassifierOutcome { label, confidence: 1.0 };
    }
    let (accuracy, range, beta) = match page.difficulty {
        Difficulty::Easy => (model.easy_accuracy, model.easy_range, (4.0, 1.5)),
        Difficulty::Hard => (model.hard_accuracy, model.hard_range, (4.0, 2.0)),
    };
    let correct = rng.random::<f64>() < accuracy;
    let confidence = match model.kind {
        ConfidenceModelKind::TwoPoint => rng.random_range(range.0..=range.1),
        ConfidenceModelKind::BetaMixture => {
            let b: f64 = Beta::new(beta.0, beta.1).expect("valid beta").sample(&mut rng);
            match page.difficulty {
                Difficulty::Easy => 0.7 + 0.3 * b.clamp(1e-6, 0.999_999),
                Difficulty::Hard => 0.7 * b.min(0.999_999),
            }
        }
    };
    let label = if correct { page.true_label.clone() } else { wrong_label(&mut rng, &page.true_label, labels) };
    ClassifierOutcome { label, confidence }
}

/// Identifies one draw: the document, optional page and operation.
#[derive(Debug, Clone, Copy)]
pub struct SampleKey<'a> {
    pub document_id: &'a DocumentId,
    pub page_index: Option<u32>,
}

/// Uniform draw from the profile's latency range, multiplied by
/// `time_scale`. Pass 1.0 for model seconds.
pub fn sample_latency(op: &str, profile: &BackendProfile, key: SampleKey<'_>, seed: u64, time_scale: f64) -> Duration {
    let mut rng = substream(seed, key.document_id, key.page_index, &format!("latency:{op}"));
    let (lo, hi) = profile.latency;
    let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    Duration::from_secs_f64(s * time_scale)
}

/// Parse service time grows sublinearly with text length.
pub fn sample_parse_latency(profile: &BackendProfile, doc: &DocumentId, words: usize, seed: u64) -> Duration {
    let base = sample_latency("parse", profile, SampleKey { document_id: doc, page_index: None }, seed, 1.0);
    let anchor = profile.tokens.as_ref().map_or(ANCHOR_WORDS, |t| t.anchor_words);
    base.mul_f64((words as f64 / anchor).sqrt().max(0.05))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub fields: BTreeMap<String, String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost: f64,
}

/// Structured extraction from stitched text: schema fields are read from
/// `name:value` tokens; with probability `1 - accuracy` one field is
/// perturbed. Missing fields come back empty.
pub fn sample_parse_outcome(
    doc: &DocumentId,
    words: &[String],
    schema: &[String],
    backend: &BackendProfile,
    seed: u64,
) -> Result<ParseOutcome, WorldError> {
    if words.is_empty() {
        return Err(WorldError::EmptyInput);
    }
    let mut fields: BTreeMap<String, String> = schema.iter().map(|f| (f.clone(), String::new())).collect();
    for w in words {
        if let Some((name, value)) = w.split_once(':') {
            if let Some(slot) = fields.get_mut(name) {
                *slot = value.to_owned();
            }
        }
    }
    let mut rng = substream(seed, doc, None, "parse");
    if rng.random::<f64>() >= backend.accuracy && !schema.is_empty() {
        let victim = schema.choose(&mut rng).expect("non-empty");
        fields.get_mut(victim).expect("present").push_str("~x");
    }
    let (input_tokens, output_tokens, cost) = match &backend.tokens {
        Some(t) => {
            let (i, o) = t.tokens(words.len());
            (i, o, t.cost(i, o))
        }
        None => (0, 0, backend.unit_cost),
    };
    Ok(ParseOutcome { fields, input_tokens, output_tokens, cost })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrWord {
    pub text: String,
    /// Normalized `[x0, y0, x1, y1]`.
    pub bbox: [f64; 4],
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrResult {
    pub page_index: u32,
    pub words: Vec<OcrWord>,
}

const WORDS_PER_LINE: usize = 12;

/// Ground-truth words laid out in reading order with synthetic boxes.
pub fn sample_ocr(page: &SyntheticPage, calibration: &Calibration, seed: u64) -> OcrResult {
    let mut rng = substream(seed, &page.document_id, Some(page.page_index), "ocr:words");
    let lines = page.true_text.len().div_ceil(WORDS_PER_LINE).max(1);
    let line_h = 0.9 / lines as f64;
    let col_w = 0.9 / WORDS_PER_LINE as f64;
    let (clo, chi) = calibration.ocr_word_confidence;
    let words = page
        .true_text
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let (row, col) = (i / WORDS_PER_LINE, i % WORDS_PER_LINE);
            let x0 = 0.05 + col as f64 * col_w;
            let y0 = 0.05 + row as f64 * line_h;
            OcrWord {
                text: w.clone(),
                bbox: [x0, y0, x0 + col_w * 0.9, y0 + line_h * 0.8],
                confidence: rng.random_range(clo..=chi),
            }
        })
        .collect();
    OcrResult { page_index: page.page_index, words }
}

/// Auxiliary metadata from a cover page. With probability
/// `1 - accuracy` one attribute is misread.
pub fn sample_detection(page: &SyntheticPage, backend: &BackendProfile, seed: u64) -> Result<CoverMetadata, WorldError> {
    let truth = match (&page.metadata, page.cover) {
        (Some(m), true) => m.clone(),
        _ => return Err(WorldError::NotACoverPage(page.page_index)),
    };
    let mut rng = substream(seed, &page.document_id, Some(page.page_index), &format!("detect:{}", backend.name));
    if rng.random::<f64>() < backend.accuracy {
        return Ok(truth);
    }
    let mut m = truth;
    match rng.random_range(0..3) {
        0 => m.date_stamp.push('?'),
        1 => m.barcode = m.barcode.chars().rev().collect(),
        _ => m.signature = !m.signature,
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Monte Carlo calibration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationStats {
    pub pages: usize,
    pub clip_accuracy: f64,
    pub vlm_accuracy: f64,
    pub hybrid_accuracy: f64,
    pub fallback_rate: f64,
    /// Expected dollars per page under hybrid routing.
    pub hybrid_cost_per_page: f64,
}

/// Classifies `n_pages` synthetic pages with clip, the VLM, and the
/// confidence-gated hybrid, using the same samplers as the service.
pub fn classification_monte_carlo(n_pages: usize, seed: u64, calibration: &Calibration, threshold: f64, labels: &[String]) -> ClassificationStats {
    let doc = DocumentId::new(format!("calib-{seed:x}"));
    let (mut clip_ok, mut vlm_ok, mut hybrid_ok, mut fallbacks) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..n_pages {
        let mut rng = substream(seed, &doc, Some(i as u32), "calib:page");
        let label = labels.choose(&mut rng).cloned().unwrap_or_else(|| "form".into());
        let difficulty = if rng.random::<f64>() < calibration.confidence.p_hard { Difficulty::Hard } else { Difficulty::Easy };
        let page = SyntheticPage {
            document_id: doc.clone(),
            page_index: i as u32,
            true_label: label,
            difficulty,
            cover: false,
            true_text: Vec::new(),
            true_fields: BTreeMap::new(),
            metadata: None,
            nominal_bytes: 0,
        };
        let clip = sample_classifier_outcome(&page, &calibration.clip, &calibration.confidence, labels, seed);
        let vlm = sample_classifier_outcome(&page, &calibration.vlm_classify, &calibration.confidence, labels, seed);
        clip_ok += usize::from(clip.label == page.true_label);
        vlm_ok += usize::from(vlm.label == page.true_label);
        let hybrid = if clip.confidence > threshold {
            clip.label
        } else {
            fallbacks += 1;
            vlm.label
        };
        hybrid_ok += usize::from(hybrid == page.true_label);
    }
    let n = n_pages.max(1) as f64;
    let fallback_rate = fallbacks as f64 / n;
    ClassificationStats {
        pages: n_pages,
        clip_accuracy: clip_ok as f64 / n,
        vlm_accuracy: vlm_ok as f64 / n,
        hybrid_accuracy: hybrid_ok as f64 / n,
        fallback_rate,
        hybrid_cost_per_page: calibration.clip.unit_cost + fallback_rate * calibration.vlm_classify.unit_cost,
    }
}

#[cfg(test)]
mod tests {

    #[test]
    fn analytic_fallback_matches_monte_carlo() {
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        for kind in [ConfidenceModelKind::TwoPoint, ConfidenceModelKind::BetaMixture] {
            let mut cal = Calibration::default();
            cal.confidence.kind = kind;
            for t in [0.7, 0.85] {
                let mc = classification_monte_carlo(20_000, 9, &cal, t, &labels).fallback_rate;
                let p = cal.confidence.fallback_probability(t);
                assert!((mc - p).abs() < 0.006, "{kind:?} t={t}: mc {mc} analytic {p}");
            }
        }
        let cal = Calibration::default();
        assert_eq!(cal.confidence.fallback_probability(0.7), 0.04);
        assert!((cal.expected_hybrid_cost(0.7) - 0.0004).abs() < 1e-15);
    }
    use super::*;
    use proptest::prelude::*;

    fn labels() -> Vec<String> {
        PipelineConfig::default_config().labels()
    }

    fn corpus(n: usize, seed: u64) -> Vec<SyntheticDocument> {
        generate_corpus(&CorpusSpec::new(n, seed), &PipelineConfig::default_config(), &Calibration::default()).unwrap()
    }

    #[test]
    fn mixture_constants_solve_the_accuracy_targets() {
        let c = Calibration::default().confidence;
        // Oracle: closed-form expectations of the mixture.
        assert!((c.clip_accuracy() - 0.9204).abs() < 1e-12);
        assert!((c.hybrid_accuracy(0.98) - 0.9596).abs() < 1e-12);
        assert!((c.clip_accuracy() - 0.92).abs() <= 0.01);
        assert!((c.hybrid_accuracy(0.98) - 0.96).abs() <= 0.01);
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = corpus(200, 42);
        let b = corpus(200, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        assert!(a.iter().all(|d| d.pages.len() == 8));
        assert_ne!(a, corpus(200, 43));
    }

    #[test]
    fn degenerate_single_page_distribution() {
        let spec = CorpusSpec::new(50, 1).with_pages(PagesDistribution::Fixed(1));
        let docs = generate_corpus(&spec, &PipelineConfig::default_config(), &Calibration::default()).unwrap();
        assert!(docs.iter().all(|d| d.pages.len() == 1 && d.document.page_count() == 1));
        // Every field token still lands on the only page.
        for d in &docs {
            let text = &d.pages[0].true_text;
            for (k, v) in &d.true_fields {
                assert!(text.contains(&format!("{k}:{v}")));
            }
        }
    }

    #[test]
    fn mean_page_count_matches_distribution() {
        let dist = PagesDistribution::Weighted(vec![(1, 0.2), (4, 0.5), (12, 0.3)]);
        let spec = CorpusSpec::new(10_000, 9).with_pages(dist.clone());
        let docs = generate_corpus(&spec, &PipelineConfig::default_config(), &Calibration::default()).unwrap();
        let mean = docs.iter().map(|d| d.pages.len()).sum::<usize>() as f64 / docs.len() as f64;
        let expected = 0.2 * 1.0 + 0.5 * 4.0 + 0.3 * 12.0;
        assert!((dist.mean() - expected).abs() < 1e-12);
        assert!((mean - expected).abs() / expected < 0.02, "mean {mean}");
    }

    #[test]
    fn invalid_distributions_are_config_errors() {
        let cfg = PipelineConfig::default_config();
        let cal = Calibration::default();
        assert!(generate_corpus(&CorpusSpec::new(0, 1), &cfg, &cal).is_err());
        assert!(generate_corpus(&CorpusSpec::new(1, 1).with_pages(PagesDistribution::Fixed(0)), &cfg, &cal).is_err());
        assert!(generate_corpus(&CorpusSpec::new(1, 1).with_pages(PagesDistribution::Uniform { min: 5, max: 2 }), &cfg, &cal).is_err());
        let mut spec = CorpusSpec::new(1, 1);
        spec.labels = LabelDistribution(vec![("unknown".into(), 1.0)]);
        assert!(generate_corpus(&spec, &cfg, &cal).is_err());
    }

    #[test]
    fn page_blob_round_trips() {
        let d = &corpus(1, 5)[0];
        for p in &d.pages {
            assert_eq!(&SyntheticPage::from_blob(&p.to_blob()).unwrap(), p);
        }
        assert!(d.pages[0].cover && d.pages[0].metadata.is_some());
        assert!(d.pages[1..].iter().all(|p| !p.cover));
    }

    #[test]
    fn easy_pages_always_clear_the_threshold() {
        let cal = Calibration::default();
        let docs = corpus(1250, 3);
        let mut easy = 0;
        for p in docs.iter().flat_map(|d| &d.pages).filter(|p| p.difficulty == Difficulty::Easy) {
            easy += 1;
            let o = sample_classifier_outcome(p, &cal.clip, &cal.confidence, &labels(), 3);
            assert!(o.confidence >= 0.7);
        }
        assert!(easy > 9000);
    }

    #[test]
    fn fallback_fraction_over_ten_thousand_pages() {
        let cal = Calibration::default();
        let docs = corpus(1250, 11);
        let pages: Vec<_> = docs.iter().flat_map(|d| &d.pages).collect();
        assert_eq!(pages.len(), 10_000);
        let below = pages
            .iter()
            .filter(|p| sample_classifier_outcome(p, &cal.clip, &cal.confidence, &labels(), 11).confidence < 0.7)
            .count();
        let frac = below as f64 / pages.len() as f64;
        assert!((frac - 0.04).abs() <= 0.01, "fallback {frac}");
    }

    #[test]
    fn beta_mixture_keeps_classes_on_their_side_of_threshold() {
        let mut cal = Calibration::default();
        cal.confidence.kind = ConfidenceModelKind::BetaMixture;
        for p in corpus(200, 4).iter().flat_map(|d| &d.pages) {
            let c = sample_classifier_outcome(p, &cal.clip, &cal.confidence, &labels(), 4).confidence;
            assert!((0.0..=1.0).contains(&c));
            assert_eq!(c >= 0.7, p.difficulty == Difficulty::Easy);
        }
    }

    #[test]
    fn vlm_reports_unit_confidence() {
        let cal = Calibration::default();
        let p = &corpus(1, 1)[0].pages[0];
        assert_eq!(sample_classifier_outcome(p, &cal.vlm_classify, &cal.confidence, &labels(), 1).confidence, 1.0);
    }

    #[test]
    fn ocr_latency_range_and_scaling() {
        let cal = Calibration::default();
        let doc = DocumentId::new("d");
        let mut sum = 0.0;
        for i in 0..10_000u32 {
            let key = SampleKey { document_id: &doc, page_index: Some(i) };
            let d = sample_latency("ocr", &cal.ocr, key, 42, 1.0).as_secs_f64();
            assert!((1.0..=2.0).contains(&d));
            let scaled = sample_latency("ocr", &cal.ocr, key, 42, 0.01).as_secs_f64();
            assert!((0.010..=0.020).contains(&scaled));
            assert!((scaled - d * 0.01).abs() < 1e-9);
            sum += d;
        }
        // Oracle: uniform mean (1 + 2) / 2.
        assert!((sum / 10_000.0 - 1.5).abs() < 0.02);
    }

    #[test]
    fn parse_tokens_and_cost_at_the_anchor() {
        let cal = Calibration::default();
        let doc = DocumentId::new("d");
        let words: Vec<String> = (0..960).map(|_| "w".to_string()).collect();
        let o = sample_parse_outcome(&doc, &words, &["a".into()], &cal.parse, 1).unwrap();
        assert_eq!((o.input_tokens, o.output_tokens), (4500, 400));
        assert!((o.cost - 0.03).abs() < 1e-12);
        let short = sample_parse_outcome(&doc, &words[..120], &["a".into()], &cal.parse, 1).unwrap();
        assert!((short.input_tokens as f64 - 562.5).abs() <= 0.5);
        assert_eq!(sample_parse_outcome(&doc, &[], &["a".into()], &cal.parse, 1), Err(WorldError::EmptyInput));
    }

    #[test]
    fn parse_reads_fields_from_text() {
        let cal = Calibration::default();
        let mut perfect = cal.parse.clone();
        perfect.accuracy = 1.0;
        let d = &corpus(1, 8)[0];
        let words: Vec<String> = d.pages.iter().flat_map(|p| p.true_text.clone()).collect();
        let schema: Vec<String> = d.true_fields.keys().cloned().collect();
        let o = sample_parse_outcome(&d.document.id, &words, &schema, &perfect, 8).unwrap();
        assert_eq!(o.fields, d.true_fields);
    }

    #[test]
    fn ocr_preserves_word_order_and_is_deterministic() {
        let cal = Calibration::default();
        let p = &corpus(1, 2)[0].pages[3];
        let r = sample_ocr(p, &cal, 2);
        assert_eq!(r.words.iter().map(|w| w.text.clone()).collect::<Vec<_>>(), p.true_text);
        assert!(r.words.iter().all(|w| (0.0..=1.0).contains(&w.confidence) && w.bbox.iter().all(|c| (0.0..=1.0).contains(c))));
        assert_eq!(r, sample_ocr(p, &cal, 2));
    }

    #[test]
    fn detection_requires_cover_page() {
        let cal = Calibration::default();
        let d = &corpus(1, 2)[0];
        assert!(sample_detection(&d.pages[0], &cal.detector, 2).is_ok());
        assert_eq!(sample_detection(&d.pages[1], &cal.detector, 2), Err(WorldError::NotACoverPage(1)));
        assert!(cal.vlm_detect.unit_cost > cal.detector.unit_cost);
        assert!(cal.detector.mean_latency() < cal.vlm_detect.mean_latency());
    }

    #[test]
    fn calibration_reproduces_targets_across_seeds() {
        let cal = Calibration::default();
        for seed in 0..5 {
            let s = classification_monte_carlo(10_000, seed, &cal, 0.7, &labels());
            assert!((s.clip_accuracy - 0.92).abs() <= 0.01, "{s:?}");
            assert!((s.vlm_accuracy - 0.98).abs() <= 0.01, "{s:?}");
            assert!((s.hybrid_accuracy - 0.96).abs() <= 0.01, "{s:?}");
            assert!((s.fallback_rate - 0.04).abs() <= 0.01, "{s:?}");
        }
    }

    proptest! {
        #[test]
        fn samplers_are_pure(seed in any::<u64>(), doc in "[a-z]{1,8}", page in 0u32..64) {
            let cal = Calibration::default();
            let id = DocumentId::new(doc);
            let key = SampleKey { document_id: &id, page_index: Some(page) };
            prop_assert_eq!(sample_latency("ocr", &cal.ocr, key, seed, 1.0), sample_latency("ocr", &cal.ocr, key, seed, 1.0));
            let p = SyntheticPage {
                document_id: id.clone(), page_index: page, true_label: "invoice".into(), difficulty: Difficulty::Easy,
                cover: false, true_text: vec!["a".into()], true_fields: BTreeMap::new(), metadata: None, nominal_bytes: 1,
            };
            let a = sample_classifier_outcome(&p, &cal.clip, &cal.confidence, &labels(), seed);
            let b = sample_classifier_outcome(&p, &cal.clip, &cal.confidence, &labels(), seed);
            prop_assert_eq!(a, b);
        }
    }
}

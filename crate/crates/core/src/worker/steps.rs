//! Step outputs and the pure stitch transform.
//!
//! Each output is serialized as canonical JSON (struct fields in
//! declaration order, maps sorted), which is also its checkpoint payload.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CostEntry, DocumentId, Step};
use crate::inference::OcrResult;
use crate::worldgen::CoverMetadata;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Clip,
    Vlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageLabel {
    pub page_index: u32,
    pub label: String,
    pub confidence: f64,
    /// Clip confidence that decided the route.
    pub clip_confidence: f64,
    pub source: LabelSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOutput {
    pub pages: Vec<PageLabel>,
    pub route: String,
    pub costs: Vec<CostEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataOutput {
    pub page_index: u32,
    pub metadata: Option<CoverMetadata>,
    pub costs: Vec<CostEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrOutput {
    pub pages: Vec<OcrResult>,
    pub costs: Vec<CostEntry>,
}

/// Concatenated page text with page boundaries as `[start, end)` word offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StitchedText {
    pub words: Vec<String>,
    pub boundaries: BTreeMap<u32, (usize, usize)>,
}

impl StitchedText {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseOutput {
    pub schema_doc_type: String,
    pub fields: BTreeMap<String, String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub costs: Vec<CostEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StitchError {
    #[error("OCR output for page {0} is missing")]
    MissingPage(u32),
}

/// Concatenates OCR words in page order, recording each page's span.
pub fn stitch(pages: &[OcrResult], page_count: u32) -> Result<StitchedText, StitchError> {
    let by_index: BTreeMap<u32, &OcrResult> = pages.iter().map(|p| (p.page_index, p)).collect();
    let mut words = Vec::new();
    let mut boundaries = BTreeMap::new();
    for i in 0..page_count {
        let page = by_index.get(&i).ok_or(StitchError::MissingPage(i))?;
        let start = words.len();
        words.extend(page.words.iter().map(|w| w.text.clone()));
        boundaries.insert(i, (start, words.len()));
    }
    Ok(StitchedText { words, boundaries })
}

/// Majority label; ties go to the label seen on the earliest page.
pub fn aggregate_route(pages: &[PageLabel]) -> Option<String> {
    let mut counts: BTreeMap<&str, (usize, u32)> = BTreeMap::new();
    for p in pages {
        let e = counts.entry(p.label.as_str()).or_insert((0, p.page_index));
        e.0 += 1;
        e.1 = e.1.min(p.page_index);
    }
    counts.into_iter().max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1))).map(|(l, _)| l.to_owned())
}

/// Accumulated outputs of completed steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutputs {
    pub classify: Option<ClassifyOutput>,
    pub metadata: Option<MetadataOutput>,
    pub ocr: Option<OcrOutput>,
    pub stitch: Option<StitchedText>,
    pub parse: Option<ParseOutput>,
}

impl StepOutputs {
    pub fn encode(&self, step: Step) -> Option<Vec<u8>> {
        let bytes = match step {
            Step::Classify => serde_json::to_vec(self.classify.as_ref()?),
            Step::Metadata => serde_json::to_vec(self.metadata.as_ref()?),
            Step::Ocr => serde_json::to_vec(self.ocr.as_ref()?),
            Step::Stitch => serde_json::to_vec(self.stitch.as_ref()?),
            Step::Parse => serde_json::to_vec(self.parse.as_ref()?),
        };
        Some(bytes.expect("step output serializes"))
    }

    pub fn restore(&mut self, step: Step, bytes: &[u8]) -> Result<(), serde_json::Error> {
        match step {
            Step::Classify => self.classify = Some(serde_json::from_slice(bytes)?),
            Step::Metadata => self.metadata = Some(serde_json::from_slice(bytes)?),
            Step::Ocr => self.ocr = Some(serde_json::from_slice(bytes)?),
            Step::Stitch => self.stitch = Some(serde_json::from_slice(bytes)?),
            Step::Parse => self.parse = Some(serde_json::from_slice(bytes)?),
        }
        Ok(())
    }

    pub fn costs(&self, step: Step) -> &[CostEntry] {
        match step {
            Step::Classify => self.classify.as_ref().map_or(&[], |o| &o.costs),
            Step::Metadata => self.metadata.as_ref().map_or(&[], |o| &o.costs),
            Step::Ocr => self.ocr.as_ref().map_or(&[], |o| &o.costs),
            Step::Stitch => &[],
            Step::Parse => self.parse.as_ref().map_or(&[], |o| &o.costs),
        }
    }
}

/// The uploaded result. Contains no timings, so it is identical no matter
/// how many times the document was interrupted and resumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentResult {
    pub document_id: DocumentId,
    pub doc_type: String,
    pub route: Option<String>,
    pub page_labels: Option<Vec<PageLabel>>,
    pub metadata: Option<CoverMetadata>,
    pub word_count: Option<usize>,
    pub fields: Option<BTreeMap<String, String>>,
    pub step_costs: BTreeMap<Step, f64>,
    pub total_cost: f64,
}

impl DocumentResult {
    pub fn build(document_id: &DocumentId, doc_type: &str, steps: &[Step], outputs: &StepOutputs) -> Self {
        let mut step_costs = BTreeMap::new();
        let mut total_cost = 0.0;
        for step in steps {
            let c: f64 = outputs.costs(*step).iter().map(|e| e.unit_cost).sum();
            step_costs.insert(*step, c);
            total_cost += c;
        }
        DocumentResult {
            document_id: document_id.clone(),
            doc_type: doc_type.to_owned(),
            route: outputs.classify.as_ref().map(|c| c.route.clone()),
            page_labels: outputs.classify.as_ref().map(|c| c.pages.clone()),
            metadata: outputs.metadata.as_ref().and_then(|m| m.metadata.clone()),
            word_count: outputs.stitch.as_ref().map(|s| s.words.len()),
            fields: outputs.parse.as_ref().map(|p| p.fields.clone()),
            step_costs,
            total_cost,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("result serializes")
    }
}

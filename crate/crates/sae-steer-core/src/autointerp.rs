//! Concept interpretation support: top exemplar retrieval, mean-activation
//! ranking, the verbatim labeling prompt, and a pluggable label-service
//! client with an offline mock.
//!
//! Image-grid rendering stays on the label service's side of the wire; a
//! request carries only the prompt, the concept index, and exemplar
//! references (id, optional uri, activation).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::store::RecordMeta;
use crate::styling::ConceptMatrix;
use crate::{Error, Result};

/// The labeling prompt, reproduced byte for byte (including the "protoype"
/// misspelling in the original).
pub const PROMPT: &str = "The grid of images represents a visual concept or feature. Your task is to concisely label this feature. The top row contains a protoype of this concept: a blank white sphere followed by increasingly powerful expressions of the feature. The images underneath are those which contain the described feature. Use this information to provide a label for the feature. Do not give a complete sentence, just your label for the feature.";

/// Default number of exemplars per concept.
pub const DEFAULT_EXEMPLAR_COUNT: usize = 12;

/// Longest label accepted from a service before the response is treated as
/// malformed.
pub const MAX_LABEL_LEN: usize = 256;

/// High-level dimensions a label may be filed under.
pub const TAXONOMY: [&str; 8] = [
    "Artistic Aesthetics",
    "Style & Cultural / Artistic Aesthetics",
    "Form, Volume, Geometry",
    "Color & Chromatic Qualities",
    "Texture & Material Properties",
    "Reflectivity & Specular Light Behavior",
    "General Lighting & Shading",
    "Objects & Semantic Concepts",
];

/// One reference record that strongly expresses a concept. Serialized
/// directly into the wire request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub uri: Option<String>,
    pub activation: f32,
}

/// The strongest positive activations of one concept, descending, ties
/// broken by record id ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    pub concept: usize,
    pub entries: Vec<Exemplar>,
    /// How many exemplars were requested (entries may be fewer).
    pub k: usize,
}

/// Returns the `k` highest positive activations of concept `j` with the ids
/// of the rows they came from. Columns with fewer than `k` positives yield a
/// shorter list; a silent column yields an empty one.
pub fn top_exemplars(codes: &ConceptMatrix, j: usize, k: usize) -> Result<ExemplarSet> {
    if j >= codes.dict_size() {
        return Err(Error::invalid(format!(
            "concept {j} outside dictionary of {}",
            codes.dict_size()
        )));
    }
    let c = codes.codes();
    let ids = codes.ref_ids();
    let mut hits: Vec<(f32, &str)> = (0..codes.count())
        .filter(|&i| c[[i, j]] > 0.0)
        .map(|i| (c[[i, j]], ids[i].as_str()))
        .collect();
    hits.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    hits.truncate(k);
    Ok(ExemplarSet {
        concept: j,
        entries: hits
            .into_iter()
            .map(|(activation, id)| Exemplar {
                id: id.to_string(),
                uri: None,
                activation,
            })
            .collect(),
        k,
    })
}

/// Fills exemplar uris from a dataset manifest, matching by record id.
/// Exemplars without a manifest entry keep `None`.
pub fn attach_uris(set: &mut ExemplarSet, manifest: &[RecordMeta]) {
    for exemplar in &mut set.entries {
        if let Some(meta) = manifest.iter().find(|m| m.id == exemplar.id) {
            exemplar.uri = meta.uri.clone();
        }
    }
}

/// Concepts ordered by mean activation over all rows (zeros included),
/// descending, ties by index ascending; truncated to `top_n`.
pub fn rank_by_mean_activation(codes: &ConceptMatrix, top_n: usize) -> Vec<usize> {
    let n = codes.count();
    let m = codes.dict_size();
    let c = codes.codes();
    let mut means = vec![0.0f64; m];
    if n > 0 {
        for j in 0..m {
            let mut sum = 0.0f64;
            for i in 0..n {
                sum += c[[i, j]] as f64;
            }
            means[j] = sum / n as f64;
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then_with(|| a.cmp(&b)));
    order.truncate(top_n);
    order
}

/// Returns the labeling prompt.
pub fn assemble_prompt() -> &'static str {
    PROMPT
}

/// Where a label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    ExternalService,
    Manual,
    Mock,
}

/// A labeled concept. `category` is optional because labeling services
/// return free text; when present it must be one of [`TAXONOMY`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptLabel {
    pub concept: usize,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub source: LabelSource,
}

impl ConceptLabel {
    pub fn validate(&self) -> Result<()> {
        if self.label.is_empty() {
            return Err(Error::invalid(format!(
                "concept {}: empty label",
                self.concept
            )));
        }
        if let Some(cat) = &self.category {
            if !TAXONOMY.contains(&cat.as_str()) {
                return Err(Error::invalid(format!(
                    "concept {}: unknown category {cat:?}",
                    self.concept
                )));
            }
        }
        Ok(())
    }
}

/// One labeling request as it goes over the wire.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRequest {
    pub prompt: String,
    pub concept: usize,
    pub exemplars: Vec<Exemplar>,
}

#[derive(Deserialize)]
struct LabelResponse {
    label: String,
}

/// A service that turns an exemplar bundle into a label string.
pub trait LabelClient {
    fn label(&self, request: &LabelRequest) -> Result<String>;
    fn source(&self) -> LabelSource;
}

/// Offline stand-in: labels concept `j` as `mock-concept-j`.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockLabelClient;

impl LabelClient for MockLabelClient {
    fn label(&self, request: &LabelRequest) -> Result<String> {
        Ok(format!("mock-concept-{}", request.concept))
    }

    fn source(&self) -> LabelSource {
        LabelSource::Mock
    }
}

/// HTTP client speaking the wire contract: POST the request as JSON, expect
/// `{"label": <nonempty string>}` back.
pub struct HttpLabelClient {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpLabelClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(HttpLabelClient {
            endpoint: endpoint.into(),
            client,
        })
    }
}

impl LabelClient for HttpLabelClient {
    fn label(&self, request: &LabelRequest) -> Result<String> {
        let response = self
            .client
            .post(&self.endpoint)
            .json(request)
            .send()
            .map_err(|e| Error::Transport(format!("concept {}: {e}", request.concept)))?;
        let status = response.status();
        if !status.is_success() {
            return Err(Error::Transport(format!(
                "concept {}: status {status}",
                request.concept
            )));
        }
        let body: LabelResponse = response
            .json()
            .map_err(|e| Error::Transport(format!("concept {}: {e}", request.concept)))?;
        Ok(body.label)
    }

    fn source(&self) -> LabelSource {
        LabelSource::ExternalService
    }
}

/// Requests a label for one concept and validates the response. The label
/// must be nonempty and at most [`MAX_LABEL_LEN`] characters.
pub fn request_label(
    client: &dyn LabelClient,
    exemplars: &ExemplarSet,
    prompt: &str,
) -> Result<ConceptLabel> {
    let concept = exemplars.concept;
    if exemplars.entries.is_empty() {
        return Err(Error::invalid(format!(
            "concept {concept}: no exemplars to label"
        )));
    }
    let request = LabelRequest {
        prompt: prompt.to_string(),
        concept,
        exemplars: exemplars.entries.clone(),
    };
    let label = client.label(&request)?;
    if label.is_empty() {
        return Err(Error::invalid(format!("concept {concept}: empty label")));
    }
    if label.chars().count() > MAX_LABEL_LEN {
        return Err(Error::invalid(format!(
            "concept {concept}: label exceeds {MAX_LABEL_LEN} characters"
        )));
    }
    Ok(ConceptLabel {
        concept,
        label,
        category: None,
        source: client.source(),
    })
}

/// Writes labels as JSON lines sorted by concept index. Duplicate concepts
/// are rejected; every label is validated first.
pub fn export_labels(labels: &[ConceptLabel], path: &Path) -> Result<()> {
    let mut sorted: Vec<&ConceptLabel> = labels.iter().collect();
    sorted.sort_by_key(|l| l.concept);
    for pair in sorted.windows(2) {
        if pair[0].concept == pair[1].concept {
            return Err(Error::invalid(format!(
                "concept {} labeled twice",
                pair[0].concept
            )));
        }
    }
    for label in &sorted {
        label.validate()?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for label in sorted {
        let line = serde_json::to_string(label)
            .map_err(|e| Error::invalid(format!("label encode: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a label file written by [`export_labels`]; entries come back sorted
/// by concept index.
pub fn import_labels(path: &Path) -> Result<Vec<ConceptLabel>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let label: ConceptLabel = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("label line {}: {e}", lineno + 1)))?;
        label.validate()?;
        labels.push(label);
    }
    labels.sort_by_key(|l| l.concept);
    for pair in labels.windows(2) {
        if pair[0].concept == pair[1].concept {
            return Err(Error::invalid(format!(
                "concept {} labeled twice",
                pair[0].concept
            )));
        }
    }
    Ok(labels)
}

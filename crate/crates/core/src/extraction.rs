//! LLM-assisted persona taxonomy extraction.
//!
//! A seeded sample of posts is rendered into a CO-STAR prompt (Context,
//! Objective, Style, Tone, Audience, Response) and sent to an [`LlmClient`].
//! The reply must be a JSON taxonomy document; anything else is rejected with
//! the raw text attached. Drafts are immutable: refinement always creates a
//! new draft that points at its parent.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{FeatureWeight, PersonaCategory};
use crate::corpus::PostCollection;
use crate::textproc::normalize;

pub const POST_OPEN: &str = "<<<POST>>>";
pub const POST_CLOSE: &str = "<<<END POST>>>";

/// Appended to every Response section so replies can be parsed mechanically.
pub const TAXONOMY_SCHEMA_INSTRUCTION: &str = r#"Reply with a single JSON object and nothing else, using exactly this shape:
{"categories": [{"name": string, "description": string, "demographic_note": string,
  "expected_share": number between 0 and 1 (optional),
  "features": [{"token": string, "weight": positive number}]}],
 "rationale": string}
Give at least two categories with unique names. Feature tokens must be single words."#;

#[derive(Debug, thiserror::Error)]
pub enum ExtractionError {
    #[error("prompt template is missing the {0} section")]
    MissingSection(&'static str),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("sample size {requested} exceeds collection size {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("prompt payload is empty")]
    EmptyPayload,
    #[error("refinement challenge must not be empty")]
    EmptyChallenge,
    #[error("response does not match the taxonomy schema: {reason}")]
    Schema { reason: String, raw: String },
    #[error("LLM transport failed after {attempts} attempt(s): {last}")]
    Transport { attempts: usize, last: TransportError },
    #[error("invalid LLM client configuration: {0}")]
    ClientConfig(String),
    #[error("draft {0} already exists with different content")]
    DraftConflict(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ExtractionError {
    /// Raw model output for schema failures.
    pub fn raw_response(&self) -> Option<&str> {
        match self {
            ExtractionError::Schema { raw, .. } => Some(raw),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("{0}")]
    Other(String),
}

fn io_err(path: &Path, source: std::io::Error) -> ExtractionError {
    ExtractionError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub seed: u64,
    /// Sampled ids in collection order, for audit.
    pub post_ids: Vec<String>,
    pub posts: PostCollection,
}

/// Uniform sample without replacement; fixed seed, fixed sample.
pub fn sample_posts(d21: &PostCollection, n: usize, seed: u64) -> Result<Sample, ExtractionError> {
    if n > d21.len() {
        return Err(ExtractionError::SampleTooLarge {
            requested: n,
            available: d21.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, d21.len(), n).into_vec();
    indices.sort_unstable();
    let posts: Vec<_> = indices.iter().map(|&i| d21.posts[i].clone()).collect();
    Ok(Sample {
        seed,
        post_ids: posts.iter().map(|p| p.post_id.clone()).collect(),
        posts: PostCollection {
            label: d21.label,
            posts,
        },
    })
}

/// The six CO-STAR sections, loaded from a TOML file with one key per section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostarTemplate {
    pub context: String,
    pub objective: String,
    pub style: String,
    pub tone: String,
    pub audience: String,
    pub response: String,
}

#[derive(Deserialize)]
struct TemplateFile {
    context: Option<String>,
    objective: Option<String>,
    style: Option<String>,
    tone: Option<String>,
    audience: Option<String>,
    response: Option<String>,
}

impl CostarTemplate {
    pub fn from_toml(raw: &str) -> Result<Self, ExtractionError> {
        let f: TemplateFile =
            toml::from_str(raw).map_err(|e| ExtractionError::InvalidTemplate(e.to_string()))?;
        let take = |v: Option<String>, name: &'static str| {
            v.filter(|s| !s.trim().is_empty())
                .ok_or(ExtractionError::MissingSection(name))
        };
        let t = Self {
            context: take(f.context, "Context")?,
            objective: take(f.objective, "Objective")?,
            style: take(f.style, "Style")?,
            tone: take(f.tone, "Tone")?,
            audience: take(f.audience, "Audience")?,
            response: take(f.response, "Response")?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExtractionError> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)
    }

    pub fn validate(&self) -> Result<(), ExtractionError> {
        for (name, text) in self.sections() {
            if text.trim().is_empty() {
                return Err(ExtractionError::MissingSection(name));
            }
            if text.lines().any(|l| l == POST_OPEN || l == POST_CLOSE) {
                return Err(ExtractionError::InvalidTemplate(format!(
                    "{name} section contains a payload delimiter line"
                )));
            }
        }
        Ok(())
    }

    fn sections(&self) -> [(&'static str, &str); 6] {
        [
            ("Context", &self.context),
            ("Objective", &self.objective),
            ("Style", &self.style),
            ("Tone", &self.tone),
            ("Audience", &self.audience),
            ("Response", &self.response),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostarPrompt {
    pub context: String,
    pub objective: String,
    pub style: String,
    pub tone: String,
    pub audience: String,
    pub response_format: String,
    pub payload: Vec<String>,
}

pub const SECTION_HEADINGS: [&str; 6] = [
    "# CONTEXT",
    "# OBJECTIVE",
    "# STYLE",
    "# TONE",
    "# AUDIENCE",
    "# RESPONSE",
];

pub fn build_prompt(sample: &PostCollection, template: &CostarTemplate) -> Result<CostarPrompt, ExtractionError> {
    template.validate()?;
    if sample.is_empty() {
        return Err(ExtractionError::EmptyPayload);
    }
    Ok(CostarPrompt {
        context: template.context.trim().to_string(),
        objective: template.objective.trim().to_string(),
        style: template.style.trim().to_string(),
        tone: template.tone.trim().to_string(),
        audience: template.audience.trim().to_string(),
        response_format: format!("{}\n\n{}", template.response.trim(), TAXONOMY_SCHEMA_INSTRUCTION),
        payload: sample.iter().map(|p| p.text.clone()).collect(),
    })
}

fn escape_line(line: &str) -> String {
    if line.starts_with('\\') || line.starts_with("<<<") {
        format!("\\{line}")
    } else {
        line.to_string()
    }
}

impl CostarPrompt {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let bodies = [
            &self.context,
            &self.objective,
            &self.style,
            &self.tone,
            &self.audience,
            &self.response_format,
        ];
        for (heading, body) in SECTION_HEADINGS.iter().zip(bodies) {
            out.push_str(heading);
            out.push('\n');
            out.push_str(body);
            out.push_str("\n\n");
        }
        out.push_str(&format!("# POSTS ({})\n", self.payload.len()));
        for post in &self.payload {
            out.push_str(POST_OPEN);
            out.push('\n');
            for line in post.split('\n') {
                out.push_str(&escape_line(line));
                out.push('\n');
            }
            out.push_str(POST_CLOSE);
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the rendered prompt.
    pub fn digest(&self) -> String {
        digest_hex(&self.render())
    }
}

pub fn digest_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Recovers the post payload from a rendered prompt.
pub fn parse_payload(rendered: &str) -> Vec<String> {
    let mut posts = Vec::new();
    let mut current: Option<Vec<String>> = None;
    for line in rendered.split('\n') {
        match (&mut current, line) {
            (None, POST_OPEN) => current = Some(Vec::new()),
            (Some(lines), POST_CLOSE) => {
                posts.push(lines.join("\n"));
                current = None;
            }
            (Some(lines), l) => {
                lines.push(l.strip_prefix('\\').unwrap_or(l).to_string());
            }
            (None, _) => {}
        }
    }
    posts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    LlmGenerated,
    ExpertRevised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyDraft {
    pub draft_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub round: u32,
    pub categories: Vec<PersonaCategory>,
    pub rationale: String,
    pub provenance: Provenance,
}

#[derive(Serialize)]
struct DraftIdentity<'a> {
    parent_id: &'a Option<String>,
    round: u32,
    categories: &'a [PersonaCategory],
    rationale: &'a str,
    provenance: Provenance,
}

impl TaxonomyDraft {
    fn assemble(
        parent_id: Option<String>,
        round: u32,
        categories: Vec<PersonaCategory>,
        rationale: String,
        provenance: Provenance,
    ) -> Result<Self, ExtractionError> {
        validate_taxonomy(&categories).map_err(|reason| ExtractionError::Schema {
            reason,
            raw: String::new(),
        })?;
        let identity = DraftIdentity {
            parent_id: &parent_id,
            round,
            categories: &categories,
            rationale: &rationale,
            provenance,
        };
        let bytes = serde_json::to_vec(&identity).expect("draft identity serializes");
        let draft_id = format!("tx-{}", &hex::encode(Sha256::digest(&bytes))[..16]);
        Ok(Self {
            draft_id,
            parent_id,
            round,
            categories,
            rationale,
            provenance,
        })
    }

    /// Builds a round-0 draft; used by extraction and for seeding from a category file.
    pub fn root(
        categories: Vec<PersonaCategory>,
        rationale: String,
        provenance: Provenance,
    ) -> Result<Self, ExtractionError> {
        Self::assemble(None, 0, categories, rationale, provenance)
    }

    /// A child draft with edits made by an expert rather than the model.
    pub fn expert_revision(
        &self,
        categories: Vec<PersonaCategory>,
        rationale: String,
    ) -> Result<Self, ExtractionError> {
        Self::assemble(
            Some(self.draft_id.clone()),
            self.round + 1,
            categories,
            rationale,
            Provenance::ExpertRevised,
        )
    }

    pub fn category_ids(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.category_id.clone()).collect()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("draft serializes")
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyDoc {
    categories: Vec<CategoryDoc>,
    #[serde(default)]
    rationale: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CategoryDoc {
    #[serde(default)]
    id: Option<String>,
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    demographic_note: String,
    #[serde(default)]
    expected_share: Option<f64>,
    features: Vec<FeatureDoc>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FeatureDoc {
    Spec(String),
    Weighted {
        token: String,
        #[serde(default = "one")]
        weight: f64,
    },
}

fn one() -> f64 {
    1.0
}

pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in normalize(name).chars() {
        if c.is_alphanumeric() {
            out.push(c);
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

fn validate_taxonomy(categories: &[PersonaCategory]) -> Result<(), String> {
    if categories.len() < 2 {
        return Err(format!(
            "taxonomy needs at least 2 categories, got {}",
            categories.len()
        ));
    }
    let mut names = HashSet::new();
    let mut ids = HashSet::new();
    for c in categories {
        if c.name.trim().is_empty() {
            return Err("category with empty name".into());
        }
        if !names.insert(normalize(&c.name)) {
            return Err(format!("duplicate category name {:?}", c.name));
        }
        if !ids.insert(c.category_id.as_str()) {
            return Err(format!("duplicate category id {:?}", c.category_id));
        }
        c.validate().map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Pulls the JSON object out of a reply, tolerating a fenced code block.
fn json_body(raw: &str) -> Option<&str> {
    let trimmed = raw.trim();
    if let Some(rest) = trimmed.strip_prefix("```") {
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        return rest.rsplit_once("```").map(|(body, _)| body.trim());
    }
    let start = trimmed.find('{')?;
    let end = trimmed.rfind('}')?;
    (start < end).then(|| &trimmed[start..=end])
}

/// Parses and validates a taxonomy reply. Feature tokens are normalized.
pub fn parse_taxonomy(raw: &str) -> Result<(Vec<PersonaCategory>, String), ExtractionError> {
    let schema = |reason: String| ExtractionError::Schema {
        reason,
        raw: raw.to_string(),
    };
    let body = json_body(raw).ok_or_else(|| schema("no JSON object found".into()))?;
    let doc: TaxonomyDoc = serde_json::from_str(body).map_err(|e| schema(e.to_string()))?;
    let mut categories = Vec::with_capacity(doc.categories.len());
    for c in doc.categories {
        let features = c
            .features
            .into_iter()
            .map(|f| {
                let fw = match f {
                    FeatureDoc::Spec(s) => FeatureWeight::parse(&s)?,
                    FeatureDoc::Weighted { token, weight } => FeatureWeight::new(token, weight),
                };
                let token = normalize(&fw.token);
                if token.is_empty() || token.contains(' ') {
                    return Err(format!("feature {:?} is not a single token", fw.token));
                }
                Ok(FeatureWeight::new(token, fw.weight))
            })
            .collect::<Result<Vec<_>, String>>()
            .map_err(schema)?;
        let category_id = c
            .id
            .filter(|s| !s.trim().is_empty())
            .unwrap_or_else(|| slug(&c.name));
        categories.push(PersonaCategory {
            category_id,
            name: c.name.trim().to_string(),
            description: c.description,
            features,
            demographic_note: c.demographic_note,
            expected_share: c.expected_share,
        });
    }
    validate_taxonomy(&categories).map_err(schema)?;
    Ok((categories, doc.rationale))
}

/// Blocking chat-style completion.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, TransportError>;
}

impl<T: LlmClient + ?Sized> LlmClient for Box<T> {
    fn complete(&self, prompt: &str) -> Result<String, TransportError> {
        (**self).complete(prompt)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for std::sync::Arc<T> {
    fn complete(&self, prompt: &str) -> Result<String, TransportError> {
        (**self).complete(prompt)
    }
}

/// Canned responses keyed by prompt digest, with an optional fallback.
#[derive(Debug, Default)]
pub struct MockClient {
    by_digest: HashMap<String, String>,
    fallback: Option<String>,
    fail_first: usize,
    calls: AtomicUsize,
}

impl MockClient {
    pub fn fixed(response: impl Into<String>) -> Self {
        Self {
            fallback: Some(response.into()),
            ..Default::default()
        }
    }

    /// Every call times out.
    pub fn unreachable() -> Self {
        Self {
            fail_first: usize::MAX,
            ..Default::default()
        }
    }

    /// Loads `<sha256-hex>.json|.txt` files as keyed responses and
    /// `default.json|.txt` as the fallback.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, ExtractionError> {
        let dir = dir.as_ref();
        let mut client = Self::default();
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "txt")))
            .collect();
        entries.sort();
        for path in entries {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let body = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            if stem == "default" {
                client.fallback = Some(body);
            } else {
                client.by_digest.insert(stem, body);
            }
        }
        Ok(client)
    }

    pub fn with_response(mut self, prompt_digest: impl Into<String>, response: impl Into<String>) -> Self {
        self.by_digest.insert(prompt_digest.into(), response.into());
        self
    }

    /// The first `n` calls time out.
    pub fn failing_first(mut self, n: usize) -> Self {
        self.fail_first = n;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmClient for MockClient {
    fn complete(&self, prompt: &str) -> Result<String, TransportError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        if call < self.fail_first {
            return Err(TransportError::Timeout);
        }
        self.by_digest
            .get(&digest_hex(prompt))
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| TransportError::Other("mock has no response for this prompt".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmClientConfig {
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: String,
    /// Name of the environment variable that holds the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub mock_mode: bool,
    #[serde(default)]
    pub mock_dir: Option<PathBuf>,
    /// Passed through verbatim in the request body (temperature, top_p, ...).
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

fn default_key_env() -> String {
    "COPERSONA_LLM_API_KEY".into()
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    2
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model_name: String::new(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
            mock_mode: true,
            mock_dir: None,
            params: BTreeMap::new(),
        }
    }
}

impl LlmClientConfig {
    pub fn build(&self) -> Result<Box<dyn LlmClient>, ExtractionError> {
        if self.mock_mode {
            let dir = self.mock_dir.as_ref().ok_or_else(|| {
                ExtractionError::ClientConfig("mock mode needs mock_dir with canned responses".into())
            })?;
            return Ok(Box::new(MockClient::from_dir(dir)?));
        }
        Ok(Box::new(HttpLlmClient::new(self)?))
    }
}

/// Generic chat-completion client: POSTs `{"model", "messages", ...params}`
/// and reads `choices[0].message.content`.
pub struct HttpLlmClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    params: BTreeMap<String, serde_json::Value>,
    http: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn new(cfg: &LlmClientConfig) -> Result<Self, ExtractionError> {
        let endpoint = cfg
            .endpoint
            .clone()
            .filter(|e| !e.is_empty())
            .ok_or_else(|| ExtractionError::ClientConfig("endpoint is required".into()))?;
        if cfg.model_name.is_empty() {
            return Err(ExtractionError::ClientConfig("model_name is required".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| ExtractionError::ClientConfig(e.to_string()))?;
        Ok(Self {
            endpoint,
            model: cfg.model_name.clone(),
            api_key: std::env::var(&cfg.api_key_env).ok(),
            params: cfg.params.clone(),
            http,
        })
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, prompt: &str) -> Result<String, TransportError> {
        let mut body = serde_json::Map::new();
        for (k, v) in &self.params {
            body.insert(k.clone(), v.clone());
        }
        body.insert("model".into(), self.model.clone().into());
        body.insert(
            "messages".into(),
            serde_json::json!([{"role": "user", "content": prompt}]),
        );
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Other(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError::Other(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| TransportError::Other(format!("bad response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError::Other("response has no choices[0].message.content".into()))
    }
}

fn call_with_retries(client: &dyn LlmClient, prompt: &str, retries: u32) -> Result<String, ExtractionError> {
    let attempts = retries as usize + 1;
    let mut last = TransportError::Other("no attempt made".into());
    for attempt in 1..=attempts {
        match client.complete(prompt) {
            Ok(text) => return Ok(text),
            Err(e) => {
                tracing::warn!(attempt, error = %e, "LLM call failed");
                last = e;
            }
        }
    }
    Err(ExtractionError::Transport { attempts, last })
}

/// Sends the prompt and parses the reply into a round-0 draft.
pub fn extract_features(
    client: &dyn LlmClient,
    prompt: &CostarPrompt,
    retries: u32,
) -> Result<TaxonomyDraft, ExtractionError> {
    if prompt.payload.is_empty() {
        return Err(ExtractionError::EmptyPayload);
    }
    let raw = call_with_retries(client, &prompt.render(), retries)?;
    let (categories, rationale) = parse_taxonomy(&raw)?;
    TaxonomyDraft::root(categories, rationale, Provenance::LlmGenerated)
}

/// Prompt asking the model to revise `draft` in light of a reviewer challenge.
pub fn refinement_prompt(draft: &TaxonomyDraft, challenge: &str) -> String {
    #[derive(Serialize)]
    struct Current<'a> {
        categories: &'a [PersonaCategory],
        rationale: &'a str,
    }
    let current = serde_json::to_string_pretty(&Current {
        categories: &draft.categories,
        rationale: &draft.rationale,
    })
    .expect("taxonomy serializes");
    format!(
        "# OBJECTIVE\nRevise the persona taxonomy below so that it withstands the reviewer challenge. \
Keep categories that still hold, and split, merge, rename or re-weight where the challenge shows a gap.\n\n\
# RESPONSE\n{TAXONOMY_SCHEMA_INSTRUCTION}\n\n# CURRENT TAXONOMY (round {round})\n{current}\n\n# CHALLENGE\n{challenge}\n",
        round = draft.round,
        challenge = challenge.trim(),
    )
}

/// Asks the model to revise a draft. The parent draft is left untouched.
pub fn refine(
    client: &dyn LlmClient,
    draft: &TaxonomyDraft,
    challenge: &str,
    retries: u32,
) -> Result<TaxonomyDraft, ExtractionError> {
    if challenge.trim().is_empty() {
        return Err(ExtractionError::EmptyChallenge);
    }
    let raw = call_with_retries(client, &refinement_prompt(draft, challenge), retries)?;
    let (categories, rationale) = parse_taxonomy(&raw)?;
    TaxonomyDraft::assemble(
        Some(draft.draft_id.clone()),
        draft.round + 1,
        categories,
        rationale,
        Provenance::LlmGenerated,
    )
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    pub batches: usize,
    pub conflicts: Vec<String>,
}

/// Merges per-batch taxonomies by (normalized) category name. Feature weights
/// that disagree keep the larger value; every disagreement is reported.
pub fn merge_taxonomies(parts: Vec<(Vec<PersonaCategory>, String)>) -> (Vec<PersonaCategory>, String, MergeReport) {
    let mut report = MergeReport {
        batches: parts.len(),
        ..Default::default()
    };
    let mut merged: Vec<PersonaCategory> = Vec::new();
    let mut rationales = Vec::new();
    for (batch, (cats, rationale)) in parts.into_iter().enumerate() {
        if !rationale.trim().is_empty() {
            rationales.push(format!("[batch {}] {}", batch + 1, rationale.trim()));
        }
        for cat in cats {
            let key = normalize(&cat.name);
            match merged.iter_mut().find(|m| normalize(&m.name) == key) {
                None => merged.push(cat),
                Some(existing) => {
                    if existing.description != cat.description && !cat.description.is_empty() {
                        report.conflicts.push(format!(
                            "{}: description differs in batch {}; kept the first",
                            existing.name,
                            batch + 1
                        ));
                    }
                    for f in cat.features {
                        match existing.features.iter_mut().find(|e| e.token == f.token) {
                            None => existing.features.push(f),
                            Some(e) if e.weight != f.weight => {
                                report.conflicts.push(format!(
                                    "{}: feature {:?} weight {} vs {} in batch {}; kept {}",
                                    existing.name,
                                    f.token,
                                    e.weight,
                                    f.weight,
                                    batch + 1,
                                    e.weight.max(f.weight)
                                ));
                                e.weight = e.weight.max(f.weight);
                            }
                            Some(_) => {}
                        }
                    }
                }
            }
        }
    }
    (merged, rationales.join("\n"), report)
}

/// Splits a sample into batches of `batch_size` posts, extracts each and
/// merges the results into one round-0 draft.
pub fn extract_batched(
    client: &dyn LlmClient,
    sample: &PostCollection,
    template: &CostarTemplate,
    batch_size: usize,
    retries: u32,
) -> Result<(TaxonomyDraft, MergeReport), ExtractionError> {
    if sample.is_empty() {
        return Err(ExtractionError::EmptyPayload);
    }
    let batch_size = batch_size.max(1);
    if sample.len() <= batch_size {
        let draft = extract_features(client, &build_prompt(sample, template)?, retries)?;
        return Ok((
            draft,
            MergeReport {
                batches: 1,
                conflicts: Vec::new(),
            },
        ));
    }
    let mut parts = Vec::new();
    for chunk in sample.posts.chunks(batch_size) {
        let batch = PostCollection {
            label: sample.label,
            posts: chunk.to_vec(),
        };
        let prompt = build_prompt(&batch, template)?;
        let raw = call_with_retries(client, &prompt.render(), retries)?;
        parts.push(parse_taxonomy(&raw)?);
    }
    let (categories, rationale, report) = merge_taxonomies(parts);
    let draft = TaxonomyDraft::root(categories, rationale, Provenance::LlmGenerated)?;
    Ok((draft, report))
}

/// All drafts ever produced, keyed by id. Insertion never overwrites.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DraftHistory {
    drafts: BTreeMap<String, TaxonomyDraft>,
}

impl DraftHistory {
    pub fn insert(&mut self, draft: TaxonomyDraft) -> Result<(), ExtractionError> {
        match self.drafts.get(&draft.draft_id) {
            Some(existing) if *existing != draft => Err(ExtractionError::DraftConflict(draft.draft_id)),
            Some(_) => Ok(()),
            None => {
                self.drafts.insert(draft.draft_id.clone(), draft);
                Ok(())
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<&TaxonomyDraft> {
        self.drafts.get(id)
    }

    pub fn len(&self) -> usize {
        self.drafts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drafts.is_empty()
    }

    /// Ancestors from the root down to `id`.
    pub fn lineage(&self, id: &str) -> Vec<&TaxonomyDraft> {
        let mut chain = Vec::new();
        let mut cur = self.drafts.get(id);
        while let Some(d) = cur {
            chain.push(d);
            cur = d.parent_id.as_deref().and_then(|p| self.drafts.get(p));
        }
        chain.reverse();
        chain
    }

    pub fn children(&self, id: &str) -> Vec<&TaxonomyDraft> {
        self.drafts
            .values()
            .filter(|d| d.parent_id.as_deref() == Some(id))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Post;
    use proptest::prelude::*;

    fn template() -> CostarTemplate {
        CostarTemplate {
            context: "Posts about bedtime routines.".into(),
            objective: "Group authors into personas.".into(),
            style: "Analytical.".into(),
            tone: "Neutral.".into(),
            audience: "Product designers.".into(),
            response: "A taxonomy.".into(),
        }
    }

    fn collection(texts: &[&str]) -> PostCollection {
        PostCollection::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Post {
                    post_id: format!("p{i}"),
                    user_id: "u".into(),
                    text: t.to_string(),
                    timestamp: i as u64,
                    likes: None,
                    comments: None,
                    profile_tags: vec![],
                })
                .collect(),
        )
    }

    pub(crate) const FIVE: &str = r#"{"categories": [
 {"name": "Health Aficionados", "description": "wellness", "features": [{"token": "Meditation", "weight": 2}, "yoga"]},
 {"name": "Night Owls", "description": "late nights", "features": ["gaming", "movie:0.5"]},
 {"name": "Interior Decorators", "description": "aesthetics", "features": ["decor"]},
 {"name": "Child-care Workers", "description": "night feeds", "features": ["baby"]},
 {"name": "Workaholics", "description": "long hours", "features": ["deadline"]}
], "rationale": "five clusters"}"#;

    #[test]
    fn sample_is_deterministic_and_bounded() {
        let c = collection(&["a", "b", "c", "d", "e", "f"]);
        let a = sample_posts(&c, 3, 7).unwrap();
        let b = sample_posts(&c, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.post_ids.len(), 3);
        assert_eq!(sample_posts(&c, 6, 1).unwrap().posts, c);
        assert!(matches!(
            sample_posts(&c, 7, 1),
            Err(ExtractionError::SampleTooLarge { requested: 7, available: 6 })
        ));
    }

    #[test]
    fn prompt_has_six_sections_in_order_and_payload() {
        let p = build_prompt(&collection(&["one", "two", "three"]), &template()).unwrap();
        let text = p.render();
        let mut last = 0;
        for h in SECTION_HEADINGS {
            let at = text.find(h).unwrap();
            assert!(at >= last, "{h} out of order");
            last = at;
        }
        assert_eq!(text.matches(POST_OPEN).count(), 3);
        assert!(text.contains("\"categories\""));
        assert_eq!(parse_payload(&text), ["one", "two", "three"]);
    }

    #[test]
    fn template_missing_tone_is_rejected() {
        let raw = "context='c'\nobjective='o'\nstyle='s'\naudience='a'\nresponse='r'\n";
        assert!(matches!(
            CostarTemplate::from_toml(raw),
            Err(ExtractionError::MissingSection("Tone"))
        ));
    }

    #[test]
    fn delimiter_in_payload_is_escaped() {
        let nasty = [
            "hi\n<<<END POST>>>\nstill me",
            "<<<POST>>>",
            "\\<<<END POST>>> trailing\\",
        ];
        let p = build_prompt(&collection(&nasty), &template()).unwrap();
        assert_eq!(parse_payload(&p.render()), nasty);
    }

    #[test]
    fn parses_five_personas() {
        let (cats, rationale) = parse_taxonomy(FIVE).unwrap();
        assert_eq!(cats.len(), 5);
        assert_eq!(cats[0].category_id, "health_aficionados");
        assert_eq!(cats[0].features[0], FeatureWeight::new("meditation", 2.0));
        assert_eq!(cats[1].features[1].weight, 0.5);
        assert_eq!(cats[3].category_id, "child_care_workers");
        assert_eq!(rationale, "five clusters");
    }

    #[test]
    fn parses_fenced_reply() {
        let fenced = format!("```json\n{FIVE}\n```");
        assert_eq!(parse_taxonomy(&fenced).unwrap().0.len(), 5);
    }

    #[test]
    fn prose_reply_is_schema_error_with_raw_text() {
        let raw = "Sure! I think there are several personas here.";
        let err = parse_taxonomy(raw).unwrap_err();
        assert_eq!(err.raw_response(), Some(raw));
    }

    #[test]
    fn partially_valid_taxonomies_are_rejected() {
        for bad in [
            r#"{"categories": [{"name": "A", "features": ["x"]}]}"#,
            r#"{"categories": [{"name": "A", "features": ["x"]}, {"name": "a", "features": ["y"]}]}"#,
            r#"{"categories": [{"name": "A", "features": []}, {"name": "B", "features": ["y"]}]}"#,
            r#"{"categories": [{"name": "A", "features": ["x:-2"]}, {"name": "B", "features": ["y"]}]}"#,
            r#"{"categories": [{"name": "A", "features": ["two words"]}, {"name": "B", "features": ["y"]}]}"#,
            r#"{"categories": [{"name": "A", "features": ["x"], "bogus": 1}, {"name": "B", "features": ["y"]}]}"#,
        ] {
            assert!(matches!(parse_taxonomy(bad), Err(ExtractionError::Schema { .. })), "{bad}");
        }
    }

    #[test]
    fn extract_with_mock() {
        let client = MockClient::fixed(FIVE);
        let prompt = build_prompt(&collection(&["a"]), &template()).unwrap();
        let draft = extract_features(&client, &prompt, 2).unwrap();
        assert_eq!(draft.categories.len(), 5);
        assert_eq!(draft.round, 0);
        assert_eq!(draft.provenance, Provenance::LlmGenerated);
        assert_eq!(draft, extract_features(&client, &prompt, 2).unwrap());
    }

    #[test]
    fn mock_prefers_digest_match() {
        let prompt = build_prompt(&collection(&["a"]), &template()).unwrap();
        let client = MockClient::fixed("not json").with_response(prompt.digest(), FIVE);
        assert!(extract_features(&client, &prompt, 0).is_ok());
    }

    #[test]
    fn transport_failure_retries_then_gives_up() {
        let client = MockClient::unreachable();
        let prompt = build_prompt(&collection(&["a"]), &template()).unwrap();
        match extract_features(&client, &prompt, 2) {
            Err(ExtractionError::Transport { attempts, last }) => {
                assert_eq!(attempts, 3);
                assert_eq!(last, TransportError::Timeout);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(client.calls(), 3);

        let flaky = MockClient::fixed(FIVE).failing_first(2);
        assert!(extract_features(&flaky, &prompt, 2).is_ok());
        assert_eq!(flaky.calls(), 3);
    }

    #[test]
    fn refine_builds_history() {
        let client = MockClient::fixed(FIVE);
        let prompt = build_prompt(&collection(&["a"]), &template()).unwrap();
        let root = extract_features(&client, &prompt, 0).unwrap();
        let r1 = refine(&client, &root, "counter-example: shift workers", 0).unwrap();
        let r2 = refine(&client, &r1, "what about students?", 0).unwrap();
        assert_eq!((root.round, r1.round, r2.round), (0, 1, 2));
        assert_eq!(r1.parent_id.as_deref(), Some(root.draft_id.as_str()));
        // unchanged content, distinct identity
        assert_eq!(r1.categories, root.categories);
        assert_ne!(r1.draft_id, root.draft_id);

        let mut history = DraftHistory::default();
        for d in [&root, &r1, &r2] {
            history.insert(d.clone()).unwrap();
        }
        let chain: Vec<u32> = history.lineage(&r2.draft_id).iter().map(|d| d.round).collect();
        assert_eq!(chain, [0, 1, 2]);
        assert_eq!(history.children(&root.draft_id).len(), 1);
        assert!(matches!(refine(&client, &root, "  ", 0), Err(ExtractionError::EmptyChallenge)));
    }

    #[test]
    fn history_never_overwrites() {
        let (cats, _) = parse_taxonomy(FIVE).unwrap();
        let d = TaxonomyDraft::root(cats, "r".into(), Provenance::LlmGenerated).unwrap();
        let mut h = DraftHistory::default();
        h.insert(d.clone()).unwrap();
        h.insert(d.clone()).unwrap();
        let mut tampered = d.clone();
        tampered.rationale = "edited".into();
        assert!(matches!(h.insert(tampered), Err(ExtractionError::DraftConflict(_))));
    }

    #[test]
    fn batched_extraction_merges_by_name() {
        let second = r#"{"categories": [
 {"name": "night owls", "description": "other", "features": ["gaming:3", "anime"]},
 {"name": "Students", "features": ["exam"]}
], "rationale": "b"}"#;
        let sample = collection(&["a", "b", "c"]);
        let t = template();
        let first_prompt = build_prompt(&collection(&["a", "b"]), &t).unwrap();
        let mut second_batch = collection(&["c"]);
        second_batch.posts[0].post_id = "p2".into();
        let second_prompt = build_prompt(&second_batch, &t).unwrap();
        let client = MockClient::default()
            .with_response(first_prompt.digest(), FIVE)
            .with_response(second_prompt.digest(), second);
        let (draft, report) = extract_batched(&client, &sample, &t, 2, 0).unwrap();
        assert_eq!(report.batches, 2);
        assert_eq!(draft.categories.len(), 6);
        let owls = draft.categories.iter().find(|c| c.category_id == "night_owls").unwrap();
        assert_eq!(owls.features.len(), 3);
        assert_eq!(owls.features[0].weight, 3.0);
        assert_eq!(report.conflicts.len(), 2);
    }

    #[test]
    fn client_config_requires_endpoint_unless_mocked() {
        let cfg = LlmClientConfig {
            mock_mode: false,
            ..Default::default()
        };
        assert!(matches!(cfg.build(), Err(ExtractionError::ClientConfig(_))));
        let mock_without_dir = LlmClientConfig::default();
        assert!(mock_without_dir.build().is_err());
    }

    #[test]
    fn slug_examples() {
        assert_eq!(slug("Child-care Workers"), "child_care_workers");
        assert_eq!(slug("  Night  Owls! "), "night_owls");
    }

    proptest! {
        #[test]
        fn payload_round_trips(posts in prop::collection::vec("(\\\\|<<<|POST|>>>|END|\n| |[a-z])*", 1..6)) {
            let p = CostarPrompt {
                context: "c".into(), objective: "o".into(), style: "s".into(),
                tone: "t".into(), audience: "a".into(), response_format: "r".into(),
                payload: posts.clone(),
            };
            prop_assert_eq!(parse_payload(&p.render()), posts);
        }
    }
}

//! End-to-end orchestration over a [`Store`].
//!
//! A run moves forward through `Ingest -> Collect -> Extract -> Validate ->
//! Classify -> Evaluate -> Done`. `PipelineRun::phase` is the next phase to
//! execute. Each phase reads its inputs from artifacts registered by earlier
//! phases, so a run can be resumed after a crash by re-running its current
//! phase. Re-running a finished phase registers new artifact versions and
//! keeps the old ones.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::classifier::{
    ClassificationResult, Classifier, ClassifierError, PartitionSummary, PersonaCategory,
    RecycleQueue, ThresholdPolicy, TokenFeatureStrategy, DEFAULT_MAX_RECYCLE_ROUNDS,
    DEFAULT_THRESHOLD,
};
use crate::corpus::{
    clean, corpus_stats, dedup_users, expand_user_posts, filter_relevant, load_lexicon, load_posts,
    read_posts, CleaningConfig, CleaningReport, CorpusError, CorpusStats, ExpandReport, InputFormat,
    KeywordFramework, LoadReport, MatchMode, PostCollection, StatsComparison, StatsOptions, UserSet,
};
use crate::embedding::{EmbeddingError, EmbeddingStore};
use crate::extraction::{
    extract_batched, refine, sample_posts, CostarTemplate, ExtractionError, LlmClient,
    LlmClientConfig, MergeReport, TaxonomyDraft,
};
use crate::metrics::{AgreementReport, ConfusionMatrix, MetricsError};
use crate::store::{content_id, ArtifactKind, Store, StoreError};
use crate::textproc::{normalize, SegmenterDictionary, StopwordSet, TextError, TextPipeline, TokenizerMode};
use crate::validation::{BoardState, ReviewBoard, ReviewDecision, ReviewError, ReviewEvent, ReviewItem, Stage};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("gate: {0}")]
    Gate(String),
    #[error("ambiguous: {0}")]
    Ambiguous(String),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    /// Stable short name used in CLI error lines and API error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::NotFound(_) | PipelineError::Store(StoreError::NotFound(_)) => "not_found",
            PipelineError::Gate(_) => "gate",
            PipelineError::Ambiguous(_) => "ambiguous",
            PipelineError::Review(ReviewError::Conflict { .. }) => "conflict",
            PipelineError::Review(ReviewError::UnknownItem(_)) => "not_found",
            PipelineError::Review(ReviewError::InvalidTransition { .. }) => "invalid_state",
            PipelineError::Review(_) => "validation",
            PipelineError::Store(StoreError::Locked { .. }) => "locked",
            PipelineError::Store(_) => "store",
            PipelineError::Corpus(_) => "corpus",
            PipelineError::Text(_) => "text",
            PipelineError::Embedding(_) => "embedding",
            PipelineError::Classifier(_) => "classifier",
            PipelineError::Extraction(ExtractionError::Schema { .. }) => "schema",
            PipelineError::Extraction(ExtractionError::Transport { .. }) => "transport",
            PipelineError::Extraction(_) => "extraction",
            PipelineError::Metrics(_) => "metrics",
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub posts: PathBuf,
    pub keywords: PathBuf,
    #[serde(default)]
    pub match_mode: Option<MatchMode>,
    #[serde(default)]
    pub cleaning: Option<PathBuf>,
    pub emotion_lexicon: PathBuf,
    #[serde(default = "default_k")]
    pub expand_k: usize,
}

fn default_k() -> usize {
    20
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextSection {
    #[serde(default = "default_mode")]
    pub mode: TokenizerMode,
    #[serde(default)]
    pub stopwords: Option<PathBuf>,
    #[serde(default)]
    pub dictionary: Option<PathBuf>,
    #[serde(default)]
    pub dedup_tokens: bool,
}

fn default_mode() -> TokenizerMode {
    TokenizerMode::Whitespace
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionSection {
    pub template: PathBuf,
    #[serde(default = "default_sample")]
    pub sample_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_sample")]
    pub batch_size: usize,
}

fn default_sample() -> usize {
    300
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewSection {
    #[serde(default = "default_quorum")]
    pub quorum: u32,
}

fn default_quorum() -> u32 {
    1
}

impl Default for ReviewSection {
    fn default() -> Self {
        Self { quorum: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_rounds")]
    pub max_recycle_rounds: u32,
    #[serde(default)]
    pub strategy: TokenFeatureStrategy,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_rounds() -> u32 {
    DEFAULT_MAX_RECYCLE_ROUNDS
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            max_recycle_rounds: DEFAULT_MAX_RECYCLE_ROUNDS,
            strategy: TokenFeatureStrategy::MaxToken,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    /// Line-delimited `{"post_id", "label"}` records from expert annotation.
    #[serde(default)]
    pub gold: Option<PathBuf>,
}

/// One TOML file configuring every phase. Relative paths are resolved
/// against the file's directory at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusSection,
    #[serde(default)]
    pub text: TextSection,
    pub embedding: EmbeddingSection,
    pub extraction: ExtractionSection,
    #[serde(default)]
    pub llm: LlmClientConfig,
    #[serde(default)]
    pub review: ReviewSection,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

impl PipelineConfig {
    pub fn from_toml(raw: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(raw).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .map(|p| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()))
            .unwrap_or_default();
        Self::from_toml(&raw, &base)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.posts);
        fix(&mut self.corpus.keywords);
        fix(&mut self.corpus.emotion_lexicon);
        self.corpus.cleaning.as_mut().map(fix);
        self.text.stopwords.as_mut().map(fix);
        self.text.dictionary.as_mut().map(fix);
        fix(&mut self.embedding.path);
        fix(&mut self.extraction.template);
        self.llm.mock_dir.as_mut().map(fix);
        self.evaluation.gold.as_mut().map(fix);
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.expand_k == 0 {
            return Err(PipelineError::Config("corpus.expand_k must be at least 1".into()));
        }
        if self.extraction.sample_size == 0 || self.extraction.batch_size == 0 {
            return Err(PipelineError::Config(
                "extraction.sample_size and batch_size must be positive".into(),
            ));
        }
        if self.review.quorum == 0 {
            return Err(PipelineError::Config("review.quorum must be at least 1".into()));
        }
        if self.text.mode == TokenizerMode::ForwardMaxMatch && self.text.dictionary.is_none() {
            return Err(PipelineError::Config(
                "text.dictionary is required for forward_max_match".into(),
            ));
        }
        if !self.llm.mock_mode && self.llm.endpoint.is_none() {
            return Err(PipelineError::Config("llm.endpoint is required unless mock_mode".into()));
        }
        self.policy(None).validate()?;
        Ok(())
    }

    pub fn policy(&self, threshold: Option<f64>) -> ThresholdPolicy {
        ThresholdPolicy {
            threshold: threshold.unwrap_or(self.classifier.threshold),
            max_recycle_rounds: self.classifier.max_recycle_rounds,
            strategy: self.classifier.strategy,
        }
    }

    pub fn text_pipeline(&self) -> Result<TextPipeline> {
        let stopwords = match &self.text.stopwords {
            Some(p) => StopwordSet::load(p)?,
            None => StopwordSet::default(),
        };
        let dict = self.text.dictionary.as_ref().map(SegmenterDictionary::load).transpose()?;
        Ok(TextPipeline::new(self.text.mode, dict, stopwords, self.text.dedup_tokens)?)
    }

    pub fn keyword_framework(&self) -> Result<KeywordFramework> {
        let fw = KeywordFramework::load(&self.corpus.keywords)?;
        Ok(match self.corpus.match_mode {
            Some(m) => fw.with_mode(m),
            None => fw,
        })
    }

    pub fn cleaning(&self) -> Result<CleaningConfig> {
        Ok(match &self.corpus.cleaning {
            Some(p) => CleaningConfig::load(p)?,
            None => CleaningConfig::default(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ingest,
    Collect,
    Extract,
    Validate,
    Classify,
    Evaluate,
    Done,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::Ingest,
        Phase::Collect,
        Phase::Extract,
        Phase::Validate,
        Phase::Classify,
        Phase::Evaluate,
        Phase::Done,
    ];

    pub fn next(self) -> Phase {
        Phase::ALL
            .iter()
            .copied()
            .find(|p| *p > self)
            .unwrap_or(Phase::Done)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Ingest => "ingest",
            Phase::Collect => "collect",
            Phase::Extract => "extract",
            Phase::Validate => "validate",
            Phase::Classify => "classify",
            Phase::Evaluate => "evaluate",
            Phase::Done => "done",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| PipelineError::Config(format!("unknown phase {s:?}")))
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub phase: Phase,
    /// 1 for the first write of `name` in this run, incremented on reruns.
    pub version: u32,
    /// Path relative to the store root.
    pub path: String,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub run_id: String,
    /// Next phase to execute; `Done` when finished.
    pub phase: Phase,
    pub config_snapshot: PipelineConfig,
    /// Dataset label (raw, D1, D1-1, D2-1) to store path.
    pub dataset_refs: BTreeMap<String, String>,
    pub artifacts: Vec<ArtifactRecord>,
    #[serde(default)]
    pub current_draft: Option<String>,
    #[serde(default)]
    pub approved_draft: Option<String>,
    /// Set while a phase is executing.
    #[serde(default)]
    pub running: Option<Phase>,
    #[serde(default)]
    pub last_error: Option<String>,
    /// Seconds since the Unix epoch (UTC).
    pub created_at: u64,
    pub updated_at: u64,
}

impl PipelineRun {
    pub fn latest(&self, name: &str) -> Option<&ArtifactRecord> {
        self.artifacts.iter().rev().find(|a| a.name == name)
    }

    fn register(&mut self, name: &str, phase: Phase, path: String) {
        let version = self.artifacts.iter().filter(|a| a.name == name).count() as u32 + 1;
        self.artifacts.push(ArtifactRecord {
            name: name.to_string(),
            phase,
            version,
            path,
            created_at: now_unix(),
        });
    }

    fn require(&self, name: &str) -> Result<&ArtifactRecord> {
        self.latest(name)
            .ok_or_else(|| PipelineError::NotFound(format!("artifact {name} in run {}", self.run_id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectReport {
    pub d1_posts: usize,
    pub d1_1_users: usize,
    pub expand: ExpandReport,
    pub cleaning: CleaningReport,
    pub stats_d1: CorpusStats,
    pub stats_d2_1: CorpusStats,
    pub comparison: StatsComparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub seed: u64,
    pub sample_post_ids: Vec<String>,
    pub draft_id: String,
    pub merge: MergeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub draft_id: String,
    pub policy: ThresholdPolicy,
    pub summary: PartitionSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub run_id: String,
    pub draft_id: String,
    pub gold_records: usize,
    /// Gold posts with an assigned prediction; these make up the matrix.
    pub evaluated: usize,
    /// Gold posts the classifier left below threshold.
    pub unclassified_gold: usize,
    /// Gold posts absent from the classified corpus.
    pub missing_gold: usize,
    /// Gold records whose label matches no category.
    pub unknown_gold_labels: usize,
    pub agreement: AgreementReport,
    pub table: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub post_id: String,
    pub label: String,
}

/// Reads `{"post_id", "label"}` lines. Classification result lines are also
/// accepted; unassigned results are skipped.
pub fn read_labels<R: BufRead>(reader: R) -> Result<Vec<LabelRecord>> {
    #[derive(Deserialize)]
    struct Line {
        post_id: String,
        #[serde(default)]
        label: Option<String>,
        #[serde(default)]
        assigned: Option<String>,
    }
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| PipelineError::Config(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(&line)
            .map_err(|e| PipelineError::Config(format!("label line {}: {e}", i + 1)))?;
        if let Some(label) = rec.label.or(rec.assigned) {
            out.push(LabelRecord {
                post_id: rec.post_id,
                label,
            });
        }
    }
    Ok(out)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    read_labels(std::io::BufReader::new(f))
}

/// Pairs gold and predicted labels by post id (gold order) and builds the
/// agreement report over the pairs present in both.
pub fn evaluate_labels(gold: &[LabelRecord], pred: &[LabelRecord], labels: &[String]) -> Result<AgreementReport> {
    let pred: HashMap<&str, &str> = pred.iter().map(|r| (r.post_id.as_str(), r.label.as_str())).collect();
    let (g, p): (Vec<&str>, Vec<&str>) = gold
        .iter()
        .filter_map(|r| pred.get(r.post_id.as_str()).map(|p| (r.label.as_str(), *p)))
        .unzip();
    Ok(AgreementReport::from_labels(&g, &p, labels)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub run_id: String,
    pub item: ReviewItem,
    /// The category under review; `None` for taxonomy-level items.
    pub category: Option<PersonaCategory>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportReport {
    pub applied: usize,
    pub errors: Vec<(usize, String)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseOptions {
    /// Overrides the configured threshold for Classify.
    pub threshold: Option<f64>,
}

/// Runs phases and review operations against a store. Mutations of one run
/// are serialized; different runs proceed independently.
pub struct Pipeline {
    store: Store,
    client: Option<Arc<dyn LlmClient>>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn run_path(run_id: &str) -> String {
    format!("runs/{run_id}.json")
}

fn review_path(run_id: &str) -> String {
    format!("reviews/{run_id}.json")
}

fn draft_path(draft_id: &str) -> String {
    format!("taxonomies/{draft_id}.json")
}

impl Pipeline {
    pub fn new(store: Store) -> Self {
        Self {
            store,
            client: None,
            locks: Mutex::new(HashMap::new()),
        }
    }

    /// Uses `client` for every LLM call instead of the run's configured client.
    pub fn with_client(mut self, client: Arc<dyn LlmClient>) -> Self {
        self.client = Some(client);
        self
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn run_lock(&self, run_id: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .expect("lock map poisoned")
            .entry(run_id.to_string())
            .or_default()
            .clone()
    }

    fn client_for(&self, cfg: &PipelineConfig) -> Result<Arc<dyn LlmClient>> {
        match &self.client {
            Some(c) => Ok(c.clone()),
            None => Ok(Arc::from(cfg.llm.build()?)),
        }
    }

    pub fn create_run(&self, config: PipelineConfig) -> Result<PipelineRun> {
        config.validate()?;
        let now = now_unix();
        let nanos = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        let seed = format!(
            "{}|{nanos}|{}",
            serde_json::to_string(&config).expect("config serializes"),
            std::process::id()
        );
        let run = PipelineRun {
            run_id: format!("run-{}", &content_id(seed.as_bytes())[..12]),
            phase: Phase::Ingest,
            config_snapshot: config,
            dataset_refs: BTreeMap::new(),
            artifacts: Vec::new(),
            current_draft: None,
            approved_draft: None,
            running: None,
            last_error: None,
            created_at: now,
            updated_at: now,
        };
        self.store.write_record(&run_path(&run.run_id), &run)?;
        Ok(run)
    }

    pub fn load_run(&self, run_id: &str) -> Result<PipelineRun> {
        match self.store.read_json(&run_path(run_id)) {
            Err(StoreError::NotFound(_)) => Err(PipelineError::NotFound(format!("run {run_id}"))),
            other => Ok(other?),
        }
    }

    fn save_run(&self, run: &mut PipelineRun) -> Result<()> {
        run.updated_at = now_unix();
        self.store.write_record(&run_path(&run.run_id), run)?;
        Ok(())
    }

    /// Run ids, oldest first.
    pub fn list_runs(&self) -> Result<Vec<PipelineRun>> {
        let mut runs = self
            .store
            .list("runs", "json")?
            .iter()
            .map(|id| self.load_run(id))
            .collect::<Result<Vec<_>>>()?;
        runs.sort_by(|a, b| (a.created_at, &a.run_id).cmp(&(b.created_at, &b.run_id)));
        Ok(runs)
    }

    /// Executes `phase` (default: the run's next phase). Earlier phases may be
    /// re-run; later ones are refused until their predecessors complete.
    pub fn run_phase(&self, run_id: &str, phase: Option<Phase>, opts: PhaseOptions) -> Result<PipelineRun> {
        let lock = self.run_lock(run_id);
        let _guard = lock.lock().expect("run lock poisoned");
        let mut run = self.load_run(run_id)?;
        let target = phase.unwrap_or(run.phase);
        if target == Phase::Done {
            return Err(PipelineError::Gate(format!("run {run_id} is already done")));
        }
        if target > run.phase {
            return Err(PipelineError::Gate(if target == Phase::Classify && run.phase == Phase::Validate {
                "classification requires an approved taxonomy".to_string()
            } else {
                format!("{target} requires {} to complete first", run.phase)
            }));
        }
        if target == Phase::Validate && run.current_draft.is_none() {
            return Err(PipelineError::Gate("no taxonomy draft to validate".into()));
        }
        if target >= Phase::Classify && run.approved_draft.is_none() {
            return Err(PipelineError::Gate("classification requires an approved taxonomy".into()));
        }

        run.running = Some(target);
        run.last_error = None;
        self.save_run(&mut run)?;
        let outcome = match target {
            Phase::Ingest => self.ingest(&mut run),
            Phase::Collect => self.collect(&mut run),
            Phase::Extract => self.extract(&mut run),
            Phase::Validate => self.validate(&mut run),
            Phase::Classify => self.classify(&mut run, opts),
            Phase::Evaluate => self.evaluate(&mut run),
            Phase::Done => unreachable!(),
        };
        run.running = None;
        match outcome {
            Ok(complete) => {
                if complete && target == run.phase {
                    run.phase = target.next();
                }
                self.save_run(&mut run)?;
                tracing::info!(run = %run.run_id, phase = %target, next = %run.phase, "phase finished");
                Ok(run)
            }
            Err(e) => {
                run.last_error = Some(format!("{target}: {e}"));
                self.save_run(&mut run)?;
                Err(e)
            }
        }
    }

    /// Runs phases until the run is done or stops making progress (awaiting review).
    pub fn advance(&self, run_id: &str) -> Result<PipelineRun> {
        let mut run = self.load_run(run_id)?;
        while run.phase != Phase::Done {
            let before = (run.phase, run.current_draft.clone());
            run = self.run_phase(run_id, None, PhaseOptions::default())?;
            if (run.phase, run.current_draft.clone()) == before {
                break;
            }
        }
        Ok(run)
    }

    fn put_json<T: Serialize>(&self, run: &mut PipelineRun, name: &str, phase: Phase, value: &T) -> Result<String> {
        let rel = self.store.put_json(ArtifactKind::Report, value)?;
        run.register(name, phase, rel.clone());
        Ok(rel)
    }

    fn put_corpus(&self, run: &mut PipelineRun, label: &str, phase: Phase, c: &PostCollection) -> Result<String> {
        let rel = self.store.put(ArtifactKind::Corpus, "jsonl", &c.to_jsonl())?;
        run.register(label, phase, rel.clone());
        run.dataset_refs.insert(label.to_string(), rel.clone());
        Ok(rel)
    }

    fn read_corpus(&self, run: &PipelineRun, label: &str) -> Result<PostCollection> {
        let rel = run
            .dataset_refs
            .get(label)
            .ok_or_else(|| PipelineError::NotFound(format!("dataset {label} in run {}", run.run_id)))?;
        let bytes = self.store.read(rel)?;
        let (mut c, report) = read_posts(bytes.as_slice(), InputFormat::Jsonl)
            .map_err(|e| StoreError::Corrupt { path: rel.clone(), message: e.to_string() })?;
        if !report.errors.is_empty() {
            return Err(StoreError::Corrupt {
                path: rel.clone(),
                message: format!("{} bad records", report.errors.len()),
            }
            .into());
        }
        c.label = match label {
            "D1" => Some(crate::corpus::DatasetLabel::D1),
            "D2-1" => Some(crate::corpus::DatasetLabel::D2_1),
            _ => None,
        };
        Ok(c)
    }

    fn ingest(&self, run: &mut PipelineRun) -> Result<bool> {
        let (posts, report): (PostCollection, LoadReport) =
            load_posts(&run.config_snapshot.corpus.posts, InputFormat::Jsonl)?;
        if !report.errors.is_empty() {
            tracing::warn!(bad = report.errors.len(), "skipped malformed post records");
        }
        if posts.is_empty() {
            return Err(CorpusError::EmptyCollection.into());
        }
        self.put_corpus(run, "raw", Phase::Ingest, &posts)?;
        self.put_json(run, "ingest_report", Phase::Ingest, &report)?;
        Ok(true)
    }

    fn collect(&self, run: &mut PipelineRun) -> Result<bool> {
        let cfg = run.config_snapshot.clone();
        let raw = self.read_corpus(run, "raw")?;
        let fw = cfg.keyword_framework()?;
        let d1 = filter_relevant(&raw, &fw);
        let users: UserSet = dedup_users(&d1);
        let (d2, expand) = expand_user_posts(&raw, &users, cfg.corpus.expand_k)?;
        let (d21, cleaning) = clean(&d2, &cfg.cleaning()?);
        if d21.is_empty() {
            return Err(CorpusError::EmptyCollection.into());
        }
        let lexicon = load_lexicon(&cfg.corpus.emotion_lexicon)?;
        let stats_d1 = corpus_stats(&d1, &lexicon, &fw, StatsOptions::default())?;
        let stats_d2_1 = corpus_stats(&d21, &lexicon, &fw, StatsOptions::default())?;

        self.put_corpus(run, "D1", Phase::Collect, &d1)?;
        let users_rel = self.store.put_json(ArtifactKind::Corpus, &users)?;
        run.register("D1-1", Phase::Collect, users_rel.clone());
        run.dataset_refs.insert("D1-1".into(), users_rel);
        self.put_corpus(run, "D2-1", Phase::Collect, &d21)?;
        let report = CollectReport {
            d1_posts: d1.len(),
            d1_1_users: users.len(),
            expand,
            cleaning,
            comparison: StatsComparison::between(&stats_d1, &stats_d2_1),
            stats_d1,
            stats_d2_1,
        };
        self.put_json(run, "collect_report", Phase::Collect, &report)?;
        Ok(true)
    }

    fn save_draft(&self, draft: &TaxonomyDraft) -> Result<String> {
        Ok(self.store.put_named(
            ArtifactKind::Taxonomy,
            &format!("{}.json", draft.draft_id),
            draft.to_json_pretty().as_bytes(),
        )?)
    }

    pub fn load_draft(&self, draft_id: &str) -> Result<TaxonomyDraft> {
        match self.store.read_json(&draft_path(draft_id)) {
            Err(StoreError::NotFound(_)) => Err(PipelineError::NotFound(format!("taxonomy {draft_id}"))),
            other => Ok(other?),
        }
    }

    fn extract(&self, run: &mut PipelineRun) -> Result<bool> {
        let cfg = run.config_snapshot.clone();
        let d21 = self.read_corpus(run, "D2-1")?;
        let sample = sample_posts(&d21, cfg.extraction.sample_size, cfg.extraction.seed)?;
        let template = CostarTemplate::load(&cfg.extraction.template)?;
        let client = self.client_for(&cfg)?;
        let (draft, merge) = match extract_batched(
            client.as_ref(),
            &sample.posts,
            &template,
            cfg.extraction.batch_size,
            cfg.llm.retries,
        ) {
            Ok(v) => v,
            Err(e) => {
                if let Some(raw) = e.raw_response() {
                    let rel = self.store.put(ArtifactKind::Report, "txt", raw.as_bytes())?;
                    run.register("rejected_response", Phase::Extract, rel);
                }
                return Err(e.into());
            }
        };
        let rel = self.save_draft(&draft)?;
        run.register("taxonomy", Phase::Extract, rel);
        self.put_json(
            run,
            "extract_report",
            Phase::Extract,
            &ExtractReport {
                seed: sample.seed,
                sample_post_ids: sample.post_ids,
                draft_id: draft.draft_id.clone(),
                merge,
            },
        )?;
        let now = now_unix();
        let mut board = ReviewBoard::open(&draft.draft_id, draft.category_ids(), cfg.review.quorum, now)?;
        board.submit(now)?;
        self.store.write_record(&review_path(&run.run_id), &board.events)?;
        run.current_draft = Some(draft.draft_id);
        run.approved_draft = None;
        Ok(true)
    }

    pub fn board(&self, run_id: &str) -> Result<ReviewBoard> {
        let events: Vec<ReviewEvent> = match self.store.read_json(&review_path(run_id)) {
            Err(StoreError::NotFound(_)) => {
                return Err(PipelineError::NotFound(format!("review board for run {run_id}")))
            }
            other => other?,
        };
        Ok(ReviewBoard::replay(&events)?)
    }

    fn validate(&self, run: &mut PipelineRun) -> Result<bool> {
        let mut board = self.board(&run.run_id)?;
        match board.state {
            BoardState::Approved => {
                run.approved_draft = Some(board.draft_id.clone());
                Ok(true)
            }
            BoardState::Draft => {
                board.submit(now_unix())?;
                self.store.write_record(&review_path(&run.run_id), &board.events)?;
                Ok(false)
            }
            BoardState::StructuralReview | BoardState::DomainReview => Ok(false),
            BoardState::Revising => {
                let current = self.load_draft(&board.draft_id)?;
                let revised = self.revise(&run.config_snapshot, &current, &board)?;
                let rel = self.save_draft(&revised)?;
                run.register("taxonomy", Phase::Validate, rel);
                board.resubmit(&revised.draft_id, revised.category_ids(), now_unix())?;
                self.store.write_record(&review_path(&run.run_id), &board.events)?;
                run.current_draft = Some(revised.draft_id);
                Ok(false)
            }
        }
    }

    /// Produces the next draft from the revision requests of the current round:
    /// a domain challenge goes to the LLM; otherwise weight edits are applied
    /// directly; otherwise reviewer comments are sent to the LLM as the challenge.
    fn revise(&self, cfg: &PipelineConfig, draft: &TaxonomyDraft, board: &ReviewBoard) -> Result<TaxonomyDraft> {
        let requests = board.revision_requests();
        if let Some(challenge) = requests.iter().find_map(|d| d.challenge.as_deref()) {
            let client = self.client_for(cfg)?;
            return Ok(refine(client.as_ref(), draft, challenge, cfg.llm.retries)?);
        }
        let mut categories = draft.categories.clone();
        let mut edited = Vec::new();
        for d in &requests {
            let Some(cat_id) = board.item(&d.item_id).and_then(|i| i.category_id.clone()) else {
                continue;
            };
            let Some(cat) = categories.iter_mut().find(|c| c.category_id == cat_id) else {
                continue;
            };
            for edit in &d.weight_edits {
                match cat.features.iter_mut().find(|f| f.token == edit.token) {
                    Some(f) => f.weight = edit.weight,
                    None => cat.features.push(edit.clone()),
                }
                edited.push(format!("{cat_id}.{}={}", edit.token, edit.weight));
            }
        }
        if !edited.is_empty() {
            let rationale = format!("{}\nexpert weight edits: {}", draft.rationale, edited.join(", "));
            return Ok(draft.expert_revision(categories, rationale)?);
        }
        let comments: Vec<&str> = requests.iter().map(|d| d.comment.trim()).collect();
        let client = self.client_for(cfg)?;
        Ok(refine(client.as_ref(), draft, &comments.join("\n"), cfg.llm.retries)?)
    }

    fn classify(&self, run: &mut PipelineRun, opts: PhaseOptions) -> Result<bool> {
        let cfg = run.config_snapshot.clone();
        let draft_id = run.approved_draft.clone().expect("gate checked");
        let draft = self.load_draft(&draft_id)?;
        let d21 = self.read_corpus(run, "D2-1")?;
        let (emb, warnings) = EmbeddingStore::load(&cfg.embedding.path)?;
        for w in &warnings {
            tracing::warn!(?w, "embedding load warning");
        }
        let text = cfg.text_pipeline()?;
        let policy = cfg.policy(opts.threshold);
        let classifier = Classifier::new(&emb, draft.categories.clone(), policy)?;
        let cc = classifier.classify_corpus(&d21, &text);
        let summary = cc.summary(&draft.categories);

        let mut lines = Vec::new();
        for r in &cc.results {
            serde_json::to_writer(&mut lines, r).expect("result serializes");
            lines.push(b'\n');
        }
        let rel = self.store.put(ArtifactKind::Report, "jsonl", &lines)?;
        run.register("classification", Phase::Classify, rel);
        self.put_json(run, "recycle_queue", Phase::Classify, &cc.queue)?;
        self.put_json(
            run,
            "classify_report",
            Phase::Classify,
            &ClassifyReport {
                draft_id,
                policy,
                summary,
            },
        )?;
        Ok(true)
    }

    pub fn classification(&self, run: &PipelineRun) -> Result<(Vec<ClassificationResult>, RecycleQueue)> {
        let bytes = self.store.read(&run.require("classification")?.path)?;
        let results = bytes
            .split(|b| *b == b'\n')
            .filter(|l| !l.is_empty())
            .map(serde_json::from_slice)
            .collect::<Result<Vec<ClassificationResult>, _>>()
            .map_err(|e| StoreError::Corrupt {
                path: "classification".into(),
                message: e.to_string(),
            })?;
        let queue = self.store.read_json(&run.require("recycle_queue")?.path)?;
        Ok((results, queue))
    }

    fn evaluate(&self, run: &mut PipelineRun) -> Result<bool> {
        let gold_path = run
            .config_snapshot
            .evaluation
            .gold
            .clone()
            .ok_or_else(|| PipelineError::Config("evaluation.gold is not set".into()))?;
        let gold = load_labels(gold_path)?;
        let draft_id = run.approved_draft.clone().expect("gate checked");
        let draft = self.load_draft(&draft_id)?;
        let labels = draft.category_ids();
        let by_name: HashMap<String, &str> = draft
            .categories
            .iter()
            .map(|c| (normalize(&c.name), c.category_id.as_str()))
            .collect();
        let (results, queue) = self.classification(run)?;
        let assigned: HashMap<&str, &str> = results
            .iter()
            .filter_map(|r| r.assigned.as_deref().map(|a| (r.post_id.as_str(), a)))
            .collect();
        let queued: std::collections::HashSet<&str> = queue
            .entries
            .iter()
            .chain(&queue.exhausted)
            .map(|e| e.post_id.as_str())
            .collect();

        let (mut unclassified, mut missing, mut unknown) = (0, 0, 0);
        let (mut g, mut p) = (Vec::new(), Vec::new());
        for rec in &gold {
            let label = if labels.contains(&rec.label) {
                rec.label.as_str()
            } else if let Some(id) = by_name.get(&normalize(&rec.label)) {
                id
            } else {
                unknown += 1;
                continue;
            };
            match assigned.get(rec.post_id.as_str()) {
                Some(pred) => {
                    g.push(label);
                    p.push(*pred);
                }
                None if queued.contains(rec.post_id.as_str()) => unclassified += 1,
                None => missing += 1,
            }
        }
        let mut agreement = AgreementReport::from_labels(&g, &p, &labels)?;
        if unclassified > 0 {
            agreement.notes.push(format!(
                "{unclassified} gold posts were below the similarity threshold and are excluded"
            ));
        }
        let report = EvaluationReport {
            run_id: run.run_id.clone(),
            draft_id,
            gold_records: gold.len(),
            evaluated: g.len(),
            unclassified_gold: unclassified,
            missing_gold: missing,
            unknown_gold_labels: unknown,
            table: agreement.render_table(),
            agreement,
        };
        self.put_json(run, "evaluation", Phase::Evaluate, &report)?;
        let rel = self.store.put(ArtifactKind::Report, "txt", report.table.as_bytes())?;
        run.register("evaluation_table", Phase::Evaluate, rel);
        Ok(true)
    }

    pub fn report(&self, run_id: &str) -> Result<EvaluationReport> {
        let run = self.load_run(run_id)?;
        let rec = run
            .latest("evaluation")
            .ok_or_else(|| PipelineError::NotFound(format!("evaluation report for run {run_id}")))?;
        Ok(self.store.read_json(&rec.path)?)
    }

    pub fn confusion(&self, run_id: &str) -> Result<ConfusionMatrix> {
        Ok(self.report(run_id)?.agreement.confusion)
    }

    /// Pending items across runs (or one run), optionally for one stage.
    pub fn queue(&self, run_id: Option<&str>, stage: Option<Stage>) -> Result<Vec<QueueEntry>> {
        let runs = match run_id {
            Some(id) => vec![self.load_run(id)?],
            None => self.list_runs()?,
        };
        let mut out = Vec::new();
        for run in runs {
            let board = match self.board(&run.run_id) {
                Ok(b) => b,
                Err(PipelineError::NotFound(_)) => continue,
                Err(e) => return Err(e),
            };
            let items = board.queue();
            if items.is_empty() {
                continue;
            }
            let draft = self.load_draft(&board.draft_id)?;
            for item in items {
                if stage.is_some_and(|s| s != item.stage) {
                    continue;
                }
                let category = item
                    .category_id
                    .as_ref()
                    .and_then(|id| draft.categories.iter().find(|c| &c.category_id == id))
                    .cloned();
                out.push(QueueEntry {
                    run_id: run.run_id.clone(),
                    item: item.clone(),
                    category,
                });
            }
        }
        Ok(out)
    }

    fn run_for_item(&self, item_id: &str) -> Result<String> {
        let mut owners = Vec::new();
        for run in self.list_runs()? {
            if let Ok(board) = self.board(&run.run_id) {
                if board.current_items().any(|i| i.item_id == item_id) {
                    owners.push(run.run_id);
                }
            }
        }
        match owners.len() {
            0 => Err(ReviewError::UnknownItem(item_id.to_string()).into()),
            1 => Ok(owners.pop().expect("one owner")),
            _ => Err(PipelineError::Ambiguous(format!(
                "item {item_id} is open in runs {}; pass run_id",
                owners.join(", ")
            ))),
        }
    }

    /// Records a decision and persists the event log before returning.
    pub fn decide(&self, run_id: Option<&str>, decision: ReviewDecision) -> Result<(String, ReviewBoard)> {
        let run_id = match run_id {
            Some(id) => id.to_string(),
            None => self.run_for_item(&decision.item_id)?,
        };
        let lock = self.run_lock(&run_id);
        let _guard = lock.lock().expect("run lock poisoned");
        let mut board = self.board(&run_id)?;
        board.decide(decision)?;
        self.store.write_record(&review_path(&run_id), &board.events)?;
        Ok((run_id, board))
    }

    /// Decisions of a run as line-delimited JSON, in the order they were made.
    pub fn export_decisions(&self, run_id: &str) -> Result<String> {
        let board = self.board(run_id)?;
        let mut out = String::new();
        for ev in &board.events {
            if let ReviewEvent::Decided(d) = ev {
                out.push_str(&serde_json::to_string(d).expect("decision serializes"));
                out.push('\n');
            }
        }
        Ok(out)
    }

    /// Applies line-delimited decisions in order; bad lines are reported and skipped.
    pub fn import_decisions(&self, run_id: &str, jsonl: &str) -> Result<ImportReport> {
        let lock = self.run_lock(run_id);
        let _guard = lock.lock().expect("run lock poisoned");
        let mut board = self.board(run_id)?;
        let mut report = ImportReport::default();
        for (i, line) in jsonl.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let outcome = serde_json::from_str::<ReviewDecision>(line)
                .map_err(|e| e.to_string())
                .and_then(|d| board.decide(d).map_err(|e| e.to_string()));
            match outcome {
                Ok(()) => report.applied += 1,
                Err(e) => report.errors.push((i + 1, e)),
            }
        }
        self.store.write_record(&review_path(run_id), &board.events)?;
        Ok(report)
    }
}

//! Weighted cosine scoring of posts against persona categories.
//!
//! For every category the per-feature similarities are combined into a
//! weighted mean; the post goes to the best-scoring category when that score
//! reaches the threshold and is queued for taxonomy refinement otherwise.
//!
//! How a whole post is compared with a single feature word is selectable:
//! [`TokenFeatureStrategy::MaxToken`] takes the best-matching post token,
//! [`TokenFeatureStrategy::MeanPostVector`] compares the centroid of the
//! post's token vectors.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PostCollection;
use crate::embedding::{cosine, norm, EmbeddingError, EmbeddingStore};
use crate::textproc::{TextPipeline, TokenSequence};

pub const DEFAULT_THRESHOLD: f64 = 0.35;
pub const DEFAULT_MAX_RECYCLE_ROUNDS: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("invalid category {category:?}: {reason}")]
    InvalidCategory { category: String, reason: String },
    #[error("feature {token:?} of category {category:?} is not in the embedding store")]
    OovFeature { category: String, token: String },
    #[error("at least one category is required")]
    NoCategories,
    #[error("duplicate category id {0:?}")]
    DuplicateCategory(String),
    #[error("invalid threshold policy: {0}")]
    InvalidPolicy(String),
    #[error("failed to read {path}: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Raised when a post has no in-vocabulary tokens to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("post has no in-vocabulary tokens")]
pub struct DegeneratePost;

#[derive(Debug, thiserror::Error)]
pub enum SimilarityError {
    #[error(transparent)]
    Degenerate(#[from] DegeneratePost),
    #[error("feature token {0:?} is not in the embedding store")]
    OovFeature(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub token: String,
    pub weight: f64,
}

impl FeatureWeight {
    pub fn new(token: impl Into<String>, weight: f64) -> Self {
        Self {
            token: token.into(),
            weight,
        }
    }

    /// Parses `token` or `token:weight`.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let spec = spec.trim();
        let (token, weight) = match spec.rsplit_once(':') {
            Some((t, w)) => (
                t.trim(),
                w.trim()
                    .parse::<f64>()
                    .map_err(|e| format!("bad weight in {spec:?}: {e}"))?,
            ),
            None => (spec, 1.0),
        };
        if token.is_empty() {
            return Err(format!("empty feature token in {spec:?}"));
        }
        Ok(Self::new(token, weight))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaCategory {
    pub category_id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub features: Vec<FeatureWeight>,
    #[serde(default)]
    pub demographic_note: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_share: Option<f64>,
}

impl PersonaCategory {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let invalid = |reason: String| ClassifierError::InvalidCategory {
            category: self.category_id.clone(),
            reason,
        };
        if self.category_id.trim().is_empty() {
            return Err(invalid("empty category id".into()));
        }
        if self.features.is_empty() {
            return Err(invalid("no features".into()));
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            if f.token.is_empty() {
                return Err(invalid("empty feature token".into()));
            }
            if !seen.insert(f.token.as_str()) {
                return Err(invalid(format!("duplicate feature {:?}", f.token)));
            }
            if !(f.weight.is_finite() && f.weight > 0.0) {
                return Err(invalid(format!(
                    "feature {:?} has non-positive weight {}",
                    f.token, f.weight
                )));
            }
        }
        if let Some(share) = self.expected_share {
            if !(0.0..=1.0).contains(&share) {
                return Err(invalid(format!("expected_share {share} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn weight_sum(&self) -> f64 {
        self.features.iter().map(|f| f.weight).sum()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CategoryFile {
    category: Vec<CategoryEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CategoryEntry {
    id: String,
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    demographic_note: String,
    expected_share: Option<f64>,
    features: Vec<String>,
}

/// Parses a category file: `[[category]]` tables with `id`, `name`,
/// `description`, `demographic_note`, `expected_share` and `features` given as
/// `"token:weight"` strings (weight defaults to 1).
pub fn parse_categories(raw: &str) -> Result<Vec<PersonaCategory>, ClassifierError> {
    let file: CategoryFile = toml::from_str(raw).map_err(|e| ClassifierError::Config {
        path: "<inline>".into(),
        message: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(file.category.len());
    for entry in file.category {
        let features = entry
            .features
            .iter()
            .map(|s| FeatureWeight::parse(s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|reason| ClassifierError::InvalidCategory {
                category: entry.id.clone(),
                reason,
            })?;
        let cat = PersonaCategory {
            category_id: entry.id,
            name: entry.name,
            description: entry.description,
            features,
            demographic_note: entry.demographic_note,
            expected_share: entry.expected_share,
        };
        cat.validate()?;
        out.push(cat);
    }
    check_unique_ids(&out)?;
    Ok(out)
}

pub fn load_categories(path: impl AsRef<Path>) -> Result<Vec<PersonaCategory>, ClassifierError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| ClassifierError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_categories(&raw).map_err(|e| match e {
        ClassifierError::Config { message, .. } => ClassifierError::Config {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

fn check_unique_ids(cats: &[PersonaCategory]) -> Result<(), ClassifierError> {
    let mut seen = HashSet::new();
    for c in cats {
        if !seen.insert(c.category_id.as_str()) {
            return Err(ClassifierError::DuplicateCategory(c.category_id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenFeatureStrategy {
    #[default]
    MaxToken,
    MeanPostVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub threshold: f64,
    pub max_recycle_rounds: u32,
    pub strategy: TokenFeatureStrategy,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            max_recycle_rounds: DEFAULT_MAX_RECYCLE_ROUNDS,
            strategy: TokenFeatureStrategy::MaxToken,
        }
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        // values above 1 are accepted so that "nothing passes" can be expressed
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(ClassifierError::InvalidPolicy(format!(
                "threshold {} must be a non-negative number",
                self.threshold
            )));
        }
        if self.max_recycle_rounds == 0 {
            return Err(ClassifierError::InvalidPolicy(
                "max_recycle_rounds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Similarity of a post to one feature word.
pub fn post_feature_similarity(
    tokens: &TokenSequence,
    feature: &FeatureWeight,
    store: &EmbeddingStore,
    strategy: TokenFeatureStrategy,
) -> Result<f64, SimilarityError> {
    let fv = store
        .lookup(&feature.token)
        .ok_or_else(|| SimilarityError::OovFeature(feature.token.clone()))?;
    let vectors: Vec<&[f32]> = tokens.iter().filter_map(|t| store.lookup(t)).collect();
    if vectors.is_empty() {
        return Err(DegeneratePost.into());
    }
    match strategy {
        TokenFeatureStrategy::MaxToken => {
            let mut best = f64::NEG_INFINITY;
            for v in vectors {
                match cosine(v, fv) {
                    Ok(s) => best = best.max(s),
                    // zero vectors carry no direction; skip them
                    Err(EmbeddingError::ZeroNorm) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            if best == f64::NEG_INFINITY {
                return Err(DegeneratePost.into());
            }
            Ok(best)
        }
        TokenFeatureStrategy::MeanPostVector => {
            let mean = mean_vector(&vectors, store.dimension());
            let fv: Vec<f64> = fv.iter().map(|x| *x as f64).collect();
            match (unit64(mean), unit64(fv)) {
                (Some(m), Some(f)) => Ok(unit_dot(&m, &f)),
                (None, Some(_)) => Err(DegeneratePost.into()),
                _ => Err(EmbeddingError::ZeroNorm.into()),
            }
        }
    }
}

/// Component-wise mean, kept in f64 so no precision is lost before the cosine.
fn mean_vector(vectors: &[&[f32]], dim: usize) -> Vec<f64> {
    let mut acc = vec![0f64; dim];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += *x as f64;
        }
    }
    let n = vectors.len() as f64;
    acc.into_iter().map(|a| a / n).collect()
}

/// Weighted mean of per-feature similarities.
pub fn score_category(
    tokens: &TokenSequence,
    cat: &PersonaCategory,
    store: &EmbeddingStore,
    strategy: TokenFeatureStrategy,
) -> Result<f64, SimilarityError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for f in &cat.features {
        num += post_feature_similarity(tokens, f, store, strategy)? * f.weight;
        den += f.weight;
    }
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub post_id: String,
    /// In category declaration order; empty for degenerate posts.
    pub scores: Vec<CategoryScore>,
    /// `None` means unclassified.
    pub assigned: Option<String>,
    pub oov_rate: f64,
    pub threshold_used: f64,
    #[serde(default)]
    pub degenerate: bool,
}

impl ClassificationResult {
    pub fn is_unclassified(&self) -> bool {
        self.assigned.is_none()
    }

    pub fn best_score(&self) -> Option<f64> {
        self.scores.iter().map(|s| s.score).reduce(f64::max)
    }

    pub fn score_of(&self, category_id: &str) -> Option<f64> {
        self.scores
            .iter()
            .find(|s| s.category_id == category_id)
            .map(|s| s.score)
    }
}

fn oov_rate(tokens: &TokenSequence, store: &EmbeddingStore) -> f64 {
    if tokens.is_empty() {
        return 1.0;
    }
    let oov = tokens.iter().filter(|t| !store.contains(t)).count();
    oov as f64 / tokens.len() as f64
}

/// Scores this close to the maximum count as tied. Mathematically equal
/// scores (e.g. two categories sharing their only feature) otherwise differ
/// in the last ulp depending on summation order.
pub const TIE_EPSILON: f64 = 1e-12;

/// Argmax over declared categories; earlier declarations win ties.
fn assign(scores: &[CategoryScore], threshold: f64) -> Option<String> {
    let max = scores.iter().map(|s| s.score).reduce(f64::max)?;
    scores
        .iter()
        .find(|s| s.score >= max - TIE_EPSILON)
        .filter(|b| b.score >= threshold)
        .map(|b| b.category_id.clone())
}

/// Scores one post against every category and applies the threshold.
pub fn classify(
    post_id: &str,
    tokens: &TokenSequence,
    cats: &[PersonaCategory],
    policy: &ThresholdPolicy,
    store: &EmbeddingStore,
) -> Result<ClassificationResult, ClassifierError> {
    if cats.is_empty() {
        return Err(ClassifierError::NoCategories);
    }
    let mut scores = Vec::with_capacity(cats.len());
    for cat in cats {
        match score_category(tokens, cat, store, policy.strategy) {
            Ok(score) => scores.push(CategoryScore {
                category_id: cat.category_id.clone(),
                score,
            }),
            Err(SimilarityError::Degenerate(_)) => {
                return Ok(degenerate_result(post_id, policy.threshold))
            }
            Err(SimilarityError::OovFeature(token)) => {
                return Err(ClassifierError::OovFeature {
                    category: cat.category_id.clone(),
                    token,
                })
            }
            Err(SimilarityError::Embedding(e)) => return Err(e.into()),
        }
    }
    Ok(ClassificationResult {
        post_id: post_id.to_string(),
        assigned: assign(&scores, policy.threshold),
        scores,
        oov_rate: oov_rate(tokens, store),
        threshold_used: policy.threshold,
        degenerate: false,
    })
}

fn degenerate_result(post_id: &str, threshold: f64) -> ClassificationResult {
    ClassificationResult {
        post_id: post_id.to_string(),
        scores: Vec::new(),
        assigned: None,
        oov_rate: 1.0,
        threshold_used: threshold,
        degenerate: true,
    }
}

struct PreparedFeature {
    unit: Vec<f64>,
    weight: f64,
}

struct PreparedCategory {
    id: String,
    features: Vec<PreparedFeature>,
    weight_sum: f64,
}

/// Categories validated against a store, with feature vectors pre-normalized.
pub struct Classifier<'s> {
    store: &'s EmbeddingStore,
    categories: Vec<PersonaCategory>,
    prepared: Vec<PreparedCategory>,
    policy: ThresholdPolicy,
}

fn unit(v: &[f32]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 0.0).then(|| v.iter().map(|x| *x as f64 / n).collect())
}

fn unit64(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.into_iter().map(|x| x / n).collect())
}

fn unit_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

impl<'s> Classifier<'s> {
    /// Rejects invalid categories and features that are out of vocabulary.
    pub fn new(
        store: &'s EmbeddingStore,
        categories: Vec<PersonaCategory>,
        policy: ThresholdPolicy,
    ) -> Result<Self, ClassifierError> {
        policy.validate()?;
        if categories.is_empty() {
            return Err(ClassifierError::NoCategories);
        }
        check_unique_ids(&categories)?;
        let mut prepared = Vec::with_capacity(categories.len());
        for cat in &categories {
            cat.validate()?;
            let mut features = Vec::with_capacity(cat.features.len());
            for f in &cat.features {
                let v = store.lookup(&f.token).ok_or_else(|| ClassifierError::OovFeature {
                    category: cat.category_id.clone(),
                    token: f.token.clone(),
                })?;
                let unit = unit(v).ok_or_else(|| ClassifierError::InvalidCategory {
                    category: cat.category_id.clone(),
                    reason: format!("feature {:?} has a zero vector", f.token),
                })?;
                features.push(PreparedFeature {
                    unit,
                    weight: f.weight,
                });
            }
            prepared.push(PreparedCategory {
                id: cat.category_id.clone(),
                weight_sum: cat.weight_sum(),
                features,
            });
        }
        Ok(Self {
            store,
            categories,
            prepared,
            policy,
        })
    }

    pub fn categories(&self) -> &[PersonaCategory] {
        &self.categories
    }

    pub fn policy(&self) -> &ThresholdPolicy {
        &self.policy
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.policy.threshold = threshold;
        self
    }

    pub fn classify(&self, post_id: &str, tokens: &TokenSequence) -> ClassificationResult {
        let threshold = self.policy.threshold;
        let units: Vec<Vec<f64>> = tokens
            .iter()
            .filter_map(|t| self.store.lookup(t))
            .filter_map(unit)
            .collect();
        if units.is_empty() {
            return degenerate_result(post_id, threshold);
        }
        let post_unit = match self.policy.strategy {
            TokenFeatureStrategy::MaxToken => None,
            TokenFeatureStrategy::MeanPostVector => {
                let raw: Vec<&[f32]> = tokens.iter().filter_map(|t| self.store.lookup(t)).collect();
                match unit64(mean_vector(&raw, self.store.dimension())) {
                    Some(u) => Some(u),
                    None => return degenerate_result(post_id, threshold),
                }
            }
        };
        let scores: Vec<CategoryScore> = self
            .prepared
            .iter()
            .map(|cat| {
                let num: f64 = cat
                    .features
                    .iter()
                    .map(|f| {
                        let sim = match &post_unit {
                            None => units
                                .iter()
                                .map(|u| unit_dot(u, &f.unit))
                                .fold(f64::NEG_INFINITY, f64::max),
                            Some(p) => unit_dot(p, &f.unit),
                        };
                        sim * f.weight
                    })
                    .sum();
                CategoryScore {
                    category_id: cat.id.clone(),
                    score: num / cat.weight_sum,
                }
            })
            .collect();
        ClassificationResult {
            post_id: post_id.to_string(),
            assigned: assign(&scores, threshold),
            scores,
            oov_rate: oov_rate(tokens, self.store),
            threshold_used: threshold,
            degenerate: false,
        }
    }

    /// Classifies pre-tokenized posts in parallel. Output is sorted by post_id.
    pub fn classify_tokens(&self, posts: &[(String, TokenSequence)]) -> CorpusClassification {
        let mut all: Vec<ClassificationResult> = posts
            .par_iter()
            .map(|(id, tokens)| self.classify(id, tokens))
            .collect();
        all.sort_by(|a, b| a.post_id.cmp(&b.post_id));
        CorpusClassification::partition(all, self.policy.max_recycle_rounds)
    }

    pub fn classify_corpus(&self, posts: &PostCollection, text: &TextPipeline) -> CorpusClassification {
        let tokenized: Vec<(String, TokenSequence)> = posts
            .posts
            .par_iter()
            .map(|p| (p.post_id.clone(), text.process(&p.text).tokens))
            .collect();
        self.classify_tokens(&tokenized)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecycleEntry {
    pub post_id: String,
    /// Recycling round this entry is waiting for, starting at 1.
    pub round: u32,
    pub result: ClassificationResult,
}

/// Posts that no category claimed. They feed the next taxonomy refinement
/// round; after `max_rounds` attempts they are retired as exhausted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecycleQueue {
    pub max_rounds: u32,
    pub entries: Vec<RecycleEntry>,
    pub exhausted: Vec<RecycleEntry>,
}

impl RecycleQueue {
    pub fn len(&self) -> usize {
        self.entries.len() + self.exhausted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.exhausted.is_empty()
    }

    pub fn pending_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.post_id.as_str())
    }

    /// Re-scores pending entries with a refined classifier. Newly assigned
    /// posts are returned; the rest advance one round or are retired.
    pub fn reclassify(
        &mut self,
        classifier: &Classifier<'_>,
        tokens_of: impl Fn(&str) -> Option<TokenSequence> + Sync,
    ) -> Vec<ClassificationResult> {
        let pending = std::mem::take(&mut self.entries);
        let mut assigned = Vec::new();
        for mut entry in pending {
            let result = match tokens_of(&entry.post_id) {
                Some(tokens) => classifier.classify(&entry.post_id, &tokens),
                None => entry.result.clone(),
            };
            if result.assigned.is_some() {
                assigned.push(result);
                continue;
            }
            entry.result = result;
            entry.round += 1;
            if entry.round > self.max_rounds {
                self.exhausted.push(entry);
            } else {
                self.entries.push(entry);
            }
        }
        assigned
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub input: usize,
    pub assigned: usize,
    pub queued: usize,
    pub degenerate: usize,
    /// Assigned counts per category id, in first-seen order of results.
    pub per_category: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusClassification {
    /// Assigned posts, sorted by post_id.
    pub results: Vec<ClassificationResult>,
    pub queue: RecycleQueue,
}

impl CorpusClassification {
    fn partition(all: Vec<ClassificationResult>, max_rounds: u32) -> Self {
        let mut results = Vec::new();
        let mut queue = RecycleQueue {
            max_rounds,
            ..Default::default()
        };
        for r in all {
            if r.assigned.is_some() {
                results.push(r);
            } else {
                queue.entries.push(RecycleEntry {
                    post_id: r.post_id.clone(),
                    round: 1,
                    result: r,
                });
            }
        }
        Self { results, queue }
    }

    pub fn summary(&self, categories: &[PersonaCategory]) -> PartitionSummary {
        let per_category = categories
            .iter()
            .map(|c| {
                let n = self
                    .results
                    .iter()
                    .filter(|r| r.assigned.as_deref() == Some(c.category_id.as_str()))
                    .count();
                (c.category_id.clone(), n)
            })
            .collect();
        PartitionSummary {
            input: self.results.len() + self.queue.len(),
            assigned: self.results.len(),
            queued: self.queue.len(),
            degenerate: self
                .queue
                .entries
                .iter()
                .chain(&self.queue.exhausted)
                .filter(|e| e.result.degenerate)
                .count(),
            per_category,
        }
    }
}

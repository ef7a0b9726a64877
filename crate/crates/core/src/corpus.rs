//! Post ingestion and the two-tier collection strategy.
//!
//! Product-relevant posts are selected with a keyword framework (D1), their
//! authors deduplicated (D1-1), each author's recent posts pulled from the
//! post store (raw D2) and finally cleaned (D2-1).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::textproc::normalize;

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid keyword framework: {0}")]
    InvalidFramework(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("expansion limit k must be at least 1")]
    ZeroExpansionLimit,
    #[error("corpus statistics are undefined for an empty collection")]
    EmptyCollection,
    #[error("emotion lexicon must not be empty")]
    EmptyLexicon,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub user_id: String,
    #[serde(default)]
    pub text: String,
    /// UTC seconds.
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comments: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub profile_tags: Vec<String>,
}

impl Post {
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatasetLabel {
    D1,
    #[serde(rename = "D1-1")]
    D1_1,
    #[serde(rename = "D2-1")]
    D2_1,
}

impl DatasetLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetLabel::D1 => "D1",
            DatasetLabel::D1_1 => "D1-1",
            DatasetLabel::D2_1 => "D2-1",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PostCollection {
    pub label: Option<DatasetLabel>,
    pub posts: Vec<Post>,
}

impl PostCollection {
    pub fn new(posts: Vec<Post>) -> Self {
        Self { label: None, posts }
    }

    pub fn labeled(label: DatasetLabel, posts: Vec<Post>) -> Self {
        Self {
            label: Some(label),
            posts,
        }
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Post> {
        self.posts.iter()
    }

    pub fn user_ids(&self) -> BTreeSet<&str> {
        self.posts.iter().map(|p| p.user_id.as_str()).collect()
    }

    /// Writes one JSON record per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for post in &self.posts {
            serde_json::to_writer(&mut out, post)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to Vec cannot fail");
        buf
    }
}

impl<'a> IntoIterator for &'a PostCollection {
    type Item = &'a Post;
    type IntoIter = std::slice::Iter<'a, Post>;

    fn into_iter(self) -> Self::IntoIter {
        self.posts.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    #[default]
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub lines_read: usize,
    pub posts_loaded: usize,
    pub errors: Vec<RecordError>,
}

#[derive(Deserialize)]
struct RawPost {
    post_id: Option<String>,
    user_id: Option<String>,
    text: Option<String>,
    timestamp: Option<i64>,
    likes: Option<u64>,
    comments: Option<u64>,
    profile_tags: Option<Vec<String>>,
}

impl RawPost {
    fn into_post(self) -> Result<Post, String> {
        let post_id = self
            .post_id
            .filter(|s| !s.is_empty())
            .ok_or("missing post_id")?;
        let user_id = self
            .user_id
            .filter(|s| !s.is_empty())
            .ok_or("missing user_id")?;
        let timestamp = self.timestamp.ok_or("missing timestamp")?;
        let timestamp = u64::try_from(timestamp).map_err(|_| "negative timestamp")?;
        Ok(Post {
            post_id,
            user_id,
            text: self.text.unwrap_or_default(),
            timestamp,
            likes: self.likes,
            comments: self.comments,
            profile_tags: self.profile_tags.unwrap_or_default(),
        })
    }
}

pub fn load_posts(
    path: impl AsRef<Path>,
    format: InputFormat,
) -> Result<(PostCollection, LoadReport), CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    read_posts(BufReader::new(file), format).map_err(|e| io_err(path, e))
}

/// Parses line-delimited post records. Blank lines are ignored; bad records are
/// reported with their line number.
pub fn read_posts<R: BufRead>(
    reader: R,
    format: InputFormat,
) -> std::io::Result<(PostCollection, LoadReport)> {
    let InputFormat::Jsonl = format;
    let mut posts = Vec::new();
    let mut report = LoadReport::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.lines_read += 1;
        let parsed = serde_json::from_str::<RawPost>(&line)
            .map_err(|e| e.to_string())
            .and_then(RawPost::into_post);
        match parsed {
            Ok(post) => posts.push(post),
            Err(message) => report.errors.push(RecordError {
                line: idx + 1,
                message,
            }),
        }
    }
    report.posts_loaded = posts.len();
    Ok((PostCollection::new(posts), report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Any keyword from either list.
    #[default]
    Union,
    /// At least one situation keyword and one behavior keyword.
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordFramework {
    situation_keywords: Vec<String>,
    behavior_keywords: Vec<String>,
    match_mode: MatchMode,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KeywordFile {
    #[serde(default)]
    match_mode: MatchMode,
    situation: Vec<String>,
    behavior: Vec<String>,
}

impl KeywordFramework {
    pub fn new(
        situation: Vec<String>,
        behavior: Vec<String>,
        match_mode: MatchMode,
    ) -> Result<Self, CorpusError> {
        let situation_keywords = normalized_unique("situation", situation)?;
        let behavior_keywords = normalized_unique("behavior", behavior)?;
        Ok(Self {
            situation_keywords,
            behavior_keywords,
            match_mode,
        })
    }

    pub fn from_toml(raw: &str) -> Result<Self, CorpusError> {
        let file: KeywordFile =
            toml::from_str(raw).map_err(|e| CorpusError::InvalidFramework(e.to_string()))?;
        Self::new(file.situation, file.behavior, file.match_mode)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)
    }

    pub fn with_mode(mut self, mode: MatchMode) -> Self {
        self.match_mode = mode;
        self
    }

    pub fn match_mode(&self) -> MatchMode {
        self.match_mode
    }

    pub fn situation_keywords(&self) -> &[String] {
        &self.situation_keywords
    }

    pub fn behavior_keywords(&self) -> &[String] {
        &self.behavior_keywords
    }

    pub fn keyword_count(&self) -> usize {
        self.situation_keywords.len() + self.behavior_keywords.len()
    }

    pub fn all_keywords(&self) -> impl Iterator<Item = &str> {
        self.situation_keywords
            .iter()
            .chain(&self.behavior_keywords)
            .map(String::as_str)
    }

    /// `normalized` must already be passed through [`normalize`].
    pub fn matches_normalized(&self, normalized: &str) -> bool {
        let situation = self
            .situation_keywords
            .iter()
            .any(|k| normalized.contains(k.as_str()));
        match self.match_mode {
            MatchMode::Union => {
                situation
                    || self
                        .behavior_keywords
                        .iter()
                        .any(|k| normalized.contains(k.as_str()))
            }
            MatchMode::Pairwise => {
                situation
                    && self
                        .behavior_keywords
                        .iter()
                        .any(|k| normalized.contains(k.as_str()))
            }
        }
    }

    pub fn matches(&self, text: &str) -> bool {
        self.matches_normalized(&normalize(text))
    }

    /// Keywords of either list present in `normalized`.
    pub fn keywords_in<'a>(&'a self, normalized: &str) -> BTreeSet<&'a str> {
        self.all_keywords()
            .filter(|k| normalized.contains(k))
            .collect()
    }
}

fn normalized_unique(list: &str, words: Vec<String>) -> Result<Vec<String>, CorpusError> {
    if words.is_empty() {
        return Err(CorpusError::InvalidFramework(format!(
            "{list} keyword list is empty"
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(words.len());
    for w in words {
        let n = normalize(&w);
        if n.is_empty() {
            return Err(CorpusError::InvalidFramework(format!(
                "blank entry in {list} keyword list"
            )));
        }
        if !seen.insert(n.clone()) {
            return Err(CorpusError::InvalidFramework(format!(
                "duplicate {list} keyword {w:?}"
            )));
        }
        out.push(n);
    }
    Ok(out)
}

/// Keyword-relevant posts (D1). Input order is preserved.
pub fn filter_relevant(posts: &PostCollection, fw: &KeywordFramework) -> PostCollection {
    PostCollection::labeled(
        DatasetLabel::D1,
        posts
            .iter()
            .filter(|p| fw.matches_normalized(&normalize(&p.text)))
            .cloned()
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub post_count: usize,
    #[serde(default)]
    pub is_commercial: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSet {
    pub label: DatasetLabel,
    /// Sorted by user_id.
    pub users: Vec<UserProfile>,
}

impl UserSet {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn contains(&self, user_id: &str) -> bool {
        self.users
            .binary_search_by(|u| u.user_id.as_str().cmp(user_id))
            .is_ok()
    }
}

/// One profile per distinct author (D1-1).
pub fn dedup_users(d1: &PostCollection) -> UserSet {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in d1 {
        *counts.entry(p.user_id.as_str()).or_default() += 1;
    }
    UserSet {
        label: DatasetLabel::D1_1,
        users: counts
            .into_iter()
            .map(|(user_id, post_count)| UserProfile {
                user_id: user_id.to_string(),
                post_count,
                is_commercial: false,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandReport {
    pub users_requested: usize,
    pub posts_collected: usize,
    /// Users with no posts in the store.
    pub missing_users: Vec<String>,
}

/// Newest-first by timestamp, ties by ascending post_id.
fn recency_order(a: &Post, b: &Post) -> std::cmp::Ordering {
    b.timestamp
        .cmp(&a.timestamp)
        .then_with(|| a.post_id.cmp(&b.post_id))
}

/// Takes the `k` most recent posts of every user from `store` (raw D2).
/// Users are emitted in user_id order, each user's posts newest first.
pub fn expand_user_posts(
    store: &PostCollection,
    users: &UserSet,
    k: usize,
) -> Result<(PostCollection, ExpandReport), CorpusError> {
    if k == 0 {
        return Err(CorpusError::ZeroExpansionLimit);
    }
    let mut by_user: HashMap<&str, Vec<&Post>> = HashMap::new();
    for p in store {
        by_user.entry(p.user_id.as_str()).or_default().push(p);
    }
    let mut report = ExpandReport {
        users_requested: users.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for user in &users.users {
        match by_user.get_mut(user.user_id.as_str()) {
            Some(posts) => {
                posts.sort_by(|a, b| recency_order(a, b));
                out.extend(posts.iter().take(k).map(|p| (*p).clone()));
            }
            None => report.missing_users.push(user.user_id.clone()),
        }
    }
    report.posts_collected = out.len();
    Ok((PostCollection::new(out), report))
}

/// Rule-based commercial account detection and lexicons used by [`clean`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleaningConfig {
    /// Flag when posts per day over the user's observed window exceed this.
    #[serde(default = "default_posts_per_day")]
    pub max_posts_per_day: f64,
    /// ... and promotional term density exceeds this.
    #[serde(default = "default_promo_density")]
    pub max_promo_density: f64,
    #[serde(default)]
    pub promo_lexicon: Vec<String>,
}

fn default_posts_per_day() -> f64 {
    10.0
}

fn default_promo_density() -> f64 {
    0.15
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            max_posts_per_day: default_posts_per_day(),
            max_promo_density: default_promo_density(),
            promo_lexicon: Vec::new(),
        }
    }
}

impl CleaningConfig {
    pub fn from_toml(raw: &str) -> Result<Self, CorpusError> {
        let cfg: Self = toml::from_str(raw).map_err(|e| CorpusError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.max_posts_per_day.is_finite() && self.max_posts_per_day >= 0.0) {
            return Err(CorpusError::InvalidConfig(
                "max_posts_per_day must be a non-negative number".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.max_promo_density) {
            return Err(CorpusError::InvalidConfig(
                "max_promo_density must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RemovalCounts {
    pub empty_text: usize,
    pub duplicate_post_id: usize,
    pub duplicate_text: usize,
    pub commercial_account: usize,
}

impl RemovalCounts {
    pub fn total(&self) -> usize {
        self.empty_text + self.duplicate_post_id + self.duplicate_text + self.commercial_account
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input: usize,
    pub output: usize,
    pub removed: RemovalCounts,
    pub imputed_likes: usize,
    pub imputed_comments: usize,
    pub commercial_users: Vec<UserProfile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivityProfile {
    pub posts_per_day: f64,
    pub promo_density: f64,
}

/// Posting rate over the observed window (at least one day) and the share of
/// whitespace tokens taken up by promotional lexicon hits.
pub fn activity_profile(posts: &[&Post], promo_lexicon: &[String]) -> ActivityProfile {
    if posts.is_empty() {
        return ActivityProfile {
            posts_per_day: 0.0,
            promo_density: 0.0,
        };
    }
    let first = posts.iter().map(|p| p.timestamp).min().unwrap_or(0);
    let last = posts.iter().map(|p| p.timestamp).max().unwrap_or(0);
    let days = ((last - first) as f64 / SECONDS_PER_DAY).max(1.0);
    let mut tokens = 0usize;
    let mut hits = 0usize;
    for p in posts {
        let n = normalize(&p.text);
        tokens += n.split(' ').filter(|t| !t.is_empty()).count();
        hits += promo_lexicon
            .iter()
            .filter(|term| !term.is_empty())
            .map(|term| n.matches(term.as_str()).count())
            .sum::<usize>();
    }
    let promo_density = if tokens == 0 {
        0.0
    } else {
        (hits as f64 / tokens as f64).min(1.0)
    };
    ActivityProfile {
        posts_per_day: posts.len() as f64 / days,
        promo_density,
    }
}

fn text_digest(normalized: &str) -> [u8; 32] {
    Sha256::digest(normalized.as_bytes()).into()
}

/// Produces D2-1. Rules run in order: empty text, duplicate post_id, duplicate
/// normalized text, commercial accounts. The first occurrence of a duplicate
/// survives. Missing engagement counts become 0.
pub fn clean(raw: &PostCollection, rules: &CleaningConfig) -> (PostCollection, CleaningReport) {
    let mut report = CleaningReport {
        input: raw.len(),
        ..Default::default()
    };
    let promo: Vec<String> = rules.promo_lexicon.iter().map(|t| normalize(t)).collect();

    let mut seen_ids = HashSet::new();
    let mut seen_text = HashSet::new();
    let mut kept: Vec<Post> = Vec::with_capacity(raw.len());
    for post in raw {
        let normalized = normalize(&post.text);
        if normalized.is_empty() || post.post_id.is_empty() || post.user_id.is_empty() {
            report.removed.empty_text += 1;
            continue;
        }
        if !seen_ids.insert(post.post_id.as_str()) {
            report.removed.duplicate_post_id += 1;
            continue;
        }
        if !seen_text.insert(text_digest(&normalized)) {
            report.removed.duplicate_text += 1;
            continue;
        }
        let mut post = post.clone();
        if post.likes.is_none() {
            post.likes = Some(0);
            report.imputed_likes += 1;
        }
        if post.comments.is_none() {
            post.comments = Some(0);
            report.imputed_comments += 1;
        }
        kept.push(post);
    }

    let mut by_user: BTreeMap<&str, Vec<&Post>> = BTreeMap::new();
    for p in &kept {
        by_user.entry(p.user_id.as_str()).or_default().push(p);
    }
    let mut commercial = HashSet::new();
    for (user, posts) in &by_user {
        let activity = activity_profile(posts, &promo);
        if activity.posts_per_day > rules.max_posts_per_day
            && activity.promo_density > rules.max_promo_density
        {
            commercial.insert(user.to_string());
            report.commercial_users.push(UserProfile {
                user_id: user.to_string(),
                post_count: posts.len(),
                is_commercial: true,
            });
        }
    }
    drop(by_user);

    let before = kept.len();
    kept.retain(|p| !commercial.contains(&p.user_id));
    report.removed.commercial_account = before - kept.len();
    report.output = kept.len();
    (PostCollection::labeled(DatasetLabel::D2_1, kept), report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub avg_post_length: f64,
    pub emotional_descriptor_ratio: f64,
    pub behavioral_consistency: f64,
    pub post_count: usize,
    pub user_count: usize,
    /// Users with at least two posts and keyword evidence in some half.
    pub consistency_eligible_users: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsOptions {
    /// Minimum half-split keyword Jaccard for a user to count as consistent.
    pub consistency_threshold: f64,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self {
            consistency_threshold: 0.5,
        }
    }
}

fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn corpus_stats(
    c: &PostCollection,
    emo_lexicon: &BTreeSet<String>,
    fw: &KeywordFramework,
    options: StatsOptions,
) -> Result<CorpusStats, CorpusError> {
    if c.is_empty() {
        return Err(CorpusError::EmptyCollection);
    }
    let lexicon: Vec<String> = emo_lexicon
        .iter()
        .map(|t| normalize(t))
        .filter(|t| !t.is_empty())
        .collect();
    if lexicon.is_empty() {
        return Err(CorpusError::EmptyLexicon);
    }

    let normalized: Vec<String> = c.iter().map(|p| normalize(&p.text)).collect();
    let total_chars: usize = c.iter().map(Post::char_len).sum();
    let emotional = normalized
        .iter()
        .filter(|t| lexicon.iter().any(|term| t.contains(term.as_str())))
        .count();

    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in c.iter().enumerate() {
        by_user.entry(p.user_id.as_str()).or_default().push(i);
    }
    let mut eligible = 0usize;
    let mut consistent = 0usize;
    for indices in by_user.values_mut() {
        if indices.len() < 2 {
            continue;
        }
        indices.sort_by(|&a, &b| {
            let (pa, pb) = (&c.posts[a], &c.posts[b]);
            pa.timestamp
                .cmp(&pb.timestamp)
                .then_with(|| pa.post_id.cmp(&pb.post_id))
        });
        let mid = indices.len() / 2;
        let half_keywords = |range: &[usize]| -> BTreeSet<&str> {
            range
                .iter()
                .flat_map(|&i| fw.keywords_in(&normalized[i]))
                .collect()
        };
        let first = half_keywords(&indices[..mid]);
        let second = half_keywords(&indices[mid..]);
        if first.is_empty() && second.is_empty() {
            continue;
        }
        eligible += 1;
        if jaccard(&first, &second) >= options.consistency_threshold {
            consistent += 1;
        }
    }

    Ok(CorpusStats {
        avg_post_length: total_chars as f64 / c.len() as f64,
        emotional_descriptor_ratio: emotional as f64 / c.len() as f64,
        behavioral_consistency: if eligible == 0 {
            0.0
        } else {
            consistent as f64 / eligible as f64
        },
        post_count: c.len(),
        user_count: by_user.len(),
        consistency_eligible_users: eligible,
    })
}

/// Relative change of a lifestyle corpus against a product-focused baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsComparison {
    /// `other.avg_post_length / base.avg_post_length - 1`.
    pub length_delta: f64,
    /// Relative change in emotional descriptor ratio; `None` when the baseline ratio is 0.
    pub emotional_delta: Option<f64>,
}

impl StatsComparison {
    pub fn between(base: &CorpusStats, other: &CorpusStats) -> Self {
        let length_delta = if base.avg_post_length > 0.0 {
            other.avg_post_length / base.avg_post_length - 1.0
        } else {
            f64::NAN
        };
        let emotional_delta = (base.emotional_descriptor_ratio > 0.0)
            .then(|| other.emotional_descriptor_ratio / base.emotional_descriptor_ratio - 1.0);
        Self {
            length_delta,
            emotional_delta,
        }
    }
}

/// Loads an emotion lexicon (one term per line).
pub fn load_lexicon(path: impl AsRef<Path>) -> Result<BTreeSet<String>, CorpusError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(crate::textproc::parse_word_list(&raw).into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn post(id: &str, user: &str, text: &str, ts: u64) -> Post {
        Post {
            post_id: id.into(),
            user_id: user.into(),
            text: text.into(),
            timestamp: ts,
            likes: Some(1),
            comments: Some(0),
            profile_tags: vec![],
        }
    }

    fn framework(mode: MatchMode) -> KeywordFramework {
        KeywordFramework::new(
            vec!["Bedside Lamp".into(), "Night Light".into()],
            vec!["Dimmable".into(), "Alarm Clock".into()],
            mode,
        )
        .unwrap()
    }

    #[test]
    fn load_three_wellformed_lines() {
        let data = r#"{"post_id":"p1","user_id":"u1","text":"a","timestamp":1}
{"post_id":"p2","user_id":"u1","text":"b","timestamp":2,"likes":3}
{"post_id":"p3","user_id":"u2","text":"c","timestamp":3,"profile_tags":["25-30"]}
"#;
        let (c, r) = read_posts(data.as_bytes(), InputFormat::Jsonl).unwrap();
        assert_eq!(c.len(), 3);
        assert!(r.errors.is_empty());
        assert_eq!(c.posts[1].likes, Some(3));
        assert_eq!(c.posts[2].profile_tags, ["25-30"]);
    }

    #[test]
    fn load_empty_input() {
        let (c, r) = read_posts(&b""[..], InputFormat::Jsonl).unwrap();
        assert!(c.is_empty());
        assert!(r.errors.is_empty());
    }

    #[test]
    fn load_reports_missing_user_id() {
        let data = r#"{"post_id":"p1","user_id":"u1","text":"a","timestamp":1}
{"post_id":"p2","text":"b","timestamp":2}
{"post_id":"p3","user_id":"u2","text":"c","timestamp":3}"#;
        let (c, r) = read_posts(data.as_bytes(), InputFormat::Jsonl).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].line, 2);
        assert!(r.errors[0].message.contains("user_id"));
    }

    #[test]
    fn load_reports_garbage_and_negative_timestamps() {
        let data = "not json\n{\"post_id\":\"p\",\"user_id\":\"u\",\"timestamp\":-4}\n";
        let (c, r) = read_posts(data.as_bytes(), InputFormat::Jsonl).unwrap();
        assert!(c.is_empty());
        assert_eq!(r.errors.len(), 2);
    }

    #[test]
    fn load_posts_missing_file_is_io_error() {
        assert!(matches!(
            load_posts("/nonexistent/posts.jsonl", InputFormat::Jsonl),
            Err(CorpusError::Io { .. })
        ));
    }

    #[test]
    fn pairwise_requires_both_lists() {
        let posts = PostCollection::new(vec![
            post("1", "u", "My new Bedside Lamp is dimmable!", 0),
            post("2", "u", "Nothing relevant here", 0),
            post("3", "u", "a cute night light", 0),
        ]);
        let pair = filter_relevant(&posts, &framework(MatchMode::Pairwise));
        assert_eq!(pair.posts.iter().map(|p| &p.post_id[..]).collect::<Vec<_>>(), ["1"]);
        let union = filter_relevant(&posts, &framework(MatchMode::Union));
        assert_eq!(union.posts.iter().map(|p| &p.post_id[..]).collect::<Vec<_>>(), ["1", "3"]);
        assert_eq!(union.label, Some(DatasetLabel::D1));
    }

    #[test]
    fn framework_rejects_duplicates_and_empty_lists() {
        assert!(KeywordFramework::new(vec![], vec!["a".into()], MatchMode::Union).is_err());
        assert!(KeywordFramework::new(
            vec!["Lamp".into(), "lamp".into()],
            vec!["a".into()],
            MatchMode::Union
        )
        .is_err());
    }

    #[test]
    fn framework_from_toml() {
        let fw = KeywordFramework::from_toml(
            "match_mode = \"pairwise\"\nsituation = [\"Floor Lamp\"]\nbehavior = [\"Smart\"]\n",
        )
        .unwrap();
        assert_eq!(fw.match_mode(), MatchMode::Pairwise);
        assert_eq!(fw.keyword_count(), 2);
        assert!(fw.matches("SMART floor   lamp"));
    }

    #[test]
    fn dedup_counts_users() {
        let d1 = PostCollection::new(vec![
            post("1", "a", "x", 0),
            post("2", "b", "x", 0),
            post("3", "a", "x", 0),
            post("4", "a", "x", 0),
            post("5", "b", "x", 0),
        ]);
        let users = dedup_users(&d1);
        assert_eq!(users.len(), 2);
        assert_eq!(users.users[0].post_count, 3);
        assert_eq!(users.label, DatasetLabel::D1_1);
        assert!(dedup_users(&PostCollection::default()).is_empty());
    }

    #[test]
    fn expand_keeps_newest_k() {
        let mut posts: Vec<Post> = (0..25).map(|i| post(&format!("p{i:02}"), "u", "t", i)).collect();
        posts.extend((0..3).map(|i| post(&format!("q{i}"), "v", "t", i)));
        let store = PostCollection::new(posts);
        let users = dedup_users(&store);
        let (d2, report) = expand_user_posts(&store, &users, 20).unwrap();
        let u: Vec<_> = d2.iter().filter(|p| p.user_id == "u").collect();
        assert_eq!(u.len(), 20);
        assert_eq!(u[0].timestamp, 24);
        assert_eq!(u[19].timestamp, 5);
        assert_eq!(d2.iter().filter(|p| p.user_id == "v").count(), 3);
        assert!(report.missing_users.is_empty());
    }

    #[test]
    fn expand_tie_at_boundary_prefers_smaller_post_id() {
        let store = PostCollection::new(vec![
            post("c", "u", "t", 10),
            post("b", "u", "t", 5),
            post("a", "u", "t", 5),
        ]);
        let users = dedup_users(&store);
        let (d2, _) = expand_user_posts(&store, &users, 2).unwrap();
        let ids: Vec<_> = d2.iter().map(|p| p.post_id.as_str()).collect();
        assert_eq!(ids, ["c", "a"]);
    }

    #[test]
    fn expand_notes_missing_users_and_rejects_zero_k() {
        let store = PostCollection::new(vec![post("1", "a", "t", 0)]);
        let users = UserSet {
            label: DatasetLabel::D1_1,
            users: vec![
                UserProfile { user_id: "a".into(), post_count: 1, is_commercial: false },
                UserProfile { user_id: "ghost".into(), post_count: 1, is_commercial: false },
            ],
        };
        let (d2, report) = expand_user_posts(&store, &users, 20).unwrap();
        assert_eq!(d2.len(), 1);
        assert_eq!(report.missing_users, ["ghost"]);
        assert!(matches!(
            expand_user_posts(&store, &users, 0),
            Err(CorpusError::ZeroExpansionLimit)
        ));
    }

    fn promo_rules() -> CleaningConfig {
        CleaningConfig {
            promo_lexicon: vec!["discount".into(), "buy now".into()],
            ..Default::default()
        }
    }

    #[test]
    fn clean_drops_duplicate_ids_and_imputes() {
        let mut a = post("1", "u", "first", 0);
        a.likes = None;
        let b = post("1", "u", "second", 1);
        let (out, report) = clean(&PostCollection::new(vec![a, b]), &CleaningConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out.posts[0].likes, Some(0));
        assert_eq!(report.removed.duplicate_post_id, 1);
        assert_eq!(report.imputed_likes, 1);
        assert_eq!(out.label, Some(DatasetLabel::D2_1));
    }

    #[test]
    fn clean_drops_empty_and_duplicate_text() {
        let raw = PostCollection::new(vec![
            post("1", "u", "Same  TEXT", 0),
            post("2", "v", "same text", 1),
            post("3", "v", "   ", 2),
        ]);
        let (out, report) = clean(&raw, &CleaningConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(report.removed.duplicate_text, 1);
        assert_eq!(report.removed.empty_text, 1);
    }

    #[test]
    fn clean_flags_high_volume_promotional_users() {
        // 40 posts within one day, 3 promo hits per 10 tokens
        let mut posts: Vec<Post> = (0..40)
            .map(|i| {
                post(
                    &format!("s{i}"),
                    "shop",
                    &format!("discount lamp {i} discount today discount great light for you"),
                    1_000 + i * 60,
                )
            })
            .collect();
        posts.push(post("g1", "genuine", "reading with my lamp before bed", 5));
        let (out, report) = clean(&PostCollection::new(posts.clone()), &promo_rules());
        assert_eq!(out.len(), 1);
        assert_eq!(report.removed.commercial_account, 40);
        assert_eq!(report.commercial_users.len(), 1);
        assert!(report.commercial_users[0].is_commercial);

        let refs: Vec<&Post> = posts.iter().filter(|p| p.user_id == "shop").collect();
        let act = activity_profile(&refs, &promo_rules().promo_lexicon);
        assert!((act.posts_per_day - 40.0).abs() < 1e-12);
        assert!((act.promo_density - 0.3).abs() < 1e-12);
    }

    #[test]
    fn clean_keeps_busy_users_without_promo_language() {
        let posts: Vec<Post> = (0..40)
            .map(|i| post(&format!("s{i}"), "chatty", &format!("post number {i}"), i))
            .collect();
        let (out, _) = clean(&PostCollection::new(posts), &promo_rules());
        assert_eq!(out.len(), 40);
    }

    #[test]
    fn stats_length_and_delta() {
        let fw = framework(MatchMode::Union);
        let lex: BTreeSet<String> = ["love".to_string()].into();
        let short = PostCollection::new(vec![post("1", "a", &"x".repeat(287), 0)]);
        let long = PostCollection::new(vec![post("2", "a", &"y".repeat(642), 0)]);
        let both = PostCollection::new(vec![short.posts[0].clone(), long.posts[0].clone()]);
        let s = corpus_stats(&both, &lex, &fw, StatsOptions::default()).unwrap();
        assert!((s.avg_post_length - 464.5).abs() < 1e-12);
        assert_eq!(s.emotional_descriptor_ratio, 0.0);
        let base = corpus_stats(&short, &lex, &fw, StatsOptions::default()).unwrap();
        let other = corpus_stats(&long, &lex, &fw, StatsOptions::default()).unwrap();
        let cmp = StatsComparison::between(&base, &other);
        assert_eq!((cmp.length_delta * 100.0).round(), 124.0);
    }

    #[test]
    fn stats_counts_multibyte_chars() {
        let fw = framework(MatchMode::Union);
        let lex: BTreeSet<String> = ["开心".to_string()].into();
        let c = PostCollection::new(vec![post("1", "a", "今天很开心", 0)]);
        let s = corpus_stats(&c, &lex, &fw, StatsOptions::default()).unwrap();
        assert_eq!(s.avg_post_length, 5.0);
        assert_eq!(s.emotional_descriptor_ratio, 1.0);
    }

    #[test]
    fn stats_consistency_when_keywords_repeat() {
        let fw = framework(MatchMode::Union);
        let lex: BTreeSet<String> = ["love".to_string()].into();
        let mut posts = vec![];
        for u in ["a", "b", "c"] {
            for i in 0..4 {
                posts.push(post(&format!("{u}{i}"), u, "dimmable bedside lamp, love it", i));
            }
        }
        let s = corpus_stats(&PostCollection::new(posts), &lex, &fw, StatsOptions::default())
            .unwrap();
        assert_eq!(s.behavioral_consistency, 1.0);
        assert_eq!(s.emotional_descriptor_ratio, 1.0);
        assert_eq!(s.user_count, 3);
    }

    #[test]
    fn stats_consistency_detects_drift() {
        let fw = framework(MatchMode::Union);
        let lex: BTreeSet<String> = ["love".to_string()].into();
        let posts = vec![
            post("1", "a", "bedside lamp", 0),
            post("2", "a", "alarm clock", 1),
        ];
        let s = corpus_stats(&PostCollection::new(posts), &lex, &fw, StatsOptions::default())
            .unwrap();
        assert_eq!(s.behavioral_consistency, 0.0);
        assert_eq!(s.consistency_eligible_users, 1);
    }

    #[test]
    fn stats_errors() {
        let fw = framework(MatchMode::Union);
        let lex: BTreeSet<String> = ["love".to_string()].into();
        assert!(matches!(
            corpus_stats(&PostCollection::default(), &lex, &fw, StatsOptions::default()),
            Err(CorpusError::EmptyCollection)
        ));
        let c = PostCollection::new(vec![post("1", "a", "x", 0)]);
        assert!(matches!(
            corpus_stats(&c, &BTreeSet::new(), &fw, StatsOptions::default()),
            Err(CorpusError::EmptyLexicon)
        ));
    }

    fn arb_posts() -> impl Strategy<Value = Vec<Post>> {
        let words = prop::sample::select(vec![
            "bedside lamp", "dimmable", "discount", "sleep", "night light", "", "cozy",
        ]);
        prop::collection::vec(
            (0u8..12, 0u8..5, prop::collection::vec(words, 0..4), 0u64..200_000, prop::option::of(0u64..9)),
            0..40,
        )
        .prop_map(|rows| {
            rows.into_iter()
                .map(|(id, user, words, ts, likes)| Post {
                    post_id: format!("p{id}"),
                    user_id: format!("u{user}"),
                    text: words.join(" "),
                    timestamp: ts,
                    likes,
                    comments: None,
                    profile_tags: vec![],
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn clean_is_idempotent_and_conserving(posts in arb_posts()) {
            let rules = CleaningConfig { max_posts_per_day: 2.0, max_promo_density: 0.1, promo_lexicon: vec!["discount".into()] };
            let raw = PostCollection::new(posts);
            let (once, report) = clean(&raw, &rules);
            prop_assert_eq!(report.input, report.output + report.removed.total());
            let (twice, second) = clean(&once, &rules);
            prop_assert_eq!(&once.posts, &twice.posts);
            prop_assert_eq!(second.removed.total(), 0);
        }

        #[test]
        fn filter_and_dedup_are_order_independent(posts in arb_posts(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let fw = framework(MatchMode::Union);
            let mut shuffled = posts.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = PostCollection::new(posts);
            let b = PostCollection::new(shuffled);
            let fa: BTreeSet<_> = filter_relevant(&a, &fw).posts.into_iter().map(|p| (p.post_id, p.user_id, p.text, p.timestamp)).collect();
            let fb: BTreeSet<_> = filter_relevant(&b, &fw).posts.into_iter().map(|p| (p.post_id, p.user_id, p.text, p.timestamp)).collect();
            prop_assert_eq!(fa, fb);
            prop_assert_eq!(dedup_users(&a), dedup_users(&b));
        }

        #[test]
        fn expand_never_exceeds_k(posts in arb_posts(), k in 1usize..6) {
            let store = PostCollection::new(posts);
            let users = dedup_users(&store);
            let (d2, _) = expand_user_posts(&store, &users, k).unwrap();
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for p in &d2 { *counts.entry(p.user_id.as_str()).or_default() += 1; }
            prop_assert!(counts.values().all(|&n| n <= k));
        }
    }
}

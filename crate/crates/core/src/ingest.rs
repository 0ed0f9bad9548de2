//! Dump ingestion: newline-delimited JSON records in, per-year corpus slices out.
//!
//! Records follow the pushshift field names (`id`, `author`, `subreddit`,
//! `created_utc`, and either `body` or `title`/`selftext`). Author names are
//! replaced by a keyed hash before a [`RawPost`] exists, so no raw name ever
//! leaves this module.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;

use chrono::{DateTime, Datelike};
use hmac::{Hmac, Mac};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::Sha256;
use thiserror::Error;

/// Reserved author id for posts whose author deleted their account.
pub const DELETED_AUTHOR: &str = "__deleted__";

const DELETED_SENTINELS: [&str; 2] = ["[deleted]", "[removed]"];
const CACHE_FORMAT: &str = "opilex-corpus";
const CACHE_VERSION: u32 = 1;
const BATCH_LINES: usize = 8192;

/// Years the platform has data for.
pub const SUPPORTED_YEARS: RangeInclusive<i32> = 2005..=2100;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("no valid posts for year {0}")]
    EmptyCorpus(i32),
    #[error("year {0} outside supported range")]
    UnsupportedYear(i32),
    #[error("allowed subreddit list is empty")]
    EmptyAllowList,
    #[error("corpus cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IngestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostKind {
    Submission,
    Comment,
}

/// One submission or comment with an anonymized author.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPost {
    pub post_id: String,
    pub author_id: String,
    pub subreddit: String,
    pub created_utc: i64,
    pub kind: PostKind,
    pub text: String,
}

impl RawPost {
    pub fn is_deleted_author(&self) -> bool {
        self.author_id == DELETED_AUTHOR
    }
}

/// Keyed author hash: HMAC-SHA256 truncated to 64 bits, rendered as 16 hex chars.
#[derive(Clone)]
pub struct Anonymizer {
    mac: Hmac<Sha256>,
}

impl Anonymizer {
    pub fn new(salt: &[u8]) -> Self {
        let mac = Hmac::<Sha256>::new_from_slice(salt).expect("HMAC accepts keys of any length");
        Anonymizer { mac }
    }

    pub fn author_id(&self, name: &str) -> String {
        if name.is_empty() || DELETED_SENTINELS.contains(&name) {
            return DELETED_AUTHOR.to_string();
        }
        let mut mac = self.mac.clone();
        mac.update(name.as_bytes());
        let digest = mac.finalize().into_bytes();
        hex::encode(&digest[..8])
    }
}

impl std::fmt::Debug for Anonymizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Anonymizer { .. }")
    }
}

fn malformed(msg: impl Into<String>) -> IngestError {
    IngestError::MalformedRecord(msg.into())
}

fn string_field(obj: &Map<String, Value>, key: &str) -> Option<String> {
    match obj.get(key)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn epoch_field(obj: &Map<String, Value>) -> Result<i64> {
    let value = obj.get("created_utc").ok_or_else(|| malformed("missing created_utc"))?;
    let ts = match value {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.is_finite()).map(|f| f as i64)),
        // Older dumps store the timestamp as a string.
        Value::String(s) => s.trim().parse::<f64>().ok().filter(|f| f.is_finite()).map(|f| f as i64),
        _ => None,
    };
    match ts {
        Some(ts) if ts > 0 => Ok(ts),
        _ => Err(malformed(format!("bad created_utc: {value}"))),
    }
}

fn body_text(value: Option<&Value>) -> String {
    match value {
        Some(Value::String(s)) if !DELETED_SENTINELS.contains(&s.as_str()) => s.clone(),
        _ => String::new(),
    }
}

/// Parses one dump line. Submissions get `title + "\n" + selftext` as text
/// (title alone when there is no selftext).
pub fn parse_dump_line(line: &str, anonymizer: &Anonymizer) -> Result<RawPost> {
    let value: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| malformed("record is not an object"))?;

    let post_id = string_field(obj, "id")
        .filter(|s| !s.is_empty())
        .ok_or_else(|| malformed("missing id"))?;
    let subreddit = string_field(obj, "subreddit")
        .filter(|s| !s.is_empty())
        .ok_or_else(|| malformed("missing subreddit"))?
        .to_lowercase();
    let created_utc = epoch_field(obj)?;

    let (kind, text) = if obj.contains_key("title") {
        let title = body_text(obj.get("title"));
        let selftext = body_text(obj.get("selftext"));
        let text = if selftext.is_empty() { title } else { format!("{title}\n{selftext}") };
        (PostKind::Submission, text)
    } else if obj.contains_key("body") {
        (PostKind::Comment, body_text(obj.get("body")))
    } else {
        return Err(malformed("neither body nor title present"));
    };

    let author = match obj.get("author") {
        Some(Value::String(s)) => s.as_str(),
        _ => "",
    };

    Ok(RawPost {
        post_id,
        author_id: anonymizer.author_id(author),
        subreddit,
        created_utc,
        kind,
        text,
    })
}

/// Calendar year (UTC) of an epoch timestamp.
pub fn utc_year(ts: i64) -> Option<i32> {
    DateTime::from_timestamp(ts, 0).map(|dt| dt.year())
}

/// The posts of one calendar year.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSlice {
    pub year: i32,
    pub posts: Vec<RawPost>,
    pub subreddit_index: BTreeMap<String, usize>,
    /// Lines of the source stream that failed to parse.
    pub malformed_lines: u64,
}

impl CorpusSlice {
    pub fn new(year: i32, posts: Vec<RawPost>) -> Self {
        let subreddit_index = index_subreddits(&posts);
        CorpusSlice { year, posts, subreddit_index, malformed_lines: 0 }
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    /// Concatenates two shards of the same year. Counts are merge-order independent.
    pub fn merge(mut self, other: CorpusSlice) -> CorpusSlice {
        debug_assert_eq!(self.year, other.year);
        for (name, n) in other.subreddit_index {
            *self.subreddit_index.entry(name).or_insert(0) += n;
        }
        self.posts.extend(other.posts);
        self.malformed_lines += other.malformed_lines;
        self
    }

    fn retain(self, keep: impl Fn(&RawPost) -> bool) -> Result<CorpusSlice> {
        let year = self.year;
        let malformed_lines = self.malformed_lines;
        let posts: Vec<RawPost> = self.posts.into_iter().filter(|p| keep(p)).collect();
        if posts.is_empty() {
            return Err(IngestError::EmptyCorpus(year));
        }
        let mut slice = CorpusSlice::new(year, posts);
        slice.malformed_lines = malformed_lines;
        Ok(slice)
    }
}

fn index_subreddits(posts: &[RawPost]) -> BTreeMap<String, usize> {
    let mut index = BTreeMap::new();
    for p in posts {
        *index.entry(p.subreddit.clone()).or_insert(0) += 1;
    }
    index
}

/// Result of one pass over a dump stream.
#[derive(Debug, Default)]
pub struct IngestReport {
    pub slices: BTreeMap<i32, CorpusSlice>,
    pub malformed_lines: u64,
    pub out_of_range: u64,
}

/// Reads a dump once, bucketing valid posts by UTC year. Batches of lines are
/// parsed in parallel; post order within each year follows the input order.
pub fn load_corpora<R: BufRead>(
    reader: R,
    years: RangeInclusive<i32>,
    anonymizer: &Anonymizer,
) -> Result<IngestReport> {
    for y in [*years.start(), *years.end()] {
        if !SUPPORTED_YEARS.contains(&y) {
            return Err(IngestError::UnsupportedYear(y));
        }
    }
    let mut report = IngestReport::default();
    let mut batch = Vec::with_capacity(BATCH_LINES);
    let mut lines = reader.lines();
    loop {
        batch.clear();
        for line in lines.by_ref().take(BATCH_LINES) {
            batch.push(line?);
        }
        if batch.is_empty() {
            break;
        }
        let parsed: Vec<Option<RawPost>> = batch
            .par_iter()
            .filter(|l| !l.trim().is_empty())
            .map(|l| parse_dump_line(l, anonymizer).ok())
            .collect();
        for post in parsed {
            let Some(post) = post else {
                report.malformed_lines += 1;
                continue;
            };
            match utc_year(post.created_utc).filter(|y| years.contains(y)) {
                Some(y) => report
                    .slices
                    .entry(y)
                    .or_insert_with(|| CorpusSlice::new(y, Vec::new()))
                    .posts
                    .push(post),
                None => report.out_of_range += 1,
            }
        }
    }
    if report.slices.is_empty() {
        return Err(IngestError::EmptyCorpus(*years.start()));
    }
    for slice in report.slices.values_mut() {
        slice.subreddit_index = index_subreddits(&slice.posts);
        slice.malformed_lines = report.malformed_lines;
    }
    Ok(report)
}

/// Loads the posts of a single year.
pub fn load_corpus<R: BufRead>(reader: R, year: i32, anonymizer: &Anonymizer) -> Result<CorpusSlice> {
    let mut report = load_corpora(reader, year..=year, anonymizer).map_err(|e| match e {
        IngestError::EmptyCorpus(_) => IngestError::EmptyCorpus(year),
        e => e,
    })?;
    report.slices.remove(&year).ok_or(IngestError::EmptyCorpus(year))
}

/// Drops every subreddit with fewer than `min_comments` posts in the slice.
pub fn filter_subreddits(corpus: CorpusSlice, min_comments: usize) -> Result<CorpusSlice> {
    if corpus.is_empty() {
        return Err(IngestError::EmptyCorpus(corpus.year));
    }
    let keep: HashSet<String> = corpus
        .subreddit_index
        .iter()
        .filter(|(_, &n)| n >= min_comments)
        .map(|(s, _)| s.clone())
        .collect();
    corpus.retain(|p| keep.contains(&p.subreddit))
}

/// Keeps posts from the allowed subreddits; names compare case-insensitively.
pub fn restrict_to_subreddits<S: AsRef<str>>(corpus: CorpusSlice, allowed: &[S]) -> Result<CorpusSlice> {
    if allowed.is_empty() {
        return Err(IngestError::EmptyAllowList);
    }
    let allowed: HashSet<String> = allowed.iter().map(|s| s.as_ref().to_lowercase()).collect();
    corpus.retain(|p| allowed.contains(&p.subreddit))
}

/// Table 1-shaped per-year statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub year: i32,
    /// Posts in the slice, submissions and comments pooled.
    pub n_comments: usize,
    /// Distinct authors, excluding the deleted-author constant.
    pub n_authors: usize,
    pub n_subreddits: usize,
    pub author_prevalence: Option<f64>,
}

pub fn dataset_stats(corpus: &CorpusSlice, background_authors: Option<u64>) -> DatasetStats {
    let authors: HashSet<&str> = corpus
        .posts
        .iter()
        .filter(|p| !p.is_deleted_author())
        .map(|p| p.author_id.as_str())
        .collect();
    let n_authors = authors.len();
    DatasetStats {
        year: corpus.year,
        n_comments: corpus.posts.len(),
        n_authors,
        n_subreddits: corpus.subreddit_index.len(),
        author_prevalence: background_authors
            .filter(|&b| b > 0)
            .map(|b| n_authors as f64 / b as f64),
    }
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
    year: i32,
    posts: usize,
    malformed_lines: u64,
}

/// Writes a slice as a versioned ndjson cache: one header line, then one post per line.
pub fn write_cache<W: Write>(corpus: &CorpusSlice, mut out: W) -> Result<()> {
    let header = CacheHeader {
        format: CACHE_FORMAT.into(),
        version: CACHE_VERSION,
        year: corpus.year,
        posts: corpus.posts.len(),
        malformed_lines: corpus.malformed_lines,
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| IngestError::Cache(e.to_string()))?;
    out.write_all(b"\n")?;
    for post in &corpus.posts {
        serde_json::to_writer(&mut out, post).map_err(|e| IngestError::Cache(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_cache<R: BufRead>(reader: R) -> Result<CorpusSlice> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| IngestError::Cache("empty file".into()))??;
    let header: CacheHeader =
        serde_json::from_str(&header).map_err(|e| IngestError::Cache(format!("bad header: {e}")))?;
    if header.format != CACHE_FORMAT {
        return Err(IngestError::Cache(format!("unexpected format {:?}", header.format)));
    }
    if header.version != CACHE_VERSION {
        return Err(IngestError::Cache(format!(
            "version {} not supported (expected {CACHE_VERSION})",
            header.version
        )));
    }
    let mut posts = Vec::with_capacity(header.posts);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let post: RawPost = serde_json::from_str(&line).map_err(|e| IngestError::Cache(e.to_string()))?;
        posts.push(post);
    }
    if posts.len() != header.posts {
        return Err(IngestError::Cache(format!(
            "header announces {} posts, found {}",
            header.posts,
            posts.len()
        )));
    }
    let mut slice = CorpusSlice::new(header.year, posts);
    slice.malformed_lines = header.malformed_lines;
    Ok(slice)
}

/// Distinct subreddits across slices.
pub fn subreddits(slices: &[CorpusSlice]) -> BTreeSet<String> {
    slices.iter().flat_map(|s| s.subreddit_index.keys().cloned()).collect()
}

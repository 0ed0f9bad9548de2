//! Topical subreddit discovery by iterative query expansion, and Fleiss'
//! kappa for the manual validation of the discovered subreddits.
//!
//! Subreddits are treated as documents. A query is scored against each one
//! with length-normalized tf-idf; the best-scoring subreddits are then pooled
//! into a single document whose most distinctive terms become expansion
//! candidates. Candidates pass through a [`CandidateReview`] before joining
//! the query, which is where the human checkpoint sits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmt::format_sig6;
use crate::textnorm::{NormalizedPost, Normalizer};

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("query has no terms")]
    EmptyQuery,
    #[error("corpus has no posts")]
    EmptyCorpus,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("invalid annotation matrix: {0}")]
    InvalidMatrix(String),
    #[error("review file {path}: {msg}")]
    MalformedReviewFile { path: PathBuf, msg: String },
    #[error("review pending: edit {0} and re-run")]
    ReviewPending(PathBuf),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiscoveryError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSubreddit {
    pub subreddit: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTerm {
    pub term: String,
    pub score: f64,
}

/// Outcome of [`run_discovery`] for one year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryResult {
    pub query_terms: Vec<String>,
    pub subreddit_ranking: Vec<RankedSubreddit>,
    pub rounds_run: usize,
}

struct SubredditDoc<'a> {
    name: &'a str,
    counts: HashMap<&'a str, u64>,
    total: u64,
}

fn subreddit_docs(posts: &[NormalizedPost]) -> Vec<SubredditDoc<'_>> {
    let mut grouped: BTreeMap<&str, Vec<&NormalizedPost>> = BTreeMap::new();
    for p in posts {
        grouped.entry(p.subreddit.as_str()).or_default().push(p);
    }
    grouped
        .into_par_iter()
        .map(|(name, posts)| {
            let mut counts = HashMap::new();
            let mut total = 0;
            for lemma in posts.iter().flat_map(|p| p.lemmas()) {
                *counts.entry(lemma).or_insert(0) += 1;
                total += 1;
            }
            SubredditDoc { name, counts, total }
        })
        .collect()
}

fn sort_desc_lexicographic<T>(items: &mut [T], key: impl Fn(&T) -> (f64, &str)) {
    items.sort_by(|a, b| {
        let (sa, na) = key(a);
        let (sb, nb) = key(b);
        sb.total_cmp(&sa).then_with(|| na.cmp(nb))
    });
}

/// Scores every subreddit against `terms`:
/// `score(s) = sum_t tf(t, s) * ln(N / df(t)) / tokens(s)`.
/// Descending; ties broken by name.
pub fn score_subreddits<S: AsRef<str>>(posts: &[NormalizedPost], terms: &[S]) -> Result<Vec<RankedSubreddit>> {
    if terms.is_empty() {
        return Err(DiscoveryError::EmptyQuery);
    }
    if posts.is_empty() {
        return Err(DiscoveryError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    let terms: Vec<&str> = terms.iter().map(AsRef::as_ref).filter(|t| seen.insert(*t)).collect();
    let docs = subreddit_docs(posts);
    let n_docs = docs.len() as f64;
    let idf: Vec<f64> = terms
        .iter()
        .map(|t| {
            let df = docs.iter().filter(|d| d.counts.contains_key(t)).count();
            if df == 0 {
                0.0
            } else {
                (n_docs / df as f64).ln()
            }
        })
        .collect();

    let mut ranking: Vec<RankedSubreddit> = docs
        .par_iter()
        .map(|doc| {
            let score = if doc.total == 0 {
                0.0
            } else {
                terms
                    .iter()
                    .zip(&idf)
                    .map(|(t, idf)| doc.counts.get(t).copied().unwrap_or(0) as f64 * idf / doc.total as f64)
                    .sum()
            };
            RankedSubreddit { subreddit: doc.name.to_string(), score }
        })
        .collect();
    sort_desc_lexicographic(&mut ranking, |r| (r.score, r.subreddit.as_str()));
    Ok(ranking)
}

/// Proposes up to `k` new terms: the pooled `top_subreddits` form one
/// document, every other subreddit is its own document, and terms are ranked
/// by tf-idf in the pooled document. Query terms, stopwords, and terms with a
/// non-positive score are excluded.
pub fn expand_query<S: AsRef<str>>(
    posts: &[NormalizedPost],
    top_subreddits: &[S],
    query: &[S],
    k: usize,
    normalizer: &Normalizer,
) -> Result<Vec<ScoredTerm>> {
    if top_subreddits.is_empty() {
        return Err(DiscoveryError::InvalidParams("top_subreddits is empty".into()));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let top: HashSet<&str> = top_subreddits.iter().map(AsRef::as_ref).collect();
    let query: HashSet<&str> = query.iter().map(AsRef::as_ref).collect();
    let docs = subreddit_docs(posts);

    let mut pooled: HashMap<&str, u64> = HashMap::new();
    let mut pooled_total = 0u64;
    let mut rest = Vec::new();
    for doc in &docs {
        if top.contains(doc.name) {
            for (t, n) in &doc.counts {
                *pooled.entry(t).or_insert(0) += n;
            }
            pooled_total += doc.total;
        } else {
            rest.push(doc);
        }
    }
    if pooled_total == 0 {
        return Ok(Vec::new());
    }
    let n_docs = (rest.len() + 1) as f64;
    let mut scored: Vec<ScoredTerm> = pooled
        .iter()
        .filter(|(t, _)| !query.contains(*t) && !normalizer.is_stopword(t))
        .filter_map(|(t, &n)| {
            let df = 1 + rest.iter().filter(|d| d.counts.contains_key(t)).count();
            let score = n as f64 / pooled_total as f64 * (n_docs / df as f64).ln();
            (score > 0.0).then(|| ScoredTerm { term: t.to_string(), score })
        })
        .collect();
    sort_desc_lexicographic(&mut scored, |s| (s.score, s.term.as_str()));
    scored.truncate(k);
    Ok(scored)
}

pub enum ReviewDecision {
    Accept(Vec<String>),
    Pending(PathBuf),
}

/// The human checkpoint between expansion rounds.
pub trait CandidateReview {
    fn review(&mut self, round: usize, candidates: &[ScoredTerm]) -> Result<ReviewDecision>;
}

/// Batch mode without review files: every candidate is accepted.
pub struct AcceptAll;

impl CandidateReview for AcceptAll {
    fn review(&mut self, _round: usize, candidates: &[ScoredTerm]) -> Result<ReviewDecision> {
        Ok(ReviewDecision::Accept(candidates.iter().map(|c| c.term.clone()).collect()))
    }
}

/// File-based checkpoint. Each round's candidates are written to
/// `<dir>/<prefix>round_<n>.csv` (`term,score,accept`). In batch mode all
/// candidates are accepted. In interactive mode a missing file is written and
/// the run stops with [`DiscoveryError::ReviewPending`]; on the next run the
/// edited file is read back and only rows with `accept=1` are kept.
pub struct ReviewFiles {
    pub dir: PathBuf,
    pub prefix: String,
    pub interactive: bool,
}

impl ReviewFiles {
    pub fn path_for(&self, round: usize) -> PathBuf {
        self.dir.join(format!("{}round_{round}.csv", self.prefix))
    }
}

impl CandidateReview for ReviewFiles {
    fn review(&mut self, round: usize, candidates: &[ScoredTerm]) -> Result<ReviewDecision> {
        let path = self.path_for(round);
        if self.interactive && path.exists() {
            let accepted = read_term_review(&path)?;
            let offered: HashSet<&str> = candidates.iter().map(|c| c.term.as_str()).collect();
            if let Some(stale) = accepted.iter().find(|t| !offered.contains(t.as_str())) {
                return Err(DiscoveryError::MalformedReviewFile {
                    path,
                    msg: format!("term {stale:?} was not offered in this round; the file is stale"),
                });
            }
            return Ok(ReviewDecision::Accept(accepted));
        }
        std::fs::create_dir_all(&self.dir)?;
        write_term_review(File::create(&path)?, candidates)?;
        if self.interactive {
            Ok(ReviewDecision::Pending(path))
        } else {
            Ok(ReviewDecision::Accept(candidates.iter().map(|c| c.term.clone()).collect()))
        }
    }
}

pub fn write_term_review<W: Write>(out: W, candidates: &[ScoredTerm]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["term", "score", "accept"])?;
    for c in candidates {
        w.write_record([c.term.as_str(), &format_sig6(c.score), "1"])?;
    }
    w.flush()?;
    Ok(())
}

/// Accepted terms of a `term,score,accept` review file, in file order.
pub fn read_term_review(path: &Path) -> Result<Vec<String>> {
    let bad = |msg: String| DiscoveryError::MalformedReviewFile { path: path.to_path_buf(), msg };
    let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name).ok_or_else(|| bad(format!("missing column {name}")));
    let (term_col, accept_col) = (col("term")?, col("accept")?);
    let mut accepted = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let term = row.get(term_col).unwrap_or("").trim();
        match row.get(accept_col).unwrap_or("").trim() {
            "1" if !term.is_empty() => accepted.push(term.to_string()),
            "1" => return Err(bad(format!("row {}: empty term", i + 2))),
            "0" => {}
            other => return Err(bad(format!("row {}: accept must be 0 or 1, got {other:?}", i + 2))),
        }
    }
    Ok(accepted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveryParams {
    pub rounds: usize,
    /// Subreddits pooled for expansion in each round.
    pub top_m: usize,
    /// Candidates proposed per round.
    pub k: usize,
}

impl Default for DiscoveryParams {
    fn default() -> Self {
        DiscoveryParams { rounds: 3, top_m: 150, k: 10 }
    }
}

/// Alternates scoring and expansion for up to `params.rounds` rounds. Stops
/// early once a round adds no term, so `rounds_run` is the number of rounds
/// actually executed. The returned ranking uses the final query.
pub fn run_discovery<S: AsRef<str>>(
    posts: &[NormalizedPost],
    seeds: &[S],
    params: DiscoveryParams,
    normalizer: &Normalizer,
    reviewer: &mut dyn CandidateReview,
) -> Result<DiscoveryResult> {
    if params.rounds == 0 {
        return Err(DiscoveryError::InvalidParams("rounds must be at least 1".into()));
    }
    if params.top_m == 0 {
        return Err(DiscoveryError::InvalidParams("top_m must be at least 1".into()));
    }
    let mut query: Vec<String> = Vec::new();
    for s in seeds {
        let s = s.as_ref().trim().to_lowercase();
        if !s.is_empty() && !query.contains(&s) {
            query.push(s);
        }
    }
    if query.is_empty() {
        return Err(DiscoveryError::EmptyQuery);
    }
    if posts.is_empty() {
        return Err(DiscoveryError::EmptyCorpus);
    }

    let mut rounds_run = 0;
    for round in 1..=params.rounds {
        rounds_run = round;
        let ranking = score_subreddits(posts, &query)?;
        let top: Vec<String> = ranking.iter().take(params.top_m).map(|r| r.subreddit.clone()).collect();
        let candidates = expand_query(posts, &top, &query, params.k, normalizer)?;
        if candidates.is_empty() {
            break;
        }
        let accepted = match reviewer.review(round, &candidates)? {
            ReviewDecision::Accept(terms) => terms,
            ReviewDecision::Pending(path) => return Err(DiscoveryError::ReviewPending(path)),
        };
        let before = query.len();
        for term in accepted {
            if !query.contains(&term) {
                query.push(term);
            }
        }
        if query.len() == before {
            break;
        }
    }
    let subreddit_ranking = score_subreddits(posts, &query)?;
    Ok(DiscoveryResult { query_terms: query, subreddit_ranking, rounds_run })
}

/// Union of the per-year query terms, sorted.
pub fn merge_queries<'a>(results: impl IntoIterator<Item = &'a DiscoveryResult>) -> BTreeSet<String> {
    results.into_iter().flat_map(|r| r.query_terms.iter().cloned()).collect()
}

/// Subjects × raters category labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMatrix {
    subjects: Vec<String>,
    labels: Vec<Vec<String>>,
}

impl AnnotationMatrix {
    pub fn new(subjects: Vec<String>, labels: Vec<Vec<String>>) -> Result<Self> {
        let invalid = |m: String| DiscoveryError::InvalidMatrix(m);
        if labels.is_empty() {
            return Err(invalid("no subjects".into()));
        }
        if subjects.len() != labels.len() {
            return Err(invalid(format!("{} subject ids for {} rows", subjects.len(), labels.len())));
        }
        let raters = labels[0].len();
        if raters < 2 {
            return Err(invalid(format!("need at least 2 raters, found {raters}")));
        }
        for (i, row) in labels.iter().enumerate() {
            if row.len() != raters {
                return Err(invalid(format!("row {} has {} labels, expected {raters}", i + 1, row.len())));
            }
            if row.iter().any(|l| l.trim().is_empty()) {
                return Err(invalid(format!("row {} has an empty label", i + 1)));
            }
        }
        Ok(AnnotationMatrix { subjects, labels })
    }

    /// Builds a matrix with subjects numbered from 1.
    pub fn from_rows(labels: Vec<Vec<String>>) -> Result<Self> {
        let subjects = (1..=labels.len()).map(|i| i.to_string()).collect();
        Self::new(subjects, labels)
    }

    /// Reads `subject,<rater>,<rater>,...` CSV with a header row.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        let mut subjects = Vec::new();
        let mut labels = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let mut cells = row.iter().map(|c| c.trim().to_string());
            subjects.push(cells.next().unwrap_or_default());
            labels.push(cells.collect());
        }
        Self::new(subjects, labels)
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn raters(&self) -> usize {
        self.labels[0].len()
    }

    pub fn categories(&self) -> BTreeSet<&str> {
        self.labels.iter().flatten().map(|l| l.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KappaResult {
    pub kappa: f64,
    pub p_bar: f64,
    pub p_e: f64,
}

/// Fleiss' kappa. When every label falls in one category (`p_e = 1`) the
/// raters agree perfectly and kappa is defined as 1.
pub fn fleiss_kappa(matrix: &AnnotationMatrix) -> KappaResult {
    let categories: Vec<&str> = matrix.categories().into_iter().collect();
    let col: HashMap<&str, usize> = categories.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let n = matrix.raters() as f64;
    let n_subjects = matrix.labels.len() as f64;

    let mut totals = vec![0u64; categories.len()];
    let mut p_sum = 0.0;
    for row in &matrix.labels {
        let mut counts = vec![0u64; categories.len()];
        for label in row {
            counts[col[label.as_str()]] += 1;
        }
        let sq: u64 = counts.iter().map(|c| c * c).sum();
        p_sum += (sq as f64 - n) / (n * (n - 1.0));
        for (t, c) in totals.iter_mut().zip(&counts) {
            *t += c;
        }
    }
    let p_bar = p_sum / n_subjects;
    let p_e: f64 = totals
        .iter()
        .map(|&t| {
            let p = t as f64 / (n_subjects * n);
            p * p
        })
        .sum();
    let kappa = if p_e >= 1.0 { 1.0 } else { (p_bar - p_e) / (1.0 - p_e) };
    KappaResult { kappa, p_bar, p_e }
}

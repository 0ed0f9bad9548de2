//! Categorized term lexicons: seed sets, embedding-based candidate
//! expansion, the expert review round-trip, the two-level route-of-
//! administration taxonomy, mention matching and volume growth.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingModel};
use crate::textnorm::NormalizedPost;

pub const DEFAULT_NEIGHBOURS: usize = 20;
pub const ANTAGONIST: &str = "Antagonist";

const SUBSTANCE_CSV: &str = include_str!("../data/lexicon_substance.csv");
const ROA_CSV: &str = include_str!("../data/lexicon_roa.csv");
const TAMPERING_CSV: &str = include_str!("../data/lexicon_tampering.csv");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("seed set {0:?} is empty")]
    EmptySeedSet(String),
    #[error("seed {0:?} is not a lowercase lemma")]
    InvalidSeed(String),
    #[error("none of the seeds in {0:?} are in the model vocabulary")]
    NoSeedsInVocabulary(String),
    #[error("{path}: {msg}")]
    MalformedReviewFile { path: PathBuf, msg: String },
    #[error("malformed lexicon file: {0}")]
    MalformedLexicon(String),
    #[error("term {term:?} assigned to both {first:?} and {second:?}")]
    DuplicateTermAssignment { term: String, first: String, second: String },
    #[error("no terms were accepted in the review file")]
    NoTermsAccepted,
    #[error("no post mentions a seed term")]
    ZeroSeedVolume,
    #[error("seed term {0:?} is not part of the category")]
    SeedOutsideCategory(String),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("unknown lexicon domain {0:?}")]
    UnknownDomain(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LexiconError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Substance,
    Roa,
    Tampering,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Substance, Domain::Roa, Domain::Tampering];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Substance => "substance",
            Domain::Roa => "roa",
            Domain::Tampering => "tampering",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = LexiconError;

    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| LexiconError::UnknownDomain(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSet {
    name: String,
    terms: BTreeSet<String>,
}

impl SeedSet {
    pub fn new<I, S>(name: impl Into<String>, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let name = name.into();
        let terms: BTreeSet<String> = terms.into_iter().map(Into::into).collect();
        if terms.is_empty() {
            return Err(LexiconError::EmptySeedSet(name));
        }
        if let Some(bad) = terms.iter().find(|t| t.is_empty() || t.chars().any(|c| c.is_uppercase() || c.is_whitespace())) {
            return Err(LexiconError::InvalidSeed(bad.clone()));
        }
        Ok(SeedSet { name, terms })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn terms(&self) -> &BTreeSet<String> {
        &self.terms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub term: String,
    pub best_cosine: f64,
    pub nearest_seed: String,
}

/// Expansion result: the union of every seed's neighbourhood plus the seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub source: String,
    /// Sorted by descending cosine, ties by term.
    pub candidates: Vec<Candidate>,
    /// Seeds that had no usable vector in the model.
    pub missing_seeds: Vec<String>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn terms(&self) -> BTreeSet<&str> {
        self.candidates.iter().map(|c| c.term.as_str()).collect()
    }
}

/// Ē = ⋃ neighbours(w, n) ∪ K. Duplicates keep the highest cosine (ties go
/// to the lexicographically smaller seed). Seeds enter with cosine 1.
pub fn expand_seeds(model: &EmbeddingModel, seeds: &SeedSet, n: usize) -> Result<CandidateSet> {
    let mut best: BTreeMap<String, (f64, String)> = BTreeMap::new();
    let mut offer = |term: &str, cos: f64, seed: &str| {
        let better = match best.get(term) {
            None => true,
            Some((c, s)) => cos > *c || (cos == *c && seed < s.as_str()),
        };
        if better {
            best.insert(term.to_string(), (cos, seed.to_string()));
        }
    };
    let mut missing = Vec::new();
    for seed in &seeds.terms {
        match model.neighbours(seed, n) {
            Ok(neigh) => {
                for (term, cos) in neigh {
                    offer(&term, cos, seed);
                }
            }
            Err(EmbedError::UnknownTerm(_) | EmbedError::ZeroVector(_)) => missing.push(seed.clone()),
            Err(e) => return Err(e.into()),
        }
    }
    if missing.len() == seeds.terms.len() {
        return Err(LexiconError::NoSeedsInVocabulary(seeds.name.clone()));
    }
    for seed in &seeds.terms {
        offer(seed, 1.0, seed);
    }
    let mut candidates: Vec<Candidate> = best
        .into_iter()
        .map(|(term, (best_cosine, nearest_seed))| Candidate { term, best_cosine, nearest_seed })
        .collect();
    candidates.sort_by(|a, b| b.best_cosine.total_cmp(&a.best_cosine).then_with(|| a.term.cmp(&b.term)));
    Ok(CandidateSet { source: seeds.name.clone(), candidates, missing_seeds: missing })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub post_id: String,
    pub term: String,
    pub category: String,
    pub sentence_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    category: String,
    seed: bool,
}

/// Terms grouped into categories. A term belongs to exactly one category.
/// ROA lexicons carry a secondary → primary taxonomy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    domain: Domain,
    terms: BTreeMap<String, Entry>,
    taxonomy: Option<BTreeMap<String, String>>,
}

impl Lexicon {
    pub fn new(domain: Domain) -> Self {
        Lexicon { domain, terms: BTreeMap::new(), taxonomy: None }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Adds a term. Re-adding to the same category is a no-op apart from
    /// the seed flag, which is or-ed.
    pub fn insert(&mut self, term: &str, category: &str, seed: bool) -> Result<()> {
        match self.terms.get_mut(term) {
            Some(e) if e.category != category => Err(LexiconError::DuplicateTermAssignment {
                term: term.to_string(),
                first: e.category.clone(),
                second: category.to_string(),
            }),
            Some(e) => {
                e.seed |= seed;
                Ok(())
            }
            None => {
                self.terms.insert(term.to_string(), Entry { category: category.to_string(), seed });
                Ok(())
            }
        }
    }

    pub fn set_primary(&mut self, secondary: &str, primary: &str) {
        self.taxonomy.get_or_insert_with(BTreeMap::new).insert(secondary.to_string(), primary.to_string());
    }

    pub fn category_of(&self, term: &str) -> Option<&str> {
        self.terms.get(term).map(|e| e.category.as_str())
    }

    pub fn is_seed(&self, term: &str) -> bool {
        self.terms.get(term).is_some_and(|e| e.seed)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.terms.keys().map(String::as_str)
    }

    pub fn categories(&self) -> BTreeSet<&str> {
        self.terms.values().map(|e| e.category.as_str()).collect()
    }

    pub fn category_terms(&self, category: &str) -> BTreeSet<&str> {
        self.terms.iter().filter(|(_, e)| e.category == category).map(|(t, _)| t.as_str()).collect()
    }

    pub fn seed_terms(&self, category: &str) -> BTreeSet<&str> {
        self.terms
            .iter()
            .filter(|(_, e)| e.category == category && e.seed)
            .map(|(t, _)| t.as_str())
            .collect()
    }

    pub fn taxonomy(&self) -> Option<&BTreeMap<String, String>> {
        self.taxonomy.as_ref()
    }

    pub fn primary_of(&self, secondary: &str) -> Option<&str> {
        self.taxonomy.as_ref()?.get(secondary).map(String::as_str)
    }

    pub fn primary_categories(&self) -> BTreeSet<&str> {
        self.taxonomy.iter().flat_map(|t| t.values().map(String::as_str)).collect()
    }

    /// A copy without the given category (and its taxonomy entry).
    pub fn without_category(&self, category: &str) -> Lexicon {
        let mut out = self.clone();
        out.terms.retain(|_, e| e.category != category);
        if let Some(t) = out.taxonomy.as_mut() {
            t.remove(category);
        }
        out
    }

    fn check_taxonomy(&self) -> Result<()> {
        if let Some(tax) = &self.taxonomy {
            if let Some(c) = self.categories().into_iter().find(|c| !tax.contains_key(*c)) {
                return Err(LexiconError::MalformedLexicon(format!("category {c:?} has no primary category")));
            }
        }
        Ok(())
    }

    /// Reads a lexicon CSV (`domain,category,primary_category,term,seed`).
    /// Every row must share one domain.
    pub fn read_csv<R: Read>(reader: R) -> Result<Lexicon> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["domain", "category", "primary_category", "term", "seed"] {
            return Err(LexiconError::MalformedLexicon(format!("unexpected header {headers:?}")));
        }
        let mut lexicon: Option<Lexicon> = None;
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let bad = |msg: String| LexiconError::MalformedLexicon(format!("row {}: {msg}", line + 2));
            let domain: Domain = record[0].parse().map_err(|_| bad(format!("unknown domain {:?}", &record[0])))?;
            let lex = lexicon.get_or_insert_with(|| Lexicon::new(domain));
            if lex.domain != domain {
                return Err(bad(format!("domain {domain} in a {} lexicon", lex.domain)));
            }
            let (category, primary, term) = (&record[1], &record[2], &record[3]);
            if category.is_empty() || term.is_empty() {
                return Err(bad("empty category or term".into()));
            }
            let seed = match &record[4] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("seed flag {other:?}"))),
            };
            lex.insert(term, category, seed)?;
            if !primary.is_empty() {
                match lex.primary_of(category) {
                    Some(p) if p != primary => {
                        return Err(bad(format!("{category:?} mapped to both {p:?} and {primary:?}")));
                    }
                    _ => lex.set_primary(category, primary),
                }
            }
        }
        let lexicon = lexicon.ok_or_else(|| LexiconError::MalformedLexicon("no rows".into()))?;
        lexicon.check_taxonomy()?;
        Ok(lexicon)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["domain", "category", "primary_category", "term", "seed"])?;
        let mut rows: Vec<(&str, &str)> = self.terms.iter().map(|(t, e)| (e.category.as_str(), t.as_str())).collect();
        rows.sort();
        for (category, term) in rows {
            let primary = self.primary_of(category).unwrap_or("");
            let seed = if self.is_seed(term) { "1" } else { "0" };
            w.write_record([self.domain.as_str(), category, primary, term, seed])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_path(path: &Path) -> Result<Lexicon> {
        Lexicon::read_csv(File::open(path)?)
    }

    pub fn write_path(&self, path: &Path) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

/// The shipped vocabularies.
pub fn load_fixture_lexicon(domain: Domain) -> Lexicon {
    let text = match domain {
        Domain::Substance => SUBSTANCE_CSV,
        Domain::Roa => ROA_CSV,
        Domain::Tampering => TAMPERING_CSV,
    };
    Lexicon::read_csv(text.as_bytes()).expect("shipped lexicon is well-formed")
}

/// Writes the review sheet with `accept` set to 0 and `category` blank.
pub fn export_review<W: Write>(candidates: &CandidateSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["term", "best_cosine", "nearest_seed", "accept", "category"])?;
    for c in &candidates.candidates {
        w.write_record([c.term.as_str(), &format!("{:.6}", c.best_cosine), &c.nearest_seed, "0", ""])?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_review_path(candidates: &CandidateSet, path: &Path) -> Result<()> {
    export_review(candidates, File::create(path)?)
}

#[derive(Debug, Deserialize)]
struct ReviewRow {
    term: String,
    best_cosine: f64,
    nearest_seed: String,
    accept: String,
    #[serde(default)]
    category: String,
}

/// Reads an edited review sheet. Rows with `accept=1` and a category become
/// the lexicon; a term whose nearest seed is itself is flagged as a seed.
/// ROA categories take their primary category from `taxonomy`.
pub fn import_review<R: Read>(
    reader: R,
    source: &Path,
    domain: Domain,
    taxonomy: Option<&BTreeMap<String, String>>,
) -> Result<Lexicon> {
    let malformed = |msg: String| LexiconError::MalformedReviewFile { path: source.to_path_buf(), msg };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut lexicon = Lexicon::new(domain);
    for (i, row) in rdr.deserialize::<ReviewRow>().enumerate() {
        let row = row.map_err(|e| malformed(e.to_string()))?;
        let accepted = match row.accept.as_str() {
            "1" => true,
            "0" | "" => false,
            other => return Err(malformed(format!("row {}: accept must be 0 or 1, got {other:?}", i + 2))),
        };
        if row.term.is_empty() || !row.best_cosine.is_finite() {
            return Err(malformed(format!("row {}: empty term or bad cosine", i + 2)));
        }
        if !accepted || row.category.is_empty() {
            continue;
        }
        lexicon.insert(&row.term, &row.category, row.term == row.nearest_seed)?;
        if let Some(tax) = taxonomy {
            let primary = tax.get(&row.category).ok_or_else(|| LexiconError::UnknownCategory(row.category.clone()))?;
            lexicon.set_primary(&row.category, primary);
        }
    }
    if lexicon.is_empty() {
        return Err(LexiconError::NoTermsAccepted);
    }
    Ok(lexicon)
}

pub fn import_review_path(path: &Path, domain: Domain, taxonomy: Option<&BTreeMap<String, String>>) -> Result<Lexicon> {
    import_review(File::open(path)?, path, domain, taxonomy)
}

/// One mention per occurrence of a lexicon term, by exact lemma equality.
pub fn match_mentions(post: &NormalizedPost, lexicon: &Lexicon) -> Vec<Mention> {
    let mut out = Vec::new();
    for (sentence_index, sentence) in post.sentences.iter().enumerate() {
        for lemma in sentence {
            if let Some(category) = lexicon.category_of(lemma) {
                out.push(Mention {
                    post_id: post.post_id.clone(),
                    term: lemma.clone(),
                    category: category.to_string(),
                    sentence_index,
                });
            }
        }
    }
    out
}

/// Mentions for every post, in post order.
pub fn match_corpus(posts: &[NormalizedPost], lexicon: &Lexicon) -> Vec<Vec<Mention>> {
    posts.par_iter().map(|p| match_mentions(p, lexicon)).collect()
}

fn posts_mentioning(posts: &[NormalizedPost], terms: &BTreeSet<&str>) -> usize {
    posts.par_iter().filter(|p| p.lemmas().any(|l| terms.contains(l))).count()
}

/// Percentage growth in posts retrieved by `full_terms` over `seed_terms`.
pub fn volume_growth(posts: &[NormalizedPost], full_terms: &BTreeSet<&str>, seed_terms: &BTreeSet<&str>) -> Result<f64> {
    if let Some(t) = seed_terms.iter().find(|t| !full_terms.contains(*t)) {
        return Err(LexiconError::SeedOutsideCategory(t.to_string()));
    }
    let seed = posts_mentioning(posts, seed_terms);
    if seed == 0 {
        return Err(LexiconError::ZeroSeedVolume);
    }
    let full = posts_mentioning(posts, full_terms);
    Ok(100.0 * (full as f64 - seed as f64) / seed as f64)
}

/// Volume growth of one lexicon category over its seed-flagged terms.
pub fn category_volume_growth(posts: &[NormalizedPost], lexicon: &Lexicon, category: &str) -> Result<f64> {
    let full = lexicon.category_terms(category);
    if full.is_empty() {
        return Err(LexiconError::UnknownCategory(category.to_string()));
    }
    volume_growth(posts, &full, &lexicon.seed_terms(category))
}

/// Per-category counts, handy for summaries.
pub fn category_sizes(lexicon: &Lexicon) -> BTreeMap<String, usize> {
    let mut out: HashMap<&str, usize> = HashMap::new();
    for e in lexicon.terms.values() {
        *out.entry(e.category.as_str()).or_insert(0) += 1;
    }
    out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

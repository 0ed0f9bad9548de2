//! Text normalization: sentence segmentation, tokenization, stopword removal,
//! dictionary lemmatization, and yearly vocabulary pruning.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::RawPost;

const LEMMA_HEADER: &str = "# opilex-lemmas v1";
const STOPWORD_HEADER: &str = "# opilex-stopwords v1";
const NORMALIZED_FORMAT: &str = "opilex-normalized";
const NORMALIZED_VERSION: u32 = 1;

static BUILTIN_LEMMAS: &str = include_str!("../data/lemmas.txt");
static BUILTIN_STOPWORDS: &str = include_str!("../data/stopwords.txt");

#[derive(Debug, Error)]
pub enum TextnormError {
    #[error("{file}: {msg}")]
    DataFile { file: &'static str, msg: String },
    #[error("normalized cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A post reduced to per-sentence lemma lists. Sentence indices are the
/// positions in `sentences`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedPost {
    pub post_id: String,
    pub author_id: String,
    pub subreddit: String,
    pub created_utc: i64,
    pub sentences: Vec<Vec<String>>,
}

impl NormalizedPost {
    pub fn lemmas(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().flatten().map(String::as_str)
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

/// Lemmas that reached `min_count` occurrences in one year.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub year: i32,
    pub entries: BTreeMap<String, u64>,
    pub min_count: u64,
}

impl Vocabulary {
    pub fn contains(&self, lemma: &str) -> bool {
        self.entries.contains_key(lemma)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of text, and on
/// blank lines. Sentences are trimmed; empty ones are dropped.
pub fn segment_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for para in paragraphs(text) {
        let mut start = 0;
        let mut chars = para.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            if !matches!(c, '.' | '!' | '?') {
                continue;
            }
            let at_boundary = match chars.peek() {
                None => true,
                Some(&(_, next)) => next.is_whitespace(),
            };
            if at_boundary {
                let end = i + c.len_utf8();
                push_trimmed(&mut out, &para[start..end]);
                start = end;
            }
        }
        push_trimmed(&mut out, &para[start..]);
    }
    out
}

fn push_trimmed<'a>(out: &mut Vec<&'a str>, s: &'a str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s);
    }
}

fn paragraphs(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.trim().is_empty() {
            if offset > start {
                out.push(&text[start..offset]);
            }
            start = offset + line.len();
        }
        offset += line.len();
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Stopword list plus lemma dictionary.
#[derive(Debug, Clone)]
pub struct Normalizer {
    stopwords: HashSet<String>,
    lemmas: HashMap<String, String>,
}

impl Normalizer {
    /// The shipped English resources, parsed once per process.
    pub fn english() -> &'static Normalizer {
        static NORMALIZER: OnceLock<Normalizer> = OnceLock::new();
        NORMALIZER.get_or_init(|| {
            Normalizer::from_data(BUILTIN_LEMMAS, BUILTIN_STOPWORDS).expect("shipped resources are valid")
        })
    }

    /// Builds a normalizer from the contents of a lemma table (`form lemma`
    /// per line) and a stopword list (one word per line). Both start with a
    /// version header line.
    pub fn from_data(lemma_table: &str, stopword_list: &str) -> Result<Normalizer, TextnormError> {
        let stopwords = parse_stopwords(stopword_list)?;
        let mut lemmas = parse_lemmas(lemma_table)?;
        resolve_to_fixed_points(&mut lemmas);
        Ok(Normalizer { stopwords, lemmas })
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    pub fn stopwords(&self) -> impl Iterator<Item = &str> {
        self.stopwords.iter().map(String::as_str)
    }

    /// Dictionary lookup, then suffix rules, then identity. A suffix-rule
    /// result is accepted only if it is itself a fixed point, which keeps the
    /// lemmatizer idempotent.
    pub fn lemmatize(&self, token: &str) -> String {
        if let Some(lemma) = self.lemmas.get(token) {
            return lemma.clone();
        }
        match suffix_rule(token) {
            Some(stem) if self.is_fixed_point(&stem) => stem,
            _ => token.to_string(),
        }
    }

    fn is_fixed_point(&self, word: &str) -> bool {
        match self.lemmas.get(word) {
            Some(lemma) => lemma == word,
            None => suffix_rule(word).is_none(),
        }
    }

    /// Lowercases, deletes apostrophes, splits on non-alphanumerics, drops
    /// stopwords, and lemmatizes. Tokens containing a digit pass through verbatim.
    pub fn normalize_tokens(&self, sentence: &str) -> Vec<String> {
        let lowered: String = sentence
            .chars()
            .filter(|c| !matches!(c, '\'' | '\u{2018}' | '\u{2019}' | '\u{02BC}'))
            .flat_map(char::to_lowercase)
            .collect();
        let mut out = Vec::new();
        for token in lowered.split(|c: char| !c.is_alphanumeric()) {
            if token.is_empty() {
                continue;
            }
            if token.chars().any(|c| c.is_numeric()) {
                out.push(token.to_string());
                continue;
            }
            if self.is_stopword(token) {
                continue;
            }
            let lemma = self.lemmatize(token);
            if !self.is_stopword(&lemma) {
                out.push(lemma);
            }
        }
        out
    }

    /// Segments and normalizes one post. With a vocabulary, out-of-vocabulary
    /// lemmas are dropped; sentences are kept even when they end up empty.
    pub fn normalize_post(&self, post: &RawPost, vocab: Option<&Vocabulary>) -> NormalizedPost {
        let sentences = segment_sentences(&post.text)
            .into_iter()
            .map(|s| {
                let mut lemmas = self.normalize_tokens(s);
                if let Some(v) = vocab {
                    lemmas.retain(|l| v.contains(l));
                }
                lemmas
            })
            .collect();
        NormalizedPost {
            post_id: post.post_id.clone(),
            author_id: post.author_id.clone(),
            subreddit: post.subreddit.clone(),
            created_utc: post.created_utc,
            sentences,
        }
    }
}

fn suffix_rule(word: &str) -> Option<String> {
    let n = word.len();
    if !word.is_ascii() || n < 4 {
        return None;
    }
    let undouble = |stem: &str| -> String {
        let b = stem.as_bytes();
        let k = b.len();
        if k >= 3 && b[k - 1] == b[k - 2] && !matches!(b[k - 1], b'l' | b's' | b'z') && !is_vowel(b[k - 1]) {
            stem[..k - 1].to_string()
        } else {
            stem.to_string()
        }
    };
    if let Some(stem) = word.strip_suffix("ies") {
        return (stem.len() >= 2).then(|| format!("{stem}y"));
    }
    if let Some(stem) = word.strip_suffix("sses") {
        return Some(format!("{stem}ss"));
    }
    for suffix in ["ches", "shes", "xes", "zes"] {
        if word.ends_with(suffix) {
            return Some(word[..n - 2].to_string());
        }
    }
    if word.ends_with('s') && !["ss", "us", "is", "os"].iter().any(|s| word.ends_with(s)) {
        return Some(word[..n - 1].to_string());
    }
    if let Some(stem) = word.strip_suffix("ied") {
        return (stem.len() >= 2).then(|| format!("{stem}y"));
    }
    if n >= 5 && word.ends_with("ed") && !word.ends_with("eed") {
        return Some(undouble(&word[..n - 2]));
    }
    if n >= 6 && word.ends_with("ing") {
        return Some(undouble(&word[..n - 3]));
    }
    None
}

fn is_vowel(b: u8) -> bool {
    matches!(b, b'a' | b'e' | b'i' | b'o' | b'u')
}

fn data_lines<'a>(
    text: &'a str,
    header: &str,
    file: &'static str,
) -> Result<impl Iterator<Item = &'a str>, TextnormError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(first) if first.trim() == header => {}
        other => {
            return Err(TextnormError::DataFile {
                file,
                msg: format!("expected header {header:?}, found {other:?}"),
            })
        }
    }
    Ok(lines.map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')))
}

fn parse_stopwords(text: &str) -> Result<HashSet<String>, TextnormError> {
    Ok(data_lines(text, STOPWORD_HEADER, "stopwords")?.map(str::to_lowercase).collect())
}

fn parse_lemmas(text: &str) -> Result<HashMap<String, String>, TextnormError> {
    let mut table = HashMap::new();
    for line in data_lines(text, LEMMA_HEADER, "lemmas")? {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(form), Some(lemma), None) => {
                table.insert(form.to_lowercase(), lemma.to_lowercase());
            }
            _ => {
                return Err(TextnormError::DataFile { file: "lemmas", msg: format!("bad line {line:?}") });
            }
        }
    }
    Ok(table)
}

// Follows form -> lemma chains so that every value maps to itself.
fn resolve_to_fixed_points(table: &mut HashMap<String, String>) {
    let keys: Vec<String> = table.keys().cloned().collect();
    for key in keys {
        let mut current = table[&key].clone();
        let mut steps = 0;
        while let Some(next) = table.get(&current) {
            if *next == current || steps > 16 {
                break;
            }
            current = next.clone();
            steps += 1;
        }
        table.insert(key, current);
    }
    let values: Vec<String> = table.values().cloned().collect();
    for v in values {
        table.entry(v.clone()).or_insert(v);
    }
}

/// Counts lemma occurrences and keeps those with at least `min_count`.
pub fn build_vocabulary(posts: &[NormalizedPost], year: i32, min_count: u64) -> Vocabulary {
    let counts = posts
        .par_iter()
        .fold(HashMap::<&str, u64>::new, |mut acc, post| {
            for lemma in post.lemmas() {
                *acc.entry(lemma).or_insert(0) += 1;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_insert(0) += v;
            }
            a
        });
    let entries = counts
        .into_iter()
        .filter(|&(_, n)| n >= min_count)
        .map(|(k, n)| (k.to_string(), n))
        .collect();
    Vocabulary { year, entries, min_count }
}

/// Normalizes posts in parallel; output order matches input order.
pub fn normalize_corpus(
    normalizer: &Normalizer,
    posts: &[RawPost],
    vocab: Option<&Vocabulary>,
) -> Vec<NormalizedPost> {
    posts.par_iter().map(|p| normalizer.normalize_post(p, vocab)).collect()
}

#[derive(Serialize, Deserialize)]
struct NormalizedHeader {
    format: String,
    version: u32,
    posts: usize,
}

pub fn write_normalized<W: Write>(posts: &[NormalizedPost], mut out: W) -> Result<(), TextnormError> {
    let header = NormalizedHeader { format: NORMALIZED_FORMAT.into(), version: NORMALIZED_VERSION, posts: posts.len() };
    let to_cache = |e: serde_json::Error| TextnormError::Cache(e.to_string());
    serde_json::to_writer(&mut out, &header).map_err(to_cache)?;
    out.write_all(b"\n")?;
    for post in posts {
        serde_json::to_writer(&mut out, post).map_err(to_cache)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_normalized<R: BufRead>(reader: R) -> Result<Vec<NormalizedPost>, TextnormError> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| TextnormError::Cache("empty file".into()))??;
    let header: NormalizedHeader =
        serde_json::from_str(&header).map_err(|e| TextnormError::Cache(format!("bad header: {e}")))?;
    if header.format != NORMALIZED_FORMAT || header.version != NORMALIZED_VERSION {
        return Err(TextnormError::Cache(format!("unsupported {} v{}", header.format, header.version)));
    }
    let mut posts = Vec::with_capacity(header.posts);
    for line in lines {
        let line = line?;
        if !line.is_empty() {
            posts.push(serde_json::from_str(&line).map_err(|e| TextnormError::Cache(e.to_string()))?);
        }
    }
    if posts.len() != header.posts {
        return Err(TextnormError::Cache(format!("expected {} posts, found {}", header.posts, posts.len())));
    }
    Ok(posts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::PostKind;
    use proptest::prelude::*;

    fn norm() -> &'static Normalizer {
        Normalizer::english()
    }

    fn raw(text: &str) -> RawPost {
        RawPost {
            post_id: "p".into(),
            author_id: "0000000000000001".into(),
            subreddit: "s".into(),
            created_utc: 1_527_811_200,
            kind: PostKind::Comment,
            text: text.into(),
        }
    }

    #[test]
    fn segments_on_terminators() {
        assert_eq!(segment_sentences("I sniff it. Works fast!"), vec!["I sniff it.", "Works fast!"]);
        assert_eq!(segment_sentences("no terminator here"), vec!["no terminator here"]);
        assert_eq!(segment_sentences("a.\n\nb"), vec!["a.", "b"]);
        assert!(segment_sentences("").is_empty());
        assert!(segment_sentences("  \n \n").is_empty());
    }

    #[test]
    fn terminators_inside_tokens_do_not_split() {
        assert_eq!(segment_sentences("took 2.5mg... then slept"), vec!["took 2.5mg...", "then slept"]);
        assert_eq!(segment_sentences("what?! really"), vec!["what?!", "really"]);
        assert_eq!(segment_sentences("line one\nline two"), vec!["line one\nline two"]);
        assert_eq!(segment_sentences("a\n   \n\nb"), vec!["a", "b"]);
    }

    #[test]
    fn normalizes_example_sentence() {
        assert_eq!(norm().normalize_tokens("She snorted the pills"), vec!["snort", "pill"]);
    }

    #[test]
    fn digit_tokens_are_verbatim() {
        assert_eq!(norm().normalize_tokens("30s and u47700"), vec!["30s", "u47700"]);
        assert!(norm().normalize_tokens("").is_empty());
    }

    #[test]
    fn apostrophes_are_deleted_not_split() {
        assert!(norm().normalize_tokens("don't").is_empty());
        assert_eq!(norm().normalize_tokens("user's"), vec!["user"]);
        assert_eq!(norm().normalize_tokens("I’m boofing"), vec!["boofing"]);
    }

    #[test]
    fn lexicon_terms_survive_lemmatization() {
        for term in ["ms", "roxies", "ocs", "iving", "speedballs", "vaping", "goofballs", "h"] {
            assert_eq!(norm().normalize_tokens(term), vec![term.to_string()], "{term}");
        }
    }

    #[test]
    fn suffix_rules_apply_to_unknown_words() {
        let n = Normalizer::from_data("# opilex-lemmas v1\n", "# opilex-stopwords v1\nthe\n").unwrap();
        assert_eq!(n.lemmatize("zorbs"), "zorb");
        assert_eq!(n.lemmatize("zorbed"), "zorb");
        assert_eq!(n.lemmatize("zorbbing"), "zorb");
        assert_eq!(n.lemmatize("glass"), "glass");
        assert_eq!(n.lemmatize("zorbies"), "zorby");
    }

    #[test]
    fn rejects_missing_header() {
        assert!(Normalizer::from_data("a b\n", "# opilex-stopwords v1\n").is_err());
        assert!(Normalizer::from_data("# opilex-lemmas v1\na b c\n", "# opilex-stopwords v1\n").is_err());
    }

    #[test]
    fn shipped_table_values_are_fixed_points() {
        let n = norm();
        for (form, lemma) in &n.lemmas {
            assert_eq!(&n.lemmatize(lemma), lemma, "{form} -> {lemma}");
        }
    }

    #[test]
    fn vocabulary_threshold_is_strict_less_than() {
        let mut sentences = vec![vec!["keep".to_string(); 100]];
        sentences.push(vec!["drop".to_string(); 99]);
        let post = NormalizedPost {
            post_id: "p".into(),
            author_id: "a".into(),
            subreddit: "s".into(),
            created_utc: 1,
            sentences,
        };
        let vocab = build_vocabulary(std::slice::from_ref(&post), 2018, 100);
        assert_eq!(vocab.entries.get("keep"), Some(&100));
        assert!(!vocab.contains("drop"));
        let all = build_vocabulary(&[post], 2018, 1);
        assert_eq!(all.len(), 2);
    }

    #[test]
    fn normalize_corpus_keeps_sentence_structure() {
        let posts = vec![raw("The the the"), raw("I snort it. Then I sleep."), raw("")];
        let out = normalize_corpus(norm(), &posts, None);
        assert_eq!(out[0].sentences, vec![Vec::<String>::new()]);
        assert_eq!(out[1].sentences, vec![vec!["snort".to_string()], vec!["sleep".to_string()]]);
        assert!(out[2].sentences.is_empty());

        let vocab = Vocabulary { year: 2018, entries: [("sleep".to_string(), 5)].into(), min_count: 1 };
        let pruned = normalize_corpus(norm(), &posts[1..2], Some(&vocab));
        assert_eq!(pruned[0].sentences, vec![vec![], vec!["sleep".to_string()]]);
    }

    #[test]
    fn normalized_cache_round_trip() {
        let posts = normalize_corpus(norm(), &[raw("I snort it. Then I sleep.")], None);
        let mut buf = Vec::new();
        write_normalized(&posts, &mut buf).unwrap();
        assert_eq!(read_normalized(buf.as_slice()).unwrap(), posts);
    }

    proptest! {
        #[test]
        fn normalize_tokens_is_idempotent(s in "[a-zA-Z0-9 '.,!?-]{0,60}") {
            let once = norm().normalize_tokens(&s);
            let twice = norm().normalize_tokens(&once.join(" "));
            prop_assert_eq!(&twice, &once);
            for lemma in &once {
                prop_assert!(lemma.chars().any(char::is_alphanumeric));
                prop_assert_eq!(lemma.to_lowercase(), lemma.clone());
            }
        }

        #[test]
        fn normalize_tokens_idempotent_on_words(words in prop::collection::vec("[a-z]{1,12}", 0..10)) {
            let once = norm().normalize_tokens(&words.join(" "));
            prop_assert_eq!(norm().normalize_tokens(&once.join(" ")), once);
        }

        #[test]
        fn sentence_count_bounded_by_segments(s in "[a-z .!?\n]{0,80}") {
            let post = norm().normalize_post(&raw(&s), None);
            let segments = s.split_inclusive(['.', '!', '?', '\n']).filter(|x| !x.trim().is_empty()).count();
            prop_assert!(post.sentences.len() <= segments.max(1));
        }

        #[test]
        fn pruning_never_adds_mass(words in prop::collection::vec("[a-e]{1,2}", 0..200), min in 1u64..8) {
            let post = NormalizedPost {
                post_id: "p".into(), author_id: "a".into(), subreddit: "s".into(), created_utc: 1,
                sentences: vec![words],
            };
            let pruned = build_vocabulary(std::slice::from_ref(&post), 2018, min);
            let full = build_vocabulary(&[post], 2018, 1);
            prop_assert!(pruned.entries.values().sum::<u64>() <= full.entries.values().sum::<u64>());
            prop_assert!(pruned.entries.values().all(|&n| n >= min));
        }
    }
}

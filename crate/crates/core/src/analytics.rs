//! Quarterly popularity trends and ρ-thresholded odds-ratio association
//! analysis between lexicon categories.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use chrono::{DateTime, Datelike};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format_sig6;
use crate::ingest::DELETED_AUTHOR;
use crate::lexicon::{Domain, Lexicon, Mention};
use crate::textnorm::NormalizedPost;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("quarter range {0} to {1} is empty")]
    EmptyRange(Quarter, Quarter),
    #[error("lexicon has no primary/secondary taxonomy")]
    NoTaxonomy,
    #[error("category {0:?} cannot be associated with itself")]
    SameCategory(String),
    #[error("association needs two distinct domains, got {0} twice")]
    SameDomain(Domain),
    #[error("degenerate contingency table {0:?}: {1}")]
    DegenerateTable(ContingencyTable, &'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid rho {0:?}")]
    InvalidRho(String),
    #[error("{posts} posts but {mentions} mention lists")]
    LengthMismatch { posts: usize, mentions: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnalyticsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quarter {
    pub year: i32,
    /// 1..=4
    pub quarter: u8,
}

impl Quarter {
    pub fn new(year: i32, quarter: u8) -> Self {
        assert!((1..=4).contains(&quarter), "quarter out of range");
        Quarter { year, quarter }
    }

    pub fn of_timestamp(ts: i64) -> Option<Quarter> {
        let dt = DateTime::from_timestamp(ts, 0)?;
        Some(Quarter { year: dt.year(), quarter: (dt.month0() / 3 + 1) as u8 })
    }

    pub fn next(self) -> Quarter {
        if self.quarter == 4 {
            Quarter { year: self.year + 1, quarter: 1 }
        } else {
            Quarter { year: self.year, quarter: self.quarter + 1 }
        }
    }
}

impl fmt::Display for Quarter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}Q{}", self.year, self.quarter)
    }
}

/// Inclusive quarter range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuarterRange {
    pub start: Quarter,
    pub end: Quarter,
}

impl QuarterRange {
    pub fn new(start: Quarter, end: Quarter) -> Result<Self> {
        if start > end {
            return Err(AnalyticsError::EmptyRange(start, end));
        }
        Ok(QuarterRange { start, end })
    }

    pub fn years(first: i32, last: i32) -> Result<Self> {
        QuarterRange::new(Quarter { year: first, quarter: 1 }, Quarter { year: last, quarter: 4 })
    }

    pub fn contains(&self, q: Quarter) -> bool {
        self.start <= q && q <= self.end
    }

    pub fn quarters(&self) -> Vec<Quarter> {
        let mut out = vec![self.start];
        while *out.last().unwrap() < self.end {
            let next = out.last().unwrap().next();
            out.push(next);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendLevel {
    #[default]
    Category,
    PrimaryAggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Authors with at least one post in the quarter.
    #[default]
    QuarterActive,
    /// Authors with at least one post anywhere in the range.
    Cohort,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendPoint {
    pub quarter: Quarter,
    pub active_authors: usize,
    pub mentioning_authors: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendSeries {
    pub category: String,
    pub points: Vec<TrendPoint>,
}

/// Share of authors mentioning each category, per quarter. An author counts
/// once per quarter however many mentions they make. Posts by deleted
/// authors and posts outside `range` are ignored. `mentions[i]` belongs to
/// `posts[i]`.
pub fn quarterly_popularity(
    posts: &[NormalizedPost],
    mentions: &[Vec<Mention>],
    lexicon: &Lexicon,
    level: TrendLevel,
    range: QuarterRange,
    denominator: Denominator,
) -> Result<Vec<TrendSeries>> {
    if posts.len() != mentions.len() {
        return Err(AnalyticsError::LengthMismatch { posts: posts.len(), mentions: mentions.len() });
    }
    let group_of = |category: &str| -> Option<String> {
        match level {
            TrendLevel::Category => Some(category.to_string()),
            TrendLevel::PrimaryAggregate => lexicon.primary_of(category).map(str::to_string),
        }
    };
    let groups: BTreeSet<String> = match level {
        TrendLevel::Category => lexicon.categories().into_iter().map(str::to_string).collect(),
        TrendLevel::PrimaryAggregate => {
            if lexicon.taxonomy().is_none() {
                return Err(AnalyticsError::NoTaxonomy);
            }
            lexicon.primary_categories().into_iter().map(str::to_string).collect()
        }
    };
    let quarters = range.quarters();
    let mut active: BTreeMap<Quarter, HashSet<&str>> = quarters.iter().map(|&q| (q, HashSet::new())).collect();
    let mut mentioning: BTreeMap<(&str, Quarter), HashSet<&str>> = BTreeMap::new();
    let mut cohort: HashSet<&str> = HashSet::new();
    for (post, ms) in posts.iter().zip(mentions) {
        if post.author_id == DELETED_AUTHOR {
            continue;
        }
        let Some(q) = Quarter::of_timestamp(post.created_utc).filter(|q| range.contains(*q)) else {
            continue;
        };
        let author = post.author_id.as_str();
        active.get_mut(&q).expect("quarter in range").insert(author);
        cohort.insert(author);
        for m in ms {
            if let Some(g) = group_of(&m.category).and_then(|g| groups.get(&g)) {
                mentioning.entry((g.as_str(), q)).or_default().insert(author);
            }
        }
    }
    let series = groups
        .iter()
        .map(|g| TrendSeries {
            category: g.clone(),
            points: quarters
                .iter()
                .map(|&q| {
                    let active_authors = match denominator {
                        Denominator::QuarterActive => active[&q].len(),
                        Denominator::Cohort => cohort.len(),
                    };
                    let mentioning_authors = mentioning.get(&(g.as_str(), q)).map_or(0, HashSet::len);
                    let share = if active_authors == 0 { 0.0 } else { mentioning_authors as f64 / active_authors as f64 };
                    TrendPoint { quarter: q, active_authors, mentioning_authors, share }
                })
                .collect(),
        })
        .collect();
    Ok(series)
}

/// Sentence distance threshold; `Infinite` means anywhere in the post.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rho {
    Finite(u32),
    Infinite,
}

impl Rho {
    pub fn admits(self, distance: usize) -> bool {
        match self {
            Rho::Finite(r) => distance <= r as usize,
            Rho::Infinite => true,
        }
    }

    pub fn default_report_set() -> Vec<Rho> {
        vec![Rho::Finite(0), Rho::Finite(1), Rho::Infinite]
    }
}

impl fmt::Display for Rho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rho::Finite(r) => write!(f, "{r}"),
            Rho::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Rho {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Rho::Infinite),
            t => t.parse().map(Rho::Finite).map_err(|_| AnalyticsError::InvalidRho(s.to_string())),
        }
    }
}

impl Serialize for Rho {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Rho::Finite(r) => s.serialize_u32(*r),
            Rho::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Rho {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(Rho::Finite(n)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// How a post with both categories present but farther apart than ρ counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountingRule {
    /// Two separate events: one A-only and one B-only.
    #[default]
    SeparateEvents,
    /// A joint event regardless of distance.
    JointAnywhere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        ContingencyTable { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn transpose(&self) -> Self {
        ContingencyTable { a: self.a, b: self.c, c: self.b, d: self.d }
    }

    fn merge(self, o: Self) -> Self {
        ContingencyTable { a: self.a + o.a, b: self.b + o.b, c: self.c + o.c, d: self.d + o.d }
    }
}

/// Sorted, deduplicated sentence indices per category for one post.
pub type CategorySentences = BTreeMap<String, Vec<usize>>;

pub fn index_mentions(mentions: &[Mention]) -> CategorySentences {
    let mut out: CategorySentences = BTreeMap::new();
    for m in mentions {
        out.entry(m.category.clone()).or_default().push(m.sentence_index);
    }
    for v in out.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    out
}

fn min_distance(xs: &[usize], ys: &[usize]) -> usize {
    let (mut i, mut j, mut best) = (0, 0, usize::MAX);
    while i < xs.len() && j < ys.len() {
        best = best.min(xs[i].abs_diff(ys[j]));
        if xs[i] < ys[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    best
}

/// One post's contribution to the table.
pub fn post_contribution(sa: &[usize], sb: &[usize], rho: Rho, rule: CountingRule) -> ContingencyTable {
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => ContingencyTable::new(0, 0, 0, 1),
        (false, true) => ContingencyTable::new(0, 1, 0, 0),
        (true, false) => ContingencyTable::new(0, 0, 1, 0),
        (false, false) => {
            if rule == CountingRule::JointAnywhere || rho.admits(min_distance(sa, sb)) {
                ContingencyTable::new(1, 0, 0, 0)
            } else {
                ContingencyTable::new(0, 1, 1, 0)
            }
        }
    }
}

/// 2×2 table of category A against category B over posts. `posts_a[i]` and
/// `posts_b[i]` index the same post (they may be the same slice).
pub fn build_contingency(
    posts_a: &[CategorySentences],
    category_a: &str,
    posts_b: &[CategorySentences],
    category_b: &str,
    rho: Rho,
    rule: CountingRule,
) -> Result<ContingencyTable> {
    if category_a == category_b {
        return Err(AnalyticsError::SameCategory(category_a.to_string()));
    }
    if posts_a.len() != posts_b.len() {
        return Err(AnalyticsError::LengthMismatch { posts: posts_a.len(), mentions: posts_b.len() });
    }
    let empty: Vec<usize> = Vec::new();
    Ok(posts_a
        .par_iter()
        .zip(posts_b)
        .map(|(pa, pb)| {
            let sa = pa.get(category_a).unwrap_or(&empty);
            let sb = pb.get(category_b).unwrap_or(&empty);
            post_contribution(sa, sb, rho, rule)
        })
        .reduce(ContingencyTable::default, ContingencyTable::merge))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    pub alpha: f64,
    pub z: f64,
    pub zero_cell_correction: bool,
    pub rule: CountingRule,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        AssociationConfig { alpha: 0.01, z: 1.96, zero_cell_correction: true, rule: CountingRule::SeparateEvents }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AnalyticsError::InvalidConfig(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.z > 0.0 && self.z.is_finite()) {
            return Err(AnalyticsError::InvalidConfig(format!("z must be positive, got {}", self.z)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OddsRatio {
    pub odds_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub chi2: f64,
    pub p_value: f64,
    /// Whether 0.5 was added to every cell.
    pub corrected: bool,
}

/// Odds ratio with a Woolf confidence interval and a Pearson chi-square
/// p-value (df = 1, no continuity correction). The p-value always uses the
/// observed counts; the Haldane correction only affects OR and CI.
pub fn odds_ratio(table: &ContingencyTable, config: &AssociationConfig) -> Result<OddsRatio> {
    let t = *table;
    if t.total() == 0 {
        return Err(AnalyticsError::DegenerateTable(t, "empty table"));
    }
    if t.a + t.b == 0 || t.c + t.d == 0 || t.a + t.c == 0 || t.b + t.d == 0 {
        return Err(AnalyticsError::DegenerateTable(t, "empty margin"));
    }
    let has_zero = [t.a, t.b, t.c, t.d].contains(&0);
    if has_zero && !config.zero_cell_correction {
        return Err(AnalyticsError::DegenerateTable(t, "zero cell"));
    }
    let shift = if has_zero { 0.5 } else { 0.0 };
    let [a, b, c, d] = [t.a, t.b, t.c, t.d].map(|x| x as f64 + shift);
    let or = (a * d) / (b * c);
    let ln_or = or.ln();
    let se = (1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d).sqrt();
    let chi2 = pearson_chi2(&t);
    Ok(OddsRatio {
        odds_ratio: or,
        ci_low: (ln_or - config.z * se).exp(),
        ci_high: (ln_or + config.z * se).exp(),
        chi2,
        p_value: chi2_sf_df1(chi2),
        corrected: has_zero,
    })
}

fn pearson_chi2(t: &ContingencyTable) -> f64 {
    let [a, b, c, d] = [t.a, t.b, t.c, t.d].map(|x| x as f64);
    let n = a + b + c + d;
    let diff = a * d - b * c;
    n * diff * diff / ((a + b) * (c + d) * (a + c) * (b + d))
}

/// Survival function of the chi-square distribution with one degree of
/// freedom: P(X > x) = erfc(√(x/2)).
pub fn chi2_sf_df1(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    erfc((x / 2.0).sqrt())
}

/// Complementary error function for x ≥ 0: Maclaurin series for erf below
/// 2.5, continued fraction (modified Lentz) above.
pub fn erfc(x: f64) -> f64 {
    const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.5 {
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x2 / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        return 1.0 - FRAC_2_SQRT_PI * sum;
    }
    // erfc(x) = exp(-x²)/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let an = k as f64 / 2.0;
        d = x + an * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = x + an / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / f * (FRAC_2_SQRT_PI / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationResult {
    pub domain_a: Domain,
    pub category_a: String,
    pub domain_b: Domain,
    pub category_b: String,
    pub rho: Rho,
    pub table: ContingencyTable,
    pub odds_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub significant: bool,
}

impl AssociationResult {
    pub fn n_comentions(&self) -> u64 {
        self.table.a
    }
}

/// Pairs whose table had an empty margin (or a zero cell with correction
/// off) and so have no odds ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedPair {
    pub category_a: String,
    pub category_b: String,
    pub rho: Rho,
    pub table: ContingencyTable,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssociationReport {
    pub results: Vec<AssociationResult>,
    pub skipped: Vec<SkippedPair>,
}

/// Odds ratios for every category pair of two lexicons at every ρ. Rows are
/// ordered by category_a, category_b, then the order of `rho_list`.
pub fn association_matrix(
    lexicon_a: &Lexicon,
    posts_a: &[CategorySentences],
    lexicon_b: &Lexicon,
    posts_b: &[CategorySentences],
    rho_list: &[Rho],
    config: &AssociationConfig,
) -> Result<AssociationReport> {
    config.validate()?;
    if lexicon_a.domain() == lexicon_b.domain() {
        return Err(AnalyticsError::SameDomain(lexicon_a.domain()));
    }
    let pairs: Vec<(&str, &str)> = lexicon_a
        .categories()
        .into_iter()
        .flat_map(|ca| lexicon_b.categories().into_iter().map(move |cb| (ca, cb)))
        .collect();
    let mut report = AssociationReport::default();
    for (ca, cb) in pairs {
        for &rho in rho_list {
            let table = build_contingency(posts_a, ca, posts_b, cb, rho, config.rule)?;
            match odds_ratio(&table, config) {
                Ok(or) => report.results.push(AssociationResult {
                    domain_a: lexicon_a.domain(),
                    category_a: ca.to_string(),
                    domain_b: lexicon_b.domain(),
                    category_b: cb.to_string(),
                    rho,
                    table,
                    odds_ratio: or.odds_ratio,
                    ci_low: or.ci_low,
                    ci_high: or.ci_high,
                    p_value: or.p_value,
                    significant: or.p_value <= config.alpha,
                }),
                Err(AnalyticsError::DegenerateTable(..)) => report.skipped.push(SkippedPair {
                    category_a: ca.to_string(),
                    category_b: cb.to_string(),
                    rho,
                    table,
                }),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}

pub fn write_trends_csv<W: Write>(series: &[TrendSeries], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(["category", "year", "quarter", "active_authors", "mentioning_authors", "share"])?;
    for s in series {
        for p in &s.points {
            w.write_record([
                s.category.clone(),
                p.quarter.year.to_string(),
                p.quarter.quarter.to_string(),
                p.active_authors.to_string(),
                p.mentioning_authors.to_string(),
                format_sig6(p.share),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_associations_csv<W: Write>(results: &[AssociationResult], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record([
        "domain_a", "category_a", "domain_b", "category_b", "rho", "a", "b", "c", "d", "odds_ratio", "ci_low",
        "ci_high", "p_value", "significant",
    ])?;
    for r in results {
        let t = r.table;
        w.write_record([
            r.domain_a.to_string(),
            r.category_a.clone(),
            r.domain_b.to_string(),
            r.category_b.clone(),
            r.rho.to_string(),
            t.a.to_string(),
            t.b.to_string(),
            t.c.to_string(),
            t.d.to_string(),
            format_sig6(r.odds_ratio),
            format_sig6(r.ci_low),
            format_sig6(r.ci_high),
            format_sig6(r.p_value),
            if r.significant { "1" } else { "0" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

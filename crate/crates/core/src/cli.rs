//! Command-line driver: config loading, cached pipeline stages, subcommands
//! and the run manifest.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{
    self, AnalyticsError, AssociationConfig, CategorySentences, Denominator, QuarterRange, Rho, TrendLevel,
};
use crate::discovery::{self, DiscoveryError, DiscoveryParams, ReviewFiles};
use crate::embed::{self, EmbedError, EmbeddingModel, EmbeddingParams};
use crate::ingest::{self, Anonymizer, CorpusSlice, IngestError};
use crate::lexicon::{self, Domain, Lexicon, LexiconError, SeedSet, ANTAGONIST};
use crate::textnorm::{self, NormalizedPost, Normalizer, TextnormError};

const SHIPPED_SUBREDDITS: &str = include_str!("../data/subreddits.csv");
const CACHE_VERSION: &str = "opilex-cache-1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Textnorm(#[from] TextnormError),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for invalid configuration or parameters, 2 for bad or missing data.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Ingest(IngestError::UnsupportedYear(_) | IngestError::EmptyAllowList) => 1,
            CliError::Discovery(DiscoveryError::InvalidParams(_) | DiscoveryError::EmptyQuery) => 1,
            CliError::Embed(EmbedError::InvalidParams(_)) => 1,
            CliError::Lexicon(LexiconError::EmptySeedSet(_) | LexiconError::InvalidSeed(_)) => 1,
            CliError::Analytics(AnalyticsError::InvalidConfig(_) | AnalyticsError::InvalidRho(_)) => 1,
            CliError::Analytics(AnalyticsError::SameDomain(_) | AnalyticsError::EmptyRange(..)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::File { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YearRange {
    pub first: i32,
    pub last: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubredditFilter {
    /// Keep every subreddit.
    #[default]
    All,
    /// The bundled list of firsthand-use communities for the year.
    Shipped,
    List(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoverySettings {
    pub seeds: Vec<String>,
    pub rounds: usize,
    pub top_m: usize,
    pub k: usize,
    pub interactive: bool,
}

impl Default for DiscoverySettings {
    fn default() -> Self {
        let p = DiscoveryParams::default();
        DiscoverySettings { seeds: Vec::new(), rounds: p.rounds, top_m: p.top_m, k: p.k, interactive: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LexiconPaths {
    pub substance: Option<PathBuf>,
    pub roa: Option<PathBuf>,
    pub tampering: Option<PathBuf>,
}

impl LexiconPaths {
    fn get(&self, d: Domain) -> Option<&PathBuf> {
        match d {
            Domain::Substance => self.substance.as_ref(),
            Domain::Roa => self.roa.as_ref(),
            Domain::Tampering => self.tampering.as_ref(),
        }
    }
}

fn default_vocab_min_count() -> u64 {
    100
}

fn default_true() -> bool {
    true
}

fn default_neighbours() -> usize {
    lexicon::DEFAULT_NEIGHBOURS
}

fn default_rho_list() -> Vec<Rho> {
    Rho::default_report_set()
}

/// The single JSON config shared by every subcommand. Relative paths are
/// resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: Vec<PathBuf>,
    pub years: YearRange,
    pub salt: String,
    #[serde(default)]
    pub min_subreddit_comments: usize,
    #[serde(default)]
    pub subreddits: SubredditFilter,
    #[serde(default = "default_vocab_min_count")]
    pub vocab_min_count: u64,
    #[serde(default)]
    pub embedding: EmbeddingParams,
    #[serde(default = "default_true")]
    pub pooled_embeddings: bool,
    #[serde(default = "default_neighbours")]
    pub neighbours: usize,
    #[serde(default)]
    pub discovery: DiscoverySettings,
    #[serde(default)]
    pub lexicons: LexiconPaths,
    #[serde(default)]
    pub exclude_antagonist: bool,
    #[serde(default)]
    pub trend_denominator: Denominator,
    #[serde(default = "default_rho_list")]
    pub rho_list: Vec<Rho>,
    #[serde(default)]
    pub association: AssociationConfig,
    /// Years used by `associate`; all configured years when absent.
    #[serde(default)]
    pub association_years: Option<YearRange>,
    #[serde(default)]
    pub background_authors: BTreeMap<i32, u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bad = |msg: String| CliError::Config { path: path.to_path_buf(), msg };
        let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let mut config: PipelineConfig = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        config.validate().map_err(bad)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        config.inputs.iter_mut().for_each(resolve);
        for p in [&mut config.lexicons.substance, &mut config.lexicons.roa, &mut config.lexicons.tampering] {
            p.iter_mut().for_each(resolve);
        }
        config.output_dir.iter_mut().for_each(resolve);
        Ok(config)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.inputs.is_empty() {
            return Err("inputs must list at least one dump file".into());
        }
        let years = |r: &YearRange, key: &str| {
            if r.first > r.last || !ingest::SUPPORTED_YEARS.contains(&r.first) || !ingest::SUPPORTED_YEARS.contains(&r.last) {
                return Err(format!("{key}: invalid year range {}..{}", r.first, r.last));
            }
            Ok(())
        };
        years(&self.years, "years")?;
        if let Some(r) = &self.association_years {
            years(r, "association_years")?;
            if r.first < self.years.first || r.last > self.years.last {
                return Err("association_years must lie inside years".into());
            }
        }
        if self.salt.is_empty() {
            return Err("salt must not be empty".into());
        }
        if let SubredditFilter::List(l) = &self.subreddits {
            if l.is_empty() {
                return Err("subreddits list must not be empty".into());
            }
        }
        self.embedding.validate().map_err(|e| e.to_string())?;
        self.association.validate().map_err(|e| e.to_string())?;
        if self.rho_list.is_empty() {
            return Err("rho_list must not be empty".into());
        }
        if self.neighbours == 0 {
            return Err("neighbours must be at least 1".into());
        }
        if self.discovery.rounds == 0 || self.discovery.top_m == 0 {
            return Err("discovery rounds and top_m must be at least 1".into());
        }
        Ok(())
    }

    fn year_list(&self) -> Vec<i32> {
        (self.years.first..=self.years.last).collect()
    }

    /// The config as recorded in manifests: salt replaced by its digest.
    fn redacted(&self) -> PipelineConfig {
        PipelineConfig { salt: format!("sha256:{}", sha256_hex(self.salt.as_bytes())), ..self.clone() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "opilex", version, about = "Opioid discourse analytics over social-media dumps")]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 1 makes every stage deterministic.
    #[arg(long, global = true, env = "OPILEX_THREADS")]
    threads: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse dumps into per-year corpus caches.
    Ingest,
    /// Rank subreddits and expand the discovery query.
    Discover {
        /// Stop for review after each round.
        #[arg(long)]
        interactive: bool,
    },
    /// Fleiss' kappa of an annotation CSV.
    Kappa { annotations: PathBuf },
    /// Train term embeddings.
    Train {
        /// Also write the plain-text vector export.
        #[arg(long)]
        text: bool,
    },
    /// Expand lexicon seeds into review sheets.
    Expand {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long)]
        neighbours: Option<usize>,
    },
    /// Turn an edited review sheet into a lexicon file.
    LexiconImport {
        review: PathBuf,
        #[arg(long)]
        domain: Domain,
    },
    /// Quarterly author-share trends per lexicon category.
    Trends {
        #[arg(long)]
        denominator: Option<String>,
    },
    /// Odds ratios between lexicon categories.
    Associate {
        /// Comma-separated sentence distances, e.g. 0,1,inf.
        #[arg(long, value_delimiter = ',')]
        rho: Option<Vec<Rho>>,
    },
    /// Per-year dataset statistics.
    Stats,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Discover { .. } => "discover",
            Command::Kappa { .. } => "kappa",
            Command::Train { .. } => "train",
            Command::Expand { .. } => "expand",
            Command::LexiconImport { .. } => "lexicon-import",
            Command::Trends { .. } => "trends",
            Command::Associate { .. } => "associate",
            Command::Stats => "stats",
        }
    }
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    args: Vec<String>,
    threads: usize,
    config_path: Option<String>,
    config_sha256: Option<String>,
    config: Option<PipelineConfig>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

struct Context {
    config: Option<PipelineConfig>,
    config_path: Option<PathBuf>,
    output: PathBuf,
    threads: usize,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Context {
    fn config(&self) -> Result<&PipelineConfig> {
        self.config.as_ref().ok_or_else(|| CliError::Usage("this subcommand needs --config".into()))
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }

    fn record_input(&mut self, path: &Path) {
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
    }

    fn write_output(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<PathBuf> {
        let path = self.out(name);
        write_atomically(&path, f)?;
        self.outputs.push(path.clone());
        Ok(path)
    }
}

fn write_atomically(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(File::create(&tmp).map_err(file_err(&tmp))?);
    f(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(&tmp, path).map_err(file_err(path))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut f = File::open(path).map_err(file_err(path))?;
    std::io::copy(&mut f, &mut hasher).map_err(file_err(path))?;
    Ok(hex::encode(hasher.finalize()))
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli, args: &[OsString]) -> Result<()> {
    let threads = match cli.threads {
        Some(0) => return Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    // A second build in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();

    let config = match &cli.config {
        Some(p) => Some(PipelineConfig::load(p)?),
        None => None,
    };
    let output = cli
        .output
        .clone()
        .or_else(|| config.as_ref().and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."));
    let mut ctx = Context { config, config_path: cli.config.clone(), output, threads, inputs: Vec::new(), outputs: Vec::new() };

    match &cli.command {
        Command::Ingest => cmd_ingest(&mut ctx)?,
        Command::Discover { interactive } => cmd_discover(&mut ctx, *interactive)?,
        Command::Kappa { annotations } => cmd_kappa(&mut ctx, annotations)?,
        Command::Train { text } => cmd_train(&mut ctx, *text)?,
        Command::Expand { model, domain, neighbours } => cmd_expand(&mut ctx, model.as_deref(), *domain, *neighbours)?,
        Command::LexiconImport { review, domain } => cmd_lexicon_import(&mut ctx, review, *domain)?,
        Command::Trends { denominator } => cmd_trends(&mut ctx, denominator.as_deref())?,
        Command::Associate { rho } => cmd_associate(&mut ctx, rho.clone())?,
        Command::Stats => cmd_stats(&mut ctx)?,
    }
    write_manifest(&ctx, cli.command.name(), args)
}

fn write_manifest(ctx: &Context, command: &str, args: &[OsString]) -> Result<()> {
    let digest = |p: &PathBuf| -> Result<FileDigest> { Ok(FileDigest { path: p.display().to_string(), sha256: sha256_file(p)? }) };
    let manifest = Manifest {
        tool: "opilex",
        version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        args: args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        threads: ctx.threads,
        config_path: ctx.config_path.as_ref().map(|p| p.display().to_string()),
        config_sha256: ctx.config_path.as_deref().map(sha256_file).transpose()?,
        config: ctx.config.as_ref().map(PipelineConfig::redacted),
        inputs: ctx.inputs.iter().map(digest).collect::<Result<_>>()?,
        outputs: ctx.outputs.iter().map(digest).collect::<Result<_>>()?,
    };
    write_atomically(&ctx.out(&format!("{command}.manifest.json")), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        writeln!(w)?;
        Ok(())
    })
}

fn shipped_subreddits(year: i32) -> Vec<String> {
    let mut rdr = csv::Reader::from_reader(SHIPPED_SUBREDDITS.as_bytes());
    let headers = rdr.headers().expect("shipped subreddit header").clone();
    let col = headers.iter().position(|h| h == year.to_string());
    rdr.records()
        .map(|r| r.expect("shipped subreddit row"))
        .filter(|r| match col {
            Some(c) => &r[c] == "1",
            None => r.iter().skip(1).any(|f| f == "1"),
        })
        .map(|r| r[0].to_string())
        .collect()
}

/// Hash of everything the corpus and normalization caches depend on.
fn cache_key(ctx: &mut Context) -> Result<String> {
    let config = ctx.config()?.clone();
    let mut h = Sha256::new();
    h.update(CACHE_VERSION.as_bytes());
    for input in &config.inputs {
        ctx.record_input(input);
        h.update(sha256_file(input)?.as_bytes());
    }
    let settings = serde_json::json!({
        "years": config.years,
        "salt": config.salt,
        "min_subreddit_comments": config.min_subreddit_comments,
        "subreddits": config.subreddits,
    });
    h.update(serde_json::to_vec(&settings)?);
    Ok(hex::encode(h.finalize())[..16].to_string())
}

fn cache_dir(ctx: &mut Context) -> Result<PathBuf> {
    let key = cache_key(ctx)?;
    Ok(ctx.output.join("cache").join(key))
}

/// Per-year topical corpora, built once per cache key.
fn ensure_corpus(ctx: &mut Context) -> Result<Vec<CorpusSlice>> {
    let dir = cache_dir(ctx)?;
    let config = ctx.config()?.clone();
    let years = config.year_list();
    let paths: Vec<PathBuf> = years.iter().map(|y| dir.join(format!("corpus_{y}.ndjson"))).collect();
    if paths.iter().all(|p| p.exists()) {
        return paths
            .iter()
            .map(|p| Ok(ingest::read_cache(BufReader::new(File::open(p).map_err(file_err(p))?))?))
            .collect();
    }
    let anonymizer = Anonymizer::new(config.salt.as_bytes());
    let mut slices: BTreeMap<i32, CorpusSlice> = BTreeMap::new();
    let (mut malformed, mut out_of_range) = (0, 0);
    for input in &config.inputs {
        let reader = BufReader::new(File::open(input).map_err(file_err(input))?);
        let report = match ingest::load_corpora(reader, config.years.first..=config.years.last, &anonymizer) {
            Ok(r) => r,
            Err(IngestError::EmptyCorpus(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        malformed += report.malformed_lines;
        out_of_range += report.out_of_range;
        for (y, s) in report.slices {
            let merged = match slices.remove(&y) {
                Some(prev) => prev.merge(s),
                None => s,
            };
            slices.insert(y, merged);
        }
    }
    let mut out = Vec::with_capacity(years.len());
    for (year, path) in years.iter().zip(&paths) {
        let mut slice = slices.remove(year).unwrap_or_else(|| CorpusSlice::new(*year, Vec::new()));
        slice.malformed_lines = malformed;
        let slice = ingest::filter_subreddits(slice, config.min_subreddit_comments)?;
        let slice = match &config.subreddits {
            SubredditFilter::All => slice,
            SubredditFilter::Shipped => ingest::restrict_to_subreddits(slice, &shipped_subreddits(*year))?,
            SubredditFilter::List(l) => ingest::restrict_to_subreddits(slice, l)?,
        };
        write_atomically(path, |w| Ok(ingest::write_cache(&slice, w)?))?;
        out.push(slice);
    }
    if out.iter().all(CorpusSlice::is_empty) {
        return Err(IngestError::EmptyCorpus(config.years.first).into());
    }
    eprintln!("ingested {} posts ({malformed} malformed lines, {out_of_range} out of range)", out.iter().map(CorpusSlice::len).sum::<usize>());
    Ok(out)
}

/// Normalized posts per year (no vocabulary pruning), cached next to the corpus.
fn ensure_normalized(ctx: &mut Context) -> Result<Vec<(i32, Vec<NormalizedPost>)>> {
    let dir = cache_dir(ctx)?;
    let years = ctx.config()?.year_list();
    let paths: Vec<PathBuf> = years.iter().map(|y| dir.join(format!("normalized_{y}.ndjson"))).collect();
    if paths.iter().all(|p| p.exists()) {
        return years
            .iter()
            .zip(&paths)
            .map(|(y, p)| Ok((*y, textnorm::read_normalized(BufReader::new(File::open(p).map_err(file_err(p))?))?)))
            .collect();
    }
    let corpus = ensure_corpus(ctx)?;
    let normalizer = Normalizer::english();
    let mut out = Vec::with_capacity(corpus.len());
    for (slice, path) in corpus.iter().zip(&paths) {
        let posts = textnorm::normalize_corpus(normalizer, &slice.posts, None);
        write_atomically(path, |w| Ok(textnorm::write_normalized(&posts, w)?))?;
        out.push((slice.year, posts));
    }
    Ok(out)
}

fn load_lexicon(ctx: &mut Context, domain: Domain) -> Result<Lexicon> {
    let config = ctx.config()?.clone();
    let lex = match config.lexicons.get(domain) {
        Some(path) => {
            ctx.record_input(path);
            let lex = Lexicon::read_path(path)?;
            if lex.domain() != domain {
                return Err(CliError::Usage(format!("{} holds a {} lexicon, expected {domain}", path.display(), lex.domain())));
            }
            lex
        }
        None => lexicon::load_fixture_lexicon(domain),
    };
    if domain == Domain::Substance && config.exclude_antagonist {
        return Ok(lex.without_category(ANTAGONIST));
    }
    Ok(lex)
}

fn cmd_ingest(ctx: &mut Context) -> Result<()> {
    let corpus = ensure_corpus(ctx)?;
    let dir = cache_dir(ctx)?;
    for slice in &corpus {
        let path = dir.join(format!("corpus_{}.ndjson", slice.year));
        println!("{}\t{}\t{}", slice.year, slice.len(), path.display());
        ctx.outputs.push(path);
    }
    Ok(())
}

fn cmd_discover(ctx: &mut Context, interactive: bool) -> Result<()> {
    let config = ctx.config()?.clone();
    let settings = &config.discovery;
    let params = DiscoveryParams { rounds: settings.rounds, top_m: settings.top_m, k: settings.k };
    let normalized = ensure_normalized(ctx)?;
    let normalizer = Normalizer::english();
    let mut results = Vec::new();
    for (year, posts) in &normalized {
        if posts.is_empty() {
            eprintln!("{year}: no posts, skipped");
            continue;
        }
        let vocab = textnorm::build_vocabulary(posts, *year, config.vocab_min_count);
        let pruned: Vec<NormalizedPost> = posts
            .iter()
            .map(|p| NormalizedPost {
                sentences: p.sentences.iter().map(|s| s.iter().filter(|t| vocab.contains(t)).cloned().collect()).collect(),
                ..p.clone()
            })
            .collect();
        let mut reviewer = ReviewFiles {
            dir: ctx.out("discovery"),
            prefix: format!("{year}_"),
            interactive: interactive || settings.interactive,
        };
        let result = match discovery::run_discovery(&pruned, &settings.seeds, params, normalizer, &mut reviewer) {
            Err(DiscoveryError::ReviewPending(path)) => {
                eprintln!("review pending: edit {} and re-run", path.display());
                ctx.outputs.push(path);
                return Ok(());
            }
            r => r?,
        };
        let name = format!("discovery/{year}.json");
        ctx.write_output(&name, |w| {
            serde_json::to_writer_pretty(&mut *w, &result)?;
            writeln!(w)?;
            Ok(())
        })?;
        results.push((*year, result));
    }
    let union: std::collections::BTreeSet<&str> = results
        .iter()
        .flat_map(|(_, r)| r.subreddit_ranking.iter().take(settings.top_m).map(|s| s.subreddit.as_str()))
        .collect();
    ctx.write_output("discovery/candidate_subreddits.txt", |w| {
        for s in &union {
            writeln!(w, "{s}")?;
        }
        Ok(())
    })?;
    let query = discovery::merge_queries(results.iter().map(|(_, r)| r));
    ctx.write_output("discovery/query_terms.txt", |w| {
        for t in &query {
            writeln!(w, "{t}")?;
        }
        Ok(())
    })?;
    println!("{} query terms, {} candidate subreddits", query.len(), union.len());
    Ok(())
}

fn cmd_kappa(ctx: &mut Context, annotations: &Path) -> Result<()> {
    ctx.record_input(annotations);
    let matrix = discovery::AnnotationMatrix::read_csv(File::open(annotations).map_err(file_err(annotations))?)?;
    let k = discovery::fleiss_kappa(&matrix);
    println!("{:.6}", k.kappa);
    Ok(())
}

fn training_sets(ctx: &mut Context) -> Result<Vec<(String, Vec<Vec<String>>)>> {
    let pooled = ctx.config()?.pooled_embeddings;
    let normalized = ensure_normalized(ctx)?;
    let sentences = |posts: &[NormalizedPost]| -> Vec<Vec<String>> {
        posts.iter().flat_map(|p| p.sentences.iter().cloned()).collect()
    };
    Ok(if pooled {
        vec![("model".to_string(), normalized.iter().flat_map(|(_, p)| sentences(p)).collect())]
    } else {
        normalized.iter().map(|(y, p)| (format!("model_{y}"), sentences(p))).collect()
    })
}

fn cmd_train(ctx: &mut Context, text: bool) -> Result<()> {
    let params = ctx.config()?.embedding;
    for (name, sentences) in training_sets(ctx)? {
        let model = embed::train_embeddings(&sentences, &params, ctx.threads)?;
        let path = ctx.write_output(&format!("{name}.bin"), |w| Ok(model.save(w)?))?;
        if text {
            ctx.write_output(&format!("{name}.txt"), |w| Ok(model.write_text(w)?))?;
        }
        let last = model.epoch_losses().last().copied().unwrap_or(f64::NAN);
        println!("{}\t{} terms\tfinal loss {}", path.display(), model.len(), crate::format_sig6(last));
    }
    Ok(())
}

fn cmd_expand(ctx: &mut Context, model: Option<&Path>, domain: Option<Domain>, n: Option<usize>) -> Result<()> {
    let n = match n {
        Some(0) => return Err(CliError::Usage("--neighbours must be at least 1".into())),
        Some(n) => n,
        None => ctx.config()?.neighbours,
    };
    let model_path = model.map(Path::to_path_buf).unwrap_or_else(|| ctx.out("model.bin"));
    ctx.record_input(&model_path);
    let model = EmbeddingModel::load(BufReader::new(File::open(&model_path).map_err(file_err(&model_path))?))?;
    let domains = domain.map_or(Domain::ALL.to_vec(), |d| vec![d]);
    for d in domains {
        let lex = load_lexicon(ctx, d)?;
        let seeds: Vec<&str> = lex.categories().into_iter().flat_map(|c| lex.seed_terms(c)).collect();
        let seeds = SeedSet::new(d.as_str(), seeds)?;
        let candidates = lexicon::expand_seeds(&model, &seeds, n)?;
        let path = ctx.write_output(&format!("review_{d}.csv"), |w| Ok(lexicon::export_review(&candidates, w)?))?;
        if !candidates.missing_seeds.is_empty() {
            eprintln!("{d}: {} seeds missing from the model", candidates.missing_seeds.len());
        }
        println!("{d}\t{} candidates\t{}", candidates.len(), path.display());
    }
    Ok(())
}

fn cmd_lexicon_import(ctx: &mut Context, review: &Path, domain: Domain) -> Result<()> {
    ctx.record_input(review);
    let fixture_taxonomy = lexicon::load_fixture_lexicon(Domain::Roa).taxonomy().cloned();
    let taxonomy = if domain == Domain::Roa { fixture_taxonomy.as_ref() } else { None };
    let lex = lexicon::import_review_path(review, domain, taxonomy)?;
    let path = ctx.write_output(&format!("lexicon_{domain}.csv"), |w| Ok(lex.write_csv(w)?))?;
    println!("{} terms in {} categories\t{}", lex.len(), lex.categories().len(), path.display());
    Ok(())
}

fn parse_denominator(s: &str) -> Result<Denominator> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::Usage(format!("unknown denominator {s:?} (quarter_active or cohort)")))
}

fn cmd_trends(ctx: &mut Context, denominator: Option<&str>) -> Result<()> {
    let config = ctx.config()?.clone();
    let denominator = denominator.map(parse_denominator).transpose()?.unwrap_or(config.trend_denominator);
    let range = QuarterRange::years(config.years.first, config.years.last)?;
    let posts: Vec<NormalizedPost> = ensure_normalized(ctx)?.into_iter().flat_map(|(_, p)| p).collect();
    for domain in Domain::ALL {
        let lex = load_lexicon(ctx, domain)?;
        let mentions = lexicon::match_corpus(&posts, &lex);
        let mut levels = vec![(TrendLevel::Category, domain.to_string())];
        if domain == Domain::Roa {
            levels = vec![(TrendLevel::Category, "roa_secondary".into()), (TrendLevel::PrimaryAggregate, "roa_primary".into())];
        }
        for (level, name) in levels {
            let series = analytics::quarterly_popularity(&posts, &mentions, &lex, level, range, denominator)?;
            let path = ctx.write_output(&format!("trends_{name}.csv"), |w| Ok(analytics::write_trends_csv(&series, w)?))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn cmd_associate(ctx: &mut Context, rho: Option<Vec<Rho>>) -> Result<()> {
    let config = ctx.config()?.clone();
    let rho_list = rho.unwrap_or_else(|| config.rho_list.clone());
    if rho_list.is_empty() {
        return Err(CliError::Usage("--rho needs at least one value".into()));
    }
    let years = config.association_years.unwrap_or(config.years);
    let posts: Vec<NormalizedPost> = ensure_normalized(ctx)?
        .into_iter()
        .filter(|(y, _)| (years.first..=years.last).contains(y))
        .flat_map(|(_, p)| p)
        .collect();
    let mut lexicons = Vec::new();
    for d in Domain::ALL {
        let lex = load_lexicon(ctx, d)?;
        let index: Vec<CategorySentences> =
            lexicon::match_corpus(&posts, &lex).iter().map(|m| analytics::index_mentions(m)).collect();
        lexicons.push((lex, index));
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let (la, ia) = &lexicons[i];
        let (lb, ib) = &lexicons[j];
        let report = analytics::association_matrix(la, ia, lb, ib, &rho_list, &config.association)?;
        skipped += report.skipped.len();
        rows.extend(report.results);
    }
    let path = ctx.write_output("associations.csv", |w| Ok(analytics::write_associations_csv(&rows, w)?))?;
    eprintln!("{} pairs without an odds ratio (empty margin)", skipped);
    println!("{}\t{} rows", path.display(), rows.len());
    Ok(())
}

fn cmd_stats(ctx: &mut Context) -> Result<()> {
    let background = ctx.config()?.background_authors.clone();
    let corpus = ensure_corpus(ctx)?;
    ctx.write_output("stats.csv", |w| {
        let mut csv = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        csv.write_record(["year", "n_comments", "n_authors", "n_subreddits", "author_prevalence"])?;
        for slice in &corpus {
            let s = ingest::dataset_stats(slice, background.get(&slice.year).copied());
            csv.write_record([
                s.year.to_string(),
                s.n_comments.to_string(),
                s.n_authors.to_string(),
                s.n_subreddits.to_string(),
                s.author_prevalence.map(crate::format_sig6).unwrap_or_default(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    Ok(())
}

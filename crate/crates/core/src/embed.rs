//! Skip-gram with negative sampling (SGNS) term embeddings.
//!
//! For every (center, context) pair inside a dynamic window the trainer
//! minimizes
//!
//! ```text
//! -log σ(u_ctx · v_center) - Σ_{i=1..k} log σ(-u_noise_i · v_center)
//! ```
//!
//! where `v` are input vectors, `u` output vectors, and noise terms are drawn
//! from the unigram distribution raised to 0.75. Frequent terms are
//! subsampled and the learning rate decays linearly to 1e-4 of its initial
//! value over all epochs.
//!
//! With one worker training is bit-reproducible for a fixed seed. With more
//! workers the parameter matrices are updated lock-free (relaxed atomic loads
//! and stores), so concurrent updates to the same row may be lost and results
//! are only statistically reproducible.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use num_traits::Float;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textnorm::NormalizedPost;

const MAGIC: &[u8; 8] = b"OPLXEMB\0";
pub const MODEL_VERSION: u32 = 1;
const MIN_LR_FRACTION: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("corpus has no sentence with two in-vocabulary terms")]
    EmptyCorpus,
    #[error("vocabulary has {0} terms; at least 2 are needed")]
    DegenerateVocabulary(usize),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("unknown term {0:?}")]
    UnknownTerm(String),
    #[error("term {0:?} has a zero vector")]
    ZeroVector(String),
    #[error("training produced non-finite values in epoch {0}")]
    NonFinite(usize),
    #[error("corrupt model file: {0}")]
    CorruptModel(String),
    #[error("model format version {found} is not supported (expected {MODEL_VERSION})")]
    VersionMismatch { found: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingParams {
    pub min_term_count: u64,
    pub vector_size: usize,
    pub context_window: usize,
    pub negative_samples: usize,
    pub epochs: usize,
    pub initial_learning_rate: f64,
    pub subsample_threshold: f64,
    pub rng_seed: u64,
}

impl Default for EmbeddingParams {
    fn default() -> Self {
        EmbeddingParams {
            min_term_count: 5,
            vector_size: 256,
            context_window: 5,
            negative_samples: 10,
            epochs: 200,
            initial_learning_rate: 0.025,
            subsample_threshold: 1e-3,
            rng_seed: 1,
        }
    }
}

impl EmbeddingParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EmbedError::InvalidParams(m.into()));
        if self.vector_size == 0 {
            return bad("vector_size must be at least 1");
        }
        if self.negative_samples == 0 {
            return bad("negative_samples must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.context_window == 0 {
            return bad("context_window must be at least 1");
        }
        if !(self.initial_learning_rate > 0.0 && self.initial_learning_rate.is_finite()) {
            return bad("initial_learning_rate must be positive");
        }
        if !(self.subsample_threshold >= 0.0 && self.subsample_threshold.is_finite()) {
            return bad("subsample_threshold must be non-negative");
        }
        Ok(())
    }
}

/// Trained embeddings. Row `i` of each matrix belongs to `terms[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    terms: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    input: Vec<f32>,
    output: Vec<f32>,
    params: EmbeddingParams,
    epoch_losses: Vec<f64>,
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

// -ln σ(x), stable for large |x|.
fn neg_log_sigmoid<F: Float>(x: F) -> F {
    if x > F::zero() {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// SGNS loss for one (center, context) pair and its gradient with respect
/// to the center vector.
pub fn sgns_loss_and_center_grad<F: Float>(center: &[F], context: &[F], negatives: &[&[F]]) -> (F, Vec<F>) {
    let mut grad = vec![F::zero(); center.len()];
    let pos = dot(center, context);
    let mut loss = neg_log_sigmoid(pos);
    // d/dv [-ln σ(u·v)] = -(1 - σ(u·v)) u
    let g = -(F::one() - sigmoid(pos));
    for (gr, &u) in grad.iter_mut().zip(context) {
        *gr = *gr + g * u;
    }
    for neg in negatives {
        let s = dot(center, neg);
        loss = loss + neg_log_sigmoid(-s);
        // d/dv [-ln σ(-u·v)] = σ(u·v) u
        let g = sigmoid(s);
        for (gr, &u) in grad.iter_mut().zip(neg.iter()) {
            *gr = *gr + g * u;
        }
    }
    (loss, grad)
}

/// One SGD step against a single output vector. Accumulates the center
/// update into `center_step` (which equals `-lr * ∂loss/∂center` once every
/// target of the pair has been visited), updates `target` in place, and
/// returns this target's loss term.
pub fn sgd_target<F: Float>(center: &[F], target: &mut [F], positive: bool, lr: F, center_step: &mut [F]) -> F {
    let score = dot(center, target);
    let label = if positive { F::one() } else { F::zero() };
    let g = (label - sigmoid(score)) * lr;
    for ((acc, t), &c) in center_step.iter_mut().zip(target.iter_mut()).zip(center) {
        *acc = *acc + g * *t;
        *t = *t + g * c;
    }
    if positive {
        neg_log_sigmoid(score)
    } else {
        neg_log_sigmoid(-score)
    }
}

struct SharedMatrix {
    cells: Vec<AtomicU32>,
    dim: usize,
}

impl SharedMatrix {
    fn from_values(values: &[f32], dim: usize) -> Self {
        SharedMatrix { cells: values.iter().map(|v| AtomicU32::new(v.to_bits())).collect(), dim }
    }

    fn load_row(&self, row: usize, buf: &mut [f32]) {
        let cells = &self.cells[row * self.dim..(row + 1) * self.dim];
        for (b, c) in buf.iter_mut().zip(cells) {
            *b = f32::from_bits(c.load(Ordering::Relaxed));
        }
    }

    fn store_row(&self, row: usize, buf: &[f32]) {
        let cells = &self.cells[row * self.dim..(row + 1) * self.dim];
        for (b, c) in buf.iter().zip(cells) {
            c.store(b.to_bits(), Ordering::Relaxed);
        }
    }

    fn into_values(self) -> Vec<f32> {
        self.cells.into_iter().map(|c| f32::from_bits(c.into_inner())).collect()
    }

    fn all_finite(&self) -> bool {
        self.cells.iter().all(|c| f32::from_bits(c.load(Ordering::Relaxed)).is_finite())
    }
}

/// Sentences of a normalized corpus, borrowed.
pub fn corpus_sentences(posts: &[NormalizedPost]) -> Vec<&[String]> {
    posts.iter().flat_map(|p| p.sentences.iter().map(Vec::as_slice)).collect()
}

struct Trainer<'a> {
    params: &'a EmbeddingParams,
    sentences: &'a [Vec<u32>],
    keep_prob: Vec<f32>,
    noise: WeightedIndex<f64>,
    input: SharedMatrix,
    output: SharedMatrix,
    processed: AtomicU64,
    total_words: u64,
}

#[derive(Default)]
struct ShardStats {
    loss: f64,
    pairs: u64,
}

impl Trainer<'_> {
    fn learning_rate(&self) -> f32 {
        let progress = self.processed.load(Ordering::Relaxed) as f64 / (self.total_words + 1) as f64;
        let frac = (1.0 - progress).max(MIN_LR_FRACTION);
        (self.params.initial_learning_rate * frac) as f32
    }

    fn run_shard(&self, shard: impl Iterator<Item = usize>, rng: &mut ChaCha8Rng) -> ShardStats {
        let dim = self.params.vector_size;
        let mut stats = ShardStats::default();
        let mut center = vec![0f32; dim];
        let mut target = vec![0f32; dim];
        let mut step = vec![0f32; dim];
        let mut kept = Vec::new();
        for idx in shard {
            let sentence = &self.sentences[idx];
            let lr = self.learning_rate();
            self.processed.fetch_add(sentence.len() as u64, Ordering::Relaxed);
            kept.clear();
            for &w in sentence {
                let p = self.keep_prob[w as usize];
                if p >= 1.0 || rng.gen::<f32>() < p {
                    kept.push(w);
                }
            }
            for i in 0..kept.len() {
                let span = rng.gen_range(1..=self.params.context_window);
                let lo = i.saturating_sub(span);
                let hi = (i + span).min(kept.len() - 1);
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    let (c, ctx) = (kept[i] as usize, kept[j] as usize);
                    self.input.load_row(c, &mut center);
                    step.iter_mut().for_each(|s| *s = 0.0);
                    let mut loss = 0f32;
                    self.output.load_row(ctx, &mut target);
                    loss += sgd_target(&center, &mut target, true, lr, &mut step);
                    self.output.store_row(ctx, &target);
                    for _ in 0..self.params.negative_samples {
                        let noise = self.noise.sample(rng);
                        if noise == ctx {
                            continue;
                        }
                        self.output.load_row(noise, &mut target);
                        loss += sgd_target(&center, &mut target, false, lr, &mut step);
                        self.output.store_row(noise, &target);
                    }
                    for (v, s) in center.iter_mut().zip(&step) {
                        *v += s;
                    }
                    self.input.store_row(c, &center);
                    stats.loss += loss as f64;
                    stats.pairs += 1;
                }
            }
        }
        stats
    }
}

/// Trains SGNS embeddings. `workers == 1` is deterministic for a fixed seed.
pub fn train_embeddings<S: AsRef<[String]>>(
    sentences: &[S],
    params: &EmbeddingParams,
    workers: usize,
) -> Result<EmbeddingModel> {
    params.validate()?;
    let workers = workers.max(1);

    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in sentences {
        for t in s.as_ref() {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut vocab: Vec<(&str, u64)> = counts.into_iter().filter(|&(_, n)| n >= params.min_term_count).collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if vocab.len() < 2 {
        if sentences.iter().all(|s| s.as_ref().len() < 2) {
            return Err(EmbedError::EmptyCorpus);
        }
        return Err(EmbedError::DegenerateVocabulary(vocab.len()));
    }
    let index: HashMap<&str, u32> = vocab.iter().enumerate().map(|(i, (t, _))| (*t, i as u32)).collect();
    let encoded: Vec<Vec<u32>> = sentences
        .iter()
        .map(|s| s.as_ref().iter().filter_map(|t| index.get(t.as_str()).copied()).collect::<Vec<u32>>())
        .filter(|s| s.len() >= 2)
        .collect();
    if encoded.is_empty() {
        return Err(EmbedError::EmptyCorpus);
    }

    let train_words: u64 = encoded.iter().map(|s| s.len() as u64).sum();
    let keep_prob: Vec<f32> = vocab
        .iter()
        .map(|&(_, n)| {
            if params.subsample_threshold <= 0.0 {
                return 1.0;
            }
            // Canonical word2vec keep probability.
            let threshold = params.subsample_threshold * train_words as f64;
            let n = n as f64;
            (((n / threshold).sqrt() + 1.0) * threshold / n) as f32
        })
        .collect();
    let noise = WeightedIndex::new(vocab.iter().map(|&(_, n)| (n as f64).powf(0.75)))
        .map_err(|e| EmbedError::InvalidParams(e.to_string()))?;

    let dim = params.vector_size;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let half = 0.5 / dim as f32;
    let init: Vec<f32> = (0..vocab.len() * dim).map(|_| rng.gen_range(-half..half)).collect();

    let trainer = Trainer {
        params,
        sentences: &encoded,
        keep_prob,
        noise,
        input: SharedMatrix::from_values(&init, dim),
        output: SharedMatrix::from_values(&vec![0.0; vocab.len() * dim], dim),
        processed: AtomicU64::new(0),
        total_words: train_words * params.epochs as u64,
    };

    let n_sentences = encoded.len();
    let mut epoch_losses = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        let shard_rng = |worker: usize| {
            let mut r = ChaCha8Rng::seed_from_u64(params.rng_seed);
            r.set_stream((epoch * workers + worker) as u64 + 1);
            r
        };
        let stats: Vec<ShardStats> = if workers == 1 {
            vec![trainer.run_shard(0..n_sentences, &mut shard_rng(0))]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        let trainer = &trainer;
                        let mut rng = shard_rng(w);
                        scope.spawn(move || trainer.run_shard((w..n_sentences).step_by(workers), &mut rng))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
            })
        };
        let (loss, pairs) = stats.iter().fold((0.0, 0u64), |(l, p), s| (l + s.loss, p + s.pairs));
        epoch_losses.push(if pairs == 0 { 0.0 } else { loss / pairs as f64 });
        if !trainer.input.all_finite() || !trainer.output.all_finite() {
            return Err(EmbedError::NonFinite(epoch + 1));
        }
    }

    let Trainer { input, output, .. } = trainer;
    Ok(EmbeddingModel {
        terms: vocab.iter().map(|(t, _)| t.to_string()).collect(),
        counts: vocab.iter().map(|&(_, n)| n).collect(),
        index: vocab.iter().enumerate().map(|(i, (t, _))| (t.to_string(), i)).collect(),
        input: input.into_values(),
        output: output.into_values(),
        params: *params,
        epoch_losses,
    })
}

impl EmbeddingModel {
    /// A model with given input vectors, zero output vectors and zero counts.
    pub fn from_vectors(rows: Vec<(String, Vec<f32>)>, params: EmbeddingParams) -> Result<Self> {
        let dim = rows.first().map(|(_, v)| v.len()).unwrap_or(params.vector_size);
        let params = EmbeddingParams { vector_size: dim, ..params };
        let mut model = EmbeddingModel {
            terms: Vec::with_capacity(rows.len()),
            counts: vec![0; rows.len()],
            index: HashMap::with_capacity(rows.len()),
            input: Vec::with_capacity(rows.len() * dim),
            output: vec![0.0; rows.len() * dim],
            params,
            epoch_losses: Vec::new(),
        };
        for (i, (term, v)) in rows.into_iter().enumerate() {
            if v.len() != dim {
                return Err(EmbedError::InvalidParams(format!("vector for {term:?} has length {}", v.len())));
            }
            if model.index.insert(term.clone(), i).is_some() {
                return Err(EmbedError::InvalidParams(format!("duplicate term {term:?}")));
            }
            model.terms.push(term);
            model.input.extend(v);
        }
        Ok(model)
    }

    pub fn params(&self) -> &EmbeddingParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.vector_size
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn count(&self, term: &str) -> Option<u64> {
        self.index.get(term).map(|&i| self.counts[i])
    }

    pub fn contains(&self, term: &str) -> bool {
        self.index.contains_key(term)
    }

    /// Mean training loss per epoch. Empty for loaded or planted models.
    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn vector(&self, term: &str) -> Option<&[f32]> {
        self.index.get(term).map(|&i| self.row(i))
    }

    pub fn output_vector(&self, term: &str) -> Option<&[f32]> {
        let d = self.dim();
        self.index.get(term).map(|&i| &self.output[i * d..(i + 1) * d])
    }

    fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.input[i * d..(i + 1) * d]
    }

    fn lookup(&self, term: &str) -> Result<usize> {
        self.index.get(term).copied().ok_or_else(|| EmbedError::UnknownTerm(term.to_string()))
    }

    /// Cosine similarity of two input vectors, clamped to [-1, 1].
    pub fn cosine(&self, a: &str, b: &str) -> Result<f64> {
        let (ia, ib) = (self.lookup(a)?, self.lookup(b)?);
        let (na, nb) = (norm(self.row(ia)), norm(self.row(ib)));
        if na == 0.0 {
            return Err(EmbedError::ZeroVector(a.to_string()));
        }
        if nb == 0.0 {
            return Err(EmbedError::ZeroVector(b.to_string()));
        }
        Ok((dot64(self.row(ia), self.row(ib)) / (na * nb)).clamp(-1.0, 1.0))
    }

    /// The `n` terms closest to `term` by cosine, excluding the term itself
    /// and zero vectors. Exact brute-force search; ties broken by term.
    pub fn neighbours(&self, term: &str, n: usize) -> Result<Vec<(String, f64)>> {
        let i = self.lookup(term)?;
        let query = self.row(i);
        let qn = norm(query);
        if qn == 0.0 {
            return Err(EmbedError::ZeroVector(term.to_string()));
        }
        let mut scored: Vec<(String, f64)> = (0..self.len())
            .filter(|&j| j != i)
            .filter_map(|j| {
                let other = self.row(j);
                let on = norm(other);
                (on > 0.0).then(|| (self.terms[j].clone(), (dot64(query, other) / (qn * on)).clamp(-1.0, 1.0)))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(n);
        Ok(scored)
    }

    /// Binary model: magic, version, params, vocabulary (term, count), then
    /// input and output matrices as little-endian f32.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let p = &self.params;
        out.write_all(MAGIC)?;
        out.write_all(&MODEL_VERSION.to_le_bytes())?;
        for v in [p.min_term_count, p.vector_size as u64, p.context_window as u64, p.negative_samples as u64, p.epochs as u64] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&p.initial_learning_rate.to_le_bytes())?;
        out.write_all(&p.subsample_threshold.to_le_bytes())?;
        out.write_all(&p.rng_seed.to_le_bytes())?;
        out.write_all(&(self.terms.len() as u64).to_le_bytes())?;
        for (term, count) in self.terms.iter().zip(&self.counts) {
            out.write_all(&(term.len() as u32).to_le_bytes())?;
            out.write_all(term.as_bytes())?;
            out.write_all(&count.to_le_bytes())?;
        }
        for v in self.input.iter().chain(&self.output) {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(EmbedError::CorruptModel("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(EmbedError::VersionMismatch { found: version });
        }
        let params = EmbeddingParams {
            min_term_count: r.u64()?,
            vector_size: r.usize()?,
            context_window: r.usize()?,
            negative_samples: r.usize()?,
            epochs: r.usize()?,
            initial_learning_rate: r.f64()?,
            subsample_threshold: r.f64()?,
            rng_seed: r.u64()?,
        };
        if params.vector_size == 0 {
            return Err(EmbedError::CorruptModel("zero vector size".into()));
        }
        let n = r.usize()?;
        let matrix_len = n
            .checked_mul(params.vector_size)
            .filter(|&len| len.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| EmbedError::CorruptModel("vocabulary size inconsistent with file length".into()))?;
        let mut terms = Vec::with_capacity(n);
        let mut counts = Vec::with_capacity(n);
        let mut index = HashMap::with_capacity(n);
        for i in 0..n {
            let len = r.u32()? as usize;
            let term = std::str::from_utf8(r.take(len)?)
                .map_err(|_| EmbedError::CorruptModel(format!("term {i} is not UTF-8")))?
                .to_string();
            if index.insert(term.clone(), i).is_some() {
                return Err(EmbedError::CorruptModel(format!("duplicate term {term:?}")));
            }
            terms.push(term);
            counts.push(r.u64()?);
        }
        let input = r.f32s(matrix_len)?;
        let output = r.f32s(matrix_len)?;
        if r.pos != bytes.len() {
            return Err(EmbedError::CorruptModel(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if !input.iter().chain(&output).all(|v| v.is_finite()) {
            return Err(EmbedError::CorruptModel("non-finite vector entry".into()));
        }
        Ok(EmbeddingModel { terms, counts, index, input, output, params, epoch_losses: Vec::new() })
    }

    /// Plain-text export: a `<terms> <dim>` line, then `term v1 v2 ...` per term.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim())?;
        for (i, term) in self.terms.iter().enumerate() {
            write!(out, "{term}")?;
            for v in self.row(i) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm(a: &[f32]) -> f64 {
    dot64(a, a).sqrt()
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EmbedError::CorruptModel(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| EmbedError::CorruptModel("size overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect())
    }
}

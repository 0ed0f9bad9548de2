//! Corpus analytics for substance-use discourse in newline-delimited
//! social-media dumps.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! - [`ingest`]: stream dump lines into per-year corpus slices with anonymized authors.
//! - [`textnorm`]: sentence segmentation, stopword removal, lemmatization, vocabulary pruning.
//! - [`discovery`]: iterative query expansion over subreddits and Fleiss' kappa.
//! - [`embed`]: skip-gram negative-sampling embeddings and cosine neighbour queries.
//! - [`lexicon`]: seed expansion, expert review files, shipped vocabularies, mention matching.
//! - [`analytics`]: quarterly author-share trends and sentence-proximity odds ratios.
//! - [`cli`]: the `opilex` command-line driver.

pub mod analytics;
pub mod cli;
pub mod discovery;
pub mod embed;
pub mod ingest;
pub mod lexicon;
pub mod textnorm;

mod fmt;

pub use fmt::format_sig6;

//! Hereditary stratigraphy toolkit: genome-attached annotations of random
//! differentia fingerprints, bounded retention schedules, trie-based
//! phylogeny reconstruction, a reference evolutionary model, and the quality
//! metrics and nonparametric statistics used to evaluate reconstructions.

pub mod annotation;
pub mod cli;
pub mod formats;
pub mod quality;
pub mod reconstruct;
pub mod refmodel;
pub mod retention;
pub mod stats;

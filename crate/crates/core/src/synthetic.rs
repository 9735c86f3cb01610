//! Synthetic multi-author corpora with known style boundaries.
//!
//! Each author writes words over a character distribution that mixes a
//! shared uniform alphabet with an author-specific slice of it. At
//! `separation = 1` the slices are disjoint and style is fully visible; at
//! `separation = 0` all authors sample the same distribution and the labels
//! carry no recoverable signal.

use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_dataset, ChangeLabels, Dataset, LabeledProblem, Problem};
use crate::error::{Error, Result};

const ALPHABET: &[u8; 26] = b"abcdefghijklmnopqrstuvwxyz";

/// Short, style-neutral sentences injected verbatim to create exact duplicates.
const BOILERPLATE: [&str; 6] = [
    "Thanks for sharing.",
    "Please keep the discussion civil.",
    "Source?",
    "This.",
    "Deleted.",
    "Welcome to the thread, read the rules before posting.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub authors: usize,
    pub n_problems: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// 0 = identical author distributions, 1 = disjoint alphabets.
    pub separation: f64,
    /// Probability that the author switches at an adjacency.
    pub change_prob: f64,
    /// Probability that a sentence is replaced by a shared boilerplate line.
    pub duplicate_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            authors: 2,
            n_problems: 100,
            min_sentences: 5,
            max_sentences: 15,
            min_words: 3,
            max_words: 12,
            separation: 1.0,
            change_prob: 0.3,
            duplicate_rate: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(2..=ALPHABET.len()).contains(&self.authors) {
            return bad(format!("authors {} outside 2..=26", self.authors));
        }
        if self.n_problems == 0 {
            return bad("n_problems must be at least 1".into());
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return bad(format!(
                "invalid sentence range {}..={}",
                self.min_sentences, self.max_sentences
            ));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad(format!("invalid word range {}..={}", self.min_words, self.max_words));
        }
        for (name, v) in [
            ("separation", self.separation),
            ("change_prob", self.change_prob),
            ("duplicate_rate", self.duplicate_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

struct AuthorStyle {
    letters: WeightedIndex<f64>,
}

fn author_styles(cfg: &SyntheticConfig) -> Vec<AuthorStyle> {
    let slice = ALPHABET.len() / cfg.authors;
    let owner = |c: usize| (c / slice).min(cfg.authors - 1);
    (0..cfg.authors)
        .map(|a| {
            let own_size = (0..ALPHABET.len()).filter(|&c| owner(c) == a).count() as f64;
            let shared = (1.0 - cfg.separation) / ALPHABET.len() as f64;
            let weights: Vec<f64> = (0..ALPHABET.len())
                .map(|c| shared + if owner(c) == a { cfg.separation / own_size } else { 0.0 })
                .collect();
            AuthorStyle {
                letters: WeightedIndex::new(weights).expect("weights are positive"),
            }
        })
        .collect()
}

fn sentence<R: Rng>(style: &AuthorStyle, cfg: &SyntheticConfig, rng: &mut R) -> String {
    let words = rng.random_range(cfg.min_words..=cfg.max_words);
    let mut out = String::new();
    for w in 0..words {
        if w > 0 {
            out.push(' ');
        }
        let len = rng.random_range(2..=7);
        for _ in 0..len {
            out.push(ALPHABET[style.letters.sample(rng)] as char);
        }
    }
    let mut chars = out.chars();
    let first = chars.next().map(|c| c.to_ascii_uppercase());
    let mut s: String = first.into_iter().chain(chars).collect();
    s.push('.');
    s
}

/// Generates a labeled dataset with ids `problem-1..=problem-N`.
pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let styles = author_styles(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = Vec::with_capacity(cfg.n_problems);
    for k in 1..=cfg.n_problems {
        let n = rng.random_range(cfg.min_sentences..=cfg.max_sentences);
        let mut author = rng.random_range(0..cfg.authors);
        let mut sentences = Vec::with_capacity(n);
        let mut changes = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n {
            if i > 0 {
                let switch = rng.random_bool(cfg.change_prob);
                if switch {
                    let step = rng.random_range(1..cfg.authors);
                    author = (author + step) % cfg.authors;
                }
                changes.push(u8::from(switch));
            }
            if cfg.duplicate_rate > 0.0 && rng.random_bool(cfg.duplicate_rate) {
                sentences.push(BOILERPLATE[rng.random_range(0..BOILERPLATE.len())].to_string());
            } else {
                sentences.push(sentence(&styles[author], cfg, &mut rng));
            }
        }
        let problem = Problem::new(format!("problem-{k}"), sentences)?;
        items.push(LabeledProblem::new(problem, Some(ChangeLabels::new(changes)?))?);
    }
    Dataset::new("synthetic", items)
}

/// Generates a dataset and writes it in PAN layout under `out_dir`.
pub fn gen_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<Dataset> {
    let ds = generate(cfg)?;
    write_dataset(&ds, out_dir)?;
    Ok(ds)
}

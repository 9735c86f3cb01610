//! PAN-format style change corpora: loading, writing, paragraph-to-sentence
//! conversion, summary statistics and seeded train/validation splits.
//!
//! A problem directory holds `problem-<k>.txt` files with one sentence per
//! line and optional `truth-problem-<k>.json` files of the form
//! `{"changes": [0, 1, ...]}` carrying one label per adjacent sentence pair.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One document: an ordered list of sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub sentences: Vec<String>,
}

impl Problem {
    pub fn new(id: impl Into<String>, sentences: Vec<String>) -> Result<Self> {
        let id = id.into();
        if sentences.is_empty() {
            return Err(Error::Data(format!("{id}: problem has no sentences")));
        }
        Ok(Problem { id, sentences })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Number of adjacent sentence pairs.
    pub fn adjacencies(&self) -> usize {
        self.sentences.len().saturating_sub(1)
    }

    /// The numeric part of a `problem-<k>` identifier.
    pub fn number(&self) -> Option<u64> {
        problem_number(&self.id)
    }
}

/// Binary style-change labels, one per adjacency.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChangeLabels(Vec<u8>);

impl ChangeLabels {
    pub fn new(changes: Vec<u8>) -> Result<Self> {
        if let Some(bad) = changes.iter().find(|&&c| c > 1) {
            return Err(Error::Data(format!("change label {bad} is not 0 or 1")));
        }
        Ok(ChangeLabels(changes))
    }

    pub fn zeros(len: usize) -> Self {
        ChangeLabels(vec![0; len])
    }

    pub fn ones(len: usize) -> Self {
        ChangeLabels(vec![1; len])
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&c| c == 1).count()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.0
    }
}

impl From<ChangeLabels> for Vec<u8> {
    fn from(labels: ChangeLabels) -> Self {
        labels.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledProblem {
    pub problem: Problem,
    pub labels: Option<ChangeLabels>,
}

impl LabeledProblem {
    pub fn new(problem: Problem, labels: Option<ChangeLabels>) -> Result<Self> {
        if let Some(labels) = &labels {
            check_label_length(&problem, labels)?;
        }
        Ok(LabeledProblem { problem, labels })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split_name: String,
    pub items: Vec<LabeledProblem>,
}

impl Dataset {
    pub fn new(split_name: impl Into<String>, items: Vec<LabeledProblem>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for item in &items {
            if !seen.insert(item.problem.id.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate problem id {}",
                    item.problem.id
                )));
            }
        }
        Ok(Dataset {
            split_name: split_name.into(),
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.items.iter().all(|item| item.labels.is_some())
    }

    pub fn problems(&self) -> impl Iterator<Item = &Problem> {
        self.items.iter().map(|item| &item.problem)
    }

    /// Labels of every problem, or an error naming the first unlabeled one.
    pub fn truths(&self) -> Result<Vec<&ChangeLabels>> {
        self.items
            .iter()
            .map(|item| {
                item.labels.as_ref().ok_or_else(|| {
                    Error::Data(format!("{}: no truth labels", item.problem.id))
                })
            })
            .collect()
    }

    pub fn total_adjacencies(&self) -> usize {
        self.problems().map(Problem::adjacencies).sum()
    }
}

fn check_label_length(problem: &Problem, labels: &ChangeLabels) -> Result<()> {
    if labels.len() != problem.adjacencies() {
        return Err(Error::Data(format!(
            "{}: label length mismatch: {} labels for {} sentences",
            problem.id,
            labels.len(),
            problem.len()
        )));
    }
    Ok(())
}

pub(crate) fn problem_number(id: &str) -> Option<u64> {
    id.strip_prefix("problem-")?.parse().ok()
}

#[derive(Deserialize)]
struct TruthFile {
    changes: Vec<i64>,
}

/// Reads a `{"changes": [...]}` document (truth or solution file).
pub fn read_changes_file(path: &Path) -> Result<ChangeLabels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let truth: TruthFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let changes = truth
        .changes
        .iter()
        .map(|&c| match c {
            0 | 1 => Ok(c as u8),
            other => Err(Error::Data(format!(
                "{}: change label {other} is not 0 or 1",
                path.display()
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChangeLabels(changes))
}

/// Writes a `{"changes": [...]}` document.
pub fn write_changes_file(path: &Path, labels: &ChangeLabels) -> Result<()> {
    let body = serde_json::json!({ "changes": labels.as_slice() });
    fs::write(path, body.to_string()).map_err(|e| Error::io(path, e))
}

/// Splits problem file text into sentences: one per line, LF or CRLF,
/// final newline stripped, interior blank lines kept.
pub fn parse_problem_text(id: &str, text: &str) -> Result<Problem> {
    let body = text
        .strip_suffix("\r\n")
        .or_else(|| text.strip_suffix('\n'))
        .unwrap_or(text);
    if body.is_empty() {
        return Err(Error::Data(format!("{id}: empty problem file")));
    }
    let sentences = body
        .split('\n')
        .map(|line| line.strip_suffix('\r').unwrap_or(line).to_string())
        .collect();
    Problem::new(id, sentences)
}

/// Loads every `problem-<k>.txt` under `root` in numeric order of `k`,
/// pairing each with `truth-problem-<k>.json` when present.
pub fn load_dataset(root: &Path, split_name: &str) -> Result<Dataset> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(k) = name.strip_suffix(".txt").and_then(problem_number) {
            files.push((k, entry.path()));
        }
    }
    files.sort_by_key(|(k, _)| *k);

    let items = files
        .par_iter()
        .map(|(k, path)| {
            let id = format!("problem-{k}");
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Data(format!("{}: not valid UTF-8", path.display())))?;
            let problem = parse_problem_text(&id, &text)?;
            let truth_path = root.join(format!("truth-{id}.json"));
            let labels = if truth_path.is_file() {
                Some(read_changes_file(&truth_path)?)
            } else {
                None
            };
            LabeledProblem::new(problem, labels)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(split_name, items)
}

/// Writes a dataset in the layout [`load_dataset`] reads. Problem ids must
/// have the `problem-<k>` shape.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for item in &dataset.items {
        let id = &item.problem.id;
        if problem_number(id).is_none() {
            return Err(Error::Data(format!("{id}: id is not of the form problem-<k>")));
        }
        let mut text = item.problem.sentences.join("\n");
        text.push('\n');
        let path = root.join(format!("{id}.txt"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        if let Some(labels) = &item.labels {
            write_changes_file(&root.join(format!("truth-{id}.json")), labels)?;
        }
    }
    Ok(())
}

/// A document segmented into paragraphs of sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParagraphProblem {
    pub id: String,
    pub paragraphs: Vec<Vec<String>>,
}

/// Flattens paragraph documents into sentence-level problems: adjacencies
/// inside a paragraph are labeled 0, every paragraph boundary is labeled 1.
pub fn convert_paragraph_dataset(paragraph_problems: &[ParagraphProblem]) -> Result<Dataset> {
    let items = paragraph_problems
        .iter()
        .map(|pp| {
            if pp.paragraphs.is_empty() {
                return Err(Error::Data(format!("{}: no paragraphs", pp.id)));
            }
            let mut sentences = Vec::new();
            let mut changes = Vec::new();
            for (p, paragraph) in pp.paragraphs.iter().enumerate() {
                if paragraph.is_empty() {
                    return Err(Error::Data(format!("{}: paragraph {p} has no sentences", pp.id)));
                }
                if p > 0 {
                    changes.push(1);
                }
                changes.extend(std::iter::repeat_n(0, paragraph.len() - 1));
                sentences.extend(paragraph.iter().cloned());
            }
            LabeledProblem::new(Problem::new(&pp.id, sentences)?, Some(ChangeLabels(changes)))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new("custom", items)
}

/// Summary statistics of a corpus split.
///
/// Standard deviations are sample deviations (n - 1 denominator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub split_name: String,
    pub n_problems: usize,
    pub n_sentences: usize,
    pub mean_words_per_sentence: f64,
    pub std_words_per_sentence: f64,
    pub median_words_per_sentence: f64,
    /// Same as the word statistics but counting maximal alphanumeric runs.
    pub mean_alnum_tokens_per_sentence: f64,
    pub median_alnum_tokens_per_sentence: f64,
    pub mean_sentences_per_doc: f64,
    pub std_sentences_per_doc: f64,
    pub median_sentences_per_doc: f64,
    /// Sentences belonging to a group of exact duplicates, over all sentences.
    pub duplicate_fraction: f64,
    pub duplicate_table: Vec<(String, usize)>,
}

pub fn whitespace_word_count(sentence: &str) -> usize {
    sentence.split_whitespace().count()
}

pub fn alnum_token_count(sentence: &str) -> usize {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .count()
}

/// Mean, sample standard deviation and median of integer counts. Sums are
/// exact so the result does not depend on input order.
fn summarize(mut values: Vec<u64>) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = values.len() as u128;
    let sum: u128 = values.iter().map(|&v| v as u128).sum();
    let sum_sq: u128 = values.iter().map(|&v| (v as u128) * (v as u128)).sum();
    let mean = sum as f64 / n as f64;
    let std = if n > 1 {
        let numer = n * sum_sq - sum * sum;
        (numer as f64 / (n * (n - 1)) as f64).sqrt()
    } else {
        0.0
    };
    values.sort_unstable();
    let mid = values.len() / 2;
    let median = if values.len() % 2 == 1 {
        values[mid] as f64
    } else {
        (values[mid - 1] + values[mid]) as f64 / 2.0
    };
    (mean, std, median)
}

pub fn compute_stats(dataset: &Dataset) -> Result<CorpusStats> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot compute statistics of an empty dataset".into()));
    }
    let sentences = || dataset.problems().flat_map(|p| p.sentences.iter());
    let words: Vec<u64> = sentences().map(|s| whitespace_word_count(s) as u64).collect();
    let alnum: Vec<u64> = sentences().map(|s| alnum_token_count(s) as u64).collect();
    let per_doc: Vec<u64> = dataset.problems().map(|p| p.len() as u64).collect();
    let n_sentences = words.len();

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sentences() {
        *counts.entry(s.as_str()).or_default() += 1;
    }
    let mut duplicate_table: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= 2)
        .map(|(s, c)| (s.to_string(), c))
        .collect();
    duplicate_table.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let duplicated: usize = duplicate_table.iter().map(|(_, c)| c).sum();

    let (mean_w, std_w, median_w) = summarize(words);
    let (mean_a, _, median_a) = summarize(alnum);
    let (mean_d, std_d, median_d) = summarize(per_doc);
    Ok(CorpusStats {
        split_name: dataset.split_name.clone(),
        n_problems: dataset.len(),
        n_sentences,
        mean_words_per_sentence: mean_w,
        std_words_per_sentence: std_w,
        median_words_per_sentence: median_w,
        mean_alnum_tokens_per_sentence: mean_a,
        median_alnum_tokens_per_sentence: median_a,
        mean_sentences_per_doc: mean_d,
        std_sentences_per_doc: std_d,
        median_sentences_per_doc: median_d,
        duplicate_fraction: duplicated as f64 / n_sentences as f64,
        duplicate_table,
    })
}

impl fmt::Display for CorpusStats {
    /// Plain-text summary in the layout of a per-subset document statistics
    /// table, followed by the five most frequent duplicate sentences.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>9} {:>10} {:>16} {:>18} {:>14} {:>16}",
            "Subset",
            "Problems",
            "Sentences",
            "Avg words/sent.",
            "Median words/sent.",
            "Avg sent./doc",
            "Median sent./doc"
        )?;
        writeln!(
            f,
            "{:<10} {:>9} {:>10} {:>16} {:>18.1} {:>14} {:>16.1}",
            self.split_name,
            self.n_problems,
            self.n_sentences,
            format!("{:.1} ± {:.1}", self.mean_words_per_sentence, self.std_words_per_sentence),
            self.median_words_per_sentence,
            format!("{:.1} ± {:.1}", self.mean_sentences_per_doc, self.std_sentences_per_doc),
            self.median_sentences_per_doc,
        )?;
        writeln!(
            f,
            "alphanumeric tokens/sent.: mean {:.1}, median {:.1}",
            self.mean_alnum_tokens_per_sentence, self.median_alnum_tokens_per_sentence
        )?;
        writeln!(
            f,
            "duplicate sentences: {:.1}% of all sentences",
            100.0 * self.duplicate_fraction
        )?;
        for (sentence, count) in self.duplicate_table.iter().take(5) {
            writeln!(f, "{count:>8}  {sentence}")?;
        }
        Ok(())
    }
}

/// Seeded, disjoint train/validation partition. The validation side gets
/// `floor(n * val_fraction)` problems, clamped so both sides are non-empty.
pub fn split_train_val(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {val_fraction} outside (0, 1)"
        )));
    }
    let labeled = dataset.items.iter().filter(|i| i.labels.is_some()).count();
    if labeled < 2 {
        return Err(Error::Data(format!(
            "need at least 2 labeled problems to split, found {labeled}"
        )));
    }
    let n = dataset.len();
    let n_val = ((n as f64 * val_fraction + 1e-9).floor() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize], name: &str| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Dataset {
            split_name: name.to_string(),
            items: idx.iter().map(|&i| dataset.items[i].clone()).collect(),
        }
    };
    Ok((
        pick(train_idx, &format!("{}-train", dataset.split_name)),
        pick(val_idx, &format!("{}-val", dataset.split_name)),
    ))
}

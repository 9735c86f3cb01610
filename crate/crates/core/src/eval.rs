//! Scoring and reporting.
//!
//! Adjacencies from all problems are pooled; F1 is computed separately for
//! the change class (1) and the no-change class (0) and the two are averaged.
//! A class that appears in neither predictions nor truths scores 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{problem_number, read_changes_file, write_changes_file, ChangeLabels, Dataset, Problem};
use crate::error::{Error, Result};
use crate::featurize::{fnv1a64, Featurizer};
use crate::model::{self, ModelParams};

/// Counts with class 1 (style change) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, pred: u8, truth: u8) {
        match (pred, truth) {
            (1, 1) => self.tp += 1,
            (1, _) => self.fp += 1,
            (_, 1) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn f1_class1(&self) -> f64 {
        f1(self.tp, self.fp, self.fn_)
    }

    /// Class 0 as positive: its true positives are our true negatives.
    pub fn f1_class0(&self) -> f64 {
        f1(self.tn, self.fn_, self.fp)
    }

    pub fn macro_f1(&self) -> f64 {
        (self.f1_class0() + self.f1_class1()) / 2.0
    }
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroF1 {
    pub macro_f1: f64,
    pub f1_class0: f64,
    pub f1_class1: f64,
    pub confusion: Confusion,
    /// Alternative aggregation: macro-F1 of each problem, averaged.
    pub per_problem_mean_macro_f1: f64,
}

pub fn macro_f1<P, T>(preds: &[P], truths: &[T]) -> Result<MacroF1>
where
    P: AsRef<[u8]>,
    T: AsRef<[u8]>,
{
    if preds.len() != truths.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let mut pooled = Confusion::default();
    let mut per_problem_sum = 0.0;
    for (k, (p, t)) in preds.iter().zip(truths).enumerate() {
        let (p, t) = (p.as_ref(), t.as_ref());
        if p.len() != t.len() {
            return Err(Error::Data(format!(
                "problem {k}: {} predicted labels for {} true labels",
                p.len(),
                t.len()
            )));
        }
        let mut local = Confusion::default();
        for (&a, &b) in p.iter().zip(t) {
            local.add(a, b);
            pooled.add(a, b);
        }
        per_problem_sum += local.macro_f1();
    }
    Ok(MacroF1 {
        macro_f1: pooled.macro_f1(),
        f1_class0: pooled.f1_class0(),
        f1_class1: pooled.f1_class1(),
        confusion: pooled,
        per_problem_mean_macro_f1: if preds.is_empty() {
            0.0
        } else {
            per_problem_sum / preds.len() as f64
        },
    })
}

impl AsRef<[u8]> for ChangeLabels {
    fn as_ref(&self) -> &[u8] {
        self.as_slice()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub macro_f1: f64,
    pub f1_class0: f64,
    pub f1_class1: f64,
    pub confusion: Confusion,
    pub per_problem_mean_macro_f1: f64,
    pub n_problems: usize,
    pub per_problem: Vec<(String, ChangeLabels)>,
}

impl EvalReport {
    pub fn from_predictions(
        model: &str,
        dataset: &Dataset,
        predictions: Vec<(String, ChangeLabels)>,
    ) -> Result<Self> {
        let truths = dataset.truths()?;
        let preds: Vec<&ChangeLabels> = predictions.iter().map(|(_, l)| l).collect();
        let scores = macro_f1(&preds, &truths)?;
        Ok(EvalReport {
            dataset: dataset.split_name.clone(),
            model: model.to_string(),
            macro_f1: scores.macro_f1,
            f1_class0: scores.f1_class0,
            f1_class1: scores.f1_class1,
            confusion: scores.confusion,
            per_problem_mean_macro_f1: scores.per_problem_mean_macro_f1,
            n_problems: predictions.len(),
            per_problem: predictions,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Aligned `Model / Dataset / F1 (macro)` table.
pub fn render_table(reports: &[&EvalReport]) -> String {
    let model_w = reports.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let data_w = reports.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = writeln!(out, "{:<model_w$}  {:<data_w$}  {:>10}", "Model", "Dataset", "F1 (macro)");
    let _ = writeln!(out, "{}", "-".repeat(model_w + data_w + 14));
    for r in reports {
        let _ = writeln!(out, "{:<model_w$}  {:<data_w$}  {:>10.3}", r.model, r.dataset, r.macro_f1);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Random,
    Predict1,
    Predict0,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Random => "RANDOM",
            BaselineKind::Predict1 => "PREDICT 1",
            BaselineKind::Predict0 => "PREDICT 0",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(BaselineKind::Random),
            "predict1" | "predict-1" => Ok(BaselineKind::Predict1),
            "predict0" | "predict-0" => Ok(BaselineKind::Predict0),
            other => Err(Error::InvalidArgument(format!("unknown baseline {other}"))),
        }
    }
}

/// Trivial baselines. RANDOM draws fair coins from a generator keyed by
/// `(seed, problem id)`, so a problem's labels do not depend on the others.
pub fn baseline_predict(kind: BaselineKind, problem: &Problem, seed: u64) -> ChangeLabels {
    let n = problem.adjacencies();
    match kind {
        BaselineKind::Predict1 => ChangeLabels::ones(n),
        BaselineKind::Predict0 => ChangeLabels::zeros(n),
        BaselineKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(problem.id.as_bytes(), 0));
            ChangeLabels::new((0..n).map(|_| u8::from(rng.random_bool(0.5))).collect())
                .expect("binary")
        }
    }
}

/// Anything that can label the boundaries of a problem.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict_problem(&self, problem: &Problem) -> Result<ChangeLabels>;
}

/// The trained classifier together with the featurizer it was trained on.
pub struct SspcPredictor<'a> {
    pub params: &'a ModelParams,
    pub featurizer: &'a Featurizer,
}

impl Predictor for SspcPredictor<'_> {
    fn name(&self) -> String {
        "Sequential Sentence Pair Classifier".into()
    }

    fn predict_problem(&self, problem: &Problem) -> Result<ChangeLabels> {
        let x = self.featurizer.featurize(problem)?;
        model::predict(self.params, &x)
    }
}

pub struct BaselinePredictor {
    pub kind: BaselineKind,
    pub seed: u64,
}

impl Predictor for BaselinePredictor {
    fn name(&self) -> String {
        self.kind.name().into()
    }

    fn predict_problem(&self, problem: &Problem) -> Result<ChangeLabels> {
        Ok(baseline_predict(self.kind, problem, self.seed))
    }
}

pub fn predict_dataset(predictor: &dyn Predictor, dataset: &Dataset) -> Result<Vec<(String, ChangeLabels)>> {
    dataset
        .items
        .par_iter()
        .map(|item| Ok((item.problem.id.clone(), predictor.predict_problem(&item.problem)?)))
        .collect()
}

pub fn evaluate_dataset(predictor: &dyn Predictor, dataset: &Dataset) -> Result<EvalReport> {
    if !dataset.is_fully_labeled() {
        dataset.truths()?;
    }
    let predictions = predict_dataset(predictor, dataset)?;
    EvalReport::from_predictions(&predictor.name(), dataset, predictions)
}

pub fn solution_file_name(problem_id: &str) -> String {
    format!("solution-{problem_id}.json")
}

pub fn write_solutions(preds: &[(String, ChangeLabels)], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (id, labels) in preds {
        write_changes_file(&out_dir.join(solution_file_name(id)), labels)?;
    }
    Ok(())
}

/// Reads every `solution-problem-<k>.json` in a directory, keyed by problem id.
pub fn read_solutions(dir: &Path) -> Result<BTreeMap<String, ChangeLabels>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(id) = name.strip_prefix("solution-").and_then(|s| s.strip_suffix(".json")) else {
            continue;
        };
        if problem_number(id).is_some() {
            out.insert(id.to_string(), read_changes_file(&entry.path())?);
        }
    }
    Ok(out)
}

/// Scores written solutions against a labeled dataset. All missing or
/// mis-sized solutions are reported together.
pub fn score_solutions(
    model: &str,
    dataset: &Dataset,
    solutions: &BTreeMap<String, ChangeLabels>,
) -> Result<EvalReport> {
    let truths = dataset.truths()?;
    let mut problems = Vec::new();
    let mut predictions = Vec::with_capacity(dataset.len());
    for (item, truth) in dataset.items.iter().zip(truths) {
        let id = &item.problem.id;
        match solutions.get(id) {
            None => problems.push(format!("{}: missing", solution_file_name(id))),
            Some(pred) if pred.len() != truth.len() => problems.push(format!(
                "{}: {} labels, truth has {}",
                solution_file_name(id),
                pred.len(),
                truth.len()
            )),
            Some(pred) => predictions.push((id.clone(), pred.clone())),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Data(problems.join("\n")));
    }
    EvalReport::from_predictions(model, dataset, predictions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabeledProblem;
    use proptest::prelude::*;

    fn labels(v: &[u8]) -> ChangeLabels {
        ChangeLabels::new(v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_case() {
        let m = macro_f1(&[labels(&[1, 0, 1])], &[labels(&[1, 1, 0])]).unwrap();
        assert_eq!(m.f1_class1, 0.5);
        assert_eq!(m.f1_class0, 0.0);
        assert_eq!(m.macro_f1, 0.25);
        assert_eq!(m.confusion, Confusion { tp: 1, fp: 1, tn: 0, fn_: 1 });
    }

    #[test]
    fn perfect_and_degenerate() {
        let v = [labels(&[1, 0, 0, 1]), labels(&[0])];
        assert_eq!(macro_f1(&v, &v).unwrap().macro_f1, 1.0);
        let z = [labels(&[0, 0, 0])];
        assert_eq!(macro_f1(&z, &z).unwrap().macro_f1, 1.0);
        // class 1 present only in predictions
        let m = macro_f1(&[labels(&[1, 0])], &[labels(&[0, 0])]).unwrap();
        assert_eq!(m.f1_class1, 0.0);
    }

    #[test]
    fn misalignment_errors() {
        assert!(macro_f1(&[labels(&[1])], &[labels(&[1]), labels(&[0])]).is_err());
        assert!(macro_f1(&[labels(&[1, 0])], &[labels(&[1])]).is_err());
    }

    #[test]
    fn baselines() {
        let p = Problem::new("problem-1", vec!["a".into(); 4]).unwrap();
        assert_eq!(baseline_predict(BaselineKind::Predict1, &p, 0).as_slice(), &[1, 1, 1]);
        let single = Problem::new("problem-2", vec!["a".into()]).unwrap();
        assert!(baseline_predict(BaselineKind::Predict0, &single, 0).is_empty());
        let long = Problem::new("problem-3", vec!["a".into(); 64]).unwrap();
        let a = baseline_predict(BaselineKind::Random, &long, 7);
        assert_eq!(a, baseline_predict(BaselineKind::Random, &long, 7));
        assert_ne!(a, baseline_predict(BaselineKind::Random, &long, 8));
        assert!("PREDICT-1".parse::<BaselineKind>().is_ok());
        assert!("coin".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn solutions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let preds = vec![("problem-3".to_string(), labels(&[0, 1])), ("problem-4".to_string(), labels(&[]))];
        write_solutions(&preds, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("solution-problem-3.json")).unwrap();
        assert_eq!(text, r#"{"changes":[0,1]}"#);
        let text = fs::read_to_string(dir.path().join("solution-problem-4.json")).unwrap();
        assert_eq!(text, r#"{"changes":[]}"#);
        let back = read_solutions(dir.path()).unwrap();
        assert_eq!(back.into_iter().collect::<Vec<_>>(), preds);
    }

    struct Replay<'a>(&'a Dataset);

    impl Predictor for Replay<'_> {
        fn name(&self) -> String {
            "replay".into()
        }
        fn predict_problem(&self, problem: &Problem) -> Result<ChangeLabels> {
            let item = self.0.items.iter().find(|i| i.problem.id == problem.id).unwrap();
            Ok(item.labels.clone().unwrap())
        }
    }

    fn dataset(truths: &[&[u8]]) -> Dataset {
        Dataset::new(
            "fixture",
            truths
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let p = Problem::new(format!("problem-{}", k + 1), vec!["s".into(); t.len() + 1]).unwrap();
                    LabeledProblem::new(p, Some(labels(t))).unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn evaluate_with_stub_predictors() {
        let ds = dataset(&[&[0, 1, 1], &[1], &[0, 0]]);
        assert_eq!(evaluate_dataset(&Replay(&ds), &ds).unwrap().macro_f1, 1.0);
        let zeros = dataset(&[&[0, 0], &[0]]);
        let p0 = BaselinePredictor { kind: BaselineKind::Predict0, seed: 0 };
        let report = evaluate_dataset(&p0, &zeros).unwrap();
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.confusion.total(), 3);

        let mut unlabeled = ds.clone();
        unlabeled.items[1].labels = None;
        assert!(evaluate_dataset(&p0, &unlabeled).is_err());
    }

    #[test]
    fn score_solutions_reports_every_bad_file() {
        let ds = dataset(&[&[0, 1], &[1], &[0, 0]]);
        let mut sols = BTreeMap::new();
        sols.insert("problem-1".to_string(), labels(&[0]));
        sols.insert("problem-2".to_string(), labels(&[1]));
        let err = score_solutions("m", &ds, &sols).unwrap_err().to_string();
        assert!(err.contains("solution-problem-1.json: 1 labels"), "{err}");
        assert!(err.contains("solution-problem-3.json: missing"), "{err}");
    }

    #[test]
    fn table_layout() {
        let ds = dataset(&[&[0, 1]]);
        let r = evaluate_dataset(&Replay(&ds), &ds).unwrap();
        let table = render_table(&[&r]);
        assert!(table.lines().next().unwrap().contains("F1 (macro)"));
        assert!(table.contains("replay") && table.contains("1.000"));
    }

    fn label_sets() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
        proptest::collection::vec(
            (1usize..12).prop_flat_map(|n| {
                (proptest::collection::vec(0u8..2, n), proptest::collection::vec(0u8..2, n))
            }),
            1..8,
        )
    }

    proptest! {
        #[test]
        fn bounded_order_invariant_and_swap_symmetric(pairs in label_sets()) {
            let preds: Vec<Vec<u8>> = pairs.iter().map(|p| p.0.clone()).collect();
            let truths: Vec<Vec<u8>> = pairs.iter().map(|p| p.1.clone()).collect();
            let m = macro_f1(&preds, &truths).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.macro_f1));
            prop_assert_eq!(m.macro_f1 == 1.0, preds == truths);

            let rp: Vec<Vec<u8>> = preds.iter().rev().cloned().collect();
            let rt: Vec<Vec<u8>> = truths.iter().rev().cloned().collect();
            prop_assert_eq!(macro_f1(&rp, &rt).unwrap().macro_f1, m.macro_f1);

            let flip = |v: &Vec<Vec<u8>>| v.iter().map(|l| l.iter().map(|x| 1 - x).collect::<Vec<u8>>()).collect::<Vec<_>>();
            let s = macro_f1(&flip(&preds), &flip(&truths)).unwrap();
            prop_assert_eq!(s.f1_class0, m.f1_class1);
            prop_assert_eq!(s.f1_class1, m.f1_class0);
            prop_assert_eq!(s.macro_f1, m.macro_f1);
        }
    }
}

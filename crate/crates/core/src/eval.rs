//! Evaluation protocol: deterministic 72/8/20 splits, F1 / accuracy /
//! AUC metrics, five-seed averaging, and the comparison report with
//! its four delta rows.

use crate::mlm_data::{build_classify_examples, ClassifyExample};
use crate::model::{self, ModelState};
use crate::tokenizer::Vocabulary;
use crate::trainer::{self, Strategy, TrainPlan};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset too small to split: need at least 3 examples, got {0}")]
    DatasetTooSmall(usize),
    #[error("prediction/label lengths differ: {predictions} vs {labels}")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },
    #[error("probability row {row} sums to {sum}, expected 1")]
    RowNotNormalized { row: usize, sum: f64 },
    #[error("missing prior_best fixture row")]
    MissingPriorBest,
    #[error("report is missing row ({0:?}, {1:?})")]
    MissingRow(Method, VocabKind),
    #[error("delta row {0} does not re-derive from its operand rows")]
    InconsistentDelta(String),
    #[error("seeds must be distinct")]
    DuplicateSeeds,
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Data(#[from] crate::mlm_data::DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    /// Knowledge-component prediction (multinomial).
    Kc,
    /// Auto-grading (5 labels).
    Ag,
    /// Knowledge tracing (binary).
    Kt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: TaskId,
    pub examples: Vec<(String, usize)>,
    pub num_labels: usize,
}

impl TaskDataset {
    pub fn new(task_id: TaskId, examples: Vec<(String, usize)>) -> Self {
        let num_labels = examples
            .iter()
            .map(|(_, l)| l + 1)
            .max()
            .unwrap_or(0);
        TaskDataset {
            task_id,
            examples,
            num_labels,
        }
    }
}

/// 72/8/20 split parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub validate_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        SplitSpec {
            train_frac: 0.72,
            validate_frac: 0.08,
            test_frac: 0.20,
            seed,
        }
    }
}

/// Seeded shuffle then exact partition: train = floor(0.72 n),
/// validate = ceil(0.08 n), test = remainder.
pub fn split<T: Clone>(
    examples: &[T],
    spec: &SplitSpec,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), EvalError> {
    let n = examples.len();
    if n < 3 {
        return Err(EvalError::DatasetTooSmall(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    idx.shuffle(&mut rng);
    let train_n = (spec.train_frac * n as f64).floor() as usize;
    let validate_n = (spec.validate_frac * n as f64).ceil() as usize;
    let train = idx[..train_n]
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    let validate = idx[train_n..train_n + validate_n]
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    let test = idx[train_n + validate_n..]
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    Ok((train, validate, test))
}

/// Fraction of exactly-equal predictions.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let correct = predictions
        .iter()
        .zip(labels.iter())
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Unweighted mean over classes of 2PR/(P+R); a class with P+R = 0
/// contributes 0.
pub fn f1_macro(
    predictions: &[usize],
    labels: &[usize],
    num_labels: usize,
) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() || num_labels == 0 {
        return Err(EvalError::EmptyInput);
    }
    for &v in predictions.iter().chain(labels.iter()) {
        if v >= num_labels {
            return Err(EvalError::LabelOutOfRange {
                label: v,
                num_labels,
            });
        }
    }
    let mut tp = vec![0u64; num_labels];
    let mut fp = vec![0u64; num_labels];
    let mut fne = vec![0u64; num_labels];
    for (&p, &l) in predictions.iter().zip(labels.iter()) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fne[l] += 1;
        }
    }
    let mut sum = 0.0;
    for c in 0..num_labels {
        let denom = 2 * tp[c] + fp[c] + fne[c];
        if denom > 0 {
            sum += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(sum / num_labels as f64)
}

/// Mann–Whitney statistic: fraction of (positive, negative) pairs
/// with score_pos > score_neg, ties counted 0.5. Computed from the
/// rank sum in O(n log n).
pub fn auc_binary(scores: &[f64], labels: &[usize]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // midranks for ties
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// One-vs-rest macro AUC over class probability columns, skipping
/// classes absent from the labels.
pub fn auc_multiclass(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<f64, EvalError> {
    if probabilities.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: probabilities.len(),
            labels: labels.len(),
        });
    }
    if probabilities.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let num_classes = probabilities[0].len();
    for (row, p) in probabilities.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(EvalError::RowNotNormalized { row, sum });
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for class in 0..num_classes {
        let binary: Vec<usize> = labels.iter().map(|&l| usize::from(l == class)).collect();
        if binary.iter().all(|&b| b == 0) {
            continue;
        }
        if binary.iter().all(|&b| b == 1) {
            return Err(EvalError::SingleClass);
        }
        let scores: Vec<f64> = probabilities.iter().map(|p| p[class]).collect();
        total += auc_binary(&scores, &binary)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(EvalError::SingleClass);
    }
    Ok(total / counted as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PriorBest,
    Base,
    Tapt,
    Mathbert,
    MathbertTapt,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::PriorBest => "Prior Best (p)",
            Method::Base => "BASE (b)",
            Method::Tapt => "TAPT (t)",
            Method::Mathbert => "DAPT (m)",
            Method::MathbertTapt => "DAPT+TAPT (mt)",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabKind {
    Orig,
    Custom,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl VocabKind {
    pub fn label(&self) -> &'static str {
        match self {
            VocabKind::Orig => "orig",
            VocabKind::Custom => "custom",
            VocabKind::NotApplicable => "/",
        }
    }
}

pub const METRIC_KEYS: [&str; 5] = ["kc_f1", "kc_accu", "ag_auc", "kt_auc", "kt_accu"];

/// Mean and sample standard deviation over seeds, as fractions in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub mean: f64,
    pub std: f64,
}

impl MetricValue {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = if samples.len() < 2 {
            0.0
        } else {
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt()
        };
        MetricValue { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub vocab: VocabKind,
    pub metrics: BTreeMap<String, MetricValue>,
}

/// Delta row: DAPT row minus a comparison row, per vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub name: String,
    pub vocab: VocabKind,
    /// Differences in percentage points.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub deltas: Vec<DeltaRow>,
}

impl EvalReport {
    pub fn row(&self, method: Method, vocab: VocabKind) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.vocab == vocab)
    }
}

/// The comparison target of each delta row: DAPT under `vocab` minus
/// the named method (prior has no vocab; BASE and TAPT ran with the
/// original vocabulary only; DAPT+TAPT matches the vocab).
fn delta_operand(name: &str, vocab: VocabKind) -> Option<(Method, VocabKind)> {
    match name {
        "m-p" => Some((Method::PriorBest, VocabKind::NotApplicable)),
        "m-b" => Some((Method::Base, VocabKind::Orig)),
        "m-t" => Some((Method::Tapt, VocabKind::Orig)),
        "m-mt" => Some((Method::MathbertTapt, vocab)),
        _ => None,
    }
}

pub const DELTA_NAMES: [&str; 4] = ["m-p", "m-b", "m-t", "m-mt"];

/// Build the four delta rows (per vocabulary) from the method rows.
pub fn compute_deltas(rows: &[ReportRow]) -> Result<Vec<DeltaRow>, EvalError> {
    let find = |method: Method, vocab: VocabKind| -> Result<&ReportRow, EvalError> {
        rows.iter()
            .find(|r| r.method == method && r.vocab == vocab)
            .ok_or(EvalError::MissingRow(method, vocab))
    };
    let mut deltas = Vec::new();
    for vocab in [VocabKind::Orig, VocabKind::Custom] {
        let Ok(mathbert) = find(Method::Mathbert, vocab) else {
            continue;
        };
        for name in DELTA_NAMES {
            let (other_method, other_vocab) =
                delta_operand(name, vocab).expect("known delta name");
            let Ok(other) = find(other_method, other_vocab) else {
                continue;
            };
            let mut metrics = BTreeMap::new();
            for (key, value) in &mathbert.metrics {
                if let Some(other_value) = other.metrics.get(key) {
                    metrics.insert(key.clone(), (value.mean - other_value.mean) * 100.0);
                }
            }
            deltas.push(DeltaRow {
                name: name.to_string(),
                vocab,
                metrics,
            });
        }
    }
    Ok(deltas)
}

/// Fixture file content: published rows (the prior-best row is
/// required; the rest are optional and used for report arithmetic).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Fixture {
    pub rows: Vec<ReportRow>,
}

impl Fixture {
    pub fn prior_best(&self) -> Result<&ReportRow, EvalError> {
        self.rows
            .iter()
            .find(|r| r.method == Method::PriorBest)
            .ok_or(EvalError::MissingPriorBest)
    }
}

/// One fine-tuning starting point to evaluate.
pub struct ProtocolCell<'a> {
    pub method: Method,
    pub vocab_kind: VocabKind,
    pub start_state: &'a ModelState<f32>,
    pub vocabulary: &'a Vocabulary,
}

/// Metrics for one task from test-set predictions.
pub fn task_metrics(
    task_id: TaskId,
    state: &ModelState<f32>,
    test: &[ClassifyExample],
    num_labels: usize,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let logits = model::predict_logits(state, test)?;
    let c = state.config.num_labels;
    let mut predictions = Vec::with_capacity(test.len());
    let mut probabilities: Vec<Vec<f64>> = Vec::with_capacity(test.len());
    for b in 0..test.len() {
        let row = &logits.data()[b * c..(b + 1) * c];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let z: f64 = exps.iter().sum();
        probabilities.push(exps.iter().map(|e| e / z).collect());
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        predictions.push(argmax);
    }
    let labels: Vec<usize> = test.iter().map(|ex| ex.label).collect();
    let mut out = BTreeMap::new();
    match task_id {
        TaskId::Kc => {
            out.insert("kc_f1".into(), f1_macro(&predictions, &labels, num_labels)?);
            out.insert("kc_accu".into(), accuracy(&predictions, &labels)?);
        }
        TaskId::Ag => {
            out.insert("ag_auc".into(), auc_multiclass(&probabilities, &labels)?);
        }
        TaskId::Kt => {
            let scores: Vec<f64> = probabilities.iter().map(|p| p[1]).collect();
            out.insert("kt_auc".into(), auc_binary(&scores, &labels)?);
            out.insert("kt_accu".into(), accuracy(&predictions, &labels)?);
        }
    }
    Ok(out)
}

/// Per-cell protocol: for each seed, split, fine-tune from the cell's
/// starting state, evaluate on test; report mean and sample std. The
/// prior-best row comes from the fixture, never from training.
pub fn run_protocol(
    dataset: &TaskDataset,
    cells: &[ProtocolCell<'_>],
    seeds: &[u64],
    finetune_plan: &TrainPlan,
    fixture: &Fixture,
) -> Result<EvalReport, EvalError> {
    use rayon::prelude::*;
    let distinct: std::collections::BTreeSet<u64> = seeds.iter().copied().collect();
    if distinct.len() != seeds.len() {
        return Err(EvalError::DuplicateSeeds);
    }
    let mut rows = vec![fixture.prior_best()?.clone()];
    for cell in cells {
        let per_seed: Vec<Result<BTreeMap<String, f64>, EvalError>> = seeds
            .par_iter()
            .map(|&seed| {
                let spec = SplitSpec::new(seed);
                let (train, validate, test) = split(&dataset.examples, &spec)?;
                let max_seq = cell.start_state.config.max_seq;
                let train_ex = build_classify_examples(
                    &train,
                    cell.vocabulary,
                    max_seq,
                    dataset.num_labels,
                )?;
                let val_ex = build_classify_examples(
                    &validate,
                    cell.vocabulary,
                    max_seq,
                    dataset.num_labels,
                )?;
                let test_ex = build_classify_examples(
                    &test,
                    cell.vocabulary,
                    max_seq,
                    dataset.num_labels,
                )?;
                let plan = TrainPlan {
                    seed,
                    strategy: Strategy::Base,
                    ..finetune_plan.clone()
                };
                let (tuned, _) = trainer::finetune(cell.start_state, &train_ex, &val_ex, &plan)?;
                task_metrics(dataset.task_id, &tuned, &test_ex, dataset.num_labels)
            })
            .collect();
        let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for result in per_seed {
            for (key, value) in result? {
                samples.entry(key).or_default().push(value);
            }
        }
        let metrics = samples
            .into_iter()
            .map(|(k, v)| (k, MetricValue::from_samples(&v)))
            .collect();
        rows.push(ReportRow {
            method: cell.method,
            vocab: cell.vocab_kind,
            metrics,
        });
    }
    let deltas = compute_deltas(&rows)?;
    Ok(EvalReport { rows, deltas })
}

fn fmt_pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Render the report. Markdown marks the best value per metric column
/// in bold and the strict second best underlined (compared at the
/// reported two-decimal precision); ties for best are all bold with
/// no underline. Re-derives every delta row as a consistency check.
pub fn render_report(report: &EvalReport, markdown: bool) -> Result<String, EvalError> {
    let rederived = compute_deltas(&report.rows)?;
    for delta in &report.deltas {
        let matching = rederived
            .iter()
            .find(|d| d.name == delta.name && d.vocab == delta.vocab)
            .ok_or_else(|| EvalError::InconsistentDelta(delta.name.clone()))?;
        for (key, value) in &delta.metrics {
            let other = matching
                .metrics
                .get(key)
                .ok_or_else(|| EvalError::InconsistentDelta(delta.name.clone()))?;
            if (value - other).abs() > 0.005 + 1e-9 {
                return Err(EvalError::InconsistentDelta(format!(
                    "{} {}: {value} vs {other}",
                    delta.name, key
                )));
            }
        }
    }

    if !markdown {
        return Ok(serde_json::to_string_pretty(report).expect("report serializes"));
    }

    // best / second best per metric column, at 2-decimal percent precision
    let mut best: BTreeMap<&str, (i64, i64)> = BTreeMap::new();
    let rounded = |v: f64| (v * 10_000.0).round() as i64;
    for key in METRIC_KEYS {
        let mut values: Vec<i64> = report
            .rows
            .iter()
            .filter_map(|r| r.metrics.get(key).map(|m| rounded(m.mean)))
            .collect();
        values.sort_unstable();
        values.dedup();
        values.reverse();
        if let Some(&top) = values.first() {
            let second = values.get(1).copied().unwrap_or(i64::MIN);
            best.insert(key, (top, second));
        }
    }

    let mut out = String::new();
    out.push_str("| Method | Vocab |");
    for key in METRIC_KEYS {
        out.push_str(&format!(" {key} |"));
    }
    out.push('\n');
    out.push_str("|---|---|");
    for _ in METRIC_KEYS {
        out.push_str("---|");
    }
    out.push('\n');
    for row in &report.rows {
        out.push_str(&format!("| {} | {} |", row.method.label(), row.vocab.label()));
        for key in METRIC_KEYS {
            match row.metrics.get(key) {
                None => out.push_str(" / |"),
                Some(m) => {
                    let cell = format!("{} ± {}", fmt_pct(m.mean), fmt_pct(m.std));
                    let r = rounded(m.mean);
                    let (top, second) = best[key];
                    // count how many rows share the top value
                    let top_count = report
                        .rows
                        .iter()
                        .filter(|other| {
                            other.metrics.get(key).map(|v| rounded(v.mean)) == Some(top)
                        })
                        .count();
                    if r == top {
                        out.push_str(&format!(" **{cell}** |"));
                    } else if r == second && top_count == 1 {
                        out.push_str(&format!(" <u>{cell}</u> |"));
                    } else {
                        out.push_str(&format!(" {cell} |"));
                    }
                }
            }
        }
        out.push('\n');
    }
    for delta in &report.deltas {
        out.push_str(&format!(
            "| Δ_{{{}}} | {} |",
            delta.name,
            delta.vocab.label()
        ));
        for key in METRIC_KEYS {
            match delta.metrics.get(key) {
                None => out.push_str(" / |"),
                Some(v) => out.push_str(&format!(" {v:.2} |")),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

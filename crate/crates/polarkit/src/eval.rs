//! Confusion-matrix construction, the binary metric suite, greedy backend
//! evaluation with a per-example audit trail, and report-to-report diffing.
//!
//! Malformed predictions are first-class: they are tallied separately and
//! folded into the counts according to an explicit policy, never silently
//! repaired. All ratios with zero denominators are reported as 0 and flagged
//! rather than emitted as NaN, so report files are stable JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledExample;
use crate::gen::{Decoding, GenError, PolicyBackend};
use crate::pairs::Outcome;
use crate::schema::{extract_label, render_prompt, Label, PromptVariant};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and gold lengths differ: {preds} vs {golds}")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("confusion matrix has no entries")]
    EmptyMatrix,
    #[error("reports cover different instance counts: {a} vs {b}")]
    SizeMismatch { a: usize, b: usize },
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How unparseable predictions enter the counts. `AsNegative` scores them as
/// a predicted 0 (the conservative class) in addition to tallying them;
/// `Exclude` drops them from scoring entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedPolicy {
    #[default]
    AsNegative,
    Exclude,
}

impl std::str::FromStr for MalformedPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "as_negative" => Ok(MalformedPolicy::AsNegative),
            "exclude" => Ok(MalformedPolicy::Exclude),
            other => Err(format!("unknown malformed policy {other:?} (expected as_negative or exclude)")),
        }
    }
}

/// Binary confusion counts plus a malformed tally. Under `AsNegative` the
/// malformed items are also scored into `fn`/`tn`, so `total()` exceeds the
/// instance count by `malformed`; under `Exclude` it equals it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub malformed: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        Self { tp, fp, fn_, tn, malformed: 0 }
    }

    /// Scored entries: the denominator for accuracy.
    pub fn scored(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn total(&self) -> usize {
        self.scored() + self.malformed
    }
}

/// Builds the confusion matrix from extracted predictions (`None` marks a
/// malformed completion) against gold labels.
pub fn confusion(
    preds: &[Option<Label>],
    golds: &[Label],
    policy: MalformedPolicy,
) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    let mut cm = ConfusionMatrix::default();
    for (pred, &gold) in preds.iter().zip(golds) {
        let scored_pred = match pred {
            Some(p) => *p,
            None => {
                cm.malformed += 1;
                match policy {
                    MalformedPolicy::AsNegative => Label::NonPolarized,
                    MalformedPolicy::Exclude => continue,
                }
            }
        };
        match (scored_pred, gold) {
            (Label::Polarized, Label::Polarized) => cm.tp += 1,
            (Label::Polarized, Label::NonPolarized) => cm.fp += 1,
            (Label::NonPolarized, Label::Polarized) => cm.fn_ += 1,
            (Label::NonPolarized, Label::NonPolarized) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// The six-metric suite over a confusion matrix. `undefined_ratios` is set
/// when any denominator was zero and the metric was reported as 0; it is
/// serialized only in that case so normal reports keep the fixed key set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1_binary: f64,
    pub f1_macro: f64,
    pub f1_micro: f64,
    #[serde(flatten)]
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub undefined_ratios: bool,
}

fn ratio(num: usize, den: usize, undefined: &mut bool) -> f64 {
    if den == 0 {
        *undefined = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Computes the metric suite. Macro F1 averages the positive-class and
/// negative-class F1; micro F1 for single-label binary classification equals
/// accuracy (both are computed and the identity is property-tested).
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let mut undefined = false;
    let scored = cm.scored();
    let accuracy = ratio(cm.tp + cm.tn, scored, &mut undefined);
    let precision = ratio(cm.tp, cm.tp + cm.fp, &mut undefined);
    let recall = ratio(cm.tp, cm.tp + cm.fn_, &mut undefined);
    // 2PR/(P+R) in count form, so a zero numerator with a live denominator is
    // a defined 0 rather than a flagged one.
    let f1_binary = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_, &mut undefined);
    let f1_negative = ratio(2 * cm.tn, 2 * cm.tn + cm.fn_ + cm.fp, &mut undefined);
    let f1_macro = (f1_binary + f1_negative) / 2.0;
    let f1_micro = ratio(2 * (cm.tp + cm.tn), 2 * scored, &mut undefined);
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1_binary,
        f1_macro,
        f1_micro,
        confusion: *cm,
        undefined_ratios: undefined,
    })
}

/// One audit line: what the backend was asked, what it answered, and how the
/// answer scored. `pred` is null for malformed completions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub id: String,
    pub gold: Label,
    pub pred: Option<Label>,
    pub outcome: Outcome,
}

/// Metrics plus the per-example audit trail, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub audit: Vec<AuditRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub variant: PromptVariant,
    pub malformed_policy: MalformedPolicy,
    pub max_new_tokens: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            variant: PromptVariant::Neutral,
            malformed_policy: MalformedPolicy::default(),
            max_new_tokens: 512,
        }
    }
}

/// Scores a backend over labeled examples: renders each prompt, decodes
/// greedily, extracts the label, and reduces in input order. Greedy decoding
/// ignores the sampling seed, so the run is deterministic by construction.
pub fn evaluate_backend<'a>(
    backend: &dyn PolicyBackend,
    examples: impl IntoIterator<Item = &'a LabeledExample>,
    options: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    let mut audit = Vec::new();
    for example in examples {
        let prompt = render_prompt(&example.text, options.variant);
        let completion = backend.sample(&prompt, Decoding::Greedy, 0, options.max_new_tokens)?;
        let pred = extract_label(&completion).ok();
        let outcome = match pred {
            Some(p) => Outcome::of(p, example.label),
            None => Outcome::MALFORMED,
        };
        audit.push(AuditRow { id: example.id.clone(), gold: example.label, pred, outcome });
        preds.push(pred);
        golds.push(example.label);
    }
    let cm = confusion(&preds, &golds, options.malformed_policy)?;
    Ok(Evaluation { report: metrics(&cm)?, audit })
}

/// Signed metric and count deltas, `b` minus `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDiff {
    pub delta_tp: i64,
    pub delta_fp: i64,
    pub delta_fn: i64,
    pub delta_tn: i64,
    pub delta_malformed: i64,
    pub delta_accuracy: f64,
    pub delta_precision: f64,
    pub delta_recall: f64,
    pub delta_f1_binary: f64,
    pub delta_f1_macro: f64,
    pub delta_f1_micro: f64,
}

/// Diffs two reports over the same number of instances.
pub fn diff_reports(a: &MetricsReport, b: &MetricsReport) -> Result<ReportDiff, EvalError> {
    if a.confusion.total() != b.confusion.total() {
        return Err(EvalError::SizeMismatch { a: a.confusion.total(), b: b.confusion.total() });
    }
    let d = |x: usize, y: usize| y as i64 - x as i64;
    Ok(ReportDiff {
        delta_tp: d(a.confusion.tp, b.confusion.tp),
        delta_fp: d(a.confusion.fp, b.confusion.fp),
        delta_fn: d(a.confusion.fn_, b.confusion.fn_),
        delta_tn: d(a.confusion.tn, b.confusion.tn),
        delta_malformed: d(a.confusion.malformed, b.confusion.malformed),
        delta_accuracy: b.accuracy - a.accuracy,
        delta_precision: b.precision - a.precision,
        delta_recall: b.recall - a.recall,
        delta_f1_binary: b.f1_binary - a.f1_binary,
        delta_f1_macro: b.f1_macro - a.f1_macro,
        delta_f1_micro: b.f1_micro - a.f1_micro,
    })
}

/// Writes the report as pretty JSON with a trailing newline.
pub fn write_report(report: &MetricsReport, path: &Path) -> Result<(), EvalError> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<MetricsReport, EvalError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Writes the audit trail as JSONL, one row per example in corpus order.
pub fn write_audit(rows: &[AuditRow], path: &Path) -> Result<(), EvalError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_audit(path: &Path) -> Result<Vec<AuditRow>, EvalError> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::gen::BackendConcurrency;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 5e-4;

    fn example(id: &str, label: Label) -> LabeledExample {
        LabeledExample {
            id: id.into(),
            text: format!("text for {id}"),
            label,
            split: Split::Dev,
            lang: "en".into(),
        }
    }

    /// Backend that answers every prompt with the same completion.
    struct ConstBackend(&'static str);

    impl PolicyBackend for ConstBackend {
        fn sample(&self, _: &str, _: Decoding, _: u64, _: usize) -> Result<String, GenError> {
            Ok(self.0.to_string())
        }

        fn sequence_logprob(&self, _: &str, _: &str) -> Result<f64, GenError> {
            Ok(0.0)
        }

        fn concurrency(&self) -> BackendConcurrency {
            BackendConcurrency::ConcurrentReadOnly
        }
    }

    /// Backend that echoes the gold label embedded in the prompt text.
    struct OracleBackend;

    impl PolicyBackend for OracleBackend {
        fn sample(&self, prompt: &str, _: Decoding, _: u64, _: usize) -> Result<String, GenError> {
            let label = if prompt.contains("POS") { 1 } else { 0 };
            Ok(format!("Final Answer: {label}"))
        }

        fn sequence_logprob(&self, _: &str, _: &str) -> Result<f64, GenError> {
            Ok(0.0)
        }
    }

    fn label_of(bit: u8) -> Label {
        Label::from_int(bit as i64).unwrap()
    }

    #[test]
    fn confusion_counts_basic_buckets() {
        let preds = vec![Some(Label::Polarized), Some(Label::NonPolarized)];
        let golds = vec![Label::Polarized, Label::Polarized];
        let cm = confusion(&preds, &golds, MalformedPolicy::AsNegative).unwrap();
        assert_eq!((cm.tp, cm.fp, cm.fn_, cm.tn, cm.malformed), (1, 0, 1, 0, 0));
    }

    #[test]
    fn all_correct_has_no_errors() {
        let preds = vec![Some(Label::Polarized), Some(Label::NonPolarized)];
        let golds = vec![Label::Polarized, Label::NonPolarized];
        let cm = confusion(&preds, &golds, MalformedPolicy::AsNegative).unwrap();
        assert_eq!(cm.fp, 0);
        assert_eq!(cm.fn_, 0);
        assert_eq!(cm.scored(), 2);
    }

    #[test]
    fn malformed_policy_controls_scoring() {
        let preds = vec![None];
        let golds = vec![Label::Polarized];
        let scored = confusion(&preds, &golds, MalformedPolicy::AsNegative).unwrap();
        assert_eq!((scored.fn_, scored.malformed), (1, 1));
        assert_eq!(scored.total(), 2, "scored and tallied");
        let excluded = confusion(&preds, &golds, MalformedPolicy::Exclude).unwrap();
        assert_eq!((excluded.fn_, excluded.malformed), (0, 1));
        assert_eq!(excluded.total(), 1);
    }

    #[test]
    fn confusion_rejects_length_mismatch() {
        let err = confusion(&[None], &[], MalformedPolicy::AsNegative).unwrap_err();
        assert!(matches!(err, EvalError::LengthMismatch { preds: 1, golds: 0 }));
    }

    #[test]
    fn published_sft_stage_metrics_reproduce() {
        let report = metrics(&ConfusionMatrix::new(30, 6, 29, 95)).unwrap();
        assert!((report.accuracy - 0.7812).abs() < TOL);
        assert!((report.precision - 0.8333).abs() < TOL);
        assert!((report.recall - 0.5085).abs() < TOL);
        assert!((report.f1_binary - 0.6316).abs() < TOL);
        assert!((report.f1_macro - 0.7380).abs() < TOL);
        assert!((report.f1_micro - 0.7812).abs() < TOL);
        assert!(!report.undefined_ratios);
    }

    #[test]
    fn published_dpo_stage_metrics_reproduce() {
        let report = metrics(&ConfusionMatrix::new(46, 19, 13, 82)).unwrap();
        assert!((report.accuracy - 0.8000).abs() < TOL);
        assert!((report.precision - 0.7077).abs() < TOL);
        assert!((report.recall - 0.7797).abs() < TOL);
        assert!((report.f1_binary - 0.7419).abs() < TOL);
        assert!((report.f1_macro - 0.7893).abs() < TOL);
        assert!((report.f1_micro - 0.8000).abs() < TOL);
    }

    #[test]
    fn perfect_classifier_scores_ones() {
        let report = metrics(&ConfusionMatrix::new(7, 0, 0, 3)).unwrap();
        for value in [
            report.accuracy,
            report.precision,
            report.recall,
            report.f1_binary,
            report.f1_macro,
            report.f1_micro,
        ] {
            assert_eq!(value, 1.0);
        }
        assert!(!report.undefined_ratios);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(matches!(metrics(&ConfusionMatrix::default()), Err(EvalError::EmptyMatrix)));
    }

    #[test]
    fn zero_denominators_report_zero_and_flag() {
        // No positive predictions: precision is 0/0.
        let report = metrics(&ConfusionMatrix::new(0, 0, 5, 5)).unwrap();
        assert_eq!(report.precision, 0.0);
        assert_eq!(report.recall, 0.0);
        assert!(report.undefined_ratios);
        // All malformed under Exclude: nothing scored at all.
        let cm = ConfusionMatrix { malformed: 3, ..ConfusionMatrix::default() };
        let report = metrics(&cm).unwrap();
        assert_eq!(report.accuracy, 0.0);
        assert!(report.undefined_ratios);
    }

    #[test]
    fn micro_f1_equals_accuracy_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..1000 {
            let cm = ConfusionMatrix::new(
                rng.gen_range(0..200),
                rng.gen_range(0..200),
                rng.gen_range(0..200),
                rng.gen_range(1..200),
            );
            let report = metrics(&cm).unwrap();
            assert_eq!(report.f1_micro, report.accuracy, "must hold bitwise for {cm:?}");
        }
    }

    #[test]
    fn metrics_match_naive_recomputation_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..1000 {
            let n = rng.gen_range(1..60);
            let preds: Vec<Option<Label>> = (0..n)
                .map(|_| match rng.gen_range(0..10) {
                    0 => None,
                    d => Some(label_of((d % 2) as u8)),
                })
                .collect();
            let golds: Vec<Label> = (0..n).map(|_| label_of(rng.gen::<bool>() as u8)).collect();
            let cm = confusion(&preds, &golds, MalformedPolicy::AsNegative).unwrap();
            let report = metrics(&cm).unwrap();

            // Independent path: walk the instances and apply the textbook
            // definitions directly.
            let effective: Vec<Label> = preds
                .iter()
                .map(|p| p.unwrap_or(Label::NonPolarized))
                .collect();
            let count = |f: &dyn Fn(Label, Label) -> bool| {
                effective.iter().zip(&golds).filter(|(p, g)| f(**p, **g)).count()
            };
            let tp = count(&|p, g| p.is_polarized() && g.is_polarized());
            let fp = count(&|p, g| p.is_polarized() && !g.is_polarized());
            let fn_ = count(&|p, g| !p.is_polarized() && g.is_polarized());
            let tn = count(&|p, g| !p.is_polarized() && !g.is_polarized());
            assert_eq!((cm.tp, cm.fp, cm.fn_, cm.tn), (tp, fp, fn_, tn));

            let acc = (tp + tn) as f64 / n as f64;
            assert!((report.accuracy - acc).abs() < 1e-12);
            if tp + fp > 0 && tp + fn_ > 0 {
                let p = tp as f64 / (tp + fp) as f64;
                let r = tp as f64 / (tp + fn_) as f64;
                if p + r > 0.0 {
                    let f1 = 2.0 * p * r / (p + r);
                    assert!((report.f1_binary - f1).abs() < 1e-12, "harmonic-mean identity");
                }
            }
            if tn + fn_ > 0 && tn + fp > 0 {
                let p_neg = tn as f64 / (tn + fn_) as f64;
                let r_neg = tn as f64 / (tn + fp) as f64;
                if p_neg + r_neg > 0.0 {
                    let f1_neg = 2.0 * p_neg * r_neg / (p_neg + r_neg);
                    assert!((report.f1_macro - (report.f1_binary + f1_neg) / 2.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn always_positive_stub_on_dev_distribution() {
        // Dev split distribution: 59 polarized, 101 non-polarized.
        let mut examples = Vec::new();
        for i in 0..59 {
            examples.push(example(&format!("p{i}"), Label::Polarized));
        }
        for i in 0..101 {
            examples.push(example(&format!("n{i}"), Label::NonPolarized));
        }
        let backend = ConstBackend("Final Answer: 1");
        let eval = evaluate_backend(&backend, &examples, &EvalOptions::default()).unwrap();
        assert_eq!(eval.report.recall, 1.0);
        assert!((eval.report.precision - 0.36875).abs() < 1e-12, "59/160 exactly");
        assert_eq!(eval.report.confusion.fp, 101);
        assert_eq!(eval.audit.len(), 160);
    }

    #[test]
    fn gold_echoing_stub_is_perfect() {
        let examples = vec![
            LabeledExample {
                id: "a".into(),
                text: "POS one".into(),
                label: Label::Polarized,
                split: Split::Dev,
                lang: "en".into(),
            },
            LabeledExample {
                id: "b".into(),
                text: "neg one".into(),
                label: Label::NonPolarized,
                split: Split::Dev,
                lang: "en".into(),
            },
        ];
        let eval = evaluate_backend(&OracleBackend, &examples, &EvalOptions::default()).unwrap();
        assert_eq!(eval.report.f1_macro, 1.0);
        assert_eq!(eval.report.accuracy, 1.0);
        assert!(eval.audit.iter().all(|row| row.outcome.is_correct()));
    }

    #[test]
    fn garbage_stub_counts_malformed_per_policy() {
        let examples: Vec<LabeledExample> =
            (0..4).map(|i| example(&format!("g{i}"), Label::Polarized)).collect();
        let backend = ConstBackend("not a record at all");
        let eval = evaluate_backend(&backend, &examples, &EvalOptions::default()).unwrap();
        assert_eq!(eval.report.confusion.malformed, 4);
        assert_eq!(eval.report.confusion.fn_, 4, "as_negative scores them as 0");
        assert!(eval.audit.iter().all(|row| row.outcome == Outcome::MALFORMED && row.pred.is_none()));

        let options = EvalOptions { malformed_policy: MalformedPolicy::Exclude, ..Default::default() };
        let eval = evaluate_backend(&backend, &examples, &options).unwrap();
        assert_eq!(eval.report.confusion.scored(), 0);
        assert!(eval.report.undefined_ratios);
    }

    /// Published ablation rows as full matrices: the eval-side totals are 533
    /// polarized and 919 non-polarized, so tp = 533 - fn and tn = 919 - fp.
    fn ablation_report(fn_: usize, fp: usize) -> MetricsReport {
        metrics(&ConfusionMatrix::new(533 - fn_, fp, fn_, 919 - fp)).unwrap()
    }

    #[test]
    fn diff_matches_pair_count_ablation() {
        let sft = ablation_report(158, 137);
        let dpo_330 = ablation_report(132, 155);
        let dpo_721 = ablation_report(64, 274);
        assert!((sft.f1_macro - 0.7795).abs() < TOL);
        assert!((dpo_330.f1_macro - 0.7889).abs() < TOL);
        assert!((dpo_721.f1_macro - 0.7637).abs() < TOL);

        let diff = diff_reports(&sft, &dpo_330).unwrap();
        assert_eq!(diff.delta_fn, -26);
        assert_eq!(diff.delta_fp, 18);
        assert!((diff.delta_f1_macro - (0.7889 - 0.7795)).abs() < 2.0 * TOL);

        let diff = diff_reports(&dpo_330, &dpo_721).unwrap();
        assert_eq!(diff.delta_fn, -68);
        assert_eq!(diff.delta_fp, 119);
        assert!((diff.delta_f1_macro - (0.7637 - 0.7889)).abs() < 2.0 * TOL);
    }

    #[test]
    fn diff_with_itself_is_zero() {
        let report = ablation_report(158, 137);
        let diff = diff_reports(&report, &report).unwrap();
        assert_eq!(diff, ReportDiff {
            delta_tp: 0,
            delta_fp: 0,
            delta_fn: 0,
            delta_tn: 0,
            delta_malformed: 0,
            delta_accuracy: 0.0,
            delta_precision: 0.0,
            delta_recall: 0.0,
            delta_f1_binary: 0.0,
            delta_f1_macro: 0.0,
            delta_f1_micro: 0.0,
        });
    }

    #[test]
    fn diff_rejects_different_sizes() {
        let a = metrics(&ConfusionMatrix::new(1, 1, 1, 1)).unwrap();
        let b = metrics(&ConfusionMatrix::new(1, 1, 1, 2)).unwrap();
        assert!(matches!(diff_reports(&a, &b), Err(EvalError::SizeMismatch { a: 4, b: 5 })));
    }

    #[test]
    fn report_json_has_exact_keys_in_order() {
        let report = metrics(&ConfusionMatrix::new(30, 6, 29, 95)).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let keys = [
            "\"accuracy\"",
            "\"precision\"",
            "\"recall\"",
            "\"f1_binary\"",
            "\"f1_macro\"",
            "\"f1_micro\"",
            "\"tp\"",
            "\"fp\"",
            "\"fn\"",
            "\"tn\"",
            "\"malformed\"",
        ];
        let mut last = 0;
        for key in keys {
            let pos = json.find(key).unwrap_or_else(|| panic!("missing key {key}"));
            assert!(pos >= last, "key {key} out of order");
            last = pos;
        }
        assert!(!json.contains("undefined_ratios"), "flag omitted when false");
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.as_object().unwrap().len(), keys.len());
    }

    #[test]
    fn report_and_audit_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let report_path = dir.path().join("report.json");
        let audit_path = dir.path().join("audit.jsonl");
        let report = metrics(&ConfusionMatrix::new(2, 1, 1, 3)).unwrap();
        write_report(&report, &report_path).unwrap();
        assert_eq!(load_report(&report_path).unwrap(), report);

        let rows = vec![
            AuditRow { id: "a".into(), gold: Label::Polarized, pred: Some(Label::Polarized), outcome: Outcome::TP },
            AuditRow { id: "b".into(), gold: Label::Polarized, pred: None, outcome: Outcome::MALFORMED },
        ];
        write_audit(&rows, &audit_path).unwrap();
        assert_eq!(load_audit(&audit_path).unwrap(), rows);
        let raw = std::fs::read_to_string(&audit_path).unwrap();
        let first = raw.lines().next().unwrap();
        for key in ["\"id\"", "\"gold\"", "\"pred\"", "\"outcome\""] {
            assert!(first.contains(key), "audit line missing {key}: {first}");
        }
        assert!(raw.lines().nth(1).unwrap().contains("\"pred\":null"));
    }
}

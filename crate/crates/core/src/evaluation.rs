//! Confusion matrices, per-class precision/recall/F1, one-vs-rest ROC
//! curves, and their CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{Prediction, N_CLASSES};
use crate::signal_io::MachiningClass;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("LengthMismatch: {predictions} predictions, {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("Empty: nothing to evaluate")]
    Empty,
    #[error("EmptyMatrix: confusion matrix has no entries")]
    EmptyMatrix,
    #[error("DegenerateClass: {class} has {positives} positives and {negatives} negatives")]
    DegenerateClass {
        class: MachiningClass,
        positives: usize,
        negatives: usize,
    },
    #[error("IoFailure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; N_CLASSES]; N_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..N_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn column_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }
}

pub fn confusion(
    predictions: &[Prediction],
    labels: &[MachiningClass],
) -> Result<ConfusionMatrix, EvalError> {
    confusion_from_classes(
        &predictions.iter().map(|p| p.predicted).collect::<Vec<_>>(),
        labels,
    )
}

pub fn confusion_from_classes(
    predicted: &[MachiningClass],
    labels: &[MachiningClass],
) -> Result<ConfusionMatrix, EvalError> {
    if predicted.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predicted.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (p, t) in predicted.iter().zip(labels) {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerClass {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// No sample was predicted as this class; precision reported as 0.
    pub precision_undefined: bool,
    /// No sample of this class was present; recall reported as 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub per_class: [PerClass; N_CLASSES],
    pub accuracy: f64,
    pub total: u64,
}

impl ClassMetrics {
    pub fn macro_recall(&self) -> f64 {
        self.per_class.iter().map(|c| c.recall).sum::<f64>() / N_CLASSES as f64
    }

    pub fn class(&self, class: MachiningClass) -> &PerClass {
        &self.per_class[class.index()]
    }
}

pub fn class_metrics(cm: &ConfusionMatrix) -> Result<ClassMetrics, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let per_class = std::array::from_fn(|c| {
        let tp = cm.counts[c][c] as f64;
        let col = cm.column_sum(c);
        let row = cm.row_sum(c);
        let precision = if col > 0 { tp / col as f64 } else { 0.0 };
        let recall = if row > 0 { tp / row as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        PerClass {
            precision,
            recall,
            f1,
            support: row,
            precision_undefined: col == 0,
            recall_undefined: row == 0,
        }
    });
    Ok(ClassMetrics {
        per_class,
        accuracy: cm.trace() as f64 / total as f64,
        total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub class: MachiningClass,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// One-vs-rest ROC for `class`, scoring each sample by its predicted
/// probability of that class. Samples with equal scores move together.
pub fn roc(
    probabilities: &[[f64; N_CLASSES]],
    labels: &[MachiningClass],
    class: MachiningClass,
) -> Result<RocCurve, EvalError> {
    if probabilities.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: probabilities.len(),
            labels: labels.len(),
        });
    }
    let scored: Vec<(f64, bool)> = probabilities
        .iter()
        .zip(labels)
        .map(|(p, &l)| (p[class.index()], l == class))
        .collect();
    roc_from_scores(&scored, class)
}

/// ROC over `(score, is_positive)` pairs.
pub fn roc_from_scores(
    scored: &[(f64, bool)],
    class: MachiningClass,
) -> Result<RocCurve, EvalError> {
    let positives = scored.iter().filter(|(_, p)| *p).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::DegenerateClass {
            class,
            positives,
            negatives,
        });
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let next = (fp as f64 / negatives as f64, tp as f64 / positives as f64);
        let prev = *points.last().expect("starts at origin");
        auc += (next.0 - prev.0) * (next.1 + prev.1) / 2.0;
        points.push(next);
    }
    Ok(RocCurve { class, points, auc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub confusion: ConfusionMatrix,
    pub metrics: ClassMetrics,
    /// One entry per class; `None` when the class has no positives or no negatives.
    pub roc: Vec<Option<RocCurve>>,
    pub split: String,
    pub model_id: String,
    pub timestamp: String,
}

/// Builds a full report from predictions and true labels.
pub fn evaluate(
    predictions: &[Prediction],
    labels: &[MachiningClass],
    split: &str,
    model_id: &str,
    timestamp: &str,
) -> Result<EvaluationReport, EvalError> {
    let cm = confusion(predictions, labels)?;
    let metrics = class_metrics(&cm)?;
    let probs: Vec<[f64; N_CLASSES]> = predictions.iter().map(|p| p.probabilities).collect();
    let roc = MachiningClass::ALL
        .iter()
        .map(|&c| match roc(&probs, labels, c) {
            Ok(curve) => Ok(Some(curve)),
            Err(EvalError::DegenerateClass { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_, _>>()?;
    Ok(EvaluationReport {
        confusion: cm,
        metrics,
        roc,
        split: split.to_string(),
        model_id: model_id.to_string(),
        timestamp: timestamp.to_string(),
    })
}

pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("true\\predicted");
    for c in MachiningClass::ALL {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for t in MachiningClass::ALL {
        out.push_str(t.name());
        for p in MachiningClass::ALL {
            let _ = write!(out, ",{}", cm.counts[t.index()][p.index()]);
        }
        out.push('\n');
    }
    out
}

pub fn metrics_csv(m: &ClassMetrics) -> String {
    let mut out = String::from("class,precision,recall,f1,support\n");
    for c in MachiningClass::ALL {
        let pc = m.class(c);
        let _ = writeln!(
            out,
            "{c},{:.6},{:.6},{:.6},{}",
            pc.precision, pc.recall, pc.f1, pc.support
        );
    }
    let _ = writeln!(out, "accuracy,,,{:.6},{}", m.accuracy, m.total);
    out
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = format!("# class={} auc={:.6}\nfpr,tpr\n", curve.class, curve.auc);
    for (fpr, tpr) in &curve.points {
        let _ = writeln!(out, "{fpr:.6},{tpr:.6}");
    }
    out
}

/// Writes `confusion.csv`, `metrics.csv`, one `roc_<class>.csv` per
/// non-degenerate class, and a `summary.txt` with the volatile fields.
pub fn emit_report(report: &EvaluationReport, dir: impl AsRef<Path>) -> Result<(), EvalError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("confusion.csv"), confusion_csv(&report.confusion))?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&report.metrics))?;
    for curve in report.roc.iter().flatten() {
        fs::write(dir.join(format!("roc_{}.csv", curve.class)), roc_csv(curve))?;
    }
    let mut summary = String::new();
    let _ = writeln!(summary, "split={}", report.split);
    let _ = writeln!(summary, "model={}", report.model_id);
    let _ = writeln!(summary, "timestamp={}", report.timestamp);
    let _ = writeln!(summary, "samples={}", report.metrics.total);
    let _ = writeln!(summary, "accuracy={:.6}", report.metrics.accuracy);
    for curve in report.roc.iter().flatten() {
        let _ = writeln!(summary, "auc.{}={:.6}", curve.class, curve.auc);
    }
    fs::write(dir.join("summary.txt"), summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use MachiningClass::*;

    pub(crate) fn reference_test_matrix() -> ConfusionMatrix {
        ConfusionMatrix::from_counts([[1539, 5, 0], [0, 2759, 55], [0, 0, 733]])
    }

    fn pred(class: MachiningClass) -> Prediction {
        let mut probabilities = [0.0; 3];
        probabilities[class.index()] = 1.0;
        Prediction {
            probabilities,
            predicted: class,
            input_out_of_range: false,
        }
    }

    /// Fraction of positive/negative pairs ordered correctly, ties counting half.
    fn mann_whitney(scored: &[(f64, bool)]) -> f64 {
        let pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
        let neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn all_correct_is_diagonal() {
        let labels: Vec<_> = MachiningClass::ALL
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, 10))
            .collect();
        let preds: Vec<_> = labels.iter().map(|&c| pred(c)).collect();
        let cm = confusion(&preds, &labels).unwrap();
        assert_eq!(cm.counts, [[10, 0, 0], [0, 10, 0], [0, 0, 10]]);
        let m = class_metrics(&cm).unwrap();
        assert!(m
            .per_class
            .iter()
            .all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn single_pair() {
        let cm = confusion(&[pred(Chatter)], &[Chatter]).unwrap();
        assert_eq!(cm.counts[0][0], 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn confusion_errors() {
        assert!(matches!(
            confusion(&[pred(Chatter)], &[]),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(confusion(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(
            class_metrics(&ConfusionMatrix::default()),
            Err(EvalError::EmptyMatrix)
        ));
    }

    #[test]
    fn reference_matrix_metrics() {
        let cm = reference_test_matrix();
        let m = class_metrics(&cm).unwrap();
        assert_eq!(cm.trace(), 5031);
        assert_eq!(cm.total(), 5091);
        assert!((m.accuracy - 5031.0 / 5091.0).abs() < 1e-12);
        assert!((m.accuracy * 100.0 - 98.82).abs() < 0.01);

        let rot = m.class(RotationNoMachining);
        assert!((rot.precision - 733.0 / 788.0).abs() < 1e-12);
        assert_eq!(rot.recall, 1.0);
        let f1 = 2.0 * (733.0 / 788.0) / (733.0 / 788.0 + 1.0);
        assert!((rot.f1 - f1).abs() < 1e-12);
        assert_eq!((rot.precision * 100.0).round(), 93.0);
        assert_eq!((rot.f1 * 100.0).round(), 96.0);
        assert_eq!(rot.support, 733);

        let ch = m.class(Chatter);
        assert_eq!(ch.precision, 1.0);
        assert!((ch.recall - 1539.0 / 1544.0).abs() < 1e-12);
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let cm = ConfusionMatrix::from_counts([[2, 0, 0], [1, 0, 0], [0, 0, 0]]);
        let m = class_metrics(&cm).unwrap();
        let mach = m.class(MachiningNoChatter);
        assert!(mach.precision_undefined && !mach.recall_undefined);
        assert_eq!((mach.precision, mach.recall, mach.f1), (0.0, 0.0, 0.0));
        let rot = m.class(RotationNoMachining);
        assert!(rot.precision_undefined && rot.recall_undefined);
    }

    #[test]
    fn roc_examples() {
        let separated = [(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
        assert_eq!(roc_from_scores(&separated, Chatter).unwrap().auc, 1.0);

        let constant = [(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        let c = roc_from_scores(&constant, Chatter).unwrap();
        assert_eq!(c.auc, 0.5);
        assert_eq!(c.points, vec![(0.0, 0.0), (1.0, 1.0)]);

        let hand = [
            (0.9, true),
            (0.8, true),
            (0.4, true),
            (0.7, false),
            (0.3, false),
            (0.2, false),
        ];
        // 3 + 3 + 2 of the 9 pairs are ordered correctly.
        assert!((mann_whitney(&hand) - 8.0 / 9.0).abs() < 1e-15);
        assert!((roc_from_scores(&hand, Chatter).unwrap().auc - 8.0 / 9.0).abs() < 1e-12);

        let one_swap = [
            (0.9, true),
            (0.6, true),
            (0.7, false),
            (0.2, false),
            (0.1, false),
        ];
        assert!((roc_from_scores(&one_swap, Chatter).unwrap().auc - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn roc_degenerate_class() {
        assert!(matches!(
            roc_from_scores(&[(0.1, true), (0.2, true)], Chatter),
            Err(EvalError::DegenerateClass {
                positives: 2,
                negatives: 0,
                ..
            })
        ));
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let cm = reference_test_matrix();
        let report = EvaluationReport {
            confusion: cm,
            metrics: class_metrics(&cm).unwrap(),
            roc: vec![None, None, None],
            split: "test".into(),
            model_id: "m".into(),
            timestamp: "0".into(),
        };
        emit_report(&report, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
        let sums: Vec<u64> = text
            .lines()
            .skip(1)
            .map(|l| {
                l.split(',')
                    .skip(1)
                    .map(|v| v.parse::<u64>().unwrap())
                    .sum()
            })
            .collect();
        assert_eq!(sums, vec![1544, 2814, 733]);
        assert!(dir.path().join("metrics.csv").exists());

        let first = fs::read(dir.path().join("metrics.csv")).unwrap();
        let later = EvaluationReport {
            timestamp: "999".into(),
            ..report
        };
        emit_report(&later, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("metrics.csv")).unwrap(), first);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn class_strategy() -> impl Strategy<Value = MachiningClass> {
            (0usize..3).prop_map(|i| MachiningClass::from_index(i).unwrap())
        }

        proptest! {
            #[test]
            fn auc_matches_pair_statistic(
                scored in prop::collection::vec(((0u8..20).prop_map(|v| f64::from(v) / 20.0), any::<bool>()), 2..200)
            ) {
                prop_assume!(scored.iter().any(|s| s.1) && scored.iter().any(|s| !s.1));
                let curve = roc_from_scores(&scored, Chatter).unwrap();
                prop_assert!((curve.auc - mann_whitney(&scored)).abs() < 1e-9);
                for w in curve.points.windows(2) {
                    prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
                }
                prop_assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
            }

            #[test]
            fn accuracy_matches_recount(
                pairs in prop::collection::vec((class_strategy(), class_strategy()), 1..300)
            ) {
                let (p, t): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
                let cm = confusion_from_classes(&p, &t).unwrap();
                prop_assert_eq!(cm.total(), pairs.len() as u64);
                let m = class_metrics(&cm).unwrap();
                let direct = pairs.iter().filter(|(a, b)| a == b).count() as f64 / pairs.len() as f64;
                prop_assert!((m.accuracy - direct).abs() < 1e-12);
                for c in 0..3 {
                    prop_assert_eq!(m.per_class[c].support, cm.row_sum(c));
                }
            }

            #[test]
            fn macro_recall_invariant_under_class_duplication(
                pairs in prop::collection::vec((class_strategy(), class_strategy()), 1..200),
                dup in class_strategy(),
                times in 2u64..5,
            ) {
                let (p, t): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
                let cm = confusion_from_classes(&p, &t).unwrap();
                let mut scaled = cm;
                for v in scaled.counts[dup.index()].iter_mut() {
                    *v *= times;
                }
                let a = class_metrics(&cm).unwrap().macro_recall();
                let b = class_metrics(&scaled).unwrap().macro_recall();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

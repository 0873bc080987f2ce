//! Scene classification and benchmark-style evaluation.
//!
//! Full scenes are classified through a subsample: the cloud is thinned on
//! a small grid, every kept point is classified by the network, and the
//! predictions travel back to the original points via nearest neighbors.
//! Metrics follow the usual benchmark definitions — per-class precision,
//! recall (the per-class accuracy), F1 and intersection-over-union from a
//! ground-truth × prediction confusion matrix, means taken over the classes
//! that actually occur, plus overall accuracy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::LabeledCloud;
use crate::error::{Error, Result};
use crate::nn::model::{BatchInput, Model};
use crate::nn::Scalar;
use crate::spatial::{grid_subsample, transfer_labels, SpatialIndex};
use crate::voxel::{multiscale_grids, MultiScaleSample};
use crate::Label;

fn default_cell() -> f64 {
    0.02
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    /// Subsampling grid cell in meters; one prediction per occupied cell.
    pub cell: f64,
    pub batch_size: usize,
    /// Worker threads; 0 uses one per available CPU.
    pub workers: usize,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            cell: default_cell(),
            batch_size: default_batch(),
            workers: 0,
        }
    }
}

impl ClassifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0 && self.cell.is_finite()) {
            return Err(Error::NonPositiveParam {
                name: "cell",
                value: self.cell,
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

fn first_argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicts one label per point of `cloud`. The cloud is grid-subsampled,
/// the kept points are classified in batches, and every original point
/// receives the label of its nearest classified point.
pub fn classify_cloud<T: Scalar>(
    model: &Model<T>,
    cloud: &LabeledCloud,
    config: &ClassifyConfig,
) -> Result<Vec<Label>> {
    config.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let run = || -> Result<Vec<Label>> {
        let sub = grid_subsample(cloud, config.cell)?;
        let index = SpatialIndex::build(&sub.cloud)?;
        let spec = model.spec();
        let centers = sub.cloud.points();
        let mut sub_labels: Vec<Label> = Vec::with_capacity(centers.len());
        for chunk in centers.chunks(config.batch_size) {
            let samples: Vec<MultiScaleSample<T>> = chunk
                .par_iter()
                .map(|&center| {
                    multiscale_grids(&index, &sub.cloud, center, spec.grid_n, &spec.deltas)
                })
                .collect::<Result<_>>()?;
            let batch = BatchInput::from_samples(&samples, spec)?;
            let proba = model.predict_proba(&batch)?;
            let c = spec.classes;
            for bi in 0..chunk.len() {
                let row = &proba.data()[bi * c..(bi + 1) * c];
                sub_labels.push(first_argmax(row) as Label);
            }
        }
        transfer_labels(cloud, &sub.cloud, &sub_labels)
    };
    if config.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
        pool.install(run)
    } else {
        run()
    }
}

// ---------------------------------------------------------------------------
// Confusion matrix and metrics
// ---------------------------------------------------------------------------

/// Square tally of (ground truth, prediction) pairs; rows are ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_labels(
        ground_truth: &[Label],
        predictions: &[Label],
        classes: usize,
    ) -> Result<Self> {
        if ground_truth.len() != predictions.len() {
            return Err(Error::EvalLengthMismatch {
                predictions: predictions.len(),
                ground_truth: ground_truth.len(),
            });
        }
        let mut cm = Self::new(classes);
        for (&g, &p) in ground_truth.iter().zip(predictions) {
            cm.add(g, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, ground_truth: Label, prediction: Label) -> Result<()> {
        for label in [ground_truth, prediction] {
            if label as usize >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.classes,
                });
            }
        }
        self.counts[ground_truth as usize * self.classes + prediction as usize] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, ground_truth: usize, prediction: usize) -> usize {
        self.counts[ground_truth * self.classes + prediction]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Ground-truth occurrences of a class (its row sum).
    pub fn support(&self, class: usize) -> usize {
        self.counts[class * self.classes..(class + 1) * self.classes]
            .iter()
            .sum()
    }
}

/// Per-class scores. `recall` doubles as the per-class accuracy. A class is
/// `degenerate` when one of its denominators was zero, in which case the
/// affected scores are reported as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub support: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Means over the classes with non-zero support.
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub mean_iou: f64,
    pub overall_accuracy: f64,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Computes the full score set from a confusion matrix.
pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let k = cm.classes();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.count(c, c);
        let row: usize = cm.support(c);
        let col: usize = (0..k).map(|g| cm.count(g, c)).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        let (precision, p_deg) = ratio(tp, tp + fp);
        let (recall, r_deg) = ratio(tp, tp + fn_);
        let (f1, f_deg) = if precision + recall > 0.0 {
            (2.0 * precision * recall / (precision + recall), false)
        } else {
            (0.0, true)
        };
        let (iou, i_deg) = ratio(tp, tp + fp + fn_);
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            iou,
            support: row,
            degenerate: p_deg || r_deg || f_deg || i_deg,
        });
    }
    let present: Vec<&ClassMetrics> =
        per_class.iter().filter(|m| m.support > 0).collect();
    let denom = present.len().max(1) as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| present.iter().map(|m| f(m)).sum::<f64>() / denom;
    let trace: usize = (0..k).map(|c| cm.count(c, c)).sum();
    let (overall_accuracy, _) = ratio(trace, cm.total());
    MetricsReport {
        mean_precision: mean(|m| m.precision),
        mean_recall: mean(|m| m.recall),
        mean_f1: mean(|m| m.f1),
        mean_iou: mean(|m| m.iou),
        overall_accuracy,
        per_class,
    }
}

/// Balanced accuracy: the mean per-class recall.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> f64 {
    metrics(cm).mean_recall
}

/// Human-readable score table. Degenerate classes are starred.
pub fn format_report(report: &MetricsReport, class_names: &[String]) -> String {
    let mut name_width = "class".len();
    for c in 0..report.per_class.len() {
        let name = class_names.get(c).map(String::as_str).unwrap_or("?");
        name_width = name_width.max(name.len() + 1);
    }
    let pct = |v: f64| format!("{:6.2}", v * 100.0);
    let mut out = format!(
        "{:<name_width$} {:>8} {:>7} {:>7} {:>7} {:>7}\n",
        "class", "support", "prec", "recall", "f1", "iou"
    );
    for (c, m) in report.per_class.iter().enumerate() {
        let base = class_names.get(c).map(String::as_str).unwrap_or("?");
        let name = if m.degenerate {
            format!("{base}*")
        } else {
            base.to_string()
        };
        out.push_str(&format!(
            "{:<name_width$} {:>8} {:>7} {:>7} {:>7} {:>7}\n",
            name,
            m.support,
            pct(m.precision),
            pct(m.recall),
            pct(m.f1),
            pct(m.iou)
        ));
    }
    out.push_str(&format!(
        "{:<name_width$} {:>8} {:>7} {:>7} {:>7} {:>7}\n",
        "mean",
        report.per_class.iter().map(|m| m.support).sum::<usize>(),
        pct(report.mean_precision),
        pct(report.mean_recall),
        pct(report.mean_f1),
        pct(report.mean_iou)
    ));
    out.push_str(&format!(
        "overall accuracy {}\n",
        pct(report.overall_accuracy).trim()
    ));
    out
}

/// Machine-readable version of the same table.
pub fn report_csv(report: &MetricsReport, class_names: &[String]) -> String {
    let mut out = String::from("class,support,precision,recall,f1,iou,degenerate\n");
    for (c, m) in report.per_class.iter().enumerate() {
        let name = class_names.get(c).map(String::as_str).unwrap_or("?");
        out.push_str(&format!(
            "{name},{},{},{},{},{},{}\n",
            m.support, m.precision, m.recall, m.f1, m.iou, m.degenerate
        ));
    }
    out.push_str(&format!(
        "mean,,{},{},{},{},\n",
        report.mean_precision, report.mean_recall, report.mean_f1, report.mean_iou
    ));
    out.push_str(&format!("overall,,{},,,,\n", report.overall_accuracy));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::ModelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tallies_match_a_hand_count() {
        let gt = [0u32, 0, 1, 1, 2, 2, 2, 0];
        let pred = [0u32, 1, 1, 1, 2, 0, 2, 0];
        let cm = ConfusionMatrix::from_labels(&gt, &pred, 3).unwrap();
        assert_eq!(cm.count(0, 0), 2);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.count(2, 2), 2);
        assert_eq!(cm.count(2, 0), 1);
        assert_eq!(cm.total(), 8);
        assert_eq!(cm.support(2), 3);
    }

    #[test]
    fn length_and_range_errors() {
        assert!(matches!(
            ConfusionMatrix::from_labels(&[0, 1], &[0], 2),
            Err(Error::EvalLengthMismatch { predictions: 1, ground_truth: 2 })
        ));
        assert!(matches!(
            ConfusionMatrix::from_labels(&[0, 5], &[0, 1], 2),
            Err(Error::LabelOutOfRange { label: 5, classes: 2 })
        ));
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let labels: Vec<Label> = (0..30).map(|i| i % 3).collect();
        let cm = ConfusionMatrix::from_labels(&labels, &labels, 3).unwrap();
        let report = metrics(&cm);
        for m in &report.per_class {
            assert_eq!(m.precision, 1.0);
            assert_eq!(m.recall, 1.0);
            assert_eq!(m.f1, 1.0);
            assert_eq!(m.iou, 1.0);
            assert!(!m.degenerate);
        }
        assert_eq!(report.overall_accuracy, 1.0);
        assert_eq!(balanced_accuracy(&cm), 1.0);
    }

    #[test]
    fn one_of_each_error_kind_gives_the_textbook_scores() {
        // Class 0 with TP = FP = FN = 1.
        let gt = [0u32, 0, 1];
        let pred = [0u32, 1, 0];
        let cm = ConfusionMatrix::from_labels(&gt, &pred, 2).unwrap();
        let m = &metrics(&cm).per_class[0];
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.f1, 0.5);
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn f1_and_iou_satisfy_their_algebraic_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let classes = rng.random_range(2..6);
            let n = rng.random_range(20..200);
            let gt: Vec<Label> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let pred: Vec<Label> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let cm = ConfusionMatrix::from_labels(&gt, &pred, classes as usize).unwrap();
            for m in &metrics(&cm).per_class {
                if !m.degenerate {
                    assert!(
                        (m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12,
                        "f1 {} iou {}",
                        m.f1,
                        m.iou
                    );
                }
            }
        }
    }

    #[test]
    fn class_permutation_permutes_the_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let n = 300;
        let gt: Vec<Label> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<Label> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let perm = [2u32, 0, 3, 1];
        let gt_p: Vec<Label> = gt.iter().map(|&g| perm[g as usize]).collect();
        let pred_p: Vec<Label> = pred.iter().map(|&p| perm[p as usize]).collect();
        let a = metrics(&ConfusionMatrix::from_labels(&gt, &pred, 4).unwrap());
        let b = metrics(&ConfusionMatrix::from_labels(&gt_p, &pred_p, 4).unwrap());
        for (c, m) in a.per_class.iter().enumerate() {
            assert_eq!(*m, b.per_class[perm[c] as usize]);
        }
        assert_eq!(a.overall_accuracy, b.overall_accuracy);
        // The mean is summed in class order, so only agreement up to
        // reassociation can be expected.
        assert!((a.mean_f1 - b.mean_f1).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_left_out_of_the_means() {
        // Class 2 never occurs and is never predicted.
        let gt = [0u32, 0, 1, 1];
        let pred = [0u32, 0, 1, 0];
        let cm = ConfusionMatrix::from_labels(&gt, &pred, 3).unwrap();
        let report = metrics(&cm);
        assert_eq!(report.per_class[2].support, 0);
        assert!(report.per_class[2].degenerate);
        let expected = (1.0 + 0.5) / 2.0; // recalls of classes 0 and 1
        assert!((report.mean_recall - expected).abs() < 1e-15);
        // A degenerate row is starred in the text report.
        let text = format_report(&report, &["a".into(), "b".into(), "c".into()]);
        assert!(text.contains("c*"));
        assert!(!text.contains("a*"));
    }

    #[test]
    fn classify_cloud_returns_a_label_per_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for i in 0..400 {
            points.push([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.2..0.2),
            ]);
            labels.push(i % 3);
        }
        let cloud = LabeledCloud::with_labels(points, labels).unwrap();
        let spec = ModelSpec::ms_dvs_reduced(&[0.1, 0.3], 3);
        let model = Model::<f32>::build(&spec, 1).unwrap();
        let config = ClassifyConfig {
            cell: 0.15,
            batch_size: 16,
            workers: 0,
        };
        let pred = classify_cloud(&model, &cloud, &config).unwrap();
        assert_eq!(pred.len(), cloud.len());
        assert!(pred.iter().all(|&p| p < 3));
        // Batch size must not influence predictions.
        let config2 = ClassifyConfig {
            cell: 0.15,
            batch_size: 64,
            workers: 2,
        };
        let pred2 = classify_cloud(&model, &cloud, &config2).unwrap();
        assert_eq!(pred, pred2);
    }
}

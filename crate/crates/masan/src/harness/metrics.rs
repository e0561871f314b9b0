//! Confusion counts and the derived evaluation metrics.

/// Raw confusion counts with class 1 as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[usize], actual: &[usize]) -> Self {
        assert_eq!(predicted.len(), actual.len());
        let mut c = ConfusionCounts::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p == 1, a == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Accuracy/precision/recall for one evaluation. Precision and recall are
/// reported as 0 with the corresponding `*_defined` flag cleared when their
/// denominator is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub run: String,
    pub seed: u64,
    pub task: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn from_counts(run: &str, seed: u64, task: &str, counts: ConfusionCounts) -> Self {
        let total = counts.total();
        let accuracy = if total == 0 {
            0.0
        } else {
            (counts.tp + counts.tn) as f64 / total as f64
        };
        let p_den = counts.tp + counts.fp;
        let r_den = counts.tp + counts.fn_;
        MetricsReport {
            run: run.to_string(),
            seed,
            task: task.to_string(),
            accuracy,
            precision: if p_den == 0 {
                0.0
            } else {
                counts.tp as f64 / p_den as f64
            },
            recall: if r_den == 0 {
                0.0
            } else {
                counts.tp as f64 / r_den as f64
            },
            precision_defined: p_den > 0,
            recall_defined: r_den > 0,
            counts,
        }
    }
}

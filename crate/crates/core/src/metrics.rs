//! Classification scores, layer-wise correlation and top-layer drop.

use serde::{Deserialize, Serialize};

use crate::alignment::UNLABELED;
use crate::error::{Error, Result};

/// Square count matrix, rows are gold classes and columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_counts(n_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n_classes * n_classes {
            return Err(Error::Dimension {
                expected: n_classes * n_classes,
                actual: counts.len(),
            });
        }
        Ok(ConfusionMatrix { n_classes, counts })
    }

    /// Builds the matrix from paired gold/predicted labels, skipping `UNLABELED` gold frames.
    pub fn from_predictions(gold: &[u32], predicted: &[u32], n_classes: usize) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::Dimension {
                expected: gold.len(),
                actual: predicted.len(),
            });
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&g, &p) in gold.iter().zip(predicted) {
            if g == UNLABELED {
                continue;
            }
            cm.add(g, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, gold: u32, predicted: u32) -> Result<()> {
        let (g, p) = (gold as usize, predicted as usize);
        for i in [g, p] {
            if i >= self.n_classes {
                return Err(Error::Index {
                    index: i,
                    len: self.n_classes,
                });
            }
        }
        self.counts[g * self.n_classes + p] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, gold: usize, predicted: usize) -> u64 {
        self.counts[gold * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, gold: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(gold, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.n_classes).map(|g| self.get(g, predicted)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|c| self.get(c, c)).sum()
    }

    fn require_nonempty(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::UndefinedMetric("confusion matrix is empty".into())),
            n => Ok(n),
        }
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.require_nonempty()?;
    Ok(cm.trace() as f64 / total as f64)
}

/// Precision, recall and F1 for one class. A `0/0` ratio is reported as 0 and flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold frames of this class.
    pub support: u64,
    pub degenerate: bool,
}

pub fn per_class_prf(cm: &ConfusionMatrix) -> Result<Vec<ClassScores>> {
    cm.require_nonempty()?;
    Ok((0..cm.n_classes)
        .map(|c| {
            let tp = cm.get(c, c);
            let predicted = cm.col_sum(c);
            let gold = cm.row_sum(c);
            let mut degenerate = false;
            let mut ratio = |num: u64, den: u64| {
                if den == 0 {
                    degenerate = true;
                    0.0
                } else {
                    num as f64 / den as f64
                }
            };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, gold);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support: gold,
                degenerate,
            }
        })
        .collect())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "correlation needs at least 2 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedMetric(
            "non-finite input to correlation".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric(
            "correlation of a constant vector".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// `100 * (penultimate - ultimate) / penultimate`, in percent. Negative for a gain.
pub fn relative_drop(penultimate: f64, ultimate: f64) -> Result<f64> {
    if !(penultimate.is_finite() && ultimate.is_finite()) {
        return Err(Error::UndefinedMetric("non-finite accuracy".into()));
    }
    if penultimate <= 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "relative drop from accuracy {penultimate}"
        )));
    }
    // Scaling before subtracting keeps decimal inputs such as (0.5, 0.45) exact.
    Ok((100.0 * penultimate - 100.0 * ultimate) / penultimate)
}

/// Layer accuracies in manifest layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAccuracyVector {
    pub entries: Vec<(String, f64)>,
}

impl LayerAccuracyVector {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, v)| *v).collect()
    }

    pub fn get(&self, layer: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|(l, _)| l == layer)
            .map(|(_, v)| *v)
    }
}

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::graph::{GraphBundle, Split};
use crate::tensor::{sq_dist, Tensor};

/// Classification quality on one set of nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub accuracy: f64,
    /// Fraction of each class's nodes predicted correctly (class recall).
    pub per_class_accuracy: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// Coefficient of variation of the per-class accuracies; absent when
    /// their mean is zero or fewer than two classes occur.
    pub cv: Option<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    /// Plain-text table, one row per class.
    pub fn table(&self) -> String {
        let mut s = format!(
            "accuracy {:.4} over {} nodes, cv {}\nclass  acc     prec    rec     f1\n",
            self.accuracy,
            self.count,
            self.cv.map_or("n/a".to_string(), |c| format!("{c:.4}"))
        );
        for c in 0..self.per_class_accuracy.len() {
            s.push_str(&format!(
                "{c:<5}  {:.4}  {:.4}  {:.4}  {:.4}\n",
                self.per_class_accuracy[c], self.precision[c], self.recall[c], self.f1[c]
            ));
        }
        s
    }
}

/// Population coefficient of variation `σ / μ`.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(TrainError::Contract(
            "coefficient of variation needs at least two values".into(),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(TrainError::Contract(
            "coefficient of variation undefined for zero mean".into(),
        ));
    }
    if values.iter().all(|&v| v == values[0]) {
        // avoid rounding residue from the mean
        return Ok(0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Fraction of `rows` whose argmax matches the label.
pub fn accuracy(scores: &Tensor, labels: &[usize], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let pred = scores.argmax_rows();
    rows.iter().filter(|&&r| pred[r] == labels[r]).count() as f64 / rows.len() as f64
}

pub fn evaluate_predictions(
    predictions: &[usize],
    labels: &[usize],
    rows: &[usize],
    num_classes: usize,
) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(TrainError::Contract("cannot evaluate an empty mask".into()));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for &r in rows {
        let (y, p) = (labels[r], predictions[r]);
        if y >= num_classes || p >= num_classes {
            return Err(TrainError::Contract(format!(
                "class id out of range at node {r}"
            )));
        }
        confusion[y][p] += 1;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut precision = Vec::with_capacity(num_classes);
    let mut recall = Vec::with_capacity(num_classes);
    let mut f1 = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        precision.push(p);
        recall.push(r);
        f1.push(if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        });
    }
    let present: Vec<f64> = (0..num_classes)
        .filter(|&c| confusion[c].iter().sum::<usize>() > 0)
        .map(|c| recall[c])
        .collect();
    Ok(MetricsReport {
        count: rows.len(),
        accuracy: ratio(correct, rows.len()),
        per_class_accuracy: recall.clone(),
        precision,
        recall,
        f1,
        cv: coefficient_of_variation(&present).ok(),
        confusion,
    })
}

/// Metrics of row-argmax predictions over the nodes of `split`.
pub fn evaluate(scores: &Tensor, bundle: &GraphBundle, split: Split) -> Result<MetricsReport> {
    if scores.rows() != bundle.num_nodes() || scores.cols() != bundle.num_classes() {
        return Err(TrainError::Contract(format!(
            "scores {:?} do not cover {} nodes x {} classes",
            scores.shape(),
            bundle.num_nodes(),
            bundle.num_classes()
        )));
    }
    evaluate_predictions(
        &scores.argmax_rows(),
        bundle.labels(),
        &bundle.nodes_in(split),
        bundle.num_classes(),
    )
}

/// Mean silhouette coefficient of `points` (rows) grouped by `labels`, using
/// Euclidean distance. Points in singleton clusters score 0.
pub fn silhouette_score(points: &Tensor, labels: &[usize]) -> f64 {
    let n = points.rows();
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&y| sizes[y] += 1);
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += sq_dist(points.row(i), points.row(j)).sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

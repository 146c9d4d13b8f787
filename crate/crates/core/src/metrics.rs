//! Confusion matrices, balanced accuracy and F1 variants, and per-task
//! evaluation of a model on a labeled dataset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diff::{cosine, Tensor, COSINE_EPS};
use crate::error::{Error, Result};
use crate::inference::classify_batch;
use crate::model::Model;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|r| r.len() != c) {
            return Err(Error::Dimension("confusion matrix must be square and nonempty".into()));
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    fn check(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::EmptyTestSet)
        } else {
            Ok(())
        }
    }

    /// F1 of one class, 0 when precision and recall are both zero.
    pub fn f1(&self, class: usize) -> f64 {
        let tp = self.counts[class][class] as f64;
        let support = self.support(class) as f64;
        let predicted = self.predicted(class) as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if support > 0.0 { tp / support } else { 0.0 };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn supported(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.classes()).filter(|&c| self.support(c) > 0)
    }
}

/// Mean recall over classes that have support.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.check()?;
    let recalls: Vec<f64> = cm
        .supported()
        .map(|c| cm.counts[c][c] as f64 / cm.support(c) as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.check()?;
    let f1: Vec<f64> = cm.supported().map(|c| cm.f1(c)).collect();
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.check()?;
    let total = cm.total() as f64;
    Ok(cm
        .supported()
        .map(|c| cm.f1(c) * cm.support(c) as f64 / total)
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub confusion: ConfusionMatrix,
}

impl TaskMetrics {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            balanced_accuracy: balanced_accuracy(&confusion)?,
            macro_f1: macro_f1(&confusion)?,
            weighted_f1: weighted_f1(&confusion)?,
            confusion,
        })
    }
}

/// One evaluation; tasks in schema order, keyed by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: BTreeMap<String, TaskMetrics>,
}

/// Classifies every sample and tallies each task where the sample has a label.
/// A task with no labeled samples is left out of the report.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let schema = &model.schema;
    let mut cms: Vec<ConfusionMatrix> = (0..schema.num_tasks())
        .map(|t| ConfusionMatrix::new(schema.num_classes(t)))
        .collect();
    for chunk in data.samples().chunks(256) {
        let frames: Vec<&Tensor> = chunk.iter().map(|s| &s.frames).collect();
        let preds = classify_batch(model, &frames)?;
        for (s, p) in chunk.iter().zip(&preds) {
            for (t, cm) in cms.iter_mut().enumerate() {
                if let Some(y) = s.labels[t] {
                    cm.record(y, p[t].class);
                }
            }
        }
    }
    let mut tasks = BTreeMap::new();
    for (t, cm) in cms.into_iter().enumerate() {
        if cm.total() > 0 {
            tasks.insert(schema.task_name(t).to_string(), TaskMetrics::from_confusion(cm)?);
        }
    }
    if tasks.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    Ok(EvalReport { tasks })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Sample standard deviation; 0 for a single value.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub balanced_accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub weighted_f1: MeanStd,
}

/// Per-run reports plus mean and std per metric across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: usize,
    pub per_run: Vec<EvalReport>,
    pub summary: BTreeMap<String, TaskSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl MetricsReport {
    pub fn from_runs(per_run: Vec<EvalReport>) -> Result<Self> {
        if per_run.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let mut summary = BTreeMap::new();
        for name in per_run[0].tasks.keys() {
            let pick = |f: fn(&TaskMetrics) -> f64| -> Vec<f64> {
                per_run.iter().filter_map(|r| r.tasks.get(name)).map(f).collect()
            };
            summary.insert(
                name.clone(),
                TaskSummary {
                    balanced_accuracy: mean_std(&pick(|m| m.balanced_accuracy)),
                    macro_f1: mean_std(&pick(|m| m.macro_f1)),
                    weighted_f1: mean_std(&pick(|m| m.weighted_f1)),
                },
            );
        }
        Ok(Self {
            runs: per_run.len(),
            per_run,
            summary,
            config: None,
        })
    }
}

/// Mean cosine over same-label pairs minus mean cosine over different-label
/// pairs. Unlabeled rows are ignored. `None` if either pair set is empty.
pub fn class_separation(embeddings: &Tensor, labels: &[Option<usize>]) -> Option<f64> {
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embeddings.rows() {
        let Some(yi) = labels[i] else { continue };
        for j in i + 1..embeddings.rows() {
            let Some(yj) = labels[j] else { continue };
            let c = cosine(embeddings.row(i), embeddings.row(j), COSINE_EPS);
            if yi == yj {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    (n_intra > 0 && n_inter > 0).then(|| intra / n_intra as f64 - inter / n_inter as f64)
}

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::multitask::{MultiTaskModel, TaskKind, TaskOutput};

/// Outer eye corners in the 98-point layout.
pub const DEFAULT_LEFT_EYE: usize = 60;
pub const DEFAULT_RIGHT_EYE: usize = 72;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    MacroF1,
    Rmse,
    Nme,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKind::Accuracy | MetricKind::MacroF1)
    }

    /// Column label with direction marker.
    pub fn label(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "Acc (↑)",
            MetricKind::MacroF1 => "F1 (↑)",
            MetricKind::Rmse => "RMSE (↓)",
            MetricKind::Nme => "NME (↓)",
        }
    }

    /// Factor applied when printing tables: fractions become percentages.
    pub fn display_scale(self) -> f64 {
        match self {
            MetricKind::Rmse => 1.0,
            _ => 100.0,
        }
    }

    /// Metrics reported for a task, in column order.
    pub fn for_task(kind: &TaskKind) -> &'static [MetricKind] {
        match kind {
            TaskKind::Classification { .. } => &[MetricKind::Accuracy, MetricKind::MacroF1],
            TaskKind::Regression { .. } => &[MetricKind::Rmse],
            TaskKind::Landmarks { .. } => &[MetricKind::Nme],
        }
    }

    /// Metric used for early stopping and model selection.
    pub fn primary(kind: &TaskKind) -> MetricKind {
        Self::for_task(kind)[0]
    }

    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::MacroF1 => "macro_f1",
            MetricKind::Rmse => "rmse",
            MetricKind::Nme => "nme",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub task_name: String,
    pub metric: MetricKind,
    /// Raw value: fractions for accuracy, F1 and NME.
    pub value: f64,
    pub n: usize,
}

fn check_lengths(a: usize, b: usize, op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, &[a], &[b]));
    }
    if a == 0 {
        return Err(Error::Data(format!("{op} of an empty set")));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len(), "accuracy")?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class F1 over classes that occur in `preds` or
/// `labels`; classes absent from both are skipped.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(preds.len(), labels.len(), "macro_f1")?;
    if let Some(&bad) = labels.iter().chain(preds).find(|&&c| c >= num_classes) {
        return Err(Error::Target(format!("class {bad} outside 0..{num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    let mut actual = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        predicted[p] += 1;
        actual[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    let (mut total, mut present) = (0.0, 0usize);
    for c in 0..num_classes {
        if predicted[c] == 0 && actual[c] == 0 {
            continue;
        }
        present += 1;
        // F1 = 2TP / (2TP + FP + FN), which is 0 when TP = 0.
        total += 2.0 * tp[c] as f64 / (predicted[c] + actual[c]) as f64;
    }
    Ok(total / present as f64)
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), targets.len(), "rmse")?;
    let sq: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / preds.len() as f64).sqrt())
}

/// Mean over samples of the mean point error divided by the inter-ocular
/// distance. Inputs are flat `N × points × 2`.
pub fn nme(preds: &[f64], truths: &[f64], num_points: usize, left_eye: usize, right_eye: usize) -> Result<f64> {
    check_lengths(preds.len(), truths.len(), "nme")?;
    let stride = 2 * num_points;
    if num_points == 0 || preds.len() % stride != 0 {
        return Err(Error::dim("nme", &[preds.len()], &[stride]));
    }
    if left_eye >= num_points || right_eye >= num_points {
        return Err(Error::Config(format!("eye indices {left_eye}/{right_eye} outside {num_points} points")));
    }
    let point = |s: &[f64], j: usize| (s[2 * j], s[2 * j + 1]);
    let dist = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).hypot(a.1 - b.1);
    let mut degenerate = Vec::new();
    let mut total = 0.0;
    let n = preds.len() / stride;
    for (i, (p, t)) in preds.chunks(stride).zip(truths.chunks(stride)).enumerate() {
        let iod = dist(point(t, left_eye), point(t, right_eye));
        if !(iod > 0.0) {
            degenerate.push(i);
            continue;
        }
        let err: f64 = (0..num_points).map(|j| dist(point(p, j), point(t, j))).sum();
        total += err / iod / num_points as f64;
    }
    if !degenerate.is_empty() {
        return Err(Error::DegenerateSample(degenerate));
    }
    Ok(total / n as f64)
}

/// Eye landmark indices used by NME.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EyeIndices {
    pub left: usize,
    pub right: usize,
}

impl Default for EyeIndices {
    fn default() -> Self {
        Self {
            left: DEFAULT_LEFT_EYE,
            right: DEFAULT_RIGHT_EYE,
        }
    }
}

/// Scores one split in batches; regression values are compared in the
/// head's target space.
pub fn evaluate_task(
    model: &MultiTaskModel,
    task: &str,
    data: &SplitData,
    batch_size: usize,
    eyes: EyeIndices,
) -> Result<Vec<MetricResult>> {
    if data.is_empty() {
        return Err(Error::Data(format!("no samples to evaluate task `{task}`")));
    }
    let head = model.head(task)?;
    let kind = head.kind;
    let mut preds = Vec::new();
    let mut values = Vec::new();
    for chunk in data.images.chunks(batch_size.max(1)) {
        match model.predict(task, chunk)? {
            TaskOutput::Classification { predicted, .. } => preds.extend(predicted),
            TaskOutput::Regression { values: v } => values.extend(v.data().iter().map(|&x| x as f64)),
        }
    }
    evaluate_outputs(task, &kind, &preds, &values, data, &head.target_norm.apply(&data.values), eyes)
}

/// Metrics from already computed predictions. `targets` are regression
/// targets in the same space as `values`.
pub fn evaluate_outputs(
    task: &str,
    kind: &TaskKind,
    preds: &[usize],
    values: &[f64],
    data: &SplitData,
    targets: &[f64],
    eyes: EyeIndices,
) -> Result<Vec<MetricResult>> {
    let n = data.len();
    MetricKind::for_task(kind)
        .iter()
        .map(|&metric| {
            let value = match (metric, kind) {
                (MetricKind::Accuracy, _) => accuracy(preds, &data.classes)?,
                (MetricKind::MacroF1, TaskKind::Classification { num_classes }) => {
                    macro_f1(preds, &data.classes, *num_classes)?
                }
                (MetricKind::Rmse, _) => rmse(values, targets)?,
                (MetricKind::Nme, TaskKind::Landmarks { num_points }) => {
                    nme(values, targets, *num_points, eyes.left, eyes.right)?
                }
                _ => unreachable!("metric list matches task kind"),
            };
            Ok(MetricResult {
                task_name: task.to_owned(),
                metric,
                value,
                n,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        let v = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((v - 11.0 / 15.0).abs() < 1e-15);
        let v = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(macro_f1(&[0], &[3], 3), Err(Error::Target(_))));
        // Class 2 never appears and is skipped.
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt());
        let a = rmse(&[0.3, -1.0], &[1.0, 2.0]).unwrap();
        let b = rmse(&[5.3, 4.0], &[6.0, 7.0]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn face(points: usize) -> Vec<f64> {
        (0..points).flat_map(|j| [j as f64 * 0.37, (j % 7) as f64 * 1.3]).collect()
    }

    #[test]
    fn nme_examples() {
        let t = face(98);
        assert_eq!(nme(&t, &t, 98, 60, 72).unwrap(), 0.0);
        let iod = ((t[120] - t[144]).powi(2) + (t[121] - t[145]).powi(2)).sqrt();
        let mut p = t.clone();
        p[10] += iod;
        assert!((nme(&p, &t, 98, 60, 72).unwrap() - 1.0 / 98.0).abs() < 1e-12);
        let v = (0.6, -0.8);
        let shifted: Vec<f64> = t.iter().enumerate().map(|(i, x)| x + if i % 2 == 0 { v.0 } else { v.1 }).collect();
        assert!((nme(&shifted, &t, 98, 60, 72).unwrap() - 1.0 / iod).abs() < 1e-12);
    }

    #[test]
    fn nme_lists_degenerate_samples() {
        let mut t = face(98);
        t.extend(vec![0.0; 196]);
        assert!(matches!(
            nme(&t, &t, 98, 60, 72),
            Err(Error::DegenerateSample(v)) if v == vec![1]
        ));
    }
}

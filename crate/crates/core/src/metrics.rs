//! Confusion-matrix evaluation: per-class F1, mean F1 and overall accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotations::{LabelMap, UNLABELED};
use crate::error::{shape_err, Error, Result};

/// `counts[r * classes + c]` is the number of pixels with ground truth `r`
/// predicted as `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    excluded: Vec<bool>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, exclude: &[u8]) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Param("a confusion matrix needs at least one class".into()));
        }
        let mut excluded = vec![false; classes];
        for &c in exclude {
            match excluded.get_mut(c as usize) {
                Some(e) => *e = true,
                None => return Err(Error::Param(format!("excluded class {c} out of range for {classes} classes"))),
            }
        }
        Ok(Self {
            classes,
            counts: vec![0; classes * classes],
            excluded,
        })
    }

    /// Builds a matrix from row-major counts, with no excluded classes.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if classes == 0 || counts.len() != classes * classes {
            return Err(shape_err!("{classes} classes need {} counts, got {}", classes * classes, counts.len()));
        }
        Ok(Self {
            classes,
            counts,
            excluded: vec![false; classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn is_excluded(&self, class: usize) -> bool {
        self.excluded[class]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose ground truth is labeled and not excluded.
    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if (gt.height(), gt.width()) != (pred.height(), pred.width()) {
            return Err(shape_err!(
                "ground truth is {}x{}, prediction is {}x{}",
                gt.width(),
                gt.height(),
                pred.width(),
                pred.height()
            ));
        }
        if !pred.is_fully_labeled() {
            return Err(Error::Validation("prediction has unlabeled pixels".into()));
        }
        gt.validate(self.classes)?;
        pred.validate(self.classes)?;
        for (&g, &p) in gt.values().iter().zip(pred.values()) {
            if g == UNLABELED || self.excluded[g as usize] {
                continue;
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise sum; both matrices must agree on classes and exclusions.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes || self.excluded != other.excluded {
            return Err(shape_err!("cannot merge matrices over different class sets"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Score("confusion matrix is empty".into()));
        }
        let k = self.classes;
        let mut f1 = Vec::with_capacity(k);
        let mut present = Vec::with_capacity(k);
        let mut trace = 0;
        for c in 0..k {
            let tp = self.get(c, c);
            let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let col: u64 = (0..k).map(|g| self.get(g, c)).sum();
            trace += tp;
            let denom = row + col;
            f1.push(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 });
            present.push(denom > 0 && !self.excluded[c]);
        }
        let used: Vec<f64> = f1.iter().zip(&present).filter(|(_, &p)| p).map(|(&v, _)| v).collect();
        let mean_f1 = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
        Ok(Scores {
            f1,
            present,
            mean_f1,
            oa: trace as f64 / total as f64,
        })
    }
}

/// Matrix for a single ground-truth and prediction pair.
pub fn confusion(gt: &LabelMap, pred: &LabelMap, classes: usize, exclude: &[u8]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes, exclude)?;
    cm.accumulate(gt, pred)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    /// `2 TP / (2 TP + FP + FN)` per class, 0 where undefined.
    pub f1: Vec<f64>,
    /// Classes counted in the mean: seen in ground truth or prediction and
    /// not excluded.
    pub present: Vec<bool>,
    pub mean_f1: f64,
    pub oa: f64,
}

#[derive(Serialize, Deserialize)]
struct ScoresJson {
    f1: BTreeMap<String, f64>,
    mean_f1: f64,
    oa: f64,
}

impl Scores {
    /// `{"f1": {"0": ..}, "mean_f1": .., "oa": ..}`, listing only the
    /// classes counted in the mean.
    pub fn to_json(&self) -> Result<String> {
        let f1 = self
            .f1
            .iter()
            .enumerate()
            .filter(|(c, _)| self.present[*c])
            .map(|(c, &v)| (c.to_string(), v))
            .collect();
        Ok(serde_json::to_string_pretty(&ScoresJson {
            f1,
            mean_f1: self.mean_f1,
            oa: self.oa,
        })?)
    }

    /// Markdown table of the per-class and summary scores.
    pub fn table(&self) -> String {
        let mut s = String::from("| class | F1 |\n|---|---|\n");
        for (c, v) in self.f1.iter().enumerate() {
            if self.present[c] {
                let _ = writeln!(s, "| {c} | {v:.4} |");
            }
        }
        let _ = writeln!(s, "| mean F1 | {:.4} |", self.mean_f1);
        let _ = writeln!(s, "| OA | {:.4} |", self.oa);
        s
    }
}

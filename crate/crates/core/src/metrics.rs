//! Accuracy, correctness masks, the any-backbone-correct upper bound,
//! prediction diversity and exact-subset overlap tables.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{argmax, Labels, Matrix};

/// Per-row argmax, ties to the lowest class index.
pub fn top1(logits: &Matrix) -> Result<Labels> {
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok(Labels(logits.iter_rows().map(argmax).collect()))
}

pub fn prediction_accuracy(preds: &Labels, labels: &Labels) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            got: preds.len(),
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .as_slice()
        .iter()
        .zip(labels.as_slice())
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy(logits: &Matrix, labels: &Labels) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            got: logits.rows(),
        });
    }
    prediction_accuracy(&top1(logits)?, labels)
}

/// Which examples one backbone gets right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectnessMask {
    pub name: String,
    pub bits: Vec<bool>,
}

impl CorrectnessMask {
    pub fn from_logits(name: impl Into<String>, logits: &Matrix, labels: &Labels) -> Result<Self> {
        if logits.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: labels.len(),
                got: logits.rows(),
            });
        }
        let preds = top1(logits)?;
        Ok(Self::from_predictions(name, &preds, labels))
    }

    pub fn from_predictions(name: impl Into<String>, preds: &Labels, labels: &Labels) -> Self {
        CorrectnessMask {
            name: name.into(),
            bits: preds
                .as_slice()
                .iter()
                .zip(labels.as_slice())
                .map(|(p, y)| p == y)
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn accuracy(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }
}

fn check_masks(masks: &[CorrectnessMask]) -> Result<usize> {
    let n = masks.first().ok_or(Error::EmptyList)?.bits.len();
    if let Some(bad) = masks.iter().find(|m| m.bits.len() != n) {
        return Err(Error::LengthMismatch {
            expected: n,
            got: bad.bits.len(),
        });
    }
    Ok(n)
}

/// Fraction of examples that at least one backbone classifies correctly.
pub fn oracle_accuracy(masks: &[CorrectnessMask]) -> Result<f64> {
    let n = check_masks(masks)?;
    if n == 0 {
        return Ok(0.0);
    }
    let hits = (0..n).filter(|&i| masks.iter().any(|m| m.bits[i])).count();
    Ok(hits as f64 / n as f64)
}

/// `1 − |∩ correct| / |∪ correct|` across the backbones.
pub fn diversity(masks: &[CorrectnessMask]) -> Result<f64> {
    let n = check_masks(masks)?;
    if masks.len() < 2 {
        return Err(Error::DegenerateInput(
            "diversity needs at least two backbones".into(),
        ));
    }
    let union = (0..n).filter(|&i| masks.iter().any(|m| m.bits[i])).count();
    if union == 0 {
        return Err(Error::EmptyUnion);
    }
    let inter = (0..n).filter(|&i| masks.iter().all(|m| m.bits[i])).count();
    Ok(1.0 - inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubsetCount {
    /// Bit b set ⇔ backbone b is in the subset.
    pub members: u32,
    pub names: Vec<String>,
    pub count: usize,
}

/// Counts of examples correct for exactly each non-empty subset of backbones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OverlapTable {
    pub backbones: Vec<String>,
    /// Every non-empty subset, ordered by bitmask.
    pub subsets: Vec<SubsetCount>,
    pub per_backbone: Vec<usize>,
    pub union: usize,
    pub intersection: usize,
    pub examples: usize,
}

impl OverlapTable {
    pub fn count(&self, members: u32) -> usize {
        self.subsets
            .iter()
            .find(|s| s.members == members)
            .map_or(0, |s| s.count)
    }

    /// Examples only backbone `b` gets right.
    pub fn exclusive(&self, b: usize) -> usize {
        self.count(1 << b)
    }

    /// `subset;count` lines, subsets written as member names joined by `+`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset;count\n");
        for s in &self.subsets {
            out.push_str(&format!("{};{}\n", s.names.join("+"), s.count));
        }
        out
    }
}

pub const MAX_OVERLAP_BACKBONES: usize = 16;

pub fn overlap_table(masks: &[CorrectnessMask]) -> Result<OverlapTable> {
    let n = check_masks(masks)?;
    let b = masks.len();
    if b > MAX_OVERLAP_BACKBONES {
        return Err(Error::TooManyBackbones(b));
    }
    let mut counts = vec![0usize; 1 << b];
    for i in 0..n {
        let key = masks
            .iter()
            .enumerate()
            .filter(|(_, m)| m.bits[i])
            .fold(0usize, |acc, (j, _)| acc | (1 << j));
        counts[key] += 1;
    }
    let names: Vec<String> = masks.iter().map(|m| m.name.clone()).collect();
    let subsets = (1..1usize << b)
        .map(|key| SubsetCount {
            members: key as u32,
            names: (0..b)
                .filter(|j| key & (1 << j) != 0)
                .map(|j| names[j].clone())
                .collect(),
            count: counts[key],
        })
        .collect();
    Ok(OverlapTable {
        backbones: names,
        subsets,
        per_backbone: masks.iter().map(CorrectnessMask::count).collect(),
        union: n - counts[0],
        intersection: counts[(1 << b) - 1],
        examples: n,
    })
}

/// `(method − best) / best`.
pub fn relative_improvement(method_acc: f64, best_single_acc: f64) -> Result<f64> {
    if best_single_acc <= 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok((method_acc - best_single_acc) / best_single_acc)
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateInput("need at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

//! Single-scalar temperature calibration per backbone, and the calibrated
//! variants of logit averaging and entropy-based selection.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{DatasetBundle, SplitData};
use crate::combine::{confidence_select, log_avg, log_sum_exp, LogitStack};
use crate::error::{Error, Result};
use crate::fewshot::holdout_split;
use crate::matrix::{Labels, Matrix};

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 50.0;
const GRID_POINTS: usize = 64;
const GOLDEN_TOL: f64 = 1e-4;

/// Fitted per-backbone temperatures, in bundle backbone order.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureVector {
    pub names: Vec<String>,
    pub temps: Vec<f64>,
    /// Mean NLL at the fitted temperature, per backbone.
    pub nll: Vec<f64>,
    pub split: String,
}

#[derive(Serialize, Deserialize)]
struct TemperatureFile {
    temps: BTreeMap<String, f64>,
    nll: BTreeMap<String, f64>,
    split: String,
}

impl TemperatureVector {
    pub fn uniform(names: Vec<String>, t: f64) -> Self {
        let b = names.len();
        TemperatureVector {
            names,
            temps: vec![t; b],
            nll: vec![f64::NAN; b],
            split: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.temps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temps.is_empty()
    }

    pub fn to_json(&self) -> String {
        let file = TemperatureFile {
            temps: self.names.iter().cloned().zip(self.temps.iter().copied()).collect(),
            nll: self.names.iter().cloned().zip(self.nll.iter().copied()).collect(),
            split: self.split.clone(),
        };
        serde_json::to_string_pretty(&file).expect("temperatures serialize")
    }

    /// Parses a temperatures file, ordering entries by `names`.
    pub fn from_json(text: &str, names: &[String]) -> Result<Self> {
        let file: TemperatureFile =
            serde_json::from_str(text).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        let lookup = |map: &BTreeMap<String, f64>, name: &str| {
            map.get(name)
                .copied()
                .ok_or_else(|| Error::UnknownBackboneName(name.to_string()))
        };
        let temps = names
            .iter()
            .map(|n| lookup(&file.temps, n))
            .collect::<Result<Vec<_>>>()?;
        let nll = names
            .iter()
            .map(|n| lookup(&file.nll, n).unwrap_or(f64::NAN))
            .collect();
        Ok(TemperatureVector {
            names: names.to_vec(),
            temps,
            nll,
            split: file.split,
        })
    }
}

/// Mean negative log-likelihood of `softmax(z / t)`.
pub fn nll(logits: &Matrix, labels: &Labels, t: f64) -> f64 {
    let mut scaled = vec![0.0; logits.cols()];
    let mut total = 0.0;
    for (row, &y) in logits.iter_rows().zip(labels.as_slice()) {
        for (s, v) in scaled.iter_mut().zip(row) {
            *s = v / t;
        }
        total += log_sum_exp(&scaled) - scaled[y];
    }
    total / logits.rows().max(1) as f64
}

/// Temperature in `[0.05, 50]` minimizing mean NLL.
///
/// A 64-point log grid brackets the minimum, golden-section search refines
/// it, and the best of {refined, best grid point, t = 1} is returned.
pub fn fit_temperature(logits: &Matrix, labels: &Labels) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: logits.rows(),
            got: labels.len(),
        });
    }
    labels.check_range(logits.cols())?;
    let f = |t: f64| nll(logits, labels, t);

    let (lo, hi) = (T_MIN.ln(), T_MAX.ln());
    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|k| {
            if k == GRID_POINTS - 1 {
                T_MAX
            } else if k == 0 {
                T_MIN
            } else {
                (lo + (hi - lo) * k as f64 / (GRID_POINTS - 1) as f64).exp()
            }
        })
        .collect();
    let values: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
    let mut best = 0;
    for k in 1..GRID_POINTS {
        if values[k] < values[best] {
            best = k;
        }
    }

    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(GRID_POINTS - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > GOLDEN_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let refined = 0.5 * (a + b);

    let mut t = grid[best];
    let mut ft = values[best];
    for cand in [refined, 1.0] {
        let fv = f(cand);
        if fv < ft {
            t = cand;
            ft = fv;
        }
    }
    Ok(t)
}

pub fn apply_temperature(logits: &Matrix, t: f64) -> Result<Matrix> {
    if !(t > 0.0) {
        return Err(Error::NonPositiveTemperature(t));
    }
    Ok(logits.map(|v| v / t))
}

/// Fits one temperature per backbone; backbones are fitted in parallel.
pub fn fit_temperatures(
    stack: &LogitStack,
    labels: &Labels,
    names: &[String],
    split: &str,
) -> Result<TemperatureVector> {
    if names.len() != stack.len() {
        return Err(Error::LengthMismatch {
            expected: stack.len(),
            got: names.len(),
        });
    }
    let temps = stack
        .blocks()
        .par_iter()
        .map(|block| fit_temperature(block, labels))
        .collect::<Result<Vec<_>>>()?;
    let nll = stack
        .blocks()
        .iter()
        .zip(&temps)
        .map(|(block, &t)| nll(block, labels, t))
        .collect();
    Ok(TemperatureVector {
        names: names.to_vec(),
        temps,
        nll,
        split: split.to_string(),
    })
}

/// Each block divided by its own temperature.
pub fn scale_stack(stack: &LogitStack, temps: &[f64]) -> Result<LogitStack> {
    if temps.len() != stack.len() {
        return Err(Error::LengthMismatch {
            expected: stack.len(),
            got: temps.len(),
        });
    }
    LogitStack::new(
        stack
            .blocks()
            .iter()
            .zip(temps)
            .map(|(block, &t)| apply_temperature(block, t))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Mean over backbones of `z_b / t_b`.
pub fn calibrated_log_avg(stack: &LogitStack, temps: &TemperatureVector) -> Result<Matrix> {
    Ok(log_avg(&scale_stack(stack, &temps.temps)?))
}

/// Entropy-based selection on temperature-scaled logits.
pub fn calibrated_confidence(stack: &LogitStack, temps: &TemperatureVector) -> Result<Labels> {
    Ok(confidence_select(&scale_stack(stack, &temps.temps)?))
}

/// Data used for calibration: the `val` split when the bundle has one,
/// otherwise a seeded stratified 10% holdout of `train`.
pub fn calibration_data(bundle: &DatasetBundle, seed: u64) -> Result<(SplitData, String)> {
    if bundle.has_split("val") {
        return Ok((bundle.load_split("val")?, "val".to_string()));
    }
    let train = bundle.load_split("train")?;
    let all: Vec<usize> = (0..train.labels.len()).collect();
    let (_, holdout) = holdout_split(&all, &train.labels, 0.1, seed);
    Ok((train.select(&holdout), "train-holdout".to_string()))
}

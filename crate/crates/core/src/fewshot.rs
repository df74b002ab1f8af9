//! n-shot sampling, stratified holdout splits and linear probes on frozen
//! features.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::combine::{log_sum_exp, softmax_in_place};
use crate::error::{Error, Result};
use crate::matrix::{Labels, Matrix};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSample {
    pub shots: usize,
    pub seed: u64,
    /// Sorted ascending.
    pub indices: Vec<usize>,
}

fn by_class(indices: impl IntoIterator<Item = usize>, labels: &Labels) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in indices {
        groups.entry(labels.as_slice()[i]).or_default().push(i);
    }
    groups
}

/// Draws up to `n` examples per class without replacement.
pub fn sample_shots(labels: &Labels, n: usize, seed: u64) -> Result<ShotSample> {
    if labels.is_empty() {
        return Err(Error::EmptyClassSet);
    }
    if n == 0 {
        return Err(Error::InvalidConfig("shots must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::new();
    for (_, mut members) in by_class(0..labels.len(), labels) {
        members.shuffle(&mut rng);
        indices.extend(members.into_iter().take(n));
    }
    indices.sort_unstable();
    Ok(ShotSample {
        shots: n,
        seed,
        indices,
    })
}

/// Stratified split of `indices` into (fit, holdout).
///
/// Each class sends `⌈fraction·count⌉` examples to the holdout, capped so the
/// fit side keeps at least one; single-example classes stay in the fit set.
pub fn holdout_split(
    indices: &[usize],
    labels: &Labels,
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    assert!(fraction > 0.0 && fraction < 1.0, "holdout fraction must be in (0, 1)");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fit, mut holdout) = (Vec::new(), Vec::new());
    for (_, mut members) in by_class(indices.iter().copied(), labels) {
        let count = members.len();
        let take = if count < 2 {
            0
        } else {
            ((fraction * count as f64 - 1e-9).ceil() as usize).clamp(1, count - 1)
        };
        members.shuffle(&mut rng);
        holdout.extend_from_slice(&members[..take]);
        fit.extend_from_slice(&members[take..]);
    }
    fit.sort_unstable();
    holdout.sort_unstable();
    (fit, holdout)
}

/// Rows scaled to unit L2 norm; zero rows are left as they are.
pub fn l2_normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        normalize_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Softmax regression on L2-normalized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    #[serde(rename = "type")]
    pub kind: String,
    pub backbone: String,
    pub classes: usize,
    pub dim: usize,
    /// C×D, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub examples: usize,
    pub final_loss: f64,
}

impl LinearProbe {
    pub fn zeros(backbone: impl Into<String>, classes: usize, dim: usize) -> Self {
        LinearProbe {
            kind: "probe".into(),
            backbone: backbone.into(),
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            examples: 0,
            final_loss: f64::NAN,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("probe serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: LinearProbe =
            serde_json::from_str(text).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        if p.kind != "probe" || p.weights.len() != p.classes * p.dim || p.bias.len() != p.classes {
            return Err(Error::SchemaViolation("inconsistent probe file".into()));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            learning_rate: 1e-3,
            epochs: 100,
        }
    }
}

/// `W·x̂ + b` for every row.
pub fn probe_logits(probe: &LinearProbe, features: &Matrix) -> Result<Matrix> {
    if features.cols() != probe.dim {
        return Err(Error::ShapeMismatch(format!(
            "probe expects {} features, got {}",
            probe.dim,
            features.cols()
        )));
    }
    let x = l2_normalize_rows(features);
    let mut out = Matrix::zeros(x.rows(), probe.classes);
    for i in 0..x.rows() {
        let xi = x.row(i);
        for c in 0..probe.classes {
            let w = &probe.weights[c * probe.dim..(c + 1) * probe.dim];
            out.set(i, c, probe.bias[c] + w.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Ok(out)
}

/// Mean cross-entropy and its gradient for flat parameters `[W; b]` on
/// already-normalized features.
pub fn probe_loss_grad(params: &[f64], x: &Matrix, labels: &Labels, classes: usize) -> (f64, Vec<f64>) {
    let d = x.cols();
    let n = x.rows().max(1) as f64;
    let (w, b) = params.split_at(classes * d);
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut z = vec![0.0; classes];
    for (xi, &y) in x.iter_rows().zip(labels.as_slice()) {
        for c in 0..classes {
            z[c] = b[c] + w[c * d..(c + 1) * d].iter().zip(xi).map(|(a, v)| a * v).sum::<f64>();
        }
        loss += log_sum_exp(&z) - z[y];
        softmax_in_place(&mut z);
        z[y] -= 1.0;
        for c in 0..classes {
            let g = z[c] / n;
            for (gw, v) in grad[c * d..(c + 1) * d].iter_mut().zip(xi) {
                *gw += g * v;
            }
            grad[classes * d + c] += g;
        }
    }
    (loss / n, grad)
}

/// Trains a linear probe by full-batch adaptive-moment descent.
///
/// Starts from `init` (C×D) when given, zeros otherwise. Returns the final
/// parameters and the loss before each update.
pub fn probe_fit(
    backbone: &str,
    features: &Matrix,
    labels: &Labels,
    classes: usize,
    init: Option<&Matrix>,
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, Vec<f64>)> {
    if features.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: features.rows(),
            got: labels.len(),
        });
    }
    labels.check_range(classes)?;
    let d = features.cols();
    let mut params = vec![0.0; classes * d + classes];
    if let Some(init) = init {
        if init.shape() != (classes, d) {
            return Err(Error::ShapeMismatch(format!(
                "probe init is {:?}, expected ({classes}, {d})",
                init.shape()
            )));
        }
        params[..classes * d].copy_from_slice(init.as_slice());
    }
    let x = l2_normalize_rows(features);
    let mut opt = Adam::new(params.len(), cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        let (loss, grad) = probe_loss_grad(&params, &x, labels, classes);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        history.push(loss);
        last = loss;
        opt.step(&mut params, &grad);
    }
    let bias = params.split_off(classes * d);
    Ok((
        LinearProbe {
            kind: "probe".into(),
            backbone: backbone.to_string(),
            classes,
            dim: d,
            weights: params,
            bias,
            examples: labels.len(),
            final_loss: last,
        },
        history,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{accuracy, top1};
    use proptest::prelude::*;
    use rand::Rng;

    fn labels_with(counts: &[usize]) -> Labels {
        Labels(
            counts
                .iter()
                .enumerate()
                .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
                .collect(),
        )
    }

    #[test]
    fn one_shot_per_class() {
        let y = labels_with(&[10, 10, 10]);
        let s = sample_shots(&y, 1, 0).unwrap();
        assert_eq!(s.indices.len(), 3);
        let classes: Vec<usize> = s.indices.iter().map(|&i| y.0[i]).collect();
        assert_eq!(classes, vec![0, 1, 2]);
        assert_eq!(s, sample_shots(&y, 1, 0).unwrap());
    }

    #[test]
    fn small_classes_contribute_everything() {
        let y = labels_with(&[20, 5]);
        let s = sample_shots(&y, 16, 3).unwrap();
        assert_eq!(s.indices.iter().filter(|&&i| y.0[i] == 1).count(), 5);
        assert_eq!(s.indices.iter().filter(|&&i| y.0[i] == 0).count(), 16);
        assert!(matches!(sample_shots(&Labels(vec![]), 1, 0), Err(Error::EmptyClassSet)));
    }

    #[test]
    fn holdout_nine_to_one() {
        let y = labels_with(&[10, 10]);
        let all: Vec<usize> = (0..20).collect();
        let (fit, hold) = holdout_split(&all, &y, 0.1, 7);
        assert_eq!(fit.len(), 18);
        assert_eq!(hold.len(), 2);
        assert_eq!(hold.iter().filter(|&&i| y.0[i] == 0).count(), 1);

        let y = labels_with(&[1, 30]);
        let all: Vec<usize> = (0..31).collect();
        let (fit, hold) = holdout_split(&all, &y, 0.1, 7);
        assert!(fit.contains(&0));
        assert_eq!(hold.len(), 3);
    }

    proptest! {
        #[test]
        fn holdout_is_a_stratified_partition(
            raw in proptest::collection::vec(0usize..5, 1..200),
            fraction in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let y = Labels(raw);
            let idx: Vec<usize> = (0..y.len()).filter(|i| i % 3 != 1).collect();
            let (fit, hold) = holdout_split(&idx, &y, fraction, seed);
            let mut union: Vec<usize> = fit.iter().chain(&hold).copied().collect();
            union.sort_unstable();
            prop_assert_eq!(&union, &idx);
            for c in 0..5 {
                let count = idx.iter().filter(|&&i| y.0[i] == c).count();
                let h = hold.iter().filter(|&&i| y.0[i] == c).count();
                let expected = if count < 2 { 0 } else {
                    ((fraction * count as f64 - 1e-9).ceil() as usize).clamp(1, count - 1)
                };
                prop_assert_eq!(h, expected);
            }
            prop_assert_eq!(holdout_split(&idx, &y, fraction, seed), (fit, hold));
        }
    }

    #[test]
    fn separable_toy_reaches_full_training_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let sign = if c == 0 { 1.0 } else { -1.0 };
            rows.push(vec![sign * rng.gen_range(0.5..2.0), rng.gen_range(-1.0..1.0), 0.3]);
            y.push(c);
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let y = Labels(y);
        let (probe, history) = probe_fit("toy", &x, &y, 2, None, &ProbeConfig::default()).unwrap();
        assert_eq!(history.len(), 100);
        assert!(history.last().unwrap() < &history[0]);
        assert_eq!(accuracy(&probe_logits(&probe, &x).unwrap(), &y).unwrap(), 1.0);
    }

    #[test]
    fn zero_lr_keeps_init() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let y = Labels(vec![1, 2, 1]);
        let cfg = ProbeConfig {
            learning_rate: 0.0,
            epochs: 1,
        };
        let (probe, _) = probe_fit("b", &x, &y, 3, None, &cfg).unwrap();
        assert_eq!(top1(&probe_logits(&probe, &x).unwrap()).unwrap(), Labels(vec![0, 0, 0]));

        let init = Matrix::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let (probe, _) = probe_fit("b", &x, &y, 3, Some(&init), &cfg).unwrap();
        assert_eq!(probe.weights, init.as_slice());

        let bad = Matrix::zeros(2, 2);
        assert!(matches!(
            probe_fit("b", &x, &y, 3, Some(&bad), &cfg),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = l2_normalize_rows(
            &Matrix::new(6, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let y = Labels((0..6).map(|_| rng.gen_range(0..3)).collect());
        let params: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, grad) = probe_loss_grad(&params, &x, &y, 3);
        let h = 1e-5;
        for k in 0..params.len() {
            let mut p = params.clone();
            p[k] += h;
            let up = probe_loss_grad(&p, &x, &y, 3).0;
            p[k] -= 2.0 * h;
            let down = probe_loss_grad(&p, &x, &y, 3).0;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
            assert!(rel < 1e-6, "param {k}: analytic {} vs fd {fd}", grad[k]);
        }
    }

    #[test]
    fn probe_logits_examples() {
        let x = Matrix::from_rows(&[vec![0.0, 3.0, 0.0]]).unwrap();
        let zero = LinearProbe::zeros("b", 3, 3);
        assert_eq!(probe_logits(&zero, &x).unwrap(), Matrix::zeros(1, 3));

        let mut eye = LinearProbe::zeros("b", 3, 3);
        for c in 0..3 {
            eye.weights[c * 3 + c] = 1.0;
        }
        assert_eq!(probe_logits(&eye, &x).unwrap().row(0), &[0.0, 1.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = LinearProbe::zeros("b", 2, 3);
        p.weights.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        p.bias = vec![0.3, -0.2];
        let f = Matrix::new(4, 3, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let out = probe_logits(&p, &f).unwrap();
        for i in 0..4 {
            let norm = f.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..2 {
                let mut acc = p.bias[c];
                for j in 0..3 {
                    acc += p.weights[c * 3 + j] * f.get(i, j) / norm;
                }
                assert!((out.get(i, c) - acc).abs() < 1e-12);
            }
        }
        assert!(matches!(probe_logits(&p, &Matrix::zeros(1, 2)), Err(Error::ShapeMismatch(_))));
    }
}

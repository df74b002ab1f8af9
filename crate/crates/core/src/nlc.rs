//! Input-conditioned temperature controller.
//!
//! A one-hidden-layer MLP reads the concatenated backbone features of an
//! example and emits one positive temperature per backbone; the combined
//! logits are `Σ_b t_b(x) · z_b`. Training minimizes cross-entropy of the
//! combined logits with exact backpropagation.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{DatasetBundle, SplitData};
use crate::combine::{log_sum_exp, softmax_in_place, LogitStack};
use crate::error::{Error, Result};
use crate::fewshot::{holdout_split, normalize_in_place};
use crate::matrix::{argmax, Labels, Matrix};
use crate::optim::Adam;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn inverse_softplus(t: f64) -> f64 {
    t + (-(-t).exp_m1()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How raw controller outputs become temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    /// `t = softplus(o)`, always positive.
    #[default]
    Softplus,
    /// `t = o`; temperatures may become non-positive.
    Linear,
}

impl OutputActivation {
    fn apply(self, o: f64) -> f64 {
        match self {
            OutputActivation::Softplus => softplus(o),
            OutputActivation::Linear => o,
        }
    }

    fn derivative(self, o: f64) -> f64 {
        match self {
            OutputActivation::Softplus => sigmoid(o),
            OutputActivation::Linear => 1.0,
        }
    }
}

/// Controller parameters, flattened as `[W1 (H×D), b1 (H), W2 (B×H), b2 (B)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NlcModel {
    pub backbones: Vec<String>,
    pub feature_dims: Vec<usize>,
    pub hidden_dim: usize,
    /// L2-normalize each backbone's feature block before the MLP.
    pub normalize: bool,
    pub output: OutputActivation,
    pub params: Vec<f64>,
}

struct Layout {
    input: usize,
    hidden: usize,
    output: usize,
}

impl Layout {
    fn w1(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.input
    }
    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.input;
        s..s + self.hidden
    }
    fn w2(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.output * self.hidden
    }
    fn b2(&self) -> std::ops::Range<usize> {
        let s = self.w2().end;
        s..s + self.output
    }
    fn len(&self) -> usize {
        self.b2().end
    }
}

/// Rounds every value to the nearest `f32`.
fn to_f32_precision(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

/// Fresh controller whose temperatures start at ≈ 1.
///
/// `W1 ~ N(0, 2/D)`, `b1 = 0`, `W2 ~ N(0, (1e-4)²)`, `b2 = softplus⁻¹(1)`.
/// Parameters are stored at `f32` precision so a saved model reloads exactly.
pub fn nlc_init(
    backbones: Vec<String>,
    feature_dims: Vec<usize>,
    hidden_dim: usize,
    seed: u64,
) -> Result<NlcModel> {
    if backbones.is_empty() || backbones.len() != feature_dims.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} backbone names for {} feature blocks",
            backbones.len(),
            feature_dims.len()
        )));
    }
    if hidden_dim == 0 || feature_dims.contains(&0) {
        return Err(Error::InvalidConfig("dimensions must be at least 1".into()));
    }
    let mut model = NlcModel {
        hidden_dim,
        normalize: true,
        output: OutputActivation::Softplus,
        params: Vec::new(),
        backbones,
        feature_dims,
    };
    let l = model.layout();
    let mut params = vec![0.0; l.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = Normal::new(0.0, (2.0 / l.input as f64).sqrt()).expect("valid normal");
    for p in &mut params[l.w1()] {
        *p = w1.sample(&mut rng);
    }
    let w2 = Normal::new(0.0, 1e-4).expect("valid normal");
    for p in &mut params[l.w2()] {
        *p = w2.sample(&mut rng);
    }
    params[l.b2()].fill(inverse_softplus(1.0));
    to_f32_precision(&mut params);
    model.params = params;
    Ok(model)
}

impl NlcModel {
    fn layout(&self) -> Layout {
        Layout {
            input: self.input_dim(),
            hidden: self.hidden_dim,
            output: self.backbones.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dims.iter().sum()
    }

    pub fn output_dim(&self) -> usize {
        self.backbones.len()
    }

    pub fn w1(&self) -> &[f64] {
        &self.params[self.layout().w1()]
    }
    pub fn b1(&self) -> &[f64] {
        &self.params[self.layout().b1()]
    }
    pub fn w2(&self) -> &[f64] {
        &self.params[self.layout().w2()]
    }
    pub fn b2(&self) -> &[f64] {
        &self.params[self.layout().b2()]
    }
    pub fn w1_mut(&mut self) -> &mut [f64] {
        let r = self.layout().w1();
        &mut self.params[r]
    }
    pub fn b1_mut(&mut self) -> &mut [f64] {
        let r = self.layout().b1();
        &mut self.params[r]
    }
    pub fn w2_mut(&mut self) -> &mut [f64] {
        let r = self.layout().w2();
        &mut self.params[r]
    }
    pub fn b2_mut(&mut self) -> &mut [f64] {
        let r = self.layout().b2();
        &mut self.params[r]
    }

    /// Concatenates per-backbone features into controller input rows,
    /// normalizing each block when the model asks for it.
    pub fn prepare_input(&self, features: &[Matrix]) -> Result<Matrix> {
        if features.len() != self.feature_dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} feature blocks, got {}",
                self.feature_dims.len(),
                features.len()
            )));
        }
        for (k, (f, &d)) in features.iter().zip(&self.feature_dims).enumerate() {
            if f.cols() != d {
                return Err(Error::ShapeMismatch(format!(
                    "feature block {k} has width {}, model expects {d}",
                    f.cols()
                )));
            }
        }
        let refs: Vec<&Matrix> = features.iter().collect();
        let mut x = Matrix::hconcat(&refs)?;
        if self.normalize {
            for i in 0..x.rows() {
                let row = x.row_mut(i);
                let mut start = 0;
                for &d in &self.feature_dims {
                    normalize_in_place(&mut row[start..start + d]);
                    start += d;
                }
            }
        }
        Ok(x)
    }

    /// Temperatures for already-prepared input rows.
    fn temps_prepared(&self, x: &Matrix) -> Matrix {
        let l = self.layout();
        let mut out = Matrix::zeros(x.rows(), l.output);
        let mut h = vec![0.0; l.hidden];
        for i in 0..x.rows() {
            hidden_forward(&self.params, &l, x.row(i), &mut h);
            let row = out.row_mut(i);
            output_forward(&self.params, &l, &h, row);
            for t in row.iter_mut() {
                *t = self.output.apply(*t);
            }
        }
        out
    }
}

fn hidden_forward(params: &[f64], l: &Layout, x: &[f64], h: &mut [f64]) {
    let w1 = &params[l.w1()];
    let b1 = &params[l.b1()];
    for j in 0..l.hidden {
        let w = &w1[j * l.input..(j + 1) * l.input];
        let a = b1[j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        h[j] = a.max(0.0);
    }
}

fn output_forward(params: &[f64], l: &Layout, h: &[f64], o: &mut [f64]) {
    let w2 = &params[l.w2()];
    let b2 = &params[l.b2()];
    for b in 0..l.output {
        let w = &w2[b * l.hidden..(b + 1) * l.hidden];
        o[b] = b2[b] + w.iter().zip(h).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// Per-example temperatures (N×B) from raw per-backbone features.
pub fn nlc_forward(model: &NlcModel, features: &[Matrix]) -> Result<Matrix> {
    let x = model.prepare_input(features)?;
    Ok(model.temps_prepared(&x))
}

/// `z*_i = Σ_b t_{i,b} · z_b[i]`.
pub fn nlc_combine(stack: &LogitStack, temps: &Matrix) -> Result<Matrix> {
    if temps.shape() != (stack.rows(), stack.len()) {
        return Err(Error::ShapeMismatch(format!(
            "temperatures are {:?}, stack needs ({}, {})",
            temps.shape(),
            stack.rows(),
            stack.len()
        )));
    }
    let mut out = Matrix::zeros(stack.rows(), stack.classes());
    for i in 0..stack.rows() {
        let t = temps.row(i);
        let row = out.row_mut(i);
        for (b, block) in stack.blocks().iter().enumerate() {
            for (o, v) in row.iter_mut().zip(block.row(i)) {
                *o += t[b] * v;
            }
        }
    }
    Ok(out)
}

/// Combined logits for a split.
pub fn nlc_predict(model: &NlcModel, stack: &LogitStack, features: &[Matrix]) -> Result<Matrix> {
    if stack.len() != model.output_dim() {
        return Err(Error::DimMismatchOnLoad(format!(
            "model has {} backbones, stack has {}",
            model.output_dim(),
            stack.len()
        )));
    }
    nlc_combine(stack, &nlc_forward(model, features)?)
}

/// Summed loss and gradient over rows `rows` of prepared inputs.
#[allow(clippy::too_many_arguments)]
fn accumulate(
    params: &[f64],
    l: &Layout,
    output: OutputActivation,
    stack: &LogitStack,
    x: &Matrix,
    labels: &Labels,
    rows: &[usize],
    grad: &mut [f64],
) -> f64 {
    let classes = stack.classes();
    let mut h = vec![0.0; l.hidden];
    let mut o = vec![0.0; l.output];
    let mut t = vec![0.0; l.output];
    let mut z = vec![0.0; classes];
    let mut d_o = vec![0.0; l.output];
    let mut d_a = vec![0.0; l.hidden];
    let mut loss = 0.0;

    for &i in rows {
        let xi = x.row(i);
        hidden_forward(params, l, xi, &mut h);
        output_forward(params, l, &h, &mut o);
        for b in 0..l.output {
            t[b] = output.apply(o[b]);
        }
        z.fill(0.0);
        for (b, block) in stack.blocks().iter().enumerate() {
            for (zc, v) in z.iter_mut().zip(block.row(i)) {
                *zc += t[b] * v;
            }
        }
        let y = labels.as_slice()[i];
        loss += log_sum_exp(&z) - z[y];
        softmax_in_place(&mut z);
        z[y] -= 1.0;

        for (b, block) in stack.blocks().iter().enumerate() {
            let dt: f64 = z.iter().zip(block.row(i)).map(|(g, v)| g * v).sum();
            d_o[b] = dt * output.derivative(o[b]);
        }

        let w2 = &params[l.w2()];
        for j in 0..l.hidden {
            d_a[j] = if h[j] > 0.0 {
                (0..l.output).map(|b| w2[b * l.hidden + j] * d_o[b]).sum()
            } else {
                0.0
            };
        }

        let (g_w1, rest) = grad.split_at_mut(l.b1().start);
        let (g_b1, rest) = rest.split_at_mut(l.hidden);
        let (g_w2, g_b2) = rest.split_at_mut(l.output * l.hidden);
        for b in 0..l.output {
            g_b2[b] += d_o[b];
            for (g, hv) in g_w2[b * l.hidden..(b + 1) * l.hidden].iter_mut().zip(&h) {
                *g += d_o[b] * hv;
            }
        }
        for j in 0..l.hidden {
            if d_a[j] != 0.0 {
                g_b1[j] += d_a[j];
                for (g, xv) in g_w1[j * l.input..(j + 1) * l.input].iter_mut().zip(xi) {
                    *g += d_a[j] * xv;
                }
            }
        }
    }
    loss
}

const CHUNK: usize = 32;

/// Mean loss and gradient over `rows`, reduced in a fixed chunk order so the
/// result does not depend on the number of threads.
fn batch_loss_grad(
    params: &[f64],
    l: &Layout,
    output: OutputActivation,
    stack: &LogitStack,
    x: &Matrix,
    labels: &Labels,
    rows: &[usize],
) -> (f64, Vec<f64>) {
    let partials: Vec<(f64, Vec<f64>)> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; l.len()];
            let loss = accumulate(params, l, output, stack, x, labels, chunk, &mut g);
            (loss, g)
        })
        .collect();
    let n = rows.len().max(1) as f64;
    let mut grad = vec![0.0; l.len()];
    let mut loss = 0.0;
    for (pl, pg) in partials {
        loss += pl;
        for (g, v) in grad.iter_mut().zip(pg) {
            *g += v;
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    (loss / n, grad)
}

/// Mean cross-entropy of the combined logits and its exact gradient.
///
/// `features` are raw per-backbone blocks; normalization follows the model.
/// Gradient layout matches [`NlcModel::params`]. Weight decay is applied by
/// the optimizer and is not part of this loss.
pub fn nlc_loss_grad(
    model: &NlcModel,
    stack: &LogitStack,
    features: &[Matrix],
    labels: &Labels,
) -> Result<(f64, Vec<f64>)> {
    if stack.len() != model.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} outputs, stack has {} backbones",
            model.output_dim(),
            stack.len()
        )));
    }
    if labels.len() != stack.rows() {
        return Err(Error::LengthMismatch {
            expected: stack.rows(),
            got: labels.len(),
        });
    }
    let x = model.prepare_input(features)?;
    if x.rows() != stack.rows() {
        return Err(Error::ShapeMismatch("feature and logit row counts differ".into()));
    }
    let rows: Vec<usize> = (0..stack.rows()).collect();
    let (loss, grad) = batch_loss_grad(
        &model.params,
        &model.layout(),
        model.output,
        stack,
        &x,
        labels,
        &rows,
    );
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlcTrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Add weight decay to the gradient instead of decoupling it.
    pub coupled_decay: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub patience: usize,
    pub hidden_dim: usize,
    pub normalize: bool,
    pub output: OutputActivation,
    pub seed: u64,
}

impl Default for NlcTrainConfig {
    fn default() -> Self {
        NlcTrainConfig {
            learning_rate: 2e-4,
            weight_decay: 0.01,
            coupled_decay: false,
            epochs: 200,
            batch_size: 256,
            holdout_fraction: 0.1,
            patience: 20,
            hidden_dim: 128,
            normalize: true,
            output: OutputActivation::Softplus,
            seed: 0,
        }
    }
}

impl NlcTrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::InvalidConfig("holdout_fraction must be in (0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_size, patience and hidden_dim must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy on the holdout, or on the fit set when the holdout is empty.
    pub holdout_accuracy: f64,
}

fn prepared_accuracy(model: &NlcModel, stack: &LogitStack, x: &Matrix, labels: &Labels, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let l = model.layout();
    let mut h = vec![0.0; l.hidden];
    let mut t = vec![0.0; l.output];
    let mut z = vec![0.0; stack.classes()];
    let mut hits = 0;
    for &i in rows {
        hidden_forward(&model.params, &l, x.row(i), &mut h);
        output_forward(&model.params, &l, &h, &mut t);
        z.fill(0.0);
        for (b, block) in stack.blocks().iter().enumerate() {
            let tb = model.output.apply(t[b]);
            for (zc, v) in z.iter_mut().zip(block.row(i)) {
                *zc += tb * v;
            }
        }
        hits += usize::from(argmax(&z) == labels.as_slice()[i]);
    }
    hits as f64 / rows.len() as f64
}

/// Trains a controller on `data`.
///
/// The rows are split into fit and holdout parts (stratified, seeded).
/// Minibatch adaptive-moment updates run on the fit part; training stops once
/// holdout accuracy has not improved for `patience` epochs, and the best
/// holdout checkpoint is returned. The untrained model is a candidate too.
pub fn nlc_train(
    data: &SplitData,
    backbones: &[String],
    cfg: &NlcTrainConfig,
) -> Result<(NlcModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    let features = match &data.features {
        Some(f) => f,
        None => {
            return Err(Error::MissingFeatures(
                backbones.first().cloned().unwrap_or_default(),
            ))
        }
    };
    if data.labels.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    data.labels.check_range(data.stack.classes())?;

    let mut model = nlc_init(
        backbones.to_vec(),
        features.iter().map(Matrix::cols).collect(),
        cfg.hidden_dim,
        cfg.seed,
    )?;
    model.normalize = cfg.normalize;
    model.output = cfg.output;
    let x = model.prepare_input(features)?;
    let l = model.layout();

    let all: Vec<usize> = (0..data.labels.len()).collect();
    let (mut fit, holdout) = holdout_split(&all, &data.labels, cfg.holdout_fraction, cfg.seed);
    let selection: Vec<usize> = if holdout.is_empty() { fit.clone() } else { holdout };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut opt = Adam::new(l.len(), cfg.learning_rate)
        .with_weight_decay(cfg.weight_decay, cfg.coupled_decay);

    let initial = prepared_accuracy(&model, &data.stack, &x, &data.labels, &selection);
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: f64::NAN,
        holdout_accuracy: initial,
    }];
    let mut best = (initial, model.params.clone());
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        fit.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in fit.chunks(cfg.batch_size) {
            let (loss, grad) =
                batch_loss_grad(&model.params, &l, model.output, &data.stack, &x, &data.labels, batch);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            total += loss * batch.len() as f64;
            opt.step(&mut model.params, &grad);
        }
        let acc = prepared_accuracy(&model, &data.stack, &x, &data.labels, &selection);
        history.push(EpochRecord {
            epoch,
            train_loss: total / fit.len().max(1) as f64,
            holdout_accuracy: acc,
        });
        if acc > best.0 {
            best = (acc, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    model.params = best.1;
    to_f32_precision(&mut model.params);
    Ok((model, history))
}

/// Trains on the given split of a bundle.
pub fn nlc_train_bundle(
    bundle: &DatasetBundle,
    split: &str,
    cfg: &NlcTrainConfig,
) -> Result<(NlcModel, Vec<EpochRecord>)> {
    if let Some(b) = bundle
        .backbones
        .iter()
        .find(|b| !b.features.as_ref().is_some_and(|f| f.contains_key(split)))
    {
        return Err(Error::MissingFeatures(b.name.clone()));
    }
    let data = bundle.load_split(split)?;
    nlc_train(&data, &bundle.backbone_names(), cfg)
}

#[derive(Serialize, Deserialize)]
struct ParamBlobs {
    w1: String,
    b1: String,
    w2: String,
    b2: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    #[serde(rename = "type")]
    kind: String,
    backbones: Vec<String>,
    feature_dims: Vec<usize>,
    hidden_dim: usize,
    normalize: bool,
    output: OutputActivation,
    params: ParamBlobs,
}

fn encode_blob(values: &[f64]) -> String {
    let bytes: Vec<u8> = values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    B64.encode(bytes)
}

fn decode_blob(text: &str, expected: usize, name: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::SchemaViolation(format!("{name}: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::DimMismatchOnLoad(format!(
            "{name} holds {} values, dimensions need {expected}",
            bytes.len() / 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

impl NlcModel {
    pub fn to_json(&self) -> String {
        let l = self.layout();
        let file = ModelFile {
            kind: "nlc".into(),
            backbones: self.backbones.clone(),
            feature_dims: self.feature_dims.clone(),
            hidden_dim: self.hidden_dim,
            normalize: self.normalize,
            output: self.output,
            params: ParamBlobs {
                w1: encode_blob(&self.params[l.w1()]),
                b1: encode_blob(&self.params[l.b1()]),
                w2: encode_blob(&self.params[l.w2()]),
                b2: encode_blob(&self.params[l.b2()]),
            },
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        if file.kind != "nlc" {
            return Err(Error::SchemaViolation(format!("model type {:?}", file.kind)));
        }
        if file.backbones.is_empty() || file.backbones.len() != file.feature_dims.len() {
            return Err(Error::DimMismatchOnLoad(
                "backbone names and feature blocks disagree".into(),
            ));
        }
        let mut model = NlcModel {
            backbones: file.backbones,
            feature_dims: file.feature_dims,
            hidden_dim: file.hidden_dim,
            normalize: file.normalize,
            output: file.output,
            params: Vec::new(),
        };
        let l = model.layout();
        let mut params = decode_blob(&file.params.w1, l.w1().len(), "w1")?;
        params.extend(decode_blob(&file.params.b1, l.b1().len(), "b1")?);
        params.extend(decode_blob(&file.params.w2, l.w2().len(), "w2")?);
        params.extend(decode_blob(&file.params.b2, l.b2().len(), "b2")?);
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::SchemaViolation("non-finite parameter".into()));
        }
        model.params = params;
        Ok(model)
    }

    /// Checks that the bundle lists the same backbones, in the same order and
    /// with the same feature widths, as the model was trained on.
    pub fn check_bundle(&self, bundle: &DatasetBundle) -> Result<()> {
        let names = bundle.backbone_names();
        if names != self.backbones {
            return Err(Error::DimMismatchOnLoad(format!(
                "model backbones {:?}, bundle backbones {:?}",
                self.backbones, names
            )));
        }
        let dims: Vec<usize> = bundle.backbones.iter().map(|b| b.feature_dim).collect();
        if dims != self.feature_dims {
            return Err(Error::DimMismatchOnLoad(format!(
                "model feature widths {:?}, bundle widths {dims:?}",
                self.feature_dims
            )));
        }
        Ok(())
    }
}

pub fn nlc_save(model: &NlcModel, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_json()).map_err(|e| Error::io(path, e))
}

pub fn nlc_load(path: impl AsRef<std::path::Path>) -> Result<NlcModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    NlcModel::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed::{combine_fixed, cross_entropy};
    use crate::metrics::top1;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn names(b: usize) -> Vec<String> {
        (0..b).map(|i| format!("bb{i}")).collect()
    }

    fn random_instance(seed: u64, n: usize, b: usize, c: usize, d: usize) -> (LogitStack, Vec<Matrix>, Labels) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let stack = LogitStack::new(
            (0..b)
                .map(|_| Matrix::new(n, c, (0..n * c).map(|_| 2.0 * normal()).collect()).unwrap())
                .collect(),
        )
        .unwrap();
        let features = (0..b)
            .map(|_| Matrix::new(n, d, (0..n * d).map(|_| normal()).collect()).unwrap())
            .collect();
        let labels = Labels((0..n).map(|i| (i * 7 + seed as usize) % c).collect());
        (stack, features, labels)
    }

    #[test]
    fn softplus_identities() {
        assert!((softplus(0.5413) - 1.0).abs() < 1e-4);
        assert!((softplus(inverse_softplus(1.0)) - 1.0).abs() < 1e-15);
        assert!((inverse_softplus(1.0) - (std::f64::consts::E - 1.0).ln()).abs() < 1e-15);
        assert!((softplus(2.0) - 2.1269).abs() < 1e-4);
        assert!(softplus(-800.0) >= 0.0 && softplus(800.0) == 800.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic_and_neutral() {
        let a = nlc_init(names(3), vec![4, 5, 6], 16, 7).unwrap();
        let b = nlc_init(names(3), vec![4, 5, 6], 16, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, nlc_init(names(3), vec![4, 5, 6], 16, 8).unwrap());
        assert!(a.b1().iter().all(|&v| v == 0.0));

        let zeros: Vec<Matrix> = [4, 5, 6].iter().map(|&d| Matrix::zeros(2, d)).collect();
        let t = nlc_forward(&a, &zeros).unwrap();
        assert!(t.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn hand_set_single_unit() {
        let mut m = nlc_init(names(1), vec![1], 1, 0).unwrap();
        m.normalize = false;
        m.w1_mut()[0] = 1.0;
        m.b1_mut()[0] = 0.0;
        m.w2_mut()[0] = 1.0;
        m.b2_mut()[0] = 0.0;
        let t = nlc_forward(&m, &[Matrix::from_rows(&[vec![2.0]]).unwrap()]).unwrap();
        assert!((t.get(0, 0) - 2.1269).abs() < 1e-4);
    }

    #[test]
    fn temperatures_are_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = nlc_init(names(2), vec![3, 3], 8, 1).unwrap();
        for p in m.params.iter_mut() {
            *p = rng.gen_range(-3.0..3.0);
        }
        let f: Vec<Matrix> = (0..2)
            .map(|_| Matrix::new(500, 3, (0..1500).map(|_| rng.gen_range(-50.0..50.0)).collect()).unwrap())
            .collect();
        let t = nlc_forward(&m, &f).unwrap();
        assert!(t.as_slice().iter().all(|&v| v > 0.0));
        assert!(matches!(
            nlc_forward(&m, &f[..1]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn combine_examples() {
        let (stack, _, _) = random_instance(3, 20, 3, 5, 2);
        let third = Matrix::new(20, 3, vec![1.0 / 3.0; 60]).unwrap();
        let z = nlc_combine(&stack, &third).unwrap();
        assert_eq!(top1(&z).unwrap(), top1(&crate::combine::log_avg(&stack)).unwrap());

        // Route row i to backbone i % 3.
        let mut route = Matrix::zeros(20, 3);
        for i in 0..20 {
            for b in 0..3 {
                route.set(i, b, if b == i % 3 { 1.0 } else { 1e-9 });
            }
        }
        let preds = top1(&nlc_combine(&stack, &route).unwrap()).unwrap();
        for i in 0..20 {
            assert_eq!(preds.0[i], top1(stack.block(i % 3)).unwrap().0[i]);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Matrix::new(20, 3, (0..60).map(|_| rng.gen_range(0.1..3.0)).collect()).unwrap();
        let z = nlc_combine(&stack, &t).unwrap();
        for i in 0..20 {
            for c in 0..5 {
                let mut acc = 0.0;
                for b in 0..3 {
                    acc += t.get(i, b) * stack.block(b).get(i, c);
                }
                assert!((z.get(i, c) - acc).abs() < 1e-12);
            }
        }
        assert!(matches!(
            nlc_combine(&stack, &Matrix::zeros(20, 2)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (stack, features, labels) = random_instance(11, 8, 3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut m = nlc_init(names(3), vec![5, 5, 5], 6, 3).unwrap();
        for p in m.params.iter_mut() {
            *p = 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
        let (_, grad) = nlc_loss_grad(&m, &stack, &features, &labels).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, &g) in grad.iter().enumerate() {
            let mut up = m.clone();
            up.params[k] += h;
            let mut down = m.clone();
            down.params[k] -= h;
            let fd = (nlc_loss_grad(&up, &stack, &features, &labels).unwrap().0
                - nlc_loss_grad(&down, &stack, &features, &labels).unwrap().0)
                / (2.0 * h);
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    #[test]
    fn init_loss_equals_unweighted_sum() {
        let (stack, features, labels) = random_instance(2, 30, 3, 4, 6);
        let m = nlc_init(names(3), vec![6; 3], 32, 0).unwrap();
        let (loss, _) = nlc_loss_grad(&m, &stack, &features, &labels).unwrap();
        let sum = combine_fixed(&stack, &[1.0; 3]).unwrap();
        assert!((loss - cross_entropy(&sum, &labels)).abs() < 1e-3);
    }

    #[test]
    fn zero_hidden_matches_fixed_temperatures() {
        let (stack, features, _) = random_instance(4, 25, 3, 6, 4);
        let mut m = nlc_init(names(3), vec![4; 3], 8, 0).unwrap();
        m.w1_mut().fill(0.0);
        m.w2_mut().fill(0.0);
        let theta = [-0.7, 0.2, 1.9];
        m.b2_mut().copy_from_slice(&theta);
        let temps: Vec<f64> = theta.iter().map(|&x| softplus(x)).collect();
        let a = nlc_predict(&m, &stack, &features).unwrap();
        let b = combine_fixed(&stack, &temps).unwrap();
        assert_eq!(a, b);
    }

    fn separable(seed: u64, n: usize) -> SplitData {
        // Backbone 0 is perfect, backbone 1 is noise; features carry no cue.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 3;
        let labels = Labels((0..n).map(|i| i % c).collect());
        let mut good = Matrix::zeros(n, c);
        for i in 0..n {
            good.set(i, labels.0[i], 3.0);
        }
        let noise = Matrix::new(n, c, (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let f = |rng: &mut ChaCha8Rng| Matrix::new(n, 4, (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let features = Some(vec![f(&mut rng), f(&mut rng)]);
        SplitData {
            stack: LogitStack::new(vec![good, noise]).unwrap(),
            labels,
            features,
        }
    }

    #[test]
    fn loss_vanishes_on_separable_data() {
        let data = separable(1, 120);
        let features = data.features.as_ref().unwrap();
        let mut model = nlc_init(names(2), vec![4, 4], 16, 3).unwrap();
        let mut opt = Adam::new(model.params.len(), 0.05);
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            let (l, g) = nlc_loss_grad(&model, &data.stack, features, &data.labels).unwrap();
            loss = l;
            opt.step(&mut model.params, &g);
        }
        assert!(loss < 0.01, "loss {loss}");
    }

    #[test]
    fn one_shot_training_runs() {
        let data = separable(2, 3);
        let cfg = NlcTrainConfig {
            hidden_dim: 8,
            learning_rate: 1e-2,
            seed: 1,
            ..NlcTrainConfig::default()
        };
        let (model, history) = nlc_train(&data, &names(2), &cfg).unwrap();
        assert_eq!(history[0].epoch, 0);
        let best = history.iter().map(|r| r.holdout_accuracy).fold(0.0, f64::max);
        assert!(best >= 1.0 - 0.02, "{history:?}");
        let z = nlc_predict(&model, &data.stack, data.features.as_ref().unwrap()).unwrap();
        assert_eq!(top1(&z).unwrap(), data.labels);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable(3, 60);
        let cfg = NlcTrainConfig {
            hidden_dim: 8,
            epochs: 15,
            batch_size: 16,
            seed: 5,
            ..NlcTrainConfig::default()
        };
        let a = nlc_train(&data, &names(2), &cfg).unwrap();
        let b = nlc_train(&data, &names(2), &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(format!("{:?}", a.1), format!("{:?}", b.1));
    }

    #[test]
    fn missing_features_and_empty_split() {
        let mut data = separable(4, 10);
        data.features = None;
        assert!(matches!(
            nlc_train(&data, &names(2), &NlcTrainConfig::default()),
            Err(Error::MissingFeatures(_))
        ));
        let empty = separable(4, 1).select(&[]);
        assert!(matches!(
            nlc_train(&empty, &names(2), &NlcTrainConfig::default()),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let (stack, features, _) = random_instance(6, 100, 3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = nlc_init(names(3), vec![5; 3], 12, 9).unwrap();
        for p in m.params.iter_mut() {
            *p = (rng.gen_range(-1.0..1.0f64) as f32) as f64;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        nlc_save(&m, &path).unwrap();
        let back = nlc_load(&path).unwrap();
        assert_eq!(back, m);
        let a = nlc_predict(&m, &stack, &features).unwrap();
        let b = nlc_predict(&back, &stack, &features).unwrap();
        let bits = |x: &Matrix| x.as_slice().iter().map(|v| (*v as f32).to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(nlc_load(&path), Err(Error::SchemaViolation(_))));
    }
}

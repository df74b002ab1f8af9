//! Learned temperature vectors that do not depend on the input: a genetic
//! search (GAC) and a gradient-fitted variant (SL). Both combine backbones
//! with the weighted sum `Σ_b t_b · z_b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{T_MAX, T_MIN};
use crate::combine::{log_sum_exp, softmax_in_place, LogitStack};
use crate::error::{Error, Result};
use crate::matrix::{Labels, Matrix};
use crate::nlc::{inverse_softplus, sigmoid, softplus};
use crate::optim::Adam;

/// `Σ_b t_b · z_b`.
pub fn combine_fixed(stack: &LogitStack, temps: &[f64]) -> Result<Matrix> {
    if temps.len() != stack.len() {
        return Err(Error::LengthMismatch {
            expected: stack.len(),
            got: temps.len(),
        });
    }
    if let Some(&t) = temps.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::NonPositiveTemperature(t));
    }
    let mut out = Matrix::zeros(stack.rows(), stack.classes());
    for (block, &t) in stack.blocks().iter().zip(temps) {
        for (o, v) in out.as_mut_slice().iter_mut().zip(block.as_slice()) {
            *o += t * v;
        }
    }
    Ok(out)
}

/// Mean cross-entropy of `softmax(logits)` against `labels`.
pub fn cross_entropy(logits: &Matrix, labels: &Labels) -> f64 {
    let total: f64 = logits
        .iter_rows()
        .zip(labels.as_slice())
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum();
    total / logits.rows().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GacConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament_size: usize,
    /// Standard deviation of Gaussian mutation in log-temperature space.
    pub mutation_sigma: f64,
    pub elitism: usize,
    pub seed: u64,
}

impl Default for GacConfig {
    fn default() -> Self {
        GacConfig {
            population: 64,
            generations: 200,
            tournament_size: 3,
            mutation_sigma: 0.1,
            elitism: 2,
            seed: 0,
        }
    }
}

impl GacConfig {
    fn validate(&self) -> Result<()> {
        if self.population < self.elitism + 2 {
            return Err(Error::InvalidConfig(format!(
                "population {} must be at least elitism + 2 = {}",
                self.population,
                self.elitism + 2
            )));
        }
        if self.generations == 0 || self.tournament_size == 0 || self.elitism == 0 {
            return Err(Error::InvalidConfig(
                "generations, tournament_size and elitism must be at least 1".into(),
            ));
        }
        if !(self.mutation_sigma >= 0.0) {
            return Err(Error::InvalidConfig("mutation_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SlConfig {
    fn default() -> Self {
        SlConfig {
            steps: 500,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// Result of fitting an input-independent temperature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedFit {
    pub temps: Vec<f64>,
    /// Validation cross-entropy at `temps`.
    pub loss: f64,
    /// Best-so-far loss after each generation (GAC) or step (SL).
    pub trace: Vec<f64>,
}

fn check_labels(stack: &LogitStack, labels: &Labels) -> Result<()> {
    if stack.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: stack.rows(),
            got: labels.len(),
        });
    }
    labels.check_range(stack.classes())
}

fn genome_temps(genome: &[f64]) -> Vec<f64> {
    genome.iter().map(|g| g.exp().clamp(T_MIN, T_MAX)).collect()
}

/// Genetic search over log-temperatures.
///
/// Fitness is validation cross-entropy of the weighted sum (lower is
/// better). The initial population contains the all-ones temperature vector,
/// so the result is never worse than the plain logit sum.
pub fn gac_fit(stack: &LogitStack, labels: &Labels, cfg: &GacConfig) -> Result<FixedFit> {
    check_labels(stack, labels)?;
    cfg.validate()?;
    let b = stack.len();
    let (lo, hi) = (T_MIN.ln(), T_MAX.ln());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0f64, 1.0).expect("valid normal");
    let mutation = Normal::new(0.0, cfg.mutation_sigma).expect("valid normal");

    let mut population: Vec<Vec<f64>> = std::iter::once(vec![0.0; b])
        .chain((1..cfg.population).map(|_| {
            (0..b)
                .map(|_| init.sample(&mut rng).clamp(lo, hi))
                .collect()
        }))
        .collect();

    let fitness_of = |pop: &[Vec<f64>]| -> Vec<f64> {
        pop.par_iter()
            .map(|g| {
                let z = combine_fixed(stack, &genome_temps(g)).expect("positive temps");
                let f = cross_entropy(&z, labels);
                if f.is_finite() {
                    f
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    };

    let mut best_genome = population[0].clone();
    let mut best_fit = f64::INFINITY;
    let mut trace = Vec::with_capacity(cfg.generations);

    for generation in 0..cfg.generations {
        let fitness = fitness_of(&population);
        for (g, &f) in population.iter().zip(&fitness) {
            if f < best_fit {
                best_fit = f;
                best_genome = g.clone();
            }
        }
        trace.push(best_fit);
        if generation + 1 == cfg.generations {
            break;
        }

        let mut ranked: Vec<usize> = (0..population.len()).collect();
        ranked.sort_by(|&a, &c| fitness[a].total_cmp(&fitness[c]).then(a.cmp(&c)));

        let tournament = |rng: &mut ChaCha8Rng| -> usize {
            let mut winner = rng.gen_range(0..population.len());
            for _ in 1..cfg.tournament_size {
                let rival = rng.gen_range(0..population.len());
                if fitness[rival] < fitness[winner] {
                    winner = rival;
                }
            }
            winner
        };

        let mut next: Vec<Vec<f64>> = ranked[..cfg.elitism]
            .iter()
            .map(|&i| population[i].clone())
            .collect();
        while next.len() < cfg.population {
            let p1 = tournament(&mut rng);
            let p2 = tournament(&mut rng);
            let child = (0..b)
                .map(|k| {
                    let alpha: f64 = rng.gen();
                    let gene = alpha * population[p1][k] + (1.0 - alpha) * population[p2][k];
                    (gene + mutation.sample(&mut rng)).clamp(lo, hi)
                })
                .collect();
            next.push(child);
        }
        population = next;
    }

    Ok(FixedFit {
        temps: genome_temps(&best_genome),
        loss: best_fit,
        trace,
    })
}

/// Loss and gradient with respect to θ, where `t_b = softplus(θ_b)`.
pub fn sl_loss_grad(stack: &LogitStack, labels: &Labels, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let temps: Vec<f64> = theta.iter().map(|&x| softplus(x)).collect();
    let z = combine_fixed(stack, &temps)?;
    let n = stack.rows().max(1) as f64;
    let mut grad_t = vec![0.0; stack.len()];
    let mut loss = 0.0;
    let mut p = vec![0.0; stack.classes()];
    for (i, &y) in labels.as_slice().iter().enumerate() {
        let row = z.row(i);
        loss += log_sum_exp(row) - row[y];
        p.copy_from_slice(row);
        softmax_in_place(&mut p);
        p[y] -= 1.0;
        for (b, block) in stack.blocks().iter().enumerate() {
            grad_t[b] += p.iter().zip(block.row(i)).map(|(g, v)| g * v).sum::<f64>() / n;
        }
    }
    let grad = grad_t
        .iter()
        .zip(theta)
        .map(|(g, &x)| g * sigmoid(x))
        .collect();
    Ok((loss / n, grad))
}

/// Gradient-fitted temperature vector, `t_b = softplus(θ_b)` starting at 1.
///
/// Full-batch adaptive-moment descent; the iterate with the lowest loss is
/// returned.
pub fn sl_fit(stack: &LogitStack, labels: &Labels, cfg: &SlConfig) -> Result<FixedFit> {
    check_labels(stack, labels)?;
    if cfg.steps == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidConfig(
            "steps must be at least 1 and learning_rate positive".into(),
        ));
    }
    let mut theta = vec![inverse_softplus(1.0); stack.len()];
    let mut opt = Adam::new(theta.len(), cfg.learning_rate);
    let mut best = (f64::INFINITY, theta.clone());
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..=cfg.steps {
        let (loss, grad) = sl_loss_grad(stack, labels, &theta)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        if loss < best.0 {
            best = (loss, theta.clone());
        }
        if step == cfg.steps {
            break;
        }
        trace.push(best.0);
        opt.step(&mut theta, &grad);
    }
    Ok(FixedFit {
        temps: best.1.iter().map(|&x| softplus(x)).collect(),
        loss: best.0,
        trace,
    })
}

/// Serialized form of a fixed-temperature combiner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedTempsModel {
    #[serde(rename = "type")]
    pub kind: String,
    pub method: String,
    pub backbones: Vec<String>,
    pub temps: Vec<f64>,
    pub val_loss: f64,
    pub config: serde_json::Value,
}

impl FixedTempsModel {
    pub fn new(method: &str, backbones: Vec<String>, fit: &FixedFit, config: serde_json::Value) -> Self {
        FixedTempsModel {
            kind: "fixed-temps".into(),
            method: method.into(),
            backbones,
            temps: fit.temps.clone(),
            val_loss: fit.loss,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: FixedTempsModel =
            serde_json::from_str(text).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        if m.kind != "fixed-temps" || m.temps.len() != m.backbones.len() {
            return Err(Error::SchemaViolation("inconsistent fixed-temps model".into()));
        }
        Ok(m)
    }
}

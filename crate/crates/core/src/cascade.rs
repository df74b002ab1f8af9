//! Early-exit cascades: backbones are evaluated one after another and an
//! example stops as soon as the ensemble of the evaluated prefix is confident.

use serde::{Deserialize, Serialize};

use crate::bundle::{DatasetBundle, SplitData};
use crate::calibration::{calibrated_log_avg, TemperatureVector};
use crate::combine::{log_avg, max_probability, LogitStack};
use crate::error::{Error, Result};
use crate::matrix::{argmax, Labels, Matrix};
use crate::nlc::{nlc_predict, nlc_train, NlcModel, NlcTrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CascadeOrder {
    GflopsAscending,
    Explicit(Vec<String>),
}

/// How the evaluated prefix is combined.
#[derive(Debug, Clone)]
pub enum CascadeCombiner {
    LogAvg,
    /// Log-Avg over temperature-scaled logits; temperatures in bundle order.
    CalibratedLogAvg(Option<TemperatureVector>),
    /// One controller per prefix length, `models[k]` covering the first
    /// `k + 1` backbones in cascade order.
    NlcPerPrefix(Vec<NlcModel>),
}

impl CascadeCombiner {
    pub fn name(&self) -> &'static str {
        match self {
            CascadeCombiner::LogAvg => "logavg",
            CascadeCombiner::CalibratedLogAvg(_) => "c-logavg",
            CascadeCombiner::NlcPerPrefix(_) => "nlc-per-prefix",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CascadeConfig {
    pub order: CascadeOrder,
    /// Exit once the max softmax probability is strictly above this.
    pub threshold: f64,
    pub combiner: CascadeCombiner,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            order: CascadeOrder::GflopsAscending,
            threshold: 0.9,
            combiner: CascadeCombiner::LogAvg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub prefix_len: usize,
    pub confidence: f64,
    pub gflops: f64,
    pub prediction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrace {
    pub order: Vec<String>,
    /// Cost of each backbone, in evaluation order.
    pub costs: Vec<f64>,
    pub threshold: f64,
    pub combiner: String,
    pub entries: Vec<TraceEntry>,
}

impl CascadeTrace {
    pub fn predictions(&self) -> Labels {
        Labels(self.entries.iter().map(|e| e.prediction).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Backbone indices in evaluation order.
pub fn order_backbones(bundle: &DatasetBundle, policy: &CascadeOrder) -> Result<Vec<usize>> {
    match policy {
        CascadeOrder::GflopsAscending => {
            let mut idx: Vec<usize> = (0..bundle.backbones.len()).collect();
            idx.sort_by(|&a, &b| {
                let (x, y) = (&bundle.backbones[a], &bundle.backbones[b]);
                x.gflops.total_cmp(&y.gflops).then_with(|| x.name.cmp(&y.name))
            });
            Ok(idx)
        }
        CascadeOrder::Explicit(names) => {
            let idx = names
                .iter()
                .map(|n| bundle.backbone_index(n))
                .collect::<Result<Vec<_>>>()?;
            let mut seen = idx.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != idx.len() || idx.len() != bundle.backbones.len() {
                return Err(Error::InvalidConfig(
                    "cascade order must list every backbone exactly once".into(),
                ));
            }
            Ok(idx)
        }
    }
}

/// Combined logits of every prefix: `tables[k]` covers `order[..=k]`.
///
/// The static combiners see the prefix in bundle order, so the full prefix
/// reproduces the full-ensemble combiner bit for bit.
pub fn prefix_logits(
    stack: &LogitStack,
    features: Option<&[Matrix]>,
    order: &[usize],
    combiner: &CascadeCombiner,
) -> Result<Vec<Matrix>> {
    if order.is_empty() || order.len() > stack.len() {
        return Err(Error::InvalidConfig("cascade order does not match the stack".into()));
    }
    (1..=order.len())
        .map(|k| {
            let prefix = &order[..k];
            let mut sorted = prefix.to_vec();
            sorted.sort_unstable();
            match combiner {
                CascadeCombiner::LogAvg => Ok(log_avg(&stack.subset(&sorted)?)),
                CascadeCombiner::CalibratedLogAvg(temps) => {
                    let temps = temps
                        .as_ref()
                        .filter(|t| t.len() == stack.len())
                        .ok_or_else(|| Error::MissingCombinerState("fitted temperatures".into()))?;
                    let picked = TemperatureVector {
                        names: sorted.iter().map(|&b| temps.names[b].clone()).collect(),
                        temps: sorted.iter().map(|&b| temps.temps[b]).collect(),
                        nll: sorted.iter().map(|&b| temps.nll[b]).collect(),
                        split: temps.split.clone(),
                    };
                    calibrated_log_avg(&stack.subset(&sorted)?, &picked)
                }
                CascadeCombiner::NlcPerPrefix(models) => {
                    if models.len() != order.len() {
                        return Err(Error::MissingCombinerState(format!(
                            "{} prefix controllers for {} backbones",
                            models.len(),
                            order.len()
                        )));
                    }
                    let features = features
                        .ok_or_else(|| Error::MissingCombinerState("features for controllers".into()))?;
                    let f: Vec<Matrix> = prefix.iter().map(|&b| features[b].clone()).collect();
                    nlc_predict(&models[k - 1], &stack.subset(prefix)?, &f)
                }
            }
        })
        .collect()
}

/// Runs the exit rule over precomputed prefix logits.
///
/// `costs[k]` is the cost of one evaluated backbone at position `k`.
pub fn cascade_from_prefixes(
    prefixes: &[Matrix],
    costs: &[f64],
    threshold: f64,
) -> Result<Vec<TraceEntry>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} outside [0, 1]")));
    }
    if prefixes.is_empty() || prefixes.len() != costs.len() {
        return Err(Error::InvalidConfig("one cost per prefix is required".into()));
    }
    let rows = prefixes[0].rows();
    let last = prefixes.len() - 1;
    Ok((0..rows)
        .map(|i| {
            let mut spent = 0.0;
            for (k, m) in prefixes.iter().enumerate() {
                spent += costs[k];
                let row = m.row(i);
                let confidence = max_probability(row);
                if confidence > threshold || k == last {
                    return TraceEntry {
                        prefix_len: k + 1,
                        confidence,
                        gflops: spent,
                        prediction: argmax(row),
                    };
                }
            }
            unreachable!("the last prefix always exits")
        })
        .collect())
}

/// Cascade over in-memory data. `order` holds bundle indices; `gflops` is in
/// bundle order.
pub fn cascade_data(
    data: &SplitData,
    backbones: &[String],
    gflops: &[f64],
    order: &[usize],
    threshold: f64,
    combiner: &CascadeCombiner,
) -> Result<CascadeTrace> {
    let prefixes = prefix_logits(&data.stack, data.features.as_deref(), order, combiner)?;
    let costs: Vec<f64> = order.iter().map(|&b| gflops[b]).collect();
    Ok(CascadeTrace {
        order: order.iter().map(|&b| backbones[b].clone()).collect(),
        threshold,
        combiner: combiner.name().to_string(),
        entries: cascade_from_prefixes(&prefixes, &costs, threshold)?,
        costs,
    })
}

pub fn cascade_run(bundle: &DatasetBundle, split: &str, cfg: &CascadeConfig) -> Result<(Labels, CascadeTrace)> {
    let order = order_backbones(bundle, &cfg.order)?;
    let data = if matches!(cfg.combiner, CascadeCombiner::NlcPerPrefix(_)) {
        bundle.load_split(split)?
    } else {
        SplitData {
            stack: bundle.load_logits(split)?,
            labels: bundle.load_labels(split)?,
            features: None,
        }
    };
    let gflops: Vec<f64> = bundle.backbones.iter().map(|b| b.gflops).collect();
    let trace = cascade_data(
        &data,
        &bundle.backbone_names(),
        &gflops,
        &order,
        cfg.threshold,
        &cfg.combiner,
    )?;
    Ok((trace.predictions(), trace))
}

/// Mean cumulative cost per example.
///
/// Computed as `c_1 + Σ_{k≥2} P(prefix ≥ k)·c_k`, which equals `c_1` exactly
/// when every example exits first and never decreases as exits move later.
pub fn cascade_cost(trace: &CascadeTrace) -> f64 {
    let n = trace.entries.len();
    if n == 0 || trace.costs.is_empty() {
        return 0.0;
    }
    let mut cost = trace.costs[0];
    for (k, &c) in trace.costs.iter().enumerate().skip(1) {
        let reached = trace.entries.iter().filter(|e| e.prefix_len > k).count();
        cost += reached as f64 / n as f64 * c;
    }
    cost
}

/// Trains one controller per prefix of `order` on `data`.
pub fn train_prefix_controllers(
    data: &SplitData,
    backbones: &[String],
    order: &[usize],
    cfg: &NlcTrainConfig,
) -> Result<Vec<NlcModel>> {
    let features = data.features_or_err()?;
    (1..=order.len())
        .map(|k| {
            let prefix = &order[..k];
            let sub = SplitData {
                stack: data.stack.subset(prefix)?,
                labels: data.labels.clone(),
                features: Some(prefix.iter().map(|&b| features[b].clone()).collect()),
            };
            let names: Vec<String> = prefix.iter().map(|&b| backbones[b].clone()).collect();
            Ok(nlc_train(&sub, &names, cfg)?.0)
        })
        .collect()
}

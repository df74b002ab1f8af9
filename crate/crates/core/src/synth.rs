//! Synthetic bundles with controllable per-backbone accuracy and diversity.
//!
//! Each example draws a label `y` and a reliable backbone `e`. With
//! probability `rho` the example is routed: backbone `e` is correct with
//! probability `reliable_acc` and every other backbone at a reduced rate that
//! keeps its marginal accuracy at the requested value. Otherwise correctness
//! is independent per backbone. Features carry a noisy one-hot cue of `e`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{BackboneEntry, DatasetBundle, SplitData};
use crate::combine::LogitStack;
use crate::error::{Error, Result};
use crate::matrix::{Labels, Matrix};
use crate::npy::{save_labels, save_npy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// A `val` split is written only when this is positive.
    pub n_val: usize,
    /// Target accuracy per backbone; its length sets the backbone count.
    pub accuracies: Vec<f64>,
    pub rho: f64,
    /// Accuracy of the reliable backbone on a routed example.
    pub reliable_acc: f64,
    pub margin: f64,
    pub feature_dim: usize,
    pub cue_strength: f64,
    /// Cost per backbone; defaults to `10·(b+1)` when empty.
    pub gflops: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            n_train: 5000,
            n_test: 2000,
            n_val: 0,
            accuracies: vec![0.7; 3],
            rho: 0.8,
            reliable_acc: 1.0,
            margin: 2.0,
            feature_dim: 16,
            cue_strength: 2.0,
            gflops: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn backbones(&self) -> usize {
        self.accuracies.len()
    }

    pub fn backbone_names(&self) -> Vec<String> {
        (0..self.backbones()).map(|b| format!("synth-{b}")).collect()
    }

    fn costs(&self) -> Vec<f64> {
        if self.gflops.is_empty() {
            (0..self.backbones()).map(|b| 10.0 * (b + 1) as f64).collect()
        } else {
            self.gflops.clone()
        }
    }

    /// Accuracy of each backbone on routed examples where it is not the
    /// reliable one.
    pub fn routed_rates(&self) -> Result<Vec<f64>> {
        let b = self.backbones() as f64;
        if self.backbones() == 1 {
            return Ok(self.accuracies.clone());
        }
        let q = self.reliable_acc;
        let low = q / b;
        let high = (q + b - 1.0) / b;
        self.accuracies
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                if p < low - 1e-12 || p > high + 1e-12 {
                    Err(Error::InfeasibleRates {
                        backbone: k,
                        requested: p,
                        low,
                        high,
                    })
                } else {
                    Ok(((b * p - q) / (b - 1.0)).clamp(0.0, 1.0))
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.classes < 2 {
            return bad("at least 2 classes are required");
        }
        if self.accuracies.is_empty() {
            return bad("at least one backbone is required");
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("train and test splits must be non-empty");
        }
        if self.feature_dim < self.backbones() {
            return bad("feature_dim must be at least the backbone count");
        }
        if self.accuracies.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return bad("accuracies must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.rho) || !(0.0..=1.0).contains(&self.reliable_acc) {
            return bad("rho and reliable_acc must lie in [0, 1]");
        }
        if !(self.margin > 0.0) || !(self.cue_strength >= 0.0) {
            return bad("margin must be positive and cue_strength non-negative");
        }
        if !self.gflops.is_empty() && self.gflops.len() != self.backbones() {
            return bad("one gflops value per backbone is required");
        }
        if self.gflops.iter().any(|g| !(*g >= 0.0)) {
            return bad("gflops must be non-negative");
        }
        self.routed_rates().map(|_| ())
    }
}

/// One generated split plus the hidden routing variables.
#[derive(Debug, Clone)]
pub struct SynthSplit {
    pub data: SplitData,
    pub reliable: Vec<usize>,
    pub routed: Vec<bool>,
}

struct Example {
    label: usize,
    reliable: usize,
    routed: bool,
    logits: Vec<Vec<f64>>,
    features: Vec<Vec<f64>>,
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

fn example(cfg: &SynthConfig, rates: &[f64], split_id: u64, i: usize) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((split_id << 40) | i as u64);
    let b_count = cfg.backbones();
    let c = cfg.classes;
    let label = rng.gen_range(0..c);
    let reliable = rng.gen_range(0..b_count);
    let routed = rng.gen_bool(cfg.rho);

    let logits = (0..b_count)
        .map(|b| {
            let p = match (routed, b_count) {
                (_, 1) | (false, _) => cfg.accuracies[b],
                (true, _) if b == reliable => cfg.reliable_acc,
                (true, _) => rates[b],
            };
            let correct = rng.gen_bool(p);
            let target = if correct {
                label
            } else {
                let w = rng.gen_range(0..c - 1);
                if w >= label {
                    w + 1
                } else {
                    w
                }
            };
            let mut z: Vec<f64> = (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let runner_up = (0..c)
                .filter(|&k| k != target)
                .map(|k| z[k])
                .fold(f64::NEG_INFINITY, f64::max);
            z[target] = runner_up + cfg.margin;
            z.into_iter().map(round32).collect()
        })
        .collect();

    let features = (0..b_count)
        .map(|_| {
            let mut f: Vec<f64> = (0..cfg.feature_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            f[reliable] += cfg.cue_strength;
            f.into_iter().map(round32).collect()
        })
        .collect();

    Example {
        label,
        reliable,
        routed,
        logits,
        features,
    }
}

fn generate_split(cfg: &SynthConfig, rates: &[f64], split_id: u64, n: usize) -> Result<SynthSplit> {
    let examples: Vec<Example> = (0..n)
        .into_par_iter()
        .map(|i| example(cfg, rates, split_id, i))
        .collect();
    let b_count = cfg.backbones();
    let block = |b: usize, pick: &dyn Fn(&Example) -> &Vec<Vec<f64>>, width: usize| {
        let data: Vec<f64> = examples.iter().flat_map(|e| pick(e)[b].iter().copied()).collect();
        Matrix::new(n, width, data)
    };
    let stack = LogitStack::new(
        (0..b_count)
            .map(|b| block(b, &|e| &e.logits, cfg.classes))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let features = (0..b_count)
        .map(|b| block(b, &|e| &e.features, cfg.feature_dim))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthSplit {
        data: SplitData {
            stack,
            labels: Labels(examples.iter().map(|e| e.label).collect()),
            features: Some(features),
        },
        reliable: examples.iter().map(|e| e.reliable).collect(),
        routed: examples.iter().map(|e| e.routed).collect(),
    })
}

/// Generates every split in memory, keyed by split name.
pub fn synth_splits(cfg: &SynthConfig) -> Result<BTreeMap<String, SynthSplit>> {
    cfg.validate()?;
    let rates = cfg.routed_rates()?;
    let mut out = BTreeMap::new();
    for (id, name, n) in [(0u64, "train", cfg.n_train), (1, "test", cfg.n_test), (2, "val", cfg.n_val)] {
        if n > 0 {
            out.insert(name.to_string(), generate_split(cfg, &rates, id, n)?);
        }
    }
    Ok(out)
}

/// Generates a bundle and writes its manifest (`manifest.json`) and arrays
/// into `dir`.
pub fn synth_generate(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let splits = synth_splits(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let names = cfg.backbone_names();
    let costs = cfg.costs();
    let mut labels = BTreeMap::new();
    let mut logits: Vec<BTreeMap<String, PathBuf>> = vec![BTreeMap::new(); names.len()];
    let mut features: Vec<BTreeMap<String, PathBuf>> = vec![BTreeMap::new(); names.len()];
    for (split, s) in &splits {
        let path = dir.join(format!("labels_{split}.npy"));
        save_labels(&s.data.labels, &path)?;
        labels.insert(split.clone(), path);
        let feats = s.data.features.as_ref().expect("generated splits have features");
        for (b, name) in names.iter().enumerate() {
            let lp = dir.join(format!("{name}_{split}_logits.npy"));
            save_npy(s.data.stack.block(b), &lp)?;
            logits[b].insert(split.clone(), lp);
            let fp = dir.join(format!("{name}_{split}_features.npy"));
            save_npy(&feats[b], &fp)?;
            features[b].insert(split.clone(), fp);
        }
    }

    let bundle = DatasetBundle {
        name: format!("synth-rho{}-seed{}", cfg.rho, cfg.seed),
        num_classes: cfg.classes,
        splits: ["train", "val", "test"]
            .iter()
            .filter(|s| splits.contains_key(**s))
            .map(|s| s.to_string())
            .collect(),
        labels,
        backbones: names
            .iter()
            .enumerate()
            .map(|(b, name)| BackboneEntry {
                name: name.clone(),
                gflops: costs[b],
                feature_dim: cfg.feature_dim,
                logits: logits[b].clone(),
                features: Some(features[b].clone()),
                probe_init: None,
            })
            .collect(),
    };
    let manifest = dir.join("manifest.json");
    std::fs::write(&manifest, bundle.to_manifest_json(dir)).map_err(|e| Error::io(&manifest, e))?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{load_manifest, validate_bundle};
    use crate::metrics::{diversity, oracle_accuracy, CorrectnessMask};

    fn masks(split: &SynthSplit) -> Vec<CorrectnessMask> {
        split
            .data
            .stack
            .blocks()
            .iter()
            .enumerate()
            .map(|(b, m)| CorrectnessMask::from_logits(b.to_string(), m, &split.data.labels).unwrap())
            .collect()
    }

    fn small(rho: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_train: 5000,
            n_test: 10,
            rho,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn independent_accuracy_matches_target() {
        let s = synth_splits(&small(0.0, 1)).unwrap();
        for m in masks(&s["train"]) {
            assert!((m.accuracy() - 0.7).abs() < 0.02, "{}", m.accuracy());
        }
    }

    #[test]
    fn routed_accuracy_matches_target_and_is_diverse() {
        let s = synth_splits(&small(1.0, 2)).unwrap();
        let m = masks(&s["train"]);
        for mask in &m {
            assert!((mask.accuracy() - 0.7).abs() < 0.02, "{}", mask.accuracy());
        }
        assert!(diversity(&m).unwrap() >= 0.6);
        assert!(oracle_accuracy(&m).unwrap() > 0.7);
    }

    #[test]
    fn diversity_grows_with_rho() {
        let mut last = 0.0;
        for rho in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let mean: f64 = (0..5)
                .map(|seed| {
                    let cfg = SynthConfig {
                        n_train: 2000,
                        ..small(rho, seed)
                    };
                    diversity(&masks(&synth_splits(&cfg).unwrap()["train"])).unwrap()
                })
                .sum::<f64>()
                / 5.0;
            assert!(mean >= last, "rho {rho}: {mean} < {last}");
            last = mean;
        }
    }

    #[test]
    fn infeasible_rates_are_rejected() {
        let cfg = SynthConfig {
            accuracies: vec![0.2, 0.7, 0.7],
            rho: 1.0,
            ..SynthConfig::default()
        };
        match synth_splits(&cfg) {
            Err(Error::InfeasibleRates { backbone, low, high, .. }) => {
                assert_eq!(backbone, 0);
                assert!((low - 1.0 / 3.0).abs() < 1e-12);
                assert!((high - 1.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn written_bundle_validates_and_is_deterministic() {
        let cfg = SynthConfig {
            n_train: 200,
            n_test: 50,
            n_val: 20,
            seed: 9,
            ..SynthConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_generate(&cfg, a.path()).unwrap();
        synth_generate(&cfg, b.path()).unwrap();
        let loaded = load_manifest(a.path().join("manifest.json")).unwrap();
        assert!(validate_bundle(&loaded).is_empty(), "{}", validate_bundle(&loaded));

        let mut files: Vec<_> = std::fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        files.sort();
        assert_eq!(files.len(), 1 + 3 + 3 * 3 * 2);
        for f in files {
            assert_eq!(
                std::fs::read(a.path().join(&f)).unwrap(),
                std::fs::read(b.path().join(&f)).unwrap()
            );
        }

        let split = loaded.load_split("train").unwrap();
        let mem = synth_splits(&cfg).unwrap();
        assert_eq!(split.stack.block(1), mem["train"].data.stack.block(1));
    }
}

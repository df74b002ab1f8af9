//! Dataset manifests: which backbones exist, where their exported logits and
//! features live, and which labels belong to each split.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::combine::LogitStack;
use crate::error::{Error, Result};
use crate::matrix::{Labels, Matrix};
use crate::npy::{self, Dtype};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    name: String,
    num_classes: usize,
    splits: Vec<String>,
    labels: BTreeMap<String, PathBuf>,
    backbones: Vec<BackboneFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BackboneFile {
    name: String,
    gflops: f64,
    feature_dim: usize,
    logits: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<BTreeMap<String, PathBuf>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probe_init: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneEntry {
    pub name: String,
    /// Forward-pass cost per image.
    pub gflops: f64,
    pub feature_dim: usize,
    pub logits: BTreeMap<String, PathBuf>,
    pub features: Option<BTreeMap<String, PathBuf>>,
    /// Optional C×D initialization for a linear probe on this backbone.
    pub probe_init: Option<PathBuf>,
}

/// A manifest with every path resolved. No array data is held here.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub num_classes: usize,
    pub splits: Vec<String>,
    pub labels: BTreeMap<String, PathBuf>,
    /// Manifest order; this order defines the backbone index everywhere.
    pub backbones: Vec<BackboneEntry>,
}

/// Arrays for one split, backbones in bundle order.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub stack: LogitStack,
    pub labels: Labels,
    pub features: Option<Vec<Matrix>>,
}

impl SplitData {
    pub fn select(&self, indices: &[usize]) -> SplitData {
        SplitData {
            stack: self.stack.select_rows(indices),
            labels: self.labels.select(indices),
            features: self
                .features
                .as_ref()
                .map(|fs| fs.iter().map(|f| f.select_rows(indices)).collect()),
        }
    }

    pub fn features_or_err(&self) -> Result<&[Matrix]> {
        self.features
            .as_deref()
            .ok_or_else(|| Error::MissingFeatures("<split>".into()))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::SchemaViolation(e.to_string()))?;
    let root = path.parent().unwrap_or(Path::new(""));
    DatasetBundle::from_file(file, root)
}

impl DatasetBundle {
    fn from_file(file: ManifestFile, root: &Path) -> Result<Self> {
        for required in ["train", "test"] {
            if !file.splits.iter().any(|s| s == required) {
                return Err(Error::SchemaViolation(format!(
                    "splits must include {required:?}"
                )));
            }
        }
        if file.num_classes == 0 {
            return Err(Error::SchemaViolation("num_classes must be at least 1".into()));
        }
        if file.backbones.is_empty() {
            return Err(Error::SchemaViolation("no backbones listed".into()));
        }
        let mut seen = HashSet::new();
        for b in &file.backbones {
            if !seen.insert(b.name.as_str()) {
                return Err(Error::DuplicateBackboneName(b.name.clone()));
            }
            if !(b.gflops >= 0.0 && b.gflops.is_finite()) {
                return Err(Error::SchemaViolation(format!(
                    "backbone {:?}: gflops must be a non-negative number",
                    b.name
                )));
            }
        }

        let resolve = |m: BTreeMap<String, PathBuf>| -> BTreeMap<String, PathBuf> {
            m.into_iter().map(|(k, p)| (k, root.join(p))).collect()
        };
        Ok(DatasetBundle {
            name: file.name,
            num_classes: file.num_classes,
            splits: file.splits,
            labels: resolve(file.labels),
            backbones: file
                .backbones
                .into_iter()
                .map(|b| BackboneEntry {
                    name: b.name,
                    gflops: b.gflops,
                    feature_dim: b.feature_dim,
                    logits: resolve(b.logits),
                    features: b.features.map(resolve),
                    probe_init: b.probe_init.map(|p| root.join(p)),
                })
                .collect(),
        })
    }

    /// Serializes the bundle with paths made relative to `dir` where possible.
    pub fn to_manifest_json(&self, dir: &Path) -> String {
        let rel = |p: &PathBuf| p.strip_prefix(dir).unwrap_or(p).to_path_buf();
        let rel_map = |m: &BTreeMap<String, PathBuf>| -> BTreeMap<String, PathBuf> {
            m.iter().map(|(k, p)| (k.clone(), rel(p))).collect()
        };
        let file = ManifestFile {
            name: self.name.clone(),
            num_classes: self.num_classes,
            splits: self.splits.clone(),
            labels: rel_map(&self.labels),
            backbones: self
                .backbones
                .iter()
                .map(|b| BackboneFile {
                    name: b.name.clone(),
                    gflops: b.gflops,
                    feature_dim: b.feature_dim,
                    logits: rel_map(&b.logits),
                    features: b.features.as_ref().map(rel_map),
                    probe_init: b.probe_init.as_ref().map(rel),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("manifest serializes")
    }

    pub fn backbone_names(&self) -> Vec<String> {
        self.backbones.iter().map(|b| b.name.clone()).collect()
    }

    pub fn backbone_index(&self, name: &str) -> Result<usize> {
        self.backbones
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::UnknownBackboneName(name.to_string()))
    }

    pub fn has_split(&self, split: &str) -> bool {
        self.splits.iter().any(|s| s == split)
    }

    fn check_split(&self, split: &str) -> Result<()> {
        if self.has_split(split) {
            Ok(())
        } else {
            Err(Error::UnknownSplit(split.to_string()))
        }
    }

    pub fn load_labels(&self, split: &str) -> Result<Labels> {
        self.check_split(split)?;
        let path = self
            .labels
            .get(split)
            .ok_or_else(|| Error::SchemaViolation(format!("no labels for split {split:?}")))?;
        let labels = npy::load_labels(path)?;
        labels.check_range(self.num_classes)?;
        Ok(labels)
    }

    pub fn load_logits(&self, split: &str) -> Result<LogitStack> {
        self.check_split(split)?;
        let blocks = self
            .backbones
            .iter()
            .map(|b| {
                let path = b.logits.get(split).ok_or_else(|| {
                    Error::SchemaViolation(format!("backbone {:?} has no {split:?} logits", b.name))
                })?;
                let m = npy::load_npy(path)?;
                if m.cols() != self.num_classes {
                    return Err(Error::ShapeMismatch(format!(
                        "backbone {:?}: {} logit columns, expected {}",
                        b.name,
                        m.cols(),
                        self.num_classes
                    )));
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        LogitStack::new(blocks)
    }

    /// Per-backbone feature matrices for a split.
    pub fn load_features(&self, split: &str) -> Result<Vec<Matrix>> {
        self.check_split(split)?;
        self.backbones
            .iter()
            .map(|b| {
                let path = b
                    .features
                    .as_ref()
                    .and_then(|f| f.get(split))
                    .ok_or_else(|| Error::MissingFeatures(b.name.clone()))?;
                let m = npy::load_npy(path)?;
                if m.cols() != b.feature_dim {
                    return Err(Error::ShapeMismatch(format!(
                        "backbone {:?}: {} feature columns, expected {}",
                        b.name,
                        m.cols(),
                        b.feature_dim
                    )));
                }
                Ok(m)
            })
            .collect()
    }

    pub fn has_features(&self, split: &str) -> bool {
        self.backbones
            .iter()
            .all(|b| b.features.as_ref().is_some_and(|f| f.contains_key(split)))
    }

    /// Logits, labels and (when every backbone has them) features.
    pub fn load_split(&self, split: &str) -> Result<SplitData> {
        let stack = self.load_logits(split)?;
        let labels = self.load_labels(split)?;
        if labels.len() != stack.rows() {
            return Err(Error::LengthMismatch {
                expected: stack.rows(),
                got: labels.len(),
            });
        }
        let features = if self.has_features(split) {
            let f = self.load_features(split)?;
            if let Some(bad) = f.iter().find(|m| m.rows() != stack.rows()) {
                return Err(Error::LengthMismatch {
                    expected: stack.rows(),
                    got: bad.rows(),
                });
            }
            Some(f)
        } else {
            None
        };
        Ok(SplitData {
            stack,
            labels,
            features,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    MissingEntry,
    UnreadableFile,
    WrongDtype,
    WrongRank,
    RowCountMismatch,
    ClassCountMismatch,
    FeatureDimMismatch,
    LabelOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

/// Every problem found in a bundle; empty means the bundle is usable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, message: String) {
        self.violations.push(Violation { kind, message });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for v in &self.violations {
            writeln!(f, "{:?}: {}", v.kind, v.message)?;
        }
        Ok(())
    }
}

/// Checks shapes, dtypes and labels of every file the bundle references.
///
/// Only headers of logit and feature files are read; label files are read in
/// full for the range check.
pub fn validate_bundle(b: &DatasetBundle) -> ValidationReport {
    use ViolationKind::*;
    let mut report = ValidationReport::default();

    let header = |report: &mut ValidationReport, what: &str, path: &Path| {
        match npy::read_header(path) {
            Ok(h) => Some(h),
            Err(e) => {
                report.push(UnreadableFile, format!("{what}: {e}"));
                None
            }
        }
    };

    for split in &b.splits {
        let mut rows: Option<usize> = None;

        match b.labels.get(split) {
            None => report.push(MissingEntry, format!("split {split:?}: no labels")),
            Some(path) => {
                if let Some(h) = header(&mut report, &format!("labels[{split}]"), path) {
                    if h.dtype != Dtype::I64 {
                        report.push(WrongDtype, format!("labels[{split}]: expected '<i8'"));
                    } else if h.shape.len() != 1 {
                        report.push(
                            WrongRank,
                            format!("labels[{split}]: expected 1-D, got {:?}", h.shape),
                        );
                    } else {
                        rows = Some(h.shape[0]);
                        match npy::load_labels(path) {
                            Ok(labels) => {
                                if let Some((i, y)) = labels
                                    .as_slice()
                                    .iter()
                                    .enumerate()
                                    .find(|(_, &y)| y >= b.num_classes)
                                {
                                    report.push(
                                        LabelOutOfRange,
                                        format!(
                                            "labels[{split}]: label out of range: {y} at index {i} (num_classes {})",
                                            b.num_classes
                                        ),
                                    );
                                }
                            }
                            Err(e) => report.push(LabelOutOfRange, format!("labels[{split}]: {e}")),
                        }
                    }
                }
            }
        }

        let mut check_rows = |report: &mut ValidationReport, what: &str, n: usize| match rows {
            Some(expected) if expected != n => report.push(
                RowCountMismatch,
                format!("{what}: row count mismatch ({n} rows, expected {expected})"),
            ),
            Some(_) => {}
            None => rows = Some(n),
        };

        for bb in &b.backbones {
            let what = format!("{}.logits[{split}]", bb.name);
            match bb.logits.get(split) {
                None => report.push(MissingEntry, format!("{what}: not listed")),
                Some(path) => {
                    if let Some(h) = header(&mut report, &what, path) {
                        if h.dtype != Dtype::F32 {
                            report.push(WrongDtype, format!("{what}: expected '<f4'"));
                        }
                        if h.shape.len() != 2 {
                            report.push(WrongRank, format!("{what}: expected 2-D, got {:?}", h.shape));
                        } else {
                            check_rows(&mut report, &what, h.shape[0]);
                            if h.shape[1] != b.num_classes {
                                report.push(
                                    ClassCountMismatch,
                                    format!(
                                        "{what}: {} classes, manifest says {}",
                                        h.shape[1], b.num_classes
                                    ),
                                );
                            }
                        }
                    }
                }
            }

            let Some(features) = &bb.features else {
                continue;
            };
            let what = format!("{}.features[{split}]", bb.name);
            match features.get(split) {
                None => report.push(MissingEntry, format!("{what}: not listed")),
                Some(path) => {
                    if let Some(h) = header(&mut report, &what, path) {
                        if h.dtype != Dtype::F32 {
                            report.push(WrongDtype, format!("{what}: expected '<f4'"));
                        }
                        if h.shape.len() != 2 {
                            report.push(WrongRank, format!("{what}: expected 2-D, got {:?}", h.shape));
                        } else {
                            check_rows(&mut report, &what, h.shape[0]);
                            if h.shape[1] != bb.feature_dim {
                                report.push(
                                    FeatureDimMismatch,
                                    format!(
                                        "{what}: width {}, manifest says {}",
                                        h.shape[1], bb.feature_dim
                                    ),
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    for bb in &b.backbones {
        if let Some(path) = &bb.probe_init {
            let what = format!("{}.probe_init", bb.name);
            if let Some(h) = header(&mut report, &what, path) {
                if h.shape != [b.num_classes, bb.feature_dim] {
                    report.push(
                        FeatureDimMismatch,
                        format!(
                            "{what}: shape {:?}, expected [{}, {}]",
                            h.shape, b.num_classes, bb.feature_dim
                        ),
                    );
                }
            }
        }
    }

    report
}

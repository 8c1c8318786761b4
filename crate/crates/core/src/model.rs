//! Named color classes learned from training windows, and the `.cpm.json`
//! file that persists them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::{ClusterConfig, ClusterResult};
use crate::colorlab::{delta_e, LabColor};
use crate::raster::Rect;

pub const MODEL_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[MODEL_VERSION];
pub const COLORSPACE: &str = "lab-d65";
/// Reserved name of the label given to pixels outside every acceptance radius.
pub const UNKNOWN_LABEL: &str = "UNKNOWN";
/// Class indices must fit a single-channel label map with 255 reserved for UNKNOWN.
pub const MAX_CLASSES: usize = 255;
/// Inter-class centroids closer than this are reported as ambiguous.
pub const AMBIGUITY_DE: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("malformed model file: {0}")]
    Parse(String),
    #[error("model file does not match the schema: {0}")]
    Schema(String),
    #[error("unsupported model version {found}; supported versions: {supported:?}")]
    UnsupportedVersion { found: String, supported: Vec<u32> },
    #[error("invalid model: {0}")]
    Invariant(String),
    #[error("class labels must be non-empty")]
    EmptyLabel,
    #[error("label {0:?} is reserved")]
    ReservedLabel(String),
    #[error("label assignment must cover centroids 0..{k}; missing {missing:?}, unexpected {unexpected:?}")]
    PartialAssignment { k: usize, missing: Vec<usize>, unexpected: Vec<usize> },
    #[error("centroid of class {0:?} coincides exactly with a centroid of class {1:?}")]
    CentroidCollision(String, String),
    #[error("a model holds at most {MAX_CLASSES} classes")]
    TooManyClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentroidEntry {
    pub lab: LabColor,
    pub radius: f64,
    pub weight: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorClass {
    pub label: String,
    pub centroids: Vec<CentroidEntry>,
}

/// The training window a batch of centroids came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub doc: String,
    pub rect: Rect,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorModel {
    pub version: u32,
    pub colorspace: String,
    pub config: ClusterConfig,
    pub classes: Vec<ColorClass>,
    pub provenance: Vec<Provenance>,
}

/// Maps every centroid index of a [`ClusterResult`] to a class label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelAssignment(pub BTreeMap<usize, String>);

impl LabelAssignment {
    pub fn from_labels<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        Self(labels.into_iter().map(Into::into).enumerate().collect())
    }

    /// Assigns each centroid to the label of its nearest reference color.
    /// This is how scripted training names clusters without knowing their order.
    pub fn from_hints(cr: &ClusterResult, hints: &[(String, LabColor)]) -> Self {
        let mut map = BTreeMap::new();
        if hints.is_empty() {
            return Self(map);
        }
        for (i, c) in cr.centroids.iter().enumerate() {
            let mut best = 0;
            for (j, (_, h)) in hints.iter().enumerate() {
                if delta_e(*c, *h) < delta_e(*c, hints[best].1) {
                    best = j;
                }
            }
            map.insert(i, hints[best].0.clone());
        }
        Self(map)
    }

    pub fn check_total(&self, k: usize) -> Result<(), ModelError> {
        let missing: Vec<usize> = (0..k).filter(|i| !self.0.contains_key(i)).collect();
        let unexpected: Vec<usize> = self.0.keys().copied().filter(|&i| i >= k).collect();
        if missing.is_empty() && unexpected.is_empty() {
            Ok(())
        } else {
            Err(ModelError::PartialAssignment { k, missing, unexpected })
        }
    }
}

pub fn check_label(label: &str) -> Result<(), ModelError> {
    if label.trim().is_empty() {
        Err(ModelError::EmptyLabel)
    } else if label == UNKNOWN_LABEL {
        Err(ModelError::ReservedLabel(label.to_string()))
    } else {
        Ok(())
    }
}

/// Repeatedly merges the globally closest centroid pair closer than `eps`
/// into its weight-weighted mean. Ties go to the lexicographically lowest
/// index pair.
pub fn merge_centroids(class: &ColorClass, eps: f64) -> ColorClass {
    let mut cs = class.centroids.clone();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..cs.len() {
            for j in i + 1..cs.len() {
                let d = delta_e(cs[i].lab, cs[j].lab);
                if d < eps && best.is_none_or(|b| d < b.2) {
                    best = Some((i, j, d));
                }
            }
        }
        let Some((i, j, _)) = best else { break };
        let (a, b) = (&cs[i], &cs[j]);
        let (wa, wb) = (a.weight as f64, b.weight as f64);
        let total = wa + wb;
        let mix = |x: f64, y: f64| (wa * x + wb * y) / total;
        let merged = CentroidEntry {
            lab: LabColor::new(mix(a.lab.l, b.lab.l), mix(a.lab.a, b.lab.a), mix(a.lab.b, b.lab.b)),
            radius: a.radius.max(b.radius),
            weight: a.weight + b.weight,
        };
        cs[i] = merged;
        cs.remove(j);
    }
    ColorClass { label: class.label.clone(), centroids: cs }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

impl ColorModel {
    pub fn new(cfg: ClusterConfig) -> Self {
        Self {
            version: MODEL_VERSION,
            colorspace: COLORSPACE.to_string(),
            config: cfg,
            classes: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn labels(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.label.as_str()).collect()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.label == label)
    }

    pub fn centroid_count(&self) -> usize {
        self.classes.iter().map(|c| c.centroids.len()).sum()
    }

    /// Folds one clustered window into the model and returns the successor.
    /// Classes whose labels do not appear in `asg` are left untouched.
    pub fn add_training_window(&self, win: Provenance, cr: &ClusterResult, asg: &LabelAssignment) -> Result<ColorModel, ModelError> {
        asg.check_total(cr.k())?;
        for label in asg.0.values() {
            check_label(label)?;
        }
        let mut next = self.clone();
        let mut touched = BTreeSet::new();
        for (&i, label) in &asg.0 {
            let idx = match next.class_index(label) {
                Some(idx) => idx,
                None => {
                    if next.classes.len() >= MAX_CLASSES {
                        return Err(ModelError::TooManyClasses);
                    }
                    next.classes.push(ColorClass { label: label.clone(), centroids: Vec::new() });
                    next.classes.len() - 1
                }
            };
            next.classes[idx].centroids.push(CentroidEntry {
                lab: cr.centroids[i],
                radius: cr.radii.get(i).copied().unwrap_or(self.config.r_min),
                weight: cr.counts[i].max(1),
            });
            touched.insert(idx);
        }
        for idx in touched {
            next.classes[idx] = merge_centroids(&next.classes[idx], self.config.merge_eps);
        }
        next.check_collisions()?;
        next.provenance.push(win);
        Ok(next)
    }

    fn check_collisions(&self) -> Result<(), ModelError> {
        for (i, ci) in self.classes.iter().enumerate() {
            for cj in &self.classes[i + 1..] {
                for a in &ci.centroids {
                    if cj.centroids.iter().any(|b| a.lab == b.lab) {
                        return Err(ModelError::CentroidCollision(ci.label.clone(), cj.label.clone()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Hard invariants a model file must satisfy to load. Empty classes are
    /// allowed here so that `validate` can report them.
    fn check_invariants(&self) -> Result<(), ModelError> {
        if self.colorspace != COLORSPACE {
            return Err(ModelError::Invariant(format!("colorspace {:?}, expected {COLORSPACE:?}", self.colorspace)));
        }
        if self.classes.len() > MAX_CLASSES {
            return Err(ModelError::TooManyClasses);
        }
        let mut seen = BTreeSet::new();
        for class in &self.classes {
            check_label(&class.label)?;
            if !seen.insert(class.label.as_str()) {
                return Err(ModelError::Invariant(format!("duplicate class label {:?}", class.label)));
            }
            for c in &class.centroids {
                if !c.lab.is_finite() || !c.radius.is_finite() || c.radius < 0.0 || c.weight == 0 {
                    return Err(ModelError::Invariant(format!("class {:?} has an invalid centroid entry", class.label)));
                }
            }
        }
        self.check_collisions()
    }

    /// Diagnostics for operators; an empty list means the model is clean.
    pub fn validate(&self) -> Vec<Issue> {
        let mut issues = Vec::new();
        let mut error = |message: String| issues.push(Issue { severity: Severity::Error, message });
        if let Err(e) = self.check_invariants() {
            error(e.to_string());
        }
        for class in &self.classes {
            if class.centroids.is_empty() {
                error(format!("class {:?} has no centroids", class.label));
            }
        }
        if self.centroid_count() > 0 && self.provenance.is_empty() {
            issues.push(Issue {
                severity: Severity::Warning,
                message: "centroids present but no training windows recorded".into(),
            });
        }
        for (i, ci) in self.classes.iter().enumerate() {
            for cj in &self.classes[i + 1..] {
                for a in &ci.centroids {
                    for b in &cj.centroids {
                        let d = delta_e(a.lab, b.lab);
                        let message = if d < AMBIGUITY_DE {
                            format!("classes {:?} and {:?} have centroids only {d:.2} ΔE apart; classification between them is ambiguous", ci.label, cj.label)
                        } else if d < a.radius + b.radius {
                            format!("acceptance radii of {:?} ({:.2}) and {:?} ({:.2}) overlap at distance {d:.2} ΔE", ci.label, a.radius, cj.label, b.radius)
                        } else {
                            continue;
                        };
                        issues.push(Issue { severity: Severity::Warning, message });
                    }
                }
            }
        }
        issues
    }

    pub fn has_errors(&self) -> bool {
        self.validate().iter().any(|i| i.severity == Severity::Error)
    }

    /// Canonical pretty-printed JSON: fixed key order, trailing newline.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("model serialization is infallible");
        out.push(b'\n');
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<ColorModel, ModelError> {
        let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| ModelError::Parse(e.to_string()))?;
        let Some(obj) = value.as_object() else {
            return Err(ModelError::Schema("top level must be an object".into()));
        };
        match obj.get("version") {
            None => return Err(ModelError::Schema("missing field `version`".into())),
            Some(v) if v.as_u64().is_some_and(|n| SUPPORTED_VERSIONS.contains(&(n as u32)) && n <= u32::MAX as u64) => {}
            Some(v) => {
                let found = v.as_str().map_or_else(|| v.to_string(), str::to_string);
                return Err(ModelError::UnsupportedVersion { found, supported: SUPPORTED_VERSIONS.to_vec() });
            }
        }
        let model: ColorModel = serde_json::from_value(value).map_err(|e| ModelError::Schema(e.to_string()))?;
        model.check_invariants()?;
        Ok(model)
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.serialize()))
    }
}

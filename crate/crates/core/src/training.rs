//! Non-interactive training: a project file lists pages and windows, and each
//! window is clustered and folded into the model exactly as an operator would.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{cluster_window, ClusterConfig, ClusterError, ClusterResult};
use crate::colorlab::{srgb_to_lab, Rgb8};
use crate::io::{load_image, IoError};
use crate::model::{ColorModel, LabelAssignment, ModelError, Provenance};
use crate::raster::{window_points, Image, Rect};

pub const DEFAULT_SEED: u64 = 42;
/// Environment variable that overrides [`DEFAULT_SEED`].
pub const SEED_ENV: &str = "CHROMAPLANE_SEED";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid project: {0}")]
    Project(String),
    #[error("window {window} refers to unknown document {doc:?}")]
    UnknownDocument { window: usize, doc: String },
    #[error("window {rect} does not fit the {width}x{height} image")]
    RectOutOfBounds { rect: Rect, width: u32, height: u32 },
    #[error("window {0} has neither `labels` nor `hints`")]
    MissingLabels(usize),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Seed from `CHROMAPLANE_SEED` if set and numeric, else [`DEFAULT_SEED`].
pub fn default_seed() -> u64 {
    std::env::var(SEED_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(DEFAULT_SEED)
}

/// How the clusters of one window get their class names.
#[derive(Debug, Clone, PartialEq)]
pub enum Labeling {
    /// Centroid index -> label, as an operator would pick after seeing the swatches.
    Explicit(LabelAssignment),
    /// Each centroid takes the label of the nearest reference color.
    Hints(Vec<(String, Rgb8)>),
}

impl Labeling {
    fn assignment(&self, cr: &ClusterResult) -> LabelAssignment {
        match self {
            Labeling::Explicit(a) => a.clone(),
            Labeling::Hints(h) => {
                let hints: Vec<_> = h.iter().map(|(l, c)| (l.clone(), srgb_to_lab(*c))).collect();
                LabelAssignment::from_hints(cr, &hints)
            }
        }
    }
}

/// Clusters `rect` of `img` into `k` colors and adds them to `model`.
pub fn train_window(
    model: &ColorModel,
    doc: &str,
    img: &Image,
    rect: Rect,
    k: usize,
    seed: u64,
    labeling: &Labeling,
) -> Result<(ColorModel, ClusterResult), TrainError> {
    if !rect.fits(img.width(), img.height()) {
        return Err(TrainError::RectOutOfBounds { rect, width: img.width(), height: img.height() });
    }
    let cr = cluster_window(&window_points(img, rect), k, seed, &model.config)?;
    let asg = labeling.assignment(&cr);
    let win = Provenance { doc: doc.to_string(), rect, k, seed };
    let next = model.add_training_window(win, &cr, &asg)?;
    Ok((next, cr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectDocument {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectWindow {
    pub doc: String,
    pub rect: Rect,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Centroid index -> label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelAssignment>,
    /// Label -> reference color; centroids take the nearest one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hints: Option<BTreeMap<String, Rgb8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Project {
    pub documents: Vec<ProjectDocument>,
    pub windows: Vec<ProjectWindow>,
    #[serde(default)]
    pub config: ClusterConfig,
    /// Base seed; window `i` without its own seed uses `seed + i`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Project {
    pub fn load(path: impl AsRef<Path>) -> Result<Project, TrainError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
        let mut p: Project = serde_json::from_slice(&bytes).map_err(|e| TrainError::Project(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for d in &mut p.documents {
            if d.path.is_relative() {
                d.path = base.join(&d.path);
            }
        }
        Ok(p)
    }

    /// Replays every window in order, starting from an empty model.
    pub fn train(&self, default_seed: u64) -> Result<ColorModel, TrainError> {
        let mut images: BTreeMap<&str, Image> = BTreeMap::new();
        for d in &self.documents {
            if images.contains_key(d.id.as_str()) {
                return Err(TrainError::Project(format!("duplicate document id {:?}", d.id)));
            }
            images.insert(&d.id, load_image(&d.path)?);
        }
        self.train_with(&images, default_seed)
    }

    /// Like [`Project::train`] with pages already decoded, keyed by document id.
    pub fn train_with(&self, images: &BTreeMap<&str, Image>, default_seed: u64) -> Result<ColorModel, TrainError> {
        let base = self.seed.unwrap_or(default_seed);
        let mut model = ColorModel::new(self.config.clone());
        for (i, w) in self.windows.iter().enumerate() {
            let img = images
                .get(w.doc.as_str())
                .ok_or_else(|| TrainError::UnknownDocument { window: i, doc: w.doc.clone() })?;
            let labeling = match (&w.labels, &w.hints) {
                (Some(l), _) => Labeling::Explicit(l.clone()),
                (None, Some(h)) => Labeling::Hints(h.iter().map(|(l, c)| (l.clone(), *c)).collect()),
                (None, None) => return Err(TrainError::MissingLabels(i)),
            };
            let seed = w.seed.unwrap_or(base.wrapping_add(i as u64));
            model = train_window(&model, &w.doc, img, w.rect, w.k, seed, &labeling)?.0;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::save_png;

    fn page() -> Image {
        let mut img = Image::from_pixel(40, 40, image::Rgb([250, 250, 245]));
        for y in 10..20 {
            for x in 5..35 {
                img.put_pixel(x, y, image::Rgb([20, 20, 30]));
            }
        }
        img
    }

    #[test]
    fn project_trains_from_hints_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        save_png(&page(), dir.path().join("p.png")).unwrap();
        let json = r##"{
            "documents": [{"id": "p1", "path": "p.png"}],
            "windows": [
                {"doc": "p1", "rect": [0, 0, 40, 30], "k": 2, "hints": {"paper": "#ffffff", "ink": "#000000"}},
                {"doc": "p1", "rect": [0, 30, 40, 10], "k": 1, "labels": {"0": "paper"}}
            ]
        }"##;
        fs::write(dir.path().join("proj.json"), json).unwrap();
        let project = Project::load(dir.path().join("proj.json")).unwrap();
        let m = project.train(7).unwrap();
        let mut labels = m.labels();
        labels.sort();
        assert_eq!(labels, ["ink", "paper"]);
        assert_eq!(m.provenance.len(), 2);
        assert_eq!(m.provenance[0].seed, 7);
        assert_eq!(m.provenance[1].seed, 8);
        let paper = &m.classes[m.class_index("paper").unwrap()];
        assert_eq!(paper.centroids.len(), 1, "same paper color twice merges");
        // deterministic
        assert_eq!(project.train(7).unwrap().serialize(), m.serialize());
    }

    #[test]
    fn project_errors() {
        let imgs = BTreeMap::from([("p1", page())]);
        let mut project = Project {
            documents: vec![],
            windows: vec![ProjectWindow { doc: "zz".into(), rect: Rect::new(0, 0, 4, 4), k: 1, seed: None, labels: None, hints: None }],
            config: ClusterConfig::default(),
            seed: None,
        };
        assert!(matches!(project.train_with(&imgs, 1), Err(TrainError::UnknownDocument { .. })));
        project.windows[0].doc = "p1".into();
        assert!(matches!(project.train_with(&imgs, 1), Err(TrainError::MissingLabels(0))));
        project.windows[0].labels = Some(LabelAssignment::from_labels(["x"]));
        project.windows[0].rect = Rect::new(30, 30, 20, 20);
        assert!(matches!(project.train_with(&imgs, 1), Err(TrainError::RectOutOfBounds { .. })));
    }
}

//! Operator-trained color segmentation of scanned document pages.
//!
//! A few free-size windows on sample pages are clustered with k-means and
//! named by an operator; the resulting [`ColorModel`] then splits whole
//! batches of pages into per-class color planes, flagging pages whose
//! colors the model does not know.

pub mod cluster;
pub mod colorlab;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod segment;
pub mod synth;
pub mod training;

pub use cluster::{cluster_window, estimate_radius, kmeans_pp_init, lloyd, ClusterConfig, ClusterError, ClusterResult, PointSet};
pub use colorlab::{delta_e, lab_to_srgb, srgb_to_lab, LabColor, Rgb8};
pub use io::{decode_image, load_image, DecodeError, IoError};
pub use model::{merge_centroids, ColorClass, ColorModel, Issue, LabelAssignment, ModelError, Provenance, Severity};
pub use pipeline::{route_flagged, run_batch, BatchReport, Manifest, ManifestEntry, PipelineError, RetrainQueue};
pub use raster::{Image, Rect};
pub use segment::{
    classify_pixel, extract_plane, novelty_report, segment_image, smooth_labels, Classifier, Label, LabelMap, NoveltyVerdict, PlaneStyle,
    SegmentError, SegmentOptions, SegmentationResult,
};
pub use synth::{degrade, generate_document, score, DegradationSpec, PageSpec};
pub use training::{train_window, Labeling, Project, TrainError};

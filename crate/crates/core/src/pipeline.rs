//! Batch application of a model to a manifest of pages, the line-delimited
//! report, and the retraining queue for flagged documents.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{encode_gray_png, encode_png, load_image, write_atomic, IoError};
use crate::model::{ColorModel, UNKNOWN_LABEL};
use crate::raster::Image;
use crate::segment::{extract_plane, novelty_report, segment_image, Label, PlaneStyle, SegmentOptions, SegmentationResult, Suggestion};

pub const REPORT_FILE: &str = "report.jsonl";
pub const LABEL_MAP_FILE: &str = "labels.png";
pub const LEGEND_FILE: &str = "legend.json";
pub const QUEUE_FILE: &str = "retrain-queue.json";
pub const QUEUE_VERSION: u32 = 1;
/// Seed for clustering UNKNOWN pixels into suggestions.
pub const NOVELTY_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("output directory {path} is not writable: {reason}")]
    OutputDir { path: PathBuf, reason: String },
    #[error("could not start worker pool: {0}")]
    Workers(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default = "SegmentOptions::batch")]
    pub options: SegmentOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// Document ids double as directory names, so they are restricted to a safe alphabet.
pub fn check_document_id(id: &str) -> Result<(), String> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(format!("document id {id:?} must be non-empty, use only [A-Za-z0-9._-] and not start with '.'"))
    }
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, options: SegmentOptions) -> Self {
        Self { entries, options, out_dir: None }
    }

    /// Reads a manifest; relative entry paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest, PipelineError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
        let mut m: Manifest = serde_json::from_slice(&bytes).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut m.entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            check_document_id(&e.id).map_err(PipelineError::Manifest)?;
            if !seen.insert(e.id.as_str()) {
                return Err(PipelineError::Manifest(format!("duplicate document id {:?}", e.id)));
            }
            if e.path.as_os_str().is_empty() {
                return Err(PipelineError::Manifest(format!("document {:?} has an empty path", e.id)));
            }
        }
        if !(self.options.flag_threshold >= 0.0 && self.options.flag_threshold <= 1.0) {
            return Err(PipelineError::Manifest("flag_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Error,
}

/// One report line per manifest entry, in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRow {
    pub index: usize,
    pub id: String,
    pub source: PathBuf,
    pub status: RowStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Pixel counts keyed by class label, plus `UNKNOWN`.
    pub histogram: BTreeMap<String, u64>,
    pub unknown_fraction: f64,
    pub flagged: bool,
    pub timing_ms: f64,
    /// Output files relative to the batch output directory.
    pub label_map: Option<String>,
    pub planes: Vec<String>,
    pub suggestions: Vec<Suggestion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub processed: usize,
    pub flagged: usize,
    pub unflagged: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub rows: Vec<DocumentRow>,
    pub totals: Totals,
    pub model_fingerprint: String,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ReportLine<'a> {
    Document(&'a DocumentRow),
    Summary { totals: &'a Totals, model_fingerprint: &'a str },
}

impl BatchReport {
    pub fn flagged_ids(&self) -> Vec<&str> {
        self.rows.iter().filter(|r| r.flagged).map(|r| r.id.as_str()).collect()
    }

    /// JSON lines: one `document` record per row then a `summary` footer.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for row in &self.rows {
            serde_json::to_writer(&mut out, &ReportLine::Document(row)).expect("serializable");
            out.push(b'\n');
        }
        let summary = ReportLine::Summary { totals: &self.totals, model_fingerprint: &self.model_fingerprint };
        serde_json::to_writer(&mut out, &summary).expect("serializable");
        out.push(b'\n');
        out
    }
}

/// File-name-safe rendering of a class label.
fn plane_file_name(index: Option<usize>, label: &str) -> String {
    let safe: String = label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    match index {
        Some(i) => format!("{i:02}_{safe}.png"),
        None => format!("{UNKNOWN_LABEL}.png"),
    }
}

/// Label index -> name, in model class order, with 255 for UNKNOWN.
pub fn legend(model: &ColorModel) -> BTreeMap<u8, String> {
    let mut out: BTreeMap<u8, String> = model.labels().iter().enumerate().map(|(i, l)| (i as u8, l.to_string())).collect();
    out.insert(Label::UNKNOWN.raw(), UNKNOWN_LABEL.to_string());
    out
}

fn probe_output_dir(dir: &Path) -> Result<(), PipelineError> {
    let fail = |e: std::io::Error| PipelineError::OutputDir { path: dir.to_path_buf(), reason: e.to_string() };
    fs::create_dir_all(dir).map_err(fail)?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(fail)?;
    fs::remove_file(&probe).map_err(fail)
}

fn process_entry(model: &ColorModel, entry: &ManifestEntry, index: usize, opt: &SegmentOptions, out_dir: &Path) -> DocumentRow {
    let mut row = DocumentRow {
        index,
        id: entry.id.clone(),
        source: entry.path.clone(),
        status: RowStatus::Ok,
        error: None,
        histogram: BTreeMap::new(),
        unknown_fraction: 0.0,
        flagged: false,
        timing_ms: 0.0,
        label_map: None,
        planes: Vec::new(),
        suggestions: Vec::new(),
    };
    if let Err(e) = segment_entry(model, entry, opt, out_dir, &mut row) {
        row.status = RowStatus::Error;
        row.error = Some(e);
        row.histogram.clear();
        row.flagged = false;
        row.planes.clear();
        row.label_map = None;
    }
    row
}

fn segment_entry(model: &ColorModel, entry: &ManifestEntry, opt: &SegmentOptions, out_dir: &Path, row: &mut DocumentRow) -> Result<(), String> {
    let img = load_image(&entry.path).map_err(|e| e.to_string())?;
    let result = segment_image(model, &img, opt).map_err(|e| e.to_string())?;
    row.histogram = result.histogram.named(model);
    row.unknown_fraction = result.unknown_fraction;
    row.flagged = result.flagged;
    row.timing_ms = result.timing_ms;
    if result.flagged {
        row.suggestions = novelty_report(&result, model, &img, NOVELTY_SEED).map_err(|e| e.to_string())?.suggestions;
    }

    let doc_dir = out_dir.join(&entry.id);
    let planes = write_document_outputs(model, &img, &result, &doc_dir, opt.planes_for_flagged)?;
    let rel = |name: &str| format!("{}/{name}", entry.id);
    row.label_map = Some(rel(LABEL_MAP_FILE));
    row.planes = planes.iter().map(|p| rel(p)).collect();
    Ok(())
}

/// Writes `labels.png` and one plane per class (plus `UNKNOWN.png` when any
/// pixel is unknown) into `dir`. Flagged results get no planes unless
/// `planes_for_flagged`. Returns the plane file names.
pub fn write_document_outputs(
    model: &ColorModel,
    img: &Image,
    result: &SegmentationResult,
    dir: &Path,
    planes_for_flagged: bool,
) -> Result<Vec<String>, String> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    write_atomic(dir.join(LABEL_MAP_FILE), &encode_gray_png(&result.labels.to_gray())).map_err(|e| e.to_string())?;
    let mut written = Vec::new();
    if result.flagged && !planes_for_flagged {
        return Ok(written);
    }
    let mut targets: Vec<(Label, String)> =
        model.labels().iter().enumerate().map(|(i, l)| (Label::class(i), plane_file_name(Some(i), l))).collect();
    if result.histogram.unknown > 0 {
        targets.push((Label::UNKNOWN, plane_file_name(None, UNKNOWN_LABEL)));
    }
    for (label, name) in targets {
        let plane = extract_plane(img, &result.labels, label, PlaneStyle::OriginalOnWhite).map_err(|e| e.to_string())?;
        write_atomic(dir.join(&name), &encode_png(&plane)).map_err(|e| e.to_string())?;
        written.push(name);
    }
    Ok(written)
}

/// Segments every manifest entry on `workers` threads and writes planes,
/// label maps, `legend.json` and `report.jsonl` under `out_dir`.
/// A failing document produces an error row; only an unusable output
/// directory aborts the batch.
pub fn run_batch(model: &ColorModel, manifest: &Manifest, out_dir: &Path, workers: usize) -> Result<BatchReport, PipelineError> {
    manifest.validate()?;
    probe_output_dir(out_dir)?;
    let legend_json = serde_json::to_vec_pretty(&legend(model)).expect("serializable");
    write_atomic(out_dir.join(LEGEND_FILE), &legend_json)?;

    let workers = workers.max(1);
    let mut opt = manifest.options.clone();
    if workers > 1 {
        opt.parallel = false;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Workers(e.to_string()))?;
    let rows: Vec<DocumentRow> = pool.install(|| {
        manifest
            .entries
            .par_iter()
            .enumerate()
            .map(|(i, e)| process_entry(model, e, i, &opt, out_dir))
            .collect()
    });

    let failed = rows.iter().filter(|r| r.status == RowStatus::Error).count();
    let flagged = rows.iter().filter(|r| r.flagged).count();
    let totals = Totals { processed: rows.len(), flagged, unflagged: rows.len() - flagged - failed, failed };
    let report = BatchReport { rows, totals, model_fingerprint: model.fingerprint() };
    write_atomic(out_dir.join(REPORT_FILE), &report.to_jsonl())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueEntry {
    pub doc: String,
    pub source: PathBuf,
    pub unknown_fraction: f64,
    pub suggestions: Vec<Suggestion>,
}

/// Flagged documents awaiting an operator, with suggested new-class seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainQueue {
    pub version: u32,
    pub model_fingerprint: String,
    pub entries: Vec<QueueEntry>,
}

impl RetrainQueue {
    pub fn from_report(report: &BatchReport) -> Self {
        Self {
            version: QUEUE_VERSION,
            model_fingerprint: report.model_fingerprint.clone(),
            entries: report
                .rows
                .iter()
                .filter(|r| r.flagged)
                .map(|r| QueueEntry {
                    doc: r.id.clone(),
                    source: r.source.clone(),
                    unknown_fraction: r.unknown_fraction,
                    suggestions: r.suggestions.clone(),
                })
                .collect(),
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, String> {
        let q: RetrainQueue = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
        if q.version != QUEUE_VERSION {
            return Err(format!("unsupported queue version {}; supported: [{QUEUE_VERSION}]", q.version));
        }
        Ok(q)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("serializable");
        out.push(b'\n');
        out
    }
}

/// Writes the retraining queue file (present even when nothing was flagged).
pub fn route_flagged(report: &BatchReport, path: impl AsRef<Path>) -> Result<RetrainQueue, PipelineError> {
    let queue = RetrainQueue::from_report(report);
    write_atomic(path, &queue.to_bytes())?;
    Ok(queue)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::ClusterConfig;
    use crate::colorlab::{srgb_to_lab, Rgb8};
    use crate::io::save_png;
    use crate::model::{CentroidEntry, ColorClass};
    use crate::raster::Image;

    fn model() -> ColorModel {
        let mut m = ColorModel::new(ClusterConfig::default());
        for (label, c) in [("paper", Rgb8::WHITE), ("ink/black", Rgb8::BLACK)] {
            m.classes.push(ColorClass { label: label.into(), centroids: vec![CentroidEntry { lab: srgb_to_lab(c), radius: 5.0, weight: 1 }] });
        }
        m
    }

    fn write_pages(dir: &Path) -> Vec<ManifestEntry> {
        let clean = Image::from_pixel(20, 10, image::Rgb([255, 255, 255]));
        let mut novel = clean.clone();
        for x in 0..10 {
            novel.put_pixel(x, 0, image::Rgb([0, 180, 0]));
        }
        save_png(&clean, dir.join("a.png")).unwrap();
        save_png(&novel, dir.join("b.png")).unwrap();
        fs::write(dir.join("c.png"), b"garbage").unwrap();
        ["a", "b", "c"].iter().map(|id| ManifestEntry { id: id.to_string(), path: dir.join(format!("{id}.png")) }).collect()
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_batch(&model(), &Manifest::new(vec![], SegmentOptions::default()), dir.path(), 2).unwrap();
        assert_eq!(r.totals, Totals::default());
        assert!(dir.path().join(REPORT_FILE).exists());
    }

    #[test]
    fn batch_isolates_failures_and_routes_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let entries = write_pages(dir.path());
        let out = dir.path().join("out");
        let r = run_batch(&model(), &Manifest::new(entries, SegmentOptions::default()), &out, 2).unwrap();
        assert_eq!(r.totals, Totals { processed: 3, flagged: 1, unflagged: 1, failed: 1 });
        assert_eq!(r.flagged_ids(), ["b"]);
        assert_eq!(r.rows[2].status, RowStatus::Error);
        assert!(r.rows[0].planes.contains(&"a/01_ink_black.png".to_string()));
        assert!(r.rows[1].planes.is_empty(), "flagged docs skip planes by default");
        assert!(out.join("b/labels.png").exists());
        assert!(out.join("a/00_paper.png").exists());

        let lines: Vec<serde_json::Value> = fs::read_to_string(out.join(REPORT_FILE))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3]["type"], "summary");
        assert_eq!(lines[3]["totals"]["processed"], 3);
        assert_eq!(lines[1]["histogram"]["UNKNOWN"], 10);

        let legend: BTreeMap<String, String> = serde_json::from_slice(&fs::read(out.join(LEGEND_FILE)).unwrap()).unwrap();
        assert_eq!(legend["255"], "UNKNOWN");
        assert_eq!(legend["1"], "ink/black");

        let q = route_flagged(&r, out.join(QUEUE_FILE)).unwrap();
        assert_eq!(q.entries.len(), 1);
        assert_eq!(q.entries[0].doc, "b");
        assert!(!q.entries[0].suggestions.is_empty());
        assert_eq!(RetrainQueue::parse(&fs::read(out.join(QUEUE_FILE)).unwrap()).unwrap(), q);
    }

    #[test]
    fn queue_file_exists_when_nothing_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_batch(&model(), &Manifest::new(vec![], SegmentOptions::default()), dir.path(), 1).unwrap();
        let q = route_flagged(&r, dir.path().join(QUEUE_FILE)).unwrap();
        assert!(q.entries.is_empty());
        assert!(RetrainQueue::parse(&fs::read(dir.path().join(QUEUE_FILE)).unwrap()).unwrap().entries.is_empty());
    }

    #[test]
    fn unwritable_output_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = run_batch(&model(), &Manifest::new(vec![], SegmentOptions::default()), &blocker.join("sub"), 1).unwrap_err();
        assert!(matches!(err, PipelineError::OutputDir { .. }));
    }

    #[test]
    fn manifest_validation() {
        let e = |id: &str| ManifestEntry { id: id.into(), path: "x.png".into() };
        assert!(Manifest::new(vec![e("a"), e("a")], SegmentOptions::default()).validate().is_err());
        assert!(Manifest::new(vec![e("../x")], SegmentOptions::default()).validate().is_err());
        assert!(Manifest::new(vec![e("page-1.v2")], SegmentOptions::default()).validate().is_ok());
        let mut m = Manifest::new(vec![e("a")], SegmentOptions::default());
        m.entries[0].path = PathBuf::new();
        assert!(m.validate().is_err());
    }

    #[test]
    fn manifest_paths_resolve_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.json"), r#"{"entries": [{"id": "a", "path": "pages/a.png"}]}"#).unwrap();
        let m = Manifest::load(dir.path().join("m.json")).unwrap();
        assert_eq!(m.entries[0].path, dir.path().join("pages/a.png"));
        assert_eq!(m.options, SegmentOptions::batch());
    }
}

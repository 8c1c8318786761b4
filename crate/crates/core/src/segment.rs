//! Applying a color model to whole pages: per-pixel nearest-centroid
//! classification with radius-based novelty, optional majority smoothing,
//! color-plane extraction and the flagged verdict.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{cluster_window, ClusterError, PointSet};
use crate::colorlab::{lab_to_srgb, squared_distance, srgb_to_lab, LabColor, LabLut, Rgb8};
use crate::model::{merge_centroids, CentroidEntry, ColorClass, ColorModel, UNKNOWN_LABEL};
use crate::raster::Image;

/// Rows per work unit when a page is split into bands.
const BAND_ROWS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentError {
    #[error("the color model has no centroids")]
    EmptyModel,
    #[error("the image is empty")]
    EmptyImage,
    #[error("image of {width}x{height} pixels is too large")]
    DimensionOverflow { width: u32, height: u32 },
    #[error("label map is {map_w}x{map_h} but the image is {img_w}x{img_h}")]
    DimensionMismatch { map_w: u32, map_h: u32, img_w: u32, img_h: u32 },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("smoothing radius must be at least 1")]
    InvalidRadius,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// Per-pixel class: an index into the model's class list, or UNKNOWN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(u8);

impl Label {
    pub const UNKNOWN: Label = Label(255);

    /// Panics if `index` collides with the UNKNOWN code.
    pub fn class(index: usize) -> Label {
        assert!(index < 255, "class index {index} out of range");
        Label(index as u8)
    }

    pub const fn from_raw(raw: u8) -> Label {
        Label(raw)
    }

    pub const fn raw(self) -> u8 {
        self.0
    }

    pub fn is_unknown(self) -> bool {
        self == Self::UNKNOWN
    }

    pub fn index(self) -> Option<usize> {
        (!self.is_unknown()).then_some(self.0 as usize)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index() {
            Some(i) => write!(f, "#{i}"),
            None => f.write_str(UNKNOWN_LABEL),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    labels: Vec<Label>,
}

impl LabelMap {
    pub fn filled(width: u32, height: u32, label: Label) -> Self {
        Self { width, height, labels: vec![label; width as usize * height as usize] }
    }

    pub fn from_labels(width: u32, height: u32, labels: Vec<Label>) -> Option<Self> {
        (labels.len() == width as usize * height as usize).then_some(Self { width, height, labels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Label {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, label: Label) {
        self.labels[y as usize * self.width as usize + x as usize] = label;
    }

    /// Rewrites class indices through `mapping` (old index -> new label); UNKNOWN stays UNKNOWN.
    pub fn remap(&self, mapping: &[Label]) -> LabelMap {
        let labels = self
            .labels
            .iter()
            .map(|l| l.index().and_then(|i| mapping.get(i).copied()).unwrap_or(Label::UNKNOWN))
            .collect();
        LabelMap { width: self.width, height: self.height, labels }
    }

    /// Single-channel image holding raw label codes (UNKNOWN = 255).
    pub fn to_gray(&self) -> image::GrayImage {
        image::GrayImage::from_raw(self.width, self.height, self.labels.iter().map(|l| l.raw()).collect())
            .expect("buffer length matches dimensions")
    }

    pub fn from_gray(img: &image::GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            labels: img.as_raw().iter().map(|&v| Label::from_raw(v)).collect(),
        }
    }

    pub fn histogram(&self, classes: usize) -> Histogram {
        let mut counts = [0u64; 256];
        for l in &self.labels {
            counts[l.raw() as usize] += 1;
        }
        Histogram {
            per_class: counts[..classes.min(255)].to_vec(),
            unknown: counts[255] + counts[classes.min(255)..255].iter().sum::<u64>(),
        }
    }
}

/// Pixel counts per class plus the UNKNOWN bucket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub per_class: Vec<u64>,
    pub unknown: u64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.per_class.iter().sum::<u64>() + self.unknown
    }

    pub fn get(&self, label: Label) -> u64 {
        match label.index() {
            Some(i) => self.per_class.get(i).copied().unwrap_or(0),
            None => self.unknown,
        }
    }

    /// Counts keyed by class name, with the UNKNOWN bucket last.
    pub fn named(&self, model: &ColorModel) -> BTreeMap<String, u64> {
        let mut out: BTreeMap<String, u64> = model.labels().into_iter().map(str::to_string).zip(self.per_class.iter().copied()).collect();
        out.insert(UNKNOWN_LABEL.to_string(), self.unknown);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conversion {
    #[default]
    Exact,
    /// 32³ nearest-node lookup table; approximate.
    Lut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentOptions {
    /// 0 disables majority smoothing.
    pub smooth_radius: u32,
    /// Documents with an UNKNOWN fraction strictly above this are flagged.
    pub flag_threshold: f64,
    /// Replaces every learned radius when set.
    pub radius_override: Option<f64>,
    pub conversion: Conversion,
    /// Split the page into row bands processed on the rayon pool.
    pub parallel: bool,
    /// Write planes even for flagged documents.
    pub planes_for_flagged: bool,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            smooth_radius: 0,
            flag_threshold: 0.01,
            radius_override: None,
            conversion: Conversion::Exact,
            parallel: true,
            planes_for_flagged: false,
        }
    }
}

impl SegmentOptions {
    /// Defaults for unattended batches: one majority pass against JPEG speckle.
    pub fn batch() -> Self {
        Self { smooth_radius: 1, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy)]
struct FlatCentroid {
    lab: LabColor,
    radius: f64,
    class: Label,
}

/// Nearest-centroid classifier flattened from a model, class order then centroid order.
#[derive(Debug, Clone)]
pub struct Classifier {
    entries: Vec<FlatCentroid>,
    classes: usize,
}

impl Classifier {
    pub fn new(model: &ColorModel, radius_override: Option<f64>) -> Result<Self, SegmentError> {
        let mut entries = Vec::new();
        for (i, class) in model.classes.iter().enumerate() {
            for c in &class.centroids {
                entries.push(FlatCentroid { lab: c.lab, radius: radius_override.unwrap_or(c.radius), class: Label::class(i) });
            }
        }
        if entries.is_empty() {
            return Err(SegmentError::EmptyModel);
        }
        Ok(Self { entries, classes: model.classes.len() })
    }

    pub fn class_count(&self) -> usize {
        self.classes
    }

    /// Globally nearest centroid; its class if within its radius, else UNKNOWN.
    /// The distance to that centroid is returned either way.
    #[inline]
    pub fn classify(&self, c: LabColor) -> (Label, f64) {
        let mut best = &self.entries[0];
        let mut best_d = squared_distance(c, best.lab);
        for e in &self.entries[1..] {
            let d = squared_distance(c, e.lab);
            if d < best_d {
                best = e;
                best_d = d;
            }
        }
        let dist = best_d.sqrt();
        if dist <= best.radius {
            (best.class, dist)
        } else {
            (Label::UNKNOWN, dist)
        }
    }
}

pub fn classify_pixel(model: &ColorModel, c: LabColor) -> Result<(Label, f64), SegmentError> {
    Ok(Classifier::new(model, None)?.classify(c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub labels: LabelMap,
    pub histogram: Histogram,
    pub unknown_fraction: f64,
    pub flagged: bool,
    pub timing_ms: f64,
}

fn classify_rows(img: &Image, classifier: &Classifier, lut: Option<&LabLut>, y0: u32, out: &mut [Label]) {
    let width = img.width() as usize;
    let raw = img.as_raw();
    for (row, labels) in out.chunks_mut(width).enumerate() {
        let start = (y0 as usize + row) * width * 3;
        let pixels = &raw[start..start + width * 3];
        // Scanned pages are dominated by runs of identical pixels; reuse the previous verdict.
        let mut prev: Option<([u8; 3], Label)> = None;
        for (px, slot) in pixels.chunks_exact(3).zip(labels.iter_mut()) {
            let rgb = [px[0], px[1], px[2]];
            *slot = match prev {
                Some((p, l)) if p == rgb => l,
                _ => {
                    let c = Rgb8::from(rgb);
                    let lab = match lut {
                        Some(t) => t.lookup(c),
                        None => srgb_to_lab(c),
                    };
                    let l = classifier.classify(lab).0;
                    prev = Some((rgb, l));
                    l
                }
            };
        }
    }
}

/// Classifies every pixel of `img` against `model`.
pub fn segment_image(model: &ColorModel, img: &Image, opt: &SegmentOptions) -> Result<SegmentationResult, SegmentError> {
    let started = Instant::now();
    let classifier = Classifier::new(model, opt.radius_override)?;
    let (width, height) = img.dimensions();
    if width == 0 || height == 0 {
        return Err(SegmentError::EmptyImage);
    }
    let total = (width as usize)
        .checked_mul(height as usize)
        .filter(|n| n.checked_mul(3).is_some())
        .ok_or(SegmentError::DimensionOverflow { width, height })?;

    let lut = (opt.conversion == Conversion::Lut).then(LabLut::new);
    let mut labels = vec![Label::UNKNOWN; total];
    let band = BAND_ROWS * width as usize;
    if opt.parallel {
        labels
            .par_chunks_mut(band)
            .enumerate()
            .for_each(|(i, out)| classify_rows(img, &classifier, lut.as_ref(), (i * BAND_ROWS) as u32, out));
    } else {
        classify_rows(img, &classifier, lut.as_ref(), 0, &mut labels);
    }
    let mut map = LabelMap { width, height, labels };
    if opt.smooth_radius > 0 {
        map = smooth_labels_with(&map, opt.smooth_radius, opt.parallel)?;
    }
    Ok(summarize(map, classifier.class_count(), opt.flag_threshold, started))
}

fn summarize(labels: LabelMap, classes: usize, threshold: f64, started: Instant) -> SegmentationResult {
    let histogram = labels.histogram(classes);
    let unknown_fraction = histogram.unknown as f64 / histogram.total() as f64;
    SegmentationResult {
        labels,
        histogram,
        unknown_fraction,
        flagged: unknown_fraction > threshold,
        timing_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

/// One majority-vote pass over each pixel's (2r+1)² neighborhood, clipped at
/// the borders. A label wins only with a strict plurality; ties keep the
/// original label.
pub fn smooth_labels(lm: &LabelMap, radius: u32) -> Result<LabelMap, SegmentError> {
    smooth_labels_with(lm, radius, true)
}

fn smooth_labels_with(lm: &LabelMap, radius: u32, parallel: bool) -> Result<LabelMap, SegmentError> {
    if radius == 0 {
        return Err(SegmentError::InvalidRadius);
    }
    let (w, h) = (lm.width as usize, lm.height as usize);
    let r = radius as usize;
    let mut out = vec![Label::UNKNOWN; lm.labels.len()];
    let smooth_row = |y: usize, row: &mut [Label]| {
        let mut counts = [0u32; 256];
        let mut touched: Vec<u8> = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        for (x, slot) in row.iter_mut().enumerate() {
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            for yy in y0..=y1 {
                for &l in &lm.labels[yy * w + x0..=yy * w + x1] {
                    if counts[l.0 as usize] == 0 {
                        touched.push(l.0);
                    }
                    counts[l.0 as usize] += 1;
                }
            }
            let own = lm.labels[y * w + x];
            let mut best = own.0;
            let mut best_count = 0;
            let mut tie = false;
            for &l in &touched {
                let c = counts[l as usize];
                if c > best_count {
                    best = l;
                    best_count = c;
                    tie = false;
                } else if c == best_count {
                    tie = true;
                }
            }
            *slot = if tie { own } else { Label(best) };
            for &l in &touched {
                counts[l as usize] = 0;
            }
            touched.clear();
        }
    };
    if parallel {
        out.par_chunks_mut(w).enumerate().for_each(|(y, row)| smooth_row(y, row));
    } else {
        out.chunks_mut(w).enumerate().for_each(|(y, row)| smooth_row(y, row));
    }
    Ok(LabelMap { width: lm.width, height: lm.height, labels: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlaneStyle {
    /// Pixels of the label keep their color; everything else is white.
    #[default]
    OriginalOnWhite,
    /// Label pixels black on white.
    Mask,
}

pub fn extract_plane(img: &Image, lm: &LabelMap, label: Label, style: PlaneStyle) -> Result<Image, SegmentError> {
    if img.dimensions() != (lm.width, lm.height) {
        return Err(SegmentError::DimensionMismatch { map_w: lm.width, map_h: lm.height, img_w: img.width(), img_h: img.height() });
    }
    let white = image::Rgb([255, 255, 255]);
    let mut out = Image::from_pixel(lm.width, lm.height, white);
    for ((src, dst), l) in img.pixels().zip(out.pixels_mut()).zip(&lm.labels) {
        if *l == label {
            *dst = match style {
                PlaneStyle::OriginalOnWhite => *src,
                PlaneStyle::Mask => image::Rgb([0, 0, 0]),
            };
        }
    }
    Ok(out)
}

/// Resolves a class name (or `UNKNOWN`) against the model.
pub fn label_by_name(model: &ColorModel, name: &str) -> Result<Label, SegmentError> {
    if name == UNKNOWN_LABEL {
        return Ok(Label::UNKNOWN);
    }
    model.class_index(name).map(Label::class).ok_or_else(|| SegmentError::UnknownLabel(name.to_string()))
}

/// A color cluster among the UNKNOWN pixels, offered as a seed for a new class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub lab: LabColor,
    pub hex: String,
    pub pixels: u64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyVerdict {
    pub flagged: bool,
    pub unknown_fraction: f64,
    pub unknown_pixels: u64,
    pub suggestions: Vec<Suggestion>,
}

/// Verdict for a segmented page. Flagged pages get up to three suggested
/// new-class centroids clustered from their UNKNOWN pixels.
pub fn novelty_report(result: &SegmentationResult, model: &ColorModel, img: &Image, seed: u64) -> Result<NoveltyVerdict, SegmentError> {
    let mut verdict = NoveltyVerdict {
        flagged: result.flagged,
        unknown_fraction: result.unknown_fraction,
        unknown_pixels: result.histogram.unknown,
        suggestions: Vec::new(),
    };
    if !result.flagged || result.histogram.unknown == 0 {
        return Ok(verdict);
    }
    if img.dimensions() != (result.labels.width, result.labels.height) {
        let lm = &result.labels;
        return Err(SegmentError::DimensionMismatch { map_w: lm.width, map_h: lm.height, img_w: img.width(), img_h: img.height() });
    }
    let mut colors: BTreeMap<[u8; 3], u64> = BTreeMap::new();
    for (px, l) in img.pixels().zip(&result.labels.labels) {
        if l.is_unknown() {
            *colors.entry(px.0).or_default() += 1;
        }
    }
    let points = colors.keys().map(|&c| srgb_to_lab(c.into())).collect();
    let ps = PointSet::weighted(points, colors.values().copied().collect())?;
    let mut k = ps.distinct_count().min(3);
    let cr = loop {
        match cluster_window(&ps, k, seed, &model.config) {
            Err(ClusterError::TooFewDistinct { .. }) if k > 1 => k -= 1,
            other => break other?,
        }
    };
    let seeds = ColorClass {
        label: "suggestion".into(),
        centroids: cr
            .centroids
            .iter()
            .zip(&cr.radii)
            .zip(&cr.counts)
            .map(|((&lab, &radius), &weight)| CentroidEntry { lab, radius, weight })
            .collect(),
    };
    let mut merged = merge_centroids(&seeds, model.config.merge_eps).centroids;
    merged.sort_by_key(|c| std::cmp::Reverse(c.weight));
    verdict.suggestions = merged
        .into_iter()
        .map(|c| Suggestion { lab: c.lab, hex: lab_to_srgb(c.lab).to_hex(), pixels: c.weight, radius: c.radius })
        .collect();
    Ok(verdict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::ClusterConfig;
    use crate::model::ColorClass;

    fn two_class_model() -> ColorModel {
        let mut m = ColorModel::new(ClusterConfig::default());
        m.classes = vec![
            ColorClass { label: "A".into(), centroids: vec![CentroidEntry { lab: LabColor::new(0.0, 0.0, 0.0), radius: 10.0, weight: 1 }] },
            ColorClass { label: "B".into(), centroids: vec![CentroidEntry { lab: LabColor::new(100.0, 0.0, 0.0), radius: 10.0, weight: 1 }] },
        ];
        m
    }

    fn l(i: u8) -> Label {
        Label::from_raw(i)
    }

    #[test]
    fn classify_examples() {
        let m = two_class_model();
        assert_eq!(classify_pixel(&m, LabColor::new(1.0, 0.0, 0.0)).unwrap(), (Label::class(0), 1.0));
        assert_eq!(classify_pixel(&m, LabColor::new(50.0, 0.0, 0.0)).unwrap(), (Label::UNKNOWN, 50.0));
        assert_eq!(classify_pixel(&m, LabColor::new(95.0, 0.0, 0.0)).unwrap(), (Label::class(1), 5.0));
        assert_eq!(
            classify_pixel(&ColorModel::new(ClusterConfig::default()), LabColor::default()).unwrap_err(),
            SegmentError::EmptyModel
        );
    }

    #[test]
    fn classify_tie_prefers_lower_class() {
        let mut m = two_class_model();
        m.classes[0].centroids[0].radius = 60.0;
        m.classes[1].centroids[0].radius = 60.0;
        assert_eq!(classify_pixel(&m, LabColor::new(50.0, 0.0, 0.0)).unwrap().0, Label::class(0));
    }

    #[test]
    fn radius_is_inclusive() {
        let m = two_class_model();
        assert_eq!(classify_pixel(&m, LabColor::new(10.0, 0.0, 0.0)).unwrap().0, Label::class(0));
    }

    fn image_of(w: u32, h: u32, c: Rgb8) -> Image {
        Image::from_pixel(w, h, c.into())
    }

    fn model_for(colors: &[(&str, Rgb8)]) -> ColorModel {
        let mut m = ColorModel::new(ClusterConfig::default());
        m.classes = colors
            .iter()
            .map(|(name, c)| ColorClass { label: name.to_string(), centroids: vec![CentroidEntry { lab: srgb_to_lab(*c), radius: 5.0, weight: 1 }] })
            .collect();
        m
    }

    #[test]
    fn uniform_known_image() {
        let m = model_for(&[("bg", Rgb8::WHITE), ("ink", Rgb8::BLACK)]);
        let r = segment_image(&m, &image_of(2, 2, Rgb8::BLACK), &SegmentOptions::default()).unwrap();
        assert_eq!(r.histogram, Histogram { per_class: vec![0, 4], unknown: 0 });
        assert_eq!(r.unknown_fraction, 0.0);
        assert!(!r.flagged);
    }

    #[test]
    fn novel_pixels_flag_the_page() {
        let m = model_for(&[("bg", Rgb8::WHITE), ("ink", Rgb8::BLACK)]);
        let mut img = image_of(100, 100, Rgb8::WHITE);
        for i in 0..200 {
            img.put_pixel(i % 100, i / 100, image::Rgb([0, 160, 0]));
        }
        let r = segment_image(&m, &img, &SegmentOptions::default()).unwrap();
        assert_eq!(r.histogram.unknown, 200);
        assert!((r.unknown_fraction - 0.02).abs() < 1e-12);
        assert!(r.flagged);

        let v = novelty_report(&r, &m, &img, 1).unwrap();
        assert!(v.flagged);
        assert_eq!(v.suggestions.len(), 1);
        assert!(crate::colorlab::delta_e(v.suggestions[0].lab, srgb_to_lab(Rgb8::new(0, 160, 0))) < 0.5);
        assert_eq!(v.suggestions[0].pixels, 200);
        assert_eq!(v.suggestions[0].hex, "#00a000");
    }

    #[test]
    fn clean_pages_have_no_suggestions() {
        let m = model_for(&[("bg", Rgb8::WHITE)]);
        let img = image_of(10, 10, Rgb8::WHITE);
        let r = segment_image(&m, &img, &SegmentOptions::default()).unwrap();
        let v = novelty_report(&r, &m, &img, 1).unwrap();
        assert!(!v.flagged && v.suggestions.is_empty() && v.unknown_fraction == 0.0);
    }

    #[test]
    fn flag_threshold_is_strict() {
        let m = model_for(&[("bg", Rgb8::WHITE)]);
        let mut img = image_of(10, 10, Rgb8::WHITE);
        img.put_pixel(0, 0, image::Rgb([255, 0, 0]));
        let opt = SegmentOptions { flag_threshold: 0.01, ..Default::default() };
        let r = segment_image(&m, &img, &opt).unwrap();
        assert_eq!(r.unknown_fraction, 0.01);
        assert!(!r.flagged);
    }

    #[test]
    fn segment_rejects_empty_inputs() {
        let m = model_for(&[("bg", Rgb8::WHITE)]);
        assert_eq!(segment_image(&m, &Image::new(0, 3), &SegmentOptions::default()).unwrap_err(), SegmentError::EmptyImage);
        let empty = ColorModel::new(ClusterConfig::default());
        assert_eq!(segment_image(&empty, &image_of(1, 1, Rgb8::WHITE), &SegmentOptions::default()).unwrap_err(), SegmentError::EmptyModel);
    }

    #[test]
    fn smoothing_rules() {
        let a = l(0);
        let mut lm = LabelMap::filled(3, 3, a);
        lm.set(1, 1, Label::UNKNOWN);
        assert_eq!(smooth_labels(&lm, 1).unwrap().get(1, 1), a);

        let uniform = LabelMap::filled(5, 4, l(2));
        assert_eq!(smooth_labels(&uniform, 1).unwrap(), uniform);

        // 4 A, 4 B around a C pixel: tie keeps C
        let labels = vec![a, l(1), a, l(1), l(2), l(1), a, l(1), a];
        let lm = LabelMap::from_labels(3, 3, labels).unwrap();
        assert_eq!(smooth_labels(&lm, 1).unwrap().get(1, 1), l(2));
        assert_eq!(smooth_labels(&lm, 0).unwrap_err(), SegmentError::InvalidRadius);
    }

    #[test]
    fn smoothing_clips_at_borders() {
        // corner pixel sees a 2x2 neighborhood: 3 A vs itself
        let mut lm = LabelMap::filled(4, 4, l(0));
        lm.set(0, 0, l(1));
        assert_eq!(smooth_labels(&lm, 1).unwrap().get(0, 0), l(0));
    }

    #[test]
    fn smoothing_radius_one_removes_speckle_from_segmentation() {
        let m = model_for(&[("bg", Rgb8::WHITE)]);
        let mut img = image_of(9, 9, Rgb8::WHITE);
        img.put_pixel(4, 4, image::Rgb([255, 0, 0]));
        let r = segment_image(&m, &img, &SegmentOptions { smooth_radius: 1, ..Default::default() }).unwrap();
        assert_eq!(r.histogram.unknown, 0);
    }

    #[test]
    fn planes() {
        let m = model_for(&[("bg", Rgb8::WHITE), ("ink", Rgb8::BLACK), ("red", Rgb8::new(200, 0, 0))]);
        let mut img = image_of(6, 5, Rgb8::WHITE);
        img.put_pixel(1, 1, image::Rgb([0, 0, 0]));
        img.put_pixel(2, 1, image::Rgb([0, 90, 200]));
        let r = segment_image(&m, &img, &SegmentOptions::default()).unwrap();

        let red = extract_plane(&img, &r.labels, label_by_name(&m, "red").unwrap(), PlaneStyle::OriginalOnWhite).unwrap();
        assert!(red.pixels().all(|p| p.0 == [255, 255, 255]));

        let mask = extract_plane(&img, &r.labels, Label::class(1), PlaneStyle::Mask).unwrap();
        let black = mask.pixels().filter(|p| p.0 == [0, 0, 0]).count() as u64;
        assert_eq!(black, r.histogram.get(Label::class(1)));

        // union of planes reconstructs the source
        let mut rebuilt = image_of(6, 5, Rgb8::WHITE);
        for label in [Label::class(0), Label::class(1), Label::class(2), Label::UNKNOWN] {
            let plane = extract_plane(&img, &r.labels, label, PlaneStyle::OriginalOnWhite).unwrap();
            for ((x, y, p), lab) in plane.enumerate_pixels().zip(r.labels.labels()) {
                if *lab == label {
                    rebuilt.put_pixel(x, y, *p);
                }
            }
        }
        assert_eq!(rebuilt, img);

        assert_eq!(label_by_name(&m, "nope").unwrap_err(), SegmentError::UnknownLabel("nope".into()));
        assert_eq!(label_by_name(&m, "UNKNOWN").unwrap(), Label::UNKNOWN);
        assert!(matches!(
            extract_plane(&image_of(2, 2, Rgb8::WHITE), &r.labels, Label::UNKNOWN, PlaneStyle::Mask),
            Err(SegmentError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn lut_mode_close_to_exact() {
        let m = model_for(&[("bg", Rgb8::WHITE), ("ink", Rgb8::BLACK)]);
        let img = image_of(50, 50, Rgb8::new(250, 250, 250));
        let exact = segment_image(&m, &img, &SegmentOptions::default()).unwrap();
        let lut = segment_image(&m, &img, &SegmentOptions { conversion: Conversion::Lut, ..Default::default() }).unwrap();
        assert_eq!(exact.labels, lut.labels);
    }

    #[test]
    fn label_map_gray_round_trip_and_remap() {
        let lm = LabelMap::from_labels(2, 2, vec![l(0), l(1), Label::UNKNOWN, l(0)]).unwrap();
        assert_eq!(LabelMap::from_gray(&lm.to_gray()), lm);
        assert_eq!(lm.to_gray().as_raw(), &vec![0, 1, 255, 0]);
        let swapped = lm.remap(&[l(1), l(0)]);
        assert_eq!(swapped.labels(), &[l(1), l(0), Label::UNKNOWN, l(1)]);
        assert!(LabelMap::from_labels(2, 2, vec![]).is_none());
    }
    mod props {
        use super::*;
        use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, ProptestConfig, Strategy};

        fn arb_image() -> impl Strategy<Value = Image> {
            // Few distinct colors so runs and ties actually occur.
            let palette = prop::collection::vec(any::<[u8; 3]>(), 1..5);
            (1u32..40, 1u32..80, palette, any::<u64>()).prop_map(|(w, h, colors, seed)| {
                let mut state = seed | 1;
                Image::from_fn(w, h, |_, _| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    image::Rgb(colors[(state % colors.len() as u64) as usize])
                })
            })
        }

        fn arb_model() -> impl Strategy<Value = ColorModel> {
            prop::collection::vec((any::<[u8; 3]>(), 0.0f64..40.0), 1..6).prop_map(|cs| {
                let mut m = ColorModel::new(ClusterConfig::default());
                for (i, (c, radius)) in cs.into_iter().enumerate() {
                    let lab = srgb_to_lab(Rgb8::new(c[0], c[1], c[2]));
                    m.classes.push(ColorClass { label: format!("c{i}"), centroids: vec![CentroidEntry { lab, radius, weight: 1 }] });
                }
                m
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn histogram_partitions_pixels(img in arb_image(), m in arb_model(), smooth in 0u32..3) {
                let r = segment_image(&m, &img, &SegmentOptions { smooth_radius: smooth, ..Default::default() }).unwrap();
                prop_assert_eq!(r.histogram.total(), img.width() as u64 * img.height() as u64);
                prop_assert_eq!(r.histogram.clone(), r.labels.histogram(m.classes.len()));
            }

            #[test]
            fn parallel_equals_sequential(img in arb_image(), m in arb_model(), smooth in 0u32..3) {
                let par = segment_image(&m, &img, &SegmentOptions { smooth_radius: smooth, parallel: true, ..Default::default() }).unwrap();
                let seq = segment_image(&m, &img, &SegmentOptions { smooth_radius: smooth, parallel: false, ..Default::default() }).unwrap();
                prop_assert_eq!(par.labels, seq.labels);
                prop_assert_eq!(par.histogram, seq.histogram);
            }

            #[test]
            fn planes_reconstruct_source(img in arb_image(), m in arb_model()) {
                let r = segment_image(&m, &img, &SegmentOptions::default()).unwrap();
                let mut rebuilt = Image::from_pixel(img.width(), img.height(), image::Rgb([255, 255, 255]));
                let labels = (0..m.classes.len()).map(Label::class).chain([Label::UNKNOWN]);
                for label in labels {
                    let plane = extract_plane(&img, &r.labels, label, PlaneStyle::OriginalOnWhite).unwrap();
                    for ((x, y, p), l) in plane.enumerate_pixels().zip(r.labels.labels()) {
                        if *l == label {
                            rebuilt.put_pixel(x, y, *p);
                        }
                    }
                }
                prop_assert_eq!(rebuilt, img);
            }

            #[test]
            fn larger_radii_never_add_unknowns(img in arb_image(), m in arb_model(), grow in 0.0f64..20.0) {
                let before = segment_image(&m, &img, &SegmentOptions::default()).unwrap();
                let mut wider = m.clone();
                for c in wider.classes.iter_mut().flat_map(|c| c.centroids.iter_mut()) {
                    c.radius += grow;
                }
                let after = segment_image(&wider, &img, &SegmentOptions::default()).unwrap();
                prop_assert!(after.unknown_fraction <= before.unknown_fraction);
            }

            #[test]
            fn flagged_iff_above_threshold(img in arb_image(), m in arb_model(), threshold in 0.0f64..1.0) {
                let r = segment_image(&m, &img, &SegmentOptions { flag_threshold: threshold, ..Default::default() }).unwrap();
                prop_assert_eq!(r.flagged, r.unknown_fraction > threshold);
                let at = segment_image(&m, &img, &SegmentOptions { flag_threshold: r.unknown_fraction, ..Default::default() }).unwrap();
                prop_assert!(!at.flagged);
            }
        }
    }
}

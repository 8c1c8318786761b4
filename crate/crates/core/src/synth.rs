//! Synthetic administrative pages with per-pixel ground truth, scan/JPEG
//! style degradations, and accuracy scoring against the truth map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorlab::Rgb8;
use crate::io::{decode_image, encode_jpeg, IoError};
use crate::raster::{Image, Rect};
use crate::segment::{Label, LabelMap};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("element {index} ({label}) lies outside the {width}x{height} page")]
    OutOfBounds { index: usize, label: String, width: u32, height: u32 },
    #[error("label {0:?} is not in the page's class list")]
    UnknownClass(String),
    #[error("page spec is invalid: {0}")]
    Invalid(String),
    #[error("label maps differ in size: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error(transparent)]
    Codec(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fill {
    Solid { color: Rgb8 },
    /// Linear blend from the top row to the bottom row.
    VerticalGradient { top: Rgb8, bottom: Rgb8 },
}

impl Fill {
    fn at_row(&self, y: u32, height: u32) -> Rgb8 {
        match *self {
            Fill::Solid { color } => color,
            Fill::VerticalGradient { top, bottom } => {
                let t = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
                let mix = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * t).round() as u8;
                Rgb8::new(mix(top.r, bottom.r), mix(top.g, bottom.g), mix(top.b, bottom.b))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Rect { rect: Rect },
    Disc { cx: u32, cy: u32, r: u32 },
    Ring { cx: u32, cy: u32, outer: u32, inner: u32 },
    /// `count` seeded short line segments inside `rect`, standing in for text.
    Strokes { rect: Rect, count: u32, length: u32, thickness: u32 },
}

impl Shape {
    fn bounds(&self) -> (i64, i64, i64, i64) {
        match *self {
            Shape::Rect { rect } | Shape::Strokes { rect, .. } => {
                (rect.x as i64, rect.y as i64, rect.x as i64 + rect.w as i64, rect.y as i64 + rect.h as i64)
            }
            Shape::Disc { cx, cy, r } | Shape::Ring { cx, cy, outer: r, .. } => {
                let (cx, cy, r) = (cx as i64, cy as i64, r as i64);
                (cx - r, cy - r, cx + r + 1, cy + r + 1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub shape: Shape,
    pub color: Rgb8,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageSpec {
    pub width: u32,
    pub height: u32,
    /// Class vocabulary; a label's position here is its index in the truth map.
    pub classes: Vec<String>,
    pub background: Fill,
    pub background_label: String,
    /// Painted in order; later elements cover earlier ones.
    pub elements: Vec<Element>,
    pub seed: u64,
}

pub const BACKGROUND: &str = "background";
pub const PRINTED_TEXT: &str = "printed_text";
pub const RUBBER_STAMP: &str = "rubber_stamp";
pub const HIGHLIGHT: &str = "highlight";

/// Reference colors of [`PageSpec::administrative`] pages.
pub mod palette {
    use crate::colorlab::Rgb8;

    pub const PAPER_TOP: Rgb8 = Rgb8::new(246, 244, 236);
    pub const PAPER_BOTTOM: Rgb8 = Rgb8::new(236, 238, 244);
    pub const INK: Rgb8 = Rgb8::new(28, 30, 38);
    pub const STAMP: Rgb8 = Rgb8::new(38, 72, 168);
    pub const HIGHLIGHT: Rgb8 = Rgb8::new(255, 236, 80);
}

impl PageSpec {
    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// A seeded administrative page: gradient paper, text blocks, highlighted
    /// lines with text on top, and a rubber stamp (ring plus inner strokes).
    pub fn administrative(width: u32, height: u32, seed: u64) -> PageSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let margin = width / 12;
        let usable_w = width - 2 * margin;
        let line_h = (height / 70).max(6);
        let mut elements = Vec::new();
        let text = |rect: Rect| Element {
            shape: Shape::Strokes {
                rect,
                count: (rect.area() / (line_h as u64 * line_h as u64 / 3).max(1)).max(1) as u32,
                length: line_h,
                thickness: (line_h / 4).max(2),
            },
            color: palette::INK,
            label: PRINTED_TEXT.into(),
        };

        let mut y = margin;
        let mut highlighted = 0;
        while y + 2 * line_h < height - margin {
            let w = rng.random_range(usable_w / 3..=usable_w);
            let row = Rect::new(margin, y, w, line_h);
            if rng.random_bool(0.15) || (highlighted == 0 && y > height / 2) {
                let pad = line_h / 3;
                elements.push(Element {
                    shape: Shape::Rect { rect: Rect::new(row.x, row.y - pad.min(row.y), row.w, row.h + 2 * pad) },
                    color: palette::HIGHLIGHT,
                    label: HIGHLIGHT.into(),
                });
                highlighted += 1;
            }
            if rng.random_bool(0.8) {
                let text_rect = Rect::new(row.x + 2, row.y + 2, row.w - 4, row.h - 4);
                elements.push(text(text_rect));
            }
            y += line_h * 2;
        }

        let outer = (width.min(height) / 9).max(8);
        let inner = outer - (outer / 8).max(2);
        let cx = rng.random_range(margin + outer..width - margin - outer);
        let cy = rng.random_range(height / 2..height - margin - outer);
        elements.push(Element { shape: Shape::Ring { cx, cy, outer, inner }, color: palette::STAMP, label: RUBBER_STAMP.into() });
        let half = inner * 2 / 3;
        elements.push(Element {
            shape: Shape::Strokes {
                rect: Rect::new(cx - half, cy - half / 2, 2 * half, half),
                count: 40,
                length: line_h,
                thickness: (line_h / 4).max(2),
            },
            color: palette::STAMP,
            label: RUBBER_STAMP.into(),
        });

        PageSpec {
            width,
            height,
            classes: vec![BACKGROUND.into(), PRINTED_TEXT.into(), RUBBER_STAMP.into(), HIGHLIGHT.into()],
            background: Fill::VerticalGradient { top: palette::PAPER_TOP, bottom: palette::PAPER_BOTTOM },
            background_label: BACKGROUND.into(),
            elements,
            seed,
        }
    }

    /// Appends an element, registering its label as a new class if needed.
    pub fn push_element(&mut self, element: Element) {
        if self.class_index(&element.label).is_none() {
            self.classes.push(element.label.clone());
        }
        self.elements.push(element);
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::Invalid("page must have non-zero size".into()));
        }
        if self.classes.len() >= 255 {
            return Err(SynthError::Invalid("too many classes".into()));
        }
        if self.class_index(&self.background_label).is_none() {
            return Err(SynthError::UnknownClass(self.background_label.clone()));
        }
        for (index, e) in self.elements.iter().enumerate() {
            if self.class_index(&e.label).is_none() {
                return Err(SynthError::UnknownClass(e.label.clone()));
            }
            let (x0, y0, x1, y1) = e.shape.bounds();
            let inside = x0 >= 0 && y0 >= 0 && x1 <= self.width as i64 && y1 <= self.height as i64 && x1 > x0 && y1 > y0;
            if !inside {
                return Err(SynthError::OutOfBounds { index, label: e.label.clone(), width: self.width, height: self.height });
            }
            if let Shape::Ring { outer, inner, .. } = e.shape {
                if inner >= outer {
                    return Err(SynthError::Invalid(format!("element {index}: ring inner radius must be below outer")));
                }
            }
        }
        Ok(())
    }
}

struct Canvas<'a> {
    img: &'a mut Image,
    truth: &'a mut LabelMap,
    color: image::Rgb<u8>,
    label: Label,
}

impl Canvas<'_> {
    #[inline]
    fn paint(&mut self, x: u32, y: u32) {
        self.img.put_pixel(x, y, self.color);
        self.truth.set(x, y, self.label);
    }

    fn disc_span(&mut self, cx: u32, cy: u32, r: u32, skip_inside: Option<u32>) {
        let (r2, inner2) = ((r as i64).pow(2), skip_inside.map(|i| (i as i64).pow(2)));
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                let d2 = (x as i64 - cx as i64).pow(2) + (y as i64 - cy as i64).pow(2);
                if d2 <= r2 && inner2.is_none_or(|i| d2 > i) {
                    self.paint(x, y);
                }
            }
        }
    }

    /// Thick segment: every pixel whose center lies within `half` of the segment.
    fn segment(&mut self, a: (f64, f64), b: (f64, f64), half: f64, clip: Rect) {
        let x0 = (a.0.min(b.0) - half).floor().max(clip.x as f64) as u32;
        let x1 = (a.0.max(b.0) + half).ceil().min((clip.x + clip.w - 1) as f64) as u32;
        let y0 = (a.1.min(b.1) - half).floor().max(clip.y as f64) as u32;
        let y1 = (a.1.max(b.1) + half).ceil().min((clip.y + clip.h - 1) as f64) as u32;
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                if qx * qx + qy * qy <= half * half {
                    self.paint(x, y);
                }
            }
        }
    }
}

/// Renders the page and its ground truth. Deterministic for a given spec.
pub fn generate_document(spec: &PageSpec) -> Result<(Image, LabelMap), SynthError> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut img = Image::new(w, h);
    for y in 0..h {
        let c: image::Rgb<u8> = spec.background.at_row(y, h).into();
        for x in 0..w {
            img.put_pixel(x, y, c);
        }
    }
    let bg = Label::class(spec.class_index(&spec.background_label).expect("validated"));
    let mut truth = LabelMap::filled(w, h, bg);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    for e in &spec.elements {
        let label = Label::class(spec.class_index(&e.label).expect("validated"));
        let mut canvas = Canvas { img: &mut img, truth: &mut truth, color: e.color.into(), label };
        match e.shape {
            Shape::Rect { rect } => {
                for y in rect.y..rect.y + rect.h {
                    for x in rect.x..rect.x + rect.w {
                        canvas.paint(x, y);
                    }
                }
            }
            Shape::Disc { cx, cy, r } => canvas.disc_span(cx, cy, r, None),
            Shape::Ring { cx, cy, outer, inner } => canvas.disc_span(cx, cy, outer, Some(inner)),
            Shape::Strokes { rect, count, length, thickness } => {
                let half = thickness.max(1) as f64 / 2.0;
                for _ in 0..count {
                    let ax = rect.x as f64 + rng.random::<f64>() * rect.w as f64;
                    let ay = rect.y as f64 + rng.random::<f64>() * rect.h as f64;
                    let angle = rng.random::<f64>() * std::f64::consts::TAU;
                    let len = length as f64 * rng.random_range(0.5..=1.0);
                    let bx = (ax + len * angle.cos()).clamp(rect.x as f64, (rect.x + rect.w) as f64);
                    let by = (ay + len * angle.sin()).clamp(rect.y as f64, (rect.y + rect.h) as f64);
                    canvas.segment((ax, ay), (bx, by), half, rect);
                }
            }
        }
    }
    Ok((img, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationSpec {
    /// Gaussian noise standard deviation per sRGB channel, in 8-bit units.
    pub sigma: [f64; 3],
    pub jpeg_quality: u8,
    /// When false the JPEG round trip is skipped and only noise is applied.
    pub block_artifact: bool,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self { sigma: [0.0; 3], jpeg_quality: 90, block_artifact: true, seed: 0 }
    }
}

impl DegradationSpec {
    pub fn new(sigma: f64, jpeg_quality: u8, seed: u64) -> Self {
        Self { sigma: [sigma; 3], jpeg_quality, block_artifact: true, seed }
    }

    /// Parses `sigma=5,q=75[,seed=N][,blocks=false]`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let mut d = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| format!("expected key=value, got {part:?}"))?;
            let bad = |e: &dyn std::fmt::Display| format!("{key}: {e}");
            match key {
                "sigma" => d.sigma = [value.parse::<f64>().map_err(|e| bad(&e))?; 3],
                "q" | "quality" => d.jpeg_quality = value.parse().map_err(|e| bad(&e))?,
                "seed" => d.seed = value.parse().map_err(|e| bad(&e))?,
                "blocks" => d.block_artifact = value.parse().map_err(|e| bad(&e))?,
                _ => return Err(format!("unknown degradation key {key:?}")),
            }
        }
        d.check()?;
        Ok(d)
    }

    fn check(&self) -> Result<(), String> {
        if self.sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err("sigma must be finite and non-negative".into());
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err("jpeg quality must be in 1..=100".into());
        }
        Ok(())
    }
}

/// Seeded per-channel Gaussian noise followed by a JPEG round trip.
/// The ground-truth map is unaffected.
pub fn degrade(img: &Image, d: &DegradationSpec) -> Result<Image, SynthError> {
    d.check().map_err(SynthError::Invalid)?;
    let mut out = img.clone();
    if d.sigma.iter().any(|&s| s > 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
        let noise: Vec<Normal<f64>> = d.sigma.iter().map(|&s| Normal::new(0.0, s).expect("sigma checked")).collect();
        for px in out.pixels_mut() {
            for (v, n) in px.0.iter_mut().zip(&noise) {
                *v = (*v as f64 + n.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    if d.block_artifact {
        let bytes = encode_jpeg(&out, d.jpeg_quality)?;
        out = decode_image(&bytes).map_err(|e| SynthError::Invalid(e.to_string()))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: u8,
    pub truth_pixels: u64,
    pub predicted_pixels: u64,
    pub true_positive: u64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub accuracy: f64,
    pub per_class: Vec<ClassScore>,
    pub unknown_predicted: u64,
    /// UNKNOWN predictions never count as matches.
    pub unknown_excluded: bool,
}

/// Pixel accuracy of `predicted` against `truth`, plus per-class precision
/// and recall over the classes present in the truth map.
pub fn score(predicted: &LabelMap, truth: &LabelMap) -> Result<Score, SynthError> {
    if (predicted.width(), predicted.height()) != (truth.width(), truth.height()) {
        return Err(SynthError::DimensionMismatch(predicted.width(), predicted.height(), truth.width(), truth.height()));
    }
    let mut truth_n = [0u64; 256];
    let mut pred_n = [0u64; 256];
    let mut tp = [0u64; 256];
    for (p, t) in predicted.labels().iter().zip(truth.labels()) {
        truth_n[t.raw() as usize] += 1;
        pred_n[p.raw() as usize] += 1;
        if p == t && !p.is_unknown() {
            tp[p.raw() as usize] += 1;
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class = (0..255usize)
        .filter(|&i| truth_n[i] > 0)
        .map(|i| ClassScore {
            label: i as u8,
            truth_pixels: truth_n[i],
            predicted_pixels: pred_n[i],
            true_positive: tp[i],
            precision: ratio(tp[i], pred_n[i]),
            recall: ratio(tp[i], truth_n[i]),
        })
        .collect();
    let total = truth.len() as u64;
    Ok(Score {
        accuracy: ratio(tp.iter().sum(), total),
        per_class,
        unknown_predicted: pred_n[255],
        unknown_excluded: true,
    })
}

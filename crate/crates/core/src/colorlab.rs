//! sRGB <-> CIELAB (D65) conversion and the ΔE76 color difference.
//!
//! Everything downstream classifies in Lab, so this module is the single
//! place where transfer-function and matrix constants live.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// An 8-bit sRGB pixel as delivered by the scanner. Serialized as `#rrggbb`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Rgb8 {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Rgb8 {
    pub const WHITE: Rgb8 = Rgb8::new(255, 255, 255);
    pub const BLACK: Rgb8 = Rgb8::new(0, 0, 0);

    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Self { r, g, b }
    }

    pub fn to_array(self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }

    /// `#rrggbb`, lowercase.
    pub fn to_hex(self) -> String {
        format!("#{:02x}{:02x}{:02x}", self.r, self.g, self.b)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let s = s.strip_prefix('#').unwrap_or(s);
        if s.len() != 6 || !s.is_ascii() {
            return None;
        }
        let channel = |i: usize| u8::from_str_radix(&s[i..i + 2], 16).ok();
        Some(Self::new(channel(0)?, channel(2)?, channel(4)?))
    }
}

impl TryFrom<String> for Rgb8 {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::from_hex(&s).ok_or_else(|| format!("invalid color {s:?}, expected #rrggbb"))
    }
}

impl From<Rgb8> for String {
    fn from(c: Rgb8) -> Self {
        c.to_hex()
    }
}

impl From<[u8; 3]> for Rgb8 {
    fn from(c: [u8; 3]) -> Self {
        Self::new(c[0], c[1], c[2])
    }
}

impl From<image::Rgb<u8>> for Rgb8 {
    fn from(c: image::Rgb<u8>) -> Self {
        Self::new(c.0[0], c.0[1], c.0[2])
    }
}

impl From<Rgb8> for image::Rgb<u8> {
    fn from(c: Rgb8) -> Self {
        image::Rgb(c.to_array())
    }
}

/// A CIELAB color under the D65 white point.
///
/// Serialized as a bare `[l, a, b]` triple.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct LabColor {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabColor {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.l, self.a, self.b]
    }

    pub fn is_finite(self) -> bool {
        self.l.is_finite() && self.a.is_finite() && self.b.is_finite()
    }
}

impl From<[f64; 3]> for LabColor {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<LabColor> for [f64; 3] {
    fn from(c: LabColor) -> Self {
        c.to_array()
    }
}

impl fmt::Display for LabColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Lab({:.2}, {:.2}, {:.2})", self.l, self.a, self.b)
    }
}

// Linear sRGB -> XYZ (D65), IEC 61966-2-1.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

// The white point is the image of linear (1,1,1), so sRGB white lands on L=100, a=b=0 exactly.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const SRGB_BREAKPOINT: f64 = 0.04045;
const LINEAR_BREAKPOINT: f64 = 0.0031308;
const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn srgb_channel_to_linear(v: f64) -> f64 {
    if v <= SRGB_BREAKPOINT {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb_channel(v: f64) -> f64 {
    if v <= LINEAR_BREAKPOINT {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Linearized value of every 8-bit code; exactly what the formula yields.
fn linear_table() -> &'static [f64; 256] {
    static TABLE: OnceLock<[f64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; 256];
        for (i, v) in t.iter_mut().enumerate() {
            *v = srgb_channel_to_linear(i as f64 / 255.0);
        }
        t
    })
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let cube = f * f * f;
    if cube > EPSILON {
        cube
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

pub fn srgb_to_lab(c: Rgb8) -> LabColor {
    let t = linear_table();
    let (r, g, b) = (t[c.r as usize], t[c.g as usize], t[c.b as usize]);
    let m = &RGB_TO_XYZ;
    let x = m[0][0] * r + m[0][1] * g + m[0][2] * b;
    let y = m[1][0] * r + m[1][1] * g + m[1][2] * b;
    let z = m[2][0] * r + m[2][1] * g + m[2][2] * b;
    let fx = lab_f(x / WHITE[0]);
    let fy = lab_f(y / WHITE[1]);
    let fz = lab_f(z / WHITE[2]);
    LabColor {
        l: (116.0 * fy - 16.0).clamp(0.0, 100.0),
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// Inverse of [`srgb_to_lab`]; out-of-gamut colors clamp per channel.
pub fn lab_to_srgb(c: LabColor) -> Rgb8 {
    let fy = (c.l + 16.0) / 116.0;
    let fx = fy + c.a / 500.0;
    let fz = fy - c.b / 200.0;
    let x = lab_f_inv(fx) * WHITE[0];
    let y = lab_f_inv(fy) * WHITE[1];
    let z = lab_f_inv(fz) * WHITE[2];
    let m = &XYZ_TO_RGB;
    let quantize = |lin: f64| -> u8 {
        let v = linear_to_srgb_channel(lin.clamp(0.0, 1.0));
        let q = (v * 255.0).round();
        if q.is_nan() {
            0
        } else {
            q.clamp(0.0, 255.0) as u8
        }
    };
    Rgb8 {
        r: quantize(m[0][0] * x + m[0][1] * y + m[0][2] * z),
        g: quantize(m[1][0] * x + m[1][1] * y + m[1][2] * z),
        b: quantize(m[2][0] * x + m[2][1] * y + m[2][2] * z),
    }
}

#[inline]
pub fn squared_distance(x: LabColor, y: LabColor) -> f64 {
    let dl = x.l - y.l;
    let da = x.a - y.a;
    let db = x.b - y.b;
    dl * dl + da * da + db * db
}

/// CIE76 ΔE: Euclidean distance in Lab.
#[inline]
pub fn delta_e(x: LabColor, y: LabColor) -> f64 {
    squared_distance(x, y).sqrt()
}

/// Precomputed Lab for a 32×32×32 grid of sRGB colors; pixels map to the
/// nearest grid node. Approximate, used only in throughput mode.
pub struct LabLut {
    table: Vec<LabColor>,
}

pub const LUT_BINS: usize = 32;

impl LabLut {
    pub fn new() -> Self {
        let node = |i: usize| ((i * 255) as f64 / (LUT_BINS - 1) as f64).round() as u8;
        let mut table = Vec::with_capacity(LUT_BINS * LUT_BINS * LUT_BINS);
        for r in 0..LUT_BINS {
            for g in 0..LUT_BINS {
                for b in 0..LUT_BINS {
                    table.push(srgb_to_lab(Rgb8::new(node(r), node(g), node(b))));
                }
            }
        }
        Self { table }
    }

    #[inline]
    fn bin(v: u8) -> usize {
        (v as usize * (LUT_BINS - 1) + 127) / 255
    }

    #[inline]
    pub fn lookup(&self, c: Rgb8) -> LabColor {
        let idx = (Self::bin(c.r) * LUT_BINS + Self::bin(c.g)) * LUT_BINS + Self::bin(c.b);
        self.table[idx]
    }
}

impl Default for LabLut {
    fn default() -> Self {
        Self::new()
    }
}

//! Raster plumbing shared by the training, segmentation and I/O paths.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cluster::PointSet;
use crate::colorlab::{srgb_to_lab, Rgb8};

/// Decoded 8-bit sRGB page.
pub type Image = image::RgbImage;

/// Axis-aligned window in image pixel coordinates, serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// True when the rectangle is non-empty and lies inside a `width`×`height` image.
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && (self.x as u64 + self.w as u64) <= width as u64
            && (self.y as u64 + self.h as u64) <= height as u64
    }
}

impl From<[u32; 4]> for Rect {
    fn from(v: [u32; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [u32; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x, self.y, self.w, self.h)
    }
}

#[inline]
pub fn pixel(img: &Image, x: u32, y: u32) -> Rgb8 {
    (*img.get_pixel(x, y)).into()
}

/// Lab points of every pixel inside `rect`, row-major. Caller checks bounds.
pub fn window_points(img: &Image, rect: Rect) -> PointSet {
    let mut points = Vec::with_capacity(rect.area() as usize);
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            points.push(srgb_to_lab(pixel(img, x, y)));
        }
    }
    PointSet::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_bounds() {
        assert!(Rect::new(0, 0, 10, 10).fits(10, 10));
        assert!(!Rect::new(1, 0, 10, 10).fits(10, 10));
        assert!(!Rect::new(0, 0, 0, 10).fits(10, 10));
        assert!(!Rect::new(u32::MAX, 0, 2, 1).fits(10, 10));
    }

    #[test]
    fn rect_serializes_as_array() {
        let r = Rect::new(1, 2, 3, 4);
        assert_eq!(serde_json::to_string(&r).unwrap(), "[1,2,3,4]");
        assert_eq!(serde_json::from_str::<Rect>("[1,2,3,4]").unwrap(), r);
    }

    #[test]
    fn window_extraction() {
        let mut img = Image::from_pixel(4, 3, image::Rgb([255, 255, 255]));
        img.put_pixel(2, 1, image::Rgb([0, 0, 0]));
        let ps = window_points(&img, Rect::new(1, 1, 2, 2));
        assert_eq!(ps.len(), 4);
        assert_eq!(ps.points()[1], srgb_to_lab(Rgb8::BLACK));
    }
}

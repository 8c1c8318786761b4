//! Shared fixtures for the benchmarks: seeded pages and a six-centroid model.

use chromaplane::model::CentroidEntry;
use chromaplane::synth::palette;
use chromaplane::{degrade, generate_document, srgb_to_lab, ClusterConfig, ColorClass, ColorModel, DegradationSpec, Image, PageSpec, Rgb8};

/// A scanned-looking administrative page: synthetic layout, noise and JPEG.
pub fn scanned_page(width: u32, height: u32, seed: u64) -> Image {
    let (clean, _) = generate_document(&PageSpec::administrative(width, height, seed)).expect("valid page spec");
    degrade(&clean, &DegradationSpec::new(5.0, 75, seed)).expect("degradation")
}

/// Four classes, six centroids; the background spans the paper gradient.
pub fn six_centroid_model() -> ColorModel {
    let mut model = ColorModel::new(ClusterConfig::default());
    let classes = [
        ("background", vec![palette::PAPER_TOP, Rgb8::new(241, 241, 240), palette::PAPER_BOTTOM]),
        ("printed_text", vec![palette::INK]),
        ("rubber_stamp", vec![palette::STAMP]),
        ("highlight", vec![palette::HIGHLIGHT]),
    ];
    for (label, colors) in classes {
        model.classes.push(ColorClass {
            label: label.into(),
            centroids: colors.iter().map(|c| CentroidEntry { lab: srgb_to_lab(*c), radius: 8.0, weight: 1 }).collect(),
        });
    }
    model
}

use std::hint::black_box;

use chromaplane::raster::window_points;
use chromaplane::segment::Conversion;
use chromaplane::{cluster_window, segment_image, srgb_to_lab, ClusterConfig, Rect, Rgb8, SegmentOptions};
use chromaplane_bench::{scanned_page, six_centroid_model};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn bench_color(c: &mut Criterion) {
    let colors: Vec<Rgb8> = (0..4096u32).map(|i| Rgb8::new((i * 7) as u8, (i * 13) as u8, (i * 29) as u8)).collect();
    let mut g = c.benchmark_group("colorlab");
    g.throughput(Throughput::Elements(colors.len() as u64));
    g.bench_function("srgb_to_lab", |b| b.iter(|| colors.iter().map(|c| srgb_to_lab(black_box(*c)).l).sum::<f64>()));
    g.finish();
}

fn bench_segment(c: &mut Criterion) {
    let page = scanned_page(1250, 1750, 7);
    let model = six_centroid_model();
    let mut g = c.benchmark_group("segment_image");
    g.sample_size(10);
    g.throughput(Throughput::Elements(page.width() as u64 * page.height() as u64));
    for (name, conversion, parallel) in [
        ("exact", Conversion::Exact, false),
        ("lut", Conversion::Lut, false),
        ("exact_parallel", Conversion::Exact, true),
    ] {
        let opt = SegmentOptions { conversion, parallel, ..SegmentOptions::default() };
        g.bench_function(name, |b| b.iter(|| segment_image(&model, black_box(&page), &opt).unwrap().unknown_fraction));
    }
    g.finish();
}

fn bench_cluster(c: &mut Criterion) {
    let page = scanned_page(1000, 1400, 3);
    let cfg = ClusterConfig::default();
    let mut g = c.benchmark_group("cluster_window");
    g.sample_size(10);
    for side in [100u32, 316] {
        let points = window_points(&page, Rect::new(100, 100, side, side));
        g.bench_with_input(BenchmarkId::from_parameter(side * side), &points, |b, ps| {
            b.iter(|| cluster_window(ps, 3, 1, &cfg).unwrap().inertia)
        });
    }
    g.finish();
}

criterion_group!(benches, bench_color, bench_segment, bench_cluster);
criterion_main!(benches);

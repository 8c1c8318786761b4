use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use chromaplane::io::{encode_gray_png, write_atomic};
use chromaplane::pipeline::{write_document_outputs, ManifestEntry, QUEUE_FILE};
use chromaplane::synth::PageSpec;
use chromaplane::training::default_seed;
use chromaplane::*;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Exit codes: 0 success, 1 usage, 2 input error, 3 processing error.
enum Failure {
    Input(anyhow::Error),
    Processing(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Processing(_) => 3,
        }
    }
}

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Input(e.into())
}

fn processing<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Processing(e.into())
}

#[derive(Debug, Parser)]
#[command(name = "chromaplane", version, about = "Color-based segmentation of scanned documents into planes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a model from a project file listing pages, windows and labels.
    Train {
        #[arg(long)]
        project: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one page into a label map and per-class planes.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Majority-filter radius applied to the label map.
        #[arg(long, default_value_t = 0)]
        smooth: u32,
        /// Unknown-pixel fraction above which the page is flagged.
        #[arg(long, default_value_t = 0.01)]
        flag_threshold: f64,
    },
    /// Segment every page of a manifest and write a report and retraining queue.
    Batch {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Concurrent documents; defaults to the number of cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print classes, centroids and validation issues of a model.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the HTTP training service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Synthetic pages with ground truth.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    /// Generate pages, truth label maps and a batch manifest.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: u32,
        /// For example `sigma=5,q=75`.
        #[arg(long)]
        degrade: Option<String>,
    },
}

/// Page generator input: either a full page description or a named layout.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SynthSpec {
    Template { template: String, width: u32, height: u32, seed: Option<u64> },
    Page(PageSpec),
}

impl SynthSpec {
    /// Page `i` of a series; each page gets its own seed.
    fn page(&self, i: u64) -> Result<PageSpec, Failure> {
        match self {
            SynthSpec::Template { template, width, height, seed } => match template.as_str() {
                "administrative" => Ok(PageSpec::administrative(*width, *height, seed.unwrap_or_else(default_seed) + i)),
                other => Err(input(anyhow!("unknown template {other:?}; available: administrative"))),
            },
            SynthSpec::Page(spec) => Ok(PageSpec { seed: spec.seed + i, ..spec.clone() }),
        }
    }
}

fn load_model(path: &Path) -> Result<ColorModel, Failure> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display())).map_err(input)?;
    ColorModel::deserialize(&bytes).with_context(|| format!("loading {}", path.display())).map_err(input)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(processing)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(processing)
}

fn train(project: &Path, out: &Path) -> Result<(), Failure> {
    let p = Project::load(project).map_err(input)?;
    // Every training failure traces back to the project file or its pages.
    let model = p.train(default_seed()).map_err(input)?;
    write_atomic(out, &model.serialize()).map_err(processing)?;
    println!(
        "trained {} classes, {} centroids from {} windows -> {}",
        model.classes.len(),
        model.centroid_count(),
        model.provenance.len(),
        out.display()
    );
    for issue in model.validate() {
        println!("  {issue}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SegmentSummary<'a> {
    histogram: std::collections::BTreeMap<String, u64>,
    unknown_fraction: f64,
    flagged: bool,
    label_map: &'a str,
    planes: Vec<String>,
    suggestions: Vec<chromaplane::segment::Suggestion>,
}

fn segment(model: &Path, image: &Path, out_dir: &Path, smooth: u32, flag_threshold: f64) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&flag_threshold) {
        return Err(input(anyhow!("--flag-threshold must lie in [0, 1], got {flag_threshold}")));
    }
    let model = load_model(model)?;
    let img = load_image(image).map_err(input)?;
    let opt = SegmentOptions { smooth_radius: smooth, flag_threshold, ..SegmentOptions::default() };
    let result = segment_image(&model, &img, &opt).map_err(processing)?;
    let planes = write_document_outputs(&model, &img, &result, out_dir, false).map_err(|e| processing(anyhow!(e)))?;
    let suggestions = novelty_report(&result, &model, &img, pipeline::NOVELTY_SEED).map_err(processing)?.suggestions;
    let summary = SegmentSummary {
        histogram: result.histogram.named(&model),
        unknown_fraction: result.unknown_fraction,
        flagged: result.flagged,
        label_map: pipeline::LABEL_MAP_FILE,
        planes,
        suggestions,
    };
    write_json(&out_dir.join("result.json"), &summary)?;
    write_json(&out_dir.join(pipeline::LEGEND_FILE), &pipeline::legend(&model))?;
    let status = if result.flagged { "FLAGGED" } else { "ok" };
    println!("{status}: unknown {:.2}%, {} planes in {}", 100.0 * result.unknown_fraction, summary.planes.len(), out_dir.display());
    for (label, n) in &summary.histogram {
        println!("  {label:<20} {n}");
    }
    Ok(())
}

fn batch(model: &Path, manifest: &Path, out_dir: &Path, workers: Option<usize>) -> Result<(), Failure> {
    let model = load_model(model)?;
    let manifest = Manifest::load(manifest).map_err(input)?;
    let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(input(anyhow!("--workers must be at least 1")));
    }
    let report = run_batch(&model, &manifest, out_dir, workers).map_err(processing)?;
    let queue = route_flagged(&report, out_dir.join(QUEUE_FILE)).map_err(processing)?;
    let t = &report.totals;
    println!(
        "processed {}: {} ok, {} flagged, {} failed; {} queued for retraining",
        t.processed,
        t.unflagged,
        t.flagged,
        t.failed,
        queue.entries.len()
    );
    for row in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("  {}: {}", row.id, row.error.as_deref().unwrap_or_default());
    }
    if t.failed > 0 {
        return Err(processing(anyhow!("{} of {} documents failed; see {}", t.failed, t.processed, pipeline::REPORT_FILE)));
    }
    Ok(())
}

fn inspect(model: &Path) -> Result<(), Failure> {
    let model = load_model(model)?;
    println!("version {} ({}), fingerprint {}", model.version, model.colorspace, &model.fingerprint()[..16]);
    println!("{} classes, {} centroids, {} training windows", model.classes.len(), model.centroid_count(), model.provenance.len());
    for (i, class) in model.classes.iter().enumerate() {
        println!("[{i}] {}", class.label);
        for c in &class.centroids {
            println!("    {}  lab {}  radius {:.2}  weight {}", lab_to_srgb(c.lab).to_hex(), c.lab, c.radius, c.weight);
        }
    }
    for p in &model.provenance {
        println!("window {} {} k={} seed={}", p.doc, p.rect, p.k, p.seed);
    }
    let issues = model.validate();
    if issues.is_empty() {
        println!("no issues");
    }
    for issue in &issues {
        println!("{issue}");
    }
    if model.has_errors() {
        return Err(input(anyhow!("model has validation errors")));
    }
    Ok(())
}

fn serve(host: std::net::IpAddr, port: u16, data_dir: PathBuf) -> Result<(), Failure> {
    let runtime = tokio::runtime::Runtime::new().map_err(processing)?;
    let config = chromaplane_service::Config::new(data_dir);
    runtime.block_on(chromaplane_service::serve(SocketAddr::new(host, port), config)).map_err(processing)
}

#[derive(Serialize)]
struct TruthLegend<'a> {
    classes: &'a [String],
}

fn synth_gen(spec: &Path, out_dir: &Path, count: u32, degrade_spec: Option<&str>) -> Result<(), Failure> {
    let text = fs::read(spec).with_context(|| format!("reading {}", spec.display())).map_err(input)?;
    let synth: SynthSpec = serde_json::from_slice(&text).with_context(|| format!("parsing {}", spec.display())).map_err(input)?;
    let degradation = degrade_spec.map(DegradationSpec::parse).transpose().map_err(|e| input(anyhow!(e)))?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display())).map_err(processing)?;
    let mut entries = Vec::new();
    let mut classes = Vec::new();
    for i in 0..count {
        let page = synth.page(i as u64)?;
        let (mut img, truth) = generate_document(&page).map_err(input)?;
        if let Some(d) = &degradation {
            img = degrade(&img, &DegradationSpec { seed: d.seed + i as u64, ..d.clone() }).map_err(processing)?;
        }
        let id = format!("page-{i:03}");
        let file = format!("{id}.png");
        chromaplane::io::save_png(&img, out_dir.join(&file)).map_err(processing)?;
        write_atomic(out_dir.join(format!("{id}.truth.png")), &encode_gray_png(&truth.to_gray())).map_err(processing)?;
        entries.push(ManifestEntry { id, path: PathBuf::from(file) });
        classes = page.classes;
    }
    write_json(&out_dir.join("manifest.json"), &Manifest::new(entries, SegmentOptions::batch()))?;
    write_json(&out_dir.join("truth-legend.json"), &TruthLegend { classes: &classes })?;
    println!("wrote {count} pages, truth maps and manifest.json to {}", out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { project, out } => train(&project, &out),
        Command::Segment { model, image, out_dir, smooth, flag_threshold } => segment(&model, &image, &out_dir, smooth, flag_threshold),
        Command::Batch { model, manifest, out_dir, workers } => batch(&model, &manifest, &out_dir, workers),
        Command::Inspect { model } => inspect(&model),
        Command::Serve { port, data_dir, host } => serve(host, port, data_dir),
        Command::Synth { command: SynthCommand::Gen { spec, out_dir, count, degrade } } => synth_gen(&spec, &out_dir, count, degrade.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Input(e) | Failure::Processing(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

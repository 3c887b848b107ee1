//! `region-cam`: activation maps, segmentation seeds, threshold sweeps,
//! localization and occlusion from exported feature bundles.

mod config;
mod pipeline;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use region_cam_core::locate::{loc_sweep, LocSample, LocSweepReport};
use region_cam_core::npy::save_array;
use region_cam_core::occlude::{apply_occlusion, occlusion_mask, occlusion_report, ClassifyStats};
use region_cam_core::seeds::{parse_grid, sweep_thresholds, SweepReport};
use region_cam_core::sip::LayerSelection;
use region_cam_core::visual::{heatmap_ppm, image_ppm, labels_ppm, write_ppm};
use region_cam_core::{make_seed, miou, BBox, ConfusionMatrix};
use serde::{Deserialize, Serialize};

use config::{describe_layers, parse_fill, parse_layers, parse_list, Config, Method};
use report::{check_all, write_csv, write_json, AssertFailed, Assertion};

#[derive(Parser, Debug)]
#[command(
    name = "region-cam",
    version,
    about = "Region-based class activation maps from feature bundles"
)]
struct Cli {
    /// JSON config; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Metric condition such as `best_miou>=0.6`; exit 1 when it fails.
    #[arg(long = "assert", global = true)]
    asserts: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct Pipeline {
    /// A bundle directory, or a directory of bundle directories.
    #[arg(long)]
    bundle_dir: PathBuf,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Layers to cluster and propagate over, deepest first
    /// (`all`, `none`, `all_but_deepest` or a comma list).
    #[arg(long)]
    layers: Option<String>,
    /// Layers whose gradients form the SIM, same syntax as `--layers`.
    #[arg(long)]
    sim_layers: Option<String>,
    #[arg(long)]
    centroids: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write one activation map per class.
    Map(Pipeline),
    /// Write segmentation seeds at one background threshold.
    Seed {
        #[command(flatten)]
        p: Pipeline,
        #[arg(long)]
        bg: Option<f32>,
        /// Ground-truth masks `<image_id>.npy`; adds an mIoU report.
        #[arg(long)]
        gt_dir: Option<PathBuf>,
    },
    /// mIoU over a background-threshold grid.
    Sweep {
        #[command(flatten)]
        p: Pipeline,
        #[arg(long)]
        gt_dir: PathBuf,
        /// `start:step:end`, a comma list or one value.
        #[arg(long)]
        bg_grid: Option<String>,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        ignore_label: Option<i32>,
    },
    /// loc1/loc5 from the largest thresholded component.
    Locate {
        #[command(flatten)]
        p: Pipeline,
        /// JSON `{image_id: [[x0, y0, x1, y1, class_id], ...]}`; defaults
        /// to `<gt-dir>/boxes.json`.
        #[arg(long)]
        gt_boxes: Option<PathBuf>,
        #[arg(long)]
        gt_dir: Option<PathBuf>,
        /// Fraction of the map maximum, or a grid.
        #[arg(long)]
        frac: Option<String>,
    },
    /// Occlude the high-activation region of the top-scoring class.
    Occlude {
        #[command(flatten)]
        p: Pipeline,
        #[arg(long)]
        frac: Option<f32>,
        /// `r,g,b` in [0, 1].
        #[arg(long)]
        fill: Option<String>,
    },
    /// Accuracy and confidence drops from re-classification results.
    OccludeReport {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
    },
    /// mIoU for every propagation layer subset and centroid count.
    Ablate {
        #[arg(long)]
        bundle_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Subsets separated by `;`, each in `--layers` syntax. Defaults to
        /// `none` plus every deep-first prefix of the clustered layers.
        #[arg(long)]
        layers: Option<String>,
        #[arg(long)]
        sim_layers: Option<String>,
        /// Comma list of centroid counts.
        #[arg(long)]
        centroids: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        bg_grid: Option<String>,
        #[arg(long)]
        num_classes: Option<usize>,
    },
}

impl Pipeline {
    fn apply(&self, cfg: &mut Config) -> Result<()> {
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(l) = &self.layers {
            cfg.sip.layer_subset = parse_layers(l)?;
        }
        if let Some(l) = &self.sim_layers {
            cfg.sip.sim_layers = parse_layers(l)?;
        }
        if let Some(m) = self.centroids {
            cfg.sip.centroids = m;
        }
        if let Some(s) = self.seed {
            cfg.sip.seed = s;
        }
        Ok(())
    }
}

fn image_dir(out: &Path, image_id: &str) -> Result<PathBuf> {
    let dir = out.join(image_id);
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn cmd_map(p: &Pipeline, cfg: &Config, out: &Path) -> Result<()> {
    let paths = pipeline::bundle_paths(&p.bundle_dir)?;
    let results = paths
        .par_iter()
        .map(|path| {
            let b = pipeline::load(path)?;
            let maps = pipeline::all_maps(&b, cfg.method, &cfg.sip)?;
            Ok((b.image_id, maps))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut written = 0;
    for (image_id, maps) in &results {
        let dir = image_dir(out, image_id)?;
        for (c, m) in maps {
            let stem = format!("{}_class{c}", cfg.method.name());
            save_array(&m.map, dir.join(format!("{stem}.npy")))?;
            write_ppm(&heatmap_ppm(&m.map)?, dir.join(format!("{stem}.ppm")))?;
            written += 1;
        }
    }
    println!(
        "wrote {written} {} maps for {} images to {}",
        cfg.method.name(),
        results.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SeedReport {
    threshold: f32,
    miou: f64,
    per_class: Vec<Option<f64>>,
    images: usize,
}

fn cmd_seed(
    p: &Pipeline,
    gt_dir: Option<&Path>,
    cfg: &Config,
    out: &Path,
    asserts: &[Assertion],
) -> Result<()> {
    let paths = pipeline::bundle_paths(&p.bundle_dir)?;
    let seeds = paths
        .par_iter()
        .map(|path| {
            let b = pipeline::load(path)?;
            let maps = pipeline::all_maps(&b, cfg.method, &cfg.sip)?;
            let seed = make_seed(&maps, cfg.bg_threshold)?;
            let gt = gt_dir
                .map(|d| pipeline::gt_mask(d, &b.image_id))
                .transpose()?;
            Ok((b.image_id, seed, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(cfg.num_classes);
    for (image_id, seed, gt) in &seeds {
        let dir = image_dir(out, image_id)?;
        save_array(&seed.labels, dir.join("seed.npy"))?;
        write_ppm(&labels_ppm(&seed.labels)?, dir.join("seed.ppm"))?;
        if let Some(gt) = gt {
            cm.update(gt, &seed.labels, cfg.ignore_label)
                .with_context(|| format!("scoring {image_id}"))?;
        }
    }
    if gt_dir.is_some() {
        let (per_class, mean) = miou(&cm);
        let report = SeedReport {
            threshold: cfg.bg_threshold,
            miou: mean,
            per_class,
            images: seeds.len(),
        };
        write_json(&report, &out.join("seed.json"))?;
        println!(
            "mIoU {mean:.4} at bg {} over {} images",
            cfg.bg_threshold,
            seeds.len()
        );
        check_all(&report, asserts)?;
    } else {
        println!(
            "wrote {} seeds at bg {} to {}",
            seeds.len(),
            cfg.bg_threshold,
            out.display()
        );
        check_all(&serde_json::json!({}), asserts)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    threshold: f32,
    miou: f64,
}

fn run_sweep(bundle_dir: &Path, gt_dir: &Path, cfg: &Config) -> Result<SweepReport> {
    let grid = parse_grid(&cfg.bg_grid)?;
    let paths = pipeline::bundle_paths(bundle_dir)?;
    let data = pipeline::dataset(&paths, gt_dir, cfg.method, &cfg.sip)?;
    Ok(sweep_thresholds(
        data.into_iter().map(Ok),
        &grid,
        cfg.num_classes,
        cfg.ignore_label,
    )?)
}

fn cmd_sweep(
    p: &Pipeline,
    gt_dir: &Path,
    cfg: &Config,
    out: &Path,
    asserts: &[Assertion],
) -> Result<()> {
    let report = run_sweep(&p.bundle_dir, gt_dir, cfg)?;
    write_json(&report, &out.join("sweep.json"))?;
    let rows: Vec<SweepRow> = report
        .points
        .iter()
        .map(|pt| SweepRow {
            threshold: pt.threshold,
            miou: pt.miou,
        })
        .collect();
    write_csv(&rows, &out.join("sweep.csv"))?;
    println!(
        "best mIoU {:.4} at {} (mean {:.4}) over {} images",
        report.best_miou, report.best_threshold, report.mean_miou, report.images
    );
    check_all(&report, asserts)
}

fn read_boxes(path: &Path) -> Result<BTreeMap<String, Vec<[i64; 5]>>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read boxes {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid boxes file {}", path.display()))
}

fn to_bbox(b: &[i64; 5], hw: (usize, usize), path: &Path) -> Result<BBox> {
    let coords: Vec<usize> = b[..4]
        .iter()
        .map(|&v| usize::try_from(v))
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("negative box coordinate {b:?} in {}", path.display()))?;
    let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3])
        .with_context(|| format!("bad box {b:?} in {}", path.display()))?;
    if bbox.x1 > hw.1 || bbox.y1 > hw.0 {
        bail!("box {b:?} in {} exceeds image size {hw:?}", path.display());
    }
    Ok(bbox)
}

fn cmd_locate(
    p: &Pipeline,
    boxes_path: &Path,
    cfg: &Config,
    out: &Path,
    asserts: &[Assertion],
) -> Result<()> {
    let grid = parse_grid(&cfg.loc_frac)?;
    let boxes = read_boxes(boxes_path)?;
    let paths = pipeline::bundle_paths(&p.bundle_dir)?;
    let samples = paths
        .par_iter()
        .map(|path| {
            let b = pipeline::load(path)?;
            let gt = boxes
                .get(&b.image_id)
                .filter(|v| !v.is_empty())
                .with_context(|| {
                    format!("no boxes for {} in {}", b.image_id, boxes_path.display())
                })?;
            let class_id = i32::try_from(gt[0][4]).context("class id out of range")?;
            let gt_boxes = gt
                .iter()
                .filter(|r| r[4] == gt[0][4])
                .map(|r| to_bbox(r, b.image_hw, boxes_path))
                .collect::<Result<Vec<_>>>()?;
            let rec = b
                .class(class_id)
                .with_context(|| format!("in bundle {}", path.display()))?;
            let (top1, top5) = (
                rec.top1_correct.unwrap_or(false),
                rec.top5_correct.unwrap_or(false),
            );
            let mut maps = pipeline::class_maps(&b, cfg.method, &cfg.sip, &[class_id])
                .with_context(|| format!("computing maps for {}", b.image_id))?;
            Ok(LocSample {
                image_id: b.image_id,
                map: maps.remove(&class_id).expect("requested class").map,
                gt_boxes,
                top1_correct: top1,
                top5_correct: top5,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report: LocSweepReport = loc_sweep(&samples, &grid)?;
    write_json(&report, &out.join("locate.json"))?;
    write_csv(&report.points, &out.join("locate.csv"))?;
    println!(
        "loc1 {:.4} loc5 {:.4} (mean over {} fractions, {} images)",
        report.mean_loc1,
        report.mean_loc5,
        report.points.len(),
        report.images
    );
    check_all(&report, asserts)
}

#[derive(Serialize)]
struct OcclusionEntry {
    image_id: String,
    class_id: i32,
    masked_pixels: usize,
}

fn cmd_occlude(p: &Pipeline, cfg: &Config, out: &Path) -> Result<()> {
    let paths = pipeline::bundle_paths(&p.bundle_dir)?;
    let results = paths
        .par_iter()
        .map(|path| {
            let b = pipeline::load(path)?;
            let image = b
                .image_rgb
                .as_ref()
                .with_context(|| format!("bundle {} has no image", path.display()))?;
            let top =
                b.classes.iter().fold(
                    &b.classes[0],
                    |best, c| if c.score > best.score { c } else { best },
                );
            let class_id = top.class_id;
            let maps = pipeline::class_maps(&b, cfg.method, &cfg.sip, &[class_id])
                .with_context(|| format!("computing maps for {}", b.image_id))?;
            let mask = occlusion_mask(&maps[&class_id].map, cfg.occlusion_frac)?;
            let occluded = apply_occlusion(image, &mask, cfg.fill)?;
            Ok((b.image_id.clone(), class_id, mask, occluded))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut index = Vec::new();
    for (image_id, class_id, mask, occluded) in results {
        let dir = image_dir(out, &image_id)?;
        save_array(&occluded, dir.join("occluded.npy"))?;
        save_array(&mask.to_tensor()?, dir.join("occlusion_mask.npy"))?;
        write_ppm(&image_ppm(&occluded)?, dir.join("occluded.ppm"))?;
        index.push(OcclusionEntry {
            image_id,
            class_id,
            masked_pixels: mask.count(),
        });
    }
    write_json(&index, &out.join("occlude.json"))?;
    println!(
        "occluded {} images at frac {} into {}",
        index.len(),
        cfg.occlusion_frac,
        out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct NamedStats {
    #[serde(default)]
    name: Option<String>,
    #[serde(flatten)]
    stats: ClassifyStats,
}

#[derive(Serialize)]
struct DropRow<'a> {
    name: &'a str,
    metric: &'static str,
    before: f64,
    after: f64,
    drop: f64,
}

fn read_stats(path: &Path) -> Result<Vec<NamedStats>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("invalid classification stats {}", path.display()))
}

fn cmd_occlude_report(
    before: &Path,
    after: &Path,
    out: &Path,
    asserts: &[Assertion],
) -> Result<()> {
    let b = read_stats(before)?;
    let a = read_stats(after)?;
    let stats = |v: &[NamedStats]| v.iter().map(|s| s.stats).collect::<Vec<_>>();
    let mut rows = occlusion_report(&stats(&b), &stats(&a))?;
    for (row, s) in rows.iter_mut().zip(&a) {
        row.name = s.name.clone();
    }
    let mut flat = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let name = row.name.as_deref().unwrap_or("");
        for (metric, d) in [
            ("acc1", row.acc1),
            ("acc5", row.acc5),
            ("conf1", row.conf1),
            ("conf5", row.conf5),
        ] {
            flat.push(DropRow {
                name,
                metric,
                before: d.before,
                after: d.after,
                drop: d.drop,
            });
        }
        println!("row {i} {name}: top-1 drop {:.4}", row.acc1.drop);
    }
    write_json(
        &serde_json::json!({ "rows": rows }),
        &out.join("occlusion.json"),
    )?;
    write_csv(&flat, &out.join("occlusion.csv"))?;
    check_all(&serde_json::json!({ "rows": rows }), asserts)
}

#[derive(Serialize, Clone)]
struct AblationRow {
    layers: String,
    centroids: usize,
    best_threshold: f32,
    best_miou: f64,
    mean_miou: f64,
}

/// `none` followed by every deep-first prefix of the default clustered layers.
fn default_subsets(bundle_dir: &Path) -> Result<Vec<LayerSelection>> {
    let first = pipeline::load(&pipeline::bundle_paths(bundle_dir)?[0])?;
    let names: Vec<String> = LayerSelection::AllButDeepest
        .resolve(&first)?
        .into_iter()
        .map(|i| first.layers[i].name.clone())
        .collect();
    let mut subsets = vec![LayerSelection::None];
    subsets.extend((1..=names.len()).map(|k| LayerSelection::Named(names[..k].to_vec())));
    Ok(subsets)
}

fn cmd_ablate(
    bundle_dir: &Path,
    gt_dir: &Path,
    layers: Option<&str>,
    centroids: Option<&str>,
    cfg: &Config,
    out: &Path,
    asserts: &[Assertion],
) -> Result<()> {
    let subsets = match layers {
        Some(spec) => spec
            .split(';')
            .map(parse_layers)
            .collect::<Result<Vec<_>>>()?,
        None => default_subsets(bundle_dir)?,
    };
    let counts: Vec<usize> = match centroids {
        Some(spec) => parse_list(spec, "centroid count")?,
        None => vec![cfg.sip.centroids],
    };
    let mut rows = Vec::new();
    for subset in &subsets {
        for &m in &counts {
            let mut run = cfg.clone();
            run.method = Method::RegionCam;
            run.sip.layer_subset = subset.clone();
            run.sip.centroids = m;
            let r = run_sweep(bundle_dir, gt_dir, &run)?;
            let row = AblationRow {
                layers: describe_layers(subset),
                centroids: m,
                best_threshold: r.best_threshold,
                best_miou: r.best_miou,
                mean_miou: r.mean_miou,
            };
            println!(
                "{:<32} m={:<4} best mIoU {:.4}",
                row.layers, m, row.best_miou
            );
            rows.push(row);
        }
    }
    write_json(
        &serde_json::json!({ "rows": rows }),
        &out.join("ablation.json"),
    )?;
    write_csv(&rows, &out.join("ablation.csv"))?;
    check_all(&serde_json::json!({ "rows": rows }), asserts)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    let asserts = cli
        .asserts
        .iter()
        .map(|a| Assertion::parse(a))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&cli.out).with_context(|| format!("cannot create {}", cli.out.display()))?;
    let out = cli.out.as_path();
    match &cli.cmd {
        Command::Map(p) => {
            p.apply(&mut cfg)?;
            cmd_map(p, &cfg, out)?;
            check_all(&serde_json::json!({}), &asserts)
        }
        Command::Seed { p, bg, gt_dir } => {
            p.apply(&mut cfg)?;
            if let Some(bg) = bg {
                cfg.bg_threshold = *bg;
            }
            cmd_seed(p, gt_dir.as_deref(), &cfg, out, &asserts)
        }
        Command::Sweep {
            p,
            gt_dir,
            bg_grid,
            num_classes,
            ignore_label,
        } => {
            p.apply(&mut cfg)?;
            if let Some(g) = bg_grid {
                cfg.bg_grid = g.clone();
            }
            if let Some(n) = num_classes {
                cfg.num_classes = *n;
            }
            if let Some(l) = ignore_label {
                cfg.ignore_label = *l;
            }
            cmd_sweep(p, gt_dir, &cfg, out, &asserts)
        }
        Command::Locate {
            p,
            gt_boxes,
            gt_dir,
            frac,
        } => {
            p.apply(&mut cfg)?;
            if let Some(f) = frac {
                cfg.loc_frac = f.clone();
            }
            let boxes = match (gt_boxes, gt_dir) {
                (Some(b), _) => b.clone(),
                (None, Some(d)) => d.join("boxes.json"),
                (None, None) => bail!("locate needs --gt-boxes or --gt-dir"),
            };
            cmd_locate(p, &boxes, &cfg, out, &asserts)
        }
        Command::Occlude { p, frac, fill } => {
            p.apply(&mut cfg)?;
            if let Some(f) = frac {
                cfg.occlusion_frac = *f;
            }
            if let Some(f) = fill {
                cfg.fill = parse_fill(f)?;
            }
            cmd_occlude(p, &cfg, out)?;
            check_all(&serde_json::json!({}), &asserts)
        }
        Command::OccludeReport { before, after } => {
            cmd_occlude_report(before, after, out, &asserts)
        }
        Command::Ablate {
            bundle_dir,
            gt_dir,
            layers,
            sim_layers,
            centroids,
            seed,
            bg_grid,
            num_classes,
        } => {
            if let Some(l) = sim_layers {
                cfg.sip.sim_layers = parse_layers(l)?;
            }
            if let Some(s) = seed {
                cfg.sip.seed = *s;
            }
            if let Some(g) = bg_grid {
                cfg.bg_grid = g.clone();
            }
            if let Some(n) = num_classes {
                cfg.num_classes = *n;
            }
            cmd_ablate(
                bundle_dir,
                gt_dir,
                layers.as_deref(),
                centroids.as_deref(),
                &cfg,
                out,
                &asserts,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<AssertFailed>().is_some() => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

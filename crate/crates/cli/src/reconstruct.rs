use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use skysplat_core::aggregation::{read_dsm, write_dsm, write_points, DsmGrid};
use skysplat_core::features::extract_builtin;
use skysplat_core::metrics::DsmReport;
use skysplat_core::pipeline::{self, cscm_features, estimate_heights, transient_mask, ViewData};
use skysplat_core::raster::{load_raster, save_raster, RasterF32};
use skysplat_core::rpc::{parse_rpc, RpcModel};

use crate::config::{Overrides, PipelineConfig};
use crate::CliError;

pub fn read_rpc(path: &Path) -> Result<RpcModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_rpc(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn read_raster(path: &Path) -> Result<RasterF32, CliError> {
    load_raster(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn read_grid(path: &Path) -> Result<DsmGrid, CliError> {
    read_dsm(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Exclusion flags from a raster on the ground-truth grid; values ≥ 0.5
/// are excluded.
pub fn read_exclusion(path: &Path, gt: &DsmGrid) -> Result<Vec<bool>, CliError> {
    let r = read_raster(path)?;
    if r.dims() != (gt.spec.rows, gt.spec.cols) {
        return Err(CliError::Config(format!(
            "{}: mask is {:?}, ground truth grid is {}x{}",
            path.display(),
            r.dims(),
            gt.spec.rows,
            gt.spec.cols
        )));
    }
    Ok((0..r.pixel_count()).map(|i| r.is_valid_at(i) && r.pixel(i)[0] >= 0.5).collect())
}

fn out_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Pipeline(format!("{}: {e}", path.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| out_err(path, e))
}

/// JSON to standard output; a closed pipe is not an error.
pub fn print_json(value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Pipeline(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn save(r: &RasterF32, path: &Path) -> Result<(), CliError> {
    save_raster(r, path).map_err(|e| out_err(path, e))
}

/// Loads and checks every input named by the config.
fn load_inputs(cfg: &mut PipelineConfig, explicit_range: bool) -> Result<Vec<ViewData>, CliError> {
    let mut views = Vec::with_capacity(cfg.views.len());
    for (i, v) in cfg.views.iter().enumerate() {
        let image = read_raster(&v.image)?;
        let rpc = read_rpc(&v.rpc)?;
        let features = v.features.as_deref().map(read_raster).transpose()?;
        let rel_height = v.rel_height.as_deref().map(read_raster).transpose()?;
        for (what, r, p) in [("features", &features, &v.features), ("rel_height", &rel_height, &v.rel_height)] {
            if let (Some(r), Some(p)) = (r, p) {
                if !r.same_dims(&image) {
                    return Err(CliError::Config(format!(
                        "views[{i}].{what} {}: size {:?} differs from image {:?}",
                        p.display(),
                        r.dims(),
                        image.dims()
                    )));
                }
            }
        }
        views.push(ViewData {
            image,
            rpc,
            features,
            rel_height,
        });
    }
    if !explicit_range {
        let (lo, hi) = views.iter().fold((f64::MIN, f64::MAX), |(lo, hi), v| {
            let (a, b) = v.rpc.height_range(1.0);
            (lo.max(a), hi.min(b))
        });
        if lo >= hi {
            return Err(CliError::Config(
                "h_min/h_max: not given and the RPC height ranges do not overlap".into(),
            ));
        }
        log::info!(target: "config", "height range from RPC validity: [{lo:.3}, {hi:.3}]");
        cfg.params.h_min = lo;
        cfg.params.h_max = hi;
    }
    if cfg.params.h_min >= cfg.params.h_max {
        return Err(CliError::Config(format!(
            "h_min/h_max: empty range [{}, {}]",
            cfg.params.h_min, cfg.params.h_max
        )));
    }
    Ok(views)
}

fn prepare_output(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("output_dir {}: {e}", dir.display())))
}

#[derive(Serialize)]
struct Summary<'a> {
    version: &'static str,
    label: &'static str,
    n_views: usize,
    threads: usize,
    deterministic: bool,
    h_min: f64,
    h_max: f64,
    m: usize,
    hypothesis_spacing: f64,
    n_points: usize,
    transient_fraction: Vec<f64>,
    dsm_rows: usize,
    dsm_cols: usize,
    dsm_cell_size: f64,
    dsm_filled_cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mae_over_spacing: Option<f64>,
    timings: &'a [pipeline::StageTiming],
    total_seconds: f64,
    config: &'a PipelineConfig,
}

pub fn reconstruct(config: Option<&Path>, over: &Overrides) -> Result<(), CliError> {
    let start = Instant::now();
    let (mut cfg, explicit) = PipelineConfig::load(config, over)?;
    let views = load_inputs(&mut cfg, explicit)?;
    let gt = cfg.gt_dsm.as_deref().map(read_grid).transpose()?;
    let exclude = match (&cfg.exclude_mask, &gt) {
        (Some(p), Some(gt)) => Some(read_exclusion(p, gt)?),
        (Some(_), None) => return Err(CliError::Config("exclude_mask: needs gt_dsm".into())),
        _ => None,
    };
    prepare_output(&cfg.output_dir)?;
    log::info!(
        target: "reconstruct",
        "{} views, heights [{:.3}, {:.3}] in {} steps",
        views.len(),
        cfg.params.h_min,
        cfg.params.h_max,
        cfg.params.m
    );

    let out = pipeline::run(&views, &cfg.params, gt.as_ref())
        .map_err(|e| CliError::Pipeline(format!("stage {}: {}", e.stage, e.message)))?;

    let dir = &cfg.output_dir;
    for (v, h) in out.heights.iter().enumerate() {
        save(h, &dir.join(format!("height_{v}.skyr")))?;
    }
    for (v, (m, q)) in out.masks.iter().zip(&out.confidences).enumerate() {
        save(&m.to_raster(), &dir.join(format!("mask_{v}.skyr")))?;
        save(q.raster(), &dir.join(format!("confidence_{v}.skyr")))?;
    }
    let points_path = dir.join("points.txt");
    let f = File::create(&points_path).map_err(|e| out_err(&points_path, e))?;
    write_points(&out.points, BufWriter::new(f)).map_err(|e| out_err(&points_path, e))?;
    let dsm_path = dir.join("dsm.skyr");
    write_dsm(&out.dsm, &dsm_path).map_err(|e| out_err(&dsm_path, e))?;
    if !out.losses.is_empty() {
        let per_view: Vec<_> = cfg
            .views
            .iter()
            .enumerate()
            .filter(|(_, v)| v.rel_height.is_some())
            .zip(&out.losses)
            .map(|((i, _), l)| json!({"view": i, "report": l}))
            .collect();
        write_json(&dir.join("losses.json"), &per_view)?;
    }
    let report: Option<DsmReport> = match &gt {
        Some(gt) => {
            let r = pipeline::score(&out, gt, exclude.as_deref())
                .map_err(|e| CliError::Pipeline(format!("stage {}: {}", e.stage, e.message)))?;
            write_json(&dir.join("dsm_report.json"), &r)?;
            Some(r)
        }
        None => None,
    };

    let spacing = (cfg.params.h_max - cfg.params.h_min) / (cfg.params.m - 1) as f64;
    let summary = Summary {
        version: crate::BUILD_ID,
        label: out.label,
        n_views: views.len(),
        threads: rayon::current_num_threads(),
        deterministic: cfg.deterministic,
        h_min: cfg.params.h_min,
        h_max: cfg.params.h_max,
        m: cfg.params.m,
        hypothesis_spacing: spacing,
        n_points: out.points.len(),
        transient_fraction: out
            .masks
            .iter()
            .map(|m| m.transient_count() as f64 / m.stable.len().max(1) as f64)
            .collect(),
        dsm_rows: out.dsm.spec.rows,
        dsm_cols: out.dsm.spec.cols,
        dsm_cell_size: out.dsm.spec.cell_size,
        dsm_filled_cells: out.dsm.data_count(),
        mae: report.as_ref().map(|r| r.mae),
        rmse: report.as_ref().map(|r| r.rmse),
        mae_over_spacing: report.as_ref().map(|r| r.mae / spacing),
        timings: &out.timings,
        total_seconds: start.elapsed().as_secs_f64(),
        config: &cfg,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    match &report {
        Some(r) => log::info!(
            target: "reconstruct",
            "{}: {} points, MAE {:.3} m ({:.2}x spacing)",
            out.label,
            out.points.len(),
            r.mae,
            r.mae / spacing
        ),
        None => log::info!(target: "reconstruct", "{}: {} points", out.label, out.points.len()),
    }
    log::info!(target: "reconstruct", "wrote {}", dir.display());
    Ok(())
}

pub fn mask(config: Option<&Path>, only: Option<usize>, over: &Overrides) -> Result<(), CliError> {
    let (mut cfg, explicit) = PipelineConfig::load(config, over)?;
    let views = load_inputs(&mut cfg, explicit)?;
    if let Some(v) = only {
        if v >= views.len() {
            return Err(CliError::Config(format!("view: {v} out of range for {} views", views.len())));
        }
    }
    prepare_output(&cfg.output_dir)?;
    let perr = |e: pipeline::PipelineError| CliError::Pipeline(format!("stage {}: {}", e.stage, e.message));
    let params = &cfg.params;
    let feats = views
        .iter()
        .enumerate()
        .map(|(i, v)| match &v.features {
            Some(f) => Ok(f.clone()),
            None => extract_builtin(&v.image, params.feature_kind)
                .map_err(|e| CliError::Pipeline(format!("stage features: view {i}: {e}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let heights = estimate_heights(&views, &feats, params).map_err(perr)?;
    let cfeats = views
        .iter()
        .map(|v| match &v.features {
            Some(f) => Ok(skysplat_core::features::box_smooth(f, params.cscm_smoothing)),
            None => cscm_features(&v.image, params),
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(perr)?;

    let mut rows = Vec::new();
    for i in (0..views.len()).filter(|i| only.is_none_or(|v| v == *i)) {
        let (m, q, _) = transient_mask(i, &views, &cfeats, &heights, params).map_err(perr)?;
        let paths: [PathBuf; 2] = [
            cfg.output_dir.join(format!("mask_{i}.skyr")),
            cfg.output_dir.join(format!("confidence_{i}.skyr")),
        ];
        save(&m.to_raster(), &paths[0])?;
        save(q.raster(), &paths[1])?;
        let frac = m.transient_count() as f64 / m.stable.len().max(1) as f64;
        log::info!(target: "mask", "view {i}: {:.2}% transient", 100.0 * frac);
        rows.push(json!({"view": i, "transient_pixels": m.transient_count(), "transient_fraction": frac}));
    }
    print_json(&rows)
}

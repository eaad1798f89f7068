use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;
use skysplat_core::gaussians::{
    decode_skgs, encode_skgs, lift_heights, render as composite, GaussianSet, LiftAttrs, OrthoCamera,
    RenderCamera, RenderOptions,
};
use skysplat_core::losses::{masked_photometric, pearson_height_loss, weighted_total_loss, LossReport};
use skysplat_core::metrics::{dsm_metrics_with, MetricsOptions};
use skysplat_core::cscm::TransientMask;
use skysplat_core::rpc::{fit_pinhole as fit, parse_pinhole, PixelRect};
use skysplat_core::synthetic::{generate, write_bundle, Relief, SceneSpec, Transient};

use crate::reconstruct::{print_json, read_exclusion, read_grid, read_raster, read_rpc, write_json};
use crate::CliError;

fn parse_list<const N: usize, T: std::str::FromStr>(s: &str) -> Result<[T; N], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("bad number `{p}`")))
        .collect::<Result<_, _>>()?;
    let n = parts.len();
    parts.try_into().map_err(|_| format!("expected {N} comma-separated values, got {n}"))
}

fn emit(out: Option<&Path>, value: &impl serde::Serialize) -> Result<(), CliError> {
    match out {
        Some(p) => write_json(p, value),
        None => print_json(value),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Bundle directory.
    #[arg(long)]
    out: PathBuf,
    /// Base scene spec (JSON); the flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    n_views: Option<usize>,
    /// Reconstructed area side, meters.
    #[arg(long)]
    extent: Option<f64>,
    #[arg(long)]
    gsd: Option<f64>,
    /// flat, ramp, buildings or fractal, or a JSON relief object.
    #[arg(long)]
    relief: Option<String>,
    /// Transient blob `view,row0,col0,row1,col1`; repeatable.
    #[arg(long, value_parser = parse_list::<5, usize>)]
    transient: Vec<[usize; 5]>,
}

fn parse_relief(s: &str) -> Result<Relief, CliError> {
    let r = match s {
        "flat" => Relief::Flat { height: 20.0 },
        "ramp" => Relief::Ramp {
            base: 20.0,
            slope_east: 0.1,
            slope_north: 0.05,
        },
        "buildings" => Relief::default(),
        "fractal" => Relief::Fractal {
            octaves: 4,
            base: 20.0,
            amplitude: 6.0,
        },
        json => serde_json::from_str(json).map_err(|e| CliError::Config(format!("relief: {e}")))?,
    };
    Ok(r)
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SceneSpec::default(),
    };
    spec.seed = a.seed;
    if let Some(n) = a.image_size {
        spec.image_size = n;
    }
    if let Some(n) = a.n_views {
        spec.n_views = n;
    }
    if let Some(g) = a.gsd {
        spec.gsd = g;
    }
    match a.extent {
        Some(e) => spec.extent = e,
        // Keep the default extent inside a shrunken footprint.
        None => spec.extent = spec.extent.min(0.8 * spec.image_size as f64 * spec.gsd),
    }
    if let Some(r) = &a.relief {
        spec.relief = parse_relief(r)?;
    }
    for t in &a.transient {
        spec.transients.push(Transient {
            view: t[0],
            rect: [t[1], t[2], t[3], t[4]],
            color: [0.9, 0.2, 0.1],
        });
    }
    let bundle = generate(&spec).map_err(|e| CliError::Config(format!("synth: {e}")))?;
    let layout = write_bundle(&bundle, &a.out).map_err(|e| CliError::Pipeline(format!("synth: {e}")))?;
    let name = |p: PathBuf| p.file_name().expect("bundle file").to_string_lossy().into_owned();
    let (h_min, h_max) = bundle.height_range();
    let auto = json!({
        "views": (0..layout.n_views)
            .map(|v| json!({"image": name(layout.image(v)), "rpc": name(layout.rpc(v))}))
            .collect::<Vec<_>>(),
        "h_min": h_min,
        "h_max": h_max,
        "m": 64,
        "gt_dsm": name(layout.gt_dsm()),
        "dsm_cell_size": spec.dsm_cell_size,
        "output_dir": "out",
        "deterministic": true,
    });
    write_json(&a.out.join("auto.json"), &auto)?;
    log::info!(
        target: "synth",
        "seed {}: {} views of {}px, heights [{h_min:.2}, {h_max:.2}] -> {}",
        spec.seed,
        layout.n_views,
        spec.image_size,
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted DSM (SKYR with JSON sidecar).
    #[arg(long, required_unless_present = "losses")]
    pred: Option<PathBuf>,
    /// Ground-truth DSM.
    #[arg(long, required_unless_present = "losses")]
    gt: Option<PathBuf>,
    /// Cells to skip (PNG or SKYR on the ground-truth grid, ≥ 0.5 = skip).
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// PAG thresholds in meters, comma-separated.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Diagnostic only: remove the median signed error before scoring.
    #[arg(long)]
    median_offset: bool,
    /// Fail instead of resampling when grids differ.
    #[arg(long)]
    no_resample: bool,
    /// Loss mode: Pearson height loss and masked photometric loss.
    #[arg(long)]
    losses: bool,
    /// Relative height prior (loss mode).
    #[arg(long, requires = "losses")]
    rel_height: Option<PathBuf>,
    /// Predicted height map (loss mode).
    #[arg(long, requires = "losses")]
    height: Option<PathBuf>,
    /// Rendered image and ground-truth image for the photometric term.
    #[arg(long, requires = "losses", requires = "image")]
    render: Option<PathBuf>,
    #[arg(long, requires = "losses")]
    image: Option<PathBuf>,
    /// Transient mask (1 = stable).
    #[arg(long, requires = "losses")]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0, requires = "losses")]
    hei_weight: f64,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    if a.losses {
        return eval_losses(a);
    }
    let (pred, gt) = (a.pred.as_deref().unwrap(), a.gt.as_deref().unwrap());
    let (pred, gt) = (read_grid(pred)?, read_grid(gt)?);
    let exclude = a.exclude.as_deref().map(|p| read_exclusion(p, &gt)).transpose()?;
    let mut opts = MetricsOptions {
        median_offset: a.median_offset,
        resample: !a.no_resample,
        ..Default::default()
    };
    if let Some(t) = &a.thresholds {
        opts.thresholds = t.clone();
    }
    let report = dsm_metrics_with(&pred, &gt, exclude.as_deref(), &opts)
        .map_err(|e| CliError::Pipeline(format!("stage metrics: {e}")))?;
    emit(a.out.as_deref(), &report)
}

fn eval_losses(a: &EvalArgs) -> Result<(), CliError> {
    let (Some(rel), Some(h)) = (&a.rel_height, &a.height) else {
        return Err(CliError::Config("--losses needs --rel-height and --height".into()));
    };
    let (rel, h) = (read_raster(rel)?, read_raster(h)?);
    let (r, l_hei, n) = pearson_height_loss(&rel, &h).map_err(|e| CliError::Pipeline(format!("stage losses: {e}")))?;
    let l_rgb = match (&a.render, &a.image) {
        (Some(render), Some(image)) => {
            let (render, image) = (read_raster(render)?, read_raster(image)?);
            let mask = match &a.mask {
                Some(p) => TransientMask::from_raster(&read_raster(p)?),
                None => TransientMask::all_stable(image.height(), image.width()),
            };
            masked_photometric(&render, &image, &mask).map_err(|e| CliError::Pipeline(format!("stage losses: {e}")))?
        }
        _ => 0.0,
    };
    let report = LossReport {
        hei_corr: r,
        l_hei,
        l_rgb_mse: l_rgb,
        l_total: weighted_total_loss(l_rgb, l_hei, a.hei_weight),
        n_pixels_used: n,
    };
    emit(a.out.as_deref(), &report)
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Gaussian set (SKGS).
    #[arg(long, conflicts_with = "heights")]
    gaussians: Option<PathBuf>,
    /// Height map to lift into Gaussians instead, with --rpc.
    #[arg(long, requires = "rpc")]
    heights: Option<PathBuf>,
    #[arg(long)]
    rpc: Option<PathBuf>,
    /// Per-pixel colors for lifted Gaussians.
    #[arg(long, requires = "heights")]
    color: Option<PathBuf>,
    /// Fitted pinhole camera (JSON from `rpc fit-pinhole`).
    #[arg(long, required_unless_present = "ortho_grid")]
    camera: Option<PathBuf>,
    /// Render nadir on the grid of this DSM instead.
    #[arg(long, conflicts_with = "camera")]
    ortho_grid: Option<PathBuf>,
    /// Output size `width,height`; defaults to the camera patch or grid.
    #[arg(long, value_parser = parse_list::<2, usize>)]
    size: Option<[usize; 2]>,
    #[arg(long, value_parser = parse_list::<3, f64>, default_value = "0,0,0")]
    background: [f64; 3],
    /// Output image (PNG, or SKYR for full precision).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    opacity_out: Option<PathBuf>,
    /// Also write the Gaussians used.
    #[arg(long)]
    save_gaussians: Option<PathBuf>,
}

pub fn render(a: &RenderArgs) -> Result<(), CliError> {
    let set: GaussianSet = match (&a.gaussians, &a.heights, &a.rpc) {
        (Some(p), _, _) => {
            let bytes = std::fs::read(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            decode_skgs(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        (None, Some(h), Some(rpc)) => {
            let h = read_raster(h)?;
            let rpc = read_rpc(rpc)?;
            let color = a.color.as_deref().map(read_raster).transpose()?;
            let attrs = LiftAttrs {
                color: color.as_ref(),
                ..Default::default()
            };
            lift_heights(&h, &rpc, &attrs).map_err(|e| CliError::Pipeline(format!("stage gaussians: {e}")))?
        }
        _ => return Err(CliError::Config("render needs --gaussians or --heights with --rpc".into())),
    };
    let pinhole = a
        .camera
        .as_deref()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            parse_pinhole(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        })
        .transpose()?;
    let grid = a.ortho_grid.as_deref().map(read_grid).transpose()?;
    let (cam, natural) = match (&pinhole, &grid) {
        (Some(p), _) => {
            let b = p.patch_bounds;
            (RenderCamera::Pinhole(p), [b.u_max.ceil() as usize + 1, b.v_max.ceil() as usize + 1])
        }
        (None, Some(g)) => (RenderCamera::Orthographic(OrthoCamera::from_grid(&g.spec)), [g.spec.cols, g.spec.rows]),
        _ => unreachable!("clap requires a camera"),
    };
    let [w, h] = a.size.unwrap_or(natural);
    let opts = RenderOptions { background: a.background };
    let out = composite(&set, &cam, (h, w), &opts).map_err(|e| CliError::Pipeline(format!("stage render: {e}")))?;
    skysplat_core::raster::save_raster(&out.image, &a.out)
        .map_err(|e| CliError::Pipeline(format!("{}: {e}", a.out.display())))?;
    if let Some(p) = &a.opacity_out {
        skysplat_core::raster::save_raster(&out.opacity, p).map_err(|e| CliError::Pipeline(format!("{}: {e}", p.display())))?;
    }
    if let Some(p) = &a.save_gaussians {
        std::fs::write(p, encode_skgs(&set)).map_err(|e| CliError::Pipeline(format!("{}: {e}", p.display())))?;
    }
    log::info!(
        target: "render",
        "{} Gaussians, {} splatted, {} culled -> {}",
        out.report.n_gaussians,
        out.report.n_splatted,
        out.report.n_culled,
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct FitPinholeArgs {
    #[arg(long)]
    rpc: PathBuf,
    /// Pixel patch `u_min,v_min,u_max,v_max`.
    #[arg(long, value_parser = parse_list::<4, f64>, required_unless_present = "size")]
    patch: Option<[f64; 4]>,
    /// Whole image `width,height` instead of a patch.
    #[arg(long, value_parser = parse_list::<2, usize>, conflicts_with = "patch")]
    size: Option<[usize; 2]>,
    /// Height range; defaults to the RPC validity range.
    #[arg(long, allow_hyphen_values = true, requires = "h_max")]
    h_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true, requires = "h_min")]
    h_max: Option<f64>,
    /// Write the fit here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn fit_pinhole(a: &FitPinholeArgs) -> Result<(), CliError> {
    let rpc = read_rpc(&a.rpc)?;
    let patch = match (a.patch, a.size) {
        (Some([u0, v0, u1, v1]), _) => PixelRect::new(u0, v0, u1, v1),
        (None, Some([w, h])) => PixelRect::of_raster(w, h),
        _ => unreachable!("clap requires a patch"),
    };
    let range = match (a.h_min, a.h_max) {
        (Some(lo), Some(hi)) => [lo, hi],
        _ => {
            let (lo, hi) = rpc.height_range(1.0);
            [lo, hi]
        }
    };
    let fit = fit(&rpc, patch, range).map_err(|e| CliError::Pipeline(format!("stage rpc_camera: {e}")))?;
    log::info!(target: "rpc", "mean fitting error {:.4} px", fit.mfe);
    emit(a.out.as_deref(), &fit)
}

//! Held-out evaluation and the cross-view consistency statistic.

use rayon::prelude::*;
use serde::Serialize;

use super::{Model, TrainConfig, TrainError};
use crate::diffcore::Tape;
use crate::objectives::{hdr_metrics, psnr, ssim};
use crate::radiance_field::{
    render_ldr, render_view, Pose, RayBatch, RenderOptions, RenderedView, SamplePlan, Vec3, VoxelField,
};
use crate::synthdata::DatasetBundle;

const ROWS_PER_CHUNK: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr_ldr: f64,
    pub ssim_ldr: f64,
    /// Absent when the HDR branch was never trained.
    pub psnr_hdr: Option<f64>,
    pub ssim_hdr: Option<f64>,
}

pub fn render_model(model: &Model, pose: &Pose, n_samples: usize, background: Vec3) -> Result<RenderedView, TrainError> {
    let opts = RenderOptions {
        n_samples,
        jitter_seed: None,
        background,
    };
    Ok(render_view(&model.field, pose, &opts, &model.l2h, ROWS_PER_CHUNK)?)
}

/// Renders each view and scores it against the bundle. Views are rendered
/// in parallel on the current rayon pool; results keep the input order.
pub fn evaluate(
    model: &Model,
    bundle: &DatasetBundle,
    views: &[usize],
    config: &TrainConfig,
) -> Result<Vec<ViewMetrics>, TrainError> {
    let poses = bundle.manifest.poses()?;
    let bg = bundle.manifest.config.background;
    let with_hdr = config.trains_hdr();
    views
        .par_iter()
        .map(|&v| {
            let r = render_model(model, &poses[v], config.n_samples, bg)?;
            let (psnr_hdr, ssim_hdr) = if with_hdr {
                let (p, s) = hdr_metrics(&r.hdr, &bundle.hdr[v], config.weights.mu)?;
                (Some(p), Some(s))
            } else {
                (None, None)
            };
            Ok(ViewMetrics {
                view: v,
                psnr_ldr: psnr(&r.ldr, &bundle.ldr[v], 1.0)?,
                ssim_ldr: ssim(&r.ldr, &bundle.ldr[v])?,
                psnr_hdr,
                ssim_hdr,
            })
        })
        .collect()
}

/// Arithmetic mean of each column; `view` is set to `usize::MAX`.
pub fn mean_metrics(rows: &[ViewMetrics]) -> ViewMetrics {
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&ViewMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let opt_mean = |f: &dyn Fn(&ViewMetrics) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = rows.iter().map(f).collect();
        vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / n)
    };
    ViewMetrics {
        view: usize::MAX,
        psnr_ldr: mean(&|r| r.psnr_ldr),
        ssim_ldr: mean(&|r| r.ssim_ldr),
        psnr_hdr: opt_mean(&|r| r.psnr_hdr),
        ssim_hdr: opt_mean(&|r| r.ssim_hdr),
    }
}

/// Agreement of the rendered LDR color of shared surface points between
/// neighboring views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Consistency {
    /// Mean absolute per-channel difference over the compared points.
    pub mean_abs_diff: f64,
    pub max_abs_diff: f64,
    pub points: usize,
}

fn render_rays(field: &VoxelField, rays: &RayBatch, opts: &RenderOptions) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), TrainError> {
    let plan = SamplePlan::new(field, rays, opts)?;
    let mut tape = Tape::new();
    let bound = field.bind(&mut tape, false)?;
    let r = render_ldr(&mut tape, &bound, &plan, opts.background)?;
    let w = tape.value(r.weights).data();
    let opacity = w.chunks(plan.samples).map(|c| c.iter().sum()).collect();
    Ok((tape.value(r.color).data().to_vec(), plan.depth(w), opacity))
}

/// For consecutive pairs of `poses`, finds opaque surface points seen by a
/// grid of pixels (every `stride`-th) of the first view, casts a ray from the
/// second camera through each point, and compares the two LDR colors. Points
/// occluded in the second view (depth mismatch beyond `tolerance`) are
/// skipped.
pub fn cross_view_consistency(
    field: &VoxelField,
    poses: &[Pose],
    opts: &RenderOptions,
    stride: u32,
    tolerance: f64,
) -> Result<Consistency, TrainError> {
    let mut sum = 0.0;
    let mut worst = 0.0f64;
    let mut count = 0usize;
    for pair in poses.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let k = &a.intrinsics;
        let pixels: Vec<(u32, u32)> = (0..k.height)
            .step_by(stride.max(1) as usize)
            .flat_map(|y| (0..k.width).step_by(stride.max(1) as usize).map(move |x| (x, y)))
            .collect();
        let rays_a = crate::radiance_field::generate_rays(a, &pixels)?;
        let (col_a, depth_a, op_a) = render_rays(field, &rays_a, opts)?;
        let mut rays_b = RayBatch::default();
        let mut keep = Vec::new();
        for i in 0..rays_a.len() {
            if op_a[i] < 0.99 {
                continue;
            }
            let (o, d) = (rays_a.origins[i], rays_a.directions[i]);
            let x = [o[0] + depth_a[i] * d[0], o[1] + depth_a[i] * d[1], o[2] + depth_a[i] * d[2]];
            let e = b.translation;
            rays_b.push(e, [x[0] - e[0], x[1] - e[1], x[2] - e[2]], pixels[i])?;
            let dist = ((x[0] - e[0]).powi(2) + (x[1] - e[1]).powi(2) + (x[2] - e[2]).powi(2)).sqrt();
            keep.push((i, dist));
        }
        if rays_b.is_empty() {
            continue;
        }
        let (col_b, depth_b, op_b) = render_rays(field, &rays_b, opts)?;
        for (j, &(i, dist)) in keep.iter().enumerate() {
            if op_b[j] < 0.99 || (depth_b[j] - dist).abs() > tolerance {
                continue;
            }
            for c in 0..3 {
                let diff = (col_a[3 * i + c] - col_b[3 * j + c]).abs();
                sum += diff;
                worst = worst.max(diff);
            }
            count += 1;
        }
    }
    Ok(Consistency {
        mean_abs_diff: if count > 0 { sum / (3 * count) as f64 } else { 0.0 },
        max_abs_diff: worst,
        points: count,
    })
}

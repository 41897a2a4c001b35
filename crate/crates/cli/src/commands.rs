use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mh3d_core::image::{load_pfm, load_ppm, save_pfm, save_ppm, Image};
use mh3d_core::objectives::{hdr_metrics, psnr, ssim, tonemap_image};
use mh3d_core::radiance_field::{Pose, RenderOptions};
use mh3d_core::synthdata::{
    bundle_hash, load_bundle, make_dataset, save_bundle, sha256, DatasetBundle, PoseRecord, SynthConfig, MANIFEST,
};
use mh3d_core::trainer::{
    ablate as run_ablation, ablation_cells, cross_view_consistency, evaluate, mean_metrics, render_model,
    summarize_ablation, write_metrics, Checkpoint, TrainConfig, TrainError, Trainer, ViewMetrics,
};

use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::{AblateArgs, EvalArgs, RenderArgs, RenderMode, Split, SynthArgs, TrainArgs};

const CHECKPOINT: &str = "checkpoint.mh3d";
const METRICS: &str = "metrics.csv";
const CONFIG: &str = "config.json";
const DUMP: &str = "nan_dump.json";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn load_data(dir: &Path) -> Result<DatasetBundle, CliError> {
    load_bundle(dir).map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", dir.display())),
        other => other,
    })
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))
        }
    }
}

fn config_json(config: &TrainConfig) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(config)?;
    s.push('\n');
    Ok(s)
}

fn split_views(bundle: &DatasetBundle, split: Split) -> Vec<usize> {
    let m = &bundle.manifest;
    match split {
        Split::Train => m.train.clone(),
        Split::Test => m.test.clone(),
        Split::All => (0..m.poses.len()).collect(),
    }
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut config = SynthConfig::new(a.scene, a.seed);
    config.exposure_index = a.exposure_index;
    config.camera.noise_sigma = a.noise_sigma;
    config.camera.i0 = a.i0;
    config.ring.count = a.views;
    config.ring.width = a.width;
    config.ring.height = a.height;
    config.ring.focal = a.focal;
    config.scene.resolution = a.resolution;
    config.scene.span = a.span;
    config.n_samples = a.n_samples;
    info!("rendering {} views of {} ({}x{})", a.views, a.scene, a.width, a.height);
    let bundle = make_dataset(&config)?;
    create_dir(&a.out)?;
    save_bundle(&bundle, &a.out)?;
    let m = &bundle.manifest;
    let mut run = RunManifest::new("synth");
    run.seed = Some(a.seed);
    run.dataset_hash = Some(bundle_hash(m)?);
    run.artifact(&a.out, MANIFEST)?;
    for (name, hash) in &m.files {
        run.artifacts.insert(name.clone(), hash.clone());
    }
    run.write(&a.out)?;
    println!(
        "wrote {} views ({} train, {} test) to {}",
        m.poses.len(),
        m.train.len(),
        m.test.len(),
        a.out.display()
    );
    println!(
        "exposure dt={}  saturated {:.2}%  underexposed {:.2}%  radiance span {:.1}",
        m.camera.delta_t,
        100.0 * m.stats.saturated_fraction,
        100.0 * m.stats.dark_fraction,
        m.stats.radiance_span
    );
    Ok(())
}

fn finish_run(
    out: &Path,
    run: &mut RunManifest,
    trainer: &Trainer,
    rows: &[mh3d_core::trainer::MetricRow],
) -> Result<(), CliError> {
    trainer.checkpoint().save(&out.join(CHECKPOINT))?;
    write_metrics(fs::File::create(out.join(METRICS))?, rows)?;
    fs::write(out.join(CONFIG), config_json(trainer.config())?)?;
    for f in [CHECKPOINT, METRICS, CONFIG] {
        run.artifact(out, f)?;
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let bundle = load_data(&a.data)?;
    let mut run = RunManifest::new("train");
    run.input(&a.data.join(MANIFEST))?;
    run.dataset_hash = Some(bundle_hash(&bundle.manifest)?);
    let mut trainer = if let Some(path) = &a.resume {
        run.input(path)?;
        let mut ckpt = Checkpoint::load(path)?;
        if let Some(n) = a.iterations {
            ckpt.config.iterations = n;
        }
        info!("resuming from step {}", ckpt.step);
        Trainer::resume(&bundle, ckpt)?
    } else {
        if let Some(p) = &a.config {
            run.input(p)?;
        }
        let mut config = read_config(a.config.as_deref())?;
        if let Some(p) = a.profile {
            config.apply_profile(p);
        }
        if let Some(n) = a.iterations {
            config.iterations = n;
        }
        if let Some(s) = a.seed {
            config.seed = s;
        }
        Trainer::new(&bundle, config)?
    };
    let config = trainer.config().clone();
    run.seed = Some(config.seed);
    run.config_hash = Some(sha256(config_json(&config)?.as_bytes()));
    create_dir(&a.out)?;

    let until = if a.stop_after > 0 {
        a.stop_after.min(config.iterations)
    } else {
        config.iterations
    };
    let mut rows = Vec::new();
    let every = a.log_every.max(1);
    while trainer.step() < until {
        let next = ((trainer.step() / every + 1) * every).min(until);
        let start = rows.len();
        if let Err(e) = trainer.run(next, &mut rows) {
            if let TrainError::NumericAbort(dump) = &e {
                fs::write(a.out.join(DUMP), serde_json::to_string_pretty(dump)?)?;
                write_metrics(fs::File::create(a.out.join(METRICS))?, &rows)?;
                run.artifact(&a.out, DUMP)?;
                run.artifact(&a.out, METRICS)?;
                run.write(&a.out)?;
                warn!("batch dump written to {}", a.out.join(DUMP).display());
            }
            return Err(e.into());
        }
        let losses: Vec<f64> = rows[start..].iter().filter_map(|r| r.loss_total).collect();
        if !losses.is_empty() {
            info!(
                "step {:>6}/{}  mean loss {:.5}",
                trainer.step(),
                config.iterations,
                losses.iter().sum::<f64>() / losses.len() as f64
            );
        }
    }
    finish_run(&a.out, &mut run, &trainer, &rows)?;
    run.write(&a.out)?;
    if let Some(e) = rows.iter().rev().find(|r| r.split == "test") {
        println!(
            "step {}: test LDR PSNR {}  SSIM {}  HDR PSNR {}  SSIM {}",
            e.step,
            fmt_opt(e.psnr_ldr),
            fmt_opt(e.ssim_ldr),
            fmt_opt(e.psnr_hdr_mulaw),
            fmt_opt(e.ssim_hdr_mulaw)
        );
    }
    println!("checkpoint at step {} written to {}", trainer.step(), a.out.join(CHECKPOINT).display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn read_pose_file(path: &Path) -> Result<Vec<(usize, Pose)>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let records: Vec<PoseRecord> =
        serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    records.iter().map(|r| Ok((r.index, r.pose()?))).collect()
}

pub fn render(a: &RenderArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut run = RunManifest::new("render");
    run.input(&a.checkpoint)?;
    let (bundle, targets) = match (&a.data, &a.poses) {
        (Some(dir), _) => {
            let b = load_data(dir)?;
            run.input(&dir.join(MANIFEST))?;
            run.dataset_hash = Some(bundle_hash(&b.manifest)?);
            let poses = b.manifest.poses()?;
            let views = if a.views.is_empty() {
                split_views(&b, a.split)
            } else {
                a.views.clone()
            };
            let mut t = Vec::new();
            for v in views {
                let pose = poses
                    .get(v)
                    .ok_or_else(|| CliError::usage(format!("view {v} not in the dataset ({} poses)", poses.len())))?;
                t.push((v, pose.clone()));
            }
            (Some(b), t)
        }
        (None, Some(p)) => {
            run.input(p)?;
            (None, read_pose_file(p)?)
        }
        (None, None) => return Err(CliError::usage("give --data or --poses")),
    };
    let n_samples = a.n_samples.unwrap_or(ckpt.config.n_samples);
    let background = bundle
        .as_ref()
        .map(|b| b.manifest.config.background)
        .unwrap_or(RenderOptions::default().background);
    let sub = match a.mode {
        RenderMode::Ldr => "ldr",
        RenderMode::Hdr => "hdr",
        RenderMode::HdrTonemapped => "hdr_tonemapped",
    };
    create_dir(&a.out.join(sub))?;
    for (v, pose) in &targets {
        let r = render_model(&ckpt.model, pose, n_samples, background)?;
        let rel = match a.mode {
            RenderMode::Ldr => {
                let rel = format!("{sub}/view_{v:03}.ppm");
                save_ppm(&a.out.join(&rel), &r.ldr)?;
                rel
            }
            RenderMode::Hdr => {
                let rel = format!("{sub}/view_{v:03}.pfm");
                save_pfm(&a.out.join(&rel), &r.hdr)?;
                rel
            }
            RenderMode::HdrTonemapped => {
                let (tm, degenerate) = tonemap_image(&r.hdr, a.mu)?;
                if degenerate {
                    warn!("view {v}: constant HDR image, tonemap is all zeros");
                }
                let rel = format!("{sub}/view_{v:03}.ppm");
                save_ppm(&a.out.join(&rel), &tm)?;
                rel
            }
        };
        run.artifact(&a.out, &rel)?;
        match (&bundle, a.mode) {
            (Some(b), RenderMode::Ldr) => {
                println!("view {v:3}: LDR PSNR {:.3} dB", psnr(&r.ldr, &b.ldr[*v], 1.0)?);
            }
            (Some(b), RenderMode::Hdr | RenderMode::HdrTonemapped) => {
                let (p, _) = hdr_metrics(&r.hdr, &b.hdr[*v], a.mu)?;
                println!("view {v:3}: tonemapped HDR PSNR {p:.3} dB");
            }
            _ => println!("view {v:3}: wrote {rel}"),
        }
    }
    run.write(&a.out)?;
    Ok(())
}

/// Per-view table with a trailing `mean` row. Absent HDR metrics are empty cells.
pub fn metrics_csv(rows: &[ViewMetrics]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("view,ldr_psnr,ldr_ssim,hdr_psnr,hdr_ssim\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.view,
            r.psnr_ldr,
            r.ssim_ldr,
            cell(r.psnr_hdr),
            cell(r.ssim_hdr)
        );
    }
    let m = mean_metrics(rows);
    let _ = writeln!(
        s,
        "mean,{},{},{},{}",
        m.psnr_ldr,
        m.ssim_ldr,
        cell(m.psnr_hdr),
        cell(m.ssim_hdr)
    );
    s
}

fn hdr_prediction(dir: &Path, view: usize) -> Option<PathBuf> {
    ["hdr", "hdr_gt"]
        .iter()
        .map(|sub| dir.join(format!("{sub}/view_{view:03}.pfm")))
        .find(|p| p.exists())
}

fn eval_pred_dir(dir: &Path, bundle: &DatasetBundle, views: &[usize], mu: f64) -> Result<Vec<ViewMetrics>, CliError> {
    let mut rows = Vec::new();
    let hdr_everywhere = views.iter().all(|&v| hdr_prediction(dir, v).is_some());
    for &v in views {
        let path = dir.join(format!("ldr/view_{v:03}.ppm"));
        let ldr = load_ppm(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let (psnr_hdr, ssim_hdr) = if hdr_everywhere {
            let hdr: Image = load_pfm(&hdr_prediction(dir, v).expect("checked above"))?;
            let (p, s) = hdr_metrics(&hdr, &bundle.hdr[v], mu)?;
            (Some(p), Some(s))
        } else {
            (None, None)
        };
        rows.push(ViewMetrics {
            view: v,
            psnr_ldr: psnr(&ldr, &bundle.ldr[v], 1.0)?,
            ssim_ldr: ssim(&ldr, &bundle.ldr[v])?,
            psnr_hdr,
            ssim_hdr,
        });
    }
    Ok(rows)
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let bundle = load_data(&a.data)?;
    let mut run = RunManifest::new("eval");
    run.input(&a.data.join(MANIFEST))?;
    run.dataset_hash = Some(bundle_hash(&bundle.manifest)?);
    let views = split_views(&bundle, a.split);
    create_dir(&a.out)?;
    let rows = if let Some(path) = &a.checkpoint {
        run.input(path)?;
        let ckpt = Checkpoint::load(path)?;
        let mut config = ckpt.config.clone();
        config.weights.mu = a.mu;
        let rows = evaluate(&ckpt.model, &bundle, &views, &config)?;
        let poses = bundle.manifest.poses()?;
        let ordered: Vec<Pose> = views.iter().map(|&v| poses[v].clone()).collect();
        let opts = RenderOptions {
            n_samples: ckpt.config.n_samples,
            jitter_seed: None,
            background: bundle.manifest.config.background,
        };
        let c = cross_view_consistency(&ckpt.model.field, &ordered, &opts, a.consistency_stride, a.consistency_tolerance)?;
        let mut json = serde_json::to_string_pretty(&c)?;
        json.push('\n');
        fs::write(a.out.join("consistency.json"), json)?;
        run.artifact(&a.out, "consistency.json")?;
        println!(
            "cross-view consistency: mean |dLDR| {:.5}  max {:.5} over {} surface points",
            c.mean_abs_diff, c.max_abs_diff, c.points
        );
        rows
    } else {
        let dir = a.pred_dir.as_ref().expect("clap requires one of the two");
        eval_pred_dir(dir, &bundle, &views, a.mu)?
    };
    let csv = metrics_csv(&rows);
    fs::write(a.out.join("eval.csv"), &csv)?;
    run.artifact(&a.out, "eval.csv")?;
    run.write(&a.out)?;
    print!("{}", csv.lines().last().map(|l| format!("{l}\n")).unwrap_or_default());
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let bundle = load_data(&a.data)?;
    let mut base = read_config(a.config.as_deref())?;
    if let Some(p) = a.profile {
        base.apply_profile(p);
    }
    if let Some(n) = a.iterations {
        base.iterations = n;
    }
    base.validate()?;
    let mut cells = ablation_cells();
    if !a.cells.is_empty() {
        for name in &a.cells {
            if !cells.iter().any(|c| &c.name == name) {
                let known: Vec<_> = cells.iter().map(|c| c.name.as_str()).collect();
                return Err(CliError::usage(format!("unknown cell {name:?} (known: {})", known.join(", "))));
            }
        }
        cells.retain(|c| a.cells.contains(&c.name));
    }
    if a.seeds.is_empty() {
        return Err(CliError::usage("at least one seed is needed"));
    }
    let mut run = RunManifest::new("ablate");
    run.input(&a.data.join(MANIFEST))?;
    if let Some(p) = &a.config {
        run.input(p)?;
    }
    run.dataset_hash = Some(bundle_hash(&bundle.manifest)?);
    run.config_hash = Some(sha256(config_json(&base)?.as_bytes()));
    create_dir(&a.out)?;

    let mut io_error = None;
    let rows = run_ablation(&bundle, &base, &cells, &a.seeds, |cell, seed, result| {
        let dir = a.out.join("cells").join(&cell.name).join(format!("seed_{seed}"));
        let write = || -> Result<(), CliError> {
            create_dir(&dir)?;
            let config = cell.config(&base, seed);
            let mut cell_run = RunManifest::new("ablate-cell");
            cell_run.seed = Some(seed);
            cell_run.config_hash = Some(sha256(config_json(&config)?.as_bytes()));
            cell_run.dataset_hash = run.dataset_hash.clone();
            fs::write(dir.join(CONFIG), config_json(&config)?)?;
            cell_run.artifact(&dir, CONFIG)?;
            match result {
                Ok(out) => {
                    out.checkpoint.save(&dir.join(CHECKPOINT))?;
                    write_metrics(fs::File::create(dir.join(METRICS))?, &out.history)?;
                    cell_run.artifact(&dir, CHECKPOINT)?;
                    cell_run.artifact(&dir, METRICS)?;
                    info!("cell {} seed {seed}: done", cell.name);
                }
                Err(e) => {
                    if let TrainError::NumericAbort(dump) = e {
                        fs::write(dir.join(DUMP), serde_json::to_string_pretty(dump)?)?;
                        cell_run.artifact(&dir, DUMP)?;
                    }
                    warn!("cell {} seed {seed} failed: {e}", cell.name);
                }
            }
            cell_run.write(&dir)
        };
        if let Err(e) = write() {
            io_error.get_or_insert(e);
        }
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let mut w = csv::Writer::from_path(a.out.join("ablation.csv")).map_err(|e| CliError::Io(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    let summary = summarize_ablation(&rows);
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(a.out.join("summary.json"), json)?;
    for f in ["ablation.csv", "summary.json"] {
        run.artifact(&a.out, f)?;
    }
    run.write(&a.out)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    println!("{} runs, {failed} failed; median tonemapped HDR PSNR per cell:", rows.len());
    for (cell, p) in &summary.median_hdr_psnr {
        println!("  {cell:<12} {p:.3}");
    }
    Ok(())
}

//! Joint optimization of the LDR field and both color converters.
//!
//! Every step renders one square patch of one training view. The LDR render
//! is compared with the LDR image; the same samples lifted through the
//! LDR→HDR converter give an HDR patch, compared with ground truth on views
//! that have it, and that HDR patch pushed back through the HDR→LDR
//! converter closes the loop against the LDR image again.
//!
//! All randomness of step `k` comes from a generator seeded with
//! `(seed, k)`, so a run resumed from a checkpoint at step `k` continues
//! exactly as the uninterrupted run would.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::converters::{Architecture, ColorMap, ConverterError, ConverterParams, ConverterSpec};
use crate::diffcore::{DiffError, Tape, Tensor};
use crate::image::Image;
use crate::objectives::{
    h2l_loss, hdr_loss, image_tensor, ldr_loss, total_loss, Dims, LossError, LossMode, LossTerms, LossWeights,
    Normalization,
};
use crate::optim::{exp_decay, Adam, AdamConfig, OptimError};
use crate::radiance_field::{
    generate_rays, render_hdr_from, render_ldr, Pose, RenderError, RenderOptions, SamplePlan, VoxelField,
};
use crate::synthdata::{DatasetBundle, SynthError};

mod ablate;
mod checkpoint;
mod eval;

pub use ablate::{ablate, ablation_cells, summarize_ablation, AblationCell, AblationRow, AblationSummary};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{cross_view_consistency, evaluate, mean_metrics, render_model, Consistency, ViewMetrics};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Converter(#[from] ConverterError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("training aborted at step {}: {}", .0.step, .0.reason)]
    NumericAbort(Box<BatchDump>),
}

/// Loss terms that can be switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ldr,
    Hdr,
    H2l,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ldr => "ldr",
            LossKind::Hdr => "hdr",
            LossKind::H2l => "h2l",
        }
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ldr" => Ok(LossKind::Ldr),
            "hdr" => Ok(LossKind::Hdr),
            "h2l" => Ok(LossKind::H2l),
            _ => Err(format!("unknown loss {s:?} (expected ldr, hdr or h2l)")),
        }
    }
}

/// `ldr+hdr+h2l` style label of a loss set.
pub fn loss_label(set: &BTreeSet<LossKind>) -> String {
    set.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
}

pub fn parse_loss_set(s: &str) -> Result<BTreeSet<LossKind>, String> {
    s.split(['+', ','])
        .filter(|p| !p.is_empty())
        .map(LossKind::from_str)
        .collect()
}

/// Hyperparameter presets over the same voxel backend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// beta 0.01 with mean-squared-error LDR terms.
    FieldStyle,
    /// beta 0.05 with L1 + D-SSIM LDR terms.
    SplatStyle,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::FieldStyle => "field-style",
            Profile::SplatStyle => "splat-style",
        })
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "field-style" => Ok(Profile::FieldStyle),
            "splat-style" => Ok(Profile::SplatStyle),
            _ => Err(format!("unknown profile {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Side of the square training patch; a step renders `patch_size²` rays.
    pub patch_size: u32,
    pub n_samples: usize,
    pub field_resolution: usize,
    /// Initial activated density of the trainable field.
    pub init_density: f64,
    pub field_lr: f64,
    pub field_lr_final: f64,
    pub l2h_lr: f64,
    pub l2h_lr_final: f64,
    pub h2l_lr: f64,
    pub h2l_lr_final: f64,
    pub weights: LossWeights,
    pub loss_mode: LossMode,
    pub normalization: Normalization,
    pub losses: BTreeSet<LossKind>,
    /// Fraction of training views whose HDR ground truth may be used.
    pub hdr_ratio: f64,
    /// Leading fraction of the run that uses the LDR term alone.
    pub warmup_fraction: f64,
    /// Keep the field fixed once the warm-up is over.
    pub freeze_field: bool,
    pub l2h: ConverterSpec,
    pub h2l: ConverterSpec,
    /// Evaluate every this many steps; 0 evaluates only after the last step.
    pub eval_every: u64,
    /// Number of test views used by periodic evaluation; 0 means all.
    pub eval_views: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::SplatStyle)
    }
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let (beta, loss_mode) = match profile {
            Profile::FieldStyle => (0.01, LossMode::Mse),
            Profile::SplatStyle => (0.05, LossMode::L1Dssim),
        };
        Self {
            iterations: 1500,
            patch_size: 16,
            n_samples: 64,
            field_resolution: 32,
            init_density: 0.1,
            field_lr: 0.1,
            field_lr_final: 0.01,
            l2h_lr: 5e-4,
            l2h_lr_final: 5e-5,
            h2l_lr: 1e-3,
            h2l_lr_final: 5e-4,
            weights: LossWeights {
                beta,
                ..LossWeights::default()
            },
            loss_mode,
            normalization: Normalization::default(),
            losses: [LossKind::Ldr, LossKind::Hdr, LossKind::H2l].into_iter().collect(),
            hdr_ratio: 1.0,
            warmup_fraction: 0.1,
            freeze_field: false,
            l2h: ConverterSpec::l2h(16),
            h2l: ConverterSpec::h2l(16),
            eval_every: 0,
            eval_views: 0,
            seed: 0,
        }
    }

    /// Overwrites the fields a profile controls.
    pub fn apply_profile(&mut self, profile: Profile) {
        let p = Self::profile(profile);
        self.weights.beta = p.weights.beta;
        self.loss_mode = p.loss_mode;
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be > 0".into());
        }
        if self.patch_size < 2 {
            return bad("patch_size must be >= 2".into());
        }
        if self.n_samples < 2 {
            return bad("n_samples must be >= 2".into());
        }
        if self.field_resolution < 2 {
            return bad("field_resolution must be >= 2".into());
        }
        if !(self.init_density > 0.0 && self.init_density.is_finite()) {
            return bad("init_density must be > 0".into());
        }
        for (name, lr, last) in [
            ("field", self.field_lr, self.field_lr_final),
            ("l2h", self.l2h_lr, self.l2h_lr_final),
            ("h2l", self.h2l_lr, self.h2l_lr_final),
        ] {
            if !(lr > 0.0 && lr.is_finite() && last > 0.0) {
                return bad(format!("{name} learning rates must be > 0"));
            }
            if !(last < lr) {
                return bad(format!("{name} decay target {last} must be below the initial rate {lr}"));
            }
        }
        self.weights.validate()?;
        if self.losses.is_empty() {
            return bad("at least one loss must be enabled".into());
        }
        if !(0.0..=1.0).contains(&self.hdr_ratio) {
            return bad("hdr_ratio must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1)".into());
        }
        if self.l2h.direction != crate::converters::Direction::LdrToHdr
            || self.h2l.direction != crate::converters::Direction::HdrToLdr
        {
            return bad("converter directions are swapped".into());
        }
        for spec in [self.l2h, self.h2l] {
            if spec.hidden == 0 || spec.depth == 0 {
                return bad("converter hidden width and depth must be >= 1".into());
            }
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        if self.losses.contains(&LossKind::Ldr) {
            (self.warmup_fraction * self.iterations as f64).floor() as u64
        } else {
            0
        }
    }

    /// Whether any term trains the LDR→HDR converter.
    pub fn trains_hdr(&self) -> bool {
        self.losses.contains(&LossKind::Hdr) || self.losses.contains(&LossKind::H2l)
    }

    pub fn learning_rates(&self, step: u64) -> [f64; 3] {
        let last = self.iterations - 1;
        [
            exp_decay(self.field_lr, self.field_lr_final, step, last),
            exp_decay(self.l2h_lr, self.l2h_lr_final, step, last),
            exp_decay(self.h2l_lr, self.h2l_lr_final, step, last),
        ]
    }
}

/// Everything that is optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub field: VoxelField,
    pub l2h: ConverterParams,
    pub h2l: ConverterParams,
}

impl Model {
    pub fn init(config: &TrainConfig, bundle: &DatasetBundle) -> Self {
        let res = config.field_resolution;
        let bbox = bundle.manifest.config.scene.bbox;
        Self {
            field: VoxelField::init_trainable([res; 3], bbox, config.init_density, config.seed),
            l2h: ConverterParams::init(config.l2h, config.seed.wrapping_add(1)),
            h2l: ConverterParams::init(config.h2l, config.seed.wrapping_add(2)),
        }
    }
}

/// Adam state of the three parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub field: Adam,
    pub l2h: Adam,
    pub h2l: Adam,
}

impl Optimizers {
    pub fn new(model: &Model) -> Self {
        let field = [
            Tensor::vector(vec![0.0; model.field.density.len()]),
            Tensor::vector(vec![0.0; model.field.color.len()]),
        ];
        Self {
            field: Adam::new("field", &field, AdamConfig::default()),
            l2h: Adam::new("l2h", &model.l2h.tensors, AdamConfig::default()),
            h2l: Adam::new("h2l", &model.h2l.tensors, AdamConfig::default()),
        }
    }
}

/// Loss values of one step; absent terms were not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub total: Option<f64>,
    pub ldr: Option<f64>,
    pub hdr: Option<f64>,
    pub h2l: Option<f64>,
}

/// State written out when a step produces a non-finite value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchDump {
    pub step: u64,
    pub view: usize,
    pub patch_origin: (u32, u32),
    pub patch_size: u32,
    pub jitter_seed: u64,
    pub reason: String,
    pub losses: LossValues,
    pub gt_ldr: Vec<f64>,
    pub gt_hdr: Option<Vec<f64>>,
    pub learning_rates: [f64; 3],
    pub non_finite_params: Vec<String>,
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: u64,
    pub split: String,
    pub psnr_ldr: Option<f64>,
    pub ssim_ldr: Option<f64>,
    pub psnr_hdr_mulaw: Option<f64>,
    pub ssim_hdr_mulaw: Option<f64>,
    pub loss_total: Option<f64>,
    pub loss_ldr: Option<f64>,
    pub loss_hdr: Option<f64>,
    pub loss_h2l: Option<f64>,
}

pub fn write_metrics<W: std::io::Write>(w: W, rows: &[MetricRow]) -> Result<(), TrainError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn is_numeric(e: &TrainError) -> bool {
    let diff = |d: &DiffError| matches!(d, DiffError::NonFinite { .. });
    match e {
        TrainError::Diff(d) => diff(d),
        TrainError::Render(RenderError::Diff(d)) => diff(d),
        TrainError::Loss(LossError::Diff(d)) => diff(d),
        TrainError::Converter(ConverterError::Diff(d)) => diff(d),
        TrainError::Optim(OptimError::NonFiniteGrad { .. }) => true,
        TrainError::Converter(ConverterError::Optim(OptimError::NonFiniteGrad { .. })) => true,
        _ => false,
    }
}

pub struct Trainer<'a> {
    config: TrainConfig,
    bundle: &'a DatasetBundle,
    poses: Vec<Pose>,
    /// Per view: may its HDR ground truth be used.
    supervised: Vec<bool>,
    pub model: Model,
    pub optim: Optimizers,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(bundle: &'a DatasetBundle, config: TrainConfig) -> Result<Self, TrainError> {
        let model = Model::init(&config, bundle);
        let optim = Optimizers::new(&model);
        Self::from_parts(bundle, config, model, optim, 0)
    }

    pub fn resume(bundle: &'a DatasetBundle, ckpt: Checkpoint) -> Result<Self, TrainError> {
        Self::from_parts(bundle, ckpt.config, ckpt.model, ckpt.optim, ckpt.step)
    }

    pub fn from_parts(
        bundle: &'a DatasetBundle,
        config: TrainConfig,
        model: Model,
        optim: Optimizers,
        step: u64,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let m = &bundle.manifest;
        if bundle.ldr.len() != m.poses.len() || bundle.hdr.len() != m.poses.len() {
            return Err(TrainError::Config("bundle images do not match its poses".into()));
        }
        let poses = m.poses()?;
        for &v in &m.train {
            let k = &poses[v].intrinsics;
            if config.patch_size > k.width || config.patch_size > k.height {
                return Err(TrainError::Config(format!(
                    "patch {} larger than the {}x{} views",
                    config.patch_size, k.width, k.height
                )));
            }
        }
        if model.l2h.spec != config.l2h || model.h2l.spec != config.h2l {
            return Err(TrainError::Config("converter shapes differ from the config".into()));
        }
        let mut order = m.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x4844_5253));
        let keep = (config.hdr_ratio * order.len() as f64).round() as usize;
        let mut supervised = vec![false; poses.len()];
        for &v in &order[..keep] {
            supervised[v] = true;
        }
        Ok(Self {
            config,
            bundle,
            poses,
            supervised,
            model,
            optim,
            step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn supervised_views(&self) -> Vec<usize> {
        (0..self.supervised.len()).filter(|&v| self.supervised[v]).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            model: self.model.clone(),
            optim: self.optim.clone(),
        }
    }

    fn render_options(&self, jitter: Option<u64>) -> RenderOptions {
        RenderOptions {
            n_samples: self.config.n_samples,
            jitter_seed: jitter,
            background: self.bundle.manifest.config.background,
        }
    }

    /// Picks a view and patch, preferring patches that show some content.
    fn pick_patch(&self, rng: &mut ChaCha8Rng) -> (usize, u32, u32) {
        let train = &self.bundle.manifest.train;
        let p = self.config.patch_size;
        let mut pick = (0, 0, 0);
        for _ in 0..8 {
            let view = train[rng.gen_range(0..train.len())];
            let img = &self.bundle.ldr[view];
            let x0 = rng.gen_range(0..=img.width - p);
            let y0 = rng.gen_range(0..=img.height - p);
            pick = (view, x0, y0);
            if img.crop(x0, y0, p, p).data.iter().any(|&v| v > 0.0) {
                break;
            }
        }
        pick
    }

    /// Runs one optimization step.
    pub fn train_step(&mut self) -> Result<LossValues, TrainError> {
        let s = self.step;
        let mut rng = step_rng(self.config.seed, s);
        let (view, x0, y0) = self.pick_patch(&mut rng);
        let jitter: u64 = rng.gen();
        let p = self.config.patch_size;
        let gt_ldr = self.bundle.ldr[view].crop(x0, y0, p, p);
        let gt_hdr = self.bundle.hdr[view].crop(x0, y0, p, p);
        let lrs = self.config.learning_rates(s);
        let mut values = LossValues::default();
        match self.step_inner(view, x0, y0, jitter, &gt_ldr, &gt_hdr, lrs, &mut values) {
            Ok(()) => {
                self.step += 1;
                Ok(values)
            }
            Err(e) if is_numeric(&e) => Err(TrainError::NumericAbort(Box::new(BatchDump {
                step: s,
                view,
                patch_origin: (x0, y0),
                patch_size: p,
                jitter_seed: jitter,
                reason: e.to_string(),
                losses: values,
                gt_ldr: gt_ldr.data,
                gt_hdr: self.supervised[view].then_some(gt_hdr.data),
                learning_rates: lrs,
                non_finite_params: self.non_finite_params(),
            }))),
            Err(e) => Err(e),
        }
    }

    fn non_finite_params(&self) -> Vec<String> {
        let mut out = Vec::new();
        let f = &self.model.field;
        if f.density.iter().any(|v| !v.is_finite()) {
            out.push("field.density".into());
        }
        if f.color.iter().any(|v| !v.is_finite()) {
            out.push("field.color".into());
        }
        for (group, params) in [("l2h", &self.model.l2h), ("h2l", &self.model.h2l)] {
            for ((name, _), t) in params.spec.layout().iter().zip(&params.tensors) {
                if !t.is_finite() {
                    out.push(format!("{group}.{name}"));
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn step_inner(
        &mut self,
        view: usize,
        x0: u32,
        y0: u32,
        jitter: u64,
        gt_ldr: &Image,
        gt_hdr: &Image,
        lrs: [f64; 3],
        values: &mut LossValues,
    ) -> Result<(), TrainError> {
        let cfg = &self.config;
        let p = cfg.patch_size;
        let warm = self.step < cfg.warmup_steps();
        let on = |k: LossKind| cfg.losses.contains(&k);
        let use_ldr = on(LossKind::Ldr);
        let hdr_range = gt_hdr.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        // A flat ground-truth patch has no tonemapped range to compare against.
        let use_hdr = on(LossKind::Hdr) && !warm && self.supervised[view] && hdr_range.1 > hdr_range.0;
        let use_h2l = on(LossKind::H2l) && !warm;
        let train_field = !(cfg.freeze_field && !warm);

        let pixels: Vec<(u32, u32)> = (y0..y0 + p).flat_map(|y| (x0..x0 + p).map(move |x| (x, y))).collect();
        let rays = generate_rays(&self.poses[view], &pixels)?;
        let opts = self.render_options(Some(jitter));
        let plan = SamplePlan::new(&self.model.field, &rays, &opts)?;
        let dims = Dims {
            width: p as usize,
            height: p as usize,
        };

        let mut tape = Tape::new();
        let field = self.model.field.bind(&mut tape, train_field)?;
        let ldr = render_ldr(&mut tape, &field, &plan, opts.background)?;
        let gt_l = tape.constant(image_tensor(gt_ldr))?;
        let w = &cfg.weights;
        let mut terms = LossTerms::default();
        if use_ldr {
            terms.ldr = Some(ldr_loss(&mut tape, ldr.color, gt_l, dims, w.lambda, cfg.loss_mode)?);
        }
        let mut l2h = None;
        let mut h2l = None;
        if use_hdr || use_h2l {
            let bl = self.model.l2h.bind(&mut tape, true)?;
            let hdr = render_hdr_from(&mut tape, &ldr, &bl, opts.background)?;
            if use_hdr {
                let gt_h = tape.constant(image_tensor(gt_hdr))?;
                terms.hdr = Some(hdr_loss(&mut tape, hdr, gt_h, w.mu, cfg.normalization)?);
            }
            if use_h2l {
                let bh = self.model.h2l.bind(&mut tape, true)?;
                let back = bh.apply(&mut tape, hdr)?;
                terms.h2l = Some(h2l_loss(&mut tape, back, gt_l, dims, w.lambda, cfg.loss_mode)?);
                h2l = Some(bh);
            }
            l2h = Some(bl);
        }
        let read = |tape: &Tape, v: Option<crate::diffcore::Var>| v.map(|v| tape.value(v).data()[0]);
        values.ldr = read(&tape, terms.ldr);
        values.hdr = read(&tape, terms.hdr);
        values.h2l = read(&tape, terms.h2l);
        if terms.ldr.is_none() && terms.hdr.is_none() && terms.h2l.is_none() {
            return Ok(());
        }
        let total = total_loss(&mut tape, terms, w)?;
        values.total = read(&tape, Some(total));
        let grads = tape.backward(total)?;

        if train_field {
            let g = [grads.get_or_zeros(field.density_raw), grads.get_or_zeros(field.color_raw)];
            let f = &mut self.model.field;
            let mut params = [
                Tensor::vector(std::mem::take(&mut f.density)),
                Tensor::vector(std::mem::take(&mut f.color)),
            ];
            let res = self.optim.field.step(&mut params, &g, lrs[0]);
            let [d, c] = params;
            f.density = d.into_data();
            f.color = c.into_data();
            res?;
        }
        if let Some(bl) = l2h {
            let g: Vec<Vec<f64>> = bl.vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
            self.optim.l2h.step(&mut self.model.l2h.tensors, &g, lrs[1])?;
        }
        if let Some(bh) = h2l {
            let g: Vec<Vec<f64>> = bh.vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
            self.optim.h2l.step(&mut self.model.h2l.tensors, &g, lrs[2])?;
        }
        Ok(())
    }

    /// Mean metrics over the periodic-evaluation views.
    pub fn eval_row(&self) -> Result<MetricRow, TrainError> {
        let test = &self.bundle.manifest.test;
        let n = if self.config.eval_views == 0 {
            test.len()
        } else {
            self.config.eval_views.min(test.len())
        };
        let metrics = evaluate(&self.model, self.bundle, &test[..n], &self.config)?;
        let mean = mean_metrics(&metrics);
        Ok(MetricRow {
            step: self.step,
            split: "test".into(),
            psnr_ldr: Some(mean.psnr_ldr),
            ssim_ldr: Some(mean.ssim_ldr),
            psnr_hdr_mulaw: mean.psnr_hdr,
            ssim_hdr_mulaw: mean.ssim_hdr,
            ..MetricRow::default()
        })
    }

    /// Trains up to `until` steps (capped at the configured budget), pushing
    /// one `train` row per step and `test` rows at evaluation points. The
    /// last step of the budget is always evaluated.
    pub fn run(&mut self, until: u64, rows: &mut Vec<MetricRow>) -> Result<(), TrainError> {
        let until = until.min(self.config.iterations);
        while self.step < until {
            let v = self.train_step()?;
            rows.push(MetricRow {
                step: self.step,
                split: "train".into(),
                loss_total: v.total,
                loss_ldr: v.ldr,
                loss_hdr: v.hdr,
                loss_h2l: v.h2l,
                ..MetricRow::default()
            });
            let every = self.config.eval_every;
            if self.step == self.config.iterations || (every > 0 && self.step % every == 0) {
                rows.push(self.eval_row()?);
            }
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<MetricRow>,
}

impl TrainOutcome {
    /// The last `test` row.
    pub fn final_eval(&self) -> Option<&MetricRow> {
        self.history.iter().rev().find(|r| r.split == "test")
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.history
            .iter()
            .filter(|r| r.split == "train")
            .filter_map(|r| r.loss_total)
            .collect()
    }
}

/// Trains from scratch for the full budget.
pub fn train(bundle: &DatasetBundle, config: TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut t = Trainer::new(bundle, config)?;
    let mut history = Vec::new();
    t.run(u64::MAX, &mut history)?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        history,
    })
}

/// Whether a converter spec uses the structured or the plain design.
pub fn architecture_label(a: Architecture) -> &'static str {
    match a {
        Architecture::ImagingAware => "imaging-aware",
        Architecture::PlainMlp => "plain-mlp",
    }
}

#[cfg(test)]
mod tests;

//! Training losses and image-quality metrics.
//!
//! Images on the tape are `[H*W, 3]` tensors in row-major pixel order.
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) applied separably as two band
//! matrices, with zero padding so the SSIM map has the input's size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("negative loss weight {name} = {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("mu must be > 0, got {0}")]
    BadMu(f64),
    #[error("image shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// L1 plus weighted D-SSIM for the LDR terms.
    L1Dssim,
    /// Plain mean squared error for the LDR terms.
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.05,
            lambda: 0.2,
            mu: 5000.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(value >= 0.0) {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(LossError::BadMu(self.mu));
        }
        Ok(())
    }
}

/// How the min-max normalization inside the tonemap is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    /// Treat the per-image min and max as constants in the backward pass.
    pub stop_gradient: bool,
    /// Normalize the prediction with the ground truth's min and max.
    pub shared: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            stop_gradient: true,
            shared: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
}

impl Dims {
    pub fn of(img: &Image) -> Self {
        Self {
            width: img.width as usize,
            height: img.height as usize,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

fn check_pair(tape: &Tape, a: Var, b: Var, dims: Dims) -> Result<(), LossError> {
    let want = [dims.pixels(), 3];
    for v in [a, b] {
        if tape.shape(v) != want {
            return Err(LossError::Shape(format!(
                "expected {want:?} for a {}x{} image, got {:?}",
                dims.width,
                dims.height,
                tape.shape(v)
            )));
        }
    }
    Ok(())
}

pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::from_parts(vec![img.pixel_count(), 3], img.data.clone())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// `[n, n]` matrix applying the zero-padded window along one axis.
fn band_matrix(n: usize) -> Vec<f64> {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let r = SSIM_WINDOW / 2;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = j as isize - i as isize;
            if d.unsigned_abs() <= r {
                m[i * n + j] = taps[(d + r as isize) as usize];
            }
        }
    }
    m
}

struct Blur {
    rows: Var,
    cols_t: Var,
}

impl Blur {
    fn new(tape: &mut Tape, dims: Dims) -> Result<Self, DiffError> {
        let rows = tape.constant(Tensor::matrix(dims.height, dims.height, band_matrix(dims.height))?)?;
        // The band matrix is symmetric, so it is its own transpose.
        let cols_t = tape.constant(Tensor::matrix(dims.width, dims.width, band_matrix(dims.width))?)?;
        Ok(Self { rows, cols_t })
    }

    fn apply(&self, tape: &mut Tape, plane: Var) -> Result<Var, DiffError> {
        let a = tape.matmul(self.rows, plane)?;
        tape.matmul(a, self.cols_t)
    }
}

/// Mean SSIM over all pixels and channels, as a tape scalar.
pub fn ssim_var(tape: &mut Tape, pred: Var, gt: Var, dims: Dims) -> Result<Var, LossError> {
    check_pair(tape, pred, gt, dims)?;
    let blur = Blur::new(tape, dims)?;
    let c1 = tape.scalar(SSIM_C1)?;
    let c2 = tape.scalar(SSIM_C2)?;
    let mut channel_means = Vec::with_capacity(3);
    for ch in 0..3 {
        let x = tape.column(pred, ch)?;
        let x = tape.reshape(x, &[dims.height, dims.width])?;
        let y = tape.column(gt, ch)?;
        let y = tape.reshape(y, &[dims.height, dims.width])?;
        let mx = blur.apply(tape, x)?;
        let my = blur.apply(tape, y)?;
        let xx = tape.mul(x, x)?;
        let yy = tape.mul(y, y)?;
        let xy = tape.mul(x, y)?;
        let exx = blur.apply(tape, xx)?;
        let eyy = blur.apply(tape, yy)?;
        let exy = blur.apply(tape, xy)?;
        let mx2 = tape.mul(mx, mx)?;
        let my2 = tape.mul(my, my)?;
        let mxy = tape.mul(mx, my)?;
        let vx = tape.sub(exx, mx2)?;
        let vy = tape.sub(eyy, my2)?;
        let cxy = tape.sub(exy, mxy)?;

        let a = tape.scale(mxy, 2.0)?;
        let a = tape.add(a, c1)?;
        let b = tape.scale(cxy, 2.0)?;
        let b = tape.add(b, c2)?;
        let num = tape.mul(a, b)?;
        let c = tape.add(mx2, my2)?;
        let c = tape.add(c, c1)?;
        let d = tape.add(vx, vy)?;
        let d = tape.add(d, c2)?;
        let den = tape.mul(c, d)?;
        let map = tape.div(num, den)?;
        channel_means.push(tape.mean(map)?);
    }
    let s = tape.add(channel_means[0], channel_means[1])?;
    let s = tape.add(s, channel_means[2])?;
    Ok(tape.scale(s, 1.0 / 3.0)?)
}

pub fn l1_var(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var, DiffError> {
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

pub fn mse_var(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var, DiffError> {
    let d = tape.sub(pred, gt)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// `L1 + lambda * (1 - SSIM) / 2`, or plain MSE in [`LossMode::Mse`].
pub fn ldr_loss(tape: &mut Tape, pred: Var, gt: Var, dims: Dims, lambda: f64, mode: LossMode) -> Result<Var, LossError> {
    check_pair(tape, pred, gt, dims)?;
    if !(lambda >= 0.0) {
        return Err(LossError::NegativeWeight { name: "lambda", value: lambda });
    }
    match mode {
        LossMode::Mse => Ok(mse_var(tape, pred, gt)?),
        LossMode::L1Dssim => {
            let l1 = l1_var(tape, pred, gt)?;
            if lambda == 0.0 {
                return Ok(l1);
            }
            let s = ssim_var(tape, pred, gt, dims)?;
            let one = tape.scalar(1.0)?;
            let dssim = tape.sub(one, s)?;
            let dssim = tape.scale(dssim, 0.5 * lambda)?;
            Ok(tape.add(l1, dssim)?)
        }
    }
}

/// Closed-loop term: same function as the LDR loss, applied to the
/// HDR-to-LDR conversion of the HDR render.
pub fn h2l_loss(tape: &mut Tape, pred: Var, gt: Var, dims: Dims, lambda: f64, mode: LossMode) -> Result<Var, LossError> {
    ldr_loss(tape, pred, gt, dims, lambda, mode)
}

/// Output of [`mulaw_tonemap`]. `degenerate` is set when the normalizing
/// range was empty and the result was defined as all zeros.
#[derive(Clone, Copy, Debug)]
pub struct Tonemapped {
    pub var: Var,
    pub degenerate: bool,
}

/// `log(1 + mu * n) / log(1 + mu)` with `n` the min-max normalized image.
/// With `range` given, normalizes by that `(min, max)` pair instead of the
/// image's own and clamps `n` below at zero.
pub fn mulaw_tonemap(
    tape: &mut Tape,
    img: Var,
    mu: f64,
    stop_gradient: bool,
    range: Option<(Var, Var)>,
) -> Result<Tonemapped, LossError> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(LossError::BadMu(mu));
    }
    let (lo, hi) = match range {
        Some(r) => r,
        None => {
            let lo = tape.min(img)?;
            let hi = tape.max(img)?;
            if stop_gradient {
                (tape.stop_gradient(lo)?, tape.stop_gradient(hi)?)
            } else {
                (lo, hi)
            }
        }
    };
    mulaw_between(tape, img, lo, hi, mu, range.is_some())
}

/// Tonemap with an explicit normalizing range.
fn mulaw_between(tape: &mut Tape, img: Var, lo: Var, hi: Var, mu: f64, clamp: bool) -> Result<Tonemapped, LossError> {
    let (vlo, vhi) = (tape.value(lo).data()[0], tape.value(hi).data()[0]);
    if !(vhi > vlo) {
        let zeros = Tensor::zeros(tape.shape(img));
        return Ok(Tonemapped {
            var: tape.constant(zeros)?,
            degenerate: true,
        });
    }
    let shifted = tape.sub(img, lo)?;
    let span = tape.sub(hi, lo)?;
    let mut n = tape.div(shifted, span)?;
    if clamp {
        n = tape.clamp(n, 0.0, f64::MAX)?;
    }
    let scaled = tape.scale(n, mu)?;
    let one = tape.scalar(1.0)?;
    let lifted = tape.add(scaled, one)?;
    let logged = tape.log(lifted)?;
    let denom = tape.scalar((1.0 + mu).ln())?;
    Ok(Tonemapped {
        var: tape.div(logged, denom)?,
        degenerate: false,
    })
}

/// Squared error between the tonemapped prediction and ground truth.
pub fn hdr_loss(tape: &mut Tape, pred: Var, gt: Var, mu: f64, norm: Normalization) -> Result<Var, LossError> {
    if tape.shape(pred) != tape.shape(gt) {
        return Err(LossError::Shape(format!(
            "{:?} vs {:?}",
            tape.shape(pred),
            tape.shape(gt)
        )));
    }
    let tg = mulaw_tonemap(tape, gt, mu, true, None)?;
    let tp = if norm.shared {
        let lo = tape.min(gt)?;
        let lo = tape.stop_gradient(lo)?;
        let hi = tape.max(gt)?;
        let hi = tape.stop_gradient(hi)?;
        mulaw_tonemap(tape, pred, mu, norm.stop_gradient, Some((lo, hi)))?
    } else {
        mulaw_tonemap(tape, pred, mu, norm.stop_gradient, None)?
    };
    Ok(mse_var(tape, tp.var, tg.var)?)
}

/// Loss components of one step. A missing term is left out of the sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub ldr: Option<Var>,
    pub hdr: Option<Var>,
    pub h2l: Option<Var>,
}

/// `ldr + alpha * hdr + beta * h2l` over the present terms.
pub fn total_loss(tape: &mut Tape, terms: LossTerms, weights: &LossWeights) -> Result<Var, LossError> {
    weights.validate()?;
    let mut parts = Vec::new();
    if let Some(v) = terms.ldr {
        parts.push(v);
    }
    if let Some(v) = terms.hdr {
        parts.push(tape.scale(v, weights.alpha)?);
    }
    if let Some(v) = terms.h2l {
        parts.push(tape.scale(v, weights.beta)?);
    }
    let Some((&first, rest)) = parts.split_first() else {
        return Err(LossError::Diff(DiffError::InvalidArgument {
            op: "total_loss",
            msg: "no loss terms".into(),
        }));
    };
    let mut acc = first;
    for &p in rest {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

fn check_images(a: &Image, b: &Image) -> Result<(), LossError> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(LossError::Shape(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )))
    }
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64, LossError> {
    check_images(pred, gt)?;
    let mut tape = Tape::new();
    let p = tape.constant(image_tensor(pred))?;
    let g = tape.constant(image_tensor(gt))?;
    let m = mse_var(&mut tape, p, g)?;
    Ok(tape.value(m).data()[0])
}

/// `10 log10(peak^2 / MSE)`; `+inf` for identical images.
pub fn psnr(pred: &Image, gt: &Image, peak: f64) -> Result<f64, LossError> {
    let m = mse(pred, gt)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / m).log10()
    })
}

pub fn ssim(pred: &Image, gt: &Image) -> Result<f64, LossError> {
    check_images(pred, gt)?;
    let mut tape = Tape::new();
    let p = tape.constant(image_tensor(pred))?;
    let g = tape.constant(image_tensor(gt))?;
    let s = ssim_var(&mut tape, p, g, Dims::of(pred))?;
    Ok(tape.value(s).data()[0])
}

/// Tonemapped copy of an HDR image and the degenerate-range flag.
pub fn tonemap_image(img: &Image, mu: f64) -> Result<(Image, bool), LossError> {
    let mut tape = Tape::new();
    let v = tape.constant(image_tensor(img))?;
    let t = mulaw_tonemap(&mut tape, v, mu, true, None)?;
    let data = tape.value(t.var).data().to_vec();
    Ok((
        Image {
            width: img.width,
            height: img.height,
            data,
        },
        t.degenerate,
    ))
}

/// PSNR and SSIM of two HDR images in the tonemapped domain (peak 1).
pub fn hdr_metrics(pred: &Image, gt: &Image, mu: f64) -> Result<(f64, f64), LossError> {
    check_images(pred, gt)?;
    let (tp, _) = tonemap_image(pred, mu)?;
    let (tg, _) = tonemap_image(gt, mu)?;
    Ok((psnr(&tp, &tg, 1.0)?, ssim(&tp, &tg)?))
}

#[cfg(test)]
mod tests;

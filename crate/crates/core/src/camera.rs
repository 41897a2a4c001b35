//! Linear LDR image formation: exposure scaling, offset current, additive
//! sensor noise and a hard saturation ceiling. Also the exact inverse used as
//! an analytic reference for the learned converters.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("invalid camera parameters: {0}")]
    InvalidParams(String),
    #[error("HDR value must be finite and non-negative, got {0}")]
    NegativeRadiance(f64),
    #[error("invalid exposure ladder: {0}")]
    InvalidLadder(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    /// Exposure time in seconds.
    pub delta_t: f64,
    /// Sensor gain.
    pub gain: f64,
    /// Constant offset current, in normalized pixel units.
    pub i0: f64,
    /// Saturation ceiling.
    pub i_max: f64,
    /// Standard deviation of the additive Gaussian sensor noise.
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for CameraParams {
    fn default() -> Self {
        Self {
            delta_t: 1.0,
            gain: 1.0,
            i0: 0.0,
            i_max: 1.0,
            noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

impl CameraParams {
    pub fn validate(&self) -> Result<(), CameraError> {
        let all_finite = [self.delta_t, self.gain, self.i0, self.i_max, self.noise_sigma]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(CameraError::InvalidParams("non-finite value".into()));
        }
        if self.delta_t <= 0.0 {
            return Err(CameraError::InvalidParams(format!("delta_t = {} must be > 0", self.delta_t)));
        }
        if self.gain <= 0.0 {
            return Err(CameraError::InvalidParams(format!("gain = {} must be > 0", self.gain)));
        }
        if !(self.i0 >= 0.0 && self.i_max > self.i0) {
            return Err(CameraError::InvalidParams(format!(
                "need i_max > i0 >= 0, got i0 = {}, i_max = {}",
                self.i0, self.i_max
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(CameraError::InvalidParams("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// `delta_t / gain`, the only scale that reaches the pixel.
    pub fn exposure_scale(&self) -> f64 {
        self.delta_t / self.gain
    }

    /// Same camera at a different exposure time.
    pub fn with_exposure(&self, delta_t: f64) -> Self {
        Self {
            delta_t,
            ..self.clone()
        }
    }

    /// Largest HDR value that stays unsaturated without noise.
    pub fn saturation_radiance(&self) -> f64 {
        (self.i_max - self.i0) / self.exposure_scale()
    }

    /// Draws one noise sample, clamped so the ideal reading stays non-negative.
    pub fn draw_noise<R: Rng + ?Sized>(&self, hdr: f64, rng: &mut R) -> f64 {
        if self.noise_sigma == 0.0 {
            return 0.0;
        }
        let normal = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
        let eps: f64 = normal.sample(rng);
        eps.max(-(self.exposure_scale() * hdr + self.i0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureLadder {
    pub times: Vec<f64>,
}

impl Default for ExposureLadder {
    fn default() -> Self {
        Self {
            times: vec![0.125, 0.25, 0.5, 1.0, 2.0],
        }
    }
}

impl ExposureLadder {
    pub fn new(times: Vec<f64>) -> Result<Self, CameraError> {
        let ladder = Self { times };
        ladder.validate()?;
        Ok(ladder)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if self.times.is_empty() {
            return Err(CameraError::InvalidLadder("empty".into()));
        }
        if self.times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(CameraError::InvalidLadder("times must be positive".into()));
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CameraError::InvalidLadder("times must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn get(&self, index: usize) -> Result<f64, CameraError> {
        self.times.get(index).copied().ok_or_else(|| {
            CameraError::InvalidLadder(format!(
                "exposure index {index} out of range for {} times",
                self.times.len()
            ))
        })
    }
}

fn check_hdr(hdr: f64) -> Result<(), CameraError> {
    if hdr.is_finite() && hdr >= 0.0 {
        Ok(())
    } else {
        Err(CameraError::NegativeRadiance(hdr))
    }
}

/// Reading of an infinitely capable sensor, before clipping.
fn ideal(hdr: f64, params: &CameraParams, noise: f64) -> f64 {
    params.exposure_scale() * hdr + params.i0 + noise
}

/// LDR reading `min(dt/g * hdr + i0 + eps, i_max)`, floored at zero.
/// Saturated pixels return exactly `i_max`.
pub fn simulate_ldr(hdr: f64, params: &CameraParams, noise: f64) -> Result<f64, CameraError> {
    check_hdr(hdr)?;
    let v = ideal(hdr, params, noise);
    Ok(if v >= params.i_max {
        params.i_max
    } else {
        v.max(0.0)
    })
}

/// Amount lost to saturation; zero exactly on unsaturated pixels.
pub fn overflow(hdr: f64, params: &CameraParams, noise: f64) -> f64 {
    (ideal(hdr, params, noise) - params.i_max).max(0.0)
}

/// Inverse formation `g/dt * (ldr - i0 + overflow) - g/dt * eps`.
pub fn ldr_to_hdr_ideal(ldr: f64, params: &CameraParams, overflow: f64, noise: f64) -> f64 {
    let k = 1.0 / params.exposure_scale();
    k * (ldr - params.i0 + overflow) - k * noise
}

/// Split of the LDR reading into the scaled radiance `D` and the offset and
/// correction term `B`, with `D + B` equal to the clipped reading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FormationTerms {
    pub scaled: f64,
    pub offset: f64,
}

impl FormationTerms {
    pub fn total(&self) -> f64 {
        self.scaled + self.offset
    }
}

pub fn hdr_to_ldr_terms(
    hdr: f64,
    params: &CameraParams,
    noise: f64,
) -> Result<FormationTerms, CameraError> {
    check_hdr(hdr)?;
    Ok(FormationTerms {
        scaled: params.exposure_scale() * hdr,
        offset: params.i0 + noise - overflow(hdr, params, noise),
    })
}

/// The noise-free inverse `g/dt * (c - i0)` as a tape operation on a color
/// tensor; exact on unsaturated inputs.
pub fn analytic_inverse(tape: &mut Tape, params: &CameraParams, colors: Var) -> Result<Var, DiffError> {
    let offset = tape.scalar(params.i0)?;
    let shifted = tape.sub(colors, offset)?;
    tape.scale(shifted, 1.0 / params.exposure_scale())
}

//! Learned color converters between the LDR and HDR domains.
//!
//! Both converters run three independent per-channel networks. Each channel
//! lifts its scalar input to a `hidden`-wide latent with `relu(Linear)` and
//! feeds that latent to small branch heads:
//!
//! * LDR→HDR: `x = softplus(X(z))` is the exposure gain, `s = relu(S(z))` the
//!   offset-corrected brightness, `y = Y(z)` the unconstrained noise term;
//!   the output is `relu(x * s + y + c)` with the input `c` as a residual.
//! * HDR→LDR: `d = relu(D(z))` the scaled radiance, `b = tanh(B(z))` the offset
//!   and correction; the output is `sigmoid(a * (d + b) + t)` with a learned
//!   scalar affine `(a, t)`.
//!
//! A plain all-ReLU MLP of comparable size is available as an ablation baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{analytic_inverse, CameraParams};
use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::image::Image;
use crate::optim::{exp_decay, Adam, AdamConfig, OptimError};
use crate::radiance_field::inverse_softplus;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConverterError {
    #[error("input {value} outside the converter domain {domain}")]
    OutOfDomain { value: f64, domain: &'static str },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Anything that maps an `[N, 3]` color tensor to another `[N, 3]` tensor on a tape.
pub trait ColorMap {
    fn apply(&self, tape: &mut Tape, colors: Var) -> Result<Var, DiffError>;
}

/// Leaves colors untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityMap;

impl ColorMap for IdentityMap {
    fn apply(&self, _tape: &mut Tape, colors: Var) -> Result<Var, DiffError> {
        Ok(colors)
    }
}

/// Noise-free analytic LDR→HDR inverse of a known camera.
#[derive(Clone, Debug)]
pub struct AnalyticInverse(pub CameraParams);

impl ColorMap for AnalyticInverse {
    fn apply(&self, tape: &mut Tape, colors: Var) -> Result<Var, DiffError> {
        analytic_inverse(tape, &self.0, colors)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    LdrToHdr,
    HdrToLdr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Branch structure mirroring the imaging model.
    ImagingAware,
    /// Plain all-ReLU MLP with a similar parameter count.
    PlainMlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConverterSpec {
    pub direction: Direction,
    pub architecture: Architecture,
    pub hidden: usize,
    /// Linear layers per branch head.
    pub depth: usize,
}

impl ConverterSpec {
    pub fn l2h(hidden: usize) -> Self {
        Self {
            direction: Direction::LdrToHdr,
            architecture: Architecture::ImagingAware,
            hidden,
            depth: 1,
        }
    }

    pub fn h2l(hidden: usize) -> Self {
        Self {
            direction: Direction::HdrToLdr,
            architecture: Architecture::ImagingAware,
            hidden,
            depth: 1,
        }
    }

    pub fn with_architecture(self, architecture: Architecture) -> Self {
        Self {
            architecture,
            ..self
        }
    }

    fn branch_names(&self) -> &'static [&'static str] {
        match self.direction {
            Direction::LdrToHdr => &["x", "s", "y"],
            Direction::HdrToLdr => &["d", "b"],
        }
    }

    fn branch_params(&self) -> usize {
        let h = self.hidden;
        (self.depth - 1) * (h * h + h) + h + 1
    }

    /// Trainable scalars per channel of the imaging-aware network.
    pub fn structured_params_per_channel(&self) -> usize {
        let extra = match self.direction {
            Direction::LdrToHdr => 0,
            Direction::HdrToLdr => 2,
        };
        2 * self.hidden + self.branch_names().len() * self.branch_params() + extra
    }

    /// Hidden width of the two-hidden-layer plain MLP whose size is closest to
    /// the imaging-aware network.
    pub fn plain_width(&self) -> usize {
        let target = self.structured_params_per_channel() as f64;
        // w^2 + 4w + 1 parameters for 1 -> w -> w -> 1.
        ((3.0 + target).sqrt() - 2.0).round().max(1.0) as usize
    }

    /// Names and shapes of every tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let h = self.hidden;
        for ch in ["r", "g", "b"] {
            match self.architecture {
                Architecture::ImagingAware => {
                    out.push((format!("{ch}.lift.weight"), vec![1, h]));
                    out.push((format!("{ch}.lift.bias"), vec![h]));
                    for br in self.branch_names() {
                        for layer in 0..self.depth {
                            let width = if layer + 1 == self.depth { 1 } else { h };
                            out.push((format!("{ch}.{br}.{layer}.weight"), vec![h, width]));
                            out.push((format!("{ch}.{br}.{layer}.bias"), vec![width]));
                        }
                    }
                    if self.direction == Direction::HdrToLdr {
                        out.push((format!("{ch}.out.weight"), vec![1, 1]));
                        out.push((format!("{ch}.out.bias"), vec![1]));
                    }
                }
                Architecture::PlainMlp => {
                    let w = self.plain_width();
                    for (layer, (i, o)) in [(1, w), (w, w), (w, 1)].into_iter().enumerate() {
                        out.push((format!("{ch}.mlp.{layer}.weight"), vec![i, o]));
                        out.push((format!("{ch}.mlp.{layer}.bias"), vec![o]));
                    }
                }
            }
        }
        out
    }
}

/// Weights of one converter, stored flat in [`ConverterSpec::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConverterParams {
    pub spec: ConverterSpec,
    pub tensors: Vec<Tensor>,
}

impl ConverterParams {
    /// Seeded uniform(-1/sqrt(h), 1/sqrt(h)) initialization. Y-branch biases
    /// start at zero and the HDR→LDR output affine starts at identity.
    pub fn init(spec: ConverterSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (spec.hidden as f64).sqrt();
        let tensors = spec
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if name.contains(".y.") && name.ends_with("bias") {
                    vec![0.0; n]
                } else if name.ends_with("out.weight") {
                    vec![1.0; n]
                } else if name.ends_with("out.bias") {
                    vec![0.0; n]
                } else if spec.architecture == Architecture::PlainMlp {
                    let fan_in = shape[0] as f64;
                    let b = 1.0 / fan_in.sqrt();
                    (0..n).map(|_| rng.gen_range(-b..b)).collect()
                } else {
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                Tensor::new(shape, data).expect("layout shape")
            })
            .collect();
        Self { spec, tensors }
    }

    pub fn zeros(spec: ConverterSpec) -> Self {
        let tensors = spec
            .layout()
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(&shape))
            .collect();
        Self { spec, tensors }
    }

    pub fn from_tensors(spec: ConverterSpec, tensors: Vec<Tensor>) -> Result<Self, ConverterError> {
        let layout = spec.layout();
        if layout.len() != tensors.len() {
            return Err(ConverterError::Layout(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ConverterError::Layout(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { spec, tensors })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    fn position(&self, name: &str) -> usize {
        self.spec
            .layout()
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no tensor named {name}"))
    }

    fn set(&mut self, name: &str, data: &[f64]) {
        let i = self.position(name);
        self.tensors[i].data_mut().copy_from_slice(data);
    }

    /// Hand-set LDR→HDR weights that reproduce `g/dt * (c - i0)` exactly for
    /// `c >= i0`.
    pub fn affine_inverse(camera: &CameraParams, hidden: usize, depth: usize) -> Self {
        let spec = ConverterSpec {
            depth,
            ..ConverterSpec::l2h(hidden)
        };
        let mut p = Self::zeros(spec);
        let h = hidden;
        let one_hot = |v: f64| {
            let mut w = vec![0.0; h];
            w[0] = v;
            w
        };
        let identity: Vec<f64> = (0..h * h).map(|i| if i / h == i % h { 1.0 } else { 0.0 }).collect();
        let gain = 1.0 / camera.exposure_scale();
        for ch in ["r", "g", "b"] {
            p.set(&format!("{ch}.lift.weight"), &one_hot(1.0));
            for layer in 0..depth.saturating_sub(1) {
                for br in ["s", "y"] {
                    p.set(&format!("{ch}.{br}.{layer}.weight"), &identity);
                }
            }
            let last = depth - 1;
            p.set(&format!("{ch}.x.{last}.bias"), &[inverse_softplus(gain)]);
            p.set(&format!("{ch}.s.{last}.weight"), &one_hot(1.0));
            p.set(&format!("{ch}.s.{last}.bias"), &[-camera.i0]);
            p.set(&format!("{ch}.y.{last}.weight"), &one_hot(-1.0));
        }
        p
    }

    /// Registers every tensor as a trainable leaf (or constant).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundConverter, DiffError> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BoundConverter { spec: self.spec, vars })
    }

    /// Per-pixel forward pass on plain numbers.
    pub fn forward_pixel(&self, color: [f64; 3]) -> Result<[f64; 3], ConverterError> {
        let out = self.forward_many(&[color])?;
        Ok(out[0])
    }

    pub fn forward_many(&self, colors: &[[f64; 3]]) -> Result<Vec<[f64; 3]>, ConverterError> {
        for c in colors.iter().flatten() {
            check_domain(self.spec.direction, *c)?;
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let input = tape.constant(Tensor::matrix(colors.len(), 3, colors.iter().flatten().copied().collect())?)?;
        let out = bound.apply(&mut tape, input)?;
        Ok(tape
            .value(out)
            .data()
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }
}

const DOMAIN_TOLERANCE: f64 = 1e-9;

fn check_domain(direction: Direction, v: f64) -> Result<(), ConverterError> {
    let ok = match direction {
        Direction::LdrToHdr => v >= -DOMAIN_TOLERANCE && v <= 1.0 + DOMAIN_TOLERANCE,
        Direction::HdrToLdr => v.is_finite() && v >= -DOMAIN_TOLERANCE,
    };
    if ok {
        Ok(())
    } else {
        Err(ConverterError::OutOfDomain {
            value: v,
            domain: match direction {
                Direction::LdrToHdr => "[0, 1]",
                Direction::HdrToLdr => "[0, inf)",
            },
        })
    }
}

/// Converter weights registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundConverter {
    spec: ConverterSpec,
    pub vars: Vec<Var>,
}

impl BoundConverter {
    /// Wraps tape variables laid out as [`ConverterSpec::layout`].
    pub fn from_vars(tape: &Tape, spec: ConverterSpec, vars: Vec<Var>) -> Result<Self, ConverterError> {
        let layout = spec.layout();
        let shapes_match = layout.len() == vars.len() && layout.iter().zip(&vars).all(|((_, s), &v)| tape.shape(v) == s);
        if !shapes_match {
            return Err(ConverterError::Layout(format!(
                "{} variables do not match the {} tensors of {spec:?}",
                vars.len(),
                layout.len()
            )));
        }
        Ok(Self { spec, vars })
    }

    pub fn spec(&self) -> ConverterSpec {
        self.spec
    }

    fn linear(tape: &mut Tape, input: Var, weight: Var, bias: Var) -> Result<Var, DiffError> {
        let m = tape.matmul(input, weight)?;
        tape.add_bias(m, bias)
    }

    /// A stack of `depth` linear layers with ReLU between them.
    fn head(&self, tape: &mut Tape, z: Var, next: &mut impl Iterator<Item = Var>) -> Result<Var, DiffError> {
        let mut h = z;
        for layer in 0..self.spec.depth {
            let (w, b) = (next.next().unwrap(), next.next().unwrap());
            h = Self::linear(tape, h, w, b)?;
            if layer + 1 < self.spec.depth {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn channel(&self, tape: &mut Tape, c: Var, next: &mut impl Iterator<Item = Var>) -> Result<Var, DiffError> {
        match self.spec.architecture {
            Architecture::ImagingAware => {
                let (w, b) = (next.next().unwrap(), next.next().unwrap());
                let z = Self::linear(tape, c, w, b)?;
                let z = tape.relu(z)?;
                match self.spec.direction {
                    Direction::LdrToHdr => {
                        let x = self.head(tape, z, next)?;
                        let x = tape.softplus(x)?;
                        let s = self.head(tape, z, next)?;
                        let s = tape.relu(s)?;
                        let y = self.head(tape, z, next)?;
                        let xs = tape.mul(x, s)?;
                        let raw = tape.add(xs, y)?;
                        let raw = tape.add(raw, c)?;
                        tape.relu(raw)
                    }
                    Direction::HdrToLdr => {
                        let d = self.head(tape, z, next)?;
                        let d = tape.relu(d)?;
                        let b = self.head(tape, z, next)?;
                        let b = tape.tanh(b)?;
                        let v = tape.add(d, b)?;
                        let (w, bias) = (next.next().unwrap(), next.next().unwrap());
                        let v = Self::linear(tape, v, w, bias)?;
                        tape.sigmoid(v)
                    }
                }
            }
            Architecture::PlainMlp => {
                let mut h = c;
                for layer in 0..3 {
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    h = Self::linear(tape, h, w, b)?;
                    if layer < 2 {
                        h = tape.relu(h)?;
                    }
                }
                match self.spec.direction {
                    Direction::LdrToHdr => tape.relu(h),
                    Direction::HdrToLdr => tape.sigmoid(h),
                }
            }
        }
    }
}

impl ColorMap for BoundConverter {
    fn apply(&self, tape: &mut Tape, colors: Var) -> Result<Var, DiffError> {
        let shape = tape.shape(colors).to_vec();
        if shape.len() != 2 || shape[1] != 3 {
            return Err(DiffError::BadShape {
                op: "converter",
                shape,
                expected: "[N, 3]".into(),
            });
        }
        if let Some(&bad) = tape
            .value(colors)
            .data()
            .iter()
            .find(|&&v| check_domain(self.spec.direction, v).is_err())
        {
            return Err(DiffError::InvalidArgument {
                op: "converter",
                msg: format!("input {bad} outside the converter domain"),
            });
        }
        let n = shape[0];
        let mut next = self.vars.iter().copied();
        let mut outs = Vec::with_capacity(3);
        for ch in 0..3 {
            let c = tape.column(colors, ch)?;
            let c = tape.reshape(c, &[n, 1])?;
            outs.push(self.channel(tape, c, &mut next)?);
        }
        tape.stack_columns(&outs)
    }
}

/// Binds the weights as constants on the tape it is applied on.
impl ColorMap for ConverterParams {
    fn apply(&self, tape: &mut Tape, colors: Var) -> Result<Var, DiffError> {
        let bound = self.bind(tape, false)?;
        bound.apply(tape, colors)
    }
}

/// Applies a converter to every pixel of an image.
pub fn convert_image(params: &ConverterParams, img: &Image) -> Result<Image, ConverterError> {
    let pixels: Vec<[f64; 3]> = img.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let out = params.forward_many(&pixels)?;
    Ok(Image {
        width: img.width,
        height: img.height,
        data: out.into_iter().flatten().collect(),
    })
}

pub fn l2h_image(params: &ConverterParams, img: &Image) -> Result<Image, ConverterError> {
    debug_assert_eq!(params.spec.direction, Direction::LdrToHdr);
    convert_image(params, img)
}

pub fn h2l_image(params: &ConverterParams, img: &Image) -> Result<Image, ConverterError> {
    debug_assert_eq!(params.spec.direction, Direction::HdrToLdr);
    convert_image(params, img)
}

/// Settings for [`fit_converter`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub iterations: u64,
    pub lr: f64,
    pub final_lr: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iterations: 3000,
            lr: 1e-2,
            final_lr: 1e-4,
        }
    }
}

/// Full-batch Adam fit of a converter to scalar `(input, target)` pairs, fed
/// identically to all three channels. Returns the final mean squared error.
pub fn fit_converter(
    params: &mut ConverterParams,
    inputs: &[f64],
    targets: &[f64],
    opts: FitOptions,
) -> Result<f64, ConverterError> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(ConverterError::Layout(format!(
            "{} inputs vs {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    for &c in inputs {
        check_domain(params.spec.direction, c)?;
    }
    let n = inputs.len();
    let x: Vec<f64> = inputs.iter().flat_map(|&v| [v; 3]).collect();
    let y: Vec<f64> = targets.iter().flat_map(|&v| [v; 3]).collect();
    let x = Tensor::matrix(n, 3, x)?;
    let y = Tensor::matrix(n, 3, y)?;
    let mut adam = Adam::new("converter", &params.tensors, AdamConfig::default());
    let mut last = f64::NAN;
    let final_step = opts.iterations.saturating_sub(1);
    for step in 0..opts.iterations {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true)?;
        let xv = tape.constant(x.clone())?;
        let yv = tape.constant(y.clone())?;
        let out = bound.apply(&mut tape, xv)?;
        let diff = tape.sub(out, yv)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq)?;
        last = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        let g: Vec<Vec<f64>> = bound.vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
        let lr = exp_decay(opts.lr, opts.final_lr, step, final_step);
        adam.step(&mut params.tensors, &g, lr)?;
    }
    Ok(last)
}

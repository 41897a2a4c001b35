//! Dense voxel radiance field with differentiable volume rendering.
//!
//! Each voxel stores a pre-activation density (softplus at query) and a
//! pre-activation color. Lookups interpolate the *activated* grids
//! trilinearly, so a query at a voxel center returns exactly that voxel's
//! activated value and queried densities are never negative.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::converters::ColorMap;
use crate::image::Image;
use crate::diffcore::{softplus, sigmoid, DiffError, GatherPlan, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("pixel ({0}, {1}) outside a {2}x{3} image")]
    PixelOutOfBounds(u32, u32, u32, u32),
    #[error("degenerate ray direction")]
    DegenerateRay,
    #[error("need at least 2 samples per ray, got {0}")]
    TooFewSamples(usize),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    (n > 0.0 && n.is_finite()).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    /// Focal length in pixels.
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square image with the principal point at the image center.
    pub fn centered(width: u32, height: u32, focal: f64) -> Self {
        Self {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

/// Pinhole camera. `rotation` maps camera-frame directions (x right, y down,
/// z forward) to world directions; `translation` is the camera center.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
    pub intrinsics: Intrinsics,
}

impl Pose {
    /// Camera at `eye` looking at `target`, with world `up` roughly pointing
    /// toward the top of the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, intrinsics: Intrinsics) -> Option<Self> {
        let forward = normalize(sub3(target, eye))?;
        let right = normalize(cross(forward, up))?;
        let down = cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Some(Self {
            rotation,
            translation: eye,
            intrinsics,
        })
    }

    pub fn forward(&self) -> Vec3 {
        self.cam_to_world([0.0, 0.0, 1.0])
    }

    fn cam_to_world(&self, d: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2],
            r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2],
            r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2],
        ]
    }

    fn world_to_cam(&self, d: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Largest deviation of `RᵀR` from identity, and the determinant.
    pub fn orthonormality(&self) -> (f64, f64) {
        let r = &self.rotation;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (worst, det)
    }

    /// Continuous pixel coordinates and camera-space depth of a world point.
    /// Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.
    pub fn project(&self, point: Vec3) -> Option<(f64, f64, f64)> {
        let p = self.world_to_cam(sub3(point, self.translation));
        if p[2] <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.focal * p[0] / p[2] + k.cx, k.focal * p[1] / p[2] + k.cy, p[2]))
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let k = &self.intrinsics;
        let cam = [(u - k.cx) / k.focal * depth, (v - k.cy) / k.focal * depth, depth];
        let w = self.cam_to_world(cam);
        [
            w[0] + self.translation[0],
            w[1] + self.translation[1],
            w[2] + self.translation[2],
        ]
    }

    /// Every pixel in row-major order.
    pub fn all_pixels(&self) -> Vec<(u32, u32)> {
        let k = &self.intrinsics;
        (0..k.height)
            .flat_map(|y| (0..k.width).map(move |x| (x, y)))
            .collect()
    }

    /// Row-major `3x4` camera-to-world matrix `[R | t]`.
    pub fn to_matrix(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2],
        ]
    }

    pub fn from_matrix(m: &[f64; 12], intrinsics: Intrinsics) -> Self {
        Self {
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: [m[3], m[7], m[11]],
            intrinsics,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub pixels: Vec<(u32, u32)>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn push(&mut self, origin: Vec3, direction: Vec3, pixel: (u32, u32)) -> Result<(), RenderError> {
        let d = normalize(direction).ok_or(RenderError::DegenerateRay)?;
        self.origins.push(origin);
        self.directions.push(d);
        self.pixels.push(pixel);
        Ok(())
    }
}

/// One ray through the center of each requested pixel.
pub fn generate_rays(pose: &Pose, pixels: &[(u32, u32)]) -> Result<RayBatch, RenderError> {
    let k = &pose.intrinsics;
    let mut batch = RayBatch::default();
    for &(x, y) in pixels {
        if x >= k.width || y >= k.height {
            return Err(RenderError::PixelOutOfBounds(x, y, k.width, k.height));
        }
        let cam = [
            (x as f64 + 0.5 - k.cx) / k.focal,
            (y as f64 + 0.5 - k.cy) / k.focal,
            1.0,
        ];
        batch.push(pose.translation, pose.cam_to_world(cam), (x, y))?;
    }
    Ok(batch)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Aabb {
    fn default() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

impl Aabb {
    /// Entry and exit distances along a unit ray, clipped to `t >= 0`.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut near, mut far) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// How stored voxel colors become queried colors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorEncoding {
    /// Stored as logits; queried through a sigmoid into `[0, 1]`.
    Logit,
    /// Stored as non-negative linear radiance (ground-truth HDR scenes).
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    pub resolution: [usize; 3],
    pub bbox: Aabb,
    /// Pre-softplus density, one per voxel, x fastest.
    pub density: Vec<f64>,
    /// Per-voxel RGB, `[voxels, 3]` row-major.
    pub color: Vec<f64>,
    pub encoding: ColorEncoding,
}

/// Inverse of softplus, for setting a target density.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl VoxelField {
    pub fn new(
        resolution: [usize; 3],
        bbox: Aabb,
        density: Vec<f64>,
        color: Vec<f64>,
        encoding: ColorEncoding,
    ) -> Result<Self, RenderError> {
        let field = Self {
            resolution,
            bbox,
            density,
            color,
            encoding,
        };
        field.validate()?;
        Ok(field)
    }

    /// Trainable LDR field: uniform low density and mid-gray color, with a
    /// small seeded perturbation.
    pub fn init_trainable(resolution: [usize; 3], bbox: Aabb, init_density: f64, seed: u64) -> Self {
        let n = resolution.iter().product::<usize>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = inverse_softplus(init_density);
        let density = (0..n).map(|_| raw + rng.gen_range(-0.01..0.01)).collect();
        let color = (0..3 * n).map(|_| rng.gen_range(-0.01..0.01)).collect();
        Self {
            resolution,
            bbox,
            density,
            color,
            encoding: ColorEncoding::Logit,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let n = self.voxel_count();
        if n == 0 {
            return Err(RenderError::InvalidField("empty resolution".into()));
        }
        if self.density.len() != n || self.color.len() != 3 * n {
            return Err(RenderError::InvalidField(format!(
                "expected {n} densities and {} colors, got {} and {}",
                3 * n,
                self.density.len(),
                self.color.len()
            )));
        }
        if (0..3).any(|a| !(self.bbox.max[a] > self.bbox.min[a])) {
            return Err(RenderError::InvalidField("empty bounding box".into()));
        }
        if self.density.iter().chain(&self.color).any(|v| !v.is_finite()) {
            return Err(RenderError::InvalidField("non-finite voxel value".into()));
        }
        if self.encoding == ColorEncoding::Linear && self.color.iter().any(|&c| c < 0.0) {
            return Err(RenderError::InvalidField("negative linear radiance".into()));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.resolution[1] + iy) * self.resolution[0] + ix
    }

    pub fn cell_size(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = (self.bbox.max[a] - self.bbox.min[a]) / self.resolution[a] as f64;
        }
        c
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let c = self.cell_size();
        let i = [ix, iy, iz];
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = self.bbox.min[a] + (i[a] as f64 + 0.5) * c[a];
        }
        p
    }

    fn activate_color(&self, raw: f64) -> f64 {
        match self.encoding {
            ColorEncoding::Logit => sigmoid(raw),
            ColorEncoding::Linear => raw,
        }
    }

    /// Eight trilinear taps (voxel index, weight) for a world position.
    /// Positions outside the voxel-center lattice clamp to the border voxels.
    pub fn taps(&self, p: Vec3) -> [(u32, f64); 8] {
        let cell = self.cell_size();
        let mut lo = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let u = ((p[a] - self.bbox.min[a]) / cell[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let mut i = (u.floor() as usize).min(n.saturating_sub(2));
            let mut f = u - i as f64;
            if f < 1e-9 {
                f = 0.0;
            } else if f > 1.0 - 1e-9 {
                if i + 1 < n {
                    i += 1;
                }
                f = 0.0;
            }
            lo[a] = i;
            frac[a] = f;
        }
        let mut out = [(0u32, 0.0f64); 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            let ix = (lo[0] + dx).min(self.resolution[0] - 1);
            let iy = (lo[1] + dy).min(self.resolution[1] - 1);
            let iz = (lo[2] + dz).min(self.resolution[2] - 1);
            *slot = (self.index(ix, iy, iz) as u32, wx * wy * wz);
        }
        out
    }

    /// Activated density and color at a point, without a tape.
    pub fn query(&self, p: Vec3) -> (f64, Vec3) {
        let mut sigma = 0.0;
        let mut color = [0.0; 3];
        for (idx, w) in self.taps(p) {
            if w == 0.0 {
                continue;
            }
            let i = idx as usize;
            sigma += w * softplus(self.density[i]);
            for c in 0..3 {
                color[c] += w * self.activate_color(self.color[3 * i + c]);
            }
        }
        (sigma, color)
    }

    /// Registers the field on a tape; returns the raw leaves and activated grids.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundField, RenderError> {
        let n = self.voxel_count();
        let dens = Tensor::vector(self.density.clone());
        let col = Tensor::matrix(n, 3, self.color.clone())?;
        let (density_raw, color_raw) = if trainable {
            (tape.param(dens)?, tape.param(col)?)
        } else {
            (tape.constant(dens)?, tape.constant(col)?)
        };
        let density = tape.softplus(density_raw)?;
        let color = match self.encoding {
            ColorEncoding::Logit => tape.sigmoid(color_raw)?,
            ColorEncoding::Linear => color_raw,
        };
        Ok(BoundField {
            density_raw,
            color_raw,
            density,
            color,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundField {
    pub density_raw: Var,
    pub color_raw: Var,
    /// Activated density grid `[voxels]`.
    pub density: Var,
    /// Activated color grid `[voxels, 3]`.
    pub color: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    pub n_samples: usize,
    /// Seed for stratified jitter; `None` samples bin midpoints.
    pub jitter_seed: Option<u64>,
    /// LDR background color seen by rays that leave the volume.
    pub background: Vec3,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            n_samples: 64,
            jitter_seed: None,
            background: [0.0; 3],
        }
    }
}

/// Sample positions along a batch of rays, fixed before any tape work.
#[derive(Clone, Debug)]
pub struct SamplePlan {
    pub rays: usize,
    pub samples: usize,
    pub gather: Rc<GatherPlan>,
    pub deltas: Rc<Vec<f64>>,
    /// Distance along each ray of every sample, `[rays * samples]`.
    pub t: Vec<f64>,
}

impl SamplePlan {
    pub fn new(field: &VoxelField, rays: &RayBatch, opts: &RenderOptions) -> Result<Self, RenderError> {
        let s = opts.n_samples;
        if s < 2 {
            return Err(RenderError::TooFewSamples(s));
        }
        let r = rays.len();
        let mut rng = opts.jitter_seed.map(ChaCha8Rng::seed_from_u64);
        let mut indices = Vec::with_capacity(r * s * 8);
        let mut weights = Vec::with_capacity(r * s * 8);
        let mut deltas = Vec::with_capacity(r * s);
        let mut ts = Vec::with_capacity(r * s);
        for (o, d) in rays.origins.iter().zip(&rays.directions) {
            if !(norm(*d) > 0.0) {
                return Err(RenderError::DegenerateRay);
            }
            match field.bbox.intersect(*o, *d) {
                Some((t0, t1)) => {
                    let bin = (t1 - t0) / s as f64;
                    for k in 0..s {
                        let u = match rng.as_mut() {
                            Some(rng) => rng.gen::<f64>(),
                            None => 0.5,
                        };
                        let t = t0 + (k as f64 + u) * bin;
                        let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                        for (idx, w) in field.taps(p) {
                            indices.push(idx);
                            weights.push(w);
                        }
                        deltas.push(bin);
                        ts.push(t);
                    }
                }
                None => {
                    for _ in 0..s {
                        indices.extend([0u32; 8]);
                        weights.extend([0.0; 8]);
                        deltas.push(0.0);
                        ts.push(0.0);
                    }
                }
            }
        }
        let gather = GatherPlan::new(r * s, 8, field.voxel_count(), indices, weights)?;
        Ok(Self {
            rays: r,
            samples: s,
            gather: Rc::new(gather),
            deltas: Rc::new(deltas),
            t: ts,
        })
    }

    /// Expected termination distance per ray from rendered weights.
    pub fn depth(&self, weights: &[f64]) -> Vec<f64> {
        weights
            .chunks(self.samples)
            .zip(self.t.chunks(self.samples))
            .map(|(w, t)| w.iter().zip(t).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Output of a render: composited colors `[rays, 3]`, compositing weights
/// `[rays, samples]` and the per-sample LDR colors `[rays * samples, 3]`.
#[derive(Clone, Copy, Debug)]
pub struct Rendered {
    pub color: Var,
    pub weights: Var,
    pub sample_colors: Var,
}

/// Volume-renders LDR colors: `C = sum_i w_i c_i + (1 - sum_i w_i) * background`.
pub fn render_ldr(
    tape: &mut Tape,
    field: &BoundField,
    plan: &SamplePlan,
    background: Vec3,
) -> Result<Rendered, RenderError> {
    let sigma = tape.gather(field.density, plan.gather.clone())?;
    let sigma = tape.reshape(sigma, &[plan.rays, plan.samples])?;
    let weights = tape.alpha_weights(sigma, plan.deltas.clone())?;
    let sample_colors = tape.gather(field.color, plan.gather.clone())?;
    let bg = tape.constant(Tensor::vector(background.to_vec()))?;
    let color = tape.composite(weights, sample_colors, bg)?;
    Ok(Rendered {
        color,
        weights,
        sample_colors,
    })
}

/// HDR render sharing the LDR geometry: every sample color is lifted by
/// `lift` before compositing, and so is the background.
pub fn render_hdr_from(
    tape: &mut Tape,
    ldr: &Rendered,
    lift: &dyn ColorMap,
    background: Vec3,
) -> Result<Var, RenderError> {
    let lifted = lift.apply(tape, ldr.sample_colors)?;
    let bg = tape.constant(Tensor::matrix(1, 3, background.to_vec())?)?;
    let bg = lift.apply(tape, bg)?;
    let bg = tape.reshape(bg, &[3])?;
    Ok(tape.composite(ldr.weights, lifted, bg)?)
}

/// [`render_ldr`] followed by the HDR lift; returns `(ldr, hdr)`.
pub fn render_hdr(
    tape: &mut Tape,
    field: &BoundField,
    plan: &SamplePlan,
    background: Vec3,
    lift: &dyn ColorMap,
) -> Result<(Rendered, Var), RenderError> {
    let ldr = render_ldr(tape, field, plan, background)?;
    let hdr = render_hdr_from(tape, &ldr, lift, background)?;
    Ok((ldr, hdr))
}

/// A full view rendered without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub ldr: Image,
    pub hdr: Image,
    /// Expected termination distance per pixel.
    pub depth: Vec<f64>,
    /// Sum of compositing weights per pixel.
    pub opacity: Vec<f64>,
}

/// Renders every pixel of `pose`, `rows_per_chunk` image rows per tape.
pub fn render_view(
    field: &VoxelField,
    pose: &Pose,
    opts: &RenderOptions,
    lift: &dyn ColorMap,
    rows_per_chunk: u32,
) -> Result<RenderedView, RenderError> {
    let k = &pose.intrinsics;
    let n = (k.width * k.height) as usize;
    let mut ldr = Vec::with_capacity(3 * n);
    let mut hdr = Vec::with_capacity(3 * n);
    let mut depth = Vec::with_capacity(n);
    let mut opacity = Vec::with_capacity(n);
    let step = rows_per_chunk.max(1);
    let mut y0 = 0;
    while y0 < k.height {
        let y1 = (y0 + step).min(k.height);
        let pixels: Vec<(u32, u32)> = (y0..y1).flat_map(|y| (0..k.width).map(move |x| (x, y))).collect();
        let rays = generate_rays(pose, &pixels)?;
        let plan = SamplePlan::new(field, &rays, opts)?;
        let mut tape = Tape::new();
        let bound = field.bind(&mut tape, false)?;
        let (r, h) = render_hdr(&mut tape, &bound, &plan, opts.background, lift)?;
        ldr.extend_from_slice(tape.value(r.color).data());
        hdr.extend_from_slice(tape.value(h).data());
        let w = tape.value(r.weights).data();
        depth.extend(plan.depth(w));
        opacity.extend(w.chunks(plan.samples).map(|c| c.iter().sum::<f64>()));
        y0 = y1;
    }
    Ok(RenderedView {
        ldr: Image {
            width: k.width,
            height: k.height,
            data: ldr,
        },
        hdr: Image {
            width: k.width,
            height: k.height,
            data: hdr,
        },
        depth,
        opacity,
    })
}

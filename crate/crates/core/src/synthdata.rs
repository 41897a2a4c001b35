//! Procedural HDR scenes and the single-exposure datasets made from them.
//!
//! A scene is a voxel field with linear (HDR) colors. Views are rendered
//! with the same volume renderer used for training, then pushed through the
//! camera model to obtain the LDR images.
//!
//! On disk a bundle is
//!
//! ```text
//! manifest.json
//! ldr/view_000.ppm ...     8-bit linear LDR, every view
//! hdr_gt/view_000.pfm ...  32-bit float ground-truth radiance, every view
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::camera::{simulate_ldr, CameraError, CameraParams, ExposureLadder};
use crate::converters::IdentityMap;
use crate::image::{self, Image, ImageError};
use crate::radiance_field::{
    inverse_softplus, render_view, Aabb, ColorEncoding, Intrinsics, Pose, RenderError, RenderOptions, Vec3,
    VoxelField,
};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Activated density of occupied voxels.
const SOLID: f64 = 40.0;
/// Pre-activation density of empty voxels (softplus ≈ 1e-13).
const EMPTY_RAW: f64 = -30.0;
/// Darkest level sits this factor below `peak / span`.
const SPAN_MARGIN: f64 = 1.2;
/// Voxels with at least this activated density count as scene content.
const OCCUPIED: f64 = 1.0;
const DARK_LDR: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene {kind} cannot reach span {requested} at resolution {resolution}: {msg}")]
    Span {
        kind: SceneKind,
        requested: f64,
        resolution: usize,
        msg: String,
    },
    #[error("unknown scene kind {0:?}")]
    UnknownScene(String),
    #[error("bad dataset: {0}")]
    Invalid(String),
    #[error("hash mismatch for {file}: manifest {expected}, file {actual}")]
    Hash {
        file: String,
        expected: String,
        actual: String,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    CheckerSphere,
    EmissiveBoxes,
    GradientRoom,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [SceneKind::CheckerSphere, SceneKind::EmissiveBoxes, SceneKind::GradientRoom];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::CheckerSphere => "checker-sphere",
            SceneKind::EmissiveBoxes => "emissive-boxes",
            SceneKind::GradientRoom => "gradient-room",
        }
    }

    /// Brightest radiance level of the scene.
    fn peak(self) -> f64 {
        match self {
            SceneKind::CheckerSphere => 3.0,
            SceneKind::EmissiveBoxes => 12.0,
            SceneKind::GradientRoom => 20.0,
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SynthError::UnknownScene(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub resolution: usize,
    pub bbox: Aabb,
    /// Required ratio of the largest to the smallest nonzero radiance.
    pub span: f64,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, rng_seed: u64) -> Self {
        Self {
            kind,
            resolution: 32,
            bbox: Aabb::default(),
            span: 100.0,
            rng_seed,
        }
    }
}

struct Palette {
    peak: f64,
    dark: f64,
}

impl Palette {
    fn new(spec: &SceneSpec) -> Result<Self, SynthError> {
        let peak = spec.kind.peak();
        let fail = |msg: String| SynthError::Span {
            kind: spec.kind,
            requested: spec.span,
            resolution: spec.resolution,
            msg,
        };
        if !(spec.span >= 1.0 && spec.span.is_finite()) {
            return Err(fail("span must be a finite ratio >= 1".into()));
        }
        if spec.resolution < 8 {
            return Err(fail("need at least 8 voxels per axis to place the scene".into()));
        }
        let dark = (peak / (spec.span * SPAN_MARGIN)).min(0.02);
        // Stored colors go to disk as f32.
        if dark < 1e-30 {
            return Err(fail(format!("darkest level {dark:e} underflows 32-bit storage")));
        }
        Ok(Self { peak, dark })
    }
}

/// Per-channel tint with one channel at exactly 1.
fn tint(rng: &mut ChaCha8Rng) -> Vec3 {
    let mut t = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
    t[rng.gen_range(0..3)] = 1.0;
    t
}

fn scaled(level: f64, t: Vec3) -> Vec3 {
    [level * t[0], level * t[1], level * t[2]]
}

#[derive(Clone, Copy)]
struct Block {
    min: Vec3,
    max: Vec3,
    color: Vec3,
}

impl Block {
    fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Radiance of the voxel centered at `p`, or `None` for empty space.
type Shader<'a> = Box<dyn Fn(Vec3) -> Option<Vec3> + 'a>;

fn checker_sphere(pal: &Palette, rng: &mut ChaCha8Rng) -> Shader<'static> {
    const LON: usize = 8;
    const LAT: usize = 4;
    let tints: Vec<Vec3> = (0..LON * LAT).map(|_| tint(rng)).collect();
    let (peak, dark) = (pal.peak, pal.dark);
    Box::new(move |p: Vec3| {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if r > 0.75 {
            return None;
        }
        let lon = p[1].atan2(p[0]) + std::f64::consts::PI;
        let lat = if r > 0.0 { (p[2] / r).asin() } else { 0.0 } + std::f64::consts::FRAC_PI_2;
        let i = ((lon / std::f64::consts::TAU * LON as f64) as usize).min(LON - 1);
        let j = ((lat / std::f64::consts::PI * LAT as f64) as usize).min(LAT - 1);
        let level = if (i + j) % 2 == 0 { peak } else { dark };
        Some(scaled(level, tints[j * LON + i]))
    })
}

fn emissive_boxes(pal: &Palette, rng: &mut ChaCha8Rng) -> Shader<'static> {
    let floor_z = -0.7;
    let mut blocks = vec![Block {
        min: [-0.95, -0.95, -1.0],
        max: [0.95, 0.95, floor_z],
        color: scaled(0.3, tint(rng)),
    }];
    let cube = |cx: f64, cy: f64, half: f64, height: f64, level: f64, rng: &mut ChaCha8Rng| Block {
        min: [cx - half, cy - half, floor_z],
        max: [cx + half, cy + half, floor_z + height],
        color: scaled(level, tint(rng)),
    };
    let emitter = cube(rng.gen_range(-0.45..-0.25), rng.gen_range(-0.3..0.3), 0.35, 0.9, pal.peak, rng);
    let bright = cube(rng.gen_range(0.25..0.45), rng.gen_range(0.05..0.4), 0.3, 0.6, 2.0, rng);
    let dim = cube(rng.gen_range(0.25..0.45), rng.gen_range(-0.55..-0.35), 0.22, 0.5, pal.dark, rng);
    blocks.extend([emitter, bright, dim]);
    Box::new(move |p: Vec3| blocks.iter().rev().find(|b| b.contains(p)).map(|b| b.color))
}

fn gradient_room(pal: &Palette, rng: &mut ChaCha8Rng) -> Shader<'static> {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let dir = [theta.cos() * 0.8, theta.sin() * 0.8, 0.6];
    let t = tint(rng);
    let (peak, dark) = (pal.peak, pal.dark);
    let reach = dir[0].abs() + dir[1].abs() + dir[2].abs();
    Box::new(move |p: Vec3| {
        let floor = p[2] <= -0.8;
        let wall = p[2] <= 0.1 && (p[0].abs() >= 0.8 || p[1].abs() >= 0.8);
        if !(floor || wall) || p[0].abs() > 0.95 || p[1].abs() > 0.95 {
            return None;
        }
        // Stretched so both end levels are reached inside the room.
        let u = ((p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2]) / reach * 0.65 + 0.5).clamp(0.0, 1.0);
        let level = dark * (peak / dark).powf(u);
        Some(scaled(level, t))
    })
}

/// Largest over smallest nonzero radiance among occupied voxels.
pub fn radiance_span(field: &VoxelField) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for (i, &d) in field.density.iter().enumerate() {
        if crate::diffcore::softplus(d) < OCCUPIED {
            continue;
        }
        for &c in &field.color[3 * i..3 * i + 3] {
            if c > 0.0 {
                lo = lo.min(c);
                hi = hi.max(c);
            }
        }
    }
    if hi > 0.0 {
        hi / lo
    } else {
        0.0
    }
}

/// Gives empty voxels next to the surface the mean color of their solid
/// neighbors, so trilinear lookups at the boundary do not fade to black.
fn dilate_colors(res: [usize; 3], density: &[f64], color: &mut [f64], solid: f64) {
    let idx = |x: usize, y: usize, z: usize| (z * res[1] + y) * res[0] + x;
    let source = color.to_vec();
    for z in 0..res[2] {
        for y in 0..res[1] {
            for x in 0..res[0] {
                if density[idx(x, y, z)] == solid {
                    continue;
                }
                let mut sum = [0.0; 3];
                let mut n = 0usize;
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if nx < 0 || ny < 0 || nz < 0 {
                                continue;
                            }
                            let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                            if nx >= res[0] || ny >= res[1] || nz >= res[2] {
                                continue;
                            }
                            let j = idx(nx, ny, nz);
                            if density[j] == solid {
                                for c in 0..3 {
                                    sum[c] += source[3 * j + c];
                                }
                                n += 1;
                            }
                        }
                    }
                }
                if n > 0 {
                    let i = idx(x, y, z);
                    for c in 0..3 {
                        color[3 * i + c] = sum[c] / n as f64;
                    }
                }
            }
        }
    }
}

/// Ground-truth HDR field for a scene description.
pub fn build_scene(spec: &SceneSpec) -> Result<VoxelField, SynthError> {
    let pal = Palette::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let shader = match spec.kind {
        SceneKind::CheckerSphere => checker_sphere(&pal, &mut rng),
        SceneKind::EmissiveBoxes => emissive_boxes(&pal, &mut rng),
        SceneKind::GradientRoom => gradient_room(&pal, &mut rng),
    };
    let res = [spec.resolution; 3];
    let n = res.iter().product::<usize>();
    let mut density = vec![EMPTY_RAW; n];
    let mut color = vec![0.0; 3 * n];
    let mut field = VoxelField {
        resolution: res,
        bbox: spec.bbox,
        density: Vec::new(),
        color: Vec::new(),
        encoding: ColorEncoding::Linear,
    };
    let solid = inverse_softplus(SOLID);
    for iz in 0..res[2] {
        for iy in 0..res[1] {
            for ix in 0..res[0] {
                // Shapes are laid out in the unit cube, whatever the bbox.
                let c = field.voxel_center(ix, iy, iz);
                let mut q = [0.0; 3];
                for a in 0..3 {
                    q[a] = 2.0 * (c[a] - spec.bbox.min[a]) / (spec.bbox.max[a] - spec.bbox.min[a]) - 1.0;
                }
                if let Some(rgb) = shader(q) {
                    let i = field.index(ix, iy, iz);
                    density[i] = solid;
                    color[3 * i..3 * i + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    dilate_colors(res, &density, &mut color, solid);
    field.density = density;
    field.color = color;
    field.validate()?;
    let span = radiance_span(&field);
    if span < spec.span {
        return Err(SynthError::Span {
            kind: spec.kind,
            requested: spec.span,
            resolution: spec.resolution,
            msg: format!("generated field only spans {span:.3}"),
        });
    }
    Ok(field)
}

/// Placement of the camera ring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub count: usize,
    pub radius: f64,
    /// Height angle above the target, degrees.
    pub elevation_deg: f64,
    pub target: Vec3,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
}

impl Default for RingSpec {
    fn default() -> Self {
        Self {
            count: 35,
            radius: 3.5,
            elevation_deg: 30.0,
            target: [0.0; 3],
            width: 64,
            height: 64,
            focal: 72.0,
        }
    }
}

/// `ring.count` cameras evenly spaced in azimuth, all looking at the target.
pub fn sample_poses(ring: &RingSpec) -> Result<Vec<Pose>, SynthError> {
    if ring.count < 2 {
        return Err(SynthError::Invalid(format!("need at least 2 poses, got {}", ring.count)));
    }
    if !(ring.radius > 0.0) || ring.elevation_deg.abs() >= 90.0 {
        return Err(SynthError::Invalid("ring radius must be > 0 and |elevation| < 90".into()));
    }
    let k = Intrinsics::centered(ring.width, ring.height, ring.focal);
    let el = ring.elevation_deg.to_radians();
    (0..ring.count)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / ring.count as f64;
            let eye = [
                ring.target[0] + ring.radius * el.cos() * az.cos(),
                ring.target[1] + ring.radius * el.cos() * az.sin(),
                ring.target[2] + ring.radius * el.sin(),
            ];
            Pose::look_at(eye, ring.target, [0.0, 0.0, 1.0], k)
                .ok_or_else(|| SynthError::Invalid("degenerate camera placement".into()))
        })
        .collect()
}

/// Even ring positions train, odd ones test (18 / 17 for 35 views).
pub fn alternate_split(count: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..count).step_by(2).collect(), (1..count).step_by(2).collect())
}

/// Everything needed to regenerate a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub scene: SceneSpec,
    /// Base camera; its exposure time is replaced by the ladder entry.
    pub camera: CameraParams,
    pub ladder: ExposureLadder,
    pub exposure_index: usize,
    pub ring: RingSpec,
    pub n_samples: usize,
    pub background: Vec3,
}

impl SynthConfig {
    pub fn new(kind: SceneKind, seed: u64) -> Self {
        Self {
            scene: SceneSpec::new(kind, seed),
            camera: CameraParams {
                rng_seed: seed,
                ..CameraParams::default()
            },
            ladder: ExposureLadder::default(),
            exposure_index: 3,
            ring: RingSpec::default(),
            n_samples: 64,
            background: [0.0; 3],
        }
    }

    /// Camera at the selected exposure time.
    pub fn exposed_camera(&self) -> Result<CameraParams, SynthError> {
        self.ladder.validate()?;
        let cam = self.camera.with_exposure(self.ladder.get(self.exposure_index)?);
        cam.validate()?;
        Ok(cam)
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            n_samples: self.n_samples,
            jitter_seed: None,
            background: self.background,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub index: usize,
    /// Row-major `3x4` camera-to-world matrix.
    pub matrix: Vec<f64>,
    pub intrinsics: Intrinsics,
}

impl PoseRecord {
    pub fn from_pose(index: usize, pose: &Pose) -> Self {
        Self {
            index,
            matrix: pose.to_matrix().to_vec(),
            intrinsics: pose.intrinsics,
        }
    }

    pub fn pose(&self) -> Result<Pose, SynthError> {
        let m: [f64; 12] = self
            .matrix
            .as_slice()
            .try_into()
            .map_err(|_| SynthError::Invalid(format!("pose {} needs 12 matrix entries", self.index)))?;
        Ok(Pose::from_matrix(&m, self.intrinsics))
    }
}

/// Clipping statistics of the training views, over every pixel channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureStats {
    pub saturated_fraction: f64,
    pub dark_fraction: f64,
    pub radiance_span: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: SynthConfig,
    /// Camera actually used, exposure time included.
    pub camera: CameraParams,
    pub poses: Vec<PoseRecord>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub stats: ExposureStats,
    /// SHA-256 of every image file, keyed by relative path.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn poses(&self) -> Result<Vec<Pose>, SynthError> {
        self.poses.iter().map(PoseRecord::pose).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub manifest: Manifest,
    /// LDR view per pose, as stored (8-bit quantized).
    pub ldr: Vec<Image>,
    /// Ground-truth radiance per pose, as stored (32-bit float).
    pub hdr: Vec<Image>,
}

pub fn ldr_name(view: usize) -> String {
    format!("ldr/view_{view:03}.ppm")
}

pub fn hdr_name(view: usize) -> String {
    format!("hdr_gt/view_{view:03}.pfm")
}

fn view_rng(seed: u64, view: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(view as u64);
    rng
}

/// Applies the camera to every sample, drawing noise from the view's stream.
pub fn expose(hdr: &Image, camera: &CameraParams, view: usize) -> Result<Image, SynthError> {
    let mut rng = view_rng(camera.rng_seed, view);
    let data = hdr
        .data
        .iter()
        .map(|&h| {
            let eps = camera.draw_noise(h, &mut rng);
            simulate_ldr(h, camera, eps)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Image::new(hdr.width, hdr.height, data)?)
}

/// Lowercase hex SHA-256 digest.
pub fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn ppm_bytes(img: &Image) -> Result<Vec<u8>, SynthError> {
    let mut buf = Vec::new();
    image::write_ppm(&mut buf, img.width, img.height, &img.to_u8())?;
    Ok(buf)
}

fn pfm_bytes(img: &Image) -> Result<Vec<u8>, SynthError> {
    let mut buf = Vec::new();
    image::write_pfm(&mut buf, img.width, img.height, &img.to_f32())?;
    Ok(buf)
}

/// Unquantized output of [`render_dataset`].
#[derive(Clone, Debug)]
pub struct RawViews {
    pub hdr: Vec<Image>,
    pub ldr: Vec<Image>,
    pub camera: CameraParams,
    pub poses: Vec<Pose>,
    pub field: VoxelField,
}

/// Renders every view in full precision, before any file quantization.
pub fn render_dataset(config: &SynthConfig) -> Result<RawViews, SynthError> {
    let camera = config.exposed_camera()?;
    let field = build_scene(&config.scene)?;
    let poses = sample_poses(&config.ring)?;
    let opts = config.render_options();
    let mut hdr = Vec::with_capacity(poses.len());
    let mut ldr = Vec::with_capacity(poses.len());
    for (v, pose) in poses.iter().enumerate() {
        let view = render_view(&field, pose, &opts, &IdentityMap, 8)?;
        ldr.push(expose(&view.ldr, &camera, v)?);
        hdr.push(view.ldr);
    }
    Ok(RawViews {
        hdr,
        ldr,
        camera,
        poses,
        field,
    })
}

pub fn exposure_stats(ldr: &[&Image], camera: &CameraParams, span: f64) -> ExposureStats {
    let total: usize = ldr.iter().map(|i| i.data.len()).sum();
    let count = |pred: &dyn Fn(f64) -> bool| -> f64 {
        ldr.iter().flat_map(|i| i.data.iter()).filter(|&&v| pred(v)).count() as f64 / total.max(1) as f64
    };
    ExposureStats {
        saturated_fraction: count(&|v| v >= camera.i_max),
        dark_fraction: count(&|v| v < DARK_LDR),
        radiance_span: span,
    }
}

/// Synthesizes a bundle. Images come back exactly as they will be stored.
pub fn make_dataset(config: &SynthConfig) -> Result<DatasetBundle, SynthError> {
    let raw = render_dataset(config)?;
    let (train, test) = alternate_split(raw.poses.len());
    let mut files = BTreeMap::new();
    let mut ldr = Vec::new();
    let mut hdr = Vec::new();
    for v in 0..raw.poses.len() {
        let lb = ppm_bytes(&raw.ldr[v])?;
        let hb = pfm_bytes(&raw.hdr[v])?;
        files.insert(ldr_name(v), sha256(&lb));
        files.insert(hdr_name(v), sha256(&hb));
        let (w, h, d) = image::read_ppm(&lb[..])?;
        ldr.push(Image::from_u8(w, h, &d)?);
        let (w, h, d) = image::read_pfm(&hb[..])?;
        hdr.push(Image::from_f32(w, h, &d)?);
    }
    let train_ldr: Vec<&Image> = train.iter().map(|&i| &ldr[i]).collect();
    let stats = exposure_stats(&train_ldr, &raw.camera, radiance_span(&raw.field));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        camera: raw.camera,
        poses: raw.poses.iter().enumerate().map(|(i, p)| PoseRecord::from_pose(i, p)).collect(),
        train,
        test,
        stats,
        files,
    };
    Ok(DatasetBundle { manifest, ldr, hdr })
}

/// Writes the bundle; returns the SHA-256 of the manifest bytes.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<String, SynthError> {
    fs::create_dir_all(dir.join("ldr"))?;
    fs::create_dir_all(dir.join("hdr_gt"))?;
    for (v, (l, h)) in bundle.ldr.iter().zip(&bundle.hdr).enumerate() {
        fs::write(dir.join(ldr_name(v)), ppm_bytes(l)?)?;
        fs::write(dir.join(hdr_name(v)), pfm_bytes(h)?)?;
    }
    let mut json = serde_json::to_string_pretty(&bundle.manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST), &json)?;
    Ok(sha256(json.as_bytes()))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, SynthError> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(SynthError::Invalid(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let n = manifest.poses.len();
    let mut seen = vec![false; n];
    for &i in manifest.train.iter().chain(&manifest.test) {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(SynthError::Invalid(format!("split index {i} invalid or repeated")));
        }
    }
    if manifest.train.is_empty() {
        return Err(SynthError::Invalid("empty training split".into()));
    }
    Ok(manifest)
}

/// Reads a bundle and checks every image against the manifest hashes.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle, SynthError> {
    let manifest = load_manifest(dir)?;
    let mut ldr = Vec::new();
    let mut hdr = Vec::new();
    for v in 0..manifest.poses.len() {
        for name in [ldr_name(v), hdr_name(v)] {
            let bytes = fs::read(dir.join(&name))?;
            let actual = sha256(&bytes);
            let expected = manifest
                .files
                .get(&name)
                .ok_or_else(|| SynthError::Invalid(format!("{name} missing from manifest")))?;
            if *expected != actual {
                return Err(SynthError::Hash {
                    file: name,
                    expected: expected.clone(),
                    actual,
                });
            }
            if name.ends_with(".ppm") {
                let (w, h, d) = image::read_ppm(&bytes[..])?;
                ldr.push(Image::from_u8(w, h, &d)?);
            } else {
                let (w, h, d) = image::read_pfm(&bytes[..])?;
                hdr.push(Image::from_f32(w, h, &d)?);
            }
        }
    }
    Ok(DatasetBundle { manifest, ldr, hdr })
}

/// Hash over the manifest and every image hash it lists.
pub fn bundle_hash(manifest: &Manifest) -> Result<String, SynthError> {
    Ok(sha256(serde_json::to_string(manifest)?.as_bytes()))
}

//! Little-endian binary checkpoints.
//!
//! ```text
//! "MH3D"  u32 version
//! u32 n, config JSON (n bytes)
//! u64 step
//! field:  u32 nx ny nz, f64 bbox min[3] max[3], u8 encoding (0 logit, 1 linear),
//!         f64 density[nx*ny*nz], f64 color[3*nx*ny*nz]
//! l2h, h2l: u32 tensor count, then per tensor u32 rank, u32 dims[rank], f64 data
//! field, l2h, h2l optimizer: u64 t, u32 blocks, then per block u32 len, f64 m[len], f64 v[len]
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, Optimizers, TrainConfig, TrainError};
use crate::converters::{ConverterParams, ConverterSpec};
use crate::diffcore::Tensor;
use crate::optim::{Adam, AdamConfig};
use crate::radiance_field::{Aabb, ColorEncoding, VoxelField};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MH3D";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub model: Model,
    pub optim: Optimizers,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn len(&mut self, n: usize) -> Result<(), TrainError> {
        let n = u32::try_from(n).map_err(|_| TrainError::Checkpoint(format!("length {n} overflows u32")))?;
        self.u32(n);
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.buf.len() < n {
            return Err(TrainError::Checkpoint("truncated file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, TrainError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| TrainError::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn write_tensors(w: &mut Writer, ts: &[Tensor]) -> Result<(), TrainError> {
    w.len(ts.len())?;
    for t in ts {
        w.len(t.shape().len())?;
        for &d in t.shape() {
            w.len(d)?;
        }
        w.f64s(t.data());
    }
    Ok(())
}

fn read_tensors(r: &mut Reader) -> Result<Vec<Tensor>, TrainError> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().product();
        out.push(Tensor::new(shape, r.f64s(numel)?)?);
    }
    Ok(out)
}

fn write_adam(w: &mut Writer, a: &Adam) -> Result<(), TrainError> {
    w.u64(a.t);
    w.len(a.m.len())?;
    for (m, v) in a.m.iter().zip(&a.v) {
        w.len(m.len())?;
        w.f64s(m);
        w.f64s(v);
    }
    Ok(())
}

fn read_adam(r: &mut Reader, name: &str) -> Result<Adam, TrainError> {
    let t = r.u64()?;
    let blocks = r.u32()? as usize;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for _ in 0..blocks {
        let n = r.u32()? as usize;
        m.push(r.f64s(n)?);
        v.push(r.f64s(n)?);
    }
    Ok(Adam {
        name: name.into(),
        config: AdamConfig::default(),
        t,
        m,
        v,
    })
}

fn converter(spec: ConverterSpec, tensors: Vec<Tensor>) -> Result<ConverterParams, TrainError> {
    Ok(ConverterParams::from_tensors(spec, tensors)?)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let json = serde_json::to_vec(&self.config)?;
        w.len(json.len())?;
        w.0.extend_from_slice(&json);
        w.u64(self.step);
        let f = &self.model.field;
        for &n in &f.resolution {
            w.len(n)?;
        }
        w.f64s(&f.bbox.min);
        w.f64s(&f.bbox.max);
        w.u8(match f.encoding {
            ColorEncoding::Logit => 0,
            ColorEncoding::Linear => 1,
        });
        w.f64s(&f.density);
        w.f64s(&f.color);
        write_tensors(&mut w, &self.model.l2h.tensors)?;
        write_tensors(&mut w, &self.model.h2l.tensors)?;
        write_adam(&mut w, &self.optim.field)?;
        write_adam(&mut w, &self.optim.l2h)?;
        write_adam(&mut w, &self.optim.h2l)?;
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("missing MH3D magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(n)?)?;
        let step = r.u64()?;
        let resolution = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let min = r.f64s(3)?;
        let max = r.f64s(3)?;
        let encoding = match r.u8()? {
            0 => ColorEncoding::Logit,
            1 => ColorEncoding::Linear,
            e => return Err(TrainError::Checkpoint(format!("unknown color encoding {e}"))),
        };
        let voxels: usize = resolution.iter().product();
        let density = r.f64s(voxels)?;
        let color = r.f64s(3 * voxels)?;
        let field = VoxelField::new(
            resolution,
            Aabb {
                min: [min[0], min[1], min[2]],
                max: [max[0], max[1], max[2]],
            },
            density,
            color,
            encoding,
        )?;
        let l2h = converter(config.l2h, read_tensors(&mut r)?)?;
        let h2l = converter(config.h2l, read_tensors(&mut r)?)?;
        let optim = Optimizers {
            field: read_adam(&mut r, "field")?,
            l2h: read_adam(&mut r, "l2h")?,
            h2l: read_adam(&mut r, "h2l")?,
        };
        if !r.buf.is_empty() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes", r.buf.len())));
        }
        Ok(Self {
            config,
            step,
            model: Model { field, l2h, h2l },
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

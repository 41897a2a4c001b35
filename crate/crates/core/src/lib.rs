//! Single-exposure HDR novel view synthesis on a differentiable voxel field.

pub mod camera;
pub mod converters;
pub mod diffcore;
pub mod image;
pub mod objectives;
pub mod optim;
pub mod radiance_field;
pub mod synthdata;
pub mod trainer;

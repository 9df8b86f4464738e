//! Binary checkpoint format. All integers are little-endian `u32`, all
//! parameters little-endian `f32`:
//!
//! ```text
//! magic      8 bytes  "MANGALMK"
//! version    u32      1
//! config     u32 length, then NetConfig as UTF-8 JSON
//! mean shape u32 point count (60), then x0 y0 x1 y1 … as f32
//! stages     u32 stage count
//!   per stage: u32 tensor count
//!     per tensor: u32 name length, name (UTF-8), u32 ndim, ndim × u32 dims,
//!                 product(dims) × f32 values
//! ```
//!
//! Tensors of a stage appear in the order conv0.weight, conv0.bias, …,
//! hidden.weight, hidden.bias, output.weight, output.bias, feature.weight,
//! feature.bias.

use std::path::Path;

use super::layers::Tensor;
use super::{init_model, CascadeModel, NetConfig};
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::MeanShape;
use crate::schema::{Point, NUM_LANDMARKS};

pub const MAGIC: &[u8; 8] = b"MANGALMK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

pub fn to_bytes(model: &CascadeModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    let config = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, config.len());
    out.extend_from_slice(&config);
    put_u32(&mut out, model.mean_shape.points.len());
    for p in &model.mean_shape.points {
        put_f32(&mut out, p.x);
        put_f32(&mut out, p.y);
    }
    put_u32(&mut out, model.stages.len());
    for stage in &model.stages {
        let tensors = stage.tensors();
        put_u32(&mut out, tensors.len());
        for t in tensors {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.dims.len());
            for &d in &t.dims {
                put_u32(&mut out, d);
            }
            for &v in &t.data {
                put_f32(&mut out, v);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<CascadeModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()?;
    let config: NetConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let n = r.u32()?;
    if n != NUM_LANDMARKS {
        return Err(Error::Checkpoint(format!("mean shape has {n} points")));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let x = r.f32()?;
        let y = r.f32()?;
        points.push(Point::new(x, y));
    }
    let mean_shape = MeanShape {
        points,
        canvas: config.canvas,
        margin: config.mean_shape_margin,
    };
    // Build a skeleton with the right layout, then fill it in.
    let mut model = init_model(&config, &mean_shape, 0)?;
    let stages = r.u32()?;
    if stages != model.stages.len() {
        return Err(Error::Checkpoint(format!("{stages} stages, config says {}", model.stages.len())));
    }
    for stage in model.stages.iter_mut() {
        let count = r.u32()?;
        let slots: Vec<&mut Tensor> = stage.tensors_mut();
        if count != slots.len() {
            return Err(Error::Checkpoint(format!("stage has {count} tensors, expected {}", slots.len())));
        }
        for slot in slots {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()?;
            let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            if name != slot.name || dims != slot.dims {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {dims:?} does not match expected {} {:?}",
                    slot.name, slot.dims
                )));
            }
            for v in slot.data.iter_mut() {
                *v = r.f32()?;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &CascadeModel, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model)?)
}

pub fn load(path: &Path) -> Result<CascadeModel> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            producer: "train",
        },
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::layers::snap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> CascadeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points = (0..60)
            .map(|_| Point::new(rng.random_range(3.0..29.0), rng.random_range(3.0..29.0)))
            .collect();
        let mean = MeanShape { points, canvas: 32, margin: 0.1 };
        let mut m = init_model(&NetConfig::desk(), &mean, 7).unwrap();
        for v in m.stages[1].output.w.data.iter_mut() {
            *v = snap(rng.random_range(-1.0..1.0));
        }
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(from_bytes(&bytes).unwrap(), m);
        assert_eq!(to_bytes(&from_bytes(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&model()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }

    #[test]
    fn missing_file_names_the_producer() {
        let dir = tempfile::tempdir().unwrap();
        let err = load(&dir.path().join("none.ckpt")).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }
}

//! Binary checkpoints.
//!
//! ```text
//! "RGR1"  u32 version  u32 value width (4 or 8)
//! u32 n   n bytes of TOML: config and target scale
//! u32 m   m layout entries: u16 name length, name, u8 kind (0 param, 1 buffer), u64 offset, u64 length
//! parameter values, then running statistics, little endian
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, cast, Real, RegressorConfig, RegressorModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RGR1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RegressorConfig,
    target_scale: Vec<f64>,
}

pub fn save_checkpoint<T: Real>(model: &RegressorModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = toml::to_string(&Header {
        config: model.config.clone(),
        target_scale: model.target_scale.clone(),
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let entries: Vec<_> = model
        .layout
        .params
        .iter()
        .map(|e| (0u8, e))
        .chain(model.layout.buffers.iter().map(|e| (1u8, e)))
        .collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (kind, e) in entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(kind);
        out.extend_from_slice(&(e.range.start as u64).to_le_bytes());
        out.extend_from_slice(&(e.range.len() as u64).to_le_bytes());
    }
    for &v in model.params.iter().chain(&model.buffers) {
        v.write_le(&mut out);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Loads a checkpoint into a model of scalar type `T`. Values stored at a
/// different width are converted.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<RegressorModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint(format!("{} is not a regressor checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let width = r.u32()? as usize;
    if width != 4 && width != 8 {
        return Err(Error::Checkpoint(format!("unsupported value width {width}")));
    }
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut model = build_model::<T>(&header.config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    model
        .set_target_scale(header.target_scale)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let m = r.u32()? as usize;
    let expected: Vec<_> = model
        .layout
        .params
        .iter()
        .map(|e| (0u8, e.clone()))
        .chain(model.layout.buffers.iter().map(|e| (1u8, e.clone())))
        .collect();
    if m != expected.len() {
        return Err(Error::Checkpoint(format!("layout has {m} entries, config implies {}", expected.len())));
    }
    for (kind, e) in &expected {
        let len = r.u16()? as usize;
        let name = r.take(len)?;
        let k = r.take(1)?[0];
        let (off, cnt) = (r.u64()? as usize, r.u64()? as usize);
        if name != e.name.as_bytes() || k != *kind || off != e.range.start || cnt != e.range.len() {
            return Err(Error::Checkpoint(format!("layout entry `{}` does not match the config", e.name)));
        }
    }
    let total = model.params.len() + model.buffers.len();
    let blob = r.take(total * width)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    let vals = blob.chunks_exact(width).map(|c| {
        if width == T::BYTES {
            T::read_le(c)
        } else if width == 4 {
            cast::<T>(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        } else {
            cast::<T>(f64::from_le_bytes(c.try_into().expect("8 bytes")))
        }
    });
    let np = model.params.len();
    for (i, v) in vals.enumerate() {
        if !v.is_finite() {
            return Err(Error::Checkpoint(format!("non-finite value at index {i}")));
        }
        if i < np {
            model.params[i] = v;
        } else {
            model.buffers[i - np] = v;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RegressorConfig {
        RegressorConfig {
            input_dims: [16, 8],
            num_blocks: 2,
            layers_per_block: 2,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.rgr");
        let mut m = build_model::<f32>(&tiny(), 11).unwrap();
        m.set_target_scale(vec![3.0, 0.5]).unwrap();
        let x: Vec<f32> = (0..2 * 128).map(|i| (i % 7) as f32 / 7.0).collect();
        m.forward(&x, super::super::Mode::Train).unwrap();
        save_checkpoint(&m, &p).unwrap();
        let l = load_checkpoint::<f32>(&p).unwrap();
        assert_eq!(l.params(), m.params());
        assert_eq!(l.buffers(), m.buffers());
        assert_eq!(l.target_scale(), m.target_scale());
        assert_eq!(l.infer_batch(&x).unwrap(), m.infer_batch(&x).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.rgr");
        save_checkpoint(&build_model::<f64>(&tiny(), 1).unwrap(), &p).unwrap();
        let good = std::fs::read(&p).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        let e = load_checkpoint::<f64>(&p).unwrap_err().to_string();
        assert!(e.contains("magic"), "{e}");
        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&p, &bad).unwrap();
        assert!(load_checkpoint::<f64>(&p).unwrap_err().to_string().contains("version"));
        std::fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(load_checkpoint::<f64>(&p).unwrap_err().to_string().contains("truncated"));
    }
}

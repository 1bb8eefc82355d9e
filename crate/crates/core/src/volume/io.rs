//! The RVF1 container: a `key=value` text header closed by a blank line,
//! followed by raw little-endian samples in x-fastest order.
//!
//! ```text
//! magic=RVF1
//! kind=density|displacement|projection
//! dims=nx ny nz            (projection: dims=nu nv)
//! spacing=sx sy sz         (3D kinds only)
//! origin=ox oy oz          (3D kinds only)
//! dtype=f32
//!
//! <payload>
//! ```
//!
//! Displacements interleave `(ux, uy, uz)` per voxel. `dtype=f64` is also
//! accepted and written on request for lossless intermediate artifacts.

use std::fs;
use std::path::Path;

use super::{DensityVolume, DisplacementField, GridGeometry};
use crate::error::{Error, Result};

const MAGIC: &str = "RVF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RawKind {
    Density,
    Displacement,
    Projection,
}

impl RawKind {
    fn name(self) -> &'static str {
        match self {
            RawKind::Density => "density",
            RawKind::Displacement => "displacement",
            RawKind::Projection => "projection",
        }
    }

    fn components(self) -> usize {
        match self {
            RawKind::Displacement => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RawHeader {
    pub kind: RawKind,
    pub dims: Vec<usize>,
    pub spacing: Option<[f64; 3]>,
    pub origin: Option<[f64; 3]>,
    pub dtype: Dtype,
}

impl RawHeader {
    fn value_count(&self) -> usize {
        self.dims.iter().product::<usize>() * self.kind.components()
    }

    fn geometry(&self, path: &Path) -> Result<GridGeometry> {
        let bad = |reason: &str| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if self.dims.len() != 3 {
            return Err(bad("3D kinds need three dims"));
        }
        let spacing = self.spacing.ok_or_else(|| bad("missing spacing"))?;
        let origin = self.origin.ok_or_else(|| bad("missing origin"))?;
        GridGeometry::new([self.dims[0], self.dims[1], self.dims[2]], spacing, origin)
    }
}

fn fmt_triple(v: [f64; 3]) -> String {
    // `{:?}` prints the shortest representation that round-trips.
    format!("{:?} {:?} {:?}", v[0], v[1], v[2])
}

pub(crate) fn write_raw(path: &Path, header: &RawHeader, data: &[f64]) -> Result<()> {
    debug_assert_eq!(data.len(), header.value_count());
    let mut text = format!("magic={MAGIC}\nkind={}\n", header.kind.name());
    let dims: Vec<String> = header.dims.iter().map(|d| d.to_string()).collect();
    text.push_str(&format!("dims={}\n", dims.join(" ")));
    if let Some(s) = header.spacing {
        text.push_str(&format!("spacing={}\n", fmt_triple(s)));
    }
    if let Some(o) = header.origin {
        text.push_str(&format!("origin={}\n", fmt_triple(o)));
    }
    text.push_str(&format!("dtype={}\n\n", header.dtype.name()));
    let mut bytes = text.into_bytes();
    bytes.reserve(data.len() * header.dtype.size());
    match header.dtype {
        Dtype::F32 => {
            for v in data {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_triple(v: &str, path: &Path, key: &str) -> Result<[f64; 3]> {
    let nums: Vec<f64> = v
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("unparsable {key}: {v}"),
        })?;
    if nums.len() != 3 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("{key} needs 3 values"),
        });
    }
    Ok([nums[0], nums[1], nums[2]])
}

pub(crate) fn read_raw(path: &Path) -> Result<(RawHeader, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("no blank line terminating the header".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let payload = &bytes[end + 2..];

    let mut magic = None;
    let mut kind = None;
    let mut dims = None;
    let mut spacing = None;
    let mut origin = None;
    let mut dtype = None;
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line without '=': {line}")))?;
        match key.trim() {
            "magic" => magic = Some(value.trim().to_string()),
            "kind" => {
                kind = Some(match value.trim() {
                    "density" => RawKind::Density,
                    "displacement" => RawKind::Displacement,
                    "projection" => RawKind::Projection,
                    other => return Err(bad(format!("unknown kind {other}"))),
                })
            }
            "dims" => {
                let d: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("unparsable dims: {value}")))?;
                dims = Some(d);
            }
            "spacing" => spacing = Some(parse_triple(value, path, "spacing")?),
            "origin" => origin = Some(parse_triple(value, path, "origin")?),
            "dtype" => {
                dtype = Some(match value.trim() {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    other => return Err(bad(format!("unsupported dtype {other}"))),
                })
            }
            other => return Err(bad(format!("unknown key {other}"))),
        }
    }
    if magic.as_deref() != Some(MAGIC) {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let header = RawHeader {
        kind: kind.ok_or_else(|| bad("missing kind".into()))?,
        dims: dims.ok_or_else(|| bad("missing dims".into()))?,
        spacing,
        origin,
        dtype: dtype.ok_or_else(|| bad("missing dtype".into()))?,
    };
    let expected_dims = if header.kind == RawKind::Projection { 2 } else { 3 };
    if header.dims.len() != expected_dims {
        return Err(bad(format!("{} expects {expected_dims} dims", header.kind.name())));
    }
    let size = header.dtype.size();
    let expected = header.value_count();
    if payload.len() % size != 0 || payload.len() / size != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: payload.len() / size,
        });
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok((header, data))
}

pub fn write_volume(vol: &DensityVolume, path: impl AsRef<Path>) -> Result<()> {
    write_volume_as(vol, path, Dtype::F32)
}

pub fn write_volume_as(vol: &DensityVolume, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let g = vol.geometry();
    let header = RawHeader {
        kind: RawKind::Density,
        dims: g.dims().to_vec(),
        spacing: Some(g.spacing()),
        origin: Some(g.origin()),
        dtype,
    };
    write_raw(path.as_ref(), &header, vol.values())
}

/// Reads a density volume; negative samples are clamped to zero.
pub fn read_volume(path: impl AsRef<Path>) -> Result<DensityVolume> {
    let path = path.as_ref();
    let (header, data) = read_raw(path)?;
    if header.kind != RawKind::Density {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("expected kind=density, found {}", header.kind.name()),
        });
    }
    let geometry = header.geometry(path)?;
    Ok(DensityVolume::from_clamped(geometry, data))
}

pub fn write_field(u: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    write_field_as(u, path, Dtype::F32)
}

pub fn write_field_as(u: &DisplacementField, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let g = u.geometry();
    let header = RawHeader {
        kind: RawKind::Displacement,
        dims: g.dims().to_vec(),
        spacing: Some(g.spacing()),
        origin: Some(g.origin()),
        dtype,
    };
    write_raw(path.as_ref(), &header, u.as_flat())
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let (header, data) = read_raw(path)?;
    if header.kind != RawKind::Displacement {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("expected kind=displacement, found {}", header.kind.name()),
        });
    }
    let geometry = header.geometry(path)?;
    DisplacementField::from_flat(geometry, &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geometry() -> GridGeometry {
        GridGeometry::new([3, 4, 2], [0.976, 0.976, 3.0], [-1.25, 7.0, 0.1]).unwrap()
    }

    #[test]
    fn volume_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let g = geometry();
        // f32-representable values round-trip exactly through the f32 payload.
        let vol = DensityVolume::from_fn(g.clone(), |p| ((p[0] + 2.0 * p[1] + p[2]).abs() as f32) as f64).unwrap();
        let path = dir.path().join("v.rvf");
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.geometry(), vol.geometry());
        assert_eq!(back.values(), vol.values());
    }

    #[test]
    fn f64_payload_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let g = geometry();
        let vol = DensityVolume::from_fn(g, |p| (p[0] * 0.1).exp()).unwrap();
        let path = dir.path().join("v64.rvf");
        write_volume_as(&vol, &path, Dtype::F64).unwrap();
        assert_eq!(read_volume(&path).unwrap(), vol);
    }

    #[test]
    fn field_round_trip_keeps_components() {
        let dir = tempfile::tempdir().unwrap();
        let g = geometry();
        let u = DisplacementField::from_fn(g, |p| [p[0] as f32 as f64, -0.5, (p[2] * 2.0) as f32 as f64]).unwrap();
        let path = dir.path().join("u.rvf");
        write_field(&u, &path).unwrap();
        assert_eq!(read_field(&path).unwrap(), u);
    }

    #[test]
    fn short_payload_is_a_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.rvf");
        let mut bytes = b"magic=RVF1\nkind=density\ndims=2 2 2\nspacing=1 1 1\norigin=0 0 0\ndtype=f32\n\n".to_vec();
        for _ in 0..7 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(Error::LengthMismatch { expected: 8, found: 7 })
        ));
    }

    #[test]
    fn malformed_header_and_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rvf");
        std::fs::write(&path, b"magic=RVF2\nkind=density\n\n").unwrap();
        assert!(matches!(read_volume(&path), Err(Error::MalformedHeader { .. })));

        let mut bytes = b"magic=RVF1\nkind=density\ndims=2 2 2\nspacing=1 1 1\norigin=0 0 0\ndtype=f32\n\n".to_vec();
        for i in 0..8 {
            let v = if i == 4 { f32::INFINITY } else { 1.0 };
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::NonFinite { index: 4 })));
    }

    #[test]
    fn negative_samples_are_clamped_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.rvf");
        let mut bytes = b"magic=RVF1\nkind=density\ndims=2 2 2\nspacing=1 1 1\norigin=0 0 0\ndtype=f32\n\n".to_vec();
        for i in 0..8 {
            let v: f32 = if i == 2 { -0.5 } else { 0.25 };
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let vol = read_volume(&path).unwrap();
        assert_eq!(vol.values()[2], 0.0);
        assert_eq!(vol.values()[3], 0.25);
    }

    proptest! {
        #[test]
        fn any_f32_volume_round_trips(vals in proptest::collection::vec(0.0f32..1e6, 24)) {
            let dir = tempfile::tempdir().unwrap();
            let vol = DensityVolume::new(geometry(), vals.iter().map(|&v| v as f64).collect()).unwrap();
            let path = dir.path().join("p.rvf");
            write_volume(&vol, &path).unwrap();
            prop_assert_eq!(read_volume(&path).unwrap(), vol);
        }
    }
}

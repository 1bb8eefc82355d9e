//! Cone-beam digitally reconstructed radiographs: line integrals of
//! attenuation from a point source to every detector pixel.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{add, cross, dot, norm, scale, sub, Vec3};
use crate::volume::{read_raw, sample_scalar, warp_density, write_raw, DensityVolume, DisplacementField, Dtype, GridGeometry, RawHeader, RawKind};

/// Point source and flat detector. Pixel `(i, j)` (u fastest) has its centre
/// at `detector_center + (i − (nu−1)/2)·du·u_axis + (j − (nv−1)/2)·dv·v_axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGeometry {
    source: Vec3,
    detector_center: Vec3,
    u_axis: Vec3,
    v_axis: Vec3,
    det_dims: [usize; 2],
    det_spacing: [f64; 2],
    piercing_point: [f64; 2],
    source_detector_distance: f64,
}

impl ProjectionGeometry {
    pub fn new(
        source: Vec3,
        detector_center: Vec3,
        u_axis: Vec3,
        v_axis: Vec3,
        det_dims: [usize; 2],
        det_spacing: [f64; 2],
    ) -> Result<Self> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("projection geometry: {m}")));
        let finite = |v: Vec3| v.iter().all(|x| x.is_finite());
        if !(finite(source) && finite(detector_center) && finite(u_axis) && finite(v_axis)) {
            return bad("non-finite coordinates");
        }
        if (norm(u_axis) - 1.0).abs() > 1e-9 || (norm(v_axis) - 1.0).abs() > 1e-9 || dot(u_axis, v_axis).abs() > 1e-9 {
            return bad("detector axes must be orthonormal");
        }
        if det_dims.contains(&0) {
            return bad("detector needs at least one pixel per axis");
        }
        if det_spacing.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return bad("detector spacing must be positive");
        }
        let n = cross(u_axis, v_axis);
        let offset = sub(source, detector_center);
        let l = dot(offset, n).abs();
        if !(l > 1e-9) {
            return bad("source lies on the detector plane");
        }
        let foot = sub(source, scale(n, dot(offset, n)));
        let rel = sub(foot, detector_center);
        let piercing_point = [
            dot(rel, u_axis) / det_spacing[0] + 0.5 * (det_dims[0] as f64 - 1.0),
            dot(rel, v_axis) / det_spacing[1] + 0.5 * (det_dims[1] as f64 - 1.0),
        ];
        Ok(Self {
            source,
            detector_center,
            u_axis,
            v_axis,
            det_dims,
            det_spacing,
            piercing_point,
            source_detector_distance: l,
        })
    }

    pub fn source(&self) -> Vec3 {
        self.source
    }

    pub fn detector_center(&self) -> Vec3 {
        self.detector_center
    }

    pub fn u_axis(&self) -> Vec3 {
        self.u_axis
    }

    pub fn v_axis(&self) -> Vec3 {
        self.v_axis
    }

    pub fn det_dims(&self) -> [usize; 2] {
        self.det_dims
    }

    pub fn det_spacing(&self) -> [f64; 2] {
        self.det_spacing
    }

    /// Detector position (fractional pixels) closest to the source.
    pub fn piercing_point(&self) -> [f64; 2] {
        self.piercing_point
    }

    /// Perpendicular source-to-detector distance `l` (mm).
    pub fn source_detector_distance(&self) -> f64 {
        self.source_detector_distance
    }

    /// World position of the centre of pixel `(i, j)`.
    pub fn pixel_center(&self, i: usize, j: usize) -> Vec3 {
        let cu = (i as f64 - 0.5 * (self.det_dims[0] as f64 - 1.0)) * self.det_spacing[0];
        let cv = (j as f64 - 0.5 * (self.det_dims[1] as f64 - 1.0)) * self.det_spacing[1];
        add(self.detector_center, add(scale(self.u_axis, cu), scale(self.v_axis, cv)))
    }

    /// Central projection of a world point onto the detector, in fractional
    /// pixels. `None` if the point is level with the source.
    pub fn project_point(&self, p: Vec3) -> Option<[f64; 2]> {
        let n = cross(self.u_axis, self.v_axis);
        let dir = sub(p, self.source);
        let denom = dot(dir, n);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = dot(sub(self.detector_center, self.source), n) / denom;
        if !(t > 0.0) {
            return None;
        }
        let hit = sub(add(self.source, scale(dir, t)), self.detector_center);
        Some([
            dot(hit, self.u_axis) / self.det_spacing[0] + 0.5 * (self.det_dims[0] as f64 - 1.0),
            dot(hit, self.v_axis) / self.det_spacing[1] + 0.5 * (self.det_dims[1] as f64 - 1.0),
        ])
    }
}

/// Parameters of the lateral default setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionSetup {
    pub source_axis_distance: f64,
    pub source_detector_distance: f64,
    pub det_dims: [usize; 2],
    pub det_spacing: [f64; 2],
}

impl Default for ProjectionSetup {
    fn default() -> Self {
        Self {
            source_axis_distance: 1000.0,
            source_detector_distance: 1500.0,
            det_dims: [1024, 768],
            det_spacing: [0.388, 0.388],
        }
    }
}

/// Source on the +x axis through the volume centre, detector perpendicular to
/// the central ray on the far side. The detector's u axis runs along +z
/// (superior–inferior) and v along +y.
pub fn default_geometry(vol: &GridGeometry, setup: &ProjectionSetup) -> Result<ProjectionGeometry> {
    if !(setup.source_axis_distance > 0.0 && setup.source_detector_distance > setup.source_axis_distance) {
        return Err(Error::InvalidArgument(
            "source-detector distance must exceed the positive source-axis distance".into(),
        ));
    }
    let c = vol.center();
    let source = add(c, [setup.source_axis_distance, 0.0, 0.0]);
    let detector_center = sub(source, [setup.source_detector_distance, 0.0, 0.0]);
    ProjectionGeometry::new(
        source,
        detector_center,
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        setup.det_dims,
        setup.det_spacing,
    )
}

/// Line-integral image, `u` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionImage {
    dims: [usize; 2],
    values: Vec<f64>,
}

impl ProjectionImage {
    pub fn new(dims: [usize; 2], values: Vec<f64>) -> Result<Self> {
        if values.len() != dims[0] * dims[1] {
            return Err(Error::LengthMismatch {
                expected: dims[0] * dims[1],
                found: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: [usize; 2]) -> Self {
        Self {
            dims,
            values: vec![0.0; dims[0] * dims[1]],
        }
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.dims[0] + i]
    }

    /// Intensity-weighted mean pixel position.
    pub fn centroid(&self) -> Option<[f64; 2]> {
        let mut m = 0.0;
        let mut c = [0.0; 2];
        for (idx, v) in self.values.iter().enumerate() {
            let (i, j) = (idx % self.dims[0], idx / self.dims[0]);
            m += v;
            c[0] += v * i as f64;
            c[1] += v * j as f64;
        }
        (m > 0.0).then(|| [c[0] / m, c[1] / m])
    }
}

/// Half the smallest voxel spacing.
pub fn default_step(vol: &GridGeometry) -> f64 {
    0.5 * vol.spacing().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Parameter interval of `a + t·d` inside the box, `t ∈ [0, 1]`.
fn clip_segment(a: Vec3, d: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for ax in 0..3 {
        if d[ax].abs() < 1e-15 {
            if a[ax] < lo[ax] || a[ax] > hi[ax] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[ax] - a[ax]) / d[ax], (hi[ax] - a[ax]) / d[ax]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 >= t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Midpoint-rule line integrals along every source→pixel segment, clipped to
/// the region where the interpolated volume can be nonzero. The sample
/// spacing along each ray is at most `step_mm`.
pub fn render_drr(vol: &DensityVolume, geom: &ProjectionGeometry, step_mm: f64) -> Result<ProjectionImage> {
    if !(step_mm > 0.0 && step_mm.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step_mm}")));
    }
    let vg = vol.geometry();
    let (lo, hi) = vg.support_bounds();
    let [nu, nv] = geom.det_dims;
    let mut values = vec![0.0; nu * nv];
    values.par_chunks_mut(nu).enumerate().for_each(|(j, row)| {
        for (i, out) in row.iter_mut().enumerate() {
            let d = sub(geom.pixel_center(i, j), geom.source);
            let Some((t0, t1)) = clip_segment(geom.source, d, lo, hi) else {
                continue;
            };
            let len = (t1 - t0) * norm(d);
            let n = (len / step_mm).ceil().max(1.0) as usize;
            let h = (t1 - t0) / n as f64;
            let mut acc = 0.0;
            for k in 0..n {
                let t = t0 + (k as f64 + 0.5) * h;
                acc += sample_scalar(vg, vol.values(), add(geom.source, scale(d, t)));
            }
            *out = acc * len / n as f64;
        }
    });
    ProjectionImage::new([nu, nv], values)
}

/// `render_drr(warp_density(vol, u), …)`.
pub fn render_drr_deformed(
    vol: &DensityVolume,
    u: &DisplacementField,
    geom: &ProjectionGeometry,
    step_mm: f64,
) -> Result<ProjectionImage> {
    render_drr(&warp_density(vol, u)?, geom, step_mm)
}

pub fn write_projection(img: &ProjectionImage, path: impl AsRef<Path>) -> Result<()> {
    write_projection_as(img, path, Dtype::F32)
}

pub fn write_projection_as(img: &ProjectionImage, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let header = RawHeader {
        kind: RawKind::Projection,
        dims: img.dims.to_vec(),
        spacing: None,
        origin: None,
        dtype,
    };
    write_raw(path.as_ref(), &header, &img.values)
}

pub fn read_projection(path: impl AsRef<Path>) -> Result<ProjectionImage> {
    let path = path.as_ref();
    let (header, data) = read_raw(path)?;
    if header.kind != RawKind::Projection {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "expected kind=projection".into(),
        });
    }
    ProjectionImage::new([header.dims[0], header.dims[1]], data)
}

/// 8-bit binary PGM, min–max scaled. For viewing only.
pub fn write_pgm(img: &ProjectionImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (lo, hi) = img
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    let mut bytes = format!("P5\n{} {}\n255\n", img.dims[0], img.dims[1]).into_bytes();
    bytes.extend(img.values.iter().map(|v| {
        if range > 0.0 {
            (255.0 * (v - lo) / range).round() as u8
        } else {
            0
        }
    }));
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_setup() -> ProjectionSetup {
        ProjectionSetup {
            det_dims: [33, 25],
            det_spacing: [2.0, 2.0],
            ..Default::default()
        }
    }

    #[test]
    fn default_geometry_matches_the_declared_setup() {
        let vg = GridGeometry::centered([8, 8, 8], [1.0; 3]).unwrap();
        let g = default_geometry(&vg, &ProjectionSetup::default()).unwrap();
        assert!((g.source_detector_distance() - 1500.0).abs() < 1e-9);
        assert_eq!(g.det_dims(), [1024, 768]);
        assert_eq!(g.det_spacing(), [0.388, 0.388]);
        let pp = g.piercing_point();
        assert!((pp[0] - 511.5).abs() < 1e-9 && (pp[1] - 383.5).abs() < 1e-9);
    }

    #[test]
    fn piercing_point_of_an_offset_source() {
        let g = ProjectionGeometry::new(
            [100.0, 3.0, -4.0],
            [0.0; 3],
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [11, 11],
            [1.0, 1.0],
        )
        .unwrap();
        // Foot of the perpendicular is (0, 3, -4): u = z, v = y.
        assert!((g.piercing_point()[0] - 1.0).abs() < 1e-12);
        assert!((g.piercing_point()[1] - 8.0).abs() < 1e-12);
        assert!((g.source_detector_distance() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_geometries_are_rejected() {
        let mk = |s: Vec3, u: Vec3, v: Vec3| ProjectionGeometry::new(s, [0.0; 3], u, v, [4, 4], [1.0, 1.0]);
        assert!(mk([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]).is_err());
        assert!(mk([1.0, 0.0, 0.0], [0.0, 0.0, 2.0], [0.0, 1.0, 0.0]).is_err());
        assert!(mk([0.0, 1.0, 1.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn zero_volume_gives_zero_image() {
        let vg = GridGeometry::centered([10, 10, 10], [2.0; 3]).unwrap();
        let g = default_geometry(&vg, &small_setup()).unwrap();
        let img = render_drr(&DensityVolume::zeros(vg.clone()), &g, default_step(&vg)).unwrap();
        assert!(img.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projected_offsets_scale_with_detector_distance() {
        let vg = GridGeometry::centered([8, 8, 8], [1.0; 3]).unwrap();
        let near = default_geometry(&vg, &small_setup()).unwrap();
        let far = default_geometry(
            &vg,
            &ProjectionSetup {
                source_detector_distance: 3000.0,
                ..small_setup()
            },
        )
        .unwrap();
        let p = add(vg.center(), [0.0, 5.0, -3.0]);
        let (a, b) = (near.project_point(p).unwrap(), far.project_point(p).unwrap());
        let (pa, pb) = (near.piercing_point(), far.piercing_point());
        // Magnification SDD/SAD: 1.5 against 3.0; pixels are 2 mm.
        assert!(((a[1] - pa[1]) * 2.0 - 1.5 * 5.0).abs() < 1e-9);
        assert!(((b[1] - pb[1]) - 2.0 * (a[1] - pa[1])).abs() < 1e-9);
        assert!(((b[0] - pb[0]) - 2.0 * (a[0] - pa[0])).abs() < 1e-9);
    }

    #[test]
    fn rays_missing_the_volume_are_zero() {
        let vg = GridGeometry::centered([6, 6, 6], [1.0; 3]).unwrap();
        let g = default_geometry(&vg, &ProjectionSetup { det_dims: [40, 3], det_spacing: [5.0, 5.0], ..Default::default() }).unwrap();
        let img = render_drr(&DensityVolume::constant(vg, 1.0).unwrap(), &g, 0.5).unwrap();
        assert_eq!(img.get(0, 1), 0.0);
        assert!(img.get(20, 1) > 0.0);
    }

    #[test]
    fn projection_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let img = ProjectionImage::new([3, 2], vec![0.0, 1.5, 2.0, 3.25, 4.0, 5.0]).unwrap();
        let p = dir.path().join("p.rvf");
        write_projection(&img, &p).unwrap();
        assert_eq!(read_projection(&p).unwrap(), img);
        let vol = DensityVolume::zeros(GridGeometry::centered([2, 2, 2], [1.0; 3]).unwrap());
        let q = dir.path().join("v.rvf");
        crate::volume::write_volume(&vol, &q).unwrap();
        assert!(read_projection(&q).is_err());
        write_pgm(&img, dir.path().join("p.pgm")).unwrap();
        let pgm = std::fs::read(dir.path().join("p.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n") && pgm.len() == 11 + 6);
    }
}

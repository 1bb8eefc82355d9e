//! Grid containers for densities and displacement fields.
//!
//! Displacements always store `u(x) = φ⁻¹(x) − x` in millimetres: the field
//! that pulls a moving density back onto the reference grid. Every module in
//! the crate uses this convention.

mod interp;
mod io;
mod jacobian;
mod warp;

pub use interp::trilinear_sample;
pub(crate) use interp::{sample_scalar, sample_scalar_with_gradient, sample_vector};
pub use io::{read_field, read_volume, write_field, write_field_as, write_volume, write_volume_as, Dtype};
pub(crate) use io::{read_raw, write_raw, RawHeader, RawKind};
pub use jacobian::jacobian_determinant;
pub(crate) use jacobian::{axis_derivative_adjoint, deformation_gradients};
pub use warp::{invert_field, warp_density};

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Regular grid: voxel `(i, j, k)` sits at `origin + (i·sx, j·sy, k·sz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::InvalidGeometry(format!("all dims must be >= 2, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGeometry(format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Grid whose centre lies at the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [
            -0.5 * (dims[0].saturating_sub(1)) as f64 * spacing[0],
            -0.5 * (dims[1].saturating_sub(1)) as f64 * spacing[1],
            -0.5 * (dims[2].saturating_sub(1)) as f64 * spacing[2],
        ];
        Self::new(dims, spacing, origin)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Linear index, x fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    #[inline]
    pub fn world_of_index(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.coords(idx);
        self.world(i, j, k)
    }

    /// Centre of the voxel-centre bounding box.
    pub fn center(&self) -> Vec3 {
        [
            self.origin[0] + 0.5 * (self.dims[0] - 1) as f64 * self.spacing[0],
            self.origin[1] + 0.5 * (self.dims[1] - 1) as f64 * self.spacing[1],
            self.origin[2] + 0.5 * (self.dims[2] - 1) as f64 * self.spacing[2],
        ]
    }

    /// Region where zero-padded trilinear sampling can be nonzero:
    /// one voxel beyond the outermost voxel centres on every side.
    pub fn support_bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.origin[a] - self.spacing[a];
            hi[a] = self.origin[a] + self.dims[a] as f64 * self.spacing[a];
        }
        (lo, hi)
    }

    pub fn ensure_same(&self, other: &GridGeometry, context: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{context}: {:?}/{:?}/{:?} vs {:?}/{:?}/{:?}",
                self.dims, self.spacing, self.origin, other.dims, other.spacing, other.origin
            )))
        }
    }
}

/// Scalar density on a grid (linear attenuation, nonnegative).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVolume {
    geometry: GridGeometry,
    values: Vec<f64>,
}

impl DensityVolume {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::LengthMismatch {
                expected: geometry.len(),
                found: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if let Some(index) = values.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "density must be nonnegative (value {} at index {index})",
                values[index]
            )));
        }
        Ok(Self { geometry, values })
    }

    /// Builds from possibly slightly negative values by clamping at zero.
    pub(crate) fn from_clamped(geometry: GridGeometry, mut values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), geometry.len());
        for v in &mut values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Self { geometry, values }
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        Self { geometry, values: vec![0.0; n] }
    }

    pub fn constant(geometry: GridGeometry, value: f64) -> Result<Self> {
        let n = geometry.len();
        Self::new(geometry, vec![value; n])
    }

    /// Evaluates `f` at every voxel's world position.
    pub fn from_fn(geometry: GridGeometry, f: impl Fn(Vec3) -> f64) -> Result<Self> {
        let values = (0..geometry.len()).map(|idx| f(geometry.world_of_index(idx))).collect();
        Self::new(geometry, values)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.geometry.index(i, j, k)]
    }

    /// `∑ values · voxel volume`.
    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.geometry.voxel_volume()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.geometry.clone(), self.values.iter().map(|v| v * factor).collect())
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// Unconstrained scalar field on a grid (Jacobian determinants, error maps).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    geometry: GridGeometry,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::LengthMismatch {
                expected: geometry.len(),
                found: values.len(),
            });
        }
        Ok(Self { geometry, values })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.geometry.index(i, j, k)]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Displacement field `u(x) = φ⁻¹(x) − x` in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    geometry: GridGeometry,
    vectors: Vec<Vec3>,
}

impl DisplacementField {
    pub fn new(geometry: GridGeometry, vectors: Vec<Vec3>) -> Result<Self> {
        if vectors.len() != geometry.len() {
            return Err(Error::LengthMismatch {
                expected: geometry.len(),
                found: vectors.len(),
            });
        }
        if let Some(index) = vectors.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { geometry, vectors })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            vectors: vec![[0.0; 3]; n],
        }
    }

    pub fn from_fn(geometry: GridGeometry, f: impl Fn(Vec3) -> Vec3) -> Result<Self> {
        let vectors = (0..geometry.len()).map(|idx| f(geometry.world_of_index(idx))).collect();
        Self::new(geometry, vectors)
    }

    /// Rebuilds a field from the interleaved `(ux, uy, uz)` layout.
    pub fn from_flat(geometry: GridGeometry, flat: &[f64]) -> Result<Self> {
        if flat.len() != 3 * geometry.len() {
            return Err(Error::LengthMismatch {
                expected: 3 * geometry.len(),
                found: flat.len(),
            });
        }
        let vectors = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(geometry, vectors)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn vectors(&self) -> &[Vec3] {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut [Vec3] {
        &mut self.vectors
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.vectors[self.geometry.index(i, j, k)]
    }

    /// Interleaved `(ux, uy, uz)` per voxel, x fastest.
    pub fn as_flat(&self) -> &[f64] {
        self.vectors.as_flattened()
    }

    /// Frobenius inner product with another field on the same grid.
    pub fn dot(&self, other: &DisplacementField) -> Result<f64> {
        self.geometry.ensure_same(&other.geometry, "field dot product")?;
        Ok(self
            .as_flat()
            .iter()
            .zip(other.as_flat())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.as_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest per-voxel Euclidean displacement.
    pub fn max_norm(&self) -> f64 {
        self.vectors.iter().map(|v| crate::geom::norm(*v)).fold(0.0, f64::max)
    }

    /// `self + s·other`.
    pub fn add_scaled(&self, s: f64, other: &DisplacementField) -> Result<DisplacementField> {
        self.geometry.ensure_same(&other.geometry, "field addition")?;
        let vectors = self
            .vectors
            .iter()
            .zip(&other.vectors)
            .map(|(a, b)| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]])
            .collect();
        Ok(DisplacementField {
            geometry: self.geometry.clone(),
            vectors,
        })
    }

    pub fn scaled(&self, s: f64) -> DisplacementField {
        DisplacementField {
            geometry: self.geometry.clone(),
            vectors: self.vectors.iter().map(|v| crate::geom::scale(*v, s)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_coordinates_are_exact() {
        let g = GridGeometry::new([4, 3, 2], [0.5, 2.0, 3.0], [-1.0, 10.0, 0.25]).unwrap();
        assert_eq!(g.world(3, 2, 1), [-1.0 + 1.5, 10.0 + 4.0, 0.25 + 3.0]);
        for idx in 0..g.len() {
            let [i, j, k] = g.coords(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
    }

    #[test]
    fn rejects_degenerate_geometry() {
        assert!(GridGeometry::new([1, 4, 4], [1.0; 3], [0.0; 3]).is_err());
        assert!(GridGeometry::new([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn density_rejects_negative_and_wrong_length() {
        let g = GridGeometry::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        assert!(matches!(
            DensityVolume::new(g.clone(), vec![0.0; 7]),
            Err(Error::LengthMismatch { expected: 8, found: 7 })
        ));
        let mut v = vec![1.0; 8];
        v[3] = -0.1;
        assert!(DensityVolume::new(g.clone(), v).is_err());
        let mut v = vec![1.0; 8];
        v[5] = f64::NAN;
        assert!(matches!(DensityVolume::new(g, v), Err(Error::NonFinite { index: 5 })));
    }

    #[test]
    fn centered_grid_has_zero_center() {
        let g = GridGeometry::centered([5, 6, 7], [2.0, 2.0, 3.0]).unwrap();
        let c = g.center();
        assert!(c.iter().all(|v| v.abs() < 1e-12));
    }
}

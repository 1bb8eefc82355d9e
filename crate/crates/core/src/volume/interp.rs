//! Trilinear interpolation with zero padding outside the grid.
//!
//! Voxels beyond the grid are treated as zero, so the interpolant fades
//! linearly to zero within one voxel of the outermost voxel centres.

use super::{DensityVolume, GridGeometry};
use crate::geom::Vec3;

/// Corner indices and weights of the cell containing `p`.
struct Cell {
    base: [i64; 3],
    frac: [f64; 3],
}

const NODE_SNAP: f64 = 1e-10;

#[inline]
fn locate(geom: &GridGeometry, p: Vec3) -> Option<Cell> {
    let dims = geom.dims();
    let o = geom.origin();
    let h = geom.spacing();
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let mut c = (p[a] - o[a]) / h[a];
        // Land exactly on nodes despite rounding in the world transform.
        let r = c.round();
        if (c - r).abs() < NODE_SNAP {
            c = r;
        }
        if !(c > -1.0 && c < dims[a] as f64) {
            return None;
        }
        let f = c.floor();
        base[a] = f as i64;
        frac[a] = c - f;
    }
    Some(Cell { base, frac })
}

#[inline]
fn corner_index(geom: &GridGeometry, base: [i64; 3], d: [usize; 3]) -> Option<usize> {
    let dims = geom.dims();
    let i = base[0] + d[0] as i64;
    let j = base[1] + d[1] as i64;
    let k = base[2] + d[2] as i64;
    if i < 0 || j < 0 || k < 0 || i >= dims[0] as i64 || j >= dims[1] as i64 || k >= dims[2] as i64 {
        None
    } else {
        Some(geom.index(i as usize, j as usize, k as usize))
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

#[inline]
fn weight(frac: f64, d: usize) -> f64 {
    if d == 0 {
        1.0 - frac
    } else {
        frac
    }
}

pub(crate) fn sample_scalar(geom: &GridGeometry, values: &[f64], p: Vec3) -> f64 {
    let Some(cell) = locate(geom, p) else {
        return 0.0;
    };
    let mut acc = 0.0;
    for d in CORNERS {
        if let Some(idx) = corner_index(geom, cell.base, d) {
            let w = weight(cell.frac[0], d[0]) * weight(cell.frac[1], d[1]) * weight(cell.frac[2], d[2]);
            acc += w * values[idx];
        }
    }
    acc
}

/// Value and spatial gradient (per mm) of the interpolant at `p`.
pub(crate) fn sample_scalar_with_gradient(geom: &GridGeometry, values: &[f64], p: Vec3) -> (f64, Vec3) {
    let Some(cell) = locate(geom, p) else {
        return (0.0, [0.0; 3]);
    };
    let h = geom.spacing();
    let f = cell.frac;
    let mut val = 0.0;
    let mut grad = [0.0; 3];
    for d in CORNERS {
        if let Some(idx) = corner_index(geom, cell.base, d) {
            let v = values[idx];
            let wx = weight(f[0], d[0]);
            let wy = weight(f[1], d[1]);
            let wz = weight(f[2], d[2]);
            let sx = if d[0] == 0 { -1.0 } else { 1.0 };
            let sy = if d[1] == 0 { -1.0 } else { 1.0 };
            let sz = if d[2] == 0 { -1.0 } else { 1.0 };
            val += wx * wy * wz * v;
            grad[0] += sx * wy * wz * v;
            grad[1] += wx * sy * wz * v;
            grad[2] += wx * wy * sz * v;
        }
    }
    (val, [grad[0] / h[0], grad[1] / h[1], grad[2] / h[2]])
}

pub(crate) fn sample_vector(geom: &GridGeometry, vectors: &[Vec3], p: Vec3) -> Vec3 {
    let Some(cell) = locate(geom, p) else {
        return [0.0; 3];
    };
    let mut acc = [0.0; 3];
    for d in CORNERS {
        if let Some(idx) = corner_index(geom, cell.base, d) {
            let w = weight(cell.frac[0], d[0]) * weight(cell.frac[1], d[1]) * weight(cell.frac[2], d[2]);
            let v = vectors[idx];
            acc[0] += w * v[0];
            acc[1] += w * v[1];
            acc[2] += w * v[2];
        }
    }
    acc
}

/// Trilinear interpolation at world point `p` (mm); zero outside the grid.
pub fn trilinear_sample(vol: &DensityVolume, p: Vec3) -> f64 {
    sample_scalar(vol.geometry(), vol.values(), p)
}

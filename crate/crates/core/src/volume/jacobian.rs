//! Finite-difference deformation gradients and their adjoint.
//!
//! Central differences in the interior, one-sided differences on the faces,
//! all in physical units.

use super::{DisplacementField, GridGeometry, ScalarField};
use crate::geom::{det3, Mat3, Vec3};

/// Stencil of the derivative along one axis at position `i` of `n` samples:
/// `(offset_minus, offset_plus, inv_denominator)` such that
/// `d = (f[i + plus] - f[i - minus]) * inv_denominator`.
#[inline]
fn stencil(i: usize, n: usize, h: f64) -> (usize, usize, f64) {
    if i == 0 {
        (0, 1, 1.0 / h)
    } else if i == n - 1 {
        (1, 0, 1.0 / h)
    } else {
        (1, 1, 0.5 / h)
    }
}

#[inline]
fn strides(geom: &GridGeometry) -> [usize; 3] {
    let d = geom.dims();
    [1, d[0], d[0] * d[1]]
}

/// `I + Du(x)` for every voxel, with `Du[a][b] = ∂u_a/∂x_b`.
pub(crate) fn deformation_gradients(vectors: &[Vec3], geom: &GridGeometry) -> Vec<Mat3> {
    let dims = geom.dims();
    let h = geom.spacing();
    let st = strides(geom);
    let mut out = Vec::with_capacity(geom.len());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let idx = geom.index(i, j, k);
                let pos = [i, j, k];
                let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
                for b in 0..3 {
                    let (lo, hi, inv) = stencil(pos[b], dims[b], h[b]);
                    let up = vectors[idx + hi * st[b]];
                    let down = vectors[idx - lo * st[b]];
                    for a in 0..3 {
                        m[a][b] += (up[a] - down[a]) * inv;
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Accumulates `Dᵀ g` into `out`, where `D` is the derivative along `axis`.
pub(crate) fn axis_derivative_adjoint(geom: &GridGeometry, axis: usize, g: &[f64], out: &mut [f64]) {
    let dims = geom.dims();
    let h = geom.spacing()[axis];
    let stride = strides(geom)[axis];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let idx = geom.index(i, j, k);
                let gv = g[idx];
                if gv == 0.0 {
                    continue;
                }
                let pos = [i, j, k][axis];
                let (lo, hi, inv) = stencil(pos, dims[axis], h);
                out[idx + hi * stride] += gv * inv;
                out[idx - lo * stride] -= gv * inv;
            }
        }
    }
}

/// `det(I + Du(x))` per voxel. Negative values mark folding and are returned as-is.
pub fn jacobian_determinant(u: &DisplacementField) -> ScalarField {
    let geom = u.geometry();
    let values = deformation_gradients(u.vectors(), geom).iter().map(det3).collect();
    ScalarField::new(geom.clone(), values).expect("length matches geometry")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geometry() -> GridGeometry {
        GridGeometry::new([7, 6, 5], [1.0, 2.0, 3.0], [-3.0, -5.0, -6.0]).unwrap()
    }

    #[test]
    fn zero_field_has_unit_jacobian() {
        let jac = jacobian_determinant(&DisplacementField::zeros(geometry()));
        assert!(jac.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn affine_field_interior() {
        let g = geometry();
        let u = DisplacementField::from_fn(g.clone(), |p| [0.1 * p[0], 0.1 * p[1], 0.1 * p[2]]).unwrap();
        let jac = jacobian_determinant(&u);
        // One-sided differences are exact for affine fields too, so every voxel matches.
        for v in jac.values() {
            assert!((v - 1.331).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn general_affine_matches_analytic_determinant() {
        let a = [[0.05, -0.2, 0.1], [0.3, -0.1, 0.02], [-0.04, 0.15, 0.2]];
        let g = geometry();
        let u = DisplacementField::from_fn(g.clone(), |p| {
            let mut r = [0.0; 3];
            for (row, out) in a.iter().zip(r.iter_mut()) {
                *out = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + 0.7;
            }
            r
        })
        .unwrap();
        let mut m = a;
        for (d, row) in m.iter_mut().enumerate() {
            row[d] += 1.0;
        }
        let expected = det3(&m);
        let jac = jacobian_determinant(&u);
        for v in jac.values() {
            assert!((v - expected).abs() < 1e-10);
        }
    }

    /// Independent voxel-by-voxel recomputation using explicit neighbour lookups.
    fn brute_force_jacobian(u: &DisplacementField) -> Vec<f64> {
        let g = u.geometry();
        let [nx, ny, nz] = g.dims();
        let h = g.spacing();
        let mut out = vec![0.0; g.len()];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let deriv = |axis: usize, comp: usize| -> f64 {
                        let n = [nx, ny, nz][axis];
                        let c = [i, j, k][axis];
                        let at = |cc: usize| {
                            let mut q = [i, j, k];
                            q[axis] = cc;
                            u.get(q[0], q[1], q[2])[comp]
                        };
                        if c == 0 {
                            (at(1) - at(0)) / h[axis]
                        } else if c == n - 1 {
                            (at(n - 1) - at(n - 2)) / h[axis]
                        } else {
                            (at(c + 1) - at(c - 1)) / (2.0 * h[axis])
                        }
                    };
                    let mut m = [[0.0; 3]; 3];
                    for (a, row) in m.iter_mut().enumerate() {
                        for (b, cell) in row.iter_mut().enumerate() {
                            *cell = deriv(b, a) + if a == b { 1.0 } else { 0.0 };
                        }
                    }
                    // Rule of Sarrus.
                    let d = m[0][0] * m[1][1] * m[2][2] + m[0][1] * m[1][2] * m[2][0] + m[0][2] * m[1][0] * m[2][1]
                        - m[0][2] * m[1][1] * m[2][0]
                        - m[0][0] * m[1][2] * m[2][1]
                        - m[0][1] * m[1][0] * m[2][2];
                    out[g.index(i, j, k)] = d;
                }
            }
        }
        out
    }

    #[test]
    fn random_smooth_field_matches_brute_force() {
        let g = geometry();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coeffs: Vec<f64> = (0..9).map(|_| rng.random_range(-0.5..0.5)).collect();
        let u = DisplacementField::from_fn(g.clone(), |p| {
            [
                coeffs[0] * (0.3 * p[1]).sin() + coeffs[1] * (0.2 * p[2]).cos() + coeffs[2] * p[0] * 0.1,
                coeffs[3] * (0.25 * p[0]).cos() + coeffs[4] * (0.1 * p[2]).sin() + coeffs[5],
                coeffs[6] * (0.15 * p[0] * p[1] * 0.1).sin() + coeffs[7] * p[2] * 0.05 + coeffs[8],
            ]
        })
        .unwrap();
        let ours = jacobian_determinant(&u);
        let oracle = brute_force_jacobian(&u);
        for (a, b) in ours.values().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_is_transpose_of_derivative() {
        let g = geometry();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for axis in 0..3 {
            // <D f, w> == <f, Dᵀ w>, computing D f through deformation_gradients on a field with f in one slot.
            let vecs: Vec<Vec3> = f.iter().map(|&v| [v, 0.0, 0.0]).collect();
            let grads = deformation_gradients(&vecs, &g);
            let lhs: f64 = grads.iter().zip(&w).map(|(m, wv)| m[0][axis] * wv).sum::<f64>()
                - if axis == 0 { w.iter().sum::<f64>() } else { 0.0 };
            let mut adj = vec![0.0; g.len()];
            axis_derivative_adjoint(&g, axis, &w, &mut adj);
            let rhs: f64 = f.iter().zip(&adj).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "axis {axis}: {lhs} vs {rhs}");
        }
    }
}

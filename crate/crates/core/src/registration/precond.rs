//! Sobolev preconditioner `K = (−a∆ + b·Id)⁻¹`, applied per component in
//! the periodic Fourier basis of the grid.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::volume::{DisplacementField, GridGeometry};

pub struct SobolevPreconditioner {
    dims: [usize; 3],
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
    /// `1 / (a·λ(k) + b)` per frequency, x fastest.
    multiplier: Vec<f64>,
}

impl std::fmt::Debug for SobolevPreconditioner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SobolevPreconditioner").field("dims", &self.dims).finish()
    }
}

impl SobolevPreconditioner {
    pub fn new(geom: &GridGeometry, a: f64, b: f64) -> Self {
        let dims = geom.dims();
        let h = geom.spacing();
        let mut planner = FftPlanner::new();
        let forward = [
            planner.plan_fft_forward(dims[0]),
            planner.plan_fft_forward(dims[1]),
            planner.plan_fft_forward(dims[2]),
        ];
        let inverse = [
            planner.plan_fft_inverse(dims[0]),
            planner.plan_fft_inverse(dims[1]),
            planner.plan_fft_inverse(dims[2]),
        ];
        // Eigenvalues of the 7-point negative Laplacian with periodic wrap.
        let lam = |axis: usize, k: usize| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / dims[axis] as f64;
            (2.0 - 2.0 * theta.cos()) / (h[axis] * h[axis])
        };
        let mut multiplier = Vec::with_capacity(geom.len());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let l = lam(0, i) + lam(1, j) + lam(2, k);
                    multiplier.push(1.0 / (a * l + b));
                }
            }
        }
        Self {
            dims,
            forward,
            inverse,
            multiplier,
        }
    }

    fn transform(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>; 3]) {
        let [nx, ny, nz] = self.dims;
        for row in data.chunks_exact_mut(nx) {
            plans[0].process(row);
        }
        let mut line = vec![Complex64::default(); ny.max(nz)];
        for k in 0..nz {
            for i in 0..nx {
                for j in 0..ny {
                    line[j] = data[i + nx * (j + ny * k)];
                }
                plans[1].process(&mut line[..ny]);
                for j in 0..ny {
                    data[i + nx * (j + ny * k)] = line[j];
                }
            }
        }
        for j in 0..ny {
            for i in 0..nx {
                for k in 0..nz {
                    line[k] = data[i + nx * (j + ny * k)];
                }
                plans[2].process(&mut line[..nz]);
                for k in 0..nz {
                    data[i + nx * (j + ny * k)] = line[k];
                }
            }
        }
    }

    /// Applies `K` to one scalar component in place.
    pub fn apply_scalar(&self, values: &mut [f64]) {
        let n = values.len();
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, &self.forward);
        for (c, m) in buf.iter_mut().zip(&self.multiplier) {
            *c *= *m;
        }
        self.transform(&mut buf, &self.inverse);
        let norm = 1.0 / n as f64;
        for (v, c) in values.iter_mut().zip(&buf) {
            *v = c.re * norm;
        }
    }

    pub fn apply(&self, field: &DisplacementField) -> DisplacementField {
        let n = field.vectors().len();
        let mut out = field.clone();
        let mut comp = vec![0.0; n];
        for a in 0..3 {
            for (c, v) in comp.iter_mut().zip(field.vectors()) {
                *c = v[a];
            }
            self.apply_scalar(&mut comp);
            for (v, c) in out.vectors_mut().iter_mut().zip(&comp) {
                v[a] = *c;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_maps_to_zero() {
        let g = GridGeometry::centered([6, 5, 4], [1.0, 2.0, 3.0]).unwrap();
        let k = SobolevPreconditioner::new(&g, 1.0, 0.1);
        let out = k.apply(&DisplacementField::zeros(g));
        assert!(out.as_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_response_is_positive_and_radially_decreasing() {
        let g = GridGeometry::centered([16, 16, 16], [1.0; 3]).unwrap();
        let k = SobolevPreconditioner::new(&g, 1.0, 0.1);
        let mut v = vec![0.0; g.len()];
        let c = g.index(8, 8, 8);
        v[c] = 1.0;
        k.apply_scalar(&mut v);
        assert!(v.iter().all(|&x| x > 0.0));
        for axis in 0..3 {
            let mut prev = f64::INFINITY;
            for d in 0..=8 {
                let mut p = [8usize, 8, 8];
                p[axis] = (8 + d) % 16;
                let val = v[g.index(p[0], p[1], p[2])];
                assert!(val < prev, "axis {axis} step {d}");
                prev = val;
            }
        }
    }

    #[test]
    fn inverts_the_discrete_operator() {
        // (−a∆ + b) K f == f with the periodic 7-point Laplacian.
        let g = GridGeometry::centered([8, 6, 5], [1.0, 1.5, 2.0]).unwrap();
        let (a, b) = (0.7, 0.3);
        let k = SobolevPreconditioner::new(&g, a, b);
        let f: Vec<f64> = (0..g.len()).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let mut kf = f.clone();
        k.apply_scalar(&mut kf);
        let [nx, ny, nz] = g.dims();
        let h = g.spacing();
        for kk in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let at = |ii: usize, jj: usize, kk2: usize| kf[g.index(ii % nx, jj % ny, kk2 % nz)];
                    let c = at(i, j, kk);
                    let lap = (at(i + 1, j, kk) + at(i + nx - 1, j, kk) - 2.0 * c) / (h[0] * h[0])
                        + (at(i, j + 1, kk) + at(i, j + ny - 1, kk) - 2.0 * c) / (h[1] * h[1])
                        + (at(i, j, kk + 1) + at(i, j, kk + nz - 1) - 2.0 * c) / (h[2] * h[2]);
                    let back = -a * lap + b * c;
                    assert!((back - f[g.index(i, j, kk)]).abs() < 1e-10);
                }
            }
        }
    }
}

//! The density action of a deformation and field inversion.

use rayon::prelude::*;

use super::{deformation_gradients, sample_scalar, sample_vector, DensityVolume, DisplacementField};
use crate::error::Result;
use crate::geom::{add, det3, norm, sub};

/// Pushes a density through the deformation whose inverse is `x + u(x)`:
/// `|Dφ⁻¹|(x) · I(φ⁻¹(x))`, clamped at zero.
pub fn warp_density(vol: &DensityVolume, u: &DisplacementField) -> Result<DensityVolume> {
    let geom = vol.geometry();
    geom.ensure_same(u.geometry(), "warp_density")?;
    let grads = deformation_gradients(u.vectors(), geom);
    let nx = geom.dims()[0];
    let mut values = vec![0.0; geom.len()];
    values
        .par_chunks_mut(nx)
        .enumerate()
        .for_each(|(row, out)| {
            let start = row * nx;
            for (di, o) in out.iter_mut().enumerate() {
                let idx = start + di;
                let x = geom.world_of_index(idx);
                let p = add(x, u.vectors()[idx]);
                let v = det3(&grads[idx]) * sample_scalar(geom, vol.values(), p);
                *o = v;
            }
        });
    Ok(DensityVolume::from_clamped(geom.clone(), values))
}

/// Numerically inverts the map `x ↦ x + u(x)`.
///
/// Returns `g` with `(x + g(x)) + u(x + g(x)) = x`, found by fixed-point
/// iteration `g ← −u(x + g)`. Converges whenever the map is a contraction
/// perturbation of the identity (`|Du| < 1`), which holds for the smooth
/// fields produced by the phantom and the motion subspace.
pub fn invert_field(u: &DisplacementField, tol_mm: f64, max_iters: usize) -> DisplacementField {
    let geom = u.geometry();
    let mut g: Vec<_> = u.vectors().iter().map(|v| [-v[0], -v[1], -v[2]]).collect();
    let nx = geom.dims()[0];
    for _ in 0..max_iters {
        let mut next = vec![[0.0; 3]; g.len()];
        next.par_chunks_mut(nx).enumerate().for_each(|(row, out)| {
            let start = row * nx;
            for (di, o) in out.iter_mut().enumerate() {
                let idx = start + di;
                let p = add(geom.world_of_index(idx), g[idx]);
                let s = sample_vector(geom, u.vectors(), p);
                *o = [-s[0], -s[1], -s[2]];
            }
        });
        let change = next
            .iter()
            .zip(&g)
            .map(|(a, b)| norm(sub(*a, *b)))
            .fold(0.0, f64::max);
        g = next;
        if change < tol_mm {
            break;
        }
    }
    DisplacementField::new(geom.clone(), g).expect("inversion of a finite field stays finite")
}

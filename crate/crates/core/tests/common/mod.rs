//! Oracles and fixtures shared by the integration and acceptance tests.
#![allow(dead_code, clippy::needless_range_loop)]

use lungtrack_core::dataset::TrainingData;
use lungtrack_core::drr::{default_geometry, render_drr, ProjectionSetup};
use lungtrack_core::lowrank::{singular_values, svt_prox, DeformationSetMatrix};
use lungtrack_core::registration::{
    fisher_rao_distance_sq, pair_energy, pair_energy_gradient_raw, PenaltyWeight, RegistrationConfig,
};
use lungtrack_core::regressor::{build_model, l1_loss, train, RegressorConfig, TrainConfig};
use lungtrack_core::volume::{jacobian_determinant, warp_density};
use lungtrack_core::{DensityVolume, DisplacementField, GridGeometry};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth strictly positive random density built from a few random Gaussians.
pub fn random_smooth_density(g: &GridGeometry, rng: &mut ChaCha8Rng) -> DensityVolume {
    let lo = g.origin();
    let d = g.dims();
    let h = g.spacing();
    let blobs: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let c = [
                lo[0] + rng.random_range(0.2..0.8) * (d[0] - 1) as f64 * h[0],
                lo[1] + rng.random_range(0.2..0.8) * (d[1] - 1) as f64 * h[1],
                lo[2] + rng.random_range(0.2..0.8) * (d[2] - 1) as f64 * h[2],
            ];
            (c, rng.random_range(1.5..3.0), rng.random_range(0.3..1.0))
        })
        .collect();
    DensityVolume::from_fn(g.clone(), |p| {
        0.2 + blobs
            .iter()
            .map(|(c, s, a)| {
                let r2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                a * (-r2 / (2.0 * s * s)).exp()
            })
            .sum::<f64>()
    })
    .unwrap()
}

/// Smooth random displacement with amplitude well below one voxel.
pub fn random_smooth_field(g: &GridGeometry, rng: &mut ChaCha8Rng, amp: f64) -> DisplacementField {
    let coef: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(0.1..0.5),
                rng.random_range(0.1..0.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    DisplacementField::from_fn(g.clone(), |p| {
        let mut v = [0.0; 3];
        for (a, c) in coef.iter().enumerate() {
            v[a] = amp * c[0] * (c[1] * p[(a + 1) % 3] + c[2] * p[(a + 2) % 3] + c[3]).sin();
        }
        v
    })
    .unwrap()
}

pub struct GradientCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares the analytic unpreconditioned gradient with central differences
/// of the energy on `components` random entries.
pub fn registration_gradient_check(seed: u64, components: usize) -> GradientCheck {
    let g = GridGeometry::centered([9, 9, 9], [1.0, 1.2, 1.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i0 = random_smooth_density(&g, &mut rng);
    let moving = random_smooth_density(&g, &mut rng);
    let u = random_smooth_field(&g, &mut rng, 0.4);
    let fw: Vec<f64> = (0..g.len()).map(|_| rng.random_range(0.05..0.5)).collect();
    let cfg = RegistrationConfig {
        penalty_weight: PenaltyWeight::Field(fw),
        ..Default::default()
    };
    let grad = pair_energy_gradient_raw(&i0, &moving, &u, &cfg).unwrap();
    let energy = |field: &DisplacementField| pair_energy(&i0, &moving, field, &cfg).unwrap().total();
    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    while checked < components {
        let idx = rng.random_range(0..g.len());
        let comp = rng.random_range(0..3);
        // The interpolant is only piecewise smooth: skip entries whose sample
        // point lies within the difference stencil of a cell face.
        let x = g.world_of_index(idx);
        let c = (x[comp] + u.vectors()[idx][comp] - g.origin()[comp]) / g.spacing()[comp];
        if (c - c.round()).abs() < 100.0 * h / g.spacing()[comp] {
            continue;
        }
        checked += 1;
        let mut flat = u.as_flat().to_vec();
        flat[3 * idx + comp] += h;
        let plus = energy(&DisplacementField::from_flat(g.clone(), &flat).unwrap());
        flat[3 * idx + comp] -= 2.0 * h;
        let minus = energy(&DisplacementField::from_flat(g.clone(), &flat).unwrap());
        let fd = (plus - minus) / (2.0 * h);
        let an = grad.as_flat()[3 * idx + comp];
        // Absolute floor at the finite-difference noise level of the energy.
        let denom = an.abs().max(fd.abs()).max(1e-7);
        max_rel = max_rel.max((an - fd).abs() / denom);
    }
    GradientCheck {
        max_rel_error: max_rel,
        checked: components,
    }
}

/// Relative change of the squared Fisher–Rao distance when both densities
/// are pushed through the same smooth invertible deformation, on an `n³`
/// grid of 1 mm voxels. Returns `(change, min Jacobian)`.
pub fn fisher_rao_invariance(n: usize, seed: u64) -> (f64, f64) {
    let g = GridGeometry::centered([n; 3], [1.0; 3]).unwrap();
    let ext = (n - 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut density = || {
        let blobs: Vec<([f64; 3], f64, f64)> = (0..5)
            .map(|_| {
                let c = [0, 1, 2].map(|_| rng.random_range(-0.15..0.15) * ext);
                (c, rng.random_range(0.07..0.12) * ext, rng.random_range(0.5..1.5))
            })
            .collect();
        DensityVolume::from_fn(g.clone(), |p| {
            blobs
                .iter()
                .map(|(c, s, a)| {
                    let r2 = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>();
                    a * (-r2 / (2.0 * s * s)).exp()
                })
                .sum()
        })
        .unwrap()
    };
    let (i0, i1) = (density(), density());
    let w = 2.0 * std::f64::consts::PI / ext;
    let ph: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let amp = 0.06 * ext;
    let u = DisplacementField::from_fn(g.clone(), |p| {
        let win = (-(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) / (2.0 * (0.25 * ext).powi(2))).exp();
        [
            amp * win * (w * p[1] + ph[0]).sin(),
            amp * win * (w * p[2] + ph[1]).sin(),
            amp * win * (w * p[0] + ph[2]).sin(),
        ]
    })
    .unwrap();
    let min_j = jacobian_determinant(&u).min();
    let before = fisher_rao_distance_sq(&i0, &i1).unwrap();
    let after = fisher_rao_distance_sq(&warp_density(&i0, &u).unwrap(), &warp_density(&i1, &u).unwrap()).unwrap();
    ((after - before).abs() / before, min_j)
}

fn random_set_matrix(rng: &mut ChaCha8Rng, rows: usize) -> DeformationSetMatrix {
    let g = GridGeometry::centered([5, 5, 4], [1.0; 3]).unwrap();
    let r: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..3 * g.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    DeformationSetMatrix::from_rows(g, r).unwrap()
}

fn to_dmatrix(x: &DeformationSetMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.rows(), x.cols(), x.data())
}

pub struct SvdCheck {
    /// Worst relative error of the singular values, over all matrices.
    pub sv_rel: f64,
    /// Worst entrywise error of the prox, relative to the largest entry.
    pub prox_rel: f64,
    /// Pairs violating `‖P(X) − P(Y)‖ ≤ ‖X − Y‖`.
    pub expansive_pairs: usize,
    pub pairs: usize,
}

/// Singular values and singular value thresholding against a full SVD, on
/// `count` random 8×300 matrices with a random threshold each.
pub fn svd_oracle(count: usize, seed: u64) -> SvdCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mats: Vec<DeformationSetMatrix> = (0..count).map(|_| random_set_matrix(&mut rng, 8)).collect();
    let (mut sv_rel, mut prox_rel) = (0.0f64, 0.0f64);
    let mut proxed = Vec::new();
    let tau = rng.random_range(2.0..8.0);
    for x in &mats {
        let svd = to_dmatrix(x).svd(true, true);
        let mut want: Vec<f64> = svd.singular_values.iter().cloned().collect();
        want.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let got = singular_values(x).unwrap();
        for (a, b) in got.iter().zip(&want) {
            sv_rel = sv_rel.max((a - b).abs() / b.abs().max(1e-300));
        }
        let mut s = svd.singular_values.clone();
        s.iter_mut().for_each(|v| *v = (*v - tau).max(0.0));
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let oracle = &u * DMatrix::from_diagonal(&s) * &vt;
        let p = svt_prox(x, tau).unwrap();
        let pm = to_dmatrix(&p);
        let scale = oracle.amax().max(1e-300);
        prox_rel = prox_rel.max((&pm - &oracle).amax() / scale);
        proxed.push(pm);
    }
    let mut bad = 0;
    let mut pairs = 0;
    for i in 0..mats.len() {
        for j in i + 1..mats.len() {
            pairs += 1;
            let dx = (to_dmatrix(&mats[i]) - to_dmatrix(&mats[j])).norm();
            let dp = (&proxed[i] - &proxed[j]).norm();
            if dp > dx * (1.0 + 1e-12) {
                bad += 1;
            }
        }
    }
    SvdCheck {
        sv_rel,
        prox_rel,
        expansive_pairs: bad,
        pairs,
    }
}

/// Central-ray integral through a unit-density 100 mm cube at half-voxel
/// stepping, and the relative change when the step is halved.
pub fn drr_cube() -> (f64, f64) {
    let g = GridGeometry::centered([60, 60, 60], [2.0; 3]).unwrap();
    let vol = DensityVolume::from_fn(g.clone(), |p| {
        if p.iter().all(|c| c.abs() < 50.0) {
            1.0
        } else {
            0.0
        }
    })
    .unwrap();
    let setup = ProjectionSetup {
        det_dims: [5, 5],
        det_spacing: [1.0, 1.0],
        ..Default::default()
    };
    let geom = default_geometry(&g, &setup).unwrap();
    let a = render_drr(&vol, &geom, 1.0).unwrap().get(2, 2);
    let b = render_drr(&vol, &geom, 0.5).unwrap().get(2, 2);
    (a, (a - b).abs() / a)
}

pub fn tiny_regressor_config() -> RegressorConfig {
    RegressorConfig {
        input_dims: [8, 8],
        num_blocks: 1,
        layers_per_block: 2,
        growth_rate: 2,
        ..Default::default()
    }
}

pub struct RegressorGradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub total: usize,
}

/// Central differences of the training-mode L1 loss for every parameter of
/// the tiny model, in double precision. Parameters whose perturbation flips
/// a ReLU, a pooling winner or the sign of a residual are skipped.
pub fn regressor_gradient_check(seed: u64) -> RegressorGradCheck {
    let cfg = tiny_regressor_config();
    let mut model = build_model::<f64>(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let batch = 4;
    let x: Vec<f64> = (0..batch * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let t: Vec<f64> = (0..batch * cfg.output_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cache = model.forward_train(&x).unwrap();
    let grad = model.backward(&cache, &t).unwrap();
    let signs = |m: &lungtrack_core::regressor::RegressorModel<f64>| -> Vec<bool> {
        let c = m.forward_train(&x).unwrap();
        c.predictions().iter().zip(&t).map(|(p, q)| p > q).collect()
    };
    let base_kinks = model.kink_pattern(&x, &t).unwrap();
    let base_signs = signs(&model);
    let h = 1e-6;
    let (mut max_rel, mut checked, mut skipped) = (0.0f64, 0, 0);
    let n = model.params().len();
    for i in 0..n {
        let orig = model.params()[i];
        let eval = |v: f64, m: &mut lungtrack_core::regressor::RegressorModel<f64>| {
            m.params_mut()[i] = v;
            let loss = l1_loss(m.forward_train(&x).unwrap().predictions(), &t).unwrap();
            let same = m.kink_pattern(&x, &t).unwrap() == base_kinks && signs(m) == base_signs;
            (loss, same)
        };
        let (lp, sp) = eval(orig + h, &mut model);
        let (lm, sm) = eval(orig - h, &mut model);
        model.params_mut()[i] = orig;
        if !(sp && sm) {
            skipped += 1;
            continue;
        }
        let fd = (lp - lm) / (2.0 * h);
        let denom = grad[i].abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max((grad[i] - fd).abs() / denom);
        checked += 1;
    }
    RegressorGradCheck {
        max_rel_error: max_rel,
        checked,
        skipped,
        total: n,
    }
}

/// Trains a small model on 10 random samples with no holdout; returns the
/// lowest epoch training loss (normalised units) and the epoch reaching it.
pub fn overfit_toy(epochs: usize) -> (f64, usize) {
    let cfg = RegressorConfig {
        input_dims: [16, 16],
        num_blocks: 2,
        layers_per_block: 2,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = TrainingData {
        dims: [16, 16],
        k: 2,
        images: (0..10 * 256).map(|_| rng.random_range(0.0..1.0)).collect(),
        targets: (0..20).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let model = build_model::<f32>(&cfg, 5).unwrap();
    let tcfg = TrainConfig {
        epochs,
        batch_size: 10,
        lr: 0.05,
        ..Default::default()
    };
    let ids: Vec<usize> = (0..10).collect();
    let out = train(model, &data, &ids, &[], &tcfg, |_| {}).unwrap();
    out.log
        .iter()
        .map(|r| (r.train_loss, r.epoch))
        .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
}

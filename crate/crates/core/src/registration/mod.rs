//! Pairwise diffeomorphic density matching.
//!
//! The energy of a pair is the Fisher–Rao distance between the reference and
//! the pulled-back moving density plus a weighted incompressibility penalty:
//!
//! ```text
//! E(u) = ∑ V (√(J·I∘(x+u)) − √I₀)²  +  ∑ V f (√J − 1)²,   J = det(I + Du)
//! ```
//!
//! The gradient is the exact gradient of this discrete sum (adjoints of the
//! trilinear sampler and of the finite-difference Jacobian), smoothed by the
//! Sobolev preconditioner before each descent step.

mod precond;

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{add, cofactor3, det3};
use crate::volume::{
    axis_derivative_adjoint, deformation_gradients, sample_scalar_with_gradient, sample_vector, DensityVolume,
    DisplacementField, GridGeometry,
};

pub use precond::SobolevPreconditioner;

/// Maximum number of step halvings per descent step.
pub const MAX_HALVINGS: usize = 20;

/// Weight `f` of the incompressibility penalty.
#[derive(Debug, Clone, PartialEq)]
pub enum PenaltyWeight {
    Constant(f64),
    /// One weight per voxel of the registration grid.
    Field(Vec<f64>),
}

impl PenaltyWeight {
    #[inline]
    fn at(&self, idx: usize) -> f64 {
        match self {
            PenaltyWeight::Constant(c) => *c,
            PenaltyWeight::Field(v) => v[idx],
        }
    }

    fn check(&self, geom: &GridGeometry) -> Result<()> {
        match self {
            PenaltyWeight::Constant(c) if *c < 0.0 || !c.is_finite() => {
                Err(Error::InvalidArgument(format!("penalty weight must be >= 0, got {c}")))
            }
            PenaltyWeight::Field(v) if v.len() != geom.len() => Err(Error::LengthMismatch {
                expected: geom.len(),
                found: v.len(),
            }),
            PenaltyWeight::Field(v) if v.iter().any(|x| *x < 0.0 || !x.is_finite()) => {
                Err(Error::InvalidArgument("penalty weight field must be finite and >= 0".into()))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn downsampled(&self, fine: &GridGeometry) -> PenaltyWeight {
        match self {
            PenaltyWeight::Constant(c) => PenaltyWeight::Constant(*c),
            PenaltyWeight::Field(v) => PenaltyWeight::Field(downsample_values(fine, v).1),
        }
    }
}

/// Weight of the nuclear-norm term used by the joint multi-phase registration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankWeight {
    /// `α = fraction · (initial data energy) / (nuclear norm after the first gradient step)`.
    Auto { fraction: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub penalty_weight: PenaltyWeight,
    pub rank_weight: RankWeight,
    pub sobolev_a: f64,
    pub sobolev_b: f64,
    pub step_size: f64,
    pub max_iters: usize,
    pub energy_rel_tol: f64,
    /// Warm-start from a registration on a half-resolution grid.
    pub multiresolution: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            penalty_weight: PenaltyWeight::Constant(0.05),
            rank_weight: RankWeight::Auto { fraction: 0.05 },
            sobolev_a: 1.0,
            sobolev_b: 0.01,
            step_size: 0.05,
            max_iters: 500,
            energy_rel_tol: 1e-6,
            multiresolution: true,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.sobolev_a > 0.0 && self.sobolev_b > 0.0) {
            return bad(format!("sobolev a, b must be > 0 ({}, {})", self.sobolev_a, self.sobolev_b));
        }
        if !(self.step_size > 0.0) {
            return bad(format!("step size must be > 0 ({})", self.step_size));
        }
        if self.max_iters < 1 {
            return bad("max_iters must be >= 1".into());
        }
        match self.rank_weight {
            RankWeight::Fixed(a) if !(a >= 0.0) => bad(format!("rank weight must be >= 0 ({a})")),
            RankWeight::Auto { fraction } if !(fraction >= 0.0) => bad(format!("rank fraction must be >= 0 ({fraction})")),
            _ => Ok(()),
        }
    }
}

/// The two terms of a pair energy at one deformation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerms {
    pub data: f64,
    pub penalty: f64,
    pub min_jacobian: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.data + self.penalty
    }

    pub fn folded(&self) -> bool {
        self.min_jacobian <= 0.0
    }
}

/// Value of the incompressibility penalty together with fold information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyValue {
    pub value: f64,
    pub min_jacobian: f64,
    /// Some voxel has a non-positive Jacobian determinant.
    pub folded: bool,
}

/// `∫(√I₀ − √I₁)² dx` by the midpoint rule.
pub fn fisher_rao_distance_sq(i0: &DensityVolume, i1: &DensityVolume) -> Result<f64> {
    i0.geometry().ensure_same(i1.geometry(), "fisher_rao_distance_sq")?;
    let v = i0.geometry().voxel_volume();
    let sum: f64 = i0
        .values()
        .iter()
        .zip(i1.values())
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum();
    Ok(sum * v)
}

/// `∫(√|Dφ⁻¹| − 1)² f dx` by the midpoint rule; folded voxels use `√max(det, 0)`.
pub fn incompressibility_penalty(u: &DisplacementField, f: &PenaltyWeight) -> Result<PenaltyValue> {
    let geom = u.geometry();
    f.check(geom)?;
    let v = geom.voxel_volume();
    let mut sum = 0.0;
    let mut min_j = f64::INFINITY;
    for (idx, m) in deformation_gradients(u.vectors(), geom).iter().enumerate() {
        let j = det3(m);
        min_j = min_j.min(j);
        let r = j.max(0.0).sqrt() - 1.0;
        sum += r * r * f.at(idx);
    }
    Ok(PenaltyValue {
        value: sum * v,
        min_jacobian: min_j,
        folded: min_j <= 0.0,
    })
}

/// Data term plus incompressibility penalty for one moving density.
pub fn pair_energy(
    i0: &DensityVolume,
    moving: &DensityVolume,
    u: &DisplacementField,
    cfg: &RegistrationConfig,
) -> Result<EnergyTerms> {
    i0.geometry().ensure_same(moving.geometry(), "pair_energy")?;
    i0.geometry().ensure_same(u.geometry(), "pair_energy")?;
    let warped = crate::volume::warp_density(moving, u)?;
    let data = fisher_rao_distance_sq(&warped, i0)?;
    let pen = incompressibility_penalty(u, &cfg.penalty_weight)?;
    Ok(EnergyTerms {
        data,
        penalty: pen.value,
        min_jacobian: pen.min_jacobian,
    })
}

/// Exact gradient of the discrete pair energy with respect to every
/// displacement component, before preconditioning.
pub fn pair_energy_gradient_raw(
    i0: &DensityVolume,
    moving: &DensityVolume,
    u: &DisplacementField,
    cfg: &RegistrationConfig,
) -> Result<DisplacementField> {
    i0.geometry().ensure_same(moving.geometry(), "pair_energy_gradient")?;
    i0.geometry().ensure_same(u.geometry(), "pair_energy_gradient")?;
    cfg.penalty_weight.check(u.geometry())?;
    Ok(raw_gradient(i0, moving, u, &cfg.penalty_weight))
}

fn raw_gradient(i0: &DensityVolume, moving: &DensityVolume, u: &DisplacementField, f: &PenaltyWeight) -> DisplacementField {
    let geom = u.geometry();
    let n = geom.len();
    let vox = geom.voxel_volume();
    let mats = deformation_gradients(u.vectors(), geom);
    let mut grad = vec![[0.0; 3]; n];
    let mut de_dj = vec![0.0; n];
    for idx in 0..n {
        let m = &mats[idx];
        let j = det3(m);
        let p = add(geom.world_of_index(idx), u.vectors()[idx]);
        let (sample, dsample) = sample_scalar_with_gradient(geom, moving.values(), p);
        let s = j * sample;
        // d/ds of (√s − √I₀)²; the clamp at s = 0 contributes nothing.
        let d_ds = if s > 0.0 { vox * (1.0 - (i0.values()[idx] / s).sqrt()) } else { 0.0 };
        let d_dsample = d_ds * j;
        grad[idx] = [d_dsample * dsample[0], d_dsample * dsample[1], d_dsample * dsample[2]];
        let mut dj = d_ds * sample;
        if j > 0.0 {
            dj += vox * f.at(idx) * (1.0 - 1.0 / j.sqrt());
        }
        de_dj[idx] = dj;
    }
    let cofs: Vec<_> = mats.iter().map(cofactor3).collect();
    let mut h = vec![0.0; n];
    let mut acc = vec![0.0; n];
    for a in 0..3 {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for b in 0..3 {
            for idx in 0..n {
                h[idx] = de_dj[idx] * cofs[idx][a][b];
            }
            axis_derivative_adjoint(geom, b, &h, &mut acc);
        }
        for (g, v) in grad.iter_mut().zip(&acc) {
            g[a] += v;
        }
    }
    DisplacementField::new(geom.clone(), grad).expect("finite gradient for finite inputs")
}

/// Sobolev-preconditioned gradient `K ∇E`.
pub fn pair_energy_gradient(
    i0: &DensityVolume,
    moving: &DensityVolume,
    u: &DisplacementField,
    cfg: &RegistrationConfig,
) -> Result<DisplacementField> {
    let raw = pair_energy_gradient_raw(i0, moving, u, cfg)?;
    let k = SobolevPreconditioner::new(u.geometry(), cfg.sobolev_a, cfg.sobolev_b);
    Ok(k.apply(&raw))
}

/// One row of the energy trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub energy: f64,
    pub data_term: f64,
    pub penalty_term: f64,
    pub min_jacobian: f64,
}

impl TraceRow {
    fn new(iter: usize, e: &EnergyTerms) -> Self {
        Self {
            iter,
            energy: e.total(),
            data_term: e.data,
            penalty_term: e.penalty,
            min_jacobian: e.min_jacobian,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub field: DisplacementField,
    pub trace: Vec<TraceRow>,
}

/// Writes `iter,energy,data_term,penalty_term,min_jacobian`.
pub fn write_trace_csv(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iter,energy,data_term,penalty_term,min_jacobian\n");
    for r in trace {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            r.iter, r.energy, r.data_term, r.penalty_term, r.min_jacobian
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// A reference/moving pair with its preconditioner, shared by the pairwise
/// and the joint rank-constrained solvers.
#[derive(Debug)]
pub(crate) struct PairProblem<'a> {
    pub reference: &'a DensityVolume,
    pub moving: &'a DensityVolume,
    pub weight: PenaltyWeight,
    precond: SobolevPreconditioner,
}

/// Outcome of one backtracking descent step.
pub(crate) enum Step {
    Accepted {
        field: DisplacementField,
        terms: EnergyTerms,
        step: f64,
    },
    /// No step length in the halving schedule decreased the energy.
    Stalled,
}

impl<'a> PairProblem<'a> {
    pub fn new(reference: &'a DensityVolume, moving: &'a DensityVolume, cfg: &RegistrationConfig) -> Result<Self> {
        cfg.validate()?;
        reference.geometry().ensure_same(moving.geometry(), "registration pair")?;
        cfg.penalty_weight.check(reference.geometry())?;
        Ok(Self {
            reference,
            moving,
            weight: cfg.penalty_weight.clone(),
            precond: SobolevPreconditioner::new(reference.geometry(), cfg.sobolev_a, cfg.sobolev_b),
        })
    }

    pub fn energy(&self, u: &DisplacementField) -> EnergyTerms {
        let warped = crate::volume::warp_density(self.moving, u).expect("geometry checked at construction");
        let data = fisher_rao_distance_sq(&warped, self.reference).expect("geometry checked at construction");
        let pen = incompressibility_penalty(u, &self.weight).expect("weight checked at construction");
        EnergyTerms {
            data,
            penalty: pen.value,
            min_jacobian: pen.min_jacobian,
        }
    }

    pub fn gradient(&self, u: &DisplacementField) -> DisplacementField {
        self.precond.apply(&raw_gradient(self.reference, self.moving, u, &self.weight))
    }

    /// `u − t·K∇E`, halving `t` until the energy does not increase and the
    /// map stays orientation preserving.
    pub fn descend(&self, u: &DisplacementField, current: &EnergyTerms, step: f64) -> Step {
        let g = self.gradient(u);
        if g.as_flat().iter().all(|&v| v == 0.0) {
            return Step::Stalled;
        }
        let mut t = step;
        for _ in 0..=MAX_HALVINGS {
            let trial = u.add_scaled(-t, &g).expect("same geometry");
            let terms = self.energy(&trial);
            if !terms.folded() && terms.total().is_finite() && terms.total() <= current.total() {
                return Step::Accepted {
                    field: trial,
                    terms,
                    step: t,
                };
            }
            t *= 0.5;
        }
        Step::Stalled
    }
}

/// Next trial step: grow back towards the configured step after a success.
#[inline]
pub(crate) fn next_step(configured: f64, accepted: f64) -> f64 {
    (2.0 * accepted).min(configured)
}

/// Gradient flow from `u ≡ 0` with backtracking.
pub fn register_pair(i0: &DensityVolume, moving: &DensityVolume, cfg: &RegistrationConfig) -> Result<Registration> {
    if cfg.multiresolution {
        let (coarse_ref, coarse_mov) = (downsample_density(i0)?, downsample_density(moving)?);
        let coarse_cfg = RegistrationConfig {
            penalty_weight: cfg.penalty_weight.downsampled(i0.geometry()),
            multiresolution: false,
            ..cfg.clone()
        };
        let coarse = register_from(&coarse_ref, &coarse_mov, &coarse_cfg, None)?;
        let init = upsample_field(&coarse.field, i0.geometry());
        let problem = PairProblem::new(i0, moving, cfg)?;
        if problem.energy(&init).folded() {
            return register_from(i0, moving, cfg, None);
        }
        return register_from(i0, moving, cfg, Some(init));
    }
    register_from(i0, moving, cfg, None)
}

/// Gradient flow from a given initial field (single resolution).
pub fn register_pair_from(
    i0: &DensityVolume,
    moving: &DensityVolume,
    cfg: &RegistrationConfig,
    init: &DisplacementField,
) -> Result<Registration> {
    i0.geometry().ensure_same(init.geometry(), "register_pair_from")?;
    register_from(i0, moving, cfg, Some(init.clone()))
}

fn register_from(
    i0: &DensityVolume,
    moving: &DensityVolume,
    cfg: &RegistrationConfig,
    init: Option<DisplacementField>,
) -> Result<Registration> {
    i0.geometry().ensure_same(moving.geometry(), "register_pair")?;
    let problem = PairProblem::new(i0, moving, cfg)?;
    let mut u = init.unwrap_or_else(|| DisplacementField::zeros(i0.geometry().clone()));
    let mut terms = problem.energy(&u);
    if !terms.total().is_finite() {
        return Err(Error::NonFiniteEnergy { iter: 0 });
    }
    let mut trace = vec![TraceRow::new(0, &terms)];
    let mut step = cfg.step_size;
    for iter in 1..=cfg.max_iters {
        if terms.total() == 0.0 {
            break;
        }
        match problem.descend(&u, &terms, step) {
            Step::Accepted { field, terms: next, step: used } => {
                if !next.total().is_finite() {
                    return Err(Error::NonFiniteEnergy { iter });
                }
                let rel = (terms.total() - next.total()) / terms.total();
                u = field;
                terms = next;
                trace.push(TraceRow::new(iter, &terms));
                step = next_step(cfg.step_size, used);
                if rel < cfg.energy_rel_tol {
                    break;
                }
            }
            Step::Stalled => break,
        }
    }
    Ok(Registration { field: u, trace })
}

/// Block-averages values onto a grid with half the resolution (odd trailing
/// planes are dropped). Returns the coarse geometry and values.
fn downsample_values(fine: &GridGeometry, values: &[f64]) -> (GridGeometry, Vec<f64>) {
    let d = fine.dims();
    let h = fine.spacing();
    let o = fine.origin();
    let cd = [(d[0] / 2).max(2), (d[1] / 2).max(2), (d[2] / 2).max(2)];
    let coarse = GridGeometry::new(
        cd,
        [2.0 * h[0], 2.0 * h[1], 2.0 * h[2]],
        [o[0] + 0.5 * h[0], o[1] + 0.5 * h[1], o[2] + 0.5 * h[2]],
    )
    .expect("coarse grid is valid");
    let mut out = vec![0.0; coarse.len()];
    for k in 0..cd[2] {
        for j in 0..cd[1] {
            for i in 0..cd[0] {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dk in 0..2 {
                    for dj in 0..2 {
                        for di in 0..2 {
                            let (fi, fj, fk) = (2 * i + di, 2 * j + dj, 2 * k + dk);
                            if fi < d[0] && fj < d[1] && fk < d[2] {
                                acc += values[fine.index(fi, fj, fk)];
                                cnt += 1.0;
                            }
                        }
                    }
                }
                out[coarse.index(i, j, k)] = acc / cnt;
            }
        }
    }
    (coarse, out)
}

pub(crate) fn downsample_density(vol: &DensityVolume) -> Result<DensityVolume> {
    let (g, v) = downsample_values(vol.geometry(), vol.values());
    DensityVolume::new(g, v)
}

pub(crate) fn upsample_field(coarse: &DisplacementField, fine: &GridGeometry) -> DisplacementField {
    let vectors = (0..fine.len())
        .map(|idx| sample_vector(coarse.geometry(), coarse.vectors(), fine.world_of_index(idx)))
        .collect();
    DisplacementField::new(fine.clone(), vectors).expect("finite upsampled field")
}

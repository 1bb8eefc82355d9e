//! Deformation set matrices, the nuclear norm and its proximal operator, and
//! joint registration of a phase series under a nuclear-norm penalty.
//!
//! All spectral quantities go through the small Gram matrix `X·Xᵀ`: the
//! number of rows is the number of phases, the number of columns three times
//! the voxel count.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dot, symmetric_eigen};
use crate::registration::{
    downsample_density, next_step, upsample_field, EnergyTerms, PairProblem, RankWeight, RegistrationConfig, Step,
};
use crate::volume::{DensityVolume, DisplacementField, GridGeometry};

/// One vectorised displacement field per row, components interleaved as in
/// [`DisplacementField::as_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationSetMatrix {
    geometry: GridGeometry,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub fn build_matrix(fields: &[DisplacementField]) -> Result<DeformationSetMatrix> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("deformation set needs at least one field".into()))?;
    let geometry = first.geometry().clone();
    let cols = 3 * geometry.len();
    let mut data = Vec::with_capacity(fields.len() * cols);
    for f in fields {
        geometry.ensure_same(f.geometry(), "build_matrix")?;
        data.extend_from_slice(f.as_flat());
    }
    Ok(DeformationSetMatrix {
        geometry,
        rows: fields.len(),
        cols,
        data,
    })
}

impl DeformationSetMatrix {
    /// Matrix with explicit row data; `cols` must be three times the voxel count.
    pub fn from_rows(geometry: GridGeometry, rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = 3 * geometry.len();
        if rows.is_empty() {
            return Err(Error::InvalidArgument("deformation set needs at least one row".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in &rows {
            if r.len() != cols {
                return Err(Error::LengthMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            geometry,
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_field(&self, i: usize) -> DisplacementField {
        DisplacementField::from_flat(self.geometry.clone(), self.row(i)).expect("rows hold finite fields")
    }

    pub fn to_fields(&self) -> Vec<DisplacementField> {
        (0..self.rows).map(|i| self.row_field(i)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// `X·Xᵀ`, row-major.
    fn gram(&self) -> Vec<f64> {
        let n = self.rows;
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
        let vals: Vec<f64> = pairs.par_iter().map(|&(i, j)| dot(self.row(i), self.row(j))).collect();
        let mut g = vec![0.0; n * n];
        for (&(i, j), v) in pairs.iter().zip(vals) {
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
        g
    }

    /// `M·X` for a small row-major `rows×rows` matrix `M`.
    fn left_multiply(&self, m: &[f64]) -> Self {
        let n = self.rows;
        let cols = self.cols;
        let mut data = vec![0.0; n * cols];
        data.par_chunks_mut(cols).enumerate().for_each(|(i, out)| {
            for k in 0..n {
                let c = m[i * n + k];
                if c != 0.0 {
                    for (o, x) in out.iter_mut().zip(self.row(k)) {
                        *o += c * x;
                    }
                }
            }
        });
        Self {
            geometry: self.geometry.clone(),
            rows: n,
            cols,
            data,
        }
    }
}

/// Singular values, descending, from the eigenvalues of `X·Xᵀ`.
pub fn singular_values(x: &DeformationSetMatrix) -> Result<Vec<f64>> {
    x.check_finite()?;
    let (vals, _) = symmetric_eigen(&x.gram(), x.rows);
    Ok(vals.into_iter().map(|l| l.max(0.0).sqrt()).collect())
}

pub fn nuclear_norm(x: &DeformationSetMatrix) -> Result<f64> {
    Ok(singular_values(x)?.iter().sum())
}

/// Proximal operator of `τ‖·‖*`: singular values soft-thresholded by `τ`.
pub fn svt_prox(x: &DeformationSetMatrix, tau: f64) -> Result<DeformationSetMatrix> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {tau}")));
    }
    x.check_finite()?;
    let n = x.rows;
    let (vals, u) = symmetric_eigen(&x.gram(), n);
    let factor: Vec<f64> = vals
        .iter()
        .map(|&l| {
            let s = l.max(0.0).sqrt();
            if s > 0.0 {
                (s - tau).max(0.0) / s
            } else {
                0.0
            }
        })
        .collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = (0..n).map(|k| u[i * n + k] * factor[k] * u[j * n + k]).sum();
        }
    }
    Ok(x.left_multiply(&m))
}

/// One row of the outer-iteration trace.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankTraceRow {
    pub iter: usize,
    pub total: f64,
    pub data: f64,
    pub penalty: f64,
    pub nuclear: f64,
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RankConstrainedRegistration {
    /// One field per non-reference phase, in phase order.
    pub fields: Vec<DisplacementField>,
    /// The rank weight actually used (resolved when automatic).
    pub alpha: f64,
    pub trace: Vec<LowRankTraceRow>,
}

/// Writes `iter,total,data,penalty,nuclear,sigma1..`.
pub fn write_lowrank_trace_csv(trace: &[LowRankTraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = trace.first().map_or(0, |r| r.singular_values.len());
    let mut out = String::from("iter,total,data,penalty,nuclear");
    for i in 1..=n {
        out.push_str(&format!(",sigma{i}"));
    }
    out.push('\n');
    for r in trace {
        out.push_str(&format!("{},{:e},{:e},{:e},{:e}", r.iter, r.total, r.data, r.penalty, r.nuclear));
        for s in &r.singular_values {
            out.push_str(&format!(",{s:e}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn objective(terms: &[EnergyTerms], alpha: f64, nuclear: f64) -> f64 {
    terms.iter().map(|t| t.total()).sum::<f64>() + alpha * nuclear
}

fn trace_row(iter: usize, terms: &[EnergyTerms], alpha: f64, sv: Vec<f64>) -> LowRankTraceRow {
    let nuclear: f64 = sv.iter().sum();
    LowRankTraceRow {
        iter,
        total: objective(terms, alpha, nuclear),
        data: terms.iter().map(|t| t.data).sum(),
        penalty: terms.iter().map(|t| t.penalty).sum(),
        nuclear,
        singular_values: sv,
    }
}

/// Joint registration of every phase onto `volumes[ref_index]` by proximal
/// gradient descent on `∑ E_i(u_i) + α‖X‖*`.
///
/// Each outer iteration takes one backtracked, preconditioned gradient step
/// per pair and then soft-thresholds the stacked fields with `τ = α·t̄`
/// (`t̄` the mean accepted step). The threshold is halved until the total
/// objective does not increase; `τ = 0` is the last candidate. Pairs whose
/// own relative decrease falls below the tolerance stop taking gradient
/// steps, so with `α = 0` every field equals the output of
/// [`crate::registration::register_pair`] with the same budget. With
/// multiresolution on, the same loop first runs on the half-resolution series
/// and its upsampled fields seed the fine level.
pub fn register_rank_constrained(
    volumes: &[DensityVolume],
    ref_index: usize,
    cfg: &RegistrationConfig,
) -> Result<RankConstrainedRegistration> {
    cfg.validate()?;
    if volumes.len() < 2 {
        return Err(Error::InvalidArgument("need at least two volumes".into()));
    }
    if ref_index >= volumes.len() {
        return Err(Error::InvalidArgument(format!(
            "reference index {ref_index} out of range for {} volumes",
            volumes.len()
        )));
    }
    if cfg.multiresolution {
        let coarse_volumes = volumes.iter().map(downsample_density).collect::<Result<Vec<_>>>()?;
        let coarse_cfg = RegistrationConfig {
            penalty_weight: cfg.penalty_weight.downsampled(volumes[ref_index].geometry()),
            multiresolution: false,
            ..cfg.clone()
        };
        let coarse = register_rank_constrained(&coarse_volumes, ref_index, &coarse_cfg)?;
        let fine = volumes[ref_index].geometry();
        let inits = coarse.fields.iter().map(|f| upsample_field(f, fine)).collect();
        return rank_loop(volumes, ref_index, cfg, Some(inits));
    }
    rank_loop(volumes, ref_index, cfg, None)
}

fn rank_loop(
    volumes: &[DensityVolume],
    ref_index: usize,
    cfg: &RegistrationConfig,
    inits: Option<Vec<DisplacementField>>,
) -> Result<RankConstrainedRegistration> {
    let reference = &volumes[ref_index];
    let geom = reference.geometry().clone();
    let problems: Vec<PairProblem> = volumes
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ref_index)
        .map(|(_, v)| PairProblem::new(reference, v, cfg))
        .collect::<Result<_>>()?;
    let n = problems.len();
    let zero = DisplacementField::zeros(geom.clone());
    // A warm start that folds is replaced by the identity, as in the pairwise flow.
    let mut fields: Vec<DisplacementField> = match inits {
        Some(inits) => problems
            .iter()
            .zip(inits)
            .map(|(p, f)| if p.energy(&f).folded() { zero.clone() } else { f })
            .collect(),
        None => vec![zero.clone(); n],
    };
    let mut terms: Vec<EnergyTerms> = problems.iter().zip(&fields).map(|(p, f)| p.energy(f)).collect();
    if terms.iter().any(|t| !t.total().is_finite()) {
        return Err(Error::NonFiniteEnergy { iter: 0 });
    }
    // Measured on the unregistered pairs, so a warm start does not weaken α.
    let initial_data: f64 = problems.iter().map(|p| p.energy(&zero).data).sum();
    let mut alpha = match cfg.rank_weight {
        RankWeight::Fixed(a) => Some(a),
        RankWeight::Auto { fraction: 0.0 } => Some(0.0),
        RankWeight::Auto { .. } => None,
    };
    let mut steps = vec![cfg.step_size; n];
    let mut active = vec![true; n];
    for (a, t) in active.iter_mut().zip(&terms) {
        if t.total() == 0.0 {
            *a = false;
        }
    }
    let sv0 = singular_values(&build_matrix(&fields)?)?;
    let mut nuclear = sv0.iter().sum();
    let mut trace = vec![trace_row(0, &terms, alpha.unwrap_or(0.0), sv0)];

    for iter in 1..=cfg.max_iters {
        if !active.iter().any(|&a| a) {
            break;
        }
        // Gradient substep on every active pair.
        let mut trial_fields = fields.clone();
        let mut trial_terms = terms.clone();
        let mut used = Vec::new();
        let mut rel = vec![f64::INFINITY; n];
        for i in 0..n {
            if !active[i] {
                continue;
            }
            match problems[i].descend(&fields[i], &terms[i], steps[i]) {
                Step::Accepted { field, terms: t, step } => {
                    if !t.total().is_finite() {
                        return Err(Error::NonFiniteEnergy { iter });
                    }
                    rel[i] = (terms[i].total() - t.total()) / terms[i].total();
                    trial_fields[i] = field;
                    trial_terms[i] = t;
                    used.push(step);
                    steps[i] = next_step(cfg.step_size, step);
                }
                Step::Stalled => {
                    active[i] = false;
                }
            }
        }
        let y = build_matrix(&trial_fields)?;
        let a = match alpha {
            Some(a) => a,
            None => {
                let RankWeight::Auto { fraction } = cfg.rank_weight else { unreachable!() };
                let nn = nuclear_norm(&y)?;
                let a = if nn > 0.0 { fraction * initial_data / nn } else { 0.0 };
                alpha = Some(a);
                a
            }
        };
        let previous = objective(&terms, a, nuclear);
        let t_bar = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
        // The preconditioner amplifies smooth components by up to 1/b; start the
        // threshold at that gain and let the halving search back it off.
        let mut tau = a * t_bar / cfg.sobolev_b;
        let mut accepted = None;
        if tau > 0.0 {
            for _ in 0..=crate::registration::MAX_HALVINGS {
                let x = svt_prox(&y, tau)?;
                let cand_fields = x.to_fields();
                let cand_terms: Vec<EnergyTerms> =
                    problems.iter().zip(&cand_fields).map(|(p, f)| p.energy(f)).collect();
                let nn = nuclear_norm(&x)?;
                let obj = objective(&cand_terms, a, nn);
                if obj.is_finite() && obj <= previous && !cand_terms.iter().any(|t| t.folded()) {
                    accepted = Some((cand_fields, cand_terms, nn));
                    break;
                }
                tau *= 0.5;
            }
        }
        if accepted.is_none() {
            let nn = if a > 0.0 { nuclear_norm(&y)? } else { 0.0 };
            let obj = objective(&trial_terms, a, nn);
            if obj <= previous || a == 0.0 {
                accepted = Some((trial_fields, trial_terms, nn));
            }
        }
        let Some((f, t, nn)) = accepted else { break };
        let new_obj = objective(&t, a, nn);
        fields = f;
        terms = t;
        nuclear = nn;
        trace.push(trace_row(iter, &terms, a, singular_values(&build_matrix(&fields)?)?));
        for i in 0..n {
            if rel[i] < cfg.energy_rel_tol || terms[i].total() == 0.0 {
                active[i] = false;
            }
        }
        if a > 0.0 && previous > 0.0 && (previous - new_obj) / previous < cfg.energy_rel_tol {
            break;
        }
    }
    Ok(RankConstrainedRegistration {
        fields,
        alpha: alpha.unwrap_or(0.0),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> GridGeometry {
        GridGeometry::centered([4, 5, 5], [1.0; 3]).unwrap()
    }

    fn orthogonal_rows(a: f64, b: f64) -> DeformationSetMatrix {
        let g = geom();
        let cols = 3 * g.len();
        let mut r1 = vec![0.0; cols];
        let mut r2 = vec![0.0; cols];
        r1[0] = a;
        r2[1] = b;
        DeformationSetMatrix::from_rows(g, vec![r1, r2]).unwrap()
    }

    #[test]
    fn one_zero_field() {
        let x = build_matrix(&[DisplacementField::zeros(geom())]).unwrap();
        assert_eq!((x.rows(), x.cols()), (1, 300));
        assert!(x.data().iter().all(|&v| v == 0.0));
        assert_eq!(nuclear_norm(&x).unwrap(), 0.0);
    }

    #[test]
    fn rows_round_trip() {
        let g = geom();
        let f1 = DisplacementField::from_fn(g.clone(), |p| [p[0], 2.0, -p[2]]).unwrap();
        let f2 = DisplacementField::from_fn(g.clone(), |p| [0.5, p[1] * p[0], 1.0]).unwrap();
        let x = build_matrix(&[f1.clone(), f2.clone()]).unwrap();
        assert_eq!(x.row_field(0), f1);
        assert_eq!(x.row_field(1), f2);
        assert!(build_matrix(&[]).is_err());
        let other = DisplacementField::zeros(GridGeometry::centered([4, 4, 4], [1.0; 3]).unwrap());
        assert!(build_matrix(&[f1, other]).is_err());
    }

    #[test]
    fn orthogonal_rows_give_their_norms() {
        let x = orthogonal_rows(3.0, 4.0);
        let sv = singular_values(&x).unwrap();
        assert!((sv[0] - 4.0).abs() < 1e-12 && (sv[1] - 3.0).abs() < 1e-12);
        assert!((nuclear_norm(&x).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_matrix() {
        let g = geom();
        let cols = 3 * g.len();
        let b: Vec<f64> = (0..cols).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect();
        let a = [1.0, -2.0, 0.5];
        let rows = a.iter().map(|ai| b.iter().map(|bj| ai * bj).collect()).collect();
        let x = DeformationSetMatrix::from_rows(g, rows).unwrap();
        let sv = singular_values(&x).unwrap();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((sv[0] - na * nb).abs() < 1e-10);
        assert!(sv[1] < 1e-6 && sv[2] < 1e-6);
    }

    #[test]
    fn prox_edge_cases() {
        let x = orthogonal_rows(5.0, 1.0);
        let same = svt_prox(&x, 0.0).unwrap();
        for (a, b) in same.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = svt_prox(&x, 5.0).unwrap();
        assert!(zero.data().iter().all(|v| v.abs() < 1e-12));
        let shrunk = svt_prox(&x, 2.0).unwrap();
        assert!((shrunk.row(0)[0] - 3.0).abs() < 1e-12);
        assert!(shrunk.row(1).iter().all(|v| v.abs() < 1e-12));
        assert!(svt_prox(&x, -1.0).is_err());
    }

    #[test]
    fn non_finite_entries_are_rejected() {
        let g = geom();
        let mut r = vec![0.0; 3 * g.len()];
        r[5] = f64::NAN;
        let x = DeformationSetMatrix::from_rows(g, vec![r]).unwrap();
        assert!(matches!(singular_values(&x), Err(Error::NonFinite { index: 5 })));
    }
}

//! Geometric validation of recovered deformations.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::drr::{write_pgm, ProjectionImage};
use crate::error::{Error, Result};
use crate::geom::{norm, sub};
use crate::regressor::{Real, RegressorModel};
use crate::subspace::{reconstruct, MotionSubspace, WeightVector};
use crate::volume::{write_volume, DensityVolume, DisplacementField, ScalarField};

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Per-voxel `‖d_true − d_pred‖₂` in mm.
    pub map: ScalarField,
    pub mean_error_mm: f64,
    pub max_error_mm: f64,
}

impl ErrorReport {
    /// Mean and max over the voxels where `mask` is true; zeros for an empty
    /// mask.
    pub fn masked(&self, mask: &[bool]) -> Result<(f64, f64)> {
        let v = self.map.values();
        if mask.len() != v.len() {
            return Err(Error::LengthMismatch {
                expected: v.len(),
                found: mask.len(),
            });
        }
        let (mut s, mut m, mut n) = (0.0, 0.0f64, 0usize);
        for (&e, _) in v.iter().zip(mask).filter(|(_, &k)| k) {
            s += e;
            m = m.max(e);
            n += 1;
        }
        Ok(if n == 0 { (0.0, 0.0) } else { (s / n as f64, m) })
    }
}

pub fn deformation_distance_error(d_true: &DisplacementField, d_pred: &DisplacementField) -> Result<ErrorReport> {
    d_true.geometry().ensure_same(d_pred.geometry(), "deformation_distance_error")?;
    let values: Vec<f64> = d_true
        .vectors()
        .par_iter()
        .zip(d_pred.vectors())
        .map(|(&a, &b)| norm(sub(a, b)))
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let max = values.iter().fold(0.0f64, |m, &v| m.max(v));
    Ok(ErrorReport {
        map: ScalarField::new(d_true.geometry().clone(), values)?,
        mean_error_mm: mean,
        max_error_mm: max,
    })
}

/// Voxels whose reference density exceeds `threshold`.
pub fn density_mask(vol: &DensityVolume, threshold: f64) -> Vec<bool> {
    vol.values().iter().map(|&v| v > threshold).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseErrorRow {
    pub phase: usize,
    pub avg_mm: f64,
    pub max_mm: f64,
    pub body_avg_mm: f64,
    pub body_max_mm: f64,
}

pub fn phase_error_row(phase: usize, report: &ErrorReport, body: &[bool]) -> Result<PhaseErrorRow> {
    let (body_avg_mm, body_max_mm) = report.masked(body)?;
    Ok(PhaseErrorRow {
        phase,
        avg_mm: report.mean_error_mm,
        max_mm: report.max_error_mm,
        body_avg_mm,
        body_max_mm,
    })
}

pub fn write_per_phase_csv(rows: &[PhaseErrorRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("phase,avg_mm,max_mm,body_avg_mm,body_max_mm\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.phase, r.avg_mm, r.max_mm, r.body_avg_mm, r.body_max_mm
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_per_phase_csv(path: impl AsRef<Path>) -> Result<Vec<PhaseErrorRow>> {
    let path = path.as_ref();
    crate::util::read_csv_rows(path)?
        .into_iter()
        .map(|(id, v)| {
            let phase = id.parse().ok().filter(|_| v.len() == 4).ok_or_else(|| Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("bad row for phase `{id}`"),
            })?;
            Ok(PhaseErrorRow {
                phase,
                avg_mm: v[0],
                max_mm: v[1],
                body_avg_mm: v[2],
                body_max_mm: v[3],
            })
        })
        .collect()
}

/// Error map as an RVF1 density volume plus a lateral maximum-intensity PGM.
pub fn write_error_map(report: &ErrorReport, dir: impl AsRef<Path>, phase: usize) -> Result<()> {
    let dir = dir.as_ref();
    let vol = DensityVolume::new(report.map.geometry().clone(), report.map.values().to_vec())?;
    write_volume(&vol, dir.join(format!("error_map_phase{phase}.rvf")))?;
    let [nx, ny, nz] = vol.geometry().dims();
    let mut mip = vec![0.0f64; nz * ny];
    for k in 0..nz {
        for j in 0..ny {
            mip[j * nz + k] = (0..nx).map(|i| vol.get(i, j, k)).fold(0.0, f64::max);
        }
    }
    write_pgm(
        &ProjectionImage::new([nz, ny], mip)?,
        dir.join(format!("error_map_phase{phase}.pgm")),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecoveryRow {
    pub sample: usize,
    pub true_weights: WeightVector,
    pub inferred_weights: WeightVector,
    /// Inferred-weight reconstruction against the true-weight reconstruction.
    pub model_mean_mm: f64,
    pub model_max_mm: f64,
    /// Inferred-weight reconstruction against a ground-truth field, when one
    /// is supplied.
    pub truth_mean_mm: Option<f64>,
    pub truth_max_mm: Option<f64>,
}

/// Infers weights for every image (laid end to end), reconstructs both the
/// inferred and the true-weight fields, and compares them; when `truth` is
/// given, the inferred field is also compared with it.
pub fn evaluate_weight_recovery<T: Real>(
    sub: &MotionSubspace,
    model: &RegressorModel<T>,
    images: &[T],
    true_weights: &[WeightVector],
    truth: Option<&[DisplacementField]>,
) -> Result<Vec<WeightRecoveryRow>> {
    let inferred = model.infer_batch(images)?;
    if inferred.len() != true_weights.len() {
        return Err(Error::LengthMismatch {
            expected: true_weights.len(),
            found: inferred.len(),
        });
    }
    if let Some(t) = truth {
        if t.len() != true_weights.len() {
            return Err(Error::LengthMismatch {
                expected: true_weights.len(),
                found: t.len(),
            });
        }
    }
    inferred
        .into_iter()
        .zip(true_weights)
        .enumerate()
        .map(|(i, (w, wt))| {
            let pred = reconstruct(sub, &w)?;
            let model_rep = deformation_distance_error(&reconstruct(sub, wt)?, &pred)?;
            let truth_rep = truth.map(|t| deformation_distance_error(&t[i], &pred)).transpose()?;
            Ok(WeightRecoveryRow {
                sample: i,
                true_weights: wt.clone(),
                inferred_weights: w,
                model_mean_mm: model_rep.mean_error_mm,
                model_max_mm: model_rep.max_error_mm,
                truth_mean_mm: truth_rep.as_ref().map(|r| r.mean_error_mm),
                truth_max_mm: truth_rep.as_ref().map(|r| r.max_error_mm),
            })
        })
        .collect()
}

pub fn write_weight_recovery_csv(rows: &[WeightRecoveryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let k = rows.first().map_or(0, |r| r.true_weights.len());
    let mut s = String::from("sample");
    for d in 1..=k {
        let _ = write!(s, ",true_w{d}");
    }
    for d in 1..=k {
        let _ = write!(s, ",inferred_w{d}");
    }
    s.push_str(",model_mean_mm,model_max_mm,truth_mean_mm,truth_max_mm\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in rows {
        let _ = write!(s, "{}", r.sample);
        for v in r.true_weights.iter().chain(&r.inferred_weights) {
            let _ = write!(s, ",{v:.6}");
        }
        let _ = writeln!(
            s,
            ",{:.6},{:.6},{},{}",
            r.model_mean_mm,
            r.model_max_mm,
            opt(r.truth_mean_mm),
            opt(r.truth_max_mm)
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

//! Affine motion subspace: centred PCA of registered fields, projection,
//! reconstruction, and the weight grids used to synthesise training data.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{dot, symmetric_eigen};
use crate::volume::{read_field, write_field_as, DisplacementField, Dtype, GridGeometry};

/// Coordinates in the component basis (Frobenius inner products, mm).
pub type WeightVector = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSubspace {
    pub mean: DisplacementField,
    /// Orthonormal under the Frobenius inner product; a degenerate direction
    /// is stored as a zero field and flagged.
    pub components: Vec<DisplacementField>,
    /// Eigenvalues of the centred scatter matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// Trace of the centred scatter matrix.
    pub total_variance: f64,
    pub num_source_fields: usize,
    pub degenerate: Vec<bool>,
}

impl MotionSubspace {
    pub fn geometry(&self) -> &GridGeometry {
        self.mean.geometry()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// The leading `k` components (all of them if fewer are stored).
    pub fn truncated(&self, k: usize) -> MotionSubspace {
        let k = k.min(self.k());
        MotionSubspace {
            mean: self.mean.clone(),
            components: self.components[..k].to_vec(),
            eigenvalues: self.eigenvalues[..k].to_vec(),
            total_variance: self.total_variance,
            num_source_fields: self.num_source_fields,
            degenerate: self.degenerate[..k].to_vec(),
        }
    }

    /// Cumulative explained-variance fractions, one per stored component.
    pub fn explained_variance(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.eigenvalues
            .iter()
            .map(|l| {
                acc += l;
                if self.total_variance > 0.0 {
                    (acc / self.total_variance).min(1.0)
                } else {
                    1.0
                }
            })
            .collect()
    }
}

pub fn fit_pca(fields: &[DisplacementField], k: usize) -> Result<MotionSubspace> {
    if k < 1 {
        return Err(Error::InvalidArgument("number of components must be >= 1".into()));
    }
    if fields.len() < 2 {
        return Err(Error::InvalidArgument("PCA needs at least two fields".into()));
    }
    let geom = fields[0].geometry().clone();
    for f in fields {
        geom.ensure_same(f.geometry(), "fit_pca")?;
    }
    let n = fields.len();
    let cols = 3 * geom.len();
    let mut mean = vec![0.0; cols];
    for f in fields {
        for (m, v) in mean.iter_mut().zip(f.as_flat()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| f.as_flat().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let d = dot(&centred[i], &centred[j]);
            gram[i * n + j] = d;
            gram[j * n + i] = d;
        }
    }
    let total_variance: f64 = (0..n).map(|i| gram[i * n + i]).sum();
    let (vals, vecs) = symmetric_eigen(&gram, n);
    let k = k.min(n - 1);
    // Rounding noise of the centring step sits near ε²·∑‖fᵢ‖².
    let scale: f64 = fields.iter().map(|f| dot(f.as_flat(), f.as_flat())).sum();
    let tiny = (1e-12 * total_variance).max(1e-24 * scale).max(f64::MIN_POSITIVE);
    let mut components = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut degenerate = Vec::with_capacity(k);
    for c in 0..k {
        let lambda = vals[c].max(0.0);
        if lambda <= tiny {
            components.push(DisplacementField::zeros(geom.clone()));
            eigenvalues.push(0.0);
            degenerate.push(true);
            continue;
        }
        let mut comp = vec![0.0; cols];
        for (i, row) in centred.iter().enumerate() {
            let a = vecs[i * n + c];
            for (o, x) in comp.iter_mut().zip(row) {
                *o += a * x;
            }
        }
        let norm = dot(&comp, &comp).sqrt();
        comp.iter_mut().for_each(|v| *v /= norm);
        let (imax, _) = comp
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
        if comp[imax] < 0.0 {
            comp.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(DisplacementField::from_flat(geom.clone(), &comp)?);
        eigenvalues.push(lambda);
        degenerate.push(false);
    }
    Ok(MotionSubspace {
        mean: DisplacementField::from_flat(geom, &mean)?,
        components,
        eigenvalues,
        total_variance,
        num_source_fields: n,
        degenerate,
    })
}

/// `mean + ∑ wᵢ·componentᵢ`.
pub fn reconstruct(sub: &MotionSubspace, w: &[f64]) -> Result<DisplacementField> {
    if w.len() != sub.k() {
        return Err(Error::LengthMismatch {
            expected: sub.k(),
            found: w.len(),
        });
    }
    let mut flat = sub.mean.as_flat().to_vec();
    for (wi, c) in w.iter().zip(&sub.components) {
        if *wi != 0.0 {
            for (o, x) in flat.iter_mut().zip(c.as_flat()) {
                *o += wi * x;
            }
        }
    }
    DisplacementField::from_flat(sub.geometry().clone(), &flat)
}

/// `wᵢ = (field − mean)·componentᵢ`.
pub fn project(sub: &MotionSubspace, field: &DisplacementField) -> Result<WeightVector> {
    sub.geometry().ensure_same(field.geometry(), "project")?;
    let centred: Vec<f64> = field.as_flat().iter().zip(sub.mean.as_flat()).map(|(a, b)| a - b).collect();
    Ok(sub.components.iter().map(|c| dot(&centred, c.as_flat())).collect())
}

/// Dense `n1×n2` grid over `[−L1, L1]×[−L2, L2]`, `Lj = scale_j·max|w_j|`
/// over the source weights; dimension 1 varies slowest. Further dimensions
/// are zero.
pub fn sample_weight_grid(
    sub: &MotionSubspace,
    n1: usize,
    n2: usize,
    scale1: f64,
    scale2: f64,
    source_weights: &[WeightVector],
) -> Result<Vec<WeightVector>> {
    if source_weights.is_empty() {
        return Err(Error::InvalidArgument("weight grid needs source weights".into()));
    }
    if n1 < 2 || n2 < 2 {
        return Err(Error::InvalidArgument(format!("grid sizes must be >= 2, got {n1}x{n2}")));
    }
    if !(scale1 > 0.0 && scale2 > 0.0) {
        return Err(Error::InvalidArgument("grid scales must be > 0".into()));
    }
    let k = sub.k();
    if k < 2 {
        return Err(Error::InvalidArgument("weight grid needs at least two components".into()));
    }
    let max_abs = |d: usize| source_weights.iter().map(|w| w.get(d).copied().unwrap_or(0.0).abs()).fold(0.0, f64::max);
    let l1 = scale1 * max_abs(0);
    let l2 = scale2 * max_abs(1);
    Ok(weight_grid(n1, n2, l1, l2, k))
}

/// The grid itself, given half-widths.
pub fn weight_grid(n1: usize, n2: usize, l1: f64, l2: f64, k: usize) -> Vec<WeightVector> {
    let lin = |i: usize, n: usize, l: f64| l * (2.0 * i as f64 / (n - 1) as f64 - 1.0);
    let mut out = Vec::with_capacity(n1 * n2);
    for i in 0..n1 {
        for j in 0..n2 {
            let mut w = vec![0.0; k.max(2)];
            w[0] = lin(i, n1, l1);
            w[1] = lin(j, n2, l2);
            out.push(w);
        }
    }
    out
}

const MANIFEST: &str = "subspace.txt";

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

/// Writes `mean.rvf`, `component_<i>.rvf` and a `subspace.txt` manifest.
pub fn save_subspace(sub: &MotionSubspace, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_field_as(&sub.mean, dir.join("mean.rvf"), Dtype::F64)?;
    for (i, c) in sub.components.iter().enumerate() {
        write_field_as(c, dir.join(format!("component_{}.rvf", i + 1)), Dtype::F64)?;
    }
    let mut text = String::new();
    writeln!(text, "components={}", sub.k()).ok();
    writeln!(text, "eigenvalues={}", join(&sub.eigenvalues)).ok();
    writeln!(text, "total_variance={:?}", sub.total_variance).ok();
    writeln!(text, "num_source_fields={}", sub.num_source_fields).ok();
    let flags: Vec<&str> = sub.degenerate.iter().map(|d| if *d { "1" } else { "0" }).collect();
    writeln!(text, "degenerate={}", flags.join(" ")).ok();
    writeln!(text, "explained_variance={}", join(&sub.explained_variance())).ok();
    let path = dir.join(MANIFEST);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_subspace(dir: impl AsRef<Path>) -> Result<MotionSubspace> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv = crate::util::parse_key_values(&text, &path)?;
    let get = |k: &str| crate::util::require(&kv, k, &path);
    let bad = |reason: String| Error::MalformedHeader {
        path: path.clone(),
        reason,
    };
    let k: usize = get("components")?.parse().map_err(|_| bad("components".into()))?;
    let floats = |s: &str| -> Result<Vec<f64>> {
        s.split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad number {t}"))))
            .collect()
    };
    let eigenvalues = floats(get("eigenvalues")?)?;
    let total_variance: f64 = get("total_variance")?.parse().map_err(|_| bad("total_variance".into()))?;
    let num_source_fields: usize = get("num_source_fields")?.parse().map_err(|_| bad("num_source_fields".into()))?;
    let degenerate: Vec<bool> = get("degenerate")?.split_whitespace().map(|t| t == "1").collect();
    if eigenvalues.len() != k || degenerate.len() != k {
        return Err(bad("component count disagrees with eigenvalues".into()));
    }
    let mean = read_field(dir.join("mean.rvf"))?;
    let components = (1..=k)
        .map(|i| read_field(dir.join(format!("component_{i}.rvf"))))
        .collect::<Result<Vec<_>>>()?;
    for c in &components {
        mean.geometry().ensure_same(c.geometry(), "load_subspace")?;
    }
    Ok(MotionSubspace {
        mean,
        components,
        eigenvalues,
        total_variance,
        num_source_fields,
        degenerate,
    })
}

/// Writes `index,w1,..,wK`.
pub fn write_weights_csv(weights: &[WeightVector], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let k = weights.first().map_or(0, |w| w.len());
    let mut text = String::from("index");
    for i in 1..=k {
        write!(text, ",w{i}").ok();
    }
    text.push('\n');
    for (i, w) in weights.iter().enumerate() {
        write!(text, "{i}").ok();
        for v in w {
            write!(text, ",{v:?}").ok();
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_weights_csv(path: impl AsRef<Path>) -> Result<Vec<WeightVector>> {
    let path = path.as_ref();
    let rows = crate::util::read_csv_rows(path)?;
    Ok(rows.into_iter().map(|(_, w)| w).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> GridGeometry {
        GridGeometry::centered([5, 4, 3], [1.0, 1.5, 2.0]).unwrap()
    }

    fn unit(g: &GridGeometry, seed: usize) -> DisplacementField {
        let f = DisplacementField::from_fn(g.clone(), |p| {
            let s = seed as f64;
            [(p[0] + s).sin(), (0.3 * p[1] * s).cos(), p[2] * 0.1 + s]
        })
        .unwrap();
        let n = f.frobenius_norm();
        f.scaled(1.0 / n)
    }

    #[test]
    fn symmetric_pair() {
        let g = geom();
        let v = unit(&g, 1);
        let sub = fit_pca(&[v.scaled(2.0), v.scaled(-2.0)], 3).unwrap();
        assert!(sub.mean.as_flat().iter().all(|x| x.abs() < 1e-15));
        assert_eq!(sub.k(), 1);
        let d = sub.components[0].dot(&v).unwrap();
        assert!((d.abs() - 1.0).abs() < 1e-12);
        assert!((sub.explained_variance()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_are_flagged() {
        let g = geom();
        let v = unit(&g, 2);
        let sub = fit_pca(&[v.clone(), v.clone(), v], 2).unwrap();
        assert!(sub.degenerate.iter().all(|d| *d));
        assert!(sub.eigenvalues.iter().all(|l| *l == 0.0));
        assert!(fit_pca(&[DisplacementField::zeros(g.clone())], 1).is_err());
        assert!(fit_pca(&[DisplacementField::zeros(g.clone()), DisplacementField::zeros(g)], 0).is_err());
    }

    #[test]
    fn project_and_reconstruct() {
        let g = geom();
        let fields: Vec<_> = (1..6).map(|s| unit(&g, s).scaled(s as f64)).collect();
        let sub = fit_pca(&fields, 4).unwrap();
        assert_eq!(sub.k(), 4);
        assert!(project(&sub, &sub.mean).unwrap().iter().all(|w| w.abs() < 1e-12));
        let f = sub.mean.add_scaled(3.0, &sub.components[0]).unwrap();
        let w = project(&sub, &f).unwrap();
        assert!((w[0] - 3.0).abs() < 1e-10 && w[1..].iter().all(|x| x.abs() < 1e-10));
        assert_eq!(reconstruct(&sub, &[0.0; 4]).unwrap(), sub.mean);
        assert!(reconstruct(&sub, &[0.0; 3]).is_err());
        // Full rank: every source field is reproduced.
        for f in &fields {
            let r = reconstruct(&sub, &project(&sub, f).unwrap()).unwrap();
            let err = r.add_scaled(-1.0, f).unwrap().frobenius_norm();
            assert!(err < 1e-9);
        }
        let ev = sub.explained_variance();
        assert!((ev[3] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn small_grid_enumeration() {
        let g = geom();
        let v = unit(&g, 1);
        let w = unit(&g, 2);
        let sub = fit_pca(&[v.clone(), w.clone(), v.scaled(-1.0)], 2).unwrap();
        let src = vec![vec![2.0, 0.5], vec![-1.0, -1.0]];
        let grid = sample_weight_grid(&sub, 3, 2, 1.5, 1.0, &src).unwrap();
        let expect = [[-3.0, -1.0], [-3.0, 1.0], [0.0, -1.0], [0.0, 1.0], [3.0, -1.0], [3.0, 1.0]];
        assert_eq!(grid.len(), 6);
        for (a, b) in grid.iter().zip(expect) {
            assert_eq!(a[..], b[..]);
        }
        assert!(sample_weight_grid(&sub, 3, 2, 1.5, 1.0, &[]).is_err());
    }

    #[test]
    fn persistence_round_trip() {
        let g = geom();
        let fields: Vec<_> = (1..5).map(|s| unit(&g, s)).collect();
        let sub = fit_pca(&fields, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_subspace(&sub, dir.path()).unwrap();
        assert_eq!(load_subspace(dir.path()).unwrap(), sub);
        let ws = vec![vec![1.5, -2.25], vec![0.1, 1e-3]];
        let p = dir.path().join("w.csv");
        write_weights_csv(&ws, &p).unwrap();
        assert_eq!(read_weights_csv(&p).unwrap(), ws);
    }
}

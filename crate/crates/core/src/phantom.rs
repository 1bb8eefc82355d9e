//! Analytic breathing phantom with a known two-dimensional motion model, and
//! a closed Catmull–Rom breathing model in weight space.
//!
//! Axes: x is left–right, y is anterior–posterior, z is superior–inferior.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{norm, sub, Vec3};
use crate::subspace::WeightVector;
use crate::volume::{invert_field, jacobian_determinant, DensityVolume, DisplacementField, GridGeometry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub body: Ellipsoid,
    pub lungs: [Ellipsoid; 2],
    pub tumor: Ellipsoid,
    /// Gaussian window widths (mm) of the generating fields: x and y around
    /// each lung centre, z for the displacement profile centred on the lungs.
    pub motion_sigma: [f64; 3],
    pub amplitude_1: f64,
    pub amplitude_2: f64,
    pub num_phases: usize,
    /// Width (mm) of the smooth transition across every ellipsoid surface.
    pub edge_width: f64,
    /// Number of Gaussian vessel-like blobs scattered through the lungs.
    pub texture_blobs: usize,
    /// Peak added density of one blob.
    pub texture_amplitude: f64,
    /// Standard deviation (mm) of one texture blob.
    pub texture_radius: f64,
    /// Seeds the texture layout.
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 48],
            spacing: [2.0, 2.0, 3.0],
            body: Ellipsoid {
                center: [0.0; 3],
                radii: [56.0, 48.0, 62.0],
                density: 1.0,
            },
            lungs: [
                Ellipsoid {
                    center: [24.0, 0.0, 0.0],
                    radii: [18.0, 28.0, 44.0],
                    density: 0.25,
                },
                Ellipsoid {
                    center: [-24.0, 0.0, 0.0],
                    radii: [18.0, 28.0, 44.0],
                    density: 0.25,
                },
            ],
            tumor: Ellipsoid {
                center: [24.0, 0.0, -16.0],
                radii: [8.0; 3],
                density: 0.9,
            },
            motion_sigma: [35.0, 35.0, 25.0],
            amplitude_1: 12.0,
            amplitude_2: 4.0,
            num_phases: 10,
            edge_width: 6.0,
            texture_blobs: 800,
            texture_amplitude: 0.5,
            texture_radius: 3.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::centered(self.dims, self.spacing)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        for e in [&self.body, &self.lungs[0], &self.lungs[1], &self.tumor] {
            if e.radii.iter().any(|r| !(*r > 0.0)) || !(e.density >= 0.0) {
                return Err(Error::InvalidArgument(format!("invalid ellipsoid {e:?}")));
            }
        }
        for lung in &self.lungs {
            if !contains(&self.body, lung) {
                return Err(Error::InvalidArgument("lung ellipsoid leaves the body".into()));
            }
        }
        if !self.lungs.iter().any(|l| contains(l, &self.tumor)) {
            return Err(Error::InvalidArgument("tumor must lie inside one lung".into()));
        }
        if self.motion_sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("motion sigmas must be > 0".into()));
        }
        if self.num_phases < 2 {
            return Err(Error::InvalidArgument("need at least 2 phases".into()));
        }
        if !(self.edge_width > 0.0 && self.texture_radius > 0.0 && self.texture_amplitude >= 0.0) {
            return Err(Error::InvalidArgument("edge width and texture radius must be > 0".into()));
        }
        if !(self.amplitude_1 >= 0.0 && self.amplitude_2 >= 0.0) {
            return Err(Error::InvalidArgument("amplitudes must be >= 0".into()));
        }
        Ok(())
    }
}

/// Normalised radius `ρ` with `ρ = 1` on the surface.
fn rho(e: &Ellipsoid, p: Vec3) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        let t = (p[a] - e.center[a]) / e.radii[a];
        s += t * t;
    }
    s.sqrt()
}

/// Checks a dense set of surface points of `inner` against `outer`.
fn contains(outer: &Ellipsoid, inner: &Ellipsoid) -> bool {
    let n = 400;
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n).all(|i| {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let th = golden * i as f64;
        let d = [r * th.cos(), r * th.sin(), z];
        let p = [
            inner.center[0] + inner.radii[0] * d[0],
            inner.center[1] + inner.radii[1] * d[1],
            inner.center[2] + inner.radii[2] * d[2],
        ];
        rho(outer, p) < 1.0
    })
}

/// Smooth occupancy in `[0, 1]`, ramping over `width` mm across the surface
/// (quintic smoothstep, so the density is twice differentiable).
fn occupancy(e: &Ellipsoid, p: Vec3, width: f64) -> f64 {
    let r = rho(e, p);
    let dist = norm(sub(p, e.center));
    // Radial distance to the surface; negative inside.
    let d = if r > 0.0 { dist * (1.0 - 1.0 / r) } else { -f64::INFINITY };
    smoothstep(0.5 - d / width)
}

#[derive(Debug, Clone)]
struct Blob {
    center: Vec3,
    amplitude: f64,
}

/// The continuous reference phantom.
struct Anatomy<'a> {
    cfg: &'a PhantomConfig,
    blobs: Vec<Blob>,
}

impl<'a> Anatomy<'a> {
    fn new(cfg: &'a PhantomConfig) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut blobs = Vec::with_capacity(cfg.texture_blobs);
        if cfg.lungs.is_empty() {
            return Self { cfg, blobs };
        }
        while blobs.len() < cfg.texture_blobs {
            let lung = &cfg.lungs[rng.random_range(0..cfg.lungs.len())];
            let d = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let p = [
                lung.center[0] + lung.radii[0] * d[0],
                lung.center[1] + lung.radii[1] * d[1],
                lung.center[2] + lung.radii[2] * d[2],
            ];
            if rho(lung, p) >= 1.0 {
                continue;
            }
            let amplitude = cfg.texture_amplitude * rng.random_range(0.5..1.0);
            blobs.push(Blob { center: p, amplitude });
        }
        Self { cfg, blobs }
    }

    fn density(&self, p: Vec3) -> f64 {
        let cfg = self.cfg;
        let w = cfg.edge_width;
        let body = occupancy(&cfg.body, p, w);
        if body == 0.0 {
            return 0.0;
        }
        let mut v = cfg.body.density * body;
        let mut in_lung = 0.0f64;
        for lung in &cfg.lungs {
            let b = occupancy(lung, p, w);
            v = v * (1.0 - b) + lung.density * b;
            in_lung = in_lung.max(b);
        }
        if in_lung > 0.0 && !self.blobs.is_empty() {
            let s2 = 2.0 * cfg.texture_radius * cfg.texture_radius;
            let cutoff = 9.0 * s2;
            let vessels: f64 = self
                .blobs
                .iter()
                .filter_map(|bl| {
                    let r2 = (p[0] - bl.center[0]).powi(2) + (p[1] - bl.center[1]).powi(2) + (p[2] - bl.center[2]).powi(2);
                    (r2 < cutoff).then(|| bl.amplitude * (-r2 / s2).exp())
                })
                .sum();
            v += in_lung * vessels;
        }
        let tumor = occupancy(&cfg.tumor, p, w);
        (v * (1.0 - tumor) + cfg.tumor.density * tumor).max(0.0)
    }
}

pub fn make_reference_volume(cfg: &PhantomConfig) -> Result<DensityVolume> {
    cfg.validate()?;
    let anatomy = Anatomy::new(cfg);
    DensityVolume::from_fn(cfg.geometry()?, |p| anatomy.density(p))
}

/// Gaussian profile along z, peak 1 at `z = center`.
fn z_profile(z: f64, center: f64, sigma: f64) -> f64 {
    let zeta = (z - center) / sigma;
    (-0.5 * zeta * zeta).exp()
}

/// Normalised body radius inside which the motion window is untapered, and
/// beyond which it is exactly zero.
const TAPER: (f64, f64) = (0.88, 1.08);

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}

fn lung_window(cfg: &PhantomConfig, p: Vec3) -> f64 {
    let [sx, sy, _] = cfg.motion_sigma;
    let taper = smoothstep((TAPER.1 - rho(&cfg.body, p)) / (TAPER.1 - TAPER.0));
    if taper == 0.0 {
        return 0.0;
    }
    taper * cfg.lungs
        .iter()
        .map(|l| {
            let dx = (p[0] - l.center[0]) / sx;
            let dy = (p[1] - l.center[1]) / sy;
            (-0.5 * (dx * dx + dy * dy)).exp()
        })
        .sum::<f64>()
}

/// The two unit-peak generating fields: `v1` moves the lungs along z, `v2`
/// along y, both with the same windowed profile. The surrounding tissue is
/// compressed on one side and stretched on the other. The fields are
/// orthogonal and have equal norms because they share one scalar profile in
/// different components. The window tapers to exactly zero just outside the
/// body.
pub fn generating_fields(cfg: &PhantomConfig) -> Result<(DisplacementField, DisplacementField)> {
    cfg.validate()?;
    let geom = cfg.geometry()?;
    let sz = cfg.motion_sigma[2];
    let cz = cfg.lungs.iter().map(|l| l.center[2]).sum::<f64>() / cfg.lungs.len().max(1) as f64;
    let profile: Vec<f64> = (0..geom.len())
        .map(|idx| {
            let p = geom.world_of_index(idx);
            z_profile(p[2], cz, sz) * lung_window(cfg, p)
        })
        .collect();
    let peak = profile.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let v1 = DisplacementField::new(geom.clone(), profile.iter().map(|s| [0.0, 0.0, s / peak]).collect())?;
    let v2 = DisplacementField::new(geom, profile.iter().map(|s| [0.0, s / peak, 0.0]).collect())?;
    for (v, a, name) in [(&v1, cfg.amplitude_1, "v1"), (&v2, cfg.amplitude_2, "v2")] {
        let min_j = jacobian_determinant(&v.scaled(a)).min();
        if min_j <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "amplitude of {name} too large: min jacobian {min_j}"
            )));
        }
    }
    Ok((v1, v2))
}

/// Weights of the breathing cycle at `t ∈ [0, 1)`; `t = 0` is full exhale.
pub fn breathing_weights(cfg: &PhantomConfig, t: f64) -> (f64, f64) {
    let th = 2.0 * PI * t;
    (cfg.amplitude_1 * (1.0 - th.cos()) / 2.0, cfg.amplitude_2 * th.sin())
}

#[derive(Debug, Clone)]
pub struct Phantom4d {
    pub reference: DensityVolume,
    pub phases: Vec<DensityVolume>,
    /// `u_p = w1(t)·v1 + w2(t)·v2`, the field registering phase `p` onto the reference.
    pub truth: Vec<DisplacementField>,
    pub generators: (DisplacementField, DisplacementField),
    pub weights: Vec<(f64, f64)>,
}

/// Phase `p` sits at `t = p / num_phases`. Its volume is the reference pushed
/// through the inverse of `u_p`, so that `warp_density(phase_p, u_p)` returns
/// the reference and `u_p` is the ground truth of a registration onto phase 0.
/// The push-forward evaluates the continuous phantom at `y + g(y)` (with `g`
/// the inverse field) rather than resampling the reference grid, so phases
/// carry no extra interpolation blur.
pub fn generate_4d_series(cfg: &PhantomConfig) -> Result<Phantom4d> {
    let reference = make_reference_volume(cfg)?;
    let anatomy = Anatomy::new(cfg);
    let (v1, v2) = generating_fields(cfg)?;
    let mut phases = Vec::with_capacity(cfg.num_phases);
    let mut truth = Vec::with_capacity(cfg.num_phases);
    let mut weights = Vec::with_capacity(cfg.num_phases);
    for p in 0..cfg.num_phases {
        let (w1, w2) = breathing_weights(cfg, p as f64 / cfg.num_phases as f64);
        let u = v1.scaled(w1).add_scaled(w2, &v2)?;
        let min_j = jacobian_determinant(&u).min();
        if min_j <= 0.0 {
            return Err(Error::Folding { min_jacobian: min_j });
        }
        let vol = if w1 == 0.0 && w2 == 0.0 {
            reference.clone()
        } else {
            push_forward(&anatomy, &invert_field(&u, 1e-6, 500))?
        };
        phases.push(vol);
        truth.push(u);
        weights.push((w1, w2));
    }
    Ok(Phantom4d {
        reference,
        phases,
        truth,
        generators: (v1, v2),
        weights,
    })
}

/// `|Dg|(y) · ρ(y + g(y))` for the continuous phantom density `ρ`.
fn push_forward(anatomy: &Anatomy, g: &DisplacementField) -> Result<DensityVolume> {
    let geom = g.geometry();
    let jac = jacobian_determinant(g);
    let values = (0..geom.len())
        .map(|idx| {
            let y = geom.world_of_index(idx);
            let v = g.vectors()[idx];
            (jac.values()[idx] * anatomy.density([y[0] + v[0], y[1] + v[1], y[2] + v[2]])).max(0.0)
        })
        .collect();
    DensityVolume::new(geom.clone(), values)
}

/// Closed uniform Catmull–Rom curve through weight-space control points.
#[derive(Debug, Clone, PartialEq)]
pub struct BreathingSpline {
    pub control_points: Vec<WeightVector>,
    pub closed: bool,
    pub samples: usize,
}

impl BreathingSpline {
    pub fn new(control_points: Vec<WeightVector>, samples: usize) -> Result<Self> {
        let s = Self {
            control_points,
            closed: true,
            samples,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let n = self.control_points.len();
        if self.closed && n < 3 {
            return Err(Error::InvalidArgument(format!("closed spline needs >= 3 control points, got {n}")));
        }
        if n < 2 {
            return Err(Error::InvalidArgument("spline needs >= 2 control points".into()));
        }
        let k = self.control_points[0].len();
        if self.control_points.iter().any(|c| c.len() != k) {
            return Err(Error::InvalidArgument("control points differ in dimension".into()));
        }
        Ok(())
    }

    fn point(&self, i: isize) -> &WeightVector {
        let n = self.control_points.len() as isize;
        let idx = if self.closed { i.rem_euclid(n) } else { i.clamp(0, n - 1) };
        &self.control_points[idx as usize]
    }

    /// Curve at parameter `s`; control point `i` sits at `s = i`.
    pub fn eval(&self, s: f64) -> WeightVector {
        let n = self.control_points.len();
        let period = if self.closed { n as f64 } else { (n - 1) as f64 };
        let s = if self.closed { s.rem_euclid(period) } else { s.clamp(0.0, period) };
        let mut seg = s.floor() as isize;
        if !self.closed && seg as f64 >= period {
            seg -= 1;
        }
        let t = s - seg as f64;
        let (p0, p1, p2, p3) = (self.point(seg - 1), self.point(seg), self.point(seg + 1), self.point(seg + 2));
        let t2 = t * t;
        let t3 = t2 * t;
        (0..p1.len())
            .map(|d| {
                0.5 * (2.0 * p1[d]
                    + (-p0[d] + p2[d]) * t
                    + (2.0 * p0[d] - 5.0 * p1[d] + 4.0 * p2[d] - p3[d]) * t2
                    + (-p0[d] + 3.0 * p1[d] - 3.0 * p2[d] + p3[d]) * t3)
            })
            .collect()
    }
}

/// `samples` evenly spaced points over one period of the curve.
pub fn sample_spline(model: &BreathingSpline) -> Result<Vec<WeightVector>> {
    model.validate()?;
    let n = model.control_points.len();
    let period = if model.closed { n as f64 } else { (n - 1) as f64 };
    let denom = if model.closed { model.samples as f64 } else { (model.samples.max(2) - 1) as f64 };
    Ok((0..model.samples).map(|j| model.eval(period * j as f64 / denom)).collect())
}

//! Labelled training corpus: subspace weights → deformation → deformed
//! reference → radiograph → preprocessing, one sample per weight vector.
//!
//! Layout of a corpus directory:
//!
//! ```text
//! samples/sample_000000.rvf   preprocessed image (kind=projection, f64)
//! targets.csv                 sample_id,w1,…,wK
//! shard.bin                   all images and targets packed (optional)
//! manifest.txt                written last; its presence marks completion
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::drr::{read_projection, render_drr, write_projection_as, ProjectionGeometry, ProjectionImage};
use crate::error::{Error, Result};
use crate::preprocess::preprocess_with_bins;
use crate::subspace::{reconstruct, MotionSubspace, WeightVector};
use crate::util::{parse_key_values, read_csv_rows, require};
use crate::volume::{invert_field, warp_density, DensityVolume, DisplacementField, Dtype};

const SHARD_MAGIC: &[u8; 4] = b"LTS1";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetOptions {
    /// Ray sampling step (mm).
    pub step_mm: f64,
    pub bins: usize,
    /// Tolerance (mm) of the fixed-point field inversion.
    pub invert_tol: f64,
    pub invert_max_iters: usize,
    pub write_shard: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            step_mm: 1.0,
            bins: crate::preprocess::DEFAULT_BINS,
            invert_tol: 1e-4,
            invert_max_iters: 200,
            write_shard: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: usize,
    pub image_dims: [usize; 2],
    pub k: usize,
    /// Per-dimension max-abs of the targets (1 where a dimension is all zero).
    pub target_scale: Vec<f64>,
    /// Hash of the projection geometry, volume grid and options.
    pub config_fingerprint: String,
    /// Hash of every sample file and of the targets, in sample order.
    pub corpus_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn fingerprint(reference: &DensityVolume, geom: &ProjectionGeometry, opts: &DatasetOptions) -> String {
    let g = reference.geometry();
    let text = format!(
        "grid {:?} {:?} {:?}\nsource {:?}\ndetector {:?} {:?} {:?} {:?} {:?}\nstep {:?} bins {} invert {:?} {}",
        g.dims(),
        g.spacing(),
        g.origin(),
        geom.source(),
        geom.detector_center(),
        geom.u_axis(),
        geom.v_axis(),
        geom.det_dims(),
        geom.det_spacing(),
        opts.step_mm,
        opts.bins,
        opts.invert_tol,
        opts.invert_max_iters
    );
    hex(&Sha256::digest(text.as_bytes()))
}

pub fn sample_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("samples").join(format!("sample_{id:06}.rvf"))
}

/// The radiograph of the reference deformed by the subspace field at `w`:
/// the reference is pushed through the inverse of the reconstructed field,
/// which is how a phase relates to the reference.
pub fn synthesize_image(
    reference: &DensityVolume,
    sub: &MotionSubspace,
    w: &[f64],
    geom: &ProjectionGeometry,
    opts: &DatasetOptions,
) -> Result<ProjectionImage> {
    let u = reconstruct(sub, w)?;
    let deformed = deform_reference(reference, &u, opts)?;
    preprocess_with_bins(&render_drr(&deformed, geom, opts.step_mm)?, opts.bins)
}

/// `warp_density(reference, u⁻¹)`: the volume whose registration onto the
/// reference is `u`.
pub fn deform_reference(reference: &DensityVolume, u: &DisplacementField, opts: &DatasetOptions) -> Result<DensityVolume> {
    if u.max_norm() == 0.0 {
        return Ok(reference.clone());
    }
    warp_density(reference, &invert_field(u, opts.invert_tol, opts.invert_max_iters))
}

fn target_scale(weights: &[WeightVector], k: usize) -> Vec<f64> {
    (0..k)
        .map(|d| {
            let m = weights.iter().fold(0.0f64, |m, w| m.max(w[d].abs()));
            if m > 0.0 {
                m
            } else {
                1.0
            }
        })
        .collect()
}

fn load_valid(path: &Path, dims: [usize; 2]) -> Option<ProjectionImage> {
    read_projection(path).ok().filter(|img| img.dims() == dims)
}

/// Generates (or completes) a corpus in `out_dir`. Samples already on disk
/// with the expected dimensions are kept; the manifest is written last.
pub fn generate_dataset(
    reference: &DensityVolume,
    sub: &MotionSubspace,
    weights: &[WeightVector],
    geom: &ProjectionGeometry,
    out_dir: impl AsRef<Path>,
    opts: &DatasetOptions,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    reference.geometry().ensure_same(sub.geometry(), "generate_dataset")?;
    if weights.is_empty() {
        return Err(Error::InvalidArgument("no weight vectors to generate".into()));
    }
    let k = sub.k();
    if let Some(w) = weights.iter().find(|w| w.len() != k) {
        return Err(Error::InvalidArgument(format!("weight vector of length {} for {k} components", w.len())));
    }
    if weights.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("weights must be finite".into()));
    }
    let [nu, nv] = geom.det_dims();
    let dims = [nu / 2, nv / 2];
    let manifest_path = out_dir.join("manifest.txt");
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let samples_dir = out_dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;

    let images: Vec<ProjectionImage> = weights
        .par_iter()
        .enumerate()
        .map(|(id, w)| {
            let path = sample_path(out_dir, id);
            if let Some(img) = load_valid(&path, dims) {
                return Ok(img);
            }
            let img = synthesize_image(reference, sub, w, geom, opts)?;
            write_projection_as(&img, &path, Dtype::F64)?;
            Ok(img)
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("sample_id");
    for d in 1..=k {
        let _ = write!(csv, ",w{d}");
    }
    csv.push('\n');
    for (id, w) in weights.iter().enumerate() {
        let _ = write!(csv, "{id}");
        for v in w {
            let _ = write!(csv, ",{v:?}");
        }
        csv.push('\n');
    }
    let targets_path = out_dir.join("targets.csv");
    fs::write(&targets_path, &csv).map_err(|e| Error::io(&targets_path, e))?;

    let mut hasher = Sha256::new();
    for id in 0..weights.len() {
        let path = sample_path(out_dir, id);
        hasher.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    hasher.update(csv.as_bytes());

    let manifest = DatasetManifest {
        samples: weights.len(),
        image_dims: dims,
        k,
        target_scale: target_scale(weights, k),
        config_fingerprint: fingerprint(reference, geom, opts),
        corpus_sha256: hex(&hasher.finalize()),
    };
    if opts.write_shard {
        let data = TrainingData {
            dims,
            k,
            images: images.into_iter().flat_map(ProjectionImage::into_values).collect(),
            targets: weights.iter().flatten().copied().collect(),
        };
        write_shard(&data, out_dir.join("shard.bin"))?;
    }
    write_manifest(&manifest, &manifest_path)?;
    Ok(manifest)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

pub fn write_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = format!(
        "samples={}\nimage_dims={} {}\nk={}\ntarget_scale={}\nconfig_fingerprint={}\ncorpus_sha256={}\n",
        m.samples,
        m.image_dims[0],
        m.image_dims[1],
        m.k,
        join(&m.target_scale),
        m.config_fingerprint,
        m.corpus_sha256
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kv = parse_key_values(&text, path)?;
    let bad = |r: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: r,
    };
    let int = |key: &str| -> Result<usize> {
        require(&kv, key, path)?
            .parse()
            .map_err(|_| bad(format!("`{key}` is not an integer")))
    };
    let dims: Vec<usize> = require(&kv, "image_dims", path)?
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("bad image_dims".into()))?;
    if dims.len() != 2 {
        return Err(bad("image_dims needs two values".into()));
    }
    let target_scale: Vec<f64> = require(&kv, "target_scale", path)?
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("bad target_scale".into()))?;
    let m = DatasetManifest {
        samples: int("samples")?,
        image_dims: [dims[0], dims[1]],
        k: int("k")?,
        target_scale,
        config_fingerprint: require(&kv, "config_fingerprint", path)?.to_string(),
        corpus_sha256: require(&kv, "corpus_sha256", path)?.to_string(),
    };
    if m.target_scale.len() != m.k || m.target_scale.iter().any(|s| !(*s > 0.0)) {
        return Err(bad("target_scale must hold k positive values".into()));
    }
    Ok(m)
}

/// Images and raw targets held in memory, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub dims: [usize; 2],
    pub k: usize,
    pub images: Vec<f64>,
    pub targets: Vec<f64>,
}

impl TrainingData {
    pub fn len(&self) -> usize {
        self.targets.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.k..(i + 1) * self.k]
    }

    /// The samples with the given ids, in that order.
    pub fn subset(&self, ids: &[usize]) -> TrainingData {
        TrainingData {
            dims: self.dims,
            k: self.k,
            images: ids.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
            targets: ids.iter().flat_map(|&i| self.target(i).iter().copied()).collect(),
        }
    }
}

pub fn write_shard(data: &TrainingData, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(36 + 8 * (data.images.len() + data.targets.len()));
    bytes.extend_from_slice(SHARD_MAGIC);
    for v in [data.len(), data.dims[0], data.dims[1], data.k] {
        bytes.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in data.images.iter().chain(&data.targets) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<TrainingData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |r: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: r.to_string(),
    };
    if bytes.len() < 36 || &bytes[..4] != SHARD_MAGIC {
        return Err(bad("not a sample shard"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().expect("8 bytes")) as usize;
    let (n, nu, nv, k) = (word(0), word(1), word(2), word(3));
    let count = n
        .checked_mul(nu * nv + k)
        .ok_or_else(|| bad("sample count overflows"))?;
    let payload = &bytes[36..];
    if payload.len() != 8 * count {
        return Err(Error::LengthMismatch {
            expected: count,
            found: payload.len() / 8,
        });
    }
    let vals: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(index) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let split = n * nu * nv;
    Ok(TrainingData {
        dims: [nu, nv],
        k,
        images: vals[..split].to_vec(),
        targets: vals[split..].to_vec(),
    })
}

/// Loads a completed corpus, from the shard when present.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, TrainingData)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.txt");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact {
            path: manifest_path,
            producer: "gendata".into(),
        });
    }
    let manifest = read_manifest(&manifest_path)?;
    let shard = dir.join("shard.bin");
    let data = if shard.exists() {
        read_shard(&shard)?
    } else {
        let rows = read_csv_rows(&dir.join("targets.csv"))?;
        let mut images = Vec::with_capacity(manifest.samples * manifest.image_dims[0] * manifest.image_dims[1]);
        for id in 0..manifest.samples {
            let img = read_projection(sample_path(dir, id))?;
            if img.dims() != manifest.image_dims {
                return Err(Error::InvalidArgument(format!("sample {id} has dims {:?}", img.dims())));
            }
            images.extend_from_slice(img.values());
        }
        TrainingData {
            dims: manifest.image_dims,
            k: manifest.k,
            images,
            targets: rows.into_iter().flat_map(|(_, v)| v).collect(),
        }
    };
    if data.len() != manifest.samples || data.k != manifest.k || data.dims != manifest.image_dims {
        return Err(Error::InvalidArgument("corpus does not match its manifest".into()));
    }
    Ok((manifest, data))
}

/// Deterministic shuffle of `0..n` split into `(train, holdout)`; the train
/// part has `round(fraction·n)` ids.
pub fn split_dataset(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let cut = (fraction * n as f64).round() as usize;
    let holdout = ids.split_off(cut.min(n));
    Ok((ids, holdout))
}

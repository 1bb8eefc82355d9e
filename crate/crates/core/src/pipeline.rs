//! The end-to-end stages behind the command-line subcommands. Every stage
//! reads and writes fixed artifact paths under one output directory, so a
//! run is reproducible from that directory and its config snapshot.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::dataset::{generate_dataset, load_dataset, split_dataset, synthesize_image};
use crate::drr::{default_geometry, read_projection, render_drr, ProjectionGeometry, ProjectionImage};
use crate::error::{Error, Result};
use crate::eval::{
    deformation_distance_error, density_mask, evaluate_weight_recovery, phase_error_row, write_error_map,
    write_per_phase_csv, write_weight_recovery_csv, PhaseErrorRow, WeightRecoveryRow,
};
use crate::lowrank::{register_rank_constrained, singular_values, build_matrix, write_lowrank_trace_csv};
use crate::phantom::{generate_4d_series, sample_spline, BreathingSpline};
use crate::preprocess::preprocess_with_bins;
use crate::regressor::{
    build_model, load_checkpoint, save_checkpoint, throughput_report, to_real, train, write_throughput_csv,
    write_train_log_csv, RegressorModel, TrainConfig,
};
use crate::subspace::{
    fit_pca, load_subspace, project, read_weights_csv, reconstruct, sample_weight_grid, save_subspace,
    write_weights_csv, MotionSubspace, WeightVector,
};
use crate::util::{parse_key_values, require};
use crate::volume::{read_field, read_volume, write_field_as, write_volume_as, DensityVolume, DisplacementField, Dtype};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Phantom,
    Register,
    Subspace,
    Gendata,
    Train,
    Infer,
    EvalSpline,
    EvalPhases,
    Bench,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Phantom,
        Stage::Register,
        Stage::Subspace,
        Stage::Gendata,
        Stage::Train,
        Stage::Infer,
        Stage::EvalSpline,
        Stage::EvalPhases,
        Stage::Bench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Register => "register",
            Stage::Subspace => "subspace",
            Stage::Gendata => "gendata",
            Stage::Train => "train",
            Stage::Infer => "infer",
            Stage::EvalSpline => "eval-spline",
            Stage::EvalPhases => "eval-phases",
            Stage::Bench => "bench",
        }
    }

    /// Artifacts read, each with the stage that writes it.
    pub fn inputs(self, cfg: &PipelineConfig) -> Vec<(PathBuf, Stage)> {
        let n = cfg.phantom.num_phases;
        let phantom = |v: &mut Vec<(PathBuf, Stage)>| {
            v.push((paths::phantom_manifest(), Stage::Phantom));
            v.push((paths::reference(), Stage::Phantom));
        };
        let subspace = |v: &mut Vec<(PathBuf, Stage)>| {
            v.push((paths::subspace_dir().join("subspace.txt"), Stage::Subspace));
            v.push((paths::source_weights(), Stage::Subspace));
        };
        let mut v = Vec::new();
        match self {
            Stage::Phantom => {}
            Stage::Register => {
                phantom(&mut v);
                v.extend((0..n).map(|p| (paths::phase(p), Stage::Phantom)));
            }
            Stage::Subspace => {
                v.push((paths::registration_manifest(), Stage::Register));
                v.extend((1..n).map(|p| (paths::registered(p), Stage::Register)));
            }
            Stage::Gendata => {
                phantom(&mut v);
                subspace(&mut v);
            }
            Stage::Train => v.push((paths::dataset_dir().join("manifest.txt"), Stage::Gendata)),
            Stage::Infer => v.push((paths::model(), Stage::Train)),
            Stage::EvalSpline => {
                phantom(&mut v);
                subspace(&mut v);
                v.push((paths::model(), Stage::Train));
            }
            Stage::EvalPhases => {
                phantom(&mut v);
                v.extend((1..n).map(|p| (paths::phase(p), Stage::Phantom)));
                v.extend((1..n).map(|p| (paths::truth(p), Stage::Phantom)));
                subspace(&mut v);
                v.push((paths::model(), Stage::Train));
            }
            Stage::Bench => {
                v.push((paths::model(), Stage::Train));
                v.push((paths::dataset_dir().join("manifest.txt"), Stage::Gendata));
            }
        }
        v
    }

    pub fn outputs(self, cfg: &PipelineConfig) -> Vec<PathBuf> {
        let n = cfg.phantom.num_phases;
        match self {
            Stage::Phantom => {
                let mut v = vec![paths::phantom_manifest(), paths::reference(), paths::phase_weights()];
                v.extend((0..n).flat_map(|p| [paths::phase(p), paths::truth(p)]));
                v
            }
            Stage::Register => {
                let mut v: Vec<PathBuf> = (1..n).map(paths::registered).collect();
                v.push(paths::registration_dir().join("trace.csv"));
                v.push(paths::registration_manifest());
                v
            }
            Stage::Subspace => vec![
                paths::subspace_dir().join("mean.rvf"),
                paths::subspace_dir().join("component_<i>.rvf"),
                paths::subspace_dir().join("subspace.txt"),
                paths::subspace_dir().join("explained_variance.csv"),
                paths::source_weights(),
            ],
            Stage::Gendata => {
                let d = paths::dataset_dir();
                vec![
                    d.join("samples/sample_<id>.rvf"),
                    d.join("targets.csv"),
                    d.join("shard.bin"),
                    d.join("manifest.txt"),
                ]
            }
            Stage::Train => vec![paths::model(), paths::model_dir().join("train_log.csv")],
            Stage::Infer => vec![PathBuf::from("infer/weights.csv")],
            Stage::EvalSpline => {
                let d = PathBuf::from("eval_spline");
                vec![
                    d.join("spline_weights.csv"),
                    d.join("weights_true_vs_inferred.csv"),
                    d.join("summary.txt"),
                ]
            }
            Stage::EvalPhases => {
                let d = PathBuf::from("eval_phases");
                let mut v = vec![
                    d.join("per_phase_errors.csv"),
                    d.join("per_phase_subspace_errors.csv"),
                    d.join("weights_true_vs_inferred.csv"),
                ];
                v.extend((1..n).flat_map(|p| {
                    [
                        d.join(format!("error_map_phase{p}.rvf")),
                        d.join(format!("error_map_phase{p}.pgm")),
                    ]
                }));
                v
            }
            Stage::Bench => vec![PathBuf::from("bench/throughput.csv")],
        }
    }
}

/// Artifact locations relative to the output directory.
pub mod paths {
    use std::path::PathBuf;

    pub fn phantom_dir() -> PathBuf {
        PathBuf::from("phantom")
    }
    pub fn phantom_manifest() -> PathBuf {
        phantom_dir().join("phantom.txt")
    }
    pub fn reference() -> PathBuf {
        phantom_dir().join("reference.rvf")
    }
    pub fn phase_weights() -> PathBuf {
        phantom_dir().join("phase_weights.csv")
    }
    pub fn phase(p: usize) -> PathBuf {
        phantom_dir().join(format!("phase_{p:02}.rvf"))
    }
    pub fn truth(p: usize) -> PathBuf {
        phantom_dir().join(format!("truth_{p:02}.rvf"))
    }
    pub fn registration_dir() -> PathBuf {
        PathBuf::from("registration")
    }
    pub fn registration_manifest() -> PathBuf {
        registration_dir().join("registration.txt")
    }
    pub fn registered(p: usize) -> PathBuf {
        registration_dir().join(format!("field_{p:02}.rvf"))
    }
    pub fn subspace_dir() -> PathBuf {
        PathBuf::from("subspace")
    }
    pub fn source_weights() -> PathBuf {
        subspace_dir().join("source_weights.csv")
    }
    pub fn dataset_dir() -> PathBuf {
        PathBuf::from("dataset")
    }
    pub fn model_dir() -> PathBuf {
        PathBuf::from("model")
    }
    pub fn model() -> PathBuf {
        model_dir().join("model.rgr")
    }
}

/// Extra inputs of individual stages.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Projection to run `infer` on: a raw radiograph at detector size or an
    /// already preprocessed image at network size.
    pub image: Option<PathBuf>,
}

/// Fails with the producing stage named when an input is absent.
pub fn check_inputs(stage: Stage, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    for (p, producer) in stage.inputs(cfg) {
        let full = out.join(&p);
        if !full.exists() {
            return Err(Error::MissingArtifact {
                path: full,
                producer: producer.name().into(),
            });
        }
    }
    Ok(())
}

/// The artifact graph of one stage, without touching the disk.
pub fn dry_run(stage: Stage, cfg: &PipelineConfig, out: &Path) -> String {
    let mut s = format!("stage {}\n", stage.name());
    for (p, producer) in stage.inputs(cfg) {
        let _ = writeln!(s, "  reads  {} (from {})", out.join(p).display(), producer.name());
    }
    for p in stage.outputs(cfg) {
        let _ = writeln!(s, "  writes {}", out.join(p).display());
    }
    if stage == Stage::Gendata {
        let (n1, n2) = (cfg.dataset.grid_n1, cfg.dataset.grid_n2);
        let _ = writeln!(s, "  samples {} = {n1}×{n2}", n1 * n2);
    }
    s
}

/// Runs one stage. `progress` receives human-readable status lines.
pub fn run_stage(
    stage: Stage,
    cfg: &PipelineConfig,
    out: &Path,
    opts: &RunOptions,
    progress: &mut dyn FnMut(&str),
) -> Result<String> {
    check_inputs(stage, cfg, out)?;
    mkdir(out)?;
    let snapshot = out.join("config.toml");
    fs::write(&snapshot, cfg.to_toml()).map_err(|e| Error::io(&snapshot, e))?;
    match stage {
        Stage::Phantom => phantom_stage(cfg, out),
        Stage::Register => register_stage(cfg, out),
        Stage::Subspace => subspace_stage(cfg, out),
        Stage::Gendata => gendata_stage(cfg, out),
        Stage::Train => train_stage(cfg, out, progress),
        Stage::Infer => infer_stage(cfg, out, opts),
        Stage::EvalSpline => eval_spline_stage(cfg, out),
        Stage::EvalPhases => eval_phases_stage(cfg, out),
        Stage::Bench => bench_stage(cfg, out),
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn num_phases(out: &Path) -> Result<usize> {
    let path = out.join(paths::phantom_manifest());
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv = parse_key_values(&text, &path)?;
    require(&kv, "num_phases", &path)?.parse().map_err(|_| Error::MalformedHeader {
        path: path.clone(),
        reason: "num_phases is not an integer".into(),
    })
}

pub fn projection_geometry(cfg: &PipelineConfig) -> Result<ProjectionGeometry> {
    default_geometry(&cfg.phantom.geometry()?, &cfg.projection)
}

/// Rendered and preprocessed radiograph of a volume.
pub fn radiograph(vol: &DensityVolume, geom: &ProjectionGeometry, cfg: &PipelineConfig) -> Result<ProjectionImage> {
    let opts = cfg.dataset_options();
    preprocess_with_bins(&render_drr(vol, geom, opts.step_mm)?, opts.bins)
}

fn phantom_stage(cfg: &PipelineConfig, out: &Path) -> Result<String> {
    let ph = generate_4d_series(&cfg.phantom)?;
    mkdir(&out.join(paths::phantom_dir()))?;
    write_volume_as(&ph.reference, out.join(paths::reference()), Dtype::F64)?;
    for (p, (vol, u)) in ph.phases.iter().zip(&ph.truth).enumerate() {
        write_volume_as(vol, out.join(paths::phase(p)), Dtype::F64)?;
        write_field_as(u, out.join(paths::truth(p)), Dtype::F64)?;
    }
    let w: Vec<WeightVector> = ph.weights.iter().map(|&(a, b)| vec![a, b]).collect();
    write_weights_csv(&w, out.join(paths::phase_weights()))?;
    let masses: Vec<String> = ph.phases.iter().map(|v| format!("{:.6}", v.total_mass())).collect();
    write_text(
        &out.join(paths::phantom_manifest()),
        &format!("num_phases={}\nmasses={}\n", ph.phases.len(), masses.join(" ")),
    )?;
    let max_u = ph.truth.iter().map(DisplacementField::max_norm).fold(0.0, f64::max);
    Ok(format!("phantom: {} phases, max displacement {max_u:.2} mm", ph.phases.len()))
}

fn register_stage(cfg: &PipelineConfig, out: &Path) -> Result<String> {
    let n = num_phases(out)?;
    let phases = (0..n)
        .map(|p| read_volume(out.join(paths::phase(p))))
        .collect::<Result<Vec<_>>>()?;
    let r = register_rank_constrained(&phases, 0, &cfg.registration.to_config()?)?;
    mkdir(&out.join(paths::registration_dir()))?;
    for (i, f) in r.fields.iter().enumerate() {
        write_field_as(f, out.join(paths::registered(i + 1)), Dtype::F64)?;
    }
    write_lowrank_trace_csv(&r.trace, out.join(paths::registration_dir()).join("trace.csv"))?;
    let sv = singular_values(&build_matrix(&r.fields)?)?;
    let svs: Vec<String> = sv.iter().map(|s| format!("{s:e}")).collect();
    write_text(
        &out.join(paths::registration_manifest()),
        &format!(
            "fields={}\nalpha={:e}\niterations={}\nsingular_values={}\n",
            r.fields.len(),
            r.alpha,
            r.trace.len().saturating_sub(1),
            svs.join(" ")
        ),
    )?;
    let ratio = if sv.len() > 2 && sv[1] > 0.0 { sv[2] / sv[1] } else { 0.0 };
    Ok(format!(
        "register: {} fields, alpha {:.4e}, sigma3/sigma2 {ratio:.4}",
        r.fields.len(),
        r.alpha
    ))
}

fn registered_fields(cfg: &PipelineConfig, out: &Path) -> Result<Vec<DisplacementField>> {
    (1..cfg.phantom.num_phases)
        .map(|p| read_field(out.join(paths::registered(p))))
        .collect()
}

/// Cumulative explained-variance table (`components,fraction_explained`).
pub fn explained_variance_table(sub: &MotionSubspace) -> String {
    let mut s = String::from("components,fraction_explained\n");
    for (i, f) in sub.explained_variance().iter().enumerate() {
        let _ = writeln!(s, "{},{f:.8}", i + 1);
    }
    s
}

fn subspace_stage(cfg: &PipelineConfig, out: &Path) -> Result<String> {
    let fields = registered_fields(cfg, out)?;
    let full = fit_pca(&fields, cfg.subspace.report_components)?;
    let sub = full.truncated(cfg.subspace.components);
    let dir = out.join(paths::subspace_dir());
    save_subspace(&sub, &dir)?;
    let table = explained_variance_table(&full);
    write_text(&dir.join("explained_variance.csv"), &table)?;
    let zero = DisplacementField::zeros(sub.geometry().clone());
    let source = std::iter::once(&zero)
        .chain(&fields)
        .map(|f| project(&sub, f))
        .collect::<Result<Vec<_>>>()?;
    write_weights_csv(&source, out.join(paths::source_weights()))?;
    Ok(format!("subspace: {} components kept\n{table}", sub.k()))
}

fn gendata_stage(cfg: &PipelineConfig, out: &Path) -> Result<String> {
    let reference = read_volume(out.join(paths::reference()))?;
    let sub = load_subspace(out.join(paths::subspace_dir()))?;
    let source = read_weights_csv(out.join(paths::source_weights()))?;
    let d = &cfg.dataset;
    let weights = sample_weight_grid(&sub, d.grid_n1, d.grid_n2, d.scale1, d.scale2, &source)?;
    let geom = projection_geometry(cfg)?;
    let m = generate_dataset(
        &reference,
        &sub,
        &weights,
        &geom,
        out.join(paths::dataset_dir()),
        &cfg.dataset_options(),
    )?;
    Ok(format!(
        "gendata: {} samples of {}×{}, corpus sha256 {}",
        m.samples, m.image_dims[0], m.image_dims[1], m.corpus_sha256
    ))
}

fn train_stage(cfg: &PipelineConfig, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<String> {
    let (manifest, data) = load_dataset(out.join(paths::dataset_dir()))?;
    let (train_ids, holdout_ids) = split_dataset(data.len(), cfg.dataset.train_fraction, cfg.seed)?;
    let mut model = build_model::<f32>(&cfg.regressor, cfg.seed)?;
    model.set_target_scale(manifest.target_scale.clone())?;
    let tcfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.training.clone()
    };
    let outcome = train(model, &data, &train_ids, &holdout_ids, &tcfg, |r| {
        progress(&format!(
            "epoch {:>4}  lr {:.2e}  train {:.5}  holdout {:.5}  {:.0}s",
            r.epoch, r.lr, r.train_loss, r.holdout_loss, r.seconds
        ))
    })?;
    mkdir(&out.join(paths::model_dir()))?;
    save_checkpoint(&outcome.best, out.join(paths::model()))?;
    write_train_log_csv(&outcome.log, out.join(paths::model_dir()).join("train_log.csv"))?;
    let first = &outcome.log[0];
    let best = &outcome.log[outcome.best_epoch];
    Ok(format!(
        "train: epoch-0 loss {:.9e}; best holdout {:.5} at epoch {}",
        first.train_loss, best.holdout_loss, outcome.best_epoch
    ))
}

fn load_model(out: &Path) -> Result<RegressorModel<f32>> {
    load_checkpoint(out.join(paths::model()))
}

fn infer_stage(cfg: &PipelineConfig, out: &Path, opts: &RunOptions) -> Result<String> {
    let path = opts
        .image
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("infer needs an input image".into()))?;
    let model = load_model(out)?;
    let img = read_projection(path)?;
    let img = if img.dims() == cfg.projection.det_dims {
        preprocess_with_bins(&img, cfg.dataset.bins)?
    } else if img.dims() == model.config().input_dims {
        img
    } else {
        return Err(Error::InvalidArgument(format!(
            "image is {:?}; expected a {:?} radiograph or a {:?} preprocessed image",
            img.dims(),
            cfg.projection.det_dims,
            model.config().input_dims
        )));
    };
    let w = model.infer(&to_real::<f32>(img.values()))?;
    let dir = out.join("infer");
    mkdir(&dir)?;
    write_weights_csv(std::slice::from_ref(&w), dir.join("weights.csv"))?;
    let ws: Vec<String> = w.iter().map(|v| format!("{v:.6}")).collect();
    Ok(format!("infer: {}", ws.join(" ")))
}

fn stack(images: &[ProjectionImage]) -> Vec<f32> {
    images.iter().flat_map(|i| to_real::<f32>(i.values())).collect()
}

fn eval_spline_stage(cfg: &PipelineConfig, out: &Path) -> Result<String> {
    let reference = read_volume(out.join(paths::reference()))?;
    let sub = load_subspace(out.join(paths::subspace_dir()))?;
    let source = read_weights_csv(out.join(paths::source_weights()))?;
    let model = load_model(out)?;
    let points = sample_spline(&BreathingSpline::new(source, cfg.spline.samples)?)?;
    let geom = projection_geometry(cfg)?;
    let opts = cfg.dataset_options();
    let images = points
        .par_iter()
        .map(|w| synthesize_image(&reference, &sub, w, &geom, &opts))
        .collect::<Result<Vec<_>>>()?;
    let rows = evaluate_weight_recovery(&sub, &model, &stack(&images), &points, None)?;
    let dir = out.join("eval_spline");
    mkdir(&dir)?;
    write_weights_csv(&points, dir.join("spline_weights.csv"))?;
    write_weight_recovery_csv(&rows, dir.join("weights_true_vs_inferred.csv"))?;
    let max = rows.iter().map(|r| r.model_max_mm).fold(0.0, f64::max);
    let mean = rows.iter().map(|r| r.model_mean_mm).sum::<f64>() / rows.len() as f64;
    write_text(
        &dir.join("summary.txt"),
        &format!("points={}\nmax_error_mm={max:.6}\nmean_error_mm={mean:.6}\n", rows.len()),
    )?;
    Ok(format!(
        "eval-spline: {} points, max deformation error {max:.3} mm, mean {mean:.3} mm",
        rows.len()
    ))
}

/// Per-phase comparison of the network-recovered deformation with the
/// ground truth (`truth`) and with the subspace projection of the truth
/// (`subspace`).
pub struct PhaseEvaluation {
    pub truth: Vec<PhaseErrorRow>,
    pub subspace: Vec<PhaseErrorRow>,
    pub weights: Vec<WeightRecoveryRow>,
}

fn eval_phases_stage(cfg: &PipelineConfig, out: &Path) -> Result<String> {
    let n = num_phases(out)?;
    let reference = read_volume(out.join(paths::reference()))?;
    let sub = load_subspace(out.join(paths::subspace_dir()))?;
    let model = load_model(out)?;
    let geom = projection_geometry(cfg)?;
    let truth = (1..n)
        .map(|p| read_field(out.join(paths::truth(p))))
        .collect::<Result<Vec<_>>>()?;
    let images = (1..n)
        .into_par_iter()
        .map(|p| radiograph(&read_volume(out.join(paths::phase(p)))?, &geom, cfg))
        .collect::<Result<Vec<_>>>()?;
    let true_w = truth.iter().map(|u| project(&sub, u)).collect::<Result<Vec<_>>>()?;
    let weights = evaluate_weight_recovery(&sub, &model, &stack(&images), &true_w, Some(&truth))?;
    let body = density_mask(&reference, cfg.eval.body_threshold);
    let dir = out.join("eval_phases");
    mkdir(&dir)?;
    let mut ev = PhaseEvaluation {
        truth: Vec::new(),
        subspace: Vec::new(),
        weights,
    };
    for (i, row) in ev.weights.iter().enumerate() {
        let p = i + 1;
        let pred = reconstruct(&sub, &row.inferred_weights)?;
        let rep = deformation_distance_error(&truth[i], &pred)?;
        write_error_map(&rep, &dir, p)?;
        ev.truth.push(phase_error_row(p, &rep, &body)?);
        let proj = deformation_distance_error(&reconstruct(&sub, &row.true_weights)?, &pred)?;
        ev.subspace.push(phase_error_row(p, &proj, &body)?);
    }
    write_per_phase_csv(&ev.truth, dir.join("per_phase_errors.csv"))?;
    write_per_phase_csv(&ev.subspace, dir.join("per_phase_subspace_errors.csv"))?;
    write_weight_recovery_csv(&ev.weights, dir.join("weights_true_vs_inferred.csv"))?;
    let mut s = String::from("eval-phases:\nphase  avg_mm  max_mm\n");
    for r in &ev.truth {
        let _ = writeln!(s, "{:>5}  {:.3}  {:.3}", r.phase, r.avg_mm, r.max_mm);
    }
    Ok(s)
}

fn bench_stage(cfg: &PipelineConfig, out: &Path) -> Result<String> {
    let model = load_model(out)?;
    let (_, data) = load_dataset(out.join(paths::dataset_dir()))?;
    let n = data.len().min(64);
    let images = to_real::<f32>(&data.images[..n * data.pixels()]);
    let rows = throughput_report(&model, &images, &cfg.eval.throughput_batch_sizes, cfg.eval.throughput_repeats)?;
    let dir = out.join("bench");
    mkdir(&dir)?;
    write_throughput_csv(&rows, dir.join("throughput.csv"))?;
    let mut s = String::from("bench: batch  images/s  latency_ms  cv\n");
    for r in &rows {
        let _ = writeln!(
            s,
            "{:>12}  {:>8.1}  {:>10.3}  {:.3}",
            r.batch_size, r.images_per_second, r.latency_mean_ms, r.per_image_cv
        );
    }
    Ok(s)
}

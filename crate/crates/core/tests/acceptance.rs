//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. The pipeline criteria share one run directory
//! under the cargo target tmpdir.

mod common;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use lungtrack_core::config::PipelineConfig;
use lungtrack_core::drr::ProjectionImage;
use lungtrack_core::eval::read_per_phase_csv;
use lungtrack_core::lowrank::{build_matrix, register_rank_constrained, singular_values};
use lungtrack_core::pipeline::{paths, run_stage, RunOptions, Stage};
use lungtrack_core::preprocess::{histogram_equalize, preprocess_with_bins};
use lungtrack_core::registration::RankWeight;
use lungtrack_core::volume::read_volume;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(t: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    if t.as_secs_f64() < limit_s {
        Ok(())
    } else {
        Err(format!("{what} took {:.0} s (limit {limit_s:.0} s)", t.as_secs_f64()))
    }
}

fn stage(s: Stage, cfg: &PipelineConfig, out: &Path) -> Result<Duration, String> {
    let t = Instant::now();
    run_stage(s, cfg, out, &RunOptions::default(), &mut |_| {}).map_err(|e| format!("{}: {e}", s.name()))?;
    Ok(t.elapsed())
}

fn read_kv(path: &Path) -> Result<HashMap<String, String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn num(s: &str) -> Result<f64, String> {
    s.parse().map_err(|_| format!("not a number: `{s}`"))
}

fn c1() -> Outcome {
    let t = Instant::now();
    let worst = (0..5)
        .map(|s| common::registration_gradient_check(500 + s, 50).max_rel_error)
        .fold(0.0, f64::max);
    within(t.elapsed(), 60.0, "gradient checks")?;
    check(worst < 1e-4, format!("worst relative error {worst:.2e} over 5×50 components"))
}

fn c2() -> Outcome {
    let t = Instant::now();
    let (change, min_j) = common::fisher_rao_invariance(64, 11);
    within(t.elapsed(), 60.0, "invariance check")?;
    check(
        change < 0.02 && min_j > 0.0,
        format!("relative change {:.3}% (min Jacobian {min_j:.3})", 100.0 * change),
    )
}

fn c3() -> Outcome {
    let c = common::svd_oracle(20, 21);
    check(
        c.sv_rel < 1e-8 && c.prox_rel < 1e-8 && c.expansive_pairs == 0,
        format!(
            "singular values {:.1e}, prox {:.1e}, expansive pairs {}/{}",
            c.sv_rel, c.prox_rel, c.expansive_pairs, c.pairs
        ),
    )
}

struct Run {
    cfg: PipelineConfig,
    out: PathBuf,
}

fn c4(run: &Run) -> Outcome {
    let t = stage(Stage::Phantom, &run.cfg, &run.out)?;
    let t_reg = stage(Stage::Register, &run.cfg, &run.out)?;
    stage(Stage::Subspace, &run.cfg, &run.out)?;
    within(t + t_reg, 1800.0, "rank-constrained registration")?;
    let kv = read_kv(&run.out.join(paths::registration_manifest()))?;
    let sv: Vec<f64> = kv
        .get("singular_values")
        .ok_or("no singular values recorded")?
        .split_whitespace()
        .map(num)
        .collect::<Result<_, _>>()?;
    let ratio = sv[2] / sv[1];
    let phases = (0..run.cfg.phantom.num_phases)
        .map(|p| read_volume(run.out.join(paths::phase(p))))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let mut cfg0 = run.cfg.registration.to_config().map_err(|e| e.to_string())?;
    cfg0.rank_weight = RankWeight::Fixed(0.0);
    let unconstrained = register_rank_constrained(&phases, 0, &cfg0).map_err(|e| e.to_string())?;
    let sv0 = singular_values(&build_matrix(&unconstrained.fields).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let ratio0 = sv0[2] / sv0[1];
    let ev = csv_rows(&run.out.join(paths::subspace_dir()).join("explained_variance.csv"))?;
    let two = num(&ev.get(1).ok_or("explained variance table too short")?[1])?;
    check(
        ratio <= 0.5 * ratio0 && two >= 0.99,
        format!(
            "σ3/σ2 {ratio:.4} vs {ratio0:.4} at α=0; 2 components explain {two:.4}; registration {:.0} s",
            t_reg.as_secs_f64()
        ),
    )
}

fn c5() -> Outcome {
    let (v, change) = common::drr_cube();
    check(
        (v - 100.0).abs() <= 0.5 && change < 1e-3,
        format!("central ray {v:.4} mm, step-halving change {:.2e}", change),
    )
}

fn c6() -> Outcome {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut in_range = true;
    for _ in 0..20 {
        let v: Vec<f64> = (0..64 * 48).map(|_| rng.random_range(0.0..40.0)).collect();
        let img = ProjectionImage::new([64, 48], v.clone()).unwrap();
        let (a, b) = (rng.random_range(0.01..50.0), rng.random_range(-100.0..100.0));
        let t = ProjectionImage::new([64, 48], v.iter().map(|x| a * x + b).collect()).unwrap();
        let p = preprocess_with_bins(&img, 256).map_err(|e| e.to_string())?;
        let q = preprocess_with_bins(&t, 256).map_err(|e| e.to_string())?;
        in_range &= p.values().iter().all(|x| (0.0..=1.0).contains(x));
        for (x, y) in p.values().iter().zip(q.values()) {
            worst = worst.max((x - y).abs());
        }
    }
    let two = histogram_equalize(&ProjectionImage::new([2, 2], vec![0.0, 1.0, 1.0, 1.0]).unwrap(), 256)
        .map_err(|e| e.to_string())?;
    let exact = two.values() == [0.25, 1.0, 1.0, 1.0];
    check(
        in_range && worst <= 1e-9 && exact,
        format!("in [0,1]: {in_range}; affine deviation {worst:.1e}; two-level exact: {exact}"),
    )
}

fn c7() -> Outcome {
    let t = Instant::now();
    let c = common::regressor_gradient_check(3);
    within(t.elapsed(), 300.0, "finite differences")?;
    check(
        c.max_rel_error < 1e-5,
        format!(
            "worst relative error {:.2e}; {} of {} parameters checked, {} at kinks",
            c.max_rel_error, c.checked, c.total, c.skipped
        ),
    )
}

fn c8() -> Outcome {
    let t = Instant::now();
    let (loss, epoch) = common::overfit_toy(500);
    within(t.elapsed(), 300.0, "overfit run")?;
    check(loss < 1e-2, format!("best training loss {loss:.2e} at epoch {epoch}"))
}

fn c9(run: &Run) -> Outcome {
    if !run.out.join(paths::subspace_dir()).join("subspace.txt").exists() {
        return Err("no subspace (registration stage did not complete)".into());
    }
    let mut total = Duration::ZERO;
    for s in [Stage::Gendata, Stage::Train, Stage::EvalSpline] {
        total += stage(s, &run.cfg, &run.out)?;
    }
    within(total, 7200.0, "data generation, training and evaluation")?;
    let kv = read_kv(&run.out.join("eval_spline/summary.txt"))?;
    let max = num(kv.get("max_error_mm").ok_or("no max error")?)?;
    let mean = num(kv.get("mean_error_mm").ok_or("no mean error")?)?;
    check(
        max <= 1.5,
        format!(
            "max {max:.3} mm, mean {mean:.3} mm over {} spline points (patient-data reference 1.22 mm); {:.0} s",
            run.cfg.spline.samples,
            total.as_secs_f64()
        ),
    )
}

fn c10(run: &Run) -> Outcome {
    if !run.out.join(paths::model()).exists() {
        return Err("no trained model".into());
    }
    stage(Stage::EvalPhases, &run.cfg, &run.out)?;
    let rows = read_per_phase_csv(run.out.join("eval_phases/per_phase_errors.csv")).map_err(|e| e.to_string())?;
    let h = run.cfg.phantom.spacing;
    let diag = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
    let worst_avg = rows.iter().map(|r| r.avg_mm).fold(0.0, f64::max);
    let worst_max = rows.iter().map(|r| r.max_mm).fold(0.0, f64::max);
    check(
        rows.len() == run.cfg.phantom.num_phases - 1 && worst_avg <= 1.0 && worst_max <= diag,
        format!(
            "{} phases; worst mean {worst_avg:.3} mm, worst max {worst_max:.3} mm (limit {diag:.2})",
            rows.len()
        ),
    )
}

fn c11(run: &Run) -> Outcome {
    if !run.out.join(paths::model()).exists() {
        return Err("no trained model".into());
    }
    let t = stage(Stage::Bench, &run.cfg, &run.out)?;
    within(t, 60.0, "throughput report")?;
    let rows = csv_rows(&run.out.join("bench/throughput.csv"))?;
    let mut parsed = Vec::new();
    for r in &rows {
        parsed.push((num(&r[0])?, num(&r[2])?, num(&r[5])?));
    }
    let worst_cv = parsed.iter().map(|r| r.2).fold(0.0, f64::max);
    let first = parsed.first().ok_or("empty report")?;
    let last = parsed.last().ok_or("empty report")?;
    let rates: Vec<String> = parsed.iter().map(|r| format!("{}: {:.0}/s", r.0, r.1)).collect();
    check(
        worst_cv < 0.2 && last.1 >= first.1,
        format!("worst CV {worst_cv:.3}; {} (reference 1113/s)", rates.join(", ")),
    )
}

fn c12(run: &Run) -> Outcome {
    let shard = run.out.join(paths::dataset_dir()).join("shard.bin");
    if !shard.exists() {
        return Err("first corpus missing".into());
    }
    let again = run.out.with_file_name("acceptance_rerun");
    let _ = std::fs::remove_dir_all(&again);
    for d in [paths::phantom_dir(), paths::subspace_dir()] {
        let (from, to) = (run.out.join(&d), again.join(&d));
        std::fs::create_dir_all(&to).map_err(|e| e.to_string())?;
        for e in std::fs::read_dir(&from).map_err(|e| e.to_string())? {
            let e = e.map_err(|e| e.to_string())?;
            std::fs::copy(e.path(), to.join(e.file_name())).map_err(|e| e.to_string())?;
        }
    }
    stage(Stage::Gendata, &run.cfg, &again)?;
    let same = |rel: &str| -> Result<bool, String> {
        let a = std::fs::read(run.out.join(paths::dataset_dir()).join(rel)).map_err(|e| e.to_string())?;
        let b = std::fs::read(again.join(paths::dataset_dir()).join(rel)).map_err(|e| e.to_string())?;
        Ok(a == b)
    };
    let corpus = same("shard.bin")? && same("targets.csv")? && same("manifest.txt")? && same("samples/sample_000777.rvf")?;
    // Epoch 0 does not depend on the epoch budget, so one epoch suffices.
    let mut one = run.cfg.clone();
    one.training.epochs = 1;
    stage(Stage::Train, &one, &again)?;
    let loss0 = |dir: &Path| -> Result<String, String> {
        let rows = csv_rows(&dir.join(paths::model_dir()).join("train_log.csv"))?;
        Ok(rows.first().ok_or("empty training log")?[2].clone())
    };
    let (a, b) = (loss0(&run.out)?, loss0(&again)?);
    check(
        corpus && a == b,
        format!("corpus byte-identical: {corpus}; epoch-0 loss {a} vs {b}"),
    )
}

fn main() {
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&out);
    let run = Run {
        cfg: PipelineConfig::default(),
        out,
    };
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, r: Outcome| {
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} criterion {n:>2} ({name}): {detail}");
        results.push((n, name, r));
    };
    record(1, "registration gradient oracle", c1());
    record(2, "Fisher-Rao invariance", c2());
    record(3, "SVT oracle", c3());
    record(4, "rank discovery", c4(&run));
    record(5, "DRR cube", c5());
    record(6, "preprocessing contracts", c6());
    record(7, "regressor gradient oracle", c7());
    record(8, "overfit sanity", c8());
    record(9, "spline weight recovery", c9(&run));
    record(10, "per-phase deformation error", c10(&run));
    record(11, "constant-time inference", c11(&run));
    record(12, "determinism", c12(&run));
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} passed in {:.0} s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}

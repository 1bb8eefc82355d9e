//! Pipeline configuration: one TOML file with a section per stage. Unknown
//! keys are rejected; omitted keys take the defaults written out by
//! [`PipelineConfig::default_toml`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetOptions;
use crate::drr::ProjectionSetup;
use crate::error::{Error, Result};
use crate::phantom::PhantomConfig;
use crate::registration::{PenaltyWeight, RankWeight, RegistrationConfig};
use crate::regressor::{RegressorConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationSection {
    pub penalty_weight: f64,
    /// `"auto"`: `rank_value` is a fraction of the initial data energy;
    /// `"fixed"`: `rank_value` is α itself.
    pub rank_mode: String,
    pub rank_value: f64,
    pub sobolev_a: f64,
    pub sobolev_b: f64,
    pub step_size: f64,
    pub max_iters: usize,
    pub energy_rel_tol: f64,
    pub multiresolution: bool,
}

impl Default for RegistrationSection {
    fn default() -> Self {
        let d = RegistrationConfig::default();
        let PenaltyWeight::Constant(f) = d.penalty_weight else {
            unreachable!("default penalty is constant")
        };
        let RankWeight::Auto { fraction } = d.rank_weight else {
            unreachable!("default rank weight is automatic")
        };
        Self {
            penalty_weight: f,
            rank_mode: "auto".into(),
            rank_value: fraction,
            sobolev_a: d.sobolev_a,
            sobolev_b: d.sobolev_b,
            step_size: d.step_size,
            max_iters: d.max_iters,
            energy_rel_tol: d.energy_rel_tol,
            multiresolution: d.multiresolution,
        }
    }
}

impl RegistrationSection {
    pub fn to_config(&self) -> Result<RegistrationConfig> {
        let rank_weight = match self.rank_mode.as_str() {
            "auto" => RankWeight::Auto {
                fraction: self.rank_value,
            },
            "fixed" => RankWeight::Fixed(self.rank_value),
            other => {
                return Err(Error::Config(format!(
                    "registration.rank_mode must be \"auto\" or \"fixed\", got \"{other}\""
                )))
            }
        };
        let cfg = RegistrationConfig {
            penalty_weight: PenaltyWeight::Constant(self.penalty_weight),
            rank_weight,
            sobolev_a: self.sobolev_a,
            sobolev_b: self.sobolev_b,
            step_size: self.step_size,
            max_iters: self.max_iters,
            energy_rel_tol: self.energy_rel_tol,
            multiresolution: self.multiresolution,
        };
        cfg.validate().map_err(|e| Error::Config(format!("registration: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubspaceSection {
    /// Components kept for data generation and regression.
    pub components: usize,
    /// Components listed in the explained-variance report.
    pub report_components: usize,
}

impl Default for SubspaceSection {
    fn default() -> Self {
        Self {
            components: 2,
            report_components: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub grid_n1: usize,
    pub grid_n2: usize,
    /// Grid half-widths as multiples of the largest source weight magnitude.
    pub scale1: f64,
    pub scale2: f64,
    /// Ray step in mm; 0 selects half the smallest voxel spacing.
    pub step_mm: f64,
    pub bins: usize,
    pub invert_tol_mm: f64,
    pub invert_max_iters: usize,
    pub write_shard: bool,
    pub train_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            grid_n1: 40,
            grid_n2: 30,
            scale1: 1.5,
            scale2: 1.1,
            step_mm: 0.0,
            bins: 256,
            invert_tol_mm: 1e-4,
            invert_max_iters: 200,
            write_shard: true,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplineSection {
    pub samples: usize,
}

impl Default for SplineSection {
    fn default() -> Self {
        Self { samples: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Reference density above which a voxel counts as body.
    pub body_threshold: f64,
    pub throughput_batch_sizes: Vec<usize>,
    pub throughput_repeats: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            body_threshold: 0.5,
            throughput_batch_sizes: vec![1, 8, 64],
            throughput_repeats: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seeds model initialisation, shuffling and the data split.
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub phantom: PhantomConfig,
    pub registration: RegistrationSection,
    pub subspace: SubspaceSection,
    pub projection: ProjectionSetup,
    pub dataset: DatasetSection,
    pub regressor: RegressorConfig,
    pub training: TrainConfig,
    pub spline: SplineSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    /// Desk-scale defaults: 128×96 detector at 1.7 mm (64×48 network input
    /// after pooling), 40×30 weight grid, 50 epochs in batches of 64.
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            phantom: PhantomConfig::default(),
            registration: RegistrationSection::default(),
            subspace: SubspaceSection::default(),
            projection: ProjectionSetup {
                det_dims: [128, 96],
                det_spacing: [1.7, 1.7],
                ..ProjectionSetup::default()
            },
            dataset: DatasetSection::default(),
            regressor: RegressorConfig::default(),
            training: TrainConfig {
                epochs: 50,
                batch_size: 64,
                ..TrainConfig::default()
            },
            spline: SplineSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses `text` as overrides of the defaults: any key left out, even
    /// inside a section that is present, keeps its default value.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::default()).expect("config serialises");
        merge(&mut base, user);
        let cfg: PipelineConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// The default configuration with every key written out.
    pub fn default_toml() -> String {
        Self::default().to_toml()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        self.phantom.validate().map_err(|e| Error::Config(format!("phantom: {e}")))?;
        self.registration.to_config()?;
        if self.subspace.components < 2 || self.subspace.report_components < self.subspace.components {
            return cfg_err("subspace: need 2 ≤ components ≤ report_components".into());
        }
        let [nu, nv] = self.projection.det_dims;
        if [nu / 2, nv / 2] != self.regressor.input_dims {
            return cfg_err(format!(
                "regressor.input_dims {:?} must be half the detector size {:?}",
                self.regressor.input_dims, self.projection.det_dims
            ));
        }
        if self.regressor.output_dim != self.subspace.components {
            return cfg_err("regressor.output_dim must equal subspace.components".into());
        }
        self.regressor.validate().map_err(|e| Error::Config(format!("regressor: {e}")))?;
        self.training.validate().map_err(|e| Error::Config(format!("training: {e}")))?;
        let d = &self.dataset;
        if d.grid_n1 < 2 || d.grid_n2 < 2 || !(d.scale1 > 0.0 && d.scale2 > 0.0) || d.bins == 0 {
            return cfg_err("dataset: grid sizes ≥ 2, positive scales and bins required".into());
        }
        if !(d.step_mm >= 0.0) || !(d.invert_tol_mm > 0.0) || !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return cfg_err("dataset: step ≥ 0, tolerance > 0 and train fraction in (0, 1) required".into());
        }
        if self.spline.samples < 1 {
            return cfg_err("spline: samples must be ≥ 1".into());
        }
        if self.eval.throughput_batch_sizes.is_empty()
            || self.eval.throughput_batch_sizes.contains(&0)
            || self.eval.throughput_repeats < 2
        {
            return cfg_err("eval: non-empty positive batch sizes and ≥ 2 repeats required".into());
        }
        Ok(())
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        let step = if self.dataset.step_mm > 0.0 {
            self.dataset.step_mm
        } else {
            self.phantom
                .geometry()
                .map(|g| crate::drr::default_step(&g))
                .unwrap_or(1.0)
        };
        DatasetOptions {
            step_mm: step,
            bins: self.dataset.bins,
            invert_tol: self.dataset.invert_tol_mm,
            invert_max_iters: self.dataset.invert_max_iters,
            write_shard: self.dataset.write_shard,
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves `p` against the directory holding the config file.
pub fn resolve_relative(config_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let text = PipelineConfig::default_toml();
        let cfg = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert!(text.contains("[registration]") && text.contains("plateau_patience_epochs"));
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(PipelineConfig::from_toml("[training]\nepoch = 3\n").is_err());
        assert!(PipelineConfig::from_toml("bogus = 1\n").is_err());
        assert!(PipelineConfig::from_toml("[registration]\nrank_mode = \"sometimes\"\n").is_err());
        let cfg = PipelineConfig::from_toml("seed = 9\n[training]\nepochs = 3\n").unwrap();
        assert_eq!((cfg.seed, cfg.training.epochs, cfg.training.batch_size), (9, 3, 64));
    }
}

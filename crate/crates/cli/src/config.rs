//! Flat TOML experiment configuration.
//!
//! Every key is optional and unknown keys are rejected. [`ExperimentConfig::resolve`]
//! turns a parsed file into a dataset and a training configuration;
//! [`ExperimentConfig::resolved`] materialises every default so the echo
//! written next to the results reproduces the run on its own.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use chatty_core::data::{gen_blobs, gen_moons, BlobSpec, DomainPair, MoonsSpec};
use chatty_core::losses::{ClassInfo, LossWeights, DEFAULT_TEMPERATURE};
use chatty_core::model::{DiscInput, TransportMode};
use chatty_core::train::{
    default_lambda2, Architecture, GrlSchedule, Preset, SingleTransportLoss, TlVariant, TrainConfig,
};
use chatty_core::Matrix;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Moons,
    Blobs,
    /// A CSV file written by `DomainPair::save_csv`.
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // dataset
    pub dataset: Dataset,
    pub data_seed: u64,
    pub data_path: Option<PathBuf>,
    /// Moons: samples per domain.
    pub n: usize,
    pub rotation_deg: f64,
    pub noise: f64,
    pub standardize: bool,
    pub classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub translation: Vec<f64>,

    // model
    pub hidden: Vec<usize>,
    pub disc_hidden: usize,
    pub mode: TransportMode,
    pub lambda: f64,
    pub disc_input: DiscInput,

    // training
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    /// Defaults to the class-count heuristic, or the preset when one is set.
    pub lambda2: Option<f64>,
    pub preset: Option<Preset>,
    pub temperature: f64,
    pub mcc: bool,
    pub tl_variant: TlVariant,
    pub single_tl: SingleTransportLoss,
    pub class_info: Option<Vec<Vec<f64>>>,
    pub confusion_embed: Option<Vec<Vec<f64>>>,
    pub grl_scale: f64,
    pub grl_schedule: GrlSchedule,
    pub alternating: bool,
    pub seed: u64,
    pub eval_every: usize,
    pub snapshot_iters: Vec<usize>,
    pub snapshot_every: usize,

    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = Architecture::default();
        ExperimentConfig {
            dataset: Dataset::Moons,
            data_seed: 0,
            data_path: None,
            n: 600,
            rotation_deg: 30.0,
            noise: 0.1,
            standardize: true,
            classes: 3,
            n_per_class: 200,
            dim: 2,
            translation: Vec::new(),
            hidden: a.hidden,
            disc_hidden: a.disc_hidden,
            mode: a.mode,
            lambda: a.lambda,
            disc_input: a.disc_input,
            lr: t.lr,
            momentum: t.momentum,
            iterations: t.iterations,
            batch_size: t.batch_size,
            lambda1: t.weights.lambda1,
            lambda2: None,
            preset: None,
            temperature: DEFAULT_TEMPERATURE,
            mcc: t.mcc_enabled,
            tl_variant: t.tl_variant,
            single_tl: t.single_tl,
            class_info: None,
            confusion_embed: None,
            grl_scale: t.grl_scale,
            grl_schedule: t.grl_schedule,
            alternating: t.alternating,
            seed: t.seed,
            eval_every: t.eval_every,
            snapshot_iters: t.snapshot_iters,
            snapshot_every: t.snapshot_every,
            out_dir: PathBuf::from("chatty-out"),
        }
    }
}

fn matrix_from_nested(name: &str, rows: &[Vec<f64>]) -> Result<Matrix, CliError> {
    Matrix::from_rows(rows).map_err(|e| CliError::config(format!("{name}: {e}")))
}

fn nested_from_matrix(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are all representable in TOML")
    }

    pub fn build_dataset(&self) -> Result<DomainPair, CliError> {
        let pair = match self.dataset {
            Dataset::Moons => gen_moons(
                &MoonsSpec {
                    n: self.n,
                    rotation_deg: self.rotation_deg,
                    noise: self.noise,
                    standardize: self.standardize,
                },
                self.data_seed,
            ),
            Dataset::Blobs => gen_blobs(
                &BlobSpec {
                    classes: self.classes,
                    n_per_class: self.n_per_class,
                    dim: self.dim,
                    rotation_deg: self.rotation_deg,
                    translation: self.translation.clone(),
                    noise: self.noise,
                    standardize: self.standardize,
                },
                self.data_seed,
            ),
            Dataset::Csv => {
                let path = self
                    .data_path
                    .as_ref()
                    .ok_or_else(|| CliError::config("dataset = \"csv\" needs data_path"))?;
                DomainPair::load_csv(path)
            }
        };
        pair.map_err(|e| CliError::config(format!("dataset: {e}")))
    }

    /// Transport weight after applying the preset or the class-count default.
    pub fn effective_lambda2(&self, classes: usize) -> Result<f64, CliError> {
        match (self.lambda2, self.preset) {
            (Some(l), _) => Ok(l),
            (None, Some(p)) => Ok(p.lambda2()),
            (None, None) => {
                default_lambda2(classes).map_err(|e| CliError::config(format!("lambda2: {e}")))
            }
        }
    }

    pub fn train_config(&self, classes: usize) -> Result<TrainConfig, CliError> {
        let class_info = match &self.class_info {
            Some(rows) => ClassInfo::Custom(matrix_from_nested("class_info", rows)?),
            None => ClassInfo::Identity,
        };
        let confusion_embed = self
            .confusion_embed
            .as_ref()
            .map(|rows| matrix_from_nested("confusion_embed", rows))
            .transpose()?;
        let config = TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            iterations: self.iterations,
            batch_size: self.batch_size,
            arch: Architecture {
                hidden: self.hidden.clone(),
                disc_hidden: self.disc_hidden,
                mode: self.mode,
                lambda: self.lambda,
                disc_input: self.disc_input,
            },
            weights: LossWeights {
                lambda1: self.lambda1,
                lambda2: self.effective_lambda2(classes)?,
                temperature: self.temperature,
                class_info,
                confusion_embed,
            },
            grl_scale: self.grl_scale,
            grl_schedule: self.grl_schedule,
            mcc_enabled: self.mcc,
            tl_variant: self.tl_variant,
            single_tl: self.single_tl,
            alternating: self.alternating,
            seed: self.seed,
            eval_every: self.eval_every,
            snapshot_iters: self.snapshot_iters.clone(),
            snapshot_every: self.snapshot_every,
        };
        config
            .validate(classes)
            .map_err(|e| CliError::config(e.to_string()))?;
        config
            .arch
            .model_spec(1, classes)
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        Ok(config)
    }

    /// Dataset plus training configuration.
    pub fn resolve(&self) -> Result<(DomainPair, TrainConfig), CliError> {
        let pair = self.build_dataset()?;
        let config = self.train_config(pair.classes)?;
        Ok((pair, config))
    }

    /// Copy with every derived default written out.
    pub fn resolved(&self, classes: usize) -> Result<Self, CliError> {
        let t = self.train_config(classes)?;
        let mut out = self.clone();
        out.lambda2 = Some(t.weights.lambda2);
        out.confusion_embed = t.weights.confusion_embed.as_ref().map(nested_from_matrix);
        Ok(out)
    }
}

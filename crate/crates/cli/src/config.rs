use std::path::Path;

use madapt::adapt::AdaptConfig;
use madapt::experiments::ExperimentPlan;
use madapt::regressor::Activation;
use madapt::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub domain: String,
    pub batches: usize,
    pub per_batch: usize,
    pub detector_sigma: Option<f64>,
    pub occlusion_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plan = ExperimentPlan::default();
        Self {
            seed: None,
            data: DataConfig::default(),
            model: ModelConfig {
                hidden: plan.hidden,
                activation: Activation::default(),
            },
            train: plan.train,
            adapt: plan.adapt,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domain: "train".into(),
            batches: 50,
            per_batch: 40,
            detector_sigma: None,
            occlusion_prob: None,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        RunConfig::default().model
    }
}

pub fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => parse_toml(p),
        None => Ok(RunConfig::default()),
    }
}

const RUN_SCHEMA: &str = "\
# Run configuration (--config FILE) for gen-data, pretrain, meta-train, adapt, eval.
# Every key is optional; command-line flags override file values.
#
# seed                      u64     overridden by --seed; MADAPT_SEED applies when neither is set
# [data]
# domain                    string  train | indoor-like | in-the-wild-like
# batches                   usize   number of batches B
# per_batch                 usize   samples per batch M
# detector_sigma            f64     override the domain's detector noise
# occlusion_prob            f64     override the domain's occlusion probability
# [model]
# hidden                    [usize] hidden layer widths
# activation                string  tanh | relu
# [train]
# alpha                     f64 > 0 inner learning rate
# beta_lr                   f64 > 0 outer learning rate
# epochs                    usize
# batch_size                usize   samples per outer step
# inner_steps               usize   inner steps per sample k (>= 1)
# optimizer                 string  adam | sgd
# adam_beta1, adam_beta2    f64 in [0, 1)
# seed                      u64     overwritten by the resolved run seed
# [train.loss]
# lambda_2d, lambda_3d      f64 >= 0, not both zero
# x_mode                    string  joints3d | params_identity | both
# confidence_weighting      bool
# [adapt]
# max_steps                 usize   maximum test-time steps m
# alpha                     f64 >= 0 test-time learning rate
# early_stop_rel_tol        f64 > 0 relative loss change that stops adaptation
# mode                      string  eft | dual | none
";

const PLAN_SCHEMA: &str = "\
# Experiment plan (experiment --plan FILE). Missing keys take the values below.
#
# name                      string
# kind                      string  ablation | step_curves | detector | ood | lr_grid | inner_steps
# train_domain, test_domain string  domain preset names
# methods                   [string] none | eft | meta_only | meta_dual
# seeds                     [u64]
# train_batches             usize   training set = train_batches x train.batch_size
# test_samples              usize
# hidden                    [usize]
# detector_sigmas           [f64]   detector experiment
# lr_grid                   [[alpha, beta_lr]] learning-rate grid
# inner_steps_grid          [usize] inner-step grid
# [train], [adapt]          as in the run configuration
";

pub fn help_config() -> String {
    let run = toml::to_string(&RunConfig::default()).expect("config serializes");
    let plan = toml::to_string(&ExperimentPlan::default()).expect("plan serializes");
    format!("{RUN_SCHEMA}\n{run}\n{PLAN_SCHEMA}\n{plan}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), RunConfig::default());
        let text = toml::to_string(&ExperimentPlan::default()).unwrap();
        assert_eq!(toml::from_str::<ExperimentPlan>(&text).unwrap(), ExperimentPlan::default());
    }

    #[test]
    fn unknown_field_is_named() {
        let err = toml::from_str::<RunConfig>("[train]\nalpah = 1.0\n").unwrap_err();
        assert!(err.message().contains("alpah"), "{}", err.message());
    }

    #[test]
    fn help_lists_every_section() {
        let help = help_config();
        for key in ["[data]", "[model]", "[train]", "[train.loss]", "[adapt]", "lr_grid"] {
            assert!(help.contains(key), "{key}");
        }
    }
}

//! Config file handling: flags > config file > defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tenconv::training::TrainConfig;
use tenconv::Real;

use crate::{CliResult, Common, Fail, TrainArgs};

/// Every key a config file may set. Unknown keys are rejected.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    pub spec: Option<PathBuf>,
    pub dataset: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub subset: Option<usize>,
    pub learning_rate: Option<Real>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub eval_batch_size: Option<usize>,
    pub epsilons: Option<Vec<Real>>,
    pub attack_batch_size: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Fail::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Fail::config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved training run, written as the run's config snapshot.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub model: Option<String>,
    pub spec: Option<PathBuf>,
    pub dataset: String,
    pub data_dir: Option<PathBuf>,
    pub out: PathBuf,
    pub threads: usize,
    pub subset: Option<usize>,
    pub train: TrainConfig,
}

impl Resolved {
    pub fn train(file: &FileConfig, common: &Common, a: &TrainArgs) -> CliResult<Self> {
        let d = TrainConfig::default();
        // a spec or model named on the command line replaces both file keys
        let (model, spec) = if a.choice.model.is_some() || a.choice.spec.is_some() {
            (a.choice.model.clone(), a.choice.spec.clone())
        } else {
            (file.model.clone(), file.spec.clone())
        };
        let train = TrainConfig {
            learning_rate: a.lr.or(file.learning_rate).unwrap_or(d.learning_rate),
            batch_size: a.batch.or(file.batch_size).unwrap_or(d.batch_size),
            max_epochs: a.epochs.or(file.max_epochs).unwrap_or(d.max_epochs),
            patience: a.patience.or(file.patience).unwrap_or(d.patience),
            seed: a.seed.or(file.seed).unwrap_or(d.seed),
            eval_batch_size: file.eval_batch_size.unwrap_or(d.eval_batch_size),
        };
        train.validate()?;
        let dataset = a
            .dataset
            .clone()
            .or_else(|| file.dataset.clone())
            .ok_or_else(|| Fail::config("pass --dataset (mnist, cifar10, cifar100, synthetic)"))?;
        Ok(Resolved {
            model,
            spec,
            dataset,
            data_dir: common.data_dir.clone().or_else(|| file.data_dir.clone()),
            out: a.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("run")),
            threads: common.threads.or(file.threads).unwrap_or(1),
            subset: a.subset.or(file.subset),
            train,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BuildInfo {
    pub version: &'static str,
    pub git: &'static str,
    pub parallel_feature: bool,
    pub element: &'static str,
}

pub fn build_info() -> BuildInfo {
    BuildInfo {
        version: env!("CARGO_PKG_VERSION"),
        git: env!("TENCONV_GIT_REV"),
        parallel_feature: tenconv::exec::PARALLEL_AVAILABLE,
        element: std::any::type_name::<Real>(),
    }
}

//! Application configuration: one strict JSON file mirroring the training,
//! guidance, dataset, and oracle sections, with a content hash embedded in
//! every artifact a run produces.
//!
//! Unknown keys are rejected. Only two environment variables apply:
//! `AGERESTORE_ROOT` overrides the workspace root and `AGERESTORE_THREADS`
//! hints the worker-pool size.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::model::ModelConfig;
use crate::synthface::{OracleTrainConfig, Split};
use crate::training::TrainConfig;
use crate::util::sha256_hex;

pub const ENV_ROOT: &str = "AGERESTORE_ROOT";
pub const ENV_THREADS: &str = "AGERESTORE_THREADS";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub train_ids: usize,
    pub train_imgs_per_id: usize,
    pub test_same_ids: usize,
    pub test_same_imgs_per_id: usize,
    pub test_cross_ids: usize,
    /// Minimum |gt age - reference age| for the cross-age split.
    pub age_gap: f64,
    /// Identities per age-gap bucket in the bucket ablation.
    pub bucket_ids: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 32,
            train_ids: 60,
            train_imgs_per_id: 6,
            test_same_ids: 24,
            test_same_imgs_per_id: 6,
            test_cross_ids: 50,
            age_gap: 26.0,
            bucket_ids: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub seed: u64,
    pub workspace_root: PathBuf,
    pub threads: Option<usize>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub oracle: OracleTrainConfig,
    /// DDIM schedule length (the linear-beta default).
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 7,
            workspace_root: PathBuf::from("."),
            threads: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            oracle: OracleTrainConfig::default(),
            diffusion_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<AppConfig> {
        let mut cfg: AppConfig = match path {
            Some(p) => {
                let text = crate::util::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => AppConfig::default(),
        };
        if let Ok(root) = std::env::var(ENV_ROOT) {
            cfg.workspace_root = PathBuf::from(root);
        }
        if let Ok(threads) = std::env::var(ENV_THREADS) {
            cfg.threads = Some(threads.parse().map_err(|_| {
                Error::Config(format!("{ENV_THREADS} must be an integer, got {threads}"))
            })?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.denoiser.validate()?;
        self.train.validate()?;
        self.guidance.validate()?;
        if self.dataset.image_size != self.model.denoiser.image_size {
            return Err(Error::Config(format!(
                "dataset image_size {} != model image_size {}",
                self.dataset.image_size, self.model.denoiser.image_size
            )));
        }
        if self.oracle.image_size != self.dataset.image_size {
            return Err(Error::Config(format!(
                "oracle image_size {} != dataset image_size {}",
                self.oracle.image_size, self.dataset.image_size
            )));
        }
        Ok(())
    }

    /// Stable content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn schedule(&self) -> Result<crate::diffusion::NoiseSchedule> {
        crate::diffusion::make_noise_schedule(
            self.diffusion_steps,
            self.beta_min,
            self.beta_max,
            crate::diffusion::ScheduleKind::Linear,
        )
    }

    // ---- layout under the workspace root ----

    pub fn data_dir(&self, split: Split) -> PathBuf {
        let name = match split {
            Split::TrainSameAge => "train",
            Split::TestSameAge => "test_same",
            Split::TestCrossAge => "test_cross",
        };
        self.workspace_root.join("data").join(name)
    }

    pub fn bucket_dir(&self, bucket: usize) -> PathBuf {
        self.workspace_root
            .join("data")
            .join(format!("cross_bucket_{bucket}"))
    }

    pub fn manifest_path(&self, split: Split) -> PathBuf {
        self.data_dir(split).join("manifest.jsonl")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.workspace_root.join("runs")
    }

    pub fn oracle_checkpoint(&self) -> PathBuf {
        self.runs_dir().join("oracles").join("oracles.ckpt")
    }

    pub fn oracle_report_path(&self) -> PathBuf {
        self.runs_dir().join("oracles").join("oracle_report.json")
    }

    pub fn train_dir(&self, grf: bool) -> PathBuf {
        self.runs_dir()
            .join(if grf { "train" } else { "train_no_grf" })
    }

    pub fn model_checkpoint(&self, grf: bool) -> PathBuf {
        self.train_dir(grf).join("model_final.ckpt")
    }
}

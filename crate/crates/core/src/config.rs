// Copyright 2026 The peftsearch Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Run configuration: one TOML document describing the task, backbone,
//! search space, search and retraining settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, PretrainOptions};
use crate::search::{BudgetConfig, RetrainOptions};
use crate::supernet::SpaceConfig;
use crate::task::{SyntheticTask, TaskKind};
use crate::{Error, Result};

/// SHA-256 of the value's JSON form with object keys sorted, so the hash
/// ignores field order in the source document.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key.
    let canonical = serde_json::to_value(value)?;
    let bytes = serde_json::to_vec(&canonical)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seed of the backbone's initial weights.
    pub seed: u64,
    /// Task the backbone is pretrained on; see [`RunConfig::pretrain_task`].
    pub task: Option<SyntheticTask>,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let o = PretrainOptions::default();
        Self {
            steps: 300,
            lr: o.lr,
            batch_size: o.batch_size,
            seed: 0,
            task: None,
        }
    }
}

impl PretrainSettings {
    pub fn options(&self) -> PretrainOptions {
        PretrainOptions {
            lr: self.lr,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: SyntheticTask,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub space: SpaceConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub pretrain: PretrainSettings,
    #[serde(default)]
    pub retrain: RetrainOptions,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTask {
                num_train: 4096,
                ..SyntheticTask::new(TaskKind::KeyedLookup, 16, 4, 4)
            },
            backbone: BackboneConfig::default(),
            space: SpaceConfig::default(),
            budget: BudgetConfig::default(),
            pretrain: PretrainSettings::default(),
            retrain: RetrainOptions::default(),
            out_dir: default_out_dir(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.backbone.validate()?;
        self.space.validate()?;
        self.budget.validate()?;
        let tasks = std::iter::once(&self.task).chain(self.pretrain.task.as_ref());
        for t in tasks {
            t.validate()?;
            if t.vocab_size > self.backbone.vocab_size || t.seq_len > self.backbone.max_seq_len {
                return Err(Error::Config(format!(
                    "task vocab {} / length {} exceed the backbone's {} / {}",
                    t.vocab_size, t.seq_len, self.backbone.vocab_size, self.backbone.max_seq_len
                )));
            }
            if t.num_classes != self.backbone.num_classes {
                return Err(Error::Config(format!(
                    "task has {} classes but the backbone head has {}",
                    t.num_classes, self.backbone.num_classes
                )));
            }
        }
        if self.pretrain.batch_size == 0 || self.retrain.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    /// The explicit pretraining task, or copy-class over the search task's
    /// vocabulary and length drawn from a different data seed.
    pub fn pretrain_task(&self) -> SyntheticTask {
        self.pretrain.task.clone().unwrap_or_else(|| {
            let mut t = self.task.clone();
            t.kind = TaskKind::CopyClass;
            t.seed = self.task.seed.wrapping_add(100);
            t
        })
    }

    /// Hash of every field except the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("out_dir");
        }
        content_hash(&v)
    }
}

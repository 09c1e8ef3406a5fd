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

//! File formats: architecture JSON, trace CSVs, backbone checkpoints.
//! Every write goes to a temporary sibling first and is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::architecture::SearchedArchitecture;
use crate::autodiff::Tensor;
use crate::backbone::{Backbone, BackboneConfig};
use crate::search::SearchTrace;
use crate::{Error, Result};

pub const STEP_CSV: &str = "trace_steps.csv";
pub const TRIGGER_CSV: &str = "trace_triggers.csv";

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn export_architecture(arch: &SearchedArchitecture, path: &Path) -> Result<()> {
    arch.validate()?;
    write_atomic(path, arch.to_json()?.as_bytes())
}

pub fn import_architecture(path: &Path) -> Result<SearchedArchitecture> {
    SearchedArchitecture::from_json(&read(path)?)
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

/// Writes the per-step and per-trigger CSVs into `dir`, returning their
/// paths.
pub fn emit_trace(trace: &SearchTrace, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let steps = csv_bytes(
        &["step", "train_loss", "val_loss", "beta", "expected_params"],
        trace.steps.iter().map(|s| {
            vec![
                s.step.to_string(),
                s.train_loss.to_string(),
                s.val_loss.to_string(),
                s.beta.to_string(),
                s.expected_params.to_string(),
            ]
        }),
    )?;
    let triggers = csv_bytes(
        &["z", "step", "R_z", "removed", "Y_z", "fixed"],
        trace.triggers.iter().map(|t| {
            vec![
                t.z.to_string(),
                t.step.to_string(),
                t.reduction_target.to_string(),
                join(&t.removed),
                t.fix_count.to_string(),
                join(&t.fixed),
            ]
        }),
    )?;
    let (sp, tp) = (dir.join(STEP_CSV), dir.join(TRIGGER_CSV));
    write_atomic(&sp, &steps)?;
    write_atomic(&tp, &triggers)?;
    Ok((sp, tp))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    config: BackboneConfig,
    seed: u64,
    frozen: bool,
    pretrain_loss: Option<f64>,
    params: BTreeMap<String, StoredTensor>,
}

pub fn save_backbone(backbone: &Backbone, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        config: backbone.config().clone(),
        seed: backbone.seed(),
        frozen: backbone.is_frozen(),
        pretrain_loss: backbone.pretrain_loss(),
        params: backbone
            .params()
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.values().to_vec(),
                    },
                )
            })
            .collect(),
    };
    write_atomic(path, &serde_json::to_vec(&ck)?)
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let ck: Checkpoint = serde_json::from_str(&read(path)?)?;
    let mut params = BTreeMap::new();
    for (k, t) in ck.params {
        params.insert(k, Tensor::new(t.shape, t.values)?);
    }
    Backbone::from_parts(ck.config, ck.seed, params, ck.frozen, ck.pretrain_loss)
}

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

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): expected {expected}, got {actual}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("site list does not match the backbone: {0}")]
    MisalignedSites(String),

    #[error("{kind} cannot attach to position {position}")]
    IncompatiblePosition { kind: String, position: String },

    #[error("site {0} is kept but its dimension is undetermined")]
    UndeterminedDimension(usize),

    #[error("trigger budget exhausted (z = {z}, Z = {max})")]
    TriggersExhausted { z: usize, max: usize },

    #[error("task cannot express {requested} classes (at most {max})")]
    TaskClasses { requested: usize, max: usize },

    #[error("unsupported schema version {found} (supported: {supported})")]
    SchemaVersion { found: u32, supported: u32 },

    #[error("invalid architecture file: {0}")]
    InvalidArchitecture(String),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

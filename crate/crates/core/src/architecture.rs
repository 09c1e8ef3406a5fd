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

//! Discrete architectures produced by a search: which sites are kept and
//! at what dimension. Serialized as JSON with a schema version.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::argmax;
use crate::backbone::{BackboneConfig, Position};
use crate::rng::StreamRng;
use crate::supernet::{param_count, DiscreteArch, ModuleKind, SupernetState};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteChoice {
    pub kind: ModuleKind,
    pub position: Position,
    pub kept: bool,
    /// 0 for dropped sites.
    pub dim: usize,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchedArchitecture {
    pub schema_version: u32,
    pub backbone: BackboneConfig,
    pub dims: Vec<usize>,
    pub adapter_nonlinearity: bool,
    pub sites: Vec<SiteChoice>,
    pub total_params: usize,
    pub provenance: Provenance,
}

impl SearchedArchitecture {
    /// Builds an architecture from per-site choices, filling in counts.
    pub fn from_choices(
        backbone: &BackboneConfig,
        dims: &[usize],
        adapter_nonlinearity: bool,
        sites: &[(ModuleKind, Position, Option<usize>)],
        provenance: Provenance,
    ) -> Self {
        let sites: Vec<SiteChoice> = sites
            .iter()
            .map(|&(kind, position, dim)| match dim {
                Some(d) => SiteChoice {
                    kind,
                    position,
                    kept: true,
                    dim: d,
                    param_count: param_count(kind, backbone, position, d),
                },
                None => SiteChoice {
                    kind,
                    position,
                    kept: false,
                    dim: 0,
                    param_count: 0,
                },
            })
            .collect();
        let total_params = sites.iter().map(|s| s.param_count).sum();
        Self {
            schema_version: SCHEMA_VERSION,
            backbone: backbone.clone(),
            dims: dims.to_vec(),
            adapter_nonlinearity,
            sites,
            total_params,
            provenance,
        }
    }

    pub fn kept_count(&self) -> usize {
        self.sites.iter().filter(|s| s.kept).count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArchitecture(msg));
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        self.backbone.validate()?;
        if self.dims.is_empty() || self.dims[0] == 0 || self.dims.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("dimension set {:?} is not strictly increasing", self.dims));
        }
        let cfg = &self.backbone;
        for (i, s) in self.sites.iter().enumerate() {
            let pos = s.position;
            if pos.layer >= cfg.num_layers
                || (pos.kind == crate::backbone::PositionKind::LN2 && !cfg.ffn_ln_position)
                || !s.kind.admits(pos.kind)
            {
                return bad(format!("site {i}: {} cannot sit at {pos}", s.kind.name()));
            }
            if self.sites[..i].iter().any(|o| o.kind == s.kind && o.position == pos) {
                return bad(format!("site {i}: duplicate {} at {pos}", s.kind.name()));
            }
            if s.kept {
                if !self.dims.contains(&s.dim) {
                    return bad(format!("site {i}: dimension {} is not in {:?}", s.dim, self.dims));
                }
                let expect = param_count(s.kind, cfg, pos, s.dim);
                if s.param_count != expect {
                    return bad(format!("site {i}: param_count {} should be {expect}", s.param_count));
                }
            } else if s.dim != 0 || s.param_count != 0 {
                return bad(format!("site {i}: dropped sites carry dim 0 and no parameters"));
            }
        }
        let total: usize = self.sites.iter().map(|s| s.param_count).sum();
        if total != self.total_params {
            return bad(format!("total_params {} should be {total}", self.total_params));
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and validates. The schema version is checked before the rest
    /// of the document so older or newer files fail with a clear message.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::InvalidArchitecture("missing schema_version".into()))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(Error::SchemaVersion {
                found: found.min(u32::MAX as u64) as u32,
                supported: SCHEMA_VERSION,
            });
        }
        let arch: Self = serde_json::from_value(value)?;
        arch.validate()?;
        Ok(arch)
    }

    /// Per-site keep flags and dimensions aligned with `net`'s sites.
    pub fn to_discrete(&self, net: &SupernetState) -> Result<DiscreteArch> {
        let mut keep = vec![false; net.sites().len()];
        let mut dims = vec![None; net.sites().len()];
        for (i, choice) in self.sites.iter().enumerate() {
            let idx = net
                .sites()
                .iter()
                .position(|s| s.kind == choice.kind && s.position == choice.position)
                .ok_or_else(|| {
                    Error::MisalignedSites(format!(
                        "architecture site {i} ({} at {}) is not in the supernet",
                        choice.kind.name(),
                        choice.position
                    ))
                })?;
            if choice.kept {
                keep[idx] = true;
                dims[idx] = Some(choice.dim);
            }
        }
        Ok(DiscreteArch { keep, dims })
    }
}

/// Reads off the discrete architecture: a site is kept when it was never
/// removed and its keep logit beats the drop logit (ties drop). Its
/// dimension is the pinned one if fixed, else the most likely (ties to the
/// smaller).
pub fn materialize_architecture(net: &SupernetState, provenance: Provenance) -> SearchedArchitecture {
    let arch = net.arch();
    let sel = net.selection();
    let dims = net.dims();
    let choices: Vec<_> = net
        .sites()
        .iter()
        .map(|s| {
            let n = s.index;
            let dim = if let Some(row) = arch.joint_row(n) {
                let k = argmax(row);
                (k > 0).then(|| if s.kind.is_dimension_free() { dims[0] } else { dims[k - 1] })
            } else if !sel.keep()[n] || argmax(arch.theta_row(n)) != 1 {
                None
            } else if let (true, Some(k)) = (sel.determined()[n], sel.k_star()[n]) {
                Some(dims[k])
            } else {
                Some(dims[argmax(arch.phi_row(n))])
            };
            (s.kind, s.position, dim)
        })
        .collect();
    SearchedArchitecture::from_choices(net.backbone_config(), dims, net.adapter_nonlinearity(), &choices, provenance)
}

/// Every site kept at its largest dimension.
pub fn full_architecture(net: &SupernetState, provenance: Provenance) -> SearchedArchitecture {
    let dims = net.dims();
    let choices: Vec<_> = net
        .sites()
        .iter()
        .map(|s| {
            let d = if s.kind.is_dimension_free() { dims[0] } else { *dims.last().expect("dims") };
            (s.kind, s.position, Some(d))
        })
        .collect();
    SearchedArchitecture::from_choices(net.backbone_config(), dims, net.adapter_nonlinearity(), &choices, provenance)
}

/// A random architecture within `budget`: sites are visited in random
/// order, each with a random dimension, and added when they still fit.
pub fn random_architecture(
    net: &SupernetState,
    budget: f64,
    rng: &mut StreamRng,
    provenance: Provenance,
) -> SearchedArchitecture {
    let dims = net.dims();
    let mut order: Vec<usize> = (0..net.sites().len()).collect();
    order.shuffle(rng);
    let mut choices: Vec<_> = net.sites().iter().map(|s| (s.kind, s.position, None)).collect();
    let mut used = 0usize;
    for n in order {
        let s = &net.sites()[n];
        let k = if s.kind.is_dimension_free() { 0 } else { rng.random_range(0..dims.len()) };
        if (used + s.q[k]) as f64 <= budget {
            used += s.q[k];
            choices[n].2 = Some(dims[k]);
        }
    }
    SearchedArchitecture::from_choices(net.backbone_config(), dims, net.adapter_nonlinearity(), &choices, provenance)
}

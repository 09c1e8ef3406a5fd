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

//! The PEFT supernet: module sites attached to backbone positions,
//! architecture logits, and the hook that mixes candidate modules into the
//! backbone's forward pass.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Bindings, Graph, NodeId, Tensor};
use crate::backbone::{linear_dims, output_width, Backbone, BackboneConfig, PeftHook, Position, PositionKind};
use crate::rng::{self, StreamRng};
use crate::selector::SelectionState;
use crate::task::Batch;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleKind {
    Lora,
    AdapterLr,
    BitFit,
    LnFit,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [
        ModuleKind::Lora,
        ModuleKind::AdapterLr,
        ModuleKind::BitFit,
        ModuleKind::LnFit,
    ];

    /// Whether the module's size is independent of the dimension choice.
    pub fn is_dimension_free(self) -> bool {
        matches!(self, ModuleKind::BitFit | ModuleKind::LnFit)
    }

    pub fn admits(self, kind: PositionKind) -> bool {
        match self {
            ModuleKind::Lora => kind.is_linear(),
            ModuleKind::AdapterLr => matches!(kind, PositionKind::O | PositionKind::W2),
            ModuleKind::BitFit => true,
            ModuleKind::LnFit => kind.is_layer_norm(),
        }
    }

    pub fn default_positions(self) -> Vec<PositionKind> {
        use PositionKind::*;
        [Q, K, V, O, W1, W2, LN, LN2]
            .into_iter()
            .filter(|&p| self.admits(p))
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Lora => "lora",
            ModuleKind::AdapterLr => "adapter-lr",
            ModuleKind::BitFit => "bitfit",
            ModuleKind::LnFit => "lnfit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    pub kind: ModuleKind,
    pub positions: Vec<PositionKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    /// Candidate ranks / bottleneck widths, strictly increasing.
    pub dims: Vec<usize>,
    pub placements: Vec<Placement>,
    /// Apply GELU inside low-rank adapters.
    pub adapter_nonlinearity: bool,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            dims: vec![1, 4, 8],
            placements: ModuleKind::ALL
                .into_iter()
                .map(|kind| Placement {
                    kind,
                    positions: kind.default_positions(),
                })
                .collect(),
            adapter_nonlinearity: false,
        }
    }
}

impl SpaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims[0] == 0 || self.dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "dims must be positive and strictly increasing, got {:?}",
                self.dims
            )));
        }
        for (i, p) in self.placements.iter().enumerate() {
            if self.placements[..i].iter().any(|q| q.kind == p.kind) {
                return Err(Error::Config(format!("module kind {} placed twice", p.kind.name())));
            }
            if let Some(&bad) = p.positions.iter().find(|&&pos| !p.kind.admits(pos)) {
                return Err(Error::IncompatiblePosition {
                    kind: p.kind.name().to_string(),
                    position: bad.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn max_dim(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }
}

/// Trainable parameters of a module of `kind` at `pos` with dimension `dim`.
pub fn param_count(kind: ModuleKind, config: &BackboneConfig, pos: Position, dim: usize) -> usize {
    let w = output_width(config, pos);
    match kind {
        ModuleKind::Lora => {
            let (din, dout) = linear_dims(config, pos).expect("lora sits on a linear position");
            dim * (din + dout)
        }
        ModuleKind::AdapterLr => 2 * w * dim,
        ModuleKind::BitFit | ModuleKind::LnFit => w,
    }
}

/// One candidate module slot. Weights are sized for the largest dimension;
/// smaller dimensions use leading slices of them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleSite {
    pub index: usize,
    pub kind: ModuleKind,
    pub position: Position,
    /// Parameter count at each candidate dimension.
    pub q: Vec<usize>,
    weights: Vec<(&'static str, Tensor)>,
}

impl ModuleSite {
    fn new(index: usize, kind: ModuleKind, position: Position, config: &BackboneConfig, dims: &[usize]) -> Self {
        let r = *dims.last().expect("non-empty dims");
        let w = output_width(config, position);
        let weights = match kind {
            ModuleKind::Lora => {
                let (din, dout) = linear_dims(config, position).expect("linear position");
                vec![("a", Tensor::zeros(vec![din, r])), ("b", Tensor::zeros(vec![r, dout]))]
            }
            ModuleKind::AdapterLr => {
                vec![("down", Tensor::zeros(vec![w, r])), ("up", Tensor::zeros(vec![r, w]))]
            }
            ModuleKind::BitFit => vec![("bias", Tensor::zeros(vec![w]))],
            ModuleKind::LnFit => vec![("scale", Tensor::zeros(vec![w]))],
        };
        let q = dims.iter().map(|&d| param_count(kind, config, position, d)).collect();
        Self {
            index,
            kind,
            position,
            q,
            weights,
        }
    }

    /// Zero-output initialization: the down projection is random and the up
    /// projection zero, so an untrained module leaves the backbone unchanged.
    pub fn reinitialize(&mut self, rng: &mut StreamRng) {
        for (part, t) in &mut self.weights {
            let fan_in = t.shape()[0] as f64;
            let random = matches!(*part, "a" | "down");
            let n = t.len();
            let fresh = if random {
                rng::normal_vec(rng, n, 1.0 / fan_in.sqrt())
            } else {
                vec![0.0; n]
            };
            t.values_mut().copy_from_slice(&fresh);
        }
    }

    pub fn param_name(&self, part: &str) -> String {
        format!("site{}.{}", self.index, part)
    }

    pub fn weights(&self) -> &[(&'static str, Tensor)] {
        &self.weights
    }

    pub fn weight_mut(&mut self, part: &str) -> Option<&mut Tensor> {
        self.weights.iter_mut().find(|(p, _)| *p == part).map(|(_, t)| t)
    }

    /// All weights flattened in part order.
    pub fn flat_weights(&self) -> Vec<f64> {
        self.weights.iter().flat_map(|(_, t)| t.values().iter().copied()).collect()
    }

    pub fn weight_len(&self) -> usize {
        self.weights.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Lists every (kind, position) pair allowed by the space, grouped by kind
/// in placement order and then in backbone catalog order.
pub fn enumerate_sites(space: &SpaceConfig, backbone: &Backbone, seed: u64) -> Result<Vec<ModuleSite>> {
    space.validate()?;
    let mut sites = Vec::new();
    let mut rng = rng::stream(seed, "sites");
    for placement in &space.placements {
        for &pos in backbone.catalog() {
            if placement.positions.contains(&pos.kind) {
                let mut site = ModuleSite::new(sites.len(), placement.kind, pos, backbone.config(), &space.dims);
                site.reinitialize(&mut rng);
                sites.push(site);
            }
        }
    }
    Ok(sites)
}

/// Architecture logits. `theta` holds per-site [drop, keep] logits, `phi`
/// per-site dimension logits. The entangled variant replaces both with a
/// single [off, dim_1, .., dim_K] row per site.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchWeights {
    n: usize,
    k: usize,
    theta: Vec<f64>,
    phi: Vec<f64>,
    joint: Option<Vec<f64>>,
}

impl ArchWeights {
    pub fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            k,
            theta: vec![0.0; n * 2],
            phi: vec![0.0; n * k],
            joint: None,
        }
    }

    pub fn entangled(n: usize, k: usize) -> Self {
        Self {
            joint: Some(vec![0.0; n * (k + 1)]),
            ..Self::new(n, k)
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_entangled(&self) -> bool {
        self.joint.is_some()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn phi_mut(&mut self) -> &mut [f64] {
        &mut self.phi
    }

    pub fn joint(&self) -> Option<&[f64]> {
        self.joint.as_deref()
    }

    pub fn joint_mut(&mut self) -> Option<&mut [f64]> {
        self.joint.as_deref_mut()
    }

    pub fn theta_row(&self, n: usize) -> &[f64] {
        &self.theta[n * 2..n * 2 + 2]
    }

    pub fn theta_row_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.theta[n * 2..n * 2 + 2]
    }

    pub fn phi_row(&self, n: usize) -> &[f64] {
        &self.phi[n * self.k..(n + 1) * self.k]
    }

    pub fn phi_row_mut(&mut self, n: usize) -> &mut [f64] {
        let k = self.k;
        &mut self.phi[n * k..(n + 1) * k]
    }

    pub fn joint_row(&self, n: usize) -> Option<&[f64]> {
        let w = self.k + 1;
        self.joint.as_ref().map(|j| &j[n * w..(n + 1) * w])
    }

    pub fn keep_prob(&self, n: usize) -> f64 {
        softmax(self.theta_row(n))[1]
    }

    pub fn phi_probs(&self, n: usize) -> Vec<f64> {
        softmax(self.phi_row(n))
    }

    pub fn joint_probs(&self, n: usize) -> Option<Vec<f64>> {
        self.joint_row(n).map(softmax)
    }
}

/// A fixed architecture for retraining: per-site keep flag and dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteArch {
    pub keep: Vec<bool>,
    pub dims: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MixMode {
    /// Plain softmax of the logits, no noise.
    SoftMix,
    /// Softmax of noise-perturbed, temperature-scaled logits.
    GumbelSoft,
    /// One-hot of the Gumbel-softmax sample with straight-through gradients.
    GumbelHard,
    /// No architecture logits at all.
    Discrete(DiscreteArch),
}

/// Which bound tensors receive gradients. In the entangled variant the
/// joint logits follow `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub weights: bool,
    pub theta: bool,
    pub phi: bool,
}

/// Module sites, their architecture logits and selection state.
#[derive(Debug, Clone)]
pub struct SupernetState {
    sites: Vec<ModuleSite>,
    arch: ArchWeights,
    selection: SelectionState,
    dims: Vec<usize>,
    adapter_nonlinearity: bool,
    backbone_config: BackboneConfig,
    /// Treat kept sites as switched on regardless of `theta`.
    pub gates_fixed: bool,
}

impl SupernetState {
    pub fn new(space: &SpaceConfig, backbone: &Backbone, seed: u64, max_triggers: usize) -> Result<Self> {
        let sites = enumerate_sites(space, backbone, seed)?;
        Ok(Self::assemble(sites, space, backbone.config(), max_triggers))
    }

    /// A supernet over an explicit site list, weights drawn from `seed`.
    pub fn with_sites(
        sites: &[(ModuleKind, Position)],
        space: &SpaceConfig,
        backbone: &Backbone,
        seed: u64,
    ) -> Result<Self> {
        space.validate()?;
        let mut rng = rng::stream(seed, "sites");
        let mut built = Vec::with_capacity(sites.len());
        for (i, &(kind, pos)) in sites.iter().enumerate() {
            if !backbone.catalog().contains(&pos) || !kind.admits(pos.kind) {
                return Err(Error::MisalignedSites(format!(
                    "{} at {pos} is not an attachment point of this backbone",
                    kind.name()
                )));
            }
            let mut site = ModuleSite::new(i, kind, pos, backbone.config(), &space.dims);
            site.reinitialize(&mut rng);
            built.push(site);
        }
        Ok(Self::assemble(built, space, backbone.config(), 1))
    }

    fn assemble(sites: Vec<ModuleSite>, space: &SpaceConfig, config: &BackboneConfig, max_triggers: usize) -> Self {
        let free: Vec<bool> = sites.iter().map(|s| s.kind.is_dimension_free()).collect();
        Self {
            arch: ArchWeights::new(sites.len(), space.dims.len()),
            selection: SelectionState::new(&free, max_triggers),
            sites,
            dims: space.dims.clone(),
            adapter_nonlinearity: space.adapter_nonlinearity,
            backbone_config: config.clone(),
            gates_fixed: false,
        }
    }

    /// Switches to the joint keep-and-dimension parameterization.
    pub fn entangle(&mut self) {
        self.arch = ArchWeights::entangled(self.arch.n, self.arch.k);
    }

    pub fn adapter_nonlinearity(&self) -> bool {
        self.adapter_nonlinearity
    }

    pub fn sites(&self) -> &[ModuleSite] {
        &self.sites
    }

    pub fn sites_mut(&mut self) -> &mut [ModuleSite] {
        &mut self.sites
    }

    pub fn arch(&self) -> &ArchWeights {
        &self.arch
    }

    pub fn arch_mut(&mut self) -> &mut ArchWeights {
        &mut self.arch
    }

    pub fn set_arch(&mut self, arch: ArchWeights) {
        assert_eq!((arch.n(), arch.k()), (self.arch.n, self.arch.k));
        self.arch = arch;
    }

    pub fn selection(&self) -> &SelectionState {
        &self.selection
    }

    pub fn selection_mut(&mut self) -> &mut SelectionState {
        &mut self.selection
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        &self.backbone_config
    }

    pub fn q(&self) -> Vec<Vec<usize>> {
        self.sites.iter().map(|s| s.q.clone()).collect()
    }

    /// Total parameters if every site were kept at its largest dimension.
    pub fn full_space_params(&self) -> usize {
        self.sites.iter().map(|s| *s.q.last().expect("dims")).sum()
    }

    pub fn reinitialize_weights(&mut self, rng: &mut StreamRng) {
        for s in &mut self.sites {
            s.reinitialize(rng);
        }
    }

    /// Errors unless every site sits on a cataloged position of `backbone`
    /// with matching geometry.
    pub fn check_alignment(&self, backbone: &Backbone) -> Result<()> {
        if backbone.config() != &self.backbone_config {
            return Err(Error::MisalignedSites(
                "supernet was built for a different backbone geometry".into(),
            ));
        }
        for s in &self.sites {
            if !backbone.catalog().contains(&s.position) || !s.kind.admits(s.position.kind) {
                return Err(Error::MisalignedSites(format!(
                    "site {} ({} at {}) has no matching backbone position",
                    s.index,
                    s.kind.name(),
                    s.position
                )));
            }
        }
        Ok(())
    }
}

enum Gate {
    One,
    Node(NodeId),
}

enum Delta {
    /// Same shape as the hooked activation.
    Full(NodeId),
    /// A per-feature row broadcast over all tokens.
    Row(NodeId),
}

/// Mixes the supernet's modules into a backbone graph.
pub struct SupernetHook<'a> {
    net: &'a SupernetState,
    mode: &'a MixMode,
    train: Trainable,
    temperature: f64,
    theta_noise: Option<Vec<f64>>,
    phi_noise: Option<Vec<f64>>,
    joint_noise: Option<Vec<f64>>,
    theta_probs: Option<NodeId>,
    phi_probs: Option<NodeId>,
    joint_probs: Option<NodeId>,
    by_position: BTreeMap<Position, Vec<usize>>,
    weight_nodes: HashMap<usize, Vec<NodeId>>,
}

impl<'a> SupernetHook<'a> {
    /// Gumbel noise for this forward pass is drawn from `rng` up front; the
    /// soft and discrete modes draw nothing.
    pub fn new(
        net: &'a SupernetState,
        mode: &'a MixMode,
        train: Trainable,
        temperature: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        if let MixMode::Discrete(d) = mode {
            if d.keep.len() != net.sites.len() || d.dims.len() != net.sites.len() {
                return Err(Error::MisalignedSites(format!(
                    "discrete architecture covers {} sites, supernet has {}",
                    d.keep.len(),
                    net.sites.len()
                )));
            }
        }
        let noisy = matches!(mode, MixMode::GumbelSoft | MixMode::GumbelHard);
        let (n, k) = (net.arch.n, net.arch.k);
        let (mut theta_noise, mut phi_noise, mut joint_noise) = (None, None, None);
        if noisy {
            if net.arch.is_entangled() {
                joint_noise = Some(rng::gumbel_vec(rng, n * (k + 1)));
            } else {
                theta_noise = Some(rng::gumbel_vec(rng, n * 2));
                phi_noise = Some(rng::gumbel_vec(rng, n * k));
            }
        }
        let mut by_position: BTreeMap<Position, Vec<usize>> = BTreeMap::new();
        for s in &net.sites {
            by_position.entry(s.position).or_default().push(s.index);
        }
        Ok(Self {
            net,
            mode,
            train,
            temperature,
            theta_noise,
            phi_noise,
            joint_noise,
            theta_probs: None,
            phi_probs: None,
            joint_probs: None,
            by_position,
            weight_nodes: HashMap::new(),
        })
    }

    fn probs_node(
        &self,
        g: &mut Graph,
        b: &mut Bindings,
        name: &str,
        values: &[f64],
        cols: usize,
        noise: Option<&Vec<f64>>,
        grad: bool,
    ) -> NodeId {
        let t = Tensor::new(vec![values.len() / cols, cols], values.to_vec())
            .expect("arch logits shape")
            .requiring_grad(grad);
        b.insert(name.to_string(), t);
        let mut x = g.input(name);
        if let Some(noise) = noise {
            let c = g.constant(Tensor::new(vec![values.len() / cols, cols], noise.clone()).expect("noise shape"));
            x = g.add(x, c);
            x = g.scale(x, 1.0 / self.temperature);
        }
        let p = g.softmax(x);
        if matches!(self.mode, MixMode::GumbelHard) {
            g.hard_one_hot(p)
        } else {
            p
        }
    }

    fn theta(&mut self, g: &mut Graph, b: &mut Bindings) -> NodeId {
        if let Some(id) = self.theta_probs {
            return id;
        }
        let id = self.probs_node(g, b, "arch.theta", &self.net.arch.theta, 2, self.theta_noise.as_ref(), self.train.theta);
        self.theta_probs = Some(id);
        id
    }

    fn phi(&mut self, g: &mut Graph, b: &mut Bindings) -> NodeId {
        if let Some(id) = self.phi_probs {
            return id;
        }
        let k = self.net.arch.k;
        let id = self.probs_node(g, b, "arch.phi", &self.net.arch.phi, k, self.phi_noise.as_ref(), self.train.phi);
        self.phi_probs = Some(id);
        id
    }

    fn joint(&mut self, g: &mut Graph, b: &mut Bindings) -> NodeId {
        if let Some(id) = self.joint_probs {
            return id;
        }
        let k = self.net.arch.k;
        let values = self.net.arch.joint.as_ref().expect("entangled logits");
        let id = self.probs_node(g, b, "arch.joint", values, k + 1, self.joint_noise.as_ref(), self.train.theta);
        self.joint_probs = Some(id);
        id
    }

    /// The gate and the weighted dimension indices used for site `n`, or
    /// `None` when the site contributes nothing.
    fn mixing(&mut self, g: &mut Graph, b: &mut Bindings, n: usize) -> Result<Option<(Gate, Vec<(usize, Option<NodeId>)>)>> {
        let net = self.net;
        let sel = &net.selection;
        let k = net.arch.k;
        if let MixMode::Discrete(d) = self.mode {
            if !d.keep[n] {
                return Ok(None);
            }
            let dim = d.dims[n].ok_or(Error::UndeterminedDimension(n))?;
            let idx = if net.sites[n].kind.is_dimension_free() {
                0
            } else {
                net.dims.iter().position(|&x| x == dim).ok_or_else(|| {
                    Error::InvalidArchitecture(format!("site {n} dimension {dim} is not a candidate"))
                })?
            };
            return Ok(Some((Gate::One, vec![(idx, None)])));
        }
        if !sel.keep()[n] {
            return Ok(None);
        }
        if net.arch.is_entangled() {
            let p = self.joint(g, b);
            let w = (0..k).map(|j| (j, Some(g.pick(p, n * (k + 1) + j + 1)))).collect();
            return Ok(Some((Gate::One, w)));
        }
        let gate = if self.gates_fixed() {
            Gate::One
        } else {
            let p = self.theta(g, b);
            Gate::Node(g.pick(p, n * 2 + 1))
        };
        let ranks = match sel.k_star()[n] {
            Some(ks) if sel.determined()[n] => vec![(ks, None)],
            _ => {
                let p = self.phi(g, b);
                (0..k).map(|j| (j, Some(g.pick(p, n * k + j)))).collect()
            }
        };
        Ok(Some((gate, ranks)))
    }

    fn gates_fixed(&self) -> bool {
        self.net.gates_fixed
    }

    fn weights(&mut self, g: &mut Graph, b: &mut Bindings, n: usize) -> Vec<NodeId> {
        if let Some(ids) = self.weight_nodes.get(&n) {
            return ids.clone();
        }
        let site = &self.net.sites[n];
        let ids: Vec<NodeId> = site
            .weights
            .iter()
            .map(|(part, t)| {
                let name = site.param_name(part);
                b.insert(name.clone(), t.clone().requiring_grad(self.train.weights));
                g.input(name)
            })
            .collect();
        self.weight_nodes.insert(n, ids.clone());
        ids
    }

    /// Output of site `n` at dimension index `k` for activation `input`.
    fn module_output(&self, g: &mut Graph, n: usize, k: usize, input: NodeId, w: &[NodeId]) -> Delta {
        let site = &self.net.sites[n];
        let r = self.net.dims[k];
        let full = r == *self.net.dims.last().expect("dims");
        match site.kind {
            ModuleKind::Lora | ModuleKind::AdapterLr => {
                let (down, up) = if full {
                    (w[0], w[1])
                } else {
                    (g.slice_cols(w[0], r), g.slice_rows(w[1], r))
                };
                let mut h = g.matmul(input, down);
                if site.kind == ModuleKind::AdapterLr && self.net.adapter_nonlinearity {
                    h = g.gelu(h);
                }
                Delta::Full(g.matmul(h, up))
            }
            ModuleKind::BitFit => Delta::Row(w[0]),
            ModuleKind::LnFit => Delta::Full(g.mul(input, w[0])),
        }
    }

    fn contribution(&mut self, g: &mut Graph, b: &mut Bindings, n: usize, input: NodeId) -> Result<Option<Delta>> {
        let Some((gate, mut ranks)) = self.mixing(g, b, n)? else {
            return Ok(None);
        };
        if self.net.sites[n].kind.is_dimension_free() && ranks.len() > 1 {
            // Every candidate is the same module; collapse to one output.
            let mut total = None;
            for (_, w) in &ranks {
                let w = w.expect("mixed ranks carry weights");
                total = Some(match total {
                    None => w,
                    Some(t) => g.add(t, w),
                });
            }
            ranks = vec![(0, total)];
        }
        let w = self.weights(g, b, n);
        let mut acc: Option<Delta> = None;
        for (k, weight) in ranks {
            let out = self.module_output(g, n, k, input, &w);
            let (node, row) = match out {
                Delta::Full(x) => (x, false),
                Delta::Row(x) => (x, true),
            };
            let node = match weight {
                Some(p) => g.mul(node, p),
                None => node,
            };
            acc = Some(match acc {
                None if row => Delta::Row(node),
                None => Delta::Full(node),
                Some(Delta::Full(a)) => Delta::Full(g.add(a, node)),
                Some(Delta::Row(a)) => Delta::Row(g.add(a, node)),
            });
        }
        let acc = acc.expect("at least one rank");
        Ok(Some(match gate {
            Gate::One => acc,
            Gate::Node(p) => match acc {
                Delta::Full(x) => Delta::Full(g.mul(x, p)),
                Delta::Row(x) => Delta::Row(g.mul(x, p)),
            },
        }))
    }

    fn apply(g: &mut Graph, y: NodeId, delta: Option<Delta>) -> NodeId {
        match delta {
            Some(Delta::Full(d)) | Some(Delta::Row(d)) => g.add(y, d),
            None => y,
        }
    }

    fn sites_at(&self, pos: Position) -> Vec<usize> {
        self.by_position.get(&pos).cloned().unwrap_or_default()
    }
}

impl PeftHook for SupernetHook<'_> {
    fn linear(
        &mut self,
        g: &mut Graph,
        bindings: &mut Bindings,
        pos: Position,
        input: NodeId,
        output: NodeId,
    ) -> Result<NodeId> {
        let sites = self.sites_at(pos);
        let mut y = output;
        for &n in &sites {
            if self.net.sites[n].kind != ModuleKind::AdapterLr {
                let d = self.contribution(g, bindings, n, input)?;
                y = Self::apply(g, y, d);
            }
        }
        // Adapters act on the already-adjusted output.
        let base = y;
        for &n in &sites {
            if self.net.sites[n].kind == ModuleKind::AdapterLr {
                let d = self.contribution(g, bindings, n, base)?;
                y = Self::apply(g, y, d);
            }
        }
        Ok(y)
    }

    fn layer_norm(
        &mut self,
        g: &mut Graph,
        bindings: &mut Bindings,
        pos: Position,
        normalized: NodeId,
        output: NodeId,
    ) -> Result<NodeId> {
        let mut y = output;
        for n in self.sites_at(pos) {
            let d = self.contribution(g, bindings, n, normalized)?;
            y = Self::apply(g, y, d);
        }
        Ok(y)
    }
}

/// The additive change site `n` makes to its activation for `input`: the
/// linear input (LoRA, BitFit), the linear output (adapters) or the
/// normalized activation (layer-norm sites). Removed sites give zeros.
pub fn mix_site_output(
    net: &SupernetState,
    n: usize,
    input: &Tensor,
    mode: &MixMode,
    temperature: f64,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    let site = &net.sites[n];
    let width = output_width(&net.backbone_config, site.position);
    let rows = input.len() / input.shape().last().copied().unwrap_or(1);
    let mut hook = SupernetHook::new(net, mode, Trainable::default(), temperature, rng)?;
    let mut g = Graph::new();
    let mut b = Bindings::new();
    b.insert("x".into(), input.clone());
    let x = g.input("x");
    let out = match hook.contribution(&mut g, &mut b, n, x)? {
        None => return Ok(Tensor::zeros(vec![rows, width])),
        Some(Delta::Full(d)) => d,
        Some(Delta::Row(d)) => {
            let z = g.constant(Tensor::zeros(vec![rows, width]));
            g.add(z, d)
        }
    };
    g.forward(&b)?;
    Ok(g.tensor(out))
}

/// Loss and logits of the backbone with the supernet's modules mixed in.
pub fn forward_with_peft(
    backbone: &Backbone,
    batch: &Batch,
    net: &SupernetState,
    mode: &MixMode,
    temperature: f64,
    rng: &mut StreamRng,
) -> Result<(f64, Tensor)> {
    net.check_alignment(backbone)?;
    let mut hook = SupernetHook::new(net, mode, Trainable::default(), temperature, rng)?;
    let mut built = backbone.build_graph(batch, &mut hook)?;
    let loss = built.run()?;
    Ok((loss, built.graph.tensor(built.logits)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_backbone;
    use crate::task::{generate_task, SyntheticTask, TaskKind};

    fn small() -> Backbone {
        build_backbone(
            &BackboneConfig {
                num_layers: 1,
                model_dim: 8,
                ffn_dim: 16,
                num_heads: 2,
                vocab_size: 8,
                max_seq_len: 4,
                num_classes: 2,
                ffn_ln_position: false,
            },
            3,
        )
        .unwrap()
    }

    fn batch() -> Batch {
        let mut t = SyntheticTask::new(TaskKind::Parity, 8, 4, 2);
        t.num_train = 16;
        t.num_val = 4;
        t.num_test = 4;
        generate_task(&t).unwrap().train.batch(&[0, 1, 2, 3])
    }

    fn randomize(net: &mut SupernetState, seed: u64) {
        let mut r = rng::stream(seed, "perturb");
        for s in net.sites_mut() {
            for (_, t) in &mut s.weights {
                let v = rng::normal_vec(&mut r, t.len(), 0.3);
                t.values_mut().copy_from_slice(&v);
            }
        }
    }

    #[test]
    fn default_site_counts() {
        let bb = build_backbone(&BackboneConfig::default(), 0).unwrap();
        let sites = enumerate_sites(&SpaceConfig::default(), &bb, 0).unwrap();
        let count = |k| sites.iter().filter(|s| s.kind == k).count();
        assert_eq!(count(ModuleKind::Lora), 12);
        assert_eq!(count(ModuleKind::AdapterLr), 4);
        assert_eq!(count(ModuleKind::BitFit), 14);
        assert_eq!(count(ModuleKind::LnFit), 2);
        assert!(sites.iter().enumerate().all(|(i, s)| s.index == i));
    }

    #[test]
    fn param_counts() {
        let cfg = BackboneConfig::default();
        let q = Position { layer: 0, kind: PositionKind::Q };
        let w1 = Position { layer: 0, kind: PositionKind::W1 };
        let ln = Position { layer: 0, kind: PositionKind::LN };
        assert_eq!(param_count(ModuleKind::Lora, &cfg, q, 4), 4 * 64);
        assert_eq!(param_count(ModuleKind::Lora, &cfg, w1, 8), 8 * 96);
        assert_eq!(param_count(ModuleKind::AdapterLr, &cfg, w1, 1), 128);
        assert_eq!(param_count(ModuleKind::BitFit, &cfg, ln, 8), 32);
    }

    #[test]
    fn incompatible_placement_rejected() {
        let mut space = SpaceConfig::default();
        space.placements[0].positions.push(PositionKind::LN);
        assert!(matches!(space.validate(), Err(Error::IncompatiblePosition { .. })));
        let space = SpaceConfig {
            dims: vec![4, 1],
            ..SpaceConfig::default()
        };
        assert!(space.validate().is_err());
    }

    #[test]
    fn untrained_supernet_matches_backbone() {
        let bb = small();
        let net = SupernetState::new(&SpaceConfig::default(), &bb, 1, 10).unwrap();
        let (l0, _) = bb.forward(&batch()).unwrap();
        let (l1, _) = forward_with_peft(&bb, &batch(), &net, &MixMode::SoftMix, 1.0, &mut rng::stream(0, "t")).unwrap();
        assert_eq!(l0, l1);
    }

    #[test]
    fn removed_site_is_exactly_zero() {
        let bb = small();
        let mut net = SupernetState::new(&SpaceConfig::default(), &bb, 1, 10).unwrap();
        randomize(&mut net, 5);
        net.selection_mut().remove(0);
        let x = Tensor::new(vec![3, 8], (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
        let out = mix_site_output(&net, 0, &x, &MixMode::GumbelSoft, 1.0, &mut rng::stream(0, "t")).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discrete_needs_dimensions() {
        let bb = small();
        let net = SupernetState::new(&SpaceConfig::default(), &bb, 1, 10).unwrap();
        let n = net.sites().len();
        let mode = MixMode::Discrete(DiscreteArch {
            keep: vec![true; n],
            dims: vec![None; n],
        });
        let r = forward_with_peft(&bb, &batch(), &net, &mode, 1.0, &mut rng::stream(0, "t"));
        assert!(matches!(r, Err(Error::UndeterminedDimension(0))));
    }

    #[test]
    fn misaligned_backbone_rejected() {
        let bb = small();
        let net = SupernetState::new(&SpaceConfig::default(), &bb, 1, 10).unwrap();
        let other = build_backbone(&BackboneConfig::default(), 0).unwrap();
        assert!(matches!(net.check_alignment(&other), Err(Error::MisalignedSites(_))));
    }

    #[test]
    fn soft_mixture_is_linear_in_candidates() {
        let bb = small();
        let mut net = SupernetState::new(&SpaceConfig::default(), &bb, 1, 10).unwrap();
        randomize(&mut net, 9);
        net.arch_mut().phi_row_mut(0).copy_from_slice(&[0.3, -1.0, 0.8]);
        net.arch_mut().theta_row_mut(0).copy_from_slice(&[0.2, 0.5]);
        let x = Tensor::new(vec![2, 8], (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mixed = mix_site_output(&net, 0, &x, &MixMode::SoftMix, 1.0, &mut rng::stream(0, "t")).unwrap();
        let p = net.arch().phi_probs(0);
        let gate = net.arch().keep_prob(0);
        let mut expect = vec![0.0; mixed.len()];
        for (k, &d) in net.dims().iter().enumerate() {
            let mode = MixMode::Discrete(DiscreteArch {
                keep: vec![true; net.sites().len()],
                dims: vec![Some(d); net.sites().len()],
            });
            let o = mix_site_output(&net, 0, &x, &mode, 1.0, &mut rng::stream(0, "t")).unwrap();
            for (e, v) in expect.iter_mut().zip(o.values()) {
                *e += gate * p[k] * v;
            }
        }
        for (a, b) in mixed.values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

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

//! The budget-guided search loop, its ablation variants, and retraining of
//! a discrete architecture.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::architecture::{full_architecture, materialize_architecture, Provenance, SearchedArchitecture};
use crate::autodiff::{argmax, Gradients};
use crate::backbone::Backbone;
use crate::config::content_hash;
use crate::optim::AdamW;
use crate::rng::{self, StreamRng};
use crate::selector::{
    conditional_site_counts, dim_fix_count, dimension_stability, expected_site_counts, fix_dimensions,
    potential_dims, reduction_target, select_modules_to_remove,
};
use crate::sensitivity::{importance_indicator, module_sensitivity, stability_and_trigger, IndicatorHistory, SensitivityState};
use crate::supernet::{MixMode, SpaceConfig, SupernetHook, SupernetState, Trainable};
use crate::task::{Batch, Dataset, SplitData};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    /// Disentangled keep/dimension search with early selection.
    #[default]
    Bipeft,
    /// One joint categorical over {off} and the dimensions, no selection.
    Entangled,
    /// Keep/drop search first, then dimension search.
    BinaryThenDim,
    /// Dimension search first, then keep/drop search.
    DimThenBinary,
    /// Disentangled search that never triggers early selection.
    NoSelection,
}

impl SearchMode {
    pub const ALL: [SearchMode; 5] = [
        SearchMode::Bipeft,
        SearchMode::Entangled,
        SearchMode::BinaryThenDim,
        SearchMode::DimThenBinary,
        SearchMode::NoSelection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SearchMode::Bipeft => "bipeft",
            SearchMode::Entangled => "entangled",
            SearchMode::BinaryThenDim => "binary-then-dim",
            SearchMode::DimThenBinary => "dim-then-binary",
            SearchMode::NoSelection => "no-selection",
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown search mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    /// Budget as a fraction of the backbone's parameter count.
    pub budget_ratio: f64,
    pub max_triggers: usize,
    pub tau: f64,
    pub window: usize,
    pub gamma: f64,
    pub max_steps: usize,
    pub lr_weights: f64,
    pub lr_arch: f64,
    /// Decoupled weight decay on module weights; logits get none.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub temperature: f64,
    /// Linearly anneal the temperature to this value by the last step.
    pub final_temperature: Option<f64>,
    pub seed: u64,
    pub mode: SearchMode,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            budget_ratio: 0.05,
            max_triggers: 100,
            tau: 0.85,
            window: 5,
            gamma: 0.85,
            max_steps: 2000,
            lr_weights: 3e-4,
            lr_arch: 1e-2,
            weight_decay: 0.0,
            batch_size: 16,
            temperature: 1.0,
            final_temperature: None,
            seed: 0,
            mode: SearchMode::Bipeft,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.budget_ratio > 0.0 && self.budget_ratio < 1.0) {
            return fail(format!("budget_ratio must lie in (0, 1), got {}", self.budget_ratio));
        }
        if self.max_triggers == 0 || self.window == 0 || self.max_steps == 0 || self.batch_size == 0 {
            return fail("max_triggers, window, max_steps and batch_size must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        let rates = [self.lr_weights, self.lr_arch, self.weight_decay];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return fail("learning rates and weight decay must be finite and non-negative".into());
        }
        for t in std::iter::once(self.temperature).chain(self.final_temperature) {
            if !(t > 0.0 && t.is_finite()) {
                return fail(format!("temperatures must be positive, got {t}"));
            }
        }
        Ok(())
    }

    fn temperature_at(&self, step: usize) -> f64 {
        match self.final_temperature {
            None => self.temperature,
            Some(end) => {
                let frac = step as f64 / self.max_steps as f64;
                self.temperature + (end - self.temperature) * frac
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub train_loss: f64,
    /// Loss on the architecture batch of the first architecture update.
    pub val_loss: f64,
    pub beta: f64,
    pub expected_params: f64,
    pub s_bar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRecord {
    pub z: usize,
    pub step: usize,
    pub reduction_target: f64,
    pub removed: Vec<usize>,
    pub fix_count: usize,
    pub fixed: Vec<usize>,
    pub keep_after: Vec<bool>,
    pub determined_after: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchTrace {
    pub steps: Vec<StepRecord>,
    pub triggers: Vec<TriggerRecord>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ArchStep {
    Theta,
    Phi,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Single,
    First,
    Second,
}

/// Owns all mutable search state; [`Searcher::step`] runs one iteration.
pub struct Searcher<'a> {
    backbone: &'a Backbone,
    config: BudgetConfig,
    net: SupernetState,
    weight_train: Dataset,
    arch_train: Dataset,
    budget: f64,
    q: Vec<Vec<usize>>,
    sens: SensitivityState,
    history: IndicatorHistory,
    phi_window: Vec<Vec<Vec<f64>>>,
    opt_weights: AdamW,
    opt_arch: AdamW,
    batch_rng: StreamRng,
    noise_rng: StreamRng,
    step: usize,
    phase: Phase,
    trace: SearchTrace,
    done: bool,
    full_space: bool,
    provenance: Provenance,
}

impl<'a> Searcher<'a> {
    pub fn new(backbone: &'a Backbone, space: &SpaceConfig, data: &SplitData, config: &BudgetConfig) -> Result<Self> {
        config.validate()?;
        let mut net = SupernetState::new(space, backbone, config.seed, config.max_triggers)?;
        net.check_alignment(backbone)?;
        if config.mode == SearchMode::Entangled {
            net.entangle();
        }
        let n = net.sites().len();
        let budget = config.budget_ratio * backbone.param_count() as f64;
        let provenance = Provenance {
            config_hash: content_hash(&(backbone.config(), backbone.param_digest(), space, config))?,
            seed: config.seed,
        };
        let (weight_train, arch_train) = data.train.halves();
        let mut trace = SearchTrace::default();
        let full_space = budget >= net.full_space_params() as f64;
        if full_space {
            trace.warnings.push(format!(
                "budget {budget:.1} covers the whole space ({} parameters); returning it unchanged",
                net.full_space_params()
            ));
        }
        let phase = match config.mode {
            SearchMode::BinaryThenDim | SearchMode::DimThenBinary => Phase::First,
            _ => Phase::Single,
        };
        if config.mode == SearchMode::DimThenBinary {
            net.gates_fixed = true;
        }
        let v0 = potential_dims(net.arch(), net.selection(), net.dims());
        net.selection_mut().set_v_prev(v0);
        let mut s = Self {
            backbone,
            q: net.q(),
            sens: SensitivityState::new(n, config.gamma),
            history: IndicatorHistory::new(config.window),
            phi_window: vec![Vec::new(); n],
            opt_weights: AdamW::new(config.lr_weights, config.weight_decay, config.max_steps),
            opt_arch: AdamW::new(config.lr_arch, 0.0, config.max_steps),
            batch_rng: rng::stream(config.seed, "search-batches"),
            noise_rng: rng::stream(config.seed, "search-gumbel"),
            config: config.clone(),
            net,
            weight_train,
            arch_train,
            budget,
            step: 0,
            phase,
            trace,
            done: full_space || n == 0,
            full_space,
            provenance,
        };
        s.record_phi_rows();
        Ok(s)
    }

    pub fn supernet(&self) -> &SupernetState {
        &self.net
    }

    pub fn trace(&self) -> &SearchTrace {
        &self.trace
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn arch_steps(&self) -> &'static [ArchStep] {
        match (self.config.mode, self.phase) {
            (SearchMode::Entangled, _) => &[ArchStep::Joint],
            (SearchMode::BinaryThenDim, Phase::First) | (SearchMode::DimThenBinary, Phase::Second) => &[ArchStep::Theta],
            (SearchMode::BinaryThenDim, _) | (SearchMode::DimThenBinary, _) => &[ArchStep::Phi],
            _ => &[ArchStep::Theta, ArchStep::Phi],
        }
    }

    fn selects(&self) -> bool {
        !matches!(self.config.mode, SearchMode::Entangled | SearchMode::NoSelection)
    }

    fn forward_backward(&mut self, batch: &Batch, mode: &MixMode, train: Trainable) -> Result<(f64, Gradients)> {
        let temp = self.config.temperature_at(self.step);
        let mut hook = SupernetHook::new(&self.net, mode, train, temp, &mut self.noise_rng)?;
        let mut built = self.backbone.build_graph(batch, &mut hook)?;
        let loss = built.run()?;
        let grads = built.graph.backward(built.loss)?;
        Ok((loss, grads))
    }

    /// Per-site flattened weight gradients (zeros when absent).
    fn site_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.net
            .sites()
            .iter()
            .map(|s| {
                let mut out = Vec::with_capacity(s.weight_len());
                for (part, t) in s.weights() {
                    match grads.get(&s.param_name(part)) {
                        Some(g) => out.extend_from_slice(g.values()),
                        None => out.extend(std::iter::repeat_n(0.0, t.len())),
                    }
                }
                out
            })
            .collect()
    }

    fn apply_weight_update(&mut self, grads: &Gradients) {
        self.opt_weights.begin_step();
        let keep = self.net.selection().keep().to_vec();
        for (n, site) in self.net.sites_mut().iter_mut().enumerate() {
            if !keep[n] {
                continue;
            }
            let names: Vec<(&'static str, String)> =
                site.weights().iter().map(|(p, _)| (*p, site.param_name(p))).collect();
            for (part, name) in names {
                if let Some(g) = grads.get(&name) {
                    let w = site.weight_mut(part).expect("site part");
                    self.opt_weights.update(&name, w.values_mut(), g.values());
                }
            }
        }
    }

    fn apply_arch_update(&mut self, which: ArchStep, grads: &Gradients) {
        let (name, width) = match which {
            ArchStep::Theta => ("arch.theta", 2),
            ArchStep::Phi => ("arch.phi", self.net.arch().k()),
            ArchStep::Joint => ("arch.joint", self.net.arch().k() + 1),
        };
        let Some(g) = grads.get(name) else {
            return;
        };
        let sel = self.net.selection().clone();
        for n in 0..sel.len() {
            let frozen = match which {
                ArchStep::Theta => !sel.keep()[n],
                ArchStep::Phi => sel.determined()[n],
                ArchStep::Joint => false,
            };
            if frozen {
                continue;
            }
            let grow = &g.values()[n * width..(n + 1) * width];
            let key = format!("{name}.{n}");
            let arch = self.net.arch_mut();
            let row = match which {
                ArchStep::Theta => arch.theta_row_mut(n),
                ArchStep::Phi => arch.phi_row_mut(n),
                ArchStep::Joint => {
                    let j = arch.joint_mut().expect("entangled");
                    &mut j[n * width..(n + 1) * width]
                }
            };
            self.opt_arch.update(&key, row, grow);
        }
    }

    fn record_phi_rows(&mut self) {
        for n in 0..self.net.sites().len() {
            if !self.net.selection().determined()[n] {
                let row = self.net.arch().phi_probs(n);
                self.phi_window[n].push(row);
            }
        }
    }

    fn site_counts(&self) -> Vec<f64> {
        if self.net.gates_fixed {
            conditional_site_counts(self.net.arch(), self.net.selection(), &self.q)
        } else {
            expected_site_counts(self.net.arch(), self.net.selection(), &self.q)
        }
    }

    /// One search iteration. Returns `false` once the search has finished.
    pub fn step(&mut self) -> Result<bool> {
        if self.done {
            return Ok(false);
        }
        // Module weights on a weight-train batch with soft Gumbel mixing.
        let wb = self.weight_train.sample_batch(&mut self.batch_rng, self.config.batch_size);
        let train_only = Trainable {
            weights: true,
            ..Default::default()
        };
        let (train_loss, g_train) = self.forward_backward(&wb, &MixMode::GumbelSoft, train_only)?;
        let grads_train = self.site_grads(&g_train);
        self.apply_weight_update(&g_train);

        // Architecture logits on arch-train batches with hard samples, each
        // step seeing the other space detached.
        self.opt_arch.begin_step();
        let mut val_loss = f64::NAN;
        let mut grads_val = None;
        for &which in self.arch_steps() {
            let ab = self.arch_train.sample_batch(&mut self.batch_rng, self.config.batch_size);
            let train = Trainable {
                weights: grads_val.is_none(),
                theta: matches!(which, ArchStep::Theta | ArchStep::Joint),
                phi: which == ArchStep::Phi,
            };
            let (loss, g) = self.forward_backward(&ab, &MixMode::GumbelHard, train)?;
            if grads_val.is_none() {
                val_loss = loss;
                grads_val = Some(self.site_grads(&g));
            }
            self.apply_arch_update(which, &g);
        }
        let grads_val = grads_val.expect("at least one architecture step");

        let weights: Vec<Vec<f64>> = self.net.sites().iter().map(|s| s.flat_weights()).collect();
        let raw = module_sensitivity(&grads_train, &grads_val, &weights, self.net.selection().keep());
        self.sens.ema_update(&raw);
        let counts = self.site_counts();
        let indicator = importance_indicator(self.sens.values(), &counts, self.net.selection().keep(), self.budget);
        self.history.push(indicator);
        let (beta, fire) = stability_and_trigger(&self.history, self.config.tau);
        self.record_phi_rows();
        self.step += 1;
        self.trace.steps.push(StepRecord {
            step: self.step,
            train_loss,
            val_loss,
            beta,
            expected_params: counts.iter().sum(),
            s_bar: self.sens.values().to_vec(),
        });
        if fire && self.selects() {
            self.trigger(&counts)?;
        }
        self.advance_phase();
        Ok(!self.done)
    }

    fn trigger(&mut self, counts: &[f64]) -> Result<()> {
        let (do_remove, do_fix) = match (self.config.mode, self.phase) {
            (SearchMode::BinaryThenDim, Phase::First) | (SearchMode::DimThenBinary, Phase::Second) => (true, false),
            (SearchMode::BinaryThenDim, _) | (SearchMode::DimThenBinary, _) => (false, true),
            _ => (true, true),
        };
        let z = self.net.selection().z();
        let zmax = self.config.max_triggers;
        let expected: f64 = counts.iter().sum();
        let target = reduction_target(expected, self.budget, zmax, z)?;
        let undetermined = self.net.selection().undetermined_count();
        let s_bar = self.sens.values().to_vec();
        let removed = if do_remove {
            select_modules_to_remove(&s_bar, self.net.selection_mut(), counts, target)
        } else {
            Vec::new()
        };
        let v_now = potential_dims(self.net.arch(), self.net.selection(), self.net.dims());
        let (fix_count, fixed) = if do_fix {
            let y = dim_fix_count(undetermined, self.net.selection().v_prev(), &v_now, zmax, z)?;
            let lambda: Vec<f64> = self.phi_window.iter().map(|w| dimension_stability(w)).collect();
            let dims = self.net.dims().to_vec();
            (y, fix_dimensions(&lambda, y, &v_now, &dims, self.net.selection_mut()))
        } else {
            (0, Vec::new())
        };
        let sel = self.net.selection_mut();
        sel.set_v_prev(v_now);
        sel.advance()?;
        log::debug!(
            "trigger {} at step {}: target {target:.1}, removed {removed:?}, fixed {fixed:?}",
            z + 1,
            self.step
        );
        self.trace.triggers.push(TriggerRecord {
            z: z + 1,
            step: self.step,
            reduction_target: target,
            removed,
            fix_count,
            fixed,
            keep_after: sel.keep().to_vec(),
            determined_after: sel.determined().to_vec(),
        });
        self.history.clear();
        for w in &mut self.phi_window {
            w.clear();
        }
        self.record_phi_rows();
        Ok(())
    }

    fn advance_phase(&mut self) {
        let half = self.config.max_steps / 2;
        let exhausted = self.selects() && self.net.selection().exhausted();
        match self.phase {
            Phase::First if self.step >= half || exhausted => {
                self.finish_first_phase();
            }
            _ if self.step >= self.config.max_steps || exhausted => self.done = true,
            _ => {}
        }
    }

    /// Commits the first stage's decisions and hands over to the second.
    fn finish_first_phase(&mut self) {
        let n = self.net.sites().len();
        match self.config.mode {
            SearchMode::BinaryThenDim => {
                for i in 0..n {
                    if self.net.selection().keep()[i] && argmax(self.net.arch().theta_row(i)) != 1 {
                        self.net.selection_mut().remove(i);
                    }
                }
                self.net.gates_fixed = true;
            }
            SearchMode::DimThenBinary => {
                for i in 0..n {
                    let sel = self.net.selection();
                    if sel.keep()[i] && !sel.determined()[i] {
                        let k = argmax(self.net.arch().phi_row(i));
                        self.net.selection_mut().fix(i, k);
                    }
                }
                self.net.gates_fixed = false;
            }
            _ => unreachable!("only staged modes have phases"),
        }
        self.net.selection_mut().restart_schedule();
        self.history.clear();
        for w in &mut self.phi_window {
            w.clear();
        }
        self.record_phi_rows();
        self.phase = Phase::Second;
    }

    /// The discrete architecture at the current state.
    pub fn architecture(&self) -> SearchedArchitecture {
        if self.full_space {
            return full_architecture(&self.net, self.provenance.clone());
        }
        let mut arch = materialize_architecture(&self.net, self.provenance.clone());
        if self.config.mode == SearchMode::Entangled {
            self.truncate_to_budget(&mut arch);
        }
        arch
    }

    /// Drops the least confident kept sites until the architecture fits.
    fn truncate_to_budget(&self, arch: &mut SearchedArchitecture) {
        let mut kept: Vec<(usize, f64)> = (0..arch.sites.len())
            .filter(|&i| arch.sites[i].kept)
            .map(|i| {
                let p = self.net.arch().joint_probs(i).expect("entangled");
                (i, p[1..].iter().cloned().fold(f64::MIN, f64::max))
            })
            .collect();
        kept.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        for (i, _) in kept {
            if arch.total_params as f64 <= self.budget {
                break;
            }
            let site = &mut arch.sites[i];
            arch.total_params -= site.param_count;
            site.kept = false;
            site.dim = 0;
            site.param_count = 0;
        }
    }

    pub fn finish(self) -> (SearchedArchitecture, SearchTrace) {
        let arch = self.architecture();
        (arch, self.trace)
    }
}

/// Runs a search to completion.
pub fn run_search(
    backbone: &Backbone,
    space: &SpaceConfig,
    data: &SplitData,
    config: &BudgetConfig,
) -> Result<(SearchedArchitecture, SearchTrace)> {
    let mut s = Searcher::new(backbone, space, data, config)?;
    while s.step()? {}
    for w in &s.trace.warnings {
        log::warn!("{w}");
    }
    log::info!(
        "{} search finished after {} steps and {} triggers",
        config.mode,
        s.step,
        s.trace.triggers.len()
    );
    Ok(s.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RetrainOptions {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 1e-2,
            weight_decay: 0.0,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub trainable_params: usize,
}

/// Mean loss and accuracy over a whole split.
pub fn evaluate(backbone: &Backbone, net: &SupernetState, mode: &MixMode, data: &Dataset) -> Result<(f64, f64)> {
    let mut rng = rng::stream(0, "eval");
    let (mut loss, mut correct, mut total) = (0.0, 0usize, 0usize);
    for batch in data.batches(128) {
        let mut hook = SupernetHook::new(net, mode, Trainable::default(), 1.0, &mut rng)?;
        let mut built = backbone.build_graph(&batch, &mut hook)?;
        let l = built.run()?;
        let logits = built.graph.value(built.logits);
        let classes = logits.len() / batch.batch_size();
        for (row, &label) in logits.chunks(classes).zip(&batch.labels) {
            correct += usize::from(argmax(row) == label);
        }
        loss += l * batch.batch_size() as f64;
        total += batch.batch_size();
    }
    Ok((loss / total as f64, correct as f64 / total as f64))
}

/// Trains the kept modules of `arch` from a fresh zero-output
/// initialization on the full training split and reports held-out metrics.
pub fn retrain(
    arch: &SearchedArchitecture,
    backbone: &Backbone,
    data: &SplitData,
    opts: &RetrainOptions,
) -> Result<EvalMetrics> {
    arch.validate()?;
    if &arch.backbone != backbone.config() {
        return Err(Error::MisalignedSites(
            "architecture was searched on a different backbone geometry".into(),
        ));
    }
    let kept: Vec<_> = arch.sites.iter().filter(|s| s.kept).map(|s| (s.kind, s.position)).collect();
    let space = SpaceConfig {
        dims: arch.dims.clone(),
        adapter_nonlinearity: arch.adapter_nonlinearity,
        ..SpaceConfig::default()
    };
    let mut net = SupernetState::with_sites(&kept, &space, backbone, opts.seed)?;
    let dims: Vec<Option<usize>> = arch.sites.iter().filter(|s| s.kept).map(|s| Some(s.dim)).collect();
    let mode = MixMode::Discrete(crate::supernet::DiscreteArch {
        keep: vec![true; kept.len()],
        dims,
    });
    if !kept.is_empty() {
        let mut opt = AdamW::new(opts.lr, opts.weight_decay, opts.steps);
        let mut batch_rng = rng::stream(opts.seed, "retrain-batches");
        let mut noise = rng::stream(opts.seed, "retrain-noise");
        let train = Trainable {
            weights: true,
            ..Default::default()
        };
        for _ in 0..opts.steps {
            let batch = data.train.sample_batch(&mut batch_rng, opts.batch_size);
            let grads = {
                let mut hook = SupernetHook::new(&net, &mode, train, 1.0, &mut noise)?;
                let mut built = backbone.build_graph(&batch, &mut hook)?;
                built.run()?;
                built.graph.backward(built.loss)?
            };
            opt.begin_step();
            for site in net.sites_mut() {
                let names: Vec<(&'static str, String)> =
                    site.weights().iter().map(|(p, _)| (*p, site.param_name(p))).collect();
                for (part, name) in names {
                    if let Some(g) = grads.get(&name) {
                        opt.update(&name, site.weight_mut(part).expect("part").values_mut(), g.values());
                    }
                }
            }
        }
    }
    let (val_loss, val_accuracy) = evaluate(backbone, &net, &mode, &data.val)?;
    let (test_loss, test_accuracy) = evaluate(backbone, &net, &mode, &data.test)?;
    Ok(EvalMetrics {
        val_accuracy,
        val_loss,
        test_accuracy,
        test_loss,
        trainable_params: arch.total_params,
    })
}

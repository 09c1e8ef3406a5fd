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

//! A small frozen transformer encoder classifier with named attachment
//! positions for PEFT modules.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Bindings, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng;
use crate::task::{generate_task, Batch, SyntheticTask};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    /// Also expose the post-FFN layer norm as an attachment position.
    pub ffn_ln_position: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 32,
            ffn_dim: 64,
            num_heads: 2,
            vocab_size: 32,
            max_seq_len: 16,
            num_classes: 4,
            ffn_ln_position: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone {name} must be positive")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PositionKind {
    Q,
    K,
    V,
    O,
    W1,
    W2,
    /// Post-attention layer norm.
    LN,
    /// Post-FFN layer norm, cataloged only when enabled in the config.
    LN2,
}

impl PositionKind {
    pub fn is_linear(self) -> bool {
        !matches!(self, PositionKind::LN | PositionKind::LN2)
    }

    pub fn is_layer_norm(self) -> bool {
        !self.is_linear()
    }

    fn as_str(self) -> &'static str {
        match self {
            PositionKind::Q => "Q",
            PositionKind::K => "K",
            PositionKind::V => "V",
            PositionKind::O => "O",
            PositionKind::W1 => "W1",
            PositionKind::W2 => "W2",
            PositionKind::LN => "LN",
            PositionKind::LN2 => "LN2",
        }
    }
}

impl fmt::Display for PositionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub layer: usize,
    pub kind: PositionKind,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.kind)
    }
}

/// Callbacks through which PEFT modules modify the backbone's forward pass.
pub trait PeftHook {
    /// `input` feeds the linear map at `pos`; `output` is its biased result.
    /// Returns the node that replaces `output`.
    fn linear(
        &mut self,
        g: &mut Graph,
        bindings: &mut Bindings,
        pos: Position,
        input: NodeId,
        output: NodeId,
    ) -> Result<NodeId>;

    /// `normalized` is the layer norm before its affine; `output` after it.
    fn layer_norm(
        &mut self,
        g: &mut Graph,
        bindings: &mut Bindings,
        pos: Position,
        normalized: NodeId,
        output: NodeId,
    ) -> Result<NodeId>;
}

/// The identity hook: the plain frozen backbone.
pub struct NoPeft;

impl PeftHook for NoPeft {
    fn linear(
        &mut self,
        _: &mut Graph,
        _: &mut Bindings,
        _: Position,
        _: NodeId,
        output: NodeId,
    ) -> Result<NodeId> {
        Ok(output)
    }

    fn layer_norm(
        &mut self,
        _: &mut Graph,
        _: &mut Bindings,
        _: Position,
        _: NodeId,
        output: NodeId,
    ) -> Result<NodeId> {
        Ok(output)
    }
}

/// A graph ready for [`Graph::forward`].
pub struct BuiltGraph {
    pub graph: Graph,
    pub bindings: Bindings,
    pub loss: NodeId,
    pub logits: NodeId,
}

impl BuiltGraph {
    pub fn run(&mut self) -> Result<f64> {
        self.graph.forward(&self.bindings)?;
        Ok(self.graph.value(self.loss)[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    seed: u64,
    params: BTreeMap<String, Tensor>,
    catalog: Vec<Position>,
    frozen: bool,
    pretrain_loss: Option<f64>,
}

/// Loss curve of a pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

impl PretrainReport {
    fn window_mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    pub fn head_mean(&self, n: usize) -> Option<f64> {
        (self.losses.len() >= n).then(|| Self::window_mean(&self.losses[..n]))
    }

    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        (self.losses.len() >= n).then(|| Self::window_mean(&self.losses[self.losses.len() - n..]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainOptions {
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_size: 32,
        }
    }
}

fn catalog_for(config: &BackboneConfig) -> Vec<Position> {
    use PositionKind::*;
    let mut out = Vec::new();
    for layer in 0..config.num_layers {
        for kind in [Q, K, V, O, W1, W2, LN] {
            out.push(Position { layer, kind });
        }
        if config.ffn_ln_position {
            out.push(Position { layer, kind: LN2 });
        }
    }
    out
}

fn linear_param_names(pos: Position) -> (String, String) {
    let stem = match pos.kind {
        PositionKind::Q => "q",
        PositionKind::K => "k",
        PositionKind::V => "v",
        PositionKind::O => "o",
        PositionKind::W1 => "ffn1",
        PositionKind::W2 => "ffn2",
        _ => unreachable!("not a linear position"),
    };
    (
        format!("l{}.{stem}.w", pos.layer),
        format!("l{}.{stem}.b", pos.layer),
    )
}

pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<Backbone> {
    config.validate()?;
    let mut rng = rng::stream(seed, "backbone");
    let d = config.model_dim;
    let mut params = BTreeMap::new();
    let mut normal = |name: String, shape: Vec<usize>, std: f64| {
        let n = shape.iter().product();
        let t = Tensor::new(shape, rng::normal_vec(&mut rng, n, std)).unwrap();
        params.insert(name, t);
    };
    normal("tok_emb".into(), vec![config.vocab_size, d], 1.0);
    normal("pos_emb".into(), vec![config.max_seq_len, d], 0.5);
    for layer in 0..config.num_layers {
        use PositionKind::*;
        for kind in [Q, K, V, O, W1, W2] {
            let pos = Position { layer, kind };
            let (d_in, d_out) = linear_dims(config, pos).unwrap();
            let (w, _) = linear_param_names(pos);
            normal(w, vec![d_in, d_out], 1.0 / (d_in as f64).sqrt());
        }
    }
    normal("head.w".into(), vec![d, config.num_classes], 1.0 / (d as f64).sqrt());
    for layer in 0..config.num_layers {
        use PositionKind::*;
        for kind in [Q, K, V, O, W1, W2] {
            let pos = Position { layer, kind };
            let (_, d_out) = linear_dims(config, pos).unwrap();
            params.insert(linear_param_names(pos).1, Tensor::zeros(vec![d_out]));
        }
        for ln in ["ln1", "ln2"] {
            params.insert(format!("l{layer}.{ln}.g"), Tensor::vector(vec![1.0; d]));
            params.insert(format!("l{layer}.{ln}.b"), Tensor::zeros(vec![d]));
        }
    }
    params.insert("head.b".into(), Tensor::zeros(vec![config.num_classes]));
    Ok(Backbone {
        config: config.clone(),
        seed,
        params,
        catalog: catalog_for(config),
        frozen: false,
        pretrain_loss: None,
    })
}

/// `(d_in, d_out)` of the linear map at `pos`, `None` for layer norms.
pub fn linear_dims(config: &BackboneConfig, pos: Position) -> Option<(usize, usize)> {
    let (d, f) = (config.model_dim, config.ffn_dim);
    match pos.kind {
        PositionKind::Q | PositionKind::K | PositionKind::V | PositionKind::O => Some((d, d)),
        PositionKind::W1 => Some((d, f)),
        PositionKind::W2 => Some((f, d)),
        PositionKind::LN | PositionKind::LN2 => None,
    }
}

/// Width of the activation produced at `pos`.
pub fn output_width(config: &BackboneConfig, pos: Position) -> usize {
    linear_dims(config, pos).map_or(config.model_dim, |(_, out)| out)
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn catalog(&self) -> &[Position] {
        &self.catalog
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn pretrain_loss(&self) -> Option<f64> {
        self.pretrain_loss
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// SHA-256 over parameter names, shapes and value bits.
    pub fn param_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn from_parts(
        config: BackboneConfig,
        seed: u64,
        params: BTreeMap<String, Tensor>,
        frozen: bool,
        pretrain_loss: Option<f64>,
    ) -> Result<Self> {
        let reference = build_backbone(&config, seed)?;
        for (name, t) in &reference.params {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Config("checkpoint has unknown parameters".into()));
        }
        Ok(Self {
            catalog: catalog_for(&config),
            config,
            seed,
            params,
            frozen,
            pretrain_loss,
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let s = batch.seq_len;
        if s == 0 || s > self.config.max_seq_len {
            return Err(Error::Config(format!(
                "sequence length {s} outside 1..={}",
                self.config.max_seq_len
            )));
        }
        if batch.ids.len() != s * batch.batch_size() || batch.labels.is_empty() {
            return Err(Error::Config("batch ids do not match labels".into()));
        }
        if let Some(&t) = batch.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Config(format!(
                "token id {t} >= vocab size {}",
                self.config.vocab_size
            )));
        }
        if let Some(&l) = batch.labels.iter().find(|&&l| l >= self.config.num_classes) {
            return Err(Error::Config(format!(
                "label {l} >= num_classes {}",
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Builds the forward graph for `batch`. Backbone parameters are bound
    /// with `requires_grad = frozen.not()`.
    pub fn build_graph(&self, batch: &Batch, hook: &mut dyn PeftHook) -> Result<BuiltGraph> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (bsz, seq, d, heads) = (batch.batch_size(), batch.seq_len, cfg.model_dim, cfg.num_heads);
        let mut g = Graph::new();
        let mut bindings = Bindings::new();
        let trainable = !self.frozen;
        let param = |g: &mut Graph, b: &mut Bindings, name: &str| -> NodeId {
            b.entry(name.to_string())
                .or_insert_with(|| self.params[name].clone().requiring_grad(trainable));
            g.input(name)
        };

        let tok = param(&mut g, &mut bindings, "tok_emb");
        let pos_table = param(&mut g, &mut bindings, "pos_emb");
        let e_tok = g.embedding(tok, batch.ids.clone());
        let pos_ids: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
        let e_pos = g.embedding(pos_table, pos_ids);
        let mut x = g.add(e_tok, e_pos);

        for layer in 0..cfg.num_layers {
            let lin = |g: &mut Graph,
                       b: &mut Bindings,
                       hook: &mut dyn PeftHook,
                       kind,
                       input|
             -> Result<NodeId> {
                let pos = Position { layer, kind };
                let (wn, bn) = linear_param_names(pos);
                let w = param(g, b, &wn);
                let bias = param(g, b, &bn);
                let y = g.matmul(input, w);
                let y = g.add(y, bias);
                hook.linear(g, b, pos, input, y)
            };
            let q = lin(&mut g, &mut bindings, &mut *hook, PositionKind::Q, x)?;
            let k = lin(&mut g, &mut bindings, &mut *hook, PositionKind::K, x)?;
            let v = lin(&mut g, &mut bindings, &mut *hook, PositionKind::V, x)?;
            let qh = g.split_heads(q, bsz, seq, heads);
            let kh = g.split_heads(k, bsz, seq, heads);
            let vh = g.split_heads(v, bsz, seq, heads);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
            let att = g.softmax(scores);
            let ctx = g.matmul(att, vh);
            let ctx = g.merge_heads(ctx, bsz, seq, heads);
            let o = lin(&mut g, &mut bindings, &mut *hook, PositionKind::O, ctx)?;

            let h = g.add(x, o);
            let h = self.layer_norm_block(
                &mut g,
                &mut bindings,
                &mut *hook,
                h,
                layer,
                "ln1",
                Some(PositionKind::LN),
            )?;
            let f1 = lin(&mut g, &mut bindings, &mut *hook, PositionKind::W1, h)?;
            let a = g.gelu(f1);
            let f2 = lin(&mut g, &mut bindings, &mut *hook, PositionKind::W2, a)?;
            let r = g.add(h, f2);
            let ln2 = cfg.ffn_ln_position.then_some(PositionKind::LN2);
            x = self.layer_norm_block(&mut g, &mut bindings, &mut *hook, r, layer, "ln2", ln2)?;
        }

        let pooled = g.mean_pool(x, seq);
        let hw = param(&mut g, &mut bindings, "head.w");
        let hb = param(&mut g, &mut bindings, "head.b");
        let logits = g.matmul(pooled, hw);
        let logits = g.add(logits, hb);
        let loss = g.cross_entropy(logits, batch.labels.clone());
        Ok(BuiltGraph {
            graph: g,
            bindings,
            loss,
            logits,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_block(
        &self,
        g: &mut Graph,
        bindings: &mut Bindings,
        hook: &mut dyn PeftHook,
        x: NodeId,
        layer: usize,
        stem: &str,
        position: Option<PositionKind>,
    ) -> Result<NodeId> {
        let trainable = !self.frozen;
        let gn = format!("l{layer}.{stem}.g");
        let bn = format!("l{layer}.{stem}.b");
        for name in [&gn, &bn] {
            bindings
                .entry(name.clone())
                .or_insert_with(|| self.params[name.as_str()].clone().requiring_grad(trainable));
        }
        let gain = g.input(gn);
        let bias = g.input(bn);
        let normalized = g.layer_norm(x);
        let y = g.mul(normalized, gain);
        let y = g.add(y, bias);
        match position {
            Some(kind) => hook.layer_norm(g, bindings, Position { layer, kind }, normalized, y),
            None => Ok(y),
        }
    }

    /// Plain forward of the backbone without PEFT modules.
    pub fn forward(&self, batch: &Batch) -> Result<(f64, Tensor)> {
        let mut built = self.build_graph(batch, &mut NoPeft)?;
        let loss = built.run()?;
        Ok((loss, built.graph.tensor(built.logits)))
    }
}

/// Trains every backbone parameter by plain gradient descent on `task`,
/// then freezes the backbone for good.
pub fn pretrain_backbone(
    backbone: Backbone,
    task: &SyntheticTask,
    steps: usize,
    opts: &PretrainOptions,
) -> Result<(Backbone, PretrainReport)> {
    let mut bb = backbone;
    if bb.frozen {
        return Err(Error::Config("backbone is already frozen".into()));
    }
    let data = generate_task(task)?;
    let mut rng = rng::stream(task.seed, "pretrain-batches");
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = data.train.sample_batch(&mut rng, opts.batch_size);
        let mut built = bb.build_graph(&batch, &mut NoPeft)?;
        losses.push(built.run()?);
        let grads = built.graph.backward(built.loss)?;
        for (name, grad) in grads {
            let p = bb.params.get_mut(&name).expect("backbone param");
            for (w, g) in p.values_mut().iter_mut().zip(grad.values()) {
                *w -= opts.lr * g;
            }
        }
    }
    bb.frozen = true;
    bb.pretrain_loss = losses.last().copied();
    Ok((bb, PretrainReport { losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskKind;

    #[test]
    fn catalog_has_seven_positions_per_layer() {
        let b = build_backbone(&BackboneConfig::default(), 0).unwrap();
        assert_eq!(b.catalog().len(), 14);
        let one = BackboneConfig {
            num_layers: 1,
            ..Default::default()
        };
        assert_eq!(build_backbone(&one, 0).unwrap().catalog().len(), 7);
        let extended = BackboneConfig {
            ffn_ln_position: true,
            ..Default::default()
        };
        assert_eq!(build_backbone(&extended, 0).unwrap().catalog().len(), 16);
    }

    #[test]
    fn same_seed_same_parameters() {
        let c = BackboneConfig::default();
        let a = build_backbone(&c, 3).unwrap();
        let b = build_backbone(&c, 3).unwrap();
        assert_eq!(a.param_digest(), b.param_digest());
        assert_ne!(a.param_digest(), build_backbone(&c, 4).unwrap().param_digest());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = BackboneConfig {
            num_heads: 3,
            ..Default::default()
        };
        assert!(build_backbone(&c, 0).is_err());
    }

    #[test]
    fn zero_pretrain_steps_is_a_noop() {
        let b = build_backbone(&BackboneConfig::default(), 1).unwrap();
        let digest = b.param_digest();
        let task = SyntheticTask::new(TaskKind::CopyClass, 32, 8, 4);
        let (b, rep) = pretrain_backbone(b, &task, 0, &PretrainOptions::default()).unwrap();
        assert_eq!(b.param_digest(), digest);
        assert!(rep.losses.is_empty());
        assert!(b.is_frozen());
    }

    #[test]
    fn frozen_backbone_yields_no_backbone_gradients() {
        let b = build_backbone(&BackboneConfig::default(), 1).unwrap();
        let task = SyntheticTask::new(TaskKind::CopyClass, 32, 8, 4);
        let (b, _) = pretrain_backbone(b, &task, 1, &PretrainOptions::default()).unwrap();
        let data = generate_task(&task).unwrap();
        let mut built = b.build_graph(&data.train.batch(&[0, 1]), &mut NoPeft).unwrap();
        built.run().unwrap();
        assert!(built.graph.backward(built.loss).unwrap().is_empty());
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let b = build_backbone(&BackboneConfig::default(), 1).unwrap();
        let batch = Batch {
            ids: vec![40; 4],
            labels: vec![0],
            seq_len: 4,
        };
        assert!(b.forward(&batch).is_err());
    }
}

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

use std::collections::HashMap;

/// AdamW with decoupled weight decay and a linear learning-rate decay to
/// zero over `total_steps`.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    total_steps: usize,
    step: usize,
    slots: HashMap<String, Moments>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            total_steps: total_steps.max(1),
            step: 0,
            slots: HashMap::new(),
        }
    }

    /// Advances the shared step counter; call once per optimization step
    /// before any [`AdamW::update`].
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn current_lr(&self) -> f64 {
        let done = self.step.saturating_sub(1) as f64 / self.total_steps as f64;
        self.lr * (1.0 - done).max(0.0)
    }

    pub fn update(&mut self, key: &str, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        let t = self.step.max(1) as i32;
        let lr = self.current_lr();
        if lr == 0.0 {
            return;
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let slot = self
            .slots
            .entry(key.to_string())
            .or_insert_with(|| Moments {
                m: vec![0.0; params.len()],
                v: vec![0.0; params.len()],
            });
        for j in 0..params.len() {
            let g = grads[j];
            slot.m[j] = b1 * slot.m[j] + (1.0 - b1) * g;
            slot.v[j] = b2 * slot.v[j] + (1.0 - b2) * g * g;
            let mhat = slot.m[j] / c1;
            let vhat = slot.v[j] / c2;
            params[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[j]);
        }
    }
}

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

//! Budget-driven module removal and dimension fixing.

use crate::autodiff::argmax;
use crate::sensitivity::cosine;
use crate::supernet::ArchWeights;
use crate::{Error, Result};

/// Per-site keep/determined flags and the trigger counter. Flags only
/// move one way: a removed site never comes back and a fixed dimension
/// never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionState {
    keep: Vec<bool>,
    determined: Vec<bool>,
    k_star: Vec<Option<usize>>,
    z: usize,
    max_triggers: usize,
    v_prev: Vec<usize>,
}

impl SelectionState {
    /// Every site starts kept. Sites whose size does not depend on the
    /// dimension choice start determined at index 0.
    pub fn new(dimension_free: &[bool], max_triggers: usize) -> Self {
        let n = dimension_free.len();
        Self {
            keep: vec![true; n],
            determined: dimension_free.to_vec(),
            k_star: dimension_free
                .iter()
                .map(|&f| if f { Some(0) } else { None })
                .collect(),
            z: 0,
            max_triggers,
            v_prev: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn determined(&self) -> &[bool] {
        &self.determined
    }

    pub fn k_star(&self) -> &[Option<usize>] {
        &self.k_star
    }

    pub fn z(&self) -> usize {
        self.z
    }

    pub fn max_triggers(&self) -> usize {
        self.max_triggers
    }

    pub fn exhausted(&self) -> bool {
        self.z >= self.max_triggers
    }

    pub fn v_prev(&self) -> &[usize] {
        &self.v_prev
    }

    pub fn set_v_prev(&mut self, v: Vec<usize>) {
        assert_eq!(v.len(), self.len());
        self.v_prev = v;
    }

    /// Number of sites whose dimension is still open.
    pub fn undetermined_count(&self) -> usize {
        self.determined.iter().filter(|&&d| !d).count()
    }

    /// Drops a site. Its dimension counts as decided from now on.
    pub fn remove(&mut self, n: usize) {
        self.keep[n] = false;
        self.determined[n] = true;
    }

    /// Pins a kept site's dimension index.
    pub fn fix(&mut self, n: usize, k: usize) {
        assert!(self.keep[n], "cannot fix the dimension of a removed site");
        assert!(!self.determined[n], "site {n} is already determined");
        self.determined[n] = true;
        self.k_star[n] = Some(k);
    }

    /// Starts a fresh trigger schedule, used between the two stages of a
    /// staged search.
    pub fn restart_schedule(&mut self) {
        self.z = 0;
    }

    pub fn advance(&mut self) -> Result<()> {
        if self.exhausted() {
            return Err(Error::TriggersExhausted {
                z: self.z,
                max: self.max_triggers,
            });
        }
        self.z += 1;
        Ok(())
    }
}

/// Expected parameter count of each kept site given it is switched on:
/// the pinned count if its dimension is fixed, else the phi-weighted mean.
/// Removed sites give 0.
pub fn conditional_site_counts(arch: &ArchWeights, sel: &SelectionState, q: &[Vec<usize>]) -> Vec<f64> {
    (0..arch.n())
        .map(|n| {
            if !sel.keep[n] {
                return 0.0;
            }
            match sel.k_star[n] {
                Some(k) if sel.determined[n] => q[n][k] as f64,
                _ => arch
                    .phi_probs(n)
                    .iter()
                    .zip(&q[n])
                    .map(|(p, &c)| p * c as f64)
                    .sum(),
            }
        })
        .collect()
}

/// Expected trainable parameters per site. `q[n][k]` is the count of site
/// `n` at dimension index `k`.
pub fn expected_site_counts(
    arch: &ArchWeights,
    sel: &SelectionState,
    q: &[Vec<usize>],
) -> Vec<f64> {
    if arch.is_entangled() {
        return (0..arch.n())
            .map(|n| {
                let joint = arch.joint_probs(n).expect("entangled");
                joint[1..].iter().zip(&q[n]).map(|(p, &c)| p * c as f64).sum()
            })
            .collect();
    }
    conditional_site_counts(arch, sel, q)
        .into_iter()
        .enumerate()
        .map(|(n, c)| if c == 0.0 { 0.0 } else { arch.keep_prob(n) * c })
        .collect()
}

pub fn expected_parameters(arch: &ArchWeights, sel: &SelectionState, q: &[Vec<usize>]) -> f64 {
    expected_site_counts(arch, sel, q).iter().sum()
}

/// Parameters that must go at this trigger so the remaining triggers can
/// close the gap to the budget evenly.
pub fn reduction_target(expected: f64, budget: f64, max_triggers: usize, z: usize) -> Result<f64> {
    if z >= max_triggers {
        return Err(Error::TriggersExhausted { z, max: max_triggers });
    }
    Ok((expected - budget) / (max_triggers - z) as f64)
}

/// Removes the least sensitive kept sites while the cumulative expected
/// count stays within `target`. Ties remove the higher index first.
/// Stops at the first site that would overflow. Returns removed indices in
/// removal order.
pub fn select_modules_to_remove(
    s_bar: &[f64],
    sel: &mut SelectionState,
    expected_counts: &[f64],
    target: f64,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sel.len()).filter(|&i| sel.keep[i]).collect();
    order.sort_by(|&a, &b| s_bar[a].total_cmp(&s_bar[b]).then(b.cmp(&a)));
    let mut total = 0.0;
    let mut removed = Vec::new();
    for i in order {
        if total + expected_counts[i] > target {
            break;
        }
        total += expected_counts[i];
        sel.remove(i);
        removed.push(i);
    }
    removed
}

const PROB_FLOOR: f64 = 1e-8;

/// Stability of one site's dimension distribution over a window of
/// softmax rows: mean per-entry population standard deviation times the
/// KL divergence from the first row to the last. Windows shorter than two
/// rows are maximally unstable.
pub fn dimension_stability(window: &[Vec<f64>]) -> f64 {
    if window.len() < 2 {
        return f64::INFINITY;
    }
    let k = window[0].len();
    let m = window.len() as f64;
    let mean_std = (0..k)
        .map(|j| {
            let mean = window.iter().map(|r| r[j]).sum::<f64>() / m;
            let var = window.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / m;
            var.sqrt()
        })
        .sum::<f64>()
        / k as f64;
    let (first, last) = (&window[0], &window[window.len() - 1]);
    let kl: f64 = first
        .iter()
        .zip(last)
        .map(|(&p, &q)| {
            let (p, q) = (p.max(PROB_FLOOR), q.max(PROB_FLOOR));
            p * (p / q).ln()
        })
        .sum();
    mean_std * kl.max(0.0)
}

/// Dimension each site would get if the search stopped now: 0 for removed
/// sites, the pinned dimension for fixed ones, the most likely one
/// otherwise (ties to the smaller index).
pub fn potential_dims(arch: &ArchWeights, sel: &SelectionState, dims: &[usize]) -> Vec<usize> {
    (0..sel.len())
        .map(|n| {
            if !sel.keep[n] {
                0
            } else if let (true, Some(k)) = (sel.determined[n], sel.k_star[n]) {
                dims[k]
            } else {
                dims[argmax(arch.phi_row(n))]
            }
        })
        .collect()
}

/// How many dimensions to pin at this trigger: the open-site count scaled
/// by how much the potential dimensions moved since the last trigger and
/// spread over the remaining triggers.
pub fn dim_fix_count(
    undetermined: usize,
    v_prev: &[usize],
    v_now: &[usize],
    max_triggers: usize,
    z: usize,
) -> Result<usize> {
    if z >= max_triggers {
        return Err(Error::TriggersExhausted { z, max: max_triggers });
    }
    let a: Vec<f64> = v_prev.iter().map(|&x| x as f64).collect();
    let b: Vec<f64> = v_now.iter().map(|&x| x as f64).collect();
    let c = cosine(&a, &b).max(0.0);
    // The guard absorbs rounding in the cosine of identical vectors.
    let y = undetermined as f64 * c / (max_triggers - z) as f64;
    Ok((y + 1e-9).floor() as usize)
}

/// Pins the `count` most stable open, kept sites (ties to the lower index)
/// at their potential dimension. Returns the fixed indices.
pub fn fix_dimensions(
    lambda: &[f64],
    count: usize,
    v_now: &[usize],
    dims: &[usize],
    sel: &mut SelectionState,
) -> Vec<usize> {
    let mut open: Vec<usize> = (0..sel.len())
        .filter(|&i| sel.keep[i] && !sel.determined[i])
        .collect();
    open.sort_by(|&a, &b| lambda[a].total_cmp(&lambda[b]).then(a.cmp(&b)));
    open.truncate(count);
    for &i in &open {
        let k = dims
            .iter()
            .position(|&d| d == v_now[i])
            .expect("potential dimension of a kept site lies in the dimension set");
        sel.fix(i, k);
    }
    open
}

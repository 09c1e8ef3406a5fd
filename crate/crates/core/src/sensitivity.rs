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

//! Module sensitivity scores, their exponential moving average, the
//! budget-aware importance indicator and the stability trigger.

use std::collections::VecDeque;

/// Cosine similarity with the conventions `cos(0, 0) = 1` and
/// `cos(0, x) = 0` for nonzero `x`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (na * nb).sqrt()
        }
    }
}

/// Average magnitude of the gradient-weight product over a module.
fn grad_weight_magnitude(weights: &[f64], grads: &[f64]) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    weights
        .iter()
        .zip(grads)
        .map(|(w, g)| (w * g).abs())
        .sum::<f64>()
        / weights.len() as f64
}

/// Raw per-module sensitivity: the train-split gradient-weight magnitude
/// plus the validation-split magnitude weighted by the cosine between the
/// two gradients. Zero-norm gradients give a cosine of 0. Removed modules
/// score 0.
///
/// Each site's arrays are its trainable parameters flattened and
/// concatenated in a fixed order.
pub fn module_sensitivity(
    grads_train: &[Vec<f64>],
    grads_val: &[Vec<f64>],
    weights: &[Vec<f64>],
    keep: &[bool],
) -> Vec<f64> {
    let n = weights.len();
    assert!(grads_train.len() == n && grads_val.len() == n && keep.len() == n);
    (0..n)
        .map(|i| {
            if !keep[i] {
                return 0.0;
            }
            let (w, gt, gv) = (&weights[i], &grads_train[i], &grads_val[i]);
            let f_train = grad_weight_magnitude(w, gt);
            let f_val = grad_weight_magnitude(w, gv);
            let zt = gt.iter().all(|&x| x == 0.0);
            let zv = gv.iter().all(|&x| x == 0.0);
            let alpha = if zt || zv { 0.0 } else { cosine(gt, gv) };
            f_train + alpha * f_val
        })
        .collect()
}

/// Exponentially smoothed sensitivities.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityState {
    s_bar: Vec<f64>,
    gamma: f64,
    initialized: Vec<bool>,
}

impl SensitivityState {
    pub fn new(n: usize, gamma: f64) -> Self {
        assert!((0.0..=1.0).contains(&gamma), "gamma must lie in [0, 1]");
        Self {
            s_bar: vec![0.0; n],
            gamma,
            initialized: vec![false; n],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.s_bar
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_initialized(&self, n: usize) -> bool {
        self.initialized[n]
    }

    /// `s̄ ← γ s̄ + (1 − γ) s`; the first observation of an entry is taken
    /// verbatim.
    pub fn ema_update(&mut self, raw: &[f64]) {
        assert_eq!(raw.len(), self.s_bar.len());
        for ((s, init), &r) in self.s_bar.iter_mut().zip(&mut self.initialized).zip(raw) {
            debug_assert!(r.is_finite());
            if *init {
                *s = self.gamma * *s + (1.0 - self.gamma) * r;
            } else {
                *s = r;
                *init = true;
            }
        }
    }
}

/// Marks the top-sensitivity kept modules whose cumulative expected
/// parameter count stays within `budget`. Ranking is by descending `s_bar`
/// with ties to the lower index; accumulation stops at the first module
/// that would overflow.
pub fn importance_indicator(
    s_bar: &[f64],
    expected_counts: &[f64],
    keep: &[bool],
    budget: f64,
) -> Vec<bool> {
    let n = s_bar.len();
    let mut out = vec![false; n];
    if budget <= 0.0 {
        return out;
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    order.sort_by(|&a, &b| s_bar[b].total_cmp(&s_bar[a]).then(a.cmp(&b)));
    let mut total = 0.0;
    for i in order {
        if total + expected_counts[i] > budget {
            break;
        }
        total += expected_counts[i];
        out[i] = true;
    }
    out
}

/// The most recent `window + 1` importance indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorHistory {
    window: usize,
    buf: VecDeque<Vec<bool>>,
}

impl IndicatorHistory {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1, "window must be positive");
        Self {
            window,
            buf: VecDeque::with_capacity(window + 1),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn push(&mut self, indicator: Vec<bool>) {
        if self.buf.len() == self.window + 1 {
            self.buf.pop_front();
        }
        self.buf.push_back(indicator);
    }

    pub fn clear(&mut self) {
        self.buf.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<bool>> {
        self.buf.iter()
    }
}

fn as_f64(v: &[bool]) -> Vec<f64> {
    v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Mean cosine similarity over the `H` most recent consecutive indicator
/// pairs, and whether it reaches `tau`. Until `H + 1` indicators have been
/// recorded the result is `(0, false)`.
pub fn stability_and_trigger(history: &IndicatorHistory, tau: f64) -> (f64, bool) {
    if history.len() < history.window + 1 {
        return (0.0, false);
    }
    let vecs: Vec<Vec<f64>> = history.iter().map(|v| as_f64(v)).collect();
    let total: f64 = vecs.windows(2).map(|p| cosine(&p[0], &p[1])).sum();
    let beta = total / history.window as f64;
    (beta, beta >= tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sensitivity_hand_example() {
        let s = module_sensitivity(
            &[vec![0.5, 0.5]],
            &[vec![0.5, 0.5]],
            &[vec![1.0, -2.0]],
            &[true],
        );
        assert!((s[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn anti_aligned_gradients_cancel() {
        let s = module_sensitivity(
            &[vec![0.3, -0.1]],
            &[vec![-0.3, 0.1]],
            &[vec![1.0, 2.0]],
            &[true],
        );
        assert!(s[0].abs() < 1e-15);
    }

    #[test]
    fn zero_gradients_and_removed_sites_score_zero() {
        let s = module_sensitivity(
            &[vec![0.0; 2], vec![1.0, 1.0]],
            &[vec![0.0; 2], vec![1.0, 1.0]],
            &[vec![1.0, 2.0], vec![1.0, 1.0]],
            &[true, false],
        );
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn ema_arithmetic() {
        let mut st = SensitivityState::new(1, 0.85);
        st.ema_update(&[0.5]);
        st.ema_update(&[1.0]);
        assert!((st.values()[0] - 0.575).abs() < 1e-15);
    }

    #[test]
    fn ema_first_observation_verbatim() {
        let mut st = SensitivityState::new(1, 0.85);
        st.ema_update(&[0.3]);
        assert_eq!(st.values()[0], 0.3);
    }

    #[test]
    fn ema_gamma_one_freezes() {
        let mut st = SensitivityState::new(2, 1.0);
        st.ema_update(&[0.4, 0.2]);
        for r in [[9.0, 1.0], [0.0, 0.0], [3.0, 7.0]] {
            st.ema_update(&r);
            assert_eq!(st.values(), &[0.4, 0.2]);
        }
    }

    #[test]
    fn indicator_greedy_example() {
        let i = importance_indicator(
            &[3.0, 2.0, 1.0],
            &[100.0, 100.0, 100.0],
            &[true; 3],
            250.0,
        );
        assert_eq!(i, vec![true, true, false]);
    }

    #[test]
    fn indicator_non_binding_and_empty_budget() {
        let keep = [true, false, true];
        let i = importance_indicator(&[1.0, 2.0, 3.0], &[5.0; 3], &keep, 1e9);
        assert_eq!(i, keep.to_vec());
        let i = importance_indicator(&[1.0, 2.0, 3.0], &[5.0; 3], &keep, 0.0);
        assert_eq!(i, vec![false; 3]);
    }

    #[test]
    fn identical_indicators_fire() {
        let mut h = IndicatorHistory::new(5);
        for _ in 0..6 {
            h.push(vec![true, false, true]);
        }
        assert_eq!(stability_and_trigger(&h, 1.0), (1.0, true));
    }

    #[test]
    fn alternating_disjoint_indicators_never_fire() {
        let mut h = IndicatorHistory::new(5);
        for t in 0..12 {
            h.push(if t % 2 == 0 {
                vec![true, false]
            } else {
                vec![false, true]
            });
            let (beta, fire) = stability_and_trigger(&h, 0.01);
            assert_eq!(beta, 0.0);
            assert!(!fire);
        }
    }

    #[test]
    fn warm_up_never_fires() {
        let mut h = IndicatorHistory::new(5);
        for _ in 0..5 {
            h.push(vec![true]);
            assert_eq!(stability_and_trigger(&h, 0.0), (0.0, false));
        }
        h.push(vec![true]);
        assert!(stability_and_trigger(&h, 0.0).1);
    }

    #[test]
    fn zero_vector_cosine_conventions() {
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    proptest! {
        #[test]
        fn beta_in_unit_interval(bits in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 6), 4..12)) {
            let mut h = IndicatorHistory::new(3);
            for b in bits {
                h.push(b);
                let (beta, _) = stability_and_trigger(&h, 0.85);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&beta));
            }
        }

        #[test]
        fn indicator_respects_budget(
            s in proptest::collection::vec(-1.0f64..5.0, 8),
            c in proptest::collection::vec(0.0f64..300.0, 8),
            keep in proptest::collection::vec(any::<bool>(), 8),
            budget in 0.0f64..1500.0,
        ) {
            let ind = importance_indicator(&s, &c, &keep, budget);
            let used: f64 = (0..8).filter(|&i| ind[i]).map(|i| c[i]).sum();
            prop_assert!(used <= budget);
            for i in 0..8 {
                prop_assert!(!ind[i] || keep[i]);
            }
        }

        #[test]
        fn scaling_scores_keeps_indicator(
            s in proptest::collection::vec(0.0f64..5.0, 8),
            c in proptest::collection::vec(1.0f64..300.0, 8),
            lambda in 0.01f64..100.0,
        ) {
            let keep = [true; 8];
            let mut a = SensitivityState::new(8, 0.85);
            let mut b = SensitivityState::new(8, 0.85);
            let scaled: Vec<f64> = s.iter().map(|x| x * lambda).collect();
            for _ in 0..3 {
                a.ema_update(&s);
                b.ema_update(&scaled);
            }
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x * lambda - y).abs() <= 1e-9 * y.abs().max(1.0));
            }
            prop_assert_eq!(
                importance_indicator(a.values(), &c, &keep, 700.0),
                importance_indicator(b.values(), &c, &keep, 700.0)
            );
        }

        #[test]
        fn ema_converges_monotonically(c in 0.0f64..10.0, start in 0.0f64..10.0, gamma in 0.0f64..0.99) {
            let mut st = SensitivityState::new(1, gamma);
            st.ema_update(&[start]);
            let mut gap = (start - c).abs();
            for _ in 0..50 {
                st.ema_update(&[c]);
                let g = (st.values()[0] - c).abs();
                prop_assert!(g <= gap + 1e-12);
                gap = g;
            }
        }

        #[test]
        fn sensitivity_is_permutation_equivariant(
            w in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 4),
            gt in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 4),
            gv in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 4),
        ) {
            let keep = [true; 4];
            let s = module_sensitivity(&gt, &gv, &w, &keep);
            let perm = [2usize, 0, 3, 1];
            let p = |v: &Vec<Vec<f64>>| perm.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
            let sp = module_sensitivity(&p(&gt), &p(&gv), &p(&w), &keep);
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(sp[k], s[i]);
            }
        }
    }
}

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


//! Acceptance suite. Runs every criterion in order on one thread and prints
//! one PASS/FAIL line each; exits nonzero if any hard criterion fails.
//!
//! `cargo test -p peftsearch-core --test acceptance -- 1 2 7` runs a subset.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use peftsearch_core::architecture::{random_architecture, Provenance, SearchedArchitecture};
use peftsearch_core::autodiff::{finite_diff_check, Bindings, Graph, NodeId, Tensor};
use peftsearch_core::backbone::{build_backbone, pretrain_backbone, Backbone};
use peftsearch_core::config::RunConfig;
use peftsearch_core::io::{emit_trace, export_architecture, import_architecture};
use peftsearch_core::rng::{self, StreamRng};
use peftsearch_core::search::{retrain, run_search, BudgetConfig, SearchMode, SearchTrace};
use peftsearch_core::selector::{expected_parameters, SelectionState};
use peftsearch_core::supernet::{
    forward_with_peft, mix_site_output, ArchWeights, DiscreteArch, MixMode, ModuleKind, SupernetState,
};
use peftsearch_core::task::{generate_task, SplitData};
use rand::Rng;

const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/keyed-lookup.toml");
const SEEDS: u64 = 10;
const RATIOS: [f64; 3] = [0.02, 0.05, 0.1];

struct Run {
    ratio: f64,
    seed: u64,
    mode: SearchMode,
    arch: SearchedArchitecture,
    trace: SearchTrace,
    elapsed: Duration,
    test_accuracy: Option<f64>,
}

struct Ctx {
    cfg: RunConfig,
    backbone: Backbone,
    data: SplitData,
    runs: Vec<Run>,
}

impl Ctx {
    fn new() -> Self {
        let cfg = RunConfig::load(std::path::Path::new(CONFIG)).expect("experiment config");
        cfg.validate().expect("valid experiment config");
        let bb = build_backbone(&cfg.backbone, cfg.pretrain.seed).unwrap();
        let (backbone, _) =
            pretrain_backbone(bb, &cfg.pretrain_task(), cfg.pretrain.steps, &cfg.pretrain.options()).unwrap();
        let data = generate_task(&cfg.task).unwrap();
        Ctx {
            cfg,
            backbone,
            data,
            runs: Vec::new(),
        }
    }

    fn budget_config(&self, ratio: f64, seed: u64, mode: SearchMode) -> BudgetConfig {
        BudgetConfig {
            budget_ratio: ratio,
            seed,
            mode,
            ..self.cfg.budget.clone()
        }
    }

    fn run(&mut self, ratio: f64, seed: u64, mode: SearchMode) -> &Run {
        let i = self.run_index(ratio, seed, mode);
        &self.runs[i]
    }

    fn run_index(&mut self, ratio: f64, seed: u64, mode: SearchMode) -> usize {
        let found = self.runs.iter().position(|r| r.ratio == ratio && r.seed == seed && r.mode == mode);
        match found {
            Some(i) => i,
            None => {
                let bc = self.budget_config(ratio, seed, mode);
                let t0 = Instant::now();
                let (arch, trace) = run_search(&self.backbone, &self.cfg.space, &self.data, &bc).unwrap();
                self.runs.push(Run {
                    ratio,
                    seed,
                    mode,
                    arch,
                    trace,
                    elapsed: t0.elapsed(),
                    test_accuracy: None,
                });
                self.runs.len() - 1
            }
        }
    }

    fn retrained_accuracy(&mut self, ratio: f64, seed: u64, mode: SearchMode) -> f64 {
        let mut opts = self.cfg.retrain.clone();
        opts.seed = seed;
        let i = self.run_index(ratio, seed, mode);
        if let Some(a) = self.runs[i].test_accuracy {
            return a;
        }
        let a = retrain(&self.runs[i].arch, &self.backbone, &self.data, &opts).unwrap().test_accuracy;
        self.runs[i].test_accuracy = Some(a);
        a
    }
}

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, id: usize, pass: bool, soft: bool, detail: String) {
        let verdict = match (pass, soft) {
            (true, _) => "PASS",
            (false, true) => "FAIL (soft)",
            (false, false) => "FAIL",
        };
        println!("criterion {id}: {verdict}: {detail}");
        if !pass && !soft {
            self.failed.push(id);
        }
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

// ---------------------------------------------------------------- 1

fn random_tensor(rng: &mut StreamRng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normal_vec(rng, n, std)).unwrap()
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;

struct Case {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    build: Build,
    /// Same graph with straight-through ops replaced by the identity, used
    /// for the numeric side of the check.
    reference: Option<Build>,
}

fn case(name: &'static str, inputs: Vec<Vec<usize>>, build: impl Fn(&mut Graph, &[NodeId]) -> NodeId + 'static) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(build),
        reference: None,
    }
}

fn gradient_cases(rng: &mut StreamRng) -> Vec<Case> {
    let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..6)).collect();
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    let pick = rng.random_range(0..12);
    let mut cases = vec![
        case("matmul", vec![vec![3, 4], vec![4, 2]], |g, x| g.matmul(x[0], x[1])),
        case("matmul batched", vec![vec![2, 3, 4], vec![2, 4, 3]], |g, x| g.matmul(x[0], x[1])),
        case("add", vec![vec![3, 4], vec![3, 4]], |g, x| g.add(x[0], x[1])),
        case("add row", vec![vec![3, 4], vec![4]], |g, x| g.add(x[0], x[1])),
        case("add scalar", vec![vec![3, 4], vec![1]], |g, x| g.add(x[0], x[1])),
        case("mul", vec![vec![3, 4], vec![3, 4]], |g, x| g.mul(x[0], x[1])),
        case("mul row", vec![vec![3, 4], vec![4]], |g, x| g.mul(x[0], x[1])),
        case("mul scalar", vec![vec![3, 4], vec![1]], |g, x| g.mul(x[0], x[1])),
        case("scale", vec![vec![3, 4]], |g, x| g.scale(x[0], -1.7)),
        case("softmax", vec![vec![3, 5]], |g, x| g.softmax(x[0])),
        case("layer_norm", vec![vec![3, 6]], |g, x| g.layer_norm(x[0])),
        case("gelu", vec![vec![3, 4]], |g, x| g.gelu(x[0])),
        case("embedding", vec![vec![6, 4]], move |g, x| g.embedding(x[0], ids.clone())),
        case("cross_entropy", vec![vec![4, 3]], move |g, x| g.cross_entropy(x[0], labels.clone())),
        case("sum", vec![vec![3, 4]], |g, x| g.sum(x[0])),
        case("reshape", vec![vec![3, 4]], |g, x| g.reshape(x[0], vec![2, 6])),
        case("split_heads", vec![vec![6, 4]], |g, x| g.split_heads(x[0], 2, 3, 2)),
        case("merge_heads", vec![vec![4, 3, 2]], |g, x| g.merge_heads(x[0], 2, 3, 2)),
        case("transpose", vec![vec![3, 4]], |g, x| g.transpose(x[0])),
        case("transpose batched", vec![vec![2, 3, 4]], |g, x| g.transpose(x[0])),
        case("mean_pool", vec![vec![6, 4]], |g, x| g.mean_pool(x[0], 3)),
        case("slice_cols", vec![vec![3, 5]], |g, x| g.slice_cols(x[0], 2)),
        case("slice_rows", vec![vec![5, 3]], |g, x| g.slice_rows(x[0], 2)),
        case("pick", vec![vec![3, 4]], move |g, x| g.pick(x[0], pick)),
    ];
    let mut ste = case("hard_one_hot", vec![vec![3, 4]], |g, x| {
        let p = g.softmax(x[0]);
        g.hard_one_hot(p)
    });
    ste.reference = Some(Box::new(|g, x| g.softmax(x[0])));
    cases.push(ste);
    cases
}

/// Builds `loss = sum(out * w)` for a fixed random `w`, so every output
/// entry reaches the loss with its own weight.
fn weighted_loss(build: &Build, shapes: &[Vec<usize>], bindings: &Bindings, rng: &mut StreamRng) -> (Graph, NodeId) {
    let mut probe = Graph::new();
    let ins: Vec<NodeId> = (0..shapes.len()).map(|i| probe.input(format!("x{i}"))).collect();
    let out = build(&mut probe, &ins);
    probe.forward(bindings).unwrap();
    let w = random_tensor(rng, probe.shape(out), 1.0);
    let mut g = Graph::new();
    let ins: Vec<NodeId> = (0..shapes.len()).map(|i| g.input(format!("x{i}"))).collect();
    let out = build(&mut g, &ins);
    let w = g.constant(w);
    let prod = g.mul(out, w);
    let loss = g.sum(prod);
    (g, loss)
}

fn criterion_1(report: &mut Report) {
    let t0 = Instant::now();
    let mut rng = rng::stream(1, "acceptance-gradients");
    let mut trials = 0;
    let mut worst: (f64, &str) = (0.0, "");
    let mut kinds = BTreeSet::new();
    for _round in 0..5 {
        for c in gradient_cases(&mut rng) {
            let bindings: Bindings = c
                .inputs
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("x{i}"), random_tensor(&mut rng, s, 1.0)))
                .collect();
            let mut wrng = rng.clone();
            let (mut g, loss) = weighted_loss(&c.build, &c.inputs, &bindings, &mut rng);
            for i in 0..c.inputs.len() {
                let name = format!("x{i}");
                let err = match &c.reference {
                    None => finite_diff_check(&mut g, &bindings, loss, &name, 1e-5).unwrap(),
                    Some(reference) => {
                        // Straight-through: the analytic gradient must equal
                        // the reference graph's, which in turn must match
                        // finite differences.
                        let (mut r, rloss) = weighted_loss(reference, &c.inputs, &bindings, &mut wrng);
                        let mut b = bindings.clone();
                        b.insert(name.clone(), b[&name].clone().requiring_grad(true));
                        g.forward(&b).unwrap();
                        let ga = g.backward(loss).unwrap().remove(&name).unwrap();
                        r.forward(&b).unwrap();
                        let gr = r.backward(rloss).unwrap().remove(&name).unwrap();
                        let same = ga.values() == gr.values();
                        let fd = finite_diff_check(&mut r, &bindings, rloss, &name, 1e-5).unwrap();
                        if same {
                            fd
                        } else {
                            f64::INFINITY
                        }
                    }
                };
                if err > worst.0 || worst.1.is_empty() {
                    worst = (err, c.name);
                }
                trials += 1;
            }
            kinds.insert(c.name);
        }
    }
    let elapsed = t0.elapsed();
    report.line(
        1,
        worst.0 <= 1e-4 && trials >= 100 && elapsed < Duration::from_secs(30),
        false,
        format!(
            "{trials} trials over {} operation cases, worst relative error {:.2e} ({}), {:.1}s",
            kinds.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 2

/// Expected trainable parameters by summing over every joint (keep, dim)
/// outcome of the sites.
fn brute_force_expected(arch: &ArchWeights, sel: &SelectionState, q: &[Vec<usize>]) -> f64 {
    let n = arch.n();
    let k = arch.k();
    // Per site: list of (probability, count) outcomes.
    let outcomes: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|i| {
            if !sel.keep()[i] {
                return vec![(1.0, 0.0)];
            }
            let p_keep = arch.keep_prob(i);
            let dim_probs: Vec<f64> = match sel.k_star()[i] {
                Some(ks) if sel.determined()[i] => (0..k).map(|j| if j == ks { 1.0 } else { 0.0 }).collect(),
                _ => arch.phi_probs(i),
            };
            let mut v = vec![(1.0 - p_keep, 0.0)];
            for j in 0..k {
                v.push((p_keep * dim_probs[j], q[i][j] as f64));
            }
            v
        })
        .collect();
    let mut total = 0.0;
    let mut idx = vec![0usize; n];
    loop {
        let mut p = 1.0;
        let mut c = 0.0;
        for i in 0..n {
            let (pi, ci) = outcomes[i][idx[i]];
            p *= pi;
            c += ci;
        }
        total += p * c;
        let mut i = 0;
        loop {
            if i == n {
                return total;
            }
            idx[i] += 1;
            if idx[i] < outcomes[i].len() {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

fn criterion_2(report: &mut Report) {
    let t0 = Instant::now();
    let mut rng = rng::stream(2, "acceptance-expected");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=4);
        let k = rng.random_range(1..=3);
        let free: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let q: Vec<Vec<usize>> = free
            .iter()
            .map(|&f| {
                let base = rng.random_range(1..64);
                (0..k).map(|j| if f { base } else { base * (j + 1) + j }).collect()
            })
            .collect();
        let mut arch = ArchWeights::new(n, k);
        let theta = rng::normal_vec(&mut rng, 2 * n, 2.0);
        arch.theta_mut().copy_from_slice(&theta);
        let phi = rng::normal_vec(&mut rng, n * k, 2.0);
        arch.phi_mut().copy_from_slice(&phi);
        let mut sel = SelectionState::new(&free, 10);
        for i in 0..n {
            match rng.random_range(0..3) {
                0 => sel.remove(i),
                1 if !sel.determined()[i] => sel.fix(i, rng.random_range(0..k)),
                _ => {}
            }
        }
        let got = expected_parameters(&arch, &sel, &q);
        let want = brute_force_expected(&arch, &sel, &q);
        worst = worst.max((got - want).abs());
    }
    let elapsed = t0.elapsed();
    report.line(
        2,
        worst <= 1e-10 && elapsed < Duration::from_secs(10),
        false,
        format!(
            "1000 draws, max |E - brute force| = {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 3

fn criterion_3(ctx: &mut Ctx, report: &mut Report) {
    let zmax = ctx.cfg.budget.max_triggers;
    let tmax = ctx.cfg.budget.max_steps;
    let mut problems = Vec::new();
    let mut total = Duration::ZERO;
    let mut triggers = Vec::new();
    let sites = SupernetState::new(&ctx.cfg.space, &ctx.backbone, 0, zmax).unwrap().sites().len();
    for ratio in [0.05, 0.1] {
        for seed in 0..SEEDS {
            let run = ctx.run(ratio, seed, SearchMode::Bipeft);
            total += run.elapsed;
            let t = &run.trace;
            triggers.push(t.triggers.len());
            if t.triggers.len() > zmax {
                problems.push(format!("ratio {ratio} seed {seed}: {} triggers", t.triggers.len()));
            }
            if t.steps.is_empty() || t.steps.len() > tmax {
                problems.push(format!("ratio {ratio} seed {seed}: {} steps", t.steps.len()));
            }
            let mut keep = vec![true; sites];
            let mut det = vec![false; sites];
            for (i, tr) in t.triggers.iter().enumerate() {
                let b_ok = tr.keep_after.iter().zip(&keep).all(|(&now, &before)| !now || before);
                let d_ok = tr.determined_after.iter().zip(&det).all(|(&now, &before)| now || !before);
                if !b_ok || !d_ok || tr.z != i + 1 {
                    problems.push(format!("ratio {ratio} seed {seed}: trigger {} breaks monotonicity", tr.z));
                }
                keep = tr.keep_after.clone();
                det = tr.determined_after.clone();
            }
        }
    }
    let limit = Duration::from_secs(600);
    report.line(
        3,
        problems.is_empty() && total < limit,
        false,
        format!(
            "20 searches over {sites} sites, triggers {}..{} (Z = {zmax}), {:.0}s total{}",
            triggers.iter().min().unwrap(),
            triggers.iter().max().unwrap(),
            total.as_secs_f64(),
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    );
}

// ---------------------------------------------------------------- 4

fn criterion_4(ctx: &mut Ctx, report: &mut Report) {
    let total = ctx.backbone.param_count() as f64;
    let net = SupernetState::new(&ctx.cfg.space, &ctx.backbone, 0, 1).unwrap();
    let slack = net.q().iter().filter_map(|q| q.last().copied()).max().unwrap_or(0) as f64;
    let mut within_slack = 0;
    let mut lines = Vec::new();
    let mut pass = true;
    for ratio in RATIOS {
        let mut over = Vec::new();
        let mut worst: f64 = 0.0;
        for seed in 0..SEEDS {
            let run = ctx.run(ratio, seed, SearchMode::Bipeft);
            let achieved = run.arch.total_params as f64 / total;
            worst = worst.max(achieved / ratio);
            if run.arch.total_params as f64 <= ratio * total + slack {
                within_slack += 1;
            }
            if achieved > 1.1 * ratio {
                over.push(seed);
            }
        }
        pass &= over.is_empty();
        lines.push(format!("ratio {ratio}: worst {worst:.3}x, over 1.1x in {}/{SEEDS}", over.len()));
    }
    lines.push(format!(
        "within budget + largest module ({slack} parameters) in {within_slack}/{}",
        RATIOS.len() as u64 * SEEDS
    ));
    report.line(4, pass, false, lines.join("; "));
}

// ---------------------------------------------------------------- 5

fn criterion_5(ctx: &mut Ctx, report: &mut Report) {
    let ratio = ctx.cfg.budget.budget_ratio;
    let searched: Vec<f64> = (0..SEEDS)
        .map(|s| ctx.retrained_accuracy(ratio, s, SearchMode::Bipeft))
        .collect();
    let budget = ratio * ctx.backbone.param_count() as f64;
    let net = SupernetState::new(&ctx.cfg.space, &ctx.backbone, 0, ctx.cfg.budget.max_triggers).unwrap();
    let prov = Provenance {
        config_hash: "random".into(),
        seed: 0,
    };
    let random: Vec<f64> = (0..30)
        .map(|s| {
            let arch = random_architecture(&net, budget, &mut rng::stream(s, "acceptance-random"), prov.clone());
            let mut opts = ctx.cfg.retrain.clone();
            opts.seed = s;
            retrain(&arch, &ctx.backbone, &ctx.data, &opts).unwrap().test_accuracy
        })
        .collect();
    let (ms, mr) = (median(&searched), median(&random));
    report.line(
        5,
        ms >= mr,
        false,
        format!("ratio {ratio}: searched median {ms:.4} vs random median {mr:.4}, gap {:+.4}", ms - mr),
    );
}

// ---------------------------------------------------------------- 6

fn criterion_6(ctx: &mut Ctx, report: &mut Report) {
    let ratio = ctx.cfg.budget.budget_ratio;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..SEEDS {
        let b = ctx.retrained_accuracy(ratio, seed, SearchMode::Bipeft);
        let e = ctx.retrained_accuracy(ratio, seed, SearchMode::Entangled);
        if b >= e {
            wins += 1;
        }
        pairs.push((b, e));
    }
    let mean = |f: fn(&(f64, f64)) -> f64| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64;
    report.line(
        6,
        wins >= 7,
        true,
        format!(
            "bipeft >= entangled in {wins}/{SEEDS} seeds (means {:.4} vs {:.4})",
            mean(|p| p.0),
            mean(|p| p.1)
        ),
    );
}

// ---------------------------------------------------------------- 7

fn criterion_7(ctx: &mut Ctx, report: &mut Report) {
    let mut bc = ctx.budget_config(0.05, 0, SearchMode::Bipeft);
    bc.gamma = 1.0;
    bc.max_steps = 120;
    let (_, trace) = run_search(&ctx.backbone, &ctx.cfg.space, &ctx.data, &bc).unwrap();
    let first = &trace.steps[0].s_bar;
    let constant = trace.steps.iter().all(|s| &s.s_bar == first);
    let nonzero = first.iter().any(|&v| v != 0.0);
    report.line(
        7,
        constant && nonzero,
        false,
        format!(
            "gamma = 1: s_bar bitwise identical over {} steps and {} triggers",
            trace.steps.len(),
            trace.triggers.len()
        ),
    );
}

// ---------------------------------------------------------------- 8

fn criterion_8(ctx: &mut Ctx, report: &mut Report) {
    let mut bc = ctx.budget_config(0.05, 3, SearchMode::Bipeft);
    bc.max_steps = 200;
    bc.max_triggers = 10;
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut archs = Vec::new();
    for d in &dirs {
        let (arch, trace) = run_search(&ctx.backbone, &ctx.cfg.space, &ctx.data, &bc).unwrap();
        emit_trace(&trace, d.path()).unwrap();
        export_architecture(&arch, &d.path().join("architecture.json")).unwrap();
        archs.push(arch);
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    let same_files = ["trace_steps.csv", "trace_triggers.csv", "architecture.json"]
        .iter()
        .all(|f| read(&dirs[0], f) == read(&dirs[1], f));
    let imported = import_architecture(&dirs[0].path().join("architecture.json")).unwrap();
    let again = dirs[0].path().join("again.json");
    export_architecture(&imported, &again).unwrap();
    let round_trip = imported == archs[0] && std::fs::read(&again).unwrap() == read(&dirs[0], "architecture.json");
    report.line(
        8,
        same_files && round_trip,
        false,
        format!("identical trace and architecture bytes: {same_files}; export/import identity: {round_trip}"),
    );
}

// ---------------------------------------------------------------- 9

fn randomize(net: &mut SupernetState, rng: &mut StreamRng) {
    for s in net.sites_mut() {
        let parts: Vec<&'static str> = s.weights().iter().map(|(p, _)| *p).collect();
        for p in parts {
            let t = s.weight_mut(p).unwrap();
            let v = rng::normal_vec(rng, t.len(), 0.3);
            t.values_mut().copy_from_slice(&v);
        }
    }
    let a = net.arch_mut();
    let theta = rng::normal_vec(rng, a.theta().len(), 1.0);
    a.theta_mut().copy_from_slice(&theta);
    let phi = rng::normal_vec(rng, a.phi().len(), 1.0);
    a.phi_mut().copy_from_slice(&phi);
}

/// A supernet holding only `keep`'s sites of `net`, with the same weights
/// and logits.
fn subnet(ctx: &Ctx, net: &SupernetState, keep: &[usize]) -> SupernetState {
    let list: Vec<_> = keep.iter().map(|&i| (net.sites()[i].kind, net.sites()[i].position)).collect();
    let mut sub = SupernetState::with_sites(&list, &ctx.cfg.space, &ctx.backbone, 0).unwrap();
    for (j, &i) in keep.iter().enumerate() {
        for (part, t) in net.sites()[i].weights() {
            *sub.sites_mut()[j].weight_mut(part).unwrap() = t.clone();
        }
        sub.arch_mut().theta_row_mut(j).copy_from_slice(net.arch().theta_row(i));
        sub.arch_mut().phi_row_mut(j).copy_from_slice(net.arch().phi_row(i));
    }
    sub
}

fn criterion_9(ctx: &mut Ctx, report: &mut Report) {
    let mut rng = rng::stream(9, "acceptance-gates");
    let batch = ctx.data.test.batch(&(0..16).collect::<Vec<_>>());
    let base = {
        let mut net = SupernetState::new(&ctx.cfg.space, &ctx.backbone, 0, 10).unwrap();
        randomize(&mut net, &mut rng);
        net
    };
    let n = base.sites().len();
    let mut gate_ok = true;
    let subsets = 20;
    for _ in 0..subsets {
        let off: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let kept: Vec<usize> = (0..n).filter(|&i| !off[i]).collect();
        let mut gated = base.clone();
        for i in 0..n {
            if off[i] {
                gated.selection_mut().remove(i);
            }
        }
        let sub = subnet(ctx, &base, &kept);
        let dims = |net: &SupernetState, m: usize| {
            MixMode::Discrete(DiscreteArch {
                keep: (0..m).map(|i| net.selection().keep()[i]).collect(),
                dims: (0..m).map(|i| Some(net.dims()[i % net.dims().len()])).collect(),
            })
        };
        let discrete_sub = MixMode::Discrete(DiscreteArch {
            keep: vec![true; kept.len()],
            dims: kept.iter().map(|&i| Some(base.dims()[i % base.dims().len()])).collect(),
        });
        let cases = [
            (MixMode::SoftMix, MixMode::SoftMix),
            (dims(&gated, n), discrete_sub),
        ];
        for (mode_gated, mode_sub) in cases {
            let a = forward_with_peft(&ctx.backbone, &batch, &gated, &mode_gated, 1.0, &mut rng::stream(0, "g")).unwrap();
            let b = forward_with_peft(&ctx.backbone, &batch, &sub, &mode_sub, 1.0, &mut rng::stream(0, "g")).unwrap();
            gate_ok &= a.0.to_bits() == b.0.to_bits() && a.1.values() == b.1.values();
        }
    }
    // All gates off is the frozen backbone itself.
    let mut none = base.clone();
    for i in 0..n {
        none.selection_mut().remove(i);
    }
    let a = forward_with_peft(&ctx.backbone, &batch, &none, &MixMode::SoftMix, 1.0, &mut rng::stream(0, "g")).unwrap();
    let b = ctx.backbone.forward(&batch).unwrap();
    gate_ok &= a.0.to_bits() == b.0.to_bits() && a.1.values() == b.1.values();

    // Each rank of a rank-parameterized site equals a standalone module
    // built from the leading slices of the shared weights.
    let mut slice_ok = true;
    let mut checked = 0;
    for (i, site) in base.sites().iter().enumerate() {
        if !matches!(site.kind, ModuleKind::Lora | ModuleKind::AdapterLr) {
            continue;
        }
        let down = &site.weights()[0].1;
        let up = &site.weights()[1].1;
        let din = down.shape()[0];
        let x = random_tensor(&mut rng, &[5, din], 1.0);
        for &r in base.dims() {
            let mode = MixMode::Discrete(DiscreteArch {
                keep: vec![true; n],
                dims: vec![Some(r); n],
            });
            let shared = mix_site_output(&base, i, &x, &mode, 1.0, &mut rng::stream(0, "g")).unwrap();
            let rmax = down.shape()[1];
            let a: Vec<f64> = down.values().chunks(rmax).flat_map(|row| row[..r].to_vec()).collect();
            let b: Vec<f64> = up.values()[..r * up.shape()[1]].to_vec();
            let mut g = Graph::new();
            let xi = g.constant(x.clone());
            let ai = g.constant(Tensor::new(vec![din, r], a).unwrap());
            let bi = g.constant(Tensor::new(vec![r, up.shape()[1]], b).unwrap());
            let h = g.matmul(xi, ai);
            let out = g.matmul(h, bi);
            g.forward(&Bindings::new()).unwrap();
            slice_ok &= g.value(out) == shared.values();
            checked += 1;
        }
    }
    report.line(
        9,
        gate_ok && slice_ok,
        false,
        format!(
            "{subsets} random gate subsets equal to absent modules: {gate_ok}; {checked} rank slices bitwise equal: {slice_ok}"
        ),
    );
}

fn main() {
    let only: BTreeSet<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let want = |i: usize| only.is_empty() || only.contains(&i);
    let mut report = Report { failed: Vec::new() };
    if want(1) {
        criterion_1(&mut report);
    }
    if want(2) {
        criterion_2(&mut report);
    }
    if (3..=9).any(want) {
        let t0 = Instant::now();
        let mut ctx = Ctx::new();
        println!("setup: pretrained backbone with {} parameters in {:.1}s", ctx.backbone.param_count(), t0.elapsed().as_secs_f64());
        let steps: [(usize, fn(&mut Ctx, &mut Report)); 7] = [
            (3, criterion_3),
            (4, criterion_4),
            (5, criterion_5),
            (6, criterion_6),
            (7, criterion_7),
            (8, criterion_8),
            (9, criterion_9),
        ];
        for (i, f) in steps {
            if want(i) {
                f(&mut ctx, &mut report);
            }
        }
    }
    if report.failed.is_empty() {
        println!("acceptance: all hard criteria passed");
    } else {
        println!("acceptance: failed criteria {:?}", report.failed);
        std::process::exit(1);
    }
}

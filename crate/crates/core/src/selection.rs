//! Verifier-guided progressive trajectory selection, the Best-of-N and
//! random-pruning baselines, and pass accounting.
//!
//! Strategies and scorers are trait objects looked up by name in a
//! [`Registry`]. Sampling goes through a [`Backend`]; a per-prompt
//! [`Session`] memoises latents so several strategies can replay the same
//! seeded trajectories, while each strategy still meters every pass it
//! requests in its own [`CostLedger`].

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::diffusion::{ddim_update, initial_latent, ConditioningVector, CostLedger, Denoiser, NoiseSchedule, PassKind};
use crate::error::{Error, Result};
use crate::features::pool_frames;
use crate::rng::{derive_seed, rng_for, tag};
use crate::verifier::Verifier;
use crate::worldgen::{sample_video, LatentVideo, PlausibilityJudge, RenderBank, WorldConfig};

/// How checkpoint features are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringPass {
    /// One extra conditional forward per active trajectory, metered as a
    /// scoring pass.
    #[default]
    Dedicated,
    /// Features captured during the denoising pass of the same step; no
    /// extra pass is metered.
    Reuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointSchedule {
    /// Strictly decreasing timesteps.
    pub checkpoints: Vec<usize>,
    pub keep_ratio: f64,
    pub n: usize,
    pub layer: usize,
    pub scoring_pass: ScoringPass,
    /// With no checkpoints, score at the final step and keep the best.
    pub terminal_scoring: bool,
}

impl Default for CheckpointSchedule {
    fn default() -> Self {
        Self {
            checkpoints: vec![600, 400],
            keep_ratio: 0.5,
            n: 4,
            layer: 6,
            scoring_pass: ScoringPass::Dedicated,
            terminal_scoring: false,
        }
    }
}

impl CheckpointSchedule {
    pub fn validate(&self, verifier_timesteps: Option<&[usize]>) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("selection: n must be positive".into()));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config("selection: keep ratio must be in (0, 1]".into()));
        }
        if self.checkpoints.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("selection: checkpoints must be strictly decreasing".into()));
        }
        if let Some(ts) = verifier_timesteps {
            if let Some(c) = self.checkpoints.iter().find(|c| !ts.contains(c)) {
                return Err(Error::Config(format!(
                    "selection: checkpoint {c} is not a verifier training timestep"
                )));
            }
        }
        Ok(())
    }

    /// Step index at which each checkpoint fires: the first step whose
    /// timestep is `<= c`. Pruning takes effect after that step.
    pub fn checkpoint_steps(&self, step_map: &[usize]) -> Result<Vec<usize>> {
        let steps = self
            .checkpoints
            .iter()
            .map(|&c| {
                step_map
                    .iter()
                    .position(|&t| t <= c)
                    .ok_or_else(|| Error::Config(format!("checkpoint {c} is below every sampler timestep")))
            })
            .collect::<Result<Vec<_>>>()?;
        if steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("two checkpoints map to the same sampler step".into()));
        }
        Ok(steps)
    }
}

/// `ceil(rho * active)`, at least one.
pub fn keep_count(active: usize, rho: f64) -> usize {
    ((rho * active as f64 - 1e-9).ceil() as usize).clamp(1, active.max(1))
}

/// Closed-form expected denoising passes with `k` evenly spaced checkpoints.
pub fn expected_cost(t_steps: usize, n: usize, k: usize, rho: f64) -> f64 {
    let base = (t_steps * n) as f64;
    if (1.0 - rho).abs() < 1e-12 {
        return base;
    }
    base * (1.0 - rho.powi(k as i32 + 1)) / ((k + 1) as f64 * (1.0 - rho))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactCost {
    pub denoising: u64,
    pub scoring: u64,
}

/// Denoising passes when pruning happens after `after_steps[j]` steps, and
/// the scoring passes spent at those checkpoints.
pub fn exact_cost(t_steps: usize, after_steps: &[usize], n: usize, rho: f64) -> Result<ExactCost> {
    if after_steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("checkpoint positions must be strictly increasing".into()));
    }
    if after_steps.iter().any(|&k| k > t_steps) {
        return Err(Error::InvalidArgument("checkpoint beyond the last step".into()));
    }
    let mut active = n;
    let mut prev = 0;
    let mut cost = ExactCost { denoising: 0, scoring: 0 };
    for &k in after_steps {
        cost.denoising += ((k - prev) * active) as u64;
        cost.scoring += active as u64;
        active = keep_count(active, rho);
        prev = k;
    }
    cost.denoising += ((t_steps - prev) * active) as u64;
    Ok(cost)
}

/// `round(j T / (K + 1))` for `j = 1..=K`.
pub fn even_checkpoints(t_steps: usize, k: usize) -> Vec<usize> {
    (1..=k).map(|j| ((j * t_steps) as f64 / (k + 1) as f64).round() as usize).collect()
}

/// Source of denoising steps, checkpoint features and final outcomes.
pub trait Backend: Sync {
    fn name(&self) -> &'static str;
    /// Timestep of each sampler step.
    fn step_map(&self) -> &[usize];
    fn initial(&self, prompt: u32, seed: u64) -> Array2<f64>;
    /// One denoising pass from the input latent of `step`.
    fn denoise(&self, prompt: u32, seed: u64, step: usize, z: &Array2<f64>) -> Result<Array2<f64>>;
    /// Pooled `F x D` features of a latent at timestep `t`.
    fn features(&self, prompt: u32, z: &Array2<f64>, t: usize, layer: usize) -> Result<Array2<f64>>;
    /// Whether a finished trajectory is physically plausible.
    fn outcome(&self, prompt: u32, seed: u64, z0: &Array2<f64>) -> Result<bool>;
}

fn capture_features(model: &Denoiser, prompt: u32, z: &Array2<f64>, t: usize, layer: usize) -> Result<Array2<f64>> {
    let cond = ConditioningVector::from_prompt(prompt);
    let out = model.forward(z, t, &cond, &[layer], PassKind::Score, &mut CostLedger::default())?;
    Ok(pool_frames(&out.captures[&layer], 1).mapv(binio::quantize))
}

fn next_alpha_bar(schedule: &NoiseSchedule, map: &[usize], step: usize) -> Result<f64> {
    match map.get(step + 1) {
        Some(&t) => schedule.alpha_bar(t),
        None => Ok(1.0),
    }
}

/// Deterministic DDIM sampling with the trained denoiser; outcomes are
/// judged from the generated latent.
pub struct DdimBackend<'a> {
    pub model: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub judge: &'a PlausibilityJudge,
    map: Vec<usize>,
}

impl<'a> DdimBackend<'a> {
    pub fn new(model: &'a Denoiser, schedule: &'a NoiseSchedule, judge: &'a PlausibilityJudge, steps: usize) -> Result<Self> {
        Ok(Self {
            model,
            schedule,
            judge,
            map: schedule.step_map(steps)?,
        })
    }
}

impl Backend for DdimBackend<'_> {
    fn name(&self) -> &'static str {
        "ddim"
    }

    fn step_map(&self) -> &[usize] {
        &self.map
    }

    fn initial(&self, _prompt: u32, seed: u64) -> Array2<f64> {
        initial_latent(seed, self.model.shape.frames, self.model.shape.latent_width)
    }

    fn denoise(&self, prompt: u32, _seed: u64, step: usize, z: &Array2<f64>) -> Result<Array2<f64>> {
        let t = self.map[step];
        let cond = ConditioningVector::from_prompt(prompt);
        let out = self
            .model
            .forward(z, t, &cond, &[], PassKind::Denoise, &mut CostLedger::default())?;
        Ok(ddim_update(
            z,
            &out.noise,
            self.schedule.alpha_bar(t)?,
            next_alpha_bar(self.schedule, &self.map, step)?,
        ))
    }

    fn features(&self, prompt: u32, z: &Array2<f64>, t: usize, layer: usize) -> Result<Array2<f64>> {
        capture_features(self.model, prompt, z, t, layer)
    }

    fn outcome(&self, _prompt: u32, _seed: u64, z0: &Array2<f64>) -> Result<bool> {
        Ok(self.judge.judge(z0).plausible)
    }
}

/// Each trajectory seed is bound to a world video whose plausibility is
/// drawn with probability `plausible_rate`; denoising follows the exact
/// noise-prediction path toward it. Checkpoint features still come from the
/// trained denoiser.
pub struct ReplayBackend<'a> {
    pub model: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub world: &'a WorldConfig,
    pub bank: &'a RenderBank,
    pub plausible_rate: f64,
    map: Vec<usize>,
}

impl<'a> ReplayBackend<'a> {
    pub fn new(
        model: &'a Denoiser,
        schedule: &'a NoiseSchedule,
        world: &'a WorldConfig,
        bank: &'a RenderBank,
        plausible_rate: f64,
        steps: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&plausible_rate) {
            return Err(Error::Config("replay: plausible rate outside [0, 1]".into()));
        }
        Ok(Self {
            model,
            schedule,
            world,
            bank,
            plausible_rate,
            map: schedule.step_map(steps)?,
        })
    }

    /// World video a trajectory converges to.
    pub fn target(&self, prompt: u32, seed: u64) -> Result<LatentVideo> {
        let plausible = rng_for(&[tag::TRAJ, seed, 0x5250]).random::<f64>() < self.plausible_rate;
        sample_video(self.world, self.bank, prompt, 0, plausible, seed)
    }
}

impl Backend for ReplayBackend<'_> {
    fn name(&self) -> &'static str {
        "replay"
    }

    fn step_map(&self) -> &[usize] {
        &self.map
    }

    fn initial(&self, _prompt: u32, seed: u64) -> Array2<f64> {
        initial_latent(seed, self.model.shape.frames, self.model.shape.latent_width)
    }

    fn denoise(&self, prompt: u32, seed: u64, step: usize, z: &Array2<f64>) -> Result<Array2<f64>> {
        let x0 = self.target(prompt, seed)?.frames;
        let ab = self.schedule.alpha_bar(self.map[step])?;
        let eps = (z - &(&x0 * ab.sqrt())) / (1.0 - ab).sqrt();
        Ok(ddim_update(z, &eps, ab, next_alpha_bar(self.schedule, &self.map, step)?))
    }

    fn features(&self, prompt: u32, z: &Array2<f64>, t: usize, layer: usize) -> Result<Array2<f64>> {
        capture_features(self.model, prompt, z, t, layer)
    }

    fn outcome(&self, prompt: u32, seed: u64, _z0: &Array2<f64>) -> Result<bool> {
        Ok(self.target(prompt, seed)?.y_pc)
    }
}

/// Per-prompt memo of trajectory latents, features and outcomes. Passes are
/// metered by the strategies, not here.
pub struct Session<'a> {
    pub backend: &'a dyn Backend,
    pub prompt: u32,
    latents: RefCell<HashMap<(u64, usize), Rc<Array2<f64>>>>,
    features: RefCell<HashMap<(u64, usize, usize), Rc<Array2<f64>>>>,
    outcomes: RefCell<HashMap<u64, bool>>,
}

impl<'a> Session<'a> {
    pub fn new(backend: &'a dyn Backend, prompt: u32) -> Self {
        Self {
            backend,
            prompt,
            latents: RefCell::new(HashMap::new()),
            features: RefCell::new(HashMap::new()),
            outcomes: RefCell::new(HashMap::new()),
        }
    }

    pub fn steps(&self) -> usize {
        self.backend.step_map().len()
    }

    /// Input latent of `step`; `step == steps()` is the final output.
    pub fn latent(&self, seed: u64, step: usize) -> Result<Rc<Array2<f64>>> {
        if let Some(z) = self.latents.borrow().get(&(seed, step)) {
            return Ok(z.clone());
        }
        let z = if step == 0 {
            self.backend.initial(self.prompt, seed)
        } else {
            let prev = self.latent(seed, step - 1)?;
            let z = self.backend.denoise(self.prompt, seed, step - 1, &prev)?;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("trajectory {seed} at step {step}")));
            }
            z
        };
        let z = Rc::new(z);
        self.latents.borrow_mut().insert((seed, step), z.clone());
        Ok(z)
    }

    pub fn features(&self, seed: u64, step: usize, layer: usize) -> Result<Rc<Array2<f64>>> {
        if let Some(f) = self.features.borrow().get(&(seed, step, layer)) {
            return Ok(f.clone());
        }
        let z = self.latent(seed, step)?;
        let t = self.backend.step_map()[step];
        let f = Rc::new(self.backend.features(self.prompt, &z, t, layer)?);
        self.features.borrow_mut().insert((seed, step, layer), f.clone());
        Ok(f)
    }

    /// Final plausibility of a trajectory, computed without metering.
    pub fn outcome(&self, seed: u64) -> Result<bool> {
        if let Some(&o) = self.outcomes.borrow().get(&seed) {
            return Ok(o);
        }
        let z0 = self.latent(seed, self.steps())?;
        let o = self.backend.outcome(self.prompt, seed, &z0)?;
        self.outcomes.borrow_mut().insert(seed, o);
        Ok(o)
    }
}

/// What a scorer sees at a checkpoint.
pub struct ScoreRequest<'s, 'a> {
    pub session: &'s Session<'a>,
    pub trajectory: usize,
    pub seed: u64,
    pub step: usize,
    pub t: usize,
    pub layer: usize,
}

pub trait TrajectoryScorer: Sync {
    fn name(&self) -> &'static str;
    fn score(&self, req: &ScoreRequest) -> Result<f64>;
}

/// Plausibility-head score of the trained verifier.
pub struct VerifierScorer<'a> {
    pub verifier: &'a Verifier,
}

impl TrajectoryScorer for VerifierScorer<'_> {
    fn name(&self) -> &'static str {
        "verifier"
    }

    fn score(&self, req: &ScoreRequest) -> Result<f64> {
        let f = req.session.features(req.seed, req.step, req.layer)?;
        Ok(self.verifier.score(&f, req.t)?.s_pc)
    }
}

/// Ground-truth final plausibility (1 or 0), constant per trajectory.
pub struct OracleScorer;

impl TrajectoryScorer for OracleScorer {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn score(&self, req: &ScoreRequest) -> Result<f64> {
        Ok(req.session.outcome(req.seed)? as u8 as f64)
    }
}

/// Seeded uniform score per (prompt, trajectory, step).
pub struct RandomScorer {
    pub seed: u64,
}

impl TrajectoryScorer for RandomScorer {
    fn name(&self) -> &'static str {
        "random"
    }

    fn score(&self, req: &ScoreRequest) -> Result<f64> {
        Ok(rng_for(&[tag::SCORE, self.seed, req.session.prompt as u64, req.seed, req.step as u64]).random())
    }
}

/// Depends only on the trajectory seed, so it is identical at every
/// checkpoint.
pub struct ConstantScorer {
    pub seed: u64,
}

impl TrajectoryScorer for ConstantScorer {
    fn name(&self) -> &'static str {
        "constant"
    }

    fn score(&self, req: &ScoreRequest) -> Result<f64> {
        Ok(rng_for(&[tag::SCORE, self.seed, req.seed]).random())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub t: usize,
    pub active_before: Vec<usize>,
    /// Aligned with `active_before`.
    pub scores: Vec<f64>,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub strategy: String,
    pub scorer: String,
    pub prompt: u32,
    pub base_seed: u64,
    pub checkpoints: Vec<CheckpointRecord>,
    pub winner: usize,
    /// Max minus min score at the first checkpoint.
    pub first_spread: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub winner: usize,
    pub winner_seed: u64,
    pub video: Array2<f64>,
    pub trace: SelectionTrace,
    pub ledger: CostLedger,
}

pub trait SelectionStrategy: Sync {
    fn name(&self) -> &'static str;
    fn select(&self, session: &Session, scorer: &dyn TrajectoryScorer, base_seed: u64) -> Result<SelectionOutcome>;
}

pub fn trajectory_seed(base_seed: u64, i: usize) -> u64 {
    base_seed.wrapping_add(i as u64)
}

/// Indices of the `keep` best scores; ties go to the lower position.
fn top_k(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top = idx[..keep].to_vec();
    top.sort_unstable();
    top
}

fn score_active(
    session: &Session,
    scorer: &dyn TrajectoryScorer,
    base_seed: u64,
    active: &[usize],
    step: usize,
    layer: usize,
    pass: ScoringPass,
    ledger: &mut CostLedger,
) -> Result<Vec<f64>> {
    let t = session.backend.step_map()[step];
    if pass == ScoringPass::Dedicated {
        ledger.record(PassKind::Score, active.len() as u64);
    }
    active
        .iter()
        .map(|&i| {
            scorer.score(&ScoreRequest {
                session,
                trajectory: i,
                seed: trajectory_seed(base_seed, i),
                step,
                t,
                layer,
            })
        })
        .collect()
}

/// Progressive pruning at checkpoints.
pub struct Progressive {
    pub schedule: CheckpointSchedule,
}

impl SelectionStrategy for Progressive {
    fn name(&self) -> &'static str {
        "progressive"
    }

    fn select(&self, session: &Session, scorer: &dyn TrajectoryScorer, base_seed: u64) -> Result<SelectionOutcome> {
        let sch = &self.schedule;
        sch.validate(None)?;
        let steps = session.steps();
        let mut fire = sch.checkpoint_steps(session.backend.step_map())?;
        let terminal = fire.is_empty() && sch.terminal_scoring;
        if terminal {
            fire.push(steps - 1);
        }
        let mut ledger = CostLedger::default();
        let mut active: Vec<usize> = (0..sch.n).collect();
        let mut records = Vec::new();
        for step in 0..steps {
            ledger.record(PassKind::Denoise, active.len() as u64);
            if fire.contains(&step) {
                let scores = score_active(session, scorer, base_seed, &active, step, sch.layer, sch.scoring_pass, &mut ledger)?;
                let keep = if terminal { 1 } else { keep_count(active.len(), sch.keep_ratio) };
                let pos = top_k(&scores, keep);
                let kept: Vec<usize> = pos.iter().map(|&p| active[p]).collect();
                let dropped: Vec<usize> = active.iter().copied().filter(|i| !kept.contains(i)).collect();
                records.push(CheckpointRecord {
                    step,
                    t: session.backend.step_map()[step],
                    active_before: active.clone(),
                    scores,
                    kept: kept.clone(),
                    dropped,
                });
                active = kept;
            }
        }
        // Survivors are ranked by their last score; with no scoring the
        // first trajectory is returned.
        let winner = match records.last() {
            Some(r) => {
                let best = top_k(&r.scores, 1)[0];
                r.active_before[best]
            }
            None => 0,
        };
        let seed = trajectory_seed(base_seed, winner);
        let video = session.latent(seed, steps)?.as_ref().clone();
        Ok(SelectionOutcome {
            winner,
            winner_seed: seed,
            video,
            trace: SelectionTrace {
                strategy: self.name().into(),
                scorer: scorer.name().into(),
                prompt: session.prompt,
                base_seed,
                first_spread: records.first().map(spread),
                checkpoints: records,
                winner,
            },
            ledger,
        })
    }
}

fn spread(r: &CheckpointRecord) -> f64 {
    let max = r.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = r.scores.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Fully denoise `n` trajectories and keep the best score at `score_t`.
pub struct BestOfN {
    pub n: usize,
    pub score_timestep: usize,
    pub layer: usize,
}

impl SelectionStrategy for BestOfN {
    fn name(&self) -> &'static str {
        "best-of-n"
    }

    fn select(&self, session: &Session, scorer: &dyn TrajectoryScorer, base_seed: u64) -> Result<SelectionOutcome> {
        if self.n == 0 {
            return Err(Error::Config("best-of-n: n must be positive".into()));
        }
        let steps = session.steps();
        let step = session
            .backend
            .step_map()
            .iter()
            .position(|&t| t <= self.score_timestep)
            .ok_or_else(|| Error::Config(format!("score timestep {} below the sampler range", self.score_timestep)))?;
        let mut ledger = CostLedger::default();
        ledger.record(PassKind::Denoise, (steps * self.n) as u64);
        let all: Vec<usize> = (0..self.n).collect();
        let scores = score_active(
            session,
            scorer,
            base_seed,
            &all,
            step,
            self.layer,
            ScoringPass::Dedicated,
            &mut ledger,
        )?;
        let winner = top_k(&scores, 1)[0];
        let seed = trajectory_seed(base_seed, winner);
        let record = CheckpointRecord {
            step,
            t: session.backend.step_map()[step],
            active_before: all,
            scores,
            kept: vec![winner],
            dropped: (0..self.n).filter(|&i| i != winner).collect(),
        };
        Ok(SelectionOutcome {
            winner,
            winner_seed: seed,
            video: session.latent(seed, steps)?.as_ref().clone(),
            trace: SelectionTrace {
                strategy: self.name().into(),
                scorer: scorer.name().into(),
                prompt: session.prompt,
                base_seed,
                first_spread: Some(spread(&record)),
                checkpoints: vec![record],
                winner,
            },
            ledger,
        })
    }
}

/// Single trajectory from the base seed.
pub struct Baseline;

impl SelectionStrategy for Baseline {
    fn name(&self) -> &'static str {
        "baseline"
    }

    fn select(&self, session: &Session, scorer: &dyn TrajectoryScorer, base_seed: u64) -> Result<SelectionOutcome> {
        let steps = session.steps();
        let mut ledger = CostLedger::default();
        ledger.record(PassKind::Denoise, steps as u64);
        Ok(SelectionOutcome {
            winner: 0,
            winner_seed: base_seed,
            video: session.latent(base_seed, steps)?.as_ref().clone(),
            trace: SelectionTrace {
                strategy: self.name().into(),
                scorer: scorer.name().into(),
                prompt: session.prompt,
                base_seed,
                checkpoints: Vec::new(),
                winner: 0,
                first_spread: None,
            },
            ledger,
        })
    }
}

/// Everything a factory may need to build a scorer or strategy.
pub struct BuildContext<'a> {
    pub schedule: &'a CheckpointSchedule,
    pub verifier: Option<&'a Verifier>,
    pub best_of_n_timestep: usize,
    pub score_seed: u64,
}

type ScorerFactory = Box<dyn for<'a> Fn(&BuildContext<'a>) -> Result<Box<dyn TrajectoryScorer + 'a>> + Send + Sync>;
type StrategyFactory = Box<dyn Fn(&BuildContext) -> Result<Box<dyn SelectionStrategy>> + Send + Sync>;

/// Name-keyed factories for scorers, strategies and the modes that pair
/// them.
pub struct Registry {
    scorers: BTreeMap<&'static str, ScorerFactory>,
    strategies: BTreeMap<&'static str, StrategyFactory>,
    modes: BTreeMap<&'static str, (&'static str, &'static str)>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Self {
            scorers: BTreeMap::new(),
            strategies: BTreeMap::new(),
            modes: BTreeMap::new(),
        };
        r.register_scorer(
            "verifier",
            Box::new(|ctx| {
                let v = ctx
                    .verifier
                    .ok_or_else(|| Error::Config("the verifier scorer needs a trained verifier".into()))?;
                Ok(Box::new(VerifierScorer { verifier: v }) as Box<dyn TrajectoryScorer>)
            }),
        );
        r.register_scorer("oracle", Box::new(|_| Ok(Box::new(OracleScorer) as Box<dyn TrajectoryScorer>)));
        r.register_scorer(
            "random",
            Box::new(|ctx| Ok(Box::new(RandomScorer { seed: ctx.score_seed }) as Box<dyn TrajectoryScorer>)),
        );
        r.register_scorer(
            "constant",
            Box::new(|ctx| Ok(Box::new(ConstantScorer { seed: ctx.score_seed }) as Box<dyn TrajectoryScorer>)),
        );
        r.register_strategy(
            "progressive",
            Box::new(|ctx| {
                Ok(Box::new(Progressive {
                    schedule: ctx.schedule.clone(),
                }) as Box<dyn SelectionStrategy>)
            }),
        );
        r.register_strategy(
            "best-of-n",
            Box::new(|ctx| {
                Ok(Box::new(BestOfN {
                    n: ctx.schedule.n,
                    score_timestep: ctx.best_of_n_timestep,
                    layer: ctx.schedule.layer,
                }) as Box<dyn SelectionStrategy>)
            }),
        );
        r.register_strategy("baseline", Box::new(|_| Ok(Box::new(Baseline) as Box<dyn SelectionStrategy>)));
        r.register_mode("guided", "progressive", "verifier");
        r.register_mode("random", "progressive", "random");
        r.register_mode("oracle", "progressive", "oracle");
        r.register_mode("best-of-n", "best-of-n", "verifier");
        r.register_mode("baseline", "baseline", "constant");
        r
    }
}

impl Registry {
    pub fn register_scorer(&mut self, name: &'static str, f: ScorerFactory) {
        self.scorers.insert(name, f);
    }

    pub fn register_strategy(&mut self, name: &'static str, f: StrategyFactory) {
        self.strategies.insert(name, f);
    }

    pub fn register_mode(&mut self, name: &'static str, strategy: &'static str, scorer: &'static str) {
        self.modes.insert(name, (strategy, scorer));
    }

    pub fn mode_names(&self) -> Vec<&'static str> {
        self.modes.keys().copied().collect()
    }

    pub fn scorer<'a>(&self, name: &str, ctx: &BuildContext<'a>) -> Result<Box<dyn TrajectoryScorer + 'a>> {
        let f = self.scorers.get(name).ok_or_else(|| Error::UnknownName {
            kind: "scorer",
            name: name.into(),
        })?;
        f(ctx)
    }

    pub fn strategy(&self, name: &str, ctx: &BuildContext) -> Result<Box<dyn SelectionStrategy>> {
        let f = self.strategies.get(name).ok_or_else(|| Error::UnknownName {
            kind: "strategy",
            name: name.into(),
        })?;
        f(ctx)
    }

    /// Strategy and scorer for a mode name.
    pub fn mode<'a>(&self, name: &str, ctx: &BuildContext<'a>) -> Result<Mode<'a>> {
        let (strategy, scorer) = self.modes.get(name).ok_or_else(|| Error::UnknownName {
            kind: "selection mode",
            name: name.into(),
        })?;
        Ok(Mode {
            name: name.to_string(),
            strategy: self.strategy(strategy, ctx)?,
            scorer: self.scorer(scorer, ctx)?,
        })
    }
}

pub struct Mode<'a> {
    pub name: String,
    pub strategy: Box<dyn SelectionStrategy>,
    pub scorer: Box<dyn TrajectoryScorer + 'a>,
}

/// Base seed of a prompt's trajectory family.
pub fn prompt_base_seed(seed: u64, prompt: u32) -> u64 {
    derive_seed(&[tag::TRAJ, seed, prompt as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub mode: String,
    pub prompt: u32,
    pub winner: usize,
    pub plausible: bool,
    pub ledger: CostLedger,
    pub trace: SelectionTrace,
    /// Final latent of the winner; not serialised.
    #[serde(skip)]
    pub video: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub prompts: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_denoising_passes: f64,
    pub mean_scoring_passes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub backend: String,
    pub summaries: Vec<ModeSummary>,
    /// Fraction of all `n` trajectories per prompt that end plausible.
    pub trajectory_plausible_rate: f64,
    pub results: Vec<PromptResult>,
}

impl Evaluation {
    pub fn summary(&self, mode: &str) -> Option<&ModeSummary> {
        self.summaries.iter().find(|s| s.mode == mode)
    }

    pub fn traces(&self, mode: &str) -> Vec<&SelectionTrace> {
        self.results.iter().filter(|r| r.mode == mode).map(|r| &r.trace).collect()
    }
}

/// Runs every mode on every prompt. Prompts are processed in parallel;
/// results are ordered by (mode, prompt) regardless of thread count.
pub fn evaluate(backend: &dyn Backend, modes: &[Mode], prompts: &[u32], seed: u64, n: usize) -> Result<Evaluation> {
    let per_prompt: Vec<Result<(Vec<PromptResult>, usize)>> = prompts
        .par_iter()
        .map(|&prompt| {
            let session = Session::new(backend, prompt);
            let base = prompt_base_seed(seed, prompt);
            let mut out = Vec::with_capacity(modes.len());
            for m in modes {
                let o = m.strategy.select(&session, m.scorer.as_ref(), base)?;
                out.push(PromptResult {
                    mode: m.name.clone(),
                    prompt,
                    winner: o.winner,
                    plausible: session.outcome(o.winner_seed)?,
                    ledger: o.ledger,
                    trace: o.trace,
                    video: o.video,
                });
            }
            let mut good = 0;
            for i in 0..n {
                good += session.outcome(trajectory_seed(base, i))? as usize;
            }
            Ok((out, good))
        })
        .collect();
    let mut results = Vec::new();
    let mut good = 0;
    for r in per_prompt {
        let (rs, g) = r?;
        results.extend(rs);
        good += g;
    }
    results.sort_by(|a, b| {
        let ia = modes.iter().position(|m| m.name == a.mode);
        let ib = modes.iter().position(|m| m.name == b.mode);
        ia.cmp(&ib).then(a.prompt.cmp(&b.prompt))
    });
    let summaries = modes
        .iter()
        .map(|m| {
            let rs: Vec<&PromptResult> = results.iter().filter(|r| r.mode == m.name).collect();
            let k = rs.len().max(1) as f64;
            let successes = rs.iter().filter(|r| r.plausible).count();
            ModeSummary {
                mode: m.name.clone(),
                prompts: rs.len(),
                successes,
                success_rate: successes as f64 / k,
                mean_denoising_passes: rs.iter().map(|r| r.ledger.denoising_passes as f64).sum::<f64>() / k,
                mean_scoring_passes: rs.iter().map(|r| r.ledger.scoring_passes as f64).sum::<f64>() / k,
            }
        })
        .collect();
    Ok(Evaluation {
        backend: backend.name().into(),
        summaries,
        trajectory_plausible_rate: good as f64 / (prompts.len() * n).max(1) as f64,
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScoreSummary {
    pub checkpoint: usize,
    pub t: usize,
    pub kept: usize,
    pub dropped: usize,
    pub kept_mean: f64,
    pub dropped_mean: f64,
    pub delta_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub checkpoints: Vec<CheckpointScoreSummary>,
    pub spreads: Vec<f64>,
    /// `(lower edge, upper edge, count)`.
    pub spread_histogram: Vec<(f64, f64, usize)>,
}

impl ScoreReport {
    pub fn checkpoints_csv(&self) -> String {
        let mut s = String::from("checkpoint,t,kept,dropped,kept_mean,dropped_mean,delta_mean\n");
        for c in &self.checkpoints {
            s.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6}\n",
                c.checkpoint, c.t, c.kept, c.dropped, c.kept_mean, c.dropped_mean, c.delta_mean
            ));
        }
        s
    }

    pub fn spread_histogram_csv(&self) -> String {
        let mut s = String::from("lower,upper,count\n");
        for (lo, hi, n) in &self.spread_histogram {
            s.push_str(&format!("{lo:.6},{hi:.6},{n}\n"));
        }
        s
    }
}

/// Kept versus dropped score means per checkpoint position and the spread
/// of scores at the first checkpoint.
pub fn score_distribution_report(traces: &[&SelectionTrace], bins: usize) -> Result<ScoreReport> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no selection traces".into()));
    }
    let depth = traces.iter().map(|t| t.checkpoints.len()).max().unwrap_or(0);
    let mut checkpoints = Vec::new();
    for c in 0..depth {
        let (mut ks, mut kn, mut ds, mut dn) = (0.0, 0usize, 0.0, 0usize);
        let mut t = 0;
        for tr in traces {
            let Some(r) = tr.checkpoints.get(c) else { continue };
            t = r.t;
            for (i, s) in r.active_before.iter().zip(&r.scores) {
                if r.kept.contains(i) {
                    ks += s;
                    kn += 1;
                } else {
                    ds += s;
                    dn += 1;
                }
            }
        }
        let km = if kn > 0 { ks / kn as f64 } else { f64::NAN };
        let dm = if dn > 0 { ds / dn as f64 } else { f64::NAN };
        checkpoints.push(CheckpointScoreSummary {
            checkpoint: c,
            t,
            kept: kn,
            dropped: dn,
            kept_mean: km,
            dropped_mean: dm,
            delta_mean: if kn > 0 && dn > 0 { km - dm } else { 0.0 },
        });
    }
    let spreads: Vec<f64> = traces.iter().filter_map(|t| t.first_spread).collect();
    let bins = bins.max(1);
    let max = spreads.iter().copied().fold(0.0, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 0.0 };
    let mut spread_histogram: Vec<(f64, f64, usize)> = (0..bins).map(|b| (b as f64 * width, (b + 1) as f64 * width, 0)).collect();
    for s in &spreads {
        let b = if width > 0.0 { ((s / width) as usize).min(bins - 1) } else { 0 };
        spread_histogram[b].2 += 1;
    }
    Ok(ScoreReport {
        checkpoints,
        spreads,
        spread_histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_cost_examples() {
        assert!((expected_cost(50, 4, 2, 0.5) - 116.6667).abs() < 1e-3);
        assert_eq!(expected_cost(50, 4, 0, 0.5), 200.0);
        assert_eq!(expected_cost(50, 4, 2, 1.0), 200.0);
        assert_eq!(
            exact_cost(50, &[20, 30], 4, 0.5).unwrap(),
            ExactCost {
                denoising: 120,
                scoring: 6
            }
        );
        assert_eq!(exact_cost(50, &[], 4, 0.5).unwrap().denoising, 200);
        assert_eq!(exact_cost(50, &[20], 4, 0.1).unwrap().denoising, 20 * 4 + 30);
        assert!(exact_cost(50, &[30, 20], 4, 0.5).is_err());
    }

    #[test]
    fn checkpoint_placement_on_fifty_steps() {
        let map: Vec<usize> = (0..50).map(|i| (49 - i) * 20).collect();
        let s = CheckpointSchedule::default();
        assert_eq!(s.checkpoint_steps(&map).unwrap(), vec![19, 29]);
        assert!(CheckpointSchedule {
            checkpoints: vec![400, 600],
            ..Default::default()
        }
        .validate(None)
        .is_err());
        assert!(s.validate(Some(&[200, 400])).is_err());
    }

    #[test]
    fn keep_count_is_ceiling_with_floor_one() {
        assert_eq!(keep_count(4, 0.5), 2);
        assert_eq!(keep_count(3, 0.5), 2);
        assert_eq!(keep_count(1, 0.5), 1);
        assert_eq!(keep_count(4, 0.01), 1);
        assert_eq!(keep_count(4, 1.0), 4);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(top_k(&[0.5, 0.5, 0.5, 0.5], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.1, 0.9, 0.9, 0.2], 1), vec![1]);
    }
}

//! Labeled synthetic "videos": a point mass under gravity bouncing inside a
//! box, optionally with a physics violation, rendered to latent frames by one
//! of several pseudo-generators.
//!
//! Each pseudo-generator ("source") embeds the per-frame state
//! `(x, y, vx/v_scale, vy/v_scale)` affinely into `R^P`. Part of the embedding
//! is shared by all sources and part is source-specific; each source also has
//! its own bias pattern and correlated noise texture. Sources are therefore
//! linearly separable while the physics lives in a partially shared subspace.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, tag};

pub const DATASET_MAGIC: &[u8; 8] = b"NPROBE01";

/// Number of scalar state features embedded per frame.
pub const STATE_FEATURES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Default for Arena {
    fn default() -> Self {
        Self {
            min: [-1.0, -1.0],
            max: [1.0, 1.0],
        }
    }
}

impl Arena {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsScene {
    /// Downward acceleration in latent-length per frame squared.
    pub gravity: f64,
    pub restitution: f64,
    pub initial_position: [f64; 2],
    pub initial_velocity: [f64; 2],
    pub frame_count: usize,
    pub arena: Arena,
}

impl PhysicsScene {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.restitution) {
            return Err(Error::InvalidArgument(format!("restitution {} outside [0, 1]", self.restitution)));
        }
        if self.frame_count < 2 {
            return Err(Error::InvalidArgument("frame_count must be at least 2".into()));
        }
        if !self.arena.contains(self.initial_position) {
            return Err(Error::InvalidArgument(format!(
                "initial position {:?} outside arena",
                self.initial_position
            )));
        }
        let finite = self.gravity.is_finite() && self.initial_position.iter().chain(&self.initial_velocity).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("scene".into()));
        }
        Ok(())
    }

    /// Kinetic plus potential energy per unit mass.
    pub fn energy(&self, s: &State) -> f64 {
        0.5 * (s.velocity[0].powi(2) + s.velocity[1].powi(2)) + self.gravity * (s.position[1] - self.arena.min[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    None,
    GravityReversal,
    EnergyGain,
    Teleport,
    FrozenObject,
}

impl ViolationKind {
    pub const VIOLATIONS: [ViolationKind; 4] = [
        ViolationKind::GravityReversal,
        ViolationKind::EnergyGain,
        ViolationKind::Teleport,
        ViolationKind::FrozenObject,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationSpec {
    pub kind: ViolationKind,
    pub magnitude: f64,
    pub onset_frame: usize,
}

impl ViolationSpec {
    pub fn none() -> Self {
        Self {
            kind: ViolationKind::None,
            magnitude: 0.0,
            onset_frame: 0,
        }
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.kind == ViolationKind::None && self.magnitude != 0.0 {
            return Err(Error::InvalidArgument("kind none requires magnitude 0".into()));
        }
        if !(self.magnitude >= 0.0) {
            return Err(Error::InvalidArgument("magnitude must be >= 0".into()));
        }
        if self.onset_frame >= frames {
            return Err(Error::InvalidArgument(format!(
                "onset frame {} not below frame count {frames}",
                self.onset_frame
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    /// Continuous times (in frames) of every wall contact.
    pub bounce_times: Vec<f64>,
}

const MAX_EVENTS_PER_FRAME: usize = 64;
const EVENT_EPS: f64 = 1e-12;

/// Integrates the scene frame by frame and applies the violation from its
/// onset frame onward. See [`simulate_detailed`].
pub fn simulate_trajectory(scene: &PhysicsScene, violation: &ViolationSpec, seed: u64) -> Result<Vec<State>> {
    simulate_detailed(scene, violation, seed).map(|t| t.states)
}

/// Ballistic motion is integrated in closed form between wall contacts
/// (kick-drift-kick is exact under constant acceleration), and contacts are
/// located exactly, so violation-free elastic scenes conserve energy to
/// rounding error.
pub fn simulate_detailed(scene: &PhysicsScene, violation: &ViolationSpec, seed: u64) -> Result<Trajectory> {
    scene.validate()?;
    violation.validate(scene.frame_count)?;
    let mut rng = rng_for(&[tag::SCENE, seed]);
    let mut s = State {
        position: scene.initial_position,
        velocity: scene.initial_velocity,
    };
    let mut states = Vec::with_capacity(scene.frame_count);
    let mut bounce_times = Vec::new();
    let mut frozen = false;
    let active = |f: usize| violation.kind != ViolationKind::None && f >= violation.onset_frame;
    for f in 0..scene.frame_count {
        if f > 0 {
            if !frozen {
                let accel = if active(f - 1) && violation.kind == ViolationKind::GravityReversal {
                    violation.magnitude * scene.gravity
                } else {
                    -scene.gravity
                };
                let gain = if active(f - 1) && violation.kind == ViolationKind::EnergyGain {
                    1.0 + violation.magnitude
                } else {
                    1.0
                };
                advance(&mut s, scene, accel, gain, (f - 1) as f64, &mut bounce_times);
            }
            if !(s.position.iter().chain(&s.velocity).all(|v| v.is_finite())) {
                return Err(Error::SimulationDiverged { frame: f });
            }
        }
        if active(f) && f == violation.onset_frame {
            match violation.kind {
                ViolationKind::Teleport => {
                    s.position = teleport(s.position, violation.magnitude, &scene.arena, &mut rng);
                }
                ViolationKind::FrozenObject => {
                    frozen = true;
                    s.velocity = [0.0, 0.0];
                }
                _ => {}
            }
        }
        states.push(s);
    }
    Ok(Trajectory { states, bounce_times })
}

fn teleport(p: [f64; 2], magnitude: f64, arena: &Arena, rng: &mut impl Rng) -> [f64; 2] {
    let dist = magnitude * arena.width();
    for _ in 0..64 {
        // Upward half-plane: a jump gains potential energy.
        let angle = rng.random::<f64>() * std::f64::consts::PI;
        let q = [p[0] + dist * angle.cos(), p[1] + dist * angle.sin()];
        if arena.contains(q) {
            return q;
        }
    }
    // Toward the arena centre, clamped.
    let c = [0.5 * (arena.min[0] + arena.max[0]), 0.5 * (arena.min[1] + arena.max[1])];
    let (dx, dy) = (c[0] - p[0], c[1] - p[1]);
    let n = (dx * dx + dy * dy).sqrt().max(1e-12);
    [
        (p[0] + dist * dx / n).clamp(arena.min[0], arena.max[0]),
        (p[1] + dist * dy / n).clamp(arena.min[1], arena.max[1]),
    ]
}

/// Earliest time in `(EVENT_EPS, limit]` at which `x0 + v t + a t^2 / 2`
/// reaches `wall` while moving toward it.
fn hit_time(x0: f64, v: f64, a: f64, wall: f64, limit: f64) -> Option<f64> {
    let c = x0 - wall;
    let roots: [f64; 2] = if a.abs() < 1e-15 {
        if v.abs() < 1e-15 {
            return None;
        }
        [-c / v, f64::NAN]
    } else {
        let disc = v * v - 2.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        // Numerically stable quadratic roots of (a/2) t^2 + v t + c.
        let qq = -(v + v.signum() * sq);
        if qq.abs() < 1e-300 {
            [-v / a, f64::NAN]
        } else {
            [qq / a, 2.0 * c / qq]
        }
    };
    roots
        .into_iter()
        .filter(|t| t.is_finite() && *t > EVENT_EPS && *t <= limit)
        .filter(|&t| {
            // Approaching the wall at contact.
            let vel = v + a * t;
            if wall >= x0 {
                vel > 0.0
            } else {
                vel < 0.0
            }
        })
        .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))))
}

fn advance(s: &mut State, scene: &PhysicsScene, ay: f64, gain: f64, t0: f64, bounces: &mut Vec<f64>) {
    let arena = &scene.arena;
    let mut remaining = 1.0;
    for _ in 0..MAX_EVENTS_PER_FRAME {
        let accel = [0.0, ay];
        let mut best: Option<(f64, usize)> = None;
        for axis in 0..2 {
            for wall in [arena.min[axis], arena.max[axis]] {
                if let Some(t) = hit_time(s.position[axis], s.velocity[axis], accel[axis], wall, remaining) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, axis));
                    }
                }
            }
        }
        let dt = best.map_or(remaining, |(t, _)| t);
        for axis in 0..2 {
            s.position[axis] += s.velocity[axis] * dt + 0.5 * accel[axis] * dt * dt;
            s.velocity[axis] += accel[axis] * dt;
        }
        remaining -= dt;
        match best {
            Some((_, axis)) => {
                let lo = arena.min[axis];
                let hi = arena.max[axis];
                s.position[axis] = s.position[axis].clamp(lo, hi);
                s.velocity[axis] = -s.velocity[axis] * scene.restitution;
                if gain != 1.0 {
                    s.velocity[0] *= gain;
                    s.velocity[1] *= gain;
                }
                bounces.push(t0 + 1.0 - remaining);
            }
            None => break,
        }
        if remaining <= EVENT_EPS {
            break;
        }
    }
    for axis in 0..2 {
        s.position[axis] = s.position[axis].clamp(arena.min[axis], arena.max[axis]);
    }
}

/// A prompt's scene family: nominal initial conditions and restitution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneFamily {
    pub name: &'static str,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub restitution: f64,
}

pub const FAMILIES: [SceneFamily; 8] = [
    SceneFamily {
        name: "drop-left",
        position: [-0.5, 0.8],
        velocity: [0.06, 0.0],
        restitution: 0.9,
    },
    SceneFamily {
        name: "drop-right",
        position: [0.5, 0.8],
        velocity: [-0.06, 0.0],
        restitution: 0.9,
    },
    SceneFamily {
        name: "throw-right",
        position: [-0.8, -0.4],
        velocity: [0.16, 0.2],
        restitution: 0.85,
    },
    SceneFamily {
        name: "throw-left",
        position: [0.8, -0.4],
        velocity: [-0.16, 0.2],
        restitution: 0.85,
    },
    SceneFamily {
        name: "bounce",
        position: [0.0, 0.2],
        velocity: [0.0, -0.2],
        restitution: 0.95,
    },
    SceneFamily {
        name: "lob",
        position: [-0.3, -0.7],
        velocity: [0.1, 0.32],
        restitution: 0.9,
    },
    SceneFamily {
        name: "skim",
        position: [-0.9, -0.6],
        velocity: [0.26, 0.08],
        restitution: 0.9,
    },
    SceneFamily {
        name: "ceiling",
        position: [0.3, 0.9],
        velocity: [-0.14, -0.1],
        restitution: 0.9,
    },
];

pub fn family_of(prompt_id: u32) -> usize {
    prompt_id as usize % FAMILIES.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub frames: usize,
    pub latent_width: usize,
    /// Videos per pseudo-generator; its length is the number of sources.
    pub videos_per_source: Vec<usize>,
    pub positive_rate: f64,
    /// Relative weights of gravity reversal, energy gain, teleport, frozen.
    pub violation_mix: [f64; 4],
    pub gravity_reversal_magnitude: f64,
    pub energy_gain_magnitude: f64,
    /// In arena widths.
    pub teleport_magnitude: f64,
    pub n_prompts: u32,
    pub semantic_mismatch_rate: f64,
    pub quality_pc_correlation: f64,
    pub quality_sem_correlation: f64,
    pub gravity: f64,
    pub velocity_scale: f64,
    /// Multiplier on the kinetic and potential state features.
    pub energy_feature_scale: f64,
    /// Fraction of each source's embedding variance that is source-specific.
    pub source_specific_mix: f64,
    pub bias_scale: f64,
    pub texture_scale: f64,
    pub quality_gain: f64,
    pub position_jitter: f64,
    pub velocity_jitter: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 13,
            latent_width: 32,
            videos_per_source: vec![100; 4],
            positive_rate: 0.35,
            violation_mix: [1.0; 4],
            gravity_reversal_magnitude: 1.0,
            energy_gain_magnitude: 0.3,
            teleport_magnitude: 0.5,
            n_prompts: 64,
            semantic_mismatch_rate: 0.2,
            quality_pc_correlation: 0.2,
            quality_sem_correlation: 0.6,
            gravity: 0.04,
            velocity_scale: 0.25,
            energy_feature_scale: 1.0,
            source_specific_mix: 0.5,
            bias_scale: 1.0,
            texture_scale: 0.03,
            quality_gain: 0.5,
            position_jitter: 0.1,
            velocity_jitter: 0.03,
        }
    }
}

impl WorldConfig {
    pub fn n_sources(&self) -> usize {
        self.videos_per_source.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.frames < 2 {
            return bad("frames must be >= 2");
        }
        if self.latent_width < STATE_FEATURES + 1 {
            return bad("latent_width too small");
        }
        if self.videos_per_source.is_empty() || self.videos_per_source.len() > u16::MAX as usize {
            return bad("need at least one source");
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return bad("positive_rate outside [0, 1]");
        }
        if self.violation_mix.iter().any(|w| *w < 0.0) || self.violation_mix.iter().sum::<f64>() <= 0.0 {
            return bad("violation_mix must be non-negative with positive sum");
        }
        let a = self.quality_sem_correlation;
        let r = self.quality_pc_correlation;
        if a.abs() > 1.0 || r.abs() > 1.0 || a * a + r * r > 1.0 {
            return bad("quality correlations must satisfy a^2 + r^2 <= 1");
        }
        if self.n_prompts == 0 {
            return bad("n_prompts must be positive");
        }
        if !(0.0..=1.0).contains(&self.source_specific_mix) || !(0.0..=1.0).contains(&self.semantic_mismatch_rate) {
            return bad("mix rates must be in [0, 1]");
        }
        Ok(())
    }

    pub fn total_videos(&self) -> usize {
        self.videos_per_source.iter().sum()
    }

    fn frames_for_onset(&self) -> (usize, usize) {
        // Keep at least three clean frames before and after onset when possible.
        let lo = 3.min(self.frames - 1);
        let hi = (self.frames.saturating_sub(3)).max(lo);
        (lo, hi)
    }
}

/// One pseudo-generator's rendering style.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceStyle {
    /// `STATE_FEATURES x P`.
    pub embedding: Array2<f64>,
    pub bias: Array1<f64>,
    /// `P x P` correlated-noise factor.
    pub texture: Array2<f64>,
    pub texture_scale: f64,
}

/// All sources of a world plus the shared quality direction.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderBank {
    pub sources: Vec<SourceStyle>,
    pub quality_direction: Array1<f64>,
    pub quality_gain: f64,
    pub velocity_scale: f64,
    pub gravity: f64,
    pub energy_scale: f64,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    let n = Normal::new(0.0, std).unwrap();
    Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
}

impl RenderBank {
    pub fn new(cfg: &WorldConfig) -> Self {
        let p = cfg.latent_width;
        let mut rng = rng_for(&[tag::SOURCE, cfg.seed]);
        let emb_std = 1.0 / (STATE_FEATURES as f64).sqrt();
        let shared = gaussian_matrix(STATE_FEATURES, p, emb_std, &mut rng);
        let mut qdir = gaussian_matrix(1, p, 1.0, &mut rng).row(0).to_owned();
        let qn = qdir.dot(&qdir).sqrt();
        qdir /= qn / (p as f64).sqrt();
        let m = cfg.source_specific_mix;
        let sources = (0..cfg.n_sources())
            .map(|_| {
                let own = gaussian_matrix(STATE_FEATURES, p, emb_std, &mut rng);
                let embedding = &shared * (1.0 - m).sqrt() + &own * m.sqrt();
                let bias = gaussian_matrix(1, p, cfg.bias_scale, &mut rng).row(0).to_owned();
                let texture = gaussian_matrix(p, p, 1.0 / (p as f64).sqrt(), &mut rng);
                let texture_scale = cfg.texture_scale * (0.75 + 0.5 * rng.random::<f64>());
                SourceStyle {
                    embedding,
                    bias,
                    texture,
                    texture_scale,
                }
            })
            .collect();
        Self {
            sources,
            quality_direction: qdir,
            quality_gain: cfg.quality_gain,
            velocity_scale: cfg.velocity_scale,
            gravity: cfg.gravity,
            energy_scale: cfg.energy_feature_scale,
        }
    }

    pub fn latent_width(&self) -> usize {
        self.quality_direction.len()
    }

    /// `(x, y, vx, vy, kinetic, potential)`, velocities and energies in
    /// units of `velocity_scale`; potential is measured from `y = 0`.
    pub fn state_features(&self, s: &State) -> [f64; STATE_FEATURES] {
        let vs = self.velocity_scale;
        let (u, w) = (s.velocity[0] / vs, s.velocity[1] / vs);
        [
            s.position[0],
            s.position[1],
            u,
            w,
            self.energy_scale * 0.5 * (u * u + w * w),
            self.energy_scale * self.gravity * s.position[1] / (vs * vs),
        ]
    }

    /// Affine embedding of each state plus the source's bias and seeded
    /// noise texture.
    pub fn render_to_latent(&self, states: &[State], source_id: usize, seed: u64) -> Result<Array2<f64>> {
        let style = self
            .sources
            .get(source_id)
            .ok_or_else(|| Error::InvalidArgument(format!("source {source_id} >= {}", self.sources.len())))?;
        let p = self.latent_width();
        let mut phi = Array2::zeros((states.len(), STATE_FEATURES));
        for (f, s) in states.iter().enumerate() {
            for (k, v) in self.state_features(s).into_iter().enumerate() {
                phi[[f, k]] = v;
            }
        }
        let mut frames = phi.dot(&style.embedding);
        frames += &style.bias;
        let mut rng = rng_for(&[tag::RENDER, seed, source_id as u64]);
        let white = Array2::from_shape_simple_fn((states.len(), p), || StandardNormal.sample(&mut rng));
        let white: Array2<f64> = white;
        frames.scaled_add(style.texture_scale, &white.dot(&style.texture));
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rendered frames".into()));
        }
        Ok(frames)
    }

    pub fn apply_quality(&self, frames: &mut Array2<f64>, quality: f64) {
        let shift = &self.quality_direction * (self.quality_gain * (quality - 0.5));
        *frames += &shift;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    /// `F x P`, values exactly representable in `f32`.
    pub frames: Array2<f64>,
    pub y_pc: bool,
    pub y_sem: bool,
    pub source_id: u16,
    pub prompt_id: u32,
    pub seed: u64,
    pub quality_score: f64,
}

/// Everything needed to regenerate one video bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecipe {
    pub scene: PhysicsScene,
    pub violation: ViolationSpec,
    pub source_id: usize,
    pub prompt_id: u32,
    pub y_sem: bool,
    pub seed: u64,
}

pub fn scene_for_family(cfg: &WorldConfig, family: usize, rng: &mut impl Rng) -> PhysicsScene {
    let fam = &FAMILIES[family];
    let arena = Arena::default();
    let mut jit = |scale: f64| (rng.random::<f64>() * 2.0 - 1.0) * scale;
    let pos = [
        (fam.position[0] + jit(cfg.position_jitter)).clamp(arena.min[0], arena.max[0]),
        (fam.position[1] + jit(cfg.position_jitter)).clamp(arena.min[1], arena.max[1]),
    ];
    let vel = [
        fam.velocity[0] + jit(cfg.velocity_jitter),
        fam.velocity[1] + jit(cfg.velocity_jitter),
    ];
    let restitution = (fam.restitution + jit(0.05)).clamp(0.0, 1.0);
    PhysicsScene {
        gravity: cfg.gravity,
        restitution,
        initial_position: pos,
        initial_velocity: vel,
        frame_count: cfg.frames,
        arena,
    }
}

fn pick_violation(cfg: &WorldConfig, rng: &mut impl Rng) -> ViolationSpec {
    let total: f64 = cfg.violation_mix.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut kind = ViolationKind::VIOLATIONS[3];
    for (k, w) in ViolationKind::VIOLATIONS.iter().zip(cfg.violation_mix) {
        if u < w {
            kind = *k;
            break;
        }
        u -= w;
    }
    let (lo, hi) = cfg.frames_for_onset();
    let onset_frame = rng.random_range(lo..=hi);
    let magnitude = match kind {
        ViolationKind::GravityReversal => cfg.gravity_reversal_magnitude,
        ViolationKind::EnergyGain => cfg.energy_gain_magnitude,
        ViolationKind::Teleport => cfg.teleport_magnitude,
        ViolationKind::FrozenObject => 1.0,
        ViolationKind::None => 0.0,
    };
    ViolationSpec {
        kind,
        magnitude,
        onset_frame,
    }
}

/// Draws the scene and violation for one video. Energy-gain onsets are
/// placed at or before a wall contact so the violation is visible.
pub fn recipe(cfg: &WorldConfig, prompt_id: u32, source_id: usize, plausible: bool, seed: u64) -> Result<VideoRecipe> {
    let mut rng = rng_for(&[tag::SCENE, seed]);
    let prompt_family = family_of(prompt_id);
    let y_sem = rng.random::<f64>() >= cfg.semantic_mismatch_rate;
    let family = if y_sem {
        prompt_family
    } else {
        (prompt_family + 1 + rng.random_range(0..FAMILIES.len() - 1)) % FAMILIES.len()
    };
    let violation = if plausible {
        ViolationSpec::none()
    } else {
        pick_violation(cfg, &mut rng)
    };
    let mut violation = violation;
    let mut scene = scene_for_family(cfg, family, &mut rng);
    if violation.kind == ViolationKind::EnergyGain {
        let (lo, hi) = cfg.frames_for_onset();
        let mut placed = false;
        for _ in 0..32 {
            let clean = simulate_detailed(&scene, &ViolationSpec::none(), seed)?;
            if let Some(&b) = clean.bounce_times.iter().find(|&&t| t >= lo as f64) {
                let last = (b.floor() as usize).clamp(lo, hi);
                violation.onset_frame = rng.random_range(lo..=last);
                placed = true;
                break;
            }
            scene = scene_for_family(cfg, family, &mut rng);
        }
        if !placed {
            violation.kind = ViolationKind::GravityReversal;
            violation.magnitude = cfg.gravity_reversal_magnitude;
        }
    }
    Ok(VideoRecipe {
        scene,
        violation,
        source_id,
        prompt_id,
        y_sem,
        seed,
    })
}

/// Synthetic quality covariate: correlated with the semantic label and,
/// weakly, with the plausibility label.
fn quality_score(cfg: &WorldConfig, y_pc: bool, y_sem: bool, seed: u64) -> f64 {
    let mut rng = rng_for(&[tag::DATASET, seed, 0x5155]);
    let std_label = |y: bool, p: f64| {
        let p = p.clamp(1e-6, 1.0 - 1e-6);
        ((y as u8 as f64) - p) / (p * (1.0 - p)).sqrt()
    };
    let a = cfg.quality_sem_correlation;
    let r = cfg.quality_pc_correlation;
    let n: f64 = StandardNormal.sample(&mut rng);
    let z = a * std_label(y_sem, 1.0 - cfg.semantic_mismatch_rate)
        + r * std_label(y_pc, cfg.positive_rate)
        + (1.0 - a * a - r * r).max(0.0).sqrt() * n;
    (0.5 + 0.15 * z).clamp(0.0, 1.0)
}

pub fn realize(cfg: &WorldConfig, bank: &RenderBank, r: &VideoRecipe) -> Result<LatentVideo> {
    let states = simulate_trajectory(&r.scene, &r.violation, r.seed)?;
    let y_pc = r.violation.kind == ViolationKind::None;
    let quality = binio::quantize(quality_score(cfg, y_pc, r.y_sem, r.seed));
    let mut frames = bank.render_to_latent(&states, r.source_id, r.seed)?;
    bank.apply_quality(&mut frames, quality);
    frames.mapv_inplace(binio::quantize);
    Ok(LatentVideo {
        frames,
        y_pc,
        y_sem: r.y_sem,
        source_id: r.source_id as u16,
        prompt_id: r.prompt_id,
        seed: r.seed,
        quality_score: quality,
    })
}

/// A single video with a chosen plausibility outcome.
pub fn sample_video(
    cfg: &WorldConfig,
    bank: &RenderBank,
    prompt_id: u32,
    source_id: usize,
    plausible: bool,
    seed: u64,
) -> Result<LatentVideo> {
    realize(cfg, bank, &recipe(cfg, prompt_id, source_id, plausible, seed)?)
}

/// Emits `videos_per_source[s]` videos per source, of which exactly
/// `round(count * positive_rate)` are violation-free.
pub fn generate_dataset(cfg: &WorldConfig) -> Result<Vec<LatentVideo>> {
    cfg.validate()?;
    let bank = RenderBank::new(cfg);
    let mut out = Vec::with_capacity(cfg.total_videos());
    for (source, &count) in cfg.videos_per_source.iter().enumerate() {
        let n_pos = (count as f64 * cfg.positive_rate).round() as usize;
        let mut labels: Vec<bool> = (0..count).map(|i| i < n_pos).collect();
        labels.shuffle(&mut rng_for(&[tag::DATASET, cfg.seed, source as u64]));
        for (i, plausible) in labels.into_iter().enumerate() {
            let seed = derive_seed(&[tag::DATASET, cfg.seed, source as u64, i as u64]);
            let prompt_id = (derive_seed(&[tag::COND, seed]) % cfg.n_prompts as u64) as u32;
            out.push(sample_video(cfg, &bank, prompt_id, source, plausible, seed)?);
        }
    }
    Ok(out)
}

pub fn encode_dataset(videos: &[LatentVideo], frames: usize, width: usize) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u32(videos.len() as u32);
    w.u32(frames as u32);
    w.u32(width as u32);
    for v in videos {
        if v.frames.dim() != (frames, width) {
            return Err(Error::ShapeMismatch {
                expected: format!("{frames}x{width}"),
                actual: format!("{:?}", v.frames.dim()),
            });
        }
        w.u64(v.seed);
        w.u8(v.y_pc as u8);
        w.u8(v.y_sem as u8);
        w.u16(v.source_id);
        w.u32(v.prompt_id);
        w.f32(v.quality_score as f32);
        w.f32s(v.frames.iter().copied());
    }
    Ok(w.into_inner())
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<(Vec<LatentVideo>, usize, usize)> {
    let mut r = Reader::new(bytes, path);
    r.magic(DATASET_MAGIC)?;
    let n = r.u32()? as usize;
    let f = r.u32()? as usize;
    let p = r.u32()? as usize;
    let mut videos = Vec::with_capacity(n);
    for _ in 0..n {
        let seed = r.u64()?;
        let y_pc = r.u8()? != 0;
        let y_sem = r.u8()? != 0;
        let source_id = r.u16()?;
        let prompt_id = r.u32()?;
        let quality_score = r.f32()? as f64;
        let frames = Array2::from_shape_vec((f, p), r.f32s(f * p)?).map_err(|e| r.err(e.to_string()))?;
        videos.push(LatentVideo {
            frames,
            y_pc,
            y_sem,
            source_id,
            prompt_id,
            seed,
            quality_score,
        });
    }
    r.finish()?;
    Ok((videos, f, p))
}

/// Writes the dataset container and its JSON config sidecar (`<path>.json`).
pub fn write_dataset(path: &Path, videos: &[LatentVideo], cfg: &WorldConfig) -> Result<()> {
    let bytes = encode_dataset(videos, cfg.frames, cfg.latent_width)?;
    binio::write_atomic(path, &bytes)?;
    let sidecar = sidecar_path(path);
    binio::write_atomic(&sidecar, serde_json::to_string_pretty(cfg)?.as_bytes())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn read_dataset(path: &Path) -> Result<Vec<LatentVideo>> {
    let bytes = binio::read_file(path)?;
    Ok(decode_dataset(&bytes, path)?.0)
}

/// Ground-truth plausibility judge for arbitrary latent videos.
///
/// Decodes per-frame states under every source's embedding (least squares
/// with the quality direction as a nuisance column), keeps the best-fitting
/// source, then asks whether a violation-free simulation started from the
/// decoded initial state explains the whole decoded trajectory.
#[derive(Debug, Clone)]
pub struct PlausibilityJudge {
    bank: RenderBank,
    cfg: WorldConfig,
    /// Mean squared position error above which a video is implausible.
    pub threshold: f64,
    decoders: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Judgement {
    pub plausible: bool,
    pub source_id: usize,
    pub residual: f64,
}

impl PlausibilityJudge {
    pub const DEFAULT_THRESHOLD: f64 = 0.025;

    pub fn new(cfg: &WorldConfig) -> Self {
        let bank = RenderBank::new(cfg);
        let decoders = bank
            .sources
            .iter()
            .map(|s| {
                let p = bank.latent_width();
                let mut design = Array2::zeros((p, STATE_FEATURES + 1));
                design.slice_mut(ndarray::s![.., ..STATE_FEATURES]).assign(&s.embedding.t());
                design.column_mut(STATE_FEATURES).assign(&bank.quality_direction);
                pseudo_inverse(&design)
            })
            .collect();
        Self {
            bank,
            cfg: cfg.clone(),
            threshold: Self::DEFAULT_THRESHOLD,
            decoders,
        }
    }

    fn decode(&self, frames: &Array2<f64>, source: usize) -> (Vec<State>, f64) {
        let style = &self.bank.sources[source];
        let centred = frames - &style.bias;
        // coef = pinv * (frame - bias), one frame per row.
        let coefs = centred.dot(&self.decoders[source].t());
        let mut design = Array2::zeros((STATE_FEATURES + 1, self.bank.latent_width()));
        design.slice_mut(ndarray::s![..STATE_FEATURES, ..]).assign(&style.embedding);
        design.row_mut(STATE_FEATURES).assign(&self.bank.quality_direction);
        let recon = coefs.dot(&design);
        let resid = (&centred - &recon).mapv(|v| v * v).mean().unwrap_or(0.0);
        let vs = self.bank.velocity_scale;
        let states = coefs
            .rows()
            .into_iter()
            .map(|c| State {
                position: [c[0], c[1]],
                velocity: [c[2] * vs, c[3] * vs],
            })
            .collect();
        (states, resid)
    }

    pub fn judge(&self, frames: &Array2<f64>) -> Judgement {
        let (source_id, states) = (0..self.bank.sources.len())
            .map(|s| {
                let (st, r) = self.decode(frames, s);
                (s, st, r)
            })
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .map(|(s, st, _)| (s, st))
            .expect("at least one source");
        let residual = self.physics_residual(&states);
        Judgement {
            plausible: residual <= self.threshold,
            source_id,
            residual,
        }
    }

    /// Sum over frame transitions of the squared one-step prediction error in
    /// state-feature space. Each step is minimised over a restitution grid
    /// and small start offsets, so contacts near a frame boundary are not
    /// penalised for decoding error in their timing.
    pub fn physics_residual(&self, states: &[State]) -> f64 {
        const OFFSETS: [f64; 3] = [-0.03, 0.0, 0.03];
        let arena = Arena::default();
        let mut total = 0.0;
        for pair in states.windows(2) {
            let target = self.bank.state_features(&pair[1]);
            let mut best = f64::INFINITY;
            for dx in OFFSETS {
                for dy in OFFSETS {
                    let start = [
                        (pair[0].position[0] + dx).clamp(arena.min[0], arena.max[0]),
                        (pair[0].position[1] + dy).clamp(arena.min[1], arena.max[1]),
                    ];
                    for k in 0..=10 {
                        let scene = PhysicsScene {
                            gravity: self.cfg.gravity,
                            restitution: 0.75 + 0.025 * k as f64,
                            initial_position: start,
                            initial_velocity: pair[0].velocity,
                            frame_count: 2,
                            arena,
                        };
                        let Ok(sim) = simulate_trajectory(&scene, &ViolationSpec::none(), 0) else {
                            continue;
                        };
                        let pred = self.bank.state_features(&sim[1]);
                        // Energy columns are functions of these four.
                        let err: f64 = pred.iter().zip(&target).take(4).map(|(a, b)| (a - b).powi(2)).sum();
                        best = best.min(err);
                    }
                }
            }
            total += best;
        }
        total
    }
}

/// Moore-Penrose pseudo-inverse of a tall full-column-rank matrix via the
/// normal equations.
fn pseudo_inverse(a: &Array2<f64>) -> Array2<f64> {
    let ata = a.t().dot(a);
    let inv = invert_spd(&ata);
    inv.dot(&a.t())
}

/// Inverse of a small symmetric positive-definite matrix (Gauss-Jordan).
pub(crate) fn invert_spd(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = Array2::eye(n);
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[[i, c]].abs().total_cmp(&a[[j, c]].abs())).unwrap();
        if piv != c {
            for k in 0..n {
                a.swap([c, k], [piv, k]);
                inv.swap([c, k], [piv, k]);
            }
        }
        let d = a[[c, c]];
        for k in 0..n {
            a[[c, k]] /= d;
            inv[[c, k]] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = a[[r, c]];
                if f != 0.0 {
                    for k in 0..n {
                        a[[r, k]] -= f * a[[c, k]];
                        inv[[r, k]] -= f * inv[[c, k]];
                    }
                }
            }
        }
    }
    inv
}

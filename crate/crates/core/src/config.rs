//! Declarative experiment configuration (JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DenoiserShape, DenoiserTrainConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::probing::ProbeSettings;
use crate::rng::derive_seed;
use crate::selection::CheckpointSchedule;
use crate::verifier::VerifierTrainConfig;
use crate::worldgen::WorldConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler_steps: usize,
    pub model: DenoiserShape,
    pub training: DenoiserTrainConfig,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sampler_steps: 50,
            model: DenoiserShape::default(),
            training: DenoiserTrainConfig::default(),
        }
    }
}

impl DiffusionSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    pub timesteps: Vec<usize>,
    pub layers: Vec<usize>,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        Self {
            timesteps: vec![200, 400, 600],
            layers: vec![2, 4, 6, 8, 10],
        }
    }
}

/// A single (timestep, layer) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub t: usize,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub settings: ProbeSettings,
    /// Source whose records feed the grid, residualization and verifier.
    /// `None` pools every source.
    pub source: Option<u16>,
    pub cross_source: Cell,
    pub residualization: Cell,
    pub random_control: bool,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            settings: ProbeSettings::default(),
            source: Some(0),
            cross_source: Cell { t: 400, layer: 6 },
            residualization: Cell { t: 400, layer: 6 },
            random_control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierSection {
    pub training: VerifierTrainConfig,
    /// Candidate layers for the best-layer search.
    pub layers: Vec<usize>,
}

impl Default for VerifierSection {
    fn default() -> Self {
        Self {
            training: VerifierTrainConfig::default(),
            layers: vec![4, 6, 8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Sampling with the trained denoiser, outcomes from the judge.
    Ddim,
    /// Trajectories bound to world videos of known plausibility.
    #[default]
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    /// The layer field is overwritten by the selected best layer.
    pub schedule: CheckpointSchedule,
    pub prompts: u32,
    pub first_prompt: u32,
    pub modes: Vec<String>,
    pub best_of_n_timestep: usize,
    pub score_seed: u64,
    pub backend: BackendKind,
    pub replay_plausible_rate: f64,
    pub histogram_bins: usize,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            schedule: CheckpointSchedule::default(),
            prompts: 400,
            first_prompt: 0,
            modes: ["guided", "best-of-n", "random", "baseline", "oracle"].map(String::from).to_vec(),
            best_of_n_timestep: 200,
            score_seed: 0,
            backend: BackendKind::Replay,
            replay_plausible_rate: 0.35,
            histogram_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub svg: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { svg: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required: every stochastic choice derives from it.
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: String,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub features: FeaturesSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub verifier: VerifierSection,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_output() -> String {
    "runs/reference".into()
}

const WORLD: u64 = 1;
const DENOISER: u64 = 2;
const VERIFIER: u64 = 3;
const PROBE: u64 = 4;
const SELECT: u64 = 5;

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Seeds of every section after derivation from the global seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.world.seed = derive_seed(&[self.seed, WORLD]);
        c.diffusion.training.seed = derive_seed(&[self.seed, DENOISER]);
        c.verifier.training.seed = derive_seed(&[self.seed, VERIFIER]);
        c.probe.settings.seed = derive_seed(&[self.seed, PROBE]);
        c.selection.score_seed = derive_seed(&[self.seed, SELECT]);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.diffusion.model.validate()?;
        self.diffusion.schedule()?.step_map(self.diffusion.sampler_steps)?;
        if self.diffusion.model.frames != self.world.frames || self.diffusion.model.latent_width != self.world.latent_width {
            return Err(Error::Config("diffusion model dimensions must match the world latent shape".into()));
        }
        let tmax = self.diffusion.timesteps;
        if self.features.timesteps.is_empty() || self.features.layers.is_empty() {
            return Err(Error::Config("features: timesteps and layers must be nonempty".into()));
        }
        if let Some(&t) = self.features.timesteps.iter().find(|&&t| t >= tmax) {
            return Err(Error::TimestepOutOfRange { t, max: tmax });
        }
        if let Some(&l) = self.features.layers.iter().find(|&&l| l >= self.diffusion.model.layers) {
            return Err(Error::LayerOutOfRange {
                layer: l,
                depth: self.diffusion.model.layers,
            });
        }
        let covered = |c: &Cell| self.features.timesteps.contains(&c.t) && self.features.layers.contains(&c.layer);
        if !covered(&self.probe.cross_source) || !covered(&self.probe.residualization) {
            return Err(Error::Config("probe: control cells must be extracted coordinates".into()));
        }
        if let Some(s) = self.probe.source {
            if s as usize >= self.world.n_sources() {
                return Err(Error::Config(format!("probe: source {s} does not exist")));
            }
        }
        self.verifier.training.validate()?;
        if self.verifier.layers.is_empty() || self.verifier.layers.iter().any(|l| !self.features.layers.contains(l)) {
            return Err(Error::Config("verifier: candidate layers must be extracted layers".into()));
        }
        if self
            .verifier
            .training
            .timesteps
            .iter()
            .any(|t| !self.features.timesteps.contains(t))
        {
            return Err(Error::Config("verifier: training timesteps must be extracted timesteps".into()));
        }
        let sel = &self.selection;
        sel.schedule.validate(Some(&self.verifier.training.timesteps))?;
        if !self.verifier.training.timesteps.contains(&sel.best_of_n_timestep) {
            return Err(Error::Config("selection: best-of-n timestep is not a verifier timestep".into()));
        }
        if sel.prompts == 0 || sel.modes.is_empty() {
            return Err(Error::Config("selection: need at least one prompt and one mode".into()));
        }
        let known = crate::selection::Registry::default().mode_names();
        if let Some(m) = sel.modes.iter().find(|m| !known.contains(&m.as_str())) {
            return Err(Error::UnknownName {
                kind: "selection mode",
                name: m.clone(),
            });
        }
        if !(0.0..=1.0).contains(&sel.replay_plausible_rate) {
            return Err(Error::Config("selection: replay plausible rate outside [0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.resolved()).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

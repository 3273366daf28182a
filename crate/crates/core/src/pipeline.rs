//! Staged experiment: each stage reads its inputs from the run directory,
//! writes fresh outputs through temporary files, and records a manifest
//! with the config hash and SHA-256 of every input and output.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_atomic};
use crate::config::{BackendKind, ExperimentConfig};
use crate::diffusion::{load_denoiser, random_denoiser, save_denoiser, train_denoiser, CostLedger};
use crate::error::{Error, Result};
use crate::features::{build_cache, read_cache, write_cache, FeatureRecord};
use crate::probing::{
    cache_source_cluster_score, cross_source_eval, probe_grid, residualization_control, select_records, BaselineInputs, CrossSourceMatrix,
    ProbeGrid, ResidualizationReport,
};
use crate::report;
use crate::rng::derive_seed;
use crate::selection::{
    evaluate, exact_cost, expected_cost, score_distribution_report, Backend, BuildContext, DdimBackend, Evaluation, ExactCost, ModeSummary,
    Registry, ReplayBackend,
};
use crate::verifier::{load_verifier, save_verifier, select_best_layer, LayerSelection, VerifierReport};
use crate::worldgen::{encode_dataset, generate_dataset, read_dataset, write_dataset, LatentVideo, PlausibilityJudge, RenderBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainDenoiser,
    Extract,
    Probe,
    TrainVerifier,
    Select,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::TrainDenoiser,
        Stage::Extract,
        Stage::Probe,
        Stage::TrainVerifier,
        Stage::Select,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainDenoiser => "train-denoiser",
            Stage::Extract => "extract",
            Stage::Probe => "probe",
            Stage::TrainVerifier => "train-verifier",
            Stage::Select => "select",
            Stage::Report => "report",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::UnknownName {
            kind: "stage",
            name: s.into(),
        })
    }
}

/// Artifact paths inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    /// Verifier checkpoint read by `select` instead of the run's own.
    pub verifier_override: Option<PathBuf>,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            verifier_override: None,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn dataset(&self) -> PathBuf {
        self.path("data/dataset.npd")
    }
    pub fn denoiser(&self) -> PathBuf {
        self.path("model/denoiser.npdn")
    }
    pub fn cache(&self) -> PathBuf {
        self.path("features/cache.npfc")
    }
    pub fn random_cache(&self) -> PathBuf {
        self.path("features/random_cache.npfc")
    }
    pub fn verifier(&self) -> PathBuf {
        self.path("verifier/verifier.npvf")
    }
    pub fn selection_verifier(&self) -> PathBuf {
        self.verifier_override.clone().unwrap_or_else(|| self.verifier())
    }
    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.path(&format!("manifests/{}.json", stage.name()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_file(path)?)))
}

/// Collects outputs of one stage and writes them atomically.
struct StageRun<'a> {
    layout: &'a Layout,
    inputs: Vec<ArtifactHash>,
    outputs: Vec<ArtifactHash>,
}

impl<'a> StageRun<'a> {
    fn new(layout: &'a Layout) -> Self {
        Self {
            layout,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.layout.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.inputs.push(ArtifactHash {
            path: self.rel(path),
            sha256: h,
        });
        Ok(())
    }

    /// Records an output already written by a module writer.
    fn written(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.outputs.push(ArtifactHash {
            path: self.rel(path),
            sha256: h,
        });
        Ok(())
    }

    fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.layout.path(rel);
        write_atomic(&path, bytes)?;
        self.outputs.push(ArtifactHash {
            path: rel.into(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(rel, text.as_bytes())
    }

    fn finish(self, cfg: &ExperimentConfig, stage: Stage) -> Result<Manifest> {
        let m = Manifest {
            stage: stage.name().into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        write_atomic(&self.layout.manifest(stage), text.as_bytes())?;
        Ok(m)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn source_filter(cfg: &ExperimentConfig) -> impl Fn(&FeatureRecord) -> bool + Sync {
    let source = cfg.probe.source;
    move |r: &FeatureRecord| source.is_none_or(|s| r.source_id == s)
}

/// Per-timestep headline numbers of the probing stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepSummary {
    pub t: usize,
    pub baseline_auc: f64,
    pub best_mid_auc: f64,
    pub best_mid_delta: f64,
    pub random_best_mid_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub timesteps: Vec<TimestepSummary>,
    pub cross_source_diagonal: f64,
    pub cross_source_off_diagonal: f64,
    pub residualization: ResidualizationReport,
    pub source_silhouette: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub backend: String,
    pub best_layer: usize,
    pub checkpoint_steps: Vec<usize>,
    pub trajectory_plausible_rate: f64,
    pub modes: Vec<ModeSummary>,
    pub exact_cost: ExactCost,
    pub expected_cost: f64,
}

impl SelectionSummary {
    pub fn mode(&self, name: &str) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == name)
    }
}

pub fn run_stage(cfg: &ExperimentConfig, layout: &Layout, stage: Stage) -> Result<Manifest> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let start = Instant::now();
    info!("stage {} starting", stage.name());
    let m = match stage {
        Stage::GenData => gen_data(&cfg, layout),
        Stage::TrainDenoiser => train(&cfg, layout),
        Stage::Extract => extract(&cfg, layout),
        Stage::Probe => probe(&cfg, layout),
        Stage::TrainVerifier => train_verifier(&cfg, layout),
        Stage::Select => select(&cfg, layout),
        Stage::Report => report_stage(&cfg, layout),
    }?;
    info!("stage {} finished in {:.1}s", stage.name(), start.elapsed().as_secs_f64());
    Ok(m)
}

pub fn run_all(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<Manifest>> {
    Stage::ALL.into_iter().map(|s| run_stage(cfg, layout, s)).collect()
}

/// Runs `f` on a dedicated pool of `threads` workers (`None` = default).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<Manifest> {
    let mut run = StageRun::new(layout);
    let data = generate_dataset(&cfg.world)?;
    let path = layout.dataset();
    write_dataset(&path, &data, &cfg.world)?;
    run.written(&path)?;
    run.written(&crate::worldgen::sidecar_path(&path))?;
    run.json("config.json", cfg)?;
    run.finish(cfg, Stage::GenData)
}

fn train(cfg: &ExperimentConfig, layout: &Layout) -> Result<Manifest> {
    let mut run = StageRun::new(layout);
    run.input(&layout.dataset())?;
    let data = read_dataset(&layout.dataset())?;
    let schedule = cfg.diffusion.schedule()?;
    let (model, rep) = train_denoiser(&data, cfg.diffusion.model, &schedule, &cfg.diffusion.training)?;
    info!(
        "denoiser validation mse {:.4} (zero predictor {:.4})",
        rep.validation_mse, rep.zero_predictor_mse
    );
    save_denoiser(&layout.denoiser(), &model)?;
    run.written(&layout.denoiser())?;
    run.json("model/denoiser_report.json", &rep)?;
    run.finish(cfg, Stage::TrainDenoiser)
}

fn extract(cfg: &ExperimentConfig, layout: &Layout) -> Result<Manifest> {
    let mut run = StageRun::new(layout);
    run.input(&layout.dataset())?;
    run.input(&layout.denoiser())?;
    let data = read_dataset(&layout.dataset())?;
    let model = load_denoiser(&layout.denoiser())?;
    let schedule = cfg.diffusion.schedule()?;
    let (ts, ls) = (&cfg.features.timesteps, &cfg.features.layers);
    let mut ledger = CostLedger::default();
    let cache = build_cache(&model, &schedule, &data, cfg.world.seed, ts, ls, &mut ledger)?;
    write_cache(&layout.cache(), &cache)?;
    run.written(&layout.cache())?;
    if cfg.probe.random_control {
        let control = random_denoiser(cfg.diffusion.model, derive_seed(&[cfg.seed, 6]))?;
        let rc = build_cache(&control, &schedule, &data, cfg.world.seed, ts, ls, &mut ledger)?;
        write_cache(&layout.random_cache(), &rc)?;
        run.written(&layout.random_cache())?;
    }
    run.json("features/ledger.json", &ledger)?;
    run.finish(cfg, Stage::Extract)
}

fn probe(cfg: &ExperimentConfig, layout: &Layout) -> Result<Manifest> {
    let mut run = StageRun::new(layout);
    run.input(&layout.dataset())?;
    run.input(&layout.cache())?;
    let data = read_dataset(&layout.dataset())?;
    let cache = read_cache(&layout.cache())?;
    let schedule = cfg.diffusion.schedule()?;
    let keep = source_filter(cfg);
    let base = BaselineInputs {
        dataset: &data,
        schedule: &schedule,
        dataset_seed: cfg.world.seed,
    };
    let (ts, ls) = (&cfg.features.timesteps, &cfg.features.layers);
    let settings = &cfg.probe.settings;
    let grid = probe_grid(&cache, base, ts, ls, &keep, settings)?;
    run.json("probe/grid.json", &grid)?;
    run.bytes("probe/grid.csv", report::probe_table_csv(&grid).as_bytes())?;

    let random_grid = if cfg.probe.random_control {
        run.input(&layout.random_cache())?;
        let rc = read_cache(&layout.random_cache())?;
        let g = probe_grid(&rc, base, ts, ls, &keep, settings)?;
        run.json("probe/random_grid.json", &g)?;
        run.bytes("probe/random_grid.csv", report::probe_table_csv(&g).as_bytes())?;
        Some(g)
    } else {
        None
    };

    let cs = cfg.probe.cross_source;
    let cross = cross_source_eval(&cache, cs.t, cs.layer, settings)?;
    run.json("probe/cross_source.json", &cross)?;
    run.bytes("probe/cross_source.csv", report::cross_source_csv(&cross).as_bytes())?;

    let rz = cfg.probe.residualization;
    let recs = select_records(&cache, rz.t, rz.layer, &keep)?;
    let resid = residualization_control(&recs, rz.t, rz.layer, settings)?;
    let silhouette = cache_source_cluster_score(&cache, cs.t, cs.layer)?;

    let timesteps = ts
        .iter()
        .map(|&t| {
            let delta = grid.best_mid_delta(t).ok_or_else(|| Error::MissingCoordinate(format!("t={t}")))?;
            let baseline_auc = grid.baseline(t).map(|b| b.mean_auc).unwrap_or(f64::NAN);
            Ok(TimestepSummary {
                t,
                baseline_auc,
                best_mid_auc: baseline_auc + delta,
                best_mid_delta: delta,
                random_best_mid_delta: random_grid.as_ref().and_then(|g| g.best_mid_delta(t)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = ProbeSummary {
        timesteps,
        cross_source_diagonal: cross.diagonal_mean,
        cross_source_off_diagonal: cross.off_diagonal_mean,
        residualization: resid,
        source_silhouette: silhouette,
    };
    run.json("probe/summary.json", &summary)?;
    run.finish(cfg, Stage::Probe)
}

fn train_verifier(cfg: &ExperimentConfig, layout: &Layout) -> Result<Manifest> {
    let mut run = StageRun::new(layout);
    run.input(&layout.cache())?;
    let cache = read_cache(&layout.cache())?;
    let keep = source_filter(cfg);
    let (sel, verifier, reports) = select_best_layer(&cache, &cfg.verifier.layers, &keep, &cfg.verifier.training)?;
    info!("best verifier layer {} ({:?})", sel.best_layer, sel.validation_auc);
    save_verifier(&layout.verifier(), &verifier)?;
    run.written(&layout.verifier())?;
    run.json("verifier/layer_selection.json", &sel)?;
    run.json("verifier/reports.json", &reports)?;
    run.finish(cfg, Stage::TrainVerifier)
}

fn winners_file(eval: &Evaluation, mode: &str, frames: usize, width: usize) -> Result<Vec<u8>> {
    let videos: Vec<LatentVideo> = eval
        .results
        .iter()
        .filter(|r| r.mode == mode)
        .map(|r| LatentVideo {
            frames: r.video.mapv(crate::binio::quantize),
            y_pc: r.plausible,
            y_sem: true,
            source_id: 0,
            prompt_id: r.prompt,
            seed: r.trace.base_seed.wrapping_add(r.winner as u64),
            quality_score: 0.0,
        })
        .collect();
    encode_dataset(&videos, frames, width)
}

fn select(cfg: &ExperimentConfig, layout: &Layout) -> Result<Manifest> {
    let mut run = StageRun::new(layout);
    run.input(&layout.denoiser())?;
    run.input(&layout.selection_verifier())?;
    let model = load_denoiser(&layout.denoiser())?;
    let verifier = load_verifier(&layout.selection_verifier())?;
    let schedule = cfg.diffusion.schedule()?;
    let sel = &cfg.selection;
    let mut sch = sel.schedule.clone();
    sch.layer = verifier.layer;
    sch.validate(Some(&verifier.timesteps))?;

    let bank = RenderBank::new(&cfg.world);
    let judge = PlausibilityJudge::new(&cfg.world);
    let steps = cfg.diffusion.sampler_steps;
    let ddim;
    let replay;
    let backend: &dyn Backend = match sel.backend {
        BackendKind::Ddim => {
            ddim = DdimBackend::new(&model, &schedule, &judge, steps)?;
            &ddim
        }
        BackendKind::Replay => {
            replay = ReplayBackend::new(&model, &schedule, &cfg.world, &bank, sel.replay_plausible_rate, steps)?;
            &replay
        }
    };
    let registry = Registry::default();
    let ctx = BuildContext {
        schedule: &sch,
        verifier: Some(&verifier),
        best_of_n_timestep: sel.best_of_n_timestep,
        score_seed: sel.score_seed,
    };
    let modes = sel.modes.iter().map(|m| registry.mode(m, &ctx)).collect::<Result<Vec<_>>>()?;
    let prompts: Vec<u32> = (sel.first_prompt..sel.first_prompt + sel.prompts).collect();
    let eval = evaluate(backend, &modes, &prompts, cfg.seed, sch.n)?;

    let fire = sch.checkpoint_steps(backend.step_map())?;
    let after: Vec<usize> = fire.iter().map(|s| s + 1).collect();
    let summary = SelectionSummary {
        backend: eval.backend.clone(),
        best_layer: verifier.layer,
        checkpoint_steps: fire,
        trajectory_plausible_rate: eval.trajectory_plausible_rate,
        modes: eval.summaries.clone(),
        exact_cost: exact_cost(steps, &after, sch.n, sch.keep_ratio)?,
        expected_cost: expected_cost(steps, sch.n, sch.checkpoints.len(), sch.keep_ratio),
    };
    run.json("selection/summary.json", &summary)?;
    run.json("selection/evaluation.json", &eval)?;
    run.bytes("selection/costs.csv", report::cost_table_csv(&eval).as_bytes())?;
    run.bytes("selection/prompt_costs.csv", report::prompt_costs_csv(&eval).as_bytes())?;
    for m in &sel.modes {
        let bytes = winners_file(&eval, m, cfg.world.frames, cfg.world.latent_width)?;
        run.bytes(&format!("selection/videos_{m}.npd"), &bytes)?;
        let traces = eval.traces(m);
        if traces.iter().any(|t| !t.checkpoints.is_empty()) {
            let rep = score_distribution_report(&traces, sel.histogram_bins)?;
            run.bytes(&format!("selection/scores_{m}.csv"), rep.checkpoints_csv().as_bytes())?;
            run.bytes(&format!("selection/spread_{m}.csv"), rep.spread_histogram_csv().as_bytes())?;
        }
    }
    run.finish(cfg, Stage::Select)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub probe: ProbeSummary,
    pub layer_selection: LayerSelection,
    pub verifier_validation_auc: f64,
    pub selection: SelectionSummary,
}

fn report_stage(cfg: &ExperimentConfig, layout: &Layout) -> Result<Manifest> {
    let mut run = StageRun::new(layout);
    let paths = [
        "probe/grid.json",
        "probe/cross_source.json",
        "probe/summary.json",
        "verifier/layer_selection.json",
        "verifier/reports.json",
        "selection/summary.json",
        "selection/evaluation.json",
    ];
    for p in paths {
        run.input(&layout.path(p))?;
    }
    let grid: ProbeGrid = read_json(&layout.path("probe/grid.json"))?;
    let cross: CrossSourceMatrix = read_json(&layout.path("probe/cross_source.json"))?;
    let probe: ProbeSummary = read_json(&layout.path("probe/summary.json"))?;
    let layer_selection: LayerSelection = read_json(&layout.path("verifier/layer_selection.json"))?;
    let reports: Vec<VerifierReport> = read_json(&layout.path("verifier/reports.json"))?;
    let selection: SelectionSummary = read_json(&layout.path("selection/summary.json"))?;
    let eval: Evaluation = read_json(&layout.path("selection/evaluation.json"))?;

    run.bytes("report/probe_table.csv", report::probe_table_csv(&grid).as_bytes())?;
    run.bytes("report/cross_source.csv", report::cross_source_csv(&cross).as_bytes())?;
    run.bytes("report/selection_cost.csv", report::cost_table_csv(&eval).as_bytes())?;
    let mut verifier_csv = String::from("layer,best_epoch,epochs_run,best_validation_auc\n");
    for r in &reports {
        verifier_csv.push_str(&format!(
            "{},{},{},{:.6}\n",
            r.layer, r.best_epoch, r.epochs_run, r.best_validation_auc
        ));
    }
    run.bytes("report/verifier_layers.csv", verifier_csv.as_bytes())?;
    let guided = eval.traces("guided");
    let scores = if guided.iter().any(|t| !t.checkpoints.is_empty()) {
        Some(score_distribution_report(&guided, cfg.selection.histogram_bins)?)
    } else {
        None
    };
    if let Some(s) = &scores {
        run.bytes("report/score_distribution.csv", s.checkpoints_csv().as_bytes())?;
        run.bytes("report/score_spread.csv", s.spread_histogram_csv().as_bytes())?;
    }
    if cfg.report.svg {
        run.bytes("report/probe_heatmap.svg", report::probe_heatmap_svg(&grid).as_bytes())?;
        if let Some(s) = &scores {
            run.bytes("report/score_spread.svg", report::spread_histogram_svg(s).as_bytes())?;
        }
    }
    let verifier_validation_auc = reports
        .iter()
        .find(|r| r.layer == layer_selection.best_layer)
        .map(|r| r.best_validation_auc)
        .unwrap_or(f64::NAN);
    let summary = RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        probe,
        layer_selection,
        verifier_validation_auc,
        selection,
    };
    run.json("report/summary.json", &summary)?;
    run.finish(cfg, Stage::Report)
}

/// Loads the final report of a finished run.
pub fn load_report(layout: &Layout) -> Result<RunReport> {
    read_json(&layout.path("report/summary.json"))
}

//! Physics verifier: input projection plus positional embeddings, one
//! pre-norm causal self-attention block with a residual connection, and two
//! sigmoid heads (plausibility and semantic match) on the normalised final
//! frame. Trained with a class-weighted BCE averaged over timesteps.

use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::features::{FeatureCache, FeatureRecord};
use crate::nn::{gather_rows, gelu, gelu_backward, scatter_rows, sigmoid, AdamW, Attention, LayerNorm, Linear, OneCycle, ParamSet};
use crate::probing::auc_roc;
use crate::rng::{rng_for, tag};

pub const VERIFIER_MAGIC: &[u8; 8] = b"NPVF0001";
pub const HEAD_HIDDEN: usize = 128;
/// Distance from 0 and 1 at which scores are clamped inside the loss.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierShape {
    pub input_dim: usize,
    pub frames: usize,
    pub width: usize,
    pub heads: usize,
}

impl VerifierShape {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.frames == 0 || self.width == 0 {
            return Err(Error::Config("verifier: dimensions must be positive".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config("verifier: width must divide into heads".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (dd, f, d) = (self.input_dim, self.frames, self.width);
        (dd + 1) * d + f * d + 2 * d + 4 * d * d + 4 * d + 2 * d + 2 * ((d + 1) * HEAD_HIDDEN + HEAD_HIDDEN + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Head {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.fc1.tensors(&format!("{prefix}.fc1"), out);
        self.fc2.tensors(&format!("{prefix}.fc2"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.fc1.tensors_mut(&format!("{prefix}.fc1"), out);
        self.fc2.tensors_mut(&format!("{prefix}.fc2"), out);
    }

    fn zeros(d: usize) -> Self {
        Self {
            fc1: Linear::zeros(d, HEAD_HIDDEN),
            fc2: Linear::zeros(HEAD_HIDDEN, 1),
        }
    }

    /// Returns logits and the pre-activation of the hidden layer.
    fn forward(&self, x: &Array2<f64>) -> (Vec<f64>, Array2<f64>, Array2<f64>) {
        let pre = self.fc1.forward(x);
        let act = gelu(&pre);
        let logit = self.fc2.forward(&act);
        (logit.column(0).to_vec(), pre, act)
    }

    fn backward(&self, x: &Array2<f64>, pre: &Array2<f64>, act: &Array2<f64>, dlogit: &[f64], grad: &mut Head) -> Array2<f64> {
        let dl = Array2::from_shape_vec((dlogit.len(), 1), dlogit.to_vec()).expect("column");
        let dact = self.fc2.backward(act, &dl, &mut grad.fc2);
        let dpre = gelu_backward(pre, &dact);
        self.fc1.backward(x, &dpre, &mut grad.fc1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifierParams {
    pub shape: VerifierShape,
    pub proj: Linear,
    /// `F x d` learnable positional embeddings.
    pub pos: Array2<f64>,
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    /// Shared by both heads.
    pub ln_final: LayerNorm,
    pub pc: Head,
    pub sem: Head,
}

impl ParamSet for VerifierParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut v = Vec::new();
        self.proj.tensors("proj", &mut v);
        v.push(("pos".into(), self.pos.as_slice().unwrap()));
        self.ln_attn.tensors("ln_attn", &mut v);
        self.attn.tensors("attn", &mut v);
        self.ln_final.tensors("ln_final", &mut v);
        self.pc.tensors("pc", &mut v);
        self.sem.tensors("sem", &mut v);
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = Vec::new();
        self.proj.tensors_mut("proj", &mut v);
        v.push(("pos".into(), self.pos.as_slice_mut().unwrap()));
        self.ln_attn.tensors_mut("ln_attn", &mut v);
        self.attn.tensors_mut("attn", &mut v);
        self.ln_final.tensors_mut("ln_final", &mut v);
        self.pc.tensors_mut("pc", &mut v);
        self.sem.tensors_mut("sem", &mut v);
        v
    }
}

/// Plausibility and semantic scores of one feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub s_pc: f64,
    pub s_sem: f64,
    pub t: usize,
    pub layer: usize,
}

pub struct VerifierForward {
    pub s_pc: Vec<f64>,
    pub s_sem: Vec<f64>,
    /// Per-frame summaries after the attention residual, `[batch * F, d]`.
    pub summaries: Array2<f64>,
}

struct ForwardCache {
    x: Array2<f64>,
    ln_attn: crate::nn::LayerNormCache,
    attn: crate::nn::AttentionCache,
    ln_final: crate::nn::LayerNormCache,
    last_norm: Array2<f64>,
    pc: (Array2<f64>, Array2<f64>),
    sem: (Array2<f64>, Array2<f64>),
}

impl VerifierParams {
    pub fn init(shape: VerifierShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = rng_for(&[tag::INIT, seed, 0x5646]);
        let d = shape.width;
        let pos_dist = rand_distr::Normal::new(0.0, 0.02).unwrap();
        let pos = Array2::from_shape_simple_fn((shape.frames, d), || rand_distr::Distribution::sample(&pos_dist, &mut rng));
        Ok(Self {
            shape,
            proj: Linear::init(shape.input_dim, d, &mut rng),
            pos,
            ln_attn: LayerNorm::new(d),
            attn: Attention::init(d, shape.heads, true, &mut rng),
            ln_final: LayerNorm::new(d),
            pc: Head {
                fc1: Linear::init(d, HEAD_HIDDEN, &mut rng),
                fc2: Linear::init(HEAD_HIDDEN, 1, &mut rng),
            },
            sem: Head {
                fc1: Linear::init(d, HEAD_HIDDEN, &mut rng),
                fc2: Linear::init(HEAD_HIDDEN, 1, &mut rng),
            },
        })
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.shape.width;
        Self {
            shape: self.shape,
            proj: Linear::zeros(self.shape.input_dim, d),
            pos: Array2::zeros((self.shape.frames, d)),
            ln_attn: LayerNorm::zeros(d),
            attn: self.attn.zeros_like(),
            ln_final: LayerNorm::zeros(d),
            pc: Head::zeros(d),
            sem: Head::zeros(d),
        }
    }

    fn check(&self, features: &[&Array2<f64>]) -> Result<()> {
        let want = (self.shape.frames, self.shape.input_dim);
        for f in features {
            if f.dim() != want {
                return Err(Error::ShapeMismatch {
                    expected: format!("{want:?}"),
                    actual: format!("{:?}", f.dim()),
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("verifier input".into()));
            }
        }
        if features.is_empty() {
            return Err(Error::InvalidArgument("empty verifier batch".into()));
        }
        Ok(())
    }

    fn run(&self, features: &[&Array2<f64>]) -> (VerifierForward, Vec<f64>, Vec<f64>, ForwardCache) {
        let (f, dd) = (self.shape.frames, self.shape.input_dim);
        let b = features.len();
        let mut x = Array2::zeros((b * f, dd));
        for (i, m) in features.iter().enumerate() {
            x.slice_mut(s![i * f..(i + 1) * f, ..]).assign(m);
        }
        let mut h = self.proj.forward(&x);
        for i in 0..b {
            let mut blk = h.slice_mut(s![i * f..(i + 1) * f, ..]);
            blk += &self.pos;
        }
        let (hn, ln_attn) = self.ln_attn.forward(&h);
        let (a, attn) = self.attn.forward(&hn, f);
        let y = h + a;
        let last = gather_rows(&y, f - 1, f);
        let (last_norm, ln_final) = self.ln_final.forward(&last);
        let (lpc, pre_pc, act_pc) = self.pc.forward(&last_norm);
        let (lsem, pre_sem, act_sem) = self.sem.forward(&last_norm);
        let out = VerifierForward {
            s_pc: lpc.iter().map(|&z| sigmoid(z)).collect(),
            s_sem: lsem.iter().map(|&z| sigmoid(z)).collect(),
            summaries: y,
        };
        let cache = ForwardCache {
            x,
            ln_attn,
            attn,
            ln_final,
            last_norm,
            pc: (pre_pc, act_pc),
            sem: (pre_sem, act_sem),
        };
        (out, lpc, lsem, cache)
    }

    /// Scores and per-frame summaries for a batch of `F x D` feature matrices.
    pub fn forward(&self, features: &[&Array2<f64>]) -> Result<VerifierForward> {
        self.check(features)?;
        Ok(self.run(features).0)
    }

    fn backward(&self, cache: &ForwardCache, dpc: &[f64], dsem: &[f64]) -> VerifierParams {
        let f = self.shape.frames;
        let b = dpc.len();
        let mut g = self.zeros_like();
        let mut dnorm = self.pc.backward(&cache.last_norm, &cache.pc.0, &cache.pc.1, dpc, &mut g.pc);
        dnorm += &self.sem.backward(&cache.last_norm, &cache.sem.0, &cache.sem.1, dsem, &mut g.sem);
        let dlast = self.ln_final.backward(&cache.ln_final, &dnorm, &mut g.ln_final);
        let dy = scatter_rows(&dlast, b * f, f - 1, f);
        let dhn = self.attn.backward(&cache.attn, &dy, &mut g.attn);
        let dh = dy + self.ln_attn.backward(&cache.ln_attn, &dhn, &mut g.ln_attn);
        for i in 0..b {
            g.pos += &dh.slice(s![i * f..(i + 1) * f, ..]);
        }
        self.proj.backward(&cache.x, &dh, &mut g.proj);
        g
    }
}

/// Class-weighted binary cross-entropy of one prediction; the flag reports
/// whether `s` had to be clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn wbce_loss(y: bool, s: f64, pos_weight: f64) -> (f64, bool) {
    let c = s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let clamped = c != s || s.is_nan();
    let c = if s.is_nan() { 0.5 } else { c };
    let loss = if y { -pos_weight * c.ln() } else { -(1.0 - c).ln() };
    (loss, clamped)
}

/// `n_neg / n_pos`.
pub fn pos_weight(labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|v| **v).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateLabels("pos_weight needs both classes".into()));
    }
    Ok((labels.len() - pos) as f64 / pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pc: f64,
    pub lambda_sem: f64,
    pub pos_weight_pc: f64,
    pub pos_weight_sem: f64,
}

/// One training example: features at a single `(t, layer)`.
#[derive(Debug, Clone, Copy)]
pub struct VerifierItem<'a> {
    pub features: &'a Array2<f64>,
    pub t: usize,
    pub y_pc: bool,
    pub y_sem: bool,
}

impl<'a> From<&'a FeatureRecord> for VerifierItem<'a> {
    fn from(r: &'a FeatureRecord) -> Self {
        Self {
            features: &r.features,
            t: r.t,
            y_pc: r.y_pc,
            y_sem: r.y_sem,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub clamped: usize,
}

/// Per-item weights `1 / (|T| n_t)` that turn a sum into the mean over
/// timesteps of per-timestep batch means.
fn item_weights(batch: &[VerifierItem]) -> Vec<f64> {
    let mut ts: Vec<usize> = batch.iter().map(|b| b.t).collect();
    ts.sort_unstable();
    ts.dedup();
    let counts: Vec<usize> = ts.iter().map(|t| batch.iter().filter(|b| b.t == *t).count()).collect();
    batch
        .iter()
        .map(|b| {
            let i = ts.binary_search(&b.t).unwrap();
            1.0 / (ts.len() * counts[i]) as f64
        })
        .collect()
}

/// Loss value and its gradient with respect to every parameter.
pub fn loss_and_grad(params: &VerifierParams, batch: &[VerifierItem], w: &LossWeights) -> Result<(f64, VerifierParams, LossDiagnostics)> {
    let feats: Vec<&Array2<f64>> = batch.iter().map(|b| b.features).collect();
    params.check(&feats)?;
    let (out, _, _, cache) = params.run(&feats);
    let iw = item_weights(batch);
    let mut diag = LossDiagnostics::default();
    let mut loss = 0.0;
    let mut dpc = vec![0.0; batch.len()];
    let mut dsem = vec![0.0; batch.len()];
    for (i, item) in batch.iter().enumerate() {
        let (lp, cp) = wbce_loss(item.y_pc, out.s_pc[i], w.pos_weight_pc);
        let (ls, cs) = wbce_loss(item.y_sem, out.s_sem[i], w.pos_weight_sem);
        diag.clamped += cp as usize + cs as usize;
        loss += iw[i] * (w.lambda_pc * lp + w.lambda_sem * ls);
        let wy = |y: bool, pw: f64| if y { pw } else { 1.0 };
        // d/dz WBCE(sigmoid(z)) = w_y (s - y); zero where the clamp is active.
        if !cp {
            dpc[i] = iw[i] * w.lambda_pc * wy(item.y_pc, w.pos_weight_pc) * (out.s_pc[i] - item.y_pc as u8 as f64);
        }
        if !cs {
            dsem[i] = iw[i] * w.lambda_sem * wy(item.y_sem, w.pos_weight_sem) * (out.s_sem[i] - item.y_sem as u8 as f64);
        }
    }
    let grad = params.backward(&cache, &dpc, &dsem);
    if let Some(name) = grad.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok((loss, grad, diag))
}

pub fn total_loss(params: &VerifierParams, batch: &[VerifierItem], w: &LossWeights) -> Result<f64> {
    let feats: Vec<&Array2<f64>> = batch.iter().map(|b| b.features).collect();
    params.check(&feats)?;
    let out = params.run(&feats).0;
    let iw = item_weights(batch);
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, item)| {
            iw[i]
                * (w.lambda_pc * wbce_loss(item.y_pc, out.s_pc[i], w.pos_weight_pc).0
                    + w.lambda_sem * wbce_loss(item.y_sem, out.s_sem[i], w.pos_weight_sem).0)
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierTrainConfig {
    pub width: usize,
    pub heads: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub lambda_pc: f64,
    pub lambda_sem: f64,
    /// Training timesteps; selection checkpoints must be among them.
    pub timesteps: Vec<usize>,
    pub validation_fraction: f64,
    pub split_seed: u64,
    pub seed: u64,
}

impl Default for VerifierTrainConfig {
    fn default() -> Self {
        Self {
            width: 256,
            heads: 4,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            warmup_fraction: 0.1,
            patience: 20,
            max_epochs: 500,
            lambda_pc: 1.0,
            lambda_sem: 1.0,
            timesteps: vec![200, 400, 600],
            validation_fraction: 0.15,
            split_seed: 42,
            seed: 0,
        }
    }
}

impl VerifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.warmup_fraction > 0.0
            && self.warmup_fraction < 1.0
            && self.lambda_pc >= 0.0
            && self.lambda_sem >= 0.0
            && !self.timesteps.is_empty()
            && self.validation_fraction > 0.0
            && self.validation_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("verifier training: invalid hyper-parameters".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub layer: usize,
    pub timesteps: Vec<usize>,
    pub train_videos: usize,
    pub validation_videos: usize,
    pub pos_weight_pc: f64,
    pub pos_weight_sem: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    /// Mean over timesteps of the plausibility-head AUC, per epoch.
    pub validation_auc: Vec<f64>,
    pub best_validation_auc: f64,
    /// `(t, AUC)` of the returned parameters.
    pub validation_auc_per_t: Vec<(usize, f64)>,
    pub clamped_predictions: usize,
    pub parameter_checksum: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verifier {
    pub params: VerifierParams,
    pub layer: usize,
    pub timesteps: Vec<usize>,
}

impl Verifier {
    pub fn score(&self, features: &Array2<f64>, t: usize) -> Result<Score> {
        let out = self.params.forward(&[features])?;
        Ok(Score {
            s_pc: out.s_pc[0],
            s_sem: out.s_sem[0],
            t,
            layer: self.layer,
        })
    }
}

/// Video-level split: `(train ids, validation ids)`, both sorted.
pub fn split_videos(ids: &[u32], validation_fraction: f64, seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut order = ids.to_vec();
    order.sort_unstable();
    order.dedup();
    order.shuffle(&mut rng_for(&[tag::SPLIT, seed]));
    let n_val = ((order.len() as f64 * validation_fraction).round() as usize).clamp(1, order.len().saturating_sub(1).max(1));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn auc_per_t(params: &VerifierParams, items: &[VerifierItem], timesteps: &[usize]) -> Result<Vec<(usize, f64)>> {
    timesteps
        .iter()
        .map(|&t| {
            let sub: Vec<&VerifierItem> = items.iter().filter(|i| i.t == t).collect();
            let mut scores = Vec::with_capacity(sub.len());
            for chunk in sub.chunks(128) {
                let f: Vec<&Array2<f64>> = chunk.iter().map(|i| i.features).collect();
                scores.extend(params.forward(&f)?.s_pc);
            }
            let y: Vec<bool> = sub.iter().map(|i| i.y_pc).collect();
            Ok((t, auc_roc(&scores, &y)?))
        })
        .collect()
}

/// Trains one verifier on the cache records at `layer` for every configured
/// timestep, keeping the records accepted by `keep`. Returns the parameters
/// of the best validation epoch.
pub fn train_verifier(
    cache: &FeatureCache,
    layer: usize,
    keep: &(dyn Fn(&FeatureRecord) -> bool + Sync),
    cfg: &VerifierTrainConfig,
) -> Result<(Verifier, VerifierReport)> {
    cfg.validate()?;
    let mut records: Vec<&FeatureRecord> = Vec::new();
    for &t in &cfg.timesteps {
        records.extend(cache.at(t, layer)?.into_iter().filter(|r| keep(r)));
    }
    if records.is_empty() {
        return Err(Error::InsufficientSamples("no cache records for the verifier".into()));
    }
    let ids: Vec<u32> = records.iter().map(|r| r.video_id).collect();
    let (train_ids, val_ids) = split_videos(&ids, cfg.validation_fraction, cfg.split_seed);
    let train: Vec<VerifierItem> = records
        .iter()
        .filter(|r| train_ids.binary_search(&r.video_id).is_ok())
        .map(|r| VerifierItem::from(*r))
        .collect();
    let val: Vec<VerifierItem> = records
        .iter()
        .filter(|r| val_ids.binary_search(&r.video_id).is_ok())
        .map(|r| VerifierItem::from(*r))
        .collect();
    let ytr: Vec<bool> = train.iter().map(|i| i.y_pc).collect();
    let ysem: Vec<bool> = train.iter().map(|i| i.y_sem).collect();
    let weights = LossWeights {
        lambda_pc: cfg.lambda_pc,
        lambda_sem: cfg.lambda_sem,
        pos_weight_pc: pos_weight(&ytr)?,
        pos_weight_sem: pos_weight(&ysem).unwrap_or(1.0),
    };
    let yv: Vec<bool> = val.iter().map(|i| i.y_pc).collect();
    pos_weight(&yv).map_err(|_| Error::DegenerateLabels("validation split has a single class".into()))?;

    let shape = VerifierShape {
        input_dim: cache.width,
        frames: cache.frames,
        width: cfg.width,
        heads: cfg.heads,
    };
    let mut params = VerifierParams::init(shape, cfg.seed)?;
    let mut flat = params.to_flat();
    let mut opt = AdamW::new(flat.len(), cfg.weight_decay);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let sched = OneCycle {
        max_lr: cfg.learning_rate,
        total_steps: per_epoch * cfg.max_epochs,
        warmup_fraction: cfg.warmup_fraction,
    };
    let mut best = params.clone();
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut wait = 0;
    let mut train_loss = Vec::new();
    let mut val_auc = Vec::new();
    let mut clamped = 0;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng_for(&[tag::TRAIN, cfg.seed, epoch as u64]));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<VerifierItem> = chunk.iter().map(|&i| train[i]).collect();
            let (loss, grad, diag) = loss_and_grad(&params, &batch, &weights).map_err(|e| match e {
                Error::NonFinite(d) => Error::Diverged { step, detail: d },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("verifier loss {loss}"),
                });
            }
            clamped += diag.clamped;
            sum += loss * batch.len() as f64;
            opt.step(&mut flat, &grad.to_flat(), sched.lr(step));
            params.load_flat(&flat);
            step += 1;
        }
        train_loss.push(sum / train.len() as f64);
        let per_t = auc_per_t(&params, &val, &cfg.timesteps)?;
        let auc = per_t.iter().map(|(_, a)| a).sum::<f64>() / per_t.len() as f64;
        val_auc.push(auc);
        log::debug!(
            "verifier layer {layer} epoch {epoch} loss {:.4} val auc {auc:.4}",
            sum / train.len() as f64
        );
        if auc > best_auc {
            best_auc = auc;
            best = params.clone();
            best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
            if wait > cfg.patience {
                break;
            }
        }
    }
    best.quantize();
    let per_t = auc_per_t(&best, &val, &cfg.timesteps)?;
    let report = VerifierReport {
        layer,
        timesteps: cfg.timesteps.clone(),
        train_videos: train_ids.len(),
        validation_videos: val_ids.len(),
        pos_weight_pc: weights.pos_weight_pc,
        pos_weight_sem: weights.pos_weight_sem,
        epochs_run: val_auc.len(),
        best_epoch,
        train_loss,
        best_validation_auc: per_t.iter().map(|(_, a)| a).sum::<f64>() / per_t.len() as f64,
        validation_auc: val_auc,
        validation_auc_per_t: per_t,
        clamped_predictions: clamped,
        parameter_checksum: best.checksum(),
    };
    Ok((
        Verifier {
            params: best,
            layer,
            timesteps: cfg.timesteps.clone(),
        },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub best_layer: usize,
    /// `(layer, best validation AUC)` in ascending layer order.
    pub validation_auc: Vec<(usize, f64)>,
}

/// Trains one verifier per candidate layer and keeps the best by validation
/// AUC; ties go to the shallower layer.
pub fn select_best_layer(
    cache: &FeatureCache,
    layers: &[usize],
    keep: &(dyn Fn(&FeatureRecord) -> bool + Sync),
    cfg: &VerifierTrainConfig,
) -> Result<(LayerSelection, Verifier, Vec<VerifierReport>)> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no candidate layers".into()));
    }
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let runs: Vec<Result<(Verifier, VerifierReport)>> = sorted.par_iter().map(|&l| train_verifier(cache, l, keep, cfg)).collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, (_, r)) in runs.iter().enumerate() {
        if r.best_validation_auc > runs[best].1.best_validation_auc {
            best = i;
        }
    }
    let selection = LayerSelection {
        best_layer: sorted[best],
        validation_auc: runs.iter().map(|(_, r)| (r.layer, r.best_validation_auc)).collect(),
    };
    let (verifiers, reports): (Vec<Verifier>, Vec<VerifierReport>) = runs.into_iter().unzip();
    Ok((selection, verifiers.into_iter().nth(best).unwrap(), reports))
}

pub fn encode_verifier(v: &Verifier) -> Vec<u8> {
    let sh = &v.params.shape;
    let mut w = Writer::new();
    w.bytes(VERIFIER_MAGIC);
    for x in [sh.input_dim, sh.frames, sh.width, sh.heads, v.layer, v.timesteps.len()] {
        w.u32(x as u32);
    }
    for &t in &v.timesteps {
        w.u32(t as u32);
    }
    w.f32s(v.params.to_flat());
    w.seal()
}

pub fn decode_verifier(bytes: &[u8], path: &Path) -> Result<Verifier> {
    let mut r = Reader::sealed(bytes, path)?;
    r.magic(VERIFIER_MAGIC)?;
    let mut h = [0usize; 6];
    for v in h.iter_mut() {
        *v = r.u32()? as usize;
    }
    let shape = VerifierShape {
        input_dim: h[0],
        frames: h[1],
        width: h[2],
        heads: h[3],
    };
    shape.validate().map_err(|e| r.err(e.to_string()))?;
    if h[5] > 1 << 16 {
        return Err(r.err("implausible timestep count"));
    }
    let timesteps = (0..h[5]).map(|_| r.u32().map(|t| t as usize)).collect::<Result<Vec<_>>>()?;
    let mut params = VerifierParams::init(shape, 0)?;
    let flat = r.f32s(shape.param_count())?;
    r.finish()?;
    params.load_flat(&flat);
    Ok(Verifier {
        params,
        layer: h[4],
        timesteps,
    })
}

pub fn save_verifier(path: &Path, v: &Verifier) -> Result<()> {
    binio::write_atomic(path, &encode_verifier(v))
}

pub fn load_verifier(path: &Path) -> Result<Verifier> {
    decode_verifier(&binio::read_file(path)?, path)
}

/// Per-frame summary rows of one item.
pub fn frame_summaries(out: &VerifierForward, item: usize, frames: usize) -> Array2<f64> {
    out.summaries.slice(s![item * frames..(item + 1) * frames, ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifierShape {
        VerifierShape {
            input_dim: 6,
            frames: 4,
            width: 8,
            heads: 2,
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for sh in [
            small(),
            VerifierShape {
                input_dim: 64,
                frames: 13,
                width: 256,
                heads: 4,
            },
        ] {
            let p = VerifierParams::init(sh, 1).unwrap();
            assert_eq!(p.num_params(), sh.param_count());
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn wbce_spot_values() {
        assert!((wbce_loss(true, 0.5, 2.0).0 - 1.386294).abs() < 1e-6);
        assert!((wbce_loss(false, 0.5, 7.0).0 - 0.693147).abs() < 1e-6);
        let (l, c) = wbce_loss(true, 0.0, 1.0);
        assert!(c && l.is_finite());
        assert!(!wbce_loss(true, 0.3, 1.0).1);
    }

    #[test]
    fn zero_heads_give_half() {
        let mut p = VerifierParams::init(small(), 3).unwrap();
        for h in [&mut p.pc, &mut p.sem] {
            h.fc2.w.fill(0.0);
            h.fc2.b.fill(0.0);
        }
        let x = Array2::from_shape_fn((4, 6), |(i, j)| (i * 6 + j) as f64 * 0.1);
        let out = p.forward(&[&x]).unwrap();
        assert_eq!(out.s_pc[0], 0.5);
        assert_eq!(out.s_sem[0], 0.5);
    }

    #[test]
    fn shape_and_finiteness_are_checked() {
        let p = VerifierParams::init(small(), 3).unwrap();
        assert!(p.forward(&[&Array2::zeros((3, 6))]).is_err());
        let mut x = Array2::zeros((4, 6));
        x[[0, 0]] = f64::NAN;
        assert!(matches!(p.forward(&[&x]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn checkpoint_round_trips() {
        let mut params = VerifierParams::init(small(), 5).unwrap();
        params.quantize();
        let v = Verifier {
            params,
            layer: 6,
            timesteps: vec![200, 400, 600],
        };
        let bytes = encode_verifier(&v);
        assert_eq!(decode_verifier(&bytes, Path::new("v")).unwrap(), v);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(decode_verifier(&bad, Path::new("v")).is_err());
    }
}

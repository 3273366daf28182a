//! Variance-preserving forward noising, a small pre-norm transformer
//! denoiser with block-output capture, and a deterministic DDIM sampler.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::{self, AdamW, Attention, AttentionCache, LayerNorm, LayerNormCache, Linear, OneCycle, ParamSet};
use crate::rng::{rng_for, tag};
use crate::worldgen::{self, LatentVideo, FAMILIES};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NPDN0001";

/// Width of [`ConditioningVector`].
pub const COND_WIDTH: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Config("diffusion: need at least 2 timesteps".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config("diffusion: betas must satisfy 0 < start <= end < 1".into()));
        }
        let beta: Vec<f64> = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, max: self.timesteps() })
    }

    /// Sampler step `i` runs the model at timestep `(steps - 1 - i) * T / steps`.
    pub fn step_map(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.timesteps();
        if steps == 0 || steps > t {
            return Err(Error::InvalidArgument(format!("sampler steps {steps} not in [1, {t}]")));
        }
        let stride = t / steps;
        Ok((0..steps).map(|i| (steps - 1 - i) * stride).collect())
    }
}

/// Standard normal noise determined entirely by `seed`.
pub fn seeded_noise(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = rng_for(&[tag::NOISE, seed]);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
}

/// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn forward_noise(schedule: &NoiseSchedule, z0: &Array2<f64>, t: usize, noise_seed: u64) -> Result<Array2<f64>> {
    let ab = schedule.alpha_bar(t)?;
    let eps = seeded_noise(noise_seed, z0.nrows(), z0.ncols());
    Ok(z0 * ab.sqrt() + &eps * (1.0 - ab).sqrt())
}

/// Fixed-width description of a prompt: scene family one-hot, the family's
/// nominal initial state and restitution, and a phase code of the prompt id.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningVector(pub Array1<f64>);

impl ConditioningVector {
    pub fn from_prompt(prompt_id: u32) -> Self {
        let fam_idx = worldgen::family_of(prompt_id);
        let fam = &FAMILIES[fam_idx];
        let mut v = Array1::zeros(COND_WIDTH);
        v[fam_idx] = 1.0;
        let n = FAMILIES.len();
        v[n] = fam.position[0];
        v[n + 1] = fam.position[1];
        v[n + 2] = fam.velocity[0] / 0.25;
        v[n + 3] = fam.velocity[1] / 0.25;
        v[n + 4] = fam.restitution;
        let phase = prompt_id as f64 * 0.618_033_988_749_895;
        v[n + 5] = (std::f64::consts::TAU * phase).sin();
        v[n + 6] = (std::f64::consts::TAU * phase).cos();
        v[n + 7] = 1.0;
        Self(v)
    }
}

/// Forward-pass counters per kind, plus unpersisted wall time per phase.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CostLedger {
    pub denoising_passes: u64,
    pub scoring_passes: u64,
    pub extraction_passes: u64,
    #[serde(skip)]
    pub wall_seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassKind {
    Denoise,
    Score,
    Extract,
}

impl PartialEq for CostLedger {
    fn eq(&self, o: &Self) -> bool {
        (self.denoising_passes, self.scoring_passes, self.extraction_passes) == (o.denoising_passes, o.scoring_passes, o.extraction_passes)
    }
}

impl CostLedger {
    pub fn record(&mut self, kind: PassKind, passes: u64) {
        match kind {
            PassKind::Denoise => self.denoising_passes += passes,
            PassKind::Score => self.scoring_passes += passes,
            PassKind::Extract => self.extraction_passes += passes,
        }
    }

    pub fn total(&self) -> u64 {
        self.denoising_passes + self.scoring_passes + self.extraction_passes
    }

    pub fn add_time(&mut self, phase: &str, since: Instant) {
        *self.wall_seconds.entry(phase.to_string()).or_default() += since.elapsed().as_secs_f64();
    }

    pub fn merge(&mut self, other: &CostLedger) {
        self.denoising_passes += other.denoising_passes;
        self.scoring_passes += other.scoring_passes;
        self.extraction_passes += other.extraction_passes;
        for (k, v) in &other.wall_seconds {
            *self.wall_seconds.entry(k.clone()).or_default() += v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserShape {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub frames: usize,
    pub latent_width: usize,
    pub timesteps: usize,
}

impl Default for DenoiserShape {
    fn default() -> Self {
        Self {
            layers: 12,
            width: 64,
            heads: 4,
            frames: 13,
            latent_width: 32,
            timesteps: 1000,
        }
    }
}

impl DenoiserShape {
    pub fn seq(&self) -> usize {
        self.frames + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.frames == 0 || self.latent_width == 0 {
            return Err(Error::Config("denoiser: layers, frames and latent width must be positive".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) || !self.width.is_multiple_of(2) {
            return Err(Error::Config("denoiser: width must be even and divisible by heads".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

struct BlockCache {
    c1: LayerNormCache,
    ac: AttentionCache,
    c2: LayerNormCache,
    m_in: Array2<f64>,
    h: Array2<f64>,
    g: Array2<f64>,
}

impl Block {
    fn init(width: usize, heads: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let mut attn = Attention::init(width, heads, false, rng);
        let mut fc2 = Linear::init(4 * width, width, rng);
        let k = 1.0 / (2.0 * layers as f64).sqrt();
        attn.o.w *= k;
        fc2.w *= k;
        Self {
            ln1: LayerNorm::new(width),
            attn,
            ln2: LayerNorm::new(width),
            fc1: Linear::init(width, 4 * width, rng),
            fc2,
        }
    }

    fn zeros_like(&self) -> Self {
        let w = self.ln1.gamma.len();
        Self {
            ln1: LayerNorm::zeros(w),
            attn: self.attn.zeros_like(),
            ln2: LayerNorm::zeros(w),
            fc1: Linear::zeros(w, 4 * w),
            fc2: Linear::zeros(4 * w, w),
        }
    }

    fn forward(&self, x: &Array2<f64>, seq: usize) -> (Array2<f64>, BlockCache) {
        let (a_in, c1) = self.ln1.forward(x);
        let (a_out, ac) = self.attn.forward(&a_in, seq);
        let x1 = x + &a_out;
        let (m_in, c2) = self.ln2.forward(&x1);
        let h = self.fc1.forward(&m_in);
        let g = nn::gelu(&h);
        let x2 = &x1 + &self.fc2.forward(&g);
        (x2, BlockCache { c1, ac, c2, m_in, h, g })
    }

    fn backward(&self, c: &BlockCache, dx2: &Array2<f64>, grad: &mut Block) -> Array2<f64> {
        let dg = self.fc2.backward(&c.g, dx2, &mut grad.fc2);
        let dh = nn::gelu_backward(&c.h, &dg);
        let dm = self.fc1.backward(&c.m_in, &dh, &mut grad.fc1);
        let dx1 = dx2 + &self.ln2.backward(&c.c2, &dm, &mut grad.ln2);
        let da = self.attn.backward(&c.ac, &dx1, &mut grad.attn);
        &dx1 + &self.ln1.backward(&c.c1, &da, &mut grad.ln1)
    }

    fn tensors<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.ln1.tensors(&format!("{p}.ln1"), out);
        self.attn.tensors(&format!("{p}.attn"), out);
        self.ln2.tensors(&format!("{p}.ln2"), out);
        self.fc1.tensors(&format!("{p}.fc1"), out);
        self.fc2.tensors(&format!("{p}.fc2"), out);
    }

    fn tensors_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.ln1.tensors_mut(&format!("{p}.ln1"), out);
        self.attn.tensors_mut(&format!("{p}.attn"), out);
        self.ln2.tensors_mut(&format!("{p}.ln2"), out);
        self.fc1.tensors_mut(&format!("{p}.fc1"), out);
        self.fc2.tensors_mut(&format!("{p}.fc2"), out);
    }
}

/// Learnable tensors of the denoiser, in checkpoint order: frame embedding,
/// conditioning embedding, token positions, blocks, final norm, noise head.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub embed: Linear,
    pub cond: Linear,
    /// `(F + 1) x D`; row 0 is the conditioning token.
    pub pos: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl ParamSet for DenoiserParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut v = Vec::new();
        self.embed.tensors("embed", &mut v);
        self.cond.tensors("cond", &mut v);
        v.push(("pos".into(), self.pos.as_slice().unwrap()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.tensors(&format!("block{i}"), &mut v);
        }
        self.ln_f.tensors("ln_f", &mut v);
        self.head.tensors("head", &mut v);
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = Vec::new();
        self.embed.tensors_mut("embed", &mut v);
        self.cond.tensors_mut("cond", &mut v);
        v.push(("pos".into(), self.pos.as_slice_mut().unwrap()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.tensors_mut(&format!("block{i}"), &mut v);
        }
        self.ln_f.tensors_mut("ln_f", &mut v);
        self.head.tensors_mut("head", &mut v);
        v
    }
}

impl DenoiserParams {
    fn zeros_like(&self) -> Self {
        Self {
            embed: Linear::zeros(self.embed.input_dim(), self.embed.output_dim()),
            cond: Linear::zeros(self.cond.input_dim(), self.cond.output_dim()),
            pos: Array2::zeros(self.pos.dim()),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            ln_f: LayerNorm::zeros(self.ln_f.gamma.len()),
            head: Linear::zeros(self.head.input_dim(), self.head.output_dim()),
        }
    }
}

/// One sample for a (batched) denoiser call.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub z: &'a Array2<f64>,
    pub t: usize,
    pub cond: &'a ConditioningVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    /// `F x P` predicted noise.
    pub noise: Array2<f64>,
    /// Block outputs after the residual, `(F + 1) x D`, keyed by layer.
    pub captures: BTreeMap<usize, Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub shape: DenoiserShape,
    params: DenoiserParams,
    frozen: bool,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    cf: LayerNormCache,
    frame_hidden: Array2<f64>,
}

/// Sinusoidal embedding of `t`, width `d` (even).
pub fn timestep_embedding(t: usize, d: usize) -> Array1<f64> {
    let half = d / 2;
    let mut e = Array1::zeros(d);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        e[k] = a.sin();
        e[half + k] = a.cos();
    }
    e
}

impl Denoiser {
    pub fn init(shape: DenoiserShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = rng_for(&[tag::INIT, seed]);
        let d = shape.width;
        let pos_n = Normal::new(0.0, 0.1).unwrap();
        let params = DenoiserParams {
            embed: Linear::init(shape.latent_width, d, &mut rng),
            cond: Linear::init(COND_WIDTH, d, &mut rng),
            pos: Array2::from_shape_simple_fn((shape.seq(), d), || pos_n.sample(&mut rng)),
            blocks: (0..shape.layers)
                .map(|_| Block::init(d, shape.heads, shape.layers, &mut rng))
                .collect(),
            ln_f: LayerNorm::new(d),
            head: Linear::zeros(d, shape.latent_width),
        };
        let mut m = Self {
            shape,
            params,
            frozen: false,
        };
        m.params.quantize();
        Ok(m)
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    /// Mutable parameters; refused once the model is frozen.
    pub fn params_mut(&mut self) -> Result<&mut DenoiserParams> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn checksum(&self) -> u32 {
        self.params.checksum()
    }

    fn check_input(&self, inp: &DenoiserInput) -> Result<()> {
        let sh = &self.shape;
        if inp.z.dim() != (sh.frames, sh.latent_width) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", sh.frames, sh.latent_width),
                actual: format!("{:?}", inp.z.dim()),
            });
        }
        if inp.t >= sh.timesteps {
            return Err(Error::TimestepOutOfRange {
                t: inp.t,
                max: sh.timesteps,
            });
        }
        if inp.cond.0.len() != COND_WIDTH {
            return Err(Error::ShapeMismatch {
                expected: format!("{COND_WIDTH}"),
                actual: format!("{}", inp.cond.0.len()),
            });
        }
        Ok(())
    }

    fn embed(&self, batch: &[DenoiserInput]) -> Array2<f64> {
        let sh = &self.shape;
        let (seq, d) = (sh.seq(), sh.width);
        let mut zs = Array2::zeros((batch.len() * sh.frames, sh.latent_width));
        let mut cs = Array2::zeros((batch.len(), COND_WIDTH));
        for (b, inp) in batch.iter().enumerate() {
            zs.slice_mut(s![b * sh.frames..(b + 1) * sh.frames, ..]).assign(inp.z);
            cs.row_mut(b).assign(&inp.cond.0);
        }
        let ez = self.params.embed.forward(&zs);
        let ec = self.params.cond.forward(&cs);
        let mut x = Array2::zeros((batch.len() * seq, d));
        for (b, inp) in batch.iter().enumerate() {
            let temb = timestep_embedding(inp.t, d);
            let mut blk = x.slice_mut(s![b * seq..(b + 1) * seq, ..]);
            blk.row_mut(0).assign(&ec.row(b));
            blk.slice_mut(s![1.., ..])
                .assign(&ez.slice(s![b * sh.frames..(b + 1) * sh.frames, ..]));
            blk += &self.params.pos;
            blk += &temb;
        }
        x
    }

    fn run(&self, batch: &[DenoiserInput], capture: &[usize], keep_cache: bool) -> (Vec<DenoiserOutput>, Option<ForwardCache>) {
        let sh = &self.shape;
        let seq = sh.seq();
        let mut x = self.embed(batch);
        let mut caches = Vec::new();
        let mut captured: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
        for (l, blk) in self.params.blocks.iter().enumerate() {
            let (y, c) = blk.forward(&x, seq);
            if keep_cache {
                caches.push(c);
            }
            if capture.contains(&l) {
                captured.insert(l, y.clone());
            }
            x = y;
        }
        let frame_hidden = x.select(
            Axis(0),
            &(0..batch.len())
                .flat_map(|b| (1..seq).map(move |f| b * seq + f))
                .collect::<Vec<_>>(),
        );
        let (hn, cf) = self.params.ln_f.forward(&frame_hidden);
        let noise = self.params.head.forward(&hn);
        let outputs = (0..batch.len())
            .map(|b| DenoiserOutput {
                noise: noise.slice(s![b * sh.frames..(b + 1) * sh.frames, ..]).to_owned(),
                captures: captured
                    .iter()
                    .map(|(l, h)| (*l, h.slice(s![b * seq..(b + 1) * seq, ..]).to_owned()))
                    .collect(),
            })
            .collect();
        let cache = keep_cache.then_some(ForwardCache {
            blocks: caches,
            cf,
            frame_hidden,
        });
        (outputs, cache)
    }

    /// Batched forward pass; records one pass of `kind` per sample.
    pub fn forward_batch(
        &self,
        batch: &[DenoiserInput],
        capture: &[usize],
        kind: PassKind,
        ledger: &mut CostLedger,
    ) -> Result<Vec<DenoiserOutput>> {
        for &l in capture {
            if l >= self.shape.layers {
                return Err(Error::LayerOutOfRange {
                    layer: l,
                    depth: self.shape.layers,
                });
            }
        }
        for inp in batch {
            self.check_input(inp)?;
        }
        ledger.record(kind, batch.len() as u64);
        Ok(self.run(batch, capture, false).0)
    }

    pub fn forward(
        &self,
        z_t: &Array2<f64>,
        t: usize,
        cond: &ConditioningVector,
        capture: &[usize],
        kind: PassKind,
        ledger: &mut CostLedger,
    ) -> Result<DenoiserOutput> {
        let inp = DenoiserInput { z: z_t, t, cond };
        Ok(self.forward_batch(&[inp], capture, kind, ledger)?.remove(0))
    }

    /// Mean squared noise-prediction error and its gradient.
    fn loss_and_grad(&self, batch: &[DenoiserInput], target: &[Array2<f64>]) -> (f64, DenoiserParams) {
        let sh = &self.shape;
        let seq = sh.seq();
        let (outs, cache) = self.run(batch, &[], true);
        let cache = cache.expect("cache requested");
        let count = (batch.len() * sh.frames * sh.latent_width) as f64;
        let mut dnoise = Array2::zeros((batch.len() * sh.frames, sh.latent_width));
        let mut loss = 0.0;
        for (b, (o, tgt)) in outs.iter().zip(target).enumerate() {
            let diff = &o.noise - tgt;
            loss += diff.iter().map(|v| v * v).sum::<f64>();
            dnoise
                .slice_mut(s![b * sh.frames..(b + 1) * sh.frames, ..])
                .assign(&(diff * (2.0 / count)));
        }
        loss /= count;
        let mut g = self.params.zeros_like();
        let (hn, _) = self.params.ln_f.forward(&cache.frame_hidden);
        let dhn = self.params.head.backward(&hn, &dnoise, &mut g.head);
        let dframe = self.params.ln_f.backward(&cache.cf, &dhn, &mut g.ln_f);
        let mut dx = Array2::zeros((batch.len() * seq, sh.width));
        for b in 0..batch.len() {
            dx.slice_mut(s![b * seq + 1..(b + 1) * seq, ..])
                .assign(&dframe.slice(s![b * sh.frames..(b + 1) * sh.frames, ..]));
        }
        for (blk, (bc, gb)) in self.params.blocks.iter().zip(cache.blocks.iter().zip(g.blocks.iter_mut())).rev() {
            dx = blk.backward(bc, &dx, gb);
        }
        // Embedding gradients.
        let mut zs = Array2::zeros((batch.len() * sh.frames, sh.latent_width));
        let mut dz = Array2::zeros((batch.len() * sh.frames, sh.width));
        let mut cs = Array2::zeros((batch.len(), COND_WIDTH));
        let mut dc = Array2::zeros((batch.len(), sh.width));
        for (b, inp) in batch.iter().enumerate() {
            zs.slice_mut(s![b * sh.frames..(b + 1) * sh.frames, ..]).assign(inp.z);
            cs.row_mut(b).assign(&inp.cond.0);
            let blk = dx.slice(s![b * seq..(b + 1) * seq, ..]);
            g.pos += &blk;
            dc.row_mut(b).assign(&blk.row(0));
            dz.slice_mut(s![b * sh.frames..(b + 1) * sh.frames, ..])
                .assign(&blk.slice(s![1.., ..]));
        }
        self.params.embed.backward(&zs, &dz, &mut g.embed);
        self.params.cond.backward(&cs, &dc, &mut g.cond);
        (loss, g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            grad_clip: 1.0,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserReport {
    pub initial_validation_mse: f64,
    pub validation_mse: f64,
    /// MSE of predicting zero noise on the same validation draws.
    pub zero_predictor_mse: f64,
    /// `(step, mean training loss since the previous entry)`.
    pub train_curve: Vec<(usize, f64)>,
    pub parameter_checksum: u32,
}

struct NoisedSample {
    z: Array2<f64>,
    eps: Array2<f64>,
    t: usize,
    cond: ConditioningVector,
}

fn noised_sample(schedule: &NoiseSchedule, v: &LatentVideo, t: usize, rng: &mut impl Rng) -> NoisedSample {
    let (f, p) = v.frames.dim();
    let eps = Array2::from_shape_simple_fn((f, p), || StandardNormal.sample(rng));
    let ab = schedule.alpha_bar[t];
    NoisedSample {
        z: &v.frames * ab.sqrt() + &eps * (1.0 - ab).sqrt(),
        eps,
        t,
        cond: ConditioningVector::from_prompt(v.prompt_id),
    }
}

/// Mean noise-prediction MSE on held-out draws.
pub fn validation_mse(model: &Denoiser, samples: &[(Array2<f64>, Array2<f64>, usize, ConditioningVector)]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for chunk in samples.chunks(64) {
        let inputs: Vec<_> = chunk.iter().map(|(z, _, t, c)| DenoiserInput { z, t: *t, cond: c }).collect();
        let outs = model.run(&inputs, &[], false).0;
        for (o, (_, eps, _, _)) in outs.iter().zip(chunk) {
            total += (&o.noise - eps).iter().map(|v| v * v).sum::<f64>();
            count += eps.len() as f64;
        }
    }
    total / count
}

/// Trains with uniformly sampled timesteps, then freezes the model.
pub fn train_denoiser(
    dataset: &[LatentVideo],
    shape: DenoiserShape,
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
) -> Result<(Denoiser, DenoiserReport)> {
    if dataset.is_empty() {
        return Err(Error::InsufficientSamples("empty training set".into()));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::Config("denoiser training: invalid batch size or validation fraction".into()));
    }
    let mut model = Denoiser::init(shape, cfg.seed)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng_for(&[tag::SPLIT, cfg.seed]));
    let n_val = ((dataset.len() as f64 * cfg.validation_fraction).round() as usize).min(dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut vrng = rng_for(&[tag::VALID, cfg.seed]);
    let val: Vec<_> = val_idx
        .iter()
        .flat_map(|&i| {
            (0..4)
                .map(|_| {
                    let t = vrng.random_range(0..schedule.timesteps());
                    let s = noised_sample(schedule, &dataset[i], t, &mut vrng);
                    (s.z, s.eps, s.t, s.cond)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let zero_mse = if val.is_empty() {
        1.0
    } else {
        val.iter().map(|(_, e, _, _)| e.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            / val.iter().map(|(_, e, _, _)| e.len() as f64).sum::<f64>()
    };
    let initial = if val.is_empty() { f64::NAN } else { validation_mse(&model, &val) };
    let n = model.params.num_params();
    let mut opt = AdamW::new(n, cfg.weight_decay);
    let sched = OneCycle {
        max_lr: cfg.learning_rate,
        total_steps: cfg.steps,
        warmup_fraction: cfg.warmup_fraction,
    };
    let mut rng = rng_for(&[tag::TRAIN, cfg.seed]);
    let mut curve = Vec::new();
    let mut running = 0.0;
    let mut running_n = 0usize;
    let mut flat = model.params.to_flat();
    for step in 0..cfg.steps {
        let samples: Vec<NoisedSample> = (0..cfg.batch_size)
            .map(|_| {
                let i = train_idx[rng.random_range(0..train_idx.len())];
                let t = rng.random_range(0..schedule.timesteps());
                noised_sample(schedule, &dataset[i], t, &mut rng)
            })
            .collect();
        let inputs: Vec<_> = samples
            .iter()
            .map(|s| DenoiserInput {
                z: &s.z,
                t: s.t,
                cond: &s.cond,
            })
            .collect();
        let targets: Vec<_> = samples.iter().map(|s| s.eps.clone()).collect();
        let (loss, grad) = model.loss_and_grad(&inputs, &targets);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("denoiser loss {loss}"),
            });
        }
        if let Some(name) = grad.first_non_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("non-finite gradient in {name}"),
            });
        }
        let mut g = grad.to_flat();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let k = cfg.grad_clip / norm;
            g.iter_mut().for_each(|v| *v *= k);
        }
        opt.step(&mut flat, &g, sched.lr(step));
        model.params_mut()?.load_flat(&flat);
        running += loss;
        running_n += 1;
        if (step + 1) % 50 == 0 || step + 1 == cfg.steps {
            curve.push((step + 1, running / running_n as f64));
            log::debug!("denoiser step {} loss {:.4}", step + 1, running / running_n as f64);
            running = 0.0;
            running_n = 0;
        }
    }
    model.params_mut()?.quantize();
    model.freeze();
    let validation = if val.is_empty() { f64::NAN } else { validation_mse(&model, &val) };
    let report = DenoiserReport {
        initial_validation_mse: initial,
        validation_mse: validation,
        zero_predictor_mse: zero_mse,
        train_curve: curve,
        parameter_checksum: model.checksum(),
    };
    Ok((model, report))
}

/// An untrained model with the given seed, frozen; used as a control.
pub fn random_denoiser(shape: DenoiserShape, seed: u64) -> Result<Denoiser> {
    let mut m = Denoiser::init(shape, seed)?;
    m.freeze();
    Ok(m)
}

pub fn encode_denoiser(model: &Denoiser) -> Vec<u8> {
    let sh = &model.shape;
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    for v in [sh.layers, sh.width, sh.heads, sh.frames, sh.latent_width, sh.timesteps] {
        w.u32(v as u32);
    }
    w.f32s(model.params.to_flat());
    w.seal()
}

/// Loads a checkpoint; the returned model is frozen.
pub fn decode_denoiser(bytes: &[u8], path: &Path) -> Result<Denoiser> {
    let mut r = Reader::sealed(bytes, path)?;
    r.magic(CHECKPOINT_MAGIC)?;
    let mut h = [0usize; 6];
    for v in h.iter_mut() {
        *v = r.u32()? as usize;
    }
    let shape = DenoiserShape {
        layers: h[0],
        width: h[1],
        heads: h[2],
        frames: h[3],
        latent_width: h[4],
        timesteps: h[5],
    };
    shape.validate().map_err(|e| r.err(e.to_string()))?;
    let mut m = Denoiser::init(shape, 0)?;
    let n = m.params.num_params();
    let flat = r.f32s(n)?;
    r.finish()?;
    m.params.load_flat(&flat);
    m.freeze();
    Ok(m)
}

pub fn save_denoiser(path: &Path, model: &Denoiser) -> Result<()> {
    binio::write_atomic(path, &encode_denoiser(model))
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    decode_denoiser(&binio::read_file(path)?, path)
}

/// The deterministic (eta = 0) DDIM update given a noise estimate.
pub fn ddim_update(z_t: &Array2<f64>, eps: &Array2<f64>, ab_t: f64, ab_next: f64) -> Array2<f64> {
    let x0 = (z_t - &(eps * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
    x0 * ab_next.sqrt() + eps * (1.0 - ab_next).max(0.0).sqrt()
}

/// One DDIM step from `t` to `t_next` (`None` means the clean endpoint,
/// `alpha_bar = 1`). Records one denoising pass.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    z_t: &Array2<f64>,
    t: usize,
    t_next: Option<usize>,
    cond: &ConditioningVector,
    ledger: &mut CostLedger,
) -> Result<Array2<f64>> {
    if let Some(tn) = t_next {
        if tn >= t {
            return Err(Error::ScheduleViolation { current: t, next: tn });
        }
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_next = match t_next {
        Some(tn) => schedule.alpha_bar(tn)?,
        None => 1.0,
    };
    let out = model.forward(z_t, t, cond, &[], PassKind::Denoise, ledger)?;
    Ok(ddim_update(z_t, &out.noise, ab_t, ab_next))
}

/// Initial latent for a sampling trajectory with the given seed.
pub fn initial_latent(seed: u64, frames: usize, width: usize) -> Array2<f64> {
    let mut rng = rng_for(&[tag::TRAJ, seed]);
    Array2::from_shape_simple_fn((frames, width), || StandardNormal.sample(&mut rng))
}

/// Full deterministic sampling run.
pub fn sample(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    cond: &ConditioningVector,
    seed: u64,
    steps: usize,
    ledger: &mut CostLedger,
) -> Result<Array2<f64>> {
    let map = schedule.step_map(steps)?;
    let mut z = initial_latent(seed, model.shape.frames, model.shape.latent_width);
    for i in 0..map.len() {
        z = ddim_step(model, schedule, &z, map[i], map.get(i + 1).copied(), cond, ledger)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape() -> DenoiserShape {
        DenoiserShape {
            layers: 3,
            width: 16,
            heads: 2,
            frames: 5,
            latent_width: 6,
            timesteps: 1000,
        }
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = schedule();
        assert!(s.beta.iter().all(|b| *b > 0.0 && *b < 1.0));
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[0] >= 0.99 && s.alpha_bar[999] <= 0.01);
        let m = s.step_map(50).unwrap();
        assert_eq!(m[0], 980);
        assert_eq!(m[19], 600);
        assert_eq!(m[29], 400);
        assert_eq!(m[49], 0);
        assert!(m.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn forward_noise_boundaries_and_moments() {
        let s = schedule();
        let z0 = seeded_noise(77, 13, 32);
        let z = forward_noise(&s, &z0, 0, 1).unwrap();
        let rel = (&z - &z0).mapv(|v| v * v).sum().sqrt() / z0.mapv(|v| v * v).sum().sqrt();
        assert!(rel <= 0.15, "{rel}");
        assert!(forward_noise(&s, &z0, 1000, 1).is_err());

        let zero = Array2::zeros((100, 100));
        let zt = forward_noise(&s, &zero, 999, 5).unwrap();
        let n = zt.len() as f64;
        let mean = zt.sum() / n;
        let var = zt.mapv(|v| (v - mean).powi(2)).sum() / n;
        // With z0 = 0 the sample is sqrt(1 - ab) * eps.
        assert!(mean.abs() <= 3.0 / n.sqrt());
        assert!((0.9..=1.1).contains(&var));

        let t = 400;
        let ab = s.alpha_bar[t];
        let norm0 = z0.mapv(|v| v * v).sum();
        let mc = (0..1000u64)
            .map(|seed| forward_noise(&s, &z0, t, seed).unwrap().mapv(|v| v * v).sum())
            .sum::<f64>()
            / 1000.0;
        let closed = ab * norm0 + (1.0 - ab) * z0.len() as f64;
        assert!((mc - closed).abs() / closed <= 0.05);
    }

    #[test]
    fn capture_is_observation_only_and_deterministic() {
        let m = Denoiser::init(small_shape(), 3).unwrap();
        let z = seeded_noise(1, 5, 6);
        let c = ConditioningVector::from_prompt(7);
        let mut ledger = CostLedger::default();
        let a = m.forward(&z, 500, &c, &[], PassKind::Denoise, &mut ledger).unwrap();
        let b = m.forward(&z, 500, &c, &[0, 2], PassKind::Denoise, &mut ledger).unwrap();
        let b2 = m.forward(&z, 500, &c, &[0, 2], PassKind::Denoise, &mut ledger).unwrap();
        assert_eq!(a.noise, b.noise);
        assert_eq!(b, b2);
        assert_eq!(b.captures[&2].dim(), (6, 16));
        assert_eq!(ledger.denoising_passes, 3);
        assert!(matches!(
            m.forward(&z, 500, &c, &[3], PassKind::Denoise, &mut ledger),
            Err(Error::LayerOutOfRange { .. })
        ));
    }

    #[test]
    fn batched_forward_matches_single() {
        let m = Denoiser::init(small_shape(), 4).unwrap();
        let zs: Vec<_> = (0..3).map(|i| seeded_noise(i, 5, 6)).collect();
        let cs: Vec<_> = (0..3).map(ConditioningVector::from_prompt).collect();
        let inputs: Vec<_> = (0..3)
            .map(|i| DenoiserInput {
                z: &zs[i],
                t: 100 * i + 5,
                cond: &cs[i],
            })
            .collect();
        let mut l = CostLedger::default();
        let batched = m.forward_batch(&inputs, &[1], PassKind::Extract, &mut l).unwrap();
        for (i, o) in batched.iter().enumerate() {
            let single = m.forward(&zs[i], 100 * i + 5, &cs[i], &[1], PassKind::Extract, &mut l).unwrap();
            let diff = (&single.noise - &o.noise).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
            assert!(diff < 1e-12);
        }
        assert_eq!(l.extraction_passes, 6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = Denoiser::init(small_shape(), 5).unwrap();
        // A nonzero head so every tensor receives gradient.
        let mut rng = rng_for(&[1]);
        m.params.head = Linear::init(16, 6, &mut rng);
        let zs: Vec<_> = (0..2).map(|i| seeded_noise(i + 10, 5, 6)).collect();
        let eps: Vec<_> = (0..2).map(|i| seeded_noise(i + 20, 5, 6)).collect();
        let cs: Vec<_> = (0..2).map(ConditioningVector::from_prompt).collect();
        let inputs: Vec<_> = (0..2)
            .map(|i| DenoiserInput {
                z: &zs[i],
                t: 300 + i,
                cond: &cs[i],
            })
            .collect();
        let (_, g) = m.loss_and_grad(&inputs, &eps);
        let analytic = g.to_flat();
        let base = m.params.to_flat();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[idx] += h;
            m.params.load_flat(&p);
            let lp = m.loss_and_grad(&inputs, &eps).0;
            p[idx] -= 2.0 * h;
            m.params.load_flat(&p);
            let lm = m.loss_and_grad(&inputs, &eps).0;
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[idx];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn frozen_model_refuses_updates_and_round_trips() {
        let mut m = Denoiser::init(small_shape(), 6).unwrap();
        m.freeze();
        assert!(matches!(m.params_mut(), Err(Error::Frozen)));
        let bytes = encode_denoiser(&m);
        let back = decode_denoiser(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(decode_denoiser(&bad, Path::new("mem")), Err(Error::Checksum { .. })));
    }

    #[test]
    fn oracle_ddim_step_recovers_clean_latent() {
        let s = schedule();
        let z0 = seeded_noise(3, 5, 6);
        for t in [10, 400, 999] {
            let eps = seeded_noise(99, 5, 6);
            let ab = s.alpha_bar[t];
            let zt = &z0 * ab.sqrt() + &eps * (1.0 - ab).sqrt();
            let rec = ddim_update(&zt, &eps, ab, 1.0);
            let err = (&rec - &z0).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
            assert!(err < 1e-9, "t={t} err={err}");
        }
    }

    #[test]
    fn ddim_rejects_non_decreasing_steps_and_is_deterministic() {
        let s = schedule();
        let m = Denoiser::init(small_shape(), 8).unwrap();
        let c = ConditioningVector::from_prompt(1);
        let z = seeded_noise(1, 5, 6);
        let mut l = CostLedger::default();
        assert!(matches!(
            ddim_step(&m, &s, &z, 400, Some(400), &c, &mut l),
            Err(Error::ScheduleViolation { .. })
        ));
        let a = sample(&m, &s, &c, 42, 10, &mut l).unwrap();
        let b = sample(&m, &s, &c, 42, 10, &mut l).unwrap();
        assert_eq!(a, b);
        assert_eq!(l.denoising_passes, 20);
    }

    #[test]
    fn untrained_model_predicts_zero_noise() {
        let s = schedule();
        let shape = small_shape();
        let m = Denoiser::init(shape, 2).unwrap();
        let mut rng = rng_for(&[5]);
        let video = LatentVideo {
            frames: seeded_noise(4, 5, 6),
            y_pc: true,
            y_sem: true,
            source_id: 0,
            prompt_id: 0,
            seed: 0,
            quality_score: 0.5,
        };
        let val: Vec<_> = (0..20)
            .map(|_| {
                let t = rng.random_range(0..1000);
                let n = noised_sample(&s, &video, t, &mut rng);
                (n.z, n.eps, n.t, n.cond)
            })
            .collect();
        let mse = validation_mse(&m, &val);
        assert!((mse - 1.0).abs() < 0.15, "{mse}");
    }
}

//! Linear probes: L2 logistic regression on standardized features, rank AUC,
//! stratified k-fold evaluation, the layer x timestep grid with a noised
//! latent baseline, cross-source transfer, covariate residualization and a
//! source-clustering score.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::features::{flatten_for_probe, latent_baseline_features, noise_seed, FeatureCache, FeatureRecord};
use crate::rng::{rng_for, tag};
use crate::worldgen::LatentVideo;

/// Gradient-norm target of the logistic solver.
pub const GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let var = (x - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let scale = var.mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
        Self { mean, scale }
    }

    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Array1<f64>,
    pub bias: f64,
    pub scaler: Standardizer,
    pub newton_iterations: usize,
    pub grad_norm: f64,
}

impl LogisticModel {
    /// Decision values `w . standardize(x) + b`.
    pub fn decision(&self, x: &Array2<f64>) -> Array1<f64> {
        self.scaler.transform(x).dot(&self.weights) + self.bias
    }
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Problem<'a> {
    x: &'a Array2<f64>,
    y: Array1<f64>,
    l2: f64,
}

impl Problem<'_> {
    fn objective(&self, w: &Array1<f64>, b: f64) -> f64 {
        let z = self.x.dot(w) + b;
        let data: f64 = z.iter().zip(self.y.iter()).map(|(z, y)| log1p_exp(*z) - y * z).sum();
        data + 0.5 * self.l2 * w.dot(w)
    }

    /// Gradient and Hessian diagonal weights `p (1 - p)`.
    fn gradient(&self, w: &Array1<f64>, b: f64) -> (Array1<f64>, f64, Array1<f64>) {
        let z = self.x.dot(w) + b;
        let p = z.mapv(crate::nn::sigmoid);
        let r = &p - &self.y;
        let gw = self.x.t().dot(&r) + w * self.l2;
        let gb = r.sum();
        let d = p.mapv(|p| p * (1.0 - p));
        (gw, gb, d)
    }

    fn hess_vec(&self, d: &Array1<f64>, vw: &Array1<f64>, vb: f64) -> (Array1<f64>, f64) {
        let u = self.x.dot(vw) + vb;
        let r = d * &u;
        (self.x.t().dot(&r) + vw * self.l2, r.sum())
    }
}

fn norm2(w: &Array1<f64>, b: f64) -> f64 {
    (w.dot(w) + b * b).sqrt()
}

/// Minimises `l2/2 |w|^2 + sum logloss` on standardized features with a
/// preconditioned Newton-CG and Armijo backtracking, to gradient norm
/// `GRAD_TOL`. The intercept is not penalised.
pub fn fit_logistic(x: &Array2<f64>, y: &[bool], l2: f64) -> Result<LogisticModel> {
    let n = x.nrows();
    if n != y.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            actual: format!("{}", y.len()),
        });
    }
    if n < 2 {
        return Err(Error::InsufficientSamples(format!("{n} rows")));
    }
    let npos = y.iter().filter(|v| **v).count();
    if npos == 0 || npos == n {
        return Err(Error::DegenerateLabels("single-class input".into()));
    }
    if !(l2 > 0.0) {
        return Err(Error::InvalidArgument("l2 must be positive".into()));
    }
    let scaler = Standardizer::fit(x);
    let xs = scaler.transform(x);
    let prob = Problem {
        x: &xs,
        y: y.iter().map(|&v| v as u8 as f64).collect(),
        l2,
    };
    let d = xs.ncols();
    let mut w = Array1::zeros(d);
    let prior = npos as f64 / n as f64;
    let mut b = (prior / (1.0 - prior)).ln();
    let mut f = prob.objective(&w, b);
    let mut iters = 0;
    let mut gnorm = f64::INFINITY;
    let sq = xs.mapv(|v| v * v);
    for it in 0..200 {
        iters = it;
        let (gw, gb, dd) = prob.gradient(&w, b);
        gnorm = norm2(&gw, gb);
        if gnorm <= GRAD_TOL {
            break;
        }
        // Jacobi preconditioner.
        let pw = sq.t().dot(&dd) + l2;
        let pb = dd.sum().max(1e-12);
        // Preconditioned CG on H s = -g.
        let tol = gnorm.sqrt().min(0.5) * gnorm;
        let mut sw = Array1::zeros(d);
        let mut sb = 0.0;
        let mut rw = -&gw;
        let mut rb = -gb;
        let mut zw = &rw / &pw;
        let mut zb = rb / pb;
        let mut qw = zw.clone();
        let mut qb = zb;
        let mut rz = rw.dot(&zw) + rb * zb;
        for _ in 0..(2 * d + 20).min(1000) {
            let (hw, hb) = prob.hess_vec(&dd, &qw, qb);
            let qhq = qw.dot(&hw) + qb * hb;
            if qhq <= 0.0 {
                break;
            }
            let alpha = rz / qhq;
            sw.scaled_add(alpha, &qw);
            sb += alpha * qb;
            rw.scaled_add(-alpha, &hw);
            rb -= alpha * hb;
            if norm2(&rw, rb) <= tol {
                break;
            }
            zw = &rw / &pw;
            zb = rb / pb;
            let rz_new = rw.dot(&zw) + rb * zb;
            let beta = rz_new / rz;
            rz = rz_new;
            qw = &zw + &(&qw * beta);
            qb = zb + beta * qb;
        }
        let slope = gw.dot(&sw) + gb * sb;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let nw = &w + &(&sw * step);
            let nb = b + step * sb;
            let nf = prob.objective(&nw, nb);
            if nf <= f + 1e-4 * step * slope {
                w = nw;
                b = nb;
                f = nf;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if gnorm > GRAD_TOL {
        let (gw, gb, _) = prob.gradient(&w, b);
        gnorm = norm2(&gw, gb);
    }
    if !w.iter().all(|v| v.is_finite()) || !b.is_finite() {
        return Err(Error::NonFinite("logistic weights".into()));
    }
    Ok(LogisticModel {
        weights: w,
        bias: b,
        scaler,
        newton_iterations: iters,
        grad_norm: gnorm,
    })
}

/// Mann-Whitney AUC with midranks for ties.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", scores.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let npos = labels.iter().filter(|v| **v).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::DegenerateLabels("AUC undefined for a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied block i..=j shares the midrank.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (npos * (npos + 1)) as f64 / 2.0;
    Ok(u / (npos as f64 * nneg as f64))
}

/// Stratified fold id per sample; each class is shuffled and dealt
/// round-robin.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(&[tag::FOLDS, seed]);
    let mut folds = vec![0; labels.len()];
    let mut offset = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            folds[i] = (offset + j) % k;
        }
        offset = (offset + idx.len()) % k;
    }
    folds
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coordinate {
    Grid { t: usize, layer: usize },
    LatentBaseline { t: usize },
    Named { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub coordinate: Coordinate,
    pub mean_auc: f64,
    pub per_fold_auc: Vec<f64>,
    pub n_samples: usize,
}

fn select_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

pub fn kfold_auc(x: &Array2<f64>, y: &[bool], k: usize, seed: u64, l2: f64, coordinate: Coordinate) -> Result<ProbeResult> {
    let npos = y.iter().filter(|v| **v).count();
    let nneg = y.len() - npos;
    if k < 2 || npos < k || nneg < k {
        return Err(Error::InsufficientSamples(format!(
            "{k}-fold CV needs {k} samples per class, have {npos} positive and {nneg} negative"
        )));
    }
    let folds = stratified_folds(y, k, seed);
    let mut per_fold = Vec::with_capacity(k);
    for f in 0..k {
        let train: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == f).collect();
        let ytr: Vec<bool> = train.iter().map(|&i| y[i]).collect();
        let yte: Vec<bool> = test.iter().map(|&i| y[i]).collect();
        let model = fit_logistic(&select_rows(x, &train), &ytr, l2)?;
        let scores = model.decision(&select_rows(x, &test));
        per_fold.push(auc_roc(scores.as_slice().unwrap(), &yte)?);
    }
    Ok(ProbeResult {
        coordinate,
        mean_auc: per_fold.iter().sum::<f64>() / k as f64,
        per_fold_auc: per_fold,
        n_samples: y.len(),
    })
}

/// Flattened features and plausibility labels of a record set.
pub fn design_matrix(records: &[&FeatureRecord]) -> (Array2<f64>, Vec<bool>) {
    let d = records.first().map_or(0, |r| r.features.len());
    let mut x = Array2::zeros((records.len(), d));
    for (i, r) in records.iter().enumerate() {
        x.row_mut(i).assign(&flatten_for_probe(r));
    }
    (x, records.iter().map(|r| r.y_pc).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub folds: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            folds: 5,
            l2: 1.0,
            seed: 0,
        }
    }
}

/// Inputs for recomputing the noised-latent baseline with the cache's seeds.
#[derive(Clone, Copy)]
pub struct BaselineInputs<'a> {
    pub dataset: &'a [LatentVideo],
    pub schedule: &'a NoiseSchedule,
    pub dataset_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDelta {
    pub t: usize,
    pub layer: usize,
    pub auc: f64,
    pub baseline_auc: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub timesteps: Vec<usize>,
    pub layers: Vec<usize>,
    pub cells: Vec<ProbeResult>,
    pub baselines: Vec<ProbeResult>,
    pub deltas: Vec<GridDelta>,
}

impl ProbeGrid {
    pub fn cell(&self, t: usize, layer: usize) -> Option<&ProbeResult> {
        self.cells.iter().find(|c| c.coordinate == Coordinate::Grid { t, layer })
    }

    pub fn baseline(&self, t: usize) -> Option<&ProbeResult> {
        self.baselines.iter().find(|c| c.coordinate == Coordinate::LatentBaseline { t })
    }

    /// Largest delta over layers strictly between the first and last probed.
    pub fn best_mid_delta(&self, t: usize) -> Option<f64> {
        let inner = if self.layers.len() > 2 {
            &self.layers[1..self.layers.len() - 1]
        } else {
            &self.layers[..]
        };
        self.deltas
            .iter()
            .filter(|d| d.t == t && inner.contains(&d.layer))
            .map(|d| d.delta)
            .fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))))
    }
}

/// Records at `(t, layer)` passing `keep`, in video order.
pub fn select_records<'a>(
    cache: &'a FeatureCache,
    t: usize,
    layer: usize,
    keep: &dyn Fn(&FeatureRecord) -> bool,
) -> Result<Vec<&'a FeatureRecord>> {
    Ok(cache.at(t, layer)?.into_iter().filter(|r| keep(r)).collect())
}

pub fn baseline_matrix(inputs: BaselineInputs, video_ids: &[u32], t: usize) -> Result<(Array2<f64>, Vec<bool>)> {
    let first = inputs
        .dataset
        .first()
        .ok_or_else(|| Error::InsufficientSamples("empty dataset".into()))?;
    let mut x = Array2::zeros((video_ids.len(), first.frames.len()));
    let mut y = Vec::with_capacity(video_ids.len());
    for (i, &v) in video_ids.iter().enumerate() {
        let video = inputs
            .dataset
            .get(v as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("video {v} not in dataset")))?;
        x.row_mut(i).assign(&latent_baseline_features(
            inputs.schedule,
            video,
            t,
            noise_seed(inputs.dataset_seed, v, t),
        )?);
        y.push(video.y_pc);
    }
    Ok((x, y))
}

/// One result per grid cell and one latent baseline per timestep.
pub fn probe_grid(
    cache: &FeatureCache,
    baseline: BaselineInputs,
    timesteps: &[usize],
    layers: &[usize],
    keep: &(dyn Fn(&FeatureRecord) -> bool + Sync),
    settings: &ProbeSettings,
) -> Result<ProbeGrid> {
    for &t in timesteps {
        for &l in layers {
            if !cache.has_coord(t, l) {
                return Err(Error::MissingCoordinate(format!("t={t}, layer={l}")));
            }
        }
    }
    let cells: Vec<(usize, usize)> = timesteps.iter().flat_map(|&t| layers.iter().map(move |&l| (t, l))).collect();
    let cell_results: Vec<Result<ProbeResult>> = cells
        .par_iter()
        .map(|&(t, l)| {
            let recs = select_records(cache, t, l, keep)?;
            let (x, y) = design_matrix(&recs);
            kfold_auc(&x, &y, settings.folds, settings.seed, settings.l2, Coordinate::Grid { t, layer: l })
        })
        .collect();
    let base_results: Vec<Result<ProbeResult>> = timesteps
        .par_iter()
        .map(|&t| {
            let layer = *layers.first().ok_or_else(|| Error::InvalidArgument("no layers".into()))?;
            let ids: Vec<u32> = select_records(cache, t, layer, keep)?.iter().map(|r| r.video_id).collect();
            let (x, y) = baseline_matrix(baseline, &ids, t)?;
            kfold_auc(&x, &y, settings.folds, settings.seed, settings.l2, Coordinate::LatentBaseline { t })
        })
        .collect();
    let cells = cell_results.into_iter().collect::<Result<Vec<_>>>()?;
    let baselines = base_results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut deltas = Vec::new();
    for c in &cells {
        if let Coordinate::Grid { t, layer } = c.coordinate {
            let b = baselines
                .iter()
                .find(|b| b.coordinate == Coordinate::LatentBaseline { t })
                .expect("baseline per timestep");
            deltas.push(GridDelta {
                t,
                layer,
                auc: c.mean_auc,
                baseline_auc: b.mean_auc,
                delta: c.mean_auc - b.mean_auc,
            });
        }
    }
    Ok(ProbeGrid {
        timesteps: timesteps.to_vec(),
        layers: layers.to_vec(),
        cells,
        baselines,
        deltas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSourceMatrix {
    pub t: usize,
    pub layer: usize,
    pub sources: Vec<u16>,
    /// Row = training source, column = test source.
    pub auc: Vec<Vec<f64>>,
    pub diagonal_mean: f64,
    pub off_diagonal_mean: f64,
}

/// Diagonal: within-source k-fold CV. Off-diagonal: fit on all of source
/// `i`, evaluate on all of source `j`.
pub fn cross_source_eval(cache: &FeatureCache, t: usize, layer: usize, settings: &ProbeSettings) -> Result<CrossSourceMatrix> {
    let recs = cache.at(t, layer)?;
    let mut sources: Vec<u16> = recs.iter().map(|r| r.source_id).collect();
    sources.sort_unstable();
    sources.dedup();
    if sources.len() < 2 {
        return Err(Error::InsufficientSamples("cross-source evaluation needs two sources".into()));
    }
    let per_source: Vec<(Array2<f64>, Vec<bool>)> = sources
        .iter()
        .map(|&s| {
            let sub: Vec<&FeatureRecord> = recs.iter().copied().filter(|r| r.source_id == s).collect();
            design_matrix(&sub)
        })
        .collect();
    for ((_, y), s) in per_source.iter().zip(&sources) {
        let pos = y.iter().filter(|v| **v).count();
        if pos == 0 || pos == y.len() {
            return Err(Error::DegenerateLabels(format!("source {s} has a single class")));
        }
    }
    let rows: Vec<Result<Vec<f64>>> = (0..sources.len())
        .into_par_iter()
        .map(|i| {
            let (xi, yi) = &per_source[i];
            let model = fit_logistic(xi, yi, settings.l2)?;
            (0..sources.len())
                .map(|j| {
                    if i == j {
                        kfold_auc(xi, yi, settings.folds, settings.seed, settings.l2, Coordinate::Grid { t, layer }).map(|r| r.mean_auc)
                    } else {
                        let (xj, yj) = &per_source[j];
                        auc_roc(model.decision(xj).as_slice().unwrap(), yj)
                    }
                })
                .collect()
        })
        .collect();
    let auc = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let n = sources.len();
    let diag = (0..n).map(|i| auc[i][i]).sum::<f64>() / n as f64;
    let off = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| auc[i][j])
        .sum::<f64>()
        / (n * (n - 1)) as f64;
    Ok(CrossSourceMatrix {
        t,
        layer,
        sources,
        auc,
        diagonal_mean: diag,
        off_diagonal_mean: off,
    })
}

/// Removes, per column, the least-squares fit on `[1, covariate]`.
pub fn residualize(x: &Array2<f64>, covariate: &[f64]) -> Result<Array2<f64>> {
    let n = x.nrows();
    if covariate.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} covariate values"),
            actual: format!("{}", covariate.len()),
        });
    }
    let c = Array1::from(covariate.to_vec());
    let cm = c.sum() / n.max(1) as f64;
    let cc = c.mapv(|v| v - cm);
    let var = cc.dot(&cc);
    let xm = x.sum_axis(Axis(0)) / n.max(1) as f64;
    let mut out = x - &xm;
    if var > 1e-300 {
        let beta = out.t().dot(&cc) / var;
        for (mut row, ci) in out.rows_mut().into_iter().zip(cc.iter()) {
            row.scaled_add(-ci, &beta);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualizationReport {
    pub t: usize,
    pub layer: usize,
    pub raw_auc: f64,
    pub residualized_auc: f64,
    pub auc_drop: f64,
    pub covariate_auc: f64,
}

pub fn residualization_control(
    records: &[&FeatureRecord],
    t: usize,
    layer: usize,
    settings: &ProbeSettings,
) -> Result<ResidualizationReport> {
    let (x, y) = design_matrix(records);
    let q: Vec<f64> = records.iter().map(|r| r.quality_score).collect();
    let raw = kfold_auc(&x, &y, settings.folds, settings.seed, settings.l2, Coordinate::Grid { t, layer })?;
    let xr = residualize(&x, &q)?;
    let res = kfold_auc(&xr, &y, settings.folds, settings.seed, settings.l2, Coordinate::Grid { t, layer })?;
    let qx = Array2::from_shape_vec((q.len(), 1), q).expect("column");
    let cov = kfold_auc(
        &qx,
        &y,
        settings.folds,
        settings.seed,
        settings.l2,
        Coordinate::Named {
            name: "quality_covariate".into(),
        },
    )?;
    Ok(ResidualizationReport {
        t,
        layer,
        raw_auc: raw.mean_auc,
        residualized_auc: res.mean_auc,
        auc_drop: raw.mean_auc - res.mean_auc,
        covariate_auc: cov.mean_auc,
    })
}

/// Top principal components of row-centred `x` by power iteration with
/// deflation.
pub fn principal_components(x: &Array2<f64>, k: usize, seed: u64) -> Array2<f64> {
    let xc = x - &(x.sum_axis(Axis(0)) / x.nrows().max(1) as f64);
    let d = x.ncols();
    let mut rng = rng_for(&[tag::FOLDS, seed, 0x5043]);
    let mut comps: Vec<Array1<f64>> = Vec::new();
    for _ in 0..k.min(d) {
        let mut v = Array1::from_shape_fn(d, |_| rng.random::<f64>() - 0.5);
        for _ in 0..500 {
            let mut nv = xc.t().dot(&xc.dot(&v));
            for c in &comps {
                let p = nv.dot(c);
                nv.scaled_add(-p, c);
            }
            let norm = nv.dot(&nv).sqrt();
            if norm < 1e-300 {
                break;
            }
            nv /= norm;
            let change = (&nv - &v).mapv(f64::abs).sum();
            v = nv;
            if change < 1e-12 {
                break;
            }
        }
        comps.push(v);
    }
    let mut proj = Array2::zeros((x.nrows(), comps.len()));
    for (j, c) in comps.iter().enumerate() {
        proj.column_mut(j).assign(&xc.dot(c));
    }
    proj
}

/// Mean silhouette coefficient of `labels` in the given point coordinates.
pub fn silhouette(points: &Array2<f64>, labels: &[u16]) -> Result<f64> {
    let n = points.nrows();
    let mut groups: Vec<u16> = labels.to_vec();
    groups.sort_unstable();
    groups.dedup();
    if groups.len() < 2 {
        return Err(Error::InsufficientSamples("silhouette needs two clusters".into()));
    }
    let dist = |i: usize, j: usize| -> f64 {
        points
            .row(i)
            .iter()
            .zip(points.row(j).iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; groups.len()];
        let mut counts = vec![0usize; groups.len()];
        for j in 0..n {
            if i == j {
                continue;
            }
            let g = groups.binary_search(&labels[j]).unwrap();
            sums[g] += dist(i, j);
            counts[g] += 1;
        }
        let own = groups.binary_search(&labels[i]).unwrap();
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..groups.len())
            .filter(|&g| g != own && counts[g] > 0)
            .map(|g| sums[g] / counts[g] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Silhouette of source labels in the top-2 principal components.
pub fn source_cluster_score(x: &Array2<f64>, sources: &[u16]) -> Result<f64> {
    let spread = x.map_axis(Axis(0), |c| {
        let m = c.mean().unwrap_or(0.0);
        c.iter().map(|v| (v - m).abs()).fold(0.0f64, f64::max)
    });
    if spread.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidArgument("degenerate (all-identical) features".into()));
    }
    silhouette(&principal_components(x, 2, 0), sources)
}

pub fn cache_source_cluster_score(cache: &FeatureCache, t: usize, layer: usize) -> Result<f64> {
    let recs = cache.at(t, layer)?;
    let (x, _) = design_matrix(&recs);
    let s: Vec<u16> = recs.iter().map(|r| r.source_id).collect();
    source_cluster_score(&x, &s)
}

//! Dense layers with hand-written backward passes.
//!
//! Activations are row-major `Array2<f64>` of shape `[batch * seq, width]`.
//! Every `backward` accumulates into a gradient container of the same type
//! as the layer, so a model's gradient is simply another instance of the
//! model initialised to zero.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub const LN_EPS: f64 = 1e-5;

/// Uniform access to every learnable tensor of a model in a fixed order.
///
/// The order returned by `tensors` is the serialisation order of checkpoint
/// files and the coordinate order used by gradient checks.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, v: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = v);
        }
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, k: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// Name of the first tensor holding a non-finite value.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    /// Rounds every parameter through `f32`.
    fn quantize(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = crate::binio::quantize(*x));
        }
    }

    fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (_, t) in self.tensors() {
            for v in t {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Row-major copy if `a` is not already row-major; `dot` with transposed
/// operands may return column-major results.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    /// `U(-1/sqrt(in), 1/sqrt(in))` for weights and biases.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).unwrap();
        Self {
            w: Array2::from_shape_simple_fn((input, output), || dist.sample(rng)),
            b: Array1::from_shape_simple_fn(output, || dist.sample(rng)),
        }
    }

    /// Normal weights with the given standard deviation and zero bias.
    pub fn init_normal(input: usize, output: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).unwrap();
        Self {
            w: Array2::from_shape_simple_fn((input, output), || dist.sample(rng)),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = standard(x.dot(&self.w));
        y += &self.b;
        y
    }

    /// Forward without the bias term.
    pub fn forward_no_bias(&self, x: &Array2<f64>) -> Array2<f64> {
        standard(x.dot(&self.w))
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        standard(dy.dot(&self.w.t()))
    }

    pub fn backward_no_bias(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        standard(dy.dot(&self.w.t()))
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((format!("{prefix}.weight"), slice(&self.w)));
        out.push((format!("{prefix}.bias"), self.b.as_slice().unwrap()));
    }

    pub fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.weight"), slice_mut(&mut self.w)));
        out.push((format!("{prefix}.bias"), self.b.as_slice_mut().unwrap()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            gamma: Array1::zeros(width),
            beta: Array1::zeros(width),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (n, w) = x.dim();
        let mut xhat = Array2::zeros((n, w));
        let mut rstd = Array1::zeros(n);
        let xs = slice(x);
        let hs = slice_mut(&mut xhat);
        for r in 0..n {
            let row = &xs[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for (h, v) in hs[r * w..(r + 1) * w].iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        let (n, w) = dy.dim();
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros((n, w));
        let dys = slice(dy);
        let xh = slice(&cache.xhat);
        let g = self.gamma.as_slice().unwrap();
        let dxs = slice_mut(&mut dx);
        let inv_w = 1.0 / w as f64;
        for r in 0..n {
            let dyr = &dys[r * w..(r + 1) * w];
            let xr = &xh[r * w..(r + 1) * w];
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for c in 0..w {
                let d = dyr[c] * g[c];
                mean_d += d;
                mean_dx += d * xr[c];
            }
            mean_d *= inv_w;
            mean_dx *= inv_w;
            let rs = cache.rstd[r];
            for c in 0..w {
                dxs[r * w + c] = rs * (dyr[c] * g[c] - mean_d - xr[c] * mean_dx);
            }
        }
        dx
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((format!("{prefix}.gamma"), self.gamma.as_slice().unwrap()));
        out.push((format!("{prefix}.beta"), self.beta.as_slice().unwrap()));
    }

    pub fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.gamma"), self.gamma.as_slice_mut().unwrap()));
        out.push((format!("{prefix}.beta"), self.beta.as_slice_mut().unwrap()));
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + libm::erf(v * INV_SQRT_2)))
}

pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = standard(dy.clone());
    dx.zip_mut_with(x, |d, &v| {
        let cdf = 0.5 * (1.0 + libm::erf(v * INV_SQRT_2));
        let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
        *d *= cdf + v * pdf;
    });
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multi-head self-attention over fixed-length sequences packed row-wise.
///
/// The key projection's bias shifts every score in a row by the same amount,
/// which the softmax cancels; it is stored for layout parity but never added,
/// so its gradient is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub causal: bool,
}

pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// `[batch * heads * seq * seq]`, zero where masked.
    probs: Vec<f64>,
    ctx: Array2<f64>,
    seq: usize,
}

impl Attention {
    pub fn init(width: usize, heads: usize, causal: bool, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "width must divide into heads");
        Self {
            q: Linear::init(width, width, rng),
            k: Linear::init(width, width, rng),
            v: Linear::init(width, width, rng),
            o: Linear::init(width, width, rng),
            heads,
            causal,
        }
    }

    pub fn init_normal(width: usize, heads: usize, causal: bool, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::init_normal(width, width, std, rng),
            k: Linear::init_normal(width, width, std, rng),
            v: Linear::init_normal(width, width, std, rng),
            o: Linear::init_normal(width, width, std, rng),
            heads,
            causal,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let w = self.q.input_dim();
        Self {
            q: Linear::zeros(w, w),
            k: Linear::zeros(w, w),
            v: Linear::zeros(w, w),
            o: Linear::zeros(w, w),
            heads: self.heads,
            causal: self.causal,
        }
    }

    pub fn forward(&self, x: &Array2<f64>, seq: usize) -> (Array2<f64>, AttentionCache) {
        let (n, width) = x.dim();
        assert_eq!(n % seq, 0, "rows must be a multiple of the sequence length");
        let batch = n / seq;
        let h = self.heads;
        let dh = width / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(x);
        let k = self.k.forward_no_bias(x);
        let v = self.v.forward(x);
        let mut probs = vec![0.0; batch * h * seq * seq];
        let mut ctx = Array2::<f64>::zeros((n, width));
        {
            let (qs, ks, vs) = (slice(&q), slice(&k), slice(&v));
            let cs = slice_mut(&mut ctx);
            let mut row = vec![0.0; seq];
            for b in 0..batch {
                for head in 0..h {
                    let col = head * dh;
                    let pbase = (b * h + head) * seq * seq;
                    for i in 0..seq {
                        let last = if self.causal { i } else { seq - 1 };
                        let qi = &qs[(b * seq + i) * width + col..][..dh];
                        let mut m = f64::NEG_INFINITY;
                        for j in 0..=last {
                            let kj = &ks[(b * seq + j) * width + col..][..dh];
                            let s: f64 = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                            row[j] = s;
                            m = m.max(s);
                        }
                        let mut sum = 0.0;
                        for r in row.iter_mut().take(last + 1) {
                            *r = (*r - m).exp();
                            sum += *r;
                        }
                        let out = &mut cs[(b * seq + i) * width + col..][..dh];
                        for j in 0..=last {
                            let a = row[j] / sum;
                            probs[pbase + i * seq + j] = a;
                            let vj = &vs[(b * seq + j) * width + col..][..dh];
                            for (o, vv) in out.iter_mut().zip(vj) {
                                *o += a * vv;
                            }
                        }
                    }
                }
            }
        }
        let out = self.o.forward(&ctx);
        (
            out,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                ctx,
                seq,
            },
        )
    }

    pub fn backward(&self, cache: &AttentionCache, dout: &Array2<f64>, grad: &mut Attention) -> Array2<f64> {
        let (n, width) = dout.dim();
        let seq = cache.seq;
        let batch = n / seq;
        let h = self.heads;
        let dh = width / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self.o.backward(&cache.ctx, dout, &mut grad.o);
        let mut dq = Array2::<f64>::zeros((n, width));
        let mut dk = Array2::<f64>::zeros((n, width));
        let mut dv = Array2::<f64>::zeros((n, width));
        {
            let (qs, ks, vs) = (slice(&cache.q), slice(&cache.k), slice(&cache.v));
            let dcs = slice(&dctx);
            let dqs = slice_mut(&mut dq);
            let dks = slice_mut(&mut dk);
            let dvs = slice_mut(&mut dv);
            let mut da = vec![0.0; seq];
            for b in 0..batch {
                for head in 0..h {
                    let col = head * dh;
                    let pbase = (b * h + head) * seq * seq;
                    for i in 0..seq {
                        let last = if self.causal { i } else { seq - 1 };
                        let dci = &dcs[(b * seq + i) * width + col..][..dh];
                        let mut dot = 0.0;
                        for j in 0..=last {
                            let a = cache.probs[pbase + i * seq + j];
                            let vj = &vs[(b * seq + j) * width + col..][..dh];
                            let d: f64 = dci.iter().zip(vj).map(|(x, y)| x * y).sum();
                            da[j] = d;
                            dot += a * d;
                            let dvj = &mut dvs[(b * seq + j) * width + col..][..dh];
                            for (g, c) in dvj.iter_mut().zip(dci) {
                                *g += a * c;
                            }
                        }
                        let qi_off = (b * seq + i) * width + col;
                        for j in 0..=last {
                            let a = cache.probs[pbase + i * seq + j];
                            let ds = a * (da[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj_off = (b * seq + j) * width + col;
                            for c in 0..dh {
                                dqs[qi_off + c] += ds * ks[kj_off + c];
                                dks[kj_off + c] += ds * qs[qi_off + c];
                            }
                        }
                    }
                }
            }
        }
        let mut dx = self.q.backward(&cache.x, &dq, &mut grad.q);
        dx += &self.k.backward_no_bias(&cache.x, &dk, &mut grad.k);
        dx += &self.v.backward(&cache.x, &dv, &mut grad.v);
        dx
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.q.tensors(&format!("{prefix}.q"), out);
        self.k.tensors(&format!("{prefix}.k"), out);
        self.v.tensors(&format!("{prefix}.v"), out);
        self.o.tensors(&format!("{prefix}.o"), out);
    }

    pub fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.q.tensors_mut(&format!("{prefix}.q"), out);
        self.k.tensors_mut(&format!("{prefix}.k"), out);
        self.v.tensors_mut(&format!("{prefix}.v"), out);
        self.o.tensors_mut(&format!("{prefix}.o"), out);
    }
}

/// Selects rows `start, start + stride, ...` (one per sequence).
pub fn gather_rows(x: &Array2<f64>, start: usize, stride: usize) -> Array2<f64> {
    x.slice(s![start..;stride, ..]).to_owned()
}

/// Inverse of [`gather_rows`]: scatters `src` into a zero matrix of `rows` rows.
pub fn scatter_rows(src: &Array2<f64>, rows: usize, start: usize, stride: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, src.ncols()));
    out.slice_mut(s![start..;stride, ..]).assign(src);
    out
}

/// AdamW with decoupled weight decay over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            params[i] *= 1.0 - lr * self.weight_decay;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One-cycle learning-rate schedule: cosine warm-up from `max_lr / 25` to
/// `max_lr`, then cosine annealing down to `max_lr / 25e4`.
#[derive(Debug, Clone, Copy)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl OneCycle {
    pub const DIV_FACTOR: f64 = 25.0;
    pub const FINAL_DIV_FACTOR: f64 = 1e4;

    pub fn lr(&self, step: usize) -> f64 {
        let initial = self.max_lr / Self::DIV_FACTOR;
        let min = initial / Self::FINAL_DIV_FACTOR;
        let warm = ((self.warmup_fraction * self.total_steps as f64).round() as usize).max(1);
        let anneal = |start: f64, end: f64, pct: f64| end + (start - end) / 2.0 * ((std::f64::consts::PI * pct).cos() + 1.0);
        if step < warm {
            anneal(initial, self.max_lr, step as f64 / warm as f64)
        } else {
            let rest = self.total_steps.saturating_sub(warm).max(1);
            let pct = ((step - warm) as f64 / rest as f64).min(1.0);
            anneal(self.max_lr, min, pct)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    struct Probe {
        att: Attention,
        ln: LayerNorm,
        lin: Linear,
    }

    impl ParamSet for Probe {
        fn tensors(&self) -> Vec<(String, &[f64])> {
            let mut v = Vec::new();
            self.att.tensors("att", &mut v);
            self.ln.tensors("ln", &mut v);
            self.lin.tensors("lin", &mut v);
            v
        }
        fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
            let mut v = Vec::new();
            self.att.tensors_mut("att", &mut v);
            self.ln.tensors_mut("ln", &mut v);
            self.lin.tensors_mut("lin", &mut v);
            v
        }
    }

    /// loss = sum(weights * lin(gelu(x + att(ln(x)))))
    fn probe_loss(p: &Probe, x: &Array2<f64>, wts: &Array2<f64>, seq: usize) -> f64 {
        let (a, _) = p.ln.forward(x);
        let (att, _) = p.att.forward(&a, seq);
        let r = x + &att;
        let g = gelu(&r);
        (&p.lin.forward(&g) * wts).sum()
    }

    fn probe_grad(p: &Probe, x: &Array2<f64>, wts: &Array2<f64>, seq: usize) -> Probe {
        let mut grad = Probe {
            att: p.att.zeros_like(),
            ln: LayerNorm::zeros(x.ncols()),
            lin: Linear::zeros(p.lin.input_dim(), p.lin.output_dim()),
        };
        let (a, ln_cache) = p.ln.forward(x);
        let (att, att_cache) = p.att.forward(&a, seq);
        let r = x + &att;
        let g = gelu(&r);
        let dg = p.lin.backward(&g, wts, &mut grad.lin);
        let dr = gelu_backward(&r, &dg);
        let da = p.att.backward(&att_cache, &dr, &mut grad.att);
        let _ = p.ln.backward(&ln_cache, &da, &mut grad.ln);
        grad
    }

    #[test]
    fn layer_gradients_match_central_differences() {
        for causal in [false, true] {
            let mut rng = rng_for(&[11, causal as u64]);
            let (width, seq, batch) = (6, 4, 2);
            let mut p = Probe {
                att: Attention::init(width, 2, causal, &mut rng),
                ln: LayerNorm::new(width),
                lin: Linear::init(width, 3, &mut rng),
            };
            p.ln.gamma.mapv_inplace(|g| g + 0.3);
            p.ln.beta.mapv_inplace(|b| b - 0.1);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let x = Array2::from_shape_simple_fn((batch * seq, width), || normal.sample(&mut rng));
            let wts = Array2::from_shape_simple_fn((batch * seq, 3), || normal.sample(&mut rng));
            let analytic = probe_grad(&p, &x, &wts, seq).to_flat();
            let base = p.to_flat();
            let h = 1e-5;
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus[i] += h;
                p.load_flat(&plus);
                let lp = probe_loss(&p, &x, &wts, seq);
                let mut minus = base.clone();
                minus[i] -= h;
                p.load_flat(&minus);
                let lm = probe_loss(&p, &x, &wts, seq);
                let fd = (lp - lm) / (2.0 * h);
                let a = analytic[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-4, "coord {i}: analytic {a} fd {fd} causal={causal}");
            }
            p.load_flat(&base);
        }
    }

    #[test]
    fn key_bias_never_enters_the_scores() {
        let mut rng = rng_for(&[3]);
        let mut att = Attention::init(4, 2, true, &mut rng);
        let x = Array2::from_shape_simple_fn((6, 4), || rng.random::<f64>());
        let (y0, _) = att.forward(&x, 3);
        att.k.b.fill(123.0);
        let (y1, _) = att.forward(&x, 3);
        assert_eq!(y0, y1);
    }

    #[test]
    fn one_cycle_peaks_after_warmup_and_decays() {
        let s = OneCycle {
            max_lr: 1e-3,
            total_steps: 100,
            warmup_fraction: 0.1,
        };
        assert!((s.lr(0) - 4e-5).abs() < 1e-15);
        assert!((s.lr(10) - 1e-3).abs() < 1e-15);
        assert!(s.lr(5) > s.lr(0) && s.lr(5) < s.lr(10));
        assert!(s.lr(100) < 1e-8);
        assert!(s.lr(50) < s.lr(20));
    }

    #[test]
    fn adamw_decays_weights_with_zero_gradient() {
        let mut opt = AdamW::new(1, 0.1);
        let mut p = [1.0];
        opt.step(&mut p, &[0.0], 0.5);
        assert!((p[0] - 0.95).abs() < 1e-12);
    }
}

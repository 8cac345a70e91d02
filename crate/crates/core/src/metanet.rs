//! Speed-predictor surrogate: per-layer compute times are pooled across
//! workers, affinely embedded, and encoded by a two-layer LSTM; the final
//! hidden state is concatenated with bandwidth, static, and candidate-config
//! features and mapped by two dense layers to a per-worker speed estimate.
//!
//! Backpropagation is hand-derived for this fixed architecture; there is no
//! autodiff framework. All randomness is seeded and training is reproducible.

use std::io::{BufRead, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::simcore::{RuntimeMetrics, SchedulerConfig};
use crate::workload::EMBED_DIM;
use crate::{Error, Result};

/// Maximum worker count the static features are normalized against.
pub const N_MAX: usize = 16;

const T_SCALE: f64 = 100.0;
const BW_SCALE: f64 = 25.0;
const SP_LOG_MIN: f64 = 12.0;
const SP_LOG_SPAN: f64 = 18.0;
const SC_SPAN: f64 = 15.0;
const L_SCALE: f64 = 32.0;
/// n, l, model embedding, arch embedding, log2(S_p), S_c, plus derived
/// partitioning statics: log2 total bytes, log2 chunk count, frame overhead.
const STATIC_DIM: usize = 2 + 2 * EMBED_DIM + 2 + 3;
/// Per-worker extras appended to the head input: b_down, b_up, mean BP time.
const WORKER_DIM: usize = 3;
/// Per-layer pooled input to the embedding: mean/min/max over workers of the
/// BP time, plus log2 of the layer's parameter bytes.
const POOL_DIM: usize = 4;
/// Transport framing bytes per chunk, matching the runtime default.
const FRAME_BYTES: f64 = 16384.0;
const LAYER_LOG_MIN: f64 = 10.0;
const LAYER_LOG_SPAN: f64 = 20.0;
const TOTAL_LOG_MIN: f64 = 20.0;
const TOTAL_LOG_SPAN: f64 = 12.0;
const CHUNK_LOG_SPAN: f64 = 16.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureVector {
    /// l x n layer-wise BP compute times, seconds.
    pub t_seq: Vec<Vec<f64>>,
    /// Per-layer parameter bytes.
    pub layer_bytes: Vec<u64>,
    pub b_down: Vec<f64>,
    pub b_up: Vec<f64>,
    pub model_embedding: Vec<f64>,
    pub arch_embedding: Vec<f64>,
    /// Candidate partition size as log2(bytes).
    pub sp_log2: f64,
    /// Candidate credit multiplier.
    pub credit: f64,
}

impl FeatureVector {
    pub fn from_metrics(metrics: &RuntimeMetrics, candidate: &SchedulerConfig) -> Self {
        FeatureVector {
            t_seq: metrics.t.clone(),
            layer_bytes: metrics.layer_bytes.clone(),
            b_down: metrics.b_down.clone(),
            b_up: metrics.b_up.clone(),
            model_embedding: metrics.model_embedding.clone(),
            arch_embedding: metrics.arch_embedding.clone(),
            sp_log2: (candidate.partition_bytes as f64).log2(),
            credit: candidate.credit_multiplier as f64,
        }
    }

    pub fn n_workers(&self) -> usize {
        self.b_down.len()
    }

    pub fn n_layers(&self) -> usize {
        self.t_seq.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_seq.is_empty() || self.b_down.is_empty() {
            return Err(Error::ShapeMismatch("empty feature vector".into()));
        }
        let n = self.b_down.len();
        if self.b_up.len() != n || self.t_seq.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("inconsistent worker dimension".into()));
        }
        if self.layer_bytes.len() != self.t_seq.len() {
            return Err(Error::ShapeMismatch("inconsistent layer dimension".into()));
        }
        if self.model_embedding.len() != EMBED_DIM || self.arch_embedding.len() != EMBED_DIM {
            return Err(Error::ShapeMismatch("bad embedding width".into()));
        }
        let finite = self
            .t_seq
            .iter()
            .flatten()
            .chain(&self.b_down)
            .chain(&self.b_up)
            .all(|x| x.is_finite() && *x >= 0.0);
        if !finite {
            return Err(Error::ShapeMismatch("non-finite feature entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSample {
    pub features: FeatureVector,
    /// Observed per-worker mean speed over a 10-iteration group, samples/s.
    pub label: Vec<f64>,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn init(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (cols.max(1) as f64).sqrt();
        Mat {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// y += M x
    fn matvec_acc(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut s = 0.0;
            for (a, b) in row.iter().zip(x) {
                s += a * b;
            }
            y[r] += s;
        }
    }

    /// y += Mᵀ x
    fn matvec_t_acc(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let xr = x[r];
            for (yc, a) in y.iter_mut().zip(row) {
                *yc += xr * a;
            }
        }
    }

    /// M += x yᵀ (outer product accumulate)
    fn outer_acc(&mut self, x: &[f64], y: &[f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let xr = x[r];
            for (m, b) in row.iter_mut().zip(y) {
                *m += xr * b;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    /// 4h x input, gate blocks ordered (input, forget, cell, output).
    pub w_ih: Mat,
    /// 4h x h
    pub w_hh: Mat,
    pub bias: Vec<f64>,
}

impl LstmLayer {
    fn zeros(input: usize, hidden: usize) -> Self {
        LstmLayer {
            w_ih: Mat::zeros(4 * hidden, input),
            w_hh: Mat::zeros(4 * hidden, hidden),
            bias: vec![0.0; 4 * hidden],
        }
    }

    fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut l = LstmLayer {
            w_ih: Mat::init(4 * hidden, input, rng),
            w_hh: Mat::init(4 * hidden, hidden, rng),
            bias: vec![0.0; 4 * hidden],
        };
        // Forget-gate bias 1.0: standard stabilization for gradient flow.
        for b in &mut l.bias[hidden..2 * hidden] {
            *b = 1.0;
        }
        l
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaNetParams {
    pub version: u32,
    pub d_e: usize,
    pub h: usize,
    pub dense: usize,
    pub embed_w: Mat,
    pub embed_b: Vec<f64>,
    pub lstm1: LstmLayer,
    pub lstm2: LstmLayer,
    pub dense1_w: Mat,
    pub dense1_b: Vec<f64>,
    pub dense2_w: Mat,
    pub dense2_b: Vec<f64>,
    /// Normalization statistics of the log labels; identity (0, 1) until
    /// trained.
    pub label_mean: f64,
    pub label_std: f64,
}

fn head_input_dim(h: usize) -> usize {
    h + STATIC_DIM + WORKER_DIM
}

impl MetaNetParams {
    pub fn zeros(d_e: usize, h: usize, dense: usize) -> Self {
        MetaNetParams {
            version: 1,
            d_e,
            h,
            dense,
            embed_w: Mat::zeros(d_e, POOL_DIM),
            embed_b: vec![0.0; d_e],
            lstm1: LstmLayer::zeros(d_e, h),
            lstm2: LstmLayer::zeros(h, h),
            dense1_w: Mat::zeros(dense, head_input_dim(h)),
            dense1_b: vec![0.0; dense],
            dense2_w: Mat::zeros(1, dense),
            dense2_b: vec![0.0; 1],
            label_mean: 0.0,
            label_std: 1.0,
        }
    }

    pub fn init(d_e: usize, h: usize, dense: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        MetaNetParams {
            version: 1,
            d_e,
            h,
            dense,
            embed_w: Mat::init(d_e, POOL_DIM, rng),
            embed_b: vec![0.0; d_e],
            lstm1: LstmLayer::init(d_e, h, rng),
            lstm2: LstmLayer::init(h, h, rng),
            dense1_w: Mat::init(dense, head_input_dim(h), rng),
            dense1_b: vec![0.0; dense],
            dense2_w: Mat::init(1, dense, rng),
            dense2_b: vec![0.0; 1],
            label_mean: 0.0,
            label_std: 1.0,
        }
    }

    /// Default architecture sizes.
    pub fn default_init(seed: u64) -> Self {
        Self::init(16, 32, 64, seed)
    }

    fn slices(&self) -> Vec<&[f64]> {
        vec![
            &self.embed_w.data,
            &self.embed_b,
            &self.lstm1.w_ih.data,
            &self.lstm1.w_hh.data,
            &self.lstm1.bias,
            &self.lstm2.w_ih.data,
            &self.lstm2.w_hh.data,
            &self.lstm2.bias,
            &self.dense1_w.data,
            &self.dense1_b,
            &self.dense2_w.data,
            &self.dense2_b,
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.embed_w.data,
            &mut self.embed_b,
            &mut self.lstm1.w_ih.data,
            &mut self.lstm1.w_hh.data,
            &mut self.lstm1.bias,
            &mut self.lstm2.w_ih.data,
            &mut self.lstm2.w_hh.data,
            &mut self.lstm2.bias,
            &mut self.dense1_w.data,
            &mut self.dense1_b,
            &mut self.dense2_w.data,
            &mut self.dense2_b,
        ]
    }

    pub fn flat_len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        debug_assert_eq!(off, flat.len());
    }

    /// Offset of the first head (dense-layer) parameter in the flat layout;
    /// everything before it is the frozen encoder during online adaptation.
    pub fn head_offset(&self) -> usize {
        self.flat_len() - (self.dense1_w.data.len() + self.dense1_b.len() + self.dense2_w.data.len() + self.dense2_b.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("params serialize");
        std::fs::write(path, json).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let p: MetaNetParams = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            source: e,
        })?;
        if p.version != 1 {
            return Err(Error::Validation(format!("unsupported checkpoint version {}", p.version)));
        }
        Ok(p)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn statics_of(f: &FeatureVector) -> Vec<f64> {
    let sp = f.sp_log2.exp2();
    let total: f64 = f.layer_bytes.iter().map(|&b| b as f64).sum();
    let chunks: f64 = f
        .layer_bytes
        .iter()
        .map(|&b| (b as f64 / sp).ceil().max(1.0))
        .sum();
    let mut s = Vec::with_capacity(STATIC_DIM);
    s.push(f.n_workers() as f64 / N_MAX as f64);
    s.push(f.n_layers() as f64 / L_SCALE);
    s.extend_from_slice(&f.model_embedding);
    s.extend_from_slice(&f.arch_embedding);
    s.push((f.sp_log2 - SP_LOG_MIN) / SP_LOG_SPAN);
    s.push((f.credit - 1.0) / SC_SPAN);
    s.push((total.max(1.0).log2() - TOTAL_LOG_MIN) / TOTAL_LOG_SPAN);
    s.push(chunks.log2() / CHUNK_LOG_SPAN);
    s.push((FRAME_BYTES * chunks / total.max(1.0)).min(2.0) / 2.0);
    s
}

/// Per-layer pooled + embedded input sequence.
fn embed_sequence(p: &MetaNetParams, f: &FeatureVector) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let pooled: Vec<Vec<f64>> = f
        .t_seq
        .iter()
        .zip(&f.layer_bytes)
        .map(|(row, &bytes)| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let size = ((bytes.max(1) as f64).log2() - LAYER_LOG_MIN) / LAYER_LOG_SPAN;
            vec![mean * T_SCALE, min * T_SCALE, max * T_SCALE, size]
        })
        .collect();
    let xs = pooled
        .iter()
        .map(|x| {
            let mut y = p.embed_b.clone();
            p.embed_w.matvec_acc(x, &mut y);
            y
        })
        .collect();
    (pooled, xs)
}

/// Per-timestep LSTM internals retained for backprop.
#[derive(Debug, Clone, Default)]
struct LstmTrace {
    gates: Vec<Vec<f64>>, // 4h post-activation per step (i, f, g, o)
    cs: Vec<Vec<f64>>,    // cell states
    hs: Vec<Vec<f64>>,    // hidden states
}

fn lstm_forward(layer: &LstmLayer, h: usize, xs: &[Vec<f64>]) -> LstmTrace {
    let mut tr = LstmTrace::default();
    let mut hp = vec![0.0; h];
    let mut cp = vec![0.0; h];
    for x in xs {
        let mut z = layer.bias.clone();
        layer.w_ih.matvec_acc(x, &mut z);
        layer.w_hh.matvec_acc(&hp, &mut z);
        let mut gates = vec![0.0; 4 * h];
        for j in 0..h {
            gates[j] = sigmoid(z[j]);
            gates[h + j] = sigmoid(z[h + j]);
            gates[2 * h + j] = z[2 * h + j].tanh();
            gates[3 * h + j] = sigmoid(z[3 * h + j]);
        }
        let mut c = vec![0.0; h];
        let mut hv = vec![0.0; h];
        for j in 0..h {
            c[j] = gates[h + j] * cp[j] + gates[j] * gates[2 * h + j];
            hv[j] = gates[3 * h + j] * c[j].tanh();
        }
        tr.gates.push(gates);
        tr.cs.push(c.clone());
        tr.hs.push(hv.clone());
        hp = hv;
        cp = c;
    }
    tr
}

struct ForwardCache {
    pooled: Vec<Vec<f64>>,
    xs: Vec<Vec<f64>>,
    tr1: LstmTrace,
    tr2: LstmTrace,
    statics: Vec<f64>,
    head_inputs: Vec<Vec<f64>>, // per worker
    a1: Vec<Vec<f64>>,          // per worker, post-tanh dense1
    y_norm: Vec<f64>,           // per worker, normalized prediction
}

fn forward_cached(p: &MetaNetParams, f: &FeatureVector) -> Result<ForwardCache> {
    f.validate()?;
    if p.embed_w.cols != POOL_DIM || p.dense1_w.cols != head_input_dim(p.h) {
        return Err(Error::ShapeMismatch("params/features disagree".into()));
    }
    let (pooled, xs) = embed_sequence(p, f);
    let tr1 = lstm_forward(&p.lstm1, p.h, &xs);
    let tr2 = lstm_forward(&p.lstm2, p.h, &tr1.hs);
    let context = tr2.hs.last().expect("non-empty sequence");
    let statics = statics_of(f);
    let n = f.n_workers();
    let l = f.n_layers();
    let mut head_inputs = Vec::with_capacity(n);
    let mut a1 = Vec::with_capacity(n);
    let mut y_norm = Vec::with_capacity(n);
    for w in 0..n {
        let t_mean = f.t_seq.iter().map(|r| r[w]).sum::<f64>() / l as f64;
        let mut z: Vec<f64> = Vec::with_capacity(head_input_dim(p.h));
        z.extend_from_slice(context);
        z.extend_from_slice(&statics);
        z.push(f.b_down[w] / BW_SCALE);
        z.push(f.b_up[w] / BW_SCALE);
        z.push(t_mean * T_SCALE);
        let mut pre = p.dense1_b.clone();
        p.dense1_w.matvec_acc(&z, &mut pre);
        let act: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let mut out = p.dense2_b.clone();
        p.dense2_w.matvec_acc(&act, &mut out);
        head_inputs.push(z);
        a1.push(act);
        y_norm.push(out[0]);
    }
    Ok(ForwardCache {
        pooled,
        xs,
        tr1,
        tr2,
        statics: statics.clone(),
        head_inputs,
        a1,
        y_norm,
    })
}

/// Predicted per-worker training speed, samples/s. The network regresses
/// log-speed (normalized by the label statistics), so errors are relative
/// and slow environments carry the same training weight as fast ones.
pub fn forward(p: &MetaNetParams, f: &FeatureVector) -> Result<Vec<f64>> {
    let cache = forward_cached(p, f)?;
    Ok(cache
        .y_norm
        .iter()
        .map(|y| (y * p.label_std + p.label_mean).exp())
        .collect())
}

/// Euclidean-norm loss between prediction and observation.
pub fn loss(v_hat: &[f64], v_bar: &[f64]) -> f64 {
    assert_eq!(v_hat.len(), v_bar.len());
    v_hat
        .iter()
        .zip(v_bar)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Gradient of the squared objective on the normalized log-label scale with
/// respect to every parameter, flattened in the canonical layout. Returns
/// (gradient, objective value).
pub fn backward(p: &MetaNetParams, sample: &TrainingSample) -> Result<(Vec<f64>, f64)> {
    let f = &sample.features;
    if sample.label.len() != f.n_workers() {
        return Err(Error::ShapeMismatch("label/worker mismatch".into()));
    }
    let cache = forward_cached(p, f)?;
    let h = p.h;
    let n = f.n_workers();
    let l = f.n_layers();

    let mut g = MetaNetParams::zeros(p.d_e, p.h, p.dense);
    let mut obj = 0.0;
    // Residuals on the normalized log-label scale.
    let resid: Vec<f64> = (0..n)
        .map(|w| {
            let target = (sample.label[w].max(1e-9).ln() - p.label_mean) / p.label_std;
            let r = cache.y_norm[w] - target;
            obj += 0.5 * r * r;
            r
        })
        .collect();

    // Head backward; accumulate gradient w.r.t. the shared context.
    let mut d_context = vec![0.0; h];
    for w in 0..n {
        let r = resid[w];
        // dense2: out = W2 a1 + b2
        g.dense2_b[0] += r;
        for (gd, a) in g.dense2_w.data.iter_mut().zip(&cache.a1[w]) {
            *gd += r * a;
        }
        // back through dense2 into a1, then tanh, then dense1
        let d_pre: Vec<f64> = (0..p.dense)
            .map(|j| r * p.dense2_w.at(0, j) * (1.0 - cache.a1[w][j] * cache.a1[w][j]))
            .collect();
        for (gb, d) in g.dense1_b.iter_mut().zip(&d_pre) {
            *gb += d;
        }
        g.dense1_w.outer_acc(&d_pre, &cache.head_inputs[w]);
        let mut d_z = vec![0.0; head_input_dim(h)];
        p.dense1_w.matvec_t_acc(&d_pre, &mut d_z);
        for j in 0..h {
            d_context[j] += d_z[j];
        }
        // Gradients into statics/bandwidth inputs are not parameters; dropped.
    }

    // BPTT through LSTM layer 2 (loss touches only the final hidden state),
    // collecting d(h1_t) as the input gradient of layer 2.
    let mut d_xs2 = vec![vec![0.0; h]; l];
    lstm_backward(&p.lstm2, h, &cache.tr1.hs, &cache.tr2, &d_context, None, &mut g.lstm2, &mut d_xs2);
    // BPTT through layer 1 with per-step output gradients d_xs2.
    let mut d_xs1 = vec![vec![0.0; p.d_e]; l];
    lstm_backward(&p.lstm1, h, &cache.xs, &cache.tr1, &[], Some(&d_xs2), &mut g.lstm1, &mut d_xs1);

    // Embedding backward.
    for t in 0..l {
        for (gb, d) in g.embed_b.iter_mut().zip(&d_xs1[t]) {
            *gb += d;
        }
        g.embed_w.outer_acc(&d_xs1[t], &cache.pooled[t]);
    }
    let _ = &cache.statics;
    Ok((g.flatten(), obj))
}

/// Reverse pass through one LSTM layer.
/// `d_final`: gradient on the last hidden state; `d_steps`: optional
/// per-step hidden-state gradients. Writes parameter gradients into `g`
/// and input gradients into `d_xs`.
#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    layer: &LstmLayer,
    h: usize,
    xs: &[Vec<f64>],
    tr: &LstmTrace,
    d_final: &[f64],
    d_steps: Option<&[Vec<f64>]>,
    g: &mut LstmLayer,
    d_xs: &mut [Vec<f64>],
) {
    let steps = xs.len();
    let mut d_h = vec![0.0; h];
    let mut d_c = vec![0.0; h];
    if !d_final.is_empty() {
        d_h.copy_from_slice(d_final);
    }
    for t in (0..steps).rev() {
        if let Some(ds) = d_steps {
            for j in 0..h {
                d_h[j] += ds[t][j];
            }
        }
        let gates = &tr.gates[t];
        let c = &tr.cs[t];
        let cp: &[f64] = if t > 0 { &tr.cs[t - 1] } else { &[] };
        let hp: &[f64] = if t > 0 { &tr.hs[t - 1] } else { &[] };
        let mut d_z = vec![0.0; 4 * h];
        for j in 0..h {
            let i = gates[j];
            let fg = gates[h + j];
            let gg = gates[2 * h + j];
            let o = gates[3 * h + j];
            let tc = c[j].tanh();
            // h = o * tanh(c)
            let d_o = d_h[j] * tc;
            let mut d_cj = d_c[j] + d_h[j] * o * (1.0 - tc * tc);
            // c = f*c_prev + i*g
            let d_i = d_cj * gg;
            let d_g = d_cj * i;
            let d_f = if t > 0 { d_cj * cp[j] } else { 0.0 };
            d_cj *= fg; // propagate to c_{t-1}
            d_c[j] = d_cj;
            d_z[j] = d_i * i * (1.0 - i);
            d_z[h + j] = d_f * fg * (1.0 - fg);
            d_z[2 * h + j] = d_g * (1.0 - gg * gg);
            d_z[3 * h + j] = d_o * o * (1.0 - o);
        }
        for (gb, d) in g.bias.iter_mut().zip(&d_z) {
            *gb += d;
        }
        g.w_ih.outer_acc(&d_z, &xs[t]);
        layer.w_ih.matvec_t_acc(&d_z, &mut d_xs[t]);
        let mut d_hp = vec![0.0; h];
        if t > 0 {
            g.w_hh.outer_acc(&d_z, hp);
            layer.w_hh.matvec_t_acc(&d_z, &mut d_hp);
        }
        d_h = d_hp;
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    fn new(len: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
        }
    }

    /// Applies one step on `flat[lo..]`, leaving earlier entries frozen.
    fn step(&mut self, flat: &mut [f64], grad: &[f64], lo: usize) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in lo..flat.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            flat[i] -= self.lr * mh / (vh.sqrt() + EPS);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

fn batch_gradient(p: &MetaNetParams, batch: &[&TrainingSample]) -> Result<(Vec<f64>, f64)> {
    let per: Vec<(Vec<f64>, f64)> = batch
        .par_iter()
        .map(|s| backward(p, s))
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; p.flat_len()];
    let mut total = 0.0;
    // Deterministic sequential reduction in batch order.
    for (g, obj) in &per {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
        total += obj;
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= scale;
    }
    Ok((grad, total / batch.len() as f64))
}

/// Mini-batch Adam over the whole parameter set. Label normalization
/// statistics are computed from the dataset and stored in the returned
/// params. Reports mean squared loss (normalized scale) per epoch.
pub fn train_offline(
    dataset: &[TrainingSample],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(MetaNetParams, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Validation("empty training dataset".into()));
    }
    let mut p = MetaNetParams::default_init(seed);
    set_label_stats(&mut p, dataset);
    let report = train_loop(&mut p, dataset, epochs, lr, seed, 0)?;
    Ok((p, report))
}

/// As `train_offline` but with caller-chosen architecture sizes.
pub fn train_offline_sized(
    dataset: &[TrainingSample],
    epochs: usize,
    lr: f64,
    seed: u64,
    d_e: usize,
    h: usize,
    dense: usize,
) -> Result<(MetaNetParams, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Validation("empty training dataset".into()));
    }
    let mut p = MetaNetParams::init(d_e, h, dense, seed);
    set_label_stats(&mut p, dataset);
    let report = train_loop(&mut p, dataset, epochs, lr, seed, 0)?;
    Ok((p, report))
}

fn set_label_stats(p: &mut MetaNetParams, dataset: &[TrainingSample]) {
    // Statistics of the log labels (the regression target space).
    let all: Vec<f64> = dataset
        .iter()
        .flat_map(|s| s.label.iter().map(|v| v.max(1e-9).ln()))
        .collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / all.len() as f64;
    p.label_mean = mean;
    p.label_std = var.sqrt().max(1e-9);
}

const BATCH: usize = 64;

fn train_loop(
    p: &mut MetaNetParams,
    dataset: &[TrainingSample],
    epochs: usize,
    lr: f64,
    seed: u64,
    frozen_prefix: usize,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut flat = p.flatten();
    let mut adam = Adam::new(flat.len(), lr);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut best = (f64::INFINITY, flat.clone());
    for _epoch in 0..epochs {
        // Fisher-Yates with the seeded stream.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(BATCH) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (grad, obj) = batch_gradient(p, &batch)?;
            if !obj.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {}", _epoch)));
            }
            adam.step(&mut flat, &grad, frozen_prefix);
            p.unflatten(&flat);
            epoch_loss += obj;
            batches += 1;
        }
        let mean_loss = epoch_loss / batches as f64;
        if mean_loss < best.0 {
            best = (mean_loss, flat.clone());
        }
        epoch_losses.push(mean_loss);
        // Mild exponential decay keeps late epochs from oscillating.
        adam.lr *= 0.98;
    }
    // Return the best epoch seen, not necessarily the last.
    p.unflatten(&best.1);
    Ok(TrainReport { epoch_losses })
}

/// Head-only fine-tuning on the controller's recent-sample buffer. The
/// encoder stays frozen; the best parameters seen (including the input)
/// are returned, so post-adaptation loss never exceeds pre-adaptation loss.
pub fn adapt_online(
    params: &MetaNetParams,
    recent_samples: &[TrainingSample],
    steps: usize,
    lr: f64,
) -> Result<MetaNetParams> {
    if recent_samples.is_empty() {
        return Err(Error::Validation("empty adaptation buffer".into()));
    }
    if steps == 0 {
        return Ok(params.clone());
    }
    let mut p = params.clone();
    let lo = p.head_offset();
    let mut flat = p.flatten();
    let mut adam = Adam::new(flat.len(), lr);
    let eval = |p: &MetaNetParams| -> Result<f64> {
        let mut total = 0.0;
        for s in recent_samples {
            let v = forward(p, &s.features)?;
            total += loss(&v, &s.label);
        }
        Ok(total / recent_samples.len() as f64)
    };
    let mut best = p.clone();
    let mut best_loss = eval(&p)?;
    let all: Vec<&TrainingSample> = recent_samples.iter().collect();
    for step in 0..steps {
        let (grad, obj) = batch_gradient(&p, &all)?;
        if !obj.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at step {}", step)));
        }
        adam.step(&mut flat, &grad, lo);
        p.unflatten(&flat);
        let cur = eval(&p)?;
        if cur < best_loss {
            best_loss = cur;
            best = p.clone();
        }
    }
    Ok(best)
}

/// Mean Euclidean-norm loss of a parameter set over a sample slice.
pub fn dataset_loss(p: &MetaNetParams, samples: &[TrainingSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let v = forward(p, &s.features)?;
        total += loss(&v, &s.label);
    }
    Ok(total / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

pub fn save_dataset(path: &Path, samples: &[TrainingSample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            source: e,
        })?;
        writeln!(w).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<TrainingSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            source: e,
        })?);
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::test_support::random_features;
    use super::*;

    #[test]
    fn zero_network_predicts_unit_speed() {
        // Zero log-speed denormalizes to exp(0) = 1 sample/s.
        let p = MetaNetParams::zeros(4, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_features(&mut rng, 3, 2);
        let v = forward(&p, &f).unwrap();
        assert_eq!(v, vec![1.0, 1.0]);
    }

    #[test]
    fn worker_permutation_equivariance() {
        let p = MetaNetParams::default_init(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_features(&mut rng, 4, N_MAX);
        let v = forward(&p, &f).unwrap();
        // Reverse the worker order everywhere.
        let mut g = f.clone();
        for row in &mut g.t_seq {
            row.reverse();
        }
        g.b_down.reverse();
        g.b_up.reverse();
        let u = forward(&p, &g).unwrap();
        let mut v_rev = v.clone();
        v_rev.reverse();
        for (a, b) in u.iter().zip(&v_rev) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_deterministic() {
        let p = MetaNetParams::default_init(9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_features(&mut rng, 5, 3);
        assert_eq!(forward(&p, &f).unwrap(), forward(&p, &f).unwrap());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(loss(&[3.0, 4.0], &[0.0, 0.0]), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let manual = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!((loss(&a, &b) - manual).abs() < 1e-12);
    }

    fn fd_check(seed: u64) -> f64 {
        let p = MetaNetParams::init(4, 4, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
        let f = random_features(&mut rng, 3, 2);
        // O(1) labels keep the objective small enough that central
        // differences stay accurate on small-magnitude gradients.
        let label: Vec<f64> = (0..2).map(|_| rng.gen_range(0.5..2.0)).collect();
        let sample = TrainingSample {
            features: f,
            label,
        };
        let (grad, _) = backward(&p, &sample).unwrap();
        let flat = p.flatten();
        let eps = 1e-5;
        let mut max_rel = 0.0f64;
        let objective = |flat: &[f64]| -> f64 {
            let mut q = p.clone();
            q.unflatten(flat);
            let cache = forward(&q, &sample.features).unwrap();
            cache
                .iter()
                .zip(&sample.label)
                .map(|(a, b)| {
                    let an = (a.ln() - q.label_mean) / q.label_std;
                    let bn = (b.max(1e-9).ln() - q.label_mean) / q.label_std;
                    0.5 * (an - bn) * (an - bn)
                })
                .sum()
        };
        for i in 0..flat.len() {
            let mut fp = flat.clone();
            fp[i] += eps;
            let up = objective(&fp);
            fp[i] = flat[i] - eps;
            let down = objective(&fp);
            let numeric = (up - down) / (2.0 * eps);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max((grad[i] - numeric).abs() / denom);
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let err = fd_check(seed);
            assert!(err < 1e-4, "seed {}: max rel err {}", seed, err);
        }
    }

    #[test]
    fn zero_residual_zero_gradient() {
        // A zero net predicts exp(0) = 1, which matches unit labels, so the
        // objective and every parameter gradient vanish.
        let p = MetaNetParams::zeros(4, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_features(&mut rng, 3, 2);
        let sample = TrainingSample {
            features: f,
            label: vec![1.0, 1.0],
        };
        let (grad, obj) = backward(&p, &sample).unwrap();
        assert_eq!(obj, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bias_gradient_is_log_residual() {
        // A zero net against label t has bias gradient -ln(t) per worker,
        // so scaling both labels by c shifts the gradient by -2 ln(c).
        let p = MetaNetParams::zeros(4, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = random_features(&mut rng, 3, 2);
        let grad_for = |c: f64| {
            let sample = TrainingSample {
                features: f.clone(),
                label: vec![c * 3.0, c * 5.0],
            };
            let (grad, _) = backward(&p, &sample).unwrap();
            // dense2 bias is the last flat entry.
            *grad.last().unwrap()
        };
        let g1 = grad_for(1.0);
        let g3 = grad_for(3.0);
        assert!((g1 + (3.0f64.ln() + 5.0f64.ln())).abs() < 1e-12);
        assert!((g3 - (g1 - 2.0 * 3.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn memorizes_single_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = random_features(&mut rng, 3, 2);
        let sample = TrainingSample {
            features: f,
            label: vec![120.0, 118.0],
        };
        let data = vec![sample.clone(); 8];
        let (p, report) = train_offline_sized(&data, 200, 1e-2, 0, 4, 8, 16).unwrap();
        assert!(report.epoch_losses.last().unwrap() < &1e-4);
        let v = forward(&p, &sample.features).unwrap();
        assert!((v[0] - 120.0).abs() < 1.0 && (v[1] - 118.0).abs() < 1.0);
    }

    fn linear_teacher_dataset(n_samples: usize, seed: u64) -> Vec<TrainingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_samples)
            .map(|_| {
                let f = random_features(&mut rng, 3, 2);
                let label = (0..2)
                    .map(|w| {
                        100.0
                            + 40.0 * (f.b_down[w] / BW_SCALE)
                            + 25.0 * ((f.credit - 1.0) / SC_SPAN)
                            - 30.0 * ((f.sp_log2 - SP_LOG_MIN) / SP_LOG_SPAN)
                    })
                    .collect();
                TrainingSample { features: f, label }
            })
            .collect()
    }

    #[test]
    fn linear_teacher_learned_within_2_percent() {
        let data = linear_teacher_dataset(2000, 21);
        let (p, _) = train_offline_sized(&data, 60, 3e-3, 1, 8, 16, 32).unwrap();
        let test = linear_teacher_dataset(200, 22);
        let mut rel = Vec::new();
        for s in &test {
            let v = forward(&p, &s.features).unwrap();
            for (a, b) in v.iter().zip(&s.label) {
                rel.push((a - b).abs() / b);
            }
        }
        let mean_rel = rel.iter().sum::<f64>() / rel.len() as f64;
        assert!(mean_rel < 0.02, "mean relative error {}", mean_rel);
    }

    #[test]
    fn train_offline_reproducible() {
        let data = linear_teacher_dataset(200, 31);
        let (a, ra) = train_offline_sized(&data, 5, 1e-3, 7, 4, 8, 16).unwrap();
        let (b, rb) = train_offline_sized(&data, 5, 1e-3, 7, 4, 8, 16).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
    }

    #[test]
    fn adapt_online_freezes_encoder_and_never_hurts() {
        let data = linear_teacher_dataset(400, 41);
        let (p, _) = train_offline_sized(&data, 20, 3e-3, 3, 4, 8, 16).unwrap();
        // Drift: labels scaled by 0.5.
        let drifted: Vec<TrainingSample> = linear_teacher_dataset(32, 42)
            .into_iter()
            .map(|mut s| {
                for v in &mut s.label {
                    *v *= 0.5;
                }
                s
            })
            .collect();
        let pre = dataset_loss(&p, &drifted).unwrap();
        let adapted = adapt_online(&p, &drifted, 50, 1e-2).unwrap();
        let post = dataset_loss(&adapted, &drifted).unwrap();
        assert!(post <= pre + 1e-12);
        // Encoder slices untouched.
        let lo = p.head_offset();
        assert_eq!(p.flatten()[..lo], adapted.flatten()[..lo]);
        // Post-adaptation relative error under the 10% drift threshold.
        let mut rel = Vec::new();
        for s in &drifted {
            let v = forward(&adapted, &s.features).unwrap();
            for (a, b) in v.iter().zip(&s.label) {
                rel.push((a - b).abs() / b);
            }
        }
        let mean_rel = rel.iter().sum::<f64>() / rel.len() as f64;
        assert!(mean_rel < 0.10, "post-adaptation error {}", mean_rel);
    }

    #[test]
    fn adapt_online_zero_steps_is_noop() {
        let data = linear_teacher_dataset(16, 51);
        let p = MetaNetParams::default_init(5);
        let q = adapt_online(&p, &data, 0, 1e-3).unwrap();
        assert_eq!(p.flatten(), q.flatten());
    }

    #[test]
    fn no_drift_adaptation_barely_moves_params() {
        let data = linear_teacher_dataset(600, 61);
        let (p, _) = train_offline_sized(&data, 30, 3e-3, 2, 4, 8, 16).unwrap();
        let recent = linear_teacher_dataset(32, 62);
        let adapted = adapt_online(&p, &recent, 20, 1e-4).unwrap();
        let a = p.flatten();
        let b = adapted.flatten();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff / norm < 0.01, "param drift {}", diff / norm);
    }

    #[test]
    fn checkpoint_roundtrip_bit_identical() {
        let p = MetaNetParams::default_init(77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        p.save(&path).unwrap();
        let q = MetaNetParams::load(&path).unwrap();
        assert_eq!(p, q);
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let f = random_features(&mut rng, 4, 3);
        assert_eq!(forward(&p, &f).unwrap(), forward(&q, &f).unwrap());
    }

    #[test]
    fn dataset_file_roundtrip() {
        let data = linear_teacher_dataset(10, 91);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_dataset(&path, &data).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.features.t_seq, b.features.t_seq);
        }
    }
}

//! Built-in character-level decoder transformer.
//!
//! A desk-scale stand-in for a real instruction-tuned policy: large enough to
//! learn the slot-filling template on the bundled corpora, small enough that
//! analytic gradients can be verified against finite differences in seconds.
//! Forward, backward and sampling are written out by hand over flat `Vec`
//! storage. Layout is pre-LN: `x + Attn(LN(x))` then `x + FFN(LN(x))`, with
//! learned positional embeddings and a final LayerNorm before the output
//! projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::gen::vocab::{Vocab, EOS};
use crate::gen::{BackendConcurrency, Decoding, GenError, PolicyBackend};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
// tanh-approximation GELU constants: sqrt(2/pi) and the cubic coefficient.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Model shape. `width` must be divisible by `heads`; the feedforward hidden
/// size is `width * ffn_mult`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyLmConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub context: usize,
    pub ffn_mult: usize,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self { depth: 2, width: 64, heads: 4, context: 256, ffn_mult: 4 }
    }
}

impl ToyLmConfig {
    pub(crate) fn validate(&self) -> Result<(), GenError> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.context == 0 || self.ffn_mult == 0 {
            return Err(GenError::InvalidConfig("all model dimensions must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(GenError::InvalidConfig(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Row-major matrix. Biases are 1-row tensors so the whole parameter set is a
/// uniform list of tensors for flat indexing.
#[derive(Debug, Clone, PartialEq)]
struct Tensor<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [F] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    fn len(&self) -> usize {
        self.data.len()
    }
}

/// out = a · w + bias, with the bias row broadcast over rows of `a`.
fn affine<F: Scalar>(a: &Tensor<F>, w: &Tensor<F>, bias: &Tensor<F>) -> Tensor<F> {
    debug_assert_eq!(a.cols, w.rows);
    let mut out = Tensor::zeros(a.rows, w.cols);
    for t in 0..a.rows {
        let out_row = out.row_mut(t);
        out_row.copy_from_slice(bias.row(0));
        let a_row = a.row(t);
        for (k, &av) in a_row.iter().enumerate() {
            let w_row = w.row(k);
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o += av * wv;
            }
        }
    }
    out
}

/// dx = dy · wᵀ for w: K×M, dy: T×M.
fn matmul_wt<F: Scalar>(dy: &Tensor<F>, w: &Tensor<F>) -> Tensor<F> {
    debug_assert_eq!(dy.cols, w.cols);
    let mut out = Tensor::zeros(dy.rows, w.rows);
    for t in 0..dy.rows {
        let dy_row = dy.row(t);
        let out_row = out.row_mut(t);
        for (k, o) in out_row.iter_mut().enumerate() {
            let w_row = w.row(k);
            let mut acc = F::zero();
            for (dv, wv) in dy_row.iter().zip(w_row) {
                acc += *dv * *wv;
            }
            *o = acc;
        }
    }
    out
}

/// dw += aᵀ · dy for a: T×K, dy: T×M, dw: K×M.
fn acc_outer<F: Scalar>(dw: &mut Tensor<F>, a: &Tensor<F>, dy: &Tensor<F>) {
    debug_assert_eq!(dw.rows, a.cols);
    debug_assert_eq!(dw.cols, dy.cols);
    for t in 0..a.rows {
        let a_row = a.row(t);
        let dy_row = dy.row(t);
        for (k, &av) in a_row.iter().enumerate() {
            let dw_row = dw.row_mut(k);
            for (g, &dv) in dw_row.iter_mut().zip(dy_row) {
                *g += av * dv;
            }
        }
    }
}

/// db += column sums of dy, for db: 1×M.
fn acc_colsum<F: Scalar>(db: &mut Tensor<F>, dy: &Tensor<F>) {
    debug_assert_eq!(db.cols, dy.cols);
    let db_row = db.row_mut(0);
    for t in 0..dy.rows {
        for (g, &dv) in db_row.iter_mut().zip(dy.row(t)) {
            *g += dv;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerNorm<F> {
    gain: Tensor<F>,
    bias: Tensor<F>,
}

struct LnCache<F> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
}

fn layer_norm<F: Scalar>(p: &LayerNorm<F>, x: &Tensor<F>) -> (LnCache<F>, Tensor<F>) {
    let d = x.cols;
    let inv_d = F::of(1.0 / d as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = Tensor::zeros(x.rows, d);
    let mut out = Tensor::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    let g = p.gain.row(0);
    let b = p.bias.row(0);
    for t in 0..x.rows {
        let xr = x.row(t);
        let mut mean = F::zero();
        for &v in xr {
            mean += v;
        }
        mean *= inv_d;
        let mut var = F::zero();
        for &v in xr {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let r = (var + eps).sqrt().recip();
        inv_std.push(r);
        let xh = xhat.row_mut(t);
        let o = out.row_mut(t);
        for i in 0..d {
            let h = (xr[i] - mean) * r;
            xh[i] = h;
            o[i] = g[i] * h + b[i];
        }
    }
    (LnCache { xhat, inv_std }, out)
}

/// dx for y = g·x̂ + b: dx = r · (dx̂ − mean(dx̂) − x̂ · mean(dx̂·x̂)), where
/// dx̂ = dy·g. Accumulates gain/bias gradients into `gp`.
fn layer_norm_backward<F: Scalar>(
    p: &LayerNorm<F>,
    cache: &LnCache<F>,
    dy: &Tensor<F>,
    gp: &mut LayerNorm<F>,
) -> Tensor<F> {
    let d = dy.cols;
    let inv_d = F::of(1.0 / d as f64);
    let mut dx = Tensor::zeros(dy.rows, d);
    let g = p.gain.row(0);
    let dg = gp.gain.row_mut(0);
    let db = gp.bias.row_mut(0);
    for t in 0..dy.rows {
        let dyr = dy.row(t);
        let xh = cache.xhat.row(t);
        let r = cache.inv_std[t];
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for i in 0..d {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            let dxh = dyr[i] * g[i];
            m1 += dxh;
            m2 += dxh * xh[i];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let dxr = dx.row_mut(t);
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            dxr[i] = r * (dxh - m1 - xh[i] * m2);
        }
    }
    dx
}

fn gelu<F: Scalar>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

fn gelu_deriv<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + F::of(3.0) * a * x * x)
}

#[derive(Debug, Clone, PartialEq)]
struct Block<F> {
    ln1: LayerNorm<F>,
    w_q: Tensor<F>,
    b_q: Tensor<F>,
    w_k: Tensor<F>,
    b_k: Tensor<F>,
    w_v: Tensor<F>,
    b_v: Tensor<F>,
    w_o: Tensor<F>,
    b_o: Tensor<F>,
    ln2: LayerNorm<F>,
    w_fc: Tensor<F>,
    b_fc: Tensor<F>,
    w_proj: Tensor<F>,
    b_proj: Tensor<F>,
}

/// Full parameter set. Also serves as the gradient container: a gradient has
/// the same shape as the parameters it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLmParams<F> {
    tok_emb: Tensor<F>,
    pos_emb: Tensor<F>,
    blocks: Vec<Block<F>>,
    ln_f: LayerNorm<F>,
    w_out: Tensor<F>,
    b_out: Tensor<F>,
}

fn randn_tensor<F: Scalar>(rng: &mut ChaCha8Rng, dist: &Normal<f64>, rows: usize, cols: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(rows, cols);
    for v in &mut t.data {
        *v = F::of(dist.sample(rng));
    }
    t
}

fn unit_layer_norm<F: Scalar>(d: usize) -> LayerNorm<F> {
    let mut gain = Tensor::zeros(1, d);
    for v in &mut gain.data {
        *v = F::one();
    }
    LayerNorm { gain, bias: Tensor::zeros(1, d) }
}

impl<F: Scalar> ToyLmParams<F> {
    /// Gaussian(0, 0.02) weights, unit LayerNorm gains, zero biases. The draw
    /// order is the fixed tensor traversal order, so a seed pins every value.
    fn init(cfg: &ToyLmConfig, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, INIT_STD).expect("valid stddev");
        let d = cfg.width;
        let h = cfg.width * cfg.ffn_mult;
        let tok_emb = randn_tensor(&mut rng, &dist, vocab_size, d);
        let pos_emb = randn_tensor(&mut rng, &dist, cfg.context, d);
        let blocks = (0..cfg.depth)
            .map(|_| Block {
                ln1: unit_layer_norm(d),
                w_q: randn_tensor(&mut rng, &dist, d, d),
                b_q: Tensor::zeros(1, d),
                w_k: randn_tensor(&mut rng, &dist, d, d),
                b_k: Tensor::zeros(1, d),
                w_v: randn_tensor(&mut rng, &dist, d, d),
                b_v: Tensor::zeros(1, d),
                w_o: randn_tensor(&mut rng, &dist, d, d),
                b_o: Tensor::zeros(1, d),
                ln2: unit_layer_norm(d),
                w_fc: randn_tensor(&mut rng, &dist, d, h),
                b_fc: Tensor::zeros(1, h),
                w_proj: randn_tensor(&mut rng, &dist, h, d),
                b_proj: Tensor::zeros(1, d),
            })
            .collect();
        let ln_f = unit_layer_norm(d);
        let w_out = randn_tensor(&mut rng, &dist, d, vocab_size);
        let b_out = Tensor::zeros(1, vocab_size);
        Self { tok_emb, pos_emb, blocks, ln_f, w_out, b_out }
    }

    fn tensor_refs(&self) -> Vec<&Tensor<F>> {
        let mut v: Vec<&Tensor<F>> = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            v.extend([
                &b.ln1.gain,
                &b.ln1.bias,
                &b.w_q,
                &b.b_q,
                &b.w_k,
                &b.b_k,
                &b.w_v,
                &b.b_v,
                &b.w_o,
                &b.b_o,
                &b.ln2.gain,
                &b.ln2.bias,
                &b.w_fc,
                &b.b_fc,
                &b.w_proj,
                &b.b_proj,
            ]);
        }
        v.extend([&self.ln_f.gain, &self.ln_f.bias, &self.w_out, &self.b_out]);
        v
    }

    fn tensor_refs_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut v: Vec<&mut Tensor<F>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.extend([
                &mut b.ln1.gain,
                &mut b.ln1.bias,
                &mut b.w_q,
                &mut b.b_q,
                &mut b.w_k,
                &mut b.b_k,
                &mut b.w_v,
                &mut b.b_v,
                &mut b.w_o,
                &mut b.b_o,
                &mut b.ln2.gain,
                &mut b.ln2.bias,
                &mut b.w_fc,
                &mut b.b_fc,
                &mut b.w_proj,
                &mut b.b_proj,
            ]);
        }
        v.extend([&mut self.ln_f.gain, &mut self.ln_f.bias, &mut self.w_out, &mut self.b_out]);
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensor_refs().iter().map(|t| t.len()).sum()
    }

    /// Reads the parameter at a flat index (fixed traversal order).
    pub fn get(&self, index: usize) -> F {
        let mut i = index;
        for t in self.tensor_refs() {
            if i < t.len() {
                return t.data[i];
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn set(&mut self, index: usize, value: F) {
        let mut i = index;
        for t in self.tensor_refs_mut() {
            if i < t.len() {
                t.data[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    /// Parameter storage as a list of slices in flat traversal order. Zipping
    /// these across same-shaped structs gives elementwise optimizer updates.
    pub fn flat_slices(&self) -> Vec<&[F]> {
        self.tensor_refs().into_iter().map(|t| t.data.as_slice()).collect()
    }

    pub fn flat_slices_mut(&mut self) -> Vec<&mut [F]> {
        self.tensor_refs_mut().into_iter().map(|t| t.data.as_mut_slice()).collect()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensor_refs_mut() {
            t.data.fill(F::zero());
        }
        out
    }

    /// self += alpha · other, elementwise over the whole parameter set.
    pub fn axpy(&mut self, alpha: F, other: &Self) {
        let mine = self.tensor_refs_mut();
        let theirs = other.tensor_refs();
        debug_assert_eq!(mine.len(), theirs.len());
        for (m, o) in mine.into_iter().zip(theirs) {
            debug_assert_eq!(m.len(), o.len());
            for (mv, &ov) in m.data.iter_mut().zip(&o.data) {
                *mv += alpha * ov;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in self.tensor_refs_mut() {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    /// Flat export in traversal order, widened to f64 for checkpoints.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensor_refs() {
            out.extend(t.data.iter().map(|v| v.as_f64()));
        }
        out
    }

    pub fn load_f64(&mut self, values: &[f64]) -> Result<(), GenError> {
        let want = self.param_count();
        if values.len() != want {
            return Err(GenError::ParamCount { got: values.len(), want });
        }
        let mut i = 0;
        for t in self.tensor_refs_mut() {
            for v in &mut t.data {
                *v = F::of(values[i]);
                i += 1;
            }
        }
        Ok(())
    }
}

struct BlockCache<F> {
    ln1: LnCache<F>,
    a1: Tensor<F>,
    q: Tensor<F>,
    k: Tensor<F>,
    v: Tensor<F>,
    /// Per-head causal attention probabilities; entries above the diagonal
    /// stay zero.
    attn: Vec<Tensor<F>>,
    o_cat: Tensor<F>,
    ln2: LnCache<F>,
    a2: Tensor<F>,
    h_pre: Tensor<F>,
    h_act: Tensor<F>,
}

struct ForwardCache<F> {
    tokens: Vec<usize>,
    blocks: Vec<BlockCache<F>>,
    lnf: LnCache<F>,
    af: Tensor<F>,
    logits: Tensor<F>,
}

/// Incremental decoding state: per-block appended key/value rows.
pub struct DecodeState<F> {
    k: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    pos: usize,
}

fn log_softmax_at<F: Scalar>(row: &[F], idx: usize) -> F {
    let mut max = F::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut denom = F::zero();
    for &v in row {
        denom += (v - max).exp();
    }
    row[idx] - max - denom.ln()
}

fn argmax<F: Scalar>(logits: &[F]) -> usize {
    let mut best = 0;
    let mut best_v = logits[0];
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Categorical draw from softmax(logits / temperature). Accumulation runs in
/// f64 so the draw is identical for f32 and f64 models with equal logits.
fn sample_from_logits<F: Scalar>(logits: &[F], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let inv_t = 1.0 / temperature;
    let scaled: Vec<f64> = logits.iter().map(|v| v.as_f64() * inv_t).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, e) in exps.iter().enumerate() {
        r -= e;
        if r <= 0.0 {
            return i;
        }
    }
    exps.len() - 1
}

#[derive(Debug, Clone)]
pub struct ToyLm<F> {
    config: ToyLmConfig,
    vocab: Vocab,
    params: ToyLmParams<F>,
}

impl<F: Scalar> ToyLm<F> {
    pub fn new(config: ToyLmConfig, vocab: Vocab, seed: u64) -> Result<Self, GenError> {
        config.validate()?;
        let params = ToyLmParams::init(&config, vocab.size(), seed);
        Ok(Self { config, vocab, params })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ToyLmParams<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ToyLmParams<F> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn param(&self, index: usize) -> F {
        self.params.get(index)
    }

    pub fn set_param(&mut self, index: usize, value: F) {
        self.params.set(index, value);
    }

    /// Tokens for prompt followed by completion, plus the index where the
    /// completion starts. Char-level encoding concatenates exactly.
    pub fn encode_pair(&self, prompt: &str, completion: &str) -> (Vec<usize>, usize) {
        let mut tokens = self.vocab.encode(prompt);
        let start = tokens.len();
        tokens.extend(self.vocab.encode(completion));
        (tokens, start)
    }

    fn forward(&self, tokens: &[usize]) -> Result<ForwardCache<F>, GenError> {
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(GenError::EmptyPrompt);
        }
        if t_len > self.config.context {
            return Err(GenError::SequenceTooLong { len: t_len, max: self.config.context });
        }
        let d = self.config.width;
        let p = &self.params;
        let mut x = Tensor::zeros(t_len, d);
        for (t, &tok) in tokens.iter().enumerate() {
            debug_assert!(tok < self.vocab.size());
            let xr = x.row_mut(t);
            for ((o, &e), &pe) in xr.iter_mut().zip(p.tok_emb.row(tok)).zip(p.pos_emb.row(t)) {
                *o = e + pe;
            }
        }
        let mut blocks = Vec::with_capacity(p.blocks.len());
        for b in &p.blocks {
            let (cache, x_next) = self.block_forward(b, &x);
            blocks.push(cache);
            x = x_next;
        }
        let (lnf, af) = layer_norm(&p.ln_f, &x);
        let logits = affine(&af, &p.w_out, &p.b_out);
        Ok(ForwardCache { tokens: tokens.to_vec(), blocks, lnf, af, logits })
    }

    fn block_forward(&self, b: &Block<F>, x: &Tensor<F>) -> (BlockCache<F>, Tensor<F>) {
        let t_len = x.rows;
        let d = self.config.width;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let (ln1, a1) = layer_norm(&b.ln1, x);
        let q = affine(&a1, &b.w_q, &b.b_q);
        let k = affine(&a1, &b.w_k, &b.b_k);
        let v = affine(&a1, &b.w_v, &b.b_v);

        let mut attn: Vec<Tensor<F>> = (0..heads).map(|_| Tensor::zeros(t_len, t_len)).collect();
        let mut o_cat = Tensor::zeros(t_len, d);
        let mut scores = vec![F::zero(); t_len];
        for (h, probs) in attn.iter_mut().enumerate() {
            let lo = h * dh;
            for t in 0..t_len {
                let qr = &q.row(t)[lo..lo + dh];
                let mut max_s = F::neg_infinity();
                for u in 0..=t {
                    let kr = &k.row(u)[lo..lo + dh];
                    let mut s = F::zero();
                    for i in 0..dh {
                        s += qr[i] * kr[i];
                    }
                    s *= scale;
                    scores[u] = s;
                    if s > max_s {
                        max_s = s;
                    }
                }
                let mut denom = F::zero();
                for sc in scores.iter_mut().take(t + 1) {
                    let e = (*sc - max_s).exp();
                    *sc = e;
                    denom += e;
                }
                let inv = denom.recip();
                let prow = probs.row_mut(t);
                for u in 0..=t {
                    prow[u] = scores[u] * inv;
                }
                let orow = o_cat.row_mut(t);
                let orow = &mut orow[lo..lo + dh];
                for u in 0..=t {
                    let pw = prow[u];
                    let vr = &v.row(u)[lo..lo + dh];
                    for i in 0..dh {
                        orow[i] += pw * vr[i];
                    }
                }
            }
        }

        let mut x_mid = affine(&o_cat, &b.w_o, &b.b_o);
        for (m, &xv) in x_mid.data.iter_mut().zip(&x.data) {
            *m += xv;
        }
        let (ln2, a2) = layer_norm(&b.ln2, &x_mid);
        let h_pre = affine(&a2, &b.w_fc, &b.b_fc);
        let mut h_act = h_pre.clone();
        for hv in &mut h_act.data {
            *hv = gelu(*hv);
        }
        let mut x_out = affine(&h_act, &b.w_proj, &b.b_proj);
        for (m, &xv) in x_out.data.iter_mut().zip(&x_mid.data) {
            *m += xv;
        }
        (BlockCache { ln1, a1, q, k, v, attn, o_cat, ln2, a2, h_pre, h_act }, x_out)
    }

    /// Parameter gradient for a scalar objective with the given logit
    /// gradient. Walks the forward cache in reverse.
    fn backward(&self, cache: &ForwardCache<F>, dlogits: &Tensor<F>) -> ToyLmParams<F> {
        let p = &self.params;
        let mut g = p.zeros_like();

        acc_outer(&mut g.w_out, &cache.af, dlogits);
        acc_colsum(&mut g.b_out, dlogits);
        let daf = matmul_wt(dlogits, &p.w_out);
        let mut dx = layer_norm_backward(&p.ln_f, &cache.lnf, &daf, &mut g.ln_f);

        for bi in (0..p.blocks.len()).rev() {
            dx = self.block_backward(&p.blocks[bi], &cache.blocks[bi], &dx, &mut g.blocks[bi]);
        }

        for (t, &tok) in cache.tokens.iter().enumerate() {
            let dxr = dx.row(t);
            for (gv, &dv) in g.tok_emb.row_mut(tok).iter_mut().zip(dxr) {
                *gv += dv;
            }
            for (gv, &dv) in g.pos_emb.row_mut(t).iter_mut().zip(dxr) {
                *gv += dv;
            }
        }
        g
    }

    fn block_backward(
        &self,
        b: &Block<F>,
        bc: &BlockCache<F>,
        dx_out: &Tensor<F>,
        g: &mut Block<F>,
    ) -> Tensor<F> {
        let t_len = dx_out.rows;
        let d = self.config.width;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        // FFN half: x_out = x_mid + gelu(ln2(x_mid)·w_fc + b_fc)·w_proj + b_proj.
        acc_outer(&mut g.w_proj, &bc.h_act, dx_out);
        acc_colsum(&mut g.b_proj, dx_out);
        let mut dh_pre = matmul_wt(dx_out, &b.w_proj);
        for (dv, &hp) in dh_pre.data.iter_mut().zip(&bc.h_pre.data) {
            *dv *= gelu_deriv(hp);
        }
        acc_outer(&mut g.w_fc, &bc.a2, &dh_pre);
        acc_colsum(&mut g.b_fc, &dh_pre);
        let da2 = matmul_wt(&dh_pre, &b.w_fc);
        let mut dx_mid = layer_norm_backward(&b.ln2, &bc.ln2, &da2, &mut g.ln2);
        for (m, &dv) in dx_mid.data.iter_mut().zip(&dx_out.data) {
            *m += dv;
        }

        // Attention half: x_mid = x_in + concat_heads(attn)·w_o + b_o.
        acc_outer(&mut g.w_o, &bc.o_cat, &dx_mid);
        acc_colsum(&mut g.b_o, &dx_mid);
        let do_cat = matmul_wt(&dx_mid, &b.w_o);

        let mut dq = Tensor::zeros(t_len, d);
        let mut dk = Tensor::zeros(t_len, d);
        let mut dval = Tensor::zeros(t_len, d);
        let mut dp = vec![F::zero(); t_len];
        let mut ds = vec![F::zero(); t_len];
        for (h, probs) in bc.attn.iter().enumerate() {
            let lo = h * dh;
            for t in 0..t_len {
                let dor = &do_cat.row(t)[lo..lo + dh];
                let prow = probs.row(t);
                for u in 0..=t {
                    let vr = &bc.v.row(u)[lo..lo + dh];
                    let mut acc = F::zero();
                    for i in 0..dh {
                        acc += dor[i] * vr[i];
                    }
                    dp[u] = acc;
                    let pw = prow[u];
                    let dvr = dval.row_mut(u);
                    let dvr = &mut dvr[lo..lo + dh];
                    for i in 0..dh {
                        dvr[i] += pw * dor[i];
                    }
                }
                // Softmax row backward: ds = p ∘ (dp − p·dp).
                let mut pdot = F::zero();
                for u in 0..=t {
                    pdot += prow[u] * dp[u];
                }
                for u in 0..=t {
                    ds[u] = prow[u] * (dp[u] - pdot);
                }
                let dqr = dq.row_mut(t);
                let dqr = &mut dqr[lo..lo + dh];
                for u in 0..=t {
                    let sv = ds[u] * scale;
                    let kr = &bc.k.row(u)[lo..lo + dh];
                    for i in 0..dh {
                        dqr[i] += sv * kr[i];
                    }
                }
                let qr = &bc.q.row(t)[lo..lo + dh];
                for u in 0..=t {
                    let sv = ds[u] * scale;
                    let dkr = dk.row_mut(u);
                    let dkr = &mut dkr[lo..lo + dh];
                    for i in 0..dh {
                        dkr[i] += sv * qr[i];
                    }
                }
            }
        }

        acc_outer(&mut g.w_q, &bc.a1, &dq);
        acc_colsum(&mut g.b_q, &dq);
        acc_outer(&mut g.w_k, &bc.a1, &dk);
        acc_colsum(&mut g.b_k, &dk);
        acc_outer(&mut g.w_v, &bc.a1, &dval);
        acc_colsum(&mut g.b_v, &dval);
        let mut da1 = matmul_wt(&dq, &b.w_q);
        let da1_k = matmul_wt(&dk, &b.w_k);
        let da1_v = matmul_wt(&dval, &b.w_v);
        for ((a, &kv), &vv) in da1.data.iter_mut().zip(&da1_k.data).zip(&da1_v.data) {
            *a += kv + vv;
        }
        let mut dx_in = layer_norm_backward(&b.ln1, &bc.ln1, &da1, &mut g.ln1);
        for (m, &dv) in dx_in.data.iter_mut().zip(&dx_mid.data) {
            *m += dv;
        }
        dx_in
    }

    /// Sum over positions `start..tokens.len()` of log p(tokens[i] | prefix).
    /// `start` must be at least 1: position 0 has no conditioning context.
    pub fn span_logprob(&self, tokens: &[usize], start: usize) -> Result<F, GenError> {
        assert!(start >= 1 && start <= tokens.len(), "span start out of range");
        if start == tokens.len() {
            return Ok(F::zero());
        }
        let cache = self.forward(tokens)?;
        let mut total = F::zero();
        for i in start..tokens.len() {
            total += log_softmax_at(cache.logits.row(i - 1), tokens[i]);
        }
        Ok(total)
    }

    /// `span_logprob` plus its gradient with respect to every parameter.
    /// At each scored position the logit gradient is onehot(target) − softmax.
    pub fn span_logprob_grad(&self, tokens: &[usize], start: usize) -> Result<(F, ToyLmParams<F>), GenError> {
        assert!(start >= 1 && start <= tokens.len(), "span start out of range");
        if start == tokens.len() {
            return Ok((F::zero(), self.params.zeros_like()));
        }
        let cache = self.forward(tokens)?;
        let mut dlogits = Tensor::zeros(cache.logits.rows, cache.logits.cols);
        let mut total = F::zero();
        for i in start..tokens.len() {
            let row = cache.logits.row(i - 1);
            let mut max = F::neg_infinity();
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut denom = F::zero();
            for &v in row {
                denom += (v - max).exp();
            }
            let inv = denom.recip();
            let drow = dlogits.row_mut(i - 1);
            for (dv, &lv) in drow.iter_mut().zip(row) {
                *dv = -(lv - max).exp() * inv;
            }
            let target = tokens[i];
            drow[target] += F::one();
            total += row[target] - max - denom.ln();
        }
        let grad = self.backward(&cache, &dlogits);
        Ok((total, grad))
    }

    /// Next-token distribution after the given context, in f64. Diagnostic
    /// surface for the normalization invariant.
    pub fn next_token_probs(&self, tokens: &[usize]) -> Result<Vec<f64>, GenError> {
        let cache = self.forward(tokens)?;
        let row = cache.logits.row(tokens.len() - 1);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }

    pub fn new_decode_state(&self) -> DecodeState<F> {
        DecodeState {
            k: vec![Vec::new(); self.config.depth],
            v: vec![Vec::new(); self.config.depth],
            pos: 0,
        }
    }

    /// Consumes one token at the current position and returns the next-token
    /// logits. Keys and values are appended to the state, so a sequence costs
    /// O(T²) total instead of O(T³) for repeated full forwards.
    pub fn step(&self, st: &mut DecodeState<F>, token: usize) -> Result<Vec<F>, GenError> {
        if st.pos >= self.config.context {
            return Err(GenError::SequenceTooLong { len: st.pos + 1, max: self.config.context });
        }
        let d = self.config.width;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let p = &self.params;
        let t = st.pos;

        let mut x: Vec<F> = p.tok_emb.row(token).to_vec();
        for (xv, &pe) in x.iter_mut().zip(p.pos_emb.row(t)) {
            *xv += pe;
        }
        let n = t + 1;
        let mut scores = vec![F::zero(); n];
        for (bi, b) in p.blocks.iter().enumerate() {
            let a1 = ln_vec(&b.ln1, &x);
            let q = affine_vec(&a1, &b.w_q, &b.b_q);
            let k = affine_vec(&a1, &b.w_k, &b.b_k);
            let v = affine_vec(&a1, &b.w_v, &b.b_v);
            st.k[bi].extend_from_slice(&k);
            st.v[bi].extend_from_slice(&v);
            let kc = &st.k[bi];
            let vc = &st.v[bi];
            let mut o = vec![F::zero(); d];
            for h in 0..heads {
                let lo = h * dh;
                let qh = &q[lo..lo + dh];
                let mut max_s = F::neg_infinity();
                for (u, sc) in scores.iter_mut().enumerate() {
                    let kr = &kc[u * d + lo..u * d + lo + dh];
                    let mut s = F::zero();
                    for i in 0..dh {
                        s += qh[i] * kr[i];
                    }
                    s *= scale;
                    *sc = s;
                    if s > max_s {
                        max_s = s;
                    }
                }
                let mut denom = F::zero();
                for sc in scores.iter_mut() {
                    let e = (*sc - max_s).exp();
                    *sc = e;
                    denom += e;
                }
                let inv = denom.recip();
                let oh = &mut o[lo..lo + dh];
                for (u, sc) in scores.iter().enumerate() {
                    let pw = *sc * inv;
                    let vr = &vc[u * d + lo..u * d + lo + dh];
                    for i in 0..dh {
                        oh[i] += pw * vr[i];
                    }
                }
            }
            let att = affine_vec(&o, &b.w_o, &b.b_o);
            for (xv, av) in x.iter_mut().zip(att) {
                *xv += av;
            }
            let a2 = ln_vec(&b.ln2, &x);
            let mut h_pre = affine_vec(&a2, &b.w_fc, &b.b_fc);
            for hv in &mut h_pre {
                *hv = gelu(*hv);
            }
            let f = affine_vec(&h_pre, &b.w_proj, &b.b_proj);
            for (xv, fv) in x.iter_mut().zip(f) {
                *xv += fv;
            }
        }
        let xf = ln_vec(&p.ln_f, &x);
        let logits = affine_vec(&xf, &p.w_out, &p.b_out);
        st.pos += 1;
        Ok(logits)
    }

    /// Samples a completion. Generation stops at EOS, at `max_new_tokens`, or
    /// when the context window fills. Greedy mode never touches the RNG.
    pub fn generate(
        &self,
        prompt: &str,
        decoding: Decoding,
        seed: u64,
        max_new_tokens: usize,
    ) -> Result<String, GenError> {
        if let Decoding::Temperature(t) = decoding {
            if !(t.is_finite() && t > 0.0) {
                return Err(GenError::InvalidTemperature(t));
            }
        }
        let prompt_tokens = self.vocab.encode(prompt);
        if prompt_tokens.is_empty() {
            return Err(GenError::EmptyPrompt);
        }
        if prompt_tokens.len() >= self.config.context {
            return Err(GenError::SequenceTooLong {
                len: prompt_tokens.len(),
                max: self.config.context,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = self.new_decode_state();
        let mut logits = Vec::new();
        for &tok in &prompt_tokens {
            logits = self.step(&mut state, tok)?;
        }
        let mut out_tokens = Vec::new();
        for _ in 0..max_new_tokens {
            let next = match decoding {
                Decoding::Greedy => argmax(&logits),
                Decoding::Temperature(t) => sample_from_logits(&logits, t, &mut rng),
            };
            if next == EOS {
                break;
            }
            out_tokens.push(next);
            if state.pos == self.config.context {
                // The token just sampled was scored from the last in-window
                // position; there is no slot left to condition on it.
                break;
            }
            logits = self.step(&mut state, next)?;
        }
        Ok(self.vocab.decode(&out_tokens))
    }
}

fn ln_vec<F: Scalar>(p: &LayerNorm<F>, x: &[F]) -> Vec<F> {
    let d = x.len();
    let inv_d = F::of(1.0 / d as f64);
    let eps = F::of(LN_EPS);
    let mut mean = F::zero();
    for &v in x {
        mean += v;
    }
    mean *= inv_d;
    let mut var = F::zero();
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var *= inv_d;
    let r = (var + eps).sqrt().recip();
    let g = p.gain.row(0);
    let b = p.bias.row(0);
    (0..d).map(|i| g[i] * (x[i] - mean) * r + b[i]).collect()
}

fn affine_vec<F: Scalar>(a: &[F], w: &Tensor<F>, bias: &Tensor<F>) -> Vec<F> {
    debug_assert_eq!(a.len(), w.rows);
    let mut out = bias.row(0).to_vec();
    for (k, &av) in a.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(k)) {
            *o += av * wv;
        }
    }
    out
}

impl<F: Scalar> PolicyBackend for ToyLm<F> {
    fn sample(&self, prompt: &str, decoding: Decoding, seed: u64, max_new_tokens: usize) -> Result<String, GenError> {
        self.generate(prompt, decoding, seed, max_new_tokens)
    }

    fn sequence_logprob(&self, prompt: &str, completion: &str) -> Result<f64, GenError> {
        let (tokens, start) = self.encode_pair(prompt, completion);
        if start == 0 {
            return Err(GenError::EmptyPrompt);
        }
        if start == tokens.len() {
            return Ok(0.0);
        }
        Ok(self.span_logprob(&tokens, start)?.as_f64())
    }

    fn concurrency(&self) -> BackendConcurrency {
        // Inference methods take &self and hold no interior mutability.
        BackendConcurrency::ConcurrentReadOnly
    }
}

//! Unified Transformer encoder with three tokenization/attention backbones.
//!
//! * `Patch`: non-overlapping temporal patches become tokens (full attention).
//! * `ProbSparse`: every time step is a token; only the top-u "active" queries
//!   attend, the rest receive the mean of the values.
//! * `Decomp`: the moving-average trend is removed and only the seasonal
//!   residual is encoded; the trend is handed back for a separate linear head.
//!
//! All variants share the post-norm layer `attention → add&norm → FFN → add&norm`
//! and average-pool the final token states into the latent vector.
//!
//! This module is the straightforward single-window implementation. Training
//! uses the batched tape in [`crate::autodiff`], which is checked against it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LEARNABLE_PE_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Patch,
    ProbSparse,
    Decomp,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Patch, Variant::ProbSparse, Variant::Decomp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Patch => "patch",
            Variant::ProbSparse => "probsparse",
            Variant::Decomp => "decomp",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "patch" | "patchtst" => Ok(Variant::Patch),
            "probsparse" | "informer" => Ok(Variant::ProbSparse),
            "decomp" | "autoformer" => Ok(Variant::Decomp),
            other => Err(Error::Config(format!("unknown encoder variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeKind {
    Sinusoidal,
    Learnable,
}

impl std::str::FromStr for PeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sinusoidal" | "fixed" => Ok(PeKind::Sinusoidal),
            "learnable" | "learned" => Ok(PeKind::Learnable),
            other => Err(Error::Config(format!("unknown positional encoding {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    /// Patch length `p` (patch variant only).
    pub patch_len: usize,
    pub pe_kind: PeKind,
    /// Moving-average kernel (decomp variant only); odd.
    pub ma_kernel: usize,
    /// Sampling factor `c` in `u = ceil(c · ln(n + 1))` (probsparse variant only).
    pub probsparse_factor: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Patch,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 64,
            patch_len: 16,
            pe_kind: PeKind::Sinusoidal,
            ma_kernel: 5,
            probsparse_factor: 5.0,
        }
    }
}

impl EncoderConfig {
    /// Checks the configuration against a context length `P`.
    pub fn validate(&self, context_len: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_width == 0 || context_len == 0 {
            return bad("d_model, n_heads, ffn_width and the context length must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        match self.variant {
            Variant::Patch => {
                if self.patch_len == 0 || context_len % self.patch_len != 0 {
                    return bad(format!(
                        "context length {context_len} is not divisible by patch length {}",
                        self.patch_len
                    ));
                }
            }
            Variant::Decomp => {
                if self.ma_kernel == 0 || self.ma_kernel % 2 == 0 {
                    return bad(format!("moving-average kernel must be odd, got {}", self.ma_kernel));
                }
                if self.ma_kernel > context_len {
                    return bad(format!(
                        "moving-average kernel {} exceeds context length {context_len}",
                        self.ma_kernel
                    ));
                }
            }
            Variant::ProbSparse => {
                if !(self.probsparse_factor > 0.0 && self.probsparse_factor.is_finite()) {
                    return bad(format!(
                        "probsparse factor must be positive, got {}",
                        self.probsparse_factor
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn token_count(&self, context_len: usize) -> usize {
        match self.variant {
            Variant::Patch => context_len / self.patch_len,
            _ => context_len,
        }
    }

    pub fn token_width(&self, channels: usize) -> usize {
        match self.variant {
            Variant::Patch => self.patch_len * channels,
            _ => channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln1_gamma: Vector,
    pub ln1_beta: Vector,
    pub ffn_w1: Matrix,
    pub ffn_b1: Vector,
    pub ffn_w2: Matrix,
    pub ffn_b2: Vector,
    pub ln2_gamma: Vector,
    pub ln2_beta: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// Token embedding, `token_width × d_model`.
    pub embed_w: Matrix,
    pub embed_b: Vector,
    /// Learnable positional table, `tokens × d_model`, when `pe_kind = Learnable`.
    pub pos: Option<Matrix>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        context_len: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(context_len)?;
        let width = cfg.token_width(channels);
        let dm = cfg.d_model;
        let ffn = cfg.ffn_width;
        let embed_w = Matrix::gaussian(width, dm, 1.0 / (width as f64).sqrt(), rng);
        let pos = match cfg.pe_kind {
            PeKind::Learnable => Some(Matrix::gaussian(
                cfg.token_count(context_len),
                dm,
                LEARNABLE_PE_STD,
                rng,
            )),
            PeKind::Sinusoidal => None,
        };
        let att = 1.0 / (dm as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                wq: Matrix::gaussian(dm, dm, att, rng),
                wk: Matrix::gaussian(dm, dm, att, rng),
                wv: Matrix::gaussian(dm, dm, att, rng),
                wo: Matrix::gaussian(dm, dm, att, rng),
                ln1_gamma: Vector::from_raw(vec![1.0; dm]),
                ln1_beta: Vector::zeros(dm),
                ffn_w1: Matrix::gaussian(dm, ffn, att, rng),
                ffn_b1: Vector::zeros(ffn),
                ffn_w2: Matrix::gaussian(ffn, dm, 1.0 / (ffn as f64).sqrt(), rng),
                ffn_b2: Vector::zeros(dm),
                ln2_gamma: Vector::from_raw(vec![1.0; dm]),
                ln2_beta: Vector::zeros(dm),
            })
            .collect();
        Ok(Self {
            embed_w,
            embed_b: Vector::zeros(dm),
            pos,
            layers,
        })
    }

    /// Named parameter slices in a fixed order, with their shapes.
    pub fn named(&self) -> Vec<(String, (usize, usize), &[f64])> {
        let mut out: Vec<(String, (usize, usize), &[f64])> = vec![
            ("encoder.embed.weight".into(), self.embed_w.shape(), self.embed_w.as_slice()),
            ("encoder.embed.bias".into(), (1, self.embed_b.len()), self.embed_b.as_slice()),
        ];
        if let Some(pos) = &self.pos {
            out.push(("encoder.pos".into(), pos.shape(), pos.as_slice()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("encoder.layers.{i}.{s}");
            out.push((p("attn.wq"), l.wq.shape(), l.wq.as_slice()));
            out.push((p("attn.wk"), l.wk.shape(), l.wk.as_slice()));
            out.push((p("attn.wv"), l.wv.shape(), l.wv.as_slice()));
            out.push((p("attn.wo"), l.wo.shape(), l.wo.as_slice()));
            out.push((p("ln1.gamma"), (1, l.ln1_gamma.len()), l.ln1_gamma.as_slice()));
            out.push((p("ln1.beta"), (1, l.ln1_beta.len()), l.ln1_beta.as_slice()));
            out.push((p("ffn.w1"), l.ffn_w1.shape(), l.ffn_w1.as_slice()));
            out.push((p("ffn.b1"), (1, l.ffn_b1.len()), l.ffn_b1.as_slice()));
            out.push((p("ffn.w2"), l.ffn_w2.shape(), l.ffn_w2.as_slice()));
            out.push((p("ffn.b2"), (1, l.ffn_b2.len()), l.ffn_b2.as_slice()));
            out.push((p("ln2.gamma"), (1, l.ln2_gamma.len()), l.ln2_gamma.as_slice()));
            out.push((p("ln2.beta"), (1, l.ln2_beta.len()), l.ln2_beta.as_slice()));
        }
        out
    }

    /// Mutable counterpart of [`EncoderParams::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("encoder.embed.weight".into(), self.embed_w.as_mut_slice()),
            ("encoder.embed.bias".into(), self.embed_b.as_mut_slice()),
        ];
        if let Some(pos) = &mut self.pos {
            out.push(("encoder.pos".into(), pos.as_mut_slice()));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("encoder.layers.{i}.{s}");
            out.push((p("attn.wq"), l.wq.as_mut_slice()));
            out.push((p("attn.wk"), l.wk.as_mut_slice()));
            out.push((p("attn.wv"), l.wv.as_mut_slice()));
            out.push((p("attn.wo"), l.wo.as_mut_slice()));
            out.push((p("ln1.gamma"), l.ln1_gamma.as_mut_slice()));
            out.push((p("ln1.beta"), l.ln1_beta.as_mut_slice()));
            out.push((p("ffn.w1"), l.ffn_w1.as_mut_slice()));
            out.push((p("ffn.b1"), l.ffn_b1.as_mut_slice()));
            out.push((p("ffn.w2"), l.ffn_w2.as_mut_slice()));
            out.push((p("ffn.b2"), l.ffn_b2.as_mut_slice()));
            out.push((p("ln2.gamma"), l.ln2_gamma.as_mut_slice()));
            out.push((p("ln2.beta"), l.ln2_beta.as_mut_slice()));
        }
        out
    }
}

/// Fixed sinusoidal table: `(pos, 2k) = sin(pos / 10000^(2k/d))`, `(pos, 2k+1) = cos(…)`.
pub fn sinusoidal_pe(length: usize, d_model: usize) -> Matrix {
    Matrix::from_fn(length, d_model, |pos, i| {
        let pair = (i / 2) * 2;
        let angle = pos as f64 / 10000f64.powf(pair as f64 / d_model as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Splits a `P×d` window into `P/p` tokens; token `n` is time steps
/// `[n·p, (n+1)·p)` flattened time-major (all channels of a step are adjacent).
pub fn patchify(x: &Matrix, p: usize) -> Result<Matrix> {
    let (len, d) = x.shape();
    if p == 0 || len % p != 0 {
        return Err(Error::Config(format!(
            "window length {len} is not divisible by patch length {p}"
        )));
    }
    // row-major storage already lays out consecutive steps contiguously
    Matrix::new(len / p, p * d, x.as_slice().to_vec())
}

/// Centered moving average per channel with replicate padding; output has the
/// input's shape. Each entry is computed as the center value plus the mean
/// deviation of its window, so a locally constant stretch is reproduced exactly.
pub fn moving_average(x: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Config(format!("moving-average kernel must be odd, got {k}")));
    }
    let (len, d) = x.shape();
    if k > len {
        return Err(Error::Config(format!(
            "moving-average kernel {k} exceeds series length {len}"
        )));
    }
    let half = (k / 2) as isize;
    let last = len as isize - 1;
    Ok(Matrix::from_fn(len, d, |t, c| {
        let center = x[(t, c)];
        let mut dev = 0.0;
        for j in -half..=half {
            let idx = (t as isize + j).clamp(0, last) as usize;
            dev += x[(idx, c)] - center;
        }
        center + dev / k as f64
    }))
}

/// Trend/seasonal split: `trend = moving_average(x, k)`, `seasonal = x − trend`.
pub fn decompose(x: &Matrix, k: usize) -> Result<(Matrix, Matrix)> {
    let trend = moving_average(x, k)?;
    let seasonal = x.sub(&trend)?;
    Ok((trend, seasonal))
}

fn check_qkv(q: &Matrix, k: &Matrix, v: Option<&Matrix>) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::shape("attention", format!("key width {}", q.cols()), k.cols()));
    }
    if let Some(v) = v {
        if v.rows() != k.rows() {
            return Err(Error::shape("attention", format!("{} value rows", k.rows()), v.rows()));
        }
    }
    Ok(())
}

/// Scaled scores `q·kᵀ / √(head width)`.
pub fn attention_scores(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    check_qkv(q, k, None)?;
    let scale = 1.0 / (q.cols().max(1) as f64).sqrt();
    Ok(q.matmul_t(k)?.scale(scale))
}

/// Row-wise softmax of the scaled scores.
pub fn attention_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    let mut s = attention_scores(q, k)?;
    for r in 0..s.rows() {
        softmax_in_place(s.row_mut(r));
    }
    Ok(s)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn full_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_qkv(q, k, Some(v))?;
    attention_weights(q, k)?.matmul(v)
}

/// Query sparsity measure `M(qᵢ) = maxⱼ αᵢⱼ − meanⱼ αᵢⱼ` on the scaled scores.
pub fn probsparse_scores(q: &Matrix, k: &Matrix) -> Result<Vector> {
    let s = attention_scores(q, k)?;
    Ok(Vector::from_raw(
        (0..s.rows()).map(|r| sparsity_measure(s.row(r))).collect(),
    ))
}

pub(crate) fn sparsity_measure(scores: &[f64]) -> f64 {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    (max - mean).max(0.0)
}

/// Number of active queries, `min(n, ceil(c · ln(n + 1)))`.
pub fn active_query_count(tokens: usize, factor: f64) -> usize {
    let u = (factor * ((tokens + 1) as f64).ln()).ceil();
    (u.max(0.0) as usize).min(tokens)
}

/// Indices of the `u` queries with the largest sparsity measure; ties go to
/// the lower index. Returned in ranking order.
pub fn select_active_queries(measure: &[f64], u: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..measure.len()).collect();
    order.sort_by(|&a, &b| measure[b].total_cmp(&measure[a]).then(a.cmp(&b)));
    order.truncate(u);
    order
}

/// ProbSparse attention: active queries get full attention, the others the
/// column mean of `v`.
pub fn probsparse_attention(q: &Matrix, k: &Matrix, v: &Matrix, factor: f64) -> Result<Matrix> {
    check_qkv(q, k, Some(v))?;
    let n = q.rows();
    let u = active_query_count(n, factor);
    let measure = probsparse_scores(q, k)?;
    let selected = select_active_queries(measure.as_slice(), u);
    let q_active = Matrix::from_fn(selected.len(), q.cols(), |r, c| q[(selected[r], c)]);
    let attended = full_attention(&q_active, k, v)?;

    let mean_v = v.column_means();
    let mut out = Matrix::from_fn(n, v.cols(), |_, c| mean_v[c]);
    for (r, &i) in selected.iter().enumerate() {
        out.row_mut(i).copy_from_slice(attended.row(r));
    }
    Ok(out)
}

pub fn layer_norm(x: &Matrix, gamma: &Vector, beta: &Vector) -> Matrix {
    let n = x.cols() as f64;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[c] + beta[c];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU, written as `x * sigmoid(2u)` since `1 + tanh(u) = 2 sigmoid(2u)`.
pub fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + 0.044715 * x * x * x)).exp())
}

/// GELU value and derivative sharing one `exp`.
pub(crate) fn gelu_with_grad(x: f64) -> (f64, f64) {
    let s = gelu_gate(x);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (x * s, s + 2.0 * x * s * (1.0 - s) * dinner)
}

fn add_row_bias(m: &mut Matrix, bias: &Vector) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias.as_slice()) {
            *v += b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoded {
    /// Final token states, `tokens × d_model`.
    pub tokens: Matrix,
    /// Average-pooled latent.
    pub z: Vector,
    /// Moving-average trend of the window (decomp variant only).
    pub trend: Option<Matrix>,
}

/// Encodes one `P×d` window.
pub fn encode(x: &Matrix, cfg: &EncoderConfig, params: &EncoderParams) -> Result<Encoded> {
    let (context_len, channels) = x.shape();
    cfg.validate(context_len)?;
    if cfg.token_width(channels) != params.embed_w.rows() {
        return Err(Error::shape(
            "encode input",
            format!("token width {}", params.embed_w.rows()),
            cfg.token_width(channels),
        ));
    }
    if params.layers.len() != cfg.n_layers {
        return Err(Error::shape("encode layers", cfg.n_layers, params.layers.len()));
    }

    let (input, trend) = match cfg.variant {
        Variant::Decomp => {
            let (trend, seasonal) = decompose(x, cfg.ma_kernel)?;
            (seasonal, Some(trend))
        }
        _ => (x.clone(), None),
    };
    let tokens = match cfg.variant {
        Variant::Patch => patchify(&input, cfg.patch_len)?,
        _ => input,
    };
    let n_tokens = tokens.rows();

    let mut h = tokens.matmul(&params.embed_w)?;
    add_row_bias(&mut h, &params.embed_b);
    let pe = match (&params.pos, cfg.pe_kind) {
        (Some(pos), PeKind::Learnable) => {
            if pos.shape() != (n_tokens, cfg.d_model) {
                return Err(Error::shape(
                    "learnable positional table",
                    format!("{n_tokens}x{}", cfg.d_model),
                    format!("{}x{}", pos.rows(), pos.cols()),
                ));
            }
            pos.clone()
        }
        (None, PeKind::Sinusoidal) => sinusoidal_pe(n_tokens, cfg.d_model),
        _ => return Err(Error::Config("positional encoding kind does not match parameters".into())),
    };
    h = h.add(&pe)?;

    for layer in &params.layers {
        h = encoder_layer(&h, layer, cfg)?;
    }
    let z = h.column_means();
    Ok(Encoded { tokens: h, z, trend })
}

fn encoder_layer(h: &Matrix, l: &LayerParams, cfg: &EncoderConfig) -> Result<Matrix> {
    let q = h.matmul(&l.wq)?;
    let k = h.matmul(&l.wk)?;
    let v = h.matmul(&l.wv)?;
    let dh = cfg.head_dim();
    let mut heads = Matrix::zeros(h.rows(), cfg.d_model);
    for head in 0..cfg.n_heads {
        let (qh, kh, vh) = (
            q.column_block(head * dh, dh),
            k.column_block(head * dh, dh),
            v.column_block(head * dh, dh),
        );
        let out = match cfg.variant {
            Variant::ProbSparse => probsparse_attention(&qh, &kh, &vh, cfg.probsparse_factor)?,
            _ => full_attention(&qh, &kh, &vh)?,
        };
        for r in 0..out.rows() {
            heads.row_mut(r)[head * dh..(head + 1) * dh].copy_from_slice(out.row(r));
        }
    }
    let attn = heads.matmul(&l.wo)?;
    let h1 = layer_norm(&h.add(&attn)?, &l.ln1_gamma, &l.ln1_beta);
    let mut f = h1.matmul(&l.ffn_w1)?;
    add_row_bias(&mut f, &l.ffn_b1);
    let f = f.map(gelu);
    let mut f = f.matmul(&l.ffn_w2)?;
    add_row_bias(&mut f, &l.ffn_b2);
    Ok(layer_norm(&h1.add(&f)?, &l.ln2_gamma, &l.ln2_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(values: &[f64]) -> Matrix {
        Matrix::new(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn gelu_slope_matches_central_differences() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let (v, slope) = gelu_with_grad(x);
            assert_eq!(v, gelu(x));
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - slope).abs() < 1e-8, "{x}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn sinusoidal_first_row_and_range() {
        let pe = sinusoidal_pe(7, 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((sinusoidal_pe(2, 2)[(1, 0)] - 0.841_470_984_807_896_5).abs() < 1e-15);
    }

    #[test]
    fn patchify_layouts() {
        let x = col(&[1.0, 2.0, 3.0, 4.0]);
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.row(0), &[1.0, 2.0]);
        assert_eq!(p.row(1), &[3.0, 4.0]);

        let x = Matrix::from_fn(16, 2, |r, c| (r * 2 + c) as f64);
        assert_eq!(patchify(&x, 4).unwrap().shape(), (4, 8));
        let single = patchify(&x, 16).unwrap();
        assert_eq!(single.shape(), (1, 32));
        assert_eq!(single.row(0), x.as_slice());
        assert!(patchify(&x, 5).is_err());
    }

    #[test]
    fn moving_average_cases() {
        let constant = Matrix::filled(9, 2, 7.0);
        assert_eq!(moving_average(&constant, 5).unwrap(), constant);
        let x = col(&[0.3, -1.2, 5.5, 2.0]);
        assert_eq!(moving_average(&x, 1).unwrap(), x);
        let ma = moving_average(&col(&[1.0, 2.0, 3.0, 4.0, 5.0]), 3).unwrap();
        let expected = [4.0 / 3.0, 2.0, 3.0, 4.0, 14.0 / 3.0];
        for (a, e) in ma.as_slice().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
        assert!(moving_average(&x, 2).is_err());
    }

    #[test]
    fn constant_series_has_zero_seasonal_part() {
        let x = Matrix::filled(12, 3, 0.1);
        let (trend, seasonal) = decompose(&x, 5).unwrap();
        assert_eq!(trend, x);
        assert!(seasonal.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_singleton_and_uniform() {
        let q = Matrix::new(1, 2, vec![0.3, -0.7]).unwrap();
        let v = Matrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(full_attention(&q, &q, &v).unwrap(), v);

        // queries orthogonal to keys -> uniform weights
        let q = Matrix::new(2, 2, vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let k = Matrix::new(3, 2, vec![0.0, 1.0, 0.0, -4.0, 0.0, 2.0]).unwrap();
        let v = Matrix::new(3, 1, vec![1.0, 2.0, 6.0]).unwrap();
        let out = full_attention(&q, &k, &v).unwrap();
        assert!((out[(0, 0)] - 3.0).abs() < 1e-15 && (out[(1, 0)] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn attention_hand_softmax() {
        // single-width head: scale is 1, scores are (0, ln 3)
        let q = Matrix::new(1, 1, vec![1.0]).unwrap();
        let k = Matrix::new(2, 1, vec![0.0, 3f64.ln()]).unwrap();
        let w = attention_weights(&q, &k).unwrap();
        assert!((w[(0, 0)] - 0.25).abs() < 1e-15 && (w[(0, 1)] - 0.75).abs() < 1e-15);
        let v = Matrix::new(2, 2, vec![4.0, 0.0, 0.0, 8.0]).unwrap();
        let out = full_attention(&q, &k, &v).unwrap();
        assert!((out[(0, 0)] - 1.0).abs() < 1e-14 && (out[(0, 1)] - 6.0).abs() < 1e-14);
    }

    #[test]
    fn sparsity_measure_cases() {
        let q = Matrix::new(1, 1, vec![1.0]).unwrap();
        let k = Matrix::new(2, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(probsparse_scores(&q, &k).unwrap().as_slice(), &[1.0]);
        let k_same = Matrix::new(3, 1, vec![2.0, 2.0, 2.0]).unwrap();
        assert_eq!(probsparse_scores(&q, &k_same).unwrap().as_slice(), &[0.0]);
        let k_one = Matrix::new(1, 1, vec![5.0]).unwrap();
        assert_eq!(probsparse_scores(&q, &k_one).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn probsparse_selection_matches_brute_force_top_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = Matrix::gaussian(8, 4, 1.0, &mut rng);
        let k = Matrix::gaussian(8, 4, 1.0, &mut rng);
        let v = Matrix::gaussian(8, 4, 1.0, &mut rng);
        // ceil(c ln 9) = 3 for c = 1.0
        assert_eq!(active_query_count(8, 1.0), 3);
        let m = probsparse_scores(&q, &k).unwrap();
        let mut brute: Vec<usize> = Vec::new();
        for _ in 0..3 {
            let best = (0..8)
                .filter(|i| !brute.contains(i))
                .max_by(|&a, &b| m[a].partial_cmp(&m[b]).unwrap().then(b.cmp(&a)))
                .unwrap();
            brute.push(best);
        }
        assert_eq!(select_active_queries(m.as_slice(), 3), brute);

        let out = probsparse_attention(&q, &k, &v, 1.0).unwrap();
        let full = full_attention(&q, &k, &v).unwrap();
        let mean = v.column_means();
        for r in 0..8 {
            if brute.contains(&r) {
                assert_eq!(out.row(r), full.row(r));
            } else {
                assert_eq!(out.row(r), mean.as_slice());
            }
        }
    }

    #[test]
    fn probsparse_degenerates_to_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Matrix::gaussian(5, 3, 1.0, &mut rng);
        let k = Matrix::gaussian(5, 3, 1.0, &mut rng);
        let v = Matrix::gaussian(5, 3, 1.0, &mut rng);
        assert_eq!(
            probsparse_attention(&q, &k, &v, 100.0).unwrap(),
            full_attention(&q, &k, &v).unwrap()
        );
        let q1 = q.row_block(0, 1);
        assert_eq!(
            probsparse_attention(&q1, &k.row_block(0, 1), &v.row_block(0, 1), 0.1).unwrap(),
            full_attention(&q1, &k.row_block(0, 1), &v.row_block(0, 1)).unwrap()
        );
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(select_active_queries(&[1.0, 2.0, 2.0, 0.5], 2), vec![1, 2]);
        assert_eq!(select_active_queries(&[0.0, 0.0, 0.0], 1), vec![0]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        assert!(cfg.validate(32).is_ok());
        assert!(cfg.validate(30).is_err());
        cfg.n_heads = 3;
        assert!(cfg.validate(32).is_err());
        let cfg = EncoderConfig { variant: Variant::Decomp, ma_kernel: 4, ..Default::default() };
        assert!(cfg.validate(32).is_err());
        let cfg = EncoderConfig { variant: Variant::ProbSparse, probsparse_factor: 0.0, ..Default::default() };
        assert!(cfg.validate(32).is_err());
    }

    #[test]
    fn single_patch_pools_to_its_token() {
        let cfg = EncoderConfig { d_model: 4, ffn_width: 8, patch_len: 8, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = EncoderParams::init(&cfg, 8, 2, &mut rng).unwrap();
        let x = Matrix::gaussian(8, 2, 1.0, &mut rng);
        let enc = encode(&x, &cfg, &params).unwrap();
        assert_eq!(enc.tokens.rows(), 1);
        assert_eq!(enc.z.as_slice(), enc.tokens.row(0));
    }

    #[test]
    fn zero_input_is_deterministic() {
        let cfg = EncoderConfig { d_model: 8, ffn_width: 16, patch_len: 4, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EncoderParams::init(&cfg, 16, 3, &mut rng).unwrap();
        let x = Matrix::zeros(16, 3);
        let a = encode(&x, &cfg, &params).unwrap();
        let b = encode(&x, &cfg, &params).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn decomp_constant_series_encodes_zero_sequence() {
        let cfg = EncoderConfig {
            variant: Variant::Decomp,
            d_model: 8,
            ffn_width: 16,
            ma_kernel: 3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = EncoderParams::init(&cfg, 12, 2, &mut rng).unwrap();
        let constant = encode(&Matrix::filled(12, 2, 0.7), &cfg, &params).unwrap();
        let zero = encode(&Matrix::zeros(12, 2), &cfg, &params).unwrap();
        assert_eq!(constant.z, zero.z);
        assert_eq!(constant.trend.unwrap(), Matrix::filled(12, 2, 0.7));
    }
}

//! Layout-aware transformer encoder.
//!
//! Two mechanisms inject layout into a standard post-norm encoder stack:
//!
//! * four coordinate embedding tables (x0, y0, width, height) added to the
//!   token and position embeddings, and
//! * a soft attention mask `w_ij` plus a trainable bias `b_ij` applied to the
//!   raw attention scores as `w_ij * a_ij + b_ij`, where both terms depend on
//!   the horizontal/vertical distance between token centers.
//!
//! Query and special positions have no layout: they attend globally
//! (`w = 1`, `b = 0` in both directions).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CenterPoint, PAGE_HEIGHT_UNITS, PAGE_WIDTH_UNITS};
use crate::input::ModelInput;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{scalar, Scalar};
use crate::tape::{NodeId, Tape, NO_PAIR};
use crate::tensor::Tensor;

/// Entries in the horizontal distance/bias tables: one per integer in [0, 700].
pub const H_TABLE_SIZE: usize = PAGE_WIDTH_UNITS as usize + 1;
/// Entries in the vertical distance/bias tables: one per integer in [0, 1000].
pub const V_TABLE_SIZE: usize = PAGE_HEIGHT_UNITS as usize + 1;

/// Thresholds and steepness of the soft layout attention mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutAttentionConfig {
    /// Horizontal distance threshold, in [0, 700].
    pub h_theta: f64,
    /// Vertical distance threshold, in [0, 1000].
    pub v_theta: f64,
    /// Sigmoid steepness coefficient, positive.
    pub gamma: f64,
}

impl Default for LayoutAttentionConfig {
    fn default() -> Self {
        LayoutAttentionConfig {
            h_theta: 300.0,
            v_theta: 500.0,
            gamma: 1.0,
        }
    }
}

/// Soft-mask thresholds together with the trainable distance bias tables.
#[derive(Debug, Clone, Copy)]
pub struct LayoutAttentionParams<'a, S> {
    pub config: &'a LayoutAttentionConfig,
    /// 701 trainable weights indexed by integer horizontal distance.
    pub h_table: &'a [S],
    /// 1001 trainable weights indexed by integer vertical distance.
    pub v_table: &'a [S],
}

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// 0 means "derive from the training corpus".
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default = "default_hidden")]
    pub hidden_size: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default = "default_max_seq")]
    pub max_seq_len: usize,
    /// 0 means four times the hidden size.
    #[serde(default)]
    pub intermediate_size: usize,
    #[serde(default)]
    pub layout: LayoutAttentionConfig,
    #[serde(default = "default_true")]
    pub use_layout_mask: bool,
    #[serde(default = "default_true")]
    pub use_layout_bias: bool,
}

fn default_hidden() -> usize {
    128
}
fn default_layers() -> usize {
    4
}
fn default_heads() -> usize {
    4
}
fn default_max_seq() -> usize {
    256
}
fn default_true() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            hidden_size: default_hidden(),
            num_layers: default_layers(),
            num_heads: default_heads(),
            max_seq_len: default_max_seq(),
            intermediate_size: 0,
            layout: LayoutAttentionConfig::default(),
            use_layout_mask: true,
            use_layout_bias: true,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error("input length {len} exceeds max_seq_len {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenIdOutOfRange { id: u32, vocab: usize },
}

impl EncoderConfig {
    pub fn ffn_size(&self) -> usize {
        if self.intermediate_size == 0 {
            4 * self.hidden_size
        } else {
            self.intermediate_size
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: String| Err(EncoderError::BadConfig(m));
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} below the 4 specials", self.vocab_size));
        }
        if self.hidden_size == 0 || self.num_heads == 0 {
            return fail("hidden_size and num_heads must be positive".into());
        }
        if self.hidden_size % self.num_heads != 0 {
            return fail(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        // Proposals read the last three hidden states including the embedding
        // output, so two encoder layers is the floor.
        if self.num_layers < 2 {
            return fail(format!("num_layers {} < 2", self.num_layers));
        }
        if self.max_seq_len < 4 {
            return fail(format!("max_seq_len {} < 4", self.max_seq_len));
        }
        if !(0.0..=f64::from(PAGE_WIDTH_UNITS)).contains(&self.layout.h_theta) {
            return fail(format!("h_theta {} out of range", self.layout.h_theta));
        }
        if !(0.0..=f64::from(PAGE_HEIGHT_UNITS)).contains(&self.layout.v_theta) {
            return fail(format!("v_theta {} out of range", self.layout.v_theta));
        }
        if self.layout.gamma <= 0.0 {
            return fail(format!("gamma {} must be positive", self.layout.gamma));
        }
        Ok(())
    }
}

/// Center points per sequence position; query/special positions get the
/// sentinel center (never consulted: their mask/bias are fixed).
pub fn centers_for_input(input: &ModelInput) -> Vec<CenterPoint> {
    (0..input.len())
        .map(|p| {
            if input.is_query[p] {
                CenterPoint::sentinel()
            } else {
                input.token_boxes[p].center()
            }
        })
        .collect()
}

/// The soft layout attention mask `w`.
///
/// For document-document pairs
/// `w_ij = (sigmoid(g*(h_t - h_ij)) + sigmoid(g*(v_t - v_ij))) / 2`; any pair
/// touching a query/special position attends globally with `w_ij = 1`.
pub fn layout_mask_terms<S: Scalar>(
    centers: &[CenterPoint],
    is_query: &[bool],
    cfg: &LayoutAttentionConfig,
) -> Tensor<S> {
    let n = centers.len();
    assert_eq!(is_query.len(), n);
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let w = if is_query[i] || is_query[j] {
                1.0
            } else {
                let h = (centers[i].cx - centers[j].cx).abs();
                let v = (centers[i].cy - centers[j].cy).abs();
                let hw = sigmoid_f64(cfg.gamma * (cfg.h_theta - h));
                let vw = sigmoid_f64(cfg.gamma * (cfg.v_theta - v));
                (hw + vw) / 2.0
            };
            *out.at_mut(i, j) = scalar(w);
        }
    }
    out
}

fn sigmoid_f64(x: f64) -> f64 {
    x.sigmoid()
}

/// The trainable layout attention bias `b_ij = H(round(h_ij)) + V(round(v_ij))`
/// for document-document pairs, zero when either side is query/special.
pub fn layout_bias_terms<S: Scalar>(
    centers: &[CenterPoint],
    is_query: &[bool],
    params: LayoutAttentionParams<'_, S>,
) -> Tensor<S> {
    assert_eq!(params.h_table.len(), H_TABLE_SIZE, "H table must have 701 entries");
    assert_eq!(params.v_table.len(), V_TABLE_SIZE, "V table must have 1001 entries");
    let n = centers.len();
    assert_eq!(is_query.len(), n);
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if is_query[i] || is_query[j] {
                continue;
            }
            let (hi, vi) = distance_indices(&centers[i], &centers[j]);
            *out.at_mut(i, j) = params.h_table[hi] + params.v_table[vi];
        }
    }
    out
}

/// Integer distance table indices for a pair of centers (round half-up).
fn distance_indices(a: &CenterPoint, b: &CenterPoint) -> (usize, usize) {
    let h = (a.cx - b.cx).abs().round() as usize;
    let v = (a.cy - b.cy).abs().round() as usize;
    (h.min(H_TABLE_SIZE - 1), v.min(V_TABLE_SIZE - 1))
}

/// Index matrices feeding the tape's layout-bias op; `NO_PAIR` marks pairs
/// involving a query/special position.
pub fn layout_bias_indices(centers: &[CenterPoint], is_query: &[bool]) -> (Vec<u32>, Vec<u32>) {
    let n = centers.len();
    let mut hidx = vec![NO_PAIR; n * n];
    let mut vidx = vec![NO_PAIR; n * n];
    for i in 0..n {
        for j in 0..n {
            if !(is_query[i] || is_query[j]) {
                let (h, v) = distance_indices(&centers[i], &centers[j]);
                hidx[i * n + j] = h as u32;
                vidx[i * n + j] = v as u32;
            }
        }
    }
    (hidx, vidx)
}

/// Single-head scaled dot-product attention with the layout modification
/// `a' = w .* a + b` applied before the softmax. `pad_mask[j] = true`
/// excludes position `j` via a large negative additive term after the
/// modification.
pub fn attention_with_layout<S: Scalar>(
    queries: &Tensor<S>,
    keys: &Tensor<S>,
    values: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    pad_mask: Option<&[bool]>,
) -> Tensor<S> {
    let n = queries.rows();
    assert_eq!(keys.rows(), n);
    assert_eq!(values.rows(), n);
    assert_eq!(w.shape(), (n, n));
    assert_eq!(b.shape(), (n, n));
    let dk = S::from_f64_lossy(queries.cols() as f64).sqrt();
    let mut scores = queries.matmul_nt(keys);
    for i in 0..n {
        for j in 0..n {
            let a = scores.at(i, j) / dk;
            let mut s = w.at(i, j) * a + b.at(i, j);
            if let Some(mask) = pad_mask {
                if mask[j] {
                    s = s + scalar(-1e30);
                }
            }
            *scores.at_mut(i, j) = s;
        }
    }
    scores.softmax_rows().matmul(values)
}

/// Parameter ids of one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wf1: ParamId,
    pub bf1: ParamId,
    pub wf2: ParamId,
    pub bf2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Parameter ids of the whole encoder.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub emb_x0: ParamId,
    pub emb_y0: ParamId,
    pub emb_w: ParamId,
    pub emb_h: ParamId,
    pub bias_h: ParamId,
    pub bias_v: ParamId,
    pub layers: Vec<LayerParams>,
}

/// Standard normal via Box-Muller, deterministic under the seeded generator.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn randn<S: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::from_fn(rows, cols, |_, _| scalar(gaussian(rng) * std))
}

/// Allocates and initializes all encoder parameters.
///
/// Embedding tables start as small Gaussians; the H/V bias tables start at
/// zero so the bias mechanism is inert at step zero; layer norms start as
/// identity.
pub fn init_encoder_params<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) -> EncoderParams {
    let d = cfg.hidden_size;
    let ff = cfg.ffn_size();
    let std = 0.02;

    let tok_emb = store.add("emb.tok", randn(cfg.vocab_size, d, std, rng));
    let pos_emb = store.add("emb.pos", randn(cfg.max_seq_len, d, std, rng));
    let emb_x0 = store.add("emb.x0", randn(H_TABLE_SIZE, d, std, rng));
    let emb_y0 = store.add("emb.y0", randn(V_TABLE_SIZE, d, std, rng));
    let emb_w = store.add("emb.w", randn(H_TABLE_SIZE, d, std, rng));
    let emb_h = store.add("emb.h", randn(V_TABLE_SIZE, d, std, rng));
    let bias_h = store.add("layout.h", Tensor::zeros(H_TABLE_SIZE, 1));
    let bias_v = store.add("layout.v", Tensor::zeros(V_TABLE_SIZE, 1));

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let p = |suffix: &str| format!("enc{l}.{suffix}");
        layers.push(LayerParams {
            wq: store.add(p("attn.wq"), randn(d, d, std, rng)),
            bq: store.add(p("attn.bq"), Tensor::zeros(1, d)),
            wk: store.add(p("attn.wk"), randn(d, d, std, rng)),
            bk: store.add(p("attn.bk"), Tensor::zeros(1, d)),
            wv: store.add(p("attn.wv"), randn(d, d, std, rng)),
            bv: store.add(p("attn.bv"), Tensor::zeros(1, d)),
            wo: store.add(p("attn.wo"), randn(d, d, std, rng)),
            bo: store.add(p("attn.bo"), Tensor::zeros(1, d)),
            ln1_gain: store.add(p("ln1.gain"), Tensor::from_fn(1, d, |_, _| S::one())),
            ln1_bias: store.add(p("ln1.bias"), Tensor::zeros(1, d)),
            wf1: store.add(p("ffn.w1"), randn(d, ff, std, rng)),
            bf1: store.add(p("ffn.b1"), Tensor::zeros(1, ff)),
            wf2: store.add(p("ffn.w2"), randn(ff, d, std, rng)),
            bf2: store.add(p("ffn.b2"), Tensor::zeros(1, d)),
            ln2_gain: store.add(p("ln2.gain"), Tensor::from_fn(1, d, |_, _| S::one())),
            ln2_bias: store.add(p("ln2.bias"), Tensor::zeros(1, d)),
        });
    }

    EncoderParams {
        tok_emb,
        pos_emb,
        emb_x0,
        emb_y0,
        emb_w,
        emb_h,
        bias_h,
        bias_v,
        layers,
    }
}

const LN_EPS: f64 = 1e-12;

/// Records the embedding sum for `input` on the tape.
pub fn embed_on_tape<S: Scalar>(
    tape: &mut Tape<'_, S>,
    ep: &EncoderParams,
    input: &ModelInput,
) -> NodeId {
    let n = input.len();
    let ids: Vec<u32> = input.token_ids.clone();
    let positions: Vec<u32> = (0..n as u32).collect();
    let x0s: Vec<u32> = input.token_boxes.iter().map(|b| b.x0).collect();
    let y0s: Vec<u32> = input.token_boxes.iter().map(|b| b.y0).collect();
    let ws: Vec<u32> = input.token_boxes.iter().map(|b| b.width()).collect();
    let hs: Vec<u32> = input.token_boxes.iter().map(|b| b.height()).collect();

    let tok = tape.embed_rows(ep.tok_emb, &ids);
    let pos = tape.embed_rows(ep.pos_emb, &positions);
    let ex0 = tape.embed_rows(ep.emb_x0, &x0s);
    let ey0 = tape.embed_rows(ep.emb_y0, &y0s);
    let ew = tape.embed_rows(ep.emb_w, &ws);
    let eh = tape.embed_rows(ep.emb_h, &hs);

    let mut x = tape.add(tok, pos);
    x = tape.add(x, ex0);
    x = tape.add(x, ey0);
    x = tape.add(x, ew);
    tape.add(x, eh)
}

/// Plain embedding output (the first hidden state).
pub fn embed<S: Scalar>(
    store: &ParamStore<S>,
    ep: &EncoderParams,
    input: &ModelInput,
) -> Tensor<S> {
    let mut tape = Tape::new(store);
    let node = embed_on_tape(&mut tape, ep, input);
    tape.value(node).clone()
}

fn check_input<S: Scalar>(
    store: &ParamStore<S>,
    ep: &EncoderParams,
    cfg: &EncoderConfig,
    input: &ModelInput,
) -> Result<(), EncoderError> {
    if input.len() > cfg.max_seq_len {
        return Err(EncoderError::InputTooLong {
            len: input.len(),
            max: cfg.max_seq_len,
        });
    }
    let vocab = store.get(ep.tok_emb).rows();
    for &id in &input.token_ids {
        if id as usize >= vocab {
            return Err(EncoderError::TokenIdOutOfRange { id, vocab });
        }
    }
    Ok(())
}

/// Runs the full encoder on the tape, returning every hidden state
/// `T_0..T_N` (embedding output plus one per layer).
///
/// The mask and bias matrices are computed once and shared across all layers
/// and heads.
pub fn encoder_forward<S: Scalar>(
    tape: &mut Tape<'_, S>,
    store: &ParamStore<S>,
    ep: &EncoderParams,
    cfg: &EncoderConfig,
    input: &ModelInput,
) -> Result<Vec<NodeId>, EncoderError> {
    check_input(store, ep, cfg, input)?;
    let n = input.len();
    let d = cfg.hidden_size;
    let heads = cfg.num_heads;
    let dk = d / heads;
    let scale = S::one() / S::from_f64_lossy(dk as f64).sqrt();

    let centers = centers_for_input(input);
    let wmat: Option<Tensor<S>> = cfg
        .use_layout_mask
        .then(|| layout_mask_terms(&centers, &input.is_query, &cfg.layout));
    let bias_node = cfg.use_layout_bias.then(|| {
        let (hidx, vidx) = layout_bias_indices(&centers, &input.is_query);
        tape.layout_bias(ep.bias_h, ep.bias_v, n, n, hidx, vidx)
    });

    let mut states = Vec::with_capacity(cfg.num_layers + 1);
    let mut x = embed_on_tape(tape, ep, input);
    states.push(x);

    for lp in &ep.layers {
        let wq = tape.param(lp.wq);
        let bq = tape.param(lp.bq);
        let wk = tape.param(lp.wk);
        let bk = tape.param(lp.bk);
        let wv = tape.param(lp.wv);
        let bv = tape.param(lp.bv);
        let q = tape.matmul(x, wq);
        let q = tape.add_row(q, bq);
        let k = tape.matmul(x, wk);
        let k = tape.add_row(k, bk);
        let v = tape.matmul(x, wv);
        let v = tape.add_row(v, bv);

        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dk, dk);
            let kh = tape.slice_cols(k, h * dk, dk);
            let vh = tape.slice_cols(v, h * dk, dk);
            let mut s = tape.matmul_nt(qh, kh);
            s = tape.scale(s, scale);
            if let Some(w) = &wmat {
                s = tape.mul_const(s, w.clone());
            }
            if let Some(b) = bias_node {
                s = tape.add(s, b);
            }
            let probs = tape.softmax_rows(s);
            head_outputs.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(&head_outputs);
        let wo = tape.param(lp.wo);
        let bo = tape.param(lp.bo);
        let attn_out = tape.matmul(ctx, wo);
        let attn_out = tape.add_row(attn_out, bo);
        let res1 = tape.add(x, attn_out);
        let x1 = tape.layer_norm(res1, lp.ln1_gain, lp.ln1_bias, scalar(LN_EPS));

        let wf1 = tape.param(lp.wf1);
        let bf1 = tape.param(lp.bf1);
        let wf2 = tape.param(lp.wf2);
        let bf2 = tape.param(lp.bf2);
        let ff = tape.matmul(x1, wf1);
        let ff = tape.add_row(ff, bf1);
        let ff = tape.gelu(ff);
        let ff = tape.matmul(ff, wf2);
        let ff = tape.add_row(ff, bf2);
        let res2 = tape.add(x1, ff);
        x = tape.layer_norm(res2, lp.ln2_gain, lp.ln2_bias, scalar(LN_EPS));
        states.push(x);
    }

    Ok(states)
}

/// All hidden states of an encoder run: `layers[0]` is the embedding output.
#[derive(Debug, Clone)]
pub struct HiddenStates<S> {
    pub layers: Vec<Tensor<S>>,
}

impl<S: Scalar> HiddenStates<S> {
    pub fn last(&self) -> &Tensor<S> {
        self.layers.last().expect("at least one state")
    }

    /// Indices (into `layers`) of the three states feeding region proposals.
    pub fn proposal_source_indices(&self) -> [usize; 3] {
        let n = self.layers.len();
        assert!(n >= 3, "need at least three hidden states");
        [n - 3, n - 2, n - 1]
    }
}

/// Plain-value encoder run (the inference path).
pub fn encode<S: Scalar>(
    store: &ParamStore<S>,
    ep: &EncoderParams,
    cfg: &EncoderConfig,
    input: &ModelInput,
) -> Result<HiddenStates<S>, EncoderError> {
    let mut tape = Tape::new(store);
    let nodes = encoder_forward(&mut tape, store, ep, cfg, input)?;
    Ok(HiddenStates {
        layers: nodes.into_iter().map(|n| tape.value(n).clone()).collect(),
    })
}

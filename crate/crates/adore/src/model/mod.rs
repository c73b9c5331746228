//! Byte-level decoder-only transformer.
//!
//! Pre-layer-norm blocks, learned absolute position embeddings, GELU FFN
//! with a 4x hidden width, multi-head attention with per-head scaling by
//! sqrt(head_dim). The model is deliberately small: everything here is
//! driven single-threaded and deterministically from a seed.

pub(crate) mod ops;
mod trace;
mod train;

pub use trace::{
    collect_traces, layer_top_set, trace_sequence, uniform_topk_from_layer_sets, ScoredSet,
    TraceRecord,
};
pub use train::{
    backward, eval_loss, full_forward, lm_loss, topk_masked_train, train_in_place, ForwardActs,
    TrainReport, TrainSchedule,
};

use crate::error::{Error, Result};
use crate::numkernel::rng::SplitMix64;
use crate::numkernel::{dot, matmul, softmax_row_in_place, Matrix};
use ops::{gelu, head_slice, layer_norm, LnCache};

pub type Token = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_position: usize,
    pub train_context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            model_dim: 64,
            n_heads: 4,
            vocab: 256,
            max_position: 2048,
            train_context: 256,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.vocab == 0 || self.n_layers == 0 || self.max_position == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub config: ModelConfig,
    /// vocab x d token table.
    pub tok_embed: Matrix,
    /// max_position x d learned absolute position table.
    pub pos_embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
    /// d x vocab output head.
    pub lm_head: Matrix,
}

impl TransformerParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.model_dim;
        let f = 4 * d;
        let layer = || LayerParams {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            w1: Matrix::zeros(d, f),
            b1: Matrix::zeros(1, f),
            w2: Matrix::zeros(f, d),
            b2: Matrix::zeros(1, d),
            ln1_gain: Matrix::zeros(1, d),
            ln1_bias: Matrix::zeros(1, d),
            ln2_gain: Matrix::zeros(1, d),
            ln2_bias: Matrix::zeros(1, d),
        };
        TransformerParams {
            config,
            tok_embed: Matrix::zeros(config.vocab, d),
            pos_embed: Matrix::zeros(config.max_position, d),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            lnf_gain: Matrix::zeros(1, d),
            lnf_bias: Matrix::zeros(1, d),
            lm_head: Matrix::zeros(d, config.vocab),
        }
    }

    /// Initialization used when training from scratch. The position table
    /// starts at zero so rows never touched by training stay exactly zero,
    /// which keeps behaviour beyond the training context mild instead of
    /// injecting untrained noise.
    pub fn training_init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut p = Self::zeros(config);
        let d = config.model_dim;
        let sd = 1.0 / (d as f32).sqrt();
        let sf = 1.0 / (4.0 * d as f32).sqrt();
        fill_normal(&mut p.tok_embed, &mut rng, 0.1);
        for l in &mut p.layers {
            for m in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1] {
                fill_normal(m, &mut rng, sd);
            }
            fill_normal(&mut l.w2, &mut rng, sf);
            l.ln1_gain.fill(1.0);
            l.ln2_gain.fill(1.0);
        }
        fill_normal(&mut p.lm_head, &mut rng, sd);
        p.lnf_gain.fill(1.0);
        p
    }

    /// Fully random parameters (position table included); used by tests.
    pub fn random(config: ModelConfig, seed: u64) -> Self {
        let mut p = Self::training_init(config, seed);
        let mut rng = SplitMix64::new(seed ^ 0xA5A5_5A5A);
        fill_normal(&mut p.pos_embed, &mut rng, 0.1);
        p
    }

    /// Tensor list in a fixed order, shared by the optimizer and the
    /// checkpoint writer.
    pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
        let mut names = vec!["lm.tok_embed".to_string(), "lm.pos_embed".to_string()];
        for i in 0..config.n_layers {
            for t in [
                "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_gain", "ln1_bias",
                "ln2_gain", "ln2_bias",
            ] {
                names.push(format!("lm.layer{i}.{t}"));
            }
        }
        names.push("lm.lnf_gain".to_string());
        names.push("lm.lnf_bias".to_string());
        names.push("lm.lm_head".to_string());
        names
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.tok_embed, &self.pos_embed];
        for l in &self.layers {
            out.extend([
                &l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.b1, &l.w2, &l.b2, &l.ln1_gain,
                &l.ln1_bias, &l.ln2_gain, &l.ln2_bias,
            ]);
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.lm_head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.tok_embed, &mut self.pos_embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.b1,
                &mut l.w2, &mut l.b2, &mut l.ln1_gain, &mut l.ln1_bias, &mut l.ln2_gain,
                &mut l.ln2_bias,
            ]);
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.lm_head]);
        out
    }
}

fn fill_normal(m: &mut Matrix, rng: &mut SplitMix64, std: f32) {
    m.data_mut().iter_mut().for_each(|x| *x = rng.normal_f32() * std);
}

/// Token + position embedding rows for consecutive positions starting at 0.
pub fn embed(tokens: &[Token], params: &TransformerParams) -> Result<Matrix> {
    let pairs: Vec<(Token, usize)> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, i))
        .collect();
    embed_at(&pairs, params)
}

/// Embedding rows for tokens at explicit absolute positions.
pub fn embed_at(tokens: &[(Token, usize)], params: &TransformerParams) -> Result<Matrix> {
    let d = params.config.model_dim;
    let mut out = Matrix::zeros(tokens.len(), d);
    for (i, &(tok, pos)) in tokens.iter().enumerate() {
        assert!(
            (tok as usize) < params.config.vocab,
            "token id {tok} out of vocab"
        );
        if pos >= params.config.max_position {
            return Err(Error::Capacity {
                what: "position",
                got: pos,
                limit: params.config.max_position,
            });
        }
        let row = out.row_mut(i);
        let te = params.tok_embed.row(tok as usize);
        let pe = params.pos_embed.row(pos);
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    }
    Ok(out)
}

/// Single-head scaled dot-product attention of one query over a context.
/// `scale_dim` is the dimension under the square root. Panics on an empty
/// context: the current token is always part of its own context.
pub fn attention_step(q: &[f32], k_ctx: &Matrix, v_ctx: &Matrix, scale_dim: usize) -> Vec<f32> {
    assert!(k_ctx.rows() >= 1, "attention over an empty context");
    assert_eq!(k_ctx.rows(), v_ctx.rows(), "K/V row mismatch");
    assert_eq!(k_ctx.cols(), q.len(), "query width mismatch");
    let scale = 1.0 / (scale_dim as f32).sqrt();
    let mut scores: Vec<f32> = (0..k_ctx.rows())
        .map(|i| dot(q, k_ctx.row(i)) * scale)
        .collect();
    softmax_row_in_place(&mut scores);
    let mut out = vec![0.0f32; v_ctx.cols()];
    for (i, &w) in scores.iter().enumerate() {
        let v = v_ctx.row(i);
        for (o, &vv) in out.iter_mut().zip(v) {
            *o += w * vv;
        }
    }
    out
}

/// Borrowed view of one layer's attention context.
#[derive(Clone, Copy)]
pub struct KvView<'a> {
    pub keys: &'a Matrix,
    pub values: &'a Matrix,
    pub positions: &'a [u32],
}

impl<'a> KvView<'a> {
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }
}

/// Attention the last batch row paid to every context entry, per layer.
/// Entries are ordered cache rows first, then batch rows.
#[derive(Debug, Clone, Default)]
pub struct StepAttention {
    pub head_sum: Vec<Vec<f32>>,
    pub head_max: Vec<Vec<f32>>,
}

/// Output of a batched decode step.
pub struct StepOutput {
    /// Next-token logits taken from the last batch row.
    pub logits: Vec<f32>,
    /// Fresh K rows per layer (batch_len x d).
    pub new_keys: Vec<Matrix>,
    /// Fresh V rows per layer (batch_len x d).
    pub new_values: Vec<Matrix>,
    /// Residual-stream value of the last batch row after each layer.
    pub hidden: Vec<Vec<f32>>,
    pub attention: StepAttention,
}

/// Runs a batch of tokens (given with their absolute positions) through all
/// layers against per-layer cached contexts. Every query attends to cache
/// entries and batch rows whose original position does not exceed its own;
/// the batch always sees its own freshly computed K/V rows subject to that
/// rule, so a single-row batch degenerates to plain incremental decoding.
pub fn forward_batch(
    batch: &[(Token, usize)],
    contexts: &[KvView],
    params: &TransformerParams,
) -> Result<StepOutput> {
    let cfg = &params.config;
    assert!(!batch.is_empty(), "empty decode batch");
    assert_eq!(contexts.len(), cfg.n_layers, "one context per layer");
    let b = batch.len();
    let d = cfg.model_dim;
    let hd = cfg.head_dim();
    let last = b - 1;

    let mut x = embed_at(batch, params)?;
    let mut new_keys = Vec::with_capacity(cfg.n_layers);
    let mut new_values = Vec::with_capacity(cfg.n_layers);
    let mut hidden = Vec::with_capacity(cfg.n_layers);
    let mut attn_sum = Vec::with_capacity(cfg.n_layers);
    let mut attn_max = Vec::with_capacity(cfg.n_layers);

    for (l, ctx) in contexts.iter().enumerate() {
        let lp = &params.layers[l];
        let (a_in, _) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias);
        let q = matmul(&a_in, &lp.wq);
        let k = matmul(&a_in, &lp.wk);
        let v = matmul(&a_in, &lp.wv);

        let m = ctx.len();
        let total = m + b;
        let mut layer_sum = vec![0.0f32; total];
        let mut layer_max = vec![0.0f32; total];
        let mut attn_cat = Matrix::zeros(b, d);

        for (row, &(_, pos)) in batch.iter().enumerate() {
            for h in 0..cfg.n_heads {
                let off = h * hd;
                let qh = &q.row(row)[off..off + hd];
                // scores over cache entries then batch rows, masked by
                // original position
                let mut scores = Vec::with_capacity(total);
                let mut source: Vec<usize> = Vec::with_capacity(total);
                for e in 0..m {
                    if ctx.positions[e] as usize <= pos {
                        scores.push(dot(qh, &ctx.keys.row(e)[off..off + hd]));
                        source.push(e);
                    }
                }
                for (j, &(_, pj)) in batch.iter().enumerate() {
                    if pj <= pos {
                        scores.push(dot(qh, &k.row(j)[off..off + hd]));
                        source.push(m + j);
                    }
                }
                assert!(!scores.is_empty(), "query has no visible context");
                let scale = 1.0 / (hd as f32).sqrt();
                scores.iter_mut().for_each(|s| *s *= scale);
                softmax_row_in_place(&mut scores);

                let out = &mut attn_cat.row_mut(row)[off..off + hd];
                for (&w, &src) in scores.iter().zip(&source) {
                    let vrow = if src < m {
                        &ctx.values.row(src)[off..off + hd]
                    } else {
                        &v.row(src - m)[off..off + hd]
                    };
                    for (o, &vv) in out.iter_mut().zip(vrow) {
                        *o += w * vv;
                    }
                }
                if row == last {
                    for (&w, &src) in scores.iter().zip(&source) {
                        layer_sum[src] += w;
                        if w > layer_max[src] {
                            layer_max[src] = w;
                        }
                    }
                }
            }
        }

        let o = matmul(&attn_cat, &lp.wo);
        x.add_assign(&o);

        let (f_in, _) = layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias);
        let mut h1 = matmul(&f_in, &lp.w1);
        for i in 0..b {
            let row = h1.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = gelu(*v + lp.b1[(0, j)]);
            }
        }
        let mut f_out = matmul(&h1, &lp.w2);
        for i in 0..b {
            let row = f_out.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v += lp.b2[(0, j)];
            }
        }
        x.add_assign(&f_out);

        new_keys.push(k);
        new_values.push(v);
        hidden.push(x.row(last).to_vec());
        attn_sum.push(layer_sum);
        attn_max.push(layer_max);
    }

    let (x_f, _) = layer_norm(&x, &params.lnf_gain, &params.lnf_bias);
    let mut logits = vec![0.0f32; cfg.vocab];
    let xl = x_f.row(last);
    for (j, lg) in logits.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for (i, &xv) in xl.iter().enumerate() {
            acc += xv * params.lm_head[(i, j)];
        }
        *lg = acc;
    }

    Ok(StepOutput {
        logits,
        new_keys,
        new_values,
        hidden,
        attention: StepAttention {
            head_sum: attn_sum,
            head_max: attn_max,
        },
    })
}

/// Single-token decode step: the query attends over the cached rows plus
/// its own fresh K/V row.
pub fn forward_step(
    token: Token,
    position: usize,
    contexts: &[KvView],
    params: &TransformerParams,
) -> Result<StepOutput> {
    forward_batch(&[(token, position)], contexts, params)
}

/// One decode step of the exact top-K oracle: all KV rows are retained,
/// and at each layer the query attends only over the `k` cached rows with
/// the largest full-width query-key products (plus its own fresh row).
/// With `k >= rows` this reduces to plain full-context decoding.
pub fn oracle_topk_step(
    token: Token,
    position: usize,
    kv: &GrowingKv,
    k: usize,
    params: &TransformerParams,
) -> Result<StepOutput> {
    let cfg = &params.config;
    let d = cfg.model_dim;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let m = kv.positions.len();

    let mut x = embed_at(&[(token, position)], params)?;
    let mut new_keys = Vec::with_capacity(cfg.n_layers);
    let mut new_values = Vec::with_capacity(cfg.n_layers);
    let mut hidden = Vec::with_capacity(cfg.n_layers);
    let mut attn_sum = Vec::with_capacity(cfg.n_layers);
    let mut attn_max = Vec::with_capacity(cfg.n_layers);

    for l in 0..cfg.n_layers {
        let lp = &params.layers[l];
        let (a_in, _) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias);
        let q = matmul(&a_in, &lp.wq);
        let k_new = matmul(&a_in, &lp.wk);
        let v_new = matmul(&a_in, &lp.wv);

        let selected = crate::kvcache::ideal_topk_indices(q.row(0), &kv.keys[l], k);

        let mut layer_sum = vec![0.0f32; m + 1];
        let mut layer_max = vec![0.0f32; m + 1];
        let mut attn_cat = Matrix::zeros(1, d);
        for h in 0..cfg.n_heads {
            let off = h * hd;
            let qh = &q.row(0)[off..off + hd];
            let mut scores: Vec<f32> = selected
                .iter()
                .map(|&i| dot(qh, &kv.keys[l].row(i)[off..off + hd]) * scale)
                .collect();
            scores.push(dot(qh, &k_new.row(0)[off..off + hd]) * scale);
            softmax_row_in_place(&mut scores);

            let out = &mut attn_cat.row_mut(0)[off..off + hd];
            for (si, &w) in scores.iter().enumerate() {
                let vrow = if si < selected.len() {
                    &kv.values[l].row(selected[si])[off..off + hd]
                } else {
                    &v_new.row(0)[off..off + hd]
                };
                for (o, &vv) in out.iter_mut().zip(vrow) {
                    *o += w * vv;
                }
                let slot = if si < selected.len() { selected[si] } else { m };
                layer_sum[slot] += w;
                if w > layer_max[slot] {
                    layer_max[slot] = w;
                }
            }
        }
        let o = matmul(&attn_cat, &lp.wo);
        x.add_assign(&o);

        let (f_in, _) = layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias);
        let mut h1 = matmul(&f_in, &lp.w1);
        for (j, v) in h1.row_mut(0).iter_mut().enumerate() {
            *v = gelu(*v + lp.b1[(0, j)]);
        }
        let mut f_out = matmul(&h1, &lp.w2);
        for (j, v) in f_out.row_mut(0).iter_mut().enumerate() {
            *v += lp.b2[(0, j)];
        }
        x.add_assign(&f_out);

        new_keys.push(k_new);
        new_values.push(v_new);
        hidden.push(x.row(0).to_vec());
        attn_sum.push(layer_sum);
        attn_max.push(layer_max);
    }

    let (x_f, _) = layer_norm(&x, &params.lnf_gain, &params.lnf_bias);
    let logits_m = matmul(&x_f, &params.lm_head);
    Ok(StepOutput {
        logits: logits_m.row(0).to_vec(),
        new_keys,
        new_values,
        hidden,
        attention: StepAttention {
            head_sum: attn_sum,
            head_max: attn_max,
        },
    })
}

/// Cache of per-layer full K/V matrices for incremental decoding in tests
/// and oracles; grows without bound.
pub struct GrowingKv {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    pub positions: Vec<u32>,
}

impl GrowingKv {
    pub fn new(config: &ModelConfig) -> Self {
        GrowingKv {
            keys: (0..config.n_layers)
                .map(|_| Matrix::zeros(0, config.model_dim))
                .collect(),
            values: (0..config.n_layers)
                .map(|_| Matrix::zeros(0, config.model_dim))
                .collect(),
            positions: Vec::new(),
        }
    }

    pub fn views(&self) -> Vec<KvView<'_>> {
        (0..self.keys.len())
            .map(|l| KvView {
                keys: &self.keys[l],
                values: &self.values[l],
                positions: &self.positions,
            })
            .collect()
    }

    pub fn push(&mut self, step: &StepOutput, position: usize) {
        for l in 0..self.keys.len() {
            let row = step.new_keys[l].rows() - 1;
            self.keys[l].push_row(step.new_keys[l].row(row));
            self.values[l].push_row(step.new_values[l].row(row));
        }
        self.positions.push(position as u32);
    }
}

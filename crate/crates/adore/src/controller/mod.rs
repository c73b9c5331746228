//! Lightweight recurrent eviction scorer.
//!
//! Each arriving token gets one keep-probability sigma from a GRU over the
//! backbone's token embeddings plus a position embedding, a tanh
//! interaction layer, and a sigmoid output head. Sigma is computed once at
//! arrival and never revised; eviction and rebuild decisions are rankings
//! over these static scores.

mod train;

pub use train::{train_controller, ControllerMetrics, ControllerSchedule, EpochStats};

use crate::error::{Error, Result};
use crate::model::{Token, TraceRecord, TransformerParams};
use crate::numkernel::rng::SplitMix64;
use crate::numkernel::{dot, gru_cell, sigmoid, GruCellParams, Matrix};

/// Which sequence model feeds the scorer head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ControllerVariant {
    /// Causal single-direction GRU; the only variant usable when decoding.
    #[default]
    Unidirectional,
    /// Adds a reverse-direction GRU (offline comparison only; summed with
    /// the forward state to keep downstream shapes unchanged).
    Bidirectional,
    /// No recurrence: a linear projection of the token embedding.
    MlpOnly,
}

impl ControllerVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerVariant::Unidirectional => "unidirectional",
            ControllerVariant::Bidirectional => "bidirectional",
            ControllerVariant::MlpOnly => "mlp-only",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControllerParams {
    pub variant: ControllerVariant,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Forward GRU cell (input projection in the MLP-only variant lives in
    /// `input_proj` instead).
    pub gru: GruCellParams,
    /// Reverse cell, bidirectional variant only.
    pub gru_back: Option<GruCellParams>,
    /// hidden_dim x input_dim projection, MLP-only variant.
    pub input_proj: Option<Matrix>,
    /// max_position x hidden_dim position table.
    pub pos_embed: Matrix,
    /// hidden_dim x hidden_dim interaction layer with tanh.
    pub w_inter: Matrix,
    pub b_inter: Matrix,
    /// 1 x hidden_dim output head plus scalar bias.
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl ControllerParams {
    pub fn zeros(
        variant: ControllerVariant,
        input_dim: usize,
        hidden_dim: usize,
        max_position: usize,
    ) -> Self {
        ControllerParams {
            variant,
            input_dim,
            hidden_dim,
            gru: GruCellParams::zeros(input_dim, hidden_dim),
            gru_back: matches!(variant, ControllerVariant::Bidirectional)
                .then(|| GruCellParams::zeros(input_dim, hidden_dim)),
            input_proj: matches!(variant, ControllerVariant::MlpOnly)
                .then(|| Matrix::zeros(hidden_dim, input_dim)),
            pos_embed: Matrix::zeros(max_position, hidden_dim),
            w_inter: Matrix::zeros(hidden_dim, hidden_dim),
            b_inter: Matrix::zeros(1, hidden_dim),
            w_out: Matrix::zeros(1, hidden_dim),
            b_out: Matrix::zeros(1, 1),
        }
    }

    pub fn random(
        variant: ControllerVariant,
        input_dim: usize,
        hidden_dim: usize,
        max_position: usize,
        seed: u64,
    ) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut p = Self::zeros(variant, input_dim, hidden_dim, max_position);
        p.gru = GruCellParams::random(input_dim, hidden_dim, &mut rng);
        if let Some(back) = &mut p.gru_back {
            *back = GruCellParams::random(input_dim, hidden_dim, &mut rng);
        }
        let sh = 1.0 / (hidden_dim as f32).sqrt();
        let si = 1.0 / (input_dim as f32).sqrt();
        if let Some(proj) = &mut p.input_proj {
            proj.data_mut().iter_mut().for_each(|x| *x = rng.normal_f32() * si);
        }
        p.pos_embed
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.normal_f32() * 0.1);
        p.w_inter
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.normal_f32() * sh);
        p.w_out
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.normal_f32() * sh);
        p
    }

    pub fn max_position(&self) -> usize {
        self.pos_embed.rows()
    }
}

/// Rolling state of an in-flight scoring pass: last hidden vector plus the
/// sigma assigned to every processed token, in arrival order.
#[derive(Debug, Clone)]
pub struct ScoreState {
    pub hidden: Vec<f32>,
    pub sigmas: Vec<f32>,
}

impl ScoreState {
    pub fn new(hidden_dim: usize) -> Self {
        ScoreState {
            hidden: vec![0.0; hidden_dim],
            sigmas: Vec::new(),
        }
    }
}

/// Hidden state -> sigma head shared by scoring and training.
pub(crate) fn head_sigma(params: &ControllerParams, z: &[f32], position: usize) -> f32 {
    let hd = params.hidden_dim;
    let pe = params.pos_embed.row(position);
    let u: Vec<f32> = z.iter().zip(pe).map(|(a, b)| a + b).collect();
    let mut logit = params.b_out[(0, 0)];
    for i in 0..hd {
        let a = (dot(params.w_inter.row(i), &u) + params.b_inter[(0, i)]).tanh();
        logit += params.w_out[(0, i)] * a;
    }
    sigmoid(logit)
}

pub(crate) fn hidden_for_token(
    params: &ControllerParams,
    x: &[f32],
    h_prev: &[f32],
) -> Vec<f32> {
    match params.variant {
        ControllerVariant::MlpOnly => {
            let proj = params.input_proj.as_ref().expect("mlp variant projection");
            (0..params.hidden_dim)
                .map(|i| dot(proj.row(i), x).tanh())
                .collect()
        }
        _ => gru_cell(x, h_prev, &params.gru),
    }
}

/// Scores one arriving token. `x` is the backbone's token embedding row
/// (without position); the position feeds the scorer's own table. The
/// bidirectional variant has no causal reading and is rejected here.
pub fn score_token(
    x: &[f32],
    position: usize,
    state: &mut ScoreState,
    params: &ControllerParams,
) -> Result<f32> {
    assert_ne!(
        params.variant,
        ControllerVariant::Bidirectional,
        "bidirectional scoring is offline-only"
    );
    if position >= params.max_position() {
        return Err(Error::Capacity {
            what: "controller position",
            got: position,
            limit: params.max_position(),
        });
    }
    let z = hidden_for_token(params, x, &state.hidden);
    let sigma = head_sigma(params, &z, position);
    state.hidden = z;
    state.sigmas.push(sigma);
    Ok(sigma)
}

/// Sigma for every token of a complete sequence. This is the offline path:
/// it also serves the bidirectional variant, where a reverse pass is summed
/// into the forward hidden states.
pub fn score_sequence(
    xs: &Matrix,
    start_position: usize,
    params: &ControllerParams,
) -> Result<Vec<f32>> {
    let n = xs.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    if start_position + n > params.max_position() {
        return Err(Error::Capacity {
            what: "controller position",
            got: start_position + n - 1,
            limit: params.max_position(),
        });
    }
    let mut hidden = Vec::with_capacity(n);
    let mut h = vec![0.0f32; params.hidden_dim];
    for i in 0..n {
        h = hidden_for_token(params, xs.row(i), &h);
        hidden.push(h.clone());
    }
    if let Some(back) = &params.gru_back {
        let mut hb = vec![0.0f32; params.hidden_dim];
        for i in (0..n).rev() {
            hb = gru_cell(xs.row(i), &hb, back);
            for (f, b) in hidden[i].iter_mut().zip(&hb) {
                *f += b;
            }
        }
    }
    Ok((0..n)
        .map(|i| head_sigma(params, &hidden[i], start_position + i))
        .collect())
}

/// Tokens evicted from the cache and eligible for rebuild. Stores identity
/// and score only; embeddings are looked up again at rebuild time.
#[derive(Debug, Clone, Default)]
pub struct ReleasedPool {
    tokens: Vec<Token>,
    positions: Vec<u32>,
    scores: Vec<f32>,
}

impl ReleasedPool {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn push(&mut self, token: Token, position: u32, score: f32) {
        debug_assert!(
            !self.positions.contains(&position),
            "position {position} already released"
        );
        self.tokens.push(token);
        self.positions.push(position);
        self.scores.push(score);
    }

    /// Drops the entry at `position` (it returned to the cache).
    pub fn remove_position(&mut self, position: u32) {
        if let Some(i) = self.positions.iter().position(|&p| p == position) {
            self.tokens.remove(i);
            self.positions.remove(i);
            self.scores.remove(i);
        }
    }
}

/// The min(R, pool) released tokens with the largest scores, ties toward
/// the more recent position; returned ascending by original position.
pub fn select_rebuild(pool: &ReleasedPool, r: usize) -> Vec<(Token, u32)> {
    let n = pool.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        pool.scores[b]
            .partial_cmp(&pool.scores[a])
            .unwrap()
            .then(pool.positions[b].cmp(&pool.positions[a]))
    });
    let mut picked: Vec<usize> = order.into_iter().take(r.min(n)).collect();
    picked.sort_by_key(|&i| pool.positions[i]);
    picked
        .into_iter()
        .map(|i| (pool.tokens[i], pool.positions[i]))
        .collect()
}

/// Binary labels for one sequence: 1 for the K tokens most frequently
/// found in the per-layer top sets across every decoding step and layer.
/// Ties break toward the larger summed attention weight (when the traces
/// carry scores), then toward the more recent position.
pub fn build_labels(traces: &[TraceRecord], k: usize, seq_len: usize) -> Vec<u8> {
    let mut count = vec![0u32; seq_len];
    let mut score_sum = vec![0.0f32; seq_len];
    for rec in traces {
        for set in &rec.layer_sets {
            for (i, &idx) in set.indices.iter().enumerate() {
                let idx = idx as usize;
                if idx < seq_len {
                    count[idx] += 1;
                    score_sum[idx] += set.scores.get(i).copied().unwrap_or(0.0);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..seq_len).collect();
    order.sort_by(|&a, &b| {
        count[b]
            .cmp(&count[a])
            .then(score_sum[b].partial_cmp(&score_sum[a]).unwrap())
            .then(b.cmp(&a))
    });
    let mut labels = vec![0u8; seq_len];
    for &i in order.iter().take(k.min(seq_len)) {
        labels[i] = 1;
    }
    labels
}

/// One training sequence: backbone token-embedding rows plus binary labels.
#[derive(Debug, Clone)]
pub struct ControllerSequence {
    pub inputs: Matrix,
    pub labels: Vec<u8>,
}

/// Supervised dataset for the scorer.
#[derive(Debug, Clone, Default)]
pub struct ControllerDataset {
    pub sequences: Vec<ControllerSequence>,
}

impl ControllerDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Fraction of positive labels, used for loss balancing.
    pub fn positive_rate(&self) -> f32 {
        let (mut pos, mut total) = (0usize, 0usize);
        for s in &self.sequences {
            pos += s.labels.iter().filter(|&&l| l == 1).count();
            total += s.labels.len();
        }
        if total == 0 {
            0.0
        } else {
            pos as f32 / total as f32
        }
    }
}

/// Builds the dataset from token sequences and their traces: inputs are
/// the backbone's token embeddings, labels come from `build_labels`.
pub fn dataset_from_traces(
    lm: &TransformerParams,
    sequences: &[Vec<Token>],
    traces: &[Vec<TraceRecord>],
    k: usize,
) -> ControllerDataset {
    assert_eq!(sequences.len(), traces.len());
    let d = lm.config.model_dim;
    let mut out = ControllerDataset::default();
    for (seq, trace) in sequences.iter().zip(traces) {
        let mut inputs = Matrix::zeros(seq.len(), d);
        for (i, &tok) in seq.iter().enumerate() {
            inputs.row_mut(i).copy_from_slice(lm.tok_embed.row(tok as usize));
        }
        let labels = build_labels(trace, k, seq.len());
        out.sequences.push(ControllerSequence { inputs, labels });
    }
    out
}

/// Convenience for engine callers: look up the scorer input embedding.
pub fn scorer_input<'a>(lm: &'a TransformerParams, token: Token) -> &'a [f32] {
    lm.tok_embed.row(token as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScoredSet;

    #[test]
    fn zero_params_score_half_everywhere() {
        let p = ControllerParams::zeros(ControllerVariant::Unidirectional, 4, 3, 16);
        let mut st = ScoreState::new(3);
        for pos in 0..5 {
            let s = score_token(&[1.0, -1.0, 2.0, 0.5], pos, &mut st, &p).unwrap();
            assert_eq!(s, 0.5);
        }
    }

    #[test]
    fn identical_prefixes_give_identical_sigma_prefixes() {
        let p = ControllerParams::random(ControllerVariant::Unidirectional, 4, 3, 64, 8);
        let mut rng = SplitMix64::new(3);
        let shared: Vec<Vec<f32>> = (0..6)
            .map(|_| (0..4).map(|_| rng.normal_f32()).collect())
            .collect();
        let mut a = ScoreState::new(3);
        let mut b = ScoreState::new(3);
        for (i, x) in shared.iter().enumerate() {
            score_token(x, i, &mut a, &p).unwrap();
            score_token(x, i, &mut b, &p).unwrap();
        }
        // diverge afterwards
        score_token(&[9.0, 9.0, 9.0, 9.0], 6, &mut a, &p).unwrap();
        score_token(&[-9.0, 0.0, 1.0, 2.0], 6, &mut b, &p).unwrap();
        assert_eq!(a.sigmas[..6], b.sigmas[..6]);
        assert_ne!(a.sigmas[6], b.sigmas[6]);
    }

    /// Independent recurrence: scalar-by-scalar GRU and head, straight from
    /// the definitions.
    fn sigma_oracle(xs: &Matrix, p: &ControllerParams) -> Vec<f32> {
        let hd = p.hidden_dim;
        let mut h = vec![0.0f32; hd];
        let mut out = Vec::new();
        for t in 0..xs.rows() {
            let x = xs.row(t);
            let mut nh = vec![0.0f32; hd];
            for i in 0..hd {
                let mut az = p.gru.b_update[(0, i)];
                let mut ar = p.gru.b_reset[(0, i)];
                let mut ac = p.gru.b_cand[(0, i)];
                for (j, &xv) in x.iter().enumerate() {
                    az += p.gru.w_update[(i, j)] * xv;
                    ar += p.gru.w_reset[(i, j)] * xv;
                    ac += p.gru.w_cand[(i, j)] * xv;
                }
                for (j, &hv) in h.iter().enumerate() {
                    az += p.gru.u_update[(i, j)] * hv;
                    ar += p.gru.u_reset[(i, j)] * hv;
                }
                let z = 1.0 / (1.0 + (-az).exp());
                // reset gates are componentwise; recompute each
                let mut gated = 0.0f32;
                for (j, &hv) in h.iter().enumerate() {
                    let mut arj = p.gru.b_reset[(0, j)];
                    for (jj, &xv) in x.iter().enumerate() {
                        arj += p.gru.w_reset[(j, jj)] * xv;
                    }
                    for (jj, &hv2) in h.iter().enumerate() {
                        arj += p.gru.u_reset[(j, jj)] * hv2;
                    }
                    let rj = 1.0 / (1.0 + (-arj).exp());
                    gated += p.gru.u_cand[(i, j)] * (rj * hv);
                }
                let c = (ac + gated).tanh();
                let _ = ar;
                nh[i] = z * h[i] + (1.0 - z) * c;
            }
            h = nh;
            // head
            let pe = p.pos_embed.row(t);
            let u: Vec<f32> = h.iter().zip(pe).map(|(a, b)| a + b).collect();
            let mut logit = p.b_out[(0, 0)];
            for i in 0..hd {
                let mut pre = p.b_inter[(0, i)];
                for (j, &uv) in u.iter().enumerate() {
                    pre += p.w_inter[(i, j)] * uv;
                }
                logit += p.w_out[(0, i)] * pre.tanh();
            }
            out.push(1.0 / (1.0 + (-logit).exp()));
        }
        out
    }

    #[test]
    fn matches_step_by_step_oracle() {
        let p = ControllerParams::random(ControllerVariant::Unidirectional, 5, 4, 32, 91);
        let mut rng = SplitMix64::new(17);
        let xs = Matrix::from_vec(16, 5, (0..80).map(|_| rng.normal_f32()).collect());
        let got = score_sequence(&xs, 0, &p).unwrap();
        let want = sigma_oracle(&xs, &p);
        assert_eq!(got.len(), 16);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }

        // incremental and sequence paths agree
        let mut st = ScoreState::new(4);
        for i in 0..16 {
            let s = score_token(xs.row(i), i, &mut st, &p).unwrap();
            assert_eq!(s, got[i]);
        }
    }

    #[test]
    fn sigma_stays_in_open_unit_interval() {
        let p = ControllerParams::random(ControllerVariant::Unidirectional, 3, 4, 64, 5);
        let mut st = ScoreState::new(4);
        for i in 0..40 {
            let x = [i as f32 * 10.0, -(i as f32), 0.5];
            let s = score_token(&x, i, &mut st, &p).unwrap();
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn position_overflow_is_capacity_error() {
        let p = ControllerParams::zeros(ControllerVariant::Unidirectional, 2, 2, 4);
        let mut st = ScoreState::new(2);
        let err = score_token(&[0.0, 0.0], 4, &mut st, &p).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn select_rebuild_trivia() {
        let mut pool = ReleasedPool::default();
        assert!(select_rebuild(&pool, 3).is_empty());
        pool.push(10, 0, 0.1);
        pool.push(11, 1, 0.8);
        pool.push(12, 2, 0.3);
        assert!(select_rebuild(&pool, 0).is_empty());
        assert_eq!(select_rebuild(&pool, 1), vec![(11, 1)]);
        // ascending position order in the output
        assert_eq!(select_rebuild(&pool, 2), vec![(11, 1), (12, 2)]);
    }

    #[test]
    fn select_rebuild_matches_sort_oracle() {
        let mut rng = SplitMix64::new(40);
        let mut pool = ReleasedPool::default();
        let mut entries: Vec<(Token, u32, f32)> = Vec::new();
        for i in 0..100 {
            let s = rng.next_f32();
            pool.push(i, i, s);
            entries.push((i, i, s));
        }
        let got = select_rebuild(&pool, 8);
        entries.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(b.1.cmp(&a.1)));
        let mut want: Vec<(Token, u32)> = entries[..8].iter().map(|e| (e.0, e.1)).collect();
        want.sort_by_key(|e| e.1);
        assert_eq!(got, want);
    }

    fn rec(step: u32, sets: Vec<ScoredSet>) -> TraceRecord {
        TraceRecord {
            step,
            uniform: Vec::new(),
            token: 0,
            layer_sets: sets,
        }
    }

    fn sset(indices: &[u32], scores: &[f32]) -> ScoredSet {
        ScoredSet {
            indices: indices.to_vec(),
            scores: scores.to_vec(),
        }
    }

    #[test]
    fn short_sequences_are_fully_labeled() {
        let traces = vec![rec(1, vec![sset(&[0], &[1.0])])];
        assert_eq!(build_labels(&traces, 8, 3), vec![1, 1, 1]);
    }

    #[test]
    fn single_step_single_layer_labels_that_set() {
        let traces = vec![rec(6, vec![sset(&[2, 5], &[0.9, 0.8])])];
        let labels = build_labels(&traces, 2, 8);
        assert_eq!(labels, vec![0, 0, 1, 0, 0, 1, 0, 0]);
    }

    #[test]
    fn label_frequency_matches_hand_tally() {
        // same tally as the uniform-set example: index 2 in three sets,
        // indices 1, 3, 4 once each; score sums favor index 3
        let traces = vec![rec(
            5,
            vec![
                sset(&[1, 2], &[0.30, 0.50]),
                sset(&[2, 3], &[0.40, 0.45]),
                sset(&[2, 4], &[0.35, 0.20]),
            ],
        )];
        let labels = build_labels(&traces, 2, 6);
        assert_eq!(labels, vec![0, 0, 1, 1, 0, 0]);
    }

    #[test]
    fn exactly_min_k_len_ones() {
        for (k, len) in [(3usize, 10usize), (16, 8), (5, 5), (0, 4)] {
            let traces = vec![rec(2, vec![sset(&[0, 1], &[0.5, 0.5])])];
            let labels = build_labels(&traces, k, len);
            let ones = labels.iter().filter(|&&l| l == 1).count();
            assert_eq!(ones, k.min(len));
        }
    }
}

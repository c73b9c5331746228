//! Decode orchestration: one session owns per-layer caches, the released
//! pool, policy bookkeeping and (for the adaptive policy) the scorer.
//!
//! Every step: score the incoming token, pick released tokens to rebuild,
//! run the batch forward, update the caches uniformly across layers, and
//! emit next-token logits.

use std::time::Instant;

use crate::controller::{
    score_token, scorer_input, select_rebuild, ControllerParams, ReleasedPool, ScoreState,
};
use crate::error::{Error, Result};
use crate::kvcache::{
    evict_and_append, remove_entry, select_victim, CumulativeScores, LayerKvCache, PolicyConfig,
    PolicyKind, SlicingKit,
};
use crate::model::{forward_batch, KvView, StepOutput, Token, TransformerParams};

/// Per-token keep-probability source. The production implementation wraps
/// the trained controller; tests inject fixed sequences.
pub trait TokenScorer {
    fn score(&mut self, token_embedding: &[f32], position: usize) -> Result<f32>;
}

/// Scores tokens with a trained controller.
pub struct ControllerScorer<'a> {
    params: &'a ControllerParams,
    state: ScoreState,
}

impl<'a> ControllerScorer<'a> {
    pub fn new(params: &'a ControllerParams) -> Self {
        ControllerScorer {
            params,
            state: ScoreState::new(params.hidden_dim),
        }
    }
}

impl TokenScorer for ControllerScorer<'_> {
    fn score(&mut self, token_embedding: &[f32], position: usize) -> Result<f32> {
        score_token(token_embedding, position, &mut self.state, self.params)
    }
}

/// Fixed score sequence, for constructed scenarios.
pub struct FixedScorer {
    scores: Vec<f32>,
    next: usize,
}

impl FixedScorer {
    pub fn new(scores: Vec<f32>) -> Self {
        FixedScorer { scores, next: 0 }
    }
}

impl TokenScorer for FixedScorer {
    fn score(&mut self, _x: &[f32], _position: usize) -> Result<f32> {
        let s = self.scores[self.next % self.scores.len()];
        self.next += 1;
        Ok(s)
    }
}

/// Wall-clock per step, with the scorer's share isolated.
#[derive(Debug, Clone, Default)]
pub struct StepTimings {
    pub total: Vec<f64>,
    pub controller: Vec<f64>,
}

impl StepTimings {
    pub fn total_seconds(&self) -> f64 {
        self.total.iter().sum()
    }

    pub fn controller_seconds(&self) -> f64 {
        self.controller.iter().sum()
    }
}

pub struct DecodeSession<'a> {
    lm: &'a TransformerParams,
    scorer: Option<Box<dyn TokenScorer + 'a>>,
    policy: PolicyConfig,
    caches: Vec<LayerKvCache>,
    cum: CumulativeScores,
    pool: ReleasedPool,
    kit: SlicingKit,
    n: usize,
    pub timings: StepTimings,
}

impl<'a> DecodeSession<'a> {
    pub fn new(lm: &'a TransformerParams, policy: PolicyConfig) -> Result<Self> {
        policy.validate()?;
        if policy.kind == PolicyKind::Adore {
            return Err(Error::Config(
                "adaptive policy needs a controller or scorer".into(),
            ));
        }
        Ok(Self::build(lm, policy, None))
    }

    pub fn with_controller(
        lm: &'a TransformerParams,
        policy: PolicyConfig,
        controller: &'a ControllerParams,
    ) -> Result<Self> {
        policy.validate()?;
        Ok(Self::build(
            lm,
            policy,
            Some(Box::new(ControllerScorer::new(controller))),
        ))
    }

    pub fn with_scorer(
        lm: &'a TransformerParams,
        policy: PolicyConfig,
        scorer: Box<dyn TokenScorer + 'a>,
    ) -> Result<Self> {
        policy.validate()?;
        Ok(Self::build(lm, policy, Some(scorer)))
    }

    fn build(
        lm: &'a TransformerParams,
        policy: PolicyConfig,
        scorer: Option<Box<dyn TokenScorer + 'a>>,
    ) -> Self {
        let capacity = match policy.kind {
            PolicyKind::Full => usize::MAX,
            _ => policy.capacity,
        };
        let d = lm.config.model_dim;
        let caches = (0..lm.config.n_layers)
            .map(|_| LayerKvCache::new(capacity, d))
            .collect();
        let kit = if policy.kind == PolicyKind::Full {
            SlicingKit::default()
        } else {
            SlicingKit::for_capacity(policy.capacity)
        };
        DecodeSession {
            lm,
            scorer,
            policy,
            caches,
            cum: CumulativeScores::default(),
            pool: ReleasedPool::default(),
            kit,
            n: 0,
            timings: StepTimings::default(),
        }
    }

    /// Tokens processed so far; the next token lands at this position.
    pub fn position(&self) -> usize {
        self.n
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn caches(&self) -> &[LayerKvCache] {
        &self.caches
    }

    pub fn pool(&self) -> &ReleasedPool {
        &self.pool
    }

    fn uses_pool(&self) -> bool {
        matches!(self.policy.kind, PolicyKind::Adore | PolicyKind::H2o)
    }

    /// Processes one token and returns the logits predicting its successor.
    pub fn step_logits(&mut self, token: Token) -> Result<Vec<f32>> {
        let step_start = Instant::now();
        let n = self.n;

        // 1. keep-probability for the arriving token
        let mut controller_secs = 0.0f64;
        let sigma = if let Some(scorer) = self.scorer.as_mut() {
            let t0 = Instant::now();
            let s = scorer.score(scorer_input(self.lm, token), n)?;
            controller_secs = t0.elapsed().as_secs_f64();
            s
        } else {
            0.0
        };

        // 2. released tokens worth rebuilding
        let rebuild = if self.policy.rebuild > 0 {
            select_rebuild(&self.pool, self.policy.rebuild)
        } else {
            Vec::new()
        };
        #[cfg(debug_assertions)]
        for (_, pos) in &rebuild {
            assert!(
                !self.caches[0].contains_position(*pos),
                "rebuild candidate still cached"
            );
        }

        // 3. joint forward over rebuilt tokens plus the current one
        let mut batch: Vec<(Token, usize)> = rebuild
            .iter()
            .map(|&(t, p)| (t, p as usize))
            .collect();
        batch.push((token, n));
        let views: Vec<KvView> = self
            .caches
            .iter()
            .map(|c| KvView {
                keys: &c.keys,
                values: &c.values,
                positions: c.positions(),
            })
            .collect();
        let out = forward_batch(&batch, &views, self.lm)?;
        drop(views);

        // 4. attention mass bookkeeping (heavy-hitter policy)
        let occ0 = self.caches[0].occupancy();
        let b = batch.len();
        let mass = if self.policy.kind == PolicyKind::H2o {
            let layers = self.lm.config.n_layers as f32;
            let mut mass = vec![0.0f32; occ0 + b];
            for row in &out.attention.head_sum {
                for (m, &w) in mass.iter_mut().zip(row) {
                    *m += w / layers;
                }
            }
            self.cum.add_mass(&mass[..occ0]);
            mass
        } else {
            Vec::new()
        };

        // 5. uniform cache update: current token always enters
        let current_score = match self.policy.kind {
            PolicyKind::H2o => mass[occ0 + b - 1],
            _ => sigma,
        };
        self.insert_entry(token, n as u32, sigma, current_score, &out, b - 1, false);

        if self.policy.insert_rebuilt {
            for (bi, &(rtok, rpos)) in rebuild.iter().enumerate() {
                let (r_sigma, r_score) = match self.policy.kind {
                    PolicyKind::H2o => (0.0, mass[occ0 + bi]),
                    _ => {
                        let s = self.pool_score(rpos);
                        (s, s)
                    }
                };
                self.insert_entry(rtok, rpos, r_sigma, r_score, &out, bi, true);
            }
        }

        self.n += 1;
        self.audit();

        let total = step_start.elapsed().as_secs_f64();
        self.timings.total.push(total);
        self.timings.controller.push(controller_secs);
        Ok(out.logits)
    }

    fn pool_score(&self, position: u32) -> f32 {
        let idx = self
            .pool
            .positions()
            .iter()
            .position(|&p| p == position)
            .expect("rebuilt token missing from pool");
        self.pool.scores()[idx]
    }

    /// Inserts one row (batch index `bi` of `out`) into every layer.
    /// `conditional` governs rebuilt rows: they only displace an entry
    /// scored strictly below them, otherwise they stay in the pool.
    #[allow(clippy::too_many_arguments)]
    fn insert_entry(
        &mut self,
        token: Token,
        position: u32,
        sigma: f32,
        policy_score: f32,
        out: &StepOutput,
        bi: usize,
        conditional: bool,
    ) {
        let at_capacity = self.policy.kind != PolicyKind::Full
            && self.caches[0].occupancy() == self.policy.capacity;

        let mut victim = None;
        if at_capacity {
            let aux: Vec<f32> = match self.policy.kind {
                PolicyKind::Adore => self.caches[0].scores().to_vec(),
                PolicyKind::H2o => self.cum.as_slice().to_vec(),
                _ => Vec::new(),
            };
            let v = select_victim(&self.policy, &self.caches[0], &aux, self.n);
            let v = v.expect("bounded policy must name a victim");
            if conditional {
                let vic_score = aux.get(v).copied().unwrap_or(f32::NEG_INFINITY);
                if policy_score <= vic_score {
                    return;
                }
            }
            victim = Some(v);
        }

        if let Some(v) = victim {
            let evicted_cum = if self.policy.kind == PolicyKind::H2o {
                self.cum.remove(v)
            } else {
                0.0
            };
            let mut entry = None;
            for (l, cache) in self.caches.iter_mut().enumerate() {
                let e = remove_entry(cache, &mut self.kit, self.policy.slice_mode, v);
                if l == 0 {
                    entry = Some(e);
                }
            }
            if self.uses_pool() {
                let e = entry.unwrap();
                let score = if self.policy.kind == PolicyKind::H2o {
                    evicted_cum
                } else {
                    e.score
                };
                self.pool.push(e.token, e.position, score);
            }
        }

        for (l, cache) in self.caches.iter_mut().enumerate() {
            let ev = evict_and_append(
                cache,
                &mut self.kit,
                self.policy.slice_mode,
                out.new_keys[l].row(bi),
                out.new_values[l].row(bi),
                token,
                position,
                sigma,
                None,
            );
            debug_assert!(ev.is_none());
        }
        if self.policy.kind == PolicyKind::H2o {
            self.cum.push(policy_score);
        }
        self.pool.remove_position(position);
    }

    fn audit(&self) {
        #[cfg(debug_assertions)]
        {
            let p0 = self.caches[0].positions();
            for c in &self.caches[1..] {
                assert_eq!(c.positions(), p0, "layers disagree on cached positions");
            }
            if self.policy.kind != PolicyKind::Full {
                assert!(self.caches[0].occupancy() <= self.policy.capacity);
            }
            if self.uses_pool() {
                // every processed position is cached or released, never both
                let mut seen = vec![false; self.n];
                for &p in p0 {
                    assert!(!seen[p as usize]);
                    seen[p as usize] = true;
                }
                for &p in self.pool.positions() {
                    assert!(!seen[p as usize], "position {p} cached and pooled");
                    seen[p as usize] = true;
                }
                assert!(seen.iter().all(|&s| s), "a position fell out of tracking");
            }
            if self.policy.kind == PolicyKind::H2o {
                assert_eq!(self.cum.len(), self.caches[0].occupancy());
            }
        }
    }

    /// Processes a token and greedily picks the next one.
    pub fn decode_step(&mut self, token: Token) -> Result<Token> {
        let logits = self.step_logits(token)?;
        Ok(argmax(&logits))
    }
}

/// Smallest index among the maxima, so decoding is deterministic.
pub fn argmax(logits: &[f32]) -> Token {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as Token
}

/// Result of a generation run.
#[derive(Debug, Clone)]
pub struct GenerateOutput {
    /// Prompt plus generated continuation.
    pub tokens: Vec<Token>,
    /// Just the continuation.
    pub new_tokens: Vec<Token>,
    pub timings: StepTimings,
    /// Seconds spent inside the generation loop (prompt ingestion included).
    pub decode_seconds: f64,
    /// Seconds spent on the generated tokens only.
    pub generate_seconds: f64,
}

/// Greedy generation under a policy. Deterministic for a fixed model,
/// prompt and policy; the seed only matters to callers sampling prompts.
pub fn generate(
    lm: &TransformerParams,
    controller: Option<&ControllerParams>,
    policy: PolicyConfig,
    prompt: &[Token],
    max_new: usize,
) -> Result<GenerateOutput> {
    assert!(!prompt.is_empty(), "prompt must be non-empty");
    let mut session = match (policy.kind, controller) {
        (PolicyKind::Adore, Some(c)) => DecodeSession::with_controller(lm, policy, c)?,
        (PolicyKind::Adore, None) => {
            return Err(Error::Config("adaptive policy needs a controller".into()))
        }
        _ => DecodeSession::new(lm, policy)?,
    };

    let t_all = Instant::now();
    let mut logits = Vec::new();
    for &t in prompt {
        logits = session.step_logits(t)?;
    }

    let t_gen = Instant::now();
    let mut tokens = prompt.to_vec();
    let mut new_tokens = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let next = argmax(&logits);
        new_tokens.push(next);
        tokens.push(next);
        if new_tokens.len() == max_new {
            break;
        }
        logits = session.step_logits(next)?;
    }
    let generate_seconds = t_gen.elapsed().as_secs_f64();
    Ok(GenerateOutput {
        tokens,
        new_tokens,
        timings: std::mem::take(&mut session.timings),
        decode_seconds: t_all.elapsed().as_secs_f64(),
        generate_seconds,
    })
}

pub mod oracle {
    //! Exact top-K decoding: retains every KV row and, at each layer,
    //! attends only over the K rows with the largest query-key products.

    use super::*;
    use crate::model::oracle_topk_step;
    use crate::model::GrowingKv;

    pub struct OracleTopK<'a> {
        lm: &'a TransformerParams,
        pub kv: GrowingKv,
        k: usize,
        n: usize,
    }

    impl<'a> OracleTopK<'a> {
        pub fn new(lm: &'a TransformerParams, k: usize) -> Self {
            OracleTopK {
                lm,
                kv: GrowingKv::new(&lm.config),
                k,
                n: 0,
            }
        }

        pub fn step_logits(&mut self, token: Token) -> Result<Vec<f32>> {
            let out = oracle_topk_step(token, self.n, &self.kv, self.k, self.lm)?;
            self.kv.push(&out, self.n);
            self.n += 1;
            Ok(out.logits)
        }
    }
}

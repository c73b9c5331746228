//! Teacher-forced perplexity under any cache policy, bucketed by target
//! position so length extrapolation is visible.

use crate::controller::ControllerParams;
use crate::engine::DecodeSession;
use crate::error::{Error, Result};
use crate::kvcache::{PolicyConfig, PolicyKind};
use crate::model::{Token, TransformerParams};

#[derive(Debug, Clone)]
pub struct BucketPpl {
    /// 1-based bucket index; covers target positions ((b-1)*B, b*B].
    pub bucket: usize,
    pub nll_sum: f64,
    pub tokens: usize,
}

impl BucketPpl {
    pub fn ppl(&self) -> f64 {
        if self.tokens == 0 {
            f64::NAN
        } else {
            (self.nll_sum / self.tokens as f64).exp()
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyEval {
    pub policy: String,
    pub buckets: Vec<BucketPpl>,
}

impl PolicyEval {
    /// Perplexity over target positions in (lo, hi] (0 means "from start").
    pub fn ppl_in_range(&self, bucket_size: usize, lo: usize, hi: usize) -> f64 {
        let mut nll = 0.0;
        let mut n = 0usize;
        for b in &self.buckets {
            let b_hi = b.bucket * bucket_size;
            if b_hi > lo && b_hi <= hi {
                nll += b.nll_sum;
                n += b.tokens;
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            (nll / n as f64).exp()
        }
    }

    pub fn overall_ppl(&self) -> f64 {
        let nll: f64 = self.buckets.iter().map(|b| b.nll_sum).sum();
        let n: usize = self.buckets.iter().map(|b| b.tokens).sum();
        (nll / n.max(1) as f64).exp()
    }
}

/// Numerically careful negative log likelihood of `target` under `logits`.
pub fn nll_of(logits: &[f32], target: Token) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse: f64 = logits.iter().map(|&l| ((l as f64) - max).exp()).sum();
    let lt = logits[target as usize] as f64;
    -(lt - max - lse.ln())
}

/// Runs one policy over held-out windows. The policy's cache mechanics
/// decide which past KV rows each position may attend to; inputs are the
/// true tokens (teacher forcing).
pub fn eval_policy_ppl(
    lm: &TransformerParams,
    controller: Option<&ControllerParams>,
    policy: PolicyConfig,
    windows: &[Vec<Token>],
    bucket_size: usize,
) -> Result<PolicyEval> {
    let max_len = windows.iter().map(Vec::len).max().unwrap_or(0);
    let n_buckets = max_len.div_ceil(bucket_size).max(1);
    let mut buckets: Vec<BucketPpl> = (1..=n_buckets)
        .map(|b| BucketPpl {
            bucket: b,
            nll_sum: 0.0,
            tokens: 0,
        })
        .collect();

    for window in windows {
        if window.len() < 2 {
            continue;
        }
        let mut session = match (policy.kind, controller) {
            (PolicyKind::Adore, Some(c)) => DecodeSession::with_controller(lm, policy, c)?,
            (PolicyKind::Adore, None) => {
                return Err(Error::Config("adaptive policy needs a controller".into()))
            }
            _ => DecodeSession::new(lm, policy)?,
        };
        for t in 0..window.len() - 1 {
            let logits = session.step_logits(window[t])?;
            let target_pos = t + 1;
            let bucket = (target_pos - 1) / bucket_size;
            buckets[bucket].nll_sum += nll_of(&logits, window[t + 1]);
            buckets[bucket].tokens += 1;
        }
    }
    Ok(PolicyEval {
        policy: policy.kind.name().to_string(),
        buckets,
    })
}

/// Evaluates several policies in parallel (sessions are independent).
pub fn eval_policies_ppl(
    lm: &TransformerParams,
    controller: Option<&ControllerParams>,
    policies: &[PolicyConfig],
    windows: &[Vec<Token>],
    bucket_size: usize,
) -> Result<Vec<PolicyEval>> {
    if policies.len() <= 1 {
        return policies
            .iter()
            .map(|&p| eval_policy_ppl(lm, controller, p, windows, bucket_size))
            .collect();
    }
    let mut slots: Vec<Option<Result<PolicyEval>>> = policies.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (i, &p) in policies.iter().enumerate() {
            handles.push((
                i,
                scope.spawn(move || eval_policy_ppl(lm, controller, p, windows, bucket_size)),
            ));
        }
        for (i, h) in handles {
            slots[i] = Some(h.join().expect("ppl worker panicked"));
        }
    });
    slots.into_iter().map(|s| s.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn uniform_logits_model_scores_vocab_perplexity() {
        let cfg = ModelConfig {
            n_layers: 2,
            model_dim: 16,
            n_heads: 2,
            vocab: 256,
            max_position: 64,
            train_context: 16,
        };
        let lm = TransformerParams::zeros(cfg);
        let windows: Vec<Vec<Token>> = vec![(0..32).map(|i| (i * 7 % 256) as Token).collect()];
        let policy = PolicyConfig::new(PolicyKind::Full, 0, 1);
        let eval = eval_policy_ppl(&lm, None, policy, &windows, 16).unwrap();
        let ppl = eval.overall_ppl();
        assert!((ppl - 256.0).abs() < 1e-3, "ppl {ppl}");
    }

    #[test]
    fn buckets_partition_positions() {
        let cfg = ModelConfig {
            n_layers: 1,
            model_dim: 8,
            n_heads: 1,
            vocab: 16,
            max_position: 64,
            train_context: 8,
        };
        let lm = TransformerParams::random(cfg, 4);
        let windows: Vec<Vec<Token>> = vec![(0..33).map(|i| (i % 16) as Token).collect()];
        let policy = PolicyConfig::new(PolicyKind::Window, 4, 2);
        let eval = eval_policy_ppl(&lm, None, policy, &windows, 8).unwrap();
        let total: usize = eval.buckets.iter().map(|b| b.tokens).sum();
        assert_eq!(total, 32);
        assert_eq!(eval.buckets[0].tokens, 8);
        assert_eq!(eval.buckets.len(), 5);
    }

    #[test]
    fn nll_matches_direct_softmax() {
        let logits = vec![0.5f32, -1.0, 2.0, 0.0];
        let direct = {
            let exps: Vec<f64> = logits.iter().map(|&l| (l as f64).exp()).collect();
            let sum: f64 = exps.iter().sum();
            -(exps[2] / sum).ln()
        };
        assert!((nll_of(&logits, 2) - direct).abs() < 1e-12);
    }
}

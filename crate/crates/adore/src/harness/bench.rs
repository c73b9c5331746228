//! Steady-state decode throughput: tokens generated per second, per policy
//! and target length, with the controller's runtime share isolated.

use crate::controller::ControllerParams;
use crate::engine::generate;
use crate::error::Result;
use crate::kvcache::PolicyConfig;
use crate::model::{Token, TransformerParams};
use crate::numkernel::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub policy: String,
    pub length: usize,
    pub trial: usize,
    pub tokens_per_sec: f64,
    pub generate_seconds: f64,
    pub controller_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BenchSummary {
    pub policy: String,
    pub length: usize,
    pub mean_tps: f64,
    pub stdev_tps: f64,
    /// Controller seconds over total decode seconds, averaged over trials.
    pub controller_share: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summaries: Vec<BenchSummary>,
}

impl BenchReport {
    pub fn summary(&self, policy: &str, length: usize) -> Option<&BenchSummary> {
        self.summaries
            .iter()
            .find(|s| s.policy == policy && s.length == length)
    }
}

/// Byte corpus slice reused as a prompt; the same (length, trial) pair
/// yields the same prompt for every policy, so comparisons are paired.
fn sample_prompt(corpus: &[u8], prompt_len: usize, seed: u64, length: usize, trial: usize) -> Vec<Token> {
    let mut rng = SplitMix64::new(
        seed ^ (length as u64).wrapping_mul(0x9E3779B9) ^ (trial as u64).wrapping_mul(0x85EBCA6B),
    );
    let max_start = corpus.len().saturating_sub(prompt_len).max(1);
    let start = rng.below(max_start);
    corpus[start..(start + prompt_len).min(corpus.len())]
        .iter()
        .map(|&b| b as Token)
        .collect()
}

/// Times generation runs. Checkpoint loading and prompt ingestion are
/// excluded from the measured window; only the generation loop counts.
#[allow(clippy::too_many_arguments)]
pub fn bench_throughput(
    lm: &TransformerParams,
    controller: Option<&ControllerParams>,
    policies: &[PolicyConfig],
    lengths: &[usize],
    trials: usize,
    prompt_len: usize,
    corpus: &[u8],
    seed: u64,
) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for &policy in policies {
        for &length in lengths {
            let mut tps_samples = Vec::with_capacity(trials);
            let mut share_sum = 0.0;
            for trial in 0..trials {
                let prompt = sample_prompt(corpus, prompt_len, seed, length, trial);
                let out = generate(lm, controller, policy, &prompt, length)?;
                let tps = length as f64 / out.generate_seconds.max(1e-12);
                let prompt_steps = prompt.len();
                let gen_controller: f64 =
                    out.timings.controller[prompt_steps.min(out.timings.controller.len())..]
                        .iter()
                        .sum();
                share_sum += gen_controller / out.generate_seconds.max(1e-12);
                report.rows.push(BenchRow {
                    policy: policy.kind.name().to_string(),
                    length,
                    trial,
                    tokens_per_sec: tps,
                    generate_seconds: out.generate_seconds,
                    controller_seconds: gen_controller,
                });
                tps_samples.push(tps);
            }
            let mean = tps_samples.iter().sum::<f64>() / tps_samples.len().max(1) as f64;
            let var = tps_samples
                .iter()
                .map(|t| (t - mean) * (t - mean))
                .sum::<f64>()
                / tps_samples.len().max(1) as f64;
            report.summaries.push(BenchSummary {
                policy: policy.kind.name().to_string(),
                length,
                mean_tps: mean,
                stdev_tps: var.sqrt(),
                controller_share: share_sum / trials.max(1) as f64,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::PolicyKind;
    use crate::model::ModelConfig;

    #[test]
    fn bench_produces_rows_for_every_cell() {
        let cfg = ModelConfig {
            n_layers: 1,
            model_dim: 8,
            n_heads: 1,
            vocab: 64,
            max_position: 128,
            train_context: 16,
        };
        let lm = TransformerParams::random(cfg, 3);
        let corpus: Vec<u8> = (0..512).map(|i| (i % 60 + 32) as u8).collect();
        let policies = [
            PolicyConfig::new(PolicyKind::Full, 0, 1),
            PolicyConfig::new(PolicyKind::Window, 8, 4),
        ];
        let report =
            bench_throughput(&lm, None, &policies, &[8, 16], 2, 8, &corpus, 7).unwrap();
        assert_eq!(report.rows.len(), 2 * 2 * 2);
        assert_eq!(report.summaries.len(), 4);
        assert!(report.rows.iter().all(|r| r.tokens_per_sec > 0.0));
        assert!(report.summary("window", 16).is_some());
    }
}

//! Attention-trace collection: which past positions each decoding step
//! actually attends to, per layer, plus the cross-layer uniform set.

use super::{full_forward, ModelConfig, Token, TransformerParams};
use crate::error::Result;

/// Past positions selected by one layer at one step, with the attention
/// weight backing each index. Indices are sorted ascending; `scores[i]`
/// belongs to `indices[i]`. Scores exist in memory only; the trace file
/// format stores bare index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub indices: Vec<u32>,
    pub scores: Vec<f32>,
}

impl ScoredSet {
    pub fn score_of(&self, idx: u32) -> Option<f32> {
        self.indices
            .binary_search(&idx)
            .ok()
            .map(|i| self.scores[i])
    }
}

/// One decoding step's attention selection.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// Step index n; the sets cover past positions strictly below n.
    pub step: u32,
    /// Per-layer top-ceil(K/2) positions by head-maxed attention weight.
    pub layer_sets: Vec<ScoredSet>,
    /// Cross-layer top-K set at this step, sorted ascending.
    pub uniform: Vec<u32>,
    /// Token processed at this step.
    pub token: Token,
}

/// Cross-layer aggregation: ranks every past position by how many layer
/// sets contain it, breaking ties toward the larger summed attention
/// weight and then toward the more recent position. Returns the top
/// min(k, n_past) positions sorted ascending.
pub fn uniform_topk_from_layer_sets(
    layer_sets: &[ScoredSet],
    k: usize,
    n_past: usize,
) -> Vec<u32> {
    let mut count = vec![0u32; n_past];
    let mut score_sum = vec![0.0f32; n_past];
    for set in layer_sets {
        for (i, &idx) in set.indices.iter().enumerate() {
            let idx = idx as usize;
            debug_assert!(idx < n_past, "set index beyond past positions");
            count[idx] += 1;
            score_sum[idx] += set.scores[i];
        }
    }
    let mut order: Vec<usize> = (0..n_past).collect();
    order.sort_by(|&a, &b| {
        count[b]
            .cmp(&count[a])
            .then(score_sum[b].partial_cmp(&score_sum[a]).unwrap())
            .then(b.cmp(&a))
    });
    let mut out: Vec<u32> = order.iter().take(k.min(n_past)).map(|&i| i as u32).collect();
    out.sort_unstable();
    out
}

/// Head-maxed attention row of one layer for query position `n`, restricted
/// to past positions, reduced to its top-`k_half` entries.
pub fn layer_top_set(probs: &[crate::numkernel::Matrix], n: usize, k_half: usize) -> ScoredSet {
    let mut weight = vec![0.0f32; n];
    for p in probs {
        let row = p.row(n);
        for j in 0..n {
            if row[j] > weight[j] {
                weight[j] = row[j];
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| weight[b].partial_cmp(&weight[a]).unwrap().then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(k_half.min(n)).collect();
    picked.sort_unstable();
    ScoredSet {
        indices: picked.iter().map(|&i| i as u32).collect(),
        scores: picked.iter().map(|&i| weight[i]).collect(),
    }
}

/// Runs full attention over one sequence and extracts a trace per step.
pub fn trace_sequence(
    tokens: &[Token],
    params: &TransformerParams,
    k: usize,
) -> Result<Vec<TraceRecord>> {
    let cfg = &params.config;
    let k_half = k.div_ceil(2);
    let acts = full_forward(tokens, params, None)?;
    let mut records = Vec::with_capacity(tokens.len());
    for n in 0..tokens.len() {
        let layer_sets: Vec<ScoredSet> = (0..cfg.n_layers)
            .map(|l| layer_top_set(acts.probs(l), n, k_half))
            .collect();
        let uniform = uniform_topk_from_layer_sets(&layer_sets, k, n);
        records.push(TraceRecord {
            step: n as u32,
            layer_sets,
            uniform,
            token: tokens[n],
        });
    }
    Ok(records)
}

/// Traces for many sequences. Sequences are independent, so they are
/// spread over `threads` workers; output order matches input order.
pub fn collect_traces(
    params: &TransformerParams,
    sequences: &[Vec<Token>],
    k: usize,
    threads: usize,
) -> Result<Vec<Vec<TraceRecord>>> {
    let threads = threads.max(1).min(sequences.len().max(1));
    if threads <= 1 || sequences.len() <= 1 {
        return sequences
            .iter()
            .map(|s| trace_sequence(s, params, k))
            .collect();
    }
    let chunk = sequences.len().div_ceil(threads);
    let mut results: Vec<Option<Result<Vec<Vec<TraceRecord>>>>> =
        (0..threads).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (t, chunk_seqs) in sequences.chunks(chunk).enumerate() {
            handles.push((
                t,
                scope.spawn(move || {
                    chunk_seqs
                        .iter()
                        .map(|s| trace_sequence(s, params, k))
                        .collect::<Result<Vec<_>>>()
                }),
            ));
        }
        for (t, h) in handles {
            results[t] = Some(h.join().expect("trace worker panicked"));
        }
    });
    let mut out = Vec::with_capacity(sequences.len());
    for r in results.into_iter().flatten() {
        out.extend(r?);
    }
    Ok(out)
}

/// Sanity bound used by callers sizing trace buffers.
pub fn max_set_size(config: &ModelConfig, k: usize) -> usize {
    config.n_layers * k.div_ceil(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerParams;

    fn set(indices: &[u32], scores: &[f32]) -> ScoredSet {
        ScoredSet {
            indices: indices.to_vec(),
            scores: scores.to_vec(),
        }
    }

    #[test]
    fn identical_layer_sets_collapse_to_that_set() {
        let sets = vec![set(&[1, 3], &[0.5, 0.4]), set(&[1, 3], &[0.6, 0.2])];
        assert_eq!(uniform_topk_from_layer_sets(&sets, 2, 6), vec![1, 3]);
    }

    #[test]
    fn fewer_past_positions_than_k_returns_all() {
        let sets = vec![set(&[0, 1], &[0.5, 0.4])];
        assert_eq!(uniform_topk_from_layer_sets(&sets, 16, 3), vec![0, 1, 2]);
    }

    // Three layers with sets {1,2}, {2,3}, {2,4}: index 2 appears three
    // times, the rest once each. With K=2 the second slot goes to the
    // frequency tie winner.
    #[test]
    fn frequency_count_matches_hand_tally() {
        // score sums: 1 -> 0.30, 3 -> 0.45, 4 -> 0.20; 3 wins the tie
        let sets = vec![
            set(&[1, 2], &[0.30, 0.50]),
            set(&[2, 3], &[0.40, 0.45]),
            set(&[2, 4], &[0.35, 0.20]),
        ];
        assert_eq!(uniform_topk_from_layer_sets(&sets, 2, 5), vec![2, 3]);

        // equal score sums: recency (larger position) wins
        let sets = vec![
            set(&[1, 2], &[0.25, 0.50]),
            set(&[2, 3], &[0.40, 0.25]),
            set(&[2, 4], &[0.35, 0.25]),
        ];
        assert_eq!(uniform_topk_from_layer_sets(&sets, 2, 5), vec![2, 4]);
    }

    #[test]
    fn traces_have_valid_past_positions_and_sizes() {
        let cfg = crate::model::ModelConfig {
            n_layers: 3,
            model_dim: 12,
            n_heads: 2,
            vocab: 16,
            max_position: 32,
            train_context: 16,
        };
        let params = TransformerParams::random(cfg, 4);
        let tokens: Vec<u32> = (0..14).map(|i| (i * 7 % 16) as u32).collect();
        let k = 4;
        let recs = trace_sequence(&tokens, &params, k).unwrap();
        assert_eq!(recs.len(), 14);
        for (n, r) in recs.iter().enumerate() {
            assert_eq!(r.step as usize, n);
            assert_eq!(r.token, tokens[n]);
            assert_eq!(r.uniform.len(), k.min(n));
            for set in &r.layer_sets {
                assert_eq!(set.indices.len(), 2usize.min(n));
                assert!(set.indices.iter().all(|&i| (i as usize) < n));
                assert!(set.indices.windows(2).all(|w| w[0] < w[1]));
            }
            assert!(r.uniform.iter().all(|&i| (i as usize) < n));
        }
    }

    #[test]
    fn parallel_collection_matches_serial() {
        let cfg = crate::model::ModelConfig {
            n_layers: 2,
            model_dim: 12,
            n_heads: 2,
            vocab: 16,
            max_position: 32,
            train_context: 16,
        };
        let params = TransformerParams::random(cfg, 6);
        let seqs: Vec<Vec<u32>> = (0..5)
            .map(|s| (0..10).map(|i| ((i * 3 + s) % 16) as u32).collect())
            .collect();
        let serial = collect_traces(&params, &seqs, 4, 1).unwrap();
        let parallel = collect_traces(&params, &seqs, 4, 4).unwrap();
        assert_eq!(serial, parallel);
    }
}

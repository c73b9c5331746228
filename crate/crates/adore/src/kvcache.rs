//! Fixed-capacity per-layer KV store, eviction policies, the exact top-K
//! selection oracle, and row removal as a 0/1 matrix product.
//!
//! Scheduling is uniform across layers: one victim index per step, applied
//! to every layer, so entry positions stay identical everywhere.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::Token;
use crate::numkernel::{matmul, Matrix};

/// Eviction policy family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// No eviction; the cache grows with the stream.
    Full,
    /// Keep the most recent entries only.
    Window,
    /// Keep recent entries plus every position divisible by `stride`.
    Strided { stride: usize },
    /// Never evict the first `n_sink` positions; otherwise like Window.
    Sink { n_sink: usize },
    /// Evict the entry with the least accumulated attention mass.
    H2o,
    /// Evict the entry with the lowest controller keep-probability.
    Adore,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Full => "full",
            PolicyKind::Window => "window",
            PolicyKind::Strided { .. } => "strided",
            PolicyKind::Sink { .. } => "sink",
            PolicyKind::H2o => "h2o",
            PolicyKind::Adore => "adore",
        }
    }
}

/// How cached rows are physically removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SliceMode {
    /// Multiply by a precomputed identity-minus-row matrix.
    #[default]
    Matmul,
    /// Plain copy-down deletion.
    Direct,
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Cache capacity m.
    pub capacity: usize,
    /// Number of released tokens rebuilt per step (adore / h2o only).
    pub rebuild: usize,
    /// Top-K parameter the backbone was aligned to.
    pub top_k: usize,
    pub slice_mode: SliceMode,
    /// Rebuilt rows may enter the cache, displacing the lowest-scored
    /// entries; false discards them after the step they served.
    pub insert_rebuilt: bool,
}

pub const DEFAULT_SINKS: usize = 4;
pub const DEFAULT_STRIDE: usize = 8;

impl PolicyConfig {
    pub fn new(kind: PolicyKind, capacity: usize, top_k: usize) -> Self {
        PolicyConfig {
            kind,
            capacity,
            rebuild: 0,
            top_k,
            slice_mode: SliceMode::default(),
            insert_rebuilt: true,
        }
    }

    pub fn with_rebuild(mut self, r: usize) -> Self {
        self.rebuild = r;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != PolicyKind::Full {
            if self.capacity == 0 {
                return Err(Error::Config("cache capacity must be positive".into()));
            }
            if self.capacity < self.top_k {
                return Err(Error::Config(format!(
                    "cache capacity {} smaller than top-K {}",
                    self.capacity, self.top_k
                )));
            }
        }
        if self.rebuild > 0 && !matches!(self.kind, PolicyKind::Adore | PolicyKind::H2o) {
            return Err(Error::Config(format!(
                "policy {} cannot rebuild released tokens",
                self.kind.name()
            )));
        }
        if self.rebuild > self.capacity {
            return Err(Error::Config(format!(
                "rebuild count {} exceeds capacity {}",
                self.rebuild, self.capacity
            )));
        }
        if let PolicyKind::Sink { n_sink } = self.kind {
            if n_sink >= self.capacity {
                return Err(Error::Config(format!(
                    "{n_sink} sink positions leave no room in a cache of {}",
                    self.capacity
                )));
            }
        }
        if let PolicyKind::Strided { stride } = self.kind {
            if stride == 0 {
                return Err(Error::Config("stride must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Identity matrix with row `j` (0-based) deleted: left-multiplying by it
/// removes that row. For m = 1 the result has zero rows.
pub fn build_slicing_matrix(j: usize, m: usize) -> Matrix {
    assert!(j < m, "slicing row {j} out of range for {m} rows");
    let mut s = Matrix::zeros(m - 1, m);
    for out_row in 0..m - 1 {
        let src = if out_row < j { out_row } else { out_row + 1 };
        s[(out_row, src)] = 1.0;
    }
    s
}

/// Removes row `j` via the slicing-matrix product. Every output element is
/// one copied input plus zeros, so the result is bit-identical to direct
/// deletion.
pub fn slice_remove_row(cache_matrix: &Matrix, j: usize) -> Matrix {
    let s = build_slicing_matrix(j, cache_matrix.rows());
    matmul(&s, cache_matrix)
}

/// Slicing matrices, precomputed per row count.
#[derive(Debug, Default)]
pub struct SlicingKit {
    by_rows: HashMap<usize, Vec<Matrix>>,
}

impl SlicingKit {
    /// Precompute every S_j for caches of `m` rows (the only size the
    /// steady-state eviction path touches).
    pub fn for_capacity(m: usize) -> Self {
        let mut kit = SlicingKit::default();
        if m > 0 {
            kit.by_rows
                .insert(m, (0..m).map(|j| build_slicing_matrix(j, m)).collect());
        }
        kit
    }

    pub fn remove_row(&mut self, mat: &Matrix, j: usize, mode: SliceMode) -> Matrix {
        match mode {
            SliceMode::Direct => mat.without_row(j),
            SliceMode::Matmul => {
                let m = mat.rows();
                let mats = self
                    .by_rows
                    .entry(m)
                    .or_insert_with(|| (0..m).map(|j| build_slicing_matrix(j, m)).collect());
                matmul(&mats[j], mat)
            }
        }
    }
}

/// Indices of the `k` largest entries of q x K^T, all of them if there are
/// fewer rows than k. Ties go to the smaller index. Sorted ascending.
pub fn ideal_topk_indices(q: &[f32], k_full: &Matrix, k: usize) -> Vec<usize> {
    let scores: Vec<f32> = (0..k_full.rows())
        .map(|i| crate::numkernel::dot(q, k_full.row(i)))
        .collect();
    topk_by_score(&scores, k)
}

/// Shared top-k selection: score descending, index ascending on ties.
pub fn topk_by_score(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut out: Vec<usize> = order.into_iter().take(k.min(scores.len())).collect();
    out.sort_unstable();
    out
}

/// Running attention mass received by each cached entry (heavy-hitter
/// bookkeeping). Values are head-summed and layer-averaged per step.
#[derive(Debug, Clone, Default)]
pub struct CumulativeScores(Vec<f32>);

impl CumulativeScores {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, initial: f32) {
        self.0.push(initial.max(0.0));
    }

    pub fn remove(&mut self, idx: usize) -> f32 {
        self.0.remove(idx)
    }

    pub fn add_mass(&mut self, received: &[f32]) {
        assert_eq!(received.len(), self.0.len(), "mass row length mismatch");
        for (c, &r) in self.0.iter_mut().zip(received) {
            debug_assert!(r >= 0.0);
            *c += r;
        }
    }
}

/// One transformer layer's cached K/V rows plus entry bookkeeping. All
/// layers of a session hold identical positions, tokens and scores; only
/// the key/value payloads differ.
#[derive(Debug, Clone)]
pub struct LayerKvCache {
    capacity: usize,
    pub keys: Matrix,
    pub values: Matrix,
    positions: Vec<u32>,
    token_ids: Vec<Token>,
    /// Controller keep-probability per entry (0.0 where no controller runs).
    scores: Vec<f32>,
}

/// What left the cache on an eviction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvictedEntry {
    pub token: Token,
    pub position: u32,
    pub score: f32,
}

impl LayerKvCache {
    pub fn new(capacity: usize, dim: usize) -> Self {
        LayerKvCache {
            capacity,
            keys: Matrix::zeros(0, dim),
            values: Matrix::zeros(0, dim),
            positions: Vec::new(),
            token_ids: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn occupancy(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn token_ids(&self) -> &[Token] {
        &self.token_ids
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn contains_position(&self, pos: u32) -> bool {
        self.positions.contains(&pos)
    }

    fn check_invariants(&self) {
        debug_assert_eq!(self.keys.rows(), self.values.rows());
        debug_assert_eq!(self.keys.rows(), self.positions.len());
        debug_assert_eq!(self.token_ids.len(), self.positions.len());
        debug_assert_eq!(self.scores.len(), self.positions.len());
        #[cfg(debug_assertions)]
        {
            let mut seen = self.positions.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), self.positions.len(), "duplicate cached positions");
        }
    }
}

/// Picks the entry to release from a full cache, or None for the unbounded
/// policy. `aux_scores` carries the per-entry sigma (adore) or cumulative
/// attention (h2o); other policies ignore it. Panics when called on a cache
/// that is not at capacity.
pub fn select_victim(
    policy: &PolicyConfig,
    cache: &LayerKvCache,
    aux_scores: &[f32],
    _step: usize,
) -> Option<usize> {
    if policy.kind == PolicyKind::Full {
        return None;
    }
    assert_eq!(
        cache.occupancy(),
        policy.capacity,
        "victim selection on a cache that is not full"
    );
    let positions = cache.positions();
    let oldest = |candidates: &mut dyn Iterator<Item = usize>| -> Option<usize> {
        candidates.min_by_key(|&i| positions[i])
    };
    match policy.kind {
        PolicyKind::Full => None,
        PolicyKind::Window => oldest(&mut (0..positions.len())),
        PolicyKind::Strided { stride } => {
            let non_kept = oldest(&mut (0..positions.len()).filter(|&i| positions[i] as usize % stride != 0));
            non_kept.or_else(|| oldest(&mut (0..positions.len())))
        }
        PolicyKind::Sink { n_sink } => {
            oldest(&mut (0..positions.len()).filter(|&i| positions[i] as usize >= n_sink))
        }
        PolicyKind::H2o | PolicyKind::Adore => {
            assert_eq!(aux_scores.len(), positions.len(), "score vector mismatch");
            (0..positions.len()).min_by(|&a, &b| {
                aux_scores[a]
                    .partial_cmp(&aux_scores[b])
                    .unwrap()
                    .then(positions[a].cmp(&positions[b]))
            })
        }
    }
}

/// Removes `victim` (when given), then appends the new row. Returns the
/// descriptor of the removed entry for the released pool. Panics if the
/// cache is full and no victim was supplied.
#[allow(clippy::too_many_arguments)]
pub fn evict_and_append(
    cache: &mut LayerKvCache,
    kit: &mut SlicingKit,
    mode: SliceMode,
    key_row: &[f32],
    value_row: &[f32],
    token: Token,
    position: u32,
    sigma: f32,
    victim: Option<usize>,
) -> Option<EvictedEntry> {
    let evicted = victim.map(|j| remove_entry(cache, kit, mode, j));
    assert!(
        cache.occupancy() < cache.capacity,
        "cache full and no victim supplied"
    );
    cache.keys.push_row(key_row);
    cache.values.push_row(value_row);
    cache.positions.push(position);
    cache.token_ids.push(token);
    cache.scores.push(sigma);
    cache.check_invariants();
    evicted
}

/// Removes entry `j` outright (used when rebuilt rows displace entries).
pub fn remove_entry(
    cache: &mut LayerKvCache,
    kit: &mut SlicingKit,
    mode: SliceMode,
    j: usize,
) -> EvictedEntry {
    assert!(j < cache.occupancy(), "victim index out of range");
    cache.keys = kit.remove_row(&cache.keys, j, mode);
    cache.values = kit.remove_row(&cache.values, j, mode);
    let entry = EvictedEntry {
        token: cache.token_ids.remove(j),
        position: cache.positions.remove(j),
        score: cache.scores.remove(j),
    };
    cache.check_invariants();
    entry
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::rng::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn slicing_matrix_of_one_row_is_empty() {
        let s = build_slicing_matrix(0, 1);
        assert_eq!((s.rows(), s.cols()), (0, 1));
    }

    #[test]
    fn slicing_matrix_drops_middle_row() {
        let s = build_slicing_matrix(1, 3);
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn slicing_matrix_structure_row_sums_one_column_j_zero() {
        for m in 1..10 {
            for j in 0..m {
                let s = build_slicing_matrix(j, m);
                for i in 0..m - 1 {
                    let sum: f32 = s.row(i).iter().sum();
                    assert_eq!(sum, 1.0);
                    assert_eq!(s[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn slice_remove_examples() {
        let m = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = slice_remove_row(&m, 1);
        assert_eq!(out.data(), &[1.0, 2.0, 5.0, 6.0]);

        let single = Matrix::from_vec(1, 2, vec![9.0, 8.0]);
        let empty = slice_remove_row(&single, 0);
        assert_eq!((empty.rows(), empty.cols()), (0, 2));
    }

    proptest! {
        // Product-based removal must equal gather-based deletion exactly:
        // every output element is a sum of zeros plus one copied value.
        #[test]
        fn slice_remove_equals_gather_oracle(
            rows in 1usize..64, cols in 1usize..32, jseed in 0u64..1_000, seed in 0u64..10_000
        ) {
            let mut rng = SplitMix64::new(seed);
            let data: Vec<f32> = (0..rows * cols).map(|_| rng.normal_f32()).collect();
            let m = Matrix::from_vec(rows, cols, data);
            let j = (jseed % rows as u64) as usize;
            let got = slice_remove_row(&m, j);
            let want = m.without_row(j);
            prop_assert_eq!(got.data(), want.data());
        }

        #[test]
        fn topk_matches_sort_oracle(k in 0usize..40, seed in 0u64..10_000) {
            let mut rng = SplitMix64::new(seed);
            let q: Vec<f32> = (0..6).map(|_| rng.normal_f32()).collect();
            let rows = 1 + (rng.next_u64() % 32) as usize;
            let km = Matrix::from_vec(rows, 6, (0..rows * 6).map(|_| rng.normal_f32()).collect());
            let got = ideal_topk_indices(&q, &km, k);

            // independent: full sort of score pairs
            let mut pairs: Vec<(usize, f32)> = (0..rows)
                .map(|i| {
                    let mut s = 0.0;
                    for (a, b) in q.iter().zip(km.row(i)) {
                        s += a * b;
                    }
                    (i, s)
                })
                .collect();
            pairs.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
            let mut want: Vec<usize> = pairs.into_iter().take(k.min(rows)).map(|p| p.0).collect();
            want.sort_unstable();
            prop_assert_eq!(got.clone(), want);
            prop_assert_eq!(got.len(), k.min(rows));
        }

        // argmin of sigma is invariant under positive rescaling
        #[test]
        fn adore_victim_invariant_under_positive_scaling(
            sigmas in proptest::collection::vec(0.01f32..0.99, 2..12),
            scale in 0.1f32..10.0
        ) {
            let m = sigmas.len();
            let policy = PolicyConfig::new(PolicyKind::Adore, m, 1);
            let mut cache = LayerKvCache::new(m, 2);
            let mut kit = SlicingKit::default();
            for (i, &s) in sigmas.iter().enumerate() {
                evict_and_append(
                    &mut cache, &mut kit, SliceMode::Direct,
                    &[0.0, 0.0], &[0.0, 0.0], 0, i as u32, s, None,
                );
            }
            let a = select_victim(&policy, &cache, &sigmas, m);
            let scaled: Vec<f32> = sigmas.iter().map(|s| s * scale).collect();
            let b = select_victim(&policy, &cache, &scaled, m);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn topk_trivial_cases() {
        // scores 0.9, 0.1, 0.5 with k = 2 pick rows 0 and 2
        let km = Matrix::from_vec(3, 1, vec![0.9, 0.1, 0.5]);
        assert_eq!(ideal_topk_indices(&[1.0], &km, 2), vec![0, 2]);
        assert_eq!(ideal_topk_indices(&[1.0], &km, 10), vec![0, 1, 2]);
    }

    fn filled_cache(positions: &[u32], sigmas: &[f32], m: usize) -> (LayerKvCache, SlicingKit) {
        let mut cache = LayerKvCache::new(m, 2);
        let mut kit = SlicingKit::default();
        for (i, &p) in positions.iter().enumerate() {
            evict_and_append(
                &mut cache, &mut kit, SliceMode::Direct,
                &[i as f32, 0.0], &[0.0, i as f32], 100 + i as Token, p,
                sigmas.get(i).copied().unwrap_or(0.0), None,
            );
        }
        (cache, kit)
    }

    #[test]
    fn adore_victim_is_argmin_sigma() {
        let sig = [0.2, 0.9, 0.5];
        let (cache, _) = filled_cache(&[0, 1, 2], &sig, 3);
        let policy = PolicyConfig::new(PolicyKind::Adore, 3, 1);
        assert_eq!(select_victim(&policy, &cache, &sig, 3), Some(0));
    }

    #[test]
    fn sink_victim_is_oldest_non_sink() {
        let (cache, _) = filled_cache(&[0, 1, 2, 3, 7, 8], &[0.0; 6], 6);
        let policy = PolicyConfig::new(PolicyKind::Sink { n_sink: 4 }, 6, 1);
        let v = select_victim(&policy, &cache, &[], 9).unwrap();
        assert_eq!(cache.positions()[v], 7);
    }

    #[test]
    fn window_victim_is_oldest() {
        let (cache, _) = filled_cache(&[5, 3, 9], &[0.0; 3], 3);
        let policy = PolicyConfig::new(PolicyKind::Window, 3, 1);
        let v = select_victim(&policy, &cache, &[], 10).unwrap();
        assert_eq!(cache.positions()[v], 3);
    }

    #[test]
    fn strided_victim_skips_multiples_of_stride() {
        let (cache, _) = filled_cache(&[8, 9, 10, 11], &[0.0; 4], 4);
        let policy = PolicyConfig::new(PolicyKind::Strided { stride: 8 }, 4, 1);
        let v = select_victim(&policy, &cache, &[], 12).unwrap();
        assert_eq!(cache.positions()[v], 9);

        // all kept positions are multiples: fall back to oldest
        let (cache, _) = filled_cache(&[8, 16, 24], &[0.0; 3], 3);
        let policy = PolicyConfig::new(PolicyKind::Strided { stride: 8 }, 3, 1);
        let v = select_victim(&policy, &cache, &[], 30).unwrap();
        assert_eq!(cache.positions()[v], 8);
    }

    #[test]
    #[should_panic(expected = "not full")]
    fn victim_selection_requires_full_cache() {
        let (cache, _) = filled_cache(&[0, 1], &[0.0; 2], 5);
        let policy = PolicyConfig::new(PolicyKind::Window, 5, 1);
        select_victim(&policy, &cache, &[], 2);
    }

    #[test]
    fn append_below_capacity_never_evicts() {
        let (cache, _) = filled_cache(&[0, 1, 2], &[0.1, 0.2, 0.3], 5);
        assert_eq!(cache.occupancy(), 3);
        assert_eq!(cache.positions(), &[0, 1, 2]);
    }

    #[test]
    fn evict_then_append_preserves_survivor_positions() {
        let (mut cache, mut kit) = filled_cache(&[10, 11], &[0.5, 0.6], 2);
        let evicted = evict_and_append(
            &mut cache, &mut kit, SliceMode::Matmul,
            &[9.0, 9.0], &[9.0, 9.0], 42, 12, 0.7, Some(0),
        )
        .unwrap();
        assert_eq!(evicted, EvictedEntry { token: 100, position: 10, score: 0.5 });
        assert_eq!(cache.positions(), &[11, 12]);
        assert_eq!(cache.token_ids(), &[101, 42]);
        assert_eq!(cache.keys.row(1), &[9.0, 9.0]);
    }

    #[test]
    #[should_panic(expected = "no victim")]
    fn full_cache_requires_victim() {
        let (mut cache, mut kit) = filled_cache(&[0, 1], &[0.0; 2], 2);
        evict_and_append(
            &mut cache, &mut kit, SliceMode::Direct,
            &[0.0, 0.0], &[0.0, 0.0], 1, 2, 0.0, None,
        );
    }

    #[test]
    fn slice_modes_agree() {
        let mut rng = SplitMix64::new(123);
        let m = Matrix::from_vec(8, 3, (0..24).map(|_| rng.normal_f32()).collect());
        let mut kit = SlicingKit::for_capacity(8);
        for j in 0..8 {
            let a = kit.remove_row(&m, j, SliceMode::Matmul);
            let b = kit.remove_row(&m, j, SliceMode::Direct);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn policy_validation_rejects_bad_configs() {
        assert!(PolicyConfig::new(PolicyKind::Window, 8, 16).validate().is_err());
        assert!(PolicyConfig::new(PolicyKind::Window, 16, 16).validate().is_ok());
        assert!(PolicyConfig::new(PolicyKind::Window, 16, 8)
            .with_rebuild(4)
            .validate()
            .is_err());
        assert!(PolicyConfig::new(PolicyKind::Adore, 16, 8)
            .with_rebuild(4)
            .validate()
            .is_ok());
        assert!(PolicyConfig::new(PolicyKind::Sink { n_sink: 16 }, 16, 8)
            .validate()
            .is_err());
    }
}

//! Uniform-policy analysis: how well the cross-layer uniform token set
//! stands in for each layer's own top attention sets, plus the long-tail
//! shape of trained attention rows.

use crate::error::Result;
use crate::model::{full_forward, layer_top_set, uniform_topk_from_layer_sets};
use crate::model::{ScoredSet, Token, TransformerParams};
use crate::numkernel::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct LayerAnalysis {
    pub layer: usize,
    /// Mean |uniform ∩ layer set| / |layer set| over probed positions.
    pub overlap: f64,
    /// Mean softmax mass the current token places on the uniform set.
    pub uniform_mass: f64,
    /// Same mass for a random set of equal size (control).
    pub random_mass: f64,
}

#[derive(Debug, Clone)]
pub struct AnalyzeReport {
    pub layers: Vec<LayerAnalysis>,
    /// Mean attention row sorted descending (head- and layer-averaged),
    /// taken at the final position of each probed window.
    pub curve: Vec<f64>,
    pub positions_probed: usize,
}

fn mass_on(probs: &[crate::numkernel::Matrix], n: usize, set: &[u32]) -> f64 {
    let mut total = 0.0f64;
    for p in probs {
        let row = p.row(n);
        for &j in set {
            total += row[j as usize] as f64;
        }
    }
    total / probs.len() as f64
}

fn random_set(rng: &mut SplitMix64, n_past: usize, size: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..n_past as u32).collect();
    rng.shuffle(&mut idx);
    idx.truncate(size);
    idx.sort_unstable();
    idx
}

/// Probes every position n >= k of each window (so the sets have full
/// size) under full attention.
pub fn analyze_uniform_policy(
    lm: &TransformerParams,
    windows: &[Vec<Token>],
    k: usize,
    seed: u64,
) -> Result<AnalyzeReport> {
    let cfg = &lm.config;
    let k_half = k.div_ceil(2);
    let mut rng = SplitMix64::new(seed);

    let mut overlap = vec![0.0f64; cfg.n_layers];
    let mut uniform_mass = vec![0.0f64; cfg.n_layers];
    let mut random_mass = vec![0.0f64; cfg.n_layers];
    let mut probed = 0usize;
    let mut curve: Vec<f64> = Vec::new();
    let mut curve_rows = 0usize;

    for window in windows {
        if window.len() <= k {
            continue;
        }
        let acts = full_forward(window, lm, None)?;
        for n in k..window.len() {
            let sets: Vec<ScoredSet> = (0..cfg.n_layers)
                .map(|l| layer_top_set(acts.probs(l), n, k_half))
                .collect();
            let uniform = uniform_topk_from_layer_sets(&sets, k, n);
            let rand = random_set(&mut rng, n, uniform.len());
            for l in 0..cfg.n_layers {
                let inter = sets[l]
                    .indices
                    .iter()
                    .filter(|i| uniform.binary_search(i).is_ok())
                    .count();
                overlap[l] += inter as f64 / sets[l].indices.len().max(1) as f64;
                uniform_mass[l] += mass_on(acts.probs(l), n, &uniform);
                random_mass[l] += mass_on(acts.probs(l), n, &rand);
            }
            probed += 1;
        }

        // long-tail curve from the final row
        let last = window.len() - 1;
        let mut weights = vec![0.0f64; window.len()];
        for l in 0..cfg.n_layers {
            for p in acts.probs(l) {
                let row = p.row(last);
                for (w, &v) in weights.iter_mut().zip(row) {
                    *w += v as f64;
                }
            }
        }
        let denom = (cfg.n_layers * cfg.n_heads) as f64;
        weights.iter_mut().for_each(|w| *w /= denom);
        weights.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if curve.len() < weights.len() {
            curve.resize(weights.len(), 0.0);
        }
        for (c, w) in curve.iter_mut().zip(&weights) {
            *c += w;
        }
        curve_rows += 1;
    }

    if curve_rows > 0 {
        curve.iter_mut().for_each(|c| *c /= curve_rows as f64);
    }
    let layers = (0..cfg.n_layers)
        .map(|l| LayerAnalysis {
            layer: l,
            overlap: overlap[l] / probed.max(1) as f64,
            uniform_mass: uniform_mass[l] / probed.max(1) as f64,
            random_mass: random_mass[l] / probed.max(1) as f64,
        })
        .collect();
    Ok(AnalyzeReport {
        layers,
        curve,
        positions_probed: probed,
    })
}

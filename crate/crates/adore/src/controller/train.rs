//! Supervised training of the eviction scorer: per-token binary cross
//! entropy against trace-derived labels, Adam with step decay, 80/20
//! train/validation split, best-validation-F1 checkpointing.

use super::{ControllerDataset, ControllerParams, ControllerVariant};
use crate::error::{Error, Result};
use crate::numkernel::rng::SplitMix64;
use crate::numkernel::{
    adam_update, dot, gru_cell_backward, gru_cell_cached, AdamState, GruCellCache, Matrix,
};

#[derive(Debug, Clone)]
pub struct ControllerSchedule {
    pub epochs: usize,
    pub lr: f32,
    pub lr_decay: f32,
    /// Steps (sequences) between decay applications.
    pub decay_every: usize,
    pub seed: u64,
    pub val_fraction: f32,
    /// Weight multiplier on positive tokens; None balances classes from
    /// the dataset's positive rate.
    pub pos_weight: Option<f32>,
}

impl Default for ControllerSchedule {
    fn default() -> Self {
        ControllerSchedule {
            epochs: 8,
            lr: 5e-3,
            lr_decay: 0.98,
            decay_every: 200,
            seed: 42,
            val_fraction: 0.2,
            pos_weight: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub train_loss: f32,
    pub val_accuracy: f32,
    pub val_f1: f32,
}

#[derive(Debug, Clone)]
pub struct ControllerMetrics {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_f1: f32,
    pub best_accuracy: f32,
}

/// Accuracy and F1 of thresholded sigma against binary labels.
pub fn accuracy_f1(sigmas: &[f32], labels: &[u8]) -> (f32, f32) {
    assert_eq!(sigmas.len(), labels.len());
    let (mut tp, mut fp, mut fnn, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in sigmas.iter().zip(labels) {
        match (s > 0.5, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => tn += 1,
        }
    }
    let total = (tp + fp + fnn + tn).max(1);
    let acc = (tp + tn) as f32 / total as f32;
    let f1 = if 2 * tp + fp + fnn == 0 {
        0.0
    } else {
        2.0 * tp as f32 / (2 * tp + fp + fnn) as f32
    };
    (acc, f1)
}

struct ControllerGrads(ControllerParams);

fn tensors_of(p: &ControllerParams) -> Vec<&Matrix> {
    let mut out: Vec<&Matrix> = p.gru.tensors().into_iter().map(|(_, m)| m).collect();
    if let Some(b) = &p.gru_back {
        out.extend(b.tensors().into_iter().map(|(_, m)| m));
    }
    if let Some(proj) = &p.input_proj {
        out.push(proj);
    }
    out.extend([&p.pos_embed, &p.w_inter, &p.b_inter, &p.w_out, &p.b_out]);
    out
}

fn tensors_of_mut(p: &mut ControllerParams) -> Vec<&mut Matrix> {
    let mut out: Vec<&mut Matrix> = p.gru.tensors_mut();
    if let Some(b) = &mut p.gru_back {
        out.extend(b.tensors_mut());
    }
    if let Some(proj) = &mut p.input_proj {
        out.push(proj);
    }
    out.extend([
        &mut p.pos_embed,
        &mut p.w_inter,
        &mut p.b_inter,
        &mut p.w_out,
        &mut p.b_out,
    ]);
    out
}

struct SeqActs {
    hidden: Vec<Vec<f32>>,
    gru_caches: Vec<GruCellCache>,
    back_hidden: Vec<Vec<f32>>,
    back_caches: Vec<GruCellCache>,
    u: Vec<Vec<f32>>,
    a: Vec<Vec<f32>>,
    sigma: Vec<f32>,
}

fn forward_sequence(xs: &Matrix, params: &ControllerParams) -> SeqActs {
    let n = xs.rows();
    let hd = params.hidden_dim;
    let mut hidden = Vec::with_capacity(n);
    let mut gru_caches = Vec::with_capacity(n);
    let mut h = vec![0.0f32; hd];
    for t in 0..n {
        match params.variant {
            ControllerVariant::MlpOnly => {
                let proj = params.input_proj.as_ref().unwrap();
                let z: Vec<f32> = (0..hd).map(|i| dot(proj.row(i), xs.row(t)).tanh()).collect();
                hidden.push(z);
            }
            _ => {
                let (nh, cache) = gru_cell_cached(xs.row(t), &h, &params.gru);
                gru_caches.push(cache);
                hidden.push(nh.clone());
                h = nh;
            }
        }
    }
    let (mut back_hidden, mut back_caches) = (Vec::new(), Vec::new());
    let mut combined = hidden.clone();
    if let Some(back) = &params.gru_back {
        let mut hb = vec![0.0f32; hd];
        let mut rev: Vec<(Vec<f32>, GruCellCache)> = Vec::with_capacity(n);
        for t in (0..n).rev() {
            let (nh, cache) = gru_cell_cached(xs.row(t), &hb, back);
            hb = nh.clone();
            rev.push((nh, cache));
        }
        rev.reverse();
        for (t, (bh, cache)) in rev.into_iter().enumerate() {
            for (c, b) in combined[t].iter_mut().zip(&bh) {
                *c += b;
            }
            back_hidden.push(bh);
            back_caches.push(cache);
        }
    }
    let mut u = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for (t, z) in combined.iter().enumerate() {
        let pe = params.pos_embed.row(t);
        let ut: Vec<f32> = z.iter().zip(pe).map(|(x, y)| x + y).collect();
        let at: Vec<f32> = (0..hd)
            .map(|i| (dot(params.w_inter.row(i), &ut) + params.b_inter[(0, i)]).tanh())
            .collect();
        let logit = dot(params.w_out.row(0), &at) + params.b_out[(0, 0)];
        sigma.push(crate::numkernel::sigmoid(logit));
        u.push(ut);
        a.push(at);
    }
    SeqActs {
        hidden,
        gru_caches,
        back_hidden,
        back_caches,
        u,
        a,
        sigma,
    }
}

/// Weighted BCE loss and gradients for one sequence; returns the loss.
fn backward_sequence(
    xs: &Matrix,
    labels: &[u8],
    params: &ControllerParams,
    acts: &SeqActs,
    pos_weight: f32,
    grads: &mut ControllerGrads,
) -> f32 {
    let n = xs.rows();
    let hd = params.hidden_dim;
    let g = &mut grads.0;

    let mut weight_sum = 0.0f32;
    for &y in labels {
        weight_sum += if y == 1 { pos_weight } else { 1.0 };
    }
    let weight_sum = weight_sum.max(1e-12);

    let mut loss = 0.0f32;
    // dL/d combined hidden z_t, filled by the head backward then consumed
    // by the recurrent backward passes
    let mut dz = vec![vec![0.0f32; hd]; n];
    for t in 0..n {
        let y = labels[t] as f32;
        let w = if labels[t] == 1 { pos_weight } else { 1.0 };
        let s = acts.sigma[t].clamp(1e-7, 1.0 - 1e-7);
        loss -= w * (y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        let dlogit = w * (s - y) / weight_sum;

        // head backward
        let at = &acts.a[t];
        let ut = &acts.u[t];
        g.b_out[(0, 0)] += dlogit;
        let mut du = vec![0.0f32; hd];
        for i in 0..hd {
            let da = dlogit * params.w_out[(0, i)];
            g.w_out[(0, i)] += dlogit * at[i];
            let dpre = da * (1.0 - at[i] * at[i]);
            g.b_inter[(0, i)] += dpre;
            let grow = g.w_inter.row_mut(i);
            for (gv, &uv) in grow.iter_mut().zip(ut) {
                *gv += dpre * uv;
            }
            let wrow = params.w_inter.row(i);
            for (d, &wv) in du.iter_mut().zip(wrow) {
                *d += dpre * wv;
            }
        }
        let pe_grad = g.pos_embed.row_mut(t);
        for (pg, &d) in pe_grad.iter_mut().zip(&du) {
            *pg += d;
        }
        dz[t] = du;
    }

    match params.variant {
        ControllerVariant::MlpOnly => {
            let gproj = g.input_proj.as_mut().unwrap();
            for t in 0..n {
                let z = &acts.hidden[t];
                for i in 0..hd {
                    let dpre = dz[t][i] * (1.0 - z[i] * z[i]);
                    let grow = gproj.row_mut(i);
                    for (gv, &xv) in grow.iter_mut().zip(xs.row(t)) {
                        *gv += dpre * xv;
                    }
                }
            }
        }
        _ => {
            // forward-direction BPTT
            let zero = vec![0.0f32; hd];
            let mut dh_next = vec![0.0f32; hd];
            for t in (0..n).rev() {
                let mut dh: Vec<f32> = dz[t].clone();
                for (d, &up) in dh.iter_mut().zip(&dh_next) {
                    *d += up;
                }
                let h_prev = if t == 0 { &zero } else { &acts.hidden[t - 1] };
                let (_dx, dh_prev) = gru_cell_backward(
                    xs.row(t),
                    h_prev,
                    &params.gru,
                    &acts.gru_caches[t],
                    &dh,
                    &mut g.gru,
                );
                dh_next = dh_prev;
            }
            if let Some(back) = &params.gru_back {
                let gback = g.gru_back.as_mut().unwrap();
                let zero = vec![0.0f32; hd];
                let mut dh_next = vec![0.0f32; hd];
                for t in 0..n {
                    let mut dh: Vec<f32> = dz[t].clone();
                    for (d, &up) in dh.iter_mut().zip(&dh_next) {
                        *d += up;
                    }
                    // reverse pass consumed inputs from the right
                    let h_prev = if t == n - 1 { &zero } else { &acts.back_hidden[t + 1] };
                    let (_dx, dh_prev) = gru_cell_backward(
                        xs.row(t),
                        h_prev,
                        back,
                        &acts.back_caches[t],
                        &dh,
                        gback,
                    );
                    dh_next = dh_prev;
                }
            }
        }
    }
    loss / weight_sum
}

/// Trains the scorer. Returns the parameters that scored the highest
/// validation F1 together with per-epoch metrics.
pub fn train_controller(
    dataset: &ControllerDataset,
    params_init: ControllerParams,
    schedule: &ControllerSchedule,
) -> Result<(ControllerParams, ControllerMetrics)> {
    if dataset.is_empty() {
        return Err(Error::Config("empty controller dataset".into()));
    }
    let mut rng = SplitMix64::new(schedule.seed);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut indices);
    let n_val = ((dataset.len() as f32 * schedule.val_fraction).round() as usize)
        .min(dataset.len().saturating_sub(1));
    let (val_idx, train_idx) = indices.split_at(n_val);

    let pos_rate = dataset.positive_rate();
    let pos_weight = schedule
        .pos_weight
        .unwrap_or_else(|| if pos_rate > 0.0 { ((1.0 - pos_rate) / pos_rate).min(50.0) } else { 1.0 });

    let mut params = params_init;
    let mut grads = ControllerGrads(ControllerParams::zeros(
        params.variant,
        params.input_dim,
        params.hidden_dim,
        params.max_position(),
    ));
    let mut adam: Vec<AdamState> = tensors_of(&params)
        .iter()
        .map(|t| AdamState::zeros_like(t))
        .collect();

    let mut best: Option<(ControllerParams, usize, f32, f32)> = None;
    let mut epochs_stats = Vec::with_capacity(schedule.epochs);
    let mut step = 0usize;
    let mut order: Vec<usize> = train_idx.to_vec();

    for epoch in 0..schedule.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0f64;
        for &si in &order {
            let seq = &dataset.sequences[si];
            if seq.labels.is_empty() {
                continue;
            }
            let acts = forward_sequence(&seq.inputs, &params);
            for t in tensors_of_mut(&mut grads.0) {
                t.fill(0.0);
            }
            let loss =
                backward_sequence(&seq.inputs, &seq.labels, &params, &acts, pos_weight, &mut grads);
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    context: "controller loss",
                    step,
                });
            }
            total += loss as f64;
            step += 1;
            let lr = schedule.lr * schedule.lr_decay.powi((step / schedule.decay_every.max(1)) as i32);
            for ((p, g), st) in tensors_of_mut(&mut params)
                .into_iter()
                .zip(tensors_of(&grads.0))
                .zip(&mut adam)
            {
                adam_update(p, g, st, step, lr)?;
            }
        }
        let train_loss = (total / order.len().max(1) as f64) as f32;
        let (val_accuracy, val_f1) = evaluate(dataset, val_idx, &params)?;
        epochs_stats.push(EpochStats {
            train_loss,
            val_accuracy,
            val_f1,
        });
        if best.as_ref().map_or(true, |(_, _, f1, _)| val_f1 > *f1) {
            best = Some((params.clone(), epoch, val_f1, val_accuracy));
        }
    }

    let (best_params, best_epoch, best_f1, best_accuracy) = best.unwrap();
    Ok((
        best_params,
        ControllerMetrics {
            epochs: epochs_stats,
            best_epoch,
            best_f1,
            best_accuracy,
        },
    ))
}

/// Accuracy/F1 over a set of dataset sequences.
pub fn evaluate(
    dataset: &ControllerDataset,
    indices: &[usize],
    params: &ControllerParams,
) -> Result<(f32, f32)> {
    let mut sigmas = Vec::new();
    let mut labels = Vec::new();
    for &i in indices {
        let seq = &dataset.sequences[i];
        sigmas.extend(super::score_sequence(&seq.inputs, 0, params)?);
        labels.extend_from_slice(&seq.labels);
    }
    if labels.is_empty() {
        return Ok((0.0, 0.0));
    }
    Ok(accuracy_f1(&sigmas, &labels))
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;

use super::select::tie_break;
use super::{RuleContext, SkipGramRule};
use crate::error::{Error, Result};
use crate::numkernel::TensorF32;

/// Input-feature activations of one sequence and the position to explain.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleFeatures {
    /// `[t × n_features]` input SAE activations.
    pub features: TensorF32,
    pub target: usize,
}

impl ExampleFeatures {
    pub fn new(features: TensorF32, target: usize) -> Result<Self> {
        let (t, _) = features.dims2()?;
        if target >= t {
            return Err(Error::InvalidArgument(format!(
                "target position {target} outside sequence of length {t}"
            )));
        }
        Ok(Self { features, target })
    }
}

fn matvec64(m: &TensorF32, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(x).map(|(&w, &v)| f64::from(w) * v).sum())
        .collect()
}

/// `∂ relu(y_tᵀu) / ∂ m_{q,k}` at `m = 1`, where `m_{q,k}` scales the
/// contribution of the pair `(q, k)` to every attention logit of the target
/// row. Logits are computed from reconstructed inputs `x̂ = Σ_j f_j d_j`
/// without the decoder bias. Returns one value per candidate.
///
/// With `v_i = x̂_iᵀ W_Vᵀ u`, `z = Σ_i a_i v_i` the gradient is
/// `σ'(z) Σ_i a_i (v_i − z) f_q(x_t) f_k(x_i) A(q, k)`, taking `σ'(0) = 0`.
pub fn importance_gradient(
    ctx: &RuleContext<'_>,
    example: &ExampleFeatures,
    candidates: &[SkipGramRule],
) -> Result<Vec<f64>> {
    let values: Vec<f64> = ctx.value_scores()?.into_iter().map(f64::from).collect();
    importance_with_values(ctx, &values, example, candidates)
}

fn importance_with_values(
    ctx: &RuleContext<'_>,
    values: &[f64],
    example: &ExampleFeatures,
    candidates: &[SkipGramRule],
) -> Result<Vec<f64>> {
    let n = ctx.sae_in.n_features();
    let (len, width) = example.features.dims2()?;
    if width != n {
        return Err(Error::Dimension(format!(
            "example has {width} features, input dictionary has {n}"
        )));
    }
    if example.target >= len {
        return Err(Error::InvalidArgument(format!(
            "target position {} outside sequence of length {len}",
            example.target
        )));
    }
    let t = example.target;
    let dim = ctx.sae_in.dim();
    let recon = |i: usize| -> Vec<f64> {
        let mut x = vec![0.0f64; dim];
        for (j, &f) in example.features.row(i).iter().enumerate() {
            if f != 0.0 {
                for (o, &d) in x.iter_mut().zip(ctx.sae_in.decoder_row(j)) {
                    *o += f64::from(f) * f64::from(d);
                }
            }
        }
        x
    };
    let q = matvec64(ctx.head.w_q(), &recon(t));
    let mut logits = Vec::with_capacity(t + 1);
    let mut v = Vec::with_capacity(t + 1);
    for i in 0..=t {
        let k = matvec64(ctx.head.w_k(), &recon(i));
        logits.push(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>());
        v.push(
            example
                .features
                .row(i)
                .iter()
                .zip(values)
                .map(|(&f, &s)| f64::from(f) * s)
                .sum::<f64>(),
        );
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let a: Vec<f64> = exp.iter().map(|e| e / total).collect();
    let z: f64 = a.iter().zip(&v).map(|(a, v)| a * v).sum();
    if z <= 0.0 {
        return Ok(vec![0.0; candidates.len()]);
    }
    // Per key feature: Σ_i a_i (v_i − z) f_k(x_i).
    let mut key_mass = vec![0.0f64; n];
    for i in 0..=t {
        let c = a[i] * (v[i] - z);
        for (m, &f) in key_mass.iter_mut().zip(example.features.row(i)) {
            *m += c * f64::from(f);
        }
    }
    let f_t = example.features.row(t);
    candidates
        .iter()
        .map(|r| {
            if r.key.index >= n || r.query.index >= n {
                return Err(Error::InvalidArgument(format!(
                    "candidate ({}, {}) outside dictionary of {n}",
                    r.key.index, r.query.index
                )));
            }
            Ok(f64::from(f_t[r.query.index]) * key_mass[r.key.index] * f64::from(r.attention_score))
        })
        .collect()
}

/// Ranks candidates by their mean gradient importance over `train`,
/// ties broken by `(key, query)` ascending.
pub fn rank_gradient_based(
    ctx: &RuleContext<'_>,
    candidates: Vec<SkipGramRule>,
    train: &[ExampleFeatures],
) -> Result<Vec<SkipGramRule>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("gradient ranking needs at least one training example".into()));
    }
    let values: Vec<f64> = ctx.value_scores()?.into_iter().map(f64::from).collect();
    let per_example: Vec<Vec<f64>> = train
        .par_iter()
        .map(|ex| importance_with_values(ctx, &values, ex, &candidates))
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0f64; candidates.len()];
    for g in &per_example {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    let scale = 1.0 / train.len() as f64;
    let mut ranked: Vec<(f64, SkipGramRule)> = candidates
        .into_iter()
        .zip(mean)
        .map(|(mut r, m)| {
            let m = m * scale;
            r.importance = Some(m as f32);
            (m, r)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| tie_break(&a.1, &b.1)));
    Ok(ranked.into_iter().map(|(_, r)| r).collect())
}

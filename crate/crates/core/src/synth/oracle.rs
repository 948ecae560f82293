// SPDX-License-Identifier: MIT OR Apache-2.0

use super::GroundTruth;
use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::numkernel::TensorF32;

fn project(m: &TensorF32, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(x).map(|(&w, &v)| f64::from(w) * v).sum())
        .collect()
}

/// `[position][output feature]` activations from a direct 64-bit forward pass.
pub fn oracle_outputs(gt: &GroundTruth, seq: &TokenSequence) -> Result<Vec<Vec<f64>>> {
    gt.model.validate(seq)?;
    let head = gt.model.head(gt.head)?;
    let emb = gt.model.token_embeddings();
    let pos = gt.model.positional_embeddings();
    let x: Vec<Vec<f64>> = seq
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| emb.row(id).iter().zip(pos.row(i)).map(|(&a, &b)| f64::from(a) + f64::from(b)).collect())
        .collect();
    let q: Vec<Vec<f64>> = x.iter().map(|r| project(head.w_q(), r)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| project(head.w_k(), r)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| project(head.w_v(), r)).collect();
    let sae = &gt.sae_out;
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let logits: Vec<f64> = (0..=t).map(|i| q[t].iter().zip(&k[i]).map(|(a, b)| a * b).sum()).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut y = vec![0.0f64; head.d_head()];
        for i in 0..=t {
            for (o, vi) in y.iter_mut().zip(&v[i]) {
                *o += w[i] / z * vi;
            }
        }
        let acts = (0..sae.n_features())
            .map(|g| {
                let pre: f64 = sae
                    .encoder_row(g)
                    .iter()
                    .zip(y.iter().zip(sae.b_dec().data()))
                    .map(|(&e, (&yv, &b))| f64::from(e) * (yv - f64::from(b)))
                    .sum::<f64>()
                    + f64::from(sae.b_enc().data()[g]);
                pre.max(0.0)
            })
            .collect();
        out.push(acts);
    }
    Ok(out)
}

/// Activation of output feature `g` at position `t`, computed in 64-bit
/// floating point directly from the model's weights.
pub fn oracle_activation(gt: &GroundTruth, seq: &TokenSequence, t: usize, g: usize) -> Result<f64> {
    if t >= seq.len() {
        return Err(Error::InvalidArgument(format!(
            "position {t} outside sequence of length {}",
            seq.len()
        )));
    }
    if g >= gt.n_outputs() {
        return Err(Error::InvalidArgument(format!(
            "output feature {g} outside {} planted features",
            gt.n_outputs()
        )));
    }
    let prefix = TokenSequence::new(seq.ids[..=t].to_vec());
    Ok(oracle_outputs(gt, &prefix)?[t][g])
}

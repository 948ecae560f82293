// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{AttentionHead, HeadId, TokenSequence, ToyModel};
use crate::numkernel::{dot64, gemm_nt, TensorF32};
use crate::rules::best_token_for_feature;
use crate::sae::SaeDictionary;

/// Direct feature attribution of every position `t' ≤ t` to `y_tᵀu`:
/// `a_{t,t'} · (x_{t'} W_Vᵀ u)`. The entries sum to `y_tᵀu`.
pub fn dfa(head: &AttentionHead, u: &[f32], x: &TensorF32, t: usize) -> Result<Vec<f32>> {
    let (len, _) = x.dims2()?;
    if t >= len {
        return Err(Error::InvalidArgument(format!(
            "position {t} outside sequence of length {len}"
        )));
    }
    if u.len() != head.d_head() {
        return Err(Error::Dimension(format!(
            "output direction has length {}, d_head is {}",
            u.len(),
            head.d_head()
        )));
    }
    let (_, attn) = head.forward(x)?;
    let values = gemm_nt(x, head.w_v())?;
    Ok((0..=t)
        .map(|i| (f64::from(attn.get2(t, i)) * dot64(values.row(i), u)) as f32)
        .collect())
}

/// Input-SAE activations `[len × n]` of a sequence.
pub fn input_features(model: &ToyModel, sae_in: &SaeDictionary, seq: &TokenSequence) -> Result<TensorF32> {
    sae_in.encode_rows(&model.embed(seq)?)
}

/// Output-SAE activation of `feature` at every position.
pub fn output_activations(
    model: &ToyModel,
    head: HeadId,
    sae_out: &SaeDictionary,
    feature: usize,
    seq: &TokenSequence,
) -> Result<Vec<f32>> {
    let (y, _) = model.head(head)?.forward(&model.embed(seq)?)?;
    (0..seq.len()).map(|t| Ok(sae_out.activation(y.row(t), feature))).collect()
}

/// Inserts `repeats` copies of `token` at the start of `seq` (after a leading
/// BOS token when the model has one) and returns the output feature's
/// activation at the original target, now at `target + repeats`.
#[allow(clippy::too_many_arguments)]
pub fn intervene_prepend(
    model: &ToyModel,
    head: HeadId,
    sae_out: &SaeDictionary,
    feature: usize,
    seq: &TokenSequence,
    target: usize,
    token: usize,
    repeats: usize,
) -> Result<f32> {
    if target >= seq.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} outside sequence of length {}",
            seq.len()
        )));
    }
    if feature >= sae_out.n_features() {
        return Err(Error::InvalidArgument(format!(
            "feature {feature} outside dictionary of {}",
            sae_out.n_features()
        )));
    }
    if seq.len() + repeats > model.max_len() {
        return Err(Error::SequenceTooLong {
            len: seq.len() + repeats,
            max_len: model.max_len(),
        });
    }
    let at = usize::from(model.bos().is_some() && seq.ids.first() == model.bos().as_ref());
    if at > target {
        return Err(Error::InvalidArgument("cannot explain the BOS position after insertion".into()));
    }
    let mut ids = Vec::with_capacity(seq.len() + repeats);
    ids.extend_from_slice(&seq.ids[..at]);
    ids.extend(std::iter::repeat_n(token, repeats));
    ids.extend_from_slice(&seq.ids[at..]);
    let acts = output_activations(model, head, sae_out, feature, &TokenSequence::new(ids))?;
    Ok(acts[target + repeats])
}

/// `[exemplar][repeats]` activations for repeats `0..=max_repeats`.
pub fn intervene_series(
    model: &ToyModel,
    head: HeadId,
    sae_out: &SaeDictionary,
    feature: usize,
    exemplars: &[(TokenSequence, usize)],
    token: usize,
    max_repeats: usize,
) -> Result<Vec<Vec<f32>>> {
    exemplars
        .par_iter()
        .map(|(seq, target)| {
            (0..=max_repeats)
                .map(|r| intervene_prepend(model, head, sae_out, feature, seq, *target, token, r))
                .collect()
        })
        .collect()
}

/// Token whose bare embedding (no positional part) most activates input
/// feature `feature`; lowest id on ties.
pub fn pick_distractor_token(sae_in: &SaeDictionary, feature: usize, token_embeddings: &TensorF32) -> Result<usize> {
    let (token, act) = best_token_for_feature(token_embeddings, sae_in, feature)?;
    if act <= 0.0 {
        log::warn!("no token activates input feature {feature}; falling back to token {token}");
    }
    Ok(token)
}

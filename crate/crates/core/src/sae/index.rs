// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SaeDictionary;
use crate::error::{Error, Result};
use crate::model::{HeadId, TokenSequence, ToyModel};

/// Which side of a head an SAE decomposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingStream {
    /// Head inputs `x_i`.
    Input,
    /// Head outputs `y_t`.
    Output,
}

/// One strictly positive activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub feature: usize,
    pub seq: usize,
    pub pos: usize,
    pub act: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub n_features: usize,
    pub n_sequences: usize,
    /// Number of sequences in which each feature is active somewhere.
    pub active_sequences: Vec<usize>,
}

/// Sparse per-feature activation records over a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationIndex {
    n_sequences: usize,
    /// Per feature, sorted by `(seq, pos)`.
    records: Vec<Vec<ActivationRecord>>,
}

impl ActivationIndex {
    pub fn new(n_features: usize, n_sequences: usize) -> Self {
        Self {
            n_sequences,
            records: vec![Vec::new(); n_features],
        }
    }

    /// Builds an index from records in any order.
    pub fn from_records(
        n_features: usize,
        n_sequences: usize,
        records: impl IntoIterator<Item = ActivationRecord>,
    ) -> Result<Self> {
        let mut idx = Self::new(n_features, n_sequences);
        for r in records {
            if r.feature >= n_features || r.seq >= n_sequences {
                return Err(Error::InvalidArgument(format!(
                    "record {r:?} outside {n_features} features × {n_sequences} sequences"
                )));
            }
            if !(r.act > 0.0 && r.act.is_finite()) {
                return Err(Error::InvalidArgument(format!("record {r:?} is not strictly positive")));
            }
            idx.records[r.feature].push(r);
        }
        for recs in &mut idx.records {
            recs.sort_by_key(|r| (r.seq, r.pos));
            recs.dedup_by_key(|r| (r.seq, r.pos));
        }
        Ok(idx)
    }

    pub fn n_features(&self) -> usize {
        self.records.len()
    }

    pub fn n_sequences(&self) -> usize {
        self.n_sequences
    }

    pub fn records(&self, feature: usize) -> &[ActivationRecord] {
        &self.records[feature]
    }

    pub fn is_empty(&self) -> bool {
        self.records.iter().all(Vec::is_empty)
    }

    pub fn activation(&self, feature: usize, seq: usize, pos: usize) -> f32 {
        self.records[feature]
            .binary_search_by_key(&(seq, pos), |r| (r.seq, r.pos))
            .map(|i| self.records[feature][i].act)
            .unwrap_or(0.0)
    }

    /// Per active sequence: the first position of maximal activation.
    pub fn max_per_sequence(&self, feature: usize) -> BTreeMap<usize, (usize, f32)> {
        let mut out: BTreeMap<usize, (usize, f32)> = BTreeMap::new();
        for r in &self.records[feature] {
            out.entry(r.seq)
                .and_modify(|e| {
                    if r.act > e.1 {
                        *e = (r.pos, r.act);
                    }
                })
                .or_insert((r.pos, r.act));
        }
        out
    }

    pub fn active_sequence_count(&self, feature: usize) -> usize {
        let mut n = 0;
        let mut last = None;
        for r in &self.records[feature] {
            if last != Some(r.seq) {
                n += 1;
                last = Some(r.seq);
            }
        }
        n
    }

    pub fn summary(&self) -> IndexSummary {
        IndexSummary {
            n_features: self.n_features(),
            n_sequences: self.n_sequences,
            active_sequences: (0..self.n_features())
                .map(|f| self.active_sequence_count(f))
                .collect(),
        }
    }

    /// One `{feature, seq, pos, act}` JSON object per line, feature-major.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for recs in &self.records {
            for r in recs {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path, summary: &IndexSummary) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<ActivationRecord>(&line)?);
        }
        let idx = Self::from_records(summary.n_features, summary.n_sequences, records)?;
        if idx.summary() != *summary {
            return Err(Error::Format("activation index disagrees with its summary".into()));
        }
        Ok(idx)
    }
}

/// Runs `head` over the first `max_seqs` corpus sequences, encodes the chosen
/// embedding stream with `sae` at every position and records every strictly
/// positive activation.
pub fn collect_activations(
    model: &ToyModel,
    head: HeadId,
    stream: EmbeddingStream,
    sae: &SaeDictionary,
    corpus: &[TokenSequence],
    max_seqs: usize,
) -> Result<ActivationIndex> {
    if corpus.is_empty() || max_seqs == 0 {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    let h = model.head(head)?;
    let width = match stream {
        EmbeddingStream::Input => h.d_model(),
        EmbeddingStream::Output => h.d_head(),
    };
    if sae.dim() != width {
        return Err(Error::Dimension(format!(
            "SAE dim {} does not match {stream:?} width {width} of head {head}",
            sae.dim()
        )));
    }
    let seqs = &corpus[..corpus.len().min(max_seqs)];
    let per_seq: Vec<Vec<ActivationRecord>> = seqs
        .par_iter()
        .enumerate()
        .map(|(s, seq)| -> Result<Vec<ActivationRecord>> {
            let x = model.embed(seq)?;
            let emb = match stream {
                EmbeddingStream::Input => x,
                EmbeddingStream::Output => h.forward(&x)?.0,
            };
            let mut out = Vec::new();
            for pos in 0..seq.len() {
                for (feature, act) in sae.encode(emb.row(pos))?.into_iter().enumerate() {
                    if act > 0.0 {
                        out.push(ActivationRecord { feature, seq: s, pos, act });
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    ActivationIndex::from_records(sae.n_features(), seqs.len(), per_seq.into_iter().flatten())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionHead;
    use crate::numkernel::TensorF32;

    fn model() -> ToyModel {
        let head = AttentionHead::new(
            TensorF32::identity(3),
            TensorF32::identity(3),
            TensorF32::identity(3),
        )
        .unwrap();
        ToyModel::new(
            vec!["a".into(), "b".into(), "c".into()],
            TensorF32::identity(3),
            TensorF32::zeros(vec![8, 3]),
            vec![(HeadId { layer: 0, head: 0 }, head)],
            None,
        )
        .unwrap()
    }

    fn corpus() -> Vec<TokenSequence> {
        vec![
            TokenSequence::new(vec![0, 1, 2]),
            TokenSequence::new(vec![2, 2]),
            TokenSequence::new(vec![1]),
        ]
    }

    #[test]
    fn zero_encoder_gives_empty_index() {
        let sae = SaeDictionary::tied(TensorF32::zeros(vec![4, 3])).unwrap();
        let idx = collect_activations(&model(), HeadId { layer: 0, head: 0 }, EmbeddingStream::Input, &sae, &corpus(), 10)
            .unwrap();
        assert!(idx.is_empty());
        assert_eq!(idx.summary().active_sequences, vec![0; 4]);
    }

    #[test]
    fn identity_sae_on_inputs_marks_tokens() {
        let sae = SaeDictionary::tied(TensorF32::identity(3)).unwrap();
        let idx = collect_activations(&model(), HeadId { layer: 0, head: 0 }, EmbeddingStream::Input, &sae, &corpus(), 10)
            .unwrap();
        assert_eq!(idx.active_sequence_count(2), 2);
        assert_eq!(idx.activation(2, 1, 1), 1.0);
        assert_eq!(idx.activation(0, 1, 1), 0.0);
        for f in 0..3 {
            assert!(idx.active_sequence_count(f) <= idx.n_sequences());
        }
        assert_eq!(idx.max_per_sequence(2).get(&1), Some(&(0, 1.0)));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let sae = SaeDictionary::tied(TensorF32::identity(3)).unwrap();
        assert!(collect_activations(&model(), HeadId { layer: 0, head: 0 }, EmbeddingStream::Input, &sae, &[], 10).is_err());
    }

    #[test]
    fn max_seqs_limits_the_corpus() {
        let sae = SaeDictionary::tied(TensorF32::identity(3)).unwrap();
        let idx = collect_activations(&model(), HeadId { layer: 0, head: 0 }, EmbeddingStream::Output, &sae, &corpus(), 2)
            .unwrap();
        assert_eq!(idx.n_sequences(), 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.jsonl");
        let sae = SaeDictionary::tied(TensorF32::identity(3)).unwrap();
        let idx = collect_activations(&model(), HeadId { layer: 0, head: 0 }, EmbeddingStream::Output, &sae, &corpus(), 10)
            .unwrap();
        idx.write_jsonl(&p).unwrap();
        let back = ActivationIndex::read_jsonl(&p, &idx.summary()).unwrap();
        assert_eq!(back, idx);
        let first = std::fs::read_to_string(&p).unwrap();
        let line = first.lines().next().unwrap();
        assert!(line.starts_with("{\"feature\":"));
    }
}

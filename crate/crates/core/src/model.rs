// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy causal attention heads over a closed whitespace vocabulary.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::atrw::TensorFile;
use crate::error::{Error, Result};
use crate::numkernel::{gemm_nt, softmax_causal_row, TensorF32};

/// Query/key/value projections of a single head, each `[d_head × d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    w_q: TensorF32,
    w_k: TensorF32,
    w_v: TensorF32,
}

impl AttentionHead {
    pub fn new(w_q: TensorF32, w_k: TensorF32, w_v: TensorF32) -> Result<Self> {
        let shape = w_q.dims2()?;
        if w_k.dims2()? != shape || w_v.dims2()? != shape {
            return Err(Error::Dimension(format!(
                "head projections disagree: W_Q {:?}, W_K {:?}, W_V {:?}",
                w_q.shape(),
                w_k.shape(),
                w_v.shape()
            )));
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn d_head(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_model(&self) -> usize {
        self.w_q.cols()
    }

    pub fn w_q(&self) -> &TensorF32 {
        &self.w_q
    }

    pub fn w_k(&self) -> &TensorF32 {
        &self.w_k
    }

    pub fn w_v(&self) -> &TensorF32 {
        &self.w_v
    }

    fn check_input(&self, x: &TensorF32) -> Result<usize> {
        let (t, d) = x.dims2()?;
        if d != self.d_model() {
            return Err(Error::Dimension(format!(
                "input has {d} columns, head expects d_model = {}",
                self.d_model()
            )));
        }
        Ok(t)
    }

    /// Causal attention logits `x_tᵀ W_Qᵀ W_K x_i`.
    ///
    /// Entries above the diagonal (`i > t`) are masked: they are stored as
    /// zero and never read by [`AttentionHead::forward`].
    pub fn attention_logits(&self, x: &TensorF32) -> Result<TensorF32> {
        let t = self.check_input(x)?;
        let q = gemm_nt(x, &self.w_q)?;
        let k = gemm_nt(x, &self.w_k)?;
        let mut logits = gemm_nt(&q, &k)?;
        for row in 0..t {
            for col in row + 1..t {
                logits.set2(row, col, 0.0);
            }
        }
        Ok(logits)
    }

    /// Attention pattern from precomputed logits.
    pub fn attention_from_logits(logits: &TensorF32) -> Result<TensorF32> {
        let (t, t2) = logits.dims2()?;
        if t != t2 {
            return Err(Error::Dimension(format!("logits must be square, got {t} × {t2}")));
        }
        let mut data = Vec::with_capacity(t * t);
        for row in 0..t {
            data.extend(softmax_causal_row(logits.row(row), row + 1)?);
        }
        TensorF32::new(vec![t, t], data)
    }

    /// Runs the head: returns `(Y [t × d_head], attention [t × t])`.
    pub fn forward(&self, x: &TensorF32) -> Result<(TensorF32, TensorF32)> {
        let logits = self.attention_logits(x)?;
        self.forward_with_logits(x, &logits)
    }

    /// Forward pass with caller-supplied logits; only the causal part is read.
    pub fn forward_with_logits(
        &self,
        x: &TensorF32,
        logits: &TensorF32,
    ) -> Result<(TensorF32, TensorF32)> {
        let t = self.check_input(x)?;
        if logits.dims2()? != (t, t) {
            return Err(Error::Dimension(format!(
                "logits shape {:?} does not match {t} positions",
                logits.shape()
            )));
        }
        let attn = Self::attention_from_logits(logits)?;
        let values = gemm_nt(x, &self.w_v)?;
        let dh = self.d_head();
        let mut y = vec![0.0f32; t * dh];
        for row in 0..t {
            let mut acc = vec![0.0f64; dh];
            for i in 0..=row {
                let a = f64::from(attn.get2(row, i));
                for (o, &v) in acc.iter_mut().zip(values.row(i)) {
                    *o += a * f64::from(v);
                }
            }
            for (dst, v) in y[row * dh..(row + 1) * dh].iter_mut().zip(acc) {
                *dst = v as f32;
            }
        }
        Ok((TensorF32::new(vec![t, dh], y)?, attn))
    }
}

/// Token ids into a model's vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Identifies a head inside a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    vocab: Vec<String>,
    token_index: HashMap<String, usize>,
    token_embeddings: TensorF32,
    positional_embeddings: TensorF32,
    heads: Vec<(HeadId, AttentionHead)>,
    bos: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    vocab: Vec<String>,
    heads: Vec<HeadId>,
    bos: Option<usize>,
}

impl ToyModel {
    pub fn new(
        vocab: Vec<String>,
        token_embeddings: TensorF32,
        positional_embeddings: TensorF32,
        heads: Vec<(HeadId, AttentionHead)>,
        bos: Option<usize>,
    ) -> Result<Self> {
        let (rows, d_model) = token_embeddings.dims2()?;
        if rows != vocab.len() {
            return Err(Error::Dimension(format!(
                "{} vocabulary entries but {rows} embedding rows",
                vocab.len()
            )));
        }
        let (_, pd) = positional_embeddings.dims2()?;
        if pd != d_model {
            return Err(Error::Dimension(format!(
                "positional embeddings have width {pd}, token embeddings {d_model}"
            )));
        }
        let mut token_index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("vocabulary entry {i} `{w}` is not a word")));
            }
            if token_index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        for (id, h) in &heads {
            if h.d_model() != d_model {
                return Err(Error::Dimension(format!(
                    "head {id} expects d_model {}, model has {d_model}",
                    h.d_model()
                )));
            }
        }
        if let Some(b) = bos {
            if b >= vocab.len() {
                return Err(Error::TokenOutOfRange { id: b, vocab: vocab.len() });
            }
        }
        Ok(Self {
            vocab,
            token_index,
            token_embeddings,
            positional_embeddings,
            heads,
            bos,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn d_model(&self) -> usize {
        self.token_embeddings.cols()
    }

    pub fn max_len(&self) -> usize {
        self.positional_embeddings.rows()
    }

    pub fn bos(&self) -> Option<usize> {
        self.bos
    }

    pub fn token_embeddings(&self) -> &TensorF32 {
        &self.token_embeddings
    }

    pub fn positional_embeddings(&self) -> &TensorF32 {
        &self.positional_embeddings
    }

    pub fn heads(&self) -> &[(HeadId, AttentionHead)] {
        &self.heads
    }

    pub fn head(&self, id: HeadId) -> Result<&AttentionHead> {
        self.heads
            .iter()
            .find(|(h, _)| *h == id)
            .map(|(_, h)| h)
            .ok_or_else(|| Error::InvalidArgument(format!("model has no head {id}")))
    }

    pub fn token_id(&self, word: &str) -> Option<usize> {
        self.token_index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn validate(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() > self.max_len() {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max_len: self.max_len(),
            });
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id >= self.vocab.len()) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.vocab.len(),
            });
        }
        Ok(())
    }

    /// Row `i` is `token_embedding[id_i] + positional_embedding[i]`.
    pub fn embed(&self, seq: &TokenSequence) -> Result<TensorF32> {
        self.validate(seq)?;
        let d = self.d_model();
        let mut data = Vec::with_capacity(seq.len() * d);
        for (pos, &id) in seq.ids.iter().enumerate() {
            let tok = self.token_embeddings.row(id);
            let p = self.positional_embeddings.row(pos);
            data.extend(tok.iter().zip(p).map(|(a, b)| a + b));
        }
        TensorF32::new(vec![seq.len(), d], data)
    }

    /// Splits on whitespace; every word must be in the vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        text.split_whitespace()
            .map(|w| self.token_id(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence::new)
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> Result<String> {
        let words = seq
            .ids
            .iter()
            .map(|&id| {
                self.token(id).ok_or(Error::TokenOutOfRange {
                    id,
                    vocab: self.vocab.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new();
        f.push("token_embeddings", self.token_embeddings.clone());
        f.push("positional_embeddings", self.positional_embeddings.clone());
        for (id, h) in &self.heads {
            f.push(format!("{id}.w_q"), h.w_q.clone());
            f.push(format!("{id}.w_k"), h.w_k.clone());
            f.push(format!("{id}.w_v"), h.w_v.clone());
        }
        f
    }

    fn meta_json(&self) -> Result<String> {
        let meta = ModelMeta {
            vocab: self.vocab.clone(),
            heads: self.heads.iter().map(|(h, _)| *h).collect(),
            bos: self.bos,
        };
        Ok(serde_json::to_string_pretty(&meta)?)
    }

    /// Writes `path` (ATRW) and `<path>.meta.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().save(path)?;
        std::fs::write(meta_path(path), self.meta_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?;
        let mut f = TensorFile::load(path)?;
        let tok = f.take("token_embeddings")?;
        let pos = f.take("positional_embeddings")?;
        let mut heads = Vec::with_capacity(meta.heads.len());
        for id in meta.heads {
            let h = AttentionHead::new(
                f.take(&format!("{id}.w_q"))?,
                f.take(&format!("{id}.w_k"))?,
                f.take(&format!("{id}.w_v"))?,
            )?;
            heads.push((id, h));
        }
        if let Some((name, _)) = f.tensors.first() {
            return Err(Error::Format(format!("unexpected tensor `{name}` in model file")));
        }
        Self::new(meta.vocab, tok, pos, heads, meta.bos)
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::rng_stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_matrix(r: usize, c: usize, rng: &mut impl Rng) -> TensorF32 {
        TensorF32::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .unwrap()
    }

    fn words(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    fn one_hot_model(n: usize, max_len: usize) -> ToyModel {
        let head = AttentionHead::new(
            TensorF32::identity(n),
            TensorF32::identity(n),
            TensorF32::identity(n),
        )
        .unwrap();
        ToyModel::new(
            words(n),
            TensorF32::identity(n),
            TensorF32::zeros(vec![max_len, n]),
            vec![(HeadId { layer: 0, head: 0 }, head)],
            None,
        )
        .unwrap()
    }

    #[test]
    fn embed_examples() {
        let m = one_hot_model(3, 4);
        let x = m.embed(&TokenSequence::new(vec![2, 0])).unwrap();
        assert_eq!(x.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(x.row(1), &[1.0, 0.0, 0.0]);
        let empty = m.embed(&TokenSequence::default()).unwrap();
        assert_eq!(empty.shape(), &[0, 3]);
        assert!(matches!(
            m.embed(&TokenSequence::new(vec![3])),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            m.embed(&TokenSequence::new(vec![0; 5])),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn embed_adds_positions() {
        let mut rng = rng_stream(5, 0);
        let tok = rand_matrix(4, 3, &mut rng);
        let pos = rand_matrix(6, 3, &mut rng);
        let m = ToyModel::new(words(4), tok.clone(), pos.clone(), vec![], None).unwrap();
        let x = m.embed(&TokenSequence::new(vec![3, 1])).unwrap();
        for j in 0..3 {
            assert_eq!(x.get2(1, j), tok.get2(1, j) + pos.get2(1, j));
        }
    }

    #[test]
    fn zero_qk_gives_zero_logits_and_uniform_attention() {
        let head = AttentionHead::new(
            TensorF32::zeros(vec![2, 3]),
            TensorF32::zeros(vec![2, 3]),
            TensorF32::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 3).unwrap(),
        )
        .unwrap();
        let x = TensorF32::from_rows(&vec![vec![1.0, 2.0, 3.0]; 4], 3).unwrap();
        assert!(head.attention_logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
        let (_, attn) = head.forward(&x).unwrap();
        for t in 0..4 {
            for i in 0..=t {
                assert!((attn.get2(t, i) - 1.0 / (t as f32 + 1.0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_logits_detect_equal_tokens() {
        let m = one_hot_model(4, 8);
        let seq = TokenSequence::new(vec![1, 2, 1, 3]);
        let x = m.embed(&seq).unwrap();
        let l = m.heads()[0].1.attention_logits(&x).unwrap();
        for t in 0..4 {
            for i in 0..=t {
                let want = if seq.ids[t] == seq.ids[i] { 1.0 } else { 0.0 };
                assert_eq!(l.get2(t, i), want);
            }
        }
    }

    #[test]
    fn single_token_forward() {
        let mut rng = rng_stream(6, 0);
        let head = AttentionHead::new(
            rand_matrix(2, 3, &mut rng),
            rand_matrix(2, 3, &mut rng),
            rand_matrix(2, 3, &mut rng),
        )
        .unwrap();
        let x = rand_matrix(1, 3, &mut rng);
        let (y, attn) = head.forward(&x).unwrap();
        assert_eq!(attn.data(), &[1.0]);
        let want = crate::numkernel::matvec(head.w_v(), x.row(0)).unwrap();
        assert_eq!(y.row(0), want.as_slice());
    }

    /// Straight-line f64 evaluation of the head equations.
    fn reference_forward(head: &AttentionHead, x: &TensorF32) -> Vec<Vec<f64>> {
        let t = x.rows();
        let proj = |w: &TensorF32, row: &[f32]| -> Vec<f64> {
            (0..w.rows())
                .map(|h| (0..w.cols()).map(|j| f64::from(w.get2(h, j)) * f64::from(row[j])).sum())
                .collect()
        };
        let mut out = Vec::new();
        for tt in 0..t {
            let q = proj(head.w_q(), x.row(tt));
            let logits: Vec<f64> = (0..=tt)
                .map(|i| {
                    let k = proj(head.w_k(), x.row(i));
                    q.iter().zip(&k).map(|(a, b)| a * b).sum()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut y = vec![0.0; head.d_head()];
            for i in 0..=tt {
                let v = proj(head.w_v(), x.row(i));
                for (o, vv) in y.iter_mut().zip(v) {
                    *o += e[i] / z * vv;
                }
            }
            out.push(y);
        }
        out
    }

    #[test]
    fn forward_matches_f64_reference() {
        let mut rng = rng_stream(7, 0);
        for _ in 0..20 {
            let head = AttentionHead::new(
                rand_matrix(3, 5, &mut rng),
                rand_matrix(3, 5, &mut rng),
                rand_matrix(3, 5, &mut rng),
            )
            .unwrap();
            let x = rand_matrix(4, 5, &mut rng);
            let (y, attn) = head.forward(&x).unwrap();
            let want = reference_forward(&head, &x);
            for t in 0..4 {
                let s: f32 = attn.row(t).iter().sum();
                assert!((s - 1.0).abs() <= 1e-6);
                for (g, w) in y.row(t).iter().zip(&want[t]) {
                    assert!((f64::from(*g) - w).abs() <= 1e-5 * w.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn masked_logits_never_reach_output() {
        let mut rng = rng_stream(8, 0);
        let head = AttentionHead::new(
            rand_matrix(3, 4, &mut rng),
            rand_matrix(3, 4, &mut rng),
            rand_matrix(3, 4, &mut rng),
        )
        .unwrap();
        let x = rand_matrix(5, 4, &mut rng);
        let logits = head.attention_logits(&x).unwrap();
        let (y, _) = head.forward_with_logits(&x, &logits).unwrap();
        let mut data = logits.data().to_vec();
        for t in 0..5 {
            for i in t + 1..5 {
                data[t * 5 + i] = rng.random_range(-1e3f32..1e3);
            }
        }
        let perturbed = TensorF32::new(vec![5, 5], data).unwrap();
        let (y2, _) = head.forward_with_logits(&x, &perturbed).unwrap();
        assert_eq!(y.data(), y2.data());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = one_hot_model(3, 4);
        let x = TensorF32::zeros(vec![2, 5]);
        assert!(matches!(m.heads()[0].1.forward(&x), Err(Error::Dimension(_))));
        assert!(AttentionHead::new(
            TensorF32::zeros(vec![2, 3]),
            TensorF32::zeros(vec![3, 3]),
            TensorF32::zeros(vec![2, 3])
        )
        .is_err());
    }

    #[test]
    fn tokenize_examples() {
        let m = ToyModel::new(
            vec!["If".into(), "then".into(), "x".into()],
            TensorF32::identity(3),
            TensorF32::zeros(vec![8, 3]),
            vec![],
            None,
        )
        .unwrap();
        assert_eq!(m.tokenize("If then").unwrap().ids, vec![0, 1]);
        assert!(m.tokenize("").unwrap().is_empty());
        assert!(matches!(m.tokenize("If nope"), Err(Error::UnknownToken(w)) if w == "nope"));
        assert_eq!(m.detokenize(&m.tokenize("  If\tx   then ").unwrap()).unwrap(), "If x then");
    }

    #[test]
    fn rejects_duplicate_vocab() {
        assert!(ToyModel::new(
            vec!["a".into(), "a".into()],
            TensorF32::identity(2),
            TensorF32::zeros(vec![2, 2]),
            vec![],
            None
        )
        .is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.atrw");
        let m = one_hot_model(5, 6);
        m.save(&path).unwrap();
        assert_eq!(ToyModel::load(&path).unwrap(), m);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'Z';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(ToyModel::load(&path), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn tokenize_round_trip(ids in proptest::collection::vec(0usize..6, 0..12), seps in proptest::collection::vec(1usize..4, 12)) {
            let m = one_hot_model(6, 16);
            let mut text = String::from("  ");
            for (i, id) in ids.iter().enumerate() {
                text.push_str(&format!("w{id}"));
                text.push_str(&" \t\n"[..seps[i].min(3)]);
            }
            let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
            let seq = m.tokenize(&text).unwrap();
            prop_assert_eq!(&seq.ids, &ids);
            prop_assert_eq!(m.detokenize(&seq).unwrap(), normalized);
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! ReLU sparse autoencoders.
//!
//! A dictionary stores an encoder row `d̃_j` and a decoder row `d_j` per
//! feature. Activations are `f_j(x) = relu(d̃_j · (x − b_dec) + b_enc_j)` and
//! the reconstruction is `Σ_j f_j d_j + b_dec`. Both biases default to zero.

mod index;
mod train;

pub use index::{collect_activations, ActivationIndex, ActivationRecord, EmbeddingStream, IndexSummary};
pub use train::{
    resample_dead, train_sae, ActivationStream, PoolStream, SaeTrainer, SparseDictionaryStream,
    TrainConfig, TrainHistory, TrainRecord, TrainerCheckpoint,
};

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::atrw::TensorFile;
use crate::error::{Error, Result};
use crate::numkernel::{dot64, l2_norm, SeedTree, TensorF32};

#[derive(Clone, Debug, PartialEq)]
pub struct SaeDictionary {
    encoder: TensorF32,
    decoder: TensorF32,
    b_enc: TensorF32,
    b_dec: TensorF32,
}

/// Reconstruction and sparsity terms of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaeLoss {
    pub mse: f64,
    pub l1: f64,
    pub total: f64,
}

impl SaeDictionary {
    pub fn new(
        encoder: TensorF32,
        decoder: TensorF32,
        b_enc: TensorF32,
        b_dec: TensorF32,
    ) -> Result<Self> {
        let (n, dim) = encoder.dims2()?;
        if decoder.dims2()? != (n, dim) {
            return Err(Error::Dimension(format!(
                "encoder {:?} and decoder {:?} differ",
                encoder.shape(),
                decoder.shape()
            )));
        }
        if b_enc.shape() != [n] || b_dec.shape() != [dim] {
            return Err(Error::Dimension(format!(
                "biases {:?}/{:?} do not fit a {n} × {dim} dictionary",
                b_enc.shape(),
                b_dec.shape()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            b_enc,
            b_dec,
        })
    }

    /// Dictionary with zero biases.
    pub fn from_weights(encoder: TensorF32, decoder: TensorF32) -> Result<Self> {
        let (n, dim) = encoder.dims2()?;
        Self::new(encoder, decoder, TensorF32::zeros(vec![n]), TensorF32::zeros(vec![dim]))
    }

    /// Tied dictionary whose encoder and decoder are both `atoms`.
    pub fn tied(atoms: TensorF32) -> Result<Self> {
        Self::from_weights(atoms.clone(), atoms)
    }

    /// Random unit decoder rows with the encoder initialised to the same rows.
    pub fn random(n: usize, dim: usize, seed: SeedTree) -> Self {
        let mut rng = seed.rng();
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let mut row: Vec<f32> = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let norm = l2_norm(&row).max(f32::MIN_POSITIVE);
            row.iter_mut().for_each(|v| *v /= norm);
            data.extend(row);
        }
        let atoms = TensorF32::new(vec![n, dim], data).expect("finite normal samples");
        Self::tied(atoms).expect("consistent shapes")
    }

    pub fn n_features(&self) -> usize {
        self.encoder.rows()
    }

    pub fn dim(&self) -> usize {
        self.encoder.cols()
    }

    pub fn encoder(&self) -> &TensorF32 {
        &self.encoder
    }

    pub fn decoder(&self) -> &TensorF32 {
        &self.decoder
    }

    pub fn b_enc(&self) -> &TensorF32 {
        &self.b_enc
    }

    pub fn b_dec(&self) -> &TensorF32 {
        &self.b_dec
    }

    pub fn decoder_row(&self, j: usize) -> &[f32] {
        self.decoder.row(j)
    }

    pub fn encoder_row(&self, j: usize) -> &[f32] {
        self.encoder.row(j)
    }

    pub(crate) fn parts_mut(
        &mut self,
    ) -> (&mut TensorF32, &mut TensorF32, &mut TensorF32, &mut TensorF32) {
        (&mut self.encoder, &mut self.decoder, &mut self.b_enc, &mut self.b_dec)
    }

    fn check_dim(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "input has length {}, dictionary dim is {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Activation of feature `j` alone; bit-identical to `encode(x)[j]`.
    pub fn activation(&self, x: &[f32], j: usize) -> f32 {
        let centered: Vec<f32> = x.iter().zip(self.b_dec.data()).map(|(a, b)| a - b).collect();
        let pre = dot64(self.encoder.row(j), &centered) + f64::from(self.b_enc.data()[j]);
        (pre as f32).max(0.0)
    }

    pub fn encode(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_dim(x)?;
        let centered: Vec<f32> = x.iter().zip(self.b_dec.data()).map(|(a, b)| a - b).collect();
        Ok((0..self.n_features())
            .map(|j| {
                let pre = dot64(self.encoder.row(j), &centered) + f64::from(self.b_enc.data()[j]);
                (pre as f32).max(0.0)
            })
            .collect())
    }

    /// Encodes each row of `x: [t × dim]` into `[t × n]`.
    pub fn encode_rows(&self, x: &TensorF32) -> Result<TensorF32> {
        let (t, _) = x.dims2()?;
        let mut data = Vec::with_capacity(t * self.n_features());
        for i in 0..t {
            data.extend(self.encode(x.row(i))?);
        }
        TensorF32::new(vec![t, self.n_features()], data)
    }

    pub fn decode(&self, f: &[f32]) -> Result<Vec<f32>> {
        if f.len() != self.n_features() {
            return Err(Error::Dimension(format!(
                "activation vector has length {}, dictionary has {} features",
                f.len(),
                self.n_features()
            )));
        }
        let mut acc: Vec<f64> = self.b_dec.data().iter().map(|&b| f64::from(b)).collect();
        for (j, &fj) in f.iter().enumerate() {
            if fj == 0.0 {
                continue;
            }
            for (a, &d) in acc.iter_mut().zip(self.decoder.row(j)) {
                *a += f64::from(fj) * f64::from(d);
            }
        }
        Ok(acc.into_iter().map(|v| v as f32).collect())
    }

    /// Mean squared reconstruction norm plus `l1` times the mean activation mass.
    pub fn loss(&self, batch: &TensorF32, l1: f64) -> Result<SaeLoss> {
        let (b, dim) = batch.dims2()?;
        if dim != self.dim() {
            return Err(Error::Dimension(format!(
                "batch width {dim} does not match dictionary dim {}",
                self.dim()
            )));
        }
        if b == 0 {
            return Err(Error::Domain("loss over an empty batch".into()));
        }
        let (mut se, mut mass) = (0.0f64, 0.0f64);
        for i in 0..b {
            let x = batch.row(i);
            let f = self.encode(x)?;
            let xh = self.decode(&f)?;
            se += x
                .iter()
                .zip(&xh)
                .map(|(a, h)| (f64::from(*a) - f64::from(*h)).powi(2))
                .sum::<f64>();
            mass += f.iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        let mse = se / b as f64;
        let l1_term = l1 * mass / b as f64;
        Ok(SaeLoss {
            mse,
            l1: l1_term,
            total: mse + l1_term,
        })
    }

    /// `1 − Σ‖x − x̂‖² / Σ‖x − x̄‖²` over the rows of `batch`.
    pub fn variance_explained(&self, batch: &TensorF32) -> Result<f64> {
        let (b, dim) = batch.dims2()?;
        let mut mean = vec![0.0f64; dim];
        for i in 0..b {
            for (m, &v) in mean.iter_mut().zip(batch.row(i)) {
                *m += f64::from(v) / b as f64;
            }
        }
        let (mut resid, mut total) = (0.0f64, 0.0f64);
        for i in 0..b {
            let x = batch.row(i);
            let xh = self.decode(&self.encode(x)?)?;
            for k in 0..dim {
                resid += (f64::from(x[k]) - f64::from(xh[k])).powi(2);
                total += (f64::from(x[k]) - mean[k]).powi(2);
            }
        }
        if total == 0.0 {
            return Err(Error::Domain("batch has zero variance".into()));
        }
        Ok(1.0 - resid / total)
    }

    /// Mean over reference atoms of the best cosine with any decoder row.
    pub fn mean_matched_cosine(&self, atoms: &TensorF32) -> Result<f64> {
        let (k, dim) = atoms.dims2()?;
        if dim != self.dim() || k == 0 {
            return Err(Error::Dimension(format!(
                "reference atoms {:?} vs dictionary dim {}",
                atoms.shape(),
                self.dim()
            )));
        }
        let mut total = 0.0;
        for a in 0..k {
            let ar = atoms.row(a);
            let an = f64::from(l2_norm(ar)).max(f64::MIN_POSITIVE);
            let best = (0..self.n_features())
                .map(|j| {
                    let d = self.decoder.row(j);
                    dot64(ar, d) / (an * f64::from(l2_norm(d)).max(f64::MIN_POSITIVE))
                })
                .fold(f64::NEG_INFINITY, f64::max);
            total += best;
        }
        Ok(total / k as f64)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new();
        f.push("encoder", self.encoder.clone());
        f.push("decoder", self.decoder.clone());
        f.push("b_enc", self.b_enc.clone());
        f.push("b_dec", self.b_dec.clone());
        f
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = TensorFile::load(path)?;
        Self::new(f.take("encoder")?, f.take("decoder")?, f.take("b_enc")?, f.take("b_dec")?)
    }
}

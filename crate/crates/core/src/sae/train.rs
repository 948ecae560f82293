// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SaeDictionary;
use crate::error::{Error, Result};
use crate::numkernel::{adam_step, dot64, l2_norm, AdamState, SeedTree, TensorF32};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_features: usize,
    pub l1_coefficient: f64,
    pub batch_size: usize,
    pub lr: f32,
    pub steps: u64,
    pub resample_checkpoints: Vec<u64>,
    pub dead_window: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_features: 2048,
            l1_coefficient: 5e-4,
            batch_size: 4096,
            lr: AdamState::DEFAULT_LR,
            steps: 100_000,
            resample_checkpoints: vec![25_000, 50_000, 75_000, 100_000],
            dead_window: 12_500,
            seed: 0,
        }
    }
}

/// Source of training batches.
///
/// `batch` must be a pure function of `(step, batch_size)` so that a run can
/// resume from any checkpoint and reproduce the same trajectory.
pub trait ActivationStream {
    fn dim(&self) -> usize;
    fn batch(&self, step: u64, batch_size: usize) -> Result<TensorF32>;
}

/// Single pass over a fixed pool of vectors in seeded order; later epochs
/// reshuffle with a fresh permutation.
pub struct PoolStream {
    pool: TensorF32,
    seed: SeedTree,
}

impl PoolStream {
    pub fn new(pool: TensorF32, seed: SeedTree) -> Result<Self> {
        let (n, _) = pool.dims2()?;
        if n == 0 {
            return Err(Error::InvalidArgument("activation pool is empty".into()));
        }
        Ok(Self { pool, seed })
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let n = self.pool.rows();
        let mut rng = self.seed.child("epoch").index(epoch).rng();
        sample(&mut rng, n, n).into_vec()
    }
}

impl ActivationStream for PoolStream {
    fn dim(&self) -> usize {
        self.pool.cols()
    }

    fn batch(&self, step: u64, batch_size: usize) -> Result<TensorF32> {
        let n = self.pool.rows() as u64;
        let start = step * batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        let mut data = Vec::with_capacity(batch_size * self.dim());
        for g in start..start + batch_size as u64 {
            let epoch = g / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached = Some((epoch, self.permutation(epoch)));
            }
            let row = cached.as_ref().expect("filled above").1[(g % n) as usize];
            data.extend_from_slice(self.pool.row(row));
        }
        TensorF32::new(vec![batch_size, self.dim()], data)
    }
}

/// Samples that are non-negative combinations of `active` atoms drawn
/// uniformly from a fixed dictionary, with coefficients in `[0.5, 1.5)`.
pub struct SparseDictionaryStream {
    atoms: TensorF32,
    active: usize,
    seed: SeedTree,
}

impl SparseDictionaryStream {
    pub fn new(atoms: TensorF32, active: usize, seed: SeedTree) -> Result<Self> {
        let (n, _) = atoms.dims2()?;
        if active == 0 || active > n {
            return Err(Error::InvalidArgument(format!(
                "cannot activate {active} of {n} atoms"
            )));
        }
        Ok(Self { atoms, active, seed })
    }

    pub fn atoms(&self) -> &TensorF32 {
        &self.atoms
    }
}

impl ActivationStream for SparseDictionaryStream {
    fn dim(&self) -> usize {
        self.atoms.cols()
    }

    fn batch(&self, step: u64, batch_size: usize) -> Result<TensorF32> {
        let mut rng = self.seed.index(step).rng();
        let dim = self.dim();
        let mut data = vec![0.0f32; batch_size * dim];
        for b in 0..batch_size {
            let row = &mut data[b * dim..(b + 1) * dim];
            for a in sample(&mut rng, self.atoms.rows(), self.active) {
                let c: f32 = rng.random_range(0.5..1.5);
                for (r, &v) in row.iter_mut().zip(self.atoms.row(a)) {
                    *r += c * v;
                }
            }
        }
        TensorF32::new(vec![batch_size, dim], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub mse: f64,
    pub l1: f64,
    pub total: f64,
    pub dead: usize,
    pub resampled: usize,
}

pub type TrainHistory = Vec<TrainRecord>;

/// Re-initialises `dead` features toward high-loss rows of `recent`.
///
/// Rows are drawn with probability proportional to the square of their
/// squared reconstruction error. The decoder row becomes the unit direction of the
/// centred example, the encoder row the same direction scaled to 0.2 × the
/// mean encoder norm of the live features, and the encoder bias is zeroed.
/// Returns the source row chosen for each dead feature.
pub fn resample_dead(
    sae: &mut SaeDictionary,
    dead: &[usize],
    recent: &TensorF32,
    seed: SeedTree,
) -> Result<Vec<usize>> {
    if dead.is_empty() {
        return Ok(Vec::new());
    }
    let (b, dim) = recent.dims2()?;
    if b == 0 {
        log::warn!("resample requested with an empty batch; {} dead features left as is", dead.len());
        return Ok(Vec::new());
    }
    if dim != sae.dim() {
        return Err(Error::Dimension(format!(
            "resample batch width {dim} vs dictionary dim {}",
            sae.dim()
        )));
    }
    let mut weights = Vec::with_capacity(b);
    for i in 0..b {
        let x = recent.row(i);
        let xh = sae.decode(&sae.encode(x)?)?;
        let err: f64 = x
            .iter()
            .zip(&xh)
            .map(|(a, h)| (f64::from(*a) - f64::from(*h)).powi(2))
            .sum();
        weights.push(err * err);
    }
    let chooser = if weights.iter().any(|&w| w > 0.0 && w.is_finite()) {
        WeightedIndex::new(&weights).ok()
    } else {
        None
    };
    let is_dead = {
        let mut m = vec![false; sae.n_features()];
        for &j in dead {
            m[j] = true;
        }
        m
    };
    let live_norms: Vec<f64> = (0..sae.n_features())
        .filter(|&j| !is_dead[j])
        .map(|j| f64::from(l2_norm(sae.encoder_row(j))))
        .collect();
    let enc_scale = if live_norms.is_empty() {
        1.0
    } else {
        0.2 * live_norms.iter().sum::<f64>() / live_norms.len() as f64
    };

    let mut rng = seed.rng();
    let b_dec = sae.b_dec().data().to_vec();
    let mut sources = Vec::with_capacity(dead.len());
    let (encoder, decoder, b_enc, _) = sae.parts_mut();
    for &j in dead {
        let src = match &chooser {
            Some(w) => w.sample(&mut rng),
            None => rng.random_range(0..b),
        };
        let mut dir: Vec<f32> = recent.row(src).iter().zip(&b_dec).map(|(x, c)| x - c).collect();
        let mut norm = l2_norm(&dir);
        if norm <= f32::EPSILON {
            dir = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            norm = l2_norm(&dir).max(f32::MIN_POSITIVE);
        }
        for (d, v) in decoder.row_mut(j).iter_mut().zip(&dir) {
            *d = v / norm;
        }
        let s = (enc_scale / f64::from(norm)) as f32;
        for (e, v) in encoder.row_mut(j).iter_mut().zip(&dir) {
            *e = v * s;
        }
        b_enc.data_mut()[j] = 0.0;
        sources.push(src);
    }
    encoder.check_finite("resampled encoder")?;
    Ok(sources)
}

/// Serializable trainer state; resuming from it continues bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerCheckpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub encoder: TensorF32,
    pub decoder: TensorF32,
    pub b_enc: TensorF32,
    pub b_dec: TensorF32,
    pub adam: Vec<AdamState>,
    pub last_fired: Vec<u64>,
    pub history: TrainHistory,
}

pub struct SaeTrainer {
    config: TrainConfig,
    sae: SaeDictionary,
    adam: [AdamState; 4],
    last_fired: Vec<u64>,
    step: u64,
    history: TrainHistory,
}

struct Grads {
    encoder: Vec<f64>,
    decoder: Vec<f64>,
    b_enc: Vec<f64>,
    b_dec: Vec<f64>,
}

fn to_tensor(shape: &[usize], v: Vec<f64>) -> Result<TensorF32> {
    TensorF32::new(shape.to_vec(), v.into_iter().map(|x| x as f32).collect())
}

impl SaeTrainer {
    pub fn new(config: TrainConfig, sae: SaeDictionary) -> Self {
        let (n, dim) = (sae.n_features(), sae.dim());
        let lr = config.lr;
        let adam = [
            AdamState::with_lr(&[n, dim], lr),
            AdamState::with_lr(&[n, dim], lr),
            AdamState::with_lr(&[n], lr),
            AdamState::with_lr(&[dim], lr),
        ];
        Self {
            config,
            sae,
            adam,
            last_fired: vec![0; n],
            step: 0,
            history: Vec::new(),
        }
    }

    pub fn from_checkpoint(cp: TrainerCheckpoint) -> Result<Self> {
        let sae = SaeDictionary::new(cp.encoder, cp.decoder, cp.b_enc, cp.b_dec)?;
        let adam: [AdamState; 4] = cp
            .adam
            .try_into()
            .map_err(|_| Error::Format("checkpoint must hold four optimizer states".into()))?;
        if cp.last_fired.len() != sae.n_features() {
            return Err(Error::Format("checkpoint fired-step table has wrong length".into()));
        }
        Ok(Self {
            config: cp.config,
            sae,
            adam,
            last_fired: cp.last_fired,
            step: cp.step,
            history: cp.history,
        })
    }

    pub fn checkpoint(&self) -> TrainerCheckpoint {
        TrainerCheckpoint {
            config: self.config.clone(),
            step: self.step,
            encoder: self.sae.encoder().clone(),
            decoder: self.sae.decoder().clone(),
            b_enc: self.sae.b_enc().clone(),
            b_dec: self.sae.b_dec().clone(),
            adam: self.adam.to_vec(),
            last_fired: self.last_fired.clone(),
            history: self.history.clone(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn dictionary(&self) -> &SaeDictionary {
        &self.sae
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn into_parts(self) -> (SaeDictionary, TrainHistory) {
        (self.sae, self.history)
    }

    /// Features that have not fired during the last `dead_window` steps.
    pub fn dead_features(&self) -> Vec<usize> {
        (0..self.last_fired.len())
            .filter(|&j| self.step - self.last_fired[j] >= self.config.dead_window)
            .collect()
    }

    fn gradients(&self, batch: &TensorF32) -> Result<(Grads, f64, f64, Vec<bool>)> {
        let sae = &self.sae;
        let (b, dim) = batch.dims2()?;
        let n = sae.n_features();
        let inv_b = 1.0 / b as f64;
        let l1 = self.config.l1_coefficient;
        let mut g = Grads {
            encoder: vec![0.0; n * dim],
            decoder: vec![0.0; n * dim],
            b_enc: vec![0.0; n],
            b_dec: vec![0.0; dim],
        };
        let (mut se, mut mass) = (0.0f64, 0.0f64);
        let mut fired = vec![false; n];
        let b_dec = sae.b_dec().data();
        let b_enc = sae.b_enc().data();
        let mut centered = vec![0.0f32; dim];
        let mut pre = vec![0.0f64; n];
        let mut recon = vec![0.0f64; dim];
        let mut gr = vec![0.0f32; dim];
        for i in 0..b {
            let x = batch.row(i);
            for k in 0..dim {
                centered[k] = x[k] - b_dec[k];
                recon[k] = f64::from(b_dec[k]);
            }
            for j in 0..n {
                pre[j] = dot64(sae.encoder_row(j), &centered) + f64::from(b_enc[j]);
                if pre[j] > 0.0 {
                    fired[j] = true;
                    mass += pre[j];
                    for (r, &d) in recon.iter_mut().zip(sae.decoder_row(j)) {
                        *r += pre[j] * f64::from(d);
                    }
                }
            }
            for k in 0..dim {
                let r = recon[k] - f64::from(x[k]);
                se += r * r;
                let d = 2.0 * r * inv_b;
                gr[k] = d as f32;
                g.b_dec[k] += d;
            }
            for j in 0..n {
                if pre[j] <= 0.0 {
                    continue;
                }
                let f = pre[j];
                let row = &mut g.decoder[j * dim..(j + 1) * dim];
                for (gd, &v) in row.iter_mut().zip(&gr) {
                    *gd += f * f64::from(v);
                }
                let dpre = dot64(sae.decoder_row(j), &gr) + l1 * inv_b;
                let erow = &mut g.encoder[j * dim..(j + 1) * dim];
                for (ge, &c) in erow.iter_mut().zip(&centered) {
                    *ge += dpre * f64::from(c);
                }
                g.b_enc[j] += dpre;
                for (gb, &e) in g.b_dec.iter_mut().zip(sae.encoder_row(j)) {
                    *gb -= dpre * f64::from(e);
                }
            }
        }
        Ok((g, se * inv_b, l1 * mass * inv_b, fired))
    }

    /// One optimisation step on `batch`, followed by decoder renormalisation
    /// and, at configured checkpoints, dead-feature resampling.
    pub fn step(&mut self, batch: &TensorF32) -> Result<TrainRecord> {
        let (b, dim) = batch.dims2()?;
        if dim != self.sae.dim() || b == 0 {
            return Err(Error::Dimension(format!(
                "batch {:?} does not fit dictionary dim {}",
                batch.shape(),
                self.sae.dim()
            )));
        }
        let (g, mse, l1, fired) = self.gradients(batch)?;
        let total = mse + l1;
        if !total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("loss is {total} (mse {mse}, l1 {l1})"),
            });
        }
        let n = self.sae.n_features();
        let shapes = [vec![n, dim], vec![n, dim], vec![n], vec![dim]];
        let grads = [
            to_tensor(&shapes[0], g.encoder)?,
            to_tensor(&shapes[1], g.decoder)?,
            to_tensor(&shapes[2], g.b_enc)?,
            to_tensor(&shapes[3], g.b_dec)?,
        ];
        {
            let (enc, dec, be, bd) = self.sae.parts_mut();
            let params = [enc, dec, be, bd];
            for ((p, gr), st) in params.into_iter().zip(&grads).zip(self.adam.iter_mut()) {
                adam_step(p, gr, st).map_err(|e| Error::Diverged {
                    step: self.step,
                    detail: e.to_string(),
                })?;
            }
            for j in 0..n {
                let row = dec.row_mut(j);
                let norm = l2_norm(row);
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        self.step += 1;
        for (j, f) in fired.into_iter().enumerate() {
            if f {
                self.last_fired[j] = self.step;
            }
        }
        let mut resampled = 0;
        if self.config.resample_checkpoints.contains(&self.step) {
            let dead = self.dead_features();
            if !dead.is_empty() {
                let seed = SeedTree::new(self.config.seed).child("resample").index(self.step);
                let sources = resample_dead(&mut self.sae, &dead, batch, seed)?;
                if !sources.is_empty() {
                    for &j in &dead {
                        for st in &mut self.adam[..3] {
                            st.reset_row(j);
                        }
                        self.last_fired[j] = self.step;
                    }
                    resampled = dead.len();
                }
            }
        }
        let record = TrainRecord {
            step: self.step,
            mse,
            l1,
            total,
            dead: self.dead_features().len(),
            resampled,
        };
        self.history.push(record);
        Ok(record)
    }

    /// Trains until `config.steps` steps have been taken in total.
    pub fn run(&mut self, stream: &dyn ActivationStream) -> Result<()> {
        self.run_until(stream, self.config.steps)
    }

    pub fn run_until(&mut self, stream: &dyn ActivationStream, until: u64) -> Result<()> {
        if stream.dim() != self.sae.dim() {
            return Err(Error::Dimension(format!(
                "stream dim {} vs dictionary dim {}",
                stream.dim(),
                self.sae.dim()
            )));
        }
        while self.step < until {
            let batch = stream.batch(self.step, self.config.batch_size)?;
            self.step(&batch)?;
        }
        Ok(())
    }
}

/// Trains a fresh dictionary of `config.n_features` features on `stream`.
pub fn train_sae(
    config: &TrainConfig,
    stream: &dyn ActivationStream,
) -> Result<(SaeDictionary, TrainHistory)> {
    let init = SaeDictionary::random(
        config.n_features,
        stream.dim(),
        SeedTree::new(config.seed).child("init"),
    );
    let mut trainer = SaeTrainer::new(config.clone(), init);
    trainer.run(stream)?;
    Ok(trainer.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::tests::orthonormal;

    fn small_config(steps: u64) -> TrainConfig {
        TrainConfig {
            n_features: 16,
            batch_size: 64,
            steps,
            resample_checkpoints: vec![],
            dead_window: 100,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_follow_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 4096);
        assert_eq!(c.lr, 0.0012);
        assert_eq!(c.resample_checkpoints, vec![25_000, 50_000, 75_000, 100_000]);
        assert_eq!(c.dead_window, 12_500);
        let a = AdamState::new(&[1]);
        assert_eq!((a.beta1, a.beta2), (0.9, 0.99));
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let stream =
            SparseDictionaryStream::new(orthonormal(16, 8, 1), 2, SeedTree::new(1)).unwrap();
        let cfg = small_config(0);
        let (sae, hist) = train_sae(&cfg, &stream).unwrap();
        assert!(hist.is_empty());
        assert_eq!(sae, SaeDictionary::random(16, 8, SeedTree::new(11).child("init")));
    }

    #[test]
    fn training_is_deterministic() {
        let stream =
            SparseDictionaryStream::new(orthonormal(16, 8, 2), 2, SeedTree::new(2)).unwrap();
        let cfg = small_config(50);
        let a = train_sae(&cfg, &stream).unwrap();
        let b = train_sae(&cfg, &stream).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn decoder_rows_stay_unit_norm() {
        let stream =
            SparseDictionaryStream::new(orthonormal(16, 8, 3), 3, SeedTree::new(3)).unwrap();
        let mut t = SaeTrainer::new(small_config(30), SaeDictionary::random(16, 8, SeedTree::new(4)));
        for s in 0..30 {
            t.step(&stream.batch(s, 32).unwrap()).unwrap();
            for j in 0..16 {
                assert!((l2_norm(t.dictionary().decoder_row(j)) - 1.0).abs() <= 1e-4);
            }
        }
    }

    /// Finite-difference check of the analytic gradients on a tiny problem.
    #[test]
    fn gradients_match_finite_differences() {
        let mut sae = SaeDictionary::random(5, 4, SeedTree::new(21));
        {
            let (_, _, be, bd) = sae.parts_mut();
            *be = TensorF32::vector(vec![0.05, -0.02, 0.1, 0.0, 0.03]).unwrap();
            *bd = TensorF32::vector(vec![0.01, -0.03, 0.02, 0.04]).unwrap();
        }
        let stream =
            SparseDictionaryStream::new(orthonormal(4, 4, 22), 2, SeedTree::new(23)).unwrap();
        let batch = stream.batch(0, 6).unwrap();
        let cfg = TrainConfig {
            l1_coefficient: 0.01,
            ..small_config(1)
        };
        let trainer = SaeTrainer::new(cfg.clone(), sae.clone());
        let (g, _, _, _) = trainer.gradients(&batch).unwrap();
        let loss = |s: &SaeDictionary| s.loss(&batch, cfg.l1_coefficient).unwrap().total;
        let eps = 1e-3f32;
        let check = |which: usize, idx: usize, analytic: f64| {
            let mut plus = sae.clone();
            let mut minus = sae.clone();
            {
                let p = plus.parts_mut();
                let t = [p.0, p.1, p.2, p.3].into_iter().nth(which).unwrap();
                t.data_mut()[idx] += eps;
            }
            {
                let m = minus.parts_mut();
                let t = [m.0, m.1, m.2, m.3].into_iter().nth(which).unwrap();
                t.data_mut()[idx] -= eps;
            }
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * f64::from(eps));
            assert!(
                (fd - analytic).abs() <= 2e-3 * fd.abs().max(1.0),
                "param {which}[{idx}]: fd {fd} vs analytic {analytic}"
            );
        };
        for idx in 0..20 {
            check(0, idx, g.encoder[idx]);
            check(1, idx, g.decoder[idx]);
        }
        for idx in 0..5 {
            check(2, idx, g.b_enc[idx]);
        }
        for idx in 0..4 {
            check(3, idx, g.b_dec[idx]);
        }
    }

    #[test]
    fn resample_with_no_dead_features_is_noop() {
        let mut sae = SaeDictionary::random(6, 4, SeedTree::new(5));
        let before = sae.clone();
        let batch = TensorF32::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]], 4).unwrap();
        assert!(resample_dead(&mut sae, &[], &batch, SeedTree::new(1)).unwrap().is_empty());
        assert_eq!(sae, before);
    }

    #[test]
    fn resample_with_empty_batch_is_noop() {
        let mut sae = SaeDictionary::random(6, 4, SeedTree::new(5));
        let before = sae.clone();
        let empty = TensorF32::zeros(vec![0, 4]);
        assert!(resample_dead(&mut sae, &[0, 1], &empty, SeedTree::new(1)).unwrap().is_empty());
        assert_eq!(sae, before);
    }

    #[test]
    fn resampling_every_feature_gives_unit_rows_that_fire() {
        // Encoder rows all point away from the data, so every feature is dead.
        let atoms = orthonormal(6, 6, 6);
        let neg: Vec<f32> = atoms.data().iter().map(|v| -v).collect();
        let mut sae = SaeDictionary::from_weights(
            TensorF32::new(vec![6, 6], neg).unwrap(),
            atoms.clone(),
        )
        .unwrap();
        let stream = SparseDictionaryStream::new(atoms, 2, SeedTree::new(7)).unwrap();
        let batch = stream.batch(0, 32).unwrap();
        for i in 0..32 {
            assert!(sae.encode(batch.row(i)).unwrap().iter().all(|&v| v <= 1e-6));
        }
        let dead: Vec<usize> = (0..6).collect();
        let before = sae.clone();
        let sources = resample_dead(&mut sae, &dead, &batch, SeedTree::new(8)).unwrap();
        assert_eq!(sources.len(), 6);
        for (j, &src) in dead.iter().zip(&sources) {
            assert_ne!(sae.encoder_row(*j), before.encoder_row(*j));
            assert!((l2_norm(sae.decoder_row(*j)) - 1.0).abs() <= 1e-4);
            assert!(sae.activation(batch.row(src), *j) > 0.0);
        }
    }

    #[test]
    fn trainer_resumes_bit_identically() {
        let stream =
            SparseDictionaryStream::new(orthonormal(16, 8, 9), 2, SeedTree::new(9)).unwrap();
        let cfg = TrainConfig {
            resample_checkpoints: vec![20, 40],
            dead_window: 10,
            ..small_config(60)
        };
        let (full, hist) = train_sae(&cfg, &stream).unwrap();
        let init = SaeDictionary::random(16, 8, SeedTree::new(cfg.seed).child("init"));
        let mut t = SaeTrainer::new(cfg.clone(), init);
        t.run_until(&stream, 25).unwrap();
        let json = serde_json::to_string(&t.checkpoint()).unwrap();
        let mut resumed = SaeTrainer::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
        resumed.run(&stream).unwrap();
        let (sae, hist2) = resumed.into_parts();
        assert_eq!(sae, full);
        assert_eq!(hist2, hist);
    }

    #[test]
    fn pool_stream_covers_pool_once_per_epoch() {
        let pool = TensorF32::new(vec![10, 1], (0..10).map(|v| v as f32).collect()).unwrap();
        let s = PoolStream::new(pool, SeedTree::new(3)).unwrap();
        let mut seen: Vec<f32> = (0..5).flat_map(|st| s.batch(st, 2).unwrap().into_data()).collect();
        seen.sort_by(f32::total_cmp);
        assert_eq!(seen, (0..10).map(|v| v as f32).collect::<Vec<_>>());
        assert_eq!(s.batch(7, 3).unwrap(), s.batch(7, 3).unwrap());
    }
}

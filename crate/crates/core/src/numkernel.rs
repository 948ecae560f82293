// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense f32 tensors, the handful of kernels the rest of the crate needs,
//! Adam, and seeded random streams.
//!
//! Reductions accumulate in f64 and round once on output, so results do not
//! depend on thread count or summation order beyond the row-major order used
//! here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used by kernel-level comparisons.
pub const REL_TOL: f32 = 1e-5;
/// Absolute tolerance used by kernel-level comparisons.
pub const ABS_TOL: f32 = 1e-6;

/// Row-major dense array of finite f32 values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorF32 {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows. An empty slice gives `0 × cols`.
    pub fn from_rows(rows: &[Vec<f32>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn set2(&mut self, i: usize, j: usize, v: f32) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Self::zeros(vec![c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// Re-checks the finiteness invariant after in-place mutation.
    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

/// Dot product with an f64 accumulator.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    dot64(a, b) as f32
}

pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (x, y)| acc + f64::from(*x) * f64::from(*y))
}

pub fn l2_norm(a: &[f32]) -> f32 {
    dot64(a, a).sqrt() as f32
}

/// `m · v` for `m: [r × c]`, `v: [c]`.
pub fn matvec(m: &TensorF32, v: &[f32]) -> Result<Vec<f32>> {
    let (r, c) = m.dims2()?;
    if v.len() != c {
        return Err(Error::Dimension(format!(
            "matvec: matrix has {c} columns, vector has {}",
            v.len()
        )));
    }
    Ok((0..r).map(|i| dot(m.row(i), v)).collect())
}

/// `mᵀ · v` for `m: [r × c]`, `v: [r]`.
pub fn matvec_t(m: &TensorF32, v: &[f32]) -> Result<Vec<f32>> {
    let (r, c) = m.dims2()?;
    if v.len() != r {
        return Err(Error::Dimension(format!(
            "matvec_t: matrix has {r} rows, vector has {}",
            v.len()
        )));
    }
    let mut acc = vec![0.0f64; c];
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        let vi = f64::from(vi);
        for (a, &x) in acc.iter_mut().zip(m.row(i)) {
            *a += vi * f64::from(x);
        }
    }
    Ok(acc.into_iter().map(|x| x as f32).collect())
}

/// Matrix product `a · b`; each output entry accumulates over the inner
/// index left to right in f64.
pub fn gemm(a: &TensorF32, b: &TensorF32) -> Result<TensorF32> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "gemm: [{m} × {k}] · [{k2} × {n}]"
        )));
    }
    let bt = b.transpose()?;
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            data.push(dot(ar, bt.row(j)));
        }
    }
    TensorF32::new(vec![m, n], data)
}

/// `a · bᵀ`, the shape used by projections `X · Wᵀ`.
pub fn gemm_nt(a: &TensorF32, b: &TensorF32) -> Result<TensorF32> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "gemm_nt: [{m} × {k}] · [{n} × {k2}]ᵀ"
        )));
    }
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            data.push(dot(ar, b.row(j)));
        }
    }
    TensorF32::new(vec![m, n], data)
}

/// Softmax over the first `upto` entries of a logit row; entries at and
/// beyond `upto` come out as zero and are never read.
pub fn softmax_causal_row(logits: &[f32], upto: usize) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax over an empty row".into()));
    }
    if upto == 0 || upto > logits.len() {
        return Err(Error::Domain(format!(
            "softmax upto={upto} outside 1..={}",
            logits.len()
        )));
    }
    let live = &logits[..upto];
    let max = live.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = live
        .iter()
        .map(|&l| (f64::from(l) - f64::from(max)).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    let mut out = vec![0.0f32; logits.len()];
    for (o, e) in out.iter_mut().zip(&exps) {
        *o = (e / total) as f32;
    }
    Ok(out)
}

pub fn relu(x: &TensorF32) -> TensorF32 {
    TensorF32 {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Optimizer state for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: TensorF32,
    pub second_moment: TensorF32,
    pub step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub const DEFAULT_LR: f32 = 0.0012;
    pub const DEFAULT_BETA1: f32 = 0.9;
    pub const DEFAULT_BETA2: f32 = 0.99;
    pub const DEFAULT_EPS: f32 = 1e-8;

    /// Zeroed moments for a parameter of the given shape, default hyperparameters.
    pub fn new(shape: &[usize]) -> Self {
        Self::with_lr(shape, Self::DEFAULT_LR)
    }

    pub fn with_lr(shape: &[usize], lr: f32) -> Self {
        Self {
            first_moment: TensorF32::zeros(shape.to_vec()),
            second_moment: TensorF32::zeros(shape.to_vec()),
            step: 0,
            lr,
            beta1: Self::DEFAULT_BETA1,
            beta2: Self::DEFAULT_BETA2,
            eps: Self::DEFAULT_EPS,
        }
    }

    /// Zeroes both moments for row `i` (used when a feature is resampled).
    pub fn reset_row(&mut self, i: usize) {
        if self.first_moment.rank() == 2 {
            self.first_moment.row_mut(i).fill(0.0);
            self.second_moment.row_mut(i).fill(0.0);
        } else {
            self.first_moment.data[i] = 0.0;
            self.second_moment.data[i] = 0.0;
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut TensorF32, grads: &TensorF32, state: &mut AdamState) -> Result<()> {
    if params.shape != grads.shape || params.shape != state.first_moment.shape {
        return Err(Error::Dimension(format!(
            "adam: params {:?}, grads {:?}, moments {:?}",
            params.shape, grads.shape, state.first_moment.shape
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (f64::from(state.beta1), f64::from(state.beta2));
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = f64::from(state.lr);
    let eps = f64::from(state.eps);
    let m = &mut state.first_moment.data;
    let v = &mut state.second_moment.data;
    for i in 0..params.data.len() {
        let g = f64::from(grads.data[i]);
        let mi = b1 * f64::from(m[i]) + (1.0 - b1) * g;
        let vi = b2 * f64::from(v[i]) + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
        params.data[i] = (f64::from(params.data[i]) - update) as f32;
    }
    params.check_finite("adam parameters")
}

/// Derives independent seeds from a root seed and a label.
///
/// Labels are hashed with FNV-1a and mixed with SplitMix64, so the mapping is
/// stable across platforms and releases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn child(&self, label: &str) -> SeedTree {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        SeedTree {
            root: splitmix64(self.root ^ splitmix64(h)),
        }
    }

    pub fn index(&self, i: u64) -> SeedTree {
        SeedTree {
            root: splitmix64(self.root.wrapping_add(splitmix64(i ^ 0x9e37_79b9_7f4a_7c15))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.root)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded stream for `(seed, stream)`; distinct streams never overlap.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> TensorF32 {
        let mut rng = rng_stream(seed, 0);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        TensorF32::new(vec![rows, cols], data).unwrap()
    }

    fn naive_gemm(a: &TensorF32, b: &TensorF32) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let n = b.cols();
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += f64::from(a.get2(i, p)) * f64::from(b.get2(p, j));
                }
            }
        }
        out
    }

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(TensorF32::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            TensorF32::new(vec![1], vec![f32::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn gemm_identity_and_zero() {
        let m = random_matrix(3, 4, 1);
        assert_eq!(gemm(&TensorF32::identity(3), &m).unwrap(), m);
        let a = TensorF32::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]], 2).unwrap();
        let z = TensorF32::zeros(vec![2, 1]);
        assert_eq!(gemm(&a, &z).unwrap(), TensorF32::zeros(vec![2, 1]));
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let a = random_matrix(5, 7, 2);
        let b = random_matrix(7, 3, 3);
        let c = gemm(&a, &b).unwrap();
        for (got, want) in c.data().iter().zip(naive_gemm(&a, &b)) {
            assert!((f64::from(*got) - want).abs() <= 1e-5 * want.abs().max(1e-6));
        }
    }

    #[test]
    fn gemm_shape_mismatch() {
        let a = random_matrix(2, 3, 4);
        assert!(matches!(gemm(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_causal_row(&[0.0, 0.0, 0.0], 3).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        assert_eq!(softmax_causal_row(&[5.0], 1).unwrap(), vec![1.0]);
        assert!(softmax_causal_row(&[], 1).is_err());
        assert!(softmax_causal_row(&[1.0], 0).is_err());
    }

    #[test]
    fn softmax_large_logits_match_f64_reference() {
        let s = softmax_causal_row(&[1000.0, 1000.1], 2).unwrap();
        // 64-bit reference: 1 / (1 + e^{0.1}) computed on the f32-rounded inputs.
        let d = f64::from(1000.1f32) - f64::from(1000.0f32);
        let p0 = 1.0 / (1.0 + d.exp());
        assert!((f64::from(s[0]) - p0).abs() < 1e-7);
        assert!((f64::from(s[1]) - (1.0 - p0)).abs() < 1e-7);
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_zeroes_masked_positions() {
        let s = softmax_causal_row(&[1.0, 2.0, 50.0, -3.0], 2).unwrap();
        assert_eq!(&s[2..], &[0.0, 0.0]);
        assert!((s[0] + s[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn relu_examples() {
        let x = TensorF32::vector(vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = TensorF32::vector(vec![-3.0, -0.5]).unwrap();
        assert_eq!(relu(&neg).data(), &[0.0, 0.0]);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = TensorF32::vector(vec![0.5, -2.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[2]);
        adam_step(&mut p, &TensorF32::zeros(vec![2]), &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    /// Hand-evaluated Adam recurrence in f64.
    fn adam_oracle(grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.99f64, 1e-8f64);
        let (mut m, mut v, mut p) = (0.0, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = TensorF32::vector(vec![0.0]).unwrap();
        let mut st = AdamState::with_lr(&[1], 0.1);
        adam_step(&mut p, &TensorF32::vector(vec![1.0]).unwrap(), &mut st).unwrap();
        let want = adam_oracle(&[1.0], 0.1);
        assert!((want + 0.1).abs() < 1e-7);
        assert!((f64::from(p.data()[0]) - want).abs() < 1e-6);
    }

    #[test]
    fn adam_opposite_gradients_pull_back() {
        let mut p = TensorF32::vector(vec![0.0]).unwrap();
        let mut st = AdamState::with_lr(&[1], 0.1);
        adam_step(&mut p, &TensorF32::vector(vec![1.0]).unwrap(), &mut st).unwrap();
        let after_one = p.data()[0];
        adam_step(&mut p, &TensorF32::vector(vec![-1.0]).unwrap(), &mut st).unwrap();
        let want = adam_oracle(&[1.0, -1.0], 0.1);
        assert!((f64::from(p.data()[0]) - want).abs() < 1e-6);
        assert!(p.data()[0].abs() < after_one.abs());
        assert_eq!(st.step, 2);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = TensorF32::zeros(vec![2]);
        let mut st = AdamState::new(&[2]);
        assert!(adam_step(&mut p, &TensorF32::zeros(vec![3]), &mut st).is_err());
    }

    #[test]
    fn seed_tree_is_stable_and_distinct() {
        let t = SeedTree::new(7);
        assert_eq!(t.child("a"), SeedTree::new(7).child("a"));
        assert_ne!(t.child("a"), t.child("b"));
        assert_ne!(t.index(0), t.index(1));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in proptest::collection::vec(-20.0f32..20.0, 1..24),
            shift in -50.0f32..50.0,
            cut in 0usize..24,
        ) {
            let upto = 1 + cut % logits.len();
            let a = softmax_causal_row(&logits, upto).unwrap();
            let total: f64 = a.iter().map(|&v| f64::from(v)).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            let shifted: Vec<f32> = logits.iter().map(|l| l + shift).collect();
            let b = softmax_causal_row(&shifted, upto).unwrap();
            for (x, y) in a.iter().zip(&b) {
                // The shift itself is rounded in f32; compare at the stated tolerance.
                prop_assert!((x - y).abs() <= 1e-5);
            }
        }

        #[test]
        fn gemm_agrees_with_oracle(m in 1usize..32, k in 1usize..32, n in 1usize..32, seed in 0u64..1000) {
            let a = random_matrix(m, k, seed);
            let b = random_matrix(k, n, seed + 1);
            let c = gemm(&a, &b).unwrap();
            for (got, want) in c.data().iter().zip(naive_gemm(&a, &b)) {
                prop_assert!((f64::from(*got) - want).abs() <= 1e-5 * want.abs().max(1.0));
            }
        }

        #[test]
        fn relu_idempotent_and_monotone(x in proptest::collection::vec(-10.0f32..10.0, 1..16), d in 0.0f32..5.0) {
            let t = TensorF32::vector(x.clone()).unwrap();
            let r = relu(&t);
            prop_assert_eq!(relu(&r), r.clone());
            let bigger = TensorF32::vector(x.iter().map(|v| v + d).collect()).unwrap();
            for (a, b) in r.data().iter().zip(relu(&bigger).data()) {
                prop_assert!(a <= b);
            }
        }
    }
}

//! Spectral normalisation by power iteration.
//!
//! A weight of any rank is viewed as a `[rows, cols]` matrix with `rows` the
//! leading (output) axis. Power iteration estimates its largest singular value
//! σ̂ = uᵀ W v; the normalised weight is W / σ̂. The left vector `u` persists
//! between calls so that one iteration per training step is usually enough.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Init, Path, Var};
use crate::tensor::Tensor;

/// Lower clamp on σ̂; a zero weight is returned unchanged.
pub const SIGMA_FLOOR: f64 = 1e-12;

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > SIGMA_FLOOR {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `W v` for a row-major `[rows, cols]` matrix.
fn mat_vec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// `Wᵀ u` for a row-major `[rows, cols]` matrix.
fn mat_t_vec(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let ur = u[r];
        for (o, a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += a * ur;
        }
    }
    out
}

/// Persistent power-iteration state: the current left singular vector estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
}

impl SpectralState {
    pub fn random<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> SpectralState {
        let mut u: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        normalize_in_place(&mut u);
        SpectralState { u }
    }
}

/// Runs `iters` power iterations on `w` (`[rows, cols]`), updating `u` in place.
/// Returns the right vector `v` matching the final `u`, and σ̂ = uᵀ W v.
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, u: &mut Vec<f64>, iters: usize) -> (Vec<f64>, f64) {
    if u.len() != rows || normalize_in_place(u) <= SIGMA_FLOOR {
        *u = vec![1.0 / (rows as f64).sqrt(); rows];
    }
    let mut v = mat_t_vec(w, rows, cols, u);
    normalize_in_place(&mut v);
    for _ in 0..iters {
        let mut nu = mat_vec(w, rows, cols, &v);
        if normalize_in_place(&mut nu) <= SIGMA_FLOOR {
            break;
        }
        *u = nu;
        v = mat_t_vec(w, rows, cols, u);
        normalize_in_place(&mut v);
    }
    let wv = mat_vec(w, rows, cols, &v);
    let sigma = u.iter().zip(&wv).map(|(a, b)| a * b).sum();
    (v, sigma)
}

/// Divides `weight` by its power-iteration spectral-norm estimate.
///
/// σ̂ is built from tracked operations on `weight` with `u` and `v` held
/// constant, so gradients flow through the normalisation.
pub fn spectral_normalize(weight: &Tensor, power_iters: usize, state: &mut SpectralState) -> Tensor {
    let rows = weight.dim(0);
    let cols = weight.numel() / rows.max(1);
    let (v, sigma) = power_iteration(weight.data(), rows, cols, &mut state.u, power_iters);
    if sigma.abs() <= SIGMA_FLOOR {
        return weight.scale(1.0 / SIGMA_FLOOR.max(1.0));
    }
    let u_t = Tensor::new(state.u.clone(), &[1, rows]);
    let v_t = Tensor::new(v, &[cols, 1]);
    let sigma_t = u_t.matmul(&weight.reshape(&[rows, cols])).matmul(&v_t).reshape(&[]);
    weight.bdiv(&sigma_t)
}

/// Spectral normalisation attached to one layer's weight, with `u` kept as a buffer.
#[derive(Clone)]
pub struct SpectralNorm {
    u: Var,
    pub power_iters: usize,
}

impl SpectralNorm {
    pub fn new(p: &Path, rows: usize, power_iters: usize) -> SpectralNorm {
        let u = p.buffer("sn_u", &[rows], Init::Normal(1.0));
        SpectralNorm { u, power_iters }
    }

    /// Normalised weight. Training mode advances the stored `u`; evaluation mode
    /// reuses it without further iterations.
    pub fn apply(&self, weight: &Tensor, train: bool) -> Tensor {
        self.apply_with_iters(weight, if train { self.power_iters } else { 0 }, train)
    }

    /// Like [`SpectralNorm::apply`] with an explicit iteration count.
    pub fn apply_with_iters(&self, weight: &Tensor, iters: usize, persist: bool) -> Tensor {
        let mut state = SpectralState { u: self.u.values() };
        let out = spectral_normalize(weight, iters, &mut state);
        if persist {
            self.u.set(state.u);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn svd_max(t: &Tensor) -> f64 {
        let rows = t.dim(0);
        let cols = t.numel() / rows;
        let m = DMatrix::from_row_slice(rows, cols, t.data());
        m.singular_values().max()
    }

    #[test]
    fn scaled_identity_normalizes_to_identity() {
        let mut w = vec![0.0; 16];
        for i in 0..4 {
            w[i * 4 + i] = 3.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = SpectralState::random(4, &mut rng);
        let out = spectral_normalize(&Tensor::new(w, &[4, 4]), 10, &mut st);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(out.data()[i * 4 + j], expect, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn unit_norm_weight_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[5, 5], &mut rng);
        let w = w.scale(1.0 / svd_max(&w));
        let mut st = SpectralState::random(5, &mut rng);
        let out = spectral_normalize(&w, 200, &mut st);
        for (a, b) in out.data().iter().zip(w.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn random_matrix_against_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::randn(&[8, 8], &mut rng);
        let mut st = SpectralState::random(8, &mut rng);
        let out = spectral_normalize(&w, 50, &mut st);
        let s = svd_max(&out);
        assert!((0.95..=1.05).contains(&s), "sigma {s}");
    }

    #[test]
    fn zero_weight_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = SpectralState::random(3, &mut rng);
        let out = spectral_normalize(&Tensor::zeros(&[3, 2, 2, 2]), 5, &mut st);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(out.all_finite());
    }

    #[test]
    fn conv_shaped_weight_uses_leading_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::randn(&[6, 3, 3, 3], &mut rng);
        let mut st = SpectralState::random(6, &mut rng);
        let out = spectral_normalize(&w, 30, &mut st);
        assert_eq!(out.shape(), w.shape());
        let s = svd_max(&out);
        assert!((0.9..=1.1).contains(&s), "sigma {s}");
    }
}

//! Minibatch discrimination.
//!
//! Each sample's features f_i are projected by a learned tensor T into
//! `kernels` rows M_i of width `kernel_dim`. Closeness between samples i and j
//! on kernel b is c_b(i, j) = exp(-‖M_i,b − M_j,b‖₁), and the appended feature
//! is o_b(i) = Σ_{j≠i} c_b(i, j). A batch of one appends zeros.

use super::{Init, Path, Var};
use crate::tensor::Tensor;

#[derive(Clone)]
pub struct MinibatchDiscrimination {
    pub projection: Var,
    pub kernels: usize,
    pub kernel_dim: usize,
}

impl MinibatchDiscrimination {
    pub fn new(p: &Path, in_features: usize, kernels: usize, kernel_dim: usize) -> Self {
        MinibatchDiscrimination {
            projection: p.param("projection", &[in_features, kernels * kernel_dim], Init::Normal(0.1)),
            kernels,
            kernel_dim,
        }
    }

    pub fn out_features(&self, in_features: usize) -> usize {
        in_features + self.kernels
    }

    /// `[batch, F]` to `[batch, F + kernels]`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        minibatch_features(x, &self.projection.tensor(), self.kernels, self.kernel_dim)
    }
}

/// Stateless form of [`MinibatchDiscrimination::forward`].
pub fn minibatch_features(x: &Tensor, projection: &Tensor, kernels: usize, kernel_dim: usize) -> Tensor {
    let n = x.dim(0);
    let m = x.matmul(projection).reshape(&[n, kernels, kernel_dim]);
    let diff = m.unsqueeze(1).bsub(&m.unsqueeze(0));
    let closeness = diff.abs().sum_axes(&[3]).neg().exp();
    let mut off_diag = vec![1.0; n * n];
    for i in 0..n {
        off_diag[i * n + i] = 0.0;
    }
    let mask = Tensor::new(off_diag, &[n, n, 1]);
    let stats = closeness.bmul(&mask).sum_axes(&[1]);
    Tensor::concat(&[x.clone(), stats], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of the closeness sum, independent of the tensor path.
    fn brute_force(x: &[Vec<f64>], t: &[f64], kernels: usize, kdim: usize) -> Vec<Vec<f64>> {
        let f = x[0].len();
        let m: Vec<Vec<f64>> = x
            .iter()
            .map(|row| {
                (0..kernels * kdim)
                    .map(|col| (0..f).map(|a| row[a] * t[a * kernels * kdim + col]).sum())
                    .collect()
            })
            .collect();
        (0..x.len())
            .map(|i| {
                (0..kernels)
                    .map(|b| {
                        (0..x.len())
                            .filter(|&j| j != i)
                            .map(|j| {
                                let l1: f64 = (0..kdim)
                                    .map(|d| (m[i][b * kdim + d] - m[j][b * kdim + d]).abs())
                                    .sum();
                                (-l1).exp()
                            })
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    fn run(rows: &[Vec<f64>], t: &Tensor, kernels: usize, kdim: usize) -> Vec<Vec<f64>> {
        let f = rows[0].len();
        let x = Tensor::new(rows.concat(), &[rows.len(), f]);
        let out = minibatch_features(&x, t, kernels, kdim);
        out.data().chunks(f + kernels).map(|r| r[f..].to_vec()).collect()
    }

    #[test]
    fn matches_brute_force_and_duplicates_raise_closeness() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::randn(&[3, 2 * 4], &mut rng);
        let rows = vec![
            vec![0.3, -1.2, 0.5],
            vec![1.0, 0.1, -0.4],
            vec![0.3, -1.2, 0.5],
            vec![-0.7, 0.9, 1.3],
        ];
        let got = run(&rows, &t, 2, 4);
        let expect = brute_force(&rows, t.data(), 2, 4);
        for (g, e) in got.iter().flatten().zip(expect.iter().flatten()) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-12);
        }
        // rows 0 and 2 are duplicates: each sees a closeness of exactly 1 from the other
        for b in 0..2 {
            assert_abs_diff_eq!(got[0][b], got[2][b], epsilon = 1e-12);
            assert!(got[0][b] > got[1][b] && got[0][b] > got[3][b]);
            assert!(got[0][b] >= 1.0);
        }
    }

    #[test]
    fn identical_rows_get_equal_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = Tensor::randn(&[2, 3], &mut rng);
        let got = run(&[vec![0.2, 0.4], vec![0.2, 0.4]], &t, 3, 1);
        assert_eq!(got[0], got[1]);
        assert!(got[0].iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn single_sample_appends_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::randn(&[2, 6], &mut rng);
        let got = run(&[vec![0.9, -0.1]], &t, 3, 2);
        assert_eq!(got[0], vec![0.0; 3]);
    }
}

//! Exact t-SNE for a few hundred points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::TsneConfig;
use crate::{Error, Result};

const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const LEARNING_RATE: f64 = 200.0;

fn squared_distances(x: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = (0..dim).map(|k| (x[i * dim + k] - x[j * dim + k]).powi(2)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Row-conditional Gaussian affinities with the bandwidth found by bisection on the perplexity.
fn conditional_affinities(d: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let row = &d[i * n..(i + 1) * n];
        let min_d = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j != i {
                    let w = (-(row[j] - min_d) * beta).exp();
                    sum += w;
                    weighted += w * (row[j] - min_d);
                }
            }
            let h = sum.ln() + beta * weighted / sum;
            if (h - target).abs() < 1e-5 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                let w = (-(row[j] - min_d) * beta).exp();
                p[i * n + j] = w;
                sum += w;
            }
        }
        for j in 0..n {
            p[i * n + j] /= sum;
        }
    }
    p
}

/// Embeds `n` rows of width `dim` into the plane.
pub fn tsne(x: &[f64], dim: usize, config: &TsneConfig, seed: u64) -> Result<Vec<[f64; 2]>> {
    if dim == 0 || !x.len().is_multiple_of(dim) {
        return Err(Error::Validation(format!("{} values do not form rows of width {dim}", x.len())));
    }
    let n = x.len() / dim;
    if n < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: n });
    }
    let perplexity = config.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let cond = conditional_affinities(&squared_distances(x, n, dim), n, perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<f64> = (0..2 * n).map(|_| init.sample(&mut rng)).collect();
    let mut velocity = vec![0.0; 2 * n];
    let mut gains = vec![1.0; 2 * n];
    let mut q = vec![0.0; n * n];
    for iter in 0..config.iterations {
        let exaggeration = if iter < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if iter < EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        let mut qsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = w;
                q[j * n + i] = w;
                qsum += 2.0 * w;
            }
        }
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let coeff = 4.0 * (exaggeration * p[i * n + j] - (w / qsum).max(1e-12)) * w;
                gx += coeff * (y[2 * i] - y[2 * j]);
                gy += coeff * (y[2 * i + 1] - y[2 * j + 1]);
            }
            for (k, g) in [(2 * i, gx), (2 * i + 1, gy)] {
                gains[k] = if (g > 0.0) != (velocity[k] > 0.0) { gains[k] + 0.2 } else { (gains[k] * 0.8f64).max(0.01) };
                velocity[k] = momentum * velocity[k] - LEARNING_RATE * gains[k] * g;
            }
        }
        for k in 0..2 * n {
            y[k] += velocity[k];
        }
        let (mx, my) = (0..n).fold((0.0, 0.0), |(a, b), i| (a + y[2 * i], b + y[2 * i + 1]));
        for i in 0..n {
            y[2 * i] -= mx / n as f64;
            y[2 * i + 1] -= my / n as f64;
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("t-SNE embedding diverged".into()));
    }
    Ok(y.chunks(2).map(|c| [c[0], c[1]]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_clusters_stay_separated() {
        let mut x = Vec::new();
        for c in 0..2 {
            for i in 0..15 {
                let base = if c == 0 { 0.0 } else { 20.0 };
                x.extend([base + (i % 5) as f64 * 0.1, base + (i / 5) as f64 * 0.1, base]);
            }
        }
        let cfg = TsneConfig { perplexity: 5.0, iterations: 400, max_points: 100 };
        let y = tsne(&x, 3, &cfg, 1).unwrap();
        let centre = |r: std::ops::Range<usize>| {
            let n = r.len() as f64;
            r.fold([0.0, 0.0], |a, i| [a[0] + y[i][0] / n, a[1] + y[i][1] / n])
        };
        let (a, b) = (centre(0..15), centre(15..30));
        let dist = |p: [f64; 2], c: [f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        for i in 0..30 {
            let (own, other) = if i < 15 { (a, b) } else { (b, a) };
            assert!(dist(y[i], own) < dist(y[i], other), "point {i} sits nearer the other cluster");
        }
        assert_eq!(tsne(&x, 3, &cfg, 1).unwrap(), y);
    }

    #[test]
    fn affinity_rows_hit_the_perplexity() {
        let x: Vec<f64> = (0..40).map(|i| ((i * 7919) % 97) as f64 / 10.0).collect();
        let n = 20;
        let p = conditional_affinities(&squared_distances(&x, n, 2), n, 5.0);
        for i in 0..n {
            let row = &p[i * n..(i + 1) * n];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let h: f64 = -row.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
            assert!((h.exp() - 5.0).abs() < 0.05, "row {i}: perplexity {}", h.exp());
        }
    }
}

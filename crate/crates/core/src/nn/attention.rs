//! Self-attention over spatial positions of a feature map.
//!
//! For input features x with N = H·W positions, queries q = W_q x and keys
//! k = W_k x (both 1×1 convolutions) give logits s_ji = q(x_i)ᵀ k(x_j); each row
//! j of the attention map is softmax_i(s_ji). The attended value is
//! o_j = Σ_i α_ji v(x_i) with v = W_v x, and the layer returns γ·o + x with a
//! learned γ that starts at zero.

use super::{Init, Path, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Key/query channel reduction relative to the input width.
pub const QK_REDUCTION: usize = 8;

/// Result of one attention pass on `[B, C, H, W]` features.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// γ·o + x, same shape as the input.
    pub output: Tensor,
    /// `[B, N, N]`; row j holds the weights α_j· over source positions.
    pub attention: Tensor,
    /// o before the residual combination, `[B, C, H, W]`.
    pub attended: Tensor,
}

/// Borrowed attention parameters: `w_q`, `w_k` are `[C', C]`, `w_v` is `[C, C]`, `gamma` is a scalar.
pub struct AttentionParams<'a> {
    pub w_q: &'a Tensor,
    pub w_k: &'a Tensor,
    pub w_v: &'a Tensor,
    pub gamma: &'a Tensor,
}

fn project(w: &Tensor, x: &Tensor) -> Tensor {
    let b = x.dim(0);
    w.broadcast_as(&[b, w.dim(0), w.dim(1)]).matmul(x)
}

/// Attention over `[B, C, H, W]` features.
pub fn attention_forward(features: &Tensor, params: &AttentionParams<'_>) -> Result<AttentionOutput> {
    if features.rank() != 4 {
        return Err(Error::Validation(format!(
            "attention expects [B, C, H, W], got {:?}",
            features.shape()
        )));
    }
    let (b, c, h, w) = (features.dim(0), features.dim(1), features.dim(2), features.dim(3));
    let n = h * w;
    if n == 0 {
        return Err(Error::Validation("attention over an empty feature map".into()));
    }
    let qk = params.w_q.dim(0);
    if params.w_q.shape() != [qk, c] || params.w_k.shape() != [qk, c] || params.w_v.shape() != [c, c] {
        return Err(Error::Validation(format!(
            "attention weights {:?}/{:?}/{:?} do not fit {c} channels",
            params.w_q.shape(),
            params.w_k.shape(),
            params.w_v.shape()
        )));
    }
    let x = features.reshape(&[b, c, n]);
    let q = project(params.w_q, &x);
    let k = project(params.w_k, &x);
    let v = project(params.w_v, &x);
    // logits[b, j, i] = k_j · q_i
    let logits = k.matmul_t(&q, true, false);
    let attention = logits.softmax(2);
    let attended = v.matmul_t(&attention, false, true).reshape(&[b, c, h, w]);
    let output = attended.bmul(params.gamma).add(features);
    Ok(AttentionOutput { output, attention, attended })
}

/// Self-attention layer owning its parameters.
#[derive(Clone)]
pub struct SelfAttention {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub gamma: Var,
}

impl SelfAttention {
    pub fn new(p: &Path, channels: usize) -> SelfAttention {
        let qk = (channels / QK_REDUCTION).max(1);
        SelfAttention {
            w_q: p.param("w_q", &[qk, channels], Init::FanInUniform(channels)),
            w_k: p.param("w_k", &[qk, channels], Init::FanInUniform(channels)),
            w_v: p.param("w_v", &[channels, channels], Init::FanInUniform(channels)),
            gamma: p.param("gamma", &[], Init::Const(0.0)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<AttentionOutput> {
        let (q, k, v, g) = (self.w_q.tensor(), self.w_k.tensor(), self.w_v.tensor(), self.gamma.tensor());
        attention_forward(x, &AttentionParams { w_q: &q, w_k: &k, w_v: &v, gamma: &g })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_position_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[1, 3, 1, 1], &mut rng);
        let (q, k, v) = (Tensor::randn(&[1, 3], &mut rng), Tensor::randn(&[1, 3], &mut rng), Tensor::randn(&[3, 3], &mut rng));
        let g = Tensor::scalar(0.5);
        let out = attention_forward(&x, &AttentionParams { w_q: &q, w_k: &k, w_v: &v, gamma: &g }).unwrap();
        assert_eq!(out.attention.to_vec(), vec![1.0]);
        let vx = v.matmul(&x.reshape(&[3, 1]));
        for (a, b) in out.attended.data().iter().zip(vx.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 4, 3, 2], &mut rng);
        let z = Tensor::zeros(&[1, 4]);
        let v = Tensor::randn(&[4, 4], &mut rng);
        let g = Tensor::scalar(1.0);
        let out = attention_forward(&x, &AttentionParams { w_q: &z, w_k: &z, w_v: &v, gamma: &g }).unwrap();
        assert!(out.attention.data().iter().all(|&a| (a - 1.0 / 6.0).abs() < 1e-12));
        let vx = v.broadcast_as(&[2, 4, 4]).matmul(&x.reshape(&[2, 4, 6]));
        let mean = vx.mean_keepdim(&[2]);
        for b in 0..2 {
            for c in 0..4 {
                for j in 0..6 {
                    assert_abs_diff_eq!(
                        out.attended.data()[(b * 4 + c) * 6 + j],
                        mean.data()[b * 4 + c],
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn output_keeps_shape_and_starts_as_identity() {
        let store = crate::nn::ParamStore::new(3);
        let layer = SelfAttention::new(&store.root(), 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 16, 4, 4], &mut rng);
        let out = layer.forward(&x).unwrap();
        assert_eq!(out.output.shape(), x.shape());
        assert_eq!(out.attention.shape(), &[2, 16, 16]);
        assert_eq!(out.output.to_vec(), x.to_vec());
        for row in out.attention.data().chunks(16) {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_mismatched_weights() {
        let x = Tensor::zeros(&[1, 4, 2, 2]);
        let bad = Tensor::zeros(&[1, 3]);
        let v = Tensor::zeros(&[4, 4]);
        let g = Tensor::scalar(0.0);
        assert!(attention_forward(&x, &AttentionParams { w_q: &bad, w_k: &bad, w_v: &v, gamma: &g }).is_err());
    }
}

use rand::Rng;

use super::{Init, Path, Var};
use crate::tensor::{no_grad, Tensor};
use crate::{Error, Result};

/// Fully connected layer, `y = x Wᵀ + b` on `[batch, in]` input.
#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(p: &Path, in_dim: usize, out_dim: usize, bias: bool) -> Linear {
        Linear {
            weight: p.param("weight", &[out_dim, in_dim], Init::FanInUniform(in_dim)),
            bias: bias.then(|| p.param("bias", &[out_dim], Init::FanInUniform(in_dim))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_with_weight(x, &self.weight.tensor())
    }

    /// Uses `weight` in place of the stored one (spectral normalisation).
    pub fn forward_with_weight(&self, x: &Tensor, weight: &Tensor) -> Tensor {
        let y = x.matmul_t(weight, false, true);
        match &self.bias {
            Some(b) => y.badd(&b.tensor()),
            None => y,
        }
    }
}

/// Square-kernel 2-D convolution.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        p: &Path,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Conv2d {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: p.param("weight", &[out_ch, in_ch, kernel, kernel], Init::FanInUniform(fan_in)),
            bias: bias.then(|| p.param("bias", &[out_ch], Init::FanInUniform(fan_in))),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_with_weight(x, &self.weight.tensor())
    }

    pub fn forward_with_weight(&self, x: &Tensor, weight: &Tensor) -> Tensor {
        let y = x.conv2d(weight, self.stride, self.padding);
        match &self.bias {
            Some(b) => y.badd(&b.tensor().reshape(&[1, weight.dim(0), 1, 1])),
            None => y,
        }
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Shape `[1, C, 1, ...]` matching `x`'s rank, for per-channel broadcasting.
fn channel_shape(x: &Tensor) -> Vec<usize> {
    let mut s = vec![1; x.rank()];
    s[1] = x.dim(1);
    s
}

fn reduce_axes(x: &Tensor) -> Vec<usize> {
    (0..x.rank()).filter(|&a| a != 1).collect()
}

/// Normalises `x` per channel (axis 1) with batch statistics in training mode
/// and running statistics otherwise. Running statistics are updated in place.
fn normalize(x: &Tensor, running_mean: &Var, running_var: &Var, train: bool) -> Tensor {
    let cs = channel_shape(x);
    if train {
        let axes = reduce_axes(x);
        let mean = x.mean_keepdim(&axes);
        let centered = x.bsub(&mean);
        let var = centered.sqr().mean_keepdim(&axes);
        let count: usize = axes.iter().map(|&a| x.dim(a)).product();
        no_grad(|| {
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let rm: Vec<f64> = running_mean
                .values()
                .iter()
                .zip(mean.data())
                .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                .collect();
            let rv: Vec<f64> = running_var
                .values()
                .iter()
                .zip(var.data())
                .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias)
                .collect();
            running_mean.set(rm);
            running_var.set(rv);
        });
        centered.bdiv(&var.add_scalar(BN_EPS).sqrt())
    } else {
        let mean = running_mean.tensor().reshape(&cs);
        let std = running_var.tensor().reshape(&cs).add_scalar(BN_EPS).sqrt();
        x.bsub(&mean).bdiv(&std)
    }
}

/// Batch normalisation over every axis except the channel axis (1).
#[derive(Clone)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    pub fn new(p: &Path, channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: p.param("gamma", &[channels], Init::Const(1.0)),
            beta: p.param("beta", &[channels], Init::Const(0.0)),
            running_mean: p.buffer("running_mean", &[channels], Init::Const(0.0)),
            running_var: p.buffer("running_var", &[channels], Init::Const(1.0)),
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let cs = channel_shape(x);
        normalize(x, &self.running_mean, &self.running_var, train)
            .bmul(&self.gamma.tensor().reshape(&cs))
            .badd(&self.beta.tensor().reshape(&cs))
    }
}

/// Batch normalisation whose affine gain and bias are looked up per class label.
#[derive(Clone)]
pub struct ConditionalBatchNorm {
    pub gamma: Var,
    pub beta: Var,
    classes: usize,
    running_mean: Var,
    running_var: Var,
}

impl ConditionalBatchNorm {
    pub fn new(p: &Path, channels: usize, classes: usize) -> ConditionalBatchNorm {
        ConditionalBatchNorm {
            gamma: p.param("gamma", &[classes, channels], Init::Const(1.0)),
            beta: p.param("beta", &[classes, channels], Init::Const(0.0)),
            classes,
            running_mean: p.buffer("running_mean", &[channels], Init::Const(0.0)),
            running_var: p.buffer("running_var", &[channels], Init::Const(1.0)),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `labels[b]` selects the affine parameters for batch item `b`.
    pub fn forward(&self, x: &Tensor, labels: &[usize], train: bool) -> Result<Tensor> {
        if labels.len() != x.dim(0) {
            return Err(Error::Validation(format!(
                "{} labels for a batch of {}",
                labels.len(),
                x.dim(0)
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        let mut shape = vec![x.dim(0), x.dim(1)];
        shape.resize(x.rank(), 1);
        let onehot = Tensor::one_hot(labels, self.classes);
        let gain = onehot.matmul(&self.gamma.tensor()).reshape(&shape);
        let bias = onehot.matmul(&self.beta.tensor()).reshape(&shape);
        Ok(normalize(x, &self.running_mean, &self.running_var, train).bmul(&gain).badd(&bias))
    }
}

/// Inverted dropout: zeroes entries with probability `rate`, rescales the rest.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f64, rng: &mut R) -> Tensor {
    if rate <= 0.0 {
        return x.clone();
    }
    if rate >= 1.0 {
        return x.scale(0.0);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> =
        (0..x.numel()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    x.mul(&Tensor::new(mask, x.shape()))
}

/// `[out, in]` bilinear resampling matrix (half-pixel centres, edge clamped).
fn bilinear_matrix(input: usize, output: usize) -> Tensor {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let w1 = src - i0 as f64;
        m[o * input + i0] += 1.0 - w1;
        m[o * input + i1] += w1;
    }
    Tensor::new(m, &[output, input])
}

/// Bilinear 2x upsampling of `[B, C, H, W]`.
pub fn upsample_bilinear2x(x: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let uw = bilinear_matrix(w, 2 * w).t();
    let uh = bilinear_matrix(h, 2 * h).t();
    x.reshape(&[b * c * h, w])
        .matmul(&uw)
        .reshape(&[b * c, h, 2 * w])
        .permute(&[0, 2, 1])
        .reshape(&[b * c * 2 * w, h])
        .matmul(&uh)
        .reshape(&[b * c, 2 * w, 2 * h])
        .permute(&[0, 2, 1])
        .reshape(&[b, c, 2 * h, 2 * w])
}

/// 2x2 area averaging of `[B, C, H, W]` with even `H` and `W`.
pub fn avg_pool2x(x: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even spatial dims, got {h}x{w}");
    x.reshape(&[b, c, h / 2, 2, w / 2, 2])
        .sum_axes(&[3, 5])
        .scale(0.25)
}

/// Mean over the spatial axes: `[B, C, H, W]` to `[B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    x.mean_axes(&[2, 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cbn_identity_affine_equals_plain_batchnorm() {
        let store = ParamStore::new(0);
        let cbn = ConditionalBatchNorm::new(&store.root().push("cbn"), 3, 4);
        let bn = BatchNorm::new(&store.root().push("bn"), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[5, 3, 2, 2], &mut rng);
        let a = cbn.forward(&x, &[0, 1, 2, 3, 0], true).unwrap();
        let b = bn.forward(&x, true);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-12);
        }
    }

    #[test]
    fn cbn_constant_input_gives_class_bias() {
        let store = ParamStore::new(0);
        let cbn = ConditionalBatchNorm::new(&store.root(), 2, 3);
        cbn.beta.set(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let x = Tensor::full(&[2, 2, 3, 3], 7.0);
        let y = cbn.forward(&x, &[2, 0], true).unwrap();
        let d = y.data();
        assert!(d[..9].iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(d[9..18].iter().all(|&v| (v - 0.6).abs() < 1e-12));
        assert!(d[18..27].iter().all(|&v| (v - 0.1).abs() < 1e-12));
        assert!(d[27..].iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn cbn_labels_change_output() {
        let store = ParamStore::new(0);
        let cbn = ConditionalBatchNorm::new(&store.root(), 1, 2);
        cbn.gamma.set(vec![1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 1, 2, 2], &mut rng);
        let a = cbn.forward(&x, &[0, 0], true).unwrap();
        let b = cbn.forward(&x, &[1, 1], true).unwrap();
        assert_ne!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn cbn_rejects_unknown_label() {
        let store = ParamStore::new(0);
        let cbn = ConditionalBatchNorm::new(&store.root(), 1, 2);
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(cbn.forward(&x, &[2], true), Err(Error::Validation(_))));
    }

    #[test]
    fn upsample_preserves_constants_and_pool_inverts_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Tensor::full(&[1, 2, 3, 4], 0.25);
        assert!(upsample_bilinear2x(&c).data().iter().all(|v| (v - 0.25).abs() < 1e-12));
        let x = Tensor::randn(&[2, 1, 4, 4], &mut rng);
        let up = upsample_bilinear2x(&x);
        assert_eq!(up.shape(), &[2, 1, 8, 8]);
        // away from the border, pooling the upsampled image applies the kernel [1/8, 3/4, 1/8] per axis
        let back = avg_pool2x(&up);
        let (xd, bd) = (x.data(), back.data());
        let k = [0.125, 0.75, 0.125];
        for i in 1..3 {
            for j in 1..3 {
                let mut expect = 0.0;
                for (di, ki) in k.iter().enumerate() {
                    for (dj, kj) in k.iter().enumerate() {
                        expect += ki * kj * xd[(i + di - 1) * 4 + (j + dj - 1)];
                    }
                }
                assert_abs_diff_eq!(bd[i * 4 + j], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 3], &mut rng);
        assert_eq!(dropout(&x, 0.0, &mut rng).to_vec(), x.to_vec());
        let y = dropout(&x, 0.5, &mut rng);
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| *a == 0.0 || (a - 2.0 * b).abs() < 1e-12));
    }
}

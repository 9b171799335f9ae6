use std::collections::{HashMap, HashSet};

use super::{no_grad, Op, Tensor};

/// Gradients keyed by the leaf tensors they belong to.
#[derive(Default)]
pub struct GradStore(HashMap<usize, Tensor>);

impl GradStore {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.0.get(&t.id())
    }

    pub fn remove(&mut self, t: &Tensor) -> Option<Tensor> {
        self.0.remove(&t.id())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Post-order over tracked nodes reachable from `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !t.is_tracked() || !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = t.op() {
            for input in op.inputs() {
                if input.is_tracked() && !seen.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

pub(super) fn backward(root: &Tensor, create_graph: bool) -> GradStore {
    assert_eq!(root.numel(), 1, "backward needs a scalar, got shape {:?}", root.shape());
    if create_graph {
        run(root)
    } else {
        no_grad(|| run(root))
    }
}

fn accumulate(grads: &mut HashMap<usize, Tensor>, t: &Tensor, g: impl FnOnce() -> Tensor) {
    if !t.is_tracked() {
        return;
    }
    let g = g();
    debug_assert_eq!(t.shape(), g.shape(), "gradient shape mismatch");
    match grads.remove(&t.id()) {
        Some(prev) => {
            grads.insert(t.id(), prev.add(&g));
        }
        None => {
            grads.insert(t.id(), g);
        }
    }
}

fn run(root: &Tensor) -> GradStore {
    let order = topo_order(root);
    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    let mut leaves = HashMap::new();
    if !root.is_tracked() {
        return GradStore::default();
    }
    grads.insert(root.id(), Tensor::ones(root.shape()));
    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        let Some(op) = node.op() else {
            leaves.insert(node.id(), g);
            continue;
        };
        match op {
            Op::Add(a, b) => {
                accumulate(&mut grads, a, || g.clone());
                accumulate(&mut grads, b, || g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads, a, || g.clone());
                accumulate(&mut grads, b, || g.neg());
            }
            Op::Mul(a, b) => {
                accumulate(&mut grads, a, || g.mul(b));
                accumulate(&mut grads, b, || g.mul(a));
            }
            Op::Div(a, b) => {
                accumulate(&mut grads, a, || g.div(b));
                accumulate(&mut grads, b, || g.mul(node).div(b).neg());
            }
            Op::Scale(a, s) => accumulate(&mut grads, a, || g.scale(*s)),
            Op::Exp(a) => accumulate(&mut grads, a, || g.mul(node)),
            Op::Log(a) => accumulate(&mut grads, a, || g.div(a)),
            Op::Sqrt(a) => accumulate(&mut grads, a, || g.div(&node.scale(2.0))),
            Op::Tanh(a) => {
                let d = node.sqr().neg().add_scalar(1.0);
                accumulate(&mut grads, a, || g.mul(&d));
            }
            Op::Softmax(a, axis) => {
                // y ⊙ (g − Σ_axis g ⊙ y)
                let gy = g.mul(node);
                accumulate(&mut grads, a, || gy.sub(&node.bmul(&gy.sum_keepdim(&[*axis]))));
            }
            Op::Abs(a) => {
                let sign = a.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                accumulate(&mut grads, a, || g.mul(&sign));
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let mask = a.map(|v| if v > 0.0 { 1.0 } else { s });
                accumulate(&mut grads, a, || g.mul(&mask));
            }
            Op::Matmul(a, b, ta, tb) => {
                let (ta, tb) = (*ta, *tb);
                accumulate(&mut grads, a, || if ta { b.matmul_t(&g, tb, true) } else { g.matmul_t(b, false, !tb) });
                accumulate(&mut grads, b, || if tb { g.matmul_t(a, true, ta) } else { a.matmul_t(&g, !ta, false) });
            }
            Op::Sum(a) => accumulate(&mut grads, a, || g.broadcast_as(a.shape())),
            Op::Broadcast(a) => {
                let axes: Vec<usize> = (0..a.rank())
                    .filter(|&ax| a.dim(ax) == 1 && node.dim(ax) != 1)
                    .collect();
                accumulate(&mut grads, a, || g.sum_keepdim(&axes));
            }
            Op::Reshape(a) => accumulate(&mut grads, a, || g.reshape(a.shape())),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(&mut grads, a, || g.permute(&inv));
            }
            Op::Im2col(a, geom) => accumulate(&mut grads, a, || g.col2im(*geom)),
            Op::Col2im(a, geom) => accumulate(&mut grads, a, || g.im2col(*geom)),
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let len = p.dim(*axis);
                    if p.is_tracked() {
                        accumulate(&mut grads, p, || g.narrow(*axis, offset, len));
                    }
                    offset += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                let after = a.dim(*axis) - start - node.dim(*axis);
                accumulate(&mut grads, a, || g.pad(*axis, *start, after));
            }
            Op::Pad(a, axis, before) => {
                accumulate(&mut grads, a, || g.narrow(*axis, *before, a.dim(*axis)));
            }
        }
    }
    GradStore(leaves)
}

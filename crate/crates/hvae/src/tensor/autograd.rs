//! Graph linearization and the backward rules for every primitive.

use std::cell::RefMut;
use std::collections::HashSet;

use super::ops::{
    conv2d_dw_kernel, conv2d_kernel, flip_transpose_kernel, matmul_da_kernel, matmul_db_kernel,
    sigmoid,
};
use super::{numel, Op, Result, Tensor};

impl Tensor {
    /// Gradient buffer, zero-initialized on first touch.
    pub(crate) fn grad_mut(&self) -> RefMut<'_, Vec<f64>> {
        let mut slot = self.inner.grad.borrow_mut();
        if slot.is_none() {
            *slot = Some(vec![0.0; self.len()]);
        }
        RefMut::map(slot, |o| o.as_mut().expect("grad initialized above"))
    }
}

/// Topologically ordered list of the recorded operations reachable from
/// one root tensor (leaves first). Backward walks it in reverse exactly
/// once, so every fan-out contributes additively and no node is visited
/// twice.
pub struct Graph {
    order: Vec<Tensor>,
}

impl Graph {
    /// Linearize the DAG of gradient-requiring ancestors of `root`.
    pub fn trace(root: &Tensor) -> Graph {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = Vec::new();
        visited.insert(root.id());
        stack.push((root.clone(), 0));
        while let Some((node, child)) = stack.last().cloned() {
            if child < node.parents().len() {
                stack.last_mut().expect("stack nonempty").1 += 1;
                let parent = node.parents()[child].clone();
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                stack.pop();
                order.push(node);
            }
        }
        Graph { order }
    }

    /// Number of recorded nodes (including gradient-requiring leaves).
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Seed d(root)/d(root) = 1 and sweep the tape in reverse
    /// topological order.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        root.seed_grad_ones();
        for node in self.order.iter().rev() {
            if matches!(node.op(), Op::Leaf) {
                continue;
            }
            let grad = node.grad();
            let Some(grad) = grad else { continue };
            propagate(node, &grad);
        }
        Ok(())
    }
}

fn propagate(node: &Tensor, g: &[f64]) {
    let parents = node.parents();
    match node.op() {
        Op::Leaf => {}
        Op::Add => {
            for p in parents {
                if p.requires_grad() {
                    p.accumulate_grad(g);
                }
            }
        }
        Op::Sub => {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                let mut gb = b.grad_mut();
                for (o, &gi) in gb.iter_mut().zip(g) {
                    *o -= gi;
                }
            }
        }
        Op::Mul => {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad() {
                let bd = b.data();
                let mut ga = a.grad_mut();
                for ((o, &gi), &bv) in ga.iter_mut().zip(g).zip(bd.iter()) {
                    *o += gi * bv;
                }
            }
            if b.requires_grad() {
                let ad = a.data();
                let mut gb = b.grad_mut();
                for ((o, &gi), &av) in gb.iter_mut().zip(g).zip(ad.iter()) {
                    *o += gi * av;
                }
            }
        }
        Op::MatMul => {
            let (a, b) = (&parents[0], &parents[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                let bd = b.data();
                let mut ga = a.grad_mut();
                matmul_da_kernel(g, &bd, m, k, n, &mut ga);
            }
            if b.requires_grad() {
                let ad = a.data();
                let mut gb = b.grad_mut();
                matmul_db_kernel(&ad, g, m, k, n, &mut gb);
            }
        }
        Op::Conv2d => {
            let (x, w) = (&parents[0], &parents[1]);
            let xs = x.shape();
            let ws = w.shape();
            let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
            if x.requires_grad() {
                let wd_ = w.data();
                let flipped = flip_transpose_kernel(&wd_, cout, cin, kh, kw);
                drop(wd_);
                let mut gx = x.grad_mut();
                conv2d_kernel(g, bsz, cout, h, wd, &flipped, cin, kh, kw, &mut gx);
            }
            if w.requires_grad() {
                let xd = x.data();
                let mut gw = w.grad_mut();
                conv2d_dw_kernel(&xd, g, bsz, cin, h, wd, cout, kh, kw, &mut gw);
            }
        }
        Op::BiasChannel => {
            let (x, b) = (&parents[0], &parents[1]);
            if x.requires_grad() {
                x.accumulate_grad(g);
            }
            if b.requires_grad() {
                let c = x.shape()[1];
                let inner = numel(&x.shape()[2..]);
                let mut gb = b.grad_mut();
                for chunk in g.chunks(c * inner) {
                    for (ci, plane) in chunk.chunks(inner).enumerate() {
                        gb[ci] += plane.iter().sum::<f64>();
                    }
                }
            }
        }
        Op::BiasPerExample => {
            let (x, e) = (&parents[0], &parents[1]);
            if x.requires_grad() {
                x.accumulate_grad(g);
            }
            if e.requires_grad() {
                let inner = numel(&x.shape()[2..]);
                let mut ge = e.grad_mut();
                for (o, plane) in ge.iter_mut().zip(g.chunks(inner)) {
                    *o += plane.iter().sum::<f64>();
                }
            }
        }
        Op::BroadcastBatch => {
            let src = &parents[0];
            if src.requires_grad() {
                let n = src.len();
                let mut gs = src.grad_mut();
                for chunk in g.chunks(n) {
                    for (o, &gi) in gs.iter_mut().zip(chunk) {
                        *o += gi;
                    }
                }
            }
        }
        Op::Exp => unary(node, g, |_, out| out),
        Op::Log => unary_in(node, g, |x| 1.0 / x),
        Op::Square => unary_in(node, g, |x| 2.0 * x),
        Op::Softplus => unary_in(node, g, sigmoid),
        Op::Silu => unary_in(node, g, |x| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }),
        Op::Sigmoid => unary(node, g, |_, out| out * (1.0 - out)),
        Op::Tanh => unary(node, g, |_, out| 1.0 - out * out),
        Op::Scale(c) => {
            let c = *c;
            unary_in(node, g, move |_| c)
        }
        Op::AddScalar(_) => unary_in(node, g, |_| 1.0),
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            unary_in(node, g, move |x| if x >= lo && x <= hi { 1.0 } else { 0.0 })
        }
        Op::Maximum => {
            let (a, b) = (&parents[0], &parents[1]);
            let mask: Vec<bool> = {
                let ad = a.data();
                let bd = b.data();
                ad.iter().zip(bd.iter()).map(|(&x, &y)| x >= y).collect()
            };
            if a.requires_grad() {
                let mut ga = a.grad_mut();
                for ((o, &gi), &m) in ga.iter_mut().zip(g).zip(mask.iter()) {
                    if m {
                        *o += gi;
                    }
                }
            }
            if b.requires_grad() {
                let mut gb = b.grad_mut();
                for ((o, &gi), &m) in gb.iter_mut().zip(g).zip(mask.iter()) {
                    if !m {
                        *o += gi;
                    }
                }
            }
        }
        Op::SumAll => {
            let x = &parents[0];
            if x.requires_grad() {
                let gv = g[0];
                let mut gx = x.grad_mut();
                for o in gx.iter_mut() {
                    *o += gv;
                }
            }
        }
        Op::MeanAll => {
            let x = &parents[0];
            if x.requires_grad() {
                let gv = g[0] / x.len() as f64;
                let mut gx = x.grad_mut();
                for o in gx.iter_mut() {
                    *o += gv;
                }
            }
        }
        Op::SumPerExample => {
            let x = &parents[0];
            if x.requires_grad() {
                let inner = numel(&x.shape()[1..]);
                let mut gx = x.grad_mut();
                for (chunk, &gi) in gx.chunks_mut(inner).zip(g) {
                    for o in chunk.iter_mut() {
                        *o += gi;
                    }
                }
            }
        }
        Op::Upsample2 => {
            let x = &parents[0];
            if x.requires_grad() {
                let xs = x.shape();
                let (h, w) = (xs[2], xs[3]);
                let plane = h * w;
                let mut gx = x.grad_mut();
                for (p, src) in g.chunks(4 * plane).enumerate() {
                    let dst = &mut gx[p * plane..(p + 1) * plane];
                    for y in 0..h {
                        for xx in 0..w {
                            let r0 = 2 * y * 2 * w + 2 * xx;
                            dst[y * w + xx] +=
                                src[r0] + src[r0 + 1] + src[r0 + 2 * w] + src[r0 + 2 * w + 1];
                        }
                    }
                }
            }
        }
        Op::AvgPool2 => {
            let x = &parents[0];
            if x.requires_grad() {
                let xs = x.shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = x.grad_mut();
                for (p, src) in g.chunks(oh * ow).enumerate() {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = 0.25 * src[y * ow + xx];
                            let i = 2 * y * w + 2 * xx;
                            dst[i] += gv;
                            dst[i + 1] += gv;
                            dst[i + w] += gv;
                            dst[i + w + 1] += gv;
                        }
                    }
                }
            }
        }
        Op::ConcatAxis1 { sizes } => {
            let b = node.shape()[0];
            let inner = numel(&node.shape()[2..]);
            let total_c = node.shape()[1];
            let mut offset = 0;
            for (p, &sz) in parents.iter().zip(sizes) {
                if p.requires_grad() {
                    let chunk = sz * inner;
                    let mut gp = p.grad_mut();
                    for bi in 0..b {
                        let src = &g[(bi * total_c + offset) * inner..][..chunk];
                        let dst = &mut gp[bi * chunk..(bi + 1) * chunk];
                        for (o, &gi) in dst.iter_mut().zip(src) {
                            *o += gi;
                        }
                    }
                }
                offset += sz;
            }
        }
        Op::SliceAxis1 { start, len } => {
            let x = &parents[0];
            if x.requires_grad() {
                let b = x.shape()[0];
                let c = x.shape()[1];
                let inner = numel(&x.shape()[2..]);
                let chunk = len * inner;
                let mut gx = x.grad_mut();
                for bi in 0..b {
                    let src = &g[bi * chunk..(bi + 1) * chunk];
                    let dst = &mut gx[(bi * c + start) * inner..][..chunk];
                    for (o, &gi) in dst.iter_mut().zip(src) {
                        *o += gi;
                    }
                }
            }
        }
        Op::Embedding { indices } => {
            let table = &parents[0];
            if table.requires_grad() {
                let e = table.shape()[1];
                let mut gt = table.grad_mut();
                for (bi, &ix) in indices.iter().enumerate() {
                    let src = &g[bi * e..(bi + 1) * e];
                    let dst = &mut gt[ix * e..(ix + 1) * e];
                    for (o, &gi) in dst.iter_mut().zip(src) {
                        *o += gi;
                    }
                }
            }
        }
    }
}

/// Chain rule for unary maps whose local derivative depends on the output.
fn unary(node: &Tensor, g: &[f64], df: impl Fn(f64, f64) -> f64) {
    let x = &node.parents()[0];
    if !x.requires_grad() {
        return;
    }
    let od = node.data();
    let xd = x.data();
    let mut gx = x.grad_mut();
    for (((o, &gi), &xv), &ov) in gx.iter_mut().zip(g).zip(xd.iter()).zip(od.iter()) {
        *o += gi * df(xv, ov);
    }
}

/// Chain rule for unary maps whose local derivative depends on the input.
fn unary_in(node: &Tensor, g: &[f64], df: impl Fn(f64) -> f64) {
    let x = &node.parents()[0];
    if !x.requires_grad() {
        return;
    }
    let xd = x.data();
    let mut gx = x.grad_mut();
    for ((o, &gi), &xv) in gx.iter_mut().zip(g).zip(xd.iter()) {
        *o += gi * df(xv);
    }
}

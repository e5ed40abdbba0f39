//! Forward primitives. Each constructor validates shapes, computes the
//! result buffer, and records itself via [`Tensor::from_op`].

use rayon::prelude::*;

use super::{numel, Op, Result, Tensor, TensorError};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let ad = a.data();
    let bd = b.data();
    ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.data().iter().map(|&x| f(x)).collect()
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out = zip_map(self, other, |x, y| x + y);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Op::Add,
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("subtract", self, other)?;
        let out = zip_map(self, other, |x, y| x - y);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Op::Sub,
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("multiply", self, other)?;
        let out = zip_map(self, other, |x, y| x * y);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Op::Mul,
        ))
    }

    /// [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        matmul_kernel(&self.data(), &other.data(), m, k, n, &mut out);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Op::MatMul,
        ))
    }

    /// 2-D convolution, stride 1, same padding. Input [B,Cin,H,W],
    /// weight [Cout,Cin,KH,KW] with odd KH, KW.
    pub fn conv2d(&self, weight: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(TensorError::InvalidArg {
                op: "conv2d",
                msg: format!("kernel extents must be odd, got {}x{}", ws[2], ws[3]),
            });
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let mut out = vec![0.0; b * cout * h * w];
        conv2d_kernel(&self.data(), b, cin, h, w, &weight.data(), cout, kh, kw, &mut out);
        Ok(Tensor::from_op(
            out,
            vec![b, cout, h, w],
            vec![self.clone(), weight.clone()],
            Op::Conv2d,
        ))
    }

    /// Broadcast a per-channel bias over every axis except axis 1.
    /// `self` is [D0,C,..], `bias` is [C].
    pub fn bias_channel(&self, bias: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() < 2 || bias.shape().len() != 1 || bias.shape()[0] != xs[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_channel",
                lhs: xs.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let xd = self.data();
        let bd = bias.data();
        let mut out = xd.clone();
        for chunk in out.chunks_mut(c * inner) {
            for (ci, plane) in chunk.chunks_mut(inner).enumerate() {
                let bv = bd[ci];
                for v in plane.iter_mut() {
                    *v += bv;
                }
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            out,
            xs.to_vec(),
            vec![self.clone(), bias.clone()],
            Op::BiasChannel,
        ))
    }

    /// Broadcast a per-example, per-channel bias: `self` is [B,C,..],
    /// `bias` is [B,C]. Used to inject label embeddings.
    pub fn bias_per_example(&self, bias: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        let bs = bias.shape();
        if xs.len() < 2 || bs.len() != 2 || bs[0] != xs[0] || bs[1] != xs[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_per_example",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let inner: usize = xs[2..].iter().product();
        let xd = self.data();
        let bd = bias.data();
        let mut out = xd.clone();
        for (chunk, bv) in out.chunks_mut(inner).zip(bd.iter()) {
            for v in chunk.iter_mut() {
                *v += *bv;
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            out,
            xs.to_vec(),
            vec![self.clone(), bias.clone()],
            Op::BiasPerExample,
        ))
    }

    /// Tile `self` (shape [..]) into [batch, ..].
    pub fn broadcast_batch(&self, batch: usize) -> Result<Tensor> {
        if batch == 0 {
            return Err(TensorError::InvalidArg {
                op: "broadcast_batch",
                msg: "batch must be positive".into(),
            });
        }
        let n = self.len();
        let xd = self.data();
        let mut out = Vec::with_capacity(batch * n);
        for _ in 0..batch {
            out.extend_from_slice(&xd);
        }
        drop(xd);
        let mut shape = Vec::with_capacity(self.shape().len() + 1);
        shape.push(batch);
        shape.extend_from_slice(self.shape());
        Ok(Tensor::from_op(out, shape, vec![self.clone()], Op::BroadcastBatch))
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(map(self, f64::exp), self.shape().to_vec(), vec![self.clone()], Op::Exp)
    }

    pub fn log(&self) -> Tensor {
        Tensor::from_op(map(self, f64::ln), self.shape().to_vec(), vec![self.clone()], Op::Log)
    }

    pub fn square(&self) -> Tensor {
        Tensor::from_op(map(self, |x| x * x), self.shape().to_vec(), vec![self.clone()], Op::Square)
    }

    pub fn softplus(&self) -> Tensor {
        Tensor::from_op(map(self, softplus), self.shape().to_vec(), vec![self.clone()], Op::Softplus)
    }

    /// x * sigmoid(x), the network nonlinearity.
    pub fn silu(&self) -> Tensor {
        Tensor::from_op(
            map(self, |x| x * sigmoid(x)),
            self.shape().to_vec(),
            vec![self.clone()],
            Op::Silu,
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        Tensor::from_op(map(self, sigmoid), self.shape().to_vec(), vec![self.clone()], Op::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        Tensor::from_op(map(self, f64::tanh), self.shape().to_vec(), vec![self.clone()], Op::Tanh)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor::from_op(
            map(self, |x| factor * x),
            self.shape().to_vec(),
            vec![self.clone()],
            Op::Scale(factor),
        )
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        Tensor::from_op(
            map(self, |x| x + value),
            self.shape().to_vec(),
            vec![self.clone()],
            Op::AddScalar(value),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Clamp to [lo, hi]; gradient passes only where lo <= x <= hi.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        Tensor::from_op(
            map(self, |x| x.clamp(lo, hi)),
            self.shape().to_vec(),
            vec![self.clone()],
            Op::Clamp { lo, hi },
        )
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("maximum", self, other)?;
        let out = zip_map(self, other, f64::max);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Op::Maximum,
        ))
    }

    /// Sum of all elements, as a [1] tensor.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], Op::SumAll)
    }

    /// Mean of all elements, as a [1] tensor.
    pub fn mean_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.len() as f64;
        Tensor::from_op(vec![s / n], vec![1], vec![self.clone()], Op::MeanAll)
    }

    /// Reduce every axis except the first: [B, ..] -> [B].
    pub fn sum_per_example(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.is_empty() {
            return Err(TensorError::BadShape {
                op: "sum_per_example",
                expected: "rank >= 1",
                shape: xs.to_vec(),
            });
        }
        let b = xs[0];
        let inner = numel(&xs[1..]);
        let xd = self.data();
        let out: Vec<f64> = (0..b)
            .map(|i| xd[i * inner..(i + 1) * inner].iter().sum())
            .collect();
        drop(xd);
        Ok(Tensor::from_op(out, vec![b], vec![self.clone()], Op::SumPerExample))
    }

    /// Nearest-neighbor x2 upsampling of [B,C,H,W].
    pub fn upsample2(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(TensorError::BadShape {
                op: "upsample2",
                expected: "[B,C,H,W]",
                shape: xs.to_vec(),
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.data();
        let mut out = vec![0.0; b * c * 4 * h * w];
        for p in 0..b * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let v = src[y * w + x];
                    let r0 = 2 * y * 2 * w + 2 * x;
                    dst[r0] = v;
                    dst[r0 + 1] = v;
                    dst[r0 + 2 * w] = v;
                    dst[r0 + 2 * w + 1] = v;
                }
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            out,
            vec![b, c, 2 * h, 2 * w],
            vec![self.clone()],
            Op::Upsample2,
        ))
    }

    /// 2x2 average pooling of [B,C,H,W]; H and W must be even.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(TensorError::BadShape {
                op: "avg_pool2",
                expected: "[B,C,H,W] with even H, W",
                shape: xs.to_vec(),
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data();
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    dst[y * ow + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            out,
            vec![b, c, oh, ow],
            vec![self.clone()],
            Op::AvgPool2,
        ))
    }

    /// Concatenate along axis 1. All other axes must agree.
    pub fn concat_axis1(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "concat_axis1",
                msg: "no tensors to concatenate".into(),
            });
        }
        let first = parts[0].shape();
        if first.len() < 2 {
            return Err(TensorError::BadShape {
                op: "concat_axis1",
                expected: "rank >= 2",
                shape: first.to_vec(),
            });
        }
        for p in parts.iter().skip(1) {
            let s = p.shape();
            if s.len() != first.len()
                || s[0] != first[0]
                || s[2..] != first[2..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_axis1",
                    lhs: first.to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let b = first[0];
        let inner = numel(&first[2..]);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let total_c: usize = sizes.iter().sum();
        let mut out = vec![0.0; b * total_c * inner];
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for bi in 0..b {
            let mut offset = 0;
            for (p, d) in sizes.iter().zip(datas.iter()) {
                let chunk = p * inner;
                out[(bi * total_c + offset) * inner..][..chunk]
                    .copy_from_slice(&d[bi * chunk..(bi + 1) * chunk]);
                offset += p;
            }
        }
        drop(datas);
        let mut shape = first.to_vec();
        shape[1] = total_c;
        Ok(Tensor::from_op(
            out,
            shape,
            parts.iter().map(|p| (*p).clone()).collect(),
            Op::ConcatAxis1 { sizes },
        ))
    }

    /// Slice `len` channels starting at `start` along axis 1.
    pub fn slice_axis1(&self, start: usize, len: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() < 2 {
            return Err(TensorError::BadShape {
                op: "slice_axis1",
                expected: "rank >= 2",
                shape: xs.to_vec(),
            });
        }
        if start + len > xs[1] || len == 0 {
            return Err(TensorError::InvalidArg {
                op: "slice_axis1",
                msg: format!("range {}..{} out of {} channels", start, start + len, xs[1]),
            });
        }
        let b = xs[0];
        let c = xs[1];
        let inner = numel(&xs[2..]);
        let xd = self.data();
        let mut out = vec![0.0; b * len * inner];
        for bi in 0..b {
            out[bi * len * inner..(bi + 1) * len * inner]
                .copy_from_slice(&xd[(bi * c + start) * inner..][..len * inner]);
        }
        drop(xd);
        let mut shape = xs.to_vec();
        shape[1] = len;
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Op::SliceAxis1 { start, len },
        ))
    }

    /// Split along axis 1 into chunks of the given channel counts.
    pub fn split_axis1(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let total: usize = sizes.iter().sum();
        if self.shape().len() < 2 || self.shape()[1] != total {
            return Err(TensorError::InvalidArg {
                op: "split_axis1",
                msg: format!("split sizes {:?} do not cover {} channels", sizes, self.shape()[1]),
            });
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            out.push(self.slice_axis1(start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Row lookup: table [V,E] gathered at `indices` -> [B,E]. The
    /// backward rule scatter-adds into the table rows.
    pub fn embedding(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let ts = table.shape();
        if ts.len() != 2 {
            return Err(TensorError::BadShape {
                op: "embedding",
                expected: "[V,E]",
                shape: ts.to_vec(),
            });
        }
        let (v, e) = (ts[0], ts[1]);
        for &ix in indices {
            if ix >= v {
                return Err(TensorError::InvalidArg {
                    op: "embedding",
                    msg: format!("index {ix} out of {v} rows"),
                });
            }
        }
        let td = table.data();
        let mut out = Vec::with_capacity(indices.len() * e);
        for &ix in indices {
            out.extend_from_slice(&td[ix * e..(ix + 1) * e]);
        }
        drop(td);
        Ok(Tensor::from_op(
            out,
            vec![indices.len(), e],
            vec![table.clone()],
            Op::Embedding {
                indices: indices.to_vec(),
            },
        ))
    }

    /// Pass values forward, block gradient flow entirely.
    pub fn stop_gradient(&self) -> Tensor {
        Tensor::build(self.to_vec(), self.shape().to_vec(), false, vec![], Op::Leaf)
    }
}

// ---------------------------------------------------------------------------
// Kernels. Parallel loops partition the *output* into disjoint chunks and
// keep every reduction sequential inside one chunk, so results are
// bit-identical regardless of thread scheduling.
// ---------------------------------------------------------------------------

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += av * bv;
            }
        }
    });
}

/// dA = dOut x B^T for A[m,k] x B[k,n].
pub(crate) fn matmul_da_kernel(dout: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    debug_assert_eq!(da.len(), m * k);
    da.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let drow = &dout[i * n..(i + 1) * n];
        for (kk, r) in row.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (&dv, &bv) in drow.iter().zip(brow) {
                acc += dv * bv;
            }
            *r += acc;
        }
    });
}

/// dB = A^T x dOut for A[m,k] x B[k,n].
pub(crate) fn matmul_db_kernel(a: &[f64], dout: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    debug_assert_eq!(db.len(), k * n);
    db.par_chunks_mut(n).enumerate().for_each(|(kk, row)| {
        for i in 0..m {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let drow = &dout[i * n..(i + 1) * n];
            for (r, &dv) in row.iter_mut().zip(drow) {
                *r += av * dv;
            }
        }
    });
}

/// Stride-1 same-padding correlation. `out` must be zeroed, length b*cout*h*w.
pub(crate) fn conv2d_kernel(
    x: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    out: &mut [f64],
) {
    let ph = (kh / 2) as isize;
    let pw = (kw / 2) as isize;
    let plane = h * w;
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, op)| {
        let bi = idx / cout;
        let co = idx % cout;
        for ci in 0..cin {
            let xplane = &x[(bi * cin + ci) * plane..][..plane];
            let wbase = (co * cin + ci) * kh * kw;
            for ky in 0..kh {
                let dy = ky as isize - ph;
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                for kx in 0..kw {
                    let dx = kx as isize - pw;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = wt[wbase + ky * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx = (x0 as isize + dx) as usize;
                        let src = &xplane[sy * w + sx..][..x1 - x0];
                        let dst = &mut op[y * w + x0..][..x1 - x0];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    });
}

/// Weight gradient: dW[co,ci,ky,kx] = sum_{b,y,x} x[b,ci,y+dy,x+dx] * dout[b,co,y,x].
pub(crate) fn conv2d_dw_kernel(
    x: &[f64],
    dout: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    dw: &mut [f64],
) {
    let ph = (kh / 2) as isize;
    let pw = (kw / 2) as isize;
    let plane = h * w;
    dw.par_chunks_mut(cin * kh * kw).enumerate().for_each(|(co, dwc)| {
        for bi in 0..b {
            let dplane = &dout[(bi * cout + co) * plane..][..plane];
            for ci in 0..cin {
                let xplane = &x[(bi * cin + ci) * plane..][..plane];
                for ky in 0..kh {
                    let dy = ky as isize - ph;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    for kx in 0..kw {
                        let dx = kx as isize - pw;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            let src = &xplane[sy * w + sx..][..x1 - x0];
                            let dst = &dplane[y * w + x0..][..x1 - x0];
                            for (s, d) in src.iter().zip(dst) {
                                acc += *s * *d;
                            }
                        }
                        dwc[(ci * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });
}

/// Flip a [Cout,Cin,KH,KW] kernel spatially and swap Cout/Cin, producing
/// the kernel that turns the input-gradient pass into a plain correlation.
pub(crate) fn flip_transpose_kernel(wt: &[f64], cout: usize, cin: usize, kh: usize, kw: usize) -> Vec<f64> {
    let mut out = vec![0.0; wt.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = ((co * cin + ci) * kh + ky) * kw + kx;
                    let dst = ((ci * cout + co) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx);
                    out[dst] = wt[src];
                }
            }
        }
    }
    out
}

//! A small tape-based reverse-mode autodiff engine over `f64` tensors.
//!
//! Every op records its inputs (and whatever it needs from the forward pass)
//! on the tape; [`Graph::backward`] walks the tape in reverse. The op set is
//! exactly what the encoders, the fusion block and the two alignment losses
//! need, with fused kernels for convolution, normalization, attention and
//! the softmax cross-entropy losses.

use crate::alignment::losses::softmax_xent_rows;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Silu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBroadcast {
        x: usize,
        p: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    MeanSpatial {
        x: usize,
    },
    ChannelsLast {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanRows {
        x: usize,
    },
    SelectRow {
        x: usize,
        index: usize,
    },
    L2Normalize {
        x: usize,
        norms: Vec<f64>,
    },
    SliceCols {
        x: usize,
        cols: usize,
    },
    SoftmaxXent {
        logits: usize,
        dlogits: Vec<f64>,
    },
    MatmulNt {
        a: usize,
        b: usize,
    },
    Repeat {
        x: usize,
        times: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// The tape. One graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<usize>>,
}

/// Gradients of a scalar with respect to every parameter that reached it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros shaped like the parameter when it did not
    /// contribute to the output.
    pub fn get_or_zeros(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
    }

    pub fn into_dense(self, store: &ParamStore) -> Vec<Tensor> {
        self.grads
            .into_iter()
            .chain(std::iter::repeat_with(|| None))
            .zip(store.iter())
            .map(|(g, (_, p))| g.unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output length for a cube kernel of odd size `k` with padding `k / 2`.
pub(crate) fn conv_out_len(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

/// im2col for a `k^3` kernel with padding `k / 2`. `x` is `[n, c, d, h, w]`;
/// returns `[c*k^3, n*p]` where `p = od*oh*ow`.
fn im2col(x: &[f64], dims: [usize; 5], k: usize, stride: usize) -> (Vec<f64>, [usize; 3]) {
    let [n, c, d, h, w] = dims;
    let (od, oh, ow) = (
        conv_out_len(d, k, stride),
        conv_out_len(h, k, stride),
        conv_out_len(w, k, stride),
    );
    let p = od * oh * ow;
    let np = n * p;
    let kk = k * k * k;
    let pad = (k / 2) as isize;
    let mut cols = vec![0.0; c * kk * np];
    for ci in 0..c {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let row_buf = &mut cols[row * np..(row + 1) * np];
                    for ni in 0..n {
                        let src = &x[(ni * c + ci) * d * h * w..(ni * c + ci + 1) * d * h * w];
                        let dst = &mut row_buf[ni * p..(ni + 1) * p];
                        for zo in 0..od {
                            let zi = (zo * stride + kd) as isize - pad;
                            if zi < 0 || zi >= d as isize {
                                continue;
                            }
                            for yo in 0..oh {
                                let yi = (yo * stride + kh) as isize - pad;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                let base_in = (zi as usize * h + yi as usize) * w;
                                let base_out = (zo * oh + yo) * ow;
                                for xo in 0..ow {
                                    let xi = (xo * stride + kw) as isize - pad;
                                    if xi >= 0 && xi < w as isize {
                                        dst[base_out + xo] = src[base_in + xi as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, [od, oh, ow])
}

fn col2im(cols: &[f64], dims: [usize; 5], k: usize, stride: usize, dx: &mut [f64]) {
    let [n, c, d, h, w] = dims;
    let (od, oh, ow) = (
        conv_out_len(d, k, stride),
        conv_out_len(h, k, stride),
        conv_out_len(w, k, stride),
    );
    let p = od * oh * ow;
    let np = n * p;
    let pad = (k / 2) as isize;
    for ci in 0..c {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let row_buf = &cols[row * np..(row + 1) * np];
                    for ni in 0..n {
                        let dst =
                            &mut dx[(ni * c + ci) * d * h * w..(ni * c + ci + 1) * d * h * w];
                        let src = &row_buf[ni * p..(ni + 1) * p];
                        for zo in 0..od {
                            let zi = (zo * stride + kd) as isize - pad;
                            if zi < 0 || zi >= d as isize {
                                continue;
                            }
                            for yo in 0..oh {
                                let yi = (yo * stride + kh) as isize - pad;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                let base_in = (zi as usize * h + yi as usize) * w;
                                let base_out = (zo * oh + yo) * ow;
                                for xo in 0..ow {
                                    let xi = (xo * stride + kw) as isize - pad;
                                    if xi >= 0 && xi < w as isize {
                                        dst[base_in + xi as usize] += src[base_out + xo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Normalizes contiguous groups of `group_len` elements. Returns `(y, xhat, inv_std)`
/// where `y = xhat` before the affine step.
fn normalize_groups(x: &[f64], group_len: usize) -> (Vec<f64>, Vec<f64>) {
    let groups = x.len() / group_len;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let seg = &x[g * group_len..(g + 1) * group_len];
        let mean = seg.iter().sum::<f64>() / group_len as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for (o, v) in xhat[g * group_len..(g + 1) * group_len].iter_mut().zip(seg) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

/// Backward of `normalize_groups`: maps d(xhat) to dx in place.
fn normalize_groups_backward(dxhat: &mut [f64], xhat: &[f64], inv_std: &[f64], group_len: usize) {
    let n = group_len as f64;
    for (g, inv) in inv_std.iter().enumerate() {
        let range = g * group_len..(g + 1) * group_len;
        let dseg = &dxhat[range.clone()];
        let xseg = &xhat[range.clone()];
        let sum_d: f64 = dseg.iter().sum();
        let sum_dx: f64 = dseg.iter().zip(xseg).map(|(a, b)| a * b).sum();
        for (d, xh) in dxhat[range].iter_mut().zip(xseg) {
            *d = inv / n * (n * *d - sum_d - xh * sum_dx);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input. No gradient is reported for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The leaf for a parameter. Repeated calls return the same node so
    /// shared weights accumulate gradient from every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_nodes.len() <= id.index() {
            self.param_nodes.resize(id.index() + 1, None);
        }
        if let Some(node) = self.param_nodes[id.index()] {
            return Var(node);
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        self.param_nodes[id.index()] = Some(v.0);
        v
    }

    /// Cube-kernel convolution with padding `k / 2`.
    /// `x: [n, c_in, d, h, w]`, `w: [c_out, c_in, k, k, k]`, `b: [c_out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 5, "conv3d expects a rank-5 input");
        let dims = [xs[0], xs[1], xs[2], xs[3], xs[4]];
        let ws = self.value(w).shape().to_vec();
        let ksz = ws[2];
        assert!(ksz % 2 == 1, "conv3d kernel must be odd");
        assert_eq!(ws[1..], [dims[1], ksz, ksz, ksz], "conv3d weight shape");
        let c_out = ws[0];
        let (cols, [od, oh, ow]) = im2col(self.value(x).data(), dims, ksz, stride);
        let p = od * oh * ow;
        let np = dims[0] * p;
        let k = dims[1] * ksz * ksz * ksz;
        let mut mat = vec![0.0; c_out * np];
        gemm(
            1.0,
            MatRef::new(self.value(w).data(), c_out, k),
            MatRef::new(&cols, k, np),
            0.0,
            &mut mat,
        );
        let bias = self.value(b).data();
        let mut out = vec![0.0; dims[0] * c_out * p];
        for ni in 0..dims[0] {
            for co in 0..c_out {
                let dst = &mut out[(ni * c_out + co) * p..(ni * c_out + co + 1) * p];
                let src = &mat[co * np + ni * p..co * np + (ni + 1) * p];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o = s + bias[co];
                }
            }
        }
        let value = Tensor::from_vec(&[dims[0], c_out, od, oh, ow], out);
        self.push(
            value,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
            },
        )
    }

    /// Group normalization over `[n, c, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        let spatial: usize = shape[2..].iter().product();
        let group_len = c / groups * spatial;
        let (xhat, inv_std) = normalize_groups(self.value(x).data(), group_len);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; xhat.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * spatial;
                for s in 0..spatial {
                    out[off + s] = xhat[off + s] * g[ci] + bt[ci];
                }
            }
        }
        self.push(
            Tensor::from_vec(&shape, out),
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                xhat,
                inv_std,
            },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::from_vec(src.shape(), data);
        self.push(value, Op::Silu { x: x.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(value, Op::Add { a: a.0, b: b.0 })
    }

    /// `x: [..., l, d] + p: [l, d]` broadcast over leading dims.
    pub fn add_broadcast(&mut self, x: Var, p: Var) -> Var {
        let (vx, vp) = (self.value(x), self.value(p));
        let pn = vp.numel();
        assert_eq!(vx.numel() % pn, 0, "add_broadcast shape mismatch");
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + vp.data()[i % pn])
            .collect();
        let value = Tensor::from_vec(vx.shape(), data);
        self.push(value, Op::AddBroadcast { x: x.0, p: p.0 })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_vec(vx.shape(), data);
        self.push(value, Op::Scale { x: x.0, factor })
    }

    /// Mean over every axis after the first two: `[n, c, ...] -> [n, c]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        let s: usize = vx.shape()[2..].iter().product();
        let data = vx
            .data()
            .chunks(s)
            .map(|ch| ch.iter().sum::<f64>() / s as f64)
            .collect();
        let value = Tensor::from_vec(&[n, c], data);
        self.push(value, Op::MeanSpatial { x: x.0 })
    }

    /// `[n, c, ...] -> [n, s, c]`: one row per spatial position.
    pub fn channels_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        let s: usize = vx.shape()[2..].iter().product();
        let src = vx.data();
        let mut out = vec![0.0; n * s * c];
        for ni in 0..n {
            for ci in 0..c {
                for si in 0..s {
                    out[(ni * s + si) * c + ci] = src[(ni * c + ci) * s + si];
                }
            }
        }
        self.push(Tensor::from_vec(&[n, s, c], out), Op::ChannelsLast { x: x.0 })
    }

    /// Row-wise affine map `x @ w^T + b` over the last axis. `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let in_dim = *vx.shape().last().expect("linear on rank-0 tensor");
        let out_dim = vw.shape()[0];
        assert_eq!(vw.shape()[1], in_dim, "linear weight shape mismatch");
        let rows = vx.numel() / in_dim;
        let mut out = vec![0.0; rows * out_dim];
        gemm(
            1.0,
            MatRef::new(vx.data(), rows, in_dim),
            MatRef::new(vw.data(), out_dim, in_dim).t(),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let vb = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                for (o, bb) in row.iter_mut().zip(vb) {
                    *o += bb;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
        )
    }

    /// Row lookup into `table: [vocab, d]`, output `[shape..., d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (vocab, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocab { id, size: vocab });
            }
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let mut full = shape.to_vec();
        full.push(d);
        Ok(self.push(
            Tensor::from_vec(&full, out),
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        let shape = vx.shape().to_vec();
        let (xhat, inv_std) = normalize_groups(vx.data(), d);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % d] + b[i % d])
            .collect();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention on already-projected inputs.
    /// `q: [b, lq, d]`, `k, v: [b, lk, d]`, `key_mask: [b * lk]` (true = attend).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, lq, d) = (vq.shape()[0], vq.shape()[1], vq.shape()[2]);
        let lk = vk.shape()[1];
        assert_eq!(vk.shape(), vv.shape(), "attention key/value shape mismatch");
        assert_eq!(vk.shape()[2], d);
        assert_eq!(key_mask.len(), b * lk, "attention mask length");
        assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; b * heads * lq * lk];
        let mut out = vec![0.0; b * lq * d];
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        for bi in 0..b {
            let mask = &key_mask[bi * lk..(bi + 1) * lk];
            if !mask.iter().any(|&m| m) {
                return Err(Error::DegenerateAttention);
            }
            for h in 0..heads {
                for i in 0..lq {
                    let qrow = &qd[(bi * lq + i) * d + h * dh..(bi * lq + i) * d + (h + 1) * dh];
                    let prow = &mut probs[((bi * heads + h) * lq + i) * lk..][..lk];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lk {
                        if !mask[j] {
                            continue;
                        }
                        let krow = &kd[(bi * lk + j) * d + h * dh..][..dh];
                        let s = qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut denom = 0.0;
                    for j in 0..lk {
                        if mask[j] {
                            let e = (prow[j] - max).exp();
                            prow[j] = e;
                            denom += e;
                        }
                    }
                    for p in prow.iter_mut() {
                        *p /= denom;
                    }
                    let orow = &mut out[(bi * lq + i) * d + h * dh..][..dh];
                    for j in 0..lk {
                        if !mask[j] {
                            continue;
                        }
                        let vrow = &vd[(bi * lk + j) * d + h * dh..][..dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += prow[j] * vv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[b, lq, d], out),
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
        ))
    }

    /// `[b, l, d] -> [b, d]`, mean over `l`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, l, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for li in 0..l {
                for di in 0..d {
                    out[bi * d + di] += vx.data()[(bi * l + li) * d + di];
                }
            }
        }
        for o in out.iter_mut() {
            *o /= l as f64;
        }
        self.push(Tensor::from_vec(&[b, d], out), Op::MeanRows { x: x.0 })
    }

    /// `[b, l, d] -> [b, d]`, the row at `index`.
    pub fn select_row(&mut self, x: Var, index: usize) -> Var {
        let vx = self.value(x);
        let (b, l, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(index < l);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&vx.data()[(bi * l + index) * d..][..d]);
        }
        self.push(
            Tensor::from_vec(&[b, d], out),
            Op::SelectRow { x: x.0, index },
        )
    }

    /// Scales each row of `[r, d]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        let mut norms = Vec::with_capacity(vx.numel() / d);
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > f64::MIN_POSITIVE) || !n.is_finite() {
                return Err(Error::DegenerateNorm(n));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::from_vec(vx.shape(), out);
        Ok(self.push(value, Op::L2Normalize { x: x.0, norms }))
    }

    /// Keeps the first `cols` columns of `[r, c]`.
    pub fn slice_cols(&mut self, x: Var, cols: usize) -> Var {
        let vx = self.value(x);
        let c = *vx.shape().last().unwrap();
        assert!(cols <= c);
        let rows = vx.numel() / c;
        let mut out = Vec::with_capacity(rows * cols);
        for row in vx.data().chunks(c) {
            out.extend_from_slice(&row[..cols]);
        }
        self.push(
            Tensor::from_vec(&[rows, cols], out),
            Op::SliceCols { x: x.0, cols },
        )
    }

    /// `sum_r [logsumexp(scale * logits_r) - scale * logits_r[target_r]]` over the
    /// rows of `[r, c]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], scale: f64) -> Var {
        let vl = self.value(logits);
        let c = *vl.shape().last().unwrap();
        let rows = vl.numel() / c;
        let (loss, dlogits) = softmax_xent_rows(vl.data(), rows, c, targets, scale);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits: logits.0,
                dlogits,
            },
        )
    }

    /// `a: [r, d]`, `b: [c, d]` -> `a @ b^T: [r, c]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let d = va.shape()[1];
        assert_eq!(vb.shape()[1], d, "matmul_nt inner dimension");
        let (r, c) = (va.shape()[0], vb.shape()[0]);
        let mut out = vec![0.0; r * c];
        gemm(
            1.0,
            MatRef::new(va.data(), r, d),
            MatRef::new(vb.data(), c, d).t(),
            0.0,
            &mut out,
        );
        self.push(Tensor::from_vec(&[r, c], out), Op::MatmulNt { a: a.0, b: b.0 })
    }

    /// Repeats each slice along the first axis `times` times consecutively:
    /// `[b, ...] -> [b * times, ...]`.
    pub fn repeat_interleave(&mut self, x: Var, times: usize) -> Var {
        let vx = self.value(x);
        let b = vx.shape()[0];
        let inner = vx.numel() / b;
        let mut out = Vec::with_capacity(vx.numel() * times);
        for chunk in vx.data().chunks(inner) {
            for _ in 0..times {
                out.extend_from_slice(chunk);
            }
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = b * times;
        self.push(Tensor::from_vec(&shape, out), Op::Repeat { x: x.0, times })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backward_op(&node.op, &node.value, &g, &mut grads);
            if node.param.is_some() {
                grads[idx] = Some(g);
            }
        }

        let mut by_param: Vec<Option<Tensor>> = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                if by_param.len() <= id.index() {
                    by_param.resize_with(id.index() + 1, || None);
                }
                by_param[id.index()] = grads[idx].take();
            }
        }
        Gradients { grads: by_param }
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], i: usize, t: Tensor| match &mut grads[i] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let gd = g.data();
        match *op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, stride } => {
                let xs = self.nodes[x].value.shape();
                let dims = [xs[0], xs[1], xs[2], xs[3], xs[4]];
                let wv = &self.nodes[w].value;
                let c_out = wv.shape()[0];
                let ksz = wv.shape()[2];
                let os = out.shape();
                let p = os[2] * os[3] * os[4];
                let np = dims[0] * p;
                let k = dims[1] * ksz * ksz * ksz;
                let mut dmat = vec![0.0; c_out * np];
                let mut db = vec![0.0; c_out];
                for ni in 0..dims[0] {
                    for co in 0..c_out {
                        let src = &gd[(ni * c_out + co) * p..][..p];
                        dmat[co * np + ni * p..co * np + (ni + 1) * p].copy_from_slice(src);
                        db[co] += src.iter().sum::<f64>();
                    }
                }
                let (cols, _) = im2col(self.nodes[x].value.data(), dims, ksz, stride);
                let mut dw = vec![0.0; c_out * k];
                gemm(
                    1.0,
                    MatRef::new(&dmat, c_out, np),
                    MatRef::new(&cols, k, np).t(),
                    0.0,
                    &mut dw,
                );
                acc(grads, w, Tensor::from_vec(wv.shape(), dw));
                acc(grads, b, Tensor::from_vec(&[c_out], db));
                if self.needs_grad(x) {
                    let mut dcols = cols;
                    gemm(
                        1.0,
                        MatRef::new(wv.data(), c_out, k).t(),
                        MatRef::new(&dmat, c_out, np),
                        0.0,
                        &mut dcols,
                    );
                    let mut dx = vec![0.0; self.nodes[x].value.numel()];
                    col2im(&dcols, dims, ksz, stride, &mut dx);
                    acc(grads, x, Tensor::from_vec(xs, dx));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                ref xhat,
                ref inv_std,
            } => {
                let shape = out.shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let gam = self.nodes[gamma].value.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; gd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * spatial;
                        for s in 0..spatial {
                            let gv = gd[off + s];
                            dgamma[ci] += gv * xhat[off + s];
                            dbeta[ci] += gv;
                            dxhat[off + s] = gv * gam[ci];
                        }
                    }
                }
                normalize_groups_backward(&mut dxhat, xhat, inv_std, c / groups * spatial);
                acc(grads, gamma, Tensor::from_vec(&[c], dgamma));
                acc(grads, beta, Tensor::from_vec(&[c], dbeta));
                acc(grads, x, Tensor::from_vec(shape, dxhat));
            }
            Op::Silu { x } => {
                let xv = self.nodes[x].value.data();
                let dx = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                acc(grads, x, Tensor::from_vec(out.shape(), dx));
            }
            Op::Add { a, b } => {
                acc(grads, a, g.clone());
                acc(grads, b, g.clone());
            }
            Op::AddBroadcast { x, p } => {
                let pv = &self.nodes[p].value;
                let pn = pv.numel();
                let mut dp = vec![0.0; pn];
                for (i, gv) in gd.iter().enumerate() {
                    dp[i % pn] += gv;
                }
                acc(grads, x, g.clone());
                acc(grads, p, Tensor::from_vec(pv.shape(), dp));
            }
            Op::Scale { x, factor } => {
                let dx = gd.iter().map(|v| v * factor).collect();
                acc(grads, x, Tensor::from_vec(out.shape(), dx));
            }
            Op::MeanSpatial { x } => {
                let xs = self.nodes[x].value.shape();
                let s: usize = xs[2..].iter().product();
                let mut dx = Vec::with_capacity(s * gd.len());
                for gv in gd {
                    dx.extend(std::iter::repeat(gv / s as f64).take(s));
                }
                acc(grads, x, Tensor::from_vec(xs, dx));
            }
            Op::ChannelsLast { x } => {
                let xs = self.nodes[x].value.shape();
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let mut dx = vec![0.0; n * c * s];
                for ni in 0..n {
                    for ci in 0..c {
                        for si in 0..s {
                            dx[(ni * c + ci) * s + si] = gd[(ni * s + si) * c + ci];
                        }
                    }
                }
                acc(grads, x, Tensor::from_vec(xs, dx));
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x].value;
                let wv = &self.nodes[w].value;
                let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / in_dim;
                let mut dw = vec![0.0; out_dim * in_dim];
                gemm(
                    1.0,
                    MatRef::new(gd, rows, out_dim).t(),
                    MatRef::new(xv.data(), rows, in_dim),
                    0.0,
                    &mut dw,
                );
                acc(grads, w, Tensor::from_vec(wv.shape(), dw));
                if let Some(b) = b {
                    let mut db = vec![0.0; out_dim];
                    for row in gd.chunks(out_dim) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    acc(grads, b, Tensor::from_vec(&[out_dim], db));
                }
                if self.needs_grad(x) {
                    let mut dx = vec![0.0; rows * in_dim];
                    gemm(
                        1.0,
                        MatRef::new(gd, rows, out_dim),
                        MatRef::new(wv.data(), out_dim, in_dim),
                        0.0,
                        &mut dx,
                    );
                    acc(grads, x, Tensor::from_vec(xv.shape(), dx));
                }
            }
            Op::Embedding { table, ref ids } => {
                let tv = &self.nodes[table].value;
                let d = tv.shape()[1];
                let mut dt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[r * d + j];
                    }
                }
                acc(grads, table, Tensor::from_vec(tv.shape(), dt));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let d = *out.shape().last().unwrap();
                let gam = self.nodes[gamma].value.data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dxhat = vec![0.0; gd.len()];
                for (i, gv) in gd.iter().enumerate() {
                    dgamma[i % d] += gv * xhat[i];
                    dbeta[i % d] += gv;
                    dxhat[i] = gv * gam[i % d];
                }
                normalize_groups_backward(&mut dxhat, xhat, inv_std, d);
                acc(grads, gamma, Tensor::from_vec(&[d], dgamma));
                acc(grads, beta, Tensor::from_vec(&[d], dbeta));
                acc(grads, x, Tensor::from_vec(out.shape(), dxhat));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                ref probs,
            } => {
                let (qv, kv, vv) = (
                    &self.nodes[q].value,
                    &self.nodes[k].value,
                    &self.nodes[v].value,
                );
                let (b, lq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                let lk = kv.shape()[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; qv.numel()];
                let mut dk = vec![0.0; kv.numel()];
                let mut dv = vec![0.0; vv.numel()];
                let mut dp = vec![0.0; lk];
                for bi in 0..b {
                    for h in 0..heads {
                        for i in 0..lq {
                            let prow = &probs[((bi * heads + h) * lq + i) * lk..][..lk];
                            let grow = &gd[(bi * lq + i) * d + h * dh..][..dh];
                            let mut dot = 0.0;
                            for j in 0..lk {
                                if prow[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let voff = (bi * lk + j) * d + h * dh;
                                let vrow = &vv.data()[voff..][..dh];
                                dp[j] = grow.iter().zip(vrow).map(|(a, c)| a * c).sum();
                                dot += prow[j] * dp[j];
                                for t in 0..dh {
                                    dv[voff + t] += prow[j] * grow[t];
                                }
                            }
                            let qoff = (bi * lq + i) * d + h * dh;
                            for j in 0..lk {
                                if prow[j] == 0.0 {
                                    continue;
                                }
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                let koff = (bi * lk + j) * d + h * dh;
                                for t in 0..dh {
                                    dq[qoff + t] += ds * kv.data()[koff + t];
                                    dk[koff + t] += ds * qv.data()[qoff + t];
                                }
                            }
                        }
                    }
                }
                acc(grads, q, Tensor::from_vec(qv.shape(), dq));
                acc(grads, k, Tensor::from_vec(kv.shape(), dk));
                acc(grads, v, Tensor::from_vec(vv.shape(), dv));
            }
            Op::MeanRows { x } => {
                let xs = self.nodes[x].value.shape();
                let (b, l, d) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![0.0; b * l * d];
                for bi in 0..b {
                    for li in 0..l {
                        for di in 0..d {
                            dx[(bi * l + li) * d + di] = gd[bi * d + di] / l as f64;
                        }
                    }
                }
                acc(grads, x, Tensor::from_vec(xs, dx));
            }
            Op::SelectRow { x, index } => {
                let xs = self.nodes[x].value.shape();
                let (b, l, d) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![0.0; b * l * d];
                for bi in 0..b {
                    dx[(bi * l + index) * d..][..d].copy_from_slice(&gd[bi * d..][..d]);
                }
                acc(grads, x, Tensor::from_vec(xs, dx));
            }
            Op::L2Normalize { x, ref norms } => {
                let d = *out.shape().last().unwrap();
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for (r, n) in norms.iter().enumerate() {
                    let yr = &y[r * d..][..d];
                    let gr = &gd[r * d..][..d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                acc(grads, x, Tensor::from_vec(out.shape(), dx));
            }
            Op::SliceCols { x, cols } => {
                let xs = self.nodes[x].value.shape();
                let c = *xs.last().unwrap();
                let rows = self.nodes[x].value.numel() / c;
                let mut dx = vec![0.0; rows * c];
                for r in 0..rows {
                    dx[r * c..r * c + cols].copy_from_slice(&gd[r * cols..][..cols]);
                }
                acc(grads, x, Tensor::from_vec(xs, dx));
            }
            Op::MatmulNt { a, b } => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                let d = va.shape()[1];
                let (r, c) = (va.shape()[0], vb.shape()[0]);
                let mut da = vec![0.0; r * d];
                gemm(1.0, MatRef::new(gd, r, c), MatRef::new(vb.data(), c, d), 0.0, &mut da);
                let mut db = vec![0.0; c * d];
                gemm(1.0, MatRef::new(gd, r, c).t(), MatRef::new(va.data(), r, d), 0.0, &mut db);
                acc(grads, a, Tensor::from_vec(va.shape(), da));
                acc(grads, b, Tensor::from_vec(vb.shape(), db));
            }
            Op::Repeat { x, times } => {
                let xv = &self.nodes[x].value;
                let inner = xv.numel() / xv.shape()[0];
                let mut dx = vec![0.0; xv.numel()];
                for (i, chunk) in gd.chunks(inner).enumerate() {
                    let dst = &mut dx[(i / times) * inner..][..inner];
                    for (d, gv) in dst.iter_mut().zip(chunk) {
                        *d += gv;
                    }
                }
                acc(grads, x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::SoftmaxXent { logits, ref dlogits } => {
                let lv = &self.nodes[logits].value;
                let dx = dlogits.iter().map(|v| v * gd[0]).collect();
                acc(grads, logits, Tensor::from_vec(lv.shape(), dx));
            }
        }
    }

    /// Whether any parameter sits upstream of node `i`. Inputs (volumes) never
    /// need gradients, which skips the most expensive col2im.
    fn needs_grad(&self, i: usize) -> bool {
        let node = &self.nodes[i];
        match node.op {
            Op::Leaf => node.param.is_some(),
            _ => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central differences of `f` against the tape gradient for every entry of
    /// every parameter.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Var) {
        let mut g = Graph::new();
        let out = f(&mut g, store);
        let grads = g.backward(out).into_dense(store);
        let h = 1e-5;
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for i in 0..store.value(id).numel() {
                let orig = store.value(id).data()[i];
                store.value_mut(id).data_mut()[i] = orig + h;
                let mut gp = Graph::new();
                let o = f(&mut gp, store);
                let fp = gp.value(o).data()[0];
                store.value_mut(id).data_mut()[i] = orig - h;
                let mut gm = Graph::new();
                let o = f(&mut gm, store);
                let fm = gm.value(o).data()[0];
                store.value_mut(id).data_mut()[i] = orig;
                let num = (fp - fm) / (2.0 * h);
                let ana = grads[id.index()].data()[i];
                assert!(
                    (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                    "{} [{i}]: numeric {num} vs analytic {ana}",
                    store.get(id).name
                );
            }
        }
    }

    /// Linear head plus cross-entropy so every output entry gets a distinct upstream gradient.
    fn probe(g: &mut Graph, store: &ParamStore, x: Var, wid: ParamId) -> Var {
        let w = g.param(store, wid);
        let y = g.linear(x, w, None);
        let c = *g.value(y).shape().last().unwrap();
        let t = vec![0usize; g.value(y).numel() / c];
        g.softmax_xent(y, &t, 1.0)
    }

    #[test]
    fn conv_groupnorm_silu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = rand_tensor(&mut rng, &[2, 2, 4, 3, 5]);
        let w = store.add("w", rand_tensor(&mut rng, &[4, 2, 3, 3, 3]), true);
        let b = store.add("b", rand_tensor(&mut rng, &[4]), false);
        let gamma = store.add("gamma", rand_tensor(&mut rng, &[4]), false);
        let beta = store.add("beta", rand_tensor(&mut rng, &[4]), false);
        let head = store.add("head", rand_tensor(&mut rng, &[3, 4]), true);
        check(&mut store, |g, s| {
            let xi = g.input(x.clone());
            let (w, b) = (g.param(s, w), g.param(s, b));
            let y = g.conv3d(xi, w, b, 2);
            let (ga, be) = (g.param(s, gamma), g.param(s, beta));
            let y = g.group_norm(y, ga, be, 2);
            let y = g.silu(y);
            let y = g.mean_spatial(y);
            probe(g, s, y, head)
        });
    }

    #[test]
    fn conv_input_gradient_via_stacked_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let x = rand_tensor(&mut rng, &[1, 1, 5, 4, 4]);
        let w1 = store.add("w1", rand_tensor(&mut rng, &[2, 1, 3, 3, 3]), true);
        let b1 = store.add("b1", rand_tensor(&mut rng, &[2]), false);
        let w2 = store.add("w2", rand_tensor(&mut rng, &[3, 2, 3, 3, 3]), true);
        let b2 = store.add("b2", rand_tensor(&mut rng, &[3]), false);
        let head = store.add("head", rand_tensor(&mut rng, &[2, 3]), true);
        check(&mut store, |g, s| {
            let xi = g.input(x.clone());
            let (w, b) = (g.param(s, w1), g.param(s, b1));
            let y = g.conv3d(xi, w, b, 1);
            let (w, b) = (g.param(s, w2), g.param(s, b2));
            let y = g.conv3d(y, w, b, 2);
            let y = g.channels_last(y);
            probe(g, s, y, head)
        });
    }

    #[test]
    fn transformer_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let table = store.add("table", rand_tensor(&mut rng, &[7, 4]), true);
        let pos = store.add("pos", rand_tensor(&mut rng, &[3, 4]), true);
        let wq = store.add("wq", rand_tensor(&mut rng, &[4, 4]), true);
        let bq = store.add("bq", rand_tensor(&mut rng, &[4]), false);
        let wk = store.add("wk", rand_tensor(&mut rng, &[4, 4]), true);
        let wv = store.add("wv", rand_tensor(&mut rng, &[4, 4]), true);
        let gamma = store.add("gamma", rand_tensor(&mut rng, &[4]), false);
        let beta = store.add("beta", rand_tensor(&mut rng, &[4]), false);
        let head = store.add("head", rand_tensor(&mut rng, &[3, 4]), true);
        let ids = vec![1, 2, 0, 3, 6, 5];
        let mask = vec![true, true, false, true, true, true];
        check(&mut store, |g, s| {
            let t = g.param(s, table);
            let e = g.embedding(t, &ids, &[2, 3]).unwrap();
            let p = g.param(s, pos);
            let e = g.add_broadcast(e, p);
            let (wq, bq, wk, wv) = (
                g.param(s, wq),
                g.param(s, bq),
                g.param(s, wk),
                g.param(s, wv),
            );
            let q = g.linear(e, wq, Some(bq));
            let k = g.linear(e, wk, None);
            let v = g.linear(e, wv, None);
            let a = g.attention(q, k, v, &mask, 2).unwrap();
            let a = g.add(a, e);
            let (ga, be) = (g.param(s, gamma), g.param(s, beta));
            let a = g.layer_norm(a, ga, be);
            let cls = g.select_row(a, 0);
            let pooled = g.mean_rows(a);
            let both = g.add(cls, pooled);
            let both = g.scale(both, 0.7);
            let both = g.l2_normalize(both).unwrap();
            probe(g, s, both, head)
        });
    }

    #[test]
    fn slice_and_xent_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, &[5, 3]), true);
        let x = rand_tensor(&mut rng, &[4, 3]);
        check(&mut store, |g, s| {
            let xi = g.input(x.clone());
            let w = g.param(s, w);
            let y = g.linear(xi, w, None);
            let y = g.slice_cols(y, 3);
            g.softmax_xent(y, &[0, 2, 1, 1], 1.0 / 0.3)
        });
    }

    #[test]
    fn matmul_repeat_and_pointwise_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, &[3, 4]), true);
        let b = store.add("b", rand_tensor(&mut rng, &[2, 4]), true);
        let w = store.add("w", rand_tensor(&mut rng, &[2, 3, 1, 1, 1]), true);
        let bias = store.add("bias", rand_tensor(&mut rng, &[2]), false);
        let x = rand_tensor(&mut rng, &[1, 3, 3, 2, 5]);
        check(&mut store, |g, s| {
            let (a, b) = (g.param(s, a), g.param(s, b));
            let r = g.repeat_interleave(b, 3);
            let m = g.matmul_nt(a, r);
            let l1 = g.softmax_xent(m, &[0, 5, 2], 2.0);
            let xi = g.input(x.clone());
            let (w, bias) = (g.param(s, w), g.param(s, bias));
            let y = g.conv3d(xi, w, bias, 2);
            let y = g.channels_last(y);
            let y = g.mean_rows(y);
            let l2 = g.softmax_xent(y, &[1], 1.0);
            g.add(l1, l2)
        });
    }

    #[test]
    fn all_masked_keys_is_an_error() {
        let mut g = Graph::new();
        let q = g.input(Tensor::zeros(&[1, 2, 4]));
        let k = g.input(Tensor::zeros(&[1, 3, 4]));
        let err = g.attention(q, k, k, &[false; 3], 2).unwrap_err();
        assert!(matches!(err, Error::DegenerateAttention));
    }

    #[test]
    fn conv_output_length_halves_with_stride_two() {
        assert_eq!(conv_out_len(32, 3, 2), 16);
        assert_eq!(conv_out_len(16, 3, 2), 8);
        assert_eq!(conv_out_len(1, 3, 2), 1);
        assert_eq!(conv_out_len(5, 3, 1), 5);
        assert_eq!(conv_out_len(5, 1, 2), 3);
        assert_eq!(conv_out_len(5, 3, 2), 3);
    }
}

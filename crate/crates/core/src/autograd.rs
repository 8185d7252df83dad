//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! bound once per graph from a [`ParamStore`]; [`Graph::backward`] returns
//! gradients keyed by parameter id. Loss nodes compute their input gradient
//! eagerly during the forward pass because they are always terminal.

use crate::error::{CcsdError, Result};
use crate::conv::{self, Geometry};
use crate::tensor::{gemm, softmax_channels, MatRef, Scalar, Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flat view index -> (param, offset), for coordinate sampling.
    pub fn locate(&self, mut flat: usize) -> Option<(ParamId, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return Some((ParamId(i), flat));
            }
            flat -= t.len();
        }
        None
    }
}

/// Gradients produced by [`Graph::backward`], aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|&v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Var,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        factor: [usize; 3],
    },
    Concat {
        parts: Vec<Var>,
    },
    /// Terminal scalar whose input gradient was computed in the forward pass.
    Loss {
        x: Var,
        grad: Vec<T>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: Vec<Var>,
    n_params: usize,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    /// New graph with every parameter of `store` bound as a leaf.
    pub fn new(store: &ParamStore<T>) -> Self {
        let mut g = Graph {
            nodes: Vec::new(),
            bound: Vec::with_capacity(store.len()),
            n_params: store.len(),
        };
        for id in store.ids() {
            let v = g.push(store.get(id).clone(), Op::Param(id), true);
            g.bound.push(v);
        }
        g
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.bound[id.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    /// 'Same'-padded convolution with stride 1. `w` is `[out, in, kd, kh, kw]`
    /// with odd kernel extents, `b` is `[1, out, 1, 1, 1]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if ws[1] != xs[1] || self.value(b).len() != ws[0] {
            return Err(CcsdError::ShapeMismatch {
                expected: vec![ws[1]],
                actual: vec![xs[1]],
            });
        }
        if ws[2..].iter().any(|k| k.is_multiple_of(2)) {
            return Err(CcsdError::invalid("convolution kernels must have odd extents"));
        }
        let out = conv_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv { x, w, b }, rg))
    }

    /// Per-sample, per-channel normalization with affine `gamma`/`beta` (`[1, C, 1, 1, 1]`).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let [nb, nc, ..] = xv.shape();
        let s = xv.spatial();
        let eps = T::of(INSTANCE_NORM_EPS);
        let inv_s = T::one() / T::of(s as f64);
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(xv.shape());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); nb * nc];
        for bi in 0..nb {
            for ci in 0..nc {
                let plane = xv.plane(bi, ci);
                let mean = plane.iter().copied().sum::<T>() * inv_s;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_s;
                let is = T::one() / (var + eps).sqrt();
                inv_std[bi * nc + ci] = is;
                let off = (bi * nc + ci) * s;
                let o = out.plane_mut(bi, ci);
                for p in 0..s {
                    let h = (plane[p] - mean) * is;
                    xhat[off + p] = h;
                    o[p] = g[ci] * h + be[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    /// Max pooling with window = stride = `factor`. Ties keep the first voxel.
    pub fn max_pool(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let xv = self.value(x);
        let [nb, nc, d, h, w] = xv.shape();
        let [fd, fh, fw] = factor;
        if d % fd != 0 || h % fh != 0 || w % fw != 0 {
            return Err(CcsdError::invalid(format!(
                "spatial shape {:?} not divisible by pooling factor {factor:?}",
                [d, h, w]
            )));
        }
        let (od, oh, ow) = (d / fd, h / fh, w / fw);
        let mut out = Tensor::zeros([nb, nc, od, oh, ow]);
        let mut argmax = vec![0u32; nb * nc * od * oh * ow];
        let mut k = 0;
        for bi in 0..nb {
            for ci in 0..nc {
                let plane = xv.plane(bi, ci);
                let o = out.plane_mut(bi, ci);
                let mut q = 0;
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut best = usize::MAX;
                            let mut best_v = T::neg_infinity();
                            for dz in 0..fd {
                                for dy in 0..fh {
                                    let row = ((z * fd + dz) * h + y * fh + dy) * w + xx * fw;
                                    for dx in 0..fw {
                                        let v = plane[row + dx];
                                        if best == usize::MAX || v > best_v {
                                            best = row + dx;
                                            best_v = v;
                                        }
                                    }
                                }
                            }
                            o[q] = best_v;
                            argmax[k] = best as u32;
                            q += 1;
                            k += 1;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample(&mut self, x: Var, factor: [usize; 3]) -> Var {
        let xv = self.value(x);
        let [nb, nc, d, h, w] = xv.shape();
        let [fd, fh, fw] = factor;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let mut out = Tensor::zeros([nb, nc, od, oh, ow]);
        for bi in 0..nb {
            for ci in 0..nc {
                let src = xv.plane(bi, ci);
                let dst = out.plane_mut(bi, ci);
                for z in 0..od {
                    for y in 0..oh {
                        let srow = ((z / fd) * h + y / fh) * w;
                        let drow = (z * oh + y) * ow;
                        for xx in 0..ow {
                            dst[drow + xx] = src[srow + xx / fw];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample { x, factor }, rg)
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| CcsdError::invalid("concat of nothing"))?)
            .shape();
        let mut total_c = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[0] != first[0] || s[2..] != first[2..] {
                return Err(CcsdError::ShapeMismatch {
                    expected: first.to_vec(),
                    actual: s.to_vec(),
                });
            }
            total_c += s[1];
        }
        let shape: Shape = [first[0], total_c, first[2], first[3], first[4]];
        let mut out = Tensor::zeros(shape);
        let s = shape[2] * shape[3] * shape[4];
        for bi in 0..shape[0] {
            let mut c0 = 0;
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.channels();
                let src = pv.item_data(bi);
                let start = (bi * total_c + c0) * s;
                out.data_mut()[start..start + pc * s].copy_from_slice(src);
                c0 += pc;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over positions of `KL(teacher || softmax(x / tau))`, softmax over
    /// channels. `teacher` is a constant distribution of the same shape.
    pub fn kl_from_teacher(&mut self, x: Var, teacher: &Tensor<T>, tau: T) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != teacher.shape() {
            return Err(CcsdError::ShapeMismatch {
                expected: teacher.shape().to_vec(),
                actual: xv.shape().to_vec(),
            });
        }
        let (value, grad) = kl_teacher_student(teacher, xv, tau);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::Loss { x, grad }, rg))
    }

    /// Cross-entropy plus soft Dice on class logits, equal weights.
    pub fn seg_loss(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (value, grad) = seg_loss_with_grad(self.value(logits), labels)?;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(value), Op::Loss { x: logits, grad }, rg))
    }

    /// `sum_i w_i * term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let value = terms
            .iter()
            .fold(T::zero(), |acc, &(v, w)| acc + w * self.value(v).item());
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(
            Tensor::scalar(value),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Tensor<T>> = self.bound[..self.n_params]
            .iter()
            .map(|&v| Tensor::zeros(self.value(v).shape()))
            .collect();
        grads[loss.0] = Some(vec![T::one(); self.value(loss).len()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (a, &b) in param_grads[id.0].data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Conv { x, w, b } => {
                    let (gx, gw, gb) = conv_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        self.rg(*x),
                    );
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads, *w, gw);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let shape = node.value.shape();
                    let (nb, nc) = (shape[0], shape[1]);
                    let s = node.value.spatial();
                    let gam = self.value(*gamma).data();
                    let mut gx = vec![T::zero(); g.len()];
                    let mut ggamma = vec![T::zero(); nc];
                    let mut gbeta = vec![T::zero(); nc];
                    let sn = T::of(s as f64);
                    for bi in 0..nb {
                        for ci in 0..nc {
                            let off = (bi * nc + ci) * s;
                            let gy = &g[off..off + s];
                            let h = &xhat[off..off + s];
                            let mut sum_g = T::zero();
                            let mut sum_gh = T::zero();
                            for p in 0..s {
                                sum_g += gy[p];
                                sum_gh += gy[p] * h[p];
                            }
                            ggamma[ci] += sum_gh;
                            gbeta[ci] += sum_g;
                            let scale = gam[ci] * inv_std[bi * nc + ci] / sn;
                            let gxs = &mut gx[off..off + s];
                            for p in 0..s {
                                gxs[p] = scale * (sn * gy[p] - sum_g - h[p] * sum_gh);
                            }
                        }
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.rg(*gamma) {
                        accumulate(&mut grads, *gamma, ggamma);
                    }
                    if self.rg(*beta) {
                        accumulate(&mut grads, *beta, gbeta);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x).data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gy, &v)| if v > T::zero() { gy } else { gy * *slope })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaxPool { x, argmax } => {
                    let xv = self.value(*x);
                    let s_in = xv.spatial();
                    let s_out = node.value.spatial();
                    let mut gx = vec![T::zero(); xv.len()];
                    for (k, (&gy, &am)) in g.iter().zip(argmax).enumerate() {
                        let plane = k / s_out;
                        gx[plane * s_in + am as usize] += gy;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Upsample { x, factor } => {
                    let xv = self.value(*x);
                    let [nb, nc, d, h, w] = xv.shape();
                    let [od, oh, ow] = node.value.spatial_shape();
                    let [fd, fh, fw] = *factor;
                    let s_in = d * h * w;
                    let s_out = od * oh * ow;
                    let mut gx = vec![T::zero(); xv.len()];
                    for plane in 0..nb * nc {
                        let src = &g[plane * s_out..(plane + 1) * s_out];
                        let dst = &mut gx[plane * s_in..(plane + 1) * s_in];
                        for z in 0..od {
                            for y in 0..oh {
                                let srow = (z * oh + y) * ow;
                                let drow = ((z / fd) * h + y / fh) * w;
                                for xx in 0..ow {
                                    dst[drow + xx / fw] += src[srow + xx];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat { parts } => {
                    let shape = node.value.shape();
                    let s = node.value.spatial();
                    let total_c = shape[1];
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = self.value(p).channels();
                        if self.rg(p) {
                            let mut gp = Vec::with_capacity(self.value(p).len());
                            for bi in 0..shape[0] {
                                let start = (bi * total_c + c0) * s;
                                gp.extend_from_slice(&g[start..start + pc * s]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        c0 += pc;
                    }
                }
                Op::Loss { x, grad } => {
                    let scale = g[0];
                    accumulate(&mut grads, *x, grad.iter().map(|&v| v * scale).collect());
                }
                Op::WeightedSum { terms } => {
                    for &(v, w) in terms {
                        if self.rg(v) {
                            accumulate(&mut grads, v, vec![g[0] * w]);
                        }
                    }
                }
            }
        }
        Gradients { grads: param_grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn is_pointwise(kernel: [usize; 3]) -> bool {
    kernel == [1, 1, 1]
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [nb, cin, d, h, wd] = x.shape();
    let [cout, _, kd, kh, kw] = w.shape();
    let s = d * h * wd;
    let geo = Geometry { cin, cout, dims: [d, h, wd], kernel: [kd, kh, kw] };
    let pointwise = is_pointwise(geo.kernel);
    let packed = if pointwise { Vec::new() } else { conv::pack_weights(w.data(), &geo) };
    let mut scratch = conv::Scratch::default();
    let mut out = Tensor::zeros([nb, cout, d, h, wd]);
    for bi in 0..nb {
        let o = &mut out.data_mut()[bi * cout * s..(bi + 1) * cout * s];
        for (co, chunk) in o.chunks_mut(s).enumerate() {
            chunk.fill(b.data()[co]);
        }
        let xi = x.item_data(bi);
        if pointwise {
            gemm(T::one(), MatRef::new(w.data(), cout, cin), MatRef::new(xi, cin, s), T::one(), o);
        } else {
            conv::forward_item(xi, &geo, &packed, o, &mut scratch);
        }
    }
    out
}

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &[T],
    need_gx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let [nb, cin, d, h, wd] = x.shape();
    let [cout, _, kd, kh, kw] = w.shape();
    let s = d * h * wd;
    let geo = Geometry { cin, cout, dims: [d, h, wd], kernel: [kd, kh, kw] };
    let tgeo = Geometry { cin: cout, cout: cin, ..geo };
    let pointwise = is_pointwise(geo.kernel);
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); cout];
    let mut gx = need_gx.then(|| vec![T::zero(); x.len()]);
    let wflip = if need_gx && !pointwise {
        conv::pack_weights(&conv::flipped_transpose(w.data(), &geo), &tgeo)
    } else {
        Vec::new()
    };
    let mut scratch = conv::Scratch::default();
    for bi in 0..nb {
        let go = &gout[bi * cout * s..(bi + 1) * cout * s];
        for (co, chunk) in go.chunks(s).enumerate() {
            gb[co] += chunk.iter().copied().sum::<T>();
        }
        let xi = x.item_data(bi);
        if pointwise {
            gemm(T::one(), MatRef::new(go, cout, s), MatRef::transpose_of(xi, s, cin), T::one(), &mut gw);
            if let Some(gx) = gx.as_mut() {
                let gxi = &mut gx[bi * cin * s..(bi + 1) * cin * s];
                gemm(T::one(), MatRef::transpose_of(w.data(), cin, cout), MatRef::new(go, cout, s), T::zero(), gxi);
            }
            continue;
        }
        if let Some(gx) = gx.as_mut() {
            conv::forward_item(go, &tgeo, &wflip, &mut gx[bi * cin * s..(bi + 1) * cin * s], &mut scratch);
        }
        conv::weight_grad_item(xi, go, &geo, &mut gw, &mut scratch);
    }
    (gx, gw, gb)
}

/// `KL(teacher || softmax(x / tau))` averaged over `(batch, voxel)` positions,
/// with the gradient with respect to `x`.
pub(crate) fn kl_teacher_student<T: Scalar>(teacher: &Tensor<T>, x: &Tensor<T>, tau: T) -> (T, Vec<T>) {
    let [nb, nc, ..] = x.shape();
    let s = x.spatial();
    let q = softmax_channels(x, tau);
    let positions = T::of((nb * s) as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); x.len()];
    let tiny = T::of(1e-12);
    for bi in 0..nb {
        for ci in 0..nc {
            let off = (bi * nc + ci) * s;
            for p in 0..s {
                let t = teacher.data()[off + p];
                let qv = q.data()[off + p];
                if t > T::zero() {
                    total += t * (t.ln() - qv.max(tiny).ln());
                }
                grad[off + p] = (qv - t) / (tau * positions);
            }
        }
    }
    (total / positions, grad)
}

/// Soft Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Cross-entropy and soft-Dice terms of the segmentation loss for class
/// probabilities `probs` (`[B, C, ...]`) against integer `labels` (`[B, ...]`).
pub fn seg_loss_terms<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<(T, T)> {
    let [nb, nc, ..] = probs.shape();
    let s = probs.spatial();
    check_labels(labels, nb * s, nc)?;
    let tiny = T::of(1e-12);
    let smooth = T::of(DICE_SMOOTH);
    let mut ce = T::zero();
    let mut dice_sum = T::zero();
    for bi in 0..nb {
        let lab = &labels[bi * s..(bi + 1) * s];
        for ci in 0..nc {
            let p = probs.plane(bi, ci);
            let mut inter = T::zero();
            let mut psum = T::zero();
            let mut gsum = T::zero();
            for (&pv, &l) in p.iter().zip(lab) {
                psum += pv;
                if l as usize == ci {
                    inter += pv;
                    gsum += T::one();
                    ce -= pv.max(tiny).ln();
                }
            }
            dice_sum += (T::of(2.0) * inter + smooth) / (psum + gsum + smooth);
        }
    }
    let ce = ce / T::of((nb * s) as f64);
    let dice = T::one() - dice_sum / T::of((nb * nc) as f64);
    Ok((ce, dice))
}

fn check_labels(labels: &[u8], expected: usize, n_classes: usize) -> Result<()> {
    if labels.len() != expected {
        return Err(CcsdError::ShapeMismatch {
            expected: vec![expected],
            actual: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(CcsdError::invalid(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    Ok(())
}

/// Segmentation loss value and its gradient with respect to the logits.
pub(crate) fn seg_loss_with_grad<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(T, Vec<T>)> {
    let [nb, nc, ..] = logits.shape();
    let s = logits.spatial();
    check_labels(labels, nb * s, nc)?;
    let probs = softmax_channels(logits, T::one());
    let (ce, dice) = seg_loss_terms(&probs, labels)?;
    let smooth = T::of(DICE_SMOOTH);
    let two = T::of(2.0);
    let n_pos = T::of((nb * s) as f64);
    let n_dice = T::of((nb * nc) as f64);
    // gradient with respect to probabilities from the Dice term
    let mut gp = vec![T::zero(); logits.len()];
    for bi in 0..nb {
        let lab = &labels[bi * s..(bi + 1) * s];
        for ci in 0..nc {
            let p = probs.plane(bi, ci);
            let mut inter = T::zero();
            let mut union = smooth;
            for (&pv, &l) in p.iter().zip(lab) {
                union += pv;
                if l as usize == ci {
                    inter += pv;
                    union += T::one();
                }
            }
            let num = two * inter + smooth;
            let off = (bi * nc + ci) * s;
            for (k, &l) in lab.iter().enumerate() {
                let g = if l as usize == ci { T::one() } else { T::zero() };
                gp[off + k] = -(two * g * union - num) / (union * union * n_dice);
            }
        }
    }
    // softmax backward for the Dice part, plus the closed-form cross-entropy part
    let mut grad = vec![T::zero(); logits.len()];
    for bi in 0..nb {
        for k in 0..s {
            let mut dot = T::zero();
            for ci in 0..nc {
                let idx = (bi * nc + ci) * s + k;
                dot += probs.data()[idx] * gp[idx];
            }
            let label = labels[bi * s + k] as usize;
            for ci in 0..nc {
                let idx = (bi * nc + ci) * s + k;
                let p = probs.data()[idx];
                let onehot = if ci == label { T::one() } else { T::zero() };
                grad[idx] = p * (gp[idx] - dot) + (p - onehot) / n_pos;
            }
        }
    }
    Ok((ce + dice, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_tensor(shape: Shape, seed: &mut u64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| lcg(seed)).collect()).unwrap()
    }

    /// Direct-sum convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let [nb, cin, d, h, wd] = x.shape();
        let [cout, _, kd, kh, kw] = w.shape();
        let mut out = Tensor::zeros([nb, cout, d, h, wd]);
        for bi in 0..nb {
            for co in 0..cout {
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..wd {
                            let mut acc = b.data()[co];
                            for ci in 0..cin {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for c in 0..kw {
                                            let iz = z as isize + a as isize - (kd / 2) as isize;
                                            let iy = y as isize + bb as isize - (kh / 2) as isize;
                                            let ix = xx as isize + c as isize - (kw / 2) as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            let xv = x.plane(bi, ci)[(iz as usize * h + iy as usize) * wd + ix as usize];
                                            let wv = w.data()[(((co * cin + ci) * kd + a) * kh + bb) * kw + c];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out.plane_mut(bi, co)[(z * h + y) * wd + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut seed = 7;
        for (xs, ws) in [
            ([2, 3, 4, 5, 6], [4, 3, 3, 3, 3]),
            ([1, 2, 1, 6, 5], [3, 2, 1, 3, 3]),
            ([2, 4, 3, 3, 3], [2, 4, 1, 1, 1]),
        ] {
            let x = rand_tensor(xs, &mut seed);
            let w = rand_tensor(ws, &mut seed);
            let b = rand_tensor([1, ws[0], 1, 1, 1], &mut seed);
            let got = conv_forward(&x, &w, &b);
            let want = naive_conv(&x, &w, &b);
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    /// Scalar objective `sum(r * op(x))` against central differences.
    fn check_unary(build: impl Fn(&mut Graph<f64>, Var) -> Var, shape: Shape) {
        let mut seed = 99;
        let x0 = rand_tensor(shape, &mut seed);
        let store = {
            let mut s = ParamStore::new();
            s.add("x", x0.clone());
            s
        };
        let eval = |store: &ParamStore<f64>| -> (f64, Gradients<f64>) {
            let mut g = Graph::new(store);
            let x = g.param(ParamId(0));
            let y = build(&mut g, x);
            let mut rseed = 5;
            let weights = rand_tensor(g.value(y).shape(), &mut rseed);
            let n = g.value(y).len();
            let value: f64 = (0..n).map(|i| g.value(y).data()[i] * weights.data()[i]).sum();
            let loss = g.push(
                Tensor::scalar(value),
                Op::Loss {
                    x: y,
                    grad: weights.data().to_vec(),
                },
                true,
            );
            (value, g.backward(loss))
        };
        let (_, grads) = eval(&store);
        let eps = 1e-6;
        for i in 0..x0.len() {
            let mut sp = store.clone();
            sp.get_mut(ParamId(0)).data_mut()[i] += eps;
            let mut sm = store.clone();
            sm.get_mut(ParamId(0)).data_mut()[i] -= eps;
            let fd = (eval(&sp).0 - eval(&sm).0) / (2.0 * eps);
            let an = grads.get(ParamId(0)).data()[i];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "i={i} fd={fd} an={an}");
        }
    }

    #[test]
    fn instance_norm_gradient() {
        check_unary(
            |g, x| {
                let gamma = g.input(Tensor::from_vec([1, 2, 1, 1, 1], vec![1.5, -0.7]).unwrap());
                let beta = g.input(Tensor::from_vec([1, 2, 1, 1, 1], vec![0.1, 0.2]).unwrap());
                g.instance_norm(x, gamma, beta)
            },
            [2, 2, 1, 3, 3],
        );
    }

    #[test]
    fn pool_upsample_concat_gradients() {
        check_unary(|g, x| g.max_pool(x, [1, 2, 2]).unwrap(), [1, 2, 1, 4, 4]);
        check_unary(|g, x| g.upsample(x, [2, 2, 2]), [1, 2, 2, 2, 2]);
        check_unary(
            |g, x| {
                let y = g.leaky_relu(x, 0.01);
                g.concat(&[x, y, x]).unwrap()
            },
            [2, 2, 1, 2, 3],
        );
    }

    #[test]
    fn conv_gradient_wrt_input() {
        check_unary(
            |g, x| {
                let mut seed = 3;
                let w = g.input(rand_tensor([3, 2, 3, 3, 3], &mut seed));
                let b = g.input(rand_tensor([1, 3, 1, 1, 1], &mut seed));
                g.conv(x, w, b).unwrap()
            },
            [2, 2, 3, 4, 3],
        );
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut seed = 11;
        let logits = rand_tensor([2, 3, 1, 2, 3], &mut seed).map(|v| v * 3.0);
        let labels: Vec<u8> = vec![0, 1, 2, 2, 1, 0, 1, 1, 0, 2, 2, 2];
        let teacher = softmax_channels(&rand_tensor([2, 3, 1, 2, 3], &mut seed), 1.0);
        let (_, g_seg) = seg_loss_with_grad(&logits, &labels).unwrap();
        let (_, g_kl) = kl_teacher_student(&teacher, &logits, 2.0);
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[i] += eps;
            let mut m = logits.clone();
            m.data_mut()[i] -= eps;
            let fd_seg = (seg_loss_with_grad(&p, &labels).unwrap().0 - seg_loss_with_grad(&m, &labels).unwrap().0) / (2.0 * eps);
            let fd_kl = (kl_teacher_student(&teacher, &p, 2.0).0 - kl_teacher_student(&teacher, &m, 2.0).0) / (2.0 * eps);
            assert!((fd_seg - g_seg[i]).abs() < 1e-7, "seg {i}: {fd_seg} vs {}", g_seg[i]);
            assert!((fd_kl - g_kl[i]).abs() < 1e-7, "kl {i}: {fd_kl} vs {}", g_kl[i]);
        }
    }

    #[test]
    fn seg_loss_rejects_bad_labels() {
        let logits = Tensor::<f64>::zeros([1, 2, 1, 1, 2]);
        assert!(seg_loss_with_grad(&logits, &[0, 2]).is_err());
        assert!(seg_loss_with_grad(&logits, &[0]).is_err());
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec([1, 2, 1, 1, 1], vec![0.3, -0.2]).unwrap());
        let mut g = Graph::new(&store);
        let x = g.param(id);
        let d = g.detach(x);
        let teacher = softmax_channels(g.value(x), 1.0);
        let kl = g.kl_from_teacher(d, &teacher, 1.0).unwrap();
        assert!(!g.requires_grad(kl));
        let total = g.weighted_sum(&[(kl, 1.0)]);
        let grads = g.backward(total);
        assert!(grads.get(id).data().iter().all(|&v| v == 0.0));
    }
}

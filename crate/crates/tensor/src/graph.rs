//! Reverse-mode autograd tape.

use crate::kernels::{self, AttnGeom, ConvGeom};
use crate::{ParamId, ParamStore, Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    AddPerSample(Var, Var),
    ScalePerSample(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Relu(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Reshape(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    SpatialMean(Var),
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T> },
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every parameter bound on the tape.
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.all_finite())
    }
}

/// A single forward pass. Parameters are read from `store`; when `track` is
/// false no backward context is kept.
pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    bound: Vec<Option<Var>>,
    track: bool,
}

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [n, h, w, c] => Ok((*n, *h, *w, *c)),
        _ => Err(TensorError::Shape(format!("expected NHWC tensor, got {shape:?}"))),
    }
}

fn silu<T: Real>(v: T) -> T {
    v * sigmoid(v)
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, track: bool) -> Self {
        Self { store, nodes: Vec::new(), bound: vec![None; store.len()], track }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn tracking(&self) -> bool {
        self.track
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = self.track && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives gradients.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Input, false)
    }

    /// Bind a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push_raw(p.value.clone(), Op::Param(id), self.track && p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `x[..., c] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        self.value(b).expect_shape(&[c])?;
        let mut out = self.value(x).clone();
        kernels::add_row_bias(out.data_mut(), self.value(b).data());
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    fn per_sample_dims(&self, x: Var, e: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        let n = xs[0];
        let c = *xs.last().unwrap_or(&0);
        self.value(e).expect_shape(&[n, c])?;
        let inner = self.value(x).numel() / (n * c).max(1);
        Ok((n, inner, c))
    }

    /// `x[n, ..., c] + e[n, c]`.
    pub fn add_per_sample(&mut self, x: Var, e: Var) -> Result<Var> {
        let (n, inner, c) = self.per_sample_dims(x, e)?;
        let mut out = self.value(x).clone();
        let ev = self.value(e).data();
        for b in 0..n {
            let row = &ev[b * c..(b + 1) * c];
            for px in out.data_mut()[b * inner * c..(b + 1) * inner * c].chunks_exact_mut(c) {
                for (v, &a) in px.iter_mut().zip(row) {
                    *v += a;
                }
            }
        }
        Ok(self.push(out, Op::AddPerSample(x, e), &[x, e]))
    }

    /// `x[n, ..., c] * g[n, c]`.
    pub fn scale_per_sample(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, inner, c) = self.per_sample_dims(x, g)?;
        let mut out = self.value(x).clone();
        let gv = self.value(g).data();
        for b in 0..n {
            let row = &gv[b * c..(b + 1) * c];
            for px in out.data_mut()[b * inner * c..(b + 1) * inner * c].chunks_exact_mut(c) {
                for (v, &a) in px.iter_mut().zip(row) {
                    *v *= a;
                }
            }
        }
        Ok(self.push(out, Op::ScalePerSample(x, g), &[x, g]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    /// `x[..., k] · w[k, m] (+ b[m])`, acting on the trailing dimension.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let k = xv.last_dim();
        let [wk, m] = wv.shape() else {
            return Err(TensorError::Shape(format!("linear weight must be 2-d, got {:?}", wv.shape())));
        };
        let (wk, m) = (*wk, *m);
        if wk != k {
            return Err(TensorError::Shape(format!("linear: input dim {k} vs weight {:?}", wv.shape())));
        }
        let rows = xv.rows();
        let mut out = vec![T::zero(); rows * m];
        crate::gemm::gemm(
            T::one(),
            crate::gemm::Mat::new(xv.data(), rows, k),
            crate::gemm::Mat::new(wv.data(), k, m),
            T::zero(),
            crate::gemm::MatMut::new(&mut out, rows, m),
        );
        if let Some(b) = b {
            self.value(b).expect_shape(&[m])?;
            kernels::add_row_bias(&mut out, self.value(b).data());
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank ≥ 1") = m;
        let out = Tensor::from_vec(shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &parents))
    }

    /// Stride-1 same-padded convolution; weights are `[k, k, cin, cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, h, wd, cin) = dims4(self.shape(x))?;
        let (k, cout) = match self.shape(w) {
            [k1, k2, ci, co] if k1 == k2 && *ci == cin && k1 % 2 == 1 => (*k1, *co),
            s => {
                return Err(TensorError::Shape(format!("conv weight {s:?} incompatible with input channels {cin}")))
            }
        };
        if let Some(b) = b {
            self.value(b).expect_shape(&[cout])?;
        }
        let geom = ConvGeom { n, h, w: wd, cin, cout, k };
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            geom,
        );
        let out = Tensor::from_vec([n, h, wd, cout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let cols = if self.track { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv { x, w, b, geom, cols }, &parents))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, h, w, c) = dims4(self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Shape(format!("avg_pool2 needs even sizes, got {h}×{w}")));
        }
        let out = kernels::avg_pool2(self.value(x).data(), n, h, w, c);
        let out = Tensor::from_vec([n, h / 2, w / 2, c], out)?;
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, h, w, c) = dims4(self.shape(x))?;
        let out = kernels::upsample2(self.value(x).data(), n, h, w, c);
        let out = Tensor::from_vec([n, 2 * h, 2 * w, c], out)?;
        Ok(self.push(out, Op::Upsample2(x), &[x]))
    }

    /// Concatenate along the trailing dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::Shape(format!("concat: {sa:?} vs {sb:?}")));
        }
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for (ra, rb) in av.data().chunks_exact(ca).zip(bv.data().chunks_exact(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("rank ≥ 1") = ca + cb;
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Group normalization over `[n, ..., c]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let n = shape[0];
        let c = xv.last_dim();
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Shape(format!("group_norm: {c} channels not divisible by {groups}")));
        }
        self.value(gamma).expect_shape(&[c])?;
        self.value(beta).expect_shape(&[c])?;
        let s = xv.numel() / (n * c);
        let (y, mean, rstd) = kernels::group_norm_forward(
            xv.data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            s,
            c,
            groups,
        );
        let out = Tensor::from_vec(shape, y)?;
        let (mean, rstd) = if self.track { (mean, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, mean, rstd }, &[x, gamma, beta]))
    }

    /// Mean over all axes between the batch and channel axes: `[n, ..., c] → [n, c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.shape()[0];
        let c = xv.last_dim();
        let s = xv.numel() / (n * c);
        let inv = T::one() / T::lit(s as f64);
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            for px in xv.data()[b * s * c..(b + 1) * s * c].chunks_exact(c) {
                for (o, &v) in out[b * c..(b + 1) * c].iter_mut().zip(px) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::from_vec([n, c], out)?;
        Ok(self.push(out, Op::SpatialMean(x), &[x]))
    }

    /// Multi-head scaled dot-product attention. `q: [b, tq, c]`,
    /// `k, v: [b, tk, c]`. `key_lens` masks trailing keys per batch element.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_lens: Option<Vec<usize>>) -> Result<Var> {
        let (qs, ks) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        let (b, tq, c) = match qs[..] {
            [b, tq, c] => (b, tq, c),
            _ => return Err(TensorError::Shape(format!("attention query must be [b, t, c], got {qs:?}"))),
        };
        let tk = match ks[..] {
            [kb, tk, kc] if kb == b && kc == c => tk,
            _ => return Err(TensorError::Shape(format!("attention keys {ks:?} vs queries {qs:?}"))),
        };
        self.value(v).expect_shape(&ks)?;
        if heads == 0 || c % heads != 0 {
            return Err(TensorError::Shape(format!("{c} channels not divisible into {heads} heads")));
        }
        if let Some(l) = &key_lens {
            if l.len() != b {
                return Err(TensorError::Shape(format!("key_lens has {} entries for batch {b}", l.len())));
            }
        }
        let geom = AttnGeom { b, tq, tk, c, heads, key_lens };
        let (out, probs) =
            kernels::attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), &geom);
        let out = Tensor::from_vec([b, tq, c], out)?;
        let probs = if self.track { probs } else { Vec::new() };
        Ok(self.push(out, Op::Attention { q, k, v, geom, probs }, &[q, k, v]))
    }

    /// Mean squared error, a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_shape(bv.shape())?;
        let n = T::lit(av.numel() as f64);
        let s: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.track {
            return Err(TensorError::Graph("backward on an untracked graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Graph(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut params: Vec<Option<Tensor<T>>> = vec![None; self.store.len()];
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, gy, &mut grads, &mut params)?;
        }
        Ok(Gradients { params })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        gy: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        params: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, g: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(g),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                params[id.0] = Some(Tensor::from_vec(node.value.shape().to_vec(), gy)?);
            }
            Op::Add(a, b) => {
                acc(*b, gy.clone());
                acc(*a, gy);
            }
            Op::Sub(a, b) => {
                acc(*b, gy.iter().map(|&g| -g).collect());
                acc(*a, gy);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, gy.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                acc(*b, gy.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(a, s) => acc(*a, gy.iter().map(|&g| g * *s).collect()),
            Op::AddBias(x, b) => {
                let c = self.nodes[b.0].value.numel();
                acc(*b, kernels::column_sums(&gy, c));
                acc(*x, gy);
            }
            Op::AddPerSample(x, e) => {
                let (n, inner, c) = self.per_sample_dims(*x, *e)?;
                let mut ge = vec![T::zero(); n * c];
                for b in 0..n {
                    for px in gy[b * inner * c..(b + 1) * inner * c].chunks_exact(c) {
                        for (o, &g) in ge[b * c..(b + 1) * c].iter_mut().zip(px) {
                            *o += g;
                        }
                    }
                }
                acc(*e, ge);
                acc(*x, gy);
            }
            Op::ScalePerSample(x, s) => {
                let (n, inner, c) = self.per_sample_dims(*x, *s)?;
                let (xv, sv) = (val(*x), val(*s));
                let mut gs = vec![T::zero(); n * c];
                let mut gx = vec![T::zero(); gy.len()];
                for b in 0..n {
                    let span = b * inner * c..(b + 1) * inner * c;
                    let srow = &sv[b * c..(b + 1) * c];
                    for ((gp, xp), gxp) in gy[span.clone()]
                        .chunks_exact(c)
                        .zip(xv[span.clone()].chunks_exact(c))
                        .zip(gx[span].chunks_exact_mut(c))
                    {
                        for j in 0..c {
                            gs[b * c + j] += gp[j] * xp[j];
                            gxp[j] = gp[j] * srow[j];
                        }
                    }
                }
                acc(*s, gs);
                acc(*x, gx);
            }
            Op::Silu(x) => {
                let xv = val(*x);
                acc(
                    *x,
                    gy.iter()
                        .zip(xv)
                        .map(|(&g, &v)| {
                            let s = sigmoid(v);
                            g * s * (T::one() + v * (T::one() - s))
                        })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                acc(*x, gy.iter().zip(yv).map(|(&g, &s)| g * s * (T::one() - s)).collect());
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, gy.iter().zip(xv).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect());
            }
            Op::Linear { x, w, b } => {
                use crate::gemm::{gemm, Mat, MatMut};
                let xt = &self.nodes[x.0].value;
                let wt = &self.nodes[w.0].value;
                let (k, m) = (wt.shape()[0], wt.shape()[1]);
                let rows = xt.rows();
                if self.nodes[w.0].needs_grad {
                    let mut gw = vec![T::zero(); k * m];
                    gemm(
                        T::one(),
                        Mat::new(xt.data(), rows, k).t(),
                        Mat::new(&gy, rows, m),
                        T::zero(),
                        MatMut::new(&mut gw, k, m),
                    );
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    acc(*b, kernels::column_sums(&gy, m));
                }
                if self.nodes[x.0].needs_grad {
                    let mut gx = vec![T::zero(); rows * k];
                    gemm(
                        T::one(),
                        Mat::new(&gy, rows, m),
                        Mat::new(wt.data(), k, m).t(),
                        T::zero(),
                        MatMut::new(&mut gx, rows, k),
                    );
                    acc(*x, gx);
                }
            }
            Op::Conv { x, w, b, geom, cols } => {
                let (gx, gw, gb) = kernels::conv2d_backward(&gy, cols, val(*w), *geom);
                acc(*w, gw);
                if let Some(b) = b {
                    acc(*b, gb);
                }
                acc(*x, gx);
            }
            Op::AvgPool2(x) => {
                let (n, h, w, c) = dims4(self.shape(*x))?;
                acc(*x, kernels::avg_pool2_backward(&gy, n, h, w, c));
            }
            Op::Upsample2(x) => {
                let (n, h, w, c) = dims4(self.shape(*x))?;
                acc(*x, kernels::upsample2_backward(&gy, n, h, w, c));
            }
            Op::Concat(a, b) => {
                let ca = self.nodes[a.0].value.last_dim();
                let cb = self.nodes[b.0].value.last_dim();
                let rows = gy.len() / (ca + cb);
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in gy.chunks_exact(ca + cb) {
                    ga.extend_from_slice(&r[..ca]);
                    gb.extend_from_slice(&r[ca..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Reshape(x) => acc(*x, gy),
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let xt = &self.nodes[x.0].value;
                let n = xt.shape()[0];
                let c = xt.last_dim();
                let s = xt.numel() / (n * c);
                let (gx, gg, gb) =
                    kernels::group_norm_backward(&gy, xt.data(), val(*gamma), mean, rstd, n, s, c, *groups);
                acc(*gamma, gg);
                acc(*beta, gb);
                acc(*x, gx);
            }
            Op::SpatialMean(x) => {
                let xt = &self.nodes[x.0].value;
                let n = xt.shape()[0];
                let c = xt.last_dim();
                let s = xt.numel() / (n * c);
                let inv = T::one() / T::lit(s as f64);
                let mut gx = vec![T::zero(); xt.numel()];
                for b in 0..n {
                    let grow = &gy[b * c..(b + 1) * c];
                    for px in gx[b * s * c..(b + 1) * s * c].chunks_exact_mut(c) {
                        for (o, &g) in px.iter_mut().zip(grow) {
                            *o = g * inv;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Attention { q, k, v, geom, probs } => {
                let (gq, gk, gv) = kernels::attention_backward(&gy, val(*q), val(*k), val(*v), probs, geom);
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scale = gy[0] * T::lit(2.0) / T::lit(av.len() as f64);
                let ga: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| (x - y) * scale).collect();
                acc(*b, ga.iter().map(|&g| -g).collect());
                acc(*a, ga);
            }
        }
        Ok(())
    }
}

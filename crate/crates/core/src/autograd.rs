//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Nodes whose inputs never require gradients are skipped during the sweep,
//! which keeps frozen networks (teacher passes, the discriminator's feature
//! extractor) cheap while still letting gradients flow *through* them.

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    SumChannels(Var),
    MeanSpatial(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
    },
    Silu(Var),
    Relu(Var),
    Square(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ToTokens(Var),
    FromTokens(Var),
    ConcatChannels(Var, Var),
    Upsample2x(Var),
    Reshape(Var),
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfold one sample `(c, h, w)` into `(c*k*k, ho*wo)` columns.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, cols: &mut [f64]) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let n = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, dx: &mut [f64]) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let n = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf whose gradient is wanted (parameters, probed inputs).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `mul * x + add`
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let out = self.value(x).map(|v| mul * v + add);
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine(x, mul), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn channel_dims(&self, x: Var, e: Var) -> Result<(usize, usize, usize)> {
        let xs = self.value(x).shape();
        let es = self.value(e).shape();
        if xs.len() < 2 || es != &xs[..2] {
            return Err(Error::ShapeMismatch {
                expected: xs.get(..2).unwrap_or(xs).to_vec(),
                got: es.to_vec(),
            });
        }
        let rest: usize = xs[2..].iter().product();
        Ok((xs[0], xs[1], rest))
    }

    /// `x (B, C, ...) + e (B, C)` broadcast over trailing dims.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (b, c, rest) = self.channel_dims(x, e)?;
        let mut out = self.value(x).clone();
        let ev = self.value(e).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(rest).enumerate() {
            let add = ev[i % (b * c)];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        let rg = self.rg(&[x, e]);
        Ok(self.push(out, Op::AddChannel(x, e), rg))
    }

    /// `x (B, C, ...) * e (B, C)` broadcast over trailing dims.
    pub fn mul_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (b, c, rest) = self.channel_dims(x, e)?;
        let mut out = self.value(x).clone();
        let ev = self.value(e).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(rest).enumerate() {
            let m = ev[i % (b * c)];
            chunk.iter_mut().for_each(|v| *v *= m);
        }
        let rg = self.rg(&[x, e]);
        Ok(self.push(out, Op::MulChannel(x, e), rg))
    }

    /// `(B, C, H, W) -> (B, 1, H, W)`
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * hw];
        for bi in 0..b {
            for ci in 0..c {
                let src = &xv[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for (o, s) in out[bi * hw..(bi + 1) * hw].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![b, 1, h, w], out), Op::SumChannels(x), rg))
    }

    /// `(B, C, H, W) -> (B, C)`
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = (h * w) as f64;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().sum::<f64>() / hw)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![b, c], out), Op::MeanSpatial(x), rg))
    }

    /// 2-d convolution, NCHW input, weight `(Cout, Cin, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bn, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return Err(Error::ShapeMismatch {
                expected: vec![cout, cin, k, k],
                got: self.value(w).shape().to_vec(),
            });
        }
        if let Some(b) = b {
            ensure_shape(&[cout], self.value(b).shape())?;
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::InvalidArgument("conv kernel larger than input".into()));
        }
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let kk = cin * k * k;
        let n = ho * wo;
        let mut out = vec![0.0; bn * cout * n];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = if is_pointwise(k, stride, pad) {
            Vec::new()
        } else {
            vec![0.0; kk * n]
        };
        for bi in 0..bn {
            let xs = &xv[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let dst = &mut out[bi * cout * n..(bi + 1) * cout * n];
            if is_pointwise(k, stride, pad) {
                gemm(cout, kk, n, 1.0, wv, false, xs, false, 0.0, dst);
            } else {
                im2col(xs, cin, h, wd, k, stride, pad, &mut cols);
                gemm(cout, kk, n, 1.0, wv, false, &cols, false, 0.0, dst);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (i, chunk) in out.chunks_mut(n).enumerate() {
                let add = bv[i % cout];
                chunk.iter_mut().for_each(|v| *v += add);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::from_parts(vec![bn, cout, ho, wo], out),
            Op::Conv2d { x, w, b, stride, pad },
            rg,
        ))
    }

    /// `x (..., in) @ w^T + b`, weight `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let din = *xs.last().ok_or_else(|| Error::InvalidArgument("linear on scalar".into()))?;
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::ShapeMismatch {
                expected: vec![ws.first().copied().unwrap_or(0), din],
                got: ws,
            });
        }
        let dout = ws[0];
        if let Some(b) = b {
            ensure_shape(&[dout], self.value(b).shape())?;
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        gemm(rows, din, dout, 1.0, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, rg))
    }

    /// Single-head scaled dot-product attention.
    /// `q (B, N, d)`, `k (B, M, d)`, `v (B, M, e)` -> `(B, N, e)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let qs = self.value(q).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        let vs = self.value(v).shape().to_vec();
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || ks[0] != qs[0] || ks[2] != qs[2] || vs[0] != qs[0] || vs[1] != ks[1] {
            return Err(Error::ShapeMismatch { expected: qs, got: ks });
        }
        let (b, n, d) = (qs[0], qs[1], qs[2]);
        let (m, e) = (ks[1], vs[2]);
        let (probs, out) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            b,
            n,
            m,
            d,
            e,
        );
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(Tensor::from_parts(vec![b, n, e], out), Op::Attention { q, k, v, probs }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Square(x), rg)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        ensure_shape(&[c], self.value(gamma).shape())?;
        ensure_shape(&[c], self.value(beta).shape())?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidArgument(format!("{c} channels not divisible into {groups} groups")));
        }
        let per = (c / groups) * h * w;
        let hw = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; b * groups];
        let mut out = vec![0.0; xv.len()];
        for (gi, chunk) in xv.chunks(per).enumerate() {
            let mean = chunk.iter().sum::<f64>() / per as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let r = 1.0 / (var + 1e-5).sqrt();
            rstd[gi] = r;
            for (j, &v) in chunk.iter().enumerate() {
                let idx = gi * per + j;
                let ch = (idx / hw) % c;
                let xh = (v - mean) * r;
                xhat[idx] = xh;
                out[idx] = xh * gv[ch] + bv[ch];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(vec![b, c, h, w], out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// `(B, C, H, W) -> (B, H*W, C)`
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let out = transpose_batch(self.value(x).data(), b, c, h * w);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![b, h * w, c], out), Op::ToTokens(x), rg))
    }

    /// `(B, H*W, C) -> (B, C, H, W)`
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::ShapeMismatch {
                expected: vec![s.first().copied().unwrap_or(0), h * w, s.last().copied().unwrap_or(0)],
                got: s,
            });
        }
        let (b, c) = (s[0], s[2]);
        let out = transpose_batch(self.value(x).data(), b, h * w, c);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![b, c, h, w], out), Op::FromTokens(x), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * h2 * w2];
        for p in 0..b * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(p * h2 + y) * w2 + xx] = xv[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![b, c, h2, w2], out), Op::Upsample2x(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.backward_with(root, Tensor::full(self.value(root).shape(), 1.0))
    }

    /// Backpropagate an arbitrary upstream gradient from `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Grads> {
        ensure_shape(self.value(root).shape(), seed.shape())?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.mul(self.value(*b)).expect("shape"));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.mul(self.value(*a)).expect("shape"));
                }
            }
            Op::Affine(x, m) => accumulate(grads, *x, g.scale(*m)),
            Op::AddChannel(x, e) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*e) {
                    let ne = self.value(*e).len();
                    let rest = g.len() / ne;
                    let de: Vec<f64> = g.data().chunks(rest).map(|c| c.iter().sum()).collect();
                    accumulate(grads, *e, Tensor::from_parts(self.value(*e).shape().to_vec(), de));
                }
            }
            Op::MulChannel(x, e) => {
                let ne = self.value(*e).len();
                let rest = g.len() / ne;
                let ev = self.value(*e).data();
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for (j, chunk) in dx.data_mut().chunks_mut(rest).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= ev[j]);
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*e) {
                    let de: Vec<f64> = g
                        .data()
                        .chunks(rest)
                        .zip(self.value(*x).data().chunks(rest))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(grads, *e, Tensor::from_parts(self.value(*e).shape().to_vec(), de));
                }
            }
            Op::SumChannels(x) => {
                let (b, c, h, w) = self.value(*x).dims4().expect("4d");
                let hw = h * w;
                let mut dx = vec![0.0; b * c * hw];
                for bi in 0..b {
                    let src = &g.data()[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        dx[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].copy_from_slice(src);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(vec![b, c, h, w], dx));
            }
            Op::MeanSpatial(x) => {
                let (b, c, h, w) = self.value(*x).dims4().expect("4d");
                let hw = h * w;
                let mut dx = Vec::with_capacity(b * c * hw);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                accumulate(grads, *x, Tensor::from_parts(vec![b, c, h, w], dx));
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv_backward(*x, *w, *b, *stride, *pad, g, grads),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (dout, din) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / din;
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * din];
                    gemm(rows, dout, din, 1.0, g.data(), false, wv.data(), false, 0.0, &mut dx);
                    accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, rows, din, 1.0, g.data(), true, xv.data(), false, 0.0, &mut dw);
                    accumulate(grads, *w, Tensor::from_parts(vec![dout, din], dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; dout];
                        for row in g.data().chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        accumulate(grads, *b, Tensor::from_parts(vec![dout], db));
                    }
                }
            }
            Op::Attention { q, k, v, probs } => self.attention_backward(*q, *k, *v, probs, g, grads),
            Op::Silu(x) => {
                let dx = self.value(*x).zip_map(g, |xv, gv| gv * silu_grad(xv)).expect("shape");
                accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .zip_map(g, |xv, gv| if xv > 0.0 { gv } else { 0.0 })
                    .expect("shape");
                accumulate(grads, *x, dx);
            }
            Op::Square(x) => {
                let dx = self.value(*x).zip_map(g, |xv, gv| 2.0 * xv * gv).expect("shape");
                accumulate(grads, *x, dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (b, c, h, w) = self.value(*x).dims4().expect("4d");
                let hw = h * w;
                let per = (c / groups) * hw;
                let gv = self.value(*gamma).data();
                let gd = g.data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for idx in 0..gd.len() {
                        let ch = (idx / hw) % c;
                        dgamma[ch] += gd[idx] * xhat[idx];
                        dbeta[ch] += gd[idx];
                    }
                    if self.wants(*gamma) {
                        accumulate(grads, *gamma, Tensor::from_parts(vec![c], dgamma));
                    }
                    if self.wants(*beta) {
                        accumulate(grads, *beta, Tensor::from_parts(vec![c], dbeta));
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for gi in 0..b * groups {
                        let base = gi * per;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..per {
                            let idx = base + j;
                            let d = gd[idx] * gv[(idx / hw) % c];
                            sum_d += d;
                            sum_dx += d * xhat[idx];
                        }
                        let n = per as f64;
                        for j in 0..per {
                            let idx = base + j;
                            let d = gd[idx] * gv[(idx / hw) % c];
                            dx[idx] = rstd[gi] / n * (n * d - sum_d - xhat[idx] * sum_dx);
                        }
                    }
                    accumulate(grads, *x, Tensor::from_parts(vec![b, c, h, w], dx));
                }
            }
            Op::ToTokens(x) => {
                let (b, c, h, w) = self.value(*x).dims4().expect("4d");
                let dx = transpose_batch(g.data(), b, h * w, c);
                accumulate(grads, *x, Tensor::from_parts(vec![b, c, h, w], dx));
            }
            Op::FromTokens(x) => {
                let s = self.value(*x).shape().to_vec();
                let dx = transpose_batch(g.data(), s[0], s[2], s[1]);
                accumulate(grads, *x, Tensor::from_parts(s, dx));
            }
            Op::ConcatChannels(a, b) => {
                let (bn, ca, h, w) = self.value(*a).dims4().expect("4d");
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(bn * ca * hw);
                let mut db = Vec::with_capacity(bn * cb * hw);
                for bi in 0..bn {
                    let base = bi * (ca + cb) * hw;
                    da.extend_from_slice(&g.data()[base..base + ca * hw]);
                    db.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::from_parts(vec![bn, ca, h, w], da));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::from_parts(vec![bn, cb, h, w], db));
                }
            }
            Op::Upsample2x(x) => {
                let (b, c, h, w) = self.value(*x).dims4().expect("4d");
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            dx[(p * h + y / 2) * w + xx / 2] += g.data()[(p * h2 + y) * w2 + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(vec![b, c, h, w], dx));
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshape(self.value(*x).shape()).expect("reshape");
                accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g.data()[0] / n));
            }
            Op::Sum(x) => {
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g.data()[0]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (bn, cin, h, wd) = self.value(x).dims4().expect("4d");
        let (cout, _, k, _) = self.value(w).dims4().expect("4d");
        let (_, _, ho, wo) = g.dims4().expect("4d");
        let n = ho * wo;
        let kk = cin * k * k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let pointwise = is_pointwise(k, stride, pad);
        let mut dw = if want_w { vec![0.0; cout * kk] } else { Vec::new() };
        let mut dx = if want_x { vec![0.0; bn * cin * h * wd] } else { Vec::new() };
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * n] };
        let mut dcols = vec![0.0; kk * n];
        for bi in 0..bn {
            let gs = &g.data()[bi * cout * n..(bi + 1) * cout * n];
            let xs = &xv[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            if want_w {
                if pointwise {
                    gemm(cout, n, kk, 1.0, gs, false, xs, true, 1.0, &mut dw);
                } else {
                    im2col(xs, cin, h, wd, k, stride, pad, &mut cols);
                    gemm(cout, n, kk, 1.0, gs, false, &cols, true, 1.0, &mut dw);
                }
            }
            if want_x {
                let dxs = &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                if pointwise {
                    gemm(kk, cout, n, 1.0, wv, true, gs, false, 1.0, dxs);
                } else {
                    gemm(kk, cout, n, 1.0, wv, true, gs, false, 0.0, &mut dcols);
                    col2im(&dcols, cin, h, wd, k, stride, pad, dxs);
                }
            }
        }
        if want_x {
            accumulate(grads, x, Tensor::from_parts(vec![bn, cin, h, wd], dx));
        }
        if want_w {
            accumulate(grads, w, Tensor::from_parts(vec![cout, cin, k, k], dw));
        }
        if let Some(b) = b {
            if self.wants(b) {
                let mut db = vec![0.0; cout];
                for (i, chunk) in g.data().chunks(n).enumerate() {
                    db[i % cout] += chunk.iter().sum::<f64>();
                }
                accumulate(grads, b, Tensor::from_parts(vec![cout], db));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, q: Var, k: Var, v: Var, probs: &[f64], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let qs = self.value(q).shape();
        let (b, n, d) = (qs[0], qs[1], qs[2]);
        let m = self.value(k).shape()[1];
        let e = self.value(v).shape()[2];
        let scale = 1.0 / (d as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut dq = vec![0.0; b * n * d];
        let mut dk = vec![0.0; b * m * d];
        let mut dv = vec![0.0; b * m * e];
        let mut dp = vec![0.0; n * m];
        for bi in 0..b {
            let p = &probs[bi * n * m..(bi + 1) * n * m];
            let go = &g.data()[bi * n * e..(bi + 1) * n * e];
            let vb = &vv[bi * m * e..(bi + 1) * m * e];
            // dV = P^T dO
            gemm(m, n, e, 1.0, p, true, go, false, 0.0, &mut dv[bi * m * e..(bi + 1) * m * e]);
            // dP = dO V^T
            gemm(n, e, m, 1.0, go, false, vb, true, 0.0, &mut dp);
            // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(d) scale
            for r in 0..n {
                let row_p = &p[r * m..(r + 1) * m];
                let row_dp = &mut dp[r * m..(r + 1) * m];
                let dot: f64 = row_p.iter().zip(row_dp.iter()).map(|(a, b)| a * b).sum();
                for (dpv, &pv) in row_dp.iter_mut().zip(row_p) {
                    *dpv = pv * (*dpv - dot) * scale;
                }
            }
            let kb = &kv[bi * m * d..(bi + 1) * m * d];
            let qb = &qv[bi * n * d..(bi + 1) * n * d];
            gemm(n, m, d, 1.0, &dp, false, kb, false, 0.0, &mut dq[bi * n * d..(bi + 1) * n * d]);
            gemm(m, n, d, 1.0, &dp, true, qb, false, 0.0, &mut dk[bi * m * d..(bi + 1) * m * d]);
        }
        if self.wants(q) {
            accumulate(grads, q, Tensor::from_parts(vec![b, n, d], dq));
        }
        if self.wants(k) {
            accumulate(grads, k, Tensor::from_parts(vec![b, m, d], dk));
        }
        if self.wants(v) {
            accumulate(grads, v, Tensor::from_parts(vec![b, m, e], dv));
        }
    }
}

/// Per-batch `(rows, cols) -> (cols, rows)` transpose.
fn transpose_batch(x: &[f64], b: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let base = bi * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = x[base + r * cols + c];
            }
        }
    }
    out
}

/// Softmax attention forward; returns `(probs, output)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    b: usize,
    n: usize,
    m: usize,
    d: usize,
    e: usize,
) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; b * n * m];
    let mut out = vec![0.0; b * n * e];
    for bi in 0..b {
        let p = &mut probs[bi * n * m..(bi + 1) * n * m];
        gemm(
            n,
            d,
            m,
            scale,
            &q[bi * n * d..(bi + 1) * n * d],
            false,
            &k[bi * m * d..(bi + 1) * m * d],
            true,
            0.0,
            p,
        );
        for row in p.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        gemm(n, m, e, 1.0, p, false, &v[bi * m * e..(bi + 1) * m * e], false, 0.0, &mut out[bi * n * e..(bi + 1) * n * e]);
    }
    (probs, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(f * probe))/d(input) against backprop.
    fn check_grad(shape: &[usize], build: impl Fn(&mut Tape, Var) -> Var, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::randn(shape, &mut rng);
        let probe = {
            let mut t = Tape::new();
            let x = t.constant(x0.clone());
            let y = build(&mut t, x);
            Tensor::randn(t.value(y).shape(), &mut rng)
        };
        let objective = |x: &Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let y = build(&mut t, xv);
            t.value(y).mul(&probe).unwrap().sum()
        };
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let y = build(&mut t, x);
        let grads = t.backward_with(y, probe.clone()).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + fd.abs()), "elem {i}: fd {fd} vs analytic {a}");
        }
    }

    fn const_randn(t: &mut Tape, shape: &[usize], seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        t.constant(Tensor::randn(shape, &mut rng))
    }

    #[test]
    fn conv_input_and_weight_gradients() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            check_grad(&[2, 3, 5, 5], |t, x| {
                let w = const_randn(t, &[4, 3, k, k], 7);
                let b = const_randn(t, &[4], 8);
                t.conv2d(x, w, Some(b), s, p).unwrap()
            }, 1);
            check_grad(&[4, 3, k, k], |t, w| {
                let x = const_randn(t, &[2, 3, 5, 5], 9);
                t.conv2d(x, w, None, s, p).unwrap()
            }, 2);
        }
    }

    #[test]
    fn attention_gradients() {
        check_grad(&[2, 3, 4], |t, q| {
            let k = const_randn(t, &[2, 5, 4], 3);
            let v = const_randn(t, &[2, 5, 6], 4);
            t.attention(q, k, v).unwrap()
        }, 5);
        check_grad(&[2, 5, 4], |t, k| {
            let q = const_randn(t, &[2, 3, 4], 3);
            let v = const_randn(t, &[2, 5, 6], 4);
            t.attention(q, k, v).unwrap()
        }, 6);
        check_grad(&[2, 5, 6], |t, v| {
            let q = const_randn(t, &[2, 3, 4], 3);
            let k = const_randn(t, &[2, 5, 4], 4);
            t.attention(q, k, v).unwrap()
        }, 7);
    }

    #[test]
    fn group_norm_gradients() {
        check_grad(&[2, 4, 3, 3], |t, x| {
            let g = const_randn(t, &[4], 1);
            let b = const_randn(t, &[4], 2);
            t.group_norm(x, g, b, 2).unwrap()
        }, 3);
        check_grad(&[4], |t, g| {
            let x = const_randn(t, &[2, 4, 3, 3], 1);
            let b = const_randn(t, &[4], 2);
            t.group_norm(x, g, b, 2).unwrap()
        }, 4);
    }

    #[test]
    fn elementwise_and_layout_gradients() {
        check_grad(&[2, 3, 2, 2], |t, x| {
            let s = t.silu(x);
            let tok = t.to_tokens(s).unwrap();
            let back = t.from_tokens(tok, 2, 2).unwrap();
            let up = t.upsample2x(back).unwrap();
            let e = const_randn(t, &[2, 3], 4);
            let a = t.add_channel(up, e).unwrap();
            let m = t.mul_channel(a, e).unwrap();
            t.sum_channels(m).unwrap()
        }, 8);
        check_grad(&[3, 4], |t, x| {
            let w = const_randn(t, &[5, 4], 1);
            let b = const_randn(t, &[5], 2);
            let y = t.linear(x, w, Some(b)).unwrap();
            let r = t.relu(y);
            let sq = t.square(r);
            t.affine(sq, 0.5, 1.0)
        }, 9);
        check_grad(&[2, 3, 2, 2], |t, x| {
            let m = t.mean_spatial(x).unwrap();
            let e = t.silu(m);
            t.add_channel(x, e).unwrap()
        }, 10);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = Tensor::randn(&[2, 3, 4], &mut rng);
        let k = Tensor::randn(&[2, 6, 4], &mut rng);
        let v = Tensor::randn(&[2, 6, 2], &mut rng);
        let (p, _) = attention_forward(q.data(), k.data(), v.data(), 2, 3, 6, 4, 2);
        for row in p.chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_nodes_get_no_gradient() {
        let mut t = Tape::new();
        let w = t.constant(Tensor::full(&[2, 2], 1.0));
        let x = t.param(Tensor::full(&[1, 2], 3.0));
        let y = t.linear(x, w, None).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }
}

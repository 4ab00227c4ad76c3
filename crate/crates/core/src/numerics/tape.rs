//! Reverse-mode differentiation over a linear tape of tensor primitives.
//!
//! A [`Tape`] records every value produced during a forward pass together with
//! the primitive that produced it. [`Tape::backward`] walks the records in
//! reverse and applies each primitive's analytic adjoint. Parameters enter the
//! tape by name through [`Tape::param`] and borrow from their [`ParamSet`], so
//! building a tape never copies weights.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::params::ParamSet;
use super::real::{matmul, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<T>,
    },
    AvgPool2 {
        x: Var,
    },
    Film {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    SumSq {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    MeanRows {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
}

/// Recorded forward computation.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    param_vars: HashMap<String, Var>,
    param_names: Vec<(Var, String)>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, String)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. `v`, or `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of all named parameters that received one.
    pub fn into_param_grads(mut self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (v, name) in self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

fn dims2<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

fn dims3<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape(op, s, &[0, 0, 0])),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner;
    (y, dy)
}

/// Column matrix `[cin*9, h*w]` for a 3×3 zero-padded convolution.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); cin * 9 * hw];
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let shift = kx as isize - 1;
                    for (xx, d) in dst.iter_mut().enumerate() {
                        let sx = xx as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            *d = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut x = vec![T::zero(); cin * hw];
    for ci in 0..cin {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let shift = kx as isize - 1;
                    for xx in 0..w {
                        let sx = xx as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            param_names: Vec::new(),
        }
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value that takes no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_owned(t, Op::Leaf)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf)
    }

    /// Named parameter; repeated lookups of one name share a single leaf.
    pub fn param(&mut self, params: &'a ParamSet<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?;
        let v = self.push(Cow::Borrowed(t), Op::Leaf);
        self.param_vars.insert(name.to_string(), v);
        self.param_names.push((v, name.to_string()));
        Ok(v)
    }

    /// Copy of `v` cut off from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// `x[n, in] · w[in, out] + b[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = dims2(self.value(x), "affine")?;
        let (win, dout) = dims2(self.value(w), "affine")?;
        if din != win {
            return Err(Error::shape(
                "affine",
                self.value(x).shape(),
                self.value(w).shape(),
            ));
        }
        let mut out = vec![T::zero(); n * dout];
        matmul(
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            n,
            din,
            dout,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.shape() != [dout] {
                return Err(Error::shape("affine bias", bt.shape(), &[dout]));
            }
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bt.data()) {
                    *o += bv;
                }
            }
        }
        Ok(self.push_owned(Tensor::new(&[n, dout], out)?, Op::Affine { x, w, b }))
    }

    /// Normalizes each row over its last dimension, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xt = self.value(x);
        let d = *xt.shape().last().expect("rank >= 1");
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    xt.shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xt.len() / d;
        let dt = T::of(d as f64);
        let mut out = vec![T::zero(); xt.len()];
        let mut xhat = vec![T::zero(); xt.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xt.data()[r * d..][..d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + T::of(LN_EPS)).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let shape = xt.shape().to_vec();
        Ok(self.push_owned(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Multi-head scaled dot-product attention over `[n, d]` query/key/value rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = dims2(self.value(q), "attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [n, d] {
                return Err(Error::shape(
                    "attention",
                    &[n, d],
                    self.value(other).shape(),
                ));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * n * n..][..n * n];
            for i in 0..n {
                let row = &mut p[i * n..][..n];
                for j in 0..n {
                    let mut s = T::zero();
                    for c in 0..dh {
                        s += qd[i * d + off + c] * kd[j * d + off + c];
                    }
                    row[j] = s * scale;
                }
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
                for j in 0..n {
                    let pij = row[j];
                    for c in 0..dh {
                        out[i * d + off + c] += pij * vd[j * d + off + c];
                    }
                }
            }
        }
        Ok(self.push_owned(
            Tensor::new(&[n, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt
            .data()
            .iter()
            .map(|&v| T::of(gelu_parts(v.f64()).0))
            .collect();
        let t = Tensor::new(xt.shape(), data).expect("same shape");
        self.push_owned(t, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor::new(xt.shape(), data).expect("same shape");
        self.push_owned(t, Op::Relu { x })
    }

    /// 3×3 convolution, stride 1, zero padding 1: `x[cin,h,w]`, `w[cout,cin,3,3]`, `b[cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (cin, h, wd) = dims3(self.value(x), "conv3x3")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::shape("conv3x3", self.value(x).shape(), &ws));
        }
        let cout = ws[0];
        if self.value(b).shape() != [cout] {
            return Err(Error::shape("conv3x3 bias", self.value(b).shape(), &[cout]));
        }
        let hw = h * wd;
        let cols = im2col(self.value(x).data(), cin, h, wd);
        let mut out = vec![T::zero(); cout * hw];
        for (co, &bv) in self.value(b).data().iter().enumerate() {
            out[co * hw..(co + 1) * hw].iter_mut().for_each(|o| *o = bv);
        }
        matmul(
            self.value(w).data(),
            false,
            &cols,
            false,
            cout,
            cin * 9,
            hw,
            &mut out,
            true,
        );
        Ok(self.push_owned(
            Tensor::new(&[cout, h, wd], out)?,
            Op::Conv3x3 { x, w, b, cols },
        ))
    }

    /// 2×2 average pooling on `[c, h, w]` with even `h`, `w`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.value(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2",
                &[c, h, w],
                &[c, h / 2 * 2, w / 2 * 2],
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[ch * oh * ow + y * ow + xx] =
                        (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) * quarter;
                }
            }
        }
        Ok(self.push_owned(Tensor::new(&[c, oh, ow], out)?, Op::AvgPool2 { x }))
    }

    /// Feature-wise affine modulation `x * (1 + gamma[c]) + beta[c]` on `[c, h, w]`.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.value(x), "film")?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape("film", &[c, h, w], self.value(p).shape()));
            }
        }
        let hw = h * w;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).data().to_vec();
        for ch in 0..c {
            let s = T::one() + g[ch];
            out[ch * hw..(ch + 1) * hw]
                .iter_mut()
                .for_each(|v| *v = *v * s + b[ch]);
        }
        Ok(self.push_owned(Tensor::new(&[c, h, w], out)?, Op::Film { x, gamma, beta }))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape("mse", at.shape(), bt.shape()));
        }
        let s: T = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let v = s / T::of(at.len() as f64);
        Ok(self.push_owned(Tensor::scalar(v), Op::Mse { a, b }))
    }

    /// Sum of squares (squared L2 norm).
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let v = self.value(x).squared_norm();
        self.push_owned(Tensor::scalar(v), Op::SumSq { x })
    }

    /// `||a - b||^2`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        Ok(self.sum_sq(d))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, sign: T) -> Result<Tensor<T>> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape(op, at.shape(), bt.shape()));
        }
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| x + sign * y)
            .collect();
        Tensor::new(at.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", T::one())?;
        Ok(self.push_owned(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", -T::one())?;
        Ok(self.push_owned(t, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut t = self.value(x).clone();
        t.scale_in_place(c);
        self.push_owned(t, Op::Scale { x, c })
    }

    /// Mean over rows: `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = dims2(self.value(x), "mean_rows")?;
        let xd = self.value(x).data();
        let inv = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); d];
        for r in 0..n {
            for j in 0..d {
                out[j] += xd[r * d + j];
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push_owned(Tensor::new(&[d], out)?, Op::MeanRows { x }))
    }

    /// Concatenation along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::shape("concat", &first, s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        Ok(self.push_owned(
            Tensor::new(&shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::shape("slice", &s, &[start, len]));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        Ok(self.push_owned(Tensor::new(&shape, data)?, Op::Slice { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push_owned(t, Op::Reshape { x }))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lt = self.value(logits);
        if lt.rank() != 1 || target >= lt.len() {
            return Err(Error::shape("cross_entropy", lt.shape(), &[target + 1]));
        }
        let m = lt.data().iter().copied().fold(T::neg_infinity(), T::max);
        let mut probs: Vec<T> = lt.data().iter().map(|&v| (v - m).exp()).collect();
        let z: T = probs.iter().copied().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        let loss = -(lt.data()[target] - m - z.ln());
        Ok(self.push_owned(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.value(loss).shape(), &[1]));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.adjoint(node, &g)?;
            grads[idx] = Some(g);
            for (var, t) in contributions {
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&t)?,
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.param_names.clone(),
        })
    }

    fn adjoint(&self, node: &Node<'a, T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let gd = g.data();
        let val = |v: Var| self.value(v);
        let like = |v: Var, data: Vec<T>| Tensor::new(self.value(v).shape(), data);
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => {
                let (n, din) = dims2(val(*x), "affine")?;
                let dout = val(*w).shape()[1];
                let mut dx = vec![T::zero(); n * din];
                matmul(
                    gd,
                    false,
                    val(*w).data(),
                    true,
                    n,
                    dout,
                    din,
                    &mut dx,
                    false,
                );
                let mut dw = vec![T::zero(); din * dout];
                matmul(
                    val(*x).data(),
                    true,
                    gd,
                    false,
                    din,
                    n,
                    dout,
                    &mut dw,
                    false,
                );
                let mut v = vec![(*x, like(*x, dx)?), (*w, like(*w, dw)?)];
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        for (a, &r) in db.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                    v.push((*b, like(*b, db)?));
                }
                v
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gain_d = val(*gain).data();
                let d = gain_d.len();
                let rows = xhat.len() / d;
                let dt = T::of(d as f64);
                let mut dx = vec![T::zero(); xhat.len()];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &gd[r * d..][..d];
                    let hr = &xhat[r * d..][..d];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * gain_d[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hr[j];
                    }
                    m1 /= dt;
                    m2 /= dt;
                    for j in 0..d {
                        dx[r * d + j] = inv_std[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
                vec![
                    (*x, like(*x, dx)?),
                    (*gain, like(*gain, dg)?),
                    (*bias, like(*bias, db)?),
                ]
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (n, d) = dims2(val(*q), "attention")?;
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                let mut dp = vec![T::zero(); n];
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h * n * n..][..n * n];
                    for i in 0..n {
                        // dP_ij = <dO_i, V_j>; dV_j += P_ij dO_i
                        for j in 0..n {
                            let mut s = T::zero();
                            for c in 0..dh {
                                s += gd[i * d + off + c] * vd[j * d + off + c];
                                dv[j * d + off + c] += p[i * n + j] * gd[i * d + off + c];
                            }
                            dp[j] = s;
                        }
                        let dot: T = (0..n).map(|j| dp[j] * p[i * n + j]).sum();
                        for j in 0..n {
                            let ds = p[i * n + j] * (dp[j] - dot) * scale;
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * kd[j * d + off + c];
                                dk[j * d + off + c] += ds * qd[i * d + off + c];
                            }
                        }
                    }
                }
                vec![
                    (*q, like(*q, dq)?),
                    (*k, like(*k, dk)?),
                    (*v, like(*v, dv)?),
                ]
            }
            Op::Gelu { x } => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| gv * T::of(gelu_parts(xv.f64()).1))
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Relu { x } => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Conv3x3 { x, w, b, cols } => {
                let (cin, h, wd) = dims3(val(*x), "conv3x3")?;
                let cout = val(*w).shape()[0];
                let hw = h * wd;
                let mut dw = vec![T::zero(); cout * cin * 9];
                matmul(gd, false, cols, true, cout, hw, cin * 9, &mut dw, false);
                let mut dcols = vec![T::zero(); cin * 9 * hw];
                matmul(
                    val(*w).data(),
                    true,
                    gd,
                    false,
                    cin * 9,
                    cout,
                    hw,
                    &mut dcols,
                    false,
                );
                let dx = col2im(&dcols, cin, h, wd);
                let db = gd.chunks(hw).map(|c| c.iter().copied().sum()).collect();
                vec![
                    (*x, like(*x, dx)?),
                    (*w, like(*w, dw)?),
                    (*b, like(*b, db)?),
                ]
            }
            Op::AvgPool2 { x } => {
                let (c, h, w) = dims3(val(*x), "avg_pool2")?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = gd[ch * oh * ow + y * ow + xx] * quarter;
                            let base = ch * h * w + 2 * y * w + 2 * xx;
                            dx[base] = gv;
                            dx[base + 1] = gv;
                            dx[base + w] = gv;
                            dx[base + w + 1] = gv;
                        }
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Film { x, gamma, beta } => {
                let (c, h, w) = dims3(val(*x), "film")?;
                let hw = h * w;
                let (xd, gm) = (val(*x).data(), val(*gamma).data());
                let mut dx = vec![T::zero(); c * hw];
                let mut dgm = vec![T::zero(); c];
                let mut dbt = vec![T::zero(); c];
                for ch in 0..c {
                    let s = T::one() + gm[ch];
                    for i in ch * hw..(ch + 1) * hw {
                        dx[i] = gd[i] * s;
                        dgm[ch] += gd[i] * xd[i];
                        dbt[ch] += gd[i];
                    }
                }
                vec![
                    (*x, like(*x, dx)?),
                    (*gamma, like(*gamma, dgm)?),
                    (*beta, like(*beta, dbt)?),
                ]
            }
            Op::Mse { a, b } => {
                let n = T::of(val(*a).len() as f64);
                let c = gd[0] * T::of(2.0) / n;
                let da: Vec<T> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(&x, &y)| c * (x - y))
                    .collect();
                let db = da.iter().map(|&v| -v).collect();
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::SumSq { x } => {
                let c = gd[0] * T::of(2.0);
                let dx = val(*x).data().iter().map(|&v| c * v).collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub { a, b } => {
                let mut neg = g.clone();
                neg.scale_in_place(-T::one());
                vec![(*a, g.clone()), (*b, neg)]
            }
            Op::Scale { x, c } => {
                let mut t = g.clone();
                t.scale_in_place(*c);
                vec![(*x, t)]
            }
            Op::MeanRows { x } => {
                let (n, d) = dims2(val(*x), "mean_rows")?;
                let inv = T::one() / T::of(n as f64);
                let dx = (0..n * d).map(|i| gd[i % d] * inv).collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Concat { parts } => {
                let mut off = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = val(p).len();
                    v.push((p, like(p, gd[off..off + n].to_vec())?));
                    off += n;
                }
                v
            }
            Op::Slice { x, start } => {
                let xt = val(*x);
                let inner: usize = xt.shape()[1..].iter().product();
                let mut dx = vec![T::zero(); xt.len()];
                dx[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                vec![(*x, like(*x, dx)?)]
            }
            Op::Reshape { x } => vec![(*x, like(*x, gd.to_vec())?)],
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let mut dl: Vec<T> = probs.iter().map(|&p| p * gd[0]).collect();
                dl[*target] -= gd[0];
                vec![(*logits, like(*logits, dl)?)]
            }
        };
        Ok(out)
    }
}

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every value it produces. Ops view their inputs as
//! `rows x cols` matrices (last axis = columns); vectors are one row.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that depends on a parameter.

use super::tensor::{kernels, Scalar, Tensor};
use crate::error::{invalid, shape, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `[m, n] + [n]`, broadcast over rows
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape(format!(
                "matmul {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape(format!(
                "matmul_bt {:?} x {:?}^T",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_bt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulBt(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape(format!(
                "{what} {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a) || self.needs(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let t = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(x);
        if self.value(bias).len() != n {
            return Err(shape(format!(
                "bias {:?} does not broadcast over {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let b = self.value(bias).data();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (v, &bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddRow(x, bias), ng))
    }

    /// `x @ w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Normalize each row to zero mean and unit variance (population
    /// variance, `eps` inside the square root), then scale and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape(format!(
                "layer_norm over {d} features with gain {:?} / bias {:?}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let inv_d = T::of(1.0 / d as f64);
        let mut xhat = vec![T::zero(); m * d];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * d];
        for r in 0..m {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = (var + T::of(eps)).sqrt().recip();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, n) = self.dims(x);
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            let inv = total.recip();
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
        let ng = self.needs(x);
        self.push(t, Op::Softmax(x), ng)
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > m {
            return Err(shape(format!("rows {start}..{end} of a {m}-row tensor")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let t = Tensor::new([end - start, n], data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::SliceRows(x, start), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > n {
            return Err(shape(format!("cols {start}..{end} of a {n}-column tensor")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let t = Tensor::new([m, end - start], data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::SliceCols(x, start, end), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid("concat of zero tensors"));
        };
        let (m, _) = self.dims(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(shape(format!("concat rows {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new([m, total], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / T::of(v.len() as f64);
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| {
                    g.filter(|_| n.needs_grad)
                        .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
                })
                .collect(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let (_, n) = self.dims(b);
                if let Some(ga) = self.acc(grads, a) {
                    // dA = dC * B^T
                    kernels::matmul_bt_acc(gy, self.value(b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, b) {
                    // dB = A^T * dC
                    kernels::matmul_at_acc(self.value(a).data(), gy, gb, m, k, n);
                }
            }
            &Op::MatMulBt(a, b) => {
                let (m, k) = self.dims(a);
                let (n, _) = self.dims(b);
                if let Some(ga) = self.acc(grads, a) {
                    // dA = dC * B
                    kernels::matmul_acc(gy, self.value(b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, b) {
                    // dB = dC^T * A
                    kernels::matmul_at_acc(gy, self.value(a).data(), gb, m, n, k);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.acc(grads, v) {
                        g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, a) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = self.acc(grads, b) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += -d);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(g) = self.acc(grads, a) {
                    let bv = self.nodes[b.0].value.data();
                    for ((g, &d), &y) in g.iter_mut().zip(gy).zip(bv) {
                        *g += d * y;
                    }
                }
                if let Some(g) = self.acc(grads, b) {
                    let av = self.nodes[a.0].value.data();
                    for ((g, &d), &x) in g.iter_mut().zip(gy).zip(av) {
                        *g += d * x;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(g) = self.acc(grads, a) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * c);
                }
            }
            &Op::AddRow(x, bias) => {
                let (_, n) = self.dims(x);
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = self.acc(grads, bias) {
                    for row in gy.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, d) = self.dims(*x);
                let gv = self.value(*gain).data();
                if let Some(g) = self.acc(grads, *gain) {
                    for r in 0..m {
                        for j in 0..d {
                            g[j] += gy[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *bias) {
                    for row in gy.chunks(d) {
                        g.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    let inv_d = T::of(1.0 / d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..m {
                        let h = &xhat[r * d..(r + 1) * d];
                        let dy = &gy[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = dy[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * h[j];
                        }
                        let is = inv_std[r];
                        for j in 0..d {
                            g[r * d + j] += is * (dxhat[j] - inv_d * s1 - h[j] * inv_d * s2);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let (_, n) = self.dims(x);
                let y = node.value.data();
                if let Some(g) = self.acc(grads, x) {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let dot = kernels::dot(yr, dr);
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data();
                if let Some(g) = self.acc(grads, x) {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(xv) {
                        *g += d * gelu_grad(v);
                    }
                }
            }
            &Op::SliceRows(x, start) => {
                let (_, n) = self.dims(x);
                if let Some(g) = self.acc(grads, x) {
                    for (g, &d) in g[start * n..].iter_mut().zip(gy) {
                        *g += d;
                    }
                }
            }
            &Op::SliceCols(x, start, end) => {
                let (m, n) = self.dims(x);
                let w = end - start;
                if let Some(g) = self.acc(grads, x) {
                    for r in 0..m {
                        for j in 0..w {
                            g[r * n + start + j] += gy[r * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.dims(p);
                    if let Some(g) = self.acc(grads, p) {
                        for r in 0..m {
                            for j in 0..w {
                                g[r * w + j] += gy[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            &Op::Sum(x) => {
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
            &Op::Mean(x) => {
                let scale = gy[0] / T::of(self.value(x).len() as f64);
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().for_each(|g| *g += scale);
                }
            }
        }
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when the loss does not
    /// depend on it.
    pub fn take_or_zeros(&mut self, v: Var, like: &[usize]) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(like.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    /// Central-difference check of `f` w.r.t. each input tensor.
    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            for k in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, u)| {
                            let mut u = u.clone();
                            if j == i {
                                u.data_mut()[k] += delta;
                            }
                            g.param(u)
                        })
                        .collect();
                    let l = f(&mut g, &vars);
                    g.value(l).data()[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[k];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "input {i} elem {k}: {a} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f32>::new();
        let w = g.param(Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]).unwrap());
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_square_sum_is_twice() {
        let mut g = Graph::<f32>::new();
        let w = g.param(Tensor::from_rows(&[&[1.0, -2.0, 0.25]]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 0.5]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let w = g.param(Tensor::zeros([2, 2]));
        assert!(matches!(
            g.backward(w),
            Err(crate::Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn unreachable_param_has_no_grad() {
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::filled([2], 1.0));
        let b = g.param(Tensor::filled([2], 1.0));
        let s = g.sum(a);
        let mut grads = g.backward(s).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.take_or_zeros(b, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_sum_grad_is_row_sums() {
        let mut rng = Rng::new(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let mut g = Graph::new();
        let va = g.param(a);
        let vb = g.param(b.clone());
        let c = g.matmul(va, vb).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        let ga = grads.get(va).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let row_sum: f64 = b.data()[p * 2..p * 2 + 2].iter().sum();
                assert!((ga.data()[i * 4 + p] - row_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::zeros([2, 3]));
        let b = g.param(Tensor::zeros([2, 3]));
        assert!(matches!(g.matmul(a, b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn finite_difference_matmul() {
        let mut rng = Rng::new(2);
        let ins = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[3, 5]),
        ];
        check(ins, |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            let w = g.mul(c, v[2]).unwrap();
            g.sum(w)
        });
    }

    #[test]
    fn finite_difference_matmul_bt() {
        let mut rng = Rng::new(3);
        let ins = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[5, 4]),
            rand_tensor(&mut rng, &[3, 5]),
        ];
        check(ins, |g, v| {
            let c = g.matmul_bt(v[0], v[1]).unwrap();
            let w = g.mul(c, v[2]).unwrap();
            g.sum(w)
        });
    }

    #[test]
    fn finite_difference_layer_norm() {
        let mut rng = Rng::new(4);
        let ins = vec![
            rand_tensor(&mut rng, &[3, 6]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[3, 6]),
        ];
        check(ins, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let w = g.mul(y, v[3]).unwrap();
            g.sum(w)
        });
    }

    #[test]
    fn finite_difference_softmax_gelu() {
        let mut rng = Rng::new(5);
        let ins = vec![
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[4, 5]),
        ];
        check(ins, |g, v| {
            let s = g.softmax(v[0]);
            let z = g.scale(v[0], 2.0);
            let gz = g.gelu(z);
            let p = g.mul(s, v[1]).unwrap();
            let q = g.add(p, gz).unwrap();
            g.mean(q)
        });
    }

    #[test]
    fn finite_difference_slicing_and_bias() {
        let mut rng = Rng::new(6);
        let ins = vec![
            rand_tensor(&mut rng, &[4, 6]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[2, 6]),
        ];
        check(ins, |g, v| {
            let x = g.add_row(v[0], v[1]).unwrap();
            let left = g.slice_cols(x, 0, 2).unwrap();
            let right = g.slice_cols(x, 2, 6).unwrap();
            let sq = g.mul(right, right).unwrap();
            let cat = g.concat_cols(&[sq, left]).unwrap();
            let top = g.slice_rows(cat, 1, 3).unwrap();
            let d = g.sub(top, v[2]).unwrap();
            let dd = g.mul(d, d).unwrap();
            g.sum(dd)
        });
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::filled([1, 8], 3.0));
        let gain = g.constant(Tensor::filled([8], 1.0));
        let bias = g.constant(Tensor::zeros([8]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_pair() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, -1.0]]).unwrap());
        let gain = g.constant(Tensor::filled([2], 1.0));
        let bias = g.constant(Tensor::zeros([2]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-5 && (out[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[&[0.0, 0.0]]).unwrap());
        let s = g.softmax(x);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let base = Tensor::from_rows(&[&[0.3, -1.2, 2.0, 0.0]]).unwrap();
        let a = g.constant(base.clone());
        let b = g.constant(base.map(|v| v + 100.0));
        let sa = g.softmax(a);
        let sb = g.softmax(b);
        for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((g.value(sa).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_zero() {
        assert_eq!(gelu(0.0f64), 0.0);
    }
}

//! Differentiable operations on [`Graph`] nodes.

use super::counters;
use super::dense::Tensor;
use super::element::Element;
use super::graph::{Graph, Op, Var};
use crate::error::{Error, Result};

/// `c <- alpha * a * b + beta * c` for 2-D views with arbitrary strides.
pub(crate) fn gemm_into<T: Element>(alpha: T, a: &Tensor<T>, b: &Tensor<T>, beta: T, c: &Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(b.shape()[0], k);
    debug_assert_eq!(c.shape(), &[m, n]);
    if c.shares_storage(a) || c.shares_storage(b) {
        let tmp = Tensor::zeros(&[m, n]);
        gemm_into(alpha, a, b, T::zero(), &tmp);
        if beta != T::one() {
            let scaled = c.map(|v| v * beta);
            c.assign(&scaled).expect("same shape");
        }
        tmp.with_logical(|d| c.add_logical(d));
        return;
    }
    let ga = a.read_guard();
    let gb = b.read_guard();
    let mut gc = c.write_guard();
    let (sa, sb, sc) = (a.strides(), b.strides(), c.strides());
    // SAFETY: the views lie inside their buffers and `c` has its own buffer.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            ga.as_ptr().add(a.offset()),
            sa[0] as isize,
            sa[1] as isize,
            gb.as_ptr().add(b.offset()),
            sb[0] as isize,
            sb[1] as isize,
            beta,
            gc.as_mut_ptr().add(c.offset()),
            sc[0] as isize,
            sc[1] as isize,
        );
    }
}

fn check_same_shape<T: Element>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn check_rank<T: Element>(g: &Graph<T>, v: Var, rank: usize, what: &str) -> Result<()> {
    if g.shape(v).len() != rank {
        return Err(Error::Shape(format!("{what} needs rank {rank}, got {:?}", g.shape(v))));
    }
    Ok(())
}

/// Index along `axis` of flat row-major position `i`.
#[inline]
fn axis_index(i: usize, inner: usize, dim: usize) -> usize {
    (i / inner) % dim
}

fn inner_size(shape: &[usize], axis: usize) -> usize {
    shape[axis + 1..].iter().product()
}

impl<T: Element> Graph<T> {
    fn accumulate(&mut self, v: Var, data: &[T]) {
        if self.requires_grad(v) {
            self.grad_buffer(v).add_logical(data);
        }
    }

    fn push_value(&mut self, op: Op<T>, data: Vec<T>, shape: &[usize]) -> Var {
        let t = Tensor::from_parts(data, shape);
        let bytes = t.nbytes();
        self.push(op, t, bytes)
    }

    /// `x · wᵀ + b`, optionally multiplied column-wise by `scale`.
    ///
    /// `x` is `[batch, n]`, `w` is `[m, n]`, `b` is `[m]`. Either operand may
    /// be a strided view; nothing is copied.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, scale: Option<Vec<T>>) -> Result<Var> {
        check_rank(self, x, 2, "linear input")?;
        check_rank(self, w, 2, "linear weight")?;
        let (batch, n) = (self.shape(x)[0], self.shape(x)[1]);
        let m = self.shape(w)[0];
        if self.shape(w)[1] != n {
            return Err(Error::Shape(format!(
                "linear: input {:?} against weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::Shape(format!("linear: bias {:?} for {m} outputs", self.shape(b))));
            }
        }
        if let Some(s) = &scale {
            if s.len() != m {
                return Err(Error::Shape(format!("linear: {} scale factors for {m} outputs", s.len())));
            }
        }
        let out = match b {
            Some(b) => {
                let bias = self.value(b).to_vec();
                let mut d = Vec::with_capacity(batch * m);
                for _ in 0..batch {
                    d.extend_from_slice(&bias);
                }
                Tensor::from_parts(d, &[batch, m])
            }
            None => Tensor::zeros(&[batch, m]),
        };
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm_into(T::one(), self.value(x), &self.value(w).transpose()?, beta, &out);
        if let Some(s) = &scale {
            let mut d = out.write_guard();
            for row in d.chunks_mut(m) {
                for (v, &f) in row.iter_mut().zip(s) {
                    *v = *v * f;
                }
            }
        }
        let macs = batch * n * m;
        counters::record_macs(macs);
        counters::record_reads(2 * macs);
        counters::record_writes(batch * m);
        let bytes = out.nbytes();
        Ok(self.push(Op::Linear { x, w, b, scale }, out, bytes))
    }

    /// `alpha · a · b` for 2-D operands.
    pub fn matmul_scaled(&mut self, a: Var, b: Var, alpha: T) -> Result<Var> {
        check_rank(self, a, 2, "matmul")?;
        check_rank(self, b, 2, "matmul")?;
        let (p, q) = (self.shape(a)[0], self.shape(a)[1]);
        let r = self.shape(b)[1];
        if self.shape(b)[0] != q {
            return Err(Error::Shape(format!(
                "matmul: {:?} × {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = Tensor::zeros(&[p, r]);
        gemm_into(alpha, self.value(a), self.value(b), T::zero(), &out);
        counters::record_macs(p * q * r);
        counters::record_reads(2 * p * q * r);
        counters::record_writes(p * r);
        let bytes = out.nbytes();
        Ok(self.push(Op::MatMul { a, b, alpha }, out, bytes))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_scaled(a, b, T::one())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self, a, b, "add")?;
        let va = self.value(a).to_vec();
        let d = self.value(b).with_logical(|vb| va.iter().zip(vb).map(|(&x, &y)| x + y).collect());
        let shape = self.shape(a).to_vec();
        Ok(self.push_value(Op::Add { a, b }, d, &shape))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self, a, b, "mul")?;
        let va = self.value(a).to_vec();
        let d = self.value(b).with_logical(|vb| va.iter().zip(vb).map(|(&x, &y)| x * y).collect());
        let shape = self.shape(a).to_vec();
        Ok(self.push_value(Op::Mul { a, b }, d, &shape))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        let d = self.value(x).with_logical(|v| v.iter().map(|&a| a * c).collect());
        let shape = self.shape(x).to_vec();
        self.push_value(Op::Scale { x, c }, d, &shape)
    }

    /// Multiplies entries by `factors[i]`, where `i` is the index along `axis`.
    pub fn scale_axis(&mut self, x: Var, axis: usize, factors: Vec<T>) -> Result<Var> {
        self.affine_axis(x, axis, factors, None)
    }

    /// `x · scale[i] + shift[i]` along `axis`; `shift` is a constant.
    pub fn affine_axis(&mut self, x: Var, axis: usize, factors: Vec<T>, shift: Option<Vec<T>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, rank: shape.len() });
        }
        let dim = shape[axis];
        if factors.len() != dim || shift.as_ref().is_some_and(|s| s.len() != dim) {
            return Err(Error::Shape(format!(
                "{} factors for axis {axis} of {shape:?}",
                factors.len()
            )));
        }
        let inner = inner_size(&shape, axis);
        let d = self.value(x).with_logical(|v| {
            v.iter()
                .enumerate()
                .map(|(i, &a)| {
                    let c = axis_index(i, inner, dim);
                    match &shift {
                        Some(s) => a * factors[c] + s[c],
                        None => a * factors[c],
                    }
                })
                .collect()
        });
        Ok(self.push_value(Op::ScaleAxis { x, axis, factors }, d, &shape))
    }

    /// Element-wise product with a constant mask; the mask is kept for
    /// backward and charged as activation memory.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if mask.len() != self.value(x).numel() {
            return Err(Error::Shape(format!("mask of {} for shape {shape:?}", mask.len())));
        }
        let d: Vec<T> = self.value(x).with_logical(|v| v.iter().zip(&mask).map(|(&a, &m)| a * m).collect());
        let bytes = (d.len() + mask.len()) * T::BYTES;
        let t = Tensor::from_parts(d, &shape);
        Ok(self.push(Op::MaskMul { x, mask }, t, bytes))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let d = self.value(x).with_logical(|v| v.iter().map(|&a| a.max(T::zero())).collect());
        let shape = self.shape(x).to_vec();
        self.push_value(Op::Relu { x }, d, &shape)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&c) = shape.last() else {
            return Err(Error::Shape("softmax of a scalar".into()));
        };
        let d = self.value(x).with_logical(|v| {
            let mut out = Vec::with_capacity(v.len());
            for row in v.chunks(c) {
                softmax_row(row, &mut out);
            }
            out
        });
        Ok(self.push_value(Op::Softmax { x }, d, &shape))
    }

    /// Mean cross-entropy of `[batch, classes]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        check_rank(self, logits, 2, "cross_entropy")?;
        let (batch, classes) = (self.shape(logits)[0], self.shape(logits)[1]);
        if labels.len() != batch {
            return Err(Error::Shape(format!("{} labels for batch of {batch}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        let probs = self.value(logits).with_logical(|v| {
            let mut out = Vec::with_capacity(v.len());
            for row in v.chunks(classes) {
                softmax_row(row, &mut out);
            }
            out
        });
        let tiny = T::min_positive_value();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[i * classes + l].max(tiny)).ln())
            .sum::<T>()
            / T::from_f64(batch as f64);
        let bytes = (probs.len() + 1) * T::BYTES;
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(op, Tensor::scalar(loss), bytes))
    }

    /// Training-mode batch normalization over axis 1 of `[N, C, ...]`.
    ///
    /// Returns the output and the biased batch mean and variance per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("batch_norm needs rank >= 2, got {shape:?}")));
        }
        let c = shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: gamma {:?} / beta {:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let inner = inner_size(&shape, 1);
        let count = shape[0] * inner;
        let xs = self.value(x).to_vec();
        let g = self.value(gamma).to_vec();
        let bt = self.value(beta).to_vec();
        let nf = T::from_f64(count as f64);
        let mut mean = vec![T::zero(); c];
        for (i, &v) in xs.iter().enumerate() {
            let ch = axis_index(i, inner, c);
            mean[ch] = mean[ch] + v;
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        let mut var = vec![T::zero(); c];
        for (i, &v) in xs.iter().enumerate() {
            let ch = axis_index(i, inner, c);
            let d = v - mean[ch];
            var[ch] = var[ch] + d * d;
        }
        var.iter_mut().for_each(|v| *v = *v / nf);
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<T> = xs
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = axis_index(i, inner, c);
                (v - mean[ch]) * inv_std[ch]
            })
            .collect();
        let y: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let ch = axis_index(i, inner, c);
                h * g[ch] + bt[ch]
            })
            .collect();
        let bytes = (y.len() + xhat.len()) * T::BYTES;
        let out = Tensor::from_parts(y, &shape);
        let v = self.push(Op::BatchNorm { x, gamma, beta, xhat, inv_std }, out, bytes);
        Ok((v, mean, var))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&d) = shape.last() else {
            return Err(Error::Shape("layer_norm of a scalar".into()));
        };
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!("layer_norm: gamma/beta must be [{d}]")));
        }
        let xs = self.value(x).to_vec();
        let g = self.value(gamma).to_vec();
        let bt = self.value(beta).to_vec();
        let eps = T::from_f64(eps);
        let df = T::from_f64(d as f64);
        let mut xhat = Vec::with_capacity(xs.len());
        let mut inv_std = Vec::with_capacity(xs.len() / d);
        let mut y = Vec::with_capacity(xs.len());
        for row in xs.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                y.push(h * g[j] + bt[j]);
            }
        }
        let bytes = (y.len() + xhat.len()) * T::BYTES;
        let out = Tensor::from_parts(y, &shape);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, out, bytes))
    }

    /// Copies the index grid selected by `picks` (one optional, strictly
    /// increasing list per axis) into fresh memory.
    pub fn gather(&mut self, src: Var, picks: Vec<Option<Vec<usize>>>) -> Result<Var> {
        let refs: Vec<Option<&[usize]>> = picks.iter().map(|p| p.as_deref()).collect();
        let out = self.value(src).gather(&refs)?;
        // a gathered weight is a copy, tracked by copy_bytes_allocated
        Ok(self.push(Op::Gather { src, picks }, out, 0))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).with_logical(|v| v.iter().copied().sum::<T>());
        self.push(Op::Sum { x }, Tensor::scalar(s), T::BYTES)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, rank: shape.len() });
        }
        let dim = shape[axis];
        let inner = inner_size(&shape, axis);
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let k = T::from_f64(1.0 / dim as f64);
        self.value(x).with_logical(|v| {
            for o in 0..outer {
                for a in 0..dim {
                    let base = (o * dim + a) * inner;
                    for i in 0..inner {
                        out[o * inner + i] = out[o * inner + i] + v[base + i] * k;
                    }
                }
            }
        });
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        Ok(self.push_value(Op::Mean { x, axis }, out, &new_shape))
    }

    /// Concatenates nodes along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat of nothing".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis { axis, rank: base.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Shape(format!("concat: {s:?} against {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner = inner_size(&base, axis);
        let mut out = vec![T::zero(); shape.iter().product()];
        let row = total * inner;
        let mut at = 0;
        for &p in parts {
            let w = self.shape(p)[axis] * inner;
            self.value(p).with_logical(|v| {
                for o in 0..outer {
                    out[o * row + at..o * row + at + w].copy_from_slice(&v[o * w..(o + 1) * w]);
                }
            });
            at += w;
        }
        Ok(self.push_value(Op::Concat { parts: parts.to_vec(), axis }, out, &shape))
    }

    // ---- backward -------------------------------------------------------

    pub(crate) fn backward_compute(&mut self, v: Var, op: &Op<T>, gy: &Tensor<T>) -> Result<()> {
        match op {
            Op::Linear { x, w, b, scale } => {
                let (batch, m) = (gy.shape()[0], gy.shape()[1]);
                let n = self.shape(*x)[1];
                let mut gs = gy.to_vec();
                if let Some(s) = scale {
                    for row in gs.chunks_mut(m) {
                        for (g, &f) in row.iter_mut().zip(s) {
                            *g = *g * f;
                        }
                    }
                }
                let gs = Tensor::from_parts(gs, &[batch, m]);
                if self.requires_grad(*x) {
                    let gx = self.grad_buffer(*x);
                    gemm_into(T::one(), &gs, &self.val(*w), T::one(), &gx);
                    counters::record_backward_macs(batch * n * m);
                }
                if self.requires_grad(*w) {
                    let gw = self.grad_buffer(*w);
                    gemm_into(T::one(), &gs.transpose()?, &self.val(*x), T::one(), &gw);
                    counters::record_backward_macs(batch * n * m);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut gb = vec![T::zero(); m];
                        gs.with_logical(|d| {
                            for row in d.chunks(m) {
                                for (a, &g) in gb.iter_mut().zip(row) {
                                    *a = *a + g;
                                }
                            }
                        });
                        self.accumulate(*b, &gb);
                    }
                }
                Ok(())
            }
            Op::MatMul { a, b, alpha } => {
                let (p, q) = (self.shape(*a)[0], self.shape(*a)[1]);
                let r = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let ga = self.grad_buffer(*a);
                    gemm_into(*alpha, gy, &self.val(*b).transpose()?, T::one(), &ga);
                    counters::record_backward_macs(p * q * r);
                }
                if self.requires_grad(*b) {
                    let gb = self.grad_buffer(*b);
                    gemm_into(*alpha, &self.val(*a).transpose()?, gy, T::one(), &gb);
                    counters::record_backward_macs(p * q * r);
                }
                Ok(())
            }
            Op::Add { a, b } => {
                let g = gy.to_vec();
                self.accumulate(*a, &g);
                self.accumulate(*b, &g);
                Ok(())
            }
            Op::Mul { a, b } => {
                let g = gy.to_vec();
                if self.requires_grad(*a) {
                    let d: Vec<T> = self.value(*b).with_logical(|vb| g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                    self.accumulate(*a, &d);
                }
                if self.requires_grad(*b) {
                    let d: Vec<T> = self.value(*a).with_logical(|va| g.iter().zip(va).map(|(&g, &y)| g * y).collect());
                    self.accumulate(*b, &d);
                }
                Ok(())
            }
            Op::Scale { x, c } => {
                let d: Vec<T> = gy.with_logical(|g| g.iter().map(|&g| g * *c).collect());
                self.accumulate(*x, &d);
                Ok(())
            }
            Op::ScaleAxis { x, axis, factors } => {
                let shape = self.shape(*x).to_vec();
                let inner = inner_size(&shape, *axis);
                let dim = shape[*axis];
                let d: Vec<T> = gy.with_logical(|g| {
                    g.iter().enumerate().map(|(i, &g)| g * factors[axis_index(i, inner, dim)]).collect()
                });
                self.accumulate(*x, &d);
                Ok(())
            }
            Op::MaskMul { x, mask } => {
                let d: Vec<T> = gy.with_logical(|g| g.iter().zip(mask).map(|(&g, &m)| g * m).collect());
                self.accumulate(*x, &d);
                Ok(())
            }
            Op::Relu { x } => {
                let g = gy.to_vec();
                let d: Vec<T> = self.value(*x).with_logical(|xv| {
                    g.iter().zip(xv).map(|(&g, &a)| if a > T::zero() { g } else { T::zero() }).collect()
                });
                self.accumulate(*x, &d);
                Ok(())
            }
            Op::Softmax { x } => {
                let c = *self.shape(v).last().unwrap();
                let y = self.value(v).to_vec();
                let d: Vec<T> = gy.with_logical(|g| {
                    let mut out = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        out.extend(gr.iter().zip(yr).map(|(&a, &b)| b * (a - dot)));
                    }
                    out
                });
                self.accumulate(*x, &d);
                Ok(())
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.shape(*logits)[1];
                let k = gy.item() / T::from_f64(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * k).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * classes + l] = d[i * classes + l] - k;
                }
                self.accumulate(*logits, &d);
                Ok(())
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let shape = self.shape(*x).to_vec();
                let c = shape[1];
                let inner = inner_size(&shape, 1);
                let count = T::from_f64((shape[0] * inner) as f64);
                let g = gy.to_vec();
                let gam = self.value(*gamma).to_vec();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                    let ch = axis_index(i, inner, c);
                    sum_g[ch] = sum_g[ch] + gi;
                    sum_gx[ch] = sum_gx[ch] + gi * h;
                }
                self.accumulate(*beta, &sum_g);
                self.accumulate(*gamma, &sum_gx);
                if self.requires_grad(*x) {
                    let d: Vec<T> = g
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&gi, &h))| {
                            let ch = axis_index(i, inner, c);
                            gam[ch] * inv_std[ch] / count * (count * gi - sum_g[ch] - h * sum_gx[ch])
                        })
                        .collect();
                    self.accumulate(*x, &d);
                }
                Ok(())
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *self.shape(*x).last().unwrap();
                let df = T::from_f64(d as f64);
                let g = gy.to_vec();
                let gam = self.value(*gamma).to_vec();
                let mut ggam = vec![T::zero(); d];
                let mut gbet = vec![T::zero(); d];
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, hr), &is) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        ggam[j] = ggam[j] + gr[j] * hr[j];
                        gbet[j] = gbet[j] + gr[j];
                        let gh = gr[j] * gam[j];
                        s1 = s1 + gh;
                        s2 = s2 + gh * hr[j];
                    }
                    for j in 0..d {
                        let gh = gr[j] * gam[j];
                        gx.push(is / df * (df * gh - s1 - hr[j] * s2));
                    }
                }
                self.accumulate(*gamma, &ggam);
                self.accumulate(*beta, &gbet);
                self.accumulate(*x, &gx);
                Ok(())
            }
            Op::Conv2d { x, k, stride, pad } => self.conv2d_backward(*x, *k, *stride, *pad, gy),
            Op::Gather { src, picks } => {
                if !self.requires_grad(*src) {
                    return Ok(());
                }
                let gsrc = self.grad_buffer(*src);
                let lists: Vec<Vec<usize>> = picks
                    .iter()
                    .zip(gsrc.shape())
                    .map(|(p, &len)| p.clone().unwrap_or_else(|| (0..len).collect()))
                    .collect();
                let shape: Vec<usize> = lists.iter().map(Vec::len).collect();
                let offs: Vec<Vec<usize>> = lists
                    .iter()
                    .zip(gsrc.strides())
                    .map(|(l, &s)| l.iter().map(|&i| i * s).collect())
                    .collect();
                let g = gy.to_vec();
                let base = gsrc.offset();
                let mut data = gsrc.write_guard();
                let mut idx = vec![0usize; shape.len()];
                for &gv in &g {
                    let o = base + idx.iter().zip(&offs).map(|(&i, l)| l[i]).sum::<usize>();
                    data[o] = data[o] + gv;
                    for axis in (0..shape.len()).rev() {
                        idx[axis] += 1;
                        if idx[axis] < shape[axis] {
                            break;
                        }
                        idx[axis] = 0;
                    }
                }
                Ok(())
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                let d = vec![gy.item(); n];
                self.accumulate(*x, &d);
                Ok(())
            }
            Op::Mean { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let dim = shape[*axis];
                let inner = inner_size(&shape, *axis);
                let outer: usize = shape[..*axis].iter().product();
                let k = T::from_f64(1.0 / dim as f64);
                let g = gy.to_vec();
                let mut d = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    for a in 0..dim {
                        for i in 0..inner {
                            d[(o * dim + a) * inner + i] = g[o * inner + i] * k;
                        }
                    }
                }
                self.accumulate(*x, &d);
                Ok(())
            }
            Op::Concat { parts, axis } => {
                let mut at = 0;
                for &p in parts {
                    let w = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let piece = gy.slice_view(*axis, at, w)?;
                        piece.with_logical(|d| self.grad_buffer(p).add_logical(d));
                    }
                    at += w;
                }
                Ok(())
            }
            Op::Leaf | Op::Param | Op::Slice { .. } | Op::Transpose { .. } | Op::Reshape { .. } => Ok(()),
        }
    }
}

fn softmax_row<T: Element>(row: &[T], out: &mut Vec<T>) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let start = out.len();
    let mut z = T::zero();
    for &v in row {
        let e = (v - mx).exp();
        z = z + e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e = *e / z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(d: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(d, s).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let mut g = Graph::new();
        let a = g.input(t(&[1., 2., 3., 4.], &[2, 2]));
        let i = g.input(t(&[1., 0., 0., 1.], &[2, 2]));
        let b = g.input(t(&[5., 6.], &[2, 1]));
        let ai = g.matmul(a, i).unwrap();
        assert_eq!(g.value(ai).to_vec(), vec![1., 2., 3., 4.]);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).to_vec(), vec![17., 39.]);
        assert!(matches!(g.matmul(b, a), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_reads_scale_with_volume() {
        counters::reset();
        let mut g = Graph::new();
        let a = g.input(Tensor::full(&[3, 4], 1.0));
        let b = g.input(Tensor::full(&[4, 5], 1.0));
        g.matmul(a, b).unwrap();
        let c = counters::snapshot();
        assert_eq!(c.element_reads, 2 * 3 * 4 * 5);
        assert_eq!(c.multiply_ops, 60);
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::new();
        let x = g.input(t(&[-1., 2.], &[2]));
        let r = g.relu(x);
        assert_eq!(g.value(r).to_vec(), vec![0., 2.]);
        let z = g.input(t(&[0., 0.], &[1, 2]));
        let s = g.softmax(z).unwrap();
        assert_eq!(g.value(s).to_vec(), vec![0.5, 0.5]);
        let l = g.input(t(&[0., 0.], &[1, 2]));
        assert!(matches!(g.cross_entropy(l, &[2]), Err(Error::Label { label: 2, classes: 2 })));
    }

    #[test]
    fn sliced_weight_gradient_lands_in_window() {
        let store_w = t(&(0..12).map(|v| v as f64).collect::<Vec<_>>(), &[4, 3]);
        let mut ps = super::super::param::ParamStore::new();
        let id = ps.add("w", store_w);
        let mut g = Graph::new();
        let w = g.param(ps.get(id));
        let ws = g.slice(w, 0, 1, 2).unwrap();
        let x = g.input(t(&[1., 1., 1.], &[1, 3]));
        let y = g.linear(x, ws, None, None).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let grad = ps.get(id).grad.to_vec();
        assert_eq!(grad, vec![0., 0., 0., 1., 1., 1., 1., 1., 1., 0., 0., 0.]);
    }
}

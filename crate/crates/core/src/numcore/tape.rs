use super::{NumError, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Clip { a: Var, lo: T, hi: T },
    Sum(Var),
    Mean(Var),
    SumAxis { a: Var, axis: usize },
    MeanAxis { a: Var, axis: usize },
    L2Norm(Var),
    Cosine(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Expand { a: Var, axis: usize },
    SwapLast(Var),
    AvgPool { a: Var, k: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records values and the primitives that produced them so that gradients of
/// a scalar output can be replayed in reverse.
///
/// Calling [`Tape::backward`] twice accumulates into the stored gradients;
/// use [`Tape::zero_grad`] between passes to start fresh.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    kinks: Vec<&'static str>,
    pass: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<R>(op: &'static str, detail: String) -> Result<R> {
    Err(NumError::Shape { op, detail })
}

/// (outer, axis length, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), kinks: Vec::new(), pass: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `mark` (a previous [`Tape::len`]).
    /// Vars created after the mark become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a fresh constant leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Names of primitives that were evaluated exactly at a point where they
    /// are not differentiable (for example a norm of the zero vector).
    pub fn nondifferentiable_hits(&self) -> &[&'static str] {
        &self.kinks
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str, rg: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad: rg, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, name, rg)
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, op, name, rg)
    }

    /// `x · wᵀ + b` over the last axis of `x`. `w` is `[out, in]`, `b` is `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs[xs.len() - 1] != ws[1] {
            return shape_err("affine", format!("input {xs:?} against weight {ws:?}"));
        }
        let (out_dim, in_dim) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return shape_err("affine", format!("bias {:?} for {out_dim} outputs", self.shape(b)));
            }
        }
        let rows = self.value(x).len() / in_dim;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); rows * out_dim];
        for r in 0..rows {
            let xr = &xv[r * in_dim..(r + 1) * in_dim];
            let orow = &mut out[r * out_dim..(r + 1) * out_dim];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wr = &wv[o * in_dim..(o + 1) * in_dim];
                *slot = xr.iter().zip(wr).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::new(shape, out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        self.push(value, Op::Affine { x, w, b }, "affine", rg)
    }

    /// Stride-1 cross-correlation with zero "same" padding.
    /// `x` is `[N, C, H, W]`, `k` is `[O, C, kh, kw]` with odd kernel sides.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return shape_err("conv2d", format!("input {xs:?} against kernel {ks:?}"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return shape_err("conv2d", format!("bias {:?} for {o} channels", self.shape(b)));
            }
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let mut out = vec![T::zero(); n * o * h * w];
        for ni in 0..n {
            for oi in 0..o {
                let plane = &mut out[(ni * o + oi) * h * w..(ni * o + oi + 1) * h * w];
                if let Some(b) = b {
                    let bb = self.nodes[b.0].value.data()[oi];
                    plane.iter_mut().for_each(|p| *p = bb);
                }
                for ci in 0..c {
                    let xin = &xv[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let kval = kv[((oi * c + ci) * kh + dy) * kw + dx];
                            for y in 0..h {
                                let sy = y as isize + dy as isize - ph as isize;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let srow = &xin[sy as usize * w..(sy as usize + 1) * w];
                                let orow = &mut plane[y * w..(y + 1) * w];
                                let lo = pw.saturating_sub(dx);
                                let hi = (w + pw).saturating_sub(dx).min(w);
                                for xx in lo..hi {
                                    orow[xx] += kval * srow[xx + dx - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, o, h, w], out)?;
        let mut ins = vec![x, k];
        ins.extend(b);
        let rg = self.rg(&ins);
        self.push(value, Op::Conv2d { x, k, b }, "conv2d", rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, "scale", Op::Scale(a, c), |x| x * c)
    }

    pub fn offset(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, "offset", Op::Offset(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", Op::Tanh(a), |x| x.tanh())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|v| v.is_zero()) {
            self.kinks.push("relu");
        }
        self.unary(a, "relu", Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "square", Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|v| v.is_zero()) {
            self.kinks.push("sqrt");
        }
        self.unary(a, "sqrt", Op::Sqrt(a), |x| x.sqrt())
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clip(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(a, "clip", Op::Clip { a, lo, hi }, |x| x.max(lo).min(hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), "sum", rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x) / T::lit(v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), "mean", rg)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return shape_err(name, format!("axis {axis} for shape {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let d = T::lit(len as f64);
            out.iter_mut().for_each(|v| *v /= d);
        }
        let value = Tensor::new(drop_axis(&shape, axis), out)?;
        let rg = self.rg(&[a]);
        let op = if mean { Op::MeanAxis { a, axis } } else { Op::SumAxis { a, axis } };
        self.push(value, op, name, rg)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(d)
            .map(|row| row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt())
            .collect();
        if out.iter().any(|v| v.is_zero()) {
            self.kinks.push("l2_norm");
        }
        let value = Tensor::new(drop_axis(&shape, shape.len() - 1), out)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::L2Norm(a), "l2_norm", rg)
    }

    /// Cosine similarity of matching rows over the last axis.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len() / d);
        for (ra, rb) in av.chunks(d).zip(bv.chunks(d)) {
            let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
            for (&x, &y) in ra.iter().zip(rb) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na.is_zero() || nb.is_zero() {
                return Err(NumError::Degenerate { op: "cosine", detail: "zero-norm vector".into() });
            }
            out.push(dot / (na.sqrt() * nb.sqrt()));
        }
        let value = Tensor::new(drop_axis(&shape, shape.len() - 1), out)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Cosine(a, b), "cosine", rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return shape_err("concat", "nothing to concatenate".into()),
        };
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} for shape {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{first:?} vs {s:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        self.push(value, Op::Concat { parts: parts.to_vec(), axis }, "concat", rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), "reshape", rg)
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the input.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis > shape.len() || n == 0 {
            return shape_err("expand", format!("axis {axis} x{n} for shape {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut new_shape = shape;
        new_shape.insert(axis, n);
        let value = Tensor::new(new_shape, out)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Expand { a, axis }, "expand", rg)
    }

    /// Swaps the last two axes.
    pub fn swap_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return shape_err("swap_last", format!("needs rank >= 2, got {shape:?}"));
        }
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for (bi, block) in src.chunks(m * n).enumerate() {
            let dst = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = block[i * n + j];
                }
            }
        }
        let mut new_shape = shape;
        let l = new_shape.len();
        new_shape.swap(l - 2, l - 1);
        let value = Tensor::new(new_shape, out)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::SwapLast(a), "swap_last", rg)
    }

    /// Non-overlapping `k x k` average pooling over the last two axes.
    pub fn avg_pool(&mut self, a: Var, k: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let l = shape.len();
        if l < 2 || k == 0 || shape[l - 2] % k != 0 || shape[l - 1] % k != 0 {
            return shape_err("avg_pool", format!("window {k} for shape {shape:?}"));
        }
        let (h, w) = (shape[l - 2], shape[l - 1]);
        let (oh, ow) = (h / k, w / k);
        let norm = T::lit((k * k) as f64);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len() / (k * k));
        for plane in src.chunks(h * w) {
            for py in 0..oh {
                for px in 0..ow {
                    let mut s = T::zero();
                    for y in py * k..(py + 1) * k {
                        for x in px * k..(px + 1) * k {
                            s += plane[y * w + x];
                        }
                    }
                    out.push(s / norm);
                }
            }
        }
        let mut new_shape = shape;
        new_shape[l - 2] = oh;
        new_shape[l - 1] = ow;
        let value = Tensor::new(new_shape, out)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::AvgPool { a, k }, "avg_pool", rg)
    }

    fn accumulate(&mut self, v: Var, g: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.pass[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse pass from a single-element output. Every leaf that requires a
    /// gradient ends with one populated, zero when it is unreachable.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(NumError::NotScalar(self.shape(out).to_vec()));
        }
        self.pass = vec![None; out.0 + 1];
        self.accumulate(out, &[T::one()]);
        for idx in (0..=out.0).rev() {
            let Some(g) = self.pass[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, &g);
            self.pass[idx] = Some(g);
        }
        let pass = std::mem::take(&mut self.pass);
        for (node, g) in self.nodes.iter_mut().zip(pass) {
            match (g, &mut node.grad) {
                (Some(g), Some(acc)) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                (Some(g), slot @ None) => *slot = Some(g),
                (None, _) => {}
            }
        }
        for n in &mut self.nodes {
            if matches!(n.op, Op::Leaf) && n.requires_grad && n.grad.is_none() {
                n.grad = Some(vec![T::zero(); n.value.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, op: &Op<T>, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => self.back_affine(x, w, b, g),
            Op::Conv2d { x, k, b } => self.back_conv(x, k, b, g),
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let ga: Vec<T> = g.iter().zip(self.value(b).data()).map(|(&g, &y)| g * y).collect();
                    self.accumulate(a, &ga);
                }
                if self.requires_grad(b) {
                    let gb: Vec<T> = g.iter().zip(self.value(a).data()).map(|(&g, &x)| g * x).collect();
                    self.accumulate(b, &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<T> = g.iter().map(|&v| v * c).collect();
                self.accumulate(a, &ga);
            }
            Op::Offset(a) | Op::Reshape(a) => self.accumulate(a, g),
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.data();
                let ga: Vec<T> = g.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.accumulate(a, &ga);
            }
            Op::Tanh(a) => {
                let y = self.nodes[idx].value.data();
                let ga: Vec<T> = g.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)).collect();
                self.accumulate(a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<T> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                let ga: Vec<T> = g.iter().zip(self.value(a).data()).map(|(&g, &x)| g * two * x).collect();
                self.accumulate(a, &ga);
            }
            Op::Sqrt(a) => {
                let y = self.nodes[idx].value.data();
                let half = T::lit(0.5);
                let ga: Vec<T> = g
                    .iter()
                    .zip(y)
                    .map(|(&g, &s)| if s.is_zero() { T::zero() } else { g * half / s })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Clip { a, lo, hi } => {
                let ga: Vec<T> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&g, &x)| if x >= lo && x <= hi { g } else { T::zero() })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(a).len()];
                self.accumulate(a, &ga);
            }
            Op::Mean(a) => {
                let n = self.value(a).len();
                let ga = vec![g[0] / T::lit(n as f64); n];
                self.accumulate(a, &ga);
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let (outer, len, inner) = split_axis(self.shape(a), axis);
                let scale = if matches!(op, Op::MeanAxis { .. }) { T::one() / T::lit(len as f64) } else { T::one() };
                let mut ga = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            ga[(o * len + j) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::L2Norm(a) => {
                let d = *self.shape(a).last().unwrap();
                let norms = self.nodes[idx].value.data();
                let mut ga = vec![T::zero(); self.value(a).len()];
                for (r, row) in self.value(a).data().chunks(d).enumerate() {
                    if norms[r].is_zero() {
                        continue;
                    }
                    for (j, &x) in row.iter().enumerate() {
                        ga[r * d + j] = g[r] * x / norms[r];
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::Cosine(a, b) => self.back_cosine(idx, a, b, g),
            Op::Concat { ref parts, axis } => {
                let outer: usize = self.shape(parts[0])[..axis].iter().product();
                let inner: usize = self.shape(parts[0])[axis + 1..].iter().product();
                let row: usize = parts.iter().map(|&p| self.shape(p)[axis] * inner).sum();
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[axis] * inner;
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        self.accumulate(p, &gp);
                    }
                    offset += chunk;
                }
            }
            Op::Expand { a, axis } => {
                let shape = self.shape(a);
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis..].iter().product();
                let n = self.nodes[idx].value.shape()[axis];
                let mut ga = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &g[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, &s) in ga[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::SwapLast(a) => {
                let s = self.shape(a);
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                let mut ga = vec![T::zero(); g.len()];
                for (bi, block) in g.chunks(m * n).enumerate() {
                    let dst = &mut ga[bi * m * n..(bi + 1) * m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] = block[j * m + i];
                        }
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::AvgPool { a, k } => {
                let s = self.shape(a);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let (oh, ow) = (h / k, w / k);
                let norm = T::lit((k * k) as f64);
                let mut ga = vec![T::zero(); self.value(a).len()];
                for (p, plane) in ga.chunks_mut(h * w).enumerate() {
                    for y in 0..h {
                        for x in 0..w {
                            plane[y * w + x] = g[p * oh * ow + (y / k) * ow + x / k] / norm;
                        }
                    }
                }
                self.accumulate(a, &ga);
            }
        }
    }

    fn back_affine(&mut self, x: Var, w: Var, b: Option<Var>, g: &[T]) {
        let ws = self.shape(w);
        let (out_dim, in_dim) = (ws[0], ws[1]);
        let rows = g.len() / out_dim;
        if self.requires_grad(x) {
            let wv = self.value(w).data();
            let mut gx = vec![T::zero(); rows * in_dim];
            for r in 0..rows {
                let gxr = &mut gx[r * in_dim..(r + 1) * in_dim];
                for o in 0..out_dim {
                    let go = g[r * out_dim + o];
                    if go.is_zero() {
                        continue;
                    }
                    for (d, &wv) in gxr.iter_mut().zip(&wv[o * in_dim..(o + 1) * in_dim]) {
                        *d += go * wv;
                    }
                }
            }
            self.accumulate(x, &gx);
        }
        if self.requires_grad(w) {
            let xv = self.value(x).data();
            let mut gw = vec![T::zero(); out_dim * in_dim];
            for r in 0..rows {
                let xr = &xv[r * in_dim..(r + 1) * in_dim];
                for o in 0..out_dim {
                    let go = g[r * out_dim + o];
                    if go.is_zero() {
                        continue;
                    }
                    for (d, &xv) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(xr) {
                        *d += go * xv;
                    }
                }
            }
            self.accumulate(w, &gw);
        }
        if let Some(b) = b {
            if self.requires_grad(b) {
                let mut gb = vec![T::zero(); out_dim];
                for row in g.chunks(out_dim) {
                    gb.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                self.accumulate(b, &gb);
            }
        }
    }

    fn back_conv(&mut self, x: Var, k: Var, b: Option<Var>, g: &[T]) {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        let (ph, pw) = (kh / 2, kw / 2);
        let need_x = self.requires_grad(x);
        let need_k = self.requires_grad(k);
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let mut gx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
        let mut gk = if need_k { vec![T::zero(); kv.len()] } else { Vec::new() };
        for ni in 0..n {
            for oi in 0..o {
                let gplane = &g[(ni * o + oi) * h * w..(ni * o + oi + 1) * h * w];
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let kidx = ((oi * c + ci) * kh + dy) * kw + dx;
                            let kval = kv[kidx];
                            let mut kacc = T::zero();
                            for y in 0..h {
                                let sy = y as isize + dy as isize - ph as isize;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let srow = base + sy as usize * w;
                                let lo = pw.saturating_sub(dx);
                                let hi = (w + pw).saturating_sub(dx).min(w);
                                for xx in lo..hi {
                                    let gv = gplane[y * w + xx];
                                    let si = srow + xx + dx - pw;
                                    if need_x {
                                        gx[si] += gv * kval;
                                    }
                                    if need_k {
                                        kacc += gv * xv[si];
                                    }
                                }
                            }
                            if need_k {
                                gk[kidx] += kacc;
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(x, &gx);
        }
        if need_k {
            self.accumulate(k, &gk);
        }
        if let Some(b) = b {
            if self.requires_grad(b) {
                let mut gb = vec![T::zero(); o];
                for (p, plane) in g.chunks(h * w).enumerate() {
                    gb[p % o] += plane.iter().fold(T::zero(), |acc, &v| acc + v);
                }
                self.accumulate(b, &gb);
            }
        }
    }

    fn back_cosine(&mut self, idx: usize, a: Var, b: Var, g: &[T]) {
        let d = *self.shape(a).last().unwrap();
        let cos = self.nodes[idx].value.data().to_vec();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut ga = vec![T::zero(); av.len()];
        let mut gb = vec![T::zero(); bv.len()];
        for (r, (ra, rb)) in av.chunks(d).zip(bv.chunks(d)).enumerate() {
            let na = ra.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
            let nb = rb.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
            let inv = T::one() / (na * nb);
            for j in 0..d {
                ga[r * d + j] = g[r] * (rb[j] * inv - cos[r] * ra[j] / (na * na));
                gb[r * d + j] = g[r] * (ra[j] * inv - cos[r] * rb[j] / (nb * nb));
            }
        }
        self.accumulate(a, &ga);
        self.accumulate(b, &gb);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.leaf(Tensor::from_vec(v.to_vec()), true)
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn cosine_with_itself_is_one() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_vec(vec![0.3, -2.0, 5.5]));
        let c = tape.cosine(v, v).unwrap();
        assert!((tape.value(c).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_affine_is_identity() {
        let mut tape = Tape::<f64>::new();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let x = tape.constant(Tensor::from_vec(vec![1.5, -2.0, 0.25]));
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0, 3.0, 4.0]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn mean_square_backward() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let sq = tape.square(x).unwrap();
        let m = tape.mean(sq).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[0.0]);
        let y = tape.sigmoid(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[3.0]);
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
        tape.zero_grad();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, 1.0]);
        let unused = vec_leaf(&mut tape, &[5.0]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(NumError::NotScalar(_))));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::<f64>::new();
        let a = vec_leaf(&mut tape, &[1.0, 2.0]);
        let b = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().starts_with("add:"), "{err}");
        let w = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.affine(a, w, None).unwrap_err();
        assert!(err.to_string().contains("affine"), "{err}");
    }

    #[test]
    fn non_finite_reports_first_offender() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[-1.0]);
        let err = tape.sqrt(x).unwrap_err();
        assert_eq!(err, NumError::NonFinite { op: "sqrt" });
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let img: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let x = tape.constant(Tensor::new(vec![1, 1, 3, 4], img.clone()).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let k = tape.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let y = tape.conv2d(x, k, None).unwrap();
        assert_eq!(tape.value(y).data(), img.as_slice());
    }

    #[test]
    fn conv_shift_kernel_pads_with_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        // picks the right-hand neighbour
        let k = tape.constant(Tensor::new(vec![1, 1, 1, 3], vec![0.0, 0.0, 1.0]).unwrap());
        let y = tape.conv2d(x, k, None).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn concat_and_expand_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let e = tape.expand(a, 1, 2).unwrap();
        assert_eq!(tape.shape(e), &[2, 2, 1]);
        assert_eq!(tape.value(e).data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn norm_at_origin_is_flagged() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[0.0, 0.0]);
        let n = tape.l2_norm(x).unwrap();
        assert_eq!(tape.nondifferentiable_hits(), &["l2_norm"]);
        tape.backward(n).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }
}

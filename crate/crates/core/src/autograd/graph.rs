use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Relu(Var),
    Softmax(Var, usize),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Concat(Vec<Var>, usize),
    Transpose(Var),
    Reshape(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scalar_mul",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::Relu(_) => "relu",
            Op::Softmax(..) => "softmax",
            Op::Gather(..) => "gather",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::Concat(..) => "concat",
            Op::Transpose(_) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the
/// node list is already topologically sorted.
#[derive(Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `(outer, len, inner)` strides for walking `shape` along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.ops.push(Op::Leaf);
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Overwrite a leaf value. Call [`Graph::replay`] afterwards to refresh
    /// downstream nodes.
    pub fn set_value(&mut self, v: Var, value: Tensor) -> Result<()> {
        if !matches!(self.ops[v.0], Op::Leaf) {
            return Err(Error::invalid("set_value on a non-leaf node"));
        }
        if value.shape() != self.values[v.0].shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: self.values[v.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[v.0] = value;
        Ok(())
    }

    /// Recompute every non-leaf node from current leaf values. Index
    /// arguments (gather, cross-entropy targets) stay as recorded.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.ops.len() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let out = self.compute(&self.ops[i])?;
            self.values[i] = out;
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.compute(&op)?;
        let requires = self.inputs(&op).iter().any(|v| self.requires_grad[v.0]);
        self.ops.push(op);
        self.values.push(value);
        self.requires_grad.push(requires);
        self.grads.push(None);
        Ok(Var(self.values.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::Softmax(a, _)
            | Op::Gather(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::Transpose(a)
            | Op::Reshape(a, _)
            | Op::CrossEntropy(a, _) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.values[a.0];
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(self.mismatch(op, a, b));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn compute(&self, op: &Op) -> Result<Tensor> {
        let out = match op {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                let ((m, k), (k2, n)) = match (ta.dims2(), tb.dims2()) {
                    (Some(x), Some(y)) if x.1 == y.0 => (x, y),
                    _ => return Err(self.mismatch("matmul", *a, *b)),
                };
                debug_assert_eq!(k, k2);
                let (ad, bd) = (ta.data(), tb.data());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        let brow = &bd[p * n..(p + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += aip * bv;
                        }
                    }
                }
                Tensor::matrix(m, n, out)?
            }
            Op::Add(a, b) => self.zip("add", *a, *b, |x, y| x + y)?,
            Op::Sub(a, b) => self.zip("sub", *a, *b, |x, y| x - y)?,
            Op::Mul(a, b) => self.zip("mul", *a, *b, |x, y| x * y)?,
            Op::AddBias(a, b) => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                let cols = *ta.shape().last().unwrap();
                if tb.numel() != cols || tb.rank() != 1 {
                    return Err(self.mismatch("add_bias", *a, *b));
                }
                let data = ta
                    .data()
                    .chunks(cols)
                    .flat_map(|row| row.iter().zip(tb.data()).map(|(x, y)| x + y))
                    .collect();
                Tensor::new(ta.shape().to_vec(), data)?
            }
            Op::Scale(a, s) => self.map(*a, |x| x * s),
            Op::AddScalar(a, s) => self.map(*a, |x| x + s),
            Op::Exp(a) => self.map(*a, f64::exp),
            Op::Log(a) => self.map(*a, f64::ln),
            Op::Abs(a) => self.map(*a, f64::abs),
            Op::Relu(a) => self.map(*a, |x| x.max(0.0)),
            Op::Softmax(a, axis) => {
                let t = &self.values[a.0];
                if *axis >= t.rank() {
                    return Err(Error::invalid(format!(
                        "softmax axis {axis} out of range for shape {:?}",
                        t.shape()
                    )));
                }
                let (outer, len, inner) = axis_split(t.shape(), *axis);
                let x = t.data();
                let mut out = vec![0.0; x.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let max = (0..len)
                            .map(|i| x[idx(i)])
                            .fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for i in 0..len {
                            let e = (x[idx(i)] - max).exp();
                            out[idx(i)] = e;
                            total += e;
                        }
                        for i in 0..len {
                            out[idx(i)] /= total;
                        }
                    }
                }
                Tensor::new(t.shape().to_vec(), out)?
            }
            Op::Gather(a, indices) => {
                let t = &self.values[a.0];
                let rows = t.shape()[0];
                let width = t.numel() / rows;
                if indices.is_empty() {
                    return Err(Error::invalid("gather with no indices"));
                }
                let mut data = Vec::with_capacity(indices.len() * width);
                for &i in indices {
                    if i >= rows {
                        return Err(Error::invalid(format!(
                            "gather index {i} out of range for leading dimension {rows}"
                        )));
                    }
                    data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
                }
                let mut shape = t.shape().to_vec();
                shape[0] = indices.len();
                Tensor::new(shape, data)?
            }
            Op::Sum(a) => Tensor::scalar(self.values[a.0].data().iter().sum()),
            Op::Mean(a) => {
                let t = &self.values[a.0];
                Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
            }
            Op::MeanRows(a) => {
                let t = &self.values[a.0];
                let (r, c) = t
                    .dims2()
                    .ok_or_else(|| Error::invalid("mean_rows expects a rank-2 tensor"))?;
                let mut out = vec![0.0; c];
                for row in t.rows() {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
                Tensor::matrix(1, c, out)?
            }
            Op::Concat(parts, axis) => {
                let first = &self.values[parts[0].0];
                if *axis >= first.rank() {
                    return Err(Error::invalid("concat axis out of range"));
                }
                let mut shape = first.shape().to_vec();
                shape[*axis] = 0;
                for p in parts {
                    let s = self.shape(*p);
                    let compatible = s.len() == first.rank()
                        && s.iter()
                            .enumerate()
                            .all(|(d, &n)| d == *axis || n == first.shape()[d]);
                    if !compatible {
                        return Err(self.mismatch("concat", parts[0], *p));
                    }
                    shape[*axis] += s[*axis];
                }
                let outer: usize = first.shape()[..*axis].iter().product();
                let mut data = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for p in parts {
                        let t = &self.values[p.0];
                        let chunk = t.numel() / outer;
                        data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                Tensor::new(shape, data)?
            }
            Op::Transpose(a) => {
                let t = &self.values[a.0];
                let (r, c) = t
                    .dims2()
                    .ok_or_else(|| Error::invalid("transpose expects a rank-2 tensor"))?;
                let x = t.data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = x[i * c + j];
                    }
                }
                Tensor::matrix(c, r, out)?
            }
            Op::Reshape(a, shape) => self.values[a.0].reshaped(shape.clone())?,
            Op::CrossEntropy(a, targets) => {
                let t = &self.values[a.0];
                let classes = *t.shape().last().unwrap();
                let rows = t.numel() / classes;
                if targets.len() != rows {
                    return Err(Error::ShapeMismatch {
                        op: "cross_entropy",
                        lhs: t.shape().to_vec(),
                        rhs: vec![targets.len()],
                    });
                }
                let mut total = 0.0;
                for (row, &y) in t.rows().zip(targets) {
                    if y >= classes {
                        return Err(Error::invalid(format!(
                            "cross_entropy target {y} out of range for {classes} classes"
                        )));
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    total += lse - row[y];
                }
                Tensor::scalar(total / rows as f64)
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    /// Adds a rank-1 bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddBias(a, bias))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.push(Op::Softmax(a, axis))
    }

    /// Selects entries (rank 1) or rows (rank 2+) along the leading axis.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.push(Op::Gather(a, indices.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    /// Column means of a rank-2 tensor, as a `[1, cols]` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanRows(a))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        self.push(Op::Concat(parts.to_vec(), axis))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy(logits, targets.to_vec()))
    }

    /// Populates gradient buffers for every node that depends on a
    /// trainable leaf. Buffers accumulate across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if !self.values[loss.0].is_scalar() {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.requires_grad[i] {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let needs = |v: &Var| self.requires_grad[v.0];
        let send = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| match &mut grads[v.0]
        {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, x)| *a += x),
            slot @ None => *slot = Some(contrib),
        };
        let out = &self.values[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                let (m, k) = ta.dims2().unwrap();
                let n = tb.dims2().unwrap().1;
                let (ad, bd) = (ta.data(), tb.data());
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(grads, *a, da);
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = ad[r * k + p];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, &x) in drow.iter_mut().zip(grow) {
                                *d += arp * x;
                            }
                        }
                    }
                    send(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    send(grads, *a, g.to_vec());
                }
                if needs(b) {
                    send(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    send(grads, *a, g.to_vec());
                }
                if needs(b) {
                    send(grads, *b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.values[a.0].data(), self.values[b.0].data());
                if needs(a) {
                    send(grads, *a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                }
                if needs(b) {
                    send(grads, *b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddBias(a, b) => {
                if needs(a) {
                    send(grads, *a, g.to_vec());
                }
                if needs(b) {
                    let cols = self.values[b.0].numel();
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                    send(grads, *b, db);
                }
            }
            Op::Scale(a, s) => send(grads, *a, g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a, _) => send(grads, *a, g.to_vec()),
            Op::Exp(a) => send(
                grads,
                *a,
                g.iter().zip(out.data()).map(|(x, y)| x * y).collect(),
            ),
            Op::Log(a) => {
                let ad = self.values[a.0].data();
                send(grads, *a, g.iter().zip(ad).map(|(x, y)| x / y).collect());
            }
            Op::Abs(a) => {
                // Subgradient 0 at the kink.
                let ad = self.values[a.0].data();
                let sign = |y: f64| {
                    if y > 0.0 {
                        1.0
                    } else if y < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                send(
                    grads,
                    *a,
                    g.iter().zip(ad).map(|(x, &y)| x * sign(y)).collect(),
                );
            }
            Op::Relu(a) => {
                let ad = self.values[a.0].data();
                send(
                    grads,
                    *a,
                    g.iter()
                        .zip(ad)
                        .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..len {
                            da[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                send(grads, *a, da);
            }
            Op::Gather(a, indices) => {
                let t = &self.values[a.0];
                let width = t.numel() / t.shape()[0];
                let mut da = vec![0.0; t.numel()];
                for (slot, &src) in indices.iter().enumerate() {
                    let dst = &mut da[src * width..(src + 1) * width];
                    for (d, x) in dst.iter_mut().zip(&g[slot * width..(slot + 1) * width]) {
                        *d += x;
                    }
                }
                send(grads, *a, da);
            }
            Op::Sum(a) => send(grads, *a, vec![g[0]; self.values[a.0].numel()]),
            Op::Mean(a) => {
                let n = self.values[a.0].numel();
                send(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.values[a.0].dims2().unwrap();
                let mut da = Vec::with_capacity(r * c);
                for _ in 0..r {
                    da.extend(g.iter().map(|x| x / r as f64));
                }
                send(grads, *a, da);
            }
            Op::Concat(parts, axis) => {
                let outer: usize = out.shape()[..*axis].iter().product();
                let out_chunk = out.numel() / outer;
                let mut offset = 0;
                for p in parts {
                    let t = &self.values[p.0];
                    let chunk = t.numel() / outer;
                    if needs(p) {
                        let mut dp = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let start = o * out_chunk + offset;
                            dp.extend_from_slice(&g[start..start + chunk]);
                        }
                        send(grads, *p, dp);
                    }
                    offset += chunk;
                }
            }
            Op::Transpose(a) => {
                // out is [c, r]; gradient maps back to [r, c].
                let (c, r) = out.dims2().unwrap();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                send(grads, *a, da);
            }
            Op::Reshape(a, _) => send(grads, *a, g.to_vec()),
            Op::CrossEntropy(a, targets) => {
                let t = &self.values[a.0];
                let classes = *t.shape().last().unwrap();
                let rows = targets.len();
                let scale = g[0] / rows as f64;
                let mut da = Vec::with_capacity(t.numel());
                for (row, &y) in t.rows().zip(targets) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for (c, x) in row.iter().enumerate() {
                        let p = (x - max).exp() / total;
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        da.push((p - onehot) * scale);
                    }
                }
                debug_assert_eq!(da.len(), rows * classes);
                send(grads, *a, da);
            }
        }
        Ok(())
    }
}

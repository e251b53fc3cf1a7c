//! Append-only record of primitive operations with reverse-mode replay.
//!
//! Nodes are stored in creation order, so walking the node list backwards
//! from the loss visits every node after all of its consumers.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    BroadcastRows(Var),
    Mse(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { x: Var, start: usize },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded computation record.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Vec<f64>>>,
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n, m] => Ok((*n, *m)),
        [m] => Ok((1, *m)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

/// `c (+)= a * b` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths are checked above against the strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownVariable(v.0))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.grads = None;
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a leaf that always tracks gradients.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::InvalidShape {
                shape,
                len: values.len(),
            });
        }
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.node(a)?.shape, &self.node(b)?.shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(sa.clone())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        let shape = self.same_shape(op, a, b)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, rec, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, rec: Op) -> Result<Var> {
        let n = self.node(x)?;
        let shape = n.shape.clone();
        let value = n.value.iter().map(|v| f(*v)).collect();
        let rg = n.requires_grad;
        Ok(self.push(shape, value, rec, rg))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = matrix_dims("matmul", &self.node(a)?.shape)?;
        let (k2, m) = matrix_dims("matmul", &self.node(b)?.shape)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            &self.nodes[a.0].value,
            (k as isize, 1),
            &self.nodes[b.0].value,
            (m as isize, 1),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.map(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, m) = matrix_dims("softmax", &self.node(x)?.shape)?;
        let src = &self.nodes[x.0].value;
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &src[r * m..(r + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in out[r * m..(r + 1) * m].iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            out[r * m..(r + 1) * m].iter_mut().for_each(|o| *o /= z);
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let s = n.value.iter().sum();
        let rg = n.requires_grad;
        Ok(self.push(vec![1], vec![s], Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let rg = n.requires_grad;
        Ok(self.push(vec![1], vec![s], Op::Mean(x), rg))
    }

    /// Column means `[n, m] -> [1, m]`.
    ///
    /// Each column is summed in sorted order, so the result does not depend
    /// on the order of the rows.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = matrix_dims("mean_rows", &self.node(x)?.shape)?;
        if n == 0 {
            return Err(Error::ShapeMismatch {
                op: "mean_rows",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![],
            });
        }
        let src = &self.nodes[x.0].value;
        let mut col = Vec::with_capacity(n);
        let out = (0..m)
            .map(|j| {
                col.clear();
                col.extend((0..n).map(|i| src[i * m + j]));
                col.sort_by(f64::total_cmp);
                col.iter().sum::<f64>() / n as f64
            })
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![1, m], out, Op::MeanRows(x), rg))
    }

    /// Repeats a `[1, m]` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, m) = matrix_dims("broadcast_rows", &self.node(x)?.shape)?;
        if r != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![1, m],
            });
        }
        let row = self.nodes[x.0].value.clone();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, m], out, Op::BroadcastRows(x), rg))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let s = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.len() as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![1], vec![s], Op::Mse(a, b), rg))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::InvalidArgument(format!(
                "concat of {} parts along axis {axis}",
                parts.len()
            )));
        }
        let dims = parts
            .iter()
            .map(|p| matrix_dims("concat", &self.node(*p)?.shape))
            .collect::<Result<Vec<_>>>()?;
        let (n0, m0) = dims[0];
        for (p, &(n, m)) in parts.iter().zip(&dims) {
            let bad = if axis == 0 { m != m0 } else { n != n0 };
            if bad {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let (shape, value) = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut v = Vec::with_capacity(rows * m0);
            for p in parts {
                v.extend_from_slice(&self.nodes[p.0].value);
            }
            (vec![rows, m0], v)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut v = Vec::with_capacity(n0 * cols);
            for r in 0..n0 {
                for (p, &(_, m)) in parts.iter().zip(&dims) {
                    v.extend_from_slice(&self.nodes[p.0].value[r * m..(r + 1) * m]);
                }
            }
            (vec![n0, cols], v)
        };
        let rg = self.rg(parts);
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = matrix_dims("slice_rows", &self.node(x)?.shape)?;
        if start > end || end > n {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![start, end],
            });
        }
        let value = self.nodes[x.0].value[start * m..end * m].to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![end - start, m], value, Op::SliceRows { x, start }, rg))
    }

    /// `x w + b` with `b` of shape `[1, m]` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let n = self.shape(xw)[0];
        let bb = self.broadcast_rows(b, n)?;
        self.add(xw, bb)
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    ///
    /// Previous gradients on this tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = &self.node(loss)?.shape;
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    vec![0.0; n.value.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0][0] = 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            if g.iter().all(|v| *v == 0.0) {
                grads[i] = g;
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = g;
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let wants = |v: &Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = matrix_dims("matmul", &nodes[a.0].shape).unwrap();
                let m = node.shape[1];
                if wants(a) {
                    // dA[n,k] += dC[n,m] * B^T
                    gemm(
                        n,
                        m,
                        k,
                        g,
                        (m as isize, 1),
                        &nodes[b.0].value,
                        (1, m as isize),
                        1.0,
                        &mut grads[a.0],
                    );
                }
                if wants(b) {
                    // dB[k,m] += A^T * dC
                    gemm(
                        k,
                        n,
                        m,
                        &nodes[a.0].value,
                        (1, k as isize),
                        g,
                        (m as isize, 1),
                        1.0,
                        &mut grads[b.0],
                    );
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(a) {
                    grads[a.0].iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if wants(b) {
                    grads[b.0].iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let vb = &nodes[b.0].value;
                    for ((d, v), y) in grads[a.0].iter_mut().zip(g).zip(vb) {
                        *d += v * y;
                    }
                }
                if wants(b) {
                    let va = &nodes[a.0].value;
                    for ((d, v), x) in grads[b.0].iter_mut().zip(g).zip(va) {
                        *d += v * x;
                    }
                }
            }
            Op::Affine { x, scale } => {
                grads[x.0].iter_mut().zip(g).for_each(|(d, v)| *d += scale * v);
            }
            Op::Relu(x) => {
                let vx = &nodes[x.0].value;
                for ((d, v), xi) in grads[x.0].iter_mut().zip(g).zip(vx) {
                    if *xi > 0.0 {
                        *d += v;
                    }
                }
            }
            Op::Tanh(x) => {
                for ((d, v), y) in grads[x.0].iter_mut().zip(g).zip(&node.value) {
                    *d += v * (1.0 - y * y);
                }
            }
            Op::Softmax(x) => {
                let (n, m) = matrix_dims("softmax", &node.shape).unwrap();
                for r in 0..n {
                    let y = &node.value[r * m..(r + 1) * m];
                    let gy = &g[r * m..(r + 1) * m];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        grads[x.0][r * m + j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::Sum(x) => {
                grads[x.0].iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let s = g[0] / nodes[x.0].value.len() as f64;
                grads[x.0].iter_mut().for_each(|d| *d += s);
            }
            Op::MeanRows(x) => {
                let (n, m) = matrix_dims("mean_rows", &nodes[x.0].shape).unwrap();
                for r in 0..n {
                    for j in 0..m {
                        grads[x.0][r * m + j] += g[j] / n as f64;
                    }
                }
            }
            Op::BroadcastRows(x) => {
                let m = nodes[x.0].value.len();
                for (idx, v) in g.iter().enumerate() {
                    grads[x.0][idx % m] += v;
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let c = 2.0 * g[0] / va.len() as f64;
                if wants(a) {
                    for ((d, x), y) in grads[a.0].iter_mut().zip(va).zip(vb) {
                        *d += c * (x - y);
                    }
                }
                if wants(b) {
                    for ((d, x), y) in grads[b.0].iter_mut().zip(va).zip(vb) {
                        *d -= c * (x - y);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        if wants(p) {
                            grads[p.0].iter_mut().zip(&g[off..off + len]).for_each(|(d, v)| *d += v);
                        }
                        off += len;
                    }
                } else {
                    let n = node.shape[0];
                    let cols = node.shape[1];
                    let mut c0 = 0;
                    for p in parts {
                        let m = nodes[p.0].shape.last().copied().unwrap_or(1);
                        if wants(p) {
                            for r in 0..n {
                                for j in 0..m {
                                    grads[p.0][r * m + j] += g[r * cols + c0 + j];
                                }
                            }
                        }
                        c0 += m;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let m = node.shape[1];
                let off = start * m;
                grads[x.0][off..off + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, v)| *d += v);
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Nodes that do not track gradients, or are disconnected from the loss,
    /// report zeros.
    pub fn grad(&self, v: Var) -> Result<Vec<f64>> {
        let grads = self.grads.as_ref().ok_or(Error::NoBackward)?;
        let node = self.node(v)?;
        let g = &grads[v.0];
        if g.is_empty() {
            Ok(vec![0.0; node.value.len()])
        } else {
            Ok(g.clone())
        }
    }

    /// Adds the gradient of `v` into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let grads = self.grads.as_ref().ok_or(Error::NoBackward)?;
        self.node(v)?;
        let g = &grads[v.0];
        if g.is_empty() {
            t.accumulate_grad(&vec![0.0; t.numel()])
        } else {
            t.accumulate_grad(g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_var(tape: &mut Tape, v: f64) -> Var {
        tape.variable(&Tensor::scalar(v))
    }

    #[test]
    fn square_and_derivative() {
        let mut tape = Tape::new();
        let x = scalar_var(&mut tape, 3.0);
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.scalar(y), 9.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![6.0]);
    }

    #[test]
    fn relu_negative_branch() {
        let mut tape = Tape::new();
        let x = scalar_var(&mut tape, -2.0);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.scalar(y), 0.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![0.0]);
    }

    #[test]
    fn disconnected_grad_is_zero() {
        let mut tape = Tape::new();
        let x = scalar_var(&mut tape, 2.0);
        let unused = scalar_var(&mut tape, 5.0);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), vec![0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = scalar_var(&mut tape, 2.0);
        let a = tape.affine(x, 3.0, 0.0).unwrap();
        let b = tape.add(a, x).unwrap();
        tape.backward(b).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(&Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_before_forward() {
        let mut tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::UnknownVariable(0))));
        let x = scalar_var(&mut tape, 1.0);
        assert!(matches!(tape.grad(x), Err(Error::NoBackward)));
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.variable(&Tensor::zeros(&[2, 3]));
        let b = tape.variable(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn mean_rows_is_order_independent() {
        let rows = [0.1, 1e16, -1e16, 0.3, 0.7, 1e-3];
        let mut t1 = Tape::new();
        let a = t1.constant(vec![6, 1], rows.to_vec()).unwrap();
        let ma = t1.mean_rows(a).unwrap();
        let mut rev = rows.to_vec();
        rev.reverse();
        let mut t2 = Tape::new();
        let b = t2.constant(vec![6, 1], rev).unwrap();
        let mb = t2.mean_rows(b).unwrap();
        assert_eq!(t1.value(ma)[0].to_bits(), t2.value(mb)[0].to_bits());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.variable(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.variable(&Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        let s = tape.slice_rows(c, 1, 3).unwrap();
        assert_eq!(tape.value(s), &[3.0, 4.0, 5.0, 6.0]);
        let d = tape.concat(&[b, b], 1).unwrap();
        assert_eq!(tape.value(d), &[3.0, 4.0, 3.0, 4.0, 5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]).unwrap();
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y);
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-15);
        assert!((v[5] - 1.0).abs() < 1e-15);
    }
}

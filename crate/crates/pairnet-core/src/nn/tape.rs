//! Reverse-mode automatic differentiation over a recorded computation tape.
//!
//! Each operation appends one node holding its output tensor plus a backward
//! closure that routes the node's gradient to its inputs. [`Tape::backward`]
//! walks the nodes in reverse creation order, which is always a valid
//! topological order, and returns one gradient tensor per node.
//!
//! The tape is rebuilt per example; parameters enter as leaves bound through
//! a parameter store (see `optim`), and their gradients are read back out of
//! the result of `backward`.

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

pub(crate) type BackFn = Box<dyn Fn(&Tensor, &[Tensor], &mut [Tensor])>;

const LAYER_NORM_EPS: f64 = 1e-12;

pub struct Tape {
    values: Vec<Tensor>,
    backs: Vec<Option<BackFn>>,
    /// Parameter-store index -> leaf node, filled by the optimizer binding.
    pub(crate) param_bindings: Vec<(usize, Value)>,
}

pub(crate) fn accumulate(dst: &mut Tensor, src: &[f64]) {
    debug_assert_eq!(dst.numel(), src.len());
    for (d, s) in dst.data_mut().iter_mut().zip(src.iter()) {
        *d += *s;
    }
}

/// Decomposes a shape around `axis` into (outer, lane length, inner stride).
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus(t) = ln(1 + e^t), computed without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
            param_bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The forward value of a node.
    pub fn value(&self, v: Value) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>) -> Value {
        self.values.push(value);
        self.backs.push(back);
        Value(self.values.len() - 1)
    }

    /// Appends a node with an explicit backward closure (used by ops defined
    /// in sibling modules, e.g. conv2d).
    pub(crate) fn push_node(&mut self, value: Tensor, back: BackFn) -> Value {
        self.push(value, Some(back))
    }

    /// Inserts an input node. Gradients flow to it but stop there.
    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push(t, None)
    }

    /// Scalar constant convenience.
    pub fn constant_scalar(&mut self, v: f64) -> Value {
        self.push(Tensor::scalar(v), None)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(
                "add",
                format!(
                    "{:?} vs {:?}",
                    self.values[a.0].shape(),
                    self.values[b.0].shape()
                ),
            ));
        }
        let out = Tensor::from_parts(
            self.values[a.0].shape().to_vec(),
            self.values[a.0]
                .data()
                .iter()
                .zip(self.values[b.0].data())
                .map(|(x, y)| x + y)
                .collect(),
        );
        Ok(self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                accumulate(&mut grads[a.0], g.data());
                accumulate(&mut grads[b.0], g.data());
            })),
        ))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(
                "mul",
                format!(
                    "{:?} vs {:?}",
                    self.values[a.0].shape(),
                    self.values[b.0].shape()
                ),
            ));
        }
        let out = Tensor::from_parts(
            self.values[a.0].shape().to_vec(),
            self.values[a.0]
                .data()
                .iter()
                .zip(self.values[b.0].data())
                .map(|(x, y)| x * y)
                .collect(),
        );
        Ok(self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(vals[b.0].data())
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(vals[a.0].data())
                    .map(|(gv, av)| gv * av)
                    .collect();
                accumulate(&mut grads[a.0], &ga);
                accumulate(&mut grads[b.0], &gb);
            })),
        ))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let out = Tensor::from_parts(
            self.values[a.0].shape().to_vec(),
            self.values[a.0].data().iter().map(|x| x * c).collect(),
        );
        self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                let ga: Vec<f64> = g.data().iter().map(|gv| gv * c).collect();
                accumulate(&mut grads[a.0], &ga);
            })),
        )
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let out = Tensor::from_parts(
            self.values[a.0].shape().to_vec(),
            self.values[a.0].data().iter().map(|x| x.max(0.0)).collect(),
        );
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(vals[a.0].data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], &ga);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let out = Tensor::from_parts(
            self.values[a.0].shape().to_vec(),
            self.values[a.0]
                .data()
                .iter()
                .map(|&x| stable_sigmoid(x))
                .collect(),
        );
        let out_id = self.push(out, None).0;
        // Rewire: install backward that reads the freshly stored output.
        self.backs[out_id] = Some(Box::new(move |g, vals, grads| {
            let y = &vals[out_id];
            let ga: Vec<f64> = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(gv, yv)| gv * yv * (1.0 - yv))
                .collect();
            accumulate(&mut grads[a.0], &ga);
        }));
        Value(out_id)
    }

    // ---- broadcasting over the last axis ----

    fn check_row_broadcast(&self, op: &'static str, x: Value, v: Value) -> Result<(usize, usize)> {
        let xs = self.values[x.0].shape();
        let vs = self.values[v.0].shape();
        if xs.is_empty() || vs.len() != 1 || xs[xs.len() - 1] != vs[0] {
            return Err(Error::shape(op, format!("{:?} broadcast {:?}", xs, vs)));
        }
        let n = vs[0];
        Ok((self.values[x.0].numel() / n, n))
    }

    /// x + v with v broadcast along the last axis.
    pub fn add_row(&mut self, x: Value, v: Value) -> Result<Value> {
        let (rows, n) = self.check_row_broadcast("add_row", x, v)?;
        let vd = self.values[v.0].data().to_vec();
        let mut data = self.values[x.0].data().to_vec();
        for r in 0..rows {
            for j in 0..n {
                data[r * n + j] += vd[j];
            }
        }
        let out = Tensor::from_parts(self.values[x.0].shape().to_vec(), data);
        Ok(self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                accumulate(&mut grads[x.0], g.data());
                let mut gv = vec![0.0; n];
                for r in 0..rows {
                    for j in 0..n {
                        gv[j] += g.data()[r * n + j];
                    }
                }
                accumulate(&mut grads[v.0], &gv);
            })),
        ))
    }

    /// x * v with v broadcast along the last axis.
    pub fn mul_row(&mut self, x: Value, v: Value) -> Result<Value> {
        let (rows, n) = self.check_row_broadcast("mul_row", x, v)?;
        let vd = self.values[v.0].data().to_vec();
        let mut data = self.values[x.0].data().to_vec();
        for r in 0..rows {
            for j in 0..n {
                data[r * n + j] *= vd[j];
            }
        }
        let out = Tensor::from_parts(self.values[x.0].shape().to_vec(), data);
        Ok(self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let xv = &vals[x.0];
                let vv = &vals[v.0];
                let mut gx = vec![0.0; xv.numel()];
                let mut gv = vec![0.0; n];
                for r in 0..rows {
                    for j in 0..n {
                        let gij = g.data()[r * n + j];
                        gx[r * n + j] = gij * vv.data()[j];
                        gv[j] += gij * xv.data()[r * n + j];
                    }
                }
                accumulate(&mut grads[x.0], &gx);
                accumulate(&mut grads[v.0], &gv);
            })),
        ))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ash, bsh) = (self.values[a.0].shape(), self.values[b.0].shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::shape("matmul", format!("{ash:?} x {bsh:?}")));
        }
        let out = matmul_raw(&self.values[a.0], &self.values[b.0]);
        Ok(self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let da = matmul_nt_raw(g, &vals[b.0]);
                let db = matmul_tn_raw(&vals[a.0], g);
                accumulate(&mut grads[a.0], da.data());
                accumulate(&mut grads[b.0], db.data());
            })),
        ))
    }

    /// a[m,k] * b[n,k]^T -> [m,n]
    pub fn matmul_nt(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ash, bsh) = (self.values[a.0].shape(), self.values[b.0].shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[1] {
            return Err(Error::shape("matmul_nt", format!("{ash:?} x {bsh:?}^T")));
        }
        let out = matmul_nt_raw(&self.values[a.0], &self.values[b.0]);
        Ok(self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                // dA = g * B ; dB = g^T * A
                let da = matmul_raw(g, &vals[b.0]);
                let db = matmul_tn_raw(g, &vals[a.0]);
                accumulate(&mut grads[a.0], da.data());
                accumulate(&mut grads[b.0], db.data());
            })),
        ))
    }

    /// Affine map over the last axis: y = x.w + b, with w of shape
    /// [fan_in, fan_out] and b of shape [fan_out].
    pub fn linear(&mut self, x: Value, w: Value, b: Value) -> Result<Value> {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        let bs = self.values[b.0].shape().to_vec();
        if xs.is_empty() || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::shape("linear", format!("x{xs:?} w{ws:?} b{bs:?}")));
        }
        let fan_in = xs[xs.len() - 1];
        let (w_in, w_out) = (ws[0], ws[1]);
        if fan_in != w_in || bs[0] != w_out {
            return Err(Error::shape("linear", format!("x{xs:?} w{ws:?} b{bs:?}")));
        }
        let rows = self.values[x.0].numel() / fan_in;
        let x2d = Tensor::from_parts(vec![rows, fan_in], self.values[x.0].data().to_vec());
        let mut y = matmul_raw(&x2d, &self.values[w.0]);
        let bd = self.values[b.0].data().to_vec();
        for r in 0..rows {
            for j in 0..w_out {
                y.data_mut()[r * w_out + j] += bd[j];
            }
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = w_out;
        let out = Tensor::from_parts(out_shape, y.data().to_vec());
        Ok(self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let g2d = Tensor::from_parts(vec![rows, w_out], g.data().to_vec());
                let x2d = Tensor::from_parts(vec![rows, fan_in], vals[x.0].data().to_vec());
                let dx = matmul_nt_raw(&g2d, &vals[w.0]);
                let dw = matmul_tn_raw(&x2d, &g2d);
                let mut db = vec![0.0; w_out];
                for r in 0..rows {
                    for j in 0..w_out {
                        db[j] += g2d.data()[r * w_out + j];
                    }
                }
                accumulate(&mut grads[x.0], dx.data());
                accumulate(&mut grads[w.0], dw.data());
                accumulate(&mut grads[b.0], &db);
            })),
        ))
    }

    // ---- normalizations ----

    pub fn softmax(&mut self, x: Value, axis: usize) -> Result<Value> {
        let shape = self.values[x.0].shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let xd = self.values[x.0].data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for t in 0..len {
                    m = m.max(xd[idx(t)]);
                }
                let mut s = 0.0;
                for t in 0..len {
                    let e = (xd[idx(t)] - m).exp();
                    out[idx(t)] = e;
                    s += e;
                }
                for t in 0..len {
                    out[idx(t)] /= s;
                }
            }
        }
        let out = Tensor::from_parts(shape.clone(), out);
        let out_id = self.push(out, None).0;
        self.backs[out_id] = Some(Box::new(move |g, vals, grads| {
            let y = &vals[out_id];
            let mut gx = vec![0.0; y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |t: usize| (o * len + t) * inner + i;
                    let mut dot = 0.0;
                    for t in 0..len {
                        dot += g.data()[idx(t)] * y.data()[idx(t)];
                    }
                    for t in 0..len {
                        gx[idx(t)] = y.data()[idx(t)] * (g.data()[idx(t)] - dot);
                    }
                }
            }
            accumulate(&mut grads[x.0], &gx);
        }));
        Ok(Value(out_id))
    }

    /// Normalizes each lane along `axis` to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Value, axis: usize) -> Result<Value> {
        let shape = self.values[x.0].shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "layer_norm",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let xd = self.values[x.0].data();
        let mut out = vec![0.0; xd.len()];
        let mut inv_stds = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let mut mean = 0.0;
                for t in 0..len {
                    mean += xd[idx(t)];
                }
                mean /= len as f64;
                let mut var = 0.0;
                for t in 0..len {
                    let d = xd[idx(t)] - mean;
                    var += d * d;
                }
                var /= len as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_stds[o * inner + i] = inv;
                for t in 0..len {
                    out[idx(t)] = (xd[idx(t)] - mean) * inv;
                }
            }
        }
        let out = Tensor::from_parts(shape.clone(), out);
        let out_id = self.push(out, None).0;
        self.backs[out_id] = Some(Box::new(move |g, vals, grads| {
            let y = &vals[out_id];
            let mut gx = vec![0.0; y.numel()];
            let flen = len as f64;
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |t: usize| (o * len + t) * inner + i;
                    let inv = inv_stds[o * inner + i];
                    let mut gmean = 0.0;
                    let mut gydot = 0.0;
                    for t in 0..len {
                        gmean += g.data()[idx(t)];
                        gydot += g.data()[idx(t)] * y.data()[idx(t)];
                    }
                    gmean /= flen;
                    gydot /= flen;
                    for t in 0..len {
                        gx[idx(t)] = inv * (g.data()[idx(t)] - gmean - y.data()[idx(t)] * gydot);
                    }
                }
            }
            accumulate(&mut grads[x.0], &gx);
        }));
        Ok(Value(out_id))
    }

    /// Divides each row of a 2-D tensor by max(row L2 norm, eps).
    pub fn normalize_rows(&mut self, x: Value, eps: f64) -> Result<Value> {
        let shape = self.values[x.0].shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("normalize_rows", format!("{shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let xd = self.values[x.0].data();
        let mut out = vec![0.0; xd.len()];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = n;
            let denom = n.max(eps);
            for c in 0..cols {
                out[r * cols + c] = row[c] / denom;
            }
        }
        let out = Tensor::from_parts(shape, out);
        let out_id = self.push(out, None).0;
        self.backs[out_id] = Some(Box::new(move |g, vals, grads| {
            let y = &vals[out_id];
            let mut gx = vec![0.0; y.numel()];
            for r in 0..rows {
                let grow = &g.data()[r * cols..(r + 1) * cols];
                let yrow = &y.data()[r * cols..(r + 1) * cols];
                if norms[r] > eps {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = (grow[c] - yrow[c] * dot) / norms[r];
                    }
                } else {
                    // Below the guard the map is linear: y = x / eps.
                    for c in 0..cols {
                        gx[r * cols + c] = grow[c] / eps;
                    }
                }
            }
            accumulate(&mut grads[x.0], &gx);
        }));
        Ok(Value(out_id))
    }

    // ---- structural ----

    pub fn reshape(&mut self, x: Value, shape: &[usize]) -> Result<Value> {
        let numel: usize = shape.iter().product();
        if numel != self.values[x.0].numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.values[x.0].shape(), shape),
            ));
        }
        let out = Tensor::from_parts(shape.to_vec(), self.values[x.0].data().to_vec());
        Ok(self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                accumulate(&mut grads[x.0], g.data());
            })),
        ))
    }

    /// Stacks b's rows below a's rows; both rank 2 with equal column counts.
    pub fn concat_rows(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ash, bsh) = (self.values[a.0].shape(), self.values[b.0].shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[1] {
            return Err(Error::shape("concat_rows", format!("{ash:?} + {bsh:?}")));
        }
        let (ra, rb, cols) = (ash[0], bsh[0], ash[1]);
        let mut data = Vec::with_capacity((ra + rb) * cols);
        data.extend_from_slice(self.values[a.0].data());
        data.extend_from_slice(self.values[b.0].data());
        let out = Tensor::from_parts(vec![ra + rb, cols], data);
        Ok(self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                accumulate(&mut grads[a.0], &g.data()[..ra * cols]);
                accumulate(&mut grads[b.0], &g.data()[ra * cols..]);
            })),
        ))
    }

    /// Gathers rows of a 2-D tensor; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, x: Value, indices: &[usize]) -> Result<Value> {
        let shape = self.values[x.0].shape();
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", format!("{shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let idx = indices.to_vec();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(&self.values[x.0].data()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::from_parts(vec![idx.len(), cols], data);
        Ok(self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                let gx = grads[x.0].data_mut();
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        gx[i * cols + c] += g.data()[k * cols + c];
                    }
                }
            })),
        ))
    }

    /// Column range [lo, hi) of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Value, lo: usize, hi: usize) -> Result<Value> {
        let shape = self.values[x.0].shape();
        if shape.len() != 2 || lo >= hi || hi > shape[1] {
            return Err(Error::shape(
                "slice_cols",
                format!("[{lo},{hi}) of {shape:?}"),
            ));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let width = hi - lo;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.values[x.0].data()[r * cols + lo..r * cols + hi]);
        }
        let out = Tensor::from_parts(vec![rows, width], data);
        Ok(self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                let gx = grads[x.0].data_mut();
                for r in 0..rows {
                    for c in 0..width {
                        gx[r * cols + lo + c] += g.data()[r * width + c];
                    }
                }
            })),
        ))
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts".to_string()));
        }
        let rows = self.values[parts[0].0].shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.values[p.0].shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", format!("{s:?}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(widths.iter()) {
            let pd = self.values[p.0].data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out = Tensor::from_parts(vec![rows, total], data);
        Ok(self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                let mut off = 0;
                for (&id, &w) in ids.iter().zip(widths.iter()) {
                    let gp = grads[id].data_mut();
                    for r in 0..rows {
                        for c in 0..w {
                            gp[r * w + c] += g.data()[r * total + off + c];
                        }
                    }
                    off += w;
                }
            })),
        ))
    }

    // ---- losses ----

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn ce_loss(&mut self, logits: Value, targets: &[usize]) -> Result<Value> {
        let shape = self.values[logits.0].shape();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "ce_loss",
                format!("logits {shape:?} vs {} targets", targets.len()),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("ce_loss", format!("target {bad} >= {c}")));
        }
        let tg = targets.to_vec();
        let xd = self.values[logits.0].data();
        let mut total = 0.0;
        for (r, &t) in tg.iter().enumerate() {
            let row = &xd[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let gs = g.item() / n as f64;
                let xd = vals[logits.0].data();
                let mut gx = vec![0.0; n * c];
                for (r, &t) in tg.iter().enumerate() {
                    let row = &xd[r * c..(r + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = row.iter().map(|z| (z - m).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - m).exp() / s;
                        gx[r * c + j] = gs * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                accumulate(&mut grads[logits.0], &gx);
            })),
        ))
    }

    /// Mean focal loss: (1 - p_t)^gamma times the cross-entropy term.
    /// gamma = 0 reproduces `ce_loss` exactly.
    pub fn focal_loss(&mut self, logits: Value, targets: &[usize], gamma: f64) -> Result<Value> {
        let shape = self.values[logits.0].shape();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "focal_loss",
                format!("logits {shape:?} vs {} targets", targets.len()),
            ));
        }
        if gamma < 0.0 {
            return Err(Error::config(format!("focal gamma must be >= 0, got {gamma}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("focal_loss", format!("target {bad} >= {c}")));
        }
        let tg = targets.to_vec();
        let xd = self.values[logits.0].data();
        let mut total = 0.0;
        for (r, &t) in tg.iter().enumerate() {
            let row = &xd[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            let l_t = lse - row[t];
            let p_t = (-l_t).exp();
            let w = if gamma == 0.0 {
                1.0
            } else {
                (1.0 - p_t).max(0.0).powf(gamma)
            };
            total += w * l_t;
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let gs = g.item() / n as f64;
                let xd = vals[logits.0].data();
                let mut gx = vec![0.0; n * c];
                for (r, &t) in tg.iter().enumerate() {
                    let row = &xd[r * c..(r + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = row.iter().map(|z| (z - m).exp()).sum();
                    let p_t = (row[t] - m).exp() / s;
                    let l_t = -(p_t.max(f64::MIN_POSITIVE)).ln();
                    let q = (1.0 - p_t).max(0.0);
                    // d/dz_j [(1-p_t)^g * l_t] = A * (p_j - delta_tj)
                    let a = if q == 0.0 {
                        if gamma == 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        gamma * q.powf(gamma - 1.0) * l_t * p_t + q.powf(gamma)
                    };
                    for j in 0..c {
                        let p_j = (row[j] - m).exp() / s;
                        gx[r * c + j] =
                            gs * a * (p_j - if j == t { 1.0 } else { 0.0 });
                    }
                }
                accumulate(&mut grads[logits.0], &gx);
            })),
        ))
    }

    /// Cross-entropy with per-sample, per-class negative-logit weights.
    /// `weights[r][t_r]` must be 1; other entries rescale competing logits
    /// inside the partition function. The weights are treated as constants.
    pub fn weighted_negative_ce_loss(
        &mut self,
        logits: Value,
        targets: &[usize],
        weights: &Tensor,
    ) -> Result<Value> {
        let shape = self.values[logits.0].shape().to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || weights.shape() != shape.as_slice() {
            return Err(Error::shape(
                "weighted_negative_ce_loss",
                format!(
                    "logits {shape:?}, {} targets, weights {:?}",
                    targets.len(),
                    weights.shape()
                ),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(
                "weighted_negative_ce_loss",
                format!("target {bad} >= {c}"),
            ));
        }
        let tg = targets.to_vec();
        let wd = weights.data().to_vec();
        let xd = self.values[logits.0].data();
        let mut total = 0.0;
        for (r, &t) in tg.iter().enumerate() {
            let row = &xd[r * c..(r + 1) * c];
            let wrow = &wd[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..c).map(|j| wrow[j] * (row[j] - m).exp()).sum();
            total += s.ln() + m - row[t];
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let gs = g.item() / n as f64;
                let xd = vals[logits.0].data();
                let mut gx = vec![0.0; n * c];
                for (r, &t) in tg.iter().enumerate() {
                    let row = &xd[r * c..(r + 1) * c];
                    let wrow = &wd[r * c..(r + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = (0..c).map(|j| wrow[j] * (row[j] - m).exp()).sum();
                    for j in 0..c {
                        let p = wrow[j] * (row[j] - m).exp() / s;
                        gx[r * c + j] = gs * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                accumulate(&mut grads[logits.0], &gx);
            })),
        ))
    }

    /// Positively-reweighted binary cross-entropy on logits, mean-reduced over
    /// all cells: -mean(pw * y * log sig(x) + (1 - y) * log(1 - sig(x))).
    /// Uses softplus forms throughout, so large-magnitude logits are safe.
    pub fn weighted_bce_loss(
        &mut self,
        logits: Value,
        targets: &Tensor,
        positive_weight: f64,
    ) -> Result<Value> {
        let shape = self.values[logits.0].shape().to_vec();
        if targets.shape() != shape.as_slice() {
            return Err(Error::shape(
                "weighted_bce_loss",
                format!("logits {:?} vs targets {:?}", shape, targets.shape()),
            ));
        }
        if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::shape(
                "weighted_bce_loss",
                "targets must be 0/1".to_string(),
            ));
        }
        if !(positive_weight.is_finite() && positive_weight >= 0.0) {
            return Err(Error::config(format!(
                "positive weight must be finite and >= 0, got {positive_weight}"
            )));
        }
        let n = self.values[logits.0].numel() as f64;
        let yd = targets.data().to_vec();
        let xd = self.values[logits.0].data();
        let mut total = 0.0;
        for (x, y) in xd.iter().zip(yd.iter()) {
            // -y*log sig(x) = y*softplus(-x); -(1-y)*log(1-sig(x)) = (1-y)*softplus(x)
            total += positive_weight * y * softplus(-x) + (1.0 - y) * softplus(*x);
        }
        let out = Tensor::scalar(total / n);
        Ok(self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let gs = g.item() / n;
                let xd = vals[logits.0].data();
                let gx: Vec<f64> = xd
                    .iter()
                    .zip(yd.iter())
                    .map(|(&x, &y)| {
                        let s = stable_sigmoid(x);
                        gs * (-positive_weight * y * (1.0 - s) + (1.0 - y) * s)
                    })
                    .collect();
                accumulate(&mut grads[logits.0], &gx);
            })),
        ))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Value, f64)]) -> Result<Value> {
        if terms.is_empty() {
            return Err(Error::shape("weighted_sum", "no terms".to_string()));
        }
        let mut total = 0.0;
        for (v, c) in terms {
            if self.values[v.0].numel() != 1 {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("term has shape {:?}", self.values[v.0].shape()),
                ));
            }
            total += c * self.values[v.0].item();
        }
        let captured: Vec<(usize, f64)> = terms.iter().map(|(v, c)| (v.0, *c)).collect();
        let out = Tensor::scalar(total);
        Ok(self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                let gv = g.item();
                for &(id, c) in &captured {
                    let gd = grads[id].data_mut();
                    gd[0] += gv * c;
                }
            })),
        ))
    }

    // ---- driver ----

    /// Runs reverse-mode accumulation from a scalar node. Returns one
    /// gradient tensor per tape node; leaves hold the gradients of interest.
    pub fn backward(&self, loss: Value) -> Result<Vec<Tensor>> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.values[loss.0].shape()),
            ));
        }
        let mut grads: Vec<Tensor> = self
            .values
            .iter()
            .map(|v| Tensor::zeros(v.shape()))
            .collect();
        grads[loss.0] = Tensor::filled(self.values[loss.0].shape(), 1.0);
        for i in (0..=loss.0).rev() {
            if let Some(back) = &self.backs[i] {
                if grads[i].data().iter().all(|&v| v == 0.0) {
                    continue;
                }
                let g = std::mem::replace(&mut grads[i], Tensor::zeros(&[]));
                back(&g, &self.values, &mut grads);
                grads[i] = g;
            }
        }
        Ok(grads)
    }
}

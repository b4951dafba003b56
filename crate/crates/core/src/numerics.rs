//! Dense 64-bit tensors and a small reverse-mode tape.
//!
//! Forward math lives in plain slice functions so inference does not pay for
//! recording. The [`Tape`] records the same primitives over vector values and
//! pushes gradients back into parameter tensors.
//!
//! Subgradient conventions: d|x|/dx at 0 is 0, and dReLU/dx at 0 is 0.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-major dense tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Checked matrix-vector product.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.shape.len() != 2 || self.shape[1] != x.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "matvec of {:?} with vector of length {}",
                self.shape,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.shape[0]];
        matvec_acc(&self.data, self.shape[1], x, &mut out);
        Ok(out)
    }
}

/// `out += W x` for a row-major `W` with `cols` columns.
#[inline]
pub fn matvec_acc(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (row, o) in w.chunks_exact(cols).zip(out.iter_mut()) {
        let mut s = 0.0;
        for (a, b) in row.iter().zip(x) {
            s += a * b;
        }
        *o += s;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        0.0
    }
}

pub fn manhattan(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = logsumexp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    /// A rank-1 parameter used as a value.
    Param(usize),
    /// `Σ W_k x_k (+ b)` over parameter matrices.
    Affine {
        terms: Vec<(usize, VarId)>,
        bias: Option<usize>,
    },
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Sum(Vec<VarId>),
    Scale(VarId, f64),
    AddScalar(VarId),
    Square(VarId),
    Sigmoid(VarId),
    Tanh(VarId),
    Relu(VarId),
    Concat(VarId, VarId),
    Index(VarId, usize),
    Manhattan(VarId, VarId),
    LogSumExp(VarId),
    Softmax(VarId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Records vector-valued operations over a fixed parameter list.
pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(1024),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: VarId) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op, name: &'static str) -> Result<VarId> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(VarId(self.nodes.len() - 1))
    }

    fn same_len(&self, a: VarId, b: VarId, what: &str) -> Result<usize> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(NumericsError::ShapeMismatch(format!("{what}: {la} vs {lb}")));
        }
        Ok(la)
    }

    pub fn input(&mut self, value: Vec<f64>) -> Result<VarId> {
        self.push(value, Op::Input, "input")
    }

    pub fn param(&mut self, index: usize) -> Result<VarId> {
        let t = &self.params[index];
        if t.shape().len() != 1 {
            return Err(NumericsError::ShapeMismatch(format!(
                "parameter {index} has shape {:?}, expected a vector",
                t.shape()
            )));
        }
        self.push(t.data().to_vec(), Op::Param(index), "param")
    }

    /// `Σ W_k x_k + b`; every `W_k` must have the same row count.
    pub fn affine(&mut self, terms: &[(usize, VarId)], bias: Option<usize>) -> Result<VarId> {
        let rows = match (terms.first(), bias) {
            (Some(&(w, _)), _) => self.params[w].rows(),
            (None, Some(b)) => self.params[b].len(),
            (None, None) => {
                return Err(NumericsError::ShapeMismatch("empty affine map".into()));
            }
        };
        let mut out = vec![0.0; rows];
        for &(w, x) in terms {
            let m = &self.params[w];
            let xv = self.value(x);
            if m.shape().len() != 2 || m.rows() != rows || m.cols() != xv.len() {
                return Err(NumericsError::ShapeMismatch(format!(
                    "affine term {:?} applied to length {} (rows {rows})",
                    m.shape(),
                    xv.len()
                )));
            }
            matvec_acc(m.data(), m.cols(), xv, &mut out);
        }
        if let Some(b) = bias {
            let bv = self.params[b].data();
            if bv.len() != rows {
                return Err(NumericsError::ShapeMismatch(format!(
                    "bias of length {} for {rows} rows",
                    bv.len()
                )));
            }
            out.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        self.push(
            out,
            Op::Affine {
                terms: terms.to_vec(),
                bias,
            },
            "affine",
        )
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_len(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_len(a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_len(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Elementwise sum of several values, accumulated left to right.
    pub fn sum(&mut self, xs: &[VarId]) -> Result<VarId> {
        let first = *xs
            .first()
            .ok_or_else(|| NumericsError::ShapeMismatch("empty sum".into()))?;
        let mut v = self.value(first).to_vec();
        for &x in &xs[1..] {
            self.same_len(first, x, "sum")?;
            v.iter_mut().zip(self.value(x)).for_each(|(a, b)| *a += b);
        }
        self.push(v, Op::Sum(xs.to_vec()), "sum")
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> Result<VarId> {
        let v = self.value(a).iter().map(|x| x * s).collect();
        self.push(v, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: VarId, s: f64) -> Result<VarId> {
        let v = self.value(a).iter().map(|x| x + s).collect();
        self.push(v, Op::AddScalar(a), "add_scalar")
    }

    pub fn square(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).iter().map(|x| x * x).collect();
        self.push(v, Op::Square(a), "square")
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(v, Op::Tanh(a), "tanh")
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).iter().map(|&x| relu(x)).collect();
        self.push(v, Op::Relu(a), "relu")
    }

    pub fn concat(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let mut v = self.value(a).to_vec();
        v.extend_from_slice(self.value(b));
        self.push(v, Op::Concat(a, b), "concat")
    }

    pub fn index(&mut self, a: VarId, i: usize) -> Result<VarId> {
        let x = *self.value(a).get(i).ok_or_else(|| {
            NumericsError::ShapeMismatch(format!("index {i} out of {}", self.value(a).len()))
        })?;
        self.push(vec![x], Op::Index(a, i), "index")
    }

    pub fn manhattan(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_len(a, b, "manhattan")?;
        let v = manhattan(self.value(a), self.value(b));
        self.push(vec![v], Op::Manhattan(a, b), "manhattan")
    }

    pub fn logsumexp(&mut self, a: VarId) -> Result<VarId> {
        let v = logsumexp(self.value(a));
        self.push(vec![v], Op::LogSumExp(a), "logsumexp")
    }

    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        let v = softmax(self.value(a));
        self.push(v, Op::Softmax(a), "softmax")
    }

    /// Backpropagates from the scalar `root`, adding parameter gradients into
    /// `grads` (one tensor per parameter, same shapes as the tape's params).
    pub fn backward_into(&self, root: VarId, grads: &mut [Tensor]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer count");
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut g: Vec<Vec<f64>> = vec![Vec::new(); root.0 + 1];
        g[root.0] = vec![1.0];

        fn acc(slot: &mut Vec<f64>, len: usize) -> &mut Vec<f64> {
            if slot.is_empty() {
                slot.resize(len, 0.0);
            }
            slot
        }

        for i in (0..=root.0).rev() {
            if g[i].is_empty() {
                continue;
            }
            let gi = std::mem::take(&mut g[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    grads[*p].data_mut().iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
                }
                Op::Affine { terms, bias } => {
                    for &(w, x) in terms {
                        let m = &self.params[w];
                        let cols = m.cols();
                        let xv = &self.nodes[x.0].value;
                        let gw = grads[w].data_mut();
                        for (r, &go) in gi.iter().enumerate() {
                            if go != 0.0 {
                                let row = &mut gw[r * cols..(r + 1) * cols];
                                row.iter_mut().zip(xv).for_each(|(a, b)| *a += go * b);
                            }
                        }
                        let gx = acc(&mut g[x.0], cols);
                        for (r, &go) in gi.iter().enumerate() {
                            if go != 0.0 {
                                let row = &m.data()[r * cols..(r + 1) * cols];
                                gx.iter_mut().zip(row).for_each(|(a, b)| *a += go * b);
                            }
                        }
                    }
                    if let Some(b) = bias {
                        grads[*b].data_mut().iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Add(a, b) => {
                    for x in [a, b] {
                        let gx = acc(&mut g[x.0], gi.len());
                        gx.iter_mut().zip(&gi).for_each(|(s, d)| *s += d);
                    }
                }
                Op::Sub(a, b) => {
                    let ga = acc(&mut g[a.0], gi.len());
                    ga.iter_mut().zip(&gi).for_each(|(s, d)| *s += d);
                    let gb = acc(&mut g[b.0], gi.len());
                    gb.iter_mut().zip(&gi).for_each(|(s, d)| *s -= d);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da: Vec<f64> = gi.iter().zip(vb).map(|(d, y)| d * y).collect();
                    let db: Vec<f64> = gi.iter().zip(va).map(|(d, x)| d * x).collect();
                    let ga = acc(&mut g[a.0], gi.len());
                    ga.iter_mut().zip(&da).for_each(|(s, d)| *s += d);
                    let gb = acc(&mut g[b.0], gi.len());
                    gb.iter_mut().zip(&db).for_each(|(s, d)| *s += d);
                }
                Op::Sum(xs) => {
                    for x in xs {
                        let gx = acc(&mut g[x.0], gi.len());
                        gx.iter_mut().zip(&gi).for_each(|(s, d)| *s += d);
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut g[a.0], gi.len());
                    ga.iter_mut().zip(&gi).for_each(|(x, d)| *x += d * s);
                }
                Op::AddScalar(a) => {
                    let ga = acc(&mut g[a.0], gi.len());
                    ga.iter_mut().zip(&gi).for_each(|(x, d)| *x += d);
                }
                Op::Square(a) => {
                    let va = &self.nodes[a.0].value;
                    let d: Vec<f64> = gi.iter().zip(va).map(|(d, x)| 2.0 * x * d).collect();
                    let ga = acc(&mut g[a.0], gi.len());
                    ga.iter_mut().zip(&d).for_each(|(x, d)| *x += d);
                }
                Op::Sigmoid(a) => {
                    let d: Vec<f64> = gi
                        .iter()
                        .zip(&node.value)
                        .map(|(d, y)| d * y * (1.0 - y))
                        .collect();
                    let ga = acc(&mut g[a.0], gi.len());
                    ga.iter_mut().zip(&d).for_each(|(x, d)| *x += d);
                }
                Op::Tanh(a) => {
                    let d: Vec<f64> = gi
                        .iter()
                        .zip(&node.value)
                        .map(|(d, y)| d * (1.0 - y * y))
                        .collect();
                    let ga = acc(&mut g[a.0], gi.len());
                    ga.iter_mut().zip(&d).for_each(|(x, d)| *x += d);
                }
                Op::Relu(a) => {
                    let va = &self.nodes[a.0].value;
                    let d: Vec<f64> = gi
                        .iter()
                        .zip(va)
                        .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                        .collect();
                    let ga = acc(&mut g[a.0], gi.len());
                    ga.iter_mut().zip(&d).for_each(|(x, d)| *x += d);
                }
                Op::Concat(a, b) => {
                    let la = self.nodes[a.0].value.len();
                    let ga = acc(&mut g[a.0], la);
                    ga.iter_mut().zip(&gi[..la]).for_each(|(x, d)| *x += d);
                    let lb = gi.len() - la;
                    let gb = acc(&mut g[b.0], lb);
                    gb.iter_mut().zip(&gi[la..]).for_each(|(x, d)| *x += d);
                }
                Op::Index(a, k) => {
                    let la = self.nodes[a.0].value.len();
                    acc(&mut g[a.0], la)[*k] += gi[0];
                }
                Op::Manhattan(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let s: Vec<f64> = va.iter().zip(vb).map(|(x, y)| gi[0] * sign(x - y)).collect();
                    let ga = acc(&mut g[a.0], s.len());
                    ga.iter_mut().zip(&s).for_each(|(x, d)| *x += d);
                    let gb = acc(&mut g[b.0], s.len());
                    gb.iter_mut().zip(&s).for_each(|(x, d)| *x -= d);
                }
                Op::LogSumExp(a) => {
                    let p = softmax(&self.nodes[a.0].value);
                    let ga = acc(&mut g[a.0], p.len());
                    ga.iter_mut().zip(&p).for_each(|(x, q)| *x += gi[0] * q);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dot: f64 = gi.iter().zip(y).map(|(d, y)| d * y).sum();
                    let d: Vec<f64> = gi.iter().zip(y).map(|(d, y)| y * (d - dot)).collect();
                    let ga = acc(&mut g[a.0], d.len());
                    ga.iter_mut().zip(&d).for_each(|(x, d)| *x += d);
                }
            }
        }
    }

    /// Gradient of `root` with respect to a recorded input value.
    pub fn input_gradient(&self, root: VarId, input: VarId) -> Vec<f64> {
        // Route the input's gradient through a synthetic parameter slot.
        let mut extended: Vec<Tensor> = self.params.to_vec();
        extended.push(Tensor::vector(self.value(input).to_vec()));
        let mut nodes = self.nodes.clone();
        nodes[input.0].op = Op::Param(extended.len() - 1);
        let tape = Tape {
            params: &extended,
            nodes,
        };
        let mut out: Vec<Tensor> = extended.iter().map(|p| Tensor::zeros(p.shape())).collect();
        tape.backward_into(root, &mut out);
        out.pop().unwrap().data
    }
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Central finite differences of `f` at `params` against `analytic`.
pub fn grad_check<F>(f: F, params: &[Tensor], analytic: &[Tensor], eps: f64) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for p in 0..params.len() {
        for k in 0..params[p].len() {
            let orig = work[p].data[k];
            work[p].data[k] = orig + eps;
            let up = f(&work);
            work[p].data[k] = orig - eps;
            let down = f(&work);
            work[p].data[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p].data[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (p, k);
            }
        }
    }
    report
}

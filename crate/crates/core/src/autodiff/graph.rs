use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm, sigmoid, swish, swish_grad};
use super::params::{Binding, ParamStore};
use super::{Tensor, TensorError};

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(0);

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId {
    graph: u32,
    index: u32,
}

impl VarId {
    fn idx(self) -> usize {
        self.index as usize
    }
}

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Log(usize),
    Exp(usize),
    Square(usize),
    Swish(usize),
    Sigmoid(usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    LayerNorm(usize),
    Dropout {
        input: usize,
        mask: Vec<f64>,
    },
    GaussLogDensity(usize),
    Reshape(usize),
    NarrowCols {
        input: usize,
        start: usize,
    },
    SelectCols {
        input: usize,
        cols: Vec<usize>,
    },
    MergeCols {
        a: usize,
        a_cols: Vec<usize>,
        b: usize,
        b_cols: Vec<usize>,
    },
    RepeatRows(usize),
    Bmv {
        weights: usize,
        input: usize,
    },
    Detach(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Min(..) => "min",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Swish(_) => "swish",
            Op::Sigmoid(_) => "sigmoid",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::LayerNorm(_) => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::GaussLogDensity(_) => "gauss_log_density",
            Op::Reshape(_) => "reshape",
            Op::NarrowCols { .. } => "narrow_cols",
            Op::SelectCols { .. } => "select_cols",
            Op::MergeCols { .. } => "merge_cols",
            Op::RepeatRows(_) => "repeat_rows",
            Op::Bmv { .. } => "bmv",
            Op::Detach(_) => "detach",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Min(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b) => vec![a, b],
            Op::MergeCols { a, b, .. } => vec![a, b],
            Op::Bmv { weights, input } => vec![weights, input],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Swish(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::LayerNorm(a)
            | Op::GaussLogDensity(a)
            | Op::Reshape(a)
            | Op::RepeatRows(a)
            | Op::Detach(a) => vec![a],
            Op::Dropout { input, .. } | Op::NarrowCols { input, .. } | Op::SelectCols { input, .. } => vec![input],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A tape of recorded tensor operations supporting reverse-mode gradients.
///
/// Operations are appended in execution order, which is a topological order
/// of the computation, so [`Graph::backward`] walks the node list in reverse.
/// Every op output is checked for NaN/Inf and rejected with
/// [`TensorError::NonFinite`].
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    mode: Mode,
    rng: Option<ChaCha8Rng>,
}

impl Graph {
    /// An evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            mode: Mode::Eval,
            rng: None,
        }
    }

    /// A training-mode graph; dropout masks are drawn from `rng`.
    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            mode: Mode::Train,
            rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[self.check(v)].value
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: VarId) -> bool {
        self.nodes[self.check(v)].requires_grad
    }

    fn check(&self, v: VarId) -> usize {
        assert!(
            v.graph == self.id && v.idx() < self.nodes.len(),
            "variable does not belong to this graph"
        );
        v.idx()
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        VarId {
            graph: self.id,
            index: (self.nodes.len() - 1) as u32,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    /// Places every parameter of `store` on the tape as a leaf.
    pub fn bind(&mut self, store: &ParamStore, requires_grad: bool) -> Binding {
        let vars = store
            .tensors()
            .iter()
            .map(|t| self.leaf(t.clone(), requires_grad))
            .collect();
        Binding::new(vars)
    }

    fn push(&mut self, op: Op) -> Result<VarId, TensorError> {
        let value = self.apply(&op)?.ensure_finite(op.name())?;
        let requires_grad = match op {
            Op::Detach(_) => false,
            _ => op.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(VarId {
            graph: self.id,
            index: (self.nodes.len() - 1) as u32,
        })
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<(), TensorError> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn dims2(&self, op: &'static str, a: usize) -> Result<(usize, usize), TensorError> {
        self.val(a).dims2().ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: self.val(a).shape().to_vec(),
            rhs: vec![],
        })
    }

    fn zip_map(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_raw(ta.shape().to_vec(), data)
    }

    fn map(&self, a: usize, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.val(a);
        Tensor::from_raw(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    /// Computes the output of `op` from the stored input values.
    fn apply(&self, op: &Op) -> Result<Tensor, TensorError> {
        let name = op.name();
        Ok(match *op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::Add(a, b) => {
                self.same_shape(name, a, b)?;
                self.zip_map(a, b, |x, y| x + y)
            }
            Op::Sub(a, b) => {
                self.same_shape(name, a, b)?;
                self.zip_map(a, b, |x, y| x - y)
            }
            Op::Mul(a, b) => {
                self.same_shape(name, a, b)?;
                self.zip_map(a, b, |x, y| x * y)
            }
            Op::Div(a, b) => {
                self.same_shape(name, a, b)?;
                self.zip_map(a, b, |x, y| x / y)
            }
            Op::Min(a, b) => {
                self.same_shape(name, a, b)?;
                self.zip_map(a, b, |x, y| if x <= y { x } else { y })
            }
            Op::Neg(a) => self.map(a, |x| -x),
            Op::Scale(a, c) => self.map(a, |x| c * x),
            Op::AddScalar(a, c) => self.map(a, |x| x + c),
            Op::Log(a) => self.map(a, f64::ln),
            Op::Exp(a) => self.map(a, f64::exp),
            Op::Square(a) => self.map(a, |x| x * x),
            Op::Swish(a) => self.map(a, swish),
            Op::Sigmoid(a) => self.map(a, sigmoid),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(name, a)?;
                let tb = self.val(b);
                let (k2, n, out_shape) = match tb.shape() {
                    &[k2, n] => (k2, n, vec![m, n]),
                    &[k2] => (k2, 1, vec![m]),
                    s => {
                        return Err(TensorError::ShapeMismatch {
                            op: name,
                            lhs: vec![m, k],
                            rhs: s.to_vec(),
                        })
                    }
                };
                if k != k2 {
                    return Err(TensorError::ShapeMismatch {
                        op: name,
                        lhs: vec![m, k],
                        rhs: tb.shape().to_vec(),
                    });
                }
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, self.val(a).data(), false, tb.data(), false, &mut c, false);
                Tensor::from_raw(out_shape, c)
            }
            Op::AddRow(a, b) => {
                let (m, n) = self.dims2(name, a)?;
                let tb = self.val(b);
                if tb.shape() != [n] {
                    return Err(TensorError::ShapeMismatch {
                        op: name,
                        lhs: vec![m, n],
                        rhs: tb.shape().to_vec(),
                    });
                }
                let mut out = self.val(a).data().to_vec();
                for row in out.chunks_exact_mut(n.max(1)) {
                    for (x, y) in row.iter_mut().zip(tb.data()) {
                        *x += y;
                    }
                }
                Tensor::from_raw(vec![m, n], out)
            }
            Op::Sum(a) => Tensor::from_raw(vec![], vec![self.val(a).data().iter().sum()]),
            Op::Mean(a) => {
                let t = self.val(a);
                if t.is_empty() {
                    return Err(TensorError::Empty { op: name });
                }
                Tensor::from_raw(vec![], vec![t.data().iter().sum::<f64>() / t.len() as f64])
            }
            Op::SumRows(a) => {
                let (m, n) = self.dims2(name, a)?;
                let data = if n == 0 {
                    vec![0.0; m]
                } else {
                    self.val(a).data().chunks_exact(n).map(|r| r.iter().sum()).collect()
                };
                Tensor::from_raw(vec![m], data)
            }
            Op::LayerNorm(a) => {
                let (m, n) = self.dims2(name, a)?;
                let mut out = vec![0.0; m * n];
                for (src, dst) in self.val(a).data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                    let (mean, rstd) = row_moments(src);
                    for (d, &x) in dst.iter_mut().zip(src) {
                        *d = (x - mean) * rstd;
                    }
                }
                Tensor::from_raw(vec![m, n], out)
            }
            Op::Dropout { input, ref mask } => {
                let t = self.val(input);
                let data = t.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                Tensor::from_raw(t.shape().to_vec(), data)
            }
            Op::GaussLogDensity(a) => {
                let t = self.val(a);
                match t.shape() {
                    &[m, n] => {
                        let data = (0..m).map(|i| gauss_log_density(t.row(i))).collect();
                        let _ = n;
                        Tensor::from_raw(vec![m], data)
                    }
                    &[_] => Tensor::from_raw(vec![], vec![gauss_log_density(t.data())]),
                    s => {
                        return Err(TensorError::ShapeMismatch {
                            op: name,
                            lhs: s.to_vec(),
                            rhs: vec![],
                        })
                    }
                }
            }
            Op::Reshape(_) => unreachable!("reshape is materialized in Graph::reshape"),
            Op::NarrowCols { .. } => {
                unreachable!("narrow_cols is materialized in Graph::narrow_cols")
            }
            Op::SelectCols { input, ref cols } => {
                let (m, n) = self.dims2(name, input)?;
                if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
                    return Err(TensorError::IndexOutOfRange {
                        op: name,
                        index: bad,
                        len: n,
                    });
                }
                let t = self.val(input);
                let mut out = Vec::with_capacity(m * cols.len());
                for i in 0..m {
                    let row = t.row(i);
                    out.extend(cols.iter().map(|&c| row[c]));
                }
                Tensor::from_raw(vec![m, cols.len()], out)
            }
            Op::MergeCols {
                a,
                ref a_cols,
                b,
                ref b_cols,
            } => {
                let (m, na) = self.dims2(name, a)?;
                let (mb, nb) = self.dims2(name, b)?;
                let width = a_cols.len() + b_cols.len();
                let mut seen = vec![false; width];
                for &c in a_cols.iter().chain(b_cols) {
                    if c >= width || std::mem::replace(&mut seen[c], true) {
                        return Err(TensorError::IndexOutOfRange {
                            op: name,
                            index: c,
                            len: width,
                        });
                    }
                }
                if m != mb || na != a_cols.len() || nb != b_cols.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: name,
                        lhs: vec![m, na],
                        rhs: vec![mb, nb],
                    });
                }
                let (ta, tb) = (self.val(a), self.val(b));
                let mut out = vec![0.0; m * width];
                for i in 0..m {
                    let dst = &mut out[i * width..(i + 1) * width];
                    for (&c, &x) in a_cols.iter().zip(ta.row(i)) {
                        dst[c] = x;
                    }
                    for (&c, &x) in b_cols.iter().zip(tb.row(i)) {
                        dst[c] = x;
                    }
                }
                Tensor::from_raw(vec![m, width], out)
            }
            Op::RepeatRows(_) => unreachable!("repeat_rows is materialized in Graph::repeat_rows"),
            Op::Bmv { weights, input } => {
                let (m, wn) = self.dims2(name, weights)?;
                let (mx, inp) = self.dims2(name, input)?;
                if m != mx || (inp == 0 && wn != 0) || (inp > 0 && wn % inp != 0) {
                    return Err(TensorError::ShapeMismatch {
                        op: name,
                        lhs: vec![m, wn],
                        rhs: vec![mx, inp],
                    });
                }
                let out_dim = wn.checked_div(inp).unwrap_or(0);
                let (tw, tx) = (self.val(weights), self.val(input));
                let mut out = vec![0.0; m * out_dim];
                for i in 0..m {
                    let w = tw.row(i);
                    let x = tx.row(i);
                    for o in 0..out_dim {
                        out[i * out_dim + o] = w[o * inp..(o + 1) * inp].iter().zip(x).map(|(a, b)| a * b).sum();
                    }
                }
                Tensor::from_raw(vec![m, out_dim], out)
            }
            Op::Detach(a) => self.val(a).clone(),
        })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (a, b) = (self.check(a), self.check(b));
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (a, b) = (self.check(a), self.check(b));
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (a, b) = (self.check(a), self.check(b));
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (a, b) = (self.check(a), self.check(b));
        self.push(Op::Div(a, b))
    }

    /// Elementwise minimum. On ties the gradient goes to `a`.
    pub fn min(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (a, b) = (self.check(a), self.check(b));
        self.push(Op::Min(a, b))
    }

    pub fn neg(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::Neg(a))
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::AddScalar(a, c))
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::Log(a))
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::Exp(a))
    }

    pub fn square(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::Square(a))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::Swish(a))
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::Sigmoid(a))
    }

    /// `[m,k] × [k,n] → [m,n]`, or `[m,k] × [k] → [m]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (a, b) = (self.check(a), self.check(b));
        self.push(Op::MatMul(a, b))
    }

    /// Adds the vector `b: [n]` to every row of `a: [m,n]`.
    pub fn add_row(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (a, b) = (self.check(a), self.check(b));
        self.push(Op::AddRow(a, b))
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::Mean(a))
    }

    /// `[m,n] → [m]`.
    pub fn sum_rows(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::SumRows(a))
    }

    /// Normalizes each row of `[m,n]` to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::LayerNorm(a))
    }

    /// Inverted dropout in training mode, identity in evaluation mode.
    pub fn dropout(&mut self, a: VarId, rate: f64) -> Result<VarId, TensorError> {
        let ai = self.check(a);
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.val(ai).len();
        let rng = self.rng.as_mut().expect("training graphs own an rng");
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.push(Op::Dropout { input: ai, mask })
    }

    /// Log-density of a unit Gaussian, row-wise for `[m,D] → [m]` or for a
    /// single vector `[D] → []`.
    pub fn gauss_log_density(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::GaussLogDensity(a))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId, TensorError> {
        let ai = self.check(a);
        let value = self.val(ai).reshaped(shape)?;
        let requires_grad = self.nodes[ai].requires_grad;
        self.nodes.push(Node {
            op: Op::Reshape(ai),
            value,
            requires_grad,
        });
        Ok(VarId {
            graph: self.id,
            index: (self.nodes.len() - 1) as u32,
        })
    }

    /// Columns `start..start+len` of a `[m,n]` matrix.
    pub fn narrow_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId, TensorError> {
        let ai = self.check(a);
        let (m, n) = self.dims2("narrow_cols", ai)?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow_cols",
                index: start + len,
                len: n,
            });
        }
        let t = self.val(ai);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let value = Tensor::from_raw(vec![m, len], out);
        let requires_grad = self.nodes[ai].requires_grad;
        self.nodes.push(Node {
            op: Op::NarrowCols { input: ai, start },
            value,
            requires_grad,
        });
        Ok(VarId {
            graph: self.id,
            index: (self.nodes.len() - 1) as u32,
        })
    }

    /// Gathers the listed columns, in order.
    pub fn select_cols(&mut self, a: VarId, cols: &[usize]) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::SelectCols {
            input: a,
            cols: cols.to_vec(),
        })
    }

    /// Interleaves the columns of `a` and `b` into one matrix: column `j` of
    /// `a` lands at `a_cols[j]`, likewise for `b`. Together the index lists
    /// must cover `0..a_cols.len()+b_cols.len()` exactly once.
    pub fn merge_cols(&mut self, a: VarId, a_cols: &[usize], b: VarId, b_cols: &[usize]) -> Result<VarId, TensorError> {
        let (a, b) = (self.check(a), self.check(b));
        self.push(Op::MergeCols {
            a,
            a_cols: a_cols.to_vec(),
            b,
            b_cols: b_cols.to_vec(),
        })
    }

    /// Tiles a `[1,n]` matrix into `[times,n]`.
    pub fn repeat_rows(&mut self, a: VarId, times: usize) -> Result<VarId, TensorError> {
        let ai = self.check(a);
        let (m, n) = self.dims2("repeat_rows", ai)?;
        if m != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "repeat_rows",
                lhs: vec![m, n],
                rhs: vec![1, n],
            });
        }
        let row = self.val(ai).data();
        let mut out = Vec::with_capacity(times * n);
        for _ in 0..times {
            out.extend_from_slice(row);
        }
        let value = Tensor::from_raw(vec![times, n], out);
        let requires_grad = self.nodes[ai].requires_grad;
        self.nodes.push(Node {
            op: Op::RepeatRows(ai),
            value,
            requires_grad,
        });
        Ok(VarId {
            graph: self.id,
            index: (self.nodes.len() - 1) as u32,
        })
    }

    /// Row-wise matrix–vector product: row `i` of `weights: [m, out·in]` is
    /// read as a row-major `out×in` matrix and applied to row `i` of
    /// `input: [m, in]`, giving `[m, out]`.
    pub fn bmv(&mut self, weights: VarId, input: VarId) -> Result<VarId, TensorError> {
        let (w, x) = (self.check(weights), self.check(input));
        self.push(Op::Bmv { weights: w, input: x })
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let a = self.check(a);
        self.push(Op::Detach(a))
    }

    /// Recomputes every recorded node from its recorded inputs and reports
    /// whether all outputs match bit-for-bit.
    pub fn replay(&self) -> Result<bool, TensorError> {
        for node in &self.nodes {
            let recomputed = match node.op {
                Op::Leaf => continue,
                Op::Reshape(a) => self.val(a).reshaped(node.value.shape().to_vec())?,
                Op::NarrowCols { input, start } => {
                    let t = self.val(input);
                    let (m, len) = node.value.dims2().expect("narrow output is 2-D");
                    let mut out = Vec::with_capacity(m * len);
                    for i in 0..m {
                        out.extend_from_slice(&t.row(i)[start..start + len]);
                    }
                    Tensor::from_raw(vec![m, len], out)
                }
                Op::RepeatRows(a) => {
                    let row = self.val(a).data();
                    let times = node.value.shape()[0];
                    Tensor::from_raw(node.value.shape().to_vec(), row.repeat(times))
                }
                ref op => self.apply(op)?,
            };
            let same = recomputed.shape() == node.value.shape()
                && recomputed
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: VarId) -> Result<Gradients, TensorError> {
        if loss.graph != self.id || loss.idx() >= self.nodes.len() {
            return Err(TensorError::NotOnTape);
        }
        let root = loss.idx();
        if !self.nodes[root].value.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: self.nodes[root].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), 1.0));
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let acc = |grads: &mut [Option<Tensor>], j: usize, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[j].requires_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| Tensor::zeros(self.nodes[j].value.shape()));
            f(slot.data_mut());
        };
        match node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                acc(grads, a, &|d| add_into(d, gd));
                acc(grads, b, &|d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                acc(grads, a, &|d| add_into(d, gd));
                acc(grads, b, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                acc(grads, a, &|d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * vb[k];
                    }
                });
                acc(grads, b, &|d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * va[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                acc(grads, a, &|d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] / vb[k];
                    }
                });
                acc(grads, b, &|d| {
                    for k in 0..d.len() {
                        d[k] -= gd[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            Op::Min(a, b) => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                acc(grads, a, &|d| {
                    for k in 0..d.len() {
                        if va[k] <= vb[k] {
                            d[k] += gd[k];
                        }
                    }
                });
                acc(grads, b, &|d| {
                    for k in 0..d.len() {
                        if va[k] > vb[k] {
                            d[k] += gd[k];
                        }
                    }
                });
            }
            Op::Neg(a) => acc(grads, a, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x -= g)),
            Op::Scale(a, c) => acc(grads, a, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += c * g)),
            Op::AddScalar(a, _) | Op::Reshape(a) => acc(grads, a, &|d| add_into(d, gd)),
            Op::Log(a) => {
                let va = self.val(a).data();
                acc(grads, a, &|d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] / va[k];
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(grads, a, &|d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * y[k];
                    }
                });
            }
            Op::Square(a) => {
                let va = self.val(a).data();
                acc(grads, a, &|d| {
                    for k in 0..d.len() {
                        d[k] += 2.0 * va[k] * gd[k];
                    }
                });
            }
            Op::Swish(a) => {
                let va = self.val(a).data();
                acc(grads, a, &|d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * swish_grad(va[k]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(grads, a, &|d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.val(a).dims2().expect("checked in forward");
                let n = if self.val(b).ndim() == 2 {
                    self.val(b).shape()[1]
                } else {
                    1
                };
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(grads, a, &|d| gemm(m, n, k, gd, false, vb, true, d, true));
                acc(grads, b, &|d| gemm(k, m, n, va, true, gd, false, d, true));
            }
            Op::AddRow(a, b) => {
                let n = self.val(b).len();
                acc(grads, a, &|d| add_into(d, gd));
                acc(grads, b, &|d| {
                    if n > 0 {
                        for row in gd.chunks_exact(n) {
                            add_into(d, row);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                acc(grads, a, &|d| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(a) => {
                let n = self.val(a).len() as f64;
                let g0 = gd[0] / n;
                acc(grads, a, &|d| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::SumRows(a) => {
                let (_, n) = self.val(a).dims2().expect("checked in forward");
                acc(grads, a, &|d| {
                    if n > 0 {
                        for (row, &gi) in d.chunks_exact_mut(n).zip(gd) {
                            row.iter_mut().for_each(|x| *x += gi);
                        }
                    }
                });
            }
            Op::LayerNorm(a) => {
                let (_, n) = self.val(a).dims2().expect("checked in forward");
                let (va, y) = (self.val(a).data(), node.value.data());
                acc(grads, a, &|d| {
                    let nf = n as f64;
                    for r in 0..d.len() / n {
                        let span = r * n..(r + 1) * n;
                        let (_, rstd) = row_moments(&va[span.clone()]);
                        let (gr, yr) = (&gd[span.clone()], &y[span.clone()]);
                        let g_mean = gr.iter().sum::<f64>() / nf;
                        let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / nf;
                        for (k, dst) in d[span].iter_mut().enumerate() {
                            *dst += rstd * (gr[k] - g_mean - yr[k] * gy_mean);
                        }
                    }
                });
            }
            Op::Dropout { input, ref mask } => acc(grads, input, &|d| {
                for k in 0..d.len() {
                    d[k] += gd[k] * mask[k];
                }
            }),
            Op::GaussLogDensity(a) => {
                let va = self.val(a);
                let n = *va.shape().last().expect("non-scalar input");
                let vd = va.data();
                acc(grads, a, &|d| {
                    for (r, &gi) in gd.iter().enumerate() {
                        for k in r * n..(r + 1) * n {
                            d[k] -= gi * vd[k];
                        }
                    }
                });
            }
            Op::NarrowCols { input, start } => {
                let (_, n) = self.val(input).dims2().expect("checked in forward");
                let len = node.value.shape()[1];
                acc(grads, input, &|d| {
                    if len > 0 {
                        for (r, grow) in gd.chunks_exact(len).enumerate() {
                            add_into(&mut d[r * n + start..r * n + start + len], grow);
                        }
                    }
                });
            }
            Op::SelectCols { input, ref cols } => {
                let (_, n) = self.val(input).dims2().expect("checked in forward");
                let w = cols.len();
                acc(grads, input, &|d| {
                    if w > 0 {
                        for (r, grow) in gd.chunks_exact(w).enumerate() {
                            for (&c, g) in cols.iter().zip(grow) {
                                d[r * n + c] += g;
                            }
                        }
                    }
                });
            }
            Op::MergeCols {
                a,
                ref a_cols,
                b,
                ref b_cols,
            } => {
                let width = a_cols.len() + b_cols.len();
                for (src, cols) in [(a, a_cols), (b, b_cols)] {
                    let w = cols.len();
                    acc(grads, src, &|d| {
                        for (r, grow) in gd.chunks_exact(width.max(1)).enumerate() {
                            for (j, &c) in cols.iter().enumerate() {
                                d[r * w + j] += grow[c];
                            }
                        }
                    });
                }
            }
            Op::RepeatRows(a) => {
                let n = self.val(a).len();
                acc(grads, a, &|d| {
                    if n > 0 {
                        for row in gd.chunks_exact(n) {
                            add_into(d, row);
                        }
                    }
                });
            }
            Op::Bmv { weights, input } => {
                let (m, wn) = self.val(weights).dims2().expect("checked in forward");
                let inp = self.val(input).shape()[1];
                let out_dim = wn.checked_div(inp).unwrap_or(0);
                let (vw, vx) = (self.val(weights).data(), self.val(input).data());
                acc(grads, weights, &|d| {
                    for i in 0..m {
                        for o in 0..out_dim {
                            let go = gd[i * out_dim + o];
                            let base = i * wn + o * inp;
                            for j in 0..inp {
                                d[base + j] += go * vx[i * inp + j];
                            }
                        }
                    }
                });
                acc(grads, input, &|d| {
                    for i in 0..m {
                        for o in 0..out_dim {
                            let go = gd[i * out_dim + o];
                            let base = i * wn + o * inp;
                            for j in 0..inp {
                                d[i * inp + j] += go * vw[base + j];
                            }
                        }
                    }
                });
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn gauss_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI
}

/// Result of [`Graph::backward`]: one optional gradient per recorded node.
pub struct Gradients {
    graph: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient wrt `v`, if any flowed there.
    pub fn get(&self, v: VarId) -> Option<&Tensor> {
        assert_eq!(v.graph, self.graph, "variable does not belong to this graph");
        self.grads.get(v.idx()).and_then(Option::as_ref)
    }

    /// Gradient wrt `v`, zero-filled when `v` is unreachable from the loss.
    pub fn wrt(&self, g: &Graph, v: VarId) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    }

    /// Gradients for every parameter in a binding, in store order.
    pub fn for_binding(&self, g: &Graph, binding: &Binding) -> Vec<Tensor> {
        binding.vars().iter().map(|&v| self.wrt(g, v)).collect()
    }
}

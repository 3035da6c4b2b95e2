//! Dynamic computation tape for reverse-mode differentiation.
//!
//! A fresh [`Tape`] is built for every forward pass. Ops append nodes in
//! execution order, so node ids are already a topological order and the
//! backward sweep is a single reverse walk applying each op's local gradient
//! rule. Gradients accumulate in the tape; repeated `backward` calls add up
//! until [`Tape::zero_grads`] (so multi-loss accumulation behaves like the
//! usual autograd convention).

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

const LN_EPS: f64 = 1e-6;
// tanh-form gelu constants
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    MatmulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRowBias { a: usize, bias: usize },
    Scale { a: usize, c: f64 },
    Transpose { a: usize },
    Reshape { a: usize },
    ConcatRows { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    SoftmaxRows { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize },
    Gelu { a: usize },
    Sum { a: usize },
    CrossEntropy { logits: usize, labels: Vec<usize> },
    L1Loss { pred: usize, target: usize },
}

/// Context saved at forward time for the backward rule.
#[derive(Debug)]
enum Aux {
    None,
    /// Per-row (mean, rstd) for layer norm.
    RowStats(Vec<f64>, Vec<f64>),
    /// Per-element tanh values for gelu.
    Elem(Vec<f64>),
    /// Softmax probabilities for cross-entropy.
    Probs(Vec<f64>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    aux: Aux,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// dgemm on row-major buffers: C = alpha * A(m x k) * B(k x n) + beta * C.
/// `ta`/`tb` interpret A/B as transposed views of the given buffers.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

fn tanh_via_exp(u: f64) -> f64 {
    // tanh(u) = 1 - 2 / (exp(2u) + 1); exp handles the saturated tails.
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool, aux: Aux) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            aux,
        });
        Var {
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lifts a tensor onto the tape as a leaf; `requires_grad` is taken from
    /// the tensor.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
            Aux::None,
        )
    }

    /// Non-differentiable constant leaf.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "constant data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, false, Aux::None))
    }

    pub fn scalar_const(&self, v: f64) -> Var {
        self.push(vec![1], vec![v], Op::Leaf, false, Aux::None)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Value of a scalar (single-element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[v.id].value.len(), 1);
        nodes[v.id].value[0]
    }

    /// Copies a node's value into a detached tensor.
    pub fn detach(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.id].shape.clone(), nodes[v.id].value.clone()).unwrap()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let nodes = self.nodes.borrow();
        let s = &nodes[v.id].shape;
        if s.len() != 2 {
            return Err(Error::dimension(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            let nodes = self.nodes.borrow();
            return Err(Error::dimension(
                "matmul",
                &nodes[a.id].shape,
                &nodes[b.id].shape,
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            gemm(
                m,
                ka,
                n,
                1.0,
                &nodes[a.id].value,
                false,
                &nodes[b.id].value,
                false,
                0.0,
                &mut out,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![m, n],
            out,
            Op::Matmul { a: a.id, b: b.id },
            rg,
            Aux::None,
        ))
    }

    /// C = A * B^T without materializing the transpose.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul_nt")?;
        let (n, kb) = self.dims2(b, "matmul_nt")?;
        if ka != kb {
            let nodes = self.nodes.borrow();
            return Err(Error::dimension(
                "matmul_nt",
                &nodes[a.id].shape,
                &nodes[b.id].shape,
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            // B is n x k row-major; read it as k x n transposed
            let (rsa, csa) = (ka as isize, 1isize);
            let (rsb, csb) = (1isize, ka as isize);
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    ka,
                    n,
                    1.0,
                    nodes[a.id].value.as_ptr(),
                    rsa,
                    csa,
                    nodes[b.id].value.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatmulNT { a: a.id, b: b.id },
            rg,
            Aux::None,
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        if nodes[a.id].shape != nodes[b.id].shape {
            return Err(Error::dimension(
                "add",
                &nodes[a.id].shape,
                &nodes[b.id].shape,
            ));
        }
        let value: Vec<f64> = nodes[a.id]
            .value
            .iter()
            .zip(&nodes[b.id].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = nodes[a.id].shape.clone();
        let rg = nodes[a.id].requires_grad || nodes[b.id].requires_grad;
        drop(nodes);
        Ok(self.push(shape, value, Op::Add { a: a.id, b: b.id }, rg, Aux::None))
    }

    /// Adds a 1 x n bias row to every row of a m x n matrix, the only
    /// broadcast this library supports.
    pub fn add_row_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row_bias")?;
        let (bm, bn) = self.dims2(bias, "add_row_bias")?;
        if bm != 1 || bn != n {
            let nodes = self.nodes.borrow();
            return Err(Error::dimension(
                "add_row_bias",
                &nodes[a.id].shape,
                &nodes[bias.id].shape,
            ));
        }
        let nodes = self.nodes.borrow();
        let brow = &nodes[bias.id].value;
        let mut value = nodes[a.id].value.clone();
        for r in 0..m {
            for j in 0..n {
                value[r * n + j] += brow[j];
            }
        }
        let rg = nodes[a.id].requires_grad || nodes[bias.id].requires_grad;
        drop(nodes);
        Ok(self.push(
            vec![m, n],
            value,
            Op::AddRowBias {
                a: a.id,
                bias: bias.id,
            },
            rg,
            Aux::None,
        ))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let nodes = self.nodes.borrow();
        let value: Vec<f64> = nodes[a.id].value.iter().map(|x| x * c).collect();
        let shape = nodes[a.id].shape.clone();
        let rg = nodes[a.id].requires_grad;
        drop(nodes);
        self.push(shape, value, Op::Scale { a: a.id, c }, rg, Aux::None)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let nodes = self.nodes.borrow();
        let src = &nodes[a.id].value;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = src[i * n + j];
            }
        }
        let rg = nodes[a.id].requires_grad;
        drop(nodes);
        Ok(self.push(vec![n, m], value, Op::Transpose { a: a.id }, rg, Aux::None))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let numel: usize = shape.iter().product();
        if numel != nodes[a.id].value.len() {
            return Err(Error::dimension("reshape", &nodes[a.id].shape, &shape));
        }
        let value = nodes[a.id].value.clone();
        let rg = nodes[a.id].requires_grad;
        drop(nodes);
        Ok(self.push(shape, value, Op::Reshape { a: a.id }, rg, Aux::None))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero parts"));
        }
        let (_, n) = self.dims2(parts[0], "concat_rows")?;
        let nodes = self.nodes.borrow();
        let mut rows = 0;
        for p in parts {
            let s = &nodes[p.id].shape;
            if s.len() != 2 || s[1] != n {
                return Err(Error::dimension("concat_rows", &nodes[parts[0].id].shape, s));
            }
            rows += s[0];
        }
        let mut value = Vec::with_capacity(rows * n);
        for p in parts {
            value.extend_from_slice(&nodes[p.id].value);
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        Ok(self.push(
            vec![rows, n],
            value,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            rg,
            Aux::None,
        ))
    }

    /// Rows start..end (half-open) of a 2-D tensor.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if start >= end || end > m {
            return Err(Error::contract(format!(
                "slice_rows range {start}..{end} out of 0..{m}"
            )));
        }
        let nodes = self.nodes.borrow();
        let value = nodes[a.id].value[start * n..end * n].to_vec();
        let rg = nodes[a.id].requires_grad;
        drop(nodes);
        Ok(self.push(
            vec![end - start, n],
            value,
            Op::SliceRows { a: a.id, start },
            rg,
            Aux::None,
        ))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero parts"));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let nodes = self.nodes.borrow();
        let mut cols = 0;
        for p in parts {
            let s = &nodes[p.id].shape;
            if s.len() != 2 || s[0] != m {
                return Err(Error::dimension("concat_cols", &nodes[parts[0].id].shape, s));
            }
            cols += s[1];
        }
        let mut value = vec![0.0; m * cols];
        let mut off = 0;
        for p in parts {
            let pn = nodes[p.id].shape[1];
            let src = &nodes[p.id].value;
            for r in 0..m {
                value[r * cols + off..r * cols + off + pn]
                    .copy_from_slice(&src[r * pn..(r + 1) * pn]);
            }
            off += pn;
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        Ok(self.push(
            vec![m, cols],
            value,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            rg,
            Aux::None,
        ))
    }

    /// Columns start..end (half-open) of a 2-D tensor.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::contract(format!(
                "slice_cols range {start}..{end} out of 0..{n}"
            )));
        }
        let w = end - start;
        let nodes = self.nodes.borrow();
        let src = &nodes[a.id].value;
        let mut value = vec![0.0; m * w];
        for r in 0..m {
            value[r * w..(r + 1) * w].copy_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = nodes[a.id].requires_grad;
        drop(nodes);
        Ok(self.push(
            vec![m, w],
            value,
            Op::SliceCols { a: a.id, start },
            rg,
            Aux::None,
        ))
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let nodes = self.nodes.borrow();
        let src = &nodes[a.id].value;
        if src.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax_rows",
                detail: "non-finite input".into(),
            });
        }
        let mut value = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let out = &mut value[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[j] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let rg = nodes[a.id].requires_grad;
        drop(nodes);
        Ok(self.push(
            vec![m, n],
            value,
            Op::SoftmaxRows { a: a.id },
            rg,
            Aux::None,
        ))
    }

    /// Normalizes the last axis of a 2-D tensor; `gain` and `bias` are 1 x n.
    /// A zero-variance row maps to the bias (epsilon-regularized, no NaN).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        let (gm, gn) = self.dims2(gain, "layer_norm")?;
        let (bm, bn) = self.dims2(bias, "layer_norm")?;
        if gm != 1 || bm != 1 || gn != n || bn != n {
            let nodes = self.nodes.borrow();
            return Err(Error::dimension(
                "layer_norm",
                &nodes[x.id].shape,
                &nodes[gain.id].shape,
            ));
        }
        let nodes = self.nodes.borrow();
        let src = &nodes[x.id].value;
        let g = &nodes[gain.id].value;
        let b = &nodes[bias.id].value;
        let mut value = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut rstds = vec![0.0; m];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            let out = &mut value[r * n..(r + 1) * n];
            for j in 0..n {
                out[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let rg = nodes[x.id].requires_grad
            || nodes[gain.id].requires_grad
            || nodes[bias.id].requires_grad;
        drop(nodes);
        Ok(self.push(
            vec![m, n],
            value,
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
            },
            rg,
            Aux::RowStats(means, rstds),
        ))
    }

    /// Tanh-form gelu.
    pub fn gelu(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let src = &nodes[a.id].value;
        let mut value = vec![0.0; src.len()];
        let mut tanhs = vec![0.0; src.len()];
        for (i, &x) in src.iter().enumerate() {
            let t = tanh_via_exp(GELU_C * (x + GELU_A * x * x * x));
            tanhs[i] = t;
            value[i] = 0.5 * x * (1.0 + t);
        }
        let shape = nodes[a.id].shape.clone();
        let rg = nodes[a.id].requires_grad;
        drop(nodes);
        self.push(shape, value, Op::Gelu { a: a.id }, rg, Aux::Elem(tanhs))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let s: f64 = nodes[a.id].value.iter().sum();
        let rg = nodes[a.id].requires_grad;
        drop(nodes);
        self.push(vec![1], vec![s], Op::Sum { a: a.id }, rg, Aux::None)
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (bsz, classes) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != bsz {
            return Err(Error::contract(format!(
                "cross_entropy: {} labels for batch of {}",
                labels.len(),
                bsz
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                detail: format!("label {bad} out of [0, {classes})"),
            });
        }
        let nodes = self.nodes.borrow();
        let src = &nodes[logits.id].value;
        let mut probs = vec![0.0; bsz * classes];
        let mut loss = 0.0;
        for r in 0..bsz {
            let row = &src[r * classes..(r + 1) * classes];
            let p = &mut probs[r * classes..(r + 1) * classes];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..classes {
                let e = (row[j] - mx).exp();
                p[j] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for v in p.iter_mut() {
                *v *= inv;
            }
            loss += sum.ln() + mx - row[labels[r]];
        }
        loss /= bsz as f64;
        let rg = nodes[logits.id].requires_grad;
        drop(nodes);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.id,
                labels: labels.to_vec(),
            },
            rg,
            Aux::Probs(probs),
        ))
    }

    /// Mean absolute deviation over all entries; subgradient 0 at exact ties.
    pub fn l1_loss(&self, pred: Var, target: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        if nodes[pred.id].shape != nodes[target.id].shape {
            return Err(Error::dimension(
                "l1_loss",
                &nodes[pred.id].shape,
                &nodes[target.id].shape,
            ));
        }
        let n = nodes[pred.id].value.len();
        let loss = nodes[pred.id]
            .value
            .iter()
            .zip(&nodes[target.id].value)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / n as f64;
        let rg = nodes[pred.id].requires_grad || nodes[target.id].requires_grad;
        drop(nodes);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::L1Loss {
                pred: pred.id,
                target: target.id,
            },
            rg,
            Aux::None,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients land in the tape's grad
    /// store; a second call accumulates additively on top.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let n = nodes.len();
        let mut local: Vec<Option<Vec<f64>>> = vec![None; n];
        local[loss.id] = Some(vec![1.0]);

        for id in (0..n).rev() {
            if !nodes[id].requires_grad || local[id].is_none() {
                continue;
            }
            // Inputs always precede outputs on the tape, so splitting at `id`
            // gives mutable access to every input slot.
            let (lo, hi) = local.split_at_mut(id);
            let gout = hi[0].as_ref().unwrap();
            let node = &nodes[id];
            let needs = |vid: usize| nodes[vid].requires_grad;
            fn slot<'a>(
                store: &'a mut [Option<Vec<f64>>],
                vid: usize,
                len: usize,
            ) -> &'a mut Vec<f64> {
                store[vid].get_or_insert_with(|| vec![0.0; len])
            }
            let lens: &dyn Fn(usize) -> usize = &|vid| nodes[vid].value.len();
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let nn = nodes[*b].shape[1];
                    if needs(*a) {
                        // dA = dC * B^T
                        let bval = &nodes[*b].value;
                        gemm(m, nn, k, 1.0, gout, false, bval, true, 1.0, slot(lo, *a, lens(*a)));
                    }
                    if needs(*b) {
                        // dB = A^T * dC
                        let aval = &nodes[*a].value;
                        gemm(k, m, nn, 1.0, aval, true, gout, false, 1.0, slot(lo, *b, lens(*b)));
                    }
                }
                Op::MatmulNT { a, b } => {
                    // C(m x n) = A(m x k) * B(n x k)^T
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let nn = nodes[*b].shape[0];
                    if needs(*a) {
                        // dA = dC * B
                        let bval = &nodes[*b].value;
                        gemm(m, nn, k, 1.0, gout, false, bval, false, 1.0, slot(lo, *a, lens(*a)));
                    }
                    if needs(*b) {
                        // dB = dC^T * A
                        let aval = &nodes[*a].value;
                        gemm(nn, m, k, 1.0, gout, true, aval, false, 1.0, slot(lo, *b, lens(*b)));
                    }
                }
                Op::Add { a, b } => {
                    for vid in [a, b] {
                        if needs(*vid) {
                            for (s, g) in slot(lo, *vid, lens(*vid)).iter_mut().zip(gout) {
                                *s += g;
                            }
                        }
                    }
                }
                Op::AddRowBias { a, bias } => {
                    let cols = node.shape[1];
                    if needs(*a) {
                        for (s, g) in slot(lo, *a, lens(*a)).iter_mut().zip(gout) {
                            *s += g;
                        }
                    }
                    if needs(*bias) {
                        let gb = slot(lo, *bias, lens(*bias));
                        for (i, g) in gout.iter().enumerate() {
                            gb[i % cols] += g;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    if needs(*a) {
                        for (s, g) in slot(lo, *a, lens(*a)).iter_mut().zip(gout) {
                            *s += g * c;
                        }
                    }
                }
                Op::Transpose { a } => {
                    if needs(*a) {
                        let (m, nn) = (node.shape[0], node.shape[1]);
                        let ga = slot(lo, *a, lens(*a));
                        for i in 0..m {
                            for j in 0..nn {
                                ga[j * m + i] += gout[i * nn + j];
                            }
                        }
                    }
                }
                Op::Reshape { a } => {
                    if needs(*a) {
                        for (s, g) in slot(lo, *a, lens(*a)).iter_mut().zip(gout) {
                            *s += g;
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for vid in parts {
                        let len = nodes[*vid].value.len();
                        if needs(*vid) {
                            for (s, g) in slot(lo, *vid, lens(*vid)).iter_mut().zip(&gout[off..off + len]) {
                                *s += g;
                            }
                        }
                        off += len;
                    }
                }
                Op::SliceRows { a, start } => {
                    if needs(*a) {
                        let cols = node.shape[1];
                        let ga = slot(lo, *a, lens(*a));
                        let off = start * cols;
                        for (i, g) in gout.iter().enumerate() {
                            ga[off + i] += g;
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let m = node.shape[0];
                    let cols = node.shape[1];
                    let mut off = 0;
                    for vid in parts {
                        let pn = nodes[*vid].shape[1];
                        if needs(*vid) {
                            let gp = slot(lo, *vid, lens(*vid));
                            for r in 0..m {
                                for j in 0..pn {
                                    gp[r * pn + j] += gout[r * cols + off + j];
                                }
                            }
                        }
                        off += pn;
                    }
                }
                Op::SliceCols { a, start } => {
                    if needs(*a) {
                        let (m, w) = (node.shape[0], node.shape[1]);
                        let an = nodes[*a].shape[1];
                        let ga = slot(lo, *a, lens(*a));
                        for r in 0..m {
                            for j in 0..w {
                                ga[r * an + start + j] += gout[r * w + j];
                            }
                        }
                    }
                }
                Op::SoftmaxRows { a } => {
                    if needs(*a) {
                        let (m, nn) = (node.shape[0], node.shape[1]);
                        let y = &node.value;
                        let ga = slot(lo, *a, lens(*a));
                        for r in 0..m {
                            let yr = &y[r * nn..(r + 1) * nn];
                            let gr = &gout[r * nn..(r + 1) * nn];
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            let out = &mut ga[r * nn..(r + 1) * nn];
                            for j in 0..nn {
                                out[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (m, nn) = (node.shape[0], node.shape[1]);
                    let (means, rstds) = match &node.aux {
                        Aux::RowStats(a, b) => (a, b),
                        _ => unreachable!(),
                    };
                    let xval = &nodes[*x].value;
                    let gval = &nodes[*gain].value;
                    for r in 0..m {
                        let xr = &xval[r * nn..(r + 1) * nn];
                        let gr = &gout[r * nn..(r + 1) * nn];
                        let (mean, rstd) = (means[r], rstds[r]);
                        if needs(*bias) {
                            let gb = slot(lo, *bias, lens(*bias));
                            for j in 0..nn {
                                gb[j] += gr[j];
                            }
                        }
                        if needs(*gain) {
                            let gg = slot(lo, *gain, lens(*gain));
                            for j in 0..nn {
                                gg[j] += gr[j] * (xr[j] - mean) * rstd;
                            }
                        }
                        if needs(*x) {
                            // dh = dy * g; dx = rstd*(dh - mean(dh) - xhat*mean(dh*xhat))
                            let mut mean_dh = 0.0;
                            let mut mean_dhx = 0.0;
                            for j in 0..nn {
                                let xhat = (xr[j] - mean) * rstd;
                                let dh = gr[j] * gval[j];
                                mean_dh += dh;
                                mean_dhx += dh * xhat;
                            }
                            mean_dh /= nn as f64;
                            mean_dhx /= nn as f64;
                            let gx = slot(lo, *x, lens(*x));
                            let out = &mut gx[r * nn..(r + 1) * nn];
                            for j in 0..nn {
                                let xhat = (xr[j] - mean) * rstd;
                                let dh = gr[j] * gval[j];
                                out[j] += rstd * (dh - mean_dh - xhat * mean_dhx);
                            }
                        }
                    }
                }
                Op::Gelu { a } => {
                    if needs(*a) {
                        let tanhs = match &node.aux {
                            Aux::Elem(t) => t,
                            _ => unreachable!(),
                        };
                        let xval = &nodes[*a].value;
                        let ga = slot(lo, *a, lens(*a));
                        for i in 0..xval.len() {
                            let x = xval[i];
                            let t = tanhs[i];
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                            ga[i] += gout[i] * d;
                        }
                    }
                }
                Op::Sum { a } => {
                    if needs(*a) {
                        let g = gout[0];
                        for s in slot(lo, *a, lens(*a)).iter_mut() {
                            *s += g;
                        }
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    if needs(*logits) {
                        let probs = match &node.aux {
                            Aux::Probs(p) => p,
                            _ => unreachable!(),
                        };
                        let classes = nodes[*logits].shape[1];
                        let bsz = labels.len();
                        let g = gout[0] / bsz as f64;
                        let gl = slot(lo, *logits, lens(*logits));
                        for r in 0..bsz {
                            for j in 0..classes {
                                let ind = if j == labels[r] { 1.0 } else { 0.0 };
                                gl[r * classes + j] += g * (probs[r * classes + j] - ind);
                            }
                        }
                    }
                }
                Op::L1Loss { pred, target } => {
                    let count = nodes[*pred].value.len() as f64;
                    let g = gout[0] / count;
                    let pv = &nodes[*pred].value;
                    let tv = &nodes[*target].value;
                    if needs(*pred) {
                        let gp = slot(lo, *pred, lens(*pred));
                        for i in 0..pv.len() {
                            gp[i] += g * sign0(pv[i] - tv[i]);
                        }
                    }
                    if needs(*target) {
                        let gt = slot(lo, *target, lens(*target));
                        for i in 0..pv.len() {
                            gt[i] -= g * sign0(pv[i] - tv[i]);
                        }
                    }
                }
            }
        }
        drop(nodes);

        let mut store = self.grads.borrow_mut();
        if store.len() < n {
            store.resize(n, None);
        }
        for (slot, l) in store.iter_mut().zip(local) {
            if let Some(lg) = l {
                match slot {
                    Some(s) => {
                        for (a, b) in s.iter_mut().zip(&lg) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(lg),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        self.grads.borrow().get(v.id).and_then(|g| g.clone())
    }

    pub fn zero_grads(&self) {
        self.grads.borrow_mut().clear();
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::{central_diff, max_rel_err};

    fn randt(shape: Vec<usize>, rng: &mut SeededRng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform_in(-1.5, 1.5)).collect();
        Tensor::new(shape, data).unwrap().with_grad()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut rng = SeededRng::new(0);
        let m = randt(vec![3, 3], &mut rng);
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::eye(3));
        let b = tape.leaf(&m);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), m.data());
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::new();
        let a = tape
            .constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let b = tape.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        match tape.matmul(a, b) {
            Err(crate::error::Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    /// Finite-difference check of d sum(A*B) / dA on a 4x5 * 5x3 product.
    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(42);
        let a0 = randt(vec![4, 5], &mut rng);
        let b0 = randt(vec![5, 3], &mut rng);

        let tape = Tape::new();
        let a = tape.leaf(&a0);
        let b = tape.leaf(&b0);
        let loss = tape.sum(tape.matmul(a, b).unwrap());
        tape.backward(loss).unwrap();
        let ga = tape.grad(a).unwrap();

        let f = |x: &[f64]| {
            let t = Tape::new();
            let av = t.constant(vec![4, 5], x.to_vec()).unwrap();
            let bv = t.leaf(&b0);
            t.scalar(t.sum(t.matmul(av, bv).unwrap()))
        };
        let num = central_diff(&f, a0.data(), 1e-5);
        assert!(max_rel_err(&ga, &num) < 1e-6);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose_and_gradients() {
        let mut rng = SeededRng::new(21);
        let a0 = randt(vec![4, 3], &mut rng);
        let b0 = randt(vec![5, 3], &mut rng);

        let tape = Tape::new();
        let a = tape.leaf(&a0);
        let b = tape.leaf(&b0);
        let c1 = tape.matmul_nt(a, b).unwrap();
        let c2 = tape.matmul(a, tape.transpose(b).unwrap()).unwrap();
        assert_eq!(tape.value(c1), tape.value(c2));

        let loss = tape.sum(c1);
        tape.backward(loss).unwrap();
        let (ga, gb) = (tape.grad(a).unwrap(), tape.grad(b).unwrap());

        let fa = |x: &[f64]| {
            let t = Tape::new();
            let av = t.constant(vec![4, 3], x.to_vec()).unwrap();
            let bv = t.leaf(&b0);
            t.scalar(t.sum(t.matmul_nt(av, bv).unwrap()))
        };
        let fb = |x: &[f64]| {
            let t = Tape::new();
            let av = t.leaf(&a0);
            let bv = t.constant(vec![5, 3], x.to_vec()).unwrap();
            t.scalar(t.sum(t.matmul_nt(av, bv).unwrap()))
        };
        assert!(max_rel_err(&ga, &central_diff(&fa, a0.data(), 1e-5)) < 1e-6);
        assert!(max_rel_err(&gb, &central_diff(&fb, b0.data(), 1e-5)) < 1e-6);
    }

    #[test]
    fn softmax_uniform_row() {
        let tape = Tape::new();
        let x = tape.constant(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_under_large_inputs() {
        let tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let y = tape.value(tape.softmax_rows(x).unwrap());
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!(y[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            tape.softmax_rows(x),
            Err(crate::error::Error::Numeric { .. })
        ));
    }

    /// Vector-Jacobian product against finite differences on a random 3x4.
    #[test]
    fn softmax_vjp_matches_finite_differences() {
        let mut rng = SeededRng::new(7);
        let x0 = randt(vec![3, 4], &mut rng);
        let dir = Tensor::new(
            vec![4, 1],
            (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        )
        .unwrap();

        let tape = Tape::new();
        let x = tape.leaf(&x0);
        let d = tape.leaf(&dir);
        let loss = tape.sum(tape.matmul(tape.softmax_rows(x).unwrap(), d).unwrap());
        tape.backward(loss).unwrap();
        let gx = tape.grad(x).unwrap();

        let f = |v: &[f64]| {
            let t = Tape::new();
            let xv = t.constant(vec![3, 4], v.to_vec()).unwrap();
            let dv = t.leaf(&dir);
            t.scalar(t.sum(t.matmul(t.softmax_rows(xv).unwrap(), dv).unwrap()))
        };
        let num = central_diff(&f, x0.data(), 1e-5);
        assert!(max_rel_err(&gx, &num) < 1e-6);
    }

    #[test]
    fn layer_norm_constant_row_maps_to_bias() {
        let tape = Tape::new();
        let x = tape.constant(vec![1, 4], vec![3.5; 4]).unwrap();
        let g = tape.constant(vec![1, 4], vec![1.0; 4]).unwrap();
        let b = tape.constant(vec![1, 4], vec![0.0; 4]).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        for v in tape.value(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(vec![1, 1], vec![0.0]).unwrap();
        assert_eq!(tape.value(tape.gelu(x))[0], 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::new();
        let logits = tape.constant(vec![1, 4], vec![0.7; 4]).unwrap();
        let l = tape.cross_entropy(logits, &[2]).unwrap();
        assert!((tape.scalar(l) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let tape = Tape::new();
        let mut prev = f64::INFINITY;
        for margin in [2.0, 10.0, 40.0] {
            let logits = tape
                .constant(vec![1, 3], vec![margin, 0.0, 0.0])
                .unwrap();
            let l = tape.scalar(tape.cross_entropy(logits, &[0]).unwrap());
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let tape = Tape::new();
        let logits = tape.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(crate::error::Error::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(3);
        let x0 = randt(vec![2, 5], &mut rng);
        let labels = [1usize, 4];

        let tape = Tape::new();
        let x = tape.leaf(&x0);
        let l = tape.cross_entropy(x, &labels).unwrap();
        tape.backward(l).unwrap();
        let gx = tape.grad(x).unwrap();

        let f = |v: &[f64]| {
            let t = Tape::new();
            let xv = t.constant(vec![2, 5], v.to_vec()).unwrap();
            t.scalar(t.cross_entropy(xv, &labels).unwrap())
        };
        let num = central_diff(&f, x0.data(), 1e-5);
        assert!(max_rel_err(&gx, &num) < 1e-6);
    }

    #[test]
    fn l1_loss_examples() {
        let tape = Tape::new();
        let p = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let z = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(tape.scalar(tape.l1_loss(p, z).unwrap()), 1.5);
        assert_eq!(tape.scalar(tape.l1_loss(p, p).unwrap()), 0.0);
    }

    #[test]
    fn l1_subgradient_is_sign_over_count() {
        let pred = Tensor::new(vec![1, 4], vec![1.0, -2.0, 0.5, 0.5])
            .unwrap()
            .with_grad();
        let tape = Tape::new();
        let p = tape.leaf(&pred);
        let t = tape
            .constant(vec![1, 4], vec![0.0, 0.0, 1.0, 0.5])
            .unwrap();
        let l = tape.l1_loss(p, t).unwrap();
        tape.backward(l).unwrap();
        // sign(1)/4, sign(-2)/4, sign(-0.5)/4, sign(0)/4 = 0 at the tie
        assert_eq!(tape.grad(p).unwrap(), vec![0.25, -0.25, -0.25, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(tape.backward(x).is_err());
    }

    /// A value used twice must receive both path contributions; checked
    /// against finite differences of the duplicated-variable function.
    #[test]
    fn backward_accumulates_shared_subexpressions() {
        let mut rng = SeededRng::new(9);
        let a0 = randt(vec![3, 3], &mut rng);

        let tape = Tape::new();
        let a = tape.leaf(&a0);
        let loss = tape.sum(tape.matmul(a, a).unwrap());
        tape.backward(loss).unwrap();
        let ga = tape.grad(a).unwrap();

        let f = |v: &[f64]| {
            let t = Tape::new();
            let av = t.constant(vec![3, 3], v.to_vec()).unwrap();
            t.scalar(t.sum(t.matmul(av, av).unwrap()))
        };
        let num = central_diff(&f, a0.data(), 1e-5);
        assert!(max_rel_err(&ga, &num) < 1e-6);
    }

    #[test]
    fn repeated_backward_accumulates_additively() {
        let x0 = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap().with_grad();
        let tape = Tape::new();
        let x = tape.leaf(&x0);
        let l = tape.sum(tape.scale(x, 3.0));
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![6.0, 6.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn concat_slice_round_trip_routes_gradients() {
        let mut rng = SeededRng::new(5);
        let x0 = randt(vec![4, 3], &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(&x0);
        let top = tape.slice_rows(x, 0, 2).unwrap();
        let bot = tape.slice_rows(x, 2, 4).unwrap();
        let back = tape.concat_rows(&[top, bot]).unwrap();
        assert_eq!(tape.value(back), x0.data());
        let l = tape.sum(back);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![1.0; 12]);
    }

    #[test]
    fn cols_round_trip() {
        let mut rng = SeededRng::new(6);
        let x0 = randt(vec![3, 6], &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(&x0);
        let l = tape.slice_cols(x, 0, 2).unwrap();
        let m = tape.slice_cols(x, 2, 5).unwrap();
        let r = tape.slice_cols(x, 5, 6).unwrap();
        let back = tape.concat_cols(&[l, m, r]).unwrap();
        assert_eq!(tape.value(back), x0.data());
        let loss = tape.sum(back);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![1.0; 18]);
    }

    #[test]
    fn identical_seeds_give_bit_identical_losses_and_grads() {
        let run = || {
            let mut rng = SeededRng::new(123);
            let a0 = randt(vec![5, 4], &mut rng);
            let b0 = randt(vec![4, 6], &mut rng);
            let g0 = Tensor::full(vec![1, 6], 1.0).with_grad();
            let bias0 = Tensor::zeros(vec![1, 6]).with_grad();
            let tape = Tape::new();
            let a = tape.leaf(&a0);
            let b = tape.leaf(&b0);
            let g = tape.leaf(&g0);
            let bias = tape.leaf(&bias0);
            let h = tape.layer_norm(tape.matmul(a, b).unwrap(), g, bias).unwrap();
            let l = tape.sum(tape.gelu(tape.softmax_rows(h).unwrap()));
            tape.backward(l).unwrap();
            (tape.scalar(l), tape.grad(a).unwrap())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(
            g1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}

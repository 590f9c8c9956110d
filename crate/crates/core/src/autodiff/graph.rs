use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(usize),
    Constant(Tensor),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Tanh(Var),
    LeakyRelu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Conv1d { input: Var, weight: Var, bias: Var, stride: usize },
    ConcatCols(Vec<Var>),
    SliceCols { input: Var, start: usize },
    BroadcastRows(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Tanh(_) => "tanh",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Conv1d { .. } => "conv1d",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Symbolic computation graph. Nodes are appended in topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<Var>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Interprets a shape as a matrix `(rows, cols)`; rank 1 is a single row.
fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape.len() {
        1 => Some((1, shape[0])),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, shape, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape_err<T>(&self, op: &'static str, detail: alloc::string::String) -> Result<T> {
        Err(Error::Shape { node: self.nodes.len(), op, detail })
    }

    /// Declares a differentiable input.
    pub fn input(&mut self, shape: &[usize]) -> Var {
        let idx = self.inputs.len();
        let v = self.push(Op::Input(idx), shape.to_vec(), true);
        self.inputs.push(v);
        v
    }

    /// Declares an input that is fed per evaluation but never differentiated.
    pub fn constant_input(&mut self, shape: &[usize]) -> Var {
        let idx = self.inputs.len();
        let v = self.push(Op::Input(idx), shape.to_vec(), false);
        self.inputs.push(v);
        v
    }

    /// Embeds a fixed tensor into the graph.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return self.shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]], g))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return self.shape_err(name, format!("{sa:?} vs {sb:?}"));
        }
        let g = self.grad_of(&[a, b]);
        Ok(self.push(op, sa, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b))
    }

    fn row_op(&mut self, a: Var, row: Var, name: &'static str, op: Op) -> Result<Var> {
        let (sa, sr) = (self.shape(a).to_vec(), self.shape(row).to_vec());
        match (as_matrix(&sa), as_matrix(&sr)) {
            (Some((_, cols)), Some((1, rcols))) if cols == rcols && sa.len() == 2 => {
                let g = self.grad_of(&[a, row]);
                Ok(self.push(op, sa, g))
            }
            _ => self.shape_err(name, format!("{sa:?} with row {sr:?}")),
        }
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op(a, row, "add_row", Op::AddRow(a, row))
    }

    /// Multiplies every row of a matrix elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op(a, row, "mul_row", Op::MulRow(a, row))
    }

    fn unary(&mut self, a: Var, op: Op) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let g = self.grad_of(&[a]);
        Ok(self.push(op, shape, g))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, factor))
    }

    /// Adds a fixed scalar to every element.
    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var> {
        self.unary(a, Op::Offset(a, shift))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::LeakyRelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a))
    }

    /// Valid (unpadded) strided 1-D convolution.
    ///
    /// `input` is `[length, in_channels]`, `weight` is
    /// `[out_channels, kernel, in_channels]` and `bias` is `[out_channels]`.
    /// The result is `[(length - kernel) / stride + 1, out_channels]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (si, sw, sb) = (self.shape(input).to_vec(), self.shape(weight).to_vec(), self.shape(bias).to_vec());
        let ok = si.len() == 2
            && sw.len() == 3
            && sb.len() == 1
            && sw[2] == si[1]
            && sb[0] == sw[0]
            && stride > 0
            && sw[1] > 0
            && si[0] >= sw[1];
        if !ok {
            return self.shape_err("conv1d", format!("input {si:?}, weight {sw:?}, bias {sb:?}, stride {stride}"));
        }
        let out_len = (si[0] - sw[1]) / stride + 1;
        let g = self.grad_of(&[input, weight, bias]);
        Ok(self.push(Op::Conv1d { input, weight, bias, stride }, vec![out_len, sw[0]], g))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return self.shape_err("concat_cols", "no operands".into());
        }
        let rows = self.shape(parts[0]).first().copied().unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                let s = s.to_vec();
                return self.shape_err("concat_cols", format!("operand {s:?}, expected {rows} rows"));
            }
            cols += s[1];
        }
        let g = self.grad_of(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![rows, cols], g))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || start >= end || end > s[1] {
            return self.shape_err("slice_cols", format!("{s:?}[.., {start}..{end}]"));
        }
        let g = self.grad_of(&[input]);
        Ok(self.push(Op::SliceCols { input, start }, vec![s[0], end - start], g))
    }

    /// Repeats a row vector `rows` times into a matrix.
    pub fn broadcast_rows(&mut self, input: Var, rows: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        match as_matrix(&s) {
            Some((1, cols)) if rows > 0 => {
                let g = self.grad_of(&[input]);
                Ok(self.push(Op::BroadcastRows(input), vec![rows, cols], g))
            }
            _ => self.shape_err("broadcast_rows", format!("{s:?} to {rows} rows")),
        }
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if numel(&s) != numel(shape) {
            return self.shape_err("reshape", format!("{s:?} to {shape:?}"));
        }
        let g = self.grad_of(&[input]);
        Ok(self.push(Op::Reshape(input), shape.to_vec(), g))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let g = self.grad_of(&[input]);
        Ok(self.push(Op::Sum(input), Vec::new(), g))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        if numel(self.shape(input)) == 0 {
            return self.shape_err("mean", "empty operand".into());
        }
        let g = self.grad_of(&[input]);
        Ok(self.push(Op::Mean(input), Vec::new(), g))
    }

    /// Per-row sums of a matrix, as a vector of length `rows`.
    pub fn row_sum(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return self.shape_err("row_sum", format!("{s:?}"));
        }
        let g = self.grad_of(&[input]);
        Ok(self.push(Op::RowSum(input), vec![s[0]], g))
    }

    /// Closes the graph over `output`.
    pub fn finish(self, output: Var) -> Tape {
        Tape { graph: self, output, values: None, check_finite: false }
    }
}

/// Gradients of the tape output with respect to each declared input.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for input `index`; `None` for constant inputs.
    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.grads.get(index).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_vec(self) -> Vec<Option<Tensor>> {
        self.grads
    }
}

/// A graph bound to an output, plus the values of its last evaluation.
#[derive(Clone, Debug)]
pub struct Tape {
    graph: Graph,
    output: Var,
    values: Option<Vec<Tensor>>,
    check_finite: bool,
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `out[m,n] += a[m,k] * b[k,n]`.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

impl Tape {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn output(&self) -> Var {
        self.output
    }

    pub fn input_count(&self) -> usize {
        self.graph.inputs.len()
    }

    /// Enables NaN/Inf detection during `forward`.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Value of any node from the last evaluation.
    pub fn value(&self, v: Var) -> Option<&Tensor> {
        self.values.as_ref().map(|vals| &vals[v.0])
    }

    /// Evaluates the graph on `inputs` and returns the output value.
    pub fn forward(&mut self, inputs: &[Tensor]) -> Result<&Tensor> {
        self.values = None;
        if inputs.len() != self.graph.inputs.len() {
            return Err(Error::Shape {
                node: 0,
                op: "input",
                detail: format!("{} inputs given, {} declared", inputs.len(), self.graph.inputs.len()),
            });
        }
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.graph.nodes.len());
        for (idx, node) in self.graph.nodes.iter().enumerate() {
            let v = |x: &Var| &vals[x.0];
            let value = match &node.op {
                Op::Input(i) => {
                    let t = &inputs[*i];
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::Shape {
                            node: idx,
                            op: "input",
                            detail: format!("input {i}: expected {:?}, found {:?}", node.shape, t.shape()),
                        });
                    }
                    t.clone()
                }
                Op::Constant(t) => t.clone(),
                Op::MatMul(a, b) => {
                    let (m, k, n) = (node.shape[0], v(a).shape()[1], node.shape[1]);
                    let mut out = vec![0.0; m * n];
                    matmul_into(v(a).data(), v(b).data(), &mut out, m, k, n);
                    Tensor::new(node.shape.clone(), out)?
                }
                Op::Add(a, b) => zip(v(a), v(b), |x, y| x + y),
                Op::Sub(a, b) => zip(v(a), v(b), |x, y| x - y),
                Op::Mul(a, b) => zip(v(a), v(b), |x, y| x * y),
                Op::AddRow(a, r) | Op::MulRow(a, r) => {
                    let add = matches!(node.op, Op::AddRow(..));
                    let cols = node.shape[1];
                    let row = v(r).data();
                    let mut out = v(a).clone();
                    for chunk in out.data_mut().chunks_mut(cols) {
                        for (o, &rv) in chunk.iter_mut().zip(row) {
                            if add {
                                *o += rv;
                            } else {
                                *o *= rv;
                            }
                        }
                    }
                    out
                }
                Op::Scale(a, c) => map(v(a), |x| x * c),
                Op::Offset(a, c) => map(v(a), |x| x + c),
                Op::Tanh(a) => map(v(a), libm::tanh),
                Op::LeakyRelu(a) => map(v(a), leaky),
                Op::Exp(a) => map(v(a), libm::exp),
                Op::Log(a) => map(v(a), libm::log),
                Op::Square(a) => map(v(a), |x| x * x),
                Op::Conv1d { input, weight, bias, stride } => {
                    let x = v(input);
                    let w = v(weight);
                    let b = v(bias).data();
                    let cin = x.shape()[1];
                    let (cout, k) = (w.shape()[0], w.shape()[1]);
                    let span = k * cin;
                    let out_len = node.shape[0];
                    let mut out = vec![0.0; out_len * cout];
                    for t in 0..out_len {
                        let xs = &x.data()[t * stride * cin..t * stride * cin + span];
                        for o in 0..cout {
                            let ws = &w.data()[o * span..(o + 1) * span];
                            let mut acc = b[o];
                            for (xv, wv) in xs.iter().zip(ws) {
                                acc += xv * wv;
                            }
                            out[t * cout + o] = acc;
                        }
                    }
                    Tensor::new(node.shape.clone(), out)?
                }
                Op::ConcatCols(parts) => {
                    let (rows, cols) = (node.shape[0], node.shape[1]);
                    let mut out = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for p in parts {
                            out.extend_from_slice(v(p).row(r));
                        }
                    }
                    Tensor::new(node.shape.clone(), out)?
                }
                Op::SliceCols { input, start } => {
                    let src = v(input);
                    let width = node.shape[1];
                    let mut out = Vec::with_capacity(node.shape[0] * width);
                    for r in 0..node.shape[0] {
                        out.extend_from_slice(&src.row(r)[*start..start + width]);
                    }
                    Tensor::new(node.shape.clone(), out)?
                }
                Op::BroadcastRows(a) => {
                    let src = v(a).data();
                    let mut out = Vec::with_capacity(numel(&node.shape));
                    for _ in 0..node.shape[0] {
                        out.extend_from_slice(src);
                    }
                    Tensor::new(node.shape.clone(), out)?
                }
                Op::Reshape(a) => v(a).clone().reshaped(node.shape.clone())?,
                Op::Sum(a) => Tensor::scalar(v(a).data().iter().fold(0.0, |s, x| s + x)),
                Op::Mean(a) => {
                    let t = v(a);
                    Tensor::scalar(t.data().iter().fold(0.0, |s, x| s + x) / t.len() as f64)
                }
                Op::RowSum(a) => {
                    let t = v(a);
                    let data = (0..t.rows()).map(|r| t.row(r).iter().fold(0.0, |s, x| s + x)).collect();
                    Tensor::vector(data)
                }
            };
            if self.check_finite && !value.is_finite() {
                return Err(Error::NonFinite { context: node.op.name() });
            }
            vals.push(value);
        }
        self.values = Some(vals);
        Ok(&self.values.as_ref().expect("just set")[self.output.0])
    }

    /// Propagates `seed` (shaped like the output) back to every input.
    pub fn backward(&self, seed: &Tensor) -> Result<Gradients> {
        let vals = self.values.as_ref().ok_or(Error::NotEvaluated)?;
        let nodes = &self.graph.nodes;
        if seed.len() != numel(&nodes[self.output.0].shape) {
            return Err(Error::Shape {
                node: self.output.0,
                op: "backward",
                detail: format!("seed {:?} vs output {:?}", seed.shape(), nodes[self.output.0].shape),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        adj[self.output.0] = Some(seed.data().to_vec());

        fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let n = numel(&nodes[v.0].shape);
            Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
        }

        for idx in (0..nodes.len()).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            let val = |x: &Var| vals[x.0].data();
            match &node.op {
                Op::Input(_) | Op::Constant(_) => {
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let k = nodes[a.0].shape[1];
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        // ga[m,k] += g[m,n] * b^T
                        let bv = val(b);
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                let mut acc = 0.0;
                                for (gv, bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                ga[i * k + p] += acc;
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut adj, nodes, *b) {
                        // gb[k,n] += a^T * g
                        let av = val(a);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += aip * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(o, gv)| *o += gv);
                    }
                    if let Some(gb) = slot(&mut adj, nodes, *b) {
                        gb.iter_mut().zip(&g).for_each(|(o, gv)| *o += sign * gv);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        for ((o, gv), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += gv * y;
                        }
                    }
                    if let Some(gb) = slot(&mut adj, nodes, *b) {
                        for ((o, gv), x) in gb.iter_mut().zip(&g).zip(av) {
                            *o += gv * x;
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    let cols = node.shape[1];
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(o, gv)| *o += gv);
                    }
                    if let Some(gr) = slot(&mut adj, nodes, *r) {
                        for chunk in g.chunks(cols) {
                            gr.iter_mut().zip(chunk).for_each(|(o, gv)| *o += gv);
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let cols = node.shape[1];
                    let (av, rv) = (val(a), val(r));
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        for (i, (o, gv)) in ga.iter_mut().zip(&g).enumerate() {
                            *o += gv * rv[i % cols];
                        }
                    }
                    if let Some(gr) = slot(&mut adj, nodes, *r) {
                        for (i, gv) in g.iter().enumerate() {
                            gr[i % cols] += gv * av[i];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(o, gv)| *o += gv * c);
                    }
                }
                Op::Offset(a, _) | Op::Reshape(a) => {
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(o, gv)| *o += gv);
                    }
                }
                Op::Tanh(a) => {
                    let y = vals[idx].data();
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        for ((o, gv), yv) in ga.iter_mut().zip(&g).zip(y) {
                            *o += gv * (1.0 - yv * yv);
                        }
                    }
                }
                Op::LeakyRelu(a) => {
                    let x = val(a);
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        for ((o, gv), xv) in ga.iter_mut().zip(&g).zip(x) {
                            *o += gv * leaky_grad(*xv);
                        }
                    }
                }
                Op::Exp(a) => {
                    let y = vals[idx].data();
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        for ((o, gv), yv) in ga.iter_mut().zip(&g).zip(y) {
                            *o += gv * yv;
                        }
                    }
                }
                Op::Log(a) => {
                    let x = val(a);
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        for ((o, gv), xv) in ga.iter_mut().zip(&g).zip(x) {
                            *o += gv / xv;
                        }
                    }
                }
                Op::Square(a) => {
                    let x = val(a);
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        for ((o, gv), xv) in ga.iter_mut().zip(&g).zip(x) {
                            *o += 2.0 * gv * xv;
                        }
                    }
                }
                Op::Conv1d { input, weight, bias, stride } => {
                    let cin = nodes[input.0].shape[1];
                    let (cout, k) = (nodes[weight.0].shape[0], nodes[weight.0].shape[1]);
                    let span = k * cin;
                    let out_len = node.shape[0];
                    if let Some(gx) = slot(&mut adj, nodes, *input) {
                        let w = val(weight);
                        for t in 0..out_len {
                            let base = t * stride * cin;
                            for o in 0..cout {
                                let gv = g[t * cout + o];
                                if gv == 0.0 {
                                    continue;
                                }
                                let ws = &w[o * span..(o + 1) * span];
                                for (dst, wv) in gx[base..base + span].iter_mut().zip(ws) {
                                    *dst += gv * wv;
                                }
                            }
                        }
                    }
                    if let Some(gw) = slot(&mut adj, nodes, *weight) {
                        let x = val(input);
                        for t in 0..out_len {
                            let base = t * stride * cin;
                            let xs = &x[base..base + span];
                            for o in 0..cout {
                                let gv = g[t * cout + o];
                                if gv == 0.0 {
                                    continue;
                                }
                                for (dst, xv) in gw[o * span..(o + 1) * span].iter_mut().zip(xs) {
                                    *dst += gv * xv;
                                }
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut adj, nodes, *bias) {
                        for t in 0..out_len {
                            for o in 0..cout {
                                gb[o] += g[t * cout + o];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, cols) = (node.shape[0], node.shape[1]);
                    let mut offset = 0;
                    for p in parts {
                        let width = nodes[p.0].shape[1];
                        if let Some(gp) = slot(&mut adj, nodes, *p) {
                            for r in 0..rows {
                                let src = &g[r * cols + offset..r * cols + offset + width];
                                for (o, gv) in gp[r * width..(r + 1) * width].iter_mut().zip(src) {
                                    *o += gv;
                                }
                            }
                        }
                        offset += width;
                    }
                }
                Op::SliceCols { input, start } => {
                    let src_cols = nodes[input.0].shape[1];
                    let (rows, width) = (node.shape[0], node.shape[1]);
                    if let Some(gi) = slot(&mut adj, nodes, *input) {
                        for r in 0..rows {
                            let dst = &mut gi[r * src_cols + start..r * src_cols + start + width];
                            for (o, gv) in dst.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                                *o += gv;
                            }
                        }
                    }
                }
                Op::BroadcastRows(a) => {
                    let cols = node.shape[1];
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        for chunk in g.chunks(cols) {
                            ga.iter_mut().zip(chunk).for_each(|(o, gv)| *o += gv);
                        }
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let n = numel(&nodes[a.0].shape);
                    let gv = if matches!(node.op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        ga.iter_mut().for_each(|o| *o += gv);
                    }
                }
                Op::RowSum(a) => {
                    let cols = nodes[a.0].shape[1];
                    if let Some(ga) = slot(&mut adj, nodes, *a) {
                        for (r, chunk) in ga.chunks_mut(cols).enumerate() {
                            chunk.iter_mut().for_each(|o| *o += g[r]);
                        }
                    }
                }
            }
        }

        let grads = self
            .graph
            .inputs
            .iter()
            .map(|v| {
                let node = &nodes[v.0];
                node.needs_grad.then(|| {
                    let data = adj[v.0].take().unwrap_or_else(|| vec![0.0; numel(&node.shape)]);
                    Tensor::new(node.shape.clone(), data).expect("input shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

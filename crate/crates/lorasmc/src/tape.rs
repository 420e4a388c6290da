//! Reverse-mode automatic differentiation over a fixed-topology tape of
//! matrix-valued operations.
//!
//! The training objective (SMC ELBO with reparameterized draws and stopped
//! resampling) is built as one tape per trial; the op set below is exactly
//! what the transition, proposals, encoder and likelihoods need. Vectors are
//! n×1 matrices; scalars are 1×1.

use nalgebra::DMatrix;

use crate::encoder::{gelu, gelu_derivative, PadMode};
use crate::linalg::{sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    /// 1×1 scalar times matrix.
    ScalarMul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// AᵀB without materializing the transpose.
    TrMatMul(NodeId, NodeId),
    Transpose(NodeId),
    Hadamard(NodeId, NodeId),
    Recip(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Softplus(NodeId),
    LnSoftplus(NodeId),
    Gelu(NodeId),
    /// Piecewise-linear activation; slopes are a constant N×D payload,
    /// thresholds a differentiable N×D node, input an N×1 node.
    Pwl { x: NodeId, thresholds: NodeId, slopes: DMatrix<f64> },
    SumAll(NodeId),
    Symmetrize(NodeId),
    Inverse(NodeId),
    Cholesky(NodeId),
    /// Diagonal of a square matrix as a column vector.
    DiagVec(NodeId),
    /// Column vector embedded as a diagonal matrix.
    DiagMat(NodeId),
    /// Lower-triangular factor from raw entries: strict lower copied,
    /// diagonal exp(raw/2), upper zero.
    LowerTriExpDiag(NodeId),
    /// Stack 1×1 scalars into a column vector.
    Stack(Vec<NodeId>),
    /// log Σ exp over a column vector, yielding 1×1.
    LogSumExp(NodeId),
    /// Row `row` of a matrix as a column vector.
    RowAsCol(NodeId, usize),
    CausalConv { input: NodeId, weight: NodeId, bias: NodeId, kernel: usize, pad: PadMode },
}

struct Node {
    op: Op,
    val: DMatrix<f64>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&DMatrix<f64>> {
        self.grads[id.0].as_ref()
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

    pub fn value(&self, id: NodeId) -> &DMatrix<f64> {
        &self.nodes[id.0].val
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].val.shape(), (1, 1));
        self.nodes[id.0].val[(0, 0)]
    }

    fn push(&mut self, op: Op, val: DMatrix<f64>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, val, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, m: DMatrix<f64>) -> NodeId {
        self.push(Op::Const, m, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(DMatrix::from_element(1, 1, v))
    }

    pub fn leaf(&mut self, m: DMatrix<f64>) -> NodeId {
        self.push(Op::Leaf, m, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = self.value(a) + self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), val, g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = self.value(a) - self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), val, g)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let val = -self.value(a);
        let g = self.ng(a);
        self.push(Op::Neg(a), val, g)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let val = self.value(a) * c;
        let g = self.ng(a);
        self.push(Op::Scale(a, c), val, g)
    }

    pub fn scalar_mul(&mut self, s: NodeId, m: NodeId) -> NodeId {
        debug_assert_eq!(self.value(s).shape(), (1, 1));
        let val = self.value(m) * self.value(s)[(0, 0)];
        let g = self.ng(s) || self.ng(m);
        self.push(Op::ScalarMul(s, m), val, g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = self.value(a) * self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), val, g)
    }

    pub fn tr_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = self.value(a).transpose() * self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::TrMatMul(a, b), val, g)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).transpose();
        let g = self.ng(a);
        self.push(Op::Transpose(a), val, g)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = self.value(a).component_mul(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Hadamard(a, b), val, g)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).map(|v| 1.0 / v);
        let g = self.ng(a);
        self.push(Op::Recip(a), val, g)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).map(f64::sqrt);
        let g = self.ng(a);
        self.push(Op::Sqrt(a), val, g)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).map(f64::exp);
        let g = self.ng(a);
        self.push(Op::Exp(a), val, g)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).map(f64::ln);
        let g = self.ng(a);
        self.push(Op::Ln(a), val, g)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).map(softplus);
        let g = self.ng(a);
        self.push(Op::Softplus(a), val, g)
    }

    pub fn ln_softplus(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).map(crate::linalg::ln_softplus);
        let g = self.ng(a);
        self.push(Op::LnSoftplus(a), val, g)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).map(gelu);
        let g = self.ng(a);
        self.push(Op::Gelu(a), val, g)
    }

    pub fn pwl(&mut self, x: NodeId, thresholds: NodeId, slopes: DMatrix<f64>) -> NodeId {
        let xv = self.value(x);
        let hv = self.value(thresholds);
        debug_assert_eq!(xv.ncols(), 1);
        debug_assert_eq!(hv.shape(), slopes.shape());
        debug_assert_eq!(xv.nrows(), hv.nrows());
        let n = xv.nrows();
        let d = hv.ncols();
        let mut out = DMatrix::zeros(n, 1);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                acc += slopes[(i, j)] * (xv[(i, 0)] - hv[(i, j)]).max(0.0);
            }
            out[(i, 0)] = acc;
        }
        let g = self.ng(x) || self.ng(thresholds);
        self.push(Op::Pwl { x, thresholds, slopes }, out, g)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let val = DMatrix::from_element(1, 1, self.value(a).sum());
        let g = self.ng(a);
        self.push(Op::SumAll(a), val, g)
    }

    pub fn symmetrize(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let val = 0.5 * (v + v.transpose());
        let g = self.ng(a);
        self.push(Op::Symmetrize(a), val, g)
    }

    pub fn inverse(&mut self, a: NodeId) -> NodeId {
        let val = self
            .value(a)
            .clone()
            .try_inverse()
            .expect("tape inverse of singular matrix");
        let g = self.ng(a);
        self.push(Op::Inverse(a), val, g)
    }

    pub fn cholesky(&mut self, a: NodeId) -> NodeId {
        let val = nalgebra::Cholesky::new(self.value(a).clone())
            .expect("tape cholesky of non-SPD matrix")
            .l();
        let g = self.ng(a);
        self.push(Op::Cholesky(a), val, g)
    }

    pub fn diag_vec(&mut self, a: NodeId) -> NodeId {
        let d = self.value(a).diagonal();
        let n = d.len();
        let val = DMatrix::from_iterator(n, 1, d.iter().cloned());
        let g = self.ng(a);
        self.push(Op::DiagVec(a), val, g)
    }

    pub fn diag_mat(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        debug_assert_eq!(v.ncols(), 1);
        let n = v.nrows();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = v[(i, 0)];
        }
        let g = self.ng(a);
        self.push(Op::DiagMat(a), m, g)
    }

    pub fn lower_tri_exp_diag(&mut self, a: NodeId) -> NodeId {
        let raw = self.value(a);
        debug_assert_eq!(raw.nrows(), raw.ncols());
        let n = raw.nrows();
        let mut c = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                c[(i, j)] = raw[(i, j)];
            }
            c[(i, i)] = (raw[(i, i)] / 2.0).exp();
        }
        let g = self.ng(a);
        self.push(Op::LowerTriExpDiag(a), c, g)
    }

    pub fn stack(&mut self, parts: Vec<NodeId>) -> NodeId {
        let n = parts.len();
        let mut v = DMatrix::zeros(n, 1);
        let mut g = false;
        for (i, p) in parts.iter().enumerate() {
            debug_assert_eq!(self.value(*p).shape(), (1, 1));
            v[(i, 0)] = self.value(*p)[(0, 0)];
            g |= self.ng(*p);
        }
        self.push(Op::Stack(parts), v, g)
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        debug_assert_eq!(v.ncols(), 1);
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let g = self.ng(a);
        self.push(Op::LogSumExp(a), DMatrix::from_element(1, 1, lse), g)
    }

    pub fn row_as_col(&mut self, a: NodeId, row: usize) -> NodeId {
        let v = self.value(a).row(row).transpose();
        let n = v.len();
        let g = self.ng(a);
        self.push(Op::RowAsCol(a, row), DMatrix::from_iterator(n, 1, v.iter().cloned()), g)
    }

    pub fn causal_conv(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        kernel: usize,
        pad: PadMode,
    ) -> NodeId {
        let val = conv_forward(self.value(input), self.value(weight), self.value(bias), kernel, pad);
        let g = self.ng(input) || self.ng(weight) || self.ng(bias);
        self.push(Op::CausalConv { input, weight, bias, kernel, pad }, val, g)
    }

    /// Backpropagate from a 1×1 root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(DMatrix::from_element(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, idx: usize, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
        let add_to = |grads: &mut [Option<DMatrix<f64>>], id: NodeId, delta: DMatrix<f64>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => *acc += delta,
                slot => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Const | Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, -g);
            }
            Op::Neg(a) => add_to(grads, *a, -g),
            Op::Scale(a, c) => add_to(grads, *a, g * *c),
            Op::ScalarMul(s, m) => {
                let sv = self.value(*s)[(0, 0)];
                let mv = self.value(*m);
                add_to(grads, *s, DMatrix::from_element(1, 1, g.component_mul(mv).sum()));
                add_to(grads, *m, g * sv);
            }
            Op::MatMul(a, b) => {
                add_to(grads, *a, g * self.value(*b).transpose());
                add_to(grads, *b, self.value(*a).transpose() * g);
            }
            Op::TrMatMul(a, b) => {
                // C = AᵀB: Ā += B Ḡᵀ, B̄ += A Ḡ.
                add_to(grads, *a, self.value(*b) * g.transpose());
                add_to(grads, *b, self.value(*a) * g);
            }
            Op::Transpose(a) => add_to(grads, *a, g.transpose()),
            Op::Hadamard(a, b) => {
                add_to(grads, *a, g.component_mul(self.value(*b)));
                add_to(grads, *b, g.component_mul(self.value(*a)));
            }
            Op::Recip(a) => {
                let y = self.value(*a).map(|v| 1.0 / v);
                add_to(grads, *a, -g.component_mul(&y.component_mul(&y)));
            }
            Op::Sqrt(a) => {
                let y = self.value(*a).map(f64::sqrt);
                add_to(grads, *a, g.component_mul(&y.map(|v| 0.5 / v)));
            }
            Op::Exp(a) => {
                let y = self.value(*a).map(f64::exp);
                add_to(grads, *a, g.component_mul(&y));
            }
            Op::Ln(a) => {
                add_to(grads, *a, g.component_mul(&self.value(*a).map(|v| 1.0 / v)));
            }
            Op::Softplus(a) => {
                add_to(grads, *a, g.component_mul(&self.value(*a).map(sigmoid)));
            }
            Op::LnSoftplus(a) => {
                // d/dx ln(softplus(x)) = σ(x)/softplus(x); → 1 as x → −∞.
                let d = self.value(*a).map(|x| {
                    if x < -30.0 {
                        1.0
                    } else {
                        sigmoid(x) / softplus(x)
                    }
                });
                add_to(grads, *a, g.component_mul(&d));
            }
            Op::Gelu(a) => {
                add_to(grads, *a, g.component_mul(&self.value(*a).map(gelu_derivative)));
            }
            Op::Pwl { x, thresholds, slopes } => {
                let xv = self.value(*x);
                let hv = self.value(*thresholds);
                let (n, d) = hv.shape();
                let mut gx = DMatrix::zeros(n, 1);
                let mut gh = DMatrix::zeros(n, d);
                for i in 0..n {
                    let gi = g[(i, 0)];
                    for j in 0..d {
                        if xv[(i, 0)] > hv[(i, j)] {
                            gx[(i, 0)] += gi * slopes[(i, j)];
                            gh[(i, j)] -= gi * slopes[(i, j)];
                        }
                    }
                }
                add_to(grads, *x, gx);
                add_to(grads, *thresholds, gh);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                add_to(grads, *a, DMatrix::from_element(r, c, g[(0, 0)]));
            }
            Op::Symmetrize(a) => {
                add_to(grads, *a, 0.5 * (g + g.transpose()));
            }
            Op::Inverse(a) => {
                let y = &self.nodes[idx].val;
                add_to(grads, *a, -(y.transpose() * g * y.transpose()));
            }
            Op::Cholesky(a) => {
                let l = &self.nodes[idx].val;
                add_to(grads, *a, cholesky_backward(l, g));
            }
            Op::DiagVec(a) => {
                let n = self.value(*a).nrows();
                let mut m = DMatrix::zeros(n, n);
                for i in 0..n {
                    m[(i, i)] = g[(i, 0)];
                }
                add_to(grads, *a, m);
            }
            Op::DiagMat(a) => {
                let n = self.value(*a).nrows();
                let mut v = DMatrix::zeros(n, 1);
                for i in 0..n {
                    v[(i, 0)] = g[(i, i)];
                }
                add_to(grads, *a, v);
            }
            Op::LowerTriExpDiag(a) => {
                let raw = self.value(*a);
                let n = raw.nrows();
                let mut gr = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..i {
                        gr[(i, j)] = g[(i, j)];
                    }
                    gr[(i, i)] = g[(i, i)] * 0.5 * (raw[(i, i)] / 2.0).exp();
                }
                add_to(grads, *a, gr);
            }
            Op::Stack(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    add_to(grads, *p, DMatrix::from_element(1, 1, g[(i, 0)]));
                }
            }
            Op::LogSumExp(a) => {
                let v = self.value(*a);
                let lse = self.nodes[idx].val[(0, 0)];
                let soft = v.map(|x| (x - lse).exp());
                add_to(grads, *a, soft * g[(0, 0)]);
            }
            Op::RowAsCol(a, row) => {
                let (r, c) = self.value(*a).shape();
                let mut m = DMatrix::zeros(r, c);
                for j in 0..c {
                    m[(*row, j)] = g[(j, 0)];
                }
                add_to(grads, *a, m);
            }
            Op::CausalConv { input, weight, bias, kernel, pad } => {
                let (gi, gw, gb) = conv_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *kernel,
                    *pad,
                );
                add_to(grads, *input, gi);
                add_to(grads, *weight, gw);
                add_to(grads, *bias, gb);
            }
        }
    }
}

fn conv_forward(
    input: &DMatrix<f64>,
    weight: &DMatrix<f64>,
    bias: &DMatrix<f64>,
    kernel: usize,
    pad: PadMode,
) -> DMatrix<f64> {
    let t_len = input.nrows();
    let c_in = input.ncols();
    let c_out = bias.nrows();
    debug_assert_eq!(weight.shape(), (c_out, c_in * kernel));
    let mut out = DMatrix::zeros(t_len, c_out);
    for t in 0..t_len {
        for co in 0..c_out {
            let mut acc = bias[(co, 0)];
            for j in 0..kernel {
                let src = t as isize - (kernel - 1 - j) as isize;
                if let Some(ts) = crate::encoder::pad_index_pub(src, t_len, pad) {
                    for ci in 0..c_in {
                        acc += weight[(co, ci * kernel + j)] * input[(ts, ci)];
                    }
                }
            }
            out[(t, co)] = acc;
        }
    }
    out
}

fn conv_backward(
    input: &DMatrix<f64>,
    weight: &DMatrix<f64>,
    g: &DMatrix<f64>,
    kernel: usize,
    pad: PadMode,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let t_len = input.nrows();
    let c_in = input.ncols();
    let c_out = weight.nrows();
    let mut gi = DMatrix::zeros(t_len, c_in);
    let mut gw = DMatrix::zeros(c_out, c_in * kernel);
    let mut gb = DMatrix::zeros(c_out, 1);
    for t in 0..t_len {
        for co in 0..c_out {
            let go = g[(t, co)];
            if go == 0.0 {
                continue;
            }
            gb[(co, 0)] += go;
            for j in 0..kernel {
                let src = t as isize - (kernel - 1 - j) as isize;
                if let Some(ts) = crate::encoder::pad_index_pub(src, t_len, pad) {
                    for ci in 0..c_in {
                        gw[(co, ci * kernel + j)] += go * input[(ts, ci)];
                        gi[(ts, ci)] += go * weight[(co, ci * kernel + j)];
                    }
                }
            }
        }
    }
    (gi, gw, gb)
}

/// Reverse-mode rule for L = chol(A), A symmetric: with P = Φ(Lᵀ L̄) where Φ
/// keeps the lower triangle and halves the diagonal, the input gradient is
/// the symmetrized L⁻ᵀ P L⁻¹.
fn cholesky_backward(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    // Gradients on the (identically zero) upper triangle of L are dropped.
    let mut masked = l_bar.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            masked[(i, j)] = 0.0;
        }
    }
    let mut p = l.transpose() * masked;
    for i in 0..n {
        p[(i, i)] *= 0.5;
        for j in (i + 1)..n {
            p[(i, j)] = 0.0;
        }
    }
    // S = L⁻ᵀ P L⁻¹ computed via two triangular solves.
    let lt = l.transpose();
    let s1 = lt
        .solve_upper_triangular(&p)
        .expect("cholesky factor invertible");
    let s = lt
        .solve_upper_triangular(&s1.transpose())
        .expect("cholesky factor invertible")
        .transpose();
    0.5 * (&s + s.transpose())
}

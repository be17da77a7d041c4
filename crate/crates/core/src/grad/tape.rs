use ndarray::{s, Array2, Axis, Zip};
use thiserror::Error;

pub type Tensor = Array2<f64>;
pub type Shape = (usize, usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("{op}: argument outside the domain")]
    DomainError { op: &'static str },
    #[error("backward root must be 1x1, got {0:?}")]
    NonScalarRoot(Shape),
}

pub type Result<T, E = GradError> = std::result::Result<T, E>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    Abs(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxBlocks(Var, Vec<usize>),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    RowKron(Var, Var),
    KronMean(Vec<Var>),
    Transpose(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of tensor operations for reverse-mode differentiation.
///
/// Node inputs always have smaller ids than the node itself, so the
/// backward pass is a single sweep in descending id order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape(t: &Tensor) -> Shape {
    t.dim()
}

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(GradError::ShapeMismatch { op, lhs: a, rhs: b }),
    }
}

/// Sums a broadcast gradient back down to `target`.
fn reduce_to(grad: Tensor, target: Shape) -> Tensor {
    let mut g = grad;
    if target.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn binary_broadcast(a: &Tensor, b: &Tensor, out: Shape, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let av = a.broadcast(out).expect("checked broadcast");
    let bv = b.broadcast(out).expect("checked broadcast");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf treated as data: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        shape(&self.nodes[v.0].value)
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let out = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let value = binary_broadcast(self.value(a), self.value(b), out, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise division; any zero in the denominator is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).iter().any(|v| *v == 0.0) {
            return Err(GradError::DomainError { op: "div" });
        }
        self.elementwise("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(GradError::ShapeMismatch {
                op: "maximum",
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        self.elementwise("maximum", a, b, Op::Maximum(a, b), f64::max)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(Op::Scale(a, factor), value, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), value, rg)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let value = Array2::from_elem((1, 1), self.value(a).sum() / n);
        let rg = self.rg(a);
        self.push(Op::Mean(a), value, rg)
    }

    /// Column sums: `B x n -> 1 x n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(Op::SumRows(a), value, rg)
    }

    /// Row sums: `B x n -> B x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(Op::SumCols(a), value, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(op, value, rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// `max(x, 0)`, also used as the hinge in constraint losses.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|v| !(*v > 0.0)) {
            return Err(GradError::DomainError { op: "log" });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|v| !(*v >= 0.0)) {
            return Err(GradError::DomainError { op: "sqrt" });
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `log(1 + exp(x))`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Row-wise softmax applied independently inside each column block.
    ///
    /// `offsets` has one more entry than there are blocks; the last entry
    /// must equal the column count.
    pub fn softmax_blocks(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if offsets.first() != Some(&0) || offsets.last() != Some(&sa.1) || offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GradError::ShapeMismatch {
                op: "softmax_blocks",
                lhs: sa,
                rhs: (offsets.len(), *offsets.last().unwrap_or(&0)),
            });
        }
        let mut value = self.value(a).clone();
        for mut row in value.outer_iter_mut() {
            for w in offsets.windows(2) {
                let mut block = row.slice_mut(s![w[0]..w[1]]);
                let max = block.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                block.mapv_inplace(|x| (x - max).exp());
                let total = block.sum();
                block.mapv_inplace(|x| x / total);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SoftmaxBlocks(a, offsets.to_vec()), value, rg))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|p| self.shape(*p).0).unwrap_or(0);
        for p in parts {
            if self.shape(*p).0 != rows {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(parts[0]),
                    rhs: self.shape(*p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).map_err(|_| GradError::ShapeMismatch {
            op: "concat",
            lhs: (rows, 0),
            rhs: (rows, 0),
        })?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Op::Concat(parts.to_vec()), value, rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start >= end || end > sa.1 {
            return Err(GradError::ShapeMismatch {
                op: "slice_cols",
                lhs: sa,
                rhs: (start, end),
            });
        }
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols(a, start, end), value, rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start >= end || end > sa.0 {
            return Err(GradError::ShapeMismatch {
                op: "slice_rows",
                lhs: sa,
                rhs: (start, end),
            });
        }
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(Op::SliceRows(a, start, end), value, rg))
    }

    /// Per-row Kronecker product: `(B x m, B x n) -> B x (m*n)`.
    pub fn row_kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(GradError::ShapeMismatch {
                op: "row_kron",
                lhs: sa,
                rhs: sb,
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Array2::zeros((sa.0, sa.1 * sb.1));
        for ((mut out, ar), br) in value.outer_iter_mut().zip(av.outer_iter()).zip(bv.outer_iter()) {
            for (i, &x) in ar.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (j, &y) in br.iter().enumerate() {
                    out[i * sb.1 + j] = x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::RowKron(a, b), value, rg))
    }

    /// Column mean of the per-row Kronecker product of `parts`:
    /// `1/B * sum_b x1[b] (x) x2[b] (x) ...`, as a `1 x prod(n_i)` node.
    ///
    /// Equivalent to chained [`Tape::row_kron`] followed by a column mean,
    /// without materializing the `B x prod(n_i)` intermediate.
    pub fn kron_mean(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(GradError::ShapeMismatch {
                op: "kron_mean",
                lhs: (0, 0),
                rhs: (0, 0),
            });
        };
        let rows = self.shape(*first).0;
        for p in parts {
            if self.shape(*p).0 != rows {
                return Err(GradError::ShapeMismatch {
                    op: "kron_mean",
                    lhs: self.shape(*first),
                    rhs: self.shape(*p),
                });
            }
        }
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let widths: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
        let total: usize = widths.iter().product();
        let mut out = vec![0.0; total];
        let mut nz: Vec<Vec<(usize, f64)>> = vec![Vec::new(); parts.len()];
        for b in 0..rows {
            for (k, v) in values.iter().enumerate() {
                nz[k].clear();
                nz[k].extend(v.row(b).iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, x)| (i, *x)));
            }
            for_each_combo(&nz, &widths, None, |flat, prod| out[flat] += prod);
        }
        if rows > 0 {
            out.iter_mut().for_each(|x| *x /= rows as f64);
        }
        let value = Array2::from_shape_vec((1, total), out).expect("length matches");
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Op::KronMean(parts.to_vec()), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), value, rg)
    }

    /// Forward value is `hard`; the backward pass treats the node as `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if shape(&hard) != self.shape(soft) {
            return Err(GradError::ShapeMismatch {
                op: "straight_through",
                lhs: self.shape(soft),
                rhs: shape(&hard),
            });
        }
        let rg = self.rg(soft);
        Ok(self.push(Op::StraightThrough(soft), hard, rg))
    }

    /// Reverse sweep from a 1x1 root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rs = self.shape(root);
        if rs != (1, 1) {
            return Err(GradError::NonScalarRoot(rs));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));
        let mut leaves: Vec<Option<Tensor>> = vec![None; root.0 + 1];

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |v: Var| &self.nodes[v.0].value;
            let wants = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => leaves[id] = Some(g),
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        acc(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if wants(*b) {
                        acc(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        acc(&mut grads, *a, reduce_to(g.clone(), shape(val(*a))));
                    }
                    if wants(*b) {
                        acc(&mut grads, *b, reduce_to(g, shape(val(*b))));
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        acc(&mut grads, *a, reduce_to(g.clone(), shape(val(*a))));
                    }
                    if wants(*b) {
                        acc(&mut grads, *b, reduce_to(-g, shape(val(*b))));
                    }
                }
                Op::Mul(a, b) => {
                    let out = shape(&g);
                    if wants(*a) {
                        let ga = binary_broadcast(&g, val(*b), out, |x, y| x * y);
                        acc(&mut grads, *a, reduce_to(ga, shape(val(*a))));
                    }
                    if wants(*b) {
                        let gb = binary_broadcast(&g, val(*a), out, |x, y| x * y);
                        acc(&mut grads, *b, reduce_to(gb, shape(val(*b))));
                    }
                }
                Op::Div(a, b) => {
                    let out = shape(&g);
                    if wants(*a) {
                        let ga = binary_broadcast(&g, val(*b), out, |x, y| x / y);
                        acc(&mut grads, *a, reduce_to(ga, shape(val(*a))));
                    }
                    if wants(*b) {
                        // d(a/b)/db = -(a/b)/b = -out/b
                        let q = binary_broadcast(&node.value, val(*b), out, |o, y| -o / y);
                        let gb = &g * &q;
                        acc(&mut grads, *b, reduce_to(gb, shape(val(*b))));
                    }
                }
                Op::Maximum(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if wants(*a) {
                        let ga = Zip::from(&g).and(av).and(bv).map_collect(|&g, &x, &y| if x >= y { g } else { 0.0 });
                        acc(&mut grads, *a, ga);
                    }
                    if wants(*b) {
                        let gb = Zip::from(&g).and(av).and(bv).map_collect(|&g, &x, &y| if x >= y { 0.0 } else { g });
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Sum(a) => {
                    let ga = Array2::from_elem(shape(val(*a)), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let n = val(*a).len().max(1) as f64;
                    let ga = Array2::from_elem(shape(val(*a)), g[[0, 0]] / n);
                    acc(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let ga = g.broadcast(shape(val(*a))).expect("row vector broadcasts").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let ga = g.broadcast(shape(val(*a))).expect("column vector broadcasts").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|&g, &x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, g / val(*a)),
                Op::Sqrt(a) => {
                    let ga = Zip::from(&g).and(&node.value).map_collect(|&g, &y| g / (2.0 * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = Zip::from(&g).and(&node.value).map_collect(|&g, &y| g * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|&g, &x| g * sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxBlocks(a, offsets) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(shape(y));
                    for ((mut gr, yr), gin) in ga.outer_iter_mut().zip(y.outer_iter()).zip(g.outer_iter()) {
                        for w in offsets.windows(2) {
                            let dot: f64 = (w[0]..w[1]).map(|j| gin[j] * yr[j]).sum();
                            for j in w[0]..w[1] {
                                gr[j] = yr[j] * (gin[j] - dot);
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let width = val(*p).ncols();
                        if wants(*p) {
                            acc(&mut grads, *p, g.slice(s![.., start..start + width]).to_owned());
                        }
                        start += width;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(shape(val(*a)));
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start, end) => {
                    let mut ga = Array2::zeros(shape(val(*a)));
                    ga.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::RowKron(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let n = bv.ncols();
                    if wants(*a) {
                        let mut ga = Array2::zeros(shape(av));
                        for ((mut out, gr), br) in ga.outer_iter_mut().zip(g.outer_iter()).zip(bv.outer_iter()) {
                            for i in 0..out.len() {
                                out[i] = (0..n).map(|j| gr[i * n + j] * br[j]).sum();
                            }
                        }
                        acc(&mut grads, *a, ga);
                    }
                    if wants(*b) {
                        let mut gb = Array2::zeros(shape(bv));
                        for ((mut out, gr), ar) in gb.outer_iter_mut().zip(g.outer_iter()).zip(av.outer_iter()) {
                            for (i, &x) in ar.iter().enumerate() {
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    out[j] += gr[i * n + j] * x;
                                }
                            }
                        }
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::KronMean(parts) => {
                    let values: Vec<&Tensor> = parts.iter().map(|p| val(*p)).collect();
                    let widths: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
                    let rows = values[0].nrows();
                    let inv = if rows == 0 { 0.0 } else { 1.0 / rows as f64 };
                    let gflat = g.as_slice().expect("1 x n gradient is contiguous");
                    let mut nz: Vec<Vec<(usize, f64)>> = vec![Vec::new(); parts.len()];
                    let mut outs: Vec<Option<Tensor>> = parts
                        .iter()
                        .zip(&values)
                        .map(|(p, v)| wants(*p).then(|| Array2::zeros(v.dim())))
                        .collect();
                    for b in 0..rows {
                        for (k, v) in values.iter().enumerate() {
                            nz[k].clear();
                            nz[k].extend(v.row(b).iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, x)| (i, *x)));
                        }
                        for (k, out) in outs.iter_mut().enumerate() {
                            let Some(out) = out else { continue };
                            let mut row = out.row_mut(b);
                            for i in 0..widths[k] {
                                let mut s = 0.0;
                                for_each_combo(&nz, &widths, Some((k, i)), |flat, prod| s += gflat[flat] * prod);
                                row[i] = s * inv;
                            }
                        }
                    }
                    for (p, out) in parts.iter().zip(outs) {
                        if let Some(out) = out {
                            acc(&mut grads, *p, out);
                        }
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().as_standard_layout().into_owned()),
                Op::StraightThrough(soft) => acc(&mut grads, *soft, g),
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Visits every combination of nonzero entries across `nz`, passing the
/// flattened row-major index and the product of the entries. With `fixed =
/// Some((k, i))`, part `k` is pinned to index `i` and excluded from the
/// product.
fn for_each_combo(nz: &[Vec<(usize, f64)>], widths: &[usize], fixed: Option<(usize, usize)>, mut f: impl FnMut(usize, f64)) {
    fn rec(
        nz: &[Vec<(usize, f64)>],
        widths: &[usize],
        fixed: Option<(usize, usize)>,
        depth: usize,
        flat: usize,
        prod: f64,
        f: &mut impl FnMut(usize, f64),
    ) {
        if depth == nz.len() {
            f(flat, prod);
            return;
        }
        let base = flat * widths[depth];
        match fixed {
            Some((k, i)) if k == depth => rec(nz, widths, fixed, depth + 1, base + i, prod, f),
            _ => {
                for &(i, x) in &nz[depth] {
                    rec(nz, widths, fixed, depth + 1, base + i, prod * x, f);
                }
            }
        }
    }
    rec(nz, widths, fixed, 0, 0, 1.0, &mut f);
}

/// Gradients of the root with respect to every tracked leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the root does not depend on `v` (or `v` is not a tracked leaf).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when the root does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(tape.shape(v)))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.leaves.get_mut(v.0).and_then(Option::take)
    }
}

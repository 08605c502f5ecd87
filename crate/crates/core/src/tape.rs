//! Matrix-level reverse-mode differentiation.
//!
//! A `Tape` records one forward evaluation as a list of nodes. Parameter
//! leaves view a slice of the flat parameter vector; `backward` accumulates
//! their gradients straight into a flat gradient buffer of the same layout.
//! Every dense product is charged to the active `FlopTag`.

use crate::modelzoo::ModuleId;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Var(usize);

/// Owner of the multiply-accumulates recorded while the tag is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum FlopTag {
    Shared,
    Module(ModuleId),
}

/// Multiply-accumulate counts split by ownership.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub modular: u64,
    pub shared: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.modular + self.shared
    }

    pub fn add(&mut self, other: FlopCount) {
        self.modular += other.modular;
        self.shared += other.shared;
    }
}

enum Op<T> {
    Constant,
    Param { offset: usize },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Tanh(Var),
    Scale(Var, T),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    Im2Col { input: Var, kernel: usize },
    MeanRows(Var),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub(crate) struct Tape<'p, T> {
    params: &'p [T],
    nodes: Vec<Node<T>>,
    tag: FlopTag,
    flops: FlopCount,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p [T]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            tag: FlopTag::Shared,
            flops: FlopCount::default(),
        }
    }

    pub fn set_tag(&mut self, tag: FlopTag) {
        self.tag = tag;
    }

    pub fn flops(&self) -> FlopCount {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn charge(&mut self, macs: usize) {
        match self.tag {
            FlopTag::Shared => self.flops.shared += macs as u64,
            FlopTag::Module(_) => self.flops.modular += macs as u64,
        }
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> Var {
        let data = self.params[offset..offset + rows * cols].to_vec();
        self.push(Matrix::from_vec_unchecked(rows, cols, data), Op::Param { offset })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).shape();
        let m = self.value(b).cols();
        self.charge(n * k * m);
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).shape();
        let m = self.value(b).rows();
        self.charge(n * k * m);
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).as_slice().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(&r) {
                *x = *x + b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let blocks: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::hconcat(&blocks).expect("concat operands share row count");
        self.push(v, Op::ConcatCols(parts))
    }

    /// Same-padded 1-D patches: row `t` holds `input[t + o - kernel/2, c]`
    /// for offsets `o` then channels `c`.
    pub fn im2col(&mut self, input: Var, kernel: usize) -> Var {
        let x = self.value(input);
        let (len, ch) = x.shape();
        let half = kernel / 2;
        let mut out = Matrix::zeros(len, ch * kernel);
        for t in 0..len {
            for o in 0..kernel {
                let src = t as isize + o as isize - half as isize;
                if src < 0 || src >= len as isize {
                    continue;
                }
                for c in 0..ch {
                    out[(t, o * ch + c)] = x[(src as usize, c)];
                }
            }
        }
        self.push(out, Op::Im2Col { input, kernel })
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::from_count(x.rows());
        let mut out = Matrix::zeros(1, x.cols());
        for i in 0..x.rows() {
            for (o, &v) in out.row_mut(0).iter_mut().zip(x.row(i)) {
                *o = *o + v;
            }
        }
        let out = out.scale(T::one() / n);
        self.push(out, Op::MeanRows(a))
    }

    /// Reverse sweep from `root` seeded with `seed`; parameter gradients are
    /// added into `grad` at their parameter offsets.
    pub fn backward(&self, root: Var, seed: Matrix<T>, grad: &mut [T]) {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape");
        let mut grads: Vec<Option<Matrix<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (dst, &v) in grad[*offset..*offset + g.as_slice().len()]
                        .iter_mut()
                        .zip(g.as_slice())
                    {
                        *dst = *dst + v;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_bt(self.value(*b));
                    let db = self.value(*a).matmul_at(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_at(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut sums = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (s, &v) in sums.row_mut(0).iter_mut().zip(g.row(i)) {
                            *s = *s + v;
                        }
                    }
                    accumulate(&mut grads, *row, sums);
                    accumulate(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gi, y| gi * (T::one() - y * y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let inner = crate::numerics::dot(g.row(i), y.row(i));
                        for j in 0..y.cols() {
                            d[(i, j)] = y[(i, j)] * (g[(i, j)] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        accumulate(&mut grads, p, g.slice_cols(start, start + w));
                        start += w;
                    }
                }
                Op::Im2Col { input, kernel } => {
                    let (len, ch) = self.value(*input).shape();
                    let half = kernel / 2;
                    let mut d = Matrix::zeros(len, ch);
                    for t in 0..len {
                        for o in 0..*kernel {
                            let src = t as isize + o as isize - half as isize;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            for c in 0..ch {
                                d[(src as usize, c)] = d[(src as usize, c)] + g[(t, o * ch + c)];
                            }
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).rows();
                    let inv = T::one() / T::from_count(rows);
                    let mut d = Matrix::zeros(rows, g.cols());
                    for i in 0..rows {
                        for (x, &v) in d.row_mut(i).iter_mut().zip(g.row(0)) {
                            *x = v * inv;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

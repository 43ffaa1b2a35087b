use super::{Elementwise, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a + b`; `b` may also be a vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
            let out = Tensor::new(av.shape().to_vec(), data)?;
            return self.push("add", out, Op::Add(a, b), &[a, b]);
        }
        check_row_broadcast("add", av, bv)?;
        let cols = av.cols();
        let bd = bv.data();
        let data = av.data().iter().enumerate().map(|(i, &x)| x + bd[i % cols]).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add", out, Op::AddRow(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("sub", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product, with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
            let out = Tensor::new(av.shape().to_vec(), data)?;
            return self.push("mul", out, Op::Mul(a, b), &[a, b]);
        }
        check_row_broadcast("mul", av, bv)?;
        let cols = av.cols();
        let bd = bv.data();
        let data = av.data().iter().enumerate().map(|(i, &x)| x * bd[i % cols]).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("mul", out, Op::MulRow(a, b), &[a, b])
    }

    /// Multiplies by a constant tensor of the same shape (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor<T>) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != mask.shape() {
            return Err(Error::shape("mul_const", av.shape(), mask.shape()));
        }
        let data = av.data().iter().zip(mask.data()).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("mul_const", out, Op::MulConst(a, mask), &[a])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(crate::nn::kernels::sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.tanh());
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.exp());
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if let Some(bad) = av.data().iter().find(|&&x| x <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let out = av.map(|x| x.ln());
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// Dispatches one of the named pointwise operations.
    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Precondition(format!(
                "{op:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Sigmoid => self.sigmoid(inputs[0]),
            Elementwise::Tanh => self.tanh(inputs[0]),
            Elementwise::Exp => self.exp(inputs[0]),
            Elementwise::Log => self.log(inputs[0]),
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.cols() == 0 {
            return Err(Error::Precondition("softmax over an empty axis".into()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    /// Maximum over `axis` of a matrix. Ties go to the lowest index, which is
    /// also the only entry that receives gradient.
    pub fn max_pool_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || axis > 1 {
            return Err(Error::shape("max_pool_axis", av.shape(), &[axis]));
        }
        let (rows, cols) = (av.shape()[0], av.shape()[1]);
        let (outer, inner) = if axis == 0 { (cols, rows) } else { (rows, cols) };
        if inner == 0 {
            return Err(Error::Precondition("max_pool_axis over an empty axis".into()));
        }
        let flat = |o: usize, i: usize| if axis == 0 { i * cols + o } else { o * cols + i };
        let mut argmax = Vec::with_capacity(outer);
        let mut data = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best = flat(o, 0);
            for i in 1..inner {
                let p = flat(o, i);
                if av.data()[p] > av.data()[best] {
                    best = p;
                }
            }
            argmax.push(best);
            data.push(av.data()[best]);
        }
        let out = Tensor::vector(data);
        self.push("max_pool_axis", out, Op::MaxPool { x: a, argmax }, &[a])
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Precondition("concat of nothing".into()))?;
        let lead = self.value(*first).shape().split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        for p in parts {
            let s = self.value(*p).shape();
            let l = s.split_last().map(|(_, l)| l).unwrap_or(&[]);
            if l != lead.as_slice() {
                return Err(Error::shape("concat", self.value(*first).shape(), s));
            }
        }
        let rows = self.value(*first).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Precondition("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.rank() != 2 || v.cols() != cols {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || start > end || end > av.rows() {
            return Err(Error::shape("slice_rows", av.shape(), &[start, end]));
        }
        let cols = av.cols();
        let out = Tensor::matrix(end - start, cols, av.data()[start * cols..end * cols].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows { x: a, start }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || start > end || end > av.cols() {
            return Err(Error::shape("slice_cols", av.shape(), &[start, end]));
        }
        let mut data = Vec::with_capacity(av.rows() * (end - start));
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let out = Tensor::matrix(av.rows(), end - start, data)?;
        self.push("slice_cols", out, Op::SliceCols { x: a, start }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_squares();
        self.push("sum_squares", Tensor::scalar(s), Op::SumSquares(a), &[a])
    }

    /// Rows of `table` picked by `idx` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape("gather_rows", tv.shape(), &[]));
        }
        let cols = tv.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= tv.rows() {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    size: tv.rows(),
                });
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::matrix(idx.len(), cols, data)?;
        self.push("gather_rows", out, Op::GatherRows { table, idx: idx.to_vec() }, &[table])
    }
}

fn check_row_broadcast<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if b.rank() == 1 && a.rank() >= 1 && b.len() == a.cols() {
        Ok(())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
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

//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse from a scalar (1×1) node. Parameters enter the tape
//! through [`Tape::param`] and their gradients come back keyed by the
//! parameter index, so the same tape machinery serves training, gradient
//! checking and plain inference.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::numerics::compensated_sum;

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSoftmaxRows(Var),
    Clamp(Var, f64, f64),
    BroadcastRows(Var),
    BroadcastCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of a scalar with respect to every parameter on the tape.
#[derive(Debug, Default)]
pub struct ParamGrads {
    grads: Vec<(usize, Matrix)>,
}

impl ParamGrads {
    pub fn get(&self, param: usize) -> Option<&Matrix> {
        self.grads.iter().find(|(p, _)| *p == param).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Matrix)> {
        self.grads.iter().map(|(p, g)| (*p, g))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        let m = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.constant(m)
    }

    pub fn param(&mut self, index: usize, value: &Matrix) -> Var {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.value(a) / self.value(b);
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise log-softmax, stabilised by the row maximum.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Repeat a 1×n row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let v = self.value(a);
        if v.nrows() != 1 {
            return Err(shape_err("broadcast_rows", v.shape(), &[1, v.ncols()]));
        }
        let out = v
            .broadcast((rows, v.ncols()))
            .expect("row broadcast")
            .to_owned();
        Ok(self.push(out, Op::BroadcastRows(a)))
    }

    /// Repeat an m×1 column `cols` times.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let v = self.value(a);
        if v.ncols() != 1 {
            return Err(shape_err("broadcast_cols", v.shape(), &[v.nrows(), 1]));
        }
        let out = v
            .broadcast((v.nrows(), cols))
            .expect("column broadcast")
            .to_owned();
        Ok(self.push(out, Op::BroadcastCols(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).nrows())
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        if views.iter().any(|v| v.nrows() != rows) {
            return Err(Error::contract("concat_cols: row counts differ"));
        }
        let out = ndarray::concatenate(Axis(1), &views).expect("matching rows");
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if start > end || end > v.ncols() {
            return Err(Error::contract(format!(
                "slice_cols {start}..{end} of width {}",
                v.ncols()
            )));
        }
        let out = v.slice(s![.., start..end]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Sum over rows: m×n → 1×n, compensated per column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let sums: Vec<f64> = v
            .columns()
            .into_iter()
            .map(|c| compensated_sum(c.iter().copied()))
            .collect();
        let out = Array2::from_shape_vec((1, sums.len()), sums).expect("row shape");
        self.push(out, Op::SumRows(a))
    }

    /// Sum over columns: m×n → m×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = compensated_sum(self.value(a).iter().copied());
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a))
    }

    /// Reverse sweep from the 1×1 node `loss`. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads> {
        if self.backward_done {
            return Err(Error::contract(
                "backward called twice on the same tape; build a fresh tape",
            ));
        }
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::contract("backward needs a scalar (1x1) loss"));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out: Vec<(usize, Matrix)> = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => match out.iter_mut().find(|(q, _)| q == p) {
                    Some((_, acc)) => *acc += &g,
                    None => out.push((*p, g)),
                },
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = g.dot(&vb.t());
                    let gb = va.t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let vb = &self.nodes[b.0].value;
                    let ga = &g / vb;
                    // d(a/b)/db = -(a/b)/b
                    let gb = -(&g * y / vb);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Exp(a) => accumulate(&mut grads, *a, g * y),
                Op::Log(a) => accumulate(&mut grads, *a, g / &self.nodes[a.0].value),
                Op::Square(a) => accumulate(&mut grads, *a, g * &self.nodes[a.0].value * 2.0),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[a.0].value)
                        .for_each(|gi, &x| {
                            if x <= 0.0 {
                                *gi = 0.0
                            }
                        });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => accumulate(&mut grads, *a, g * &y.mapv(|t| 1.0 - t * t)),
                Op::Sigmoid(a) => accumulate(&mut grads, *a, g * &y.mapv(|s| s * (1.0 - s))),
                Op::LogSoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let total: f64 = grow.sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gi, &li| *gi -= li.exp() * total);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[a.0].value)
                        .for_each(|gi, &x| {
                            if x < *lo || x > *hi {
                                *gi = 0.0
                            }
                        });
                    accumulate(&mut grads, *a, ga);
                }
                Op::BroadcastRows(a) => {
                    accumulate(&mut grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)))
                }
                Op::BroadcastCols(a) => {
                    accumulate(&mut grads, *a, g.sum_axis(Axis(1)).insert_axis(Axis(1)))
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = &self.nodes[a.0].value;
                    let mut ga = Array2::zeros(src.dim());
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let rows = self.nodes[a.0].value.nrows();
                    let ga = g.broadcast((rows, g.ncols())).expect("row grad").to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let cols = self.nodes[a.0].value.ncols();
                    let ga = g.broadcast((g.nrows(), cols)).expect("col grad").to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let dim = self.nodes[a.0].value.dim();
                    accumulate(&mut grads, *a, Array2::from_elem(dim, g[[0, 0]]));
                }
            }
        }
        Ok(ParamGrads { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

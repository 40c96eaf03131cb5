//! Forward operations on [`Var`]s.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::graph::{rows_cols, sign0, Graph, Op, Var};
use crate::sparse::{self, SparseMap};
use crate::tensor::Tensor;

fn finite(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(Tensor::from_parts(shape, data))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Shorthand for the single element of a scalar var.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    /// The graph this var belongs to.
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tracked(self.id)
    }

    fn check_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(TensorError::invalid("binary op", "operands belong to different graphs"))
        }
    }

    fn unary(self, op: Op, name: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'g>> {
        let value = finite(name, shape, data)?;
        Ok(self.graph.push(value, op, self.requires_grad()))
    }

    fn binary(self, rhs: Var<'g>, op: Op, name: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'g>> {
        let value = finite(name, shape, data)?;
        let tracked = self.requires_grad() || rhs.requires_grad();
        Ok(self.graph.push(value, op, tracked))
    }

    fn elementwise(self, rhs: Var<'g>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        self.check_graph(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.binary(rhs, op, name, a.shape().to_vec(), data)
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(rhs, "add", Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(rhs, "sub", Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(rhs, "mul", Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    /// Multiplication by a constant.
    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        let a = self.value();
        let data = a.data().iter().map(|v| v * s).collect();
        self.unary(Op::Scale(self.id, s), "scale", a.shape().to_vec(), data)
    }

    /// Addition of a constant.
    pub fn add_scalar(self, s: f64) -> Result<Var<'g>> {
        let a = self.value();
        let data = a.data().iter().map(|v| v + s).collect();
        self.unary(Op::Offset(self.id), "add_scalar", a.shape().to_vec(), data)
    }

    /// Multiplication by a one-element var, broadcast over `self`.
    pub fn scale_by(self, s: Var<'g>) -> Result<Var<'g>> {
        if s.value().len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(),
                rhs: s.shape(),
            });
        }
        let spread = s.reshape(&[])?.fill(&self.shape())?;
        self.mul(spread)
    }

    /// Matrix product of two 2-D vars.
    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.matmul_t(rhs, false, false)
    }

    /// `op(self) · op(rhs)` where `op` transposes when the flag is set.
    pub fn matmul_t(self, rhs: Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        self.check_graph(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.ndim() != 2 || b.ndim() != 2 {
            return Err(mismatch());
        }
        let (ar, ac) = (a.shape()[0], a.shape()[1]);
        let (br, bc) = (b.shape()[0], b.shape()[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        // row/column strides of op(A) and op(B) in their storage
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: pointers cover m×k, k×n and m×n elements under the given strides.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.data().as_ptr(),
                    rsa,
                    csa,
                    b.data().as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        self.binary(rhs, Op::MatMul { a: self.id, b: rhs.id, ta, tb }, "matmul", vec![m, n], out)
    }

    /// Applies a fixed sparse linear map.
    pub fn sparse(self, map: Arc<SparseMap>) -> Result<Var<'g>> {
        let a = self.value();
        if a.len() != map.in_shape().iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch {
                op: "sparse",
                lhs: a.shape().to_vec(),
                rhs: map.in_shape().to_vec(),
            });
        }
        let data = map.apply(a.data());
        let shape = map.out_shape().to_vec();
        self.unary(Op::Sparse(self.id, map), "sparse", shape, data)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let value = a.reshape(shape)?;
        Ok(self.graph.push(value.with_requires_grad(false), Op::Reshape(self.id), self.requires_grad()))
    }

    pub fn relu(self) -> Result<Var<'g>> {
        let a = self.value();
        let data = a.data().iter().map(|&v| v.max(0.0)).collect();
        self.unary(Op::Relu(self.id), "relu", a.shape().to_vec(), data)
    }

    pub fn abs(self) -> Result<Var<'g>> {
        let a = self.value();
        let data = a.data().iter().map(|v| v.abs()).collect();
        self.unary(Op::Abs(self.id), "abs", a.shape().to_vec(), data)
    }

    /// Elementwise `sign(v)·sqrt(|v|)`. The derivative at 0 is taken as 0.
    pub fn signed_sqrt(self) -> Result<Var<'g>> {
        let a = self.value();
        let data = a.data().iter().map(|&v| sign0(v) * v.abs().sqrt()).collect();
        self.unary(Op::SignedSqrt(self.id), "signed_sqrt", a.shape().to_vec(), data)
    }

    pub(crate) fn sqrt_slope(self) -> Result<Var<'g>> {
        let a = self.value();
        let data = a
            .data()
            .iter()
            .map(|&y| if y == 0.0 { 0.0 } else { 0.5 / y.abs() })
            .collect();
        self.unary(Op::SqrtSlope(self.id), "signed_sqrt", a.shape().to_vec(), data)
    }

    /// Sum of all elements (scalar result).
    pub fn sum(self) -> Result<Var<'g>> {
        let s = self.value().sum();
        self.unary(Op::Sum(self.id), "sum", vec![], vec![s])
    }

    /// Broadcasts a one-element var to `shape`.
    pub fn fill(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.len() != 1 {
            return Err(TensorError::invalid("fill", "only one-element vars can be broadcast"));
        }
        let n = shape.iter().product();
        let s = a.data()[0];
        let v = self.reshape(&[])?;
        v.unary(Op::Fill(v.id), "fill", shape.to_vec(), vec![s; n])
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.value().len();
        if n == 0 {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum of absolute values; subgradient 0 at 0.
    pub fn l1_norm(self) -> Result<Var<'g>> {
        self.abs()?.sum()
    }

    pub fn l2_norm_sq(self) -> Result<Var<'g>> {
        self.mul(self)?.sum()
    }

    /// `log Σ exp` over the last axis; the result drops that axis.
    pub fn log_sum_exp(self) -> Result<Var<'g>> {
        let a = self.value();
        let (rows, cols) = rows_cols(a.shape());
        if cols == 0 {
            return Err(TensorError::invalid("log_sum_exp", "empty last axis"));
        }
        let data = a
            .data()
            .chunks(cols)
            .map(|row| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(data.len(), rows);
        let shape = a.shape().split_last().map(|(_, lead)| lead.to_vec()).unwrap_or_default();
        self.unary(Op::LogSumExp(self.id), "log_sum_exp", shape, data)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g>> {
        let a = self.value();
        let (_, cols) = rows_cols(a.shape());
        if cols == 0 {
            return Err(TensorError::invalid("softmax", "empty last axis"));
        }
        let mut data = Vec::with_capacity(a.len());
        for row in a.data().chunks(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            data.extend(row.iter().map(|v| (v - m).exp() / z));
        }
        self.unary(Op::Softmax(self.id), "softmax", a.shape().to_vec(), data)
    }

    /// 2-D convolution with a `k×k` kernel (k odd), stride 1 and zero padding
    /// `k/2`, so spatial extents are preserved.
    ///
    /// `self`: `[b, c, h, w]`, `weight`: `[o, c, k, k]`, `bias`: `[o]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
        let (x, w) = (self.value(), weight.value());
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        };
        if x.ndim() != 4 || w.ndim() != 4 {
            return Err(mismatch());
        }
        let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [o, wc, k, k2] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        if wc != c || k != k2 || k % 2 == 0 {
            return Err(mismatch());
        }
        let cols = self.sparse(sparse::im2col(b, c, h, wd, k, k / 2))?;
        let kernel = weight.reshape(&[o, c * k * k])?;
        let mut y = cols.matmul_t(kernel, false, true)?;
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: bias.shape(),
                    rhs: vec![o],
                });
            }
            y = y.add(bias.sparse(sparse::row_broadcast(b * h * wd, o))?)?;
        }
        y.sparse(sparse::nhwc_to_nchw(b, h, wd, o))
    }

    /// Adds a `[cols]` bias to every row of a `[rows, cols]` matrix.
    pub fn add_row_vector(self, bias: Var<'g>) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() != 2 || bias.shape() != [shape[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vector",
                lhs: shape,
                rhs: bias.shape(),
            });
        }
        self.add(bias.sparse(sparse::row_broadcast(shape[0], shape[1]))?)
    }

    /// 2×2 max pooling with stride 2 over the last two axes (odd trailing
    /// rows/columns are dropped). Ties pick the first maximal element in
    /// row-major window order.
    pub fn maxpool2x2(self) -> Result<Var<'g>> {
        let x = self.value();
        if x.ndim() < 2 {
            return Err(TensorError::invalid("maxpool2x2", "needs at least two axes"));
        }
        let n = x.ndim();
        let (h, w) = (x.shape()[n - 2], x.shape()[n - 1]);
        let lead: usize = x.shape()[..n - 2].iter().product();
        let (oh, ow) = (h / 2, w / 2);
        let data = x.data();
        let mut idx = Vec::with_capacity(lead * oh * ow);
        for l in 0..lead {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = (l * h + 2 * i) * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = (l * h + 2 * i + di) * w + 2 * j + dj;
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    idx.push(Some(best));
                }
            }
        }
        let mut out_shape = x.shape().to_vec();
        out_shape[n - 2] = oh;
        out_shape[n - 1] = ow;
        self.sparse(Arc::new(sparse::gather(x.shape(), &out_shape, idx)))
    }

    /// Bilinear resampling of the last two axes.
    pub fn bilinear_resize(self, out_h: usize, out_w: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() < 2 || shape[shape.len() - 2] == 0 || shape[shape.len() - 1] == 0 {
            return Err(TensorError::invalid("bilinear_resize", "needs two non-empty trailing axes"));
        }
        self.sparse(sparse::bilinear_resize(&shape, out_h, out_w))
    }

    /// Mirrors the last axis.
    pub fn flip_last(self) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(TensorError::invalid("flip_last", "needs at least two axes"));
        }
        self.sparse(sparse::flip_w(&shape))
    }

    /// Translates the last two axes by `(dy, dx)`, filling with zeros.
    pub fn shift2d(self, dy: isize, dx: isize) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(TensorError::invalid("shift2d", "needs at least two axes"));
        }
        self.sparse(sparse::shift(&shape, dy, dx))
    }

    /// Picks entry `picks[r]` from row `r` of a `[rows, cols]` matrix.
    pub fn pick_columns(self, picks: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != picks.len() || picks.iter().any(|&p| p >= shape[1]) {
            return Err(TensorError::invalid("pick_columns", format!("{} picks for shape {shape:?}", picks.len())));
        }
        self.sparse(Arc::new(sparse::pick_columns(shape[0], shape[1], picks)))
    }
}

/// Runs `f` on a throwaway graph holding only constants and returns its value.
pub fn eval<F>(f: F) -> Result<Tensor>
where
    F: for<'g> FnOnce(&'g crate::Graph) -> Result<Var<'g>>,
{
    let g = crate::Graph::new();
    let v = f(&g)?;
    Ok(v.value())
}

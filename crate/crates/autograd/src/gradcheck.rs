//! Finite-difference verification of first and second derivatives.
//!
//! [`RandomGraph`] draws a small seeded computation (convolutions, pooling,
//! resampling, matrix products, softmax, norms, ...) over a fixed input; its
//! analytic derivatives are compared against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Result, Tensor, Var};

/// Central-difference gradient of a scalar function of a flat vector.
pub fn numerical_grad(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let orig = probe[j];
        probe[j] = orig + h;
        let fp = f(&probe)?;
        probe[j] = orig - h;
        let fm = f(&probe)?;
        probe[j] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Norm-wise relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

#[derive(Debug, Clone)]
enum ImageStep {
    Conv { out_channels: usize, weight: Vec<f64>, bias: Vec<f64> },
    Relu,
    MaxPool,
    Resize { h: usize, w: usize },
    Flip,
    Shift { dy: isize, dx: isize },
    MulConst(Vec<f64>),
    Square,
    SignedSqrtOffset(f64),
}

#[derive(Debug, Clone)]
enum MatrixStep {
    MatMul { cols: usize, m: Vec<f64> },
    AddRow(Vec<f64>),
    Softmax,
    Sub(Vec<f64>),
}

#[derive(Debug, Clone, Copy)]
enum Reduce {
    Sum,
    Mean,
    L1(f64),
    L2Sq,
    LogSumExp,
}

/// A seeded random differentiable computation of one `[2, 2, 4, 4]` input.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    input: Vec<f64>,
    image_steps: Vec<ImageStep>,
    matrix_steps: Vec<MatrixStep>,
    reduce: Reduce,
}

/// Outcome of a first- and second-order check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub elements: usize,
    pub first_order: f64,
    pub second_order: f64,
}

pub const INPUT_SHAPE: [usize; 4] = [2, 2, 4, 4];

/// Inputs are redrawn until every relu argument, max-pool runner-up gap and
/// L1 argument sits at least this far from its kink, so central differences
/// never straddle one. Exact zeros are constants (padding, dead units) and
/// do not count.
pub const KINK_MARGIN: f64 = 1e-3;

fn min_nonzero_abs(values: impl Iterator<Item = f64>) -> f64 {
    values.map(f64::abs).filter(|&v| v != 0.0).fold(f64::INFINITY, f64::min)
}

fn maxpool_gap(x: &Tensor) -> f64 {
    let n = x.ndim();
    let (h, w) = (x.shape()[n - 2], x.shape()[n - 1]);
    let lead: usize = x.shape()[..n - 2].iter().product();
    let d = x.data();
    let mut gap = f64::INFINITY;
    for l in 0..lead {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let mut win: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(di, dj)| d[(l * h + 2 * i + di) * w + 2 * j + dj])
                    .collect();
                win.sort_by(|a, b| b.total_cmp(a));
                let g = win[0] - win[1];
                if g != 0.0 {
                    gap = gap.min(g);
                }
            }
        }
    }
    gap
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

impl RandomGraph {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in: usize = INPUT_SHAPE.iter().product();
        let input = uniform(&mut rng, n_in, 1.0);
        let [b, mut c, mut h, mut w] = INPUT_SHAPE;
        let mut image_steps = Vec::new();
        for _ in 0..rng.random_range(2..6) {
            let step = match rng.random_range(0..9) {
                0 => {
                    let o = rng.random_range(1..4);
                    let weight = uniform(&mut rng, o * c * 9, 0.5);
                    let bias = uniform(&mut rng, o, 0.5);
                    c = o;
                    ImageStep::Conv { out_channels: o, weight, bias }
                }
                1 => ImageStep::Relu,
                2 if h >= 2 && w >= 2 => {
                    h /= 2;
                    w /= 2;
                    ImageStep::MaxPool
                }
                3 => {
                    h = rng.random_range(2..7);
                    w = rng.random_range(2..7);
                    ImageStep::Resize { h, w }
                }
                4 => ImageStep::Flip,
                5 => ImageStep::Shift {
                    dy: rng.random_range(-1i32..=1) as isize,
                    dx: rng.random_range(-1i32..=1) as isize,
                },
                6 => ImageStep::MulConst(uniform(&mut rng, b * c * h * w, 1.5)),
                7 => ImageStep::Square,
                _ => ImageStep::SignedSqrtOffset(if rng.random_bool(0.5) { 2.0 } else { -2.0 }),
            };
            image_steps.push(step);
        }
        let mut cols = c * h * w;
        let mut matrix_steps = Vec::new();
        for _ in 0..rng.random_range(0..4) {
            let step = match rng.random_range(0..4) {
                0 => {
                    let k = rng.random_range(1..5);
                    let m = uniform(&mut rng, cols * k, 0.7);
                    cols = k;
                    MatrixStep::MatMul { cols: k, m }
                }
                1 => MatrixStep::AddRow(uniform(&mut rng, cols, 1.0)),
                2 => MatrixStep::Softmax,
                _ => MatrixStep::Sub(uniform(&mut rng, b * cols, 1.0)),
            };
            matrix_steps.push(step);
        }
        // softmax rows sum to one and constant shifts keep the row sums fixed,
        // so sum-like reductions of such an output would be constant
        let fixed_row_sums = matrix_steps.iter().fold(false, |fixed, step| match step {
            MatrixStep::Softmax => true,
            MatrixStep::MatMul { .. } => false,
            MatrixStep::AddRow(_) | MatrixStep::Sub(_) => fixed,
        });
        let reduce = match rng.random_range(0..5) {
            0..=2 if fixed_row_sums => Reduce::L2Sq,
            0 => Reduce::Sum,
            1 => Reduce::Mean,
            2 => Reduce::L1(rng.random_range(0.2..0.8)),
            3 => Reduce::L2Sq,
            _ => Reduce::LogSumExp,
        };
        let mut graph = RandomGraph {
            input,
            image_steps,
            matrix_steps,
            reduce,
        };
        for _ in 0..1000 {
            if graph.kink_distance(&graph.input).is_ok_and(|m| m >= KINK_MARGIN) {
                break;
            }
            graph.input = uniform(&mut rng, n_in, 1.0);
        }
        graph
    }

    /// Distance of `x` from the nearest non-differentiable point of the graph.
    pub fn kink_distance(&self, x: &[f64]) -> Result<f64> {
        let g = Graph::new();
        let xv = g.constant(Tensor::new(&INPUT_SHAPE, x.to_vec())?);
        let mut margin = f64::INFINITY;
        self.build_tracked(&g, xv, Some(&mut margin))?;
        Ok(margin)
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    /// Builds the computation on `g` from the input var `x`.
    pub fn build<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        self.build_tracked(g, x, None)
    }

    fn build_tracked<'g>(&self, g: &'g Graph, x: Var<'g>, mut margin: Option<&mut f64>) -> Result<Var<'g>> {
        let mut track = |m: f64| {
            if let Some(slot) = margin.as_deref_mut() {
                *slot = slot.min(m);
            }
        };
        let mut v = x;
        for step in &self.image_steps {
            let s = v.shape();
            match step {
                ImageStep::Relu => track(min_nonzero_abs(v.value().data().iter().copied())),
                ImageStep::MaxPool => track(maxpool_gap(&v.value())),
                _ => {}
            }
            v = match step {
                ImageStep::Conv { out_channels, weight, bias } => {
                    let w = g.constant(Tensor::new(&[*out_channels, s[1], 3, 3], weight.clone())?);
                    let b = g.constant(Tensor::vector(bias.clone())?);
                    v.conv2d(w, Some(b))?
                }
                ImageStep::Relu => v.relu()?,
                ImageStep::MaxPool => v.maxpool2x2()?,
                ImageStep::Resize { h, w } => v.bilinear_resize(*h, *w)?,
                ImageStep::Flip => v.flip_last()?,
                ImageStep::Shift { dy, dx } => v.shift2d(*dy, *dx)?,
                ImageStep::MulConst(c) => v.mul(g.constant(Tensor::new(&s, c.clone())?))?,
                ImageStep::Square => v.mul(v)?,
                // keep the argument away from the origin where the derivative blows up
                ImageStep::SignedSqrtOffset(o) => v.mul(v)?.add_scalar(1.0)?.scale(o.signum())?.add_scalar(*o)?.signed_sqrt()?,
            };
        }
        let s = v.shape();
        let rows = s[0];
        v = v.reshape(&[rows, s[1..].iter().product()])?;
        for step in &self.matrix_steps {
            let s = v.shape();
            v = match step {
                MatrixStep::MatMul { cols, m } => v.matmul(g.constant(Tensor::new(&[s[1], *cols], m.clone())?))?,
                MatrixStep::AddRow(b) => v.add_row_vector(g.constant(Tensor::vector(b.clone())?))?,
                MatrixStep::Softmax => v.softmax()?,
                MatrixStep::Sub(c) => v.sub(g.constant(Tensor::new(&s, c.clone())?))?,
            };
        }
        match self.reduce {
            Reduce::Sum => v.sum(),
            Reduce::Mean => v.mean(),
            Reduce::L1(shift) => {
                let shifted = v.add_scalar(shift)?;
                track(min_nonzero_abs(shifted.value().data().iter().copied()));
                shifted.l1_norm()
            }
            Reduce::L2Sq => v.l2_norm_sq(),
            Reduce::LogSumExp => {
                let n = v.value().len();
                v.reshape(&[n])?.log_sum_exp()
            }
        }
    }

    fn value_at(&self, x: &[f64]) -> Result<f64> {
        let g = Graph::new();
        let xv = g.constant(Tensor::new(&INPUT_SHAPE, x.to_vec())?);
        self.build(&g, xv)?.item()
    }

    fn grad_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let xv = g.leaf(Tensor::new(&INPUT_SHAPE, x.to_vec())?);
        let y = self.build(&g, xv)?;
        Ok(g.grad_values(y, &[xv])?.remove(0).to_vec())
    }

    /// Directional quantity `∇f(x)·v` whose gradient is the Hessian-vector
    /// product `H v`.
    fn hvp_at(&self, x: &[f64], dir: &[f64]) -> Result<(f64, Vec<f64>)> {
        let g = Graph::new();
        let xv = g.leaf(Tensor::new(&INPUT_SHAPE, x.to_vec())?);
        let y = self.build(&g, xv)?;
        let gx = g.grad(y, &[xv], true)?[0];
        let d = g.constant(Tensor::new(&INPUT_SHAPE, dir.to_vec())?);
        let s = gx.mul(d)?.sum()?;
        let hv = g.grad_values(s, &[xv])?.remove(0).to_vec();
        Ok((s.item()?, hv))
    }

    /// Compares analytic first derivatives and Hessian-vector products with
    /// central differences at step `h`.
    pub fn check(&self, h: f64, seed: u64) -> Result<GradCheck> {
        let x = self.input.clone();
        let analytic = self.grad_at(&x)?;
        let numeric = numerical_grad(|p| self.value_at(p), &x, h)?;
        let first_order = relative_error(&analytic, &numeric);

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let dir = uniform(&mut rng, x.len(), 1.0);
        let (_, hv) = self.hvp_at(&x, &dir)?;
        let numeric_hv = numerical_grad(
            |p| {
                let gp = self.grad_at(p)?;
                Ok(gp.iter().zip(&dir).map(|(a, b)| a * b).sum())
            },
            &x,
            h,
        )?;
        let second_order = relative_error(&hv, &numeric_hv);
        Ok(GradCheck {
            elements: x.len(),
            first_order,
            second_order,
        })
    }
}

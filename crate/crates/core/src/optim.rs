//! Optimizers (SGD, Adam, SAM), classifier training loops, the full-batch
//! hinge trainer and the gradient-direction diagnostic.

use dsv_autograd::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{AugmentFamily, Augmentation, Dataset};
use crate::error::{Error, Result};
use crate::nn::{self, Model, ParamMask};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    /// Sharpness-aware minimization with an inner plain SGD step.
    Sam { rho: f64 },
}

/// Optimizer state. Moments are allocated on the first step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask: ParamMask,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Scalar objective built on the graph owning `params`.
pub trait Objective {
    fn loss<'g>(&self, model: &Model, params: &[Var<'g>]) -> Result<Var<'g>>;
}

impl<F> Objective for F
where
    F: for<'g> Fn(&Model, &[Var<'g>]) -> Result<Var<'g>>,
{
    fn loss<'g>(&self, model: &Model, params: &[Var<'g>]) -> Result<Var<'g>> {
        self(model, params)
    }
}

/// Mean cross-entropy of a fixed batch, optionally augmented.
#[derive(Debug, Clone)]
pub struct BatchLoss<'a> {
    pub x: &'a Tensor,
    pub labels: &'a [usize],
    pub aug: Option<Augmentation>,
}

impl Objective for BatchLoss<'_> {
    fn loss<'g>(&self, model: &Model, params: &[Var<'g>]) -> Result<Var<'g>> {
        let mut xv = params[0].graph().constant(self.x.clone());
        if let Some(a) = self.aug {
            xv = a.apply_var(xv, 0)?;
        }
        nn::cross_entropy(model.forward_graph(params, xv)?, self.labels)
    }
}

/// Loss value and the gradient of every flagged parameter (`None` for the
/// rest).
pub fn loss_and_grad(model: &Model, flags: &[bool], objective: &impl Objective) -> Result<(f64, Vec<Option<Tensor>>)> {
    let g = Graph::new();
    let params = model.bind(&g, flags);
    let loss = objective.loss(model, &params)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let leaves: Vec<Var> = params.iter().zip(flags).filter(|(_, &f)| f).map(|(p, _)| *p).collect();
    let mut grads = g.grad_values(loss, &leaves)?.into_iter();
    let out = flags.iter().map(|&f| if f { grads.next() } else { None }).collect();
    Ok((value, out))
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        if let OptimizerKind::Sam { rho } = kind {
            if !(rho >= 0.0 && rho.is_finite()) {
                return Err(Error::Config(format!("SAM radius {rho} must be non-negative")));
            }
        }
        Ok(Optimizer {
            kind,
            lr,
            weight_decay: 0.0,
            mask: ParamMask::Full,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn sam(lr: f64, rho: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sam { rho }, lr)
    }

    /// Adds `d·θ` to every trained parameter's gradient.
    pub fn with_weight_decay(mut self, d: f64) -> Self {
        self.weight_decay = d;
        self
    }

    /// Restricts updates to the masked parameters.
    pub fn with_mask(mut self, mask: ParamMask) -> Self {
        self.mask = mask;
        self
    }

    /// One update. Returns the new model and the loss at the starting point.
    pub fn step(&mut self, model: &Model, objective: &impl Objective) -> Result<(Model, f64)> {
        let flags = model.mask_flags(&self.mask)?;
        let (loss, mut grads) = loss_and_grad(model, &flags, objective)?;

        if let OptimizerKind::Sam { rho } = self.kind {
            let norm = grads.iter().flatten().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
            // a zero radius or a zero gradient leaves the ascent point at θ
            if rho > 0.0 && norm > 0.0 {
                let perturbed = model
                    .params()
                    .iter()
                    .zip(&grads)
                    .map(|((_, p), g)| match g {
                        Some(g) => p.zip_map(g, |p, g| p + rho * g / norm),
                        None => Ok(p.clone()),
                    })
                    .collect::<dsv_autograd::Result<Vec<_>>>()?;
                let probe = model.with_tensors(perturbed)?;
                grads = loss_and_grad(&probe, &flags, objective)?.1;
            }
        }

        let d = self.weight_decay;
        let mut updated = Vec::with_capacity(flags.len());
        if self.m.is_empty() {
            self.m = model.params().iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let t = self.t;
        for (k, ((_, p), g)) in model.params().iter().zip(&grads).enumerate() {
            let Some(g) = g else {
                updated.push(p.clone());
                continue;
            };
            let mut next = Vec::with_capacity(p.len());
            for (j, (&theta, &gj)) in p.data().iter().zip(g.data()).enumerate() {
                let grad = gj + d * theta;
                if !grad.is_finite() {
                    return Err(Error::NonFinite("gradient"));
                }
                next.push(match self.kind {
                    OptimizerKind::Sgd | OptimizerKind::Sam { .. } => theta - self.lr * grad,
                    OptimizerKind::Adam => {
                        let m = &mut self.m[k][j];
                        let v = &mut self.v[k][j];
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * grad;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * grad * grad;
                        let m_hat = *m / (1.0 - ADAM_BETA1.powi(t));
                        let v_hat = *v / (1.0 - ADAM_BETA2.powi(t));
                        theta - self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS)
                    }
                });
            }
            updated.push(Tensor::new(p.shape(), next)?);
        }
        Ok((model.with_tensors(updated)?, loss))
    }
}

/// Mini-batch cross-entropy training schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `0` means full batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Apply one augmentation from the dataset's family to each batch.
    pub augment: bool,
    /// Stop after the first epoch whose training accuracy reaches this.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            seed: 0,
            augment: false,
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trains `model` on `data` with mean cross-entropy.
pub fn train_classifier(model: &Model, data: &Dataset, opt: &mut Optimizer, cfg: &TrainConfig) -> Result<(Model, Vec<EpochLog>)> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let family = AugmentFamily::for_features(data.feature_shape());
    let batch = if cfg.batch_size == 0 { data.len() } else { cfg.batch_size };
    let mut model = model.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let x = data.batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let aug = if cfg.augment { Some(family.sample(&mut rng)) } else { None };
            let objective = BatchLoss {
                x: &x,
                labels: &labels,
                aug,
            };
            let (next, loss) = opt.step(&model, &objective)?;
            model = next;
            total += loss * chunk.len() as f64;
        }
        let accuracy = nn::accuracy(&model, data)?;
        log.push(EpochLog {
            epoch,
            loss: total / data.len() as f64,
            accuracy,
        });
        if cfg.target_accuracy.is_some_and(|t| accuracy >= t) {
            break;
        }
    }
    Ok((model, log))
}

/// Full-batch subgradient descent on the mean hinge loss of a linear
/// classifier with the bias folded into the weights (`x̃ = [x; 1]`), starting
/// from `w̃ = 0`. Returns `w̃ = [w; b]`.
pub fn train_hinge_linear(rows: &[Vec<f64>], y: &[f64], lr: f64, steps: usize) -> Result<Vec<f64>> {
    if rows.is_empty() || rows.len() != y.len() {
        return Err(Error::Dataset("hinge training needs matching non-empty rows and labels".into()));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Dataset("hinge labels must be ±1".into()));
    }
    let d = rows[0].len();
    let mut w = vec![0.0; d + 1];
    for _ in 0..steps {
        let grad = hinge_gradient(rows, y, &w);
        if grad.iter().all(|&g| g == 0.0) {
            break;
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= lr * gi;
        }
    }
    Ok(w)
}

/// Mean hinge subgradient: `0` for samples with `y w̃ᵀx̃ > 1`, else `−y x̃`.
pub fn hinge_gradient(rows: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    let d = w.len() - 1;
    let n = rows.len() as f64;
    let mut grad = vec![0.0; d + 1];
    for (x, &yi) in rows.iter().zip(y) {
        if yi * decision(w, x) <= 1.0 {
            for j in 0..d {
                grad[j] -= yi * x[j] / n;
            }
            grad[d] -= yi / n;
        }
    }
    grad
}

/// Mean hinge loss `max(0, 1 − y w̃ᵀx̃)`.
pub fn hinge_loss(rows: &[Vec<f64>], y: &[f64], w: &[f64]) -> f64 {
    rows.iter().zip(y).map(|(x, &yi)| (1.0 - yi * decision(w, x)).max(0.0)).sum::<f64>() / rows.len() as f64
}

/// `w̃ᵀx̃` with the bias stored last.
pub fn decision(w: &[f64], x: &[f64]) -> f64 {
    let d = w.len() - 1;
    w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d]
}

/// Cosines between probed full-batch gradients and the final probe.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTrace {
    /// Step index of each retained probe.
    pub steps: Vec<usize>,
    pub cosines: Vec<f64>,
    /// Probes dropped because the gradient was exactly zero.
    pub skipped: Vec<usize>,
    pub final_loss: f64,
}

/// Trains with full-batch cross-entropy for `steps` steps and probes the
/// flattened gradient every `probe_interval` steps (and at the last step).
pub fn grad_direction_trace(model: &Model, data: &Dataset, opt: &mut Optimizer, steps: usize, probe_interval: usize) -> Result<GradTrace> {
    if steps == 0 || probe_interval == 0 {
        return Err(Error::Config("grad trace needs steps > 0 and probe interval > 0".into()));
    }
    let x = data.features().clone();
    let labels = data.labels().to_vec();
    let objective = BatchLoss {
        x: &x,
        labels: &labels,
        aug: None,
    };
    let flags = model.mask_flags(&opt.mask)?;
    let mut model = model.clone();
    let mut probes: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut skipped = Vec::new();
    let mut final_loss = 0.0;
    for step in 0..steps {
        if step % probe_interval == 0 || step + 1 == steps {
            let (_, grads) = loss_and_grad(&model, &flags, &objective)?;
            let flat: Vec<f64> = grads.iter().flatten().flat_map(|t| t.data().to_vec()).collect();
            if flat.iter().all(|&v| v == 0.0) {
                skipped.push(step);
            } else {
                probes.push((step, flat));
            }
        }
        let (next, loss) = opt.step(&model, &objective)?;
        model = next;
        final_loss = loss;
    }
    let Some((_, last)) = probes.last().cloned() else {
        return Ok(GradTrace {
            steps: Vec::new(),
            cosines: Vec::new(),
            skipped,
            final_loss,
        });
    };
    let cosines = probes.iter().map(|(_, g)| cosine(g, &last)).collect();
    Ok(GradTrace {
        steps: probes.into_iter().map(|(s, _)| s).collect(),
        cosines,
        skipped,
        final_loss,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Arch;

    fn scalar_model(theta: f64) -> Model {
        // a 1-input linear model whose only trainable entry is fc.weight[0, 0]
        let arch = Arch::Linear {
            input: vec![1],
            classes: 2,
        };
        Model::from_params(
            arch,
            vec![
                ("fc.weight".into(), Tensor::new(&[2, 1], vec![theta, 0.0]).unwrap()),
                ("fc.bias".into(), Tensor::zeros(&[2])),
            ],
        )
        .unwrap()
    }

    fn theta_sq<'g>(_: &Model, p: &[Var<'g>]) -> Result<Var<'g>> {
        let w = p[0].reshape(&[2])?;
        Ok(w.mul(w)?.sum()?)
    }

    fn theta(m: &Model) -> f64 {
        m.param("fc.weight").unwrap().data()[0]
    }

    #[test]
    fn sgd_closed_form() {
        let mut opt = Optimizer::sgd(0.1).unwrap().with_mask(ParamMask::Names(vec!["fc.weight".into()]));
        let (m, loss) = opt.step(&scalar_model(1.0), &theta_sq).unwrap();
        assert_eq!(loss, 1.0);
        assert!((theta(&m) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sam_hand_computation() {
        let mut opt = Optimizer::sam(0.1, 0.1).unwrap();
        let (m, _) = opt.step(&scalar_model(1.0), &theta_sq).unwrap();
        assert!((theta(&m) - 0.78).abs() < 1e-15);
    }

    #[test]
    fn sam_zero_radius_is_sgd() {
        let start = Model::new(
            Arch::Mlp {
                input: vec![3],
                hidden: vec![4],
                classes: 2,
            },
            3,
        )
        .unwrap();
        let x = Tensor::new(&[2, 3], vec![0.1, -0.4, 0.9, 1.0, 0.3, -0.2]).unwrap();
        let obj = BatchLoss {
            x: &x,
            labels: &[0, 1],
            aug: None,
        };
        let mut sgd = Optimizer::sgd(0.3).unwrap().with_weight_decay(0.01);
        let mut sam = Optimizer::sam(0.3, 0.0).unwrap().with_weight_decay(0.01);
        let (mut a, mut b) = (start.clone(), start);
        for _ in 0..5 {
            a = sgd.step(&a, &obj).unwrap().0;
            b = sam.step(&b, &obj).unwrap().0;
        }
        assert!(a.flatten(&ParamMask::Full).unwrap().bit_eq(&b.flatten(&ParamMask::Full).unwrap()));
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut opt = Optimizer::adam(1e-3).unwrap();
        let (m, _) = opt.step(&scalar_model(1.0), &theta_sq).unwrap();
        assert!((theta(&m) - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_matches_penalty_gradient() {
        let d = 0.05;
        let mut opt = Optimizer::sgd(1.0).unwrap().with_weight_decay(d);
        let start = scalar_model(1.5);
        let (m, _) = opt.step(&start, &theta_sq).unwrap();
        // penalized objective θ² + d/2 θ² has derivative (2 + d) θ
        let fd = {
            let f = |t: f64| t * t + 0.5 * d * t * t;
            (f(1.5 + 1e-6) - f(1.5 - 1e-6)) / 2e-6
        };
        assert!((theta(&start) - theta(&m) - fd).abs() < 1e-8);
    }

    #[test]
    fn hinge_first_step_and_dead_zone() {
        let rows = vec![vec![2.0], vec![-1.0], vec![3.0]];
        let y = vec![1.0, -1.0, 1.0];
        let g = hinge_gradient(&rows, &y, &[0.0, 0.0]);
        assert!((g[0] + 2.0).abs() < 1e-15);
        assert!((g[1] + 1.0 / 3.0).abs() < 1e-15);
        let satisfied = [5.0, 0.0];
        assert_eq!(hinge_gradient(&rows, &y, &satisfied), vec![0.0, 0.0]);
        assert_eq!(train_hinge_linear(&rows, &y, 0.1, 0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hinge_one_dimensional_direction() {
        let rows = vec![vec![1.0], vec![-1.0]];
        let y = vec![1.0, -1.0];
        let w = train_hinge_linear(&rows, &y, 0.01, 10_000).unwrap();
        assert!(w[0] > 0.0);
        assert_eq!(hinge_loss(&rows, &y, &w), 0.0);
    }
}

//! Per-candidate evaluation of the DeepKKT objective and its gradients.
//!
//! The stationarity residual couples all candidates only through the sum
//! `S = Σ λ_i g_i`. Writing `u = β·D'(θ + φ(S)) ⊙ φ'(S)`, the gradients are
//!
//! * `∂/∂λ_i = u · g_i`
//! * `∂/∂x_i = λ_i ∇_x (u · g_i(x_i))`, `u` held fixed,
//!
//! so each candidate gets its own small graph. Phase 1 computes every `g_i`
//! in parallel, phase 2 reduces them serially in candidate order, phase 3
//! differentiates each candidate's `u · g_i` in parallel.

use dsv_autograd::{Graph, Tensor, Var};
use rayon::prelude::*;

use super::loss::candidate_loss;
use super::{DsvCandidate, ExtractConfig, LossKind, Metric};
use crate::data::Augmentation;
use crate::error::{Error, Result};
use crate::nn::{self, Model};

pub(crate) struct Probe {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grad: Vec<f64>,
    pub correct: bool,
}

/// Model input for one candidate: optional bilinear upsampling to the
/// model's resolution, then the augmentation.
fn model_input<'g>(x: Var<'g>, render: Option<[usize; 2]>, aug: Option<&Augmentation>, key: u64) -> Result<Var<'g>> {
    let mut v = x;
    if let Some([h, w]) = render {
        v = v.bilinear_resize(h, w)?;
    }
    if let Some(a) = aug {
        v = a.apply_var(v, key)?;
    }
    Ok(v)
}

fn batched(x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    Ok(x.reshape(&shape)?)
}

fn masked<'g>(params: &[Var<'g>], flags: &[bool]) -> Vec<Var<'g>> {
    params.iter().zip(flags).filter(|(_, &f)| f).map(|(p, _)| *p).collect()
}

/// Loss, logits and the flattened masked parameter gradient of one sample.
#[allow(clippy::too_many_arguments)]
pub(crate) fn probe(
    model: &Model,
    flags: &[bool],
    x: &Tensor,
    render: Option<[usize; 2]>,
    aug: Option<&Augmentation>,
    key: u64,
    y: usize,
    kind: LossKind,
) -> Result<Probe> {
    let g = Graph::new();
    let params = model.bind(&g, flags);
    let input = model_input(g.constant(batched(x)?), render, aug, key)?;
    let logits = model.forward_graph(&params, input)?;
    let row = logits.value().to_vec();
    let loss = candidate_loss(logits, y, kind)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("candidate loss"));
    }
    let grads = g.grad_values(loss, &masked(&params, flags))?;
    let grad: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter gradient"));
    }
    Ok(Probe {
        loss: value,
        correct: nn::argmax(&row) == y,
        logits: row,
        grad,
    })
}

/// Per-view weights for phase 3.
struct ViewTerm<'a> {
    aug: Option<&'a Augmentation>,
    u: Option<&'a [f64]>,
    primal_coef: f64,
}

/// `∇_x Σ_v [λ·(u_v · g_v(x)) + c_v·L_v(x)]` for one candidate.
fn x_gradient(
    model: &Model,
    flags: &[bool],
    c: &DsvCandidate,
    key: u64,
    render: Option<[usize; 2]>,
    kind: LossKind,
    views: &[ViewTerm<'_>],
) -> Result<Tensor> {
    let g = Graph::new();
    let params = model.bind(&g, flags);
    let leaves = masked(&params, flags);
    let x = g.leaf(batched(&c.x)?);
    let mut obj: Option<Var> = None;
    for view in views {
        let stat = view.u.filter(|_| c.lambda != 0.0);
        if stat.is_none() && view.primal_coef == 0.0 {
            continue;
        }
        let input = model_input(x, render, view.aug, key)?;
        let loss = candidate_loss(model.forward_graph(&params, input)?, c.y, kind)?;
        let mut term: Option<Var> = None;
        if let Some(u) = stat {
            let gs = g.grad(loss, &leaves, true)?;
            let mut offset = 0;
            let mut dot: Option<Var> = None;
            for gp in gs {
                let n = gp.value().len();
                let w = g.constant(Tensor::new(&gp.shape(), u[offset..offset + n].to_vec())?);
                offset += n;
                let d = gp.mul(w)?.sum()?;
                dot = Some(match dot {
                    Some(a) => a.add(d)?,
                    None => d,
                });
            }
            if let Some(d) = dot {
                term = Some(d.scale(c.lambda)?);
            }
        }
        if view.primal_coef != 0.0 {
            let p = loss.scale(view.primal_coef)?;
            term = Some(match term {
                Some(t) => t.add(p)?,
                None => p,
            });
        }
        if let Some(t) = term {
            obj = Some(match obj {
                Some(o) => o.add(t)?,
                None => t,
            });
        }
    }
    let Some(obj) = obj else {
        return Ok(Tensor::zeros(c.x.shape()));
    };
    let grad = g.grad_values(obj, &[x])?.remove(0);
    if grad.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input gradient"));
    }
    Ok(grad.reshape(c.x.shape())?)
}

/// Objective values and gradients at the current candidates.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `L_total` including the augmented view.
    pub total: f64,
    /// Primal loss on the unaugmented candidates.
    pub primal: f64,
    /// Stationarity loss on the unaugmented candidates (unweighted).
    pub stationarity: f64,
    /// `None` for dead candidates, and everywhere when gradients were not
    /// requested.
    pub grad_x: Vec<Option<Tensor>>,
    pub grad_lambda: Vec<f64>,
    /// Softmax entropy of each alive candidate on the unaugmented view.
    pub entropy: Vec<Option<f64>>,
    pub correct: Vec<Option<bool>>,
}

impl Evaluation {
    pub fn mean_entropy(&self) -> f64 {
        let v: Vec<f64> = self.entropy.iter().flatten().copied().collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn all_correct(&self) -> bool {
        self.correct.iter().flatten().all(|&c| c)
    }
}

/// Evaluates `L_total` and its gradients for every alive candidate.
///
/// `render` upsamples each `x` to the given spatial size before the model
/// sees it; gradients are then with respect to the low-resolution `x`.
pub fn evaluate(
    model: &Model,
    candidates: &[DsvCandidate],
    cfg: &ExtractConfig,
    aug: Option<&Augmentation>,
    render: Option<[usize; 2]>,
) -> Result<Evaluation> {
    evaluate_inner(model, candidates, cfg, aug, render, true)
}

pub(crate) fn evaluate_inner(
    model: &Model,
    candidates: &[DsvCandidate],
    cfg: &ExtractConfig,
    aug: Option<&Augmentation>,
    render: Option<[usize; 2]>,
    gradients: bool,
) -> Result<Evaluation> {
    let flags = model.mask_flags(&cfg.mask)?;
    let theta = model.flatten(&cfg.mask)?.to_vec();
    let alive: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].alive).collect();
    if alive.is_empty() {
        return Err(Error::NoAliveCandidates);
    }
    let mut views: Vec<(Option<&Augmentation>, f64)> = vec![(None, 1.0)];
    if let Some(a) = aug {
        if cfg.gamma != 0.0 {
            views.push((Some(a), cfg.gamma));
        }
    }

    // phase 1
    let jobs: Vec<(usize, usize)> = alive.iter().flat_map(|&i| (0..views.len()).map(move |v| (i, v))).collect();
    let probes = jobs
        .par_iter()
        .map(|&(i, v)| {
            let c = &candidates[i];
            probe(model, &flags, &c.x, render, views[v].0, i as u64, c.y, cfg.loss)
        })
        .collect::<Result<Vec<Probe>>>()?;
    let at = |k: usize, v: usize| &probes[k * views.len() + v];

    // phase 2
    let n = alive.len() as f64;
    let mut total = 0.0;
    let mut primal0 = 0.0;
    let mut stat0 = 0.0;
    let mut us: Vec<Option<Vec<f64>>> = Vec::with_capacity(views.len());
    let mut coefs: Vec<Vec<f64>> = Vec::with_capacity(views.len());
    for (v, &(_, weight)) in views.iter().enumerate() {
        let mut s = vec![0.0; theta.len()];
        let mut primal = 0.0;
        for (k, &i) in alive.iter().enumerate() {
            let p = at(k, v);
            let lambda = candidates[i].lambda;
            for (sj, gj) in s.iter_mut().zip(&p.grad) {
                *sj += lambda * gj;
            }
            if !p.correct {
                primal += p.loss;
            }
        }
        primal /= n;
        let r: Vec<f64> = theta
            .iter()
            .zip(&s)
            .map(|(t, sj)| t + if cfg.signed_sqrt { super::loss::signed_sqrt(*sj) } else { *sj })
            .collect();
        let stat: f64 = match cfg.metric {
            Metric::L1 => r.iter().map(|v| v.abs()).sum(),
            Metric::L2Sq => r.iter().map(|v| v * v).sum(),
        };
        if v == 0 {
            primal0 = primal;
            stat0 = stat;
        }
        total += weight * (cfg.primal_weight * primal + cfg.beta * stat);
        us.push((cfg.beta != 0.0).then(|| {
            r.iter()
                .zip(&s)
                .map(|(&rj, &sj)| {
                    let d = match cfg.metric {
                        Metric::L1 => sign0(rj),
                        Metric::L2Sq => 2.0 * rj,
                    };
                    let slope = if cfg.signed_sqrt { sqrt_slope(sj) } else { 1.0 };
                    weight * cfg.beta * d * slope
                })
                .collect()
        }));
        coefs.push(
            (0..alive.len())
                .map(|k| if at(k, v).correct { 0.0 } else { weight * cfg.primal_weight / n })
                .collect(),
        );
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("kkt loss"));
    }

    let mut entropy = vec![None; candidates.len()];
    let mut correct = vec![None; candidates.len()];
    for (k, &i) in alive.iter().enumerate() {
        entropy[i] = Some(nn::entropy(&at(k, 0).logits));
        correct[i] = Some(at(k, 0).correct);
    }
    let mut grad_x = vec![None; candidates.len()];
    let mut grad_lambda = vec![0.0; candidates.len()];
    if gradients {
        for (k, &i) in alive.iter().enumerate() {
            grad_lambda[i] = us
                .iter()
                .enumerate()
                .filter_map(|(v, u)| u.as_ref().map(|u| dot(u, &at(k, v).grad)))
                .sum();
        }
        // phase 3
        let gx = alive
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let terms: Vec<ViewTerm> = views
                    .iter()
                    .enumerate()
                    .map(|(v, &(a, _))| ViewTerm {
                        aug: a,
                        u: us[v].as_deref(),
                        primal_coef: coefs[v][k],
                    })
                    .collect();
                x_gradient(model, &flags, &candidates[i], i as u64, render, cfg.loss, &terms)
            })
            .collect::<Result<Vec<Tensor>>>()?;
        for (&i, t) in alive.iter().zip(gx) {
            grad_x[i] = Some(t);
        }
    }
    Ok(Evaluation {
        total,
        primal: primal0,
        stationarity: stat0,
        grad_x,
        grad_lambda,
        entropy,
        correct,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Derivative of the signed square root, taken as 0 at the origin.
fn sqrt_slope(s: f64) -> f64 {
    if s == 0.0 {
        0.0
    } else {
        0.5 / s.abs().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deepkkt::{kkt_gradients, stationarity_loss};
    use crate::nn::{Arch, ParamMask};
    use dsv_autograd::gradcheck::{numerical_grad, relative_error};

    fn image_model() -> Model {
        Model::new(
            Arch::Mlp {
                input: vec![1, 6, 6],
                hidden: vec![5],
                classes: 3,
            },
            9,
        )
        .unwrap()
    }

    fn image_candidates(m: &Model) -> Vec<DsvCandidate> {
        let cfg = ExtractConfig {
            per_class: 2,
            seed: 3,
            ..ExtractConfig::for_model(m)
        };
        let mut c = crate::deepkkt::init_noise(m, &cfg).unwrap();
        for (i, d) in c.iter_mut().enumerate() {
            d.lambda = 0.05 + 0.03 * i as f64;
        }
        c[4].alive = false;
        c
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn matches_whole_graph_route() {
        let m = image_model();
        let cands = image_candidates(&m);
        let base = ExtractConfig {
            beta: 0.7,
            gamma: 2.0,
            ..ExtractConfig::for_model(&m)
        };
        let configs = [
            base.clone(),
            ExtractConfig { metric: Metric::L2Sq, ..base.clone() },
            ExtractConfig { signed_sqrt: true, ..base.clone() },
            ExtractConfig { mask: ParamMask::LastLayer, primal_weight: 0.0, ..base.clone() },
            ExtractConfig { loss: LossKind::Hinge, ..base.clone() },
        ];
        let augs = [
            None,
            Some(Augmentation::HFlip),
            Some(Augmentation::Crop { pad: 2, oy: 0, ox: 3 }),
            Some(Augmentation::Jitter { sigma: 0.1, seed: 5 }),
        ];
        for cfg in &configs {
            for aug in &augs {
                let e = evaluate(&m, &cands, cfg, aug.as_ref(), None).unwrap();
                let w = kkt_gradients(&m, &cands, cfg, aug.as_ref()).unwrap();
                assert!(close(e.total, w.total), "{cfg:?} {aug:?}: {} vs {}", e.total, w.total);
                for i in 0..cands.len() {
                    assert!(close(e.grad_lambda[i], w.grad_lambda[i]), "λ{i}: {} vs {}", e.grad_lambda[i], w.grad_lambda[i]);
                    match (&e.grad_x[i], &w.grad_x[i]) {
                        (Some(a), Some(b)) => {
                            for (x, y) in a.data().iter().zip(b.data()) {
                                assert!(close(*x, *y), "x{i}: {x} vs {y}");
                            }
                        }
                        (None, None) => assert!(!cands[i].alive),
                        _ => panic!("alive mismatch at {i}"),
                    }
                }
            }
        }
    }

    #[test]
    fn stationarity_input_gradient_matches_differences() {
        let m = Model::from_params(
            Arch::Linear {
                input: vec![1],
                classes: 2,
            },
            vec![
                ("fc.weight".into(), Tensor::new(&[2, 1], vec![0.8, -0.3]).unwrap()),
                ("fc.bias".into(), Tensor::new(&[2], vec![0.1, -0.2]).unwrap()),
            ],
        )
        .unwrap();
        let cfg = ExtractConfig {
            mask: ParamMask::Names(vec!["fc.weight".into()]),
            beta: 1.0,
            primal_weight: 0.0,
            gamma: 0.0,
            ..ExtractConfig::for_model(&m)
        };
        let x0 = 0.7;
        let lambda = 0.4;
        let cand = |x: f64| vec![DsvCandidate::new(Tensor::vector(vec![x]).unwrap(), 1, lambda)];
        let fd = numerical_grad(|v: &[f64]| Ok(stationarity_loss(&m, &cand(v[0]), &cfg).unwrap()), &[x0], 1e-6).unwrap();
        let whole = kkt_gradients(&m, &cand(x0), &cfg, None).unwrap().grad_x[0].clone().unwrap();
        let split = evaluate(&m, &cand(x0), &cfg, None, None).unwrap().grad_x[0].clone().unwrap();
        assert!(relative_error(whole.data(), &fd) < 1e-4, "{:?} vs {fd:?}", whole.data());
        assert!(relative_error(split.data(), &fd) < 1e-4, "{:?} vs {fd:?}", split.data());
    }

    #[test]
    fn lowres_gradient_matches_differences() {
        let m = image_model();
        let cfg = ExtractConfig {
            metric: Metric::L2Sq,
            beta: 0.5,
            gamma: 0.0,
            ..ExtractConfig::for_model(&m)
        };
        let x = Tensor::new(&[1, 3, 3], (0..9).map(|k| 0.1 + 0.08 * k as f64).collect()).unwrap();
        let at = |v: &[f64]| vec![DsvCandidate::new(Tensor::new(&[1, 3, 3], v.to_vec()).unwrap(), 2, 0.3)];
        let fd = numerical_grad(
            |v: &[f64]| Ok(evaluate_inner(&m, &at(v), &cfg, None, Some([6, 6]), false).unwrap().total),
            x.data(),
            1e-6,
        )
        .unwrap();
        let e = evaluate(&m, &at(x.data()), &cfg, None, Some([6, 6])).unwrap();
        assert!(relative_error(e.grad_x[0].as_ref().unwrap().data(), &fd) < 1e-5);
    }

    #[test]
    fn no_alive_candidates() {
        let m = image_model();
        let mut c = image_candidates(&m);
        c.iter_mut().for_each(|d| d.alive = false);
        assert!(matches!(
            evaluate(&m, &c, &ExtractConfig::for_model(&m), None, None),
            Err(Error::NoAliveCandidates)
        ));
    }
}

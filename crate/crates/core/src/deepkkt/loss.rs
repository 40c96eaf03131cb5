//! Whole-graph DeepKKT losses.
//!
//! These build every candidate into one graph and differentiate through it
//! directly. The synthesis loop uses the per-candidate decomposition in
//! `engine` instead; the two routes must agree.

use dsv_autograd::{Graph, Tensor, Var};

use super::{DsvCandidate, ExtractConfig, LossKind, Metric};
use crate::data::Augmentation;
use crate::error::{Error, Result};
use crate::nn::{argmax, Model};

/// Hinge samples whose margin exceeds `1 + HINGE_KINK_TOL` take the zero
/// branch.
pub(crate) const HINGE_KINK_TOL: f64 = 1e-6;

/// `L(Φ(x), y)` for one `[1, C]` logit row.
pub fn candidate_loss<'g>(logits: Var<'g>, y: usize, kind: LossKind) -> Result<Var<'g>> {
    let row = logits.value();
    let classes = row.len();
    if y >= classes {
        return Err(Error::Config(format!("label {y} outside 0..{classes}")));
    }
    match kind {
        LossKind::CrossEntropy => {
            let lse = logits.log_sum_exp()?.sum()?;
            Ok(lse.sub(logits.pick_columns(&[y])?.sum()?)?)
        }
        LossKind::Hinge => {
            let data = row.data();
            let rival = (0..classes)
                .filter(|&c| c != y)
                .fold(None::<usize>, |best, c| match best {
                    Some(b) if data[b] >= data[c] => Some(b),
                    _ => Some(c),
                })
                .expect("at least two classes");
            let gap = data[y] - data[rival];
            if gap > 1.0 + HINGE_KINK_TOL {
                // flat branch: keep the dependency so shapes and graphs line up
                return Ok(logits.sum()?.scale(0.0)?);
            }
            let diff = logits.pick_columns(&[rival])?.sub(logits.pick_columns(&[y])?)?;
            Ok(diff.sum()?.add_scalar(1.0)?)
        }
    }
}

fn correct(logits: &Tensor, y: usize) -> bool {
    argmax(logits.data()) == y
}

/// Alive candidates bound into a graph.
pub(crate) struct Bound<'g> {
    pub xs: Vec<Var<'g>>,
    pub ys: Vec<usize>,
    pub lambdas: Vec<Var<'g>>,
    pub keys: Vec<u64>,
    pub index: Vec<usize>,
}

pub(crate) fn bind<'g>(g: &'g Graph, candidates: &[DsvCandidate], differentiable: bool) -> Result<Bound<'g>> {
    let mut b = Bound {
        xs: Vec::new(),
        ys: Vec::new(),
        lambdas: Vec::new(),
        keys: Vec::new(),
        index: Vec::new(),
    };
    for (i, c) in candidates.iter().enumerate().filter(|(_, c)| c.alive) {
        let mut shape = vec![1];
        shape.extend_from_slice(c.x.shape());
        let x = c.x.reshape(&shape)?;
        let lambda = Tensor::scalar(c.lambda)?;
        if differentiable {
            b.xs.push(g.leaf(x));
            b.lambdas.push(g.leaf(lambda));
        } else {
            b.xs.push(g.constant(x));
            b.lambdas.push(g.constant(lambda));
        }
        b.ys.push(c.y);
        b.keys.push(i as u64);
        b.index.push(i);
    }
    Ok(b)
}

/// Mean over the given candidates of the two-step primal loss.
pub fn primal_loss_graph<'g>(model: &Model, params: &[Var<'g>], xs: &[Var<'g>], ys: &[usize], kind: LossKind) -> Result<Var<'g>> {
    if xs.is_empty() {
        return Err(Error::NoAliveCandidates);
    }
    let g = xs[0].graph();
    let mut total = g.constant(Tensor::scalar(0.0)?);
    for (x, &y) in xs.iter().zip(ys) {
        let logits = model.forward_graph(params, *x)?;
        if !correct(&logits.value(), y) {
            total = total.add(candidate_loss(logits, y, kind)?)?;
        }
    }
    Ok(total.scale(1.0 / xs.len() as f64)?)
}

/// `‖θ + φ(Σ λ_i ∇_θ L_i)‖` over the parameters flagged in `flags`, where
/// `φ` is the identity or the signed square root. `params` must hold the
/// flagged parameters as differentiable leaves.
pub fn stationarity_loss_graph<'g>(
    model: &Model,
    params: &[Var<'g>],
    flags: &[bool],
    xs: &[Var<'g>],
    ys: &[usize],
    lambdas: &[Var<'g>],
    cfg: &ExtractConfig,
) -> Result<Var<'g>> {
    let leaves: Vec<Var<'g>> = params.iter().zip(flags).filter(|(_, &f)| f).map(|(p, _)| *p).collect();
    if leaves.is_empty() {
        return Err(Error::EmptyMask);
    }
    let g = leaves[0].graph();
    let mut sums: Vec<Option<Var<'g>>> = vec![None; leaves.len()];
    for ((x, &y), lambda) in xs.iter().zip(ys).zip(lambdas) {
        let loss = candidate_loss(model.forward_graph(params, *x)?, y, cfg.loss)?;
        let grads = g.grad(loss, &leaves, true)?;
        for (acc, gp) in sums.iter_mut().zip(grads) {
            let term = gp.scale_by(*lambda)?;
            *acc = Some(match *acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
    }
    let mut total: Option<Var<'g>> = None;
    for (leaf, sum) in leaves.iter().zip(sums) {
        let theta = g.constant(leaf.value());
        let r = match sum {
            Some(s) => theta.add(if cfg.signed_sqrt { s.signed_sqrt()? } else { s })?,
            None => theta,
        };
        let d = match cfg.metric {
            Metric::L1 => r.l1_norm()?,
            Metric::L2Sq => r.l2_norm_sq()?,
        };
        total = Some(match total {
            Some(t) => t.add(d)?,
            None => d,
        });
    }
    Ok(total.expect("non-empty mask"))
}

/// `w_p·L_primal + β·L_stat` on `X`, plus `γ` times the same on `f_A(X)`.
#[allow(clippy::too_many_arguments)]
pub fn kkt_loss_graph<'g>(
    model: &Model,
    params: &[Var<'g>],
    flags: &[bool],
    xs: &[Var<'g>],
    ys: &[usize],
    lambdas: &[Var<'g>],
    keys: &[u64],
    cfg: &ExtractConfig,
    aug: Option<&Augmentation>,
) -> Result<Var<'g>> {
    let single = |xs: &[Var<'g>]| -> Result<Var<'g>> {
        let primal = primal_loss_graph(model, params, xs, ys, cfg.loss)?.scale(cfg.primal_weight)?;
        let stat = stationarity_loss_graph(model, params, flags, xs, ys, lambdas, cfg)?.scale(cfg.beta)?;
        Ok(primal.add(stat)?)
    };
    let mut total = single(xs)?;
    if let Some(a) = aug {
        if cfg.gamma != 0.0 {
            let xa = xs
                .iter()
                .zip(keys)
                .map(|(x, &k)| a.apply_var(*x, k))
                .collect::<Result<Vec<_>>>()?;
            total = total.add(single(&xa)?.scale(cfg.gamma)?)?;
        }
    }
    Ok(total)
}

/// Primal loss of the alive candidates.
pub fn primal_loss(model: &Model, candidates: &[DsvCandidate], kind: LossKind) -> Result<f64> {
    let g = Graph::new();
    let params = model.bind(&g, &[]);
    let b = bind(&g, candidates, false)?;
    Ok(primal_loss_graph(model, &params, &b.xs, &b.ys, kind)?.item()?)
}

/// Stationarity loss of the alive candidates.
pub fn stationarity_loss(model: &Model, candidates: &[DsvCandidate], cfg: &ExtractConfig) -> Result<f64> {
    let flags = model.mask_flags(&cfg.mask)?;
    let g = Graph::new();
    let params = model.bind(&g, &flags);
    let b = bind(&g, candidates, false)?;
    Ok(stationarity_loss_graph(model, &params, &flags, &b.xs, &b.ys, &b.lambdas, cfg)?.item()?)
}

/// `L_total` of the alive candidates under one augmentation draw.
pub fn kkt_loss(model: &Model, candidates: &[DsvCandidate], cfg: &ExtractConfig, aug: Option<&Augmentation>) -> Result<f64> {
    let flags = model.mask_flags(&cfg.mask)?;
    let g = Graph::new();
    let params = model.bind(&g, &flags);
    let b = bind(&g, candidates, false)?;
    Ok(kkt_loss_graph(model, &params, &flags, &b.xs, &b.ys, &b.lambdas, &b.keys, cfg, aug)?.item()?)
}

/// Residual vector `θ + φ(Σ λ_i ∇_θ L_i)` over the masked parameters.
pub fn stationarity_residual(model: &Model, candidates: &[DsvCandidate], cfg: &ExtractConfig) -> Result<Vec<f64>> {
    let flags = model.mask_flags(&cfg.mask)?;
    let theta = model.flatten(&cfg.mask)?.to_vec();
    let mut sum = vec![0.0; theta.len()];
    for c in super::alive(candidates) {
        let probe = super::engine::probe(model, &flags, &c.x, None, None, 0, c.y, cfg.loss)?;
        for (s, gv) in sum.iter_mut().zip(&probe.grad) {
            *s += c.lambda * gv;
        }
    }
    Ok(theta
        .iter()
        .zip(&sum)
        .map(|(t, s)| t + if cfg.signed_sqrt { signed_sqrt(*s) } else { *s })
        .collect())
}

pub(crate) fn signed_sqrt(v: f64) -> f64 {
    v.signum() * v.abs().sqrt()
}

/// Loss value and gradients with respect to every candidate's `x` and `λ`.
#[derive(Debug, Clone)]
pub struct KktGradients {
    pub total: f64,
    /// `None` for dead candidates.
    pub grad_x: Vec<Option<Tensor>>,
    pub grad_lambda: Vec<f64>,
}

/// Whole-graph gradients of [`kkt_loss`].
pub fn kkt_gradients(model: &Model, candidates: &[DsvCandidate], cfg: &ExtractConfig, aug: Option<&Augmentation>) -> Result<KktGradients> {
    let flags = model.mask_flags(&cfg.mask)?;
    let g = Graph::new();
    let params = model.bind(&g, &flags);
    let b = bind(&g, candidates, true)?;
    let total = kkt_loss_graph(model, &params, &flags, &b.xs, &b.ys, &b.lambdas, &b.keys, cfg, aug)?;
    let mut leaves = b.xs.clone();
    leaves.extend(b.lambdas.iter().copied());
    let grads = g.grad_values(total, &leaves)?;
    let n = b.xs.len();
    let mut grad_x = vec![None; candidates.len()];
    let mut grad_lambda = vec![0.0; candidates.len()];
    for (k, &i) in b.index.iter().enumerate() {
        grad_x[i] = Some(grads[k].reshape(candidates[i].x.shape())?);
        grad_lambda[i] = grads[n + k].item()?;
    }
    Ok(KktGradients {
        total: total.item()?,
        grad_x,
        grad_lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Arch, ParamMask};

    fn linear(w: &[f64], classes: usize, d: usize) -> Model {
        Model::from_params(
            Arch::Linear {
                input: vec![d],
                classes,
            },
            vec![
                ("fc.weight".into(), Tensor::new(&[classes, d], w.to_vec()).unwrap()),
                ("fc.bias".into(), Tensor::zeros(&[classes])),
            ],
        )
        .unwrap()
    }

    fn cand(x: &[f64], y: usize, lambda: f64) -> DsvCandidate {
        DsvCandidate::new(Tensor::vector(x.to_vec()).unwrap(), y, lambda)
    }

    #[test]
    fn primal_examples() {
        let m = linear(&[1.0, 0.0, -1.0, 0.0], 2, 2);
        let right = vec![cand(&[1.0, 0.0], 0, 0.1), cand(&[-1.0, 0.0], 1, 0.1)];
        assert_eq!(primal_loss(&m, &right, LossKind::CrossEntropy).unwrap(), 0.0);
        // zero input gives uniform logits; argmax ties pick class 0, so label 1 is wrong
        let mixed = vec![cand(&[1.0, 0.0], 0, 0.1), cand(&[0.0, 0.0], 1, 0.1)];
        let v = primal_loss(&m, &mixed, LossKind::CrossEntropy).unwrap();
        assert!((v - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
        let ten = Model::zeros(Arch::Linear {
            input: vec![2],
            classes: 10,
        })
        .unwrap();
        let v = primal_loss(&ten, &[cand(&[0.3, 0.2], 4, 0.1)], LossKind::CrossEntropy).unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-12);
        let mut dead = right.clone();
        dead.iter_mut().for_each(|c| c.alive = false);
        assert!(matches!(primal_loss(&m, &dead, LossKind::CrossEntropy), Err(Error::NoAliveCandidates)));
    }

    #[test]
    fn stationarity_zero_and_theta() {
        let m = linear(&[1.0, 2.0, -1.0, 0.5], 2, 2);
        let cfg = ExtractConfig {
            classes: 2,
            ..ExtractConfig::default()
        };
        let theta_l1 = m.flatten(&cfg.mask).unwrap().l1_norm();
        let zero = vec![cand(&[0.4, -0.2], 0, 0.0), cand(&[0.1, 0.9], 1, 0.0)];
        assert_eq!(stationarity_loss(&m, &zero, &cfg).unwrap(), theta_l1);

        // weights [a, −a], x = 1, y = 0: the weight gradient is
        // (p₀ − 1)·[1, −1], so λ = a / (1 − p₀) gives exact stationarity
        let a = 1.0;
        let m1 = linear(&[a, -a], 2, 1);
        let p0 = 1.0 / (1.0 + (-2.0 * a).exp());
        let weights_only = ExtractConfig {
            mask: ParamMask::Names(vec!["fc.weight".into()]),
            ..cfg
        };
        let v = stationarity_loss(&m1, &[cand(&[1.0], 0, a / (1.0 - p0))], &weights_only).unwrap();
        assert!(v < 1e-12, "{v}");
    }

    #[test]
    fn kkt_examples() {
        let m = linear(&[1.0, 0.0, -1.0, 0.0], 2, 2);
        let cands = vec![cand(&[0.3, 0.0], 0, 0.2), cand(&[-0.8, 0.4], 1, 0.1)];
        let cfg = ExtractConfig {
            classes: 2,
            gamma: 3.0,
            ..ExtractConfig::default()
        };
        let plain = kkt_loss(&m, &cands, &ExtractConfig { gamma: 0.0, ..cfg.clone() }, None).unwrap();
        let with_gamma0 = kkt_loss(
            &m,
            &cands,
            &ExtractConfig { gamma: 0.0, ..cfg.clone() },
            Some(&Augmentation::Jitter { sigma: 0.5, seed: 1 }),
        )
        .unwrap();
        assert_eq!(plain, with_gamma0);
        let ident = kkt_loss(&m, &cands, &cfg, Some(&Augmentation::Identity)).unwrap();
        assert!((ident - 4.0 * plain).abs() < 1e-12);
        let no_stat = ExtractConfig { beta: 0.0, ..cfg };
        assert_eq!(kkt_loss(&m, &cands, &no_stat, Some(&Augmentation::Identity)).unwrap(), 0.0);
    }

    #[test]
    fn hinge_branches() {
        let m = Model::binary_linear(&[2.0], 0.0).unwrap();
        let g = Graph::new();
        let p = m.bind(&g, &[]);
        let far = m.forward_graph(&p, g.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap())).unwrap();
        assert_eq!(candidate_loss(far, 0, LossKind::Hinge).unwrap().item().unwrap(), 0.0);
        let near = m.forward_graph(&p, g.constant(Tensor::new(&[1, 1], vec![0.25]).unwrap())).unwrap();
        assert!((candidate_loss(near, 0, LossKind::Hinge).unwrap().item().unwrap() - 0.5).abs() < 1e-15);
        assert!((candidate_loss(near, 1, LossKind::Hinge).unwrap().item().unwrap() - 1.5).abs() < 1e-15);
    }
}

//! The synthesis loop: joint descent on candidates and multipliers from noise.

use dsv_autograd::{eval, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::engine::evaluate_inner;
use super::{DsvCandidate, ExtractConfig};
use crate::data::AugmentFamily;
use crate::error::{Error, Result};
use crate::nn::Model;

/// State of the candidates after `iteration` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub primal: f64,
    pub stationarity: f64,
    pub total: f64,
    pub mean_entropy: f64,
    pub alive: usize,
    pub min_lambda: f64,
    pub all_correct: bool,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    /// Every candidate, dead ones included with `alive = false`.
    pub candidates: Vec<DsvCandidate>,
    /// Empty when no update ran; otherwise rows `0..=updates`.
    pub trace: Vec<TraceRow>,
    pub updates: usize,
    pub stopped_early: bool,
}

impl Synthesis {
    pub fn survivors(&self) -> Vec<DsvCandidate> {
        super::alive(&self.candidates).cloned().collect()
    }

    /// First row where every alive candidate is classified as its label.
    pub fn first_all_correct(&self) -> Option<&TraceRow> {
        self.trace.iter().find(|r| r.all_correct)
    }
}

/// Aug stream is split from the init stream so both are seed-stable.
const AUG_STREAM: u64 = 0x5eed_a06a_u64;

fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// `N` noise candidates per class, class-major. Images draw pixels from
/// `N(0.5, 0.25²)` clipped to `[0, 1]` (at half resolution when
/// `lowres_iterations > 0`); points draw from `N(0, 1)`.
pub fn init_noise(model: &Model, cfg: &ExtractConfig) -> Result<Vec<DsvCandidate>> {
    let mut shape = model.arch().input_shape();
    let image = shape.len() == 3;
    if image && cfg.lowres_iterations > 0 {
        shape[1] = half(shape[1]);
        shape[2] = half(shape[2]);
    }
    let len: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pixel = Normal::<f64>::new(0.5, 0.25).expect("valid normal");
    let lambda = cfg.initial_lambda();
    let mut out = Vec::with_capacity(cfg.per_class * cfg.classes);
    for y in 0..cfg.classes {
        for _ in 0..cfg.per_class {
            let data: Vec<f64> = if image {
                (0..len).map(|_| pixel.sample(&mut rng).clamp(0.0, 1.0)).collect()
            } else {
                (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
            };
            out.push(DsvCandidate::new(Tensor::new(&shape, data)?, y, lambda));
        }
    }
    Ok(out)
}

/// Runs the synthesis loop from [`init_noise`].
pub fn synthesize(model: &Model, cfg: &ExtractConfig) -> Result<Synthesis> {
    cfg.validate(model)?;
    let candidates = init_noise(model, cfg)?;
    let input = model.arch().input_shape();
    let render = (input.len() == 3 && cfg.lowres_iterations > 0).then(|| [input[1], input[2]]);
    run(model, cfg, candidates, render)
}

/// Runs the synthesis loop from caller-provided candidates at full
/// resolution.
pub fn synthesize_from(model: &Model, cfg: &ExtractConfig, candidates: Vec<DsvCandidate>) -> Result<Synthesis> {
    cfg.validate(model)?;
    let input = model.arch().input_shape();
    for c in &candidates {
        if c.x.shape() != input.as_slice() || c.y >= cfg.classes {
            return Err(Error::ShapeMismatch(format!(
                "candidate {:?} with label {} for model input {input:?}",
                c.x.shape(),
                c.y
            )));
        }
        if c.alive && !(c.lambda >= 0.0) {
            return Err(Error::Config("alive candidates need λ ≥ 0".into()));
        }
    }
    run(model, cfg, candidates, None)
}

fn upsample(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xb = x.reshape(&shape)?;
    let up = eval(|g| g.constant(xb.clone()).bilinear_resize(h, w))?;
    let c = x.shape()[0];
    Ok(up.reshape(&[c, h, w])?.map(|v| v.clamp(0.0, 1.0))?)
}

fn row(iteration: usize, e: &super::Evaluation, candidates: &[DsvCandidate]) -> TraceRow {
    let alive: Vec<&DsvCandidate> = super::alive(candidates).collect();
    TraceRow {
        iteration,
        primal: e.primal,
        stationarity: e.stationarity,
        total: e.total,
        mean_entropy: e.mean_entropy(),
        alive: alive.len(),
        min_lambda: alive.iter().map(|c| c.lambda).fold(f64::INFINITY, f64::min),
        all_correct: e.all_correct(),
    }
}

fn run(model: &Model, cfg: &ExtractConfig, mut candidates: Vec<DsvCandidate>, mut render: Option<[usize; 2]>) -> Result<Synthesis> {
    let image = model.arch().input_shape().len() == 3;
    let family = AugmentFamily::for_features(&model.arch().input_shape());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUG_STREAM);
    let had_class: Vec<bool> = (0..cfg.classes).map(|k| super::alive(&candidates).any(|c| c.y == k)).collect();
    let mut trace = Vec::new();
    let mut totals: Vec<f64> = Vec::new();
    let mut stopped_early = false;
    let mut updates = 0;

    while updates < cfg.iterations {
        if let Some([h, w]) = render {
            if updates == cfg.lowres_iterations {
                for c in &mut candidates {
                    c.x = upsample(&c.x, h, w)?;
                }
                render = None;
            }
        }
        let aug = family.sample(&mut rng);
        let e = evaluate_inner(model, &candidates, cfg, Some(&aug), render, true)?;
        trace.push(row(updates, &e, &candidates));
        totals.push(e.total);

        let w = cfg.early_stop_window;
        if w > 0 && totals.len() >= 2 * w {
            // windowed means smooth out the per-iteration augmentation draw
            let k = totals.len();
            let recent: f64 = totals[k - w..].iter().sum::<f64>() / w as f64;
            let before: f64 = totals[k - 2 * w..k - w].iter().sum::<f64>() / w as f64;
            if before - recent < cfg.early_stop_tol {
                stopped_early = true;
                trace.pop();
                break;
            }
        }

        for (i, c) in candidates.iter_mut().enumerate() {
            if !c.alive {
                continue;
            }
            let gx = e.grad_x[i].as_ref().expect("alive candidate has a gradient");
            let step = cfg.step_x;
            c.x = c.x.zip_map(gx, |x, g| {
                let v = x - step * g;
                if image {
                    v.clamp(0.0, 1.0)
                } else {
                    v
                }
            })?;
            c.lambda -= cfg.step_lambda * e.grad_lambda[i];
            if c.lambda < 0.0 {
                c.alive = false;
            }
        }
        assert!(
            super::alive(&candidates).all(|c| c.lambda >= 0.0),
            "dual feasibility violated after pruning"
        );
        updates += 1;
        for (k, &had) in had_class.iter().enumerate() {
            if had && !super::alive(&candidates).any(|c| c.y == k) {
                return Err(Error::ClassExtinct(k));
            }
        }
    }

    if updates > 0 {
        if let Some([h, w]) = render {
            // stopped early inside the low-resolution phase
            for c in &mut candidates {
                c.x = upsample(&c.x, h, w)?;
            }
        }
        let aug = family.sample(&mut rng);
        let e = evaluate_inner(model, &candidates, cfg, Some(&aug), None, false)?;
        trace.push(row(updates, &e, &candidates));
    }
    Ok(Synthesis {
        candidates,
        trace,
        updates,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deepkkt::{evaluate, stationarity_loss};
    use crate::nn::Arch;

    fn point_model() -> Model {
        Model::from_params(
            Arch::Linear {
                input: vec![2],
                classes: 2,
            },
            vec![
                ("fc.weight".into(), Tensor::new(&[2, 2], vec![1.5, -0.5, -1.5, 0.5]).unwrap()),
                ("fc.bias".into(), Tensor::new(&[2], vec![0.1, -0.1]).unwrap()),
            ],
        )
        .unwrap()
    }

    fn image_model() -> Model {
        Model::new(
            Arch::Mlp {
                input: vec![1, 6, 6],
                hidden: vec![4],
                classes: 2,
            },
            2,
        )
        .unwrap()
    }

    fn cfg(m: &Model) -> ExtractConfig {
        ExtractConfig {
            per_class: 3,
            iterations: 12,
            step_x: 0.05,
            step_lambda: 1e-3,
            ..ExtractConfig::for_model(m)
        }
    }

    #[test]
    fn zero_iterations_return_the_noise() {
        let m = image_model();
        let c = ExtractConfig { iterations: 0, ..cfg(&m) };
        let s = synthesize(&m, &c).unwrap();
        assert!(s.trace.is_empty());
        assert_eq!(s.candidates, init_noise(&m, &c).unwrap());
        assert!(s.candidates.iter().all(|d| d.x.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn deterministic_and_feasible() {
        let m = image_model();
        let a = synthesize(&m, &cfg(&m)).unwrap();
        let b = synthesize(&m, &cfg(&m)).unwrap();
        assert_eq!(a.candidates, b.candidates);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), a.updates + 1);
        for d in crate::deepkkt::alive(&a.candidates) {
            assert!(d.lambda >= 0.0);
            assert!(d.x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn lowres_phase_ends_at_full_resolution() {
        let m = image_model();
        let c = ExtractConfig { lowres_iterations: 5, ..cfg(&m) };
        assert_eq!(init_noise(&m, &c).unwrap()[0].x.shape(), &[1, 3, 3]);
        let s = synthesize(&m, &c).unwrap();
        assert!(s.candidates.iter().all(|d| d.x.shape() == [1, 6, 6]));
        let bad = ExtractConfig { lowres_iterations: 12, ..cfg(&m) };
        assert!(synthesize(&m, &bad).is_err());
    }

    #[test]
    fn primal_dead_zone_leaves_inputs() {
        let m = point_model();
        let c = ExtractConfig { beta: 0.0, ..cfg(&m) };
        let start: Vec<DsvCandidate> = [([2.0, 0.0], 0), ([1.0, -1.0], 0), ([-2.0, 1.0], 1), ([-1.0, 0.0], 1)]
            .iter()
            .map(|(x, y)| DsvCandidate::new(Tensor::vector(x.to_vec()).unwrap(), *y, 0.1))
            .collect();
        let s = synthesize_from(&m, &c, start.clone()).unwrap();
        assert_eq!(s.updates, 12);
        for (a, b) in s.candidates.iter().zip(&start) {
            assert!(a.x.bit_eq(&b.x));
            assert_eq!(a.lambda, b.lambda);
        }
    }

    #[test]
    fn negative_multiplier_removes_candidate() {
        let m = point_model();
        let start: Vec<DsvCandidate> = [([0.3, 0.1], 0), ([1.0, 0.5], 0), ([0.8, -0.2], 0), ([-0.4, 0.2], 1), ([-1.0, 0.0], 1), ([-0.6, 0.9], 1)]
            .iter()
            .map(|(x, y)| DsvCandidate::new(Tensor::vector(x.to_vec()).unwrap(), *y, 0.05))
            .collect();
        let base = ExtractConfig {
            gamma: 0.0,
            iterations: 1,
            ..cfg(&m)
        };
        let e = evaluate(&m, &start, &base, None, None).unwrap();
        let (k, ratio) = e
            .grad_lambda
            .iter()
            .enumerate()
            .map(|(i, g)| (i, g / (start[i].lambda + 0.01)))
            .fold((0, f64::NEG_INFINITY), |b, p| if p.1 > b.1 { p } else { b });
        assert!(ratio > 0.0);
        let c = ExtractConfig {
            step_lambda: 1.0 / ratio,
            ..base
        };
        let s = synthesize_from(&m, &c, start).unwrap();
        assert!(!s.candidates[k].alive);
        assert!((s.candidates[k].lambda + 0.01).abs() < 1e-12);
        let survivors = s.survivors();
        assert_eq!(s.trace[1].alive, survivors.len());
        let expected = stationarity_loss(&m, &survivors, &c).unwrap();
        assert!((s.trace[1].stationarity - expected).abs() < 1e-12);
    }

    #[test]
    fn extinct_class_is_reported() {
        let m = point_model();
        let start = vec![
            DsvCandidate::new(Tensor::vector(vec![0.5, 0.0]).unwrap(), 0, 0.0),
            DsvCandidate::new(Tensor::vector(vec![-0.5, 0.0]).unwrap(), 1, 0.0),
        ];
        // with λ = 0 the residual is θ, so any λ step with the residual's
        // sign pushes some multiplier below zero
        let c = ExtractConfig {
            gamma: 0.0,
            step_lambda: 1.0,
            ..cfg(&m)
        };
        match synthesize_from(&m, &c, start) {
            Err(Error::ClassExtinct(k)) => assert!(k < 2),
            other => panic!("expected extinction, got {:?}", other.map(|s| s.survivors().len())),
        }
    }
}

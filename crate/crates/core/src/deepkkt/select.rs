//! Selection: fit multipliers to frozen training samples and rank them.

use rayon::prelude::*;

use super::engine::probe;
use super::{ExtractConfig, Metric};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionTraceRow {
    pub iteration: usize,
    pub stat_loss: f64,
    /// `Σ λ_i H_i / Σ λ_i` over the samples' prediction entropies; NaN once
    /// every multiplier is zero.
    pub weighted_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct Selection {
    /// Dataset indices per class, by final λ descending, ties by index.
    pub ranking: Vec<Vec<usize>>,
    /// Final λ per dataset sample.
    pub lambdas: Vec<f64>,
    pub trace: Vec<SelectionTraceRow>,
}

impl Selection {
    /// The `k` highest-λ sample indices of each class.
    pub fn top(&self, k: usize) -> Vec<Vec<usize>> {
        self.ranking.iter().map(|r| r.iter().copied().take(k).collect()).collect()
    }

    /// `Σ λ` per class.
    pub fn class_lambda_sums(&self, labels: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.ranking.len()];
        for (&l, &y) in self.lambdas.iter().zip(labels) {
            out[y] += l;
        }
        out
    }
}

/// Projected gradient descent on `β·L_stat` over `λ ≥ 0` with the samples
/// frozen, starting from the configured initial multiplier.
pub fn select(model: &Model, dataset: &Dataset, cfg: &ExtractConfig) -> Result<Selection> {
    if dataset.is_empty() {
        return Err(Error::Dataset("selection needs a non-empty dataset".into()));
    }
    if dataset.classes() != model.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            dataset.classes(),
            model.classes()
        )));
    }
    let flags = model.mask_flags(&cfg.mask)?;
    let theta = model.flatten(&cfg.mask)?.to_vec();
    let probes = (0..dataset.len())
        .into_par_iter()
        .map(|i| probe(model, &flags, &dataset.sample(i)?, None, None, i as u64, dataset.labels()[i], cfg.loss))
        .collect::<Result<Vec<_>>>()?;
    let entropy: Vec<f64> = probes.iter().map(|p| nn::entropy(&p.logits)).collect();

    let mut lambdas = vec![cfg.initial_lambda(); dataset.len()];
    let mut trace = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    for iteration in 0..=cfg.iterations {
        let mut s = vec![0.0; theta.len()];
        for (p, &l) in probes.iter().zip(&lambdas) {
            if l != 0.0 {
                for (sj, gj) in s.iter_mut().zip(&p.grad) {
                    *sj += l * gj;
                }
            }
        }
        let r: Vec<f64> = theta
            .iter()
            .zip(&s)
            .map(|(t, sj)| t + if cfg.signed_sqrt { super::loss::signed_sqrt(*sj) } else { *sj })
            .collect();
        let stat: f64 = match cfg.metric {
            Metric::L1 => r.iter().map(|v| v.abs()).sum(),
            Metric::L2Sq => r.iter().map(|v| v * v).sum(),
        };
        if !stat.is_finite() {
            return Err(Error::NonFinite("stationarity loss"));
        }
        let mass: f64 = lambdas.iter().sum();
        let weighted = lambdas.iter().zip(&entropy).map(|(l, h)| l * h).sum::<f64>() / mass;
        trace.push(SelectionTraceRow {
            iteration,
            stat_loss: stat,
            weighted_entropy: weighted,
        });
        history.push(stat);
        let w = cfg.early_stop_window;
        if iteration == cfg.iterations || (w > 0 && history.len() > w && history[history.len() - 1 - w] - stat < cfg.early_stop_tol) {
            break;
        }
        let u: Vec<f64> = r
            .iter()
            .zip(&s)
            .map(|(&rj, &sj)| {
                let d = match cfg.metric {
                    Metric::L1 => rj.signum() * f64::from(rj != 0.0),
                    Metric::L2Sq => 2.0 * rj,
                };
                let slope = if !cfg.signed_sqrt {
                    1.0
                } else if sj == 0.0 {
                    0.0
                } else {
                    0.5 / sj.abs().sqrt()
                };
                cfg.beta * d * slope
            })
            .collect();
        let grads: Vec<f64> = probes.par_iter().map(|p| p.grad.iter().zip(&u).map(|(a, b)| a * b).sum()).collect();
        for (l, g) in lambdas.iter_mut().zip(grads) {
            *l = (*l - cfg.step_lambda * g).max(0.0);
        }
    }

    let mut ranking: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        ranking[y].push(i);
    }
    for r in &mut ranking {
        // stable sort keeps index order among ties
        r.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    }
    Ok(Selection { ranking, lambdas, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs2d;
    use crate::nn::Arch;
    use dsv_autograd::Tensor;
    use crate::optim::{train_classifier, Optimizer, TrainConfig};

    fn trained() -> (Model, Dataset) {
        let data = gen_blobs2d(2, 12, 4.0, 3).unwrap();
        let m = Model::new(
            Arch::Linear {
                input: vec![2],
                classes: 2,
            },
            1,
        )
        .unwrap();
        let mut opt = Optimizer::sgd(0.2).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 0,
            ..TrainConfig::default()
        };
        (train_classifier(&m, &data, &mut opt, &cfg).unwrap().0, data)
    }

    #[test]
    fn frozen_multipliers_keep_index_order() {
        let (m, data) = trained();
        let cfg = ExtractConfig {
            lambda_init: Some(0.0),
            step_lambda: 0.0,
            iterations: 5,
            ..ExtractConfig::for_model(&m)
        };
        let s = select(&m, &data, &cfg).unwrap();
        for (k, r) in s.ranking.iter().enumerate() {
            let expected: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] == k).collect();
            assert_eq!(r, &expected);
        }
    }

    #[test]
    fn one_sample_per_class_ranks_first() {
        let (m, data) = trained();
        let small = data.subset(&[0, 12]).unwrap();
        let s = select(&m, &small, &ExtractConfig { iterations: 20, ..ExtractConfig::for_model(&m) }).unwrap();
        assert_eq!(s.ranking, vec![vec![0], vec![1]]);
    }

    #[test]
    fn duplicate_splits_multiplier_mass() {
        // three well-spread samples span the three-dimensional gradient space
        // of a two-class planar linear model, so the fitted multipliers are
        // unique
        let m = Model::from_params(
            Arch::Linear {
                input: vec![2],
                classes: 2,
            },
            vec![
                ("fc.weight".into(), Tensor::new(&[2, 2], vec![1.0, 0.5, -1.0, -0.5]).unwrap()),
                ("fc.bias".into(), Tensor::new(&[2], vec![0.2, -0.2]).unwrap()),
            ],
        )
        .unwrap();
        let rows = [[1.0, 0.0], [0.2, 1.5], [-1.0, -1.0]];
        let samples: Vec<Tensor> = rows.iter().map(|r| Tensor::vector(r.to_vec()).unwrap()).collect();
        let base_set = Dataset::from_samples(&samples, vec![0, 0, 1], 2).unwrap();
        let mut dup_samples = samples.clone();
        dup_samples.push(samples[0].clone());
        let dup_set = Dataset::from_samples(&dup_samples, vec![0, 0, 1, 0], 2).unwrap();
        let cfg = ExtractConfig {
            metric: Metric::L2Sq,
            beta: 1.0,
            step_lambda: 0.1,
            iterations: 20_000,
            early_stop_window: 0,
            ..ExtractConfig::for_model(&m)
        };
        let base = select(&m, &base_set, &cfg).unwrap();
        let dup = select(&m, &dup_set, &cfg).unwrap();
        assert!(base.lambdas.iter().all(|&l| l > 0.0), "{:?}", base.lambdas);
        for k in 0..3 {
            let single = base.lambdas[k];
            let pair = if k == 0 { dup.lambdas[0] + dup.lambdas[3] } else { dup.lambdas[k] };
            assert!((pair - single).abs() <= 0.05 * single.max(1e-12), "{k}: {pair} vs {single} {:?}", base.lambdas);
        }
    }
}

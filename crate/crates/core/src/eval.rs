//! Desk-scale experiments: distillation retraining, λ/accuracy correlation,
//! mixing, the primal/stationarity ablation and last-layer extraction.

use dsv_autograd::Tensor;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{AugmentFamily, Dataset};
use crate::deepkkt::{
    check_kkt, init_noise, render_grid, synthesize, synthesize_from, DsvCandidate, DsvSet, ExtractConfig, KktReport, Selection,
    Synthesis,
};
use crate::error::{Error, Result};
use crate::nn::{self, Arch, Model, ParamMask};
use crate::optim::{BatchLoss, Optimizer};

/// Per-seed values of one metric with their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    /// `key = value` echo of the producing configuration.
    pub config: String,
}

impl ExperimentResult {
    pub fn new(name: impl Into<String>, seeds: Vec<u64>, values: Vec<f64>, config: impl Into<String>) -> Result<Self> {
        if seeds.len() != values.len() || seeds.is_empty() {
            return Err(Error::Config(format!("{} seeds for {} values", seeds.len(), values.len())));
        }
        Ok(ExperimentResult {
            name: name.into(),
            seeds,
            values,
            config: config.into(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Sample standard deviation; `0` for a single seed.
    pub fn std(&self) -> f64 {
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    /// `name  mean ± std` with one decimal, as in a results table.
    pub fn summary(&self) -> String {
        format!("{}  {:.1} ± {:.1}", self.name, self.mean(), self.std())
    }

    /// One row per seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,value\n");
        for (s, v) in self.seeds.iter().zip(&self.values) {
            out.push_str(&format!("{s},{v}\n"));
        }
        out
    }

    /// Leading `#` lines are skipped.
    pub fn from_csv(name: impl Into<String>, text: &str, config: impl Into<String>) -> Result<Self> {
        let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
        if lines.next().map(str::trim) != Some("seed,value") {
            return Err(Error::Malformed("result CSV header".into()));
        }
        let (mut seeds, mut values) = (Vec::new(), Vec::new());
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let bad = || Error::Malformed(format!("result row {line:?}"));
            let (s, v) = line.split_once(',').ok_or_else(bad)?;
            seeds.push(s.trim().parse().map_err(|_| bad())?);
            values.push(v.trim().parse().map_err(|_| bad())?);
        }
        Self::new(name, seeds, values, config)
    }
}

/// Training schedule for distillation retraining.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrainConfig {
    pub arch: Arch,
    pub steps: usize,
    pub lr: f64,
    pub rho: f64,
}

impl RetrainConfig {
    /// SAM with learning rate 0.1 and radius 1e-4 for 300 full-batch steps.
    pub fn new(arch: Arch) -> Self {
        RetrainConfig {
            arch,
            steps: 300,
            lr: 0.1,
            rho: 1e-4,
        }
    }
}

/// Trains a fresh model on `train` and returns its test accuracy in percent.
pub fn retrain_accuracy(train: &Dataset, test: &Dataset, cfg: &RetrainConfig, seed: u64) -> Result<f64> {
    let mut model = Model::new(cfg.arch.clone(), seed)?;
    let mut opt = Optimizer::sam(cfg.lr, cfg.rho)?;
    let x = train.features().clone();
    let objective = BatchLoss {
        x: &x,
        labels: train.labels(),
        aug: None,
    };
    for _ in 0..cfg.steps {
        model = opt.step(&model, &objective)?.0;
    }
    Ok(100.0 * nn::accuracy(&model, test)?)
}

/// Retrains once per seed on the same training set and reports test
/// accuracy (percent).
pub fn distill_eval(name: &str, train: &Dataset, test: &Dataset, cfg: &RetrainConfig, seeds: &[u64]) -> Result<ExperimentResult> {
    let values = seeds
        .par_iter()
        .map(|&s| retrain_accuracy(train, test, cfg, s))
        .collect::<Result<Vec<f64>>>()?;
    ExperimentResult::new(
        name,
        seeds.to_vec(),
        values,
        format!("arch = {}\nsteps = {}\nlr = {}\nrho = {}\n", cfg.arch, cfg.steps, cfg.lr, cfg.rho),
    )
}

/// The highest-λ candidate of every class as a dataset.
pub fn dsv_one_per_class(set: &DsvSet, classes: usize) -> Result<Dataset> {
    let top = set.top_per_class(classes)?;
    let xs: Vec<Tensor> = top.iter().map(|c| c.x.clone()).collect();
    Dataset::from_samples(&xs, (0..classes).collect(), classes)
}

/// The top-ranked sample of every class from a selection run.
pub fn selection_one_per_class(selection: &Selection, data: &Dataset) -> Result<Dataset> {
    let mut idx = Vec::with_capacity(data.classes());
    for (k, r) in selection.ranking.iter().enumerate() {
        idx.push(*r.first().ok_or(Error::MissingClass(k))?);
    }
    data.subset(&idx)
}

/// One uniformly drawn sample of every class.
pub fn random_one_per_class(data: &Dataset, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = Vec::with_capacity(data.classes());
    for k in 0..data.classes() {
        let members = data.class_indices(k);
        idx.push(*members.choose(&mut rng).ok_or(Error::MissingClass(k))?);
    }
    data.subset(&idx)
}

/// Pearson correlation between per-class λ sums and per-class accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    /// `None` when either series has zero variance.
    pub rho: Option<f64>,
    pub lambda_sums: Vec<f64>,
    pub accuracies: Vec<f64>,
}

impl Correlation {
    /// `class,lambda_sum,accuracy` rows followed by the coefficient.
    pub fn table(&self) -> String {
        let mut out = String::from("class,lambda_sum,accuracy\n");
        for (k, (l, a)) in self.lambda_sums.iter().zip(&self.accuracies).enumerate() {
            out.push_str(&format!("{k},{l},{a}\n"));
        }
        out.push_str(&match self.rho {
            Some(r) => format!("# pearson = {r}\n"),
            None => "# pearson = undefined\n".into(),
        });
        out
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va.sqrt() * vb.sqrt()))
}

pub fn correlation(lambda_sums: Vec<f64>, accuracies: Vec<f64>) -> Result<Correlation> {
    if lambda_sums.len() != accuracies.len() {
        return Err(Error::Config("λ sums and accuracies differ in length".into()));
    }
    if lambda_sums.len() < 3 {
        return Err(Error::Undefined(format!(
            "correlation over {} classes; at least 3 are needed",
            lambda_sums.len()
        )));
    }
    Ok(Correlation {
        rho: pearson(&lambda_sums, &accuracies),
        lambda_sums,
        accuracies,
    })
}

/// Per-class test accuracy of `model`.
pub fn class_accuracies(model: &Model, test: &Dataset) -> Result<Vec<f64>> {
    let pred = model.predict(test.features())?;
    let mut hit = vec![0usize; test.classes()];
    let mut count = vec![0usize; test.classes()];
    for (p, &y) in pred.iter().zip(test.labels()) {
        count[y] += 1;
        hit[y] += usize::from(*p == y);
    }
    Ok(hit.iter().zip(&count).map(|(&h, &c)| if c == 0 { f64::NAN } else { h as f64 / c as f64 }).collect())
}

/// Selects on `train`, sums λ per class and correlates the sums with the
/// model's per-class accuracy on `test`.
pub fn lambda_accuracy_correlation(model: &Model, train: &Dataset, test: &Dataset, cfg: &ExtractConfig) -> Result<Correlation> {
    if model.classes() < 3 {
        return Err(Error::Undefined(format!("correlation over {} classes", model.classes())));
    }
    let selection = crate::deepkkt::select(model, train, cfg)?;
    correlation(selection.class_lambda_sums(train.labels()), class_accuracies(model, test)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixReport {
    pub epsilon: f64,
    /// Mixed samples evaluated per arm.
    pub pairs: usize,
    pub dsv_flip_rate: f64,
    pub control_flip_rate: f64,
}

/// `clip(x + ε·(‖x‖₂/‖d‖₂)·d)`.
pub fn mix(x: &Tensor, d: &Tensor, epsilon: f64) -> Result<Tensor> {
    let nd = d.l2_norm();
    let scale = if nd > 0.0 { epsilon * x.l2_norm() / nd } else { 0.0 };
    let image = x.ndim() == 3;
    Ok(x.zip_map(d, |a, b| {
        let v = a + scale * b;
        if image {
            v.clamp(0.0, 1.0)
        } else {
            v
        }
    })?)
}

/// For every sample `x` of `data` and every DSV `d` with a different label,
/// checks whether the model predicts `d`'s label on the mixture; the control
/// arm mixes in a random training image of that label instead.
pub fn mixing_experiment(model: &Model, dsvs: &[DsvCandidate], data: &Dataset, controls: &Dataset, epsilon: f64, seed: u64) -> Result<MixReport> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        // ε = 0 is allowed for the identity check below
        if epsilon != 0.0 {
            return Err(Error::Config(format!("mixing ε = {epsilon} outside (0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pairs, mut dsv_hits, mut control_hits) = (0usize, 0usize, 0usize);
    for i in 0..data.len() {
        let x = data.sample(i)?;
        let y = data.labels()[i];
        for d in dsvs.iter().filter(|d| d.y != y) {
            let members = controls.class_indices(d.y);
            let pick = *members.choose(&mut rng).ok_or(Error::MissingClass(d.y))?;
            let control = controls.sample(pick)?;
            let dsv_pred = nn::argmax(model.forward(&mix(&x, &d.x, epsilon)?)?.data());
            let control_pred = nn::argmax(model.forward(&mix(&x, &control, epsilon)?)?.data());
            pairs += 1;
            dsv_hits += usize::from(dsv_pred == d.y);
            control_hits += usize::from(control_pred == d.y);
        }
    }
    let rate = |h: usize| if pairs == 0 { f64::NAN } else { h as f64 / pairs as f64 };
    Ok(MixReport {
        epsilon,
        pairs,
        dsv_flip_rate: rate(dsv_hits),
        control_flip_rate: rate(control_hits),
    })
}

/// Noise candidates labelled with the model's prediction. With augmented
/// copies in the loss (`gamma > 0`) a candidate is kept only when that
/// prediction survives every representative augmentation.
pub fn self_labeled_noise(model: &Model, cfg: &ExtractConfig) -> Result<Vec<DsvCandidate>> {
    let input = model.arch().input_shape();
    let reps = AugmentFamily::for_features(&input).representatives();
    let want = cfg.per_class * cfg.classes;
    let mut out = Vec::with_capacity(want);
    let mut round = 0u64;
    while out.len() < want && round < 50 {
        let draw = ExtractConfig {
            seed: cfg.seed.wrapping_add(round.wrapping_mul(0x9e37_79b9)),
            lowres_iterations: 0,
            ..cfg.clone()
        };
        for c in init_noise(model, &draw)? {
            let key = out.len() as u64;
            let label = nn::argmax(model.forward(&c.x)?.data());
            let mut stable = true;
            for a in reps.iter().filter(|_| cfg.gamma > 0.0) {
                if nn::argmax(model.forward(&a.apply(&c.x, input.len(), key)?)?.data()) != label {
                    stable = false;
                    break;
                }
            }
            if stable && out.len() < want {
                out.push(DsvCandidate { y: label, ..c });
            }
        }
        round += 1;
    }
    if out.is_empty() {
        return Err(Error::Dataset("no augmentation-stable noise found".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Ablation {
    /// Weight of the augmented copy in the primal-only run; zero when no
    /// augmentation-stable noise exists for the configured weight.
    pub primal_gamma: f64,
    /// Self-labelled noise the primal-only run starts from.
    pub primal_start: Vec<DsvCandidate>,
    pub primal_only: Synthesis,
    pub stat_only: Synthesis,
    /// Stationarity loss of the stationarity-only run at its noise start.
    pub stat_initial: f64,
    pub stat_final: f64,
    pub primal_report: KktReport,
    pub stat_report: KktReport,
    pub primal_grid: Vec<u8>,
    pub stat_grid: Vec<u8>,
}

impl Ablation {
    /// Largest absolute pixel change of the primal-only run.
    pub fn primal_max_change(&self) -> f64 {
        self.primal_start
            .iter()
            .zip(&self.primal_only.candidates)
            .flat_map(|(a, b)| a.x.data().iter().zip(b.x.data()).map(|(u, v)| (u - v).abs()))
            .fold(0.0, f64::max)
    }
}

/// Primal-only (β = 0, from self-labelled noise) and stationarity-only
/// (primal weight 0, from noise) synthesis runs.
pub fn ablation_primal_vs_stat(model: &Model, cfg: &ExtractConfig) -> Result<Ablation> {
    let mut primal_cfg = ExtractConfig {
        beta: 0.0,
        lowres_iterations: 0,
        ..cfg.clone()
    };
    let primal_start = match self_labeled_noise(model, &primal_cfg) {
        Err(Error::Dataset(_)) if primal_cfg.gamma > 0.0 => {
            primal_cfg.gamma = 0.0;
            self_labeled_noise(model, &primal_cfg)?
        }
        other => other?,
    };
    let primal_only = synthesize_from(model, &primal_cfg, primal_start.clone())?;
    let stat_cfg = ExtractConfig {
        primal_weight: 0.0,
        ..cfg.clone()
    };
    let stat_only = synthesize(model, &stat_cfg)?;
    let stat_initial = stat_only.trace.first().map_or(f64::NAN, |r| r.stationarity);
    let stat_final = stat_only.trace.last().map_or(f64::NAN, |r| r.stationarity);
    Ok(Ablation {
        primal_report: check_kkt(model, &primal_only.candidates, &primal_cfg)?,
        stat_report: check_kkt(model, &stat_only.candidates, &stat_cfg)?,
        primal_grid: render_grid(&primal_only.candidates, cfg.classes)?,
        stat_grid: render_grid(&stat_only.candidates, cfg.classes)?,
        primal_gamma: primal_cfg.gamma,
        primal_start,
        primal_only,
        stat_only,
        stat_initial,
        stat_final,
    })
}

/// Synthesis with stationarity restricted to the final layer.
pub fn partial_layer_extraction(model: &Model, cfg: &ExtractConfig) -> Result<(Synthesis, KktReport)> {
    let masked = ExtractConfig {
        mask: ParamMask::LastLayer,
        ..cfg.clone()
    };
    let s = synthesize(model, &masked)?;
    let report = check_kkt(model, &s.candidates, &masked)?;
    Ok((s, report))
}

/// Random subset of `n` sample indices, sorted.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n.min(len));
    idx.sort_unstable();
    idx
}

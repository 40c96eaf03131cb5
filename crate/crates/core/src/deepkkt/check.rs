//! The DeepKKT condition checker.

use std::fmt;
use std::str::FromStr;

use super::loss::stationarity_residual;
use super::{alive, DsvCandidate, ExtractConfig};
use crate::data::AugmentFamily;
use crate::error::{Error, Result};
use crate::nn::{self, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    pub alive: usize,
    /// Alive candidates whose argmax differs from their label.
    pub primal_violations: usize,
    /// Alive candidates with `Φ_y − max_{c≠y} Φ_c < ε`.
    pub within_margin: usize,
    pub mean_gap: f64,
    /// `+inf` with no alive candidates.
    pub min_lambda: f64,
    pub stationarity_l1: f64,
    /// `stationarity_l1 / ‖θ‖₁` over the masked parameters.
    pub stationarity_relative: f64,
    pub stationarity_l2sq: f64,
    pub mean_entropy: f64,
    pub alive_per_class: Vec<usize>,
    /// Fraction of alive candidates whose argmax survives every
    /// representative augmentation.
    pub augmentation_consistency: f64,
}

/// Fraction of alive candidates whose prediction is unchanged under every
/// representative of the model's augmentation family.
pub fn augmentation_consistency(model: &Model, candidates: &[DsvCandidate]) -> Result<f64> {
    let input = model.arch().input_shape();
    let reps = AugmentFamily::for_features(&input).representatives();
    let mut total = 0usize;
    let mut stable = 0usize;
    for (i, c) in candidates.iter().enumerate().filter(|(_, c)| c.alive) {
        total += 1;
        let base = nn::argmax(model.forward(&c.x)?.data());
        let mut ok = true;
        for a in &reps {
            let xa = a.apply(&c.x, input.len(), i as u64)?;
            if nn::argmax(model.forward(&xa)?.data()) != base {
                ok = false;
                break;
            }
        }
        stable += usize::from(ok);
    }
    Ok(if total == 0 { f64::NAN } else { stable as f64 / total as f64 })
}

pub fn check_kkt(model: &Model, candidates: &[DsvCandidate], cfg: &ExtractConfig) -> Result<KktReport> {
    let classes = model.classes();
    let mut alive_per_class = vec![0; classes];
    let mut violations = 0;
    let mut within = 0;
    let mut gaps = 0.0;
    let mut entropies = 0.0;
    let mut min_lambda = f64::INFINITY;
    let mut n = 0usize;
    for c in alive(candidates) {
        if c.y >= classes {
            return Err(Error::Config(format!("label {} outside 0..{classes}", c.y)));
        }
        let logits = model.forward(&c.x)?;
        let v = logits.data();
        let rival = (0..classes).filter(|&k| k != c.y).map(|k| v[k]).fold(f64::NEG_INFINITY, f64::max);
        let gap = v[c.y] - rival;
        violations += usize::from(nn::argmax(v) != c.y);
        within += usize::from(gap < cfg.margin);
        gaps += gap;
        entropies += nn::entropy(v);
        min_lambda = min_lambda.min(c.lambda);
        alive_per_class[c.y] += 1;
        n += 1;
    }
    let r = stationarity_residual(model, candidates, cfg)?;
    let l1: f64 = r.iter().map(|v| v.abs()).sum();
    let theta_l1 = model.flatten(&cfg.mask)?.l1_norm();
    Ok(KktReport {
        alive: n,
        primal_violations: violations,
        within_margin: within,
        mean_gap: gaps / n as f64,
        min_lambda,
        stationarity_l1: l1,
        stationarity_relative: l1 / theta_l1,
        stationarity_l2sq: r.iter().map(|v| v * v).sum(),
        mean_entropy: entropies / n as f64,
        alive_per_class,
        augmentation_consistency: augmentation_consistency(model, candidates)?,
    })
}

impl fmt::Display for KktReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let per: Vec<String> = self.alive_per_class.iter().map(|v| v.to_string()).collect();
        writeln!(f, "alive = {}", self.alive)?;
        writeln!(f, "alive_per_class = {}", per.join(","))?;
        writeln!(f, "primal_violations = {}", self.primal_violations)?;
        writeln!(f, "within_margin = {}", self.within_margin)?;
        writeln!(f, "mean_gap = {}", self.mean_gap)?;
        writeln!(f, "min_lambda = {}", self.min_lambda)?;
        writeln!(f, "stationarity_l1 = {}", self.stationarity_l1)?;
        writeln!(f, "stationarity_relative = {}", self.stationarity_relative)?;
        writeln!(f, "stationarity_l2sq = {}", self.stationarity_l2sq)?;
        writeln!(f, "mean_entropy = {}", self.mean_entropy)?;
        writeln!(f, "augmentation_consistency = {}", self.augmentation_consistency)
    }
}

impl FromStr for KktReport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Malformed(format!("report line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Malformed(format!("report is missing {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Malformed(format!("report field {k}"))) };
        let count = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Malformed(format!("report field {k}"))) };
        let per = get("alive_per_class")?;
        let alive_per_class = if per.is_empty() {
            Vec::new()
        } else {
            per.split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::Malformed("report field alive_per_class".into())))
                .collect::<Result<_>>()?
        };
        Ok(KktReport {
            alive: count("alive")?,
            primal_violations: count("primal_violations")?,
            within_margin: count("within_margin")?,
            mean_gap: num("mean_gap")?,
            min_lambda: num("min_lambda")?,
            stationarity_l1: num("stationarity_l1")?,
            stationarity_relative: num("stationarity_relative")?,
            stationarity_l2sq: num("stationarity_l2sq")?,
            mean_entropy: num("mean_entropy")?,
            alive_per_class,
            augmentation_consistency: num("augmentation_consistency")?,
        })
    }
}

//! DeepKKT losses, the synthesis loop, λ-fitting selection and the
//! condition checker.
//!
//! A candidate `(x, y, λ)` is scored against a frozen model by
//!
//! * the primal term: zero when `argmax Φ(x) = y`, the classification loss
//!   otherwise, averaged over alive candidates;
//! * the stationarity term: a norm of `θ + Σ λ_i ∇_θ L(Φ(x_i), y_i)` over the
//!   masked parameter vector.
//!
//! Synthesis descends `L_kkt(X) + γ·L_kkt(f_A(X))` in `x` and `λ` jointly and
//! drops every candidate whose multiplier turns negative.

mod check;
mod engine;
mod export;
mod loss;
mod select;
mod synth;

use std::fmt;
use std::str::FromStr;

use dsv_autograd::Tensor;

pub use check::{augmentation_consistency, check_kkt, KktReport};
pub use engine::{evaluate, Evaluation};
pub use export::{parse_trace_csv, read_ppm, render_grid, trace_to_csv, DsvSet, DSV_MAGIC};
pub use loss::{
    candidate_loss, kkt_gradients, kkt_loss, kkt_loss_graph, primal_loss, primal_loss_graph, stationarity_loss,
    stationarity_loss_graph, stationarity_residual, KktGradients,
};
pub use select::{select, Selection, SelectionTraceRow};
pub use synth::{init_noise, synthesize, synthesize_from, Synthesis, TraceRow};

use crate::error::{Error, Result};
use crate::nn::{Model, ParamMask};

/// A primal variable with its label and Lagrange multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct DsvCandidate {
    pub x: Tensor,
    pub y: usize,
    pub lambda: f64,
    pub alive: bool,
}

impl DsvCandidate {
    pub fn new(x: Tensor, y: usize, lambda: f64) -> Self {
        DsvCandidate { x, y, lambda, alive: true }
    }
}

/// Distance used for the stationarity residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    L1,
    L2Sq,
}

/// Per-candidate classification loss `L(Φ(x), y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// Multiclass hinge `max(0, 1 − (Φ_y − max_{c≠y} Φ_c))`; for the
    /// two-class linear model of [`Model::binary_linear`] this is the
    /// classical hinge loss of the decision value.
    Hinge,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:path => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($variant),)+
                    other => Err(Error::Config(format!("unknown {} {other:?}", stringify!($ty)))),
                }
            }
        }
    };
}

text_enum!(Metric { Metric::L1 => "l1", Metric::L2Sq => "l2sq" });
text_enum!(LossKind { LossKind::CrossEntropy => "cross-entropy", LossKind::Hinge => "hinge" });

/// Hyperparameters of extraction (synthesis and selection) and checking.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConfig {
    /// Candidates per class `N`.
    pub per_class: usize,
    /// Class count `C`; must match the model.
    pub classes: usize,
    /// Weight of the stationarity term.
    pub beta: f64,
    /// Weight of the augmented copy.
    pub gamma: f64,
    pub step_x: f64,
    pub step_lambda: f64,
    /// Maximum iterations `T`.
    pub iterations: usize,
    pub metric: Metric,
    /// Pass the λ-weighted gradient sum through an elementwise signed
    /// square root before forming the residual.
    pub signed_sqrt: bool,
    /// Iterations run at half resolution before upsampling (image noise
    /// initialization only); `0` disables.
    pub lowres_iterations: usize,
    pub mask: ParamMask,
    /// Margin `ε` of the checker's gap statistics.
    pub margin: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Weight of the primal term; `0` leaves stationarity only.
    pub primal_weight: f64,
    /// Initial multiplier; `None` means `1 / (N·C)`.
    pub lambda_init: Option<f64>,
    /// Stop once `L_total` improved by less than `early_stop_tol` over this
    /// many iterations; `0` disables.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            per_class: 8,
            classes: 2,
            beta: 0.1,
            gamma: 5.0,
            step_x: 1e-3,
            step_lambda: 0.1,
            iterations: 2000,
            metric: Metric::L1,
            signed_sqrt: false,
            lowres_iterations: 0,
            mask: ParamMask::Full,
            margin: 0.1,
            seed: 0,
            loss: LossKind::CrossEntropy,
            primal_weight: 1.0,
            lambda_init: None,
            early_stop_window: 50,
            early_stop_tol: 1e-6,
        }
    }
}

impl ExtractConfig {
    /// Defaults with `classes` taken from the model.
    pub fn for_model(model: &Model) -> Self {
        ExtractConfig {
            classes: model.classes(),
            ..ExtractConfig::default()
        }
    }

    pub fn initial_lambda(&self) -> f64 {
        self.lambda_init.unwrap_or(1.0 / (self.per_class * self.classes) as f64)
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.per_class == 0 {
            return bad("per_class must be at least 1".into());
        }
        if self.classes != model.classes() {
            return bad(format!("config has {} classes, model has {}", self.classes, model.classes()));
        }
        if !(self.step_x > 0.0) || !(self.step_lambda > 0.0) {
            return bad("step sizes must be positive".into());
        }
        if !(self.beta >= 0.0) || !(self.gamma >= 0.0) || !(self.primal_weight >= 0.0) {
            return bad("beta, gamma and primal_weight must be non-negative".into());
        }
        if self.lowres_iterations > 0 && self.lowres_iterations >= self.iterations {
            return bad(format!(
                "lowres_iterations ({}) must be below iterations ({})",
                self.lowres_iterations, self.iterations
            ));
        }
        if self.lambda_init.is_some_and(|l| !(l >= 0.0)) {
            return bad("lambda_init must be non-negative".into());
        }
        model.mask_flags(&self.mask)?;
        Ok(())
    }

    /// `key = value` lines describing every field.
    pub fn echo(&self) -> String {
        let lambda = self.lambda_init.map_or("auto".to_string(), |l| l.to_string());
        format!(
            "per_class = {}\nclasses = {}\nbeta = {}\ngamma = {}\nstep_x = {}\nstep_lambda = {}\niterations = {}\n\
             metric = {}\nsigned_sqrt = {}\nlowres_iterations = {}\nmask = {}\nmargin = {}\nseed = {}\nloss = {}\n\
             primal_weight = {}\nlambda_init = {}\nearly_stop_window = {}\nearly_stop_tol = {}\n",
            self.per_class,
            self.classes,
            self.beta,
            self.gamma,
            self.step_x,
            self.step_lambda,
            self.iterations,
            self.metric,
            self.signed_sqrt,
            self.lowres_iterations,
            self.mask,
            self.margin,
            self.seed,
            self.loss,
            self.primal_weight,
            lambda,
            self.early_stop_window,
            self.early_stop_tol,
        )
    }
}

/// Alive candidates only.
pub fn alive(candidates: &[DsvCandidate]) -> impl Iterator<Item = &DsvCandidate> {
    candidates.iter().filter(|c| c.alive)
}

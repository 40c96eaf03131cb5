//! Classifiers (linear, MLP, ConvNet), parameter masks and checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use dsv_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DSVC";

/// Architecture descriptor. Its `Display` form is what checkpoints store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    Linear { input: Vec<usize>, classes: usize },
    Mlp { input: Vec<usize>, hidden: Vec<usize>, classes: usize },
    /// `blocks` × (conv3×3 → relu → maxpool2×2), then one dense layer.
    ConvNet { input: [usize; 3], blocks: usize, width: usize, classes: usize },
}

impl Arch {
    pub fn convnet(input: [usize; 3], classes: usize) -> Self {
        Arch::ConvNet {
            input,
            blocks: 3,
            width: 32,
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Arch::Linear { classes, .. } | Arch::Mlp { classes, .. } | Arch::ConvNet { classes, .. } => *classes,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Arch::Linear { input, .. } | Arch::Mlp { input, .. } => input.clone(),
            Arch::ConvNet { input, .. } => input.to_vec(),
        }
    }

    /// Parameter names and shapes in declaration order.
    pub fn param_specs(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let classes = self.classes();
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let mut specs = Vec::new();
        let features = match self {
            Arch::Linear { input, .. } => input.iter().product(),
            Arch::Mlp { input, hidden, .. } => {
                let mut fan_in: usize = input.iter().product();
                for (i, &h) in hidden.iter().enumerate() {
                    if h == 0 {
                        return Err(Error::Config("hidden layer of width 0".into()));
                    }
                    specs.push((format!("hidden{i}.weight"), vec![h, fan_in]));
                    specs.push((format!("hidden{i}.bias"), vec![h]));
                    fan_in = h;
                }
                fan_in
            }
            Arch::ConvNet {
                input: [c, h, w],
                blocks,
                width,
                ..
            } => {
                let (mut c, mut h, mut w) = (*c, *h, *w);
                for i in 0..*blocks {
                    specs.push((format!("conv{i}.weight"), vec![*width, c, 3, 3]));
                    specs.push((format!("conv{i}.bias"), vec![*width]));
                    c = *width;
                    h /= 2;
                    w /= 2;
                }
                c * h * w
            }
        };
        if features == 0 {
            return Err(Error::Config(format!("architecture {self} has no features left for the classifier")));
        }
        specs.push(("fc.weight".into(), vec![classes, features]));
        specs.push(("fc.bias".into(), vec![classes]));
        Ok(specs)
    }
}

fn dims(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Linear { input, classes } => write!(f, "linear input={} classes={classes}", dims(input)),
            Arch::Mlp { input, hidden, classes } => {
                let hidden: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
                write!(f, "mlp input={} hidden={} classes={classes}", dims(input), hidden.join(","))
            }
            Arch::ConvNet {
                input,
                blocks,
                width,
                classes,
            } => write!(f, "convnet input={} blocks={blocks} width={width} classes={classes}", dims(input)),
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("architecture {s:?}: {why}"));
        let mut words = s.split_whitespace();
        let kind = words.next().ok_or_else(|| bad("empty"))?;
        let mut fields = std::collections::BTreeMap::new();
        for word in words {
            let (k, v) = word.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            fields.insert(k, v);
        }
        let num = |key: &str| -> Result<usize> {
            fields
                .get(key)
                .ok_or_else(|| bad(&format!("missing {key}")))?
                .parse()
                .map_err(|_| bad(&format!("{key} is not a number")))
        };
        let list = |key: &str, sep: char| -> Result<Vec<usize>> {
            let raw = fields.get(key).ok_or_else(|| bad(&format!("missing {key}")))?;
            if raw.is_empty() {
                return Ok(Vec::new());
            }
            raw.split(sep)
                .map(|p| p.parse().map_err(|_| bad(&format!("{key} is not a list of numbers"))))
                .collect()
        };
        let classes = num("classes")?;
        let arch = match kind {
            "linear" => Arch::Linear {
                input: list("input", 'x')?,
                classes,
            },
            "mlp" => Arch::Mlp {
                input: list("input", 'x')?,
                hidden: list("hidden", ',')?,
                classes,
            },
            "convnet" => {
                let input: [usize; 3] = list("input", 'x')?
                    .try_into()
                    .map_err(|_| bad("convnet input must be CxHxW"))?;
                Arch::ConvNet {
                    input,
                    blocks: num("blocks")?,
                    width: num("width")?,
                    classes,
                }
            }
            other => return Err(bad(&format!("unknown kind {other}"))),
        };
        arch.param_specs()?;
        Ok(arch)
    }
}

/// Which parameters take part in flattening, stationarity and training.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ParamMask {
    #[default]
    Full,
    /// The final dense layer (`fc.weight`, `fc.bias`).
    LastLayer,
    Names(Vec<String>),
}

impl fmt::Display for ParamMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamMask::Full => f.write_str("full"),
            ParamMask::LastLayer => f.write_str("last-layer"),
            ParamMask::Names(names) => f.write_str(&names.join(",")),
        }
    }
}

impl FromStr for ParamMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "full" => ParamMask::Full,
            "last-layer" => ParamMask::LastLayer,
            "" => ParamMask::Names(Vec::new()),
            names => ParamMask::Names(names.split(',').map(|n| n.trim().to_string()).collect()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Arch,
    params: Vec<(String, Tensor)>,
}

impl Model {
    /// He-style uniform initialization (`±sqrt(6 / fan_in)`), zero biases.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_specs()?
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                Ok((name, Tensor::new(&shape, data)?))
            })
            .collect::<Result<_>>()?;
        Ok(Model { arch, params })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        let params = arch
            .param_specs()?
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(&shape)))
            .collect();
        Ok(Model { arch, params })
    }

    /// Builds a model from explicit tensors, checked against the descriptor.
    pub fn from_params(arch: Arch, params: Vec<(String, Tensor)>) -> Result<Self> {
        let specs = arch.param_specs()?;
        if specs.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{arch} has {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in specs.iter().zip(&params) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "expected {name} {shape:?}, got {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Model { arch, params })
    }

    /// Two-class linear model whose logit gap `Φ₀ − Φ₁` equals `wᵀx + b`:
    /// the rows are `±w/2` and the biases `±b/2`. Class 0 plays `y = +1`.
    pub fn binary_linear(w: &[f64], b: f64) -> Result<Self> {
        let d = w.len();
        let mut weight: Vec<f64> = w.iter().map(|v| 0.5 * v).collect();
        weight.extend(w.iter().map(|v| -0.5 * v));
        Model::from_params(
            Arch::Linear {
                input: vec![d],
                classes: 2,
            },
            vec![
                ("fc.weight".into(), Tensor::new(&[2, d], weight)?),
                ("fc.bias".into(), Tensor::vector(vec![0.5 * b, -0.5 * b])?),
            ],
        )
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Resolves a mask to one inclusion flag per parameter.
    pub fn mask_flags(&self, mask: &ParamMask) -> Result<Vec<bool>> {
        let flags: Vec<bool> = match mask {
            ParamMask::Full => vec![true; self.params.len()],
            ParamMask::LastLayer => self.params.iter().map(|(n, _)| n.starts_with("fc.")).collect(),
            ParamMask::Names(names) => {
                for name in names {
                    if self.param(name).is_none() {
                        return Err(Error::UnknownParameter(name.clone()));
                    }
                }
                self.params.iter().map(|(n, _)| names.contains(n)).collect()
            }
        };
        if !flags.iter().any(|&f| f) {
            return Err(Error::EmptyMask);
        }
        Ok(flags)
    }

    /// Concatenation of the included parameters in declaration order.
    pub fn flatten(&self, mask: &ParamMask) -> Result<Tensor> {
        let flags = self.mask_flags(mask)?;
        let parts: Vec<Tensor> = self
            .params
            .iter()
            .zip(&flags)
            .filter(|(_, &f)| f)
            .map(|((_, t), _)| t.clone())
            .collect();
        Ok(Tensor::concat_flat(&parts))
    }

    /// Inverse of [`Model::flatten`]: replaces the included parameters.
    pub fn unflatten(&self, mask: &ParamMask, flat: &[f64]) -> Result<Model> {
        let flags = self.mask_flags(mask)?;
        let expected: usize = self.params.iter().zip(&flags).filter(|(_, &f)| f).map(|((_, t), _)| t.len()).sum();
        if flat.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} elements, mask covers {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let params = self
            .params
            .iter()
            .zip(&flags)
            .map(|((name, t), &f)| {
                if !f {
                    return Ok((name.clone(), t.clone()));
                }
                let part = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                Ok((name.clone(), Tensor::new(t.shape(), part)?))
            })
            .collect::<Result<_>>()?;
        Ok(Model {
            arch: self.arch.clone(),
            params,
        })
    }

    /// Replaces every parameter, keeping names and checking shapes.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Model> {
        let params = self.params.iter().map(|(n, _)| n.clone()).zip(tensors).collect();
        Model::from_params(self.arch.clone(), params)
    }

    /// Inserts the parameters into `g`; those flagged in `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: &[bool]) -> Vec<Var<'g>> {
        self.params
            .iter()
            .zip(trainable.iter().chain(std::iter::repeat(&false)))
            .map(|((_, t), &f)| if f { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Logits `[B, C]` for a batch `[B, ...input]`, built on `g` from bound
    /// parameters (see [`Model::bind`]).
    pub fn forward_graph<'g>(&self, params: &[Var<'g>], x: Var<'g>) -> Result<Var<'g>> {
        let input = self.arch.input_shape();
        let shape = x.shape();
        if shape.len() != input.len() + 1 || shape[1..] != input[..] {
            return Err(Error::ShapeMismatch(format!(
                "model expects [batch, {}], got {shape:?}",
                dims(&input)
            )));
        }
        let batch = shape[0];
        let dense = |h: Var<'g>, w: Var<'g>, b: Var<'g>| -> Result<Var<'g>> { Ok(h.matmul_t(w, false, true)?.add_row_vector(b)?) };
        let n = params.len();
        let features = match &self.arch {
            Arch::Linear { .. } => x.reshape(&[batch, input.iter().product()])?,
            Arch::Mlp { hidden, .. } => {
                let mut h = x.reshape(&[batch, input.iter().product()])?;
                for i in 0..hidden.len() {
                    h = dense(h, params[2 * i], params[2 * i + 1])?.relu()?;
                }
                h
            }
            Arch::ConvNet { blocks, .. } => {
                let mut h = x;
                for i in 0..*blocks {
                    h = h.conv2d(params[2 * i], Some(params[2 * i + 1]))?.relu()?.maxpool2x2()?;
                }
                let s = h.shape();
                h.reshape(&[batch, s[1..].iter().product()])?
            }
        };
        Ok(dense(features, params[n - 2], params[n - 1])?)
    }

    /// Adds a leading batch axis when `x` is a single sample.
    pub fn as_batch(&self, x: &Tensor) -> Result<Tensor> {
        let input = self.arch.input_shape();
        if x.shape() == input.as_slice() {
            let mut shape = vec![1];
            shape.extend_from_slice(&input);
            Ok(x.reshape(&shape)?)
        } else {
            Ok(x.clone())
        }
    }

    /// Logits `[B, C]` for a batch (or `[1, C]` for a single sample).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.as_batch(x)?;
        let g = Graph::new();
        let params = self.bind(&g, &[]);
        Ok(self.forward_graph(&params, g.constant(x))?.value())
    }

    /// Arg-max class per sample; ties resolve to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok(logits.data().chunks(self.classes()).map(argmax).collect())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CHECKPOINT_MAGIC, self.arch.to_string());
        for (name, t) in &self.params {
            c.push(name.clone(), t.clone());
        }
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let arch: Arch = c.header.parse()?;
        Model::from_params(arch, c.entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Model::from_container(Container::load(path, CHECKPOINT_MAGIC)?)
    }
}

/// Mean cross-entropy of `[B, C]` logits against class labels.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let n = labels.len() as f64;
    let lse = logits.log_sum_exp()?.sum()?;
    let picked = logits.pick_columns(labels)?.sum()?;
    Ok(lse.sub(picked)?.scale(1.0 / n)?)
}

/// Fraction of samples whose arg-max prediction equals the label.
pub fn accuracy(model: &Model, data: &crate::data::Dataset) -> Result<f64> {
    let mut correct = 0;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(256) {
        let pred = model.predict(&data.batch(chunk)?)?;
        correct += chunk.iter().zip(pred).filter(|(&i, p)| data.labels()[i] == *p).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Index of the first maximal element.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Shannon entropy (nats) of the softmax of one logit row.
pub fn entropy(logits: &[f64]) -> f64 {
    softmax(logits).iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

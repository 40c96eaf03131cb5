//! `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Result;
use dsv_core::deepkkt::ExtractConfig;
use dsv_core::nn::ParamMask;

use crate::fail;

/// Every accepted key with its default and a one-line description, in echo
/// order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for data, initialization and extraction"),
    ("dataset", "glyphs", "glyphs | blobs2d | idx"),
    ("classes", "3", "class count"),
    ("train_per_class", "40", "generated training samples per class"),
    ("test_per_class", "200", "generated test samples per class"),
    ("size", "16", "glyph side length: 8, 16 or 32"),
    ("noise", "1", "glyph pixel noise sigma"),
    ("separation", "5", "blobs2d cluster radius"),
    ("idx_images", "", "IDX image file (dataset = idx)"),
    ("idx_labels", "", "IDX label file (dataset = idx)"),
    ("idx_test_images", "", "IDX test images; empty evaluates on the training files"),
    ("idx_test_labels", "", "IDX test labels"),
    ("train_data", "", "dataset container to use instead of generating"),
    ("test_data", "", "test dataset container to use instead of generating"),
    ("arch", "linear", "linear | mlp | convnet"),
    ("hidden", "32", "MLP hidden widths, comma separated"),
    ("blocks", "3", "ConvNet conv/pool blocks"),
    ("width", "32", "ConvNet channels per block"),
    ("optimizer", "adam", "pretraining optimizer: sgd | adam | sam"),
    ("lr", "0.05", "pretraining learning rate"),
    ("weight_decay", "0.01", "pretraining weight decay"),
    ("rho", "0.0001", "SAM radius when optimizer = sam"),
    ("epochs", "200", "pretraining epochs"),
    ("batch_size", "0", "pretraining batch size; 0 is full batch"),
    ("augment", "false", "augment pretraining batches"),
    ("target_accuracy", "none", "stop pretraining at this training accuracy"),
    ("mode", "synth", "extraction mode: synth | select"),
    ("checkpoint", "", "model checkpoint; empty means <out>/checkpoint.dsvc"),
    ("dsv", "", "DSV container; empty means <out>/dsv.dsvx"),
    ("per_class", "4", "candidates per class"),
    ("beta", "0.1", "stationarity weight"),
    ("gamma", "1", "weight of the augmented copy"),
    ("step_x", "0.1", "candidate step size"),
    ("step_lambda", "0.001", "multiplier step size"),
    ("iterations", "1000", "synthesis iterations"),
    ("metric", "l1", "stationarity norm: l1 | l2sq"),
    ("signed_sqrt", "false", "signed square root on the multiplier-weighted gradient sum"),
    ("lowres_iterations", "0", "half-resolution warm-up iterations"),
    ("mask", "full", "parameters in the stationarity residual: full | last-layer | names"),
    ("margin", "0.1", "checker margin on the logit gap"),
    ("loss", "cross-entropy", "candidate loss: cross-entropy | hinge"),
    ("primal_weight", "1", "primal term weight; 0 is stationarity only"),
    ("lambda_init", "1", "initial multiplier; auto means 1/(per_class * classes)"),
    ("early_stop_window", "0", "early-stop window in iterations; 0 disables"),
    ("early_stop_tol", "0.000001", "minimum improvement over the early-stop window"),
    ("select_iterations", "200", "selection iterations"),
    ("select_step_lambda", "0.01", "selection multiplier step size"),
    ("retrain_steps", "300", "SAM steps when retraining on distilled sets"),
    ("retrain_lr", "0.1", "retraining learning rate"),
    ("retrain_rho", "0.0001", "retraining SAM radius"),
    ("eval_seeds", "10", "seeds per evaluation arm"),
    ("mix_epsilon", "0.05", "mixing strength relative to the image norm"),
    ("grad_steps", "5000", "grad-trace training steps"),
    ("grad_lr", "0.1", "grad-trace SGD learning rate"),
    ("probe_interval", "10", "grad-trace probe interval"),
    ("hinge_lr", "0.01", "svm-compare hinge learning rate"),
    ("hinge_steps", "20000", "svm-compare hinge steps"),
];

/// Fully resolved configuration: every key of [`KEYS`] has a value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(fail("config", format!("line {}: expected `key = value`, got {line:?}", n + 1)));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| fail("io", format!("{}: {e}", path.display())))?;
        self.merge_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(fail("config", format!("unknown key {key:?}"))),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("every key has a default")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| fail("config", format!("{key} = {v:?} is not valid")))
    }

    /// `None` for the words `none` and `auto`.
    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            "none" | "auto" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    /// A path key, or `fallback` when empty.
    pub fn path_or(&self, key: &str, fallback: PathBuf) -> PathBuf {
        match self.raw(key) {
            "" => fallback,
            p => PathBuf::from(p),
        }
    }

    /// One `key = value` line per key, in declaration order.
    pub fn echo(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.raw(k))).collect()
    }

    /// The echo as `#` comment lines.
    pub fn comment(&self) -> String {
        self.echo().lines().map(|l| format!("# {l}\n")).collect()
    }

    pub fn extract(&self, classes: usize) -> Result<ExtractConfig> {
        Ok(ExtractConfig {
            per_class: self.get("per_class")?,
            classes,
            beta: self.get("beta")?,
            gamma: self.get("gamma")?,
            step_x: self.get("step_x")?,
            step_lambda: self.get("step_lambda")?,
            iterations: self.get("iterations")?,
            metric: self.get("metric")?,
            signed_sqrt: self.get("signed_sqrt")?,
            lowres_iterations: self.get("lowres_iterations")?,
            mask: self.get::<ParamMask>("mask")?,
            margin: self.get("margin")?,
            seed: self.get("seed")?,
            loss: self.get("loss")?,
            primal_weight: self.get("primal_weight")?,
            lambda_init: self.optional("lambda_init")?,
            early_stop_window: self.get("early_stop_window")?,
            early_stop_tol: self.get("early_stop_tol")?,
        })
    }
}

/// The key table for `--help`.
pub fn key_help() -> String {
    let mut out = String::from("Config keys (key = default):\n");
    for (k, v, doc) in KEYS {
        let shown = if v.is_empty() { "\"\"" } else { v };
        out.push_str(&format!("  {k} = {shown}\n      {doc}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let mut c = RunConfig::default();
        c.merge_text("# header\n\nseed = 7  # trailing\narch=mlp\n").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), 7);
        assert_eq!(c.raw("arch"), "mlp");
        assert_eq!(c.raw("lr"), "0.05");
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.merge_text("sede = 1").unwrap_err().to_string().contains("unknown key"));
        assert!(c.merge_text("seed 1").is_err());
    }

    #[test]
    fn echo_parses_back_to_the_same_config() {
        let mut c = RunConfig::default();
        c.merge_text("mask = last-layer\nlambda_init = auto").unwrap();
        let mut back = RunConfig::default();
        back.merge_text(&c.echo()).unwrap();
        assert_eq!(back, c);
        back.merge_text(&c.comment()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn defaults_resolve_to_a_valid_extract_config() {
        let e = RunConfig::default().extract(3).unwrap();
        assert_eq!(e.lambda_init, Some(1.0));
        assert_eq!(e.mask, ParamMask::Full);
        let mut c = RunConfig::default();
        c.set("lambda_init", "auto").unwrap();
        assert_eq!(c.extract(3).unwrap().lambda_init, None);
    }

    #[test]
    fn help_lists_every_key() {
        let h = key_help();
        for (k, _, _) in KEYS {
            assert!(h.contains(&format!("  {k} = ")), "{k}");
        }
    }
}

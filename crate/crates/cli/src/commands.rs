//! Subcommand implementations. Each resolves its config, writes
//! `config.txt` and its artifacts into the output directory.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use dsv_autograd::Tensor;
use dsv_core::data::{gen_blobs2d, gen_glyphs, load_idx, Dataset};
use dsv_core::deepkkt::{self, render_grid, select, stationarity_loss, synthesize, trace_to_csv, DsvCandidate, DsvSet, ExtractConfig, LossKind};
use dsv_core::eval::{
    ablation_primal_vs_stat, dsv_one_per_class, mixing_experiment, random_one_per_class, retrain_accuracy, selection_one_per_class,
    ExperimentResult, RetrainConfig,
};
use dsv_core::nn::{accuracy, Arch, Model};
use dsv_core::optim::{grad_direction_trace, train_classifier, train_hinge_linear, Optimizer, TrainConfig};
use dsv_core::svm::{check_classical_kkt, solve_hard_margin, BiasMode, SvmOptions};

use crate::config::RunConfig;
use crate::{fail, Common};

/// Offset between the training and the test data seed.
const TEST_SEED_OFFSET: u64 = 1000;

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        Self::with_base(common, RunConfig::default())
    }

    /// Precedence: `base` < config file < flags.
    fn with_base(common: &Common, mut cfg: RunConfig) -> Result<Self> {
        if let Some(p) = &common.config {
            cfg.merge_file(p)?;
        }
        if let Some(s) = common.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(m) = &common.mode {
            cfg.set("mode", m)?;
        }
        if let Some(m) = &common.mask {
            cfg.set("mask", m)?;
        }
        std::fs::create_dir_all(&common.out).map_err(|e| fail("io", format!("{}: {e}", common.out.display())))?;
        let run = Run {
            cfg,
            out: common.out.clone(),
        };
        run.write("config.txt", run.cfg.echo())?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| fail("io", format!("{}: {e}", p.display())))
    }

    /// Text artifact prefixed with the config echo as comments.
    fn write_text(&self, name: &str, body: &str) -> Result<()> {
        self.write(name, format!("{}{body}", self.cfg.comment()))
    }

    /// PPM with the config echo in its header comments.
    fn write_ppm(&self, name: &str, ppm: &[u8]) -> Result<()> {
        let (magic, rest) = ppm.split_at(3);
        let mut out = magic.to_vec();
        out.extend_from_slice(self.cfg.comment().as_bytes());
        out.extend_from_slice(rest);
        self.write(name, out)
    }

    fn seed(&self) -> Result<u64> {
        self.cfg.get("seed")
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.cfg.path_or("checkpoint", self.path("checkpoint.dsvc"))
    }

    fn model(&self) -> Result<Model> {
        let p = self.checkpoint_path();
        if !p.exists() {
            return Err(fail("missing-checkpoint", format!("no checkpoint at {}", p.display())));
        }
        Ok(Model::load(&p)?)
    }

    fn dsv_path(&self) -> PathBuf {
        self.cfg.path_or("dsv", self.path("dsv.dsvx"))
    }

    fn dsv_set(&self) -> Result<DsvSet> {
        let p = self.dsv_path();
        if !p.exists() {
            return Err(fail("missing-dsv", format!("no DSV set at {}", p.display())));
        }
        Ok(DsvSet::load(&p)?)
    }

    fn generate(&self, seed: u64, per_class_key: &str) -> Result<Dataset> {
        let classes: usize = self.cfg.get("classes")?;
        let n: usize = self.cfg.get(per_class_key)?;
        Ok(match self.cfg.raw("dataset") {
            "glyphs" => gen_glyphs(classes, n, self.cfg.get("size")?, self.cfg.get("noise")?, seed)?,
            "blobs2d" => gen_blobs2d(classes, n, self.cfg.get("separation")?, seed)?,
            other => return Err(fail("config", format!("dataset = {other:?} cannot be generated"))),
        })
    }

    fn idx(&self, images: &str, labels: &str) -> Result<Dataset> {
        let (i, l) = (self.cfg.raw(images), self.cfg.raw(labels));
        if i.is_empty() || l.is_empty() {
            return Err(fail("config", format!("dataset = idx needs {images} and {labels}")));
        }
        Ok(load_idx(i, l)?)
    }

    fn train_data(&self) -> Result<Dataset> {
        match self.cfg.raw("train_data") {
            "" if self.cfg.raw("dataset") == "idx" => self.idx("idx_images", "idx_labels"),
            "" => self.generate(self.seed()?, "train_per_class"),
            p => Ok(Dataset::load(p)?),
        }
    }

    fn test_data(&self) -> Result<Dataset> {
        match self.cfg.raw("test_data") {
            "" if self.cfg.raw("dataset") == "idx" => {
                if self.cfg.raw("idx_test_images").is_empty() {
                    self.train_data()
                } else {
                    self.idx("idx_test_images", "idx_test_labels")
                }
            }
            "" => self.generate(self.seed()? + TEST_SEED_OFFSET, "test_per_class"),
            p => Ok(Dataset::load(p)?),
        }
    }

    fn arch(&self, data: &Dataset) -> Result<Arch> {
        let input = data.feature_shape().to_vec();
        let classes = data.classes();
        Ok(match self.cfg.raw("arch") {
            "linear" => Arch::Linear { input, classes },
            "mlp" => {
                let hidden = self
                    .cfg
                    .raw("hidden")
                    .split(',')
                    .map(|h| h.trim().parse().map_err(|_| fail("config", format!("hidden width {h:?}"))))
                    .collect::<Result<Vec<usize>>>()?;
                Arch::Mlp { input, hidden, classes }
            }
            "convnet" => {
                let [c, h, w] = input[..] else {
                    return Err(fail("config", format!("convnet needs image data, got feature shape {input:?}")));
                };
                Arch::ConvNet {
                    input: [c, h, w],
                    blocks: self.cfg.get("blocks")?,
                    width: self.cfg.get("width")?,
                    classes,
                }
            }
            other => return Err(fail("config", format!("arch = {other:?}"))),
        })
    }

    fn optimizer(&self) -> Result<Optimizer> {
        let lr = self.cfg.get("lr")?;
        let opt = match self.cfg.raw("optimizer") {
            "sgd" => Optimizer::sgd(lr)?,
            "adam" => Optimizer::adam(lr)?,
            "sam" => Optimizer::sam(lr, self.cfg.get("rho")?)?,
            other => return Err(fail("config", format!("optimizer = {other:?}"))),
        };
        Ok(opt.with_weight_decay(self.cfg.get("weight_decay")?))
    }

    fn extract_config(&self, model: &Model) -> Result<ExtractConfig> {
        let e = self.cfg.extract(model.classes())?;
        e.validate(model)?;
        Ok(e)
    }

    fn select_config(&self, model: &Model) -> Result<ExtractConfig> {
        Ok(ExtractConfig {
            iterations: self.cfg.get("select_iterations")?,
            step_lambda: self.cfg.get("select_step_lambda")?,
            ..self.extract_config(model)?
        })
    }

    fn retrain_config(&self, data: &Dataset) -> Result<RetrainConfig> {
        Ok(RetrainConfig {
            arch: self.arch(data)?,
            steps: self.cfg.get("retrain_steps")?,
            lr: self.cfg.get("retrain_lr")?,
            rho: self.cfg.get("retrain_rho")?,
        })
    }

    fn eval_seeds(&self) -> Result<Vec<u64>> {
        let first = self.seed()?;
        let n: u64 = self.cfg.get("eval_seeds")?;
        Ok((first..first + n).collect())
    }
}

pub fn gen_data(common: &Common) -> Result<()> {
    let run = Run::new(common)?;
    let (train, test) = (run.train_data()?, run.test_data()?);
    train.save(run.path("train.dsvd"))?;
    test.save(run.path("test.dsvd"))?;
    sayln!("train: {} samples, digest {:016x}", train.len(), train.digest());
    sayln!("test: {} samples, digest {:016x}", test.len(), test.digest());
    Ok(())
}

pub fn train(common: &Common) -> Result<()> {
    let run = Run::new(common)?;
    let seed = run.seed()?;
    let (train, test) = (run.train_data()?, run.test_data()?);
    let model = Model::new(run.arch(&train)?, seed)?;
    let tc = TrainConfig {
        epochs: run.cfg.get("epochs")?,
        batch_size: run.cfg.get("batch_size")?,
        seed,
        augment: run.cfg.get("augment")?,
        target_accuracy: run.cfg.optional("target_accuracy")?,
    };
    let mut opt = run.optimizer()?;
    let (model, log) = train_classifier(&model, &train, &mut opt, &tc)?;
    let mut csv = String::from("epoch,loss,accuracy\n");
    for e in &log {
        writeln!(csv, "{},{},{}", e.epoch, e.loss, e.accuracy)?;
        if e.epoch % 10 == 0 {
            eprintln!("epoch {:4}  loss {:.5}  train accuracy {:.4}", e.epoch, e.loss, e.accuracy);
        }
    }
    run.write_text("train_log.csv", &csv)?;
    model.save(run.checkpoint_path())?;
    sayln!(
        "{}: train accuracy {:.4}, test accuracy {:.4}",
        model.arch(),
        accuracy(&model, &train)?,
        accuracy(&model, &test)?
    );
    Ok(())
}

fn selection_trace_csv(trace: &[deepkkt::SelectionTraceRow]) -> String {
    let mut out = String::from("iteration,l_stat,weighted_entropy\n");
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.iteration, r.stat_loss, r.weighted_entropy));
    }
    out
}

pub fn extract(common: &Common) -> Result<()> {
    let run = Run::new(common)?;
    let model = run.model()?;
    let cfg = run.extract_config(&model)?;
    let (candidates, trace) = match run.cfg.raw("mode") {
        "synth" => {
            let s = synthesize(&model, &cfg)?;
            (s.candidates, trace_to_csv(&s.trace))
        }
        "select" => {
            let data = run.train_data()?;
            let s = select(&model, &data, &run.select_config(&model)?)?;
            let mut cands = Vec::new();
            for idx in s.top(cfg.per_class).into_iter().flatten() {
                let mut c = DsvCandidate::new(data.sample(idx)?, data.labels()[idx], s.lambdas[idx]);
                c.alive = c.lambda > 0.0;
                cands.push(c);
            }
            (cands, selection_trace_csv(&s.trace))
        }
        other => return Err(fail("config", format!("mode = {other:?}"))),
    };
    let set = DsvSet::new(run.cfg.echo(), &model.arch().input_shape(), &candidates)?;
    set.save(run.dsv_path())?;
    run.write_ppm("grid.ppm", &render_grid(&set.candidates, model.classes())?)?;
    run.write_text("trace.csv", &trace)?;
    let report = deepkkt::check_kkt(&model, &set.candidates, &cfg)?;
    run.write_text("report.txt", &report.to_string())?;
    say!("{report}");
    Ok(())
}

pub fn check_kkt(common: &Common) -> Result<()> {
    // the DSV header supplies the producing config, so peek at it first
    let probe = Run::new(common)?;
    let set = probe.dsv_set()?;
    let model = probe.model()?;
    let mut base = RunConfig::default();
    base.merge_text(&set.header)?;
    let run = Run::with_base(common, base)?;
    let cfg = run.extract_config(&model)?;
    let report = deepkkt::check_kkt(&model, &set.candidates, &cfg)?;
    say!("{report}");
    Ok(())
}

pub fn svm_compare(common: &Common) -> Result<()> {
    let run = Run::new(common)?;
    let seed = run.seed()?;
    let data = gen_blobs2d(2, run.cfg.get("train_per_class")?, run.cfg.get("separation")?, seed)?;
    let (rows, y) = (data.rows(), data.signed_labels()?);
    let w = train_hinge_linear(&rows, &y, run.cfg.get("hinge_lr")?, run.cfg.get("hinge_steps")?)?;
    let sol = solve_hard_margin(
        &rows,
        &y,
        &SvmOptions {
            mode: BiasMode::Folded,
            ..SvmOptions::default()
        },
    )?;
    let classical = check_classical_kkt(&sol, &rows, &y);

    let hinge_model = Model::binary_linear(&w[..2], w[2])?;
    let svm_model = Model::binary_linear(&sol.w, sol.b)?;
    let cfg = ExtractConfig {
        loss: LossKind::Hinge,
        ..run.cfg.extract(2)?
    };
    // a two-row binary model splits the decision value across both rows,
    // so the oracle multipliers enter at half scale
    let oracle: Vec<DsvCandidate> = sol
        .support
        .iter()
        .map(|&k| Ok(DsvCandidate::new(Tensor::vector(rows[k].clone())?, data.labels()[k], 0.5 * sol.alpha[k])))
        .collect::<Result<_>>()?;
    let relative = |m: &Model| -> Result<f64> { Ok(stationarity_loss(m, &oracle, &cfg)? / m.flatten(&cfg.mask)?.l1_norm()) };

    let mut t = String::new();
    writeln!(t, "model            w0         w1         b")?;
    writeln!(t, "hinge      {:>10.5} {:>10.5} {:>10.5}", w[0], w[1], w[2])?;
    writeln!(t, "svm        {:>10.5} {:>10.5} {:>10.5}", sol.w[0], sol.w[1], sol.b)?;
    writeln!(t)?;
    writeln!(t, "support vectors = {}", sol.support.len())?;
    writeln!(t, "svm margin = {}", sol.margin)?;
    writeln!(t, "classical max residual = {:e}", classical.max_residual())?;
    writeln!(t, "deepkkt relative residual, svm weights = {:e}", relative(&svm_model)?)?;
    writeln!(t, "deepkkt relative residual, hinge weights = {:e}", relative(&hinge_model)?)?;
    match synthesize(&hinge_model, &cfg) {
        Ok(s) => {
            let margins: Vec<String> = s
                .survivors()
                .iter()
                .map(|c| format!("{:.3}", (w[0] * c.x.data()[0] + w[1] * c.x.data()[1] + w[2]).abs()))
                .collect();
            writeln!(t, "synthesized survivors = {}", margins.len())?;
            writeln!(t, "synthesized margins = {}", margins.join(","))?;
        }
        Err(e) => writeln!(t, "synthesis failed = {}: {e}", e.code())?,
    }
    run.write_text("report.txt", &t)?;
    say!("{t}");
    Ok(())
}

fn arm(run: &Run, name: &str, values: Vec<f64>, seeds: &[u64]) -> Result<ExperimentResult> {
    let r = ExperimentResult::new(name, seeds.to_vec(), values, run.cfg.echo())?;
    run.write_text(&format!("distill_{name}.csv"), &r.to_csv())?;
    Ok(r)
}

pub fn distill_eval(common: &Common) -> Result<()> {
    let run = Run::new(common)?;
    let model = run.model()?;
    let set = run.dsv_set()?;
    let (train, test) = (run.train_data()?, run.test_data()?);
    let retrain = run.retrain_config(&train)?;
    let seeds = run.eval_seeds()?;
    let classes = model.classes();

    let distilled = dsv_one_per_class(&set, classes)?;
    let selection = select(&model, &train, &run.select_config(&model)?)?;
    let selected = selection_one_per_class(&selection, &train)?;
    let mut rows = Vec::new();
    for (name, data) in [("dsv", &distilled), ("selection", &selected), ("full", &train)] {
        let values = seeds.iter().map(|&s| retrain_accuracy(data, &test, &retrain, s)).collect::<dsv_core::Result<Vec<_>>>()?;
        rows.push(arm(&run, name, values, &seeds)?);
    }
    // the random arm draws a fresh sample per seed
    let values = seeds
        .iter()
        .map(|&s| retrain_accuracy(&random_one_per_class(&train, s)?, &test, &retrain, s))
        .collect::<dsv_core::Result<Vec<_>>>()?;
    rows.insert(0, arm(&run, "random", values, &seeds)?);

    let summary: String = rows.iter().map(|r| format!("{}\n", r.summary())).collect();
    run.write_text("summary.txt", &summary)?;
    say!("{summary}");
    Ok(())
}

pub fn mix_eval(common: &Common) -> Result<()> {
    let run = Run::new(common)?;
    let model = run.model()?;
    let set = run.dsv_set()?;
    let (train, test) = (run.train_data()?, run.test_data()?);
    let r = mixing_experiment(
        &model,
        &set.top_per_class(model.classes())?,
        &test,
        &train,
        run.cfg.get("mix_epsilon")?,
        run.seed()?,
    )?;
    let text = format!(
        "epsilon = {}\npairs = {}\ndsv_flip_rate = {}\ncontrol_flip_rate = {}\n",
        r.epsilon, r.pairs, r.dsv_flip_rate, r.control_flip_rate
    );
    run.write_text("mix.txt", &text)?;
    say!("{text}");
    Ok(())
}

pub fn ablate(common: &Common) -> Result<()> {
    let run = Run::new(common)?;
    let model = run.model()?;
    let a = ablation_primal_vs_stat(&model, &run.extract_config(&model)?)?;
    run.write_ppm("primal_grid.ppm", &a.primal_grid)?;
    run.write_ppm("stat_grid.ppm", &a.stat_grid)?;
    run.write_text("primal_trace.csv", &trace_to_csv(&a.primal_only.trace))?;
    run.write_text("stat_trace.csv", &trace_to_csv(&a.stat_only.trace))?;
    run.write_text("primal_report.txt", &a.primal_report.to_string())?;
    run.write_text("stat_report.txt", &a.stat_report.to_string())?;
    let text = format!(
        "primal_gamma = {}\nprimal_max_change = {}\nstat_initial = {}\nstat_final = {}\nstat_reduction = {}\n",
        a.primal_gamma,
        a.primal_max_change(),
        a.stat_initial,
        a.stat_final,
        1.0 - a.stat_final / a.stat_initial
    );
    run.write_text("ablation.txt", &text)?;
    say!("{text}");
    Ok(())
}

pub fn grad_trace(common: &Common) -> Result<()> {
    let run = Run::new(common)?;
    let data = run.train_data()?;
    let model = Model::new(run.arch(&data)?, run.seed()?)?;
    let steps: usize = run.cfg.get("grad_steps")?;
    let mut opt = Optimizer::sgd(run.cfg.get("grad_lr")?)?;
    let g = grad_direction_trace(&model, &data, &mut opt, steps, run.cfg.get("probe_interval")?)?;
    let mut csv = String::from("step,cosine\n");
    for (s, c) in g.steps.iter().zip(&g.cosines) {
        writeln!(csv, "{s},{c}")?;
    }
    run.write_text("grad_trace.csv", &csv)?;
    let late = g
        .steps
        .iter()
        .zip(&g.cosines)
        .filter(|(&s, _)| s >= steps - steps / 10)
        .map(|(_, &c)| c)
        .fold(f64::INFINITY, f64::min);
    sayln!("final loss = {}", g.final_loss);
    sayln!("skipped probes = {}", g.skipped.len());
    sayln!("min cosine over the last 10% = {late}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn common(out: &Path) -> Common {
        Common {
            config: None,
            seed: Some(3),
            out: out.to_path_buf(),
            mode: None,
            mask: Some("last-layer".into()),
        }
    }

    #[test]
    fn flags_override_and_config_is_echoed() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(&common(dir.path())).unwrap();
        assert_eq!(run.seed().unwrap(), 3);
        let echoed = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
        assert!(echoed.contains("seed = 3\n") && echoed.contains("mask = last-layer\n"));
    }

    #[test]
    fn ppm_comments_keep_the_image_readable() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(&common(dir.path())).unwrap();
        let ppm = b"P6\n1 1\n255\n\x01\x02\x03";
        run.write_ppm("g.ppm", ppm).unwrap();
        let bytes = std::fs::read(dir.path().join("g.ppm")).unwrap();
        assert_eq!(deepkkt::read_ppm(&bytes).unwrap(), (1, 1, vec![1, 2, 3]));
    }
}

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use dsv_core::deepkkt::{parse_trace_csv, read_ppm, DsvSet, KktReport};

fn dsv(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsv"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = dsv(args, out);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn quick_config(dir: &Path) -> String {
    let p = dir.join("quick.txt");
    std::fs::write(&p, "# short runs\nepochs = 60\niterations = 200\ntest_per_class = 50\n").unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn extract_without_checkpoint_fails_with_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsv(&["extract"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.starts_with("error: missing-checkpoint: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "seed = 1\nstep_size = 0.1\n").unwrap();
    let o = dsv(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error: config: unknown key \"step_size\""));
}

#[test]
fn help_lists_every_echoed_key_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data"], dir.path());
    let echo = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
    let help = String::from_utf8(Command::new(env!("CARGO_BIN_EXE_dsv")).arg("--help").output().unwrap().stdout).unwrap();
    for line in echo.lines() {
        let (k, v) = line.split_once(" = ").unwrap_or((line.trim_end_matches(" ="), ""));
        let shown = if v.is_empty() { "\"\"" } else { v };
        assert!(help.contains(&format!("  {k} = {shown}\n")), "{k}");
    }
}

#[test]
fn train_extract_check_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let t = Instant::now();
    ok(&["train", "--config", &cfg], dir.path());
    let extracted = ok(&["extract", "--config", &cfg], dir.path());
    let checked = ok(&["check-kkt", "--config", &cfg], dir.path());
    assert!(t.elapsed() < Duration::from_secs(15 * 60));

    for name in ["config.txt", "checkpoint.dsvc", "dsv.dsvx", "grid.ppm", "trace.csv", "report.txt", "train_log.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let report: KktReport = checked.parse().unwrap();
    assert_eq!(report, extracted.parse::<KktReport>().unwrap());
    let saved = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(saved.starts_with("# seed = 0\n"));
    assert_eq!(saved.parse::<KktReport>().unwrap(), report);
    assert_eq!(report.alive_per_class.len(), 3);

    let set = DsvSet::load(dir.path().join("dsv.dsvx")).unwrap();
    assert!(set.header.contains("iterations = 200\n"));
    assert_eq!(set.len(), report.alive);
    let trace = parse_trace_csv(&std::fs::read_to_string(dir.path().join("trace.csv")).unwrap()).unwrap();
    assert_eq!(trace.len(), 201);
    read_ppm(&std::fs::read(dir.path().join("grid.ppm")).unwrap()).unwrap();
}

#[test]
fn same_config_and_seed_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["train", "--config", &cfg, "--seed", "4"], out);
        ok(&["extract", "--config", &cfg, "--seed", "4"], out);
    }
    for name in ["checkpoint.dsvc", "dsv.dsvx", "grid.ppm", "trace.csv", "report.txt", "train_log.csv"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn selection_mode_and_last_layer_mask() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    ok(&["train", "--config", &cfg], dir.path());
    let out = ok(&["extract", "--config", &cfg, "--mode", "select", "--mask", "last-layer"], dir.path());
    let report: KktReport = out.parse().unwrap();
    assert_eq!(report.primal_violations, 0);
    let set = DsvSet::load(dir.path().join("dsv.dsvx")).unwrap();
    assert!(set.header.contains("mode = select\n") && set.header.contains("mask = last-layer\n"));
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.lines().any(|l| l == "iteration,l_stat,weighted_entropy"));
}

#[test]
fn svm_compare_reports_exact_oracle_stationarity() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["svm-compare", "--seed", "2"], dir.path());
    let line = out.lines().find(|l| l.starts_with("deepkkt relative residual, svm weights = ")).unwrap();
    let v: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(v < 1e-9, "{line}");
}

#[test]
fn evaluation_subcommands_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("eval.txt");
    std::fs::write(&cfg, "epochs = 60\niterations = 200\ntest_per_class = 50\neval_seeds = 2\nretrain_steps = 50\ngrad_steps = 200\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    ok(&["train", "--config", cfg], dir.path());
    ok(&["extract", "--config", cfg], dir.path());
    let summary = ok(&["distill-eval", "--config", cfg], dir.path());
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.lines().all(|l| l.contains(" ± ")));
    let csv = std::fs::read_to_string(dir.path().join("distill_dsv.csv")).unwrap();
    assert_eq!(dsv_core::eval::ExperimentResult::from_csv("dsv", &csv, "").unwrap().seeds, vec![0, 1]);
    assert!(ok(&["mix-eval", "--config", cfg], dir.path()).contains("dsv_flip_rate = "));
    let ablation = ok(&["ablate", "--config", cfg], dir.path());
    assert!(ablation.contains("primal_max_change = 0\n"), "{ablation}");
    read_ppm(&std::fs::read(dir.path().join("stat_grid.ppm")).unwrap()).unwrap();
    assert!(ok(&["grad-trace", "--config", cfg], dir.path()).contains("min cosine"));
}

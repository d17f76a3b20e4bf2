use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deltafm_cli::commands::{self, SweepRow};
use deltafm_cli::{EvalArgs, Overrides, SamplingFlags, SweepArgs, SweepAxis};
use tempfile::TempDir;

fn deltafm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deltafm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DELTAFM_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
[dataset]
kind = "two_gaussians"
separation = 2.0
scale = 1.0
n_per_class = 400
seed = 3

[train]
iterations = 300
batch_size = 64

[eval]
samples_per_class = 256
flows_per_class = 32
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn train_small(dir: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let cfg = write_config(dir, "small.toml", SMALL);
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--output-dir", out, "--quiet"];
    args.extend_from_slice(extra);
    let o = deltafm(&args, dir);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join(out).join("model.ckpt")
}

#[test]
fn missing_config_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let o = deltafm(&["train", "--config", "nowhere/run.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("nowhere/run.toml"), "{}", stderr(&o));
}

#[test]
fn lambda_out_of_range_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "[train]\nlambda = 1.0\n");
    let o = deltafm(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lambda"), "{}", stderr(&o));

    let o = deltafm(&["train", "--lambda", "-0.1"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lambda"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "typo.toml", "[train]\nitertions = 5\n");
    let o = deltafm(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("itertions"), "{}", stderr(&o));
}

#[test]
fn training_writes_artifacts_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = train_small(tmp.path(), "a", &[]);
    let b = train_small(tmp.path(), "b", &[]);
    let digest = |p: &Path| std::fs::read_to_string(p.with_extension("ckpt.sha256")).unwrap();
    assert_eq!(digest(&a), digest(&b));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let loss = std::fs::read_to_string(tmp.path().join("a/loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("iteration,fm_term,contrastive_term,total"));
    assert_eq!(lines.count(), 300);

    let c = train_small(tmp.path(), "c", &["--seed", "9"]);
    assert_ne!(digest(&a), digest(&c));

    let saved = std::fs::read_to_string(tmp.path().join("a/config.toml")).unwrap();
    let reparsed = deltafm_cli::RunConfig::parse(&saved).unwrap();
    assert_eq!(reparsed.train.iterations, 300);
}

#[test]
fn output_dir_flag_beats_env_var() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", &SMALL.replace("iterations = 300", "iterations = 5"));
    let base = ["train", "--config", cfg.to_str().unwrap(), "--quiet"];
    let env_run = Command::new(env!("CARGO_BIN_EXE_deltafm"))
        .args(base)
        .current_dir(tmp.path())
        .env("DELTAFM_OUTPUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(env_run.status.success());
    assert!(tmp.path().join("from_env/model.ckpt").exists());

    let flag_run = Command::new(env!("CARGO_BIN_EXE_deltafm"))
        .args(base)
        .args(["--output-dir", "from_flag"])
        .current_dir(tmp.path())
        .env("DELTAFM_OUTPUT_DIR", "from_env_2")
        .output()
        .unwrap();
    assert!(flag_run.status.success());
    assert!(tmp.path().join("from_flag/model.ckpt").exists());
    assert!(!tmp.path().join("from_env_2").exists());
}

#[test]
fn corrupt_checkpoints_are_distinct_from_io_failures() {
    let tmp = TempDir::new().unwrap();
    let ckpt = train_small(tmp.path(), "run", &["--iterations", "2"]);
    let mut bytes = std::fs::read(&ckpt).unwrap();

    bytes[0] = b'X';
    std::fs::write(tmp.path().join("bad_magic.ckpt"), &bytes).unwrap();
    let o = deltafm(&["sample", "--checkpoint", "bad_magic.ckpt", "--n", "2"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("not a checkpoint"), "{}", stderr(&o));

    let good = std::fs::read(&ckpt).unwrap();
    std::fs::write(tmp.path().join("short.ckpt"), &good[..good.len() - 5]).unwrap();
    let o = deltafm(&["sample", "--checkpoint", "short.ckpt", "--n", "2"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));

    let o = deltafm(&["sample", "--checkpoint", "absent.ckpt", "--n", "2"], tmp.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("absent.ckpt"));
}

#[test]
fn sampling_is_deterministic_and_writes_per_class_trajectories() {
    let tmp = TempDir::new().unwrap();
    let ckpt = train_small(tmp.path(), "run", &[]);
    let ck = ckpt.to_str().unwrap();
    let args = |out: &'static str, traj: &'static str| {
        vec![
            "sample", "--checkpoint", ck, "--n", "20", "--guidance", "hat", "--out", out, "--trajectories", traj,
        ]
    };
    for (out, traj) in [("s1.csv", "t1.csv"), ("s2.csv", "t2.csv")] {
        let o = deltafm(&args(out, traj), tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let s1 = std::fs::read_to_string(tmp.path().join("s1.csv")).unwrap();
    assert_eq!(s1, std::fs::read_to_string(tmp.path().join("s2.csv")).unwrap());
    assert!(s1.starts_with("class,dim0,dim1\n"));
    assert_eq!(s1.lines().count(), 41);
    for c in 0..2 {
        let t = std::fs::read_to_string(tmp.path().join(format!("t1_class{c}.csv"))).unwrap();
        assert!(t.starts_with("traj_id,step,t,state0,state1,expectation0,expectation1\n"));
        // 50 steps recorded every 5: steps 0, 5, ..., 50.
        assert_eq!(t.lines().count(), 1 + 20 * 11);
    }

    let o = deltafm(&["sample", "--checkpoint", ck, "--n", "3", "--class", "null", "--class", "1"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("null,")).count(), 3);
    assert_eq!(text.lines().filter(|l| l.starts_with("1,")).count(), 3);

    let o = deltafm(&["sample", "--checkpoint", ck, "--class", "7"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

fn eval_args(dir: &Path, config: &Path, checkpoint: Option<PathBuf>, out: &str) -> EvalArgs {
    EvalArgs {
        oracle: checkpoint.is_none(),
        checkpoint,
        config: Some(config.to_path_buf()),
        output_dir: Some(dir.join(out)),
        samples_per_class: None,
        sampling: SamplingFlags::default(),
    }
}

#[test]
fn analytic_field_beats_an_undertrained_model() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let ckpt = train_small(tmp.path(), "run", &["--iterations", "20"]);
    let oracle = commands::eval(&eval_args(tmp.path(), &cfg, None, "oracle")).unwrap();
    let model = commands::eval(&eval_args(tmp.path(), &cfg, Some(ckpt), "model")).unwrap();
    assert!(
        oracle.wasserstein2 < model.wasserstein2,
        "oracle {} vs undertrained {}",
        oracle.wasserstein2,
        model.wasserstein2
    );

    let csv = std::fs::read_to_string(tmp.path().join("oracle/metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "scope,wasserstein2,ambiguity_fraction,flow_overlap,flow_distance");
    assert_eq!(rows.len(), 1 + 2 + 1);
    assert!(rows[1].starts_with("class0,") && rows[2].starts_with("class1,") && rows[3].starts_with("all,"));
    assert!(rows.iter().skip(1).all(|r| r.split(',').count() == 5));
    let kv = std::fs::read_to_string(tmp.path().join("oracle/metrics.txt")).unwrap();
    assert!(kv.lines().any(|l| l.starts_with("wasserstein2=")));
}

#[test]
fn eval_rejects_mismatched_dimension() {
    let tmp = TempDir::new().unwrap();
    let ckpt = train_small(tmp.path(), "run", &["--iterations", "2"]);
    let three_d = r#"
[dataset]
kind = "mixture"
n_per_class = 10
seed = 0
spec = { classes = [[{ mean = [0.0, 0.0, 1.0], variance = [1.0, 1.0, 1.0], weight = 1.0 }], [{ mean = [0.0, 0.0, -1.0], variance = [1.0, 1.0, 1.0], weight = 1.0 }]] }
"#;
    let cfg = write_config(tmp.path(), "3d.toml", three_d);
    let o = deltafm(
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--output-dir", "e"],
        tmp.path(),
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("dimension mismatch"), "{}", stderr(&o));
}

#[test]
fn eval_needs_an_analytic_dataset() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("d.csv"), "class,dim0,dim1\n0,1,2\n1,3,4\n").unwrap();
    let cfg = write_config(tmp.path(), "csv.toml", "[dataset]\nkind = \"csv\"\npath = \"d.csv\"\n");
    let o = deltafm(&["eval", "--oracle", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_sweep_values_are_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = deltafm(&["sweep", "--axis", "lambda", "--values", ""], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = deltafm(&["sweep", "--axis", "nfe", "--values", ",,"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn nfe_sweep_improves_or_saturates() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "nfe.toml",
        &SMALL.replace("iterations = 300", "iterations = 3000").replace("batch_size = 64", "batch_size = 256"),
    );
    let args = SweepArgs {
        overrides: Overrides {
            config: Some(cfg),
            output_dir: Some(tmp.path().join("sweep")),
            ..Overrides::default()
        },
        axis: SweepAxis::Nfe,
        values: None,
        out: None,
        quiet: true,
    };
    let rows: Vec<SweepRow> = commands::sweep(&args).unwrap();
    let values: Vec<&str> = rows.iter().map(|r| r.value.as_str()).collect();
    assert_eq!(values, ["10", "25", "50", "100", "250"]);
    let w2: Vec<f64> = rows.iter().map(|r| r.report.wasserstein2).collect();
    // Each step may not be worse than the best coarser setting by more than sampling noise.
    let allowance = 0.05;
    for i in 1..w2.len() {
        let best = w2[..i].iter().copied().fold(f64::INFINITY, f64::min);
        assert!(w2[i] <= best + allowance, "nfe trend broken: {w2:?}");
    }
    assert!(w2[4] <= w2[0] + allowance / 5.0, "{w2:?}");
    let csv = std::fs::read_to_string(tmp.path().join("sweep/sweep_nfe.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("axis,value,wasserstein2,"));
}

#[test]
fn oracle_check_verdicts() {
    let tmp = TempDir::new().unwrap();
    let fast = ["oracle-check", "--probes", "6", "--positive-samples", "20000"];
    let o = deltafm(&fast, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().any(|l| l == "PASS"));
    assert!(stdout(&o).contains("max relative error"));

    let o = deltafm(&[&fast[..], &["--lambdas", "0"]].concat(), tmp.path());
    assert_eq!(o.status.code(), Some(0));

    let o = deltafm(&[&fast[..], &["--corrupt-shift"]].concat(), tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).lines().any(|l| l == "FAIL"));
}

fn color_groups(svg: &str) -> std::collections::BTreeSet<String> {
    svg.lines()
        .filter(|l| l.contains(r#"class="traj""#))
        .filter_map(|l| l.split("stroke=\"").nth(1)?.split('"').next().map(str::to_string))
        .collect()
}

#[test]
fn plot_commands_render_svg() {
    let tmp = TempDir::new().unwrap();
    let fm = train_small(tmp.path(), "fm", &["--objective", "fm", "--iterations", "50"]);
    let dfm = train_small(tmp.path(), "dfm", &["--iterations", "50"]);
    for (ck, name) in [(&fm, "fm"), (&dfm, "dfm")] {
        let traj = format!("{name}.csv");
        let o = deltafm(
            &["sample", "--checkpoint", ck.to_str().unwrap(), "--n", "8", "--out", "s.csv", "--trajectories", &traj],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = deltafm(
        &["plot", "--kind", "flows", "--input", "fm_class0.csv", "--input", "fm_class1.csv", "--out", "flows.svg"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(tmp.path().join("flows.svg")).unwrap();
    assert_eq!(color_groups(&svg).len(), 2);

    std::fs::write(tmp.path().join("data.csv"), "class,dim0,dim1\n0,-1,0\n0,-1.2,0.1\n1,1,0\n1,0.9,-0.2\n").unwrap();
    let o = deltafm(
        &[
            "plot", "--kind", "panels", "--input", "fm_class0.csv", "--input", "fm_class1.csv", "--delta-fm",
            "dfm_class0.csv", "--delta-fm", "dfm_class1.csv", "--data", "data.csv", "--out", "panels.svg",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(tmp.path().join("panels.svg")).unwrap();
    assert!(svg.find(r#"<g id="fm">"#).unwrap() < svg.find(r#"<g id="delta-fm">"#).unwrap());

    let o = deltafm(
        &["plot", "--kind", "loss-curves", "--input", "fm/loss.csv", "--input", "dfm/loss.csv", "--out", "loss.svg"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(tmp.path().join("loss.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 6);
    assert!(svg.contains(r#"data-run="dfm""#));

    let o = deltafm(&["plot", "--kind", "denoise-strip", "--input", "dfm_class1.csv", "--out", "strip.svg"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));

    std::fs::write(tmp.path().join("data3.csv"), "class,dim0,dim1,dim2\n0,1,2,3\n1,3,4,5\n").unwrap();
    let o = deltafm(
        &["plot", "--kind", "flows", "--input", "fm_class0.csv", "--data", "data3.csv", "--out", "bad.svg"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unsupported dimension"), "{}", stderr(&o));
}

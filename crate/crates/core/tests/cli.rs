use std::path::Path;
use std::process::{Command, Output};

use qckit::compression::relative_error;
use qckit::data::FieldSeries;

fn qckit(args: &[&str]) -> Output {
    qckit_env(args, &[])
}

fn qckit_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qckit"));
    cmd.args(args).env_remove("QCKIT_CACHE_DIR").env("RUST_LOG", "info");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn value(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing in:\n{stdout}"))
        .trim()
        .parse()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = ok(&qckit(&["gen-data", "--kind", "pulse2d", "--grid", "32", "--T", "64", "--out", s(d)]));
        assert!(out.contains("N = 1024"), "{out}");
    }
    let series = FieldSeries::load(a.join("series.qcser")).unwrap();
    assert_eq!((series.samples(), series.channels(), series.points()), (64, 1, 1024));
    for f in ["mesh.qcmesh", "series.qcser", "gen.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let w = dir.path().join("w");
    ok(&qckit(&["gen-data", "--kind", "wake2d", "--points", "1000", "--T", "16", "--out", s(&w)]));
    assert_eq!(FieldSeries::load(w.join("series.qcser")).unwrap().points(), 1000);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(qckit(&["gen-data", "--kind", "nope", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(qckit(&["gen-data", "--kind", "pulse2d", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(qckit(&["frobnicate"]).status.code(), Some(2));
    let missing = dir.path().join("missing.qcmesh");
    assert_eq!(
        qckit(&["build-cache", "--mesh-in", s(&missing), "--alpha", "0.1", "--out", "x"]).status.code(),
        Some(1)
    );
}

#[test]
fn build_cache_and_reuse_in_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cache = dir.path().join("cache");
    ok(&qckit(&["gen-data", "--kind", "pulse2d", "--grid", "32", "--T", "8", "--out", s(&data)]));
    let mesh = data.join("mesh.qcmesh");
    let map = dir.path().join("m.qcmap");
    let out = ok(&qckit(&["build-cache", "--mesh-in", s(&mesh), "--target-s", "12", "--out", s(&map)]));
    let mean_s: f64 = out
        .lines()
        .find_map(|l| l.split("mean S = ").nth(1))
        .and_then(|r| r.split(',').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((9.6..=14.4).contains(&mean_s), "{out}");
    assert!(map.exists());
    let zero = qckit(&["build-cache", "--mesh-in", s(&mesh), "--alpha", "0.0", "--out", s(&map)]);
    assert_eq!(zero.status.code(), Some(2));

    // Alpha of the first QuadConv layer of the default pool-style model on this grid.
    let alpha = (1.5f64 / 31.0).to_string();
    let env = [("QCKIT_CACHE_DIR", s(&cache))];
    let first = ok(&qckit_env(&["build-cache", "--mesh-in", s(&mesh), "--alpha", &alpha, "--out", s(&map)], &env));
    assert!(value(&first, "distance_evals") > 0.0);
    let second = ok(&qckit_env(&["build-cache", "--mesh-in", s(&mesh), "--alpha", &alpha, "--out", s(&map)], &env));
    assert_eq!(value(&second, "distance_evals"), 0.0);

    let run = dir.path().join("run");
    let out = qckit_env(
        &["train", "--data", s(&data), "--out", s(&run), "--set", "train.max_steps=1", "--set", "model.latent_dim=4"],
        &env,
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("cache hit"));
    let echoed = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echoed.contains("model.latent_dim = 4"));
    assert!(echoed.contains("mesh.cache_dir = "));
}

#[test]
fn train_eval_compress_decompress() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&qckit(&["gen-data", "--kind", "pulse2d", "--grid", "10", "--T", "12", "--onset", "0", "--out", s(&data)]));
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# tiny model\nmodel.channels = 3\nmodel.latent_dim = 10\ntrain.max_steps = 0\n",
    )
    .unwrap();
    let untrained = dir.path().join("untrained");
    ok(&qckit(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&untrained)]));
    let ckpt = untrained.join("checkpoint.qcckpt");
    let out = ok(&qckit(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--pod"]));
    assert!(value(&out, "relative_error").is_finite());
    assert!(value(&out, "max_error").is_finite());
    assert_eq!(value(&out, "compression_ratio"), 10.0);
    assert!(value(&out, "pod_relative_error").is_finite());

    let run = dir.path().join("run");
    ok(&qckit(&[
        "--threads", "1", "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--set", "train.max_steps=20",
        "--set", "train.lr=0.01",
    ]));
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,split,loss,rel_err,max_err\n"));
    let ckpt = run.join("checkpoint.qcckpt");
    let eval = ok(&qckit(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]));
    let codes = dir.path().join("z.qclat");
    let recon = dir.path().join("r.qcser");
    ok(&qckit(&["compress", "--checkpoint", s(&ckpt), "--in", s(&data.join("series.qcser")), "--out", s(&codes)]));
    ok(&qckit(&["decompress", "--checkpoint", s(&ckpt), "--in", s(&codes), "--out", s(&recon)]));
    let truth = FieldSeries::load(data.join("series.qcser")).unwrap();
    let back = FieldSeries::load(&recon).unwrap();
    assert_eq!((back.samples(), back.channels(), back.points(), back.dt()), (12, 1, 100, truth.dt()));
    let e = relative_error(&back, &truth).unwrap();
    assert!((e - value(&eval, "relative_error")).abs() < 1e-6);

    let resumed = dir.path().join("resumed");
    ok(&qckit(&[
        "train", "--resume", s(&ckpt), "--data", s(&data), "--out", s(&resumed), "--set", "train.max_steps=25",
    ]));
    let csv = std::fs::read_to_string(resumed.join("metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("20,"));
}

#[test]
fn divergence_exits_3_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&qckit(&["gen-data", "--kind", "pulse2d", "--grid", "8", "--T", "6", "--out", s(&data)]));
    let run = dir.path().join("run");
    let out = qckit(&[
        "train", "--data", s(&data), "--out", s(&run), "--set", "model.channels=2", "--set", "model.latent_dim=2", "--set",
        "train.lr=1e300", "--set", "train.max_steps=50",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("last good state"));
    let ck = qckit::compression::Checkpoint::load(run.join("checkpoint.qcckpt")).unwrap();
    assert!(ck.params.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn lowpass_demo_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("lp.csv");
    let out = ok(&qckit(&["lowpass-demo", "--n", "128", "--sampling", "nonuniform", "--seed", "11", "--n-out", "41", "--out", s(&csv)]));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "y,analytic,naive_discrete,continuous_kernel,quadconv");
    assert_eq!(lines.count(), 41);
    let err = |name: &str| -> f64 {
        out.lines()
            .find_map(|l| l.trim().strip_prefix(name))
            .unwrap()
            .trim()
            .parse()
            .unwrap()
    };
    let (naive, ck, quad) = (err("naive_discrete"), err("continuous_kernel"), err("quadconv"));
    assert!(quad < ck && quad < naive, "{out}");
}

#[test]
fn bench_sweep_counts_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let cache = dir.path().join("cache");
    let args = [
        "bench", "--grid", "48", "--alpha-sweep", "0.1,0.2", "--in-channels", "1", "--out-channels", "1", "--repeats", "1",
        "--cache-dir", s(&cache), "--out", s(&csv),
    ];
    ok(&qckit(&args));
    let rows = |p: &Path| -> Vec<Vec<String>> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(String::from).collect())
            .collect()
    };
    let first = rows(&csv);
    let evals: Vec<f64> = first.iter().map(|r| r[3].parse().unwrap()).collect();
    let ratio = evals[1] / evals[0];
    assert!((3.0..=5.0).contains(&ratio), "kernel_evals ratio {ratio}");
    assert!(first.iter().all(|r| r[8] == "ok" && r[7] == "false"));
    ok(&qckit(&args));
    let second = rows(&csv);
    assert!(second.iter().all(|r| r[5] == "0" && r[7] == "true" && r[4] == "0"));
}

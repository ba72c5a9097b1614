use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lorafuse_core::backbone::BackboneConfig;
use lorafuse_core::{LoraAdapter, LoraConfig, Tensor};
use serde_json::Value;

fn lorafuse(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lorafuse"));
    cmd.args(args).env_remove("LORAFUSE_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lorafuse(args, &[]);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// Tiny backbone plus blob, grating and landmark manifests.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Self { dir };
        ok(&[
            "backbone-init", "--image-size", "8", "--patch-size", "4", "--hidden-dim", "8", "--num-layers", "1",
            "--num-heads", "2", "--mlp-dim", "16", "--seed", "3", "--out", s(&f.path("bb")),
        ]);
        ok(&["synth", "--pair", "dissimilar", "--samples", "40", "--image-size", "8", "--out", s(&f.path("data"))]);
        ok(&["synth", "--family", "landmarks", "--samples", "20", "--out", s(&f.path("data"))]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn backbone(&self) -> String {
        s(&self.path("bb/backbone.ltns")).to_owned()
    }

    fn manifest(&self, task: &str) -> String {
        s(&self.path(&format!("data/{task}.jsonl"))).to_owned()
    }

    fn train(&self, task: &str, extra: &[&str], out: &str) -> Output {
        let (bb, m, o) = (self.backbone(), self.manifest(task), s(&self.path(out)).to_owned());
        let mut args = vec![
            "train", "--manifest", &m, "--backbone", &bb, "--rank", "2", "--head-hidden", "8", "--max-epochs", "2",
            "--batch-size", "8", "--out", &o,
        ];
        args.extend_from_slice(extra);
        lorafuse(&args, &[])
    }
}

#[test]
fn head_only_training_writes_no_adapter_and_reruns_identically() {
    let f = Fixture::new();
    for out in ["a", "b"] {
        let o = f.train("blobs", &["--mode", "head-only", "--seed", "5"], out);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(!f.path(out).join("adapter.ltns").exists());
        assert!(f.path(out).join("head.ltns").exists());
    }
    let a = std::fs::read(f.path("a/report.json")).unwrap();
    let b = std::fs::read(f.path("b/report.json")).unwrap();
    assert_eq!(a, b);
    assert!(f.path("a/timing.json").exists());
    let cfg = read_json(f.path("a/resolved_config.json"));
    assert_eq!(cfg["mode"], "head_only");
    assert_eq!(cfg["seed"], 5);
}

#[test]
fn lora_training_writes_adapter_and_report() {
    let f = Fixture::new();
    let o = f.train("orientation", &[], "r");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let adapter = LoraAdapter::load(f.path("r/adapter.ltns")).unwrap();
    assert_eq!(adapter.rank(), 2);
    let report = read_json(f.path("r/report.json"));
    assert!(report.get("wall_time_secs").is_none());
    assert_eq!(
        report["trainable_params"].as_u64().unwrap(),
        report["adapter_params"].as_u64().unwrap() + report["head_params"].as_u64().unwrap()
    );
}

#[test]
fn missing_manifest_is_a_data_error_naming_the_path() {
    let f = Fixture::new();
    let bb = f.backbone();
    let missing = s(&f.path("nope.jsonl")).to_owned();
    let o = lorafuse(
        &["train", "--manifest", &missing, "--backbone", &bb, "--out", s(&f.path("x"))],
        &[],
    );
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.jsonl"));
}

#[test]
fn bad_config_values_exit_2() {
    let f = Fixture::new();
    let o = f.train("blobs", &["--patience", "0"], "x");
    assert_eq!(code(&o), 2);
    let o = f.train("blobs", &["--mode", "sideways"], "x");
    assert_eq!(code(&o), 2);
}

#[test]
fn runaway_learning_rate_exits_4() {
    let f = Fixture::new();
    let (bb, m) = (f.backbone(), f.manifest("blobs"));
    let o = lorafuse(
        &[
            "train", "--manifest", &m, "--backbone", &bb, "--learning-rate", "1e38", "--max-epochs", "20", "--rank", "2",
            "--out", s(&f.path("x")),
        ],
        &[],
    );
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

fn random_adapter(rank: usize, d: usize, name: &str, seed: u64) -> LoraAdapter {
    let cfg = BackboneConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        hidden_dim: d,
        num_layers: 1,
        num_heads: 2,
        mlp_dim: 8,
        pooler: Default::default(),
    };
    let mut a = LoraAdapter::init(&LoraConfig::new(rank), &cfg, name, seed).unwrap();
    for f in a.factors.values_mut() {
        f.b = Tensor::from_fn(f.b.shape().to_vec(), |i| ((i * 7 + seed as usize) % 11) as f32 / 11.0 - 0.5);
    }
    a
}

#[test]
fn merge_verify_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    random_adapter(16, 64, "a", 1).save(p("a16.ltns")).unwrap();
    random_adapter(64, 64, "b", 2).save(p("b64.ltns")).unwrap();

    let out = ok(&["merge", "--adapter", s(&p("a16.ltns")), "--adapter", s(&p("b64.ltns")), "--out", s(&p("m"))]);
    assert!(out.contains("rank: 80"), "{out}");
    assert!(out.contains("linear ineligible, concat eligible"));
    assert_eq!(LoraAdapter::load(p("m/adapter.ltns")).unwrap().rank(), 80);

    let out = ok(&[
        "verify", "--merged", s(&p("m/adapter.ltns")), "--adapter", s(&p("a16.ltns")), "--adapter", s(&p("b64.ltns")),
    ]);
    assert!(out.contains("max delta discrepancy"));

    // Weighted merge checks against the same weights only.
    ok(&[
        "merge", "--adapter", s(&p("a16.ltns")), "--adapter", s(&p("b64.ltns")), "--weights", "0.25,2", "--out",
        s(&p("w")),
    ]);
    let o = lorafuse(
        &["verify", "--merged", s(&p("w/adapter.ltns")), "--adapter", s(&p("a16.ltns")), "--adapter", s(&p("b64.ltns"))],
        &[],
    );
    assert_eq!(code(&o), 7);
    ok(&[
        "verify", "--merged", s(&p("w/adapter.ltns")), "--adapter", s(&p("a16.ltns")), "--adapter", s(&p("b64.ltns")),
        "--weights", "0.25,2", "--out", s(&p("v")),
    ]);
    assert!(p("v/verify.json").exists());

    let o = lorafuse(
        &["merge", "--strategy", "linear", "--adapter", s(&p("a16.ltns")), "--adapter", s(&p("b64.ltns")), "--out", s(&p("l"))],
        &[],
    );
    assert_eq!(code(&o), 5);
    assert!(!p("l/adapter.ltns").exists());
}

#[test]
fn single_adapter_merge_reproduces_its_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    random_adapter(3, 8, "solo", 4).save(p("a.ltns")).unwrap();
    ok(&["merge", "--adapter", s(&p("a.ltns")), "--out", s(&p("m"))]);
    ok(&["verify", "--merged", s(&p("m/adapter.ltns")), "--adapter", s(&p("a.ltns")), "--tolerance", "1e-6"]);
}

#[test]
fn evaluate_prints_task_columns_and_checks_heads() {
    let f = Fixture::new();
    for (task, out) in [("blobs", "rb"), ("orientation", "ro"), ("landmarks", "rl")] {
        assert_eq!(code(&f.train(task, &[], out)), 0);
    }
    let m = s(&f.path("merged")).to_owned();
    ok(&["merge", "--adapter", s(&f.path("rb/adapter.ltns")), "--adapter", s(&f.path("rl/adapter.ltns")), "--out", &m]);
    let bundle = s(&f.path("bundle")).to_owned();
    ok(&[
        "bundle", "--backbone", &f.backbone(), "--adapter", &format!("{m}/adapter.ltns"), "--head",
        s(&f.path("rb/head.ltns")), "--head", s(&f.path("rl/head.ltns")), "--out", &bundle,
    ]);
    let ev = s(&f.path("ev")).to_owned();
    let out = ok(&["evaluate", "--bundle", &bundle, "--manifest", &f.manifest("blobs"), "--out", &ev]);
    assert!(out.contains("Acc") && out.contains("F1") && !out.contains("NME") && !out.contains("RMSE"));
    let metrics = read_json(f.path("ev/metrics.json"));
    assert_eq!(metrics.as_array().unwrap().len(), 2);

    let out = ok(&["evaluate", "--bundle", &bundle, "--manifest", &f.manifest("landmarks"), "--out", &ev]);
    assert!(out.contains("NME") && !out.contains("Acc"));

    let o = lorafuse(&["evaluate", "--bundle", &bundle, "--manifest", &f.manifest("orientation"), "--out", &ev], &[]);
    assert_eq!(code(&o), 6);
    let o = lorafuse(
        &["evaluate", "--bundle", &bundle, "--manifest", &f.manifest("blobs"), "--task", "landmarks", "--out", &ev],
        &[],
    );
    assert_eq!(code(&o), 6);

    // A manifest whose records all sit in train has an empty test split.
    let text = std::fs::read_to_string(f.manifest("blobs")).unwrap();
    let train_only = text.replace("\"split\":\"test\"", "\"split\":\"train\"");
    std::fs::write(f.path("train_only.jsonl"), train_only).unwrap();
    let o = lorafuse(
        &["evaluate", "--bundle", &bundle, "--manifest", s(&f.path("train_only.jsonl")), "--out", &ev],
        &[],
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn matrix_modes() {
    let f = Fixture::new();
    for task in ["blobs", "orientation", "landmarks"] {
        assert_eq!(code(&f.train(task, &[], &format!("runs/{task}-r2"))), 0);
        assert_eq!(code(&f.train(task, &["--mode", "head-only"], &format!("runs/{task}-head"))), 0);
    }
    let manifests: Vec<String> = ["blobs", "orientation", "landmarks"].iter().map(|t| f.manifest(t)).collect();
    let run = |mode: &str, extra: &[&str], out: &str| {
        let bb = f.backbone();
        let runs = s(&f.path("runs")).to_owned();
        let o = s(&f.path(out)).to_owned();
        let mut args = vec!["matrix", "--mode", mode, "--backbone", &bb, "--runs-dir", &runs, "--out", &o];
        for m in &manifests {
            args.extend(["--manifest", m.as_str()]);
        }
        args.extend_from_slice(extra);
        let text = ok(&args);
        (text, read_json(Path::new(&o).join("grid.json")))
    };

    let (text, json) = run("pairs", &[], "pairs");
    assert_eq!(json["mode"], "pairs");
    assert_eq!(json["metadata"]["rows"], 6);
    assert!(text.contains("Merged adapters on blobs") && text.contains("blobs+orientation"));
    for cell in json["cells"].as_array().unwrap() {
        assert!(cell["value"].as_f64().unwrap().is_finite());
    }

    let (text, json) = run("single", &[], "single");
    assert!(text.contains("Fine tuning head") && text.contains("LORA-2"));
    assert!(json["cells"].as_array().unwrap().iter().any(|c| c["rank"].is_null()));

    let (text, json) = run("triples", &["--base", "blobs,orientation"], "triples");
    assert_eq!(json["metadata"]["rows"], 3);
    assert!(text.contains("blobs+orientation+landmarks"));

    let bb = f.backbone();
    let o = lorafuse(
        &["matrix", "--mode", "triples", "--backbone", &bb, "--runs-dir", s(&f.path("runs")), "--out", s(&f.path("t"))],
        &[],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_precedence_flag_config_env_default() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "samples = 10\n[synth]\nseed = 7\n[train]\nseed = 99\n").unwrap();
    let seed_of = |args: &[&str], env: &[(&str, &str)]| {
        let out = dir.path().join("o");
        let mut all = vec!["synth", "--family", "blobs", "--samples", "10", "--out", s(&out)];
        all.extend_from_slice(args);
        let o = lorafuse(&all, env);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        read_json(out.join("resolved_config.json"))["seed"].as_u64().unwrap()
    };
    let c = s(&cfg).to_owned();
    assert_eq!(seed_of(&[], &[]), 0);
    assert_eq!(seed_of(&[], &[("LORAFUSE_SEED", "11")]), 11);
    assert_eq!(seed_of(&["--config", &c], &[("LORAFUSE_SEED", "11")]), 7);
    assert_eq!(seed_of(&["--config", &c, "--seed", "3"], &[("LORAFUSE_SEED", "11")]), 3);
    let o = lorafuse(&["synth", "--family", "blobs", "--out", s(&dir.path().join("o"))], &[("LORAFUSE_SEED", "x")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_is_overridden_by_flags_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "family = \"gratings\"\nsamples = 12\nclasses = 3\n").unwrap();
    let out = dir.path().join("o");
    let stdout = ok(&["synth", "--config", s(&cfg), "--samples", "20", "--out", s(&out)]);
    assert!(stdout.contains("resolved config"));
    let resolved = read_json(out.join("resolved_config.json"));
    assert_eq!(resolved["samples"], 20);
    assert_eq!(resolved["classes"], 3);
    let lines = std::fs::read_to_string(out.join("gratings.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 21);

    std::fs::write(&cfg, "famly = \"gratings\"\n").unwrap();
    let o = lorafuse(&["synth", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for o in ["a", "b"] {
        ok(&["synth", "--pair", "similar", "--samples", "16", "--seed", "9", "--out", s(&dir.path().join(o))]);
    }
    for t in ["orientation.jsonl", "frequency.jsonl"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(t)).unwrap(),
            std::fs::read(dir.path().join("b").join(t)).unwrap()
        );
    }
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kban_core::checkpoint::Checkpoint;

const SMALL: &[&str] = &[
    "--set",
    "synth.train_scenes=8",
    "--set",
    "synth.val_scenes=4",
    "--set",
    "synth.test_scenes=4",
    "--set",
    "model.dim=16",
    "--set",
    "model.heads=2",
    "--set",
    "model.appearance_dim=32",
    "--set",
    "model.sc_hidden=16",
];

fn kban(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kban")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = kban(args);
    assert!(
        out.status.success(),
        "kban {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    kban(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn with_small<'a>(args: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(SMALL).chain(extra).copied().collect()
}

/// Generated data plus a short training run in `dir`.
fn trained(dir: &Path, iterations: usize) -> (String, String) {
    let data = dir.join("data");
    let run = dir.join("run");
    ok(&with_small(&["generate", "--out", s(&data)], &[]));
    let iters = format!("train.iterations={iterations}");
    ok(&with_small(
        &["train", "--out", s(&run)],
        &["--set", &iters, "--set", "train.log_interval=5", "--set", "model.enc_layers=1", "--set", "model.dec_layers=1"],
    ));
    (
        run.join("final.ckpt").to_string_lossy().into_owned(),
        data.join("test.jsonl").to_string_lossy().into_owned(),
    )
}

fn lines(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn generate_writes_configured_counts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&with_small(&["generate", "--seed", "5", "--out", s(&a)], &[]));
    ok(&with_small(&["generate", "--seed", "5", "--out", s(&b)], &[]));
    assert_eq!(lines(&a.join("train.jsonl")), 8);
    assert_eq!(lines(&a.join("val.jsonl")), 4);
    assert_eq!(lines(&a.join("test.jsonl")), 4);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "kb.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    ok(&with_small(&["generate", "--seed", "6", "--out", s(&c)], &[]));
    assert_ne!(fs::read(a.join("train.jsonl")).unwrap(), fs::read(c.join("train.jsonl")).unwrap());
}

#[test]
fn invalid_config_exits_2_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&["generate", "--out", s(&out), "--set", "synth.nope=1"]), 2);
    assert_eq!(code(&["train", "--out", s(&out), "--set", "model.heads=3"]), 2);
    assert_eq!(code(&["generate", "--out", s(&out), "--set", "synth.num_verbs=abc"]), 2);
    assert_eq!(code(&["generate", "--out", s(&out), "--set", "missing_equals"]), 2);
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(code(&["generate", "--out", s(&out), "--config", s(&cfg)]), 2);
    assert!(!out.exists());
}

#[test]
fn data_problems_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = trained(dir.path(), 5);
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(code(&["eval", "--out", s(&out), "--checkpoint", &ckpt, "--scenes", s(&missing)]), 3);
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let r = kban(&["eval", "--out", s(&out), "--checkpoint", &ckpt, "--scenes", s(&empty)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("empty evaluation"));
    let garbage = dir.path().join("garbage.jsonl");
    fs::write(&garbage, "{\"image_width\": 1}\n").unwrap();
    assert_eq!(code(&["infer", "--out", s(&out), "--checkpoint", &ckpt, "--scenes", s(&garbage)]), 3);
    assert!(!out.exists());
}

#[test]
fn training_logs_one_row_per_interval_and_resumes_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = trained(dir.path(), 20);
    let run = dir.path().join("run");
    let metrics = run.join("metrics.csv");
    let text = fs::read_to_string(&metrics).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next(), Some("iteration,loss,interactiveness_loss,s_c_loss,s_r_loss,lr"));
    let its: Vec<&str> = rows.map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(its, ["5", "10", "15", "20"]);
    assert!(run.join("best.ckpt").exists() && run.join("config.json").exists());

    ok(&with_small(
        &["train", "--out", s(&run), "--resume", &ckpt],
        &["--set", "train.iterations=30", "--set", "train.log_interval=5", "--set", "model.enc_layers=1", "--set", "model.dec_layers=1"],
    ));
    let its: Vec<String> = fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .skip(1)
        .map(|r| r.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(its, ["5", "10", "15", "20", "25", "30"]);
    assert_eq!(Checkpoint::load(&run.join("final.ckpt")).unwrap().iteration, 30);
}

#[test]
fn resume_rejects_mismatched_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = trained(dir.path(), 5);
    let out = dir.path().join("again");
    let r = kban(&with_small(
        &["train", "--out", s(&out), "--resume", &ckpt],
        &["--set", "train.iterations=10", "--set", "model.enc_layers=2", "--set", "model.dec_layers=1"],
    ));
    assert_eq!(r.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, test) = trained(dir.path(), 10);
    let (a, b) = (dir.path().join("ea"), dir.path().join("eb"));
    let ta = ok(&["eval", "--out", s(&a), "--checkpoint", &ckpt, "--scenes", &test]);
    let tb = ok(&["eval", "--out", s(&b), "--checkpoint", &ckpt, "--scenes", &test]);
    assert_eq!(ta, tb);
    assert!(ta.contains("mAP"));
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
}

fn scores(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["score"].as_f64().unwrap())
        .collect()
}

#[test]
fn infer_thresholds_filter_and_output_is_sorted() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, test) = trained(dir.path(), 5);
    let (all, none) = (dir.path().join("all"), dir.path().join("none"));
    ok(&[
        "infer", "--out", s(&all), "--checkpoint", &ckpt, "--scenes", &test,
        "--t-human", "0", "--t-object", "0", "--suppression-threshold", "0",
    ]);
    ok(&["infer", "--out", s(&none), "--checkpoint", &ckpt, "--scenes", &test, "--suppression-threshold", "1"]);
    let kept = scores(&all.join("detections.jsonl"));
    assert!(!kept.is_empty());
    assert!(kept.windows(2).all(|w| w[0] >= w[1]), "scores not descending");
    assert!(scores(&none.join("detections.jsonl")).is_empty());
    assert_eq!(
        code(&["infer", "--out", s(&none), "--checkpoint", &ckpt, "--scenes", &test, "--t-human", "-0.1"]),
        2
    );
}

#[test]
fn attention_dump_writes_one_file_per_decoder_layer() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, test) = trained(dir.path(), 5);
    let first: serde_json::Value = serde_json::from_str(fs::read_to_string(&test).unwrap().lines().next().unwrap()).unwrap();
    let inst = first["instances"].as_array().unwrap();
    let h = inst.iter().find(|i| i["is_human"] == true).unwrap()["id"].as_u64().unwrap();
    let o = inst.iter().find(|i| i["is_human"] == false).unwrap()["id"].as_u64().unwrap();
    let out = dir.path().join("att");
    let pair = format!("{h}:{o}");
    ok(&["infer", "--out", s(&out), "--checkpoint", &ckpt, "--scenes", &test, "--dump-attention", &pair]);
    let file = out.join(format!("attention_s0_h{h}_o{o}_layer0.csv"));
    let text = fs::read_to_string(&file).unwrap();
    assert!(text.starts_with("layer,head,verb,instance_id,weight"));
    assert!(!out.join(format!("attention_s0_h{h}_o{o}_layer1.csv")).exists());
    // weights of one query row sum to one
    let mut sums = std::collections::BTreeMap::<(String, String), f64>::new();
    for row in text.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        *sums.entry((f[1].into(), f[2].into())).or_default() += f[4].parse::<f64>().unwrap();
    }
    assert!(!sums.is_empty() && sums.values().all(|v| (v - 1.0).abs() < 1e-9));

    let bad = dir.path().join("bad");
    assert_eq!(code(&["infer", "--out", s(&bad), "--checkpoint", &ckpt, "--scenes", &test, "--dump-attention", "x:y"]), 2);
    assert_eq!(code(&["infer", "--out", s(&bad), "--checkpoint", &ckpt, "--scenes", &test, "--dump-attention", "9999:0"]), 3);
    assert!(!bad.exists());
}

fn param_count(report: &str) -> usize {
    report
        .lines()
        .find_map(|l| l.strip_prefix("parameters"))
        .unwrap()
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn inspect_lists_tensors_and_rejects_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = trained(dir.path(), 5);
    let report = ok(&["inspect", &ckpt]);
    assert!(report.contains("enc0.") && report.contains("dec0.") && report.contains("iteration   5"));
    let model = Checkpoint::load(Path::new(&ckpt)).unwrap().model;
    assert_eq!(param_count(&report), model.count_params(""));

    let bytes = fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let r = kban(&["inspect", s(&cut)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("checksum"));
}

#[test]
fn deeper_model_adds_exactly_one_encoder_and_one_decoder_layer() {
    let dir = tempfile::tempdir().unwrap();
    let mut counts = Vec::new();
    for layers in ["1", "2"] {
        let out = dir.path().join(format!("l{layers}"));
        let (e, d) = (format!("model.enc_layers={layers}"), format!("model.dec_layers={layers}"));
        ok(&with_small(
            &["train", "--out", s(&out)],
            &["--set", "train.iterations=1", "--set", "train.log_interval=1", "--set", &e, "--set", &d],
        ));
        let ckpt = out.join("final.ckpt");
        counts.push((param_count(&ok(&["inspect", s(&ckpt)])), Checkpoint::load(&ckpt).unwrap().model));
    }
    let deep = &counts[1].1;
    let extra = deep.count_params("enc1.") + deep.count_params("dec1.");
    assert!(extra > 0);
    assert_eq!(counts[1].0 - counts[0].0, extra);
}

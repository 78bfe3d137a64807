use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn uotalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uotalign")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|_| panic!("{} missing", path.display()))).unwrap()
}

fn read_csv(path: PathBuf) -> Vec<Vec<f64>> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let data = dir.join("data");
    let mut args = vec!["synth", "--out", s(&data)];
    args.extend_from_slice(extra);
    assert_eq!(code(&uotalign(&args)), 0);
    data.join("manifest.json")
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn solve_one_by_one() {
    let dir = tempfile::tempdir().unwrap();
    let cost = dir.path().join("c.csv");
    fs::write(&cost, "0.5\n").unwrap();
    let out = dir.path().join("o");
    let o =
        uotalign(&["solve", "--cost", s(&cost), "--rho1", "inf", "--rho2", "inf", "--lambda", "0.1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("coupling.csv")).unwrap(), "1.0\n");
    assert!(out.join("coupling.emb").exists());
    let report = json(out.join("solve.json"));
    assert_eq!(report["converged"], true);
    assert_eq!(report["rho1"], "inf");
    assert!((report["transported_cost"].as_f64().unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn solve_pathological_lambda_never_crashes() {
    let dir = tempfile::tempdir().unwrap();
    let cost = dir.path().join("c.csv");
    fs::write(&cost, "0,1,0.3\n1,0,0.7\n").unwrap();
    let o = uotalign(&["solve", "--cost", s(&cost), "--lambda", "1e-9", "--out", s(&dir.path().join("o"))]);
    match code(&o) {
        0 => {}
        2 => assert!(String::from_utf8_lossy(&o.stderr).contains("max iterations")),
        c => panic!("exit {c}: {}", String::from_utf8_lossy(&o.stderr)),
    }
}

#[test]
fn solve_reports_outlier_mass_on_emb1_cost() {
    let dir = tempfile::tempdir().unwrap();
    let cmp = dir.path().join("cmp");
    assert_eq!(code(&uotalign(&["compare", "--out", s(&cmp)])), 0);
    let costs = read_csv(cmp.join("cost.csv"));
    let m = uotalign::Mat::from_rows(&costs).unwrap();
    let emb = dir.path().join("cost.emb");
    uotalign::features::write_embedding_file(&emb, &m).unwrap();
    let cols: Vec<String> = (4..20).map(|j| j.to_string()).collect();
    let out = dir.path().join("o");
    let o = uotalign(&[
        "solve",
        "--cost",
        s(&emb),
        "--lambda",
        "0.01",
        "--rho1",
        "inf",
        "--rho2",
        "0.04",
        "--outlier-columns",
        &cols.join(","),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(json(out.join("solve.json"))["outlier_mass"].as_f64().unwrap() < 0.05);
}

#[test]
fn bad_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&uotalign(&["solve", "--cost", s(&missing), "--out", s(&dir.path().join("o"))])), 1);
    let cost = dir.path().join("c.csv");
    fs::write(&cost, "1,2\n3\n").unwrap();
    assert_eq!(code(&uotalign(&["solve", "--cost", s(&cost), "--out", s(&dir.path().join("o"))])), 1);
    fs::write(&cost, "1,2\n3,4\n").unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"classifier": {"lamda": 0.1}}"#).unwrap();
    let o = uotalign(&["solve", "--cost", s(&cost), "--config", s(&config), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
}

#[test]
fn compare_default_and_without_outliers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    assert_eq!(code(&uotalign(&["compare", "--out", s(&out)])), 0);
    let r = json(out.join("compare.json"));
    assert!((r["ot_outlier_mass"].as_f64().unwrap() - 0.8).abs() < 1e-6);
    assert!(r["uot_outlier_mass"].as_f64().unwrap() < 0.05);
    assert_eq!(read_csv(out.join("uot_coupling.csv")).len(), 4);
    assert_eq!(read_csv(out.join("ot_coupling.csv"))[0].len(), 20);

    let out = dir.path().join("b");
    assert_eq!(code(&uotalign(&["compare", "--images", "4", "--out", s(&out)])), 0);
    let (ot, uot) = (read_csv(out.join("ot_coupling.csv")), read_csv(out.join("uot_coupling.csv")));
    for (a, b) in ot.iter().flatten().zip(uot.iter().flatten()) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn train_then_eval_matches_fixture_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), &[]);
    let runs: Vec<PathBuf> = ["r1", "r2"].iter().map(|n| dir.path().join(n)).collect();
    for (run, threads) in runs.iter().zip(["1", "4"]) {
        let o = uotalign(&["train", "--manifest", s(&manifest), "--seed", "0", "--threads", threads, "--out", s(run)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(tree(&runs[0]), tree(&runs[1]));
    for f in ["checkpoint.ckpt", "history.csv", "metrics.json", "config.json"] {
        assert!(runs[0].join(f).exists(), "{f}");
    }
    let o = uotalign(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&runs[0].join("checkpoint.ckpt")),
        "--out",
        s(&runs[0]),
    ]);
    assert_eq!(code(&o), 0);
    let test = json(runs[0].join("eval_test.json"))["accuracy"].as_f64().unwrap();
    // Committed result of the seeded default run.
    assert!((test - 1.0).abs() <= 0.01, "{test}");
    assert_eq!(json(runs[0].join("metrics.json"))["test"]["accuracy"].as_f64().unwrap(), test);
    assert_eq!(fs::read_to_string(runs[0].join("history.csv")).unwrap().lines().count(), 51);
}

#[test]
fn missing_manifest_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let missing = dir.path().join("nope.json");
    for cmd in ["train", "ablate"] {
        assert_eq!(code(&uotalign(&[cmd, "--manifest", s(&missing), "--out", s(&out)])), 1);
        assert!(!out.exists());
    }
}

#[test]
fn ablate_emits_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), &["--per-class", "12"]);
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"train": {"epochs": 5}}"#).unwrap();
    let out = dir.path().join("abl");
    let o = uotalign(&["ablate", "--manifest", s(&manifest), "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("variant,"));
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "no_csc", "no_sc", "no_gpt_init", "no_uot", "no_self_attention"]);
}

#[test]
fn heatmap_has_prompt_by_token_shape() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), &["--tokens", "49", "--per-class", "12"]);
    let run = dir.path().join("run");
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"train": {"epochs": 20}}"#).unwrap();
    let o = uotalign(&["train", "--manifest", s(&manifest), "--config", s(&config), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = json(manifest.clone());
    let sample = m["samples"][0]["id"].as_str().unwrap().to_string();
    let class = m["samples"][0]["class"].as_str().unwrap().to_string();
    let out = dir.path().join("hm");
    let o = uotalign(&[
        "heatmap",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&run.join("checkpoint.ckpt")),
        "--sample",
        &sample,
        "--class",
        &class,
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cs = read_csv(out.join("heatmap_cs.csv"));
    assert_eq!((cs.len(), cs[0].len()), (4, 49));
    for row in &cs {
        assert!((row.iter().sum::<f64>() - 0.25).abs() < 1e-6);
    }
    let report = json(out.join("heatmap.json"));
    let argmax: Vec<u64> =
        report["class_specific"]["argmax_columns"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert!(argmax.iter().any(|&a| a != argmax[0]), "{argmax:?}");
    assert_eq!(read_csv(out.join("heatmap_ds.csv")).len(), 4);

    let o = uotalign(&[
        "heatmap",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&run.join("checkpoint.ckpt")),
        "--sample",
        "no-such-sample",
        "--class",
        &class,
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gen_descriptions_offline_and_with_templates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("offline");
    assert_eq!(code(&uotalign(&["gen-descriptions", "--classes", "cat", "--out", s(&out)])), 0);
    let prompt = fs::read_to_string(out.join("prompts/cat.txt")).unwrap();
    assert!(prompt.contains("Generate 4 descriptions about different key appearance features"));
    assert!(prompt.contains("cat"));
    assert!(!out.join("descriptions").exists());

    let out = dir.path().join("ok");
    let template = r#"cat >/dev/null; printf '{"description": ["a %s", "b", "c", "d"]}' "$CLASS_NAME""#;
    let o = uotalign(&["gen-descriptions", "--classes", "cat,barn owl", "--template", template, "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let owl = json(out.join("descriptions/barn_owl.json"));
    assert_eq!(owl["class_name"], "barn owl");
    assert_eq!(owl["description"][0], "a barn owl");
    let files = uotalign::prompt::load_description_manifest(out.join("descriptions.json")).unwrap();
    assert_eq!(files.len(), 2);

    let out = dir.path().join("bad");
    let template = r#"if [ "$CLASS_NAME" = dog ]; then echo 'not json'; else echo '{"description": ["x"]}'; fi"#;
    let o = uotalign(&["gen-descriptions", "--classes", "cat,dog", "--template", template, "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    let report = json(out.join("generation_report.json"));
    assert_eq!(report["cat"], "ok");
    assert_ne!(report["dog"], "ok");
}

#[test]
fn sweep_covers_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), &["--per-class", "8"]);
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"train": {"epochs": 2}}"#).unwrap();
    let out = dir.path().join("sw");
    let o = uotalign(&[
        "sweep",
        "--manifest",
        s(&manifest),
        "--config",
        s(&config),
        "--rho1",
        "inf,1",
        "--rho2",
        "0.04",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("inf,0.04,"));
}

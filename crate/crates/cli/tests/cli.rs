use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/pan20")
}

fn sspc(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sspc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run-manifest.json")).unwrap()).unwrap()
}

#[test]
fn stats_on_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixture();
    let out = sspc(tmp.path(), &["stats", "--data", fx.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("Problems") && text.contains("Avg words/sent."), "{text}");
    assert!(text.contains("   20 ") && text.contains(" 61 ") && text.contains("3.5 ± 1.8"), "{text}");
    assert!(text.contains("Thank you."), "{text}");

    let m = manifest(tmp.path());
    assert_eq!(m["command"], "stats");
    assert_eq!(m["inputs"].as_object().unwrap().len(), 1);
    let sum = m["inputs"].as_object().unwrap().values().next().unwrap().as_str().unwrap();
    assert_eq!(sum.len(), 64);

    let json = sspc(tmp.path(), &["stats", "--data", fx.to_str().unwrap(), "--format", "json"]);
    let v: Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["n_sentences"], 61);
    assert_eq!(v["duplicate_table"][0][1], 5);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sspc(tmp.path(), &["stats", "--bogus"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
    assert_eq!(code(&sspc(tmp.path(), &["frobnicate"])), 1);
    assert_eq!(code(&sspc(tmp.path(), &[])), 1);
    let fx = fixture();
    let bad_features = sspc(
        tmp.path(),
        &["train", "--data", fx.to_str().unwrap(), "--out", "o", "--features", "bert"],
    );
    assert_eq!(code(&bad_features), 1, "{}", stderr(&bad_features));
    assert_eq!(code(&sspc(tmp.path(), &["--help"])), 0);
    assert_eq!(code(&sspc(tmp.path(), &["--version"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&sspc(tmp.path(), &["stats", "--data", "does-not-exist"])), 2);

    // two solution files with the wrong length, one missing
    let sol = tmp.path().join("sol");
    fs::create_dir(&sol).unwrap();
    for k in 1..=20 {
        let n = match k {
            4 => 3,
            9 => 5,
            _ => fs::read_to_string(fixture().join(format!("truth-problem-{k}.json")))
                .map(|t| serde_json::from_str::<Value>(&t).unwrap()["changes"].as_array().unwrap().len())
                .unwrap(),
        };
        if k != 12 {
            let body = serde_json::json!({ "changes": vec![0; n] });
            fs::write(sol.join(format!("solution-problem-{k}.json")), body.to_string()).unwrap();
        }
    }
    let fx = fixture();
    let out = sspc(tmp.path(), &["evaluate", "--data", fx.to_str().unwrap(), "--solutions", sol.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("solution-problem-4.json: 3 labels, truth has 4"), "{err}");
    assert!(err.contains("solution-problem-9.json: 5 labels, truth has 1"), "{err}");
    assert!(err.contains("solution-problem-12.json: missing"), "{err}");

    let broken = tmp.path().join("broken");
    fs::create_dir(&broken).unwrap();
    fs::write(broken.join("problem-1.txt"), "one\ntwo\n").unwrap();
    fs::write(broken.join("truth-problem-1.json"), "{\"changes\":[1,0]}").unwrap();
    let out = sspc(tmp.path(), &["stats", "--data", broken.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("label length mismatch"), "{}", stderr(&out));
}

#[test]
fn train_predict_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    for (dir, seed) in [("tr", "1"), ("va", "2")] {
        let out = sspc(p, &["gen-synthetic", "--out", dir, "--n-problems", "30", "--seed", seed, "-q"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    fs::write(p.join("model.toml"), "hidden_dim = 4\nbilstm_layers = 1\nmlp_hidden_dims = [8, 4]\n").unwrap();
    fs::write(p.join("train.toml"), "total_steps = 30\nwarmup_steps = 3\nval_every = 10\nbatch_size = 2\n").unwrap();
    let train = [
        "train", "--data", "tr", "--val", "va", "--feature-dim", "32", "--model-config", "model.toml",
        "--train-config", "train.toml", "--steps", "20", "--out", "ck", "--seed", "5", "--format", "json",
    ];
    let out = sspc(p, &train);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps"], 20);
    let err = stderr(&out);
    assert!(err.contains("\"total_steps\":20") && err.contains("\"hidden_dim\":4"), "{err}");

    let m = manifest(&p.join("ck"));
    assert_eq!(m["effective_config"]["train"]["total_steps"], 20);
    assert_eq!(m["effective_config"]["train"]["batch_size"], 2);
    assert_eq!(m["effective_config"]["model"]["input_dim"], 32);
    assert_eq!(m["effective_config"]["model"]["seed"], 5);
    assert_eq!(m["inputs"].as_object().unwrap().len(), 4);
    for f in ["final.ckpt", "best.ckpt", "history.jsonl"] {
        assert!(p.join("ck").join(f).is_file(), "{f}");
    }

    // same argv again: identical parameters
    let again = sspc(p, &train);
    let summary2: Value = serde_json::from_slice(&again.stdout).unwrap();
    assert_eq!(summary["checksum"], summary2["checksum"]);

    let out = sspc(p, &["predict", "--model", "ck/final.ckpt", "--data", "va", "--out", "sol", "-q"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(p.join("sol/solution-problem-1.json").is_file());
    let from_files = sspc(p, &["evaluate", "--data", "va", "--solutions", "sol", "--format", "json"]);
    let in_process = sspc(p, &["evaluate", "--data", "va", "--model", "ck/final.ckpt", "--format", "json"]);
    assert_eq!(code(&from_files), 0, "{}", stderr(&from_files));
    assert_eq!(code(&in_process), 0, "{}", stderr(&in_process));
    let a: Value = serde_json::from_slice(&from_files.stdout).unwrap();
    let b: Value = serde_json::from_slice(&in_process.stdout).unwrap();
    for key in ["macro_f1", "confusion", "per_problem_mean_macro_f1", "n_problems"] {
        assert_eq!(a[0][key], b[0][key], "{key}");
    }

    let resumed = sspc(p, &["train", "--data", "tr", "--val", "va", "--resume", "ck/final.ckpt", "--out", "ck2", "-q"]);
    assert_eq!(code(&resumed), 0, "{}", stderr(&resumed));
}

#[test]
fn gen_synthetic_is_reproducible_from_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let out = sspc(p, &["gen-synthetic", "--out", "a", "--n-problems", "8", "--duplicate-rate", "0.2", "--seed", "3"]);
    assert_eq!(code(&out), 0);
    let argv: Vec<String> = manifest(&p.join("a"))["argv"]
        .as_array()
        .unwrap()
        .iter()
        .skip(1)
        .map(|v| v.as_str().unwrap().replace("\"a\"", "b"))
        .map(|s| if s == "a" { "b".to_string() } else { s })
        .collect();
    let args: Vec<&str> = argv.iter().map(String::as_str).collect();
    assert_eq!(code(&sspc(p, &args)), 0);
    for k in 1..=8 {
        for name in [format!("problem-{k}.txt"), format!("truth-problem-{k}.json")] {
            assert_eq!(fs::read(p.join("a").join(&name)).unwrap(), fs::read(p.join("b").join(&name)).unwrap());
        }
    }
    let bad = sspc(p, &["gen-synthetic", "--out", "c", "--separation", "1.5"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn convert_then_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let lines = [
        r#"{"id": "problem-1", "paragraphs": [["A one.", "A two."], ["B one."]]}"#,
        r#"{"id": "problem-2", "paragraphs": [["C one."], ["D one.", "D two."], ["E one."]]}"#,
    ];
    fs::write(p.join("docs.jsonl"), lines.join("\n")).unwrap();
    let out = sspc(p, &["convert-2024", "--input", "docs.jsonl", "--out", "conv"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(p.join("conv/truth-problem-1.json")).unwrap(), "{\"changes\":[0,1]}");
    assert_eq!(fs::read_to_string(p.join("conv/truth-problem-2.json")).unwrap(), "{\"changes\":[1,0,1]}");
    assert_eq!(fs::read_to_string(p.join("conv/problem-2.txt")).unwrap(), "C one.\nD one.\nD two.\nE one.\n");

    let out = sspc(p, &["baseline", "--data", "conv", "--format", "json"]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let names: Vec<&str> = v.as_array().unwrap().iter().map(|r| r["model"].as_str().unwrap()).collect();
    assert_eq!(names, ["RANDOM", "PREDICT 1", "PREDICT 0"]);
    // predict-1: tp 3, fp 2 gives class-1 F1 6/8, class-0 F1 0
    assert_eq!(v[1]["macro_f1"], 0.375);
    assert_eq!(code(&sspc(p, &["baseline", "--data", "conv", "--kind", "oracle"])), 1);

    fs::write(p.join("bad.json"), "[{\"id\": \"problem-1\"}]").unwrap();
    assert_eq!(code(&sspc(p, &["convert-2024", "--input", "bad.json", "--out", "x"])), 2);
}

#[test]
fn llm_baseline_unreachable_is_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let fx = fixture();
    let endpoint = format!("http://127.0.0.1:{port}/v1/chat/completions");
    let out = Command::new(env!("CARGO_BIN_EXE_sspc"))
        .args(["llm-baseline", "--data", fx.to_str().unwrap(), "--endpoint", &endpoint])
        .args(["--api-key-name", "cli_test", "--retries", "0", "--rpm", "6000", "--cache-dir", "cache"])
        .env("SSPC_API_KEY_CLI_TEST", "k")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("unreachable"), "{}", stderr(&out));
    let m = manifest(tmp.path());
    assert_eq!(m["effective_config"]["api_key_env"], "SSPC_API_KEY_CLI_TEST");
}

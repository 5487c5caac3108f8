//! The `m3cot` binary end to end: exit codes, artifacts, dry runs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use m3cot_core::curation::{Decision, OptionProvenance};
use m3cot_toolkit::dataset::load_dataset;
use m3cot_toolkit::service::CurationService;
use serde_json::{json, Value};
use tempfile::TempDir;

fn m3cot(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m3cot")).args(args).current_dir(cwd).env_remove("RUST_LOG").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Eight items over two frames, plus a scripted backend answering B.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::create_dir_all(root.join("data/frames")).unwrap();
    std::fs::write(root.join("data/frames/ego.jpg"), b"not really a jpeg").unwrap();
    std::fs::write(root.join("data/frames/exo.jpg"), b"not really a jpeg").unwrap();
    let cats = ["pose_action", "object_attribute", "numerical", "spatial"];
    let lines: Vec<String> = (0..8)
        .map(|i| {
            json!({
                "id": format!("q{i}"),
                "category": cats[i % 4],
                "question_perspective": if i < 4 { "ego" } else { "exo" },
                "ego_image": "frames/ego.jpg",
                "exo_image": "frames/exo.jpg",
                "question": format!("What am I doing in scene {i}?"),
                "options": ["cutting", "stirring", "pouring", "washing"],
                "answer_index": 1,
            })
            .to_string()
        })
        .collect();
    std::fs::write(root.join("data/items.jsonl"), lines.join("\n") + "\n").unwrap();
    std::fs::write(
        root.join("mock.toml"),
        "provider = \"scripted_mock\"\ncache_dir = \"cache\"\n\n[[script]]\nreply = \"B) stirring\"\n",
    )
    .unwrap();
    dir
}

fn run_dirs(out: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    dirs
}

#[test]
fn templates_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = m3cot(&["templates", "check"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("40"));
}

#[test]
fn run_writes_artifacts_and_report_rerenders() {
    let ws = workspace();
    let root = ws.path();
    let o = m3cot(
        &["run", "--dataset", "data/items.jsonl", "--method", "ddcot", "--backend", "mock.toml", "--out", "out"],
        root,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("100.00"));
    let dirs = run_dirs(&root.join("out"));
    assert_eq!(dirs.len(), 1);
    let run = &dirs[0];
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("run-"));
    for f in ["config.toml", "items.jsonl", "records.jsonl", "summary.json", "aggregate.json", "report.md", "report.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert_eq!(std::fs::read_dir(run.join("traces")).unwrap().count(), 8);
    let config = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("method = \"ddcot\""), "{config}");

    let run_s = run.to_str().unwrap();
    let csv = m3cot(&["report", "--records", run_s, "--format", "csv"], root);
    assert_eq!(code(&csv), 0, "{}", stderr(&csv));
    assert!(stdout(&csv).contains("100.00"));
    let json = m3cot(&["report", "--records", run_s, "--format", "json"], root);
    let v: Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(v["cells"].as_array().unwrap().len(), 8);
    assert_eq!(code(&m3cot(&["report", "--records", run_s, "--format", "xml"], root)), 1);

    // a second identical run is served from the cache
    let o = m3cot(
        &["run", "--dataset", "data/items.jsonl", "--method", "ddcot", "--backend", "mock.toml", "--out", "out"],
        root,
    );
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("0 provider calls"), "{}", stderr(&o));
    let dirs = run_dirs(&root.join("out"));
    assert_eq!(dirs.len(), 2);
    assert_eq!(
        std::fs::read(dirs[0].join("records.jsonl")).unwrap(),
        std::fs::read(dirs[1].join("records.jsonl")).unwrap()
    );

    let stats = m3cot(&["cache", "stats", "--backend", "mock.toml"], root);
    assert_eq!(code(&stats), 0, "{}", stderr(&stats));
    let v: Value = serde_json::from_str(&stdout(&stats)).unwrap();
    assert_eq!(v["entries"], 16);
    assert_eq!(code(&m3cot(&["cache", "gc", "--dir", "cache", "--drop-namespace", "run-0"], root)), 0);
    let v: Value = serde_json::from_str(&stdout(&m3cot(&["cache", "stats", "--dir", "cache"], root))).unwrap();
    assert_eq!(v["entries"], 0);
}

#[test]
fn dry_run_prints_five_prompts_and_calls_nothing() {
    let ws = workspace();
    let root = ws.path();
    let o = m3cot(
        &["run", "--dataset", "data/items.jsonl", "--method", "m3cot", "--backend", "mock.toml", "--out", "out", "--dry-run"],
        root,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# resolved config\n"));
    assert!(text.contains("method = \"m3cot\""));
    assert!(text.contains("5 prompt(s)"));
    assert_eq!(text.matches("\n## ").count(), 5);
    assert!(!root.join("out").exists());
    assert!(!root.join("cache").exists());
}

#[test]
fn validation_errors_exit_1() {
    let ws = workspace();
    let root = ws.path();
    let o = m3cot(&["run", "--dataset", "data/items.jsonl", "--method", "cot", "--backend", "mock.toml"], root);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("default, ddcot, cocot, ccot, m3cot"), "{}", stderr(&o));

    assert_eq!(code(&m3cot(&["run", "--dataset", "nope.jsonl", "--method", "default", "--backend", "mock.toml"], root)), 1);
    assert_eq!(code(&m3cot(&["run", "--method", "default", "--backend", "mock.toml"], root)), 1);

    std::fs::write(root.join("data/bad.jsonl"), r#"{"id":"x","category":"spatial"}"#).unwrap();
    let o = m3cot(&["run", "--dataset", "data/bad.jsonl", "--method", "default", "--backend", "mock.toml"], root);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));

    std::fs::write(root.join("typo.toml"), "provider = \"scripted_mock\"\ncache_dri = \"x\"\n").unwrap();
    let o = m3cot(&["run", "--dataset", "data/items.jsonl", "--method", "default", "--backend", "typo.toml"], root);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("cache_dri"), "{}", stderr(&o));

    assert_eq!(code(&m3cot(&["run", "--bogus-flag"], root)), 1);
}

#[test]
fn backend_failures_exit_2_and_keep_artifacts() {
    let ws = workspace();
    let root = ws.path();
    std::fs::write(
        root.join("narrow.toml"),
        "provider = \"scripted_mock\"\n\n[[script]]\ncontains = \"never in any prompt\"\nreply = \"A)\"\n",
    )
    .unwrap();
    let o = m3cot(&["run", "--dataset", "data/items.jsonl", "--method", "cocot", "--backend", "narrow.toml", "--out", "out"], root);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let run = &run_dirs(&root.join("out"))[0];
    let records = std::fs::read_to_string(run.join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 8);
    assert!(records.contains("error:no_script_match"));
}

#[test]
fn run_file_and_flag_precedence() {
    let ws = workspace();
    let root = ws.path();
    std::fs::write(
        root.join("run.toml"),
        "dataset = \"data/items.jsonl\"\nmethod = \"ccot\"\nruns = 2\nbackend = \"mock.toml\"\nout = \"out\"\n",
    )
    .unwrap();
    let o = m3cot(&["run", "--config", "run.toml", "--runs", "1", "--dry-run"], root);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("method = \"ccot\""));
    assert!(text.contains("runs = 1"), "{text}");
}

fn forge_workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::create_dir_all(root.join("frames")).unwrap();
    let mut lines = Vec::new();
    for f in 0..8 {
        for v in ["ego", "exo"] {
            std::fs::write(root.join(format!("frames/{v}_{f}.jpg")), b"jpeg").unwrap();
        }
        lines.push(
            json!({
                "pair_id": format!("take1_f{f}"), "take_id": "take1", "scenario": "cooking",
                "ego_image": format!("frames/ego_{f}.jpg"), "exo_image": format!("frames/exo_{f}.jpg"),
                "frame_index": f,
            })
            .to_string(),
        );
    }
    std::fs::write(root.join("pairs.jsonl"), lines.join("\n") + "\n").unwrap();
    std::fs::write(
        root.join("forge.toml"),
        r#"provider = "scripted_mock"

[[script]]
contains = "three question"
reply = "Q: What is on my left?\nA: A pan\nQ: How many cups are near me?\nA: Two\nQ: What am I holding?\nA: Knife"

[[script]]
contains = "given label"
reply = "No"

[[script]]
contains = "four multiple-choice options"
reply = "Options:\n[A pan]\n[A pot]\n[A lid]\n[A cup]"

[[script]]
reply = "A pan"
"#,
    )
    .unwrap();
    dir
}

#[test]
fn forge_chain_then_curate_export() {
    let ws = forge_workspace();
    let root = ws.path();
    let lint = m3cot(&["forge", "lint", "--in", "pairs.jsonl"], root);
    assert_eq!(code(&lint), 0, "{}", stdout(&lint));
    assert!(stdout(&lint).contains("192 candidates"), "{}", stdout(&lint));

    let stage = |name: &str, input: &str, output: &str| {
        let o = m3cot(&["forge", name, "--in", input, "--out", output, "--backend", "forge.toml"], root);
        assert_eq!(code(&o), 0, "{name}: {}", stderr(&o));
        stderr(&o)
    };
    let s1 = stage("step1", "pairs.jsonl", "work/c1.jsonl");
    assert!(s1.contains("64 calls"), "{s1}");
    stage("step2", "work/c1.jsonl", "work/c2.jsonl");
    stage("step3", "work/c2.jsonl", "work/c3.jsonl");
    stage("options", "work/c3.jsonl", "work/c4.jsonl");
    assert!(root.join("work/c4.manifest.json").is_file());

    let stats = m3cot(&["forge", "stats", "--in", "work/c4.jsonl"], root);
    let v: Value = serde_json::from_str(&stdout(&stats)).unwrap();
    assert_eq!(v["generated"], 192);
    assert_eq!(v["after_filter"], 192);

    // stats refuses an unfiltered file
    assert_eq!(code(&m3cot(&["forge", "stats", "--in", "work/c2.jsonl"], root)), 1);

    let log = root.join("work/curation.log.jsonl");
    {
        let svc = CurationService::open(&root.join("work/c4.jsonl"), &log).unwrap();
        for _ in 0..3 {
            let item = svc.next_item("ana", None).unwrap().unwrap();
            let d = Decision {
                final_question: item.candidate.question.clone(),
                final_options: vec!["A pan".into(), "A pot".into(), "A lid".into(), "A cup".into()],
                answer_index: 0,
                option_provenance: vec![OptionProvenance::FromEgoOptionSet; 4],
                annotator: String::new(),
                decided_at: String::new(),
            };
            svc.accept(&item.qa_id, "ana", d).unwrap();
        }
        let item = svc.next_item("ana", None).unwrap().unwrap();
        svc.reject(&item.qa_id, "ana", "duplicate").unwrap();
    }
    let o = m3cot(
        &["curate", "export", "--candidates", "work/c4.jsonl", "--log", "work/curation.log.jsonl", "--out", "final/e3vqa.jsonl"],
        root,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let items = load_dataset(&root.join("final/e3vqa.jsonl")).unwrap();
    assert_eq!(items.len(), 3);
    assert!(items.iter().all(|i| i.ego_image.value.starts_with(root.join("frames").to_str().unwrap())));
}

mod secrets {
    use super::*;
    use axum::routing::post;
    use axum::{Json, Router};

    /// A hosted-provider run leaves the key out of every artifact.
    #[test]
    fn api_key_stays_out_of_artifacts() {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_all().build().unwrap();
        let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let addr = listener.local_addr().unwrap();
        let app = Router::new().route(
            "/v1/chat",
            post(|| async {
                Json(json!({"choices": [{"message": {"content": "B) stirring"}, "finish_reason": "stop"}]}))
            }),
        );
        runtime.spawn(async move { axum::serve(listener, app).await.unwrap() });

        let ws = workspace();
        let root = ws.path();
        std::fs::write(
            root.join("hosted.toml"),
            format!(
                "provider = \"hosted_http\"\nmodel_id = \"some-model\"\ncache_dir = \"cache\"\n\n[http]\nendpoint = \"http://{addr}/v1/chat\"\napi_key_env = \"M3COT_CLI_SECRET\"\n"
            ),
        )
        .unwrap();
        let secret = "sk-cli-secret-value-9876";
        let o = Command::new(env!("CARGO_BIN_EXE_m3cot"))
            .args(["run", "--dataset", "data/items.jsonl", "--method", "m3cot", "--backend", "hosted.toml", "--out", "out", "--runs", "1"])
            .current_dir(root)
            .env("M3COT_CLI_SECRET", secret)
            .env("RUST_LOG", "debug")
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(!stdout(&o).contains(secret) && !stderr(&o).contains(secret));
        let mut scanned = 0;
        for entry in walkdir::WalkDir::new(root).into_iter().map(Result::unwrap).filter(|e| e.file_type().is_file()) {
            if entry.path().ends_with("hosted.toml") {
                continue;
            }
            scanned += 1;
            let bytes = std::fs::read(entry.path()).unwrap();
            assert!(!String::from_utf8_lossy(&bytes).contains(secret), "key leaked into {}", entry.path().display());
        }
        assert!(scanned > 20, "only {scanned} files");
        let run = &run_dirs(&root.join("out"))[0];
        assert!(std::fs::read_to_string(run.join("config.toml")).unwrap().contains("M3COT_CLI_SECRET"));
    }
}

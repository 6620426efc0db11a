use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn praf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_praf")).args(args).env_remove("PRAF_JUDGE_API_KEY").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let p = dir.join(name);
    let out = praf(&["synth", "--seed", &seed.to_string(), "--output", s(&p)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    p
}

fn short_run(manifest: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["attack", "--manifest", s(manifest), "--seed", "7", "--iterations", "2", "--stages", "1"];
    args.extend_from_slice(extra);
    praf(&args)
}

#[test]
fn single_iteration_attack_writes_image_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "c.png", 1);
    synth(dir.path(), "t.png", 2);
    let manifest = dir.path().join("pairs.csv");
    std::fs::write(&manifest, "# clean,target,output\nc.png,t.png,out/adv.png\n").unwrap();
    let out = praf(&["attack", "--manifest", s(&manifest), "--seed", "0", "--iterations", "1", "--stages", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let adv = dir.path().join("out/adv.png");
    assert!(adv.is_file());
    let trace = std::fs::read_to_string(dir.path().join("out/adv.png.trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 1);
    let stages = std::fs::read_to_string(dir.path().join("out/adv.png.stages.jsonl")).unwrap();
    assert_eq!(stages.lines().count(), 1);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}

#[test]
fn missing_manifest_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = praf(&["attack", "--manifest", s(&dir.path().join("nope.csv")), "--seed", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn missing_input_is_rejected_before_any_write() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "c.png", 1);
    synth(dir.path(), "t.png", 2);
    let manifest = dir.path().join("pairs.csv");
    std::fs::write(&manifest, "c.png,t.png,a.png\nc.png,gone.png,b.png\n").unwrap();
    let out = short_run(&manifest, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
    assert!(!dir.path().join("a.png").exists());
}

#[test]
fn malformed_manifest_and_config_report_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("pairs.csv");
    std::fs::write(&manifest, "\n# header\nonly,two\n").unwrap();
    let out = praf(&["attack", "--manifest", s(&manifest), "--seed", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pairs.csv:3") || err.contains("line 3"), "{err}");

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[attack]\ngamma = 0.5\nnot_a_key = 1\n").unwrap();
    let out = praf(&["show-config", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run.toml:3:"), "{err}");
}

#[test]
fn per_pair_failure_exits_one_and_keeps_other_outputs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "c.png", 1);
    synth(dir.path(), "t.png", 2);
    let small = dir.path().join("small.png");
    let out = praf(&["synth", "--size", "32", "--seed", "3", "--output", s(&small)]);
    assert!(out.status.success());
    let manifest = dir.path().join("pairs.csv");
    std::fs::write(&manifest, "c.png,t.png,good.png\nsmall.png,small.png,bad.png\n").unwrap();
    let out = short_run(&manifest, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(dir.path().join("good.png").is_file());
    assert!(!dir.path().join("bad.png").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAILED"));
}

#[test]
fn outputs_do_not_depend_on_manifest_order_or_workers() {
    let dir = tempfile::tempdir().unwrap();
    for (i, n) in ["a", "b", "c"].iter().enumerate() {
        synth(dir.path(), &format!("{n}.png"), i as u64 + 10);
    }
    let m1 = dir.path().join("m1.csv");
    let m2 = dir.path().join("m2.csv");
    std::fs::write(&m1, "a.png,b.png,r1/ab.png\nb.png,c.png,r1/bc.png\n").unwrap();
    std::fs::write(&m2, "b.png,c.png,r2/bc.png\na.png,b.png,r2/ab.png\n").unwrap();
    assert!(short_run(&m1, &[]).status.success());
    assert!(short_run(&m2, &["--workers", "2"]).status.success());
    for name in ["ab.png", "bc.png", "ab.png.trace.jsonl", "bc.png.stages.jsonl"] {
        let a = std::fs::read(dir.path().join("r1").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("r2").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn metrics_on_identical_pair() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.png", 5);
    let out = praf(&["metrics", "--pair", s(&a), s(&a)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pairs"][0]["psnr_db"], "inf");
    assert_eq!(v["pairs"][0]["ssim"], 1.0);
}

#[test]
fn show_config_applies_overrides() {
    let out = praf(&["show-config", "--gamma", "0.3", "--set", "schedule.iterations=12"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("gamma = 0.3"), "{text}");
    assert!(text.contains("iterations = 12"), "{text}");
    let bad = praf(&["show-config", "--gamma", "1.5"]);
    assert_eq!(bad.status.code(), Some(2));
}

fn serve(replies: Vec<&'static str>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for (stream, content) in listener.incoming().zip(replies) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(&mut stream);
            let mut len = 0usize;
            let mut line = String::new();
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                if line.trim_end().is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let reply = serde_json::json!({ "choices": [{ "message": { "content": content } }] }).to_string();
            let msg = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(msg.as_bytes()).unwrap();
        }
    });
    format!("http://{addr}/v1/chat/completions")
}

#[test]
fn evaluate_against_local_judge() {
    let dir = tempfile::tempdir().unwrap();
    let captions = dir.path().join("captions.jsonl");
    std::fs::write(
        &captions,
        "{\"target_text\": \"a cat\", \"adversarial_text\": \"a kitten\"}\n{\"target_text\": \"a car\", \"adversarial_text\": \"a tree\"}\n",
    )
    .unwrap();
    let url = serve(vec!["0.9", "0.2"]);
    let out = praf(&[
        "evaluate",
        "--captions",
        s(&captions),
        "--model",
        "m",
        "--endpoint",
        &url,
        "--thresholds",
        "0.5,0.95",
        "--max-concurrency",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["scored"], 2);
    assert_eq!(v["summaries"][0]["asr"], 0.5);
    assert_eq!(v["summaries"][1]["asr"], 0.0);
    assert!((v["summaries"][0]["avg_sim"].as_f64().unwrap() - 0.55).abs() < 1e-12);
}

#[test]
fn evaluate_requires_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let captions = dir.path().join("c.jsonl");
    std::fs::write(&captions, "{\"target_text\": \"a\", \"adversarial_text\": \"b\"}\n").unwrap();
    assert_eq!(praf(&["evaluate", "--captions", s(&captions)]).status.code(), Some(2));
}

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use motionmap::config::RunConfig;
use motionmap::data::{load_corpus, load_index, window_corpus};
use motionmap::train::{run_training, Checkpoint, Dataset, TrainHooks};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn motionmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motionmap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = motionmap(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn train_into(dir: &Path) -> PathBuf {
    ok(&["train", "--config", path(&smoke_config()), "--out", path(dir)]);
    dir.join("checkpoint.mmap")
}

#[test]
fn smoke_file_matches_the_builtin_smoke_config() {
    let text = std::fs::read_to_string(smoke_config()).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::smoke());
}

#[test]
fn generate_is_deterministic_and_counts_windows() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["generate", "--config", path(&smoke_config()), "--out", path(dir)]);
    }
    for f in ["corpus.mmcorpus", "corpus.mmgt", "config.toml"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }

    let cfg = RunConfig::smoke();
    let corpus = load_corpus(&a.join("corpus.mmcorpus")).unwrap();
    assert_eq!(corpus.sequences.len(), 2 * 3);
    let span = cfg.window.obs_frames + cfg.window.future_frames;
    let mut expected = 0;
    for s in &corpus.sequences {
        let mut start = 0;
        while start + span <= s.motion.num_frames() {
            expected += 1;
            start += cfg.window.stride;
        }
    }
    let samples = window_corpus(&corpus, &cfg.window).unwrap();
    assert_eq!(samples.len(), expected);
    let index = load_index(&a.join("corpus.mmgt")).unwrap();
    assert_eq!(index.len(), expected);

    let echoed = std::fs::read_to_string(a.join("config.toml")).unwrap();
    assert_eq!(RunConfig::from_toml(&echoed).unwrap(), cfg);

    ok(&["generate", "--config", path(&smoke_config()), "--seed", "6", "--out", path(&b)]);
    assert_ne!(read(a.join("corpus.mmcorpus")), read(b.join("corpus.mmcorpus")));
}

#[test]
fn full_lifecycle_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let ck = train_into(&run);
    let again = train_into(&tmp.path().join("again"));
    assert_eq!(read(&ck), read(&again));
    assert_eq!(read(run.join("progress.jsonl")), read(tmp.path().join("again/progress.jsonl")));

    let checkpoint = Checkpoint::load(&ck).unwrap();
    assert_eq!(
        checkpoint.stages().unwrap(),
        ["autoencoder", "embedding", "codebook", "motionmap", "finetune"]
    );
    let log: serde_json::Value = serde_json::from_slice(&read(run.join("training_log.json"))).unwrap();
    assert_eq!(log["autoencoder_loss"].as_array().unwrap().len(), 2);

    let eval = tmp.path().join("eval");
    let out = ok(&["evaluate", "--checkpoint", path(&ck), "--out", path(&eval)]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("zero-velocity"));
    assert!(table.contains("motionmap"));
    let summary: serde_json::Value = serde_json::from_slice(&read(eval.join("summary.json"))).unwrap();
    assert_eq!(summary["budget"], 7);
    assert_eq!(summary["protocol"], "train-mined");

    let eval2 = tmp.path().join("eval2");
    ok(&["evaluate", "--checkpoint", path(&ck), "--out", path(&eval2)]);
    for f in ["metrics.txt", "metrics.jsonl", "summary.json", "per_sample.jsonl", "config.toml"] {
        assert_eq!(read(eval.join(f)), read(eval2.join(f)), "{f}");
    }

    let eval3 = tmp.path().join("eval3");
    ok(&["evaluate", "--checkpoint", path(&ck), "--out", path(&eval3), "--budget", "3", "--protocol", "test-mined"]);
    let summary: serde_json::Value = serde_json::from_slice(&read(eval3.join("summary.json"))).unwrap();
    assert_eq!(summary["budget"], 3);
    assert_eq!(summary["protocol"], "test-mined");
    let jsonl = String::from_utf8(read(eval3.join("metrics.jsonl"))).unwrap();
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let expected = if v["method"] == "zero-velocity" { 1 } else { 3 };
        assert_eq!(v["budget"], expected);
    }

    let exports = tmp.path().join("exports");
    ok(&["export", "--checkpoint", path(&ck), "--out", path(&exports)]);
    let out = ok(&["check-manifest", "--out", path(&exports)]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok:"));

    let data = checkpoint.dataset().unwrap();
    let density = String::from_utf8(read(exports.join("density.tsv"))).unwrap();
    assert_eq!(density.lines().count(), 1 + data.samples.len());

    for entry in std::fs::read_dir(exports.join("overlay")).unwrap() {
        let pgm = read(entry.unwrap().path());
        assert!(pgm.starts_with(b"P5\n12 12\n255\n"));
        assert_eq!(pgm.len(), b"P5\n12 12\n255\n".len() + 144);
    }

    let exports2 = tmp.path().join("exports2");
    ok(&["export", "--checkpoint", path(&ck), "--out", path(&exports2)]);
    let manifest = read(exports.join("manifest.toml"));
    assert_eq!(manifest, read(exports2.join("manifest.toml")));
    let text = String::from_utf8(manifest).unwrap();
    assert!(text.contains("density map"));
    assert!(text.contains("overlaid on the ground-truth heatmap"));
    assert!(text.contains("ranked forecasts"));

    std::fs::write(exports.join("stray.txt"), "x").unwrap();
    let out = motionmap(&["check-manifest", "--out", path(&exports)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("stray.txt"));
}

#[test]
fn export_selector_limits_files_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = train_into(&tmp.path().join("run"));
    let out = tmp.path().join("density");
    ok(&["export", "--checkpoint", path(&ck), "--out", path(&out), "--what", "density"]);
    assert!(out.join("density.tsv").exists());
    assert!(!out.join("overlay").exists());
    assert!(!out.join("ranked").exists());
    ok(&["check-manifest", "--out", path(&out)]);
}

#[test]
fn resume_after_autoencoder_skips_it_and_matches_a_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = train_into(&tmp.path().join("full"));

    let cfg = RunConfig::smoke();
    let data = Dataset::synthetic(&cfg).unwrap();
    let partial_path = tmp.path().join("partial.mmap");
    let mut hooks = TrainHooks {
        on_stage: Box::new(|stage, ck| {
            if stage == "autoencoder" {
                ck.save(&partial_path)?;
            }
            Ok(())
        }),
        ..TrainHooks::default()
    };
    run_training(&cfg, &data, None, &mut hooks).unwrap();
    drop(hooks);
    assert_eq!(Checkpoint::load(&partial_path).unwrap().stages().unwrap(), ["autoencoder"]);

    let resumed = tmp.path().join("resumed");
    ok(&[
        "train",
        "--config",
        path(&smoke_config()),
        "--out",
        path(&resumed),
        "--resume",
        path(&partial_path),
    ]);
    let progress = String::from_utf8(read(resumed.join("progress.jsonl"))).unwrap();
    assert!(!progress.is_empty());
    assert!(progress.lines().all(|l| !l.contains("\"autoencoder\"")));
    assert_eq!(read(resumed.join("checkpoint.mmap")), read(full));
}

#[test]
fn unknown_flags_and_keys_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = motionmap(&["generate", "--out", path(tmp.path()), "--bogus"]);
    assert!(!out.status.success());

    let cfg = tmp.path().join("typo.toml");
    std::fs::write(&cfg, "[mining]\nthreshhold = 0.1\n").unwrap();
    let out = motionmap(&["generate", "--config", path(&cfg), "--out", path(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("threshhold"));

    let out = motionmap(&["generate", "--set", "motionmap.mm=3", "--out", path(tmp.path())]);
    assert!(!out.status.success());

    let out = motionmap(&["evaluate", "--checkpoint", path(&tmp.path().join("none")), "--out", path(tmp.path())]);
    assert!(!out.status.success());
}

#[test]
fn evaluate_rejects_a_config_from_another_training_run() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = train_into(&tmp.path().join("run"));
    let out = motionmap(&[
        "evaluate",
        "--checkpoint",
        path(&ck),
        "--out",
        path(&tmp.path().join("eval")),
        "--seed",
        "99",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn serve_refuses_a_malformed_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.mmap");
    std::fs::write(&bad, b"definitely not a checkpoint").unwrap();
    let out = motionmap(&["serve", "--checkpoint", path(&bad), "--port", "0"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "{stderr}");
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn http_get(port: u16, target: &str) -> Option<String> {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(stream, "GET {target} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut response = String::new();
    stream.read_to_string(&mut response).ok()?;
    Some(response)
}

#[test]
fn serve_honours_the_port_flag_and_answers_health() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = train_into(&tmp.path().join("run"));
    let port = free_port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_motionmap"))
        .args(["serve", "--checkpoint", path(&ck), "--port", &port.to_string()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    let response = loop {
        if let Some(r) = http_get(port, "/healthz") {
            break r;
        }
        assert!(Instant::now() < deadline, "server never answered");
        std::thread::sleep(Duration::from_millis(50));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"status\":\"ok\""));
}

mod common;

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use common::write_workspace;
use gcsd_core::corpus::{load_corpus, Session};
use gcsd_core::pipeline::{load_checkpoint, Stage};

fn gcsd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcsd"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = gcsd(dir, args);
    assert!(
        out.status.success(),
        "gcsd {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn prepare_data_cleans_and_stats_counts() {
    let dir = tempfile::tempdir().unwrap();
    let raw = concat!(
        r#"[{"turn":1,"speaker":"Therapist","dialogue":"大家好[S]！！"},{"turn":2,"speaker":"Patient_3","dialogue":"你好[UNK]"}]"#,
        "\n\n",
        r#"{"id":"b","text":"<|im_start|>[Human_1] ab<|im_end|>[Assistant] cde<|im_end|>"}"#,
        "\n"
    );
    std::fs::write(dir.path().join("raw.jsonl"), raw).unwrap();
    ok(dir.path(), &["prepare-data", "--in", "raw.jsonl", "--out", "clean/c.jsonl"]);

    let corpus = load_corpus(&dir.path().join("clean/c.jsonl")).unwrap();
    assert_eq!(corpus.len(), 2);
    assert_eq!(corpus[0].id, "raw-1");
    assert_eq!(corpus[0].utterances[0].text, "大家好！");
    assert_eq!(corpus[0].utterances[1].text, "你好");
    assert_eq!(corpus[0].human_count(), 1);
    assert_eq!(corpus[1].id, "b");

    let out = ok(dir.path(), &["stats", "--corpus", "clean/c.jsonl"]);
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["data_count"], 4);
    assert_eq!(stats["assistant_count"], 2);
    assert_eq!(stats["human_count"], 2);
    assert_eq!(stats["total_tokens"], 4 + 2 + 2 + 3);
}

#[test]
fn bad_data_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), r#"[{"turn":1,"speaker":"Nurse_1","dialogue":"hi"}]"#).unwrap();
    assert_eq!(gcsd(dir.path(), &["prepare-data", "--in", "bad.jsonl", "--out", "o.jsonl"]).status.code(), Some(3));
    assert_eq!(gcsd(dir.path(), &["prepare-data", "--in", "missing.jsonl", "--out", "o.jsonl"]).status.code(), Some(3));
    std::fs::write(dir.path().join("broken.jsonl"), "{not json\n").unwrap();
    assert_eq!(gcsd(dir.path(), &["stats", "--corpus", "broken.jsonl"]).status.code(), Some(3));
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"sft": {"grad_accum": 0}}"#).unwrap();
    assert_eq!(gcsd(dir.path(), &["sft", "--config", "c.json"]).status.code(), Some(2));
    std::fs::write(dir.path().join("c.json"), r#"{"mrpo": {"group_size": 1}}"#).unwrap();
    assert_eq!(gcsd(dir.path(), &["sft", "--config", "c.json"]).status.code(), Some(2));
    std::fs::write(dir.path().join("c.json"), "{").unwrap();
    assert_eq!(gcsd(dir.path(), &["simulate", "--config", "c.json", "--n", "1"]).status.code(), Some(2));
    assert_eq!(gcsd(dir.path(), &["sft", "--config", "absent.json"]).status.code(), Some(2));
}

#[test]
fn missing_corpus_for_training_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    write_workspace(dir.path(), 4).unwrap();
    assert_eq!(gcsd(dir.path(), &["sft", "--config", "config.json", "--stage", "real"]).status.code(), Some(3));
}

#[test]
fn full_pipeline_and_chat() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_workspace(d, 5).unwrap();
    ok(d, &["prepare-data", "--in", "raw_real.jsonl", "--out", "data/real.jsonl"]);
    ok(d, &["prepare-data", "--in", "raw_test.jsonl", "--out", "data/test.jsonl"]);
    ok(d, &["simulate", "--config", "config.json", "--n", "3"]);
    let sim = load_corpus(&cfg.paths.sim_corpus).unwrap();
    assert_eq!(sim.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["sim-00000", "sim-00001", "sim-00002"]);

    ok(d, &["sft", "--config", "config.json", "--stage", "both"]);
    let runs = d.join("runs");
    for f in ["sft_sim.ckpt", "sft.ckpt", "sft_sim_loss.jsonl", "sft_real_loss.jsonl", "sft_real_prompts.jsonl"] {
        assert!(runs.join(f).exists(), "{f}");
    }
    let loss: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(runs.join("sft_real_loss.jsonl")).unwrap().lines().next().unwrap())
            .unwrap();
    for k in ["step", "l_gen", "l_csfal", "l_smooth", "l_total"] {
        assert!(loss.get(k).is_some(), "{k}");
    }
    let sft = load_checkpoint(&runs.join("sft.ckpt")).unwrap();
    assert_eq!(sft.meta.lineage, [Stage::SimSFT, Stage::RealSFT]);

    ok(d, &["mrpo", "--config", "config.json", "--ckpt", "runs/sft.ckpt"]);
    assert_eq!(lines(&runs.join("mrpo_rewards.jsonl")), cfg.mrpo.steps as usize);
    let policy = load_checkpoint(&runs.join("mrpo.ckpt")).unwrap();
    assert_eq!(policy.meta.lineage, [Stage::SimSFT, Stage::RealSFT, Stage::MRPO]);
    assert_eq!(policy.net, sft.net);

    ok(d, &["eval", "--ckpt", "runs/mrpo.ckpt", "--test", "data/test.jsonl", "--out", "runs/report.json"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(runs.join("report.json")).unwrap()).unwrap();
    let n = report["n_examples"].as_u64().unwrap() as usize;
    assert_eq!(n, 12);
    assert_eq!(lines(&runs.join("details.jsonl")), n);
    for k in ["rouge_l", "bleu2", "bleu4", "semantic", "distinct2"] {
        let v = report[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }

    let mut child = Command::new(env!("CARGO_BIN_EXE_gcsd"))
        .args(["chat", "--ckpt", "runs/mrpo.ckpt", "--seed", "3", "--transcript", "chat.jsonl"])
        .current_dir(d)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"/as 1 hello there\nnonsense\n/as 2 tell me more\n/quit\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.matches("[Assistant]").count(), 2, "{stdout}");
    assert!(stdout.contains("usage:"), "{stdout}");
    let transcript = std::fs::read_to_string(d.join("chat.jsonl")).unwrap();
    let session: Session = serde_json::from_str(transcript.lines().next().unwrap()).unwrap();
    assert_eq!(session.utterances.len(), 4);
    assert_eq!(session.utterances[0].text, "hello there");
}

use std::path::Path;
use std::process::Command;

const FACTS: &[(&str, &str, &str)] = &[
    ("capital", "zarnia", "Velmor"),
    ("river", "quandor", "Esk"),
    ("founder", "belhaven", "Ilsa Marrow"),
    ("mascot", "tollwick", "Gruff"),
    ("anthem", "pellory", "Bright Shore"),
    ("currency", "vantoria", "Dram"),
    ("harbour", "ostmere", "Kell"),
    ("festival", "rundale", "Lantern Night"),
];

fn r2d2(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_r2d2"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "r2d2 {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_toy(dir: &Path) {
    let mut passages = String::new();
    let mut examples = String::new();
    let mut scores = String::new();
    for (i, (attr, entity, answer)) in FACTS.iter().enumerate() {
        let context = format!("records from long ago say the {attr} of {entity} is {answer} . nobody disputes this .");
        passages.push_str(&serde_json::json!({"id": i, "title": entity, "context": context}).to_string());
        passages.push('\n');
        examples.push_str(
            &serde_json::json!({"question": format!("what is the {attr} of {entity}?"), "answers": [answer], "golden_passage_id": i})
                .to_string(),
        );
        examples.push('\n');
        scores.push_str(&serde_json::json!({"id": i, "p": 0.9 - 0.1 * i as f64}).to_string());
        scores.push('\n');
    }
    std::fs::write(dir.join("passages.jsonl"), passages).unwrap();
    std::fs::write(dir.join("examples.jsonl"), examples).unwrap();
    std::fs::write(dir.join("scores.jsonl"), scores).unwrap();
    std::fs::write(
        dir.join("r2d2.toml"),
        "[pipeline]\nk = 4\nv = 3\nv2 = 3\nm = 3\nmax_span_len = 8\nfusion = \"ext\"\n",
    )
    .unwrap();
}

const DATA: &[&str] = &["--passages", "passages.jsonl", "--examples", "examples.jsonl"];

#[test]
fn end_to_end_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_toy(d);

    let built = r2d2(d, &["index", "build", "--passages", "passages.jsonl", "--out", "toy.emb"]);
    assert!(built.starts_with("8 rows"), "{built}");

    let mut e2e = vec!["--config", "r2d2.toml", "e2e", "--index", "toy.emb", "--predictions", "pred.jsonl", "--report", "report.json"];
    e2e.extend_from_slice(DATA);
    r2d2(d, &e2e);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["value"], 1.0);

    let scored = r2d2(d, &["eval", "em", "--examples", "examples.jsonl", "--predictions", "pred.jsonl"]);
    assert!(scored.contains('1'), "{scored}");

    // same run again gives the same bytes
    let first = std::fs::read(d.join("pred.jsonl")).unwrap();
    r2d2(d, &e2e);
    assert_eq!(std::fs::read(d.join("pred.jsonl")).unwrap(), first);
}

#[test]
fn prune_then_answer_from_the_smaller_index() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_toy(d);
    r2d2(d, &["index", "build", "--passages", "passages.jsonl", "--out", "toy.emb"]);
    let msg = r2d2(
        d,
        &["prune", "--scores", "scores.jsonl", "--top-n", "5", "--out", "kept.json", "--index", "toy.emb", "--index-out", "small.emb"],
    );
    assert!(msg.starts_with("kept 5 of 8"), "{msg}");

    let mut args = vec!["--config", "r2d2.toml", "e2e", "--index", "small.emb", "--report", "report.json"];
    args.extend_from_slice(DATA);
    r2d2(d, &args);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["value"], 5.0 / 8.0);
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_toy(d);
    std::fs::write(d.join("bad.toml"), "[pipeline]\nk = 2\nv = 3\n").unwrap();
    let mut args = vec!["--config", "bad.toml", "e2e"];
    args.extend_from_slice(DATA);
    let out = Command::new(env!("CARGO_BIN_EXE_r2d2")).current_dir(d).args(&args).output().unwrap();
    assert!(!out.status.success());
}

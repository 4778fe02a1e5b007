use std::path::Path;
use std::process::{Command, Output};

fn gnnenc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gnnenc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gnnenc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    gnnenc(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_corpus(dir: &Path) {
    ok(&[
        "gen-data",
        "--out",
        s(dir),
        "--seed",
        "5",
        "--passages",
        "120",
        "--train-queries",
        "40",
        "--test-queries",
        "15",
        "--words",
        "200",
        "--topics",
        "6",
    ]);
}

const SMALL: [&str; 6] = ["--set", "dim=8", "--set", "stage1_epochs=3", "--set", "k=4"];

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    small_corpus(&data);
    for f in ["passages.jsonl", "queries.jsonl", "qrels.tsv"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let mut args = vec!["train-dual", "--data", s(&data), "--out", s(&run)];
    args.extend(SMALL);
    ok(&args);
    assert!(run.join("stage1.gdck").exists());
    let triples = std::fs::read_to_string(run.join("triples.tsv")).unwrap();
    assert!(triples.starts_with("query_id\tpositive_id\tnegative_id\n"));
    assert_eq!(triples.lines().count(), 41);

    let stage1 = run.join("stage1.gdck");
    let tsv = run.join("triples.tsv");
    let out = ok(&[
        "train-joint",
        "--data",
        s(&data),
        "--model",
        s(&stage1),
        "--triples",
        s(&tsv),
        "--out",
        s(&run),
    ]);
    assert_eq!(out.lines().filter(|l| l.starts_with("epoch ")).count(), 5);
    for e in 0..5 {
        assert!(run.join(format!("joint-epoch{e}.gdck")).exists());
    }
    let log = std::fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch\tstep\tloss"));
    assert!(log.lines().skip(1).all(|l| l.split('\t').count() == 3));

    let joint = run.join("joint.gdck");
    ok(&[
        "build-index",
        "--data",
        s(&data),
        "--model",
        s(&joint),
        "--out",
        s(&run),
    ]);
    let index = run.join("index.gdix");
    ok(&[
        "search",
        "--data",
        s(&data),
        "--model",
        s(&joint),
        "--index",
        s(&index),
        "--out",
        s(&run),
    ]);
    let trec = std::fs::read_to_string(run.join("run.trec")).unwrap();
    assert_eq!(trec.lines().count(), 15 * 100);
    let metrics = ok(&[
        "eval",
        "--data",
        s(&data),
        "--run",
        s(&run.join("run.trec")),
    ]);
    assert!(metrics.starts_with("MRR@10\t"));
    assert!(metrics.contains("R@5\t"));
    assert!(metrics.contains("queries\t15"));

    let one = ok(&[
        "search",
        "--data",
        s(&data),
        "--model",
        s(&joint),
        "--index",
        s(&index),
        "--query",
        "w30 w31",
        "--top",
        "3",
    ]);
    assert_eq!(one.lines().count(), 3);
    assert!(one.lines().all(|l| l.starts_with("query Q0 ")));

    let attn = ok(&[
        "dump-attn",
        "--data",
        s(&data),
        "--model",
        s(&joint),
        "--passage",
        "p00000",
        "--out",
        s(&run),
    ]);
    let weights: f64 = attn
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((weights - 1.0).abs() < 1e-9);

    // The stage-1 model did not build this index.
    assert_eq!(
        code(&[
            "search",
            "--data",
            s(&data),
            "--model",
            s(&stage1),
            "--index",
            s(&index),
            "--query",
            "w1"
        ]),
        3
    );
}

#[test]
fn sweep_emits_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_corpus(&data);
    let mut args = vec![
        "sweep",
        "--data",
        s(&data),
        "--param",
        "beta",
        "--values",
        "0.1,0.3",
        "--out",
        s(tmp.path()),
    ];
    args.extend(SMALL);
    let out = ok(&args);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "beta\tMRR@10\tR@1\tR@5\tR@20\tR@100");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.1\t"));
    let file = std::fs::read_to_string(tmp.path().join("sweep-beta.tsv")).unwrap();
    assert_eq!(file, out);
}

#[test]
fn grad_check_passes() {
    let out = ok(&["grad-check"]);
    assert!(out.trim_end().ends_with("pass"), "{out}");
}

#[test]
fn config_file_then_set_then_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_corpus(&data);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# small\ndim = 8\nstage1_epochs = 2\nseed = 1\n").unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&[
        "train-dual",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--seed",
        "9",
        "--out",
        s(&a),
    ]);
    ok(&[
        "train-dual",
        "--data",
        s(&data),
        "--set",
        "dim=8",
        "--set",
        "stage1_epochs=2",
        "--seed",
        "9",
        "--out",
        s(&b),
    ]);
    assert_eq!(
        std::fs::read(a.join("stage1.gdck")).unwrap(),
        std::fs::read(b.join("stage1.gdck")).unwrap()
    );
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["eval"]), 2);
    assert_eq!(code(&["grad-check", "--set", "no_such_key=1"]), 2);
    assert_eq!(code(&["grad-check", "--set", "dim=7"]), 2);
}

#[test]
fn data_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&[
            "eval",
            "--data",
            s(&tmp.path().join("missing")),
            "--run",
            "x"
        ]),
        3
    );

    let data = tmp.path().join("data");
    small_corpus(&data);
    let qrels = data.join("qrels.tsv");
    let mut text = std::fs::read_to_string(&qrels).unwrap();
    text.push_str("q00000\t0\tp99999\t1\n");
    std::fs::write(&qrels, text).unwrap();
    let out = gnnenc(&["train-dual", "--data", s(&data), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("qrels.tsv"));

    let bad = tmp.path().join("bad.gdck");
    std::fs::write(&bad, b"NOPE0000").unwrap();
    assert_eq!(
        code(&[
            "build-index",
            "--data",
            s(&data),
            "--model",
            s(&bad),
            "--out",
            s(tmp.path())
        ]),
        3
    );
}

#[test]
fn divergence_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_corpus(&data);
    let out = gnnenc(&[
        "train-dual",
        "--data",
        s(&data),
        "--set",
        "dim=8",
        "--set",
        "lr_stage1=1e308",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contrastive"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree_hash(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((
                    rel,
                    format!("{:x}", Sha256::digest(fs::read(&path).unwrap())),
                ));
            }
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, size: &str, seed: &str) {
    let o = bin(&["synth", "--size", size, "--seed", seed, "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_split_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    synth(&a, "100", "5");
    synth(&b, "100", "5");
    let lines = |name: &str| fs::read_to_string(a.join(name)).unwrap().lines().count();
    assert_eq!(
        (
            lines("train.jsonl"),
            lines("val.jsonl"),
            lines("test.jsonl")
        ),
        (70, 10, 20)
    );
    let ha = tree_hash(&a);
    assert_eq!(ha, tree_hash(&b));
    assert!(ha.len() > 100);

    let c = tmp.path().join("c");
    synth(&c, "100", "6");
    assert_ne!(ha, tree_hash(&c));
}

#[test]
fn evaluate_references_against_themselves() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth(&corpus, "60", "1");
    let gen = tmp.path().join("gold.jsonl");
    let mut text = String::new();
    for line in fs::read_to_string(corpus.join("test.jsonl"))
        .unwrap()
        .lines()
    {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        text.push_str(&serde_json::json!({"id": v["id"], "report": v["report"]}).to_string());
        text.push('\n');
    }
    fs::write(&gen, text).unwrap();
    let o = bin(&["evaluate", "--generated", p(&gen), "--corpus", p(&corpus)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = out.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(
        rows[0],
        ["B-1", "B-2", "B-3", "B-4", "M", "R-L", "P", "R", "F1"]
    );
    assert_eq!(&rows[1][..4], ["1.0000"; 4]);
    assert_eq!(rows[1][4], "n/a");
    assert_eq!(rows[1][5], "1.0000");
    assert_eq!(rows[1][8], "1.0000");
}

#[test]
fn gradcheck_and_negative_control() {
    let ok = bin(&["gradcheck", "--dims", "d=8,n=2,np=5,ni=4,v=12"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("max rel err"));

    let bad = bin(&["gradcheck", "--corrupt-adjoint"]);
    assert_eq!(code(&bad), 3);

    let da = bin(&["gradcheck", "--mode", "da-only"]);
    assert_eq!(code(&da), 0, "{}", String::from_utf8_lossy(&da.stdout));
}

#[test]
fn exit_codes() {
    assert_eq!(code(&bin(&["no-such-command"])), 1);
    assert_eq!(code(&bin(&["gradcheck", "--dims", "q=1"])), 1);
    assert_eq!(code(&bin(&["--help"])), 0);
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    assert_eq!(
        code(&bin(&[
            "evaluate",
            "--generated",
            p(&missing),
            "--corpus",
            p(&missing)
        ])),
        2
    );
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "nonsense = 3\n").unwrap();
    assert_eq!(
        code(&bin(&[
            "synth",
            "--config",
            p(&cfg),
            "--out",
            p(tmp.path())
        ])),
        1
    );
}

#[test]
fn train_generate_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth(&corpus, "80", "2");
    let cfg = tmp.path().join("small.cfg");
    fs::write(
        &cfg,
        "# small model\nd = 16\nheads = 2\nembed = 8\nhidden = 16\n",
    )
    .unwrap();
    let run = tmp.path().join("run");
    let o = bin(&[
        "train",
        "--corpus",
        p(&corpus),
        "--steps",
        "20",
        "--config",
        p(&cfg),
        "--out",
        p(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 21);
    let ckpt = run.join("model.ckpt");
    let pool = run.join("pool.npol");

    let generated = tmp.path().join("gen.jsonl");
    let g = bin(&[
        "generate",
        "--checkpoint",
        p(&ckpt),
        "--pool",
        p(&pool),
        "--corpus",
        p(&corpus),
        "--max-len",
        "12",
        "--out",
        p(&generated),
    ]);
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));
    let ids = |path: &Path| -> Vec<String> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| {
                serde_json::from_str::<serde_json::Value>(l).unwrap()["id"]
                    .as_str()
                    .unwrap()
                    .to_string()
            })
            .collect()
    };
    assert_eq!(ids(&generated), ids(&corpus.join("test.jsonl")));
    for line in fs::read_to_string(&generated).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["report"].as_str().unwrap().split_whitespace().count() <= 12);
    }
    let e = bin(&[
        "evaluate",
        "--generated",
        p(&generated),
        "--corpus",
        p(&corpus),
    ]);
    assert_eq!(code(&e), 0);

    let records = fs::read_to_string(corpus.join("test.jsonl")).unwrap();
    let abnormal = records
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| !v["normal"].as_bool().unwrap())
        .expect("an abnormal test instance");
    let id = abnormal["id"].as_str().unwrap();
    let dump = tmp.path().join("inspect");
    let i = bin(&[
        "inspect",
        "--checkpoint",
        p(&ckpt),
        "--pool",
        p(&pool),
        "--corpus",
        p(&corpus),
        "--id",
        id,
        "--pgm",
        "4",
        "--out",
        p(&dump),
    ]);
    assert_eq!(code(&i), 0, "{}", String::from_utf8_lossy(&i.stderr));
    let weights = fs::read_to_string(dump.join("attention_weights.csv")).unwrap();
    let mut sums = [0.0f64; 2];
    for line in weights.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        sums[f[0].parse::<usize>().unwrap()] += f[3].parse::<f64>().unwrap();
    }
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-9), "{sums:?}");
    assert!(fs::read_to_string(dump.join("saliency.pgm"))
        .unwrap()
        .starts_with("P2\n"));
    assert_eq!(
        fs::read_to_string(dump.join("saliency.csv"))
            .unwrap()
            .lines()
            .count(),
        17
    );

    let unknown = bin(&[
        "inspect",
        "--checkpoint",
        p(&ckpt),
        "--pool",
        p(&pool),
        "--corpus",
        p(&corpus),
        "--id",
        "syn-99999",
    ]);
    assert_eq!(code(&unknown), 2);
}

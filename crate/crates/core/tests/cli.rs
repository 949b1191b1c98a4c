use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kdpool::corpus::StopList;
use kdpool::index::{brute_force_candidates, ConstraintLevel};

const BIN: &str = env!("CARGO_BIN_EXE_kdpool");

fn kdpool(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn kdpool")
}

fn ok(args: &[&str]) -> String {
    let out = kdpool(args);
    assert!(
        out.status.success(),
        "kdpool {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Gen {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

impl Gen {
    fn new(seed: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("data");
        ok(&[
            "gen", "--seed", seed, "--out", s(&dir), "--original-size", "200", "--pool-size", "1000",
            "--lexicon-size", "300", "--eval-size", "40", "--twin-jitter", "0.3", "--top-k", "10",
        ]);
        Gen { _tmp: tmp, dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn ps(&self, name: &str) -> String {
        s(&self.p(name)).to_owned()
    }
}

fn dir_listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn gen_match_stats_pipeline() {
    let g = Gen::new("42");
    let (orig, pool) = (g.ps("orig.align.jsonl"), g.ps("pool.align.jsonl"));
    for c in ["word", "phone", "state"] {
        let out = g.ps(&format!("{c}.matches.jsonl"));
        ok(&["match", "--orig", &orig, "--pool", &pool, "--constraint", c, "--out", &out]);
    }
    let m2 = g.ps("m2.matches.jsonl");
    ok(&["match", "--orig", &orig, "--pool", &pool, "--constraint", "phone", "--phone-margin", "2", "--out", &m2]);

    let table = ok(&["stats", "--orig", &orig, "--pool", &pool]);
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 4);
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(names, ["word", "phone-margin-2", "phone", "state"]);
    let ratio = |i: usize| rows[i][3].parse::<f64>().unwrap();
    assert!(ratio(3) <= ratio(2) && ratio(2) <= ratio(0) && ratio(2) <= ratio(1));

    // the same numbers from the match files
    let files = ok(&[
        "stats", "--matches", &g.ps("word.matches.jsonl"), "--matches", &m2,
        "--matches", &g.ps("phone.matches.jsonl"), "--matches", &g.ps("state.matches.jsonl"),
    ]);
    assert_eq!(files, table);

    // matched counts against a linear scan of the written files
    let read = |p: &str| kdpool::io::parse_alignments(std::io::BufReader::new(std::fs::File::open(p).unwrap()), 3).unwrap();
    let (o, q) = (read(&orig), read(&pool));
    let stop = StopList::silences();
    let levels = [
        ConstraintLevel::WordExact,
        ConstraintLevel::phone_margin(2.0).unwrap(),
        ConstraintLevel::PhoneExact,
        ConstraintLevel::StateExact,
    ];
    for (row, level) in rows.iter().zip(levels) {
        let words: Vec<_> = o.iter().flat_map(|r| r.words.iter().map(move |w| (r, w))).filter(|(_, w)| !stop.contains(&w.word)).collect();
        let matched = words
            .iter()
            .filter(|(r, w)| !brute_force_candidates(&q, &stop, &r.utt_id, w, level).is_empty())
            .count();
        assert_eq!(row[1].parse::<usize>().unwrap(), matched);
        assert_eq!(row[2].parse::<usize>().unwrap(), words.len());
    }
}

#[test]
fn margin_only_with_phone_constraint() {
    let g = Gen::new("1");
    let (orig, pool) = (g.ps("orig.align.jsonl"), g.ps("pool.align.jsonl"));
    let out = g.ps("m.jsonl");
    let bad = kdpool(&["match", "--orig", &orig, "--pool", &pool, "--constraint", "word", "--phone-margin", "2", "--out", &out]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("--phone-margin"));
    assert!(!g.p("m.jsonl").exists());
    ok(&["match", "--orig", &orig, "--pool", &pool, "--constraint", "phone", "--phone-margin", "2", "--out", &out]);
    assert!(g.p("m.jsonl").exists());
    let neg = kdpool(&["match", "--orig", &orig, "--pool", &pool, "--constraint", "phone", "--phone-margin", "-1", "--out", &out]);
    assert!(!neg.status.success());
}

#[test]
fn unknown_input_is_a_usage_error() {
    assert_eq!(kdpool(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(kdpool(&["gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(kdpool(&["match", "--constraint", "word"]).status.code(), Some(2));
    assert!(!kdpool(&[]).status.success());
}

fn manifest(g: &Gen, matches: &str, out: &str) -> Output {
    kdpool(&[
        "manifest",
        "--orig", &g.ps("orig.align.jsonl"),
        "--pool", &g.ps("pool.align.jsonl"),
        "--orig-frames", &g.ps("orig.frames.jsonl"),
        "--orig-soft", &g.ps("orig.soft.jsonl"),
        "--pool-soft", &g.ps("pool.soft.jsonl"),
        "--matches", matches,
        "--top-k", "10",
        "--out", out,
    ])
}

#[test]
fn train_runs_are_identical() {
    let g = Gen::new("7");
    let m = g.ps("phone.matches.jsonl");
    ok(&["match", "--orig", &g.ps("orig.align.jsonl"), "--pool", &g.ps("pool.align.jsonl"), "--constraint", "phone", "--out", &m]);
    let man = g.ps("manifest.jsonl");
    assert!(manifest(&g, &m, &man).status.success());
    let train = |tag: &str| {
        let (model, trace) = (g.ps(&format!("model{tag}.json")), g.ps(&format!("trace{tag}.jsonl")));
        ok(&[
            "train", "--manifest", &man, "--seed", "7", "--epochs", "5", "--top-k", "10",
            "--eval", &g.ps("eval.frames.jsonl"), "--out-model", &model, "--out-trace", &trace,
        ]);
        (std::fs::read(model).unwrap(), std::fs::read(trace).unwrap())
    };
    let a = train("a");
    let b = train("b");
    assert_eq!(a, b);
    let trace = kdpool::io::parse_trace(a.1.as_slice()).unwrap();
    assert_eq!(trace.len(), 5);
    assert!(trace.iter().all(|t| t.eval_acc.is_some()));

    let report = ok(&["gradcheck", "--manifest", &man, "--seed", "3", "--top-k", "10", "--hidden", "8"]);
    assert!(report.starts_with("max_relative_error\t"));
}

#[test]
fn failures_leave_no_output() {
    let g = Gen::new("3");
    let before = dir_listing(&g.dir);
    let out = g.ps("never.jsonl");
    let missing = kdpool(&["match", "--orig", &g.ps("orig.align.jsonl"), "--pool", &g.ps("absent.jsonl"), "--constraint", "word", "--out", &out]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.jsonl"));

    // soft labels of the wrong corpus: rejected after parsing starts
    let m = g.ps("w.matches.jsonl");
    ok(&["match", "--orig", &g.ps("orig.align.jsonl"), "--pool", &g.ps("pool.align.jsonl"), "--constraint", "word", "--out", &m]);
    let swapped = kdpool(&[
        "manifest",
        "--orig", &g.ps("orig.align.jsonl"),
        "--pool", &g.ps("pool.align.jsonl"),
        "--orig-frames", &g.ps("orig.frames.jsonl"),
        "--orig-soft", &g.ps("pool.soft.jsonl"),
        "--pool-soft", &g.ps("pool.soft.jsonl"),
        "--matches", &m,
        "--top-k", "10",
        "--out", &out,
    ]);
    assert_eq!(swapped.status.code(), Some(1));

    // training that fails validation after reading its inputs
    let man = g.ps("manifest.jsonl");
    assert!(manifest(&g, &m, &man).status.success());
    let bad = kdpool(&[
        "train", "--manifest", &man, "--top-k", "10", "--epochs", "0",
        "--out-model", &out, "--out-trace", &g.ps("never-trace.jsonl"),
    ]);
    assert_eq!(bad.status.code(), Some(1));

    let mut after = dir_listing(&g.dir);
    after.retain(|n| n != "w.matches.jsonl" && n != "manifest.jsonl");
    assert_eq!(after, before);
}

#[test]
fn gen_is_reproducible() {
    let a = Gen::new("11");
    let b = Gen::new("11");
    let names = dir_listing(&a.dir);
    assert_eq!(names, dir_listing(&b.dir));
    assert_eq!(names.len(), 8);
    for n in &names {
        assert_eq!(std::fs::read(a.p(n)).unwrap(), std::fs::read(b.p(n)).unwrap(), "{n}");
    }
    let c = Gen::new("12");
    assert_ne!(std::fs::read(a.p("orig.align.jsonl")).unwrap(), std::fs::read(c.p("orig.align.jsonl")).unwrap());
}

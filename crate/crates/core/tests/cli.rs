use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autolabel3d")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn missing_root_fails_with_the_path() {
    let o = cli(&["ingest", "--root", "/no/such/root"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/no/such/root"), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());

    let o = cli(&["--override", "dataset.root=/no/such/root", "run", "--out", "/tmp/unused-al3d"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/no/such/root"));
    assert!(!Path::new("/tmp/unused-al3d").exists());
}

#[test]
fn unknown_flags_and_keys_are_rejected() {
    assert!(!cli(&["run", "--out", "x", "--fast"]).status.success());
    assert!(!cli(&["--bogus", "ingest"]).status.success());
    let o = cli(&["--override", "iteration.no_such_key=1", "ingest", "--root", "."]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));
}

#[test]
fn demo_root_through_run_eval_export_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let run = dir.path().join("run");
    let trusted = dir.path().join("trusted");

    let o = cli(&["synth-demo", "--out", p(&root), "--scenes", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for sub in ["velodyne", "calib", "label_2"] {
        assert_eq!(fs::read_dir(root.join(sub)).unwrap().count(), 5, "{sub}");
    }

    let o = cli(&["ingest", "--root", p(&root)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("frames 5"), "{}", stdout(&o));

    let root_kv = format!("dataset.root={}", p(&root));
    let o = cli(&["--override", &root_kv, "run", "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 4, "{lines:?}");
    for (i, l) in lines.iter().enumerate() {
        assert!(l.starts_with(&format!("stage={i}\t")), "{l}");
    }
    assert!(lines[3].contains("kind=refinement"));

    let o = cli(&["eval", "--pred", p(&run), "--gt", p(&root)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Car"), "{}", stdout(&o));

    let o = cli(&["export-pseudo", "--run", p(&run), "--out", p(&trusted), "--trusted-only"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let count = |d: &Path| -> usize {
        fs::read_dir(d.join("label_2")).unwrap().map(|e| fs::read_to_string(e.unwrap().path()).unwrap().lines().count()).sum()
    };
    assert!(count(&trusted) <= count(&run));
    for e in fs::read_dir(trusted.join("label_2")).unwrap() {
        for line in fs::read_to_string(e.unwrap().path()).unwrap().lines() {
            let score: f64 = line.split_whitespace().last().unwrap().parse().unwrap();
            assert!(score >= 0.7, "{line}");
        }
    }

    let frame = fs::read_dir(root.join("label_2")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).min().unwrap();
    let id = frame.trim_end_matches(".txt").trim_start_matches('0');
    let id = if id.is_empty() { "0" } else { id };
    let o = cli(&["inspect", "--frame", id, "--root", p(&root), "--run", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for kind in ["frustum", "depth", "point", "label"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("{kind}\t"))), "no {kind} record");
    }

    let o = cli(&["inspect", "--manifest", p(&run.join("manifest.toml"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("refinement"));
}

#[test]
fn eval_of_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    assert!(cli(&["synth-demo", "--out", p(&root), "--scenes", "8"]).status.success());
    let csv = dir.path().join("ap.csv");
    let o = cli(&["eval", "--pred", p(&root), "--gt", p(&root), "--csv", p(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for r in rows {
        let ap = r.split(',').nth(2).unwrap();
        assert!(ap.is_empty() || ap.parse::<f64>().unwrap() == 100.0, "{r}");
    }
}

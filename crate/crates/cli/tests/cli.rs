use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn imitate(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imitate"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("IMITATE_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &str = "corpus = \"c\"\n[data]\ncounts = [64, 32, 64]\n[train]\nepochs = 1\n";

fn small_corpus(dir: &Path) {
    let o = imitate(dir, &["generate", "--out", "c", "--counts", "64,32,64"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["d1", "d2"] {
        let o = imitate(tmp.path(), &["generate", "--seed", "7", "--out", out, "--counts", "20,5,5"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("vocabulary"));
    }
    let (a, b) = (tree(&tmp.path().join("d1")), tree(&tmp.path().join("d2")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn generate_argument_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(imitate(tmp.path(), &["generate"]).status.code(), Some(2));
    assert_eq!(imitate(tmp.path(), &["generate", "--out", "x", "--counts", "1,2"]).status.code(), Some(2));
    let o = imitate(tmp.path(), &["generate", "--out", "x", "--k", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("data.k"), "{}", stderr(&o));

    let args = ["generate", "--out", "y", "--counts", "4,2,2"];
    assert!(imitate(tmp.path(), &args).status.success());
    let o = imitate(tmp.path(), &args);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(imitate(tmp.path(), &forced).status.success());
}

#[test]
fn dry_run_reports_parameter_count() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "[train]\nepochs = 3\n").unwrap();
    let o = imitate(tmp.path(), &["pretrain", "--config", "c.toml", "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("trainable parameters:"));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn malformed_config_points_at_line() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[train]\nepochs = \"many\"\n").unwrap();
    let o = imitate(tmp.path(), &["pretrain", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 2, column"), "{}", stderr(&o));

    fs::write(tmp.path().join("typo.toml"), "[train]\nepoch = 3\n").unwrap();
    let o = imitate(tmp.path(), &["pretrain", "--config", "typo.toml"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn pretrain_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    small_corpus(tmp.path());
    fs::write(tmp.path().join("s.toml"), SMALL).unwrap();
    let o = imitate(tmp.path(), &["pretrain", "--config", "s.toml", "--out", "r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("r");
    for f in ["config.toml", "metrics.csv", "timing.csv", "summary.json", "checkpoints/final.bin", "checkpoints/final.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "step,epoch,phase,lr,total,vlh1,vlh2,vlm1,vlm2,vvh,vvm");
    // 64 records at B=32: two training steps plus one validation row
    assert_eq!(lines.filter(|l| l.contains(",train,")).count(), 2);

    let eval = ["evaluate", "--run", "r", "--tasks", "zeroshot"];
    let first = imitate(tmp.path(), &eval);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("macro_auc"));
    let second = imitate(tmp.path(), &eval);
    assert_eq!(stdout(&first), stdout(&second));

    let o = imitate(tmp.path(), &["evaluate", "--run", "r", "--tasks", "zeroshot,bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("zeroshot") && stderr(&o).contains("retrieval") && stderr(&o).contains("probe"));

    // a config edited after training no longer matches the checkpoint
    let cfg = fs::read_to_string(run.join("config.toml")).unwrap();
    fs::write(run.join("config.toml"), cfg.replace("epochs = 1", "epochs = 2")).unwrap();
    let o = imitate(tmp.path(), &eval);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("config hash mismatch"), "{}", stderr(&o));
}

#[test]
fn untrained_checkpoint_is_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("u.toml"), "[data]\ncounts = [64, 32, 500]\n[train]\nepochs = 0\n").unwrap();
    let o = imitate(tmp.path(), &["pretrain", "--config", "u.toml", "--out", "u"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = imitate(tmp.path(), &["evaluate", "--run", "u", "--tasks", "zeroshot"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let auc = v["zero_shot"]["macro_auc"].as_f64().unwrap();
    assert!((auc - 0.5).abs() < 0.2, "untrained macro AUC {auc}");
}

#[test]
fn divergence_exits_with_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("d.toml"), "[train]\nepochs = 1\nlr = 1e3\n").unwrap();
    let o = imitate(tmp.path(), &["pretrain", "--config", "d.toml", "--out", "d"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("non-finite loss in term"), "{err}");
    assert!(tmp.path().join("d/checkpoints/last_good.bin").exists());
    assert!(tmp.path().join("d/checkpoints/last_good.json").exists());
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    small_corpus(tmp.path());
    fs::write(tmp.path().join("s.toml"), SMALL).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_imitate"))
        .args(["pretrain", "--config", "s.toml"])
        .current_dir(tmp.path())
        .env("RUST_LOG", "warn")
        .env("IMITATE_OUTPUT_ROOT", "elsewhere")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let runs: Vec<_> = fs::read_dir(tmp.path().join("elsewhere/runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
}

#[test]
fn ablate_empty_and_resumed() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("empty.toml"), "seeds = [1]\n").unwrap();
    let o = imitate(tmp.path(), &["ablate", "--grid", "empty.toml", "--out", "e"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("e/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("setting,seed,"));

    small_corpus(tmp.path());
    let grid = format!(
        "seeds = [1, 2]\ntasks = [\"zeroshot\"]\n[base]\n{}[[sweep]]\nterms = [\"VVH+VLH\", \"VVH\"]\n",
        SMALL.replace("[data]", "[base.data]").replace("[train]", "[base.train]")
    );
    fs::write(tmp.path().join("g.toml"), grid).unwrap();
    let o = imitate(tmp.path(), &["ablate", "--grid", "g.toml", "--out", "a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let full = fs::read(tmp.path().join("a/results.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&full).lines().count(), 5);

    // interrupt: one cell loses its marker and leaves partial output
    let cells = tmp.path().join("a/cells");
    let victim = fs::read_dir(&cells).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(victim.join("DONE")).unwrap();
    fs::remove_file(victim.join("summary.json")).unwrap();
    fs::remove_file(tmp.path().join("a/results.csv")).unwrap();
    let o = imitate(tmp.path(), &["ablate", "--grid", "g.toml", "--out", "a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(victim.join("DONE").exists());
    assert_eq!(fs::read(tmp.path().join("a/results.csv")).unwrap(), full);
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = imitate(tmp.path(), &["gradcheck", "--max-entries", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("max relative error"));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eqprove::model::{Model, ModelConfig};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqprove"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen-data", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn gen_data_single_cell_corpus() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    let o = gen(&out, &["--max-distance", "1", "--per-cell", "1", "--audit"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let total: usize = ["train", "validation", "test"]
        .iter()
        .map(|s| fs::read_to_string(out.join(format!("{s}.tsv"))).unwrap().lines().count())
        .sum();
    assert_eq!(total, 8);
    assert!(fs::read_to_string(out.join("stats.csv")).unwrap().starts_with("statistic,train,validation,test\n"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["config"]["height"], "3:5");
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let args = ["--max-distance", "3", "--per-cell", "4", "--seed", "11", "--height", "2:4"];
    for d in ["a", "b"] {
        assert_eq!(code(&gen(&tmp.path().join(d), &args)), 0);
    }
    for f in ["train.tsv", "validation.tsv", "test.tsv", "stats.csv"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn gen_data_rejects_bad_flags() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&gen(&tmp.path().join("x"), &["--per-cell", "0"])), 1);
    assert_eq!(code(&gen(&tmp.path().join("x"), &["--height", "5"])), 1);
}

#[test]
fn train_zero_epochs_writes_initial_weights() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    assert_eq!(code(&gen(&data, &["--max-distance", "2", "--per-cell", "10"])), 0);
    let model = tmp.path().join("m.nng");
    let o = run(&[
        "train", "--data", data.to_str().unwrap(), "--epochs", "0", "--memory-dim", "4", "--seed", "9",
        "--out", model.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let loaded = Model::load(&model).unwrap();
    assert_eq!(loaded, Model::init(ModelConfig::new(4), 9).unwrap());
    assert!(tmp.path().join("m.metrics.csv").exists());
    assert!(tmp.path().join("m.manifest.json").exists());
}

#[test]
fn train_smoke_and_metrics() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    assert_eq!(code(&gen(&data, &["--max-distance", "5", "--per-cell", "25", "--seed", "3"])), 0);
    let model = tmp.path().join("m.nng");
    let o = run(&[
        "train", "--data", data.to_str().unwrap(), "--epochs", "2", "--memory-dim", "8",
        "--out", model.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("m.metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,split,mae,accuracy,dmse,dce"));
    let epochs: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(epochs, vec![0, 0, 1, 1, 2, 2]);

    let o = run(&[
        "eval", "--model", model.to_str().unwrap(), "--data", data.join("test.tsv").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("distance,count,mae,accuracy"));
}

#[test]
fn search_exit_codes() {
    let o = run(&["search", "--algo", "bfs", "--source", "(F (+ a b))", "--target", "(F (+ b a))"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("outcome: found"));
    assert!(stdout(&o).trim_end().ends_with("commute"));

    let o = run(&["search", "--algo", "bfs", "--source", "(F (* a b))", "--target", "(F (* a b))"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("path_len: 0"));

    let o = run(&["search", "--algo", "bfs", "--source", "(F (+ a", "--target", "(F a)"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("syntax error"));

    let o = run(&["search", "--algo", "bfs", "--source", "(F (+ a a))", "--target", "(F (+ a b))"]);
    assert_eq!(code(&o), 2);

    let o = run(&["search", "--algo", "nngs", "--source", "(F a)", "--target", "(F a)"]);
    assert_eq!(code(&o), 1, "guided search without a model is a usage error");
}

#[test]
fn search_then_check_round_trip() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("m.nng");
    Model::init(ModelConfig::new(4), 0).unwrap().save(&model).unwrap();
    let path = tmp.path().join("p.txt");
    let (src, tgt) = ("(* a (F (+ b c)))", "(F (+ (* a b) (* a c)))");
    for algo in ["bfs", "nngs", "batch-nngs"] {
        let o = run(&[
            "search", "--algo", algo, "--model", model.to_str().unwrap(), "--source", src, "--target", tgt,
            "--emit-path", path.to_str().unwrap(), "--batch-size", "16",
        ]);
        assert_eq!(code(&o), 0, "{algo}");
        let o = run(&["check", "--source", src, "--target", tgt, "--path", path.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        assert_eq!(stdout(&o).trim(), "Valid");
    }
    assert!(tmp.path().join("p.manifest.json").exists());
}

#[test]
fn check_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("p.txt");
    let (src, tgt) = ("(F (+ a b))", "(F (+ b a))");

    fs::write(&p, "commute\n").unwrap();
    assert_eq!(code(&run(&["check", "--source", src, "--target", tgt, "--path", p.to_str().unwrap()])), 0);

    fs::write(&p, "commute\ncommute\n").unwrap();
    let o = run(&["check", "--source", src, "--target", tgt, "--path", p.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).starts_with("Invalid(mismatch"));

    fs::write(&p, "focus_left\ndistribute\ncommute\n").unwrap();
    let o = run(&["check", "--source", src, "--target", tgt, "--path", p.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).starts_with("Invalid(StepFailed(1)"), "{}", stdout(&o));

    fs::write(&p, "sideways\n").unwrap();
    assert_eq!(code(&run(&["check", "--source", src, "--target", tgt, "--path", p.to_str().unwrap()])), 1);
    let missing = tmp.path().join("missing.txt");
    assert_eq!(code(&run(&["check", "--source", src, "--target", tgt, "--path", missing.to_str().unwrap()])), 1);
}

#[test]
fn bench_writes_report_curve_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("m.nng");
    Model::init(ModelConfig::new(4), 0).unwrap().save(&model).unwrap();
    let inst = tmp.path().join("inst.tsv");
    fs::write(&inst, "(F (+ a b))\t(F (+ b a))\n").unwrap();
    let out = tmp.path().join("report.csv");
    let o = run(&[
        "bench", "--model", model.to_str().unwrap(), "--instances", inst.to_str().unwrap(), "--out",
        out.to_str().unwrap(), "--jobs", "2", "--timeout", "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "instance_id,algorithm,outcome,path_len,states_expanded,states_generated,nn_batches,elapsed_ms"
    );
    assert_eq!(lines.len(), 4);
    for (line, algo) in lines[1..].iter().zip(["bfs", "nngs", "batch-nngs"]) {
        assert!(line.starts_with(&format!("0,{algo},found,1,")), "{line}");
        let ms: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(ms <= 5000.0);
    }
    assert!(tmp.path().join("report.curve.csv").exists());
    assert!(tmp.path().join("report.manifest.json").exists());

    let empty = tmp.path().join("empty.tsv");
    fs::write(&empty, "").unwrap();
    let o = run(&[
        "bench", "--algos", "bfs", "--instances", empty.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1);
}

#[test]
fn search_does_not_mutate_inputs() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("m.nng");
    Model::init(ModelConfig::new(4), 0).unwrap().save(&model).unwrap();
    let before = fs::read(&model).unwrap();
    let o = run(&[
        "search", "--algo", "nngs", "--model", model.to_str().unwrap(), "--source", "(F (+ a b))", "--target",
        "(F (+ b a))",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&model).unwrap(), before);
}

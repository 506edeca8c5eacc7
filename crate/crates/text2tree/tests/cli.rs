use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_text2tree"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix(" = "))
        .unwrap_or_else(|| panic!("no `{key}` in {stdout}"))
}

#[test]
fn generate_train_evaluate_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    let gen = ok(&["gen-data", "--out-dir", p(&d), "--set", "num_samples=600", "--seed", "4"]);
    assert_eq!(value(&gen, "records"), "600");
    let (edges, targets, data) = (d.join("edges.tsv"), d.join("targets.txt"), d.join("data.jsonl"));
    let tree = ["--edges", p(&edges), "--targets", p(&targets)];

    let v = ok(&[&["tree", "validate"][..], &tree].concat());
    assert_eq!(value(&v, "targets"), "40");

    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "# small run\nd = 8\nd_enc = 8\nmax_epochs = 3\n").unwrap();
    let m = dir.path().join("model");
    let train_args = [
        &["train", "--data", p(&data), "--out-dir", p(&m), "--config", p(&cfg)][..],
        &tree,
    ]
    .concat();
    let first = ok(&train_args);
    for f in ["model.ckpt", "vocab.txt", "dev_report.txt", "test_report.txt", "summary.json"] {
        assert!(m.join(f).exists(), "{f}");
    }
    assert_eq!(ok(&train_args), first);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(m.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["per_label_f1"].as_array().unwrap().len(), 40);
    let test_f1: f64 = value(&first, "test_macro_f1").parse().unwrap();
    assert_eq!(summary["macro_f1"].as_f64().unwrap(), test_f1);

    let ckpt = m.join("model.ckpt");
    let report = ok(&[&["eval", "--data", p(&data), "--checkpoint", p(&ckpt)][..], &tree].concat());
    assert_eq!(value(&report, "macro_f1").parse::<f64>().unwrap(), test_f1);
    assert!(report.contains("# label\tf1\ttp\tfp\tfn\tgroup"));

    let sim = dir.path().join("sim.tsv");
    let reps = dir.path().join("h.tsv");
    ok(&[
        &["sim-matrix", "--checkpoint", p(&ckpt), "--out", p(&sim), "--representations", p(&reps)][..],
        &tree,
    ]
    .concat());
    let (ids, s) = text2tree::export::read_square(&sim).unwrap();
    assert_eq!(ids.len(), 40);
    for i in 0..40 {
        assert_eq!(s[(i, i)], 1.0);
        for j in 0..40 {
            assert_eq!(s[(i, j)], s[(j, i)]);
            assert!((0.0..=1.0).contains(&s[(i, j)]));
        }
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    let cfg = dir.path().join("gen.cfg");
    std::fs::write(&cfg, "num_samples = 300\nseed = 1\n").unwrap();
    let a = ok(&["gen-data", "--out-dir", p(&d), "--config", p(&cfg), "--set", "num_samples=250"]);
    assert_eq!(value(&a, "records"), "250");
    let first = std::fs::read_to_string(d.join("data.jsonl")).unwrap();
    ok(&["gen-data", "--out-dir", p(&d), "--config", p(&cfg), "--set", "num_samples=250", "--seed", "2"]);
    assert_ne!(std::fs::read_to_string(d.join("data.jsonl")).unwrap(), first);
}

#[test]
fn gradcheck_and_grid_search_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    ok(&["gen-data", "--out-dir", p(&d), "--set", "num_samples=300"]);
    let (edges, targets, data) = (d.join("edges.tsv"), d.join("targets.txt"), d.join("data.jsonl"));
    let base = ["--edges", p(&edges), "--targets", p(&targets), "--data", p(&data)];

    for mode in ["text2tree", "no-ssl", "mixup(0.4)"] {
        let set = format!("mode={mode}");
        let out = ok(&[&["gradcheck", "--set", "d=4", "--set", "d_enc=4", "--set", &set][..], &base].concat());
        assert!(value(&out, "max_rel_error").parse::<f64>().unwrap() < 1e-4);
    }

    let g = dir.path().join("grid");
    let out = ok(&[
        &["grid-search", "--taus", "0.5,2", "--lambdas", "0.05", "--out-dir", p(&g), "--set", "max_epochs=1", "--set", "d=4"][..],
        &base,
    ]
    .concat());
    assert_eq!(std::fs::read_to_string(g.join("grid.tsv")).unwrap().lines().count(), 3);
    let best = std::fs::read_to_string(g.join("best.cfg")).unwrap();
    assert!(best.contains(&format!("tau = {}", value(&out, "tau"))));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    ok(&["gen-data", "--out-dir", p(&d), "--set", "num_samples=200"]);
    let (edges, targets, data) = (d.join("edges.tsv"), d.join("targets.txt"), d.join("data.jsonl"));
    let out = dir.path().join("out");

    let code = |args: &[&str]| bin(args).status.code().unwrap();

    assert_eq!(code(&["train"]), 1);
    assert_eq!(code(&["gen-data", "--out-dir", p(&out), "--set", "skew=2"]), 1);
    assert_eq!(code(&["gen-data", "--out-dir", p(&out), "--set", "colour=red"]), 1);

    let cyclic = dir.path().join("cyclic.tsv");
    std::fs::write(&cyclic, "A\tB\nB\tA\nC\tROOT\n").unwrap();
    std::fs::write(dir.path().join("t.txt"), "C\n").unwrap();
    assert_eq!(
        code(&["tree", "validate", "--edges", p(&cyclic), "--targets", p(&dir.path().join("t.txt"))]),
        1
    );

    let base = ["--edges", p(&edges), "--targets", p(&targets), "--data", p(&data), "--out-dir", p(&out)];
    assert_eq!(code(&[&["train", "--set", "lambda_loss=1.5"][..], &base].concat()), 1);

    let stray = dir.path().join("stray.jsonl");
    std::fs::write(&stray, "{\"text\": \"a b\", \"labels\": [\"Z99\"]}\n").unwrap();
    let args = ["train", "--edges", p(&edges), "--targets", p(&targets), "--data", p(&stray), "--out-dir", p(&out)];
    assert_eq!(code(&args), 1);

    let missing = dir.path().join("missing.jsonl");
    let args = ["train", "--edges", p(&edges), "--targets", p(&targets), "--data", p(&missing), "--out-dir", p(&out)];
    assert_eq!(code(&args), 2);
    assert_eq!(code(&[&["train", "--set", "max_epochs=1", "--set", "d=4"][..], &base].concat()), 0);
}

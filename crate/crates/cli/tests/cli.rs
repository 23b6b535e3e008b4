use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
# quick sinusoid run
experiment = sinusoid
trials = 3
backward.K = 5
imaml.X = 2
imaml.Y = 5
";

fn fedmeta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmeta")).args(args).output().unwrap()
}

fn config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

#[test]
fn train_then_eval_from_theta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let run = fedmeta(&["train", "--config", &cfg, "--algorithm", "meta_backward", "--out", out_s]);
    assert!(run.status.success(), "{}", text(&run));
    assert!(text(&run).contains("6 rounds, 18 uplinks, 15 downlinks"), "{}", text(&run));
    let theta = out.join("meta_backward").join("theta.json");
    assert!(theta.is_file());

    let eval_out = dir.path().join("eval");
    let run = fedmeta(&[
        "eval",
        "--config",
        &cfg,
        "--algorithm",
        "meta_backward",
        "--theta",
        theta.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", text(&run));
    let eval_csv = std::fs::read_to_string(eval_out.join("meta_backward").join("eval.csv")).unwrap();
    assert_eq!(eval_csv.lines().count(), 4);
    assert!(eval_out.join("plots").join("cdf_loss.svg").is_file());
}

#[test]
fn compare_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let run = fedmeta(&["compare", "--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap()]);
        assert!(run.status.success(), "{}", text(&run));
        assert!(out.join("plots").join("median_loss.svg").is_file());
        outputs.push(out);
    }
    for alg in ["meta_backward", "imaml", "avg_init", "random_init"] {
        for file in ["eval.csv", "costs.csv", "theta.json"] {
            let read = |o: &Path| std::fs::read(o.join(alg).join(file)).unwrap();
            assert_eq!(read(&outputs[0]), read(&outputs[1]), "{alg}/{file}");
        }
    }
    assert_eq!(
        std::fs::read(outputs[0].join("cdf.csv")).unwrap(),
        std::fs::read(outputs[1].join("cdf.csv")).unwrap()
    );
}

#[test]
fn overrides_apply_after_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = dir.path().join("out");
    let run = fedmeta(&[
        "train",
        "--config",
        &cfg,
        "--algorithm",
        "meta_backward",
        "--set",
        "backward.K=2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", text(&run));
    assert!(text(&run).contains("3 rounds, 9 uplinks, 6 downlinks"), "{}", text(&run));
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let run = fedmeta(&["compare", "--config", &cfg, "--set", "backward.nope=1"]);
    assert!(!run.status.success());
    assert!(text(&run).contains("backward.nope"), "{}", text(&run));

    let run = fedmeta(&["train", "--config", &cfg, "--set", "backward.K"]);
    assert!(!run.status.success());
    assert!(text(&run).contains("KEY=VALUE"));

    let run = fedmeta(&["train", "--config", &cfg, "--algorithm", "meta_backward,imaml"]);
    assert!(!run.status.success());
    assert!(text(&run).contains("exactly one"));

    let missing = dir.path().join("nothing");
    let run = fedmeta(&[
        "compare",
        "--set",
        "experiment=mnist",
        "--set",
        &format!("data_dir={}", missing.display()),
    ]);
    assert!(!run.status.success());
}

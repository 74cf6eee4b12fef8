use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn eqprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqprop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn selftest_passes() {
    let o = eqprop(&["selftest"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    assert_eq!(
        text.lines().filter(|l| l.starts_with("ok")).count(),
        8,
        "{text}"
    );
    assert!(!text.contains("FAIL"));
}

#[test]
fn grad_check_reports_both_orders() {
    let o = eqprop(&["grad-check", "--beta", "0.5"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    let slope = |name: &str| -> f64 {
        let line = text
            .lines()
            .find(|l| l.starts_with(&format!("order slope {name}")))
            .expect(name);
        line.rsplit(' ').next().unwrap().parse().unwrap()
    };
    assert!((slope("one-sided:") - 1.0).abs() < 0.25, "{text}");
    assert!((slope("symmetric:") - 2.0).abs() < 0.4, "{text}");
}

#[test]
fn config_errors_exit_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("toy.toml")).unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        text.replacen("[hyperparams]", "[hyperparams]\nbeta_ = 1.0", 1),
    )
    .unwrap();
    let o = eqprop(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("beta_"));
    assert_eq!(eqprop(&["train"]).status.code(), Some(2));
    let o = eqprop(&[
        "train",
        "--config",
        &config("toy.toml"),
        "--estimator",
        "two-sided",
    ]);
    assert_eq!(o.status.code(), Some(2));
    // the KP estimator needs feedback weights
    let o = eqprop(&[
        "train",
        "--config",
        &config("toy.toml"),
        "--estimator",
        "kp-vf-sym",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

fn train_toy(out: &Path) -> String {
    let o = eqprop(&[
        "train",
        "--config",
        &config("toy.toml"),
        "--seed",
        "3",
        "--estimator",
        "random-sign",
        "--beta",
        "0.8",
        "--device-precision",
        "f32",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

#[test]
fn toy_training_is_reproducible_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b): (PathBuf, PathBuf) = (dir.path().join("a"), dir.path().join("b"));
    let text = train_toy(&a);
    assert!(text.contains("estimator random-sign"), "{text}");
    train_toy(&b);
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.join("final.eqp")).unwrap(),
        std::fs::read(b.join("final.eqp")).unwrap()
    );
    let rows = String::from_utf8(ma).unwrap();
    assert_eq!(rows.lines().count(), 21);

    let ck = a.join("final.eqp");
    let o = eqprop(&[
        "evaluate",
        "--config",
        &config("toy.toml"),
        "--checkpoint",
        ck.to_str().unwrap(),
    ]);
    let line = stdout(&o);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(line.starts_with("epoch 20 examples 48 test_err"), "{line}");
    let last = rows
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(6)
        .unwrap()
        .parse::<f64>()
        .unwrap();
    let err: f64 = line.split_whitespace().nth(5).unwrap().parse().unwrap();
    assert!((err - last).abs() < 1e-4, "{err} vs {last}");
}

#[test]
fn gdu_and_align_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = eqprop(&[
        "gdu",
        "--beta",
        "0.05",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let gdu = std::fs::read_to_string(dir.path().join("gdu.csv")).unwrap();
    assert!(gdu.lines().count() > 16);
    let o = eqprop(&[
        "align",
        "--iterations",
        "5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let align = std::fs::read_to_string(dir.path().join("align.csv")).unwrap();
    let lines: Vec<&str> = align.lines().collect();
    assert_eq!(lines[0], "iter,layer,angle_deg");
    assert_eq!(lines.len(), 6);
}

#[test]
fn cifar_configs_are_accepted_by_the_loader() {
    // training stops at the missing dataset files, after validation
    for name in [
        "cifar10-squared-error.toml",
        "cifar10-cross-entropy.toml",
        "cifar10-kolen-pollack.toml",
    ] {
        let o = eqprop(&["train", "--config", &config(name)]);
        let err = String::from_utf8_lossy(&o.stderr);
        if Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../data/cifar-10-batches-bin")
            .exists()
        {
            continue;
        }
        assert_eq!(o.status.code(), Some(1), "{name}: {err}");
        assert!(err.contains("cifar-10-batches-bin"), "{name}: {err}");
    }
}

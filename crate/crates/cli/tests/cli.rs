use std::path::Path;
use std::process::{Command, Output};

fn symoe(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symoe"))
        .args(args)
        .env("SYMOE_OUT", out)
        .output()
        .expect("spawn symoe")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const TINY: &str = r#"
run_name = "tiny"
mode = "standard"
total_steps = 8
warmup_steps = 2
eval_every = 4
imbalance_every = 4
eval_batches = 1

[pretrain]
steps = 6
"#;

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = symoe(&["train"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = symoe(&["train", "/no/such/config.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let cfg = write_config(tmp.path(), "bogus_key = 1\n");
    let o = symoe(&["train", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let cfg = write_config(tmp.path(), TINY);
    let o = symoe(&["train", &cfg, "--set", "warmup_steps=100"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = symoe(&["train", &cfg, "--set", "novalue"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn train_writes_artifacts_and_repeats_bytewise() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = symoe(&["train", &cfg, "--out", dir.to_str().unwrap()], tmp.path());
        assert!(o.status.success(), "{}", text(&o));
        assert!(text(&o).contains("final eval"));
    }
    for f in ["metrics.jsonl", "metrics.csv", "model.ckpt", "manifest.json"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    for f in ["metrics.jsonl", "metrics.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    let svg = tmp.path().join("loss.svg");
    let metrics = a.join("metrics.jsonl");
    let o = symoe(
        &["plot", metrics.to_str().unwrap(), "--key", "total_loss", "--smooth", "3", "-o", svg.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", text(&o));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let o = symoe(&["plot", metrics.to_str().unwrap(), "--key", "no_such_metric", "-o", svg.to_str().unwrap()], tmp.path());
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn pretrain_profile_partition_train_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let parent = tmp.path().join("parent");
    let o = symoe(&["pretrain", &cfg, "--out", parent.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", text(&o));
    let ckpt = parent.join("model.ckpt");
    assert!(ckpt.exists());

    let profile = tmp.path().join("profile.jsonl");
    let o = symoe(&["profile", ckpt.to_str().unwrap(), &cfg, "-o", profile.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", text(&o));

    let part = tmp.path().join("partition.jsonl");
    let o = symoe(
        &["partition", profile.to_str().unwrap(), "--n-und", "12", "-o", part.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("layer 0"));
    let o = symoe(&["partition", profile.to_str().unwrap(), "--n-und", "99"], tmp.path());
    assert_ne!(o.status.code(), Some(0));

    let run = tmp.path().join("sym");
    let o = symoe(
        &[
            "train",
            &cfg,
            "--set",
            "mode=symbiotic",
            "--set",
            &format!("parent={}", ckpt.display()),
            "--set",
            &format!("partition={}", part.display()),
            "--out",
            run.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", text(&o));

    let probe = |c: &Path| {
        let o = symoe(&["probe", c.to_str().unwrap(), "--config", &cfg], tmp.path());
        assert!(o.status.success(), "{}", text(&o));
        String::from_utf8_lossy(&o.stdout).to_string()
    };
    let first = probe(&run.join("model.ckpt"));
    assert!(first.contains("shared-only understanding loss"));
    assert_eq!(first, probe(&run.join("model.ckpt")));
}

#[test]
fn check_runs_the_invariant_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let o = symoe(&["check", "--seed", "3"], tmp.path());
    assert!(o.status.success(), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("PASS autograd-core/finite_differences"));
    assert!(out.contains("SKIP training-harness/directional_forgetting"));
    assert!(!out.contains("FAIL"));
}

//! End-to-end CLI checks: drive the binary through gen-data, train, attack,
//! purify, eval, and heatmap on a miniature setup; verify exit codes and
//! output files.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_f3lab"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().replace('\\', "/");

    let gen_cfg = dir.path().join("gen.toml");
    write(
        &gen_cfg,
        &format!(
            "version = 1\nn = 30\nseed = 5\nsplit = \"train\"\nout = \"{}\"\n",
            p("train.bin")
        ),
    );
    run_ok(bin().args(["gen-data", "--config"]).arg(&gen_cfg));
    // same config, overridden for the eval split
    run_ok(
        bin()
            .args(["gen-data", "--config"])
            .arg(&gen_cfg)
            .args(["--set", "split=\"eval\"", "--set", "n=10", "--set", "seed=6"])
            .args(["--set", &format!("out=\"{}\"", p("eval.bin"))]),
    );
    assert!(dir.path().join("train.bin").exists());
    assert!(dir.path().join("eval.bin").exists());

    let train_cfg = dir.path().join("train.toml");
    write(
        &train_cfg,
        &format!(
            "version = 1\ndataset = \"{}\"\ncheckpoint = \"{}\"\nepochs = 1\nlearning_rate = 0.15\ntrain_seed = 42\ndim = 16\nlayers = 2\nheads = 2\n",
            p("train.bin"),
            p("model.ckpt")
        ),
    );
    let out = run_ok(bin().args(["train", "--config"]).arg(&train_cfg));
    assert!(out.contains("final train accuracy"));

    let attack_cfg = dir.path().join("attack.toml");
    write(
        &attack_cfg,
        &format!(
            "version = 1\ndataset = \"{}\"\ncheckpoint = \"{}\"\nout = \"{}\"\n\n[attack]\nmethod = \"pgd\"\nsteps = 2\nseed = 1\n",
            p("eval.bin"),
            p("model.ckpt"),
            p("adv.bin")
        ),
    );
    run_ok(bin().args(["attack", "--config"]).arg(&attack_cfg));
    assert!(dir.path().join("adv.bin").exists());

    let purify_cfg = dir.path().join("purify.toml");
    write(
        &purify_cfg,
        &format!(
            "version = 1\ndataset = \"{}\"\nadversarial = \"{}\"\ncheckpoint = \"{}\"\nout = \"{}\"\nseed = 7\n\n[condition]\nvariant = \"v3\"\nalpha = \"16/255\"\nbeta = \"32/255\"\n",
            p("eval.bin"),
            p("adv.bin"),
            p("model.ckpt"),
            p("purified.bin")
        ),
    );
    run_ok(bin().args(["purify", "--config"]).arg(&purify_cfg));
    assert!(dir.path().join("purified.bin").exists());

    let eval_cfg = dir.path().join("eval.toml");
    write(
        &eval_cfg,
        &format!(
            "version = 1\ndataset = \"{}\"\ncheckpoint = \"{}\"\n\n[[variants]]\nlabel = \"adv\"\npath = \"{}\"\n\n[[variants]]\nlabel = \"v3\"\npath = \"{}\"\n",
            p("eval.bin"),
            p("model.ckpt"),
            p("adv.bin"),
            p("purified.bin")
        ),
    );
    let out = run_ok(bin().args(["eval", "--config"]).arg(&eval_cfg));
    assert!(out.contains("clean accuracy"));
    assert!(out.contains("mse(A_clean, A)"));

    let heatmap_cfg = dir.path().join("heatmap.toml");
    write(
        &heatmap_cfg,
        &format!(
            "version = 1\ndataset = \"{}\"\ncheckpoint = \"{}\"\nindex = 0\nout = \"{}\"\n",
            p("eval.bin"),
            p("model.ckpt"),
            p("map")
        ),
    );
    run_ok(bin().args(["heatmap", "--config"]).arg(&heatmap_cfg));
    assert!(dir.path().join("map.txt").exists());
    assert!(dir.path().join("map.pgm").exists());
}

#[test]
fn report_honors_out_root_env_and_reproduces_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    write(
        &cfg_path,
        r#"
version = 1
seed = 42
out_dir = "run"

[dataset]
train_n = 30
eval_n = 6
train_seed = 11
eval_seed = 12

[model]
checkpoint = "model.ckpt"
epochs = 1
learning_rate = 0.15
train_seed = 42
dim = 16
layers = 2
heads = 2

[attack]
method = "pgd"
steps = 2
seed = 1

[purify]
seeds = [101]

[[purify.grid]]
variant = "v1"
alpha = "32/255"
"#,
    );
    let root_a = dir.path().join("root_a");
    let root_b = dir.path().join("root_b");
    for root in [&root_a, &root_b] {
        run_ok(
            bin()
                .args(["report", "--config"])
                .arg(&cfg_path)
                .env("F3LAB_OUT_ROOT", root),
        );
    }
    let report_a = std::fs::read(root_a.join("run/report.txt")).unwrap();
    let report_b = std::fs::read(root_b.join("run/report.txt")).unwrap();
    assert_eq!(report_a, report_b);
    let records_a = std::fs::read(root_a.join("run/records.csv")).unwrap();
    let records_b = std::fs::read(root_b.join("run/records.csv")).unwrap();
    assert_eq!(records_a, records_b);
}

#[test]
fn bad_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    write(&cfg, "version = 9\nn = 5\nseed = 1\nsplit = \"train\"\nout = \"x.bin\"\n");
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("version"), "stderr: {stderr}");
}

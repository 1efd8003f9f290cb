use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_momentflow"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path, case: &str) -> String {
    let p = dir.join(format!("{case}.txt"));
    std::fs::write(
        &p,
        format!(
            "case = {case}\n\
             data.ics = 4\n\
             data.replicates = 60\n\
             data.steps = 4\n\
             train.hidden = 4\n\
             train.max_epochs = 2\n\
             train.batch_size = 8\n\
             eval.resolution = 6\n\
             eval.kv = 2\n\
             eval.kl_replicates = 200\n"
        ),
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_train_evaluate_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "colloidal");
    let data = tmp.path().join("data");
    let o = run(&["generate", "--config", &cfg, "--out", data.to_str().unwrap()]);
    ok(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("4 groups, 20 records"), "{stdout}");
    let moments = data.join("moments.csv");
    let first = std::fs::read(&moments).unwrap();

    // same config and seed: identical bytes
    let again = tmp.path().join("again");
    ok(&run(&["generate", "--config", &cfg, "--out", again.to_str().unwrap()]));
    assert_eq!(std::fs::read(again.join("moments.csv")).unwrap(), first);

    let model = tmp.path().join("model");
    let o = run(&["train", "--config", &cfg, "--moments", moments.to_str().unwrap(), "--out", model.to_str().unwrap()]);
    ok(&o);
    for f in ["drift.ckpt", "diffusion.ckpt", "history.csv", "history_diffusion.csv", "config.txt", "training.txt"] {
        assert!(model.join(f).exists(), "missing {f}");
    }
    let hist = std::fs::read_to_string(model.join("history.csv")).unwrap();
    assert!(hist.starts_with("epoch,train_loss,val_loss\n"));
    assert!(hist.lines().count() <= 1 + 1 + 2);

    // retraining with the same seeds gives the same validation loss
    let model2 = tmp.path().join("model2");
    ok(&run(&["train", "--config", &cfg, "--moments", moments.to_str().unwrap(), "--out", model2.to_str().unwrap()]));
    let val = |d: &Path| {
        std::fs::read_to_string(d.join("training.txt")).unwrap().lines().find(|l| l.starts_with("final_val_loss")).unwrap().to_string()
    };
    assert_eq!(val(&model), val(&model2));

    let eval = tmp.path().join("eval");
    let o = run(&[
        "evaluate",
        "--config",
        &cfg,
        "--checkpoints",
        model.to_str().unwrap(),
        "--moments",
        moments.to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
    ]);
    ok(&o);
    let summary = std::fs::read_to_string(eval.join("summary.txt")).unwrap();
    assert_eq!(summary.lines().filter(|l| l.starts_with("rmse.")).count(), 2);
    assert!(summary.contains("kl.control_total"));
    let grid = std::fs::read_to_string(eval.join("grid.csv")).unwrap();
    assert!(grid.starts_with("in_0,in_1,g1_truth,g1_learned,g1_abs_err,g2_truth,g2_learned,g2_abs_err,extrapolated"));
    assert_eq!(grid.lines().count(), 1 + 36);
    assert!(eval.join("kl.csv").exists());
}

#[test]
fn sir_trains_one_network() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "sir");
    let out = tmp.path().join("run");
    ok(&run(&["reproduce", "--config", &cfg, "--out", out.to_str().unwrap()]));
    assert!(out.join("drift.ckpt").exists());
    assert!(!out.join("diffusion.ckpt").exists());
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert_eq!(summary.lines().filter(|l| l.starts_with("rmse.")).count(), 1);
}

#[test]
fn reproduce_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "lotka_volterra");
    let out = tmp.path().join("lv");
    ok(&run(&["reproduce", "--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap()]));
    for f in ["config.txt", "moments.csv", "moments.csv.meta", "generation.txt", "drift.ckpt", "diffusion.ckpt", "grid.csv", "kl.csv", "summary.txt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert_eq!(summary.lines().filter(|l| l.starts_with("rmse.")).count(), 4);
    // the saved config reproduces the run's data
    let again = tmp.path().join("again");
    ok(&run(&["generate", "--config", out.join("config.txt").to_str().unwrap(), "--out", again.to_str().unwrap()]));
    assert_eq!(std::fs::read(again.join("moments.csv")).unwrap(), std::fs::read(out.join("moments.csv")).unwrap());
}

#[test]
fn propagator_sweep_covers_three_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "colloidal");
    let out = tmp.path().join("sweep");
    ok(&run(&["reproduce", "--config", &cfg, "--sweep", "propagator", "--out", out.to_str().unwrap()]));
    let table = std::fs::read_to_string(out.join("sweep_propagator.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "factor,value,rmse_g1,rmse_g2,final_val_loss");
    let values: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["linearization", "ut2m", "ut4m"]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // usage errors
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["generate"]).status.code(), Some(1));
    assert_eq!(run(&["generate", "nowhere"]).status.code(), Some(1));
    let cfg = tiny_config(tmp.path(), "colloidal");
    assert_eq!(run(&["generate", "--config", &cfg, "--propagator", "magic"]).status.code(), Some(1));
    let bad = tmp.path().join("bad.txt");
    std::fs::write(&bad, "case = colloidal\ndata.replicates = 1\n").unwrap();
    assert_eq!(run(&["generate", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(run(&["reproduce", "--config", &cfg, "--sweep", "nope"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    // runtime errors
    let missing = tmp.path().join("missing.csv");
    let o = run(&["train", "--config", &cfg, "--moments", missing.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = run(&["evaluate", "--config", &cfg, "--checkpoints", empty.to_str().unwrap(), "--out", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_rejects_checkpoints_of_another_case() {
    let tmp = tempfile::tempdir().unwrap();
    let sir = tiny_config(tmp.path(), "sir");
    let colloidal = tiny_config(tmp.path(), "colloidal");
    let out = tmp.path().join("sir");
    ok(&run(&["reproduce", "--config", &sir, "--out", out.to_str().unwrap()]));
    let o = run(&["evaluate", "--config", &colloidal, "--checkpoints", out.to_str().unwrap(), "--out", tmp.path().join("e").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

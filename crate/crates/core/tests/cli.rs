mod common;

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_hybrid-synapse");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("MNIST_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, data: &Path, epochs: u32, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "seed = 5\n[dataset]\ndir = {:?}\n[trainer]\nepochs = {epochs}\nbatch_size = 20\n{extra}\n",
        data.to_str().unwrap()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn fixture() -> (tempfile::TempDir, std::path::PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    common::write_fixture(&data, 400, 100);
    (tmp, data)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn ramp_writes_127_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = run(&["ramp", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(out.join("ramp.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 127);
    assert_eq!(rows[0], "0,0,5");
    assert_eq!(rows[126], "126,0,5");
}

#[test]
fn ramp_calibrated_eight_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = run(&[
        "ramp",
        "--mode",
        "calibrated",
        "--bits",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(out.join("ramp.csv")).unwrap();
    assert_eq!(text.lines().count(), 512);
}

#[test]
fn timing_reports_interval() {
    let o = run(&["timing"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("max_transfer_interval = 307"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("t.toml");
    std::fs::write(&cfg, "[trainer]\nt_batch_ns = 2150\n").unwrap();
    let o = run(&["timing", "--config", cfg.to_str().unwrap()]);
    assert!(stdout(&o).contains("max_transfer_interval = 100"));
}

#[test]
fn train_is_byte_identical_across_thread_counts() {
    let (tmp, data) = fixture();
    let cfg = write_config(tmp.path(), &data, 2, "record_events = true");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let o = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.iter().any(|n| n == "run_log.csv"));
    assert!(names.iter().any(|n| n == "events_layer1.csv"));
    for name in names {
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
    let log = std::fs::read_to_string(a.join("run_log.csv")).unwrap();
    assert_eq!(
        log.lines().next().unwrap(),
        "epoch,batch,test_accuracy,cum_lsb_loss,msb_writes_total,sim_time_ns"
    );
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().last().unwrap().ends_with(",28000"));
}

#[test]
fn zero_learning_rate_gives_flat_accuracy() {
    let (tmp, data) = fixture();
    let cfg = write_config(tmp.path(), &data, 2, "learning_rate = 0.0");
    let out = tmp.path().join("o");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--policy",
        "ideal",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let log = std::fs::read_to_string(out.join("run_log.csv")).unwrap();
    let acc: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert!(acc.iter().all(|a| *a == acc[0]), "{acc:?}");
}

#[test]
fn sweep_emits_one_row_per_interval() {
    let (tmp, data) = fixture();
    let cfg = write_config(tmp.path(), &data, 2, "");
    let out = tmp.path().join("o");
    let o = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--intervals",
        "100,300",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "interval,policy,test_accuracy,cum_lsb_loss,msb_writes_total"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("100,midrange,"));
    assert!(lines[2].starts_with("300,midrange,"));
}

#[test]
fn baseline_and_env_override() {
    let (tmp, data) = fixture();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[dataset]\ndir = \"/does/not/exist\"\n[trainer]\nepochs = 1\nbatch_size = 50\n",
    )
    .unwrap();
    let out = tmp.path().join("o");
    let o = Command::new(BIN)
        .args([
            "train",
            "--baseline",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .env("MNIST_DIR", &data)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // float weights leave no checkpoints
    assert!(!out.join("checkpoint_layer0.csv").exists());
}

#[test]
fn snapshot_applies_idle_decay() {
    let (tmp, data) = fixture();
    let cfg = write_config(tmp.path(), &data, 1, "");
    let out = tmp.path().join("o");
    assert!(run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap()
    ])
    .status
    .success());
    let ckpt = out.join("checkpoint_layer1.csv");
    let snap_out = tmp.path().join("s");
    let o = run(&[
        "snapshot",
        "--input",
        ckpt.to_str().unwrap(),
        "--idle-ns",
        "3225000",
        "--out",
        snap_out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("shape = 200x10"));
    // 15 decay quanta empty every LSB
    let text = std::fs::read_to_string(snap_out.join("snapshot.csv")).unwrap();
    for line in text.lines().skip(1) {
        for v in line.split(',') {
            assert_eq!(v.parse::<u16>().unwrap() % 16, 0);
        }
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[device]\nunknown_key = 1\n").unwrap();
    assert_eq!(
        run(&["ramp", "--config", bad.to_str().unwrap()])
            .status
            .code(),
        Some(3)
    );

    let missing = tmp.path().join("missing.toml");
    assert_eq!(
        run(&["ramp", "--config", missing.to_str().unwrap()])
            .status
            .code(),
        Some(4)
    );

    let cfg = tmp.path().join("c.toml");
    std::fs::write(
        &cfg,
        format!(
            "[dataset]\ndir = {:?}\n",
            tmp.path().join("none").to_str().unwrap()
        ),
    )
    .unwrap();
    assert_eq!(
        run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--interval",
            "0"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        run(&["train", "--config", cfg.to_str().unwrap()])
            .status
            .code(),
        Some(4)
    );

    let (tmp2, data) = fixture();
    let mismatch = tmp2.path().join("m.toml");
    std::fs::write(
        &mismatch,
        format!(
            "[dataset]\ndir = {:?}\nresize = [10, 10]\n",
            data.to_str().unwrap()
        ),
    )
    .unwrap();
    assert_eq!(
        run(&["train", "--config", mismatch.to_str().unwrap()])
            .status
            .code(),
        Some(5)
    );

    let o = run(&["ramp", "--bits", "7"]);
    assert!(!o.status.success());
}

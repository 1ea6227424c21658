//! End-to-end runs of the `uwbslam` binary.

use std::path::Path;
use std::process::{Command, Output};

fn uwbslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uwbslam")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SHORT: [&str; 6] = [
    "--set",
    "scenario.duration=60",
    "--set",
    "pipeline.estimator.tau=15",
    "--set",
    "pipeline.final_rounds=50",
];

#[test]
fn generate_run_and_metrics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.txt");
    let out = dir.path().join("run");
    let mut args = vec!["generate", "--out", data.to_str().unwrap()];
    args.extend(SHORT);
    ok(&uwbslam(&args));
    assert!(data.exists());

    let mut args = vec!["run", "--dataset", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(SHORT);
    let text = ok(&uwbslam(&args));
    for file in ["trajectories.txt", "closures.txt", "cost_trace.csv", "comm.csv", "metrics.csv", "config.toml"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    assert!(text.contains("dpgo"), "{text}");

    let again = ok(&uwbslam(&["metrics", "--dir", out.to_str().unwrap(), "--dataset", data.to_str().unwrap()]));
    let lines = |s: &str| s.lines().filter(|l| l.starts_with("dpgo")).map(str::to_owned).collect::<Vec<_>>();
    assert_eq!(lines(&text), lines(&again));
}

#[test]
fn resolved_config_honours_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("cfg.toml");
    std::fs::write(&file, "[pipeline.estimator]\ntau = 25\n[pipeline.pcm]\nepsilon = 0.2\n").unwrap();
    let text = ok(&uwbslam(&[
        "--config",
        file.to_str().unwrap(),
        "--set",
        "pipeline.pcm.epsilon=0.05",
        "--seed",
        "9",
        "--print-config",
    ]));
    assert!(text.contains("tau = 25.0"), "{text}");
    assert!(text.contains("epsilon = 0.05"), "{text}");
    assert!(text.contains("seeds = [9]"), "{text}");
}

#[test]
fn errors_exit_nonzero_with_message() {
    for args in [
        vec!["--set", "pipeline.pcm.epsilon=1.5", "--print-config"],
        vec!["--set", "nosuch.key=1", "--print-config"],
        vec!["sweep", "--preset", "nosuch"],
        vec!["metrics", "--dir", "/nonexistent/dir"],
    ] {
        let out = uwbslam(&args);
        assert!(!out.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{args:?}");
    }
}

fn check_csv(path: &Path, column: &str) {
    let text = std::fs::read_to_string(path).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.split(',').any(|c| c == column), "{header}");
    assert!(text.lines().count() > 1);
}

#[test]
fn sweep_then_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&uwbslam(&[
        "sweep",
        "--preset",
        "tab1",
        "--out",
        d,
        "--set",
        "scenario.duration=80",
        "--set",
        "sweep.tau=[10, 20]",
        "--set",
        "sweep.seeds=[0]",
        "--set",
        "sweep.eval_stride=40",
    ]));
    check_csv(&dir.path().join("sweep_tab1.csv"), "tau");
    ok(&uwbslam(&["plot-data", "--dir", d]));
    check_csv(&dir.path().join("plot_tab1.csv"), "seeds");
}

//! End-to-end runs of the `lma` binary: exit codes, artifacts on disk and
//! the determinism contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lma")
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("lma-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn multislice_config(out: &Path) -> String {
    format!(
        r#"
seed = 0
out_dir = "{}"

[grid]
nx = 32
ny = 32
lx = 12.8
ly = 12.8

[microscope]
lambda = 0.0250793
cs = -2000.0
z = 100.0
alpha_max = 0.026
sigma = 0.05

[specimen]
source = "synthetic"
eps = 2.0
n_slices = 2

[[specimen.atoms]]
x = 4.0
y = 5.0
z = 1.0
amplitude = 25.0
width = 0.4

[[specimen.atoms]]
x = 9.0
y = 8.5
z = 3.0
amplitude = 20.0
width = 0.35

[probes]
counts = [16, 16]
x0 = 4
y0 = 4
width = 4
height = 4

[solver]
kind = "multislice"

[[detectors]]
name = "bf"
mode = "2d"
r1 = 0.0
r2 = 15.0

[[detectors]]
name = "haadf"
mode = "2d"
r1 = 41.0
r2 = 200.0
"#,
        out.display()
    )
}

fn lma_config(out: &Path) -> String {
    format!(
        r#"
seed = 3
out_dir = "{}"

[grid]
nx = 32
ny = 32
lx = 12.8
ly = 12.8

[microscope]
lambda = 0.0250793
cs = -2000.0
z = 100.0
alpha_max = 0.026
sigma = 0.05

[specimen]
source = "synthetic"
eps = 2.0
n_slices = 2

[[specimen.atoms]]
x = 4.0
y = 5.0
z = 1.0
amplitude = 25.0
width = 0.4

[probes]
counts = [16, 16]

[solver]
kind = "lma"

[solver.lma]
wave = "gaussian"
f = 2
l = 4
lattice = "half_shift"
memory_bound = 12
strategy = "greedy"

[recompute]
atom_index = 0
amplitude = 40.0

[[detectors]]
name = "bf"
mode = "2d"
r1 = 0.0
r2 = 15.0
"#,
        out.display()
    )
}

#[test]
fn simulate_multislice_writes_artifacts_and_counters() {
    let dir = scratch("ms");
    let out = dir.join("run");
    let cfg = write_config(&dir, "run.toml", &multislice_config(&out));
    let result = run(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    assert!(out.join("bf.lmaimg").exists());
    assert!(out.join("bf.pgm").exists());
    assert!(out.join("haadf.lmaimg").exists());
    let counters = std::fs::read_to_string(out.join("counters.txt")).unwrap();
    // 16 probes through 2 slices: 2 N |probes| FFTs.
    assert!(counters.contains("multislice_calls      16"), "{counters}");
    assert!(counters.contains("fft_count             64"), "{counters}");
    assert!(
        counters.contains("modeled_multislice_calls 16"),
        "{counters}"
    );
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn simulate_is_bit_deterministic() {
    let dir = scratch("det");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    let cfg = write_config(&dir, "run.toml", &lma_config(&out_a));
    let first = run(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let second = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
        "--workers",
        "2",
        "simulate",
    ]);
    assert!(
        second.status.success(),
        "{}",
        String::from_utf8_lossy(&second.stderr)
    );
    for name in [
        "bf.lmaimg",
        "plan.lmaplan",
        "fit_errors.csv",
        "counters.txt",
    ] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn unknown_config_key_is_a_hard_error() {
    let dir = scratch("badkey");
    let out = dir.join("run");
    let mut body = multislice_config(&out);
    body.push_str("\n[solver.lmma]\nf = 2\n");
    let cfg = write_config(&dir, "bad.toml", &body);
    let result = run(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("config error"), "{stderr}");
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn invalid_lattice_is_a_config_error_with_field_path() {
    let dir = scratch("badlattice");
    let out = dir.join("run");
    // 12 probes do not divide the 32-pixel axis.
    let body = multislice_config(&out).replace("counts = [16, 16]", "counts = [12, 12]");
    let cfg = write_config(&dir, "bad.toml", &body);
    let result = run(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("probes.counts"), "{stderr}");
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn crossover_reports_f4_at_experiment_scale() {
    let result = run(&[
        "crossover",
        "--x",
        "2048",
        "--y",
        "2048",
        "--k1",
        "25",
        "--k2",
        "25",
    ]);
    assert!(result.status.success());
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("minimal integer f = 4"), "{stdout}");
}

#[test]
fn compare_reports_per_detector_errors() {
    let dir = scratch("cmp");
    let out_ms = dir.join("ms");
    let out_lma = dir.join("lma");
    let cfg_ms = write_config(&dir, "ms.toml", &multislice_config(&out_ms));
    // Same probes subset as the multislice run for comparable images.
    let lma_body = lma_config(&out_lma).replace(
        "counts = [16, 16]",
        "counts = [16, 16]\nx0 = 4\ny0 = 4\nwidth = 4\nheight = 4",
    );
    let cfg_lma = write_config(&dir, "lma.toml", &lma_body);
    assert!(run(&["--config", cfg_ms.to_str().unwrap(), "simulate"])
        .status
        .success());
    assert!(run(&["--config", cfg_lma.to_str().unwrap(), "simulate"])
        .status
        .success());
    let result = run(&[
        "compare",
        out_ms.to_str().unwrap(),
        out_lma.to_str().unwrap(),
    ]);
    assert!(result.status.success());
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("bf.lmaimg"), "{stdout}");
    assert!(
        stdout.contains("missing") || stdout.contains("haadf"),
        "{stdout}"
    );
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn probe_approx_writes_csv() {
    let dir = scratch("approx");
    let out = dir.join("run");
    let cfg = write_config(&dir, "run.toml", &lma_config(&out));
    let result = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "probe-approx",
        "--f-list",
        "1,2",
        "--l-list",
        "1,2,4",
    ]);
    assert!(
        result.status.success(),
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
    let csv = std::fs::read_to_string(out.join("probe_approx.csv")).unwrap();
    assert!(csv.starts_with("f,l,error_euclid,error_sup\n"));
    // Two f values times three L values.
    assert_eq!(csv.lines().count(), 1 + 6, "{csv}");
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn partition_report_writes_costs_and_maps() {
    let dir = scratch("parts");
    let out = dir.join("run");
    let cfg = write_config(&dir, "run.toml", &lma_config(&out));
    let result = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "partition-report",
        "--memory",
        "4,8",
    ]);
    assert!(
        result.status.success(),
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
    let report = std::fs::read_to_string(out.join("partition_report.txt")).unwrap();
    assert!(report.contains("minimum_multislice_calls"), "{report}");
    for tag in ["row_by_row", "rectangles", "greedy"] {
        assert!(
            report.contains(&format!("strategy {tag} memory_bound 4")),
            "{report}"
        );
        assert!(out.join(format!("partition_{tag}_m8.pgm")).exists());
    }
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn recompute_demo_verifies_and_reports_savings() {
    let dir = scratch("redo");
    let out = dir.join("run");
    let cfg = write_config(&dir, "run.toml", &lma_config(&out));
    let result = run(&["--config", cfg.to_str().unwrap(), "recompute-demo"]);
    assert!(
        result.status.success(),
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("partial vs full rel error"), "{stdout}");
    assert!(stdout.contains("probes redone"), "{stdout}");
    assert!(out.join("bf_recomputed.lmaimg").exists());
    std::fs::remove_dir_all(dir).ok();
}

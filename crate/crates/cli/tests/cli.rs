use std::path::Path;
use std::process::{Command, Output};

const HATCHES: &str = "\
$$HEADERSTART
$$ASCII
$$UNITS/1
$$HEADEREND
$$GEOMETRYSTART
$$LAYER/0.25
$$HATCHES/1,2,1,1.25,3,1.25,3,1.75,1,1.75
$$LAYER/0.5
$$HATCHES/1,2,1.25,1,1.25,3,1.75,3,1.75,1
$$GEOMETRYEND
";

fn growfem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_growfem"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn layer_config(extra: &str) -> String {
    format!(
        "mesh.size = 4\nmesh.min_level = 1\nmesh.max_level = 4\nmesh.search_min_level = 1\n\
         run.mode = layer\nrun.layers = 2\nrun.footprint = 1, 1, 3, 3\n\
         process.layer_thickness = 0.25\n{extra}"
    )
}

#[test]
fn parse_cli_reports_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "part.cli", HATCHES);
    let out = growfem(&["parse-cli", &f]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("layers      2"), "{stdout}");
    assert!(stdout.contains("hatches     4"), "{stdout}");
    assert!(stdout.contains("scan length 8.000000 mm"), "{stdout}");
}

#[test]
fn parse_cli_error_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "bad.cli", &HATCHES.replace("$$LAYER/0.5", "$$LAYER/0.1"));
    let out = growfem(&["parse-cli", &f]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("bad.cli:8:"), "{stderr}");
}

#[test]
fn simulate_layer_mode_writes_reports_and_vtk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.cfg", &layer_config(""));
    let out_dir = dir.path().join("out");
    let out = growfem(&[
        "simulate",
        "--config",
        &cfg,
        "--parts",
        "3",
        "--vtk-every",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("4 steps"), "{stdout}");
    for name in ["steps.csv", "imbalance.csv", "timers.csv", "report.json", "step_00002.vtk", "step_00004.vtk"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    assert!(!out_dir.join("step_00001.vtk").exists());
    let imbalance = std::fs::read_to_string(out_dir.join("imbalance.csv")).unwrap();
    assert!(imbalance.starts_with("step,quantity,mean,sigma,cv\n"));
}

#[test]
fn simulate_path_mode() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "part.cli", HATCHES);
    let cfg = write(
        dir.path(),
        "run.cfg",
        &layer_config("run.mode = path\npath.cli_file = part.cli\nprocess.step_length = 1\nprocess.laser_width = 0.5\n")
            .replace("run.mode = layer\n", ""),
    );
    let out = growfem(&["simulate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    // Per layer: 2 hatches of 2 subsegments, one relocation, one recoat.
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("12 steps"));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write(dir.path(), "a.cfg", &layer_config("mesh.colour = red\n"));
    let missing_cli = write(
        dir.path(),
        "b.cfg",
        &layer_config("path.cli_file = nowhere.cli\n").replace("run.mode = layer", "run.mode = path"),
    );
    for cfg in [unknown.as_str(), missing_cli.as_str(), "/nonexistent/run.cfg"] {
        let out = growfem(&["simulate", "--config", cfg]);
        assert_eq!(out.status.code(), Some(2), "{cfg}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = growfem(&["bench-verification", "--refinements", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solver_failure_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.cfg", &layer_config("solver.tol = 1e-14\nsolver.max_iters = 1\n"));
    let out = growfem(&["simulate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

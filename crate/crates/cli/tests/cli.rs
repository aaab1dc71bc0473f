use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pdgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdgs"))
        .args(args)
        .env_remove("PDGS_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn case(n: usize) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join(format!("../../cases/case{n}.json"))
        .to_string_lossy()
        .into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
    "name": "tiny",
    "mesh": {"source": {"kind": "rectangle", "nx": 3, "ny": 3, "min": [0, 0], "max": [1, 1]}},
    "pde": {"source": SOURCE},
    "model": {"architecture": "2+8x2+1", "seed": 4},
    "train": {"max_epochs": 4, "val_every": 2, "seed": 4},
    "reference": {"kind": "same_mesh_fem"}
}"#;

const TINY_GRF: &str = r#"{
    "name": "tiny_grf",
    "mesh": {"source": {"kind": "grid_with_centers", "nx": 3, "ny": 3, "min": [0, 0], "max": [1, 1], "inset": 1}},
    "pde": {"source": {"name": "grf"}},
    "model": {"architecture": "3+8x2+1", "batchnorm": true, "edge_feature": {"kind": "distance", "eps": 1.05, "l_max": 1.0}},
    "train": {"max_epochs": 2, "batch_size": 2, "val_every": 1},
    "reference": {"kind": "same_mesh_fem"},
    "grf": {"r": 6.0, "grid_n": 32},
    "dataset": {"train": 4, "val": 2, "test": 3, "seed": 10}
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn residual_check_passes_on_bundled_case() {
    let o = pdgs(&["residual-check", "--config", &case(3), "--trials", "100"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let value: f64 = line.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(value <= 1e-10, "{line}");
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(pdgs(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(pdgs(&["train", "--no-such-flag"]).status.code(), Some(64));
    assert_eq!(pdgs(&["--help"]).status.code(), Some(0));
}

#[test]
fn schema_errors_exit_1_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &TINY.replace("SOURCE", "1.0").replace("\"nx\": 3", "\"nx\": -3"));
    let o = pdgs(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/mesh/source"), "{}", stderr(&o));
    let missing = pdgs(&["train", "--config", "/nonexistent/case.json", "--out", p(dir.path())]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn invalid_thread_count_is_a_validation_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_pdgs"))
        .args(["mesh", "info", "--config", &case(5)])
        .env("PDGS_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "huge.json", &TINY.replace("SOURCE", "1e300").replace("same_mesh_fem", "none"));
    let o = pdgs(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch 1"), "{}", stderr(&o));
}

#[test]
fn train_then_infer_round_trip_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", &TINY.replace("SOURCE", "1.0"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = pdgs(&["train", "--config", p(&cfg), "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["best.json", "solution.csv", "solution.vtk", "case.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss,val_rel_l2,seconds\n"));
    assert_eq!(history.lines().count(), 5);

    let o = pdgs(&["infer", "--model", p(&a.join("best.json"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean inference"));
    let inferred = fs::read_to_string(a.join("infer/solution_0.csv")).unwrap();
    assert_eq!(inferred, fs::read_to_string(a.join("solution.csv")).unwrap());
    assert!(inferred.starts_with("node_id,x,y,u\n"));
}

#[test]
fn parametric_train_and_infer_one_solution_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "grf.json", TINY_GRF);
    let run = dir.path().join("run");
    let o = pdgs(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("test rel L2 mean"));
    let sources = fs::read_to_string(run.join("test_sources.csv")).unwrap();
    assert_eq!(sources.lines().count(), 3);
    let o = pdgs(&[
        "infer",
        "--model",
        p(&run.join("best.json")),
        "--mu",
        p(&run.join("test_sources.csv")),
        "--vtk",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..3 {
        assert!(run.join(format!("infer/solution_{i}.csv")).exists());
        assert!(run.join(format!("infer/solution_{i}.vtk")).exists());
    }
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("sample")).count(), 3);
    assert!(!run.join("infer/solution_3.csv").exists());

    let bad = pdgs(&["infer", "--model", p(&run.join("best.json"))]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn mesh_commands() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    let o = pdgs(&["mesh", "gen", "--kind", "slit", "--n", "4", "--out", p(&m)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let fine = dir.path().join("fine.json");
    let o = pdgs(&["mesh", "refine", "--mesh", p(&m), "--center", "0,0", "--radius", "0.3", "--levels", "2", "--out", p(&fine)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let coarse: f64 = triangles(&stdout(&pdgs(&["mesh", "info", "--mesh", p(&m)])));
    let refined: f64 = triangles(&stdout(&pdgs(&["mesh", "info", "--mesh", p(&fine)])));
    assert!(refined > coarse);
    let info = stdout(&pdgs(&["mesh", "info", "--config", &case(5)]));
    assert!(info.contains("p2_nodes 157"), "{info}");
    assert!(info.contains("dirichlet_nodes 40"), "{info}");
}

fn triangles(info: &str) -> f64 {
    info.lines().find_map(|l| l.strip_prefix("triangles ")).unwrap().parse().unwrap()
}

#[test]
fn grf_gen_grid_and_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("field.csv");
    let o = pdgs(&["grf", "gen", "--r", "6", "--grid-n", "16", "--seed", "3", "--out", p(&grid)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&grid).unwrap();
    assert!(text.starts_with("x,y,value\n"));
    assert_eq!(text.lines().count(), 1 + 16 * 16);
    let nodes = dir.path().join("mu.csv");
    let o = pdgs(&["grf", "gen", "--config", &case(5), "--count", "4", "--out", p(&nodes)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<usize> = fs::read_to_string(&nodes).unwrap().lines().map(|l| l.split(',').count()).collect();
    assert_eq!(rows, vec![157; 4]);
    let bad = pdgs(&["grf", "gen", "--grid-n", "48", "--out", p(&grid)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn gradcheck_and_oracle() {
    let o = pdgs(&["gradcheck", "--config", &case(3)]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("max rel err"));
    let dir = tempfile::tempdir().unwrap();
    let o = pdgs(&["oracle", "--config", &case(3), "--out", p(dir.path()), "--reference"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["oracle.csv", "oracle.vtk", "reference.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let o = pdgs(&["oracle", "--config", &case(5), "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("oracle_0.csv").exists());
}

#[test]
fn sweep_writes_grid_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "tiny.json",
        &TINY.replace("SOURCE", "1.0").replace("\"2+8x2+1\"", "\"2+8+8x2+1\""),
    );
    let out = dir.path().join("sweep");
    let o = pdgs(&[
        "sweep", "--config", p(&cfg), "--out", p(&out), "--kinds", "gamma1,gamma2", "--sigmas", "1,3", "--epochs", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "{csv}");
}

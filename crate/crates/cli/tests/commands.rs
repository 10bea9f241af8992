use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stiffkit"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn stiffkit")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

/// Rows with the named columns blanked out.
fn without(path: &Path, columns: &[&str]) -> Vec<Vec<String>> {
    let (header, mut rows) = read_csv(path);
    let drop: Vec<usize> = columns.iter().map(|c| header.iter().position(|h| h == c).unwrap()).collect();
    for r in &mut rows {
        for &i in &drop {
            r[i].clear();
        }
    }
    rows
}

fn smib() -> String {
    scenario("smib_fault.json").display().to_string()
}

#[test]
fn simulate_writes_every_rate_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let s = smib();
    for dir in [&a, &b] {
        let o = run(&["simulate", &s], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    // t_end = 2 s at truth_dt = 1/63000 s.
    let (header, rows) = read_csv(&a.path().join("truth.csv"));
    assert_eq!(header, ["t", "delta", "omega", "p_f", "v_g", "p"]);
    assert_eq!(rows.len(), 126_001);
    for (fps, n) in [(20, 41), (25, 51), (35, 71), (45, 91)] {
        let name = format!("meas_{fps}fps.csv");
        assert_eq!(read_csv(&a.path().join(&name)).1.len(), n, "{name}");
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
    assert_eq!(fs::read(a.path().join("truth.csv")).unwrap(), fs::read(b.path().join("truth.csv")).unwrap());
    let leftovers: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn malformed_scenarios_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("smib_fault.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v.as_object_mut().unwrap().remove("model");
    let path = dir.path().join("no_model.json");
    fs::write(&path, v.to_string()).unwrap();
    let o = run(&["simulate", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model"), "{}", stderr(&o));

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["colour"] = "blue".into();
    fs::write(&path, v.to_string()).unwrap();
    let o = run(&["simulate", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));

    let o = run(&["simulate", "/nonexistent/scenario.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["estimate", &smib(), "--filter", "sa", "--fps", "44"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fps 44"), "{}", stderr(&o));

    let o = run(&["estimate", &smib(), "--filter", "ekf", "--fps", "45"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sa_estimate_completes_at_45_fps() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["estimate", &smib(), "--filter", "sa", "--fps", "45"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("estimate_sa_45fps.csv"));
    assert!(!header.iter().any(|h| h.starts_with("newton")));
    assert_eq!(rows.len(), 90);
    let last = rows.last().unwrap();
    for (h, v) in header.iter().zip(last) {
        if h.starts_with("var_") {
            let v: f64 = v.parse().unwrap();
            assert!(v.is_finite() && v >= 0.0, "{h} = {v}");
        }
    }
}

#[test]
fn rk4_divergence_has_its_own_exit_code_and_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["estimate", &smib(), "--filter", "rk4", "--fps", "20"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let (_, rows) = read_csv(&dir.path().join("estimate_rk4_20fps.csv"));
    assert!(!rows.is_empty() && rows.len() < 40, "{} rows", rows.len());
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn be_estimate_reports_newton_iterations() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = run(&["estimate", &smib(), "--filter", "be", "--fps", "25"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let path = a.path().join("estimate_be_25fps.csv");
    let (header, rows) = read_csv(&path);
    assert_eq!(&header[header.len() - 2..], ["newton_avg", "newton_max"]);
    for r in &rows {
        let max: usize = r.last().unwrap().parse().unwrap();
        assert!((1..=50).contains(&max));
    }
    assert_eq!(
        without(&path, &["step_us"]),
        without(&b.path().join("estimate_be_25fps.csv"), &["step_us"])
    );
}

#[test]
fn stability_membership_per_rate() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["stability", &smib(), "--fps", "25,35,45,1e6"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("stability.csv"));
    assert_eq!(header, ["fps", "index", "re_lambda", "im_lambda", "re_hlambda", "im_hlambda", "abs_R", "inside"]);
    let all_inside = |fps: &str| rows.iter().filter(|r| r[0] == fps).all(|r| r[7] == "true");
    assert!(!all_inside("25"));
    assert!(!all_inside("35"));
    assert!(all_inside("45"));
    assert!(all_inside("1000000"));
    assert_eq!(rows.len(), 12);
}

#[test]
fn sweep_report_matches_contract() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = run(&["sweep", &smib(), "--methods", "sa,rk4,be", "--fps", "20,25,45"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let path = a.path().join("sweep.csv");
    let (header, rows) = read_csv(&path);
    assert_eq!(
        header,
        ["method", "fps", "state", "rmse", "avg_ms", "max_ms", "newton_avg", "newton_max", "outcome"]
    );
    assert_eq!(rows.len(), 3 * 3 * 3);
    let outcome = |m: &str, f: &str| rows.iter().find(|r| r[0] == m && r[1] == f).unwrap()[8].clone();
    assert_eq!(outcome("rk4", "20"), "divergent");
    assert_eq!(outcome("sa", "20"), "ok");
    assert_eq!(outcome("be", "20"), "ok");
    for r in &rows {
        assert_eq!(r[6].is_empty(), r[0] != "be");
    }
    let timing = ["avg_ms", "max_ms"];
    assert_eq!(without(&path, &timing), without(&b.path().join("sweep.csv"), &timing));
}

#[test]
fn order_prints_slopes_near_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["order", &smib()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let slopes: Vec<f64> = stdout
        .lines()
        .filter(|l| l.contains("slope"))
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(slopes.len(), 2, "{stdout}");
    for s in slopes {
        assert!((1.7..=2.3).contains(&s), "slope {s}");
    }
    let first = fs::read(dir.path().join("order.csv")).unwrap();
    let o = run(&["order", &smib()], dir.path());
    assert!(o.status.success());
    assert_eq!(first, fs::read(dir.path().join("order.csv")).unwrap());
}

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_entroproj"))
}

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const CASE_THREE: &str = r#"
seed = 3
[instance]
family = "drifted_bm"
x0_mean = 1.0
x0_var = 1.0
horizon = 1.0
steps = 10
"#;

#[test]
fn oracle_case_three_emits_initial_atom() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", CASE_THREE);
    let out = tmp.path().join("out");
    let st = bin().args(["oracle", "-c"]).arg(&cfg).arg("-o").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(v["multiplier"], serde_json::json!([[0.0, 1.0]]));
    assert_eq!(v["initial_law"], serde_json::json!([0.0, 1.0]));
    for f in ["manifest.json", "results.csv", "series.csv", "summary.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn negative_variance_exits_two_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &CASE_THREE.replace("x0_var = 1.0", "x0_var = -1.0"));
    let out = bin().args(["oracle", "-c"]).arg(&cfg).arg("-o").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let d: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(d["field"], "instance.x0_var");
    assert_eq!(d["exit_code"], 2);
}

#[test]
fn unknown_key_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"seed": 1, "sampling": {"paths": 10, "thin": 2}}"#);
    let out = bin().args(["solve-dual", "-c"]).arg(&cfg).arg("-o").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let d: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(d["field"], "sampling.thin");
}

#[test]
fn solver_budget_exhaustion_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{CASE_THREE}\n[sampling]\npaths = 500\n[solver]\nmax_iters = 1\n");
    let cfg = write(tmp.path(), "c.toml", &body);
    let out = tmp.path().join("o");
    let st = bin().args(["solve-dual", "-c"]).arg(&cfg).arg("-o").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(3));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "not_converged");
}

fn read_all(dir: &Path, skip: &str) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != skip)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{CASE_THREE}\n[sampling]\npaths = 2000\n[stability]\neps = [0.0, 0.05, 0.1]\n");
    let cfg = write(tmp.path(), "c.toml", &body);
    for cmd in ["solve-dual", "stability"] {
        let (a, b) = (tmp.path().join(format!("{cmd}-a")), tmp.path().join(format!("{cmd}-b")));
        for d in [&a, &b] {
            assert_eq!(bin().arg(cmd).arg("-c").arg(&cfg).arg("-o").arg(d).status().unwrap().code(), Some(0));
        }
        let (fa, fb) = (read_all(&a, "manifest.json"), read_all(&b, "manifest.json"));
        assert!(fa.len() >= 3);
        assert_eq!(fa, fb, "{cmd}");
    }
}

#[test]
fn verify_quick_passes_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for k in 0..2 {
        let dir = tmp.path().join(format!("v{k}"));
        let o = bin().args(["verify", "--quick", "-o"]).arg(&dir).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
        outs.push(std::fs::read(dir.join("results.json")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
}

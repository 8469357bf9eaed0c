use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pdmpnet-cmd-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pdmpnet"));
    c.args(args).arg("--quiet").arg("--out").arg(out);
    if let Some(p) = config {
        c.arg("--config").arg(p);
    }
    c.output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn shipped_config_audits_clean() {
    let dir = scratch("shipped");
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/traffic3.json");
    let o = run(&["audit"], Some(&cfg), &dir);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let audit: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit["passed"], true);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn planted_kernel_defect_fails_the_audit_naming_a3() {
    let dir = scratch("defect");
    let cfg = write_config(&dir, r#"{"model": {"self_jump": 0.25}}"#);
    for cmd in ["audit", "solve"] {
        let o = run(&[cmd], Some(&cfg), &dir);
        assert_eq!(o.status.code(), Some(1));
        let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
        assert_eq!(err["error"], "audit");
        assert_eq!(err["failed"], serde_json::json!(["A3"]));
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn malformed_configs_exit_with_two() {
    let dir = scratch("malformed");
    for text in ["{", r#"{"grid": {"dx": 0.05, "spacing": 1}}"#, r#"{"grid": {"dx": 0}}"#] {
        let cfg = write_config(&dir, text);
        let o = run(&["solve"], Some(&cfg), &dir);
        assert_eq!(o.status.code(), Some(2), "{text}");
        let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
        assert_eq!(err["error"], "config");
    }
    let o = run(&["audit"], Some(&dir.join("missing.json")), &dir);
    assert_eq!(o.status.code(), Some(2));
    let _ = std::fs::remove_dir_all(&dir);
}

fn table(path: &Path) -> (Vec<String>, Vec<String>) {
    let text = std::fs::read_to_string(path).unwrap();
    let (head, body): (Vec<_>, Vec<_>) = text.lines().map(str::to_string).partition(|l| l.starts_with('#'));
    (head, body)
}

#[test]
fn tables_carry_the_config_hash_and_their_schema() {
    let dir = scratch("schema");
    let cfg = write_config(&dir, r#"{"project": {"seeds": 4}}"#);
    for cmd in ["solve", "project", "linearize"] {
        let o = run(&[cmd, "--seed", "3"], Some(&cfg), &dir);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let hash = {
        let (head, _) = table(&dir.join("value.csv"));
        assert_eq!(head[1], "# seed: 3");
        head[0].trim_start_matches("# config_hash: ").to_string()
    };
    assert_eq!(hash.len(), 64);
    let (head, body) = table(&dir.join("duality_report.csv"));
    assert!(head[0].ends_with(&hash));
    assert!(body[0].split(',').any(|c| c == "gap"));
    let (_, body) = table(&dir.join("exponents.csv"));
    assert!(body[0].split(',').any(|c| c == "slope"));
    assert_eq!(body.len(), 1 + 2 * 3);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn solve_is_byte_identical_across_runs() {
    let (a, b) = (scratch("det-a"), scratch("det-b"));
    assert!(run(&["solve"], None, &a).status.success());
    assert!(run(&["solve"], None, &b).status.success());
    assert_eq!(std::fs::read(a.join("value.csv")).unwrap(), std::fs::read(b.join("value.csv")).unwrap());
    let _ = std::fs::remove_dir_all(&a);
    let _ = std::fs::remove_dir_all(&b);
}

#[test]
fn report_needs_artifacts() {
    let dir = scratch("report");
    let o = run(&["report"], None, &dir);
    assert_eq!(o.status.code(), Some(1));
    assert!(run(&["audit"], None, &dir).status.success());
    assert!(run(&["report"], None, &dir).status.success());
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["files"][0]["file"], "audit.json");
    assert_eq!(rep["files"][0]["same_config"], true);
    let _ = std::fs::remove_dir_all(&dir);
}

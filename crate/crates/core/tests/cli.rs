use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "grid.mx=12\ngrid.my=12\ngrid.malpha=20\nbasis.n=3\nbasis.q=200\noutput.formats=csv\n";

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_rte-qrm"))
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn basis_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(dir.path(), SMALL, &["--out", out.to_str().unwrap(), "basis"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mn = fs::read_to_string(out.join("m_n.csv")).unwrap();
    assert_eq!(mn.lines().count(), 3);
    assert!(out.join("basis.csv").exists());
}

#[test]
fn reconstruct_from_forward_data_matches_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (fwd, pipe, rec) = (dir.path().join("fwd"), dir.path().join("pipe"), dir.path().join("rec"));
    let o = run(dir.path(), SMALL, &["--out", fwd.to_str().unwrap(), "forward"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(dir.path(), SMALL, &["--out", pipe.to_str().unwrap(), "pipeline"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let data = fwd.join("boundary.csv");
    let o = run(
        dir.path(),
        SMALL,
        &[
            "--out",
            rec.to_str().unwrap(),
            "reconstruct",
            "--data",
            data.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["f_comp.csv", "f_post.csv", "metrics.csv"] {
        assert_eq!(
            fs::read(pipe.join(name)).unwrap(),
            fs::read(rec.join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(
        fs::read(fwd.join("f_true.csv")).unwrap(),
        fs::read(pipe.join("f_true.csv")).unwrap()
    );
}

#[test]
fn verify_reports_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), SMALL, &["verify", "--trials", "200"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.matches(" 0 violations").count(), 3, "{text}");
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "domain.a=0.5\n", &["basis"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), "no.such.key=1\n", &["basis"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let o = run(dir.path(), SMALL, &["--out", out.to_str().unwrap(), "basis"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_data_file_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        SMALL,
        &["reconstruct", "--data", "/nonexistent/boundary.csv"],
    );
    assert_eq!(o.status.code(), Some(2));
}

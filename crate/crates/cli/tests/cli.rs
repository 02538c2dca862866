use std::path::PathBuf;
use std::process::Command;

fn workdir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("plapx-cli-{}-{}", name, std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn plapx(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_plapx")).args(args).output().unwrap()
}

const SQUARE: &str = "domain.vertices = 0,0; 1,0; 1,1; 0,1\n";

#[test]
fn validate_writes_csv_and_sidecar() {
    let d = workdir("ok");
    let cfg = d.join("ok.cfg");
    std::fs::write(&cfg, format!("{}p.expr = 1.5 + 0.25*x\nf.expr = 1\ng.expr = 0\n", SQUARE)).unwrap();
    let out = d.join("v.csv");
    let o = plapx(&["validate", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&out).unwrap().starts_with("p1,"));
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(side["command"], "validate");
    assert_eq!(side["config"]["p.expr"], "1.5 + 0.25*x");
    std::fs::remove_dir_all(d).unwrap();
}

#[test]
fn warnings_and_errors_set_exit_codes() {
    let d = workdir("codes");
    let warn = d.join("warn.cfg");
    // f nonzero where p > 2
    std::fs::write(&warn, format!("{}p.expr = 2.5\nf.expr = 1\ng.expr = 0\n", SQUARE)).unwrap();
    let out = d.join("w.csv");
    let o = plapx(&["validate", warn.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let o = plapx(&["validate", warn.to_str().unwrap(), "-o", out.to_str().unwrap(), "--warnings-as-errors"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = d.join("bad.cfg");
    std::fs::write(&bad, format!("{}p.expr = 2\nf.expr = 1\ng.expr = 0\nmesh.hh = 0.1\n", SQUARE)).unwrap();
    let o = plapx(&["validate", bad.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mesh.hh"));
    std::fs::remove_dir_all(d).unwrap();
}

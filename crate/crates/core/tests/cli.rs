use std::process::{Command, Output};

fn saol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saol"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "946684800")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(saol(&["train", "--data", "x"]).status.code(), Some(1));
    assert_eq!(saol(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(saol(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_file_exits_two() {
    let o = saol(&["recover-eval", "--learned", "/nonexistent/a.json", "--gt", "/nonexistent/b.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn bound_reports_constants() {
    let o = saol(&[
        "bound", "--factors", "8x7,8x7", "--dense", "64x49", "--lambda", "1", "--samples", "500000", "--delta", "0.05",
    ]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("separable: C = 42.332"), "{s}");
    assert!(s.contains("dense: C = 448.000"), "{s}");
}

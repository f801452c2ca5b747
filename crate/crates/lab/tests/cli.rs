use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_vsrdistill");

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN).arg("--out").arg(out).args(args).env("RUST_LOG", "warn").env_remove("VSRDISTILL_OUT").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "{}\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

#[test]
fn bad_flags_print_usage_and_exit_2() {
    let o = Command::new(BIN).args(["pretrain", "--no-such-flag"]).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = Command::new(BIN).args(["ablate", "--grid", "nonsense"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn config_errors_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("schema_version = 1\n[stage2]\nlambda_gan = -1.0\n", 11, "invariant"),
        ("schema_version = 1\n[stage2]\nlamda_gan = 0.1\n", 10, "unknown-key"),
        ("schema_version = 2\n", 12, "version"),
        ("schema_version = 1\nseed = [\n", 13, "parse"),
    ];
    for (i, (text, want, kind)) in cases.iter().enumerate() {
        let path = dir.path().join(format!("c{i}.toml"));
        std::fs::write(&path, text).unwrap();
        let o = run(dir.path(), &["--config", path.to_str().unwrap(), "make-data"]);
        assert_eq!(code(&o), *want, "{text}");
        let line = stdout(&o);
        assert!(line.starts_with(&format!("error code={want} kind={kind} message=\"")), "{line}");
    }
}

#[test]
fn oracle_bench_with_defaults_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(run(dir.path(), &["oracle-bench"]));
    assert!(text.contains("score max rel err"));
    let report = std::fs::read_to_string(dir.path().join("oracle/report.csv")).unwrap();
    assert!(report.contains("# score pass | estimator pass | cosine pass | flow pass"), "{report}");
}

#[test]
fn stage_guards_and_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = run(out, &["--smoke", "pretrain"]);
    assert_eq!(code(&o), 23, "pretrain without data is a missing-input error");
    ok(run(out, &["--smoke", "make-data"]));
    ok(run(out, &["--smoke", "pretrain"]));

    let o = run(out, &["--smoke", "distill-dual"]);
    assert_eq!(code(&o), 30);
    assert!(stdout(&o).contains("kind=refused"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--allow-raw-init"));
    assert!(!out.join("stage2").exists());
    ok(run(out, &["--smoke", "distill-dual", "--allow-raw-init"]));

    let o = run(out, &["--smoke", "refine", "--resume"]);
    assert_eq!(code(&o), 23, "nothing to resume from");

    // A different seed must not resume a checkpoint written under another.
    let o = run(out, &["--smoke", "--seed", "5", "pretrain", "--resume"]);
    assert_eq!(code(&o), 22, "{}", stdout(&o));

    let env_out = dir.path().join("from_env");
    let o = Command::new(BIN).args(["--smoke", "make-data"]).env("VSRDISTILL_OUT", &env_out).env("RUST_LOG", "warn").output().unwrap();
    assert!(o.status.success());
    assert!(env_out.join("data/manifest.json").exists());
}

#[test]
fn pipeline_stages_chain_and_three_stage_grid_has_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for cmd in ["make-data", "pretrain", "distill-init", "distill-dual", "refine"] {
        ok(run(out, &["--smoke", cmd]));
    }
    let margin = std::fs::read_to_string(out.join("stage3/margin.csv")).unwrap();
    assert!(margin.contains("margin_before"));
    let eval = ok(run(out, &["--smoke", "eval", "--split", "test"]));
    for label in ["upscaled", "teacher_4step", "stage1_onestep", "stage2_onestep", "stage3_onestep"] {
        assert!(eval.contains(label), "{eval}");
    }
    // Resuming a finished stage is a no-op that leaves its checkpoint intact.
    let before = std::fs::read(out.join("stage0/final/manifest.json")).unwrap();
    ok(run(out, &["--smoke", "pretrain", "--resume"]));
    assert_eq!(std::fs::read(out.join("stage0/final/manifest.json")).unwrap(), before);

    ok(run(out, &["--smoke", "ablate", "--grid", "three-stage"]));
    let table = std::fs::read_to_string(out.join("ablate/three_stage.csv")).unwrap();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(table.as_bytes());
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..4], ["exp", "I", "II", "III"]);
    let rows: Vec<Vec<String>> = r.records().map(|x| x.unwrap().iter().take(4).map(String::from).collect()).collect();
    let expected = [
        ["base", "", "", ""],
        ["(a)", "x", "", ""],
        ["(b)", "x", "x", ""],
        ["(c)", "", "x", "x"],
        ["(d)", "x", "x", "x"],
    ];
    assert_eq!(rows, expected.map(|r| r.map(String::from).to_vec()).to_vec());

    let plots = ok(run(out, &["--smoke", "plot"]));
    assert!(plots.contains("val_psnr.png") || plots.contains("stage0_loss.png"), "{plots}");
}

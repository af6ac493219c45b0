use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
paths.output=out
experiment.seed=9
corpus.speakers_per_language=20
td.steps=60
ti.steps=60
trials.eval_speakers=6
trials.targets=120
trials.nontargets=600
triage.grid_step=0.05
xeval.models=0+1;1
";

fn svtriage(dir: &Path, command: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svtriage"))
        .args([command, "--config"])
        .arg(dir.join("exp.conf"))
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.conf"), CONFIG).unwrap();
    dir
}

fn ok(dir: &Path, command: &str) -> String {
    let out = svtriage(dir, command);
    assert!(out.status.success(), "{command}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_writes_report_fields() {
    let dir = setup();
    for cmd in ["gen-data", "train", "score", "fuse-sweep", "triage-sweep", "triage-apply", "eval", "xeval"] {
        let stdout = ok(dir.path(), cmd);
        assert!(stdout.starts_with(cmd), "{stdout}");
    }
    ok(dir.path(), "report");
    let report = std::fs::read_to_string(dir.path().join("out/reports/report.txt")).unwrap();
    for key in [
        "alpha=",
        "td_eer=",
        "ti_eer=",
        "fused_eer=",
        "band_lower=",
        "band_upper=",
        "trigger_rate=",
        "expected_latency_seconds=",
        "latency_saving_seconds=",
        "expected_flops=",
    ] {
        assert!(report.lines().any(|l| l.starts_with(key)), "missing {key}\n{report}");
    }
    let heat = std::fs::read_to_string(dir.path().join("out/reports/heatmap.csv")).unwrap();
    assert_eq!(heat.lines().next(), Some("lower,upper,eer,trigger_rate"));
    // 41 grid values give 41 * 42 / 2 bands.
    assert_eq!(heat.lines().count() - 1, 861);
    let xeval = std::fs::read_to_string(dir.path().join("out/reports/xeval.csv")).unwrap();
    assert!(xeval.lines().count() > 1);
}

#[test]
fn gen_data_is_byte_reproducible() {
    let a = setup();
    let b = setup();
    ok(a.path(), "gen-data");
    ok(b.path(), "gen-data");
    let read = |d: &Path, f: &str| std::fs::read(d.join("out/corpus").join(f)).unwrap();
    let names: Vec<_> = std::fs::read_dir(a.path().join("out/corpus"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(names.iter().any(|n| n == "trials.tsv"));
    for name in names {
        if Path::new(&a.path().join("out/corpus").join(&name)).is_file() {
            assert_eq!(read(a.path(), &name), read(b.path(), &name), "{name}");
        }
    }
}

#[test]
fn missing_upstream_artifact_exits_with_dependency_code() {
    let dir = setup();
    let out = svtriage(dir.path(), "triage-apply");
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("score"), "{stderr}");
}

#[test]
fn bad_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.conf"), "paths.output=o\ntriage.lower=0.9\ntriage.upper=0.1\n").unwrap();
    let out = svtriage(dir.path(), "gen-data");
    assert_eq!(out.status.code(), Some(1));
}

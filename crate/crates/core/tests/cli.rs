use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use pso_forge::io::{read_dataset, KvConfig};
use pso_forge::world::Origin;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pso-forge"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Single-line error of a failed run.
fn failure(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = run_in(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "not a single line: {stderr}");
    (out.status.code().unwrap(), stderr)
}

const FAST: &[&str] = &["--set", "steps=12", "--set", "batch=8"];

/// A small world, calibrated filter, real classifier and one release.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self) -> &Path {
        self.dir.path()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let d = dir.path();
        ok(d, &["make-world", "--out", "w", "--records", "400", "--set", "n_identities=80", "--seed", "5"]);
        ok(d, &["calibrate", "--world", "w/world.cfg", "--data", "w/real.dsv", "--out", "w/filter.rid"]);
        ok(d, &["train", "--on", "real", "--data", "w/real.dsv", "--out", "w/real.clf"]);
        let mut args = vec![
            "generate", "--world", "w/world.cfg", "--train", "w/real.dsv", "--clf", "w/real.clf", "--filter",
            "w/filter.rid", "--out", "g/synth.dsv", "--audit", "g/synth.aud",
        ];
        args.extend_from_slice(FAST);
        ok(d, &args);
        Fixture { dir }
    })
}

#[test]
fn default_pipeline_report_has_every_field() {
    let f = fixture();
    let d = f.path();
    ok(
        d,
        &[
            "evaluate", "--world", "w/world.cfg", "--real", "w/real.dsv", "--synth", "g/synth.dsv", "--audit",
            "g/synth.aud", "--filter", "w/filter.rid", "--out", "g/report.json",
        ],
    );
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("g/report.json")).unwrap()).unwrap();
    for key in ["fid", "irs", "auroc_real", "auroc_synth", "gap", "privacy", "drops", "n_real", "n_synth"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(report["privacy"]["verdict"], "PASS");
    let released = read_dataset(&d.join("g/synth.dsv")).unwrap();
    assert_eq!(released.origin, Origin::Synthetic);
    assert!(released.records.iter().all(|r| r.identity.is_none()));
}

#[test]
fn evaluating_real_data_against_itself_gives_zero_fid() {
    let d = fixture().path();
    ok(
        d,
        &["evaluate", "--world", "w/world.cfg", "--real", "w/real.dsv", "--synth", "w/real.dsv", "--out", "self/report.json"],
    );
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("self/report.json")).unwrap()).unwrap();
    assert!(report["fid"].as_f64().unwrap() <= 1e-9);
}

#[test]
fn audit_passes_the_release_and_fails_the_real_data() {
    let d = fixture().path();
    ok(
        d,
        &["audit", "--released", "g/synth.dsv", "--real", "w/real.dsv", "--world", "w/world.cfg", "--out", "a/release.json"],
    );
    ok(
        d,
        &["audit", "--released", "w/real.dsv", "--real", "w/real.dsv", "--world", "w/world.cfg", "--out", "a/real.json"],
    );
    let read = |p: &str| -> serde_json::Value { serde_json::from_str(&fs::read_to_string(d.join(p)).unwrap()).unwrap() };
    assert_eq!(read("a/release.json")["verdict"], "PASS");
    let own = read("a/real.json");
    assert_eq!(own["verdict"], "FAIL");
    assert_eq!(own["accuracy"], 1.0);
}

#[test]
fn synthetic_and_combined_training_read_releases() {
    let d = fixture().path();
    ok(
        d,
        &["train", "--on", "synthetic", "--data", "w/real.dsv", "--synthetic", "g/synth.dsv", "--out", "t/synth.clf"],
    );
    ok(
        d,
        &[
            "train", "--on", "combined", "--data", "w/real.dsv", "--synthetic", "g/synth.dsv", "--synthetic",
            "g/synth.dsv", "--out", "t/combined.clf",
        ],
    );
    assert!(fs::read_to_string(d.join("t/combined.clf")).unwrap().starts_with("CLF1"));
    let (code, err) = failure(d, &["train", "--on", "synthetic", "--data", "w/real.dsv", "--out", "t/none.clf"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn generation_is_reproducible_from_the_lock_alone() {
    let d = fixture().path();
    let first = fs::read(d.join("g/synth.dsv")).unwrap();
    let lock = KvConfig::load(&d.join("g/run.lock")).unwrap();
    let command = lock.get_str("generate(g/synth.dsv).command").expect("lock records the command");
    assert_eq!(lock.get_str("generate(g/synth.dsv).conditioning"), Some("posterior"));
    assert_eq!(lock.get_str("generate(g/synth.dsv).steps"), Some("12"));

    // Replay into a fresh copy holding only the inputs and the lock.
    let replay = TempDir::new().unwrap();
    fs::create_dir_all(replay.path().join("w")).unwrap();
    fs::create_dir_all(replay.path().join("g")).unwrap();
    for f in ["world.cfg", "real.dsv", "real.clf", "filter.rid"] {
        fs::copy(d.join("w").join(f), replay.path().join("w").join(f)).unwrap();
    }
    fs::copy(d.join("g/run.lock"), replay.path().join("g/run.lock")).unwrap();
    let args: Vec<&str> = command.split_whitespace().skip(1).collect();
    ok(replay.path(), &args);
    assert_eq!(fs::read(replay.path().join("g/synth.dsv")).unwrap(), first);
    assert_eq!(fs::read(replay.path().join("g/synth.aud")).unwrap(), fs::read(d.join("g/synth.aud")).unwrap());
}

#[test]
fn lock_keeps_one_section_per_output() {
    let d = fixture().path();
    for out in ["l/base_a.dsv", "l/base_b.dsv"] {
        ok(
            d,
            &["generate", "--world", "w/world.cfg", "--train", "w/real.dsv", "--unconditional", "--out", out, "--set", "steps=8"],
        );
    }
    let lock = KvConfig::load(&d.join("l/run.lock")).unwrap();
    assert!(lock.get_str("generate(l/base_a.dsv).command").is_some());
    assert!(lock.get_str("generate(l/base_b.dsv).command").is_some());
    assert_eq!(fs::read(d.join("l/base_a.dsv")).unwrap(), fs::read(d.join("l/base_b.dsv")).unwrap());
}

#[test]
fn table_one_has_a_row_per_report() {
    let d = fixture().path();
    ok(
        d,
        &["evaluate", "--world", "w/world.cfg", "--real", "w/real.dsv", "--synth", "g/synth.dsv", "--out", "tab/ours.json"],
    );
    ok(
        d,
        &["evaluate", "--world", "w/world.cfg", "--real", "w/real.dsv", "--synth", "w/real.dsv", "--out", "tab/real.json"],
    );
    ok(
        d,
        &["table", "--report", "ours=tab/ours.json", "--report", "real=tab/real.json", "--out", "tab/table1.csv"],
    );
    let csv = fs::read_to_string(d.join("tab/table1.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("label,fid,irs,"));
    assert!(lines[1].starts_with("ours,"));
}

#[test]
fn cross_site_table_is_a_grid_plus_a_pooled_row() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let mut args = vec!["cross-site", "--out", "cs", "--sites", "3", "--records", "240", "--set", "n_identities=40"];
    args.extend_from_slice(FAST);
    ok(d, &args);
    ok(d, &["table", "--cross-site", "cs/cross_site.json", "--out", "cs/table2.csv"]);
    let csv = fs::read_to_string(d.join("cs/table2.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5, "{csv}");
    assert_eq!(rows[0], ["train", "site1", "site2", "site3", "mean"]);
    assert_eq!(rows[4][0], "DS");
    assert!(rows.iter().all(|r| r.len() == 5));
    let grid = fs::read_to_string(d.join("cs/grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 8);
}

#[test]
fn errors_are_single_lines_with_exit_codes() {
    let d = fixture().path();
    let (code, err) = failure(d, &["make-world", "--out", "e", "--set", "no_such_key=1"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error kind=config"), "{err}");

    let (code, err) = failure(d, &["generate", "--world", "w/world.cfg"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error kind=usage"), "{err}");

    fs::create_dir_all(d.join("e")).unwrap();
    fs::write(d.join("e/bad.dsv"), "DSV1 dim=1 n=1 classes=1 origin=real\n0,1,train,1,nope\n").unwrap();
    let (code, err) = failure(
        d,
        &["calibrate", "--world", "w/world.cfg", "--data", "e/bad.dsv", "--out", "e/f.rid"],
    );
    assert_eq!(code, 3);
    assert!(err.starts_with("error kind=parse") && err.contains("line 2"), "{err}");

    fs::write(d.join("e/v9.dsv"), "DSV9 dim=1 n=0 classes=1 origin=real\n").unwrap();
    let (code, err) = failure(d, &["train", "--on", "real", "--data", "e/v9.dsv", "--out", "e/c.clf"]);
    assert_eq!(code, 3);
    assert!(err.starts_with("error kind=version"), "{err}");
}

#[test]
fn unsatisfiable_records_are_dropped_and_reported() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["make-world", "--out", "w", "--preset", "adversarial", "--records", "300"]);
    ok(d, &["calibrate", "--world", "w/world.cfg", "--data", "w/real.dsv", "--out", "w/filter.rid"]);
    ok(d, &["train", "--on", "real", "--data", "w/real.dsv", "--out", "w/real.clf"]);
    let (code, err) = failure(
        d,
        &[
            "generate", "--world", "w/world.cfg", "--train", "w/real.dsv", "--clf", "w/real.clf", "--filter",
            "w/filter.rid", "--out", "g/synth.dsv", "--audit", "g/synth.aud", "--set", "steps=8", "--set", "batch=2",
            "--set", "guidance_floor=1.2",
        ],
    );
    assert_eq!(code, 4);
    assert!(err.starts_with("error kind=unsatisfiable"), "{err}");
    // The surviving records are still released and audited.
    let released = read_dataset(&d.join("g/synth.dsv")).unwrap();
    let real_train = read_dataset(&d.join("w/real.dsv")).unwrap().split(pso_forge::world::Split::Train);
    assert!(released.len() < real_train.len());
    assert!(d.join("g/synth.aud").exists());
}

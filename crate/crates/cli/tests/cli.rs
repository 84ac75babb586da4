use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn nandscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nandscope")).args(args).output().expect("spawn nandscope")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("scenario.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let raw = scenario("raw.toml");
    let o = nandscope(&["run", "--config", path(&raw), "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("temporal totals: R 2560 W 2560 E 800"));
    for f in ["spatial.txt", "temporal.log", "stats.txt", "plot_R.dat", "plot_W.dat", "plot_E.dat"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let spatial = fs::read_to_string(dir.path().join("spatial.txt")).unwrap();
    assert_eq!(spatial.lines().count(), 800);
    let log = fs::read_to_string(dir.path().join("temporal.log")).unwrap();
    assert_eq!(log.lines().count(), 5920);
    assert_eq!(log.lines().next(), Some("0.000000000;E;1248;flash_erase"));
}

#[test]
fn stats_from_saved_run_matches_fresh_run() {
    let dir = tempfile::tempdir().unwrap();
    let raw = scenario("raw.toml");
    assert!(nandscope(&["run", "--config", path(&raw), "--out", path(dir.path())]).status.success());
    let saved = nandscope(&["stats", "--from", path(dir.path()), "--first-block", "1248"]);
    assert!(saved.status.success());
    let fresh = nandscope(&["stats", "--config", path(&raw)]);
    let totals = |o: &Output| {
        stdout(o).lines().filter(|l| l.contains("totals") || l.starts_with("erase spread")).map(str::to_owned).collect::<Vec<_>>()
    };
    assert_eq!(totals(&saved).len(), 3);
    assert_eq!(totals(&saved), totals(&fresh));
    assert!(stdout(&saved).contains("  1248: 64 64 1"));
}

#[test]
fn plotdata_splits_by_kind() {
    let dir = tempfile::tempdir().unwrap();
    let o = nandscope(&["plotdata", "--config", path(&scenario("raw.toml")), "--out", path(dir.path())]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("5920 events written to"));
    let rows = |f: &str| fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
    assert_eq!((rows("plot_R.dat"), rows("plot_W.dat"), rows("plot_E.dat")), (2560, 2560, 800));
    let first = fs::read_to_string(dir.path().join("plot_E.dat")).unwrap();
    assert_eq!(first.lines().next(), Some("0.000000000 1248 E"));
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let raw = scenario("raw.toml");
    let o = nandscope(&["run", "--config", path(&raw), "--log-size", "100", "--no-tasknames", "--out", path(dir.path())]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("log overflowed: yes"));
    let log = fs::read_to_string(dir.path().join("temporal.log")).unwrap();
    assert_eq!(log.lines().count(), 100);
    assert!(log.lines().all(|l| l.split(';').count() == 3), "task names recorded");

    // tracing partition 0 sees none of the raw workload
    let o = nandscope(&["stats", "--config", path(&raw), "--partition", "0"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("temporal totals: R 0 W 0 E 0"));
}

#[test]
fn seeded_runs_are_reproducible() {
    let pm = scenario("postmark_yaffs2.toml");
    let logs: Vec<String> = ["42", "42", "43"]
        .iter()
        .map(|seed| {
            let dir = tempfile::tempdir().unwrap();
            let o = nandscope(&["run", "--config", path(&pm), "--seed", seed, "--out", path(dir.path())]);
            assert!(o.status.success());
            fs::read_to_string(dir.path().join("temporal.log")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    assert_ne!(logs[0], logs[2]);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = nandscope(&["run", "--config", path(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config error"));

    let bad = write_config(dir.path(), "[chip]\nblocks = 0\n[scenario]\nkind = \"script\"\nsteps = []\n");
    assert_eq!(nandscope(&["run", "--config", path(&bad)]).status.code(), Some(1));

    let typo = write_config(dir.path(), "[chip]\nblockz = 8\n");
    assert_eq!(nandscope(&["stats", "--config", path(&typo)]).status.code(), Some(1));

    let o = nandscope(&["stats", "--from", path(&dir.path().join("no_such_run"))]);
    assert_eq!(o.status.code(), Some(1));

    let raw = scenario("raw.toml");
    assert_eq!(nandscope(&["run", "--config", path(&raw), "--partition", "9"]).status.code(), Some(1));
    assert_eq!(nandscope(&["run", "--config", path(&raw), "--log-size", "0"]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(nandscope(&[]).status.code(), Some(1));
    assert_eq!(nandscope(&["stats"]).status.code(), Some(1));
    let raw = scenario("raw.toml");
    assert_eq!(nandscope(&["stats", "--config", path(&raw), "--from", "x"]).status.code(), Some(1));
    assert_eq!(nandscope(&["stats", "--from", "x", "--seed", "3"]).status.code(), Some(1));
    assert_eq!(nandscope(&["overhead", "--config", path(&raw), "--runs", "0"]).status.code(), Some(1));
    assert_eq!(nandscope(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    // the second write hits a programmed page
    let cfg = write_config(
        dir.path(),
        "[chip]\nblocks = 8\n[scenario]\nkind = \"script\"\nsteps = [\n  { op = \"W\", start = 0, count = 2 },\n  { op = \"W\", start = 1 },\n]\n",
    );
    let o = nandscope(&["run", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn legacy_script_traces_one_event_per_call() {
    let o = nandscope(&["stats", "--config", path(&scenario("script_legacy.toml"))]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("temporal totals: R 1 W 1 E 1"));
}

#[test]
fn overhead_reports_runs() {
    let o = nandscope(&["overhead", "--config", path(&scenario("script_legacy.toml")), "--runs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!stdout(&o).is_empty());
}

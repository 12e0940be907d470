use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"schema_version = 1
master_seed = 3
seeds = [0]

[data]
sine_samples = 200

[mpc]
epochs = 100

[baseline]
epochs = 5

[horizon]
random_sequences = 2
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("experiment.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("results")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bodyschema"))
            .args(args)
            .arg("--config")
            .arg(self.dir.path().join("experiment.toml"))
            .arg("--out")
            .arg(self.out())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).map_or(Vec::new(), |d| d.flatten().map(|e| e.path()).collect());
    v.sort();
    v
}

#[test]
fn missing_dataset_exits_2_with_path() {
    let s = Sandbox::new();
    let o = s.run(&["regress", "--dataset", "nowhere/obs.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere/obs.csv"), "{}", stderr(&o));
}

#[test]
fn empty_report_input_exits_2() {
    let s = Sandbox::new();
    let empty = s.dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = s.run(&["report", "--input", empty.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no result files"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    let s = Sandbox::new();
    assert_eq!(code(&s.run(&["no-such-command"])), 2);
    assert_eq!(code(&s.run(&["regress", "--preset", "bogus"])), 2);

    fs::write(
        s.dir.path().join("experiment.toml"),
        "schema_version = 1\nunknown_key = 1\n",
    )
    .unwrap();
    let o = s.run(&["gen-data"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown_key"), "{}", stderr(&o));

    fs::write(
        s.dir.path().join("experiment.toml"),
        "schema_version = 1\nchain = \"missing.toml\"\n",
    )
    .unwrap();
    let o = s.run(&["gen-data"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.toml"), "{}", stderr(&o));
}

#[test]
fn baselines_are_required_for_eval_horizon() {
    let s = Sandbox::new();
    let o = s.run(&["eval-horizon"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train-dyn"), "{}", stderr(&o));
}

#[test]
fn dry_run_writes_nothing() {
    let s = Sandbox::new();
    for args in [
        &["gen-data", "--dry-run"][..],
        &["mpc", "--dry-run"],
        &["train-dyn", "--dry-run"],
        &["regress", "--dry-run"],
    ] {
        let out = s.ok(args);
        assert!(!out.is_empty());
    }
    assert!(!s.out().exists());
}

#[test]
fn gen_data_presets_and_headers() {
    let s = Sandbox::new();
    s.ok(&["gen-data", "--protocol", "hardware"]);
    let obs = fs::read_to_string(s.out().join("observations.csv")).unwrap();
    assert!(obs.lines().any(|l| l == "# protocol: hardware"));
    let rows = obs.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, 50 * 10);
    let side = fs::read_to_string(s.out().join("gen-data.meta.toml")).unwrap();
    let side: toml::Table = side.parse().unwrap();
    assert_eq!(side["master_seed"].as_integer(), Some(3));
    let files = side["files"].as_array().unwrap();
    assert_eq!(files.len(), 2);
    assert!(files[0]["seed"].as_str().unwrap().parse::<u64>().is_ok());
    for f in ["observations.csv", "dynamics.csv", "gen-data.meta.toml"] {
        let text = fs::read_to_string(s.out().join(f)).unwrap();
        assert!(text.starts_with("# tool: bodyschema "), "{f}");
        assert!(
            text.contains("# master_seed: 3\n") && text.contains("# config_hash: "),
            "{f}"
        );
        assert!(!text.contains('\r'), "{f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let s = Sandbox::new();
    s.ok(&["gen-data", "--seed", "99"]);
    let a = fs::read_to_string(s.out().join("observations.csv")).unwrap();
    assert!(a.contains("# master_seed: 99\n"));
    s.ok(&["gen-data"]);
    let b = fs::read_to_string(s.out().join("observations.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn regress_dataset_round_trip() {
    let s = Sandbox::new();
    s.ok(&["gen-data"]);
    let data = s.out().join("observations.csv");
    let out = s.ok(&["regress", "--dataset", data.to_str().unwrap()]);
    assert!(out.contains("stop: Tolerance"), "{out}");
    let report = fs::read_to_string(s.out().join("regression.toml")).unwrap();
    assert!(report.parse::<toml::Table>().unwrap().contains_key("phi"));
    let loss = fs::read_to_string(s.out().join("regression_loss.csv")).unwrap();
    assert!(loss.lines().any(|l| l == "step,loss"));
}

#[test]
fn report_is_idempotent_and_leaves_inputs_alone() {
    let s = Sandbox::new();
    s.ok(&["regress", "--preset", "gt-recovery"]);
    s.ok(&["mpc"]);
    let inputs: Vec<(PathBuf, Vec<u8>)> = files_under(&s.out())
        .into_iter()
        .filter(|p| p.is_file())
        .map(|p| (p.clone(), fs::read(&p).unwrap()))
        .collect();
    s.ok(&["report"]);
    let first = (
        fs::read(s.out().join("table.csv")).unwrap(),
        fs::read(s.out().join("report.md")).unwrap(),
    );
    s.ok(&["report"]);
    let second = (
        fs::read(s.out().join("table.csv")).unwrap(),
        fs::read(s.out().join("report.md")).unwrap(),
    );
    assert_eq!(first, second);
    for (p, bytes) in inputs {
        assert_eq!(fs::read(&p).unwrap(), bytes, "{}", p.display());
    }
    let table = String::from_utf8(first.0).unwrap();
    assert!(table.lines().any(|l| l == "method,task1,task2,task3"), "{table}");
    assert!(table.lines().any(|l| l.starts_with("kinematic,")));
    assert!(table.contains("# master_seed: 3\n"));
}

#[test]
fn placing_rows_cover_tasks_and_grasps() {
    let s = Sandbox::new();
    s.ok(&["mpc"]);
    let summary = fs::read_to_string(s.out().join("placing_summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        // One seed times four grasps.
        assert_eq!(r.split(',').nth(2), Some("4"), "{r}");
    }
}

#[test]
fn horizon_files_include_kinematic_rows() {
    let s = Sandbox::new();
    s.ok(&["train-dyn"]);
    assert_eq!(files_under(&s.out().join("models")).len(), 4);
    s.ok(&["eval-horizon"]);
    for f in ["horizon_task.csv", "horizon_random.csv"] {
        let text = fs::read_to_string(s.out().join(f)).unwrap();
        assert!(text.lines().any(|l| l.starts_with("1,kinematic,")), "{f}");
        assert!(text.lines().any(|l| l.starts_with("10,baseline-d,")), "{f}");
    }
}

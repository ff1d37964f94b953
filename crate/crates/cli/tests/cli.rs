use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_range-al");

const TINY: &str = "\
total_pool_size = 16
test_pool_size = 4
init_set_size = 4
budget = 4
al_steps = 3
mc_iterations = 3
max_iterations = 60
eval_period = 20
image_width = 64
image_height = 8
";

fn range_al(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("RANGE_AL_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_manifest(dir: &Path, cells: &str, extra: &str) {
    write(dir, "exp.toml", TINY);
    write(
        dir,
        "run.toml",
        &format!("config = \"exp.toml\"\noutput = \"out\"\nseeds = [3]\ndesk_scale = true\n{extra}cells = [{cells}]\n"),
    );
}

#[test]
fn project_writes_one_image_per_scan() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&range_al(d, &["synth", "--out", "ds", "--count", "2", "--desk-scale"]));
    let args = [
        "project",
        "--desk-scale",
        "--out",
        "img",
        "--labels",
        "ds/labels",
        "--label-map",
        "ds/label_map.txt",
        "ds/velodyne/000000.bin",
    ];
    let out = range_al(d, &args);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("valid_fraction="));
    let first = fs::read(d.join("img/000000.mcpt")).unwrap();
    assert_eq!(fs::read_dir(d.join("img")).unwrap().count(), 1);

    ok(&range_al(d, &args));
    assert_eq!(fs::read(d.join("img/000000.mcpt")).unwrap(), first);

    let check = range_al(d, &["tensor-check", "img/000000.mcpt"]);
    ok(&check);
    assert!(String::from_utf8_lossy(&check.stdout).contains("range image 128x16"));
}

#[test]
fn project_reports_missing_scan() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&range_al(d, &["synth", "--out", "ds", "--count", "1", "--desk-scale"]));
    let out = range_al(
        d,
        &["project", "--desk-scale", "--out", "img", "ds/velodyne/000000.bin", "missing.bin"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.bin"));
    // the readable scan is still projected
    assert!(d.join("img/000000.mcpt").exists());
}

#[test]
fn tensor_check_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.mcpt", "not a tensor");
    let out = range_al(dir.path(), &["tensor-check", "bad.mcpt"]);
    assert!(!out.status.success());
}

#[test]
fn run_writes_records_and_curves_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_manifest(d, r#"{ heuristic = "random" }, { heuristic = "bald" }"#, "");
    ok(&range_al(d, &["run", "run.toml", "--jobs", "2"]));
    let curves = fs::read_to_string(d.join("out/curves.csv")).unwrap();
    let mut ids: Vec<&str> = curves.lines().skip(1).map(|l| l.rsplitn(3, ',').nth(2).unwrap()).collect();
    ids.dedup();
    assert_eq!(ids, ["random,off,3", "bald,off,3"]);
    assert_eq!(curves.lines().count(), 1 + 2 * 3);
    let bald = fs::read(d.join("out/bald_da-off_seed3.csv")).unwrap();
    assert!(d.join("out/random_da-off_seed3.csv").exists());
    // two acquiring steps over the 12 then 8 unlabeled samples
    let dump = fs::read_to_string(d.join("out/bald_da-off_seed3.scores.csv")).unwrap();
    assert_eq!(dump.lines().next(), Some("step,sample_id,heuristic,aggregated_score"));
    assert_eq!(dump.lines().count(), 1 + 12 + 8);

    ok(&range_al(d, &["run", "run.toml"]));
    assert_eq!(fs::read_to_string(d.join("out/curves.csv")).unwrap(), curves);
    assert_eq!(fs::read(d.join("out/bald_da-off_seed3.csv")).unwrap(), bald);
}

#[test]
fn run_seed_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_manifest(d, r#"{ heuristic = "random" }"#, "");
    let out = Command::new(BIN)
        .args(["run", "run.toml"])
        .current_dir(d)
        .env("RANGE_AL_SEED", "11")
        .output()
        .unwrap();
    ok(&out);
    assert!(d.join("out/random_da-off_seed11.csv").exists());
    assert!(!d.join("out/random_da-off_seed3.csv").exists());
}

#[test]
fn empty_matrix_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    run_manifest(dir.path(), "", "");
    ok(&range_al(dir.path(), &["run", "run.toml"]));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn run_checks_paths_before_starting() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", "config = \"nope.toml\"\noutput = \"out\"\ncells = [{ heuristic = \"random\" }]\n");
    let out = range_al(dir.path(), &["run", "run.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
}

#[test]
fn failing_cell_does_not_stop_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // an external scorer without tensors fails; checkpoints are refused for it
    write(d, "exp.toml", &format!("{TINY}external_predictions = \"missing\"\n"));
    write(
        d,
        "run.toml",
        "config = \"exp.toml\"\noutput = \"out\"\ndesk_scale = true\ncells = [{ heuristic = \"random\" }, { heuristic = \"bald\" }]\n",
    );
    let out = range_al(d, &["run", "run.toml"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("2 of 2 cells failed"), "{err}");
    assert!(d.join("out/curves.csv").exists());
}

fn le_table(d: &Path, args: &[&str]) -> Vec<Vec<String>> {
    let mut full = vec!["le", "--curves", "curves.csv"];
    full.extend_from_slice(args);
    let out = range_al(d, &full);
    ok(&out);
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn le_against_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        d,
        "curves.csv",
        "heuristic,da_flag,seed,n_labeled,miou\n\
         random,off,0,1000,0.2\nrandom,off,0,4000,0.5\nrandom,off,0,6000,0.6\n\
         bald,off,0,1000,0.3\nbald,off,0,2000,0.5\nbald,off,0,6000,0.6\n",
    );
    let rows = le_table(d, &["--baseline", "random:off", "--levels", "0.5,0.999"]);
    // bald at 0.5, bald at 0.999, random at 0.5, random at 0.999
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[0][..6], ["bald", "off", "0", "0.5", "2.0", "0.5"]);
    assert_eq!(rows[1][8], "false");
    assert_eq!(rows[1][4], "");
    assert_eq!(&rows[2][4..6], ["1.0", "1.0"]);
    assert_eq!(rows[2][8], "true");

    let missing = range_al(d, &["le", "--curves", "curves.csv", "--baseline", "entropy:off", "--levels", "0.5"]);
    assert!(!missing.status.success());
}

#[test]
fn ttda_writes_four_sorted_curves() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_manifest(d, r#"{ heuristic = "bald" }"#, "checkpoints = true\n");
    ok(&range_al(d, &["run", "run.toml"]));
    // no augmentation: the augmented copies of L are L itself
    write(d, "identity.toml", &format!("{TINY}ttda_augmentations = []\n"));
    let out = range_al(
        d,
        &[
            "ttda",
            "--desk-scale",
            "--config",
            "identity.toml",
            "--checkpoint",
            "out/bald_da-off_seed3/step001.ralm",
            "--pools",
            "out/bald_da-off_seed3/step001.pool",
            "--step",
            "1",
            "--seed",
            "3",
            "--out",
            "tt",
        ],
    );
    ok(&out);
    for name in ["labeled", "unlabeled", "ttda_labeled", "ttda_unlabeled"] {
        let text = fs::read_to_string(d.join(format!("tt/{name}.csv"))).unwrap();
        let scores: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
        assert!(!scores.is_empty(), "{name}");
        assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{name} is not sorted");
    }
    assert_eq!(
        fs::read(d.join("tt/labeled.csv")).unwrap(),
        fs::read(d.join("tt/ttda_labeled.csv")).unwrap()
    );
    assert_eq!(fs::read_to_string(d.join("tt/cutoff.txt")).unwrap().trim(), "4");
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchcraft"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn make(dir: &Path, out: &str, frames: &str) {
    let o = run(
        dir,
        &[
            "make-synthetic",
            "--out",
            out,
            "--frames",
            frames,
            "--height",
            "20",
            "--width",
            "20",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

const SHORT: [&str; 6] = [
    "--set",
    "train.spatial.steps=6",
    "--set",
    "train.spatial.crop=12",
    "--set",
    "train.spatial.margin=2",
];

#[test]
fn psnr_of_identical_sequences_is_infinite() {
    let d = tempfile::tempdir().unwrap();
    make(d.path(), "a", "3");
    let o = run(d.path(), &["psnr", "--clean", "a", "--test", "a"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("average: inf dB"), "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["psnr", "--clean", "a", "--nope", "b"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    let o = run(d.path(), &["params", "--set", "search.neighbors=0"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = run(d.path(), &["params", "--set", "no.such.key=1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(d.path(), &["params", "--mode", "scnn7"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["psnr", "--clean", "missing", "--test", "missing"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn params_prints_paper_table() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["params", "--preset", "paper"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("1351959") && out.contains("within 1%"), "{out}");
    assert!(stderr(&o).contains("patch.search_side = 15"), "{}", stderr(&o));
}

#[test]
fn config_file_and_overrides_are_echoed() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("run.conf"),
        "# desk run\nsearch.neighbors = 3\nseed = 9\n",
    )
    .unwrap();
    let o = run(d.path(), &["params", "--config", "run.conf", "--set", "seed=11"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("search.neighbors = 3"), "{err}");
    assert!(err.contains("seed = 11"), "{err}");
}

#[test]
fn scnn0_single_frame_needs_no_temporal_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    make(d.path(), "c", "1");
    let mut args = vec!["train-spatial", "--clean", "c", "--out", "s", "--mode", "scnn0"];
    args.extend(SHORT);
    let o = run(d.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(d.path(), &["add-noise", "--input", "c", "--out", "n"]);
    assert!(o.status.success());
    let o = run(
        d.path(),
        &[
            "denoise", "--mode", "scnn0", "--input", "n", "--scnn", "s", "--out", "d",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.path().join("d/frame_00000.pgm").exists());

    let o = run(d.path(), &["denoise", "--input", "n", "--scnn", "s", "--out", "e"]);
    assert_eq!(o.status.code(), Some(1), "pacnet mode without a T-CNN: {}", stderr(&o));
    assert!(!d.path().join("e").exists());
}

#[test]
fn checkpoint_mismatch_is_rejected_before_compute() {
    let d = tempfile::tempdir().unwrap();
    make(d.path(), "c", "2");
    let mut args = vec!["train-spatial", "--clean", "c", "--out", "s"];
    args.extend(SHORT);
    assert!(run(d.path(), &args).status.success());
    let o = run(
        d.path(),
        &[
            "denoise",
            "--mode",
            "scnn3",
            "--input",
            "c",
            "--scnn",
            "s",
            "--out",
            "d",
            "--set",
            "scnn.blocks=4",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
    assert!(!d.path().join("d").exists());
}

#[test]
fn cache_is_reused_and_repaired() {
    let d = tempfile::tempdir().unwrap();
    make(d.path(), "c", "3");
    let o = run(d.path(), &["augment", "--input", "c", "--cache", "k"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("0 hits, 3 misses"), "{}", stderr(&o));
    let o = run(d.path(), &["augment", "--input", "c", "--cache", "k"]);
    assert!(stderr(&o).contains("3 hits, 0 misses"), "{}", stderr(&o));

    let entry = fs::read_dir(d.path().join("k"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "pct"))
        .unwrap();
    let mut bytes = fs::read(&entry).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&entry, bytes).unwrap();
    let o = run(d.path(), &["augment", "--input", "c", "--cache", "k"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("2 hits, 0 misses, 1 corrupted"), "{}", stderr(&o));
}

#[test]
fn training_writes_loss_curve_and_epoch_checkpoints() {
    let d = tempfile::tempdir().unwrap();
    make(d.path(), "c", "2");
    let o = run(
        d.path(),
        &[
            "train-spatial",
            "--clean",
            "c",
            "--out",
            "s",
            "--loss-csv",
            "loss.csv",
            "--set",
            "train.spatial.steps=8",
            "--set",
            "train.spatial.steps_per_epoch=4",
            "--set",
            "train.spatial.crop=12",
            "--set",
            "train.spatial.margin=2",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.path().join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,mse,psnr"));
    assert_eq!(lines.count(), 8);
    let manifest = fs::read_to_string(d.path().join("s/manifest.json")).unwrap();
    assert!(manifest.contains("\"kind\": \"scnn\""));
}

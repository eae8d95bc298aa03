use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use writer_retrieval::preproc::{foreground_fraction, BinaryImage};

const SMALL: &[&str] = &[
    "--set", "window_size=32",
    "--set", "s_eval=32",
    "--set", "codebook_stride=32",
    "--set", "clusters=4",
    "--set", "dim=4",
    "--set", "kmeans_batch=256",
    "--set", "t_fg=4",
];

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Synthetic corpus and a tiny random model in a fresh run directory.
    fn new() -> Self {
        let f = Fixture { dir: tempfile::tempdir().unwrap() };
        let data = f.data();
        std::fs::create_dir_all(&data).unwrap();
        f.ok(&[
            "synth", "--out", data.to_str().unwrap(),
            "--train-writers", "6", "--train-pages", "2",
            "--test-writers", "4", "--test-pages", "3",
            "--width", "64", "--height", "64", "--seed", "5",
        ]);
        f.ok(&[
            "init-weights", "--seed", "1",
            "--patch-size", "16", "--embed-dim", "16", "--depth", "1", "--heads", "2", "--input-size", "32",
        ]);
        f
    }

    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    fn run_dir(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    fn manifest(&self) -> String {
        self.data().join("manifest.jsonl").to_str().unwrap().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_wretrieve"))
            .args(args)
            .env("WRETRIEVE_RUN_DIR", self.run_dir())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn stage(&self, cmd: &str, extra: &[&str]) -> String {
        let m = self.manifest();
        let mut args = vec![cmd, "--manifest", &m];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(extra);
        self.ok(&args)
    }
}

fn parse_metrics(stdout: &str) -> (f64, f64) {
    let line = stdout.lines().find(|l| l.starts_with("mAP=")).expect("metrics line");
    let mut parts = line.split_whitespace();
    let map = parts.next().unwrap().trim_start_matches("mAP=").parse().unwrap();
    let top1 = parts.next().unwrap().trim_start_matches("top1=").parse().unwrap();
    (map, top1)
}

#[test]
fn full_pipeline_and_rerun_is_noop() {
    let f = Fixture::new();
    f.stage("codebook", &[]);
    f.stage("encode", &[]);
    let (map, top1) = parse_metrics(&f.stage("evaluate", &[]));
    assert!((0.0..=1.0).contains(&map) && (0.0..=1.0).contains(&top1));

    let run = f.run_dir();
    for p in ["codebook.wrv", "pca.wrv", "descriptors/test.wrv", "run.json", "metrics_test.csv"] {
        assert!(run.join(p).exists(), "missing {p}");
    }
    assert_eq!(std::fs::read_dir(run.join("features")).unwrap().count(), 12 + 12);

    let csv = std::fs::read_to_string(run.join("metrics_test.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "kind,doc_id,writer_id,average_precision,top1");
    assert_eq!(lines.len(), 1 + 12 + 1);
    assert!(lines[13].starts_with("summary,"));

    let snapshot = |p: &str| std::fs::read(run.join(p)).unwrap();
    let before: Vec<Vec<u8>> = ["codebook.wrv", "pca.wrv", "descriptors/test.wrv"].iter().map(|p| snapshot(p)).collect();
    let modified = std::fs::metadata(run.join("codebook.wrv")).unwrap().modified().unwrap();
    f.stage("codebook", &[]);
    let out = f.stage("encode", &[]);
    assert!(out.contains("(unchanged)"), "{out}");
    let after: Vec<Vec<u8>> = ["codebook.wrv", "pca.wrv", "descriptors/test.wrv"].iter().map(|p| snapshot(p)).collect();
    assert_eq!(before, after);
    assert_eq!(std::fs::metadata(run.join("codebook.wrv")).unwrap().modified().unwrap(), modified);

    let (map2, _) = parse_metrics(&f.stage("evaluate", &["--rerank", "krnn", "--k", "2"]));
    assert!((0.0..=1.0).contains(&map2));
    parse_metrics(&f.stage("evaluate", &["--rerank", "graph"]));
}

#[test]
fn sweep_marks_failing_values_and_continues() {
    let f = Fixture::new();
    let out_csv = f.dir.path().join("sweep.csv");
    let out = f.stage("sweep", &["--param", "dim", "--values", "2,500,4", "--out", out_csv.to_str().unwrap()]);
    assert_eq!(out.lines().filter(|l| l.contains("mAP=")).count(), 2, "{out}");
    let csv = std::fs::read_to_string(&out_csv).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("dim,2,") && rows[0].contains(",ok,"));
    assert!(rows[1].starts_with("dim,500,,,error,"));
    assert!(rows[2].contains(",ok,"));
}

#[test]
fn encode_without_codebook_fails() {
    let f = Fixture::new();
    let m = f.manifest();
    let mut args = vec!["encode", "--manifest", m.as_str()];
    args.extend_from_slice(SMALL);
    let out = f.run(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("codebook"));
}

#[test]
fn unreadable_document_gives_exit_code_one() {
    let f = Fixture::new();
    let m = f.manifest();
    let mut text = std::fs::read_to_string(&m).unwrap();
    text.push_str("{\"path\":\"missing.pbm\",\"doc_id\":\"ghost\",\"writer_id\":\"x\",\"split\":\"train\"}\n");
    std::fs::write(&m, text).unwrap();
    let mut args = vec!["codebook", "--manifest", m.as_str()];
    args.extend_from_slice(SMALL);
    let out = f.run(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));
    assert!(f.run_dir().join("codebook.wrv").exists());
}

fn write_png(path: &Path, width: u32, height: u32, seed: u32) {
    let img = image::GrayImage::from_fn(width, height, |x, y| {
        let ink = (x + seed) % 11 < 2 || (y * 3 + x) % 17 == 0;
        image::Luma([if ink { 20 } else { 230 }])
    });
    img.save(path).unwrap();
}

#[test]
fn binarize_and_import_png_documents() {
    let dir = tempfile::tempdir().unwrap();
    let pages = dir.path().join("pages");
    std::fs::create_dir(&pages).unwrap();
    for (i, name) in ["1-a.png", "1-b.png", "2-a.png"].iter().enumerate() {
        write_png(&pages.join(name), 80, 60, i as u32);
    }
    let manifest = dir.path().join("manifest.jsonl");
    let run = dir.path().join("run");
    let inverted_run = dir.path().join("inverted");
    let cli_in = |run: &Path, args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_wretrieve"))
            .args(args)
            .arg("--run-dir")
            .arg(run)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let cli = |args: &[&str]| cli_in(&run, args);
    cli(&["import", "--dir", pages.to_str().unwrap(), "--split", "test", "--out", manifest.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 3);
    cli(&["binarize", "--manifest", manifest.to_str().unwrap()]);
    let out = run.join("binarized");
    for id in ["1-a", "1-b", "2-a"] {
        let bytes = std::fs::read(out.join(format!("{id}.pbm"))).unwrap();
        assert!(bytes.starts_with(b"P4"));
    }
    let binarized = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(binarized.lines().count(), 3);
    assert!(binarized.contains(".pbm"));

    cli_in(&inverted_run, &["binarize", "--manifest", manifest.to_str().unwrap(), "--invert"]);
    for id in ["1-a", "1-b", "2-a"] {
        let plain = BinaryImage::read_pbm(&out.join(format!("{id}.pbm"))).unwrap();
        let flipped = BinaryImage::read_pbm(&inverted_run.join("binarized").join(format!("{id}.pbm"))).unwrap();
        let (f, g) = (foreground_fraction(&plain).unwrap(), foreground_fraction(&flipped).unwrap());
        assert!(f > 0.0 && f < 0.5);
        assert!((f + g - 1.0).abs() < 1e-12);
    }
}

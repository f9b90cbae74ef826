use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use scnet_core::data::{generate_scene, load_image, save_image};

fn scnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scnet")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// `count` clean scenes of side `size` plus the synthesized pairs.
fn dataset(root: &Path, count: usize, size: usize, waters: &str) -> std::path::PathBuf {
    let clean = root.join("clean");
    let out = scnet(&[
        "scenes",
        p(&clean),
        "--count",
        &count.to_string(),
        "--size",
        &size.to_string(),
    ]);
    assert!(out.status.success());
    let synth = root.join("synth");
    let out = scnet(&["synth", p(&clean), p(&synth), "--water-types", waters]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    synth.join("manifest.txt")
}

#[test]
fn synth_writes_one_pair_per_image_and_water() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    scnet(&["scenes", p(&clean), "--count", "10", "--size", "32"]);
    let run = |name: &str| {
        let out = scnet(&["synth", p(&clean), p(&dir.path().join(name))]);
        assert!(out.status.success());
        assert!(stdout(&out).contains("30 pairs written"), "{}", stdout(&out));
        assert!(stdout(&out).contains("seed=42"));
        let manifest = fs::read_to_string(dir.path().join(name).join("manifest.txt")).unwrap();
        assert_eq!(manifest.lines().count(), 30);
        manifest
            .lines()
            .map(|l| fs::read(l.split('\t').next().unwrap()).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn missing_input_directory_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = scnet(&["synth", p(&missing), p(&dir.path().join("out"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&missing)));
    assert_eq!(
        scnet(&["synth", p(dir.path()), p(dir.path()), "--water-types", "pink"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(scnet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(scnet(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_enhance_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 1, 128, "coastal-green");
    let run_dir = dir.path().join("run");
    let out = scnet(&[
        "train",
        "--manifest",
        p(&manifest),
        "--steps",
        "2",
        "--out",
        p(&run_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("seed=42"));
    assert!(text.contains("lr=1e-4 batch=1 patch=128 scales=4"), "{text}");
    let log = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let model = run_dir.join("model.scn");

    // A second identical run writes the same checkpoint.
    let again = dir.path().join("again");
    scnet(&["train", "--manifest", p(&manifest), "--steps", "2", "--out", p(&again)]);
    assert_eq!(fs::read(&model).unwrap(), fs::read(again.join("model.scn")).unwrap());

    // Odd sizes come back at their original extents.
    let odd = dir.path().join("odd.png");
    save_image(&generate_scene(97, 130, 1).unwrap(), &odd).unwrap();
    let enhanced = dir.path().join("enhanced");
    let out = scnet(&["enhance", "--model", p(&model), p(&odd), "--out-dir", p(&enhanced)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = load_image(enhanced.join("odd.png")).unwrap();
    assert_eq!((img.height(), img.width()), (97, 130));

    // Enhance the raw image named in the manifest, then score it.
    let raw = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .split('\t')
        .next()
        .unwrap()
        .to_string();
    let out = scnet(&["enhance", "--model", p(&model), &raw, "--out-dir", p(&enhanced)]);
    assert!(out.status.success());
    let out = scnet(&["eval", "--manifest", p(&manifest), "--enhanced-dir", p(&enhanced)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = stdout(&out).lines().last().unwrap().to_string();
    let cols: Vec<&str> = line.split(',').collect();
    assert_eq!(cols.len(), 3);
    let (psnr, ssim): (f64, f64) = (cols[1].parse().unwrap(), cols[2].parse().unwrap());
    assert!(psnr.is_finite() && (-1.0..=1.0).contains(&ssim));

    let bad = scnet(&[
        "train",
        "--manifest",
        p(&manifest),
        "--patch",
        "100",
        "--steps",
        "1",
        "--out",
        p(&run_dir),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn eval_of_references_against_themselves_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 2, 32, "oceanic-blue,turbid-yellow");
    let enhanced = dir.path().join("enhanced");
    fs::create_dir_all(&enhanced).unwrap();
    for line in fs::read_to_string(&manifest).unwrap().lines() {
        let (raw, reference) = line.split_once('\t').unwrap();
        fs::copy(reference, enhanced.join(Path::new(raw).file_name().unwrap())).unwrap();
    }
    let out = scnet(&["eval", "--manifest", p(&manifest), "--enhanced-dir", p(&enhanced)]);
    assert!(out.status.success());
    let text = stdout(&out);
    let mean = text.lines().find(|l| l.starts_with("mean")).unwrap();
    let cols: Vec<&str> = mean.split_whitespace().collect();
    assert_eq!(cols[1], "99.000");
    assert_eq!(cols[2], "1.0000");
    let per_image: Vec<&str> = text.lines().filter(|l| l.contains(',')).collect();
    assert_eq!(per_image.len(), 4);
    assert!(per_image.iter().all(|l| l.ends_with(",inf,1.000000")));
}

#[test]
fn verify_passes_and_fault_injection_fails() {
    let out = scnet(&["verify", "--precision", "32"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("all 6 suites passed"));
    let out = scnet(&["verify", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("FAIL whitening_covariance"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("whitening_covariance"));
    assert_eq!(scnet(&["verify", "--precision", "16"]).status.code(), Some(1));
}

#[test]
fn plain_unet_enhance_and_eval_contracts() {
    use scnet_core::metrics::{psnr, ssim};

    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 2, 32, "turbid-yellow");
    let run_dir = dir.path().join("run");
    let out = scnet(&[
        "train",
        "--manifest",
        p(&manifest),
        "--steps",
        "2",
        "--patch",
        "16",
        "--no-sn",
        "--no-cn",
        "--out",
        p(&run_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = run_dir.join("model.scn");

    let text = fs::read_to_string(&manifest).unwrap();
    let pairs: Vec<(&str, &str)> = text.lines().map(|l| l.split_once('\t').unwrap()).collect();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    for out_dir in [&first, &second] {
        let out = scnet(&["enhance", "--model", p(&model), pairs[0].0, "--out-dir", p(out_dir)]);
        assert!(out.status.success());
    }
    let name = Path::new(pairs[0].0).file_name().unwrap();
    let a = fs::read(first.join(name)).unwrap();
    assert_eq!(a, fs::read(second.join(name)).unwrap());
    let enhanced = load_image(first.join(name)).unwrap();
    assert_eq!((enhanced.height(), enhanced.width()), (32, 32));

    // Scoring the raw inputs reproduces the metrics of the degradation itself.
    let raws = dir.path().join("raws");
    fs::create_dir_all(&raws).unwrap();
    for (raw, _) in &pairs {
        fs::copy(raw, raws.join(Path::new(raw).file_name().unwrap())).unwrap();
    }
    let out = scnet(&["eval", "--manifest", p(&manifest), "--enhanced-dir", p(&raws)]);
    assert!(out.status.success());
    let report = stdout(&out);
    let rows: Vec<Vec<&str>> = report
        .lines()
        .filter(|l| l.contains(','))
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), pairs.len());
    for ((raw, reference), row) in pairs.iter().zip(&rows) {
        let (r, g) = (load_image(raw).unwrap(), load_image(reference).unwrap());
        assert!((row[1].parse::<f64>().unwrap() - psnr(&r, &g).unwrap()).abs() < 1e-5);
        assert!((row[2].parse::<f64>().unwrap() - ssim(&r, &g).unwrap()).abs() < 1e-5);
    }

    // Missing enhanced files, unreadable models and bad manifests are user errors.
    assert_eq!(
        scnet(&["eval", "--manifest", p(&manifest), "--enhanced-dir", p(&first)])
            .status
            .code(),
        Some(1)
    );
    let junk = dir.path().join("junk.scn");
    fs::write(&junk, b"nope").unwrap();
    assert_eq!(
        scnet(&["enhance", "--model", p(&junk), pairs[0].0, "--out-dir", p(&first)])
            .status
            .code(),
        Some(1)
    );
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "one column only\n").unwrap();
    let out = scnet(&["train", "--manifest", p(&bad), "--steps", "1", "--out", p(&run_dir)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_reports_the_gradient_threshold() {
    let out = scnet(&["verify", "--precision", "64", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("seed=7"));
    let line = text.lines().find(|l| l.contains("grad_check")).unwrap();
    assert!(line.starts_with("PASS") && line.contains("< 1e-4"), "{line}");
}

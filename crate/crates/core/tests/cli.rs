use std::path::{Path, PathBuf};
use std::process::Command;

use segal::container::{write_container, Metadata};
use segal::model::{init_model, load_checkpoint, train, Architecture, TrainConfig};
use segal::synth::{class_stats, Dataset, DatasetManifest};
use segal::tensor::ProbabilityStack;

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn segal(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_segal"))
        .args(args)
        .output()
        .expect("binary runs");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

const SMALL_SCENE: &str = "profile = corn_weed\nheight = 16\nwidth = 16\ncrop_radius_min = 2\ncrop_radius_max = 3\nweed_radius_max = 2\n";

fn generate(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let cfg = write(
        &dir.join(format!("{name}.cfg")),
        &format!("{SMALL_SCENE}n_images = {n}\nseed = {seed}\n"),
    );
    let out = dir.join(name);
    let r = segal(&["generate", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    out.join("manifest.csv")
}

#[test]
fn generate_writes_manifest_and_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("g.cfg"),
        "profile = sugarbeet\nn_images = 6\nheight = 32\nwidth = 32\nseed = 4\n",
    );
    let out = dir.path().join("data");
    let r = segal(&["generate", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let manifest = DatasetManifest::load(&out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.entries.len(), 6);
    for e in &manifest.entries {
        assert!(manifest.resolve(&e.image_path).exists());
        assert!(manifest.resolve(&e.mask_path).exists());
    }
    assert!(class_stats(&manifest).unwrap()[0] > 0.9);

    // same config again with --force gives bit-identical files
    let first = std::fs::read(manifest.resolve(&manifest.entries[3].image_path)).unwrap();
    let r = segal(&["generate", "--config", p(&cfg), "--out", p(&out), "--force"]);
    assert_eq!(r.code, 0);
    assert_eq!(std::fs::read(manifest.resolve(&manifest.entries[3].image_path)).unwrap(), first);

    let r = segal(&["generate", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("--force"));
}

#[test]
fn generate_names_missing_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("g.cfg"), "profile = sugarbeet\n");
    let r = segal(&["generate", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("n_images"), "{}", r.stderr);
    let cfg = write(&dir.path().join("u.cfg"), "n_images = 2\nprofile = sugarbeet\ncolour = red\n");
    let r = segal(&["generate", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("colour"));
}

#[test]
fn pretrain_round_trip_and_zero_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(dir.path(), "pre", 4, 1);
    let cfg = write(
        &dir.path().join("t.cfg"),
        &format!("pretrain_manifest = {}\nepochs = 2\nseed = 9\nconv_widths = 4\n", p(&manifest)),
    );
    let ck = dir.path().join("ck");
    let r = segal(&["pretrain", "--config", p(&cfg), "--out", p(&ck)]);
    assert_eq!(r.code, 0, "{}", r.stderr);

    let data = Dataset::load(&DatasetManifest::load(&manifest).unwrap()).unwrap();
    let pairs: Vec<_> = data.samples().iter().map(|s| (s.image.clone(), s.mask.clone())).collect();
    let arch = Architecture::with_widths(1, 3, 0.5, &[4]).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        init_seed: 9,
        shuffle_seed: 9,
        ..TrainConfig::default()
    };
    let in_memory = train(&init_model(&arch, 9).unwrap(), &pairs, &tc).unwrap().0.round_to_f32();
    let (loaded, meta) = load_checkpoint(&ck).unwrap();
    assert_eq!(meta["epochs"], "2");
    for (img, _) in &pairs {
        assert_eq!(loaded.predict(img).unwrap(), in_memory.predict(img).unwrap());
    }

    let cfg0 = write(
        &dir.path().join("t0.cfg"),
        &format!("pretrain_manifest = {}\nepochs = 0\nseed = 9\nconv_widths = 4\n", p(&manifest)),
    );
    let ck0 = dir.path().join("ck0");
    assert_eq!(segal(&["pretrain", "--config", p(&cfg0), "--out", p(&ck0)]).code, 0);
    assert_eq!(load_checkpoint(&ck0).unwrap().0, init_model(&arch, 9).unwrap().round_to_f32());

    let bad = segal(&[
        "pretrain",
        "--config",
        p(&cfg),
        "--manifest",
        p(&dir.path().join("missing.csv")),
        "--out",
        p(&dir.path().join("ck2")),
    ]);
    assert_eq!(bad.code, 3, "{}", bad.stderr);
}

fn run_config(dir: &Path, extra: &str) -> PathBuf {
    let pool = generate(dir, "pool", 12, 1);
    let val = generate(dir, "val", 3, 2);
    write(
        &dir.join("run.cfg"),
        &format!(
            "pool_manifest = {}\nval_manifest = {}\nrun_id = t\niterations = 2\nsample_size = 3\ninitial_size = 3\n\
             repetitions = 2\nmc_samples = 3\nepochs = 2\nconv_widths = 4\nseed = 5\n{extra}",
            p(&pool),
            p(&val)
        ),
    )
}

#[test]
fn run_is_reproducible_from_its_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(dir.path(), "histograms = true\n");
    let a = dir.path().join("a");
    let r = segal(&["run", "--config", p(&cfg), "--out", p(&a)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let curves = std::fs::read_to_string(a.join("curves.csv")).unwrap();
    assert!(curves.starts_with(
        "run_id,acquisition,repetition,iteration,n_labeled,iou_background,iou_crop,iou_weed,miou,seed\n"
    ));
    assert_eq!(curves.lines().count(), 1 + 3 * 2 * 3);
    assert!(a.join("scores.csv").exists());

    let b = dir.path().join("b");
    assert_eq!(segal(&["run", "--config", p(&a.join("run.meta")), "--out", p(&b)]).code, 0);
    assert_eq!(std::fs::read(b.join("curves.csv")).unwrap(), curves.as_bytes());
    assert_eq!(std::fs::read(b.join("run.meta")).unwrap(), std::fs::read(a.join("run.meta")).unwrap());
}

#[test]
fn run_rejects_invalid_dropout_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(dir.path(), "dropout_probability = 1.0\n");
    let out = dir.path().join("o");
    let r = segal(&["run", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(r.code, 2);
    assert!(!out.join("curves.csv").exists());
}

#[test]
fn score_stacks_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let stack = ProbabilityStack::new(2, 2, 1, 1, vec![0.9, 0.1, 0.1, 0.9]).unwrap();
    let path = dir.path().join("stack.alts");
    stack.write(&path, &Metadata::new()).unwrap();
    let map = dir.path().join("map.alts");
    let r = segal(&["score", "--input", p(&path), "--image-id", "7", "--score-map", p(&map)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let (id, score) = r.stdout.trim().split_once(',').unwrap();
    assert_eq!(id, "7");
    assert!((score.parse::<f64>().unwrap() - 0.368064).abs() < 1e-6);
    assert!(map.exists());

    let same = ProbabilityStack::new(3, 2, 1, 2, vec![0.3, 0.6, 0.7, 0.4].repeat(3)).unwrap();
    same.write(&path, &Metadata::new()).unwrap();
    let r = segal(&["score", "--input", p(&path)]);
    assert_eq!(r.stdout.trim(), "0,0");

    let img = segal::tensor::Image::new(1, 4, 4, vec![0.5; 16]).unwrap();
    let img_path = dir.path().join("img.alts");
    write_container(&img_path, &img.to_tensor(), &Metadata::new()).unwrap();
    let r = segal(&["score", "--input", p(&img_path)]);
    assert_ne!(r.code, 0);
    assert!(r.stderr.contains("checkpoint"));

    std::fs::write(&path, b"NOPE").unwrap();
    assert_eq!(segal(&["score", "--input", p(&path)]).code, 3);
}

#[test]
fn report_writes_stats_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from(
        "run_id,acquisition,repetition,iteration,n_labeled,iou_background,iou_crop,iou_weed,miou,seed\n",
    );
    for (acq, vals) in [("BALD", [1, 2, 3]), ("PowerBALD", [2, 3, 4]), ("Random", [3, 4, 5])] {
        for (rep, v) in vals.iter().enumerate() {
            text.push_str(&format!("r,{acq},{rep},0,10,,,,{v},0\n"));
        }
    }
    let curves = write(&dir.path().join("curves.csv"), &text);
    let out = dir.path().join("rep");
    let r = segal(&["report", p(&curves), "--out", p(&out), "--plot"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let stats = std::fs::read_to_string(out.join("stats.csv")).unwrap();
    let row: Vec<&str> = stats.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..4], &["0", "BALD", "PowerBALD", "Random"]);
    assert!((row[4].parse::<f64>().unwrap() - 3.0).abs() < 1e-9);
    assert!(out.join("curves.svg").exists());

    let other = write(&dir.path().join("other.csv"), "a,b\n1,2\n");
    assert_eq!(segal(&["report", p(&curves), p(&other), "--out", p(&out)]).code, 3);
}
